//! Decentralized key management for vehicular networks.
//!
//! Vehicles, registrars and service providers hold DIDs anchored on a
//! permissioned ledger replicated by a BFT consortium. Registrars issue
//! credentials whose attributes are committed on-chain; vehicles present
//! them with selective disclosure and then talk to providers over pairwise
//! peer DIDs.

pub mod consensus;
pub mod credentials;
pub mod crypto;
pub mod embedded;
pub mod identity;
pub mod ledger;
pub mod protocols;
pub mod simnet;

#[cfg(test)]
mod testutil;
