//! Consortium ledger state machine: transaction validation, permissioning,
//! block application and committed-state snapshots.
//!
//! Permissions:
//!
//! | kind                                              | author                          |
//! |---------------------------------------------------|---------------------------------|
//! | DID_REG                                           | anyone, self-signed by new key  |
//! | SCHEMA, CRED_DEF, CRED_REG, CRED_REVOKE, DID_REVOKE | registrar listed in genesis   |
//! | ROTATE                                            | the DID itself, old active key  |

mod block;
mod commitment;
mod state;
mod store;
mod txn;

pub use block::{Block, Genesis, NodeId, NodeIdentity};
pub use state::{
    apply_block, snapshot, validate_txn, AppliedBlock, CredentialRecord, LedgerState, LedgerView,
    Rejection, TxnOutcome, TIMESTAMP_SKEW_S,
};
pub use store::{read_blocks, BlockStore};
pub use txn::{CredentialRegistration, Transaction, TxnKind, TxnPayload, TxnStamp};

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("expected height {expected}, got {found}")]
    HeightMismatch { expected: u64, found: u64 },
    #[error("block {height} does not link to the current head")]
    BrokenChain { height: u64 },
    #[error("block {height} has a timestamp before its parent")]
    TimeRegression { height: u64 },
    #[error("block {height} state root does not match execution")]
    StateRootMismatch { height: u64 },
    #[error("genesis data outside block 0")]
    UnexpectedGenesis,
    #[error("chain has no genesis block")]
    MissingGenesis,
    #[error("corrupt block store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
