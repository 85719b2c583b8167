use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::IdentityError;
use crate::crypto::{Digest, PublicKey};

const PREFIX: &str = "did:vdkms:";
const PEER_PREFIX: &str = "did:vdkms:peer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DidMethod {
    /// Ledger-anchored identifier, `did:vdkms:<id>`.
    Public,
    /// Pairwise identifier, `did:vdkms:peer:<id>`. Never written to the ledger.
    Peer,
}

impl DidMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DidMethod::Public => "vdkms",
            DidMethod::Peer => "vdkms:peer",
        }
    }
}

/// Self-certifying identifier: base58 of the SHA-256 digest of an Ed25519 public key.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Did {
    method: DidMethod,
    identifier: String,
}

impl Did {
    pub fn from_public_key(pk: &PublicKey, method: DidMethod) -> Did {
        let digest = Digest::of(pk.as_bytes());
        Did {
            method,
            identifier: bs58::encode(digest.as_bytes()).into_string(),
        }
    }

    pub fn method(&self) -> DidMethod {
        self.method
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }

    pub fn is_peer(&self) -> bool {
        self.method == DidMethod::Peer
    }

    /// True if `pk` is the key this identifier was derived from.
    pub fn is_derived_from(&self, pk: &PublicKey) -> bool {
        *self == Did::from_public_key(pk, self.method)
    }
}

/// Derives a DID from raw public-key bytes.
pub fn did_from_key(pk: &[u8], peer: bool) -> Result<Did, IdentityError> {
    let pk = PublicKey::from_slice(pk).map_err(|_| IdentityError::MalformedKey)?;
    let method = if peer {
        DidMethod::Peer
    } else {
        DidMethod::Public
    };
    Ok(Did::from_public_key(&pk, method))
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            DidMethod::Public => write!(f, "{PREFIX}{}", self.identifier),
            DidMethod::Peer => write!(f, "{PEER_PREFIX}{}", self.identifier),
        }
    }
}

impl fmt::Debug for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Did({self})")
    }
}

impl FromStr for Did {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (method, rest) = if let Some(rest) = s.strip_prefix(PEER_PREFIX) {
            (DidMethod::Peer, rest)
        } else if let Some(rest) = s.strip_prefix(PREFIX) {
            (DidMethod::Public, rest)
        } else {
            return Err(IdentityError::Parse(s.to_string()));
        };
        let raw = bs58::decode(rest)
            .into_vec()
            .map_err(|_| IdentityError::Parse(s.to_string()))?;
        if raw.len() != 32 {
            return Err(IdentityError::Parse(s.to_string()));
        }
        // re-encode so that non-canonical spellings (leading '1's etc.) are rejected
        let canonical = bs58::encode(&raw).into_string();
        if canonical != rest {
            return Err(IdentityError::Parse(s.to_string()));
        }
        Ok(Did {
            method,
            identifier: canonical,
        })
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
