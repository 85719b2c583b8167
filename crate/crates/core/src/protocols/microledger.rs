//! Local hash-chained log of pairwise relationships.

use serde::{Deserialize, Serialize};

use crate::crypto::{to_canonical_bytes, verify, Digest, KeyPair, PublicKey, Signature};
use crate::identity::Did;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroledgerTxn {
    pub pair: (Did, Did),
    pub created_at: u64,
    /// Digest of the previous entry, or zero for the first.
    pub prev: Digest,
    /// Pairwise key of the party that wrote the entry.
    pub author_key: PublicKey,
    pub author_signature: Signature,
}

#[derive(Serialize)]
struct Unsigned<'a> {
    pair: &'a (Did, Did),
    created_at: u64,
    prev: &'a Digest,
    author_key: &'a PublicKey,
}

impl MicroledgerTxn {
    fn signing_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(&Unsigned {
            pair: &self.pair,
            created_at: self.created_at,
            prev: &self.prev,
            author_key: &self.author_key,
        })
    }

    pub fn digest(&self) -> Digest {
        Digest::of_canonical(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microledger {
    pub entries: Vec<MicroledgerTxn>,
    pub head: Digest,
}

impl Default for Microledger {
    fn default() -> Self {
        Microledger {
            entries: Vec::new(),
            head: Digest::ZERO,
        }
    }
}

impl Microledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn append(&mut self, pair: (Did, Did), key: &KeyPair, created_at: u64) -> &MicroledgerTxn {
        let mut txn = MicroledgerTxn {
            pair,
            created_at,
            prev: self.head,
            author_key: key.public_key(),
            author_signature: Signature([0; 64]),
        };
        txn.author_signature = key.sign(&txn.signing_bytes());
        self.head = txn.digest();
        self.entries.push(txn);
        self.entries.last().expect("just pushed")
    }

    /// Walks the chain; on failure returns the index of the first bad entry.
    pub fn verify(&self) -> Result<(), usize> {
        let mut prev = Digest::ZERO;
        for (i, e) in self.entries.iter().enumerate() {
            if e.prev != prev || !verify(&e.author_key, &e.signing_bytes(), &e.author_signature) {
                return Err(i);
            }
            prev = e.digest();
        }
        if prev != self.head {
            return Err(self.entries.len().saturating_sub(1));
        }
        Ok(())
    }

    /// Whether some entry links `a` and `b`, in either order.
    pub fn links(&self, a: &Did, b: &Did) -> bool {
        self.entries
            .iter()
            .any(|e| (&e.pair.0 == a && &e.pair.1 == b) || (&e.pair.0 == b && &e.pair.1 == a))
    }
}
