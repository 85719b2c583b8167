//! Incrementally maintained digest over the ledger's key-value maps.
//!
//! Each entry is hashed as H(canonical key ‖ canonical value). Entries are
//! spread over 256 buckets by the first byte of H(key); a bucket digest covers
//! its entries in key order, and the state root covers the 256 bucket
//! digests. Only buckets touched by a block are rehashed.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::crypto::{to_canonical_bytes, Digest};

const BUCKETS: usize = 256;

#[derive(Debug, Clone)]
pub(crate) struct StateCommitment {
    buckets: Vec<im::OrdMap<Vec<u8>, Digest>>,
    bucket_digests: Vec<Digest>,
    dirty: BTreeSet<u8>,
    root: Digest,
}

impl Default for StateCommitment {
    fn default() -> Self {
        let mut c = StateCommitment {
            buckets: vec![im::OrdMap::new(); BUCKETS],
            bucket_digests: vec![Digest::ZERO; BUCKETS],
            dirty: BTreeSet::new(),
            root: Digest::ZERO,
        };
        c.root = c.compute_root();
        c
    }
}

impl StateCommitment {
    pub fn put<K: Serialize + ?Sized, V: Serialize + ?Sized>(
        &mut self,
        map: &str,
        key: &K,
        value: &V,
    ) {
        let key_bytes = entry_key(map, key);
        let entry = Digest::of_parts(&[&key_bytes, &to_canonical_bytes(value)]);
        let b = bucket_of(&key_bytes);
        self.buckets[b as usize].insert(key_bytes, entry);
        self.dirty.insert(b);
    }

    /// Rehashes dirty buckets and returns the new root.
    pub fn finalize(&mut self) -> Digest {
        if self.dirty.is_empty() {
            return self.root;
        }
        for b in std::mem::take(&mut self.dirty) {
            let bucket = &self.buckets[b as usize];
            self.bucket_digests[b as usize] = if bucket.is_empty() {
                Digest::ZERO
            } else {
                let mut parts: Vec<&[u8]> = Vec::with_capacity(bucket.len() * 2);
                for (k, d) in bucket.iter() {
                    parts.push(k);
                    parts.push(d.as_bytes());
                }
                Digest::of_parts(&parts)
            };
        }
        self.root = self.compute_root();
        self.root
    }

    pub fn root(&self) -> Digest {
        debug_assert!(self.dirty.is_empty(), "root read before finalize");
        self.root
    }

    fn compute_root(&self) -> Digest {
        let mut parts: Vec<&[u8]> = Vec::with_capacity(BUCKETS + 1);
        parts.push(b"vdkms/state-root/v1");
        for d in &self.bucket_digests {
            parts.push(d.as_bytes());
        }
        Digest::of_parts(&parts)
    }
}

fn entry_key<K: Serialize + ?Sized>(map: &str, key: &K) -> Vec<u8> {
    to_canonical_bytes(&(map, key))
}

fn bucket_of(key_bytes: &[u8]) -> u8 {
    Digest::of(key_bytes).0[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_does_not_matter() {
        let mut a = StateCommitment::default();
        let mut b = StateCommitment::default();
        for i in 0..200u32 {
            a.put("m", &i, &format!("v{i}"));
        }
        for i in (0..200u32).rev() {
            b.put("m", &i, &format!("v{i}"));
        }
        assert_eq!(a.finalize(), b.finalize());
    }

    #[test]
    fn value_change_changes_root() {
        let mut c = StateCommitment::default();
        c.put("m", "k", &1);
        let r1 = c.finalize();
        c.put("m", "k", &2);
        assert_ne!(c.finalize(), r1);
    }

    #[test]
    fn map_name_is_part_of_key() {
        let mut a = StateCommitment::default();
        let mut b = StateCommitment::default();
        a.put("x", "k", &1);
        b.put("y", "k", &1);
        assert_ne!(a.finalize(), b.finalize());
    }
}
