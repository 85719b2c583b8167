//! Append-only block file: each record is a u32 little-endian length followed
//! by the block's canonical JSON. State is rebuilt by replay.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use super::block::Block;
use super::state::LedgerState;
use super::LedgerError;
use crate::crypto::{from_canonical_bytes, to_canonical_bytes};

#[derive(Debug)]
pub struct BlockStore {
    path: PathBuf,
    file: File,
}

impl BlockStore {
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)?;
        Ok(BlockStore {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, block: &Block) -> Result<(), LedgerError> {
        let bytes = to_canonical_bytes(block);
        let mut rec = Vec::with_capacity(bytes.len() + 4);
        rec.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        rec.extend_from_slice(&bytes);
        self.file.write_all(&rec)?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<Block>, LedgerError> {
        read_blocks(&self.path)
    }

    pub fn replay(&self) -> Result<LedgerState, LedgerError> {
        LedgerState::replay(&self.read_all()?)
    }
}

pub fn read_blocks(path: &Path) -> Result<Vec<Block>, LedgerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut blocks = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut buf)
            .map_err(|_| LedgerError::Corrupt("truncated block record".into()))?;
        let block: Block =
            from_canonical_bytes(&buf).map_err(|e| LedgerError::Corrupt(e.to_string()))?;
        blocks.push(block);
    }
    Ok(blocks)
}
