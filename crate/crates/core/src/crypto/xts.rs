//! XTS-plain64 over the T-table AES: tweak = AES(tweak-key, sector as a
//! little-endian 128-bit integer), multiplied by alpha for every block.

use thiserror::Error;

use super::aes::{
    decrypt_block, encrypt_block, parse_hex, ttable_decrypt, ttable_encrypt, AccessScript, AesKeySchedule, Block,
    BLOCK,
};

pub const DEFAULT_SECTOR_SIZE: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XtsError {
    #[error("sector size {0} is not a positive multiple of 16")]
    SectorSize(usize),
    #[error("data length {got} does not match the sector size {expected}")]
    Length { expected: usize, got: usize },
    #[error("key blob must be 32 bytes (64 hex chars): {0}")]
    KeyBlob(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XtsContext {
    pub data_key: Block,
    pub tweak_key: Block,
    pub sector_size: usize,
    data: AesKeySchedule,
    tweak: AesKeySchedule,
}

/// Doubles a tweak in GF(2^128), little-endian byte order.
pub fn xts_mul_alpha(tweak: &Block) -> Block {
    let mut out = [0u8; 16];
    let mut carry = 0u8;
    for i in 0..BLOCK {
        out[i] = (tweak[i] << 1) | carry;
        carry = tweak[i] >> 7;
    }
    if carry != 0 {
        out[0] ^= 0x87;
    }
    out
}

pub fn sector_iv(sector: u64) -> Block {
    (sector as u128).to_le_bytes()
}

fn xor(a: &Block, b: &Block) -> Block {
    let mut out = *a;
    for i in 0..BLOCK {
        out[i] ^= b[i];
    }
    out
}

/// Lookups of one traced sector operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorScripts {
    pub tweak: AccessScript,
    pub blocks: Vec<AccessScript>,
}

impl XtsContext {
    pub fn new(data_key: Block, tweak_key: Block, sector_size: usize) -> Result<Self, XtsError> {
        if sector_size == 0 || !sector_size.is_multiple_of(BLOCK) {
            return Err(XtsError::SectorSize(sector_size));
        }
        Ok(XtsContext {
            data_key,
            tweak_key,
            sector_size,
            data: AesKeySchedule::expand(&data_key),
            tweak: AesKeySchedule::expand(&tweak_key),
        })
    }

    /// Parses a 64 hex char blob, data key first.
    pub fn from_key_blob(blob: &str, sector_size: usize) -> Result<Self, XtsError> {
        let bytes = parse_hex(blob).map_err(XtsError::KeyBlob)?;
        if bytes.len() != 32 {
            return Err(XtsError::KeyBlob(format!("got {} bytes", bytes.len())));
        }
        let mut data = [0u8; 16];
        let mut tweak = [0u8; 16];
        data.copy_from_slice(&bytes[..16]);
        tweak.copy_from_slice(&bytes[16..]);
        Self::new(data, tweak, sector_size)
    }

    pub fn key_blob(&self) -> String {
        let mut blob = super::aes::hex(&self.data_key);
        blob.push_str(&super::aes::hex(&self.tweak_key));
        blob
    }

    pub fn data_schedule(&self) -> &AesKeySchedule {
        &self.data
    }

    pub fn tweak_schedule(&self) -> &AesKeySchedule {
        &self.tweak
    }

    pub fn initial_tweak(&self, sector: u64) -> Block {
        encrypt_block(&sector_iv(sector), &self.tweak)
    }

    /// Tweaks of every block in a sector.
    pub fn tweaks(&self, sector: u64) -> Vec<Block> {
        let mut t = self.initial_tweak(sector);
        let mut out = Vec::with_capacity(self.sector_size / BLOCK);
        for _ in 0..self.sector_size / BLOCK {
            out.push(t);
            t = xts_mul_alpha(&t);
        }
        out
    }

    fn check_len(&self, data: &[u8]) -> Result<(), XtsError> {
        if data.len() != self.sector_size {
            return Err(XtsError::Length {
                expected: self.sector_size,
                got: data.len(),
            });
        }
        Ok(())
    }

    pub fn encrypt_sector(&self, sector: u64, plaintext: &[u8]) -> Result<Vec<u8>, XtsError> {
        self.check_len(plaintext)?;
        let mut out = Vec::with_capacity(plaintext.len());
        for (chunk, t) in plaintext.chunks_exact(BLOCK).zip(self.tweaks(sector)) {
            let p: Block = chunk.try_into().expect("chunk of 16");
            out.extend_from_slice(&xor(&encrypt_block(&xor(&p, &t), &self.data), &t));
        }
        Ok(out)
    }

    pub fn decrypt_sector(&self, sector: u64, ciphertext: &[u8]) -> Result<Vec<u8>, XtsError> {
        self.check_len(ciphertext)?;
        let mut out = Vec::with_capacity(ciphertext.len());
        for (chunk, t) in ciphertext.chunks_exact(BLOCK).zip(self.tweaks(sector)) {
            let c: Block = chunk.try_into().expect("chunk of 16");
            out.extend_from_slice(&xor(&decrypt_block(&xor(&c, &t), &self.data), &t));
        }
        Ok(out)
    }

    /// Decrypts and returns the tweak-generation script plus one payload
    /// script per block.
    pub fn xts_decrypt_sector(&self, sector: u64, ciphertext: &[u8]) -> Result<(Vec<u8>, SectorScripts), XtsError> {
        self.check_len(ciphertext)?;
        let (mut t, tweak_script) = ttable_encrypt(&sector_iv(sector), &self.tweak);
        let mut out = Vec::with_capacity(ciphertext.len());
        let mut blocks = Vec::with_capacity(ciphertext.len() / BLOCK);
        for chunk in ciphertext.chunks_exact(BLOCK) {
            let c: Block = chunk.try_into().expect("chunk of 16");
            let (p, script) = ttable_decrypt(&xor(&c, &t), &self.data);
            out.extend_from_slice(&xor(&p, &t));
            blocks.push(script);
            t = xts_mul_alpha(&t);
        }
        Ok((
            out,
            SectorScripts {
                tweak: tweak_script,
                blocks,
            },
        ))
    }
}

pub fn xor_blocks(a: &Block, b: &Block) -> Block {
    xor(a, b)
}
