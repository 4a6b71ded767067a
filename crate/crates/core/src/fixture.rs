//! Disk-image fixtures: encrypted sectors with optionally known plaintext.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::aes::{hex, parse_hex};
use crate::crypto::xts::{XtsContext, XtsError, DEFAULT_SECTOR_SIZE};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Xts(#[from] XtsError),
    #[error("bad hex in sector {sector}: {message}")]
    Hex { sector: u64, message: String },
    #[error("known plaintext of sector {0} does not decrypt from its ciphertext")]
    Inconsistent(u64),
    #[error("sector count and known-plaintext count must be positive and known <= sectors")]
    Counts,
    #[error("duplicate sector number {0}")]
    Duplicate(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSector {
    pub sector: u64,
    pub ciphertext: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plaintext: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiskFixture {
    /// 64 hex chars, data key first.
    pub key: String,
    pub sector_size: usize,
    pub sectors: Vec<FixtureSector>,
}

impl DiskFixture {
    pub fn context(&self) -> Result<XtsContext, FixtureError> {
        Ok(XtsContext::from_key_blob(&self.key, self.sector_size)?)
    }

    pub fn ciphertext(&self, i: usize) -> Result<Vec<u8>, FixtureError> {
        let s = &self.sectors[i];
        parse_hex(&s.ciphertext).map_err(|message| FixtureError::Hex { sector: s.sector, message })
    }

    pub fn plaintext(&self, i: usize) -> Result<Option<Vec<u8>>, FixtureError> {
        let s = &self.sectors[i];
        s.plaintext
            .as_deref()
            .map(|p| parse_hex(p).map_err(|message| FixtureError::Hex { sector: s.sector, message }))
            .transpose()
    }

    pub fn known_count(&self) -> usize {
        self.sectors.iter().filter(|s| s.plaintext.is_some()).count()
    }

    /// Checks lengths, uniqueness and that known plaintexts decrypt.
    pub fn validate(&self) -> Result<(), FixtureError> {
        let ctx = self.context()?;
        let mut seen = HashSet::new();
        for (i, s) in self.sectors.iter().enumerate() {
            if !seen.insert(s.sector) {
                return Err(FixtureError::Duplicate(s.sector));
            }
            let ct = self.ciphertext(i)?;
            let pt = ctx.decrypt_sector(s.sector, &ct)?;
            if let Some(known) = self.plaintext(i)? {
                if known != pt {
                    return Err(FixtureError::Inconsistent(s.sector));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let f: DiskFixture = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }
}

/// Random keys and sectors; the first `known` sectors (in a shuffled order)
/// carry their plaintext.
pub fn make_fixture(seed: u64, sectors: usize, known: usize) -> Result<DiskFixture, FixtureError> {
    make_fixture_sized(seed, sectors, known, DEFAULT_SECTOR_SIZE)
}

pub fn make_fixture_sized(seed: u64, sectors: usize, known: usize, sector_size: usize) -> Result<DiskFixture, FixtureError> {
    if sectors == 0 || known > sectors {
        return Err(FixtureError::Counts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    let ctx = XtsContext::from_key_blob(&hex(&key), sector_size)?;
    let mut numbers = HashSet::new();
    while numbers.len() < sectors {
        numbers.insert(rng.gen_range(0..1u64 << 32));
    }
    let mut numbers: Vec<u64> = numbers.into_iter().collect();
    numbers.sort_unstable();
    rand::seq::SliceRandom::shuffle(numbers.as_mut_slice(), &mut rng);
    let mut out = Vec::with_capacity(sectors);
    for (i, &sector) in numbers.iter().enumerate() {
        let mut pt = vec![0u8; sector_size];
        rng.fill_bytes(&mut pt);
        let ct = ctx.encrypt_sector(sector, &pt)?;
        out.push(FixtureSector {
            sector,
            ciphertext: hex(&ct),
            plaintext: (i < known).then(|| hex(&pt)),
        });
    }
    Ok(DiskFixture {
        key: hex(&key),
        sector_size,
        sectors: out,
    })
}
