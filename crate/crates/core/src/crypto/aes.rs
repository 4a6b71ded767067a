//! T-table AES-128 in the shape of the kernel's generic implementation:
//! four 1 KiB round tables per direction plus a dedicated final-round table,
//! with every lookup recorded in an [`AccessScript`].
//!
//! State layout is column major: byte `i` sits in row `i % 4`, column `i / 4`.
//! Table words pack output row `r` into byte `r` (little endian).

use serde::{Deserialize, Serialize};

pub const ROUNDS: usize = 10;
pub const BLOCK: usize = 16;

pub type Block = [u8; BLOCK];

#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

pub const INV_SBOX: [u8; 256] = invert_sbox();

const fn invert_sbox() -> [u8; 256] {
    let mut inv = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        inv[SBOX[i] as usize] = i as u8;
        i += 1;
    }
    inv
}

pub const fn xtime(x: u8) -> u8 {
    (x << 1) ^ if x & 0x80 != 0 { 0x1b } else { 0 }
}

pub const fn gmul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        a = xtime(a);
        b >>= 1;
    }
    p
}

const fn pack(b: [u8; 4]) -> u32 {
    u32::from_le_bytes(b)
}

const fn enc_tables() -> [[u32; 256]; 5] {
    let mut t = [[0u32; 256]; 5];
    let mut x = 0;
    while x < 256 {
        let s = SBOX[x];
        let s2 = gmul(s, 2);
        let s3 = gmul(s, 3);
        t[0][x] = pack([s2, s, s, s3]);
        t[1][x] = pack([s3, s2, s, s]);
        t[2][x] = pack([s, s3, s2, s]);
        t[3][x] = pack([s, s, s3, s2]);
        t[4][x] = pack([s, s, s, s]);
        x += 1;
    }
    t
}

const fn dec_tables() -> [[u32; 256]; 5] {
    let mut t = [[0u32; 256]; 5];
    let mut x = 0;
    while x < 256 {
        let s = INV_SBOX[x];
        let (e, b, d, n) = (gmul(s, 14), gmul(s, 11), gmul(s, 13), gmul(s, 9));
        t[0][x] = pack([e, n, d, b]);
        t[1][x] = pack([b, e, n, d]);
        t[2][x] = pack([d, b, e, n]);
        t[3][x] = pack([n, d, b, e]);
        t[4][x] = pack([s, s, s, s]);
        x += 1;
    }
    t
}

/// Encryption tables T0..T3 followed by the final-round table.
pub static TE: [[u32; 256]; 5] = enc_tables();
/// Decryption tables T0..T3 followed by the final-round table.
pub static TD: [[u32; 256]; 5] = dec_tables();

/// Number of distinct lookup tables (five per direction).
pub const TABLE_COUNT: u8 = 10;
pub const FINAL_TABLE: u8 = 4;
pub const DECRYPT_TABLE_BASE: u8 = 5;
/// One table is 256 four-byte entries.
pub const TABLE_BYTES: u64 = 1024;
pub const LINES_PER_TABLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Encrypt,
    Decrypt,
}

impl Direction {
    /// Table id of round table `row` (0..4) or the final table (`row == 4`).
    pub fn table_id(self, row: u8) -> u8 {
        match self {
            Direction::Encrypt => row,
            Direction::Decrypt => DECRYPT_TABLE_BASE + row,
        }
    }

    pub fn of_table(table: u8) -> Direction {
        if table < DECRYPT_TABLE_BASE {
            Direction::Encrypt
        } else {
            Direction::Decrypt
        }
    }

    /// Column shift of row `r`: which input column feeds output column `c`.
    pub fn source_position(self, out_col: usize, row: usize) -> usize {
        let shift = match self {
            Direction::Encrypt => row,
            Direction::Decrypt => (4 - row) % 4,
        };
        4 * ((out_col + shift) % 4) + row
    }
}

pub fn table_entry(table: u8, index: u8) -> u32 {
    let t = table as usize;
    if t < DECRYPT_TABLE_BASE as usize {
        TE[t][index as usize]
    } else {
        TD[t - DECRYPT_TABLE_BASE as usize][index as usize]
    }
}

/// Cache line (0..16) of a table index.
pub fn line_of(index: u8) -> u8 {
    index >> 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableAccess {
    /// 1..=10.
    pub round: u8,
    pub table: u8,
    /// State byte position (0..16) that selects the entry.
    pub position: u8,
    pub index: u8,
}

pub type AccessScript = Vec<TableAccess>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AesKeySchedule {
    pub round_keys: [Block; ROUNDS + 1],
    pub inverse_round_keys: [Block; ROUNDS + 1],
}

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

fn next_round_key(prev: &Block, round: usize) -> Block {
    let mut out = [0u8; 16];
    let t = [
        SBOX[prev[13] as usize] ^ RCON[round - 1],
        SBOX[prev[14] as usize],
        SBOX[prev[15] as usize],
        SBOX[prev[12] as usize],
    ];
    for r in 0..4 {
        out[r] = prev[r] ^ t[r];
    }
    for i in 4..16 {
        out[i] = prev[i] ^ out[i - 4];
    }
    out
}

fn prev_round_key(next: &Block, round: usize) -> Block {
    let mut out = [0u8; 16];
    for i in (4..16).rev() {
        out[i] = next[i] ^ next[i - 4];
    }
    let t = [
        SBOX[out[13] as usize] ^ RCON[round - 1],
        SBOX[out[14] as usize],
        SBOX[out[15] as usize],
        SBOX[out[12] as usize],
    ];
    for r in 0..4 {
        out[r] = next[r] ^ t[r];
    }
    out
}

pub fn mix_column(col: [u8; 4]) -> [u8; 4] {
    let [a, b, c, d] = col;
    [
        gmul(a, 2) ^ gmul(b, 3) ^ c ^ d,
        a ^ gmul(b, 2) ^ gmul(c, 3) ^ d,
        a ^ b ^ gmul(c, 2) ^ gmul(d, 3),
        gmul(a, 3) ^ b ^ c ^ gmul(d, 2),
    ]
}

pub fn inv_mix_column(col: [u8; 4]) -> [u8; 4] {
    let [a, b, c, d] = col;
    [
        gmul(a, 14) ^ gmul(b, 11) ^ gmul(c, 13) ^ gmul(d, 9),
        gmul(a, 9) ^ gmul(b, 14) ^ gmul(c, 11) ^ gmul(d, 13),
        gmul(a, 13) ^ gmul(b, 9) ^ gmul(c, 14) ^ gmul(d, 11),
        gmul(a, 11) ^ gmul(b, 13) ^ gmul(c, 9) ^ gmul(d, 14),
    ]
}

fn map_columns(block: &Block, f: fn([u8; 4]) -> [u8; 4]) -> Block {
    let mut out = [0u8; 16];
    for c in 0..4 {
        let col = f([block[4 * c], block[4 * c + 1], block[4 * c + 2], block[4 * c + 3]]);
        out[4 * c..4 * c + 4].copy_from_slice(&col);
    }
    out
}

impl AesKeySchedule {
    pub fn expand(key: &Block) -> Self {
        let mut round_keys = [[0u8; 16]; ROUNDS + 1];
        round_keys[0] = *key;
        for r in 1..=ROUNDS {
            round_keys[r] = next_round_key(&round_keys[r - 1], r);
        }
        Self::from_round_keys(round_keys)
    }

    pub fn from_round_keys(round_keys: [Block; ROUNDS + 1]) -> Self {
        let mut inverse_round_keys = [[0u8; 16]; ROUNDS + 1];
        inverse_round_keys[0] = round_keys[ROUNDS];
        inverse_round_keys[ROUNDS] = round_keys[0];
        for i in 1..ROUNDS {
            inverse_round_keys[i] = map_columns(&round_keys[ROUNDS - i], inv_mix_column);
        }
        AesKeySchedule {
            round_keys,
            inverse_round_keys,
        }
    }

    /// Rebuilds the encrypt-order keys from equivalent-inverse-cipher keys.
    pub fn from_inverse_round_keys(inverse: [Block; ROUNDS + 1]) -> Self {
        let mut round_keys = [[0u8; 16]; ROUNDS + 1];
        round_keys[0] = inverse[ROUNDS];
        round_keys[ROUNDS] = inverse[0];
        for i in 1..ROUNDS {
            round_keys[ROUNDS - i] = map_columns(&inverse[i], mix_column);
        }
        Self::from_round_keys(round_keys)
    }

    /// Runs the key schedule backwards from the last round key.
    pub fn from_last_round_key(last: &Block) -> Self {
        let mut round_keys = [[0u8; 16]; ROUNDS + 1];
        round_keys[ROUNDS] = *last;
        for r in (1..=ROUNDS).rev() {
            round_keys[r - 1] = prev_round_key(&round_keys[r], r);
        }
        Self::from_round_keys(round_keys)
    }

    pub fn master_key(&self) -> Block {
        self.round_keys[0]
    }
}

pub fn aes128_expand_key(key: &Block) -> AesKeySchedule {
    AesKeySchedule::expand(key)
}

fn xor_block(a: &Block, b: &Block) -> Block {
    let mut out = [0u8; 16];
    for i in 0..16 {
        out[i] = a[i] ^ b[i];
    }
    out
}

/// One full table round: output column `c` XORs the four row tables at the
/// shifted source positions with the round key column. Lookups are appended
/// to `script` when given.
pub fn table_round(
    dir: Direction,
    state: &Block,
    round_key: &Block,
    round: u8,
    mut script: Option<&mut AccessScript>,
) -> Block {
    let tables = match dir {
        Direction::Encrypt => &TE,
        Direction::Decrypt => &TD,
    };
    let mut out = [0u8; 16];
    for c in 0..4 {
        let mut word = u32::from_le_bytes([
            round_key[4 * c],
            round_key[4 * c + 1],
            round_key[4 * c + 2],
            round_key[4 * c + 3],
        ]);
        for r in 0..4 {
            let pos = dir.source_position(c, r);
            let index = state[pos];
            let entry = if round as usize == ROUNDS {
                tables[FINAL_TABLE as usize][index as usize] & (0xff << (8 * r))
            } else {
                tables[r][index as usize]
            };
            word ^= entry;
            if let Some(s) = script.as_deref_mut() {
                s.push(TableAccess {
                    round,
                    table: dir.table_id(if round as usize == ROUNDS { FINAL_TABLE } else { r as u8 }),
                    position: pos as u8,
                    index,
                });
            }
        }
        out[4 * c..4 * c + 4].copy_from_slice(&word.to_le_bytes());
    }
    out
}

fn run(dir: Direction, block: &Block, keys: &[Block; ROUNDS + 1], mut script: Option<&mut AccessScript>) -> Block {
    let mut state = xor_block(block, &keys[0]);
    for round in 1..=ROUNDS {
        state = table_round(dir, &state, &keys[round], round as u8, script.as_deref_mut());
    }
    state
}

pub fn ttable_encrypt(block: &Block, schedule: &AesKeySchedule) -> (Block, AccessScript) {
    let mut script = Vec::with_capacity(16 * ROUNDS);
    let ct = run(Direction::Encrypt, block, &schedule.round_keys, Some(&mut script));
    (ct, script)
}

pub fn ttable_decrypt(block: &Block, schedule: &AesKeySchedule) -> (Block, AccessScript) {
    let mut script = Vec::with_capacity(16 * ROUNDS);
    let pt = run(Direction::Decrypt, block, &schedule.inverse_round_keys, Some(&mut script));
    (pt, script)
}

/// Encryption without script bookkeeping.
pub fn encrypt_block(block: &Block, schedule: &AesKeySchedule) -> Block {
    run(Direction::Encrypt, block, &schedule.round_keys, None)
}

pub fn decrypt_block(block: &Block, schedule: &AesKeySchedule) -> Block {
    run(Direction::Decrypt, block, &schedule.inverse_round_keys, None)
}

/// Round keys in the order a direction consumes them.
pub fn direction_keys(dir: Direction, schedule: &AesKeySchedule) -> &[Block; ROUNDS + 1] {
    match dir {
        Direction::Encrypt => &schedule.round_keys,
        Direction::Decrypt => &schedule.inverse_round_keys,
    }
}

/// Derives the remaining direction keys from the first whitening key of
/// that direction: the master key when encrypting, the last round key when
/// decrypting.
pub fn schedule_from_whitening(dir: Direction, key: &Block) -> AesKeySchedule {
    match dir {
        Direction::Encrypt => AesKeySchedule::expand(key),
        Direction::Decrypt => AesKeySchedule::from_last_round_key(key),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_hex(s: &str) -> Result<Vec<u8>, String> {
    let s = s.trim();
    if !s.len().is_multiple_of(2) {
        return Err(format!("odd-length hex string ({} chars)", s.len()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| format!("bad hex at {i}: {e}")))
        .collect()
}

pub fn parse_block(s: &str) -> Result<Block, String> {
    let v = parse_hex(s)?;
    v.try_into().map_err(|v: Vec<u8>| format!("expected 16 bytes, got {}", v.len()))
}
