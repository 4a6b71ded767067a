//! The victim: T-table AES-128, XTS-plain64 and the guest-program compiler.

pub mod aes;
pub mod victim;
pub mod xts;

pub use aes::{
    aes128_expand_key, ttable_decrypt, ttable_encrypt, AccessScript, AesKeySchedule, Block, Direction, TableAccess,
};
pub use victim::{compile_to_program, CompileOptions, CompiledVictim, Manifest, TTableSet, VictimLayout};
pub use xts::{xts_mul_alpha, SectorScripts, XtsContext};
