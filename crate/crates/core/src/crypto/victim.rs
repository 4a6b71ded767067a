//! Compiles traced XTS sector decryptions into a guest program laid out like
//! the kernel's crypto code, and boots a VM around it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::aes::{Direction, TableAccess, DECRYPT_TABLE_BASE, FINAL_TABLE, ROUNDS, TABLE_BYTES, TABLE_COUNT};
use super::xts::SectorScripts;
use crate::guest::{
    page_base, page_number, GuestError, GuestProgram, GuestTiming, Instruction, OpcodeClass, PageEntry, Vm,
    DEFAULT_HANDLER_GPA, INSTRUCTION_BYTES, PAGE_SIZE,
};

#[derive(Debug, Error)]
pub enum VictimError {
    #[error("layout collision: {0}")]
    Collision(String),
    #[error(transparent)]
    Guest(#[from] GuestError),
}

/// Page offsets (relative to the text base) of the modeled crypto functions.
pub mod pages {
    pub const XTS_DECRYPT: u64 = 0x65c;
    pub const ENCRYPT_ONE: u64 = 0x64b;
    pub const AES_ENCRYPT: u64 = 0x65f;
    pub const ECB_DECRYPT: u64 = 0x65b;
    pub const AES_DECRYPT: u64 = 0x660;
    /// Number of pages in the modeled kernel text.
    pub const TEXT_PAGES: u64 = 0x700;
}

/// Page sequence of one traced sector decryption, relative to the text base.
pub const XTS_FINGERPRINT: [u64; 7] = [0x65c, 0x64b, 0x65f, 0x660, 0x65b, 0x660, 0x661];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Function {
    XtsDecrypt,
    EncryptOne,
    AesEncrypt,
    EcbDecrypt,
    AesDecrypt,
}

impl Function {
    pub const ALL: [Function; 5] = [
        Function::XtsDecrypt,
        Function::EncryptOne,
        Function::AesEncrypt,
        Function::EcbDecrypt,
        Function::AesDecrypt,
    ];

    /// Start of the function relative to the text base, in bytes.
    pub fn start_offset(self) -> u64 {
        let (page, within) = match self {
            Function::XtsDecrypt => (pages::XTS_DECRYPT, 0x100),
            Function::EncryptOne => (pages::ENCRYPT_ONE, 0x200),
            Function::AesEncrypt => (pages::AES_ENCRYPT, 0xe00),
            Function::EcbDecrypt => (pages::ECB_DECRYPT, 0x300),
            Function::AesDecrypt => (pages::AES_DECRYPT, 0xe00),
        };
        page * PAGE_SIZE + within
    }

    pub fn name(self) -> &'static str {
        match self {
            Function::XtsDecrypt => "xts_decrypt",
            Function::EncryptOne => "crypto_cipher_encrypt_one",
            Function::AesEncrypt => "crypto_aes_encrypt",
            Function::EcbDecrypt => "ecb_decrypt",
            Function::AesDecrypt => "crypto_aes_decrypt",
        }
    }

    pub fn direction(self) -> Option<Direction> {
        match self {
            Function::AesEncrypt => Some(Direction::Encrypt),
            Function::AesDecrypt => Some(Direction::Decrypt),
            _ => None,
        }
    }

    fn wrapper_length(self) -> usize {
        match self {
            Function::XtsDecrypt => 12,
            _ => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOptions {
    /// Place a fence after every table load.
    pub fences: bool,
    /// Payload blocks of each sector that are traced (decrypted in the program).
    pub blocks_traced: usize,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            fences: false,
            blocks_traced: 1,
        }
    }
}

const PROLOGUE: usize = 8;
const EPILOGUE_STORES: usize = 4;
const EPILOGUE_TAIL: usize = 4;

/// Guest placement of the lookup tables. Encrypt T0..T3 share a page, the
/// final table sits on the next one; decryption likewise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTableSet {
    pub base_gpa: [u64; TABLE_COUNT as usize],
}

impl TTableSet {
    pub fn at(rodata: u64) -> Self {
        let mut base_gpa = [0u64; TABLE_COUNT as usize];
        for t in 0..TABLE_COUNT {
            let dir_base = if t < DECRYPT_TABLE_BASE { rodata } else { rodata + 2 * PAGE_SIZE };
            let row = (t % DECRYPT_TABLE_BASE) as u64;
            base_gpa[t as usize] = if row == FINAL_TABLE as u64 {
                dir_base + PAGE_SIZE
            } else {
                dir_base + row * TABLE_BYTES
            };
        }
        TTableSet { base_gpa }
    }

    pub fn entry_gpa(&self, table: u8, index: u8) -> u64 {
        self.base_gpa[table as usize] + 4 * index as u64
    }

    pub fn pages(&self) -> Vec<u64> {
        let mut pages: Vec<u64> = self.base_gpa.iter().map(|&g| page_base(g)).collect();
        pages.sort_unstable();
        pages.dedup();
        pages
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VictimLayout {
    pub text_base: u64,
    pub tables: TTableSet,
    pub tweak_ctx: u64,
    pub data_ctx: u64,
    pub src: u64,
    pub dst: u64,
}

impl VictimLayout {
    /// Picks a random 2 MiB aligned text base, the way KASLR does per boot.
    pub fn boot(rng: &mut impl Rng) -> Self {
        let text_base = (0x1000 + 0x200 * rng.gen_range(0..64u64)) * PAGE_SIZE;
        Self::with_text_base(text_base)
    }

    pub fn with_text_base(text_base: u64) -> Self {
        let rodata = text_base + 0x800 * PAGE_SIZE;
        let data = text_base + 0x900 * PAGE_SIZE;
        VictimLayout {
            text_base,
            tables: TTableSet::at(rodata),
            tweak_ctx: data,
            data_ctx: data + PAGE_SIZE,
            src: data + 2 * PAGE_SIZE,
            dst: data + 3 * PAGE_SIZE,
        }
    }

    pub fn function_address(&self, f: Function) -> u64 {
        self.text_base + f.start_offset()
    }

    pub fn text_pages(&self) -> impl Iterator<Item = u64> + '_ {
        (0..pages::TEXT_PAGES).map(move |p| self.text_base + p * PAGE_SIZE)
    }

    pub fn data_pages(&self) -> Vec<u64> {
        vec![self.tweak_ctx, self.data_ctx, self.src, self.dst]
    }

    /// Page offset of a text address relative to the text base.
    pub fn page_offset(&self, gpa: u64) -> Option<u64> {
        let base = page_number(self.text_base);
        let pn = page_number(gpa);
        (pn >= base && pn < base + pages::TEXT_PAGES).then(|| pn - base)
    }

    /// Every guest page the victim VM maps.
    pub fn all_pages(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self.text_pages().collect();
        all.extend(self.tables.pages());
        all.extend(self.data_pages());
        all.push(DEFAULT_HANDLER_GPA);
        all
    }

    fn check(&self) -> Result<(), VictimError> {
        let mut all = self.all_pages();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(VictimError::Collision("tables or data overlap code pages".into()));
        }
        Ok(())
    }
}

/// Table-load offsets of one AES function, as recovered by offline analysis
/// of the binary: instruction ordinal since function entry and the lookup
/// it performs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionManifest {
    pub function: Function,
    pub instructions: usize,
    /// (instruction offset, round, table, position).
    pub table_accesses: Vec<(usize, u8, u8, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub functions: Vec<FunctionManifest>,
}

impl Manifest {
    pub fn function(&self, f: Function) -> Option<&FunctionManifest> {
        self.functions.iter().find(|m| m.function == f)
    }
}

/// Ground truth for one instruction of the compiled program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessTag {
    pub op: usize,
    pub function: Function,
    pub access: TableAccess,
}

#[derive(Debug, Clone)]
pub struct CompiledVictim {
    pub program: GuestProgram,
    pub manifest: Manifest,
    /// Per instruction: the table lookup it performs, if any.
    pub tags: Vec<Option<AccessTag>>,
    /// First instruction index of every function invocation, in order.
    pub calls: Vec<(usize, Function)>,
}

struct Emitter<'a> {
    layout: &'a VictimLayout,
    opts: CompileOptions,
    instructions: Vec<Instruction>,
    code: Vec<u64>,
    tags: Vec<Option<AccessTag>>,
    calls: Vec<(usize, Function)>,
}

impl Emitter<'_> {
    fn push(&mut self, insn: Instruction, addr: u64, tag: Option<AccessTag>) {
        self.instructions.push(insn);
        self.code.push(addr);
        self.tags.push(tag);
    }

    fn wrapper(&mut self, f: Function) {
        let base = self.layout.function_address(f);
        self.calls.push((self.instructions.len(), f));
        for i in 0..f.wrapper_length() {
            self.push(Instruction::new(OpcodeClass::Generic), base + i as u64 * INSTRUCTION_BYTES, None);
        }
    }

    /// Emits one AES block operation and returns its manifest.
    fn aes(&mut self, f: Function, op: usize, script: &[TableAccess]) -> FunctionManifest {
        let dir = f.direction().expect("AES function");
        let base = self.layout.function_address(f);
        let start = self.instructions.len();
        self.calls.push((start, f));
        let ctx = match dir {
            Direction::Encrypt => self.layout.tweak_ctx,
            Direction::Decrypt => self.layout.data_ctx + 256,
        };
        let mut n = 0u64;
        let mut manifest = FunctionManifest {
            function: f,
            instructions: 0,
            table_accesses: Vec::with_capacity(script.len()),
        };
        let mut next = |em: &mut Self, insn: Instruction, tag: Option<AccessTag>| {
            em.push(insn, base + n * INSTRUCTION_BYTES, tag);
            n += 1;
        };
        for _ in 0..PROLOGUE {
            next(self, Instruction::new(OpcodeClass::Generic), None);
        }
        for (i, access) in script.iter().enumerate() {
            let table_addr = self.layout.tables.entry_gpa(access.table, access.index);
            let mem = if i == 0 {
                vec![self.layout.src, ctx, table_addr]
            } else {
                vec![table_addr]
            };
            let offset = self.instructions.len() - start;
            manifest
                .table_accesses
                .push((offset, access.round, access.table, access.position));
            let tag = AccessTag {
                op,
                function: f,
                access: *access,
            };
            next(
                self,
                Instruction::new(OpcodeClass::Load).with_mem(mem).with_table(access.table),
                Some(tag),
            );
            if self.opts.fences {
                next(self, Instruction::new(OpcodeClass::Fence), None);
            }
            if i % 4 == 3 {
                // Round-key column XOR.
                let round = access.round as u64;
                let col = (i / 4) as u64 % 4;
                let rk = ctx + 16 * round + 4 * col;
                next(self, Instruction::new(OpcodeClass::Generic).with_mem([rk]), None);
            }
        }
        for i in 0..EPILOGUE_STORES {
            next(
                self,
                Instruction::new(OpcodeClass::Store).with_mem([self.layout.dst + 4 * i as u64]),
                None,
            );
        }
        for _ in 0..EPILOGUE_TAIL {
            next(self, Instruction::new(OpcodeClass::Generic), None);
        }
        manifest.instructions = self.instructions.len() - start;
        manifest
    }
}

/// Compiles traced sector operations into one guest program.
pub fn compile_to_program(
    sectors: &[SectorScripts],
    layout: &VictimLayout,
    opts: CompileOptions,
) -> Result<CompiledVictim, VictimError> {
    layout.check()?;
    let mut em = Emitter {
        layout,
        opts,
        instructions: Vec::new(),
        code: Vec::new(),
        tags: Vec::new(),
        calls: Vec::new(),
    };
    let mut enc_manifest = None;
    let mut dec_manifest = None;
    let mut op = 0;
    for sector in sectors {
        em.wrapper(Function::XtsDecrypt);
        em.wrapper(Function::EncryptOne);
        enc_manifest = Some(em.aes(Function::AesEncrypt, op, &sector.tweak));
        op += 1;
        for block in sector.blocks.iter().take(opts.blocks_traced.max(1)) {
            em.wrapper(Function::EcbDecrypt);
            dec_manifest = Some(em.aes(Function::AesDecrypt, op, block));
            op += 1;
        }
    }
    let program = GuestProgram::new(em.instructions, em.code)?;
    let manifest = Manifest {
        functions: enc_manifest.into_iter().chain(dec_manifest).collect(),
    };
    Ok(CompiledVictim {
        program,
        manifest,
        tags: em.tags,
        calls: em.calls,
    })
}

/// Manifest of the AES functions for the given options, independent of keys.
pub fn offline_manifest(opts: CompileOptions) -> Manifest {
    let layout = VictimLayout::with_text_base(0x100_0000);
    let enc: Vec<TableAccess> = dummy_script(Direction::Encrypt);
    let dec: Vec<TableAccess> = dummy_script(Direction::Decrypt);
    let sector = SectorScripts {
        tweak: enc,
        blocks: vec![dec],
    };
    compile_to_program(&[sector], &layout, opts)
        .expect("reference layout is valid")
        .manifest
}

fn dummy_script(dir: Direction) -> Vec<TableAccess> {
    let mut out = Vec::with_capacity(16 * ROUNDS);
    for round in 1..=ROUNDS as u8 {
        for c in 0..4 {
            for r in 0..4 {
                let table = if round as usize == ROUNDS { FINAL_TABLE } else { r as u8 };
                out.push(TableAccess {
                    round,
                    table: dir.table_id(table),
                    position: dir.source_position(c, r) as u8,
                    index: 0,
                });
            }
        }
    }
    out
}

/// Unrelated kernel activity: a random walk over text pages that avoids the
/// AES functions' pages.
pub fn control_workload(layout: &VictimLayout, rng: &mut impl Rng, length: usize) -> Result<GuestProgram, VictimError> {
    let excluded = [
        pages::XTS_DECRYPT,
        pages::ENCRYPT_ONE,
        pages::AES_ENCRYPT,
        pages::AES_ENCRYPT + 1,
        pages::ECB_DECRYPT,
        pages::AES_DECRYPT + 1,
    ];
    let candidates: Vec<u64> = (0..pages::TEXT_PAGES).filter(|p| !excluded.contains(p)).collect();
    let mut instructions = Vec::with_capacity(length);
    let mut code = Vec::with_capacity(length);
    let mut page = *candidates.choose(rng).expect("candidate pages");
    let mut offset = 0u64;
    for _ in 0..length {
        if rng.gen_bool(0.2) || offset >= PAGE_SIZE {
            page = *candidates.choose(rng).expect("candidate pages");
            offset = rng.gen_range(0..PAGE_SIZE / INSTRUCTION_BYTES) * INSTRUCTION_BYTES;
        }
        instructions.push(Instruction::new(OpcodeClass::Generic));
        code.push(layout.text_base + page * PAGE_SIZE + offset);
        offset += INSTRUCTION_BYTES;
    }
    Ok(GuestProgram::new(instructions, code)?)
}

/// Number of page colors (PFN residues sharing cache sets) for a geometry.
pub fn page_colors(sets: usize, line_size: usize) -> u64 {
    ((sets * line_size) as u64 / PAGE_SIZE).max(1)
}

/// Host frames handed to the victim start here; attacker memory lives above
/// [`ATTACKER_HOST_BASE`].
pub const VICTIM_HOST_BASE: u64 = 0x4_0000;
pub const ATTACKER_HOST_BASE: u64 = 0x10_0000;

/// Builds the victim VM: every layout page is mapped to a random host frame.
/// Lookup-table pages get host colors no other victim data page uses.
pub fn boot_vm(
    program: GuestProgram,
    layout: &VictimLayout,
    timing: GuestTiming,
    colors: u64,
    rng: &mut impl Rng,
) -> Result<Vm, VictimError> {
    layout.check()?;
    let table_pages = layout.tables.pages();
    let mut used = std::collections::HashSet::new();
    let mut table_colors = Vec::new();
    let mut entries = Vec::new();
    let pick = |rng: &mut dyn rand::RngCore, forbid: &[u64], used: &mut std::collections::HashSet<u64>| loop {
        let hpa = rng.gen_range(VICTIM_HOST_BASE..ATTACKER_HOST_BASE);
        if !used.contains(&hpa) && !forbid.contains(&(hpa % colors)) {
            used.insert(hpa);
            return hpa;
        }
    };
    for &gpa in &table_pages {
        let hpa = pick(rng, &table_colors, &mut used);
        table_colors.push(hpa % colors);
        entries.push(PageEntry::new(page_number(gpa), hpa));
    }
    let forbid = if (table_colors.len() as u64) < colors {
        table_colors.clone()
    } else {
        Vec::new()
    };
    for gpa in layout.data_pages() {
        let hpa = pick(rng, &forbid, &mut used);
        entries.push(PageEntry::new(page_number(gpa), hpa));
    }
    for gpa in layout.text_pages().chain([DEFAULT_HANDLER_GPA]) {
        let hpa = pick(rng, &[], &mut used);
        entries.push(PageEntry::new(page_number(gpa), hpa));
    }
    Ok(Vm::new(program, entries, timing)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::xts::XtsContext;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sector(ctx: &XtsContext, n: u64) -> SectorScripts {
        ctx.xts_decrypt_sector(n, &vec![0u8; ctx.sector_size]).unwrap().1
    }

    fn pages_visited(compiled: &CompiledVictim, layout: &VictimLayout) -> Vec<u64> {
        let mut seq: Vec<u64> = Vec::new();
        for &addr in &compiled.program.code_layout {
            let off = layout.page_offset(addr).unwrap();
            if seq.last() != Some(&off) {
                seq.push(off);
            }
        }
        seq
    }

    #[test]
    fn one_block_visits_fingerprint_pages() {
        let ctx = XtsContext::new([1; 16], [2; 16], 512).unwrap();
        let layout = VictimLayout::with_text_base(0x200_0000);
        let compiled = compile_to_program(&[sector(&ctx, 5)], &layout, CompileOptions::default()).unwrap();
        assert_eq!(pages_visited(&compiled, &layout), XTS_FINGERPRINT.to_vec());
    }

    #[test]
    fn loads_hit_table_entries() {
        let ctx = XtsContext::new([1; 16], [2; 16], 512).unwrap();
        let layout = VictimLayout::with_text_base(0x200_0000);
        let compiled = compile_to_program(&[sector(&ctx, 9)], &layout, CompileOptions::default()).unwrap();
        let mut loads = 0;
        for (insn, tag) in compiled.program.instructions.iter().zip(&compiled.tags) {
            if let Some(tag) = tag {
                let addr = *insn.mem_operands.last().unwrap();
                assert_eq!(addr, layout.tables.entry_gpa(tag.access.table, tag.access.index));
                assert_eq!(insn.table_id, Some(tag.access.table));
                loads += 1;
            }
        }
        assert_eq!(loads, 320);
    }

    #[test]
    fn manifest_matches_program() {
        let opts = CompileOptions::default();
        let m = offline_manifest(opts);
        let enc = m.function(Function::AesEncrypt).unwrap();
        assert_eq!(enc.instructions, PROLOGUE + 160 + 40 + EPILOGUE_STORES + EPILOGUE_TAIL);
        assert_eq!(enc.table_accesses.len(), 160);
        assert_eq!(enc.table_accesses[0].0, PROLOGUE);
    }

    #[test]
    fn fences_are_emitted_on_request() {
        let ctx = XtsContext::new([1; 16], [2; 16], 512).unwrap();
        let layout = VictimLayout::with_text_base(0x200_0000);
        let opts = CompileOptions { fences: true, blocks_traced: 1 };
        let compiled = compile_to_program(&[sector(&ctx, 1)], &layout, opts).unwrap();
        let fences = compiled.program.instructions.iter().filter(|i| i.is_fence()).count();
        assert_eq!(fences, 320);
        assert_eq!(pages_visited(&compiled, &layout), XTS_FINGERPRINT.to_vec());
    }

    #[test]
    fn round_one_line_is_high_nibble_of_key() {
        let layout = VictimLayout::with_text_base(0x200_0000);
        for k in 0x30..=0x3fu8 {
            let gpa = layout.tables.entry_gpa(0, k);
            assert_eq!((gpa - layout.tables.base_gpa[0]) / 64, 3);
        }
    }

    #[test]
    fn tables_are_line_aligned_and_sixteen_lines() {
        let layout = VictimLayout::boot(&mut ChaCha8Rng::seed_from_u64(3));
        for &b in &layout.tables.base_gpa {
            assert_eq!(b % 64, 0);
            assert_eq!(page_base(b), page_base(b + TABLE_BYTES - 1));
        }
    }

    #[test]
    fn table_pages_get_private_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = VictimLayout::boot(&mut rng);
        let prog = control_workload(&layout, &mut rng, 10).unwrap();
        let vm = boot_vm(prog, &layout, GuestTiming::default(), 16, &mut rng).unwrap();
        let colors: Vec<u64> = layout.tables.pages().iter().map(|&g| vm.page(g).unwrap().hpa % 16).collect();
        for gpa in layout.data_pages() {
            assert!(!colors.contains(&(vm.page(gpa).unwrap().hpa % 16)));
        }
    }

    #[test]
    fn control_workload_avoids_aes_pages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = VictimLayout::boot(&mut rng);
        let prog = control_workload(&layout, &mut rng, 5000).unwrap();
        for &a in &prog.code_layout {
            let off = layout.page_offset(a).unwrap();
            assert!(![0x65c, 0x64b, 0x65f, 0x660, 0x65b, 0x661].contains(&off));
        }
    }
}
