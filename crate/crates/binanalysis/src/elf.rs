//! ELF loading: sections, symbols and import stubs.

use std::collections::{BTreeMap, BTreeSet};

use goblin::elf::header::{EM_AARCH64, EM_X86_64};
use goblin::elf::reloc::{
    R_AARCH64_ABS64, R_AARCH64_GLOB_DAT, R_AARCH64_JUMP_SLOT, R_AARCH64_RELATIVE, R_X86_64_64, R_X86_64_GLOB_DAT,
    R_X86_64_JUMP_SLOT, R_X86_64_RELATIVE,
};
use goblin::elf::section_header::{SHF_ALLOC, SHF_EXECINSTR, SHF_WRITE, SHT_NOBITS};
use goblin::elf::sym::STT_FUNC;
use goblin::elf::Elf;
use serde::Serialize;
use thiserror::Error;
use yaxpeax_arch::{Decoder, U8Reader};
use yaxpeax_arm::armv8::a64::{InstDecoder, Opcode, Operand};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BinError {
    #[error("unsupported architecture (e_machine {0})")]
    UnsupportedArch(u16),
    #[error("malformed ELF: {0}")]
    MalformedElf(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Aarch64,
    X86_64,
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub vaddr: u64,
    pub size: u64,
    /// Empty for NOBITS sections.
    pub data: Vec<u8>,
    pub exec: bool,
    pub write: bool,
    pub nobits: bool,
}

impl Section {
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.vaddr && addr < self.vaddr + self.size
    }
}

/// Base of the synthetic address range that GOT slots of imported symbols
/// resolve to. A load from such a slot yields `IMPORT_BASE + index`.
pub const IMPORT_BASE: u64 = 0xffff_f000_0000_0000;

#[derive(Clone, Debug)]
pub struct BinaryImage {
    pub arch: Arch,
    pub entry: u64,
    /// Allocated sections, sorted by address, non-overlapping.
    pub sections: Vec<Section>,
    /// Call targets that stand for external symbols: PLT stubs and the
    /// synthetic GOT values.
    pub imports: BTreeMap<u64, String>,
    /// Defined functions by address.
    pub symbols: BTreeMap<u64, String>,
    pub dynamic: bool,
    pub has_symtab: bool,
}

impl BinaryImage {
    pub fn section_at(&self, addr: u64) -> Option<&Section> {
        let idx = self.sections.partition_point(|s| s.vaddr <= addr);
        let s = self.sections.get(idx.checked_sub(1)?)?;
        s.contains(addr).then_some(s)
    }

    /// Initial content of one byte, `None` for NOBITS or unmapped.
    pub fn byte(&self, addr: u64) -> Option<u8> {
        let s = self.section_at(addr)?;
        if s.nobits {
            return None;
        }
        s.data.get((addr - s.vaddr) as usize).copied()
    }

    pub fn read(&self, addr: u64, len: usize) -> Option<Vec<u8>> {
        (0..len as u64).map(|i| self.byte(addr.wrapping_add(i))).collect()
    }

    pub fn read_u64(&self, addr: u64) -> Option<u64> {
        let b = self.read(addr, 8)?;
        Some(u64::from_le_bytes(b.try_into().ok()?))
    }

    /// NUL-terminated string at `addr` (without the terminator).
    pub fn cstring(&self, addr: u64, max: usize) -> Option<Vec<u8>> {
        let mut out = Vec::new();
        for i in 0..max as u64 {
            match self.byte(addr.wrapping_add(i))? {
                0 => return Some(out),
                b => out.push(b),
            }
        }
        None
    }

    pub fn is_exec(&self, addr: u64) -> bool {
        self.section_at(addr).is_some_and(|s| s.exec)
    }

    pub fn is_plt(&self, addr: u64) -> bool {
        self.section_at(addr).is_some_and(|s| s.name.starts_with(".plt") || s.name == ".iplt")
    }

    /// Name of the function or import at `addr`.
    pub fn name_at(&self, addr: u64) -> Option<&str> {
        self.imports.get(&addr).or_else(|| self.symbols.get(&addr)).map(String::as_str)
    }

    pub fn is_import(&self, addr: u64) -> bool {
        self.imports.contains_key(&addr)
    }

    /// Statically linked with no symbol table left to name functions.
    pub fn is_static_stripped(&self) -> bool {
        !self.dynamic && !self.has_symtab
    }

    /// Address of an import by name, if any.
    pub fn import_addr(&self, name: &str) -> Option<u64> {
        self.imports.iter().find(|(_, n)| n.as_str() == name).map(|(a, _)| *a)
    }
}

pub fn load_elf(bytes: &[u8]) -> Result<BinaryImage, BinError> {
    let elf = Elf::parse(bytes).map_err(|e| BinError::MalformedElf(e.to_string()))?;
    let arch = match elf.header.e_machine {
        EM_AARCH64 => Arch::Aarch64,
        EM_X86_64 => Arch::X86_64,
        other => return Err(BinError::UnsupportedArch(other)),
    };
    if !elf.little_endian || !elf.is_64 {
        return Err(BinError::UnsupportedArch(elf.header.e_machine));
    }

    let mut sections = Vec::new();
    for sh in &elf.section_headers {
        if sh.sh_flags & u64::from(SHF_ALLOC) == 0 || sh.sh_size == 0 {
            continue;
        }
        let name = elf.shdr_strtab.get_at(sh.sh_name).unwrap_or("").to_string();
        let nobits = sh.sh_type == SHT_NOBITS;
        let data = if nobits {
            Vec::new()
        } else {
            let start = sh.sh_offset as usize;
            let end = start
                .checked_add(sh.sh_size as usize)
                .filter(|e| *e <= bytes.len())
                .ok_or_else(|| BinError::MalformedElf(format!("section {name} out of file bounds")))?;
            bytes[start..end].to_vec()
        };
        sections.push(Section {
            name,
            vaddr: sh.sh_addr,
            size: sh.sh_size,
            data,
            exec: sh.sh_flags & u64::from(SHF_EXECINSTR) != 0,
            write: sh.sh_flags & u64::from(SHF_WRITE) != 0,
            nobits,
        });
    }
    sections.sort_by_key(|s| s.vaddr);
    for w in sections.windows(2) {
        if w[0].vaddr + w[0].size > w[1].vaddr {
            return Err(BinError::MalformedElf(format!("sections {} and {} overlap", w[0].name, w[1].name)));
        }
    }

    let mut image = BinaryImage {
        arch,
        entry: elf.entry,
        sections,
        imports: BTreeMap::new(),
        symbols: BTreeMap::new(),
        dynamic: elf.dynamic.is_some() || elf.interpreter.is_some(),
        has_symtab: false,
    };

    for sym in elf.syms.iter() {
        if sym.st_type() == STT_FUNC && sym.st_value != 0 && sym.st_shndx != 0 {
            if let Some(name) = elf.strtab.get_at(sym.st_name).filter(|n| !n.is_empty()) {
                image.symbols.entry(sym.st_value).or_insert_with(|| name.to_string());
                image.has_symtab = true;
            }
        }
    }
    for sym in elf.dynsyms.iter() {
        if sym.st_type() == STT_FUNC && sym.st_value != 0 && sym.st_shndx != 0 {
            if let Some(name) = elf.dynstrtab.get_at(sym.st_name).filter(|n| !n.is_empty()) {
                image.symbols.entry(sym.st_value).or_insert_with(|| name.to_string());
            }
        }
    }

    let dynsym_name = |idx: usize| -> Option<String> {
        let sym = elf.dynsyms.get(idx)?;
        elf.dynstrtab.get_at(sym.st_name).filter(|n| !n.is_empty()).map(str::to_string)
    };

    let (jump_slot, glob_dat, relative, abs64) = match arch {
        Arch::Aarch64 => (R_AARCH64_JUMP_SLOT, R_AARCH64_GLOB_DAT, R_AARCH64_RELATIVE, R_AARCH64_ABS64),
        Arch::X86_64 => (R_X86_64_JUMP_SLOT, R_X86_64_GLOB_DAT, R_X86_64_RELATIVE, R_X86_64_64),
    };
    // GOT slot -> imported name
    let mut slots: BTreeMap<u64, String> = BTreeMap::new();
    let mut patches: Vec<(u64, u64)> = Vec::new();
    let mut next_import = 0u64;
    let mut synthetic: BTreeMap<String, u64> = BTreeMap::new();
    let mut synth_for = |name: &str| -> u64 {
        *synthetic.entry(name.to_string()).or_insert_with(|| {
            next_import += 1;
            IMPORT_BASE + next_import * 16
        })
    };
    for rel in elf.pltrelocs.iter().chain(elf.dynrelas.iter()).chain(elf.dynrels.iter()) {
        let t = rel.r_type;
        if t == jump_slot || t == glob_dat || t == abs64 {
            if let Some(name) = dynsym_name(rel.r_sym) {
                let addr = synth_for(&name);
                if t == jump_slot {
                    slots.insert(rel.r_offset, name.clone());
                }
                patches.push((rel.r_offset, addr.wrapping_add(rel.r_addend.unwrap_or(0) as u64)));
            }
        } else if t == relative {
            if let Some(addend) = rel.r_addend {
                patches.push((rel.r_offset, addend as u64));
            }
        }
    }
    for (name, addr) in &synthetic {
        image.imports.insert(*addr, name.clone());
    }
    for (slot, value) in patches {
        patch_u64(&mut image.sections, slot, value);
    }

    let plt_stubs = match arch {
        Arch::Aarch64 => scan_plt_aarch64(&image, &slots),
        Arch::X86_64 => scan_plt_x86(&image, &slots),
    };
    image.imports.extend(plt_stubs);
    Ok(image)
}

fn patch_u64(sections: &mut [Section], addr: u64, value: u64) {
    if let Some(s) = sections.iter_mut().find(|s| s.contains(addr) && !s.nobits) {
        let off = (addr - s.vaddr) as usize;
        if off + 8 <= s.data.len() {
            s.data[off..off + 8].copy_from_slice(&value.to_le_bytes());
        }
    }
}

/// lld/bfd stubs: `adrp x16, page; ldr x17, [x16, #off]; add; br x17`.
fn scan_plt_aarch64(image: &BinaryImage, slots: &BTreeMap<u64, String>) -> BTreeMap<u64, String> {
    let mut out = BTreeMap::new();
    let dec = InstDecoder::default();
    for s in image.sections.iter().filter(|s| s.exec && s.name.starts_with(".plt")) {
        let mut page: Option<(u64, u64)> = None; // (adrp addr, page)
        for (i, word) in s.data.chunks_exact(4).enumerate() {
            let pc = s.vaddr + 4 * i as u64;
            let mut reader = U8Reader::new(word);
            let Ok(ins) = dec.decode(&mut reader) else {
                page = None;
                continue;
            };
            match (ins.opcode, ins.operands[0], ins.operands[1]) {
                (Opcode::ADRP, Operand::Register(_, 16), Operand::PCOffset(off)) => {
                    page = Some((pc, (pc & !0xfff).wrapping_add(off as u64)));
                }
                (Opcode::LDR, Operand::Register(_, 17), Operand::RegPreIndex(16, off, false)) => {
                    if let Some((start, base)) = page.take() {
                        let slot = base.wrapping_add(off as i64 as u64);
                        if let Some(name) = slots.get(&slot) {
                            out.insert(start, name.clone());
                        }
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// Entries start with (optionally `endbr64` then) `jmp [rip+slot]`.
fn scan_plt_x86(image: &BinaryImage, slots: &BTreeMap<u64, String>) -> BTreeMap<u64, String> {
    use iced_x86::{Decoder as X86Decoder, DecoderOptions, Mnemonic, OpKind};
    let mut out = BTreeMap::new();
    for s in image.sections.iter().filter(|s| s.exec && s.name.starts_with(".plt")) {
        let mut dec = X86Decoder::with_ip(64, &s.data, s.vaddr, DecoderOptions::NONE);
        let mut prev_endbr: Option<u64> = None;
        while dec.can_decode() {
            let ins = dec.decode();
            if ins.mnemonic() == Mnemonic::Endbr64 {
                prev_endbr = Some(ins.ip());
                continue;
            }
            if ins.mnemonic() == Mnemonic::Jmp
                && ins.op_count() == 1
                && ins.op0_kind() == OpKind::Memory
                && ins.is_ip_rel_memory_operand()
            {
                if let Some(name) = slots.get(&ins.ip_rel_memory_address()) {
                    out.insert(ins.ip(), name.clone());
                    if let Some(e) = prev_endbr {
                        out.insert(e, name.clone());
                    }
                }
            }
            prev_endbr = None;
        }
    }
    out
}

/// Heuristic function starts for binaries without symbols.
pub fn prologue_starts(image: &BinaryImage) -> BTreeSet<u64> {
    let mut out = BTreeSet::new();
    for s in image.sections.iter().filter(|s| s.exec && !s.name.starts_with(".plt")) {
        match image.arch {
            Arch::Aarch64 => {
                let dec = InstDecoder::default();
                for (i, word) in s.data.chunks_exact(4).enumerate() {
                    let pc = s.vaddr + 4 * i as u64;
                    let mut reader = U8Reader::new(word);
                    let Ok(ins) = dec.decode(&mut reader) else { continue };
                    if ins.opcode == Opcode::STP
                        && ins.operands[0] == Operand::Register(yaxpeax_arm::armv8::a64::SizeCode::X, 29)
                        && matches!(ins.operands[2], Operand::RegPreIndex(31, off, true) if off < 0)
                    {
                        out.insert(pc);
                    }
                }
            }
            Arch::X86_64 => {
                let d = &s.data;
                for off in (0..d.len()).step_by(16) {
                    let rest = &d[off..];
                    let body = rest.strip_prefix(&[0xf3, 0x0f, 0x1e, 0xfa][..]).unwrap_or(rest);
                    if body.starts_with(&[0x55, 0x48, 0x89, 0xe5]) {
                        out.insert(s.vaddr + off as u64);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(load_elf(&[1, 2, 3, 4]), Err(BinError::MalformedElf(_))));
        assert!(matches!(load_elf(b""), Err(BinError::MalformedElf(_))));
    }
}
