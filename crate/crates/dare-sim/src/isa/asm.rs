//! Textual assembly form of the instruction stream.
//!
//! One instruction per line, comma-separated operands:
//!
//! ```text
//! mcfg, 1, 32
//! mld, m0, (0x10000), 64
//! mst, m2, (0x20000), 256
//! mma, m2, m0, m1
//! mgather, m3, (m6)
//! mscatter, m3, (m6)
//! ```
//!
//! CSR indices for `mcfg` are 0 = matrixM, 1 = matrixK, 2 = matrixN.
//! Addresses print as hex; strides as signed decimal. `#` starts a
//! comment. The loader re-decodes shape snapshots by tracking `mcfg`
//! writes from the reset shape (16, 64, 16), so dump -> load is exact
//! for any stream the generators emit.

use super::{apply_mcfg, CsrConfig, CsrField, Instruction, InstrKind, MReg};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic '{mnemonic}'")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: expected {expected} operands, found {found}")]
    OperandCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: bad operand '{text}'")]
    BadOperand { line: usize, text: String },
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        source: super::IsaError,
    },
}

pub fn format_instruction(instr: &Instruction) -> String {
    match instr.kind {
        InstrKind::Mcfg { field, value } => format!("mcfg, {}, {}", field.index(), value),
        InstrKind::Mld { dst, base, stride } => {
            format!("mld, {dst}, ({base:#x}), {stride}")
        }
        InstrKind::Mst { src, base, stride } => {
            format!("mst, {src}, ({base:#x}), {stride}")
        }
        InstrKind::Mma { dst, a, b } => format!("mma, {dst}, {a}, {b}"),
        InstrKind::Mgather { dst, addr } => format!("mgather, {dst}, ({addr})"),
        InstrKind::Mscatter { src, addr } => format!("mscatter, {src}, ({addr})"),
    }
}

pub fn format_program(instrs: &[Instruction]) -> String {
    let mut out = String::new();
    for instr in instrs {
        out.push_str(&format_instruction(instr));
        out.push('\n');
    }
    out
}

fn parse_reg(text: &str, line: usize) -> Result<MReg, AsmError> {
    let bad = || AsmError::BadOperand {
        line,
        text: text.to_string(),
    };
    let idx = text.strip_prefix('m').ok_or_else(bad)?;
    let idx: u8 = idx.parse().map_err(|_| bad())?;
    MReg::new(idx).map_err(|_| bad())
}

fn parse_paren_reg(text: &str, line: usize) -> Result<MReg, AsmError> {
    let inner = text
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| AsmError::BadOperand {
            line,
            text: text.to_string(),
        })?;
    parse_reg(inner, line)
}

fn parse_u64(text: &str, line: usize) -> Result<u64, AsmError> {
    let bad = || AsmError::BadOperand {
        line,
        text: text.to_string(),
    };
    if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).map_err(|_| bad())
    } else {
        text.parse().map_err(|_| bad())
    }
}

fn parse_paren_addr(text: &str, line: usize) -> Result<u64, AsmError> {
    let inner = text
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| AsmError::BadOperand {
            line,
            text: text.to_string(),
        })?;
    parse_u64(inner, line)
}

fn parse_i64(text: &str, line: usize) -> Result<i64, AsmError> {
    text.parse().map_err(|_| AsmError::BadOperand {
        line,
        text: text.to_string(),
    })
}

/// Parses a program, assigning fresh sequential ids and re-deriving
/// shape snapshots from the `mcfg` stream.
pub fn parse_program(text: &str) -> Result<Vec<Instruction>, AsmError> {
    let mut cfg = CsrConfig::default();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let parts: Vec<&str> = stripped.split(',').map(str::trim).collect();
        let mnemonic = parts[0];
        let ops = &parts[1..];
        let expect = |n: usize| -> Result<(), AsmError> {
            if ops.len() == n {
                Ok(())
            } else {
                Err(AsmError::OperandCount {
                    line,
                    expected: n,
                    found: ops.len(),
                })
            }
        };
        let kind = match mnemonic {
            "mcfg" => {
                expect(2)?;
                let idx = parse_u64(ops[0], line)?;
                let field = CsrField::from_index(idx).ok_or_else(|| AsmError::BadOperand {
                    line,
                    text: ops[0].to_string(),
                })?;
                let value = parse_u64(ops[1], line)?;
                cfg = apply_mcfg(cfg, field, value).map_err(|source| AsmError::Decode { line, source })?;
                InstrKind::Mcfg { field, value }
            }
            "mld" => {
                expect(3)?;
                InstrKind::Mld {
                    dst: parse_reg(ops[0], line)?,
                    base: parse_paren_addr(ops[1], line)?,
                    stride: parse_i64(ops[2], line)?,
                }
            }
            "mst" => {
                expect(3)?;
                InstrKind::Mst {
                    src: parse_reg(ops[0], line)?,
                    base: parse_paren_addr(ops[1], line)?,
                    stride: parse_i64(ops[2], line)?,
                }
            }
            "mma" => {
                expect(3)?;
                InstrKind::Mma {
                    dst: parse_reg(ops[0], line)?,
                    a: parse_reg(ops[1], line)?,
                    b: parse_reg(ops[2], line)?,
                }
            }
            "mgather" => {
                expect(2)?;
                InstrKind::Mgather {
                    dst: parse_reg(ops[0], line)?,
                    addr: parse_paren_reg(ops[1], line)?,
                }
            }
            "mscatter" => {
                expect(2)?;
                InstrKind::Mscatter {
                    src: parse_reg(ops[0], line)?,
                    addr: parse_paren_reg(ops[1], line)?,
                }
            }
            other => {
                return Err(AsmError::UnknownMnemonic {
                    line,
                    mnemonic: other.to_string(),
                })
            }
        };
        out.push(Instruction {
            id: out.len() as u64,
            shape: cfg,
            kind,
        });
    }
    Ok(out)
}
