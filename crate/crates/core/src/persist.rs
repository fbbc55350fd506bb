//! Binary containers for subsystem abstractions and controllers, and a JSON
//! export of controllers.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` caller fingerprint,
//! then the header fields and payload, all little-endian. Sequences are a
//! `u64` length followed by the elements.

use std::io::{self, Read, Write};

use serde_json::{json, Value};
use thiserror::Error;

use crate::abstraction::SubsystemAbstraction;
use crate::geometry::{ComponentSet, Shape};
use crate::synthesis::{FixpointStats, SafetyController};

pub const CONTROLLER_MAGIC: &[u8; 8] = b"SYMCTLC\0";
pub const ABSTRACTION_MAGIC: &[u8; 8] = b"SYMCTLA\0";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any stored sequence, to fail early on corrupt lengths.
const MAX_LEN: u64 = 1 << 36;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file is truncated")]
    Truncated,
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for PersistError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            PersistError::Truncated
        } else {
            PersistError::Io(e)
        }
    }
}

fn corrupt(msg: impl Into<String>) -> PersistError {
    PersistError::Corrupt(msg.into())
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }

    fn components(&mut self, c: &ComponentSet) -> io::Result<()> {
        self.u64(c.len() as u64)?;
        c.iter().try_for_each(|i| self.u32(i as u32))
    }

    fn shape(&mut self, s: &Shape) -> io::Result<()> {
        self.u64(s.rank() as u64)?;
        s.extents().iter().try_for_each(|&e| self.u32(e))
    }

    fn header(&mut self, magic: &[u8; 8], fingerprint: u64, sigma: usize) -> io::Result<()> {
        self.0.write_all(magic)?;
        self.u32(FORMAT_VERSION)?;
        self.u64(fingerprint)?;
        self.u32(sigma as u32)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], PersistError> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self) -> Result<usize, PersistError> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(corrupt(format!("sequence length {n}")));
        }
        Ok(n as usize)
    }

    fn components(&mut self) -> Result<ComponentSet, PersistError> {
        let n = self.len()?;
        let v = (0..n).map(|_| self.u32().map(|i| i as usize)).collect::<Result<Vec<_>, _>>()?;
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(corrupt("component list is not strictly increasing"));
        }
        Ok(ComponentSet::new(v))
    }

    fn shape(&mut self) -> Result<Shape, PersistError> {
        let n = self.len()?;
        let v = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        Shape::try_new(v).ok_or_else(|| corrupt("shape size overflows"))
    }

    fn header(&mut self, magic: &[u8; 8], expected: &'static str) -> Result<(u64, usize), PersistError> {
        if &self.bytes::<8>()? != magic {
            return Err(PersistError::BadMagic { expected });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(PersistError::UnsupportedVersion(version));
        }
        let fingerprint = self.u64()?;
        Ok((fingerprint, self.u32()? as usize))
    }

    fn end(&mut self) -> Result<(), PersistError> {
        let mut b = [0u8; 1];
        match self.0.read(&mut b)? {
            0 => Ok(()),
            _ => Err(corrupt("trailing bytes")),
        }
    }
}

pub fn write_controller<W: Write>(w: W, c: &SafetyController, fingerprint: u64) -> Result<(), PersistError> {
    let mut w = Writer(io::BufWriter::new(w));
    w.header(CONTROLLER_MAGIC, fingerprint, c.sigma)?;
    w.components(&c.modeled)?;
    w.components(&c.inputs)?;
    w.shape(&c.cell_shape)?;
    w.shape(&c.input_shape)?;
    let bits = c.raw_bits();
    w.u64(bits.len() as u64)?;
    for &b in bits {
        w.u64(b)?;
    }
    w.0.flush()?;
    Ok(())
}

/// Returns the controller and the fingerprint it was written with.
pub fn read_controller<R: Read>(r: R) -> Result<(SafetyController, u64), PersistError> {
    let mut r = Reader(io::BufReader::new(r));
    let (fingerprint, sigma) = r.header(CONTROLLER_MAGIC, "controller")?;
    let modeled = r.components()?;
    let inputs = r.components()?;
    let cell_shape = r.shape()?;
    let input_shape = r.shape()?;
    if cell_shape.rank() != modeled.len() || input_shape.rank() != inputs.len() {
        return Err(corrupt("shape rank differs from its component list"));
    }
    let words = (input_shape.size() as usize).div_ceil(64);
    let n = r.len()?;
    if Some(n) != words.checked_mul(cell_shape.size() as usize) {
        return Err(corrupt("bitset length does not match the shapes"));
    }
    let bits = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    let spare = words * 64 - input_shape.size() as usize;
    if spare > 0 && bits.chunks(words).any(|row| row[words - 1] >> (64 - spare) != 0) {
        return Err(corrupt("bits set beyond the input count"));
    }
    r.end()?;
    Ok((
        SafetyController {
            sigma,
            modeled,
            inputs,
            cell_shape,
            input_shape,
            words,
            bits,
            stats: FixpointStats::default(),
        },
        fingerprint,
    ))
}

pub fn write_abstraction<W: Write>(w: W, a: &SubsystemAbstraction, fingerprint: u64) -> Result<(), PersistError> {
    let mut w = Writer(io::BufWriter::new(w));
    w.header(ABSTRACTION_MAGIC, fingerprint, a.sigma)?;
    w.components(&a.modeled)?;
    w.components(&a.controlled)?;
    w.components(&a.inputs)?;
    w.shape(&a.cell_shape)?;
    w.shape(&a.input_shape)?;
    w.u64(a.reach_calls)?;
    let flags = a.raw_flags();
    w.u64(flags.len() as u64)?;
    w.0.write_all(flags)?;
    let bounds = a.raw_bounds();
    w.u64(bounds.len() as u64)?;
    for &b in bounds {
        w.0.write_all(&b.to_le_bytes())?;
    }
    w.0.flush()?;
    Ok(())
}

/// Returns the abstraction and the fingerprint it was written with.
pub fn read_abstraction<R: Read>(r: R) -> Result<(SubsystemAbstraction, u64), PersistError> {
    let mut r = Reader(io::BufReader::new(r));
    let (fingerprint, sigma) = r.header(ABSTRACTION_MAGIC, "abstraction")?;
    let modeled = r.components()?;
    let controlled = r.components()?;
    let inputs = r.components()?;
    let cell_shape = r.shape()?;
    let input_shape = r.shape()?;
    if cell_shape.rank() != modeled.len() || input_shape.rank() != inputs.len() {
        return Err(corrupt("shape rank differs from its component list"));
    }
    if !controlled.is_subset(&modeled) {
        return Err(corrupt("controlled components are not modeled"));
    }
    let reach_calls = r.u64()?;
    let pairs = (cell_shape.size() as usize)
        .checked_mul(input_shape.size() as usize)
        .ok_or_else(|| corrupt("pair count overflows"))?;
    let n = r.len()?;
    if n != pairs {
        return Err(corrupt("flag count does not match the shapes"));
    }
    let mut flags = vec![0u8; n];
    r.0.read_exact(&mut flags)?;
    let k = modeled.len();
    let n = r.len()?;
    if Some(n) != pairs.checked_mul(2 * k) {
        return Err(corrupt("bound count does not match the shapes"));
    }
    let bounds = (0..n)
        .map(|_| r.bytes::<2>().map(u16::from_le_bytes))
        .collect::<Result<Vec<_>, _>>()?;
    r.end()?;
    let a = SubsystemAbstraction {
        sigma,
        modeled,
        controlled,
        inputs,
        cell_shape,
        input_shape,
        bounds,
        flags,
        reach_calls,
    };
    for p in 0..a.n_pairs() {
        if let Some((l, u)) = a.range_slices(p) {
            let ok = (0..k).all(|i| l[i] <= u[i] && (u[i] as u32) < a.cell_shape.extents()[i]);
            if !ok {
                return Err(corrupt(format!("successor range of pair {p} is out of bounds")));
            }
        }
    }
    Ok((a, fingerprint))
}

/// Controller as JSON: header fields and the allowed local input ids of every
/// domain cell.
pub fn controller_to_json(c: &SafetyController) -> Value {
    let cells: Vec<Value> = (0..c.n_cells())
        .filter(|&s| c.in_domain(s))
        .map(|s| {
            json!({
                "cell": c.cell_shape().unflat(s),
                "allowed": c.allowed(s).map(|u| c.input_shape().unflat(u)).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "sigma": c.sigma(),
        "modeled": c.modeled(),
        "inputs": c.input_components(),
        "cell_extents": c.cell_shape().extents(),
        "input_extents": c.input_shape().extents(),
        "domain_size": c.domain_size(),
        "cells": cells,
    })
}
