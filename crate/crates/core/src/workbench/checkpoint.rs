//! Binary checkpoint container.
//!
//! ```text
//! magic    5 bytes  "FOUR1"
//! version  u16 LE
//! meta     u32 LE length + UTF-8 key=value lines
//! tensor*  until EOF:
//!   name   u32 LE length + UTF-8
//!   dtype  u8 (0 = f64, 1 = f32)
//!   ndim   u8
//!   dims   u32 LE each
//!   data   row-major LE scalars
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::adapter::{AdapterLayer, GateMode, GateState, Transform};
use crate::error::{FouraError, Result};
use crate::matrix::Matrix;
use crate::spectral::Axis;

pub const MAGIC: &[u8; 5] = b"FOUR1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(FouraError::CheckpointFormat(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Widened to f64 for f32 tensors.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64,
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64,
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.data.clone()),
            _ => Err(FouraError::CheckpointFormat(format!(
                "tensor `{}` has dims {:?}, expected a matrix",
                self.name, self.dims
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    /// Kept verbatim; see [`Checkpoint::meta_map`].
    pub meta: String,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(meta: String, tensors: Vec<Tensor>) -> Self {
        Self {
            version: VERSION,
            meta,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| FouraError::CheckpointFormat(format!("missing tensor `{name}`")))
    }

    pub fn meta_map(&self) -> BTreeMap<String, String> {
        self.meta
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        write_str(w, &self.meta)?;
        for t in &self.tensors {
            let expect: usize = t.dims.iter().product();
            if expect != t.data.len() {
                return Err(FouraError::CheckpointFormat(format!(
                    "tensor `{}`: dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            if t.dims.len() > u8::MAX as usize {
                return Err(FouraError::CheckpointFormat("too many dimensions".into()));
            }
            write_str(w, &t.name)?;
            w.write_all(&[t.dtype.code(), t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&u32_len(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for &x in &t.data {
                match t.dtype {
                    DType::F64 => buf.extend_from_slice(&x.to_le_bytes()),
                    DType::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(5)? != MAGIC {
            return Err(FouraError::CheckpointFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(FouraError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let meta = cur.string()?;
        let mut tensors = Vec::new();
        while cur.pos < bytes.len() {
            let name = cur.string()?;
            let head = cur.take(2)?;
            let dtype = DType::from_code(head[0])?;
            let ndim = head[1] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FouraError::CheckpointFormat("tensor size overflows".into()))?;
            let width = match dtype {
                DType::F64 => 8,
                DType::F32 => 4,
            };
            let raw = cur.take(n.checked_mul(width).ok_or_else(|| {
                FouraError::CheckpointFormat("tensor size overflows".into())
            })?)?;
            let data = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            tensors.push(Tensor {
                name,
                dtype,
                dims,
                data,
            });
        }
        Ok(Self {
            version,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| FouraError::CheckpointFormat(format!("length {n} exceeds u32")))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&u32_len(s.len())?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FouraError::CheckpointFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FouraError::CheckpointFormat("string is not UTF-8".into()))
    }
}

/// Trained adapter stack as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub meta: BTreeMap<String, String>,
    /// Layers in their training gate mode.
    pub layers: Vec<AdapterLayer>,
    /// Calibrated mask per layer (all-ones when ungated).
    pub frozen_masks: Vec<Vec<bool>>,
}

impl AdapterSet {
    /// Layers with gates switched to their calibrated masks.
    pub fn frozen_layers(&self) -> Result<Vec<AdapterLayer>> {
        self.layers
            .iter()
            .zip(&self.frozen_masks)
            .map(|(l, m)| l.frozen_with(m))
            .collect()
    }
}

fn mask_to_f64(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Packs layers and their masks. `meta` lines are written in order.
pub fn adapters_to_checkpoint(meta: &[(String, String)], layers: &[AdapterLayer], frozen_masks: &[Vec<bool>]) -> Result<Checkpoint> {
    if layers.len() != frozen_masks.len() {
        return Err(FouraError::invalid("one frozen mask per layer is required"));
    }
    let mut text = String::new();
    for (k, v) in meta {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("layers={}\n", layers.len()));
    let mut tensors = Vec::new();
    for (i, (l, mask)) in layers.iter().zip(frozen_masks).enumerate() {
        text.push_str(&format!(
            "layer{i}.transform={}\nlayer{i}.axis={}\nlayer{i}.alpha={:e}\n",
            l.transform.as_str(),
            l.axis.as_str(),
            l.alpha
        ));
        tensors.push(Tensor::from_matrix(format!("layer{i}.w0"), &l.w0));
        tensors.push(Tensor::from_matrix(format!("layer{i}.a"), &l.a));
        tensors.push(Tensor::from_matrix(format!("layer{i}.b"), &l.b));
        if let Some(g) = &l.gate {
            text.push_str(&format!(
                "layer{i}.gate_mode={}\nlayer{i}.threshold={:e}\nlayer{i}.entropy_weight={:e}\n",
                g.mode.as_str(),
                g.threshold,
                g.entropy_weight
            ));
            tensors.push(Tensor::from_matrix(format!("layer{i}.g1"), &g.g1));
            tensors.push(Tensor::from_matrix(format!("layer{i}.g2"), &g.g2));
            tensors.push(Tensor::vector(format!("layer{i}.b1"), &g.b1));
            tensors.push(Tensor::vector(format!("layer{i}.b2"), &g.b2));
        }
        tensors.push(Tensor::vector(format!("layer{i}.frozen_mask"), &mask_to_f64(mask)));
    }
    Ok(Checkpoint::new(text, tensors))
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| FouraError::CheckpointFormat(format!("meta key `{key}` missing")))
}

fn meta_parse<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta_get(meta, key)?;
    raw.parse()
        .map_err(|_| FouraError::CheckpointFormat(format!("meta `{key}` = `{raw}` does not parse")))
}

fn bool_mask(t: &Tensor) -> Result<Vec<bool>> {
    t.data
        .iter()
        .map(|&x| match x {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(FouraError::CheckpointFormat(format!(
                "`{}` holds {x}, expected 0 or 1",
                t.name
            ))),
        })
        .collect()
}

pub fn checkpoint_to_adapters(ck: &Checkpoint) -> Result<AdapterSet> {
    let meta = ck.meta_map();
    let n: usize = meta_parse(&meta, "layers")?;
    let mut layers = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let transform: Transform = meta_parse(&meta, &format!("layer{i}.transform"))?;
        let axis: Axis = meta_parse(&meta, &format!("layer{i}.axis"))?;
        let alpha: f64 = meta_parse(&meta, &format!("layer{i}.alpha"))?;
        let gate = if ck.tensor(&format!("layer{i}.g1")).is_some() {
            let mode: GateMode = meta_parse(&meta, &format!("layer{i}.gate_mode"))?;
            let frozen_mask = match mode {
                GateMode::Frozen => Some(bool_mask(ck.require(&format!("layer{i}.frozen_mask"))?)?),
                _ => None,
            };
            Some(GateState {
                g1: ck.require(&format!("layer{i}.g1"))?.to_matrix()?,
                g2: ck.require(&format!("layer{i}.g2"))?.to_matrix()?,
                b1: ck.require(&format!("layer{i}.b1"))?.data.clone(),
                b2: ck.require(&format!("layer{i}.b2"))?.data.clone(),
                threshold: meta_parse(&meta, &format!("layer{i}.threshold"))?,
                mode,
                frozen_mask,
                entropy_weight: meta_parse(&meta, &format!("layer{i}.entropy_weight"))?,
            })
        } else {
            None
        };
        let layer = AdapterLayer {
            w0: ck.require(&format!("layer{i}.w0"))?.to_matrix()?,
            a: ck.require(&format!("layer{i}.a"))?.to_matrix()?,
            b: ck.require(&format!("layer{i}.b"))?.to_matrix()?,
            alpha,
            transform,
            axis,
            gate,
        };
        layer
            .validate()
            .map_err(|e| FouraError::CheckpointFormat(format!("layer {i}: {e}")))?;
        let mask = bool_mask(ck.require(&format!("layer{i}.frozen_mask"))?)?;
        if mask.len() != layer.rank() {
            return Err(FouraError::CheckpointFormat(format!(
                "layer {i}: mask length {} for rank {}",
                mask.len(),
                layer.rank()
            )));
        }
        layers.push(layer);
        masks.push(mask);
    }
    Ok(AdapterSet {
        meta,
        layers,
        frozen_masks: masks,
    })
}

pub fn load_adapters(path: &Path) -> Result<AdapterSet> {
    checkpoint_to_adapters(&Checkpoint::load(path)?)
}
