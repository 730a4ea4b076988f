//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      8 bytes   "EEXITCK\0"
//! version    u32       1
//! config     7 × u64   num_layers, model_dim, num_heads, ffn_dim,
//!                      max_frames, input_dim, seed
//! count      u64       number of encoder f32 values
//! params     count × f32, in `Encoder::params` order
//! sections   repeated until end of stream:
//!              tag     8 bytes ("TEACHER\0", "BRANCHES", "DOWNSTRM")
//!              length  u64 payload bytes
//!              payload
//! ```
//!
//! Teacher payload: `u32 classes, u32 dim, weight, bias`.
//! Branch payload: `u32 layers, u32 classes, u32 dim`, then per layer `weight, bias`.
//! Downstream payload: `u32 layers, u32 labels, u32 dim, u8 task, u8 weight_mode`,
//! then layer weights, probe weight, probe bias.

use crate::branches::BranchSet;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::linear::LinearHead;
use crate::numeric::Matrix;
use crate::probe::{DownstreamHead, Task, WeightMode};
use crate::teacher::TeacherHead;

pub const MAGIC: [u8; 8] = *b"EEXITCK\0";
pub const VERSION: u32 = 1;

const TAG_TEACHER: [u8; 8] = *b"TEACHER\0";
const TAG_BRANCHES: [u8; 8] = *b"BRANCHES";
const TAG_DOWNSTREAM: [u8; 8] = *b"DOWNSTRM";

/// Encoder plus whichever trained heads exist so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub teacher: Option<TeacherHead>,
    pub branches: Option<BranchSet>,
    pub downstream: Option<DownstreamHead>,
}

impl Checkpoint {
    pub fn new(encoder: Encoder) -> Self {
        Self {
            encoder,
            teacher: None,
            branches: None,
            downstream: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        write_encoder(&mut w, &self.encoder);
        if let Some(t) = &self.teacher {
            w.section(TAG_TEACHER, |s| {
                s.u32(t.num_classes() as u32);
                s.u32(t.weight().cols() as u32);
                s.f32s(t.weight().data());
                s.f32s(t.bias());
            });
        }
        if let Some(b) = &self.branches {
            w.section(TAG_BRANCHES, |s| {
                s.u32(b.num_layers() as u32);
                s.u32(b.num_classes() as u32);
                s.u32(b.dim() as u32);
                for h in &b.heads {
                    s.f32s(h.weight.data());
                    s.f32s(&h.bias);
                }
            });
        }
        if let Some(d) = &self.downstream {
            w.section(TAG_DOWNSTREAM, |s| {
                s.u32(d.layer_weights.len() as u32);
                s.u32(d.probe.classes() as u32);
                s.u32(d.probe.dim() as u32);
                s.u8(match d.task {
                    Task::Frame => 0,
                    Task::Utterance => 1,
                });
                s.u8(match d.weight_mode {
                    WeightMode::Prefix => 0,
                    WeightMode::Global => 1,
                });
                s.f32s(&d.layer_weights);
                s.f32s(d.probe.weight.data());
                s.f32s(&d.probe.bias);
            });
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let encoder = read_encoder(&mut r)?;
        let mut ckpt = Checkpoint::new(encoder);
        while !r.at_end() {
            let tag_offset = r.pos;
            let tag: [u8; 8] = r.take(8)?.try_into().expect("8 bytes");
            let len = r.u64()? as usize;
            let start = r.pos;
            let payload = r.take(len)?;
            let mut s = Reader {
                bytes: payload,
                pos: 0,
                base: start,
            };
            match tag {
                TAG_TEACHER => ckpt.teacher = Some(read_teacher(&mut s)?),
                TAG_BRANCHES => ckpt.branches = Some(read_branches(&mut s)?),
                TAG_DOWNSTREAM => ckpt.downstream = Some(read_downstream(&mut s)?),
                other => {
                    return Err(Error::format(
                        tag_offset,
                        format!("unknown section tag {:?}", String::from_utf8_lossy(&other)),
                    ))
                }
            }
            if !s.at_end() {
                return Err(Error::format(start + s.pos, "trailing bytes in section"));
            }
        }
        Ok(ckpt)
    }
}

/// Encoder-only checkpoint bytes.
pub fn save_checkpoint(enc: &Encoder) -> Vec<u8> {
    let mut w = Writer::default();
    write_encoder(&mut w, enc);
    w.buf
}

/// Loads the encoder from a checkpoint, ignoring any head sections.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Encoder> {
    let mut r = Reader::new(bytes);
    read_encoder(&mut r)
}

fn write_encoder(w: &mut Writer, enc: &Encoder) {
    w.bytes(&MAGIC);
    w.u32(VERSION);
    let c = enc.config();
    for v in [
        c.num_layers,
        c.model_dim,
        c.num_heads,
        c.ffn_dim,
        c.max_frames,
        c.input_dim,
    ] {
        w.u64(v as u64);
    }
    w.u64(c.seed);
    w.u64(enc.param_count() as u64);
    for p in enc.params() {
        w.f32s(p);
    }
}

fn read_encoder(r: &mut Reader) -> Result<Encoder> {
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!(
                "bad magic tag {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&MAGIC)
            ),
        ));
    }
    let at = r.pos;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            at,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let at = r.pos;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let cfg = EncoderConfig {
        num_layers: dims[0],
        model_dim: dims[1],
        num_heads: dims[2],
        ffn_dim: dims[3],
        max_frames: dims[4],
        input_dim: dims[5],
        seed: r.u64()?,
    };
    // Bound sizes before allocating anything from an untrusted header.
    if dims.iter().any(|&d| d > 1 << 16) {
        return Err(Error::format(at, "implausible encoder dimensions"));
    }
    let mut enc = Encoder::empty(cfg).map_err(|e| Error::format(at, format!("invalid config: {e}")))?;
    let at = r.pos;
    let count = r.u64()? as usize;
    if count != enc.param_count() {
        return Err(Error::format(
            at,
            format!("parameter count {count}, config implies {}", enc.param_count()),
        ));
    }
    for p in enc.params_mut() {
        r.f32s_into(p)?;
    }
    Ok(enc)
}

fn read_matrix(r: &mut Reader, rows: usize, cols: usize) -> Result<Matrix> {
    let at = r.pos;
    let mut data = vec![0.0f32; checked_len(r, rows, cols)?];
    r.f32s_into(&mut data)?;
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(r.base + at, e.to_string()))
}

fn read_vec(r: &mut Reader, n: usize) -> Result<Vec<f32>> {
    let mut v = vec![0.0f32; checked_len(r, n, 1)?];
    r.f32s_into(&mut v)?;
    Ok(v)
}

fn checked_len(r: &Reader, rows: usize, cols: usize) -> Result<usize> {
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.saturating_mul(4) <= r.remaining())
        .ok_or_else(|| Error::format(r.base + r.pos, "array length exceeds remaining bytes"))?;
    Ok(n)
}

fn read_teacher(r: &mut Reader) -> Result<TeacherHead> {
    let at = r.base + r.pos;
    let classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let weight = read_matrix(r, classes, dim)?;
    let bias = read_vec(r, classes)?;
    TeacherHead::from_parts(weight, bias).map_err(|e| Error::format(at, e.to_string()))
}

fn read_branches(r: &mut Reader) -> Result<BranchSet> {
    let at = r.base + r.pos;
    let layers = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut heads = Vec::new();
    for _ in 0..layers {
        let weight = read_matrix(r, classes, dim)?;
        let bias = read_vec(r, classes)?;
        heads.push(LinearHead { weight, bias });
    }
    BranchSet::from_heads(heads).map_err(|e| Error::format(at, e.to_string()))
}

fn read_downstream(r: &mut Reader) -> Result<DownstreamHead> {
    let at = r.base + r.pos;
    let layers = r.u32()? as usize;
    let labels = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let task = match r.u8()? {
        0 => Task::Frame,
        1 => Task::Utterance,
        v => return Err(Error::format(r.base + r.pos - 1, format!("unknown task code {v}"))),
    };
    let mode = match r.u8()? {
        0 => WeightMode::Prefix,
        1 => WeightMode::Global,
        v => return Err(Error::format(r.base + r.pos - 1, format!("unknown weight mode {v}"))),
    };
    let layer_weights = read_vec(r, layers)?;
    let weight = read_matrix(r, labels, dim)?;
    let bias = read_vec(r, labels)?;
    DownstreamHead::from_parts(layer_weights, weight, bias, task, mode)
        .map_err(|e| Error::format(at, e.to_string()))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }
    fn section(&mut self, tag: [u8; 8], body: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        body(&mut inner);
        self.bytes(&tag);
        self.u64(inner.buf.len() as u64);
        self.bytes(&inner.buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` in the whole stream, for error reporting.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            base: 0,
        }
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.base + self.pos,
                format!("truncated: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s_into(&mut self, out: &mut [f32]) -> Result<()> {
        let raw = self.take(out.len() * 4)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        Ok(())
    }
}
