//! Binary file formats. All integers and reals are little-endian; reals are
//! stored as IEEE-754 `f32` and widened to `f64` on read.
//!
//! ```text
//! CVCA  embeddings   magic | ver u8 = 1 | dtype u8 = 1 | reserved u16 = 0 | rows u64 | dim u64 | rows·dim f32
//! CVLB  labels       magic | ver u8 = 1 | mode u8 | rows u64 | classes u64 | payload
//!                      mode bits 0..6: 0 = one u32 per row, 1 = multi-hot ceil(classes/8) bytes per row
//!                      mode bit 7: multi-hot rows may be empty
//! CVCD  codes        magic | ver u8 = 1 | rows u64 | bits u64 | flags u8 | rows·ceil(bits/8) bytes
//!                      flags bit 0: rows·bits f32 logits follow the codes
//! CVCK  checkpoint   magic | ver u8 = 1 | heads u8 (1 or 2) | reserved u16 = 0 | head block × heads
//!   head block       input_dim u64 | bits u64 | width u64 | layers u8 | activation u8 = 1 (ReLU)
//!                    | reserved u16 = 0 | bn_eps f64 | bn_momentum f64 | layer block × layers
//!   layer block      in u64 | out u64 | weight out·in f32 | bias out f32 | gamma out f32
//!                    | beta out f32 | running_mean out f32 | running_var out f32
//! ```
//!
//! Every header field is checked before the payload is read, and declared
//! sizes are checked against the bytes actually present before anything is
//! allocated. Trailing bytes are an error.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{format_err, shape_err, validation_err, Error, Result};
use crate::evalkit::LabelSet;
use crate::hashcoder::{BatchNorm, Encoder, HashCoderModel, Layer, Linear};
use crate::numkit::DenseMatrix;
use crate::retrieval::{bytes_per_row, PackedCodeSet};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CVCA";
pub const LABEL_MAGIC: &[u8; 4] = b"CVLB";
pub const CODE_MAGIC: &[u8; 4] = b"CVCD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVCK";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

const LABEL_MODE_SINGLE: u8 = 0;
const LABEL_MODE_MULTI: u8 = 1;
const LABEL_ALLOW_EMPTY: u8 = 0x80;
const CODE_FLAG_LOGITS: u8 = 1;
const ACTIVATION_RELU: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(format_err!(
                "{}: truncated at byte {} (need {n} more, have {})",
                self.what,
                self.pos,
                self.remaining()
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, field: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format_err!("{}: {field} {v} does not fit in memory", self.what))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(format_err!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u8()? {
            VERSION => Ok(()),
            v => Err(format_err!("{}: unsupported version {v}", self.what)),
        }
    }

    fn zero_u16(&mut self) -> Result<()> {
        match self.u16()? {
            0 => Ok(()),
            v => Err(format_err!("{}: reserved field is {v}, expected 0", self.what)),
        }
    }

    /// Checks that `a · b · unit` bytes are available and returns `a · b`.
    fn sized(&self, a: usize, b: usize, unit: usize) -> Result<usize> {
        let n = a
            .checked_mul(b)
            .ok_or_else(|| format_err!("{}: size overflow", self.what))?;
        let bytes = n
            .checked_mul(unit)
            .ok_or_else(|| format_err!("{}: size overflow", self.what))?;
        if bytes > self.remaining() {
            return Err(format_err!(
                "{}: payload needs {bytes} bytes, only {} present",
                self.what,
                self.remaining()
            ));
        }
        Ok(n)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let n = self.sized(n, 1, 4)?;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finite_f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let vals = self.f32s(n)?;
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(validation_err!("{}: non-finite {field} value at index {i}", self.what));
        }
        Ok(vals.into_iter().map(f64::from).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(format_err!("{}: {} trailing bytes", self.what, self.remaining()));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

// ---------------------------------------------------------------- embeddings

pub fn encode_embeddings(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.as_slice().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    put_f32s(&mut out, m.as_slice().iter().copied());
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut r = Reader::new(bytes, "embedding file");
    r.magic(EMBEDDING_MAGIC)?;
    r.version()?;
    match r.u8()? {
        DTYPE_F32 => {}
        d => return Err(format_err!("embedding file: unsupported dtype {d}")),
    }
    r.zero_u16()?;
    let rows = r.count("rows")?;
    let dim = r.count("dim")?;
    let n = r.sized(rows, dim, 4)?;
    let data = r.finite_f64s(n, "embedding")?;
    r.finish()?;
    DenseMatrix::from_vec(rows, dim, data)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    decode_embeddings(&fs::read(path)?)
}

pub fn write_embeddings(m: &DenseMatrix, path: impl AsRef<Path>) -> Result<()> {
    if !m.is_finite() {
        return Err(validation_err!("refusing to write non-finite embeddings"));
    }
    write_file(path.as_ref(), &encode_embeddings(m))
}

/// One row per line, comma-separated reals, no header. Blank lines are skipped.
pub fn parse_embeddings_csv(text: &str) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err!("csv line {}: {e}", i + 1))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let width = record.len();
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => return Err(shape_err!("csv line {}: {width} fields, expected {d}", i + 1)),
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| format_err!("csv line {}: {field:?} is not a number", i + 1))?;
            if !v.is_finite() {
                return Err(validation_err!("csv line {}: non-finite value", i + 1));
            }
            data.push(v);
        }
        rows += 1;
    }
    DenseMatrix::from_vec(rows, dim.unwrap_or(0), data)
}

pub fn read_embeddings_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path)?;
    parse_embeddings_csv(&text)
}

// -------------------------------------------------------------------- labels

pub fn encode_labels(labels: &LabelSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LABEL_MAGIC);
    out.push(VERSION);
    let multi = labels.is_multi_label();
    let allow_empty = multi && labels.rows().iter().any(|r| r.is_empty());
    let mode =
        if multi { LABEL_MODE_MULTI } else { LABEL_MODE_SINGLE } | if allow_empty { LABEL_ALLOW_EMPTY } else { 0 };
    out.push(mode);
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    out.extend_from_slice(&(labels.num_classes() as u64).to_le_bytes());
    if multi {
        let stride = bytes_per_row(labels.num_classes());
        for row in labels.rows() {
            let mut bytes = vec![0u8; stride];
            for &c in row {
                bytes[c as usize / 8] |= 1 << (c % 8);
            }
            out.extend_from_slice(&bytes);
        }
    } else {
        for row in labels.rows() {
            out.extend_from_slice(&row[0].to_le_bytes());
        }
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelSet> {
    let mut r = Reader::new(bytes, "label file");
    r.magic(LABEL_MAGIC)?;
    r.version()?;
    let mode_byte = r.u8()?;
    let allow_empty = mode_byte & LABEL_ALLOW_EMPTY != 0;
    let mode = mode_byte & !LABEL_ALLOW_EMPTY;
    let rows = r.count("rows")?;
    let num_classes = r.count("num_classes")?;
    if num_classes == 0 {
        return Err(format_err!("label file: zero classes"));
    }
    let labels = match mode {
        LABEL_MODE_SINGLE => {
            if allow_empty {
                return Err(format_err!("label file: empty-row flag on single-label data"));
            }
            let n = r.sized(rows, 1, 4)?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(r.u32()?);
            }
            LabelSet::single(num_classes, &values)?
        }
        LABEL_MODE_MULTI => {
            let stride = bytes_per_row(num_classes);
            r.sized(rows, stride, 1)?;
            let mut sets = Vec::with_capacity(rows);
            for i in 0..rows {
                let row = r.take(stride)?;
                let mut set = Vec::new();
                for (b, &byte) in row.iter().enumerate() {
                    for bit in 0..8 {
                        if byte >> bit & 1 == 1 {
                            let c = b * 8 + bit;
                            if c >= num_classes {
                                return Err(validation_err!("label file: row {i} sets padding bit {c}"));
                            }
                            set.push(c as u32);
                        }
                    }
                }
                sets.push(set);
            }
            LabelSet::multi(num_classes, sets, allow_empty)?
        }
        m => return Err(format_err!("label file: unknown mode {m}")),
    };
    r.finish()?;
    Ok(labels)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    decode_labels(&fs::read(path)?)
}

pub fn write_labels(labels: &LabelSet, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels))
}

// --------------------------------------------------------------------- codes

/// Serializes codes; logits are written only if present and requested.
pub fn encode_codes(codes: &PackedCodeSet, with_logits: bool) -> Result<Vec<u8>> {
    if with_logits && !codes.has_logits() {
        return Err(Error::Capability("codes carry no logits to write".into()));
    }
    let mut out = Vec::with_capacity(22 + codes.packed().len());
    out.extend_from_slice(CODE_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(codes.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(codes.bits() as u64).to_le_bytes());
    out.push(if with_logits { CODE_FLAG_LOGITS } else { 0 });
    out.extend_from_slice(codes.packed());
    if with_logits {
        for v in codes.logits().unwrap() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_codes(bytes: &[u8]) -> Result<PackedCodeSet> {
    let mut r = Reader::new(bytes, "code file");
    r.magic(CODE_MAGIC)?;
    r.version()?;
    let rows = r.count("rows")?;
    let bits = r.count("bits")?;
    let flags = r.u8()?;
    if flags & !CODE_FLAG_LOGITS != 0 {
        return Err(format_err!("code file: unknown flags {flags:#04x}"));
    }
    if bits == 0 {
        return Err(format_err!("code file: zero bits"));
    }
    let n = r.sized(rows, bytes_per_row(bits), 1)?;
    let payload = r.take(n)?.to_vec();
    let logits = if flags & CODE_FLAG_LOGITS != 0 {
        let n = r.sized(rows, bits, 4)?;
        Some(r.f32s(n)?)
    } else {
        None
    };
    r.finish()?;
    PackedCodeSet::from_packed(rows, bits, payload, logits)
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<PackedCodeSet> {
    decode_codes(&fs::read(path)?)
}

pub fn write_codes(codes: &PackedCodeSet, with_logits: bool, path: impl AsRef<Path>) -> Result<()> {
    if codes.is_empty() {
        return Err(validation_err!("refusing to write an empty code set"));
    }
    write_file(path.as_ref(), &encode_codes(codes, with_logits)?)
}

// ---------------------------------------------------------------- checkpoint

fn encode_head(out: &mut Vec<u8>, m: &HashCoderModel) {
    out.extend_from_slice(&(m.input_dim() as u64).to_le_bytes());
    out.extend_from_slice(&(m.code_bits() as u64).to_le_bytes());
    out.extend_from_slice(&(m.hidden_width() as u64).to_le_bytes());
    out.push(m.layers().len() as u8);
    out.push(ACTIVATION_RELU);
    out.extend_from_slice(&0u16.to_le_bytes());
    let norm = &m.layers()[0].norm;
    out.extend_from_slice(&norm.eps.to_le_bytes());
    out.extend_from_slice(&norm.momentum.to_le_bytes());
    for layer in m.layers() {
        let l = &layer.linear;
        out.extend_from_slice(&(l.in_dim() as u64).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u64).to_le_bytes());
        put_f32s(out, l.weight.as_slice().iter().copied());
        put_f32s(out, l.bias.iter().copied());
        let n = &layer.norm;
        for v in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
            put_f32s(out, v.iter().copied());
        }
    }
}

fn decode_head(r: &mut Reader<'_>) -> Result<HashCoderModel> {
    let input_dim = r.count("input_dim")?;
    let bits = r.count("bits")?;
    let width = r.count("width")?;
    let layer_count = r.u8()? as usize;
    match r.u8()? {
        ACTIVATION_RELU => {}
        a => return Err(format_err!("checkpoint: unknown activation tag {a}")),
    }
    r.zero_u16()?;
    if !(3..=4).contains(&layer_count) {
        return Err(format_err!("checkpoint: {layer_count} layers (expected 3 or 4)"));
    }
    let eps = r.f64()?;
    let momentum = r.f64()?;
    if !(eps > 0.0 && eps.is_finite()) || !(0.0..=1.0).contains(&momentum) {
        return Err(format_err!("checkpoint: bad normalization constants"));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let fan_in = r.count("layer input")?;
        let fan_out = r.count("layer output")?;
        let n = r.sized(fan_out, fan_in, 4)?;
        let weight = r.finite_f64s(n, "weight")?;
        r.sized(fan_out, 5, 4)?;
        let bias = r.finite_f64s(fan_out, "bias")?;
        let gamma = r.finite_f64s(fan_out, "gamma")?;
        let beta = r.finite_f64s(fan_out, "beta")?;
        let running_mean = r.finite_f64s(fan_out, "running mean")?;
        let running_var = r.finite_f64s(fan_out, "running var")?;
        layers.push(Layer {
            linear: Linear {
                weight: DenseMatrix::from_vec(fan_out, fan_in, weight)?,
                bias,
            },
            norm: BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            },
            relu: i + 1 != layer_count,
        });
    }
    HashCoderModel::from_layers(input_dim, bits, width, layers).map_err(|e| format_err!("checkpoint: {e}"))
}

pub fn encode_checkpoint(encoder: &Encoder) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    let heads = encoder.heads();
    out.push(heads.len() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for h in heads {
        encode_head(&mut out, h);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Encoder> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let heads = r.u8()?;
    r.zero_u16()?;
    let encoder = match heads {
        1 => Encoder::Single(decode_head(&mut r)?),
        2 => {
            let a = decode_head(&mut r)?;
            let b = decode_head(&mut r)?;
            Encoder::dual(a, b).map_err(|e| format_err!("checkpoint: {e}"))?
        }
        n => return Err(format_err!("checkpoint: {n} heads (expected 1 or 2)")),
    };
    r.finish()?;
    Ok(encoder)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Encoder> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn write_checkpoint(encoder: &Encoder, path: impl AsRef<Path>) -> Result<()> {
    for h in encoder.heads() {
        if !h.params_finite() {
            return Err(Error::NumericalDomain("refusing to write non-finite parameters".into()));
        }
    }
    write_file(path.as_ref(), &encode_checkpoint(encoder))
}
