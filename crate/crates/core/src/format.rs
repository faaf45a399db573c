//! Binary model files.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        8 bytes  "DPRNMODL"
//! version      u32      1
//! precision    u8       8 = f64 payload, 4 = f32 payload
//! input tag    u8       0 vector, 1 image, 2 sequence
//! input dims   3 × u32  (features,0,0) / (h,w,c) / (steps,features,0)
//! layer count  u32
//! per layer:
//!   section length   u64   bytes that follow in this section
//!   kind             u8    0 fc, 1 conv, 2 lstm, 3 output
//!   activation       u8    0 identity, 1 relu, 2 tanh, 3 sigmoid
//!   flags            u8    bit 0 conv geometry present, bit 1 max-pool
//!   reserved         u8    0
//!   geometry         6 × u32  in_h in_w in_c kernel_h kernel_w stride
//!   original units   u32
//!   kept count       u32, then that many u32 indices
//!   weight dims      2 × u32
//!   bias length      u32
//!   payload          weight then bias values
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvSpec, InputShape, LayerKind};
use crate::prune::{CompressedModel, PrunedLayer};
use crate::tensor::{ConvGeometry, Tensor};

pub const MAGIC: &[u8; 8] = b"DPRNMODL";
pub const VERSION: u32 = 1;

/// Float width of the stored payload. Only `F64` round-trips bit-exactly;
/// `F32` exists for size reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_layer(layer: &PrunedLayer, precision: Precision) -> Vec<u8> {
    let mut s = vec![layer.kind.tag(), layer.activation.tag()];
    let flags = match layer.conv {
        Some(spec) => 1 | if spec.pool { 2 } else { 0 },
        None => 0,
    };
    s.extend_from_slice(&[flags, 0]);
    let g = layer.conv.map(|c| c.geometry);
    let dims = g.map_or([0; 6], |g| [g.in_h, g.in_w, g.in_c, g.kernel_h, g.kernel_w, g.stride]);
    dims.iter().for_each(|&d| put_u32(&mut s, d));
    put_u32(&mut s, layer.original_units);
    put_u32(&mut s, layer.kept.len());
    layer.kept.iter().for_each(|&k| put_u32(&mut s, k));
    let (r, c) = layer.weight.dims2().expect("pruned weights are matrices");
    put_u32(&mut s, r);
    put_u32(&mut s, c);
    put_u32(&mut s, layer.bias.len());
    for &v in layer.weight.data().iter().chain(layer.bias.data()) {
        match precision {
            Precision::F64 => s.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => s.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    s
}

/// Serializes `model` to bytes.
pub fn encode(model: &CompressedModel, precision: Precision) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(precision.tag());
    let (tag, dims) = match model.input {
        InputShape::Vector { features } => (0, [features, 0, 0]),
        InputShape::Image {
            height,
            width,
            channels,
        } => (1, [height, width, channels]),
        InputShape::Sequence { steps, features } => (2, [steps, features, 0]),
    };
    out.push(tag);
    dims.iter().for_each(|&d| put_u32(&mut out, d));
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        let section = encode_layer(layer, precision);
        out.extend_from_slice(&(section.len() as u64).to_le_bytes());
        out.extend_from_slice(&section);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(self.err(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {left}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize, precision: Precision, what: &str) -> Result<Vec<f64>> {
        let width = precision.tag() as usize;
        let bytes = n
            .checked_mul(width)
            .ok_or_else(|| self.err(self.pos, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(match precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        })
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<CompressedModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        let bad = magic.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(r.err(bad, "bad magic: not a model file"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.err(8, format!("unsupported version {version}")));
    }
    let precision = match r.u8("precision")? {
        8 => Precision::F64,
        4 => Precision::F32,
        other => return Err(r.err(12, format!("unknown precision tag {other}"))),
    };
    let input_at = r.pos;
    let tag = r.u8("input tag")?;
    let (a, b, c) = (r.u32("input dims")?, r.u32("input dims")?, r.u32("input dims")?);
    let input = match tag {
        0 => InputShape::Vector { features: a },
        1 => InputShape::Image {
            height: a,
            width: b,
            channels: c,
        },
        2 => InputShape::Sequence { steps: a, features: b },
        other => return Err(r.err(input_at, format!("unknown input tag {other}"))),
    };
    if input.example_len() == 0 {
        return Err(r.err(input_at, "input extents must be positive"));
    }
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let len_at = r.pos;
        let len = r.u64("section length")?;
        let start = r.pos;
        layers.push(decode_layer(&mut r, precision).map_err(|e| match e {
            Error::Format { .. } => e,
            other => r.err(start, format!("layer {idx}: {other}")),
        })?);
        if (r.pos - start) as u64 != len {
            return Err(r.err(len_at, format!("layer {idx}: section length {len} disagrees with content")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = CompressedModel { input, layers };
    model.validate().map_err(|e| Error::Format {
        offset: bytes.len() as u64,
        message: format!("inconsistent topology: {e}"),
    })?;
    Ok(model)
}

fn decode_layer(r: &mut Reader<'_>, precision: Precision) -> Result<PrunedLayer> {
    let at = r.pos;
    let kind = LayerKind::from_tag(r.u8("layer kind")?).ok_or_else(|| r.err(at, "unknown layer kind"))?;
    let activation =
        Activation::from_tag(r.u8("activation")?).ok_or_else(|| r.err(at + 1, "unknown activation"))?;
    let flags = r.u8("flags")?;
    r.u8("reserved")?;
    let mut g = [0usize; 6];
    for d in &mut g {
        *d = r.u32("geometry")?;
    }
    let conv = if flags & 1 == 1 {
        let geometry = ConvGeometry {
            in_h: g[0],
            in_w: g[1],
            in_c: g[2],
            kernel_h: g[3],
            kernel_w: g[4],
            stride: g[5],
        };
        geometry.validate().map_err(|e| r.err(at + 4, e.to_string()))?;
        Some(ConvSpec {
            geometry,
            pool: flags & 2 == 2,
        })
    } else {
        None
    };
    let original_units = r.u32("original units")?;
    let k = r.u32("kept count")?;
    if k > r.bytes.len() {
        return Err(r.err(r.pos - 4, format!("kept count {k} exceeds file size")));
    }
    let kept = (0..k).map(|_| r.u32("kept index")).collect::<Result<Vec<_>>>()?;
    let dims_at = r.pos;
    let (rows, cols) = (r.u32("weight dims")?, r.u32("weight dims")?);
    let bias_len = r.u32("bias length")?;
    let weight = r.floats(rows.saturating_mul(cols), precision, "weights")?;
    let bias = r.floats(bias_len, precision, "bias")?;
    let weight = Tensor::new(vec![rows, cols], weight).map_err(|e| r.err(dims_at, e.to_string()))?;
    let bias = Tensor::new(vec![bias_len], bias).map_err(|e| r.err(dims_at + 8, e.to_string()))?;
    Ok(PrunedLayer {
        kind,
        activation,
        conv,
        kept,
        original_units,
        weight,
        bias,
    })
}

/// Writes `model` atomically: the bytes go to a sibling temp file that is
/// renamed over `path`, so a failed save leaves nothing behind.
pub fn save_model(model: &CompressedModel, path: &Path, precision: Precision) -> Result<u64> {
    let bytes = encode(model, precision);
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(bytes.len() as u64)
}

pub fn load_model(path: &Path) -> Result<CompressedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
