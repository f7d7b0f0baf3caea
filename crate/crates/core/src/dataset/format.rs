//! `MDWB` binary container for real and distilled datasets.
//!
//! Layout, all integers little-endian `u32`, all floats little-endian `f32`:
//!
//! ```text
//! magic "MDWB" | version | kind (0 real, 1 distilled)
//! n | channels | height | width | text_dim | num_concepts
//! real:      images[n·c·h·w] texts[n·d_t] pairing[n] concepts[n] masks[num_concepts·h·w] (u8)
//! distilled: images[n·c·h·w] texts[n·d_t] logits[n·n] lr source[n]
//! ```
//!
//! Values are held as `f64` in memory and stored as `f32`; generated data is
//! already `f32`-representable so real datasets round-trip bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use mdw_numeric::Tensor;
use serde::{Deserialize, Serialize};

use super::{DistilledDataset, RealDataset};
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"MDWB";
pub const FORMAT_VERSION: u32 = 1;

const KIND_REAL: u32 = 0;
const KIND_DISTILLED: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub distilled: bool,
    pub n: usize,
    pub image_shape: [usize; 3],
    pub text_dim: usize,
    pub num_concepts: usize,
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        Self { buf }
    }

    pub(crate) fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    pub(crate) fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let got = r.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(r)
    }

    pub(crate) fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return self.err(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(4)
            .filter(|&b| b <= self.buf.len() - self.pos);
        let Some(bytes) = bytes else {
            return self.err(format!("truncated while reading {what}"));
        };
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<usize>> {
        (0..count).map(|_| self.u32(what)).collect()
    }

    fn u8s(&mut self, count: usize, what: &str) -> Result<&'a [u8]> {
        self.take(count, what)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let version = r.u32("version")?;
    if version as u32 != FORMAT_VERSION {
        return r.err(format!("unsupported version {version}, expected {FORMAT_VERSION}"));
    }
    let kind = r.u32("kind")? as u32;
    if kind != KIND_REAL && kind != KIND_DISTILLED {
        return r.err(format!("unknown dataset kind {kind}"));
    }
    let n = r.u32("n")?;
    let image_shape = [r.u32("channels")?, r.u32("height")?, r.u32("width")?];
    let text_dim = r.u32("text_dim")?;
    let num_concepts = r.u32("num_concepts")?;
    if n == 0 || image_shape.contains(&0) || text_dim == 0 {
        return r.err("zero dimension in header");
    }
    Ok(Header {
        distilled: kind == KIND_DISTILLED,
        n,
        image_shape,
        text_dim,
        num_concepts,
    })
}

/// Reads only the header of an encoded dataset.
pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    let mut r = Reader::new(bytes, MAGIC)?;
    read_header(&mut r)
}

fn write_header(w: &mut Writer, h: &Header) {
    w.u32(FORMAT_VERSION as usize);
    w.u32(if h.distilled { KIND_DISTILLED } else { KIND_REAL } as usize);
    w.u32(h.n);
    for d in h.image_shape {
        w.u32(d);
    }
    w.u32(h.text_dim);
    w.u32(h.num_concepts);
}

pub fn encode_dataset(d: &RealDataset) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    write_header(
        &mut w,
        &Header {
            distilled: false,
            n: d.len(),
            image_shape: d.image_shape(),
            text_dim: d.text_dim(),
            num_concepts: d.num_concepts(),
        },
    );
    w.f32s(d.images().data());
    w.f32s(d.texts().data());
    d.pairing().iter().for_each(|&p| w.u32(p));
    d.concepts().iter().for_each(|&k| w.u32(k));
    let mut buf = w.finish();
    for mask in d.region_masks() {
        buf.extend(mask.iter().map(|&b| b as u8));
    }
    buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<RealDataset> {
    let mut r = Reader::new(bytes, MAGIC)?;
    let h = read_header(&mut r)?;
    if h.distilled {
        return r.err("expected a real dataset, found a distilled checkpoint");
    }
    let [c, hh, ww] = h.image_shape;
    let images = r.f32s(h.n * c * hh * ww, "images")?;
    let texts = r.f32s(h.n * h.text_dim, "texts")?;
    let pairing = r.u32s(h.n, "pairing")?;
    let concepts = r.u32s(h.n, "concepts")?;
    let raw = r.u8s(h.num_concepts * hh * ww, "region masks")?;
    r.finish()?;
    let masks = raw.chunks(hh * ww).map(|m| m.iter().map(|&b| b != 0).collect()).collect();
    RealDataset::from_parts(
        h.image_shape,
        Tensor::new([h.n, c * hh * ww], images)?,
        Tensor::new([h.n, h.text_dim], texts)?,
        pairing,
        concepts,
        masks,
    )
    .map_err(|e| Error::Format {
        offset: 0,
        msg: format!("inconsistent payload: {e}"),
    })
}

pub fn encode_distilled(d: &DistilledDataset) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    write_header(
        &mut w,
        &Header {
            distilled: true,
            n: d.len(),
            image_shape: d.image_shape,
            text_dim: d.texts.cols(),
            num_concepts: 0,
        },
    );
    w.f32s(d.images.data());
    w.f32s(d.texts.data());
    w.f32s(d.logits.data());
    w.f32s(&[d.lr()]);
    d.source.iter().for_each(|&s| w.u32(s));
    w.finish()
}

pub fn decode_distilled(bytes: &[u8]) -> Result<DistilledDataset> {
    let mut r = Reader::new(bytes, MAGIC)?;
    let h = read_header(&mut r)?;
    if !h.distilled {
        return r.err("expected a distilled checkpoint, found a real dataset");
    }
    let [c, hh, ww] = h.image_shape;
    let images = r.f32s(h.n * c * hh * ww, "images")?;
    let texts = r.f32s(h.n * h.text_dim, "texts")?;
    let logits = r.f32s(h.n * h.n, "logits")?;
    let lr = r.f32s(1, "student lr")?[0];
    let source = r.u32s(h.n, "source indices")?;
    r.finish()?;
    DistilledDataset::new(
        h.image_shape,
        Tensor::new([h.n, c * hh * ww], images)?,
        Tensor::new([h.n, h.text_dim], texts)?,
        Tensor::new([h.n, h.n], logits)?,
        lr,
        source,
    )
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn save_dataset(d: &RealDataset, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_dataset(d))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<RealDataset> {
    let path = path.as_ref();
    decode_dataset(&fs::read(path).map_err(io_err(path))?)
}

/// Stores a distilled checkpoint; values are quantized to `f32`.
pub fn save_distilled(d: &DistilledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_distilled(d))
}

pub fn load_distilled(path: impl AsRef<Path>) -> Result<DistilledDataset> {
    let path = path.as_ref();
    decode_distilled(&fs::read(path).map_err(io_err(path))?)
}

/// Provenance sidecar written next to a binary artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub generator: serde_json::Value,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `<path>.json` describing how the artifact at `path` was produced.
pub fn write_manifest(path: impl AsRef<Path>, format: &str, generator: &impl Serialize) -> Result<()> {
    let manifest = Manifest {
        format: format.to_string(),
        version: FORMAT_VERSION,
        generator: serde_json::to_value(generator)?,
    };
    let side = sidecar_path(path.as_ref());
    write_bytes(&side, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let side = sidecar_path(path.as_ref());
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    Ok(serde_json::from_str(&text)?)
}
