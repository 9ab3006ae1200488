//! On-disk formats shared by every artifact: the flat binary archive
//! (checkpoints and float grids), key=value manifests, and PNG export.
//!
//! Archive layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "TDIFFBIN"
//! version   u32      1
//! kind      u32 length + UTF-8 bytes
//! manifest  u32 length + UTF-8 "key=value\n" lines
//! count     u32 number of tensors
//! tensor*   u32 name length, name, u32 rank, rank × u32 dims,
//!           prod(dims) × f32 values
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"TDIFFBIN";
pub const VERSION: u32 = 1;

/// Ordered key=value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::param(format!("manifest lacks key {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::param(format!("manifest key {key:?}: cannot parse {raw:?}")))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    column: 1,
                    message: format!("expected key=value, found {line:?}"),
                });
            };
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, manifest: Manifest) -> Self {
        Self {
            kind: kind.into(),
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_params(kind: &str, manifest: Manifest, params: &ParamStore) -> Self {
        let mut a = Archive::new(kind, manifest);
        for (name, t) in params.iter() {
            a.push(name, t.clone());
        }
        a
    }

    /// Copies tensors into `params` by name; every parameter must be present
    /// with a matching shape.
    pub fn load_into(&self, params: &mut ParamStore) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::param(format!("checkpoint lacks tensor {name:?}")))?;
            if t.shape() != params.get(id).shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            *params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.manifest.to_text());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8).ok_or_else(|| fail("truncated header".into()))?;
        if magic != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header".into()))?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let kind = r.string().ok_or_else(|| fail("bad kind".into()))?;
        let manifest_text = r.string().ok_or_else(|| fail("bad manifest".into()))?;
        let manifest = Manifest::parse(&manifest_text)?;
        let count = r.u32().ok_or_else(|| fail("truncated tensor count".into()))?;
        let mut archive = Archive::new(kind, manifest);
        for i in 0..count {
            let trunc = || fail(format!("truncated tensor {i}"));
            let name = r.string().ok_or_else(trunc)?;
            let rank = r.u32().ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(trunc)?).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            archive.push(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes".into()));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "archive",
                path: path.to_path_buf(),
            });
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn expect_kind(self, kind: &str, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format {
                path: PathBuf::from(path),
                message: format!("expected a {kind} archive, found {}", self.kind),
            });
        }
        Ok(self)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Writes `[3, H, W]` values in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(rgb: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("RGB PNG needs 3 channels, got {c}")));
    }
    let to_u8 = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([
            to_u8(rgb.channel(0)[i]),
            to_u8(rgb.channel(1)[i]),
            to_u8(rgb.channel(2)[i]),
        ])
    });
    img.save(path)?;
    Ok(())
}

/// Writes a single-channel grid as 16-bit grayscale, mapping `[lo, hi]`
/// onto `[0, 65535]`.
pub fn write_gray16_png(grid: &Tensor, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let (_, h, w) = grid.dims3()?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = grid.data()[y as usize * w + x as usize];
        Luma([(((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path)?;
    Ok(())
}

pub fn write_gray8_png(values: &[u8], h: usize, w: usize, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, values.to_vec())
        .ok_or_else(|| Error::shape("gray image buffer size"))?;
    img.save(path)?;
    Ok(())
}
