//! Binary checkpoints for base models and adapters.
//!
//! Both formats are little-endian and end in a CRC32 of every preceding byte.
//!
//! Base checkpoint:
//!
//! ```text
//! magic  "LRENBASE"
//! u32    version
//! u64 ×7 vocab_size, d_model, n_layers, n_heads, max_seq_len, mlp_hidden, dropout_p (f64 bits)
//! u8     frozen
//! u32    tensor count
//! per tensor: u32 name length, UTF-8 name, u32 ndims, u64 dims…, f64 data (row-major)
//! u32    crc32
//! ```
//!
//! Adapter checkpoint:
//!
//! ```text
//! magic  "LRENADPT"
//! u32    version
//! u64    base fingerprint
//! u64    training-config fingerprint
//! u32 rank, f64 alpha, u8 scale mode, u64 init seed, f64 dropout
//! u32    target count
//! per target: u32 layer, u8 projection, A (u32 rows, u32 cols, f64 data), B (same)
//! u32    crc32
//! ```

use std::cell::Cell;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, Projection, ScaleMode, Target, TargetFactors};
use crate::model::{BaseModel, GradientMap, ModelConfig, Params};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const BASE_MAGIC: &[u8; 8] = b"LRENBASE";
pub const ADAPTER_MAGIC: &[u8; 8] = b"LRENADPT";
pub const BASE_VERSION: u32 = 1;
pub const ADAPTER_VERSION: u32 = 1;

thread_local! {
    static BASE_LOADS: Cell<usize> = const { Cell::new(0) };
}

/// Number of base checkpoints loaded by the calling thread.
pub fn base_load_count() -> usize {
    BASE_LOADS.with(Cell::get)
}

fn config_words(cfg: &ModelConfig) -> [u64; 7] {
    [
        cfg.vocab_size as u64,
        cfg.d_model as u64,
        cfg.n_layers as u64,
        cfg.n_heads as u64,
        cfg.max_seq_len as u64,
        cfg.mlp_hidden as u64,
        cfg.dropout_p.to_bits(),
    ]
}

pub(crate) fn model_fingerprint<S: Scalar>(model: &BaseModel<S>) -> u64 {
    let mut h = Sha256::new();
    for w in config_words(&model.config) {
        h.update(w.to_le_bytes());
    }
    model.params.for_each(|name, m| {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &x in m.as_slice() {
            h.update(x.as_f64().to_bits().to_le_bytes());
        }
    });
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// 64-bit truncated SHA-256 of arbitrary bytes.
pub fn fingerprint_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn data<S: Scalar>(&mut self, m: &Matrix<S>) {
        for &x in m.as_slice() {
            self.f64(x.as_f64());
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic and CRC, returning a reader positioned after the version.
    fn open(path: &'a Path, buf: &'a [u8], magic: &[u8; 8], supported: u32) -> Result<Self> {
        if buf.len() < 16 {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: "file too short".into(),
            });
        }
        if &buf[..8] != magic {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: "bad magic bytes".into(),
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc {
                path: path.into(),
                stored,
                computed,
            });
        }
        let mut r = Self {
            path,
            buf: body,
            pos: 8,
        };
        let version = r.u32()?;
        if version != supported {
            return Err(Error::Checkpoint {
                path: path.into(),
                reason: format!("unknown version {version}"),
            });
        }
        Ok(r)
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.into(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail("truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn matrix<S: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<S>> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n * 8 <= self.buf.len())
            .ok_or_else(|| self.fail("tensor dimensions exceed file size"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(self.fail("non-finite tensor entry"));
            }
            data.push(S::of(v));
        }
        Matrix::from_vec(rows, cols, data)
    }
    fn done(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.fail("trailing bytes before checksum"))
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".tmp");
        path.with_file_name(name)
    };
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_base<S: Scalar>(model: &BaseModel<S>) -> Vec<u8> {
    let mut w = Writer::new(BASE_MAGIC, BASE_VERSION);
    for word in config_words(&model.config) {
        w.u64(word);
    }
    w.u8(model.frozen as u8);
    let mut count = 0u32;
    model.params.for_each(|_, _| count += 1);
    w.u32(count);
    model.params.for_each(|name, m| {
        w.u32(name.len() as u32);
        w.buf.extend_from_slice(name.as_bytes());
        w.u32(2);
        w.u64(m.rows() as u64);
        w.u64(m.cols() as u64);
        w.data(m);
    });
    w.finish()
}

pub fn decode_base<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<BaseModel<S>> {
    let mut r = Reader::open(path, bytes, BASE_MAGIC, BASE_VERSION)?;
    let mut words = [0u64; 7];
    for w in &mut words {
        *w = r.u64()?;
    }
    let config = ModelConfig {
        vocab_size: words[0] as usize,
        d_model: words[1] as usize,
        n_layers: words[2] as usize,
        n_heads: words[3] as usize,
        max_seq_len: words[4] as usize,
        mlp_hidden: words[5] as usize,
        dropout_p: f64::from_bits(words[6]),
    };
    config.validate().map_err(|e| r.fail(e.to_string()))?;
    let frozen = r.u8()? != 0;
    let count = r.u32()?;
    let mut named = GradientMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let ndims = r.u32()?;
        let dims: Vec<usize> = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(r.fail(format!("tensor `{name}` has {ndims} dims"))),
        };
        let m = r.matrix(rows, cols)?;
        if named.insert(name.clone(), m).is_some() {
            return Err(r.fail(format!("duplicate tensor `{name}`")));
        }
    }
    r.done()?;
    let params = Params::from_named(&config, &named).map_err(|e| r.fail(e.to_string()))?;
    Ok(BaseModel { config, params, frozen })
}

pub fn save_base<S: Scalar>(model: &BaseModel<S>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_base(model))
}

pub fn load_base<S: Scalar>(path: impl AsRef<Path>) -> Result<BaseModel<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = decode_base(path, &bytes)?;
    BASE_LOADS.with(|c| c.set(c.get() + 1));
    Ok(model)
}

/// Adapter payload plus the provenance stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint<S = f64> {
    pub base_fingerprint: u64,
    pub train_fingerprint: u64,
    pub adapter: LoraAdapter<S>,
}

pub fn encode_adapter<S: Scalar>(ckpt: &AdapterCheckpoint<S>) -> Vec<u8> {
    let a = &ckpt.adapter;
    let mut w = Writer::new(ADAPTER_MAGIC, ADAPTER_VERSION);
    w.u64(ckpt.base_fingerprint);
    w.u64(ckpt.train_fingerprint);
    w.u32(a.rank as u32);
    w.f64(a.alpha);
    w.u8(match a.scale_mode {
        ScaleMode::AlphaOverR => 0,
        ScaleMode::LiteralAlpha => 1,
    });
    w.u64(a.init_seed);
    w.f64(a.dropout);
    w.u32(a.factors.len() as u32);
    for f in &a.factors {
        w.u32(f.target.layer as u32);
        w.u8(match f.target.proj {
            Projection::Query => 0,
            Projection::Value => 1,
        });
        for m in [&f.a, &f.b] {
            w.u32(m.rows() as u32);
            w.u32(m.cols() as u32);
            w.data(m);
        }
    }
    w.finish()
}

pub fn decode_adapter<S: Scalar>(path: &Path, bytes: &[u8]) -> Result<AdapterCheckpoint<S>> {
    let mut r = Reader::open(path, bytes, ADAPTER_MAGIC, ADAPTER_VERSION)?;
    let base_fingerprint = r.u64()?;
    let train_fingerprint = r.u64()?;
    let rank = r.u32()? as usize;
    let alpha = r.f64()?;
    let scale_mode = match r.u8()? {
        0 => ScaleMode::AlphaOverR,
        1 => ScaleMode::LiteralAlpha,
        other => return Err(r.fail(format!("unknown scale mode {other}"))),
    };
    let init_seed = r.u64()?;
    let dropout = r.f64()?;
    let n = r.u32()?;
    let mut factors = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let layer = r.u32()? as usize;
        let proj = match r.u8()? {
            0 => Projection::Query,
            1 => Projection::Value,
            other => return Err(r.fail(format!("unknown projection {other}"))),
        };
        let (ar, ac) = (r.u32()? as usize, r.u32()? as usize);
        let a = r.matrix(ar, ac)?;
        let (br, bc) = (r.u32()? as usize, r.u32()? as usize);
        let b = r.matrix(br, bc)?;
        if ar != rank || bc != rank {
            return Err(r.fail(format!("factor shapes {:?}/{:?} disagree with rank {rank}", a.shape(), b.shape())));
        }
        factors.push(TargetFactors {
            target: Target { layer, proj },
            a,
            b,
        });
    }
    r.done()?;
    Ok(AdapterCheckpoint {
        base_fingerprint,
        train_fingerprint,
        adapter: LoraAdapter {
            factors,
            rank,
            alpha,
            scale_mode,
            init_seed,
            dropout,
        },
    })
}

pub fn save_adapter<S: Scalar>(ckpt: &AdapterCheckpoint<S>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_adapter(ckpt))
}

/// Writes a new adapter file, refusing to replace an existing one.
pub fn save_adapter_new<S: Scalar>(ckpt: &AdapterCheckpoint<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.exists() {
        return Err(Error::Checkpoint {
            path: path.into(),
            reason: "adapter file already exists".into(),
        });
    }
    save_adapter(ckpt, path)
}

/// Reads an adapter and checks it was trained against `base_fingerprint`.
pub fn load_adapter<S: Scalar>(path: impl AsRef<Path>, base_fingerprint: u64) -> Result<AdapterCheckpoint<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_adapter(path, &bytes)?;
    if ckpt.base_fingerprint != base_fingerprint {
        return Err(Error::FingerprintMismatch {
            path: path.into(),
            expected: base_fingerprint,
            found: ckpt.base_fingerprint,
        });
    }
    Ok(ckpt)
}

/// Size in bytes of an encoded adapter with `entries` factor entries over `targets` targets.
pub fn adapter_file_size(targets: usize, entries: usize) -> usize {
    8 + 4 + 8 + 8 + 4 + 8 + 1 + 8 + 8 + 4 + targets * (4 + 1 + 2 * 8) + entries * 8 + 4
}

/// Size in bytes of an encoded base checkpoint for `config`.
pub fn base_file_size(config: &ModelConfig) -> usize {
    let params = Params::<f64>::zeros_like(config);
    let mut size = 8 + 4 + 7 * 8 + 1 + 4 + 4;
    params.for_each(|name, m| size += 4 + name.len() + 4 + 16 + 8 * m.len());
    size
}
