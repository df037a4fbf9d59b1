//! Single-file little-endian checkpoint container.
//!
//! Layout: magic `MOELABCK`, `u32` version, `u8` dtype, the run config as
//! `key = value` text, `tokens_seen`, `step`, the dropout generator state,
//! the named parameters (name, dtype, shape, values) and the optimizer state
//! (step, hyperparameters, then per parameter the optional FP16 divisors and
//! the two moment buffers).

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MOELABCK";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Run configuration as `key = value` text.
    pub config: String,
    pub tokens_seen: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<T>,
    pub optimizer: Adam<T>,
}

/// What can be read without knowing the value type.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: DType,
    pub config: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, v: &[T]) {
    put_u64(out, v.len() as u64);
    v.iter().for_each(|x| x.write_le(out));
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(self.fail(format!("implausible length {n}")));
        }
        Ok(n)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("invalid UTF-8 string"))
    }

    fn values<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.len()?;
        let size = T::DTYPE.size_bytes();
        let raw = self.take(
            n.checked_mul(size)
                .ok_or_else(|| self.fail("length overflow"))?,
        )?;
        Ok(raw.chunks_exact(size).map(T::read_le).collect())
    }

    fn header(&mut self) -> Result<CheckpointHeader> {
        if self.take(8)? != MAGIC {
            return Err(self.fail("not a checkpoint (bad magic)"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let code = self.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| self.fail(format!("unknown dtype code {code}")))?;
        let config = self.string()?;
        Ok(CheckpointHeader {
            version,
            dtype,
            config,
        })
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(T::DTYPE.code());
        put_bytes(&mut out, self.config.as_bytes());
        put_u64(&mut out, self.tokens_seen);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            out.push(T::DTYPE.code());
            put_u32(&mut out, p.value.ndim() as u32);
            p.value
                .shape()
                .iter()
                .for_each(|&d| put_u64(&mut out, d as u64));
            put_values(&mut out, p.value.data());
        }

        let opt = &self.optimizer;
        put_u64(&mut out, opt.step);
        let c = opt.config;
        for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            put_f64(&mut out, v);
        }
        out.push(c.fp16_state as u8);
        put_u32(&mut out, opt.moments.len() as u32);
        for m in &opt.moments {
            match (m.scale_m, m.scale_v) {
                (Some(a), Some(b)) => {
                    out.push(1);
                    put_f64(&mut out, a);
                    put_f64(&mut out, b);
                }
                _ => out.push(0),
            }
            put_values(&mut out, &m.m);
            put_values(&mut out, &m.v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        let header = r.header()?;
        if header.dtype != T::DTYPE {
            return Err(r.fail(format!(
                "checkpoint stores {:?} values, {:?} requested",
                header.dtype,
                T::DTYPE
            )));
        }
        let tokens_seen = r.u64()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };

        let n_params = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = r.string()?;
            let code = r.u8()?;
            if code != T::DTYPE.code() {
                return Err(r.fail(format!("parameter {name} has dtype code {code}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.values::<T>()?;
            let value =
                Tensor::new(shape, data).map_err(|e| r.fail(format!("parameter {name}: {e}")))?;
            params.insert(name, value)?;
        }

        let opt_step = r.u64()?;
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
            fp16_state: r.u8()? != 0,
        };
        let n_moments = r.u32()? as usize;
        if n_moments != n_params {
            return Err(r.fail(format!(
                "{n_moments} moment buffers for {n_params} parameters"
            )));
        }
        let mut moments = Vec::with_capacity(n_moments);
        for p in params.iter() {
            let (scale_m, scale_v) = if r.u8()? == 1 {
                (Some(r.f64()?), Some(r.f64()?))
            } else {
                (None, None)
            };
            let m = r.values::<T>()?;
            let v = r.values::<T>()?;
            if m.len() != p.value.numel() || v.len() != p.value.numel() {
                return Err(r.fail(format!("moment size mismatch for {}", p.name)));
            }
            moments.push(Moments {
                m,
                v,
                scale_m,
                scale_v,
            });
        }
        if r.pos != buf.len() {
            return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            config: header.config,
            tokens_seen,
            step,
            rng,
            params,
            optimizer: Adam {
                config,
                step: opt_step,
                moments,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Reader {
        buf: &buf,
        pos: 0,
        path,
    }
    .header()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Transformer};
    use rand::RngCore;

    fn sample() -> Checkpoint<f32> {
        let mut cfg = ModelConfig::default();
        cfg.layers = 2;
        cfg.hidden = 16;
        cfg.heads = 2;
        cfg.experts = 2;
        cfg.seq_len = 8;
        let model = Transformer::<f32>::new(cfg, 1).unwrap();
        let mut params = model.params().clone();
        for p in params.iter_mut() {
            p.grad.fill(0.01);
        }
        let mut opt = Adam::new(
            AdamConfig {
                fp16_state: true,
                ..Default::default()
            },
            &params,
        );
        opt.step(&mut params, 1e-3).unwrap();
        params.zero_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(1);
        rng.next_u64();
        Checkpoint {
            config: "layers = 2\n".into(),
            tokens_seen: 4096,
            step: 1,
            rng: RngState::capture(9, &rng),
            params,
            optimizer: opt,
        }
    }

    #[test]
    fn save_load_save_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ck = sample();
        ck.save(&a).unwrap();
        let loaded = Checkpoint::<f32>::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_header(&a).unwrap().dtype, DType::F32);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(2);
        rng.next_u32();
        let state = RngState::capture(3, &rng);
        let mut back = state.restore();
        assert_eq!(rng.next_u64(), back.next_u64());
    }

    #[test]
    fn rejects_corruption() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::<f64>::from_bytes(&bytes, p).is_err());
        bytes[8] = 9;
        let err = Checkpoint::<f32>::from_bytes(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("version"));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"NOTACKPT", p).is_err());
    }
}
