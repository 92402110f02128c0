//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CAPS"  u32 version
//! u32 len, config text      (key = value, see `config`)
//! u32 len, state text       (epoch, shuffle RNG, Adam step, metric history)
//! u32 record count
//! per record: u16 name len, name, u8 dtype, u8 ndim, u64 dims.., payload
//! u32 CRC-32 of everything above
//! ```
//!
//! Records hold the model parameters in model order followed by the Adam
//! moments as `adam.m.<name>` and `adam.v.<name>`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};
use crate::model::{CapsNet, ModelError};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::{Adam, MetricRecord, TrainState};

pub const MAGIC: &[u8; 4] = b"CAPS";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn format_err(detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(detail.into())
}

/// A trained model together with the state needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub run: RunConfig,
    pub model: CapsNet<T>,
    pub state: TrainState<T>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn state_text<T>(state: &TrainState<T>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "epoch = {}", state.epoch);
    let _ = writeln!(s, "rng.seed = {}", hex(&state.rng.get_seed()));
    let _ = writeln!(s, "rng.stream = {}", state.rng.get_stream());
    let _ = writeln!(s, "rng.word_pos = {}", state.rng.get_word_pos());
    let _ = writeln!(s, "adam.step = {}", state.adam.step);
    for r in &state.history {
        let _ = writeln!(
            s,
            "metric = {},{},{},{},{}",
            r.epoch, r.margin, r.reconstruction, r.total, r.val_accuracy
        );
    }
    s
}

struct ParsedState {
    epoch: usize,
    rng: ChaCha8Rng,
    adam_step: u64,
    history: Vec<MetricRecord>,
}

fn parse_state(text: &str) -> Result<ParsedState> {
    let mut epoch = None;
    let mut seed = None;
    let mut stream = None;
    let mut word_pos = None;
    let mut adam_step = None;
    let mut history = Vec::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| format_err(format!("bad state line {line:?}")))?;
        let bad = || format_err(format!("bad state value {line:?}"));
        match key {
            "epoch" => epoch = Some(value.parse().map_err(|_| bad())?),
            "rng.seed" => seed = Some(unhex(value).ok_or_else(bad)?),
            "rng.stream" => stream = Some(value.parse().map_err(|_| bad())?),
            "rng.word_pos" => word_pos = Some(value.parse().map_err(|_| bad())?),
            "adam.step" => adam_step = Some(value.parse().map_err(|_| bad())?),
            "metric" => {
                let f: Vec<&str> = value.split(',').collect();
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
                history.push(MetricRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    margin: num(1)?,
                    reconstruction: num(2)?,
                    total: num(3)?,
                    val_accuracy: num(4)?,
                });
            }
            _ => return Err(format_err(format!("unknown state key {key:?}"))),
        }
    }
    let missing = |k: &str| format_err(format!("state lacks {k}"));
    let mut rng = ChaCha8Rng::from_seed(seed.ok_or_else(|| missing("rng.seed"))?);
    rng.set_stream(stream.ok_or_else(|| missing("rng.stream"))?);
    rng.set_word_pos(word_pos.ok_or_else(|| missing("rng.word_pos"))?);
    Ok(ParsedState {
        epoch: epoch.ok_or_else(|| missing("epoch"))?,
        rng,
        adam_step: adam_step.ok_or_else(|| missing("adam.step"))?,
        history,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("truncated while reading {what} at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| format_err(format!("{what} is not UTF-8")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let n = self.u16("record name")? as usize;
        let name = std::str::from_utf8(self.take(n, "record name")?)
            .map_err(|_| format_err("record name is not UTF-8"))?
            .to_string();
        let code = self.u8("dtype")?;
        let dtype = Dtype::from_code(code).ok_or_else(|| format_err(format!("{name}: unknown dtype {code}")))?;
        let ndim = self.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(format!("{name}: shape {shape:?} overflows")))?;
        let payload = self.take(
            numel
                .checked_mul(dtype.size())
                .ok_or_else(|| format_err(format!("{name}: payload overflows")))?,
            &name,
        )?;
        let data = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c).as_f64()))
                .collect(),
            Dtype::F64 => payload.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        let t = Tensor::from_vec(shape, data).map_err(|e| format_err(e.to_string()))?;
        Ok((name, t))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let run = RunConfig {
            data_dir: None,
            ..self.run.clone()
        };
        put_text(&mut out, &run.to_text());
        put_text(&mut out, &state_text(&self.state));
        let params = self.model.params();
        put_u32(&mut out, (params.len() * 3) as u32);
        for (name, t) in params {
            put_tensor(&mut out, name, t);
        }
        for (prefix, moments) in [("adam.m.", &self.state.adam.m), ("adam.v.", &self.state.adam.v)] {
            for ((name, _), t) in params.iter().zip(moments.iter()) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(format_err(format!("bad magic {magic:?}, expected \"CAPS\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}, expected {VERSION}")));
        }
        if bytes.len() < 12 {
            return Err(format_err("truncated before checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(format_err("checksum mismatch"));
        }
        r.bytes = body;

        let run = RunConfig::parse(r.text("config")?)?;
        let parsed = parse_state(r.text("state")?)?;
        let count = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            records.push(r.tensor::<T>()?);
        }
        if r.at != body.len() {
            return Err(format_err(format!("{} trailing bytes", body.len() - r.at)));
        }
        if !count.is_multiple_of(3) {
            return Err(CheckpointError::Integrity(format!(
                "{count} records is not params plus two moments"
            )));
        }
        let n = count / 3;
        let moments = records.split_off(n);
        let model = CapsNet::from_params(run.model.clone(), records).map_err(|e| match e {
            ModelError::Integrity(d) => CheckpointError::Integrity(d),
            other => CheckpointError::Integrity(other.to_string()),
        })?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (k, (name, t)) in moments.into_iter().enumerate() {
            let (prefix, slot, target) = if k < n {
                ("adam.m.", k, &mut m)
            } else {
                ("adam.v.", k - n, &mut v)
            };
            let (pname, p) = &model.params()[slot];
            if name != format!("{prefix}{pname}") || t.shape() != p.shape() {
                return Err(CheckpointError::Integrity(format!(
                    "expected {prefix}{pname} {:?}, found {name} {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
            target.push(t);
        }
        let adam = Adam {
            config: run.train.adam,
            step: parsed.adam_step,
            m,
            v,
        };
        Ok(Self {
            run,
            model,
            state: TrainState {
                epoch: parsed.epoch,
                rng: parsed.rng,
                adam,
                history: parsed.history,
            },
        })
    }

    /// Writes through a temporary file so readers never see a partial checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
