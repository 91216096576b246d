use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use super::optim::AdadeltaState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, UNetMobileNetV2};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UMNV2CK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const AVG_SQ_GRAD: &str = "optimizer.avg_sq_grad.";
const AVG_SQ_UPDATE: &str = "optimizer.avg_sq_update.";

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    epoch: usize,
    best_val_loss: Option<f64>,
    best_epoch: usize,
    epochs_since_improvement: usize,
    model_config: ModelConfig,
    train_config: TrainConfig,
    rng: RngMeta,
}

/// Complete resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams<f32>,
    pub optimizer: AdadeltaState<f32>,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub rng: RngState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(text: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("rng seed `{text}` is not 64 hex digits"));
    if text.len() != 64 || !text.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&text[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

impl Checkpoint {
    /// Tensors in file order: sorted by name, optimizer accumulators under
    /// `optimizer.avg_sq_grad.*` and `optimizer.avg_sq_update.*`.
    fn named_tensors(&self) -> BTreeMap<String, &Tensor<f32>> {
        let mut out: BTreeMap<String, &Tensor<f32>> =
            self.params.iter().map(|(n, t)| (n.to_owned(), t)).collect();
        for (name, t) in &self.optimizer.avg_sq_grad {
            out.insert(format!("{AVG_SQ_GRAD}{name}"), t);
        }
        for (name, t) in &self.optimizer.avg_sq_update {
            out.insert(format!("{AVG_SQ_UPDATE}{name}"), t);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(tensors.len())
                .expect("tensor count")
                .to_le_bytes(),
        );
        for (name, t) in &tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: `{name}`")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &extent in t.shape() {
                let extent = u32::try_from(extent).map_err(|_| {
                    Error::Checkpoint(format!("`{name}` extent {extent} exceeds u32"))
                })?;
                out.extend_from_slice(&extent.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Meta {
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            best_epoch: self.best_epoch,
            epochs_since_improvement: self.epochs_since_improvement,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            rng: RngMeta {
                seed: hex(&self.rng.seed),
                stream: self.rng.stream,
                word_pos: self.rng.word_pos.to_string(),
            },
        };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(
            &u32::try_from(json.len())
                .expect("metadata size")
                .to_le_bytes(),
        );
        out.extend_from_slice(&json);
        Ok(out)
    }

    /// Parses and validates a checkpoint: header, framing, and every tensor
    /// shape against the embedded model config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let count = r.u32("tensor count")?;
        let mut params = ModelParams::new();
        let mut avg_sq_grad = BTreeMap::new();
        let mut avg_sq_update = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8("rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has unsupported rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` size overflows")))?;
            let raw = r.take(numel, &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("tensor `{name}` appears twice")));
            }
            if let Some(param) = name.strip_prefix(AVG_SQ_GRAD) {
                avg_sq_grad.insert(param.to_owned(), tensor);
            } else if let Some(param) = name.strip_prefix(AVG_SQ_UPDATE) {
                avg_sq_update.insert(param.to_owned(), tensor);
            } else {
                params.insert(name, tensor);
            }
        }
        let json_len = r.u32("metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(json_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = UNetMobileNetV2::new(meta.model_config.clone())?;
        params
            .check_against(&model.param_specs())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optimizer = AdadeltaState {
            avg_sq_grad,
            avg_sq_update,
        };
        optimizer.check_against(&params)?;
        let word_pos = meta.rng.word_pos.parse().map_err(|_| {
            Error::Checkpoint(format!("bad rng word position `{}`", meta.rng.word_pos))
        })?;
        Ok(Self {
            model_config: meta.model_config,
            train_config: meta.train_config,
            params,
            optimizer,
            epoch: meta.epoch,
            best_val_loss: meta.best_val_loss,
            best_epoch: meta.best_epoch,
            epochs_since_improvement: meta.epochs_since_improvement,
            rng: RngState {
                seed: unhex(&meta.rng.seed)?,
                stream: meta.rng.stream,
                word_pos,
            },
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = Path::new(&tmp);
        fs::write(tmp, &bytes).map_err(|e| Error::path(tmp, e))?;
        fs::rename(tmp, path).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Appends one JSON line per record.
pub fn append_history(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::path(path, e))?;
    for record in records {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        file.write_all(&line).map_err(|e| Error::path(path, e))?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::path(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::path(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
