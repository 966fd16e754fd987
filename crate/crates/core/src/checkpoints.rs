//! Versioned checkpoint files, int8 weight quantization, and the
//! training-memory estimator.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "EPCK"  u32 version  u32 config_len  config TOML
//! u32 recipe_len  recipe  u8 has_round  [u64 round]
//! u32 tensor_count  { u32 name_len  name  u8 dtype  u32 rows  u32 cols  payload }*
//! u8 has_opt  [u64 step  m-tensor-table  v-tensor-table]
//! u64 fnv1a64 checksum of every preceding byte
//! ```
//!
//! dtype 0 stores raw f64 values; dtype 1 stores an f64 scale followed by
//! int8 codes (value = code * scale). Loading reproduces the stored payload
//! bit-exactly. Writes go to a temp file in the target directory and are
//! renamed into place.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{LayerId, ModelConfig, ModelParams};
use crate::numerics::{fnv1a64, Matrix};
use crate::training::{FreezeMask, OptState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_QI8: u8 = 1;

/// Creation metadata carried alongside the tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub recipe: String,
    pub round: Option<u64>,
}

/// Symmetric per-tensor int8 quantization of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i8>,
    pub scale: f64,
}

/// Quantizes with scale = max|x| / 127 (1.0 for an all-zero tensor);
/// codes are round(x / scale) clamped to [-127, 127].
pub fn quantize(tensor: &Matrix) -> Result<QuantizedTensor> {
    let data = tensor.data();
    let mut max_abs = 0.0f64;
    for &v in data {
        if !v.is_finite() {
            return Err(Error::NonFinite("quantize input"));
        }
        max_abs = max_abs.max(v.abs());
    }
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let values = data
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(QuantizedTensor {
        rows: tensor.rows(),
        cols: tensor.cols(),
        values,
        scale,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Matrix> {
    let data: Vec<f64> = q.values.iter().map(|&c| c as f64 * q.scale).collect();
    Matrix::from_vec(q.rows, q.cols, data)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
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

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadCheckpoint(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::BadCheckpoint("non-utf8 string field".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

enum Payload {
    F64(Vec<f64>),
    Qi8 { scale: f64, codes: Vec<i8> },
}

struct Record {
    name: String,
    rows: usize,
    cols: usize,
    payload: Payload,
}

impl Record {
    fn values(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::Qi8 { scale, codes } => codes.iter().map(|&c| c as f64 * scale).collect(),
        }
    }
}

fn write_f64_table(w: &mut Writer, tensors: &[crate::model::TensorView<'_>]) {
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.str(&t.name);
        w.u8(DTYPE_F64);
        w.u32(t.rows as u32);
        w.u32(t.cols as u32);
        for &v in t.data {
            w.f64(v);
        }
    }
}

fn read_table(r: &mut Reader<'_>) -> Result<Vec<Record>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let dtype = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::BadCheckpoint(format!("tensor {name} shape overflows")))?;
        let payload = match dtype {
            DTYPE_F64 => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(r.f64()?);
                }
                Payload::F64(v)
            }
            DTYPE_QI8 => {
                let scale = r.f64()?;
                let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
                Payload::Qi8 { scale, codes }
            }
            other => {
                return Err(Error::BadCheckpoint(format!(
                    "tensor {name} has unknown dtype {other}"
                )))
            }
        };
        out.push(Record {
            name,
            rows,
            cols,
            payload,
        });
    }
    Ok(out)
}

/// Fills a zeroed parameter tree from a named record table, insisting that
/// every tensor is present with the right shape.
fn params_from_records(config: &ModelConfig, records: Vec<Record>, what: &str) -> Result<ModelParams> {
    let mut by_name: HashMap<String, Record> = HashMap::new();
    for rec in records {
        if by_name.insert(rec.name.clone(), rec).is_some() {
            return Err(Error::BadCheckpoint(format!("{what}: duplicate tensor")));
        }
    }
    let mut params = ModelParams::zeros(config)?;
    for (name, _, data) in params.tensors_mut() {
        let rec = by_name
            .remove(&name)
            .ok_or_else(|| Error::BadCheckpoint(format!("{what}: missing tensor {name}")))?;
        if rec.rows * rec.cols != data.len() {
            return Err(Error::BadCheckpoint(format!(
                "{what}: tensor {name} has shape {}x{}, config wants {} values",
                rec.rows,
                rec.cols,
                data.len()
            )));
        }
        data.copy_from_slice(&rec.values());
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::BadCheckpoint(format!("{what}: unexpected tensor {name}")));
    }
    Ok(params)
}

fn encode(model: &ModelParams, opt: Option<&OptState>, meta: &CheckpointMeta, quantized: bool) -> Result<Vec<u8>> {
    if !model.is_finite() {
        return Err(Error::NonFinite("checkpoint tensors"));
    }
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let config_toml =
        toml::to_string(&model.config).map_err(|e| Error::BadCheckpoint(format!("config encode: {e}")))?;
    w.str(&config_toml);
    w.str(&meta.recipe);
    match meta.round {
        Some(r) => {
            w.u8(1);
            w.u64(r);
        }
        None => w.u8(0),
    }

    let tensors = model.tensors();
    if quantized {
        w.u32(tensors.len() as u32);
        for t in &tensors {
            let q = quantize(&Matrix::from_vec(t.rows, t.cols, t.data.to_vec())?)?;
            w.str(&t.name);
            w.u8(DTYPE_QI8);
            w.u32(t.rows as u32);
            w.u32(t.cols as u32);
            w.f64(q.scale);
            w.buf.extend(q.values.iter().map(|&c| c as u8));
        }
    } else {
        write_f64_table(&mut w, &tensors);
    }

    match opt {
        Some(opt) => {
            w.u8(1);
            w.u64(opt.step);
            write_f64_table(&mut w, &opt.m.tensors());
            write_f64_table(&mut w, &opt.v.tensors());
        }
        None => w.u8(0),
    }

    let checksum = fnv1a64(&w.buf);
    w.u64(checksum);
    Ok(w.buf)
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let stamp = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp_name = format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"),
        std::process::id(),
        stamp
    );
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io(e)
    })
}

/// Saves full-precision tensors, optionally with optimizer state.
pub fn save_checkpoint(path: &Path, model: &ModelParams, opt: Option<&OptState>, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode(model, opt, meta, false)?)
}

/// Saves int8-quantized tensors (no optimizer state): the inference
/// artifact. Loading returns the dequantized weights.
pub fn save_checkpoint_quantized(path: &Path, model: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode(model, None, meta, true)?)
}

/// Loads a checkpoint, verifying the trailing checksum before parsing.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptState>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 {
        return Err(Error::BadCheckpoint("file too short".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic bytes".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::ChecksumMismatch);
    }

    let mut r = Reader::new(&body[4..]);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let config_toml = r.str()?;
    let config: ModelConfig =
        toml::from_str(&config_toml).map_err(|e| Error::BadCheckpoint(format!("config decode: {e}")))?;
    config.validate()?;
    let recipe = r.str()?;
    let round = match r.u8()? {
        0 => None,
        1 => Some(r.u64()?),
        other => {
            return Err(Error::BadCheckpoint(format!("bad round flag {other}")));
        }
    };

    let params = params_from_records(&config, read_table(&mut r)?, "model")?;

    let opt = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = params_from_records(&config, read_table(&mut r)?, "opt.m")?;
            let v = params_from_records(&config, read_table(&mut r)?, "opt.v")?;
            Some(OptState { m, v, step })
        }
        other => {
            return Err(Error::BadCheckpoint(format!("bad optimizer flag {other}")));
        }
    };
    if !r.done() {
        return Err(Error::BadCheckpoint("trailing bytes after optimizer state".into()));
    }

    Ok((params, opt, CheckpointMeta { recipe, round }))
}

const BYTES_PER_F64: u64 = 8;

fn lstm_param_count(in_dim: u64, hidden: u64) -> u64 {
    4 * hidden * in_dim + 4 * hidden * hidden + 4 * hidden
}

fn layer_param_count(config: &ModelConfig, layer: LayerId) -> u64 {
    let h = config.hidden_size as u64;
    let v1 = config.num_outputs() as u64;
    match layer {
        LayerId::Encoder(0) => lstm_param_count(config.stacked_dim() as u64, h),
        LayerId::Encoder(_) | LayerId::Prediction(_) => lstm_param_count(h, h),
        LayerId::Embedding => v1 * h,
        LayerId::Joint => 2 * h * h + h + v1 * h + v1,
    }
}

/// Closed-form peak training memory for one utterance of at most `t_max`
/// encoder frames and `u_max` transcript tokens:
///
/// - every parameter, in f64;
/// - gradient plus two Adam moments for the masked tensors only;
/// - the backprop tape for layers at or above the lowest masked layer in
///   each branch: per encoder step `in_dim + 7H` floats for taped layers,
///   likewise per prediction step (the embedding sits below prediction
///   layer 0), plus the joint hidden activations `t_max*(u_max+1)*H`
///   whenever anything at all is trainable;
/// - the alignment lattice, `t_max*(u_max+1)*(V+1)`.
///
/// An empty mask therefore prices pure inference plus the lattice.
pub fn estimate_training_memory(config: &ModelConfig, mask: &FreezeMask, t_max: usize, u_max: usize) -> u64 {
    let h = config.hidden_size as u64;
    let t = t_max as u64;
    let u1 = u_max as u64 + 1;

    let mut total = 0;
    for id in config.layer_ids() {
        total += layer_param_count(config, id) * BYTES_PER_F64;
        if mask.contains(id) {
            total += 3 * layer_param_count(config, id) * BYTES_PER_F64;
        }
    }

    let min_enc = (0..config.encoder_layers)
        .find(|&i| mask.contains(LayerId::Encoder(i)));
    if let Some(first) = min_enc {
        for i in first..config.encoder_layers {
            let in_dim = if i == 0 { config.stacked_dim() as u64 } else { h };
            total += t * (in_dim + 7 * h) * BYTES_PER_F64;
        }
    }

    let min_pred = if mask.contains(LayerId::Embedding) {
        Some(0)
    } else {
        (0..config.prediction_layers).find(|&i| mask.contains(LayerId::Prediction(i)))
    };
    if let Some(first) = min_pred {
        for _ in first..config.prediction_layers {
            total += u1 * (h + 7 * h) * BYTES_PER_F64;
        }
    }

    if !mask.is_empty() {
        total += t * u1 * h * BYTES_PER_F64;
    }

    total += t * u1 * config.num_outputs() as u64 * BYTES_PER_F64;
    total
}
