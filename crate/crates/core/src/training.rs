//! Adam with per-layer freeze masks, the server-side personalization recipe,
//! and the on-device consecutive-training scheduler.
//!
//! The freeze mask names the layers an update may touch; everything outside
//! it stays bit-identical, which the tests assert by checksum. The on-device
//! path trains one round after every N freshly recorded utterances and drops
//! them as soon as the round finishes — the only trace an utterance leaves is
//! the (hypothesis, reference) text pair in its round's log.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::corpus_wer;
use crate::grad::{batch_encoder_ce, batch_loss_and_grads, FrameHead, Reduction};
use crate::model::{LayerId, ModelConfig, ModelGrads, ModelParams};
use crate::numerics::{dot, fnv1a64, mix_seed, Rng};
use crate::synthcorpus::{frame_alignment, Utterance};
use crate::transducer::{transcribe, DecodeOptions};

/// The set of layers an optimizer step is allowed to update.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask {
    trainable: BTreeSet<LayerId>,
}

impl FreezeMask {
    pub fn none() -> FreezeMask {
        FreezeMask::default()
    }

    pub fn all(config: &ModelConfig) -> FreezeMask {
        FreezeMask {
            trainable: config.layer_ids().into_iter().collect(),
        }
    }

    pub fn from_layers<I: IntoIterator<Item = LayerId>>(layers: I) -> FreezeMask {
        FreezeMask {
            trainable: layers.into_iter().collect(),
        }
    }

    /// Server recipe: update only the first five encoder layers.
    pub fn server_recipe() -> FreezeMask {
        FreezeMask::from_layers((0..5).map(LayerId::Encoder))
    }

    /// On-device recipe: update only encoder layers 2, 3 and 4.
    pub fn ondevice_recipe() -> FreezeMask {
        FreezeMask::from_layers((2..5).map(LayerId::Encoder))
    }

    pub fn contains(&self, layer: LayerId) -> bool {
        self.trainable.contains(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.trainable.iter().copied()
    }

    /// Parses a comma- or whitespace-separated layer list such as
    /// "enc2,enc3,enc4".
    pub fn parse(spec: &str) -> Result<FreezeMask> {
        let mut trainable = BTreeSet::new();
        for tok in spec.split(|c: char| c == ',' || c.is_whitespace()) {
            if !tok.is_empty() {
                trainable.insert(tok.parse()?);
            }
        }
        Ok(FreezeMask { trainable })
    }

    /// Every masked layer must exist in the model.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let known: BTreeSet<LayerId> = config.layer_ids().into_iter().collect();
        for id in &self.trainable {
            if !known.contains(id) {
                return Err(Error::Config(format!("freeze mask names missing layer {id}")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for FreezeMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self.trainable.iter().map(|l| l.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

/// Adam moment accumulators; shapes mirror the parameter tree.
#[derive(Debug, Clone)]
pub struct OptState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptState {
    pub fn new(config: &ModelConfig) -> Result<OptState> {
        Ok(OptState {
            m: ModelParams::zeros(config)?,
            v: ModelParams::zeros(config)?,
            step: 0,
        })
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update restricted to the masked layers.
///
/// Gradients are first clipped to a global L2 norm of `clip_norm`, computed
/// over the masked tensors only (frozen layers take no part in the update, so
/// they do not influence the clip scale either). Tensors outside the mask are
/// left bit-identical.
pub fn adam_step(
    opt: &mut OptState,
    params: &mut ModelParams,
    grads: &ModelGrads,
    mask: &FreezeMask,
    lr: f64,
    clip_norm: f64,
) -> Result<()> {
    if grads.config != params.config {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: "gradient tree matching parameter tree".into(),
            got: "differing model configs".into(),
        });
    }
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }

    let grad_tensors = grads.tensors();
    let mut sq_norm = 0.0;
    for t in &grad_tensors {
        if mask.contains(t.layer) {
            sq_norm += dot(t.data, t.data);
        }
    }
    if !sq_norm.is_finite() {
        return Err(Error::NonFinite("adam_step gradients"));
    }
    let norm = sq_norm.sqrt();
    let clip_scale = if clip_norm.is_finite() && clip_norm > 0.0 && norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };

    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);

    let mut m_tensors = opt.m.tensors_mut();
    let mut v_tensors = opt.v.tensors_mut();
    for (((_, layer, p), g), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_tensors)
        .zip(m_tensors.iter_mut().map(|t| &mut *t.2).zip(v_tensors.iter_mut().map(|t| &mut *t.2)))
    {
        if !mask.contains(layer) {
            continue;
        }
        for k in 0..p.len() {
            let gk = g.data[k] * clip_scale;
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Framewise encoder pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    /// Stop early once the mean epoch loss (nats per frame) drops below
    /// this.
    pub stop_loss: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 8,
            learning_rate: 1e-3,
            batch_size: 16,
            grad_clip_norm: 5.0,
            stop_loss: 0.05,
            seed: 1,
        }
    }
}

/// Adam moments for the throwaway classification head.
struct HeadOpt {
    m_proj: Vec<f64>,
    v_proj: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
    step: u64,
}

fn head_adam_update(m: &mut [f64], v: &mut [f64], p: &mut [f64], g: &[f64], lr: f64, bc1: f64, bc2: f64) {
    for k in 0..p.len() {
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
        p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
    }
}

/// Framewise cross-entropy pretraining of the encoder stack. Returns the
/// top-layer mean loss of each epoch run.
///
/// Training the transducer objective from scratch on a small phrase
/// inventory reliably stalls in a language-model shortcut: the two-layer
/// prediction network memorizes the phrase prior before any gradient has
/// made it through the eight encoder layers, train and dev loss both settle
/// near the phrase-set entropy, and decodes come out fluent but
/// content-wrong. Per-frame character classification gives the encoder a
/// direct acoustic gradient at every frame, and a head per layer keeps that
/// signal from attenuating through depth, so transducer training starts in
/// a basin where the input matters. The heads are internal scaffolding and
/// are dropped on return; only encoder layers are updated, everything else
/// stays bit-identical.
pub fn pretrain_encoder(
    model: &mut ModelParams,
    utts: &[&Utterance],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if utts.is_empty() {
        return Err(Error::EmptyInput("pretrain_encoder"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be >= 1".into()));
    }
    let mcfg = model.config.clone();
    let mut rng = Rng::new(mix_seed(cfg.seed, &[fnv1a64(b"pretrain")]));
    let mut heads: Vec<FrameHead> = (0..mcfg.encoder_layers)
        .map(|_| FrameHead::init(mcfg.vocab_size(), mcfg.hidden_size, &mut rng))
        .collect();
    let mask = FreezeMask::from_layers((0..mcfg.encoder_layers).map(LayerId::Encoder));
    let mut opt = OptState::new(&mcfg)?;
    let mut head_opts: Vec<HeadOpt> = heads
        .iter()
        .map(|h| HeadOpt {
            m_proj: vec![0.0; h.proj.data().len()],
            v_proj: vec![0.0; h.proj.data().len()],
            m_bias: vec![0.0; h.bias.len()],
            v_bias: vec![0.0; h.bias.len()],
            step: 0,
        })
        .collect();

    let targets: Vec<Vec<char>> = utts
        .iter()
        .map(|u| frame_alignment(&u.transcript, u.features.len()))
        .collect::<Result<_>>()?;

    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = (0..utts.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut top_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&crate::model::FeatureSequence, &[char])> = chunk
                .iter()
                .map(|&i| (&utts[i].features, targets[i].as_slice()))
                .collect();
            let (losses, grads, hgs) = batch_encoder_ce(model, &heads, &batch)?;
            adam_step(&mut opt, model, &grads, &mask, cfg.learning_rate, cfg.grad_clip_norm)?;
            for ((head, hopt), hg) in heads.iter_mut().zip(&mut head_opts).zip(&hgs) {
                hopt.step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(hopt.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(hopt.step as i32);
                head_adam_update(
                    &mut hopt.m_proj,
                    &mut hopt.v_proj,
                    head.proj.data_mut(),
                    hg.proj.data(),
                    cfg.learning_rate,
                    bc1,
                    bc2,
                );
                head_adam_update(
                    &mut hopt.m_bias,
                    &mut hopt.v_bias,
                    &mut head.bias,
                    &hg.bias,
                    cfg.learning_rate,
                    bc1,
                    bc2,
                );
            }
            top_sum += losses.last().copied().unwrap_or(0.0);
            batches += 1;
        }
        let mean = top_sum / batches as f64;
        epoch_losses.push(mean);
        if mean < cfg.stop_loss {
            break;
        }
    }
    Ok(epoch_losses)
}

/// On-device round settings (defaults: N=5, E=4, lr 1e-3).
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub utterances_per_round: usize,
    pub epochs_per_round: usize,
    pub learning_rate: f64,
    pub freeze: FreezeMask,
    pub grad_clip_norm: f64,
    /// Reset Adam moments at the start of every round instead of carrying
    /// them across the run.
    pub reset_opt_per_round: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            utterances_per_round: 5,
            epochs_per_round: 4,
            learning_rate: 1e-3,
            freeze: FreezeMask::ondevice_recipe(),
            grad_clip_norm: 5.0,
            reset_opt_per_round: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.utterances_per_round == 0 {
            return Err(Error::Config("utterances_per_round must be >= 1".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(Error::Config("epochs_per_round must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Holds at most N utterances awaiting the next round, together with the
/// hypothesis transcribed when each was recorded.
#[derive(Debug, Default)]
pub struct UtteranceBuffer {
    capacity: usize,
    pending: Vec<(Utterance, String)>,
}

impl UtteranceBuffer {
    pub fn new(capacity: usize) -> UtteranceBuffer {
        UtteranceBuffer {
            capacity,
            pending: Vec::with_capacity(capacity),
        }
    }

    /// Adds a recording and the hypothesis produced for it at recording time.
    pub fn record(&mut self, utterance: Utterance, hypothesis: String) -> Result<()> {
        if self.pending.len() >= self.capacity {
            return Err(Error::Data(format!(
                "utterance buffer is full ({} of {})",
                self.pending.len(),
                self.capacity
            )));
        }
        self.pending.push((utterance, hypothesis));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn drain_all(&mut self) -> Vec<(Utterance, String)> {
        std::mem::take(&mut self.pending)
    }
}

/// What one training round leaves behind. The utterances themselves are
/// gone; only transcript text survives.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// (hypothesis at recording time, reference transcript) per utterance.
    pub pairs: Vec<(String, String)>,
    pub checkpoint: String,
    /// Batch loss per epoch (summed over the round's utterances).
    pub losses: Vec<f64>,
}

/// Trains one on-device round: E epochs over the buffered batch, one Adam
/// step per epoch on the summed loss. The buffer is emptied before
/// returning, whatever happens; the log keeps only text pairs.
pub fn train_round(
    params: &mut ModelParams,
    opt: &mut OptState,
    buffer: &mut UtteranceBuffer,
    cfg: &RoundConfig,
    round_index: usize,
) -> Result<RoundLog> {
    cfg.validate()?;
    cfg.freeze.validate(&params.config)?;
    if buffer.is_empty() {
        return Err(Error::EmptyInput("train_round buffer"));
    }
    if buffer.len() != cfg.utterances_per_round {
        return Err(Error::Data(format!(
            "round needs exactly {} utterances, buffer holds {}",
            cfg.utterances_per_round,
            buffer.len()
        )));
    }
    let consumed = buffer.drain_all();
    if cfg.reset_opt_per_round {
        *opt = OptState::new(&params.config)?;
    }

    let mut tokens = Vec::with_capacity(consumed.len());
    for (utt, _) in &consumed {
        tokens.push(params.config.encode_transcript(&utt.transcript)?);
    }
    let batch: Vec<(&crate::model::FeatureSequence, &[usize])> = consumed
        .iter()
        .zip(&tokens)
        .map(|((utt, _), toks)| (&utt.features, toks.as_slice()))
        .collect();

    let mut losses = Vec::with_capacity(cfg.epochs_per_round);
    for _ in 0..cfg.epochs_per_round {
        let (loss, grads) = batch_loss_and_grads(params, &batch, Reduction::Sum)?;
        adam_step(opt, params, &grads, &cfg.freeze, cfg.learning_rate, cfg.grad_clip_norm)?;
        losses.push(loss);
    }

    let pairs = consumed
        .into_iter()
        .map(|(utt, hyp)| (hyp, utt.transcript))
        .collect();
    Ok(RoundLog {
        round: round_index,
        pairs,
        checkpoint: format!("round-{:02}", round_index + 1),
        losses,
    })
}

/// Result of a consecutive on-device personalization run, with the buffer
/// instrumentation the retention tests assert on.
#[derive(Debug)]
pub struct ConsecutiveRun {
    pub model: ModelParams,
    pub logs: Vec<RoundLog>,
    pub utterances_consumed: usize,
    pub max_buffer_len: usize,
    /// Buffer length observed after each round completed.
    pub buffer_len_between_rounds: Vec<usize>,
}

/// Runs `rounds` consecutive training rounds, recording N fresh utterances
/// per round. Each utterance is transcribed by the model current at its
/// recording time (that hypothesis is what the user would have corrected)
/// and discarded once its round completes. Returns the model from the last
/// round — deliberately no early stopping.
///
/// With `checkpoint_dir` set, the post-round model is saved after every
/// round and the log's checkpoint id becomes that file's path.
pub fn consecutive_personalize<I>(
    seed_model: &ModelParams,
    mut stream: I,
    rounds: usize,
    cfg: &RoundConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<ConsecutiveRun>
where
    I: Iterator<Item = Utterance>,
{
    cfg.validate()?;
    let mut model = seed_model.clone();
    let mut opt = OptState::new(&model.config)?;
    let mut buffer = UtteranceBuffer::new(cfg.utterances_per_round);
    let mut logs = Vec::with_capacity(rounds);
    let mut consumed = 0;
    let mut max_buffer_len = 0;
    let mut between = Vec::with_capacity(rounds);

    for round in 0..rounds {
        while buffer.len() < cfg.utterances_per_round {
            let utt = stream.next().ok_or(Error::StreamExhausted {
                round,
                needed: cfg.utterances_per_round,
            })?;
            let hypothesis = transcribe(&model, &utt.features, DecodeOptions::default())?;
            buffer.record(utt, hypothesis)?;
            consumed += 1;
            max_buffer_len = max_buffer_len.max(buffer.len());
        }
        let mut log = train_round(&mut model, &mut opt, &mut buffer, cfg, round)?;
        between.push(buffer.len());
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("round-{:02}.ckpt", round + 1));
            crate::checkpoints::save_checkpoint(
                &path,
                &model,
                Some(&opt),
                &crate::checkpoints::CheckpointMeta {
                    recipe: "ondevice-consecutive".into(),
                    round: Some(round as u64 + 1),
                },
            )?;
            log.checkpoint = path.display().to_string();
        }
        logs.push(log);
    }

    Ok(ConsecutiveRun {
        model,
        logs,
        utterances_consumed: consumed,
        max_buffer_len,
        buffer_len_between_rounds: between,
    })
}

/// Server-side fine-tuning settings (defaults: batch 32, lr 1e-5, up to
/// 100 epochs, early stopping on dev WER).
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a dev-WER
    /// improvement.
    pub patience: usize,
    pub freeze: FreezeMask,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Evaluate dev WER on at most this many utterances (a fixed random
    /// subset drawn once per run); None evaluates the full dev set.
    pub dev_eval_max_utts: Option<usize>,
    /// Train on at most this many pooled utterances (fixed random subset);
    /// None uses everything. A budget knob for desk-scale seed builds.
    pub max_train_utts: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            max_epochs: 100,
            patience: 10,
            freeze: FreezeMask::server_recipe(),
            grad_clip_norm: 5.0,
            seed: 1,
            dev_eval_max_utts: None,
            max_train_utts: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of a server personalization run.
#[derive(Debug)]
pub struct ServerRun {
    /// The checkpoint with the lowest dev WER (ties go to the earliest
    /// epoch; the unmodified start model is the epoch-0 candidate).
    pub model: ModelParams,
    pub best_epoch: usize,
    pub best_dev_wer: f64,
    pub epochs_run: usize,
    /// Dev WER per evaluated epoch, index 0 = the start model.
    pub dev_wer_trace: Vec<f64>,
}

/// Pooled greedy-decode WER over a set of utterances.
pub fn eval_wer(params: &ModelParams, utts: &[&Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::EmptyInput("eval_wer"));
    }
    let refs: Vec<&str> = utts.iter().map(|u| u.transcript.as_str()).collect();
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        hyps.push(transcribe(params, &u.features, DecodeOptions::default())?);
    }
    Ok(corpus_wer(&refs, &hyps)?.wer)
}

fn fixed_subset<'a>(utts: &[&'a Utterance], cap: Option<usize>, rng: &mut Rng) -> Vec<&'a Utterance> {
    match cap {
        Some(cap) if utts.len() > cap => {
            let mut idxs: Vec<usize> = (0..utts.len()).collect();
            rng.shuffle(&mut idxs);
            idxs.truncate(cap);
            idxs.sort_unstable();
            idxs.into_iter().map(|i| utts[i]).collect()
        }
        _ => utts.to_vec(),
    }
}

/// Minibatch fine-tuning with early stopping on dev WER.
pub fn server_personalize(
    start_model: &ModelParams,
    train_set: &[&Utterance],
    dev_set: &[&Utterance],
    cfg: &ServerConfig,
) -> Result<ServerRun> {
    cfg.validate()?;
    cfg.freeze.validate(&start_model.config)?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::EmptyInput("server_personalize sets"));
    }

    let mut rng = Rng::new(mix_seed(cfg.seed, &[crate::numerics::fnv1a64(b"server-personalize")]));
    let train = fixed_subset(train_set, cfg.max_train_utts, &mut rng);
    let dev = fixed_subset(dev_set, cfg.dev_eval_max_utts, &mut rng);

    let mut tokens = Vec::with_capacity(train.len());
    for u in &train {
        tokens.push(start_model.config.encode_transcript(&u.transcript)?);
    }

    let mut model = start_model.clone();
    let mut opt = OptState::new(&model.config)?;
    let mut best_model = model.clone();
    let mut best_dev = eval_wer(&model, &dev)?;
    let mut best_epoch = 0;
    let mut trace = vec![best_dev];
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&crate::model::FeatureSequence, &[usize])> = chunk
                .iter()
                .map(|&i| (&train[i].features, tokens[i].as_slice()))
                .collect();
            let (_, grads) = batch_loss_and_grads(&model, &batch, Reduction::Mean)?;
            adam_step(&mut opt, &mut model, &grads, &cfg.freeze, cfg.learning_rate, cfg.grad_clip_norm)?;
        }
        epochs_run = epoch;
        let dev_wer = eval_wer(&model, &dev)?;
        trace.push(dev_wer);
        if dev_wer < best_dev {
            best_dev = dev_wer;
            best_epoch = epoch;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }

    Ok(ServerRun {
        model: best_model,
        best_epoch,
        best_dev_wer: best_dev,
        epochs_run,
        dev_wer_trace: trace,
    })
}

/// Builds the leave-one-out seed model: fine-tunes the base model on the
/// pooled training data of every disordered speaker except the target.
pub fn build_seed_model(
    base_model: &ModelParams,
    corpus: &crate::synthcorpus::Corpus,
    leave_out: &str,
    cfg: &ServerConfig,
) -> Result<ServerRun> {
    let disordered = corpus.disordered_speakers();
    if !disordered.iter().any(|s| s.id == leave_out) {
        return Err(Error::UnknownSpeaker(leave_out.to_string()));
    }
    let pool_ids: Vec<&str> = disordered
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| *id != leave_out)
        .collect();
    if pool_ids.is_empty() {
        return Err(Error::Data("seed model needs at least one other disordered speaker".into()));
    }
    let train = corpus.pooled(&pool_ids, crate::synthcorpus::Split::Train);
    let dev = corpus.pooled(&pool_ids, crate::synthcorpus::Split::Dev);
    debug_assert!(train.iter().all(|u| u.speaker != leave_out));
    server_personalize(base_model, &train, &dev, cfg)
}

/// On-disk recipe file (TOML). Unset keys fall back to the recipe defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecipeConfig {
    pub name: String,
    pub utterances_per_round: usize,
    pub epochs_per_round: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub server_learning_rate: f64,
    pub freeze: Vec<String>,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub reset_opt_per_round: bool,
    pub dev_eval_max_utts: Option<usize>,
    pub max_train_utts: Option<usize>,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        RecipeConfig {
            name: "default".into(),
            utterances_per_round: 5,
            epochs_per_round: 4,
            rounds: 10,
            learning_rate: 1e-3,
            server_learning_rate: 1e-5,
            freeze: Vec::new(),
            grad_clip_norm: 5.0,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            reset_opt_per_round: false,
            dev_eval_max_utts: None,
            max_train_utts: None,
        }
    }
}

impl RecipeConfig {
    pub fn from_toml(text: &str) -> Result<RecipeConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("recipe: {e}")))
    }

    fn mask(&self, fallback: FreezeMask) -> Result<FreezeMask> {
        if self.freeze.is_empty() {
            Ok(fallback)
        } else {
            FreezeMask::parse(&self.freeze.join(","))
        }
    }

    pub fn round_config(&self) -> Result<RoundConfig> {
        Ok(RoundConfig {
            utterances_per_round: self.utterances_per_round,
            epochs_per_round: self.epochs_per_round,
            learning_rate: self.learning_rate,
            freeze: self.mask(FreezeMask::ondevice_recipe())?,
            grad_clip_norm: self.grad_clip_norm,
            reset_opt_per_round: self.reset_opt_per_round,
        })
    }

    pub fn server_config(&self) -> Result<ServerConfig> {
        Ok(ServerConfig {
            batch_size: self.batch_size,
            learning_rate: self.server_learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            freeze: self.mask(FreezeMask::server_recipe())?,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
            dev_eval_max_utts: self.dev_eval_max_utts,
            max_train_utts: self.max_train_utts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Grammar;
    use crate::model::init_params;
    use crate::numerics::fnv1a64;
    use crate::synthcorpus::{build_corpus, CorpusConfig, Severity, Split};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            stack_size: 2,
            stack_stride: 2,
            encoder_layers: 5,
            prediction_layers: 1,
            hidden_size: 8,
            vocab: "abcdefghijklmnopqrstuvwxyz ".into(),
        }
    }

    fn tiny_corpus() -> crate::synthcorpus::Corpus {
        let cfg = CorpusConfig {
            n_typical: 1,
            n_mild: 2,
            n_moderate: 1,
            n_severe: 1,
            utterances_per_speaker: 30,
            feature_dim: 8,
            seed: 77,
            ..CorpusConfig::default()
        };
        build_corpus(&cfg, &Grammar::default_ha()).unwrap()
    }

    /// Checksum over the masked (trainable) tensors when `masked_side` is
    /// true, over the frozen remainder when false.
    fn params_checksum(params: &ModelParams, mask: &FreezeMask, masked_side: bool) -> u64 {
        let mut acc = 0xcbf29ce484222325;
        for t in params.tensors() {
            if mask.contains(t.layer) != masked_side {
                continue;
            }
            for v in t.data {
                acc = mix_seed(acc, &[v.to_bits()]);
            }
        }
        acc
    }

    #[test]
    fn mask_presets_and_parsing() {
        let server = FreezeMask::server_recipe();
        let ondevice = FreezeMask::ondevice_recipe();
        for i in 0..5 {
            assert!(server.contains(LayerId::Encoder(i)));
        }
        assert!(!server.contains(LayerId::Encoder(5)));
        assert!(!server.contains(LayerId::Joint));
        assert!(ondevice.contains(LayerId::Encoder(2)));
        assert!(!ondevice.contains(LayerId::Encoder(1)));
        assert_eq!(ondevice.to_string(), "enc2,enc3,enc4");
        assert_eq!(FreezeMask::parse("enc2, enc3 enc4").unwrap(), ondevice);
        assert!(FreezeMask::parse("enc2,bogus").is_err());

        let cfg = tiny_model_config();
        assert!(FreezeMask::parse("enc7").unwrap().validate(&cfg).is_err());
        assert!(server.validate(&cfg).is_ok());
    }

    #[test]
    fn adam_zero_grads_is_identity() {
        let cfg = tiny_model_config();
        let mut params = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let before = params.clone();
        let grads = ModelParams::zeros(&cfg).unwrap();
        let mut opt = OptState::new(&cfg).unwrap();
        adam_step(&mut opt, &mut params, &grads, &FreezeMask::all(&cfg), 0.1, 5.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_empty_mask_is_identity() {
        let cfg = tiny_model_config();
        let mut params = init_params(&cfg, &mut Rng::new(2)).unwrap();
        let before = params.clone();
        let mut grads = ModelParams::zeros(&cfg).unwrap();
        for (_, _, data) in grads.tensors_mut() {
            data.fill(1.0);
        }
        let mut opt = OptState::new(&cfg).unwrap();
        adam_step(&mut opt, &mut params, &grads, &FreezeMask::none(), 0.1, f64::INFINITY).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_matches_hand_arithmetic() {
        // A single unit gradient entry: bias-corrected m/sqrt(v) is exactly
        // 1 on step one, so the update is -lr / (1 + eps-ish).
        let cfg = tiny_model_config();
        let mut params = ModelParams::zeros(&cfg).unwrap();
        let before = params.joint.bias[3];
        let mut grads = ModelParams::zeros(&cfg).unwrap();
        grads.joint.bias[3] = 1.0;
        let mut opt = OptState::new(&cfg).unwrap();
        adam_step(
            &mut opt,
            &mut params,
            &grads,
            &FreezeMask::from_layers([LayerId::Joint]),
            0.1,
            5.0,
        )
        .unwrap();
        let delta = params.joint.bias[3] - before;
        assert!((delta + 0.1).abs() < 1e-8, "delta {delta}");
        // Everything else untouched.
        assert!(params.joint.bias.iter().enumerate().all(|(i, &v)| i == 3 || v == 0.0));
    }

    #[test]
    fn adam_clips_global_norm_over_masked_grads() {
        let cfg = tiny_model_config();
        let mut params = ModelParams::zeros(&cfg).unwrap();
        let mut grads = ModelParams::zeros(&cfg).unwrap();
        grads.joint.bias[0] = 30.0;
        grads.joint.bias[1] = 40.0; // masked norm 50, clip 5 -> scale 0.1
        // A huge gradient outside the mask must not affect the clip scale.
        grads.encoder[0].bias[0] = 1e6;
        let mut opt = OptState::new(&cfg).unwrap();
        adam_step(
            &mut opt,
            &mut params,
            &grads,
            &FreezeMask::from_layers([LayerId::Joint]),
            0.1,
            5.0,
        )
        .unwrap();
        // After clipping the direction is unchanged; Adam normalizes each
        // coordinate, so both entries move by about -lr.
        assert!(params.joint.bias[0] < 0.0 && params.joint.bias[1] < 0.0);
        assert!((opt.m.joint.bias[0] - 0.3).abs() < 1e-12);
        assert!((opt.m.joint.bias[1] - 0.4).abs() < 1e-12);
        assert_eq!(opt.m.encoder[0].bias[0], 0.0);
    }

    #[test]
    fn train_round_respects_freeze_and_empties_buffer() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let mut params = init_params(&model_cfg, &mut Rng::new(3)).unwrap();
        let cfg = RoundConfig {
            utterances_per_round: 3,
            epochs_per_round: 2,
            ..RoundConfig::default()
        };
        let frozen_before = params_checksum(&params, &cfg.freeze, false);
        let trainable_before = params_checksum(&params, &cfg.freeze, true);

        let mut buffer = UtteranceBuffer::new(3);
        for u in corpus.utts("mild01", Split::Train).into_iter().take(3) {
            buffer.record(u.clone(), "hyp".into()).unwrap();
        }
        let mut opt = OptState::new(&model_cfg).unwrap();
        let log = train_round(&mut params, &mut opt, &mut buffer, &cfg, 0).unwrap();

        assert!(buffer.is_empty());
        assert_eq!(log.pairs.len(), 3);
        assert_eq!(log.losses.len(), 2);
        assert_eq!(params_checksum(&params, &cfg.freeze, false), frozen_before);
        assert_ne!(params_checksum(&params, &cfg.freeze, true), trainable_before);
    }

    #[test]
    fn train_round_requires_exactly_n() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let mut params = init_params(&model_cfg, &mut Rng::new(4)).unwrap();
        let cfg = RoundConfig {
            utterances_per_round: 5,
            ..RoundConfig::default()
        };
        let mut opt = OptState::new(&model_cfg).unwrap();
        let mut empty = UtteranceBuffer::new(5);
        assert!(train_round(&mut params, &mut opt, &mut empty, &cfg, 0).is_err());

        let mut partial = UtteranceBuffer::new(5);
        let utt = corpus.utts("mild01", Split::Train)[0].clone();
        partial.record(utt, "h".into()).unwrap();
        assert!(train_round(&mut params, &mut opt, &mut partial, &cfg, 0).is_err());
    }

    #[test]
    fn buffer_rejects_overflow() {
        let corpus = tiny_corpus();
        let mut buffer = UtteranceBuffer::new(2);
        let utts = corpus.utts("mild01", Split::Train);
        buffer.record(utts[0].clone(), "a".into()).unwrap();
        buffer.record(utts[1].clone(), "b".into()).unwrap();
        assert!(buffer.record(utts[2].clone(), "c".into()).is_err());
        assert_eq!(buffer.len(), 2);
    }

    #[test]
    fn round_log_uses_recording_time_hypotheses() {
        // The hypotheses in the log must be the ones recorded into the
        // buffer, not whatever the (sentinel-modified) round model says.
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let mut sentinel = init_params(&model_cfg, &mut Rng::new(5)).unwrap();
        let cfg = RoundConfig {
            utterances_per_round: 2,
            epochs_per_round: 1,
            ..RoundConfig::default()
        };
        let mut buffer = UtteranceBuffer::new(2);
        let utts = corpus.utts("mild01", Split::Train);
        buffer.record(utts[0].clone(), "recorded under model a".into()).unwrap();
        buffer.record(utts[1].clone(), "also model a".into()).unwrap();
        let mut opt = OptState::new(&model_cfg).unwrap();
        let log = train_round(&mut sentinel, &mut opt, &mut buffer, &cfg, 7).unwrap();
        assert_eq!(log.round, 7);
        assert_eq!(log.pairs[0].0, "recorded under model a");
        assert_eq!(log.pairs[1].0, "also model a");
        assert_eq!(log.pairs[0].1, utts[0].transcript);
    }

    #[test]
    fn consecutive_consumes_exactly_rounds_times_n() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let seed_model = init_params(&model_cfg, &mut Rng::new(6)).unwrap();
        let cfg = RoundConfig {
            utterances_per_round: 2,
            epochs_per_round: 1,
            ..RoundConfig::default()
        };
        let stream: Vec<Utterance> = corpus
            .utts("mild01", Split::Train)
            .into_iter()
            .cloned()
            .collect();
        let run = consecutive_personalize(&seed_model, stream.into_iter(), 3, &cfg, None).unwrap();
        assert_eq!(run.utterances_consumed, 6);
        assert_eq!(run.logs.len(), 3);
        assert_eq!(run.max_buffer_len, 2);
        assert!(run.buffer_len_between_rounds.iter().all(|&l| l == 0));
        assert_eq!(run.logs[2].round, 2);
    }

    #[test]
    fn consecutive_zero_rounds_returns_seed_model() {
        let model_cfg = tiny_model_config();
        let seed_model = init_params(&model_cfg, &mut Rng::new(7)).unwrap();
        let run = consecutive_personalize(&seed_model, std::iter::empty(), 0, &RoundConfig::default(), None).unwrap();
        assert_eq!(run.model, seed_model);
        assert_eq!(run.utterances_consumed, 0);
        assert!(run.logs.is_empty());
    }

    #[test]
    fn consecutive_errors_when_stream_runs_dry() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let seed_model = init_params(&model_cfg, &mut Rng::new(8)).unwrap();
        let cfg = RoundConfig {
            utterances_per_round: 5,
            epochs_per_round: 1,
            ..RoundConfig::default()
        };
        let stream: Vec<Utterance> = corpus
            .utts("mild01", Split::Train)
            .into_iter()
            .take(7)
            .cloned()
            .collect();
        let err = consecutive_personalize(&seed_model, stream.into_iter(), 2, &cfg, None).unwrap_err();
        match err {
            Error::StreamExhausted { round, needed } => {
                assert_eq!(round, 1);
                assert_eq!(needed, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn consecutive_is_bit_deterministic() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let seed_model = init_params(&model_cfg, &mut Rng::new(9)).unwrap();
        let cfg = RoundConfig {
            utterances_per_round: 2,
            epochs_per_round: 2,
            ..RoundConfig::default()
        };
        let stream: Vec<Utterance> = corpus
            .utts("mod01", Split::Train)
            .into_iter()
            .cloned()
            .collect();
        let a = consecutive_personalize(&seed_model, stream.clone().into_iter(), 3, &cfg, None).unwrap();
        let b = consecutive_personalize(&seed_model, stream.into_iter(), 3, &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
        for (x, y) in a.model.tensors().iter().zip(b.model.tensors()) {
            for (p, q) in x.data.iter().zip(y.data) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        assert_eq!(a.logs, b.logs);
    }

    #[test]
    fn server_personalize_freeze_and_best_checkpoint() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let start = init_params(&model_cfg, &mut Rng::new(10)).unwrap();
        let cfg = ServerConfig {
            batch_size: 8,
            learning_rate: 2e-3,
            max_epochs: 2,
            patience: 5,
            seed: 42,
            ..ServerConfig::default()
        };
        let train = corpus.utts("mild01", Split::Train);
        let dev = corpus.utts("mild01", Split::Dev);
        let frozen_before = params_checksum(&start, &cfg.freeze, false);
        let run = server_personalize(&start, &train, &dev, &cfg).unwrap();

        assert_eq!(params_checksum(&run.model, &cfg.freeze, false), frozen_before);
        assert_eq!(run.dev_wer_trace.len(), run.epochs_run + 1);
        let min = run.dev_wer_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(run.best_dev_wer, min);
        assert!(run.best_dev_wer <= run.dev_wer_trace[0]);
        // Ties go to the earliest epoch.
        let first_min = run.dev_wer_trace.iter().position(|&w| w == min).unwrap();
        assert_eq!(run.best_epoch, first_min);
    }

    #[test]
    fn server_personalize_rejects_empty_sets() {
        let model_cfg = tiny_model_config();
        let start = init_params(&model_cfg, &mut Rng::new(11)).unwrap();
        let cfg = ServerConfig::default();
        assert!(server_personalize(&start, &[], &[], &cfg).is_err());
    }

    #[test]
    fn seed_model_pool_excludes_target() {
        let corpus = tiny_corpus();
        let pool: Vec<&str> = corpus
            .disordered_speakers()
            .iter()
            .map(|s| s.id.as_str())
            .filter(|id| *id != "mild01")
            .collect();
        let pooled = corpus.pooled(&pool, Split::Train);
        assert!(!pooled.is_empty());
        assert!(pooled.iter().all(|u| u.speaker != "mild01"));
        assert!(pooled.iter().all(|u| u.severity != Severity::Typical));

        let model_cfg = tiny_model_config();
        let base = init_params(&model_cfg, &mut Rng::new(12)).unwrap();
        assert!(matches!(
            build_seed_model(&base, &corpus, "nobody", &ServerConfig::default()),
            Err(Error::UnknownSpeaker(_))
        ));
        assert!(matches!(
            build_seed_model(&base, &corpus, "typ01", &ServerConfig::default()),
            Err(Error::UnknownSpeaker(_))
        ));
    }

    #[test]
    fn recipe_file_round_trip() {
        let text = r#"
name = "ondevice"
utterances_per_round = 5
epochs_per_round = 4
rounds = 10
learning_rate = 1e-3
freeze = ["enc2", "enc3", "enc4"]
grad_clip_norm = 5.0
seed = 99
"#;
        let recipe = RecipeConfig::from_toml(text).unwrap();
        assert_eq!(recipe.rounds, 10);
        let round = recipe.round_config().unwrap();
        assert_eq!(round.utterances_per_round, 5);
        assert_eq!(round.epochs_per_round, 4);
        assert_eq!(round.freeze, FreezeMask::ondevice_recipe());
        let server = recipe.server_config().unwrap();
        assert_eq!(server.batch_size, 32);
        assert_eq!(server.learning_rate, 1e-5);
        // An unspecified freeze list falls back to the server recipe there.
        let bare = RecipeConfig::from_toml("name = \"x\"").unwrap();
        assert_eq!(bare.server_config().unwrap().freeze, FreezeMask::server_recipe());
        assert!(RecipeConfig::from_toml("rounds = \"ten\"").is_err());
    }

    #[test]
    fn overfit_single_utterance_round() {
        // Four epochs on one utterance should not increase its loss.
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let mut ok = 0;
        let total = 8;
        for seed in 0..total {
            let mut params = init_params(&model_cfg, &mut Rng::new(100 + seed)).unwrap();
            let cfg = RoundConfig {
                utterances_per_round: 1,
                epochs_per_round: 4,
                learning_rate: 1e-3,
                freeze: FreezeMask::all(&model_cfg),
                ..RoundConfig::default()
            };
            let mut buffer = UtteranceBuffer::new(1);
            let utt = corpus.utts("typ01", Split::Train)[seed as usize].clone();
            buffer.record(utt, "h".into()).unwrap();
            let mut opt = OptState::new(&model_cfg).unwrap();
            let log = train_round(&mut params, &mut opt, &mut buffer, &cfg, 0).unwrap();
            if log.losses[3] <= log.losses[0] {
                ok += 1;
            }
        }
        assert!(ok >= total - 1, "loss decreased in only {ok}/{total} runs");
    }

    #[test]
    fn checksum_helper_distinguishes_mask_sides() {
        let cfg = tiny_model_config();
        let params = init_params(&cfg, &mut Rng::new(13)).unwrap();
        let mask = FreezeMask::ondevice_recipe();
        let a = params_checksum(&params, &mask, false);
        let b = params_checksum(&params, &mask, true);
        assert_ne!(a, b);
        assert_eq!(fnv1a64(b"x"), fnv1a64(b"x"));
    }

    #[test]
    fn pretrain_touches_only_the_encoder_and_reduces_loss() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let mut params = init_params(&model_cfg, &mut Rng::new(31)).unwrap();
        let enc_mask =
            FreezeMask::from_layers((0..model_cfg.encoder_layers).map(LayerId::Encoder));
        let frozen_before = params_checksum(&params, &enc_mask, false);
        let enc_before = params_checksum(&params, &enc_mask, true);

        let train = corpus.utts("typ01", Split::Train);
        let cfg = PretrainConfig {
            epochs: 4,
            stop_loss: 0.0,
            seed: 5,
            ..PretrainConfig::default()
        };
        let losses = pretrain_encoder(&mut params, &train, &cfg).unwrap();
        assert_eq!(losses.len(), 4);
        assert!(
            losses[3] < losses[0],
            "loss did not decrease: {losses:?}"
        );
        assert_eq!(params_checksum(&params, &enc_mask, false), frozen_before);
        assert_ne!(params_checksum(&params, &enc_mask, true), enc_before);
    }

    #[test]
    fn pretrain_is_deterministic_and_zero_epochs_is_a_no_op() {
        let corpus = tiny_corpus();
        let model_cfg = tiny_model_config();
        let train = corpus.utts("typ01", Split::Train);

        let init = init_params(&model_cfg, &mut Rng::new(37)).unwrap();
        let cfg = PretrainConfig { epochs: 2, seed: 9, ..PretrainConfig::default() };
        let mut a = init.clone();
        let la = pretrain_encoder(&mut a, &train, &cfg).unwrap();
        let mut b = init.clone();
        let lb = pretrain_encoder(&mut b, &train, &cfg).unwrap();
        assert_eq!(la.len(), lb.len());
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(ta.data, tb.data, "{}", ta.name);
        }

        let mut c = init.clone();
        let none = pretrain_encoder(&mut c, &train, &PretrainConfig { epochs: 0, ..cfg }).unwrap();
        assert!(none.is_empty());
        for (tc, ti) in c.tensors().iter().zip(init.tensors()) {
            assert_eq!(tc.data, ti.data);
        }
    }
}
