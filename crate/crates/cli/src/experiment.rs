//! The end-to-end experiment driver: corpus, base model, per-speaker seed
//! models, all three personalization recipes, evaluation, and the report
//! bundle.
//!
//! Every stage is seeded from the master seed by name, so a config plus its
//! seed pins every byte of the outputs. Stage failures leave whatever was
//! already written in place and drop a FAILED marker naming the stage.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use persim_core::checkpoints::{load_checkpoint, save_checkpoint, CheckpointMeta};
use persim_core::error::Error;
use persim_core::evaluation::{corpus_wer, correction_cost};
use persim_core::grammar::Grammar;
use persim_core::model::{init_params, ModelConfig, ModelParams};
use persim_core::numerics::{fnv1a64, mix_seed, Rng};
use persim_core::synthcorpus::{build_corpus, Corpus, CorpusConfig, Severity, Split, Utterance};
use persim_core::training::{
    build_seed_model, consecutive_personalize, pretrain_encoder, server_personalize, FreezeMask,
    PretrainConfig, RecipeConfig, ServerRun,
};
use persim_core::transducer::{transcribe, DecodeOptions};

/// A stage failure: which pipeline stage broke, and the underlying error.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Full experiment description; see `default_experiment_toml()` for the
/// shipped defaults. Stage seeds are derived from `seed`, which overrides
/// the corpus section's own seed so one number pins the whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    /// Framewise encoder pretraining on the TYPICAL pool, run before base
    /// transducer training.
    pub pretrain: PretrainConfig,
    /// From-scratch base training on the TYPICAL pool (freeze empty = all
    /// layers trainable).
    pub base: RecipeConfig,
    /// Leave-one-out seed-model builds over the disordered pool.
    pub seed_build: RecipeConfig,
    /// Per-speaker server-side personalization (full data and 50-utterance
    /// subsample).
    pub server: RecipeConfig,
    /// Per-speaker on-device consecutive training.
    pub ondevice: RecipeConfig,
    pub output_dir: PathBuf,
    /// Master seed; every stage RNG is derived from it by name.
    pub seed: u64,
    /// Restrict personalization to these speaker ids (empty = all
    /// disordered speakers).
    pub speakers: Vec<String>,
    /// Also emit a minimal SVG line chart of the per-round WER series.
    pub emit_svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            base: RecipeConfig {
                name: "base".into(),
                server_learning_rate: 3e-3,
                batch_size: 16,
                max_epochs: 30,
                patience: 6,
                dev_eval_max_utts: Some(60),
                ..RecipeConfig::default()
            },
            seed_build: RecipeConfig {
                name: "seed-build".into(),
                server_learning_rate: 1e-3,
                batch_size: 16,
                max_epochs: 4,
                patience: 1,
                dev_eval_max_utts: Some(40),
                max_train_utts: Some(240),
                ..RecipeConfig::default()
            },
            server: RecipeConfig {
                name: "server".into(),
                server_learning_rate: 1e-3,
                batch_size: 16,
                max_epochs: 6,
                patience: 2,
                dev_eval_max_utts: Some(40),
                ..RecipeConfig::default()
            },
            ondevice: RecipeConfig {
                name: "ondevice".into(),
                utterances_per_round: 5,
                epochs_per_round: 4,
                rounds: 10,
                learning_rate: 1e-3,
                ..RecipeConfig::default()
            },
            output_dir: PathBuf::from("out"),
            seed: 42,
            speakers: Vec::new(),
            emit_svg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig, Error> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.corpus.validate()?;
        self.model.validate()?;
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(Error::Config(format!(
                "model feature_dim {} differs from corpus feature_dim {}",
                self.model.feature_dim, self.corpus.feature_dim
            )));
        }
        if self.model.vocab != self.corpus.vocab {
            return Err(Error::Config("model and corpus vocab differ".into()));
        }
        let needed = self.ondevice.rounds * self.ondevice.utterances_per_round;
        if needed > self.corpus.subsample_size {
            return Err(Error::Config(format!(
                "on-device recipe needs {} utterances but the subsample holds {}",
                needed, self.corpus.subsample_size
            )));
        }
        Ok(())
    }

    fn stage_seed(&self, tags: &[&str]) -> u64 {
        let hashed: Vec<u64> = tags.iter().map(|t| fnv1a64(t.as_bytes())).collect();
        mix_seed(self.seed, &hashed)
    }
}

/// The shipped default experiment as a TOML document (written by
/// `persim run --write-default-config`).
pub fn default_experiment_toml() -> String {
    toml::to_string_pretty(&ExperimentConfig::default()).expect("default config serializes")
}

/// Per-speaker measurements, everything the reports need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerOutcome {
    pub speaker: String,
    pub severity: Severity,
    /// Pooled test WER per model.
    pub bm_wer: f64,
    pub sm_wer: f64,
    pub pers_server_all: f64,
    pub pers_server_50: f64,
    pub pers_ondevice: f64,
    /// Test ATSR per model.
    pub bm_atsr: f64,
    pub sm_atsr: f64,
    pub atsr_server_all: f64,
    pub atsr_server_50: f64,
    pub atsr_ondevice: f64,
    /// Test WER after each consecutive round; index 0 is the seed model.
    pub wer_by_round: Vec<f64>,
    /// Pooled WER of the hypotheses the user would have corrected.
    pub consecutive_cost: f64,
    pub single_cost: f64,
    /// Buffer instrumentation from the consecutive run.
    pub utterances_consumed: usize,
    pub max_buffer_len: usize,
    pub buffer_len_between_rounds: Vec<usize>,
    pub seed_best_epoch: usize,
    pub seed_dev_wer: f64,
}

/// Serializes a u64 as a hex string; TOML integers are signed, so digests
/// in the top half of the u64 range would fail to encode as numbers.
mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        u64::from_str_radix(&text, 16).map_err(serde::de::Error::custom)
    }
}

/// Everything a run produces, in memory; `reports` turns it into files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    #[serde(with = "hex_u64")]
    pub seed: u64,
    #[serde(with = "hex_u64")]
    pub corpus_digest: u64,
    #[serde(default)]
    pub pretrain_losses: Vec<f64>,
    pub base_best_epoch: usize,
    pub base_dev_wer: f64,
    pub base_dev_wer_trace: Vec<f64>,
    pub typical_test_wer: f64,
    pub rounds: usize,
    pub outcomes: Vec<SpeakerOutcome>,
}

fn stage<T>(out_dir: &Path, name: &'static str, r: Result<T, Error>) -> Result<T, StageError> {
    match r {
        Ok(v) => Ok(v),
        Err(source) => {
            let marker = out_dir.join("FAILED");
            let body = format!("stage: {name}\nerror: {source}\n");
            let _ = std::fs::write(marker, body);
            Err(StageError { stage: name, source })
        }
    }
}

/// Decodes a test set once and scores it both ways.
fn eval_model(
    params: &ModelParams,
    utts: &[&Utterance],
    grammar: &Grammar,
) -> Result<(f64, f64), Error> {
    let refs: Vec<&str> = utts.iter().map(|u| u.transcript.as_str()).collect();
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        hyps.push(transcribe(params, &u.features, DecodeOptions::default())?);
    }
    let wer = corpus_wer(&refs, &hyps)?.wer;
    let atsr = persim_core::evaluation::atsr(&hyps, &refs, grammar)?;
    Ok((wer, atsr))
}

fn personalize_speaker(
    config: &ExperimentConfig,
    corpus: &Corpus,
    grammar: &Grammar,
    base: &ModelParams,
    speaker: &str,
    ckpt_root: &Path,
) -> Result<SpeakerOutcome, Error> {
    let severity = corpus.speaker(speaker)?.severity;
    let test = corpus.utts(speaker, Split::Test);
    let dev = corpus.utts(speaker, Split::Dev);
    let train = corpus.utts(speaker, Split::Train);
    let subsample = corpus.subsample(speaker)?;
    if test.is_empty() || dev.is_empty() || train.is_empty() {
        return Err(Error::Data(format!("speaker {speaker} has an empty split")));
    }
    let speaker_dir = ckpt_root.join(speaker);
    std::fs::create_dir_all(&speaker_dir)?;

    // Leave-one-out seed model over the other disordered speakers.
    let mut seed_cfg = config.seed_build.server_config()?;
    seed_cfg.seed = config.stage_seed(&["seed-build", speaker]);
    let seed_run = build_seed_model(base, corpus, speaker, &seed_cfg)?;
    save_checkpoint(
        &speaker_dir.join("seed.ckpt"),
        &seed_run.model,
        None,
        &CheckpointMeta {
            recipe: "seed-build".into(),
            round: None,
        },
    )?;

    // Server recipe on the full training split.
    let mut all_cfg = config.server.server_config()?;
    all_cfg.seed = config.stage_seed(&["server-all", speaker]);
    let all_run = server_personalize(&seed_run.model, &train, &dev, &all_cfg)?;
    save_checkpoint(
        &speaker_dir.join("server-all.ckpt"),
        &all_run.model,
        None,
        &CheckpointMeta {
            recipe: "server-all".into(),
            round: None,
        },
    )?;

    // Server recipe restricted to the 50-utterance subsample.
    let mut sub_cfg = config.server.server_config()?;
    sub_cfg.seed = config.stage_seed(&["server-50", speaker]);
    let sub_run = server_personalize(&seed_run.model, &subsample, &dev, &sub_cfg)?;
    save_checkpoint(
        &speaker_dir.join("server-50.ckpt"),
        &sub_run.model,
        None,
        &CheckpointMeta {
            recipe: "server-50".into(),
            round: None,
        },
    )?;

    // On-device consecutive training over the same subsample, streamed in
    // recording order.
    let round_cfg = config.ondevice.round_config()?;
    let stream = subsample.iter().map(|u| (*u).clone());
    let run = consecutive_personalize(
        &seed_run.model,
        stream,
        config.ondevice.rounds,
        &round_cfg,
        Some(&speaker_dir),
    )?;

    // What the user would have corrected: consecutive hypotheses come from
    // the round logs; single-shot training would have recorded all
    // utterances under the seed model.
    let consumed = &subsample[..run.utterances_consumed];
    let single_refs: Vec<&str> = consumed.iter().map(|u| u.transcript.as_str()).collect();
    let mut single_hyps = Vec::with_capacity(consumed.len());
    for u in consumed {
        single_hyps.push(transcribe(&seed_run.model, &u.features, DecodeOptions::default())?);
    }
    let single_cost = corpus_wer(&single_refs, &single_hyps)?.wer;
    let consecutive_cost = correction_cost(&run.logs)?.wer;

    // Score all five models on the held-out test split.
    let (bm_wer, bm_atsr) = eval_model(base, &test, grammar)?;
    let (sm_wer, sm_atsr) = eval_model(&seed_run.model, &test, grammar)?;
    let (all_wer, all_atsr) = eval_model(&all_run.model, &test, grammar)?;
    let (sub_wer, sub_atsr) = eval_model(&sub_run.model, &test, grammar)?;
    let (od_wer, od_atsr) = eval_model(&run.model, &test, grammar)?;

    // Per-round WER series from the saved round checkpoints.
    let mut wer_by_round = Vec::with_capacity(config.ondevice.rounds + 1);
    wer_by_round.push(sm_wer);
    for log in &run.logs {
        let (model, _, _) = load_checkpoint(Path::new(&log.checkpoint))?;
        let (w, _) = eval_model(&model, &test, grammar)?;
        wer_by_round.push(w);
    }

    Ok(SpeakerOutcome {
        speaker: speaker.to_string(),
        severity,
        bm_wer,
        sm_wer,
        pers_server_all: all_wer,
        pers_server_50: sub_wer,
        pers_ondevice: od_wer,
        bm_atsr,
        sm_atsr,
        atsr_server_all: all_atsr,
        atsr_server_50: sub_atsr,
        atsr_ondevice: od_atsr,
        wer_by_round,
        consecutive_cost,
        single_cost,
        utterances_consumed: run.utterances_consumed,
        max_buffer_len: run.max_buffer_len,
        buffer_len_between_rounds: run.buffer_len_between_rounds,
        seed_best_epoch: seed_run.best_epoch,
        seed_dev_wer: seed_run.best_dev_wer,
    })
}

/// Trains the speaker-independent base model on the TYPICAL pool:
/// framewise encoder pretraining, then transducer training with dev-WER
/// early stopping. Returns the transducer run and the pretraining loss
/// trace.
pub fn train_base_model(
    config: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<(ServerRun, Vec<f64>), Error> {
    let typical: Vec<&str> = corpus
        .typical_speakers()
        .iter()
        .map(|s| s.id.as_str())
        .collect();
    if typical.is_empty() {
        return Err(Error::Data("corpus has no TYPICAL speakers".into()));
    }
    let train = corpus.pooled(&typical, Split::Train);
    let dev = corpus.pooled(&typical, Split::Dev);
    let mut init = init_params(
        &config.model,
        &mut Rng::new(config.stage_seed(&["base", "init"])),
    )?;
    let mut pre_cfg = config.pretrain.clone();
    pre_cfg.seed = config.stage_seed(&["base", "pretrain"]);
    let pretrain_losses = pretrain_encoder(&mut init, &train, &pre_cfg)?;
    let mut base_cfg = config.base.server_config()?;
    if config.base.freeze.is_empty() {
        base_cfg.freeze = FreezeMask::all(&config.model);
    }
    base_cfg.seed = config.stage_seed(&["base", "train"]);
    let run = server_personalize(&init, &train, &dev, &base_cfg)?;
    Ok((run, pretrain_losses))
}

/// Builds the corpus for a config, with the corpus seed derived from the
/// master seed.
pub fn build_experiment_corpus(config: &ExperimentConfig, grammar: &Grammar) -> Result<Corpus, Error> {
    let mut corpus_cfg = config.corpus.clone();
    corpus_cfg.seed = config.stage_seed(&["corpus"]);
    build_corpus(&corpus_cfg, grammar)
}

/// Runs the whole experiment and writes the report bundle into
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, StageError> {
    let out = config.output_dir.clone();
    stage(&out, "setup", (|| {
        config.validate()?;
        std::fs::create_dir_all(&out)?;
        // A fresh run clears a stale failure marker.
        let marker = out.join("FAILED");
        if marker.exists() {
            std::fs::remove_file(&marker)?;
        }
        Ok(())
    })())?;

    let grammar = Grammar::default_ha();

    let corpus = stage(&out, "corpus", (|| {
        let corpus = build_experiment_corpus(config, &grammar)?;
        std::fs::write(out.join("manifest.tsv"), corpus.manifest_tsv())?;
        Ok(corpus)
    })())?;

    let ckpt_root = out.join("checkpoints");
    let (base_run, pretrain_losses) = stage(&out, "train-base", (|| {
        std::fs::create_dir_all(&ckpt_root)?;
        let run = train_base_model(config, &corpus)?;
        save_checkpoint(
            &ckpt_root.join("base.ckpt"),
            &run.0.model,
            None,
            &CheckpointMeta {
                recipe: "base".into(),
                round: None,
            },
        )?;
        Ok(run)
    })())?;

    let typical_test_wer = stage(&out, "eval-base", (|| {
        let typical: Vec<&str> = corpus
            .typical_speakers()
            .iter()
            .map(|s| s.id.as_str())
            .collect();
        let test = corpus.pooled(&typical, Split::Test);
        let (wer, _) = eval_model(&base_run.model, &test, &grammar)?;
        Ok(wer)
    })())?;

    let speakers: Vec<String> = if config.speakers.is_empty() {
        corpus
            .disordered_speakers()
            .iter()
            .map(|s| s.id.clone())
            .collect()
    } else {
        config.speakers.clone()
    };

    let outcomes = stage(&out, "personalize", {
        let results: Vec<Result<SpeakerOutcome, Error>> = speakers
            .par_iter()
            .map(|id| personalize_speaker(config, &corpus, &grammar, &base_run.model, id, &ckpt_root))
            .collect();
        results.into_iter().collect::<Result<Vec<_>, Error>>()
    })?;

    let result = ExperimentResult {
        seed: config.seed,
        corpus_digest: corpus.digest(),
        pretrain_losses,
        base_best_epoch: base_run.best_epoch,
        base_dev_wer: base_run.best_dev_wer,
        base_dev_wer_trace: base_run.dev_wer_trace.clone(),
        typical_test_wer,
        rounds: config.ondevice.rounds,
        outcomes,
    };

    stage(&out, "report", crate::reports::emit_all(&result, &out, config.emit_svg))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let reparsed = ExperimentConfig::from_toml(&default_experiment_toml()).unwrap();
        assert_eq!(reparsed.seed, cfg.seed);
        assert_eq!(reparsed.ondevice.rounds, cfg.ondevice.rounds);
        assert_eq!(reparsed.base.server_learning_rate, cfg.base.server_learning_rate);
        assert_eq!(reparsed.corpus.utterances_per_speaker, cfg.corpus.utterances_per_speaker);
    }

    #[test]
    fn validate_rejects_inconsistent_sections() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.feature_dim += 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.corpus.vocab = "abc ".into();
        assert!(cfg.validate().is_err());

        // 11 rounds of 5 would need 55 utterances from a 50-utterance buffer.
        let mut cfg = ExperimentConfig::default();
        cfg.ondevice.rounds = 11;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_toml_fills_in_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[ondevice]\nrounds = 4\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ondevice.rounds, 4);
        assert_eq!(cfg.ondevice.utterances_per_round, 5);
        assert_eq!(cfg.corpus.n_typical, CorpusConfig::default().n_typical);
    }

    #[test]
    fn stage_seeds_differ_by_tag_but_not_by_call() {
        let cfg = ExperimentConfig::default();
        let a = cfg.stage_seed(&["base", "train"]);
        assert_eq!(a, cfg.stage_seed(&["base", "train"]));
        assert_ne!(a, cfg.stage_seed(&["base", "init"]));
        assert_ne!(a, cfg.stage_seed(&["server-all", "spk"]));
        let mut other = ExperimentConfig::default();
        other.seed += 1;
        assert_ne!(a, other.stage_seed(&["base", "train"]));
    }
}
