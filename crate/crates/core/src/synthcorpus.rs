//! Deterministic synthetic stand-in for a disordered-speech corpus.
//!
//! There is no audio anywhere: each transcript character maps to a fixed
//! d-dimensional prototype vector held for a few frames, and a "speaker" is a
//! reproducible distortion of that canonical signal — a fixed channel-mixing
//! matrix, a tempo warp, frame noise, and a probability of swapping a
//! character's prototype for the wrong one. Severity strata only widen those
//! distortion ranges. Everything is derived from seeds, so a corpus is fully
//! described by its manifest and can be regenerated bit-identically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{Grammar, Intent};
use crate::model::FeatureSequence;
use crate::numerics::{fnv1a64, mix_seed, Matrix, Rng};

/// Disorder severity stratum; TYPICAL marks control speakers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Typical,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const DISORDERED: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn is_disordered(self) -> bool {
        self != Severity::Typical
    }

    fn prefix(self) -> &'static str {
        match self {
            Severity::Typical => "typ",
            Severity::Mild => "mild",
            Severity::Moderate => "mod",
            Severity::Severe => "sev",
        }
    }
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Severity::Typical => "TYPICAL",
            Severity::Mild => "MILD",
            Severity::Moderate => "MODERATE",
            Severity::Severe => "SEVERE",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "typical" => Ok(Severity::Typical),
            "mild" => Ok(Severity::Mild),
            "moderate" => Ok(Severity::Moderate),
            "severe" => Ok(Severity::Severe),
            _ => Err(Error::Data(format!("unknown severity {:?}", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split {:?}", s))),
        }
    }
}

/// Per-severity distortion constants. Warp is sampled per speaker from the
/// range; sigma and the perturbation probability are fixed per stratum; the
/// channel strength scales a random mixing component added to the identity.
/// All four are artifact constants chosen so that base-model WER orders
/// MILD < MODERATE < SEVERE.
#[derive(Debug, Clone, Copy)]
pub struct DistortionRanges {
    pub warp: (f64, f64),
    pub noise_sigma: f64,
    pub symbol_perturb_prob: f64,
    pub channel_strength: f64,
}

impl DistortionRanges {
    pub fn for_severity(severity: Severity) -> DistortionRanges {
        match severity {
            Severity::Typical => DistortionRanges {
                warp: (1.0, 1.0),
                noise_sigma: 0.01,
                symbol_perturb_prob: 0.0,
                channel_strength: 0.0,
            },
            Severity::Mild => DistortionRanges {
                warp: (0.9, 1.1),
                noise_sigma: 0.03,
                symbol_perturb_prob: 0.005,
                channel_strength: 0.35,
            },
            Severity::Moderate => DistortionRanges {
                warp: (0.8, 1.3),
                noise_sigma: 0.08,
                symbol_perturb_prob: 0.02,
                channel_strength: 0.70,
            },
            Severity::Severe => DistortionRanges {
                warp: (0.6, 1.5),
                noise_sigma: 0.15,
                symbol_perturb_prob: 0.04,
                channel_strength: 1.10,
            },
        }
    }
}

/// A reproducible synthetic speaker: identity plus fixed distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub severity: Severity,
    pub seed: u64,
    /// d x d channel-mixing matrix applied to every frame.
    pub channel: Matrix,
    pub tempo_warp: f64,
    pub noise_sigma: f64,
    pub symbol_perturb_prob: f64,
}

/// Draws a speaker's distortion parameters from the severity's ranges.
/// TYPICAL speakers get the identity channel and warp 1.0.
pub fn make_speaker(severity: Severity, seed: u64, feature_dim: usize) -> SpeakerProfile {
    let ranges = DistortionRanges::for_severity(severity);
    let mut rng = Rng::new(mix_seed(seed, &[fnv1a64(b"speaker-profile")]));
    let tempo_warp = rng.uniform(ranges.warp.0, ranges.warp.1);
    let mut channel = Matrix::identity(feature_dim);
    if ranges.channel_strength > 0.0 {
        let scale = ranges.channel_strength / (feature_dim as f64).sqrt();
        for v in channel.data_mut().iter_mut() {
            *v += scale * rng.normal();
        }
    }
    SpeakerProfile {
        id: format!("{}-{:04x}", severity.prefix(), seed & 0xffff),
        severity,
        seed,
        channel,
        tempo_warp,
        noise_sigma: ranges.noise_sigma,
        symbol_perturb_prob: ranges.symbol_perturb_prob,
    }
}

/// Frames per character at warp 1.0.
pub const BASE_FRAMES_PER_CHAR: f64 = 3.0;

/// Canonical per-character prototype vectors, fixed for a (vocab, dim) pair
/// independent of any corpus seed.
#[derive(Debug, Clone)]
pub struct Prototypes {
    vocab: String,
    vectors: Matrix,
}

impl Prototypes {
    pub fn new(vocab: &str, feature_dim: usize) -> Prototypes {
        let v = vocab.chars().count();
        let mut rng = Rng::new(mix_seed(0x70726f746f, &[fnv1a64(vocab.as_bytes()), feature_dim as u64]));
        let data: Vec<f64> = (0..v * feature_dim).map(|_| rng.normal()).collect();
        Prototypes {
            vocab: vocab.to_string(),
            vectors: Matrix::from_vec(v, feature_dim, data).expect("shape by construction"),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    fn index_of(&self, c: char) -> Option<usize> {
        self.vocab.chars().position(|v| v == c)
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        self.vectors.row(idx)
    }

    pub fn vocab_len(&self) -> usize {
        self.vectors.rows()
    }
}

/// Renders a transcript into frames under a speaker's distortion.
///
/// Each character's (possibly perturbed) prototype is channel-mixed once and
/// held for k = max(1, round(3 * warp)) frames with fresh Gaussian noise per
/// frame. Deterministic given (transcript, profile, seed).
pub fn synthesize_features(
    transcript: &str,
    profile: &SpeakerProfile,
    protos: &Prototypes,
    utt_seed: u64,
) -> Result<FeatureSequence> {
    if transcript.is_empty() {
        return Err(Error::EmptyInput("synthesize_features"));
    }
    let d = protos.dim();
    if profile.channel.rows() != d || profile.channel.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "synthesize_features",
            expected: format!("{d}x{d} channel"),
            got: format!("{}x{}", profile.channel.rows(), profile.channel.cols()),
        });
    }
    let mut rng = Rng::new(mix_seed(utt_seed, &[fnv1a64(b"features")]));
    let k = (BASE_FRAMES_PER_CHAR * profile.tempo_warp).round().max(1.0) as usize;
    let chars: Vec<char> = transcript.chars().collect();
    let mut frames = Matrix::zeros(chars.len() * k, d);
    let mut t = 0;
    for &c in &chars {
        let mut idx = protos.index_of(c).ok_or(Error::OutOfVocab(c))?;
        let coin = rng.next_f64();
        if coin < profile.symbol_perturb_prob && protos.vocab_len() > 1 {
            // Swap in a different character's prototype: an unrecoverable
            // articulation error, not additive noise.
            let offset = 1 + rng.next_usize(protos.vocab_len() - 1);
            idx = (idx + offset) % protos.vocab_len();
        }
        let mixed = profile.channel.matvec(protos.vector(idx))?;
        for _ in 0..k {
            let row = frames.row_mut(t);
            for (r, m) in row.iter_mut().zip(&mixed) {
                *r = m + profile.noise_sigma * rng.normal();
            }
            t += 1;
        }
    }
    Ok(FeatureSequence {
        frames,
        frame_period_ms: 10.0,
    })
}

/// Recovers the frame-level character alignment of a synthesized utterance
/// from lengths alone: every character is held for the same number of
/// frames, so frame t belongs to character t / (n_frames / n_chars). The
/// alignment is to the intended transcript; symbol perturbations are
/// invisible to it (TYPICAL speakers never perturb, so their alignment is
/// exact).
pub fn frame_alignment(transcript: &str, n_frames: usize) -> Result<Vec<char>> {
    let chars: Vec<char> = transcript.chars().collect();
    if chars.is_empty() {
        return Err(Error::EmptyInput("frame_alignment"));
    }
    if n_frames == 0 || n_frames % chars.len() != 0 {
        return Err(Error::Data(format!(
            "{} frames cannot align evenly to {} characters",
            n_frames,
            chars.len()
        )));
    }
    let k = n_frames / chars.len();
    Ok((0..n_frames).map(|t| chars[t / k]).collect())
}

/// One synthetic recording with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub severity: Severity,
    pub transcript: String,
    pub intent: Intent,
    pub features: FeatureSequence,
    pub split: Split,
    pub domain: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_typical: usize,
    pub n_mild: usize,
    pub n_moderate: usize,
    pub n_severe: usize,
    pub utterances_per_speaker: usize,
    pub subsample_size: usize,
    pub feature_dim: usize,
    pub vocab: String,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_typical: 8,
            n_mild: 4,
            n_moderate: 4,
            n_severe: 4,
            utterances_per_speaker: 200,
            subsample_size: 50,
            feature_dim: 16,
            vocab: "abcdefghijklmnopqrstuvwxyz ".to_string(),
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_typical == 0 || self.n_mild == 0 || self.n_moderate == 0 || self.n_severe == 0 {
            return Err(Error::Config("every severity needs at least one speaker".into()));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::Config("utterances_per_speaker must be >= 1".into()));
        }
        if self.subsample_size == 0 {
            return Err(Error::Config("subsample_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// The generated corpus: speakers, utterances, splits, and the per-speaker
/// personalization subsample.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
    /// Disordered speaker id -> indices into `utterances` (HA train subset).
    pub subsamples: BTreeMap<String, Vec<usize>>,
}

fn split_of(index: usize, total: usize) -> Split {
    // Fixed 80/10/10 by index; utterances are i.i.d. by construction.
    let train_end = (total * 8) / 10;
    let dev_end = (total * 9) / 10;
    if index < train_end {
        Split::Train
    } else if index < dev_end {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Generates the full corpus from one seed.
pub fn build_corpus(config: &CorpusConfig, grammar: &Grammar) -> Result<Corpus> {
    config.validate()?;
    let protos = Prototypes::new(&config.vocab, config.feature_dim);
    let mut speakers = Vec::new();
    let plan: [(Severity, usize); 4] = [
        (Severity::Typical, config.n_typical),
        (Severity::Mild, config.n_mild),
        (Severity::Moderate, config.n_moderate),
        (Severity::Severe, config.n_severe),
    ];
    for (severity, count) in plan {
        for i in 0..count {
            let seed = mix_seed(config.seed, &[fnv1a64(b"speaker"), fnv1a64(severity.prefix().as_bytes()), i as u64]);
            let mut profile = make_speaker(severity, seed, config.feature_dim);
            profile.id = format!("{}{:02}", severity.prefix(), i + 1);
            speakers.push(profile);
        }
    }

    let mut utterances = Vec::new();
    for profile in &speakers {
        let n = config.utterances_per_speaker;
        for i in 0..n {
            let utt_seed = mix_seed(config.seed, &[fnv1a64(b"utterance"), fnv1a64(profile.id.as_bytes()), i as u64]);
            let mut phrase_rng = Rng::new(mix_seed(utt_seed, &[fnv1a64(b"phrase")]));
            let (transcript, intent) = grammar.sample(&mut phrase_rng);
            let features = synthesize_features(&transcript, profile, &protos, utt_seed)?;
            utterances.push(Utterance {
                speaker: profile.id.clone(),
                severity: profile.severity,
                transcript,
                intent,
                features,
                split: split_of(i, n),
                domain: "HA".to_string(),
                seed: utt_seed,
            });
        }
    }

    let subsamples = draw_subsamples(config, &speakers, &utterances);
    Ok(Corpus {
        config: config.clone(),
        speakers,
        utterances,
        subsamples,
    })
}

fn draw_subsamples(
    config: &CorpusConfig,
    speakers: &[SpeakerProfile],
    utterances: &[Utterance],
) -> BTreeMap<String, Vec<usize>> {
    let mut subsamples = BTreeMap::new();
    for profile in speakers {
        if !profile.severity.is_disordered() {
            continue;
        }
        let mut candidates: Vec<usize> = utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker == profile.id && u.split == Split::Train && u.domain == "HA")
            .map(|(i, _)| i)
            .collect();
        let mut rng = Rng::new(mix_seed(
            config.seed,
            &[fnv1a64(b"subsample"), fnv1a64(profile.id.as_bytes())],
        ));
        rng.shuffle(&mut candidates);
        candidates.truncate(config.subsample_size);
        candidates.sort_unstable();
        subsamples.insert(profile.id.clone(), candidates);
    }
    subsamples
}

impl Corpus {
    pub fn speaker(&self, id: &str) -> Result<&SpeakerProfile> {
        self.speakers
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }

    pub fn disordered_speakers(&self) -> Vec<&SpeakerProfile> {
        self.speakers.iter().filter(|s| s.severity.is_disordered()).collect()
    }

    pub fn typical_speakers(&self) -> Vec<&SpeakerProfile> {
        self.speakers.iter().filter(|s| !s.severity.is_disordered()).collect()
    }

    /// All utterances of one speaker in one split.
    pub fn utts(&self, speaker: &str, split: Split) -> Vec<&Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.speaker == speaker && u.split == split)
            .collect()
    }

    /// Pooled split across a set of speakers, in corpus order.
    pub fn pooled<'a>(&'a self, speakers: &[&str], split: Split) -> Vec<&'a Utterance> {
        self.utterances
            .iter()
            .filter(|u| u.split == split && speakers.contains(&u.speaker.as_str()))
            .collect()
    }

    /// The speaker's personalization subsample (disordered speakers only).
    pub fn subsample(&self, speaker: &str) -> Result<Vec<&Utterance>> {
        let idxs = self
            .subsamples
            .get(speaker)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))?;
        Ok(idxs.iter().map(|&i| &self.utterances[i]).collect())
    }

    /// Canonical manifest: one C record, then S records, then U records with
    /// tab-separated fields. Features are not stored; they regenerate from
    /// the utterance seeds.
    pub fn manifest_tsv(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        out.push_str(&format!(
            "C\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            c.seed,
            c.n_typical,
            c.n_mild,
            c.n_moderate,
            c.n_severe,
            c.utterances_per_speaker,
            c.subsample_size,
            c.feature_dim,
            c.vocab
        ));
        for s in &self.speakers {
            out.push_str(&format!(
                "S\t{}\t{}\t{}\n",
                s.id,
                s.severity.to_string().to_ascii_lowercase(),
                s.seed
            ));
        }
        for u in &self.utterances {
            out.push_str(&format!(
                "U\t{}\t{}\t{}\t{}\t{}\t{}\n",
                u.speaker,
                u.split,
                u.domain,
                u.seed,
                u.severity.to_string().to_ascii_lowercase(),
                u.transcript
            ));
        }
        out
    }

    /// FNV-1a of the canonical manifest; stable across runs and platforms.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.manifest_tsv().as_bytes())
    }

    /// Rebuilds a corpus (including features) from its manifest.
    pub fn from_manifest_tsv(text: &str, grammar: &Grammar) -> Result<Corpus> {
        let mut lines = text.lines();
        let head = lines.next().ok_or(Error::Data("empty manifest".into()))?;
        let hf: Vec<&str> = head.split('\t').collect();
        if hf.len() != 10 || hf[0] != "C" {
            return Err(Error::Data("manifest must open with a C record".into()));
        }
        let parse_num = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Data(format!("bad number {:?} in manifest", s)))
        };
        let config = CorpusConfig {
            seed: parse_num(hf[1])?,
            n_typical: parse_num(hf[2])? as usize,
            n_mild: parse_num(hf[3])? as usize,
            n_moderate: parse_num(hf[4])? as usize,
            n_severe: parse_num(hf[5])? as usize,
            utterances_per_speaker: parse_num(hf[6])? as usize,
            subsample_size: parse_num(hf[7])? as usize,
            feature_dim: parse_num(hf[8])? as usize,
            vocab: hf[9].to_string(),
        };
        let protos = Prototypes::new(&config.vocab, config.feature_dim);

        let mut speakers: Vec<SpeakerProfile> = Vec::new();
        let mut utterances: Vec<Utterance> = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            match f[0] {
                "S" if f.len() == 4 => {
                    let severity: Severity = f[2].parse()?;
                    let mut profile = make_speaker(severity, parse_num(f[3])?, config.feature_dim);
                    profile.id = f[1].to_string();
                    speakers.push(profile);
                }
                "U" if f.len() == 7 => {
                    let speaker_id = f[1];
                    let profile = speakers
                        .iter()
                        .find(|s| s.id == speaker_id)
                        .ok_or_else(|| Error::UnknownSpeaker(speaker_id.to_string()))?;
                    let transcript = f[6].to_string();
                    let intent = grammar
                        .parse_intent(&transcript)
                        .ok_or_else(|| Error::Data(format!("manifest transcript does not parse: {transcript:?}")))?;
                    let seed = parse_num(f[4])?;
                    let features = synthesize_features(&transcript, profile, &protos, seed)?;
                    utterances.push(Utterance {
                        speaker: profile.id.clone(),
                        severity: f[5].parse()?,
                        transcript,
                        intent,
                        features,
                        split: f[2].parse()?,
                        domain: f[3].to_string(),
                        seed,
                    });
                }
                other => {
                    return Err(Error::Data(format!("bad manifest record {:?}", other)));
                }
            }
        }
        let subsamples = draw_subsamples(&config, &speakers, &utterances);
        Ok(Corpus {
            config,
            speakers,
            utterances,
            subsamples,
        })
    }
}
