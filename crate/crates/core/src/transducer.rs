//! Transducer alignment lattice, loss, analytic gradient, and greedy search.
//!
//! The lattice holds normalized log-probabilities over V+1 outputs for every
//! (frame t, label-prefix u) node. A complete alignment walks from (0, 0) to
//! (T-1, U) taking blank moves (t advances) and label moves (u advances), and
//! finishes with one final blank at (T-1, U); the loss is the negative log of
//! the total probability over all such paths, computed by a log-space forward
//! recursion. The gradient is exact, via the forward/backward posteriors, and
//! is taken with respect to the lattice log-probabilities themselves: the
//! softmax Jacobian is applied later, in the joint-network backward pass.

use crate::error::{Error, Result};
use crate::model::{self, FeatureSequence, ModelParams, BLANK};
use crate::numerics::{logadd, Matrix};

/// Log-probability table of shape T x (U+1) x (V+1).
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    frames: usize,
    prefix_len: usize,
    num_outputs: usize,
    logprobs: Vec<f64>,
}

impl Lattice {
    /// An all-zero table (not normalized; callers fill it in).
    pub fn new(frames: usize, prefix_len: usize, num_outputs: usize) -> Result<Self> {
        if frames == 0 || prefix_len == 0 || num_outputs < 2 {
            return Err(Error::Config(format!(
                "degenerate lattice {}x{}x{}",
                frames, prefix_len, num_outputs
            )));
        }
        Ok(Lattice {
            frames,
            prefix_len,
            num_outputs,
            logprobs: vec![0.0; frames * prefix_len * num_outputs],
        })
    }

    /// Fills the table node by node from a closure returning V+1 log-probs.
    pub fn from_fn<F>(frames: usize, prefix_len: usize, num_outputs: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<Vec<f64>>,
    {
        let mut lat = Lattice::new(frames, prefix_len, num_outputs)?;
        for t in 0..frames {
            for u in 0..prefix_len {
                let row = f(t, u)?;
                if row.len() != num_outputs {
                    return Err(Error::ShapeMismatch {
                        op: "lattice_from_fn",
                        expected: format!("{} outputs", num_outputs),
                        got: format!("{}", row.len()),
                    });
                }
                lat.at_mut(t, u).copy_from_slice(&row);
            }
        }
        Ok(lat)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// U + 1: number of label-prefix states.
    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    #[inline]
    fn base(&self, t: usize, u: usize) -> usize {
        (t * self.prefix_len + u) * self.num_outputs
    }

    /// The V+1 log-probabilities at node (t, u).
    #[inline]
    pub fn at(&self, t: usize, u: usize) -> &[f64] {
        let b = self.base(t, u);
        &self.logprobs[b..b + self.num_outputs]
    }

    #[inline]
    pub fn at_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let b = self.base(t, u);
        &mut self.logprobs[b..b + self.num_outputs]
    }

    #[inline]
    pub fn logprob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.logprobs[self.base(t, u) + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.logprobs
    }

    /// True when every node's probabilities sum to 1 within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        (0..self.frames).all(|t| {
            (0..self.prefix_len).all(|u| {
                let s: f64 = self.at(t, u).iter().map(|lp| lp.exp()).sum();
                (s - 1.0).abs() <= tol
            })
        })
    }
}

/// Gradient of the loss with respect to every lattice entry; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrad {
    pub frames: usize,
    pub prefix_len: usize,
    pub num_outputs: usize,
    pub values: Vec<f64>,
}

impl LatticeGrad {
    #[inline]
    pub fn at(&self, t: usize, u: usize) -> &[f64] {
        let b = (t * self.prefix_len + u) * self.num_outputs;
        &self.values[b..b + self.num_outputs]
    }
}

fn check_labels(lat: &Lattice, labels: &[usize]) -> Result<()> {
    if labels.len() + 1 != lat.prefix_len {
        return Err(Error::ShapeMismatch {
            op: "rnnt_labels",
            expected: format!("{} labels", lat.prefix_len - 1),
            got: format!("{}", labels.len()),
        });
    }
    for &y in labels {
        if y == BLANK || y >= lat.num_outputs {
            return Err(Error::TokenOutOfRange(y, lat.num_outputs - 1));
        }
    }
    Ok(())
}

/// Forward variables: alpha[t][u] = log-probability of consuming frames 0..t
/// and emitting the first u labels, ending at node (t, u).
fn forward(lat: &Lattice, labels: &[usize]) -> Matrix {
    let (t_len, u_len) = (lat.frames, lat.prefix_len);
    let mut alpha = Matrix::zeros(t_len, u_len);
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha.get(t - 1, u) + lat.logprob(t - 1, u, BLANK)
            } else {
                f64::NEG_INFINITY
            };
            let from_label = if u > 0 {
                alpha.get(t, u - 1) + lat.logprob(t, u - 1, labels[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha.set(t, u, logadd(from_blank, from_label));
        }
    }
    alpha
}

/// Backward variables: beta[t][u] = log-probability of completing an
/// alignment starting from node (t, u).
fn backward(lat: &Lattice, labels: &[usize]) -> Matrix {
    let (t_len, u_len) = (lat.frames, lat.prefix_len);
    let mut beta = Matrix::zeros(t_len, u_len);
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            let val = if t == t_len - 1 && u == u_len - 1 {
                lat.logprob(t, u, BLANK)
            } else {
                let via_blank = if t + 1 < t_len {
                    lat.logprob(t, u, BLANK) + beta.get(t + 1, u)
                } else {
                    f64::NEG_INFINITY
                };
                let via_label = if u + 1 < u_len {
                    lat.logprob(t, u, labels[u]) + beta.get(t, u + 1)
                } else {
                    f64::NEG_INFINITY
                };
                logadd(via_blank, via_label)
            };
            beta.set(t, u, val);
        }
    }
    beta
}

/// Negative log-probability of the reference labels under the lattice.
pub fn rnnt_loss(lat: &Lattice, labels: &[usize]) -> Result<f64> {
    check_labels(lat, labels)?;
    let alpha = forward(lat, labels);
    let (t_last, u_last) = (lat.frames - 1, lat.prefix_len - 1);
    let loss = -(alpha.get(t_last, u_last) + lat.logprob(t_last, u_last, BLANK));
    if !loss.is_finite() {
        return Err(Error::NonFinite("rnnt_loss"));
    }
    Ok(loss)
}

/// Loss plus its exact gradient with respect to the lattice log-probabilities.
///
/// Only the blank entry and the next-label entry of each node can carry
/// gradient; each is the negated posterior probability that an alignment
/// path takes that transition.
pub fn rnnt_grad(lat: &Lattice, labels: &[usize]) -> Result<(f64, LatticeGrad)> {
    check_labels(lat, labels)?;
    let alpha = forward(lat, labels);
    let beta = backward(lat, labels);
    let (t_len, u_len) = (lat.frames, lat.prefix_len);
    let log_z = beta.get(0, 0);
    let loss = -log_z;
    if !loss.is_finite() {
        return Err(Error::NonFinite("rnnt_grad"));
    }

    let mut grad = LatticeGrad {
        frames: t_len,
        prefix_len: u_len,
        num_outputs: lat.num_outputs,
        values: vec![0.0; lat.logprobs.len()],
    };
    for t in 0..t_len {
        #[allow(clippy::needless_range_loop)] // u sweeps lattice nodes, not labels
        for u in 0..u_len {
            let base = (t * u_len + u) * lat.num_outputs;
            let a = alpha.get(t, u);
            let beta_after_blank = if t == t_len - 1 && u == u_len - 1 {
                0.0
            } else if t + 1 < t_len {
                beta.get(t + 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let g_blank = a + lat.logprob(t, u, BLANK) + beta_after_blank - log_z;
            if g_blank.is_finite() {
                grad.values[base + BLANK] = -g_blank.exp();
            }
            if u + 1 < u_len {
                let y = labels[u];
                let g_y = a + lat.logprob(t, u, y) + beta.get(t, u + 1) - log_z;
                if g_y.is_finite() {
                    grad.values[base + y] += -g_y.exp();
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Greedy-search settings. The per-frame symbol cap keeps decoding from
/// looping on a degenerate model.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub max_symbols_per_frame: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_symbols_per_frame: 3,
        }
    }
}

/// Index of the maximum entry; ties resolve to the lowest index, so an exact
/// tie with blank emits blank.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode over already-encoded frames. At each frame the most likely
/// output is taken repeatedly: a label is appended and advances the
/// prediction network, blank (or the symbol cap) moves to the next frame.
pub fn greedy_decode_encoded(
    params: &ModelParams,
    enc: &Matrix,
    opts: DecodeOptions,
) -> Result<Vec<usize>> {
    if opts.max_symbols_per_frame == 0 {
        return Err(Error::Config("max_symbols_per_frame must be >= 1".into()));
    }
    let mut pred = params.predictor_start()?;
    let mut tokens = Vec::new();
    for t in 0..enc.rows() {
        let mut emitted = 0;
        loop {
            let lp = model::joint(params, enc.row(t), &pred.output)?;
            let k = argmax(&lp);
            if k == BLANK {
                break;
            }
            tokens.push(k);
            pred = params.predictor_step(&pred, k)?;
            emitted += 1;
            if emitted >= opts.max_symbols_per_frame {
                break;
            }
        }
    }
    Ok(tokens)
}

/// Stacks, encodes, and greedy-decodes a raw feature sequence.
pub fn greedy_decode(
    params: &ModelParams,
    features: &FeatureSequence,
    opts: DecodeOptions,
) -> Result<Vec<usize>> {
    let stacked = model::stack_features(features, params.config.stack_size, params.config.stack_stride)?;
    let enc = model::encode(params, &stacked)?;
    greedy_decode_encoded(params, &enc, opts)
}

/// Greedy decode straight to text.
pub fn transcribe(params: &ModelParams, features: &FeatureSequence, opts: DecodeOptions) -> Result<String> {
    Ok(params.config.decode_tokens(&greedy_decode(params, features, opts)?))
}

/// Builds the full lattice from encoder and prediction states.
pub fn build_lattice(params: &ModelParams, enc: &Matrix, pred: &Matrix) -> Result<Lattice> {
    Lattice::from_fn(enc.rows(), pred.rows(), params.config.num_outputs(), |t, u| {
        model::joint(params, enc.row(t), pred.row(u))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, ModelParams};
    use crate::numerics::Rng;

    /// Independent oracle: explicitly enumerates every alignment path (an
    /// interleaving of T-1 blank moves and U label moves, then the final
    /// blank) and sums per-path probabilities in linear space.
    pub fn enumerate_paths_loss(lat: &Lattice, labels: &[usize]) -> f64 {
        fn walk(lat: &Lattice, labels: &[usize], t: usize, u: usize, acc: f64, total: &mut f64) {
            let (t_last, u_last) = (lat.frames() - 1, lat.prefix_len() - 1);
            if t == t_last && u == u_last {
                *total += acc * lat.logprob(t, u, BLANK).exp();
                return;
            }
            if t < t_last {
                walk(lat, labels, t + 1, u, acc * lat.logprob(t, u, BLANK).exp(), total);
            }
            if u < u_last {
                walk(lat, labels, t, u + 1, acc * lat.logprob(t, u, labels[u]).exp(), total);
            }
        }
        let mut total = 0.0;
        walk(lat, labels, 0, 0, 1.0, &mut total);
        -total.ln()
    }

    pub fn random_lattice(rng: &mut Rng, t: usize, u_plus_1: usize, v_plus_1: usize) -> Lattice {
        Lattice::from_fn(t, u_plus_1, v_plus_1, |_, _| {
            let logits: Vec<f64> = (0..v_plus_1).map(|_| rng.uniform(-2.0, 2.0)).collect();
            crate::numerics::log_softmax(&logits)
        })
        .unwrap()
    }

    fn uniform_lattice(t: usize, u_plus_1: usize, v_plus_1: usize) -> Lattice {
        let lp = (1.0 / v_plus_1 as f64).ln();
        Lattice::from_fn(t, u_plus_1, v_plus_1, |_, _| Ok(vec![lp; v_plus_1])).unwrap()
    }

    fn binomial(n: usize, k: usize) -> f64 {
        let mut r = 1.0;
        for i in 0..k {
            r = r * (n - i) as f64 / (i + 1) as f64;
        }
        r
    }

    #[test]
    fn uniform_lattice_closed_form() {
        // Paths from (0,0) to (T-1,U) plus a final blank: C(T-1+U, U) paths,
        // each of probability p^(T+U) under a uniform lattice.
        for &(t, u, v) in &[(2usize, 1usize, 1usize), (3, 2, 2), (4, 3, 3), (5, 1, 4), (1, 3, 2)] {
            let lat = uniform_lattice(t, u + 1, v + 1);
            let labels: Vec<usize> = (0..u).map(|i| 1 + (i % v)).collect();
            let p = 1.0 / (v + 1) as f64;
            let expect = -(binomial(t - 1 + u, u) * p.powi((t + u) as i32)).ln();
            let got = rnnt_loss(&lat, &labels).unwrap();
            assert!((got - expect).abs() < 1e-12, "T={t} U={u} V={v}: {got} vs {expect}");
            let oracle = enumerate_paths_loss(&lat, &labels);
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn two_frames_one_label_binary() {
        // T=2, U=1, V=1, all probabilities 1/2: exactly two alignment paths
        // (label-blank-blank and blank-label-blank), each (1/2)^3, so the
        // loss is -ln(2/8) = ln 4.
        let lat = uniform_lattice(2, 2, 2);
        let loss = rnnt_loss(&lat, &[1]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((enumerate_paths_loss(&lat, &[1]) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_single_path() {
        // U=0: the only path is T blanks; loss is the negated sum of blank
        // log-probs along u=0.
        let mut rng = Rng::new(3);
        let lat = random_lattice(&mut rng, 5, 1, 4);
        let expect: f64 = -(0..5).map(|t| lat.logprob(t, 0, BLANK)).sum::<f64>();
        let got = rnnt_loss(&lat, &[]).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_path_enumeration_on_random_lattices() {
        let mut rng = Rng::new(11);
        for case in 0..40 {
            let t = 1 + rng.next_usize(5);
            let u = rng.next_usize(4);
            let v = 1 + rng.next_usize(3);
            let lat = random_lattice(&mut rng, t, u + 1, v + 1);
            let labels: Vec<usize> = (0..u).map(|_| 1 + rng.next_usize(v)).collect();
            let got = rnnt_loss(&lat, &labels).unwrap();
            let oracle = enumerate_paths_loss(&lat, &labels);
            assert!(
                (got - oracle).abs() < 1e-10,
                "case {case} T={t} U={u} V={v}: {got} vs {oracle}"
            );
            assert!(got > 0.0);
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let eps = 1e-6;
        for _ in 0..8 {
            let t = 1 + rng.next_usize(3);
            let u = rng.next_usize(3);
            let v = 1 + rng.next_usize(2);
            let mut lat = random_lattice(&mut rng, t, u + 1, v + 1);
            let labels: Vec<usize> = (0..u).map(|_| 1 + rng.next_usize(v)).collect();
            let (loss, grad) = rnnt_grad(&lat, &labels).unwrap();
            assert!(loss > 0.0);
            for idx in 0..lat.logprobs.len() {
                let orig = lat.logprobs[idx];
                lat.logprobs[idx] = orig + eps;
                let up = rnnt_loss(&lat, &labels).unwrap();
                lat.logprobs[idx] = orig - eps;
                let down = rnnt_loss(&lat, &labels).unwrap();
                lat.logprobs[idx] = orig;
                let fd = (up - down) / (2.0 * eps);
                assert!(
                    (fd - grad.values[idx]).abs() < 1e-6,
                    "entry {idx}: fd {fd} vs analytic {}",
                    grad.values[idx]
                );
            }
        }
    }

    #[test]
    fn grad_total_mass_is_path_length() {
        // Every alignment makes exactly T+U moves, so the posteriors over
        // transitions sum to T+U and the gradient entries sum to -(T+U).
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let t = 1 + rng.next_usize(5);
            let u = rng.next_usize(5);
            let v = 1 + rng.next_usize(4);
            let lat = random_lattice(&mut rng, t, u + 1, v + 1);
            let labels: Vec<usize> = (0..u).map(|_| 1 + rng.next_usize(v)).collect();
            let (_, grad) = rnnt_grad(&lat, &labels).unwrap();
            let total: f64 = grad.values.iter().sum();
            assert!((total + (t + u) as f64).abs() < 1e-9, "T={t} U={u}: {total}");
        }
    }

    #[test]
    fn grad_sparsity() {
        let mut rng = Rng::new(19);
        let lat = random_lattice(&mut rng, 4, 3, 5);
        let labels = [2usize, 4];
        let (_, grad) = rnnt_grad(&lat, &labels).unwrap();
        for t in 0..4 {
            #[allow(clippy::needless_range_loop)] // u names a lattice row
            for u in 0..3 {
                for k in 0..5 {
                    let g = grad.at(t, u)[k];
                    let allowed = k == BLANK || (u < 2 && k == labels[u]);
                    if !allowed {
                        assert_eq!(g, 0.0, "unexpected grad at ({t},{u},{k})");
                    }
                }
            }
        }
    }

    #[test]
    fn label_validation() {
        let lat = uniform_lattice(2, 2, 3);
        assert!(rnnt_loss(&lat, &[0]).is_err());
        assert!(rnnt_loss(&lat, &[3]).is_err());
        assert!(rnnt_loss(&lat, &[1, 1]).is_err());
        assert!(rnnt_loss(&lat, &[]).is_err());
    }

    fn decode_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            stack_size: 2,
            stack_stride: 2,
            encoder_layers: 5,
            prediction_layers: 2,
            hidden_size: 4,
            vocab: "ab".into(),
        }
    }

    #[test]
    fn decode_all_blank_is_empty() {
        // Uniform joint output ties at every index; blank wins ties.
        let params = ModelParams::zeros(&decode_config()).unwrap();
        let enc = Matrix::zeros(6, 4);
        let tokens = greedy_decode_encoded(&params, &enc, DecodeOptions::default()).unwrap();
        assert!(tokens.is_empty());
    }

    #[test]
    fn decode_label_bias_hits_symbol_cap() {
        let mut params = ModelParams::zeros(&decode_config()).unwrap();
        params.joint.out_bias = vec![0.0, 1.0, 0.0];
        let enc = Matrix::zeros(4, 4);
        let tokens = greedy_decode_encoded(&params, &enc, DecodeOptions::default()).unwrap();
        assert_eq!(tokens, vec![1; 12]);
        let capped = greedy_decode_encoded(
            &params,
            &enc,
            DecodeOptions {
                max_symbols_per_frame: 1,
            },
        )
        .unwrap();
        assert_eq!(capped, vec![1; 4]);
    }

    #[test]
    fn decode_is_deterministic() {
        let cfg = decode_config();
        let mut rng = Rng::new(29);
        let params = init_params(&cfg, &mut rng).unwrap();
        let frames: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let feats = FeatureSequence {
            frames: Matrix::from_rows(&frames).unwrap(),
            frame_period_ms: 10.0,
        };
        let a = greedy_decode(&params, &feats, DecodeOptions::default()).unwrap();
        let b = greedy_decode(&params, &feats, DecodeOptions::default()).unwrap();
        assert_eq!(a, b);
        for &tok in &a {
            assert!(tok >= 1 && tok <= cfg.vocab_size());
        }
    }

    #[test]
    fn built_lattice_is_normalized() {
        let cfg = decode_config();
        let mut rng = Rng::new(31);
        let params = init_params(&cfg, &mut rng).unwrap();
        let frames: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let feats = FeatureSequence {
            frames: Matrix::from_rows(&frames).unwrap(),
            frame_period_ms: 10.0,
        };
        let stacked = crate::model::stack_features(&feats, cfg.stack_size, cfg.stack_stride).unwrap();
        let enc = crate::model::encode(&params, &stacked).unwrap();
        let pred = crate::model::predict(&params, &[1, 2]).unwrap();
        let lat = build_lattice(&params, &enc, &pred).unwrap();
        assert_eq!(lat.frames(), enc.rows());
        assert_eq!(lat.prefix_len(), 3);
        assert_eq!(lat.num_outputs(), 3);
        assert!(lat.is_normalized(1e-9));
    }
}
