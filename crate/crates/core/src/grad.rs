//! End-to-end loss and parameter gradients for whole utterances.
//!
//! Ties the pieces together: features are stacked and encoded with a tape,
//! the prediction network runs over the reference labels with a tape, the
//! joint network fills the alignment lattice, and the transducer gradient is
//! pushed back through the joint network and both LSTM stacks down to every
//! weight. Batch gradients are averaged in utterance order regardless of how
//! many worker threads computed them, so results are bit-reproducible.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    self, FeatureSequence, ModelGrads, ModelParams, StackGrads, StackTape,
};
use crate::numerics::{add_assign, log_softmax, Matrix, Rng};
use crate::transducer::{rnnt_grad, Lattice};

/// Everything recorded during one utterance's forward pass.
pub struct UtteranceForward {
    pub labels: Vec<usize>,
    pub enc_states: Matrix,
    pub enc_tape: StackTape,
    pub pred_states: Matrix,
    pub pred_tape: StackTape,
    pub lattice: Lattice,
    /// Joint tanh activations, flattened as [t][u][j].
    pub joint_hidden: Vec<f64>,
    pub loss: f64,
}

/// Runs the full forward pass and keeps the tapes needed for gradients.
pub fn forward_utterance(
    params: &ModelParams,
    features: &FeatureSequence,
    labels: &[usize],
) -> Result<UtteranceForward> {
    let cfg = &params.config;
    let stacked = model::stack_features(features, cfg.stack_size, cfg.stack_stride)?;
    let (enc_states, enc_tape) = model::encode_with_tape(params, &stacked)?;
    let (pred_states, pred_tape) = model::predict_with_tape(params, labels)?;

    let t_len = enc_states.rows();
    let u_len = pred_states.rows();
    let n_out = cfg.num_outputs();
    let hidden = cfg.hidden_size;
    let mut lattice = Lattice::new(t_len, u_len, n_out)?;
    let mut joint_hidden = vec![0.0; t_len * u_len * hidden];
    for t in 0..t_len {
        for u in 0..u_len {
            let (lp, hid) = model::joint_with_hidden(params, enc_states.row(t), pred_states.row(u))?;
            lattice.at_mut(t, u).copy_from_slice(&lp);
            let base = (t * u_len + u) * hidden;
            joint_hidden[base..base + hidden].copy_from_slice(&hid);
        }
    }
    let loss = crate::transducer::rnnt_loss(&lattice, labels)?;
    Ok(UtteranceForward {
        labels: labels.to_vec(),
        enc_states,
        enc_tape,
        pred_states,
        pred_tape,
        lattice,
        joint_hidden,
        loss,
    })
}

/// Loss only, without tapes; cheaper when no gradient is needed.
pub fn utterance_loss(params: &ModelParams, features: &FeatureSequence, labels: &[usize]) -> Result<f64> {
    let cfg = &params.config;
    let stacked = model::stack_features(features, cfg.stack_size, cfg.stack_stride)?;
    let enc = model::encode(params, &stacked)?;
    let pred = model::predict(params, labels)?;
    let lattice = crate::transducer::build_lattice(params, &enc, &pred)?;
    crate::transducer::rnnt_loss(&lattice, labels)
}

/// Backward pass over a recorded forward run. Returns the gradient tree.
pub fn backward_utterance(params: &ModelParams, fwd: &UtteranceForward) -> Result<ModelGrads> {
    let cfg = &params.config;
    let hidden = cfg.hidden_size;
    let t_len = fwd.enc_states.rows();
    let u_len = fwd.pred_states.rows();
    let n_out = cfg.num_outputs();

    let (_, lat_grad) = rnnt_grad(&fwd.lattice, &fwd.labels)?;

    let mut grads = ModelParams::zeros(cfg)?;
    let mut grad_enc = Matrix::zeros(t_len, hidden);
    let mut grad_pred = Matrix::zeros(u_len, hidden);

    // Backward through the joint network at every lattice node. The lattice
    // gradient is w.r.t. log-probabilities; fold the log-softmax Jacobian in
    // here: d logits = g - softmax * sum(g).
    let mut g_logits = vec![0.0; n_out];
    for t in 0..t_len {
        for u in 0..u_len {
            let g_lp = lat_grad.at(t, u);
            // At most the blank and one label entry are nonzero.
            let g_sum: f64 = g_lp[0] + fwd.labels.get(u).map_or(0.0, |&y| g_lp[y]);
            if g_sum == 0.0 && g_lp[0] == 0.0 {
                continue;
            }
            let lp = fwd.lattice.at(t, u);
            for k in 0..n_out {
                g_logits[k] = g_lp[k] - lp[k].exp() * g_sum;
            }
            let base = (t * u_len + u) * hidden;
            let hid = &fwd.joint_hidden[base..base + hidden];

            grads.joint.out_proj.add_outer(&g_logits, hid);
            add_assign(&mut grads.joint.out_bias, &g_logits);
            let g_hid = params.joint.out_proj.matvec_transpose(&g_logits)?;
            let g_pre: Vec<f64> = g_hid
                .iter()
                .zip(hid)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect();
            add_assign(&mut grads.joint.bias, &g_pre);
            grads.joint.enc_proj.add_outer(&g_pre, fwd.enc_states.row(t));
            grads.joint.pred_proj.add_outer(&g_pre, fwd.pred_states.row(u));
            add_assign(grad_enc.row_mut(t), &params.joint.enc_proj.matvec_transpose(&g_pre)?);
            add_assign(grad_pred.row_mut(u), &params.joint.pred_proj.matvec_transpose(&g_pre)?);
        }
    }

    // Encoder BPTT; input gradients stop at the feature frames.
    let mut enc_grads = StackGrads::zeros_like(&params.encoder);
    model::lstm_stack_backward(&params.encoder, &fwd.enc_tape, &grad_enc, &mut enc_grads);
    grads.encoder = enc_grads.layers;

    // Prediction BPTT; input gradients flow into the label embeddings.
    // Input row 0 is the fixed all-zero start symbol and takes no gradient.
    let mut pred_grads = StackGrads::zeros_like(&params.prediction);
    let grad_inputs =
        model::lstm_stack_backward(&params.prediction, &fwd.pred_tape, &grad_pred, &mut pred_grads);
    grads.prediction = pred_grads.layers;
    for (u, &y) in fwd.labels.iter().enumerate() {
        add_assign(grads.embedding.row_mut(y), grad_inputs.row(u + 1));
    }

    if !grads.is_finite() {
        return Err(Error::NonFinite("backward_utterance"));
    }
    Ok(grads)
}

/// Loss and gradients for one utterance.
pub fn loss_and_grads(
    params: &ModelParams,
    features: &FeatureSequence,
    labels: &[usize],
) -> Result<(f64, ModelGrads)> {
    let fwd = forward_utterance(params, features, labels)?;
    let grads = backward_utterance(params, &fwd)?;
    Ok((fwd.loss, grads))
}

/// Linear classification head used by framewise encoder pretraining. It is
/// internal scaffolding: trained alongside the encoder and discarded before
/// transducer training starts.
#[derive(Debug, Clone)]
pub struct FrameHead {
    /// classes x H
    pub proj: Matrix,
    pub bias: Vec<f64>,
}

impl FrameHead {
    pub fn init(classes: usize, hidden: usize, rng: &mut Rng) -> FrameHead {
        let s = 1.0 / (hidden as f64).sqrt();
        let data: Vec<f64> = (0..classes * hidden).map(|_| rng.uniform(-s, s)).collect();
        FrameHead {
            proj: Matrix::from_vec(classes, hidden, data).expect("shape by construction"),
            bias: vec![0.0; classes],
        }
    }

    pub fn zeros_like(&self) -> FrameHead {
        FrameHead {
            proj: Matrix::zeros(self.proj.rows(), self.proj.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Framewise cross-entropy of the encoder stack under one linear head per
/// layer, with gradients for the encoder layers and every head.
///
/// The target of a stacked frame is the character under its center input
/// frame; classes are vocabulary positions (there is no blank here, this is
/// not the transducer label space). Each layer's head reads that layer's
/// hidden output, so even the bottom of an otherwise deep stack gets a
/// direct loss gradient; the heads below the top are auxiliary. Returns the
/// per-layer mean frame losses (top layer last). Everything outside the
/// encoder in the returned gradient tree stays zero.
pub fn encoder_ce_loss_and_grads(
    params: &ModelParams,
    heads: &[FrameHead],
    features: &FeatureSequence,
    frame_chars: &[char],
) -> Result<(Vec<f64>, ModelGrads, Vec<FrameHead>)> {
    let cfg = &params.config;
    if frame_chars.len() != features.len() {
        return Err(Error::ShapeMismatch {
            op: "encoder_ce_loss_and_grads",
            expected: format!("{} frame targets", features.len()),
            got: format!("{}", frame_chars.len()),
        });
    }
    if heads.len() != cfg.encoder_layers {
        return Err(Error::ShapeMismatch {
            op: "encoder_ce_loss_and_grads",
            expected: format!("{} heads", cfg.encoder_layers),
            got: format!("{}", heads.len()),
        });
    }
    let stacked = model::stack_features(features, cfg.stack_size, cfg.stack_stride)?;
    let (enc, tape) = model::encode_with_tape(params, &stacked)?;
    let t_len = enc.rows();
    let t_orig = features.len();

    let targets: Vec<usize> = (0..t_len)
        .map(|i| {
            let center = (i * cfg.stack_stride + cfg.stack_size / 2).min(t_orig - 1);
            let c = frame_chars[center];
            cfg.token_of(c).map(|t| t - 1).ok_or(Error::OutOfVocab(c))
        })
        .collect::<Result<_>>()?;

    let mut grads = ModelParams::zeros(cfg)?;
    let mut head_grads: Vec<FrameHead> = heads.iter().map(FrameHead::zeros_like).collect();
    let mut losses = vec![0.0; heads.len()];
    let mut taps: Vec<Matrix> = heads
        .iter()
        .map(|_| Matrix::zeros(t_len, cfg.hidden_size))
        .collect();
    let inv = 1.0 / t_len as f64;
    for (l, head) in heads.iter().enumerate() {
        let top = l == heads.len() - 1;
        for (i, &y) in targets.iter().enumerate() {
            let hid = if top {
                enc.row(i).to_vec()
            } else {
                model::tape_hidden(&tape, l, i)
            };
            let mut logits = head.proj.matvec(&hid)?;
            add_assign(&mut logits, &head.bias);
            let lp = log_softmax(&logits)?;
            losses[l] -= lp[y] * inv;
            // d loss / d logits = (softmax - onehot) / t_len
            let mut g: Vec<f64> = lp.iter().map(|&v| v.exp() * inv).collect();
            g[y] -= inv;
            head_grads[l].proj.add_outer(&g, &hid);
            add_assign(&mut head_grads[l].bias, &g);
            add_assign(taps[l].row_mut(i), &head.proj.matvec_transpose(&g)?);
        }
    }

    let tap_refs: Vec<Option<&Matrix>> = taps.iter().map(Some).collect();
    let mut enc_grads = StackGrads::zeros_like(&params.encoder);
    model::lstm_stack_backward_taps(&params.encoder, &tape, &tap_refs, &mut enc_grads);
    grads.encoder = enc_grads.layers;
    if !grads.is_finite() {
        return Err(Error::NonFinite("encoder_ce_loss_and_grads"));
    }
    Ok((losses, grads, head_grads))
}

/// Batch-mean framewise cross-entropy; per-utterance results may be computed
/// on worker threads but are combined in batch order, like
/// `batch_loss_and_grads`.
pub fn batch_encoder_ce(
    params: &ModelParams,
    heads: &[FrameHead],
    batch: &[(&FeatureSequence, &[char])],
) -> Result<(Vec<f64>, ModelGrads, Vec<FrameHead>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_encoder_ce"));
    }
    let per_utt: Vec<Result<(Vec<f64>, ModelGrads, Vec<FrameHead>)>> = batch
        .par_iter()
        .map(|(feats, chars)| encoder_ce_loss_and_grads(params, heads, feats, chars))
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut losses = vec![0.0; heads.len()];
    let mut acc = ModelParams::zeros(&params.config)?;
    let mut head_acc: Vec<FrameHead> = heads.iter().map(FrameHead::zeros_like).collect();
    for item in per_utt {
        let (per_layer, grads, hg) = item?;
        for (a, b) in losses.iter_mut().zip(&per_layer) {
            *a += b * scale;
        }
        acc.add_scaled(&grads, scale);
        for (ha, hb) in head_acc.iter_mut().zip(&hg) {
            for (a, b) in ha.proj.data_mut().iter_mut().zip(hb.proj.data()) {
                *a += b * scale;
            }
            for (a, b) in ha.bias.iter_mut().zip(&hb.bias) {
                *a += b * scale;
            }
        }
    }
    Ok((losses, acc, head_acc))
}

/// How a batch's per-utterance losses and gradients combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Batch loss and gradients under the given reduction.
///
/// Per-utterance gradients may be computed on worker threads, but they are
/// combined strictly in batch order, so the result does not depend on the
/// thread count.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[(&FeatureSequence, &[usize])],
    reduction: Reduction,
) -> Result<(f64, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch_loss_and_grads"));
    }
    let per_utt: Vec<Result<(f64, ModelGrads)>> = batch
        .par_iter()
        .map(|(feats, labels)| loss_and_grads(params, feats, labels))
        .collect();

    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch.len() as f64,
    };
    let mut total_loss = 0.0;
    let mut acc = ModelParams::zeros(&params.config)?;
    for item in per_utt {
        let (loss, grads) = item?;
        total_loss += loss;
        acc.add_scaled(&grads, scale);
    }
    Ok((total_loss * scale, acc))
}
