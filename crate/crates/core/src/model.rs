//! The desk-scale RNN-T network: feature stacking, an LSTM encoder stack, an
//! LSTM prediction network, and a feed-forward joint network.
//!
//! Layer counts follow the adaptation recipes (8 encoder + 2 prediction
//! layers) so the freeze masks transfer verbatim; widths are desk-scale.
//! Forward passes are pure. The `*_with_tape` variants additionally record
//! the intermediates needed for backpropagation through time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{affine, log_softmax, Matrix, Rng};

/// Output index reserved for the blank symbol.
pub const BLANK: usize = 0;

/// Identifies one trainable layer of the model; the unit of freeze masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    Encoder(usize),
    Prediction(usize),
    Embedding,
    Joint,
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerId::Encoder(i) => write!(f, "enc{}", i),
            LayerId::Prediction(i) => write!(f, "pred{}", i),
            LayerId::Embedding => write!(f, "embed"),
            LayerId::Joint => write!(f, "joint"),
        }
    }
}

impl std::str::FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(i) = s.strip_prefix("enc") {
            if let Ok(i) = i.parse() {
                return Ok(LayerId::Encoder(i));
            }
        }
        if let Some(i) = s.strip_prefix("pred") {
            if let Ok(i) = i.parse() {
                return Ok(LayerId::Prediction(i));
            }
        }
        match s {
            "embed" => Ok(LayerId::Embedding),
            "joint" => Ok(LayerId::Joint),
            _ => Err(Error::Config(format!("unknown layer id {:?}", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub stack_size: usize,
    pub stack_stride: usize,
    pub encoder_layers: usize,
    pub prediction_layers: usize,
    pub hidden_size: usize,
    /// Ordered label symbols. Output index 0 is the blank and is not part of
    /// this list; symbol `vocab[i]` has token index `i + 1`.
    pub vocab: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            stack_size: 4,
            stack_stride: 3,
            encoder_layers: 8,
            prediction_layers: 2,
            hidden_size: 48,
            vocab: "abcdefghijklmnopqrstuvwxyz ".to_string(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers < 5 {
            return Err(Error::Config(format!(
                "encoder_layers must be >= 5 so both freeze recipes are expressible, got {}",
                self.encoder_layers
            )));
        }
        if self.prediction_layers == 0 || self.hidden_size == 0 || self.feature_dim == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.stack_size == 0 || self.stack_stride == 0 {
            return Err(Error::Config("stack_size and stack_stride must be >= 1".into()));
        }
        if self.vocab.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let chars: Vec<char> = self.vocab.chars().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("duplicate vocab symbol {:?}", c)));
            }
        }
        Ok(())
    }

    /// Number of label symbols V (blank excluded).
    pub fn vocab_size(&self) -> usize {
        self.vocab.chars().count()
    }

    /// Size of the joint-network output distribution, V + 1.
    pub fn num_outputs(&self) -> usize {
        self.vocab_size() + 1
    }

    /// Encoder input width after stacking.
    pub fn stacked_dim(&self) -> usize {
        self.stack_size * self.feature_dim
    }

    /// Token index (1-based; 0 is blank) of a symbol.
    pub fn token_of(&self, c: char) -> Option<usize> {
        self.vocab.chars().position(|v| v == c).map(|i| i + 1)
    }

    pub fn symbol_of(&self, token: usize) -> Option<char> {
        if token == BLANK {
            return None;
        }
        self.vocab.chars().nth(token - 1)
    }

    pub fn encode_transcript(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.token_of(c).ok_or(Error::OutOfVocab(c)))
            .collect()
    }

    pub fn decode_tokens(&self, tokens: &[usize]) -> String {
        tokens.iter().filter_map(|&t| self.symbol_of(t)).collect()
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = (0..self.encoder_layers).map(LayerId::Encoder).collect();
        ids.extend((0..self.prediction_layers).map(LayerId::Prediction));
        ids.push(LayerId::Embedding);
        ids.push(LayerId::Joint);
        ids
    }
}

/// A T x d sequence of synthetic log-Mel-like frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix,
    pub frame_period_ms: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Stacks `stack` consecutive frames with the given stride. Output frame `i`
/// concatenates input frames `[i*stride, i*stride + stack)`; indices past the
/// end repeat the final input frame. Output length is `ceil(T / stride)`.
pub fn stack_features(seq: &FeatureSequence, stack: usize, stride: usize) -> Result<FeatureSequence> {
    if stack == 0 || stride == 0 {
        return Err(Error::Config("stack and stride must be >= 1".into()));
    }
    let t = seq.len();
    if t == 0 {
        return Err(Error::EmptyInput("stack_features"));
    }
    let d = seq.dim();
    let t_out = t.div_ceil(stride);
    let mut out = Matrix::zeros(t_out, stack * d);
    for i in 0..t_out {
        for s in 0..stack {
            let src = (i * stride + s).min(t - 1);
            out.row_mut(i)[s * d..(s + 1) * d].copy_from_slice(seq.frames.row(src));
        }
    }
    Ok(FeatureSequence {
        frames: out,
        frame_period_ms: seq.frame_period_ms * stride as f64,
    })
}

/// Weights of one LSTM layer. Gate order in the fused dimension is
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// 4H x input_dim
    pub w_ih: Matrix,
    /// 4H x H
    pub w_hh: Matrix,
    /// 4H
    pub bias: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: Matrix::zeros(4 * hidden, input_dim),
            w_hh: Matrix::zeros(4 * hidden, hidden),
            bias: vec![0.0; 4 * hidden],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }
}

/// Hidden and cell vectors for a stack of LSTM layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl LstmState {
    pub fn zeros(num_layers: usize, hidden: usize) -> Self {
        LstmState {
            layers: vec![(vec![0.0; hidden], vec![0.0; hidden]); num_layers],
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intermediates of one LSTM step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStepTape {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates.
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One standard LSTM cell update. Returns (h', c').
pub fn lstm_step(
    layer: &LstmLayer,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h2, c2, _) = lstm_step_inner(layer, x, h, c, false)?;
    Ok((h2, c2))
}

fn lstm_step_inner(
    layer: &LstmLayer,
    x: &[f64],
    h: &[f64],
    c: &[f64],
    want_tape: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<LstmStepTape>)> {
    let hidden = layer.hidden_size();
    if x.len() != layer.input_dim() || h.len() != hidden || c.len() != hidden {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            expected: format!("x:{} h:{} c:{}", layer.input_dim(), hidden, hidden),
            got: format!("x:{} h:{} c:{}", x.len(), h.len(), c.len()),
        });
    }
    let mut z = affine(&layer.w_ih, x, &layer.bias)?;
    let zh = layer.w_hh.matvec(h)?;
    for (a, b) in z.iter_mut().zip(&zh) {
        *a += b;
    }

    let mut gate_i = vec![0.0; hidden];
    let mut gate_f = vec![0.0; hidden];
    let mut gate_g = vec![0.0; hidden];
    let mut gate_o = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    let mut h_new = vec![0.0; hidden];
    for k in 0..hidden {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[hidden + k]);
        let g = z[2 * hidden + k].tanh();
        let o = sigmoid(z[3 * hidden + k]);
        let cn = f * c[k] + i * g;
        let tc = cn.tanh();
        gate_i[k] = i;
        gate_f[k] = f;
        gate_g[k] = g;
        gate_o[k] = o;
        c_new[k] = cn;
        tanh_c[k] = tc;
        h_new[k] = o * tc;
    }
    let tape = want_tape.then(|| LstmStepTape {
        x: x.to_vec(),
        h_prev: h.to_vec(),
        c_prev: c.to_vec(),
        gate_i,
        gate_f,
        gate_g,
        gate_o,
        tanh_c,
    });
    Ok((h_new, c_new, tape))
}

/// Backward-pass record of a whole LSTM stack run: `steps[layer][t]`.
#[derive(Debug, Clone)]
pub struct StackTape {
    pub steps: Vec<Vec<LstmStepTape>>,
}

/// Runs a stack of LSTM layers over an input sequence (rows of `inputs`),
/// returning the top layer's hidden vector per step.
pub fn run_lstm_stack(layers: &[LstmLayer], inputs: &Matrix) -> Result<Matrix> {
    run_lstm_stack_inner(layers, inputs, false).map(|(m, _)| m)
}

pub fn run_lstm_stack_with_tape(layers: &[LstmLayer], inputs: &Matrix) -> Result<(Matrix, StackTape)> {
    let (m, tape) = run_lstm_stack_inner(layers, inputs, true)?;
    Ok((m, tape.expect("tape requested")))
}

fn run_lstm_stack_inner(
    layers: &[LstmLayer],
    inputs: &Matrix,
    want_tape: bool,
) -> Result<(Matrix, Option<StackTape>)> {
    let hidden = layers
        .first()
        .map(LstmLayer::hidden_size)
        .ok_or(Error::EmptyInput("run_lstm_stack: no layers"))?;
    let steps = inputs.rows();
    let mut state = LstmState::zeros(layers.len(), hidden);
    let mut out = Matrix::zeros(steps, hidden);
    let mut tape = want_tape.then(|| StackTape {
        steps: vec![Vec::with_capacity(steps); layers.len()],
    });
    for t in 0..steps {
        let mut x: Vec<f64> = inputs.row(t).to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let (h, c) = &state.layers[l];
            let (h2, c2, step_tape) = lstm_step_inner(layer, &x, h, c, want_tape)?;
            if let Some(tape) = tape.as_mut() {
                tape.steps[l].push(step_tape.expect("tape requested"));
            }
            state.layers[l] = (h2.clone(), c2);
            x = h2;
        }
        out.row_mut(t).copy_from_slice(&x);
    }
    Ok((out, tape))
}

/// Per-layer gradient accumulators for one LSTM stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<LstmLayer>,
}

impl StackGrads {
    pub fn zeros_like(layers: &[LstmLayer]) -> Self {
        StackGrads {
            layers: layers
                .iter()
                .map(|l| LstmLayer::zeros(l.input_dim(), l.hidden_size()))
                .collect(),
        }
    }
}

/// Backpropagation through time over a recorded stack run.
///
/// `grad_top` holds the loss gradient w.r.t. the top layer's hidden output at
/// each step. Weight gradients accumulate into `grads`; the return value is
/// the gradient w.r.t. the stack's input rows.
pub fn lstm_stack_backward(
    layers: &[LstmLayer],
    tape: &StackTape,
    grad_top: &Matrix,
    grads: &mut StackGrads,
) -> Matrix {
    let mut taps: Vec<Option<&Matrix>> = vec![None; layers.len()];
    *taps.last_mut().expect("at least one layer") = Some(grad_top);
    lstm_stack_backward_taps(layers, tape, &taps, grads)
}

/// The hidden output of layer `l` at step `t` of a recorded run,
/// reconstructed from the tape (h = o * tanh(c)).
pub fn tape_hidden(tape: &StackTape, l: usize, t: usize) -> Vec<f64> {
    let st = &tape.steps[l][t];
    st.gate_o.iter().zip(&st.tanh_c).map(|(o, tc)| o * tc).collect()
}

/// Backpropagation through time with loss gradients tapped into any subset
/// of layer outputs, one optional steps x H matrix per layer. Auxiliary
/// per-layer heads train this way; `lstm_stack_backward` is the special case
/// with a single tap at the top.
pub fn lstm_stack_backward_taps(
    layers: &[LstmLayer],
    tape: &StackTape,
    grad_taps: &[Option<&Matrix>],
    grads: &mut StackGrads,
) -> Matrix {
    let num_layers = layers.len();
    debug_assert_eq!(grad_taps.len(), num_layers);
    let steps = tape.steps[0].len();
    let hidden = layers[0].hidden_size();

    // Gradient flowing into each layer's hidden output per step; the upper
    // layer's dx plus that layer's own tap, if any.
    let mut grad_from_above: Vec<Vec<f64>> = vec![vec![0.0; hidden]; steps];

    let mut grad_inputs = Matrix::zeros(steps, layers[0].input_dim());

    for l in (0..num_layers).rev() {
        let layer = &layers[l];
        let gl = &mut grads.layers[l];
        if let Some(tap) = grad_taps[l] {
            for (t, row) in grad_from_above.iter_mut().enumerate() {
                crate::numerics::add_assign(row, tap.row(t));
            }
        }
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        let mut grad_x_per_t: Vec<Vec<f64>> = vec![Vec::new(); steps];

        for t in (0..steps).rev() {
            let st = &tape.steps[l][t];
            let mut d_gates = vec![0.0; 4 * hidden];
            for k in 0..hidden {
                let dh = grad_from_above[t][k] + dh_next[k];
                let o = st.gate_o[k];
                let tc = st.tanh_c[k];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                let i = st.gate_i[k];
                let f = st.gate_f[k];
                let g = st.gate_g[k];
                d_gates[k] = dc * g * i * (1.0 - i);
                d_gates[hidden + k] = dc * st.c_prev[k] * f * (1.0 - f);
                d_gates[2 * hidden + k] = dc * i * (1.0 - g * g);
                d_gates[3 * hidden + k] = dh * tc * o * (1.0 - o);
                // Reuse dc_next as scratch for the next (earlier) step.
                dc_next[k] = dc * f;
            }
            gl.w_ih.add_outer(&d_gates, &st.x);
            gl.w_hh.add_outer(&d_gates, &st.h_prev);
            crate::numerics::add_assign(&mut gl.bias, &d_gates);
            dh_next = layer
                .w_hh
                .matvec_transpose(&d_gates)
                .expect("shapes fixed by construction");
            grad_x_per_t[t] = layer
                .w_ih
                .matvec_transpose(&d_gates)
                .expect("shapes fixed by construction");
        }

        if l == 0 {
            for (t, dx) in grad_x_per_t.iter().enumerate() {
                grad_inputs.row_mut(t).copy_from_slice(dx);
            }
        } else {
            grad_from_above = grad_x_per_t;
        }
    }
    grad_inputs
}

/// Joint-network weights: two projections into a shared tanh space, then an
/// output projection over V+1 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct JointNet {
    /// J x H
    pub enc_proj: Matrix,
    /// J x H
    pub pred_proj: Matrix,
    /// J
    pub bias: Vec<f64>,
    /// (V+1) x J
    pub out_proj: Matrix,
    /// V+1
    pub out_bias: Vec<f64>,
}

impl JointNet {
    pub fn zeros(hidden: usize, num_outputs: usize) -> Self {
        JointNet {
            enc_proj: Matrix::zeros(hidden, hidden),
            pred_proj: Matrix::zeros(hidden, hidden),
            bias: vec![0.0; hidden],
            out_proj: Matrix::zeros(num_outputs, hidden),
            out_bias: vec![0.0; num_outputs],
        }
    }
}

/// The full parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<LstmLayer>,
    pub prediction: Vec<LstmLayer>,
    /// (V+1) x H label embeddings. Row 0 is unused: blank is never fed back,
    /// and the start-of-sequence input is the all-zero vector.
    pub embedding: Matrix,
    pub joint: JointNet,
}

/// A view of one named tensor inside the parameter tree.
pub struct TensorView<'a> {
    pub name: String,
    pub layer: LayerId,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl ModelParams {
    /// All-zero parameters with shapes taken from the config.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let encoder = (0..config.encoder_layers)
            .map(|l| {
                let input = if l == 0 { config.stacked_dim() } else { h };
                LstmLayer::zeros(input, h)
            })
            .collect();
        let prediction = (0..config.prediction_layers)
            .map(|_| LstmLayer::zeros(h, h))
            .collect();
        Ok(ModelParams {
            embedding: Matrix::zeros(config.num_outputs(), h),
            joint: JointNet::zeros(h, config.num_outputs()),
            encoder,
            prediction,
            config: config.clone(),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Deterministic traversal of the named tensor tree.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            let id = LayerId::Encoder(i);
            out.push(TensorView { name: format!("enc{i}.w_ih"), layer: id, rows: l.w_ih.rows(), cols: l.w_ih.cols(), data: l.w_ih.data() });
            out.push(TensorView { name: format!("enc{i}.w_hh"), layer: id, rows: l.w_hh.rows(), cols: l.w_hh.cols(), data: l.w_hh.data() });
            out.push(TensorView { name: format!("enc{i}.bias"), layer: id, rows: l.bias.len(), cols: 1, data: &l.bias });
        }
        for (i, l) in self.prediction.iter().enumerate() {
            let id = LayerId::Prediction(i);
            out.push(TensorView { name: format!("pred{i}.w_ih"), layer: id, rows: l.w_ih.rows(), cols: l.w_ih.cols(), data: l.w_ih.data() });
            out.push(TensorView { name: format!("pred{i}.w_hh"), layer: id, rows: l.w_hh.rows(), cols: l.w_hh.cols(), data: l.w_hh.data() });
            out.push(TensorView { name: format!("pred{i}.bias"), layer: id, rows: l.bias.len(), cols: 1, data: &l.bias });
        }
        out.push(TensorView { name: "embedding".into(), layer: LayerId::Embedding, rows: self.embedding.rows(), cols: self.embedding.cols(), data: self.embedding.data() });
        let j = &self.joint;
        out.push(TensorView { name: "joint.enc_proj".into(), layer: LayerId::Joint, rows: j.enc_proj.rows(), cols: j.enc_proj.cols(), data: j.enc_proj.data() });
        out.push(TensorView { name: "joint.pred_proj".into(), layer: LayerId::Joint, rows: j.pred_proj.rows(), cols: j.pred_proj.cols(), data: j.pred_proj.data() });
        out.push(TensorView { name: "joint.bias".into(), layer: LayerId::Joint, rows: j.bias.len(), cols: 1, data: &j.bias });
        out.push(TensorView { name: "joint.out_proj".into(), layer: LayerId::Joint, rows: j.out_proj.rows(), cols: j.out_proj.cols(), data: j.out_proj.data() });
        out.push(TensorView { name: "joint.out_bias".into(), layer: LayerId::Joint, rows: j.out_bias.len(), cols: 1, data: &j.out_bias });
        out
    }

    /// Mutable slices over every tensor, in the same order as `tensors()`.
    pub fn tensors_mut(&mut self) -> Vec<(String, LayerId, &mut [f64])> {
        let mut out: Vec<(String, LayerId, &mut [f64])> = Vec::new();
        for (i, l) in self.encoder.iter_mut().enumerate() {
            let id = LayerId::Encoder(i);
            out.push((format!("enc{i}.w_ih"), id, l.w_ih.data_mut()));
            out.push((format!("enc{i}.w_hh"), id, l.w_hh.data_mut()));
            out.push((format!("enc{i}.bias"), id, l.bias.as_mut_slice()));
        }
        for (i, l) in self.prediction.iter_mut().enumerate() {
            let id = LayerId::Prediction(i);
            out.push((format!("pred{i}.w_ih"), id, l.w_ih.data_mut()));
            out.push((format!("pred{i}.w_hh"), id, l.w_hh.data_mut()));
            out.push((format!("pred{i}.bias"), id, l.bias.as_mut_slice()));
        }
        out.push(("embedding".into(), LayerId::Embedding, self.embedding.data_mut()));
        let j = &mut self.joint;
        out.push(("joint.enc_proj".into(), LayerId::Joint, j.enc_proj.data_mut()));
        out.push(("joint.pred_proj".into(), LayerId::Joint, j.pred_proj.data_mut()));
        out.push(("joint.bias".into(), LayerId::Joint, j.bias.as_mut_slice()));
        out.push(("joint.out_proj".into(), LayerId::Joint, j.out_proj.data_mut()));
        out.push(("joint.out_bias".into(), LayerId::Joint, j.out_bias.as_mut_slice()));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise `self += other * scale` over the whole tree.
    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) {
        let theirs = other.tensors();
        for ((_, _, mine), t) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(t.data) {
                *a += s * b;
            }
        }
    }
}

/// Gradients share the parameter tree's shape.
pub type ModelGrads = ModelParams;

/// Deterministic uniform initialization in [-s, s] with s = 1/sqrt(hidden).
pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let s = 1.0 / (config.hidden_size as f64).sqrt();
    for (_, _, data) in params.tensors_mut() {
        for v in data.iter_mut() {
            *v = rng.uniform(-s, s);
        }
    }
    Ok(params)
}

/// Runs the encoder stack over stacked features, one hidden row per frame.
/// Streaming and causal: row t depends only on frames <= t.
pub fn encode(params: &ModelParams, stacked: &FeatureSequence) -> Result<Matrix> {
    check_stacked_dim(params, stacked)?;
    run_lstm_stack(&params.encoder, &stacked.frames)
}

pub fn encode_with_tape(params: &ModelParams, stacked: &FeatureSequence) -> Result<(Matrix, StackTape)> {
    check_stacked_dim(params, stacked)?;
    run_lstm_stack_with_tape(&params.encoder, &stacked.frames)
}

fn check_stacked_dim(params: &ModelParams, stacked: &FeatureSequence) -> Result<()> {
    if stacked.dim() != params.config.stacked_dim() {
        return Err(Error::ShapeMismatch {
            op: "encode",
            expected: format!("stacked dim {}", params.config.stacked_dim()),
            got: format!("dim {}", stacked.dim()),
        });
    }
    Ok(())
}

/// Builds the (U+1) x H prediction-network input matrix: row 0 is the all-zero
/// start-of-sequence embedding, row u is the embedding of label u.
fn prediction_inputs(params: &ModelParams, labels: &[usize]) -> Result<Matrix> {
    let h = params.hidden_size();
    let v = params.config.vocab_size();
    let mut inputs = Matrix::zeros(labels.len() + 1, h);
    for (u, &tok) in labels.iter().enumerate() {
        if tok == BLANK || tok > v {
            return Err(Error::TokenOutOfRange(tok, v));
        }
        inputs.row_mut(u + 1).copy_from_slice(params.embedding.row(tok));
    }
    Ok(inputs)
}

/// Prediction-network states for a label prefix: (U+1) x H, where row u is the
/// state after consuming labels y_1..y_u (row 0 after only the start symbol).
pub fn predict(params: &ModelParams, labels: &[usize]) -> Result<Matrix> {
    let inputs = prediction_inputs(params, labels)?;
    run_lstm_stack(&params.prediction, &inputs)
}

pub fn predict_with_tape(params: &ModelParams, labels: &[usize]) -> Result<(Matrix, StackTape)> {
    let inputs = prediction_inputs(params, labels)?;
    run_lstm_stack_with_tape(&params.prediction, &inputs)
}

/// Incremental prediction-network state for decoding.
#[derive(Debug, Clone)]
pub struct PredictorState {
    state: LstmState,
    /// Top-layer hidden vector after the last consumed symbol.
    pub output: Vec<f64>,
}

impl ModelParams {
    /// State after consuming the start-of-sequence (all-zero) embedding.
    pub fn predictor_start(&self) -> Result<PredictorState> {
        let h = self.hidden_size();
        let mut state = LstmState::zeros(self.prediction.len(), h);
        let output = self.predictor_advance(&mut state, &vec![0.0; h])?;
        Ok(PredictorState { state, output })
    }

    /// Advances the predictor by one label, returning the new state.
    pub fn predictor_step(&self, st: &PredictorState, token: usize) -> Result<PredictorState> {
        let v = self.config.vocab_size();
        if token == BLANK || token > v {
            return Err(Error::TokenOutOfRange(token, v));
        }
        let mut state = st.state.clone();
        let output = self.predictor_advance(&mut state, self.embedding.row(token))?;
        Ok(PredictorState { state, output })
    }

    fn predictor_advance(&self, state: &mut LstmState, input: &[f64]) -> Result<Vec<f64>> {
        let mut x = input.to_vec();
        for (l, layer) in self.prediction.iter().enumerate() {
            let (h, c) = &state.layers[l];
            let (h2, c2) = lstm_step(layer, &x, h, c)?;
            state.layers[l] = (h2.clone(), c2);
            x = h2;
        }
        Ok(x)
    }
}

/// Joint network: normalized log-probabilities over V+1 outputs for one
/// (encoder frame, prediction state) pair.
pub fn joint(params: &ModelParams, enc_t: &[f64], pred_u: &[f64]) -> Result<Vec<f64>> {
    joint_with_hidden(params, enc_t, pred_u).map(|(lp, _)| lp)
}

/// Same as [`joint`] but also returns the tanh hidden layer, which the
/// backward pass needs.
pub fn joint_with_hidden(
    params: &ModelParams,
    enc_t: &[f64],
    pred_u: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let j = &params.joint;
    let mut pre = affine(&j.enc_proj, enc_t, &j.bias)?;
    let from_pred = j.pred_proj.matvec(pred_u)?;
    for (a, b) in pre.iter_mut().zip(&from_pred) {
        *a = (*a + b).tanh();
    }
    let logits = affine(&j.out_proj, &pre, &j.out_bias)?;
    let logprobs = log_softmax(&logits)?;
    Ok((logprobs, pre))
}
