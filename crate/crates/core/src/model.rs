//! The learnable pieces: a multi-layer LSTM temporal encoder, the residual
//! denoiser network that predicts diffusion noise, the Adam optimizer, and
//! checkpoint I/O.
//!
//! Training builds forward passes on the [`Tape`](crate::autodiff::Tape) and
//! differentiates; inference uses the numeric forward paths below, which are
//! tested to agree with the tape route bit-for-bit in structure and to 1e-12
//! numerically.

use crate::autodiff::{Tape, Var};
use crate::diffusion::Denoiser;
use crate::linalg::Mat;
use rand::Rng;
use rand::SeedableRng;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter '{0}'; update skipped")]
    NonFiniteGradient(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint was written for a different config (hash mismatch)")]
    ConfigHashMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Static dimensions of the model; everything the forward passes need to
/// know besides the weights themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Pose channel count D.
    pub pose_dim: usize,
    /// Acoustic channels per frame.
    pub audio_dim: usize,
    /// Past-pose window length.
    pub tau: usize,
    /// Acoustic lookahead r; the conditioning window spans tau+1+r frames.
    pub lookahead: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    pub step_embed_dim: usize,
}

impl ModelDims {
    /// Width of the flattened conditioning vector fed to the encoder.
    pub fn cond_dim(&self) -> usize {
        self.tau * self.pose_dim + (self.tau + 1 + self.lookahead) * self.audio_dim
    }
}

/// Gate order: input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w: [Mat; 4],
    pub u: [Mat; 4],
    pub b: [Mat; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub w1: Mat,
    pub b1: Mat,
    pub wc: Mat,
    pub bc: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub w_in: Mat,
    pub b_in: Mat,
    pub blocks: Vec<ResidualBlock>,
    pub w_out: Mat,
    pub b_out: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder: Vec<LstmLayer>,
    pub denoiser: DenoiserParams,
}

const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

fn init_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    // uniform fan-in scaling
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

impl Model {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        for layer in 0..dims.encoder_layers {
            let input = if layer == 0 { dims.cond_dim() } else { dims.hidden };
            encoder.push(LstmLayer {
                w: std::array::from_fn(|_| init_mat(&mut rng, input, dims.hidden)),
                u: std::array::from_fn(|_| init_mat(&mut rng, dims.hidden, dims.hidden)),
                b: std::array::from_fn(|_| Mat::zeros(1, dims.hidden)),
            });
        }
        let w = dims.denoiser_width;
        let cond_in = dims.hidden + dims.step_embed_dim;
        let denoiser = DenoiserParams {
            w_in: init_mat(&mut rng, dims.pose_dim, w),
            b_in: Mat::zeros(1, w),
            blocks: (0..dims.denoiser_blocks)
                .map(|_| ResidualBlock {
                    w1: init_mat(&mut rng, w, w),
                    b1: Mat::zeros(1, w),
                    wc: init_mat(&mut rng, cond_in, w),
                    bc: Mat::zeros(1, w),
                    w2: init_mat(&mut rng, w, w),
                    b2: Mat::zeros(1, w),
                })
                .collect(),
            w_out: init_mat(&mut rng, w, dims.pose_dim),
            b_out: Mat::zeros(1, dims.pose_dim),
        };
        Model {
            dims,
            encoder,
            denoiser,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    /// Deterministically ordered (name, tensor) view of all parameters.
    pub fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (l, layer) in self.encoder.iter().enumerate() {
            for g in 0..4 {
                out.push((format!("encoder.{l}.w_{}", GATE_NAMES[g]), &layer.w[g]));
                out.push((format!("encoder.{l}.u_{}", GATE_NAMES[g]), &layer.u[g]));
                out.push((format!("encoder.{l}.b_{}", GATE_NAMES[g]), &layer.b[g]));
            }
        }
        out.push(("denoiser.w_in".into(), &self.denoiser.w_in));
        out.push(("denoiser.b_in".into(), &self.denoiser.b_in));
        for (i, blk) in self.denoiser.blocks.iter().enumerate() {
            out.push((format!("denoiser.{i}.w1"), &blk.w1));
            out.push((format!("denoiser.{i}.b1"), &blk.b1));
            out.push((format!("denoiser.{i}.wc"), &blk.wc));
            out.push((format!("denoiser.{i}.bc"), &blk.bc));
            out.push((format!("denoiser.{i}.w2"), &blk.w2));
            out.push((format!("denoiser.{i}.b2"), &blk.b2));
        }
        out.push(("denoiser.w_out".into(), &self.denoiser.w_out));
        out.push(("denoiser.b_out".into(), &self.denoiser.b_out));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            let (ws, us, bs) = (&mut layer.w, &mut layer.u, &mut layer.b);
            for (g, (w, (u, b))) in ws
                .iter_mut()
                .zip(us.iter_mut().zip(bs.iter_mut()))
                .enumerate()
            {
                out.push((format!("encoder.{l}.w_{}", GATE_NAMES[g]), w));
                out.push((format!("encoder.{l}.u_{}", GATE_NAMES[g]), u));
                out.push((format!("encoder.{l}.b_{}", GATE_NAMES[g]), b));
            }
        }
        out.push(("denoiser.w_in".into(), &mut self.denoiser.w_in));
        out.push(("denoiser.b_in".into(), &mut self.denoiser.b_in));
        for (i, blk) in self.denoiser.blocks.iter_mut().enumerate() {
            out.push((format!("denoiser.{i}.w1"), &mut blk.w1));
            out.push((format!("denoiser.{i}.b1"), &mut blk.b1));
            out.push((format!("denoiser.{i}.wc"), &mut blk.wc));
            out.push((format!("denoiser.{i}.bc"), &mut blk.bc));
            out.push((format!("denoiser.{i}.w2"), &mut blk.w2));
            out.push((format!("denoiser.{i}.b2"), &mut blk.b2));
        }
        out.push(("denoiser.w_out".into(), &mut self.denoiser.w_out));
        out.push(("denoiser.b_out".into(), &mut self.denoiser.b_out));
        out
    }
}

/// Sinusoidal embedding of the diffusion step index.
pub fn step_embedding(n: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[2 * i] = (n as f64 * freq).sin();
        out[2 * i + 1] = (n as f64 * freq).cos();
    }
    out
}

/// Parameter leaves registered on a tape, mirroring [`Model`]. `all` is in
/// [`Model::named_params`] order so gradients line up with the optimizer.
pub struct ModelVars {
    pub all: Vec<Var>,
    pub encoder: Vec<[[Var; 4]; 3]>,
    pub den_w_in: Var,
    pub den_b_in: Var,
    pub den_blocks: Vec<[Var; 6]>,
    pub den_w_out: Var,
    pub den_b_out: Var,
}

pub fn register_model(tape: &mut Tape, model: &Model) -> ModelVars {
    let mut all = Vec::new();
    let mut encoder = Vec::new();
    for layer in &model.encoder {
        let mut vars = [[Var::default(); 4]; 3];
        for g in 0..4 {
            let w = tape.leaf(layer.w[g].clone());
            let u = tape.leaf(layer.u[g].clone());
            let b = tape.leaf(layer.b[g].clone());
            all.extend([w, u, b]);
            vars[0][g] = w;
            vars[1][g] = u;
            vars[2][g] = b;
        }
        encoder.push(vars);
    }
    let den_w_in = tape.leaf(model.denoiser.w_in.clone());
    let den_b_in = tape.leaf(model.denoiser.b_in.clone());
    all.extend([den_w_in, den_b_in]);
    let mut den_blocks = Vec::new();
    for blk in &model.denoiser.blocks {
        let vars = [
            tape.leaf(blk.w1.clone()),
            tape.leaf(blk.b1.clone()),
            tape.leaf(blk.wc.clone()),
            tape.leaf(blk.bc.clone()),
            tape.leaf(blk.w2.clone()),
            tape.leaf(blk.b2.clone()),
        ];
        all.extend(vars);
        den_blocks.push(vars);
    }
    let den_w_out = tape.leaf(model.denoiser.w_out.clone());
    let den_b_out = tape.leaf(model.denoiser.b_out.clone());
    all.extend([den_w_out, den_b_out]);
    ModelVars {
        all,
        encoder,
        den_w_in,
        den_b_in,
        den_blocks,
        den_w_out,
        den_b_out,
    }
}

/// Per-layer hidden and cell activations, batch-rows.
#[derive(Clone, Copy)]
pub struct LstmStateVars {
    pub h: Var,
    pub c: Var,
}

pub fn zero_state(tape: &mut Tape, layers: usize, batch: usize, hidden: usize) -> Vec<LstmStateVars> {
    (0..layers)
        .map(|_| LstmStateVars {
            h: tape.leaf(Mat::zeros(batch, hidden)),
            c: tape.leaf(Mat::zeros(batch, hidden)),
        })
        .collect()
}

fn lstm_gate(tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    let hu = tape.matmul(h, u);
    let s = tape.add(xw, hu);
    tape.add_bias(s, b)
}

/// One LSTM cell update on the tape. Returns the new (h, c).
pub fn lstm_step(
    tape: &mut Tape,
    layer: &[[Var; 4]; 3],
    x: Var,
    state: LstmStateVars,
) -> LstmStateVars {
    let [w, u, b] = layer;
    let pre_i = lstm_gate(tape, x, state.h, w[0], u[0], b[0]);
    let pre_f = lstm_gate(tape, x, state.h, w[1], u[1], b[1]);
    let pre_g = lstm_gate(tape, x, state.h, w[2], u[2], b[2]);
    let pre_o = lstm_gate(tape, x, state.h, w[3], u[3], b[3]);
    let i = tape.sigmoid(pre_i);
    let f = tape.sigmoid(pre_f);
    let g = tape.tanh(pre_g);
    let o = tape.sigmoid(pre_o);
    let fc = tape.mul(f, state.c);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    LstmStateVars { h, c }
}

/// One encoder update over the flattened conditioning vector: the stacked
/// LSTM consumes `cond` and each layer feeds the next. Functional: the input
/// state is untouched. Returns the new per-layer states; the top h is the
/// conditioning handed to the denoiser.
pub fn encode_step(
    tape: &mut Tape,
    vars: &ModelVars,
    cond: Var,
    state: &[LstmStateVars],
) -> Vec<LstmStateVars> {
    assert_eq!(state.len(), vars.encoder.len(), "encoder state layer count");
    let mut out = Vec::with_capacity(state.len());
    let mut x = cond;
    for (layer, st) in vars.encoder.iter().zip(state) {
        let next = lstm_step(tape, layer, x, *st);
        x = next.h;
        out.push(next);
    }
    out
}

/// Denoiser forward pass on the tape for a batch of rows: `xn` is `(B, D)`,
/// `h` is `(B, hidden)`, and `ns[b]` is row b's diffusion step.
pub fn denoiser_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    dims: &ModelDims,
    xn: Var,
    h: Var,
    ns: &[usize],
) -> Var {
    let batch = ns.len();
    let mut emb = Mat::zeros(batch, dims.step_embed_dim);
    for (b, &n) in ns.iter().enumerate() {
        emb.row_mut(b)
            .copy_from_slice(&step_embedding(n, dims.step_embed_dim));
    }
    let emb = tape.leaf(emb);
    let cond_in = tape.concat_cols(&[h, emb]);
    let xi = tape.matmul(xn, vars.den_w_in);
    let mut x = tape.add_bias(xi, vars.den_b_in);
    for blk in &vars.den_blocks {
        let [w1, b1, wc, bc, w2, b2] = *blk;
        let cw = tape.matmul(cond_in, wc);
        let cond = tape.add_bias(cw, bc);
        let xw = tape.matmul(x, w1);
        let xwb = tape.add_bias(xw, b1);
        let pre = tape.add(xwb, cond);
        let z = tape.tanh(pre);
        let zw = tape.matmul(z, w2);
        let zwb = tape.add_bias(zw, b2);
        x = tape.add(x, zwb);
    }
    let out = tape.matmul(x, vars.den_w_out);
    tape.add_bias(out, vars.den_b_out)
}

// ---------------------------------------------------------------------------
// Numeric (tape-free) forward paths for inference.

/// Numeric LSTM hidden/cell state, one `(1, hidden)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub h: Vec<Mat>,
    pub c: Vec<Mat>,
}

impl EncoderState {
    pub fn zeros(dims: &ModelDims) -> Self {
        EncoderState {
            h: (0..dims.encoder_layers)
                .map(|_| Mat::zeros(1, dims.hidden))
                .collect(),
            c: (0..dims.encoder_layers)
                .map(|_| Mat::zeros(1, dims.hidden))
                .collect(),
        }
    }

    /// Hidden state of the top layer, the denoiser conditioning vector.
    pub fn top_hidden(&self) -> &[f64] {
        self.h.last().expect("at least one layer").row(0)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Model {
    /// Numeric encoder update; functional counterpart of [`encode_step`].
    pub fn encode_step_numeric(&self, cond: &[f64], state: &EncoderState) -> EncoderState {
        assert_eq!(cond.len(), self.dims.cond_dim(), "conditioning width");
        let mut out = EncoderState {
            h: Vec::with_capacity(self.encoder.len()),
            c: Vec::with_capacity(self.encoder.len()),
        };
        let mut x = Mat::row_vec(cond);
        for (l, layer) in self.encoder.iter().enumerate() {
            let gates: Vec<Mat> = (0..4)
                .map(|g| {
                    let mut pre = x.matmul(&layer.w[g]).add(&state.h[l].matmul(&layer.u[g]));
                    for (v, b) in pre.data_mut().iter_mut().zip(layer.b[g].data()) {
                        *v += b;
                    }
                    pre
                })
                .collect();
            let i = gates[0].map(sigmoid);
            let f = gates[1].map(sigmoid);
            let g = gates[2].map(f64::tanh);
            let o = gates[3].map(sigmoid);
            let c = f.zip(&state.c[l], |a, b| a * b).add(&i.zip(&g, |a, b| a * b));
            let h = o.zip(&c.map(f64::tanh), |a, b| a * b);
            x = h.clone();
            out.h.push(h);
            out.c.push(c);
        }
        out
    }

    /// Numeric denoiser forward for one vector.
    pub fn predict_noise(&self, xn: &[f64], h: &[f64], n: usize) -> Vec<f64> {
        let dims = &self.dims;
        assert_eq!(xn.len(), dims.pose_dim, "xn width");
        assert_eq!(h.len(), dims.hidden, "hidden width");
        let emb = step_embedding(n, dims.step_embed_dim);
        let mut cond_in = Vec::with_capacity(h.len() + emb.len());
        cond_in.extend_from_slice(h);
        cond_in.extend_from_slice(&emb);
        let cond_in = Mat::row_vec(&cond_in);
        let mut x = Mat::row_vec(xn).matmul(&self.denoiser.w_in);
        add_bias_inplace(&mut x, &self.denoiser.b_in);
        for blk in &self.denoiser.blocks {
            let mut cond = cond_in.matmul(&blk.wc);
            add_bias_inplace(&mut cond, &blk.bc);
            let mut pre = x.matmul(&blk.w1);
            add_bias_inplace(&mut pre, &blk.b1);
            let z = pre.add(&cond).map(f64::tanh);
            let mut delta = z.matmul(&blk.w2);
            add_bias_inplace(&mut delta, &blk.b2);
            x = x.add(&delta);
        }
        let mut out = x.matmul(&self.denoiser.w_out);
        add_bias_inplace(&mut out, &self.denoiser.b_out);
        out.data().to_vec()
    }
}

fn add_bias_inplace(x: &mut Mat, b: &Mat) {
    for (v, bv) in x.data_mut().iter_mut().zip(b.data()) {
        *v += bv;
    }
}

impl Denoiser for Model {
    fn predict_noise(&self, xn: &[f64], h: &[f64], n: usize) -> Vec<f64> {
        Model::predict_noise(self, xn, h, n)
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Clone, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub params: AdamParams,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(model: &Model, params: AdamParams) -> Self {
        let shapes: Vec<Mat> = model
            .named_params()
            .iter()
            .map(|(_, p)| Mat::zeros(p.rows(), p.cols()))
            .collect();
        AdamState {
            params,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }
}

/// Standard bias-corrected Adam update. Gradients must align with
/// [`Model::named_params`] order. A non-finite gradient anywhere skips the
/// whole step and reports which parameter produced it.
pub fn adam_update(
    model: &mut Model,
    grads: &[Mat],
    state: &mut AdamState,
) -> Result<(), ModelError> {
    let mut params = model.named_params_mut();
    if grads.len() != params.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "parameter '{name}' is {:?}, gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(ModelError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let AdamParams { lr, beta1, beta2, eps } = state.params;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for (idx, (_, p)) in params.iter_mut().enumerate() {
        let g = &grads[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint container

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
const CHECKPOINT_VERSION: u32 = 1;

fn write_mat<W: Write>(w: &mut W, m: &Mat) -> std::io::Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R) -> Result<Mat, ModelError> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows.checked_mul(cols).map_or(true, |n| n > 1 << 30) {
        return Err(ModelError::CheckpointFormat("tensor too large".into()));
    }
    let mut data = vec![0.0; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize model parameters plus optimizer state as a versioned binary
/// container keyed by tensor name.
pub fn save_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    opt: &AdamState,
    config_hash: u64,
) -> Result<(), ModelError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    let dims = &model.dims;
    for v in [
        dims.pose_dim,
        dims.audio_dim,
        dims.tau,
        dims.lookahead,
        dims.hidden,
        dims.encoder_layers,
        dims.denoiser_width,
        dims.denoiser_blocks,
        dims.step_embed_dim,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let params = model.named_params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, m) in &params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        write_mat(w, m)?;
    }
    w.write_all(&opt.step.to_le_bytes())?;
    w.write_all(&opt.params.lr.to_le_bytes())?;
    w.write_all(&opt.params.beta1.to_le_bytes())?;
    w.write_all(&opt.params.beta2.to_le_bytes())?;
    w.write_all(&opt.params.eps.to_le_bytes())?;
    for m in opt.m.iter().chain(&opt.v) {
        write_mat(w, m)?;
    }
    Ok(())
}

/// Inverse of [`save_checkpoint`]. When `expect_hash` is `Some`, a differing
/// stored hash is rejected.
pub fn load_checkpoint<R: Read>(
    r: &mut R,
    expect_hash: Option<u64>,
) -> Result<(Model, AdamState, u64), ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let hash = u64::from_le_bytes(buf8);
    if let Some(expect) = expect_hash {
        if expect != hash {
            return Err(ModelError::ConfigHashMismatch);
        }
    }
    let mut dim_vals = [0usize; 9];
    for v in &mut dim_vals {
        *v = read_u32(r)? as usize;
    }
    let dims = ModelDims {
        pose_dim: dim_vals[0],
        audio_dim: dim_vals[1],
        tau: dim_vals[2],
        lookahead: dim_vals[3],
        hidden: dim_vals[4],
        encoder_layers: dim_vals[5],
        denoiser_width: dim_vals[6],
        denoiser_blocks: dim_vals[7],
        step_embed_dim: dim_vals[8],
    };
    let mut model = Model::new(dims, 0);
    let n_tensors = read_u32(r)? as usize;
    let expected = model.named_params().len();
    if n_tensors != expected {
        return Err(ModelError::CheckpointFormat(format!(
            "{n_tensors} tensors, model wants {expected}"
        )));
    }
    for _ in 0..n_tensors {
        let mut len_buf = [0u8; 2];
        r.read_exact(&mut len_buf)?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::CheckpointFormat("tensor name not utf-8".into()))?;
        let mat = read_mat(r)?;
        let mut found = false;
        for (pname, p) in model.named_params_mut() {
            if pname == name {
                if p.shape() != mat.shape() {
                    return Err(ModelError::CheckpointFormat(format!(
                        "tensor '{name}' shape {:?} does not fit {:?}",
                        mat.shape(),
                        p.shape()
                    )));
                }
                *p = mat.clone();
                found = true;
                break;
            }
        }
        if !found {
            return Err(ModelError::CheckpointFormat(format!(
                "unknown tensor '{name}'"
            )));
        }
    }
    r.read_exact(&mut buf8)?;
    let step = u64::from_le_bytes(buf8);
    let mut adam_params = AdamParams::default();
    for slot in [
        &mut adam_params.lr,
        &mut adam_params.beta1,
        &mut adam_params.beta2,
        &mut adam_params.eps,
    ] {
        r.read_exact(&mut buf8)?;
        *slot = f64::from_le_bytes(buf8);
    }
    let mut opt = AdamState::new(&model, adam_params);
    opt.step = step;
    for slot in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        *slot = read_mat(r)?;
    }
    Ok((model, opt, hash))
}

/// Extract gradients in parameter order from a backward sweep; parameters
/// the loss does not touch get zero gradients.
pub fn collect_gradients(
    tape: &Tape,
    grads: &crate::autodiff::Gradients,
    vars: &ModelVars,
) -> Vec<Mat> {
    vars.all
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| {
                    let val = tape.value(v);
                    Mat::zeros(val.rows(), val.cols())
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleShape};

    fn toy_dims() -> ModelDims {
        ModelDims {
            pose_dim: 3,
            audio_dim: 2,
            tau: 2,
            lookahead: 1,
            hidden: 4,
            encoder_layers: 2,
            denoiser_width: 16,
            denoiser_blocks: 2,
            step_embed_dim: 8,
        }
    }

    fn zeroed(dims: ModelDims) -> Model {
        let mut m = Model::new(dims, 1);
        for (_, p) in m.named_params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        m
    }

    #[test]
    fn zero_model_encodes_zero_input_to_zero() {
        let model = zeroed(toy_dims());
        let cond = vec![0.0; model.dims.cond_dim()];
        let state = model.encode_step_numeric(&cond, &EncoderState::zeros(&model.dims));
        assert!(state.top_hidden().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_step_is_deterministic_and_functional() {
        let model = Model::new(toy_dims(), 5);
        let cond: Vec<f64> = (0..model.dims.cond_dim()).map(|i| (i as f64) / 10.0).collect();
        let init = EncoderState::zeros(&model.dims);
        let a = model.encode_step_numeric(&cond, &init);
        let b = model.encode_step_numeric(&cond, &init);
        assert_eq!(a, b);
        assert!(init.h.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
    }

    /// Hand-rolled gate equations on a single 2-unit cell.
    #[test]
    fn lstm_matches_explicit_gate_equations() {
        let dims = ModelDims {
            pose_dim: 1,
            audio_dim: 1,
            tau: 1,
            lookahead: 0,
            hidden: 2,
            encoder_layers: 1,
            denoiser_width: 4,
            denoiser_blocks: 1,
            step_embed_dim: 2,
        };
        let model = Model::new(dims, 9);
        let cond = vec![0.7, -0.3, 0.1]; // tau*1 + 2*1 = 3
        let state = model.encode_step_numeric(&cond, &EncoderState::zeros(&dims));
        let layer = &model.encoder[0];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for unit in 0..2 {
            let pre = |g: usize| -> f64 {
                let mut acc = layer.b[g].row(0)[unit];
                for (k, c) in cond.iter().enumerate() {
                    acc += c * layer.w[g][(k, unit)];
                }
                acc // h_prev = 0, so the U term vanishes
            };
            let i = sig(pre(0));
            let f = pre(1); // unused with c_prev = 0, kept for clarity
            let _ = f;
            let g = pre(2).tanh();
            let o = sig(pre(3));
            let c = i * g;
            let h = o * c.tanh();
            assert!((state.h[0].row(0)[unit] - h).abs() < 1e-10);
            assert!((state.c[0].row(0)[unit] - c).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_and_numeric_forward_agree() {
        let model = Model::new(toy_dims(), 3);
        let dims = model.dims;
        let cond: Vec<f64> = (0..dims.cond_dim()).map(|i| (i as f64 * 0.13).sin()).collect();
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, &model);
        let cond_var = tape.leaf(Mat::row_vec(&cond));
        let state = zero_state(&mut tape, dims.encoder_layers, 1, dims.hidden);
        let new_state = encode_step(&mut tape, &vars, cond_var, &state);
        let numeric = model.encode_step_numeric(&cond, &EncoderState::zeros(&dims));
        let tape_h = tape.value(new_state.last().unwrap().h).clone();
        for (a, b) in tape_h.data().iter().zip(numeric.top_hidden()) {
            assert!((a - b).abs() < 1e-12);
        }
        // denoiser paths
        let xn = vec![0.5, -0.5, 0.25];
        let h: Vec<f64> = numeric.top_hidden().to_vec();
        let xn_var = tape.leaf(Mat::row_vec(&xn));
        let h_var = tape.leaf(Mat::row_vec(&h));
        let out = denoiser_forward(&mut tape, &vars, &dims, xn_var, h_var, &[7]);
        let numeric_out = model.predict_noise(&xn, &h, 7);
        for (a, b) in tape.value(out).data().iter().zip(&numeric_out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_denoiser_outputs_zero() {
        let model = zeroed(toy_dims());
        let out = model.predict_noise(&[1.0, 2.0, 3.0], &[0.5; 4], 5);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_embedding_distinguishes_steps() {
        let model = Model::new(toy_dims(), 17);
        let xn = [0.3, -0.2, 0.9];
        let h = [0.1, 0.4, -0.4, 0.0];
        let a = model.predict_noise(&xn, &h, 1);
        let b = model.predict_noise(&xn, &h, 100);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn predict_noise_gradient_wrt_xn_matches_finite_differences() {
        let model = Model::new(toy_dims(), 23);
        let dims = model.dims;
        let xn = vec![0.4, -0.1, 0.2];
        let h = vec![0.3, -0.3, 0.5, 0.1];
        let run = |x: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars = register_model(&mut tape, &model);
            let xv = tape.leaf(Mat::row_vec(x));
            let hv = tape.leaf(Mat::row_vec(&h));
            let out = denoiser_forward(&mut tape, &vars, &dims, xv, hv, &[3]);
            let loss = tape.sum_squares(out);
            let l = tape.value(loss)[(0, 0)];
            let g = tape.backward(loss);
            (l, g.get(xv).map(|m| m.data().to_vec()))
        };
        let (_, grad) = run(&xn);
        let grad = grad.unwrap();
        let eps = 1e-5;
        for i in 0..3 {
            let mut plus = xn.clone();
            plus[i] += eps;
            let mut minus = xn.clone();
            minus[i] -= eps;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                ((fd - grad[i]) / denom).abs() < 1e-4,
                "channel {i}: fd {fd} vs {g}",
                g = grad[i]
            );
        }
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        // the complete objective on a toy model: every parameter checked
        let dims = toy_dims();
        let schedule = build_schedule(10, 1e-3, 0.1, ScheduleShape::Quartic).unwrap();
        let base = Model::new(dims, 31);
        let cond: Vec<f64> = (0..dims.cond_dim()).map(|i| (i as f64 * 0.31).cos()).collect();
        let x0 = Mat::row_vec(&[0.2, -0.6, 0.4]);
        let eps_noise = Mat::row_vec(&[0.5, 0.1, -0.7]);
        let run = |model: &Model| -> f64 {
            let mut tape = Tape::new();
            let vars = register_model(&mut tape, model);
            let cond_var = tape.leaf(Mat::row_vec(&cond));
            let state = zero_state(&mut tape, dims.encoder_layers, 1, dims.hidden);
            let state = encode_step(&mut tape, &vars, cond_var, &state);
            let h = state.last().unwrap().h;
            let loss = crate::diffusion::training_loss_term(
                &mut tape,
                &x0,
                &[4],
                &eps_noise,
                &schedule,
                |t, xn| denoiser_forward(t, &vars, &dims, xn, h, &[4]),
            )
            .unwrap();
            tape.value(loss)[(0, 0)]
        };
        // analytic gradients
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, &base);
        let cond_var = tape.leaf(Mat::row_vec(&cond));
        let state = zero_state(&mut tape, dims.encoder_layers, 1, dims.hidden);
        let state = encode_step(&mut tape, &vars, cond_var, &state);
        let h = state.last().unwrap().h;
        let loss = crate::diffusion::training_loss_term(
            &mut tape,
            &x0,
            &[4],
            &eps_noise,
            &schedule,
            |t, xn| denoiser_forward(t, &vars, &dims, xn, h, &[4]),
        )
        .unwrap();
        let grads = tape.backward(loss);
        let analytic = collect_gradients(&tape, &grads, &vars);

        let names: Vec<String> = base.named_params().iter().map(|(n, _)| n.clone()).collect();
        let fd_eps = 1e-5;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        for (pi, name) in names.iter().enumerate() {
            let len = base.named_params()[pi].1.len();
            // spot-check a few entries of each tensor
            let picks: Vec<usize> = (0..len.min(3))
                .map(|_| rand::Rng::gen_range(&mut rng, 0..len))
                .collect();
            for &ei in &picks {
                let mut plus = base.clone();
                plus.named_params_mut()[pi].1.data_mut()[ei] += fd_eps;
                let mut minus = base.clone();
                minus.named_params_mut()[pi].1.data_mut()[ei] -= fd_eps;
                let fd = (run(&plus) - run(&minus)) / (2.0 * fd_eps);
                let an = analytic[pi].data()[ei];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-3,
                    "{name}[{ei}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut model = Model::new(toy_dims(), 2);
        let before = model.clone();
        let grads: Vec<Mat> = model
            .named_params()
            .iter()
            .map(|(_, p)| Mat::zeros(p.rows(), p.cols()))
            .collect();
        let mut opt = AdamState::new(&model, AdamParams::default());
        adam_update(&mut model, &grads, &mut opt).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn adam_first_step_is_signwise_lr() {
        let mut model = zeroed(toy_dims());
        let grads: Vec<Mat> = model
            .named_params()
            .iter()
            .map(|(_, p)| {
                Mat::from_vec(
                    p.rows(),
                    p.cols(),
                    (0..p.len()).map(|i| if i % 2 == 0 { 0.5 } else { -2.0 }).collect(),
                )
            })
            .collect();
        let mut opt = AdamState::new(&model, AdamParams::default());
        adam_update(&mut model, &grads, &mut opt).unwrap();
        let lr = opt.params.lr;
        for (_, p) in model.named_params() {
            for (i, v) in p.data().iter().enumerate() {
                let expect = if i % 2 == 0 { -lr } else { lr };
                assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut model = Model::new(toy_dims(), 2);
        let before = model.clone();
        let mut grads: Vec<Mat> = model
            .named_params()
            .iter()
            .map(|(_, p)| Mat::zeros(p.rows(), p.cols()))
            .collect();
        grads[0].data_mut()[0] = f64::NAN;
        let mut opt = AdamState::new(&model, AdamParams::default());
        assert!(matches!(
            adam_update(&mut model, &grads, &mut opt),
            Err(ModelError::NonFiniteGradient(_))
        ));
        assert_eq!(model, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // treat every parameter entry as an independent quadratic 0.5 x^2
        let dims = toy_dims();
        let mut model = Model::new(dims, 11);
        // normalize all params to a unit-norm start
        let norm: f64 = model
            .named_params()
            .iter()
            .map(|(_, p)| p.sum_squares())
            .sum::<f64>()
            .sqrt();
        for (_, p) in model.named_params_mut() {
            for v in p.data_mut() {
                *v /= norm;
            }
        }
        let mut opt = AdamState::new(&model, AdamParams { lr: 0.01, ..AdamParams::default() });
        for _ in 0..200 {
            let grads: Vec<Mat> = model.named_params().iter().map(|(_, p)| (*p).clone()).collect();
            adam_update(&mut model, &grads, &mut opt).unwrap();
        }
        let norm: f64 = model
            .named_params()
            .iter()
            .map(|(_, p)| p.sum_squares())
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-2, "norm after 200 steps: {norm}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::new(toy_dims(), 19);
        let mut opt = AdamState::new(&model, AdamParams::default());
        opt.step = 42;
        opt.m[0].data_mut()[0] = 0.123456789;
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, &opt, 0xDEADBEEF).unwrap();
        let (model2, opt2, hash) = load_checkpoint(&mut buf.as_slice(), None).unwrap();
        assert_eq!(hash, 0xDEADBEEF);
        assert_eq!(model, model2);
        assert_eq!(opt.step, opt2.step);
        assert_eq!(opt.m, opt2.m);
        assert_eq!(opt.v, opt2.v);
    }

    #[test]
    fn checkpoint_hash_mismatch_rejected() {
        let model = Model::new(toy_dims(), 19);
        let opt = AdamState::new(&model, AdamParams::default());
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model, &opt, 1).unwrap();
        assert!(matches!(
            load_checkpoint(&mut buf.as_slice(), Some(2)),
            Err(ModelError::ConfigHashMismatch)
        ));
    }

    #[test]
    fn sequence_encoding_equals_threaded_single_steps() {
        let model = Model::new(toy_dims(), 29);
        let dims = model.dims;
        let conds: Vec<Vec<f64>> = (0..5)
            .map(|t| (0..dims.cond_dim()).map(|i| ((t * 31 + i) as f64 * 0.17).sin()).collect())
            .collect();
        // threaded single steps
        let mut st = EncoderState::zeros(&dims);
        let mut threaded = Vec::new();
        for c in &conds {
            st = model.encode_step_numeric(c, &st);
            threaded.push(st.top_hidden().to_vec());
        }
        // the same loop again must be bitwise identical
        let mut st2 = EncoderState::zeros(&dims);
        for (t, c) in conds.iter().enumerate() {
            st2 = model.encode_step_numeric(c, &st2);
            assert_eq!(threaded[t], st2.top_hidden().to_vec());
        }
    }
}
