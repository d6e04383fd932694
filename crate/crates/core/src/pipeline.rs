//! End-to-end orchestration: run configuration, data preparation, training
//! with early stopping, autoregressive synthesis with sliding windows and
//! smoothing, evaluation, and the diffusion-step ablation.

use crate::audio::{load_wav, mfps, AudioClip, MfpsParams};
use crate::autodiff::Tape;
use crate::dataset::{
    build_dataset, Dataset, NormStats, TrainingSample,
};
use crate::diffusion::{sample_frame, training_loss_term, Denoiser};
use crate::linalg::Mat;
use crate::metrics::{
    bcs, default_pck_delta, detect_audio_beats, detect_motion_beats, diversity, l1_distance, pck,
    MetricReport, TimingReport,
};
use crate::model::{
    adam_update, collect_gradients, denoiser_forward, encode_step, register_model, zero_state,
    AdamParams, AdamState, EncoderState, Model, ModelDims,
};
use crate::motion::{
    bvh::{parse_bvh, write_bvh},
    document_to_pose, forward_kinematics, resample, select_upper_body,
    PoseSequence, PositionSequence, Skeleton,
};
use crate::rngutil;
use crate::schedule::{build_schedule, ScheduleShape, VarianceSchedule};
use crate::smoothing::sg_smooth;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: motion lasts {motion_secs:.3}s but audio only {audio_secs:.3}s")]
    AudioShorterThanMotion {
        path: String,
        motion_secs: f64,
        audio_secs: f64,
    },
    #[error("audio too short: {have} feature frames for {need} output frames")]
    AudioTooShort { need: usize, have: usize },
    #[error("takes use different skeletons: '{0}' vs '{1}'")]
    SkeletonMismatch(String, String),
    #[error("non-finite loss at epoch {epoch} (batch {batch})")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{context}: {source}")]
    Motion {
        context: String,
        source: crate::motion::MotionError,
    },
    #[error("{context}: {source}")]
    Audio {
        context: String,
        source: crate::audio::AudioError,
    },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Smoothing(#[from] crate::smoothing::SmoothingError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn motion_err(context: impl Into<String>) -> impl FnOnce(crate::motion::MotionError) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Motion { context, source }
}

fn audio_err(context: impl Into<String>) -> impl FnOnce(crate::audio::AudioError) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Audio { context, source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TakePaths {
    pub bvh: String,
    pub wav: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub takes: Vec<TakePaths>,
    /// Joint names to keep (with everything below them); empty keeps all.
    pub joints: Vec<String>,
    pub fps: f64,
    pub window: usize,
    pub stride: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            takes: Vec::new(),
            joints: Vec::new(),
            fps: 20.0,
            window: 80,
            stride: 40,
            split_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub tau: usize,
    pub lookahead: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub denoiser_width: usize,
    pub denoiser_blocks: usize,
    pub step_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tau: 10,
            lookahead: 20,
            hidden: 512,
            encoder_layers: 2,
            denoiser_width: 256,
            denoiser_blocks: 4,
            step_embed_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1,
            shape: ScheduleShape::Quartic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 80,
            learning_rate: 1.5e-3,
            max_epochs: 50,
            patience: 10,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// When set, each frame is the per-channel `q`-quantile over
    /// `candidates` independent draws instead of a single draw.
    pub quantile: bool,
    pub candidates: usize,
    pub q: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            quantile: false,
            candidates: 5,
            q: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub window: usize,
    pub order: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            window: 31,
            order: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub bcs_sigma: f64,
    pub diversity_clip_len: usize,
    /// Absolute PCK threshold; when absent, 10% of the reference's mean
    /// span between `pck_span_joints` is used.
    pub pck_delta: Option<f64>,
    pub pck_span_joints: Option<[String; 2]>,
    pub runs: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bcs_sigma: 0.1,
            diversity_clip_len: 20,
            pck_delta: None,
            pck_span_joints: None,
            runs: 20,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub smoothing: SmoothingConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the serialized config, stored in checkpoints so a
    /// checkpoint cannot silently be reused under different settings.
    pub fn hash(&self) -> u64 {
        let digest = sha2::Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |msg: &str| Err(PipelineError::Config(msg.into()));
        if self.data.fps <= 0.0 {
            return err("fps must be positive");
        }
        if self.data.window == 0 || self.data.stride == 0 {
            return err("window and stride must be positive");
        }
        if self.model.tau == 0 {
            return err("tau must be positive");
        }
        if self.model.lookahead + self.model.tau + 1 > self.data.window {
            return err("lookahead + tau + 1 must not exceed the window length");
        }
        if self.model.hidden == 0
            || self.model.encoder_layers == 0
            || self.model.denoiser_width == 0
            || self.model.denoiser_blocks == 0
            || self.model.step_embed_dim == 0
        {
            return err("model dimensions must be positive");
        }
        if self.schedule.steps == 0 {
            return err("schedule needs at least one step");
        }
        if self.training.batch_size == 0 || self.training.max_epochs == 0 {
            return err("batch size and epoch count must be positive");
        }
        if self.training.learning_rate <= 0.0 {
            return err("learning rate must be positive");
        }
        if self.sampler.candidates == 0 {
            return err("sampler needs at least one candidate");
        }
        if !(self.sampler.q > 0.0 && self.sampler.q < 1.0) {
            return err("quantile q must lie strictly between 0 and 1");
        }
        if self.smoothing.window % 2 == 0 || self.smoothing.order >= self.smoothing.window {
            return err("smoothing window must be odd and larger than the order");
        }
        if self.metrics.bcs_sigma <= 0.0 || self.metrics.diversity_clip_len == 0 || self.metrics.runs == 0 {
            return err("metric parameters must be positive");
        }
        Ok(())
    }

    pub fn model_dims(&self, pose_dim: usize, audio_dim: usize) -> ModelDims {
        ModelDims {
            pose_dim,
            audio_dim,
            tau: self.model.tau,
            lookahead: self.model.lookahead,
            hidden: self.model.hidden,
            encoder_layers: self.model.encoder_layers,
            denoiser_width: self.model.denoiser_width,
            denoiser_blocks: self.model.denoiser_blocks,
            step_embed_dim: self.model.step_embed_dim,
        }
    }

    pub fn build_schedule(&self) -> Result<VarianceSchedule, PipelineError> {
        Ok(build_schedule(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.shape,
        )?)
    }

    pub fn mfps_params(&self) -> MfpsParams {
        MfpsParams::default()
    }
}

// ---------------------------------------------------------------------------
// Preparation

#[derive(Debug)]
pub struct PreparedData {
    pub skeleton: Skeleton,
    pub dataset: Dataset,
}

/// Process one take: parse, optionally select a sub-skeleton, convert to
/// exponential-map channels, resample to the target fps, extract acoustic
/// features, and align frame counts. Audio shorter than motion is an error;
/// longer audio is truncated.
pub fn prepare_take(
    bvh_text: &str,
    wav_bytes: &[u8],
    cfg: &RunConfig,
    label: &str,
) -> Result<(Skeleton, Mat, Mat), PipelineError> {
    let doc = parse_bvh(bvh_text).map_err(motion_err(label))?;
    let pose = document_to_pose(&doc).map_err(motion_err(label))?;
    let (skeleton, pose) = if cfg.data.joints.is_empty() {
        (doc.skeleton.clone(), pose)
    } else {
        select_upper_body(&doc.skeleton, &pose, &cfg.data.joints).map_err(motion_err(label))?
    };
    let pose = resample(&pose, cfg.data.fps).map_err(motion_err(label))?;
    let clip = load_wav(wav_bytes).map_err(audio_err(label))?;
    let feats = mfps(&clip, cfg.data.fps, &cfg.mfps_params()).map_err(audio_err(label))?;
    let (t_pose, t_audio) = (pose.num_frames(), feats.num_frames());
    if t_audio < t_pose {
        return Err(PipelineError::AudioShorterThanMotion {
            path: label.into(),
            motion_secs: t_pose as f64 / cfg.data.fps,
            audio_secs: clip.duration_secs(),
        });
    }
    let mut audio = Mat::zeros(t_pose, feats.channels());
    for t in 0..t_pose {
        audio.row_mut(t).copy_from_slice(feats.frames.row(t));
    }
    Ok((skeleton, pose.frames, audio))
}

fn quantize(m: &Mat) -> Mat {
    m.map(|v| v as f32 as f64)
}

/// Build the standardized dataset from in-memory take sources.
pub fn prepare_from_sources(
    sources: &[(String, Vec<u8>, String)],
    cfg: &RunConfig,
) -> Result<PreparedData, PipelineError> {
    if sources.is_empty() {
        return Err(PipelineError::Config("no takes listed".into()));
    }
    let mut skeleton: Option<Skeleton> = None;
    let mut takes = Vec::new();
    for (bvh_text, wav_bytes, label) in sources {
        let (skel, poses, audio) = prepare_take(bvh_text, wav_bytes, cfg, label)?;
        match &skeleton {
            None => skeleton = Some(skel),
            Some(existing) => {
                if existing.joints.len() != skel.joints.len()
                    || existing
                        .joints
                        .iter()
                        .zip(&skel.joints)
                        .any(|(a, b)| a.name != b.name)
                {
                    return Err(PipelineError::SkeletonMismatch(
                        existing.joints[0].name.clone(),
                        label.clone(),
                    ));
                }
            }
        }
        takes.push((poses, audio));
    }
    let mut dataset = build_dataset(
        &takes,
        cfg.data.window,
        cfg.data.stride,
        cfg.data.fps,
        cfg.data.split_seed,
    )?;
    // persist samples in standardized space, re-quantized so the f32
    // container stays bit-exact
    for s in &mut dataset.samples {
        s.poses = quantize(&dataset.stats.standardize_pose(&s.poses)?);
        s.acoustics = quantize(&dataset.stats.standardize_audio(&s.acoustics)?);
    }
    Ok(PreparedData {
        skeleton: skeleton.expect("at least one take"),
        dataset,
    })
}

/// Path-based wrapper: read the configured takes and persist the dataset
/// directory plus the skeleton and a frozen copy of the config.
pub fn cmd_prepare(cfg: &RunConfig, out_dir: &std::path::Path) -> Result<PreparedData, PipelineError> {
    let mut sources = Vec::new();
    for take in &cfg.data.takes {
        let bvh_text = std::fs::read_to_string(&take.bvh)?;
        let wav_bytes = std::fs::read(&take.wav)?;
        sources.push((bvh_text, wav_bytes, take.bvh.clone()));
    }
    let prepared = prepare_from_sources(&sources, cfg)?;
    std::fs::create_dir_all(out_dir)?;
    crate::dataset::save_dataset(out_dir, &prepared.dataset)?;
    let zero_pose = PoseSequence {
        frames: Mat::zeros(1, 3 * prepared.skeleton.num_joints()),
        fps: cfg.data.fps,
    };
    let skeleton_text =
        write_bvh(&prepared.skeleton, &zero_pose).map_err(motion_err("skeleton"))?;
    std::fs::write(out_dir.join("skeleton.bvh"), skeleton_text)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(prepared)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub opt: AdamState,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Count of optimizer steps skipped because of non-finite gradients.
    pub skipped_steps: usize,
}

/// Flatten the conditioning for frame `t` of one window: poses `t-tau..t`
/// then acoustics `t-tau..=t+r`, zero-padded where the window has no frames.
fn build_cond_row(
    poses: &Mat,
    acoustics: &Mat,
    t: usize,
    tau: usize,
    r: usize,
    out: &mut [f64],
) {
    let (d, a) = (poses.cols(), acoustics.cols());
    debug_assert!(t >= tau);
    debug_assert_eq!(out.len(), tau * d + (tau + 1 + r) * a);
    let mut at = 0;
    for f in t - tau..t {
        out[at..at + d].copy_from_slice(poses.row(f));
        at += d;
    }
    for f in t - tau..=t + r {
        if f < acoustics.rows() {
            out[at..at + a].copy_from_slice(acoustics.row(f));
        } else {
            out[at..at + a].fill(0.0);
        }
        at += a;
    }
}

/// Mean per-element noise-prediction loss over one batch of windows,
/// teacher-forced across frames `tau..window`. Returns the loss and, when
/// `train` is set, gradients in parameter order.
fn batch_loss(
    model: &Model,
    batch: &[&TrainingSample],
    schedule: &VarianceSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
    train: bool,
) -> Result<(f64, Option<Vec<Mat>>), PipelineError> {
    let dims = model.dims;
    let (tau, r) = (dims.tau, dims.lookahead);
    let window = batch[0].poses.rows();
    let b = batch.len();
    let mut tape = Tape::new();
    let vars = register_model(&mut tape, model);
    let mut state = zero_state(&mut tape, dims.encoder_layers, b, dims.hidden);
    let mut terms = Vec::new();
    for t in tau..window {
        let mut cond = Mat::zeros(b, dims.cond_dim());
        for (row, s) in batch.iter().enumerate() {
            build_cond_row(&s.poses, &s.acoustics, t, tau, r, cond.row_mut(row));
        }
        let cond = tape.leaf(cond);
        state = encode_step(&mut tape, &vars, cond, &state);
        let h = state.last().unwrap().h;
        let mut x0 = Mat::zeros(b, dims.pose_dim);
        for (row, s) in batch.iter().enumerate() {
            x0.row_mut(row).copy_from_slice(s.poses.row(t));
        }
        let ns: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.len())).collect();
        let mut eps = Mat::zeros(b, dims.pose_dim);
        for v in eps.data_mut() {
            *v = rngutil::standard_normal(rng);
        }
        let term = training_loss_term(&mut tape, &x0, &ns, &eps, schedule, |tp, xn| {
            denoiser_forward(tp, &vars, &dims, xn, h, &ns)
        })?;
        terms.push(term);
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term);
    }
    let denom = (b * dims.pose_dim * (window - tau)) as f64;
    let loss = tape.scale(total, 1.0 / denom);
    let loss_value = tape.value(loss)[(0, 0)];
    if !train {
        return Ok((loss_value, None));
    }
    let grads = tape.backward(loss);
    Ok((loss_value, Some(collect_gradients(&tape, &grads, &vars))))
}

fn epoch_loss_over(
    model: &Model,
    samples: &[&TrainingSample],
    batch_size: usize,
    schedule: &VarianceSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in samples.chunks(batch_size) {
        let (loss, _) = batch_loss(model, chunk, schedule, rng, false)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Train with early stopping on validation loss; the best-validation model
/// is the one returned. When the dataset has no validation split, training
/// loss doubles as the stopping signal.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    schedule: &VarianceSchedule,
) -> Result<TrainOutcome, PipelineError> {
    let train_samples = dataset.training_samples();
    if train_samples.is_empty() {
        return Err(PipelineError::Config("dataset has no training samples".into()));
    }
    let val_samples = dataset.validation_samples();
    let dims = cfg.model_dims(dataset.manifest.pose_dim, dataset.manifest.audio_dim);
    let mut model = Model::new(dims, cfg.training.seed);
    let mut opt = AdamState::new(
        &model,
        AdamParams {
            lr: cfg.training.learning_rate,
            ..AdamParams::default()
        },
    );
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.training.seed ^ 0x7261_696e);
    let mut log = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best = (model.clone(), opt.clone());
    let mut since_best = 0usize;
    let mut skipped_steps = 0usize;
    for epoch in 1..=cfg.training.max_epochs {
        let mut order: Vec<&TrainingSample> = train_samples.clone();
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.training.batch_size).enumerate() {
            let (loss, grads) = batch_loss(&model, chunk, schedule, &mut rng, true)?;
            if !loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch, batch: bi });
            }
            train_total += loss;
            batches += 1;
            match adam_update(&mut model, &grads.unwrap(), &mut opt) {
                Ok(()) => {}
                Err(crate::model::ModelError::NonFiniteGradient(_)) => skipped_steps += 1,
                Err(e) => return Err(e.into()),
            }
        }
        let train_loss = train_total / batches.max(1) as f64;
        // fixed-seed validation noise keeps epochs comparable
        let mut val_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.training.seed ^ 0x7661_6c69);
        let val_loss = if val_samples.is_empty() {
            train_loss
        } else {
            epoch_loss_over(&model, &val_samples, cfg.training.batch_size, schedule, &mut val_rng)?
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = (model.clone(), opt.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.training.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        opt: best.1,
        log,
        best_epoch,
        best_val_loss: best_val,
        skipped_steps,
    })
}

// ---------------------------------------------------------------------------
// Synthesis

/// Draw `s` independent frame candidates and keep the per-channel
/// `q`-quantile (linear interpolation between order statistics). `s = 1`
/// degenerates to plain sampling.
pub fn quantile_sample<D: Denoiser, R: Rng>(
    h: &[f64],
    denoiser: &D,
    schedule: &VarianceSchedule,
    dim: usize,
    s: usize,
    q: f64,
    rng: &mut R,
) -> Result<Vec<f64>, PipelineError> {
    assert!(s >= 1, "need at least one candidate");
    assert!(q > 0.0 && q < 1.0, "q must lie strictly between 0 and 1");
    let mut candidates = Vec::with_capacity(s);
    for _ in 0..s {
        candidates.push(sample_frame(h, denoiser, schedule, dim, rng)?);
    }
    if s == 1 {
        return Ok(candidates.pop().unwrap());
    }
    let mut out = vec![0.0; dim];
    let pos = q * (s - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s - 1);
    let frac = pos - lo as f64;
    let mut channel = vec![0.0; s];
    for (c, slot) in out.iter_mut().enumerate() {
        for (k, cand) in candidates.iter().enumerate() {
            channel[k] = cand[c];
        }
        channel.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *slot = channel[lo] * (1.0 - frac) + channel[hi] * frac;
    }
    Ok(out)
}

/// Sliding-window index ranges the encoder consumed for one frame, reported
/// to rollout observers: `(frame, pose_range, acoustic_range)`.
pub type WindowObserver<'a> = &'a mut dyn FnMut(usize, Range<usize>, Range<usize>);

/// Autoregressive rollout in standardized space. The output has `frames`
/// rows; the first `tau` hold the (standardized) neutral pose and each later
/// frame `t` is sampled conditioned on poses `t-tau..t` and acoustics
/// `t-tau..=t+lookahead`, with the lookahead zero-padded past the end of the
/// audio.
pub fn rollout<R: Rng>(
    model: &Model,
    schedule: &VarianceSchedule,
    acoustics: &Mat,
    frames: usize,
    sampler: &SamplerConfig,
    rng: &mut R,
    mut observer: Option<WindowObserver<'_>>,
) -> Result<Mat, PipelineError> {
    let dims = model.dims;
    let (tau, r) = (dims.tau, dims.lookahead);
    assert!(frames > tau, "rollout needs more frames than the seed length");
    if acoustics.rows() < frames {
        return Err(PipelineError::AudioTooShort {
            need: frames,
            have: acoustics.rows(),
        });
    }
    // standardized neutral pose is the zero vector by construction
    let mut out = Mat::zeros(frames, dims.pose_dim);
    let mut state = EncoderState::zeros(&dims);
    let mut cond = vec![0.0; dims.cond_dim()];
    for t in tau..frames {
        build_cond_row(&out, acoustics, t, tau, r, &mut cond);
        if let Some(obs) = observer.as_deref_mut() {
            obs(t, t - tau..t, t - tau..t + r + 1);
        }
        state = model.encode_step_numeric(&cond, &state);
        let h = state.top_hidden();
        let x0 = if sampler.quantile {
            quantile_sample(h, model, schedule, dims.pose_dim, sampler.candidates, sampler.q, rng)?
        } else {
            sample_frame(h, model, schedule, dims.pose_dim, rng)?
        };
        out.row_mut(t).copy_from_slice(&x0);
    }
    Ok(out)
}

/// Synthesize a pose sequence for a clip: features, standardize, rollout,
/// destandardize, smooth, and package at the configured frame rate.
pub fn synthesize(
    model: &Model,
    stats: &NormStats,
    schedule: &VarianceSchedule,
    cfg: &RunConfig,
    clip: &AudioClip,
    frames: usize,
    seed: u64,
) -> Result<PoseSequence, PipelineError> {
    let feats = mfps(clip, cfg.data.fps, &cfg.mfps_params()).map_err(audio_err("input audio"))?;
    let acoustics = stats.standardize_audio(&feats.frames)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let raw = rollout(model, schedule, &acoustics, frames, &cfg.sampler, &mut rng, None)?;
    let destd = stats.destandardize_pose(&raw)?;
    let smoothed = sg_smooth(&destd, cfg.smoothing.window, cfg.smoothing.order)?;
    Ok(PoseSequence {
        frames: smoothed,
        fps: cfg.data.fps,
    })
}

/// Synthesize and render a BVH document for the skeleton.
pub fn cmd_synthesize(
    model: &Model,
    stats: &NormStats,
    skeleton: &Skeleton,
    schedule: &VarianceSchedule,
    cfg: &RunConfig,
    clip: &AudioClip,
    frames: usize,
    seed: u64,
) -> Result<(PoseSequence, String), PipelineError> {
    let pose = synthesize(model, stats, schedule, cfg, clip, frames, seed)?;
    let text = write_bvh(skeleton, &pose).map_err(motion_err("output"))?;
    Ok((pose, text))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug)]
pub struct ItemEvaluation {
    pub label: String,
    pub mean: MetricReport,
    pub best: MetricReport,
    pub runs: usize,
}

impl ItemEvaluation {
    pub fn render(&self) -> String {
        let mut out = format!("item={}\nruns={}\n[mean]\n{}", self.label, self.runs, self.mean.render());
        out.push_str("[best]\n");
        out.push_str(&self.best.render());
        out
    }
}

fn pck_threshold(cfg: &RunConfig, skeleton: &Skeleton, reference: &PositionSequence) -> f64 {
    if let Some(delta) = cfg.metrics.pck_delta {
        return delta;
    }
    let (left, right) = match &cfg.metrics.pck_span_joints {
        Some([l, r]) => (
            skeleton.joint_index(l).unwrap_or(0),
            skeleton.joint_index(r).unwrap_or(reference.num_joints - 1),
        ),
        // fall back to the widest-apart default: first and last joints
        None => (0, reference.num_joints - 1),
    };
    let delta = default_pck_delta(reference, left, right);
    if delta > 0.0 {
        delta
    } else {
        // degenerate reference span; any positive threshold keeps pck defined
        1e-6
    }
}

/// Evaluate one held-out item: synthesize `runs` times, score each run
/// against the reference, and aggregate mean and best-per-metric.
pub fn evaluate_item(
    model: &Model,
    stats: &NormStats,
    skeleton: &Skeleton,
    schedule: &VarianceSchedule,
    cfg: &RunConfig,
    reference_bvh: &str,
    clip: &AudioClip,
    label: &str,
    seed: u64,
) -> Result<ItemEvaluation, PipelineError> {
    let doc = parse_bvh(reference_bvh).map_err(motion_err(label))?;
    let ref_pose = document_to_pose(&doc).map_err(motion_err(label))?;
    let (ref_skel, ref_pose) = if cfg.data.joints.is_empty() {
        (doc.skeleton.clone(), ref_pose)
    } else {
        select_upper_body(&doc.skeleton, &ref_pose, &cfg.data.joints).map_err(motion_err(label))?
    };
    let ref_pose = resample(&ref_pose, cfg.data.fps).map_err(motion_err(label))?;
    let ref_positions = forward_kinematics(&ref_skel, &ref_pose).map_err(motion_err(label))?;
    let frames = ref_pose.num_frames();
    let delta = pck_threshold(cfg, skeleton, &ref_positions);
    let audio_beats = detect_audio_beats(clip, cfg.data.fps, cfg.mfps_params().n_fft)?;

    let runs = cfg.metrics.runs;
    let mut l1s = Vec::with_capacity(runs);
    let mut pcks = Vec::with_capacity(runs);
    let mut bcss = Vec::with_capacity(runs);
    let mut positions = Vec::with_capacity(runs);
    for run in 0..runs {
        let pose = synthesize(model, stats, schedule, cfg, clip, frames, seed.wrapping_add(run as u64))?;
        let pos = forward_kinematics(skeleton, &pose).map_err(motion_err(label))?;
        l1s.push(l1_distance(&pos, &ref_positions)?);
        pcks.push(pck(&pos, &ref_positions, delta)?);
        let motion_beats = detect_motion_beats(&pos)?;
        bcss.push(if audio_beats.frames.is_empty() {
            0.0
        } else {
            bcs(&audio_beats, &motion_beats, cfg.metrics.bcs_sigma)?
        });
        positions.push(pos);
    }
    let div = if runs >= 2 {
        diversity(&positions, cfg.metrics.diversity_clip_len)?
    } else {
        0.0
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmin = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let fmax = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ItemEvaluation {
        label: label.into(),
        mean: MetricReport {
            l1: mean(&l1s),
            pck: mean(&pcks),
            bcs: mean(&bcss),
            diversity: div,
            timing: None,
        },
        best: MetricReport {
            l1: fmin(&l1s),
            pck: fmax(&pcks),
            bcs: fmax(&bcss),
            diversity: div,
            timing: None,
        },
        runs,
    })
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Copy, Debug)]
pub struct AblationRow {
    pub n_steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_secs: f64,
    pub synth_secs_per_frame: f64,
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("n_steps\ttrain_loss\tval_loss\ttrain_secs\tsynth_secs_per_frame\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.2}\t{:.6}\n",
            r.n_steps, r.train_loss, r.val_loss, r.train_secs, r.synth_secs_per_frame
        ));
    }
    out
}

/// Train once per diffusion-step count with a fixed epoch budget, recording
/// final losses, wall-clock training time, and synthesis time per frame.
pub fn ablate(
    cfg: &RunConfig,
    dataset: &Dataset,
    n_list: &[usize],
    synth_frames: usize,
    timing_repeats: usize,
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mut run_cfg = cfg.clone();
        run_cfg.schedule.steps = n;
        // fixed budget: disable early stopping so every N trains equally long
        run_cfg.training.patience = usize::MAX;
        let schedule = run_cfg.build_schedule()?;
        let start = std::time::Instant::now();
        let outcome = train(&run_cfg, dataset, &schedule)?;
        let train_secs = start.elapsed().as_secs_f64();
        let last = outcome.log.last().expect("at least one epoch");
        let acoustics = Mat::zeros(synth_frames, dataset.manifest.audio_dim);
        let mut seed = 0u64;
        let timing: TimingReport = crate::metrics::time_synthesis(
            || {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                seed += 1;
                rollout(
                    &outcome.model,
                    &schedule,
                    &acoustics,
                    synth_frames,
                    &run_cfg.sampler,
                    &mut rng,
                    None,
                )
                .expect("rollout on zero acoustics");
            },
            synth_frames,
            timing_repeats,
        );
        rows.push(AblationRow {
            n_steps: n,
            train_loss: last.train_loss,
            val_loss: last.val_loss,
            train_secs,
            synth_secs_per_frame: timing.mean_secs_per_frame,
        });
    }
    Ok(rows)
}
