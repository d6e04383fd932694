//! Objective evaluation: L1 joint-position distance, percentage of correct
//! keypoints, beat consistency between speech onsets and motion, diversity
//! across repeated syntheses, and wall-clock synthesis timing.

use crate::audio::{power_spectrogram, AudioClip};
use crate::motion::PositionSequence;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("position sequences differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("sequence too short: {0} frames, need at least {1}")]
    TooShort(usize, usize),
    #[error("beat consistency needs at least one audio beat")]
    NoAudioBeats,
    #[error("diversity needs at least two clips, got {0}")]
    TooFewClips(usize),
    #[error("hop does not divide the sample rate for fps {0}")]
    BadFps(f64),
}

/// Frame indices of detected beats, strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatList {
    pub frames: Vec<usize>,
    pub fps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct TimingReport {
    /// Mean wall-clock seconds per synthesized frame.
    pub mean_secs_per_frame: f64,
    /// Half-width of the normal-approximation 95% interval; `None` when
    /// only one repeat was measured.
    pub half_width: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub l1: f64,
    pub pck: f64,
    pub bcs: f64,
    pub diversity: f64,
    pub timing: Option<TimingReport>,
}

impl MetricReport {
    /// Line-oriented `key=value` rendering for report files.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("l1={:.6}\n", self.l1));
        out.push_str(&format!("pck={:.6}\n", self.pck));
        out.push_str(&format!("bcs={:.6}\n", self.bcs));
        out.push_str(&format!("diversity={:.6}\n", self.diversity));
        if let Some(t) = self.timing {
            out.push_str(&format!("synth_secs_per_frame={:.6}\n", t.mean_secs_per_frame));
            match t.half_width {
                Some(hw) => out.push_str(&format!("synth_ci95_half_width={hw:.6}\n")),
                None => out.push_str("synth_ci95_half_width=n/a\n"),
            }
        }
        out
    }
}

fn check_shapes(a: &PositionSequence, b: &PositionSequence) -> Result<(), MetricsError> {
    if a.frames.shape() != b.frames.shape() {
        return Err(MetricsError::ShapeMismatch(a.frames.shape(), b.frames.shape()));
    }
    Ok(())
}

/// Mean over frames and joints of the L1 norm of the 3D position error.
pub fn l1_distance(gen: &PositionSequence, reference: &PositionSequence) -> Result<f64, MetricsError> {
    check_shapes(gen, reference)?;
    let t_len = gen.frames.rows();
    let joints = gen.num_joints;
    let mut acc = 0.0;
    for t in 0..t_len {
        let (g, r) = (gen.frames.row(t), reference.frames.row(t));
        for j in 0..joints {
            for k in 0..3 {
                acc += (g[3 * j + k] - r[3 * j + k]).abs();
            }
        }
    }
    Ok(acc / (t_len * joints) as f64)
}

/// Fraction of (frame, joint) pairs whose Euclidean error is below `delta`.
pub fn pck(gen: &PositionSequence, reference: &PositionSequence, delta: f64) -> Result<f64, MetricsError> {
    assert!(delta > 0.0, "pck threshold must be positive");
    check_shapes(gen, reference)?;
    let t_len = gen.frames.rows();
    let joints = gen.num_joints;
    let mut hits = 0usize;
    for t in 0..t_len {
        let (g, r) = (gen.frames.row(t), reference.frames.row(t));
        for j in 0..joints {
            let d2: f64 = (0..3)
                .map(|k| (g[3 * j + k] - r[3 * j + k]).powi(2))
                .sum();
            if d2.sqrt() < delta {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (t_len * joints) as f64)
}

/// Scale-free PCK threshold: 10% of the reference's mean distance between
/// the two given joints (typically the shoulders).
pub fn default_pck_delta(reference: &PositionSequence, left: usize, right: usize) -> f64 {
    let t_len = reference.frames.rows();
    let mut span = 0.0;
    for t in 0..t_len {
        let row = reference.frames.row(t);
        let d2: f64 = (0..3)
            .map(|k| (row[3 * left + k] - row[3 * right + k]).powi(2))
            .sum();
        span += d2.sqrt();
    }
    0.1 * span / t_len as f64
}

/// Mean joint speed between consecutive frames; `speeds[i]` is the step into
/// frame `i + 1`.
fn joint_speeds(positions: &PositionSequence) -> Vec<f64> {
    let t_len = positions.frames.rows();
    let joints = positions.num_joints;
    (1..t_len)
        .map(|t| {
            let (a, b) = (positions.frames.row(t - 1), positions.frames.row(t));
            let mut acc = 0.0;
            for j in 0..joints {
                let d2: f64 = (0..3).map(|k| (b[3 * j + k] - a[3 * j + k]).powi(2)).sum();
                acc += d2.sqrt();
            }
            acc / joints as f64
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Kinematic beats: frames where the mean joint speed is a strict local
/// minimum below the sequence median speed.
pub fn detect_motion_beats(positions: &PositionSequence) -> Result<BeatList, MetricsError> {
    let t_len = positions.frames.rows();
    if t_len < 3 {
        return Err(MetricsError::TooShort(t_len, 3));
    }
    let speeds = joint_speeds(positions);
    let med = median(&speeds);
    let mut frames = Vec::new();
    for i in 1..speeds.len() - 1 {
        if speeds[i] < speeds[i - 1] && speeds[i] < speeds[i + 1] && speeds[i] < med {
            frames.push(i + 1);
        }
    }
    Ok(BeatList {
        frames,
        fps: positions.fps,
    })
}

/// Speech onsets via spectral flux: positive per-bin power increases summed
/// per frame, peaks that are strict local maxima above mean + 1 std. Frames
/// are hop-aligned with the pose stream, so indices transfer directly.
pub fn detect_audio_beats(clip: &AudioClip, fps: f64, n_fft: usize) -> Result<BeatList, MetricsError> {
    let hop_f = clip.sample_rate as f64 / fps;
    let hop = hop_f.round();
    if (hop_f - hop).abs() > 1e-9 || hop < 1.0 {
        return Err(MetricsError::BadFps(fps));
    }
    let spec = power_spectrogram(clip, hop as usize, n_fft);
    let t_len = spec.rows();
    let mut flux = vec![0.0; t_len];
    for t in 1..t_len {
        let (prev, cur) = (spec.row(t - 1), spec.row(t));
        flux[t] = cur
            .iter()
            .zip(prev)
            .map(|(c, p)| (c - p).max(0.0))
            .sum();
    }
    let mean = flux.iter().sum::<f64>() / flux.len().max(1) as f64;
    let var = flux.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / flux.len().max(1) as f64;
    let threshold = mean + var.sqrt();
    let mut frames = Vec::new();
    for t in 1..t_len.saturating_sub(1) {
        if flux[t] > threshold && flux[t] > flux[t - 1] && flux[t] > flux[t + 1] {
            frames.push(t);
        }
    }
    Ok(BeatList { frames, fps })
}

/// Mean over audio beats of a Gaussian kernel on the gap to the nearest
/// motion beat; `sigma` is in seconds.
pub fn bcs(audio_beats: &BeatList, motion_beats: &BeatList, sigma: f64) -> Result<f64, MetricsError> {
    assert!(sigma > 0.0, "bcs sigma must be positive");
    if audio_beats.frames.is_empty() {
        return Err(MetricsError::NoAudioBeats);
    }
    if motion_beats.frames.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for &a in &audio_beats.frames {
        let ta = a as f64 / audio_beats.fps;
        let nearest = motion_beats
            .frames
            .iter()
            .map(|&g| {
                let tg = g as f64 / motion_beats.fps;
                (ta - tg).powi(2)
            })
            .fold(f64::INFINITY, f64::min);
        acc += (-nearest / (2.0 * sigma * sigma)).exp();
    }
    Ok(acc / audio_beats.frames.len() as f64)
}

/// Pool non-overlapping `clip_len`-frame clips from every sequence and
/// return the mean pairwise L1 distance over all unordered clip pairs.
pub fn diversity(sequences: &[PositionSequence], clip_len: usize) -> Result<f64, MetricsError> {
    assert!(clip_len > 0, "clip length must be positive");
    let mut clips: Vec<PositionSequence> = Vec::new();
    for seq in sequences {
        let n = seq.frames.rows() / clip_len;
        for c in 0..n {
            let mut frames = crate::linalg::Mat::zeros(clip_len, seq.frames.cols());
            for r in 0..clip_len {
                frames
                    .row_mut(r)
                    .copy_from_slice(seq.frames.row(c * clip_len + r));
            }
            clips.push(PositionSequence {
                frames,
                num_joints: seq.num_joints,
                fps: seq.fps,
            });
        }
    }
    if clips.len() < 2 {
        return Err(MetricsError::TooFewClips(clips.len()));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            acc += l1_distance(&clips[i], &clips[j])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

/// Time a synthesis closure: each repeat synthesizes `frames` frames and the
/// per-frame seconds are aggregated into a mean and a 95% half-width.
pub fn time_synthesis<F: FnMut()>(mut synth: F, frames: usize, repeats: usize) -> TimingReport {
    assert!(frames > 0 && repeats > 0);
    let mut per_frame = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = std::time::Instant::now();
        synth();
        per_frame.push(start.elapsed().as_secs_f64() / frames as f64);
    }
    let mean = per_frame.iter().sum::<f64>() / repeats as f64;
    let half_width = if repeats > 1 {
        let var = per_frame.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        Some(1.96 * (var / repeats as f64).sqrt())
    } else {
        None
    };
    TimingReport {
        mean_secs_per_frame: mean,
        half_width,
    }
}
