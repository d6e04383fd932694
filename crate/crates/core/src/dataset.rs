//! Paired training windows, normalization statistics, train/validation
//! splitting, and the on-disk dataset container.
//!
//! The container is a directory: a TOML manifest, a TOML stats file, and two
//! flat tensor files (`poses.f32`, `audio.f32`). Tensor files hold
//! little-endian 32-bit floats, row-major, preceded by a shape header of
//! little-endian u32 values: a magic `GST1`, the dimension count, then each
//! dimension. Because tensors are stored at 32-bit precision, sample values
//! are quantized to f32 when windows are cut, so save→load is bit-exact.

use crate::linalg::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sequence too short: {frames} frames, window needs {window}")]
    TooShort { frames: usize, window: usize },
    #[error("pose and acoustic sequences are not frame-aligned: {0} vs {1} frames")]
    Misaligned(usize, usize),
    #[error("cannot fit stats on an empty training split")]
    EmptyTrainingSplit,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported dataset version {0}")]
    VersionMismatch(u32),
    #[error("corrupted dataset container: {0}")]
    Corrupted(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(String),
}

pub const DATASET_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;
const TENSOR_MAGIC: u32 = u32::from_le_bytes(*b"GST1");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One paired window: `poses` is `(window, pose_dim)`, `acoustics` is
/// `(window, audio_dim)`, both covering frames `start..start+window` of the
/// source take.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub poses: Mat,
    pub acoustics: Mat,
    pub take: usize,
    pub start: usize,
}

/// Per-channel standardization statistics, fitted on the training split
/// only. The pose-channel mean doubles as the neutral pose used to seed
/// synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pose_mean: Vec<f64>,
    pub pose_std: Vec<f64>,
    pub audio_mean: Vec<f64>,
    pub audio_std: Vec<f64>,
}

impl NormStats {
    /// The mean pose vector; synthesis begins from a run of these.
    pub fn neutral_pose(&self) -> &[f64] {
        &self.pose_mean
    }

    pub fn standardize_pose(&self, frames: &Mat) -> Result<Mat, DatasetError> {
        standardize_mat(frames, &self.pose_mean, &self.pose_std, false)
    }

    pub fn destandardize_pose(&self, frames: &Mat) -> Result<Mat, DatasetError> {
        standardize_mat(frames, &self.pose_mean, &self.pose_std, true)
    }

    pub fn standardize_audio(&self, frames: &Mat) -> Result<Mat, DatasetError> {
        standardize_mat(frames, &self.audio_mean, &self.audio_std, false)
    }

    pub fn destandardize_audio(&self, frames: &Mat) -> Result<Mat, DatasetError> {
        standardize_mat(frames, &self.audio_mean, &self.audio_std, true)
    }
}

fn standardize_mat(
    frames: &Mat,
    mean: &[f64],
    std: &[f64],
    invert: bool,
) -> Result<Mat, DatasetError> {
    if frames.cols() != mean.len() {
        return Err(DatasetError::ShapeMismatch(format!(
            "{} channels, stats have {}",
            frames.cols(),
            mean.len()
        )));
    }
    let mut out = frames.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            if invert {
                *v = *v * std[c] + mean[c];
            } else {
                *v = (*v - mean[c]) / std[c];
            }
        }
    }
    Ok(out)
}

/// Standardize both windows of a sample.
pub fn standardize(sample: &TrainingSample, stats: &NormStats) -> Result<TrainingSample, DatasetError> {
    Ok(TrainingSample {
        poses: stats.standardize_pose(&sample.poses)?,
        acoustics: stats.standardize_audio(&sample.acoustics)?,
        ..*sample
    })
}

pub fn destandardize(sample: &TrainingSample, stats: &NormStats) -> Result<TrainingSample, DatasetError> {
    Ok(TrainingSample {
        poses: stats.destandardize_pose(&sample.poses)?,
        acoustics: stats.destandardize_audio(&sample.acoustics)?,
        ..*sample
    })
}

fn quantize(m: &Mat) -> Mat {
    m.map(|v| v as f32 as f64)
}

/// Cut overlapping windows from one frame-aligned take. Window starts are
/// `0, stride, 2·stride, ...` while `start + window <= T`, so no window ever
/// crosses the end of the take.
pub fn window_pairs(
    poses: &Mat,
    acoustics: &Mat,
    window: usize,
    stride: usize,
    take: usize,
) -> Result<Vec<TrainingSample>, DatasetError> {
    assert!(window > 0 && stride > 0, "window and stride must be positive");
    if poses.rows() != acoustics.rows() {
        return Err(DatasetError::Misaligned(poses.rows(), acoustics.rows()));
    }
    let frames = poses.rows();
    if frames < window {
        return Err(DatasetError::TooShort { frames, window });
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= frames {
        let cut = |src: &Mat| {
            let mut m = Mat::zeros(window, src.cols());
            for r in 0..window {
                m.row_mut(r).copy_from_slice(src.row(start + r));
            }
            quantize(&m)
        };
        out.push(TrainingSample {
            poses: cut(poses),
            acoustics: cut(acoustics),
            take,
            start,
        });
        start += stride;
    }
    Ok(out)
}

/// Per-channel mean/std over every frame of every given sample, with the
/// standard deviation clamped from below so constant channels stay usable.
pub fn fit_stats(samples: &[&TrainingSample]) -> Result<NormStats, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::EmptyTrainingSplit);
    }
    let stats_for = |select: fn(&TrainingSample) -> &Mat| {
        let dim = select(samples[0]).cols();
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for s in samples {
            let m = select(s);
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    mean[c] += v;
                }
            }
            count += m.rows();
        }
        for v in &mut mean {
            *v /= count as f64;
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            let m = select(s);
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    let d = v - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        (mean, std)
    };
    let (pose_mean, pose_std) = stats_for(|s| &s.poses);
    let (audio_mean, audio_std) = stats_for(|s| &s.acoustics);
    Ok(NormStats {
        pose_mean,
        pose_std,
        audio_mean,
        audio_std,
    })
}

/// Deterministically assign takes to splits: shuffle take indices with the
/// seed, then send roughly `val_fraction` of them (at least one, when there
/// are two or more takes) to validation.
pub fn assign_splits(num_takes: usize, seed: u64, val_fraction: f64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..num_takes).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut n_val = (num_takes as f64 * val_fraction).round() as usize;
    if num_takes >= 2 {
        n_val = n_val.clamp(1, num_takes - 1);
    } else {
        n_val = 0;
    }
    let mut splits = vec![Split::Train; num_takes];
    for &t in order.iter().take(n_val) {
        splits[t] = Split::Validation;
    }
    splits
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub take: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_count: usize,
    pub window: usize,
    pub pose_dim: usize,
    pub audio_dim: usize,
    pub fps: f64,
    pub split_seed: u64,
    /// Split of each take, indexed by take id.
    pub take_splits: Vec<Split>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TrainingSample>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn split_of(&self, sample: &TrainingSample) -> Split {
        self.manifest.take_splits[sample.take]
    }

    pub fn training_samples(&self) -> Vec<&TrainingSample> {
        self.samples
            .iter()
            .filter(|s| self.split_of(s) == Split::Train)
            .collect()
    }

    pub fn validation_samples(&self) -> Vec<&TrainingSample> {
        self.samples
            .iter()
            .filter(|s| self.split_of(s) == Split::Validation)
            .collect()
    }
}

/// Assemble a dataset from per-take frame-aligned (pose, acoustic) pairs.
pub fn build_dataset(
    takes: &[(Mat, Mat)],
    window: usize,
    stride: usize,
    fps: f64,
    split_seed: u64,
) -> Result<Dataset, DatasetError> {
    let take_splits = assign_splits(takes.len(), split_seed, 0.1);
    let mut samples = Vec::new();
    for (id, (poses, acoustics)) in takes.iter().enumerate() {
        samples.extend(window_pairs(poses, acoustics, window, stride, id)?);
    }
    let train: Vec<&TrainingSample> = samples
        .iter()
        .filter(|s| take_splits[s.take] == Split::Train)
        .collect();
    let stats = fit_stats(&train)?;
    let (pose_dim, audio_dim) = (takes[0].0.cols(), takes[0].1.cols());
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        sample_count: samples.len(),
        window,
        pose_dim,
        audio_dim,
        fps,
        split_seed,
        take_splits,
        samples: samples
            .iter()
            .map(|s| SampleEntry {
                take: s.take,
                start: s.start,
            })
            .collect(),
    };
    Ok(Dataset {
        manifest,
        samples,
        stats,
    })
}

fn write_tensor(path: &Path, shape: &[usize], data: impl Iterator<Item = f64>) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&TENSOR_MAGIC.to_le_bytes())?;
    f.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(path: &Path, expect_shape: &[usize]) -> Result<Vec<f64>, DatasetError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf4 = [0u8; 4];
    let mut next = |f: &mut dyn Read| -> Result<u32, DatasetError> {
        f.read_exact(&mut buf4)
            .map_err(|_| DatasetError::Corrupted(format!("{}: truncated header", path.display())))?;
        Ok(u32::from_le_bytes(buf4))
    };
    if next(&mut f)? != TENSOR_MAGIC {
        return Err(DatasetError::Corrupted(format!(
            "{}: bad tensor magic",
            path.display()
        )));
    }
    let ndim = next(&mut f)? as usize;
    if ndim != expect_shape.len() {
        return Err(DatasetError::Corrupted(format!(
            "{}: {ndim} dimensions, manifest implies {}",
            path.display(),
            expect_shape.len()
        )));
    }
    let mut total = 1usize;
    for &want in expect_shape {
        let got = next(&mut f)? as usize;
        if got != want {
            return Err(DatasetError::Corrupted(format!(
                "{}: dimension {got} disagrees with manifest value {want}",
                path.display()
            )));
        }
        total *= got;
    }
    let mut data = Vec::with_capacity(total);
    let mut buf = [0u8; 4];
    for _ in 0..total {
        std::io::Read::read_exact(&mut f, &mut buf).map_err(|_| {
            DatasetError::Corrupted(format!("{}: tensor data shorter than its shape", path.display()))
        })?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    if std::io::Read::read(&mut f, &mut buf)? != 0 {
        return Err(DatasetError::Corrupted(format!(
            "{}: trailing bytes after tensor data",
            path.display()
        )));
    }
    Ok(data)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let manifest = toml::to_string_pretty(&ds.manifest)
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), manifest)?;
    let stats =
        toml::to_string_pretty(&ds.stats).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    std::fs::write(dir.join("stats.toml"), stats)?;
    let m = &ds.manifest;
    write_tensor(
        &dir.join("poses.f32"),
        &[m.sample_count, m.window, m.pose_dim],
        ds.samples.iter().flat_map(|s| s.poses.data().iter().copied()),
    )?;
    write_tensor(
        &dir.join("audio.f32"),
        &[m.sample_count, m.window, m.audio_dim],
        ds.samples
            .iter()
            .flat_map(|s| s.acoustics.data().iter().copied()),
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: DatasetManifest =
        toml::from_str(&manifest_text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(DatasetError::VersionMismatch(manifest.version));
    }
    if manifest.samples.len() != manifest.sample_count {
        return Err(DatasetError::Corrupted(format!(
            "manifest lists {} samples but declares {}",
            manifest.samples.len(),
            manifest.sample_count
        )));
    }
    for e in &manifest.samples {
        if e.take >= manifest.take_splits.len() {
            return Err(DatasetError::Corrupted(format!(
                "sample references take {} but only {} takes have splits",
                e.take,
                manifest.take_splits.len()
            )));
        }
    }
    let stats_text = std::fs::read_to_string(dir.join("stats.toml"))?;
    let stats: NormStats =
        toml::from_str(&stats_text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if stats.pose_mean.len() != manifest.pose_dim || stats.audio_mean.len() != manifest.audio_dim {
        return Err(DatasetError::Corrupted(
            "stats channel counts disagree with manifest".into(),
        ));
    }
    let poses = read_tensor(
        &dir.join("poses.f32"),
        &[manifest.sample_count, manifest.window, manifest.pose_dim],
    )?;
    let audio = read_tensor(
        &dir.join("audio.f32"),
        &[manifest.sample_count, manifest.window, manifest.audio_dim],
    )?;
    let pose_stride = manifest.window * manifest.pose_dim;
    let audio_stride = manifest.window * manifest.audio_dim;
    let samples = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, e)| TrainingSample {
            poses: Mat::from_vec(
                manifest.window,
                manifest.pose_dim,
                poses[i * pose_stride..(i + 1) * pose_stride].to_vec(),
            ),
            acoustics: Mat::from_vec(
                manifest.window,
                manifest.audio_dim,
                audio[i * audio_stride..(i + 1) * audio_stride].to_vec(),
            ),
            take: e.take,
            start: e.start,
        })
        .collect();
    Ok(Dataset {
        manifest,
        samples,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize, scale: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| i as f64 * scale).collect(),
        )
    }

    #[test]
    fn exact_tiling_gives_two_samples() {
        let s = window_pairs(&ramp(160, 3, 0.01), &ramp(160, 2, 0.02), 80, 80, 0).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].start, s[1].start), (0, 80));
    }

    #[test]
    fn single_window_take_gives_one_sample() {
        let s = window_pairs(&ramp(80, 3, 0.01), &ramp(80, 2, 0.02), 80, 13, 0).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn overlapping_starts_match_enumeration() {
        // independent enumeration of valid starts
        let t = 200;
        let (window, stride) = (80, 40);
        let expect: Vec<usize> = (0..).map(|k| k * stride).take_while(|s| s + window <= t).collect();
        assert_eq!(expect, vec![0, 40, 80, 120]);
        let s = window_pairs(&ramp(t, 3, 0.01), &ramp(t, 2, 0.02), window, stride, 7).unwrap();
        let starts: Vec<usize> = s.iter().map(|x| x.start).collect();
        assert_eq!(starts, expect);
        assert!(s.iter().all(|x| x.take == 7));
        // pose and acoustic windows cover the same frames
        for x in &s {
            assert!((x.poses[(0, 0)] - (x.start * 3) as f64 * 0.01).abs() < 1e-4);
            assert!((x.acoustics[(0, 0)] - (x.start * 2) as f64 * 0.02).abs() < 1e-4);
        }
    }

    #[test]
    fn too_short_take_is_an_error() {
        assert!(matches!(
            window_pairs(&ramp(79, 3, 0.1), &ramp(79, 2, 0.1), 80, 40, 0),
            Err(DatasetError::TooShort { frames: 79, window: 80 })
        ));
    }

    #[test]
    fn misaligned_sequences_are_an_error() {
        assert!(matches!(
            window_pairs(&ramp(100, 3, 0.1), &ramp(99, 2, 0.1), 80, 40, 0),
            Err(DatasetError::Misaligned(100, 99))
        ));
    }

    #[test]
    fn constant_channel_std_is_clamped() {
        let sample = TrainingSample {
            poses: Mat::from_vec(4, 2, vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]),
            acoustics: Mat::zeros(4, 1),
            take: 0,
            start: 0,
        };
        let stats = fit_stats(&[&sample]).unwrap();
        assert_eq!(stats.pose_std[0], 1e-6);
        assert!(stats.pose_std[1] > 1e-3);
        assert_eq!(stats.audio_std[0], 1e-6);
    }

    #[test]
    fn symmetric_samples_have_zero_mean() {
        let a = TrainingSample {
            poses: Mat::from_vec(1, 2, vec![1.5, -2.5]),
            acoustics: Mat::from_vec(1, 1, vec![4.0]),
            take: 0,
            start: 0,
        };
        let b = TrainingSample {
            poses: Mat::from_vec(1, 2, vec![-1.5, 2.5]),
            acoustics: Mat::from_vec(1, 1, vec![-4.0]),
            take: 0,
            start: 1,
        };
        let stats = fit_stats(&[&a, &b]).unwrap();
        assert!(stats.pose_mean.iter().all(|v| v.abs() < 1e-12));
        assert!(stats.audio_mean[0].abs() < 1e-12);
    }

    #[test]
    fn stats_match_two_pass_reference() {
        let samples = window_pairs(
            &ramp(200, 3, 0.013).map(|v| (v * 7.1).sin()),
            &ramp(200, 2, 0.029).map(|v| (v * 3.3).cos()),
            80,
            40,
            0,
        )
        .unwrap();
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        let stats = fit_stats(&refs).unwrap();
        // naive reference: collect every value per channel, then mean/std
        for c in 0..3 {
            let vals: Vec<f64> = samples
                .iter()
                .flat_map(|s| (0..80).map(move |r| s.poses[(r, c)]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((stats.pose_mean[c] - mean).abs() < 1e-10);
            assert!((stats.pose_std[c] - var.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn standardize_round_trip_is_identity() {
        let samples = window_pairs(
            &ramp(120, 3, 0.01).map(|v| v * v - 1.0),
            &ramp(120, 2, 0.05),
            80,
            40,
            0,
        )
        .unwrap();
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        let stats = fit_stats(&refs).unwrap();
        for s in &samples {
            let z = standardize(s, &stats).unwrap();
            let back = destandardize(&z, &stats).unwrap();
            for (a, b) in back.poses.data().iter().zip(s.poses.data()) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in back.acoustics.data().iter().zip(s.acoustics.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardized_training_set_has_unit_moments() {
        let samples = window_pairs(
            &ramp(160, 2, 0.01).map(|v| (v * 13.0).sin() * 3.0 + 1.0),
            &ramp(160, 2, 0.02).map(|v| (v * 5.0).cos() * 0.2 - 7.0),
            80,
            80,
            0,
        )
        .unwrap();
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        let stats = fit_stats(&refs).unwrap();
        let z: Vec<TrainingSample> = samples.iter().map(|s| standardize(s, &stats).unwrap()).collect();
        for c in 0..2 {
            let vals: Vec<f64> = z
                .iter()
                .flat_map(|s| (0..80).map(move |r| s.poses[(r, c)]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "channel {c} std {}", var.sqrt());
        }
    }

    #[test]
    fn clamped_channel_round_trips_exactly() {
        let sample = TrainingSample {
            poses: Mat::from_vec(2, 1, vec![5.0, 5.0]),
            acoustics: Mat::from_vec(2, 1, vec![0.5, -0.5]),
            take: 0,
            start: 0,
        };
        let stats = fit_stats(&[&sample]).unwrap();
        let back = destandardize(&standardize(&sample, &stats).unwrap(), &stats).unwrap();
        assert_eq!(back.poses.data(), sample.poses.data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let sample = TrainingSample {
            poses: Mat::zeros(2, 3),
            acoustics: Mat::zeros(2, 2),
            take: 0,
            start: 0,
        };
        let stats = fit_stats(&[&sample]).unwrap();
        let bad = TrainingSample {
            poses: Mat::zeros(2, 4),
            ..sample
        };
        assert!(matches!(
            standardize(&bad, &stats),
            Err(DatasetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn empty_training_split_is_an_error() {
        assert!(matches!(fit_stats(&[]), Err(DatasetError::EmptyTrainingSplit)));
    }

    fn toy_dataset() -> Dataset {
        let takes: Vec<(Mat, Mat)> = (0..4)
            .map(|t| {
                let n = 100 + t * 20;
                (
                    ramp(n, 3, 0.01 + t as f64 * 0.001).map(|v| (v * 2.0).sin()),
                    ramp(n, 2, 0.03).map(|v| (v + t as f64).cos()),
                )
            })
            .collect();
        build_dataset(&takes, 80, 40, 20.0, 1234).unwrap()
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn manifest_count_matches_samples() {
        let ds = toy_dataset();
        assert_eq!(ds.manifest.sample_count, ds.samples.len());
        assert_eq!(ds.manifest.samples.len(), ds.samples.len());
    }

    #[test]
    fn corrupted_tensor_length_is_detected() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("poses.f32");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::Corrupted(_))
        ));
    }

    #[test]
    fn version_mismatch_is_detected() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("manifest.toml");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("version = 1", "version = 9")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatasetError::VersionMismatch(9))
        ));
    }

    #[test]
    fn split_is_deterministic_and_nontrivial() {
        let a = assign_splits(10, 42, 0.1);
        let b = assign_splits(10, 42, 0.1);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| **s == Split::Validation).count(), 1);
        // a different seed eventually picks a different take
        let mut saw_difference = false;
        for seed in 0..20 {
            if assign_splits(10, seed, 0.1) != a {
                saw_difference = true;
                break;
            }
        }
        assert!(saw_difference);
    }

    #[test]
    fn both_splits_are_nonempty_in_built_dataset() {
        let ds = toy_dataset();
        assert!(!ds.training_samples().is_empty());
        assert!(!ds.validation_samples().is_empty());
        // no sample crosses its take: start+window within take length
        for s in &ds.samples {
            assert!(s.start + ds.manifest.window <= 100 + s.take * 20);
        }
    }
}
