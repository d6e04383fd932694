//! Speech audio to the 27-channel mel-frequency power spectrogram aligned
//! one-to-one with pose frames.

use crate::linalg::Mat;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("truncated wav: {0}")]
    Truncated(&'static str),
    #[error("unsupported wav encoding: format tag {format}, {bits} bits")]
    UnsupportedEncoding { format: u16, bits: u16 },
    #[error("frame rate {fps} does not divide sample rate {sample_rate}")]
    RateMismatch { sample_rate: u32, fps: f64 },
    #[error("clip too short: {samples} samples, need at least one {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("invalid mel frequency range [{f_min}, {f_max}] at sample rate {sample_rate}")]
    InvalidMelRange {
        f_min: f64,
        f_max: f64,
        sample_rate: u32,
    },
}

/// Mono amplitude samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Per-frame mel power features, `T x n_mels`, log-compressed.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatureSequence {
    pub frames: Mat,
    pub fps: f64,
}

impl AcousticFeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }
}

fn read_u32(b: &[u8], at: usize) -> Option<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn read_u16(b: &[u8], at: usize) -> Option<u16> {
    b.get(at..at + 2).map(|s| u16::from_le_bytes([s[0], s[1]]))
}

/// Decode a RIFF PCM WAV file: 16-bit integer or 32-bit float, mono or
/// stereo. Stereo channels are averaged.
pub fn load_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4).ok_or(AudioError::Truncated("chunk header"))? as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::Truncated("chunk body"));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::Truncated("fmt chunk"));
                }
                let format = read_u16(body, 0).unwrap();
                let channels = read_u16(body, 2).unwrap();
                let rate = read_u32(body, 4).unwrap();
                let bits = read_u16(body, 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word-aligned
        pos = body_start + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or(AudioError::Truncated("missing fmt chunk"))?;
    let data = data.ok_or(AudioError::Truncated("missing data chunk"))?;
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedEncoding { format, bits });
    }
    let ch = channels as usize;
    let decoded: Vec<f64> = match (format, bits) {
        (1, 16) => {
            if data.len() % (2 * ch) != 0 {
                return Err(AudioError::Truncated("data chunk"));
            }
            data.chunks_exact(2 * ch)
                .map(|frame| {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let v = i16::from_le_bytes([frame[2 * c], frame[2 * c + 1]]);
                        acc += v as f64 / 32768.0;
                    }
                    acc / ch as f64
                })
                .collect()
        }
        (3, 32) => {
            if data.len() % (4 * ch) != 0 {
                return Err(AudioError::Truncated("data chunk"));
            }
            data.chunks_exact(4 * ch)
                .map(|frame| {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let v = f32::from_le_bytes([
                            frame[4 * c],
                            frame[4 * c + 1],
                            frame[4 * c + 2],
                            frame[4 * c + 3],
                        ]);
                        acc += v as f64;
                    }
                    acc / ch as f64
                })
                .collect()
        }
        _ => return Err(AudioError::UnsupportedEncoding { format, bits }),
    };
    Ok(AudioClip {
        samples: decoded,
        sample_rate: rate,
    })
}

/// Encode a mono clip as 32-bit float WAV (used by tests and fixtures).
pub fn write_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 4;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 4).to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out
}

pub fn mel_from_hz(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn hz_from_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale, `n_mels x (n_fft/2+1)`.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Mat, AudioError> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(AudioError::InvalidMelRange {
            f_min,
            f_max,
            sample_rate,
        });
    }
    let n_bins = n_fft / 2 + 1;
    let mel_lo = mel_from_hz(f_min);
    let mel_hi = mel_from_hz(f_max);
    // n_mels + 2 edge points
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| hz_from_mel(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = Mat::zeros(n_mels, n_bins);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                fb[(m, b)] = w;
            }
        }
    }
    Ok(fb)
}

/// Parameters for the mel-frequency power spectrogram.
#[derive(Clone, Copy, Debug)]
pub struct MfpsParams {
    pub n_mels: usize,
    pub n_fft: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_epsilon: f64,
}

impl Default for MfpsParams {
    fn default() -> Self {
        MfpsParams {
            n_mels: 27,
            n_fft: 1024,
            f_min: 20.0,
            f_max: None,
            log_epsilon: 1e-10,
        }
    }
}

/// Power spectrogram of centered frames (Hann window, reflection padding),
/// `T x (n_fft/2+1)` with `T = samples / hop`.
pub fn power_spectrogram(clip: &AudioClip, hop: usize, n_fft: usize) -> Mat {
    let n = clip.samples.len();
    let t = n / hop;
    let half = n_fft / 2;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos()
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut out = Mat::zeros(t, n_bins);
    let sample_at = |idx: i64| -> f64 {
        // reflection padding without repeating the edge sample
        let n = n as i64;
        if n == 1 {
            return clip.samples[0];
        }
        let mut i = idx;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        clip.samples[i as usize]
    };
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in 0..t {
        let center = (frame * hop) as i64;
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex::new(sample_at(center - half as i64 + i as i64) * w, 0.0);
        }
        fft.process(&mut buf);
        for b in 0..n_bins {
            out[(frame, b)] = buf[b].norm_sqr();
        }
    }
    out
}

/// Log-compressed mel power spectrogram at exactly `fps` frames per second.
/// `fps` must divide the sample rate so pose and audio frames align 1:1.
pub fn mfps(
    clip: &AudioClip,
    fps: f64,
    params: &MfpsParams,
) -> Result<AcousticFeatureSequence, AudioError> {
    let sr = clip.sample_rate as f64;
    let hop_f = sr / fps;
    let hop = hop_f.round();
    if (hop_f - hop).abs() > 1e-9 || hop < 1.0 {
        return Err(AudioError::RateMismatch {
            sample_rate: clip.sample_rate,
            fps,
        });
    }
    let hop = hop as usize;
    if clip.samples.len() < params.n_fft {
        return Err(AudioError::ClipTooShort {
            samples: clip.samples.len(),
            window: params.n_fft,
        });
    }
    let f_max = params.f_max.unwrap_or(sr / 2.0);
    let fb = mel_filterbank(
        params.n_mels,
        params.n_fft,
        clip.sample_rate,
        params.f_min,
        f_max,
    )?;
    let spec = power_spectrogram(clip, hop, params.n_fft);
    let mel = spec.matmul(&fb.transpose());
    let frames = mel.map(|p| (p + params.log_epsilon).ln());
    Ok(AcousticFeatureSequence { frames, fps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: u32) -> AudioClip {
        let n = (secs * sr as f64) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() * 0.5)
                .collect(),
            sample_rate: sr,
        }
    }

    #[test]
    fn silence_decodes_to_zeros() {
        let clip = AudioClip {
            samples: vec![0.0; 16000],
            sample_rate: 16000,
        };
        let decoded = load_wav(&write_wav(&clip)).unwrap();
        assert_eq!(decoded.samples.len(), 16000);
        assert!(decoded.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_averaging_matches_mono() {
        // hand-build a 16-bit stereo file with identical channels
        let samples: Vec<i16> = (0..64).map(|i| (i * 100) as i16).collect();
        let mono = build_pcm16(&samples, 1);
        let stereo_samples: Vec<i16> = samples.iter().flat_map(|&s| [s, s]).collect();
        let stereo = build_pcm16(&stereo_samples, 2);
        let a = load_wav(&mono).unwrap();
        let b = load_wav(&stereo).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn build_pcm16(samples: &[i16], channels: u16) -> Vec<u8> {
        let data_len = samples.len() * 2;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn truncated_data_chunk_errors() {
        let clip = AudioClip {
            samples: vec![0.1; 100],
            sample_rate: 16000,
        };
        let mut bytes = write_wav(&clip);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(load_wav(&bytes), Err(AudioError::Truncated(_))));
    }

    #[test]
    fn unsupported_bits_errors() {
        let mut bytes = build_pcm16(&[0; 4], 1);
        // patch bits-per-sample to 24
        bytes[34] = 24;
        assert!(matches!(
            load_wav(&bytes),
            Err(AudioError::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn four_seconds_at_20_fps_gives_80_frames() {
        let clip = tone(220.0, 4.0, 16000);
        let feats = mfps(&clip, 20.0, &MfpsParams::default()).unwrap();
        assert_eq!(feats.frames.shape(), (80, 27));
    }

    #[test]
    fn silence_yields_log_epsilon_everywhere() {
        let clip = AudioClip {
            samples: vec![0.0; 32000],
            sample_rate: 16000,
        };
        let feats = mfps(&clip, 20.0, &MfpsParams::default()).unwrap();
        let expect = 1e-10f64.ln();
        for v in feats.frames.data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tone_peaks_in_the_bin_containing_it() {
        let sr = 16000u32;
        let clip = tone(440.0, 2.0, sr);
        let params = MfpsParams::default();
        let feats = mfps(&clip, 20.0, &params).unwrap();
        // which mel filter has maximum response at 440 Hz?
        let fb = mel_filterbank(27, 1024, sr, 20.0, 8000.0).unwrap();
        let bin = (440.0 / (sr as f64 / 1024.0)).round() as usize;
        let expected_mel = (0..27)
            .max_by(|&a, &b| fb[(a, bin)].partial_cmp(&fb[(b, bin)]).unwrap())
            .unwrap();
        for f in 0..feats.num_frames() {
            let row = feats.frames.row(f);
            let max_mel = (0..27)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(max_mel, expected_mel, "frame {f}");
        }
    }

    #[test]
    fn non_dividing_fps_rejected() {
        let clip = tone(440.0, 1.0, 16000);
        assert!(matches!(
            mfps(&clip, 30.0, &MfpsParams::default()),
            Err(AudioError::RateMismatch { .. })
        ));
    }

    #[test]
    fn short_clip_rejected() {
        let clip = AudioClip {
            samples: vec![0.0; 100],
            sample_rate: 16000,
        };
        assert!(matches!(
            mfps(&clip, 20.0, &MfpsParams::default()),
            Err(AudioError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn filterbank_rows_sum_positive_and_peaks_increase() {
        let fb = mel_filterbank(27, 1024, 16000, 20.0, 8000.0).unwrap();
        let mut last_peak = 0;
        for m in 0..27 {
            let sum: f64 = fb.row(m).iter().sum();
            assert!(sum > 0.0, "filter {m} empty");
            let peak = (0..fb.cols())
                .max_by(|&a, &b| fb[(m, a)].partial_cmp(&fb[(m, b)]).unwrap())
                .unwrap();
            assert!(peak >= last_peak, "filter {m} peak went backwards");
            last_peak = peak;
        }
    }

    #[test]
    fn filterbank_reproduces_triangle_weight_on_delta_spectrum() {
        let fb = mel_filterbank(27, 1024, 16000, 20.0, 8000.0).unwrap();
        let n_bins = fb.cols();
        for bin in [40, 100, 250] {
            let mut delta = Mat::zeros(1, n_bins);
            delta[(0, bin)] = 1.0;
            let applied = delta.matmul(&fb.transpose());
            for m in 0..27 {
                assert!((applied[(0, m)] - fb[(m, bin)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scaling_never_decreases_mel_power() {
        let clip = tone(300.0, 1.0, 16000);
        let scaled = AudioClip {
            samples: clip.samples.iter().map(|s| s * 1.7).collect(),
            sample_rate: 16000,
        };
        let a = mfps(&clip, 20.0, &MfpsParams::default()).unwrap();
        let b = mfps(&scaled, 20.0, &MfpsParams::default()).unwrap();
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn features_are_deterministic() {
        let clip = tone(523.0, 1.0, 16000);
        let a = mfps(&clip, 20.0, &MfpsParams::default()).unwrap();
        let b = mfps(&clip, 20.0, &MfpsParams::default()).unwrap();
        assert_eq!(a, b);
    }
}
