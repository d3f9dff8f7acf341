//! Ground-truth speech features and the WSOLA time stretch.
//!
//! The feature vector is (utterance F0 mean, utterance energy std, speaking
//! rate in moras per second). Pitch uses a normalized cross-correlation per
//! 25 ms frame with a 10 ms hop; energy is the population standard deviation
//! of per-frame RMS on the same framing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::SegmentRecord;

pub const FRAME_S: f64 = 0.025;
pub const HOP_S: f64 = 0.010;
pub const F0_MIN_HZ: f64 = 50.0;
pub const F0_MAX_HZ: f64 = 500.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
/// A later (longer-lag) peak only wins over an earlier one if it is this much
/// higher relative to the global maximum.
const OCTAVE_RATIO: f64 = 0.9;

pub const WSOLA_WINDOW_S: f64 = 0.030;
pub const WSOLA_TOLERANCE_S: f64 = 0.0075;
pub const WSOLA_MIN_RATE: f64 = 0.5;
pub const WSOLA_MAX_RATE: f64 = 2.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform must be non-empty")]
    EmptyWaveform,
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("waveform too short: {actual_s:.4} s < {required_s:.4} s")]
    TooShort { actual_s: f64, required_s: f64 },
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("segment {0:?} has no voiced frames")]
    Unvoiced(String),
    #[error("segment {0:?} is missing mora_count")]
    MissingMoraCount(String),
    #[error("segment {id:?}: manifest duration {manifest_s} s and waveform duration {wave_s:.4} s differ by more than 5%")]
    DurationMismatch {
        id: String,
        manifest_s: f64,
        wave_s: f64,
    },
    #[error("need at least 2 feature vectors, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimension {0} has zero variance")]
    DegenerateDimension(usize),
    #[error("stretch rate {0} outside [0.5, 2.0]")]
    RateOutOfRange(f64),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::EmptyWaveform);
        }
        if sample_rate_hz == 0 {
            return Err(FeatureError::BadSampleRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(FeatureError::NonFiniteSample(i));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    fn require(&self, required_s: f64) -> Result<(), FeatureError> {
        // Compare in samples so that e.g. 0.1 s at 16 kHz is exactly 1600 samples.
        let needed = (required_s * self.sample_rate_hz as f64).round() as usize;
        if self.samples.len() < needed {
            return Err(FeatureError::TooShort {
                actual_s: self.duration_s(),
                required_s,
            });
        }
        Ok(())
    }
}

/// Reads linear PCM (integer or float) WAV; multi-channel input is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, FeatureError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / frame.len() as f64)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Encodes mono 32-bit float WAV.
pub fn wav_bytes(w: &Waveform) -> Result<Vec<u8>, FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut buf, spec)?;
    for &s in &w.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(buf.into_inner())
}

pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    std::fs::write(path, wav_bytes(w)?).map_err(|e| FeatureError::Wav(hound::Error::IoError(e)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeechFeatures {
    pub f0_mean_hz: f64,
    pub energy_std: f64,
    pub speaking_rate: f64,
}

impl SpeechFeatures {
    pub fn new(f0_mean_hz: f64, energy_std: f64, speaking_rate: f64) -> Self {
        Self {
            f0_mean_hz,
            energy_std,
            speaking_rate,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.f0_mean_hz, self.energy_std, self.speaking_rate]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Reads the feature columns of a manifest record, if all three are present.
    pub fn from_record(r: &SegmentRecord) -> Option<Self> {
        Some(Self::new(r.f0_mean_hz?, r.energy_std?, r.speaking_rate?))
    }

    pub fn write_to(self, r: &mut SegmentRecord) {
        r.f0_mean_hz = Some(self.f0_mean_hz);
        r.energy_std = Some(self.energy_std);
        r.speaking_rate = Some(self.speaking_rate);
    }
}

fn framing(sample_rate_hz: u32) -> (usize, usize) {
    let sr = sample_rate_hz as f64;
    (
        (FRAME_S * sr).round() as usize,
        (HOP_S * sr).round() as usize,
    )
}

/// Per-frame pitch in Hz, `None` for unvoiced frames.
pub fn pitch_track(w: &Waveform) -> Result<Vec<Option<f64>>, FeatureError> {
    w.require(0.1)?;
    let x = w.samples();
    let sr = w.sample_rate_hz() as f64;
    let (frame, hop) = framing(w.sample_rate_hz());
    let min_lag = (sr / F0_MAX_HZ).ceil() as usize;
    let max_lag = (sr / F0_MIN_HZ).floor() as usize;

    let mut track = Vec::new();
    let mut start = 0;
    // Only frames with the whole lag range available are analysed.
    while start + frame + max_lag <= x.len() {
        track.push(frame_pitch(&x[start..], frame, min_lag, max_lag, sr));
        start += hop;
    }
    Ok(track)
}

fn frame_pitch(x: &[f64], frame: usize, min_lag: usize, max_lag: usize, sr: f64) -> Option<f64> {
    let reference = &x[..frame];
    let e0: f64 = reference.iter().map(|v| v * v).sum();
    if e0 <= 0.0 {
        return None;
    }
    let corr: Vec<f64> = (min_lag..=max_lag)
        .map(|lag| {
            let shifted = &x[lag..lag + frame];
            let el: f64 = shifted.iter().map(|v| v * v).sum();
            if el <= 0.0 {
                return 0.0;
            }
            let dot: f64 = reference.iter().zip(shifted).map(|(a, b)| a * b).sum();
            dot / (e0 * el).sqrt()
        })
        .collect();

    let (gmax_idx, gmax) =
        corr.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
    if gmax < VOICING_THRESHOLD {
        return None;
    }
    let accept = gmax * OCTAVE_RATIO;
    let peak = (1..corr.len() - 1)
        .find(|&i| corr[i] >= accept && corr[i] >= corr[i - 1] && corr[i] > corr[i + 1])
        .unwrap_or(gmax_idx);

    let mut lag = (peak + min_lag) as f64;
    if peak > 0 && peak + 1 < corr.len() {
        let (a, b, c) = (corr[peak - 1], corr[peak], corr[peak + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            lag += 0.5 * (a - c) / denom;
        }
    }
    let f0 = sr / lag;
    (F0_MIN_HZ..=F0_MAX_HZ).contains(&f0).then_some(f0)
}

/// Mean pitch over voiced frames, or `None` if no frame is voiced.
pub fn extract_f0_mean(w: &Waveform) -> Result<Option<f64>, FeatureError> {
    let voiced: Vec<f64> = pitch_track(w)?.into_iter().flatten().collect();
    if voiced.is_empty() {
        return Ok(None);
    }
    Ok(Some(voiced.iter().sum::<f64>() / voiced.len() as f64))
}

/// Fraction of pitch frames that were judged voiced.
pub fn voiced_fraction(w: &Waveform) -> Result<f64, FeatureError> {
    let track = pitch_track(w)?;
    if track.is_empty() {
        return Ok(0.0);
    }
    Ok(track.iter().filter(|f| f.is_some()).count() as f64 / track.len() as f64)
}

pub fn frame_rms(w: &Waveform) -> Result<Vec<f64>, FeatureError> {
    w.require(0.05)?;
    let (frame, hop) = framing(w.sample_rate_hz());
    let x = w.samples();
    let mut out = Vec::new();
    let mut start = 0;
    while start + frame <= x.len() {
        let e: f64 = x[start..start + frame].iter().map(|v| v * v).sum();
        out.push((e / frame as f64).sqrt());
        start += hop;
    }
    Ok(out)
}

/// Population standard deviation of per-frame RMS.
pub fn extract_energy_std(w: &Waveform) -> Result<f64, FeatureError> {
    let rms = frame_rms(w)?;
    let n = rms.len() as f64;
    let mean = rms.iter().sum::<f64>() / n;
    let var = rms.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

pub fn compute_speaking_rate(mora_count: u32, duration_s: f64) -> Result<f64, FeatureError> {
    if !(duration_s > 0.0) {
        return Err(FeatureError::NonPositiveDuration(duration_s));
    }
    Ok(mora_count as f64 / duration_s)
}

pub fn extract_features(
    record: &SegmentRecord,
    w: &Waveform,
) -> Result<SpeechFeatures, FeatureError> {
    let moras = record
        .mora_count
        .ok_or_else(|| FeatureError::MissingMoraCount(record.id.clone()))?;
    let wave_s = w.duration_s();
    if (wave_s - record.duration_s).abs() > 0.05 * record.duration_s {
        return Err(FeatureError::DurationMismatch {
            id: record.id.clone(),
            manifest_s: record.duration_s,
            wave_s,
        });
    }
    let f0 = extract_f0_mean(w)?.ok_or_else(|| FeatureError::Unvoiced(record.id.clone()))?;
    Ok(SpeechFeatures {
        f0_mean_hz: f0,
        energy_std: extract_energy_std(w)?,
        speaking_rate: compute_speaking_rate(moras, record.duration_s)?,
    })
}

/// Per-dimension z-score statistics fit on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl FeatureNormalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit(features: &[SpeechFeatures]) -> Result<Self, FeatureError> {
        if features.len() < 2 {
            return Err(FeatureError::TooFewSamples(features.len()));
        }
        let n = features.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for d in 0..3 {
            mean[d] = features.iter().map(|f| f.to_array()[d]).sum::<f64>() / n;
            let var = features
                .iter()
                .map(|f| (f.to_array()[d] - mean[d]).powi(2))
                .sum::<f64>()
                / n;
            std[d] = var.sqrt();
            if !(std[d] > f64::EPSILON * mean[d].abs().max(1.0)) {
                return Err(FeatureError::DegenerateDimension(d));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, f: SpeechFeatures) -> [f64; 3] {
        let a = f.to_array();
        std::array::from_fn(|d| (a[d] - self.mean[d]) / self.std[d])
    }

    pub fn denormalize(&self, z: [f64; 3]) -> SpeechFeatures {
        SpeechFeatures::from_array(std::array::from_fn(|d| z[d] * self.std[d] + self.mean[d]))
    }

    pub fn is_valid(&self) -> bool {
        self.std.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.mean.iter().all(|m| m.is_finite())
    }
}

/// Geometry of the WSOLA overlap-add for a given sample rate.
#[derive(Debug, Clone, Copy)]
pub struct WsolaParams {
    pub window: usize,
    pub synthesis_hop: usize,
    pub tolerance: usize,
}

impl WsolaParams {
    pub fn for_rate(sample_rate_hz: u32) -> Self {
        let sr = sample_rate_hz as f64;
        let mut window = (WSOLA_WINDOW_S * sr).round() as usize;
        window += window % 2;
        Self {
            window,
            synthesis_hop: window / 2,
            tolerance: (WSOLA_TOLERANCE_S * sr).round() as usize,
        }
    }
}

/// Time-scale modification by waveform-similarity overlap-add.
///
/// `rate > 1` speeds speech up. Output length is `round(len / rate)`.
pub fn time_stretch_wsola(w: &Waveform, rate: f64) -> Result<Waveform, FeatureError> {
    if !(WSOLA_MIN_RATE..=WSOLA_MAX_RATE).contains(&rate) {
        return Err(FeatureError::RateOutOfRange(rate));
    }
    let p = WsolaParams::for_rate(w.sample_rate_hz());
    if w.len() < 3 * p.window {
        return Err(FeatureError::TooShort {
            actual_s: w.duration_s(),
            required_s: 3.0 * p.window as f64 / w.sample_rate_hz() as f64,
        });
    }
    let x = w.samples();
    let n = x.len();
    let win = p.window;
    let hs = p.synthesis_hop;
    let tol = p.tolerance as isize;
    let analysis_hop = hs as f64 * rate;

    let out_len = (n as f64 / rate).round() as usize;
    let frames = if out_len <= win {
        1
    } else {
        (out_len - win).div_ceil(hs) + 1
    };

    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let at = |i: isize| -> f64 {
        if i >= 0 && (i as usize) < n {
            x[i as usize]
        } else {
            0.0
        }
    };

    // Search order 0, -1, +1, -2, +2, ... so the smallest shift wins ties.
    let mut offsets = vec![0isize];
    for d in 1..=tol {
        offsets.push(-d);
        offsets.push(d);
    }

    let span = frames * hs + win;
    let mut out = vec![0.0; span];
    let mut weight = vec![0.0; span];
    let mut prev: isize = 0;
    for k in 0..frames {
        let nominal = (k as f64 * analysis_hop).round() as isize;
        let pos = if k == 0 {
            0
        } else {
            let target = prev + hs as isize;
            let template: Vec<f64> = (0..win as isize).map(|i| at(target + i)).collect();
            let t_energy: f64 = template.iter().map(|v| v * v).sum();
            let mut best = (nominal, f64::NEG_INFINITY);
            for &d in &offsets {
                let cand = (nominal + d).clamp(0, n as isize - 1);
                let (mut dot, mut energy) = (0.0, 0.0);
                for (i, t) in template.iter().enumerate() {
                    let v = at(cand + i as isize);
                    dot += v * t;
                    energy += v * v;
                }
                let score = if energy > 0.0 && t_energy > 0.0 {
                    dot / (energy * t_energy).sqrt()
                } else {
                    0.0
                };
                if score > best.1 {
                    best = (cand, score);
                }
            }
            best.0
        };
        let base = k * hs;
        for i in 0..win {
            out[base + i] += hann[i] * at(pos + i as isize);
            weight[base + i] += hann[i];
        }
        prev = pos;
    }

    let samples: Vec<f64> = out
        .iter()
        .zip(&weight)
        .take(out_len)
        .map(|(v, wt)| if *wt > 1e-3 { v / wt } else { 0.0 })
        .collect();
    Waveform::new(samples, w.sample_rate_hz())
}
