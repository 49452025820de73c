//! Audio ingestion and log-mel features.
//!
//! Frames are `round(0.022 · sr)` samples long with a hop of half a frame.
//! Each frame is Hamming-windowed and transformed with a DFT of exactly the
//! frame length (no zero padding), its power spectrum projected onto 40
//! triangular mel filters, and compressed with `ln(x + 1e-10)`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::EventRoll;

pub const N_MELS: usize = 40;
pub const WINDOW_SECONDS: f64 = 0.022;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

const CACHE_MAGIC: &[u8; 4] = b"SEDF";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn wav_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::parse("wav", format!("byte {offset}"), msg)
}

fn le_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| wav_err(at, "unexpected end of file"))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| wav_err(at, "unexpected end of file"))
}

/// Decodes a RIFF/WAVE PCM16 buffer. Stereo is averaged down to mono.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(wav_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(wav_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                let format = le_u16(bytes, body)?;
                if format != 1 {
                    return Err(wav_err(body, format!("unsupported codec {format}, only PCM (1) is read")));
                }
                let channels = le_u16(bytes, body + 2)?;
                if channels != 1 && channels != 2 {
                    return Err(wav_err(body + 2, format!("unsupported channel count {channels}")));
                }
                let rate = le_u32(bytes, body + 4)?;
                if rate == 0 {
                    return Err(wav_err(body + 4, "sample rate is zero"));
                }
                let bits = le_u16(bytes, body + 14)?;
                if bits != 16 {
                    return Err(wav_err(body + 14, format!("unsupported bit depth {bits}, only 16 is read")));
                }
                fmt = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) = fmt.ok_or_else(|| wav_err(pos, "data chunk before fmt chunk"))?;
                let data = bytes
                    .get(body..body + size)
                    .ok_or_else(|| wav_err(body, format!("data chunk claims {size} bytes past end of file")))?;
                let frame_bytes = 2 * channels as usize;
                if data.len() % frame_bytes != 0 {
                    return Err(wav_err(body, "data size is not a whole number of sample frames"));
                }
                let samples = data
                    .chunks_exact(frame_bytes)
                    .map(|f| {
                        let sum: f64 = f
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                return Ok(AudioClip {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(wav_err(pos, if fmt.is_some() { "no data chunk" } else { "no fmt chunk" }))
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Parse { location, msg, .. } => Error::Parse {
            context: path.display().to_string(),
            location,
            msg,
        },
        other => other,
    })
}

/// Encodes as mono PCM16; samples are scaled by 32768 and saturated.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    fs::write(path, encode_wav(clip)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MelScale {
    /// `2595 · log10(1 + f / 700)`
    #[default]
    Htk,
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
}

impl MelScale {
    pub fn hz_to_mel(self, f: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + f / 700.0).log10(),
            MelScale::Slaney => {
                if f < 1000.0 {
                    f / (200.0 / 3.0)
                } else {
                    15.0 + (f / 1000.0).ln() / (6.4f64.ln() / 27.0)
                }
            }
        }
    }

    pub fn mel_to_hz(self, m: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(m / 2595.0) - 1.0),
            MelScale::Slaney => {
                if m < 15.0 {
                    m * (200.0 / 3.0)
                } else {
                    1000.0 * ((m - 15.0) * (6.4f64.ln() / 27.0)).exp()
                }
            }
        }
    }
}

/// Triangular filters over the bins `0..=dft_len/2` of a `dft_len`-point DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    /// Band edges in Hz: `n_mels + 2` points.
    edges: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, dft_len: usize, n_mels: usize, scale: MelScale) -> Result<Self> {
        if sample_rate == 0 || dft_len < 2 || n_mels == 0 {
            return Err(Error::Config(format!(
                "filterbank needs a positive sample rate, a DFT of at least 2 points and at least one band \
                 (got {sample_rate} Hz, {dft_len} points, {n_mels} bands)"
            )));
        }
        let n_bins = dft_len / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = scale.hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| scale.mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / dft_len as f64;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f >= lo && f <= center {
                    if center > lo { (f - lo) / (center - lo) } else { 1.0 }
                } else if f > center && f <= hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
            }
            if !row.iter().any(|&w| w > 0.0) {
                return Err(Error::Config(format!(
                    "mel band {m} ({lo:.1}-{hi:.1} Hz) contains no DFT bin; \
                     {dft_len} points at {sample_rate} Hz is too coarse for {n_mels} bands"
                )));
            }
        }
        Ok(MelFilterbank {
            weights,
            n_mels,
            n_bins,
            edges,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges
    }

    pub fn project(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.filter(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// 40 HTK-scale bands for a `dft_len`-point DFT.
pub fn build_mel_filterbank(sample_rate: u32, dft_len: usize) -> Result<MelFilterbank> {
    MelFilterbank::new(sample_rate, dft_len, N_MELS, MelScale::Htk)
}

pub fn window_length(sample_rate: u32) -> usize {
    (WINDOW_SECONDS * sample_rate as f64).round() as usize
}

pub fn hop_length(sample_rate: u32) -> usize {
    window_length(sample_rate) / 2
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `|DFT|²` of a real frame over all `frame.len()` bins.
pub fn power_spectrum(planner: &mut FftPlanner<f64>, frame: &[f64]) -> Vec<f64> {
    let fft = planner.plan_fft_forward(frame.len());
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf.iter().map(|c| c.norm_sqr()).collect()
}

/// Real `[T × F]` features with the time between rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    n_features: usize,
    values: Vec<f32>,
    hop_seconds: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, n_features: usize, values: Vec<f32>, hop_seconds: f64) -> Result<Self> {
        if values.len() != frames * n_features {
            return Err(Error::Validation(format!(
                "{frames}×{n_features} features need {} values, got {}",
                frames * n_features,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "feature at frame {} band {} is not finite",
                i / n_features.max(1),
                i % n_features.max(1)
            )));
        }
        Ok(FeatureMatrix {
            frames,
            n_features,
            values,
            hop_seconds,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_seconds
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_features..(t + 1) * self.n_features]
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.values[t * self.n_features + f]
    }
}

/// Log-mel features of a clip.
pub fn stft_logmel(clip: &AudioClip, fb: &MelFilterbank) -> Result<FeatureMatrix> {
    let n = window_length(clip.sample_rate);
    let hop = hop_length(clip.sample_rate).max(1);
    if n / 2 + 1 != fb.n_bins() {
        return Err(Error::Config(format!(
            "filterbank covers {} bins but a {n}-point frame has {}",
            fb.n_bins(),
            n / 2 + 1
        )));
    }
    if clip.samples.len() < n {
        return Err(Error::Validation(format!(
            "clip of {} samples is shorter than one {n}-sample window",
            clip.samples.len()
        )));
    }
    let frames = 1 + (clip.samples.len() - n) / hop;
    let window = hamming(n);
    let mut planner = FftPlanner::new();
    let mut mel = vec![0.0; fb.n_mels()];
    let mut values = Vec::with_capacity(frames * fb.n_mels());
    let mut frame = vec![0.0; n];
    for t in 0..frames {
        let start = t * hop;
        for (i, x) in frame.iter_mut().enumerate() {
            *x = clip.samples[start + i] * window[i];
        }
        let power = power_spectrum(&mut planner, &frame);
        fb.project(&power[..fb.n_bins()], &mut mel);
        values.extend(mel.iter().map(|&e| (e + LOG_FLOOR).ln() as f32));
    }
    FeatureMatrix::new(frames, fb.n_mels(), values, hop as f64 / clip.sample_rate as f64)
}

/// Per-feature mean and standard deviation of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut width = None;
        let matrices: Vec<&FeatureMatrix> = matrices.into_iter().collect();
        for m in &matrices {
            match width {
                None => {
                    width = Some(m.n_features());
                    sum = vec![0.0; m.n_features()];
                    sq = vec![0.0; m.n_features()];
                }
                Some(w) if w != m.n_features() => {
                    return Err(Error::Validation(format!(
                        "cannot fit on matrices with {w} and {} features",
                        m.n_features()
                    )))
                }
                _ => {}
            }
            for t in 0..m.frames() {
                for (f, &v) in m.row(t).iter().enumerate() {
                    sum[f] += v as f64;
                }
            }
            count += m.frames();
        }
        if count == 0 {
            return Err(Error::Validation("standardizer needs at least one frame".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for m in &matrices {
            for t in 0..m.frames() {
                for (f, &v) in m.row(t).iter().enumerate() {
                    sq[f] += (v as f64 - mean[f]).powi(2);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &FeatureMatrix) -> Result<()> {
        if m.n_features() != self.n_features() {
            return Err(Error::Validation(format!(
                "standardizer has {} features, matrix has {}",
                self.n_features(),
                m.n_features()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(m)?;
        let w = self.n_features();
        let values = m
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % w]) / self.std[i % w]) as f32)
            .collect();
        FeatureMatrix::new(m.frames(), w, values, m.hop_seconds())
    }

    pub fn inverse(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check(m)?;
        let w = self.n_features();
        let values = m
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 * self.std[i % w] + self.mean[i % w]) as f32)
            .collect();
        FeatureMatrix::new(m.frames(), w, values, m.hop_seconds())
    }
}

/// A fixed-length training sequence; frames at and after `valid` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub features: FeatureMatrix,
    pub roll: EventRoll,
    pub valid: usize,
}

impl Segment {
    pub fn mask(&self) -> Vec<bool> {
        (0..self.features.frames()).map(|t| t < self.valid).collect()
    }
}

/// Non-overlapping `len`-frame segments; a trailing partial segment is
/// zero-padded and masked.
pub fn segment_sequences(features: &FeatureMatrix, roll: &EventRoll, len: usize) -> Result<Vec<Segment>> {
    if len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    if features.frames() != roll.frames() {
        return Err(Error::Validation(format!(
            "features have {} frames but the roll has {}",
            features.frames(),
            roll.frames()
        )));
    }
    let f = features.n_features();
    let c = roll.classes();
    let mut out = Vec::new();
    let mut start = 0;
    while start < features.frames() {
        let end = (start + len).min(features.frames());
        let valid = end - start;
        let mut values = features.values()[start * f..end * f].to_vec();
        values.resize(len * f, 0.0);
        let mut seg_roll = EventRoll::new(len, c, roll.hop());
        for t in 0..valid {
            for k in 0..c {
                seg_roll.set(t, k, roll.get(start + t, k));
            }
        }
        out.push(Segment {
            features: FeatureMatrix::new(len, f, values, features.hop_seconds())?,
            roll: seg_roll,
            valid,
        });
        start = end;
    }
    Ok(out)
}

pub fn encode_feature_cache(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.values().len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_features() as u32).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// The cache does not store the hop; callers supply it.
pub fn decode_feature_cache(bytes: &[u8], hop_seconds: f64) -> Result<FeatureMatrix> {
    let err = |at: usize, msg: String| Error::parse("feature cache", format!("byte {at}"), msg);
    if bytes.get(0..4) != Some(CACHE_MAGIC) {
        return Err(err(0, "missing SEDF magic".into()));
    }
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
            .ok_or_else(|| err(at, "unexpected end of file".into()))
    };
    let version = word(4)?;
    if version != CACHE_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let (t, f) = (word(8)? as usize, word(12)? as usize);
    let body = &bytes[16..];
    if body.len() != 4 * t * f {
        return Err(err(16, format!("{t}×{f} floats need {} bytes, found {}", 4 * t * f, body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|s| f32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .collect();
    FeatureMatrix::new(t, f, values, hop_seconds)
}

pub fn write_feature_cache(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_feature_cache(m)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_cache(path: &Path, hop_seconds: f64) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_cache(&bytes, hop_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, sr: u32, seconds: f64, amp: f64) -> AudioClip {
        let n = (seconds * sr as f64) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sample_rate: sr,
        }
    }

    #[test]
    fn minimal_wav_and_scale() {
        let clip = AudioClip {
            samples: vec![0.0, 0.5, -1.0, 32767.0 / 32768.0],
            sample_rate: 8000,
        };
        let back = parse_wav(&encode_wav(&clip)).unwrap();
        assert_eq!(back.samples.len(), 4);
        assert_eq!(back.samples[2], -1.0);
        assert_eq!(back, clip);
    }

    #[test]
    fn tone_round_trip_within_one_step() {
        let clip = tone(440.0, 16000, 0.25, 0.9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        write_wav(&path, &clip).unwrap();
        let back = read_wav(&path).unwrap();
        let max_err = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 32768.0);
    }

    #[test]
    fn stereo_is_averaged() {
        let mut bytes = encode_wav(&AudioClip {
            samples: vec![0.0; 2],
            sample_rate: 8000,
        });
        // Rewrite as one stereo frame: left 0.5, right -0.25.
        bytes[22] = 2;
        bytes[40..44].copy_from_slice(&4u32.to_le_bytes());
        bytes.truncate(44);
        bytes.extend_from_slice(&16384i16.to_le_bytes());
        bytes.extend_from_slice(&(-8192i16).to_le_bytes());
        let clip = parse_wav(&bytes).unwrap();
        assert_eq!(clip.samples, vec![0.125]);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let good = encode_wav(&AudioClip {
            samples: vec![0.0; 4],
            sample_rate: 8000,
        });
        let mut bad = good.clone();
        bad[8..12].copy_from_slice(b"AVI ");
        assert!(parse_wav(&bad).unwrap_err().to_string().contains("byte 8"));

        let mut float = good.clone();
        float[20] = 3;
        let msg = parse_wav(&float).unwrap_err().to_string();
        assert!(msg.contains("byte 20") && msg.contains("codec"), "{msg}");

        let mut bits = good;
        bits[34] = 24;
        assert!(parse_wav(&bits).unwrap_err().to_string().contains("byte 34"));
        assert!(parse_wav(b"RIFF").is_err());
    }

    #[test]
    fn hamming_endpoints() {
        for n in [2, 7, 352, 970] {
            let w = hamming(n);
            assert!((w[0] - 0.08).abs() < 1e-15);
            assert!((w[n - 1] - 0.08).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_geometry() {
        assert_eq!(window_length(16000), 352);
        assert_eq!(hop_length(16000), 176);
        assert_eq!(window_length(44100), 970);
    }

    #[test]
    fn mel_formula() {
        assert_eq!(MelScale::Htk.hz_to_mel(0.0), 0.0);
        assert!((MelScale::Htk.hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((MelScale::Htk.hz_to_mel(700.0) - 781.17).abs() < 0.01);
        for scale in [MelScale::Htk, MelScale::Slaney] {
            for f in [0.0, 123.0, 999.0, 1000.0, 4000.0, 8000.0] {
                assert!((scale.mel_to_hz(scale.hz_to_mel(f)) - f).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn filterbank_geometry() {
        for (sr, n) in [(16000, 352), (44100, 970)] {
            let fb = build_mel_filterbank(sr, n).unwrap();
            assert_eq!(fb.n_mels(), 40);
            let bin_hz = sr as f64 / n as f64;
            for m in 0..40 {
                let row = fb.filter(m);
                assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
                // Support is one contiguous run.
                let on: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
                assert_eq!(on.last().unwrap() - on[0] + 1, on.len());
            }
            // Between two neighbouring peaks the falling and rising slopes
            // sum to one: each filter starts at its neighbour's peak.
            for m in 0..39 {
                for k in 0..fb.n_bins() {
                    let f = k as f64 * bin_hz;
                    if f >= fb.center_hz(m) && f <= fb.center_hz(m + 1) {
                        assert!((fb.filter(m)[k] + fb.filter(m + 1)[k] - 1.0).abs() < 1e-9);
                    }
                }
            }
            let top = fb.edges_hz()[41];
            for k in 1..fb.n_bins() {
                if (k as f64) * bin_hz < top {
                    assert!((0..40).any(|m| fb.filter(m)[k] > 0.0), "bin {k} uncovered");
                }
            }
        }
        assert!(build_mel_filterbank(16000, 16).is_err());
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let clip = AudioClip {
            samples: vec![0.0; 16000],
            sample_rate: 16000,
        };
        let fb = build_mel_filterbank(16000, 352).unwrap();
        let m = stft_logmel(&clip, &fb).unwrap();
        assert_eq!(m.frames(), 1 + (16000 - 352) / 176);
        let floor = (LOG_FLOOR).ln() as f32;
        assert!(m.values().iter().all(|&v| v == floor));
        assert!((m.hop_seconds() - 0.011).abs() < 1e-12);
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let clip = AudioClip {
            samples: vec![0.0; 100],
            sample_rate: 16000,
        };
        let fb = build_mel_filterbank(16000, 352).unwrap();
        assert!(stft_logmel(&clip, &fb).is_err());
    }

    #[test]
    fn parseval_on_windowed_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut planner = FftPlanner::new();
        for n in [352, 353, 970, 1024] {
            let w = hamming(n);
            let frame: Vec<f64> = w.iter().map(|&wi| wi * rng.random_range(-1.0..1.0)).collect();
            let spec_energy: f64 = power_spectrum(&mut planner, &frame).iter().sum();
            let time_energy: f64 = frame.iter().map(|x| x * x).sum::<f64>() * n as f64;
            assert!(((spec_energy - time_energy) / time_energy).abs() < 1e-6);
        }
    }

    #[test]
    fn tone_at_band_center_peaks_in_that_band() {
        for sr in [16000u32, 44100] {
            let n = window_length(sr);
            let fb = build_mel_filterbank(sr, n).unwrap();
            let bin_hz = sr as f64 / n as f64;
            for k in 0..40 {
                // Bands narrower than the window's main lobe cannot be
                // resolved at this frame length.
                let half_width = (fb.edges_hz()[k + 1] - fb.edges_hz()[k]).min(fb.edges_hz()[k + 2] - fb.edges_hz()[k + 1]);
                if half_width < 2.0 * bin_hz {
                    continue;
                }
                let clip = tone(fb.center_hz(k), sr, 0.1, 0.5);
                let m = stft_logmel(&clip, &fb).unwrap();
                for t in 0..m.frames() {
                    let row = m.row(t);
                    let arg = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                    assert_eq!(arg, k, "sr {sr} band {k} frame {t}");
                }
            }
        }
    }

    #[test]
    fn frame_count_tracks_duration_across_rates() {
        let a = tone(1000.0, 16000, 1.0, 0.5);
        let b = tone(1000.0, 32000, 1.0, 0.5);
        let fa = stft_logmel(&a, &build_mel_filterbank(16000, 352).unwrap()).unwrap();
        let fb_ = stft_logmel(&b, &build_mel_filterbank(32000, 704).unwrap()).unwrap();
        assert!((fa.frames() as i64 - fb_.frames() as i64).abs() <= 1);
    }

    fn random_matrix(rng: &mut ChaCha8Rng, frames: usize, width: usize) -> FeatureMatrix {
        let values = (0..frames * width).map(|_| rng.random_range(-30.0..5.0)).collect();
        FeatureMatrix::new(frames, width, values, 0.011).unwrap()
    }

    fn column_stats(m: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
        let w = m.n_features();
        let n = m.frames() as f64;
        let mean: Vec<f64> = (0..w).map(|f| (0..m.frames()).map(|t| m.get(t, f) as f64).sum::<f64>() / n).collect();
        let var = (0..w)
            .map(|f| (0..m.frames()).map(|t| (m.get(t, f) as f64 - mean[f]).powi(2)).sum::<f64>() / n)
            .collect();
        (mean, var)
    }

    #[test]
    fn standardized_training_set_is_centered_and_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 300, 40);
        let b = random_matrix(&mut rng, 200, 40);
        let s = Standardizer::fit([&a, &b]).unwrap();
        let joined = FeatureMatrix::new(500, 40, [a.values(), b.values()].concat(), 0.011).unwrap();
        let (mean, var) = column_stats(&s.apply(&joined).unwrap());
        assert!(mean.iter().all(|m| m.abs() < 1e-6));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-4));

        let back = s.inverse(&s.apply(&a).unwrap()).unwrap();
        for (x, y) in a.values().iter().zip(back.values()) {
            assert!(((x - y) / x.abs().max(1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let m = FeatureMatrix::new(3, 2, vec![4.0, 1.0, 4.0, 2.0, 4.0, 3.0], 0.01).unwrap();
        let s = Standardizer::fit([&m]).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        let out = s.apply(&m).unwrap();
        assert!((0..3).all(|t| out.get(t, 0) == 0.0));
    }

    #[test]
    fn shifted_input_shifts_standardized_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 400, 8);
        let s = Standardizer::fit([&a]).unwrap();
        let shift = 3.0f32;
        let shifted = FeatureMatrix::new(400, 8, a.values().iter().map(|v| v + shift).collect(), 0.011).unwrap();
        let (mean, _) = column_stats(&s.apply(&shifted).unwrap());
        for f in 0..8 {
            let expected = shift as f64 / s.std[f];
            assert!((mean[f] - expected).abs() < 1e-5, "{} vs {expected}", mean[f]);
        }
    }

    fn random_roll(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> EventRoll {
        let mut r = EventRoll::new(frames, classes, 0.011);
        for t in 0..frames {
            for c in 0..classes {
                r.set(t, c, rng.random_bool(0.3));
            }
        }
        r
    }

    #[test]
    fn segmentation_partitions_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(&mut rng, 2048, 4);
        let r = random_roll(&mut rng, 2048, 3);
        assert_eq!(segment_sequences(&m, &r, 1024).unwrap().len(), 2);

        let m = random_matrix(&mut rng, 1000, 4);
        let r = random_roll(&mut rng, 1000, 3);
        let segs = segment_sequences(&m, &r, 1024).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].valid, 1000);
        assert_eq!(segs[0].mask().iter().filter(|&&v| v).count(), 1000);

        let m = random_matrix(&mut rng, 2500, 4);
        let r = random_roll(&mut rng, 2500, 3);
        let segs = segment_sequences(&m, &r, 1024).unwrap();
        let mut values = Vec::new();
        let mut rows = Vec::new();
        for s in &segs {
            values.extend_from_slice(&s.features.values()[..s.valid * 4]);
            for t in 0..s.valid {
                rows.extend_from_slice(s.roll.row(t));
            }
        }
        assert_eq!(values, m.values());
        let original: Vec<bool> = (0..2500).flat_map(|t| r.row(t).to_vec()).collect();
        assert_eq!(rows, original);
    }

    #[test]
    fn feature_cache_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_matrix(&mut rng, 17, 40);
        let bytes = encode_feature_cache(&m);
        assert_eq!(&bytes[..4], b"SEDF");
        assert_eq!(decode_feature_cache(&bytes, 0.011).unwrap(), m);
        assert!(decode_feature_cache(&bytes[..bytes.len() - 1], 0.011).is_err());
    }
}
