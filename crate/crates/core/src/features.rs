//! Acoustic front end: log mel filterbanks, global normalization, context
//! stacking and frame subsampling.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Mono audio samples with their sample rate.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Little-endian signed 16-bit PCM, scaled to [-1, 1).
    pub fn from_pcm_i16_le(bytes: &[u8], sample_rate: u32) -> Result<Self> {
        if !bytes.len().is_multiple_of(2) {
            return Err(Error::format("pcm16", "odd byte count"));
        }
        let samples = bytes
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
            .collect();
        Self::new(samples, sample_rate)
    }

    /// Little-endian 32-bit float PCM.
    pub fn from_pcm_f32_le(bytes: &[u8], sample_rate: u32) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::format("pcm32f", "byte count not a multiple of 4"));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::new(samples, sample_rate)
    }
}

/// Time-major feature matrix (`T x F`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    pub frame_rate: f64,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: Option<f64>,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 40,
            n_fft: 512,
            f_min: 0.0,
            f_max: None,
            floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_len(&self) -> usize {
        (f64::from(self.sample_rate) * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (f64::from(self.sample_rate) * self.hop_ms / 1000.0).round() as usize
    }

    fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(f64::from(self.sample_rate) / 2.0)
    }

    /// Centre frequencies (Hz) of the triangular filters.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let edges = mel_edges(self);
        edges[1..=self.n_mels]
            .iter()
            .map(|&m| mel_to_hz(m))
            .collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max());
    (0..cfg.n_mels + 2)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)
        .collect()
}

/// Triangular mel filterbank, `n_mels x (n_fft/2 + 1)`, unit peak height.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let hz: Vec<f64> = mel_edges(cfg).into_iter().map(mel_to_hz).collect();
    let bin_hz = f64::from(cfg.sample_rate) / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (hz[m], hz[m + 1], hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

pub fn frame_count(samples: usize, window: usize, hop: usize) -> Option<usize> {
    (samples >= window && hop > 0).then(|| 1 + (samples - window) / hop)
}

/// Hann-windowed power spectrum of one frame, zero padded to `n_fft`.
pub fn power_spectrum(frame: &[f64], n_fft: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = windowed(frame, n_fft);
    fft.process(&mut buf);
    buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn windowed(frame: &[f64], n_fft: usize) -> Vec<Complex<f64>> {
    let win = hann(frame.len());
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (i, (&x, &w)) in frame.iter().zip(&win).enumerate().take(n_fft) {
        buf[i] = Complex::new(x * w, 0.0);
    }
    buf
}

/// Log mel filterbank energies, one row per analysis window.
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<FeatureSequence> {
    let window = cfg.window_len();
    let hop = cfg.hop_len();
    if window == 0 || window > cfg.n_fft {
        return Err(Error::InvalidArgument(format!(
            "window of {window} samples does not fit n_fft {}",
            cfg.n_fft
        )));
    }
    let frames = frame_count(clip.samples.len(), window, hop).ok_or(Error::ClipTooShort {
        samples: clip.samples.len(),
        window,
    })?;
    if clip.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let fb = mel_filterbank(cfg);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut out = Array2::zeros((frames, cfg.n_mels));
    for t in 0..frames {
        let mut buf = windowed(&clip.samples[t * hop..t * hop + window], cfg.n_fft);
        fft.process(&mut buf);
        let power = Array1::from_iter(buf[..cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()));
        let energies = fb.dot(&power);
        out.row_mut(t)
            .assign(&energies.mapv(|e| (e + cfg.floor).ln()));
    }
    FeatureSequence::new(out, f64::from(clip.sample_rate) / hop as f64)
}

/// Concatenates each frame with `left` preceding and `right` following
/// frames, replicating the edge frames at the boundaries.
pub fn stack_context(fs: &FeatureSequence, left: usize, right: usize) -> FeatureSequence {
    let (t_len, dim) = fs.frames.dim();
    let width = left + right + 1;
    let mut out = Array2::zeros((t_len, dim * width));
    for t in 0..t_len {
        for (slot, offset) in (-(left as isize)..=right as isize).enumerate() {
            let src = (t as isize + offset).clamp(0, t_len as isize - 1) as usize;
            out.slice_mut(s![t, slot * dim..(slot + 1) * dim])
                .assign(&fs.frames.row(src));
        }
    }
    FeatureSequence {
        frames: out,
        frame_rate: fs.frame_rate,
    }
}

/// Keeps frames `0, factor, 2*factor, ...`.
pub fn subsample(fs: &FeatureSequence, factor: usize) -> Result<FeatureSequence> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "subsampling factor must be >= 1".into(),
        ));
    }
    let frames = fs.frames.slice(s![..;factor, ..]).to_owned();
    Ok(FeatureSequence {
        frames,
        frame_rate: fs.frame_rate / factor as f64,
    })
}

/// Per-dimension global mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl NormalizerStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, fs: &FeatureSequence) -> Result<()> {
        if fs.dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature dims", self.dim()),
                actual: format!("{} feature dims", fs.dim()),
            });
        }
        Ok(())
    }
}

/// Population statistics over every frame of the corpus; std floored at
/// [`STD_FLOOR`].
pub fn fit_normalizer<'a, I>(corpus: I) -> Result<NormalizerStats>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
{
    let mut count = 0usize;
    let mut sum: Option<Array1<f64>> = None;
    let mut seqs = Vec::new();
    for fs in corpus {
        let acc = sum.get_or_insert_with(|| Array1::zeros(fs.dim()));
        if acc.len() != fs.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature dims", acc.len()),
                actual: format!("{} feature dims", fs.dim()),
            });
        }
        *acc += &fs.frames.sum_axis(Axis(0));
        count += fs.len();
        seqs.push(fs);
    }
    let sum = sum.ok_or(Error::Empty("normalizer corpus"))?;
    if count < 2 {
        return Err(Error::InsufficientData(
            "normalizer needs at least two frames".into(),
        ));
    }
    let mean = sum / count as f64;
    // second pass keeps the variance free of cancellation error
    let mut sq = Array1::<f64>::zeros(mean.len());
    for fs in seqs {
        for row in fs.frames.rows() {
            let d = &row - &mean;
            sq += &(&d * &d);
        }
    }
    let std = (sq / count as f64).mapv(|v| v.sqrt().max(STD_FLOOR));
    Ok(NormalizerStats { mean, std })
}

pub fn normalize(fs: &FeatureSequence, stats: &NormalizerStats) -> Result<FeatureSequence> {
    stats.check(fs)?;
    let frames = (&fs.frames - &stats.mean) / &stats.std;
    Ok(FeatureSequence {
        frames,
        frame_rate: fs.frame_rate,
    })
}

pub fn denormalize(fs: &FeatureSequence, stats: &NormalizerStats) -> Result<FeatureSequence> {
    stats.check(fs)?;
    let frames = &fs.frames * &stats.std + &stats.mean;
    Ok(FeatureSequence {
        frames,
        frame_rate: fs.frame_rate,
    })
}

/// Context stacking followed by subsampling: the model input transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontEnd {
    pub left_context: usize,
    pub right_context: usize,
    pub subsample: usize,
}

impl Default for FrontEnd {
    fn default() -> Self {
        Self {
            left_context: 3,
            right_context: 3,
            subsample: 3,
        }
    }
}

impl FrontEnd {
    pub fn output_dim(&self, feature_dim: usize) -> usize {
        feature_dim * (self.left_context + self.right_context + 1)
    }

    pub fn apply(&self, fs: &FeatureSequence) -> Result<FeatureSequence> {
        subsample(
            &stack_context(fs, self.left_context, self.right_context),
            self.subsample,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn seq(frames: Array2<f64>) -> FeatureSequence {
        FeatureSequence::new(frames, 100.0).unwrap()
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = MelConfig::default();
        let clip = AudioClip::new(vec![0.0; 16_000], 16_000).unwrap();
        let fs = log_mel(&clip, &cfg).unwrap();
        let floor = cfg.floor.ln();
        assert!(fs.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_gives_98_frames() {
        let clip = AudioClip::new(vec![0.1; 16_000], 16_000).unwrap();
        let fs = log_mel(&clip, &MelConfig::default()).unwrap();
        assert_eq!(fs.frames.dim(), (98, 40));
        assert_abs_diff_eq!(fs.frame_rate, 100.0);
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 399], 16_000).unwrap();
        assert!(matches!(
            log_mel(&clip, &MelConfig::default()),
            Err(Error::ClipTooShort { .. })
        ));
    }

    /// Direct O(N^2) DFT as an oracle for the FFT path.
    fn direct_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        let win = hann(frame.len());
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, (&x, &w)) in frame.iter().zip(&win).enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * w * ang.cos();
                    im += x * w * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn sinusoid_peaks_in_its_mel_bin() {
        let cfg = MelConfig::default();
        let centers = cfg.center_frequencies();
        let fb = mel_filterbank(&cfg);
        for k in [3usize, 10, 20, 30, 37] {
            let f = centers[k];
            let samples: Vec<f64> = (0..16_000)
                .map(|n| (2.0 * PI * f * n as f64 / 16_000.0).sin())
                .collect();
            let clip = AudioClip::new(samples.clone(), 16_000).unwrap();
            let fs = log_mel(&clip, &cfg).unwrap();

            let frame = &samples[160 * 10..160 * 10 + 400];
            let oracle = Array1::from(direct_power(frame, cfg.n_fft));
            let fast = Array1::from(power_spectrum(frame, cfg.n_fft));
            for (a, b) in oracle.iter().zip(fast.iter()) {
                assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
            }
            let oracle_energy = fb.dot(&oracle);
            let oracle_argmax = argmax(oracle_energy.iter().copied());
            assert_eq!(oracle_argmax, k);
            for t in 1..fs.len() - 1 {
                assert_eq!(argmax(fs.frames.row(t).iter().copied()), k, "frame {t}");
            }
        }
    }

    fn argmax(it: impl Iterator<Item = f64>) -> usize {
        it.enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }

    #[test]
    fn stacking_single_frame_replicates() {
        let fs = seq(Array2::from_shape_fn((1, 40), |(_, j)| j as f64));
        let out = stack_context(&fs, 3, 3);
        assert_eq!(out.frames.dim(), (1, 280));
        for slot in 0..7 {
            assert_eq!(
                out.frames.slice(s![0, slot * 40..(slot + 1) * 40]),
                fs.frames.row(0)
            );
        }
    }

    #[test]
    fn stacking_center_is_identity() {
        let fs = seq(Array2::from_shape_fn((12, 40), |(i, j)| {
            (i * 40 + j) as f64
        }));
        let out = stack_context(&fs, 3, 3);
        assert_eq!(out.dim(), 280);
        for t in 0..12 {
            assert_eq!(out.frames.slice(s![t, 120..160]), fs.frames.row(t));
        }
    }

    #[test]
    fn subsample_keeps_every_third_frame() {
        let fs = seq(Array2::from_shape_fn((9, 2), |(i, _)| i as f64));
        let out = subsample(&fs, 3).unwrap();
        assert_eq!(out.frames.column(0).to_vec(), vec![0.0, 3.0, 6.0]);
        assert_abs_diff_eq!(out.frame_rate, 100.0 / 3.0);

        let fs7 = seq(Array2::from_shape_fn((7, 2), |(i, _)| i as f64));
        assert_eq!(
            subsample(&fs7, 3).unwrap().frames.column(0).to_vec(),
            vec![0.0, 3.0, 6.0]
        );
        assert_eq!(subsample(&fs7, 1).unwrap(), fs7);
        assert!(subsample(&fs7, 0).is_err());
    }

    #[test]
    fn normalizer_hand_values() {
        let fs = seq(array![[0.0], [2.0]]);
        let stats = fit_normalizer([&fs]).unwrap();
        assert_abs_diff_eq!(stats.mean[0], 1.0);
        assert_abs_diff_eq!(stats.std[0], 1.0);

        let same = seq(Array2::from_elem((5, 3), 4.0));
        let stats = fit_normalizer([&same]).unwrap();
        assert!(stats.std.iter().all(|&s| s == STD_FLOOR));
    }

    #[test]
    fn normalizer_errors() {
        let empty: Vec<&FeatureSequence> = Vec::new();
        assert!(matches!(fit_normalizer(empty), Err(Error::Empty(_))));
        let one = seq(array![[1.0, 2.0]]);
        assert!(fit_normalizer([&one]).is_err());
        let stats = NormalizerStats::identity(3);
        assert!(matches!(
            normalize(&one, &stats),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn normalize_simple_cases() {
        let fs = seq(array![[1.0, 2.0], [3.0, 4.0]]);
        let id = NormalizerStats::identity(2);
        assert_eq!(normalize(&fs, &id).unwrap(), fs);
        let stats = NormalizerStats {
            mean: array![1.0, 2.0],
            std: array![0.5, 3.0],
        };
        let at_mean = seq(array![[1.0, 2.0]]);
        assert!(normalize(&at_mean, &stats)
            .unwrap()
            .frames
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_corpus_is_standardized() {
        let a = seq(Array2::from_shape_fn((13, 4), |(i, j)| {
            ((i * 7 + j * 3) % 11) as f64 * (j + 1) as f64
        }));
        let b = seq(Array2::from_shape_fn((5, 4), |(i, j)| {
            (i as f64).sin() + j as f64
        }));
        let stats = fit_normalizer([&a, &b]).unwrap();
        let na = normalize(&a, &stats).unwrap();
        let nb = normalize(&b, &stats).unwrap();
        // independent recomputation of the statistics
        let all: Vec<f64> = (0..4)
            .flat_map(|j| {
                na.frames
                    .column(j)
                    .iter()
                    .chain(nb.frames.column(j).iter())
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect();
        for j in 0..4 {
            let col = &all[j * 18..(j + 1) * 18];
            let m = col.iter().sum::<f64>() / 18.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 18.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v.sqrt(), 1.0, epsilon = 1e-12);
        }
        let refit = fit_normalizer([&na, &nb]).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(refit.mean[j], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(refit.std[j], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pcm_decoding() {
        let bytes = [0x00, 0x80, 0x00, 0x40];
        let clip = AudioClip::from_pcm_i16_le(&bytes, 8000).unwrap();
        assert_eq!(clip.samples, vec![-1.0, 0.5]);
        let f = 0.25f32.to_le_bytes();
        let clip = AudioClip::from_pcm_f32_le(&f, 8000).unwrap();
        assert_eq!(clip.samples, vec![0.25]);
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }
}
