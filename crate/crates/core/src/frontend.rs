//! Log-Mel filterbank frontend.
//!
//! Framing: frame `t` covers samples `[t * hop, t * hop + win_length)`; only
//! frames that fit entirely inside the buffer are produced, so a buffer of
//! `n` samples yields `1 + (n - win_length) / hop` frames. Each frame is
//! Hann-windowed, zero-padded to `n_fft`, and its power spectrum is projected
//! onto triangular filters spaced evenly on the HTK mel scale. The output is
//! `ln(energy + log_floor)`.
//!
//! Stacking: output window `i` concatenates frames `i * factor ..
//! i * factor + stack`. Trailing frames that cannot fill a whole stack are
//! dropped.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Analysis window in samples (25 ms).
    pub win_length: usize,
    /// Hop in samples (10 ms, i.e. 100 frames per second).
    pub hop_length: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub stack_size: usize,
    pub downsample: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            win_length: 400,
            hop_length: 160,
            n_fft: 512,
            mel_bins: 40,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            stack_size: 7,
            downsample: 3,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("frontend: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_length == 0 || self.win_length < self.hop_length {
            return bad("window length must be >= hop length > 0");
        }
        if self.n_fft < self.win_length {
            return bad("n_fft must be >= window length");
        }
        if self.mel_bins == 0 || self.stack_size == 0 || self.downsample == 0 {
            return bad("mel_bins, stack_size and downsample must be positive");
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= fmin < fmax <= nyquist");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Seconds between consecutive mel frames.
    pub fn frame_period(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    /// Stacked-window input dimension seen by the model.
    pub fn feature_dim(&self) -> usize {
        self.mel_bins * self.stack_size
    }

    /// Number of mel frames produced from `n` samples.
    pub fn num_frames(&self, n: usize) -> usize {
        if n < self.win_length {
            0
        } else {
            1 + (n - self.win_length) / self.hop_length
        }
    }

    /// Number of stacked windows produced from `frames` mel frames.
    pub fn num_windows(&self, frames: usize) -> usize {
        if frames < self.stack_size {
            0
        } else {
            (frames - self.stack_size) / self.downsample + 1
        }
    }

    /// Smallest sample count that yields at least one stacked window.
    pub fn min_samples(&self) -> usize {
        self.win_length + (self.stack_size - 1) * self.hop_length
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge and center frequencies (Hz) of the triangular filters: `bins + 2`
/// points evenly spaced in mel. Filter `m` rises from point `m`, peaks at
/// `m + 1` and falls to zero at `m + 2`.
pub fn mel_points(cfg: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.mel_bins + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Filterbank matrix `[mel_bins × (n_fft/2 + 1)]`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Array2<f32> {
    let points = mel_points(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::<f32>::zeros((cfg.mel_bins, n_bins));
    for m in 0..cfg.mel_bins {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f > left && f < center {
                (f - left) / (center - left)
            } else if f >= center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, b]] = w as f32;
        }
    }
    fb
}

/// Reusable frontend holding the FFT plan, window and filterbank.
pub struct MelFrontend {
    cfg: FrontendConfig,
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    filterbank: Array2<f32>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("cfg", &self.cfg).finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        let n = cfg.win_length;
        let window = (0..n)
            .map(|i| {
                (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()) as f32
            })
            .collect();
        let filterbank = mel_filterbank(&cfg);
        Ok(Self {
            cfg,
            fft,
            window,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Log-Mel energies `[T × mel_bins]`.
    pub fn mel_frames(&self, audio: &AudioBuffer) -> Result<Array2<f32>> {
        let cfg = &self.cfg;
        if audio.is_empty() {
            return Err(Error::EmptyInput);
        }
        if audio.sample_rate != cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: cfg.sample_rate,
                actual: audio.sample_rate,
            });
        }
        let n_frames = cfg.num_frames(audio.len());
        if n_frames == 0 {
            return Err(Error::SegmentTooShort {
                frames: 0,
                required: 1,
            });
        }
        let samples = audio.to_f32();
        let n_bins = cfg.n_fft / 2 + 1;
        let floor = cfg.log_floor as f32;
        let mut out = Array2::<f32>::zeros((n_frames, cfg.mel_bins));
        let mut buf = vec![Complex::new(0.0f32, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = Array1::<f32>::zeros(n_bins);
        for t in 0..n_frames {
            let start = t * cfg.hop_length;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < cfg.win_length {
                    Complex::new(samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            let energies = self.filterbank.dot(&power);
            for (o, e) in out.row_mut(t).iter_mut().zip(energies.iter()) {
                *o = (e.max(0.0) + floor).ln();
            }
        }
        Ok(out)
    }

    /// Full pipeline: log-Mel, optional normalization, stacking and
    /// downsampling. `origin_offset` is the source-audio time of the first
    /// sample in `audio`.
    pub fn features(
        &self,
        audio: &AudioBuffer,
        normalizer: Option<&Normalizer>,
        origin_offset: f64,
    ) -> Result<FeatureSequence> {
        let mut frames = self.mel_frames(audio)?;
        if let Some(norm) = normalizer {
            norm.apply(&mut frames);
        }
        let mut seq = stack_and_downsample(
            frames.view(),
            self.cfg.stack_size,
            self.cfg.downsample,
            self.cfg.frame_period(),
        )?;
        seq.origin_offset = origin_offset;
        Ok(seq)
    }
}

/// Convenience wrapper building a one-off [`MelFrontend`].
pub fn compute_mel_frames(audio: &AudioBuffer, cfg: &FrontendConfig) -> Result<Array2<f32>> {
    MelFrontend::new(cfg.clone())?.mel_frames(audio)
}

/// Stacked, downsampled model input for one audio segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `[T_down × (mel_bins * stack)]`
    pub windows: Array2<f32>,
    /// Seconds between consecutive windows (`factor × frame period`).
    pub frame_shift: f64,
    /// Source-audio time of the first frame of window 0.
    pub origin_offset: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.windows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.windows.ncols()
    }

    /// Source-audio time of the first constituent frame of window `i`.
    pub fn window_time(&self, i: usize) -> f64 {
        self.origin_offset + i as f64 * self.frame_shift
    }
}

pub fn stack_and_downsample(
    frames: ArrayView2<f32>,
    stack: usize,
    factor: usize,
    frame_period: f64,
) -> Result<FeatureSequence> {
    assert!(stack > 0 && factor > 0, "stack and factor must be positive");
    let (t, bins) = frames.dim();
    if t < stack {
        return Err(Error::SegmentTooShort {
            frames: t,
            required: stack,
        });
    }
    let t_down = (t - stack) / factor + 1;
    let mut windows = Array2::<f32>::zeros((t_down, bins * stack));
    for (i, mut row) in windows.axis_iter_mut(Axis(0)).enumerate() {
        let block = frames.slice(s![i * factor..i * factor + stack, ..]);
        for (dst, src) in row.iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    Ok(FeatureSequence {
        windows,
        frame_shift: factor as f64 * frame_period,
        origin_offset: 0.0,
    })
}

/// Global per-mel-bin affine normalization, estimated on training audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(bins: usize) -> Self {
        Self {
            mean: vec![0.0; bins],
            std: vec![1.0; bins],
        }
    }

    /// Mean and standard deviation over all rows of all matrices.
    pub fn estimate<'a>(frames: impl IntoIterator<Item = ArrayView2<'a, f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in frames {
            if sum.is_empty() {
                sum = vec![0.0; m.ncols()];
                sum_sq = vec![0.0; m.ncols()];
            }
            for row in m.rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sum_sq[j] += (v as f64) * (v as f64);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = sum
            .iter()
            .zip(&sum_sq)
            .map(|(s, q)| {
                let var = (q / n - (s / n) * (s / n)).max(0.0);
                (var.sqrt().max(1e-3)) as f32
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, frames: &mut Array2<f32>) {
        for mut row in frames.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}
