use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureMatrix, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_length_s: f64,
    pub frame_shift_s: f64,
    pub num_filters: usize,
    pub num_ceps: usize,
    pub preemphasis: f64,
    pub energy_floor: f64,
    pub low_freq: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub high_freq: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            frame_length_s: 0.025,
            frame_shift_s: 0.010,
            num_filters: 23,
            num_ceps: 23,
            preemphasis: 0.97,
            energy_floor: 1e-10,
            low_freq: 0.0,
            high_freq: None,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reflect-pad index lookup (no edge repeat).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Precomputed MFCC extractor: window, filterbank, DCT basis and FFT plan.
pub struct Mfcc {
    cfg: MfccConfig,
    frame_len: usize,
    shift: usize,
    fft_len: usize,
    window: Vec<f64>,
    /// One row per filter, one column per FFT bin in `0..=fft_len/2`.
    filterbank: DMatrix<f64>,
    /// `num_ceps x num_filters`, orthonormal DCT-II rows.
    dct: DMatrix<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        if cfg.sample_rate == 0 || cfg.num_filters == 0 || cfg.num_ceps == 0 {
            return Err(Error::invalid(
                "MFCC config needs positive rate, filters and coefficients",
            ));
        }
        if cfg.num_ceps > cfg.num_filters {
            return Err(Error::invalid("num_ceps cannot exceed num_filters"));
        }
        let sr = cfg.sample_rate as f64;
        let frame_len = (cfg.frame_length_s * sr).round() as usize;
        let shift = (cfg.frame_shift_s * sr).round() as usize;
        if frame_len < 2 || shift == 0 {
            return Err(Error::invalid(
                "frame length/shift too small for the sample rate",
            ));
        }
        let fft_len = frame_len.next_power_of_two();
        let bins = fft_len / 2 + 1;

        let window = (0..frame_len)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (frame_len - 1) as f64).cos())
            .collect();

        let high = cfg.high_freq.unwrap_or(sr / 2.0);
        if !(cfg.low_freq >= 0.0 && high > cfg.low_freq && high <= sr / 2.0) {
            return Err(Error::invalid(
                "filterbank edges must satisfy 0 <= low < high <= Nyquist",
            ));
        }
        let (mel_lo, mel_hi) = (hz_to_mel(cfg.low_freq), hz_to_mel(high));
        let m = cfg.num_filters;
        let edges: Vec<f64> = (0..m + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (m + 1) as f64))
            .collect();
        let mut filterbank = DMatrix::zeros(m, bins);
        for f in 0..m {
            let (l, c, r) = (edges[f], edges[f + 1], edges[f + 2]);
            for k in 0..bins {
                let hz = k as f64 * sr / fft_len as f64;
                filterbank[(f, k)] = if hz > l && hz <= c {
                    (hz - l) / (c - l)
                } else if hz > c && hz < r {
                    (r - hz) / (r - c)
                } else {
                    0.0
                };
            }
        }

        let dct = DMatrix::from_fn(cfg.num_ceps, m, |k, j| {
            let scale = if k == 0 {
                (1.0 / m as f64).sqrt()
            } else {
                (2.0 / m as f64).sqrt()
            };
            scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()
        });

        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        Ok(Mfcc {
            cfg,
            frame_len,
            shift,
            fft_len,
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Frame count for `num_samples`: `round(num_samples / shift)`.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        (num_samples + self.shift / 2) / self.shift
    }

    pub fn compute(&self, wave: &Waveform) -> Result<FeatureMatrix> {
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(Error::invalid(format!(
                "waveform is {} Hz but the extractor expects {} Hz",
                wave.sample_rate, self.cfg.sample_rate
            )));
        }
        let n = wave.samples.len();
        if n < self.frame_len {
            return Err(Error::invalid(format!(
                "signal has {n} samples, shorter than one {}-sample frame",
                self.frame_len
            )));
        }
        let frames = self.num_frames(n);
        let bins = self.fft_len / 2 + 1;
        let mut out = DMatrix::zeros(frames, self.cfg.num_ceps);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let mut raw = vec![0.0; self.frame_len];
        let mut power = nalgebra::DVector::zeros(bins);
        let half = (self.frame_len / 2) as isize;

        for t in 0..frames {
            // frame t is centred at t*shift + shift/2
            let start = (t * self.shift + self.shift / 2) as isize - half;
            for (i, r) in raw.iter_mut().enumerate() {
                *r = wave.samples[reflect(start + i as isize, n)];
            }
            let pre = self.cfg.preemphasis;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.frame_len {
                    let prev = if i == 0 { raw[0] } else { raw[i - 1] };
                    Complex::new((raw[i] - pre * prev) * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for k in 0..bins {
                power[k] = buf[k].norm_sqr();
            }
            let log_mel = (&self.filterbank * &power).map(|e| e.max(self.cfg.energy_floor).ln());
            let ceps = &self.dct * log_mel;
            out.row_mut(t).copy_from(&ceps.transpose());
        }

        Ok(FeatureMatrix {
            values: out,
            frame_shift_s: self.cfg.frame_shift_s,
            frame_length_s: self.cfg.frame_length_s,
        })
    }
}

/// One-shot MFCC extraction.
pub fn compute_mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    Mfcc::new(cfg.clone())?.compute(wave)
}
