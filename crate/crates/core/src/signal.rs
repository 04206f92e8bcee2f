//! Complex baseband excitation waveforms: CP-OFDM generation, crest
//! factor reduction, PAPR measurement, and per-component normalization.

use crate::error::{Error, Result};
use crate::fft::{fft, ifft};
use crate::rng::substream;
use num_complex::Complex64;
use rand::Rng;
use std::f64::consts::PI;

/// Complex baseband sample sequence with sample-rate metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    pub label: String,
}

impl Waveform {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64, label: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("waveform must contain at least one sample"));
        }
        if !sample_rate_hz.is_finite() || sample_rate_hz <= 0.0 {
            return Err(Error::config(format!(
                "sample rate must be finite and positive, got {sample_rate_hz}"
            )));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::config("waveform contains non-finite samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of |x[n]|^2.
    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.len() as f64
    }

    /// Max of |x[n]|^2.
    pub fn peak_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).fold(0.0, f64::max)
    }

    /// Copy with every sample multiplied by a real factor.
    pub fn scaled(&self, factor: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            sample_rate_hz: self.sample_rate_hz,
            label: self.label.clone(),
        }
    }
}

/// Peak-to-average power ratio in dB.
pub fn papr_db(w: &Waveform) -> Result<f64> {
    let mean = w.mean_power();
    if mean <= 0.0 {
        return Err(Error::numeric("PAPR of an all-zero waveform is undefined"));
    }
    Ok(10.0 * (w.peak_power() / mean).log10())
}

/// CP-OFDM frame description plus the frozen subcarrier symbols.
///
/// Active bins straddle DC symmetrically with the DC bin left empty;
/// `subcarrier_symbols` is indexed `[symbol][subcarrier]` with
/// subcarriers in ascending frequency order.
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmPlan {
    pub fft_size: usize,
    pub active_subcarriers: usize,
    pub cp_len: usize,
    pub num_symbols: usize,
    pub qam_order: usize,
    pub subcarrier_symbols: Vec<Vec<Complex64>>,
    pub seed: u64,
}

impl OfdmPlan {
    /// Plan with symbols left empty; `generate_ofdm` draws them from `seed`.
    pub fn new(
        fft_size: usize,
        active_subcarriers: usize,
        cp_len: usize,
        num_symbols: usize,
        qam_order: usize,
        seed: u64,
    ) -> Result<Self> {
        let plan = OfdmPlan {
            fft_size,
            active_subcarriers,
            cp_len,
            num_symbols,
            qam_order,
            subcarrier_symbols: Vec::new(),
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::config("fft_size must be a power of two"));
        }
        if self.active_subcarriers == 0 || self.active_subcarriers >= self.fft_size {
            return Err(Error::config(
                "active_subcarriers must satisfy 1 <= active < fft_size",
            ));
        }
        if self.num_symbols == 0 {
            return Err(Error::config("num_symbols must be >= 1"));
        }
        if !matches!(self.qam_order, 4 | 16 | 64 | 256) {
            return Err(Error::config("qam_order must be one of 4, 16, 64, 256"));
        }
        if !self.subcarrier_symbols.is_empty()
            && (self.subcarrier_symbols.len() != self.num_symbols
                || self.subcarrier_symbols.iter().any(|r| r.len() != self.active_subcarriers))
        {
            return Err(Error::config("subcarrier_symbols shape mismatch"));
        }
        Ok(())
    }

    /// Signed bin offsets of the active subcarriers in ascending frequency
    /// order. DC is skipped; the negative side holds floor(active/2) bins.
    pub fn bin_offsets(&self) -> Vec<i64> {
        let neg = (self.active_subcarriers / 2) as i64;
        let pos = self.active_subcarriers as i64 - neg;
        (-neg..0).chain(1..=pos).collect()
    }

    /// Samples per OFDM symbol at `oversample` times the critical rate.
    pub fn symbol_len(&self, oversample: usize) -> usize {
        self.fft_size * oversample + self.cp_len
    }

    /// Total waveform length for the full frame.
    pub fn frame_len(&self, oversample: usize) -> usize {
        self.symbol_len(oversample) * self.num_symbols
    }

    /// Occupied band edges in normalized frequency (cycles/sample at the
    /// oversampled rate).
    pub fn occupied_band(&self, oversample: usize) -> (f64, f64) {
        let n = (self.fft_size * oversample) as f64;
        let neg = (self.active_subcarriers / 2) as f64;
        let pos = (self.active_subcarriers - self.active_subcarriers / 2) as f64;
        (-(neg + 0.5) / n, (pos + 0.5) / n)
    }
}

/// One point of the unit-average-power square QAM grid.
pub fn qam_point(order: usize, i_idx: usize, q_idx: usize) -> Complex64 {
    let m = (order as f64).sqrt() as usize;
    debug_assert!(m * m == order && i_idx < m && q_idx < m);
    let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
    let level = |idx: usize| (2.0 * idx as f64 - (m as f64 - 1.0)) / scale;
    Complex64::new(level(i_idx), level(q_idx))
}

fn draw_symbols(plan: &OfdmPlan) -> Vec<Vec<Complex64>> {
    let m = (plan.qam_order as f64).sqrt() as usize;
    let mut rng = substream(plan.seed, "signal/qam");
    (0..plan.num_symbols)
        .map(|_| {
            (0..plan.active_subcarriers)
                .map(|_| {
                    let i_idx = rng.gen_range(0..m);
                    let q_idx = rng.gen_range(0..m);
                    qam_point(plan.qam_order, i_idx, q_idx)
                })
                .collect()
        })
        .collect()
}

/// Build the time-domain CP-OFDM waveform for `plan` at `oversample`
/// times the critical rate, normalized to unit mean power.
///
/// If the plan carries no symbols they are drawn deterministically from
/// `plan.seed`; the returned plan always carries the symbols actually
/// used, so demodulation can recover the ideal constellation.
pub fn generate_ofdm(
    plan: &OfdmPlan,
    oversample: usize,
    sample_rate_hz: f64,
) -> Result<(Waveform, OfdmPlan)> {
    plan.validate()?;
    if oversample == 0 {
        return Err(Error::config("oversample must be >= 1"));
    }
    let n = plan.fft_size * oversample;
    // active bins must fit with DC empty
    if plan.active_subcarriers >= n {
        return Err(Error::config("active subcarriers exceed IFFT size"));
    }

    let mut filled = plan.clone();
    if filled.subcarrier_symbols.is_empty() {
        filled.subcarrier_symbols = draw_symbols(plan);
    }

    let offsets = filled.bin_offsets();
    let mut samples = Vec::with_capacity(filled.frame_len(oversample));
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    for row in &filled.subcarrier_symbols {
        for v in spectrum.iter_mut() {
            *v = Complex64::new(0.0, 0.0);
        }
        for (sym, &off) in row.iter().zip(offsets.iter()) {
            let bin = if off >= 0 { off as usize } else { (n as i64 + off) as usize };
            spectrum[bin] = *sym;
        }
        let time = ifft(&spectrum);
        samples.extend_from_slice(&time[n - plan.cp_len..]);
        samples.extend_from_slice(&time);
    }

    let mut w = Waveform::new(samples, sample_rate_hz, "ofdm")?;
    let p = w.mean_power();
    if p <= 0.0 {
        return Err(Error::numeric("generated frame has zero power"));
    }
    let scale = (1.0 / p).sqrt();
    for s in w.samples.iter_mut() {
        *s *= scale;
    }
    Ok((w, filled))
}

/// Per-component normalization statistics (population convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean_i: f64,
    pub mean_q: f64,
    pub std_i: f64,
    pub std_q: f64,
}

/// Fit zero-mean/unit-variance statistics on a waveform.
pub fn fit_norm(w: &Waveform) -> Result<NormStats> {
    if w.len() < 2 {
        return Err(Error::config("normalization needs at least 2 samples"));
    }
    let n = w.len() as f64;
    let mean_i = w.samples.iter().map(|s| s.re).sum::<f64>() / n;
    let mean_q = w.samples.iter().map(|s| s.im).sum::<f64>() / n;
    let var_i = w.samples.iter().map(|s| (s.re - mean_i).powi(2)).sum::<f64>() / n;
    let var_q = w.samples.iter().map(|s| (s.im - mean_q).powi(2)).sum::<f64>() / n;
    if var_i <= 0.0 || var_q <= 0.0 {
        return Err(Error::config("zero variance: cannot normalize a constant component"));
    }
    Ok(NormStats {
        mean_i,
        mean_q,
        std_i: var_i.sqrt(),
        std_q: var_q.sqrt(),
    })
}

/// Apply `(x - mean) / std` per component.
pub fn apply_norm(w: &Waveform, stats: &NormStats) -> Waveform {
    let samples = w
        .samples
        .iter()
        .map(|s| Complex64::new((s.re - stats.mean_i) / stats.std_i, (s.im - stats.mean_q) / stats.std_q))
        .collect();
    Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
        label: w.label.clone(),
    }
}

/// Inverse of [`apply_norm`].
pub fn invert_norm(w: &Waveform, stats: &NormStats) -> Waveform {
    let samples = w
        .samples
        .iter()
        .map(|s| Complex64::new(s.re * stats.std_i + stats.mean_i, s.im * stats.std_q + stats.mean_q))
        .collect();
    Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
        label: w.label.clone(),
    }
}

/// Outcome of crest factor reduction.
#[derive(Debug, Clone)]
pub struct CfrResult {
    pub waveform: Waveform,
    /// Set when the measured output PAPR still exceeds target + 0.3 dB.
    pub target_missed: bool,
    pub iterations: usize,
}

const CFR_MAX_ITERS: usize = 10;
const CFR_TOLERANCE_DB: f64 = 0.3;
const CFR_FIR_TAPS: usize = 129;

/// Reduce PAPR to `target_papr_db` by iterative clipping with an
/// in-band-preserving FIR filter between iterations; the occupied band
/// is estimated from the input spectrum.
pub fn crest_factor_reduce(w: &Waveform, target_papr_db: f64) -> Result<CfrResult> {
    let band = estimate_occupied_band(w)?;
    crest_factor_reduce_with_band(w, target_papr_db, band)
}

/// Crest factor reduction with an explicitly known occupied band
/// (normalized frequency edges).
pub fn crest_factor_reduce_with_band(
    w: &Waveform,
    target_papr_db: f64,
    band: (f64, f64),
) -> Result<CfrResult> {
    if target_papr_db <= 0.0 {
        return Err(Error::config("target PAPR must be positive"));
    }
    let input_papr = papr_db(w)?;
    if input_papr <= target_papr_db {
        return Ok(CfrResult {
            waveform: w.clone(),
            target_missed: false,
            iterations: 0,
        });
    }

    let power_in = w.mean_power();
    let kernel = bandpass_kernel(band, CFR_FIR_TAPS);
    let clip_lin = 10f64.powf(target_papr_db / 10.0);

    let clip = |x: &mut Vec<Complex64>| {
        let pm = x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64;
        let thresh = (pm * clip_lin).sqrt();
        for s in x.iter_mut() {
            let r = s.norm();
            if r > thresh {
                *s *= thresh / r;
            }
        }
    };

    // every exit path ends on a clip stage, so the output PAPR sits at
    // the target (plus the small mean-power drop the clip causes) and
    // can never exceed the input PAPR
    let mut x = w.samples.clone();
    clip(&mut x);
    let mut iterations = 1;
    for _ in 1..CFR_MAX_ITERS {
        x = fir_filter_same(&x, &kernel);
        let pm = x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64;
        let regrown = 10.0 * (x.iter().map(|s| s.norm_sqr()).fold(0.0, f64::max) / pm).log10();
        clip(&mut x);
        iterations += 1;
        if regrown <= target_papr_db + CFR_TOLERANCE_DB / 3.0 {
            break;
        }
    }

    // restore the input mean power
    let pm = x.iter().map(|s| s.norm_sqr()).sum::<f64>() / x.len() as f64;
    let scale = (power_in / pm).sqrt();
    for s in x.iter_mut() {
        *s *= scale;
    }

    let out = Waveform::new(x, w.sample_rate_hz, w.label.clone())?;
    let out_papr = papr_db(&out)?;
    Ok(CfrResult {
        target_missed: out_papr > target_papr_db + CFR_TOLERANCE_DB,
        waveform: out,
        iterations,
    })
}

/// Hann-windowed complex bandpass kernel covering `band` plus a small
/// transition allowance.
fn bandpass_kernel(band: (f64, f64), taps: usize) -> Vec<Complex64> {
    let (lo, hi) = band;
    let center = 0.5 * (lo + hi);
    let half_bw = 0.5 * (hi - lo);
    // widen so the in-band edge sits on the flat part of the response
    let cutoff = (half_bw + 2.0 / taps as f64).min(0.49);
    let mid = (taps - 1) as f64 / 2.0;
    (0..taps)
        .map(|k| {
            let t = k as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let win = 0.5 * (1.0 - (2.0 * PI * k as f64 / (taps - 1) as f64).cos());
            Complex64::from_polar(1.0, 2.0 * PI * center * t) * sinc * win
        })
        .collect()
}

/// Linear convolution keeping the centered `input.len()` samples, so a
/// symmetric kernel introduces no net delay.
fn fir_filter_same(input: &[Complex64], kernel: &[Complex64]) -> Vec<Complex64> {
    let half = kernel.len() / 2;
    let n = input.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, c) in kernel.iter().enumerate() {
            let j = i as i64 + half as i64 - k as i64;
            if j >= 0 && (j as usize) < n {
                acc += c * input[j as usize];
            }
        }
        *o = acc;
    }
    out
}

/// Estimate the contiguous occupied band from Hann periodograms,
/// thresholded 40 dB below the strongest bin.
pub fn estimate_occupied_band(w: &Waveform) -> Result<(f64, f64)> {
    let seg = w.len().min(4096).next_power_of_two().min(w.len());
    let seg = if seg.is_power_of_two() { seg } else { seg.next_power_of_two() / 2 };
    if seg < 2 {
        return Err(Error::config("waveform too short for band estimation"));
    }
    let window: Vec<f64> = (0..seg)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / (seg - 1) as f64).cos()))
        .collect();
    let nseg = (w.len() / seg).max(1);
    let mut acc = vec![0.0f64; seg];
    for s in 0..nseg {
        let chunk: Vec<Complex64> = w.samples[s * seg..s * seg + seg]
            .iter()
            .zip(window.iter())
            .map(|(x, win)| x * win)
            .collect();
        let spec = fft(&chunk);
        for (a, v) in acc.iter_mut().zip(spec.iter()) {
            *a += v.norm_sqr();
        }
    }
    let peak = acc.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::numeric("cannot estimate band of an all-zero waveform"));
    }
    let thr = peak * 1e-4;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (k, &p) in acc.iter().enumerate() {
        if p >= thr {
            let f = if k < seg / 2 {
                k as f64 / seg as f64
            } else {
                k as f64 / seg as f64 - 1.0
            };
            lo = lo.min(f);
            hi = hi.max(f);
        }
    }
    let margin = 1.0 / seg as f64;
    Ok(((lo - margin).max(-0.5), (hi + margin).min(0.5)))
}
