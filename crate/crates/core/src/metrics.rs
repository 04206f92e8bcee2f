//! Evaluation metrics: NMSE, software-measured ACPR over Welch PSD
//! estimates, RMS EVM from OFDM demodulation, and the combined report.

use crate::error::{Error, Result};
use crate::fft::fft;
use crate::signal::{papr_db, OfdmPlan, Waveform};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Floor replacing -inf in log-domain metrics.
pub const DB_FLOOR: f64 = -200.0;

/// Normalized mean square error in dB between a reference and a model
/// output (time domain, both I/Q components).
pub fn nmse_db(y: &Waveform, y_hat: &Waveform) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::config("waveform lengths differ"));
    }
    let mut err = 0.0;
    let mut sig = 0.0;
    for (a, b) in y.samples.iter().zip(y_hat.samples.iter()) {
        err += (a.re - b.re).powi(2) + (a.im - b.im).powi(2);
        sig += a.re * a.re + a.im * a.im;
    }
    if sig <= 0.0 {
        return Err(Error::numeric("reference waveform has zero energy"));
    }
    if err == 0.0 {
        return Ok(DB_FLOOR);
    }
    Ok((10.0 * (err / sig).log10()).max(DB_FLOOR))
}

/// Window applied to Welch segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Rectangular,
    Hann,
}

impl WindowKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WindowKind::Rectangular => "rectangular",
            WindowKind::Hann => "hann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rectangular" => Ok(WindowKind::Rectangular),
            "hann" => Ok(WindowKind::Hann),
            other => Err(Error::config(format!("unknown window '{other}'"))),
        }
    }

    fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / (n - 1) as f64).cos()))
                .collect(),
        }
    }
}

/// Power spectral density estimate over normalized frequency.
#[derive(Debug, Clone)]
pub struct PsdEstimate {
    /// Normalized frequency, cycles/sample, ascending in [-0.5, 0.5).
    pub freqs: Vec<f64>,
    /// Linear density per bin; integrating over frequency gives power.
    pub power: Vec<f64>,
    pub segment_len: usize,
    pub overlap: f64,
    pub window_kind: WindowKind,
}

impl PsdEstimate {
    /// Sum of density times bin width.
    pub fn integrated_power(&self) -> f64 {
        self.power.iter().sum::<f64>() / self.segment_len as f64
    }

    /// Sum of density over a frequency band [lo, hi).
    pub fn band_power(&self, lo: f64, hi: f64) -> Result<f64> {
        let mut acc = 0.0;
        let mut bins = 0usize;
        for (f, p) in self.freqs.iter().zip(self.power.iter()) {
            if *f >= lo && *f < hi {
                acc += p;
                bins += 1;
            }
        }
        if bins == 0 {
            return Err(Error::config(format!("band [{lo}, {hi}) contains no bins")));
        }
        Ok(acc)
    }
}

/// Welch's averaged modified periodogram. Density is normalized by the
/// window power so the integrated estimate matches the mean signal
/// power; the frequency axis is DC-centered.
pub fn welch_psd(
    w: &Waveform,
    segment_len: usize,
    overlap_frac: f64,
    window_kind: WindowKind,
) -> Result<PsdEstimate> {
    if !segment_len.is_power_of_two() || segment_len < 2 {
        return Err(Error::config("segment_len must be a power of two >= 2"));
    }
    if segment_len > w.len() {
        return Err(Error::config("segment_len exceeds waveform length"));
    }
    if !(0.0..=0.9).contains(&overlap_frac) {
        return Err(Error::config("overlap_frac must lie in [0, 0.9]"));
    }
    let n = segment_len;
    let window = window_kind.coefficients(n);
    let win_energy: f64 = window.iter().map(|v| v * v).sum();
    let step = ((n as f64) * (1.0 - overlap_frac)).max(1.0) as usize;

    let mut acc = vec![0.0f64; n];
    let mut segments = 0usize;
    let mut start = 0usize;
    while start + n <= w.len() {
        let buf: Vec<Complex64> = w.samples[start..start + n]
            .iter()
            .zip(window.iter())
            .map(|(s, wk)| s * wk)
            .collect();
        let spec = fft(&buf);
        for (a, v) in acc.iter_mut().zip(spec.iter()) {
            *a += v.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (win_energy * segments as f64);
    for a in acc.iter_mut() {
        *a *= scale;
    }

    // fftshift to a DC-centered axis
    let half = n / 2;
    let mut power = vec![0.0; n];
    let mut freqs = vec![0.0; n];
    for k in 0..n {
        power[k] = acc[(k + half) % n];
        freqs[k] = (k as f64 - half as f64) / n as f64;
    }
    Ok(PsdEstimate {
        freqs,
        power,
        segment_len: n,
        overlap: overlap_frac,
        window_kind,
    })
}

/// Main and adjacent channel definition over normalized frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelMask {
    pub main: (f64, f64),
    /// Center-to-center offset of the adjacent channels from the main
    /// channel center.
    pub adj_offset: f64,
    pub adj_bandwidth: f64,
}

impl ChannelMask {
    /// Contiguous-adjacent convention: the adjacent channel has the main
    /// channel's bandwidth, centered one bandwidth away.
    pub fn contiguous(main: (f64, f64)) -> Self {
        let bw = main.1 - main.0;
        ChannelMask {
            main,
            adj_offset: bw,
            adj_bandwidth: bw,
        }
    }

    fn bands(&self) -> ((f64, f64), (f64, f64), (f64, f64)) {
        let center = 0.5 * (self.main.0 + self.main.1);
        let half = 0.5 * self.adj_bandwidth;
        let lower = (center - self.adj_offset - half, center - self.adj_offset + half);
        let upper = (center + self.adj_offset - half, center + self.adj_offset + half);
        (self.main, lower, upper)
    }

    pub fn validate(&self) -> Result<()> {
        let (main, lower, upper) = self.bands();
        if main.0 >= main.1 || self.adj_bandwidth <= 0.0 || self.adj_offset <= 0.0 {
            return Err(Error::config("degenerate channel mask"));
        }
        if lower.0 < -0.5 || upper.1 > 0.5 {
            return Err(Error::config("adjacent bands exceed Nyquist"));
        }
        if lower.1 > main.0 + 1e-12 && lower.0 < main.1 - 1e-12 {
            return Err(Error::config("lower adjacent band overlaps the main band"));
        }
        if upper.0 < main.1 - 1e-12 && upper.1 > main.0 + 1e-12 {
            return Err(Error::config("upper adjacent band overlaps the main band"));
        }
        Ok(())
    }
}

/// Adjacent-channel power ratios in dB: (lower, upper, combined), with
/// the combined value the mean of the two linear ratios.
pub fn acpr_db(psd: &PsdEstimate, mask: &ChannelMask) -> Result<(f64, f64, f64)> {
    mask.validate()?;
    let (main, lower, upper) = mask.bands();
    let p_main = psd.band_power(main.0, main.1)?;
    let p_lo = psd.band_power(lower.0, lower.1)?;
    let p_hi = psd.band_power(upper.0, upper.1)?;
    if p_main <= 0.0 {
        return Err(Error::numeric("main channel has zero power"));
    }
    let to_db = |ratio: f64| (10.0 * ratio.max(1e-30).log10()).max(DB_FLOOR);
    let r_lo = p_lo / p_main;
    let r_hi = p_hi / p_main;
    Ok((to_db(r_lo), to_db(r_hi), to_db(0.5 * (r_lo + r_hi))))
}

/// RMS error vector magnitude in percent between demodulated and ideal
/// symbol matrices.
pub fn evm_rms_percent(demod: &[Vec<Complex64>], ideal: &[Vec<Complex64>]) -> Result<f64> {
    if demod.len() != ideal.len() || demod.is_empty() {
        return Err(Error::config("symbol matrices differ in shape"));
    }
    let mut s_error = 0.0;
    let mut s_ref = 0.0;
    for (dr, ir) in demod.iter().zip(ideal.iter()) {
        if dr.len() != ir.len() {
            return Err(Error::config("symbol matrices differ in shape"));
        }
        for (d, i) in dr.iter().zip(ir.iter()) {
            s_error += (d - i).norm_sqr();
            s_ref += i.norm_sqr();
        }
    }
    if s_ref <= 0.0 {
        return Err(Error::numeric("ideal symbols have zero energy"));
    }
    Ok(100.0 * (s_error / s_ref).sqrt())
}

/// Demodulate OFDM symbols from a waveform segment that starts
/// `frame_offset` samples into the frame described by `plan`. Only the
/// symbols fully contained in the segment are used. A single complex
/// least-squares gain over the whole segment removes linear
/// scaling/rotation before EVM.
///
/// Returns the equalized received symbols and the aligned ideal rows.
pub fn ofdm_demod_aligned(
    w: &Waveform,
    plan: &OfdmPlan,
    oversample: usize,
    frame_offset: usize,
) -> Result<(Vec<Vec<Complex64>>, Vec<Vec<Complex64>>)> {
    plan.validate()?;
    if plan.subcarrier_symbols.is_empty() {
        return Err(Error::config("plan carries no symbols to demodulate against"));
    }
    let n = plan.fft_size * oversample;
    let sym_len = plan.symbol_len(oversample);
    let first_symbol = frame_offset.div_ceil(sym_len);
    let skip = first_symbol * sym_len - frame_offset;
    if first_symbol >= plan.num_symbols || skip + sym_len > w.len() {
        return Err(Error::config("segment too short for one full OFDM symbol"));
    }
    let avail = (w.len() - skip) / sym_len;
    let count = avail.min(plan.num_symbols - first_symbol);

    let offsets = plan.bin_offsets();
    let mut received = Vec::with_capacity(count);
    let mut ideal = Vec::with_capacity(count);
    for s in 0..count {
        let start = skip + s * sym_len + plan.cp_len;
        let spec = fft(&w.samples[start..start + n]);
        let row: Vec<Complex64> = offsets
            .iter()
            .map(|&off| {
                let bin = if off >= 0 { off as usize } else { (n as i64 + off) as usize };
                spec[bin]
            })
            .collect();
        received.push(row);
        ideal.push(plan.subcarrier_symbols[first_symbol + s].clone());
    }

    // least-squares gain: minimizes ||received - g * ideal||
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for (rr, ir) in received.iter().zip(ideal.iter()) {
        for (r, i) in rr.iter().zip(ir.iter()) {
            num += i.conj() * r;
            den += i.norm_sqr();
        }
    }
    if den <= 0.0 || num.norm() == 0.0 {
        return Err(Error::numeric("cannot equalize: zero reference or received energy"));
    }
    let gain = num / den;
    for row in received.iter_mut() {
        for v in row.iter_mut() {
            *v /= gain;
        }
    }
    Ok((received, ideal))
}

/// Demodulate a full frame (offset zero) and return the equalized
/// symbol matrix.
pub fn ofdm_demod(w: &Waveform, plan: &OfdmPlan, oversample: usize) -> Result<Vec<Vec<Complex64>>> {
    Ok(ofdm_demod_aligned(w, plan, oversample, 0)?.0)
}

/// One comparison row for a model against the measured output.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub model: String,
    pub nmse_db: f64,
    pub acpr_lo_db: f64,
    pub acpr_hi_db: f64,
    pub acpr_db: f64,
    pub evm_pct: f64,
    pub papr_db: f64,
    pub params: usize,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "model,nmse_db,acpr_lo_db,acpr_hi_db,acpr_db,evm_pct,papr_db,params"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            self.nmse_db,
            self.acpr_lo_db,
            self.acpr_hi_db,
            self.acpr_db,
            self.evm_pct,
            self.papr_db,
            self.params
        )
    }
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "model:   {}", self.model)?;
        writeln!(f, "NMSE:    {:.2} dB", self.nmse_db)?;
        writeln!(
            f,
            "ACPR:    {:.2} dB (lower {:.2}, upper {:.2})",
            self.acpr_db, self.acpr_lo_db, self.acpr_hi_db
        )?;
        writeln!(f, "EVM:     {:.3} %", self.evm_pct)?;
        writeln!(f, "PAPR:    {:.2} dB", self.papr_db)?;
        write!(f, "params:  {}", self.params)
    }
}

/// Demodulation context for EVM: the plan, the oversampling factor, and
/// the sample offset of the evaluated segment within the frame.
pub struct EvmContext<'a> {
    pub plan: &'a OfdmPlan,
    pub oversample: usize,
    pub frame_offset: usize,
}

/// Assemble the evaluation report for one model's test-split output.
///
/// `measured` and `model_out` are the de-normalized test-block
/// waveforms; EVM is skipped (NaN) when no demodulation context exists.
#[allow(clippy::too_many_arguments)]
pub fn metrics_report(
    model_name: &str,
    measured: &Waveform,
    model_out: &Waveform,
    mask: &ChannelMask,
    segment_len: usize,
    overlap: f64,
    window: WindowKind,
    evm: Option<&EvmContext<'_>>,
    param_count: usize,
) -> Result<MetricsReport> {
    let nmse = nmse_db(measured, model_out)?;
    let psd = welch_psd(model_out, segment_len.min(model_out.len().next_power_of_two() / 2), overlap, window)?;
    let (lo, hi, combined) = acpr_db(&psd, mask)?;
    let evm_pct = match evm {
        Some(ctx) => {
            let (demod, ideal) =
                ofdm_demod_aligned(model_out, ctx.plan, ctx.oversample, ctx.frame_offset)?;
            evm_rms_percent(&demod, &ideal)?
        }
        None => f64::NAN,
    };
    Ok(MetricsReport {
        model: model_name.to_string(),
        nmse_db: nmse,
        acpr_lo_db: lo,
        acpr_hi_db: hi,
        acpr_db: combined,
        evm_pct,
        papr_db: papr_db(model_out)?,
        params: param_count,
    })
}
