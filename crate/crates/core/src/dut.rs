//! Synthetic device under test and dataset partitioning.
//!
//! The measured amplifier is replaced at desk scale by a fixed
//! Wiener-Hammerstein cascade: a short complex FIR, a Saleh AM/AM +
//! AM/PM nonlinearity, a second FIR, and an optional additive noise
//! floor. Externally measured data can be ingested from IQF1 file pairs
//! instead.

use crate::error::{Error, Result};
use crate::io::{read_iqf1, read_kv, write_kv};
use crate::signal::{fit_norm, NormStats, Waveform};
use crate::rng::substream;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::ops::Range;
use std::path::Path;

/// Wiener-Hammerstein device description: FIR -> Saleh -> FIR + noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDutSpec {
    pub pre_fir: Vec<Complex64>,
    pub saleh_alpha_a: f64,
    pub saleh_beta_a: f64,
    pub saleh_alpha_p: f64,
    pub saleh_beta_p: f64,
    pub post_fir: Vec<Complex64>,
    /// Noise floor relative to output power, dBc; `-inf` disables it.
    pub noise_dbc: f64,
}

impl SynthDutSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, fir) in [("pre_fir", &self.pre_fir), ("post_fir", &self.post_fir)] {
            if fir.is_empty() || fir.len() > 5 {
                return Err(Error::config(format!("{name} must have 1..=5 taps")));
            }
            if fir[0].norm() == 0.0 {
                return Err(Error::config(format!("{name} first tap must be nonzero")));
            }
        }
        if self.saleh_beta_a <= 0.0 {
            return Err(Error::config("saleh_beta_a must be positive"));
        }
        if self.noise_dbc > -60.0 {
            return Err(Error::config("noise_dbc must be <= -60 dBc (or -inf)"));
        }
        Ok(())
    }

    /// Input modulus at which the Saleh AM/AM curve saturates.
    pub fn saturation_radius(&self) -> f64 {
        1.0 / self.saleh_beta_a.sqrt()
    }
}

fn conv_causal(x: &[Complex64], taps: &[Complex64]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, t) in taps.iter().enumerate() {
            if n >= m {
                acc += t * x[n - m];
            }
        }
        *o = acc;
    }
    out
}

/// Saleh static nonlinearity applied to one sample: the modulus `r` maps
/// to `alpha_a * r / (1 + beta_a r^2)` and the phase rotates by
/// `alpha_p * r^2 / (1 + beta_p r^2)`.
pub fn saleh(spec: &SynthDutSpec, v: Complex64) -> Complex64 {
    let r2 = v.norm_sqr();
    let gain = spec.saleh_alpha_a / (1.0 + spec.saleh_beta_a * r2);
    let phase = spec.saleh_alpha_p * r2 / (1.0 + spec.saleh_beta_p * r2);
    v * gain * Complex64::from_polar(1.0, phase)
}

/// Run the synthetic device over a waveform. Deterministic for a given
/// seed (the seed only feeds the noise sub-stream).
pub fn synth_dut_forward(spec: &SynthDutSpec, x: &Waveform, seed: u64) -> Result<Waveform> {
    spec.validate()?;
    if x.is_empty() {
        return Err(Error::config("DUT input must be nonempty"));
    }
    let pre = conv_causal(&x.samples, &spec.pre_fir);
    let shaped: Vec<Complex64> = pre.iter().map(|&v| saleh(spec, v)).collect();
    let mut out = conv_causal(&shaped, &spec.post_fir);

    if spec.noise_dbc.is_finite() {
        let power = out.iter().map(|s| s.norm_sqr()).sum::<f64>() / out.len() as f64;
        let sigma = (power * 10f64.powf(spec.noise_dbc / 10.0) / 2.0).sqrt();
        let mut rng = substream(seed, "dut/noise");
        for s in out.iter_mut() {
            let ni: f64 = rng.sample(StandardNormal);
            let nq: f64 = rng.sample(StandardNormal);
            *s += Complex64::new(sigma * ni, sigma * nq);
        }
    }
    Waveform::new(out, x.sample_rate_hz, "dut_out")
}

/// Aligned input/output pair with contiguous train/val/test bounds and
/// normalization statistics fitted on the train block only.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub input: Waveform,
    pub output: Waveform,
    pub train_end: usize,
    pub val_end: usize,
    pub norm_in: NormStats,
    pub norm_out: NormStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test_range(&self) -> Range<usize> {
        self.val_end..self.len()
    }
}

/// Partition an aligned pair into contiguous train/val/test blocks and
/// fit normalization statistics on the train block.
pub fn make_dataset(x: Waveform, y: Waveform, fractions: (f64, f64, f64)) -> Result<Dataset> {
    if x.len() != y.len() {
        return Err(Error::config(format!(
            "input/output length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let (f0, f1, f2) = fractions;
    if f0 <= 0.0 || f1 <= 0.0 || f2 <= 0.0 {
        return Err(Error::config("split fractions must be positive"));
    }
    if ((f0 + f1 + f2) - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    let n = x.len();
    let train_end = (n as f64 * f0).round() as usize;
    let val_end = (n as f64 * (f0 + f1)).round() as usize;
    if train_end == 0 || train_end >= val_end || val_end >= n {
        return Err(Error::config(format!(
            "degenerate split bounds ({train_end}, {val_end}) for length {n}"
        )));
    }

    let train_in = Waveform::new(x.samples[..train_end].to_vec(), x.sample_rate_hz, "train_in")?;
    let train_out = Waveform::new(y.samples[..train_end].to_vec(), y.sample_rate_hz, "train_out")?;
    let norm_in = fit_norm(&train_in)?;
    let norm_out = fit_norm(&train_out)?;

    Ok(Dataset {
        input: x,
        output: y,
        train_end,
        val_end,
        norm_in,
        norm_out,
    })
}

/// Build a dataset from two IQF1 files with the default 80/10/10 split.
pub fn ingest_dataset(path_in: &Path, path_out: &Path) -> Result<Dataset> {
    let x = read_iqf1(path_in)?;
    let y = read_iqf1(path_out)?;
    if x.len() != y.len() {
        return Err(Error::Mismatch(format!(
            "sample count mismatch: {} has {}, {} has {}",
            path_in.display(),
            x.len(),
            path_out.display(),
            y.len()
        )));
    }
    if x.sample_rate_hz != y.sample_rate_hz {
        return Err(Error::Mismatch(format!(
            "sample rate mismatch: {} vs {}",
            x.sample_rate_hz, y.sample_rate_hz
        )));
    }
    make_dataset(x, y, (0.8, 0.1, 0.1))
}

fn push_norm(pairs: &mut Vec<(String, String)>, prefix: &str, s: &NormStats) {
    pairs.push((format!("{prefix}.mean_i"), s.mean_i.to_string()));
    pairs.push((format!("{prefix}.mean_q"), s.mean_q.to_string()));
    pairs.push((format!("{prefix}.std_i"), s.std_i.to_string()));
    pairs.push((format!("{prefix}.std_q"), s.std_q.to_string()));
}

/// Write the `dataset.meta` sidecar describing a stored dataset.
pub fn write_dataset_meta(
    path: &Path,
    ds: &Dataset,
    input_path: &Path,
    output_path: &Path,
) -> Result<()> {
    let mut pairs = vec![
        ("input".to_string(), input_path.display().to_string()),
        ("output".to_string(), output_path.display().to_string()),
        ("count".to_string(), ds.len().to_string()),
        ("sample_rate_hz".to_string(), ds.input.sample_rate_hz.to_string()),
        ("train_end".to_string(), ds.train_end.to_string()),
        ("val_end".to_string(), ds.val_end.to_string()),
    ];
    push_norm(&mut pairs, "norm_in", &ds.norm_in);
    push_norm(&mut pairs, "norm_out", &ds.norm_out);
    write_kv(path, &pairs)
}

fn parse_norm(map: &[(String, String)], prefix: &str, path: &str) -> Result<NormStats> {
    let get = |key: &str| -> Result<f64> {
        let full = format!("{prefix}.{key}");
        map.iter()
            .find(|(k, _)| *k == full)
            .ok_or_else(|| Error::format(path, format!("missing key '{full}'")))?
            .1
            .parse::<f64>()
            .map_err(|_| Error::format(path, format!("bad value for '{full}'")))
    };
    Ok(NormStats {
        mean_i: get("mean_i")?,
        mean_q: get("mean_q")?,
        std_i: get("std_i")?,
        std_q: get("std_q")?,
    })
}

/// Reload a dataset from its `dataset.meta` sidecar. Split bounds and
/// normalization statistics come from the sidecar, not from refitting.
pub fn load_dataset(meta_path: &Path) -> Result<Dataset> {
    let pstr = meta_path.display().to_string();
    let map = read_kv(meta_path)?;
    let get = |key: &str| -> Result<&str> {
        map.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(&pstr, format!("missing key '{key}'")))
    };
    let base = meta_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| {
        let pb = Path::new(p);
        if pb.is_absolute() {
            pb.to_path_buf()
        } else {
            base.join(pb)
        }
    };
    let input = read_iqf1(&resolve(get("input")?))?;
    let output = read_iqf1(&resolve(get("output")?))?;
    let train_end: usize = get("train_end")?
        .parse()
        .map_err(|_| Error::format(&pstr, "bad train_end"))?;
    let val_end: usize = get("val_end")?
        .parse()
        .map_err(|_| Error::format(&pstr, "bad val_end"))?;
    if input.len() != output.len() {
        return Err(Error::Mismatch("dataset waveform lengths differ".into()));
    }
    if !(0 < train_end && train_end < val_end && val_end < input.len()) {
        return Err(Error::format(&pstr, "split bounds out of range"));
    }
    Ok(Dataset {
        norm_in: parse_norm(&map, "norm_in", &pstr)?,
        norm_out: parse_norm(&map, "norm_out", &pstr)?,
        input,
        output,
        train_end,
        val_end,
    })
}
