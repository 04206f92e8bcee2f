//! Run configuration: a flat key=value schema covering every module's
//! defaults. Unknown keys are rejected; the fully resolved configuration
//! is archived next to each run's outputs.

use crate::dut::SynthDutSpec;
use crate::error::{Error, Result};
use crate::io::Precision;
use crate::metrics::WindowKind;
use crate::nn::{FilmSite, ModelSpec};
use crate::poly::{GmpCross, MpSpec};
use crate::signal::OfdmPlan;
use crate::train::{AmplitudeSource, TrainConfig};
use num_complex::Complex64;
use std::path::Path;

/// Parse a complex literal like `1`, `-0.5j`, `0.1-0.05j` (`i` accepted
/// as the imaginary suffix too).
pub fn parse_complex(s: &str) -> Result<Complex64> {
    let t = s.trim().replace(' ', "");
    if t.is_empty() {
        return Err(Error::config("empty complex literal"));
    }
    let bad = || Error::config(format!("cannot parse complex literal '{s}'"));
    let is_imag = t.ends_with('j') || t.ends_with('i');
    if !is_imag {
        return t.parse::<f64>().map(|re| Complex64::new(re, 0.0)).map_err(|_| bad());
    }
    let body = &t[..t.len() - 1];
    // split at the last +/- that is not a leading sign or an exponent sign
    let bytes = body.as_bytes();
    let mut split = None;
    for p in (1..bytes.len()).rev() {
        let c = bytes[p] as char;
        if (c == '+' || c == '-') && !matches!(bytes[p - 1] as char, 'e' | 'E') {
            split = Some(p);
            break;
        }
    }
    match split {
        Some(p) => {
            let re: f64 = body[..p].parse().map_err(|_| bad())?;
            let imag_str = &body[p..];
            let im: f64 = if imag_str == "+" {
                1.0
            } else if imag_str == "-" {
                -1.0
            } else {
                imag_str.parse().map_err(|_| bad())?
            };
            Ok(Complex64::new(re, im))
        }
        None => {
            let im: f64 = if body.is_empty() {
                1.0
            } else if body == "-" {
                -1.0
            } else {
                body.parse().map_err(|_| bad())?
            };
            Ok(Complex64::new(0.0, im))
        }
    }
}

fn format_complex(c: Complex64) -> String {
    if c.im == 0.0 {
        format!("{}", c.re)
    } else if c.re == 0.0 {
        format!("{}j", c.im)
    } else if c.im < 0.0 {
        format!("{}{}j", c.re, c.im)
    } else {
        format!("{}+{}j", c.re, c.im)
    }
}

fn parse_complex_list(s: &str) -> Result<Vec<Complex64>> {
    s.split(',').map(parse_complex).collect()
}

fn format_complex_list(v: &[Complex64]) -> String {
    v.iter().map(|c| format_complex(*c)).collect::<Vec<_>>().join(",")
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad integer list entry '{p}'")))
        })
        .collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::config(format!("bad boolean '{other}'"))),
    }
}

/// Model family selector for the train/eval commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    AcLstm,
    Lstm,
    Arvtdnn,
    Mp,
    Gmp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::AcLstm => "aclstm",
            ModelKind::Lstm => "lstm",
            ModelKind::Arvtdnn => "arvtdnn",
            ModelKind::Mp => "mp",
            ModelKind::Gmp => "gmp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aclstm" => Ok(ModelKind::AcLstm),
            "lstm" => Ok(ModelKind::Lstm),
            "arvtdnn" => Ok(ModelKind::Arvtdnn),
            "mp" => Ok(ModelKind::Mp),
            "gmp" => Ok(ModelKind::Gmp),
            other => Err(Error::config(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Fully resolved run configuration with every module's settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,

    pub sample_rate_hz: f64,
    pub fft_size: usize,
    pub active_subcarriers: usize,
    pub cp_len: usize,
    pub num_symbols: usize,
    pub qam_order: usize,
    pub oversample: usize,
    pub target_papr_db: f64,

    pub dut_pre_fir: Vec<Complex64>,
    pub dut_post_fir: Vec<Complex64>,
    pub dut_saleh_alpha_a: f64,
    pub dut_saleh_beta_a: f64,
    pub dut_saleh_alpha_p: f64,
    pub dut_saleh_beta_p: f64,
    pub dut_noise_dbc: f64,
    /// Mean input modulus as a fraction of the Saleh saturation radius.
    pub dut_drive: f64,

    pub model_kind: ModelKind,
    pub model_layers: usize,
    pub model_hidden: usize,
    pub model_film_hidden: usize,
    pub model_film_site: FilmSite,
    pub model_amp_source: AmplitudeSource,
    pub arv_memory: usize,
    pub arv_order: usize,
    pub arv_hidden: usize,
    pub mp_memory: usize,
    pub mp_order: usize,
    pub mp_odd_only: bool,
    pub gmp_cross_orders: Vec<usize>,
    pub gmp_cross_memory: usize,
    pub gmp_cross_lag: usize,

    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_window_len: usize,
    pub train_lr0: f64,
    pub train_plateau_factor: f64,
    pub train_plateau_patience: usize,
    pub train_plateau_eps: f64,
    pub train_min_lr: f64,
    pub train_checkpoint_every: usize,

    pub metrics_segment_len: usize,
    pub metrics_overlap: f64,
    pub metrics_window: WindowKind,

    pub gradcheck_tolerance: f64,
    pub gradcheck_seeds: usize,
    pub gradcheck_corrupt: bool,

    pub path_excitation: String,
    pub path_plan: String,
    pub path_input: String,
    pub path_output: String,
    pub path_dataset_meta: String,
    pub path_weights: String,
    pub path_history: String,
    pub path_metrics: String,
    pub path_psd_measured: String,
    pub path_psd_model: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            precision: Precision::F32,
            deterministic: false,

            sample_rate_hz: 800e6,
            fft_size: 256,
            active_subcarriers: 128,
            cp_len: 32,
            num_symbols: 74,
            qam_order: 256,
            oversample: 2,
            target_papr_db: 8.5,

            dut_pre_fir: vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(0.25, -0.15),
                Complex64::new(0.0, 0.10),
            ],
            dut_post_fir: vec![Complex64::new(1.0, 0.0), Complex64::new(-0.15, 0.08)],
            dut_saleh_alpha_a: 2.0,
            dut_saleh_beta_a: 1.0,
            dut_saleh_alpha_p: 1.5,
            dut_saleh_beta_p: 0.7,
            dut_noise_dbc: -80.0,
            dut_drive: 0.6,

            model_kind: ModelKind::AcLstm,
            model_layers: 1,
            model_hidden: 8,
            model_film_hidden: 4,
            model_film_site: FilmSite::Candidate,
            model_amp_source: AmplitudeSource::Raw,
            arv_memory: 3,
            arv_order: 3,
            arv_hidden: 20,
            mp_memory: 4,
            mp_order: 9,
            mp_odd_only: false,
            gmp_cross_orders: vec![3, 5, 7],
            gmp_cross_memory: 3,
            gmp_cross_lag: 1,

            train_epochs: 200,
            train_batch_size: 256,
            train_window_len: 64,
            train_lr0: 1e-3,
            train_plateau_factor: 0.5,
            train_plateau_patience: 10,
            train_plateau_eps: 1e-7,
            train_min_lr: 1e-5,
            train_checkpoint_every: 0,

            metrics_segment_len: 1024,
            metrics_overlap: 0.5,
            metrics_window: WindowKind::Hann,

            gradcheck_tolerance: 1e-6,
            gradcheck_seeds: 5,
            gradcheck_corrupt: false,

            path_excitation: "excitation.iqf1".into(),
            path_plan: "excitation.plan".into(),
            path_input: "pa_input.iqf1".into(),
            path_output: "pa_output.iqf1".into(),
            path_dataset_meta: "dataset.meta".into(),
            path_weights: "weights.acw1".into(),
            path_history: "history.csv".into(),
            path_metrics: "metrics.csv".into(),
            path_psd_measured: "psd_measured.csv".into(),
            path_psd_model: "psd_model.csv".into(),
        }
    }
}

impl RunConfig {
    /// Apply key=value pairs over the current values, rejecting unknown
    /// keys by name.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(pairs)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad_num = |k: &str, v: &str| Error::config(format!("bad value '{v}' for key '{k}'"));
        macro_rules! num {
            ($field:expr, $ty:ty) => {
                $field = value.parse::<$ty>().map_err(|_| bad_num(key, value))?
            };
        }
        match key {
            "seed" => num!(self.seed, u64),
            "precision" => self.precision = Precision::parse(value)?,
            "deterministic" => self.deterministic = parse_bool(value)?,

            "signal.sample_rate_hz" => num!(self.sample_rate_hz, f64),
            "signal.fft_size" => num!(self.fft_size, usize),
            "signal.active_subcarriers" => num!(self.active_subcarriers, usize),
            "signal.cp_len" => num!(self.cp_len, usize),
            "signal.num_symbols" => num!(self.num_symbols, usize),
            "signal.qam_order" => num!(self.qam_order, usize),
            "signal.oversample" => num!(self.oversample, usize),
            "signal.target_papr_db" => num!(self.target_papr_db, f64),

            "dut.pre_fir" => self.dut_pre_fir = parse_complex_list(value)?,
            "dut.post_fir" => self.dut_post_fir = parse_complex_list(value)?,
            "dut.saleh_alpha_a" => num!(self.dut_saleh_alpha_a, f64),
            "dut.saleh_beta_a" => num!(self.dut_saleh_beta_a, f64),
            "dut.saleh_alpha_p" => num!(self.dut_saleh_alpha_p, f64),
            "dut.saleh_beta_p" => num!(self.dut_saleh_beta_p, f64),
            "dut.noise_dbc" => {
                self.dut_noise_dbc = if value == "-inf" {
                    f64::NEG_INFINITY
                } else {
                    value.parse().map_err(|_| bad_num(key, value))?
                }
            }
            "dut.drive" => num!(self.dut_drive, f64),

            "model.kind" => self.model_kind = ModelKind::parse(value)?,
            "model.layers" => num!(self.model_layers, usize),
            "model.hidden" => num!(self.model_hidden, usize),
            "model.film_hidden" => num!(self.model_film_hidden, usize),
            "model.film_site" => self.model_film_site = FilmSite::parse(value)?,
            "model.amp_source" => self.model_amp_source = AmplitudeSource::parse(value)?,
            "model.arv_memory" => num!(self.arv_memory, usize),
            "model.arv_order" => num!(self.arv_order, usize),
            "model.arv_hidden" => num!(self.arv_hidden, usize),
            "model.mp_memory" => num!(self.mp_memory, usize),
            "model.mp_order" => num!(self.mp_order, usize),
            "model.mp_odd_only" => self.mp_odd_only = parse_bool(value)?,
            "model.gmp_cross_orders" => self.gmp_cross_orders = parse_usize_list(value)?,
            "model.gmp_cross_memory" => num!(self.gmp_cross_memory, usize),
            "model.gmp_cross_lag" => num!(self.gmp_cross_lag, usize),

            "train.epochs" => num!(self.train_epochs, usize),
            "train.batch_size" => num!(self.train_batch_size, usize),
            "train.window_len" => num!(self.train_window_len, usize),
            "train.lr0" => num!(self.train_lr0, f64),
            "train.plateau_factor" => num!(self.train_plateau_factor, f64),
            "train.plateau_patience" => num!(self.train_plateau_patience, usize),
            "train.plateau_eps" => num!(self.train_plateau_eps, f64),
            "train.min_lr" => num!(self.train_min_lr, f64),
            "train.checkpoint_every" => num!(self.train_checkpoint_every, usize),

            "metrics.segment_len" => num!(self.metrics_segment_len, usize),
            "metrics.overlap" => num!(self.metrics_overlap, f64),
            "metrics.window" => self.metrics_window = WindowKind::parse(value)?,

            "gradcheck.tolerance" => num!(self.gradcheck_tolerance, f64),
            "gradcheck.seeds" => num!(self.gradcheck_seeds, usize),
            "gradcheck.corrupt" => self.gradcheck_corrupt = parse_bool(value)?,

            "paths.excitation" => self.path_excitation = value.to_string(),
            "paths.plan" => self.path_plan = value.to_string(),
            "paths.input" => self.path_input = value.to_string(),
            "paths.output" => self.path_output = value.to_string(),
            "paths.dataset_meta" => self.path_dataset_meta = value.to_string(),
            "paths.weights" => self.path_weights = value.to_string(),
            "paths.history" => self.path_history = value.to_string(),
            "paths.metrics" => self.path_metrics = value.to_string(),
            "paths.psd_measured" => self.path_psd_measured = value.to_string(),
            "paths.psd_model" => self.path_psd_model = value.to_string(),

            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Ordered key=value pairs of the fully resolved configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let noise = if self.dut_noise_dbc.is_finite() {
            self.dut_noise_dbc.to_string()
        } else {
            "-inf".to_string()
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("precision", self.precision.as_str().to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("signal.sample_rate_hz", self.sample_rate_hz.to_string()),
            ("signal.fft_size", self.fft_size.to_string()),
            ("signal.active_subcarriers", self.active_subcarriers.to_string()),
            ("signal.cp_len", self.cp_len.to_string()),
            ("signal.num_symbols", self.num_symbols.to_string()),
            ("signal.qam_order", self.qam_order.to_string()),
            ("signal.oversample", self.oversample.to_string()),
            ("signal.target_papr_db", self.target_papr_db.to_string()),
            ("dut.pre_fir", format_complex_list(&self.dut_pre_fir)),
            ("dut.post_fir", format_complex_list(&self.dut_post_fir)),
            ("dut.saleh_alpha_a", self.dut_saleh_alpha_a.to_string()),
            ("dut.saleh_beta_a", self.dut_saleh_beta_a.to_string()),
            ("dut.saleh_alpha_p", self.dut_saleh_alpha_p.to_string()),
            ("dut.saleh_beta_p", self.dut_saleh_beta_p.to_string()),
            ("dut.noise_dbc", noise),
            ("dut.drive", self.dut_drive.to_string()),
            ("model.kind", self.model_kind.as_str().to_string()),
            ("model.layers", self.model_layers.to_string()),
            ("model.hidden", self.model_hidden.to_string()),
            ("model.film_hidden", self.model_film_hidden.to_string()),
            ("model.film_site", self.model_film_site.as_str().to_string()),
            ("model.amp_source", self.model_amp_source.as_str().to_string()),
            ("model.arv_memory", self.arv_memory.to_string()),
            ("model.arv_order", self.arv_order.to_string()),
            ("model.arv_hidden", self.arv_hidden.to_string()),
            ("model.mp_memory", self.mp_memory.to_string()),
            ("model.mp_order", self.mp_order.to_string()),
            ("model.mp_odd_only", self.mp_odd_only.to_string()),
            (
                "model.gmp_cross_orders",
                self.gmp_cross_orders
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("model.gmp_cross_memory", self.gmp_cross_memory.to_string()),
            ("model.gmp_cross_lag", self.gmp_cross_lag.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.window_len", self.train_window_len.to_string()),
            ("train.lr0", self.train_lr0.to_string()),
            ("train.plateau_factor", self.train_plateau_factor.to_string()),
            ("train.plateau_patience", self.train_plateau_patience.to_string()),
            ("train.plateau_eps", self.train_plateau_eps.to_string()),
            ("train.min_lr", self.train_min_lr.to_string()),
            ("train.checkpoint_every", self.train_checkpoint_every.to_string()),
            ("metrics.segment_len", self.metrics_segment_len.to_string()),
            ("metrics.overlap", self.metrics_overlap.to_string()),
            ("metrics.window", self.metrics_window.as_str().to_string()),
            ("gradcheck.tolerance", self.gradcheck_tolerance.to_string()),
            ("gradcheck.seeds", self.gradcheck_seeds.to_string()),
            ("gradcheck.corrupt", self.gradcheck_corrupt.to_string()),
            ("paths.excitation", self.path_excitation.clone()),
            ("paths.plan", self.path_plan.clone()),
            ("paths.input", self.path_input.clone()),
            ("paths.output", self.path_output.clone()),
            ("paths.dataset_meta", self.path_dataset_meta.clone()),
            ("paths.weights", self.path_weights.clone()),
            ("paths.history", self.path_history.clone()),
            ("paths.metrics", self.path_metrics.clone()),
            ("paths.psd_measured", self.path_psd_measured.clone()),
            ("paths.psd_model", self.path_psd_model.clone()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let pairs = crate::io::read_kv(path)?;
        Self::from_pairs(&pairs)
    }

    pub fn ofdm_plan(&self) -> Result<OfdmPlan> {
        OfdmPlan::new(
            self.fft_size,
            self.active_subcarriers,
            self.cp_len,
            self.num_symbols,
            self.qam_order,
            self.seed,
        )
    }

    pub fn dut_spec(&self) -> SynthDutSpec {
        SynthDutSpec {
            pre_fir: self.dut_pre_fir.clone(),
            saleh_alpha_a: self.dut_saleh_alpha_a,
            saleh_beta_a: self.dut_saleh_beta_a,
            saleh_alpha_p: self.dut_saleh_alpha_p,
            saleh_beta_p: self.dut_saleh_beta_p,
            post_fir: self.dut_post_fir.clone(),
            noise_dbc: self.dut_noise_dbc,
        }
    }

    /// Neural model spec for the configured kind; polynomial kinds have
    /// no neural spec.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        match self.model_kind {
            ModelKind::AcLstm => Ok(ModelSpec::AcLstm {
                layers: self.model_layers,
                hidden: self.model_hidden,
                film_hidden: self.model_film_hidden,
                film_site: self.model_film_site,
            }),
            ModelKind::Lstm => Ok(ModelSpec::Lstm {
                layers: self.model_layers,
                hidden: self.model_hidden,
            }),
            ModelKind::Arvtdnn => Ok(ModelSpec::Arvtdnn {
                memory_depth: self.arv_memory,
                poly_order: self.arv_order,
                hidden: self.arv_hidden,
            }),
            _ => Err(Error::config("polynomial models have no neural spec")),
        }
    }

    /// Polynomial spec for the mp/gmp kinds.
    pub fn mp_spec(&self) -> Result<MpSpec> {
        match self.model_kind {
            ModelKind::Mp => Ok(MpSpec {
                memory_depth: self.mp_memory,
                order: self.mp_order,
                odd_only: self.mp_odd_only,
                cross: None,
            }),
            ModelKind::Gmp => Ok(MpSpec {
                memory_depth: self.mp_memory,
                order: self.mp_order,
                odd_only: self.mp_odd_only,
                cross: Some(GmpCross {
                    orders: self.gmp_cross_orders.clone(),
                    memory: self.gmp_cross_memory,
                    lag: self.gmp_cross_lag,
                }),
            }),
            _ => Err(Error::config("neural models have no polynomial spec")),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            window_len: self.train_window_len,
            lr0: self.train_lr0,
            plateau_factor: self.train_plateau_factor,
            plateau_patience: self.train_plateau_patience,
            plateau_eps: self.train_plateau_eps,
            min_lr: self.train_min_lr,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: self.seed,
            parallel: !self.deterministic,
        }
    }
}
