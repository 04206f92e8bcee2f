//! Command implementations. Every command archives its fully resolved
//! configuration next to its outputs and is byte-reproducible for a
//! fixed config and seed.

use aclstm_core::config::{ModelKind, RunConfig};
use aclstm_core::dut::{load_dataset, make_dataset, synth_dut_forward, write_dataset_meta, Dataset};
use aclstm_core::error::{Error, Result};
use aclstm_core::io::{read_iqf1, read_kv, write_iqf1, write_kv, Precision};
use aclstm_core::metrics::{
    metrics_report, welch_psd, ChannelMask, EvmContext, MetricsReport, PsdEstimate,
};
use aclstm_core::nn::{predict, FilmSite, ModelSpec, Real};
use aclstm_core::poly::mp_predict;
use aclstm_core::signal::{
    apply_norm, crest_factor_reduce_with_band, estimate_occupied_band, generate_ofdm, invert_norm,
    papr_db, OfdmPlan, Waveform,
};
use aclstm_core::train::{
    grad_check_with, train_with_checkpoints, AmplitudeSource, EpochStats, TrainOutput,
};
use aclstm_core::weights::{
    load_model, save_neural, save_poly, LoadedModel, NeuralCheckpoint, PolyCheckpoint,
};
use num_complex::Complex64;
use std::path::{Path, PathBuf};

/// Resolved configuration plus the output directory.
pub struct RunContext {
    pub cfg: RunConfig,
    pub out: PathBuf,
    precision_explicit: bool,
}

impl RunContext {
    pub fn prepare(
        config: Option<&Path>,
        seed: Option<u64>,
        deterministic: bool,
        precision: Option<&str>,
        out: &Path,
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut precision_explicit = false;
        if let Some(path) = config {
            let pairs = read_kv(path)?;
            precision_explicit = pairs.iter().any(|(k, _)| k == "precision");
            cfg.apply_pairs(&pairs)?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if deterministic {
            cfg.deterministic = true;
        }
        if let Some(p) = precision {
            cfg.precision = Precision::parse(p)?;
            precision_explicit = true;
        }
        std::fs::create_dir_all(out)?;
        Ok(RunContext {
            cfg,
            out: out.to_path_buf(),
            precision_explicit,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn archive(&self, command: &str) -> Result<()> {
        write_kv(&self.out.join(format!("{command}.resolved.cfg")), &self.cfg.to_pairs())
    }
}

fn plan_pairs(plan: &OfdmPlan, oversample: usize, sample_rate_hz: f64) -> Vec<(String, String)> {
    vec![
        ("fft_size".into(), plan.fft_size.to_string()),
        ("active_subcarriers".into(), plan.active_subcarriers.to_string()),
        ("cp_len".into(), plan.cp_len.to_string()),
        ("num_symbols".into(), plan.num_symbols.to_string()),
        ("qam_order".into(), plan.qam_order.to_string()),
        ("seed".into(), plan.seed.to_string()),
        ("oversample".into(), oversample.to_string()),
        ("sample_rate_hz".into(), sample_rate_hz.to_string()),
    ]
}

/// Reload a plan file and regenerate its subcarrier symbols (symbol
/// draws are deterministic in the plan seed).
pub fn load_plan(path: &Path) -> Result<(OfdmPlan, usize)> {
    let pstr = path.display().to_string();
    let map = read_kv(path)?;
    let get = |k: &str| -> Result<&str> {
        map.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(&pstr, format!("missing key '{k}'")))
    };
    let as_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::format(&pstr, format!("bad value for '{k}'")))
    };
    let plan = OfdmPlan::new(
        as_usize("fft_size")?,
        as_usize("active_subcarriers")?,
        as_usize("cp_len")?,
        as_usize("num_symbols")?,
        as_usize("qam_order")?,
        get("seed")?
            .parse()
            .map_err(|_| Error::format(&pstr, "bad seed"))?,
    )?;
    let oversample = as_usize("oversample")?;
    let sample_rate: f64 = get("sample_rate_hz")?
        .parse()
        .map_err(|_| Error::format(&pstr, "bad sample_rate_hz"))?;
    let (_, filled) = generate_ofdm(&plan, oversample, sample_rate)?;
    Ok((filled, oversample))
}

/// Generate the excitation: OFDM frame, crest factor reduction to the
/// target PAPR, IQF1 + plan outputs.
pub fn cmd_gen(ctx: &RunContext) -> Result<u8> {
    let cfg = &ctx.cfg;
    let plan = cfg.ofdm_plan()?;
    let (raw, filled) = generate_ofdm(&plan, cfg.oversample, cfg.sample_rate_hz)?;
    let raw_papr = papr_db(&raw)?;
    let cfr = crest_factor_reduce_with_band(
        &raw,
        cfg.target_papr_db,
        filled.occupied_band(cfg.oversample),
    )?;
    let out_papr = papr_db(&cfr.waveform)?;

    write_iqf1(&ctx.path(&cfg.path_excitation), &cfr.waveform)?;
    write_kv(
        &ctx.path(&cfg.path_plan),
        &plan_pairs(&filled, cfg.oversample, cfg.sample_rate_hz),
    )?;
    ctx.archive("gen")?;

    println!(
        "excitation: {} samples, PAPR {out_papr:.3} dB (raw {raw_papr:.3} dB, target {:.1} dB, {} CFR iterations)",
        cfr.waveform.len(),
        cfg.target_papr_db,
        cfr.iterations
    );
    if cfr.target_missed {
        println!("warning: CFR target missed by more than 0.3 dB");
    }
    Ok(0)
}

/// Drive the synthetic device with the excitation and write the
/// captured dataset (input/output IQF1 pair plus dataset.meta).
pub fn cmd_capture(ctx: &RunContext) -> Result<u8> {
    let cfg = &ctx.cfg;
    let excitation = read_iqf1(&ctx.path(&cfg.path_excitation))?;
    let spec = cfg.dut_spec();
    spec.validate()?;

    // drive the device near compression: mean input modulus at the
    // configured fraction of the Saleh saturation radius
    let mean_mod = excitation.samples.iter().map(|s| s.norm()).sum::<f64>() / excitation.len() as f64;
    if mean_mod <= 0.0 {
        return Err(Error::numeric("excitation has zero mean modulus"));
    }
    let scale = cfg.dut_drive * spec.saturation_radius() / mean_mod;
    let driven = excitation.scaled(scale);
    let output = synth_dut_forward(&spec, &driven, cfg.seed)?;

    let in_path = ctx.path(&cfg.path_input);
    let out_path = ctx.path(&cfg.path_output);
    write_iqf1(&in_path, &driven)?;
    write_iqf1(&out_path, &output)?;

    let ds = make_dataset(driven, output, (0.8, 0.1, 0.1))?;
    write_dataset_meta(
        &ctx.path(&cfg.path_dataset_meta),
        &ds,
        Path::new(&cfg.path_input),
        Path::new(&cfg.path_output),
    )?;
    ctx.archive("capture")?;

    println!(
        "capture: {} samples, drive scale {scale:.4}, split ({}, {}), output PAPR {:.3} dB",
        ds.len(),
        ds.train_end,
        ds.val_end,
        papr_db(&ds.output)?
    );
    Ok(0)
}

fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,train_mse,val_mse,lr\n");
    for row in history {
        text.push_str(&format!("{},{},{},{}\n", row.epoch, row.train_mse, row.val_mse, row.lr));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run_neural_training<T: Real>(ctx: &RunContext, ds: &Dataset, spec: &ModelSpec) -> Result<u8> {
    let cfg = &ctx.cfg;
    let tc = cfg.train_config();
    let every = cfg.train_checkpoint_every;
    let make_ckpt = |params: &aclstm_core::nn::ModelParams<T>| NeuralCheckpoint {
        params: params.clone(),
        amp_source: cfg.model_amp_source,
        norm_in: ds.norm_in,
        norm_out: ds.norm_out,
        seed: cfg.seed,
    };
    let mut checkpoint_cb = |epoch: usize, params: &aclstm_core::nn::ModelParams<T>| -> Result<()> {
        if every > 0 && (epoch + 1) % every == 0 {
            let path = ctx.out.join(format!("weights_epoch{:04}.acw1", epoch + 1));
            save_neural(&path, &make_ckpt(params), cfg.precision, &[])?;
        }
        Ok(())
    };
    let out: TrainOutput<T> =
        train_with_checkpoints(spec, ds, &tc, cfg.model_amp_source, Some(&mut checkpoint_cb))?;

    write_history_csv(&ctx.path(&cfg.path_history), &out.history)?;
    let extra = vec![
        ("best_epoch".to_string(), out.best_epoch.to_string()),
        ("best_val_mse".to_string(), out.best_val.to_string()),
    ];
    save_neural(&ctx.path(&cfg.path_weights), &make_ckpt(&out.params), cfg.precision, &extra)?;
    ctx.archive("train")?;

    if out.diverged {
        return Err(Error::numeric(
            "training diverged (non-finite loss); last finite checkpoint written",
        ));
    }
    println!(
        "train: {} ({} params), {} epochs, best val MSE {:.6e} at epoch {}",
        cfg.model_kind.as_str(),
        spec.param_count(),
        out.history.len(),
        out.best_val,
        out.best_epoch
    );
    Ok(0)
}

fn block_wave(w: &Waveform, range: std::ops::Range<usize>) -> Waveform {
    Waveform::new(w.samples[range].to_vec(), w.sample_rate_hz, w.label.clone()).unwrap()
}

fn run_poly_training(ctx: &RunContext, ds: &Dataset) -> Result<u8> {
    let cfg = &ctx.cfg;
    let spec = cfg.mp_spec()?;
    let x_train = block_wave(&ds.input, ds.train_range());
    let y_train = block_wave(&ds.output, ds.train_range());
    let fit = aclstm_core::poly::mp_fit(&x_train, &y_train, &spec)?;
    if fit.rank_deficient {
        println!(
            "warning: rank-deficient design matrix (rank {}), minimum-norm solution used",
            fit.rank
        );
    }

    // single-row history: raw-domain MSE on the train and val blocks
    let pred = mp_predict(&ds.input, &spec, &fit.coeffs)?;
    let mse_over = |r: std::ops::Range<usize>| -> f64 {
        let mut acc = 0.0;
        for i in r.clone() {
            acc += (ds.output.samples[i] - pred.samples[i]).norm_sqr();
        }
        acc / (2.0 * r.len() as f64)
    };
    let history = vec![EpochStats {
        epoch: 0,
        train_mse: mse_over(ds.train_range()),
        val_mse: mse_over(ds.val_range()),
        lr: 0.0,
    }];
    write_history_csv(&ctx.path(&cfg.path_history), &history)?;

    save_poly(
        &ctx.path(&cfg.path_weights),
        &PolyCheckpoint {
            is_gmp: cfg.model_kind == ModelKind::Gmp,
            coeffs: fit.coeffs,
            residual_nmse_db: fit.residual_nmse_db,
            seed: cfg.seed,
            spec,
        },
    )?;
    ctx.archive("train")?;
    println!(
        "train: {} least-squares fit, residual NMSE {:.2} dB",
        cfg.model_kind.as_str(),
        fit.residual_nmse_db
    );
    Ok(0)
}

/// Train the configured model family on the captured dataset.
pub fn cmd_train(ctx: &RunContext) -> Result<u8> {
    let ds = load_dataset(&ctx.path(&ctx.cfg.path_dataset_meta))?;
    match ctx.cfg.model_kind {
        ModelKind::Mp | ModelKind::Gmp => run_poly_training(ctx, &ds),
        _ => {
            let spec = ctx.cfg.model_spec()?;
            match ctx.cfg.precision {
                Precision::F32 => run_neural_training::<f32>(ctx, &ds, &spec),
                Precision::F64 => run_neural_training::<f64>(ctx, &ds, &spec),
            }
        }
    }
}

fn predict_full_neural<T: Real>(ckpt: &NeuralCheckpoint<T>, ds: &Dataset) -> Result<Waveform> {
    let x_norm = apply_norm(&ds.input, &ckpt.norm_in);
    let xs: Vec<[T; 2]> = x_norm
        .samples
        .iter()
        .map(|s| [T::from_f64(s.re), T::from_f64(s.im)])
        .collect();
    let amps: Vec<T> = match ckpt.amp_source {
        AmplitudeSource::Raw => ds.input.samples.iter().map(|s| T::from_f64(s.norm())).collect(),
        AmplitudeSource::Normalized => {
            x_norm.samples.iter().map(|s| T::from_f64(s.norm())).collect()
        }
    };
    let preds = predict(&ckpt.params, &xs, &amps)?;
    let samples: Vec<Complex64> = preds
        .iter()
        .map(|p| Complex64::new(p[0].to_f64(), p[1].to_f64()))
        .collect();
    let normed = Waveform::new(samples, ds.input.sample_rate_hz, "model_out")?;
    Ok(invert_norm(&normed, &ckpt.norm_out))
}

fn psd_csv(path: &Path, psd: &PsdEstimate) -> Result<()> {
    let mut text = String::from("freq_norm,psd_db\n");
    for (f, p) in psd.freqs.iter().zip(psd.power.iter()) {
        text.push_str(&format!("{},{}\n", f, 10.0 * p.max(1e-30).log10()));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Evaluate a weights file on the test split: metrics CSV plus PSD
/// curves for the measured and modeled outputs.
pub fn cmd_eval(ctx: &RunContext, weights: Option<&Path>) -> Result<u8> {
    let cfg = &ctx.cfg;
    let ds = load_dataset(&ctx.path(&cfg.path_dataset_meta))?;
    let weights_path = weights
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.path(&cfg.path_weights));
    let model = load_model(&weights_path)?;

    // model output over the full sequence, evaluated on the test block
    // (causal warm-up through earlier inputs, no test-target access)
    let (name, full_pred, param_count) = match &model {
        LoadedModel::NeuralF32(ckpt) => (
            model_name(&ckpt.params.spec),
            predict_full_neural(ckpt, &ds)?,
            ckpt.params.spec.param_count(),
        ),
        LoadedModel::NeuralF64(ckpt) => (
            model_name(&ckpt.params.spec),
            predict_full_neural(ckpt, &ds)?,
            ckpt.params.spec.param_count(),
        ),
        LoadedModel::Poly(ckpt) => (
            if ckpt.is_gmp { "gmp".to_string() } else { "mp".to_string() },
            mp_predict(&ds.input, &ckpt.spec, &ckpt.coeffs)?,
            ckpt.spec.coeff_count(),
        ),
    };
    let test = ds.test_range();
    let measured = block_wave(&ds.output, test.clone());
    let model_out = block_wave(&full_pred, test.clone());

    // demodulation context and channel mask from the plan when present
    let plan_path = ctx.path(&cfg.path_plan);
    let plan_info = if plan_path.exists() {
        let (plan, oversample) = load_plan(&plan_path)?;
        if plan.frame_len(oversample) == ds.len() {
            Some((plan, oversample))
        } else {
            None
        }
    } else {
        None
    };
    let mask = match &plan_info {
        Some((plan, oversample)) => ChannelMask::contiguous(plan.occupied_band(*oversample)),
        None => ChannelMask::contiguous(estimate_occupied_band(&measured)?),
    };
    let seg = cfg.metrics_segment_len;

    let evm_ctx = plan_info.as_ref().map(|(plan, oversample)| EvmContext {
        plan,
        oversample: *oversample,
        frame_offset: ds.val_end,
    });
    let report = metrics_report(
        &name,
        &measured,
        &model_out,
        &mask,
        seg,
        cfg.metrics_overlap,
        cfg.metrics_window,
        evm_ctx.as_ref(),
        param_count,
    )?;
    // the measured output is the reference row (NMSE against itself is
    // meaningless, reported as nan)
    let measured_report = metrics_report(
        "measured",
        &measured,
        &measured,
        &mask,
        seg,
        cfg.metrics_overlap,
        cfg.metrics_window,
        evm_ctx.as_ref(),
        0,
    )?;

    let mut csv = String::from(MetricsReport::csv_header());
    csv.push('\n');
    let mut measured_row = measured_report.clone();
    measured_row.nmse_db = f64::NAN;
    csv.push_str(&measured_row.csv_row());
    csv.push('\n');
    csv.push_str(&report.csv_row());
    csv.push('\n');
    std::fs::write(ctx.path(&cfg.path_metrics), csv)?;

    let seg_m = seg.min(measured.len().next_power_of_two() / 2);
    psd_csv(
        &ctx.path(&cfg.path_psd_measured),
        &welch_psd(&measured, seg_m, cfg.metrics_overlap, cfg.metrics_window)?,
    )?;
    psd_csv(
        &ctx.path(&cfg.path_psd_model),
        &welch_psd(&model_out, seg_m, cfg.metrics_overlap, cfg.metrics_window)?,
    )?;
    ctx.archive("eval")?;

    println!("{report}");
    println!(
        "measured output: ACPR {:.2} dB, EVM {:.3} %, PAPR {:.2} dB",
        measured_report.acpr_db, measured_report.evm_pct, measured_report.papr_db
    );
    Ok(0)
}

fn model_name(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::AcLstm { .. } => "aclstm".to_string(),
        ModelSpec::Lstm { .. } => "lstm".to_string(),
        ModelSpec::Arvtdnn { .. } => "arvtdnn".to_string(),
    }
}

/// Gradient check over all model families and several seeds; exit code
/// 1 when any comparison fails.
pub fn cmd_gradcheck(ctx: &RunContext) -> Result<u8> {
    let cfg = &ctx.cfg;
    if ctx.precision_explicit && cfg.precision == Precision::F32 {
        return Err(Error::config(
            "gradient checking requires f64 (f32 differencing noise would mask real errors)",
        ));
    }

    let specs = [
        ModelSpec::AcLstm {
            layers: 1,
            hidden: 3,
            film_hidden: 2,
            film_site: FilmSite::Candidate,
        },
        ModelSpec::AcLstm {
            layers: 1,
            hidden: 3,
            film_hidden: 2,
            film_site: FilmSite::Forget,
        },
        ModelSpec::Lstm { layers: 2, hidden: 4 },
        ModelSpec::Arvtdnn {
            memory_depth: 2,
            poly_order: 2,
            hidden: 4,
        },
    ];
    let mut all_passed = true;
    let mut lines = Vec::new();
    for spec in &specs {
        for s in 0..cfg.gradcheck_seeds {
            let seed = cfg.seed + s as u64;
            let corrupt = if cfg.gradcheck_corrupt { Some(11) } else { None };
            let report = grad_check_with(spec, seed, cfg.gradcheck_tolerance, corrupt)?;
            all_passed &= report.passed;
            lines.push(format!("seed {seed}: {report}"));
        }
    }
    let text = lines.join("\n") + "\n";
    std::fs::write(ctx.out.join("gradcheck.txt"), &text)?;
    ctx.archive("gradcheck")?;
    print!("{text}");
    Ok(if all_passed { 0 } else { 1 })
}
