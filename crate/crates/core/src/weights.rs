//! ACW1 checkpoint serialization for neural and polynomial models.
//!
//! The text header carries the architecture, the normalization
//! statistics of the dataset the model was trained on, the conditioning
//! envelope source, precision, and seed; the loader rebuilds the
//! architecture and validates every array shape against it.

use crate::error::{Error, Result};
use crate::io::{read_acw1, write_acw1, Acw1, NamedArray, Precision};
use crate::nn::{FilmSite, ModelParams, ModelSpec, Real};
use crate::poly::{GmpCross, MpSpec};
use crate::signal::NormStats;
use crate::train::AmplitudeSource;
use num_complex::Complex64;
use std::path::Path;

/// A neural model checkpoint with the context needed to evaluate it.
#[derive(Debug, Clone)]
pub struct NeuralCheckpoint<T: Real> {
    pub params: ModelParams<T>,
    pub amp_source: AmplitudeSource,
    pub norm_in: NormStats,
    pub norm_out: NormStats,
    pub seed: u64,
}

/// A fitted polynomial model (raw-domain, no normalization context).
#[derive(Debug, Clone)]
pub struct PolyCheckpoint {
    pub spec: MpSpec,
    pub is_gmp: bool,
    pub coeffs: Vec<Complex64>,
    pub residual_nmse_db: f64,
    pub seed: u64,
}

/// Any model loadable from an ACW1 file.
pub enum LoadedModel {
    NeuralF32(NeuralCheckpoint<f32>),
    NeuralF64(NeuralCheckpoint<f64>),
    Poly(PolyCheckpoint),
}

fn norm_to_string(s: &NormStats) -> String {
    format!("{},{},{},{}", s.mean_i, s.mean_q, s.std_i, s.std_q)
}

fn norm_from_string(v: &str) -> Result<NormStats> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| p.parse::<f64>().map_err(|_| Error::config("bad norm stats")))
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::config("norm stats need 4 values"));
    }
    Ok(NormStats {
        mean_i: parts[0],
        mean_q: parts[1],
        std_i: parts[2],
        std_q: parts[3],
    })
}

fn spec_header(spec: &ModelSpec) -> Vec<(String, String)> {
    let mut h = Vec::new();
    let mut push = |k: &str, v: String| h.push((k.to_string(), v));
    match *spec {
        ModelSpec::AcLstm {
            layers,
            hidden,
            film_hidden,
            film_site,
        } => {
            push("model", "aclstm".into());
            push("layers", layers.to_string());
            push("hidden", hidden.to_string());
            push("film_hidden", film_hidden.to_string());
            push("film_site", film_site.as_str().into());
        }
        ModelSpec::Lstm { layers, hidden } => {
            push("model", "lstm".into());
            push("layers", layers.to_string());
            push("hidden", hidden.to_string());
        }
        ModelSpec::Arvtdnn {
            memory_depth,
            poly_order,
            hidden,
        } => {
            push("model", "arvtdnn".into());
            push("arv_memory", memory_depth.to_string());
            push("arv_order", poly_order.to_string());
            push("hidden", hidden.to_string());
        }
    }
    h
}

fn spec_from_header(acw: &Acw1) -> Result<ModelSpec> {
    let get_usize = |k: &str| -> Result<usize> {
        acw.require(k)?
            .parse::<usize>()
            .map_err(|_| Error::config(format!("bad header value for '{k}'")))
    };
    match acw.require("model")? {
        "aclstm" => Ok(ModelSpec::AcLstm {
            layers: get_usize("layers")?,
            hidden: get_usize("hidden")?,
            film_hidden: get_usize("film_hidden")?,
            film_site: FilmSite::parse(acw.require("film_site")?)?,
        }),
        "lstm" => Ok(ModelSpec::Lstm {
            layers: get_usize("layers")?,
            hidden: get_usize("hidden")?,
        }),
        "arvtdnn" => Ok(ModelSpec::Arvtdnn {
            memory_depth: get_usize("arv_memory")?,
            poly_order: get_usize("arv_order")?,
            hidden: get_usize("hidden")?,
        }),
        other => Err(Error::config(format!("unknown model kind '{other}' in weights"))),
    }
}

/// Save a neural checkpoint; `extra` lets callers record run context
/// (for example the best epoch).
pub fn save_neural<T: Real>(
    path: &Path,
    ckpt: &NeuralCheckpoint<T>,
    precision: Precision,
    extra: &[(String, String)],
) -> Result<()> {
    let mut header = spec_header(&ckpt.params.spec);
    header.push(("amp_source".into(), ckpt.amp_source.as_str().into()));
    header.push(("seed".into(), ckpt.seed.to_string()));
    header.push(("norm_in".into(), norm_to_string(&ckpt.norm_in)));
    header.push(("norm_out".into(), norm_to_string(&ckpt.norm_out)));
    header.extend(extra.iter().cloned());

    let arrays = ckpt
        .params
        .named_arrays()
        .into_iter()
        .map(|(def, vals)| NamedArray {
            name: def.name,
            rows: def.rows,
            cols: def.cols,
            data: vals.iter().map(|v| Real::to_f64(*v)).collect(),
        })
        .collect();
    write_acw1(
        path,
        &Acw1 {
            header,
            precision,
            arrays,
        },
    )
}

/// Save fitted polynomial coefficients (always f64 payload).
pub fn save_poly(path: &Path, ckpt: &PolyCheckpoint) -> Result<()> {
    let mut header = vec![(
        "model".to_string(),
        if ckpt.is_gmp { "gmp".to_string() } else { "mp".to_string() },
    )];
    header.push(("mp_memory".into(), ckpt.spec.memory_depth.to_string()));
    header.push(("mp_order".into(), ckpt.spec.order.to_string()));
    header.push(("mp_odd_only".into(), ckpt.spec.odd_only.to_string()));
    if let Some(cross) = &ckpt.spec.cross {
        header.push((
            "gmp_cross_orders".into(),
            cross
                .orders
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ));
        header.push(("gmp_cross_memory".into(), cross.memory.to_string()));
        header.push(("gmp_cross_lag".into(), cross.lag.to_string()));
    }
    header.push(("seed".into(), ckpt.seed.to_string()));
    header.push(("residual_nmse_db".into(), ckpt.residual_nmse_db.to_string()));

    let n = ckpt.coeffs.len();
    let arrays = vec![
        NamedArray {
            name: "coeffs_re".into(),
            rows: n,
            cols: 1,
            data: ckpt.coeffs.iter().map(|c| c.re).collect(),
        },
        NamedArray {
            name: "coeffs_im".into(),
            rows: n,
            cols: 1,
            data: ckpt.coeffs.iter().map(|c| c.im).collect(),
        },
    ];
    write_acw1(
        path,
        &Acw1 {
            header,
            precision: Precision::F64,
            arrays,
        },
    )
}

fn neural_from_acw1<T: Real>(path: &Path, acw: &Acw1) -> Result<NeuralCheckpoint<T>> {
    let pstr = path.display().to_string();
    let spec = spec_from_header(acw)?;
    let layout = spec.layout();
    if acw.arrays.len() != layout.len() {
        return Err(Error::format(
            &pstr,
            format!("expected {} arrays, found {}", layout.len(), acw.arrays.len()),
        ));
    }
    let mut data = vec![T::zero(); spec.param_count()];
    for (def, arr) in layout.iter().zip(acw.arrays.iter()) {
        if arr.name != def.name || arr.rows != def.rows || arr.cols != def.cols {
            return Err(Error::format(
                &pstr,
                format!(
                    "array '{}' ({}x{}) does not match expected '{}' ({}x{})",
                    arr.name, arr.rows, arr.cols, def.name, def.rows, def.cols
                ),
            ));
        }
        for (k, v) in arr.data.iter().enumerate() {
            data[def.offset + k] = T::from_f64(*v);
        }
    }
    Ok(NeuralCheckpoint {
        params: ModelParams { spec, data },
        amp_source: AmplitudeSource::parse(acw.require("amp_source")?)?,
        norm_in: norm_from_string(acw.require("norm_in")?)?,
        norm_out: norm_from_string(acw.require("norm_out")?)?,
        seed: acw
            .require("seed")?
            .parse()
            .map_err(|_| Error::format(&pstr, "bad seed"))?,
    })
}

fn poly_from_acw1(path: &Path, acw: &Acw1, is_gmp: bool) -> Result<PolyCheckpoint> {
    let pstr = path.display().to_string();
    let get_usize = |k: &str| -> Result<usize> {
        acw.require(k)?
            .parse::<usize>()
            .map_err(|_| Error::config(format!("bad header value for '{k}'")))
    };
    let cross = if is_gmp {
        Some(GmpCross {
            orders: acw
                .require("gmp_cross_orders")?
                .split(',')
                .map(|p| p.parse::<usize>().map_err(|_| Error::config("bad cross orders")))
                .collect::<Result<_>>()?,
            memory: get_usize("gmp_cross_memory")?,
            lag: get_usize("gmp_cross_lag")?,
        })
    } else {
        None
    };
    let spec = MpSpec {
        memory_depth: get_usize("mp_memory")?,
        order: get_usize("mp_order")?,
        odd_only: acw.require("mp_odd_only")? == "true",
        cross,
    };
    let re = acw
        .arrays
        .iter()
        .find(|a| a.name == "coeffs_re")
        .ok_or_else(|| Error::format(&pstr, "missing coeffs_re"))?;
    let im = acw
        .arrays
        .iter()
        .find(|a| a.name == "coeffs_im")
        .ok_or_else(|| Error::format(&pstr, "missing coeffs_im"))?;
    if re.data.len() != im.data.len() || re.data.len() != spec.coeff_count() {
        return Err(Error::format(&pstr, "coefficient arrays do not match the declared structure"));
    }
    Ok(PolyCheckpoint {
        coeffs: re
            .data
            .iter()
            .zip(im.data.iter())
            .map(|(r, i)| Complex64::new(*r, *i))
            .collect(),
        residual_nmse_db: acw
            .get("residual_nmse_db")
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN),
        seed: acw.get("seed").and_then(|v| v.parse().ok()).unwrap_or(0),
        spec,
        is_gmp,
    })
}

/// Load any ACW1 checkpoint, dispatching on the header.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let acw = read_acw1(path)?;
    match acw.require("model")? {
        "mp" => Ok(LoadedModel::Poly(poly_from_acw1(path, &acw, false)?)),
        "gmp" => Ok(LoadedModel::Poly(poly_from_acw1(path, &acw, true)?)),
        _ => match acw.precision {
            Precision::F32 => Ok(LoadedModel::NeuralF32(neural_from_acw1(path, &acw)?)),
            Precision::F64 => Ok(LoadedModel::NeuralF64(neural_from_acw1(path, &acw)?)),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("aclstm_weights_{}_{name}", std::process::id()))
    }

    fn stats(a: f64) -> NormStats {
        NormStats {
            mean_i: a,
            mean_q: -a,
            std_i: 1.0 + a,
            std_q: 2.0,
        }
    }

    #[test]
    fn neural_round_trip_f64() {
        let spec = ModelSpec::AcLstm {
            layers: 1,
            hidden: 4,
            film_hidden: 2,
            film_site: FilmSite::Forget,
        };
        let ckpt = NeuralCheckpoint {
            params: init_params::<f64>(&spec, 7).unwrap(),
            amp_source: AmplitudeSource::Raw,
            norm_in: stats(0.25),
            norm_out: stats(0.5),
            seed: 7,
        };
        let path = tmp("rt64.acw1");
        save_neural(&path, &ckpt, Precision::F64, &[("best_epoch".into(), "3".into())]).unwrap();
        match load_model(&path).unwrap() {
            LoadedModel::NeuralF64(back) => {
                assert_eq!(back.params.spec, spec);
                assert_eq!(back.params.data, ckpt.params.data);
                assert_eq!(back.norm_in, ckpt.norm_in);
                assert_eq!(back.norm_out, ckpt.norm_out);
                assert_eq!(back.amp_source, AmplitudeSource::Raw);
            }
            _ => panic!("wrong variant"),
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn neural_round_trip_f32_is_exact() {
        let spec = ModelSpec::Lstm { layers: 1, hidden: 3 };
        let ckpt = NeuralCheckpoint {
            params: init_params::<f32>(&spec, 9).unwrap(),
            amp_source: AmplitudeSource::Normalized,
            norm_in: stats(0.0),
            norm_out: stats(1.0),
            seed: 9,
        };
        let path = tmp("rt32.acw1");
        save_neural(&path, &ckpt, Precision::F32, &[]).unwrap();
        match load_model(&path).unwrap() {
            LoadedModel::NeuralF32(back) => assert_eq!(back.params.data, ckpt.params.data),
            _ => panic!("wrong variant"),
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn loader_rejects_shape_mismatch() {
        let spec = ModelSpec::Lstm { layers: 1, hidden: 3 };
        let ckpt = NeuralCheckpoint {
            params: init_params::<f64>(&spec, 1).unwrap(),
            amp_source: AmplitudeSource::Raw,
            norm_in: stats(0.0),
            norm_out: stats(0.0),
            seed: 1,
        };
        let path = tmp("shape.acw1");
        save_neural(&path, &ckpt, Precision::F64, &[]).unwrap();
        // corrupt the declared hidden size so shapes disagree
        let text = std::fs::read(&path).unwrap();
        let s = String::from_utf8_lossy(&text).replace("hidden=3", "hidden=4");
        std::fs::write(&path, s.as_bytes()).unwrap();
        assert!(load_model(&path).is_err());
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn poly_round_trip() {
        let spec = MpSpec::gmp_default();
        let ckpt = PolyCheckpoint {
            coeffs: (0..spec.coeff_count())
                .map(|k| Complex64::new(k as f64 * 0.5, -(k as f64) * 0.25))
                .collect(),
            residual_nmse_db: -123.0,
            seed: 4,
            spec: spec.clone(),
            is_gmp: true,
        };
        let path = tmp("poly.acw1");
        save_poly(&path, &ckpt).unwrap();
        match load_model(&path).unwrap() {
            LoadedModel::Poly(back) => {
                assert_eq!(back.spec, spec);
                assert_eq!(back.coeffs, ckpt.coeffs);
                assert_eq!(back.residual_nmse_db, -123.0);
            }
            _ => panic!("wrong variant"),
        }
        std::fs::remove_file(path).ok();
    }
}
