//! Neural behavioral models: the amplitude-conditioned LSTM cell, the
//! plain LSTM baseline, the stacked network with FC + ReLU + linear
//! head, and the ARVTDNN feed-forward baseline.
//!
//! Parameters live in one flat buffer per model with a named layout, so
//! the optimizer, the finite-difference checker, and the weight-file
//! code all see the same canonical ordering.

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar type for model evaluation and training (f32 or f64).
pub trait Real: Float + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Which LSTM quantity the FiLM output modulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilmSite {
    /// Modulate the candidate cell state (normative definition).
    Candidate,
    /// Modulate the forget gate, clamped back to [0, 1] (ablation).
    Forget,
}

impl FilmSite {
    pub fn as_str(&self) -> &'static str {
        match self {
            FilmSite::Candidate => "candidate",
            FilmSite::Forget => "forget",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "candidate" => Ok(FilmSite::Candidate),
            "forget" => Ok(FilmSite::Forget),
            other => Err(Error::config(format!("unknown film_site '{other}'"))),
        }
    }
}

/// Architecture description for the trainable model families.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    AcLstm {
        layers: usize,
        hidden: usize,
        film_hidden: usize,
        film_site: FilmSite,
    },
    Lstm {
        layers: usize,
        hidden: usize,
    },
    Arvtdnn {
        memory_depth: usize,
        poly_order: usize,
        hidden: usize,
    },
}

/// One named parameter array inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ArrayDef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::AcLstm {
                layers,
                hidden,
                film_hidden,
                ..
            } => {
                if hidden == 0 || film_hidden == 0 {
                    return Err(Error::config("hidden and film_hidden must be positive"));
                }
                let _ = layers; // zero layers allowed for head-only counting
                Ok(())
            }
            ModelSpec::Lstm { hidden, .. } => {
                if hidden == 0 {
                    return Err(Error::config("hidden must be positive"));
                }
                Ok(())
            }
            ModelSpec::Arvtdnn {
                poly_order, hidden, ..
            } => {
                if poly_order == 0 || hidden == 0 {
                    return Err(Error::config("poly_order and hidden must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn recurrent_layers(&self) -> usize {
        match *self {
            ModelSpec::AcLstm { layers, .. } | ModelSpec::Lstm { layers, .. } => layers,
            ModelSpec::Arvtdnn { .. } => 0,
        }
    }

    pub fn hidden(&self) -> usize {
        match *self {
            ModelSpec::AcLstm { hidden, .. }
            | ModelSpec::Lstm { hidden, .. }
            | ModelSpec::Arvtdnn { hidden, .. } => hidden,
        }
    }

    /// ARVTDNN feature width: delayed I/Q taps plus envelope powers.
    pub fn arv_feature_width(&self) -> usize {
        match *self {
            ModelSpec::Arvtdnn {
                memory_depth,
                poly_order,
                ..
            } => (memory_depth + 1) * (2 + poly_order),
            _ => 0,
        }
    }

    /// Named array table in canonical order.
    pub fn layout(&self) -> Vec<ArrayDef> {
        let mut arrays = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| {
            arrays.push(ArrayDef {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };

        match *self {
            ModelSpec::AcLstm {
                layers,
                hidden,
                film_hidden,
                ..
            } => {
                for l in 0..layers {
                    let input_w = if l == 0 { 2 } else { hidden };
                    for gate in ["f", "i", "o", "c"] {
                        push(format!("layer{l}.w_{gate}"), hidden, input_w);
                    }
                    for gate in ["f", "i", "o", "c"] {
                        push(format!("layer{l}.u_{gate}"), hidden, hidden);
                    }
                    for gate in ["f", "i", "o", "c"] {
                        push(format!("layer{l}.b_{gate}"), hidden, 1);
                    }
                    push(format!("layer{l}.film.w1"), film_hidden, 1);
                    push(format!("layer{l}.film.b1"), film_hidden, 1);
                    push(format!("layer{l}.film.w2"), 2 * hidden, film_hidden);
                    push(format!("layer{l}.film.b2"), 2 * hidden, 1);
                }
                push("fc.w".into(), hidden, hidden);
                push("fc.b".into(), hidden, 1);
                push("out.w".into(), 2, hidden);
                push("out.b".into(), 2, 1);
            }
            ModelSpec::Lstm { layers, hidden } => {
                for l in 0..layers {
                    let input_w = if l == 0 { 2 } else { hidden };
                    for gate in ["f", "i", "o", "c"] {
                        push(format!("layer{l}.w_{gate}"), hidden, input_w);
                    }
                    for gate in ["f", "i", "o", "c"] {
                        push(format!("layer{l}.u_{gate}"), hidden, hidden);
                    }
                    for gate in ["f", "i", "o", "c"] {
                        push(format!("layer{l}.b_{gate}"), hidden, 1);
                    }
                }
                push("fc.w".into(), hidden, hidden);
                push("fc.b".into(), hidden, 1);
                push("out.w".into(), 2, hidden);
                push("out.b".into(), 2, 1);
            }
            ModelSpec::Arvtdnn { hidden, .. } => {
                let feat = self.arv_feature_width();
                push("hid.w".into(), hidden, feat);
                push("hid.b".into(), hidden, 1);
                push("out.w".into(), 2, hidden);
                push("out.b".into(), 2, 1);
            }
        }
        arrays
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ArrayDef::len).sum()
    }
}

/// Flat parameter store tied to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub spec: ModelSpec,
    pub data: Vec<T>,
}

/// Hidden/cell state of one recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<T: Real> {
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
        }
    }
}

// ---------------------------------------------------------------------------
// Offsets into the flat buffer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct FilmOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub input_w: usize,
    pub w: [usize; 4], // f, i, o, c : hidden x input_w
    pub u: [usize; 4], // hidden x hidden
    pub b: [usize; 4], // hidden
    pub film: Option<FilmOffsets>,
}

#[derive(Debug, Clone)]
pub(crate) struct NetOffsets {
    pub hidden: usize,
    pub film_hidden: usize,
    pub film_site: Option<FilmSite>,
    pub layers: Vec<LayerOffsets>,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ArvOffsets {
    pub hidden: usize,
    pub feat: usize,
    pub memory_depth: usize,
    pub poly_order: usize,
    pub hid_w: usize,
    pub hid_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

impl ModelSpec {
    pub(crate) fn net_offsets(&self) -> Result<NetOffsets> {
        let (layers, hidden, film_hidden, film_site) = match *self {
            ModelSpec::AcLstm {
                layers,
                hidden,
                film_hidden,
                film_site,
            } => (layers, hidden, film_hidden, Some(film_site)),
            ModelSpec::Lstm { layers, hidden } => (layers, hidden, 0, None),
            ModelSpec::Arvtdnn { .. } => {
                return Err(Error::config("ARVTDNN has no recurrent layers"))
            }
        };
        let table = self.layout();
        let find = |name: &str| table.iter().find(|a| a.name == name).map(|a| a.offset);
        let mut layer_offsets = Vec::with_capacity(layers);
        for l in 0..layers {
            let gate = |kind: &str, g: &str| find(&format!("layer{l}.{kind}_{g}")).unwrap();
            let film = if film_site.is_some() {
                Some(FilmOffsets {
                    w1: find(&format!("layer{l}.film.w1")).unwrap(),
                    b1: find(&format!("layer{l}.film.b1")).unwrap(),
                    w2: find(&format!("layer{l}.film.w2")).unwrap(),
                    b2: find(&format!("layer{l}.film.b2")).unwrap(),
                })
            } else {
                None
            };
            layer_offsets.push(LayerOffsets {
                input_w: if l == 0 { 2 } else { hidden },
                w: [gate("w", "f"), gate("w", "i"), gate("w", "o"), gate("w", "c")],
                u: [gate("u", "f"), gate("u", "i"), gate("u", "o"), gate("u", "c")],
                b: [gate("b", "f"), gate("b", "i"), gate("b", "o"), gate("b", "c")],
                film,
            });
        }
        Ok(NetOffsets {
            hidden,
            film_hidden,
            film_site,
            layers: layer_offsets,
            fc_w: find("fc.w").unwrap(),
            fc_b: find("fc.b").unwrap(),
            out_w: find("out.w").unwrap(),
            out_b: find("out.b").unwrap(),
        })
    }

    pub(crate) fn arv_offsets(&self) -> Result<ArvOffsets> {
        match *self {
            ModelSpec::Arvtdnn {
                memory_depth,
                poly_order,
                hidden,
            } => {
                let table = self.layout();
                let find = |name: &str| table.iter().find(|a| a.name == name).unwrap().offset;
                Ok(ArvOffsets {
                    hidden,
                    feat: self.arv_feature_width(),
                    memory_depth,
                    poly_order,
                    hid_w: find("hid.w"),
                    hid_b: find("hid.b"),
                    out_w: find("out.w"),
                    out_b: find("out.b"),
                })
            }
            _ => Err(Error::config("not an ARVTDNN spec")),
        }
    }
}

// ---------------------------------------------------------------------------
// Views and elementary operations
// ---------------------------------------------------------------------------

/// Borrowed view of one LSTM cell's gate parameters.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellView<'a, T: Real> {
    pub hidden: usize,
    pub input_width: usize,
    pub w: [&'a [T]; 4],
    pub u: [&'a [T]; 4],
    pub b: [&'a [T]; 4],
}

/// Borrowed view of one FiLM conditioning MLP.
#[derive(Debug, Clone, Copy)]
pub struct FilmView<'a, T: Real> {
    pub hidden: usize,
    pub film_hidden: usize,
    pub w1: &'a [T],
    pub b1: &'a [T],
    pub w2: &'a [T],
    pub b2: &'a [T],
}

impl<T: Real> ModelParams<T> {
    pub fn lstm_cell(&self, layer: usize) -> Result<LstmCellView<'_, T>> {
        let off = self.spec.net_offsets()?;
        let lo = off
            .layers
            .get(layer)
            .ok_or_else(|| Error::config(format!("layer {layer} out of range")))?;
        let h = off.hidden;
        let iw = lo.input_w;
        let slice = |o: usize, n: usize| &self.data[o..o + n];
        Ok(LstmCellView {
            hidden: h,
            input_width: iw,
            w: [
                slice(lo.w[0], h * iw),
                slice(lo.w[1], h * iw),
                slice(lo.w[2], h * iw),
                slice(lo.w[3], h * iw),
            ],
            u: [
                slice(lo.u[0], h * h),
                slice(lo.u[1], h * h),
                slice(lo.u[2], h * h),
                slice(lo.u[3], h * h),
            ],
            b: [
                slice(lo.b[0], h),
                slice(lo.b[1], h),
                slice(lo.b[2], h),
                slice(lo.b[3], h),
            ],
        })
    }

    pub fn film(&self, layer: usize) -> Result<Option<FilmView<'_, T>>> {
        let off = self.spec.net_offsets()?;
        let lo = off
            .layers
            .get(layer)
            .ok_or_else(|| Error::config(format!("layer {layer} out of range")))?;
        Ok(lo.film.as_ref().map(|f| FilmView {
            hidden: off.hidden,
            film_hidden: off.film_hidden,
            w1: &self.data[f.w1..f.w1 + off.film_hidden],
            b1: &self.data[f.b1..f.b1 + off.film_hidden],
            w2: &self.data[f.w2..f.w2 + 2 * off.hidden * off.film_hidden],
            b2: &self.data[f.b2..f.b2 + 2 * off.hidden],
        }))
    }

    /// Named array views matching `spec.layout()` order.
    pub fn named_arrays(&self) -> Vec<(ArrayDef, &[T])> {
        self.spec
            .layout()
            .into_iter()
            .map(|def| {
                let s = &self.data[def.offset..def.offset + def.len()];
                (def, s)
            })
            .collect()
    }
}

/// y = W x for a row-major `rows x cols` matrix.
pub(crate) fn matvec<T: Real>(w: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = T::zero();
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc = acc + *wv * *xv;
        }
        out[r] = acc;
    }
}

/// out += W^T y for a row-major `rows x cols` matrix.
pub(crate) fn matvec_t_acc<T: Real>(w: &[T], rows: usize, cols: usize, y: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let yv = y[r];
        for (o, wv) in out.iter_mut().zip(row.iter()) {
            *o = *o + *wv * yv;
        }
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Instantaneous envelope of a complex sample.
pub fn amplitude(x: num_complex::Complex64) -> f64 {
    x.norm()
}

/// Evaluate the FiLM MLP at envelope `a`: tanh hidden layer, linear
/// output split into (gamma, beta).
pub fn film_eval<T: Real>(film: &FilmView<'_, T>, a: T) -> (Vec<T>, Vec<T>) {
    let fh = film.film_hidden;
    let h = film.hidden;
    let mut u = vec![T::zero(); fh];
    for k in 0..fh {
        u[k] = (film.w1[k] * a + film.b1[k]).tanh();
    }
    let mut v = vec![T::zero(); 2 * h];
    matvec(film.w2, 2 * h, fh, &u, &mut v);
    for (vk, bk) in v.iter_mut().zip(film.b2.iter()) {
        *vk = *vk + *bk;
    }
    let beta = v.split_off(h);
    (v, beta)
}

/// Per-step internals recorded for backpropagation through time.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<T: Real> {
    pub x: Vec<T>,
    pub f: Vec<T>,
    pub i: Vec<T>,
    pub o: Vec<T>,
    pub cand: Vec<T>,
    pub film_u: Vec<T>,
    pub gamma: Vec<T>,
    /// Forget-site pre-clamp values gamma*f + beta (empty otherwise).
    pub pre_clamp: Vec<T>,
    /// Forget factor actually used in the cell update.
    pub f_eff: Vec<T>,
    /// Candidate actually used in the cell update.
    pub cand_eff: Vec<T>,
    pub c_prev: Vec<T>,
    pub h_prev: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepTrace<T: Real> {
    pub layers: Vec<LayerTrace<T>>,
    pub fc_pre: Vec<T>,
    pub relu: Vec<T>,
    pub pred: [T; 2],
}

fn clamp01<T: Real>(v: T) -> T {
    if v < T::zero() {
        T::zero()
    } else if v > T::one() {
        T::one()
    } else {
        v
    }
}

/// Shared cell update. `film` of `None` gives the plain LSTM; otherwise
/// the FiLM output modulates the candidate state or the forget gate
/// depending on `site`.
fn step_layer<T: Real>(
    cell: &LstmCellView<'_, T>,
    film: Option<(&FilmView<'_, T>, FilmSite)>,
    x: &[T],
    state: &CellState<T>,
    a: T,
    mut trace: Option<&mut LayerTrace<T>>,
) -> CellState<T> {
    let h = cell.hidden;
    let mut z = vec![T::zero(); h];
    let mut gates: [Vec<T>; 4] = [vec![], vec![], vec![], vec![]];
    for g in 0..4 {
        matvec(cell.w[g], h, cell.input_width, x, &mut z);
        let mut zh = vec![T::zero(); h];
        matvec(cell.u[g], h, h, &state.h, &mut zh);
        let mut out = vec![T::zero(); h];
        for k in 0..h {
            let pre = z[k] + zh[k] + cell.b[g][k];
            out[k] = if g == 3 { pre.tanh() } else { sigmoid(pre) };
        }
        gates[g] = out;
    }
    let [f, i, o, cand] = gates;

    let (gamma, beta, film_u) = match film {
        Some((fv, _)) => {
            let fh = fv.film_hidden;
            let mut u = vec![T::zero(); fh];
            for k in 0..fh {
                u[k] = (fv.w1[k] * a + fv.b1[k]).tanh();
            }
            let mut v = vec![T::zero(); 2 * h];
            matvec(fv.w2, 2 * h, fh, &u, &mut v);
            for (vk, bk) in v.iter_mut().zip(fv.b2.iter()) {
                *vk = *vk + *bk;
            }
            let beta = v.split_off(h);
            (v, beta, u)
        }
        None => (Vec::new(), Vec::new(), Vec::new()),
    };

    let mut pre_clamp = Vec::new();
    let (f_eff, cand_eff): (Vec<T>, Vec<T>) = match film {
        Some((_, FilmSite::Candidate)) => {
            let cand_mod: Vec<T> = (0..h).map(|k| gamma[k] * cand[k] + beta[k]).collect();
            (f.clone(), cand_mod)
        }
        Some((_, FilmSite::Forget)) => {
            pre_clamp = (0..h).map(|k| gamma[k] * f[k] + beta[k]).collect();
            let f_mod: Vec<T> = pre_clamp.iter().map(|&s| clamp01(s)).collect();
            (f_mod, cand.clone())
        }
        None => (f.clone(), cand.clone()),
    };

    let mut c = vec![T::zero(); h];
    let mut tanh_c = vec![T::zero(); h];
    let mut h_new = vec![T::zero(); h];
    for k in 0..h {
        c[k] = f_eff[k] * state.c[k] + i[k] * cand_eff[k];
        tanh_c[k] = c[k].tanh();
        h_new[k] = o[k] * tanh_c[k];
    }

    if let Some(t) = trace.as_deref_mut() {
        *t = LayerTrace {
            x: x.to_vec(),
            f,
            i,
            o,
            cand,
            film_u,
            gamma,
            pre_clamp,
            f_eff,
            cand_eff,
            c_prev: state.c.clone(),
            h_prev: state.h.clone(),
            tanh_c: tanh_c.clone(),
            h: h_new.clone(),
        };
    }

    CellState { h: h_new, c }
}

/// One amplitude-conditioned LSTM step.
pub fn aclstm_step<T: Real>(
    cell: &LstmCellView<'_, T>,
    film: &FilmView<'_, T>,
    site: FilmSite,
    x: &[T],
    state: &CellState<T>,
    a: T,
) -> CellState<T> {
    step_layer(cell, Some((film, site)), x, state, a, None)
}

/// One standard LSTM step.
pub fn lstm_step<T: Real>(cell: &LstmCellView<'_, T>, x: &[T], state: &CellState<T>) -> CellState<T> {
    step_layer(cell, None, x, state, T::zero(), None)
}

fn head_forward<T: Real>(
    data: &[T],
    off: &NetOffsets,
    h_top: &[T],
    trace: Option<(&mut Vec<T>, &mut Vec<T>)>,
) -> [T; 2] {
    let h = off.hidden;
    let mut fc_pre = vec![T::zero(); h];
    matvec(&data[off.fc_w..off.fc_w + h * h], h, h, h_top, &mut fc_pre);
    for k in 0..h {
        fc_pre[k] = fc_pre[k] + data[off.fc_b + k];
    }
    let relu: Vec<T> = fc_pre.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let mut pred = [T::zero(); 2];
    let outw = &data[off.out_w..off.out_w + 2 * h];
    for r in 0..2 {
        let mut acc = T::zero();
        for k in 0..h {
            acc = acc + outw[r * h + k] * relu[k];
        }
        pred[r] = acc + data[off.out_b + r];
    }
    if let Some((t_pre, t_relu)) = trace {
        *t_pre = fc_pre;
        *t_relu = relu;
    }
    pred
}

/// Forward pass of the stacked recurrent network with the FC + ReLU +
/// linear head, optionally recording a tape for BPTT.
pub(crate) fn recurrent_forward<T: Real>(
    params: &ModelParams<T>,
    xs: &[[T; 2]],
    amps: &[T],
    initial_states: Option<Vec<CellState<T>>>,
    mut tape: Option<&mut Vec<StepTrace<T>>>,
) -> Result<(Vec<[T; 2]>, Vec<CellState<T>>)> {
    params.spec.validate()?;
    let off = params.spec.net_offsets()?;
    if off.layers.is_empty() {
        return Err(Error::config("network needs at least one recurrent layer"));
    }
    if xs.is_empty() {
        return Err(Error::config("input sequence must be nonempty"));
    }
    if xs.len() != amps.len() {
        return Err(Error::config("amplitude sequence length mismatch"));
    }
    let nl = off.layers.len();
    let mut states = match initial_states {
        Some(s) => {
            if s.len() != nl || s.iter().any(|st| st.h.len() != off.hidden || st.c.len() != off.hidden)
            {
                return Err(Error::config("initial state shape mismatch"));
            }
            s
        }
        None => (0..nl).map(|_| CellState::zeros(off.hidden)).collect(),
    };

    let cells: Vec<LstmCellView<'_, T>> = (0..nl).map(|l| params.lstm_cell(l).unwrap()).collect();
    let films: Vec<Option<FilmView<'_, T>>> = (0..nl).map(|l| params.film(l).unwrap()).collect();

    let mut preds = Vec::with_capacity(xs.len());
    for (x_t, &a_t) in xs.iter().zip(amps.iter()) {
        let mut step_trace = tape.as_deref_mut().map(|_| StepTrace {
            layers: Vec::with_capacity(nl),
            fc_pre: Vec::new(),
            relu: Vec::new(),
            pred: [T::zero(); 2],
        });
        let mut input: Vec<T> = vec![x_t[0], x_t[1]];
        for l in 0..nl {
            let film_arg = films[l].as_ref().map(|fv| (fv, off.film_site.unwrap()));
            let mut lt = step_trace.as_mut().map(|_| LayerTrace {
                x: vec![],
                f: vec![],
                i: vec![],
                o: vec![],
                cand: vec![],
                film_u: vec![],
                gamma: vec![],
                pre_clamp: vec![],
                f_eff: vec![],
                cand_eff: vec![],
                c_prev: vec![],
                h_prev: vec![],
                tanh_c: vec![],
                h: vec![],
            });
            let new_state = step_layer(&cells[l], film_arg, &input, &states[l], a_t, lt.as_mut());
            if let (Some(st), Some(lt)) = (step_trace.as_mut(), lt) {
                st.layers.push(lt);
            }
            input = new_state.h.clone();
            states[l] = new_state;
        }
        let pred = match step_trace.as_mut() {
            Some(st) => {
                let mut fc_pre = Vec::new();
                let mut relu = Vec::new();
                let p = head_forward(&params.data, &off, &input, Some((&mut fc_pre, &mut relu)));
                st.fc_pre = fc_pre;
                st.relu = relu;
                st.pred = p;
                p
            }
            None => head_forward(&params.data, &off, &input, None),
        };
        if let (Some(tp), Some(st)) = (tape.as_deref_mut(), step_trace) {
            tp.push(st);
        }
        preds.push(pred);
    }
    Ok((preds, states))
}

/// Public forward pass for the recurrent model families: returns the
/// predicted I/Q sequence and the final layer states for window
/// chaining.
pub fn network_forward<T: Real>(
    params: &ModelParams<T>,
    xs: &[[T; 2]],
    amps: &[T],
    initial_states: Option<Vec<CellState<T>>>,
) -> Result<(Vec<[T; 2]>, Vec<CellState<T>>)> {
    recurrent_forward(params, xs, amps, initial_states, None)
}

#[derive(Debug, Clone)]
pub(crate) struct ArvStepTrace<T: Real> {
    pub feat: Vec<T>,
    pub hid: Vec<T>,
}

/// Feature vector for one ARVTDNN timestep: delayed I/Q taps then
/// envelope powers, zero-padded before the sequence start.
pub(crate) fn arv_features<T: Real>(
    xs: &[[T; 2]],
    amps: &[T],
    n: usize,
    memory_depth: usize,
    poly_order: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    for m in 0..=memory_depth {
        if n >= m {
            out.push(xs[n - m][0]);
            out.push(xs[n - m][1]);
        } else {
            out.push(T::zero());
            out.push(T::zero());
        }
    }
    for m in 0..=memory_depth {
        let a = if n >= m { amps[n - m] } else { T::zero() };
        let mut p = T::one();
        for _ in 1..=poly_order {
            p = p * a;
            out.push(p);
        }
    }
}

pub(crate) fn arvtdnn_forward_traced<T: Real>(
    params: &ModelParams<T>,
    xs: &[[T; 2]],
    amps: &[T],
    mut tape: Option<&mut Vec<ArvStepTrace<T>>>,
) -> Result<Vec<[T; 2]>> {
    params.spec.validate()?;
    let off = params.spec.arv_offsets()?;
    if xs.is_empty() {
        return Err(Error::config("input sequence must be nonempty"));
    }
    if xs.len() != amps.len() {
        return Err(Error::config("amplitude sequence length mismatch"));
    }
    let mut preds = Vec::with_capacity(xs.len());
    let mut feat: Vec<T> = Vec::with_capacity(off.feat);
    for n in 0..xs.len() {
        arv_features(xs, amps, n, off.memory_depth, off.poly_order, &mut feat);
        let mut hid = vec![T::zero(); off.hidden];
        matvec(
            &params.data[off.hid_w..off.hid_w + off.hidden * off.feat],
            off.hidden,
            off.feat,
            &feat,
            &mut hid,
        );
        for k in 0..off.hidden {
            hid[k] = (hid[k] + params.data[off.hid_b + k]).tanh();
        }
        let outw = &params.data[off.out_w..off.out_w + 2 * off.hidden];
        let mut pred = [T::zero(); 2];
        for r in 0..2 {
            let mut acc = T::zero();
            for k in 0..off.hidden {
                acc = acc + outw[r * off.hidden + k] * hid[k];
            }
            pred[r] = acc + params.data[off.out_b + r];
        }
        if let Some(tp) = tape.as_deref_mut() {
            tp.push(ArvStepTrace {
                feat: feat.clone(),
                hid: hid.clone(),
            });
        }
        preds.push(pred);
    }
    Ok(preds)
}

/// Forward pass of the ARVTDNN baseline.
pub fn arvtdnn_forward<T: Real>(
    params: &ModelParams<T>,
    xs: &[[T; 2]],
    amps: &[T],
) -> Result<Vec<[T; 2]>> {
    arvtdnn_forward_traced(params, xs, amps, None)
}

/// Forward pass for any trainable model family.
pub fn predict<T: Real>(params: &ModelParams<T>, xs: &[[T; 2]], amps: &[T]) -> Result<Vec<[T; 2]>> {
    match params.spec {
        ModelSpec::Arvtdnn { .. } => arvtdnn_forward(params, xs, amps),
        _ => Ok(network_forward(params, xs, amps, None)?.0),
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Deterministic initialization: gate and head weights uniform in
/// +/- 1/sqrt(fan), forget bias 1, FiLM output weights zeroed with
/// bias [1...1 | 0...0] so a fresh AC-LSTM starts exactly neutral.
///
/// Gate, FiLM, and head draws come from separate sub-streams, so an
/// AC-LSTM and a plain LSTM share gate and head values for equal seeds.
pub fn init_params<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<T>> {
    use rand::Rng;
    spec.validate()?;
    let mut data = vec![T::zero(); spec.param_count()];
    let mut gates = crate::rng::substream(seed, "init/gates");
    let mut film = crate::rng::substream(seed, "init/film");
    let mut head = crate::rng::substream(seed, "init/head");

    let uniform = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> T {
        T::from_f64(rng.gen_range(-scale..=scale))
    };

    match *spec {
        ModelSpec::AcLstm { hidden, .. } | ModelSpec::Lstm { hidden, .. } => {
            let film_hidden = match *spec {
                ModelSpec::AcLstm { film_hidden, .. } => film_hidden,
                _ => 1,
            };
            let scale = 1.0 / (hidden as f64).sqrt();
            for def in spec.layout() {
                let slot = &mut data[def.offset..def.offset + def.len()];
                let name = def.name.as_str();
                if name.contains(".w_") || name.contains(".u_") {
                    for v in slot.iter_mut() {
                        *v = uniform(&mut gates, scale);
                    }
                } else if name.ends_with(".b_f") {
                    for v in slot.iter_mut() {
                        *v = T::one();
                    }
                } else if name.contains(".b_") {
                    // zero
                } else if name.ends_with("film.w1") {
                    let s = 1.0 / (film_hidden as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = uniform(&mut film, s);
                    }
                } else if name.ends_with("film.b1") || name.ends_with("film.w2") {
                    // zero: neutral start
                } else if name.ends_with("film.b2") {
                    for v in slot[..hidden].iter_mut() {
                        *v = T::one();
                    }
                } else if name == "fc.w" || name == "out.w" {
                    for v in slot.iter_mut() {
                        *v = uniform(&mut head, scale);
                    }
                }
                // fc.b and out.b stay zero
            }
        }
        ModelSpec::Arvtdnn { hidden, .. } => {
            let feat = spec.arv_feature_width();
            for def in spec.layout() {
                let slot = &mut data[def.offset..def.offset + def.len()];
                match def.name.as_str() {
                    "hid.w" => {
                        let s = 1.0 / (feat as f64).sqrt();
                        for v in slot.iter_mut() {
                            *v = uniform(&mut gates, s);
                        }
                    }
                    "out.w" => {
                        let s = 1.0 / (hidden as f64).sqrt();
                        for v in slot.iter_mut() {
                            *v = uniform(&mut head, s);
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(ModelParams {
        spec: spec.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::Rng;

    fn ac_spec(layers: usize, hidden: usize, film_hidden: usize) -> ModelSpec {
        ModelSpec::AcLstm {
            layers,
            hidden,
            film_hidden,
            film_site: FilmSite::Candidate,
        }
    }

    fn random_params(spec: &ModelSpec, seed: u64) -> ModelParams<f64> {
        // fully random (no neutral structure) for oracle tests
        let mut p = init_params::<f64>(spec, seed).unwrap();
        let mut rng = crate::rng::substream(seed, "test/full_random");
        for v in p.data.iter_mut() {
            *v = rng.gen_range(-0.9..0.9);
        }
        p
    }

    fn random_seq(len: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
        let mut rng = crate::rng::substream(seed, "test/seq");
        let xs: Vec<[f64; 2]> = (0..len)
            .map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)])
            .collect();
        let amps = xs.iter().map(|x| (x[0] * x[0] + x[1] * x[1]).sqrt()).collect();
        (xs, amps)
    }

    #[test]
    fn amplitude_examples() {
        assert_eq!(amplitude(Complex64::new(0.0, 0.0)), 0.0);
        assert_eq!(amplitude(Complex64::new(3.0, 4.0)), 5.0);
        assert!((amplitude(Complex64::new(-0.6, 0.8)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn param_count_examples() {
        // 4*(8*2+8*8+8) + (4*1+4) + (16*4+16) + (8*8+8) + (2*8+2)
        assert_eq!(ac_spec(1, 8, 4).param_count(), 530);
        // LSTM drops the FiLM terms
        assert_eq!(ModelSpec::Lstm { layers: 1, hidden: 8 }.param_count(), 530 - 88);
        // zero layers leave only the head
        assert_eq!(ac_spec(0, 8, 4).param_count(), 72 + 18);
        // matched-size LSTM baseline used in the experiments
        assert_eq!(ModelSpec::Lstm { layers: 1, hidden: 9 }.param_count(), 542);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ac_spec(2, 6, 3);
        let a = init_params::<f64>(&spec, 9).unwrap();
        let b = init_params::<f64>(&spec, 9).unwrap();
        assert_eq!(a.data, b.data);
        let c = init_params::<f64>(&spec, 10).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn init_sets_forget_bias_and_neutral_film() {
        let spec = ac_spec(1, 4, 3);
        let p = init_params::<f64>(&spec, 1).unwrap();
        for (def, vals) in p.named_arrays() {
            if def.name == "layer0.b_f" {
                assert!(vals.iter().all(|&v| v == 1.0));
            }
            if def.name == "layer0.film.w2" {
                assert!(vals.iter().all(|&v| v == 0.0));
            }
            if def.name == "layer0.film.b2" {
                assert!(vals[..4].iter().all(|&v| v == 1.0));
                assert!(vals[4..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn film_neutral_gives_identity_modulation() {
        let spec = ac_spec(1, 5, 3);
        let p = init_params::<f64>(&spec, 2).unwrap();
        let film = p.film(0).unwrap().unwrap();
        for a in [0.0, 0.3, 1.7] {
            let (gamma, beta) = film_eval(&film, a);
            assert!(gamma.iter().all(|&g| g == 1.0));
            assert!(beta.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn film_zero_w1_is_amplitude_independent() {
        let spec = ac_spec(1, 3, 2);
        let mut p = random_params(&spec, 3);
        // zero w1 so the hidden layer sees only b1
        let layout = spec.layout();
        let w1 = layout.iter().find(|d| d.name == "layer0.film.w1").unwrap();
        for v in p.data[w1.offset..w1.offset + w1.len()].iter_mut() {
            *v = 0.0;
        }
        let film = p.film(0).unwrap().unwrap();
        let (g0, b0) = film_eval(&film, 0.0);
        let (g1, b1) = film_eval(&film, 2.5);
        assert_eq!(g0, g1);
        assert_eq!(b0, b1);
        // and equals w2*tanh(b1) + b2 recomputed by hand
        let b1v: Vec<f64> = film.b1.iter().map(|v| v.tanh()).collect();
        for r in 0..3 {
            let mut acc = 0.0;
            for k in 0..2 {
                acc += film.w2[r * 2 + k] * b1v[k];
            }
            assert!((g0[r] - (acc + film.b2[r])).abs() < 1e-15);
        }
    }

    #[test]
    fn film_matches_scalar_oracle() {
        let spec = ac_spec(1, 3, 2);
        let p = random_params(&spec, 4);
        let film = p.film(0).unwrap().unwrap();
        let a = 0.7;
        let (gamma, beta) = film_eval(&film, a);
        for r in 0..6 {
            let mut acc = 0.0;
            for k in 0..2 {
                acc += film.w2[r * 2 + k] * (film.w1[k] * a + film.b1[k]).tanh();
            }
            acc += film.b2[r];
            let got = if r < 3 { gamma[r] } else { beta[r - 3] };
            assert!((got - acc).abs() < 1e-12, "entry {r}: {got} vs {acc}");
        }
    }

    #[test]
    fn zero_params_with_neutral_biases_give_half_gates_zero_state() {
        let spec = ac_spec(1, 4, 2);
        let mut p = init_params::<f64>(&spec, 0).unwrap();
        // zero everything, then restore the neutral FiLM bias
        for v in p.data.iter_mut() {
            *v = 0.0;
        }
        let layout = spec.layout();
        let b2 = layout.iter().find(|d| d.name == "layer0.film.b2").unwrap();
        for v in p.data[b2.offset..b2.offset + 4].iter_mut() {
            *v = 1.0;
        }
        let cell = p.lstm_cell(0).unwrap();
        let film = p.film(0).unwrap().unwrap();
        let state = CellState::zeros(4);
        let next = aclstm_step(&cell, &film, FilmSite::Candidate, &[0.3, -0.8], &state, 0.85);
        assert!(next.c.iter().all(|&v| v == 0.0));
        assert!(next.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_step_zero_params_zero_output() {
        let spec = ModelSpec::Lstm { layers: 1, hidden: 3 };
        let mut p = init_params::<f64>(&spec, 0).unwrap();
        for v in p.data.iter_mut() {
            *v = 0.0;
        }
        let cell = p.lstm_cell(0).unwrap();
        let next = lstm_step(&cell, &[1.0, -1.0], &CellState::zeros(3));
        assert!(next.h.iter().all(|&v| v == 0.0));
        assert!(next.c.iter().all(|&v| v == 0.0));
    }

    /// Scalar re-derivation of one AC-LSTM step, written independently
    /// of the production code path.
    fn scalar_step_oracle(
        p: &ModelParams<f64>,
        site: FilmSite,
        x: &[f64],
        state: &CellState<f64>,
        a: f64,
    ) -> CellState<f64> {
        let get = |name: &str| {
            let def = p.spec.layout().into_iter().find(|d| d.name == name).unwrap();
            p.data[def.offset..def.offset + def.len()].to_vec()
        };
        let h = match p.spec {
            ModelSpec::AcLstm { hidden, .. } => hidden,
            _ => unreachable!(),
        };
        let fh = match p.spec {
            ModelSpec::AcLstm { film_hidden, .. } => film_hidden,
            _ => unreachable!(),
        };
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let gate = |wn: &str, un: &str, bn: &str, act: &dyn Fn(f64) -> f64| -> Vec<f64> {
            let w = get(wn);
            let u = get(un);
            let b = get(bn);
            (0..h)
                .map(|r| {
                    let mut z = b[r];
                    for (cidx, xv) in x.iter().enumerate() {
                        z += w[r * x.len() + cidx] * xv;
                    }
                    for k in 0..h {
                        z += u[r * h + k] * state.h[k];
                    }
                    act(z)
                })
                .collect()
        };
        let f = gate("layer0.w_f", "layer0.u_f", "layer0.b_f", &sig);
        let i = gate("layer0.w_i", "layer0.u_i", "layer0.b_i", &sig);
        let o = gate("layer0.w_o", "layer0.u_o", "layer0.b_o", &sig);
        let cand = gate("layer0.w_c", "layer0.u_c", "layer0.b_c", &|z| z.tanh());

        let w1 = get("layer0.film.w1");
        let b1 = get("layer0.film.b1");
        let w2 = get("layer0.film.w2");
        let b2 = get("layer0.film.b2");
        let u: Vec<f64> = (0..fh).map(|k| (w1[k] * a + b1[k]).tanh()).collect();
        let v: Vec<f64> = (0..2 * h)
            .map(|r| {
                let mut acc = b2[r];
                for k in 0..fh {
                    acc += w2[r * fh + k] * u[k];
                }
                acc
            })
            .collect();
        let (gamma, beta) = (&v[..h], &v[h..]);

        let mut c = vec![0.0; h];
        let mut hh = vec![0.0; h];
        for k in 0..h {
            match site {
                FilmSite::Candidate => {
                    let cm = gamma[k] * cand[k] + beta[k];
                    c[k] = f[k] * state.c[k] + i[k] * cm;
                }
                FilmSite::Forget => {
                    let s = (gamma[k] * f[k] + beta[k]).clamp(0.0, 1.0);
                    c[k] = s * state.c[k] + i[k] * cand[k];
                }
            }
            hh[k] = o[k] * c[k].tanh();
        }
        CellState { h: hh, c }
    }

    #[test]
    fn aclstm_step_matches_scalar_oracle() {
        for site in [FilmSite::Candidate, FilmSite::Forget] {
            let spec = ModelSpec::AcLstm {
                layers: 1,
                hidden: 2,
                film_hidden: 2,
                film_site: site,
            };
            let p = random_params(&spec, 5);
            let mut rng = crate::rng::substream(6, "test/state");
            let state = CellState {
                h: vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                c: vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
            };
            let x = [0.4, -0.7];
            let cell = p.lstm_cell(0).unwrap();
            let film = p.film(0).unwrap().unwrap();
            let got = aclstm_step(&cell, &film, site, &x, &state, 0.9);
            let want = scalar_step_oracle(&p, site, &x, &state, 0.9);
            for k in 0..2 {
                assert!((got.h[k] - want.h[k]).abs() < 1e-12);
                assert!((got.c[k] - want.c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_step_matches_scalar_oracle_via_neutral_film() {
        // a plain LSTM equals the AC cell with gamma=1, beta=0
        let spec = ModelSpec::Lstm { layers: 1, hidden: 2 };
        let p = random_params(&spec, 7);
        let ac_spec = ModelSpec::AcLstm {
            layers: 1,
            hidden: 2,
            film_hidden: 2,
            film_site: FilmSite::Candidate,
        };
        let mut q = init_params::<f64>(&ac_spec, 7).unwrap();
        // copy shared arrays, keep the neutral FiLM from init
        for (def, vals) in p.named_arrays() {
            let qdef = ac_spec.layout().into_iter().find(|d| d.name == def.name).unwrap();
            q.data[qdef.offset..qdef.offset + qdef.len()].copy_from_slice(vals);
        }
        let state = CellState {
            h: vec![0.2, -0.3],
            c: vec![0.1, 0.4],
        };
        let x = [0.5, 0.6];
        let got = lstm_step(&p.lstm_cell(0).unwrap(), &x, &state);
        let want = scalar_step_oracle(&q, FilmSite::Candidate, &x, &state, 1.23);
        for k in 0..2 {
            assert!((got.h[k] - want.h[k]).abs() < 1e-12);
            assert!((got.c[k] - want.c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_film_forward_equals_plain_lstm() {
        let lstm_spec = ModelSpec::Lstm { layers: 2, hidden: 5 };
        let ac = init_params::<f64>(&ac_spec(2, 5, 3), 11).unwrap();
        let ls = init_params::<f64>(&lstm_spec, 11).unwrap();
        let (xs, amps) = random_seq(64, 12);
        let (pa, sa) = network_forward(&ac, &xs, &amps, None).unwrap();
        let (pl, sl) = network_forward(&ls, &xs, &amps, None).unwrap();
        for (a, b) in pa.iter().zip(pl.iter()) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        for (a, b) in sa.iter().zip(sl.iter()) {
            for k in 0..5 {
                assert!((a.h[k] - b.h[k]).abs() < 1e-12);
                assert!((a.c[k] - b.c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_network_predicts_output_bias() {
        let spec = ac_spec(1, 4, 2);
        let mut p = init_params::<f64>(&spec, 0).unwrap();
        for v in p.data.iter_mut() {
            *v = 0.0;
        }
        let layout = spec.layout();
        let b2 = layout.iter().find(|d| d.name == "layer0.film.b2").unwrap();
        for v in p.data[b2.offset..b2.offset + 4].iter_mut() {
            *v = 1.0;
        }
        let ob = layout.iter().find(|d| d.name == "out.b").unwrap();
        p.data[ob.offset] = 0.25;
        p.data[ob.offset + 1] = -0.5;
        let (xs, amps) = random_seq(16, 3);
        let (preds, _) = network_forward(&p, &xs, &amps, None).unwrap();
        for pr in preds {
            assert_eq!(pr, [0.25, -0.5]);
        }
    }

    #[test]
    fn length_one_sequence_equals_single_step_plus_head() {
        let spec = ac_spec(1, 4, 2);
        let p = random_params(&spec, 13);
        let (xs, amps) = random_seq(1, 14);
        let (preds, states) = network_forward(&p, &xs, &amps, None).unwrap();

        let cell = p.lstm_cell(0).unwrap();
        let film = p.film(0).unwrap().unwrap();
        let st = aclstm_step(
            &cell,
            &film,
            FilmSite::Candidate,
            &[xs[0][0], xs[0][1]],
            &CellState::zeros(4),
            amps[0],
        );
        let off = spec.net_offsets().unwrap();
        let pred = head_forward(&p.data, &off, &st.h, None);
        assert_eq!(preds[0], pred);
        assert_eq!(states[0].h, st.h);
    }

    #[test]
    fn stacked_forward_matches_manual_layer_cascade() {
        let spec = ac_spec(2, 4, 3);
        let p = random_params(&spec, 15);
        let (xs, amps) = random_seq(8, 16);
        let (preds, _) = network_forward(&p, &xs, &amps, None).unwrap();

        // independent re-composition from the public single-step ops
        let off = spec.net_offsets().unwrap();
        let mut s0 = CellState::zeros(4);
        let mut s1 = CellState::zeros(4);
        for t in 0..8 {
            let c0 = p.lstm_cell(0).unwrap();
            let f0 = p.film(0).unwrap().unwrap();
            s0 = aclstm_step(&c0, &f0, FilmSite::Candidate, &[xs[t][0], xs[t][1]], &s0, amps[t]);
            let c1 = p.lstm_cell(1).unwrap();
            let f1 = p.film(1).unwrap().unwrap();
            s1 = aclstm_step(&c1, &f1, FilmSite::Candidate, &s0.h.clone(), &s1, amps[t]);
            let pred = head_forward(&p.data, &off, &s1.h, None);
            assert!((preds[t][0] - pred[0]).abs() < 1e-10);
            assert!((preds[t][1] - pred[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn window_chaining_matches_single_pass() {
        let spec = ac_spec(2, 4, 2);
        let p = random_params(&spec, 17);
        let (xs, amps) = random_seq(64, 18);
        let (full, _) = network_forward(&p, &xs, &amps, None).unwrap();
        let (first, mid) = network_forward(&p, &xs[..32], &amps[..32], None).unwrap();
        let (second, _) = network_forward(&p, &xs[32..], &amps[32..], Some(mid)).unwrap();
        for (t, pr) in full.iter().enumerate() {
            let other = if t < 32 { first[t] } else { second[t - 32] };
            assert!((pr[0] - other[0]).abs() < 1e-12);
            assert!((pr[1] - other[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_stay_bounded_on_traces() {
        let spec = ac_spec(1, 6, 3);
        let p = random_params(&spec, 19);
        let (xs, amps) = random_seq(128, 20);
        let mut tape = Vec::new();
        recurrent_forward(&p, &xs, &amps, None, Some(&mut tape)).unwrap();
        for st in &tape {
            for lt in &st.layers {
                let o_max = lt.o.iter().cloned().fold(0.0, f64::max);
                for k in 0..6 {
                    assert!(lt.f[k] > 0.0 && lt.f[k] < 1.0);
                    assert!(lt.i[k] > 0.0 && lt.i[k] < 1.0);
                    assert!(lt.o[k] > 0.0 && lt.o[k] < 1.0);
                    assert!(lt.cand[k] > -1.0 && lt.cand[k] < 1.0);
                    assert!(lt.h[k].abs() <= o_max);
                }
            }
        }
    }

    #[test]
    fn arvtdnn_zero_params_give_bias() {
        let spec = ModelSpec::Arvtdnn {
            memory_depth: 2,
            poly_order: 3,
            hidden: 4,
        };
        let mut p = init_params::<f64>(&spec, 0).unwrap();
        for v in p.data.iter_mut() {
            *v = 0.0;
        }
        let ob = spec.layout().into_iter().find(|d| d.name == "out.b").unwrap();
        p.data[ob.offset] = 1.5;
        let (xs, amps) = random_seq(10, 21);
        let preds = arvtdnn_forward(&p, &xs, &amps).unwrap();
        for pr in preds {
            assert_eq!(pr, [1.5, 0.0]);
        }
    }

    #[test]
    fn arvtdnn_memoryless_feature_layout() {
        // M=0, P=1 reduces to a static MLP on (I, Q, a)
        let spec = ModelSpec::Arvtdnn {
            memory_depth: 0,
            poly_order: 1,
            hidden: 3,
        };
        assert_eq!(spec.arv_feature_width(), 3);
        let (xs, amps) = random_seq(4, 22);
        let mut feat = Vec::new();
        arv_features(&xs, &amps, 2, 0, 1, &mut feat);
        assert_eq!(feat, vec![xs[2][0], xs[2][1], amps[2]]);
    }

    #[test]
    fn arvtdnn_matches_scalar_oracle() {
        let spec = ModelSpec::Arvtdnn {
            memory_depth: 1,
            poly_order: 2,
            hidden: 2,
        };
        let p = random_params(&spec, 23);
        let (xs, amps) = random_seq(5, 24);
        let preds = arvtdnn_forward(&p, &xs, &amps).unwrap();

        let get = |name: &str| {
            let def = spec.layout().into_iter().find(|d| d.name == name).unwrap();
            p.data[def.offset..def.offset + def.len()].to_vec()
        };
        let (w1, b1, w2, b2) = (get("hid.w"), get("hid.b"), get("out.w"), get("out.b"));
        for n in 0..5 {
            // features: I(n), Q(n), I(n-1), Q(n-1), a(n), a(n)^2, a(n-1), a(n-1)^2
            let prev = if n >= 1 { xs[n - 1] } else { [0.0, 0.0] };
            let ap = if n >= 1 { amps[n - 1] } else { 0.0 };
            let feat = [
                xs[n][0],
                xs[n][1],
                prev[0],
                prev[1],
                amps[n],
                amps[n] * amps[n],
                ap,
                ap * ap,
            ];
            let hid: Vec<f64> = (0..2)
                .map(|r| {
                    let mut z = b1[r];
                    for (c, fv) in feat.iter().enumerate() {
                        z += w1[r * 8 + c] * fv;
                    }
                    z.tanh()
                })
                .collect();
            for r in 0..2 {
                let want = b2[r] + w2[r * 2] * hid[0] + w2[r * 2 + 1] * hid[1];
                assert!((preds[n][r] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ac_spec(1, 8, 4);
        let p = init_params::<f64>(&spec, 33).unwrap();
        let (xs, amps) = random_seq(50, 34);
        let (a, _) = network_forward(&p, &xs, &amps, None).unwrap();
        let (b, _) = network_forward(&p, &xs, &amps, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let spec = ac_spec(1, 4, 2);
        let p = init_params::<f64>(&spec, 0).unwrap();
        let (xs, _) = random_seq(8, 1);
        assert!(network_forward(&p, &xs, &[0.0; 3], None).is_err());
        let bad_state = vec![CellState::zeros(7)];
        let (xs, amps) = random_seq(8, 1);
        assert!(network_forward(&p, &xs, &amps, Some(bad_state)).is_err());
    }
}
