//! Memory-polynomial and generalized-memory-polynomial baselines,
//! identified by complex linear least squares.
//!
//! The solve uses Householder QR with column pivoting (never the normal
//! equations); a normal-equation route is kept alongside as an
//! independent cross-check.

use crate::error::{Error, Result};
use crate::signal::Waveform;
use num_complex::Complex64;

/// Cross-term branch configuration for the GMP.
///
/// Lagging terms pair `x[n-m]` with the envelope one sample earlier,
/// leading terms with the envelope one `lag` later; the leading memory
/// range starts at `lag` so every column stays causal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GmpCross {
    /// Envelope exponents k (each column uses |.|^(k-1)).
    pub orders: Vec<usize>,
    /// Number of memory taps per branch.
    pub memory: usize,
    pub lag: usize,
}

impl GmpCross {
    pub fn column_count(&self) -> usize {
        2 * self.memory * self.orders.len()
    }
}

/// Memory-polynomial model structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpSpec {
    pub memory_depth: usize,
    pub order: usize,
    pub odd_only: bool,
    pub cross: Option<GmpCross>,
}

impl MpSpec {
    pub fn mp(memory_depth: usize, order: usize) -> Self {
        MpSpec {
            memory_depth,
            order,
            odd_only: false,
            cross: None,
        }
    }

    /// The comparison configuration: M=4, K=9 main branch (45 columns)
    /// plus 18 cross columns.
    pub fn gmp_default() -> Self {
        MpSpec {
            memory_depth: 4,
            order: 9,
            odd_only: false,
            cross: Some(GmpCross {
                orders: vec![3, 5, 7],
                memory: 3,
                lag: 1,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::config("nonlinearity order must be >= 1"));
        }
        if let Some(cross) = &self.cross {
            if cross.lag == 0 || cross.memory == 0 || cross.orders.is_empty() {
                return Err(Error::config("GMP cross branch must be non-degenerate"));
            }
            if cross.orders.iter().any(|&k| k < 2) {
                return Err(Error::config("GMP cross orders must be >= 2"));
            }
        }
        Ok(())
    }

    fn main_orders(&self) -> Vec<usize> {
        (1..=self.order)
            .filter(|k| !self.odd_only || k % 2 == 1)
            .collect()
    }

    pub fn coeff_count(&self) -> usize {
        (self.memory_depth + 1) * self.main_orders().len()
            + self.cross.as_ref().map_or(0, GmpCross::column_count)
    }
}

/// Identified coefficients plus the fit diagnostics.
#[derive(Debug, Clone)]
pub struct MpFit {
    pub coeffs: Vec<Complex64>,
    pub residual_nmse_db: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

fn env_pow(x: &[Complex64], idx: i64, k: usize) -> f64 {
    if idx < 0 || idx as usize >= x.len() {
        return 0.0;
    }
    x[idx as usize].norm().powi(k as i32 - 1)
}

fn sample_at(x: &[Complex64], idx: i64) -> Complex64 {
    if idx < 0 || idx as usize >= x.len() {
        Complex64::new(0.0, 0.0)
    } else {
        x[idx as usize]
    }
}

/// Design-matrix columns in fixed lexicographic order: main terms
/// (memory outer, order inner), then lagging cross terms, then leading
/// cross terms. Pre-history is zero-padded.
pub fn mp_basis(x: &Waveform, spec: &MpSpec) -> Result<Vec<Vec<Complex64>>> {
    spec.validate()?;
    let xs = &x.samples;
    if xs.len() <= spec.memory_depth {
        return Err(Error::config("waveform shorter than the memory depth"));
    }
    let n = xs.len();
    let mut cols = Vec::with_capacity(spec.coeff_count());
    for m in 0..=spec.memory_depth {
        for &k in &spec.main_orders() {
            let col = (0..n)
                .map(|t| {
                    let idx = t as i64 - m as i64;
                    sample_at(xs, idx) * env_pow(xs, idx, k)
                })
                .collect();
            cols.push(col);
        }
    }
    if let Some(cross) = &spec.cross {
        // lagging: envelope `lag` samples earlier than the tap
        for m in 0..cross.memory {
            for &k in &cross.orders {
                let col = (0..n)
                    .map(|t| {
                        let idx = t as i64 - m as i64;
                        sample_at(xs, idx) * env_pow(xs, idx - cross.lag as i64, k)
                    })
                    .collect();
                cols.push(col);
            }
        }
        // leading: envelope `lag` samples later; taps start at `lag` so
        // the envelope index never looks into the future
        for m in cross.lag..cross.lag + cross.memory {
            for &k in &cross.orders {
                let col = (0..n)
                    .map(|t| {
                        let idx = t as i64 - m as i64;
                        sample_at(xs, idx) * env_pow(xs, idx + cross.lag as i64, k)
                    })
                    .collect();
                cols.push(col);
            }
        }
    }
    Ok(cols)
}

/// Predict `basis(x) . coeffs`.
pub fn mp_predict(x: &Waveform, spec: &MpSpec, coeffs: &[Complex64]) -> Result<Waveform> {
    let cols = mp_basis(x, spec)?;
    if coeffs.len() != cols.len() {
        return Err(Error::config(format!(
            "coefficient count {} does not match basis width {}",
            coeffs.len(),
            cols.len()
        )));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for (col, c) in cols.iter().zip(coeffs.iter()) {
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += c * v;
        }
    }
    Waveform::new(out, x.sample_rate_hz, "mp_pred")
}

/// Fit coefficients minimizing ||y - Phi c||_2 with a pivoted
/// Householder QR; rank deficiency falls back to the minimum-norm
/// solution over the detected row space.
pub fn mp_fit(x: &Waveform, y: &Waveform, spec: &MpSpec) -> Result<MpFit> {
    if x.len() != y.len() {
        return Err(Error::config("input/output lengths differ"));
    }
    let cols = mp_basis(x, spec)?;
    let ncols = cols.len();
    if x.len() < ncols {
        return Err(Error::config("fewer samples than coefficients"));
    }
    let (coeffs, rank) = qr_least_squares(cols, y.samples.clone(), 1e-12)?;

    let pred = mp_predict(x, spec, &coeffs)?;
    let err: f64 = y
        .samples
        .iter()
        .zip(pred.samples.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    let sig: f64 = y.samples.iter().map(|v| v.norm_sqr()).sum();
    if sig <= 0.0 {
        return Err(Error::numeric("target waveform has zero energy"));
    }
    let residual_nmse_db = 10.0 * (err / sig).max(1e-30).log10();
    Ok(MpFit {
        coeffs,
        residual_nmse_db,
        rank,
        rank_deficient: rank < ncols,
    })
}

/// Normal-equation route (Phi^H Phi c = Phi^H y via Cholesky), kept as
/// an independent algebraic cross-check of the QR solve.
pub fn mp_fit_normal_equations(x: &Waveform, y: &Waveform, spec: &MpSpec) -> Result<Vec<Complex64>> {
    let cols = mp_basis(x, spec)?;
    let n = cols.len();
    let mut gram = vec![Complex64::new(0.0, 0.0); n * n];
    let mut rhs = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        for j in i..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..x.len() {
                acc += cols[i][t].conj() * cols[j][t];
            }
            gram[i * n + j] = acc;
            gram[j * n + i] = acc.conj();
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for t in 0..x.len() {
            acc += cols[i][t].conj() * y.samples[t];
        }
        rhs[i] = acc;
    }
    cholesky_solve(&mut gram, &mut rhs, n)?;
    Ok(rhs)
}

/// Pivoted Householder QR least squares over complex columns. Returns
/// the solution (minimum-norm when rank-deficient) and the numeric rank.
fn qr_least_squares(
    mut cols: Vec<Vec<Complex64>>,
    mut rhs: Vec<Complex64>,
    rank_tol_rel: f64,
) -> Result<(Vec<Complex64>, usize)> {
    let m = rhs.len();
    let n = cols.len();
    if n == 0 || m == 0 {
        return Err(Error::config("empty least-squares system"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let kmax = n.min(m);
    let mut rank = kmax;
    let mut tol_abs = f64::INFINITY;

    for k in 0..kmax {
        // pivot on the largest remaining column norm
        let mut best = k;
        let mut best_norm2 = -1.0;
        for j in k..n {
            let s: f64 = cols[j][k..].iter().map(|v| v.norm_sqr()).sum();
            if s > best_norm2 {
                best_norm2 = s;
                best = j;
            }
        }
        cols.swap(k, best);
        perm.swap(k, best);
        let alpha = best_norm2.max(0.0).sqrt();
        if k == 0 {
            if alpha == 0.0 {
                return Err(Error::numeric("design matrix is zero"));
            }
            tol_abs = alpha * rank_tol_rel;
        }
        if alpha <= tol_abs {
            rank = k;
            break;
        }

        let x0 = cols[k][k];
        let sigma = if x0.norm() > 0.0 {
            x0 / x0.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let mut v: Vec<Complex64> = cols[k][k..].to_vec();
        v[0] += sigma * alpha;
        let vnorm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm2 == 0.0 {
            rank = k;
            break;
        }
        cols[k][k] = -sigma * alpha;
        for t in k + 1..m {
            cols[k][t] = Complex64::new(0.0, 0.0);
        }
        let scale = 2.0 / vnorm2;
        for col in cols.iter_mut().skip(k + 1) {
            let dot: Complex64 = v
                .iter()
                .zip(col[k..].iter())
                .map(|(vv, av)| vv.conj() * av)
                .sum();
            let w = dot * scale;
            for (t, vv) in v.iter().enumerate() {
                col[k + t] -= w * vv;
            }
        }
        let dot: Complex64 = v
            .iter()
            .zip(rhs[k..].iter())
            .map(|(vv, av)| vv.conj() * av)
            .sum();
        let w = dot * scale;
        for (t, vv) in v.iter().enumerate() {
            rhs[k + t] -= w * vv;
        }
    }

    let r_at = |i: usize, j: usize| cols[j][i];
    let mut solution = vec![Complex64::new(0.0, 0.0); n];
    if rank == n {
        // back substitution on the full R
        let mut z = vec![Complex64::new(0.0, 0.0); n];
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for j in i + 1..n {
                acc -= r_at(i, j) * z[j];
            }
            z[i] = acc / r_at(i, i);
        }
        for (i, &p) in perm.iter().enumerate() {
            solution[p] = z[i];
        }
    } else {
        // minimum-norm solution over the rank-revealed row space:
        // w = B^H (B B^H)^{-1} c1 with B the leading rank x n block of R
        let r = rank;
        let mut gram = vec![Complex64::new(0.0, 0.0); r * r];
        for i in 0..r {
            for j in 0..r {
                let mut acc = Complex64::new(0.0, 0.0);
                for t in 0..n {
                    acc += r_at(i, t) * r_at(j, t).conj();
                }
                gram[i * r + j] = acc;
            }
        }
        let mut u: Vec<Complex64> = rhs[..r].to_vec();
        cholesky_solve(&mut gram, &mut u, r)?;
        for t in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..r {
                acc += r_at(i, t).conj() * u[i];
            }
            solution[perm[t]] = acc;
        }
    }
    Ok((solution, rank))
}

/// Solve a Hermitian positive-definite system in place (returns x in `rhs`).
fn cholesky_solve(a: &mut [Complex64], rhs: &mut [Complex64], n: usize) -> Result<()> {
    // in-place lower Cholesky
    for j in 0..n {
        let mut diag = a[j * n + j].re;
        for k in 0..j {
            diag -= a[j * n + k].norm_sqr();
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::numeric("matrix not positive definite"));
        }
        let l_jj = diag.sqrt();
        a[j * n + j] = Complex64::new(l_jj, 0.0);
        for i in j + 1..n {
            let mut acc = a[i * n + j];
            for k in 0..j {
                acc -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = acc / l_jj;
        }
    }
    // forward substitution L z = rhs
    for i in 0..n {
        let mut acc = rhs[i];
        for k in 0..i {
            acc -= a[i * n + k] * rhs[k];
        }
        rhs[i] = acc / a[i * n + i].re;
    }
    // back substitution L^H x = z
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for k in i + 1..n {
            acc -= a[k * n + i].conj() * rhs[k];
        }
        rhs[i] = acc / a[i * n + i].re;
    }
    Ok(())
}
