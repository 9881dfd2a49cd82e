//! Majorization–minimization in a generalized Krylov subspace for
//! `min ‖A s − b‖² + λ‖L s‖₁`.
//!
//! The ℓ₁ term is replaced at each iterate by the quadratic majorant
//! `λ‖P_ε L s‖²` with `P_ε = diag((z² + ε²)^{−1/4})`, `z = L s_k`. The
//! reweighted least-squares problem is solved on a basis `W` that starts as
//! a few Golub–Kahan vectors and grows by one normal-equation residual per
//! iteration.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::linops::LinearOperator;

/// Regularisation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// Balance the fidelity and majorant terms at the initial iterate.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmgksSettings {
    pub lambda: Lambda,
    /// Smoothing parameter; `None` picks `1e-2 · max|L s⁰|`.
    pub eps: Option<f64>,
    /// Initial Golub–Kahan steps.
    pub l0: usize,
    pub k_max: usize,
    /// Relative change of `s` at which iteration stops.
    pub tol: f64,
}

impl Default for MmgksSettings {
    fn default() -> Self {
        Self {
            lambda: Lambda::Auto,
            eps: None,
            l0: 5,
            k_max: 30,
            tol: 1e-4,
        }
    }
}

impl MmgksSettings {
    pub fn validate(&self) -> Result<()> {
        if self.l0 == 0 {
            return Err(Error::Config("l0 must be at least 1".into()));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::Config(format!("eps must be positive, got {e}")));
            }
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {l}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MmgksProblem<'a> {
    pub a: &'a LinearOperator,
    pub l: &'a LinearOperator,
    pub b: &'a DVector<f64>,
    pub settings: MmgksSettings,
}

/// Golub–Kahan output: `A W = U B` with `B` lower bidiagonal.
#[derive(Debug, Clone)]
pub struct GkbBasis {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub breakdown: bool,
}

fn reorthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(v);
            v.axpy(-c, q, 1.0);
        }
    }
}

fn stack(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        DMatrix::zeros(rows, 0)
    } else {
        DMatrix::from_columns(cols)
    }
}

/// `ℓ₀` steps of Golub–Kahan bidiagonalisation started from `b`, with full
/// reorthogonalisation. Stops early, flagging breakdown, when a new vector
/// vanishes.
pub fn gkb_seed(a: &LinearOperator, b: &DVector<f64>, l0: usize) -> Result<GkbBasis> {
    check_len("GKB start vector", a.rows(), b.len())?;
    let (m, n) = (a.rows(), a.cols());
    let beta1 = b.norm();
    if beta1 == 0.0 {
        return Err(Error::Degenerate("GKB started from a zero vector".into()));
    }
    let mut us = vec![b / beta1];
    let mut ws: Vec<DVector<f64>> = Vec::new();
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut scale = 0.0f64;
    let mut breakdown = false;
    let tiny = |s: f64| 1e-12 * s.max(f64::MIN_POSITIVE);

    let mut w = a.apply_transpose(&us[0])?;
    for j in 0..l0.min(n) {
        if j > 0 {
            w -= &ws[j - 1] * betas[j - 1];
        }
        reorthogonalize(&mut w, &ws);
        let alpha = w.norm();
        scale = scale.max(alpha);
        if alpha <= tiny(scale) {
            breakdown = true;
            break;
        }
        ws.push(&w / alpha);
        alphas.push(alpha);

        let mut u = a.apply(&ws[j])? - &us[j] * alpha;
        reorthogonalize(&mut u, &us);
        let beta = u.norm();
        scale = scale.max(beta);
        if beta <= tiny(scale) || us.len() >= m {
            // A W = U B holds exactly with the current U.
            breakdown = j + 1 < l0.min(n);
            betas.push(0.0);
            break;
        }
        us.push(&u / beta);
        betas.push(beta);
        w = a.apply_transpose(&us[j + 1])?;
    }

    let k = ws.len();
    let ucols = if betas.len() == k && betas.last() == Some(&0.0) { k } else { k + 1 };
    let ucols = ucols.min(us.len());
    let mut bmat = DMatrix::zeros(ucols, k);
    for j in 0..k {
        bmat[(j, j)] = alphas[j];
        if j + 1 < ucols {
            bmat[(j + 1, j)] = betas[j];
        }
    }
    Ok(GkbBasis {
        w: stack(&ws, n),
        u: stack(&us[..ucols], m),
        b: bmat,
        breakdown,
    })
}

/// `(z² + ε²)^{−1/4}` elementwise.
pub fn mm_weights(z: &DVector<f64>, eps: f64) -> DVector<f64> {
    z.map(|v| (v * v + eps * eps).powf(-0.25))
}

/// Majorant values at the start and end of one reweighting cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MajorantStep {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct MmgksSolution {
    pub s: DVector<f64>,
    pub lambda: f64,
    pub eps: f64,
    pub iterations: usize,
    pub converged: bool,
    pub basis_dim: usize,
    pub history: Vec<MajorantStep>,
}

fn majorant(
    a: &LinearOperator,
    l: &LinearOperator,
    b: &DVector<f64>,
    w: &DVector<f64>,
    lambda: f64,
    s: &DVector<f64>,
) -> Result<f64> {
    let fit = (a.apply(s)? - b).norm_squared();
    let reg = l.apply(s)?.component_mul(w).norm_squared();
    Ok(fit + lambda * reg)
}

/// Solves `(R_VᵀR_V + λR_ΘᵀR_Θ) y = R_VᵀQ_Vᵀb`.
fn projected_solve(
    aw: &DMatrix<f64>,
    pw: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
) -> Option<DVector<f64>> {
    let qr_v = aw.clone().qr();
    let qr_t = pw.clone().qr();
    let (q_v, r_v) = (qr_v.q(), qr_v.r());
    let r_t = qr_t.r();
    let lhs = r_v.transpose() * &r_v + r_t.transpose() * &r_t * lambda;
    let rhs = r_v.transpose() * (q_v.transpose() * b);
    let chol = lhs.cholesky()?;
    let y = chol.solve(&rhs);
    y.iter().all(|v| v.is_finite()).then_some(y)
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(w);
    }
    out
}

pub fn mmgks_solve(prob: &MmgksProblem<'_>) -> Result<MmgksSolution> {
    let MmgksProblem { a, l, b, settings } = *prob;
    settings.validate()?;
    check_len("MMGKS data", a.rows(), b.len())?;
    check_len("MMGKS regulariser columns", a.cols(), l.cols())?;
    let n = a.cols();
    let zero = |eps: f64, lambda: f64| MmgksSolution {
        s: DVector::zeros(n),
        lambda,
        eps,
        iterations: 0,
        converged: true,
        basis_dim: 0,
        history: Vec::new(),
    };
    if b.norm() == 0.0 {
        return Ok(zero(settings.eps.unwrap_or(0.0), 0.0));
    }
    let seed = gkb_seed(a, b, settings.l0)?;
    if seed.w.ncols() == 0 {
        return Ok(zero(settings.eps.unwrap_or(0.0), 0.0));
    }

    let mut basis: Vec<DVector<f64>> = seed.w.column_iter().map(|c| c.into_owned()).collect();
    let mut aw = a.apply_block(&seed.w)?;
    let mut lw = l.apply_block(&seed.w)?;

    // Least-squares start on the Krylov basis.
    let y0 = {
        let qr = aw.clone().qr();
        qr.r()
            .solve_upper_triangular(&(qr.q().transpose() * b))
            .filter(|y| y.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Numeric("initial projected least-squares problem is singular".into()))?
    };
    let mut s = &seed.w * y0;

    let z0 = l.apply(&s)?;
    let eps = settings.eps.unwrap_or_else(|| {
        let m = z0.amax();
        if m > 0.0 {
            1e-2 * m
        } else {
            1e-2
        }
    });
    let mut lambda = match settings.lambda {
        Lambda::Fixed(v) => v,
        Lambda::Auto => {
            let w0 = mm_weights(&z0, eps);
            let fit = (a.apply(&s)? - b).norm_squared();
            let reg = z0.component_mul(&w0).norm_squared();
            if reg > 0.0 && fit > 0.0 {
                fit / reg
            } else {
                1e-2
            }
        }
    };

    let mut history = Vec::new();
    let mut converged = false;
    let mut bumped = false;
    let mut iterations = 0;
    for _ in 0..settings.k_max {
        iterations += 1;
        let wts = mm_weights(&l.apply(&s)?, eps);
        let pw = scale_rows(&lw, &wts);
        let y = match projected_solve(&aw, &pw, b, lambda) {
            Some(y) => y,
            None if !bumped => {
                bumped = true;
                lambda *= 10.0;
                projected_solve(&aw, &pw, b, lambda).ok_or_else(|| {
                    Error::Numeric("projected MMGKS system singular after raising lambda".into())
                })?
            }
            None => {
                return Err(Error::Numeric(
                    "projected MMGKS system singular after raising lambda".into(),
                ))
            }
        };
        let wmat = DMatrix::from_columns(&basis);
        let s_new = &wmat * y;
        let before = majorant(a, l, b, &wts, lambda, &s)?;
        let after = majorant(a, l, b, &wts, lambda, &s_new)?;
        history.push(MajorantStep { before, after });

        let change = (&s_new - &s).norm();
        let base = s.norm();
        s = s_new;
        // The first solve only reweights the start on the seed basis.
        if iterations > 1 && change <= settings.tol * base {
            converged = true;
            break;
        }

        if basis.len() < n {
            let fit = a.apply(&s)? - b;
            let ls = l.apply(&s)?;
            let mut res = a.apply_transpose(&fit)?
                + l.apply_transpose(&ls.component_mul(&wts).component_mul(&wts))? * lambda;
            let size = res.norm();
            reorthogonalize(&mut res, &basis);
            let left = res.norm();
            if size > 0.0 && left > 1e-12 * size {
                let v = res / left;
                let av = a.apply(&v)?;
                let lv = l.apply(&v)?;
                let k = aw.ncols();
                aw = aw.insert_column(k, 0.0);
                aw.set_column(k, &av);
                let k = lw.ncols();
                lw = lw.insert_column(k, 0.0);
                lw.set_column(k, &lv);
                basis.push(v);
            }
        }
    }
    Ok(MmgksSolution {
        s,
        lambda,
        eps,
        iterations,
        converged,
        basis_dim: basis.len(),
        history,
    })
}
