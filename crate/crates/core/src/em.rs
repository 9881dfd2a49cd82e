//! Expectation–maximisation updates of the process and observation noise.
//!
//! Only diagonals are kept. Each entry of the update is assembled from rows
//! of `P`, `M P` and `H P` in chunks, so no `n_s × n_s` matrix is formed.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::linops::LinearOperator;
use crate::memory::{Footprint, Workspace};
use crate::reduced::{for_each_chunk, psd_sqrt};
use crate::smoother::CrossCovariance;

/// Per-timestep diagonal covariances; index `i − 1` holds timestep `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub q_diag: Vec<DVector<f64>>,
    pub r_diag: Vec<DVector<f64>>,
    pub floor: FloorRule,
}

impl NoiseModel {
    /// `Q_i = q·I` and `R_i = r·I` for `i = 1..=t`; `m_t[i − 1]` is the data
    /// length of timestep `i`.
    pub fn isotropic(n_s: usize, m_t: &[usize], q: f64, r: f64) -> Result<Self> {
        if !(q > 0.0 && r > 0.0 && q.is_finite() && r.is_finite()) {
            return Err(Error::Config(format!("initial variances must be positive, got Q={q}, R={r}")));
        }
        Ok(Self {
            q_diag: m_t.iter().map(|_| DVector::from_element(n_s, q)).collect(),
            r_diag: m_t.iter().map(|&m| DVector::from_element(m, r)).collect(),
            floor: FloorRule::default(),
        })
    }

    pub fn t(&self) -> usize {
        self.q_diag.len()
    }
}

impl Footprint for NoiseModel {
    fn footprint(&self) -> usize {
        self.q_diag.footprint() + self.r_diag.footprint()
    }
}

/// Lower bound applied to updated variances: `max(relative · mean, absolute)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorRule {
    pub relative: f64,
    pub absolute: f64,
}

impl Default for FloorRule {
    fn default() -> Self {
        Self {
            relative: 1e-8,
            absolute: 1e-12,
        }
    }
}

impl FloorRule {
    pub fn level(&self, raw: &DVector<f64>) -> f64 {
        let mean = if raw.is_empty() { 0.0 } else { raw.mean() };
        (self.relative * mean).max(self.absolute)
    }

    pub fn apply(&self, mut raw: DVector<f64>) -> DVector<f64> {
        let f = self.level(&raw);
        raw.iter_mut().for_each(|v| *v = v.max(f));
        raw
    }
}

/// Diagonal of `(y − Hx)(y − Hx)ᵀ + H P Ψ Pᵀ Hᵀ`, floored.
pub fn em_update_r(
    y: &DVector<f64>,
    h: &LinearOperator,
    x_sm: &DVector<f64>,
    psi_sm: &DMatrix<f64>,
    p: &DMatrix<f64>,
    floor: &FloorRule,
    ws: &Workspace,
) -> Result<DVector<f64>> {
    check_len("R update data", h.rows(), y.len())?;
    let resid = y - h.apply(x_sm)?;
    let a = psd_sqrt(psi_sm, ws, "smoothed reduced covariance")?;
    let mut out = ws.meter.track(resid.map(|v| v * v));
    let mut prod: Option<DMatrix<f64>> = None;
    for_each_chunk(h, p, false, ws, |start, hpc, _| {
        let buf = prod.get_or_insert_with(|| DMatrix::zeros(hpc.nrows(), a.ncols()));
        if buf.nrows() != hpc.nrows() {
            *buf = DMatrix::zeros(hpc.nrows(), a.ncols());
        }
        buf.gemm(1.0, hpc, &a, 0.0);
        for k in 0..hpc.nrows() {
            out[start + k] += buf.row(k).norm_squared();
        }
        Ok(())
    })?;
    Ok(floor.apply(out.into_inner()))
}

/// Diagonal of
/// `E[(x_i − M x_{i−1})(x_i − M x_{i−1})ᵀ] = ddᵀ + C_i − C_{i,i−1}Mᵀ − M C_{i,i−1}ᵀ + M C_{i−1} Mᵀ`
/// with `d = x_sm_i − M x_sm_{i−1}`, floored.
#[allow(clippy::too_many_arguments)]
pub fn em_update_q(
    x_prev: &DVector<f64>,
    x_cur: &DVector<f64>,
    psi_prev: &DMatrix<f64>,
    psi_cur: &DMatrix<f64>,
    cross: &CrossCovariance,
    m: &LinearOperator,
    p: &DMatrix<f64>,
    floor: &FloorRule,
    ws: &Workspace,
) -> Result<DVector<f64>> {
    let n = p.nrows();
    check_len("Q update state", n, x_cur.len())?;
    let d = x_cur - m.apply(x_prev)?;
    let a_cur = psd_sqrt(psi_cur, ws, "smoothed reduced covariance")?;
    let a_prev = psd_sqrt(psi_prev, ws, "previous smoothed reduced covariance")?;
    let core = ws.meter.track(cross.core());

    let mut raw = ws.meter.track(d.map(|v| v * v));
    let mut scale = ws.meter.track(raw.clone_owned());
    let (mut b1, mut b2, mut b3): (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) =
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0));
    let _bufs = ws.meter.charge(3 * ws.chunk_rows.min(n) * p.ncols() * 8);
    for_each_chunk(m, p, true, ws, |start, mpc, pc| {
        let len = mpc.nrows();
        if b1.nrows() != len {
            b1 = DMatrix::zeros(len, p.ncols());
            b2 = DMatrix::zeros(len, p.ncols());
            b3 = DMatrix::zeros(len, p.ncols());
        }
        b1.gemm(1.0, pc, &a_cur, 0.0);
        b2.gemm(1.0, pc, &core, 0.0);
        b3.gemm(1.0, mpc, &a_prev, 0.0);
        for k in 0..len {
            let own = b1.row(k).norm_squared();
            let cross_term = b2.row(k).dot(&mpc.row(k));
            let prev = b3.row(k).norm_squared();
            raw[start + k] += own - 2.0 * cross_term + prev;
            scale[start + k] += own + 2.0 * cross_term.abs() + prev;
        }
        Ok(())
    })?;

    let mut clamped = 0usize;
    for k in 0..n {
        if raw[k] < 0.0 {
            if raw[k] < -1e-8 * scale[k] {
                return Err(Error::Numeric(format!(
                    "Q update entry {k} is {:e}, beyond roundoff of its terms ({:e})",
                    raw[k], scale[k]
                )));
            }
            raw[k] = 0.0;
            clamped += 1;
        }
    }
    if clamped > 0 {
        warn!("clamped {clamped} slightly negative Q entries to zero before flooring");
    }
    Ok(floor.apply(raw.clone_owned()))
}

/// Full-matrix updates and the expected complete-data log-likelihood, for
/// diagnostics on small problems.
pub mod dense {
    use nalgebra::{DMatrix, DVector};

    use crate::error::{check_len, Error, Result};

    /// Largest state dimension accepted by the dense diagnostics.
    pub const MAX_STATE: usize = 4096;

    /// Smoothed moments: means and covariances for `0..=T`, and
    /// `cross[i − 1] = C_{i,i−1}` for `i = 1..=T`.
    #[derive(Debug, Clone)]
    pub struct Moments {
        pub x: Vec<DVector<f64>>,
        pub c: Vec<DMatrix<f64>>,
        pub cross: Vec<DMatrix<f64>>,
    }

    /// Model parameters; `m`, `h`, `q`, `r` and `y` are indexed by `i − 1`
    /// for timesteps `1..=T`.
    #[derive(Debug, Clone)]
    pub struct Params {
        pub mu0: DVector<f64>,
        pub sigma0: DMatrix<f64>,
        pub m: Vec<DMatrix<f64>>,
        pub h: Vec<DMatrix<f64>>,
        pub q: Vec<DMatrix<f64>>,
        pub r: Vec<DMatrix<f64>>,
        pub y: Vec<DVector<f64>>,
    }

    fn guard(n: usize) -> Result<()> {
        if n > MAX_STATE {
            return Err(Error::Domain(format!(
                "dense diagnostics refused for n_s = {n} > {MAX_STATE}"
            )));
        }
        Ok(())
    }

    pub fn r_update(
        y: &DVector<f64>,
        h: &DMatrix<f64>,
        x: &DVector<f64>,
        c: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        guard(x.len())?;
        let e = y - h * x;
        Ok(&e * e.transpose() + h * c * h.transpose())
    }

    pub fn q_update(
        x_prev: &DVector<f64>,
        x_cur: &DVector<f64>,
        c_prev: &DMatrix<f64>,
        c_cur: &DMatrix<f64>,
        cross: &DMatrix<f64>,
        m: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        guard(x_cur.len())?;
        let d = x_cur - m * x_prev;
        let cm = cross * m.transpose();
        Ok(&d * d.transpose() + c_cur - &cm - cm.transpose() + m * c_prev * m.transpose())
    }

    fn logdet_and_solver(a: &DMatrix<f64>, what: &str) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok((logdet, chol))
    }

    fn trace_solve(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, b: &DMatrix<f64>) -> f64 {
        chol.solve(b).trace()
    }

    /// `G({Q_i}, {R_i})` up to additive constants.
    pub fn expected_loglik(mom: &Moments, par: &Params) -> Result<f64> {
        let n = par.mu0.len();
        guard(n)?;
        let t = mom.x.len().saturating_sub(1);
        check_len("smoothed covariances", t + 1, mom.c.len())?;
        check_len("cross-covariances", t, mom.cross.len())?;
        for (what, len) in [
            ("motion matrices", par.m.len()),
            ("forward matrices", par.h.len()),
            ("process covariances", par.q.len()),
            ("observation covariances", par.r.len()),
            ("data", par.y.len()),
        ] {
            check_len(what, t, len)?;
        }

        let (ld0, ch0) = logdet_and_solver(&par.sigma0, "Σ")?;
        let e0 = &mom.x[0] - &par.mu0;
        let mut g = -0.5 * ld0 - 0.5 * trace_solve(&ch0, &(&mom.c[0] + &e0 * e0.transpose()));
        for i in 1..=t {
            let r_part = r_update(&par.y[i - 1], &par.h[i - 1], &mom.x[i], &mom.c[i])?;
            let (ldr, chr) = logdet_and_solver(&par.r[i - 1], "R")?;
            g -= 0.5 * ldr + 0.5 * trace_solve(&chr, &r_part);
            let q_part = q_update(
                &mom.x[i - 1],
                &mom.x[i],
                &mom.c[i - 1],
                &mom.c[i],
                &mom.cross[i - 1],
                &par.m[i - 1],
            )?;
            let (ldq, chq) = logdet_and_solver(&par.q[i - 1], "Q")?;
            g -= 0.5 * ldq + 0.5 * trace_solve(&chq, &q_part);
        }
        Ok(g)
    }
}
