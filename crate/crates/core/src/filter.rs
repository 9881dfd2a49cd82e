//! Dimension-reduced Kalman filter.
//!
//! The prior covariance of each step is `C_p = B Bᵀ + Q` with
//! `B = M P A` and `A Aᵀ = Ψ_{i−1}`. Its inverse only ever meets `P` and
//! `M P`, so the update needs the `r × r` products `PᵀQ⁻¹P`, `(MP)ᵀQ⁻¹P`
//! and `(MP)ᵀQ⁻¹MP`, which are accumulated in row chunks.

use nalgebra::{DMatrix, DVector};

use crate::em::NoiseModel;
use crate::error::{check_len, Error, Result};
use crate::linops::LinearOperator;
use crate::memory::{Footprint, Hold, Workspace};
use crate::prior::ProjectionBasis;
use crate::reduced::{gram_pass, psd_sqrt, spd_inverse, symmetrize, condition_note};

/// Upper triangle of a symmetric matrix, column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSym {
    n: usize,
    data: Vec<f64>,
}

impl PackedSym {
    pub fn pack(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for i in 0..=j {
                data.push(m[(i, j)]);
            }
        }
        Self { n, data }
    }

    pub fn unpack(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        let mut k = 0;
        for j in 0..self.n {
            for i in 0..=j {
                m[(i, j)] = self.data[k];
                m[(j, i)] = self.data[k];
                k += 1;
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

impl Footprint for PackedSym {
    fn footprint(&self) -> usize {
        self.data.len() * 8
    }
}

/// Observation side of the state-space model.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    /// Forward operators `H_0 … H_T`.
    pub h: &'a [LinearOperator],
    /// Data `y_0 … y_T`.
    pub y: &'a [DVector<f64>],
    /// Motion operators; `motions[i − 1]` is `M_i`.
    pub motions: &'a [LinearOperator],
    pub noise: &'a NoiseModel,
    /// Prior standard deviation used by the static initial solve.
    pub alpha: f64,
}

impl Model<'_> {
    /// Index of the last frame.
    pub fn t(&self) -> usize {
        self.y.len().saturating_sub(1)
    }

    pub fn validate(&self, n_s: usize) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::Config("at least one frame of data is required".into()));
        }
        let t = self.t();
        check_len("forward operators", t + 1, self.h.len())?;
        check_len("motion operators", t, self.motions.len())?;
        check_len("process covariances", t, self.noise.q_diag.len())?;
        check_len("observation covariances", t, self.noise.r_diag.len())?;
        for (i, (h, y)) in self.h.iter().zip(self.y).enumerate() {
            check_len("forward operator columns", n_s, h.cols())?;
            check_len("data length", h.rows(), y.len())
                .map_err(|e| e.context(format!("frame {i}")))?;
            if i > 0 {
                check_len("observation covariance length", h.rows(), self.noise.r_diag[i - 1].len())
                    .map_err(|e| e.context(format!("frame {i}")))?;
            }
        }
        for (k, m) in self.motions.iter().enumerate() {
            if m.rows() != n_s || m.cols() != n_s {
                return Err(Error::shape("motion operator size", n_s, m.rows().max(m.cols()))
                    .context(format!("timestep {}", k + 1)));
            }
            check_len("process covariance length", n_s, self.noise.q_diag[k].len())?;
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `P((HP)ᵀHP + PᵀP/α²)⁻¹(HP)ᵀy` together with `Ψ_0 = I`.
pub fn static_reduced_solve(
    h: &LinearOperator,
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    ws: &Workspace,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_len("static solve data", h.rows(), y.len())?;
    check_len("static solve basis", h.cols(), p.nrows())?;
    let r = p.ncols();
    let ones_m = DVector::from_element(h.rows(), 1.0);
    let hg = gram_pass(h, p, &ones_m, &[y], false, false, ws)?;
    let ones_n = DVector::from_element(p.nrows(), 1.0);
    let pg = gram_pass(&LinearOperator::Identity(p.nrows()), p, &ones_n, &[], false, false, ws)?;
    let mut lhs = ws.meter.track(&*hg.oo + &*pg.oo / (alpha * alpha));
    drop(pg);
    symmetrize(&mut lhs);
    let coef = match lhs.clone_owned().cholesky() {
        Some(chol) => chol.solve(&hg.ov[0]),
        None => {
            return Err(Error::Numeric(format!(
                "static reduced system is singular{}",
                condition_note(&lhs)
            )))
        }
    };
    Ok((p * coef, DMatrix::identity(r, r)))
}

/// `(BBᵀ + Q)⁻¹ P` by the Sherman–Morrison–Woodbury identity, with `Q`
/// given by its inverse diagonal.
pub fn smw_apply(
    q_inv_diag: &DVector<f64>,
    b: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = q_inv_diag.len();
    check_len("SMW low-rank factor rows", n, b.nrows())?;
    check_len("SMW right-hand side rows", n, p.nrows())?;
    if q_inv_diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric("Q must be a positive diagonal".into()));
    }
    let scale_rows = |m: &DMatrix<f64>| {
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            col.component_mul_assign(q_inv_diag);
        }
        out
    };
    let qp = scale_rows(p);
    let qb = scale_rows(b);
    let k = b.ncols();
    let mut inner = b.transpose() * &qb + DMatrix::identity(k, k);
    symmetrize(&mut inner);
    let chol = inner
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("SMW inner matrix is not positive definite{}", condition_note(&inner))))?;
    let rhs = qb.transpose() * p;
    let corr = chol.solve(&rhs);
    Ok(qp - qb * corr)
}

/// Result of one filter step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub x_pred: DVector<f64>,
    pub x_est: DVector<f64>,
    pub psi: DMatrix<f64>,
}

/// Inputs of step `i`: `M_i`, `H_i`, the diagonals of `R_i` and `Q_i`, and `y_i`.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub m: &'a LinearOperator,
    pub h: &'a LinearOperator,
    pub r_diag: &'a DVector<f64>,
    pub q_diag: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
}

fn inverse_diag(d: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if let Some(bad) = d.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric(format!("{what} has a non-positive entry {bad}")));
    }
    Ok(d.map(|v| 1.0 / v))
}

/// Prediction and reduced update of one timestep.
pub fn filter_step(
    i: usize,
    x_prev: &DVector<f64>,
    psi_prev: &DMatrix<f64>,
    input: &StepInput<'_>,
    p: &DMatrix<f64>,
    ws: &Workspace,
) -> Result<StepOutput> {
    step_inner(x_prev, psi_prev, input, p, ws).map_err(|e| e.context(format!("filter timestep {i}")))
}

fn step_inner(
    x_prev: &DVector<f64>,
    psi_prev: &DMatrix<f64>,
    input: &StepInput<'_>,
    p: &DMatrix<f64>,
    ws: &Workspace,
) -> Result<StepOutput> {
    let r = p.ncols();
    check_len("previous covariance", r, psi_prev.nrows())?;
    let x_pred = input.m.apply(x_prev)?;
    let q_inv = ws.meter.track(inverse_diag(input.q_diag, "Q")?);

    // Pᵀ C_p⁻¹ P
    let pcp = {
        let a = psd_sqrt(psi_prev, ws, "previous reduced covariance")?;
        let g = gram_pass(input.m, p, &q_inv, &[], true, true, ws)?;
        drop(q_inv);
        let ag = ws.meter.track(&*a * &**g.op.as_ref().expect("cross product requested"));
        let mut s = ws.meter.track(&*a * &*g.oo * &*a);
        for k in 0..r {
            s[(k, k)] += 1.0;
        }
        symmetrize(&mut s);
        let chol = s
            .clone_owned()
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("inner SMW matrix is not positive definite{}", condition_note(&s))))?;
        drop(s);
        let sol = ws.meter.track(chol.solve(&*ag));
        let mut out = ws.meter.track(&**g.pp.as_ref().expect("basis product requested") - ag.transpose() * &*sol);
        symmetrize(&mut out);
        out
    };

    let r_inv = inverse_diag(input.r_diag, "R")?;
    let innovation = input.y - input.h.apply(&x_pred)?;
    let hg = gram_pass(input.h, p, &r_inv, &[&innovation], false, false, ws)?;
    let info = ws.meter.track(&*hg.oo + &*pcp);
    drop(pcp);
    let psi = spd_inverse(info.clone_owned(), "reduced information matrix")?;
    drop(info);
    let alpha = &psi * &hg.ov[0];
    let x_est = &x_pred + p * alpha;
    Ok(StepOutput { x_pred, x_est, psi })
}

/// Filtered trajectory. `x_pred[i − 1]` is the prediction of step `i`.
#[derive(Debug)]
pub struct FilterTrajectory {
    pub x_est: Vec<DVector<f64>>,
    pub x_pred: Vec<DVector<f64>>,
    pub psi: Vec<PackedSym>,
    _holds: Vec<Hold>,
}

impl FilterTrajectory {
    pub fn t(&self) -> usize {
        self.x_est.len() - 1
    }

    pub fn psi_at(&self, i: usize) -> DMatrix<f64> {
        self.psi[i].unpack()
    }

    /// Tracked bytes held by the stored trajectory.
    pub fn held_bytes(&self) -> usize {
        self.x_est.iter().map(Footprint::footprint).sum::<usize>()
            + self.x_pred.iter().map(Footprint::footprint).sum::<usize>()
            + self.psi.iter().map(Footprint::footprint).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FilterOptions {
    /// Keep the predictions needed by the smoother.
    pub store_predictions: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            store_predictions: true,
        }
    }
}

pub fn run_filter(
    model: &Model<'_>,
    basis: &ProjectionBasis,
    opts: FilterOptions,
    ws: &Workspace,
) -> Result<FilterTrajectory> {
    let p = &basis.p;
    model.validate(p.nrows())?;
    let t = model.t();
    let (x0, psi0) = static_reduced_solve(&model.h[0], p, &model.y[0], model.alpha, ws)
        .map_err(|e| e.context("initial frame"))?;
    let mut traj = FilterTrajectory {
        x_est: Vec::with_capacity(t + 1),
        x_pred: Vec::with_capacity(t),
        psi: Vec::with_capacity(t + 1),
        _holds: Vec::new(),
    };
    let push_psi = |traj: &mut FilterTrajectory, m: &DMatrix<f64>| {
        let packed = PackedSym::pack(m);
        traj._holds.push(ws.meter.charge(packed.footprint()));
        traj.psi.push(packed);
    };
    traj._holds.push(ws.meter.charge(x0.footprint()));
    traj.x_est.push(x0);
    push_psi(&mut traj, &psi0);
    let mut psi = psi0;
    for i in 1..=t {
        let input = StepInput {
            m: &model.motions[i - 1],
            h: &model.h[i],
            r_diag: &model.noise.r_diag[i - 1],
            q_diag: &model.noise.q_diag[i - 1],
            y: &model.y[i],
        };
        let _live = ws.meter.charge(psi.footprint());
        let out = filter_step(i, &traj.x_est[i - 1], &psi, &input, p, ws)?;
        traj._holds.push(ws.meter.charge(out.x_est.footprint()));
        traj.x_est.push(out.x_est);
        if opts.store_predictions {
            traj._holds.push(ws.meter.charge(out.x_pred.footprint()));
            traj.x_pred.push(out.x_pred);
        }
        push_psi(&mut traj, &out.psi);
        psi = out.psi;
    }
    Ok(traj)
}
