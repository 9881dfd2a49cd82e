//! Dimension-reduced Rauch–Tung–Striebel smoother.
//!
//! With `C_p = BBᵀ + Q`, `B = MPA`, `AAᵀ = Ψ_est_{i−1}` and
//! `Z = A(I + AᵀG_MM A)⁻¹Aᵀ`, every product of `(MP)ᵀ C_p⁻¹` needed below is
//! `(I − G_MM Z)` applied to the corresponding `Q⁻¹` product.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::filter::{FilterTrajectory, Model, PackedSym};
use crate::linops::LinearOperator;
use crate::memory::{Footprint, Hold, Workspace};
use crate::prior::ProjectionBasis;
use crate::reduced::{condition_note, gram_pass, psd_sqrt, symmetrize};

/// Factored `C_{i,i−1} = (P·left)(P·right)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance {
    /// `Ψ_sm_i`
    pub left: DMatrix<f64>,
    /// `Ψ_est_{i−1} · Pᵀ C_p⁻¹ M P`
    pub right: DMatrix<f64>,
}

impl CrossCovariance {
    /// The `n_s × r` factors `(L, R)` with `C = L Rᵀ`.
    pub fn factors(&self, p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (p * &self.left, p * &self.right)
    }

    /// `left · rightᵀ`, the reduced core of `C = P·core·Pᵀ`.
    pub fn core(&self) -> DMatrix<f64> {
        &self.left * self.right.transpose()
    }

    #[cfg(any(test, feature = "dense-oracle"))]
    pub fn to_dense(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        assert!(p.nrows() <= 4096, "dense cross-covariance refused above n_s = 4096");
        let (l, r) = self.factors(p);
        l * r.transpose()
    }
}

/// Output of one backward step.
#[derive(Debug, Clone)]
pub struct SmoothStep {
    pub x_prev: DVector<f64>,
    pub psi_prev: Option<DMatrix<f64>>,
    pub cross: Option<CrossCovariance>,
}

/// Backward step `i → i−1`. Covariances are propagated only when
/// `psi_cur` (`Ψ_sm_i`) is given.
#[allow(clippy::too_many_arguments)]
pub fn smooth_step(
    i: usize,
    traj: &FilterTrajectory,
    m: &LinearOperator,
    q_diag: &DVector<f64>,
    p: &DMatrix<f64>,
    x_cur: &DVector<f64>,
    psi_cur: Option<&DMatrix<f64>>,
    ws: &Workspace,
) -> Result<SmoothStep> {
    step_inner(i, traj, m, q_diag, p, x_cur, psi_cur, ws)
        .map_err(|e| e.context(format!("smoother timestep {i}")))
}

#[allow(clippy::too_many_arguments)]
fn step_inner(
    i: usize,
    traj: &FilterTrajectory,
    m: &LinearOperator,
    q_diag: &DVector<f64>,
    p: &DMatrix<f64>,
    x_cur: &DVector<f64>,
    psi_cur: Option<&DMatrix<f64>>,
    ws: &Workspace,
) -> Result<SmoothStep> {
    if i == 0 || i > traj.t() || traj.x_pred.len() < i {
        return Err(Error::Config(format!(
            "smoother step {i} needs stored predictions of a trajectory with T = {}",
            traj.t()
        )));
    }
    let r = p.ncols();
    check_len("smoothed state", p.nrows(), x_cur.len())?;
    if q_diag.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric("Q has a non-positive entry".into()));
    }
    let covariances = psi_cur.is_some();
    let psi_e = ws.meter.track(traj.psi_at(i - 1));
    let d = ws.meter.track(x_cur - &traj.x_pred[i - 1]);
    let q_inv = ws.meter.track(q_diag.map(|v| 1.0 / v));
    let g = gram_pass(m, p, &q_inv, &[&d], covariances, false, ws)?;
    drop(q_inv);
    drop(d);

    // W = G_MM A (I + A G_MM A)⁻¹ A
    let w = {
        let a = psd_sqrt(&psi_e, ws, "filtered reduced covariance")?;
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
        let sa = ws.meter.track(chol.solve(&*a));
        let z = ws.meter.track(&*a * &*sa);
        drop(sa);
        drop(a);
        ws.meter.track(&*g.oo * &*z)
    };

    let gv = &g.ov[0];
    let u = gv - &*w * gv;
    let x_prev = &traj.x_est[i - 1] + p * (&*psi_e * u);

    let (psi_prev, cross) = match psi_cur {
        None => (None, None),
        Some(psi_s) => {
            let g_mp = g.op.as_ref().expect("cross product requested");
            // KtP = Pᵀ C_p⁻¹ M P, transposed: (MP)ᵀ C_p⁻¹ P
            let ktp = ws.meter.track(&**g_mp - &*w * &**g_mp);
            let n = ws.meter.track(&*g.oo - &*w * &*g.oo);
            drop(w);
            drop(g);
            let mut inner = ws.meter.track(ktp.transpose() * psi_s * &*ktp);
            *inner -= &*n;
            drop(n);
            let mut psi_prev = &*psi_e * &*inner * &*psi_e;
            drop(inner);
            psi_prev += &*psi_e;
            symmetrize(&mut psi_prev);
            let cross = CrossCovariance {
                left: psi_s.clone(),
                right: &*psi_e * ktp.transpose(),
            };
            (Some(psi_prev), Some(cross))
        }
    };
    Ok(SmoothStep {
        x_prev,
        psi_prev,
        cross,
    })
}

/// `C_{i,i−1}` in factored form, computed on its own.
#[allow(clippy::too_many_arguments)]
pub fn cross_covariance(
    i: usize,
    traj: &FilterTrajectory,
    m: &LinearOperator,
    q_diag: &DVector<f64>,
    p: &DMatrix<f64>,
    x_cur: &DVector<f64>,
    psi_cur: &DMatrix<f64>,
    ws: &Workspace,
) -> Result<CrossCovariance> {
    let step = smooth_step(i, traj, m, q_diag, p, x_cur, Some(psi_cur), ws)?;
    Ok(step.cross.expect("covariances requested"))
}

/// What the backward pass hands to its visitor at step `i`.
#[derive(Debug)]
pub struct SmoothedPair<'a> {
    pub i: usize,
    pub x_prev: &'a DVector<f64>,
    pub x_cur: &'a DVector<f64>,
    pub psi_prev: Option<&'a DMatrix<f64>>,
    pub psi_cur: Option<&'a DMatrix<f64>>,
    pub cross: Option<&'a CrossCovariance>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SmootherOptions {
    /// Propagate `Ψ_sm` and cross-covariances.
    pub covariances: bool,
    /// Keep every `Ψ_sm_i` in the output (implies `covariances`).
    pub keep_covariances: bool,
}

#[derive(Debug)]
pub struct SmootherOutput {
    pub x_sm: Vec<DVector<f64>>,
    pub psi_sm: Option<Vec<PackedSym>>,
    _holds: Vec<Hold>,
}

impl SmootherOutput {
    pub fn psi_at(&self, i: usize) -> Option<DMatrix<f64>> {
        self.psi_sm.as_ref().map(|v| v[i].unpack())
    }

    pub fn held_bytes(&self) -> usize {
        self.x_sm.iter().map(Footprint::footprint).sum::<usize>()
            + self.psi_sm.as_ref().map_or(0, |v| v.iter().map(Footprint::footprint).sum())
    }
}

/// Backward pass over `i = T … 1`, calling `visit` after each step.
pub fn run_smoother<F>(
    model: &Model<'_>,
    basis: &ProjectionBasis,
    traj: &FilterTrajectory,
    opts: SmootherOptions,
    ws: &Workspace,
    mut visit: F,
) -> Result<SmootherOutput>
where
    F: FnMut(&SmoothedPair<'_>) -> Result<()>,
{
    let p = &basis.p;
    let t = traj.t();
    check_len("smoother motion operators", t, model.motions.len())?;
    check_len("smoother process covariances", t, model.noise.q_diag.len())?;
    let covariances = opts.covariances || opts.keep_covariances;

    let mut holds = Vec::new();
    let mut x_rev: Vec<DVector<f64>> = Vec::with_capacity(t + 1);
    let mut psi_rev: Vec<PackedSym> = Vec::new();
    let x_t = traj.x_est[t].clone();
    holds.push(ws.meter.charge(x_t.footprint()));
    x_rev.push(x_t);
    let mut psi_cur = covariances.then(|| traj.psi_at(t));
    let mut _psi_hold = psi_cur.as_ref().map(|m| ws.meter.charge(m.footprint()));
    if opts.keep_covariances {
        let packed = traj.psi[t].clone();
        holds.push(ws.meter.charge(packed.footprint()));
        psi_rev.push(packed);
    }

    for i in (1..=t).rev() {
        let x_cur = x_rev.last().expect("terminal state pushed");
        let step = smooth_step(
            i,
            traj,
            &model.motions[i - 1],
            &model.noise.q_diag[i - 1],
            p,
            x_cur,
            psi_cur.as_ref(),
            ws,
        )?;
        let _step_hold = ws.meter.charge(
            step.psi_prev.footprint()
                + step.cross.as_ref().map_or(0, |c| c.left.footprint() + c.right.footprint()),
        );
        holds.push(ws.meter.charge(step.x_prev.footprint()));
        visit(&SmoothedPair {
            i,
            x_prev: &step.x_prev,
            x_cur,
            psi_prev: step.psi_prev.as_ref(),
            psi_cur: psi_cur.as_ref(),
            cross: step.cross.as_ref(),
        })
        .map_err(|e| e.context(format!("smoother timestep {i}")))?;
        if opts.keep_covariances {
            let packed = PackedSym::pack(step.psi_prev.as_ref().expect("covariances propagated"));
            holds.push(ws.meter.charge(packed.footprint()));
            psi_rev.push(packed);
        }
        x_rev.push(step.x_prev);
        _psi_hold = step.psi_prev.as_ref().map(|m| ws.meter.charge(m.footprint()));
        psi_cur = step.psi_prev;
    }
    x_rev.reverse();
    psi_rev.reverse();
    Ok(SmootherOutput {
        x_sm: x_rev,
        psi_sm: opts.keep_covariances.then_some(psi_rev),
        _holds: holds,
    })
}
