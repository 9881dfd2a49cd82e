//! Motion operators fitted between consecutive image estimates.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::linops::{dot, LinearOperator, PatchRank1, Rank1, SparseMatrix};
use crate::mmgks::{mmgks_solve, MmgksProblem, MmgksSettings};

/// Per-pixel displacement in pixels per frame. `s_x` is along columns,
/// `s_y` along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub n_x: usize,
    pub n_y: usize,
    pub s_x: DVector<f64>,
    pub s_y: DVector<f64>,
}

impl VelocityField {
    pub fn zeros(n_x: usize, n_y: usize) -> Self {
        Self {
            n_x,
            n_y,
            s_x: DVector::zeros(n_x * n_y),
            s_y: DVector::zeros(n_x * n_y),
        }
    }

    pub fn constant(n_x: usize, n_y: usize, s_x: f64, s_y: f64) -> Self {
        Self {
            n_x,
            n_y,
            s_x: DVector::from_element(n_x * n_y, s_x),
            s_y: DVector::from_element(n_x * n_y, s_y),
        }
    }

    /// Splits `[s_x; s_y]`.
    pub fn from_stacked(n_x: usize, n_y: usize, s: &DVector<f64>) -> Result<Self> {
        let n = n_x * n_y;
        check_len("stacked velocity", 2 * n, s.len())?;
        Ok(Self {
            n_x,
            n_y,
            s_x: s.rows(0, n).into_owned(),
            s_y: s.rows(n, n).into_owned(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_x * self.n_y;
        check_len("velocity s_x", n, self.s_x.len())?;
        check_len("velocity s_y", n, self.s_y.len())?;
        if self.s_x.iter().chain(self.s_y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("velocity field has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionModel {
    Identity,
    /// Optical flow followed by bilinear warping.
    OpticalFlow,
    /// Regularised rank-1 DMD.
    Dmd,
    /// Patchwise rank-1 DMD.
    PatchDmd,
}

impl MotionModel {
    pub fn label(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::OpticalFlow => "M1",
            Self::Dmd => "M2",
            Self::PatchDmd => "M3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionConfig {
    pub model: MotionModel,
    pub zeta: f64,
    /// Patch size `(z_x, z_y)` in rows × columns.
    pub patch: (usize, usize),
    pub of: MmgksSettings,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            model: MotionModel::Identity,
            zeta: 5.0,
            patch: (4, 4),
            of: MmgksSettings::default(),
        }
    }
}

impl MotionConfig {
    pub fn validate(&self, n_x: usize, n_y: usize) -> Result<()> {
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::Config(format!("zeta must be finite and ≥ 0, got {}", self.zeta)));
        }
        if self.model == MotionModel::PatchDmd {
            check_patches(n_x, n_y, self.patch.0, self.patch.1)?;
        }
        if self.model == MotionModel::OpticalFlow {
            self.of.validate()?;
        }
        Ok(())
    }
}

/// Patch sizes must tile the image exactly.
pub fn check_patches(n_x: usize, n_y: usize, z_x: usize, z_y: usize) -> Result<()> {
    if z_x == 0 || n_x % z_x != 0 {
        return Err(Error::Config(format!("patch height z_x = {z_x} must divide n_x = {n_x}")));
    }
    if z_y == 0 || n_y % z_y != 0 {
        return Err(Error::Config(format!("patch width z_y = {z_y} must divide n_y = {n_y}")));
    }
    Ok(())
}

fn derivative(x: &DVector<f64>, n_x: usize, n_y: usize, i: usize, j: usize, along_rows: bool) -> f64 {
    let at = |a: usize, b: usize| x[a * n_y + b];
    let (k, len) = if along_rows { (i, n_x) } else { (j, n_y) };
    let pick = |k: usize| if along_rows { at(k, j) } else { at(i, k) };
    if len < 2 {
        0.0
    } else if k == 0 {
        pick(1) - pick(0)
    } else if k == len - 1 {
        pick(len - 1) - pick(len - 2)
    } else {
        0.5 * (pick(k + 1) - pick(k - 1))
    }
}

/// Optical-flow system `V s = −T`: `V = [diag(∂_col x) diag(∂_row x)]` of
/// `x_prev` and `T = x_next − x_prev`.
pub fn ofc_system(
    x_prev: &DVector<f64>,
    x_next: &DVector<f64>,
    n_x: usize,
    n_y: usize,
) -> Result<(LinearOperator, DVector<f64>)> {
    let n = n_x * n_y;
    check_len("previous image", n, x_prev.len())?;
    check_len("next image", n, x_next.len())?;
    let rows = (0..n).map(|p| {
        let (i, j) = (p / n_y, p % n_y);
        let gc = derivative(x_prev, n_x, n_y, i, j, false);
        let gr = derivative(x_prev, n_x, n_y, i, j, true);
        vec![(p, gc), (n + p, gr)]
    });
    let v = SparseMatrix::from_triplets(
        n,
        2 * n,
        rows.enumerate()
            .flat_map(|(p, e)| e.into_iter().map(move |(c, val)| (p, c, val)))
            .collect(),
    )?;
    Ok((LinearOperator::Sparse(v), x_next - x_prev))
}

/// `blockdiag(L, L)` with `L = [I⊗L_y; L_x⊗I]`, forward differences and a
/// zero last row.
pub fn theta_operator(n_x: usize, n_y: usize) -> Result<LinearOperator> {
    let n = n_x * n_y;
    let mut t = Vec::with_capacity(8 * n);
    for comp in 0..2 {
        let (r0, c0) = (comp * 2 * n, comp * n);
        for i in 0..n_x {
            for j in 0..n_y {
                let p = i * n_y + j;
                if j + 1 < n_y {
                    t.push((r0 + p, c0 + p, -1.0));
                    t.push((r0 + p, c0 + p + 1, 1.0));
                }
                if i + 1 < n_x {
                    t.push((r0 + n + p, c0 + p, -1.0));
                    t.push((r0 + n + p, c0 + p + n_y, 1.0));
                }
            }
        }
    }
    Ok(LinearOperator::Sparse(SparseMatrix::from_triplets(4 * n, 2 * n, t)?))
}

/// Velocity from `V s = −T` with an ℓ₁ penalty on `Θ s`.
pub fn estimate_velocity(
    x_prev: &DVector<f64>,
    x_next: &DVector<f64>,
    n_x: usize,
    n_y: usize,
    settings: &MmgksSettings,
) -> Result<VelocityField> {
    let (v, t) = ofc_system(x_prev, x_next, n_x, n_y)?;
    let b = -t;
    if b.iter().all(|&e| e == 0.0) {
        return Ok(VelocityField::zeros(n_x, n_y));
    }
    let theta = theta_operator(n_x, n_y)?;
    let sol = mmgks_solve(&MmgksProblem {
        a: &v,
        l: &theta,
        b: &b,
        settings: *settings,
    })?;
    VelocityField::from_stacked(n_x, n_y, &sol.s)
}

/// Backward bilinear warp: pixel `(i, j)` samples `(i − s_y, j − s_x)`,
/// clamped to the image.
pub fn build_warp(s: &VelocityField) -> Result<LinearOperator> {
    s.validate()?;
    let (n_x, n_y) = (s.n_x, s.n_y);
    let n = n_x * n_y;
    let mut t = Vec::with_capacity(4 * n);
    for p in 0..n {
        let (i, j) = ((p / n_y) as f64, (p % n_y) as f64);
        let r = (i - s.s_y[p]).clamp(0.0, (n_x - 1) as f64);
        let c = (j - s.s_x[p]).clamp(0.0, (n_y - 1) as f64);
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let (r0, c0) = (r0 as usize, c0 as usize);
        let (r1, c1) = ((r0 + 1).min(n_x - 1), (c0 + 1).min(n_y - 1));
        t.push((p, r0 * n_y + c0, (1.0 - fr) * (1.0 - fc)));
        t.push((p, r0 * n_y + c1, (1.0 - fr) * fc));
        t.push((p, r1 * n_y + c0, fr * (1.0 - fc)));
        t.push((p, r1 * n_y + c1, fr * fc));
    }
    Ok(LinearOperator::Warp(SparseMatrix::from_triplets(n, n, t)?))
}

/// `x_next x_prevᵀ / (‖x_prev‖² + ζ)`.
pub fn dmd_rank1(x_prev: &DVector<f64>, x_next: &DVector<f64>, zeta: f64) -> Result<LinearOperator> {
    check_len("DMD pair", x_prev.len(), x_next.len())?;
    if !(zeta >= 0.0) {
        return Err(Error::Config(format!("zeta must be ≥ 0, got {zeta}")));
    }
    let denom = dot(x_prev.as_slice(), x_prev.as_slice()) + zeta;
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "rank-1 DMD with zeta = 0 needs a nonzero previous image".into(),
        ));
    }
    Ok(LinearOperator::Rank1(Rank1 {
        u: x_next.clone(),
        v: x_prev.clone(),
        denom,
    }))
}

/// One rank-1 DMD fit per `z_x × z_y` patch.
pub fn dmd_patchwise(
    x_prev: &DVector<f64>,
    x_next: &DVector<f64>,
    zeta: f64,
    n_x: usize,
    n_y: usize,
    z_x: usize,
    z_y: usize,
) -> Result<LinearOperator> {
    check_len("DMD previous image", n_x * n_y, x_prev.len())?;
    check_len("DMD next image", n_x * n_y, x_next.len())?;
    if !(zeta >= 0.0) {
        return Err(Error::Config(format!("zeta must be ≥ 0, got {zeta}")));
    }
    check_patches(n_x, n_y, z_x, z_y)?;
    let mut op = PatchRank1 {
        n_x,
        n_y,
        z_x,
        z_y,
        u: x_next.clone(),
        v: x_prev.clone(),
        denoms: Vec::new(),
    };
    let mut denoms = vec![0.0; op.patch_count()];
    for (p, &v) in x_prev.iter().enumerate() {
        denoms[op.patch_of(p)] += v * v;
    }
    for d in &mut denoms {
        *d += zeta;
    }
    op.denoms = denoms;
    Ok(LinearOperator::PatchRank1(op))
}

/// `M_i` for `i = 1..T` from consecutive smoothed states.
pub fn update_motions(
    x_sm: &[DVector<f64>],
    n_x: usize,
    n_y: usize,
    cfg: &MotionConfig,
) -> Result<Vec<LinearOperator>> {
    cfg.validate(n_x, n_y)?;
    if x_sm.len() < 2 {
        return Err(Error::Config("motion update needs at least two states".into()));
    }
    for x in x_sm {
        check_len("motion update state", n_x * n_y, x.len())?;
    }
    (1..x_sm.len())
        .into_par_iter()
        .map(|i| {
            let (prev, next) = (&x_sm[i - 1], &x_sm[i]);
            let op = match cfg.model {
                MotionModel::Identity => Ok(LinearOperator::Identity(n_x * n_y)),
                MotionModel::OpticalFlow => {
                    estimate_velocity(prev, next, n_x, n_y, &cfg.of).and_then(|s| build_warp(&s))
                }
                MotionModel::Dmd => dmd_rank1(prev, next, cfg.zeta),
                MotionModel::PatchDmd => {
                    dmd_patchwise(prev, next, cfg.zeta, n_x, n_y, cfg.patch.0, cfg.patch.1)
                }
            };
            op.map_err(|e| e.context(format!("motion update for timestep {i}")))
        })
        .collect()
}
