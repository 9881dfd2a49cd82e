//! Squared-exponential prior and its leading-mode projection basis.
//!
//! On a regular grid the SE kernel factorises over the two axes,
//! `Σ = α² K_x ⊗ K_y`, so its eigenpairs are products of the eigenpairs of
//! two small one-dimensional matrices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Marginal standard deviation.
    pub alpha: f64,
    /// Correlation length in pixels.
    pub ell: f64,
    /// Number of retained modes.
    pub r: usize,
}

impl PriorConfig {
    pub fn validate(&self, n_s: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.ell > 0.0 && self.ell.is_finite()) {
            return Err(Error::Config(format!("ell must be positive, got {}", self.ell)));
        }
        if self.r == 0 || self.r > n_s {
            return Err(Error::Config(format!(
                "r = {} must lie in 1..={n_s}",
                self.r
            )));
        }
        Ok(())
    }
}

/// `P_r`, whose columns are the leading eigenvectors of Σ scaled by the
/// square roots of their eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    pub p: DMatrix<f64>,
    /// Retained eigenvalues of Σ, non-increasing.
    pub eigenvalues: Vec<f64>,
    pub n_x: usize,
    pub n_y: usize,
    pub config: PriorConfig,
}

impl ProjectionBasis {
    pub fn r(&self) -> usize {
        self.p.ncols()
    }

    pub fn n_s(&self) -> usize {
        self.p.nrows()
    }
}

/// `α² exp(−d²/(2ℓ²))` for pixels `a = (row, col)` and `b`.
pub fn se_covariance_entry(a: (usize, usize), b: (usize, usize), alpha: f64, ell: f64) -> f64 {
    let di = a.0 as f64 - b.0 as f64;
    let dj = a.1 as f64 - b.1 as f64;
    alpha * alpha * (-(di * di + dj * dj) / (2.0 * ell * ell)).exp()
}

/// Eigenpairs of the unit-variance 1-D SE matrix, sorted by descending
/// eigenvalue with the first nonzero entry of each vector positive.
/// Eigenvalues below the roundoff level `n·ε·λ_max` are set to zero.
fn axis_eigen(n: usize, ell: f64) -> (Vec<f64>, DMatrix<f64>) {
    let k = DMatrix::from_fn(n, n, |a, b| {
        let d = a as f64 - b as f64;
        (-(d * d) / (2.0 * ell * ell)).exp()
    });
    let eig = SymmetricEigen::new(k);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let cutoff = n as f64 * f64::EPSILON * top;
    let vals = order
        .iter()
        .map(|&i| eig.eigenvalues[i])
        .map(|l| if l < cutoff { 0.0 } else { l })
        .collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = col.iter().find(|v| **v != 0.0) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vecs.set_column(c, &col);
    }
    (vals, vecs)
}

pub fn build_projection(n_x: usize, n_y: usize, cfg: &PriorConfig) -> Result<ProjectionBasis> {
    let n_s = n_x * n_y;
    cfg.validate(n_s)?;
    let (lx, ux) = axis_eigen(n_x, cfg.ell);
    let (ly, uy) = axis_eigen(n_y, cfg.ell);
    let a2 = cfg.alpha * cfg.alpha;

    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(n_s);
    for a in 0..n_x {
        for b in 0..n_y {
            pairs.push((a, b, a2 * lx[a] * ly[b]));
        }
    }
    // Stable, so equal products keep lexicographic (x, y) order.
    pairs.sort_by(|p, q| q.2.total_cmp(&p.2));
    pairs.truncate(cfg.r);

    if let Some((k, &(a, b, lam))) = pairs.iter().enumerate().find(|(_, p)| !(p.2 > 1e-300)) {
        return Err(Error::Numeric(format!(
            "eigenvalue {k} of the prior (axis modes {a}, {b}) is {lam:e}, below 1e-300; \
             lower r or increase ell"
        )));
    }

    let mut p = DMatrix::zeros(n_s, cfg.r);
    for (k, &(a, b, lam)) in pairs.iter().enumerate() {
        let s = lam.sqrt();
        let mut col = p.column_mut(k);
        for i in 0..n_x {
            let xi = ux[(i, a)] * s;
            for j in 0..n_y {
                col[i * n_y + j] = xi * uy[(j, b)];
            }
        }
    }
    Ok(ProjectionBasis {
        p,
        eigenvalues: pairs.iter().map(|p| p.2).collect(),
        n_x,
        n_y,
        config: *cfg,
    })
}

/// Dense Σ for oracle checks on small grids.
#[cfg(any(test, feature = "dense-oracle"))]
pub fn dense_covariance(n_x: usize, n_y: usize, alpha: f64, ell: f64) -> DMatrix<f64> {
    let n = n_x * n_y;
    DMatrix::from_fn(n, n, |p, q| {
        se_covariance_entry((p / n_y, p % n_y), (q / n_y, q % n_y), alpha, ell)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha: f64, ell: f64, r: usize) -> PriorConfig {
        PriorConfig { alpha, ell, r }
    }

    #[test]
    fn covariance_entries() {
        assert_eq!(se_covariance_entry((2, 3), (2, 3), 0.5, 4.0), 0.25);
        let v = se_covariance_entry((0, 0), (0, 1), 1.0, 1.0);
        assert!((v - 0.6065306597126334).abs() < 1e-12);
        let w = se_covariance_entry((0, 0), (11, 0), 0.28, 11.0);
        assert!((w - 0.28f64.powi(2) * (-0.5f64).exp()).abs() < 1e-15);
        assert!((w - 0.047552).abs() < 1e-6);
    }

    #[test]
    fn scalar_image() {
        let b = build_projection(1, 1, &cfg(0.3, 2.0, 1)).unwrap();
        assert!((b.p[(0, 0)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn full_rank_reconstructs_sigma() {
        let b = build_projection(6, 6, &cfg(0.7, 1.5, 36)).unwrap();
        let sigma = dense_covariance(6, 6, 0.7, 1.5);
        let err = (&b.p * b.p.transpose() - &sigma).amax();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn truncation_matches_dense_eigen_oracle() {
        let (alpha, ell) = (0.9, 1.3);
        let sigma = dense_covariance(8, 8, alpha, ell);
        let mut dense: Vec<f64> = SymmetricEigen::new(sigma.clone()).eigenvalues.iter().copied().collect();
        dense.sort_by(|a, b| b.total_cmp(a));
        for r in [1, 5, 17, 40] {
            let b = build_projection(8, 8, &cfg(alpha, ell, r)).unwrap();
            let got = (&sigma - &b.p * b.p.transpose()).norm();
            let want = dense[r..].iter().map(|l| l * l).sum::<f64>().sqrt();
            assert!((got - want).abs() < 1e-10, "r={r}: {got} vs {want}");
            for (k, l) in b.eigenvalues.iter().enumerate() {
                assert!((l - dense[k]).abs() <= 1e-10 * dense[0]);
            }
            assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn whitening_identity() {
        let (alpha, ell) = (1.2, 0.9);
        let b = build_projection(5, 4, &cfg(alpha, ell, 8)).unwrap();
        let sigma = dense_covariance(5, 4, alpha, ell);
        let chol = sigma.cholesky().unwrap();
        let w = b.p.transpose() * chol.solve(&b.p);
        let err = (w - DMatrix::identity(8, 8)).amax();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn reproducible_signs() {
        let a = build_projection(7, 5, &cfg(1.0, 2.0, 10)).unwrap();
        let b = build_projection(7, 5, &cfg(1.0, 2.0, 10)).unwrap();
        assert_eq!(a.p, b.p);
    }

    #[test]
    fn invalid_rank_and_underflow() {
        assert!(build_projection(3, 3, &cfg(1.0, 1.0, 10)).unwrap_err().is_config());
        let err = build_projection(64, 64, &cfg(0.28, 40.0, 300)).unwrap_err();
        assert!(err.is_numeric());
    }
}
