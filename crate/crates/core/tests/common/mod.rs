#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emkfs::em::NoiseModel;
use emkfs::linops::LinearOperator;
use emkfs::mmgks::mm_weights;
use emkfs::prior::{build_projection, PriorConfig, ProjectionBasis};
use emkfs::radon::{build_operators, default_detector_count, ScanGeometry};

pub fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// A small full-rank problem: `r = n_s`, random angles, random positive
/// diagonal noise.
pub struct SmallProblem {
    pub n: usize,
    pub basis: ProjectionBasis,
    pub h: Vec<LinearOperator>,
    pub y: Vec<DVector<f64>>,
    pub motions: Vec<LinearOperator>,
    pub noise: NoiseModel,
    pub alpha: f64,
}

pub fn small_problem(n: usize, t: usize, angles: usize, seed: u64) -> SmallProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = ScanGeometry {
        n_x: n,
        n_y: n,
        angles: (0..=t)
            .map(|_| (0..angles).map(|_| rng.random_range(0.0..PI)).collect())
            .collect(),
        detector_count: default_detector_count(n, n),
    };
    let h = build_operators(&geom).unwrap();
    let alpha = 0.8;
    let basis = build_projection(n, n, &PriorConfig { alpha, ell: 1.0, r: n * n }).unwrap();
    let truth: Vec<DVector<f64>> = (0..=t)
        .map(|k| DVector::from_fn(n * n, |p, _| ((p + 3 * k) % 7) as f64 / 7.0))
        .collect();
    let y = h
        .iter()
        .zip(&truth)
        .map(|(op, x)| {
            let clean = op.apply(x).unwrap();
            clean.map(|v| v + rng.random_range(-0.05..0.05))
        })
        .collect();
    let m_t: Vec<usize> = h[1..].iter().map(LinearOperator::rows).collect();
    let mut noise = NoiseModel::isotropic(n * n, &m_t, 1.0, 1.0).unwrap();
    for q in &mut noise.q_diag {
        q.iter_mut().for_each(|v| *v = rng.random_range(0.05..0.3));
    }
    for r in &mut noise.r_diag {
        r.iter_mut().for_each(|v| *v = rng.random_range(0.01..0.05));
    }
    SmallProblem {
        n,
        basis,
        h,
        y,
        motions: vec![LinearOperator::Identity(n * n); t],
        noise,
        alpha,
    }
}

pub struct DenseFilter {
    pub x: Vec<DVector<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub x_pred: Vec<DVector<f64>>,
    pub c_pred: Vec<DMatrix<f64>>,
}

/// Textbook Kalman filter started from the static reduced solve with
/// `C_0 = P Pᵀ`.
pub fn dense_filter(pb: &SmallProblem, motions: &[DMatrix<f64>]) -> DenseFilter {
    let p = &pb.basis.p;
    let h0 = pb.h[0].to_dense();
    let hp = &h0 * p;
    let lhs = hp.transpose() * &hp + p.transpose() * p / (pb.alpha * pb.alpha);
    let x0 = p * lhs.cholesky().unwrap().solve(&(hp.transpose() * &pb.y[0]));
    let mut out = DenseFilter {
        x: vec![x0],
        c: vec![p * p.transpose()],
        x_pred: Vec::new(),
        c_pred: Vec::new(),
    };
    for i in 1..pb.y.len() {
        let m = &motions[i - 1];
        let h = pb.h[i].to_dense();
        let xp = m * &out.x[i - 1];
        let cp = m * &out.c[i - 1] * m.transpose() + DMatrix::from_diagonal(&pb.noise.q_diag[i - 1]);
        let s = &h * &cp * h.transpose() + DMatrix::from_diagonal(&pb.noise.r_diag[i - 1]);
        let k = &cp * h.transpose() * s.try_inverse().unwrap();
        let x = &xp + &k * (&pb.y[i] - &h * &xp);
        let c = &cp - &k * &h * &cp;
        out.x.push(x);
        out.c.push(c);
        out.x_pred.push(xp);
        out.c_pred.push(cp);
    }
    out
}

pub struct DenseSmoother {
    pub x: Vec<DVector<f64>>,
    pub c: Vec<DMatrix<f64>>,
    /// `cross[i − 1] = C_{i,i−1}`.
    pub cross: Vec<DMatrix<f64>>,
}

pub fn dense_smoother(f: &DenseFilter, motions: &[DMatrix<f64>]) -> DenseSmoother {
    let t = f.x.len() - 1;
    let mut x = f.x.clone();
    let mut c = f.c.clone();
    let mut cross = vec![DMatrix::zeros(0, 0); t];
    for i in (1..=t).rev() {
        let j = &f.c[i - 1] * motions[i - 1].transpose() * f.c_pred[i - 1].clone().try_inverse().unwrap();
        x[i - 1] = &f.x[i - 1] + &j * (&x[i] - &f.x_pred[i - 1]);
        c[i - 1] = &f.c[i - 1] + &j * (&c[i] - &f.c_pred[i - 1]) * j.transpose();
        cross[i - 1] = &c[i] * j.transpose();
    }
    DenseSmoother { x, c, cross }
}

/// Full-space IRLS fixed point of `‖A s − b‖² + λ‖P_ε L s‖²` reweighting.
pub fn dense_irls(a: &DMatrix<f64>, l: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, eps: f64) -> DVector<f64> {
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    let mut s = DVector::zeros(a.ncols());
    for _ in 0..10_000 {
        let w = mm_weights(&(l * &s), eps);
        let w2 = DMatrix::from_diagonal(&w.component_mul(&w));
        let lhs = &ata + l.transpose() * w2 * l * lambda;
        let next = lhs.cholesky().unwrap().solve(&atb);
        let done = (&next - &s).norm() <= 1e-14 * next.norm();
        s = next;
        if done {
            break;
        }
    }
    s
}
