//! Parallel-beam projector with exact pixel chord lengths.
//!
//! Pixels are unit squares centred at `u_j = j − (n_y−1)/2` (columns) and
//! `v_i = i − (n_x−1)/2` (rows). A ray at angle θ and detector offset `t`
//! is the line `t·e + s·d` with `e = (cos θ, sin θ)` and
//! `d = (−sin θ, cos θ)` in `(u, v)` coordinates, so θ = 0 integrates
//! columns and θ = π/2 integrates rows.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::image::ImageSequence;
use crate::linops::{LinearOperator, SparseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub n_x: usize,
    pub n_y: usize,
    /// Projection angles in radians, one list per frame.
    pub angles: Vec<Vec<f64>>,
    pub detector_count: usize,
}

/// `ceil(√(n_x² + n_y²))`, enough detectors to cover the image diagonal.
pub fn default_detector_count(n_x: usize, n_y: usize) -> usize {
    let d = ((n_x * n_x + n_y * n_y) as f64).sqrt().ceil() as usize;
    d.max(1)
}

impl ScanGeometry {
    /// `n_angles` equispaced angles in `[0, π)` per frame, frame `t` rotated
    /// by `t · rotation` (wrapped into `[0, π)`).
    pub fn equispaced(
        n_x: usize,
        n_y: usize,
        frames: usize,
        n_angles: usize,
        rotation: f64,
    ) -> Result<Self> {
        let angles = (0..frames)
            .map(|t| {
                (0..n_angles)
                    .map(|k| (k as f64 * PI / n_angles as f64 + t as f64 * rotation).rem_euclid(PI))
                    .collect()
            })
            .collect();
        let geom = Self {
            n_x,
            n_y,
            angles,
            detector_count: default_detector_count(n_x, n_y),
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn frames(&self) -> usize {
        self.angles.len()
    }

    pub fn rows_at(&self, t: usize) -> usize {
        self.angles[t].len() * self.detector_count
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.detector_count == 0 {
            return Err(Error::Config("detector_count must be at least 1".into()));
        }
        for (t, a) in self.angles.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Config(format!("frame {t} has no projection angles")));
            }
            if let Some(bad) = a.iter().find(|&&th| !(0.0..PI).contains(&th)) {
                return Err(Error::Config(format!("frame {t}: angle {bad} outside [0, π)")));
            }
        }
        Ok(())
    }

    /// Detector offsets, shifted by half a pixel when needed so that θ = 0
    /// rays pass through column centres.
    pub fn offsets(&self) -> Vec<f64> {
        let d = self.detector_count;
        let shift = if (d as i64 - self.n_y as i64).rem_euclid(2) == 1 {
            0.5
        } else {
            0.0
        };
        (0..d)
            .map(|k| k as f64 - (d as f64 - 1.0) / 2.0 + shift)
            .collect()
    }
}

fn snap(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        0.0
    } else {
        x
    }
}

/// Chord lengths of one ray through the pixel grid, as `(pixel, length)`
/// sorted by pixel.
fn ray_weights(n_x: usize, n_y: usize, theta: f64, t: f64) -> Vec<(usize, f64)> {
    let (eu, ev) = (snap(theta.cos()), snap(theta.sin()));
    let (du, dv) = (-ev, eu);
    let (pu, pv) = (t * eu, t * ev);
    let (hu, hv) = (n_y as f64 / 2.0, n_x as f64 / 2.0);

    // Parameter interval inside the image rectangle.
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, d, h) in [(pu, du, hu), (pv, dv, hv)] {
        if d == 0.0 {
            if p <= -h || p >= h {
                return Vec::new();
            }
        } else {
            let (a, b) = ((-h - p) / d, (h - p) / d);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    if hi - lo <= 1e-12 {
        return Vec::new();
    }

    let mut cuts = vec![lo, hi];
    for (p, d, h, n) in [(pu, du, hu, n_y), (pv, dv, hv, n_x)] {
        if d != 0.0 {
            for k in 1..n {
                let s = (k as f64 - h - p) / d;
                if s > lo && s < hi {
                    cuts.push(s);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);

    let mut out: Vec<(usize, f64)> = Vec::with_capacity(n_x + n_y);
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= 1e-12 {
            continue;
        }
        let m = 0.5 * (w[0] + w[1]);
        let j = ((pu + m * du + hu).floor() as isize).clamp(0, n_y as isize - 1) as usize;
        let i = ((pv + m * dv + hv).floor() as isize).clamp(0, n_x as isize - 1) as usize;
        out.push((i * n_y + j, len));
    }
    out.sort_by_key(|e| e.0);
    out.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    out
}

/// Sparse forward operator of frame `t`.
pub fn build_operator(geom: &ScanGeometry, t: usize) -> Result<LinearOperator> {
    geom.validate()?;
    if t >= geom.frames() {
        return Err(Error::Config(format!(
            "frame {t} requested from a geometry with {} frames",
            geom.frames()
        )));
    }
    let offsets = geom.offsets();
    let rays: Vec<(f64, f64)> = geom.angles[t]
        .iter()
        .flat_map(|&th| offsets.iter().map(move |&o| (th, o)))
        .collect();
    let rows: Vec<Vec<(usize, f64)>> = rays
        .par_iter()
        .map(|&(th, o)| ray_weights(geom.n_x, geom.n_y, th, o))
        .collect();
    let m = SparseMatrix::from_rows(rays.len(), geom.n_x * geom.n_y, rows)?;
    Ok(LinearOperator::Sparse(m))
}

pub fn build_operators(geom: &ScanGeometry) -> Result<Vec<LinearOperator>> {
    (0..geom.frames()).map(|t| build_operator(geom, t)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinogramSet {
    pub y: Vec<DVector<f64>>,
    pub noise_level: f64,
}

/// `y_t = H_t x_t + ε_t` with each `ε_t` a Gaussian draw rescaled so that
/// `‖ε_t‖ = σ‖H_t x_t‖` exactly.
pub fn simulate_sinograms(
    x: &ImageSequence,
    geom: &ScanGeometry,
    sigma: f64,
    seed: u64,
) -> Result<SinogramSet> {
    let ops = build_operators(geom)?;
    simulate_with(x, &ops, sigma, seed)
}

pub fn simulate_with(
    x: &ImageSequence,
    ops: &[LinearOperator],
    sigma: f64,
    seed: u64,
) -> Result<SinogramSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise level {sigma} must be finite and ≥ 0")));
    }
    check_len("sinogram frames", x.len(), ops.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(ops.len());
    for (h, xi) in ops.iter().zip(&x.frames) {
        let clean = h.apply(xi)?;
        let e: DVector<f64> = DVector::from_fn(clean.len(), |_, _| StandardNormal.sample(&mut rng));
        let (cn, en) = (clean.norm(), e.norm());
        let scale = if cn == 0.0 || en == 0.0 { 0.0 } else { sigma * cn / en };
        y.push(clean + e * scale);
    }
    Ok(SinogramSet {
        y,
        noise_level: sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn single_angle(n_x: usize, n_y: usize, theta: f64) -> ScanGeometry {
        ScanGeometry {
            n_x,
            n_y,
            angles: vec![vec![theta]],
            detector_count: default_detector_count(n_x, n_y),
        }
    }

    fn random_image(n: usize, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(n, |_, _| rng.random::<f64>())
    }

    #[test]
    fn single_pixel_single_ray() {
        let g = ScanGeometry {
            n_x: 1,
            n_y: 1,
            angles: vec![vec![0.0]],
            detector_count: 1,
        };
        let LinearOperator::Sparse(h) = build_operator(&g, 0).unwrap() else {
            panic!("sparse expected")
        };
        assert_eq!(h.nnz(), 1);
        assert!((h.values()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn angle_zero_gives_column_sums() {
        for (n_x, n_y) in [(8, 8), (5, 7), (6, 3)] {
            let g = single_angle(n_x, n_y, 0.0);
            let h = build_operator(&g, 0).unwrap();
            let x = random_image(n_x * n_y, 3);
            let y = h.apply(&x).unwrap();
            let offs = g.offsets();
            for j in 0..n_y {
                let u = j as f64 - (n_y as f64 - 1.0) / 2.0;
                let k = offs.iter().position(|&o| (o - u).abs() < 1e-12).unwrap();
                let col: f64 = (0..n_x).map(|i| x[i * n_y + j]).sum();
                assert!((y[k] - col).abs() < 1e-12, "{n_x}x{n_y} column {j}");
            }
            // Rays outside the image see nothing.
            let covered: f64 = y.iter().sum();
            assert!((covered - x.sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn desk_shape() {
        let g = ScanGeometry::equispaced(64, 64, 1, 5, 0.0).unwrap();
        assert_eq!(g.detector_count, 91);
        let h = build_operator(&g, 0).unwrap();
        assert_eq!((h.rows(), h.cols()), (5 * 91, 4096));
    }

    #[test]
    fn rows_are_short_and_nonnegative() {
        let g = ScanGeometry::equispaced(12, 9, 1, 7, 0.1).unwrap();
        let LinearOperator::Sparse(h) = build_operator(&g, 0).unwrap() else {
            panic!()
        };
        for r in 0..h.rows() {
            let (idx, val) = h.row(r);
            assert!(idx.len() <= 12 + 9);
            assert!(val.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn chord_lengths_sum_to_segment_length() {
        // A ray through the centre crosses a full n×n square along its length.
        let n = 10;
        let th = 0.3f64;
        let w = ray_weights(n, n, th, 0.0);
        let total: f64 = w.iter().map(|e| e.1).sum();
        let expected = n as f64 / th.cos();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn rotation_consistency_at_axis_angles() {
        let n = 9;
        let x = random_image(n * n, 5);
        // R[i][j] = X[n-1-j][i]
        let rot = DVector::from_fn(n * n, |p, _| {
            let (i, j) = (p / n, p % n);
            x[(n - 1 - j) * n + i]
        });
        let h0 = build_operator(&single_angle(n, n, 0.0), 0).unwrap();
        let h90 = build_operator(&single_angle(n, n, PI / 2.0), 0).unwrap();
        let a = h0.apply(&x).unwrap();
        let b = h90.apply(&rot).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn empty_angle_list_is_config_error() {
        let g = ScanGeometry {
            n_x: 4,
            n_y: 4,
            angles: vec![vec![]],
            detector_count: 6,
        };
        assert!(build_operator(&g, 0).unwrap_err().is_config());
    }

    #[test]
    fn noise_is_rescaled_exactly() {
        let n = 16;
        let seq = ImageSequence::new(n, n, vec![random_image(n * n, 1), random_image(n * n, 2)]).unwrap();
        let g = ScanGeometry::equispaced(n, n, 2, 5, 0.2).unwrap();
        let ops = build_operators(&g).unwrap();
        let clean = simulate_with(&seq, &ops, 0.0, 4).unwrap();
        let noisy = simulate_with(&seq, &ops, 0.01, 4).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, y) in clean.y.iter().zip(&noisy.y) {
            num += (y - c).norm_squared();
            den += c.norm_squared();
        }
        assert!(((num / den).sqrt() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_image_gets_zero_noise() {
        let seq = ImageSequence::zeros(4, 4, 1);
        let g = ScanGeometry::equispaced(4, 4, 1, 3, 0.0).unwrap();
        let s = simulate_sinograms(&seq, &g, 0.5, 1).unwrap();
        assert_eq!(s.y[0].norm(), 0.0);
    }
}
