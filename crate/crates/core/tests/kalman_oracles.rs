mod common;

use nalgebra::DMatrix;

use common::{dense_filter, dense_smoother, rel, rel_mat, small_problem, SmallProblem};
use emkfs::filter::{run_filter, static_reduced_solve, FilterOptions, Model};
use emkfs::linops::LinearOperator;
use emkfs::motion::{build_warp, VelocityField};
use emkfs::prior::{build_projection, PriorConfig};
use emkfs::smoother::{run_smoother, SmootherOptions};
use emkfs::Workspace;

fn model(pb: &SmallProblem) -> Model<'_> {
    Model {
        h: &pb.h,
        y: &pb.y,
        motions: &pb.motions,
        noise: &pb.noise,
        alpha: pb.alpha,
    }
}

fn dense_motions(pb: &SmallProblem) -> Vec<DMatrix<f64>> {
    pb.motions.iter().map(LinearOperator::to_dense).collect()
}

fn check_filter(pb: &SmallProblem) {
    let ws = Workspace::with_chunk_rows(50);
    let traj = run_filter(&model(pb), &pb.basis, FilterOptions::default(), &ws).unwrap();
    let dense = dense_filter(pb, &dense_motions(pb));
    let p = &pb.basis.p;
    for i in 0..pb.y.len() {
        let e = rel(&traj.x_est[i], &dense.x[i]);
        assert!(e <= 1e-8, "x_est[{i}] relative error {e:e}");
        let c = p * traj.psi_at(i) * p.transpose();
        let e = rel_mat(&c, &dense.c[i]);
        assert!(e <= 1e-8, "covariance[{i}] relative error {e:e}");
    }
    for i in 1..pb.y.len() {
        assert!(rel(&traj.x_pred[i - 1], &dense.x_pred[i - 1]) <= 1e-8);
    }
}

#[test]
fn filter_matches_dense_kalman_filter() {
    check_filter(&small_problem(12, 4, 5, 1));
}

#[test]
fn filter_matches_dense_kalman_filter_with_warp_motion() {
    let mut pb = small_problem(10, 3, 4, 2);
    let warp = build_warp(&VelocityField::constant(10, 10, 0.6, -0.3)).unwrap();
    pb.motions = vec![warp; 3];
    check_filter(&pb);
}

#[test]
fn smoother_matches_dense_rts() {
    let pb = small_problem(12, 4, 5, 3);
    let ws = Workspace::with_chunk_rows(40);
    let m = model(&pb);
    let traj = run_filter(&m, &pb.basis, FilterOptions::default(), &ws).unwrap();
    let motions = dense_motions(&pb);
    let dense = dense_smoother(&dense_filter(&pb, &motions), &motions);
    let p = &pb.basis.p;
    let mut crosses = vec![DMatrix::zeros(0, 0); 4];
    let opts = SmootherOptions { covariances: true, keep_covariances: true };
    let out = run_smoother(&m, &pb.basis, &traj, opts, &ws, |pair| {
        crosses[pair.i - 1] = pair.cross.unwrap().to_dense(p);
        Ok(())
    })
    .unwrap();
    for i in 0..=4 {
        let e = rel(&out.x_sm[i], &dense.x[i]);
        assert!(e <= 1e-8, "x_sm[{i}] relative error {e:e}");
        let c = p * out.psi_at(i).unwrap() * p.transpose();
        let e = rel_mat(&c, &dense.c[i]);
        assert!(e <= 1e-8, "smoothed covariance[{i}] relative error {e:e}");
    }
    for (i, c) in crosses.iter().enumerate() {
        let e = rel_mat(c, &dense.cross[i]);
        assert!(e <= 1e-8, "cross covariance[{}] relative error {e:e}", i + 1);
    }
    assert_eq!(out.x_sm[4], traj.x_est[4]);
}

#[test]
fn smoother_means_without_covariances_agree() {
    let pb = small_problem(8, 3, 3, 4);
    let ws = Workspace::new();
    let m = model(&pb);
    let traj = run_filter(&m, &pb.basis, FilterOptions::default(), &ws).unwrap();
    let with = run_smoother(&m, &pb.basis, &traj, SmootherOptions { covariances: true, keep_covariances: false }, &ws, |_| Ok(())).unwrap();
    let without = run_smoother(&m, &pb.basis, &traj, SmootherOptions::default(), &ws, |_| Ok(())).unwrap();
    assert_eq!(with.x_sm, without.x_sm);
    assert!(without.psi_sm.is_none());
}

#[test]
fn large_process_noise_reduces_to_static_solves() {
    let mut pb = small_problem(12, 3, 5, 5);
    pb.basis = build_projection(12, 12, &PriorConfig { alpha: pb.alpha, ell: 2.0, r: 20 }).unwrap();
    for q in &mut pb.noise.q_diag {
        q.fill(1e8);
    }
    for r in &mut pb.noise.r_diag {
        r.fill(1.0);
    }
    let ws = Workspace::new();
    let traj = run_filter(&model(&pb), &pb.basis, FilterOptions::default(), &ws).unwrap();
    for i in 1..=3 {
        let (x, _) = static_reduced_solve(&pb.h[i], &pb.basis.p, &pb.y[i], 1e8, &ws).unwrap();
        let e = rel(&traj.x_est[i], &x);
        assert!(e <= 1e-6, "frame {i}: relative error {e:e}");
    }
}

#[test]
fn large_process_noise_decouples_cross_covariance() {
    // One step out of the prior-initialised state, whose covariance stays
    // bounded; later filtered covariances grow with Q themselves.
    let mut pb = small_problem(10, 1, 4, 6);
    for q in &mut pb.noise.q_diag {
        q.fill(1e6);
    }
    let ws = Workspace::new();
    let m = model(&pb);
    let traj = run_filter(&m, &pb.basis, FilterOptions::default(), &ws).unwrap();
    let p = &pb.basis.p;
    let opts = SmootherOptions { covariances: true, keep_covariances: false };
    run_smoother(&m, &pb.basis, &traj, opts, &ws, |pair| {
        let cross = pair.cross.unwrap().to_dense(p);
        let c_i = p * pair.psi_cur.unwrap() * p.transpose();
        assert!(cross.norm() <= 1e-4 * c_i.norm());
        Ok(())
    })
    .unwrap();
}

#[test]
fn zero_smoothing_innovation_keeps_filtered_state() {
    // T = 1: x_sm_1 = x_est_1; if that equals the prediction, x_sm_0 = x_est_0.
    let pb = small_problem(6, 1, 3, 7);
    let ws = Workspace::new();
    let m = model(&pb);
    let mut traj = run_filter(&m, &pb.basis, FilterOptions::default(), &ws).unwrap();
    traj.x_est[1] = traj.x_pred[0].clone();
    let out = run_smoother(&m, &pb.basis, &traj, SmootherOptions::default(), &ws, |_| Ok(())).unwrap();
    assert!((&out.x_sm[0] - &traj.x_est[0]).amax() <= 1e-14 * traj.x_est[0].amax().max(1.0));
}

#[test]
fn tracked_storage_is_released() {
    let pb = small_problem(8, 3, 3, 8);
    let ws = Workspace::new();
    {
        let m = model(&pb);
        let traj = run_filter(&m, &pb.basis, FilterOptions::default(), &ws).unwrap();
        assert!(ws.meter.current_bytes() >= traj.held_bytes());
        let out = run_smoother(&m, &pb.basis, &traj, SmootherOptions { covariances: true, keep_covariances: true }, &ws, |_| Ok(())).unwrap();
        assert!(out.held_bytes() > 0);
    }
    assert_eq!(ws.meter.current_bytes(), 0);
}
