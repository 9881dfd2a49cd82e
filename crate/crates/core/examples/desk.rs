//! Desk-scale moving-blocks comparison of IRKFS and EMIRKFS-M3.
//!
//! Parameters can be overridden through environment variables, e.g.
//! `ELL=3 ZETA=5 cargo run --release --example desk`.

use std::env;
use std::f64::consts::PI;
use std::time::Instant;

use emkfs::motion::{MotionConfig, MotionModel};
use emkfs::phantom::{generate_blocks, BlocksPhantomConfig};
use emkfs::pipeline::{memory_bound_doubles, run_emirkfs, MethodSpec, Problem};
use emkfs::prior::{build_projection, PriorConfig};
use emkfs::radon::{build_operators, simulate_with, ScanGeometry};
use emkfs::Workspace;

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> emkfs::Result<()> {
    let seed: u64 = var("SEED", 7);
    let phantom = BlocksPhantomConfig::desk(seed);
    let (n, t) = (phantom.n_x, phantom.t);
    let truth = generate_blocks(&phantom)?;
    let angles: usize = var("ANGLES", 5);
    let rotation: f64 = var("ROTATION", PI / (angles * (t + 1)) as f64);
    let geom = ScanGeometry::equispaced(n, n, t + 1, angles, rotation)?;
    let h = build_operators(&geom)?;
    let data = simulate_with(&truth, &h, 0.01, seed + 1)?;

    let prior = PriorConfig {
        alpha: var("ALPHA", 0.28),
        ell: var("ELL", 2.0),
        r: var("R", 300),
    };
    let basis = build_projection(n, n, &prior)?;
    let problem = Problem { h: &h, y: &data.y, basis: &basis, truth: Some(&truth) };
    let motion = MotionConfig {
        model: MotionModel::Identity,
        zeta: var("ZETA", 5.0),
        patch: (var("PATCH", 4), var("PATCH", 4)),
        ..Default::default()
    };
    let q_scale: f64 = var("Q_SCALE", 1.0);
    let n_iter: usize = var("N_ITER", 2);
    let methods: String = var("METHODS", "IRKFS,EMIRKFS-M3".to_string());
    let bound = memory_bound_doubles(n * n, prior.r, t, h.iter().map(|o| o.rows()).max().unwrap_or(0));
    for name in methods.split(',') {
        let mut spec: MethodSpec = name.parse()?;
        spec.n_iter = n_iter;
        spec.q_scale = q_scale;
        let ws = Workspace::new();
        let start = Instant::now();
        let rec = run_emirkfs(&problem, &spec, &motion, &ws)?;
        let means: Vec<String> = rec.mean_rre().iter().map(|m| format!("{:.5}", m.unwrap_or(f64::NAN))).collect();
        println!(
            "{:<12} mean RRE per iteration [{}]  {:.1}s  peak {:.3} of bound",
            rec.method,
            means.join(", "),
            start.elapsed().as_secs_f64(),
            rec.peak_bytes as f64 / (8.0 * bound as f64)
        );
        if env::var("FRAMES").is_ok() {
            for it in &rec.iterations {
                let v: Vec<String> = it.rre.iter().flatten().map(|e| format!("{e:.3}")).collect();
                println!("  iteration {}: {}", it.iteration, v.join(" "));
            }
        }
    }
    Ok(())
}
