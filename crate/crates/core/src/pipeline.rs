//! Outer iteration: filter, smooth, refit motion, re-estimate noise.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use nalgebra::DVector;

use crate::em::{em_update_q, em_update_r, NoiseModel};
use crate::error::{check_len, Error, Result};
use crate::filter::{run_filter, FilterOptions, Model};
use crate::image::ImageSequence;
use crate::linops::LinearOperator;
use crate::memory::{Footprint, Workspace};
use crate::metrics::rre_series;
use crate::motion::{update_motions, MotionConfig, MotionModel};
use crate::prior::ProjectionBasis;
use crate::smoother::{run_smoother, SmootherOptions};

/// Which parameter updates run between passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    /// `Identity` disables motion refits.
    pub motion: MotionModel,
    pub em: bool,
    pub n_iter: usize,
    /// `Q⁽⁰⁾ = q_scale · α² I`.
    pub q_scale: f64,
    /// `R⁽⁰⁾ = r_scale · α² I`.
    pub r_scale: f64,
}

impl MethodSpec {
    pub fn new(motion: MotionModel, em: bool, n_iter: usize) -> Self {
        Self {
            motion,
            em,
            n_iter,
            q_scale: 1.0,
            r_scale: 1.0,
        }
    }

    /// All eight variants, plain first.
    pub fn lattice(n_iter: usize) -> Vec<Self> {
        let models = [
            MotionModel::Identity,
            MotionModel::OpticalFlow,
            MotionModel::Dmd,
            MotionModel::PatchDmd,
        ];
        [false, true]
            .iter()
            .flat_map(|&em| models.iter().map(move |&m| Self::new(m, em, n_iter)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be at least 1".into()));
        }
        for (name, v) in [("q_scale", self.q_scale), ("r_scale", self.r_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        let base = if self.em { "EMIRKFS" } else { "IRKFS" };
        match self.motion {
            MotionModel::Identity => base.to_string(),
            m => format!("{base}-{}", m.label()),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    /// Parses names such as `IRKFS`, `IRKFS-M2` or `EMIRKFS-M3` with a
    /// single outer iteration; set `n_iter` afterwards.
    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        let (base, model) = match upper.split_once('-') {
            Some((b, m)) => (b.to_string(), Some(m.to_string())),
            None => (upper.clone(), None),
        };
        let em = match base.as_str() {
            "IRKFS" => false,
            "EMIRKFS" => true,
            _ => return Err(Error::Config(format!("unknown method '{s}'"))),
        };
        let motion = match model.as_deref() {
            None => MotionModel::Identity,
            Some("M1") => MotionModel::OpticalFlow,
            Some("M2") => MotionModel::Dmd,
            Some("M3") => MotionModel::PatchDmd,
            Some(other) => return Err(Error::Config(format!("unknown motion model '{other}' in '{s}'"))),
        };
        Ok(Self::new(motion, em, 1))
    }
}

/// Inputs shared by every pass.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    /// `H_0 … H_T`.
    pub h: &'a [LinearOperator],
    /// `y_0 … y_T`.
    pub y: &'a [DVector<f64>],
    pub basis: &'a ProjectionBasis,
    /// Ground truth for per-frame RRE, when known.
    pub truth: Option<&'a ImageSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRecord {
    pub phase: &'static str,
    pub seconds: f64,
    /// Peak tracked bytes while the phase ran.
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub x_sm: Vec<DVector<f64>>,
    pub rre: Option<Vec<f64>>,
    pub mean_rre: Option<f64>,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub iterations: Vec<IterationRecord>,
    /// Peak tracked bytes over the whole run.
    pub peak_bytes: usize,
    pub noise: NoiseModel,
}

impl RunRecord {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn mean_rre(&self) -> Vec<Option<f64>> {
        self.iterations.iter().map(|it| it.mean_rre).collect()
    }
}

/// Upper bound on tracked storage, in doubles, that a run is expected to
/// respect: `n_s(r + T) + T·m_t`, with `m_t` the largest data length.
pub fn memory_bound_doubles(n_s: usize, r: usize, t: usize, m_t: usize) -> usize {
    n_s * (r + t) + t * m_t
}

struct PhaseTimer<'a> {
    ws: &'a Workspace,
    start: Instant,
}

impl<'a> PhaseTimer<'a> {
    fn start(ws: &'a Workspace) -> Self {
        ws.meter.reset_peak();
        Self {
            ws,
            start: Instant::now(),
        }
    }

    fn finish(self, phase: &'static str, excluded: f64) -> PhaseRecord {
        PhaseRecord {
            phase,
            seconds: (self.start.elapsed().as_secs_f64() - excluded).max(0.0),
            peak_bytes: self.ws.meter.peak_bytes(),
        }
    }
}

pub fn run_emirkfs(
    problem: &Problem<'_>,
    spec: &MethodSpec,
    motion_cfg: &MotionConfig,
    ws: &Workspace,
) -> Result<RunRecord> {
    spec.validate()?;
    let basis = problem.basis;
    let (n_x, n_y, n_s) = (basis.n_x, basis.n_y, basis.n_s());
    if problem.y.is_empty() {
        return Err(Error::Config("no data frames".into()));
    }
    let t = problem.y.len() - 1;
    check_len("forward operators", t + 1, problem.h.len())?;
    if let Some(truth) = problem.truth {
        check_len("ground-truth frames", t + 1, truth.len())?;
        check_len("ground-truth pixels", n_s, truth.pixels())?;
    }
    let mut motion_cfg = *motion_cfg;
    motion_cfg.model = spec.motion;
    motion_cfg.validate(n_x, n_y)?;
    let alpha = basis.config.alpha;
    let m_t: Vec<usize> = problem.h[1..].iter().map(LinearOperator::rows).collect();
    let mut noise = NoiseModel::isotropic(
        n_s,
        &m_t,
        spec.q_scale * alpha * alpha,
        spec.r_scale * alpha * alpha,
    )?;
    let mut motions: Vec<LinearOperator> = vec![LinearOperator::Identity(n_s); t];

    let mut run_peak = 0usize;
    let mut iterations = Vec::with_capacity(spec.n_iter);
    for j in 1..=spec.n_iter {
        let _noise_hold = ws.meter.charge(noise.footprint());
        let _motion_hold = ws
            .meter
            .charge(motions.iter().map(LinearOperator::storage_bytes).sum());
        let model = Model {
            h: problem.h,
            y: problem.y,
            motions: &motions,
            noise: &noise,
            alpha,
        };
        let mut phases = Vec::new();

        let timer = PhaseTimer::start(ws);
        let traj = run_filter(&model, basis, FilterOptions::default(), ws)
            .map_err(|e| e.context(format!("iteration {j}")))?;
        phases.push(timer.finish("filter", 0.0));

        let timer = PhaseTimer::start(ws);
        let mut em_seconds = 0.0;
        let mut new_q: Vec<Option<DVector<f64>>> = vec![None; t];
        let mut new_r: Vec<Option<DVector<f64>>> = vec![None; t];
        let mut em_holds = Vec::new();
        let opts = SmootherOptions {
            covariances: spec.em,
            keep_covariances: false,
        };
        let mut smoothed = run_smoother(&model, basis, &traj, opts, ws, |pair| {
            if !spec.em {
                return Ok(());
            }
            let start = Instant::now();
            let i = pair.i;
            let psi_cur = pair.psi_cur.expect("covariances propagated");
            let r = em_update_r(
                &problem.y[i],
                &problem.h[i],
                pair.x_cur,
                psi_cur,
                &basis.p,
                &noise.floor,
                ws,
            )?;
            let q = em_update_q(
                pair.x_prev,
                pair.x_cur,
                pair.psi_prev.expect("covariances propagated"),
                psi_cur,
                pair.cross.expect("covariances propagated"),
                &motions[i - 1],
                &basis.p,
                &noise.floor,
                ws,
            )?;
            em_holds.push(ws.meter.charge(q.footprint() + r.footprint()));
            new_q[i - 1] = Some(q);
            new_r[i - 1] = Some(r);
            em_seconds += start.elapsed().as_secs_f64();
            Ok(())
        })
        .map_err(|e| e.context(format!("iteration {j}")))?;
        drop(traj);
        phases.push(timer.finish("smoother", em_seconds));
        if spec.em {
            phases.push(PhaseRecord {
                phase: "em",
                seconds: em_seconds,
                peak_bytes: ws.meter.peak_bytes(),
            });
        }
        run_peak = run_peak.max(phases.iter().map(|p| p.peak_bytes).max().unwrap_or(0));

        let x_sm = std::mem::take(&mut smoothed.x_sm);
        let _x_hold = ws.meter.charge(x_sm.footprint());
        drop(smoothed);

        let (rre, mean_rre) = match problem.truth {
            Some(truth) => {
                let (v, m) = rre_series(&x_sm, &truth.frames)?;
                (Some(v), Some(m))
            }
            None => (None, None),
        };

        if spec.motion != MotionModel::Identity {
            let timer = PhaseTimer::start(ws);
            motions = update_motions(&x_sm, n_x, n_y, &motion_cfg)
                .map_err(|e| e.context(format!("iteration {j}")))?;
            let _new = ws
                .meter
                .charge(motions.iter().map(LinearOperator::storage_bytes).sum());
            let rec = timer.finish("motion", 0.0);
            run_peak = run_peak.max(rec.peak_bytes);
            phases.push(rec);
        }
        if spec.em {
            noise.q_diag = new_q.into_iter().map(|q| q.expect("every timestep visited")).collect();
            noise.r_diag = new_r.into_iter().map(|r| r.expect("every timestep visited")).collect();
        }
        drop(em_holds);

        match mean_rre {
            Some(m) => info!("{} iteration {j}: mean RRE {m:.5}", spec.name()),
            None => info!("{} iteration {j} done", spec.name()),
        }
        iterations.push(IterationRecord {
            iteration: j,
            x_sm,
            rre,
            mean_rre,
            phases,
        });
    }
    Ok(RunRecord {
        method: spec.name(),
        iterations,
        peak_bytes: run_peak,
        noise,
    })
}
