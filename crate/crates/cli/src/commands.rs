use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use emkfs::image::ImageSequence;
use emkfs::linops::LinearOperator;
use emkfs::phantom::generate_blocks;
use emkfs::pipeline::{run_emirkfs, Problem, RunRecord};
use emkfs::prior::build_projection;
use emkfs::radon::{build_operators, simulate_with};
use emkfs::Workspace;

use crate::config::{ManifestSection, RunConfig};
use crate::store::{frame_name, read_frame, sha256_file, sha256_str, write_frame, write_pgm};
use crate::CliError;

const TRUTH_DIR: &str = "truth";
const SINO_DIR: &str = "sinogram";
const MANIFEST: &str = "manifest.toml";
const METRICS: &str = "metrics.csv";
const SUMMARY: &str = "summary.toml";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn output_dir(arg: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    arg.or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| CliError::Config("output.dir: no output directory given (use --out or output.dir)".into()))
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn simulate(config: &Path, out: Option<PathBuf>, pgm: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?.resolved();
    let out = output_dir(out, &cfg)?;
    let truth = generate_blocks(&cfg.phantom_config()?)?;
    let ops = build_operators(&cfg.geometry()?)?;
    let data = simulate_with(&truth, &ops, cfg.noise.sigma, cfg.noise.seed)?;
    let (n_x, n_y) = (truth.n_x, truth.n_y);

    let mut files = BTreeMap::new();
    for (i, (x, y)) in truth.frames.iter().zip(&data.y).enumerate() {
        let name = frame_name(i);
        for (dir, dims, v) in [(TRUTH_DIR, vec![n_x, n_y], x), (SINO_DIR, vec![y.len()], y)] {
            let d = out.join(dir);
            let bin = write_frame(&d, &name, &dims, i, v)?;
            let hdr = bin.with_extension("hdr");
            files.insert(relative(&out, &bin), sha256_file(&bin)?);
            files.insert(relative(&out, &hdr), sha256_file(&hdr)?);
        }
        if pgm {
            write_pgm(&out.join(TRUTH_DIR).join(format!("{name}.pgm")), n_x, n_y, x)?;
        }
    }
    let body = cfg.to_toml();
    let listing: String = files.iter().map(|(k, v)| format!("{k} {v}\n")).collect();
    let manifest = RunConfig {
        manifest: Some(ManifestSection {
            format: 1,
            content_hash: sha256_str(&format!("{body}{listing}")),
            files,
        }),
        ..cfg
    };
    let path = out.join(MANIFEST);
    fs::write(&path, manifest.to_toml()).map_err(|e| io_err(&path, e))?;
    info!("wrote {} frames to {}", truth.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub iteration: usize,
    pub timestep: Option<usize>,
    pub rre: Option<f64>,
    pub phase: Option<String>,
    pub seconds: Option<f64>,
    pub bytes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub mean_rre: Option<f64>,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub n_x: usize,
    pub n_y: usize,
    pub t: usize,
    pub r: usize,
    pub seconds: f64,
    pub peak_bytes: usize,
    pub iterations: Vec<IterationSummary>,
}

pub fn metric_rows(rec: &RunRecord) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for it in &rec.iterations {
        for (i, e) in it.rre.iter().flatten().enumerate() {
            rows.push(MetricRow {
                method: rec.method.clone(),
                iteration: it.iteration,
                timestep: Some(i),
                rre: Some(*e),
                phase: None,
                seconds: None,
                bytes: None,
            });
        }
        for p in &it.phases {
            rows.push(MetricRow {
                method: rec.method.clone(),
                iteration: it.iteration,
                timestep: None,
                rre: None,
                phase: Some(p.phase.to_string()),
                seconds: Some(p.seconds),
                bytes: Some(p.peak_bytes),
            });
        }
    }
    rows
}

fn check_same<T: PartialEq + std::fmt::Debug>(field: &str, config: T, data: T) -> Result<(), CliError> {
    if config == data {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: config has {config:?} but the data was simulated with {data:?}")))
    }
}

fn load_sequence(dir: &Path, n_x: usize, n_y: usize, frames: usize) -> Result<ImageSequence, CliError> {
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let (h, v) = read_frame(dir, &frame_name(i))?;
        check_same("phantom dimensions", vec![n_x, n_y], h.dims)?;
        check_same("frame index", i, h.frame)?;
        out.push(v);
    }
    Ok(ImageSequence::new(n_x, n_y, out)?)
}

fn load_sinograms(dir: &Path, ops: &[LinearOperator]) -> Result<Vec<DVector<f64>>, CliError> {
    ops.iter()
        .enumerate()
        .map(|(i, h)| {
            let (hdr, v) = read_frame(dir, &frame_name(i))?;
            check_same("frame index", i, hdr.frame)?;
            check_same(&format!("sinogram {i} length"), h.rows(), v.len())?;
            Ok(v)
        })
        .collect()
}

pub fn reconstruct(config: &Path, data: &Path, out: Option<PathBuf>, pgm: bool) -> Result<(), CliError> {
    if !data.is_dir() {
        return Err(CliError::Io(format!("data directory {} does not exist", data.display())));
    }
    let cfg = RunConfig::load(config)?.resolved();
    let sim = RunConfig::load(&data.join(MANIFEST))?.resolved();
    let out = output_dir(out, &cfg)?;
    check_same("phantom.n_x", cfg.phantom.n_x, sim.phantom.n_x)?;
    check_same("phantom.n_y", cfg.phantom.n_y, sim.phantom.n_y)?;
    check_same("phantom.t", cfg.phantom.t, sim.phantom.t)?;
    check_same("scan", &cfg.scan, &sim.scan)?;

    let (n_x, n_y, t) = (sim.phantom.n_x, sim.phantom.n_y, sim.phantom.t);
    let ops = build_operators(&sim.geometry()?)?;
    let y = load_sinograms(&data.join(SINO_DIR), &ops)?;
    let truth = load_sequence(&data.join(TRUTH_DIR), n_x, n_y, t + 1)?;
    let prior = cfg.prior_config()?;
    let spec = cfg.method_spec()?;
    let motion = cfg.motion_config()?;

    let start = Instant::now();
    let basis = build_projection(n_x, n_y, &prior)?;
    let problem = Problem { h: &ops, y: &y, basis: &basis, truth: Some(&truth) };
    let ws = Workspace::new();
    let rec = run_emirkfs(&problem, &spec, &motion, &ws)?;
    let seconds = start.elapsed().as_secs_f64();

    for it in &rec.iterations {
        let dir = out.join(format!("iter_{:02}", it.iteration));
        for (i, x) in it.x_sm.iter().enumerate() {
            let name = frame_name(i);
            write_frame(&dir, &name, &[n_x, n_y], i, x)?;
            if pgm {
                write_pgm(&dir.join(format!("{name}.pgm")), n_x, n_y, x)?;
            }
        }
    }
    let metrics_path = out.join(METRICS);
    let mut w = csv::Writer::from_path(&metrics_path).map_err(|e| CliError::Io(format!("{}: {e}", metrics_path.display())))?;
    for row in metric_rows(&rec) {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&metrics_path, e))?;

    let summary = RunSummary {
        method: rec.method.clone(),
        n_x,
        n_y,
        t,
        r: prior.r,
        seconds,
        peak_bytes: rec.peak_bytes,
        iterations: rec
            .iterations
            .iter()
            .map(|it| IterationSummary {
                iteration: it.iteration,
                mean_rre: it.mean_rre,
                seconds: it.phases.iter().map(|p| p.seconds).sum(),
                peak_bytes: it.phases.iter().map(|p| p.peak_bytes).max().unwrap_or(0),
            })
            .collect(),
    };
    let path = out.join(SUMMARY);
    fs::write(&path, toml::to_string(&summary).expect("summary serialises")).map_err(|e| io_err(&path, e))?;
    info!("{}: {:.1}s, results in {}", rec.method, seconds, out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub run: String,
    pub method: String,
    pub iteration: usize,
    pub mean_rre: Option<f64>,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct PlotRow<'a> {
    run: &'a str,
    method: &'a str,
    iteration: usize,
    timestep: usize,
    rre: f64,
}

fn read_summary(run: &Path) -> Result<RunSummary, CliError> {
    let path = run.join(SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_metrics(run: &Path) -> Result<Vec<MetricRow>, CliError> {
    let path = run.join(METRICS);
    let mut r = csv::Reader::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<MetricRow>, _>>()
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Comparison table over runs, sorted by mean RRE ascending.
pub fn evaluate_table(runs: &[PathBuf]) -> Result<Vec<TableRow>, CliError> {
    let summaries = runs.iter().map(|r| read_summary(r)).collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = summaries.first() {
        for (s, run) in summaries.iter().zip(runs).skip(1) {
            if (s.n_x, s.n_y, s.t) != (first.n_x, first.n_y, first.t) {
                return Err(CliError::Config(format!(
                    "runs have incompatible geometries: {} is {}x{} with T = {}, {} is {}x{} with T = {}",
                    runs[0].display(),
                    first.n_x,
                    first.n_y,
                    first.t,
                    run.display(),
                    s.n_x,
                    s.n_y,
                    s.t
                )));
            }
        }
    }
    let mut rows: Vec<TableRow> = summaries
        .iter()
        .zip(runs)
        .flat_map(|(s, run)| {
            s.iterations.iter().map(move |it| TableRow {
                run: run.display().to_string(),
                method: s.method.clone(),
                iteration: it.iteration,
                mean_rre: it.mean_rre,
                seconds: it.seconds,
                peak_bytes: it.peak_bytes,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &TableRow| r.mean_rre.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    Ok(rows)
}

pub fn evaluate(runs: &[PathBuf], out: Option<PathBuf>, plot_dir: Option<PathBuf>) -> Result<(), CliError> {
    let rows = evaluate_table(runs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let table = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)
        .expect("csv output is utf-8");
    match out {
        Some(path) => fs::write(&path, &table).map_err(|e| io_err(&path, e))?,
        None => print!("{table}"),
    }
    if let Some(dir) = plot_dir {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join("rre_by_timestep.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        for run in runs {
            let name = run.display().to_string();
            for m in read_metrics(run)? {
                if let (Some(timestep), Some(rre)) = (m.timestep, m.rre) {
                    w.serialize(PlotRow { run: &name, method: &m.method, iteration: m.iteration, timestep, rre })
                        .map_err(|e| CliError::Io(e.to_string()))?;
                }
            }
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
