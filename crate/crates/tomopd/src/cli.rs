//! Subcommands. Every command is a function of its resolved configuration
//! and seed; wall-clock timings are recorded only with `--timing`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tomopd_core::phantom::{add_poisson_noise, analytic_sinogram, rasterize, PhantomSpec};
use tomopd_core::problems::{
    build_dtv_auto, data_operator, dtv_theta, fbp_first_iterate, solve_lsq_tik, two_stage_pipeline, ProblemError,
    TwoStageConfig,
};
use tomopd_core::tomo::make_hanning_sqrt_filter;
use tomopd_core::{
    solve, Clock, ConvergenceLog, GridSpec, ImageGrid, NullClock, ScanGeometry, Sinogram, SolveError, SolveOptions,
};

use crate::config::{ConfigError, Method, RunConfig, SweepAxis, SweepConfig};
use crate::io::{self, Dtype, IoError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output: {0}")]
    Output(#[from] IoError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Output(_) => EXIT_IO,
        }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        match e {
            ProblemError::Config(m) => CliError::Input(m),
            ProblemError::Geometry(g) => CliError::Input(g.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "tomopd", version, about = "Limited-angle tomography with stacked primal-dual optimisation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Record wall-clock time in convergence logs (makes them non-reproducible).
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Args, Default)]
pub struct SolverFlags {
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Overrides `dtv.epsilon`.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Overrides `noise.fluence`.
    #[arg(long)]
    pub fluence: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize the phantom and write its (optionally noisy) analytic sinogram.
    Phantom(SolverFlags),
    /// Reconstruct from measured or simulated data.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[command(flatten)]
        flags: SolverFlags,
    },
    /// One DTV solve per value of a step parameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<SweepAxis>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[command(flatten)]
        flags: SolverFlags,
    },
    /// Directional total variation of a 2D volume over a list of angles.
    DtvTheta {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Degrees; defaults to `thetas` from the configuration.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        thetas: Option<Vec<f64>>,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Phantom(flags) => {
            let cfg = resolve(g, None, flags)?;
            cmd_phantom(&cfg)
        }
        Command::Reconstruct { method, flags } => {
            let cfg = resolve(g, *method, flags)?;
            cmd_reconstruct(&cfg, g.timing)
        }
        Command::Sweep { axis, values, flags } => {
            let mut cfg = resolve(g, None, flags)?;
            match (axis, values) {
                (Some(a), Some(v)) => cfg.sweep = Some(SweepConfig { axis: *a, values: v.clone() }),
                (None, None) => {}
                _ => return Err(ConfigError::Invalid("--axis and --values go together".into()).into()),
            }
            cfg.validate()?;
            cmd_sweep(&cfg, g.threads, g.timing)
        }
        Command::DtvTheta { volume, reference, thetas } => {
            let from_cfg = match &g.config {
                Some(p) => Some(RunConfig::load(p)?),
                None => None,
            };
            let thetas = thetas
                .clone()
                .or_else(|| from_cfg.as_ref().map(|c| c.thetas.clone()))
                .unwrap_or_else(|| (-5..=5).map(|k| 5.0 * k as f64).collect());
            let out = g.out.clone().or_else(|| from_cfg.map(|c| c.out)).unwrap_or_else(|| PathBuf::from("out"));
            cmd_dtv_theta(volume, reference.as_deref(), &thetas, &out)
        }
    }
}

/// Loads the configuration file and applies flag overrides.
fn resolve(g: &GlobalArgs, method: Option<Method>, flags: &SolverFlags) -> Result<RunConfig, CliError> {
    let path = g.config.as_ref().ok_or_else(|| ConfigError::Invalid("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(n) = flags.n_iter {
        cfg.n_iter = n;
    }
    if let Some(b) = flags.beta {
        cfg.steps.beta = b;
    }
    if let Some(v) = flags.gamma {
        cfg.steps.gamma = v;
    }
    if let Some(r) = flags.rho {
        cfg.steps.rho = r;
    }
    if let Some(e) = flags.epsilon {
        cfg.dtv.as_mut().ok_or_else(|| ConfigError::Invalid("--epsilon needs a `dtv` section".into()))?.epsilon = e;
    }
    if let Some(f) = flags.fluence {
        cfg.noise = Some(crate::config::NoiseConfig { fluence: f });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Fs { path: dir.to_path_buf(), source })?;
    io::write_json(&dir.join("config.resolved.json"), cfg)?;
    Ok(())
}

fn preview(img: &ImageGrid, window: [f64; 2], path: &Path) -> Result<(), CliError> {
    let slice = img.spec.is_3d().then(|| img.spec.ny() / 2);
    io::export_png(img, window, slice, path)?;
    Ok(())
}

fn phantom_spec(cfg: &RunConfig) -> Result<Option<PhantomSpec>, CliError> {
    Ok(match &cfg.phantom {
        Some(p) => Some(p.resolve()?),
        None => None,
    })
}

fn simulate(cfg: &RunConfig, ph: &PhantomSpec, geom: &ScanGeometry) -> Result<(Sinogram, Option<Sinogram>), CliError> {
    let clean = analytic_sinogram(ph, geom).map_err(input_err)?;
    match &cfg.noise {
        Some(n) => {
            let noisy = add_poisson_noise(&clean, n.fluence, cfg.seed).map_err(input_err)?;
            Ok((noisy, Some(clean)))
        }
        None => Ok((clean, None)),
    }
}

pub fn cmd_phantom(cfg: &RunConfig) -> Result<(), CliError> {
    let ph = phantom_spec(cfg)?.ok_or_else(|| ConfigError::Invalid("the phantom command needs a `phantom` section".into()))?;
    if ph.shapes.is_empty() {
        eprintln!("warning: phantom has no shapes; nothing written");
        return Ok(());
    }
    let geom = cfg.scan_geometry()?;
    geom.check_grid(&cfg.grid).map_err(input_err)?;
    prepare_out(&cfg.out, cfg)?;
    let supersample = cfg.phantom.as_ref().map_or(1, |p| p.supersample);
    let img = rasterize(&ph, &cfg.grid, supersample).map_err(input_err)?;
    io::write_volume(&cfg.out.join("phantom.vol"), &img, Dtype::F64)?;
    preview(&img, cfg.window, &cfg.out.join("phantom.png"))?;
    let (sino, clean) = simulate(cfg, &ph, &geom)?;
    io::write_sinogram(&cfg.out.join("sino.vol"), &sino, Dtype::F64)?;
    if let Some(c) = clean {
        io::write_sinogram(&cfg.out.join("sino_clean.vol"), &c, Dtype::F64)?;
    }
    Ok(())
}

/// Measured or simulated data plus the phantom for reference images.
struct Prepared {
    geom: ScanGeometry,
    g: Sinogram,
    phantom: Option<PhantomSpec>,
    supersample: usize,
    truth_file: Option<ImageGrid>,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let phantom = phantom_spec(cfg)?;
        let (geom, g) = match &cfg.data {
            Some(p) => {
                let s = io::read_sinogram(p).map_err(input_err)?;
                (s.geometry.clone(), s)
            }
            None => {
                let ph = phantom.as_ref().ok_or_else(|| ConfigError::Invalid("give `data` or `phantom`".into()))?;
                let geom = cfg.scan_geometry()?;
                let (g, _) = simulate(cfg, ph, &geom)?;
                (geom, g)
            }
        };
        let truth_file = match &cfg.truth {
            Some(p) => Some(io::read_volume(p).map_err(input_err)?),
            None => None,
        };
        let supersample = cfg.phantom.as_ref().map_or(1, |p| p.supersample);
        Ok(Self { geom, g, phantom, supersample, truth_file })
    }

    /// Reference image on `grid`, if one is available.
    fn truth_on(&self, grid: &GridSpec) -> Result<Option<ImageGrid>, CliError> {
        if let Some(t) = &self.truth_file {
            return Ok((&t.spec == grid).then(|| t.clone()));
        }
        match &self.phantom {
            Some(ph) => Ok(Some(rasterize(ph, grid, self.supersample).map_err(input_err)?)),
            None => Ok(None),
        }
    }
}

/// Clock backed by `Instant`, used only with `--timing`.
struct WallClock(Instant);

impl Clock for WallClock {
    fn elapsed_seconds(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn clock(timing: bool) -> Box<dyn Clock> {
    if timing {
        Box::new(WallClock(Instant::now()))
    } else {
        Box::new(NullClock)
    }
}

fn solve_options(cfg: &RunConfig) -> SolveOptions {
    SolveOptions { n_iter: cfg.n_iter, log_every: cfg.log_every, data_rmse_target: cfg.data_rmse_target, power: cfg.power }
}

/// `‖R(X f - g)‖₂ / √m`, the unblurred filtered data RMSE.
fn filtered_rmse(geom: &ScanGeometry, f: &ImageGrid, g: &Sinogram, cutoff: f64) -> Result<f64, CliError> {
    let a = data_operator(geom, &f.spec, cutoff, None)?;
    let r = make_hanning_sqrt_filter(geom, cutoff).map_err(input_err)?;
    let af = a.apply(&f.values).map_err(|e| CliError::Numerical(e.to_string()))?;
    let rg = r.apply(&g.values).map_err(|e| CliError::Numerical(e.to_string()))?;
    let ss: f64 = af.iter().zip(&rg).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / af.len() as f64).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_data_rmse: f64,
    pub iterations: usize,
    pub iterations_to_target: Option<usize>,
}

fn write_diverged(dir: &Path, e: &SolveError) -> Result<(), CliError> {
    if let SolveError::Diverged { log, iteration, location } = e {
        io::write_log(&dir.join("log.csv"), log)?;
        io::write_json(
            &dir.join("metrics.json"),
            &json!({"status": "diverged", "iteration": iteration, "location": location.to_string()}),
        )?;
    }
    Ok(())
}

fn map_solve(dir: &Path, e: ProblemError) -> CliError {
    if let ProblemError::Solve(s) = &e {
        if let Err(w) = write_diverged(dir, s) {
            return w;
        }
    }
    e.into()
}

fn run_dtv(cfg: &RunConfig, data: &Prepared, dir: &Path, timing: bool) -> Result<RunSummary, CliError> {
    let dtv = cfg.dtv_config()?;
    let problem = build_dtv_auto(&data.geom, &cfg.grid, &data.g, dtv, &cfg.power)?;
    let truth = data.truth_on(&cfg.grid)?;
    let mut clk = clock(timing);
    let out = solve(&problem.problem, &cfg.steps, &solve_options(cfg), truth.as_ref().map(|t| &t.values[..]), clk.as_mut())
        .map_err(|e| map_solve(dir, ProblemError::Solve(e)))?;
    let img = ImageGrid::new(cfg.grid.clone(), out.state.x).map_err(input_err)?;
    io::write_volume(&dir.join("recon.vol"), &img, Dtype::F64)?;
    preview(&img, cfg.window, &dir.join("recon.png"))?;
    io::write_log(&dir.join("log.csv"), &out.log)?;
    let last = out.log.last().copied();
    let target = cfg.data_rmse_target.unwrap_or(dtv.epsilon);
    let summary = RunSummary {
        final_data_rmse: last.map_or(f64::NAN, |s| s.data_rmse),
        iterations: last.map_or(0, |s| s.iter),
        iterations_to_target: out.log.first_below(target),
    };
    let image_rmse = truth.as_ref().map(|t| img.rmse(t));
    io::write_json(
        &dir.join("metrics.json"),
        &json!({
            "status": "ok",
            "method": "dtv",
            "data_rmse": summary.final_data_rmse,
            "image_rmse": image_rmse,
            "iterations": summary.iterations,
            "iterations_to_target": summary.iterations_to_target,
            "penalty": problem.penalty(&img.values),
            "tau": out.steps.tau,
            "sigma": out.steps.sigma,
            "nu": out.steps.nu,
        }),
    )?;
    Ok(summary)
}

pub fn cmd_reconstruct(cfg: &RunConfig, timing: bool) -> Result<(), CliError> {
    let data = Prepared::load(cfg)?;
    data.geom.check_grid(&cfg.grid).map_err(input_err)?;
    let dir = &cfg.out;
    prepare_out(dir, cfg)?;
    match cfg.method {
        Method::Dtv => run_dtv(cfg, &data, dir, timing).map(|_| ()),
        Method::LsqTik => {
            let res = solve_lsq_tik(&data.geom, &cfg.grid, &data.g, &cfg.lsq_tik, &cfg.power)?;
            io::write_volume(&dir.join("recon.vol"), &res.image, Dtype::F64)?;
            preview(&res.image, cfg.window, &dir.join("recon.png"))?;
            let truth = data.truth_on(&cfg.grid)?;
            io::write_json(
                &dir.join("metrics.json"),
                &json!({
                    "status": "ok",
                    "method": "lsq-tik",
                    "alpha": res.alpha,
                    "discrepancy": res.discrepancy,
                    "cg_iterations": res.cg_iterations,
                    "data_rmse": filtered_rmse(&data.geom, &res.image, &data.g, cfg.gd.cutoff)?,
                    "image_rmse": truth.map(|t| res.image.rmse(&t)),
                }),
            )?;
            Ok(())
        }
        Method::GdFirstIterate => {
            let (img, step) = fbp_first_iterate(&data.geom, &cfg.grid, &data.g, cfg.gd.cutoff, cfg.gd.step, &cfg.power)?;
            io::write_volume(&dir.join("recon.vol"), &img, Dtype::F64)?;
            preview(&img, cfg.window, &dir.join("recon.png"))?;
            let truth = data.truth_on(&cfg.grid)?;
            io::write_json(
                &dir.join("metrics.json"),
                &json!({
                    "status": "ok",
                    "method": "gd-first-iterate",
                    "step": step,
                    "data_rmse": filtered_rmse(&data.geom, &img, &data.g, cfg.gd.cutoff)?,
                    "image_rmse": truth.map(|t| img.rmse(&t)),
                }),
            )?;
            Ok(())
        }
        Method::TwoStage => {
            let ts = cfg
                .two_stage
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("method two-stage needs a `two_stage` section".into()))?;
            let tcfg = TwoStageConfig {
                low_grid: cfg.grid.clone(),
                dtv: cfg.dtv_config()?.clone(),
                steps: cfg.steps,
                n_iter: cfg.n_iter,
                factors: ts.factors.clone(),
                high: ts.high.clone(),
            };
            let out = two_stage_pipeline(&data.geom, &data.g, &tcfg, &solve_options(cfg)).map_err(|e| map_solve(dir, e))?;
            io::write_volume(&dir.join("low.vol"), &out.low, Dtype::F64)?;
            io::write_volume(&dir.join("prior.vol"), &out.prior, Dtype::F64)?;
            io::write_volume(&dir.join("high.vol"), &out.high, Dtype::F64)?;
            preview(&out.high, cfg.window, &dir.join("high.png"))?;
            io::write_log(&dir.join("log.csv"), &out.low_log)?;
            let truth_high = data.truth_on(&out.high.spec)?;
            io::write_json(
                &dir.join("metrics.json"),
                &json!({
                    "status": "ok",
                    "method": "two-stage",
                    "low_data_rmse": out.low_log.last().map(|s| s.data_rmse),
                    "image_rmse": truth_high.map(|t| out.high.rmse(&t)),
                }),
            )?;
            Ok(())
        }
    }
}

fn sweep_dir(out: &Path, axis: SweepAxis, i: usize) -> PathBuf {
    let name = match axis {
        SweepAxis::Beta => "beta",
        SweepAxis::Gamma => "gamma",
        SweepAxis::Rho => "rho",
    };
    out.join(format!("{name}_{i:03}"))
}

pub fn cmd_sweep(cfg: &RunConfig, threads: usize, timing: bool) -> Result<(), CliError> {
    let sweep = cfg.sweep.clone().ok_or_else(|| ConfigError::Invalid("sweep needs --axis/--values or a `sweep` section".into()))?;
    if cfg.method != Method::Dtv {
        return Err(ConfigError::Invalid("sweeps run the dtv method".into()).into());
    }
    cfg.dtv_config()?;
    let data = Prepared::load(cfg)?;
    data.geom.check_grid(&cfg.grid).map_err(input_err)?;
    prepare_out(&cfg.out, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunSummary, CliError>> = pool.install(|| {
        sweep
            .values
            .par_iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut run = cfg.clone();
                match sweep.axis {
                    SweepAxis::Beta => run.steps.beta = v,
                    SweepAxis::Gamma => run.steps.gamma = v,
                    SweepAxis::Rho => run.steps.rho = v,
                }
                run.sweep = None;
                run.out = sweep_dir(&cfg.out, sweep.axis, i);
                run.validate()?;
                prepare_out(&run.out, &run)?;
                run_dtv(&run, &data, &run.out, timing)
            })
            .collect()
    });
    let path = cfg.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| IoError::Csv { path: path.clone(), source })?;
    let csv_err = |source| IoError::Csv { path: path.clone(), source };
    w.write_record(["value", "final_data_rmse", "iterations_to_target", "status"]).map_err(csv_err)?;
    let mut failed = 0;
    for (v, r) in sweep.values.iter().zip(&results) {
        let row = match r {
            Ok(s) => [
                io::fmt_f64(*v),
                io::fmt_f64(s.final_data_rmse),
                s.iterations_to_target.map_or(String::new(), |n| n.to_string()),
                "ok".to_string(),
            ],
            Err(e) => {
                failed += 1;
                eprintln!("warning: sweep value {v}: {e}");
                [io::fmt_f64(*v), io::fmt_f64(f64::NAN), String::new(), format!("error: {e}")]
            }
        };
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::Fs { path: path.clone(), source })?;
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} sweep runs failed", sweep.values.len())));
    }
    Ok(())
}

pub fn cmd_dtv_theta(volume: &Path, reference: Option<&Path>, thetas: &[f64], out: &Path) -> Result<(), CliError> {
    if thetas.is_empty() {
        return Err(ConfigError::Invalid("no angles given".into()).into());
    }
    let load = |p: &Path| -> Result<ImageGrid, CliError> {
        let img = io::read_volume(p).map_err(input_err)?;
        if img.spec.is_3d() {
            return Err(CliError::Input(format!("{}: dtv-theta needs a 2D volume", p.display())));
        }
        Ok(img)
    };
    let img = load(volume)?;
    let refimg = reference.map(load).transpose()?;
    fs::create_dir_all(out).map_err(|source| IoError::Fs { path: out.to_path_buf(), source })?;
    let path = out.join("dtv_theta.csv");
    let csv_err = |source| IoError::Csv { path: path.clone(), source };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut header = vec!["theta", "dtv"];
    if refimg.is_some() {
        header.push("dtv_reference");
    }
    w.write_record(&header).map_err(csv_err)?;
    for &t in thetas {
        let mut row = vec![io::fmt_f64(t), io::fmt_f64(dtv_theta(&img, t)?)];
        if let Some(r) = &refimg {
            row.push(io::fmt_f64(dtv_theta(r, t)?));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| IoError::Fs { path: path.clone(), source })?;
    Ok(())
}

/// Convergence log of a finished run directory.
pub fn read_run_log(dir: &Path) -> Result<ConvergenceLog, IoError> {
    io::read_log(&dir.join("log.csv"))
}
