//! Experiment runner: one subcommand per solver or verifier, CSV for arrays,
//! JSON for reports.
//!
//! Exit codes: 0 success, 2 validation or usage error, 3 non-convergence,
//! 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mfgcn::assumptions::{audit, DEFAULT_CLOUD_SIZE, DEFAULT_TRIALS};
use mfgcn::continuation::{probe_delta, solve_continuation, ContinuationConfig, Drivers, OperatorSpec};
use mfgcn::decoupling::{
    decoupling_function, tables_along_equilibrium, verify_decoupling, verify_semigroup, x_grid, U_GRID_POINTS,
};
use mfgcn::io::{config_hash, load_model, write_csv, write_json, LoadedModel, Provenance};
use mfgcn::mfg::{prepare, solve_individual_with, solve_mfg_with};
use mfgcn::oracle::{analytic_feedback, solve_riccati, LqSpec};
use mfgcn::simulate::{InitialCloud, StateField};
use mfgcn::{w2, EmpiricalMeasure1D, Error, InitialLaw, SolverConfig, TimeGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Environment variable overriding the default seed.
pub const SEED_ENV: &str = "MFGCN_SEED";

#[derive(Parser, Debug)]
#[command(name = "mfgcn", version, about = "Mean-field games with common noise: solvers and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the game by damped Picard iteration.
    SolveMfg(RunArgs),
    /// Solve the control problem of one player against the equilibrium flow.
    SolveIndividual {
        #[command(flatten)]
        run: RunArgs,
        /// Deterministic initial state of the player.
        #[arg(long)]
        x0: f64,
    },
    /// Audit the structural conditions on the model.
    CheckAssumptions {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_CLOUD_SIZE)]
        cloud_size: usize,
        #[arg(long, env = SEED_ENV, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate U(s, x, m) with m the initial law.
    Decoupling {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        /// Number of x grid points over mean +/- 3 std of m.
        #[arg(long, default_value_t = U_GRID_POINTS)]
        points: usize,
    },
    /// Check the semigroup or decoupling property.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        u: f64,
        /// Steps checked by the decoupling verifier.
        #[arg(long, value_delimiter = ',', default_value = "10,25,40")]
        steps: Vec<usize>,
        /// Common paths checked by the decoupling verifier.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        paths: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        points: usize,
    },
    /// Run the homotopy solver.
    Continuation {
        #[command(flatten)]
        run: RunArgs,
        /// Number of homotopy levels; the step is its reciprocal.
        #[arg(long, default_value_t = 8)]
        schedule: usize,
        /// Also measure the contraction factor for several steps.
        #[arg(long)]
        probe: bool,
    },
    /// Integrate the Riccati benchmark of an LQ model.
    Riccati {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = parse_grid)]
        grid: (f64, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare initial adjoints of two solvers on identical noise.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        a: Solver,
        #[arg(long, value_enum)]
        b: Solver,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// Horizon and number of steps, `T,N`.
    #[arg(long, value_parser = parse_grid, default_value = "1,50")]
    grid: (f64, usize),
    /// Common paths and particles per path, `K,M`.
    #[arg(long, value_parser = parse_pair, default_value = "64,512")]
    particles: (usize, usize),
    #[arg(long, env = SEED_ENV, default_value_t = 42)]
    seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Initial law, `gaussian:MEAN,VAR` or `constant:X`; overrides the model file.
    #[arg(long, value_parser = parse_initial)]
    initial: Option<InitialLaw>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    Semigroup,
    Decoupling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Solver {
    Picard,
    Continuation,
    Oracle,
}

fn parse_grid(s: &str) -> Result<(f64, usize), String> {
    let (t, n) = s.split_once(',').ok_or("expected T,N")?;
    let t: f64 = t.trim().parse().map_err(|e| format!("T: {e}"))?;
    let n: usize = n.trim().parse().map_err(|e| format!("N: {e}"))?;
    Ok((t, n))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (k, m) = s.split_once(',').ok_or("expected K,M")?;
    Ok((
        k.trim().parse().map_err(|e| format!("K: {e}"))?,
        m.trim().parse().map_err(|e| format!("M: {e}"))?,
    ))
}

fn parse_initial(s: &str) -> Result<InitialLaw, String> {
    let (kind, rest) = s.split_once(':').ok_or("expected gaussian:MEAN,VAR or constant:X")?;
    match kind {
        "gaussian" => {
            let (m, v) = rest.split_once(',').ok_or("expected gaussian:MEAN,VAR")?;
            Ok(InitialLaw::Gaussian {
                mean: m.trim().parse().map_err(|e| format!("mean: {e}"))?,
                variance: v.trim().parse().map_err(|e| format!("variance: {e}"))?,
            })
        }
        "constant" => Ok(InitialLaw::Constant {
            value: rest.trim().parse().map_err(|e| format!("value: {e}"))?,
        }),
        other => Err(format!("unknown initial law `{other}`")),
    }
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::NonConvergence(_) => EXIT_NON_CONVERGENCE,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn not_converged(what: &str) -> Failure {
    Failure {
        code: EXIT_NON_CONVERGENCE,
        message: format!("{what} did not converge; results were written"),
    }
}

type Outcome = Result<String, Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::SolveMfg(run) => solve_mfg_cmd(&run),
        Command::SolveIndividual { run, x0 } => solve_individual_cmd(&run, x0),
        Command::CheckAssumptions {
            model,
            trials,
            cloud_size,
            seed,
            out,
        } => check_assumptions_cmd(&model, trials, cloud_size, seed, &out),
        Command::Decoupling { run, s, points } => decoupling_cmd(&run, s, points),
        Command::Verify {
            run,
            which,
            s,
            t,
            u,
            steps,
            paths,
            points,
        } => match which {
            Which::Semigroup => semigroup_cmd(&run, s, t, u),
            Which::Decoupling => verify_decoupling_cmd(&run, &steps, &paths, points),
        },
        Command::Continuation { run, schedule, probe } => continuation_cmd(&run, schedule, probe),
        Command::Riccati { model, grid, out } => riccati_cmd(&model, grid, &out),
        Command::Compare { run, a, b } => compare_cmd(&run, a, b),
    }
}

/// Everything a solver subcommand needs, resolved from the arguments.
struct Setup {
    model: LoadedModel,
    grid: TimeGrid,
    xi: InitialLaw,
    config: SolverConfig,
}

impl Setup {
    fn new(run: &RunArgs) -> Result<Self, Failure> {
        let model = load_model(&run.model)?;
        let (t, n) = run.grid;
        if (t - model.spec.horizon).abs() > 1e-12 * model.spec.horizon.max(1.0) {
            return Err(Error::Validation(vec![format!(
                "grid horizon {t} differs from the model horizon {}",
                model.spec.horizon
            )])
            .into());
        }
        let grid = TimeGrid::new(0.0, t, n)?;
        let xi = match (&run.initial, model.initial()) {
            (Some(law), _) => law.clone(),
            (None, Some(law)) => law.clone(),
            (None, None) => {
                return Err(Error::Validation(vec![
                    "no initial law: add `initial` to the model file or pass --initial".into(),
                ])
                .into())
            }
        };
        xi.validate()?;
        let config = SolverConfig {
            k: run.particles.0,
            m: run.particles.1,
            seed: run.seed,
            threads: run.threads,
            ..Default::default()
        };
        config.validate()?;
        Ok(Self {
            model,
            grid,
            xi,
            config,
        })
    }

    /// Thread count is left out of the digest: results do not depend on it.
    fn provenance(&self, extra: serde_json::Value) -> Result<Provenance, Failure> {
        let solver = SolverConfig {
            threads: None,
            ..self.config.clone()
        };
        let cfg = json!({
            "model": self.model.file,
            "grid": [self.grid.horizon, self.grid.n],
            "initial": self.xi,
            "solver": solver,
            "extra": extra,
        });
        Ok(Provenance::new(self.config.seed, &cfg)?)
    }

    /// The initial law realized as one reference cloud of size M.
    fn reference_measure(&self) -> Result<EmpiricalMeasure1D, Failure> {
        let cloud = self.xi.sample(1, self.config.m, self.config.initial_seed())?;
        Ok(EmpiricalMeasure1D::new(cloud.path(0).to_vec())?)
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn solve_mfg_cmd(run: &RunArgs) -> Outcome {
    let setup = Setup::new(run)?;
    let sol = setup.config.install(|| {
        let (noise, initial) = prepare(&setup.grid, &setup.xi, &setup.config)?;
        solve_mfg_with(&setup.model.spec, noise, initial, &setup.config, None)
    })??;
    fs::create_dir_all(&run.out).map_err(Error::from)?;
    let prov = setup.provenance(json!(null))?;

    let mut policy_rows = Vec::new();
    let (k, n) = (sol.policy.k(), sol.policy.n());
    for kappa in 0..k {
        for j in 0..=n {
            let s = sol.policy.slice(kappa, j);
            for c in 0..s.y.len() {
                policy_rows.push(vec![
                    kappa as f64,
                    j as f64,
                    c as f64,
                    s.y[c],
                    s.z.get(c).copied().unwrap_or(0.0),
                    s.zt.get(c).copied().unwrap_or(0.0),
                    s.center,
                    s.scale,
                    s.residual,
                ]);
            }
        }
    }
    write_csv(
        &run.out.join("policy.csv"),
        &["kappa", "step", "coeff_index", "beta_Y", "beta_Z", "beta_Zt", "center", "scale", "residual"],
        &policy_rows,
        &prov,
    )?;

    let mut flow_rows = Vec::new();
    for kappa in 0..k {
        let m0 = sol.flow.at(kappa, 0);
        for j in 0..=n {
            let m = sol.flow.at(kappa, j);
            flow_rows.push(vec![kappa as f64, j as f64, m.mean(), m.second_moment(), w2(m, m0)]);
        }
    }
    write_csv(
        &run.out.join("flow.csv"),
        &["kappa", "step", "mean", "second_moment", "w2_to_initial"],
        &flow_rows,
        &prov,
    )?;
    write_json(&run.out.join("report.json"), &sol.report)?;

    if !sol.report.converged {
        return Err(not_converged("Picard iteration"));
    }
    Ok(format!(
        "solve-mfg: converged in {} iterations, mean Y0 {:.6}, wrote {}",
        sol.report.outer_iters,
        sol.report.y0.mean,
        run.out.display()
    ))
}

fn solve_individual_cmd(run: &RunArgs, x0: f64) -> Outcome {
    let setup = Setup::new(run)?;
    let cfg = &setup.config;
    let (eq, ind) = cfg.install(|| -> mfgcn::Result<_> {
        let (noise, initial) = prepare(&setup.grid, &setup.xi, cfg)?;
        let eq = solve_mfg_with(&setup.model.spec, noise, initial, cfg, None)?;
        let start = InitialCloud::Shared(vec![x0; cfg.m]);
        let ind = solve_individual_with(&setup.model.spec, &eq.flow, &eq.noise, &start, cfg, None)?;
        Ok((eq, ind))
    })??;
    let (_, states, report) = ind;
    ensure_parent(&run.out)?;
    let mut rows = Vec::new();
    for kappa in 0..states.k() {
        for j in 0..=states.n() {
            let ys = states.y_slice(kappa, j);
            rows.push(vec![
                kappa as f64,
                j as f64,
                states.path_mean(kappa, j),
                ys.iter().sum::<f64>() / ys.len() as f64,
            ]);
        }
    }
    let prov = setup.provenance(json!({ "x0": x0 }))?;
    write_csv(&run.out, &["kappa", "step", "mean_x", "mean_y"], &rows, &prov)?;
    if !(eq.report.converged && report.converged) {
        return Err(not_converged("equilibrium or individual solve"));
    }
    let y0 = (0..states.k()).map(|k| states.y(k, 0, 0)).sum::<f64>() / states.k() as f64;
    Ok(format!(
        "solve-individual: Y0({x0}) = {y0:.6} after {} iterations, wrote {}",
        report.outer_iters,
        run.out.display()
    ))
}

fn check_assumptions_cmd(model: &Path, trials: usize, cloud_size: usize, seed: u64, out: &Path) -> Outcome {
    let loaded = load_model(model)?;
    let reports = audit(&loaded.spec, trials, cloud_size, seed)?;
    ensure_parent(out)?;
    write_json(out, &reports)?;
    let line: Vec<String> = reports
        .iter()
        .map(|r| format!("{:?}={}", r.condition_id, if r.pass { "pass" } else { "FAIL" }))
        .collect();
    Ok(format!("check-assumptions: {}", line.join(" ")))
}

fn decoupling_cmd(run: &RunArgs, s: f64, points: usize) -> Outcome {
    let setup = Setup::new(run)?;
    let m = setup.reference_measure()?;
    let xs = x_grid(&m, points);
    let table = decoupling_function(&setup.model.spec, &setup.grid, s, Some(&xs), &m, &setup.config)?;
    ensure_parent(&run.out)?;
    let rows: Vec<Vec<f64>> = (0..table.x.len())
        .map(|i| vec![s, table.x[i], table.u[i], table.kappa_spread[i]])
        .collect();
    let prov = setup.provenance(json!({ "s": s, "points": points }))?;
    write_csv(&run.out, &["s", "x", "U", "kappa_spread"], &rows, &prov)?;
    if !table.converged {
        return Err(not_converged("decoupling solves"));
    }
    Ok(format!(
        "decoupling: {} points at s={s}, monotonicity margin {:.4}, flagged {}, wrote {}",
        table.x.len(),
        table.monotonicity_margin(),
        table.flagged,
        run.out.display()
    ))
}

fn semigroup_cmd(run: &RunArgs, s: f64, t: f64, u: f64) -> Outcome {
    let setup = Setup::new(run)?;
    let m = setup.reference_measure()?;
    let rep = verify_semigroup(&setup.model.spec, &setup.grid, s, t, u, &m, &setup.config)?;
    ensure_parent(&run.out)?;
    write_json(&run.out, &rep)?;
    if !rep.converged {
        return Err(not_converged("semigroup solves"));
    }
    Ok(format!(
        "verify semigroup: residual {:.5}, baseline {:.5}, pass {}",
        rep.residual, rep.baseline, rep.pass
    ))
}

fn verify_decoupling_cmd(run: &RunArgs, steps: &[usize], paths: &[usize], points: usize) -> Outcome {
    let setup = Setup::new(run)?;
    let spec = &setup.model.spec;
    let cfg = &setup.config;
    if let Some(bad) = steps.iter().find(|&&j| j > setup.grid.n) {
        return Err(Error::Validation(vec![format!("step {bad} exceeds N = {}", setup.grid.n)]).into());
    }
    if let Some(bad) = paths.iter().find(|&&k| k >= cfg.k) {
        return Err(Error::Validation(vec![format!("path {bad} exceeds K - 1 = {}", cfg.k - 1)]).into());
    }
    let (eq, tables) = cfg.install(|| -> mfgcn::Result<_> {
        let (noise, initial) = prepare(&setup.grid, &setup.xi, cfg)?;
        let eq = solve_mfg_with(spec, noise, initial, cfg, None)?;
        let tables = tables_along_equilibrium(spec, &setup.grid, &eq, steps, paths, points, cfg)?;
        Ok((eq, tables))
    })??;
    let rep = verify_decoupling(&eq.states, &tables);
    let pass = rep.max_error <= 0.10;
    ensure_parent(&run.out)?;
    write_json(
        &run.out,
        &json!({
            "per_step": rep.per_step,
            "max_error": rep.max_error,
            "threshold": 0.10,
            "pass": pass,
        }),
    )?;
    if !eq.report.converged || tables.iter().any(|e| !e.table.converged) {
        return Err(not_converged("decoupling solves"));
    }
    Ok(format!("verify decoupling: max relative error {:.5}, pass {pass}", rep.max_error))
}

fn continuation_cmd(run: &RunArgs, schedule: usize, probe: bool) -> Outcome {
    if schedule == 0 {
        return Err(Error::Validation(vec!["--schedule must be at least 1".into()]).into());
    }
    let setup = Setup::new(run)?;
    let spec = &setup.model.spec;
    let delta = 1.0 / schedule as f64;
    let cc = ContinuationConfig {
        delta,
        delta_floor: ContinuationConfig::default().delta_floor.min(delta),
        degree: setup.config.degree,
        ..Default::default()
    };
    let ops = OperatorSpec::from_model(spec);
    let (res, table) = setup.config.install(|| -> mfgcn::Result<_> {
        let (noise, initial) = prepare(&setup.grid, &setup.xi, &setup.config)?;
        let res = solve_continuation(spec, &ops, &noise, &initial, &Drivers::default(), &cc)?;
        let table = if probe {
            Some(probe_delta(spec, &ops, &noise, &initial, &Drivers::default(), &cc)?)
        } else {
            None
        };
        Ok((res, table))
    })??;
    ensure_parent(&run.out)?;
    write_json(
        &run.out,
        &json!({
            "converged": res.converged,
            "final_alpha": res.final_alpha,
            "levels": res.log,
            "probe": table,
            "config_sha256": config_hash(&cc)?,
        }),
    )?;
    if !res.converged {
        return Err(not_converged("continuation"));
    }
    Ok(format!(
        "continuation: reached alpha=1 in {} levels, wrote {}",
        res.log.len(),
        run.out.display()
    ))
}

fn riccati_cmd(model: &Path, grid: (f64, usize), out: &Path) -> Outcome {
    let loaded = load_model(model)?;
    let lq = LqSpec::from_model(&loaded.spec)?;
    let g = TimeGrid::new(0.0, grid.0, grid.1)?;
    let sol = solve_riccati(&lq, &g)?;
    let rows: Vec<Vec<f64>> = (0..=g.n).map(|j| vec![sol.t[j], sol.p[j], sol.r[j]]).collect();
    let prov = Provenance::new(0, &json!({ "model": loaded.file, "grid": [grid.0, grid.1] }))?;
    ensure_parent(out)?;
    write_csv(out, &["t", "P", "R"], &rows, &prov)?;
    Ok(format!("riccati: P(0) = {:.6}, R(0) = {:.6}, wrote {}", sol.p[0], sol.r[0], out.display()))
}

fn compare_cmd(run: &RunArgs, a: Solver, b: Solver) -> Outcome {
    let setup = Setup::new(run)?;
    let spec = &setup.model.spec;
    let cfg = &setup.config;
    let (noise, initial) = prepare(&setup.grid, &setup.xi, cfg)?;
    let y0 = |which: Solver| -> Result<(Vec<f64>, bool), Failure> {
        match which {
            Solver::Picard => {
                let sol = cfg.install(|| solve_mfg_with(spec, noise.clone(), initial.clone(), cfg, None))??;
                Ok((sol.states.column(StateField::Y, 0), sol.report.converged))
            }
            Solver::Continuation => {
                let ops = OperatorSpec::from_model(spec);
                let res = cfg.install(|| {
                    solve_continuation(spec, &ops, &noise, &initial, &Drivers::default(), &ContinuationConfig::default())
                })??;
                Ok((res.states.column(StateField::Y, 0), res.converged))
            }
            Solver::Oracle => {
                let lq = LqSpec::from_model(spec)?;
                let sol = solve_riccati(&lq, &setup.grid)?;
                let mut out = Vec::with_capacity(cfg.k * cfg.m);
                for kappa in 0..cfg.k {
                    let xs = initial.path(kappa);
                    let mbar = xs.iter().sum::<f64>() / xs.len() as f64;
                    out.extend(xs.iter().map(|&x| analytic_feedback(&lq, &sol, 0, x, mbar).0));
                }
                Ok((out, true))
            }
        }
    };
    let (ya, ca) = y0(a)?;
    let (yb, cb) = y0(b)?;
    let rms = (ya.iter().map(|v| v * v).sum::<f64>() / ya.len() as f64).sqrt();
    let sup = ya.iter().zip(&yb).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let relative = if rms > 0.0 { sup / rms } else { sup };
    let pass = relative <= 1e-2;
    ensure_parent(&run.out)?;
    write_json(
        &run.out,
        &json!({
            "a": a,
            "b": b,
            "sup_abs_dy0": sup,
            "rms_y0": rms,
            "relative": relative,
            "threshold": 1e-2,
            "pass": pass,
            "converged": [ca, cb],
        }),
    )?;
    if !(ca && cb) {
        return Err(not_converged("one of the compared solvers"));
    }
    Ok(format!("compare {a:?} vs {b:?}: sup |dY0| = {sup:.3e} ({relative:.3e} of RMS), pass {pass}"))
}
