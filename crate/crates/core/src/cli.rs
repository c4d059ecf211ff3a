//! Command dispatch: turns a validated [`RunConfig`] into one CSV table and an
//! exit status.

use std::path::PathBuf;

use clap::Parser;

use crate::bounds::{assemble_observability_constant, interpolation_bound, kappa_alpha};
use crate::config::{parse_config, Command, FrequencyInitial, RunConfig};
use crate::error::{Error, Result};
use crate::exhaustion::{cost_sweep, interpolation_sweep, limit_control_check, wellposedness_sweep, SweepConfig};
use crate::heat::{assemble_laplacian, forward_solve, PotentialField};
use crate::hum::{estimate_observability_constant, solve_penalized_hum, ControlSystem};
use crate::report::{Cell, CsvTable};
use crate::semilinear::fixed_point_solve;
use crate::time_measure::{build_telescope, choose_density_anchor};
use crate::uc::{frequency_monotonicity_check, FrequencyParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "heatlab", version, about = "Null-control experiments for heat equations on expanding lattice domains")]
pub struct Cli {
    pub command: Command,
    /// JSON configuration document.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` on a dotted path, applied before validation. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Table produced by one command plus its exit status.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub table: CsvTable,
    pub exit_code: i32,
}

impl Outcome {
    fn finish(table: CsvTable, ok: bool) -> Self {
        Self { table, exit_code: if ok { EXIT_OK } else { EXIT_FAILURE } }
    }

    /// Single `status,message` row describing an error.
    pub fn failure(e: &Error) -> Self {
        let mut table = CsvTable::new(&["status", "message"]);
        table.push(vec![status_of(e).into(), e.to_string().into()]);
        let exit_code = match e {
            Error::InvalidConfig(_) | Error::Parse { .. } => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { table, exit_code }
    }
}

fn status_of(e: &Error) -> &'static str {
    match e {
        Error::Unobservable(_) => "unobservable",
        Error::LinearSolve { .. } | Error::OuterSolve { .. } => "not-converged",
        Error::InvalidConfig(_) | Error::Parse { .. } => "invalid-config",
        _ => "failed",
    }
}

/// Resolved configuration as written into the CSV preamble.
pub fn config_json(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("configuration serializes")
}

/// Runs `command` on a validated configuration.
pub fn run_command(command: Command, cfg: &RunConfig) -> Outcome {
    let result = match command {
        Command::SolveLinear => solve_linear(cfg),
        Command::SolveSemilinear => solve_semilinear(cfg),
        Command::CostSweep => cost_sweep_table(cfg),
        Command::Observability => observability(cfg),
        Command::FrequencyCheck => frequency_check(cfg),
        Command::Telescope => telescope(cfg),
        Command::Bound => bound(cfg),
        Command::Exhaustion => exhaustion(cfg),
    };
    result.unwrap_or_else(|e| Outcome::failure(&e))
}

/// Full front end: read, override, validate, run and write. Returns the exit code.
pub fn execute(cli: &Cli) -> i32 {
    let (cfg, outcome) = match load(cli) {
        Ok(cfg) => {
            let outcome = run_command(cli.command, &cfg);
            (Some(cfg), outcome)
        }
        Err(e) => (None, Outcome::failure(&e)),
    };
    let preamble = cfg.as_ref().map(config_json).unwrap_or_else(|| "null".into());
    let text = outcome.table.render(&preamble);
    let out = cli.out.clone().or_else(|| cfg.as_ref().and_then(|c| c.output.clone()).map(PathBuf::from));
    let written = match &out {
        Some(path) => std::fs::write(path, &text).map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    };
    if let Err(msg) = written {
        eprintln!("heatlab: {msg}");
        return EXIT_FAILURE;
    }
    if outcome.exit_code != EXIT_OK {
        if let Some(row) = outcome.table.rows().last() {
            if outcome.table.columns().first().map(String::as_str) == Some("status") {
                if let Some(Cell::Text(msg)) = row.get(1) {
                    eprintln!("heatlab: {msg}");
                }
            }
        }
    }
    outcome.exit_code
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = parse_config(&text, &overrides)?;
    if let Some(c) = cfg.command {
        if c != cli.command {
            return Err(Error::InvalidConfig(format!(
                "command: the document names `{}` but `{}` was requested",
                c.name(),
                cli.command.name()
            )));
        }
    }
    cfg.command = Some(cli.command);
    Ok(cfg)
}

fn extent(sweep: &SweepConfig, n: usize) -> f64 {
    n as f64 * sweep.spec.cell_side()
}

fn linear_system(cfg: &RunConfig, sweep: &SweepConfig, n: usize) -> Result<ControlSystem> {
    let sys = sweep.system(n)?;
    if cfg.potential.constant == 0.0 {
        return Ok(sys);
    }
    sys.with_potential(&PotentialField::constant(cfg.potential.constant, sys.nodes(), sys.steps()))
}

fn validated_sweep(cfg: &RunConfig) -> Result<SweepConfig> {
    let sweep = cfg.sweep()?;
    sweep.validate()?;
    Ok(sweep)
}

fn solve_linear(cfg: &RunConfig) -> Result<Outcome> {
    let sweep = validated_sweep(cfg)?;
    let mut table = CsvTable::new(&[
        "n",
        "extent",
        "nodes",
        "kappa",
        "final_ratio",
        "cg_iters",
        "identity_residual",
        "status",
        "message",
    ]);
    let mut ok = true;
    for &n in &sweep.sizes {
        let nodes = sweep.grid(n).map(|g| g.len()).unwrap_or(0);
        let head: Vec<Cell> = vec![n.into(), extent(&sweep, n).into(), nodes.into()];
        let solved = linear_system(cfg, &sweep, n).and_then(|sys| {
            let z0 = sweep.z0.sample(sys.grid());
            solve_penalized_hum(&sys, &z0, &cfg.hum)
        });
        let tail: Vec<Cell> = match solved {
            Ok(r) => vec![
                r.kappa.into(),
                r.final_ratio.into(),
                r.iterations.into(),
                r.identity_residual.into(),
                "ok".into(),
                Cell::Empty,
            ],
            Err(e) => {
                ok = false;
                vec![Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty, status_of(&e).into(), e.to_string().into()]
            }
        };
        table.push(head.into_iter().chain(tail).collect());
    }
    Ok(Outcome::finish(table, ok))
}

fn solve_semilinear(cfg: &RunConfig) -> Result<Outcome> {
    let sweep = validated_sweep(cfg)?;
    let mut table = CsvTable::new(&[
        "n",
        "iteration",
        "residual",
        "kappa",
        "cg_iters",
        "converged",
        "verified_final_ratio",
        "status",
    ]);
    let mut ok = true;
    for &n in &sweep.sizes {
        let run = sweep.system(n).and_then(|sys| {
            let z0 = sweep.z0.sample(sys.grid());
            fixed_point_solve(&sys, &z0, &sweep.nonlinearity, &sweep.hum, &sweep.fixed_point)
        });
        match run {
            Ok(fp) => {
                ok &= fp.converged;
                let status = if fp.converged { "ok" } else { "not-converged" };
                for i in 0..fp.iterations {
                    let last = i + 1 == fp.iterations;
                    table.push(vec![
                        n.into(),
                        (i + 1).into(),
                        fp.residuals[i].into(),
                        fp.kappas[i].into(),
                        fp.cg_iterations[i].into(),
                        fp.converged.into(),
                        if last { fp.verified_final_ratio.into() } else { Cell::Empty },
                        status.into(),
                    ]);
                }
            }
            Err(e) => {
                ok = false;
                table.push(vec![
                    n.into(),
                    Cell::Empty,
                    Cell::Empty,
                    Cell::Empty,
                    Cell::Empty,
                    false.into(),
                    Cell::Empty,
                    status_of(&e).into(),
                ]);
            }
        }
    }
    Ok(Outcome::finish(table, ok))
}

fn cost_sweep_table(cfg: &RunConfig) -> Result<Outcome> {
    let sweep = validated_sweep(cfg)?;
    let curve = cost_sweep(&sweep)?;
    let mut table = CsvTable::new(&[
        "n",
        "extent",
        "nodes",
        "kappa",
        "final_ratio",
        "fp_iters",
        "cg_iters",
        "wall_ms",
        "status",
    ]);
    let mut ok = true;
    for r in &curve.records {
        ok &= r.status.as_str() == "ok";
        let wall: Cell = if cfg.report.timings { r.wall_ms.into() } else { Cell::Empty };
        table.push(vec![
            r.n.into(),
            r.extent.into(),
            r.nodes.into(),
            r.kappa.into(),
            r.final_ratio.into(),
            r.fp_iters.into(),
            r.cg_iters.into(),
            wall,
            r.status.as_str().into(),
        ]);
    }
    Ok(Outcome::finish(table, ok))
}

fn observability(cfg: &RunConfig) -> Result<Outcome> {
    let sweep = validated_sweep(cfg)?;
    let policy = cfg.probe_policy();
    let mut table = CsvTable::new(&["n", "probe", "quotient", "best", "constant", "status"]);
    let mut ok = true;
    for &n in &sweep.sizes {
        match linear_system(cfg, &sweep, n).and_then(|sys| estimate_observability_constant(&sys, &policy)) {
            Ok(est) => {
                for (name, q) in &est.probes {
                    table.push(vec![
                        n.into(),
                        name.as_str().into(),
                        (*q).into(),
                        (*name == est.best_probe).into(),
                        est.constant.into(),
                        "ok".into(),
                    ]);
                }
            }
            Err(e) => {
                ok = false;
                table.push(vec![n.into(), Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty, status_of(&e).into()]);
            }
        }
    }
    Ok(Outcome::finish(table, ok))
}

fn frequency_check(cfg: &RunConfig) -> Result<Outcome> {
    let sweep = cfg.sweep()?;
    let grid = sweep.grid(sweep.sizes[0])?;
    let side = sweep.spec.cell_side();
    let dim = grid.dim();
    let lo: Vec<f64> = grid.domain().lo().iter().map(|&l| l as f64 * side).collect();
    let len = grid.domain().extent(&sweep.spec);
    let u0 = match cfg.frequency.initial {
        FrequencyInitial::Eigenfunction => grid.sample(|x| {
            (0..dim).map(|a| (std::f64::consts::PI * (x[a] - lo[a]) / len[a]).sin()).product()
        }),
        FrequencyInitial::Z0 => sweep.z0.sample(&grid),
    };
    let steps = cfg.time.steps;
    let pot = PotentialField::constant(cfg.potential.constant, grid.len(), steps);
    let lap = assemble_laplacian(&grid);
    let u = forward_solve(&lap, &pot, &u0, None, &cfg.solver, cfg.time.horizon, steps)?;
    let center = match &cfg.frequency.center {
        Some(c) => [c[0], c.get(1).copied().unwrap_or(0.0)],
        None => grid.domain_center(),
    };
    let radius = cfg
        .frequency
        .radius
        .unwrap_or_else(|| len.iter().map(|l| l * l).sum::<f64>().sqrt());
    let params = FrequencyParams { center, radius, lambda: cfg.frequency.lambda, horizon: cfg.time.horizon };
    let potential = (cfg.potential.constant != 0.0).then_some(&pot);
    let report = frequency_monotonicity_check(&grid, &u, potential, &params)?;
    let mut table =
        CsvTable::new(&["level", "time", "frequency", "derivative", "bound", "violation", "tolerance", "pass"]);
    for l in &report.levels {
        table.push(vec![
            l.level.into(),
            l.time.into(),
            l.frequency.into(),
            l.derivative.into(),
            l.bound.into(),
            l.violation.into(),
            report.tolerance.into(),
            l.pass.into(),
        ]);
    }
    let tau = cfg.time.horizon / steps as f64;
    for &k in &report.undefined {
        table.push(vec![
            k.into(),
            (k as f64 * tau).into(),
            Cell::Empty,
            Cell::Empty,
            Cell::Empty,
            Cell::Empty,
            report.tolerance.into(),
            "undefined".into(),
        ]);
    }
    Ok(Outcome::finish(table, report.holds()))
}

fn telescope(cfg: &RunConfig) -> Result<Outcome> {
    let set = cfg.time_set()?;
    let (l, l1) = choose_density_anchor(&set)?;
    let ratio = match cfg.telescope.ratio {
        Some(r) => r,
        None => kappa_alpha(cfg.bound.theta)?.1,
    };
    let seq = build_telescope(&set, l, l1, ratio, cfg.telescope.count)?;
    let mut table = CsvTable::new(&["m", "l_m", "l_m_next", "gap", "measure", "pass"]);
    for p in &seq.pairs {
        table.push(vec![p.m.into(), p.upper.into(), p.lower.into(), p.gap.into(), p.measure.into(), p.pass.into()]);
    }
    Ok(Outcome::finish(table, seq.holds()))
}

fn bound(cfg: &RunConfig) -> Result<Outcome> {
    let set = cfg.time_set()?;
    let consts = cfg.bound_constants();
    let c = assemble_observability_constant(&set, cfg.bound.a_norm, &consts)?;
    let one_step = interpolation_bound(set.horizon(), cfg.bound.a_norm, consts.c3)?;
    let mut table = CsvTable::new(&["label", "value"]);
    let rows: [(&str, Cell); 13] = [
        ("l", c.l.into()),
        ("l1", c.l1.into()),
        ("alpha", c.alpha.into()),
        ("kappa", c.kappa.into()),
        ("d", c.d.into()),
        ("k1", c.k1.into()),
        ("k2", c.k2.into()),
        ("k3", c.k3.into()),
        ("terms", c.terms.into()),
        ("log_series", c.log_series.into()),
        ("log_constant", c.log_constant.into()),
        ("constant", c.constant.into()),
        ("interpolation_bound", one_step.into()),
    ];
    for (label, value) in rows {
        table.push(vec![label.into(), value]);
    }
    Ok(Outcome::finish(table, c.log_constant.is_finite()))
}

fn exhaustion(cfg: &RunConfig) -> Result<Outcome> {
    let sweep = validated_sweep(cfg)?;
    let wellposed = wellposedness_sweep(&sweep, cfg.exhaustion.source)?;
    // the limit check needs a reference at least twice every other box
    let limit = match limit_control_check(&sweep) {
        Ok(r) => Some(r),
        Err(Error::InvalidConfig(msg)) => {
            eprintln!("heatlab: limit-control check skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let thetas = interpolation_sweep(&sweep)?;
    let mut table = CsvTable::new(&["n", "extent", "nodes", "error", "residual", "theta_hat"]);
    for (i, row) in wellposed.rows.iter().enumerate() {
        let residual = limit.as_ref().and_then(|r| r.rows[i].residual);
        table.push(vec![
            row.n.into(),
            row.extent.into(),
            row.nodes.into(),
            row.error.into(),
            residual.into(),
            thetas[i].1.into(),
        ]);
    }
    Ok(Outcome::finish(table, true))
}
