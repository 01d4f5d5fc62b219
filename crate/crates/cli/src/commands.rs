//! Subcommand implementations. Each returns a process exit code; reports go
//! to `out`, diagnostics to standard error.

use std::io::Write;
use std::path::Path;

use pidpbc_core::engine::{run_scenario, sweep, Mode, Summary, SweepAxis, SweepRun, Target};
use pidpbc_core::model::buck_boost_reference;
use pidpbc_core::verify::{self, CheckOutcome};
use pidpbc_core::{controller, Error, Gains};

use crate::config::{scenario_hash, ConfigDocument, ConfigError};
use crate::csvio::{self, Header, SCHEMA};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Unreadable or invalid config, bad arguments, I/O failure, hash mismatch.
    pub const CONFIG: i32 = 1;
    pub const DIVERGED: i32 = 2;
    /// Newton or linear-solve failure inside a step.
    pub const SOLVER: i32 = 3;
    pub const VERIFY_FAILED: i32 = 4;
    pub const NOT_ASSIGNABLE: i32 = 5;
}

/// Environment variable overriding the sweep thread count.
pub const THREADS_ENV: &str = "PIDPBC_THREADS";

pub fn error_code(e: &Error) -> i32 {
    match e.root() {
        Error::NotAssignable { .. } => exit::NOT_ASSIGNABLE,
        _ if e.is_solver_failure() => exit::SOLVER,
        _ => exit::CONFIG,
    }
}

fn config_code(e: &ConfigError) -> i32 {
    match e {
        ConfigError::Model(e) => error_code(e),
        _ => exit::CONFIG,
    }
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:e}"))
}

/// `key = value` block describing a finished run.
pub fn summary_block(hash: &str, mode: Mode, s: &Summary<f64>) -> String {
    let mut b = String::from("[summary]\n");
    let mut kv = |k: &str, v: String| b.push_str(&format!("{k} = {v}\n"));
    kv("scenario", format!("\"{hash}\""));
    kv("mode", format!("\"{mode}\""));
    kv("steps", s.steps.to_string());
    kv("final_time", format!("{:e}", s.final_time));
    kv("final_output", format!("{:e}", s.final_output));
    kv("target_output", format!("{:e}", s.target_output));
    kv(
        "final_tracking_error",
        format!("{:e}", s.final_tracking_error),
    );
    kv("settling_time", opt(s.settling_time));
    kv(
        "peak_tracking_error",
        format!("{:e}", s.peak_tracking_error),
    );
    kv("max_abs_u", format!("{:e}", s.max_abs_u));
    kv("min_dv", format!("{:e}", s.min_dv));
    kv("max_dv", format!("{:e}", s.max_dv));
    kv("max_newton_iters", s.max_newton_iters.to_string());
    kv("final_z_error", opt(s.final_z_error));
    kv("final_x_error", format!("{:e}", s.final_x_error));
    kv("diverged", s.diverged.to_string());
    b
}

pub fn cmd_simulate(
    config: &Path,
    out_path: &Path,
    mode: Option<Mode>,
    out: &mut dyn Write,
) -> i32 {
    let doc = match ConfigDocument::load(config) {
        Ok(d) => d,
        Err(e) => return fail(config_code(&e), e),
    };
    let scenario = match doc.scenario(mode) {
        Ok(s) => s,
        Err(e) => return fail(config_code(&e), e),
    };
    let hash = scenario_hash(&scenario);
    let traj = match run_scenario(&scenario) {
        Ok(t) => t,
        Err(e) => return fail(error_code(&e), e),
    };
    let params = csvio::buck_boost(&scenario.plant).expect("configs describe buck-boost plants");
    let rows = csvio::rows(&traj, params, &scenario.gains);
    let header = Header {
        schema: SCHEMA,
        scenario: hash.clone(),
        mode: scenario.mode,
        delta: traj.delta,
    };
    if let Err(e) = csvio::write_atomic(out_path, &header, &rows) {
        return fail(
            exit::CONFIG,
            format!("cannot write {}: {e}", out_path.display()),
        );
    }
    let _ = write!(
        out,
        "{}",
        summary_block(&hash, scenario.mode, &traj.summary)
    );
    if traj.summary.diverged {
        eprintln!("error: trajectory diverged at step {}", traj.summary.steps);
        exit::DIVERGED
    } else {
        exit::OK
    }
}

pub fn cmd_verify(trajectory: &Path, config: &Path, tol: f64, out: &mut dyn Write) -> i32 {
    let file = match std::fs::File::open(trajectory) {
        Ok(f) => f,
        Err(e) => {
            return fail(
                exit::CONFIG,
                format!("cannot read {}: {e}", trajectory.display()),
            )
        }
    };
    let (header, rows) = match csvio::read(file) {
        Ok(x) => x,
        Err(e) => return fail(exit::CONFIG, format!("{}: {e}", trajectory.display())),
    };
    let scenario = match ConfigDocument::load(config).and_then(|d| d.scenario(Some(header.mode))) {
        Ok(s) => s,
        Err(e) => return fail(config_code(&e), e),
    };
    let hash = scenario_hash(&scenario);
    if hash != header.scenario {
        return fail(
            exit::CONFIG,
            format!(
                "scenario hash mismatch: trajectory {} vs config {hash}",
                header.scenario
            ),
        );
    }
    let model = match scenario.plant.model() {
        Ok(m) => m,
        Err(e) => return fail(error_code(&e), e),
    };
    let segments = match scenario.segments() {
        Ok(s) => s,
        Err(e) => return fail(error_code(&e), e),
    };
    let steps = csvio::step_views(&rows, header.mode);
    if steps.is_empty() {
        return fail(exit::CONFIG, "trajectory has no consecutive steps to check");
    }
    let outcomes = match verify::run_all_checks(
        &steps,
        header.mode,
        &model,
        &scenario.gains,
        &segments,
        header.delta,
        tol,
    ) {
        Ok(o) => o,
        Err(e) => return fail(error_code(&e), e),
    };
    for o in &outcomes {
        let _ = writeln!(out, "{}", format_outcome(o));
    }
    if outcomes.iter().all(CheckOutcome::passed) {
        exit::OK
    } else {
        exit::VERIFY_FAILED
    }
}

pub fn format_outcome(o: &CheckOutcome<f64>) -> String {
    let idx = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |k| k.to_string());
    match o {
        CheckOutcome::Ran(r) => format!(
            "{} {} max_violation={:e} worst_step={} first_violation={} tolerance={:e} steps={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_violation,
            idx(r.worst_step),
            idx(r.first_violation),
            r.tolerance,
            r.steps_checked
        ),
        CheckOutcome::Skipped { name, reason } => format!("SKIP {name} ({reason})"),
    }
}

fn parse_axis(axis: &str, values: &str) -> Result<SweepAxis<f64>, String> {
    let items: Vec<&str> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err("no sweep values given".into());
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| format!("bad value `{s}`: {e}"))
    };
    match axis {
        "delta" => Ok(SweepAxis::Delta(
            items.iter().map(|s| num(s)).collect::<Result<_, _>>()?,
        )),
        "v_star" => Ok(SweepAxis::Reference(
            items
                .iter()
                .map(|s| num(s).map(Target::Voltage))
                .collect::<Result<_, _>>()?,
        )),
        "gains" => Ok(SweepAxis::Gains(
            items
                .iter()
                .map(|s| {
                    let parts: Vec<f64> = s.split(':').map(num).collect::<Result<_, _>>()?;
                    match parts[..] {
                        [kp, ki, kd] => {
                            Gains::scalar(kp, ki, kd).map_err(|e| format!("`{s}`: {e}"))
                        }
                        _ => Err(format!("gain triple `{s}` must be kp:ki:kd")),
                    }
                })
                .collect::<Result<_, _>>()?,
        )),
        _ => Err(format!(
            "unknown axis `{axis}` (expected delta, gains or v_star)"
        )),
    }
}

fn run_code(r: &SweepRun<f64>) -> i32 {
    match &r.outcome {
        Ok(s) if s.diverged => exit::DIVERGED,
        Ok(_) => exit::OK,
        Err(e) => error_code(e),
    }
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "value",
    "status",
    "final_output",
    "target_output",
    "final_tracking_error",
    "settling_time",
    "peak_tracking_error",
    "max_abs_u",
    "min_dv",
    "max_dv",
    "max_newton_iters",
    "final_z_error",
    "final_x_error",
    "steps",
];

fn sweep_row(r: &SweepRun<f64>) -> Vec<String> {
    let f = |x: f64| format!("{x:e}");
    match &r.outcome {
        Ok(s) => vec![
            r.label.clone(),
            if s.diverged {
                "diverged".into()
            } else {
                "ok".into()
            },
            f(s.final_output),
            f(s.target_output),
            f(s.final_tracking_error),
            opt(s.settling_time),
            f(s.peak_tracking_error),
            f(s.max_abs_u),
            f(s.min_dv),
            f(s.max_dv),
            s.max_newton_iters.to_string(),
            opt(s.final_z_error),
            f(s.final_x_error),
            s.steps.to_string(),
        ],
        Err(e) => {
            let mut row = vec![r.label.clone(), format!("error: {e}")];
            row.resize(SWEEP_COLUMNS.len(), String::new());
            row
        }
    }
}

/// Runs one scenario per value. Exit code is that of the first failing run
/// in input order, or 0.
pub fn cmd_sweep(
    config: &Path,
    axis: &str,
    values: &str,
    out_dir: &Path,
    out: &mut dyn Write,
) -> i32 {
    let axis_values = match parse_axis(axis, values) {
        Ok(a) => a,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let template = match ConfigDocument::load(config).and_then(|d| d.scenario(None)) {
        Ok(s) => s,
        Err(e) => return fail(config_code(&e), e),
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                return fail(
                    exit::CONFIG,
                    format!("{THREADS_ENV} must be a non-negative integer"),
                )
            }
        },
        Err(_) => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let runs = match pool.install(|| sweep(&template, &axis_values)) {
        Ok(r) => r,
        Err(e) => return fail(error_code(&e), e),
    };

    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail(
            exit::CONFIG,
            format!("cannot create {}: {e}", out_dir.display()),
        );
    }
    let path = out_dir.join(format!("sweep_{axis}.csv"));
    let write = || -> std::io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(out_dir)?;
        {
            let mut w = csv::Writer::from_writer(tmp.as_file_mut());
            w.write_record(SWEEP_COLUMNS)?;
            for r in &runs {
                w.write_record(sweep_row(r))?;
            }
            w.flush()?;
        }
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    };
    if let Err(e) = write() {
        return fail(
            exit::CONFIG,
            format!("cannot write {}: {e}", path.display()),
        );
    }

    let _ = writeln!(out, "{}", SWEEP_COLUMNS.join("\t"));
    for r in &runs {
        let _ = writeln!(out, "{}", sweep_row(r).join("\t"));
        if let Err(e) = &r.outcome {
            eprintln!("error: run {}: {e}", r.label);
        }
    }
    runs.iter()
        .map(run_code)
        .find(|&c| c != exit::OK)
        .unwrap_or(exit::OK)
}

pub fn cmd_equilibrium(config: &Path, v_star: f64, out: &mut dyn Write) -> i32 {
    let doc = match ConfigDocument::load(config) {
        Ok(d) => d,
        Err(e) => return fail(config_code(&e), e),
    };
    let (params, gains) = match doc.params().and_then(|p| Ok((p, doc.gains()?))) {
        Ok(x) => x,
        Err(e) => return fail(config_code(&e), e),
    };
    let eq = match buck_boost_reference(&params, v_star) {
        Ok(eq) => eq,
        Err(e) => return fail(error_code(&e), e),
    };
    let model = pidpbc_core::buck_boost_model(&params).expect("validated parameters");
    let xi = controller::xi_star(&gains, &eq).expect("validated gains");
    let damping = verify::damping_injection(&model, &eq, &gains).expect("matching dimensions");
    let vec = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.16e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let _ = write!(
        out,
        "[equilibrium]\n\
         v_star = {v_star:e}\n\
         x_star = [{}]\n\
         i_star = {:.16e}\n\
         u_star = [{}]\n\
         y_star = [{}]\n\
         xi_star = [{}]\n\
         c_mat = [{}]\n\
         residual = {:e}\n\
         \n[damping]\n\
         matrix = [{}]\n\
         alpha = {:e}\n\
         satisfied = {}\n",
        vec(eq.x_star.as_slice()),
        params.current(&eq.x_star),
        vec(eq.u_star.as_slice()),
        vec(eq.y_star.as_slice()),
        vec(xi.as_slice()),
        vec(eq.c_mat.as_slice()),
        eq.residual,
        vec(damping.matrix.as_slice()),
        damping.alpha,
        damping.satisfied,
    );
    exit::OK
}
