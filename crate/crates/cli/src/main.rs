use std::path::PathBuf;

use clap::{Parser, Subcommand};
use pidpbc_cli::{cmd_equilibrium, cmd_simulate, cmd_sweep, cmd_verify, exit};
use pidpbc_core::engine::Mode;

/// Discrete-time PID passivity-based control of power converters.
///
/// Exit codes: 0 success, 1 config/usage error, 2 diverged, 3 solver
/// failure, 4 verification failed, 5 equilibrium not assignable.
#[derive(Parser)]
#[command(name = "pidpbc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trajectory CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's loop mode (dt-midpoint, dt-euler, emulation).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Check a trajectory CSV against the passivity and Lyapunov identities.
    Verify {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Run one scenario per value of an axis (delta, gains, v_star).
    ///
    /// Gain values are written kp:ki:kd. The PIDPBC_THREADS environment
    /// variable sets the worker count.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the operating point for an output-voltage reference.
    Equilibrium {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        v_star: f64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::CONFIG
            } else {
                exit::OK
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let mut out = std::io::stdout().lock();
    let code = match cli.command {
        Command::Simulate {
            config,
            out: path,
            mode,
        } => cmd_simulate(&config, &path, mode, &mut out),
        Command::Verify {
            trajectory,
            config,
            tol,
        } => cmd_verify(&trajectory, &config, tol, &mut out),
        Command::Sweep {
            config,
            axis,
            values,
            out_dir,
        } => cmd_sweep(&config, &axis, &values, &out_dir, &mut out),
        Command::Equilibrium { config, v_star } => cmd_equilibrium(&config, v_star, &mut out),
    };
    drop(out);
    std::process::exit(code);
}
