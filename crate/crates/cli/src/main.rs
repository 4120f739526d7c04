//! `oid`: run and compare dispatch algorithms on scenario files.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use oid_core::central::{solve_central, SolveOptions};
use oid_core::consensus::AdmmConfig;
use oid_core::error::OidError;
use oid_core::harness::{inject_message_log, run_simulation, Algorithm, SimConfig, SimulationOutput};
use oid_core::scenario::{
    base_load_kw, fig1_scenario, fmt_float, generate_profiles, load_scenario, write_scenario, ClearSky, Scenario,
};

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

const EXIT_WARNING: u8 = 2;
const EXIT_ERROR: u8 = 1;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "oid", version, about = "Optimal inverter dispatch workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm on one slot or the whole day.
    Run(RunArgs),
    /// Central solve over a list of λ values at one slot.
    SweepLambda(SweepArgs),
    /// Re-run a logged simulation and check every message bit for bit.
    Replay(ReplayArgs),
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Write the per-slot profile table of a scenario.
    Profiles {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic 19-node feeder scenario.
    Generate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    Central,
    Doid1,
    Doid2,
}

impl From<Algo> for Algorithm {
    fn from(a: Algo) -> Self {
        match a {
            Algo::Central => Algorithm::Central,
            Algo::Doid1 => Algorithm::Doid1,
            Algo::Doid2 => Algorithm::Doid2,
        }
    }
}

/// Scenario selection and overrides shared by `run` and `replay`.
#[derive(Args, Clone)]
struct Setup {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    algo: Algo,
    /// Group-sparsity weight; defaults to the scenario's.
    #[arg(long)]
    lambda: Option<f64>,
    /// ADMM penalty κ; defaults to the scenario's.
    #[arg(long)]
    kappa: Option<f64>,
    /// Termination threshold on the squared consensus residual.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Also require the squared change of customer setpoints between rounds to drop below this.
    #[arg(long)]
    step_eps: Option<f64>,
    /// JSON list of clusters, e.g. `[[1,2,3],[4,5,6]]`; overrides the scenario's.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Replace the scenario's profiles with synthetic ones drawn with this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    setup: Setup,
    #[arg(long, conflicts_with = "all_slots", required_unless_present = "all_slots")]
    slot: Option<usize>,
    #[arg(long)]
    all_slots: bool,
    #[arg(long)]
    out: PathBuf,
    /// Write the message log of each slot as `messages-<slot>.log`.
    #[arg(long)]
    log: bool,
    /// Threshold on ‖(P_c, Q_c)‖ for counting an inverter as dispatched.
    #[arg(long, default_value_t = 1e-4)]
    dispatch_eps: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    lambdas: Vec<f64>,
    /// Defaults to the slot closest to 13:00.
    #[arg(long)]
    slot: Option<usize>,
    /// Threshold on ‖(P_c, Q_c)‖ for counting an inverter as dispatched.
    #[arg(long, default_value_t = 1e-4)]
    dispatch_eps: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    setup: Setup,
    #[arg(long)]
    slot: usize,
    #[arg(long)]
    log: PathBuf,
}

enum Failure {
    Usage(String),
    Run(OidError),
}

impl From<OidError> for Failure {
    fn from(e: OidError) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OID_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::SweepLambda(a) => cmd_sweep(&a),
        Command::Replay(a) => cmd_replay(&a),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Profiles { scenario, out } => cmd_profiles(&scenario, &out),
        Command::Generate { seed, lambda, out } => {
            write_scenario(&fig1_scenario(seed, lambda), &out).map(|_| 0).map_err(Failure::from)
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn load(path: &Path, lambda: Option<f64>, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut s = load_scenario(path)?;
    if let Some(l) = lambda {
        s.cost.lambda = l;
    }
    if let Some(seed) = seed {
        let base: Vec<f64> = (0..24).map(|t| base_load_kw(t as f64)).collect();
        s.profiles = generate_profiles(seed, s.n_houses(), &base, 200.0, &ClearSky::default());
    }
    s.validate()?;
    Ok(s)
}

/// Scenario with overrides applied, plus the per-slot simulation config.
fn prepare(setup: &Setup) -> Result<(Scenario, AdmmConfig, Option<Vec<Vec<usize>>>), Failure> {
    let s = load(&setup.scenario, setup.lambda, setup.seed)?;
    let admm = AdmmConfig {
        kappa: setup.kappa.unwrap_or(s.admm.kappa),
        epsilon: setup.eps.unwrap_or(s.admm.epsilon),
        max_iters: setup.max_iters.unwrap_or(s.admm.max_iters),
        step_epsilon: setup.step_eps,
        solve: SolveOptions::default(),
    };
    let partition = match &setup.partition {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let parsed: Vec<Vec<usize>> = serde_json::from_str(&text)
                .map_err(|e| OidError::Format { path: p.display().to_string(), msg: e.to_string() })?;
            Some(parsed)
        }
        None => None,
    };
    if setup.algo == Algo::Doid2 && partition.is_none() && s.partition.is_none() {
        return Err(Failure::Usage("--algo doid2 needs --partition (the scenario has none)".into()));
    }
    Ok((s, admm, partition))
}

fn cmd_run(a: &RunArgs) -> Result<u8, Failure> {
    let (scenario, admm, partition) = prepare(&a.setup)?;
    let slots: Vec<usize> = match a.slot {
        Some(k) if k >= scenario.n_slots() => {
            return Err(Failure::Usage(format!("--slot {k} out of range (scenario has {} slots)", scenario.n_slots())))
        }
        Some(k) => vec![k],
        None => (0..scenario.n_slots()).collect(),
    };
    let algo: Algorithm = a.setup.algo.into();
    let runs: Vec<SimulationOutput> = slots
        .par_iter()
        .map(|&slot| {
            let cfg = SimConfig { slot, admm: admm.clone(), partition: partition.clone() };
            log::info!("{algo}: slot {slot}");
            run_simulation(&scenario, algo, &cfg)
        })
        .collect::<Result<_, _>>()?;
    std::fs::create_dir_all(&a.out)?;
    if a.log {
        for (slot, r) in slots.iter().zip(&runs) {
            r.write_log(a.out.join(format!("messages-{slot}.log")))?;
        }
    }
    let summary = output::write_run(&a.out, &scenario, algo, &admm, &slots, &runs, a.dispatch_eps)?;
    let warned = runs.iter().filter(|r| r.warning.is_some()).count();
    for c in &summary.cross_check {
        say!("cross-check vs {}: max |dP_c| = {}", c.against, fmt_float(c.max_abs_dp));
    }
    say!(
        "{algo}: {} slot(s), {} dispatched at most, {} with convergence warnings",
        slots.len(),
        summary.slots.iter().map(|s| s.dispatched).max().unwrap_or(0),
        warned
    );
    Ok(if warned > 0 { EXIT_WARNING } else { 0 })
}

fn cmd_sweep(a: &SweepArgs) -> Result<u8, Failure> {
    if a.lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Failure::Usage("λ values must be nonnegative".into()));
    }
    let base = load(&a.scenario, None, a.seed)?;
    let slot = a.slot.unwrap_or_else(|| base.slot_at_hour(13.0));
    if slot >= base.n_slots() {
        return Err(Failure::Usage(format!("--slot {slot} out of range")));
    }
    let feeder = base.feeder_at(slot)?;
    let rows: Vec<output::SweepRow> = a
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let mut s = base.clone();
            s.cost.lambda = lambda;
            let r = solve_central(&feeder, &s.cost_spec()?, &s.limits())?;
            Ok(output::SweepRow {
                lambda,
                dispatched: oid_core::central::count_dispatched(&r, a.dispatch_eps),
                objective: r.objective,
                losses: r.breakdown.loss,
            })
        })
        .collect::<Result<_, OidError>>()?;
    let mut sorted = rows.clone();
    sorted.sort_by(|x, y| x.lambda.total_cmp(&y.lambda));
    if sorted.windows(2).any(|w| w[1].dispatched > w[0].dispatched) {
        log::warn!("dispatched count increases with λ somewhere in the sweep");
    }
    std::fs::create_dir_all(&a.out)?;
    output::write_sweep(&a.out.join("lambda_sweep.csv"), &rows)?;
    say!("lambda sweep at slot {slot}: {} point(s)", rows.len());
    Ok(0)
}

fn cmd_replay(a: &ReplayArgs) -> Result<u8, Failure> {
    let (scenario, admm, partition) = prepare(&a.setup)?;
    let cfg = SimConfig { slot: a.slot, admm, partition };
    let out = inject_message_log(&a.log, &scenario, a.setup.algo.into(), &cfg)?;
    say!("replay identical: {} messages over {} round(s)", out.messages.len(), out.iterations);
    Ok(0)
}

fn cmd_validate(path: &Path) -> Result<u8, Failure> {
    let s = load_scenario(path)?;
    say!(
        "{}: {} nodes, {} houses, {} slots, limits [{}, {}] pu",
        s.name,
        s.roles.len(),
        s.n_houses(),
        s.n_slots(),
        s.voltage_limits.vmin,
        s.voltage_limits.vmax
    );
    Ok(0)
}

fn cmd_profiles(path: &Path, out: &Path) -> Result<u8, Failure> {
    let s = load_scenario(path)?;
    std::fs::write(out, s.profile_csv()?)?;
    Ok(0)
}
