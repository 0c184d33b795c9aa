//! Command-line front end: loads an instance file, calls the library, prints
//! JSON (reports) or CSV (series).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use promise_ledger::geometry::{agent_sets, classify_trivial, no_info_value, one_shot_value, support_value};
use promise_ledger::mechanism::{
    finite_horizon_schedule, verify_ic, verify_promise_keeping, verify_valid_promises, BallMechanism, BuildOptions,
    ConstantPolicy, FiniteHorizonConfig, FiniteHorizonMechanism, Stage,
};
use promise_ledger::rates::{default_eta_grid, predicted_eta, sc3_partition, RateFunctions};
use promise_ledger::sim::{
    dyadic_gammas, rate_rows, rate_rows_csv, run_discounted, run_finite, sweep, sweep_csv, BuilderPolicy, Strategy,
    SweepConfig, SweepGrid,
};
use promise_ledger::{Error, JointSupport, UtilityProfile};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "promise-ledger", version, about = "Promised-utility mechanisms for allocation without money")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify the instance: trivial cases, agent sets, reference values.
    Check(Common),
    /// Support function of the full-information region along `--beta`.
    Frontier {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
    },
    /// Build a ball mechanism and verify its α-best state.
    Mechanism {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ball: Ball,
        #[arg(long)]
        gamma: f64,
    },
    /// Monte Carlo run of a ball mechanism (`--gamma`) or a finite-horizon
    /// schedule (`--horizon`).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ball: Ball,
        #[arg(long, conflicts_with = "horizon", required_unless_present = "horizon")]
        gamma: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 10_000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rate functions on the default η grid.
    Rates {
        #[command(flatten)]
        common: Common,
        /// Also report the predicted η* at this discount factor.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Exact region gaps along a γ or T grid, as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        policy: Policy,
        /// Exponents k of γ = 1 - 2^-k, as `lo..hi` (inclusive).
        #[arg(long, default_value = "4..10")]
        gammas: String,
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        #[arg(long)]
        r: Option<f64>,
        /// Where to write the rate rows CSV.
        #[arg(long)]
        rates_out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    instance: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Constant overrides, e.g. `C=0.05`, `c0=8`, `c_eta=1`.
    #[arg(long = "const", value_name = "KEY=VAL")]
    consts: Vec<String>,
}

#[derive(Args, Debug)]
struct Ball {
    #[arg(long, value_delimiter = ',', required = true)]
    x: Vec<f64>,
    #[arg(long)]
    r: f64,
    #[arg(long)]
    delta: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Policy {
    Universal,
    Smooth,
    Finite,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidDistribution(_)
            | Error::InvalidProfile(_)
            | Error::InvalidInput(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::CapExceeded { .. }
            | Error::PartitionTooLarge { .. }
            | Error::GridTooLarge { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Invariant(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parsed `--const` overrides.
#[derive(Debug, Default)]
struct Consts {
    constant: Option<f64>,
    c0: Option<f64>,
    c_eta: Option<f64>,
    r0: Option<f64>,
    grid: Option<usize>,
    ball_budget: Option<usize>,
}

const CONST_KEYS: &str = "C, c0, c_eta, r0, grid, ball_budget";

fn parse_consts(raw: &[String]) -> std::result::Result<Consts, Failure> {
    let mut c = Consts::default();
    for item in raw {
        let (key, val) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--const expects KEY=VAL, got {item:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| Failure::Usage(format!("--const {key}: not a number: {v:?}")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| Failure::Usage(format!("--const {key}: not an integer: {v:?}")));
        match key {
            "C" => c.constant = Some(num(val)?),
            "c0" => c.c0 = Some(num(val)?),
            "c_eta" => c.c_eta = Some(num(val)?),
            "r0" => c.r0 = Some(num(val)?),
            "grid" => c.grid = Some(int(val)?),
            "ball_budget" => c.ball_budget = Some(int(val)?),
            _ => return Err(Failure::Usage(format!("unknown constant {key:?}; known: {CONST_KEYS}"))),
        }
    }
    Ok(c)
}

fn load(path: &Path) -> std::result::Result<UtilityProfile, Failure> {
    UtilityProfile::from_path(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json(out: &Option<PathBuf>, value: &Value) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    emit(out, &text)
}

fn finite_config(c: &Consts) -> FiniteHorizonConfig {
    let mut cfg = FiniteHorizonConfig::default();
    if let Some(v) = c.constant {
        cfg.constant = v;
    }
    if let Some(v) = c.c0 {
        cfg.c0 = v;
    }
    if let Some(v) = c.ball_budget {
        cfg.ball_budget = v;
    }
    cfg.r0 = c.r0;
    cfg
}

fn build_options(c: &Consts) -> BuildOptions {
    BuildOptions {
        constant: c.constant.map_or(ConstantPolicy::ClosedForm, ConstantPolicy::Fixed),
        grid_size: c.grid,
        ..Default::default()
    }
}

fn check(common: &Common) -> Outcome {
    parse_consts(&common.consts)?;
    let profile = load(&common.instance)?;
    let alpha = profile.alpha().to_vec();
    let trivial = classify_trivial(&profile);
    let value = json!({
        "n": profile.n(),
        "vbar": profile.vbar(),
        "alpha": alpha,
        "means": profile.means(),
        "classification": trivial.case,
        "alpha_optimal_vector": trivial.alpha_optimal_vector,
        "agent_sets": agent_sets(&profile),
        "first_best": support_value(&profile, &alpha),
        "no_info": no_info_value(&profile, &alpha),
        "one_shot": one_shot_value(&profile, &alpha),
    });
    emit_json(&common.out, &value)
}

fn frontier(common: &Common, beta: &[f64]) -> Outcome {
    parse_consts(&common.consts)?;
    let profile = load(&common.instance)?;
    if beta.len() != profile.n() {
        return Err(Failure::Usage(format!("--beta has {} entries for {} agents", beta.len(), profile.n())));
    }
    let value = json!({
        "beta": beta,
        "support_value": support_value(&profile, beta),
        "no_info_value": no_info_value(&profile, beta),
        "one_shot_value": one_shot_value(&profile, beta),
    });
    emit_json(&common.out, &value)
}

fn build(profile: &UtilityProfile, ball: &Ball, gamma: f64, consts: &Consts) -> std::result::Result<BallMechanism, Failure> {
    if ball.x.len() != profile.n() {
        return Err(Failure::Usage(format!("--x has {} entries for {} agents", ball.x.len(), profile.n())));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Failure::Usage(format!("--gamma must lie in (0, 1), got {gamma}")));
    }
    let support = Arc::new(JointSupport::new(profile)?);
    Ok(BallMechanism::build(support, Stage::stationary(&ball.x, ball.r, ball.delta, gamma), &build_options(consts))?)
}

fn mechanism(common: &Common, ball: &Ball, gamma: f64) -> Outcome {
    let profile = load(&common.instance)?;
    let consts = parse_consts(&common.consts)?;
    let mech = build(&profile, ball, gamma, &consts)?;
    let state = mech.alpha_best_state()?;
    let pk = verify_promise_keeping(&mech, &state, 1e-9);
    let valid = verify_valid_promises(&mech, &state);
    let ic = verify_ic(&mech, &state, 1e-8);
    let value = json!({
        "stage": mech.stage(),
        "constant": mech.constant(),
        "certified_constant": mech.certified_constant(),
        "plans": mech.plans().len(),
        "region_gap": mech.region_gap(),
        "alpha_best_state": state.u,
        "promise_keeping": pk,
        "valid_promises": valid,
        "ic": ic,
    });
    emit_json(&common.out, &value)?;
    if pk.passed && valid.passed && ic.passed {
        Ok(())
    } else {
        Err(Failure::Invariant("the α-best state failed verification".into()))
    }
}

fn simulate(common: &Common, ball: &Ball, gamma: Option<f64>, horizon: Option<usize>, episodes: usize, seed: u64) -> Outcome {
    let profile = load(&common.instance)?;
    let consts = parse_consts(&common.consts)?;
    if let Some(t) = horizon {
        let schedule = finite_horizon_schedule(&profile, &ball.x, ball.r, ball.delta, t, &finite_config(&consts))?;
        let support = Arc::new(JointSupport::new(&profile)?);
        let mech = FiniteHorizonMechanism::from_schedule(support, &schedule)?;
        let summary = run_finite(&mech, episodes, seed)?;
        emit_json(&common.out, &serde_json::to_value(&summary).map_err(Error::from)?)?;
        return if summary.consistent(3.0) {
            Ok(())
        } else {
            Err(Failure::Invariant("Monte Carlo means disagree with the promise beyond 3 standard errors".into()))
        };
    }
    let gamma = gamma.expect("clap requires --gamma without --horizon");
    let mech = build(&profile, ball, gamma, &consts)?;
    let state = mech.alpha_best_state()?;
    let summary = run_discounted(&mech, &state, episodes, seed, &Strategy::Truthful)?;
    emit_json(&common.out, &serde_json::to_value(&summary).map_err(Error::from)?)?;
    if summary.consistent(3.0) {
        Ok(())
    } else {
        Err(Failure::Invariant("Monte Carlo means disagree with the promise beyond 3 standard errors".into()))
    }
}

fn rates(common: &Common, gamma: Option<f64>) -> Outcome {
    let profile = load(&common.instance)?;
    let consts = parse_consts(&common.consts)?;
    let sets = agent_sets(&profile);
    let partition = match sc3_partition(&profile, 1e-3, 1.0)? {
        Some(p) => p,
        None if sets.i_tilde.len() >= 2 => vec![sets.i_tilde.clone()],
        None => return Err(Failure::Usage("fewer than two agents can tie; no rate functions".into())),
    };
    let functions = RateFunctions::evaluate(&profile, &partition, &default_eta_grid())?;
    let eta_star = match gamma {
        Some(g) => Some(predicted_eta(&profile, &partition, g, consts.c_eta.unwrap_or(1.0))?),
        None => None,
    };
    let value = json!({ "partition": partition, "eta_star": eta_star, "functions": functions });
    emit_json(&common.out, &value)
}

fn parse_range(s: &str) -> std::result::Result<std::ops::RangeInclusive<i32>, Failure> {
    let bad = || Failure::Usage(format!("--gammas expects lo..hi, got {s:?}"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let lo: i32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: i32 = hi.trim().parse().map_err(|_| bad())?;
    if lo < 1 || hi < lo {
        return Err(bad());
    }
    Ok(lo..=hi)
}

fn run_sweep(
    common: &Common,
    policy: Policy,
    gammas: &str,
    horizons: &[usize],
    r: Option<f64>,
    rates_out: &Option<PathBuf>,
) -> Outcome {
    let profile = load(&common.instance)?;
    let consts = parse_consts(&common.consts)?;
    let need_r = || r.ok_or_else(|| Failure::Usage("this policy needs --r".into()));
    let config = match policy {
        Policy::Universal => SweepConfig {
            grid: SweepGrid::Gammas(dyadic_gammas(parse_range(gammas)?)),
            policy: BuilderPolicy::UniversalRate { constant: consts.constant.unwrap_or(1.0) },
        },
        Policy::Smooth => SweepConfig {
            grid: SweepGrid::Gammas(dyadic_gammas(parse_range(gammas)?)),
            policy: BuilderPolicy::SmoothBall { r: need_r()?, constant: consts.constant.unwrap_or(1.0) },
        },
        Policy::Finite => {
            if horizons.is_empty() {
                return Err(Failure::Usage("the finite policy needs --horizons".into()));
            }
            SweepConfig {
                grid: SweepGrid::Horizons(horizons.to_vec()),
                policy: BuilderPolicy::FiniteHorizon { r: need_r()?, config: finite_config(&consts) },
            }
        }
    };
    let result = sweep(&profile, &config)?;
    emit(&common.out, &sweep_csv(&result))?;
    if let Some(path) = rates_out {
        let partition = sc3_partition(&profile, 1e-3, 1.0)?;
        let rows = rate_rows(&profile, &result, partition.as_deref(), consts.c_eta.unwrap_or(1.0))?;
        emit(&Some(path.clone()), &rate_rows_csv(&rows))?;
    }
    if common.out.is_some() {
        emit_json(&None, &serde_json::to_value(&result.report).map_err(Error::from)?)?;
    }
    Ok(())
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("PROMISE_LEDGER_THREADS") else { return Ok(()) };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| Failure::Usage(format!("PROMISE_LEDGER_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    match &cli.command {
        Command::Check(common) => check(common),
        Command::Frontier { common, beta } => frontier(common, beta),
        Command::Mechanism { common, ball, gamma } => mechanism(common, ball, *gamma),
        Command::Simulate { common, ball, gamma, horizon, episodes, seed } => {
            simulate(common, ball, *gamma, *horizon, *episodes, *seed)
        }
        Command::Rates { common, gamma } => rates(common, *gamma),
        Command::Sweep { common, policy, gammas, horizons, r, rates_out } => {
            run_sweep(common, *policy, gammas, horizons, *r, rates_out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
