use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use exitlane_core::compare::compare;
use exitlane_core::engine::{self, Engine};
use exitlane_core::layer_sched::{
    evaluate_policy, train_policy, EvalConfig, EvaluationReport, MdpParams, OccupancyState, PolicyKind,
    SchedulingPolicy, StartState, TrainConfig, TrainedPolicy,
};
use exitlane_core::metrics::{report_to_string, write_report};
use exitlane_core::oracle::{max_q_error, reachable_states, value_iteration, ReferenceDecoder};
use exitlane_core::{ExitTechnique, ReportFormat};
use serde::{Deserialize, Serialize};

use crate::args::{parse_tokens, EngineArgs, EpisodeArgs, MdpArgs, ModelArgs, ScheduleArgs, WorkloadArgs};

#[derive(Debug, Parser)]
#[command(
    name = "exitlane",
    version,
    about = "Batched early-exit decoding lab",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a workload with one exit technique and report metrics
    Run(RunArgs),
    /// Run one workload under several techniques plus `never` and print ratios
    Compare(CompareArgs),
    /// Train a layer-scheduling policy on the occupancy MDP
    SchedTrain(SchedTrainArgs),
    /// Evaluate a scheduling policy's discounted return
    SchedEval(SchedEvalArgs),
    /// Reference computations used to check the engine and scheduler
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Write seeded model weights to a JSON file
    GenWeights {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// softmax | state | classifier | never | always-at=K
    #[arg(long, default_value = "never")]
    technique: ExitTechnique,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Report path; printed to stdout when absent
    #[arg(long)]
    report: Option<PathBuf>,
    /// json | csv
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Write the iteration transcript as JSON lines
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct CompareArgs {
    /// Comma-separated techniques, each optionally `name@lambda0`
    #[arg(long, value_delimiter = ',', default_value = "softmax,state,classifier")]
    techniques: Vec<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Write the full comparison (rows plus per-technique reports) as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SchedTrainArgs {
    /// greedy | q-table | linear
    #[arg(long, default_value = "q-table")]
    policy: PolicyKind,
    #[command(flatten)]
    mdp: MdpArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Policy JSON (including the Q-table or linear weights)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compare learned Q values with exact value iteration
    #[arg(long)]
    oracle_check: bool,
}

#[derive(Debug, clap::Args)]
struct SchedEvalArgs {
    /// Policy JSON written by `sched-train`
    #[arg(long, conflicts_with = "policy")]
    policy_file: Option<PathBuf>,
    /// Built-in policy when no file is given (only `greedy` needs no training)
    #[arg(long, default_value = "greedy")]
    policy: PolicyKind,
    #[command(flatten)]
    mdp: MdpArgs,
    #[command(flatten)]
    episodes: EpisodeArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also report the Q error against value iteration and the optimal policy's return
    #[arg(long)]
    oracle_check: bool,
}

#[derive(Debug, Subcommand)]
enum OracleCommand {
    /// Solve the scheduling MDP exactly and print Q* for every state
    ValueIteration {
        #[command(flatten)]
        mdp: MdpArgs,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_iterations: usize,
    },
    /// Full-depth single-sequence greedy decode
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated prompt token ids
        #[arg(long, value_parser = parse_tokens)]
        prompt: std::vec::Vec<usize>,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        eos: usize,
    },
    /// Run the engine at full depth and compare every stream with the reference decoder
    Check {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        engine: EngineArgs,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    params: MdpParams,
    train: TrainConfig,
    policy: TrainedPolicy,
}

#[derive(Debug, Serialize)]
struct StateQ {
    state: OccupancyState,
    q: Vec<f64>,
    best_action: usize,
}

#[derive(Debug, Serialize)]
struct ValueIterationDump {
    params: MdpParams,
    iterations: usize,
    residual: f64,
    converged: bool,
    states: Vec<StateQ>,
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare_cmd(a),
        Command::SchedTrain(a) => sched_train(a),
        Command::SchedEval(a) => sched_eval(a),
        Command::Oracle(c) => oracle(c),
        Command::GenWeights { model, out } => {
            model.build()?.save(&out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let model = a.model.build()?;
    let workload = a.workload.build(model.config().vocab_size)?;
    let config = a.engine.config(a.technique, a.schedule.schedule(a.technique));
    let (transcript, report) = engine::run(&model, &workload, &config)?;
    if let Some(path) = &a.transcript {
        write_text(path, &transcript.to_jsonl()?)?;
    }
    match &a.report {
        Some(path) => {
            write_report(&report, path, a.format)?;
            println!(
                "{}: {} tokens, {:.3} tokens/s, {:.6} s/token, early exit {:.2}%",
                report.technique,
                report.total_tokens,
                report.throughput_tps,
                report.inner_token_latency_s,
                report.early_exit_rate_pct
            );
        }
        None => print!("{}", report_to_string(&report, a.format)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_technique_spec(spec: &str) -> Result<(ExitTechnique, exitlane_core::ThresholdSchedule)> {
    let (name, lambda0) = match spec.split_once('@') {
        Some((n, l)) => (
            n,
            Some(l.parse::<f64>().with_context(|| format!("bad threshold in `{spec}`"))?),
        ),
        None => (spec, None),
    };
    let technique: ExitTechnique = name.trim().parse()?;
    let mut schedule = exitlane_core::ThresholdSchedule::calibrated(technique);
    if let Some(l) = lambda0 {
        schedule.lambda0 = l;
    }
    Ok((technique, schedule))
}

fn compare_cmd(a: CompareArgs) -> Result<ExitCode> {
    let model = a.model.build()?;
    let workload = a.workload.build(model.config().vocab_size)?;
    let techniques = a
        .techniques
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_technique_spec(s))
        .collect::<Result<Vec<_>>>()?;
    let base = a
        .engine
        .config(ExitTechnique::Never, exitlane_core::ThresholdSchedule::constant(1.0));
    let report = compare(&model, &workload, &base, &techniques)?;
    print!("{}", report.table());
    if let Some(path) = &a.out {
        write_text(path, &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle_error(policy: &TrainedPolicy, params: &MdpParams, start: &StartState) -> Result<(f64, usize)> {
    let exact = value_iteration(params, 1e-12, 1_000_000)?;
    if !exact.converged {
        bail!("value iteration did not converge (residual {})", exact.residual);
    }
    let origin = match start {
        StartState::Fixed(v) => v.clone(),
        _ => OccupancyState::all_at_first(params.n_layers, params.population),
    };
    let mut states = reachable_states(params, &origin)?;
    if *start == StartState::Uniform {
        states = exact
            .q
            .keys()
            .filter(|s| s.population() == params.population)
            .cloned()
            .collect();
    }
    Ok((max_q_error(policy, &exact, &states)?, states.len()))
}

fn sched_train(a: SchedTrainArgs) -> Result<ExitCode> {
    let params = a.mdp.params()?;
    let train = TrainConfig {
        episodes: a.episodes.episodes,
        horizon: a.episodes.horizon,
        seed: a.episodes.seed,
        start: a.episodes.start.clone(),
    };
    let policy = train_policy(a.policy, &params, &train)?;
    println!(
        "trained {} policy: {} steps",
        policy.kind(),
        train.episodes * train.horizon
    );
    if a.oracle_check {
        let (err, n) = oracle_error(&policy, &params, &train.start)?;
        println!("oracle: max |Q - Q*| = {err:.6} over {n} states");
    }
    if let Some(path) = &a.out {
        let file = PolicyFile { params, train, policy };
        write_text(path, &serde_json::to_string_pretty(&file)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct OracleSummary {
    max_q_error: f64,
    states_checked: usize,
    optimal_mean_return: f64,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvaluationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleSummary>,
}

/// Acts greedily on exact Q*.
struct OptimalPolicy(exitlane_core::oracle::ValueIteration);

impl SchedulingPolicy for OptimalPolicy {
    fn choose(&self, v: &OccupancyState) -> exitlane_core::Result<usize> {
        self.0
            .optimal_action(v)
            .ok_or_else(|| exitlane_core::Error::InvalidConfig(format!("state {v} outside the solved space")))
    }

    fn kind(&self) -> &'static str {
        "optimal"
    }
}

fn sched_eval(a: SchedEvalArgs) -> Result<ExitCode> {
    let params = a.mdp.params()?;
    let policy = match &a.policy_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: PolicyFile = serde_json::from_str(&text).context("parsing policy file")?;
            if file.params.n_layers != params.n_layers {
                bail!(
                    "policy was trained for {} layers but the MDP has {}",
                    file.params.n_layers,
                    params.n_layers
                );
            }
            file.policy
        }
        None if a.policy == PolicyKind::Greedy => TrainedPolicy::Greedy,
        None => bail!("policy `{:?}` needs --policy-file from sched-train", a.policy),
    };
    let eval = EvalConfig {
        episodes: a.episodes.episodes,
        horizon: a.episodes.horizon,
        seed: a.episodes.seed,
        start: a.episodes.start.clone(),
    };
    let result = evaluate_policy(&policy, &params, &eval)?;
    let oracle = if a.oracle_check {
        let (max_q_error, states_checked) = oracle_error(&policy, &params, &eval.start)?;
        let optimal = OptimalPolicy(value_iteration(&params, 1e-12, 1_000_000)?);
        Some(OracleSummary {
            max_q_error,
            states_checked,
            optimal_mean_return: evaluate_policy(&optimal, &params, &eval)?.mean_return,
        })
    } else {
        None
    };
    let out = EvalOutput {
        report: EvaluationReport {
            params,
            policy_kind: policy.kind().to_string(),
            mean_return: result.mean_return,
            action_frequencies: result.action_frequencies,
        },
        oracle,
    };
    let text = serde_json::to_string_pretty(&out)?;
    match &a.report {
        Some(path) => write_text(path, &text)?,
        None => println!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn oracle(c: OracleCommand) -> Result<ExitCode> {
    match c {
        OracleCommand::ValueIteration {
            mdp,
            tol,
            max_iterations,
        } => {
            let params = mdp.params()?;
            let vi = value_iteration(&params, tol, max_iterations)?;
            let states =
                vi.q.iter()
                    .map(|(s, q)| StateQ {
                        state: s.clone(),
                        q: q.clone(),
                        best_action: vi.optimal_action(s).expect("solved state"),
                    })
                    .collect();
            let dump = ValueIterationDump {
                params,
                iterations: vi.iterations,
                residual: vi.residual,
                converged: vi.converged,
                states,
            };
            println!("{}", serde_json::to_string_pretty(&dump)?);
            Ok(if vi.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        OracleCommand::Decode {
            model,
            prompt,
            max_new,
            eos,
        } => {
            let model = model.build()?;
            let tokens = ReferenceDecoder::new(&model).generate(&prompt, max_new, Some(eos))?;
            println!("{}", serde_json::to_string(&tokens)?);
            Ok(ExitCode::SUCCESS)
        }
        OracleCommand::Check {
            model,
            workload,
            engine,
        } => {
            let model = model.build()?;
            let workload = workload.build(model.config().vocab_size)?;
            let config = engine.config(ExitTechnique::Never, exitlane_core::ThresholdSchedule::constant(1.0));
            let eos = config.eos_token;
            let mut runner = Engine::new(&model, config)?;
            runner.submit(&workload)?;
            let transcript = runner.run_to_completion()?;
            let mut sorted = workload.clone();
            sorted.sort_by_arrival();
            let mut mismatched = 0;
            for (req, seq) in sorted.requests.iter().zip(&transcript.sequences) {
                let expected = ReferenceDecoder::new(&model).generate(&req.prompt, req.max_new_tokens, eos)?;
                if expected != seq.tokens {
                    mismatched += 1;
                    eprintln!(
                        "sequence {}: engine {:?} vs reference {:?}",
                        seq.id, seq.tokens, expected
                    );
                }
            }
            println!("{} streams, {mismatched} mismatched", sorted.len());
            Ok(if mismatched == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
