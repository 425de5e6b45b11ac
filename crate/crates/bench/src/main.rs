use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rmha_bench::campaign::{run_campaign, Campaign};
use rmha_bench::config::BenchConfig;
use rmha_bench::error::write_file;
use rmha_bench::instance::{read_instance, write_scenario, Instance};
use rmha_bench::movingai::write_map;
use rmha_bench::solution::SolutionFile;
use rmha_bench::solver::{execute_plan, run_policy, Solver};
use rmha_bench::trace::Trace;
use rmha_bench::{checkpoint, plot, training, BenchError};
use rmha_core::gradcheck::{run_all, TOLERANCE};
use rmha_core::rmha_comm::CommMode;

const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "rmha", version, about = "Multi-agent path finding benchmarks with attention communication")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Rmha,
    GraphComm,
    None,
}

impl From<Variant> for CommMode {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Rmha => CommMode::Rmha,
            Variant::GraphComm => CommMode::GraphComm,
            Variant::None => CommMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Planner {
    Cbs,
    CaStar,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded map and scenario.
    Generate {
        #[arg(long, default_value_t = 10)]
        size: usize,
        #[arg(long, default_value_t = 0.0)]
        density: f64,
        /// Agent count; the config's `agents` when omitted.
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Train one communication variant.
    Train {
        #[arg(long, value_enum, default_value = "rmha")]
        variant: Variant,
        /// Overrides `train.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run an evaluation campaign over planners and checkpoints.
    Eval {
        /// Learned policy to evaluate; repeatable.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Skip the CBS and cooperative A* baselines.
        #[arg(long)]
        no_planners: bool,
        /// Overrides `campaign.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Take the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Plan one instance with a classical solver.
    Solve {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "cbs")]
        solver: Planner,
        /// Store the planning wall time in the solution file.
        #[arg(long)]
        record_time: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Render a trace as SVG and text.
    Plot {
        #[arg(long, required_unless_present = "corridor")]
        trace: Option<PathBuf>,
        /// Play the canned corridor scenario (CBS, or the given checkpoint) and plot it.
        #[arg(long, conflicts_with = "trace")]
        corridor: bool,
        #[arg(long, requires = "corridor")]
        checkpoint: Option<PathBuf>,
        /// Also write one text frame per step.
        #[arg(long)]
        frames: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> rmha_bench::Result<ExitCode> {
    let Common { seed, config, out } = cli.common;
    let config = BenchConfig::load_or_default(config.as_deref())?;
    match cli.command {
        Command::Generate { size, density, agents } => {
            let instance = Instance::generate(size, density, agents.unwrap_or(config.agents), seed)?;
            write_map(&out.join("map.map"), &instance.map)?;
            write_scenario(&out.join("scenario.csv"), &instance.tasks)?;
            println!("instance {} written to {}", instance.hash(), out.display());
        }
        Command::Train { variant, steps, quiet } => {
            let mut config = config;
            if let Some(steps) = steps {
                config.train.total_steps = steps;
            }
            let started = Instant::now();
            let mut report = |r: &training::LogRecord| {
                if !quiet {
                    println!(
                        "round {:4}  steps {:7}  reward {:8.4}  sr {:5.1}%  entropy {:.3}",
                        r.round, r.env_steps, r.mean_reward, r.recent_sr, r.entropy
                    );
                }
            };
            let outcome = training::run_training(&config, variant.into(), seed, Some(&out), &mut report)?;
            let sr = outcome.log.last().map_or(0.0, |r| r.recent_sr);
            println!(
                "trained {} rounds in {:.1}s, final window success rate {sr:.1}%, model at {}",
                outcome.log.len(),
                started.elapsed().as_secs_f64(),
                out.join("model.ckpt").display()
            );
            if let Some(e) = outcome.error {
                return Err(e.into());
            }
        }
        Command::Eval {
            checkpoint: paths,
            no_planners,
            episodes,
            greedy,
        } => {
            let mut solvers = if no_planners { Vec::new() } else { Campaign::planners(&config.campaign) };
            for (k, path) in paths.iter().enumerate() {
                let model = checkpoint::load(path)?;
                let base = model.config.mode.name();
                let taken = solvers.iter().any(|s| s.name() == base);
                let name = if taken { format!("{base}_{k}") } else { base.to_string() };
                solvers.push(Solver::Policy {
                    name,
                    model: Arc::new(model),
                    greedy,
                });
            }
            let mut section = config.campaign.clone();
            if let Some(e) = episodes {
                section.episodes = e;
            }
            let campaign = Campaign::from_section(&section, config.env()?, solvers);
            let result = run_campaign(&campaign)?;
            result.write(&out)?;
            for m in &result.metrics {
                println!(
                    "{:>3}x{:<3} density {:.2} agents {:3}  {:<12} SR {:5.1}% [{:5.1}, {:5.1}]  MR {:5.2}  CO {:.4}",
                    m.size, m.size, m.density, m.agents, m.solver, m.sr, m.sr_lo, m.sr_hi, m.mr, m.co
                );
            }
            println!("tables and traces written to {}", out.display());
        }
        Command::Solve {
            map,
            scenario,
            solver,
            record_time,
        } => {
            let instance = read_instance(&map, &scenario)?;
            let solver = match solver {
                Planner::Cbs => Solver::Cbs {
                    max_expansions: config.campaign.cbs_max_expansions,
                    timeout: None,
                },
                Planner::CaStar => Solver::CaStar,
            };
            let plan = solver.plan(&instance).expect("planner")?;
            let mut file = SolutionFile::new(solver.name(), &instance.hash(), &plan.solution, plan.optimal);
            if record_time {
                file.wall_time_ms = Some(plan.wall_time.as_secs_f64() * 1e3);
            }
            file.write(&out.join("solution.json"))?;
            let trace = execute_plan(solver.name(), &plan.solution, &instance, seed, config.env()?)?;
            trace.write(&out.join("trace.jsonl"))?;
            let collisions: usize = trace.steps.iter().map(|s| s.collisions.iter().filter(|&&c| c).count()).sum();
            println!(
                "{} makespan {} soc {} optimal {} replay collisions {collisions}",
                solver.name(),
                plan.solution.makespan,
                plan.solution.soc,
                plan.optimal
            );
        }
        Command::Gradcheck => {
            let started = Instant::now();
            let mut ok = true;
            for report in run_all(seed)? {
                let pass = report.passed(TOLERANCE);
                ok &= pass;
                println!("{:<24} worst {:.2e}  {}", report.suite, report.worst(), if pass { "ok" } else { "FAILED" });
                for t in report.tensors.iter().filter(|t| t.max_rel_error >= TOLERANCE) {
                    println!("    {} ({} entries): {:.2e}", t.name, t.entries, t.max_rel_error);
                }
            }
            println!("gradcheck finished in {:.1}s", started.elapsed().as_secs_f64());
            if !ok {
                return Ok(ExitCode::from(EXIT_CHECK));
            }
        }
        Command::Plot {
            trace,
            corridor,
            checkpoint: ckpt,
            frames,
        } => {
            let trace = match trace {
                Some(path) => Trace::read(&path)?,
                None => corridor_trace(ckpt.as_deref(), seed, &config)?,
            };
            write_file(&out.join("overlay.svg"), plot::svg(&trace)?)?;
            write_file(&out.join("overlay.txt"), plot::text(&trace)?)?;
            if frames || corridor {
                let board = plot::storyboard(&trace)?;
                write_file(&out.join("storyboard.txt"), &board)?;
            }
            if corridor {
                trace.write(&out.join("trace.jsonl"))?;
                let yields = plot::yield_steps(&trace)?;
                let last = trace.positions_at(trace.steps.len());
                let done = last.iter().zip(&trace.header.goals).all(|(c, g)| [c.x, c.y] == *g);
                println!("corridor: {} steps, goals reached {done}, yield steps {yields:?}", trace.steps.len());
            }
            print!("{}", plot::text(&trace)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn corridor_trace(ckpt: Option<&Path>, seed: u64, config: &BenchConfig) -> rmha_bench::Result<Trace> {
    let instance = Instance::corridor();
    let env = config.env()?;
    match ckpt {
        Some(path) => {
            let model = checkpoint::load(path)?;
            if model.config.policy.fov != env.fov {
                return Err(BenchError::Config("checkpoint field of view differs from the configuration".into()));
            }
            run_policy(model.config.mode.name(), &model, false, &instance, seed, env)
        }
        None => Ok(Solver::Cbs {
            max_expansions: config.campaign.cbs_max_expansions,
            timeout: None,
        }
        .run(&instance, seed, env)?
        .trace),
    }
}
