use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use multigoal_core::agent::{EpochRecord, Trainer};
use multigoal_core::config::{ConfigError, RunConfig};
use multigoal_core::env::{render_ascii, Action, GridWorld, TraceRecord};
use multigoal_core::harness::{load_results, run_experiment, CellKey, CellRun, EvalReport, Hooks};
use multigoal_core::language::{
    enumerate_instructions, resolve_plan, Instruction, LanguageRecord, LanguageSubset,
};
use multigoal_core::oracle::BfsOracle;
use multigoal_core::policy::{evaluate_episodes, max_steps_for, GreedyPolicy, Policy};
use multigoal_core::qnet::{
    gradient_check, load_checkpoint, save_checkpoint, Fusion, GradCheckConfig, NetworkConfig,
};

/// Problems with the invocation or its inputs; exit status 1.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user<E: std::fmt::Display>(e: E) -> anyhow::Error {
    UserError(e.to_string()).into()
}

#[derive(Parser)]
#[command(
    name = "multigoal",
    version,
    about = "Order-connector language grounding in a GridWorld"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `dotted.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.agent.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every stochastic component.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg = cfg
                .apply_file(path)
                .map_err(|e| user(format!("{}: {e}", path.display())))?;
        }
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| user(format!("--set expects KEY=VALUE, got `{s}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            pairs.push(("experiment.seeds".into(), format!("[{seed}]")));
            pairs.push(("train.agent.seed".into(), seed.to_string()));
        }
        cfg.apply_pairs(&pairs).map_err(config_error)
    }
}

fn config_error(e: ConfigError) -> anyhow::Error {
    match e {
        ConfigError::Io(_) => anyhow::Error::new(e),
        other => user(other),
    }
}

#[derive(Args)]
struct InstructionArgs {
    /// Instruction text; repeatable.
    #[arg(long = "instruction", short = 'i')]
    instructions: Vec<String>,
    /// Language subset to enumerate when no instruction is given.
    #[arg(long, default_value = "comma")]
    subset: String,
    #[arg(long, default_value_t = 1)]
    min: usize,
    #[arg(long, default_value_t = 3)]
    max: usize,
}

impl InstructionArgs {
    fn resolve(&self) -> Result<Vec<Instruction>> {
        if !self.instructions.is_empty() {
            return self
                .instructions
                .iter()
                .map(|t| Instruction::parse(t).map_err(|e| user(format!("`{t}`: {e}"))))
                .collect();
        }
        let subset: LanguageSubset = self.subset.parse().map_err(user)?;
        enumerate_instructions(subset, self.min, self.max).map_err(user)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate a language subset as JSON lines.
    GenLang {
        #[arg(long, default_value = "comma")]
        subset: String,
        #[arg(long, default_value_t = 1)]
        min: usize,
        #[arg(long, default_value_t = 3)]
        max: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment grid and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy success rate of a checkpoint, or summary tables of result files.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Network checkpoint written by `train`.
        #[arg(long, conflicts_with = "results")]
        checkpoint: Option<PathBuf>,
        /// Result files to merge into the summary tables.
        #[arg(long, num_args = 1..)]
        results: Vec<PathBuf>,
        #[command(flatten)]
        instructions: InstructionArgs,
        /// Print one line per episode.
        #[arg(long)]
        verbose: bool,
    },
    /// Draw the layout, and roll out an episode when an instruction is given.
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short = 'i')]
        instruction: Option<String>,
        /// Act greedily with this checkpoint instead of the BFS oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the episode trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fill a replay buffer by training briefly and print its priority report.
    InspectReplay {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        instructions: InstructionArgs,
        #[arg(long, default_value_t = 2)]
        epochs: u64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Finite-difference check of the TD-loss gradient.
    Gradcheck {
        /// `ga`, `cat`, or `both`.
        #[arg(long, default_value = "both")]
        fusion: String,
        /// Check the full-size network instead of the small test network.
        #[arg(long)]
        full: bool,
        /// Coordinates sampled per tensor; all when omitted.
        #[arg(long)]
        coords: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    // Die quietly on a closed pipe (`multigoal gen-lang | head`) instead of
    // panicking inside print!.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) if e.is::<UserError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenLang {
            subset,
            min,
            max,
            out,
        } => gen_lang(&subset, min, max, out.as_deref()),
        Command::Train { config, out } => train(&config.resolve()?, &out),
        Command::Eval {
            config,
            checkpoint,
            results,
            instructions,
            verbose,
        } => {
            if !results.is_empty() {
                return summarize(&results);
            }
            let Some(ckpt) = checkpoint else {
                return Err(user("eval needs --checkpoint or --results"));
            };
            eval(&config.resolve()?, &ckpt, &instructions.resolve()?, verbose)
        }
        Command::Render {
            config,
            instruction,
            checkpoint,
            trace,
        } => render(
            &config.resolve()?,
            instruction.as_deref(),
            checkpoint.as_deref(),
            trace.as_deref(),
        ),
        Command::InspectReplay {
            config,
            instructions,
            epochs,
            bins,
        } => inspect_replay(&config.resolve()?, &instructions.resolve()?, epochs, bins),
        Command::Gradcheck {
            fusion,
            full,
            coords,
            seed,
            tolerance,
        } => gradcheck(&fusion, full, coords, seed, tolerance),
    }
}

fn gen_lang(subset: &str, min: usize, max: usize, out: Option<&Path>) -> Result<ExitCode> {
    let subset: LanguageSubset = subset.parse().map_err(user)?;
    let instrs = enumerate_instructions(subset, min, max).map_err(user)?;
    let mut text = String::new();
    for i in &instrs {
        let rec = LanguageRecord::from_instruction(i)?;
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    eprintln!("{} records", instrs.len());
    Ok(ExitCode::SUCCESS)
}

fn language_dump(cfg: &RunConfig) -> Result<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut text = String::new();
    for &subset in &cfg.experiment.subsets {
        for i in
            enumerate_instructions(subset, 1, cfg.experiment.total_max_subgoals).map_err(user)?
        {
            if seen.insert(i.text()) {
                text.push_str(&serde_json::to_string(&LanguageRecord::from_instruction(
                    &i,
                )?)?);
                text.push('\n');
            }
        }
    }
    Ok(text)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    cfg.experiment.validate().map_err(user)?;
    let layout = cfg.load_layout().map_err(config_error)?;
    cfg.train.validate(&layout).map_err(user)?;
    for sub in ["logs", "checkpoints"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.display()))?;
    }
    fs::write(out.join("config.txt"), cfg.to_text())?;
    layout.save(&out.join("layout.json"))?;
    fs::write(out.join("language.jsonl"), language_dump(cfg)?)?;
    let results = out.join("results.jsonl");
    if results.exists() {
        fs::remove_file(&results)?;
    }
    for entry in fs::read_dir(out.join("logs"))? {
        fs::remove_file(entry?.path())?;
    }

    let every = cfg.log.checkpoint_every;
    let progress = Mutex::new(());
    let on_epoch = |key: &CellKey,
                    t: &Trainer,
                    r: &EpochRecord|
     -> Result<(), multigoal_core::harness::HarnessError> {
        let slug = key.slug();
        let mut line = serde_json::to_string(r).expect("epoch record serializes");
        line.push('\n');
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("logs").join(format!("{slug}.jsonl")))?;
        f.write_all(line.as_bytes())?;
        if every > 0 && r.epoch.is_multiple_of(every) {
            let path = out
                .join("checkpoints")
                .join(format!("{slug}-e{}.ckpt", r.epoch));
            save_checkpoint(&t.online, &path).map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        let _g = progress.lock().expect("progress lock");
        eprintln!(
            "{slug} epoch {:>4} train success {:.3} eps {:.3}",
            r.epoch, r.train_success_rate, r.epsilon
        );
        Ok(())
    };
    let on_cell = |run: &CellRun| -> Result<(), multigoal_core::harness::HarnessError> {
        let path = out
            .join("checkpoints")
            .join(format!("{}.ckpt", run.result.key().slug()));
        save_checkpoint(&run.trainer_online, &path)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(())
    };
    let report = run_experiment(
        &cfg.experiment,
        &cfg.train,
        &layout,
        Some(&results),
        cfg.log.wall_time,
        Hooks {
            on_epoch: &on_epoch,
            on_cell: &on_cell,
        },
    )?;
    let tables = report.summary_tables();
    fs::write(out.join("summary.txt"), &tables)?;
    print!("{tables}");
    Ok(ExitCode::SUCCESS)
}

fn summarize(paths: &[PathBuf]) -> Result<ExitCode> {
    let mut cells = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(user(format!("{}: no such file", p.display())));
        }
        cells.extend(load_results(p).map_err(user)?.cells);
    }
    print!("{}", EvalReport { cells }.summary_tables());
    Ok(ExitCode::SUCCESS)
}

fn load_params(net: &NetworkConfig, path: &Path) -> Result<multigoal_core::qnet::ParameterSet> {
    if !path.exists() {
        return Err(user(format!("{}: no such file", path.display())));
    }
    load_checkpoint(path, net).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn eval(cfg: &RunConfig, ckpt: &Path, instrs: &[Instruction], verbose: bool) -> Result<ExitCode> {
    let layout = cfg.load_layout().map_err(config_error)?;
    let net = cfg.train.network;
    let params = load_params(&net, ckpt)?;
    let mut policy = GreedyPolicy::new(&net, &params);
    let sps = cfg.train.agent.steps_per_subgoal;
    let report = evaluate_episodes(&mut policy, &layout, &cfg.train.rewards, instrs, sps)?;
    if verbose {
        for (i, e) in instrs.iter().zip(&report.episodes) {
            println!("{:<8} {:>3} steps  {}", e.status.to_string(), e.steps, i);
        }
    }
    println!(
        "success rate {:.4} over {} instructions (mean steps {:.2})",
        report.success_rate(),
        instrs.len(),
        report.mean_steps()
    );
    Ok(ExitCode::SUCCESS)
}

fn render(
    cfg: &RunConfig,
    instruction: Option<&str>,
    checkpoint: Option<&Path>,
    trace: Option<&Path>,
) -> Result<ExitCode> {
    let layout = cfg.load_layout().map_err(config_error)?;
    let Some(text) = instruction else {
        let start = multigoal_core::env::EnvState::initial(
            &layout,
            multigoal_core::language::ExecutionPlan::new(vec![
                multigoal_core::language::Referent::Red,
            ]),
            1,
        )?;
        print!("{}", render_ascii(&layout, &start));
        return Ok(ExitCode::SUCCESS);
    };
    let instr = Instruction::parse(text).map_err(|e| user(format!("`{text}`: {e}")))?;
    let net = cfg.train.network;
    let params = checkpoint.map(|p| load_params(&net, p)).transpose()?;
    let mut oracle = BfsOracle;
    let mut greedy = params.as_ref().map(|p| GreedyPolicy::new(&net, p));
    let policy: &mut dyn Policy = match greedy.as_mut() {
        Some(g) => g,
        None => &mut oracle,
    };

    let mut env = GridWorld::new(layout.clone(), cfg.train.rewards);
    let plan = resolve_plan(&instr)?;
    println!("instruction: {instr}");
    println!(
        "plan: {}",
        plan.order()
            .iter()
            .map(|r| r.name())
            .collect::<Vec<_>>()
            .join(" -> ")
    );
    env.reset(
        plan,
        max_steps_for(&instr, cfg.train.agent.steps_per_subgoal),
    )?;
    policy.begin(&instr)?;
    print!("{}", render_ascii(&layout, env.state().expect("reset")));
    let mut records = Vec::new();
    loop {
        let (state, frames) = (env.state().expect("reset"), env.frames().expect("reset"));
        let action: Action = policy.act(&layout, state, frames)?;
        let out = env.step(action)?;
        let s = env.state().expect("reset");
        records.push(TraceRecord {
            step: s.steps,
            action,
            agent: s.agent,
            progress: s.progress,
            r_base: out.base_reward,
            r_shaped: out.reward,
            status: out.status,
        });
        println!(
            "\nstep {} {:?} reward {:+.3} {}",
            s.steps, action, out.reward, out.status
        );
        print!("{}", render_ascii(&layout, s));
        if out.done {
            break;
        }
    }
    if let Some(path) = trace {
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect_replay(
    cfg: &RunConfig,
    instrs: &[Instruction],
    epochs: u64,
    bins: usize,
) -> Result<ExitCode> {
    if epochs == 0 {
        bail!(UserError("--epochs must be at least 1".into()));
    }
    let layout = cfg.load_layout().map_err(config_error)?;
    let mut trainer = Trainer::new(cfg.train, layout).map_err(user)?;
    trainer.train(instrs, epochs)?;
    println!(
        "episodes: {}  env steps: {}  updates: {}",
        epochs as usize * instrs.len(),
        trainer.env_steps,
        trainer.updates
    );
    print!("{}", trainer.replay.report(bins));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(
    fusion: &str,
    full: bool,
    coords: Option<usize>,
    seed: u64,
    tolerance: f64,
) -> Result<ExitCode> {
    let fusions: Vec<Fusion> = match fusion {
        "both" => Fusion::ALL.to_vec(),
        f => vec![f.parse().map_err(user)?],
    };
    let gc = GradCheckConfig {
        tolerance,
        coords_per_tensor: coords,
        seed,
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    for f in fusions {
        let net = if full {
            NetworkConfig::default_for(10, 10, f)
        } else {
            NetworkConfig::tiny(f)
        };
        let report = gradient_check(&net, &gc)?;
        println!("fusion {f}  loss {:.6}", report.loss);
        for t in &report.tensors {
            println!(
                "  {:<18} {:>6} coords {:>4} kinks  max rel {:.3e}  max abs {:.3e}  {}",
                t.name,
                t.checked,
                t.skipped_kinks,
                t.max_rel_error,
                t.max_abs_error,
                if t.passed { "ok" } else { "FAIL" }
            );
        }
        ok &= report.passed();
    }
    println!(
        "{}",
        if ok {
            "gradient check passed"
        } else {
            "gradient check FAILED"
        }
    );
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
