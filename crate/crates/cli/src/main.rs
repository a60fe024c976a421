//! Batch front end: each subcommand loads a fixture and inputs, runs one
//! library operation, and writes its artifact with a run manifest.

mod config;
mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::anyhow;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use widesearch::agent::{policy_by_name, rollout_group, Policy};
use widesearch::curate::{prs, select_rl_set, RlSample};
use widesearch::env::Environment;
use widesearch::eval::{
    bench_table, benchmark_run, cas, epoch_table, fact_cases, robustness_protocol, robustness_table, BenchReport,
    DefaultJudge, EvidenceAnswerer, FirstResultAnswerer, RobustnessError, ShuffleMode, SourceTagAnswerer, Table,
};
use widesearch::reward::{EfficiencyReference, EpochReport, TrainerSim};
use widesearch::seed;
use widesearch::synth::{synth_chain_corpus, synth_mosaic_corpus, tool_necessity_filter, FamousFactsOracle, QAItem};
use widesearch::trajectory::Trajectory;
use widesearch::world::{demo_world, demo_world_jsonl, load_world, WorldFixture};

use config::{Effective, Profile};
use io::{FileDigest, Manifest};

/// Directories searched for fixture names, separated like `PATH`.
const FIXTURE_PATH_VAR: &str = "WIDESEARCH_FIXTURE_PATH";

#[derive(Debug, Parser)]
#[command(name = "widesearch", version, about = "Simulated parallel grounded-search agents: synthesis, rollouts, curation, reward simulation and evaluation")]
struct Cli {
    /// Root seed; every random draw in the run derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with [env], [reward] and [curation] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct WorldArg {
    /// `demo`, a fixture path, or a name looked up in WIDESEARCH_FIXTURE_PATH.
    #[arg(long, default_value = "demo")]
    world: String,
}

#[derive(Debug, Args, Default)]
struct EnvFlags {
    /// Budget profile before config-file and flag overrides.
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    max_turns: Option<usize>,
    #[arg(long)]
    max_tool_calls: Option<usize>,
    #[arg(long)]
    concurrency_limit: Option<usize>,
    #[arg(long)]
    misidentify_prob: Option<f64>,
}

#[derive(Debug, Args)]
struct QaInput {
    #[command(flatten)]
    world: WorldArg,
    /// QA corpus, one item per line.
    #[arg(long)]
    qa: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a fixture, check its integrity and print a summary.
    WorldCheck {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize multi-constraint questions from random walks.
    SynthQa {
        #[command(flatten)]
        world: WorldArg,
        /// Keep items a closed-book oracle already answers.
        #[arg(long)]
        no_necessity_filter: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize multi-entity questions over mosaic scenes.
    SynthMosaic {
        #[command(flatten)]
        world: WorldArg,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        no_necessity_filter: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a policy out on every item.
    Rollout {
        #[command(flatten)]
        input: QaInput,
        #[arg(long, default_value = "parallel-oracle")]
        policy: String,
        /// Rollouts per item.
        #[arg(long, default_value_t = 1)]
        group: usize,
        #[command(flatten)]
        env: EnvFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Progressive rejection sampling; writes the selected trajectories.
    CuratePrs {
        #[command(flatten)]
        input: QaInput,
        #[arg(long, default_value = "parallel-oracle")]
        policy: String,
        /// Ascending turn budgets, comma separated.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Rollouts per budget.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        env: EnvFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick medium-difficulty items and their initial efficiency references.
    SelectRl {
        #[command(flatten)]
        input: QaInput,
        #[arg(long, default_value = "stochastic:0.6")]
        policy: String,
        #[arg(long)]
        attempts: Option<usize>,
        #[command(flatten)]
        env: EnvFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate reward computation and reference tightening over epochs.
    TrainSim {
        #[command(flatten)]
        input: QaInput,
        /// RL set written by select-rl.
        #[arg(long)]
        rl: PathBuf,
        #[arg(long, default_value = "stochastic:0.6")]
        policy: String,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long)]
        group_size: Option<usize>,
        #[command(flatten)]
        env: EnvFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, rounds, tokens and cost-aware score per policy.
    EvalBench {
        #[command(flatten)]
        input: QaInput,
        /// Repeat for several policies.
        #[arg(long = "policy", default_values_t = ["parallel-oracle".to_string(), "serial-oracle".to_string()])]
        policies: Vec<String>,
        #[command(flatten)]
        env: EnvFlags,
        /// Also write the summary table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of evidence answerers as distractors are injected.
    EvalRobustness {
        #[command(flatten)]
        input: QaInput,
        /// `first-result` or `source-tag`; repeat for several.
        #[arg(long = "answerer", default_values_t = ["first-result".to_string(), "source-tag".to_string()])]
        answerers: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = widesearch::eval::DEFAULT_K_VALUES)]
        k: Vec<usize>,
        #[arg(long, default_value_t = widesearch::eval::DEFAULT_SHUFFLES)]
        shuffles: usize,
        /// Enumerate every ordering instead of sampling shuffles.
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        env: EnvFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cost-aware score from accuracy (fraction), tokens (thousands) and rounds.
    Cas {
        #[arg(long)]
        acc: f64,
        #[arg(long)]
        tok: f64,
        #[arg(long)]
        tool: f64,
    },
    /// Render a report written by eval-bench, eval-robustness or train-sim.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportFile {
    Bench { reports: Vec<BenchReport> },
    Train { epochs: Vec<EpochReport>, references: BTreeMap<String, EfficiencyReference> },
    Robustness { cases: usize, results: BTreeMap<String, Vec<(usize, f64)>> },
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Invalid(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

type Res<T> = Result<T, Failure>;

trait OrFail<T> {
    fn invalid(self) -> Res<T>;
    fn runtime(self) -> Res<T>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn invalid(self) -> Res<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> Res<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Shared state of one invocation: effective config, inputs read so far.
struct Run {
    name: &'static str,
    argv: Vec<String>,
    seed: u64,
    config: Effective,
    inputs: Vec<FileDigest>,
}

impl Run {
    fn world(&mut self, arg: &WorldArg) -> Res<Arc<WorldFixture>> {
        if arg.world == "demo" {
            self.inputs.push(FileDigest::of_bytes("demo", demo_world_jsonl().as_bytes()));
            return Ok(Arc::new(demo_world()));
        }
        let path = resolve_fixture(&arg.world).ok_or_else(|| {
            Failure::Invalid(anyhow!("fixture `{}` not found (searched the path and {FIXTURE_PATH_VAR})", arg.world))
        })?;
        let world = load_world(&path).invalid()?;
        self.inputs.push(FileDigest::of_file(&path).invalid()?);
        Ok(Arc::new(world))
    }

    fn qa(&mut self, path: &Path) -> Res<Vec<QAItem>> {
        let items: Vec<QAItem> = io::read_jsonl(path).invalid()?;
        self.inputs.push(FileDigest::of_file(path).invalid()?);
        Ok(items)
    }

    fn apply_env(&mut self, flags: &EnvFlags, cli: &Cli, default: Profile) -> Res<()> {
        if let Some(p) = flags.profile.filter(|p| *p != default) {
            self.config = config::load(cli.config.as_deref(), p).invalid()?;
        }
        let env = &mut self.config.env;
        if let Some(v) = flags.max_turns {
            env.max_turns = v;
        }
        if let Some(v) = flags.max_tool_calls {
            env.max_tool_calls = v;
        }
        if let Some(v) = flags.concurrency_limit {
            env.concurrency_limit = v;
        }
        if let Some(v) = flags.misidentify_prob {
            env.misidentify_prob = v;
        }
        Ok(())
    }

    fn validate(&self) -> Res<()> {
        for w in self.config.validate().invalid()? {
            eprintln!("warning: {w}");
        }
        Ok(())
    }

    /// Writes the artifact and `<out>.manifest.json` next to it.
    fn emit(&self, out: &Path, bytes: &[u8], extra: &[(&Path, &[u8])]) -> Res<()> {
        io::write_atomic(out, bytes).runtime()?;
        let mut outputs = vec![FileDigest::of_bytes(out.display().to_string(), bytes)];
        for (p, b) in extra {
            io::write_atomic(p, b).runtime()?;
            outputs.push(FileDigest::of_bytes(p.display().to_string(), b));
        }
        let manifest = Manifest {
            command: self.name,
            argv: &self.argv,
            seed: self.seed,
            config: &self.config,
            inputs: &self.inputs,
            outputs,
        };
        let mut text = serde_json::to_vec_pretty(&manifest).runtime()?;
        text.push(b'\n');
        io::write_atomic(&io::manifest_path(out), &text).runtime()
    }
}

fn resolve_fixture(name: &str) -> Option<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Some(direct);
    }
    let dirs = std::env::var_os(FIXTURE_PATH_VAR)?;
    std::env::split_paths(&dirs).find_map(|d| {
        [d.join(name), d.join(format!("{name}.jsonl"))].into_iter().find(|p| p.is_file())
    })
}

fn policy(name: &str) -> Res<Box<dyn Policy>> {
    policy_by_name(name).ok_or_else(|| {
        Failure::Usage(anyhow!(
            "unknown policy `{name}` (parallel-oracle, serial-oracle, spammer[:n], guesser[:text], babbler, stochastic[:p])"
        ))
    })
}

fn answerer(name: &str) -> Res<Box<dyn EvidenceAnswerer>> {
    match name {
        "first-result" => Ok(Box::new(FirstResultAnswerer)),
        "source-tag" => Ok(Box::new(SourceTagAnswerer)),
        _ => Err(Failure::Usage(anyhow!("unknown answerer `{name}` (first-result, source-tag)"))),
    }
}

fn pretty<T: Serialize>(v: &T) -> Res<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).runtime()?;
    b.push(b'\n');
    Ok(b)
}

fn necessity_filter(world: &WorldFixture, items: Vec<QAItem>, skip: bool) -> Vec<QAItem> {
    if skip {
        items
    } else {
        tool_necessity_filter(items, &FamousFactsOracle::new(world))
    }
}

fn default_profile(command: &Command) -> Profile {
    match command {
        Command::EvalBench { .. } => Profile::Evaluation,
        _ => Profile::Training,
    }
}

fn run(cli: &Cli, argv: Vec<String>) -> Res<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::Usage(anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().runtime()?;
    }
    let config = config::load(cli.config.as_deref(), default_profile(&cli.command)).invalid()?;
    let name = command_name(&cli.command);
    let mut run = Run { name, argv, seed: cli.seed, config, inputs: Vec::new() };
    let judge = DefaultJudge;

    match &cli.command {
        Command::WorldCheck { world, out } => {
            let w = run.world(world)?;
            let summary = serde_json::json!({
                "entities": w.entities().len(),
                "predicates": w.predicates().count(),
                "edges": w.edge_count(),
                "classes": w.class_names().len(),
                "abstract_values": w.abstract_values.len(),
                "bias_prone_types": w.bias_prone_types.len(),
                "distractor_topics": widesearch::env::distractor_counts(&w),
                "famous_facts": w.famous_facts.len(),
            });
            let bytes = pretty(&summary)?;
            print!("{}", String::from_utf8_lossy(&bytes));
            if let Some(out) = out {
                run.emit(out, &bytes, &[])?;
            }
        }
        Command::SynthQa { world, no_necessity_filter, out } => {
            let w = run.world(world)?;
            let items = necessity_filter(&w, synth_chain_corpus(&w, cli.seed), *no_necessity_filter);
            run.emit(out, &io::to_jsonl(&items), &[])?;
            println!("wrote {} constraint questions to {}", items.len(), out.display());
        }
        Command::SynthMosaic { world, n, no_necessity_filter, out } => {
            if *n == 0 {
                return Err(Failure::Usage(anyhow!("--n must be at least 1")));
            }
            let w = run.world(world)?;
            let items = necessity_filter(&w, synth_mosaic_corpus(&w, *n, cli.seed), *no_necessity_filter);
            run.emit(out, &io::to_jsonl(&items), &[])?;
            println!("wrote {} multi-entity questions to {}", items.len(), out.display());
        }
        Command::Rollout { input, policy: p, group, env, out } => {
            let pol = policy(p)?;
            run.apply_env(env, cli, Profile::Training)?;
            run.validate()?;
            if *group == 0 {
                return Err(Failure::Usage(anyhow!("--group must be at least 1")));
            }
            let w = run.world(&input.world)?;
            let items = run.qa(&input.qa)?;
            let environment = Environment::new(w, &run.config.env);
            let trajectories: Vec<Trajectory> = items
                .par_iter()
                .flat_map_iter(|qa| {
                    let s = seed::derive(cli.seed, &[seed::label(&qa.id)]);
                    rollout_group(pol.as_ref(), &environment, qa, *group, &run.config.env, s).trajectories
                })
                .collect();
            run.emit(out, &io::to_jsonl(&trajectories), &[])?;
            println!("wrote {} trajectories to {}", trajectories.len(), out.display());
        }
        Command::CuratePrs { input, policy: p, budgets, k, env, out } => {
            let pol = policy(p)?;
            run.apply_env(env, cli, Profile::Training)?;
            if let Some(b) = budgets {
                run.config.curation.budgets = b.clone();
            }
            if let Some(k) = k {
                run.config.curation.k = *k;
            }
            run.validate()?;
            let w = run.world(&input.world)?;
            let items = run.qa(&input.qa)?;
            let environment = Environment::new(w, &run.config.env);
            let outcomes: Vec<_> = items
                .par_iter()
                .map(|qa| prs(qa, pol.as_ref(), &judge, &environment, &run.config.env, &run.config.curation, cli.seed))
                .collect();
            let selected: Vec<Trajectory> = outcomes.iter().filter_map(|o| o.selected.as_ref().map(|s| s.1.clone())).collect();
            let mut per_budget: BTreeMap<usize, usize> = BTreeMap::new();
            for o in &outcomes {
                if let Some((b, _)) = &o.selected {
                    *per_budget.entry(*b).or_default() += 1;
                }
            }
            run.emit(out, &io::to_jsonl(&selected), &[])?;
            println!("kept {} of {} items; selections per budget: {:?}", selected.len(), items.len(), per_budget);
        }
        Command::SelectRl { input, policy: p, attempts, env, out } => {
            let pol = policy(p)?;
            run.apply_env(env, cli, Profile::Training)?;
            if let Some(a) = attempts {
                run.config.curation.attempts = *a;
            }
            run.validate()?;
            let w = run.world(&input.world)?;
            let items = run.qa(&input.qa)?;
            let environment = Environment::new(w, &run.config.env);
            let rl = select_rl_set(&items, pol.as_ref(), &judge, &environment, &run.config.env, run.config.curation.attempts, cli.seed);
            run.emit(out, &io::to_jsonl(&rl), &[])?;
            println!("selected {} of {} items", rl.len(), items.len());
        }
        Command::TrainSim { input, rl, policy: p, epochs, group_size, env, out } => {
            let pol = policy(p)?;
            run.apply_env(env, cli, Profile::Training)?;
            if let Some(g) = group_size {
                run.config.reward.group_size = *g;
            }
            run.validate()?;
            let w = run.world(&input.world)?;
            let items = run.qa(&input.qa)?;
            let rl_set: Vec<RlSample> = io::read_jsonl(rl).invalid()?;
            run.inputs.push(FileDigest::of_file(rl).invalid()?);
            let corpus: BTreeMap<String, QAItem> = items.into_iter().map(|q| (q.id.clone(), q)).collect();
            if let Some(missing) = rl_set.iter().find(|s| !corpus.contains_key(&s.qa_id)) {
                return Err(Failure::Invalid(anyhow!("RL item `{}` is not in the QA corpus", missing.qa_id)));
            }
            let environment = Environment::new(w, &run.config.env);
            let mut sim = TrainerSim::new(&rl_set, run.config.reward.clone());
            let reports: Vec<EpochReport> = (0..*epochs)
                .map(|_| sim.run_epoch(&corpus, pol.as_ref(), &environment, &run.config.env, &judge, cli.seed))
                .collect();
            print!("{}", epoch_table(&reports).to_text());
            let file = ReportFile::Train { epochs: reports, references: sim.references.clone() };
            run.emit(out, &pretty(&file)?, &[])?;
        }
        Command::EvalBench { input, policies, env, csv, out } => {
            let pols = policies.iter().map(|p| policy(p)).collect::<Res<Vec<_>>>()?;
            run.apply_env(env, cli, Profile::Evaluation)?;
            run.validate()?;
            let w = run.world(&input.world)?;
            let items = run.qa(&input.qa)?;
            if items.is_empty() {
                return Err(Failure::Invalid(anyhow!("QA corpus is empty")));
            }
            let environment = Environment::new(w, &run.config.env);
            let reports: Vec<BenchReport> = pols
                .iter()
                .map(|p| benchmark_run(p.as_ref(), &items, &environment, &run.config.env, &judge, cli.seed).0)
                .collect();
            let table = bench_table(&reports);
            print!("{}", table.to_text());
            let csv_bytes = table.to_csv().into_bytes();
            let extra: Vec<(&Path, &[u8])> = csv.iter().map(|p| (p.as_path(), csv_bytes.as_slice())).collect();
            run.emit(out, &pretty(&ReportFile::Bench { reports })?, &extra)?;
        }
        Command::EvalRobustness { input, answerers, k, shuffles, exhaustive, env, out } => {
            let named = answerers.iter().map(|a| Ok((a.clone(), answerer(a)?))).collect::<Res<Vec<_>>>()?;
            run.apply_env(env, cli, Profile::Training)?;
            run.validate()?;
            let w = run.world(&input.world)?;
            let items = run.qa(&input.qa)?;
            let environment = Environment::new(w, &run.config.env);
            let cases = fact_cases(&environment, &items, &run.config.env, cli.seed);
            if cases.is_empty() {
                return Err(Failure::Invalid(anyhow!("no single-fact cases could be built from the corpus")));
            }
            let mode = if *exhaustive { ShuffleMode::Exhaustive } else { ShuffleMode::Random(*shuffles) };
            let mut results = BTreeMap::new();
            for (name, a) in &named {
                let r = robustness_protocol(a.as_ref(), &cases, k, mode, &judge, cli.seed).map_err(|e| match e {
                    RobustnessError::K0NotPerfect(_) | RobustnessError::Distractors(_) => Failure::Invalid(e.into()),
                    RobustnessError::TooManyOrderings(_) => Failure::Usage(e.into()),
                })?;
                results.insert(name.clone(), r);
            }
            print!("{}", robustness_table(&results).to_text());
            run.emit(out, &pretty(&ReportFile::Robustness { cases: cases.len(), results })?, &[])?;
        }
        Command::Cas { acc, tok, tool } => {
            if ![acc, tok, tool].iter().all(|v| v.is_finite()) || *tok < 0.0 || *tool < 0.0 {
                return Err(Failure::Invalid(anyhow!("inputs must be finite and costs non-negative")));
            }
            if !(0.0..=1.0).contains(acc) {
                return Err(Failure::Invalid(anyhow!("--acc is a fraction in [0, 1]")));
            }
            println!("{:.3}", cas(*acc, *tok, *tool));
        }
        Command::Report { input, format, out } => {
            let text = std::fs::read_to_string(input).invalid()?;
            let file: ReportFile = serde_json::from_str(&text).invalid()?;
            run.inputs.push(FileDigest::of_bytes(input.display().to_string(), text.as_bytes()));
            let table: Table = match &file {
                ReportFile::Bench { reports } => bench_table(reports),
                ReportFile::Train { epochs, .. } => epoch_table(epochs),
                ReportFile::Robustness { results, .. } => robustness_table(results),
            };
            let rendered = match format {
                Format::Text => table.to_text(),
                Format::Csv => table.to_csv(),
            };
            match out {
                Some(o) => run.emit(o, rendered.as_bytes(), &[])?,
                None => print!("{rendered}"),
            }
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::WorldCheck { .. } => "world-check",
        Command::SynthQa { .. } => "synth-qa",
        Command::SynthMosaic { .. } => "synth-mosaic",
        Command::Rollout { .. } => "rollout",
        Command::CuratePrs { .. } => "curate-prs",
        Command::SelectRl { .. } => "select-rl",
        Command::TrainSim { .. } => "train-sim",
        Command::EvalBench { .. } => "eval-bench",
        Command::EvalRobustness { .. } => "eval-robustness",
        Command::Cas { .. } => "cas",
        Command::Report { .. } => "report",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
