use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use covbal::balance::{load_matches, save_matches, MatchIndex};
use covbal::covae::{load_model, save_model};
use covbal::pipeline::{
    self, distance_quantiles, Prepared, RunConfig, SamplerMode, SweepRow, Theorem, TESTENV_FLIPS,
};
use covbal::scmgen::{read_dataset, read_latents, write_dataset, write_latents, Dataset};
use covbal::trainer::{load_classifier, save_classifier};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "covbal", version, about = "Balanced mini-batch experiments on synthetic multi-environment data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a default run config as JSON.
    Config {
        #[arg(long, default_value_t = 20_000)]
        n_per_env: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "run")]
        output_dir: PathBuf,
    },
    /// Generate training and test environments.
    Gen(RunArgs),
    /// Fit the conditional VAE on the training split.
    TrainVae(RunArgs),
    /// Score every example and precompute nearest matches.
    Match(RunArgs),
    /// Train a classifier with the chosen sampler.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        sampler: ModeArg,
    },
    /// Accuracy of every trained classifier on fresh slices.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Flip probabilities to evaluate; defaults to train flips plus the test flip.
        #[arg(long, value_delimiter = ',')]
        envs: Vec<f64>,
        /// Evaluate classifiers trained under a different config.
        #[arg(long)]
        force: bool,
    },
    /// Run a verifier and print its JSON report.
    Verify {
        #[arg(long)]
        theorem: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one factor and write a CSV.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        sweep: SweepArg,
        /// Sampler for beta and a sweeps (default oracle).
        #[arg(long, value_enum)]
        sampler: Option<ModeArg>,
        /// Sweep values; defaults depend on the sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    Balanced,
    Oracle,
}

impl From<ModeArg> for SamplerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Random => SamplerMode::Random,
            ModeArg::Balanced => SamplerMode::Balanced,
            ModeArg::Oracle => SamplerMode::Oracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Beta,
    A,
    Testenv,
}

/// Config file: the run config plus where artifacts go.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    run: RunConfig,
    output_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Meta {
    command: String,
    config_hash: String,
}

enum Failure {
    Usage(String),
    Missing { path: PathBuf, command: &'static str },
    Verification(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome<T> = Result<T, Failure>;

fn run_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Run(e.into())
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
    hash: String,
}

impl Ctx {
    fn load(args: &RunArgs) -> Outcome<Self> {
        let text = std::fs::read_to_string(&args.config)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
        let file: FileConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("bad config {}: {e}", args.config.display())))?;
        file.run.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        let hash = config_hash(&file.run);
        let dir = match file.output_dir.is_relative() {
            true => args.config.parent().unwrap_or(Path::new(".")).join(&file.output_dir),
            false => file.output_dir,
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { cfg: file.run, dir, hash })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an upstream artifact, or the command that produces it.
    fn require(&self, name: &str, command: &'static str) -> Outcome<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Failure::Missing { path: p, command })
        }
    }

    fn write_meta(&self, artifact: &Path, command: &str) -> Outcome<()> {
        let meta = Meta { command: command.into(), config_hash: self.hash.clone() };
        let path = meta_path(artifact);
        let text = serde_json::to_string_pretty(&meta).map_err(run_err)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn write_text(&self, name: &str, command: &str, text: &str) -> Outcome<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.write_meta(&p, command)?;
        Ok(p)
    }

    fn train_data(&self) -> Outcome<Dataset> {
        let p = self.require(TRAIN, "gen")?;
        let mut data = read_dataset(&p).map_err(run_err)?;
        read_latents(&p.with_extension("latents"), &mut data).map_err(run_err)?;
        Ok(data)
    }

    fn test_data(&self) -> Outcome<Dataset> {
        let p = self.require(TEST, "gen")?;
        read_dataset(&p).map_err(run_err)
    }

    fn matches(&self) -> Outcome<MatchIndex> {
        load_matches(&self.require(MATCHES, "match")?).map_err(run_err)
    }

    fn prepared(&self, need_matches: bool) -> Outcome<Prepared> {
        let data = self.train_data()?;
        let (train, val) = pipeline::split(&self.cfg, &data).map_err(run_err)?;
        let test = self.test_data()?.envs.remove(0);
        let index = if need_matches { Some(self.matches()?) } else { None };
        Ok(Prepared { train, val, test, index })
    }
}

const TRAIN: &str = "train.cbds";
const TEST: &str = "test.cbds";
const VAE: &str = "vae.cbva";
const MATCHES: &str = "matches.cbmi";

fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn classifier_name(mode: SamplerMode) -> String {
    format!("classifier_{mode}.cbcl")
}

fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

/// Appends a `config_hash` column to every line of a CSV table.
fn with_hash(csv: &str, hash: &str) -> String {
    let mut out = String::with_capacity(csv.len() + 32 * csv.lines().count());
    for (i, line) in csv.lines().enumerate() {
        let cell = if i == 0 { "config_hash" } else { hash };
        let _ = writeln!(out, "{line},{cell}");
    }
    out
}

fn cmd_gen(ctx: &Ctx) -> Outcome<()> {
    let g = pipeline::generate(&ctx.cfg).map_err(run_err)?;
    for (name, data) in [(TRAIN, &g.train), (TEST, &g.test)] {
        let p = ctx.path(name);
        write_dataset(&p, data).map_err(run_err)?;
        write_latents(&p.with_extension("latents"), data).map_err(run_err)?;
        ctx.write_meta(&p, "gen")?;
    }
    eprintln!(
        "wrote {} training examples in {} envs and {} test examples to {}",
        g.train.n_examples(),
        g.train.n_envs(),
        g.test.n_examples(),
        ctx.dir.display()
    );
    Ok(())
}

fn cmd_train_vae(ctx: &Ctx) -> Outcome<()> {
    let data = ctx.train_data()?;
    let (train, _) = pipeline::split(&ctx.cfg, &data).map_err(run_err)?;
    let (model, curve) = pipeline::fit_vae(&ctx.cfg, &train).map_err(run_err)?;
    let p = ctx.path(VAE);
    save_model(&model, &p).map_err(run_err)?;
    ctx.write_meta(&p, "train-vae")?;
    let mut csv = String::from("epoch,train_elbo,eval_elbo,eval_kl\n");
    for r in &curve {
        let _ = writeln!(csv, "{},{},{},{}", r.epoch, r.train_elbo, r.eval_elbo, r.eval_kl);
    }
    ctx.write_text("vae_elbo.csv", "train-vae", &with_hash(&csv, &ctx.hash))?;
    if let Some(last) = curve.last() {
        eprintln!("latent dim {}, final held-out ELBO {:.4}", model.n, last.eval_elbo);
    }
    Ok(())
}

const QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

fn cmd_match(ctx: &Ctx) -> Outcome<()> {
    let data = ctx.train_data()?;
    let (train, _) = pipeline::split(&ctx.cfg, &data).map_err(run_err)?;
    let model = load_model(&ctx.require(VAE, "train-vae")?).map_err(run_err)?;
    let index = pipeline::build_matches(&ctx.cfg, &model, &train).map_err(run_err)?;
    let p = ctx.path(MATCHES);
    save_matches(&index, &p).map_err(run_err)?;
    ctx.write_meta(&p, "match")?;
    let mut csv = String::from("quantile,distance\n");
    for (q, d) in QUANTILES.iter().zip(distance_quantiles(&index, &QUANTILES)) {
        let _ = writeln!(csv, "{q},{d}");
    }
    ctx.write_text("match_stats.csv", "match", &with_hash(&csv, &ctx.hash))?;
    Ok(())
}

fn cmd_train(ctx: &Ctx, mode: SamplerMode) -> Outcome<()> {
    let prep = ctx.prepared(mode == SamplerMode::Balanced)?;
    let (clf, log) =
        pipeline::train(&ctx.cfg, mode, &prep.train, &prep.val, prep.index.as_ref()).map_err(run_err)?;
    let p = ctx.path(&classifier_name(mode));
    save_classifier(&clf, &p).map_err(run_err)?;
    ctx.write_meta(&p, "train")?;
    ctx.write_text(&format!("train_log_{mode}.csv"), "train", &with_hash(&log.to_csv(), &ctx.hash))?;
    eprintln!(
        "{mode}: selected step {} (validation accuracy {})",
        log.selected_step,
        log.selected_val_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn cmd_eval(ctx: &Ctx, envs: &[f64], force: bool) -> Outcome<()> {
    let flips: Vec<f64> = if envs.is_empty() {
        ctx.cfg.data.flip.iter().copied().chain([ctx.cfg.test_flip]).collect()
    } else {
        envs.to_vec()
    };
    if let Some(f) = flips.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Failure::Usage(format!("flip {f} not in [0, 1]")));
    }
    let mut columns = Vec::new();
    for mode in SamplerMode::ALL {
        let p = ctx.path(&classifier_name(mode));
        if !p.exists() {
            continue;
        }
        let meta: Meta = std::fs::read_to_string(meta_path(&p))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .ok_or_else(|| Failure::Missing { path: meta_path(&p), command: "train" })?;
        if meta.config_hash != ctx.hash && !force {
            return Err(Failure::Usage(format!(
                "{} was trained under config {} but the current config is {}; retrain or pass --force",
                p.display(),
                meta.config_hash,
                ctx.hash
            )));
        }
        let clf = load_classifier(&p).map_err(run_err)?;
        let evals = pipeline::eval_flips(&ctx.cfg, &clf, &flips).map_err(run_err)?;
        columns.push((mode, evals));
    }
    if columns.is_empty() {
        return Err(Failure::Missing { path: ctx.path(&classifier_name(SamplerMode::Random)), command: "train" });
    }
    let mut csv = String::from("env,flip");
    for (mode, _) in &columns {
        let _ = write!(csv, ",{mode}");
    }
    csv.push('\n');
    for (i, f) in flips.iter().enumerate() {
        let _ = write!(csv, "{i},{f}");
        for (_, evals) in &columns {
            let _ = write!(csv, ",{}", evals[i].accuracy);
        }
        csv.push('\n');
    }
    let table = with_hash(&csv, &ctx.hash);
    ctx.write_text("eval.csv", "eval", &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_verify(theorem: &str, seed: u64, out: Option<&Path>) -> Outcome<()> {
    let theorem: Theorem = theorem.parse().map_err(|e: pipeline::PipelineError| Failure::Usage(e.to_string()))?;
    let verdict = pipeline::verify(theorem, seed).map_err(run_err)?;
    let text = serde_json::to_string_pretty(&verdict).map_err(run_err)? + "\n";
    if let Some(p) = out {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{text}");
    if verdict.holds {
        Ok(())
    } else {
        Err(Failure::Verification(verdict.assertion))
    }
}

fn cmd_ablate(ctx: &Ctx, sweep: SweepArg, sampler: Option<ModeArg>, values: &[f64]) -> Outcome<()> {
    let mode = sampler.map(SamplerMode::from).unwrap_or(SamplerMode::Oracle);
    let m = ctx.cfg.data.m;
    let (name, rows): (&str, Vec<SweepRow>) = match sweep {
        SweepArg::Beta => {
            let prep = ctx.prepared(mode == SamplerMode::Balanced)?;
            let betas = if values.is_empty() { vec![0.0, 0.25, 0.5, 0.75, 1.0] } else { values.to_vec() };
            ("beta", pipeline::sweep_beta(&ctx.cfg, &prep, mode, &betas).map_err(run_err)?)
        }
        SweepArg::A => {
            let prep = ctx.prepared(mode == SamplerMode::Balanced)?;
            let a: Vec<usize> = if values.is_empty() {
                (1..m).collect()
            } else {
                values.iter().map(|&v| v as usize).collect()
            };
            if let Some(bad) = a.iter().find(|&&v| v == 0 || v >= m) {
                return Err(Failure::Usage(format!("a = {bad} must lie in 1..={}", m - 1)));
            }
            ("a", pipeline::sweep_a(&ctx.cfg, &prep, mode, &a).map_err(run_err)?)
        }
        SweepArg::Testenv => {
            let modes: Vec<SamplerMode> = match sampler {
                Some(s) => vec![SamplerMode::Random, s.into()],
                None => vec![SamplerMode::Random, SamplerMode::Balanced],
            };
            let prep = ctx.prepared(modes.contains(&SamplerMode::Balanced))?;
            let flips = if values.is_empty() { TESTENV_FLIPS.to_vec() } else { values.to_vec() };
            ("testenv", pipeline::sweep_testenv(&ctx.cfg, &prep, &modes, &flips).map_err(run_err)?)
        }
    };
    let mut csv = String::from("sweep,sampler,value,accuracy\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.sweep, r.sampler, r.value, r.accuracy);
    }
    let table = with_hash(&csv, &ctx.hash);
    ctx.write_text(&format!("ablate_{name}.csv"), "ablate", &table)?;
    print!("{table}");
    Ok(())
}

fn configure_threads() -> Outcome<()> {
    if let Ok(v) = std::env::var("CB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("CB_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(run_err)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome<()> {
    configure_threads()?;
    match cli.command {
        Command::Config { n_per_env, seed, output_dir } => {
            let file = FileConfig { run: RunConfig::colored_binary(n_per_env, seed), output_dir };
            println!("{}", serde_json::to_string_pretty(&file).map_err(run_err)?);
            Ok(())
        }
        Command::Gen(a) => cmd_gen(&Ctx::load(&a)?),
        Command::TrainVae(a) => cmd_train_vae(&Ctx::load(&a)?),
        Command::Match(a) => cmd_match(&Ctx::load(&a)?),
        Command::Train { run, sampler } => cmd_train(&Ctx::load(&run)?, sampler.into()),
        Command::Eval { run, envs, force } => cmd_eval(&Ctx::load(&run)?, &envs, force),
        Command::Verify { theorem, seed, out } => cmd_verify(&theorem, seed, out.as_deref()),
        Command::Ablate { run, sweep, sampler, values } => cmd_ablate(&Ctx::load(&run)?, sweep, sampler, &values),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(what)) => {
            eprintln!("verification failed: {what}");
            ExitCode::from(2)
        }
        Err(Failure::Missing { path, command }) => {
            eprintln!("error: missing {}; run `covbal {command}` first", path.display());
            ExitCode::from(3)
        }
    }
}
