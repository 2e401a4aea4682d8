use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use markflow::checkpoint::Checkpoint;
use markflow::config::{parse_config, schema_text, warnings, Config};
use markflow::data::{load_dataset, split, Dataset};
use markflow::hawkes::simulate_dataset;
use markflow::joint::{c_histogram, zero_bin};
use markflow::math::Rng;
use markflow::metrics::{evaluate, predict_events, EvalReport};
use markflow::train::train_with;

#[derive(Parser, Debug)]
#[command(name = "markflow", version, about = "Bayesian flow model for marked event sequences")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (and clears `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `joint_noise`.
    #[arg(long, global = true, value_enum)]
    joint_noise: Option<Switch>,
    /// Overrides `steps`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Prints every config key with its type and default, then exits.
    #[arg(long)]
    print_schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset from the config's hawkes section.
    Simulate,
    /// Trains one model per seed and writes checkpoints and loss logs.
    Train {
        /// Comma-separated seeds; overrides `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Scores checkpoints on the test split.
    Evaluate {
        /// A single checkpoint instead of the per-seed ones under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Writes next-event draws and point predictions for test events.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Maximum number of records.
        #[arg(short = 'n', long)]
        n: Option<usize>,
    },
    /// Prints the trained cross-covariance vector and its histogram.
    InspectC {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 11)]
        bins: usize,
    },
}

#[derive(Serialize)]
struct InputRecord {
    path: String,
    blob: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_sha256: String,
    seeds: Vec<u64>,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

/// Git-style content hash: SHA-256 over `blob <len>\0` followed by the bytes.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

struct Run {
    config: Config,
    config_text: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn write(&mut self, path: PathBuf, contents: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.outputs.contains(&path) {
            self.outputs.push(path);
        }
        Ok(())
    }

    fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.out().join(format!("seed-{seed}")).join("model.ckpt")
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        self.inputs.push(path.to_path_buf());
        Ok(ck)
    }

    /// The configured dataset, or the simulated one when no file is given.
    fn dataset(&mut self) -> Result<Dataset> {
        let m = self.config.marks()?;
        match (&self.config.dataset, &self.config.hawkes) {
            (Some(path), _) => {
                let path = path.clone();
                let d = load_dataset(&path, m).with_context(|| format!("loading {}", path.display()))?;
                self.inputs.push(path);
                Ok(d)
            }
            (None, Some(h)) => {
                let seqs = simulate_dataset(&h.spec, h.sequences, h.min_len, &Rng::new(self.config.split_seed))?;
                Ok(Dataset::new(seqs, m))
            }
            (None, None) => bail!("config sets neither `dataset` nor a hawkes section"),
        }
    }

    fn splits(&mut self) -> Result<(Dataset, Dataset, Dataset)> {
        let data = self.dataset()?;
        Ok(split(&data, self.config.split, &mut Rng::new(self.config.split_seed))?)
    }

    fn finish(mut self, command: &str, seeds: Vec<u64>) -> Result<()> {
        let mut inputs = Vec::new();
        for p in &self.inputs {
            let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            inputs.push(InputRecord { path: p.display().to_string(), blob: blob_hash(&bytes) });
        }
        let manifest = Manifest {
            command: command.to_string(),
            config_sha256: hex::encode(Sha256::digest(self.config_text.as_bytes())),
            seeds,
            inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let path = self.out().join(format!("run-manifest-{command}.json"));
        self.write(path, json.as_bytes())
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_schema {
        print!("{}", schema_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    let path = cli.config.context("--config is required")?;
    let mut config = parse_config(&path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.seeds.clear();
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(j) = cli.joint_noise {
        config.train.joint_noise = j == Switch::On;
    }
    if let Some(k) = cli.steps {
        if k == 0 {
            bail!("--steps must be positive");
        }
        config.train.steps = k;
    }
    for w in warnings(&config) {
        eprintln!("warning: {w}");
    }
    let config_text = config.to_text();
    let mut run = Run { config, config_text, inputs: vec![path], outputs: Vec::new() };
    match command {
        Command::Simulate => simulate(run),
        Command::Train { seeds } => {
            if let Some(s) = seeds {
                run.config.seeds = s;
            }
            train(run)
        }
        Command::Evaluate { checkpoint, seeds } => {
            if let Some(s) = seeds {
                run.config.seeds = s;
            }
            evaluate_cmd(run, checkpoint)
        }
        Command::Sample { checkpoint, n } => sample(run, checkpoint, n),
        Command::InspectC { checkpoint, bins } => inspect_c(run, checkpoint, bins),
    }
}

fn simulate(mut run: Run) -> Result<()> {
    let h = run.config.hawkes.clone().context("simulate needs a hawkes section in the config")?;
    let seed = run.config.split_seed;
    let seqs = simulate_dataset(&h.spec, h.sequences, h.min_len, &Rng::new(seed))?;
    let data = Dataset::new(seqs, h.spec.num_marks());
    let path = run.out().join("events.jsonl");
    run.write(path.clone(), data.to_text().as_bytes())?;
    println!(
        "wrote {} sequences, {} events to {}",
        data.sequences.len(),
        data.num_events(),
        path.display()
    );
    run.finish("simulate", vec![seed])
}

fn train(mut run: Run) -> Result<()> {
    let (train_set, _, _) = run.splits()?;
    let seeds = run.config.run_seeds();
    for &seed in &seeds {
        let cfg = run.config.with_seed(seed).train;
        let every = run.config.checkpoint_every;
        let mut log = String::from("epoch,mean_loss,vlb,wall_time\n");
        let mut periodic = Ok(());
        let (state, _) = train_with(&train_set, &cfg, |l, st| {
            log.push_str(&l.line().replace(", ", ","));
            log.push('\n');
            eprintln!("seed {seed} epoch {} loss {:.6}", l.epoch, l.mean_loss);
            if every > 0 && l.epoch % every == 0 && periodic.is_ok() {
                let ck = Checkpoint { state: st.clone(), rng: Rng::new(seed).state(), config_text: run.config_text.clone() };
                periodic = run.write(run.checkpoint_path(seed), &ck.to_bytes());
            }
            Ok(())
        })?;
        periodic?;
        let ck = Checkpoint { state, rng: Rng::new(seed).state(), config_text: run.config_text.clone() };
        let dir = run.out().join(format!("seed-{seed}"));
        run.write(dir.join("loss.csv"), log.as_bytes())?;
        run.write(run.checkpoint_path(seed), &ck.to_bytes())?;
        println!("seed {seed}: c = {:?}", ck.state.c());
    }
    run.finish("train", seeds)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn evaluate_cmd(mut run: Run, checkpoint: Option<PathBuf>) -> Result<()> {
    let (_, _, test) = run.splits()?;
    let targets: Vec<(u64, PathBuf)> = match checkpoint {
        Some(p) => vec![(run.config.seed(), p)],
        None => run.config.run_seeds().into_iter().map(|s| (s, run.checkpoint_path(s))).collect(),
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut lines = String::new();
    for (seed, path) in &targets {
        let ck = run.load_checkpoint(path)?;
        let mut scfg = run.config.with_seed(*seed).sample_config();
        scfg.joint_noise = ck.state.config.joint_noise;
        let report = evaluate(&test, &ck.state, &scfg)?;
        println!("seed {seed}\n{}", report.table());
        lines.push_str(&format!("{{\"seed\": {seed}, \"report\": {}}}\n", report.json_line()));
        reports.push(report);
    }
    if reports.len() > 1 {
        let col = |f: fn(&EvalReport) -> f64| mean_sd(&reports.iter().map(f).collect::<Vec<_>>());
        let (m, c, a) = (col(|r| r.mape), col(|r| r.crps), col(|r| r.acc));
        println!("over {} seeds: MAPE {:.4} ± {:.4}  CRPS {:.6} ± {:.6}  ACC {:.4} ± {:.4}", reports.len(), m.0, m.1, c.0, c.1, a.0, a.1);
        lines.push_str(&format!(
            "{{\"summary\": {{\"seeds\": {}, \"mape\": [{:?}, {:?}], \"crps\": [{:?}, {:?}], \"acc\": [{:?}, {:?}]}}}}\n",
            reports.len(),
            m.0,
            m.1,
            c.0,
            c.1,
            a.0,
            a.1
        ));
    }
    let path = run.out().join("eval.jsonl");
    run.write(path, lines.as_bytes())?;
    let seeds = targets.iter().map(|t| t.0).collect();
    run.finish("evaluate", seeds)
}

#[derive(Serialize)]
struct SampleRecord {
    sequence: u64,
    index: usize,
    true_tau: f64,
    true_mark: usize,
    pred_tau: f64,
    pred_mark: usize,
    draws: Vec<f64>,
}

fn sample(mut run: Run, checkpoint: Option<PathBuf>, n: Option<usize>) -> Result<()> {
    let (_, _, test) = run.splits()?;
    let seed = run.config.seed();
    let path = checkpoint.unwrap_or_else(|| run.checkpoint_path(seed));
    let ck = run.load_checkpoint(&path)?;
    let mut scfg = run.config.sample_config();
    scfg.joint_noise = ck.state.config.joint_noise;
    let outcomes = predict_events(&test, &ck.state, &scfg)?;
    let mut text = String::new();
    for o in outcomes.into_iter().take(n.unwrap_or(usize::MAX)) {
        let rec = SampleRecord {
            sequence: o.sequence_hash,
            index: o.index,
            true_tau: o.true_tau,
            true_mark: o.true_mark,
            pred_tau: o.pred_tau,
            pred_mark: o.pred_mark,
            draws: o.draws,
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    let out = run.out().join("samples.jsonl");
    run.write(out.clone(), text.as_bytes())?;
    println!("wrote {} records to {}", text.lines().count(), out.display());
    run.finish("sample", vec![seed])
}

fn inspect_c(mut run: Run, checkpoint: Option<PathBuf>, bins: usize) -> Result<()> {
    let seed = run.config.seed();
    let path = checkpoint.unwrap_or_else(|| run.checkpoint_path(seed));
    let ck = run.load_checkpoint(&path)?;
    let c = ck.state.c();
    let hist = c_histogram(&c, bins)?;
    let mut text = String::from("mark  c\n");
    for (j, v) in c.iter().enumerate() {
        text.push_str(&format!("{j:<4}  {v:+.6e}\n"));
    }
    text.push_str("\nbin_lo      bin_hi      count\n");
    for (i, b) in hist.iter().enumerate() {
        let tag = if i == zero_bin(bins) { "  (contains 0)" } else { "" };
        text.push_str(&format!("{:+.4}  {:+.4}  {}{tag}\n", b.lo, b.hi, b.count));
    }
    std::io::stdout().write_all(text.as_bytes())?;
    let out = run.out().join("c.txt");
    run.write(out, text.as_bytes())?;
    run.finish("inspect-c", vec![seed])
}
