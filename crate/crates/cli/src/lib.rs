//! The `dpaf` command-line tool: calibrate, train, generate, eval.
//!
//! Every artifact carries the digest of the run configuration that produced
//! it. Output goes to `--out`, else `$DPAF_OUT_DIR`, else the config's
//! `out_dir`, else `./dpaf-out`.

pub mod pgm;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dpaf_core::config::RunConfig;
use dpaf_core::data::{pixel_to_unit, unit_to_pixel, LabeledDataset};
use dpaf_core::mechanisms::FeatureTensor;
use dpaf_core::nn::{read_checkpoint, write_checkpoint, Checkpoint, Generator};
use dpaf_core::trainer::{calibrate, eval_downstream, generate_samples, run_pipeline};
use serde_json::json;

pub const OUT_DIR_ENV: &str = "DPAF_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "dpaf-out";

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const PRIVACY_FILE: &str = "privacy.json";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const METRICS_FILE: &str = "metrics.csv";

pub const METRICS_HEADER: [&str; 6] = ["config_digest", "generator_digest", "seed", "n_synthetic", "n_test", "accuracy"];
const MANIFEST_HEADER: [&str; 5] = ["file", "index", "channel", "label", "config_digest"];

#[derive(Debug, Parser)]
#[command(name = "dpaf", version, about = "Differentially private GAN training with aggregated discriminator features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate the noise multipliers for a config and write the report.
    Calibrate(RunArgs),
    /// Train a generator; writes its checkpoint, the ledger and the privacy statement.
    Train(RunArgs),
    /// Sample labeled images from a generator checkpoint as PGM files.
    Generate(GenerateArgs),
    /// Train a classifier on generated images and score it on the config's real test set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Labels to cycle through; all classes when absent.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Supplies the real test set and the evaluation classifier.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `generate`.
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dpaf_core::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 validation, 3 infeasible budget, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        use dpaf_core::Error as E;
        match self {
            CliError::Core(E::Io(_)) | CliError::Io { .. } => 4,
            CliError::Core(E::Infeasible(_) | E::NoConvergence(_) | E::BudgetExhausted { .. }) => 3,
            CliError::Core(_) | CliError::Invalid(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// `--out`, then the environment override, then the config, then the default.
pub fn resolve_out_dir(flag: Option<&Path>, env: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(env).or(config).unwrap_or(Path::new(DEFAULT_OUT_DIR)).to_path_buf()
}

fn prepare_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
        });
    }
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs one command. `env_out` is the value of [`OUT_DIR_ENV`], if set.
pub fn run(cli: &Cli, env_out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let res = match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a, env_out, stdout),
        Command::Train(a) => cmd_train(a, env_out, stdout),
        Command::Generate(a) => cmd_generate(a, env_out, stdout),
        Command::Eval(a) => cmd_eval(a, env_out, stdout),
    };
    stdout.flush().map_err(io_err(Path::new("<stdout>")))?;
    res
}

fn say(stdout: &mut dyn Write, line: impl std::fmt::Display) -> CliResult<()> {
    writeln!(stdout, "{line}").map_err(io_err(Path::new("<stdout>")))
}

pub fn cmd_calibrate(a: &RunArgs, env_out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let dir = resolve_out_dir(a.out.as_deref(), env_out, cfg.out_dir.as_deref());
    let (train, _) = cfg.datasets()?;
    let report = calibrate(&cfg, train.len())?;
    let digest = cfg.digest_hex();
    prepare_dir(&dir)?;
    let doc = json!({ "config_digest": digest, "report": report });
    write_file(&dir.join(CALIBRATION_FILE), pretty(&doc).as_bytes())?;
    say(stdout, format!("config {digest}"))?;
    say(stdout, format!("{:<7} {:>10} {:>12} {:>8} {:>10} {:>12}", "part", "epsilon", "sigma", "T", "gamma", "sensitivity"))?;
    for c in &report.components {
        say(
            stdout,
            format!(
                "{:<7} {:>10.4} {:>12.6} {:>8} {:>10.6} {:>12.4}",
                c.name, c.epsilon_budget, c.sigma, c.iterations, c.sampling_rate, c.sensitivity
            ),
        )?;
    }
    say(
        stdout,
        format!(
            "total epsilon {:.6} (target {}) at alpha {}, delta {:e}",
            report.achieved_epsilon, report.target_epsilon, report.alpha, report.delta
        ),
    )
}

pub fn cmd_train(a: &RunArgs, env_out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let dir = resolve_out_dir(a.out.as_deref(), env_out, cfg.out_dir.as_deref());
    let (train, _) = cfg.datasets()?;
    let run = run_pipeline(&cfg, &train)?;
    let digest = cfg.digest_hex();
    prepare_dir(&dir)?;

    write_file(&dir.join(CALIBRATION_FILE), pretty(&json!({ "config_digest": digest, "report": run.report })).as_bytes())?;
    let ckpt = Checkpoint { run_digest: cfg.digest(), net: cfg.net.clone(), params: run.generator.clone() };
    let path = dir.join(GENERATOR_FILE);
    write_checkpoint(&path, &ckpt)?;

    let mut ledger = serde_json::to_string(&json!({ "config_digest": digest })).expect("json");
    ledger.push('\n');
    ledger.push_str(&run.ledger.to_jsonl());
    write_file(&dir.join(LEDGER_FILE), ledger.as_bytes())?;

    let statement = json!({
        "config_digest": digest,
        "achieved_epsilon": run.achieved_epsilon,
        "delta": cfg.privacy.delta,
        "target_epsilon": cfg.privacy.epsilon,
        "sigmas": run.report.sigmas(),
        "accounted_releases": run.planned,
        "noise_releases": run.released,
    });
    write_file(&dir.join(PRIVACY_FILE), pretty(&statement).as_bytes())?;
    say(stdout, format!("config {digest}"))?;
    say(stdout, format!("noise releases (conv1, conv2, dpagg) = {:?}", run.released))?;
    say(stdout, format!("achieved (ε, δ) = ({:.6}, {:e})", run.achieved_epsilon, cfg.privacy.delta))?;
    say(stdout, format!("wrote {}", dir.display()))
}

pub fn cmd_generate(a: &GenerateArgs, env_out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let dir = resolve_out_dir(a.out.as_deref(), env_out, None);
    let k = ckpt.net.num_classes;
    if let Some(bad) = a.labels.iter().flatten().find(|&&l| l >= k) {
        return Err(CliError::Invalid(format!("label {bad} outside 0..{k}")));
    }
    let g = Generator::new(&ckpt.net)?;
    let samples = generate_samples(&g, &ckpt.params, a.labels.as_deref(), a.count, a.seed)?;
    let digest = hex(&ckpt.run_digest);
    prepare_dir(&dir)?;

    let (c, side) = (samples.channels(), samples.side());
    let mpath = dir.join(MANIFEST_FILE);
    let mut manifest = csv::Writer::from_path(&mpath).map_err(|e| csv_err(&mpath, e))?;
    manifest.write_record(MANIFEST_HEADER).map_err(|e| csv_err(&mpath, e))?;
    for i in 0..samples.len() {
        let label = samples.labels()[i];
        for (ch, plane) in samples.image(i).chunks(side * side).enumerate() {
            let name = if c == 1 { format!("sample_{i:06}.pgm") } else { format!("sample_{i:06}_c{ch}.pgm") };
            let pixels: Vec<u8> = plane.iter().map(|&v| unit_to_pixel(v)).collect();
            let comment = format!("dpaf config {digest} label {label}");
            write_file(&dir.join(&name), &pgm::encode(side, side, &pixels, Some(&comment)))?;
            manifest
                .write_record([name, i.to_string(), ch.to_string(), label.to_string(), digest.clone()])
                .map_err(|e| csv_err(&mpath, e))?;
        }
    }
    manifest.flush().map_err(io_err(&mpath))?;
    say(stdout, format!("config {digest}"))?;
    say(stdout, format!("wrote {} images ({c} channel(s) each) to {}", samples.len(), dir.display()))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
            _ => unreachable!(),
        }
    } else {
        CliError::Invalid(format!("{}: {e}", path.display()))
    }
}

/// Reads a `generate` directory back; returns the images and the digest
/// of the generator's run.
pub fn read_synthetic(dir: &Path, num_classes: usize) -> CliResult<(LabeledDataset, String)> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(CliError::Io {
            path: mpath,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        });
    }
    let mut reader = csv::Reader::from_path(&mpath).map_err(|e| csv_err(&mpath, e))?;
    let header = reader.headers().map_err(|e| csv_err(&mpath, e))?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(CliError::Invalid(format!("{}: unexpected header", mpath.display())));
    }
    // index → (label, channel → plane)
    let mut images: BTreeMap<usize, (usize, BTreeMap<usize, Vec<f64>>)> = BTreeMap::new();
    let mut digest: Option<String> = None;
    let mut side = None;
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(&mpath, e))?;
        let field = |i: usize| -> CliResult<usize> {
            row[i].parse().map_err(|_| CliError::Invalid(format!("{}: bad number `{}`", mpath.display(), &row[i])))
        };
        let (index, channel, label) = (field(1)?, field(2)?, field(3)?);
        if label >= num_classes {
            return Err(CliError::Invalid(format!("label {label} outside 0..{num_classes}")));
        }
        match &digest {
            Some(d) if d != &row[4] => return Err(CliError::Invalid("manifest mixes generator runs".into())),
            Some(_) => {}
            None => digest = Some(row[4].to_string()),
        }
        let path = dir.join(&row[0]);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let img = pgm::decode(&bytes).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        if img.width != img.height || side.is_some_and(|s| s != img.width) {
            return Err(CliError::Invalid(format!("{}: images must share one square size", path.display())));
        }
        side = Some(img.width);
        let entry = images.entry(index).or_insert_with(|| (label, BTreeMap::new()));
        if entry.0 != label || entry.1.insert(channel, img.pixels.iter().map(|&p| pixel_to_unit(p)).collect()).is_some() {
            return Err(CliError::Invalid(format!("inconsistent manifest entry for image {index}")));
        }
    }
    let (Some(side), Some(digest)) = (side, digest) else {
        return Err(CliError::Invalid(format!("{}: no images", mpath.display())));
    };
    let channels = images.values().next().map_or(0, |(_, planes)| planes.len());
    let mut data = Vec::with_capacity(images.len() * channels * side * side);
    let mut labels = Vec::with_capacity(images.len());
    for (index, (label, planes)) in images {
        if planes.len() != channels || planes.keys().copied().ne(0..channels) {
            return Err(CliError::Invalid(format!("image {index} has channels {:?}", planes.keys().collect::<Vec<_>>())));
        }
        planes.into_values().for_each(|p| data.extend(p));
        labels.push(label);
    }
    let n = labels.len();
    let tensor = FeatureTensor::new(data, [n, channels, side, side])?;
    Ok((LabeledDataset::new(tensor, labels, num_classes)?, digest))
}

pub fn cmd_eval(a: &EvalArgs, env_out: Option<&Path>, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let dir = resolve_out_dir(a.out.as_deref(), env_out, cfg.out_dir.as_deref());
    let (synthetic, generator_digest) = read_synthetic(&a.synthetic, cfg.net.num_classes)?;
    let (_, test) = cfg.datasets()?;
    if synthetic.side() != test.side() || synthetic.channels() != test.channels() {
        return Err(CliError::Invalid("synthetic and test images differ in shape".into()));
    }
    let net = cfg.eval.net.as_ref().unwrap_or(&cfg.net);
    let accuracy = eval_downstream(&synthetic, &test, net, &cfg.eval, cfg.seed)?;
    let digest = cfg.digest_hex();

    prepare_dir(&dir)?;
    let mpath = dir.join(METRICS_FILE);
    let fresh = fs::metadata(&mpath).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new().create(true).append(true).open(&mpath).map_err(io_err(&mpath))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(METRICS_HEADER).map_err(|e| csv_err(&mpath, e))?;
    }
    w.write_record([
        digest.clone(),
        generator_digest,
        cfg.seed.to_string(),
        synthetic.len().to_string(),
        test.len().to_string(),
        accuracy.to_string(),
    ])
    .map_err(|e| csv_err(&mpath, e))?;
    w.flush().map_err(io_err(&mpath))?;
    say(stdout, format!("config {digest}"))?;
    say(stdout, format!("accuracy {accuracy:.4} ({} synthetic, {} real test)", synthetic.len(), test.len()))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
