use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use ccreid::config::Config;
use ccreid::datamodel::{load_dataset, write_labels, write_rgb, DatasetIndex, LabelMap};
use ccreid::evaluation::{evaluate_modes, format_results, EvalMode, EvalRecord};
use ccreid::masking::{apply_pixel_mask, clothing_region_mask, DEFAULT_FILL};
use ccreid::model::{resize_labels, resize_rgb, upscale_attention, Model, Variant};
use ccreid::network::Checkpoint;
use ccreid::synthdata::generate_split;
use ccreid::training::{ablate, format_metrics, ABLATION_HEADER, model_from_checkpoint, RunStatus, Trainer, METRICS_HEADER};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ccreid", version, about = "Clothing-change person re-identification toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set loss.lambda=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Model variant: baseline, ikt, cbd, ifd-cl or ifd.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,
    /// Seed for data synthesis, initialization and sampling.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with train/query/gallery manifests.
    Generate,
    /// Train a model (attention pretraining, then joint training).
    Train {
        /// Pretraining and joint-training epochs.
        #[arg(long, num_args = 2, value_names = ["PHASE1", "PHASE2"])]
        epochs: Option<Vec<usize>>,
        /// Continue from a training checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop after this many steps (resumable).
        #[arg(long, value_name = "N")]
        max_steps: Option<u64>,
    },
    /// Evaluate a checkpoint on the query/gallery split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::All)]
        mode: ModeArg,
        /// Use one-hot identity features instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and evaluate every variant under one seed.
    Ablate,
    /// Write attention maps as grayscale images.
    DumpAttention {
        /// Trained checkpoint; an untrained model is used when omitted.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which manifest to read samples from.
        #[arg(long, value_enum, default_value_t = SplitArg::Query)]
        split: SplitArg,
        /// Maximum number of samples.
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
        /// Also write clothing-masked images and clothing masks.
        #[arg(long)]
        masks: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    General,
    Sc,
    Cc,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<EvalMode> {
        match self {
            ModeArg::General => vec![EvalMode::General],
            ModeArg::Sc => vec![EvalMode::SameClothing],
            ModeArg::Cc => vec![EvalMode::ClothingChange],
            ModeArg::All => EvalMode::ALL.to_vec(),
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Train,
    Query,
    Gallery,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ccreid::Error> for Failure {
    fn from(e: ccreid::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let config = effective_config(&cli.common)?;
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Generate => cmd_generate(config, cli.common.out.as_deref()),
        Command::Train {
            epochs,
            resume,
            max_steps,
        } => {
            let mut config = config;
            if let Some(e) = epochs {
                config.train.phase1_epochs = e[0];
                config.train.phase2_epochs = e[1];
            }
            cmd_train(&config, &out, resume.as_deref(), max_steps)
        }
        Command::Eval {
            checkpoint,
            mode,
            oracle,
        } => cmd_eval(&config, &out, checkpoint.as_deref(), mode, oracle),
        Command::Ablate => cmd_ablate(&config, &out),
        Command::DumpAttention {
            checkpoint,
            split,
            limit,
            masks,
        } => cmd_dump_attention(&config, &out, checkpoint.as_deref(), split, limit, masks),
    }
}

/// Defaults, then the config file, then `--set` overrides, then dedicated flags.
fn effective_config(common: &Common) -> std::result::Result<Config, Failure> {
    let mut config = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(anyhow::anyhow!("config file not found: {}", path.display())));
            }
            Config::from_file(path).map_err(usage)?
        }
        None => Config::default(),
    };
    for o in &common.overrides {
        config.set(o).map_err(usage)?;
    }
    if let Some(v) = &common.variant {
        config.train.variant = v.parse::<Variant>().map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        config.synth.seed = seed;
        config.train.seed = seed;
        config.sampler.seed = seed;
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn echo_config(config: &Config, dir: &Path) -> anyhow::Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), &config.to_toml_string())
}

fn load_split(config: &Config, name: &str) -> anyhow::Result<DatasetIndex> {
    let manifest = config.data.manifest(name);
    load_dataset(Path::new(&config.data.root), &manifest)
        .with_context(|| format!("loading {}", manifest.display()))
}

fn cmd_generate(mut config: Config, out: Option<&Path>) -> CmdResult {
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(&config.data.root),
    };
    config.data.root = dir.display().to_string();
    create_dir(&dir)?;
    let m = generate_split(&config.synth, &dir)?;
    echo_config(&config, &dir)?;
    for p in [&m.all, &m.train, &m.query, &m.gallery] {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_train(config: &Config, out: &Path, resume: Option<&Path>, max_steps: Option<u64>) -> CmdResult {
    let train = load_split(config, &config.data.train)?;
    let mut trainer = Trainer::new(config, &train)?;
    create_dir(out)?;
    let metrics_path = out.join("metrics.tsv");
    let mut metrics = if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        trainer
            .restore(&ck)
            .with_context(|| format!("cannot resume from {}", path.display()))?;
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&metrics_path)
    } else {
        fs::File::create(&metrics_path).and_then(|mut f| writeln!(f, "{METRICS_HEADER}").map(|_| f))
    }
    .with_context(|| format!("cannot open {}", metrics_path.display()))?;
    echo_config(config, out)?;

    let mut io_error = None;
    let status = trainer.run(&train, max_steps, &mut |r| {
        if io_error.is_none() {
            if let Err(e) = writeln!(metrics, "{}", r.to_row()) {
                io_error = Some(e);
            }
        }
    });
    let ck_path = out.join("checkpoint.ckpt");
    match status {
        Ok(s) => {
            trainer.save(&ck_path)?;
            if let Some(e) = io_error {
                return Err(anyhow::Error::from(e).context("writing metrics").into());
            }
            let what = if s == RunStatus::Finished { "finished" } else { "paused" };
            println!(
                "{what} {} at step {}; checkpoint {}",
                trainer.variant().name(),
                trainer.progress.global_step,
                ck_path.display()
            );
            Ok(())
        }
        Err(e) => {
            // keep the last good state for inspection
            let _ = trainer.save(&out.join("checkpoint.failed.ckpt"));
            Err(e.into())
        }
    }
}

fn oracle_records(index: &DatasetIndex, dim: usize) -> Vec<EvalRecord> {
    index
        .samples()
        .iter()
        .map(|s| {
            let mut f = vec![0.0; dim];
            f[s.identity as usize % dim] = 1.0;
            EvalRecord {
                feature: f,
                identity: s.identity,
                clothing: s.clothing,
                camera: s.camera,
            }
        })
        .collect()
}

fn cmd_eval(config: &Config, out: &Path, checkpoint: Option<&Path>, mode: ModeArg, oracle: bool) -> CmdResult {
    let query = load_split(config, &config.data.query)?;
    let gallery = load_split(config, &config.data.gallery)?;
    let (q, g) = if oracle {
        let dim = query
            .identities()
            .into_iter()
            .chain(gallery.identities())
            .max()
            .map_or(1, |m| m as usize + 1);
        (oracle_records(&query, dim), oracle_records(&gallery, dim))
    } else {
        let path = checkpoint.map_or_else(|| out.join("checkpoint.ckpt"), Path::to_path_buf);
        if !path.is_file() {
            return Err(usage(anyhow::anyhow!("checkpoint not found: {}", path.display())));
        }
        let model = model_from_checkpoint(&Checkpoint::load(&path)?)?;
        let vocab = config.data.vocabulary()?;
        (
            ccreid::training::extract_features(&model, &query, &vocab)?,
            ccreid::training::extract_features(&model, &gallery, &vocab)?,
        )
    };
    let results = evaluate_modes(&q, &g, &mode.modes())?;
    let text = format_results(&results);
    create_dir(out)?;
    write_file(&out.join("results.toml"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_ablate(config: &Config, out: &Path) -> CmdResult {
    let train = load_split(config, &config.data.train)?;
    let query = load_split(config, &config.data.query)?;
    let gallery = load_split(config, &config.data.gallery)?;
    create_dir(out)?;
    echo_config(config, out)?;
    let rows = ablate(config, &train, &query, &gallery, &mut |row| {
        let dir = out.join(row.variant.name());
        fs::create_dir_all(&dir).map_err(|e| ccreid::Error::io(&dir, e))?;
        row.trainer.save(&dir.join("checkpoint.ckpt"))?;
        let path = dir.join("metrics.tsv");
        fs::write(&path, format_metrics(&row.log)).map_err(|e| ccreid::Error::io(&path, e))?;
        eprintln!("{}", row.to_row());
        Ok(())
    })?;
    let mut table = format!("{ABLATION_HEADER}\n");
    for row in &rows {
        table.push_str(&row.to_row());
        table.push('\n');
    }
    write_file(&out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn to_gray(values: &[f64], height: usize, width: usize) -> ccreid::Result<LabelMap> {
    let data = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    LabelMap::new(height, width, data)
}

fn cmd_dump_attention(
    config: &Config,
    out: &Path,
    checkpoint: Option<&Path>,
    split: SplitArg,
    limit: Option<usize>,
    masks: bool,
) -> CmdResult {
    let manifest = match split {
        SplitArg::Train => &config.data.train,
        SplitArg::Query => &config.data.query,
        SplitArg::Gallery => &config.data.gallery,
    };
    let index = load_split(config, manifest)?;
    let model = match checkpoint {
        Some(path) => model_from_checkpoint(&Checkpoint::load(path)?)?,
        None => {
            let classes = index.identities().len().max(1);
            Model::new(config.model_spec(config.train.variant, classes), config.train.seed)?
        }
    };
    if !model.spec.variant.has_attention() {
        return Err(usage(anyhow::anyhow!(
            "variant {} has no attention stream",
            model.spec.variant.name()
        )));
    }
    let vocab = config.data.vocabulary()?;
    let (h, w) = model.spec.input;
    let att_dir = out.join("attention");
    create_dir(&att_dir)?;
    if masks {
        create_dir(&out.join("masks"))?;
    }
    let n = limit.unwrap_or(index.len()).min(index.len());
    for s in &index.samples()[..n] {
        let stem = s
            .image_path
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{}_{}", s.identity, s.clothing));
        let prepared = model.prepare(s, &vocab, false)?;
        let att = model.attention_map(&prepared)?.expect("attention variant");
        let (ih, iw) = (s.image.height, s.image.width);
        let pixels = upscale_attention(&att, ih, iw);
        write_labels(&att_dir.join(format!("{stem}.png")), &to_gray(&pixels, ih, iw)?)?;
        if masks {
            let labels = resize_labels(&s.parsing, h, w);
            let image = resize_rgb(&s.image, h, w);
            let mask = clothing_region_mask(&labels, &vocab)?;
            write_rgb(
                &out.join("masks").join(format!("{stem}_masked.png")),
                &apply_pixel_mask(&image, &mask, DEFAULT_FILL),
            )?;
            write_labels(
                &out.join("masks").join(format!("{stem}_mask.png")),
                &to_gray(&mask.data, h, w)?,
            )?;
        }
    }
    println!("wrote {n} attention maps to {}", att_dir.display());
    Ok(())
}
