//! `chestwsl` command line: train, evaluate, localize, sweep, generate
//! synthetic data and run the gradient checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chestwsl::data::{self, Dataset, SyntheticSpec};
use chestwsl::gradcheck;
use chestwsl::localize::{self, ImageBox};
use chestwsl::train::{self, Checkpoint, EvalOptions, SweepGrid, TrainConfig};

#[derive(Parser)]
#[command(name = "chestwsl", version, about = "Weakly supervised chest X-ray classification and localization")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Run data-parallel loops on one thread. The pool size otherwise
    /// follows RAYON_NUM_THREADS.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set head.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Clone)]
struct ThresholdArgs {
    /// Box threshold for one class, e.g. `--threshold Mass=0.85`. Repeatable.
    #[arg(long = "threshold", value_name = "CLASS=VALUE")]
    thresholds: Vec<String>,
    /// Box threshold for Cardiomegaly.
    #[arg(long)]
    threshold_cardiomegaly: Option<f64>,
    /// Drop components smaller than this many heatmap cells.
    #[arg(long, default_value_t = 0)]
    min_area: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory; writes checkpoints, the log and a test report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Classification and localization reports of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Directory for report.txt and the CSV tables.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Predicted boxes (original image coordinates) and optional heatmaps.
    Localize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write every normalized class heatmap as a PGM.
        #[arg(long)]
        heatmaps: bool,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Macro AUROC on the test split over a grid of head settings.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Evaluate test-time settings on this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        k_plus_train: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        k_plus_test: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        k_minus_test: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a planted-disc dataset directory.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 700)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every differentiable op and the toy network.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled inputs and parameters for the whole-network check.
        #[arg(long, default_value_t = 20)]
        network_samples: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.sequential {
        chestwsl::par::set_parallel(false);
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Train { data, out, config } => cmd_train(&data, &out, &config)?,
        Command::Eval { data, checkpoint, split, out, thresholds, config } => {
            cmd_eval(&data, &checkpoint, split, out.as_deref(), &thresholds, &config)?
        }
        Command::Localize { data, checkpoint, split, out, heatmaps, thresholds, config } => {
            cmd_localize(&data, &checkpoint, split, &out, heatmaps, &thresholds, &config)?
        }
        Command::Sweep { data, checkpoint, m, k_plus_train, k_plus_test, k_minus_test, alpha, out, config } => {
            let grid = SweepGrid { m, k_plus_train, k_plus_test, k_minus_test, alpha };
            cmd_sweep(&data, checkpoint.as_deref(), &grid, &out, &config)?
        }
        Command::SynthGen { out, n, seed } => cmd_synth(&out, n, seed)?,
        Command::Gradcheck { instances, seed, network_samples } => return cmd_gradcheck(instances, seed, network_samples),
    }
    Ok(true)
}

/// Applies the config file and `--set` overrides on top of `cfg`.
fn apply_config(cfg: &mut TrainConfig, args: &ConfigArgs) -> Result<bool> {
    let mut sets_classes = false;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        sets_classes |= text.lines().any(|l| l.trim_start().starts_with("head.classes"));
    }
    let mut overrides = String::new();
    for s in &args.sets {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {s:?}");
        };
        sets_classes |= k.trim() == "head.classes";
        overrides.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
    }
    cfg.apply_text(&overrides).context("in --set")?;
    Ok(sets_classes)
}

struct Parts {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn split_dataset(cfg: &TrainConfig, all: &Dataset) -> Result<Parts> {
    let s = data::split(&all.ids(), &cfg.split)?;
    Ok(Parts { train: all.subset(&s.train), val: all.subset(&s.val), test: all.subset(&s.test) })
}

fn select(cfg: &TrainConfig, all: Dataset, split: SplitArg) -> Result<Dataset> {
    if let SplitArg::All = split {
        return Ok(all);
    }
    let p = split_dataset(cfg, &all)?;
    Ok(match split {
        SplitArg::Train => p.train,
        SplitArg::Val => p.val,
        _ => p.test,
    })
}

fn load(dir: &Path) -> Result<Dataset> {
    let d = data::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    log::info!("{}: {} images, {} classes", dir.display(), d.len(), d.class_names.len());
    Ok(d)
}

fn eval_options(args: &ThresholdArgs, class_names: &[String]) -> Result<EvalOptions> {
    let mut t = localize::default_thresholds(class_names);
    let mut set = |name: &str, v: f64| -> Result<()> {
        let Some(i) = data::class_index(class_names, name) else {
            bail!("threshold for unknown class {name:?}");
        };
        t[i] = v;
        Ok(())
    };
    if let Some(v) = args.threshold_cardiomegaly {
        set("Cardiomegaly", v)?;
    }
    for s in &args.thresholds {
        let Some((name, v)) = s.split_once('=') else {
            bail!("--threshold expects CLASS=VALUE, got {s:?}");
        };
        let v: f64 = v.trim().parse().with_context(|| format!("threshold value in {s:?}"))?;
        set(name.trim(), v)?;
    }
    Ok(EvalOptions { thresholds: Some(t), min_area: args.min_area })
}

fn checkpoint_config(path: &Path, args: &ConfigArgs) -> Result<(Checkpoint, TrainConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = ck.config.clone();
    apply_config(&mut cfg, args)?;
    Ok((ck, cfg))
}

fn cmd_train(dir: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let all = load(dir)?;
    let mut cfg = TrainConfig::default();
    if !apply_config(&mut cfg, args)? {
        cfg.head.class_names = all.class_names.clone();
    }
    let parts = split_dataset(&cfg, &all)?;
    log::info!("split: {} train, {} val, {} test", parts.train.len(), parts.val.len(), parts.test.len());
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let t0 = Instant::now();
    let outcome = train::train_with(&cfg, &parts.train, &parts.val, |row| {
        let auc = row.macro_auroc.map_or("undefined".into(), |a| format!("{a:.4}"));
        log::info!("epoch {:>3} {:<5} loss {:.5} macro AUROC {auc}", row.epoch, row.split, row.loss);
    })?;
    log::info!("trained in {:.1} s", t0.elapsed().as_secs_f64());
    outcome.best.save(&out.join("best.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    fs::write(out.join("log.csv"), train::log_csv(&outcome.log))?;
    let mut per_class = String::from("class,epoch,val_auroc\n");
    for (name, best) in cfg.head.class_names.iter().zip(&outcome.per_class_best) {
        match best {
            Some((e, a)) => per_class.push_str(&format!("{name},{e},{a}\n")),
            None => per_class.push_str(&format!("{name},,undefined\n")),
        }
    }
    fs::write(out.join("per_class_best.csv"), per_class)?;
    if !parts.test.is_empty() {
        let ev = train::evaluate(&outcome.best, &cfg, &parts.test, &EvalOptions::default())?;
        let text = ev.to_text(&format!("test split, epoch {}\n{}", outcome.best.epoch, cfg.run_header()));
        fs::write(out.join("report.txt"), &text)?;
        print!("{text}");
    }
    Ok(())
}

fn cmd_eval(
    dir: &Path,
    ck_path: &Path,
    split: SplitArg,
    out: Option<&Path>,
    thresholds: &ThresholdArgs,
    args: &ConfigArgs,
) -> Result<()> {
    let (ck, cfg) = checkpoint_config(ck_path, args)?;
    let data = select(&cfg, load(dir)?, split)?;
    let opts = eval_options(thresholds, &data.class_names)?;
    let ev = train::evaluate(&ck, &cfg, &data, &opts)?;
    let header = format!("{} ({} images, epoch {})\n{}", ck_path.display(), data.len(), ck.epoch, cfg.run_header());
    let text = ev.to_text(&header);
    print!("{text}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), &text)?;
        fs::write(out.join("classification.csv"), ev.classification.to_csv())?;
        if let Some(loc) = &ev.localization {
            fs::write(out.join("localization.csv"), loc.to_csv())?;
        }
    }
    Ok(())
}

fn cmd_localize(
    dir: &Path,
    ck_path: &Path,
    split: SplitArg,
    out: &Path,
    heatmaps: bool,
    thresholds: &ThresholdArgs,
    args: &ConfigArgs,
) -> Result<()> {
    let (ck, cfg) = checkpoint_config(ck_path, args)?;
    let data = select(&cfg, load(dir)?, split)?;
    let opts = eval_options(thresholds, &data.class_names)?;
    let ev = train::evaluate(&ck, &cfg, &data, &opts)?;
    fs::create_dir_all(out)?;

    let offset = cfg.preprocess.center_offset();
    let index: std::collections::HashMap<&str, &data::Sample> =
        data.samples.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let boxes: Vec<ImageBox> = ev
        .boxes
        .iter()
        .map(|b| {
            let s = index[b.image_id.as_str()];
            let orig = (s.image.height, s.image.width);
            ImageBox { image_id: b.image_id.clone(), bbox: cfg.preprocess.unmap_box(&b.bbox, orig, offset) }
        })
        .collect();
    localize::write_boxes_csv(fs::File::create(out.join("boxes.csv"))?, &boxes, &data.class_names)?;
    if let Some(loc) = &ev.localization {
        fs::write(out.join("localization.csv"), loc.to_csv())?;
    }
    if heatmaps {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        let (_, _, h, w) = ev.heatmaps.dims();
        for (i, s) in data.samples.iter().enumerate() {
            let stem = Path::new(&s.image_id).file_stem().map_or_else(|| s.image_id.clone(), |x| x.to_string_lossy().into());
            for (c, name) in data.class_names.iter().enumerate() {
                localize::write_heatmap_pgm(&dir.join(format!("{stem}_{name}.pgm")), ev.heatmaps.plane(i, c), (h, w))?;
            }
        }
    }
    let used = opts.thresholds.as_deref().unwrap_or_default();
    let listed: Vec<String> = data.class_names.iter().zip(used).map(|(c, t)| format!("{c}={t}")).collect();
    fs::write(out.join("thresholds.txt"), listed.join("\n") + "\n")?;
    println!("thresholds: {}", listed.join(", "));
    println!("{} boxes for {} images written to {}", boxes.len(), data.len(), out.display());
    Ok(())
}

fn cmd_sweep(dir: &Path, ck_path: Option<&Path>, grid: &SweepGrid, out: &Path, args: &ConfigArgs) -> Result<()> {
    let all = load(dir)?;
    let (ck, cfg) = match ck_path {
        Some(p) => {
            let (ck, cfg) = checkpoint_config(p, args)?;
            (Some(ck), cfg)
        }
        None => {
            let mut cfg = TrainConfig::default();
            if !apply_config(&mut cfg, args)? {
                cfg.head.class_names = all.class_names.clone();
            }
            (None, cfg)
        }
    };
    let parts = split_dataset(&cfg, &all)?;
    let result = train::sweep(&cfg, ck.as_ref(), grid, &parts.train, &parts.val, &parts.test)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, result.to_csv())?;
    println!("{} rows, {} training runs, written to {}", result.rows.len(), result.training_runs, out.display());
    Ok(())
}

fn cmd_synth(out: &Path, n: usize, seed: u64) -> Result<()> {
    let spec = SyntheticSpec::two_discs(seed);
    let ds = data::synthetic_dataset(&spec, n)?;
    data::write_dataset(out, &ds)?;
    println!("{n} images with classes {} written to {}", ds.class_names.join(", "), out.display());
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64, network_samples: usize) -> Result<bool> {
    let t0 = Instant::now();
    let mut results = gradcheck::run_suite(instances, seed)?;
    results.push(gradcheck::check_toy_network(network_samples, seed)?);
    println!("{:<20} {:>9} {:>12} {:>9}  result", "op", "instances", "max rel err", "tolerance");
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>9} {:>12.3e} {:>9.0e}  {verdict}", r.op, r.instances, r.max_error, r.tolerance);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed, {:.2} s", results.len(), t0.elapsed().as_secs_f64());
    Ok(failed == 0)
}
