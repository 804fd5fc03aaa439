mod config;
mod image;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use naturamap::data::read_sample_dir;
use naturamap::metrics::evaluate;
use naturamap::optim::TrainConfig;
use naturamap::{
    load_checkpoint, save_checkpoint, train_autoencoder, train_model, write_tensor, ArchConfig,
    DatasetManifest, Error, EvalReport, ModelBundle, Result, Split, SynthParams, Variant,
};

use config::{Entries, RunConfig};
use image::Gray;

#[derive(Parser)]
#[command(name = "naturamap", version, about = "Naturalness map regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value setting (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
        /// Replace an existing dataset.
        #[arg(long)]
        overwrite: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: train the context autoencoder.
    TrainAe {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Stage 2: train a baseline or proposed model.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        /// Autoencoder checkpoint (proposed variant only).
        #[arg(long)]
        ae: Option<PathBuf>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        model: PathBuf,
        /// Output directory for the report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate two checkpoints side by side.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        proposed: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Predict one sample directory.
    Predict {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out_map: PathBuf,
        #[arg(long)]
        out_image: Option<PathBuf>,
        /// Second checkpoint of the other variant, for the panel.
        #[arg(long)]
        compare_model: Option<PathBuf>,
        /// Side-by-side image: target | baseline | proposed.
        #[arg(long)]
        out_panel: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } => 3,
        Error::NonFinite { .. } => 4,
        _ => 2,
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NATURAMAP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("NATURAMAP_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            out,
            n_train,
            n_val,
            n_test,
            seed,
            patch,
            context,
            overwrite,
            cfg,
        } => {
            let mut e = base_entries(&cfg)?;
            let mut flags = Entries::default();
            flags.push_opt("out", out.map(|p| p.display().to_string()));
            flags.push_opt("n_train", n_train);
            flags.push_opt("n_val", n_val);
            flags.push_opt("n_test", n_test);
            flags.push_opt("seed", seed);
            flags.push_opt("patch_size", patch);
            flags.push_opt("context_size", context);
            if let (Some(p), None) = (patch, context) {
                if !e.contains("context_size") {
                    flags.push("context_size", 4 * p);
                }
            }
            e.extend(flags);
            e.push_overrides(&cfg.set)?;
            cmd_gen(&RunConfig::resolve(&e, SynthParams::default(), ArchConfig::desk(), TrainConfig::default())?, overwrite)
        }
        Cmd::TrainAe { args } => {
            let e = train_entries(&args, None, None)?;
            cmd_train_ae(&e)
        }
        Cmd::Train { variant, ae, args } => {
            let e = train_entries(&args, variant, ae)?;
            cmd_train(&e)
        }
        Cmd::Eval {
            data,
            split,
            model,
            report,
        } => cmd_eval(&data, split, &model, report.as_deref()),
        Cmd::Compare {
            data,
            split,
            baseline,
            proposed,
            report,
        } => cmd_compare(&data, split, &baseline, &proposed, report.as_deref()),
        Cmd::Predict {
            sample,
            model,
            variant,
            out_map,
            out_image,
            compare_model,
            out_panel,
        } => cmd_predict(
            &sample,
            &model,
            variant,
            &out_map,
            out_image.as_deref(),
            compare_model.as_deref(),
            out_panel.as_deref(),
        ),
    }
}

fn base_entries(cfg: &ConfigArgs) -> Result<Entries> {
    match &cfg.config {
        Some(p) => Entries::load(p),
        None => Ok(Entries::default()),
    }
}

fn train_entries(args: &TrainArgs, variant: Option<Variant>, ae: Option<PathBuf>) -> Result<Entries> {
    let mut e = base_entries(&args.cfg)?;
    e.push_opt("data", args.data.as_ref().map(|p| p.display().to_string()));
    e.push_opt("out", args.out.as_ref().map(|p| p.display().to_string()));
    e.push_opt("variant", variant);
    e.push_opt("ae", ae.map(|p| p.display().to_string()));
    e.push_opt("max_epochs", args.max_epochs);
    e.push_opt("lr_max", args.lr_max);
    e.push_opt("batch_size", args.batch_size);
    e.push_opt("patience", args.patience);
    e.push_opt("train_seed", args.seed);
    e.push_overrides(&args.cfg.set)?;
    Ok(e)
}

fn cmd_gen(cfg: &RunConfig, overwrite: bool) -> Result<()> {
    let out = cfg.path("out")?;
    let m = naturamap::generate_dataset(
        &cfg.synth,
        cfg.count("n_train", 64)?,
        cfg.count("n_val", 16)?,
        cfg.count("n_test", 16)?,
        &out,
        overwrite,
    )?;
    cfg.echo(&out, true, false, false)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        m.ids(Split::Train).len(),
        m.ids(Split::Val).len(),
        m.ids(Split::Test).len(),
        out.display()
    );
    Ok(())
}

/// Resolves a training config against the dataset it names; the
/// architecture follows the dataset's patch size unless set explicitly.
fn training_setup(e: &Entries) -> Result<(RunConfig, DatasetManifest)> {
    let probe = RunConfig::resolve(e, SynthParams::default(), ArchConfig::desk(), TrainConfig::default())?;
    let manifest = DatasetManifest::load(probe.path("data")?)?;
    let arch = ArchConfig {
        patch_size: manifest.params.patch_size,
        context_size: manifest.params.context_size,
        ..ArchConfig::desk()
    };
    let cfg = RunConfig::resolve(e, manifest.params.clone(), arch, TrainConfig::default())?;
    if cfg.arch.patch_size != manifest.params.patch_size
        || cfg.arch.context_size != manifest.params.context_size
    {
        return Err(Error::config(format!(
            "architecture expects {}px patches / {}px context, dataset has {} / {}",
            cfg.arch.patch_size,
            cfg.arch.context_size,
            manifest.params.patch_size,
            manifest.params.context_size
        )));
    }
    cfg.arch.validate()?;
    cfg.train.validate()?;
    Ok((cfg, manifest))
}

fn cmd_train_ae(e: &Entries) -> Result<()> {
    let (cfg, manifest) = training_setup(e)?;
    let out = cfg.path("out")?;
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    log::info!("training context autoencoder on {} tiles", train.len());
    let (bundle, report) = train_autoencoder(&train, &val, &cfg.arch, &cfg.train)?;
    save_checkpoint(&bundle, &out)?;
    log::info!("checkpoint written to {}", out.display());
    report.write(&out)?;
    cfg.echo(&out, false, true, true)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_train(e: &Entries) -> Result<()> {
    let (cfg, manifest) = training_setup(e)?;
    let variant = cfg
        .variant()?
        .ok_or_else(|| Error::config("missing --variant (baseline or proposed)"))?;
    let ae = match (variant, cfg.get("ae")) {
        (Variant::Proposed, None) => {
            return Err(Error::config(
                "--variant proposed needs --ae <dir>: the context encoder comes from a \
                 checkpoint written by `naturamap train-ae`",
            ))
        }
        (Variant::Baseline, Some(_)) => {
            return Err(Error::config("--ae is only used by --variant proposed"))
        }
        (_, Some(p)) => Some(load_checkpoint(p)?),
        (_, None) => None,
    };
    let out = cfg.path("out")?;
    let train = manifest.load_split(Split::Train)?;
    let val = manifest.load_split(Split::Val)?;
    log::info!("training {variant} model on {} samples", train.len());
    let (bundle, report) = train_model(&train, &val, &cfg.arch, &cfg.train, variant, ae.as_ref())?;
    save_checkpoint(&bundle, &out)?;
    log::info!("checkpoint written to {}", out.display());
    report.write(&out)?;
    cfg.echo(&out, false, true, true)?;
    print!("{}", report.summary());
    Ok(())
}

fn load_for_data(model: &Path, manifest: &DatasetManifest) -> Result<ModelBundle<f32>> {
    let bundle = load_checkpoint(model)?;
    if bundle.arch.patch_size != manifest.params.patch_size
        || bundle.arch.context_size != manifest.params.context_size
    {
        return Err(Error::config(format!(
            "checkpoint {} expects {}px patches, dataset has {}px",
            model.display(),
            bundle.arch.patch_size,
            manifest.params.patch_size
        )));
    }
    Ok(bundle)
}

fn eval_split(data: &Path, split: Split, model: &Path) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(data)?;
    let bundle = load_for_data(model, &manifest)?;
    if manifest.ids(split).is_empty() {
        return Err(Error::config(format!("split `{split}` of {} is empty", data.display())));
    }
    let samples = manifest.load_split(split)?;
    evaluate(&bundle, &samples, bundle.variant)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_eval(data: &Path, split: Split, model: &Path, report: Option<&Path>) -> Result<()> {
    let r = eval_split(data, split, model)?;
    if let Some(dir) = report {
        write_file(&dir.join("eval.csv"), &r.to_table())?;
        write_file(&dir.join("summary.txt"), &r.summary())?;
        write_file(
            &dir.join("config.txt"),
            &format!(
                "data={}\nsplit={split}\nmodel={}\n",
                data.display(),
                model.display()
            ),
        )?;
    }
    print!("{}", r.summary());
    Ok(())
}

fn relative(new: f64, old: f64) -> f64 {
    if new == old {
        0.0
    } else {
        (new - old) / old.abs()
    }
}

/// Two metric rows plus relative changes of the second over the first.
pub fn comparison_table(baseline: &EvalReport, proposed: &EvalReport) -> String {
    let mut s = String::from("model,mae,mse,mssim\n");
    for (name, r) in [("baseline", baseline), ("proposed", proposed)] {
        let _ = writeln!(s, "{name},{},{},{}", r.mae, r.mse, r.mssim);
    }
    let _ = write!(
        s,
        "\nrelative_delta_mae={}\nrelative_delta_mse={}\nrelative_delta_mssim={}\n",
        relative(proposed.mae, baseline.mae),
        relative(proposed.mse, baseline.mse),
        relative(proposed.mssim, baseline.mssim)
    );
    s
}

fn cmd_compare(
    data: &Path,
    split: Split,
    baseline: &Path,
    proposed: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let b = eval_split(data, split, baseline)?;
    let p = eval_split(data, split, proposed)?;
    let table = comparison_table(&b, &p);
    if let Some(dir) = report {
        write_file(&dir.join("compare.txt"), &table)?;
        write_file(
            &dir.join("config.txt"),
            &format!(
                "data={}\nsplit={split}\nbaseline={}\nproposed={}\n",
                data.display(),
                baseline.display(),
                proposed.display()
            ),
        )?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_predict(
    sample_dir: &Path,
    model: &Path,
    variant: Option<Variant>,
    out_map: &Path,
    out_image: Option<&Path>,
    compare_model: Option<&Path>,
    out_panel: Option<&Path>,
) -> Result<()> {
    let sample = read_sample_dir(sample_dir)?;
    let mut bundle = load_checkpoint(model)?;
    let variant = variant.unwrap_or(bundle.variant);
    let pred = bundle.predict((&sample).into(), variant)?;
    write_tensor(out_map, &pred)?;
    if let Some(p) = out_image {
        Gray::from_map(&pred)?.write(p)?;
    }
    match (compare_model, out_panel) {
        (Some(other), Some(panel)) => {
            let mut second = load_checkpoint(other)?;
            let other_pred = second.predict((&sample).into(), second.variant)?;
            let (b, p) = match (variant, second.variant) {
                (Variant::Baseline, Variant::Proposed) => (&pred, &other_pred),
                (Variant::Proposed, Variant::Baseline) => (&other_pred, &pred),
                _ => {
                    return Err(Error::config(
                        "the panel needs one baseline and one proposed checkpoint",
                    ))
                }
            };
            Gray::panel(&[&sample.target, b, p])?.write(panel)?;
        }
        (None, None) => {}
        _ => {
            return Err(Error::config(
                "--compare-model and --out-panel must be given together",
            ))
        }
    }
    Ok(())
}
