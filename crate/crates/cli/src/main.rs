//! `amfc` — train a small CNN, extract per-layer eigenvector spaces, fit
//! lightweight heads on projected samples, classify images through the
//! projection chain, and benchmark the speedup against the full CNN.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use amfc_core::amfc::{
    classify, fit_head, load_amfc_model, project_dataset, save_amfc_model, AmfcModel, HeadHyper,
    HeadKind,
};
use amfc_core::analysis::{
    export_curve_csv, export_eigenimages, export_mean_image, representation_curve,
};
use amfc_core::bench::{
    emit_report, first_half_layers, run_grid, train_fold_models, ReportFormat, RunOpts,
    ScenarioConfig,
};
use amfc_core::cnn::{load_model, save_model, train, TrainHyper, TrainedModel};
use amfc_core::data::{fold_view, load_corpus, make_folds, pgm, synth_corpus, Dataset, SplitPlan};
use amfc_core::featurespace::{load_bank, save_bank, BankBuilder, SelectionMode};
use amfc_core::tensor::{resize_bilinear, Tensor};
use amfc_core::util::derive_seed;

use config::{load_config, DatasetConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "amfc",
    version,
    about = "CNN classification accelerated by per-layer PCA projection chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap worker threads (default: one per logical CPU).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PGM shape corpus with a labels CSV.
    SynthData {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        h: usize,
        #[arg(long, default_value_t = 2)]
        jitter: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train the CNN on the configured dataset (fold 0 held out for
    /// validation) and save its weights.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Extract the per-layer eigenvector space bank from a trained model.
    ExtractSpaces {
        #[arg(long)]
        config: PathBuf,
        /// Trained CNN weights (default: <out>/model.amfcw).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Eigenvector selection: first_ranked, last_ranked or random.
        #[arg(long, default_value = "first_ranked")]
        mode: String,
        /// Layer spaces to use: all or first_half.
        #[arg(long, default_value = "all")]
        layers: String,
    },
    /// Fit a classifier head on chain-projected training samples.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Space bank (default: <out>/bank.amfcb).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Head kind: mlp, knn or gaussian_nb (default: first in config).
        #[arg(long)]
        head: Option<String>,
    },
    /// Classify one image through the projection chain and head.
    Classify {
        /// Fitted AMFC model (.amfcm).
        #[arg(long)]
        model: PathBuf,
        /// Bank override when the model references one by path.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Assert the model's head kind.
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        image: PathBuf,
    },
    /// Run the scenario x head benchmark grid and write the report.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export representation curves, eigenvector images and mean images.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Trained CNN weights (default: <out>/model.amfcw).
        #[arg(long)]
        model: Option<PathBuf>,
        /// How many top-ranked eigenvectors to reconstruct as images.
        #[arg(long, default_value_t = 20)]
        first: usize,
        /// How many bottom-ranked eigenvectors to reconstruct as images.
        #[arg(long, default_value_t = 20)]
        last: usize,
    },
}

// AMFC_LOG=error|warn|info|debug (default warn), logged to stderr.
static LOG_LEVEL: OnceLock<u8> = OnceLock::new();

fn log_level() -> u8 {
    *LOG_LEVEL.get_or_init(|| match std::env::var("AMFC_LOG").as_deref() {
        Ok("error") => 0,
        Ok("info") => 2,
        Ok("debug") => 3,
        _ => 1,
    })
}

fn info(msg: impl AsRef<str>) {
    if log_level() >= 2 {
        eprintln!("amfc: {}", msg.as_ref());
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData {
            classes,
            per_class,
            h,
            jitter,
            noise,
        } => cmd_synth_data(&cli, *classes, *per_class, *h, *jitter, *noise),
        Command::Train { config } => cmd_train(&cli, config),
        Command::ExtractSpaces {
            config,
            model,
            mode,
            layers,
        } => cmd_extract_spaces(&cli, config, model.as_deref(), mode, layers),
        Command::Fit { config, bank, head } => {
            cmd_fit(&cli, config, bank.as_deref(), head.as_deref())
        }
        Command::Classify {
            model,
            bank,
            head,
            image,
        } => cmd_classify(&cli, model, bank.as_deref(), head.as_deref(), image),
        Command::Bench { config } => cmd_bench(&cli, config),
        Command::Analyze {
            config,
            model,
            first,
            last,
        } => cmd_analyze(&cli, config, model.as_deref(), *first, *last),
    }
}

/// Load a config and fold in the global CLI overrides.
fn effective_config(cli: &Cli, path: &Path) -> Result<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cfg.threads > 0 {
        // Ignore the error if a pool already exists (tests call run twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg)
}

fn write_run_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    let effective = serde_json::to_string(cfg)?;
    let path = manifest::write_manifest(&cfg.out_dir, command, &effective, cfg.seed, cfg.threads)?;
    info(format!("manifest written to {}", path.display()));
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetConfig::Synth {
            classes,
            per_class,
            h,
            jitter_px,
            noise,
        } => synth_corpus(
            *classes,
            *per_class,
            *h,
            *jitter_px,
            *noise,
            derive_seed(cfg.seed, 0xda7a),
        )?,
        DatasetConfig::Corpus {
            dir,
            labels,
            target_h,
        } => load_corpus(dir, labels, *target_h)?,
    };
    info(format!(
        "dataset: {} samples, {} classes, {}x{}",
        ds.len(),
        ds.class_count(),
        ds.side(),
        ds.side()
    ));
    Ok(ds)
}

fn fold_plan(cfg: &RunConfig, ds: &Dataset) -> Result<SplitPlan> {
    Ok(make_folds(ds, cfg.folds, derive_seed(cfg.seed, 0xf01d))?)
}

fn default_artifact(cfg: &RunConfig, name: &str, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(name))
}

fn head_hyper(cfg: &RunConfig) -> HeadHyper {
    HeadHyper {
        mlp_hidden: cfg.mlp_head.hidden.clone(),
        mlp_lr: cfg.mlp_head.lr,
        mlp_batch: cfg.mlp_head.batch,
        mlp_max_epochs: cfg.mlp_head.max_epochs,
        mlp_patience: cfg.mlp_head.patience,
        knn_k: cfg.knn.k,
        nb_var_floor: cfg.gaussian_nb.var_floor,
        seed: derive_seed(cfg.seed, 0x6ead),
    }
}

fn cmd_synth_data(
    cli: &Cli,
    classes: usize,
    per_class: usize,
    h: usize,
    jitter: usize,
    noise: f64,
) -> Result<()> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| anyhow!("synth-data requires --out DIR"))?;
    let seed = cli.seed.unwrap_or(0);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ds = synth_corpus(classes, per_class, h, jitter, noise, seed)?;
    let mut csv = String::from("filename,label\n");
    for i in 0..ds.len() {
        let name = format!("img_{i:05}.pgm");
        let [_, ih, iw] = ds.image(i).dims3()?;
        let flat = Tensor::new(vec![ih, iw], ds.image(i).data().to_vec())?;
        pgm::write_pgm(&out.join(&name), &flat)?;
        csv.push_str(&format!("{name},{}\n", ds.class_names()[ds.labels()[i]]));
    }
    let labels_path = out.join("labels.csv");
    std::fs::write(&labels_path, csv)
        .with_context(|| format!("writing {}", labels_path.display()))?;
    let params = serde_json::json!({
        "classes": classes, "per_class": per_class, "h": h,
        "jitter": jitter, "noise": noise, "seed": seed,
    });
    manifest::write_manifest(&out, "synth-data", &params.to_string(), seed, 0)?;
    println!("corpus_dir={}", out.display());
    println!("labels={}", labels_path.display());
    Ok(())
}

fn cmd_train(cli: &Cli, config: &Path) -> Result<()> {
    let cfg = effective_config(cli, config)?;
    let ds = load_dataset(&cfg)?;
    let plan = fold_plan(&cfg, &ds)?;
    let (train_ds, val_ds) = fold_view(&ds, &plan, 0)?;
    let spec = cfg.architecture_spec(ds.class_count());
    let hyper = TrainHyper {
        lr: cfg.cnn.lr,
        batch: cfg.cnn.batch,
        max_epochs: cfg.cnn.max_epochs,
        patience: cfg.cnn.patience,
        seed: cfg.seed,
    };
    info(format!(
        "training on {} samples, validating on {}",
        train_ds.len(),
        val_ds.len()
    ));
    let model = train(&spec, &train_ds, &val_ds, &hyper)?;
    info(format!(
        "trained: epochs={} best_val_accuracy={:.4}",
        model.meta.epochs_run, model.meta.best_val_accuracy
    ));
    let path = cfg.out_dir.join("model.amfcw");
    save_model(&model, &path)?;
    write_run_manifest(&cfg, "train")?;
    println!("model={}", path.display());
    Ok(())
}

/// Dataset slice the spaces are extracted from: everything but fold 0, the
/// same split `train` used.
fn extraction_images(cfg: &RunConfig, ds: &Dataset) -> Result<Dataset> {
    let plan = fold_plan(cfg, ds)?;
    Ok(fold_view(ds, &plan, 0)?.0)
}

fn load_cnn(cfg: &RunConfig, flag: Option<&Path>) -> Result<TrainedModel> {
    let path = default_artifact(cfg, "model.amfcw", flag);
    load_model(&path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_extract_spaces(
    cli: &Cli,
    config: &Path,
    model: Option<&Path>,
    mode: &str,
    layers: &str,
) -> Result<()> {
    let cfg = effective_config(cli, config)?;
    let model = load_cnn(&cfg, model)?;
    let ds = load_dataset(&cfg)?;
    let train_ds = extraction_images(&cfg, &ds)?;
    let mode: SelectionMode = mode.parse()?;
    let used = match layers {
        "all" => cfg.p_schedule.len(),
        "first_half" => first_half_layers(model.spec.conv_layers.len()).min(cfg.p_schedule.len()),
        other => bail!("unknown --layers {other:?} (expected all or first_half)"),
    };
    let bank = amfc_core::featurespace::build_bank(
        &model,
        train_ds.images(),
        cfg.m_samples,
        &cfg.p_schedule[..used],
        mode,
        cfg.seed,
    )?;
    let path = cfg.out_dir.join("bank.amfcb");
    save_bank(&bank, &path)?;
    write_run_manifest(&cfg, "extract-spaces")?;
    println!("bank={}", path.display());
    Ok(())
}

fn cmd_fit(cli: &Cli, config: &Path, bank: Option<&Path>, head: Option<&str>) -> Result<()> {
    let cfg = effective_config(cli, config)?;
    let bank_path = default_artifact(&cfg, "bank.amfcb", bank);
    let bank =
        load_bank(&bank_path).with_context(|| format!("loading bank {}", bank_path.display()))?;
    let ds = load_dataset(&cfg)?;
    let plan = fold_plan(&cfg, &ds)?;
    let (train_ds, val_ds) = fold_view(&ds, &plan, 0)?;
    let kind: HeadKind = match head {
        Some(h) => h.parse()?,
        None => *cfg
            .head_kinds()?
            .first()
            .ok_or_else(|| anyhow!("config lists no heads"))?,
    };
    let z_train = project_dataset(&bank, &train_ds)?;
    let z_val = project_dataset(&bank, &val_ds)?;
    let head = fit_head(kind, &z_train, &z_val, &head_hyper(&cfg))?;
    let acc = amfc_core::amfc::evaluate_head(&head, &z_val)?;
    info(format!("fitted {kind} head: val accuracy {acc:.4}"));
    let model = AmfcModel::new(bank, head)?;
    let path = cfg.out_dir.join(format!("head_{kind}.amfcm"));
    // Reference the bank by path when it sits next to the model artifact.
    let bank_ref = if bank_path.parent() == path.parent() {
        bank_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
    } else {
        Some(bank_path.to_string_lossy().into_owned())
    };
    save_amfc_model(&model, &path, bank_ref.as_deref())?;
    write_run_manifest(&cfg, "fit")?;
    println!("model={}", path.display());
    Ok(())
}

fn cmd_classify(
    cli: &Cli,
    model_path: &Path,
    bank: Option<&Path>,
    head: Option<&str>,
    image: &Path,
) -> Result<()> {
    let model = load_amfc_model(model_path, bank)?;
    if let Some(expect) = head {
        let expect: HeadKind = expect.parse()?;
        if model.head.kind() != expect {
            bail!(
                "model head is {}, --head asked for {expect}",
                model.head.kind()
            );
        }
    }
    let raw = pgm::read_pnm(image)?;
    let resized = resize_bilinear(&raw, model.input_h, model.input_h)?;
    let clamped: Vec<f64> = resized
        .into_data()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    let img = Tensor::new(vec![1, model.input_h, model.input_h], clamped)?;
    let (class, scores) = classify(&model, &img)?;
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    manifest::write_manifest(
        &out_dir,
        "classify",
        &format!("{{\"model\":{:?},\"image\":{:?}}}", model_path, image),
        cli.seed.unwrap_or(0),
        cli.threads.unwrap_or(0),
    )?;
    println!("class={class}");
    println!(
        "scores=[{}]",
        scores
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    Ok(())
}

fn cmd_bench(cli: &Cli, config: &Path) -> Result<()> {
    let cfg = effective_config(cli, config)?;
    let ds = load_dataset(&cfg)?;
    let plan = fold_plan(&cfg, &ds)?;
    let spec = cfg.architecture_spec(ds.class_count());
    let hyper = TrainHyper {
        lr: cfg.cnn.lr,
        batch: cfg.cnn.batch,
        max_epochs: cfg.cnn.max_epochs,
        patience: cfg.cnn.patience,
        seed: cfg.seed,
    };
    info(format!("training {} fold models", plan.fold_count));
    let models = train_fold_models(&spec, &ds, &plan, &hyper)?;
    for (f, m) in models.iter().enumerate() {
        info(format!(
            "fold {f}: epochs={} val={:.4}",
            m.meta.epochs_run, m.meta.best_val_accuracy
        ));
    }
    let scenarios: Vec<ScenarioConfig> = cfg
        .scenarios
        .iter()
        .map(|&id| ScenarioConfig::from_table(id, cfg.p_schedule.clone(), cfg.m_samples, cfg.seed))
        .collect::<amfc_core::Result<_>>()?;
    let heads = cfg.head_kinds()?;
    let opts = RunOpts {
        repeats: cfg.bench.repeats,
        warmup: cfg.bench.warmup,
        head_hyper: head_hyper(&cfg),
    };
    let report = run_grid(&models, &ds, &plan, &scenarios, &heads, &opts)?;
    for f in &report.failures {
        eprintln!(
            "amfc: warning: scenario {} fold {} failed: {}",
            f.scenario, f.fold, f.error
        );
    }
    let json_path = cfg.out_dir.join("report.json");
    let csv_path = cfg.out_dir.join("report.csv");
    emit_report(&report, &json_path, ReportFormat::Json)?;
    emit_report(&report, &csv_path, ReportFormat::Csv)?;
    write_run_manifest(&cfg, "bench")?;
    println!("report_json={}", json_path.display());
    println!("report_csv={}", csv_path.display());
    Ok(())
}

fn cmd_analyze(
    cli: &Cli,
    config: &Path,
    model: Option<&Path>,
    first: usize,
    last: usize,
) -> Result<()> {
    let cfg = effective_config(cli, config)?;
    let model = load_cnn(&cfg, model)?;
    let ds = load_dataset(&cfg)?;
    let train_ds = extraction_images(&cfg, &ds)?;
    let out_dir = cfg.out_dir.join("analysis");
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut builder =
        BankBuilder::for_run_seed(&model, train_ds.images(), cfg.m_samples, cfg.seed)?;
    let mut prev_p = None;
    for (i, &p) in cfg.p_schedule.iter().enumerate() {
        let layer = i + 1;
        let entry = builder.layer_eigen(layer, prev_p)?;
        let curve = representation_curve(layer, &entry.eigen.eigenvalues)?;
        export_curve_csv(&curve, &out_dir.join(format!("l{layer}_curve.csv")))?;
        // Full valid spectrum as a space, so the first/last reconstructions
        // come from the layer's ranking, not from a selection.
        let full = amfc_core::featurespace::select_basis(
            layer,
            &entry.mean,
            &entry.eigen,
            entry.eigen.valid_count(),
            SelectionMode::FirstRanked,
            0,
        )?;
        export_eigenimages(&full, first, last, &out_dir)?;
        export_mean_image(&full, &out_dir.join(format!("l{layer}_mean.pgm")))?;
        info(format!(
            "layer {layer}: {} valid eigenvalues, curve + images exported",
            entry.eigen.valid_count()
        ));
        prev_p = Some(p);
    }
    write_run_manifest(&cfg, "analyze")?;
    println!("analysis_dir={}", out_dir.display());
    Ok(())
}
