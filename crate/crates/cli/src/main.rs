//! Batch command-line interface: generate synthetic benchmarks, train the
//! generative model, evaluate seen/unseen accuracy, and run ablation grids.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure during training.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Overrides};
use gzsl_core::data::{
    generate_synthetic_bundle, load_bundle, save_bundle, DataError, DatasetBundle, SyntheticSpec,
};
use gzsl_core::models::{load_checkpoint, save_checkpoint, FreeModel, ModelError};
use gzsl_core::nn::NnError;
use gzsl_core::pipeline::{self, loss_rows_to_csv, PipelineError, TrainConfig, Variant};

#[derive(Parser)]
#[command(
    name = "gzsl",
    version,
    about = "Generative zero-shot learning at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark bundle and write it as a GZB1 file.
    GenData(GenDataArgs),
    /// Train the generative model on a bundle and write a checkpoint.
    Train(TrainArgs),
    /// Synthesize unseen features, train the final classifier, and report
    /// seen/unseen/harmonic-mean accuracy.
    Eval(EvalArgs),
    /// Train and evaluate a grid of loss/feature variants across seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output path for the GZB1 bundle.
    #[arg(long)]
    out: PathBuf,
    /// Root seed for attributes, noise and splits.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of seen classes.
    #[arg(long, default_value_t = 8)]
    seen: usize,
    /// Number of unseen classes.
    #[arg(long, default_value_t = 4)]
    unseen: usize,
    #[arg(long, default_value_t = 64)]
    feat_dim: usize,
    #[arg(long, default_value_t = 16)]
    attr_dim: usize,
    #[arg(long, default_value_t = 60)]
    samples_per_class: usize,
    /// Noise scale around each class's mean feature.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Seed of the fixed attribute-to-feature mixing matrix.
    #[arg(long, default_value_t = 0)]
    mix_seed: u64,
    /// Bundle name recorded in the file.
    #[arg(long, default_value = "synthetic")]
    name: String,
}

/// Training/evaluation knobs shared by `train`, `eval` and `ablate`.
/// Every field has a documented default; unset flags fall back to the
/// config file, then to dataset-aware defaults, then to the built-ins.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Plain key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for all random streams [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Outer training iterations [default: 3000]
    #[arg(long)]
    iterations: Option<usize>,
    /// Minibatch size [default: 64]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Critic updates per generator update [default: 5]
    #[arg(long)]
    n_critic: Option<usize>,
    /// Learning rate for the generative networks [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate for the final classifier [default: 1e-3]
    #[arg(long)]
    lr_classifier: Option<f64>,
    /// Adam first-moment decay [default: 0.5]
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8]
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Gradient-penalty coefficient [default: 10]
    #[arg(long)]
    lambda_gp: Option<f64>,
    /// Center-loss weight [default: 0.5]
    #[arg(long)]
    lambda_samc: Option<f64>,
    /// Attribute-cycle weight [default: 0.1 for SUN-named bundles, else 0.001]
    #[arg(long)]
    lambda_ra: Option<f64>,
    /// Intra/inter balance of the center loss [default: 0.1 for AWA-named bundles, else 0.8]
    #[arg(long)]
    gamma: Option<f64>,
    /// Center-loss margin [default: 1.0]
    #[arg(long)]
    delta: Option<f64>,
    /// Synthesized features per unseen class [default: per-dataset, else 300]
    #[arg(long)]
    n_syn: Option<usize>,
    /// Refinement embedding concatenated into refined features: h1 or mu [default: h1]
    #[arg(long, value_parser = |s: &str| config::parse_h_choice(s).map_err(|e| e.to_string()))]
    h_choice: Option<gzsl_core::models::HChoice>,
    /// Arithmetic precision: f32 or f64 [default: f32]
    #[arg(long, value_parser = |s: &str| config::parse_precision(s).map_err(|e| e.to_string()))]
    precision: Option<gzsl_core::Precision>,
    /// Hidden width of encoder/generator/critic [default: 4096]
    #[arg(long)]
    eg_hidden: Option<usize>,
    /// First hidden width of the refinement network [default: 4096]
    #[arg(long)]
    fr_hidden: Option<usize>,
    /// Latent code width [default: the bundle's attribute dimension]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Final-classifier epochs [default: 25]
    #[arg(long)]
    classifier_epochs: Option<usize>,
    /// Final-classifier minibatch size [default: 128]
    #[arg(long)]
    classifier_batch: Option<usize>,
    /// Apply the center loss to synthesized seen features too [default: true]
    #[arg(long)]
    samc_on_synthetic: Option<bool>,
    /// Train the refinement network at all [default: true]
    #[arg(long)]
    fr_enabled: Option<bool>,
    /// Classifier feature composition: x, xh or xha [default: xha]
    #[arg(long, value_parser = |s: &str| config::parse_feature_variant(s).map_err(|e| e.to_string()))]
    feature_variant: Option<gzsl_core::pipeline::FeatureVariant>,
    /// Leaky-ReLU negative slope [default: 0.02]
    #[arg(long)]
    slope: Option<f64>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            iterations: self.iterations,
            batch_size: self.batch_size,
            n_critic: self.n_critic,
            lr: self.lr,
            lr_classifier: self.lr_classifier,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            lambda_gp: self.lambda_gp,
            lambda_samc: self.lambda_samc,
            lambda_ra: self.lambda_ra,
            gamma: self.gamma,
            delta: self.delta,
            n_syn: self.n_syn,
            h_choice: self.h_choice,
            precision: self.precision,
            eg_hidden: self.eg_hidden,
            fr_hidden: self.fr_hidden,
            latent_dim: self.latent_dim,
            classifier_epochs: self.classifier_epochs,
            classifier_batch: self.classifier_batch,
            samc_on_synthetic: self.samc_on_synthetic,
            fr_enabled: self.fr_enabled,
            feature_variant: self.feature_variant,
            slope: self.slope,
        }
    }

    fn resolve(&self, dataset_name: &str) -> Result<TrainConfig, CliError> {
        let base = match &self.config {
            Some(path) => Overrides::from_file(path)?,
            None => Overrides::default(),
        };
        Ok(base.merged_with(&self.overrides()).resolve(dataset_name))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Input GZB1 bundle.
    #[arg(long)]
    bundle: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Loss-curve CSV path [default: <checkpoint>.losses.csv]
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Input GZB1 bundle.
    #[arg(long)]
    bundle: PathBuf,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output report JSON path.
    #[arg(long)]
    report: PathBuf,
    /// Also dump refined features as CSV for external visualization.
    #[arg(long)]
    dump_features: Option<PathBuf>,
    /// Degenerate baseline: restrict predictions to seen classes.
    #[arg(long, default_value_t = false)]
    seen_only: bool,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Input GZB1 bundle.
    #[arg(long)]
    bundle: PathBuf,
    /// Comma-separated variants: baseline, cyc, samc, full, optionally
    /// suffixed :x / :xh / :xha.
    #[arg(long, default_value = "baseline,full")]
    variants: String,
    /// Comma-separated seeds, one run per (variant, seed).
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Output CSV table path.
    #[arg(long)]
    out_csv: PathBuf,
    /// Output JSON table path.
    #[arg(long)]
    out_json: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

/// Unified error with a stable exit-code mapping.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            PipelineError::Nn(NnError::NonFiniteGradient { .. }) => {
                CliError::Numeric(e.to_string())
            }
            PipelineError::Config(_) | PipelineError::UnknownVariant(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_bundle_checked(path: &Path) -> Result<DatasetBundle, CliError> {
    Ok(load_bundle(path)?)
}

/// Bundle and checkpoint must agree on feature/attribute dimensions and
/// class count before evaluation makes sense.
fn check_compat(model: &FreeModel, bundle: &DatasetBundle) -> Result<(), CliError> {
    let c = &model.config;
    if c.feat_dim != bundle.feat_dim()
        || c.attr_dim != bundle.attr_dim()
        || c.n_classes != bundle.n_classes()
    {
        return Err(CliError::Data(format!(
            "checkpoint ({}x{} features/attributes, {} classes) does not match bundle ({}x{}, {})",
            c.feat_dim,
            c.attr_dim,
            c.n_classes,
            bundle.feat_dim(),
            bundle.attr_dim(),
            bundle.n_classes()
        )));
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        n_seen: args.seen,
        n_unseen: args.unseen,
        feat_dim: args.feat_dim,
        attr_dim: args.attr_dim,
        samples_per_class: args.samples_per_class,
        noise: args.noise,
        mix_seed: args.mix_seed,
        name: args.name,
    };
    let bundle = generate_synthetic_bundle(&spec, args.seed);
    let violations = bundle.validate();
    if !violations.is_empty() {
        return Err(CliError::Data(format!(
            "generated bundle is invalid: {}",
            violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    save_bundle(&bundle, &args.out)?;
    println!(
        "wrote {}: {} samples, {} seen / {} unseen classes, feat_dim {}, attr_dim {}, splits {}/{}/{}",
        args.out.display(),
        bundle.n_samples(),
        bundle.seen_classes().len(),
        bundle.unseen_classes().len(),
        bundle.feat_dim(),
        bundle.attr_dim(),
        bundle.train_idx().len(),
        bundle.test_seen_idx().len(),
        bundle.test_unseen_idx().len(),
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let bundle = load_bundle_checked(&args.bundle)?;
    let cfg = args.flags.resolve(bundle.name())?;
    let t0 = Instant::now();
    let (model, rows) = pipeline::stage1_train(&bundle, &cfg)?;
    save_checkpoint(&model, &args.checkpoint_out)?;
    let loss_path = args.loss_csv.unwrap_or_else(|| {
        let mut p = args.checkpoint_out.clone();
        p.set_extension("losses.csv");
        p
    });
    write_file(&loss_path, &loss_rows_to_csv(&rows))?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint {}, losses {}",
        cfg.iterations,
        t0.elapsed().as_secs_f64(),
        args.checkpoint_out.display(),
        loss_path.display(),
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let bundle = load_bundle_checked(&args.bundle)?;
    let cfg = args.flags.resolve(bundle.name())?;
    let model = load_checkpoint(&args.checkpoint)?;
    check_compat(&model, &bundle)?;
    let n_syn = pipeline::resolve_n_syn(&bundle, &cfg);
    let synth = pipeline::synthesize_unseen(&model, &bundle, n_syn, cfg.seed)?;
    let classifier = pipeline::stage2_train_classifier(&model, &bundle, &synth, &cfg)?;
    let variant = match cfg.feature_variant {
        gzsl_core::pipeline::FeatureVariant::X => "x",
        gzsl_core::pipeline::FeatureVariant::Xh => "xh",
        gzsl_core::pipeline::FeatureVariant::Xha => "xha",
    };
    let restrict = args.seen_only.then(|| bundle.seen_classes().to_vec());
    let report = pipeline::evaluate_gzsl(
        &model,
        &classifier,
        &bundle,
        &cfg,
        variant,
        restrict.as_deref(),
    )?;
    write_file(&args.report, &report.to_json())?;
    if let Some(dump) = &args.dump_features {
        let csv = pipeline::refined_feature_csv(&model, &bundle, &synth, &cfg)?;
        write_file(dump, &csv)?;
    }
    println!(
        "U={:.2}% S={:.2}% H={:.2}% -> {}",
        100.0 * report.u,
        100.0 * report.s,
        100.0 * report.h,
        args.report.display(),
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let bundle = load_bundle_checked(&args.bundle)?;
    let cfg = args.flags.resolve(bundle.name())?;
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|v| Variant::parse(v.trim()))
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad seed '{s}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    let t0 = Instant::now();
    let table = pipeline::ablate(&bundle, &cfg, &variants, &seeds)?;
    write_file(&args.out_csv, &table.to_csv())?;
    write_file(&args.out_json, &table.to_json())?;
    println!(
        "{} runs in {:.1}s -> {}, {}",
        table.rows.len(),
        t0.elapsed().as_secs_f64(),
        args.out_csv.display(),
        args.out_json.display(),
    );
    for s in &table.summary {
        let dh = s
            .delta_h
            .map(|v| format!(" delta_H={:+.2}%", 100.0 * v))
            .unwrap_or_default();
        println!(
            "  {:<12} U={:.2}% S={:.2}% H={:.2}%{}",
            s.variant,
            100.0 * s.mean_u,
            100.0 * s.mean_s,
            100.0 * s.mean_h,
            dh
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, everything else is usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
