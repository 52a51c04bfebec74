//! `dgtl`: command-line harness for the cross-modality metric learning
//! toolkit. Subcommands: `gen-data`, `train`, `eval`, `ablate`, `grad-check`.
//!
//! Exit codes: 0 success, 1 configuration/data error, 2 numerical error
//! (including a failed gradient check).

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgtl_core::ablation::{format_table, run_axis, AblationAxis, DEFAULT_MC_GRID};
use dgtl_core::config::{RunConfig, SEED_ENV_VAR};
use dgtl_core::data::Modality;
use dgtl_core::error::{Error, Result};
use dgtl_core::eval::{evaluate, read_features_csv, EvalSet};
use dgtl_core::pipeline::{run_experiment_on, EvalSummary};
use dgtl_core::synth::{generate, SyntheticSpec};
use dgtl_core::trainer::grad_check;

#[derive(Parser)]
#[command(
    name = "dgtl",
    about = "Dual-granularity triplet loss toolkit: train and evaluate cross-modality retrieval on synthetic two-modality data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset directory.
    GenData(GenDataArgs),
    /// Train a model and score the held-out split in both query directions.
    Train(TrainArgs),
    /// Score externally supplied feature CSVs (no model involved).
    Eval(EvalArgs),
    /// Sweep one configuration axis, training each cell with shared seeds.
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
}

/// Configuration source plus per-key overrides; flags beat the file, the
/// `DGTL_SEED` environment variable beats everything for seeds.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (.toml or .json); defaults to the committed
    /// benchmark configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss arrangement: fine_only_f, fine_only_c, fine_only_fc, f2f, c2c, c2f, f2c.
    #[arg(long)]
    arrangement: Option<String>,
    /// Fine-branch triplet input: f_p or f_bn.
    #[arg(long)]
    fine_feature: Option<String>,
    /// Coarse-branch triplet input: f_pf or f_bnf.
    #[arg(long)]
    coarse_feature: Option<String>,
    /// Fine-branch pooling: avg, max or gem.
    #[arg(long)]
    pool_fine: Option<String>,
    /// Coarse-branch pooling: avg, max or gem.
    #[arg(long)]
    pool_coarse: Option<String>,
    /// Fusion method: sum or cat.
    #[arg(long)]
    fusion: Option<String>,
    /// Sample-triplet margin m.
    #[arg(long)]
    margin_fine: Option<f64>,
    /// Center-triplet margin mc.
    #[arg(long)]
    margin_coarse: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Identities per batch, P.
    #[arg(long)]
    p: Option<usize>,
    /// Samples per identity per modality, K.
    #[arg(long)]
    k: Option<usize>,
    /// Train on a dataset directory instead of the configured source.
    #[arg(long)]
    data_path: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_with(RunConfig::benchmark())
    }

    fn resolve_with(&self, default: RunConfig) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => default,
        };
        if let Some(v) = &self.arrangement {
            config.loss.arrangement = dgtl_core::losses::Arrangement::parse(v)?;
        }
        if let Some(v) = &self.fine_feature {
            config.loss.fine_feature = dgtl_core::losses::FineFeature::parse(v)?;
        }
        if let Some(v) = &self.coarse_feature {
            config.loss.coarse_feature = dgtl_core::losses::CoarseFeature::parse(v)?;
        }
        if let Some(v) = &self.pool_fine {
            config.embedder.pool_fine = v.clone();
        }
        if let Some(v) = &self.pool_coarse {
            config.embedder.pool_coarse = v.clone();
        }
        if let Some(v) = &self.fusion {
            config.embedder.fusion = v.clone();
        }
        if let Some(v) = self.margin_fine {
            config.loss.margin_fine = v;
        }
        if let Some(v) = self.margin_coarse {
            config.loss.margin_coarse = v;
        }
        if let Some(v) = self.epochs {
            config.train.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            config.train.learning_rate = v;
        }
        if let Some(v) = self.p {
            config.sampler.p = v;
        }
        if let Some(v) = self.k {
            config.sampler.k = v;
        }
        if let Some(path) = &self.data_path {
            config.data.path = Some(path.clone());
            config.data.synthetic = None;
        }
        if let Some(seed) = self.seed {
            config.override_seeds(seed);
        }
        if let Some(seed) = env_seed()? {
            config.override_seeds(seed);
        }
        Ok(config)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(value) => value
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|e| Error::config(format!("{SEED_ENV_VAR}={value:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to write index.csv, samples.csv and meta.json into.
    #[arg(long)]
    out_dir: PathBuf,
    /// Take the synthetic spec from a run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_identities: Option<usize>,
    #[arg(long)]
    samples_per_identity: Option<usize>,
    /// Input tensor shape as H,W,C.
    #[arg(long, value_delimiter = ',')]
    input_shape: Option<Vec<usize>>,
    #[arg(long)]
    identity_scale: Option<f64>,
    #[arg(long)]
    modality_offset_scale: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for the artifacts (checkpoint.json, history.jsonl,
    /// eval.json, config.json).
    #[arg(long, default_value = "dgtl_run")]
    out_dir: PathBuf,
    /// Write the step history to this path instead of
    /// `<out-dir>/history.jsonl`.
    #[arg(long)]
    history_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Query features CSV (identity,modality,f0..).
    #[arg(long)]
    query: PathBuf,
    /// Gallery features CSV (identity,modality,f0..).
    #[arg(long)]
    gallery: PathBuf,
    /// Optional path for the JSON result record.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Axis to sweep: arrangement, pooling, bnneck_routing, fusion, margin_mc.
    #[arg(long)]
    axis: String,
    /// Margin grid for the margin_mc axis, comma separated.
    #[arg(long, value_delimiter = ',')]
    mc_grid: Option<Vec<f64>>,
    /// Directory for results.jsonl and table.txt.
    #[arg(long, default_value = "dgtl_ablation")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Coordinates checked per trainable array.
    #[arg(long, default_value_t = 20)]
    params_per_layer: usize,
    /// Seed for the probe batch and coordinate selection.
    #[arg(long, default_value_t = 0)]
    check_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => RunConfig::load(path)?
            .data
            .synthetic
            .ok_or_else(|| Error::config("config has no [data.synthetic] section"))?,
        None => SyntheticSpec::benchmark(),
    };
    if let Some(v) = args.num_identities {
        spec.num_identities = v;
    }
    if let Some(v) = args.samples_per_identity {
        spec.samples_per_identity_per_modality = v;
    }
    if let Some(shape) = &args.input_shape {
        if shape.len() != 3 {
            return Err(Error::config(format!(
                "--input-shape wants H,W,C, got {} values",
                shape.len()
            )));
        }
        spec.input_shape = (shape[0], shape[1], shape[2]);
    }
    if let Some(v) = args.identity_scale {
        spec.identity_scale = v;
    }
    if let Some(v) = args.modality_offset_scale {
        spec.modality_offset_scale = v;
    }
    if let Some(v) = args.noise_scale {
        spec.noise_scale = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    let dataset = generate(&spec)?;
    dataset.save(&args.out_dir)?;
    println!(
        "wrote {} samples ({} identities) to {}",
        dataset.samples().len(),
        spec.num_identities,
        args.out_dir.display()
    );
    Ok(())
}

fn eval_table(summary: &EvalSummary) -> String {
    let mut out = format!(
        "{:<7}  {:>10}  {:>9}  {:>10}  {:>9}\n",
        "feature", "V->T rank1", "V->T mAP", "T->V rank1", "T->V mAP"
    );
    for feature in &summary.features {
        let v = feature.direction(Modality::Visible);
        let t = feature.direction(Modality::Thermal);
        out.push_str(&format!(
            "{:<7}  {:>10.4}  {:>9.4}  {:>10.4}  {:>9.4}\n",
            feature.feature, v.rank1, v.map, t.rank1, t.map
        ));
    }
    out
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let history_path = args
        .history_out
        .unwrap_or_else(|| args.out_dir.join("history.jsonl"));
    let checkpoint_path = args.out_dir.join("checkpoint.json");

    // config echo artifact; feeding it back reproduces the run
    let echo = serde_json::to_string_pretty(&config.echo())
        .map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(args.out_dir.join("config.json"), echo + "\n")?;

    let dataset = config.resolve_dataset()?;
    let history_file = std::fs::File::create(&history_path)?;
    let mut history_writer = std::io::BufWriter::new(history_file);
    writeln!(
        history_writer,
        "{}",
        serde_json::json!({"record": "config", "config": config.echo()})
    )?;

    let log_every = config.train.log_every;
    let mut step = 0usize;
    let experiment = run_experiment_on(&config, &dataset, Some(checkpoint_path.clone()), |r| {
        if step.is_multiple_of(log_every) {
            eprintln!(
                "epoch {:>3} batch {:>3}: l_all {:.4} (f_tri {:.4} c_tri {:.4} id {:.4}/{:.4})",
                r.epoch, r.batch, r.l_all, r.l_f_tri, r.l_c_tri, r.l_id_fine, r.l_id_coarse
            );
        }
        step += 1;
    })?;
    for r in &experiment.history.records {
        let mut record = serde_json::to_value(r).map_err(|e| Error::parse(e.to_string()))?;
        record
            .as_object_mut()
            .unwrap()
            .insert("record".into(), "step".into());
        writeln!(history_writer, "{record}")?;
    }
    history_writer.flush()?;

    let eval_record = serde_json::json!({
        "config": config.echo(),
        "eval": serde_json::to_value(&experiment.eval).map_err(|e| Error::parse(e.to_string()))?,
    });
    std::fs::write(
        args.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&eval_record).map_err(|e| Error::parse(e.to_string()))?
            + "\n",
    )?;

    print!("{}", eval_table(&experiment.eval));
    println!(
        "artifacts: {} {} {}",
        checkpoint_path.display(),
        history_path.display(),
        args.out_dir.join("eval.json").display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let query = read_features_csv(&args.query)?;
    let gallery = read_features_csv(&args.gallery)?;
    let result = evaluate(&EvalSet::new(query, gallery)?)?;
    let record = serde_json::json!({
        "rank1": result.rank(1),
        "rank5": result.rank(5),
        "rank10": result.rank(10),
        "rank20": result.rank(20),
        "mAP": result.map,
        "queries": result.per_query_ap.len(),
        "gallery_size": result.cmc.len(),
    });
    let text = serde_json::to_string_pretty(&record).map_err(|e| Error::parse(e.to_string()))?;
    if let Some(path) = &args.out {
        std::fs::write(path, text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let axis = AblationAxis::parse(&args.axis)?;
    let grid = args.mc_grid.unwrap_or_else(|| DEFAULT_MC_GRID.to_vec());
    std::fs::create_dir_all(&args.out_dir)?;

    let outcome = run_axis(axis, &config, &grid, |cell| {
        eprintln!("cell {cell}");
    })?;

    let results_path = args.out_dir.join("results.jsonl");
    let file = std::fs::File::create(&results_path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(
        w,
        "{}",
        serde_json::json!({"record": "config", "axis": axis.name(), "config": config.echo()})
    )?;
    for row in &outcome.rows {
        let mut record = serde_json::to_value(row).map_err(|e| Error::parse(e.to_string()))?;
        record
            .as_object_mut()
            .unwrap()
            .insert("record".into(), "cell".into());
        writeln!(w, "{record}")?;
    }
    for failure in &outcome.failures {
        writeln!(
            w,
            "{}",
            serde_json::json!({"record": "failure", "cell_id": failure.cell_id, "error": failure.error})
        )?;
    }
    w.flush()?;

    let table = format_table(&outcome.rows);
    std::fs::write(args.out_dir.join("table.txt"), &table)?;
    print!("{table}");
    println!("results: {}", results_path.display());

    if !outcome.failures.is_empty() {
        for failure in &outcome.failures {
            eprintln!("cell {} failed: {}", failure.cell_id, failure.error);
        }
        return Err(Error::numerical(format!(
            "{} cell(s) failed; partial results kept at {}",
            outcome.failures.len(),
            results_path.display()
        )));
    }
    Ok(())
}

/// Default gradient-check probe: small enough for finite differencing.
fn grad_check_default() -> RunConfig {
    let mut config = RunConfig::benchmark();
    config.sampler.p = 2;
    config.sampler.k = 2;
    config.embedder.input_shape = (3, 3, 2);
    config.embedder.spec_layers = vec![4];
    config.embedder.shared_layers = vec![4];
    config.embedder.feature_dim = 4;
    config
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let config = args.config.resolve_with(grad_check_default())?;
    // the probe batch is synthetic; the embedder only needs P classes
    let num_identities = config.sampler.p.max(2);
    let train_cfg = config.to_train_config(num_identities, None)?;
    let seed = env_seed()?.unwrap_or(args.check_seed);
    let report = grad_check(&train_cfg, args.params_per_layer, seed)?;

    for layer in &report.per_layer {
        println!(
            "{:<24} checked {:>3}  max rel {:.3e}",
            layer.layer, layer.checked, layer.max_rel_error
        );
    }
    if !report.excluded.is_empty() {
        println!(
            "excluded (mining-tie crossings): {}",
            report.excluded.join(", ")
        );
    }
    if report.nominal_tie {
        println!("note: mining tie present at the unperturbed point");
    }
    println!(
        "worst: {} rel {:.3e} over {} coordinates (threshold {:.0e})",
        report.worst_coordinate, report.max_rel_error, report.checked, report.threshold
    );
    if report.pass {
        println!("grad check: PASS");
        Ok(())
    } else {
        println!("grad check: FAIL");
        Err(Error::numerical(format!(
            "gradient check failed: max rel {:.3e} at {}",
            report.max_rel_error, report.worst_coordinate
        )))
    }
}
