//! Command implementations behind the `fgga` binary.
//!
//! Every verb reads and writes the stage files in `--out`, so the stages can
//! run one at a time (`gen-data`, `train-gan`, `synth`, `train-gcn`, `eval`)
//! or all at once (`pipeline`) with identical results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fgga::checkpoint::{self, Checkpoint};
use fgga::config::PipelineConfig;
use fgga::datagen;
use fgga::eval::{self, MetricsRecord, Mode, SplitMetrics, SweepKind};
use fgga::io;
use fgga::pipeline::{self, Dataset, PipelineError};

#[derive(Debug, Parser)]
#[command(name = "fgga", version, about = "Zero-shot classification with synthesized features and graph-generated classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config with optional sections world, gan, gcn and eval.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides eval.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for stage files and metrics.
    #[arg(long, global = true, value_name = "DIR", default_value = "fgga-out")]
    pub out: PathBuf,
    /// Overrides eval.mode: full, no-fg, no-at or wgan-only.
    #[arg(long, global = true, value_name = "MODE")]
    pub mode: Option<Mode>,
    /// Overrides eval.synth_per_class.
    #[arg(long, global = true, value_name = "N")]
    pub synth_per_class: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic world, its split and knowledge graph.
    GenData,
    /// Train the conditional feature generator on the seen classes.
    TrainGan,
    /// Synthesize features for the unseen classes.
    Synth,
    /// Train the graph network that generates the classifiers.
    TrainGcn,
    /// Score the trained classifiers on the test split.
    Eval,
    /// Run every stage, repeated over eval.n_splits splits.
    Pipeline,
    /// Run all four modes on the same splits.
    Ablate,
    /// Repeat the pipeline over a range of layer depths or feature widths.
    Sweep {
        #[arg(long, value_name = "KIND")]
        kind: SweepKind,
        /// Comma-separated values, e.g. 1,2,3,4.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

/// The config file (or defaults) with command-line overrides applied.
pub fn effective_config(args: &GlobalArgs) -> Result<PipelineConfig, PipelineError> {
    let mut c = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.seed {
        c.eval.seed = s;
    }
    if let Some(m) = args.mode {
        c.eval.mode = m;
    }
    if let Some(n) = args.synth_per_class {
        c.eval.synth_per_class = Some(n);
    }
    c.validate()?;
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn write_metrics(dir: &Path, record: &MetricsRecord) -> Result<(), PipelineError> {
    write_text(&dir.join(pipeline::METRICS_JSON), &record.to_json())?;
    write_text(&dir.join(pipeline::METRICS_CSV), &record.to_csv())
}

pub fn cmd_gen_data(config: &PipelineConfig, out: &Path) -> Result<Dataset, PipelineError> {
    let data = pipeline::generate_dataset(config, config.eval.seed)?;
    data.save(out)?;
    log::info!(
        "wrote {} train / {} test samples, {} nodes, {} edges to {}",
        data.split.train.len(),
        data.split.test.len(),
        data.nodes.len(),
        data.edges.len(),
        out.display()
    );
    Ok(data)
}

pub fn cmd_train_gan(config: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let data = Dataset::load(out)?;
    match pipeline::stage_gan(config, &data, config.eval.mode)? {
        None => log::info!("mode {}: no generator to train", config.eval.mode),
        Some((nets, history)) => {
            checkpoint::gan_checkpoint(&nets, config.gan.leaky_slope).save(&out.join(pipeline::GAN_CHECKPOINT))?;
            write_text(&out.join(pipeline::GAN_HISTORY), &history.to_csv())?;
            if let Some(last) = history.epochs.last() {
                log::info!(
                    "generator trained: wasserstein {:.4}, penalty {:.4}, cycle {:.4}",
                    last.wasserstein,
                    last.penalty_mean,
                    last.cyc_loss
                );
            }
        }
    }
    Ok(())
}

pub fn cmd_synth(config: &PipelineConfig, out: &Path) -> Result<usize, PipelineError> {
    let data = Dataset::load(out)?;
    let synth = if config.eval.mode == Mode::NoFg {
        vec![]
    } else {
        let nets = checkpoint::gan_from_checkpoint(&Checkpoint::load(&out.join(pipeline::GAN_CHECKPOINT))?)?;
        let n = config
            .eval
            .synth_per_class
            .unwrap_or_else(|| pipeline::default_synth_per_class(&data));
        pipeline::stage_synth(&data, &nets, n)?
    };
    datagen::save_features(&out.join(pipeline::SYNTH), data.d_x, &synth)?;
    log::info!("wrote {} synthesized samples", synth.len());
    Ok(synth.len())
}

pub fn cmd_train_gcn(config: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let data = Dataset::load(out)?;
    let (_, synth) = datagen::load_features(&out.join(pipeline::SYNTH))?;
    let stage = pipeline::stage_classifier(config, &data, &synth, config.eval.mode)?;
    stage.checkpoint.save(&out.join(pipeline::GCN_CHECKPOINT))?;
    if let Some((_, history, _)) = &stage.gcn {
        write_text(&out.join(pipeline::GCN_HISTORY), &history.to_csv())?;
    }
    Ok(())
}

pub fn cmd_eval(config: &PipelineConfig, out: &Path) -> Result<MetricsRecord, PipelineError> {
    let data = Dataset::load(out)?;
    let ck = Checkpoint::load(&out.join(pipeline::GCN_CHECKPOINT))?;
    let classifier = pipeline::classifier_from_checkpoint(&ck)?;
    let metrics = SplitMetrics::evaluate(&classifier, &data.split, data.seed)?;
    let record = MetricsRecord::from_splits(config.eval.protocol, config.eval.mode, vec![metrics], config.digest());
    write_metrics(out, &record)?;
    log::info!("{}", record.report());
    Ok(record)
}

/// Stage files go to `out` for a single split and to `out/split_<i>` for
/// repeated splits; the aggregate metrics always go to `out`.
pub fn cmd_pipeline(config: &PipelineConfig, out: &Path) -> Result<MetricsRecord, PipelineError> {
    let n = config.eval.n_splits;
    let mut per_split = vec![];
    for i in 0..n {
        let seed = eval::split_seed(config.eval.seed, i);
        let run = pipeline::run_split(config, seed)?;
        let dir = if n == 1 { out.to_path_buf() } else { out.join(format!("split_{i}")) };
        run.save(config, &dir)?;
        log::info!("split {i} (seed {seed}): unseen {:.4}", run.metrics.unseen_acc);
        per_split.push(run.metrics);
    }
    let record = MetricsRecord::from_splits(config.eval.protocol, config.eval.mode, per_split, config.digest());
    write_metrics(out, &record)?;
    log::info!("{}", record.report());
    Ok(record)
}

fn write_record_map<K: ToString>(out: &Path, stem: &str, records: &BTreeMap<K, MetricsRecord>) -> Result<(), PipelineError> {
    let as_strings: BTreeMap<String, &MetricsRecord> = records.iter().map(|(k, v)| (k.to_string(), v)).collect();
    let mut json = serde_json::to_string_pretty(&as_strings).expect("plain data");
    json.push('\n');
    write_text(&out.join(format!("{stem}.json")), &json)?;
    let mut csv = String::from("key,seed,seen_acc,unseen_acc,harmonic\n");
    for (k, r) in &as_strings {
        for line in r.to_csv().lines().skip(1) {
            csv.push_str(&format!("{k},{line}\n"));
        }
    }
    write_text(&out.join(format!("{stem}.csv")), &csv)
}

pub fn cmd_ablate(config: &PipelineConfig, out: &Path) -> Result<BTreeMap<Mode, MetricsRecord>, PipelineError> {
    let records = eval::compare_modes(config, &Mode::ALL, config.eval.n_splits, config.eval.seed)?;
    write_record_map(out, "ablation", &records)?;
    for r in records.values() {
        log::info!("{}", r.report());
    }
    Ok(records)
}

pub fn cmd_sweep(
    config: &PipelineConfig,
    out: &Path,
    kind: SweepKind,
    values: &[usize],
) -> Result<BTreeMap<usize, MetricsRecord>, PipelineError> {
    let records = eval::sweep(config, kind, values)?;
    let stem = match kind {
        SweepKind::LayerDepth => "sweep_layer_depth",
        SweepKind::FeatureDim => "sweep_feature_dim",
    };
    write_record_map(out, stem, &records)?;
    for (v, r) in &records {
        log::info!("{v}: {}", r.report());
    }
    Ok(records)
}

pub fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = effective_config(&cli.global)?;
    let out = cli.global.out.as_path();
    match &cli.command {
        Command::GenData => cmd_gen_data(&config, out).map(drop),
        Command::TrainGan => cmd_train_gan(&config, out),
        Command::Synth => cmd_synth(&config, out).map(drop),
        Command::TrainGcn => cmd_train_gcn(&config, out),
        Command::Eval => cmd_eval(&config, out).map(drop),
        Command::Pipeline => cmd_pipeline(&config, out).map(drop),
        Command::Ablate => cmd_ablate(&config, out).map(drop),
        Command::Sweep { kind, values } => cmd_sweep(&config, out, *kind, values).map(drop),
    }
}
