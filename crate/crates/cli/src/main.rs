//! `geopeft` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use geopeft::checkpoint;
use geopeft::config::{ExperimentConfig, SplitMode};
use geopeft::data::splits::{self, audit_splits, PoolEntry};
use geopeft::data::synth::generate_to_dir;
use geopeft::data::{DatasetManifest, Split};
use geopeft::diagnostics::{distance_report, embeddings_csv, parameter_memory_report, EmbeddingRecord};
use geopeft::peft::millions;
use geopeft::train::experiments::{lr_search, run_replicates};
use geopeft::train::{build_model, embed_samples, evaluate, history_csv, timing_csv, train, PreparedData};

const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Parser)]
#[command(name = "geopeft", version, about = "Parameter-efficient fine-tuning of ViT encoders for multispectral segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the step being run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset manifest; defaults to `[data] manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split map JSON replacing the manifest's own splits.
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-region dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Build buffered spatial or class-balanced splits and audit them.
    Split {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        buffer_km: Option<f64>,
        /// `buffered` or `balanced`.
        #[arg(long)]
        mode: Option<SplitMode>,
    },
    /// Random learning-rate search.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// One fine-tuning run.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Metrics of a checkpoint on the dataset splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one split.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Full runs over the configured seeds with mean ± std.
    Replicate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated seeds replacing `[replicate] seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Image embeddings of one split as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Weights to embed with; the seeded initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Split,
    },
    /// Nearest-train embedding distances per split.
    Distances {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter counts and memory accounting for the configured model.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Per-split counts and minimum cross-split distances.
    AuditSplits {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<ExperimentConfig>().with_context(|| format!("in {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn finish(cfg: &ExperimentConfig, common: &Common) -> Result<()> {
    cfg.validate()?;
    write(&common.out, RESOLVED_CONFIG, cfg.to_ini())
}

fn load_manifest(cfg: &mut ExperimentConfig, data: &DataArgs) -> Result<(DatasetManifest, PathBuf)> {
    if let Some(p) = &data.manifest {
        cfg.manifest = Some(p.clone());
    }
    let path = cfg.manifest.clone().context("no manifest given (--manifest or [data] manifest)")?;
    let (mut m, root) = DatasetManifest::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = &data.splits {
        let bytes = fs::read(s).with_context(|| format!("reading {}", s.display()))?;
        m.splits = splits::parse_split_map(&bytes)?;
        m.validate()?;
    }
    Ok((m, root))
}

fn prepare(cfg: &ExperimentConfig, m: &DatasetManifest, root: &Path) -> Result<PreparedData> {
    Ok(PreparedData::from_manifest(m, root, &cfg.run)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            let (m, _) = generate_to_dir(&common.out, &cfg.synth)?;
            cfg.manifest = Some(common.out.join(geopeft::data::MANIFEST_FILE));
            log::info!("{} samples written", m.samples.len());
            finish(&cfg, &common)
        }
        Command::Split { common, data, buffer_km, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.split.seed = s;
            }
            if let Some(b) = buffer_km {
                cfg.split.buffer_km = b;
            }
            if let Some(m) = mode {
                cfg.split.mode = m;
            }
            let (m, _) = load_manifest(&mut cfg, &data)?;
            let pool: Vec<PoolEntry> = m.samples.iter().map(PoolEntry::from).collect();
            let sp = &cfg.split;
            let map = match sp.mode {
                SplitMode::Buffered => {
                    let b = splits::build_buffered_spatial_splits(&pool, sp.buffer_km, &sp.ratios, sp.seed)?;
                    write(&common.out, "clusters.json", json(&b.clusters)?)?;
                    b.splits
                }
                SplitMode::Balanced => {
                    let b = splits::build_class_balanced_splits(&pool, m.num_classes, &sp.quotas, &sp.excluded_regions, sp.seed)?;
                    write(&common.out, "balance.json", json(&b.report)?)?;
                    b.splits
                }
            };
            write(&common.out, "splits.json", splits::split_map_json(&map))?;
            let audit = audit_splits(&pool, &map);
            write(&common.out, "audit.csv", audit.to_csv())?;
            write(&common.out, "audit.json", json(&audit)?)?;
            finish(&cfg, &common)
        }
        Command::AuditSplits { common, data } => {
            let mut cfg = load_config(&common)?;
            let (m, _) = load_manifest(&mut cfg, &data)?;
            let pool: Vec<PoolEntry> = m.samples.iter().map(PoolEntry::from).collect();
            let audit = audit_splits(&pool, &m.splits);
            match audit.min_cross_split_km() {
                Some(d) => println!("min cross-split distance: {d:.3} km"),
                None => println!("min cross-split distance: n/a"),
            }
            write(&common.out, "audit.csv", audit.to_csv())?;
            write(&common.out, "audit.json", json(&audit)?)?;
            finish(&cfg, &common)
        }
        Command::Sweep { common, data } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.run.seed = s;
            }
            let (m, root) = load_manifest(&mut cfg, &data)?;
            let prepared = prepare(&cfg, &m, &root)?;
            let res = lr_search(&cfg.run, &prepared, &cfg.search)?;
            let mut csv = String::from("trial,lr,val_miou\n");
            for t in &res.trials {
                csv.push_str(&format!("{},{},{}\n", t.index, t.lr, t.val_miou));
            }
            write(&common.out, "sweep.csv", csv)?;
            write(&common.out, "sweep.json", json(&res)?)?;
            println!("best lr {} (trial {})", res.best_lr, res.best_index);
            finish(&cfg, &common)
        }
        Command::Train { common, data } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.run.seed = s;
            }
            let (m, root) = load_manifest(&mut cfg, &data)?;
            let prepared = prepare(&cfg, &m, &root)?;
            let out = train(&cfg.run, &prepared)?;
            let r = &out.result;
            write(&common.out, "history.csv", history_csv(&r.history))?;
            write(&common.out, "timing.csv", timing_csv(&r.history))?;
            write(&common.out, "metrics.json", json(r)?)?;
            checkpoint::save(&out.store, &common.out.join("checkpoint"), None)?;
            for (s, met) in &r.metrics {
                println!("{s}: mIoU {:.2}", met.miou);
            }
            finish(&cfg, &common)
        }
        Command::Eval { common, data, checkpoint: ckpt, split } => {
            let mut cfg = load_config(&common)?;
            let (m, root) = load_manifest(&mut cfg, &data)?;
            if let Some(s) = split {
                if !m.has_split(s) {
                    bail!("the manifest has no {s} split");
                }
            }
            let prepared = prepare(&cfg, &m, &root)?;
            let (model, mut store) = build_model(&cfg.run)?;
            checkpoint::load(&mut store, &ckpt)?;
            let mut all = std::collections::BTreeMap::new();
            for s in Split::ALL.into_iter().filter(|s| split.is_none_or(|x| x == *s)) {
                let set = prepared.split(s);
                if !set.is_empty() {
                    let met = evaluate(&model, &store, set, &cfg.run.bands(), cfg.run.batch_size)?;
                    println!("{s}: mIoU {:.2}", met.miou);
                    all.insert(s, met);
                }
            }
            write(&common.out, "metrics.json", json(&all)?)?;
            finish(&cfg, &common)
        }
        Command::Replicate { common, data, seeds } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let (m, root) = load_manifest(&mut cfg, &data)?;
            let prepared = prepare(&cfg, &m, &root)?;
            let rep = run_replicates(&cfg.run, &prepared, &cfg.seeds)?;
            for r in &rep.runs {
                write(&common.out, &format!("history_seed{}.csv", r.seed), history_csv(&r.history))?;
            }
            write(&common.out, "aggregate.csv", rep.to_csv())?;
            write(&common.out, "replicates.json", json(&rep)?)?;
            for (k, v) in &rep.aggregate {
                println!("{k}: {:.2} ± {:.2}", v.mean, v.std);
            }
            finish(&cfg, &common)
        }
        Command::Embed { common, data, checkpoint: ckpt, split } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.run.seed = s;
            }
            let (m, root) = load_manifest(&mut cfg, &data)?;
            if !m.has_split(split) {
                bail!("the manifest has no {split} split");
            }
            let records = embed_all(&cfg, &m, &root, ckpt.as_deref(), Some(split))?;
            write(&common.out, &format!("embeddings_{split}.csv"), embeddings_csv(&records)?)?;
            finish(&cfg, &common)
        }
        Command::Distances { common, data, checkpoint: ckpt } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.run.seed = s;
            }
            let (m, root) = load_manifest(&mut cfg, &data)?;
            let records = embed_all(&cfg, &m, &root, ckpt.as_deref(), None)?;
            let report = distance_report(&records)?;
            print!("{}", report.to_csv());
            write(&common.out, "distances.csv", report.to_csv())?;
            write(&common.out, "distances.json", json(&report)?)?;
            finish(&cfg, &common)
        }
        Command::Report { common, batch_size } => {
            let cfg = load_config(&common)?;
            let r = parameter_memory_report(&cfg.run.model, batch_size)?;
            let text = format!(
                "policy: {}\nencoder params: {} ({})\npeft params: {} ({}, {:.2}% of encoder)\ndecoder params: {}\ntotal params: {}\ntrainable params: {} ({:.2}%)\nactivation elements (batch {}): {}\noptimizer state elements: {}\nestimated bytes: {}\n",
                cfg.run.model.policy,
                r.encoder_params,
                millions(r.encoder_params),
                r.peft_params,
                millions(r.peft_params),
                r.peft_percent_of_encoder,
                r.decoder_params,
                r.total_params,
                r.trainable_params,
                r.trainable_percent,
                r.batch_size,
                r.activation_elements,
                r.optimizer_state_elements,
                r.estimated_bytes
            );
            print!("{text}");
            write(&common.out, "report.txt", &text)?;
            write(&common.out, "report.json", json(&r)?)?;
            finish(&cfg, &common)
        }
    }
}

fn embed_all(
    cfg: &ExperimentConfig,
    m: &DatasetManifest,
    root: &Path,
    ckpt: Option<&Path>,
    only: Option<Split>,
) -> Result<Vec<EmbeddingRecord>> {
    let prepared = prepare(cfg, m, root)?;
    let (model, mut store) = build_model(&cfg.run)?;
    if let Some(c) = ckpt {
        checkpoint::load(&mut store, c)?;
    }
    let mut out = Vec::new();
    for s in Split::ALL.into_iter().filter(|s| only.is_none_or(|x| x == *s)) {
        let set = prepared.split(s);
        let vecs = embed_samples(&model, &store, set, &cfg.run.bands(), cfg.run.batch_size)?;
        for (sample, vector) in set.iter().zip(vecs) {
            out.push(EmbeddingRecord { sample_id: sample.id.clone(), region: sample.region.clone(), split: s, vector });
        }
    }
    Ok(out)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
