use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use msa2net::data::{self, SyntheticSpec};
use msa2net::fingerprint::{fingerprint_dataset, FingerprintFile};
use msa2net::metrics::HausdorffMode;
use msa2net::model::Guidance;
use msa2net::train::{
    evaluate_samples, export_prediction, plot_data, predict_image, train, Checkpoint, RunConfig,
};
use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "msa2net",
    about = "Self-adaptive convolution segmentation: fingerprint, train, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a dataset fingerprint and its candidate kernel matrix.
    Fingerprint {
        /// Dataset directory (containing manifest.json) or manifest path.
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        /// Dataset id recorded in the fingerprint.
        #[arg(long)]
        dataset_id: Option<String>,
    },
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the guidance mode (Q1|Q2|Q3|None|SelfAdaptive).
        #[arg(long)]
        guidance: Option<String>,
        /// Disable the skip-connection bridge.
        #[arg(long)]
        no_bridge: bool,
        /// Replace the grouped adaptive decoder with a plain upsample head.
        #[arg(long)]
        no_msadecoder: bool,
        /// Override the seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to evaluate (falls back to every sample if empty).
        #[arg(long, default_value = "test")]
        split: String,
        /// Use the plain max instead of the 95th percentile for Hausdorff.
        #[arg(long)]
        plain_hausdorff: bool,
    },
    /// Segment one image with a checkpointed model.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output label-map PNG.
        #[arg(long)]
        out: PathBuf,
        /// Also write raw probabilities (f64le) with a JSON sidecar.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Print the kernel schedule and run summary of a checkpoint.
    Report {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Emit CSV plot series from a fingerprint JSON or a training log.
    PlotData {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a spec file.
    Generate {
        /// SyntheticSpec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional train/val/test ratios, e.g. "0.8,0.1,0.1".
        #[arg(long)]
        split: Option<String>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Fingerprint { data, out, dataset_id } => {
            let (manifest, root) = data::read_manifest(&data)?;
            let stems = manifest.all_stems();
            if stems.is_empty() {
                bail!("dataset has no samples");
            }
            let samples: Vec<_> = stems
                .iter()
                .map(|stem| data::load_pair(&root, stem, manifest.num_classes))
                .collect::<Result<Vec<_>, _>>()?;
            let id = dataset_id.unwrap_or_else(|| data.display().to_string());
            let fp = fingerprint_dataset(
                &id,
                samples
                    .iter()
                    .map(|s| (s.stem.clone(), s.mask.as_slice(), s.height, s.width)),
                manifest.num_classes,
            )?;
            let file = FingerprintFile::new(&fp);
            fs::write(&out, serde_json::to_string_pretty(&file)?)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "fingerprinted {} samples; pooled quartiles {:?}",
                fp.sample_count, fp.pooled_quartiles
            );
            println!("quantized kernels: {:?}", file.candidate_matrix.quantized);
            Ok(())
        }
        Command::Train {
            config,
            guidance,
            no_bridge,
            no_msadecoder,
            seed,
            out_dir,
        } => {
            let mut run_config = RunConfig::from_file(&config)?;
            if let Some(g) = guidance {
                run_config.guidance =
                    Guidance::parse(&g).with_context(|| format!("unknown guidance '{}'", g))?;
            }
            if no_bridge {
                run_config.use_bridge = false;
            }
            if no_msadecoder {
                run_config.use_msadecoder = false;
            }
            if let Some(s) = seed {
                run_config.seed = s;
            }
            if let Some(d) = out_dir {
                run_config.out_dir = d;
            }
            let outcome = train(&run_config)?;
            let last = outcome.records.last().expect("at least one epoch");
            println!(
                "trained {} epochs; final loss {:.6}; best metric {:.6} (epoch {})",
                outcome.records.len(),
                last.loss,
                outcome.checkpoint.best_metric,
                outcome.checkpoint.epoch
            );
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("log:        {}", outcome.log_path.display());
            print!("{}", outcome.checkpoint.model.kernel_schedule_report());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data: data_path,
            out,
            split,
            plain_hausdorff,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let (manifest, root) = data::read_manifest(&data_path)?;
            let mut samples = data::load_split(&manifest, &root, &split)?;
            if samples.is_empty() {
                let stems = manifest.all_stems();
                samples = stems
                    .iter()
                    .map(|s| data::load_pair(&root, s, manifest.num_classes))
                    .collect::<Result<Vec<_>, _>>()?;
            }
            if samples.is_empty() {
                bail!("no samples to evaluate");
            }
            let mode = if plain_hausdorff {
                HausdorffMode::Max
            } else {
                HausdorffMode::Percentile95
            };
            let report = evaluate_samples(&checkpoint.model, &samples, manifest.num_classes, mode)?;
            fs::write(&out, serde_json::to_string_pretty(&report)?)
                .with_context(|| format!("writing {}", out.display()))?;
            let names: BTreeMap<usize, String> = manifest
                .class_names
                .iter()
                .enumerate()
                .map(|(i, n)| (i, n.clone()))
                .collect();
            println!("{}", report.to_table(&names));
            Ok(())
        }
        Command::Predict { ckpt, image, out, probs } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let result = predict_image(&checkpoint.model, &image)?;
            let class_names: Vec<String> = (0..result.num_classes)
                .map(|c| format!("class_{}", c))
                .collect();
            export_prediction(&result, &class_names, &out, probs.as_deref())?;
            println!("labels: {}", out.display());
            Ok(())
        }
        Command::Report { ckpt } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let c = &checkpoint.run_config;
            println!(
                "guidance: {}   bridge: {}   msadecoder: {}",
                c.guidance,
                if c.use_bridge { "on" } else { "off" },
                if c.use_msadecoder { "on" } else { "off" }
            );
            println!(
                "best metric: {:.6} at epoch {}{}",
                checkpoint.best_metric,
                checkpoint.epoch,
                checkpoint
                    .best_val_hd95
                    .map(|v| format!("   val HD95: {:.4}", v))
                    .unwrap_or_default()
            );
            println!(
                "candidate shift: {:?}",
                checkpoint.model.config.candidate_matrix.shift
            );
            print!("{}", checkpoint.model.kernel_schedule_report());
            Ok(())
        }
        Command::PlotData { input, out } => {
            let csv = plot_data(&input)?;
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Generate { spec, count, out, split } => {
            let text = fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticSpec = serde_json::from_str(&text)?;
            let mut manifest = data::generate(&spec, count, &out)?;
            if let Some(ratios) = split {
                let parts: Vec<f64> = ratios
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("bad split '{}'", ratios))?;
                if parts.len() != 3 {
                    bail!("split must have three comma-separated ratios");
                }
                manifest.splits = data::split_stems(
                    manifest.all_stems(),
                    (parts[0], parts[1], parts[2]),
                    spec.seed,
                );
                data::write_manifest(&out, &manifest)?;
            }
            println!(
                "generated {} samples into {} (train {}, val {}, test {})",
                count,
                out.display(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len()
            );
            Ok(())
        }
    }
}
