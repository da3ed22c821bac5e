//! Command-line driver for the one-shot affordance detector.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data validation
//! error, 3 numerical divergence during training.

use afford_core::episodes::{
    dir::{load_image_tensor, save_gray_tensor},
    load_pad_dir, write_pad_dir, Family, SupportAnnotation,
};
use afford_core::error::Error;
use afford_core::metrics::write_report;
use afford_core::purpose::SupportSample;
use afford_core::train::{
    evaluate, predict_maps, write_trace, Checkpoint, EvalOptions, TrainConfig, Trainer,
};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "afford", version, about = "One-shot affordance detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset in the directory layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of episodes to write (spread over the three families).
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        /// Queries per episode.
        #[arg(long, default_value_t = 5)]
        n_queries: usize,
    },
    /// Train on a data directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(usize))]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test part of a fold.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        report: PathBuf,
        /// Number of test episodes.
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Queries per test episode; defaults to the checkpoint's setting.
        #[arg(long)]
        n_queries: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Predict masks for query images given one annotated support image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        support_ann: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        queries: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's help/version on stdout with success status.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::BadConfig(_) => 1,
                Error::Diverged { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> afford_core::Result<()> {
    match cli.cmd {
        Cmd::GenData {
            out,
            episodes,
            seed,
            n_queries,
        } => {
            let mut eps = Vec::with_capacity(episodes);
            for e in 0..episodes {
                let family = Family::ALL[e % Family::ALL.len()];
                let ep_seed = seed.wrapping_add(e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                eps.push(afford_core::episodes::generate_synthetic(
                    ep_seed,
                    family.id(),
                    n_queries,
                )?);
            }
            let categories: BTreeMap<u32, String> = Family::ALL
                .iter()
                .map(|f| (f.id(), f.name().to_string()))
                .collect();
            write_pad_dir(&out, &eps, &categories, seed)?;
            println!(
                "wrote {} episodes ({} queries each) to {}",
                episodes,
                n_queries,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            fold,
            out,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            cfg.fold_id = fold;
            cfg.validate()?;
            let dataset = load_pad_dir(&data)?;
            let split = dataset.fold_split(cfg.seed)?;
            let mut trainer = Trainer::new(cfg.clone())?;
            let trace = trainer.run(&dataset, &split, cfg.steps)?;
            trainer.checkpoint().save(&out)?;
            let trace_path = out.with_extension("trace.jsonl");
            write_trace(&trace_path, &trace)?;
            let last = trace.last().map(|t| t.loss).unwrap_or(f32::NAN);
            println!(
                "trained {} steps on fold {} (final loss {:.4}); checkpoint {}, trace {}",
                cfg.steps,
                fold,
                last,
                out.display(),
                trace_path.display()
            );
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            data,
            fold,
            report,
            episodes,
            n_queries,
            seed,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            if checkpoint.config.fold_id != fold {
                eprintln!(
                    "warning: checkpoint was trained on fold {}, evaluating fold {}",
                    checkpoint.config.fold_id, fold
                );
            }
            let (model, _) = checkpoint.restore()?;
            let dataset = load_pad_dir(&data)?;
            let split = dataset.fold_split(checkpoint.config.seed)?;
            let opts = EvalOptions {
                fold_id: fold,
                episodes,
                n_queries: n_queries.unwrap_or(checkpoint.config.n_queries),
                seed,
            };
            let (records, aggregate) = evaluate(&model, &dataset, &split, &opts)?;
            let file = std::fs::File::create(&report).map_err(|e| Error::io(&report, e))?;
            write_report(file, &records, &aggregate).map_err(|e| Error::io(&report, e))?;
            println!(
                "fold {} over {} images: IoU {:.3}  MAE {:.3}  E-phi {:.3}  CC {:.3} -> {}",
                fold,
                aggregate.count,
                aggregate.iou,
                aggregate.mae,
                aggregate.e_phi,
                aggregate.cc,
                report.display()
            );
            Ok(())
        }
        Cmd::Predict {
            ckpt,
            support,
            support_ann,
            queries,
            out,
        } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let (model, _) = checkpoint.restore()?;
            let image = load_image_tensor(&support)?;
            let ann_text = std::fs::read_to_string(&support_ann)
                .map_err(|e| Error::io(&support_ann, e))?;
            let ann: SupportAnnotation = serde_json::from_str(&ann_text).map_err(|e| {
                Error::Data(afford_core::error::DataError::MalformedRecord {
                    path: support_ann.clone(),
                    reason: e.to_string(),
                })
            })?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            let (human_box, object_box) = ann.to_boxes(w, h, &support_ann)?;
            let sample = SupportSample {
                image,
                human_box,
                object_box,
            };
            let query_tensors = queries
                .iter()
                .map(|q| load_image_tensor(q))
                .collect::<afford_core::Result<Vec<_>>>()?;

            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let maps = predict_maps(&model, &sample, &query_tensors)?;
            let mut manifest = Vec::new();
            for (q, map) in queries.iter().zip(&maps) {
                let stem = q
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("query")
                    .to_string();
                let mask_path = out.join(format!("{stem}_mask.png"));
                save_gray_tensor(&mask_path, map)?;
                manifest.push(serde_json::json!({
                    "query": q.display().to_string(),
                    "mask": mask_path.display().to_string(),
                }));
            }
            let manifest_path = out.join("manifest.json");
            let manifest_json = serde_json::json!({
                "support": support.display().to_string(),
                "outputs": manifest,
            });
            std::fs::write(
                &manifest_path,
                serde_json::to_string_pretty(&manifest_json).expect("serializable"),
            )
            .map_err(|e| Error::io(&manifest_path, e))?;
            println!("wrote {} masks to {}", maps.len(), out.display());
            Ok(())
        }
    }
}
