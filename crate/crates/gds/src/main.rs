//! Command-line front end for the metric-learning laboratory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use gds::config::{stream_rng, LossKind, TrainConfig};
use gds::data;
use gds::embedder::{forward, load_checkpoint};
use gds::eval::evaluate_test_set;
use gds::gradcheck;
use gds::pipeline;

#[derive(Parser)]
#[command(name = "gds", version, about = "Distance-distribution separation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Generate the synthetic source/target benchmark as CSV files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for source.csv and target.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full three-stage pipeline and report target-test metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Adaptation loss: triplet, gds, or gds-h.
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Run directory; defaults to $GDS_RUN_ROOT/run-<seed>-<loss> when
        /// the variable is set, otherwise no artifacts are written.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter across values, running the pipeline per value.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// One of: beta, kappa, lambda_h, lambda_sigma, clustering.
        #[arg(long)]
        parameter: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Optional CSV destination for the sweep table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed a CSV dataset with a checkpoint and write the embeddings.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    Ok(cfg)
}

fn loss_tag(kind: LossKind) -> &'static str {
    match kind {
        LossKind::TripletOnly => "triplet",
        LossKind::TripletGds => "gds",
        LossKind::TripletGdsH => "gds-h",
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Gradcheck {
            seed,
            instances,
            batch,
            dim,
            tolerance,
        } => {
            let results = gradcheck::run_all(seed, instances, batch, dim)?;
            let mut failed = false;
            for r in &results {
                let ok = r.max_rel_err < tolerance;
                failed |= !ok;
                println!(
                    "{}: {} over {} instances, max rel err {:.3e}",
                    if ok { "PASS" } else { "FAIL" },
                    r.suite,
                    r.instances,
                    r.max_rel_err
                );
            }
            if failed {
                bail!("gradient check failed at tolerance {tolerance:e}");
            }
        }
        Cmd::GenData { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let bench = pipeline::build_benchmark(&cfg)?;
            std::fs::create_dir_all(&out)?;
            data::export_csv(&bench.source, &out.join("source.csv"))?;
            data::export_csv(&bench.target, &out.join("target.csv"))?;
            println!(
                "wrote {} source and {} target samples to {}",
                bench.source.samples.len(),
                bench.target.samples.len(),
                out.display()
            );
        }
        Cmd::Train {
            config,
            seed,
            loss,
            beta,
            rounds,
            run_dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = loss {
                cfg.loss = l;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            cfg.validate()?;
            let run_dir = run_dir.or_else(|| {
                std::env::var_os("GDS_RUN_ROOT").map(|root| {
                    PathBuf::from(root).join(format!("run-{}-{}", cfg.seed, loss_tag(cfg.loss)))
                })
            });
            let outcome = pipeline::run_full(&cfg, run_dir.as_deref())?;
            println!(
                "direct transfer: mAP {:.4} rank-1 {:.4}",
                outcome.direct_transfer.map, outcome.direct_transfer.rank1
            );
            println!(
                "after adaptation: mAP {:.4} rank-1 {:.4} auc {:.4}",
                outcome.final_report.map, outcome.final_report.rank1, outcome.final_report.auc
            );
            if let Some(dir) = run_dir {
                println!("artifacts in {}", dir.display());
            }
        }
        Cmd::Eval {
            checkpoint,
            data: data_path,
            seed,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let ds = data::import_csv(&data_path)?;
            let feats: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.features.clone()).collect();
            let labels: Vec<usize> = ds.samples.iter().map(|s| s.identity).collect();
            let (emb, _) = forward(&params, &feats)?;
            let mut rng = stream_rng(seed, "eval-cli");
            let report = evaluate_test_set(&emb, &labels, &mut rng, false)?;
            println!(
                "mAP {:.4} rank-1 {:.4} auc {:.4} gap {:.3} sigmas",
                report.map, report.rank1, report.auc, report.separation.gap_in_sigmas
            );
            if let Some(p) = out {
                let f = std::fs::File::create(&p)?;
                serde_json::to_writer_pretty(f, &report)?;
                println!("report written to {}", p.display());
            }
        }
        Cmd::Ablate {
            config,
            seed,
            parameter,
            values,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
            let rows = pipeline::ablation_sweep(&cfg, &parameter, &values)?;
            println!("parameter,value,map,rank1");
            for r in &rows {
                println!("{},{},{:.4},{:.4}", r.parameter, r.value, r.map, r.rank1);
            }
            if let Some(p) = out {
                let mut w = csv::Writer::from_path(&p)?;
                for r in &rows {
                    w.serialize(r)?;
                }
                w.flush()?;
            }
        }
        Cmd::Export {
            checkpoint,
            data: data_path,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let ds = data::import_csv(&data_path)?;
            let feats: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.features.clone()).collect();
            let (emb, _) = forward(&params, &feats)?;
            let mut w = csv::Writer::from_path(&out)?;
            let mut header = vec!["identity".to_string()];
            header.extend((0..params.cfg.embed).map(|i| format!("e{i}")));
            w.write_record(&header)?;
            for (s, e) in ds.samples.iter().zip(&emb) {
                let mut row = vec![s.identity.to_string()];
                row.extend(e.iter().map(|v| format!("{v:?}")));
                w.write_record(&row)?;
            }
            w.flush()?;
            println!("wrote {} embeddings to {}", emb.len(), out.display());
        }
    }
    Ok(())
}
