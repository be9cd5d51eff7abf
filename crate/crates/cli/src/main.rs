use std::path::PathBuf;
use std::process::ExitCode;

use causal_gnn::models::ModelKind;
use causal_gnn::pipeline::{self, PipelineError, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "causal-gnn", version, about = "Causal-graph GNN fire-danger forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a generator preset or spec.
    Generate(Common),
    /// Discover a lagged causal graph with PCMCI.
    Discover(Common),
    /// Train the selected model for every seed.
    Train(Common),
    /// Score trained checkpoints on the test split.
    Evaluate(Common),
    /// Shapley attributions for positive test samples.
    Explain(Common),
    /// Print the resolved configuration as TOML.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Forecast horizon in fine time steps.
    #[arg(long)]
    horizon: Option<usize>,
    /// Generator preset: mediterranean, boreal, fig6-default or planted-lag.
    #[arg(long)]
    preset: Option<String>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?}; expected lstm, gru, gnn_corr, gnn_full or gnn_causal"))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(model) = self.model {
            cfg.model = model;
        }
        if let Some(h) = self.horizon {
            cfg.window.horizon = h;
        }
        if let Some(p) = &self.preset {
            cfg.preset = p.clone();
            cfg.scm = None;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Generate(c) => {
            let out = pipeline::cmd_generate(&c.resolve()?)?;
            println!("wrote {} and {}", out.csv.display(), out.sidecar.display());
            println!("positive rate {:.6} ({} positives)", out.positive_rate, out.n_positive);
        }
        Command::Discover(c) => {
            let cfg = c.resolve()?;
            let out = pipeline::cmd_discover(&cfg)?;
            print!("{}", out.link_table);
            println!("{} links written to {}", out.graph.links.len(), cfg.graph_path().display());
            if let Some((p, r)) = out.precision_recall {
                println!("precision {p:.3} recall {r:.3} against the generating graph");
            }
        }
        Command::Train(c) => {
            for s in pipeline::cmd_train(&c.resolve()?)? {
                println!(
                    "seed {}: best epoch {}, final train loss {:.5}, checkpoint {}",
                    s.seed,
                    s.best_epoch,
                    s.final_train_loss,
                    s.checkpoint.display()
                );
            }
        }
        Command::Evaluate(c) => {
            let r = pipeline::cmd_evaluate(&c.resolve()?)?;
            println!("seed,auprc,auroc");
            for s in &r.seeds {
                println!("{},{:.4},{:.4}", s.seed, s.auprc, s.auroc);
            }
            println!("mean,{:.4},{:.4}", r.mean_auprc, r.mean_auroc);
            println!("std,{:.4},{:.4}", r.std_auprc, r.std_auroc);
            println!(
                "positive fraction {:.5} ({} of {}); random-ranking AUPRC {:.5}",
                r.positive_fraction, r.n_positive, r.n_samples, r.random_auprc
            );
        }
        Command::Explain(c) => {
            let out = pipeline::cmd_explain(&c.resolve()?)?;
            if out.n_samples == 0 {
                println!("warning: no positive test samples; attribution output is empty");
            } else {
                println!("explained {} samples; wrote {}", out.n_samples, out.attributions.display());
            }
        }
        Command::Config(c) => print!("{}", c.resolve()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAUSAL_GNN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
