use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mch_core::pipeline::{self, PipelineConfig, SearchQuery};
use mch_core::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "mch", version, about = "Multi-code Hamming hashing pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Working directory for all pipeline files (same as `--set dir=...`).
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F64, global = true)]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic or figure-1 corpus.
    GenData,
    /// Train the base hash model.
    TrainBase,
    /// Train the keep/discard policy.
    TrainAgent,
    /// Build the multi-code and single-code indices.
    Encode,
    /// Look up the nearest items of a code or a corpus row.
    Search {
        /// Query code as a bit string, bit 0 first.
        #[arg(long, conflicts_with = "item", required_unless_present = "item")]
        code: Option<String>,
        /// Corpus row to encode with the base model.
        #[arg(long)]
        item: Option<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Search the single-code index instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate both indices and write the reports.
    Eval,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = &common.dir {
        cfg.dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run<T: Scalar>(cfg: &PipelineConfig, cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData => pipeline::gen_data(cfg),
        Cmd::TrainBase => pipeline::train_base_stage::<T>(cfg).map(drop),
        Cmd::TrainAgent => pipeline::train_agent_stage::<T>(cfg).map(drop),
        Cmd::Encode => {
            let anhc = pipeline::encode_stage::<T>(cfg)?;
            println!("anhc\t{anhc:.4}");
            Ok(())
        }
        Cmd::Search {
            code,
            item,
            k,
            baseline,
        } => {
            let query = match (code, item) {
                (Some(c), _) => SearchQuery::Code(c.clone()),
                (None, Some(i)) => SearchQuery::Item(*i),
                (None, None) => return Err(Error::Config("search needs --code or --item".into())),
            };
            let (code, res, dists) = pipeline::search_stage::<T>(cfg, &query, *k, *baseline)?;
            println!(
                "# query {code} radius {} buckets_probed {} buckets_nonempty {}",
                res.final_radius, res.buckets_probed, res.buckets_nonempty
            );
            for (id, d) in res.items.iter().zip(dists) {
                println!("{id}\t{d}");
            }
            Ok(())
        }
        Cmd::Eval => {
            let out = pipeline::eval_stage::<T>(cfg)?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!("index\trecall_h0\tprecision_h0\tmap");
            for (name, r) in [("multi", &out.report), ("single", &out.baseline)] {
                println!(
                    "{name}\t{}\t{}\t{}",
                    show(r.recall_h0),
                    show(r.precision_h0),
                    show(r.map)
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = load_config(&cli.common).and_then(|cfg| {
        cfg.log_resolved();
        match cli.common.precision {
            Precision::F32 => run::<f32>(&cfg, &cli.cmd),
            Precision::F64 => run::<f64>(&cfg, &cli.cmd),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
