use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use famle_core::experiment::{
    collect_corpus, control_prior, held_out_situation, log_loss_trend, metatrain, read_corpus,
    read_corpus_specs, run_comparison, sinefig, write_corpus, write_training_output,
    ExperimentConfig,
};
use famle_core::{Checkpoint, Error, Method, Result};

/// Meta-learned adaptive MPC experiments.
#[derive(Debug, Parser)]
#[command(name = "famle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample situations and collect random-action corpora.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train one method on a corpus directory.
    Metatrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "famle")]
        method: Method,
    },
    /// Compare control methods on a held-out situation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; its situations are excluded from the held-out draw.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        famle: Option<PathBuf>,
        #[arg(long)]
        maml: Option<PathBuf>,
        #[arg(long)]
        reptile: Option<PathBuf>,
    },
    /// Few-shot sine regression curves for FAMLE and first-order MAML.
    Sinefig {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::Diverged { .. } | Error::MetaDiverged { .. } => 3,
        Error::Episode { source, .. } => exit_code(source),
        Error::Io(_) => 4,
        Error::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(common: &Common) -> Result<ExperimentConfig> {
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Option<PathBuf>, expect: Method) -> Result<Option<Checkpoint<f64>>> {
    let Some(p) = path else { return Ok(None) };
    let c = Checkpoint::load(p)?;
    if c.method != expect {
        return Err(Error::Config(format!(
            "{} holds a {} checkpoint, expected {expect}",
            p.display(),
            c.method
        )));
    }
    Ok(Some(c))
}

fn cmd_run(
    common: &Common,
    corpus: &Path,
    paths: [(Method, &Option<PathBuf>); 3],
) -> Result<()> {
    let cfg = prepare(common)?;
    let specs = read_corpus_specs(corpus)?;
    let held_out = held_out_situation(cfg.family, &specs, cfg.seed)?;
    let mut ckpts = Vec::new();
    for (m, p) in paths {
        ckpts.push((m, load_checkpoint(p, m)?));
    }
    let find = |m: Method| ckpts.iter().find(|(k, _)| *k == m).and_then(|(_, c)| c.as_ref());
    let norm_source = find(Method::Famle).or(find(Method::Maml)).or(find(Method::Reptile));
    let mut priors = Vec::new();
    for &m in &cfg.methods {
        priors.push((m, control_prior(&cfg, m, find(m), norm_source, cfg.seed)?));
    }
    let report = run_comparison(&cfg, &priors, &held_out)?;
    report.write(&common.out)?;
    for r in &report.runs {
        eprintln!(
            "{:>8}: median cumulative reward {:.3}",
            r.method.name(),
            report.median_cumulative(r.method).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { common } => {
            let cfg = prepare(&common)?;
            let corpus = collect_corpus(&cfg)?;
            write_corpus(&common.out, &corpus)?;
            eprintln!("wrote {} situations to {}", corpus.len(), common.out.display());
        }
        Command::Metatrain {
            common,
            corpus,
            method,
        } => {
            let cfg = prepare(&common)?;
            let corpus = read_corpus(&corpus)?;
            let result = metatrain(&cfg, &corpus, method)?;
            let path = write_training_output(&common.out, method, &result)?;
            if let Some((first, last)) = log_loss_trend(&result.training_log, 100) {
                eprintln!("{method}: post-update loss {first:.5} -> {last:.5}");
            }
            eprintln!("wrote {}", path.display());
        }
        Command::Run {
            common,
            corpus,
            famle,
            maml,
            reptile,
        } => cmd_run(
            &common,
            &corpus,
            [
                (Method::Famle, &famle),
                (Method::Maml, &maml),
                (Method::Reptile, &reptile),
            ],
        )?,
        Command::Sinefig { common } => {
            let cfg = prepare(&common)?;
            let report = sinefig(&cfg)?;
            report.write(&common.out)?;
            for c in &report.curves {
                eprintln!(
                    "{} points: famle mse {:.4}, maml mse {:.4}",
                    c.points, c.famle_mse, c.maml_mse
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
