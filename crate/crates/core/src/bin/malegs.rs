use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use malegs::ablation::{self, Variant};
use malegs::pipeline::{Pipeline, PipelineConfig};
use malegs::Result;

#[derive(Parser)]
#[command(name = "malegs", about = "Multi-appearance language field pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scene, views and photos.
    Gen(Common),
    /// Select novel appearances and dump raw feature maps.
    Features(Common),
    Uncertainty(Common),
    TrainAe(Common),
    /// Encode every feature map into latent targets.
    Targets(Common),
    TrainField(Common),
    /// Fused score maps and masks for the evaluated views.
    Query(Common),
    /// Run everything and write report.csv.
    Eval(Common),
    /// Run the configured variants over the configured seeds.
    Ablate(Common),
    StyleVote(Common),
    Seg3d(Common),
}

fn load(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.scene.seed = s;
    }
    Ok(cfg)
}

fn show(dir: &Path) {
    println!("{}", dir.display());
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen(c)
            | Command::Features(c)
            | Command::Uncertainty(c)
            | Command::TrainAe(c)
            | Command::Targets(c)
            | Command::TrainField(c)
            | Command::Query(c)
            | Command::Eval(c)
            | Command::Ablate(c)
            | Command::StyleVote(c)
            | Command::Seg3d(c) => c,
        }
    }
}

fn run(kind: Command) -> Result<()> {
    let c = kind.common();
    let cfg = load(c)?;
    if let Command::Ablate(_) = &kind {
        cfg.validate()?;
        let variants = cfg.variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
        // `--seed` narrows the suite to that one seed.
        let seeds = match c.seed {
            Some(s) => vec![s],
            None => cfg.seeds.clone(),
        };
        let report = ablation::run_ablation(&cfg, &variants, &seeds, &c.out)?;
        print!("{}", report.to_csv()?);
        return Ok(());
    }
    let p = Pipeline::new(cfg, &c.out)?;
    let keys = p.keys().clone();
    match &kind {
        Command::Gen(_) => {
            p.gen()?;
            show(&p.stage_dir("gen", &keys.gen));
        }
        Command::Features(_) => {
            p.novel_appearances()?;
            show(&p.stage_dir("features", &keys.features));
            show(&p.write_features()?);
        }
        Command::Uncertainty(_) => {
            p.uncertainty()?;
            show(&p.stage_dir("uncertainty", &keys.uncertainty));
        }
        Command::TrainAe(_) => {
            p.train_ae()?;
            keys.ae.iter().for_each(|k| show(&p.stage_dir("train-ae", k)));
        }
        Command::Targets(_) => {
            p.targets()?;
            show(&p.stage_dir("targets", &keys.targets));
        }
        Command::TrainField(_) => {
            p.train_field()?;
            keys.field.iter().for_each(|k| show(&p.stage_dir("train-field", k)));
        }
        Command::Query(_) => {
            p.query()?;
            show(&p.stage_dir("query", &keys.query));
        }
        Command::Eval(_) => print!("{}", p.eval()?.to_csv()?),
        Command::StyleVote(_) => {
            let vote = p.style_vote()?;
            for (s, n) in &vote.votes {
                println!("{s}\t{n}");
            }
            println!("winner\t{}", vote.winner);
        }
        Command::Seg3d(_) => {
            for r in p.seg3d()? {
                println!("{}\t{}\t{:.4}\t{:.4}", r.query, r.selected, r.precision, r.recall);
            }
        }
        Command::Ablate(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
