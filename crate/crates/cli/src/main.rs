use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use cseg_core::annotator::AllocationMode;
use cseg_core::harness::{
    ablation_csv, build_stage2, curve_csv, evaluate_curve, generate_split, inference_options, require_checkpoint,
    run_ablation, save_scene, stage_file, train_stage1, ExperimentConfig, Split, ALL_CELLS,
};
use cseg_core::model::{checkpoint, LossMode, Sharing};
use cseg_service::{AppState, Model, ServiceConfig};

#[derive(Parser, Debug)]
#[command(name = "cseg", version, about = "Interactive full-image segmentation")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective config as TOML.
    Config,
    /// Write scenes as image.png, labels.png and meta.json.
    GenData {
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train one stage and save its checkpoint. Stage 2 needs the stage-1
    /// checkpoint of the same loss and sharing.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_enum)]
        sharing: Option<SharingArg>,
    },
    /// Score the stage-2 model over interactive rounds on the eval split.
    Curve {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Scribbles per round in free mode.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        overlays: bool,
    },
    /// Train all four loss/sharing stage-1 models and score them.
    Ablation,
    /// Run the annotation service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Defaults to the pixelwise/shared stage-2 checkpoint in the output
        /// directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Service limits (TOML).
        #[arg(long)]
        service_config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Interactive,
    Eval,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Pixelwise,
    Maskwise,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SharingArg {
    Shared,
    Unshared,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Fixed,
    Free,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::new(0),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    tracing::info!(path = %path.display(), "wrote");
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(cli.log_level)
        .init();
    let mut cfg = load_config(&cli)?;
    let dir = cfg.output.dir.clone();
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::GenData { split } => {
            cfg.validate()?;
            let splits = match split {
                SplitArg::Train => vec![Split::Train],
                SplitArg::Interactive => vec![Split::Interactive],
                SplitArg::Eval => vec![Split::Eval],
                SplitArg::All => vec![Split::Train, Split::Interactive, Split::Eval],
            };
            for split in splits {
                let name = format!("{split:?}").to_lowercase();
                let scenes = generate_split(&cfg, split)?;
                for s in &scenes {
                    save_scene(s, &dir.join("data").join(&name).join(s.index.to_string()))?;
                }
                tracing::info!(split = %name, count = scenes.len(), "scenes written");
            }
        }
        Command::Train { stage, loss, sharing } => {
            if let Some(l) = loss {
                cfg.train.loss = match l {
                    LossArg::Pixelwise => LossMode::Pixelwise,
                    LossArg::Maskwise => LossMode::Maskwise,
                };
            }
            if let Some(s) = sharing {
                cfg.train.sharing = match s {
                    SharingArg::Shared => Sharing::Shared,
                    SharingArg::Unshared => Sharing::Unshared,
                };
            }
            cfg.validate()?;
            std::fs::create_dir_all(&dir)?;
            let (loss, sharing) = (cfg.train.loss, cfg.train.sharing);
            let params = if stage == 1 {
                train_stage1(&generate_split(&cfg, Split::Train)?, &cfg, Some(&dir))?.params
            } else {
                let stage1 = require_checkpoint(&dir.join(stage_file(1, loss, sharing)))
                    .context("stage 2 starts from the stage-1 checkpoint; run `train --stage 1` first")?;
                build_stage2(&cfg, &stage1, Some(&dir))?
            };
            let path = dir.join(stage_file(stage, loss, sharing));
            checkpoint::save(&params, &path)?;
            tracing::info!(path = %path.display(), "checkpoint saved");
        }
        Command::Curve {
            strategy,
            rounds,
            budget,
            overlays,
        } => {
            if let Some(s) = strategy {
                cfg.curve.strategy = match s {
                    StrategyArg::Fixed => AllocationMode::Fixed,
                    StrategyArg::Free => AllocationMode::Free,
                };
            }
            if let Some(r) = rounds {
                cfg.curve.rounds = r;
            }
            if budget.is_some() {
                cfg.curve.budget = budget;
            }
            cfg.validate()?;
            let path = dir.join(stage_file(2, cfg.train.loss, cfg.train.sharing));
            let params = require_checkpoint(&path).context("run `train --stage 2` first")?;
            let overlay_dir = overlays.then(|| dir.join(format!("overlays_{}", cfg.curve.strategy)));
            if let Some(o) = &overlay_dir {
                std::fs::create_dir_all(o)?;
            }
            let eval = generate_split(&cfg, Split::Eval)?;
            let curve = evaluate_curve(&params, &eval, &cfg.curve.strategy(), cfg.curve.rounds, &cfg, overlay_dir.as_deref())?;
            let csv = curve_csv(&curve);
            write(&dir.join(format!("curve_{}.csv", cfg.curve.strategy)), &csv)?;
            print!("{csv}");
        }
        Command::Ablation => {
            cfg.validate()?;
            std::fs::create_dir_all(&dir)?;
            let run = run_ablation(&cfg, &ALL_CELLS, Some(&dir))?;
            let csv = ablation_csv(&run.cells);
            write(&dir.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Serve {
            addr,
            checkpoint: ckpt,
            service_config,
        } => {
            let path = ckpt.unwrap_or_else(|| dir.join(stage_file(2, LossMode::Pixelwise, Sharing::Shared)));
            let params = require_checkpoint(&path)?;
            let service = match service_config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<ServiceConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => ServiceConfig::default(),
            };
            if params.config != cfg.model {
                bail!("checkpoint {} does not match the configured model", path.display());
            }
            let state = AppState::new(
                Model {
                    params,
                    options: inference_options(&cfg.train),
                },
                service,
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(addr = %listener.local_addr()?, checkpoint = %path.display(), "serving");
                cseg_service::serve(listener, state).await
            })?;
        }
    }
    Ok(())
}
