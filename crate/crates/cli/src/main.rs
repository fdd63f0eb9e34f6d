use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use s2vlab::curation::{load_reference, read_manifest, rebalance};
use s2vlab::dit::{ModelWeights, WeightSource};
use s2vlab::error::Error;
use s2vlab::eval::{build_benchmark, format_report, read_benchmark, run_benchmark, SamplerSettings};
use s2vlab::inference::{rephrase, sample, CfgSchedule, SampleRequest};
use s2vlab::pipeline::{
    read_feedback, write_sampling_weights, Pipeline, RunConfig, Stage, StageOutcome,
};
use s2vlab::world::WorldConfig;

#[derive(Parser)]
#[command(name = "s2vlab", version, about = "Subject-to-video toy pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (`key = value` lines); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Derive every stage seed from this one.
    #[arg(long)]
    seed: Option<u64>,
    /// Work directory (overrides `paths.work`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun stages even when their artifacts are current.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pairing {
    In,
    Cross,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrefPipeline {
    Consis,
    Realfake,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scene scripts for the dataset and retrieval pool.
    GenData(Common),
    /// Render scripts and build in-pair and cross-pair triplets.
    BuildTriplets(Common),
    /// LoRA fine-tuning (pretrains the base first if needed).
    TrainSft {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        pairing: Pairing,
    },
    /// Merge the SFT adapters, or the DPO adapters with `--dpo`.
    MergeLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dpo: bool,
    },
    /// Generate preference pairs.
    GenPrefs {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        pipeline: PrefPipeline,
    },
    /// Preference optimization on the merged SFT model; both pipelines when
    /// `--pipeline` is omitted.
    TrainDpo {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        pipeline: Option<PrefPipeline>,
    },
    /// Generate one clip from a prompt and reference files.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, num_args = 0..)]
        refs: Vec<PathBuf>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value = "linear:1-4,5-1")]
        cfg: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one or two checkpoints on a benchmark.
    Evaluate {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: Option<PathBuf>,
        /// Benchmark manifest; the default suite is built when omitted.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        bench_seed: u64,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value = "linear:1-4,5-1")]
        cfg: String,
        #[arg(long, default_value_t = s2vlab::eval::DEFAULT_TIE_BAND)]
        tie_band: f64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-triplet sampling weights from tag-prefix feedback.
    Rebalance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a set of stages (all when `--stages` is omitted).
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stage names.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        stages: Option<Vec<String>>,
    },
    /// Validate a config and list every violation.
    CheckConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.reseed(s);
    }
    if let Some(o) = &common.out {
        c.work_dir = o.clone();
    }
    Ok(c)
}

fn run_stages(common: &Common, stages: &[Stage]) -> anyhow::Result<()> {
    let mut p = Pipeline::new(load_config(common)?);
    p.force = common.force;
    p.log = Box::new(|line| eprintln!("{line}"));
    for (s, outcome) in p.run(stages)? {
        let what = match outcome {
            StageOutcome::Ran => "ran",
            StageOutcome::UpToDate => "up to date",
        };
        println!("{s}\t{what}\t{}", p.stage_dir(s).display());
    }
    Ok(())
}

/// Accepts a checkpoint directory holding `weights/` or the weights
/// directory itself.
fn load_ckpt(dir: &Path) -> anyhow::Result<ModelWeights> {
    let inner = dir.join("weights");
    let dir = if inner.is_dir() { inner } else { dir.to_path_buf() };
    ModelWeights::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn world_of(w: &ModelWeights, frames: usize) -> WorldConfig {
    WorldConfig {
        frames,
        height: w.config().height,
        width: w.config().width,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(c) => run_stages(&c, &[Stage::GenData]),
        Command::BuildTriplets(c) => run_stages(&c, &[Stage::BuildTriplets]),
        Command::TrainSft { common, pairing } => {
            let s = match pairing {
                Pairing::In => Stage::TrainSftIn,
                Pairing::Cross => Stage::TrainSftCross,
            };
            run_stages(&common, &[Stage::PretrainBase, s])
        }
        Command::MergeLora { common, dpo } => {
            run_stages(&common, &[if dpo { Stage::MergeDpo } else { Stage::MergeLora }])
        }
        Command::GenPrefs { common, pipeline } => run_stages(
            &common,
            &[match pipeline {
                PrefPipeline::Consis => Stage::GenPrefsConsis,
                PrefPipeline::Realfake => Stage::GenPrefsRealfake,
            }],
        ),
        Command::TrainDpo { common, pipeline } => {
            let stages: &[Stage] = match pipeline {
                Some(PrefPipeline::Consis) => &[Stage::TrainDpoConsis],
                Some(PrefPipeline::Realfake) => &[Stage::TrainDpoRealfake],
                None => &[Stage::TrainDpoConsis, Stage::TrainDpoRealfake],
            };
            run_stages(&common, stages)
        }
        Command::Run { common, stages } => {
            let stages = match stages {
                None => Stage::ALL.to_vec(),
                Some(names) => names
                    .iter()
                    .filter(|n| !n.trim().is_empty())
                    .map(|n| n.trim().parse())
                    .collect::<Result<Vec<Stage>, _>>()?,
            };
            run_stages(&common, &stages)
        }
        Command::CheckConfig { config } => {
            RunConfig::load(&config)?.validate()?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::Sample {
            ckpt,
            prompt,
            refs,
            steps,
            cfg,
            seed,
            frames,
            out,
        } => {
            let w = load_ckpt(&ckpt)?;
            let refs = refs
                .iter()
                .map(|p| load_reference(p).with_context(|| format!("loading reference {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let specs: Vec<_> = refs.iter().map(|r| r.spec).collect();
            let caption = rephrase(&prompt, &specs)?;
            let req = SampleRequest {
                caption: caption.clone(),
                references: refs.into_iter().map(|r| r.latent).collect(),
                steps,
                seed,
                schedule: cfg.parse::<CfgSchedule>()?,
                dims: world_of(&w, frames).video_dims(),
                ref_rope_offset: 0,
            };
            let video = sample(&w, &req)?;
            video.save(&out)?;
            println!("{caption}");
            Ok(())
        }
        Command::Evaluate {
            ckpt_a,
            ckpt_b,
            bench,
            bench_seed,
            steps,
            cfg,
            tie_band,
            frames,
            out,
        } => {
            let a = load_ckpt(&ckpt_a)?;
            let world = world_of(&a, frames);
            let cases = match bench {
                Some(p) => read_benchmark(&p)?,
                None => build_benchmark(world, bench_seed)?,
            };
            let settings = SamplerSettings {
                steps,
                schedule: cfg.parse()?,
                ref_rope_offset: 0,
            };
            let sa = run_benchmark(&a, &cases, &world, &settings)?;
            let sb = match ckpt_b {
                Some(p) => Some(run_benchmark(&load_ckpt(&p)?, &cases, &world, &settings)?),
                None => None,
            };
            let report = format_report(&sa, sb.as_deref(), tie_band)?;
            std::fs::write(&out, &report)?;
            print!("{report}");
            Ok(())
        }
        Command::Rebalance {
            manifest,
            feedback,
            out,
        } => {
            let triplets = read_manifest(&manifest)?;
            let fb = read_feedback(&feedback)?;
            let tags: Vec<_> = triplets.iter().map(|t| t.tag.clone()).collect();
            if tags.is_empty() {
                bail!("manifest {} holds no triplets", manifest.display());
            }
            let weights = rebalance(&tags, &fb)?;
            let ids: Vec<String> = triplets.iter().map(|t| t.id.clone()).collect();
            write_sampling_weights(&out, &ids, &weights)?;
            Ok(())
        }
    }
}

/// 1 for problems the caller can fix (bad input, config, missing stages),
/// 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Invalid(_)
            | Error::Script { .. }
            | Error::DuplicateScript(_)
            | Error::InsufficientCandidates { .. }
            | Error::UnboundSubject(_)
            | Error::CaptionParse { .. }
            | Error::UnknownTarget(_)
            | Error::TargetMismatch(_)
            | Error::EmptyAfterCuration { .. }
            | Error::MissingDependency { .. }
            | Error::ConfigParse { .. }
            | Error::ConfigInvalid(_)
            | Error::Format { .. },
        ) => 1,
        Some(Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
