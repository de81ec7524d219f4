use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use capreward_core::captioner::DecodeMethod;
use capreward_core::metrics::WordMatch;
use capreward_core::rl_trainer::{Estimator, Schedule};

use crate::commands::{replay, run_job, evaluate_files, NegativesRun, WorldRun};
use crate::config::{read_config_file, resolve};
use crate::error::{CliError, CliResult};
use crate::pipeline::{CaptionerRun, ClipRun, EvaluateRun, GenerateRun, GrammarRun, RewardChoice};

#[derive(Debug, Parser)]
#[command(name = "capreward", version, about = "Reward-guided image captioning on a synthetic world")]
pub struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world and write train/val/test split files.
    GenerateWorld(GenerateWorldArgs),
    /// Export one synthetic negative per caption as JSON lines.
    GenerateNegatives(GenerateNegativesArgs),
    /// Contrastively pretrain the dual encoder.
    TrainClip(TrainClipArgs),
    /// Finetune the text tower with a grammar head (image tower frozen).
    FinetuneGrammar(FinetuneGrammarArgs),
    /// Train the captioner with MLE, then SCST under a reward.
    TrainCaptioner(TrainCaptionerArgs),
    /// Caption every image of a split.
    Generate(GenerateArgs),
    /// Score generations against references and annotations.
    Evaluate(EvaluateArgs),
    /// Re-run a manifest and check its outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenerateWorldArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_img: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateNegativesArgs {
    /// Caption file or world split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_max_gram: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClipArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneGrammarArgs {
    #[arg(long)]
    pub clip_ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split for the held-out grammar accuracy.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train the grammar head on positives only.
    #[arg(long)]
    pub one_sided: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCaptionerArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// mle, cider, clip_s, cider_clip_s or clip_s_grammar.
    #[arg(long)]
    pub reward: Option<String>,
    #[arg(long)]
    pub clip_ckpt: Option<PathBuf>,
    /// Start from this captioner checkpoint instead of a fresh model.
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    /// Named schedule: paper-schedule (15 MLE + 25 RL epochs) or desk.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub mle_epochs: Option<usize>,
    #[arg(long)]
    pub rl_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub rl_lr: Option<f64>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// Reinforce multinomial samples instead of the beam output.
    #[arg(long)]
    pub sample: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Checkpoint root; files go to <out>/<run-id>/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// World split whose images are captioned.
    #[arg(long)]
    pub data: PathBuf,
    /// beam, greedy or sample.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gen: PathBuf,
    /// Caption file or world split.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Fine-grained annotation file or world split.
    #[arg(long)]
    pub fine_grained: Option<PathBuf>,
    /// Encoder used for CLIP-S and retrieval.
    #[arg(long)]
    pub clip_ckpt: Option<PathBuf>,
    /// World split with image features (defaults to --refs or --fine-grained).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Match words as tokens instead of substrings.
    #[arg(long)]
    pub token_match: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn inputs<const N: usize>(pairs: [(&str, Option<&PathBuf>); N]) -> BTreeMap<String, PathBuf> {
    pairs
        .into_iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_owned(), p.clone())))
        .collect()
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

pub fn captioner_run(a: &TrainCaptionerArgs, file: Option<&Value>) -> CliResult<CaptionerRun> {
    let mut run: CaptionerRun = resolve(&CaptionerRun::default(), file, "train_captioner")?;
    if let Some(r) = &a.reward {
        run.reward = RewardChoice::parse(r).ok_or_else(|| {
            CliError::Usage(format!("unknown --reward {r:?}; expected one of {}", RewardChoice::NAMES.join(", ")))
        })?;
    }
    if let Some(name) = &a.schedule {
        run.schedule = Schedule::named(name).ok_or_else(|| {
            CliError::Usage(format!("unknown --schedule {name:?}; expected one of {}", Schedule::NAMES.join(", ")))
        })?;
        run.schedule_name = name.clone();
    }
    set(&mut run.schedule.mle_epochs, a.mle_epochs);
    set(&mut run.schedule.rl_epochs, a.rl_epochs);
    set(&mut run.schedule.batch_size, a.batch_size);
    if let Some(lr) = a.rl_lr {
        run.schedule.rl_optimizer = run.schedule.rl_optimizer.with_lr(lr);
    }
    set(&mut run.beam.beam_size, a.beam_size);
    if a.sample {
        run.estimator = Estimator::Sample;
    }
    set(&mut run.seed, a.seed);
    set(&mut run.run_id, a.run_id.clone());
    if run.run_id.is_empty() || run.run_id.contains(['/', '\\']) || run.run_id.starts_with('.') {
        return Err(CliError::Usage(format!("--run-id {:?} is not a plain directory name", run.run_id)));
    }
    if let Some(kind) = run.reward.kind() {
        if kind.needs_encoder() && a.clip_ckpt.is_none() {
            return Err(CliError::Usage(format!("--reward {} requires --clip-ckpt", kind.as_str())));
        }
    }
    Ok(run)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    let file = file.as_ref();
    match cli.command {
        Command::GenerateWorld(a) => {
            let mut cfg: WorldRun = resolve(&WorldRun::default(), file, "generate_world")?;
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.world.n_images, a.n);
            set(&mut cfg.world.d_img, a.d_img);
            run_job("generate-world", &cfg, &BTreeMap::new(), &a.out)?;
        }
        Command::GenerateNegatives(a) => {
            let mut cfg: NegativesRun = resolve(&NegativesRun::default(), file, "generate_negatives")?;
            set(&mut cfg.negatives.rng_seed, a.seed);
            set(&mut cfg.negatives.n_max_gram, a.n_max_gram);
            run_job("generate-negatives", &cfg, &inputs([("data", Some(&a.data))]), &a.out)?;
        }
        Command::TrainClip(a) => {
            let mut cfg: ClipRun = resolve(&ClipRun::default(), file, "train_clip")?;
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.seed, a.seed);
            run_job("train-clip", &cfg, &inputs([("data", Some(&a.data))]), &a.out)?;
        }
        Command::FinetuneGrammar(a) => {
            let mut cfg: GrammarRun = resolve(&GrammarRun::default(), file, "finetune_grammar")?;
            set(&mut cfg.finetune.epochs, a.epochs);
            set(&mut cfg.seed, a.seed);
            cfg.finetune.one_sided_bce |= a.one_sided;
            let ins = inputs([
                ("clip_ckpt", Some(&a.clip_ckpt)),
                ("data", Some(&a.data)),
                ("val", a.val.as_ref()),
            ]);
            run_job("finetune-grammar", &cfg, &ins, &a.out)?;
        }
        Command::TrainCaptioner(a) => {
            let cfg = captioner_run(&a, file)?;
            let ins = inputs([
                ("data", Some(&a.data)),
                ("val", a.val.as_ref()),
                ("clip_ckpt", a.clip_ckpt.as_ref()),
                ("init_ckpt", a.init_ckpt.as_ref()),
            ]);
            run_job("train-captioner", &cfg, &ins, &a.out.join(&cfg.run_id))?;
        }
        Command::Generate(a) => {
            let mut cfg: GenerateRun = resolve(&GenerateRun::default(), file, "generate")?;
            if let Some(m) = &a.method {
                cfg.method = serde_json::from_value(Value::String(m.clone()))
                    .map_err(|_| CliError::Usage(format!("unknown --method {m:?}; expected beam, greedy or sample")))?;
            }
            if cfg.method == DecodeMethod::Greedy {
                cfg.beam.beam_size = 1;
            }
            set(&mut cfg.beam.beam_size, a.beam_size);
            set(&mut cfg.seed, a.seed);
            let ins = inputs([("ckpt", Some(&a.ckpt)), ("data", Some(&a.data))]);
            run_job("generate", &cfg, &ins, &a.out)?;
        }
        Command::Evaluate(a) => {
            let mut cfg: EvaluateRun = resolve(&EvaluateRun::default(), file, "evaluate")?;
            set(&mut cfg.ks, a.ks.clone());
            if a.token_match {
                cfg.word_match = WordMatch::Token;
            }
            if a.refs.is_none() && a.fine_grained.is_none() {
                return Err(CliError::Usage("evaluate needs --refs or --fine-grained".into()));
            }
            if cfg.ks.is_empty() || cfg.ks.contains(&0) {
                return Err(CliError::Usage("--ks must list positive cutoffs".into()));
            }
            let ins = inputs([
                ("gen", Some(&a.gen)),
                ("refs", a.refs.as_ref()),
                ("fine_grained", a.fine_grained.as_ref()),
                ("clip_ckpt", a.clip_ckpt.as_ref()),
                ("images", a.images.as_ref()),
            ]);
            match &a.out {
                Some(out) => {
                    run_job("evaluate", &cfg, &ins, out)?;
                }
                None => print!("{}", evaluate_files(&cfg, &ins)?.render_table()),
            }
        }
        Command::Replay(a) => {
            let m = replay(&a.manifest, &a.out)?;
            eprintln!("replayed {}: {} outputs identical", m.command, m.outputs.len());
        }
    }
    Ok(())
}
