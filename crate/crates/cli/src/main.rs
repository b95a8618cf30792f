use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stcoid::config::{BandwidthSpec, ExperimentConfig};
use stcoid::exchange::Baseline;
use stcoid::experiment::{
    ablate_seqlen, encode_scenes, eval_csv, evaluate_all, evaluation_scenes, loss_curve_csv,
    seqlen_csv, summarize, sweep, sweep_csv, train_model, training_scenes, Summary,
    EVAL_SCENE_OFFSET,
};
use stcoid::scenegen::{generate_dataset, load_dataset, save_dataset, Preset, ScenePair};
use stcoid::CoidModel;

#[derive(Parser)]
#[command(name = "stcoid", version, about = "Spatiotemporal correspondence identification under limited bandwidth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset
    Gen {
        #[command(flatten)]
        common: Common,
        /// which scene ids to generate
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Train a model and write its loss curve
    Train(Common),
    /// Evaluate a trained model scene by scene
    Eval(Common),
    /// Evaluate a trained model over a bandwidth x rounds grid
    Sweep(Common),
    /// Train and evaluate one model per sequence length
    AblateSeqlen(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Normal,
    Crowded,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Full,
    Ne,
    Random,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// output file (CSV, or the dataset for `gen`); stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// model file written by `train` and read by `eval` and `sweep`
    #[arg(long)]
    model: Option<PathBuf>,
    /// dataset file to use instead of generating scenes
    #[arg(long)]
    data: Option<PathBuf>,
    /// per-round bandwidth "K1,K2,..." (a single value repeats every round)
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ExperimentConfig::from_json(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.preset {
            cfg.apply_preset(match p {
                PresetArg::Normal => Preset::Normal,
                PresetArg::Crowded => Preset::Crowded,
            });
        }
        if let Some(b) = &self.bandwidth {
            cfg.bandwidth = BandwidthSpec::parse_list(b)?;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(l) = self.lambda {
            cfg.exchange.lambda = l;
        }
        if let Some(t) = self.tau {
            cfg.exchange.tau = t;
        }
        if let Some(b) = self.baseline {
            cfg.exchange.baseline = match b {
                BaselineArg::Full => Baseline::Full,
                BaselineArg::Ne => Baseline::Ne,
                BaselineArg::Random => Baseline::Random,
            };
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if self.out.is_some() {
            cfg.paths.out = path(&self.out);
        }
        if self.model.is_some() {
            cfg.paths.model = path(&self.model);
        }
        if self.data.is_some() {
            cfg.paths.data = path(&self.data);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn scenes(cfg: &ExperimentConfig, generate: impl Fn(&ExperimentConfig) -> stcoid::Result<Vec<ScenePair>>) -> Result<Vec<ScenePair>> {
    match &cfg.paths.data {
        Some(path) => {
            let (_, scenes) =
                load_dataset(Path::new(path)).with_context(|| format!("loading dataset {path}"))?;
            if scenes.is_empty() {
                bail!("dataset {path} holds no scenes");
            }
            Ok(scenes)
        }
        None => Ok(generate(cfg)?),
    }
}

fn load_model(cfg: &ExperimentConfig) -> Result<CoidModel> {
    let Some(path) = &cfg.paths.model else {
        bail!("--model is required");
    };
    let (model, _) = CoidModel::load(Path::new(path)).with_context(|| format!("loading model {path}"))?;
    Ok(model)
}

fn emit(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    match &cfg.paths.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {path}")),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report(label: &str, s: &Summary) {
    eprintln!(
        "{label}: {} scenes  precision {:.3}  recall {:.3}  f1 {:.3}  bis {:.3}  sharing recall {:.3}",
        s.scenes, s.precision.mean, s.recall.mean, s.f1.mean, s.bis.mean, s.sharing_recall.mean
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, split } => {
            let cfg = common.config()?.resolved();
            let (first, count) = match split {
                Split::Train => (0, cfg.train_scenes),
                Split::Eval => (EVAL_SCENE_OFFSET, cfg.eval_scenes),
            };
            let scenes = generate_dataset(&cfg.scene, &cfg.model.graph, first, count)?;
            match &cfg.paths.out {
                Some(path) => save_dataset(Path::new(path), &cfg.scene, &scenes)?,
                None => println!("{}", stcoid::scenegen::dataset_to_json(&cfg.scene, &scenes)?),
            }
            eprintln!("generated {} scenes", scenes.len());
        }
        Command::Train(common) => {
            let cfg = common.config()?;
            let Some(model_path) = cfg.paths.model.clone() else {
                bail!("--model is required");
            };
            let train = scenes(&cfg, training_scenes)?;
            let (model, rep) = train_model(&cfg, &train, |e| {
                eprintln!("epoch {:>3}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss)
            })?;
            let hash = cfg.hash();
            model.save(Path::new(&model_path), &hash)?;
            eprintln!(
                "best epoch {} ({} train / {} validation scenes), model written to {model_path}",
                rep.best_epoch,
                rep.train_scenes.len(),
                rep.val_scenes.len()
            );
            emit(&cfg, &loss_curve_csv(&hash, &rep.curve)?)?;
        }
        Command::Eval(common) => {
            let cfg = common.config()?;
            let model = load_model(&cfg)?;
            let eval = scenes(&cfg, evaluation_scenes)?;
            let enc = encode_scenes(&model, &eval)?;
            let results = evaluate_all(&enc, &cfg.bandwidth, cfg.rounds, &cfg.exchange, cfg.seed)?;
            report(&cfg.exchange.baseline.to_string(), &summarize(&results));
            emit(&cfg, &eval_csv(&cfg.hash(), &results)?)?;
        }
        Command::Sweep(common) => {
            let mut cfg = common.config()?;
            if let (Some(_), BandwidthSpec::PerRound(ks)) = (&common.bandwidth, &cfg.bandwidth) {
                cfg.sweep_bandwidths = ks.clone();
            }
            if let Some(r) = common.rounds {
                cfg.sweep_rounds = vec![r];
            }
            let model = load_model(&cfg)?;
            let eval = scenes(&cfg, evaluation_scenes)?;
            let enc = encode_scenes(&model, &eval)?;
            let cells = sweep(&enc, &cfg.sweep_bandwidths, &cfg.sweep_rounds, &cfg.exchange, cfg.seed)?;
            for c in &cells {
                report(&format!("K={} R={}", c.k, c.rounds), &c.summary);
            }
            emit(&cfg, &sweep_csv(&cfg.hash(), &cells)?)?;
        }
        Command::AblateSeqlen(common) => {
            let cfg = common.config()?;
            let rows = ablate_seqlen(&cfg, |t, e| {
                eprintln!("T={t} epoch {:>3}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss)
            })?;
            for r in &rows {
                report(&format!("T={}", r.seq_len), &r.summary);
            }
            emit(&cfg, &seqlen_csv(&cfg.hash(), &rows)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
