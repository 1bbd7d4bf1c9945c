//! Command-line driver for the training pipeline:
//! `gen-task → train-teacher → rewire → train-w → train-wd → finetune → eval
//! → profile → dump-attention`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adaptive_transformer::data::{generate_task, Dataset, SyntheticTask, TaskKind};
use adaptive_transformer::distill::{
    evaluate_all, finetune, select_model, train_stage, DistillPlan, Mode, TrainReport,
    TrainedPair,
};
use adaptive_transformer::io::{dump_attention, write_atomic, Checkpoint, Stage};
use adaptive_transformer::model::{AdaptiveModel, ModelConfig, SubNetSpec};
use adaptive_transformer::profile::{enumerate_grid, flops_count_all_ops, pareto};
use adaptive_transformer::rewiring::rewire;
use adaptive_transformer::{Error, Result};

#[derive(Parser)]
#[command(name = "adaptive", version, about = "Width- and depth-adaptive transformer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classification task as train/dev/test TSV files.
    GenTask {
        #[arg(long, default_value = "contains_bigram")]
        task: String,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the full-size model with cross-entropy.
    TrainTeacher(Common),
    /// Score heads and neurons on dev data and reorder them by importance.
    Rewire(Common),
    /// Stage 1: distill the rewired teacher into a width-adaptive model.
    TrainW(Common),
    /// Stage 2: distill the width-adaptive model into a width- and depth-adaptive model.
    TrainWd(Common),
    /// Label fine-tuning over all configurations, keeping the better model.
    Finetune(Common),
    /// Accuracy of every configuration in the grid.
    Eval {
        #[arg(long, default_value = "dev")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Parameter and FLOPs counts for the grid.
    Profile {
        #[arg(long)]
        seq_len: Option<usize>,
        /// Include elementwise and normalization work.
        #[arg(long)]
        all_ops: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-layer, per-head attention maps for one token sequence.
    DumpAttention {
        /// Space- or comma-separated token ids.
        #[arg(long)]
        tokens: String,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, default_value_t = 1.0)]
        depth: f64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Model configuration JSON (ignored when a checkpoint supplies one).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding train.tsv, dev.tsv and test.tsv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra training lines in the same format, used by the distillation stages.
    #[arg(long)]
    augmented_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    width_list: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    depth_list: Option<Vec<f64>>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output path (checkpoint, CSV or directory depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV to append training rows to.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
}

impl Common {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => ModelConfig::default(),
        };
        if let Some(w) = &self.width_list {
            cfg.width_list = w.clone();
        }
        if let Some(d) = &self.depth_list {
            cfg.depth_list = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::load(need(&self.checkpoint, "checkpoint")?)
    }

    fn split(&self, name: &str) -> Result<Dataset> {
        Dataset::load(&need(&self.data, "data")?.join(format!("{name}.tsv")))
    }

    fn distill_train(&self) -> Result<Dataset> {
        let train = self.split("train")?;
        Ok(match &self.augmented_data {
            Some(p) => train.concat(&Dataset::load(p)?),
            None => train,
        })
    }

    fn apply(&self, mut plan: DistillPlan) -> Result<DistillPlan> {
        if let Some(w) = &self.width_list {
            plan.width_list = w.clone();
        }
        if let Some(d) = &self.depth_list {
            plan.depth_list = d.clone();
        }
        if let Some(v) = self.lambda1 {
            plan.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            plan.lambda2 = v;
        }
        if let Some(m) = &self.mode {
            plan.mode = m.parse::<Mode>()?;
        }
        if let Some(v) = self.epochs {
            plan.epochs = v;
        }
        if let Some(v) = self.lr {
            plan.lr = v;
        }
        if let Some(v) = self.batch_size {
            plan.batch_size = v;
        }
        plan.seed = self.seed;
        plan.validate()?;
        Ok(plan)
    }

    fn out(&self) -> Result<&PathBuf> {
        need(&self.out, "out")
    }

    fn log(&self, report: &TrainReport) -> Result<()> {
        if let Some(p) = &self.metrics {
            report.metrics.append_to(p)?;
        }
        Ok(())
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTask { task, size, common } => {
            let cfg = common.model_config()?;
            let splits = generate_task(&SyntheticTask {
                kind: task.parse::<TaskKind>()?,
                vocab_size: cfg.vocab_size,
                seq_len: cfg.max_seq_len,
                size,
                seed: common.seed,
            })?;
            let dir = common.out()?;
            std::fs::create_dir_all(dir)?;
            splits.train.save(&dir.join("train.tsv"))?;
            splits.dev.save(&dir.join("dev.tsv"))?;
            splits.test.save(&dir.join("test.tsv"))?;
        }
        Command::TrainTeacher(c) => {
            let cfg = c.model_config()?;
            let mut model = AdaptiveModel::new(cfg.clone(), c.seed)?;
            let mut plan = c.apply(DistillPlan::finetune(&cfg))?;
            plan.width_list = vec![1.0];
            plan.depth_list = vec![1.0];
            let dev = c.split("dev")?;
            let report = finetune(&mut model, &plan, &c.split("train")?, Some(&dev))?;
            c.log(&report)?;
            Checkpoint::new(model, Stage::Teacher, false, c.seed).save(c.out()?)?;
        }
        Command::Rewire(c) => {
            let mut ckpt = c.load_checkpoint()?;
            ckpt.require_stage(Stage::Teacher, false)?;
            let dev = c.split("dev")?;
            let report = rewire(&mut ckpt.model, &dev.batches(c.batch_size.unwrap_or(32))?)?;
            ckpt.header.rewired = true;
            let out = c.out.clone().unwrap_or_else(|| c.checkpoint.clone().expect("loaded"));
            ckpt.save(&out)?;
            write_atomic(&out.with_extension("importance.csv"), report.to_csv().as_bytes())?;
        }
        Command::TrainW(c) => {
            let ckpt = c.load_checkpoint()?;
            ckpt.require_stage(Stage::Teacher, true)?;
            let plan = c.apply(DistillPlan::width(&ckpt.model.config().clone()))?;
            let mut pair = TrainedPair::new(&ckpt.model);
            let dev = c.split("dev")?;
            let report = train_stage(&mut pair, &plan, &c.distill_train()?, Some(&dev))?;
            c.log(&report)?;
            Checkpoint::new(pair.into_student(), Stage::Width, true, c.seed).save(c.out()?)?;
        }
        Command::TrainWd(c) => {
            let ckpt = c.load_checkpoint()?;
            ckpt.require_stage(Stage::Width, false)?;
            let plan = c.apply(DistillPlan::width_depth(&ckpt.model.config().clone()))?;
            let mut pair = TrainedPair::new(&ckpt.model);
            let dev = c.split("dev")?;
            let report = train_stage(&mut pair, &plan, &c.distill_train()?, Some(&dev))?;
            c.log(&report)?;
            Checkpoint::new(pair.into_student(), Stage::WidthDepth, true, c.seed)
                .save(c.out()?)?;
        }
        Command::Finetune(c) => {
            let ckpt = c.load_checkpoint()?;
            ckpt.require_stage(Stage::WidthDepth, false)?;
            let plan = c.apply(DistillPlan::finetune(&ckpt.model.config().clone()))?;
            let dev = c.split("dev")?;
            let grid = plan.grid();
            let before = evaluate_all(&ckpt.model, &dev, &grid, plan.batch_size)?;
            let mut tuned = ckpt.model.clone();
            let report = finetune(&mut tuned, &plan, &c.split("train")?, None)?;
            c.log(&report)?;
            let after = evaluate_all(&tuned, &dev, &grid, plan.batch_size)?;
            let choice = select_model(&before, &after, &grid)?;
            eprintln!(
                "selected {choice:?}: mean dev accuracy before {:.4}, after {:.4}",
                before.mean(),
                after.mean()
            );
            let model = choice.pick(ckpt.model, tuned);
            Checkpoint::new(model, Stage::Finetuned, true, c.seed).save(c.out()?)?;
        }
        Command::Eval { split, common: c } => {
            let ckpt = c.load_checkpoint()?;
            let cfg = ckpt.model.config();
            let grid = c.apply(DistillPlan::width_depth(cfg))?.grid();
            let table = evaluate_all(&ckpt.model, &c.split(&split)?, &grid, c.batch_size.unwrap_or(32))?;
            emit(c.out.as_deref(), &table.to_csv())?;
        }
        Command::Profile {
            seq_len,
            all_ops,
            common: c,
        } => {
            let cfg = match &c.checkpoint {
                Some(_) => c.load_checkpoint()?.model.config().clone(),
                None => c.model_config()?,
            };
            let n = seq_len.unwrap_or(cfg.max_seq_len);
            let report = enumerate_grid(&cfg, n)?;
            let accuracy = match (&c.checkpoint, &c.data) {
                (Some(_), Some(_)) => {
                    let model = c.load_checkpoint()?.model;
                    Some(evaluate_all(&model, &c.split("dev")?, &cfg.grid(), c.batch_size.unwrap_or(32))?)
                }
                _ => None,
            };
            let mut text = report.to_csv(accuracy.as_ref())?;
            if all_ops {
                text.push_str("# all-ops flops\nspec,flops_all_ops\n");
                for r in &report.rows {
                    text.push_str(&format!("{},{}\n", r.spec, flops_count_all_ops(&cfg, r.spec, n)?));
                }
            }
            if let Some(acc) = &accuracy {
                text.push_str("# pareto frontier (flops, accuracy)\nspec,flops,accuracy\n");
                for p in pareto(&report, acc)? {
                    text.push_str(&format!("{},{},{:?}\n", p.spec, p.flops, p.accuracy));
                }
            }
            emit(c.out.as_deref(), &text)?;
        }
        Command::DumpAttention {
            tokens,
            width,
            depth,
            common: c,
        } => {
            let ckpt = c.load_checkpoint()?;
            let ids = tokens
                .split(|ch: char| ch == ',' || ch.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Data(format!("bad token id {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let files = dump_attention(&ckpt.model, SubNetSpec::new(width, depth), &ids, c.out()?)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}
