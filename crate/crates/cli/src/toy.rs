//! `gapscope toy …`: build, train, dump and dissect the synthetic-task toy
//! model. A toy run directory holds `config.json` plus `checkpoints/`.

use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use gapscope::exec::Exec;
use gapscope::experiment::{checkpoint_id, direct_dump, pair_dump, run_pipeline, GapSummary, PipelineConfig};
use gapscope::expression::GenerationParams;
use gapscope::residual::layer_deletion_report;
use gapscope::store::{write_dump, Stage};
use gapscope::templates::{read_questions, write_questions};
use gapscope::toy::{read_checkpoint, train_synthetic, write_checkpoint, SyntheticTask, ToyCheckpoint, ToyModel};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{OutDir, Summary};
use crate::require_file;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Template {
    /// Four per-choice correctness rows per question (pair mode).
    A,
    /// One direct-answer row per question.
    B,
}

#[derive(Debug, Args)]
pub struct Scale {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Number of key → value facts in the synthetic task.
    #[arg(long)]
    keys: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    tune_steps: Option<usize>,
}

impl Scale {
    fn config(&self) -> PipelineConfig {
        let mut c = match self.preset {
            Preset::Desk => PipelineConfig::desk(),
            Preset::Reference => PipelineConfig::reference(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.hidden_size = self.hidden.unwrap_or(c.hidden_size);
        c.n_layers = self.layers.unwrap_or(c.n_layers);
        c.n_heads = self.heads.unwrap_or(c.n_heads);
        c.task.n_keys = self.keys.unwrap_or(c.task.n_keys);
        for (phase, steps) in c.schedule.phases.iter_mut().zip([self.pretrain_steps, self.tune_steps]) {
            if let Some(n) = steps {
                phase.steps = n;
                phase.warmup = n / 20;
                phase.checkpoints = phase.checkpoints.min(n.max(1));
            }
        }
        c
    }
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Write a run config and the randomly initialized checkpoint.
    Init {
        #[command(flatten)]
        scale: Scale,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a run directory's config through every stage.
    Train {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Sample synthetic questions into a question file.
    Questions {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "q")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture last-token residual states for Template A or B prompts.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, value_enum)]
        template: Template,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove one block; optionally report the greedy-accuracy change.
    DeleteLayer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every checkpoint end to end.
    Pipeline {
        #[command(flatten)]
        scale: Scale,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> CliResult<PipelineConfig> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Explicit config, else `config.json` beside the checkpoint or one level up.
fn find_config(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    [dir.join("config.json"), dir.join("../config.json")]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::runtime(format!("no config.json near {}; pass --config", checkpoint.display())))
}

/// Loads a checkpoint with the tokenizer of its run config.
pub fn load_model(checkpoint: &Path, config: Option<&Path>) -> CliResult<(ToyModel, PathBuf)> {
    require_file(checkpoint)?;
    let config_path = find_config(checkpoint, config)?;
    let config = read_config(&config_path)?;
    let task = SyntheticTask::new(config.task)?;
    let ck = read_checkpoint(checkpoint)?;
    Ok((ToyModel::new(ck, task.tokenizer().clone())?, config_path))
}

fn save_checkpoint(out: &mut OutDir, name: &str, ck: &ToyCheckpoint) -> CliResult<PathBuf> {
    out.write_with(name, |p| Ok(write_checkpoint(ck, p)?))
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct CheckpointRow {
    model_id: String,
    stage: Stage,
    step: u64,
    training_tokens: u64,
    path: String,
}

pub fn run(cmd: ToyCommand) -> CliResult<()> {
    match cmd {
        ToyCommand::Init { scale, out } => {
            let config = scale.config();
            let task = SyntheticTask::new(config.task)?;
            let ck = ToyCheckpoint::init_random(&config.model_config(task.vocab_size()))?;
            let mut dir = OutDir::create(&out, "toy init")?;
            dir.seed(config.seed);
            dir.json("config.json", &config)?;
            save_checkpoint(&mut dir, "checkpoints/init.toyc", &ck)?;
            dir.finish()?;
            eprintln!("vocab {} pieces, {} parameters", task.vocab_size(), ck.n_params());
            Ok(())
        }
        ToyCommand::Train { dir } => {
            let config_path = dir.join("config.json");
            let config = read_config(&config_path)?;
            let task = SyntheticTask::new(config.task)?;
            let run = train_synthetic(&config.model_config(task.vocab_size()), &task, &config.schedule, Exec::Parallel)?;
            let mut out = OutDir::create(&dir, "toy train")?;
            out.input(&config_path);
            out.seed(config.seed);
            let losses: Vec<LossRow> = run.losses.iter().enumerate().map(|(i, &loss)| LossRow { step: i + 1, loss }).collect();
            out.csv("losses.csv", &losses)?;
            let mut rows = Vec::new();
            for ck in &run.checkpoints {
                let name = format!("checkpoints/{}.toyc", checkpoint_id(ck));
                save_checkpoint(&mut out, &name, ck)?;
                rows.push(CheckpointRow {
                    model_id: checkpoint_id(ck),
                    stage: ck.meta.stage,
                    step: ck.meta.step,
                    training_tokens: ck.meta.training_tokens,
                    path: name,
                });
            }
            out.csv("checkpoints.csv", &rows)?;
            out.finish()?;
            eprintln!("final loss {:.4}", run.losses.last().copied().unwrap_or(f64::NAN));
            Ok(())
        }
        ToyCommand::Questions { config, n, seed, prefix, out } => {
            let task = SyntheticTask::new(read_config(&config)?.task)?;
            let (mut dir, name) = OutDir::for_file(&out, "toy questions")?;
            dir.input(&config);
            dir.seed(seed);
            let qs = task.questions(n, seed, &prefix);
            dir.write_with(&name, |p| Ok(write_questions(p, &qs)?))?;
            dir.finish()?;
            Ok(())
        }
        ToyCommand::Dump { checkpoint, config, questions, template, out } => {
            let (model, config_path) = load_model(&checkpoint, config.as_deref())?;
            require_file(&questions)?;
            let qs = read_questions(&questions)?;
            let dump = match template {
                Template::A => pair_dump(&model, &qs, Exec::Parallel)?,
                Template::B => direct_dump(&model, &qs, Exec::Parallel)?,
            };
            let (mut dir, name) = OutDir::for_file(&out, "toy dump")?;
            for p in [&checkpoint, &config_path, &questions] {
                dir.input(p);
            }
            dir.write_with(&name, |p| Ok(write_dump(&dump, p)?))?;
            dir.finish()?;
            Ok(())
        }
        ToyCommand::DeleteLayer { checkpoint, config, layer, questions, out } => {
            require_file(&checkpoint)?;
            let ck = read_checkpoint(&checkpoint)?;
            let pruned = ck.delete_layer(layer)?;
            let (mut dir, name) = OutDir::for_file(&out, "toy delete-layer")?;
            dir.input(&checkpoint);
            save_checkpoint(&mut dir, &name, &pruned)?;
            if let Some(q) = questions {
                let (model, config_path) = load_model(&checkpoint, config.as_deref())?;
                require_file(&q)?;
                let qs = read_questions(&q)?;
                let report = layer_deletion_report(&model, &qs, layer, &GenerationParams::greedy(6), Exec::Parallel)?;
                dir.input(&config_path);
                dir.input(&q);
                dir.json(&format!("{name}.deletion.json"), &report)?;
                eprintln!("accuracy {:.4} -> {:.4} (delta {:+.4})", report.acc_before, report.acc_after, report.delta);
            }
            dir.finish()?;
            Ok(())
        }
        ToyCommand::Pipeline { scale, out } => pipeline(&scale.config(), &out),
    }
}

#[derive(Serialize)]
struct StageRow<'a> {
    model_id: &'a str,
    stage: Stage,
    step: u64,
    training_tokens: u64,
    cognitive_score: f64,
    best_layer: usize,
    plateau_proportion: f64,
    svm_accuracy: f64,
    verdict_accuracy: f64,
    zero_shot: f64,
    few_shot: f64,
    magical: f64,
    repeated: f64,
    likelihood_sum: f64,
    likelihood_per_token: f64,
    gap: f64,
}

fn pipeline(config: &PipelineConfig, out: &Path) -> CliResult<()> {
    let mut dir = OutDir::create(out, "toy pipeline")?;
    dir.seed(config.seed);
    dir.json("config.json", config)?;
    let run = run_pipeline(config, Exec::Parallel)?;

    let losses: Vec<LossRow> = run.losses.iter().enumerate().map(|(i, &loss)| LossRow { step: i + 1, loss }).collect();
    dir.csv("losses.csv", &losses)?;
    for m in &run.models {
        save_checkpoint(&mut dir, &format!("checkpoints/{}.toyc", checkpoint_id(&m.checkpoint)), &m.checkpoint)?;
    }
    let rows: Vec<StageRow> = run
        .reports
        .iter()
        .map(|r| StageRow {
            model_id: &r.model_id,
            stage: r.stage,
            step: r.step,
            training_tokens: r.training_tokens,
            cognitive_score: r.cognitive_score,
            best_layer: r.best_layer,
            plateau_proportion: r.plateau.proportion,
            svm_accuracy: r.svm_accuracy,
            verdict_accuracy: r.verdict_accuracy,
            zero_shot: r.zero_shot,
            few_shot: r.few_shot,
            magical: r.magical,
            repeated: r.repeated.last().copied().unwrap_or(f64::NAN),
            likelihood_sum: r.likelihood_sum,
            likelihood_per_token: r.likelihood_per_token,
            gap: r.gap(),
        })
        .collect();
    dir.csv("stages.csv", &rows)?;
    dir.json("stages.json", &run.reports)?;

    let layer_rows: Vec<Vec<String>> = run
        .reports
        .iter()
        .flat_map(|r| {
            r.layer_accuracies
                .iter()
                .enumerate()
                .map(|(l, a)| vec![r.model_id.clone(), r.training_tokens.to_string(), l.to_string(), a.to_string()])
        })
        .collect();
    let header = ["model_id", "training_tokens", "layer", "accuracy"].map(String::from);
    dir.csv_records("layers.csv", &header, &layer_rows)?;
    let repeated_rows: Vec<Vec<String>> = run
        .reports
        .iter()
        .flat_map(|r| {
            r.repeated
                .iter()
                .enumerate()
                .map(|(k, a)| vec![r.model_id.clone(), r.training_tokens.to_string(), (k + 1).to_string(), a.to_string()])
        })
        .collect();
    let header = ["model_id", "training_tokens", "k", "accuracy"].map(String::from);
    dir.csv_records("repeated.csv", &header, &repeated_rows)?;
    dir.csv("kl.csv", &run.kl)?;
    if let Some(d) = &run.deletion {
        dir.json("deletion.json", d)?;
    }

    for r in &run.reports {
        let s = Summary::new("toy pipeline", &r.model_id, r.stage, r.training_tokens)
            .metric("cognitive_score", r.cognitive_score)
            .metric("svm_accuracy", r.svm_accuracy)
            .metric("zero_shot", r.zero_shot)
            .metric("few_shot", r.few_shot)
            .metric("magical", r.magical);
        dir.json(&format!("summaries/{}.json", r.model_id), &s)?;
    }
    let gap = GapSummary::from_run(&run.reports, &run.kl)?;
    dir.json("summary.json", &gap)?;
    dir.finish()?;
    eprintln!(
        "gap {:.3} -> {:.3}, cognitive change {:+.3}, KL/1M late pretrain {:.4} vs tuning {:.4}",
        gap.gap_before, gap.gap_after, gap.cognitive_change, gap.pretrain_kl_per_million, gap.tuning_kl_per_million
    );
    Ok(())
}
