//! End-to-end run on the toy model: train through a pretrain-analog and a
//! format-tuning-analog stage, then measure every checkpoint's cognitive
//! score, SVM accuracy and expressive accuracies, plus the vocabulary-layer
//! KL series across checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::exec::Exec;
use crate::expression::{eval_expressive, eval_likelihood_ranking, eval_repeated_curve, eval_verdicts, GenerationParams, LikelihoodScoring, PromptMode};
use crate::probe::{layer_curve_with, svm_layer_curve, ProbeOptions, SvmOptions};
use crate::residual::{layer_deletion_report, plateau_proportion, DeletionReport, PlateauStat, DEFAULT_PLATEAU_EPSILON};
use crate::store::{ActivationDump, DumpMode, Stage};
use crate::templates::{self, ChoiceQuestion, Exemplar, N_CHOICES};
use crate::toy::{train_synthetic, Phase, StageSchedule, SyntheticTask, SyntheticTaskSpec, TaskPhase, ToyCheckpoint, ToyConfig, ToyModel};
use crate::vocab::{kl_series, mean_final_embedding, KlInterval, VocabLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub task: SyntheticTaskSpec,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
    pub schedule: StageSchedule,
    /// Questions whose Template-A rows train the probes and SVMs.
    pub probe_train_questions: usize,
    pub probe_test_questions: usize,
    /// Questions for the expressive evaluations.
    pub eval_questions: usize,
    pub repeats: usize,
    /// Sampling parameters for single-sample and repeated evaluation.
    pub sampling: GenerationParams,
    /// Generation budget for every answer.
    pub max_answer_tokens: usize,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
}

impl PipelineConfig {
    /// Small enough to finish in a few minutes on one core.
    pub fn desk() -> Self {
        Self::with_scale(32, 4, 2000, 400)
    }

    /// The larger configuration: d=64, L=8.
    pub fn reference() -> Self {
        Self::with_scale(64, 8, 2000, 600)
    }

    fn with_scale(hidden_size: usize, n_layers: usize, pretrain_steps: usize, format_steps: usize) -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            hidden_size,
            n_layers,
            n_heads: 4,
            seed: 7,
            schedule: StageSchedule {
                phases: vec![
                    Phase {
                        stage: Stage::Pretrain,
                        task: TaskPhase::Pretrain,
                        steps: pretrain_steps,
                        peak_lr: 1e-2,
                        warmup: pretrain_steps / 20,
                        checkpoints: 4,
                    },
                    Phase {
                        stage: Stage::Sft,
                        task: TaskPhase::Format,
                        steps: format_steps,
                        peak_lr: 1e-3,
                        warmup: format_steps / 20,
                        checkpoints: 4,
                    },
                ],
                batch_size: 32,
                clip_norm: 1.0,
            },
            probe_train_questions: 200,
            probe_test_questions: 200,
            eval_questions: 200,
            repeats: 8,
            sampling: GenerationParams {
                max_tokens: 6,
                ..GenerationParams::default()
            },
            max_answer_tokens: 6,
            svm_lambda: 1e-3,
            svm_epochs: 50,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ToyConfig {
        ToyConfig::new(vocab_size, self.hidden_size, self.n_layers, self.n_heads, 96, self.seed)
    }
}

/// Template-A rows (four per question) captured after every block.
pub fn pair_dump(model: &ToyModel, questions: &[ChoiceQuestion], exec: Exec) -> Result<ActivationDump> {
    let prompts: Vec<String> = questions
        .iter()
        .flat_map(|q| (0..N_CHOICES).map(move |i| templates::wrap_template_a(q, i)))
        .collect::<Result<_>>()?;
    let mut dump = capture_rows(model, prompts.iter().map(String::as_str).collect(), DumpMode::Pair, exec)?;
    for q in questions {
        for i in 0..N_CHOICES {
            dump.labels.push((i == q.correct_index) as u32);
            dump.group_ids.push(q.id.clone());
        }
    }
    Ok(dump)
}

/// One Template-B row per question, labelled with the correct index.
pub fn direct_dump(model: &ToyModel, questions: &[ChoiceQuestion], exec: Exec) -> Result<ActivationDump> {
    let prompts: Vec<String> = questions.iter().map(templates::wrap_template_b).collect();
    let mut dump = capture_rows(model, prompts.iter().map(String::as_str).collect(), DumpMode::Direct, exec)?;
    for q in questions {
        dump.labels.push(q.correct_index as u32);
        dump.group_ids.push(q.id.clone());
    }
    Ok(dump)
}

fn capture_rows(model: &ToyModel, prompts: Vec<&str>, mode: DumpMode, exec: Exec) -> Result<ActivationDump> {
    if prompts.is_empty() {
        return Err(arg("no prompts to capture"));
    }
    let c = &model.checkpoint;
    let traces = exec.map_slice(&prompts, |p| model.capture(p));
    let mut dump = ActivationDump::zeros(mode, prompts.len(), c.n_layers(), c.config.hidden_size);
    dump.model_id = checkpoint_id(c);
    dump.stage = c.meta.stage;
    dump.training_tokens = c.meta.training_tokens;
    for (e, t) in traces.into_iter().enumerate() {
        for (layer, x) in t?.layers.iter().enumerate() {
            for (dst, &v) in dump.vector_mut(e, layer).iter_mut().zip(x) {
                *dst = v as f32;
            }
        }
    }
    Ok(dump)
}

pub fn checkpoint_id(c: &ToyCheckpoint) -> String {
    format!("{}-{}", c.meta.stage, c.meta.step)
}

/// The fixed question sets a run is evaluated on. Exemplars for few-shot
/// prompting come from their own pool.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub probe_train: Vec<ChoiceQuestion>,
    pub probe_test: Vec<ChoiceQuestion>,
    pub eval: Vec<ChoiceQuestion>,
    pub exemplars: Vec<Exemplar>,
}

impl EvalSets {
    pub fn new(task: &SyntheticTask, config: &PipelineConfig) -> Self {
        let seed = config.seed.wrapping_mul(0x9E37_79B9);
        let exemplars = task.questions(2, seed + 3, "x").iter().map(Exemplar::from_question).collect();
        Self {
            probe_train: task.questions(config.probe_train_questions, seed, "tr"),
            probe_test: task.questions(config.probe_test_questions, seed + 1, "te"),
            eval: task.questions(config.eval_questions, seed + 2, "ev"),
            exemplars,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub model_id: String,
    pub stage: Stage,
    pub step: u64,
    pub training_tokens: u64,
    /// Probe test accuracy per layer (`NaN` where unfit).
    pub layer_accuracies: Vec<f64>,
    pub cognitive_score: f64,
    pub best_layer: usize,
    pub plateau: PlateauStat,
    pub svm_accuracy: f64,
    pub svm_layer: usize,
    /// Greedy ` correct`/` wrong` generation on the SVM's test rows.
    pub verdict_accuracy: f64,
    pub zero_shot: f64,
    pub few_shot: f64,
    pub magical: f64,
    /// Any-correct accuracy for `k = 1..=repeats` under nested seeds; entry
    /// 0 is the single-sample accuracy.
    pub repeated: Vec<f64>,
    pub likelihood_sum: f64,
    pub likelihood_per_token: f64,
}

impl StageReport {
    pub fn gap(&self) -> f64 {
        self.cognitive_score - self.zero_shot
    }
}

pub fn evaluate_checkpoint(model: &ToyModel, sets: &EvalSets, config: &PipelineConfig, exec: Exec) -> Result<StageReport> {
    let c = &model.checkpoint;
    let train = pair_dump(model, &sets.probe_train, exec)?;
    let test = pair_dump(model, &sets.probe_test, exec)?;
    let curve = layer_curve_with(&train, &test, &ProbeOptions::default(), exec)?;
    let svm = svm_layer_curve(
        &train,
        &test,
        &SvmOptions {
            lambda: config.svm_lambda,
            epochs: config.svm_epochs,
            seed: config.seed,
        },
        exec,
    )?;
    let greedy = GenerationParams::greedy(config.max_answer_tokens);
    let acc = |mode: &PromptMode| eval_expressive(model, &sets.eval, &greedy, mode, exec).map(|r| r.accuracy);
    let sampling = GenerationParams {
        max_tokens: config.max_answer_tokens,
        ..config.sampling
    };
    Ok(StageReport {
        model_id: checkpoint_id(c),
        stage: c.meta.stage,
        step: c.meta.step,
        training_tokens: c.meta.training_tokens,
        layer_accuracies: curve.dense(),
        cognitive_score: curve.cognitive_score,
        best_layer: curve.best_layer,
        plateau: plateau_proportion(&curve, DEFAULT_PLATEAU_EPSILON)?,
        svm_accuracy: svm.selected_test_accuracy(),
        svm_layer: svm.selected_layer,
        verdict_accuracy: eval_verdicts(model, &sets.probe_test, &greedy, exec)?.accuracy,
        zero_shot: acc(&PromptMode::ZeroShot)?,
        few_shot: acc(&PromptMode::FewShot(sets.exemplars.clone()))?,
        magical: acc(&PromptMode::Magical)?,
        repeated: eval_repeated_curve(model, &sets.eval, &sampling, config.repeats, exec)?,
        likelihood_sum: eval_likelihood_ranking(model, &sets.eval, LikelihoodScoring::Sum, exec)?.accuracy,
        likelihood_per_token: eval_likelihood_ranking(model, &sets.eval, LikelihoodScoring::PerToken, exec)?.accuracy,
    })
}

/// KL series over checkpoints; reference vectors are the mean final-layer
/// residuals of the eval prompts across all checkpoints.
pub fn vocab_kl(models: &[ToyModel], questions: &[ChoiceQuestion], exec: Exec) -> Result<Vec<KlInterval>> {
    let dumps = models
        .iter()
        .map(|m| direct_dump(m, questions, exec))
        .collect::<Result<Vec<_>>>()?;
    let reference = mean_final_embedding(&dumps)?;
    let layers: Vec<VocabLayer> = models
        .iter()
        .map(|m| VocabLayer::from_checkpoint(&m.checkpoint, checkpoint_id(&m.checkpoint)))
        .collect();
    kl_series(&layers, &reference, false, exec)
}

/// Deleting the deepest plateau layer vs deleting the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeletionComparison {
    pub plateau_layer: DeletionReport,
    pub first_layer: DeletionReport,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub task: SyntheticTask,
    pub models: Vec<ToyModel>,
    pub losses: Vec<f64>,
    pub reports: Vec<StageReport>,
    pub kl: Vec<KlInterval>,
    pub deletion: Option<DeletionComparison>,
}

pub fn run_pipeline(config: &PipelineConfig, exec: Exec) -> Result<PipelineRun> {
    let task = SyntheticTask::new(config.task)?;
    let run = train_synthetic(&config.model_config(task.vocab_size()), &task, &config.schedule, exec)?;
    let sets = EvalSets::new(&task, config);
    let models = run
        .checkpoints
        .into_iter()
        .map(|c| ToyModel::new(c, task.tokenizer().clone()))
        .collect::<Result<Vec<_>>>()?;
    let reports = models
        .iter()
        .map(|m| evaluate_checkpoint(m, &sets, config, exec))
        .collect::<Result<Vec<_>>>()?;
    let kl = vocab_kl(&models, &sets.eval, exec)?;

    let last = models.last().expect("a validated schedule emits checkpoints");
    let report = reports.last().expect("one report per checkpoint");
    let deletion = if last.checkpoint.n_layers() >= 2 {
        let greedy = GenerationParams::greedy(config.max_answer_tokens);
        let deepest = report.plateau.start + report.plateau.plateau_len - 1;
        Some(DeletionComparison {
            plateau_layer: layer_deletion_report(last, &sets.eval, deepest, &greedy, exec)?,
            first_layer: layer_deletion_report(last, &sets.eval, 0, &greedy, exec)?,
        })
    } else {
        None
    };
    Ok(PipelineRun {
        task,
        models,
        losses: run.losses,
        reports,
        kl,
        deletion,
    })
}

/// The headline comparisons of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    /// Last pretrain-analog checkpoint.
    pub pretrain: StageReport,
    /// Last format-tuning checkpoint.
    pub tuned: StageReport,
    pub gap_before: f64,
    pub gap_after: f64,
    pub cognitive_change: f64,
    pub pretrain_kl_per_million: f64,
    pub tuning_kl_per_million: f64,
}

impl GapSummary {
    pub fn from_run(reports: &[StageReport], kl: &[KlInterval]) -> Result<Self> {
        let last_of = |stage: Stage| reports.iter().rev().find(|r| r.stage == stage).cloned();
        let pretrain = last_of(Stage::Pretrain).ok_or_else(|| arg("run has no pretrain checkpoint"))?;
        let tuned = last_of(Stage::Sft).ok_or_else(|| arg("run has no format-tuning checkpoint"))?;
        // an interval belongs to the stage of the checkpoint it ends at
        let stage_of = |id: &str| reports.iter().find(|r| r.model_id == id).map(|r| r.stage);
        let late_pretrain = kl
            .iter()
            .rev()
            .find(|i| stage_of(&i.to_model) == Some(Stage::Pretrain))
            .ok_or_else(|| arg("need two pretrain checkpoints for a pretrain KL interval"))?
            .kl_per_million;
        let tuning: Vec<f64> = kl
            .iter()
            .filter(|i| stage_of(&i.to_model) == Some(Stage::Sft))
            .map(|i| i.kl_per_million)
            .collect();
        if tuning.is_empty() {
            return Err(arg("no format-tuning KL interval"));
        }
        Ok(Self {
            gap_before: pretrain.gap(),
            gap_after: tuned.gap(),
            cognitive_change: tuned.cognitive_score - pretrain.cognitive_score,
            pretrain_kl_per_million: late_pretrain,
            tuning_kl_per_million: tuning.iter().sum::<f64>() / tuning.len() as f64,
            pretrain,
            tuned,
        })
    }
}
