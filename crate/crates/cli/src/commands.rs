use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Read;
use std::path::Path;

use gapscope::exec::Exec;
use gapscope::expression::{
    eval_expressive, eval_likelihood_ranking, eval_repeated_curve, GenerationParams, LikelihoodScoring, ModelInterface, PromptMode, TranscriptModel,
};
use gapscope::probe::{choose_answers, emit_projection, layer_curve_with, svm_layer_curve, ProbeOptions, SvmOptions};
use gapscope::residual::{bound_coverage, cosine_lower_bound, plateau_proportion, random_gradient_batch, random_prompts, residual_profile};
use gapscope::stats::{consistency_report, inconsistency_ratio};
use gapscope::store::{read_dump, ActivationDump, Stage};
use gapscope::templates::{read_questions, Exemplar};
use gapscope::toy::{read_checkpoint, TOY_MAGIC};
use gapscope::vocab::{kl_series, mean_final_embedding, read_vocab_layer, VocabLayer, VOCAB_MAGIC};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{OutDir, Summary};
use crate::{require_file, ConsistencyArgs, ExpressArgs, ExpressMode, InconsistencyArgs, ProbeArgs, ReportArgs, ResidualArgs, VocabKlArgs};

fn load_dump(path: &Path) -> CliResult<ActivationDump> {
    require_file(path)?;
    Ok(read_dump(path)?)
}

pub fn validate(path: &Path) -> CliResult<()> {
    require_file(path)?;
    match read_dump(path) {
        Ok(d) => {
            println!("ok");
            println!(
                "{}: {:?} mode, {} examples x {} layers x {} dims, model {} ({}, {} tokens)",
                path.display(),
                d.mode,
                d.n_examples,
                d.n_layers,
                d.hidden_size,
                d.model_id,
                d.stage,
                d.training_tokens
            );
            Ok(())
        }
        Err(gapscope::Error::Validation(report)) => {
            println!("{report}");
            Err(CliError::invalid(format!("{} failed validation", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    accuracy: Option<f64>,
    sign: Option<String>,
    train_accuracy: Option<f64>,
    svm_train: Option<f64>,
    svm_test: Option<f64>,
    failure: Option<String>,
}

#[derive(Serialize)]
struct AnswerRow {
    question_id: String,
    parsed_index: usize,
    correct: bool,
}

pub fn probe(a: &ProbeArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "probe")?;
    let train = load_dump(&a.train_dump)?;
    let test = load_dump(&a.test_dump)?;
    out.input(&a.train_dump);
    out.input(&a.test_dump);
    out.seed(a.seed);

    let opts = ProbeOptions {
        stimulus_differencing: a.differencing,
        ..ProbeOptions::default()
    };
    let curve = layer_curve_with(&train, &test, &opts, Exec::Parallel)?;
    let plateau = plateau_proportion(&curve, a.epsilon)?;
    let svm = if a.svm {
        let o = SvmOptions {
            lambda: a.svm_lambda,
            epochs: a.svm_epochs,
            seed: a.seed,
        };
        Some(svm_layer_curve(&train, &test, &o, Exec::Parallel)?)
    } else {
        None
    };

    let rows: Vec<LayerRow> = (0..curve.accuracies.len())
        .map(|l| LayerRow {
            layer: l,
            accuracy: curve.accuracies[l],
            sign: curve.probes[l].as_ref().map(|p| format!("{:?}", p.sign).to_lowercase()),
            train_accuracy: curve.probes[l].as_ref().map(|p| p.train_accuracy),
            svm_train: svm.as_ref().map(|s| s.train_accuracies[l]),
            svm_test: svm.as_ref().map(|s| s.test_accuracies[l]),
            failure: curve.failures[l].clone(),
        })
        .collect();
    out.csv("layers.csv", &rows)?;

    let best = curve.probes[curve.best_layer].as_ref().expect("best layer has a probe");
    let groups = test.groups();
    let answers: Vec<AnswerRow> = choose_answers(&test, best.layer, &best.direction, best.sign)?
        .into_iter()
        .zip(&groups)
        .map(|((id, pick), g)| AnswerRow {
            question_id: id,
            parsed_index: pick,
            correct: test.labels[g.rows[pick]] == 1,
        })
        .collect();
    out.csv("answers.csv", &answers)?;
    if let Some(layer) = a.layer {
        out.csv("projection.csv", &emit_projection(&test, layer)?)?;
    }

    let mut summary = Summary::new("probe", &test.model_id, test.stage, test.training_tokens)
        .metric("cognitive_score", curve.cognitive_score)
        .metric("best_layer", curve.best_layer as f64)
        .metric("plateau_len", plateau.plateau_len as f64)
        .metric("plateau_proportion", plateau.proportion);
    if let Some(s) = &svm {
        summary = summary
            .metric("svm_accuracy", s.selected_test_accuracy())
            .metric("svm_layer", s.selected_layer as f64);
    }
    out.json("summary.json", &summary)?;
    out.json("probes.json", &curve.probes)?;
    out.finish()?;
    eprintln!(
        "cognitive_score={} best_layer={} plateau_proportion={:.4}",
        curve.cognitive_score, curve.best_layer, plateau.proportion
    );
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    k: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct LikelihoodRow<'a> {
    question_id: &'a str,
    parsed_index: usize,
    correct: bool,
}

pub fn express(a: &ExpressArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "express")?;
    out.seed(a.seed);
    require_file(&a.questions)?;
    let questions = read_questions(&a.questions)?;
    out.input(&a.questions);

    let (model, model_id, stage, tokens): (Box<dyn ModelInterface>, String, String, u64) = match (&a.checkpoint, &a.transcript) {
        (Some(ck), _) => {
            let (m, config_path) = crate::toy::load_model(ck, a.config.as_deref())?;
            out.input(ck);
            out.input(&config_path);
            let meta = m.checkpoint.meta;
            let id = gapscope::experiment::checkpoint_id(&m.checkpoint);
            (Box::new(m), id, meta.stage.to_string(), meta.training_tokens)
        }
        (None, Some(t)) => {
            require_file(t)?;
            out.input(t);
            (Box::new(TranscriptModel::read(t)?), a.model_id.clone(), "external".into(), a.training_tokens)
        }
        (None, None) => unreachable!("clap requires one model source"),
    };
    let params = if a.greedy {
        GenerationParams {
            seed: a.seed,
            ..GenerationParams::greedy(a.max_tokens)
        }
    } else {
        GenerationParams {
            seed: a.seed,
            max_tokens: a.max_tokens,
            ..GenerationParams::default()
        }
    };
    let exec = Exec::Parallel;
    let name = clap::ValueEnum::to_possible_value(&a.mode).expect("no skipped variants").get_name().to_string();
    let summary = Summary::new("express", &model_id, &stage, tokens);
    let summary = match a.mode {
        ExpressMode::ZeroShot | ExpressMode::FewShot | ExpressMode::Magical => {
            let mode = match a.mode {
                ExpressMode::ZeroShot => PromptMode::ZeroShot,
                ExpressMode::Magical => PromptMode::Magical,
                _ => match &a.exemplars {
                    Some(p) => {
                        require_file(p)?;
                        out.input(p);
                        let ex: Vec<Exemplar> = read_questions(p)?.iter().take(2).map(Exemplar::from_question).collect();
                        PromptMode::FewShot(ex)
                    }
                    None => PromptMode::few_shot_reference(),
                },
            };
            let r = eval_expressive(model.as_ref(), &questions, &params, &mode, exec)?;
            out.csv("records.csv", &r.records)?;
            summary.metric(mode.name(), r.accuracy)
        }
        ExpressMode::Repeated => {
            let curve = eval_repeated_curve(model.as_ref(), &questions, &params, a.k, exec)?;
            let rows: Vec<CurveRow> = curve.iter().enumerate().map(|(i, &accuracy)| CurveRow { k: i + 1, accuracy }).collect();
            out.csv("repeated.csv", &rows)?;
            summary.metric(&format!("repeated_k{}", a.k), *curve.last().unwrap())
        }
        ExpressMode::Likelihood => {
            let scoring = if a.per_token { LikelihoodScoring::PerToken } else { LikelihoodScoring::Sum };
            let r = eval_likelihood_ranking(model.as_ref(), &questions, scoring, exec)?;
            let rows: Vec<LikelihoodRow> = questions
                .iter()
                .zip(&r.predictions)
                .map(|(q, &p)| LikelihoodRow {
                    question_id: &q.id,
                    parsed_index: p,
                    correct: p == q.correct_index,
                })
                .collect();
            out.csv("records.csv", &rows)?;
            let key = if a.per_token { "likelihood_per_token" } else { "likelihood_sum" };
            summary.metric(key, r.accuracy)
        }
    };
    out.json("summary.json", &summary)?;
    out.finish()?;
    for (k, v) in &summary.metrics {
        eprintln!("{name}: {k}={v}");
    }
    Ok(())
}

/// Reads the named columns of a headed CSV.
fn read_columns(path: &Path, wanted: &[&[&str]]) -> CliResult<Vec<Vec<String>>> {
    require_file(path)?;
    let bad = |m: String| CliError::invalid(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let idx: Vec<usize> = wanted
        .iter()
        .map(|names| {
            headers
                .iter()
                .position(|h| names.contains(&h))
                .ok_or_else(|| bad(format!("missing column {}", names.join(" or "))))
        })
        .collect::<CliResult<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(idx.iter().map(|&i| rec.get(i).unwrap_or("").to_string()).collect());
    }
    Ok(rows)
}

fn correctness(path: &Path) -> CliResult<Vec<(String, bool)>> {
    read_columns(path, &[&["question_id"], &["correct"]])?
        .into_iter()
        .map(|r| {
            let flag = match r[1].trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(CliError::invalid(format!("{}: bad correctness flag '{other}'", path.display()))),
            };
            Ok((r[0].clone(), flag))
        })
        .collect()
}

pub fn consistency(a: &ConsistencyArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "consistency")?;
    let exp = correctness(&a.expressive)?;
    let cog = correctness(&a.cognitive)?;
    out.input(&a.expressive);
    out.input(&a.cognitive);
    let report = consistency_report(&exp, &cog).map_err(|e| CliError::invalid(e.to_string()))?;
    out.csv("consistency.csv", std::slice::from_ref(&report))?;
    out.json("consistency.json", &report)?;
    out.finish()?;
    eprintln!(
        "s={} agree={} consistency={:.4} p_expected={:.4} p_value={:.3e}",
        report.s, report.n_agree, report.consistency, report.p_expected, report.p_value
    );
    Ok(())
}

#[derive(Serialize)]
struct InconsistencyRow {
    from: String,
    to: String,
    inconsistency: f64,
}

pub fn inconsistency(a: &InconsistencyArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "inconsistency")?;
    let mut series = Vec::new();
    for p in &a.answers {
        let rows = read_columns(p, &[&["question_id"], &["parsed_index", "chosen"]])?;
        let answers = rows
            .into_iter()
            .map(|r| {
                let v = r[1].trim();
                let parsed = if v.is_empty() {
                    None
                } else {
                    Some(v.parse::<usize>().map_err(|e| CliError::invalid(format!("{}: parsed_index '{v}': {e}", p.display())))?)
                };
                Ok((r[0].clone(), parsed))
            })
            .collect::<CliResult<Vec<_>>>()?;
        out.input(p);
        series.push(answers);
    }
    let label = |p: &Path| p.to_string_lossy().into_owned();
    let rows = series
        .windows(2)
        .zip(a.answers.windows(2))
        .map(|(s, p)| {
            Ok(InconsistencyRow {
                from: label(&p[0]),
                to: label(&p[1]),
                inconsistency: inconsistency_ratio(&s[0], &s[1]).map_err(|e| CliError::invalid(e.to_string()))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    out.csv("inconsistency.csv", &rows)?;
    out.json("inconsistency.json", &rows)?;
    out.finish()?;
    Ok(())
}

/// A vocab layer plus the training stage when the file records one.
fn load_vocab_layer(path: &Path) -> CliResult<(VocabLayer, Option<Stage>)> {
    require_file(path)?;
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    if magic == TOY_MAGIC {
        let ck = read_checkpoint(path)?;
        Ok((VocabLayer::from_checkpoint(&ck, gapscope::experiment::checkpoint_id(&ck)), Some(ck.meta.stage)))
    } else if magic == VOCAB_MAGIC {
        Ok((read_vocab_layer(path)?, None))
    } else {
        Err(CliError::invalid(format!("{}: neither a toy checkpoint nor a vocab-layer file", path.display())))
    }
}

pub fn vocab_kl(a: &VocabKlArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "vocab-kl")?;
    let (layers, stages): (Vec<_>, Vec<_>) = a
        .models
        .iter()
        .map(|p| load_vocab_layer(p))
        .collect::<CliResult<Vec<_>>>()?
        .into_iter()
        .unzip();
    let dumps = a.dumps.iter().map(|p| load_dump(p)).collect::<CliResult<Vec<_>>>()?;
    a.models.iter().chain(&a.dumps).for_each(|p| out.input(p));
    let reference = mean_final_embedding(&dumps)?;
    let series = kl_series(&layers, &reference, a.symmetric, Exec::Parallel)?;
    out.csv("kl.csv", &series)?;
    out.json("kl.json", &series)?;
    for (i, stage) in series.iter().zip(&stages[1..]) {
        let stage = stage.map_or("unknown".to_string(), |s| s.to_string());
        out.json(
            &format!("summaries/{}.json", i.to_model),
            &Summary::new("vocab-kl", &i.to_model, stage, i.to_tokens).metric("kl_per_million", i.kl_per_million),
        )?;
    }
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct ProfileRow {
    index: usize,
    norm: f64,
    adjacent_cosine: Option<f64>,
    lower_bound: Option<f64>,
    gradient_cosine: Option<f64>,
}

pub fn residual(a: &ResidualArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "residual")?;
    require_file(&a.checkpoint)?;
    let ck = read_checkpoint(&a.checkpoint)?;
    out.input(&a.checkpoint);
    out.seed(a.seed);
    let v = ck.config.vocab_size;
    if a.prompt_len == 0 || a.prompt_len > ck.config.max_seq {
        return Err(CliError::runtime(format!("prompt length must be in 1..={}", ck.config.max_seq)));
    }
    let prompts = random_prompts(v, a.prompts, a.prompt_len, a.seed);
    let batch = a.gradients.then(|| random_gradient_batch(v, a.prompts.min(32), a.prompt_len, a.seed ^ 1));
    let p = residual_profile(&ck, &prompts, batch.as_deref(), Exec::Parallel)?;
    let rows: Vec<ProfileRow> = (0..p.norms.len())
        .map(|i| ProfileRow {
            index: i,
            norm: p.norms[i],
            adjacent_cosine: p.cosines.get(i).copied(),
            lower_bound: (i >= 1 && i < p.cosines.len()).then(|| cosine_lower_bound(i).unwrap()),
            // entry k pairs layers k+1 and k+2
            gradient_cosine: p.gradient_cosines.as_ref().and_then(|g| i.checked_sub(1).and_then(|k| g.get(k).copied())),
        })
        .collect();
    out.csv("profile.csv", &rows)?;
    let inversions = p.norms[1..].windows(2).filter(|w| w[1] < w[0]).count();
    let mut summary = Summary::new("residual", &gapscope::experiment::checkpoint_id(&ck), ck.meta.stage, ck.meta.training_tokens)
        .metric("loglog_slope", p.loglog_slope)
        .metric("norm_inversions", inversions as f64);
    if let Ok(c) = bound_coverage(&p.cosines, a.from_layer) {
        summary = summary.metric("bound_coverage", c);
    }
    out.json("summary.json", &summary)?;
    out.finish()?;
    eprintln!("loglog_slope={:.4} norm_inversions={inversions}", p.loglog_slope);
    Ok(())
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let mut out = OutDir::create(&a.out, "report")?;
    // (training_tokens, model_id) -> (stage, metrics)
    let mut rows: BTreeMap<(u64, String), (String, HashMap<String, f64>)> = BTreeMap::new();
    let mut columns = BTreeSet::new();
    for p in &a.inputs {
        require_file(p)?;
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let s: Summary = serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?;
        out.input(p);
        let entry = rows
            .entry((s.training_tokens, s.model_id.clone()))
            .or_insert_with(|| (s.stage.clone(), HashMap::new()));
        if entry.0 == "unknown" {
            entry.0 = s.stage.clone();
        }
        for (k, v) in s.metrics {
            columns.insert(k.clone());
            if entry.1.insert(k.clone(), v).is_some() {
                return Err(CliError::invalid(format!("metric '{k}' given twice for model {}", s.model_id)));
            }
        }
    }
    let mut header: Vec<String> = ["training_tokens", "model_id", "stage"].map(String::from).to_vec();
    header.extend(columns.iter().cloned());
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|((tokens, id), (stage, m))| {
            let mut r = vec![tokens.to_string(), id.clone(), stage.clone()];
            r.extend(columns.iter().map(|c| m.get(c).map(|v| v.to_string()).unwrap_or_default()));
            r
        })
        .collect();
    out.csv_records("series.csv", &header, &table)?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|((tokens, id), (stage, m))| {
            serde_json::json!({
                "training_tokens": tokens,
                "model_id": id,
                "stage": stage,
                "metrics": m.iter().collect::<BTreeMap<_, _>>(),
            })
        })
        .collect();
    out.json("series.json", &json)?;
    out.finish()?;
    Ok(())
}
