//! Pipeline stages. Each reads its inputs from the configured directories,
//! writes its artifacts and returns a JSON summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cadenza::attribution::{
    fit_attribution_index, random_baseline_scores, score_targets, AttributionMatrix, AttributionTarget, IndexConfig,
    Level,
};
use cadenza::eval::{
    lds_from_influences, style_features, style_similarity_by_rank, Feature, LdsReport, RetrainCache, SubsetPlan,
};
use cadenza::midi::{
    detokenize, make_training_windows, parse_midi_with, tokenize_with, write_midi, Corpus, EventSequence,
    ParseOptions, TokenizeOptions, VocabularyLayout, Work,
};
use cadenza::model::{generate, ModelCheckpoint, Sampling, Trainer, TrainingExample};
use cadenza::royalty::{
    attribution_weights, build_pools, read_usage_log, settle_periods, AttributionWeights, RevenueRecord,
};
use cadenza::seed::derive_seed;
use cadenza::Exec;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::CliError;

pub struct Context {
    pub config: PipelineConfig,
    pub exec: Exec,
}

/// A held-out window opening, used to prompt generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub source_file: String,
    pub offset: usize,
    pub tokens: EventSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub segment: Vec<AttributionTarget>,
    pub event: Vec<AttributionTarget>,
}

pub(crate) mod files {
    use super::*;

    pub fn corpus_tokens(c: &PipelineConfig) -> PathBuf {
        c.paths.corpus_dir.join("corpus.arec")
    }
    pub fn manifest(c: &PipelineConfig) -> PathBuf {
        c.paths.corpus_dir.join("manifest.json")
    }
    pub fn prompts(c: &PipelineConfig) -> PathBuf {
        c.paths.corpus_dir.join("prompts.json")
    }
    pub fn full_model(c: &PipelineConfig) -> PathBuf {
        c.paths.checkpoint_dir.join("full.ackp")
    }
    pub fn member(c: &PipelineConfig, k: usize) -> PathBuf {
        c.paths.checkpoint_dir.join(format!("member-{k:02}.ackp"))
    }
    /// Retrained models live under a directory keyed by the trainer settings.
    pub fn subset_model(c: &PipelineConfig, trainer_key: &str, s: usize) -> PathBuf {
        c.paths.checkpoint_dir.join("lds").join(trainer_key).join(format!("subset-{s:03}.ackp"))
    }
    pub fn targets(c: &PipelineConfig) -> PathBuf {
        c.paths.generated_dir.join("targets.json")
    }
    pub fn scores(c: &PipelineConfig, name: &str) -> PathBuf {
        c.paths.scores_dir.join(format!("{name}.ascr"))
    }
    pub fn lds(c: &PipelineConfig) -> PathBuf {
        c.paths.eval_dir.join("lds.json")
    }
    pub fn style(c: &PipelineConfig) -> PathBuf {
        c.paths.eval_dir.join("style.json")
    }
}

fn require(path: &Path, artifact: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            artifact,
            path: path.to_path_buf(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, artifact: &'static str) -> Result<T, CliError> {
    require(path, artifact)?;
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn load_corpus(c: &PipelineConfig) -> Result<Corpus, CliError> {
    let (tokens, manifest) = (files::corpus_tokens(c), files::manifest(c));
    require(&tokens, "corpus token file")?;
    require(&manifest, "corpus manifest")?;
    Ok(Corpus::read(&tokens, &manifest)?)
}

fn load_checkpoint(path: &Path, artifact: &'static str) -> Result<ModelCheckpoint, CliError> {
    require(path, artifact)?;
    Ok(ModelCheckpoint::load(path)?)
}

fn load_scores(c: &PipelineConfig, name: &str) -> Result<AttributionMatrix, CliError> {
    let path = files::scores(c, name);
    require(&path, "score matrix")?;
    Ok(AttributionMatrix::load(&path)?)
}

fn save_scores(c: &PipelineConfig, name: &str, m: &AttributionMatrix) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&c.paths.scores_dir)?;
    let path = files::scores(c, name);
    m.save(&path)?;
    m.write_csv(BufWriter::new(fs::File::create(path.with_extension("csv"))?))?;
    Ok(path)
}

fn full_trainer(ctx: &Context) -> Trainer {
    let c = &ctx.config;
    let mut hyper = c.train.clone();
    hyper.exec = ctx.exec;
    Trainer::new(c.model_config(derive_seed(c.seed, "train")), hyper)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn ingest(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let ing = &c.ingest;
    require(&c.paths.midi_dir, "MIDI directory")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&c.paths.midi_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("mid") || x.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!("no .mid files in {}", c.paths.midi_dir.display())));
    }
    let layout = VocabularyLayout::default();
    let (mut works, mut prompts) = (Vec::new(), Vec::new());
    let mut dangling = 0;
    for path in &paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let (seq, report) = parse_midi_with(&fs::read(path)?, ParseOptions { sustain_pedal: ing.sustain_pedal })
            .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        dangling += report.dangling_note_ons;
        let events = tokenize_with(&seq, &layout, TokenizeOptions { velocity_on_change: ing.velocity_on_change });
        let windows =
            make_training_windows(&events, ing.window_len).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        if windows.len() <= ing.holdout_per_file {
            return Err(CliError::Input(format!(
                "{name}: {} windows cannot hold out {} prompts",
                windows.len(),
                ing.holdout_per_file
            )));
        }
        let n_train = windows.len() - ing.holdout_per_file;
        for (j, w) in windows.iter().enumerate() {
            if j < n_train {
                if ing.max_train_windows_per_file.is_some_and(|m| j >= m) {
                    continue;
                }
                works.push(Work {
                    work_id: format!("{stem}#{j:03}"),
                    rightsholder_id: format!("rh-{stem}"),
                    source: name.clone(),
                    offset: j * ing.window_len,
                    tokens: w.clone(),
                });
            } else {
                prompts.push(Prompt {
                    prompt_id: format!("p{:03}", prompts.len()),
                    source_file: name.clone(),
                    offset: j * ing.window_len,
                    tokens: w.slice(0..ing.prompt_len),
                });
            }
        }
    }
    let corpus = Corpus::new(ing.window_len, works)?;
    fs::create_dir_all(&c.paths.corpus_dir)?;
    corpus.write(&files::corpus_tokens(c), &files::manifest(c))?;
    write_json(&files::prompts(c), &prompts)?;
    info!("ingested {} works and {} prompts", corpus.len(), prompts.len());
    Ok(json!({
        "stage": "ingest",
        "files": paths.len(),
        "works": corpus.len(),
        "prompts": prompts.len(),
        "window_len": ing.window_len,
        "dangling_note_ons": dangling,
        "corpus_hash": corpus.content_hash(),
        "corpus": display(&files::corpus_tokens(c)),
    }))
}

/// Training-set masks of the ensemble members.
fn member_masks(c: &PipelineConfig, n: usize) -> Result<Vec<Option<Vec<bool>>>, CliError> {
    let a = &c.attribution;
    if a.member_fraction >= 1.0 {
        return Ok(vec![None; a.members]);
    }
    let plan = SubsetPlan::random(n, a.members, a.member_fraction, derive_seed(c.seed, "member-subsets"))?;
    Ok(plan
        .subsets
        .iter()
        .map(|s| {
            let mut mask = vec![false; n];
            for &i in s {
                mask[i] = true;
            }
            Some(mask)
        })
        .collect())
}

pub fn train(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let corpus = load_corpus(c)?;
    let examples = TrainingExample::from_corpus(&corpus);
    let trainer = full_trainer(ctx);
    fs::create_dir_all(&c.paths.checkpoint_dir)?;
    let full = trainer.fit(&examples, None)?;
    full.save(&files::full_model(c))?;
    info!("trained full model, final loss {:?}", full.provenance.final_loss);

    let masks = member_masks(c, examples.len())?;
    let members = ctx.exec.try_map_range(masks.len(), |k| {
        trainer
            .with_seed(derive_seed(c.seed, &format!("member/{k}")))
            .fit(&examples, masks[k].as_deref())
    })?;
    for (k, m) in members.iter().enumerate() {
        m.save(&files::member(c, k))?;
    }
    Ok(json!({
        "stage": "train",
        "params": full.param_count(),
        "epochs": c.train.epochs,
        "initial_loss": full.provenance.initial_loss,
        "final_loss": full.provenance.final_loss,
        "members": members.len(),
        "member_final_losses": members.iter().map(|m| m.provenance.final_loss).collect::<Vec<_>>(),
        "checkpoint": display(&files::full_model(c)),
    }))
}

pub fn generate_stage(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let model = load_checkpoint(&files::full_model(c), "model checkpoint")?;
    let prompts: Vec<Prompt> = read_json(&files::prompts(c), "prompt list")?;
    let g = &c.generate;
    let outputs = ctx.exec.try_map_range(prompts.len(), |i| {
        let sampling = Sampling {
            temperature: g.temperature,
            top_k: g.top_k,
            seed: derive_seed(c.seed, &format!("generate/{i}")),
        };
        generate(&model, &prompts[i].tokens, g.length, sampling)
    })?;
    fs::create_dir_all(&c.paths.generated_dir)?;
    let layout = VocabularyLayout::default();
    let (mut segment, mut event) = (Vec::new(), Vec::new());
    for (i, (prompt, tokens)) in prompts.iter().zip(outputs).enumerate() {
        let id = format!("g{i:03}");
        let notes = detokenize(&prompt.tokens.concat(&tokens), &layout);
        fs::write(c.paths.generated_dir.join(format!("{id}.mid")), write_midi(&notes.notes, 480, 500_000))?;
        let pos = (derive_seed(c.seed, &format!("event-target/{i}")) % tokens.len() as u64) as usize;
        let target = AttributionTarget::segment(id, prompt.tokens.clone(), tokens)?;
        event.push(target.event_at(pos)?);
        segment.push(target);
    }
    let targets = Targets { segment, event };
    write_json(&files::targets(c), &targets)?;
    Ok(json!({
        "stage": "generate",
        "tracks": targets.segment.len(),
        "length": g.length,
        "temperature": g.temperature,
        "targets": display(&files::targets(c)),
    }))
}

fn random_matrix(
    c: &PipelineConfig,
    level: Level,
    target_ids: Vec<String>,
    work_ids: &[String],
) -> Result<AttributionMatrix, CliError> {
    let tag = match level {
        Level::Event => "event",
        Level::Segment => "segment",
    };
    let rows: Vec<Vec<f64>> = (0..target_ids.len())
        .map(|t| random_baseline_scores(work_ids.len(), derive_seed(c.seed, &format!("random/{tag}/{t}"))))
        .collect();
    Ok(AttributionMatrix::from_rows(level, target_ids, work_ids.to_vec(), &rows, json!({"estimator": "random"}))?)
}

pub fn attribute(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let corpus = load_corpus(c)?;
    let examples = TrainingExample::from_corpus(&corpus);
    let members = (0..c.attribution.members)
        .map(|k| load_checkpoint(&files::member(c, k), "ensemble member checkpoint"))
        .collect::<Result<Vec<_>, _>>()?;
    let targets: Targets = read_json(&files::targets(c), "generation targets")?;
    let a = &c.attribution;
    let config = IndexConfig {
        projection_dim: a.projection_dim,
        lambda: a.lambda,
        output_fn: a.output_fn,
        features_on_member_subset: a.features_on_member_subset,
        seed: derive_seed(c.seed, "projection"),
        exec: ctx.exec,
    };
    let index = fit_attribution_index(&examples, &members, &config)?;

    // Score every generated event once; segments sum their events and event
    // targets pick theirs.
    let mut all_events = Vec::new();
    let mut spans = Vec::new();
    for seg in &targets.segment {
        let start = all_events.len();
        for i in 0..seg.tokens.len() {
            all_events.push(seg.event_at(i)?);
        }
        spans.push(start..all_events.len());
    }
    let per_event = score_targets(&index, &all_events)?;
    let n = per_event.n_works();
    let mut seg_rows = Vec::with_capacity(spans.len());
    for span in &spans {
        let mut row = vec![0.0; n];
        for e in span.clone() {
            for (r, v) in row.iter_mut().zip(per_event.row(e)) {
                *r += v;
            }
        }
        seg_rows.push(row);
    }
    let mut event_rows = Vec::with_capacity(targets.event.len());
    for t in &targets.event {
        let e = all_events
            .iter()
            .position(|x| x.target_id == t.target_id)
            .ok_or_else(|| CliError::Input(format!("event target {} is not part of a segment", t.target_id)))?;
        event_rows.push(per_event.row(e).to_vec());
    }
    let echo = serde_json::to_value(&config)?;
    let work_ids = corpus.work_ids();
    let ids = |ts: &[AttributionTarget]| ts.iter().map(|t| t.target_id.clone()).collect::<Vec<_>>();
    let segment =
        AttributionMatrix::from_rows(Level::Segment, ids(&targets.segment), work_ids.clone(), &seg_rows, echo.clone())?;
    let event = AttributionMatrix::from_rows(Level::Event, ids(&targets.event), work_ids.clone(), &event_rows, echo)?;
    let random_segment = random_matrix(c, Level::Segment, ids(&targets.segment), &work_ids)?;
    let random_event = random_matrix(c, Level::Event, ids(&targets.event), &work_ids)?;
    let mut written = BTreeMap::new();
    for (name, m) in [
        ("segment", &segment),
        ("event", &event),
        ("random-segment", &random_segment),
        ("random-event", &random_event),
    ] {
        written.insert(name, display(&save_scores(c, name, m)?));
    }
    Ok(json!({
        "stage": "attribute",
        "members": index.members.len(),
        "projection_dim": index.projection_dim,
        "lambdas": index.members.iter().map(|m| m.lambda).collect::<Vec<_>>(),
        "segment_targets": segment.n_targets(),
        "event_targets": event.n_targets(),
        "works": n,
        "scores": written,
    }))
}

/// Subset models, reloaded from the checkpoint directory when an earlier run
/// trained them with the same corpus, mask and configuration.
fn subset_models(
    ctx: &Context,
    examples: &[TrainingExample],
    plan: &SubsetPlan,
    trainer: &Trainer,
    corpus_hash: &str,
) -> Result<(Vec<ModelCheckpoint>, usize), CliError> {
    let c = &ctx.config;
    let key = cadenza::seed::sha256_hex(&serde_json::to_vec(trainer)?)[..16].to_string();
    fs::create_dir_all(files::subset_model(c, &key, 0).parent().expect("subset dir"))?;
    let reusable = |s: usize| -> Option<ModelCheckpoint> {
        let m = ModelCheckpoint::load(&files::subset_model(c, &key, s)).ok()?;
        let p = &m.provenance;
        (m.config == trainer.config
            && p.subset_mask.as_deref() == Some(plan.keep_mask(s).as_slice())
            && p.corpus_hash.as_deref() == Some(corpus_hash)
            && p.epochs == trainer.hyper.epochs)
            .then_some(m)
    };
    let cached: Vec<Option<ModelCheckpoint>> = (0..plan.subsets.len()).map(reusable).collect();
    let reused = cached.iter().filter(|m| m.is_some()).count();
    let models = ctx.exec.try_map_range(plan.subsets.len(), |s| match &cached[s] {
        Some(m) => Ok(m.clone()),
        None => {
            let m = trainer.fit(examples, Some(&plan.keep_mask(s)))?;
            m.save(&files::subset_model(c, &key, s))?;
            Ok::<_, CliError>(m)
        }
    })?;
    Ok((models, reused))
}

fn training_corpus_hash(examples: &[TrainingExample]) -> String {
    let mut bytes = Vec::new();
    for ex in examples {
        for t in ex.tokens.tokens() {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
    }
    cadenza::seed::sha256_hex(&bytes)
}

pub fn evaluate_lds(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let corpus = load_corpus(c)?;
    let examples = TrainingExample::from_corpus(&corpus);
    let targets: Targets = read_json(&files::targets(c), "generation targets")?;
    let matrices = ["event", "segment", "random-event", "random-segment"]
        .map(|name| load_scores(c, name).map(|m| (name, m)))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let base = load_checkpoint(&files::full_model(c), "model checkpoint")?;
    let e = &c.evaluation;
    let plan = SubsetPlan::random(examples.len(), e.subsets, e.fraction, derive_seed(c.seed, "lds-subsets"))?;
    let trainer = full_trainer(ctx);
    let (models, reused) = subset_models(ctx, &examples, &plan, &trainer, &training_corpus_hash(&examples))?;
    let cache = RetrainCache { base, models };
    let event_truth = cache.influences(&targets.event, ctx.exec);
    let segment_truth = cache.influences(&targets.segment, ctx.exec);

    let mut reports: BTreeMap<&str, LdsReport> = BTreeMap::new();
    for (name, m) in &matrices {
        let truth = if m.level == Level::Event { &event_truth } else { &segment_truth };
        reports.insert(name, lds_from_influences(m, &plan, truth)?);
    }
    let output = json!({
        "fraction": e.fraction,
        "subsets": plan.subsets.len(),
        "subset_size": plan.subset_size(),
        "seed": plan.seed,
        "reports": reports,
    });
    write_json(&files::lds(c), &output)?;
    let means: BTreeMap<&str, Option<f64>> = reports.iter().map(|(k, r)| (*k, r.mean_rho)).collect();
    Ok(json!({
        "stage": "evaluate-lds",
        "fraction": e.fraction,
        "subsets": plan.subsets.len(),
        "retrained": plan.subsets.len() - reused,
        "reused": reused,
        "mean_rho": means,
        "report": display(&files::lds(c)),
    }))
}

pub fn evaluate_style(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let corpus = load_corpus(c)?;
    let targets: Targets = read_json(&files::targets(c), "generation targets")?;
    let scores = load_scores(c, "segment")?;
    let work_features: Vec<_> = corpus.works.iter().map(|w| style_features(&w.tokens)).collect();
    let target_features: Vec<_> = targets.segment.iter().map(|t| style_features(&t.tokens)).collect();
    let report = style_similarity_by_rank(&scores, &work_features, &target_features, c.evaluation.buckets)?;
    write_json(&files::style(c), &report)?;
    report.write_csv(BufWriter::new(fs::File::create(files::style(c).with_extension("csv"))?))?;
    let last = report.buckets - 1;
    let trend: BTreeMap<&str, Value> = Feature::ALL
        .iter()
        .map(|&f| {
            let top = report.get(0, f).and_then(|s| s.pearson);
            let bottom = report.get(last, f).and_then(|s| s.pearson);
            (f.name(), json!({"top": top, "bottom": bottom}))
        })
        .collect();
    Ok(json!({
        "stage": "evaluate-style",
        "buckets": report.buckets,
        "targets": report.targets,
        "pearson": trend,
        "report": display(&files::style(c)),
    }))
}

fn read_revenue(path: &Path) -> Result<Vec<RevenueRecord>, CliError> {
    require(path, "revenue records")?;
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn settle(ctx: &Context) -> Result<Value, CliError> {
    let c = &ctx.config;
    let r = &c.royalty;
    let scores = load_scores(c, if r.level == Level::Event { "event" } else { "segment" })?;
    let corpus = load_corpus(c)?;
    require(&c.paths.usage_log, "usage log")?;
    let usage = read_usage_log(std::io::BufReader::new(fs::File::open(&c.paths.usage_log)?))?;
    let records = read_revenue(&c.paths.revenue)?;

    let owner: BTreeMap<String, String> =
        corpus.works.iter().map(|w| (w.work_id.clone(), w.rightsholder_id.clone())).collect();
    let mut weights = AttributionWeights::new();
    for (t, id) in scores.target_ids.iter().enumerate() {
        let track = id.split('/').next().unwrap_or(id).to_string();
        let w = attribution_weights(scores.row(t), &scores.work_ids, &r.weight_policy).by_rightsholder(&owner);
        weights.insert(track, w);
    }
    let config = r.to_config();
    let pools = build_pools(&records, &config.pools)?;
    let statements = settle_periods(&pools, &usage, &weights, &config)?;
    fs::create_dir_all(&c.paths.statement_dir)?;
    let mut periods = Vec::new();
    for s in &statements {
        let csv_path = c.paths.statement_dir.join(format!("statement-{}.csv", s.period));
        s.write_csv(BufWriter::new(fs::File::create(&csv_path)?))?;
        let audit = c.paths.statement_dir.join(format!("audit-{}.json", s.period));
        s.write_audit_json(BufWriter::new(fs::File::create(&audit)?))?;
        periods.push(json!({
            "period": s.period,
            "pool_total": s.pool_total(),
            "rightsholders": s.rightsholder_total(),
            "platform": s.platform_amount,
            "unattributed": s.unattributed_amount,
            "conserved": s.is_conserved(),
            "statement": display(&csv_path),
        }));
    }
    Ok(json!({
        "stage": "settle",
        "level": r.level,
        "tracks_weighted": weights.len(),
        "plays": usage.len(),
        "periods": periods,
    }))
}

pub fn pipeline(ctx: &Context) -> Result<Value, CliError> {
    let mut out = serde_json::Map::new();
    for (name, stage) in STAGES {
        out.insert(name.to_string(), stage(ctx)?);
    }
    out.insert("stage".into(), json!("pipeline"));
    Ok(Value::Object(out))
}

type Stage = fn(&Context) -> Result<Value, CliError>;

pub const STAGES: [(&str, Stage); 7] = [
    ("ingest", ingest),
    ("train", train),
    ("generate", generate_stage),
    ("attribute", attribute),
    ("evaluate-lds", evaluate_lds),
    ("evaluate-style", evaluate_style),
    ("settle", settle),
];
