//! Pipeline stages over a run directory.
//!
//! Layout below the workdir:
//!
//! ```text
//! synth/                         generated cohort + ground_truth.json
//! cohort/                        cohort cache + validation.json
//! runs/seed-<s>/folds.json
//! runs/seed-<s>/fold-<f>/<stage>/
//! metrics.csv
//! ablation/table.csv
//! report/
//! stages/<stage>.json            stage manifests
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use brainscl_core::contrastive::{ContrastMode, TrainConfig, TrainState};
use brainscl_core::eval::{
    compute_metrics, export_embeddings_2d, export_similarity_2d, kfold_split, Fold, FoldMetrics, MetricEntry,
    MetricReport, VariantSpec,
};
use brainscl_core::exec::{Executor, Sequential};
use brainscl_core::pipeline::{
    attention_for, build_prototypes, build_views, fit_structures, fuse_views, node_features, prepare_fold,
    run_variant_on_fold, score, stage_seed, train_inputs, trainer_for, ClassViews, FusionSource, PipelineConfig,
    PrototypeStage, Scores, StructureStage,
};
use brainscl_core::prototype::{top_regions, RoiInfo};
use brainscl_core::rng::derive_seed;
use brainscl_core::snf::FusedSimilarity;
use brainscl_core::subtype::{discover_subtypes, SubtypeAssignment, SubtypeConfig};
use brainscl_core::synth::{generate, GroundTruth, SynthSpec};
use brainscl_core::text::TextEmbeddingProvider;
use brainscl_core::{Cohort, Label, Matrix};
use brainscl_core::contrastive::ConnectomeEncoderConfig;
use serde::{Deserialize, Serialize};

use crate::config::{ProviderChoice, RunConfig};
use crate::error::{AppError, AppResult};
use crate::exec::Exec;
use crate::io::{
    fmt_f64, label_str, load_cohort, read_json, read_subjects, validation_report, write_bytes, write_cohort,
    vector_header, write_json, write_labeled_matrix_csv, write_matrix_csv, write_table,
};
use crate::provider::make_provider;
use crate::workdir::{files_under, hash_file, hash_value, Workdir};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Stage names in pipeline order.
pub const PIPELINE_STAGES: [&str; 8] =
    ["ingest", "structures", "views", "fuse", "subtype", "prototype", "train", "evaluate"];

pub struct Context {
    pub cfg: RunConfig,
    pub wd: Workdir,
    pub force: bool,
    pub exec: Exec,
    pub quiet: bool,
}

fn log(ctx: &Context, msg: impl AsRef<str>) {
    if !ctx.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

impl Context {
    /// Validates the config and opens the workdir.
    pub fn new(cfg: RunConfig, workdir: Option<PathBuf>, force: bool, single_thread: bool) -> AppResult<Self> {
        cfg.validate()?;
        let spec = cfg.variant_spec()?;
        if cfg.needs_text(spec) && cfg.text.provider == ProviderChoice::None {
            return Err(AppError::Config(format!(
                "variant {} needs the text view but text.provider = \"none\"",
                spec.name.as_str()
            )));
        }
        let root = workdir
            .or_else(|| cfg.paths.workdir.clone())
            .ok_or_else(|| AppError::Usage("no workdir: pass --workdir or set paths.workdir".into()))?;
        Ok(Self { wd: Workdir::create(root)?, cfg, force, exec: Exec::new(single_thread), quiet: false })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        self.cfg.pipeline()
    }

    pub fn spec(&self) -> VariantSpec {
        self.cfg.variant_spec().expect("validated")
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn require_text(&self) -> bool {
        self.cfg.text.provider != ProviderChoice::None
    }

    fn provider(&self) -> AppResult<Option<Box<dyn TextEmbeddingProvider>>> {
        make_provider(&self.cfg.text)
    }

    fn seed_dir(&self) -> PathBuf {
        self.wd.path(format!("runs/seed-{}", self.seed()))
    }

    pub fn fold_dir(&self, fold: usize, stage: &str) -> PathBuf {
        self.seed_dir().join(format!("fold-{fold}")).join(stage)
    }

    /// Runs `body` unless the stage is current with `key`. Returns whether it ran.
    fn run_stage<F>(&self, stage: &str, key: &str, body: F) -> AppResult<bool>
    where
        F: FnOnce() -> AppResult<Option<Vec<PathBuf>>>,
    {
        if !self.force && self.wd.is_current(stage, key) {
            log(self, format!("{stage}: up to date"));
            return Ok(false);
        }
        self.wd.clear_stage(stage)?;
        log(self, format!("{stage}: running"));
        let files = body().map_err(|e| e.in_stage(stage))?;
        let skipped = files.is_none();
        self.wd.complete(stage, key, &files.unwrap_or_default(), skipped)?;
        Ok(true)
    }

    fn upstream(&self, stage: &str) -> AppResult<String> {
        self.wd.output_key(stage).map_err(|_| AppError::MissingArtifacts(vec![format!("stage {stage} has not run")]))
    }

    fn key<T: Serialize>(&self, stage: &str, part: &T, deps: &[&str]) -> AppResult<String> {
        let ups: Vec<String> = deps.iter().map(|d| self.upstream(d)).collect::<AppResult<_>>()?;
        Ok(hash_value(&(stage, self.seed(), part, ups)))
    }

    fn clean_fold_stage(&self, stage: &str) -> AppResult<()> {
        let dir = self.seed_dir();
        if !dir.exists() {
            return Ok(());
        }
        for entry in fs::read_dir(&dir).map_err(|e| AppError::io(&dir, e))? {
            let p = entry.map_err(|e| AppError::io(&dir, e))?.path().join(stage);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| AppError::io(&p, e))?;
            }
        }
        Ok(())
    }

    fn stage_files(&self, stage: &str, folds: usize) -> AppResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        for f in 0..folds {
            out.extend(files_under(&self.fold_dir(f, stage))?);
        }
        Ok(out)
    }

    pub fn cohort(&self) -> AppResult<Cohort> {
        let p = self.wd.path("cohort/manifest.json");
        if !p.is_file() {
            return Err(AppError::MissingArtifacts(vec!["cohort cache (run ingest)".into()]));
        }
        load_cohort(&p, self.require_text())
    }

    pub fn folds(&self) -> AppResult<Vec<Fold>> {
        read_json(&self.seed_dir().join("folds.json"))
    }
}

// ---------------------------------------------------------------- synth

pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    cfg.synth.clone().unwrap_or_default()
}

/// Generates the configured synthetic cohort into `synth/`.
pub fn cmd_synth(ctx: &Context) -> AppResult<PathBuf> {
    let spec = synth_spec(&ctx.cfg);
    let dir = ctx.wd.path("synth");
    let manifest = dir.join("manifest.json");
    let key = hash_value(&("synth", &spec));
    ctx.run_stage("synth", &key, || {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        }
        let (cohort, truth) = generate(&spec)?;
        write_cohort(&dir, &cohort)?;
        write_json(&dir.join("ground_truth.json"), &truth)?;
        Ok(Some(files_under(&dir)?))
    })?;
    Ok(manifest)
}

pub fn ground_truth(ctx: &Context) -> AppResult<GroundTruth> {
    read_json(&ctx.wd.path("synth/ground_truth.json"))
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Serialize)]
struct ValidationEntry {
    subject: String,
    codes: Vec<String>,
    messages: Vec<String>,
}

fn manifest_path(ctx: &Context) -> AppResult<PathBuf> {
    match &ctx.cfg.paths.manifest {
        Some(p) => Ok(p.clone()),
        None if ctx.cfg.synth.is_some() => cmd_synth(ctx),
        None => Err(AppError::Usage("no cohort: set paths.manifest or add a [synth] section".into())),
    }
}

/// Loads and validates the manifest, then writes `cohort/`.
pub fn cmd_ingest(ctx: &Context) -> AppResult<()> {
    let src = manifest_path(ctx)?;
    let require_text = ctx.require_text();
    let subjects = read_subjects(&src)?;
    let report: Vec<ValidationEntry> = validation_report(&subjects, require_text)
        .into_iter()
        .map(|(subject, v)| ValidationEntry {
            subject,
            codes: v.iter().map(|x| x.code.as_str().to_string()).collect(),
            messages: v.iter().map(|x| x.message.clone()).collect(),
        })
        .collect();
    let dir = ctx.wd.path("cohort");
    if !report.is_empty() {
        write_json(&dir.join("validation.json"), &report)?;
        let first = &report[0];
        return Err(AppError::Ingest {
            subject: first.subject.clone(),
            message: format!("{} ({} subjects with violations)", first.codes.join(", "), report.len()),
        });
    }
    let cohort = load_cohort(&src, require_text)?;
    let key = hash_value(&("ingest", &cohort, require_text));
    ctx.run_stage("ingest", &key, || {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        }
        write_cohort(&dir, &cohort)?;
        write_json(&dir.join("validation.json"), &report)?;
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({
                "name": cohort.name(),
                "subjects": cohort.len(),
                "m_rois": cohort.m_rois(),
                "controls": cohort.count(Label::Control),
                "patients": cohort.count(Label::Patient),
            }),
        )?;
        Ok(Some(files_under(&dir)?))
    })?;
    Ok(())
}

// ---------------------------------------------------------------- structures

#[derive(Debug, Serialize, Deserialize)]
struct StructureSidecar {
    lambda_vc: f64,
    steps: usize,
    seed: u64,
    initial_loss: f64,
    final_loss: f64,
    sparsity: f64,
}

pub fn cmd_structures(ctx: &Context) -> AppResult<()> {
    let pcfg = ctx.pipeline();
    let key = ctx.key("structures", &(&pcfg.structure, &pcfg.fit, pcfg.eval.folds), &["ingest"])?;
    ctx.run_stage("structures", &key, || {
        ctx.clean_fold_stage("structures")?;
        let cohort = ctx.cohort()?;
        cohort.require_both_labels()?;
        let folds = kfold_split(&cohort, pcfg.eval.folds, derive_seed(ctx.seed(), "folds"))?;
        let folds_path = ctx.seed_dir().join("folds.json");
        write_json(&folds_path, &folds)?;
        for (f, fold) in folds.iter().enumerate() {
            let seed = stage_seed(ctx.seed(), f, "structure");
            let st = fit_structures(&cohort, &fold.train, &pcfg, seed, &ctx.exec)?;
            let dir = ctx.fold_dir(f, "structures");
            for (id, c) in &st.all {
                write_matrix_csv(&dir.join(format!("learned/{id}.csv")), &c.values)?;
            }
            let rows = st.fit.loss_trace.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt_f64(*l)]).collect();
            write_table(&dir.join("loss_trace.csv"), &["step", "loss"], rows)?;
            write_json(
                &dir.join("sidecar.json"),
                &StructureSidecar {
                    lambda_vc: st.fit.lambda_vc,
                    steps: st.fit.steps,
                    seed,
                    initial_loss: st.fit.loss_trace.first().copied().unwrap_or(f64::NAN),
                    final_loss: st.fit.final_loss(),
                    sparsity: st.fit.sparsity,
                },
            )?;
            write_json(&dir.join("stage.json"), &st)?;
        }
        let mut files = vec![folds_path];
        files.extend(ctx.stage_files("structures", folds.len())?);
        Ok(Some(files))
    })?;
    Ok(())
}

fn load_structures(ctx: &Context, f: usize) -> AppResult<StructureStage> {
    read_json(&ctx.fold_dir(f, "structures").join("stage.json"))
}

fn graphs_for(ctx: &Context, cohort: &Cohort, st: &StructureStage) -> AppResult<BTreeMap<String, Matrix>> {
    Ok(node_features(cohort, &st.all, ctx.cfg.prototype.features)?)
}

fn skip_note(ctx: &Context) -> bool {
    let skip = !ctx.spec().name.uses_subtypes();
    if skip {
        log(ctx, format!("  variant {} does not use subtypes; nothing to do", ctx.spec().name.as_str()));
    }
    skip
}

// ---------------------------------------------------------------- views

pub fn cmd_views(ctx: &Context) -> AppResult<()> {
    let spec = ctx.spec();
    let text_used = ctx.cfg.needs_text(spec);
    let part = (spec.name.uses_subtypes(), text_used.then_some(&ctx.cfg.text));
    let key = ctx.key("views", &part, &["structures"])?;
    ctx.run_stage("views", &key, || {
        ctx.clean_fold_stage("views")?;
        if skip_note(ctx) {
            return Ok(None);
        }
        let cohort = ctx.cohort()?;
        let provider = if text_used { ctx.provider()? } else { None };
        let folds = ctx.folds()?;
        for (f, fold) in folds.iter().enumerate() {
            let st = load_structures(ctx, f)?;
            let views = build_views(&cohort, &fold.train, &st.all, provider.as_deref())?;
            let dir = ctx.fold_dir(f, "views");
            for cv in &views {
                let l = label_str(cv.label);
                write_labeled_matrix_csv(&dir.join(format!("class-{l}/structure.csv")), &cv.subject_ids, &cv.structure.values)?;
                if let Some(t) = &cv.text {
                    write_labeled_matrix_csv(&dir.join(format!("class-{l}/text.csv")), &cv.subject_ids, &t.values)?;
                }
            }
            write_json(&dir.join("views.json"), &views)?;
        }
        Ok(Some(ctx.stage_files("views", folds.len())?))
    })?;
    Ok(())
}

// ---------------------------------------------------------------- fuse

pub fn cmd_fuse(ctx: &Context) -> AppResult<()> {
    let spec = ctx.spec();
    let source = FusionSource::for_variant(spec.name);
    let key = ctx.key("fuse", &(&ctx.cfg.snf, source, spec.name.uses_subtypes()), &["views"])?;
    ctx.run_stage("fuse", &key, || {
        ctx.clean_fold_stage("fuse")?;
        if skip_note(ctx) {
            return Ok(None);
        }
        let folds = ctx.folds()?;
        for f in 0..folds.len() {
            let views: Vec<ClassViews> = read_json(&ctx.fold_dir(f, "views").join("views.json"))?;
            let fused = fuse_views(&views, &ctx.cfg.snf, source)?;
            let dir = ctx.fold_dir(f, "fuse");
            for (&l, fs_) in &fused {
                write_labeled_matrix_csv(&dir.join(format!("class-{}.csv", label_str(l))), &fs_.subject_ids, &fs_.values)?;
            }
            write_json(&dir.join("fused.json"), &fused)?;
        }
        Ok(Some(ctx.stage_files("fuse", folds.len())?))
    })?;
    Ok(())
}

fn load_fused(ctx: &Context, f: usize) -> AppResult<BTreeMap<Label, FusedSimilarity>> {
    read_json(&ctx.fold_dir(f, "fuse").join("fused.json"))
}

// ---------------------------------------------------------------- subtype

fn subtype_config(ctx: &Context) -> SubtypeConfig {
    SubtypeConfig { k: ctx.spec().k.unwrap_or(ctx.cfg.subtype.k), ..ctx.cfg.subtype.clone() }
}

pub fn cmd_subtype(ctx: &Context) -> AppResult<()> {
    let sub_cfg = subtype_config(ctx);
    let key = ctx.key("subtype", &(&sub_cfg, ctx.spec().name.uses_subtypes()), &["fuse"])?;
    ctx.run_stage("subtype", &key, || {
        ctx.clean_fold_stage("subtype")?;
        if skip_note(ctx) {
            return Ok(None);
        }
        let folds = ctx.folds()?;
        for f in 0..folds.len() {
            let fused = load_fused(ctx, f)?;
            let assignments = discover_subtypes(&fused, &sub_cfg, stage_seed(ctx.seed(), f, "subtype"))?;
            let dir = ctx.fold_dir(f, "subtype");
            for (&l, a) in &assignments {
                let l = label_str(l);
                let rows = a.assignment.iter().map(|(id, k)| vec![id.clone(), k.to_string()]).collect();
                write_table(&dir.join(format!("class-{l}.csv")), &["subject_id", "subtype"], rows)?;
                let rows = a.eigengap_trace.iter().enumerate().map(|(i, g)| vec![(i + 1).to_string(), fmt_f64(*g)]).collect();
                write_table(&dir.join(format!("class-{l}_eigengap.csv")), &["index", "gap"], rows)?;
            }
            write_json(&dir.join("assignments.json"), &assignments)?;
        }
        Ok(Some(ctx.stage_files("subtype", folds.len())?))
    })?;
    Ok(())
}

fn load_assignments(ctx: &Context, f: usize) -> AppResult<BTreeMap<Label, SubtypeAssignment>> {
    read_json(&ctx.fold_dir(f, "subtype").join("assignments.json"))
}

// ---------------------------------------------------------------- prototype

#[derive(Debug, Serialize)]
struct PrototypeSidecar<'a> {
    class_label: u8,
    subtype: usize,
    attention_mode: &'a str,
    member_ids: &'a [String],
}

pub fn cmd_prototype(ctx: &Context) -> AppResult<()> {
    let spec = ctx.spec();
    let mode = attention_for(spec.name, ctx.cfg.prototype.mode);
    let key = ctx.key("prototype", &(mode, ctx.cfg.prototype.features, spec.name.uses_subtypes()), &["subtype"])?;
    ctx.run_stage("prototype", &key, || {
        ctx.clean_fold_stage("prototype")?;
        if skip_note(ctx) {
            return Ok(None);
        }
        let cohort = ctx.cohort()?;
        let folds = ctx.folds()?;
        for f in 0..folds.len() {
            let graphs = graphs_for(ctx, &cohort, &load_structures(ctx, f)?)?;
            let stage = build_prototypes(&load_assignments(ctx, f)?, &graphs, mode)?;
            let dir = ctx.fold_dir(f, "prototype");
            for p in &stage.prototypes {
                let stem = format!("class-{}_subtype-{}", label_str(p.class_label), p.subtype);
                write_matrix_csv(&dir.join(format!("{stem}.csv")), &p.values)?;
                write_json(
                    &dir.join(format!("{stem}.json")),
                    &PrototypeSidecar {
                        class_label: p.class_label.as_u8(),
                        subtype: p.subtype,
                        attention_mode: p.attention_mode.as_str(),
                        member_ids: &p.member_ids,
                    },
                )?;
            }
            write_json(&dir.join("prototypes.json"), &stage)?;
        }
        Ok(Some(ctx.stage_files("prototype", folds.len())?))
    })?;
    Ok(())
}

fn load_prototypes(ctx: &Context, f: usize) -> AppResult<PrototypeStage> {
    read_json(&ctx.fold_dir(f, "prototype").join("prototypes.json"))
}

// ---------------------------------------------------------------- train

fn fold_train_configs(ctx: &Context, f: usize) -> (ConnectomeEncoderConfig, TrainConfig) {
    let spec = ctx.spec();
    let enc = ConnectomeEncoderConfig { seed: stage_seed(ctx.seed(), f, "encoder"), ..ctx.cfg.encoder.clone() };
    let tcfg = TrainConfig { seed: stage_seed(ctx.seed(), f, "trainer"), ..trainer_for(spec.name, &ctx.cfg.trainer) };
    (enc, tcfg)
}

fn tensor_rows(values: &[f64]) -> Vec<Vec<String>> {
    values.iter().map(|&x| vec![fmt_f64(x)]).collect()
}

/// Writes a checkpoint directory. `state.json` is what resumption reads; the
/// per-tensor CSVs and queues are for inspection.
pub fn write_checkpoint(dir: &Path, state: &TrainState, enc: &ConnectomeEncoderConfig) -> AppResult<()> {
    write_json(&dir.join("version.json"), &serde_json::json!({ "version": CHECKPOINT_VERSION }))?;
    write_json(&dir.join("hyper.json"), &serde_json::json!({ "encoder": enc, "trainer": &state.config }))?;
    let layout = state.encoder.layout();
    for (name, start, len) in layout.tensors(&state.encoder.config, state.encoder.m) {
        write_table(&dir.join(format!("encoder/{name}.csv")), &["value"], tensor_rows(&state.encoder.params[start..start + len]))?;
        write_table(&dir.join(format!("momentum/{name}.csv")), &["value"], tensor_rows(&state.momentum_params[start..start + len]))?;
    }
    if state.config.mode != ContrastMode::None {
        for q in &state.queues {
            let rows = q
                .entries()
                .map(|(e, id)| std::iter::once(id.clone()).chain(e.iter().map(|&x| fmt_f64(x))).collect())
                .collect();
            let header = vector_header(&["subject_id"], state.encoder.config.embed_dim);
            write_table(&dir.join(format!("queues/label-{}.csv", label_str(q.label))), &header, rows)?;
        }
    }
    if state.config.mode == ContrastMode::Prototype {
        let rows = state
            .prototype_embeddings
            .iter()
            .map(|p| {
                [label_str(p.label), p.subtype.to_string()]
                    .into_iter()
                    .chain(p.embedding.iter().map(|&x| fmt_f64(x)))
                    .collect()
            })
            .collect();
        let header = vector_header(&["class_label", "subtype"], state.encoder.config.embed_dim);
        write_table(&dir.join("prototype_embeddings.csv"), &header, rows)?;
    }
    write_json(
        &dir.join("progress.json"),
        &serde_json::json!({ "epochs_done": state.epochs_done, "steps_done": state.steps_done }),
    )?;
    write_json(&dir.join("state.json"), state)
}

pub fn read_checkpoint(dir: &Path) -> AppResult<TrainState> {
    #[derive(Deserialize)]
    struct Version {
        version: u32,
    }
    let v: Version = read_json(&dir.join("version.json"))?;
    if v.version != CHECKPOINT_VERSION {
        return Err(AppError::format(dir, format!("checkpoint version {} is not supported", v.version)));
    }
    read_json(&dir.join("state.json"))
}

fn write_history(path: &Path, history: &[brainscl_core::contrastive::EpochRecord]) -> AppResult<()> {
    let rows = history
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                fmt_f64(r.total),
                fmt_f64(r.bce),
                fmt_f64(r.consistency),
                fmt_f64(r.contrastive),
                r.contrastive_steps.to_string(),
            ]
        })
        .collect();
    write_table(path, &["epoch", "total", "bce", "consistency", "contrastive", "contrastive_steps"], rows)
}

pub fn cmd_train(ctx: &Context) -> AppResult<()> {
    let spec = ctx.spec();
    let deps: &[&str] = if spec.name.uses_subtypes() { &["structures", "prototype"] } else { &["structures"] };
    let key = ctx.key("train", &(&ctx.cfg.encoder, trainer_for(spec.name, &ctx.cfg.trainer), ctx.cfg.prototype.features), deps)?;
    ctx.run_stage("train", &key, || {
        ctx.clean_fold_stage("train")?;
        let cohort = ctx.cohort()?;
        let folds = ctx.folds()?;
        for (f, fold) in folds.iter().enumerate() {
            let graphs = graphs_for(ctx, &cohort, &load_structures(ctx, f)?)?;
            let (assignments, prototypes) = if spec.name.uses_subtypes() {
                (Some(load_assignments(ctx, f)?), Some(load_prototypes(ctx, f)?))
            } else {
                (None, None)
            };
            let inputs = train_inputs(&fold.train, &cohort, &graphs, assignments.as_ref(), prototypes.as_ref())?;
            let (enc, tcfg) = fold_train_configs(ctx, f);
            let dir = ctx.fold_dir(f, "train");
            match brainscl_core::contrastive::train(&inputs, &enc, &tcfg) {
                Ok(out) => {
                    write_checkpoint(&dir.join("checkpoint"), &out.state, &enc)?;
                    write_history(&dir.join("history.csv"), &out.state.history)?;
                }
                Err(failure) => {
                    if !failure.snapshot.encoder.params.is_empty() {
                        write_checkpoint(&dir.join("checkpoint"), &failure.snapshot, &enc)?;
                        write_history(&dir.join("history.csv"), &failure.snapshot.history)?;
                    }
                    return Err(failure.error.into());
                }
            }
        }
        Ok(Some(ctx.stage_files("train", folds.len())?))
    })?;
    Ok(())
}

// ---------------------------------------------------------------- evaluate

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn metric_row(prefix: Vec<String>, m: &MetricEntry) -> Vec<String> {
    let mut r = prefix;
    r.extend([fmt_f64(m.acc), opt(m.auc), opt(m.sen), opt(m.spec)]);
    r
}

fn finite(x: f64) -> String {
    if x.is_finite() {
        fmt_f64(x)
    } else {
        String::new()
    }
}

pub const METRICS_HEADER: [&str; 8] = ["variant", "k", "seed", "fold", "acc", "auc", "sen", "spec"];

pub fn cmd_evaluate(ctx: &Context) -> AppResult<()> {
    let spec = ctx.spec();
    let key = ctx.key("evaluate", &ctx.cfg.eval.threshold, &["train"])?;
    let metrics_path = ctx.wd.path("metrics.csv");
    let summary_path = ctx.wd.path("metrics_summary.json");
    ctx.run_stage("evaluate", &key, || {
        ctx.clean_fold_stage("eval")?;
        let cohort = ctx.cohort()?;
        let folds = ctx.folds()?;
        let mut per = Vec::new();
        for (f, fold) in folds.iter().enumerate() {
            let graphs = graphs_for(ctx, &cohort, &load_structures(ctx, f)?)?;
            let state = read_checkpoint(&ctx.fold_dir(f, "train").join("checkpoint"))?;
            let scores = score(&state, &cohort, &fold.test, &graphs)?;
            let m = compute_metrics(&scores.y_true, &scores.y_score, ctx.cfg.eval.threshold)?;
            let dir = ctx.fold_dir(f, "eval");
            write_scores(&dir.join("scores.csv"), &scores)?;
            write_json(&dir.join("metrics.json"), &m)?;
            per.push(FoldMetrics { seed: ctx.seed(), fold: f, metrics: m });
        }
        let report = MetricReport::aggregate(spec, per);
        write_metrics_csv(&metrics_path, &report)?;
        write_json(&summary_path, &summary_json(&report))?;
        let mut files = vec![metrics_path.clone(), summary_path.clone()];
        for f in 0..folds.len() {
            files.extend(files_under(&ctx.fold_dir(f, "eval"))?);
        }
        Ok(Some(files))
    })?;
    Ok(())
}

fn write_scores(path: &Path, s: &Scores) -> AppResult<()> {
    let rows = s
        .subject_ids
        .iter()
        .zip(&s.y_true)
        .zip(&s.y_score)
        .map(|((id, y), p)| vec![id.clone(), label_str(*y), fmt_f64(*p)])
        .collect();
    write_table(path, &["subject_id", "label", "score"], rows)
}

/// Per-fold rows followed by `mean` and `std` rows.
pub fn write_metrics_csv(path: &Path, r: &MetricReport) -> AppResult<()> {
    let k = r.k.map(|k| k.to_string()).unwrap_or_default();
    let v = r.variant.as_str().to_string();
    let mut rows: Vec<Vec<String>> = r
        .per_fold
        .iter()
        .map(|fm| metric_row(vec![v.clone(), k.clone(), fm.seed.to_string(), fm.fold.to_string()], &fm.metrics))
        .collect();
    for (name, s) in [("mean", &r.mean), ("std", &r.std)] {
        rows.push(vec![
            v.clone(),
            k.clone(),
            String::new(),
            name.into(),
            finite(s.acc),
            finite(s.auc),
            finite(s.sen),
            finite(s.spec),
        ]);
    }
    write_table(path, &METRICS_HEADER, rows)
}

fn summary_json(r: &MetricReport) -> serde_json::Value {
    let s = |m: &brainscl_core::eval::MetricSummary| {
        serde_json::json!({
            "acc": m.acc.is_finite().then_some(m.acc),
            "auc": m.auc.is_finite().then_some(m.auc),
            "sen": m.sen.is_finite().then_some(m.sen),
            "spec": m.spec.is_finite().then_some(m.spec),
        })
    };
    serde_json::json!({
        "variant": r.variant,
        "k": r.k,
        "per_fold": r.per_fold,
        "mean": s(&r.mean),
        "std": s(&r.std),
    })
}

// ---------------------------------------------------------------- pipeline

/// Every stage in order; completed stages are reused unless `force`.
pub fn cmd_pipeline(ctx: &Context) -> AppResult<PathBuf> {
    cmd_ingest(ctx)?;
    cmd_structures(ctx)?;
    cmd_views(ctx)?;
    cmd_fuse(ctx)?;
    cmd_subtype(ctx)?;
    cmd_prototype(ctx)?;
    cmd_train(ctx)?;
    cmd_evaluate(ctx)?;
    Ok(ctx.wd.path("metrics.csv"))
}

// ---------------------------------------------------------------- ablation

/// Result of one (variant, seed, fold) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub spec: VariantSpec,
    pub seed: u64,
    pub fold: usize,
    pub result: Result<MetricEntry, String>,
}

/// Runs every spec on every (seed, fold). Jobs are independent and run on
/// `exec`; a failing cell is recorded and the others continue.
pub fn ablation_grid<E: Executor>(
    cohort: &Cohort,
    specs: &[VariantSpec],
    seeds: &[u64],
    cfg: &PipelineConfig,
    provider: Option<&dyn TextEmbeddingProvider>,
    exec: &E,
) -> AppResult<Vec<AblationCell>> {
    cfg.validate()?;
    cohort.require_both_labels()?;
    let mut jobs = Vec::new();
    for &seed in seeds {
        let folds = kfold_split(cohort, cfg.eval.folds, derive_seed(seed, "folds"))?;
        for (fi, fold) in folds.into_iter().enumerate() {
            jobs.push((seed, fi, fold));
        }
    }
    let cells = exec.map(jobs.len(), |j| {
        let (seed, fi, fold) = &jobs[j];
        let base = prepare_fold(cohort, *fi, fold, cfg, provider, *seed, &Sequential);
        specs
            .iter()
            .map(|&spec| {
                let result = match &base {
                    Ok(b) => run_variant_on_fold(cohort, b, spec, cfg).map(|o| o.metrics).map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                AblationCell { spec, seed: *seed, fold: *fi, result }
            })
            .collect::<Vec<_>>()
    });
    Ok(cells.into_iter().flatten().collect())
}

/// One row per spec, in spec order; failed specs keep their error.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub spec: VariantSpec,
    pub report: Option<MetricReport>,
    pub errors: Vec<String>,
}

pub fn ablation_rows(specs: &[VariantSpec], cells: &[AblationCell]) -> Vec<AblationRow> {
    specs
        .iter()
        .map(|&spec| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.spec == spec).collect();
            let errors: Vec<String> = mine
                .iter()
                .filter_map(|c| c.result.as_ref().err().map(|e| format!("seed {} fold {}: {e}", c.seed, c.fold)))
                .collect();
            let report = errors.is_empty().then(|| {
                let per = mine
                    .iter()
                    .map(|c| FoldMetrics { seed: c.seed, fold: c.fold, metrics: c.result.clone().expect("no errors") })
                    .collect();
                MetricReport::aggregate(spec, per)
            });
            AblationRow { spec, report, errors }
        })
        .collect()
}

pub const ABLATION_HEADER: [&str; 12] = [
    "method", "k", "acc_mean", "acc_std", "auc_mean", "auc_std", "sen_mean", "sen_std", "spec_mean", "spec_std",
    "status", "error",
];

pub fn write_ablation_table(path: &Path, rows: &[AblationRow]) -> AppResult<()> {
    let out = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.spec.name.as_str().to_string(), r.spec.k.map(|k| k.to_string()).unwrap_or_default()];
            match &r.report {
                Some(rep) => {
                    for (m, s) in [
                        (rep.mean.acc, rep.std.acc),
                        (rep.mean.auc, rep.std.auc),
                        (rep.mean.sen, rep.std.sen),
                        (rep.mean.spec, rep.std.spec),
                    ] {
                        v.push(finite(m));
                        v.push(finite(s));
                    }
                    v.push("ok".into());
                    v.push(String::new());
                }
                None => {
                    v.extend(std::iter::repeat_n(String::new(), 8));
                    v.push("failed".into());
                    v.push(r.errors.join("; "));
                }
            }
            v
        })
        .collect();
    write_table(path, &ABLATION_HEADER, out)
}

pub fn cmd_ablate(ctx: &Context) -> AppResult<Vec<AblationRow>> {
    let specs = ctx.cfg.ablation_specs()?;
    if ctx.cfg.ablation.seeds.is_empty() {
        return Err(AppError::Usage("ablation.seeds is empty".into()));
    }
    cmd_ingest(ctx)?;
    let pcfg = ctx.pipeline();
    let key = ctx.key(
        "ablate",
        &(&specs, &ctx.cfg.ablation.seeds, &pcfg, &ctx.cfg.text),
        &["ingest"],
    )?;
    let dir = ctx.wd.path("ablation");
    let mut rows_out = Vec::new();
    let ran = ctx.run_stage("ablate", &key, || {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        }
        let cohort = ctx.cohort()?;
        let provider = ctx.provider()?;
        let cells = ablation_grid(&cohort, &specs, &ctx.cfg.ablation.seeds, &pcfg, provider.as_deref(), &ctx.exec)?;
        let per_fold = cells
            .iter()
            .map(|c| {
                let prefix = vec![c.spec.name.as_str().into(), c.spec.k.map(|k| k.to_string()).unwrap_or_default(), c.seed.to_string(), c.fold.to_string()];
                match &c.result {
                    Ok(m) => {
                        let mut r = metric_row(prefix, m);
                        r.push(String::new());
                        r
                    }
                    Err(e) => {
                        let mut r = prefix;
                        r.extend([String::new(), String::new(), String::new(), String::new(), e.clone()]);
                        r
                    }
                }
            })
            .collect();
        write_table(&dir.join("folds.csv"), &["variant", "k", "seed", "fold", "acc", "auc", "sen", "spec", "error"], per_fold)?;
        let rows = ablation_rows(&specs, &cells);
        write_ablation_table(&dir.join("table.csv"), &rows)?;
        rows_out = rows;
        Ok(Some(files_under(&dir)?))
    })?;
    if !ran {
        log(ctx, format!("ablation table: {}", dir.join("table.csv").display()));
    }
    Ok(rows_out)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Deserialize)]
struct RoiRow {
    index: usize,
    name: String,
    #[serde(default)]
    network: Option<String>,
}

pub fn read_roi_table(path: &Path, m: usize) -> AppResult<Vec<RoiInfo>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| AppError::format(path, e))?;
    let mut out: Vec<RoiInfo> = (0..m).map(|i| RoiInfo { name: format!("roi{i}"), network: None }).collect();
    for row in r.deserialize::<RoiRow>() {
        let row = row.map_err(|e| AppError::format(path, e))?;
        if row.index >= m {
            return Err(AppError::format(path, format!("ROI index {} out of range for {m} ROIs", row.index)));
        }
        out[row.index] = RoiInfo { name: row.name, network: row.network.filter(|s| !s.is_empty()) };
    }
    Ok(out)
}

fn missing_for_report(ctx: &Context) -> Vec<String> {
    let mut missing = Vec::new();
    for stage in ["ingest", "structures", "views", "fuse", "subtype", "prototype", "train"] {
        match ctx.wd.manifest(stage) {
            None => missing.push(format!("stage {stage}")),
            Some(m) if m.skipped => missing.push(format!("stage {stage} (skipped for this variant)")),
            Some(_) => {}
        }
    }
    missing
}

pub fn cmd_report(ctx: &Context) -> AppResult<PathBuf> {
    let missing = missing_for_report(ctx);
    if !missing.is_empty() {
        return Err(AppError::MissingArtifacts(missing));
    }
    let top_n = ctx.cfg.report.top_n;
    let roi_hash = match &ctx.cfg.paths.roi_table {
        Some(p) => Some(hash_file(p)?),
        None => None,
    };
    let key = ctx.key("report", &(top_n, roi_hash), &["fuse", "subtype", "prototype", "train"])?;
    let out = ctx.wd.path("report");
    ctx.run_stage("report", &key, || {
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| AppError::io(&out, e))?;
        }
        let cohort = ctx.cohort()?;
        let lookup = match &ctx.cfg.paths.roi_table {
            Some(p) => Some(read_roi_table(p, cohort.m_rois())?),
            None => None,
        };
        let folds = ctx.folds()?;
        for (f, fold) in folds.iter().enumerate() {
            let dir = out.join(format!("seed-{}/fold-{f}", ctx.seed()));
            let protos = load_prototypes(ctx, f)?;
            let state = read_checkpoint(&ctx.fold_dir(f, "train").join("checkpoint"))?;
            for (i, p) in protos.prototypes.iter().enumerate() {
                let values = state.prototype_values.get(i).unwrap_or(&p.values);
                let ranked = top_regions(values, top_n.min(values.rows()), lookup.as_deref())?;
                let rows = ranked
                    .iter()
                    .map(|r| {
                        vec![
                            r.rank.to_string(),
                            r.roi_index.to_string(),
                            r.roi_name.clone().unwrap_or_default(),
                            r.network.clone().unwrap_or_default(),
                            fmt_f64(r.strength),
                        ]
                    })
                    .collect();
                let name = format!("top_regions/class-{}_subtype-{}.csv", label_str(p.class_label), p.subtype);
                write_table(&dir.join(name), &["rank", "roi_index", "roi_name", "network", "strength"], rows)?;
            }
            let fused = load_fused(ctx, f)?;
            let assignments = load_assignments(ctx, f)?;
            for (&l, fs_) in &fused {
                if fs_.subject_ids.len() < 3 {
                    continue;
                }
                let e = export_similarity_2d(&fs_.values, &fs_.subject_ids, assignments.get(&l).map(|a| &a.assignment))?;
                write_embedding(&dir.join(format!("embedding_2d/class-{}_fused.csv", label_str(l))), &e)?;
            }
            let graphs = graphs_for(ctx, &cohort, &load_structures(ctx, f)?)?;
            let ids = &fold.train;
            let vectors: Vec<Vec<f64>> =
                ids.iter().map(|id| Ok(state.encoder.encode(&graphs[id])?.g)).collect::<AppResult<_>>()?;
            let mut subtype_of = BTreeMap::new();
            for a in assignments.values() {
                for (id, &k) in &a.assignment {
                    subtype_of.insert(id.clone(), k);
                }
            }
            if ids.len() >= 3 {
                let e = export_embeddings_2d(&vectors, ids, Some(&subtype_of))?;
                write_embedding(&dir.join("embedding_2d/graph_embeddings_pca.csv"), &e)?;
                let rows = ids
                    .iter()
                    .zip(&vectors)
                    .map(|(id, v)| std::iter::once(id.clone()).chain(v.iter().map(|&x| fmt_f64(x))).collect())
                    .collect();
                let header = vector_header(&["subject_id"], vectors[0].len());
                write_table(&dir.join("embedding_2d/graph_embeddings.csv"), &header, rows)?;
            }
            let src = ctx.fold_dir(f, "structures").join("loss_trace.csv");
            write_bytes(&dir.join("loss/structure.csv"), &fs::read(&src).map_err(|e| AppError::io(&src, e))?)?;
            write_history(&dir.join("loss/train.csv"), &state.history)?;
        }
        Ok(Some(files_under(&out)?))
    })?;
    Ok(out)
}

fn write_embedding(path: &Path, e: &brainscl_core::eval::Embedding2d) -> AppResult<()> {
    let rows = e
        .subject_ids
        .iter()
        .zip(&e.coords)
        .zip(&e.subtype)
        .map(|((id, c), k)| vec![id.clone(), fmt_f64(c[0]), fmt_f64(c[1]), k.map(|k| k.to_string()).unwrap_or_default()])
        .collect();
    write_table(path, &["subject_id", "x", "y", "subtype"], rows)
}

