//! Per-fold wiring of the stages, and the ablation variants on top of it.
//!
//! Every stage only sees the training split. The test split is touched by
//! the structure encoder (evaluation mode) and the trained classifier only.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cohort::{compute_pcc, Cohort, ConnectivityMatrix, Label};
use crate::contrastive::encoder::ConnectomeEncoderConfig;
use crate::contrastive::train::{train, ContrastMode, EpochRecord, TrainConfig, TrainInputs, TrainSample, TrainState};
use crate::error::{config, Error, Result};
use crate::eval::{compute_metrics, kfold_split, Fold, FoldMetrics, MetricEntry, MetricReport, VariantName, VariantSpec};
use crate::exec::Executor;
use crate::linalg::Matrix;
use crate::prototype::{build_prototype, AttentionMode, AttentionParams, PrototypeGraph, SampleGraph};
use crate::rng::derive_seed;
use crate::snf::{affinity_from_similarity, single_view, snf_fuse, FusedSimilarity, SnfConfig};
use crate::structure::{apply_structure_encoder, fit_structure_learner, structure_similarity, EncoderConfig, FitOptions, StructureFitResult};
use crate::subtype::{discover_subtypes, SubtypeAssignment, SubtypeConfig};
use crate::text::{embed_text, text_similarity, TextEmbeddingProvider};
use crate::view::{View, ViewSimilarity};

/// Which rows feed the prototypes and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFeatures {
    #[default]
    Structure,
    Pcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub mode: AttentionMode,
    pub features: NodeFeatures,
    /// Ranked regions per prototype in reports.
    pub top_regions: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self { mode: AttentionMode::ParameterFree, features: NodeFeatures::Structure, top_regions: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { folds: 5, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub structure: EncoderConfig,
    pub fit: FitOptions,
    pub snf: SnfConfig,
    pub subtype: SubtypeConfig,
    pub prototype: PrototypeConfig,
    pub encoder: ConnectomeEncoderConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.structure.validate()?;
        self.encoder.validate()?;
        self.trainer.validate()?;
        if self.subtype.k < 1 {
            return Err(config("subtype k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(config("eval threshold must lie in [0, 1]"));
        }
        if self.eval.folds < 2 {
            return Err(config("eval folds must be at least 2"));
        }
        if !(0.3..=0.8).contains(&self.snf.mu) || self.snf.iterations < 1 {
            return Err(config("snf mu must lie in [0.3, 0.8] and iterations be at least 1"));
        }
        Ok(())
    }
}

/// Seed for a named stage of one (seed, fold) job.
pub fn stage_seed(seed: u64, fold: usize, stage: &str) -> u64 {
    derive_seed(derive_seed(seed, &format!("fold-{fold}")), stage)
}

/// Learned structures: fitted on `train_ids`, applied to every subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureStage {
    pub fit: StructureFitResult,
    pub all: BTreeMap<String, ConnectivityMatrix>,
}

pub fn fit_structures<E: Executor>(
    cohort: &Cohort,
    train_ids: &[String],
    cfg: &PipelineConfig,
    seed: u64,
    exec: &E,
) -> Result<StructureStage> {
    let train = cohort.subset(train_ids)?;
    let enc = EncoderConfig { seed, ..cfg.structure.clone() };
    let fit = fit_structure_learner(&train, &enc, &cfg.fit, exec)?;
    let all = apply_structure_encoder(&fit.encoder, cohort.subjects(), exec)?;
    Ok(StructureStage { fit, all })
}

/// Both views of one class's training subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassViews {
    pub label: Label,
    pub subject_ids: Vec<String>,
    pub structure: ViewSimilarity,
    pub text: Option<ViewSimilarity>,
}

fn ids_of_class(cohort: &Cohort, ids: &[String], label: Label) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for id in ids {
        let s = cohort.get(id).ok_or_else(|| Error::Subject { subject: id.clone(), message: "not in cohort".into() })?;
        if s.class()? == label {
            out.push(id.clone());
        }
    }
    Ok(out)
}

pub fn build_views(
    cohort: &Cohort,
    train_ids: &[String],
    structures: &BTreeMap<String, ConnectivityMatrix>,
    provider: Option<&dyn TextEmbeddingProvider>,
) -> Result<Vec<ClassViews>> {
    let mut out = Vec::new();
    for label in Label::BOTH {
        let ids = ids_of_class(cohort, train_ids, label)?;
        if ids.is_empty() {
            continue;
        }
        let mats: Vec<Matrix> = ids
            .iter()
            .map(|id| {
                structures
                    .get(id)
                    .map(|c| c.values.clone())
                    .ok_or_else(|| Error::Subject { subject: id.clone(), message: "no learned structure".into() })
            })
            .collect::<Result<_>>()?;
        let structure = structure_similarity(&mats, &ids)?;
        let text = match provider {
            Some(p) => {
                let emb: Vec<Vec<f64>> =
                    ids.iter().map(|id| embed_text(cohort.get(id).expect("present"), p)).collect::<Result<_>>()?;
                Some(text_similarity(&emb, &ids)?)
            }
            None => None,
        };
        out.push(ClassViews { label, subject_ids: ids, structure, text });
    }
    Ok(out)
}

/// Views that feed subtype discovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    Both,
    TextOnly,
    StructureOnly,
}

impl FusionSource {
    pub fn for_variant(v: VariantName) -> Self {
        match v {
            VariantName::T => FusionSource::TextOnly,
            VariantName::G => FusionSource::StructureOnly,
            _ => FusionSource::Both,
        }
    }
}

pub fn fuse_views(views: &[ClassViews], snf: &SnfConfig, source: FusionSource) -> Result<BTreeMap<Label, FusedSimilarity>> {
    let mut out = BTreeMap::new();
    for cv in views {
        let text = || cv.text.as_ref().ok_or_else(|| config("the text view is required but no provider was configured"));
        let fused = match source {
            FusionSource::Both => {
                let mut affs = Vec::with_capacity(snf.views.len());
                for v in &snf.views {
                    let sim = match v {
                        View::Structure => &cv.structure,
                        View::Text => text()?,
                        View::Fused => return Err(config("the fused view cannot be an SNF input")),
                    };
                    affs.push(affinity_from_similarity(sim, snf)?);
                }
                snf_fuse(&affs, snf, &cv.subject_ids)?
            }
            FusionSource::TextOnly => {
                single_view(affinity_from_similarity(text()?, snf)?, View::Text, snf, &cv.subject_ids)
            }
            FusionSource::StructureOnly => {
                single_view(affinity_from_similarity(&cv.structure, snf)?, View::Structure, snf, &cv.subject_ids)
            }
        };
        out.insert(cv.label, fused);
    }
    Ok(out)
}

/// Node-feature matrix `G_i` of each subject.
pub fn node_features(
    cohort: &Cohort,
    structures: &BTreeMap<String, ConnectivityMatrix>,
    features: NodeFeatures,
) -> Result<BTreeMap<String, Matrix>> {
    let mut out = BTreeMap::new();
    for s in cohort.subjects() {
        let g = match features {
            NodeFeatures::Structure => structures
                .get(&s.id)
                .map(|c| c.values.clone())
                .ok_or_else(|| Error::Subject { subject: s.id.clone(), message: "no learned structure".into() })?,
            NodeFeatures::Pcc => compute_pcc(s)?.values,
        };
        out.insert(s.id.clone(), g);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStage {
    pub prototypes: Vec<PrototypeGraph>,
    pub attention: Option<AttentionParams>,
}

pub fn build_prototypes(
    assignments: &BTreeMap<Label, SubtypeAssignment>,
    graphs: &BTreeMap<String, Matrix>,
    mode: AttentionMode,
) -> Result<PrototypeStage> {
    let d = graphs.values().next().map(|g| g.cols()).ok_or_else(|| config("no graphs to build prototypes from"))?;
    let attention = (mode == AttentionMode::Learned).then(|| AttentionParams::identity(d));
    let mut prototypes = Vec::new();
    for (&label, a) in assignments {
        for k in 0..a.k {
            let members: Vec<SampleGraph> = a
                .members(k)
                .into_iter()
                .map(|id| {
                    let values = graphs
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| Error::Subject { subject: id.clone(), message: "no node features".into() })?;
                    Ok(SampleGraph { values, subject_id: id })
                })
                .collect::<Result<_>>()?;
            prototypes.push(build_prototype(&members, mode, attention.as_ref(), label, k)?);
        }
    }
    Ok(PrototypeStage { prototypes, attention })
}

/// Trainer settings implied by a variant.
pub fn trainer_for(variant: VariantName, base: &TrainConfig) -> TrainConfig {
    let mut t = base.clone();
    match variant {
        VariantName::S => {
            t.mode = ContrastMode::None;
            t.lambda_con = 0.0;
            t.lambda_cr = 0.0;
        }
        VariantName::Cl => t.mode = ContrastMode::SupervisedQueue,
        _ => t.mode = ContrastMode::Prototype,
    }
    t
}

pub fn attention_for(variant: VariantName, base: AttentionMode) -> AttentionMode {
    if variant == VariantName::M {
        AttentionMode::MeanOnly
    } else {
        base
    }
}

pub fn train_inputs(
    train_ids: &[String],
    cohort: &Cohort,
    graphs: &BTreeMap<String, Matrix>,
    assignments: Option<&BTreeMap<Label, SubtypeAssignment>>,
    prototypes: Option<&PrototypeStage>,
) -> Result<TrainInputs> {
    let mut samples = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        let s = cohort.get(id).ok_or_else(|| Error::Subject { subject: id.clone(), message: "not in cohort".into() })?;
        let label = s.class()?;
        let subtype = assignments.and_then(|a| a.get(&label)).and_then(|a| a.assignment.get(id).copied());
        let graph = graphs.get(id).cloned().ok_or_else(|| Error::Subject { subject: id.clone(), message: "no node features".into() })?;
        samples.push(TrainSample { id: id.clone(), graph, label, subtype });
    }
    let mut inputs = TrainInputs::new(samples);
    if let Some(p) = prototypes {
        inputs.prototypes = p.prototypes.clone();
        inputs.attention = p.attention.clone();
        if p.attention.is_some() {
            inputs.prototype_stacks = p
                .prototypes
                .iter()
                .map(|pg| pg.member_ids.iter().map(|id| graphs[id].clone()).collect())
                .collect();
        }
    }
    Ok(inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub subject_ids: Vec<String>,
    pub y_true: Vec<Label>,
    pub y_score: Vec<f64>,
}

pub fn score(state: &TrainState, cohort: &Cohort, ids: &[String], graphs: &BTreeMap<String, Matrix>) -> Result<Scores> {
    let mut y_true = Vec::with_capacity(ids.len());
    let mut y_score = Vec::with_capacity(ids.len());
    for id in ids {
        let s = cohort.get(id).ok_or_else(|| Error::Subject { subject: id.clone(), message: "not in cohort".into() })?;
        y_true.push(s.class()?);
        let g = graphs.get(id).ok_or_else(|| Error::Subject { subject: id.clone(), message: "no node features".into() })?;
        y_score.push(state.predict(g)?);
    }
    Ok(Scores { subject_ids: ids.to_vec(), y_true, y_score })
}

/// Variant-independent artifacts of one (seed, fold) job.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldBase {
    pub seed: u64,
    pub fold_index: usize,
    pub fold: Fold,
    pub structures: StructureStage,
    pub views: Vec<ClassViews>,
    pub graphs: BTreeMap<String, Matrix>,
}

pub fn prepare_fold<E: Executor>(
    cohort: &Cohort,
    fold_index: usize,
    fold: &Fold,
    cfg: &PipelineConfig,
    provider: Option<&dyn TextEmbeddingProvider>,
    seed: u64,
    exec: &E,
) -> Result<FoldBase> {
    let structures = fit_structures(cohort, &fold.train, cfg, stage_seed(seed, fold_index, "structure"), exec)?;
    let views = build_views(cohort, &fold.train, &structures.all, provider)?;
    let graphs = node_features(cohort, &structures.all, cfg.prototype.features)?;
    Ok(FoldBase { seed, fold_index, fold: fold.clone(), structures, views, graphs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub spec: VariantSpec,
    pub seed: u64,
    pub fold: usize,
    pub fused: Option<BTreeMap<Label, FusedSimilarity>>,
    pub assignments: Option<BTreeMap<Label, SubtypeAssignment>>,
    pub prototypes: Option<PrototypeStage>,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    pub scores: Scores,
    pub metrics: MetricEntry,
}

/// Runs the variant-specific stages on a prepared fold.
pub fn run_variant_on_fold(
    cohort: &Cohort,
    base: &FoldBase,
    spec: VariantSpec,
    cfg: &PipelineConfig,
) -> Result<FoldOutcome> {
    spec.validate()?;
    let (seed, f) = (base.seed, base.fold_index);
    let (fused, assignments, prototypes) = if spec.name.uses_subtypes() {
        let fused = fuse_views(&base.views, &cfg.snf, FusionSource::for_variant(spec.name))?;
        let sub_cfg = SubtypeConfig { k: spec.k.expect("validated"), ..cfg.subtype.clone() };
        let assignments = discover_subtypes(&fused, &sub_cfg, stage_seed(seed, f, "subtype"))?;
        let protos = build_prototypes(&assignments, &base.graphs, attention_for(spec.name, cfg.prototype.mode))?;
        (Some(fused), Some(assignments), Some(protos))
    } else {
        (None, None, None)
    };
    let inputs = train_inputs(&base.fold.train, cohort, &base.graphs, assignments.as_ref(), prototypes.as_ref())?;
    let enc = ConnectomeEncoderConfig { seed: stage_seed(seed, f, "encoder"), ..cfg.encoder.clone() };
    let tcfg = TrainConfig { seed: stage_seed(seed, f, "trainer"), ..trainer_for(spec.name, &cfg.trainer) };
    let outcome = train(&inputs, &enc, &tcfg)?;
    let scores = score(&outcome.state, cohort, &base.fold.test, &base.graphs)?;
    let metrics = compute_metrics(&scores.y_true, &scores.y_score, cfg.eval.threshold)?;
    Ok(FoldOutcome {
        spec,
        seed,
        fold: f,
        fused,
        assignments,
        prototypes,
        history: outcome.state.history.clone(),
        state: outcome.state,
        scores,
        metrics,
    })
}

/// Cross-validated runs of several variants sharing the per-fold structures
/// and views. Returns one report per spec, in input order, and the fold outcomes.
pub fn run_variants<E: Executor>(
    cohort: &Cohort,
    specs: &[VariantSpec],
    seeds: &[u64],
    cfg: &PipelineConfig,
    provider: Option<&dyn TextEmbeddingProvider>,
    exec: &E,
) -> Result<(Vec<MetricReport>, Vec<FoldOutcome>)> {
    if specs.is_empty() {
        return Err(config("no variants requested"));
    }
    if seeds.is_empty() {
        return Err(config("no seeds requested"));
    }
    cfg.validate()?;
    for s in specs {
        s.validate()?;
    }
    cohort.require_both_labels()?;
    let mut per: Vec<Vec<FoldMetrics>> = specs.iter().map(|_| Vec::new()).collect();
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let folds = kfold_split(cohort, cfg.eval.folds, derive_seed(seed, "folds"))?;
        for (fi, fold) in folds.iter().enumerate() {
            let base = prepare_fold(cohort, fi, fold, cfg, provider, seed, exec)?;
            for (si, &spec) in specs.iter().enumerate() {
                let out = run_variant_on_fold(cohort, &base, spec, cfg)?;
                per[si].push(FoldMetrics { seed, fold: fi, metrics: out.metrics });
                outcomes.push(out);
            }
        }
    }
    let reports = specs.iter().zip(per).map(|(&s, p)| MetricReport::aggregate(s, p)).collect();
    Ok((reports, outcomes))
}

pub fn run_variant<E: Executor>(
    cohort: &Cohort,
    spec: VariantSpec,
    seeds: &[u64],
    cfg: &PipelineConfig,
    provider: Option<&dyn TextEmbeddingProvider>,
    exec: &E,
) -> Result<MetricReport> {
    let (mut reports, _) = run_variants(cohort, &[spec], seeds, cfg, provider, exec)?;
    Ok(reports.remove(0))
}

/// Subtype discovery on a whole cohort without folds, as used for recovery checks.
pub fn discover_on_cohort<E: Executor>(
    cohort: &Cohort,
    cfg: &PipelineConfig,
    source: FusionSource,
    provider: Option<&dyn TextEmbeddingProvider>,
    seed: u64,
    exec: &E,
) -> Result<BTreeMap<Label, SubtypeAssignment>> {
    let ids: Vec<String> = cohort.subjects().iter().map(|s| s.id.clone()).collect();
    let structures = fit_structures(cohort, &ids, cfg, stage_seed(seed, 0, "structure"), exec)?;
    let views = build_views(cohort, &ids, &structures.all, provider)?;
    let fused = fuse_views(&views, &cfg.snf, source)?;
    discover_subtypes(&fused, &cfg.subtype, stage_seed(seed, 0, "subtype"))
}
