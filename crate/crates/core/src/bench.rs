//! Runs the (plan x seed x method x OOD set) grid and renders report tables.
//!
//! Each detector is fitted once per (ID corpus, seed) and reused for every
//! OOD set of the plan. Work runs on a rayon pool, but results are always
//! ordered by grid coordinate, so outputs do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Record, Split};
use crate::deskmodel::{self, TrainedModel, TrainingConfig};
use crate::error::{OodError, Result};
use crate::hash::fnv1a64_extend;
use crate::metrics::{aggregate, evaluate, AggregateCell};
use crate::pack::{read_manifest, read_pack, ClassifierHead, FeaturePack};
use crate::scenarios::{GroupLabel, ResolvedScenario, ScenarioPlan, DEFAULT_SEEDS};
use crate::scorers::{fit, score, Method, ScorerConfig};

pub const THREADS_ENV: &str = "OODBENCH_THREADS";
pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const REPORT_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Packs needed to evaluate one plan under one seed. `ood` is aligned with
/// `plan.ood`.
#[derive(Debug, Clone)]
pub struct PlanPacks {
    pub train: FeaturePack,
    pub calib: Option<FeaturePack>,
    pub id_test: FeaturePack,
    pub ood: Vec<FeaturePack>,
    pub head: ClassifierHead,
    /// Split name -> content digest, recorded in the run manifest.
    pub digests: BTreeMap<String, String>,
}

pub trait PackProvider: Sync {
    /// Short description stored in the run manifest.
    fn describe(&self) -> serde_json::Value;
    fn packs(&self, plan: &ScenarioPlan, seed: u64) -> Result<PlanPacks>;
}

/// FNV-1a-64 over the features and logits of a pack, as 16 hex digits.
pub fn pack_digest(pack: &FeaturePack) -> String {
    let mut h = fnv1a64_extend(crate::hash::FNV_OFFSET, pack.split_name().as_bytes());
    for v in pack.features().data() {
        h = fnv1a64_extend(h, &v.to_le_bytes());
    }
    if let Some(l) = pack.logits() {
        for v in l.data() {
            h = fnv1a64_extend(h, &v.to_le_bytes());
        }
    }
    format!("{h:016x}")
}

/// Trains the desk model on the ID corpus for each seed and exports packs.
pub struct DeskProvider<'a> {
    pub scenario: &'a ResolvedScenario,
    pub training: TrainingConfig,
}

fn non_empty<'a>(model: &TrainedModel, what: &str, records: impl Iterator<Item = &'a Record>) -> Vec<&'a Record> {
    let mut dropped = 0;
    let kept: Vec<&Record> = records
        .filter(|r| {
            let empty = model.featurizer.featurize_sparse(&r.text).1;
            dropped += usize::from(empty);
            !empty
        })
        .collect();
    if dropped > 0 {
        warn!("{what}: dropped {dropped} texts with no features");
    }
    kept
}

impl DeskProvider<'_> {
    pub fn train_model(&self, plan: &ScenarioPlan, seed: u64) -> Result<TrainedModel> {
        let corpus = self.scenario.corpus(&plan.id)?;
        let cfg = TrainingConfig {
            seed,
            ..self.training.clone()
        };
        deskmodel::train(corpus, &cfg)
    }
}

impl PackProvider for DeskProvider<'_> {
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "desk-model", "training": self.training })
    }

    fn packs(&self, plan: &ScenarioPlan, seed: u64) -> Result<PlanPacks> {
        let id = self.scenario.corpus(&plan.id)?;
        let model = self.train_model(plan, seed)?;
        info!(
            "{} seed {seed}: desk model selected epoch {} of {}",
            plan.id,
            model.selected_epoch,
            model.history.len()
        );
        let train = model.export_records("train", non_empty(&model, "train", id.split(Split::Train)))?;
        let calib = model.export_records("val", non_empty(&model, "val", id.split(Split::Val)))?;
        let id_test = model.export_records("test", non_empty(&model, "test", id.split(Split::Test)))?;
        let mut ood = Vec::with_capacity(plan.ood.len());
        for o in &plan.ood {
            let corpus = self.scenario.corpus(&o.set)?;
            let recs = non_empty(&model, &o.set, corpus.split(Split::Test));
            // OOD labels index another label space, so none are exported.
            ood.push(model.export_texts(&o.set, recs.iter().map(|r| r.text.as_str()))?);
        }
        let digests = std::iter::once(&train)
            .chain([&calib, &id_test])
            .chain(&ood)
            .map(|p| (p.split_name().to_string(), pack_digest(p)))
            .collect();
        Ok(PlanPacks {
            train,
            calib: Some(calib),
            id_test,
            ood,
            head: model.classifier_head()?,
            digests,
        })
    }
}

/// Packs produced elsewhere, laid out as `<root>/<id>/<seed>/` with splits
/// `train`, optional `val`, `test` and one split per OOD set name.
pub struct ExternalProvider {
    pub root: PathBuf,
}

/// Directory name for a corpus name: anything outside `[A-Za-z0-9._-]`
/// becomes `_`.
pub fn dir_component(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

impl ExternalProvider {
    pub fn pack_dir(&self, id: &str, seed: u64) -> PathBuf {
        self.root.join(dir_component(id)).join(seed.to_string())
    }
}

impl PackProvider for ExternalProvider {
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "external-pack", "root": self.root })
    }

    fn packs(&self, plan: &ScenarioPlan, seed: u64) -> Result<PlanPacks> {
        let dir = self.pack_dir(&plan.id, seed);
        let set = read_pack(&dir)?;
        let manifest = read_manifest(&dir)?;
        let head = set.require_head()?.clone();
        let ood = plan
            .ood
            .iter()
            .map(|o| set.require_split(&o.set).cloned())
            .collect::<Result<Vec<_>>>()?;
        let digests = manifest
            .splits
            .iter()
            .map(|s| (s.name.clone(), s.features.checksum.clone()))
            .collect();
        Ok(PlanPacks {
            train: set.require_split("train")?.clone(),
            calib: set.split("val").cloned(),
            id_test: set.require_split("test")?.clone(),
            ood,
            head,
            digests,
        })
    }
}

/// In-memory packs keyed by (ID name, seed).
pub struct StaticProvider {
    pub packs: BTreeMap<(String, u64), PlanPacks>,
}

impl PackProvider for StaticProvider {
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "in-memory" })
    }

    fn packs(&self, plan: &ScenarioPlan, seed: u64) -> Result<PlanPacks> {
        self.packs
            .get(&(plan.id.clone(), seed))
            .cloned()
            .ok_or_else(|| OodError::Config(format!("no packs for `{}` seed {seed}", plan.id)))
    }
}

/// Parses `2021..2025` (inclusive) or a comma list such as `1,5,9`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || OodError::Config(format!("cannot parse seeds `{text}`"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    let mut uniq = seeds.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if seeds.is_empty() || uniq.len() != seeds.len() {
        return Err(bad());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub methods: Vec<Method>,
    /// Shared hyperparameters; `method` is replaced per method.
    pub scorer: ScorerConfig,
    pub seeds: Vec<u64>,
    /// Worker cap; `None` reads `OODBENCH_THREADS`, then uses all cores.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            scorer: ScorerConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(OodError::Config("method list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(OodError::Config("seed list is empty".into()));
        }
        if self.threads == Some(0) {
            return Err(OodError::Config("thread count must be positive".into()));
        }
        self.scorer.validate()
    }

    fn thread_count(&self) -> Result<Option<usize>> {
        if let Some(n) = self.threads {
            return Ok(Some(n));
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(OodError::Config(format!("{THREADS_ENV}={v} is not a positive integer"))),
            },
            Err(_) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub id_set: String,
    pub ood_group: GroupLabel,
    pub ood_set: String,
    pub seed: u64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub fpr_at_95: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// A grid cell that could not be computed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub id_set: String,
    pub ood_set: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Auroc,
    AuprIn,
    FprAt95,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Auroc, Metric::AuprIn, Metric::FprAt95];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Auroc => "AUROC",
            Metric::AuprIn => "AUPR-IN",
            Metric::FprAt95 => "FPR@95",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::FprAt95
    }

    pub fn of(self, row: &EvalRow) -> f64 {
        match self {
            Metric::Auroc => row.auroc,
            Metric::AuprIn => row.aupr_in,
            Metric::FprAt95 => row.fpr_at_95,
        }
    }
}

/// Seed-aggregated metrics of one (method, ID, OOD) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub id_set: String,
    pub ood_group: GroupLabel,
    pub ood_set: String,
    pub auroc: AggregateCell,
    pub aupr_in: AggregateCell,
    pub fpr_at_95: AggregateCell,
    /// Highest mean AUROC among the methods for this (ID, OOD) pair.
    pub best_auroc: bool,
}

impl AggregateRow {
    pub fn cell(&self, metric: Metric) -> &AggregateCell {
        match metric {
            Metric::Auroc => &self.auroc,
            Metric::AuprIn => &self.aupr_in,
            Metric::FprAt95 => &self.fpr_at_95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<AggregateRow>,
    pub failures: Vec<CellFailure>,
}

/// (ID, OOD) pairs in first-seen order, with their group.
fn pairs_in_order(rows: &[EvalRow]) -> Vec<(String, String, GroupLabel)> {
    let mut out: Vec<(String, String, GroupLabel)> = Vec::new();
    for r in rows {
        if !out.iter().any(|(i, o, _)| *i == r.id_set && *o == r.ood_set) {
            out.push((r.id_set.clone(), r.ood_set.clone(), r.ood_group));
        }
    }
    out
}

fn methods_in_order(rows: &[EvalRow]) -> Vec<Method> {
    let mut out = Vec::new();
    for r in rows {
        if !out.contains(&r.method) {
            out.push(r.method);
        }
    }
    out
}

/// Index of the winning entry; ties go to the earliest.
fn best_index(values: &[f64], higher_is_better: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) if higher_is_better => v > values[b],
            Some(b) => v < values[b],
        };
        if better {
            best = Some(i);
        }
    }
    best
}

impl EvalReport {
    /// Aggregates raw rows. Row order defines the order of pairs and methods.
    pub fn from_rows(rows: Vec<EvalRow>, failures: Vec<CellFailure>) -> Result<Self> {
        let mut aggregates = Vec::new();
        for (id, ood, group) in pairs_in_order(&rows) {
            let start = aggregates.len();
            for m in methods_in_order(&rows) {
                let cell: Vec<&EvalRow> = rows
                    .iter()
                    .filter(|r| r.method == m && r.id_set == id && r.ood_set == ood)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let agg = |metric: Metric| aggregate(&cell.iter().map(|r| metric.of(r)).collect::<Vec<_>>());
                aggregates.push(AggregateRow {
                    method: m,
                    id_set: id.clone(),
                    ood_group: group,
                    ood_set: ood.clone(),
                    auroc: agg(Metric::Auroc)?,
                    aupr_in: agg(Metric::AuprIn)?,
                    fpr_at_95: agg(Metric::FprAt95)?,
                    best_auroc: false,
                });
            }
            let means: Vec<f64> = aggregates[start..].iter().map(|a| a.auroc.mean).collect();
            if let Some(b) = best_index(&means, true) {
                aggregates[start + b].best_auroc = true;
            }
        }
        Ok(Self {
            rows,
            aggregates,
            failures,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

type JobOutput = (Vec<EvalRow>, Vec<CellFailure>, BTreeMap<String, String>);

fn run_job(plan: &ScenarioPlan, seed: u64, provider: &dyn PackProvider, config: &RunConfig) -> JobOutput {
    let fail_all = |methods: &[Method], e: &OodError| -> Vec<CellFailure> {
        methods
            .iter()
            .flat_map(|&m| {
                plan.ood.iter().map(move |o| CellFailure {
                    method: m,
                    id_set: plan.id.clone(),
                    ood_set: o.set.clone(),
                    seed,
                    error: e.to_string(),
                })
            })
            .collect()
    };
    let packs = match provider.packs(plan, seed) {
        Ok(p) => p,
        Err(e) => {
            warn!("{} seed {seed}: {e}", plan.id);
            return (Vec::new(), fail_all(&config.methods, &e), BTreeMap::new());
        }
    };
    if packs.ood.len() != plan.ood.len() {
        let e = OodError::Config("provider returned the wrong number of OOD packs".into());
        return (Vec::new(), fail_all(&config.methods, &e), packs.digests);
    }

    let per_method: Vec<(Vec<EvalRow>, Vec<CellFailure>)> = config
        .methods
        .par_iter()
        .map(|&method| {
            let cfg = ScorerConfig {
                method,
                ..config.scorer.clone()
            };
            let fitted = fit(&cfg, &packs.train, &packs.head, packs.calib.as_ref())
                .and_then(|det| score(&det, &packs.id_test, &packs.head).map(|s| (det, s)));
            let (det, id_scores) = match fitted {
                Ok(x) => x,
                Err(e) => {
                    warn!("{method} on {} seed {seed}: {e}", plan.id);
                    return (Vec::new(), fail_all(&[method], &e));
                }
            };
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            for (entry, pack) in plan.ood.iter().zip(&packs.ood) {
                let outcome = score(&det, pack, &packs.head).and_then(|s| evaluate(&id_scores.scores, &s.scores));
                match outcome {
                    Ok(o) => rows.push(EvalRow {
                        method,
                        id_set: plan.id.clone(),
                        ood_group: entry.group,
                        ood_set: entry.set.clone(),
                        seed,
                        auroc: o.auroc,
                        aupr_in: o.aupr_in,
                        fpr_at_95: o.fpr_at_95,
                        n_id: o.n_id,
                        n_ood: o.n_ood,
                    }),
                    Err(e) => {
                        warn!("{method} on {} vs {} seed {seed}: {e}", plan.id, entry.set);
                        failures.push(CellFailure {
                            method,
                            id_set: plan.id.clone(),
                            ood_set: entry.set.clone(),
                            seed,
                            error: e.to_string(),
                        });
                    }
                }
            }
            (rows, failures)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_method {
        rows.extend(r);
        failures.extend(f);
    }
    (rows, failures, packs.digests)
}

/// Sort key that orders rows by plan, OOD set, method, then seed.
fn grid_order(plans: &[ScenarioPlan], config: &RunConfig) -> impl Fn(&str, &str, Method, u64) -> (usize, usize, usize, usize) {
    let plans = plans.to_vec();
    let methods = config.methods.clone();
    let seeds = config.seeds.clone();
    move |id, ood, m, seed| {
        let p = plans.iter().position(|p| p.id == id).unwrap_or(usize::MAX);
        let o = plans
            .get(p)
            .and_then(|p| p.ood.iter().position(|e| e.set == ood))
            .unwrap_or(usize::MAX);
        let mi = methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
        let si = seeds.iter().position(|&x| x == seed).unwrap_or(usize::MAX);
        (p, o, mi, si)
    }
}

/// Result of [`run`], with what is needed for the run manifest.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    /// `"<id>/<seed>"` -> split digests.
    pub digests: BTreeMap<String, BTreeMap<String, String>>,
}

/// Executes the full grid. Cell failures are collected rather than fatal.
pub fn run(plans: &[ScenarioPlan], provider: &dyn PackProvider, config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    if plans.is_empty() {
        return Err(OodError::Config("no plans to run".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in plans {
        if !seen.insert(&p.id) {
            return Err(OodError::Config(format!("ID corpus `{}` appears in two plans", p.id)));
        }
    }
    let jobs: Vec<(&ScenarioPlan, u64)> = plans
        .iter()
        .flat_map(|p| config.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let exec = || -> Vec<JobOutput> {
        jobs.par_iter()
            .map(|&(plan, seed)| run_job(plan, seed, provider, config))
            .collect()
    };
    let outputs = match config.thread_count()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| OodError::Config(format!("thread pool: {e}")))?
            .install(exec),
        None => exec(),
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut digests = BTreeMap::new();
    for ((plan, seed), (r, f, d)) in jobs.iter().zip(outputs) {
        rows.extend(r);
        failures.extend(f);
        digests.insert(format!("{}/{seed}", plan.id), d);
    }
    let key = grid_order(plans, config);
    rows.sort_by_key(|r| key(&r.id_set, &r.ood_set, r.method, r.seed));
    failures.sort_by_key(|f| key(&f.id_set, &f.ood_set, f.method, f.seed));
    Ok(RunOutcome {
        report: EvalReport::from_rows(rows, failures)?,
        digests,
    })
}

// ---------------------------------------------------------------------------
// Rendering and output files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableLayout {
    /// Methods as rows, OOD sets as columns (one ID corpus).
    MethodRows,
    /// (ID, OOD) pairs as rows, methods as columns.
    PairRows,
}

impl TableLayout {
    pub fn for_report(report: &EvalReport) -> Self {
        let ids: std::collections::BTreeSet<&str> = report.aggregates.iter().map(|a| a.id_set.as_str()).collect();
        if ids.len() <= 1 {
            TableLayout::MethodRows
        } else {
            TableLayout::PairRows
        }
    }
}

/// Bold flags for `metric`, one per aggregate; the winner of each (ID, OOD)
/// pair is the first method with the best mean.
fn winners(report: &EvalReport, metric: Metric) -> Vec<bool> {
    let mut flags = vec![false; report.aggregates.len()];
    let mut i = 0;
    while i < report.aggregates.len() {
        let a = &report.aggregates[i];
        let mut j = i;
        while j < report.aggregates.len()
            && report.aggregates[j].id_set == a.id_set
            && report.aggregates[j].ood_set == a.ood_set
        {
            j += 1;
        }
        let means: Vec<f64> = report.aggregates[i..j].iter().map(|x| x.cell(metric).mean).collect();
        if let Some(b) = best_index(&means, metric.higher_is_better()) {
            flags[i + b] = true;
        }
        i = j;
    }
    flags
}

/// Markdown table of percent-scaled `mean±std` cells, winners in bold.
pub fn render_table(report: &EvalReport, metric: Metric, layout: TableLayout) -> String {
    let flags = winners(report, metric);
    let cell = |idx: usize| {
        let text = report.aggregates[idx].cell(metric).percent_cell();
        if flags[idx] {
            format!("**{text}**")
        } else {
            text
        }
    };
    let find = |m: Method, id: &str, ood: &str| {
        report
            .aggregates
            .iter()
            .position(|a| a.method == m && a.id_set == id && a.ood_set == ood)
    };
    let mut pairs: Vec<(String, String, GroupLabel)> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for a in &report.aggregates {
        if !pairs.iter().any(|(i, o, _)| *i == a.id_set && *o == a.ood_set) {
            pairs.push((a.id_set.clone(), a.ood_set.clone(), a.ood_group));
        }
        if !methods.contains(&a.method) {
            methods.push(a.method);
        }
    }

    let mut out = String::new();
    match layout {
        TableLayout::MethodRows => {
            out.push_str("| Method |");
            for (_, ood, group) in &pairs {
                let _ = write!(out, " {ood} ({group}) |");
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(pairs.len()));
            out.push('\n');
            for &m in &methods {
                let _ = write!(out, "| {m} |");
                for (id, ood, _) in &pairs {
                    let text = find(m, id, ood).map_or_else(|| "n/a".to_string(), cell);
                    let _ = write!(out, " {text} |");
                }
                out.push('\n');
            }
        }
        TableLayout::PairRows => {
            out.push_str("| Shift | ID | OOD |");
            for m in &methods {
                let _ = write!(out, " {m} |");
            }
            out.push_str("\n|---|---|---|");
            out.push_str(&"---|".repeat(methods.len()));
            out.push('\n');
            let mut last_id: Option<&str> = None;
            for (id, ood, group) in &pairs {
                let shown = if last_id == Some(id.as_str()) { "" } else { id.as_str() };
                last_id = Some(id.as_str());
                let _ = write!(out, "| {group} | {shown} | {ood} |");
                for &m in &methods {
                    let text = find(m, id, ood).map_or_else(|| "n/a".to_string(), cell);
                    let _ = write!(out, " {text} |");
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Full `report.md`: one table per metric, then any failures.
pub fn render_report(report: &EvalReport, title: &str) -> String {
    let layout = TableLayout::for_report(report);
    let mut out = format!("# {title}\n");
    for metric in Metric::ALL {
        let note = if metric.higher_is_better() { "" } else { " Lower is better." };
        let _ = write!(
            out,
            "\n## {} (%)\n\nMean and standard deviation over seeds.{note}\n\n",
            metric.label()
        );
        out.push_str(&render_table(report, metric, layout));
    }
    if !report.failures.is_empty() {
        out.push_str("\n## Failed cells\n\n| Method | ID | OOD | Seed | Error |\n|---|---|---|---|---|\n");
        for f in &report.failures {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                f.method,
                f.id_set,
                f.ood_set,
                f.seed,
                f.error.replace('|', "\\|").replace('\n', " ")
            );
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct AggregateCsvRow {
    method: Method,
    id_set: String,
    ood_group: GroupLabel,
    ood_set: String,
    n_seeds: usize,
    auroc_mean: f64,
    auroc_std: f64,
    aupr_in_mean: f64,
    aupr_in_std: f64,
    fpr_at_95_mean: f64,
    fpr_at_95_std: f64,
    best_auroc: bool,
}

pub fn write_rows_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| OodError::Serde(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| OodError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| OodError::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| OodError::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| OodError::format(path, e.to_string())))
        .collect()
}

pub fn write_aggregate_csv(path: &Path, aggregates: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| OodError::Serde(e.to_string()))?;
    for a in aggregates {
        w.serialize(AggregateCsvRow {
            method: a.method,
            id_set: a.id_set.clone(),
            ood_group: a.ood_group,
            ood_set: a.ood_set.clone(),
            n_seeds: a.auroc.n_seeds,
            auroc_mean: a.auroc.mean,
            auroc_std: a.auroc.std,
            aupr_in_mean: a.aupr_in.mean,
            aupr_in_std: a.aupr_in.std,
            fpr_at_95_mean: a.fpr_at_95.mean,
            fpr_at_95_std: a.fpr_at_95.std,
            best_auroc: a.best_auroc,
        })
        .map_err(|e| OodError::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| OodError::io(path, e))
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    scenario: &'a str,
    config: &'a RunConfig,
    source: serde_json::Value,
    plans: &'a [ScenarioPlan],
    pack_digests: &'a BTreeMap<String, BTreeMap<String, String>>,
    n_rows: usize,
    failures: &'a [CellFailure],
}

/// Writes `rows.csv`, `aggregate.csv`, `report.md` and `manifest.json`.
pub fn write_outputs(
    out: &Path,
    scenario_name: &str,
    plans: &[ScenarioPlan],
    provider: &dyn PackProvider,
    config: &RunConfig,
    outcome: &RunOutcome,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| OodError::io(out, e))?;
    let report = &outcome.report;
    write_rows_csv(&out.join(ROWS_FILE), &report.rows)?;
    write_aggregate_csv(&out.join(AGGREGATE_FILE), &report.aggregates)?;
    let md = out.join(REPORT_FILE);
    fs::write(&md, render_report(report, scenario_name)).map_err(|e| OodError::io(&md, e))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        scenario: scenario_name,
        config,
        source: provider.describe(),
        plans,
        pack_digests: &outcome.digests,
        n_rows: report.rows.len(),
        failures: &report.failures,
    };
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| OodError::Serde(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| OodError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::scenarios::OodEntry;

    fn row(method: Method, ood: &str, seed: u64, auroc: f64) -> EvalRow {
        EvalRow {
            method,
            id_set: "ID".into(),
            ood_group: GroupLabel::Near,
            ood_set: ood.into(),
            seed,
            auroc,
            aupr_in: auroc,
            fpr_at_95: 1.0 - auroc,
            n_id: 10,
            n_ood: 10,
        }
    }

    #[test]
    fn aggregates_and_ties() {
        let rows = vec![
            row(Method::Msp, "A", 1, 0.742),
            row(Method::Energy, "A", 1, 0.742),
            row(Method::Msp, "B", 1, 0.5),
            row(Method::Energy, "B", 1, 0.6),
        ];
        let rep = EvalReport::from_rows(rows, Vec::new()).unwrap();
        assert_eq!(rep.aggregates.len(), 4);
        assert!(rep.aggregates[0].best_auroc);
        assert!(!rep.aggregates[1].best_auroc);
        assert!(rep.aggregates[3].best_auroc);
        let table = render_table(&rep, Metric::Auroc, TableLayout::MethodRows);
        assert!(table.contains("| MSP | **74.2±0.0** | 50.0±0.0 |"), "{table}");
        assert!(table.contains("| Energy | 74.2±0.0 | **60.0±0.0** |"), "{table}");
        // FPR: lower wins
        let fpr = render_table(&rep, Metric::FprAt95, TableLayout::MethodRows);
        assert!(fpr.contains("| Energy | 25.8±0.0 | **40.0±0.0** |"), "{fpr}");
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows: Vec<EvalRow> = (0..5).map(|s| row(Method::Knn, "A", 2021 + s, 0.7 + s as f64 * 0.01)).collect();
        let rep = EvalReport::from_rows(rows.clone(), Vec::new()).unwrap();
        let want = aggregate(&rows.iter().map(|r| r.auroc).collect::<Vec<_>>()).unwrap();
        assert_eq!(rep.aggregates[0].auroc, want);
    }

    fn toy_packs(shift: f32) -> PlanPacks {
        let make = |name: &str, offset: f32, n: usize| {
            let data: Vec<f32> = (0..n)
                .flat_map(|i| {
                    let c = (i % 2) as f32;
                    [1.0 + c + offset + i as f32 * 0.01, 2.0 - c + offset * 0.5, 0.5 + i as f32 * 0.02]
                })
                .collect();
            FeaturePack::new(name, Matrix::new(n, 3, data).unwrap(), 2).unwrap()
        };
        let head = ClassifierHead::new(Matrix::new(2, 3, vec![1.0, -1.0, 0.2, -1.0, 1.0, 0.1]).unwrap(), vec![0.5, 0.5]).unwrap();
        PlanPacks {
            train: make("train", 0.0, 20),
            calib: None,
            id_test: make("test", 0.0, 10),
            ood: vec![make("far", shift, 10)],
            head,
            digests: BTreeMap::new(),
        }
    }

    #[test]
    fn single_cell_and_failures() {
        let plan = ScenarioPlan {
            id: "ID".into(),
            ood: vec![OodEntry {
                group: GroupLabel::Far,
                set: "far".into(),
            }],
            seeds: vec![1],
            notes: String::new(),
        };
        let mut packs = BTreeMap::new();
        packs.insert(("ID".to_string(), 1), toy_packs(5.0));
        let provider = StaticProvider { packs };
        let cfg = RunConfig {
            methods: vec![Method::Energy],
            seeds: vec![1],
            threads: Some(2),
            ..Default::default()
        };
        let out = run(std::slice::from_ref(&plan), &provider, &cfg).unwrap();
        assert_eq!(out.report.rows.len(), 1);
        assert!(out.report.is_complete());

        // seed 2 has no packs: every cell of that job fails, seed 1 survives
        let cfg2 = RunConfig {
            methods: vec![Method::Energy, Method::Msp],
            seeds: vec![1, 2],
            ..cfg
        };
        let out = run(&[plan], &provider, &cfg2).unwrap();
        assert_eq!(out.report.rows.len(), 2);
        assert_eq!(out.report.failures.len(), 2);
        assert!(out.report.failures.iter().all(|f| f.seed == 2));
    }

    #[test]
    fn pair_layout_and_report() {
        let mut rows = vec![row(Method::Msp, "B", 1, 0.9), row(Method::Knn, "B", 1, 0.95)];
        let mut other = row(Method::Msp, "A", 1, 0.8);
        other.id_set = "B".into();
        rows.push(other);
        let rep = EvalReport::from_rows(rows, Vec::new()).unwrap();
        assert_eq!(TableLayout::for_report(&rep), TableLayout::PairRows);
        let t = render_table(&rep, Metric::Auroc, TableLayout::PairRows);
        assert!(t.starts_with("| Shift | ID | OOD | MSP | KNN |"), "{t}");
        assert!(t.contains("| Near | ID | B | 90.0±0.0 | **95.0±0.0** |"), "{t}");
        assert!(t.contains("| Near | B | A | **80.0±0.0** | n/a |"), "{t}");
        let md = render_report(&rep, "demo");
        assert!(md.contains("## FPR@95 (%)"));
    }

    #[test]
    fn rows_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(Method::Vim, "A", 7, 0.1 + 0.2), row(Method::Dice, "A", 7, 1.0 / 3.0)];
        let p = dir.path().join(ROWS_FILE);
        write_rows_csv(&p, &rows).unwrap();
        assert_eq!(read_rows_csv(&p).unwrap(), rows);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("2021..2025").unwrap(), DEFAULT_SEEDS.to_vec());
        assert_eq!(parse_seeds("3, 1").unwrap(), vec![3, 1]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn dir_component_sanitizes() {
        assert_eq!(dir_component("NC/I"), "NC_I");
        assert_eq!(dir_component("SST-2"), "SST-2");
    }
}
