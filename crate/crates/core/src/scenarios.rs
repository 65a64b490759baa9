//! ID/OOD scenario construction from labelled corpora.
//!
//! Two scenario families are supported: class-held-out splits of one corpus
//! grouped into Near/Far/Distinct OOD sets (with an optional word-shuffled
//! copy of the corpus), and leave-one-in plans where each corpus in turn is
//! the in-distribution set and the rest are OOD.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_text_table, LabeledCorpus, Record, Split, TableFormat, TableSpec};
use crate::error::{OodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    Near,
    Far,
    Distinct,
    Semantic,
    Background,
}

impl GroupLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Near => "Near",
            GroupLabel::Far => "Far",
            GroupLabel::Distinct => "Distinct",
            GroupLabel::Semantic => "Semantic",
            GroupLabel::Background => "Background",
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupLabel {
    type Err = OodError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_end_matches("-ood") {
            "near" => Ok(GroupLabel::Near),
            "far" => Ok(GroupLabel::Far),
            "distinct" => Ok(GroupLabel::Distinct),
            "semantic" => Ok(GroupLabel::Semantic),
            "background" => Ok(GroupLabel::Background),
            other => Err(OodError::Config(format!("unknown OOD group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodEntry {
    pub group: GroupLabel,
    /// Name of the corpus whose test split is the OOD set.
    pub set: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioPlan {
    /// Name of the in-distribution corpus.
    pub id: String,
    pub ood: Vec<OodEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub notes: String,
}

impl ScenarioPlan {
    pub fn n_rows(&self) -> usize {
        self.ood.len()
    }
}

/// Indices of the `k` classes with most records; ties go to the lower index.
/// Returned in ascending index order.
pub fn most_popular_classes(corpus: &LabeledCorpus, k: usize) -> Result<Vec<usize>> {
    let counts = corpus.class_counts();
    if k == 0 || k >= counts.len() {
        return Err(OodError::Config(format!(
            "need 0 < k < {} classes, got {k}",
            counts.len()
        )));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

fn reindexed(corpus: &LabeledCorpus, classes: &[usize], split: Option<Split>) -> Result<LabeledCorpus> {
    let mut remap = vec![usize::MAX; corpus.n_classes()];
    for (new, &old) in classes.iter().enumerate() {
        remap[old] = new;
    }
    let records: Vec<Record> = corpus
        .records()
        .iter()
        .filter(|r| remap[r.label] != usize::MAX)
        .map(|r| Record {
            text: r.text.clone(),
            label: remap[r.label],
            split: split.unwrap_or(r.split),
        })
        .collect();
    let names = classes.iter().map(|&c| corpus.label_names()[c].clone()).collect();
    LabeledCorpus::new(records, names)
}

/// Partitions records by class membership.
///
/// ID labels are re-indexed densely in ascending original order and keep
/// their split tags; every OOD record is tagged `Test`.
pub fn split_by_classes(corpus: &LabeledCorpus, id_classes: &[usize]) -> Result<(LabeledCorpus, LabeledCorpus)> {
    let c = corpus.n_classes();
    if id_classes.is_empty() {
        return Err(OodError::Config("ID class set is empty".into()));
    }
    if let Some(&bad) = id_classes.iter().find(|&&k| k >= c) {
        return Err(OodError::UnknownClass(bad.to_string()));
    }
    let mut id: Vec<usize> = id_classes.to_vec();
    id.sort_unstable();
    id.dedup();
    if id.len() >= c {
        return Err(OodError::Config("ID classes must be a proper subset".into()));
    }
    let ood: Vec<usize> = (0..c).filter(|k| id.binary_search(k).is_err()).collect();
    let id_corpus = reindexed(corpus, &id, None)
        .map_err(|_| OodError::Empty("no records in the ID classes".into()))?;
    let ood_corpus = reindexed(corpus, &ood, Some(Split::Test))
        .map_err(|_| OodError::Empty("no records in the OOD classes".into()))?;
    Ok((id_corpus, ood_corpus))
}

/// Resolves class names to indices.
pub fn class_indices(corpus: &LabeledCorpus, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            corpus
                .class_index(n)
                .ok_or_else(|| OodError::UnknownClass(n.clone()))
        })
        .collect()
}

/// Word-shuffle corruption over every category.
pub fn shuffle_corrupt(corpus: &LabeledCorpus, seed: u64) -> Result<LabeledCorpus> {
    shuffle_corrupt_classes(corpus, seed, None)
}

/// Pools all whitespace tokens of each category, permutes them with a
/// generator seeded by `seed`, and deals them back out so that every record
/// keeps its token count. Categories outside `only` are left untouched.
/// Tokens are re-joined with single spaces.
pub fn shuffle_corrupt_classes(corpus: &LabeledCorpus, seed: u64, only: Option<&[usize]>) -> Result<LabeledCorpus> {
    if corpus.is_empty() {
        return Err(OodError::Empty("cannot corrupt an empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = corpus.records().to_vec();
    for class in 0..corpus.n_classes() {
        if only.is_some_and(|o| !o.contains(&class)) {
            continue;
        }
        let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == class).collect();
        let lengths: Vec<usize> = members
            .iter()
            .map(|&i| records[i].text.split_whitespace().count())
            .collect();
        let mut pool: Vec<String> = members
            .iter()
            .flat_map(|&i| records[i].text.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        pool.shuffle(&mut rng);
        let mut tokens = pool.into_iter();
        for (&i, &len) in members.iter().zip(&lengths) {
            let chunk: Vec<String> = tokens.by_ref().take(len).collect();
            records[i].text = chunk.join(" ");
        }
    }
    LabeledCorpus::new(records, corpus.label_names().to_vec())
}

/// One plan per corpus: it is ID, all the others are OOD.
pub fn leave_one_in(names: &[String], group: GroupLabel, seeds: &[u64]) -> Result<Vec<ScenarioPlan>> {
    if names.len() < 2 {
        return Err(OodError::Config(format!(
            "leave-one-in needs at least 2 corpora, got {}",
            names.len()
        )));
    }
    Ok(names
        .iter()
        .map(|id| ScenarioPlan {
            id: id.clone(),
            ood: names
                .iter()
                .filter(|n| *n != id)
                .map(|n| OodEntry {
                    group,
                    set: n.clone(),
                })
                .collect(),
            seeds: seeds.to_vec(),
            notes: format!("{group} shift, leave-one-in"),
        })
        .collect())
}

/// Uniform sample of `n` records without replacement, original order kept.
pub fn subsample(corpus: &LabeledCorpus, n: usize, seed: u64) -> Result<LabeledCorpus> {
    if n == 0 {
        return Err(OodError::Config("subsample size must be positive".into()));
    }
    if n > corpus.len() {
        return Err(OodError::Config(format!(
            "cannot take {n} of {} records",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    let records = picked.into_iter().map(|i| corpus.records()[i].clone()).collect();
    LabeledCorpus::new(records, corpus.label_names().to_vec())
}

// ---------------------------------------------------------------------------
// Scenario files
// ---------------------------------------------------------------------------

pub const DEFAULT_SEEDS: [u64; 5] = [2021, 2022, 2023, 2024, 2025];

/// A corpus read from one or more table files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub name: String,
    /// Single file; split tags come from `split_column` or `default_split`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Per-split files, overriding any split column.
    #[serde(default)]
    pub files: BTreeMap<Split, PathBuf>,
    #[serde(default)]
    pub format: Option<TableFormat>,
    #[serde(flatten)]
    pub table: TableSpec,
    /// Expected `[train, val, test]` record counts.
    #[serde(default)]
    pub expected_sizes: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum DeriveOp {
    /// Keep the given (or `top_k` most popular) classes.
    IdClasses {
        #[serde(default)]
        top_k: Option<usize>,
        #[serde(default)]
        classes: Vec<String>,
    },
    /// Keep every class except the ID ones, as a test-only set.
    OodClasses {
        #[serde(default)]
        top_k: Option<usize>,
        #[serde(default)]
        classes: Vec<String>,
    },
    Shuffle {
        seed: u64,
        /// Restrict shuffling to these classes (or the `top_k` most popular).
        #[serde(default)]
        only_top_k: Option<usize>,
    },
    Subsample { n: usize, seed: u64 },
    /// All records of `from` plus `with`, tagged as test.
    Concat { with: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeriveConfig {
    pub name: String,
    pub from: String,
    #[serde(flatten)]
    pub op: DeriveOp,
    #[serde(default)]
    pub expected_sizes: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub id: String,
    pub ood: Vec<OodEntry>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneInConfig {
    pub sets: Vec<String>,
    pub group: GroupLabel,
}

/// Run-level overrides that may live in the scenario file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default)]
    pub scorer: Option<toml::Table>,
    #[serde(default)]
    pub training: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, rename = "corpus")]
    pub corpora: Vec<SourceConfig>,
    #[serde(default)]
    pub derive: Vec<DeriveConfig>,
    #[serde(default)]
    pub plan: Vec<PlanConfig>,
    #[serde(default)]
    pub leave_one_in: Vec<LeaveOneInConfig>,
    #[serde(default)]
    pub run: RunSection,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| OodError::Config(format!("scenario file: {e}")))?;
        if cfg.seeds.is_empty() {
            return Err(OodError::Config("seed list is empty".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OodError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// All plans, explicit ones first, without touching any data.
    pub fn plans(&self) -> Result<Vec<ScenarioPlan>> {
        let mut plans: Vec<ScenarioPlan> = self
            .plan
            .iter()
            .map(|p| ScenarioPlan {
                id: p.id.clone(),
                ood: p.ood.clone(),
                seeds: self.seeds.clone(),
                notes: p.notes.clone(),
            })
            .collect();
        for l in &self.leave_one_in {
            plans.extend(leave_one_in(&l.sets, l.group, &self.seeds)?);
        }
        if plans.is_empty() {
            return Err(OodError::Config("scenario defines no plans".into()));
        }
        for p in &plans {
            if p.ood.is_empty() {
                return Err(OodError::Config(format!("plan for `{}` has no OOD sets", p.id)));
            }
            if p.ood.iter().any(|o| o.set == p.id) {
                return Err(OodError::Config(format!("`{}` is both ID and OOD", p.id)));
            }
        }
        Ok(plans)
    }
}

fn check_sizes(name: &str, corpus: &LabeledCorpus, expected: Option<[usize; 3]>) -> Result<()> {
    let Some([tr, va, te]) = expected else {
        return Ok(());
    };
    let got = [
        corpus.count(Split::Train),
        corpus.count(Split::Val),
        corpus.count(Split::Test),
    ];
    if got != [tr, va, te] {
        return Err(OodError::Config(format!(
            "corpus `{name}` has train/val/test sizes {got:?}, expected {:?}",
            [tr, va, te]
        )));
    }
    Ok(())
}

fn load_source(src: &SourceConfig, base: &Path) -> Result<LabeledCorpus> {
    let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    let fmt_of = |p: &Path| src.format.unwrap_or_else(|| TableFormat::from_path(p));
    let corpus = match (&src.path, src.files.is_empty()) {
        (Some(path), true) => {
            let p = resolve(path);
            read_text_table(&p, fmt_of(&p), &src.table)?
        }
        (None, false) => {
            let mut acc: Option<LabeledCorpus> = None;
            for (&split, path) in &src.files {
                let p = resolve(path);
                let spec = TableSpec {
                    split_column: None,
                    default_split: split,
                    ..src.table.clone()
                };
                let part = read_text_table(&p, fmt_of(&p), &spec)?;
                acc = Some(match acc {
                    Some(a) => a.concat(&part),
                    None => part,
                });
            }
            acc.expect("files is non-empty")
        }
        _ => {
            return Err(OodError::Config(format!(
                "corpus `{}` needs exactly one of `path` or `files`",
                src.name
            )))
        }
    };
    check_sizes(&src.name, &corpus, src.expected_sizes)?;
    Ok(corpus)
}

fn resolve_classes(corpus: &LabeledCorpus, top_k: Option<usize>, classes: &[String]) -> Result<Vec<usize>> {
    match (top_k, classes.is_empty()) {
        (Some(k), true) => most_popular_classes(corpus, k),
        (None, false) => class_indices(corpus, classes),
        _ => Err(OodError::Config(
            "class selection needs exactly one of `top_k` or `classes`".into(),
        )),
    }
}

pub fn apply_derive(corpus: &LabeledCorpus, op: &DeriveOp, lookup: &BTreeMap<String, LabeledCorpus>) -> Result<LabeledCorpus> {
    match op {
        DeriveOp::IdClasses { top_k, classes } => {
            let ids = resolve_classes(corpus, *top_k, classes)?;
            Ok(split_by_classes(corpus, &ids)?.0)
        }
        DeriveOp::OodClasses { top_k, classes } => {
            let ids = resolve_classes(corpus, *top_k, classes)?;
            Ok(split_by_classes(corpus, &ids)?.1)
        }
        DeriveOp::Shuffle { seed, only_top_k } => {
            let only = only_top_k.map(|k| most_popular_classes(corpus, k)).transpose()?;
            shuffle_corrupt_classes(corpus, *seed, only.as_deref())
        }
        DeriveOp::Subsample { n, seed } => subsample(corpus, *n, *seed),
        DeriveOp::Concat { with } => {
            let mut acc = corpus.clone();
            for name in with {
                let other = lookup
                    .get(name)
                    .ok_or_else(|| OodError::Config(format!("unknown corpus `{name}`")))?;
                acc = acc.concat(other);
            }
            Ok(acc.retagged(Split::Test))
        }
    }
}

/// Scenario with every corpus materialized.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub name: String,
    pub corpora: BTreeMap<String, LabeledCorpus>,
    pub plans: Vec<ScenarioPlan>,
}

impl ResolvedScenario {
    pub fn corpus(&self, name: &str) -> Result<&LabeledCorpus> {
        self.corpora
            .get(name)
            .ok_or_else(|| OodError::Config(format!("unknown corpus `{name}`")))
    }
}

/// Loads sources (paths relative to `base`), applies derivations in order
/// and checks that every plan refers to existing corpora.
pub fn resolve(config: &ScenarioConfig, base: &Path) -> Result<ResolvedScenario> {
    let mut corpora = BTreeMap::new();
    for src in &config.corpora {
        if corpora.contains_key(&src.name) {
            return Err(OodError::Config(format!("duplicate corpus `{}`", src.name)));
        }
        corpora.insert(src.name.clone(), load_source(src, base)?);
    }
    for d in &config.derive {
        if corpora.contains_key(&d.name) {
            return Err(OodError::Config(format!("duplicate corpus `{}`", d.name)));
        }
        let from = corpora
            .get(&d.from)
            .ok_or_else(|| OodError::Config(format!("`{}` derives from unknown `{}`", d.name, d.from)))?;
        let derived = apply_derive(from, &d.op, &corpora)?;
        check_sizes(&d.name, &derived, d.expected_sizes)?;
        corpora.insert(d.name.clone(), derived);
    }
    let plans = config.plans()?;
    for p in &plans {
        let id = corpora
            .get(&p.id)
            .ok_or_else(|| OodError::Config(format!("plan references unknown corpus `{}`", p.id)))?;
        if id.count(Split::Train) == 0 {
            return Err(OodError::Config(format!("ID corpus `{}` has no train split", p.id)));
        }
        for o in &p.ood {
            if !corpora.contains_key(&o.set) {
                return Err(OodError::Config(format!("plan references unknown corpus `{}`", o.set)));
            }
        }
    }
    Ok(ResolvedScenario {
        name: config.name.clone(),
        corpora,
        plans,
    })
}
