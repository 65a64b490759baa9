//! Feature packs: the on-disk contract between a classifier runtime and the
//! scoring core.
//!
//! A pack directory holds `manifest.json` plus one [`container`] file per
//! matrix. Split `i` is stored as `split-{i:03}.features.oodm` (f32, N×D),
//! optionally `split-{i:03}.logits.oodm` (f32, N×C) and
//! `split-{i:03}.labels.oodm` (u32, N×1). A classification head is stored as
//! `head.weight.oodm` (f32, C×D) and `head.bias.oodm` (f32, C×1). Split names
//! live only in the manifest, so they may contain any characters.

pub mod container;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{OodError, Result};
use crate::matrix::Matrix;
use container::{Payload, RawMatrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// One dataset split as seen by the scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    split_name: String,
    features: Matrix,
    logits: Option<Matrix>,
    labels: Option<Vec<u32>>,
    n_classes: usize,
    provenance: String,
}

impl FeaturePack {
    pub fn new(split_name: impl Into<String>, features: Matrix, n_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(OodError::Empty("pack has no rows".into()));
        }
        if features.cols() == 0 {
            return Err(OodError::Invalid("feature dimension must be at least 1".into()));
        }
        if n_classes < 2 {
            return Err(OodError::Invalid(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        features.check_finite("features")?;
        Ok(Self {
            split_name: split_name.into(),
            features,
            logits: None,
            labels: None,
            n_classes,
            provenance: String::new(),
        })
    }

    pub fn with_logits(mut self, logits: Matrix) -> Result<Self> {
        if logits.rows() != self.features.rows() || logits.cols() != self.n_classes {
            return Err(OodError::Dimension(format!(
                "logits are {}x{}, expected {}x{}",
                logits.rows(),
                logits.cols(),
                self.features.rows(),
                self.n_classes
            )));
        }
        logits.check_finite("logits")?;
        self.logits = Some(logits);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.features.rows() {
            return Err(OodError::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                self.features.rows()
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.n_classes)
        {
            return Err(OodError::Invalid(format!(
                "label {l} at row {i} is not below n_classes={}",
                self.n_classes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn renamed(mut self, split_name: impl Into<String>) -> Self {
        self.split_name = split_name.into();
        self
    }

    pub fn split_name(&self) -> &str {
        &self.split_name
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn logits(&self) -> Option<&Matrix> {
        self.logits.as_ref()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sub-pack with the given rows, keeping logits and labels aligned.
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeaturePack> {
        let mut out = FeaturePack::new(
            self.split_name.clone(),
            self.features.select_rows(indices),
            self.n_classes,
        )?
        .with_provenance(self.provenance.clone());
        if let Some(l) = &self.logits {
            out = out.with_logits(l.select_rows(indices))?;
        }
        if let Some(l) = &self.labels {
            out = out.with_labels(indices.iter().map(|&i| l[i]).collect())?;
        }
        Ok(out)
    }
}

/// Final linear layer of the classifier: `z = W h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weight: Matrix,
    bias: Vec<f32>,
}

impl ClassifierHead {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(OodError::Dimension(format!(
                "head weight has {} rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        if weight.rows() < 2 || weight.cols() == 0 {
            return Err(OodError::Invalid(format!(
                "head must be at least 2x1, got {}x{}",
                weight.rows(),
                weight.cols()
            )));
        }
        weight.check_finite("head weight")?;
        if let Some(index) = bias.iter().position(|v| !v.is_finite()) {
            return Err(OodError::NonFinite {
                what: "head bias".into(),
                index,
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// `W h + b` accumulated in 64 bits.
    pub fn logits_f64(&self, h: &[f64]) -> Vec<f64> {
        debug_assert_eq!(h.len(), self.dim());
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(w, &b)| {
                w.iter()
                    .zip(h)
                    .map(|(&wi, &hi)| f64::from(wi) * hi)
                    .sum::<f64>()
                    + f64::from(b)
            })
            .collect()
    }

    pub fn check_pack(&self, pack: &FeaturePack) -> Result<()> {
        if pack.dim() != self.dim() {
            return Err(OodError::Dimension(format!(
                "pack `{}` has D={}, head expects D={}",
                pack.split_name(),
                pack.dim(),
                self.dim()
            )));
        }
        if pack.n_classes() != self.n_classes() {
            return Err(OodError::Dimension(format!(
                "pack `{}` has C={}, head has C={}",
                pack.split_name(),
                pack.n_classes(),
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Applies the head to every row of `features`, rounding to f32.
    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.dim() {
            return Err(OodError::Dimension(format!(
                "features have D={}, head expects D={}",
                features.cols(),
                self.dim()
            )));
        }
        let mut data = Vec::with_capacity(features.rows() * self.n_classes());
        for i in 0..features.rows() {
            data.extend(self.logits_f64(&features.row_f64(i)).iter().map(|&z| z as f32));
        }
        Matrix::new(features.rows(), self.n_classes(), data)
    }

    /// Largest absolute difference between stored logits and `W h + b`.
    /// Packs are considered consistent when it is at most [`LOGIT_TOLERANCE`].
    pub fn max_logit_deviation(&self, pack: &FeaturePack) -> Result<Option<f64>> {
        self.check_pack(pack)?;
        let Some(logits) = pack.logits() else {
            return Ok(None);
        };
        let mut worst = 0.0f64;
        for i in 0..pack.n_rows() {
            let z = self.logits_f64(&pack.features().row_f64(i));
            for (a, &b) in z.iter().zip(logits.row(i)) {
                worst = worst.max((a - f64::from(b)).abs());
            }
        }
        Ok(Some(worst))
    }
}

/// Allowed gap between stored logits and `W h + b` recomputed from f32 storage.
pub const LOGIT_TOLERANCE: f64 = 1e-4;

/// All splits of one pack directory plus the optional head.
#[derive(Debug, Clone, PartialEq)]
pub struct PackSet {
    pub splits: Vec<FeaturePack>,
    pub head: Option<ClassifierHead>,
}

impl PackSet {
    pub fn split(&self, name: &str) -> Option<&FeaturePack> {
        self.splits.iter().find(|p| p.split_name() == name)
    }

    pub fn require_split(&self, name: &str) -> Result<&FeaturePack> {
        self.split(name).ok_or_else(|| {
            OodError::Invalid(format!(
                "split `{name}` not in pack (have: {})",
                self.splits
                    .iter()
                    .map(FeaturePack::split_name)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
    }

    pub fn require_head(&self) -> Result<&ClassifierHead> {
        self.head
            .as_ref()
            .ok_or_else(|| OodError::Invalid("pack has no classifier head".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub rows: u64,
    pub cols: u64,
    /// FNV-1a 64 of the payload, 16 lowercase hex digits.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub rows: u64,
    #[serde(default)]
    pub provenance: String,
    pub features: FileEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub weight: FileEntry,
    pub bias: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackManifest {
    pub format_version: u32,
    pub d_feature: u64,
    pub n_classes: u64,
    pub splits: Vec<SplitEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadEntry>,
}

fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

fn write_entry(dir: &Path, file: String, rows: usize, cols: usize, payload: &Payload) -> Result<FileEntry> {
    let checksum = container::write_file(&dir.join(&file), rows as u64, cols as u64, payload)?;
    Ok(FileEntry {
        file,
        rows: rows as u64,
        cols: cols as u64,
        checksum: checksum_hex(checksum),
    })
}

/// Writes `packs` (and `head`) into `dir`, creating it if needed.
///
/// All packs must share D and C. Existing pack files in `dir` are overwritten.
pub fn write_pack(
    dir: &Path,
    packs: &[FeaturePack],
    head: Option<&ClassifierHead>,
) -> Result<PackManifest> {
    let first = packs
        .first()
        .ok_or_else(|| OodError::Empty("no splits to write".into()))?;
    let (d, c) = (first.dim(), first.n_classes());
    for p in packs {
        if p.dim() != d || p.n_classes() != c {
            return Err(OodError::Dimension(format!(
                "split `{}` is D={},C={} but first split is D={d},C={c}",
                p.split_name(),
                p.dim(),
                p.n_classes()
            )));
        }
    }
    let mut names: Vec<&str> = packs.iter().map(FeaturePack::split_name).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(OodError::Invalid("duplicate split names".into()));
    }
    if let Some(h) = head {
        h.check_pack(first)?;
    }
    fs::create_dir_all(dir).map_err(|e| OodError::io(dir, e))?;

    let mut splits = Vec::with_capacity(packs.len());
    for (i, p) in packs.iter().enumerate() {
        let n = p.n_rows();
        let features = write_entry(
            dir,
            format!("split-{i:03}.features.oodm"),
            n,
            d,
            &Payload::F32(p.features().data().to_vec()),
        )?;
        let logits = p
            .logits()
            .map(|l| {
                write_entry(
                    dir,
                    format!("split-{i:03}.logits.oodm"),
                    n,
                    c,
                    &Payload::F32(l.data().to_vec()),
                )
            })
            .transpose()?;
        let labels = p
            .labels()
            .map(|l| {
                write_entry(
                    dir,
                    format!("split-{i:03}.labels.oodm"),
                    n,
                    1,
                    &Payload::U32(l.to_vec()),
                )
            })
            .transpose()?;
        splits.push(SplitEntry {
            name: p.split_name().to_string(),
            rows: n as u64,
            provenance: p.provenance().to_string(),
            features,
            logits,
            labels,
        });
    }
    let head = head
        .map(|h| -> Result<HeadEntry> {
            Ok(HeadEntry {
                weight: write_entry(
                    dir,
                    "head.weight.oodm".into(),
                    c,
                    d,
                    &Payload::F32(h.weight().data().to_vec()),
                )?,
                bias: write_entry(dir, "head.bias.oodm".into(), c, 1, &Payload::F32(h.bias().to_vec()))?,
            })
        })
        .transpose()?;

    let manifest = PackManifest {
        format_version: FORMAT_VERSION,
        d_feature: d as u64,
        n_classes: c as u64,
        splits,
        head,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn write_manifest(dir: &Path, manifest: &PackManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text =
        serde_json::to_string_pretty(manifest).map_err(|e| OodError::Serde(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| OodError::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<PackManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(OodError::ManifestMissing(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| OodError::io(&path, e))?;
    let manifest: PackManifest =
        serde_json::from_str(&text).map_err(|e| OodError::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(OodError::format(
            &path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Reads one file entry and checks it against the manifest's expectations.
fn read_entry(dir: &Path, entry: &FileEntry, rows: u64, cols: u64) -> Result<RawMatrix> {
    let path: PathBuf = dir.join(&entry.file);
    if !path.is_file() {
        return Err(OodError::format(&path, "file referenced by manifest is missing"));
    }
    let (raw, checksum) = container::read_file(&path)?;
    if raw.rows != entry.rows || raw.cols != entry.cols {
        return Err(OodError::HeaderMismatch {
            path,
            reason: format!(
                "header says {}x{}, manifest says {}x{}",
                raw.rows, raw.cols, entry.rows, entry.cols
            ),
        });
    }
    if entry.rows != rows || entry.cols != cols {
        return Err(OodError::HeaderMismatch {
            path,
            reason: format!(
                "manifest entry is {}x{}, expected {rows}x{cols}",
                entry.rows, entry.cols
            ),
        });
    }
    if checksum_hex(checksum) != entry.checksum.to_ascii_lowercase() {
        return Err(OodError::Checksum {
            path,
            expected: u64::from_str_radix(&entry.checksum, 16).unwrap_or(0),
            actual: checksum,
        });
    }
    Ok(raw)
}

fn f32_matrix(raw: RawMatrix, dir: &Path, entry: &FileEntry) -> Result<Matrix> {
    match raw.payload {
        Payload::F32(v) => Matrix::new(raw.rows as usize, raw.cols as usize, v),
        other => Err(OodError::format(
            dir.join(&entry.file),
            format!("expected f32 payload, found {:?}", other.dtype()),
        )),
    }
}

/// Reads and fully validates a pack directory.
pub fn read_pack(dir: &Path) -> Result<PackSet> {
    let manifest = read_manifest(dir)?;
    let d = manifest.d_feature;
    let c = manifest.n_classes;
    let mut splits = Vec::with_capacity(manifest.splits.len());
    for s in &manifest.splits {
        let features = f32_matrix(read_entry(dir, &s.features, s.rows, d)?, dir, &s.features)?;
        let mut pack = FeaturePack::new(s.name.clone(), features, c as usize)?
            .with_provenance(s.provenance.clone());
        if let Some(e) = &s.logits {
            pack = pack.with_logits(f32_matrix(read_entry(dir, e, s.rows, c)?, dir, e)?)?;
        }
        if let Some(e) = &s.labels {
            let raw = read_entry(dir, e, s.rows, 1)?;
            let Payload::U32(labels) = raw.payload else {
                return Err(OodError::format(dir.join(&e.file), "labels must be u32"));
            };
            pack = pack.with_labels(labels)?;
        }
        splits.push(pack);
    }
    let head = manifest
        .head
        .as_ref()
        .map(|h| -> Result<ClassifierHead> {
            let weight = f32_matrix(read_entry(dir, &h.weight, c, d)?, dir, &h.weight)?;
            let bias = f32_matrix(read_entry(dir, &h.bias, c, 1)?, dir, &h.bias)?;
            ClassifierHead::new(weight, bias.into_data())
        })
        .transpose()?;
    Ok(PackSet { splits, head })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pack() -> (FeaturePack, ClassifierHead) {
        let features = Matrix::new(5, 4, (0..20).map(|v| v as f32 * 0.25 - 1.0).collect()).unwrap();
        let head = ClassifierHead::new(
            Matrix::new(3, 4, (0..12).map(|v| (v as f32).sin()).collect()).unwrap(),
            vec![0.1, -0.2, 0.3],
        )
        .unwrap();
        let logits = head.apply(&features).unwrap();
        let pack = FeaturePack::new("test", features, 3)
            .unwrap()
            .with_logits(logits)
            .unwrap()
            .with_labels(vec![0, 1, 2, 0, 1])
            .unwrap()
            .with_provenance("unit test");
        (pack, head)
    }

    #[test]
    fn round_trip_with_head() {
        let dir = tempfile::tempdir().unwrap();
        let (pack, head) = sample_pack();
        let manifest = write_pack(dir.path(), std::slice::from_ref(&pack), Some(&head)).unwrap();
        assert_eq!(manifest.d_feature, 4);
        assert_eq!(manifest.n_classes, 3);
        let set = read_pack(dir.path()).unwrap();
        assert_eq!(set.splits, vec![pack]);
        assert_eq!(set.head, Some(head));
    }

    #[test]
    fn empty_directory_reports_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_pack(dir.path()), Err(OodError::ManifestMissing(_))));
    }

    #[test]
    fn manifest_row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let features = Matrix::new(3, 2, vec![0.0; 6]).unwrap();
        let pack = FeaturePack::new("s", features, 2).unwrap();
        let mut manifest = write_pack(dir.path(), &[pack], None).unwrap();
        manifest.splits[0].rows = 4;
        manifest.splits[0].features.rows = 4;
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(
            read_pack(dir.path()),
            Err(OodError::HeaderMismatch { .. })
        ));
    }

    #[test]
    fn corrupt_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let (pack, head) = sample_pack();
        write_pack(dir.path(), &[pack], Some(&head)).unwrap();
        let path = dir.path().join("split-000.features.oodm");
        let mut bytes = fs::read(&path).unwrap();
        bytes[container::HEADER_LEN + 7] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_pack(dir.path()), Err(OodError::Checksum { .. })));
    }

    #[test]
    fn label_out_of_range_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let pack = FeaturePack::new("s", Matrix::new(2, 2, vec![0.0; 4]).unwrap(), 2)
            .unwrap()
            .with_labels(vec![0, 1])
            .unwrap();
        write_pack(dir.path(), &[pack], None).unwrap();
        // Rewrite the labels file with a bad label and patch the checksum.
        let sum = container::write_file(
            &dir.path().join("split-000.labels.oodm"),
            2,
            1,
            &Payload::U32(vec![0, 2]),
        )
        .unwrap();
        let mut manifest = read_manifest(dir.path()).unwrap();
        manifest.splits[0].labels.as_mut().unwrap().checksum = checksum_hex(sum);
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(read_pack(dir.path()), Err(OodError::Invalid(_))));
    }

    #[test]
    fn non_finite_payload_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let pack = FeaturePack::new("s", Matrix::new(1, 2, vec![0.0; 2]).unwrap(), 2).unwrap();
        write_pack(dir.path(), &[pack], None).unwrap();
        let sum = container::write_file(
            &dir.path().join("split-000.features.oodm"),
            1,
            2,
            &Payload::F32(vec![0.0, f32::INFINITY]),
        )
        .unwrap();
        let mut manifest = read_manifest(dir.path()).unwrap();
        manifest.splits[0].features.checksum = checksum_hex(sum);
        write_manifest(dir.path(), &manifest).unwrap();
        assert!(matches!(read_pack(dir.path()), Err(OodError::NonFinite { .. })));
    }

    #[test]
    fn pack_invariants() {
        let m = Matrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(FeaturePack::new("x", m.clone(), 1).is_err());
        assert!(FeaturePack::new("x", Matrix::zeros(0, 2), 2).is_err());
        let p = FeaturePack::new("x", m.clone(), 2).unwrap();
        assert!(p.clone().with_labels(vec![0, 2]).is_err());
        assert!(p.clone().with_labels(vec![0]).is_err());
        assert!(p.with_logits(Matrix::zeros(2, 3)).is_err());
        assert!(FeaturePack::new("x", Matrix::new(1, 2, vec![f32::NAN, 0.0]).unwrap(), 2).is_err());
    }

    #[test]
    fn head_reproduces_logits() {
        let (pack, head) = sample_pack();
        let dev = head.max_logit_deviation(&pack).unwrap().unwrap();
        assert!(dev < 1e-6, "{dev}");
    }

    #[test]
    fn mixed_dimensions_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let a = FeaturePack::new("a", Matrix::zeros(1, 2), 2).unwrap();
        let b = FeaturePack::new("b", Matrix::zeros(1, 3), 2).unwrap();
        assert!(write_pack(dir.path(), &[a.clone(), b], None).is_err());
        assert!(write_pack(dir.path(), &[a.clone(), a], None).is_err());
    }
}
