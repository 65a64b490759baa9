//! Fitted detectors on disk: `detector.json` plus `OODM` containers holding
//! the fitted arrays in f64 (dtype 3), so a reloaded detector scores
//! bit-identically to the one that was saved.
//!
//! | method | files                                                       |
//! |--------|-------------------------------------------------------------|
//! | ReAct  | `react.clip.oodm` (1 x 1 or 1 x D)                          |
//! | KLM    | `klm.templates.oodm` (K x C), `klm.classes.oodm` (u32 K x 1) |
//! | DICE   | `dice.mask.oodm` (u32 0/1, C x D)                           |
//! | ViM    | `vim.offset.oodm` (D x 1), `vim.residual.oodm` (D x (D-D')) |
//! | KNN    | `knn.train.oodm` (N x D, unit rows)                         |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    DetectorState, DiceState, FittedDetector, KlmState, KnnState, Method, ReactState, ScorerConfig,
    VimState,
};
use crate::error::{OodError, Result};
use crate::pack::container::{self, Payload};
use crate::pack::FileEntry;

pub const DETECTOR_FILE: &str = "detector.json";
pub const DETECTOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectorManifest {
    format_version: u32,
    method: Method,
    config: ScorerConfig,
    d_feature: usize,
    n_classes: usize,
    #[serde(default)]
    warnings: Vec<String>,
    #[serde(default)]
    scalars: BTreeMap<String, f64>,
    #[serde(default)]
    files: BTreeMap<String, FileEntry>,
}

struct Writer<'a> {
    dir: &'a Path,
    files: BTreeMap<String, FileEntry>,
}

impl Writer<'_> {
    fn put(&mut self, key: &str, rows: usize, cols: usize, payload: Payload) -> Result<()> {
        let file = format!("{key}.oodm");
        let sum = container::write_file(&self.dir.join(&file), rows as u64, cols as u64, &payload)?;
        self.files.insert(
            key.to_string(),
            FileEntry {
                file,
                rows: rows as u64,
                cols: cols as u64,
                checksum: format!("{sum:016x}"),
            },
        );
        Ok(())
    }
}

pub fn save_detector(dir: &Path, det: &FittedDetector) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OodError::io(dir, e))?;
    let mut w = Writer {
        dir,
        files: BTreeMap::new(),
    };
    let mut scalars = BTreeMap::new();
    match &det.state {
        DetectorState::Msp | DetectorState::Energy | DetectorState::GradNorm => {}
        DetectorState::React(s) => w.put("react.clip", 1, s.clip.len(), Payload::F64(s.clip.clone()))?,
        DetectorState::Klm(s) => {
            w.put(
                "klm.templates",
                s.templates.len(),
                det.n_classes,
                Payload::F64(s.templates.concat()),
            )?;
            w.put(
                "klm.classes",
                s.classes.len(),
                1,
                Payload::U32(s.classes.iter().map(|&c| c as u32).collect()),
            )?;
        }
        DetectorState::Dice(s) => w.put(
            "dice.mask",
            det.n_classes,
            det.dim,
            Payload::U32(s.mask.iter().map(|&m| u32::from(m)).collect()),
        )?,
        DetectorState::Vim(s) => {
            scalars.insert("alpha".into(), s.alpha);
            scalars.insert("principal_dim".into(), s.principal_dim as f64);
            w.put("vim.offset", det.dim, 1, Payload::F64(s.offset.clone()))?;
            let r = &s.residual;
            let row_major: Vec<f64> = (0..r.nrows())
                .flat_map(|i| (0..r.ncols()).map(move |j| r[(i, j)]))
                .collect();
            w.put("vim.residual", r.nrows(), r.ncols(), Payload::F64(row_major))?;
        }
        DetectorState::Knn(s) => {
            scalars.insert("k".into(), s.k as f64);
            w.put("knn.train", s.n_train(), s.dim, Payload::F64(s.train.clone()))?;
        }
    }
    let manifest = DetectorManifest {
        format_version: DETECTOR_FORMAT_VERSION,
        method: det.method(),
        config: det.config.clone(),
        d_feature: det.dim,
        n_classes: det.n_classes,
        warnings: det.warnings.clone(),
        scalars,
        files: w.files,
    };
    let path = dir.join(DETECTOR_FILE);
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| OodError::Serde(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| OodError::io(path, e))
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a DetectorManifest,
}

impl Reader<'_> {
    fn get(&self, key: &str) -> Result<(usize, usize, Payload)> {
        let entry = self
            .manifest
            .files
            .get(key)
            .ok_or_else(|| OodError::format(self.dir.join(DETECTOR_FILE), format!("missing `{key}`")))?;
        let path = self.dir.join(&entry.file);
        let (raw, sum) = container::read_file(&path)?;
        if raw.rows != entry.rows || raw.cols != entry.cols {
            return Err(OodError::HeaderMismatch {
                path,
                reason: format!(
                    "header {}x{} vs manifest {}x{}",
                    raw.rows, raw.cols, entry.rows, entry.cols
                ),
            });
        }
        if format!("{sum:016x}") != entry.checksum {
            return Err(OodError::Checksum {
                path,
                expected: u64::from_str_radix(&entry.checksum, 16).unwrap_or(0),
                actual: sum,
            });
        }
        Ok((raw.rows as usize, raw.cols as usize, raw.payload))
    }

    fn f64s(&self, key: &str) -> Result<(usize, usize, Vec<f64>)> {
        match self.get(key)? {
            (r, c, Payload::F64(v)) => {
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(OodError::NonFinite { what: key.into(), index });
                }
                Ok((r, c, v))
            }
            _ => Err(OodError::format(self.dir.join(key), "expected f64 payload")),
        }
    }

    fn u32s(&self, key: &str) -> Result<(usize, usize, Vec<u32>)> {
        match self.get(key)? {
            (r, c, Payload::U32(v)) => Ok((r, c, v)),
            _ => Err(OodError::format(self.dir.join(key), "expected u32 payload")),
        }
    }

    fn scalar(&self, key: &str) -> Result<f64> {
        self.manifest.scalars.get(key).copied().ok_or_else(|| {
            OodError::format(self.dir.join(DETECTOR_FILE), format!("missing scalar `{key}`"))
        })
    }
}

fn expect_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(OodError::Dimension(format!(
            "{what} is {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}

pub fn load_detector(dir: &Path) -> Result<FittedDetector> {
    let path = dir.join(DETECTOR_FILE);
    if !path.is_file() {
        return Err(OodError::ManifestMissing(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| OodError::io(&path, e))?;
    let manifest: DetectorManifest =
        serde_json::from_str(&text).map_err(|e| OodError::format(&path, e.to_string()))?;
    if manifest.format_version != DETECTOR_FORMAT_VERSION {
        return Err(OodError::format(
            &path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.method != manifest.config.method {
        return Err(OodError::format(&path, "method and config.method disagree"));
    }
    manifest.config.validate()?;
    let (d, c) = (manifest.d_feature, manifest.n_classes);
    let rd = Reader {
        dir,
        manifest: &manifest,
    };
    let state = match manifest.method {
        Method::Msp => DetectorState::Msp,
        Method::Energy => DetectorState::Energy,
        Method::GradNorm => DetectorState::GradNorm,
        Method::React => {
            let (r, cols, clip) = rd.f64s("react.clip")?;
            if r != 1 || (cols != 1 && cols != d) {
                return Err(OodError::Dimension(format!("react clip is {r}x{cols}")));
            }
            DetectorState::React(ReactState { clip })
        }
        Method::Klm => {
            let (k, cols, flat) = rd.f64s("klm.templates")?;
            expect_shape("klm templates", (k, cols), (k, c))?;
            let (kr, kc, classes) = rd.u32s("klm.classes")?;
            expect_shape("klm classes", (kr, kc), (k, 1))?;
            if k == 0 || classes.iter().any(|&x| x as usize >= c) {
                return Err(OodError::Invalid("bad KLM template classes".into()));
            }
            DetectorState::Klm(KlmState {
                classes: classes.into_iter().map(|x| x as usize).collect(),
                templates: flat.chunks_exact(c).map(<[f64]>::to_vec).collect(),
            })
        }
        Method::Dice => {
            let (r, cols, mask) = rd.u32s("dice.mask")?;
            expect_shape("dice mask", (r, cols), (c, d))?;
            if mask.iter().any(|&m| m > 1) {
                return Err(OodError::Invalid("DICE mask must be 0/1".into()));
            }
            DetectorState::Dice(DiceState {
                mask: mask.into_iter().map(|m| m == 1).collect(),
            })
        }
        Method::Vim => {
            let (r, cols, offset) = rd.f64s("vim.offset")?;
            expect_shape("vim offset", (r, cols), (d, 1))?;
            let principal_dim = rd.scalar("principal_dim")? as usize;
            let (r, cols, res) = rd.f64s("vim.residual")?;
            expect_shape("vim residual", (r, cols), (d, d.saturating_sub(principal_dim)))?;
            let alpha = rd.scalar("alpha")?;
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(OodError::Invalid(format!("ViM alpha {alpha} not positive")));
            }
            DetectorState::Vim(VimState {
                principal_dim,
                offset,
                residual: DMatrix::from_row_slice(r, cols, &res),
                alpha,
            })
        }
        Method::Knn => {
            let (n, cols, train) = rd.f64s("knn.train")?;
            expect_shape("knn train", (n, cols), (n, d))?;
            let k = rd.scalar("k")? as usize;
            if k == 0 || k > n {
                return Err(OodError::Invalid(format!("knn k={k} with {n} training rows")));
            }
            DetectorState::Knn(KnnState { k, dim: d, train })
        }
    };
    Ok(FittedDetector {
        config: manifest.config.clone(),
        dim: d,
        n_classes: c,
        state,
        warnings: manifest.warnings.clone(),
    })
}
