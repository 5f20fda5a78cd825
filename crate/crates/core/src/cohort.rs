//! Case-level data model: labels, manifests, fold plans and per-case patch capping.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::util;

/// Fine-grained class: five tumor types plus non-tumor background tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FineLabel {
    G,
    A,
    O,
    M,
    L,
    B,
}

impl FineLabel {
    /// Fixed class order; also the head's output order.
    pub const ALL: [FineLabel; 6] = [
        FineLabel::G,
        FineLabel::A,
        FineLabel::O,
        FineLabel::M,
        FineLabel::L,
        FineLabel::B,
    ];
    /// Classes that can be a case diagnosis.
    pub const TUMOR: [FineLabel; 5] = [
        FineLabel::G,
        FineLabel::A,
        FineLabel::O,
        FineLabel::M,
        FineLabel::L,
    ];
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FineLabel::G => "G",
            FineLabel::A => "A",
            FineLabel::O => "O",
            FineLabel::M => "M",
            FineLabel::L => "L",
            FineLabel::B => "B",
        }
    }

    pub fn coarse(self) -> CoarseLabel {
        coarse_of(self)
    }
}

impl fmt::Display for FineLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FineLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "G" => Ok(FineLabel::G),
            "A" => Ok(FineLabel::A),
            "O" => Ok(FineLabel::O),
            "M" => Ok(FineLabel::M),
            "L" => Ok(FineLabel::L),
            "B" => Ok(FineLabel::B),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// Coarse class obtained by merging the three glioma types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoarseLabel {
    #[serde(rename = "GLIOMA")]
    Glioma,
    M,
    L,
    B,
}

impl CoarseLabel {
    pub const ALL: [CoarseLabel; 4] = [
        CoarseLabel::Glioma,
        CoarseLabel::M,
        CoarseLabel::L,
        CoarseLabel::B,
    ];
    pub const TUMOR: [CoarseLabel; 3] = [CoarseLabel::Glioma, CoarseLabel::M, CoarseLabel::L];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoarseLabel::Glioma => "GLIOMA",
            CoarseLabel::M => "M",
            CoarseLabel::L => "L",
            CoarseLabel::B => "B",
        }
    }
}

impl fmt::Display for CoarseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn coarse_of(label: FineLabel) -> CoarseLabel {
    match label {
        FineLabel::G | FineLabel::A | FineLabel::O => CoarseLabel::Glioma,
        FineLabel::M => CoarseLabel::M,
        FineLabel::L => CoarseLabel::L,
        FineLabel::B => CoarseLabel::B,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Local,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub fine_label: FineLabel,
    pub source: Source,
    pub patch_refs: Vec<String>,
    #[serde(default)]
    pub subtype: Option<String>,
    #[serde(default)]
    pub patch_dir: Option<PathBuf>,
}

impl Case {
    pub fn new(case_id: impl Into<String>, fine_label: FineLabel, patch_refs: Vec<String>) -> Self {
        Case {
            case_id: case_id.into(),
            fine_label,
            source: Source::Local,
            patch_refs,
            subtype: None,
            patch_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    pub cases: Vec<Case>,
    pub class_counts: BTreeMap<FineLabel, usize>,
}

impl CohortManifest {
    /// Builds a manifest, rejecting duplicate case ids and recounting classes.
    pub fn new(cases: Vec<Case>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::DuplicateCase(c.case_id.clone()));
            }
        }
        let class_counts = recount(&cases);
        Ok(CohortManifest {
            cases,
            class_counts,
        })
    }

    pub fn get(&self, case_id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn subset(&self, ids: &[String]) -> Vec<Case> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.cases
            .iter()
            .filter(|c| wanted.contains(c.case_id.as_str()))
            .cloned()
            .collect()
    }
}

fn recount(cases: &[Case]) -> BTreeMap<FineLabel, usize> {
    let mut counts: BTreeMap<FineLabel, usize> = FineLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for c in cases {
        *counts.entry(c.fine_label).or_default() += 1;
    }
    counts
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    pathprobe_manifest: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    case_id: String,
    fine_label: String,
    source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patches: Option<Vec<String>>,
}

const PATCH_EXTENSIONS: [&str; 4] = ["png", "tif", "tiff", "jpg"];

/// Reads a line-delimited manifest. The first non-blank line is the version header;
/// each following line is one case. When a record has no inline `patches`, the
/// patch list is the sorted image file names found in `patch_dir` (relative paths
/// resolve against the manifest's directory).
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let text = std::fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (n, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing manifest header".into()))?;
    let header: ManifestHeader =
        serde_json::from_str(header).map_err(|e| parse_err(n + 1, format!("bad header: {e}")))?;
    if header.pathprobe_manifest != MANIFEST_VERSION {
        return Err(parse_err(
            n + 1,
            format!("unsupported manifest version {}", header.pathprobe_manifest),
        ));
    }

    let mut cases = Vec::new();
    for (n, line) in lines {
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| parse_err(n + 1, e.to_string()))?;
        let fine_label: FineLabel = rec.fine_label.parse()?;
        let patch_dir = rec.patch_dir.map(|d| if d.is_relative() { base.join(d) } else { d });
        let patch_refs = match (rec.patches, &patch_dir) {
            (Some(p), _) => p,
            (None, Some(dir)) => list_patches(dir)?,
            (None, None) => Vec::new(),
        };
        if patch_refs.is_empty() {
            log::warn!("case {} has no patches", rec.case_id);
        }
        cases.push(Case {
            case_id: rec.case_id,
            fine_label,
            source: rec.source,
            patch_refs,
            subtype: rec.subtype,
            patch_dir,
        });
    }
    CohortManifest::new(cases)
}

fn list_patches(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        let p = entry.path();
        let ok = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| PATCH_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && p.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Writes a manifest with inline patch lists.
pub fn save_manifest(manifest: &CohortManifest, path: &Path) -> Result<()> {
    let mut out = serde_json::to_string(&ManifestHeader {
        pathprobe_manifest: MANIFEST_VERSION,
    })?;
    out.push('\n');
    for c in &manifest.cases {
        let rec = ManifestRecord {
            case_id: c.case_id.clone(),
            fine_label: c.fine_label.to_string(),
            source: c.source,
            subtype: c.subtype.clone(),
            patch_dir: c.patch_dir.clone(),
            patches: Some(c.patch_refs.clone()),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    util::write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignment.get(case_id).copied()
    }

    /// Case ids whose validation fold is `fold`, sorted.
    pub fn validation_ids(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// (train, validation) cases for one fold, each in manifest order.
    pub fn split(&self, manifest: &CohortManifest, fold: usize) -> (Vec<Case>, Vec<Case>) {
        manifest
            .cases
            .iter()
            .cloned()
            .partition(|c| self.fold_of(&c.case_id) != Some(fold))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for f in self.assignment.values() {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Stratified k-fold assignment. Within each fine-label stratum cases are shuffled
/// with the seed and dealt round-robin; the dealing offset carries over between
/// strata so overall fold sizes also differ by at most one.
pub fn make_folds(manifest: &CohortManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let mut assignment = BTreeMap::new();
    let mut offset = 0usize;
    for label in FineLabel::ALL {
        let mut ids: Vec<&str> = manifest
            .cases
            .iter()
            .filter(|c| c.fine_label == label)
            .map(|c| c.case_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < k {
            log::warn!(
                "class {label} has {} cases for {k} folds; some folds will lack it",
                ids.len()
            );
        }
        ids.sort_unstable();
        ids.shuffle(&mut util::rng(seed, &format!("folds/{label}")));
        for id in ids {
            assignment.insert(id.to_string(), offset % k);
            offset += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
    })
}

/// Brings a case's patch list to exactly `limit` entries: a seeded sample without
/// replacement (kept in original order) when there are too many, cyclic repetition
/// of the original order when there are too few.
pub fn cap_patches(case: &Case, limit: usize, seed: u64) -> Result<Vec<String>> {
    if limit == 0 {
        return Err(Error::InvalidArgument("patch limit must be >= 1".into()));
    }
    let patches = &case.patch_refs;
    if patches.is_empty() {
        return Err(Error::Empty("case has no patches"));
    }
    let n = patches.len();
    Ok(if n > limit {
        let mut rng = util::rng(seed, &format!("cap/{}", case.case_id));
        let mut picked = index::sample(&mut rng, n, limit).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| patches[i].clone()).collect()
    } else {
        patches.iter().cycle().take(limit).cloned().collect()
    })
}

/// One entry of the external subtype table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtypeEntry {
    pub subtype: String,
    pub class: FineLabel,
    /// Short row name used by the subtype-expanded confusion matrix.
    pub group: String,
}

const SUBTYPE_TABLE: &str = include_str!("../data/subtypes.v1.tsv");

/// The shipped subtype→class table, in file order.
pub fn subtype_table() -> &'static [SubtypeEntry] {
    static TABLE: OnceLock<Vec<SubtypeEntry>> = OnceLock::new();
    TABLE.get_or_init(|| {
        SUBTYPE_TABLE
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let mut cols = l.split('\t');
                let subtype = cols.next().expect("subtype column").to_string();
                let class = cols
                    .next()
                    .and_then(|c| c.parse().ok())
                    .expect("class column");
                let group = cols.next().expect("group column").to_string();
                SubtypeEntry {
                    subtype,
                    class,
                    group,
                }
            })
            .collect()
    })
}

fn normalize_subtype(s: &str) -> String {
    s.replace('*', "")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn lookup_subtype(subtype: &str) -> Result<&'static SubtypeEntry> {
    let key = normalize_subtype(subtype);
    subtype_table()
        .iter()
        .find(|e| normalize_subtype(&e.subtype) == key)
        .ok_or_else(|| Error::UnknownSubtype(subtype.to_string()))
}

/// Maps an external diagnosis string to the class it is scored as. Matching ignores
/// case, markdown emphasis and repeated whitespace.
pub fn subtype_to_class(subtype: &str) -> Result<FineLabel> {
    lookup_subtype(subtype).map(|e| e.class)
}
