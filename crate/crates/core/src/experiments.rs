//! Grid orchestration over encoders × conditions × patch limits × folds, with
//! resumable per-cell artifacts and the summary emitters built on top of them.
//!
//! Each cell lives under `cells/<hash>/`, where the hash covers the run
//! configuration, fold and cohort. A cell is complete once its `done` marker
//! exists; rerunning a grid skips complete cells and retries failed ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{load_manifest, make_folds, Case, CohortManifest, FineLabel, FoldPlan, Source};
use crate::data::{DirectoryStore, PatchStore};
use crate::encoder::{build_condition, Condition, EncoderRegistry, RunConfig, PATCH_LIMITS};
use crate::error::{Error, IoContext, Result};
use crate::evaluator::{
    paired_t_test, read_predictions, render_summary_table, summarize_external, summarize_local,
    write_predictions, DatasetSummary, GranularitySummary, PredictionRecord,
};
use crate::synthetic::{synthetic_cohort, SyntheticStore};
use crate::trainer::{predict_cases, train_fold, FeatureCache};
use crate::util;

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

fn default_folds() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_parallel() -> usize {
    1
}
fn default_limits() -> Vec<usize> {
    PATCH_LIMITS.to_vec()
}

/// Procedurally generated cohort in place of manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub classes: Vec<FineLabel>,
    pub cases_per_class: usize,
    pub tiles_per_case: usize,
    #[serde(default = "default_tile")]
    pub tile_size: u32,
    /// Cases per class in a held-out external cohort; 0 for none.
    #[serde(default)]
    pub external_cases_per_class: usize,
}

fn default_tile() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub encoder: String,
    pub condition: Condition,
}

/// Overrides of the fixed training hyperparameters, for desk-scale runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOverrides {
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f64>,
}

/// Experiment spec file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    /// Local cohort manifest; its cases are cross-validated.
    pub manifest: Option<PathBuf>,
    /// External cohort manifest; scored by every fold model.
    pub external_manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    /// Encoder registry; the built-in study registry when absent.
    pub registry: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    pub runs: Vec<RunSpec>,
    #[serde(default = "default_limits")]
    pub patch_limits: Vec<usize>,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    #[serde(default)]
    pub training: TrainingOverrides,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut spec = Self::parse(&text)?;
        // Relative paths are taken from the spec file's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut spec.manifest, &mut spec.external_manifest, &mut spec.registry]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if spec.output.is_relative() {
            spec.output = base.join(&spec.output);
        }
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported experiment schema_version {}",
                self.schema_version
            )));
        }
        if self.manifest.is_some() == self.synthetic.is_some() {
            return Err(Error::InvalidArgument(
                "give exactly one of `manifest` and `synthetic`".into(),
            ));
        }
        if self.runs.is_empty() || self.patch_limits.is_empty() {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        if let Some(l) = self.patch_limits.iter().find(|l| !PATCH_LIMITS.contains(l)) {
            log::warn!("patch limit {l} is outside the study set {PATCH_LIMITS:?}");
        }
        if self.parallel == 0 {
            return Err(Error::InvalidArgument("parallel must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cohorts and the store that serves their patches.
pub struct GridData {
    pub local: CohortManifest,
    pub external: Vec<Case>,
    pub store: Box<dyn PatchStore>,
}

impl GridData {
    pub fn from_spec(spec: &ExperimentSpec) -> Result<Self> {
        if let Some(s) = &spec.synthetic {
            let local = synthetic_cohort(&s.classes, s.cases_per_class, s.tiles_per_case);
            let external = if s.external_cases_per_class > 0 {
                synthetic_cohort(&s.classes, s.external_cases_per_class, s.tiles_per_case)
                    .cases
                    .into_iter()
                    .map(|mut c| {
                        c.case_id = format!("X{}", c.case_id);
                        c.patch_refs = c.patch_refs.iter().map(|p| format!("X{p}")).collect();
                        c.source = Source::External;
                        c
                    })
                    .collect()
            } else {
                Vec::new()
            };
            return Ok(GridData {
                local,
                external,
                store: Box::new(SyntheticStore::new(s.tile_size, spec.seed)),
            });
        }
        let local = load_manifest(spec.manifest.as_ref().expect("validated"))?;
        let external = match &spec.external_manifest {
            Some(p) => load_manifest(p)?.cases,
            None => Vec::new(),
        };
        Ok(GridData {
            local,
            external,
            store: Box::new(DirectoryStore),
        })
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in self.local.cases.iter().chain(&self.external) {
            h.update(c.case_id.as_bytes());
            h.update([0]);
            h.update(c.fine_label.as_str().as_bytes());
            for p in &c.patch_refs {
                h.update(p.as_bytes());
                h.update([1]);
            }
        }
        hex(&h.finalize())[..16].to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One training run: a configuration on one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub config: RunConfig,
    pub fold: usize,
    pub key: String,
}

#[derive(Serialize)]
struct CellIdentity<'a> {
    config: &'a RunConfig,
    fold: usize,
    folds: usize,
    data: &'a str,
}

/// Expands the grid into cells, in run → limit → fold order.
pub fn plan_cells(spec: &ExperimentSpec, registry: &EncoderRegistry, data_fp: &str) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for run in &spec.runs {
        let enc = registry.spec(&run.encoder)?;
        let base = build_condition(&enc, run.condition)?;
        for &limit in &spec.patch_limits {
            let mut config = base
                .clone()
                .with_patch_limit(limit)
                .with_seed(spec.seed)
                .with_augment(spec.augment);
            let t = &spec.training;
            if let Some(v) = t.max_epochs {
                config.max_epochs = v;
            }
            if let Some(v) = t.batch_size {
                config.batch_size = v;
            }
            if let Some(v) = t.patience {
                config.patience = v;
            }
            if let Some(v) = t.learning_rate {
                config.learning_rate = v;
            }
            for fold in 0..spec.folds {
                let id = serde_json::to_vec(&CellIdentity {
                    config: &config,
                    fold,
                    folds: spec.folds,
                    data: data_fp,
                })?;
                let key = hex(&Sha256::digest(&id))[..20].to_string();
                cells.push(Cell {
                    config: config.clone(),
                    fold,
                    key,
                });
            }
        }
    }
    Ok(cells)
}

const DONE: &str = "done";
const FAILED: &str = "failed";

fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(&cell.key)
}

pub fn cell_is_done(out: &Path, cell: &Cell) -> bool {
    cell_dir(out, cell).join(DONE).exists()
}

fn run_cell(
    cell: &Cell,
    plan: &FoldPlan,
    data: &GridData,
    cache: &FeatureCache,
    out: &Path,
) -> Result<()> {
    let dir = cell_dir(out, cell);
    std::fs::create_dir_all(&dir).at(&dir)?;
    let _ = std::fs::remove_file(dir.join(FAILED));
    util::write_atomic(&dir.join("cell.json"), &serde_json::to_vec_pretty(cell)?)?;
    let (train, val) = plan.split(&data.local, cell.fold);
    let cfg = &cell.config;
    let outcome = train_fold(cfg, &train, &val, data.store.as_ref(), Some(cache))?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    util::write_atomic(&dir.join("history.jsonl"), outcome.history.to_jsonl().as_bytes())?;
    let id = cfg.model_id();
    let store = data.store.as_ref();
    let local = predict_cases(&outcome.classifier, &val, store, cfg.patch_limit, cfg.seed, cell.fold, &id)?;
    write_predictions(&local, &dir.join("local.jsonl"))?;
    if !data.external.is_empty() {
        let ext = predict_cases(
            &outcome.classifier,
            &data.external,
            store,
            cfg.patch_limit,
            cfg.seed,
            cell.fold,
            &id,
        )?;
        write_predictions(&ext, &dir.join("external.jsonl"))?;
    }
    util::write_atomic(&dir.join(DONE), b"")
}

/// What a grid invocation did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub trained: usize,
    pub reused: usize,
    /// (cell key, model id, fold, message)
    pub failed: Vec<(String, String, usize, String)>,
}

/// Group key of a sweep entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SweepKey {
    pub model_id: String,
    pub condition: Condition,
    pub patch_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub key: SweepKey,
    pub local: DatasetSummary,
    pub external: Option<DatasetSummary>,
}

/// Summaries for every (model, patch limit) whose folds all completed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn get(&self, model_id: &str, patch_limit: usize) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .find(|e| e.key.model_id == model_id && e.key.patch_limit == patch_limit)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn resolve_registry(spec: &ExperimentSpec) -> Result<EncoderRegistry> {
    match &spec.registry {
        Some(p) => EncoderRegistry::load(p),
        None => Ok(EncoderRegistry::study_encoders()),
    }
}

/// Runs (or resumes) every cell, then summarizes from the persisted predictions.
/// Writes `sweep.json` and `grid_report.json` to the output directory.
pub fn run_grid(spec: &ExperimentSpec) -> Result<(SweepResult, GridReport)> {
    spec.validate()?;
    let registry = resolve_registry(spec)?;
    let data = GridData::from_spec(spec)?;
    let plan = make_folds(&data.local, spec.folds, spec.seed)?;
    let cells = plan_cells(spec, &registry, &data.fingerprint())?;
    let out = &spec.output;
    std::fs::create_dir_all(out).at(out)?;
    util::write_atomic(&out.join("folds.json"), &serde_json::to_vec_pretty(&plan)?)?;

    let cache = FeatureCache::new();
    let next = AtomicUsize::new(0);
    let report = Mutex::new(GridReport::default());
    let workers = spec.parallel.min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                if cell_is_done(out, cell) {
                    report.lock().expect("report lock").reused += 1;
                    continue;
                }
                log::info!("cell {} {} fold {}", cell.key, cell.config.model_id(), cell.fold);
                match run_cell(cell, &plan, &data, &cache, out) {
                    Ok(()) => report.lock().expect("report lock").trained += 1,
                    Err(e) => {
                        log::error!("cell {} failed: {e}", cell.key);
                        let _ = util::write_atomic(
                            &cell_dir(out, cell).join(FAILED),
                            e.to_string().as_bytes(),
                        );
                        report.lock().expect("report lock").failed.push((
                            cell.key.clone(),
                            cell.config.model_id(),
                            cell.fold,
                            e.to_string(),
                        ));
                    }
                }
            });
        }
    });
    let mut report = report.into_inner().expect("report lock");
    report.failed.sort();

    let sweep = summarize_cells(&cells, out, &data)?;
    sweep.save(&out.join("sweep.json"))?;
    util::write_atomic(&out.join("grid_report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok((sweep, report))
}

fn summarize_cells(cells: &[Cell], out: &Path, data: &GridData) -> Result<SweepResult> {
    let mut groups: BTreeMap<SweepKey, Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        groups
            .entry(SweepKey {
                model_id: c.config.model_id(),
                condition: c.config.condition,
                patch_limit: c.config.patch_limit,
            })
            .or_default()
            .push(c);
    }
    let mut entries = Vec::new();
    for (key, group) in groups {
        if !group.iter().all(|c| cell_is_done(out, c)) {
            log::warn!("{} at limit {}: incomplete folds, not summarized", key.model_id, key.patch_limit);
            continue;
        }
        let mut local: Vec<PredictionRecord> = Vec::new();
        let mut external: Vec<PredictionRecord> = Vec::new();
        for c in &group {
            let dir = cell_dir(out, c);
            local.extend(read_predictions(&dir.join("local.jsonl"))?);
            if !data.external.is_empty() {
                external.extend(read_predictions(&dir.join("external.jsonl"))?);
            }
        }
        let local = summarize_local(&key.model_id, &local, &data.local.cases)?;
        let external = if data.external.is_empty() {
            None
        } else {
            Some(summarize_external(&key.model_id, &external, &data.external)?)
        };
        entries.push(SweepEntry { key, local, external });
    }
    Ok(SweepResult { entries })
}

/// Per-limit change from the baseline limit, summed step by step over the
/// sorted limits. The baseline itself maps to 0.
pub fn cumulative_difference(series: &BTreeMap<usize, f64>, baseline: usize) -> Result<BTreeMap<usize, f64>> {
    let base = *series
        .get(&baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("series has no baseline limit {baseline}")))?;
    let mut out = BTreeMap::new();
    let mut acc = 0.0;
    let mut prev = base;
    out.insert(baseline, 0.0);
    for (&limit, &v) in series.range(baseline + 1..) {
        acc += v - prev;
        prev = v;
        out.insert(limit, acc);
    }
    Ok(out)
}

/// Table-shaped summary at one patch limit: local rows, then external rows.
pub fn summary_table(sweep: &SweepResult, patch_limit: usize) -> String {
    let mut rows: Vec<DatasetSummary> = Vec::new();
    let at: Vec<&SweepEntry> = sweep
        .entries
        .iter()
        .filter(|e| e.key.patch_limit == patch_limit)
        .collect();
    rows.extend(at.iter().map(|e| e.local.clone()));
    rows.extend(at.iter().filter_map(|e| e.external.clone()));
    render_summary_table(&rows)
}

fn datasets(e: &SweepEntry) -> Vec<&DatasetSummary> {
    std::iter::once(&e.local).chain(e.external.as_ref()).collect()
}

fn granularities(d: &DatasetSummary) -> [(&'static str, &GranularitySummary); 2] {
    [("fine", &d.fine), ("coarse", &d.coarse)]
}

/// Per-fold scores, one row per (dataset, granularity, model, limit, fold): box-plot data.
pub fn fold_metrics_tsv(sweep: &SweepResult) -> String {
    let mut out = String::from("dataset\tgranularity\tmodel\tpatch_limit\tfold\tmacro_recall\tpatch_accuracy\n");
    for e in &sweep.entries {
        for d in datasets(e) {
            for (g, s) in granularities(d) {
                for (fold, (r, a)) in s.fold_macro_recall.iter().zip(&s.fold_patch_accuracy).enumerate() {
                    out.push_str(&format!(
                        "{}\t{g}\t{}\t{}\t{fold}\t{r:.6}\t{a:.6}\n",
                        d.dataset.as_str(),
                        e.key.model_id,
                        e.key.patch_limit
                    ));
                }
            }
        }
    }
    out
}

/// Trend rows over patch limits with cumulative differences from the smallest limit.
pub fn trends_tsv(sweep: &SweepResult) -> Result<String> {
    let mut out = String::from(
        "dataset\tgranularity\tmodel\tpatch_limit\tpooled_macro_recall\tmean_fold_macro_recall\toverall_accuracy\tpatch_accuracy\tcum_diff_macro_recall\tcum_diff_patch_accuracy\n",
    );
    // (dataset, granularity, model) → limit → summary
    let mut series: BTreeMap<(String, &str, String), BTreeMap<usize, &GranularitySummary>> = BTreeMap::new();
    for e in &sweep.entries {
        for d in datasets(e) {
            for (g, s) in granularities(d) {
                series
                    .entry((d.dataset.as_str().to_string(), g, e.key.model_id.clone()))
                    .or_default()
                    .insert(e.key.patch_limit, s);
            }
        }
    }
    for ((dataset, g, model), by_limit) in series {
        let baseline = *by_limit.keys().next().expect("non-empty series");
        let recall: BTreeMap<usize, f64> = by_limit.iter().map(|(l, s)| (*l, s.pooled_macro_recall)).collect();
        let pacc: BTreeMap<usize, f64> = by_limit.iter().map(|(l, s)| (*l, s.pooled_patch_accuracy)).collect();
        let dr = cumulative_difference(&recall, baseline)?;
        let dp = cumulative_difference(&pacc, baseline)?;
        for (limit, s) in &by_limit {
            let mean_fold = s.macro_recall.map(|m| m.mean).unwrap_or(s.pooled_macro_recall);
            out.push_str(&format!(
                "{dataset}\t{g}\t{model}\t{limit}\t{:.6}\t{mean_fold:.6}\t{:.6}\t{:.6}\t{:+.6}\t{:+.6}\n",
                s.pooled_macro_recall,
                s.correct as f64 / s.total.max(1) as f64,
                s.pooled_patch_accuracy,
                dr[limit],
                dp[limit],
            ));
        }
    }
    Ok(out)
}

/// Class-wise recall over patch limits.
pub fn class_recall_tsv(sweep: &SweepResult) -> String {
    let mut out = String::from("dataset\tgranularity\tmodel\tpatch_limit\tclass\trecall\n");
    for e in &sweep.entries {
        for d in datasets(e) {
            for (g, s) in granularities(d) {
                for (class, r) in &s.class_recall {
                    out.push_str(&format!(
                        "{}\t{g}\t{}\t{}\t{class}\t{r:.6}\n",
                        d.dataset.as_str(),
                        e.key.model_id,
                        e.key.patch_limit
                    ));
                }
            }
        }
    }
    out
}

/// Paired t-tests on local per-fold fine patch accuracy between every pair of
/// models at the same patch limit.
pub fn pairwise_tests_tsv(sweep: &SweepResult) -> String {
    let mut out = String::from("patch_limit\tmodel_a\tmodel_b\tt\tdf\tp\tsignificant\n");
    let limits: BTreeSet<usize> = sweep.entries.iter().map(|e| e.key.patch_limit).collect();
    for limit in limits {
        let at: Vec<&SweepEntry> = sweep.entries.iter().filter(|e| e.key.patch_limit == limit).collect();
        for (i, a) in at.iter().enumerate() {
            for b in &at[i + 1..] {
                let (xa, xb) = (&a.local.fine.fold_patch_accuracy, &b.local.fine.fold_patch_accuracy);
                let row = match paired_t_test(xa, xb) {
                    Ok(r) => format!("{:.4}\t{}\t{:.4}\t{}", r.t, r.df, r.p, r.significant),
                    Err(e) => format!("nan\t{}\tnan\tfalse # {e}", xa.len().saturating_sub(1)),
                };
                out.push_str(&format!("{limit}\t{}\t{}\t{row}\n", a.key.model_id, b.key.model_id));
            }
        }
    }
    out
}

/// Writes the summary tables and plot data files into `dir`.
pub fn emit_reports(sweep: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        util::write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    let limits: BTreeSet<usize> = sweep.entries.iter().map(|e| e.key.patch_limit).collect();
    for l in limits {
        put(format!("table_{l}.md"), summary_table(sweep, l))?;
    }
    put("fold_metrics.tsv".into(), fold_metrics_tsv(sweep))?;
    put("trends.tsv".into(), trends_tsv(sweep)?)?;
    put("class_recall.tsv".into(), class_recall_tsv(sweep))?;
    put("pairwise_tests.tsv".into(), pairwise_tests_tsv(sweep))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec_text(out: &Path) -> String {
        format!(
            r#"
schema_version = 1
output = "{}"
folds = 2
seed = 4
patch_limits = [3]
augment = false
registry = "{}"
runs = [{{ encoder = "tiny", condition = "LP" }}]

[synthetic]
classes = ["G", "M"]
cases_per_class = 3
tiles_per_case = 4
tile_size = 64
external_cases_per_class = 1

[training]
max_epochs = 2
"#,
            out.join("grid").display(),
            out.join("reg.toml").display()
        )
    }

    fn write_registry(dir: &Path) {
        std::fs::write(
            dir.join("reg.toml"),
            "schema_version = 1\n[encoders.tiny]\nfamily = \"CNN_CLASS\"\nfeature_dim = 4\nweights = \"toy:1\"\n",
        )
        .unwrap();
    }

    #[test]
    fn cumulative_difference_examples() {
        let s: BTreeMap<usize, f64> = [(10, 0.5), (25, 0.6), (100, 0.7), (500, 0.9)].into();
        let d = cumulative_difference(&s, 10).unwrap();
        assert_eq!(d[&10], 0.0);
        for (l, want) in [(25, 0.1), (100, 0.2), (500, 0.4)] {
            assert!((d[&l] - want).abs() < 1e-12);
        }
        let flat: BTreeMap<usize, f64> = [(10, 0.3), (25, 0.3), (100, 0.3)].into();
        assert!(cumulative_difference(&flat, 10).unwrap().values().all(|v| *v == 0.0));
        let down: BTreeMap<usize, f64> = [(10, 0.75), (500, 0.736)].into();
        assert!((cumulative_difference(&down, 10).unwrap()[&500] + 0.014).abs() < 1e-12);
        assert!(cumulative_difference(&down, 25).is_err());
    }

    #[test]
    fn spec_rejects_unknown_keys_and_bad_versions() {
        let dir = tempfile::tempdir().unwrap();
        let text = toy_spec_text(dir.path());
        assert!(ExperimentSpec::parse(&text).is_ok());
        assert!(ExperimentSpec::parse(&text.replace("seed = 4", "seed = 4\nspeed = 1")).is_err());
        assert!(ExperimentSpec::parse(&text.replace("schema_version = 1", "schema_version = 9")).is_err());
    }

    #[test]
    fn full_study_grid_has_200_cells() {
        let text = format!(
            "schema_version = 1\noutput = \"x\"\n[synthetic]\nclasses = [\"G\"]\ncases_per_class = 5\ntiles_per_case = 1\n{}",
            crate::encoder::study_conditions()
                .iter()
                .map(|(e, c)| format!("[[runs]]\nencoder = \"{e}\"\ncondition = \"{c}\"\n"))
                .collect::<String>()
        );
        let spec = ExperimentSpec::parse(&text).unwrap();
        let cells = plan_cells(&spec, &EncoderRegistry::study_encoders(), "d").unwrap();
        assert_eq!(cells.len(), 200);
        let keys: BTreeSet<&str> = cells.iter().map(|c| c.key.as_str()).collect();
        assert_eq!(keys.len(), 200);
    }

    #[test]
    fn grid_runs_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        write_registry(dir.path());
        let spec = ExperimentSpec::parse(&toy_spec_text(dir.path())).unwrap();
        let (sweep, report) = run_grid(&spec).unwrap();
        assert_eq!((report.trained, report.reused), (2, 0));
        assert!(report.failed.is_empty());
        assert_eq!(sweep.entries.len(), 1);
        let e = sweep.get("tiny(LP)", 3).unwrap();
        assert_eq!(e.local.fine.total, 6);
        assert_eq!(e.external.as_ref().unwrap().fine.total, 2);

        let (again, report) = run_grid(&spec).unwrap();
        assert_eq!((report.trained, report.reused), (0, 2));
        assert_eq!(again, sweep);

        // Losing one cell's marker retrains only that cell.
        let cell = std::fs::read_dir(spec.output.join("cells")).unwrap().next().unwrap().unwrap();
        std::fs::remove_file(cell.path().join(DONE)).unwrap();
        let (third, report) = run_grid(&spec).unwrap();
        assert_eq!((report.trained, report.reused), (1, 1));
        assert_eq!(third, sweep);

        let files = emit_reports(&sweep, &dir.path().join("report")).unwrap();
        assert_eq!(files.len(), 5);
        let table = std::fs::read_to_string(dir.path().join("report/table_3.md")).unwrap();
        assert!(table.contains("| Local | tiny(LP) |"));
        assert!(table.contains("| External | tiny(LP) |"));
    }

    #[test]
    fn failed_cells_do_not_stop_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        write_registry(dir.path());
        let mut reg = std::fs::read_to_string(dir.path().join("reg.toml")).unwrap();
        reg.push_str("[encoders.broken]\nfamily = \"CNN_CLASS\"\nfeature_dim = 4\nweights = \"toy:x\"\n");
        std::fs::write(dir.path().join("reg.toml"), reg).unwrap();
        let text = toy_spec_text(dir.path()).replace(
            "runs = [",
            "runs = [{ encoder = \"broken\", condition = \"LP\" }, ",
        );
        let spec = ExperimentSpec::parse(&text).unwrap();
        let (sweep, report) = run_grid(&spec).unwrap();
        assert_eq!(report.trained, 2);
        assert_eq!(report.failed.len(), 2);
        assert!(report.failed.iter().all(|f| f.1 == "broken(LP)"));
        assert_eq!(sweep.entries.len(), 1);
        assert!(sweep.get("tiny(LP)", 3).is_some());
    }
}
