//! Command-line entry point: `tile`, `split`, `train`, `sweep`, `eval`, `project`,
//! `report` and `serve`. Flags can also be set through `PATHPROBE_*` variables.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::atlas::{build_atlas, UmapParams};
use crate::cohort::{load_manifest, make_folds, save_manifest, Case, CohortManifest, FineLabel, Source};
use crate::encoder::Condition;
use crate::error::{Error, IoContext, Result};
use crate::evaluator::{
    evaluate_cases, expanded_confusion, read_predictions, render_summary_table, summarize_external,
    summarize_local, write_predictions,
};
use crate::experiments::{emit_reports, run_grid, ExperimentSpec, GridData, SweepResult};
use crate::serve::{ServeConfig, DEFAULT_MAX_IMAGE_BYTES};
use crate::tiler::{export_tiles, write_tile_index, RoiImage, DEFAULT_TILE_SIZE, DEFAULT_WHITE_THRESHOLD};
use crate::trainer::{predict_cases, train_fold, Checkpoint};
use crate::util;

#[derive(Debug, Parser)]
#[command(name = "pathprobe", version, about = "Transfer-learning workbench for brain-tumor histopathology")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    Local,
    External,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut the ROI images of one case into tiles and write a manifest record.
    Tile {
        /// An ROI image or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        case_id: String,
        #[arg(long)]
        label: FineLabel,
        #[arg(long, default_value = "local")]
        source: String,
        #[arg(long)]
        subtype: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
        tile_size: u32,
        #[arg(long, default_value_t = DEFAULT_WHITE_THRESHOLD)]
        white_threshold: f64,
        #[arg(long, env = "PATHPROBE_OUT")]
        out: PathBuf,
    },
    /// Stratified case-level folds for a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, env = "PATHPROBE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "PATHPROBE_OUT")]
        out: PathBuf,
    },
    /// Train one (encoder, condition, patch limit) configuration on one fold.
    Train {
        #[arg(long, env = "PATHPROBE_SPEC")]
        spec: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        condition: Condition,
        #[arg(long)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, env = "PATHPROBE_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "PATHPROBE_OUT")]
        out: Option<PathBuf>,
    },
    /// Run or resume the full experiment grid.
    Sweep {
        #[arg(long, env = "PATHPROBE_SPEC")]
        spec: PathBuf,
        #[arg(long, env = "PATHPROBE_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "PATHPROBE_OUT")]
        out: Option<PathBuf>,
        #[arg(long, env = "PATHPROBE_PARALLEL")]
        parallel: Option<usize>,
    },
    /// Case-level metrics and a summary row from a prediction dump.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "local")]
        dataset: DatasetArg,
        /// Model id for the table; taken from the dump when absent.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, env = "PATHPROBE_OUT")]
        out: Option<PathBuf>,
    },
    /// Fit a feature atlas from a checkpoint's encoder.
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cases to embed; alternatively the data section of `--spec`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, env = "PATHPROBE_SPEC")]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        per_case: usize,
        #[arg(long, default_value_t = 70)]
        n_neighbors: usize,
        #[arg(long, default_value_t = 0.5)]
        min_dist: f64,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, env = "PATHPROBE_SEED", default_value_t = 0)]
        seed: u64,
        /// Atlas file to write; thumbnails go next to it.
        #[arg(long, env = "PATHPROBE_ATLAS")]
        atlas: PathBuf,
    },
    /// Summary tables and plot data from a sweep.
    Report {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long, env = "PATHPROBE_OUT")]
        out: PathBuf,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, env = "PATHPROBE_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "PATHPROBE_MODELS")]
        models: Option<PathBuf>,
        #[arg(long, env = "PATHPROBE_ATLAS")]
        atlas: Option<PathBuf>,
        #[arg(long, env = "PATHPROBE_MAX_IMAGE_BYTES", default_value_t = DEFAULT_MAX_IMAGE_BYTES)]
        max_image_bytes: usize,
    },
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the exit
/// code: 0 on success, 2 for usage errors, 1 for failures.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATHPROBE_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tile {
            input,
            case_id,
            label,
            source,
            subtype,
            tile_size,
            white_threshold,
            out,
        } => tile(&input, &case_id, label, &source, subtype, tile_size, white_threshold, &out),
        Command::Split {
            manifest,
            folds,
            seed,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let plan = make_folds(&m, folds, seed)?;
            util::write_atomic(&out, &serde_json::to_vec_pretty(&plan)?)?;
            println!("{} cases in {} folds of sizes {:?}", m.cases.len(), folds, plan.fold_sizes());
            Ok(())
        }
        Command::Train {
            spec,
            encoder,
            condition,
            limit,
            fold,
            seed,
            out,
        } => train(&spec, &encoder, condition, limit, fold, seed, out),
        Command::Sweep {
            spec,
            seed,
            out,
            parallel,
        } => {
            let mut s = ExperimentSpec::load(&spec)?;
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = out {
                s.output = v;
            }
            if let Some(v) = parallel {
                s.parallel = v;
            }
            let (sweep, report) = run_grid(&s)?;
            println!(
                "{} cells trained, {} reused, {} failed; {} summaries in {}",
                report.trained,
                report.reused,
                report.failed.len(),
                sweep.entries.len(),
                s.output.join("sweep.json").display()
            );
            for (key, model, fold, msg) in &report.failed {
                eprintln!("failed: {model} fold {fold} ({key}): {msg}");
            }
            if report.failed.is_empty() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{} cells failed", report.failed.len())))
            }
        }
        Command::Eval {
            predictions,
            manifest,
            dataset,
            model,
            out,
        } => eval(&predictions, &manifest, dataset, model, out),
        Command::Project {
            checkpoint,
            manifest,
            spec,
            per_case,
            n_neighbors,
            min_dist,
            spread,
            seed,
            atlas,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let clf = ckpt.classifier()?;
            let (cases, store): (Vec<Case>, Box<dyn crate::data::PatchStore>) = match (manifest, spec) {
                (Some(m), _) => (load_manifest(&m)?.cases, Box::new(crate::data::DirectoryStore)),
                (None, Some(s)) => {
                    let data = GridData::from_spec(&ExperimentSpec::load(&s)?)?;
                    let mut cases = data.local.cases;
                    cases.extend(data.external);
                    (cases, data.store)
                }
                (None, None) => {
                    return Err(Error::InvalidArgument("give --manifest or --spec".into()));
                }
            };
            let params = UmapParams {
                n_neighbors,
                min_dist,
                spread,
                ..UmapParams::default()
            };
            let thumbs = atlas.with_extension("thumbs");
            let a = build_atlas(&clf, &cases, store.as_ref(), per_case, Some(&thumbs), params, seed)?;
            a.save(&atlas)?;
            match a.label_silhouette() {
                Ok(s) => println!("{} points, label silhouette {s:.3}", a.len()),
                Err(_) => println!("{} points", a.len()),
            }
            Ok(())
        }
        Command::Report { sweep, out } => {
            let s = SweepResult::load(&sweep)?;
            for p in emit_reports(&s, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Serve {
            bind,
            models,
            atlas,
            max_image_bytes,
        } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: PathBuf::from("<runtime>"),
                source: e,
            })?;
            rt.block_on(crate::serve::serve(ServeConfig {
                bind,
                models,
                atlas,
                max_image_bytes,
            }))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn tile(
    input: &Path,
    case_id: &str,
    label: FineLabel,
    source: &str,
    subtype: Option<String>,
    tile_size: u32,
    threshold: f64,
    out: &Path,
) -> Result<()> {
    let source = match source.to_ascii_lowercase().as_str() {
        "local" => Source::Local,
        "external" => Source::External,
        other => return Err(Error::InvalidArgument(format!("unknown source `{other}`"))),
    };
    let rois: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .at(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff" | "jpg" | "jpeg"))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if rois.is_empty() {
        return Err(Error::Empty("ROI images"));
    }
    let mut index = Vec::new();
    for (i, p) in rois.iter().enumerate() {
        let roi = RoiImage::open(p)?.rescale_to(crate::tiler::REFERENCE_MICRONS_PER_PIXEL);
        let prefix = if rois.len() == 1 {
            case_id.to_string()
        } else {
            format!("{case_id}-r{i}")
        };
        index.extend(export_tiles(&roi, &prefix, label, tile_size, threshold, out)?);
    }
    write_tile_index(&index, &out.join("index.tsv"))?;
    let patches: Vec<String> = index.iter().filter(|r| r.kept).map(|r| format!("{}.png", r.tile_id)).collect();
    let kept = patches.len();
    let mut case = Case::new(case_id, label, patches);
    case.source = source;
    case.subtype = subtype;
    case.patch_dir = Some(PathBuf::from("."));
    save_manifest(&CohortManifest::new(vec![case])?, &out.join("case.jsonl"))?;
    println!("{case_id}: {} tiles, {kept} kept", index.len());
    Ok(())
}

fn train(
    spec_path: &Path,
    encoder: &str,
    condition: Condition,
    limit: usize,
    fold: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.runs = vec![crate::experiments::RunSpec {
        encoder: encoder.to_string(),
        condition,
    }];
    spec.patch_limits = vec![limit];
    if fold >= spec.folds {
        return Err(Error::InvalidArgument(format!("fold {fold} is out of range for {} folds", spec.folds)));
    }
    let registry = match &spec.registry {
        Some(p) => crate::encoder::EncoderRegistry::load(p)?,
        None => crate::encoder::EncoderRegistry::study_encoders(),
    };
    let data = GridData::from_spec(&spec)?;
    let plan = make_folds(&data.local, spec.folds, spec.seed)?;
    let cells = crate::experiments::plan_cells(&spec, &registry, "")?;
    let cell = &cells[fold];
    let cfg = &cell.config;
    let dir = out.unwrap_or_else(|| {
        spec.output
            .join("runs")
            .join(format!("{}-{}-f{fold}", cfg.model_id().replace(['(', ')', ' '], "_"), limit))
    });
    std::fs::create_dir_all(&dir).at(&dir)?;
    let (tr, val) = plan.split(&data.local, fold);
    let outcome = train_fold(cfg, &tr, &val, data.store.as_ref(), None)?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    util::write_atomic(&dir.join("history.jsonl"), outcome.history.to_jsonl().as_bytes())?;
    let preds = predict_cases(&outcome.classifier, &val, data.store.as_ref(), limit, cfg.seed, fold, &cfg.model_id())?;
    write_predictions(&preds, &dir.join("local.jsonl"))?;
    let ev = evaluate_cases(&preds, &val)?;
    println!(
        "{} fold {fold}: best epoch {}, fine macro recall {:.3}, overall {}",
        cfg.model_id(),
        outcome.checkpoint.best_epoch,
        ev.fine.macro_recall,
        ev.fine.overall_fraction()
    );
    Ok(())
}

fn eval(
    predictions: &Path,
    manifest: &Path,
    dataset: DatasetArg,
    model: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let records = read_predictions(predictions)?;
    let cases = load_manifest(manifest)?.cases;
    let model = model
        .or_else(|| records.first().map(|r| r.model_id.clone()))
        .ok_or(Error::Empty("prediction dump"))?;
    let summary = match dataset {
        DatasetArg::Local => summarize_local(&model, &records, &cases)?,
        DatasetArg::External => summarize_external(&model, &records, &cases)?,
    };
    print!("{}", render_summary_table(std::slice::from_ref(&summary)));
    let mut report: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    report.insert("summary", serde_json::to_value(&summary)?);
    if dataset == DatasetArg::External && cases.iter().any(|c| c.subtype.is_some()) {
        report.insert("subtype_confusion", serde_json::to_value(expanded_confusion(&records, &cases)?)?);
    }
    let pooled = match dataset {
        DatasetArg::Local => evaluate_cases(&records, &cases)?,
        DatasetArg::External => evaluate_cases(&crate::evaluator::ensemble_records(&records)?, &cases)?,
    };
    report.insert("evaluation", serde_json::to_value(&pooled)?);
    if let Some(p) = out {
        util::write_atomic(&p, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}
