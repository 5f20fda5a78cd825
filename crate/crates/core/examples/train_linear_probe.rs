//! Train a linear probe on a frozen toy encoder for one fold and save the checkpoint.

use pathprobe::cohort::{make_folds, FineLabel};
use pathprobe::encoder::{build_condition, toy_spec, Condition, Family};
use pathprobe::evaluator::evaluate_cases;
use pathprobe::synthetic::{synthetic_cohort, SyntheticStore};
use pathprobe::trainer::{predict_cases, train_fold, FeatureCache};

fn main() -> pathprobe::Result<()> {
    let cohort = synthetic_cohort(&[FineLabel::G, FineLabel::M, FineLabel::L], 20, 25);
    let plan = make_folds(&cohort, 5, 1)?;
    let (train, val) = plan.split(&cohort, 0);
    let store = SyntheticStore::new(512, 1);

    let spec = toy_spec("toy", Family::CnnClass, 16, 7);
    let cfg = build_condition(&spec, Condition::Lp)?.with_patch_limit(25).with_augment(false);
    let cache = FeatureCache::new();
    let out = train_fold(&cfg, &train, &val, &store, Some(&cache))?;
    for e in &out.history.epochs {
        println!(
            "epoch {:>2}  train {:.4}  val {:.4}  val acc {:.3}",
            e.epoch, e.train_loss, e.val_loss, e.val_patch_accuracy
        );
    }
    println!("best epoch {}", out.checkpoint.best_epoch);

    let preds = predict_cases(&out.classifier, &val, &store, 25, cfg.seed, 0, &cfg.model_id())?;
    let ev = evaluate_cases(&preds, &val)?;
    println!("{}: case accuracy {}", cfg.model_id(), ev.fine.overall_fraction());

    let path = std::env::temp_dir().join("pathprobe-lp-checkpoint.json");
    out.checkpoint.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}
