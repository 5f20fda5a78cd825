//! LP, FT and RI on the same fold: which parts of the model move, and how well each
//! does after a few epochs.

use pathprobe::cohort::{make_folds, FineLabel};
use pathprobe::encoder::{build_condition, instantiate, toy_spec, Condition, Family};
use pathprobe::evaluator::evaluate_cases;
use pathprobe::synthetic::{synthetic_cohort, SyntheticStore};
use pathprobe::trainer::{predict_cases, train_fold};

fn main() -> pathprobe::Result<()> {
    let cohort = synthetic_cohort(&[FineLabel::G, FineLabel::M, FineLabel::L], 6, 12);
    let plan = make_folds(&cohort, 3, 5)?;
    let (train, val) = plan.split(&cohort, 0);
    let store = SyntheticStore::new(256, 5);
    let spec = toy_spec("toy", Family::CnnClass, 12, 3);

    for cond in [Condition::Lp, Condition::Ft, Condition::Ri] {
        let mut cfg = build_condition(&spec, cond)?.with_patch_limit(10).with_augment(false);
        cfg.max_epochs = 10;
        let start = instantiate(&cfg.encoder)?;
        let out = train_fold(&cfg, &train, &val, &store, None)?;
        let moved = start
            .params()
            .iter()
            .flatten()
            .zip(out.classifier.encoder.params().iter().flatten())
            .filter(|(a, b)| a != b)
            .count();
        let preds = predict_cases(&out.classifier, &val, &store, 10, cfg.seed, 0, &cfg.model_id())?;
        let ev = evaluate_cases(&preds, &val)?;
        println!(
            "{:<10} lr {:.0e}  encoder params changed {:>5}  patch acc {:.3}  cases {}",
            cfg.model_id(),
            cfg.learning_rate,
            moved,
            ev.patch_accuracy_fine,
            ev.fine.overall_fraction()
        );
    }
    Ok(())
}
