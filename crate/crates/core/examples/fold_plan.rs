//! Stratified case-level folds and per-case patch caps.

use pathprobe::cohort::{cap_patches, make_folds, FineLabel};
use pathprobe::synthetic::synthetic_cohort;

fn main() -> pathprobe::Result<()> {
    let cohort = synthetic_cohort(&FineLabel::ALL, 7, 30);
    let plan = make_folds(&cohort, 5, 42)?;
    println!("fold sizes {:?}", plan.fold_sizes());
    for fold in 0..5 {
        let (train, val) = plan.split(&cohort, fold);
        let per_class: Vec<String> = FineLabel::ALL
            .iter()
            .map(|l| format!("{l}:{}", val.iter().filter(|c| c.fine_label == *l).count()))
            .collect();
        println!("fold {fold}: {} train / {} val  [{}]", train.len(), val.len(), per_class.join(" "));
    }

    let case = &cohort.cases[0];
    for limit in [10, 25, 100] {
        let capped = cap_patches(case, limit, 42)?;
        println!("{} capped to {limit}: {} refs, first {:?}", case.case_id, capped.len(), &capped[..3]);
    }
    Ok(())
}
