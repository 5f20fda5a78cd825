use crate::cohort::{CoarseLabel, FineLabel};
use crate::error::{Error, Result};

use super::PredictionRecord;

/// Modal argmax over `allowed` class indices. Ties go to the highest mean
/// probability among the tied classes, then to the earliest allowed index.
pub fn vote(probabilities: &[&[f64]], allowed: &[usize]) -> Result<usize> {
    if probabilities.is_empty() {
        return Err(Error::Empty("no patch predictions to vote on"));
    }
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("no classes to vote for".into()));
    }
    let mut counts = vec![0usize; allowed.len()];
    let mut sums = vec![0.0f64; allowed.len()];
    for p in probabilities {
        let mut best = 0;
        for (j, &c) in allowed.iter().enumerate() {
            if p[c] > p[allowed[best]] {
                best = j;
            }
            sums[j] += p[c];
        }
        counts[best] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let mut winner: Option<usize> = None;
    for j in 0..allowed.len() {
        if counts[j] != top {
            continue;
        }
        match winner {
            Some(w) if sums[j] <= sums[w] => {}
            _ => winner = Some(j),
        }
    }
    Ok(allowed[winner.expect("at least one class has the top count")])
}

fn check_same_case(records: &[PredictionRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or(Error::Empty("no patch predictions to vote on"))?;
    if let Some(r) = records.iter().find(|r| r.case_id != first.case_id) {
        return Err(Error::InvalidArgument(format!(
            "records from cases `{}` and `{}` mixed in one vote",
            first.case_id, r.case_id
        )));
    }
    Ok(())
}

/// Case label by majority vote over all six classes.
pub fn majority_vote(case_preds: &[PredictionRecord]) -> Result<FineLabel> {
    majority_vote_among(case_preds, &FineLabel::ALL)
}

/// Majority vote restricted to `classes` (per-patch argmax taken among them only).
pub fn majority_vote_among(case_preds: &[PredictionRecord], classes: &[FineLabel]) -> Result<FineLabel> {
    check_same_case(case_preds)?;
    let probs: Vec<&[f64]> = case_preds.iter().map(|r| r.probabilities.as_slice()).collect();
    let allowed: Vec<usize> = classes.iter().map(|c| c.index()).collect();
    let i = vote(&probs, &allowed)?;
    Ok(FineLabel::from_index(i).expect("allowed indices are labels"))
}

/// Majority vote on collapsed coarse vectors, restricted to `classes`.
pub fn coarse_vote_among(case_preds: &[PredictionRecord], classes: &[CoarseLabel]) -> Result<CoarseLabel> {
    check_same_case(case_preds)?;
    let collapsed: Vec<[f64; 4]> = case_preds
        .iter()
        .map(|r| collapse_coarse(&r.probabilities))
        .collect();
    let probs: Vec<&[f64]> = collapsed.iter().map(|c| c.as_slice()).collect();
    let allowed: Vec<usize> = classes.iter().map(|c| c.index()).collect();
    let i = vote(&probs, &allowed)?;
    Ok(CoarseLabel::ALL[i])
}

/// Sums the three glioma probabilities: output order (GLIOMA, M, L, B).
pub fn collapse_coarse(p: &[f64]) -> [f64; 4] {
    [p[0] + p[1] + p[2], p[3], p[4], p[5]]
}

/// Element-wise mean of per-fold probability vectors.
pub fn ensemble_predict(per_fold_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_fold_probs
        .first()
        .ok_or(Error::Empty("no fold predictions"))?;
    let n = first.len();
    let mut out = vec![0.0; n];
    for p in per_fold_probs {
        if p.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                actual: p.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let k = per_fold_probs.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(case: &str, argmax: FineLabel, p_top: f64) -> PredictionRecord {
        let rest = (1.0 - p_top) / 5.0;
        let mut p = vec![rest; 6];
        p[argmax.index()] = p_top;
        PredictionRecord {
            case_id: case.into(),
            patch_id: "x".into(),
            fold: 0,
            model_id: "m".into(),
            probabilities: p,
        }
    }

    #[test]
    fn strict_majority() {
        let r = vec![
            rec("c", FineLabel::G, 0.9),
            rec("c", FineLabel::G, 0.9),
            rec("c", FineLabel::M, 0.9),
        ];
        assert_eq!(majority_vote(&r).unwrap(), FineLabel::G);
        assert_eq!(majority_vote(&[rec("c", FineLabel::L, 0.5)]).unwrap(), FineLabel::L);
        assert!(majority_vote(&[]).is_err());
        let mixed = vec![rec("a", FineLabel::G, 0.9), rec("b", FineLabel::G, 0.9)];
        assert!(majority_vote(&mixed).is_err());
    }

    #[test]
    fn tie_broken_by_mean_probability() {
        // Two patches vote G and two vote M; the tie goes to the larger mean probability.
        let mk = |p: [f64; 6]| PredictionRecord {
            case_id: "c".into(),
            patch_id: "x".into(),
            fold: 0,
            model_id: "m".into(),
            probabilities: p.to_vec(),
        };
        let r = vec![
            mk([0.7, 0.0, 0.0, 0.3, 0.0, 0.0]),
            mk([0.8, 0.0, 0.0, 0.2, 0.0, 0.0]),
            mk([0.35, 0.0, 0.0, 0.55, 0.1, 0.0]),
            mk([0.35, 0.0, 0.0, 0.53, 0.12, 0.0]),
        ];
        // mean p(G) = 0.55, mean p(M) = 0.395
        assert_eq!(majority_vote(&r).unwrap(), FineLabel::G);
        let flipped = vec![
            mk([0.51, 0.0, 0.0, 0.49, 0.0, 0.0]),
            mk([0.51, 0.0, 0.0, 0.49, 0.0, 0.0]),
            mk([0.05, 0.0, 0.0, 0.95, 0.0, 0.0]),
            mk([0.05, 0.0, 0.0, 0.95, 0.0, 0.0]),
        ];
        assert_eq!(majority_vote(&flipped).unwrap(), FineLabel::M);
        // Full tie falls back to class order.
        let even = vec![
            mk([0.6, 0.0, 0.0, 0.4, 0.0, 0.0]),
            mk([0.4, 0.0, 0.0, 0.6, 0.0, 0.0]),
        ];
        assert_eq!(majority_vote(&even).unwrap(), FineLabel::G);
    }

    #[test]
    fn restricted_vote_ignores_background() {
        let r = vec![rec("c", FineLabel::B, 0.9), rec("c", FineLabel::B, 0.9)];
        assert_eq!(majority_vote(&r).unwrap(), FineLabel::B);
        let tumor = majority_vote_among(&r, &FineLabel::TUMOR).unwrap();
        assert_ne!(tumor, FineLabel::B);
    }

    #[test]
    fn collapse_examples() {
        let c = collapse_coarse(&[0.2, 0.3, 0.1, 0.2, 0.1, 0.1]);
        let want = [0.6, 0.2, 0.1, 0.1];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(collapse_coarse(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0]);
        let u = collapse_coarse(&[1.0 / 6.0; 6]);
        assert!((u[0] - 0.5).abs() < 1e-15 && (u[1] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn coarse_vote_merges_gliomas() {
        // Patches split between G and A but each sums to glioma.
        let r = vec![
            rec("c", FineLabel::G, 0.4),
            rec("c", FineLabel::A, 0.4),
            rec("c", FineLabel::M, 0.45),
        ];
        assert_eq!(coarse_vote_among(&r, &CoarseLabel::TUMOR).unwrap(), CoarseLabel::Glioma);
    }

    #[test]
    fn ensemble_examples() {
        let e = ensemble_predict(&[
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(e, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let v = vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.1];
        let same = ensemble_predict(&vec![v.clone(); 5]).unwrap();
        for (a, b) in same.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        let three = ensemble_predict(&[
            vec![0.6, 0.4, 0.0, 0.0, 0.0, 0.0],
            vec![0.3, 0.7, 0.0, 0.0, 0.0, 0.0],
            vec![0.6, 0.4, 0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert!((three[0] - 0.5).abs() < 1e-15 && (three[1] - 0.5).abs() < 1e-15);
        assert!(ensemble_predict(&[vec![1.0], vec![0.5, 0.5]]).is_err());
        assert!(ensemble_predict(&[]).is_err());
    }
}
