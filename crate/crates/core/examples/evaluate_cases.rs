//! Score a prediction dump: majority votes per case, fine and coarse metrics, and
//! the summary table row.

use pathprobe::cohort::{Case, FineLabel};
use pathprobe::evaluator::{evaluate_cases, render_summary_table, summarize_local, PredictionRecord};

fn record(case: &str, patch: usize, fold: usize, top: FineLabel, confidence: f64) -> PredictionRecord {
    let mut probabilities = vec![(1.0 - confidence) / 5.0; 6];
    probabilities[top.index()] = confidence;
    PredictionRecord {
        case_id: case.into(),
        patch_id: format!("p{patch}"),
        fold,
        model_id: "toy(LP)".into(),
        probabilities,
    }
}

fn main() -> pathprobe::Result<()> {
    use FineLabel::*;
    let truth = [(G, [G, G, A]), (A, [A, G, A]), (O, [O, O, O]), (M, [M, L, L]), (L, [L, L, M]), (B, [B, B, B])];
    let mut cases = Vec::new();
    let mut records = Vec::new();
    for (i, (label, votes)) in truth.iter().enumerate() {
        let id = format!("case{i}");
        cases.push(Case::new(id.clone(), *label, (0..3).map(|p| format!("p{p}")).collect()));
        for (p, v) in votes.iter().enumerate() {
            records.push(record(&id, p, i % 2, *v, 0.7));
        }
    }

    let ev = evaluate_cases(&records, &cases)?;
    for c in &ev.cases {
        println!("{:<6} truth {}  voted {}", c.case_id, c.truth, c.fine);
    }
    println!("fine:   macro recall {:.3}, overall {}", ev.fine.macro_recall, ev.fine.overall_fraction());
    println!("coarse: macro recall {:.3}, overall {}", ev.coarse.macro_recall, ev.coarse.overall_fraction());

    let summary = summarize_local("toy(LP)", &records, &cases)?;
    print!("{}", render_summary_table(&[summary]));
    Ok(())
}
