//! Embed pooled features of a local and an external cohort into 2-D, save the
//! atlas and place a new patch on it.

use pathprobe::atlas::{build_atlas, ProjectionAtlas, UmapParams};
use pathprobe::cohort::{FineLabel, Source};
use pathprobe::encoder::{attach_head, toy_encoder, Classifier, NUM_CLASSES};
use pathprobe::synthetic::{synthetic_cohort, SyntheticStore};
use pathprobe::tiler::to_model_input;

fn main() -> pathprobe::Result<()> {
    let labels = [FineLabel::G, FineLabel::O, FineLabel::M, FineLabel::L];
    let mut cases = synthetic_cohort(&labels, 4, 10).cases;
    for mut c in synthetic_cohort(&labels, 2, 10).cases {
        c.case_id = format!("X{}", c.case_id);
        c.source = Source::External;
        cases.push(c);
    }
    let model = Classifier::new(Box::new(toy_encoder(16, 2)?), attach_head(16, NUM_CLASSES, 2)?)?;
    let store = SyntheticStore::new(224, 3);
    let params = UmapParams { n_neighbors: 15, ..UmapParams::default() };
    let atlas = build_atlas(&model, &cases, &store, 10, None, params, 0)?;
    println!("{} points, label silhouette {:.3}", atlas.len(), atlas.label_silhouette()?);

    let path = std::env::temp_dir().join("pathprobe-demo.atlas");
    atlas.save(&path)?;
    let atlas = ProjectionAtlas::load(&path)?;
    let query = store.render(FineLabel::M, "query", "q0");
    let features = model.encoder.features(&to_model_input(&query))?;
    let [x, y] = atlas.project_query(&features)?;
    println!("new meningioma patch lands at ({x:.2}, {y:.2})");
    for label in labels {
        let pts: Vec<_> = atlas.points.iter().filter(|p| p.label == label).collect();
        let cx = pts.iter().map(|p| p.coords[0]).sum::<f64>() / pts.len() as f64;
        let cy = pts.iter().map(|p| p.coords[1]).sum::<f64>() / pts.len() as f64;
        println!("  {label} centroid ({cx:.2}, {cy:.2})");
    }
    Ok(())
}
