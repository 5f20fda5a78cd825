//! A small experiment grid from a TOML spec: one encoder, two conditions, three
//! patch limits, 3-fold cross-validation, then the report files.

use pathprobe::experiments::{emit_reports, run_grid, summary_table, ExperimentSpec};

const SPEC: &str = r#"
schema_version = 1
output = "out"
registry = "encoders.toml"
folds = 3
seed = 11
patch_limits = [4, 8, 16]
augment = false
parallel = 2
runs = [
  { encoder = "toy", condition = "LP" },
  { encoder = "toy", condition = "FT" },
]

[training]
max_epochs = 6
batch_size = 16

[synthetic]
classes = ["G", "O", "M"]
cases_per_class = 4
tiles_per_case = 16
tile_size = 160
"#;

const REGISTRY: &str = r#"
schema_version = 1
[encoders.toy]
family = "CNN_CLASS"
feature_dim = 12
weights = "toy:5"
"#;

fn main() -> pathprobe::Result<()> {
    let dir = std::env::temp_dir().join("pathprobe-patch-sweep");
    std::fs::create_dir_all(&dir).expect("temp dir");
    std::fs::write(dir.join("spec.toml"), SPEC).expect("write spec");
    std::fs::write(dir.join("encoders.toml"), REGISTRY).expect("write registry");

    let spec = ExperimentSpec::load(&dir.join("spec.toml"))?;
    let (sweep, report) = run_grid(&spec)?;
    println!("{} cells trained, {} reused from an earlier run", report.trained, report.reused);
    print!("{}", summary_table(&sweep, 16));
    for p in emit_reports(&sweep, &dir.join("reports"))? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
