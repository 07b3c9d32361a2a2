//! Regenerate the seed corpus for the fuzz targets.
//!
//! Usage: cargo run -p fpfl --example make_fuzz_corpus [corpus_dir]
//! (default corpus dir: fuzz/corpus, relative to the workspace root)

use std::fs;
use std::path::PathBuf;

use fpfl::config::ExperimentConfig;
use fpfl::datasets::packed;
use fpfl::datasets::{partition_users, PreparedDataset, SplitData, TabularDataset};
use fpfl::nn::{checkpoint, init_params, ArchitectureSpec};

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fuzz/corpus"));

    let write = |target: &str, name: &str, bytes: &[u8]| {
        let dir = root.join(target);
        fs::create_dir_all(&dir).expect("create corpus dir");
        fs::write(dir.join(name), bytes).expect("write seed");
    };

    // checkpoint: a tiny valid shallow model
    let model = init_params(&ArchitectureSpec::shallow_mlp(3), 0).expect("init");
    write("checkpoint_decode", "shallow.bin", &checkpoint::encode(&model));

    // packed dataset: the smallest valid tabular dataset
    let features = ndarray::Array2::from_shape_fn((6, 2), |(i, j)| (i + j) as f64 * 0.25);
    let labels: Vec<u32> = (0..6).map(|i| (i % 2) as u32).collect();
    let groups: Vec<u32> = (0..6).map(|i| (i / 3) as u32).collect();
    let split = TabularDataset {
        features,
        labels,
        groups,
    };
    let dataset = PreparedDataset {
        name: "seed".into(),
        group_count: 2,
        group_names: vec!["a".into(), "b".into()],
        label_count: 2,
        train: SplitData::Tabular(split.clone()),
        test: SplitData::Tabular(split),
        split: partition_users(6, 2.0, 0).expect("partition"),
    };
    let packed_bytes = packed::encode(&dataset).expect("encode");
    write("packed_dataset_decode", "tiny.fpds", &packed_bytes);

    // census rows in both accepted variants
    let census = "\
age,workclass,fnlwgt,education,education-num,marital-status,occupation,relationship,race,sex,capital-gain,capital-loss,hours-per-week,native-country,income-per-year
39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, White, Male, 2174, 0, 40, United-States, <=50K
28, Private, 338409, Bachelors, 13, Married-civ-spouse, Prof-specialty, Wife, Black, Female, 0, 0, 40, Cuba, >50K
|1x3 Cross validator
25, Private, 226802, 11th, 7, Never-married, Machine-op-inspct, Own-child, Black, Male, 0, 0, 40, United-States, <=50K.
37, ?, 284582, Masters, 14, Married-civ-spouse, Exec-managerial, Wife, White, Female, 0, 0, 40, United-States, >50K.
";
    write("census_csv_parse", "rows.csv", census.as_bytes());

    // experiment config
    let config = r#"
name = "seed"
dataset = "adult"
arch = "shallow"
algorithm = "fpfl"
eta = 0.1
gamma = 0.01
c = 2.0
alpha = 0.02
metric = "fnr_parity"
seed = 1

[privacy]
enabled = true
epsilon = 2.0
delta = 5e-5
clip = 2.0

[schedule]
iterations = 10
cohort_size = 5
"#;
    ExperimentConfig::from_toml_str(config).expect("seed config parses");
    write("config_parse", "experiment.toml", config.as_bytes());

    // manifest
    let manifest = packed::manifest_for(&dataset, &packed_bytes, vec![1, 1], 0);
    write(
        "manifest_parse",
        "manifest.json",
        serde_json::to_string_pretty(&manifest)
            .expect("manifest serializes")
            .as_bytes(),
    );

    println!("seed corpus written under {}", root.display());
}
