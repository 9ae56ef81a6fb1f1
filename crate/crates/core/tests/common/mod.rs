use std::path::Path;

use dtsnl::config::RunConfig;
use dtsnl::synth::{generate_synthetic_dataset, SynthSpec};
use dtsnl::trainer::{load_data, TrainData};

/// Writes a tiny synthetic dataset under `dir` and returns its manifest path.
pub fn tiny_dataset(dir: &Path, unlabeled_per_class: usize) -> std::path::PathBuf {
    let ov = |k: &str, v: Vec<usize>| (k.to_string(), toml::Value::try_from(v).unwrap());
    let spec = SynthSpec::resolve(
        None,
        &[
            ov("labeled", vec![3; 7]),
            ov("unlabeled", vec![unlabeled_per_class; 7]),
            ov("eval", vec![6; 7]),
        ],
    )
    .unwrap();
    generate_synthetic_dataset(&spec, dir).unwrap();
    dir.join("manifest.tsv")
}

pub fn tiny_config(manifest: &Path, extra: &[&str]) -> RunConfig {
    let text = format!(
        r#"
[data]
manifest = "{}"
[train]
epochs = 3
batch_size = 14
steps_per_epoch = 3
learning_rate = 0.003
[model]
widths = [4, 8]
[augment]
working_size = 16
crop = 14
[attention]
reduction = 2
"#,
        manifest.display()
    );
    let ov: Vec<_> = extra.iter().map(|s| dtsnl::config::parse_override(s).unwrap()).collect();
    RunConfig::resolve(&text, &ov).unwrap()
}

#[allow(dead_code)]
pub fn tiny(dir: &Path, extra: &[&str]) -> (RunConfig, TrainData) {
    let cfg = tiny_config(&tiny_dataset(dir, 4), extra);
    let data = load_data(&cfg).unwrap();
    (cfg, data)
}
