use std::path::{Path, PathBuf};

use dtsnl::config::{parse_override, RunConfig};
use dtsnl::synth::SynthSpec;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn base_config_spells_out_every_default() {
    let cfg = RunConfig::load(&configs().join("base.toml"), &[]).unwrap();
    assert_eq!(cfg, RunConfig::default());
    // The commented optional keys are valid too.
    let text = std::fs::read_to_string(configs().join("base.toml")).unwrap();
    let uncommented: String = text
        .lines()
        .map(|l| l.strip_prefix("# ").filter(|r| r.contains(" = ")).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n");
    RunConfig::resolve(&uncommented, &[]).unwrap();
}

#[test]
fn benchmark_configs_resolve() {
    let manifest = parse_override("data.manifest=bench/manifest.tsv").unwrap();
    let cfg = RunConfig::load(&configs().join("bench.toml"), &[manifest]).unwrap();
    assert!(cfg.train.steps_per_epoch.is_some());
    let text = std::fs::read_to_string(configs().join("synth-bench.toml")).unwrap();
    let spec = SynthSpec::resolve(Some(&text), &[]).unwrap();
    assert!(spec.eval.iter().sum::<usize>() >= 3000);
}
