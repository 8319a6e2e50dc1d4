use std::path::Path;

use rationale_core::eval::{full_arms, standard_arms, Experiment};
use rationale_core::session::LoopConfig;

fn repo(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn shipped_loop_config_spells_out_the_defaults() {
    let config = LoopConfig::load(repo("configs/loop.json")).unwrap();
    assert_eq!(config, LoopConfig::default());
}

#[test]
fn shipped_experiments_match_the_builtin_arms() {
    for (file, arms) in [
        ("configs/experiment.json", standard_arms()),
        ("configs/full.json", full_arms()),
    ] {
        let exp = Experiment::load(repo(file)).unwrap();
        exp.validate().unwrap();
        assert_eq!(exp.base, LoopConfig::default(), "{file}");
        assert_eq!(exp.arms, arms, "{file}");
        for arm in &exp.arms {
            exp.arm_config(arm, 0).unwrap();
        }
    }
}
