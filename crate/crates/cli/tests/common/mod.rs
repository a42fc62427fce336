#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use moodgen_core::model::ModelFamily;
use moodgen_core::trainer::{train_run, TrainRunConfig};

/// A run small enough to train in a few seconds.
pub fn tiny_config(family: ModelFamily) -> TrainRunConfig {
    TrainRunConfig {
        synthetic_pairs: 300,
        pretrain_g_steps: 40,
        pretrain_d_steps: 10,
        adversarial_steps: 5,
        classifier_steps: 60,
        threads: Some(1),
        ..TrainRunConfig::desk(family)
    }
}

/// Root holding the `cgan` and `cvae` runs, trained once per test binary.
pub fn runs_root() -> &'static Path {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        for (name, family) in [("cgan", ModelFamily::Cgan), ("cvae", ModelFamily::Cvae)] {
            let cfg = tiny_config(family);
            let corpus = cfg.load_corpus().unwrap();
            train_run(&cfg, &corpus, Some(&root.join(name))).unwrap();
        }
        root
    })
}

pub fn run_dir(name: &str) -> PathBuf {
    runs_root().join(name)
}

pub fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}
