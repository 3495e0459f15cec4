#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use vla_align_cli::ExperimentConfig;

/// A configuration small enough to run the whole pipeline in seconds.
pub fn tiny_config(out: &Path, seeds: &[u64]) -> ExperimentConfig {
    let json = r#"{
        "model": { "layers": 2, "width": 16, "heads": 2, "vocab": 96, "max_len": 32 },
        "teacher": { "d_t": 8 },
        "pretrain": { "steps": 40, "batch_size": 4, "lr": 0.003, "optimizer": "adam" },
        "train": { "steps": 8, "batch_size": 4, "lr": 0.001, "optimizer": "adam" },
        "dataset": { "train_episodes": 8, "pretrain_episodes": 8, "pretrain_vlthink": 4, "eval_episodes": 4 },
        "probe": { "tasks_per_category": 40, "attention_episodes": 4, "linear": { "epochs": 5 } }
    }"#;
    let mut cfg = ExperimentConfig::from_json(json).unwrap();
    cfg.seeds = seeds.to_vec();
    cfg.out = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

/// Every file under `root`, relative, sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}
