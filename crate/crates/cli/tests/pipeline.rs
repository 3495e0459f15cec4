mod support;

use std::fs;
use std::process::Command;

use vla_align_cli::pipeline::{read_json, EvalOutput};
use vla_align_cli::report::{build_report, BASELINE_CELL};
use vla_align_cli::rollout::{replay, rollout};
use vla_align_cli::{Experiment, MissingArtifact};
use vla_align_core::model::init_params;
use vla_align_core::probes::{wilcoxon_one_sided, PairedSamples};
use vla_align_core::taskgen::{make_dataset, Canvas, Environment, SplitSpec};
use vla_align_core::Prng;

use support::tiny_config;

#[test]
fn expert_replay_succeeds_and_rollouts_are_deterministic() {
    let cfg = tiny_config(std::path::Path::new("unused"), &[0]);
    let canvas = Canvas::for_model(&cfg.model).unwrap();
    let params = init_params(&cfg.model, &mut Prng::new(3, 0)).unwrap();
    for env in Environment::ALL {
        let eps = make_dataset(4, &SplitSpec::default(), env, &Prng::new(11, 0), canvas).unwrap();
        for ep in &eps {
            let tokens: Vec<usize> = ep.expert_actions.clone();
            assert!(replay(ep, &tokens), "{env}");
            assert!(!replay(ep, &[]), "{env}");
            let none = rollout(&cfg.model, &params, ep, 0).unwrap();
            assert!(!none.success && none.actions.is_empty());
            let a = rollout(&cfg.model, &params, ep, 6).unwrap();
            let b = rollout(&cfg.model, &params, ep, 6).unwrap();
            assert_eq!(a, b);
            assert!(a.actions.len() <= 6);
        }
    }
}

#[test]
fn commands_before_gen_data_report_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(tiny_config(dir.path(), &[0])).unwrap();
    for result in [exp.run_pretrain(), exp.run_finetune(), exp.run_eval(), exp.run_ablate().map(|_| ())] {
        let err = result.unwrap_err();
        assert!(err.downcast_ref::<MissingArtifact>().is_some(), "{err:#}");
    }
    assert!(exp.run_report().unwrap_err().downcast_ref::<MissingArtifact>().is_some());
}

#[test]
fn binary_exits_with_code_three_on_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, tiny_config(&dir.path().join("out"), &[0]).to_json()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vla-align"))
        .args(["--config", cfg_path.to_str().unwrap(), "eval"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prerequisite"));

    fs::write(&cfg_path, r#"{"align": {"lambda": -1}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vla-align"))
        .args(["--config", cfg_path.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let seeds = [0, 1, 2];
    let exp = Experiment::new(tiny_config(dir.path(), &seeds)).unwrap();
    exp.gen_data().unwrap();
    exp.run_pretrain().unwrap();
    let grid = exp.run_ablate().unwrap();
    assert_eq!(grid.cells.len(), 3);
    let table = exp.run_report().unwrap();

    // one eval record per (cell, seed, environment)
    let mut evals: Vec<EvalOutput> = Vec::new();
    for cell in &grid.cells {
        for &s in &seeds {
            let e: EvalOutput = read_json(&exp.run_dir(&cell.name, s).join("eval.json")).unwrap();
            assert_eq!(e.records.len(), Environment::ALL.len());
            assert_eq!(e.config_hash, exp.hash);
            evals.push(e);
        }
    }
    assert_eq!(evals.iter().map(|e| e.records.len()).sum::<usize>(), 3 * 3 * 8);

    // expert scores 1 everywhere
    for r in table.rows.iter().filter(|r| r.cell == "expert") {
        assert_eq!(r.mean, 1.0, "{r:?}");
    }

    // p-values recomputed from the per-seed eval files
    let rate = |cell: &str, env: Environment| -> Vec<f64> {
        seeds
            .iter()
            .map(|&s| {
                let e = evals.iter().find(|e| e.cell == cell && e.seed == s).unwrap();
                e.records.iter().find(|r| r.environment == env).unwrap().rate
            })
            .collect()
    };
    for cell in ["freeze", "align"] {
        for env in Environment::ALL {
            let expect = wilcoxon_one_sided(&PairedSamples::new(rate(BASELINE_CELL, env), rate(cell, env)).unwrap());
            let row = table.rows.iter().find(|r| r.cell == cell && r.environment == env.name()).unwrap();
            assert_eq!(row.p_vs_default, Some(expect.p_value), "{cell} {env}");
        }
    }

    for name in ["report.csv", "ablation.csv", "probes.csv"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={}", exp.hash), "{name}");
    }

    let n = exp.run_attn_export().unwrap();
    assert_eq!(n, (1 + seeds.len()) * 4 * 2);
    let pgm = fs::read(dir.path().join("attn/default/seed_0/ep0_layer1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    assert!(String::from_utf8_lossy(&pgm).contains(&exp.hash));
}

#[test]
fn report_refuses_mixed_hashes() {
    let make = |hash: &str, cell: &str| EvalOutput {
        config_hash: hash.to_string(),
        cell: cell.to_string(),
        seed: 0,
        records: Vec::new(),
    };
    let err = build_report("aaaa", vec![make("aaaa", "default"), make("bbbb", "align")], Vec::new(), None)
        .unwrap_err();
    assert!(format!("{err}").contains("bbbb"));
}

#[test]
fn stale_artifacts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &[0]);
    Experiment::new(cfg.clone()).unwrap().gen_data().unwrap();
    let mut other = cfg;
    other.train.lr *= 2.0;
    let exp = Experiment::new(other).unwrap();
    let err = format!("{:#}", exp.run_pretrain().unwrap_err());
    assert!(err.contains("config"), "{err}");
}
