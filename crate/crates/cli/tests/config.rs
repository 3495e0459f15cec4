use vla_align_cli::config::{AblationAxes, Combine};
use vla_align_cli::ExperimentConfig;
use vla_align_core::alignment::{ProjectorKind, ProjectorSpec};
use vla_align_core::trainer::Mode;

#[test]
fn empty_config_gives_defaults() {
    assert_eq!(ExperimentConfig::from_json("").unwrap(), ExperimentConfig::default());
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    ExperimentConfig::default().validate().unwrap();
}

#[test]
fn negative_lambda_is_rejected() {
    let cfg = ExperimentConfig::from_json(r#"{"align": {"lambda": -1.0}}"#).unwrap();
    let err = format!("{:#}", cfg.validate().unwrap_err());
    assert!(err.contains("lambda"), "{err}");
}

#[test]
fn unknown_keys_are_named() {
    let err = format!("{:#}", ExperimentConfig::from_json(r#"{"train": {"stpes": 3}}"#).unwrap_err());
    assert!(err.contains("stpes"), "{err}");
    let err = format!("{:#}", ExperimentConfig::from_json(r#"{"colour": 1}"#).unwrap_err());
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn config_round_trips() {
    let mut cfg = ExperimentConfig::default();
    cfg.align.lambda = 0.5;
    cfg.ablation.lambda = vec![0.2, 3.0];
    cfg.ablation.projector = vec![ProjectorSpec { kind: ProjectorKind::Rff, ..ProjectorSpec::default() }];
    let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn hash_ignores_seeds_output_and_workers() {
    let a = ExperimentConfig::default();
    let b = a.clone().with_overrides(Some(vec![7, 8]), Some("elsewhere".into()), Some(3)).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.train.lr *= 2.0;
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn invalid_overrides_are_rejected() {
    let cfg = ExperimentConfig::default();
    assert!(cfg.clone().with_overrides(Some(vec![]), None, None).is_err());
    assert!(cfg.clone().with_overrides(Some(vec![1, 1]), None, None).is_err());
    assert!(cfg.with_overrides(None, None, Some(0)).is_err());
}

#[test]
fn lambda_axis_expands_only_align() {
    let mut cfg = ExperimentConfig::default();
    cfg.ablation.lambda = vec![0.2, 0.5, 1.0, 3.0];
    let cells = cfg.cells();
    assert_eq!(cells.len(), 6);
    let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(
        names,
        ["default", "freeze", "align/lambda=0.2", "align/lambda=0.5", "align/lambda=1", "align/lambda=3"]
    );
    assert_eq!(cells[5].align.lambda, 3.0);
    assert!(cells[..2].iter().all(|c| c.mode != Mode::Align));
}

#[test]
fn product_and_separate_grids() {
    let mut cfg = ExperimentConfig::default();
    cfg.ablation = AblationAxes {
        modes: vec![Mode::Align],
        lambda: vec![0.2, 1.0],
        layer: vec![1, 2, 3],
        ..AblationAxes::default()
    };
    assert_eq!(cfg.cells().len(), 6);
    cfg.ablation.combine = Combine::Separate;
    let cells = cfg.cells();
    assert_eq!(cells.len(), 1 + 2 + 3);
    assert_eq!(cells[0].name, "align");
    assert!(cells.iter().any(|c| c.name == "align/layer=3" && c.align.layer == Some(3) && c.align.lambda == 0.2));
}

#[test]
fn default_layers_follow_depth() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.probe.layer(&cfg.model), 4);
    assert_eq!(cfg.probe.attention_layer(&cfg.model), 3);
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.json", "grid.json"] {
        let cfg = ExperimentConfig::parse(&root.join(name)).unwrap();
        assert!(cfg.seeds.len() >= 16 || name == "grid.json", "{name}");
    }
}
