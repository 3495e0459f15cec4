use super::*;
use crate::numerics::Tensor;

fn canvas() -> Canvas {
    Canvas::default()
}

fn task(seed: u64, env: Environment) -> Task {
    gen_scene(&mut Prng::new(seed, 0), &SplitSpec::default(), env, canvas()).unwrap()
}

fn replay(ep: &Episode) -> World {
    let mut w = ep.world();
    for &a in &ep.expert_actions {
        w.step_token(a);
    }
    w
}

fn parse_tag(ep: &Episode, key: &str) -> u8 {
    ep.tag(key).unwrap().parse().unwrap()
}

#[test]
fn in_distribution_never_emits_held_out_values() {
    let split = SplitSpec::default();
    let mut rng = Prng::new(0, 0);
    for _ in 0..10_000 {
        let t = gen_scene(&mut rng, &split, Environment::InDistribution, canvas()).unwrap();
        let s = &t.scene;
        assert!(split.objects.train.contains(&s.object.class));
        for b in &s.boards {
            let Glyph::Receptacle(r) = b.glyph else { panic!("non-receptacle board") };
            assert!(split.receptacles.train.contains(&r));
        }
        assert!(split.textures.train.contains(&s.texture));
        assert_eq!(s.noise, 0.0);
        assert!(s.agent.row < 2);
        assert!(t.reposition.is_none());
        assert_ne!(t.tag_template(), 3);
    }
}

impl Task {
    fn tag_template(&self) -> u8 {
        self.tags["template"].parse().unwrap()
    }
}

#[test]
fn same_generator_state_gives_same_scene() {
    assert_eq!(task(5, Environment::Object), task(5, Environment::Object));
    assert_ne!(task(5, Environment::Object), task(6, Environment::Object));
}

#[test]
fn vision_twin_differs_only_in_texture_channel() {
    for seed in 0..50 {
        let id = task(seed, Environment::InDistribution);
        for env in [Environment::Texture, Environment::Noise] {
            let ood = task(seed, env);
            assert_eq!(ood.scene.boards, id.scene.boards);
            assert_eq!(ood.scene.object, id.scene.object);
            assert_eq!(ood.scene.agent, id.scene.agent);
            assert_eq!(ood.instruction, id.instruction);
            let a = render(&id.scene, 2);
            let b = render(&ood.scene, 2);
            assert_ne!(a, b);
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if i % CHANNELS != 2 {
                    assert_eq!(x, y);
                }
            }
        }
    }
}

#[test]
fn cells_without_content_render_background_only() {
    let t = task(1, Environment::InDistribution);
    let img = render(&t.scene, 2);
    let views = parse_render(&img, 4, 2).unwrap();
    let mut empty = 0;
    for (i, v) in views.iter().enumerate() {
        if *v == CellView::default() {
            empty += 1;
            let (r, c) = (i / 4, i % 4);
            for dy in 0..2 {
                for dx in 0..2 {
                    let base = ((r * 2 + dy) * 8 + c * 2 + dx) * CHANNELS;
                    assert_eq!(img.data()[base], 0.0);
                    assert_eq!(img.data()[base + 1], 0.0);
                }
            }
        }
    }
    assert!(empty >= 10);
}

#[test]
fn render_parse_round_trip() {
    let split = SplitSpec::default();
    for seed in 0..300 {
        let env = Environment::ALL[seed as usize % Environment::ALL.len()];
        let t = gen_scene(&mut Prng::new(seed, 1), &split, env, canvas()).unwrap();
        let mut scene = t.scene.clone();
        if seed % 3 == 0 {
            scene.agent = scene.object.cell;
            scene.holding = true;
        }
        let img = render(&scene, 2);
        let parsed = parse_render(&img, 4, 2).unwrap();
        assert_eq!(parsed, scene.cell_views());
        for v in &parsed {
            if let Some((g, _)) = v.board {
                assert!(matches!(Glyph::from_code(g), Some(Glyph::Receptacle(_))));
            }
        }
    }
    assert!(parse_render(&Tensor::zeros(&[6, 6, 3]), 4, 2).is_err());
}

#[test]
fn glyph_codes_are_distinct_and_invertible() {
    let mut all = Vec::new();
    all.extend((0..8).map(Glyph::Object));
    all.extend((0..6).map(Glyph::Receptacle));
    all.extend((0..5).map(Glyph::Shape));
    all.extend((0..4).map(Glyph::Arrow));
    all.extend((1..=9).map(Glyph::Numeral));
    let mut codes: Vec<usize> = all.iter().map(|g| g.code()).collect();
    for g in &all {
        assert_eq!(Glyph::from_code(g.code()), Some(*g));
        assert!(g.code() < NUM_GLYPH_CODES);
    }
    codes.sort_unstable();
    codes.dedup();
    assert_eq!(codes.len(), all.len());
}

#[test]
fn one_cell_change_only_touches_that_cell() {
    let t = task(2, Environment::InDistribution);
    let mut other = t.scene.clone();
    other.object.color = (other.object.color + 1) % 6;
    let a = render(&t.scene, 2);
    let b = render(&other, 2);
    let cell = t.scene.object.cell;
    for y in 0..8 {
        for x in 0..8 {
            let inside = y / 2 == cell.row && x / 2 == cell.col;
            for ch in 0..CHANNELS {
                let i = (y * 8 + x) * CHANNELS + ch;
                if !inside {
                    assert_eq!(a.data()[i], b.data()[i]);
                }
            }
        }
    }
    assert_ne!(a, b);
}

#[test]
fn expert_on_object_with_adjacent_target() {
    let mut scene = task(3, Environment::InDistribution).scene;
    scene.agent = Cell::new(1, 1);
    scene.object.cell = Cell::new(1, 1);
    let plan = expert_policy(&scene, Cell::new(1, 2)).unwrap();
    assert_eq!(plan, vec![Action::Pick, Action::Right, Action::Place]);
    assert!(matches!(
        expert_policy(&scene, Cell::new(4, 0)),
        Err(Error::Planning(_))
    ));
}

#[test]
fn expert_solves_random_scenes_on_shortest_paths() {
    let split = SplitSpec::default();
    let rng = Prng::new(11, 0);
    for i in 0..1000 {
        let env = if i % 2 == 0 { Environment::InDistribution } else { Environment::Pose };
        let t = gen_scene(&mut rng.split(i), &split, env, canvas()).unwrap();
        let plan = expert_policy(&t.scene, t.goal).unwrap();
        let s = &t.scene;
        assert_eq!(
            plan.len(),
            s.agent.manhattan(s.object.cell) + s.object.cell.manhattan(t.goal) + 2
        );
        let mut w = World::new(s.clone(), vec![t.goal], None);
        for a in plan {
            w.step(a);
        }
        assert!(w.success());
    }
}

#[test]
fn repositioned_episodes_replan_and_succeed() {
    let split = SplitSpec::default();
    let rng = Prng::new(12, 0);
    let mut moved = 0;
    for i in 0..300 {
        let t = gen_scene(&mut rng.split(i), &split, Environment::Reposition, canvas()).unwrap();
        let rp = t.reposition.unwrap();
        let ep = build_episode(&t, canvas()).unwrap();
        assert!(replay(&ep).success());
        if rp.cell != t.scene.object.cell && rp.step > 0 {
            moved += 1;
            // frames before the teleport show the original placement
            let before = parse_render(&ep.frames[0], 4, 2).unwrap();
            assert!(before[t.scene.object.cell.index(4)].object.is_some()
                || t.scene.agent == t.scene.object.cell);
            let after = parse_render(&ep.frames[rp.step as usize], 4, 2).unwrap();
            assert!(after[rp.cell.index(4)].object.is_some());
        }
    }
    assert!(moved > 100);
}

#[test]
fn dataset_examples_and_determinism() {
    let split = SplitSpec::default();
    let rng = Prng::new(21, 3);
    assert!(matches!(
        make_dataset(0, &split, Environment::InDistribution, &rng, canvas()),
        Err(Error::Input(_))
    ));
    let a = make_dataset(20, &split, Environment::InDistribution, &rng, canvas()).unwrap();
    let b = make_dataset(20, &split, Environment::InDistribution, &rng, canvas()).unwrap();
    assert_eq!(episodes_to_string(&a), episodes_to_string(&b));
    for ep in &a {
        assert!(replay(ep).success());
        assert_eq!(ep.frames.len(), ep.expert_actions.len());
        let put = vocab::word("put").unwrap();
        let place = vocab::word("place").unwrap();
        let mv = vocab::word("move").unwrap();
        assert!([put, place, mv].contains(&ep.instruction_tokens[0]));
    }
}

#[test]
fn episode_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.jsonl");
    let eps = make_dataset(5, &SplitSpec::default(), Environment::Noise, &Prng::new(1, 0), canvas()).unwrap();
    write_episodes(&path, &eps).unwrap();
    let back = read_episodes(&path).unwrap();
    assert_eq!(back, eps);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(EPISODE_HEADER));
    std::fs::write(&path, "not a header\n").unwrap();
    assert!(matches!(read_episodes(&path), Err(Error::Format(_))));
}

#[test]
fn every_environment_uses_only_its_pools() {
    let split = SplitSpec::default();
    for env in Environment::ALL {
        let eps = make_dataset(40, &split, env, &Prng::new(9, 0), canvas()).unwrap();
        for ep in &eps {
            assert!(replay(ep).success());
            let check = |key: &str, f: &Factor<u8>, e: Environment| {
                let v = parse_tag(ep, key);
                assert!(f.pool(env == e).contains(&v), "{env} {key}={v}");
            };
            check("object", &split.objects, Environment::Object);
            check("receptacle", &split.receptacles, Environment::Receptacle);
            check("template", &split.templates, Environment::Instruction);
            check("texture", &split.textures, Environment::Texture);
            check("start_region", &split.start_regions, Environment::Pose);
            let noise: f64 = ep.tag("noise").unwrap().parse().unwrap();
            assert!(split.noise.pool(env == Environment::Noise).contains(&noise));
            let rep: bool = ep.tag("reposition").unwrap().parse().unwrap();
            assert_eq!(rep, env == Environment::Reposition);
            assert_eq!(ep.tag("environment"), Some(env.name()));
        }
    }
}

#[test]
fn split_validation() {
    let mut s = SplitSpec::default();
    s.objects.held_out.push(0);
    assert!(matches!(s.validate(), Err(Error::Config(_))));
    let mut s = SplitSpec::default();
    s.textures.held_out.clear();
    assert!(matches!(
        gen_scene(&mut Prng::new(0, 0), &s, Environment::Texture, canvas()),
        Err(Error::Config(_))
    ));
    let mut s = SplitSpec::default();
    s.objects.train.push(9);
    assert!(s.validate().is_err());
}

#[test]
fn parity_and_shape_examples() {
    let board = |glyph| Board {
        cell: Cell::new(0, 0),
        glyph,
        color: 0,
    };
    let three = board(Glyph::Numeral(3));
    let eight = board(Glyph::Numeral(8));
    assert!(Concept::Parity(true).matches(&three));
    assert!(!Concept::Parity(true).matches(&eight));
    let star = board(Glyph::Shape(0));
    let circle = board(Glyph::Shape(1));
    assert!(Concept::Shape(0).matches(&star));
    assert!(!Concept::Shape(0).matches(&circle));
    assert!(matches!(Category::parse("icon"), Err(Error::Config(_))));
}

#[test]
fn vlthink_tasks_have_unique_targets() {
    for cat in Category::ALL {
        let eps = make_vlthink_tasks(cat, 200, &Prng::new(4, 0), canvas()).unwrap();
        for ep in &eps {
            let concept = episode_concept(ep).unwrap();
            let matching: Vec<_> = ep.scene.boards.iter().filter(|b| concept.matches(b)).collect();
            assert_eq!(matching.len(), 1, "{cat:?}");
            assert_eq!(vec![matching[0].cell], ep.success_cells);
            assert!((2..=4).contains(&ep.scene.boards.len()));
            assert!(replay(ep).success());
        }
    }
}

#[test]
fn perturbation_examples() {
    let mut rng = Prng::new(31, 0);
    let eps = make_dataset(20, &SplitSpec::default(), Environment::InDistribution, &Prng::new(30, 0), canvas()).unwrap();
    for ep in &eps {
        assert_eq!(&perturb(ep, Axis::Vision, 0.0, &mut rng, canvas()).unwrap(), ep);
        assert_eq!(&perturb(ep, Axis::Execution, 0.0, &mut rng, canvas()).unwrap(), ep);
        assert!(matches!(perturb(ep, Axis::Semantic, 0.5, &mut rng, canvas()), Err(Error::Config(_))));
        assert!(matches!(perturb(ep, Axis::Vision, 1.5, &mut rng, canvas()), Err(Error::Input(_))));

        let v = perturb(ep, Axis::Vision, 0.5, &mut rng, canvas()).unwrap();
        assert_eq!(v.expert_actions, ep.expert_actions);
        for (a, b) in ep.frames.iter().zip(&v.frames) {
            for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if i % CHANNELS != 2 {
                    assert_eq!(x, y);
                }
            }
        }

        let e = perturb(ep, Axis::Execution, 1.0, &mut rng, canvas()).unwrap();
        let step = e.reposition.unwrap().step as usize;
        for t in 0..step.min(ep.frames.len()) {
            assert_eq!(e.frames[t], ep.frames[t]);
        }
        assert!(replay(&e).success());
    }
}

#[test]
fn training_sequences_pad_the_last_chunk() {
    let ep = &make_dataset(1, &SplitSpec::default(), Environment::InDistribution, &Prng::new(2, 2), canvas()).unwrap()[0];
    let seqs = ep.training_sequences(3).unwrap();
    assert_eq!(seqs.len(), ep.frames.len());
    let last = seqs.last().unwrap();
    assert_eq!(last.targets, vec![Action::Place.token(), PAD, PAD]);
    assert_eq!(last.mask, vec![1, 0, 0]);
    assert_eq!(seqs[0].targets[0], ep.expert_actions[0]);
    assert!(ep.training_sequences(0).is_err());
}
