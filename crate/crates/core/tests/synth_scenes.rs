use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crtnet::model::BoundingBox;
use crtnet::synth::*;
use crtnet::tensor::Rng;
use crtnet::Error;

fn generator() -> SceneGenerator {
    SceneGenerator::new(default_roster(), SceneConfig::default()).unwrap()
}

fn within(p: (usize, usize), boxes: &[BoundingBox]) -> bool {
    boxes.iter().any(|b| b.contains(p.0, p.1))
}

fn surface_ys(scene: &Scene) -> Vec<usize> {
    scene.room.surfaces.iter().map(|s| s.y).collect()
}

#[test]
fn base_scene_rests_on_a_surface_in_a_home_room() {
    let g = generator();
    let mut failures = 0;
    for seed in 0..400 {
        let class_id = seed as usize % g.roster.len();
        let scene = match g.generate_base_scene(&mut Rng::new(seed), class_id) {
            Err(Error::Generation(_)) => {
                failures += 1;
                continue;
            }
            other => other.unwrap(),
        };
        let t = scene.target;
        assert!(surface_ys(&scene).contains(&t.bbox.bottom()));
        assert!(t.supported);
        assert!(g.roster.classes[class_id]
            .home_rooms
            .contains(&scene.room.room_kind));
        scene.room.validate(scene.side).unwrap();
        for d in &scene.distractors {
            let overlap = d.bbox.x < t.bbox.right()
                && t.bbox.x < d.bbox.right()
                && d.bbox.y < t.bbox.bottom()
                && t.bbox.y < d.bbox.bottom();
            assert!(!overlap, "seed {seed}: distractor overlaps target");
        }
        // Horizontally centered within the jitter band.
        let (cx, _) = t.bbox.midpoint();
        assert!(
            (cx - 48.0).abs() <= 0.1 * 96.0 + 1.0,
            "seed {seed}: cx {cx}"
        );
    }
    // Rare enough that reseeding is cheap.
    assert!(failures < 8, "{failures} layout failures");
}

#[test]
fn same_seed_same_pixels() {
    let g = generator();
    for c in ConditionTag::ALL {
        let a = g.generate_sample(77, c, 3).unwrap();
        let b = g.generate_sample(77, c, 3).unwrap();
        assert_eq!(a, b);
    }
    assert_ne!(
        g.generate_sample(77, ConditionTag::Normal, 3)
            .unwrap()
            .image,
        g.generate_sample(78, ConditionTag::Normal, 3)
            .unwrap()
            .image
    );
}

#[test]
fn gravity_lifts_only_the_target() {
    let g = generator();
    let lift = g.config.lift_pixels();
    assert_eq!(lift, 24);
    let mut clamped = 0;
    for seed in 0..50 {
        let class_id = seed as usize % g.roster.len();
        let scene = g
            .generate_base_scene(&mut Rng::new(seed), class_id)
            .unwrap();
        let lifted = g.apply_gravity(&scene.target);
        if lifted.clamped {
            clamped += 1;
            assert!(scene.target.bbox.y < lift + 1);
            assert_eq!(lifted.bbox.y, 1);
        } else {
            assert_eq!(lifted.bbox.y, scene.target.bbox.y - lift);
        }
        assert_eq!(
            (lifted.bbox.x, lifted.bbox.w, lifted.bbox.h),
            (
                scene.target.bbox.x,
                scene.target.bbox.w,
                scene.target.bbox.h
            )
        );
        assert!(!surface_ys(&scene).contains(&lifted.bbox.bottom()));
        assert!(!lifted.supported);

        let normal = g
            .generate_sample(seed, ConditionTag::Normal, class_id)
            .unwrap();
        let gravity = g
            .generate_sample(seed, ConditionTag::Gravity, class_id)
            .unwrap();
        assert_eq!(gravity.bbox, lifted.bbox);
        let diff = normal.image.diff_pixels(&gravity.image);
        assert!(!diff.is_empty());
        assert!(diff
            .iter()
            .all(|&p| within(p, &[normal.bbox, gravity.bbox])));
    }
    assert!(clamped < 25, "{clamped} of 50 clamped");
}

#[test]
fn gravity_clamps_at_the_top() {
    let g = generator();
    let p = Placement {
        class_id: 0,
        bbox: BoundingBox::new(40, 5, 14, 14),
        supported: true,
        clamped: false,
    };
    let lifted = g.apply_gravity(&p);
    assert!(lifted.clamped);
    assert_eq!(lifted.bbox.y, 1);
}

#[test]
fn cooccurrence_rooms_are_uniform_over_non_home_rooms() {
    let g = generator();
    let mut rng = Rng::new(2024);
    for class in &g.roster.classes {
        let rooms = class.non_home_rooms();
        let mut counts: BTreeMap<RoomKind, usize> = BTreeMap::new();
        let draws = 1000;
        for _ in 0..draws {
            let r = g.apply_cooccurrence(class.class_id, &mut rng).unwrap();
            assert!(!class.home_rooms.contains(&r));
            *counts.entry(r).or_default() += 1;
        }
        assert_eq!(counts.len(), rooms.len());
        let expected = 1.0 / rooms.len() as f64;
        for (room, n) in counts {
            let freq = n as f64 / draws as f64;
            assert!(
                (freq - expected).abs() <= 0.05,
                "{} in {room}: {freq}",
                class.name
            );
        }
    }
}

#[test]
fn cooccurrence_scene_is_supported_in_a_foreign_room() {
    let g = generator();
    for seed in 0..50 {
        let class_id = seed as usize % g.roster.len();
        let s = g
            .generate_sample(seed, ConditionTag::CoOccur, class_id)
            .unwrap();
        assert!(!g.roster.classes[class_id].home_rooms.contains(&s.room_kind));
        let mut rng = Rng::new(seed);
        let room = g.apply_cooccurrence(class_id, &mut rng).unwrap();
        let scene = g.scene_in_room(&mut rng, class_id, room).unwrap();
        assert_eq!(scene.target.bbox, s.bbox);
        assert!(surface_ys(&scene).contains(&s.bbox.bottom()));
    }
}

#[test]
fn cooccur_gravity_centers_the_target_and_changes_nothing_else() {
    let g = generator();
    for seed in 0..50 {
        let class_id = seed as usize % g.roster.len();
        let co = g
            .generate_sample(seed, ConditionTag::CoOccur, class_id)
            .unwrap();
        let cg = g
            .generate_sample(seed, ConditionTag::CoOccurGravity, class_id)
            .unwrap();
        assert_eq!(co.room_kind, cg.room_kind);
        assert!(!g.roster.classes[class_id]
            .home_rooms
            .contains(&cg.room_kind));
        let (_, cy) = cg.bbox.midpoint();
        assert!((cy - 48.0).abs() <= 1.0, "center {cy}");
        assert_eq!(
            (co.bbox.x, co.bbox.w, co.bbox.h),
            (cg.bbox.x, cg.bbox.w, cg.bbox.h)
        );
        let diff = co.image.diff_pixels(&cg.image);
        assert!(diff.iter().all(|&p| within(p, &[co.bbox, cg.bbox])));

        let scene = g
            .apply_cooccur_gravity(class_id, &mut Rng::new(seed))
            .unwrap();
        assert_eq!(scene.target.bbox, cg.bbox);
        assert!(!scene.target.supported);
        assert!(!surface_ys(&scene).contains(&cg.bbox.bottom()));
    }
}

#[test]
fn cooccurrence_needs_a_foreign_room() {
    let mut roster = default_roster();
    roster.classes[6].home_rooms = RoomKind::ALL.to_vec();
    let g = SceneGenerator::new(roster, SceneConfig::default()).unwrap();
    assert!(matches!(
        g.apply_cooccurrence(6, &mut Rng::new(1)),
        Err(Error::ConditionUnavailable(_))
    ));
    assert!(matches!(
        g.generate_sample(1, ConditionTag::CoOccurGravity, 6),
        Err(Error::ConditionUnavailable(_))
    ));
}

#[test]
fn size_scales_about_the_bottom_center() {
    let g = generator();
    let mut unclamped = 0;
    for seed in 0..40 {
        let class_id = seed as usize % g.roster.len();
        let normal = g
            .generate_sample(seed, ConditionTag::Normal, class_id)
            .unwrap();
        for (factor, cond) in [
            (2, ConditionTag::Size2),
            (3, ConditionTag::Size3),
            (4, ConditionTag::Size4),
        ] {
            let sized = g.generate_sample(seed, cond, class_id).unwrap();
            let (a, b) = (normal.bbox, sized.bbox);
            assert_eq!(a.bottom(), b.bottom());
            assert_eq!(a.midpoint().0, b.midpoint().0);
            if !sized.clamped {
                unclamped += 1;
                assert_eq!(b.area(), a.area() * factor * factor);
                assert_eq!((b.w, b.h), (a.w * factor, a.h * factor));
            } else {
                assert!(b.area() > a.area());
            }
            b.validate(96, 96).unwrap();
            let diff = normal.image.diff_pixels(&sized.image);
            assert!(diff.iter().all(|&p| within(p, &[a, b])));
        }
    }
    assert!(unclamped > 20);
}

#[test]
fn size_factor_must_be_two_to_four() {
    let g = generator();
    let scene = g.generate_base_scene(&mut Rng::new(3), 0).unwrap();
    for f in [0, 1, 5] {
        assert!(matches!(
            g.apply_size(&scene.target, f),
            Err(Error::Parameter(_))
        ));
    }
}

#[test]
fn grey_blanking_keeps_the_box() {
    let g = generator();
    for class_id in 0..8 {
        let normal = g
            .generate_sample(11, ConditionTag::Normal, class_id)
            .unwrap();
        let grey = g
            .generate_sample(11, ConditionTag::NoContextGrey, class_id)
            .unwrap();
        assert_eq!(normal.bbox, grey.bbox);
        let t = grey.image.to_tensor();
        let side = 96;
        for y in 0..side {
            for x in 0..side {
                if grey.bbox.contains(x, y) {
                    assert_eq!(grey.image.get(x, y), normal.image.get(x, y));
                } else {
                    for c in 0..3 {
                        // 8-bit mid-grey is 128/255.
                        let v = t.data()[(c * side + y) * side + x];
                        assert!((v - 0.5).abs() <= 0.5 / 255.0 + 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn salt_pepper_is_fair_coin_noise() {
    let img = RgbImage::filled(128, 128, [10, 200, 30]);
    let bbox = BoundingBox::new(50, 60, 20, 10);
    for seed in 0..3 {
        let out = blank_context(&img, &bbox, BlankMode::SaltPepper, &mut Rng::new(seed));
        let (mut white, mut outside) = (0, 0);
        for y in 0..128 {
            for x in 0..128 {
                let p = out.get(x, y);
                if bbox.contains(x, y) {
                    assert_eq!(p, img.get(x, y));
                    continue;
                }
                outside += 1;
                assert!(p == [0, 0, 0] || p == [255, 255, 255]);
                white += (p == [255, 255, 255]) as usize;
            }
        }
        assert!(outside >= 10_000);
        let frac = white as f64 / outside as f64;
        assert!((frac - 0.5).abs() <= 0.02, "white fraction {frac}");
    }
}

#[test]
fn generation_gives_up_after_the_attempt_budget() {
    let config = SceneConfig {
        distractors: 60,
        ..SceneConfig::default()
    };
    let g = SceneGenerator::new(default_roster(), config).unwrap();
    assert!(matches!(
        g.generate_base_scene(&mut Rng::new(1), 0),
        Err(Error::Generation(_))
    ));
}

/// Tight box around the pixels the target changes. The stand-in scene
/// redraws a distractor in place of the target, which is a no-op.
fn rendered_target_box(g: &SceneGenerator, scene: &Scene) -> BoundingBox {
    let with = g.render(scene).unwrap();
    let without = g
        .render(&Scene {
            target: scene.distractors[0],
            ..scene.clone()
        })
        .unwrap();
    let changed: Vec<(usize, usize)> = with.diff_pixels(&without);
    with.bounding_box_where(|x, y| changed.contains(&(x, y)))
        .unwrap()
}

#[test]
fn boxes_tightly_bound_the_rendered_glyph() {
    let g = generator();
    for seed in 0..60 {
        let class_id = seed as usize % g.roster.len();
        let mut scene = g
            .generate_base_scene(&mut Rng::new(seed), class_id)
            .unwrap();
        if seed % 3 == 1 {
            scene.target = g.apply_gravity(&scene.target);
        } else if seed % 3 == 2 {
            scene.target = g.apply_size(&scene.target, 2).unwrap();
        }
        let found = rendered_target_box(&g, &scene);
        let b = scene.target.bbox;
        assert!(
            found.x.abs_diff(b.x) <= 1 && found.y.abs_diff(b.y) <= 1,
            "{found:?} vs {b:?}"
        );
        assert!(found.right().abs_diff(b.right()) <= 1 && found.bottom().abs_diff(b.bottom()) <= 1);
    }
}

fn build(dir: &Path, seed: u64, config: &DatasetConfig) -> (Manifest, Manifest) {
    generator().build_dataset(config, seed, dir).unwrap()
}

fn small_config() -> DatasetConfig {
    DatasetConfig {
        train_count: 48,
        test_counts: ConditionTag::ALL.iter().map(|&c| (c, 16)).collect(),
        threads: 1,
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    build(a.path(), 5, &small_config());
    build(b.path(), 5, &small_config());
    let threaded = DatasetConfig {
        threads: 3,
        ..small_config()
    };
    build(c.path(), 5, &threaded);
    let ta = tree(a.path());
    assert_eq!(ta.len(), 48 + 9 * 16 + 2);
    assert_eq!(ta, tree(b.path()));
    assert_eq!(ta, tree(c.path()));
}

#[test]
fn dataset_counts_and_splits_follow_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.test_counts = vec![
        (ConditionTag::Normal, 24),
        (ConditionTag::Gravity, 8),
        (ConditionTag::Size3, 16),
    ];
    let (train, test) = build(dir.path(), 9, &config);
    assert_eq!(train.len(), 48);
    assert!(train
        .records
        .iter()
        .all(|r| r.condition == ConditionTag::Normal));
    assert_eq!(test.count(ConditionTag::Normal), 24);
    assert_eq!(test.count(ConditionTag::Gravity), 8);
    assert_eq!(test.count(ConditionTag::Size3), 16);
    assert_eq!(test.count(ConditionTag::CoOccur), 0);

    let roster = default_roster();
    for m in [&train, &test] {
        let mut per_class = vec![0; roster.len()];
        for r in &m.records {
            per_class[r.class_id] += 1;
        }
        for (a, b) in roster.ambiguous_pairs() {
            assert!(per_class[a] > 0);
            assert_eq!(per_class[a], per_class[b]);
        }
    }
}

#[test]
fn manifest_round_trips_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = build(dir.path(), 13, &small_config());
    let split = DatasetSplit::open(&dir.path().join("test")).unwrap();
    assert_eq!(split.manifest, test);
    let text = fs::read_to_string(dir.path().join("test").join(MANIFEST_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), MANIFEST_HEADER);
    assert_eq!(Manifest::parse(&text, "m").unwrap().to_tsv(), text);

    let g = generator();
    for (i, r) in test.records.iter().enumerate().step_by(7) {
        let s = g.generate_sample(r.seed, r.condition, r.class_id).unwrap();
        assert_eq!(s.image, split.image(i).unwrap());
        assert_eq!(s.bbox, r.bbox);
        assert_eq!(s.size_bin, r.size_bin);
        assert_eq!(s.size_bin, SizeBin::of(&r.bbox, 20));
    }
}

#[test]
fn malformed_manifest_names_the_line() {
    let text = format!("{MANIFEST_HEADER}\nimages/0.ppm\t1\tjar\t1\t2\t3\t4\tnormal\tsmall\t9\nimages/1.ppm\t1\tjar\n");
    match Manifest::parse(&text, "bad.tsv") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(Manifest::parse("nope\n", "x").is_err());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let err = generator().build_dataset(&small_config(), 1, &blocker.join("sub"));
    assert!(matches!(err, Err(Error::Io { .. })));
}

/// Crop-only nearest-template classifier; ties go to the lower class id.
fn glyph_match(g: &SceneGenerator, image: &RgbImage, bbox: &BoundingBox) -> usize {
    let mut best = (u64::MAX, 0);
    for class in &g.roster.classes {
        let mut err = 0u64;
        for y in 0..bbox.h {
            for x in 0..bbox.w {
                let want = class.glyph.sample(x, y, bbox.w, bbox.h);
                let got = image.get(bbox.x + x, bbox.y + y);
                err += (0..3).map(|c| want[c].abs_diff(got[c]) as u64).sum::<u64>();
            }
        }
        if err < best.0 {
            best = (err, class.class_id);
        }
    }
    best.1
}

#[test]
fn context_is_the_only_disambiguator_for_twins() {
    let g = generator();
    let config = DatasetConfig {
        train_count: 0,
        test_counts: vec![
            (ConditionTag::Normal, 96),
            (ConditionTag::NoContextGrey, 32),
        ],
        threads: 1,
    };
    let samples = g.split_samples(&config, 21, Split::Test).unwrap();
    let ambiguous = g.roster.ambiguous_classes();
    let (mut correct, mut total) = (0, 0);
    for s in &samples {
        if ambiguous.contains(&s.class_id) {
            total += 1;
            correct += (glyph_match(&g, &s.image, &s.bbox) == s.class_id) as usize;
        } else {
            assert_eq!(glyph_match(&g, &s.image, &s.bbox), s.class_id);
        }
        if s.condition == ConditionTag::Normal {
            let glyph = &g.roster.classes[glyph_match(&g, &s.image, &s.bbox)].glyph;
            let candidates: Vec<usize> = g
                .roster
                .classes
                .iter()
                .filter(|c| &c.glyph == glyph && c.home_rooms.contains(&s.room_kind))
                .map(|c| c.class_id)
                .collect();
            assert_eq!(candidates, vec![s.class_id]);
        }
    }
    assert_eq!(total, 64);
    assert_eq!(correct * 2, total);
}
