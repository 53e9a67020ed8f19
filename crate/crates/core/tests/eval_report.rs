use crtnet::eval::*;
use crtnet::model::{FusionMode, ModelConfig};
use crtnet::synth::{
    blank_context, default_roster, BlankMode, ConditionTag, SceneConfig, SceneGenerator, SizeBin,
};
use crtnet::tensor::Rng;
use crtnet::train::{Ablation, Example, TrainConfig, Trainer};
use crtnet::Error;
use proptest::prelude::*;

fn examples(n: usize, seed: u64, conditions: &[ConditionTag]) -> Vec<Example> {
    let g = SceneGenerator::new(default_roster(), SceneConfig::default()).unwrap();
    (0..n)
        .map(|i| {
            let c = conditions[i % conditions.len()];
            g.generate_sample(seed + i as u64, c, i % 3).unwrap().into()
        })
        .collect()
}

fn tiny_model(ablation: Ablation) -> crtnet::model::Crtnet {
    let config = TrainConfig {
        ablation,
        ..TrainConfig::default()
    };
    Trainer::new(ModelConfig::tiny(), config).unwrap().model
}

fn outcome(label: usize, top: usize, condition: ConditionTag, size_bin: SizeBin) -> Outcome {
    Outcome {
        label,
        condition,
        size_bin,
        top_yp: top,
        top_yt: top,
        top_ytc: top,
        p: 0.5,
    }
}

fn vector(values: &[f64]) -> PerformanceVector {
    PerformanceVector::new(
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("c{i}"), *v))
            .collect(),
    )
    .unwrap()
}

#[test]
fn all_correct_predictions_give_unit_accuracy_and_zero_sem() {
    let outcomes: Vec<Outcome> = ConditionTag::ALL
        .iter()
        .flat_map(|c| (0..10).map(move |i| outcome(i % 3, i % 3, *c, SizeBin::ALL[i % 2])))
        .collect();
    let report = EvalReport::from_outcomes(3, outcomes);
    let table = report.table();
    assert_eq!(table.cells.len(), 18);
    for s in table.cells.values() {
        assert_eq!((s.accuracy(), s.sem()), (1.0, 0.0));
    }
}

#[test]
fn half_right_out_of_a_hundred() {
    let s = CellStats {
        n: 100,
        correct: 50,
    };
    assert_eq!(s.accuracy(), 0.5);
    assert!((s.sem() - 0.05).abs() < 1e-15);
}

#[test]
fn evaluation_is_repeatable_and_thread_count_free() {
    let model = tiny_model(Ablation::None);
    let data = examples(12, 1, &[ConditionTag::Normal, ConditionTag::Gravity]);
    let a = evaluate(&model, &data, None, 1).unwrap();
    assert_eq!(a, evaluate(&model, &data, None, 1).unwrap());
    assert_eq!(a, evaluate(&model, &data, None, 3).unwrap());
    assert_eq!(
        a.table()
            .cells
            .keys()
            .map(|k| k.0)
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        2
    );
}

#[test]
fn labels_beyond_the_model_are_a_config_error() {
    let model = tiny_model(Ablation::None);
    let mut data = examples(2, 3, &[ConditionTag::Normal]);
    data[1].label = 5;
    assert!(matches!(
        evaluate(&model, &data, None, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn fusion_override_scores_the_chosen_head() {
    let model = tiny_model(Ablation::None);
    let data = examples(9, 5, &[ConditionTag::Normal]);
    let base = evaluate(&model, &data, None, 1).unwrap();
    let target = evaluate(&model, &data, Some(FusionMode::TargetOnly), 1).unwrap();
    let context = evaluate(&model, &data, Some(FusionMode::ContextOnly), 1).unwrap();
    for ((b, t), c) in base
        .outcomes
        .iter()
        .zip(&target.outcomes)
        .zip(&context.outcomes)
    {
        assert_eq!(t.top_yp, b.top_yt);
        assert_eq!(c.top_yp, b.top_ytc);
    }
}

#[test]
fn target_only_ignores_the_context_pixels() {
    let model = tiny_model(Ablation::TargetOnly);
    let plain = examples(8, 7, &[ConditionTag::Normal]);
    let mut rng = Rng::new(1);
    let blanked: Vec<Example> = plain
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mode = if i % 2 == 0 {
                BlankMode::Grey
            } else {
                BlankMode::SaltPepper
            };
            Example {
                image: blank_context(&e.image, &e.bbox, mode, &mut rng),
                ..e.clone()
            }
        })
        .collect();
    assert_ne!(plain[0].image, blanked[0].image);
    let a = evaluate(&model, &plain, None, 1).unwrap();
    let b = evaluate(&model, &blanked, None, 1).unwrap();
    let fused = |r: &EvalReport| r.outcomes.iter().map(|o| o.top_yp).collect::<Vec<_>>();
    assert_eq!(fused(&a), fused(&b));
    assert_eq!(a.table(), b.table());
}

#[test]
fn unweighted_fused_accuracy_is_the_context_head_accuracy() {
    let model = tiny_model(Ablation::Unweighted);
    let data = examples(15, 9, &ConditionTag::ALL);
    let r = evaluate(&model, &data, None, 1).unwrap();
    assert_eq!(
        r.stats(Head::Fused, |_| true),
        r.stats(Head::Context, |_| true)
    );
}

#[test]
fn pearson_on_the_listed_cases() {
    let v = vector(&[0.3, 0.9, 0.1, 0.5]);
    let affine = vector(&[1.6, 2.8, 1.2, 2.0]);
    assert!((pearson(&v, &affine).unwrap() - 1.0).abs() < 1e-12);
    let neg = vector(&[-0.3, -0.9, -0.1, -0.5]);
    assert!((pearson(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    let r = pearson(
        &vector(&[1.0, 0.0, 1.0, 0.0]),
        &vector(&[1.0, 1.0, 0.0, 0.0]),
    )
    .unwrap();
    assert!(r.abs() < 1e-12);
}

#[test]
fn constant_vectors_have_no_correlation() {
    let r = pearson(&vector(&[0.5; 4]), &vector(&[0.1, 0.2, 0.3, 0.4]));
    assert!(matches!(r, Err(Error::UndefinedCorrelation(_))));
    assert!(pearson(&vector(&[0.5]), &vector(&[0.1])).is_err());
    let renamed = PerformanceVector::new(vec![("x".into(), 0.1), ("c1".into(), 0.2)]).unwrap();
    assert!(matches!(
        pearson(&vector(&[0.3, 0.4]), &renamed),
        Err(Error::Input(_))
    ));
}

#[test]
fn duplicate_labels_are_rejected() {
    assert!(PerformanceVector::new(vec![("a".into(), 0.1), ("a".into(), 0.2)]).is_err());
}

/// Textbook one-pass formula, kept apart from the library's centered sums.
fn raw_sum_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn stored_twelve_cell_vectors_reproduce_a_hand_computed_coefficient() {
    let a = "cell\taccuracy\nnormal/small\t0.95\nnormal/large\t0.90\nnocontext/small\t0.55\nnocontext/large\t0.60\n\
             gravity/small\t0.80\ngravity/large\t0.85\ncooccur/small\t0.70\ncooccur/large\t0.75\n\
             cooccur_gravity/small\t0.40\ncooccur_gravity/large\t0.45\nsize/small\t0.88\nsize/large\t0.92\n";
    let b = "cell\taccuracy\nnormal/small\t0.91\nnormal/large\t0.97\nnocontext/small\t0.62\nnocontext/large\t0.48\n\
             gravity/small\t0.77\ngravity/large\t0.90\ncooccur/small\t0.66\ncooccur/large\t0.71\n\
             cooccur_gravity/small\t0.52\ncooccur_gravity/large\t0.41\nsize/small\t0.80\nsize/large\t0.99\n";
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.tsv"), a).unwrap();
    std::fs::write(dir.path().join("b.tsv"), b).unwrap();
    let va = PerformanceVector::load(&dir.path().join("a.tsv")).unwrap();
    let vb = PerformanceVector::load(&dir.path().join("b.tsv")).unwrap();
    assert_eq!(va.len(), 12);
    let r = pearson(&va, &vb).unwrap();
    assert!((r - raw_sum_pearson(&va.values(), &vb.values())).abs() < 1e-12);
    assert_eq!(format!("{r:.2}"), "0.93");
}

#[test]
fn vector_merges_blanking_modes_and_scale_factors() {
    let mut outcomes = Vec::new();
    for (c, right) in [
        (ConditionTag::Normal, true),
        (ConditionTag::NoContextGrey, true),
        (ConditionTag::NoContextSaltPepper, false),
        (ConditionTag::Gravity, true),
        (ConditionTag::CoOccur, false),
        (ConditionTag::CoOccurGravity, false),
        (ConditionTag::Size2, true),
        (ConditionTag::Size3, true),
        (ConditionTag::Size4, false),
    ] {
        for b in SizeBin::ALL {
            outcomes.push(outcome(0, if right { 0 } else { 1 }, c, b));
        }
    }
    let v = PerformanceVector::from_table(&EvalReport::from_outcomes(2, outcomes).table());
    let labels: Vec<&str> = v.cells.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(
        labels,
        [
            "normal/small",
            "normal/large",
            "nocontext/small",
            "nocontext/large",
            "gravity/small",
            "gravity/large",
            "cooccur/small",
            "cooccur/large",
            "cooccur_gravity/small",
            "cooccur_gravity/large",
            "size/small",
            "size/large"
        ]
    );
    assert_eq!(
        v.values(),
        [
            1.0,
            1.0,
            0.5,
            0.5,
            1.0,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            2.0 / 3.0,
            2.0 / 3.0
        ]
    );
}

#[test]
fn vector_file_errors_name_the_line() {
    let err = PerformanceVector::parse(
        "cell\taccuracy\nnormal/small\t0.5\nnormal/large\tabc\n",
        "v.tsv",
    );
    assert!(matches!(err, Err(Error::Parse { line: 3, .. })));
    assert!(matches!(
        PerformanceVector::parse("nope\n", "v.tsv"),
        Err(Error::Parse { line: 1, .. })
    ));
}

fn sample_table() -> CellTable {
    let mut t = CellTable::default();
    t.cells.insert(
        (ConditionTag::Normal, SizeBin::Small),
        CellStats { n: 3, correct: 2 },
    );
    t.cells.insert(
        (ConditionTag::Normal, SizeBin::Large),
        CellStats { n: 7, correct: 7 },
    );
    t.cells.insert(
        (ConditionTag::Size3, SizeBin::Large),
        CellStats { n: 9, correct: 1 },
    );
    t
}

#[test]
fn csv_has_one_row_per_cell_and_four_decimals() {
    let t = sample_table();
    let csv = table_to_csv(&t);
    assert_eq!(csv.lines().count(), t.cells.len() + 1);
    assert_eq!(
        csv.lines().nth(1).unwrap(),
        "normal,small,3,2,0.6667,0.2722"
    );
    assert_eq!(
        csv.lines().nth(2).unwrap(),
        "normal,large,7,7,1.0000,0.0000"
    );
}

#[test]
fn csv_parse_errors_name_the_line() {
    let bad =
        format!("{CSV_HEADER}\nnormal,small,3,2,0.6667,0.2722\nnormal,large,x,7,1.0000,0.0000\n");
    assert!(matches!(
        parse_csv(&bad, "r.csv"),
        Err(Error::Parse { line: 3, .. })
    ));
    let wrong = format!("{CSV_HEADER}\nnormal,small,3,2,0.7000,0.2722\n");
    assert!(matches!(
        parse_csv(&wrong, "r.csv"),
        Err(Error::Parse { line: 2, .. })
    ));
}

#[test]
fn plotdata_lists_both_bins_for_every_condition_present() {
    let t = sample_table();
    let text = table_to_plotdata(&t);
    let rows = parse_plotdata(&text, "p.csv").unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        (rows[2].condition, rows[2].size_bin),
        (ConditionTag::Size3, SizeBin::Small)
    );
    assert!(rows[2].accuracy.is_nan());
    assert_eq!(rows[3].accuracy, 0.1111);
    assert_eq!(text.lines().nth(1).unwrap(), "normal,small,0.6667,0.2722");
}

#[test]
fn emitted_files_land_where_reported() {
    let dir = tempfile::tempdir().unwrap();
    let t = sample_table();
    let csv = emit_report(&t, ReportFormat::Csv, dir.path(), "report").unwrap();
    let plot = emit_report(&t, ReportFormat::PlotData, dir.path(), "report").unwrap();
    assert_eq!(
        parse_csv(&std::fs::read_to_string(&csv).unwrap(), "r").unwrap(),
        t
    );
    assert_eq!(
        parse_plotdata(&std::fs::read_to_string(&plot).unwrap(), "p")
            .unwrap()
            .len(),
        4
    );
}

#[test]
fn tiny_ablation_suite_runs_end_to_end() {
    let train = examples(6, 11, &[ConditionTag::Normal]);
    let test = examples(
        9,
        21,
        &[
            ConditionTag::Normal,
            ConditionTag::Gravity,
            ConditionTag::NoContextGrey,
        ],
    );
    let config = TrainConfig {
        epochs: 1,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let suite = ablation_suite(
        &Ablation::ALL,
        &train,
        &test,
        &ModelConfig::tiny(),
        &config,
        Some(dir.path()),
        1,
    )
    .unwrap();
    assert_eq!(suite.variants.len(), 5);
    assert_eq!(suite.correlations.len(), 25);
    let shared = suite.variant(Ablation::SharedEncoder).unwrap();
    assert_eq!(
        2 * shared.encoder_scalars(),
        suite.variant(Ablation::None).unwrap().encoder_scalars()
    );
    let unweighted = &suite.variant(Ablation::Unweighted).unwrap().report;
    assert_eq!(
        unweighted.stats(Head::Fused, |_| true),
        unweighted.stats(Head::Context, |_| true)
    );
    for (a, b, r) in &suite.correlations {
        if a == b {
            if let Some(r) = r {
                assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(dir
        .path()
        .join("no_detachment")
        .join("metrics.tsv")
        .exists());
    assert!(suite.summary().contains("shared_encoder"));
}

prop_compose! {
    fn outcomes()(raw in prop::collection::vec((0usize..3, 0usize..3, 0usize..9, any::<bool>()), 1..80)) -> Vec<Outcome> {
        raw.into_iter()
            .map(|(l, t, c, small)| {
                let bin = if small { SizeBin::Small } else { SizeBin::Large };
                outcome(l, t, ConditionTag::ALL[c], bin)
            })
            .collect()
    }
}

proptest! {
    #[test]
    fn cells_add_up_to_the_overall(o in outcomes()) {
        let r = EvalReport::from_outcomes(3, o);
        let t = r.table();
        let all = r.overall();
        prop_assert_eq!(t.overall(), all);
        prop_assert_eq!(t.cells.values().map(|s| s.n).sum::<usize>(), r.outcomes.len());
        for s in t.cells.values() {
            let a = s.accuracy();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((s.sem() - (a * (1.0 - a) / s.n as f64).sqrt()).abs() < 1e-15);
        }
        prop_assert_eq!(r.per_class().iter().map(|s| s.correct).sum::<usize>(), all.correct);
    }

    #[test]
    fn csv_round_trip_is_lossless(o in outcomes()) {
        let t = EvalReport::from_outcomes(3, o).table();
        prop_assert_eq!(parse_csv(&table_to_csv(&t), "r.csv").unwrap(), t);
    }

    #[test]
    fn pearson_is_affine_invariant_and_symmetric(
        x in prop::collection::vec(0.0f64..1.0, 3..12),
        y_seed in prop::collection::vec(0.0f64..1.0, 12),
        a in 0.01f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let y = &y_seed[..x.len()];
        let vx = vector(&x);
        let vy = vector(y);
        let shifted = vector(&x.iter().map(|v| a * v + b).collect::<Vec<_>>());
        match (pearson(&vx, &vy), pearson(&shifted, &vy), pearson(&vy, &vx)) {
            (Ok(r), Ok(s), Ok(t)) => {
                prop_assert!((r - s).abs() < 1e-12, "{} vs {}", r, s);
                prop_assert!((r - t).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
            (Err(_), Err(_), Err(_)) => {}
            other => prop_assert!(false, "inconsistent results {:?}", other),
        }
    }
}
