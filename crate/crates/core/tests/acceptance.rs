//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Trains the default model five times for the
//! ablation suite and twice more for extra seeds, so expect roughly half an
//! hour on one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use crtnet::eval::{
    ablation_suite, emit_report, evaluate, parse_csv, pearson, pearson_values, table_to_csv,
    AblationSuite, EvalReport, Head, Outcome, PerformanceVector, ReportFormat,
};
use crtnet::gradcheck::{full_suite, model_check_config};
use crtnet::model::checkpoint::{load_model, save_model, Checkpoint};
use crtnet::model::{
    encoder_prefix, pool_target, tokenize_context, Crtnet, ModelConfig, PreparedInput, Stream,
};
use crtnet::synth::{
    default_roster, ConditionTag, DatasetConfig, Manifest, SceneConfig, SceneGenerator, SizeBin,
    Split,
};
use crtnet::tensor::{Rng, Tape, Tensor};
use crtnet::train::{graph_losses, Ablation, Example, TrainConfig, Trainer};

const DATA_SEED: u64 = 7;
const TRAIN_COUNT: usize = 4000;
const TEST_PER_CONDITION: usize = 800;
const EPOCHS: usize = 10;
const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn report(n: usize, name: &str, v: &Verdict) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {n} {name}: {}", v.detail);
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

fn gradient_suite() -> Verdict {
    let cfg = model_check_config();
    let shape_ok = (
        cfg.feat_channels,
        cfg.tokens(),
        cfg.decoder_layers,
        cfg.heads,
        cfg.num_classes,
    ) == (8, 4, 1, 2, 3)
        && cfg.image_side == 16;
    let start = Instant::now();
    let checks = match full_suite(0..20) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}@{}", c.name, c.seed))
        .collect();
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    verdict(
        failed.is_empty() && shape_ok && secs < 60.0,
        format!(
            "{} checks on 20 seeds, worst relative error {worst:.2e} (< 1e-4), {:.1} s (< 60 s), failures {failed:?}",
            checks.len(),
            secs
        ),
    )
}

/// `sum |d(loss_t + loss_p)/d theta|` over the target encoder, with dropout
/// active as in training.
fn target_encoder_grad(model: &Crtnet, ex: &Example, seed: u64) -> f64 {
    let input = ex.prepare(&model.config).unwrap();
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let graph = model
        .forward(&tape, &bound, &input, &mut Rng::new(seed), true)
        .unwrap();
    let l = graph_losses(&graph, ex.label).unwrap();
    tape.backward(l.loss_t.add(l.loss_p).unwrap()).unwrap();
    let prefix = encoder_prefix(&model.config, Stream::Target);
    model
        .params
        .iter()
        .zip(bound.grads())
        .filter(|((name, _), _)| name.starts_with(prefix))
        .map(|(_, g)| g.data().iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

fn detachment(train: &[Example]) -> Verdict {
    let mut detached = Vec::new();
    let mut open = Vec::new();
    for seed in 0..5u64 {
        let ex = &train[seed as usize * 97 % train.len()];
        let cfg = |ablation| TrainConfig {
            seed,
            ablation,
            ..TrainConfig::default()
        };
        let a = Trainer::new(ModelConfig::default(), cfg(Ablation::None)).unwrap();
        let b = Trainer::new(ModelConfig::default(), cfg(Ablation::NoDetachment)).unwrap();
        detached.push(target_encoder_grad(&a.model, ex, seed));
        open.push(target_encoder_grad(&b.model, ex, seed));
    }
    let exact_zero = detached.iter().all(|&g| g == 0.0);
    let positive = open.iter().filter(|&&g| g > 0.0).count();
    verdict(
        exact_zero && positive == 5,
        format!(
            "default sums {detached:?} (must be exactly 0), no_detachment positive on {positive}/5: {:?}",
            open.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>()
        ),
    )
}

fn invariants() -> Verdict {
    let mut rng = Rng::new(2024);
    let mut worst_attention = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut convexity_breaks = 0;
    let mut forwards = 0;
    for seed in 0..10 {
        let config = ModelConfig {
            dropout_rate: 0.0,
            ..ModelConfig::tiny()
        };
        let model = Crtnet::new(config, &mut Rng::new(seed)).unwrap();
        let s = model.config.image_side;
        for _ in 0..1000 {
            let input = PreparedInput {
                target: random_tensor(&[3, s, s], &mut rng),
                context: random_tensor(&[3, s, s], &mut rng),
                cell: rng.below(model.config.tokens()),
            };
            let p = model.predict_prepared(&input).unwrap();
            for y in [&p.y_t, &p.y_tc, &p.y_p] {
                worst_sum = worst_sum.max((y.sum() - 1.0).abs());
            }
            for w in p.attention.iter().flatten() {
                worst_attention = worst_attention.max((w.sum() - 1.0).abs());
            }
            for c in 0..p.y_p.data().len() {
                let (t, x, f) = (p.y_t.data()[c], p.y_tc.data()[c], p.y_p.data()[c]);
                if f < t.min(x) - 1e-15 || f > t.max(x) + 1e-15 {
                    convexity_breaks += 1;
                }
            }
            forwards += 1;
        }
    }
    let mut pooling_exact = true;
    for seed in 0..100 {
        let mut r = Rng::new(seed);
        let (d, h, w) = (1 + r.below(64), 1 + r.below(7), 1 + r.below(7));
        let a = random_tensor(&[d, h, w], &mut r);
        let tokens = tokenize_context(&a).unwrap();
        let mut acc = vec![0.0; d];
        for t in &tokens {
            for (s, v) in acc.iter_mut().zip(t.data()) {
                *s += v;
            }
        }
        let mean: Vec<f64> = acc.iter().map(|s| s / tokens.len() as f64).collect();
        pooling_exact &= pool_target(&a).unwrap().data() == &mean[..];
    }
    verdict(
        worst_attention < 1e-9 && worst_sum < 1e-6 && convexity_breaks == 0 && pooling_exact && forwards == 10_000,
        format!(
            "{forwards} forwards: attention row error {worst_attention:.1e}, distribution error {worst_sum:.1e}, \
             {convexity_breaks} convexity breaks, pooling equals token mean bitwise: {pooling_exact}"
        ),
    )
}

fn vector(values: &[f64]) -> PerformanceVector {
    PerformanceVector::new(
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("c{i}"), v))
            .collect(),
    )
    .unwrap()
}

/// Textbook one-pass formula, independent of the library's centered sums.
fn raw_sum_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

fn correlation_tool(dir: &Path) -> Verdict {
    let mut rng = Rng::new(99);
    let mut worst_affine = 0.0f64;
    let mut worst_symmetry = 0.0f64;
    for _ in 0..200 {
        let n = 2 + rng.below(20);
        let x: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let (a, b) = (0.01 + 10.0 * rng.uniform(), 20.0 * rng.uniform() - 10.0);
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let r = pearson_values(&x, &y).unwrap();
        worst_affine = worst_affine.max((pearson_values(&ax, &y).unwrap() - r).abs());
        worst_symmetry = worst_symmetry.max((pearson_values(&y, &x).unwrap() - r).abs());
    }
    let v = [0.3, 0.9, 0.1, 0.5];
    let listed = [
        (
            pearson(&vector(&v), &vector(&v.map(|x| 2.0 * x + 1.0))).unwrap(),
            1.0,
        ),
        (pearson(&vector(&v), &vector(&v.map(|x| -x))).unwrap(), -1.0),
        (
            pearson(
                &vector(&[1.0, 0.0, 1.0, 0.0]),
                &vector(&[1.0, 1.0, 0.0, 0.0]),
            )
            .unwrap(),
            0.0,
        ),
    ];
    let listed_ok = listed.iter().all(|(r, e)| (r - e).abs() < 1e-12);

    let a = "cell\taccuracy\nnormal/small\t0.95\nnormal/large\t0.90\nnocontext/small\t0.55\nnocontext/large\t0.60\n\
             gravity/small\t0.80\ngravity/large\t0.85\ncooccur/small\t0.70\ncooccur/large\t0.75\n\
             cooccur_gravity/small\t0.40\ncooccur_gravity/large\t0.45\nsize/small\t0.88\nsize/large\t0.92\n";
    let b = "cell\taccuracy\nnormal/small\t0.91\nnormal/large\t0.97\nnocontext/small\t0.62\nnocontext/large\t0.48\n\
             gravity/small\t0.77\ngravity/large\t0.90\ncooccur/small\t0.66\ncooccur/large\t0.71\n\
             cooccur_gravity/small\t0.52\ncooccur_gravity/large\t0.41\nsize/small\t0.80\nsize/large\t0.99\n";
    fs::write(dir.join("a.tsv"), a).unwrap();
    fs::write(dir.join("b.tsv"), b).unwrap();
    let va = PerformanceVector::load(&dir.join("a.tsv")).unwrap();
    let vb = PerformanceVector::load(&dir.join("b.tsv")).unwrap();
    let r = pearson(&va, &vb).unwrap();
    let hand = raw_sum_pearson(&va.values(), &vb.values());
    let stored_ok =
        va.len() == 12 && format!("{r:.2}") == format!("{hand:.2}") && format!("{r:.2}") == "0.93";
    verdict(
        worst_affine < 1e-12 && worst_symmetry < 1e-12 && listed_ok && stored_ok,
        format!(
            "affine drift {worst_affine:.1e}, asymmetry {worst_symmetry:.1e}, listed {:?}, stored vectors {r:.2} vs hand {hand:.2}",
            listed.map(|(r, _)| r)
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism_and_formats(
    dir: &Path,
    generator: &SceneGenerator,
    model: &Crtnet,
    table_report: &EvalReport,
) -> Verdict {
    let config = DatasetConfig {
        train_count: 40,
        test_counts: ConditionTag::ALL.iter().map(|&c| (c, 9)).collect(),
        threads: 1,
    };
    let (a, b) = (dir.join("gen_a"), dir.join("gen_b"));
    let (train_a, test_a) = generator.build_dataset(&config, 11, &a).unwrap();
    generator.build_dataset(&config, 11, &b).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    let generate_ok = ta.len() == 40 + 81 + 2 && ta == tb;

    let path = dir.join("model.ckpt");
    save_model(model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let bits_equal = back.config == model.config
        && model
            .params
            .tensors()
            .zip(back.params.tensors())
            .all(|(x, y)| {
                x.data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
            });
    let bytes = fs::read(&path).unwrap();
    let checkpoint_ok = bits_equal && Checkpoint::from_bytes(&bytes).unwrap().to_bytes() == bytes;

    let mut manifest_ok = true;
    for m in [&train_a, &test_a] {
        let text = m.to_tsv();
        let parsed = Manifest::parse(&text, "manifest").unwrap();
        manifest_ok &= &parsed == m && parsed.to_tsv() == text;
    }
    let table = table_report.table();
    let csv = table_to_csv(&table);
    let parsed = parse_csv(&csv, "report.csv").unwrap();
    let emitted = emit_report(&parsed, ReportFormat::Csv, dir, "report").unwrap();
    let csv_ok = parsed == table && fs::read_to_string(emitted).unwrap() == csv;
    verdict(
        generate_ok && checkpoint_ok && manifest_ok && csv_ok,
        format!(
            "generate reproducible: {generate_ok} ({} files), checkpoint bit-exact: {checkpoint_ok}, \
             manifest round trip: {manifest_ok}, csv round trip: {csv_ok}",
            ta.len()
        ),
    )
}

fn accuracy(report: &EvalReport, keep: impl Fn(&Outcome) -> bool) -> (f64, usize) {
    let s = report.stats(Head::Fused, keep);
    (s.accuracy(), s.n)
}

fn contextual_benefit(suite: &AblationSuite, ambiguous: &[usize]) -> Verdict {
    let full = suite.variant(Ablation::None).unwrap();
    let target_only = suite.variant(Ablation::TargetOnly).unwrap();
    let on = |c: ConditionTag| move |o: &Outcome| o.condition == c && ambiguous.contains(&o.label);
    let (normal, n) = accuracy(&full.report, on(ConditionTag::Normal));
    let (blind, _) = accuracy(&target_only.report, on(ConditionTag::Normal));
    let (grey, _) = accuracy(&full.report, on(ConditionTag::NoContextGrey));
    let secs = full.train_seconds;
    verdict(
        normal >= 0.90 && blind <= 0.60 && normal - grey >= 0.15 - 1e-9 && secs <= 900.0,
        format!(
            "ambiguous Normal {normal:.4} (>= 0.90, n={n}), target_only {blind:.4} (<= 0.60), \
             no-context grey {grey:.4} (gap {:.4} >= 0.15), trained in {secs:.0} s (<= 900 s)",
            normal - grey
        ),
    )
}

/// Accuracies of the four conditions on ambiguous small-bin samples.
fn violation_profile(report: &EvalReport, ambiguous: &[usize]) -> [f64; 4] {
    [
        ConditionTag::Normal,
        ConditionTag::Gravity,
        ConditionTag::CoOccur,
        ConditionTag::CoOccurGravity,
    ]
    .map(|c| {
        accuracy(report, |o| {
            o.condition == c && o.size_bin == SizeBin::Small && ambiguous.contains(&o.label)
        })
        .0
    })
}

fn violation_degradation(profiles: &[(u64, [f64; 4])]) -> Verdict {
    let gap = |hi: f64, lo: f64| hi - lo >= 0.05 - 1e-9;
    let mut lines = Vec::new();
    let mut ok = profiles.len() == 3;
    for (seed, [normal, gravity, cooccur, both]) in profiles {
        let seed_ok = [*gravity, *cooccur]
            .iter()
            .all(|&single| gap(*normal, single) && gap(single, *both));
        ok &= seed_ok;
        lines.push(format!(
            "seed {seed}: normal {normal:.4} gravity {gravity:.4} cooccur {cooccur:.4} both {both:.4} ({})",
            if seed_ok { "ok" } else { "violated" }
        ));
    }
    verdict(ok, lines.join("; "))
}

fn ablation_machinery(suite: &AblationSuite, suite_seconds: f64) -> Verdict {
    let unweighted = suite.variant(Ablation::Unweighted).unwrap();
    let fused = unweighted.report.stats(Head::Fused, |_| true);
    let context = unweighted.report.stats(Head::Context, |_| true);
    let full = suite.variant(Ablation::None).unwrap().encoder_scalars();
    let shared = suite
        .variant(Ablation::SharedEncoder)
        .unwrap()
        .encoder_scalars();
    verdict(
        fused == context
            && 2 * shared == full
            && suite.variants.len() == 5
            && suite_seconds < 5400.0,
        format!(
            "unweighted y_p {}/{} vs y_tc {}/{}, shared encoder scalars {shared} vs {full}, \
             suite of {} variants in {:.1} min (< 90 min)",
            fused.correct,
            fused.n,
            context.correct,
            context.n,
            suite.variants.len(),
            suite_seconds / 60.0
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n, name, v: Verdict| {
        report(n, name, &v);
        results.push((n, name, v));
    };

    record(1, "gradient suite", gradient_suite());

    let generator = SceneGenerator::new(default_roster(), SceneConfig::default()).unwrap();
    let data_config = DatasetConfig {
        train_count: TRAIN_COUNT,
        test_counts: ConditionTag::ALL
            .iter()
            .map(|&c| (c, TEST_PER_CONDITION))
            .collect(),
        threads: 1,
    };
    let load = |split| -> Vec<Example> {
        generator
            .split_samples(&data_config, DATA_SEED, split)
            .unwrap()
            .into_iter()
            .map(Example::from)
            .collect()
    };
    let (train, test) = (load(Split::Train), load(Split::Test));
    let ambiguous = generator.roster.ambiguous_classes();

    record(2, "detachment topology", detachment(&train));
    record(3, "architecture invariants", invariants());

    let train_config = TrainConfig {
        epochs: EPOCHS,
        seed: TRAIN_SEEDS[0],
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let suite = ablation_suite(
        &Ablation::ALL,
        &train,
        &test,
        &ModelConfig::default(),
        &train_config,
        None,
        1,
    )
    .unwrap();
    let suite_seconds = start.elapsed().as_secs_f64();
    for v in &suite.variants {
        println!(
            "  {:<15} trained in {:.0} s, overall y_p accuracy {:.4}",
            v.ablation.as_str(),
            v.train_seconds,
            v.report.stats(Head::Fused, |_| true).accuracy()
        );
    }

    record(
        4,
        "contextual benefit",
        contextual_benefit(&suite, &ambiguous),
    );

    let full = suite.variant(Ablation::None).unwrap();
    let mut profiles = vec![(TRAIN_SEEDS[0], violation_profile(&full.report, &ambiguous))];
    for &seed in &TRAIN_SEEDS[1..] {
        let mut trainer = Trainer::new(
            ModelConfig::default(),
            TrainConfig {
                seed,
                ..train_config.clone()
            },
        )
        .unwrap();
        for _ in 0..EPOCHS {
            trainer.run_epoch(&train).unwrap();
        }
        let r = evaluate(&trainer.model, &test, None, 1).unwrap();
        profiles.push((seed, violation_profile(&r, &ambiguous)));
    }
    record(5, "violation degradation", violation_degradation(&profiles));
    record(
        6,
        "ablation machinery",
        ablation_machinery(&suite, suite_seconds),
    );
    record(7, "correlation tool", correlation_tool(dir.path()));
    record(
        8,
        "determinism and formats",
        determinism_and_formats(dir.path(), &generator, &full.model, &full.report),
    );

    let failed = results.iter().filter(|(_, _, v)| !v.passed).count();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
