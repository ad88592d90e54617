//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N [PASS|FAIL]` line to stderr (uncaptured) before asserting.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use harforge_core::align::{align_cohort, apportion_block, compute_hr_profile, AlignConfig, AlignedDay};
use harforge_core::dataset::{
    build_dataset, build_windows, slide_windows, stride_for, DatasetConfig, FeatureWindow, SplitMode, SplitSpec,
    DEFAULT_LABEL_THRESHOLD,
};
use harforge_core::domain::MINUTES_PER_DAY;
use harforge_core::eval::{evaluate_run, macro_f1, roc_auc_ovr};
use harforge_core::impute::{impute_cohort, ImputeConfig};
use harforge_core::model::{
    focal_transform, loss_and_grad, train, EncodedSet, LossConfig, ModelConfig, ModelParams, TrainConfig,
};
use harforge_core::synth::{generate_cohort, mask_report, CohortConfig};
use harforge_core::taxonomy::Taxonomy;
use harforge_core::viz::{
    cohort_charts, group_baseline, radar_values, render_radar, ActivityMetricSet, BandMode, PLOT_RADIUS,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} [{tag}] {title}: {detail}");
}

fn prepared_days(config: &CohortConfig, taxonomy: &Taxonomy) -> (Vec<AlignedDay>, harforge_core::synth::Cohort) {
    let cohort = generate_cohort(config, taxonomy).unwrap();
    let days = align_cohort(&cohort.streams, &AlignConfig::default()).unwrap();
    let (days, _) = impute_cohort(days, &ImputeConfig::default());
    (days, cohort)
}

#[test]
fn criterion_01_ltm_conservation() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut step_failures = 0;
    let mut worst_rel = 0.0f64;
    for _ in 0..10_000 {
        let min_hr: f64 = rng.random_range(40.0..80.0);
        let pulses: Vec<Option<f64>> = (0..15)
            .map(|_| {
                if rng.random_bool(0.15) {
                    None
                } else {
                    Some(rng.random_range(35.0..200.0))
                }
            })
            .collect();
        let steps: u32 = rng.random_range(0..3000);
        let distance: f64 = rng.random_range(0.0..2500.0);
        let shares = apportion_block(steps, distance, &pulses, min_hr);
        if shares.iter().map(|s| s.0).sum::<u32>() != steps {
            step_failures += 1;
        }
        let d: f64 = shares.iter().map(|s| s.1).sum();
        if distance > 0.0 {
            worst_rel = worst_rel.max((d - distance).abs() / distance);
        }
    }
    let elapsed = started.elapsed();
    let pass = step_failures == 0 && worst_rel <= 1e-9 && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "LTM conservation",
        pass,
        &format!("step mismatches {step_failures}, worst distance rel err {worst_rel:.2e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

/// Order statistic by counting, without sorting.
fn kth_smallest(values: &[f64], k: usize) -> f64 {
    for &v in values {
        let less = values.iter().filter(|&&x| x < v).count();
        let equal = values.iter().filter(|&&x| x == v).count();
        if less <= k && k < less + equal {
            return v;
        }
    }
    unreachable!("k within range")
}

fn percentile_oracle(values: &[f64], q: f64) -> f64 {
    let h = q * (values.len() - 1) as f64;
    let lo = h.floor();
    let a = kth_smallest(values, lo as usize);
    let b = kth_smallest(values, h.ceil() as usize);
    a + (h - lo) * (b - a)
}

fn macro_f1_oracle(preds: &[usize], labels: &[usize], n: usize) -> f64 {
    let mut sum = 0.0;
    let mut seen = 0;
    for c in 0..n {
        let tp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count();
        let fp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l != c).count();
        let fn_ = preds.iter().zip(labels).filter(|(&p, &l)| p != c && l == c).count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        seen += 1;
        sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    sum / seen as f64
}

fn auc_oracle(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == c && lj != c {
                    pairs += 1.0;
                    let (si, sj) = (probs[[i, c]], probs[[j, c]]);
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total += wins / pairs;
    }
    total / classes.len() as f64
}

#[test]
fn criterion_02_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fixtures = 1000;
    let mut worst = [0.0f64; 3];
    for _ in 0..fixtures {
        let n = rng.random_range(1..400);
        // Integer-valued pulses give plenty of ties.
        let pulses: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(40..190) as f64
                } else {
                    rng.random_range(40.0..190.0)
                }
            })
            .collect();
        let p = compute_hr_profile(&pulses).unwrap();
        let e = (p.min_hr - percentile_oracle(&pulses, 0.05))
            .abs()
            .max((p.max_hr - percentile_oracle(&pulses, 0.9997)).abs());
        worst[0] = worst[0].max(e);

        let classes = rng.random_range(2..13);
        let m = rng.random_range(2..300);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..classes) })
            .collect();
        worst[1] = worst[1].max((macro_f1(&preds, &labels, classes).unwrap() - macro_f1_oracle(&preds, &labels, classes)).abs());

        let mut labels = labels;
        labels[0] = 0;
        labels[1] = 1;
        let quantised = rng.random_bool(0.5);
        let probs = Array2::from_shape_fn((m, classes), |_| {
            let v: f64 = rng.random();
            if quantised {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        });
        worst[2] = worst[2].max((roc_auc_ovr(&probs, &labels).unwrap() - auc_oracle(&probs, &labels)).abs());
    }
    let pass = worst.iter().all(|&e| e <= 1e-12);
    verdict(
        2,
        "percentile/metric oracle equivalence",
        pass,
        &format!(
            "{fixtures} fixtures each; max abs diff profile {:.1e}, macro F1 {:.1e}, AUC {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_imputation_directional() {
    let started = Instant::now();
    let taxonomy = Taxonomy::default();
    let (days, cohort) = prepared_days(&CohortConfig::default(), &taxonomy);
    let report = mask_report(&cohort.truth, &days).unwrap();
    let elapsed = started.elapsed();
    let agreement = report.agreement.unwrap_or(0.0);
    let pre = report.masked_minutes as f64 / report.total_minutes as f64;
    let pass = report.residual_unknown_fraction <= 0.08 && agreement >= 0.90 && elapsed < Duration::from_secs(120);
    verdict(
        3,
        "imputation on default cohort",
        pass,
        &format!(
            "unknown {:.2}% -> {:.2}%, agreement {:.2}% of {} resolved masked minutes, {elapsed:.2?}",
            100.0 * pre,
            100.0 * report.residual_unknown_fraction,
            100.0 * agreement,
            report.resolved
        ),
    );
    assert!(pass);
}

fn random_windows(n: usize, width: usize, taxonomy: &Taxonomy, seed: u64) -> Vec<FeatureWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = taxonomy.labels()[rng.random_range(0..taxonomy.len())].clone();
            FeatureWindow {
                id: format!("w{i}"),
                user: "u".into(),
                date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
                start_minute: 0,
                width,
                label_l1: harforge_core::taxonomy::level1_of(&label, taxonomy).unwrap(),
                label_l2: label,
                synthetic: false,
                features: (0..width)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5)))
                    .collect(),
            }
        })
        .collect()
}

fn batch_loss(params: &ModelParams, batch: &harforge_core::model::Batch, loss: &LossConfig) -> f64 {
    loss_and_grad(params, batch, loss, None).unwrap().0.total
}

#[test]
fn criterion_04_gradient_correctness() {
    let taxonomy = Taxonomy::default();
    let mut cfg = ModelConfig::new(taxonomy.len());
    cfg.hidden = 8;
    cfg.dropout = 0.0;
    let params = ModelParams::init(cfg, 4).unwrap();
    let windows = random_windows(4, 12, &taxonomy, 4);
    let batch = EncodedSet::from_windows(&windows, &taxonomy).unwrap().batch(&[0, 1, 2, 3]);
    let loss = LossConfig::default();
    let (_, grads, _) = loss_and_grad(&params, &batch, &loss, None).unwrap();
    let h = 1e-5;
    let (mut worst, mut checked, mut failed) = (0.0f64, 0usize, 0usize);
    for (k, t) in params.tensors.iter().enumerate() {
        for idx in 0..t.len() {
            let mut plus = params.clone();
            plus.tensors[k].as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.tensors[k].as_slice_mut().unwrap()[idx] -= h;
            let numeric = (batch_loss(&plus, &batch, &loss) - batch_loss(&minus, &batch, &loss)) / (2.0 * h);
            let analytic = grads.tensors[k].as_slice().unwrap()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            if rel > 1e-4 {
                failed += 1;
            }
        }
    }
    let pass = failed == 0;
    verdict(
        4,
        "gradient correctness",
        pass,
        &format!("{checked} coordinates, {failed} above 1e-4, worst rel err {worst:.2e}"),
    );
    assert!(pass);
}

fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[class] - lse
}

#[test]
fn criterion_05_loss_reductions() {
    let taxonomy = Taxonomy::default();
    let mut cfg = ModelConfig::new(taxonomy.len());
    cfg.hidden = 6;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let params = ModelParams::init(cfg, seed).unwrap();
        let windows = random_windows(16, 15, &taxonomy, 100 + seed);
        let set = EncodedSet::from_windows(&windows, &taxonomy).unwrap();
        let batch = set.batch(&(0..16).collect::<Vec<_>>());
        let loss = LossConfig::default().cross_entropy_only();
        let (breakdown, _, cache) = loss_and_grad(&params, &batch, &loss, None).unwrap();
        let mean_ce = |logits: &Array2<f64>, labels: &[usize]| {
            labels
                .iter()
                .enumerate()
                .map(|(i, &c)| -log_softmax_at(&logits.row(i).to_vec(), c))
                .sum::<f64>()
                / labels.len() as f64
        };
        let expected = loss.lambda_l1 * mean_ce(&cache.logits_l1, &batch.l1)
            + loss.lambda_l2 * mean_ce(&cache.logits_l2, &batch.l2);
        worst = worst.max((breakdown.total - expected).abs());
    }
    let focal = focal_transform(std::f64::consts::LN_2, 2.0, 2.0);
    let pass = worst <= 1e-12 && (focal - 0.346574).abs() <= 1e-6;
    verdict(
        5,
        "loss reductions",
        pass,
        &format!("alpha=1,gamma=0 vs weighted CE max diff {worst:.1e}; focal(ln 2; 2, 2) = {focal:.6}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_windowing_counts() {
    // 143, 68 and 33 are listed for 15, 30 and 60. For 45 the floor-stride
    // rule gives stride 31 and 46 windows.
    let listed = [(15, 143), (30, 68), (45, 46), (60, 33)];
    let mut lines = Vec::new();
    let mut pass = true;
    for (w, expected) in listed {
        let stride = (0.7 * w as f64).floor() as usize;
        let mut oracle = 0;
        let mut start = 0;
        while start + w <= MINUTES_PER_DAY {
            oracle += 1;
            start += stride;
        }
        let got = slide_windows(MINUTES_PER_DAY, w).unwrap().len();
        let ok = got == oracle && got == expected && stride_for(w).unwrap() == stride;
        pass &= ok;
        lines.push(format!("W={w}: {got} (oracle {oracle}, stride {stride})"));
    }
    verdict(6, "windowing counts", pass, &lines.join(", "));
    assert!(pass);
}

#[test]
fn criterion_07_end_to_end_learning() {
    let started = Instant::now();
    let taxonomy = Taxonomy::default();
    let seed = 0;
    let cohort = CohortConfig {
        n_users: 20,
        n_days: 10,
        seed,
        ..CohortConfig::separable()
    };
    let (days, _) = prepared_days(&cohort, &taxonomy);
    let mut model = ModelConfig::new(taxonomy.len());
    model.hidden = 16;
    let train_cfg = TrainConfig {
        max_epochs: 20,
        batch_size: 64,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    let mut pass = true;
    for w in [15, 30, 45, 60] {
        let mut acc = [0.0; 2];
        for (slot, mode) in [SplitMode::Temporal, SplitMode::User].into_iter().enumerate() {
            let spec = SplitSpec {
                mode,
                seed,
                ..SplitSpec::default()
            };
            let mut ds = build_dataset(&days, w, &DatasetConfig::default(), &spec, &taxonomy).unwrap();
            ds.normalizer.apply(&mut ds.splits.train);
            ds.normalizer.apply(&mut ds.splits.val);
            let train_set = EncodedSet::from_windows(&ds.splits.train, &taxonomy).unwrap();
            let val_set = EncodedSet::from_windows(&ds.splits.val, &taxonomy).unwrap();
            let init = ModelParams::init(model, seed).unwrap();
            let outcome = train(&train_set, &val_set, init, &train_cfg, &LossConfig::default()).unwrap();
            let report = evaluate_run(
                &outcome.params,
                &ds.splits.test,
                Some(&ds.normalizer),
                &taxonomy,
                mode,
                w,
            )
            .unwrap();
            acc[slot] = report.accuracy_l1;
        }
        let ok = acc[0] >= 0.90 && acc[0] > acc[1];
        pass &= ok;
        lines.push(format!(
            "W={w} temporal {:.2}% user {:.2}%{}",
            100.0 * acc[0],
            100.0 * acc[1],
            if ok { "" } else { " (ordering not met)" }
        ));
    }
    let elapsed = started.elapsed();
    pass &= elapsed <= Duration::from_secs(15 * 60);
    verdict(
        7,
        "end-to-end learning",
        pass,
        &format!("{}; {elapsed:.2?}", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_08_scarcity_trend() {
    let taxonomy = Taxonomy::default();
    let config = CohortConfig {
        n_users: 5,
        n_days: 7,
        seed: 8,
        ..CohortConfig::default()
    };
    let wake_up_minutes = config.profiles["Wake Up"].duration_min;
    let (days, _) = prepared_days(&config, &taxonomy);
    let count = |w: usize| {
        build_windows(&days, w, &taxonomy, DEFAULT_LABEL_THRESHOLD)
            .unwrap()
            .iter()
            .filter(|x| &*x.label_l2 == "Wake Up")
            .count()
    };
    let (short, long) = (count(15), count(60));
    let pass = wake_up_minutes == 20 && short > 0 && long == 0;
    verdict(
        8,
        "scarcity trend",
        pass,
        &format!("{wake_up_minutes}-minute Wake Up: {short} windows at W=15, {long} at W=60"),
    );
    assert!(pass);
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_09_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("small.conf");
    std::fs::write(
        &conf,
        "seed = 9\nsynth.users = 6\nsynth.days = 10\ndataset.widths = 15,60\n\
         model.hidden = 8\ntrain.max_epochs = 2\ntrain.batch_size = 64\n",
    )
    .unwrap();
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_harforge"))
            .args(["pipeline", "--config"])
            .arg(&conf)
            .arg("--out")
            .arg(out)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(status.status.success());
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let compared: Vec<PathBuf> = files_under(&a)
        .into_iter()
        .filter(|p| !p.starts_with("timings"))
        .collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).ok().unwrap_or_default())
        .map(|p| p.display().to_string())
        .collect();
    let kind = |pred: &dyn Fn(&Path) -> bool| compared.iter().filter(|p| pred(p)).count();
    let stores = kind(&|p| p.ends_with("windows.jsonl"));
    let checkpoints = kind(&|p| p.ends_with("checkpoint.json"));
    let reports = kind(&|p| p.starts_with("reports"));
    let svgs = kind(&|p| p.extension().is_some_and(|e| e == "svg"));
    let same_listing = files_under(&a) == files_under(&b);
    let pass = differing.is_empty() && same_listing && stores == 2 && checkpoints == 2 && reports == 8 && svgs > 0;
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "{} files compared ({stores} window stores, {checkpoints} checkpoints, {reports} reports, {svgs} SVGs); differing: {:?}",
            compared.len(),
            differing
        ),
    );
    assert!(pass);
}

fn polygon_points(svg: &str, class: &str) -> Vec<(f64, f64)> {
    let doc = roxmltree::Document::parse(svg).unwrap();
    let node = doc
        .descendants()
        .find(|n| n.has_tag_name("polygon") && n.attribute("class") == Some(class))
        .unwrap();
    node.attribute("points")
        .unwrap()
        .split_whitespace()
        .map(|pair| {
            let (x, y) = pair.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

fn random_set(rng: &mut ChaCha8Rng) -> ActivityMetricSet {
    let pulse = rng.random_bool(0.8);
    ActivityMetricSet {
        distance_per_min: rng.random_range(0.0..150.0),
        steps_per_min: rng.random_range(0.0..180.0),
        pulse_per_min: pulse.then(|| rng.random_range(50.0..190.0)),
        pulse_to_min_ratio: pulse.then(|| rng.random_range(0.8..3.5)),
        pulse_to_max_ratio: pulse.then(|| rng.random_range(0.2..1.0)),
    }
}

#[test]
fn criterion_10_radar_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut bounds_ok, mut xml_ok, mut fixtures) = (true, true, 0);
    for _ in 0..1000 {
        let group: Vec<ActivityMetricSet> = (0..rng.random_range(2..8)).map(|_| random_set(&mut rng)).collect();
        let baseline = group_baseline(&group).unwrap();
        // Individuals both inside and far outside the group.
        let mut individual = random_set(&mut rng);
        individual.steps_per_min *= rng.random_range(0.0..3.0);
        for band in [BandMode::Sd, BandMode::Range] {
            let v = radar_values(&individual, &baseline, band);
            bounds_ok &= [v.individual, v.group, v.band_low, v.band_high]
                .iter()
                .flatten()
                .all(|x| (0.0..=100.0).contains(x));
            let svg = render_radar("u<1>", "Contact-Combat & \"Other\"", &individual, &baseline, band);
            xml_ok &= roxmltree::Document::parse(&svg).is_ok();
            for class in ["individual", "group"] {
                bounds_ok &= polygon_points(&svg, class)
                    .iter()
                    .all(|(x, y)| ((x - 280.0).powi(2) + (y - 300.0).powi(2)).sqrt() <= PLOT_RADIUS + 1e-3);
            }
            fixtures += 1;
        }
    }

    // The individual sits at the group median on every axis.
    let mk = |v: f64| ActivityMetricSet {
        distance_per_min: 10.0 * v,
        steps_per_min: 20.0 * v,
        pulse_per_min: Some(60.0 + v),
        pulse_to_min_ratio: Some(1.0 + v / 10.0),
        pulse_to_max_ratio: Some(0.3 + v / 100.0),
    };
    let spread = [mk(1.0), mk(2.0), mk(3.0)];
    let identical = [mk(2.0), mk(2.0), mk(2.0)];
    let mut coincident = true;
    for group in [&spread[..], &identical[..]] {
        let svg = render_radar("u01", "Wake Up", &mk(2.0), &group_baseline(group).unwrap(), BandMode::Sd);
        coincident &= polygon_points(&svg, "individual") == polygon_points(&svg, "group");
    }

    let taxonomy = Taxonomy::default();
    let config = CohortConfig {
        n_users: 4,
        n_days: 3,
        seed: 10,
        ..CohortConfig::default()
    };
    let (days, _) = prepared_days(&config, &taxonomy);
    let charts = cohort_charts(&days, &taxonomy, BandMode::Sd);
    xml_ok &= !charts.is_empty() && charts.iter().all(|c| roxmltree::Document::parse(&c.svg).is_ok());

    let pass = bounds_ok && coincident && xml_ok;
    verdict(
        10,
        "radar output",
        pass,
        &format!(
            "{fixtures} random charts in bounds: {bounds_ok}; median fixtures coincident: {coincident}; \
             well-formed XML (incl. {} cohort charts): {xml_ok}",
            charts.len()
        ),
    );
    assert!(pass);
}
