//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use arlab::datasets::{gen_minidigits, LabeledImages};
use arlab::evaluation::{accuracy, invariance_score, robust_accuracy, Distance};
use arlab::model::Classifier;
use arlab::regularizers::{AlignKind, AuxParams, WassersteinMode};
use arlab::runner::{cmd_theory, cmd_train, ExperimentConfig, TrainOptions};
use arlab::tensor::{argmax, l1_distance};
use arlab::theory::{argmax_pair, efficiency_from_reps, matching_from_reps, w1_exact};
use arlab::training::{select_worst, step_loss, sweep, Method, TrainMode, TrainPlan};
use arlab::transforms::{Transform, TransformFamily};
use arlab::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let took = start.elapsed();
    (
        took < limit,
        format!("{:.2}s of {}s", took.as_secs_f64(), limit.as_secs()),
    )
}

fn families() -> [TransformFamily; 3] {
    let h = arlab::datasets::MINIDIGITS_SIZE;
    [
        TransformFamily::texture().for_image_size(h),
        TransformFamily::rotation(),
        TransformFamily::contrast(),
    ]
}

fn with_coord(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut d = t.data().to_vec();
    d[i] += delta;
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

// 1. Whole-objective gradients against central differences.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let data = gen_minidigits(11, 10, 10).unwrap();
    let family = TransformFamily::rotation();
    let w = WassersteinMode::ExactMatch;
    let mut cases: Vec<(&str, TrainMode, Option<AlignKind>)> = vec![
        ("B", TrainMode::Baseline, None),
        ("V", TrainMode::VanillaAug, None),
        ("VWA", TrainMode::VanillaWorst, None),
        ("RWA", TrainMode::AlignedWorst, Some(AlignKind::SqL2)),
    ];
    for (name, kind) in [
        ("L", AlignKind::L1),
        ("S", AlignKind::SqL2),
        ("C", AlignKind::Cosine),
        ("K", AlignKind::KLDiv),
        ("W-exact", AlignKind::Wasserstein(w)),
        ("D", AlignKind::Discriminator),
    ] {
        cases.push((name, TrainMode::AlignedVertex, Some(kind)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for (name, mode, kind) in cases {
        let mut plan = TrainPlan::new(mode, family.clone());
        plan.kind = kind;
        plan.lambda = if kind.is_some() { 0.7 } else { 0.0 };
        let model = Classifier::init(&[256, 12, 10, 10], 3).unwrap();
        let aux = kind.and_then(|k| AuxParams::for_kind(k, 10, 5e-4, 0.01, 9).unwrap());
        let loss_of = |m: &Classifier| {
            step_loss(&plan, m, data.images(), data.labels(), aux.as_ref())
                .unwrap()
                .value()
        };
        let mut step = step_loss(&plan, &model, data.images(), data.labels(), aux.as_ref()).unwrap();
        let mut grads = model.params().clone();
        grads.zero_grad();
        step.graph.backward(step.loss).unwrap();
        grads.accumulate(&step.graph, &step.bound);
        let h = 1e-5;
        // Half uniform, half among coordinates with a nonzero gradient so
        // that zero-pixel weights do not dominate the sample.
        let nonzero: Vec<(usize, usize)> = (0..grads.len())
            .flat_map(|p| {
                grads
                    .grad(p)
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| **g != 0.0)
                    .map(move |(i, _)| (p, i))
            })
            .collect();
        for draw in 0..48 {
            let (p, i) = if draw % 2 == 0 {
                let p = rng.gen_range(0..grads.len());
                (p, rng.gen_range(0..grads.value(p).numel()))
            } else {
                nonzero[rng.gen_range(0..nonzero.len())]
            };
            let base = model.params().value(p).clone();
            let mut m = model.clone();
            m.params_mut().set_value(p, with_coord(&base, i, h)).unwrap();
            let lp = loss_of(&m);
            m.params_mut().set_value(p, with_coord(&base, i, -h)).unwrap();
            let lm = loss_of(&m);
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.grad(p).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            if rel > worst.0 {
                worst = (rel, format!("{name} param {p}[{i}]"));
            }
            checked += 1;
        }
    }
    let (fast, time) = within(Duration::from_secs(30), start);
    outcome(
        worst.0 < 1e-4 && fast,
        format!(
            "{checked} coordinates, max rel err {:.2e} ({}), {time}",
            worst.0, worst.1
        ),
    )
}

fn brute_w1(u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    fn rec(u: &[Vec<f64>], v: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == u.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..v.len() {
            if !used[j] {
                used[j] = true;
                rec(u, v, row + 1, used, acc + l1_distance(&u[row], &v[j]), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(u, v, 0, &mut vec![false; v.len()], 0.0, &mut best);
    best
}

// 2. Exact matching cost against permutation enumeration.
fn wasserstein_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut max_err: f64 = 0.0;
    for _ in 0..200 {
        let b = rng.gen_range(2..=6);
        let k = rng.gen_range(2..=5);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..b)
                .map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect()
        };
        let (u, v) = (draw(), draw());
        let fast = w1_exact(&Tensor::from_rows(&u).unwrap(), &Tensor::from_rows(&v).unwrap()).unwrap();
        max_err = max_err.max((fast - brute_w1(&u, &v)).abs());
    }
    let (fast, time) = within(Duration::from_secs(10), start);
    outcome(
        max_err < 1e-9 && fast,
        format!("200 pairs, max |diff| {max_err:.2e}, {time}"),
    )
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, k: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| rng.gen_range(-spread..spread)).collect())
        .collect()
}

/// `d -> d -> d` network with identity weights; logits equal pixels.
fn identity_model(d: usize) -> Classifier {
    let mut m = Classifier::init(&[d, d, d], 0).unwrap();
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let eye = Tensor::new(vec![d, d], eye).unwrap();
    m.params_mut().set_value(0, eye.clone()).unwrap();
    m.params_mut().set_value(2, eye).unwrap();
    m
}

// 3. W1 equals the identity-pairing sum exactly when efficiency holds.
fn matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut eq_err, mut strict_ok, mut fixtures) = (0.0f64, true, 0);
    for trial in 0..20 {
        let n = 6 + trial % 5;
        let k = 3;
        // Originals at least 10 apart in l1; members move each point by at
        // most 0.9.
        let orig: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![10.0 * i as f64, 10.0 * (i % 3) as f64, 5.0 * (i % 2) as f64])
            .collect();
        let members: Vec<Tensor> = std::iter::once(Tensor::from_rows(&orig).unwrap())
            .chain((0..4).map(|_| {
                let noise = random_rows(&mut rng, n, k, 0.3);
                Tensor::from_rows(
                    &orig
                        .iter()
                        .zip(&noise)
                        .map(|(o, e)| o.iter().zip(e).map(|(a, b)| a + b).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                )
                .unwrap()
            }))
            .collect();
        let o = Tensor::from_rows(&orig).unwrap();
        let family = TransformFamily::identity_only();
        if efficiency_from_reps(&o, &members).fraction != 1.0 {
            return outcome(false, format!("fixture {trial} is not efficient"));
        }
        for m in matching_from_reps(&o, &members, &family).unwrap().members {
            eq_err = eq_err.max((m.w1 - m.l1_sum).abs());
        }
        // Violation: each point shifted onto its successor's neighbourhood.
        let shifted: Vec<Vec<f64>> = (0..n)
            .map(|i| orig[(i + 1) % n].iter().map(|x| x + 0.1).collect())
            .collect();
        let s = Tensor::from_rows(&shifted).unwrap();
        let r = efficiency_from_reps(&o, std::slice::from_ref(&s));
        let pa = matching_from_reps(&o, &[s], &family).unwrap();
        strict_ok &= r.fraction < 1.0 && pa.members[0].w1 < pa.members[0].l1_sum;
        fixtures += 1;
    }
    // The same through a model: identity logits on separated images.
    let images: Vec<f64> = (0..5).flat_map(|i| [0.2 * i as f64, 1.0 - 0.2 * i as f64]).collect();
    let data = LabeledImages::new(Tensor::new(vec![5, 1, 2], images).unwrap(), vec![0, 1, 0, 1, 0], 2).unwrap();
    let fam = TransformFamily::new(
        "dim",
        vec![
            Transform::Identity,
            Transform::PixelMap {
                scale: 0.95,
                negate: false,
            },
        ],
        0,
        1,
    )
    .unwrap();
    let model_report = arlab::theory::check_matching(&identity_model(2), &data, &fam).unwrap();
    let model_ok = model_report
        .members
        .iter()
        .all(|m| m.efficient && m.equality_holds == Some(true));
    outcome(
        eq_err < 1e-9 && strict_ok && model_ok,
        format!("{fixtures} efficient fixtures max |W1 - sum l1| {eq_err:.2e}; violations strict: {strict_ok}; model fixture: {model_ok}"),
    )
}

// 4. robust <= accuracy and invariance in [1/t, 1].
fn metric_bounds() -> Outcome {
    let data = gen_minidigits(4, 120, 10).unwrap();
    let mut bad = Vec::new();
    for s in 0..50u64 {
        let hidden = 4 + (s as usize % 5) * 6;
        let model = Classifier::init(&[256, hidden, 10], 1000 + s).unwrap();
        for fam in families() {
            let acc = accuracy(&model, &data).unwrap();
            let rob = robust_accuracy(&model, &data, &fam).unwrap();
            let inv = invariance_score(&model, &data, &fam).unwrap();
            let t = fam.len() as f64;
            if rob > acc || !(1.0 / t - 1e-12..=1.0).contains(&inv) {
                bad.push(format!("seed {s} {}: acc {acc} rob {rob} inv {inv}", fam.name()));
            }
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "150 (model, family) cases".into()
        } else {
            bad.join("; ")
        },
    )
}

// 5. Transform identities.
fn transform_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let digits = gen_minidigits(5, 20, 10).unwrap();
    let random = Tensor::new(vec![20, 16, 16], (0..20 * 256).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let mid = random.map(|p| 0.25 + 0.5 * p);
    let mut notes = Vec::new();
    let mut ok = true;
    let contrast = TransformFamily::contrast();
    let a3 = &contrast.members()[3];
    for batch in [digits.images(), &random] {
        ok &= Transform::Identity.apply_batch(batch).unwrap() == *batch;
        let twice = a3.apply_batch(&a3.apply_batch(batch).unwrap()).unwrap();
        ok &= max_diff(&twice, batch) < 1e-12;
        ok &= max_diff(&Transform::Rotate(0.0).apply_batch(batch).unwrap(), batch) < 1e-12;
        for fam in families() {
            for t in fam.members() {
                ok &= t
                    .apply_batch(batch)
                    .unwrap()
                    .data()
                    .iter()
                    .all(|p| (0.0..=1.0).contains(p));
            }
        }
    }
    let mut idem: f64 = 0.0;
    let mut clamped: f64 = 0.0;
    for r in [1.0, 3.0, 5.0, 7.0, 12.0] {
        let f = Transform::FreqCutoff(r);
        let once = f.apply_batch(&mid).unwrap();
        idem = idem.max(max_diff(&f.apply_batch(&once).unwrap(), &once));
        let d = f.apply_batch(digits.images()).unwrap();
        clamped = clamped.max(max_diff(&f.apply_batch(&d).unwrap(), &d));
    }
    ok &= idem < 1e-6;
    notes.push(format!(
        "FreqCutoff idempotence {idem:.1e} on unclamped inputs ({clamped:.1e} on digits, where clamping binds)"
    ));
    let (fast, time) = within(Duration::from_secs(5), start);
    notes.push(time);
    outcome(ok && fast, notes.join("; "))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sweep_stats(
    method: Method,
    grid: &[f64],
    train: &LabeledImages,
    test: &LabeledImages,
    family: &TransformFamily,
) -> (f64, f64, f64, f64, Option<f64>) {
    let mut template = TrainPlan::new(TrainMode::Baseline, family.clone());
    template.epochs = 15;
    template.hidden = vec![64];
    template.batch_size = 32;
    template.lr = arlab::training::LrSchedule::constant(0.1);
    let plan = template.for_method(method, WassersteinMode::ExactMatch);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let t = sweep(&plan, grid, &[0, 1, 2], train, test, family, Distance::Logits, threads).unwrap();
    (
        t.accuracy.mean,
        t.robust_accuracy.mean,
        t.invariance.mean,
        t.robust_accuracy.std,
        t.selected_lambda,
    )
}

// 6. Ordering of the rotation results.
fn table_ordering() -> Outcome {
    let start = Instant::now();
    let train = gen_minidigits(60, 2000, 10).unwrap();
    let test = gen_minidigits(61, 1000, 10).unwrap();
    let family = TransformFamily::rotation();
    let grid = arlab::training::default_lambda_grid();
    let (b_acc, b_rob, b_inv, _, _) = sweep_stats(Method::B, &grid, &train, &test, &family);
    let (_, v_rob, v_inv, _, _) = sweep_stats(Method::V, &grid, &train, &test, &family);
    let (_, s_rob, s_inv, _, s_lambda) = sweep_stats(Method::S, &grid, &train, &test, &family);
    let a = b_rob <= b_acc - 0.30;
    let b = b_inv < v_inv && v_inv < s_inv;
    let c = s_rob >= v_rob - 0.005;
    let took = start.elapsed().as_secs_f64();
    outcome(
        a && b && c && took < 45.0 * 60.0,
        format!(
            "(a) B acc {:.1} rob {:.1} [{}]; (b) inv B {:.1} V {:.1} S {:.1} [{}]; (c) rob V {:.1} S {:.1} at lambda {:e} [{}]; {took:.0}s",
            100.0 * b_acc,
            100.0 * b_rob,
            pf(a),
            100.0 * b_inv,
            100.0 * v_inv,
            100.0 * s_inv,
            pf(b),
            100.0 * v_rob,
            100.0 * s_rob,
            s_lambda.unwrap_or(f64::NAN),
            pf(c),
        ),
    )
}

fn pf(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

// 7. Worst-case selection against a per-sample scan.
fn worst_case_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fams = families();
    let mut mismatches = 0;
    for inst in 0..100u64 {
        let fam = &fams[inst as usize % 3];
        let b = rng.gen_range(1..=12);
        let data = gen_minidigits(700 + inst, 12, 10).unwrap().take(b).unwrap();
        let model = Classifier::init(&[256, rng.gen_range(4..20), 10], inst).unwrap();
        let got = select_worst(&model, data.images(), data.labels(), fam).unwrap();
        for i in 0..b {
            let y = data.labels()[i];
            let single = data.images().select_rows(&[i]).unwrap();
            let ce: Vec<f64> = fam
                .members()
                .iter()
                .map(|t| {
                    let z = model.logits(&t.apply_batch(&single).unwrap()).unwrap();
                    let row = z.row(0);
                    let m = row[argmax(row)];
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .collect();
            let mut best = 0;
            for j in 1..ce.len() {
                if ce[j] > ce[best] {
                    best = j;
                }
            }
            mismatches += usize::from(got[i] != best);
        }
    }
    let (fast, time) = within(Duration::from_secs(30), start);
    outcome(
        mismatches == 0 && fast,
        format!("100 instances, {mismatches} mismatches, {time}"),
    )
}

// 8. Theory checks on a trained model.
fn theory_total() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{"name": "theory", "dataset": {{"kind": "minidigits", "seed": 8, "n": 400, "test_seed": 9, "test_n": 100}},
            "family": "rotation", "methods": ["V"], "seeds": [0], "epochs": 5, "output_dir": {:?}}}"#,
        dir.path().display().to_string()
    ))
    .unwrap();
    let out = cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let weights = out.run_dir.join(out.record.cells[0].weights.as_ref().unwrap());
    let mut problems = Vec::new();
    for fam in ["texture", "rotation", "contrast"] {
        let r = match cmd_theory(&weights, "minidigits:10:150", fam, Some("minidigits:8:150")) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{fam}: {e}"));
                continue;
            }
        };
        for a in r.assumption_reports() {
            if !(0.0..=1.0).contains(&a.fraction) {
                problems.push(format!("{fam} {} fraction {}", a.assumption, a.fraction));
            }
        }
        if r.matching.members.iter().any(|m| m.gap < 0.0) {
            problems.push(format!("{fam}: negative gap"));
        }
        let v = r.vertices.as_ref().unwrap();
        let m = v.pairwise_matrix.as_ref().unwrap();
        let t = m.len();
        let symmetric = (0..t).all(|i| m[i][i] == 0.0 && (0..t).all(|j| m[i][j] == m[j][i]));
        let mut scan = (0, 1);
        for i in 0..t {
            for j in i + 1..t {
                if m[i][j] > m[scan.0][scan.1] {
                    scan = (i, j);
                }
            }
        }
        if !symmetric {
            problems.push(format!("{fam}: matrix not symmetric with zero diagonal"));
        }
        let designated = m[r_family(fam).vertex_plus()][r_family(fam).vertex_minus()];
        if argmax_pair(m) != scan || (v.fraction == 1.0) != (designated >= m[scan.0][scan.1]) {
            problems.push(format!("{fam}: argmax {:?} vs scan {scan:?}", argmax_pair(m)));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "3 families".into()
        } else {
            problems.join("; ")
        },
    )
}

fn r_family(name: &str) -> TransformFamily {
    TransformFamily::by_name(name).unwrap()
}

// 9. Byte-identical metrics across repeated runs.
fn determinism() -> Outcome {
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(&format!(
            r#"{{"name": "det", "dataset": {{"kind": "minidigits", "seed": 3, "n": 120, "test_seed": 4, "test_n": 60}},
                "hidden": [16], "family": "contrast", "methods": ["B", "V", "S", "K", "W", "D", "RWA"],
                "lambda_grid": [0.001, 0.1], "seeds": [0, 1], "epochs": 2, "batch_size": 32, "output_dir": {:?}}}"#,
            dir.path().display().to_string()
        ))
        .unwrap();
        let opts = TrainOptions {
            threads,
            ..TrainOptions::default()
        };
        let out = cmd_train(&cfg, &opts).unwrap();
        std::fs::read(out.run_dir.join("metrics.csv")).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(4));
    outcome(
        a == b && a == c,
        format!(
            "{} bytes; serial repeat equal: {}; parallel equal: {}",
            a.len(),
            a == b,
            a == c
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 wasserstein oracle", wasserstein_oracle),
        ("3 matching identity under efficiency", matching),
        ("4 metric bounds", metric_bounds),
        ("5 transform identities", transform_identities),
        ("6 rotation table ordering", table_ordering),
        ("7 worst-case selection oracle", worst_case_oracle),
        ("8 theory checks total", theory_total),
        ("9 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!r.pass);
        println!(
            "{} criterion {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
