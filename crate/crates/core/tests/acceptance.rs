//! One pass/fail line per acceptance criterion. Exits nonzero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chestwsl::data::{synthetic_dataset, SyntheticSpec};
use chestwsl::densenet::{build_backbone, receptive_field_report, DenseNetConfig};
use chestwsl::gradcheck::{self, OP_TOLERANCE, SUITE_STEP};
use chestwsl::localize::{self, BBox, BoxOptions};
use chestwsl::metrics::{auroc, auroc_bruteforce_oracle};
use chestwsl::nn::Mode;
use chestwsl::params::{Forward, ParamStore};
use chestwsl::train::{self, Checkpoint, EvalOptions, SweepGrid, TrainConfig};
use chestwsl::wsl::{self, Heatmap};
use chestwsl::{Result, Tape, Tensor};

type Outcome = Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("architecture shapes", architecture_shapes),
        ("receptive-field preservation", receptive_field),
        ("pooling reductions", pooling_reductions),
        ("class-wise pooling properties", class_wise_properties),
        ("AUROC oracle", auroc_oracle),
        ("IoU oracle", iou_oracle),
        ("box extraction", box_extraction),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("reproducibility", reproducibility),
        ("sweep harness", sweep_harness),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("acceptance {:>2} {verdict} {name}: {detail} [{:.1} s]", i + 1, t0.elapsed().as_secs_f64());
        failed += usize::from(!ok);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let results = gradcheck::run_suite(20, 0)?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).expect("ops");
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let ok = failing.is_empty() && results.iter().all(|r| r.instances == 20) && secs < 60.0;
    Ok((
        ok,
        format!(
            "{} ops x 20 instances, h={SUITE_STEP:e}, worst {} {:.2e} (< {OP_TOLERANCE:e}), failing {failing:?}, {secs:.2} s (< 60 s)",
            results.len(),
            worst.op,
            worst.max_error
        ),
    ))
}

fn feature_shape(cfg: &DenseNetConfig, side: usize) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = build_backbone(cfg, &mut store, "b", &mut rng)?;
    let mut f = Forward::new(&store, Mode::Eval, false, 0);
    let x = f.input(Tensor::randn(&[1, 3, side, side], 1.0, &mut rng));
    let y = net.forward(&mut f, x)?;
    Ok(f.tape.value(y).shape().to_vec())
}

fn architecture_shapes() -> Outcome {
    let full = feature_shape(&DenseNetConfig::full(), 224)?;
    let plain = feature_shape(&DenseNetConfig::full().unmodified(), 224)?;
    let toy = feature_shape(&DenseNetConfig::toy(), 64)?;
    let ok = full == [1, 1664, 14, 14] && plain[2..] == [7, 7] && toy[2..] == [4, 4];
    Ok((ok, format!("full 224 -> {full:?}, unmodified -> {plain:?}, toy 64 -> {toy:?}")))
}

fn receptive_field() -> Outcome {
    let adaptive = receptive_field_report(&DenseNetConfig::full())?;
    let plain = receptive_field_report(&DenseNetConfig::full().unmodified())?;
    let ok = adaptive.final_rf() == plain.final_rf() && adaptive.final_stride() == 16 && plain.final_stride() == 32;
    Ok((
        ok,
        format!(
            "final RF adaptive {} vs unmodified {} (must be equal), strides {} vs {} (16 vs 32)",
            adaptive.final_rf(),
            plain.final_rf(),
            adaptive.final_stride(),
            plain.final_stride()
        ),
    ))
}

/// Value and input gradient of `spatial_pool_test` summed over all planes.
fn pool_test(x: &Tensor, kp: usize, km: usize, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let s = wsl::spatial_pool_test(&mut tape, v, kp, km, alpha)?;
    let out = tape.value(s).data().to_vec();
    let total = tape.sum_all(s);
    tape.backward(total)?;
    Ok((out, tape.grad(v).expect("input grad").to_vec()))
}

fn pooling_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_err = 0.0f64;
    let mut exact = true;
    for _ in 0..100 {
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let hw = h * w;
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
        let planes: Vec<&[f64]> = x.data().chunks(hw).collect();

        let (gmax, _) = pool_test(&x, 1, 1, 0.0)?;
        let (gmean, _) = pool_test(&x, hw, 1, 0.0)?;
        for (p, (a, b)) in planes.iter().zip(gmax.iter().zip(&gmean)) {
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = p.iter().sum::<f64>() / hw as f64;
            exact &= *a == max;
            max_err = max_err.max((b - mean).abs());
        }

        // Gradient pattern: 1/k+ on the k+ largest, α/k- on the k- smallest.
        let (kp, km) = (rng.random_range(1..=hw), rng.random_range(1..=hw));
        let alpha = rng.random_range(0.0..=1.0);
        let (_, grad) = pool_test(&x, kp, km, alpha)?;
        for (p, g) in planes.iter().zip(grad.chunks(hw)) {
            let mut order: Vec<usize> = (0..hw).collect();
            order.sort_by(|&i, &j| p[j].total_cmp(&p[i]));
            let mut want = vec![0.0; hw];
            for &i in &order[..kp] {
                want[i] += 1.0 / kp as f64;
            }
            for &i in &order[hw - km..] {
                want[i] += alpha / km as f64;
            }
            for (a, b) in g.iter().zip(&want) {
                max_err = max_err.max((a - b).abs());
            }
        }
    }
    let ok = exact && max_err < 1e-10;
    Ok((ok, format!("k+=1,a=0 equals max exactly: {exact}; mean and gradient pattern max |err| {max_err:.1e} (< 1e-10), 100 instances")))
}

fn class_pool(x: &Tensor, m: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = wsl::class_wise_pool(&mut tape, v, m)?;
    Ok(tape.value(y).data().to_vec())
}

fn integer_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-64i32..=64) as f64).collect()).expect("shape")
}

fn class_wise_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut perm_ok, mut lin_ok) = (true, true);
    for _ in 0..100 {
        // Integer inputs keep every sum exact; linearity uses power-of-two M
        // so the division by M is exact as well.
        let m = rng.random_range(2..=18);
        let c = rng.random_range(1..=3);
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let hw = h * w;
        let x = integer_tensor(&[n, m * c, h, w], &mut rng);
        let base = class_pool(&x, m)?;
        let mut shuffled = x.clone();
        for i in 0..n {
            for cls in 0..c {
                let mut perm: Vec<usize> = (0..m).collect();
                for k in (1..m).rev() {
                    perm.swap(k, rng.random_range(0..=k));
                }
                for (dst, &src) in perm.iter().enumerate() {
                    let from = ((i * m * c) + cls * m + src) * hw;
                    let to = ((i * m * c) + cls * m + dst) * hw;
                    let plane = x.data()[from..from + hw].to_vec();
                    shuffled.data_mut()[to..to + hw].copy_from_slice(&plane);
                }
            }
        }
        perm_ok &= class_pool(&shuffled, m)? == base;

        let m2 = 1 << rng.random_range(1..=4);
        let x = integer_tensor(&[n, m2 * c, h, w], &mut rng);
        let y = integer_tensor(&[n, m2 * c, h, w], &mut rng);
        let (a, b) = (rng.random_range(-4i32..=4) as f64, rng.random_range(-4i32..=4) as f64);
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect())?;
        let (px, py) = (class_pool(&x, m2)?, class_pool(&y, m2)?);
        let expect: Vec<f64> = px.iter().zip(&py).map(|(p, q)| a * p + b * q).collect();
        lin_ok &= class_pool(&mix, m2)? == expect;
    }
    Ok((perm_ok && lin_ok, format!("permutation invariance exact: {perm_ok}; linearity exact: {lin_ok}; 100 instances each")))
}

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut max_err = 0.0f64;
    let mut invariant = true;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0f64..1.0) * 8.0).round() / 8.0).collect();
        let fast = auroc(&scores, &labels, "c")?;
        let slow = auroc_bruteforce_oracle(&scores, &labels, "c")?;
        max_err = max_err.max((fast - slow).abs());
        let warped: Vec<f64> = scores.iter().map(|s| 3.0 * (2.0 * s).exp() + 1.0).collect();
        invariant &= auroc(&warped, &labels, "c")? == fast;
    }
    let ok = max_err < 1e-12 && invariant;
    Ok((ok, format!("200 instances (n <= 50, with ties): max |fast - oracle| {max_err:.1e} (< 1e-12); monotone invariance: {invariant}")))
}

fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |r: &BBox, x: f64, y: f64| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..64 {
        for x in 0..64 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (ia, ib) = (inside(a, cx, cy), inside(b, cx, cy));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0..48) as f64, rng.random_range(0..48) as f64);
        BBox::new(x, y, rng.random_range(1..=16) as f64, rng.random_range(1..=16) as f64, 0)
    };
    let mut max_err = 0.0f64;
    for _ in 0..500 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        max_err = max_err.max((localize::iou(&a, &b) - raster_iou(&a, &b)).abs());
    }
    let a = BBox::new(3., 4., 10., 7., 0);
    let identity = localize::iou(&a, &a) == 1.0;
    let disjoint = localize::iou(&a, &BBox::new(13., 4., 5., 5., 0)) == 0.0;
    let ok = max_err < 1e-2 && identity && disjoint;
    Ok((ok, format!("500 random integer boxes: max |analytic - raster| {max_err:.1e} (< 1e-2); identity 1: {identity}; disjoint 0: {disjoint}")))
}

fn box_extraction() -> Outcome {
    // Two blobs on an 8x8 map, stride 8 into a 64x64 image.
    let mut plane = vec![0.1; 64];
    for (r0, r1, c0, c1, v) in [(1, 3, 1, 2, 1.0), (5, 7, 4, 7, 0.95)] {
        for r in r0..=r1 {
            for c in c0..=c1 {
                plane[r * 8 + c] = v;
            }
        }
    }
    let heat = Heatmap(Tensor::new(&[1, 1, 8, 8], plane)?);
    let opts = BoxOptions::new(vec![0.9]);
    let boxes = localize::heatmap_to_boxes(&localize::normalize_heatmap(&heat), (64, 64), &opts)?;
    let got: Vec<(f64, f64, f64, f64)> = boxes[0].iter().map(|b| (b.x, b.y, b.w, b.h)).collect();
    let want = vec![(8., 8., 16., 24.), (32., 40., 32., 24.)];
    let mut sorted = got.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let two = sorted == want;

    let zero = Heatmap(Tensor::zeros(&[1, 1, 8, 8]));
    let none = localize::heatmap_to_boxes(&localize::normalize_heatmap(&zero), (64, 64), &opts)?[0].is_empty();
    let names: Vec<String> = ["Atelectasis", "Cardiomegaly", "Mass"].iter().map(|s| s.to_string()).collect();
    let defaults = localize::default_thresholds(&names) == [0.9, 0.8, 0.9];
    Ok((two && none && defaults, format!("two-blob map -> {got:?} (want {want:?}); zero map empty: {none}; defaults 0.8/0.9: {defaults}")))
}

fn disc_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy(SyntheticSpec::two_discs(0).class_names());
    cfg.head.m = 4;
    cfg.head.k_plus_train = 4;
    cfg.head.k_plus_test = 4;
    cfg.head.k_minus_test = 4;
    cfg.lr = 0.01;
    cfg.epochs = 30;
    cfg.workers = 1;
    cfg
}

fn synthetic_end_to_end() -> Outcome {
    chestwsl::par::set_parallel(false);
    let t0 = Instant::now();
    let cfg = disc_config();
    let train_set = synthetic_dataset(&SyntheticSpec::two_discs(100), 500)?;
    let val_set = synthetic_dataset(&SyntheticSpec::two_discs(200), 100)?;
    let test_set = synthetic_dataset(&SyntheticSpec::two_discs(300), 100)?;
    let out = train::train(&cfg, &train_set, &val_set)?;
    let ev = train::evaluate(&out.best, &cfg, &test_set, &EvalOptions::default())?;
    chestwsl::par::set_parallel(true);
    let secs = t0.elapsed().as_secs_f64();

    let aucs: Vec<f64> = ev.classification.auroc.iter().map(|a| a.unwrap_or(0.0)).collect();
    let matched = &ev.localization.as_ref().expect("planted boxes").matched;
    let hits = matched.iter().filter(|&&v| v >= 0.3).count();
    let frac = hits as f64 / matched.len().max(1) as f64;
    let ok = aucs.iter().all(|&a| a >= 0.95) && frac >= 0.7 && cfg.epochs <= 30 && secs < 600.0;
    Ok((
        ok,
        format!(
            "500 train / 100 val / 100 test, toy, M=4, {} epochs (best {}), one core: test AUROC {aucs:.4?} (>= 0.95), \
             IoU>=0.3 at threshold 0.9 for {hits}/{} = {frac:.3} of planted boxes (>= 0.70), {secs:.0} s (< 600 s)",
            cfg.epochs,
            out.best.epoch,
            matched.len()
        ),
    ))
}

fn reproducibility() -> Outcome {
    let mut cfg = disc_config();
    cfg.epochs = 3;
    let tr = synthetic_dataset(&SyntheticSpec::two_discs(11), 40)?;
    let va = synthetic_dataset(&SyntheticSpec::two_discs(12), 16)?;
    let a = train::train(&cfg, &tr, &va)?;
    let b = train::train(&cfg, &tr, &va)?;
    let logs = train::log_csv(&a.log) == train::log_csv(&b.log);
    let ckpts = a.best.to_bytes() == b.best.to_bytes() && a.last.to_bytes() == b.last.to_bytes();

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.ckpt");
    a.best.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let opts = EvalOptions::default();
    let e1 = train::evaluate(&a.best, &cfg, &va, &opts)?;
    let e2 = train::evaluate(&loaded, &cfg, &va, &opts)?;
    let round_trip = e1.scores.logits.data() == e2.scores.logits.data()
        && e1.heatmaps.tensor().data() == e2.heatmaps.tensor().data()
        && e1.boxes == e2.boxes
        && e1.to_text("") == e2.to_text("");
    Ok((logs && ckpts && round_trip, format!("identical logs: {logs}; identical checkpoints: {ckpts}; round-trip evaluation identical: {round_trip}")))
}

fn sweep_harness() -> Outcome {
    let mut cfg = disc_config();
    cfg.epochs = 1;
    let tr = synthetic_dataset(&SyntheticSpec::two_discs(21), 24)?;
    let va = synthetic_dataset(&SyntheticSpec::two_discs(22), 8)?;
    let te = synthetic_dataset(&SyntheticSpec::two_discs(23), 16)?;
    let ck = train::train(&cfg, &tr, &va)?.best;

    let grid = SweepGrid {
        alpha: vec![0.25, 0.5, 1.0],
        k_plus_test: vec![1, 4, 16],
        k_minus_test: vec![1, 4, 16],
        ..SweepGrid::default()
    };
    let test_time = train::sweep(&cfg, Some(&ck), &grid, &tr, &va, &te)?;
    let csv = test_time.to_csv();
    let complete = test_time.rows.len() == 27 && csv.lines().count() == 28 && !csv.contains(",,");

    let grid = SweepGrid { m: vec![2, 14], ..SweepGrid::default() };
    let train_time = train::sweep(&cfg, None, &grid, &tr, &va, &te)?;
    let ok = complete && test_time.training_runs == 0 && train_time.training_runs == 2 && train_time.rows.len() == 2;
    Ok((
        ok,
        format!(
            "alpha x k+ x k- = 3x3x3 from one checkpoint: {} rows, complete CSV: {complete}, {} training runs (0); \
             M in {{2,14}}: {} training runs (2)",
            test_time.rows.len(),
            test_time.training_runs,
            train_time.training_runs
        ),
    ))
}
