//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Heavy tests (training runs) serialize on a global lock so wall-clock
//! budgets stay meaningful on small machines. Oracles in this file are
//! deliberately written independently of the library implementation.

use msa2net::adaptive_conv::{Phase, SelectionMode, SelfAdaptiveConv};
use msa2net::data::{self, OverlapPolicy, ShapeKind, SyntheticSpec};
use msa2net::encoder::EncoderConfig;
use msa2net::fingerprint::{
    build_candidate_matrix, quartile_stats, Fingerprint, KernelCandidateMatrix, BASE_KERNELS,
};
use msa2net::metrics::{self, BinaryMask, HausdorffMode};
use msa2net::model::{Guidance, ModelConfig, Msa2Net};
use msa2net::rng::Rng;
use msa2net::tape::Tape;
use msa2net::tensor::{Param, Tensor};
use msa2net::train::{self, log_to_csv, Checkpoint, LossWeights, OptimizerConfig, RunConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

static TRAINING_LOCK: Mutex<()> = Mutex::new(());

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("msa2net_accept_{}_{}", tag, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn preset_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name)
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: (64, 64),
        patch_stride: 4,
        stage_dims: [8, 16, 32, 64],
        blocks_per_stage: [1, 1, 1, 1],
        heads_per_stage: [2, 2, 4, 4],
        stripe_widths: [1, 2, 2, 4],
    }
}

fn desk_encoder() -> EncoderConfig {
    EncoderConfig::default()
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let mut v = vec![0.0; shape.iter().product()];
    rng.fill_uniform(&mut v, scale);
    Tensor::from_vec(shape, v)
}

// ─────────────────────────────────────────────────────────────────────
// 1. Quartile oracle
// ─────────────────────────────────────────────────────────────────────

/// Independent oracle: sort then interpolate at q·(n−1).
fn oracle_quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[test]
fn acceptance_01_quartile_oracle() {
    let start = Instant::now();
    let mut rng = Rng::new(0xACC1);
    for trial in 0..1000 {
        let n = 1 + rng.below(200);
        let samples: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let got = quartile_stats(&samples).unwrap();
        for (i, &q) in [0.25, 0.5, 0.75, 0.95].iter().enumerate() {
            assert_eq!(
                got[i],
                oracle_quantile(&samples, q),
                "trial {} n {} quantile {}",
                trial,
                n,
                q
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {:?}", elapsed);
    println!(
        "ACCEPTANCE 1 PASS: quartile_stats matches the sort-and-interpolate oracle on 1000 random lists ({:?})",
        elapsed
    );
}

// ─────────────────────────────────────────────────────────────────────
// 2. Candidate-matrix law
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_02_candidate_matrix_law() {
    let mut rng = Rng::new(0xACC2);
    for trial in 0..200 {
        let mut q = [0.0; 4];
        for v in q.iter_mut() {
            *v = rng.next_f64();
        }
        q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let fp = Fingerprint {
            dataset_id: format!("t{}", trial),
            sample_count: 1,
            per_class_quartiles: BTreeMap::new(),
            pooled_quartiles: q,
        };
        let m = build_candidate_matrix(&fp);
        for b in 0..4 {
            for s in 0..4 {
                // exact outer-product law (bit equality)
                assert_eq!(m.raw[b][s], BASE_KERNELS[b] * (1.0 + q[s]));
                let k = m.quantized[b][s];
                assert!(k % 2 == 1 && (1..=13).contains(&k), "kernel {}", k);
            }
        }
    }
    // QS = 0 gives the base schedule in every column
    let zero = Fingerprint {
        dataset_id: "zero".into(),
        sample_count: 1,
        per_class_quartiles: BTreeMap::new(),
        pooled_quartiles: [0.0; 4],
    };
    let m = build_candidate_matrix(&zero);
    for s in 0..4 {
        let column: Vec<usize> = (0..4).map(|b| m.quantized[b][s]).collect();
        assert_eq!(column, vec![1, 3, 5, 7]);
    }
    println!("ACCEPTANCE 2 PASS: raw = outer(base, 1+QS) exactly on 200 random fingerprints; quantized odd in [1,13]; QS=0 gives [1,3,5,7]");
}

// ─────────────────────────────────────────────────────────────────────
// 3. Adaptivity monotonicity
// ─────────────────────────────────────────────────────────────────────

fn preset_run(tag: &str, preset: &str, dir: &Path) -> (Vec<usize>, f64) {
    let spec_text = std::fs::read_to_string(preset_path(preset)).unwrap();
    let spec: SyntheticSpec = serde_json::from_str(&spec_text).unwrap();
    let ds = dir.join(format!("ds_{}", tag));
    let mut manifest = data::generate(&spec, 32, &ds).unwrap();
    manifest.splits = data::split_stems(manifest.all_stems(), (1.0, 0.0, 0.0), 1);
    data::write_manifest(&ds, &manifest).unwrap();
    let config = RunConfig {
        manifest: ds.join("manifest.json"),
        fingerprint: "auto".into(),
        guidance: Guidance::SelfAdaptive,
        use_bridge: true,
        use_msadecoder: true,
        encoder: desk_encoder(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            selection_anneal: 0.15,
            ..OptimizerConfig::default()
        },
        epochs: 40,
        batch_size: 4,
        seed: 11,
        loss_weights: LossWeights::default(),
        out_dir: dir.join(format!("run_{}", tag)),
    };
    let start = Instant::now();
    let outcome = train::train(&config).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 600.0, "{} preset run took {}s", tag, elapsed);
    let report = outcome.checkpoint.model.kernel_schedule_report();
    (report.flat(), elapsed)
}

#[test]
fn acceptance_03_adaptivity_monotonicity() {
    let _lock = TRAINING_LOCK.lock().unwrap();
    let dir = work_dir("mono");
    let (small, t_small) = preset_run("small", "small_objects.json", &dir);
    let (large, t_large) = preset_run("large", "large_objects.json", &dir);
    assert_eq!(small.len(), 16);
    assert_eq!(large.len(), 16);
    let mut strict = false;
    for (i, (s, l)) in small.iter().zip(&large).enumerate() {
        assert!(
            s <= l,
            "position {}: small kernel {} > large kernel {} (small {:?} large {:?})",
            i,
            s,
            l,
            small,
            large
        );
        strict |= s < l;
    }
    assert!(strict, "no strict inequality: {:?} vs {:?}", small, large);
    let _ = std::fs::remove_dir_all(&dir);
    println!(
        "ACCEPTANCE 3 PASS: small-object kernels {:?} <= large-object kernels {:?} elementwise with strict inequality ({:.0}s + {:.0}s)",
        small, large, t_small, t_large
    );
}

// ─────────────────────────────────────────────────────────────────────
// 4. Gradient correctness of the self-adaptive conv
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_04_gradient_correctness() {
    let h = 1e-5;
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    for probe in 0..5u64 {
        let mut rng = Rng::new(0xACC4 + probe);
        let matrix = KernelCandidateMatrix::from_shift([
            1.0 + 0.3 * rng.next_f64(),
            1.2 + 0.3 * rng.next_f64(),
            1.4 + 0.3 * rng.next_f64(),
            1.6 + 0.3 * rng.next_f64(),
        ]);
        let mut conv = SelfAdaptiveConv::new(&mut rng, 8, 8, &matrix, SelectionMode::Learned, true);
        // random logits so softmax weights are generic
        conv.logits = Some(Param::new(rand_tensor(&mut rng, &[16], 0.5)));
        // input is 4×4 spatial with 8 channels
        let x0 = rand_tensor(&mut rng, &[8, 4, 4], 1.0);
        let probe_w = rand_tensor(&mut rng, &[8, 4, 4], 1.0);

        let loss_of = |c: &SelfAdaptiveConv, xt: &Tensor| -> f64 {
            let mut t = Tape::new();
            let x = t.constant(xt.clone());
            let y = c.forward(&mut t, x, Phase::Soft);
            t.value(y)
                .data()
                .iter()
                .zip(probe_w.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        // analytic pass
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let y = conv.forward(&mut t, x, Phase::Soft);
        let pw = t.constant(probe_w.clone());
        let prod = t.mul(y, pw);
        let loss = t.sum_all(prod);
        let grads = t.backward(loss);

        let mut check = |analytic: f64, fd: f64, what: &str| {
            let denom = fd.abs().max(analytic.abs()).max(1e-10);
            let rel = (fd - analytic).abs() / denom;
            // near-zero pairs are fine at absolute precision
            if fd.abs() < 1e-9 && analytic.abs() < 1e-9 {
                return;
            }
            assert!(
                rel < tol,
                "probe {} {}: fd {} vs analytic {} (rel {})",
                probe,
                what,
                fd,
                analytic,
                rel
            );
            if rel > worst {
                worst = rel;
            }
        };

        // input gradient: every coordinate
        let gx = grads.get(x).unwrap().clone();
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss_of(&conv, &plus) - loss_of(&conv, &minus)) / (2.0 * h);
            check(gx.data()[i], fd, "input");
        }

        // selection logits: every coordinate
        let logits = conv.logits.clone().unwrap();
        let gl = t.grad_of(&grads, &logits).unwrap().clone();
        for i in 0..16 {
            let perturb = |delta: f64| {
                let mut c2 = conv.clone();
                let mut lv = logits.value.clone();
                lv.data_mut()[i] += delta;
                c2.logits = Some(Param { id: logits.id, value: lv });
                loss_of(&c2, &x0)
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            check(gl.data()[i], fd, "logits");
        }

        // candidate weights: sampled coordinates in every candidate tensor
        for flat in 0..16 {
            let cand = conv.candidates[flat].clone();
            let gc = t.grad_of(&grads, &cand).unwrap().clone();
            let mut coord_rng = Rng::new(0xC00D + flat as u64);
            for _ in 0..6 {
                let i = coord_rng.below(cand.len());
                let perturb = |delta: f64| {
                    let mut c2 = conv.clone();
                    let mut cv = cand.value.clone();
                    cv.data_mut()[i] += delta;
                    c2.candidates[flat] = Param { id: cand.id, value: cv };
                    loss_of(&c2, &x0)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                check(gc.data()[i], fd, "candidate");
            }
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: input/candidate/logit gradients match central differences on 5 probes (worst rel err {:.2e} < 1e-4)",
        worst
    );
}

// ─────────────────────────────────────────────────────────────────────
// 5. Soft/hard consistency at saturated logits
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_05_soft_hard_consistency() {
    let mut worst: f64 = 0.0;
    for trial in 0..8u64 {
        let mut rng = Rng::new(0xACC5 + trial);
        let matrix = KernelCandidateMatrix::from_shift([1.1, 1.25, 1.5, 1.8]);
        let mut conv = SelfAdaptiveConv::new(&mut rng, 6, 6, &matrix, SelectionMode::Learned, true);
        let winner = rng.below(16);
        let mut logits = vec![0.0; 16];
        logits[winner] = 1e3; // argmax margin 1e3
        conv.logits = Some(Param::new(Tensor::from_vec(&[16], logits)));
        let x = rand_tensor(&mut rng, &[6, 5, 5], 1.0);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let soft = conv.forward(&mut t, xv, Phase::Soft);
        let hard = conv.forward(&mut t, xv, Phase::Hard);
        let diff = t.value(soft).max_abs_diff(t.value(hard));
        worst = worst.max(diff);
    }
    assert!(worst < 1e-5, "∞-norm {}", worst);
    println!(
        "ACCEPTANCE 5 PASS: |soft − hard| ∞-norm {:.2e} < 1e-5 at logit margin 1e3",
        worst
    );
}

// ─────────────────────────────────────────────────────────────────────
// 6. Shape chain
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_06_shape_chain() {
    for &(hw, dims) in &[(64usize, [8usize, 16, 32, 64]), (224, [8, 16, 32, 64])] {
        let encoder = EncoderConfig {
            input_size: (hw, hw),
            patch_stride: 4,
            stage_dims: dims,
            blocks_per_stage: [1, 1, 1, 1],
            heads_per_stage: [2, 2, 4, 4],
            stripe_widths: [1, 2, 2, 4],
        };
        let model = Msa2Net::new(ModelConfig {
            encoder,
            num_classes: 4,
            guidance: Guidance::SelfAdaptive,
            use_bridge: true,
            use_msadecoder: true,
            candidate_matrix: KernelCandidateMatrix::from_shift([1.05, 1.2, 1.4, 1.7]),
            seed: 6,
        });
        let mut rng = Rng::new(60 + hw as u64);
        let img = rand_tensor(&mut rng, &[3, hw, hw], 0.5);

        // stage resolutions
        let mut t = Tape::new();
        let x = t.constant(img.clone());
        let feats = model.encoder.encode(&mut t, x, Phase::Hard);
        for (i, &f) in feats.0.iter().enumerate() {
            let v = t.value(f);
            let div = 4 << i;
            assert_eq!(
                (v.h(), v.w()),
                (hw / div, hw / div),
                "stage {} at {}",
                i,
                hw
            );
        }
        // bridge preserves shapes
        let refined = model
            .bridge
            .as_ref()
            .unwrap()
            .refine_all(&mut t, &feats.0, Phase::Hard);
        for (&f, &r) in feats.0.iter().zip(&refined) {
            assert_eq!(t.value(f).shape(), t.value(r).shape());
        }
        // decoder restores full resolution with normalized probabilities
        let result = model.predict(&img);
        assert_eq!((result.height, result.width), (hw, hw));
        for p in 0..hw * hw {
            let s: f64 = result.probabilities[p * 4..(p + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "pixel {} sums to {}", p, s);
        }
    }
    println!("ACCEPTANCE 6 PASS: stage resolutions /4../32, bridge shape-preserving, decoder restores 64 and 224 inputs with unit probability sums");
}

// ─────────────────────────────────────────────────────────────────────
// 7. Metrics oracle
// ─────────────────────────────────────────────────────────────────────

struct OracleMetrics {
    dice: f64,
    hd95: Option<f64>,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
    accuracy: f64,
}

/// Brute-force pixel/pairwise-distance oracle.
fn oracle_metrics(pred: &[bool], truth: &[bool], h: usize, w: usize) -> OracleMetrics {
    let (mut tp, mut tn, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
        }
    }
    let dice = if tp + fp + fnn == 0 {
        1.0
    } else {
        2.0 * tp as f64 / ((tp + fp) + (tp + fnn)) as f64
    };
    let pts = |m: &[bool]| -> Vec<(f64, f64)> {
        (0..h * w)
            .filter(|&i| m[i])
            .map(|i| ((i / w) as f64, (i % w) as f64))
            .collect()
    };
    let pa = pts(pred);
    let pb = pts(truth);
    let hd95 = if pa.is_empty() || pb.is_empty() {
        None
    } else {
        let perc95 = |mut d: Vec<f64>| {
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = 0.95 * (d.len() as f64 - 1.0);
            let lo = pos.floor() as usize;
            d[lo] + (pos - lo as f64) * (d[pos.ceil() as usize] - d[lo])
        };
        let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
            from.iter()
                .map(|&(y, x)| {
                    to.iter()
                        .map(|&(ty, tx)| ((y - ty).hypot(x - tx)))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        Some(perc95(directed(&pa, &pb)).max(perc95(directed(&pb, &pa))))
    };
    OracleMetrics {
        dice,
        hd95,
        sensitivity: (tp + fnn > 0).then(|| tp as f64 / (tp + fnn) as f64),
        specificity: (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64),
        accuracy: (tp + tn) as f64 / (h * w) as f64,
    }
}

fn check_against_oracle(pred: &[bool], truth: &[bool], h: usize, w: usize, what: &str) {
    let pm = BinaryMask::new(h, w, pred.to_vec());
    let tm = BinaryMask::new(h, w, truth.to_vec());
    let oracle = oracle_metrics(pred, truth, h, w);
    let tol = 1e-9;
    assert!((metrics::dice(&pm, &tm).unwrap() - oracle.dice).abs() < tol, "{} dice", what);
    let got_hd = metrics::hd95(&pm, &tm, HausdorffMode::Percentile95).unwrap();
    match (got_hd, oracle.hd95) {
        (None, None) => {}
        (Some(a), Some(b)) => assert!((a - b).abs() < tol, "{} hd95 {} vs {}", what, a, b),
        other => panic!("{} hd95 definedness mismatch {:?}", what, other),
    }
    let c = metrics::confusion(&pm, &tm).unwrap();
    match (metrics::sensitivity(&c), oracle.sensitivity) {
        (None, None) => {}
        (Some(a), Some(b)) => assert!((a - b).abs() < tol, "{} sensitivity", what),
        other => panic!("{} sensitivity mismatch {:?}", what, other),
    }
    match (metrics::specificity(&c), oracle.specificity) {
        (None, None) => {}
        (Some(a), Some(b)) => assert!((a - b).abs() < tol, "{} specificity", what),
        other => panic!("{} specificity mismatch {:?}", what, other),
    }
    assert!(
        (metrics::accuracy(&c).unwrap() - oracle.accuracy).abs() < tol,
        "{} accuracy",
        what
    );
}

#[test]
fn acceptance_07_metrics_oracle() {
    // exhaustive over all 2×2 mask pairs
    for a in 0..16u32 {
        for b in 0..16u32 {
            let to_mask = |bits: u32| (0..4).map(|i| bits >> i & 1 == 1).collect::<Vec<bool>>();
            check_against_oracle(&to_mask(a), &to_mask(b), 2, 2, &format!("2x2 {} {}", a, b));
        }
    }
    // 500 random pairs up to 32×32
    let mut rng = Rng::new(0xACC7);
    for trial in 0..500 {
        let h = 1 + rng.below(32);
        let w = 1 + rng.below(32);
        let density = 0.02 + 0.6 * rng.next_f64();
        let gen = |rng: &mut Rng| (0..h * w).map(|_| rng.next_f64() < density).collect::<Vec<bool>>();
        let pred = gen(&mut rng);
        let truth = gen(&mut rng);
        check_against_oracle(&pred, &truth, h, w, &format!("trial {}", trial));
    }
    println!("ACCEPTANCE 7 PASS: dice/hd95/sensitivity/specificity/accuracy match brute-force oracles on 256 exhaustive 2x2 pairs and 500 random pairs (tol 1e-9)");
}

// ─────────────────────────────────────────────────────────────────────
// 8. End-to-end overfit
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_08_overfit_toy_model() {
    let _lock = TRAINING_LOCK.lock().unwrap();
    let dir = work_dir("overfit");
    let spec = SyntheticSpec {
        image_size: 64,
        num_classes: 2,
        class_areas: vec![[0.08, 0.30]],
        shapes: ShapeKind::Mixed,
        overlap: OverlapPolicy::Disjoint,
        noise: 0.05,
        seed: 42,
    };
    let ds = dir.join("ds");
    data::generate(&spec, 8, &ds).unwrap();
    let config = RunConfig {
        manifest: ds.join("manifest.json"),
        fingerprint: "auto".into(),
        guidance: Guidance::SelfAdaptive,
        use_bridge: true,
        use_msadecoder: true,
        encoder: desk_encoder(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        // 8 images, batch 4 → 2 steps per epoch → exactly 200 steps
        epochs: 100,
        batch_size: 4,
        seed: 7,
        loss_weights: LossWeights::default(),
        out_dir: dir.join("run"),
    };
    let start = Instant::now();
    let outcome = train::train(&config).unwrap();
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 600.0,
        "training took {:?}",
        elapsed
    );
    let (manifest, root) = data::read_manifest(&config.manifest).unwrap();
    let samples = data::load_split(&manifest, &root, "train").unwrap();
    let report = train::evaluate_samples(
        &outcome.checkpoint.model,
        &samples,
        manifest.num_classes,
        HausdorffMode::Percentile95,
    )
    .unwrap();
    assert!(
        report.mean_dice >= 0.95,
        "train mean dice {} < 0.95",
        report.mean_dice
    );
    let _ = std::fs::remove_dir_all(&dir);
    println!(
        "ACCEPTANCE 8 PASS: desk model reaches train mean Dice {:.4} >= 0.95 in 200 steps ({:?})",
        report.mean_dice, elapsed
    );
}

// ─────────────────────────────────────────────────────────────────────
// 9. Ablation direction
// ─────────────────────────────────────────────────────────────────────

fn ablation_dataset(dir: &Path) -> PathBuf {
    // noisy multi-scale scenes: hard enough that the refinement and grouped
    // decoding capacity separate the variants
    let spec = SyntheticSpec {
        image_size: 64,
        num_classes: 4,
        class_areas: vec![[0.005, 0.02], [0.03, 0.08], [0.15, 0.35]],
        shapes: ShapeKind::Mixed,
        overlap: OverlapPolicy::Disjoint,
        noise: 0.2,
        seed: 77,
    };
    let ds = dir.join("ds");
    let mut manifest = data::generate(&spec, 200, &ds).unwrap();
    manifest.splits = data::split_stems(manifest.all_stems(), (0.8, 0.2, 0.0), spec.seed);
    data::write_manifest(&ds, &manifest).unwrap();
    ds
}

fn ablation_run(ds: &Path, dir: &Path, use_bridge: bool, use_msadecoder: bool, seed: u64) -> f64 {
    let config = RunConfig {
        manifest: ds.join("manifest.json"),
        fingerprint: "auto".into(),
        guidance: Guidance::SelfAdaptive,
        use_bridge,
        use_msadecoder,
        // wide enough that the grouped decoder has real capacity per group
        encoder: EncoderConfig {
            input_size: (64, 64),
            patch_stride: 4,
            stage_dims: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            heads_per_stage: [2, 4, 4, 8],
            stripe_widths: [1, 2, 2, 4],
        },
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        epochs: 12,
        batch_size: 8,
        seed,
        loss_weights: LossWeights::default(),
        out_dir: dir.join(format!("run_{}_{}_{}", use_bridge, use_msadecoder, seed)),
    };
    let outcome = train::train(&config).unwrap();
    outcome.checkpoint.best_metric
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[1]
}

#[test]
fn acceptance_09_ablation_direction() {
    let _lock = TRAINING_LOCK.lock().unwrap();
    let dir = work_dir("ablation");
    let ds = ablation_dataset(&dir);
    let seeds = [1u64, 2, 3];
    let run_variant = |bridge: bool, dec: bool| -> f64 {
        let scores = [
            ablation_run(&ds, &dir, bridge, dec, seeds[0]),
            ablation_run(&ds, &dir, bridge, dec, seeds[1]),
            ablation_run(&ds, &dir, bridge, dec, seeds[2]),
        ];
        median3(scores)
    };
    let full = run_variant(true, true);
    let no_bridge = run_variant(false, true);
    let no_decoder = run_variant(true, false);
    let neither = run_variant(false, false);
    assert!(
        full >= no_bridge && full >= no_decoder,
        "full {} vs single ablations {} / {}",
        full,
        no_bridge,
        no_decoder
    );
    assert!(
        no_bridge >= neither && no_decoder >= neither,
        "single ablations {} / {} vs double {}",
        no_bridge,
        no_decoder,
        neither
    );
    let _ = std::fs::remove_dir_all(&dir);
    println!(
        "ACCEPTANCE 9 PASS: median val Dice over 3 seeds ordered full {:.4} >= single {:.4}/{:.4} >= double {:.4}",
        full, no_bridge, no_decoder, neither
    );
}

// ─────────────────────────────────────────────────────────────────────
// 10. Determinism and checkpoint round-trip
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_10_determinism_and_roundtrip() {
    let _lock = TRAINING_LOCK.lock().unwrap();
    let dir = work_dir("determinism");
    let spec = SyntheticSpec {
        image_size: 64,
        num_classes: 2,
        class_areas: vec![[0.1, 0.3]],
        shapes: ShapeKind::Ellipse,
        overlap: OverlapPolicy::Disjoint,
        noise: 0.05,
        seed: 10,
    };
    let ds = dir.join("ds");
    let mut manifest = data::generate(&spec, 6, &ds).unwrap();
    manifest.splits = data::split_stems(manifest.all_stems(), (0.67, 0.33, 0.0), 1);
    data::write_manifest(&ds, &manifest).unwrap();
    let config = |out: &str| RunConfig {
        manifest: ds.join("manifest.json"),
        fingerprint: "auto".into(),
        guidance: Guidance::SelfAdaptive,
        use_bridge: true,
        use_msadecoder: true,
        encoder: tiny_encoder(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        epochs: 3,
        batch_size: 2,
        seed: 99,
        loss_weights: LossWeights::default(),
        out_dir: dir.join(out),
    };
    let a = train::train(&config("a")).unwrap();
    let b = train::train(&config("b")).unwrap();
    assert_eq!(
        log_to_csv(&a.records),
        log_to_csv(&b.records),
        "training logs differ between identical runs"
    );
    // checkpoint round-trip: bit-identical probe forward
    let loaded = Checkpoint::load(&a.checkpoint_path).unwrap();
    let mut rng = Rng::new(0xACCA);
    let probe = rand_tensor(&mut rng, &[3, 64, 64], 0.5);
    let before = a.checkpoint.model.predict(&probe);
    let after = loaded.model.predict(&probe);
    assert_eq!(before.probabilities, after.probabilities);
    assert_eq!(before.labels, after.labels);
    let _ = std::fs::remove_dir_all(&dir);
    println!("ACCEPTANCE 10 PASS: identical config+seed reproduces the training CSV; checkpoint reload gives a bit-identical probe forward");
}

// ─────────────────────────────────────────────────────────────────────
// 11. Guidance-mode gradient contract
// ─────────────────────────────────────────────────────────────────────

#[test]
fn acceptance_11_guidance_gradient_contract() {
    let _lock = TRAINING_LOCK.lock().unwrap();
    let dir = work_dir("guidance");
    let spec = SyntheticSpec {
        image_size: 64,
        num_classes: 2,
        class_areas: vec![[0.1, 0.3]],
        shapes: ShapeKind::Ellipse,
        overlap: OverlapPolicy::Disjoint,
        noise: 0.05,
        seed: 21,
    };
    let ds = dir.join("ds");
    data::generate(&spec, 4, &ds).unwrap();
    let mut results = Vec::new();
    for guidance in [
        Guidance::Q1,
        Guidance::Q2,
        Guidance::Q3,
        Guidance::None,
        Guidance::SelfAdaptive,
    ] {
        let config = RunConfig {
            manifest: ds.join("manifest.json"),
            fingerprint: "auto".into(),
            guidance,
            use_bridge: true,
            use_msadecoder: true,
            encoder: tiny_encoder(),
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            epochs: 1,
            batch_size: 2,
            seed: 31,
            loss_weights: LossWeights::default(),
            out_dir: dir.join(format!("run_{}", guidance)),
        };
        let outcome = train::train(&config).unwrap();
        // logits start at zero, so the post-epoch norm is the update norm
        let update_norm: f64 = outcome
            .checkpoint
            .model
            .selection_logit_params()
            .iter()
            .map(|p| p.value.norm())
            .sum();
        results.push((guidance, update_norm));
        if guidance.is_fixed() {
            assert_eq!(
                update_norm, 0.0,
                "{}: selection logits must stay untouched",
                guidance
            );
        } else {
            assert!(
                update_norm > 0.0,
                "{}: selection logits must receive updates",
                guidance
            );
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    println!(
        "ACCEPTANCE 11 PASS: logit update norms {:?} (fixed modes zero, self-adaptive nonzero)",
        results
            .iter()
            .map(|(g, n)| format!("{}={:.3e}", g, n))
            .collect::<Vec<_>>()
            .join(" ")
    );
}
