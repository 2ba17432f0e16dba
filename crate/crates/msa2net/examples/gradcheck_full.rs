//! Finite-difference check of the full model loss gradient on sampled
//! parameters. Diagnostic utility; run with `cargo run --example gradcheck_full`.

use msa2net::adaptive_conv::Phase;
use msa2net::encoder::EncoderConfig;
use msa2net::model::{Guidance, ModelConfig, Msa2Net};
use msa2net::fingerprint::KernelCandidateMatrix;
use msa2net::rng::Rng;
use msa2net::tape::Tape;
use msa2net::tensor::Tensor;

fn main() {
    let config = ModelConfig {
        encoder: EncoderConfig {
            input_size: (64, 64), patch_stride: 4,
            stage_dims: [4, 8, 16, 32], blocks_per_stage: [1, 1, 1, 1],
            heads_per_stage: [2, 2, 2, 2], stripe_widths: [1, 2, 2, 4],
        },
        num_classes: 2,
        guidance: Guidance::SelfAdaptive,
        use_bridge: true,
        use_msadecoder: true,
        candidate_matrix: KernelCandidateMatrix::from_shift([1.05, 1.1, 1.3, 1.5]),
        seed: 3,
    };
    let mut model = Msa2Net::new(config);
    let mut rng = Rng::new(5);
    let mut v = vec![0.0; 3 * 64 * 64];
    rng.fill_uniform(&mut v, 0.5);
    let img = Tensor::from_vec(&[3, 64, 64], v);
    let labels: Vec<u8> = (0..64 * 64).map(|_| (rng.next_f64() < 0.3) as u8).collect();

    let loss_fn = |m: &Msa2Net| -> f64 {
        let mut t = Tape::new();
        let x = t.constant(img.clone());
        let logits = m.forward(&mut t, x, Phase::Soft);
        let ce = t.cross_entropy(logits, &labels);
        let probs = t.softmax_channels(logits);
        let dl = t.dice_loss(probs, &labels, 1e-5);
        let ce_w = t.scale(ce, 0.5);
        let dl_w = t.scale(dl, 0.5);
        let loss = t.add(ce_w, dl_w);
        t.value(loss).item()
    };

    // analytic grads
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    let logits = model.forward(&mut t, x, Phase::Soft);
    let ce = t.cross_entropy(logits, &labels);
    let probs = t.softmax_channels(logits);
    let dl = t.dice_loss(probs, &labels, 1e-5);
    let ce_w = t.scale(ce, 0.5);
    let dl_w = t.scale(dl, 0.5);
    let loss = t.add(ce_w, dl_w);
    let grads = t.backward(loss);
    let gmap: std::collections::BTreeMap<u64, Tensor> = t.param_grads(&grads).into_iter().collect();

    // sample parameters, perturb, compare
    let mut ids = Vec::new();
    model.visit_params(&mut |p| ids.push((p.id, p.len())));
    let mut worst: f64 = 0.0;
    let mut n_checked = 0;
    let mut check_rng = Rng::new(77);
    for (pi, &(id, len)) in ids.iter().enumerate() {
        if pi % 7 != 0 { continue; } // sample every 7th param tensor
        let ei = check_rng.below(len);
        let analytic = gmap.get(&id).map(|g| g.data()[ei]).unwrap_or(0.0);
        let h = 1e-5;
        let probe = |delta: f64| {
            let mut m2 = model.clone();
            m2.visit_params(&mut |p| {
                if p.id == id { p.value.data_mut()[ei] += delta; }
            });
            loss_fn(&m2)
        };
        let fd = (probe(h) - probe(-h)) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-6);
        let rel = (fd - analytic).abs() / denom;
        if rel > worst { worst = rel; println!("param#{} id{} elem{} fd={:e} an={:e} rel={:e}", pi, id, ei, fd, analytic, rel); }
        n_checked += 1;
    }
    println!("checked {} params, worst rel err {:e}", n_checked, worst);
}
