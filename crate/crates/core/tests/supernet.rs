mod common;

use common::oracles::{end_to_end_fd_errors, outputs, random_batch, saturation_worst_diff, tiny_config};
use common::{max_abs_diff, rng};
use mvnas::genotype::Genotype;
use mvnas::nn::{Ctx, Mode, ParamStore};
use mvnas::search_space::{AlphaVars, ArchParams, OpKind};
use mvnas::supernet::{compute_losses, descriptor_hinge, Network, SupernetConfig, ViewBatch};
use mvnas::tensor::{Tape, Tensor};

#[test]
fn default_shapes() {
    let cfg = SupernetConfig::default();
    assert_eq!(cfg.cell_shapes().len(), 7);
    assert_eq!(cfg.descriptor_dim(), 128);
    let mut store = ParamStore::new();
    let net = Network::supernet(&cfg, &mut store, &mut rng(0)).unwrap();
    let arch = ArchParams::random(&mut rng(1), 1e-3);
    let batch = random_batch(&cfg, 2, 2);
    let (f, logits, d) = outputs(&net, &mut store, &batch, Some(&arch), Mode::Train);
    assert_eq!(f.shape(), &[2, 128, 4]);
    assert_eq!(logits.shape(), &[2, 8]);
    assert_eq!(d.shape(), &[2, 128]);
    for row in d.data().chunks(128) {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }
}

#[test]
fn supernet_requires_architecture_parameters() {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let net = Network::supernet(&cfg, &mut store, &mut rng(0)).unwrap();
    let batch = random_batch(&cfg, 1, 0);
    let mut ctx = Ctx::new(&mut store, Mode::Train, false);
    assert!(net.forward(&mut ctx, &batch, None).is_err());
}

#[test]
fn identical_views_give_identical_features() {
    let cfg = SupernetConfig::default();
    let mut store = ParamStore::new();
    let net = Network::supernet(&cfg, &mut store, &mut rng(3)).unwrap();
    let arch = ArchParams::random(&mut rng(4), 1.0);
    let one = random_batch(
        &SupernetConfig {
            n_views: 1,
            ..cfg.clone()
        },
        1,
        5,
    );
    let view = one.images.data().to_vec();
    let images = Tensor::new(vec![1, 4, 1, 16, 16], view.repeat(4)).unwrap();
    let batch = ViewBatch::new(images, vec![0]).unwrap();
    let (f, _, _) = outputs(&net, &mut store, &batch, Some(&arch), Mode::Eval);
    for c in f.data().chunks(4) {
        assert!(c.iter().all(|&v| v == c[0]));
    }
}

#[test]
fn backbone_weights_are_shared_across_views() {
    let cfg = SupernetConfig::default();
    let mut store = ParamStore::new();
    let net = Network::supernet(&cfg, &mut store, &mut rng(6)).unwrap();
    let arch = ArchParams::random(&mut rng(7), 1.0);
    let batch = random_batch(&cfg, 2, 8);
    let (f0, _, _) = outputs(&net, &mut store, &batch, Some(&arch), Mode::Eval);
    let mut perturbed = batch.clone();
    // View 2 of sample 1.
    let plane = 16 * 16;
    let start = (4 + 2) * plane;
    for v in &mut perturbed.images.data_mut()[start..start + plane] {
        *v = 1.0 - *v;
    }
    let (f1, _, _) = outputs(&net, &mut store, &perturbed, Some(&arch), Mode::Eval);
    let (a, b) = (f0.data(), f1.data());
    for s in 0..2 {
        for c in 0..128 {
            for v in 0..4 {
                let i = (s * 128 + c) * 4 + v;
                if s == 1 && v == 2 {
                    continue;
                }
                assert_eq!(a[i].to_bits(), b[i].to_bits(), "sample {s} channel {c} view {v}");
            }
        }
    }
    let changed = (0..128).any(|c| a[(128 + c) * 4 + 2] != b[(128 + c) * 4 + 2]);
    assert!(changed);
}

#[test]
fn view_order_is_irrelevant_with_pointwise_fusion() {
    let cfg = SupernetConfig::default();
    let mut g = Genotype::random(&mut rng(9), &cfg);
    for node in &mut g.fusion {
        for edge in node.iter_mut() {
            edge.1 = OpKind::SkipConnect;
        }
    }
    let mut store = ParamStore::new();
    let net = Network::discrete(&cfg, &g, &mut store, &mut rng(10)).unwrap();
    let batch = random_batch(&cfg, 2, 11);
    let perm = [2, 0, 3, 1];
    let plane = 16 * 16;
    let mut shuffled = batch.clone();
    for s in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            let from = (s * 4 + src) * plane;
            let to = (s * 4 + dst) * plane;
            shuffled.images.data_mut()[to..to + plane].copy_from_slice(&batch.images.data()[from..from + plane]);
        }
    }
    let (_, a, _) = outputs(&net, &mut store, &batch, None, Mode::Eval);
    let (_, b, _) = outputs(&net, &mut store, &shuffled, None, Mode::Eval);
    assert!(max_abs_diff(a.data(), b.data()) < 1e-12);
}

#[test]
fn hinge_examples() {
    let mut tape = Tape::new();
    let s = (1.0f64 - 0.09).sqrt();
    let d = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.3, s]).unwrap(), false);
    let h = descriptor_hinge(&mut tape, d, &[0, 1]).unwrap();
    assert!((tape.item(h) - 0.6).abs() < 1e-12);
    let same = descriptor_hinge(&mut tape, d, &[1, 1]).unwrap();
    assert_eq!(tape.item(same), 0.0);
    let s = (1.0f64 - 0.25).sqrt();
    let opposed = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, -0.5, s]).unwrap(), false);
    let h = descriptor_hinge(&mut tape, opposed, &[0, 1]).unwrap();
    assert_eq!(tape.item(h), 0.0);
}

#[test]
fn losses_are_non_negative_and_bounded() {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let net = Network::supernet(&cfg, &mut store, &mut rng(12)).unwrap();
    let arch = ArchParams::random(&mut rng(13), 1.0);
    let batch = random_batch(&cfg, 6, 14);
    let mut ctx = Ctx::new(&mut store, Mode::Train, false);
    let alphas = AlphaVars::bind(&mut ctx, &arch, false);
    let out = net.forward(&mut ctx, &batch, Some(&alphas)).unwrap();
    let losses = compute_losses(&mut ctx, &out, &batch.labels).unwrap();
    let [l1, l2, l3] = losses.as_array().map(|v| ctx.tape.item(v));
    assert!(l1 >= 0.0 && l2 >= 0.0 && l3 >= 0.0);
    assert!(l3 <= 30.0);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (w_err, a_err) = end_to_end_fd_errors();
    println!("end-to-end weights rel err {w_err:.3e}, alpha rel err {a_err:.3e}");
    assert!(w_err < 1e-4, "weights: {w_err}");
    assert!(a_err < 1e-4, "alpha: {a_err}");
}

#[test]
fn saturated_supernet_matches_derived_network() {
    let worst = saturation_worst_diff();
    println!("saturation max abs diff {worst:.3e}");
    assert!(worst < 1e-6, "{worst}");
}
