//! Independent reference implementations shared by the module tests and the
//! acceptance suite.

use mvnas::genotype::{Genotype, NodeInputs};
use mvnas::loss_balance::total_loss;
use mvnas::nn::{Ctx, Mode, ParamStore};
use mvnas::search_space::{edge_index, AlphaVars, ArchParams, CellType, OpKind, NUM_OPS};
use mvnas::supernet::{compute_losses, Network, SupernetConfig, ViewBatch};
use mvnas::tensor::{Conv2dParams, OpSummary, Pool2dParams, PoolKind, Tensor};
use rand::Rng;

use super::{fd_check, max_abs_diff, random_tensor, rel_error, rng};

/// Independent selector: a pair of sources is kept when every other source
/// is weaker than both under (strength desc, source asc).
pub fn brute_force_cell(alpha: &[f64]) -> Vec<NodeInputs> {
    let best_op = |e: usize| -> (usize, f64) {
        let row = &alpha[e * NUM_OPS..(e + 1) * NUM_OPS];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (o, v) in row.iter().enumerate() {
            let p = v.exp() / z;
            if OpKind::ALL[o] != OpKind::Zero && p > best.1 {
                best = (o, p);
            }
        }
        best
    };
    let mut cell = Vec::new();
    for dst in 2..6 {
        let strength: Vec<(usize, f64)> = (0..dst).map(|s| best_op(edge_index(s, dst))).collect();
        let beats = |a: usize, b: usize| strength[a].1 > strength[b].1 || (strength[a].1 == strength[b].1 && a < b);
        let mut chosen = None;
        for a in 0..dst {
            for b in a + 1..dst {
                if (0..dst)
                    .filter(|&c| c != a && c != b)
                    .all(|c| beats(a, c) && beats(b, c))
                {
                    chosen = Some([(a, OpKind::ALL[strength[a].0]), (b, OpKind::ALL[strength[b].0])]);
                }
            }
        }
        cell.push(chosen.expect("a strongest pair exists"));
    }
    cell
}

/// Parameters and MACs from an explicit walk over the recorded forward pass
/// of a single sample, counting one multiply-add per loop iteration.
pub fn brute_force_cost(genotype: &Genotype, cfg: &SupernetConfig) -> (u64, u64) {
    let mut store = ParamStore::new();
    let net = Network::discrete(cfg, genotype, &mut store, &mut rng(0)).unwrap();
    let res = cfg.input_resolution;
    let images = Tensor::full(&[1, cfg.n_views, cfg.input_channels, res, res], 0.5);
    let batch = ViewBatch::new(images, vec![0]).unwrap();
    let mut ctx = Ctx::new(&mut store, Mode::Eval, true);
    net.forward(&mut ctx, &batch, None).unwrap();
    let (mut params, mut macs) = (0u64, 0u64);
    for s in ctx.tape.summaries() {
        match s {
            OpSummary::Leaf {
                shape,
                requires_grad: true,
            } => params += shape.iter().product::<usize>() as u64,
            OpSummary::Conv2d { weight, output, .. } => {
                let (n, cout, oh, ow) = (output[0], output[1], output[2], output[3]);
                let cin_g = weight[1];
                for _ in 0..n * cout * oh * ow {
                    for _ in 0..cin_g * weight[2] * weight[3] {
                        macs += 1;
                    }
                }
            }
            OpSummary::Linear { input, weight, .. } => {
                for _ in 0..input[0] {
                    for _ in 0..weight[0] {
                        for _ in 0..weight[1] {
                            macs += 1;
                        }
                    }
                }
            }
            _ => {}
        }
    }
    (params, macs)
}

/// Textbook AP and PR-curve area from explicit pairwise rank counting.
pub fn brute_force_metrics(d: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let n = d.len();
    let sim = |a: usize, b: usize| -> f64 { d[a].iter().zip(&d[b]).map(|(x, y)| x * y).sum() };
    let (mut ap_total, mut auc_total, mut used) = (0.0, 0.0, 0);
    for q in 0..n {
        let gallery: Vec<usize> = (0..n).filter(|&g| g != q).collect();
        let rel = |g: usize| labels[g] == labels[q];
        let n_rel = gallery.iter().filter(|&&g| rel(g)).count();
        if n_rel == 0 {
            continue;
        }
        // h precedes g when more similar, or equally similar and irrelevant while
        // g is relevant; fully tied items are interchangeable and take index order.
        let precedes = |h: usize, g: usize| {
            let (sh, sg) = (sim(q, h), sim(q, g));
            sh > sg || (sh == sg && ((!rel(h) && rel(g)) || (rel(h) == rel(g) && h < g)))
        };
        let rank = |g: usize| 1 + gallery.iter().filter(|&&h| h != g && precedes(h, g)).count();
        let mut ranks: Vec<(usize, bool)> = gallery.iter().map(|&g| (rank(g), rel(g))).collect();
        ranks.sort();
        let mut ap = 0.0;
        let mut curve = vec![(0.0, 1.0)];
        for (i, &(r, is_rel)) in ranks.iter().enumerate() {
            let hits = ranks[..=i].iter().filter(|x| x.1).count();
            if is_rel {
                ap += hits as f64 / r as f64;
            }
            curve.push((hits as f64 / n_rel as f64, hits as f64 / r as f64));
        }
        let auc: f64 = curve
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum();
        ap_total += ap / n_rel as f64;
        auc_total += auc;
        used += 1;
    }
    (ap_total / used as f64, auc_total / used as f64)
}

pub fn random_descriptors(seed: u64, n: usize, dim: usize, quantized: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
    let d = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim)
                .map(|_| {
                    let x: f64 = r.gen_range(-1.0..1.0);
                    if quantized {
                        x.round()
                    } else {
                        x
                    }
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    (d, labels)
}

pub fn tiny_config() -> SupernetConfig {
    SupernetConfig {
        n_views: 2,
        init_channels: 4,
        num_classes: 3,
        input_resolution: 8,
        ..SupernetConfig::default()
    }
}

pub fn random_batch(cfg: &SupernetConfig, b: usize, seed: u64) -> ViewBatch {
    let mut r = rng(seed);
    let res = cfg.input_resolution;
    let n = b * cfg.n_views * cfg.input_channels * res * res;
    let data = (0..n).map(|_| r.gen::<f64>()).collect();
    let images = Tensor::new(vec![b, cfg.n_views, cfg.input_channels, res, res], data).unwrap();
    let labels = (0..b).map(|i| i % cfg.num_classes).collect();
    ViewBatch::new(images, labels).unwrap()
}

/// Forward in the given mode; returns (view features, shape logits, descriptor).
pub fn outputs(
    net: &Network,
    store: &mut ParamStore,
    batch: &ViewBatch,
    arch: Option<&ArchParams>,
    mode: Mode,
) -> (Tensor, Tensor, Tensor) {
    let mut ctx = Ctx::new(store, mode, false);
    let alphas = arch.map(|a| AlphaVars::bind(&mut ctx, a, false));
    let out = net.forward(&mut ctx, batch, alphas.as_ref()).unwrap();
    (
        ctx.tape.value(out.view_features).clone(),
        ctx.tape.value(out.shape_logits).clone(),
        ctx.tape.value(out.descriptor).clone(),
    )
}

/// L_total of a fixed batch as a function of the stored weights and α.
pub fn total_value(net: &Network, store: &mut ParamStore, arch: &ArchParams, batch: &ViewBatch) -> f64 {
    let mut ctx = Ctx::new(store, Mode::Train, false);
    let alphas = AlphaVars::bind(&mut ctx, arch, false);
    let out = net.forward(&mut ctx, batch, Some(&alphas)).unwrap();
    let losses = compute_losses(&mut ctx, &out, &batch.labels).unwrap();
    let t = total_loss(&mut ctx.tape, losses.as_array(), &arch.lambda).unwrap();
    ctx.tape.item(t)
}

/// Relative errors of the tape gradient of L_total with respect to 30 random
/// weights and 30 random α entries of the tiny supernet, against central differences.
pub fn end_to_end_fd_errors() -> (f64, f64) {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let net = Network::supernet(&cfg, &mut store, &mut rng(20)).unwrap();
    let mut arch = ArchParams::random(&mut rng(21), 0.5);
    arch.lambda = mvnas::loss_balance::LambdaParams::new([0.2, -0.1, 0.4]);
    let batch = random_batch(&cfg, 4, 22);

    let (w_grads, a_grads) = {
        let mut ctx = Ctx::new(&mut store, Mode::Train, true);
        let alphas = AlphaVars::bind(&mut ctx, &arch, true);
        let out = net.forward(&mut ctx, &batch, Some(&alphas)).unwrap();
        let losses = compute_losses(&mut ctx, &out, &batch.labels).unwrap();
        let t = total_loss(&mut ctx.tape, losses.as_array(), &arch.lambda).unwrap();
        ctx.tape.backward(t).unwrap();
        let a = CellType::ALL.map(|ty| ctx.tape.grad(alphas.get(ty)).unwrap().clone());
        (ctx.weight_grads(), a)
    };

    let h = 1e-6;
    let mut r = rng(23);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let n_params = store.len();
    for _ in 0..30 {
        let p = r.gen_range(0..n_params);
        let len = store.values()[p].numel();
        let j = r.gen_range(0..len);
        let orig = store.values()[p].data()[j];
        store.values_mut()[p].data_mut()[j] = orig + h;
        let fp = total_value(&net, &mut store, &arch, &batch);
        store.values_mut()[p].data_mut()[j] = orig - h;
        let fm = total_value(&net, &mut store, &arch, &batch);
        store.values_mut()[p].data_mut()[j] = orig;
        numeric.push((fp - fm) / (2.0 * h));
        analytic.push(w_grads.as_slice()[p].as_ref().map_or(0.0, |g| g.data()[j]));
    }
    let w_err = rel_error(&analytic, &numeric);

    let (mut analytic_a, mut numeric_a) = (Vec::new(), Vec::new());
    for _ in 0..30 {
        let which = r.gen_range(0..3);
        let j = r.gen_range(0..14 * 8);
        let ty = CellType::ALL[which];
        let mut plus = arch.clone();
        plus.alpha_mut(ty).data_mut()[j] += h;
        let mut minus = arch.clone();
        minus.alpha_mut(ty).data_mut()[j] -= h;
        let fd =
            (total_value(&net, &mut store, &plus, &batch) - total_value(&net, &mut store, &minus, &batch)) / (2.0 * h);
        numeric_a.push(fd);
        analytic_a.push(a_grads[which].data()[j]);
    }
    let a_err = rel_error(&analytic_a, &numeric_a);
    (w_err, a_err)
}

/// Worst output difference between the supernet with saturated logits and the
/// discrete network over 20 random genotypes.
pub fn saturation_worst_diff() -> f64 {
    let cfg = SupernetConfig::default();
    let mut store = ParamStore::new();
    let supernet = Network::supernet(&cfg, &mut store, &mut rng(30)).unwrap();
    let batch = random_batch(&cfg, 2, 31);
    // Populate running statistics so eval mode is not the identity.
    outputs(&supernet, &mut store, &batch, Some(&ArchParams::uniform()), Mode::Train);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let g = Genotype::random(&mut rng(100 + seed), &cfg);
        let derived = supernet.derive(&g).unwrap();
        let sat = g.saturated_alphas(40.0);
        let (fa, la, da) = outputs(&supernet, &mut store, &batch, Some(&sat), Mode::Eval);
        let (fb, lb, db) = outputs(&derived, &mut store, &batch, None, Mode::Eval);
        for (a, b) in [(&fa, &fb), (&la, &lb), (&da, &db)] {
            worst = worst.max(max_abs_diff(a.data(), b.data()));
        }
    }
    worst
}

pub fn conv(stride: usize, pad: (usize, usize), dil: (usize, usize), groups: usize) -> Conv2dParams {
    Conv2dParams::default()
        .stride(stride)
        .padding(pad.0, pad.1)
        .dilation(dil.0, dil.1)
        .groups(groups)
}

pub fn pool(k: usize, s: usize, p: usize) -> Pool2dParams {
    Pool2dParams {
        kernel: (k, k),
        stride: (s, s),
        padding: (p, p),
    }
}

/// Worst relative finite-difference error of every tape primitive, by name.
pub fn primitive_fd_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    fd_elementwise_and_reductions(&mut out);
    fd_layout_ops(&mut out);
    fd_weighted_sum(&mut out);
    fd_conv2d(&mut out);
    fd_pooling(&mut out);
    fd_standardize(&mut out);
    fd_dense_and_probabilistic(&mut out);
    fd_composite_graph(&mut out);
    out
}

fn fd_elementwise_and_reductions(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(10);
    let a = random_tensor(&mut r, &[2, 3, 2]);
    let b = random_tensor(&mut r, &[2, 3, 2]);
    let c = random_tensor(&mut r, &[2, 3, 2]);
    let ab = [a.clone(), b.clone()];
    check(
        "add_n",
        fd_check(&[a.clone(), b.clone(), c.clone()], 1, |t, v| t.add_n(v).unwrap()),
    );
    check("sub", fd_check(&ab, 2, |t, v| t.sub(v[0], v[1]).unwrap()));
    check("mul", fd_check(&ab, 3, |t, v| t.mul(v[0], v[1]).unwrap()));
    check("scale", fd_check(std::slice::from_ref(&a), 4, |t, v| t.scale(v[0], -1.7).unwrap()));
    let k = c.clone();
    check(
        "mul_const",
        fd_check(std::slice::from_ref(&a), 5, move |t, v| t.mul_const(v[0], &k).unwrap()),
    );
    check("relu", fd_check(std::slice::from_ref(&a), 6, |t, v| t.relu(v[0]).unwrap()));
    check("sum", fd_check(std::slice::from_ref(&a), 7, |t, v| t.sum(v[0]).unwrap()));
    check("mean", fd_check(std::slice::from_ref(&a), 8, |t, v| t.mean(v[0]).unwrap()));
}

fn fd_layout_ops(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(11);
    let a = random_tensor(&mut r, &[2, 3, 4]);
    let b = random_tensor(&mut r, &[2, 1, 4]);
    check(
        "reshape",
        fd_check(std::slice::from_ref(&a), 1, |t, v| t.reshape(v[0], &[6, 4]).unwrap()),
    );
    check(
        "permute",
        fd_check(std::slice::from_ref(&a), 2, |t, v| t.permute(v[0], &[2, 0, 1]).unwrap()),
    );
    check("concat", fd_check(&[a.clone(), b], 3, |t, v| t.concat(v, 1).unwrap()));
    let m = random_tensor(&mut r, &[4, 5]);
    check("select_row", fd_check(&[m], 4, |t, v| t.select_row(v[0], 2).unwrap()));
    let img = random_tensor(&mut r, &[2, 2, 5, 4]);
    check("crop", fd_check(std::slice::from_ref(&img), 5, |t, v| t.crop(v[0], 1, 1).unwrap()));
    check(
        "global_avg_pool",
        fd_check(&[img], 6, |t, v| t.global_avg_pool(v[0]).unwrap()),
    );
}

fn fd_weighted_sum(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(12);
    let inputs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[2, 2, 3])).collect();
    let mut all = vec![random_tensor(&mut r, &[3])];
    all.extend(inputs);
    check(
        "weighted_sum",
        fd_check(&all, 1, |t, v| t.weighted_sum(v[0], &v[1..]).unwrap()),
    );
}

fn fd_conv2d(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(13);
    let cases = [
        ([2, 4, 6, 6], [3, 4, 3, 3], 1, (2, 2), (2, 2), 1),
        ([2, 4, 6, 6], [4, 1, 5, 5], 2, (2, 2), (1, 1), 4),
        ([2, 4, 5, 5], [6, 2, 3, 3], 2, (1, 1), (1, 1), 2),
        ([2, 3, 4, 4], [5, 3, 1, 1], 1, (0, 0), (1, 1), 1),
        ([2, 4, 4, 1], [4, 1, 3, 1], 1, (2, 0), (2, 1), 4),
    ];
    for (i, (xs, ws, s, p, d, g)) in cases.into_iter().enumerate() {
        let x = random_tensor(&mut r, &xs);
        let w = random_tensor(&mut r, &ws);
        let params = conv(s, p, d, g);
        check(
            &format!("conv2d case {i}"),
            fd_check(&[x, w], i as u64, move |t, v| t.conv2d(v[0], v[1], params).unwrap()),
        );
    }
}

fn fd_pooling(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let x = random_tensor(&mut rng(14), &[2, 2, 5, 5]);
    for (kind, k, s, p) in [
        (PoolKind::Max, 3, 1, 1),
        (PoolKind::Max, 3, 2, 1),
        (PoolKind::Avg, 3, 1, 1),
        (PoolKind::Avg, 3, 2, 1),
    ] {
        check(
            &format!("pool2d {kind:?} k{k} s{s}"),
            fd_check(std::slice::from_ref(&x), 1, move |t, v| {
                t.pool2d(kind, v[0], pool(k, s, p)).unwrap()
            }),
        );
    }
}

fn fd_standardize(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let x = random_tensor(&mut rng(15), &[3, 2, 3, 3]);
    check(
        "batch_standardize",
        fd_check(std::slice::from_ref(&x), 1, |t, v| t.batch_standardize(v[0]).unwrap()),
    );
    check(
        "standardize_fixed",
        fd_check(&[x], 2, |t, v| {
            t.standardize_fixed(v[0], &[0.1, -0.2], &[0.5, 2.0]).unwrap()
        }),
    );
}

fn fd_dense_and_probabilistic(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(16);
    let x = random_tensor(&mut r, &[3, 4]);
    let w = random_tensor(&mut r, &[5, 4]);
    let b = random_tensor(&mut r, &[5]);
    check(
        "linear",
        fd_check(&[x.clone(), w.clone(), b], 1, |t, v| {
            t.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
    );
    check(
        "matmul_nt",
        fd_check(&[x.clone(), w], 2, |t, v| t.matmul_nt(v[0], v[1]).unwrap()),
    );
    check(
        "matmul_nt self",
        fd_check(std::slice::from_ref(&x), 3, |t, v| t.matmul_nt(v[0], v[0]).unwrap()),
    );
    check(
        "l2_normalize_rows",
        fd_check(std::slice::from_ref(&x), 4, |t, v| t.l2_normalize_rows(v[0]).unwrap()),
    );
    let s3 = random_tensor(&mut r, &[2, 3, 4]);
    check(
        "softmax axis 1",
        fd_check(std::slice::from_ref(&s3), 5, |t, v| t.softmax(v[0], 1).unwrap()),
    );
    check("softmax axis 2", fd_check(&[s3], 6, |t, v| t.softmax(v[0], 2).unwrap()));
    check(
        "cross_entropy",
        fd_check(&[x], 7, |t, v| t.cross_entropy(v[0], &[1, 3, 0]).unwrap()),
    );
}

fn fd_composite_graph(out: &mut Vec<(String, f64)>) {
    let mut check = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(17);
    let x = random_tensor(&mut r, &[2, 2, 6, 6]);
    let w1 = random_tensor(&mut r, &[2, 1, 3, 3]);
    let w2 = random_tensor(&mut r, &[3, 2, 1, 1]);
    let err = fd_check(&[x, w1, w2], 9, |t, v| {
        let a = t.relu(v[0]).unwrap();
        let b = t.conv2d(a, v[1], conv(1, (2, 2), (2, 2), 2)).unwrap();
        let c = t.conv2d(b, v[2], Conv2dParams::default()).unwrap();
        let d = t.batch_standardize(c).unwrap();
        let e = t.pool2d(PoolKind::Avg, d, pool(3, 2, 1)).unwrap();
        let f = t.global_avg_pool(e).unwrap();
        let g = t.l2_normalize_rows(f).unwrap();
        t.matmul_nt(g, g).unwrap()
    });
    check("composite", err);
}
