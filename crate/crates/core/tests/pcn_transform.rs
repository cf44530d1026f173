mod common;

use std::collections::BTreeMap;

use common::{naive_matmul, rng, uniform_vec};
use pcn::nn::*;
use pcn::pca::{fit_pca, truncate, PcaBasis, Truncation};
use pcn::transform::*;
use pcn::{Error, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(r, n, -scale, scale)).unwrap()
}

/// Correlated samples with a non-zero mean.
fn correlated(r: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<f64> {
    let mix = uniform_vec(r, m * m, -1.0, 1.0);
    let raw = uniform_vec(r, n * m, -1.0, 1.0);
    let mut out = naive_matmul(&raw, &mix, n, m, m);
    for (i, v) in out.iter_mut().enumerate() {
        *v += 0.5 + (i % m) as f64 * 0.2;
    }
    Tensor::new(vec![n, m], out).unwrap()
}

fn node(name: &str, layer: Layer<f64>, inputs: &[Port]) -> Node<f64> {
    Node {
        name: name.into(),
        layer,
        inputs: inputs.to_vec(),
    }
}

fn dense(r: &mut ChaCha8Rng, m: usize, n: usize, act: Activation) -> Layer<f64> {
    Layer::Dense(Dense {
        weight: rand_tensor(r, &[m, n], 0.6),
        bias: rand_tensor(r, &[n], 0.3),
        activation: act,
    })
}

fn conv(r: &mut ChaCha8Rng, k: usize, m: usize, n: usize, stride: usize, act: Activation) -> Layer<f64> {
    Layer::Conv2D(Conv2D {
        kernel: rand_tensor(r, &[k, k, m, n], 0.5),
        bias: Some(rand_tensor(r, &[n], 0.3)),
        stride,
        padding: PaddingMode::Same,
        activation: act,
    })
}

fn mlp(seed: u64, widths: &[usize]) -> Network<f64> {
    let mut r = rng(seed);
    let mut nodes = Vec::new();
    let mut port = Port::Input;
    for (i, w) in widths.windows(2).enumerate() {
        let last = i + 2 == widths.len();
        let act = if last { Activation::Softmax } else { Activation::Relu };
        let name = if last { "output".to_string() } else { format!("fc{}", i + 1) };
        nodes.push(node(&name, dense(&mut r, w[0], w[1], act), &[port]));
        port = Port::Node(i);
    }
    Network::new(vec![widths[0]], nodes, vec![]).unwrap()
}

/// conv(4→5) → bn → conv(5→6, stride 2) → flatten → dense.
fn small_cnn(seed: u64) -> Network<f64> {
    let mut r = rng(seed);
    let mut bn = BatchNorm::new(5, 0.9, 1e-3);
    bn.gamma = rand_tensor(&mut r, &[5], 1.0).map(|v| v + 1.5);
    bn.beta = rand_tensor(&mut r, &[5], 0.5);
    bn.moving_mean = rand_tensor(&mut r, &[5], 0.5);
    bn.moving_var = rand_tensor(&mut r, &[5], 0.5).map(|v| v + 1.0);
    Network::new(
        vec![8, 8, 4],
        vec![
            node("c1", conv(&mut r, 3, 4, 5, 1, Activation::Relu), &[Port::Input]),
            node("bn", Layer::BatchNorm(bn), &[Port::Node(0)]),
            node("c2", conv(&mut r, 3, 5, 6, 2, Activation::Relu), &[Port::Node(1)]),
            node("flat", Layer::Flatten, &[Port::Node(2)]),
            node("out", dense(&mut r, 96, 3, Activation::Softmax), &[Port::Node(3)]),
        ],
        vec![],
    )
    .unwrap()
}

fn images(r: &mut ChaCha8Rng, n: usize, shape: &[usize]) -> Tensor<f64> {
    let per: usize = shape.iter().product();
    let data = uniform_vec(r, n * per, -1.0, 1.0).into_iter().enumerate().map(|(i, v)| v + 0.3 * ((i % 3) as f64)).collect();
    let mut s = vec![n];
    s.extend_from_slice(shape);
    Tensor::new(s, data).unwrap()
}

fn full_plan(net: &Network<f64>) -> TransformPlan {
    let mut plan = TransformPlan::new(1, 1);
    let last = net.nodes().len() - 1;
    for (i, n) in net.nodes().iter().enumerate() {
        let (m, k) = match &n.layer {
            Layer::Dense(d) => (d.weight.shape()[0], d.weight.shape()[1]),
            Layer::Conv2D(c) => (c.kernel.shape()[2], c.kernel.shape()[3]),
            _ => continue,
        };
        let out = (i != last).then_some(OutputConfig::Keep(k));
        plan = plan.with(&n.name, Some(InputConfig::Dims(m)), out);
    }
    plan
}

fn fitted(seed: u64, n: usize, m: usize, me: usize) -> (Tensor<f64>, PcaBasis) {
    let x = correlated(&mut rng(seed), n, m);
    let b = truncate(&fit_pca(&x).unwrap(), Truncation::Fixed(me)).unwrap();
    (x, b)
}

#[test]
fn permutation_basis_example() {
    let w = Tensor::<f64>::eye(2);
    let b = Tensor::zeros(&[2]);
    let basis = truncate(
        &PcaBasis::from_parts(vec![1.0, 0.0], vec![1.0, 1.0], Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap(), 2).unwrap(),
        Truncation::Fixed(2),
    )
    .unwrap();
    let (wt, bt) = input_transform_dense(&w, &b, &basis).unwrap();
    assert_eq!(wt.data(), &[0.0, 1.0, 1.0, 0.0]);
    assert_eq!(bt.data(), &[1.0, 0.0]);
}

#[test]
fn dense_transform_matches_direct_evaluation() {
    let mut r = rng(1);
    let (_, basis) = fitted(2, 60, 12, 12);
    let w = rand_tensor(&mut r, &[12, 7], 1.0);
    let b = rand_tensor(&mut r, &[7], 1.0);
    let (wt, bt) = input_transform_dense(&w, &b, &basis).unwrap();
    let u = basis.u().unwrap();
    let probe = rand_tensor(&mut r, &[100, 12], 3.0);
    let orig = naive_matmul(probe.data(), w.data(), 100, 12, 7);
    let centred: Vec<f64> = probe.data().chunks(12).flat_map(|row| row.iter().zip(&basis.mean).map(|(x, m)| x - m).collect::<Vec<_>>()).collect();
    let z = naive_matmul(&centred, u.data(), 100, 12, 12);
    let trans = naive_matmul(&z, wt.data(), 100, 12, 7);
    for i in 0..100 {
        for l in 0..7 {
            let a = orig[i * 7 + l] + b.data()[l];
            let c = trans[i * 7 + l] + bt.data()[l];
            assert!((a - c).abs() <= 1e-10, "{a} vs {c}");
        }
    }
}

#[test]
fn one_by_one_conv_is_dense() {
    let mut r = rng(3);
    let (_, basis) = fitted(4, 50, 6, 4);
    let k = rand_tensor(&mut r, &[1, 1, 6, 5], 1.0);
    let b = rand_tensor(&mut r, &[5], 1.0);
    let (kt, bt, pad) = input_transform_conv(&k, Some(&b), &basis).unwrap();
    let (wt, bd) = input_transform_dense(&k.clone().reshape(&[6, 5]).unwrap(), &b, &basis).unwrap();
    assert_eq!(kt.data(), wt.data());
    assert_eq!(bt.data(), bd.data());
    let u = basis.u().unwrap();
    for j in 0..4 {
        let expect: f64 = -(0..6).map(|i| basis.mean[i] * u.at2(i, j)).sum::<f64>();
        assert!((pad.data()[j] - expect).abs() < 1e-14);
    }
}

#[test]
fn conv_same_padding_identity() {
    let mut r = rng(5);
    let x = images(&mut r, 6, &[8, 8, 4]);
    let basis = truncate(&fit_pca(&x.clone().reshape(&[6 * 64, 4]).unwrap()).unwrap(), Truncation::Fixed(4)).unwrap();
    assert!(basis.mean.iter().any(|m| m.abs() > 0.1));
    let k = rand_tensor(&mut r, &[3, 3, 4, 5], 1.0);
    let b = rand_tensor(&mut r, &[5], 1.0);
    let (kt, bt, pad) = input_transform_conv(&k, Some(&b), &basis).unwrap();
    let z = pcn::pca::project(&x, &basis).unwrap();
    let zeros = vec![0.0; 4];
    for img in 0..6 {
        let xi = &x.data()[img * 256..(img + 1) * 256];
        let zi = &z.data()[img * 256..(img + 1) * 256];
        let (a, _, _) = common::direct_conv(xi, (8, 8, 4), k.data(), (3, 3, 5), 1, Some(&zeros));
        let (c, _, _) = common::direct_conv(zi, (8, 8, 4), kt.data(), (3, 3, 5), 1, Some(pad.data()));
        for (p, (va, vc)) in a.iter().zip(&c).enumerate() {
            let l = p % 5;
            assert!((va + b.data()[l] - vc - bt.data()[l]).abs() <= 1e-10);
        }
    }
}

#[test]
fn prune_then_transform_commutes_bitwise() {
    let mut r = rng(6);
    for trial in 0..25 {
        let m = r.random_range(2..12);
        let n = r.random_range(1..10);
        let me = r.random_range(1..=m);
        let (_, basis) = fitted(100 + trial, 40, m, me);
        let w = rand_tensor(&mut r, &[m, n], 1.0);
        let b = rand_tensor(&mut r, &[n], 1.0);
        let count = r.random_range(1..=n);
        let mut keep = sample(&mut r, n, count).into_vec();
        keep.sort_unstable();
        let (wt, bt) = input_transform_dense(&w, &b, &basis).unwrap();
        let (wp, bp) = input_transform_dense(&w.select_last(&keep).unwrap(), &b.select_last(&keep).unwrap(), &basis).unwrap();
        assert_eq!(wt.select_last(&keep).unwrap(), wp);
        assert_eq!(bt.select_last(&keep).unwrap(), bp);

        let k = rand_tensor(&mut r, &[3, 3, m, n], 1.0);
        let (kt, kb, _) = input_transform_conv(&k, Some(&b), &basis).unwrap();
        let (kp, kbp, _) = input_transform_conv(&k.select_last(&keep).unwrap(), Some(&b.select_last(&keep).unwrap()), &basis).unwrap();
        assert_eq!(kt.select_last(&keep).unwrap(), kp);
        assert_eq!(kb.select_last(&keep).unwrap(), kbp);
    }
}

/// Mean squared pre-activation error (over N − 1) of the truncated layer on
/// its fitting batch, computed by direct evaluation.
fn truncation_error(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, basis: &PcaBasis) -> Vec<f64> {
    let (n, m) = x.dims2().unwrap();
    let k = w.shape()[1];
    let (wt, bt) = input_transform_dense(w, b, basis).unwrap();
    let u = basis.u().unwrap();
    let me = u.shape()[1];
    let orig = naive_matmul(x.data(), w.data(), n, m, k);
    let centred: Vec<f64> = x.data().chunks(m).flat_map(|row| row.iter().zip(&basis.mean).map(|(v, mu)| v - mu).collect::<Vec<_>>()).collect();
    let z = naive_matmul(&centred, u.data(), n, m, me);
    let trans = naive_matmul(&z, wt.data(), n, me, k);
    let mut err = vec![0.0; k];
    for i in 0..n {
        for l in 0..k {
            let d = orig[i * k + l] + b.data()[l] - trans[i * k + l] - bt.data()[l];
            err[l] += d * d;
        }
    }
    err.iter().map(|e| e / (n - 1) as f64).collect()
}

#[test]
fn reconstruction_error_identity_and_monotonicity() {
    let mut r = rng(7);
    let x = correlated(&mut r, 300, 9);
    let full = truncate(&fit_pca(&x).unwrap(), Truncation::Fixed(9)).unwrap();
    let w = rand_tensor(&mut r, &[9, 4], 1.0);
    let b = rand_tensor(&mut r, &[4], 1.0);
    let (wfull, _) = input_transform_dense(&w, &b, &full).unwrap();
    let mut prev = vec![f64::INFINITY; 4];
    for me in 1..=9 {
        let basis = truncate(&full, Truncation::Fixed(me)).unwrap();
        let err = truncation_error(&x, &w, &b, &basis);
        for l in 0..4 {
            let expect: f64 = (me..9).map(|j| full.variances[j] * wfull.at2(j, l).powi(2)).sum();
            let scale = expect.max(1e-12 * full.variances[0]);
            assert!((err[l] - expect).abs() <= 1e-6 * scale, "m_e {me} unit {l}: {} vs {expect}", err[l]);
            assert!(err[l] <= prev[l] + 1e-12);
        }
        prev = err;
    }
}

#[test]
fn selection_examples() {
    let u = Tensor::from_rows(&[[0.9, 0.1], [0.01, 0.02], [0.5, 0.5]]).unwrap();
    let s = select_outputs(&u, OutputConfig::Keep(2)).unwrap();
    assert_eq!(s.indices, vec![0, 2]);
    assert!((s.scores[1] - 0.03).abs() < 1e-15);
    assert_eq!(select_outputs(&u, OutputConfig::Keep(3)).unwrap().indices, vec![0, 1, 2]);
    assert_eq!(select_outputs(&u, OutputConfig::Threshold { threshold: 0.5 }).unwrap().indices, vec![0, 2]);
    assert_eq!(select_outputs(&u, OutputConfig::Threshold { threshold: 5.0 }).unwrap().indices, vec![0]);
    assert!(select_outputs(&u, OutputConfig::Keep(0)).is_err());
    assert!(select_outputs(&u, OutputConfig::Keep(4)).is_err());

    let a = Tensor::from_rows(&[[1.0], [0.0]]).unwrap();
    let b = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
    let s = resnet_select_outputs(&[a.clone(), b], OutputConfig::Keep(1)).unwrap();
    assert_eq!(s.indices, vec![0]);
    assert_eq!(s.scores, vec![0.5, 0.5]);
    assert_eq!(resnet_select_outputs(std::slice::from_ref(&u), OutputConfig::Keep(2)).unwrap(), select_outputs(&u, OutputConfig::Keep(2)).unwrap());
    assert!(resnet_select_outputs(&[a, u], OutputConfig::Keep(1)).is_err());
}

#[test]
fn grouped_selection_matches_expanded_index_map() {
    let mut r = rng(8);
    let (h, w, n, me) = (3, 4, 5, 6);
    let u = rand_tensor(&mut r, &[h * w * n, me], 1.0);
    // Materialize which channel each flattened row came from.
    let channel_of: Vec<usize> = (0..h).flat_map(|_| (0..w).flat_map(|_| 0..n)).collect();
    let mut expect = vec![0.0; n];
    for (row, &c) in channel_of.iter().enumerate() {
        expect[c] += u.row(row).iter().map(|v| v.abs()).sum::<f64>();
    }
    let s = select_outputs_flattened(&u, h * w, OutputConfig::Keep(3)).unwrap();
    for (a, b) in s.scores.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let rows = s.expand(h * w);
    assert_eq!(rows.len(), h * w * 3);
    assert!(rows.iter().all(|&r| s.indices.contains(&channel_of[r])));
}

#[test]
fn output_transform_bookkeeping() {
    let mut r = rng(9);
    let w = rand_tensor(&mut r, &[4, 3], 1.0);
    let b = rand_tensor(&mut r, &[3], 1.0);
    let (_, basis) = fitted(10, 30, 3, 2);
    let next_w = rand_tensor(&mut r, &[3, 2], 1.0);
    let sel = select_by_scores(&[1.0, 0.1, 0.8], OutputConfig::Keep(2)).unwrap();
    assert_eq!(sel.indices, vec![0, 2]);
    let out = output_transform(&w, Some(&b), &basis, &next_w, 1, &sel).unwrap();
    assert_eq!(out.weight, w.select_columns(&[0, 2]).unwrap());
    assert_eq!(out.bias.unwrap().data(), &[b.data()[0], b.data()[2]]);
    assert_eq!(out.next_basis.mean, vec![basis.mean[0], basis.mean[2]]);
    assert_eq!(out.next_basis.components, basis.components.select_rows(&[0, 2]).unwrap());
    assert_eq!(out.next_weight, next_w.select_rows(&[0, 2]).unwrap());

    let all = select_by_scores(&[1.0, 0.1, 0.8], OutputConfig::Keep(3)).unwrap();
    let same = output_transform(&w, Some(&b), &basis, &next_w, 1, &all).unwrap();
    assert_eq!(same.weight, w);
    assert_eq!(same.next_weight, next_w);
    assert_eq!(same.next_basis.components, basis.components);
}

#[test]
fn full_basis_plan_is_identity_dense() {
    let net = mlp(11, &[10, 8, 6, 4]);
    let mut r = rng(12);
    let x = correlated(&mut r, 80, 10);
    let plan = full_plan(&net);
    let t = apply_plan(&net, &plan, &x, &FitOptions::default()).unwrap();
    let before = net.forward(&x, Mode::Eval).unwrap();
    let after = t.network.forward(&x, Mode::Eval).unwrap();
    assert!(before.logits().max_abs_diff(after.logits()) <= 1e-10);
    let (c0, c1) = (net.count_params(), t.network.count_params());
    assert_eq!(c0.trainable, c1.trainable);
    assert_eq!(c1.total - c0.total, (10 * 10 + 10) + (8 * 8 + 8) + (6 * 6 + 6));
}

#[test]
fn full_basis_plan_is_identity_cnn() {
    let net = small_cnn(13);
    let x = images(&mut rng(14), 30, &[8, 8, 4]);
    let t = apply_plan(&net, &full_plan(&net), &x, &FitOptions::default()).unwrap();
    let before = net.forward(&x, Mode::Eval).unwrap();
    let after = t.network.forward(&x, Mode::Eval).unwrap();
    assert!(before.logits().max_abs_diff(after.logits()) <= 1e-10);
    assert!(matches!(t.network.layer("c2"), Some(Layer::PcaConv2D(_))));

    // Single precision.
    let net32 = net.cast::<f32>();
    let x32 = x.cast::<f32>();
    let t32 = apply_plan(&net32, &full_plan(&net), &x32, &FitOptions::default()).unwrap();
    let a = net32.forward(&x32, Mode::Eval).unwrap();
    let b = t32.network.forward(&x32, Mode::Eval).unwrap();
    assert!(a.logits().max_abs_diff(b.logits()) <= 1e-4);
}

#[test]
fn full_basis_plan_is_identity_resnet() {
    let net = Architecture::ThinResnet8.build::<f64>(15).unwrap();
    let x = images(&mut rng(16), 12, &[32, 32, 3]);
    let t = apply_plan(&net, &full_plan(&net), &x, &FitOptions::default()).unwrap();
    let before = net.forward(&x, Mode::Eval).unwrap();
    let after = t.network.forward(&x, Mode::Eval).unwrap();
    assert!(before.logits().max_abs_diff(after.logits()) <= 1e-10);
}

#[test]
fn truncation_strictly_reduces_parameters() {
    let net = small_cnn(17);
    let x = images(&mut rng(18), 30, &[8, 8, 4]);
    let plan = TransformPlan::new(1, 1)
        .with("c1", None, Some(OutputConfig::Keep(3)))
        .with("c2", Some(InputConfig::Dims(2)), Some(OutputConfig::Keep(4)))
        .with("out", Some(InputConfig::Dims(10)), None);
    let t = apply_plan(&net, &plan, &x, &FitOptions::default()).unwrap();
    let (c0, c1) = (net.count_params(), t.network.count_params());
    assert!(c1.trainable < c0.trainable);
    // c1 3×3×4×3+3, c2 3×3×2×4+4, out 10×3+3, bn γ/β on 3 channels.
    // Frozen: moving stats, c2 basis 3×2+3, out basis over 4×4×4 inputs.
    let trainable = (108 + 3) + (72 + 4) + (30 + 3) + 2 * 3;
    assert_eq!(c1.trainable, trainable);
    assert_eq!(c1.total, trainable + 2 * 3 + (3 * 2 + 3) + (64 * 10 + 64));
    let out = t.network.forward(&x, Mode::Eval).unwrap();
    assert_eq!(out.logits().shape(), &[30, 3]);
    assert_eq!(t.selections["c1"].len(), 3);
    assert_eq!(t.effective_dims()["c2"], 2);
    assert_eq!(t.changed, vec!["c1", "bn", "c2", "out"]);
}

#[test]
fn plan_validation_errors() {
    let net = mlp(19, &[6, 5, 4, 3]);
    let plan = TransformPlan::new(1, 1).with("fc2", None, Some(OutputConfig::Keep(2)));
    let e = validate_plan(&net, &plan).unwrap_err();
    assert!(matches!(e, Error::Plan(_)));
    assert!(e.to_string().contains("if i is in O then i+1 must be in I"), "{e}");
    assert!(e.to_string().contains("fc2") && e.to_string().contains("output"));

    let plan = TransformPlan::new(1, 1).with("output", Some(InputConfig::Dims(2)), Some(OutputConfig::Keep(2)));
    assert!(validate_plan(&net, &plan).unwrap_err().to_string().contains("final classifier"));
    let plan = TransformPlan::new(1, 1).with("fc1", Some(InputConfig::Dims(7)), None);
    assert!(validate_plan(&net, &plan).is_err());
    let plan = TransformPlan::new(1, 1).with("fc9", Some(InputConfig::Dims(1)), None);
    assert!(validate_plan(&net, &plan).unwrap_err().to_string().contains("fc1"));

    let res = Architecture::ThinResnet8.build::<f32>(0).unwrap();
    let plan = TransformPlan::new(1, 1)
        .with("s1_proj", None, Some(OutputConfig::Keep(4)))
        .with("s2_proj", Some(InputConfig::Dims(4)), None)
        .with("s2b0_conv1", Some(InputConfig::Dims(4)), None);
    let e = validate_plan(&res, &plan).unwrap_err().to_string();
    assert!(e.contains("partial membership") && e.contains("s1b0_conv2"), "{e}");
}

#[test]
fn thin_resnet_group_pruning() {
    let net = Architecture::ThinResnet8.build::<f64>(20).unwrap();
    let s = channel_stream(&net, net.index_of("s1b0_conv2").unwrap()).unwrap();
    let names = |v: Vec<usize>| v.into_iter().map(|i| net.nodes()[i].name.clone()).collect::<Vec<_>>();
    assert_eq!(names(s.producers.clone()), ["s1_proj", "s1b0_conv2"]);
    assert_eq!(names(s.batchnorms.clone()), ["s1_proj_bn", "s1b0_bn2"]);
    assert_eq!(names(s.consumers.iter().map(|c| c.node).collect()), ["s2_proj", "s2b0_conv1"]);

    let keep = Some(OutputConfig::Keep(4));
    let plan = TransformPlan::new(1, 1)
        .with("s1_proj", None, keep)
        .with("s1b0_conv2", None, keep)
        .with("s2_proj", Some(InputConfig::Dims(8)), None)
        .with("s2b0_conv1", Some(InputConfig::Dims(8)), None);
    let x = images(&mut rng(21), 8, &[32, 32, 3]);
    let t = apply_plan(&net, &plan, &x, &FitOptions::default()).unwrap();
    let out = t.network.forward(&x, Mode::Eval).unwrap();
    assert_eq!(out.logits().shape(), &[8, 10]);
    let idx = t.network.index_of("s1b0_add").unwrap();
    assert_eq!(t.network.output_shape(idx), &[32, 32, 4]);
    assert_eq!(t.selections["s1_proj"], t.selections["s1b0_conv2"]);
    // Both consumers read the same node, so the score is that one basis.
    let b = &t.bases["s2_proj"];
    assert_eq!(b.dim(), 4);
    assert_eq!(t.bases["s2_proj"], t.bases["s2b0_conv1"]);
    let Some(Layer::BatchNorm(bn)) = t.network.layer("s1_proj_bn") else { panic!() };
    assert_eq!(bn.channels(), 4);
}

/// Basis whose leading directions are the first coordinate axes.
fn axis_basis(m: usize, me: usize) -> PcaBasis {
    let comps = Tensor::from_fn(&[m, me], |i| if i / me == i % me { 1.0 } else { 0.0 });
    let var = (0..m).map(|i| if i < me { (me - i) as f64 } else { 0.0 }).collect();
    truncate(&PcaBasis::from_parts(vec![0.0; m], var, comps, 10).unwrap(), Truncation::Fixed(me)).unwrap()
}

#[test]
fn conv4_pcn_parameter_count() {
    let net = Architecture::Conv4.build::<f32>(0).unwrap();
    let plan = TransformPlan::parse_tuples(
        "conv1:(None, 40), conv2:(20, 50), conv3:(40, 100), conv4:(80, 60), fc1:(50, 90), fc2:(40, 180), output:(30, None)",
        1,
        1,
    )
    .unwrap();
    let dims = [("conv2", 64, 20), ("conv3", 64, 40), ("conv4", 128, 80), ("fc1", 8192, 50), ("fc2", 256, 40), ("output", 256, 30)];
    let bases: BTreeMap<String, PcaBasis> = dims.iter().map(|&(n, m, me)| (n.to_string(), axis_basis(m, me))).collect();
    let t = apply_plan_with_bases(&net, &plan, &bases).unwrap();
    let c = t.network.count_params();
    assert_eq!(c.trainable, 101_810);
    // Frozen storage: pruned input width m' per layer, m'·m_e + m'.
    let frozen: usize = [(40, 20), (50, 40), (100, 80), (8 * 8 * 60, 50), (90, 40), (180, 30)]
        .iter()
        .map(|&(m, me)| m * me + m)
        .sum();
    assert_eq!(c.total, 101_810 + frozen);
    for n in t.network.nodes() {
        for (slot, role, _) in n.layer.tensors() {
            if slot == "basis" || slot == "mean" {
                assert_eq!(role, TensorRole::Frozen);
            }
        }
    }
}

#[test]
fn plan_toml_round_trip() {
    let text = r#"
transform_epoch = 2
post_epochs = 18

[layers]
conv1 = { output = 40 }
conv2 = { input = 20, output = 50 }
fc1 = { input = { threshold = 0.1 }, output = { threshold = 0.5 } }
"#;
    let plan = TransformPlan::from_toml(text).unwrap();
    assert_eq!(plan.input_config("conv2"), Some(InputConfig::Dims(20)));
    assert_eq!(plan.input_config("fc1"), Some(InputConfig::Threshold { threshold: 0.1 }));
    assert_eq!(plan.output_config("fc1"), Some(OutputConfig::Threshold { threshold: 0.5 }));
    assert_eq!(plan.input_set(), vec!["conv2", "fc1"]);
    assert_eq!(plan.output_set(), vec!["conv1", "conv2", "fc1"]);
    assert_eq!(TransformPlan::from_toml(&plan.to_toml().unwrap()).unwrap(), plan);
    assert!(TransformPlan::from_toml("transform_epoch = 1\npost_epochs = 1\n[layers]\nx = { inptu = 3 }").is_err());
    let tuples = TransformPlan::parse_tuples("fc1:(0.1, None), fc2:(None, 7)", 2, 18).unwrap();
    assert_eq!(tuples.input_config("fc1"), Some(InputConfig::Threshold { threshold: 0.1 }));
    assert_eq!(tuples.output_config("fc2"), Some(OutputConfig::Keep(7)));
    assert!(TransformPlan::parse_tuples("fc1 0.1", 1, 1).is_err());
}

#[test]
fn conv_fit_respects_pixel_cap() {
    let net = small_cnn(22);
    let x = images(&mut rng(23), 20, &[8, 8, 4]);
    let plan = TransformPlan::new(1, 1)
        .with("c2", Some(InputConfig::Threshold { threshold: 0.0 }), None)
        .with("out", Some(InputConfig::Dims(5)), None);
    let opts = FitOptions {
        conv_cap: 300,
        batch_size: 7,
        ..FitOptions::default()
    };
    let bases = fit_plan_bases(&net, &plan, &x, &opts).unwrap();
    assert_eq!(bases["c2"].sample_count, 300);
    assert_eq!(bases["out"].sample_count, 20);
    assert_eq!(fit_plan_bases(&net, &plan, &x, &opts).unwrap(), bases);
    let again = fit_plan_bases(&net, &plan, &x, &FitOptions { seed: 1, ..opts }).unwrap();
    assert_ne!(again["c2"], bases["c2"]);
}
