use adaptive_attention::attention::{
    add_relative_embeddings, attention_forward_naive, attention_weights_at, AttentionLayerConfig, AttentionLayerParams,
    AttentionVariant,
};
use adaptive_attention::tensor::ops::MASK_EPS;
use adaptive_attention::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{fused, fused_vs_naive, saturation_gap};

#[test]
fn fused_matches_naive_over_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut extents_seen = std::collections::BTreeSet::new();
    for case in 0..20 {
        let (err, extent) = fused_vs_naive(case, &mut rng);
        assert!(err <= 1e-10, "case {case}: {err}");
        extents_seen.insert(extent);
    }
    assert!(extents_seen.is_superset(&[3, 5, 9].into_iter().collect()));
}

#[test]
fn saturated_adaptive_equals_fixed() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (s, heads, stride) in [(5, 2, 1), (8, 4, 2), (4, 1, 1)] {
        let gap = saturation_gap(s, heads, stride, &mut rng);
        assert!(gap <= 1e-12, "side {s}: {gap}");
    }
}

#[test]
fn constant_input_interior_is_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = AttentionLayerConfig {
        in_channels: 2,
        out_channels: 4,
        heads: 2,
        stride: 1,
        variant: AttentionVariant::Adaptive,
        fixed_kernel_extent: 3,
        ramp: 1,
        input_size: 8,
    };
    let p = AttentionLayerParams::<f64>::init(&cfg, 0.5, &mut rng).unwrap();
    assert_eq!(p.extent(&cfg).unwrap(), 5);
    let mut x = Tensor::zeros(&[1, 2, 8, 8]);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v = if i < 64 { 0.7 } else { -1.3 };
    }
    let y = fused(&x, &p, &cfg);
    for c in 0..4 {
        let reference = y.at(&[0, c, 2, 2]);
        for i in 2..6 {
            for j in 2..6 {
                assert!((y.at(&[0, c, i, j]) - reference).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn zero_values_give_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AttentionLayerConfig {
        in_channels: 3,
        out_channels: 4,
        heads: 2,
        stride: 1,
        variant: AttentionVariant::Fixed,
        fixed_kernel_extent: 5,
        ramp: 2,
        input_size: 6,
    };
    let mut p = AttentionLayerParams::<f64>::init(&cfg, 0.0, &mut rng).unwrap();
    p.v.value = Tensor::zeros(&[4, 3]);
    let x = Tensor::randn(&[1, 3, 6, 6], 3.0, &mut rng);
    assert!(fused(&x, &p, &cfg).data().iter().all(|&v| v == 0.0));
    assert!(attention_forward_naive(&x, &p, &cfg)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn growing_span_never_shrinks_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = AttentionLayerConfig {
        in_channels: 2,
        out_channels: 2,
        heads: 1,
        stride: 1,
        variant: AttentionVariant::Adaptive,
        fixed_kernel_extent: 3,
        ramp: 2,
        input_size: 9,
    };
    let mut p = AttentionLayerParams::<f64>::init(&cfg, 0.0, &mut rng).unwrap();
    let x = Tensor::randn(&[1, 2, 9, 9], 1.0, &mut rng);
    let support = |p: &AttentionLayerParams<f64>| -> Vec<(isize, isize)> {
        let w = &attention_weights_at(&x, p, &cfg, 0, 4, 4).unwrap()[0];
        let e = (w.len() as f64).sqrt() as usize;
        let c = (e / 2) as isize;
        (0..w.len())
            .filter(|&i| w[i] > 0.0)
            .map(|i| ((i / e) as isize - c, (i % e) as isize - c))
            .collect()
    };
    let mut prev: Vec<(isize, isize)> = Vec::new();
    for z in [0.0, 0.4, 1.0, 1.6, 2.5, 3.3, 5.0] {
        p.spans.as_mut().unwrap().value = Tensor::from_vec(&[1], vec![z]).unwrap();
        let now = support(&p);
        assert!(prev.iter().all(|o| now.contains(o)), "z={z}");
        assert!(now.len() >= prev.len());
        prev = now;
    }
}

#[test]
fn relative_embeddings_on_zero_keys() {
    let mut g = Graph::<f64>::new();
    let keys = g.leaf(Tensor::zeros(&[9, 4]));
    let rel_h = g.leaf(Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let rel_w = g.leaf(Tensor::from_vec(&[3, 2], vec![10., 20., 30., 40., 50., 60.]).unwrap());
    let out = add_relative_embeddings(&mut g, keys, rel_h, rel_w).unwrap();
    let v = g.value(out);
    // cell (0, 2) is rel_w[2] ++ rel_h[0]
    assert_eq!(&v.data()[2 * 4..3 * 4], &[50., 60., 1., 2.]);
    // cells (0, 1) and (2, 1) share their width half
    assert_eq!(&v.data()[4..6], &v.data()[7 * 4..7 * 4 + 2]);

    let zero_h = g.leaf(Tensor::zeros(&[3, 2]));
    let zero_w = g.leaf(Tensor::zeros(&[3, 2]));
    let k = g.leaf(Tensor::from_vec(&[9, 4], (0..36).map(f64::from).collect()).unwrap());
    let same = add_relative_embeddings(&mut g, k, zero_h, zero_w).unwrap();
    assert_eq!(g.value(same), g.value(k));
}

/// Six nested loops over batch, output channel, rows, columns, input channel and taps.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for t in 0..k * k {
                            let (r, s) = (t / k, t % k);
                            let (yy, xx) = (
                                (i * stride + r) as isize - pad as isize,
                                (j * stride + s) as isize - pad as isize,
                            );
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                acc += x.at(&[n, c, yy as usize, xx as usize]) * w.at(&[o, c, r, s]);
                            }
                        }
                    }
                    y.data_mut()[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    y
}

#[test]
fn conv2d_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (5, 1, 2)] {
        let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
        let mut g = Graph::inference();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let r = conv_reference(&x, &w, stride, pad);
        assert_eq!(g.value(y).shape(), r.shape());
        for (a, b) in g.value(y).data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-10, "k={k} stride={stride}: {a} vs {b}");
        }
    }
}

#[test]
fn unfold_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (5, 1, 2), (1, 2, 0)] {
        let x = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let u = g.unfold(xv, k, stride, pad).unwrap();
        let y = Tensor::randn(g.shape(u), 1.0, &mut rng);
        let lhs: f64 = g.value(u).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let yv = g.constant(y);
        let prod = g.mul(u, yv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let folded = g.grad(xv).unwrap();
        let rhs: f64 = x.data().iter().zip(folded.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn fold_of_ones_counts_window_membership() {
    let (h, k, pad) = (5usize, 3usize, 1usize);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::ones(&[1, h, h]));
    let u = g.unfold(xv, k, 1, pad).unwrap();
    assert_eq!(g.shape(u), &[k * k, h * h]);
    let loss = g.sum(u);
    g.backward(loss).unwrap();
    let counts = g.grad(xv).unwrap();
    for i in 0..h {
        for j in 0..h {
            let mut n = 0;
            for ci in 0..h {
                for cj in 0..h {
                    if i.abs_diff(ci) <= pad && j.abs_diff(cj) <= pad {
                        n += 1;
                    }
                }
            }
            assert_eq!(counts.at(&[0, i, j]), n as f64);
        }
    }
    assert_eq!(counts.at(&[0, 0, 0]), 4.0);
    assert_eq!(counts.at(&[0, 0, 2]), 6.0);
    assert_eq!(counts.at(&[0, 2, 2]), 9.0);
}

#[test]
fn masked_softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let len = rng.gen_range(1..12);
        let rows = rng.gen_range(1..5);
        let logits = Tensor::<f64>::uniform(&[rows, len], -3.0, 3.0, &mut rng);
        let mut mask = Tensor::<f64>::uniform(&[len], 0.0, 1.0, &mut rng);
        let keep = rng.gen_range(0..len);
        mask.data_mut()[keep] = 1.0;
        let mut g = Graph::inference();
        let (l, m) = (g.constant(logits), g.constant(mask.clone()));
        let y = g.softmax_masked(l, m, MASK_EPS).unwrap();
        for row in g.value(y).data().chunks(len) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (v, &mv) in row.iter().zip(mask.data()) {
                if mv == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
