use adaptive_attention::attention::AttentionVariant;
use adaptive_attention::mask::mask_span_derivative;
use adaptive_attention::tensor::gradcheck::{grad_check, GradCheckOptions};
use adaptive_attention::tensor::{Graph, Tensor};
use adaptive_attention::verify::{check_attention, check_mask, check_ops, LAYER_TOLERANCE, OPS_TOLERANCE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tensor_ops_within_tolerance() {
    for seed in [0, 1] {
        let reports = check_ops(seed).unwrap();
        assert!(reports.len() >= 20);
        for (name, r) in &reports {
            assert!(r.max_rel_err() <= OPS_TOLERANCE, "{name}: {}", r.max_rel_err());
        }
    }
}

#[test]
fn matmul_and_conv_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = GradCheckOptions {
        tol: 1e-6,
        ..Default::default()
    };
    let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
    let r = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &[("a".into(), a), ("b".into(), b)],
        opts,
    )
    .unwrap();
    assert!(r.max_rel_err() <= 1e-6, "{:?}", r.params);

    let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let r = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &[("x".into(), x), ("w".into(), w)],
        opts,
    )
    .unwrap();
    assert!(r.max_rel_err() <= 1e-6, "{:?}", r.params);
}

#[test]
fn mask_derivative_matches_differences() {
    let r = check_mask(3).unwrap();
    assert!(r.max_rel_err() <= 1e-6, "{}", r.max_rel_err());

    let h = 1e-6;
    for &z in &[0.3, 1.5, 2.7, 4.25] {
        let d = mask_span_derivative(11, z, 2).unwrap();
        let up = adaptive_attention::mask::create_adaptive_mask::<f64>(11, z + h, 2).unwrap();
        let dn = adaptive_attention::mask::create_adaptive_mask::<f64>(11, z - h, 2).unwrap();
        for i in 0..d.len() {
            let fd = (up.values.data()[i] - dn.values.data()[i]) / (2.0 * h);
            assert!(
                (fd - d.data()[i]).abs() <= 1e-6,
                "z={z} cell {i}: {fd} vs {}",
                d.data()[i]
            );
        }
    }
}

#[test]
fn attention_layer_every_group() {
    for seed in 0..3 {
        for variant in [AttentionVariant::Adaptive, AttentionVariant::Fixed] {
            let r = check_attention(variant, seed).unwrap();
            let mut names: Vec<&str> = r.params.iter().map(|p| p.name.as_str()).collect();
            names.sort_unstable();
            let mut want = vec!["emb_h", "emb_w", "k", "q", "v", "x"];
            if variant == AttentionVariant::Adaptive {
                want.push("z");
            }
            want.sort_unstable();
            assert_eq!(names, want);
            for p in &r.params {
                assert!(p.checked > 0);
                assert!(
                    p.max_rel_err <= LAYER_TOLERANCE,
                    "{variant:?} seed {seed} {}: {}",
                    p.name,
                    p.max_rel_err
                );
            }
        }
    }
}

#[test]
fn span_gradient_is_nonzero_on_ramp() {
    let r = check_attention(AttentionVariant::Adaptive, 5).unwrap();
    let z = r.get("z").unwrap();
    assert!(z.analytic.abs() > 0.0 || z.numeric.abs() > 0.0);
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::<f64>::inference();
    let a = g.leaf(Tensor::ones(&[3]));
    let b = g.exp(a);
    let _ = g.sum(b);
    assert!(!g.requires_grad(b));
}
