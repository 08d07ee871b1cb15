//! Canned finite-difference suites for the tape ops, the span mask and the
//! attention layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_forward_vars, AttentionLayerConfig, AttentionVariant, AttentionVars};
use crate::error::Result;
use crate::mask::span_masks;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::ops::{ChannelStats, MASK_EPS};
use crate::tensor::{Graph, Tensor, Var};

pub const OPS_TOLERANCE: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;

/// Minimum distance of a sampled span from a mask kink.
pub const KINK_MARGIN: f64 = 0.05;

/// `sum(y * c)` for a fixed pseudo-random `c`, so every output element
/// carries a distinct weight.
pub fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let c = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let c = g.constant(c);
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Uniform values whose magnitude is at least `margin`.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

/// A span at least [`KINK_MARGIN`] from every integer, below `hi`.
pub fn span_off_kinks(rng: &mut ChaCha8Rng, hi: usize) -> f64 {
    let whole = rng.gen_range(0..hi.max(1)) as f64;
    whole + rng.gen_range(KINK_MARGIN..1.0 - KINK_MARGIN)
}

type Case = (
    &'static str,
    Vec<(String, Tensor<f64>)>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
);

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let a34 = n(&[3, 4]);
    let b14 = n(&[1, 4]);
    let c31 = n(&[3, 1]);
    let m45 = n(&[4, 5]);
    let x2355 = n(&[2, 3, 5, 5]);
    let w4333 = n(&[4, 3, 3, 3]);
    let x2344 = n(&[2, 3, 4, 4]);
    let x4322 = n(&[4, 3, 2, 2]);
    let gamma = n(&[3]);
    let beta = n(&[3]);
    let logits = n(&[2, 3, 2, 9]);
    let ce = n(&[4, 5]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut rng);
    let off = away_from_zero(&[3, 4], 0.05, &mut rng);
    let inside = Tensor::uniform(&[3, 4], -0.9, 0.9, &mut rng);
    let mask = Tensor::uniform(&[2, 9], KINK_MARGIN, 1.0 - KINK_MARGIN, &mut rng);

    let s = seed;
    vec![
        (
            "add",
            named(vec![("a", a34.clone()), ("b", b14.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.add(v[0], v[1])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "sub",
            named(vec![("a", a34.clone()), ("b", c31.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.sub(v[0], v[1])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "mul",
            named(vec![("a", a34.clone()), ("b", b14)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.mul(v[0], v[1])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "div",
            named(vec![("a", a34.clone()), ("b", pos)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.div(v[0], v[1])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "scalar",
            named(vec![("a", a34.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.add_scalar(v[0], 0.5);
                let y = g.mul_scalar(y, -1.5);
                let y = g.div_scalar(y, 3.0)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "exp",
            named(vec![("a", a34.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.exp(v[0]);
                probe_loss(g, y, s)
            }),
        ),
        (
            "relu",
            named(vec![("a", off)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.relu(v[0]);
                probe_loss(g, y, s)
            }),
        ),
        (
            "neg",
            named(vec![("a", a34.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.neg(v[0]);
                probe_loss(g, y, s)
            }),
        ),
        (
            "clamp",
            named(vec![("a", inside.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.clamp(v[0], -0.5, 0.5);
                probe_loss(g, y, s)
            }),
        ),
        (
            "project",
            named(vec![("a", inside)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.project(v[0], -1.0, 1.0);
                probe_loss(g, y, s)
            }),
        ),
        (
            "matmul",
            named(vec![("a", a34.clone()), ("b", m45)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "transpose_reshape",
            named(vec![("a", a34.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let t = g.transpose(v[0])?;
                let r = g.reshape(t, &[2, 6])?;
                let y = g.slice_rows(r, 1, 1)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "sum_mean",
            named(vec![("a", a34.clone()), ("b", c31)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let p = g.mul(v[0], v[1])?;
                let e = g.exp(p);
                let m = g.mean(e);
                let t = g.sum(p);
                g.mul(m, t)
            }),
        ),
        (
            "conv2d",
            named(vec![("x", x2355.clone()), ("w", w4333.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], 1, 1)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "conv2d_stride2",
            named(vec![("x", x2355.clone()), ("w", w4333)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], 2, 0)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "unfold",
            named(vec![("x", x2355)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let x = g.reshape(v[0], &[6, 5, 5])?;
                let y = g.unfold(x, 3, 1, 1)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "avg_pool2",
            named(vec![("x", x2344.clone())]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.avg_pool2(v[0])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "global_avg_pool",
            named(vec![("x", x2344)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.global_avg_pool(v[0])?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "batch_norm",
            named(vec![("x", x4322), ("gamma", gamma), ("beta", beta)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &ChannelStats::identity(3), true)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "softmax_masked",
            named(vec![("logits", logits), ("mask", mask)]),
            Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.softmax_masked(v[0], v[1], MASK_EPS)?;
                probe_loss(g, y, s)
            }),
        ),
        (
            "cross_entropy",
            named(vec![("logits", ce)]),
            Box::new(|g: &mut Graph<f64>, v: &[Var]| g.cross_entropy(v[0], &[0, 3, 4, 1])),
        ),
    ]
}

/// Every differentiable tape op on small random inputs.
pub fn check_ops(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let opts = GradCheckOptions {
        tol: OPS_TOLERANCE,
        ..GradCheckOptions::default()
    };
    op_cases(seed)
        .into_iter()
        .map(|(name, params, f)| Ok((name.to_string(), grad_check(f, &params, opts)?)))
        .collect()
}

/// The span mask with respect to `z`, spans kept off the kinks.
pub fn check_mask(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..3).map(|_| span_off_kinks(&mut rng, 3)).collect();
    let params = named(vec![("z", Tensor::from_vec(&[3], z)?)]);
    let opts = GradCheckOptions {
        tol: OPS_TOLERANCE,
        ..GradCheckOptions::default()
    };
    grad_check(
        move |g: &mut Graph<f64>, v: &[Var]| {
            let m = span_masks(g, v[0], 2, 11)?;
            probe_loss(g, m, seed)
        },
        &params,
        opts,
    )
}

/// Configuration of the `1 x 2 x 5 x 5` layer used by [`check_attention`].
pub fn grad_layer_config(variant: AttentionVariant) -> AttentionLayerConfig {
    AttentionLayerConfig {
        in_channels: 2,
        out_channels: 4,
        heads: 2,
        stride: 1,
        variant,
        fixed_kernel_extent: 3,
        ramp: 2,
        input_size: 5,
    }
}

/// Every parameter group of a small attention layer plus its input.
pub fn check_attention(variant: AttentionVariant, seed: u64) -> Result<GradCheckReport> {
    let cfg = grad_layer_config(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout, table, half) = (cfg.in_channels, cfg.out_channels, cfg.table_len(), cfg.head_dim() / 2);
    let mut items = vec![
        ("x", Tensor::randn(&[1, cin, 5, 5], 1.0, &mut rng)),
        ("q", Tensor::randn(&[cout, cin], 0.7, &mut rng)),
        ("k", Tensor::randn(&[cout, cin], 0.7, &mut rng)),
        ("v", Tensor::randn(&[cout, cin], 0.7, &mut rng)),
        ("emb_h", Tensor::randn(&[table, half], 0.7, &mut rng)),
        ("emb_w", Tensor::randn(&[table, half], 0.7, &mut rng)),
    ];
    if variant == AttentionVariant::Adaptive {
        let z: Vec<f64> = (0..cfg.heads).map(|_| span_off_kinks(&mut rng, 3)).collect();
        items.push(("z", Tensor::from_vec(&[cfg.heads], z)?));
    }
    let params = named(items);
    let opts = GradCheckOptions {
        tol: LAYER_TOLERANCE,
        ..GradCheckOptions::default()
    };
    grad_check(
        move |g: &mut Graph<f64>, v: &[Var]| {
            let vars = AttentionVars {
                q: v[1],
                k: v[2],
                v: v[3],
                emb_h: v[4],
                emb_w: v[5],
                spans: v.get(6).copied(),
            };
            let y = attention_forward_vars(g, v[0], vars, &cfg)?;
            probe_loss(g, y, seed)
        },
        &params,
        opts,
    )
}
