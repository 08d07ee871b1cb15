use adaptive_attention::attention::{
    attention_forward, attention_forward_naive, AttentionLayerConfig, AttentionLayerParams, AttentionVariant,
};
use adaptive_attention::tensor::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Layer case `case` of the randomized fused-vs-naive sweep: side 4 or 8,
/// 1, 2 or 4 heads, windows of 3, 5 or 9, both variants.
pub fn random_layer_case(case: usize, rng: &mut ChaCha8Rng) -> (AttentionLayerConfig, AttentionLayerParams<f64>) {
    let s = [4, 8][case % 2];
    let heads = [1, 2, 4][(case / 2) % 3];
    let variant = if case % 4 < 2 {
        AttentionVariant::Adaptive
    } else {
        AttentionVariant::Fixed
    };
    let want_extent = [3, 5, 9][case % 3];
    let dh = 2 * rng.gen_range(1..=2);
    let cfg = AttentionLayerConfig {
        in_channels: rng.gen_range(1..=4),
        out_channels: heads * dh,
        heads,
        stride: rng.gen_range(1..=2),
        variant,
        fixed_kernel_extent: want_extent,
        ramp: rng.gen_range(1..=3),
        input_size: s,
    };
    let mut p = AttentionLayerParams::<f64>::init(&cfg, 0.0, rng).unwrap();
    if let Some(z) = p.spans.as_mut() {
        // head 0 reaches the wanted window, the others fall short of it
        let reach = (want_extent / 2) as f64;
        let top = reach - cfg.ramp as f64 - rng.gen_range(0.05..0.95);
        let spans: Vec<f64> = (0..heads)
            .map(|h| if h == 0 { top } else { top - rng.gen_range(0.0..1.5) })
            .collect();
        z.value = Tensor::from_vec(&[heads], spans).unwrap();
    }
    assert_eq!(p.extent(&cfg).unwrap(), want_extent, "case {case}");
    (cfg, p)
}

pub fn fused(x: &Tensor<f64>, p: &AttentionLayerParams<f64>, c: &AttentionLayerConfig) -> Tensor<f64> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = attention_forward(&mut g, xv, p, c).unwrap();
    g.value(y).clone()
}

/// Largest absolute difference over the largest reference magnitude.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Relative fused-vs-naive error of one randomized case, with its window.
pub fn fused_vs_naive(case: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let (cfg, p) = random_layer_case(case, rng);
    let x = Tensor::randn(&[2, cfg.in_channels, cfg.input_size, cfg.input_size], 1.0, rng);
    let y = fused(&x, &p, &cfg);
    let naive = attention_forward_naive(&x, &p, &cfg).unwrap();
    assert_eq!(y.shape(), naive.shape());
    (max_rel_diff(y.data(), naive.data()), p.extent(&cfg).unwrap())
}

/// Largest output difference between an adaptive layer whose spans cover
/// the whole map and a fixed layer of the same window sharing its weights.
pub fn saturation_gap(s: usize, heads: usize, stride: usize, rng: &mut ChaCha8Rng) -> f64 {
    let extent = 2 * s + 1;
    let fixed = AttentionLayerConfig {
        in_channels: 3,
        out_channels: 4 * heads,
        heads,
        stride,
        variant: AttentionVariant::Fixed,
        fixed_kernel_extent: extent,
        ramp: 2,
        input_size: s,
    };
    let adaptive = AttentionLayerConfig {
        variant: AttentionVariant::Adaptive,
        ..fixed.clone()
    };
    let pa = AttentionLayerParams::<f64>::init(&adaptive, s as f64, rng).unwrap();
    let pf = AttentionLayerParams {
        spans: None,
        ..pa.clone()
    };
    assert_eq!(pa.extent(&adaptive).unwrap(), extent);
    let x = Tensor::randn(&[2, 3, s, s], 1.0, rng);
    let (ya, yf) = (fused(&x, &pa, &adaptive), fused(&x, &pf, &fixed));
    ya.data()
        .iter()
        .zip(yf.data())
        .map(|(a, f)| (a - f).abs())
        .fold(0.0, f64::max)
}
