//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export returns a JSON string. The plain Rust functions underneath
//! are what the tests exercise.

use adaptive_attention::analysis::cost_report;
use adaptive_attention::attention::{
    attention_weights_at, AttentionLayerConfig, AttentionLayerParams, AttentionVariant,
};
use adaptive_attention::mask::{create_adaptive_mask, kernel_extent, SpanParam};
use adaptive_attention::model::{Model, ModelConfig, Primitive, SizeClass};
use adaptive_attention::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Feature-map side the mask view assumes when deriving an extent.
pub const MASK_VIEW_SIZE: usize = 32;
const DEMO_CHANNELS: usize = 8;
const DEMO_HEAD_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskView {
    pub extent: usize,
    pub values: Vec<f64>,
}

/// Mask grid for one head. `extent == 0` derives the smallest extent that
/// holds every nonzero entry.
pub fn mask_view(z: f64, ramp: usize, extent: usize) -> Result<MaskView, String> {
    let span = SpanParam::new(z, ramp).map_err(|e| e.to_string())?;
    let extent = if extent == 0 {
        kernel_extent(&[span.z], ramp, MASK_VIEW_SIZE).map_err(|e| e.to_string())?
    } else {
        extent
    };
    let m = create_adaptive_mask::<f64>(extent, span.z, ramp).map_err(|e| e.to_string())?;
    Ok(MaskView {
        extent,
        values: m.values.into_data(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMap {
    pub span: f64,
    pub mask: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    pub input_size: usize,
    pub extent: usize,
    pub image: Vec<f64>,
    pub heads: Vec<HeadMap>,
}

/// Attention weights of pixel `(row, col)` in a randomly initialized layer
/// with one head per entry of `spans`, over a seeded random image.
pub fn attention_map_view(
    input_size: usize,
    spans: &[f64],
    ramp: usize,
    seed: u64,
    row: usize,
    col: usize,
) -> Result<AttentionMap, String> {
    if spans.is_empty() {
        return Err("at least one head is required".into());
    }
    let cfg = AttentionLayerConfig {
        in_channels: DEMO_CHANNELS,
        out_channels: spans.len() * DEMO_HEAD_DIM,
        heads: spans.len(),
        stride: 1,
        variant: AttentionVariant::Adaptive,
        fixed_kernel_extent: 5,
        ramp,
        input_size,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = AttentionLayerParams::<f64>::init(&cfg, 0.0, &mut rng).map_err(|e| e.to_string())?;
    if let Some(z) = params.spans.as_mut() {
        z.value.data_mut().copy_from_slice(spans);
    }
    params.project_spans(input_size);
    let x = Tensor::<f64>::randn(&[1, DEMO_CHANNELS, input_size, input_size], 1.0, &mut rng);
    let weights = attention_weights_at(&x, &params, &cfg, 0, row, col).map_err(|e| e.to_string())?;
    let z = params.span_values();
    let extent = params.extent(&cfg).map_err(|e| e.to_string())?;
    let heads = z
        .iter()
        .zip(weights)
        .map(|(&span, weights)| {
            let mask = create_adaptive_mask::<f64>(extent, span, ramp).map_err(|e| e.to_string())?;
            Ok(HeadMap {
                span,
                mask: mask.values.into_data(),
                weights,
            })
        })
        .collect::<Result<_, String>>()?;
    // channel-mean intensity for the image panel
    let plane = input_size * input_size;
    let image = (0..plane)
        .map(|p| (0..DEMO_CHANNELS).map(|c| x.data()[c * plane + p]).sum::<f64>() / DEMO_CHANNELS as f64)
        .collect();
    Ok(AttentionMap {
        input_size,
        extent,
        image,
        heads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub primitive: String,
    pub params: usize,
    pub flops: u64,
    pub extents: Vec<usize>,
}

/// Parameters, FLOPS and per-block extents of the three primitives at one
/// size, with every adaptive span set to `span`.
pub fn cost_rows(size: &str, span: f64) -> Result<Vec<CostRow>, String> {
    let size: SizeClass = size.parse().map_err(|e: adaptive_attention::Error| e.to_string())?;
    if !(span.is_finite() && span >= 0.0) {
        return Err(format!("span {span} must be a non-negative number"));
    }
    Primitive::ALL
        .iter()
        .map(|&p| {
            let mut model = Model::<f32>::new(ModelConfig::new(p, size), 0).map_err(|e| e.to_string())?;
            if p == Primitive::Adaptive {
                let spans: Vec<Vec<f64>> = model.span_snapshot().iter().map(|l| vec![span; l.len()]).collect();
                model.set_spans(&spans).map_err(|e| e.to_string())?;
            }
            let r = cost_report(&model).map_err(|e| e.to_string())?;
            Ok(CostRow {
                primitive: p.to_string(),
                params: r.total_params,
                flops: r.total_flops,
                extents: r.extents,
            })
        })
        .collect()
}

fn to_js<S: Serialize>(r: Result<S, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn mask_grid(z: f64, ramp: usize, extent: usize) -> Result<String, JsError> {
    to_js(mask_view(z, ramp, extent))
}

#[wasm_bindgen]
pub fn attention_map(
    input_size: usize,
    spans: Vec<f64>,
    ramp: usize,
    seed: u64,
    row: usize,
    col: usize,
) -> Result<String, JsError> {
    to_js(attention_map_view(input_size, &spans, ramp, seed, row, col))
}

#[wasm_bindgen]
pub fn cost_table(size: &str, span: f64) -> Result<String, JsError> {
    to_js(cost_rows(size, span))
}
