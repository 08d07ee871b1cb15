//! Parameter and FLOPS accounting.
//!
//! One multiply-accumulate counts as 2 FLOPS. Element-wise work (batch
//! norm, ReLU, residual adds, pooling, softmax and mask arithmetic,
//! embedding adds, biases) counts 1 FLOP per element and is reported
//! separately from the multiply-accumulate part. Attention keys and values
//! are projected over the zero-padded map the windows read from.
//! Adaptive layers are costed at their current extents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Primitive, SizeClass, SpatialKernel};
use crate::tensor::Float;

pub fn conv_params(k: usize, cin: usize, cout: usize, bias: bool) -> usize {
    k * k * cin * cout + if bias { cout } else { 0 }
}

pub fn linear_params(inputs: usize, outputs: usize, bias: bool) -> usize {
    inputs * outputs + if bias { outputs } else { 0 }
}

/// Multiply-accumulate FLOPS of a convolution producing `hout x wout`.
pub fn conv_flops(k: usize, cin: usize, cout: usize, hout: usize, wout: usize) -> u64 {
    2 * (k * k * cin * cout * hout * wout) as u64
}

/// FLOPS of one attention layer at side `s` with window `extent`.
pub fn attention_flops(channels: usize, heads: usize, extent: usize, s: usize) -> (u64, u64) {
    let (w, e2, s2) = (channels as u64, (extent * extent) as u64, (s * s) as u64);
    let padded = (s + 2 * (extent / 2)) as u64;
    let mac = 2 * w * w * s2 + 2 * 2 * w * w * padded * padded + 2 * 2 * w * e2 * s2;
    let elem = 3 * heads as u64 * e2 * s2 + w * e2 * s2;
    (mac, elem)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub mac_flops: u64,
    pub elementwise_flops: u64,
    /// Spatial kernel extent, for blocks.
    pub extent: Option<usize>,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        self.mac_flops + self.elementwise_flops
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub primitive: Primitive,
    pub size_class: SizeClass,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_flops: u64,
    pub total_mac_flops: u64,
    /// Spatial kernel extent of every block at the time of counting.
    pub extents: Vec<usize>,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_m(&self) -> f64 {
        self.total_flops as f64 / 1e6
    }
}

/// Scalar parameter counts per canonical path.
pub fn count_params<T: Float>(model: &Model<T>) -> Vec<(String, usize)> {
    model.params().into_iter().map(|(n, p)| (n, p.numel())).collect()
}

fn group_params(by_path: &[(String, usize)], prefix: &str) -> usize {
    by_path
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, c)| c)
        .sum()
}

/// Per-layer FLOPS of one forward pass on a single `[C, H, W]` image.
pub fn count_flops<T: Float>(model: &Model<T>, input_shape: [usize; 3]) -> Result<Vec<LayerCost>> {
    let cfg = &model.config;
    let [c, h, w] = input_shape;
    if c != cfg.in_channels || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::ShapeMismatch(format!(
            "model built for [{}, {s}, {s}], costed on {input_shape:?}",
            cfg.in_channels,
            s = cfg.input_size
        )));
    }
    let by_path = count_params(model);
    let mut layers = Vec::new();

    let s = cfg.input_size;
    let s2 = (s * s) as u64;
    let stem_c = cfg.stem_channels;
    layers.push(LayerCost {
        name: "stem".into(),
        params: group_params(&by_path, "stem."),
        mac_flops: conv_flops(cfg.conv_extent, c, stem_c, s, s),
        elementwise_flops: 2 * stem_c as u64 * s2,
        extent: Some(cfg.conv_extent),
    });

    let mut last = (stem_c, s);
    for (i, b) in model.blocks.iter().enumerate() {
        let (s, so) = (b.input_size, b.output_size());
        let (s2, so2) = ((s * s) as u64, (so * so) as u64);
        let (cin, wd, cout) = (b.in_channels, b.width, b.out_channels);
        let (wd64, cout64) = (wd as u64, cout as u64);
        let extent = b.spatial_extent()?;

        let mut mac = conv_flops(1, cin, wd, s, s);
        let mut elem = 2 * wd64 * s2;
        match &b.spatial {
            SpatialKernel::Conv { .. } => mac += conv_flops(extent, wd, wd, s, s),
            SpatialKernel::Attention { config, .. } => {
                let (m, e) = attention_flops(wd, config.heads, extent, s);
                mac += m;
                elem += e;
            }
        }
        elem += 2 * wd64 * s2;
        mac += conv_flops(1, wd, cout, s, s);
        elem += cout64 * s2;
        if b.stride == 2 {
            elem += cout64 * s2;
        }
        if b.shortcut.is_some() {
            mac += conv_flops(1, cin, cout, so, so);
            elem += cout64 * so2;
        }
        elem += 2 * cout64 * so2;
        layers.push(LayerCost {
            name: format!("blocks.{i}"),
            params: group_params(&by_path, &format!("blocks.{i}.")),
            mac_flops: mac,
            elementwise_flops: elem,
            extent: Some(extent),
        });
        last = (cout, so);
    }

    let (cf, sf) = last;
    let classes = cfg.num_classes;
    layers.push(LayerCost {
        name: "head".into(),
        params: group_params(&by_path, "head."),
        mac_flops: 2 * (cf * classes) as u64,
        elementwise_flops: (cf * sf * sf + classes) as u64,
        extent: None,
    });
    Ok(layers)
}

pub fn cost_report<T: Float>(model: &Model<T>) -> Result<CostReport> {
    let cfg = &model.config;
    let shape = [cfg.in_channels, cfg.input_size, cfg.input_size];
    let layers = count_flops(model, shape)?;
    let extents = model
        .blocks
        .iter()
        .map(|b| b.spatial_extent())
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        primitive: cfg.primitive,
        size_class: cfg.size,
        input_shape: shape,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(LayerCost::flops).sum(),
        total_mac_flops: layers.iter().map(|l| l.mac_flops).sum(),
        layers,
        extents,
    })
}

/// A finished run as it enters the scaling tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub cost: CostReport,
    pub accuracy: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingTables {
    pub cost_csv: PathBuf,
    pub fraction_csv: PathBuf,
    pub cost_rows: usize,
    pub fraction_rows: usize,
}

/// Writes `accuracy_vs_cost.csv` (full-data runs) and
/// `accuracy_vs_fraction.csv` (every run) into `dir`.
pub fn export_scaling_tables(runs: &[ScalingRun], dir: &Path) -> Result<ScalingTables> {
    if runs.is_empty() {
        return Err(Error::MissingRun("export".into()));
    }
    fs::create_dir_all(dir)?;
    let mut cost = String::from("params,flops,acc,primitive,size_class\n");
    let mut cost_rows = 0;
    for r in runs.iter().filter(|r| r.fraction >= 1.0) {
        cost.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cost.total_params, r.cost.total_flops, r.accuracy, r.cost.primitive, r.cost.size_class
        ));
        cost_rows += 1;
    }
    let mut frac = String::from("fraction,acc,primitive,size_class\n");
    for r in runs {
        frac.push_str(&format!(
            "{},{},{},{}\n",
            r.fraction, r.accuracy, r.cost.primitive, r.cost.size_class
        ));
    }
    let cost_csv = dir.join("accuracy_vs_cost.csv");
    let fraction_csv = dir.join("accuracy_vs_fraction.csv");
    fs::write(&cost_csv, cost)?;
    fs::write(&fraction_csv, frac)?;
    Ok(ScalingTables {
        cost_csv,
        fraction_csv,
        cost_rows,
        fraction_rows: runs.len(),
    })
}
