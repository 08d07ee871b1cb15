//! Soft square attention masks driven by a learnable span.
//!
//! A head with span `z` and ramp `R` weights the kernel cell at Chebyshev
//! distance `d` from the center by `clamp((R + z - d) / R, 0, 1)`: fully on
//! up to distance `z`, then a linear ramp down to zero at `z + R`. The ramp
//! makes the mask, and therefore the attention output, differentiable in
//! `z`. The kernel that has to be computed for a layer is the smallest odd
//! square covering the widest head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Span default for freshly built adaptive layers.
pub const DEFAULT_INIT_SPAN: f64 = 1.0;
pub const DEFAULT_RAMP: usize = 2;

/// Span of one head together with the ramp length of its layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanParam {
    pub z: f64,
    pub ramp: usize,
}

impl SpanParam {
    pub fn new(z: f64, ramp: usize) -> Result<Self> {
        if ramp == 0 {
            return Err(Error::InvalidConfig("ramp length must be at least 1".into()));
        }
        Ok(Self { z, ramp })
    }

    /// Span projected onto `[0, input_size]`.
    pub fn clamped(&self, input_size: usize) -> f64 {
        self.z.max(0.0).min(input_size as f64)
    }
}

/// Odd side length of the kernel for the widest of `z_values`.
///
/// `max_size = ceil(clamp(max z + R, 0, input_size))`, extent
/// `2 * max_size + 1`.
pub fn kernel_extent(z_values: &[f64], ramp: usize, input_size: usize) -> Result<usize> {
    let zmax = z_values.iter().copied().reduce(f64::max).ok_or(Error::EmptySpanList)?;
    let reach = (zmax + ramp as f64).max(0.0).min(input_size as f64);
    Ok(2 * reach.ceil() as usize + 1)
}

/// Chebyshev distance of every cell of an `extent x extent` kernel from its
/// center, row-major.
pub fn chebyshev_distances(extent: usize) -> Vec<f64> {
    let c = (extent / 2) as isize;
    (0..extent * extent)
        .map(|i| {
            let (r, s) = ((i / extent) as isize, (i % extent) as isize);
            (r - c).abs().max((s - c).abs()) as f64
        })
        .collect()
}

fn check_odd(extent: usize) -> Result<()> {
    if extent % 2 == 0 {
        return Err(Error::EvenExtent(extent));
    }
    Ok(())
}

#[inline]
fn ramp_value(z: f64, ramp: f64, d: f64) -> f64 {
    (((z + ramp) - d) / ramp).clamp(0.0, 1.0)
}

/// Mask values of one head on a square kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid<T> {
    pub side: usize,
    pub values: Tensor<T>,
}

impl<T: Float> MaskGrid<T> {
    pub fn at(&self, r: usize, s: usize) -> T {
        self.values.at(&[r, s])
    }

    /// Whether every cell is fully on.
    pub fn is_saturated(&self) -> bool {
        self.values.data().iter().all(|&v| v == T::one())
    }
}

pub fn create_adaptive_mask<T: Float>(extent: usize, z: f64, ramp: usize) -> Result<MaskGrid<T>> {
    check_odd(extent)?;
    let r = ramp as f64;
    let values = chebyshev_distances(extent)
        .into_iter()
        .map(|d| T::from_f64(ramp_value(z, r, d)))
        .collect();
    Ok(MaskGrid {
        side: extent,
        values: Tensor::from_vec(&[extent, extent], values)?,
    })
}

/// Analytic `dM/dz`: `1/R` on the open ramp, zero elsewhere.
pub fn mask_span_derivative(extent: usize, z: f64, ramp: usize) -> Result<Tensor<f64>> {
    check_odd(extent)?;
    let r = ramp as f64;
    let values = chebyshev_distances(extent)
        .into_iter()
        .map(|d| {
            let t = ((z + r) - d) / r;
            if t > 0.0 && t < 1.0 {
                1.0 / r
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(&[extent, extent], values)
}

/// One mask per head on a shared kernel extent.
pub fn head_masks<T: Float>(spans: &[SpanParam], shared_extent: usize) -> Result<Vec<MaskGrid<T>>> {
    check_odd(shared_extent)?;
    spans
        .iter()
        .map(|s| {
            // cells at distance >= z + R are zero, so reach is ceil(z + R) - 1
            let reach = (s.z + s.ramp as f64).max(0.0).ceil() as usize;
            let required = 2 * reach.saturating_sub(1) + 1;
            if required > shared_extent {
                return Err(Error::ExtentTooSmall {
                    extent: shared_extent,
                    required,
                });
            }
            create_adaptive_mask(shared_extent, s.z, s.ramp)
        })
        .collect()
}

/// Differentiable masks for a `[heads]` span vector: `[heads, extent²]`.
pub fn span_masks<T: Float>(g: &mut Graph<T>, z: Var, ramp: usize, extent: usize) -> Result<Var> {
    check_odd(extent)?;
    let heads = g.value(z).len();
    let r = T::from_f64(ramp as f64);
    let dist: Vec<T> = chebyshev_distances(extent).into_iter().map(T::from_f64).collect();
    let dist = g.constant(Tensor::from_vec(&[extent * extent], dist)?);
    let zc = g.reshape(z, &[heads, 1])?;
    let shifted = g.add_scalar(zc, r);
    let ramp_in = g.sub(shifted, dist)?;
    let scaled = g.div_scalar(ramp_in, r)?;
    Ok(g.clamp(scaled, 0.0, 1.0))
}
