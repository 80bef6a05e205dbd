//! Frozen differentiable optical flow and the discriminator's motion encoding.

mod horn_schunck;
mod motion;
mod visualize;

pub use horn_schunck::HornSchunck;
pub use motion::flow_to_motion;
pub use visualize::{flow_frame_name, visualize_flow, write_flow_pngs};

use crate::error::Result;
use crate::tensor::{FlowField, VideoTensor};

/// Dense flow between adjacent frames. Implementations have no trainable state
/// and stay differentiable with respect to the input pixels.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, video: &VideoTensor) -> Result<FlowField>;

    /// Number of `estimate` calls made so far.
    fn invocations(&self) -> usize;
}

/// Mean over the central crop that drops `margin` of each border, per pair.
///
/// Returns `[B][T-1]` values of the per-pixel flow magnitude mean.
pub fn interior_mean_magnitude(flow: &FlowField, margin: f64) -> Result<Vec<Vec<f64>>> {
    let (b, p, _, h, w) = flow.tensor().dims5()?;
    let data = flow
        .tensor()
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let (y0, y1) = crop(h, margin);
    let (x0, x1) = crop(w, margin);
    let mut out = vec![vec![0.0; p]; b];
    for (bi, row) in out.iter_mut().enumerate() {
        for (pi, slot) in row.iter_mut().enumerate() {
            let base = (bi * p + pi) * 2 * h * w;
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let u = data[base + y * w + x];
                    let v = data[base + h * w + y * w + x];
                    acc += (u * u + v * v).sqrt();
                }
            }
            *slot = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    Ok(out)
}

/// Half-open index range that keeps the interior after dropping `margin` on each side.
pub fn crop(n: usize, margin: f64) -> (usize, usize) {
    let m = ((n as f64) * margin).round() as usize;
    let m = m.min((n.saturating_sub(1)) / 2);
    (m, n - m)
}
