//! Keypoint heatmaps: Gaussian blob rendering, sub-pixel peak decoding,
//! spread covariance extraction and the heatmap MSE loss.
//!
//! All per-map operations work in heatmap pixel units (64x64 grid, pixel
//! centers at integer coordinates). [`measure`] converts decoded locations
//! and covariances into crop-frame pixels with the alignment convention
//! scale `(out_size - 1) / (heatmap_size - 1)`.

use crate::geometry::Roi;
use nalgebra::{DVector, Matrix2};
use std::io::{Read, Write};
use thiserror::Error;

/// Heatmap side length: 256-pixel crop at 1/4 resolution.
pub const HEATMAP_SIZE: usize = 64;

/// Ground-truth and pseudo-label blobs use this standard deviation,
/// heatmap pixels.
pub const BLOB_SIGMA: f64 = 2.0;

/// Peaks below this intensity are treated as missing detections.
pub const FLAT_PEAK_FLOOR: f64 = 1e-3;

/// Additive covariance floor applied when assembling measurement noise,
/// crop-frame pix^2. Keeps R invertible for single-pixel spikes.
pub const COV_FLOOR_PX2: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum HeatmapError {
    #[error("flat map: peak intensity {peak:.2e} below floor")]
    FlatMap { peak: f64 },
    #[error("zero mass: total intensity {total:.2e} below floor")]
    ZeroMass { total: f64 },
    #[error("shape mismatch: {0} vs {1} maps")]
    ShapeMismatch(usize, usize),
}

/// Single-channel intensity map, row-major, intensities >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    data: Vec<f64>,
    size: usize,
}

impl Heatmap {
    pub fn zeros(size: usize) -> Self {
        Heatmap {
            data: vec![0.0; size * size],
            size,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.size + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f64) {
        self.data[v * self.size + u] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Stack of K heatmaps; the measurement carrier of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub maps: Vec<Heatmap>,
}

impl HeatmapStack {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Stacked keypoint measurement in crop-frame pixels: coordinates ordered
/// `x1 y1 ... xK yK`, one 2x2 covariance per keypoint, and validity flags.
/// Invalid keypoints are flagged rather than dropped so the 2D-3D
/// correspondence by index is preserved.
#[derive(Debug, Clone)]
pub struct KeypointMeasurement {
    pub y: DVector<f64>,
    pub cov: Vec<Matrix2<f64>>,
    pub valid: Vec<bool>,
}

impl KeypointMeasurement {
    pub fn num_keypoints(&self) -> usize {
        self.valid.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.y[2 * k], self.y[2 * k + 1]]
    }
}

/// Scale from heatmap pixels to crop pixels, (out_size - 1)/(size - 1).
pub fn decode_scale(roi: &Roi, map_size: usize) -> f64 {
    (roi.out_size as f64 - 1.0) / (map_size as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Render a Gaussian blob `exp(-((u-cx)^2+(v-cy)^2)/(2 sigma^2))` sampled at
/// pixel centers. Centers outside the map are allowed and produce the
/// truncated tail.
pub fn render_blob(center: &[f64; 2], sigma: f64, size: usize) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut map = Heatmap::zeros(size);
    for v in 0..size {
        let dy = v as f64 - center[1];
        let row = v * size;
        for u in 0..size {
            let dx = u as f64 - center[0];
            map.data[row + u] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Sub-pixel peak location (heatmap pixels) and peak intensity.
///
/// Quadratic refinement of the log intensity on the 3x3 neighborhood of the
/// argmax; exact for an untruncated Gaussian. Falls back to the integer
/// location on an axis when the argmax touches the border or the local
/// curvature degenerates.
pub fn decode_peak(map: &Heatmap) -> Result<([f64; 2], f64), HeatmapError> {
    let size = map.size();
    let mut peak = f64::NEG_INFINITY;
    let (mut pu, mut pv) = (0usize, 0usize);
    for v in 0..size {
        for u in 0..size {
            let val = map.get(u, v);
            if val > peak {
                peak = val;
                pu = u;
                pv = v;
            }
        }
    }
    if !(peak >= FLAT_PEAK_FLOOR) {
        return Err(HeatmapError::FlatMap { peak });
    }

    let ln = |x: f64| x.max(1e-300).ln();
    let refine = |m1: f64, m0: f64, p1: f64| -> f64 {
        let denom = ln(m1) - 2.0 * ln(m0) + ln(p1);
        if denom >= -1e-12 {
            return 0.0; // not a proper local max in log space
        }
        let delta = 0.5 * (ln(m1) - ln(p1)) / denom;
        delta.clamp(-0.5, 0.5)
    };

    let mut loc = [pu as f64, pv as f64];
    if pu > 0 && pu + 1 < size {
        loc[0] += refine(map.get(pu - 1, pv), peak, map.get(pu + 1, pv));
    }
    if pv > 0 && pv + 1 < size {
        loc[1] += refine(map.get(pu, pv - 1), peak, map.get(pu, pv + 1));
    }
    Ok((loc, peak))
}

// ---------------------------------------------------------------------------
// Spread covariance
// ---------------------------------------------------------------------------

/// Second-moment covariance of the map's intensity about `loc`, weights
/// normalized to sum to one over the whole map. Heatmap pix^2; symmetric
/// positive semidefinite for any nonnegative map.
pub fn spread_covariance(map: &Heatmap, loc: &[f64; 2]) -> Result<Matrix2<f64>, HeatmapError> {
    let size = map.size();
    let mut total = 0.0;
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for v in 0..size {
        let dy = v as f64 - loc[1];
        for u in 0..size {
            let w = map.get(u, v);
            let dx = u as f64 - loc[0];
            total += w;
            cxx += w * dx * dx;
            cxy += w * dx * dy;
            cyy += w * dy * dy;
        }
    }
    if total < 1e-9 {
        return Err(HeatmapError::ZeroMass { total });
    }
    Ok(Matrix2::new(cxx, cxy, cxy, cyy) / total)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean over keypoints of the squared Frobenius distance between predicted
/// and target heatmaps.
pub fn mse_loss(pred: &HeatmapStack, target: &HeatmapStack) -> f64 {
    assert_eq!(pred.len(), target.len(), "stack sizes must match");
    let mut total = 0.0;
    for (p, t) in pred.maps.iter().zip(&target.maps) {
        assert_eq!(p.size(), t.size(), "map sizes must match");
        total += p
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / pred.len() as f64
}

// ---------------------------------------------------------------------------
// Measurement extraction
// ---------------------------------------------------------------------------

/// Decode every map of the stack into a stacked keypoint measurement in
/// crop-frame pixels. Per-keypoint failures (flat maps, zero mass) set the
/// validity flag instead of erroring; indices are preserved.
pub fn measure(stack: &HeatmapStack, roi: &Roi) -> KeypointMeasurement {
    let k = stack.len();
    let mut y = DVector::zeros(2 * k);
    let mut cov = vec![Matrix2::identity(); k];
    let mut valid = vec![false; k];
    for (i, map) in stack.maps.iter().enumerate() {
        let scale = decode_scale(roi, map.size());
        let Ok((loc, _peak)) = decode_peak(map) else {
            continue;
        };
        let Ok(sigma) = spread_covariance(map, &loc) else {
            continue;
        };
        y[2 * i] = loc[0] * scale;
        y[2 * i + 1] = loc[1] * scale;
        cov[i] = sigma * scale * scale + Matrix2::identity() * COV_FLOOR_PX2;
        valid[i] = true;
    }
    KeypointMeasurement { y, cov, valid }
}

// ---------------------------------------------------------------------------
// Binary serialization (debugging and golden tests)
// ---------------------------------------------------------------------------

/// Write the stack as little-endian f32 with a (K, H, W) u32 header.
pub fn write_stack<W: Write>(stack: &HeatmapStack, out: &mut W) -> std::io::Result<()> {
    let size = stack.maps.first().map_or(HEATMAP_SIZE, |m| m.size());
    out.write_all(&(stack.len() as u32).to_le_bytes())?;
    out.write_all(&(size as u32).to_le_bytes())?;
    out.write_all(&(size as u32).to_le_bytes())?;
    for map in &stack.maps {
        for &v in map.as_slice() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_stack<R: Read>(input: &mut R) -> std::io::Result<HeatmapStack> {
    let mut hdr = [0u8; 12];
    input.read_exact(&mut hdr)?;
    let k = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(hdr[8..12].try_into().unwrap()) as usize;
    if h != w {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "non-square heatmaps unsupported",
        ));
    }
    let mut maps = Vec::with_capacity(k);
    let mut buf = vec![0u8; 4 * h * w];
    for _ in 0..k {
        input.read_exact(&mut buf)?;
        let mut map = Heatmap::zeros(h);
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            map.as_mut_slice()[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        maps.push(map);
    }
    Ok(HeatmapStack { maps })
}
