//! Desk-scale stand-in for the flight keypoint network: a synthetic detector
//! corrupted by a parametric domain-gap model, composed with a small
//! trainable coordinate-refinement MLP whose blobs are re-rendered
//! differentiably. Backprop is analytic; the optimizer is AdamW.
//!
//! The refinement model maps the 2K decoded coordinates (normalized to
//! [-1, 1]) through two tanh hidden layers to additive coordinate
//! corrections. The output layer initializes to zero, so an untrained
//! model passes detections through unchanged.

use crate::geometry::ROI_OUT_SIZE;
use crate::heatmap::{decode_peak, render_blob, HeatmapStack, BLOB_SIGMA, HEATMAP_SIZE};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Crop-to-heatmap coordinate ratio under the aligned-corners convention.
fn heat_per_crop() -> f64 {
    (HEATMAP_SIZE as f64 - 1.0) / (ROI_OUT_SIZE as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// Domain-gap model
// ---------------------------------------------------------------------------

/// Parametric corruption applied to the synthetic detector, standing in for
/// the sim2real degradation of a network trained on synthetic imagery.
/// All pixel quantities are crop-frame pixels.
///
/// The deterministic part has two components: an affine miscalibration of
/// the decoded coordinates about the crop center (anisotropic scale and
/// shear, the signature of a decoder head whose alignment drifted from its
/// training distribution) and a smooth view-dependent per-keypoint bias
/// field. The stochastic part is Gaussian jitter plus occasional
/// uniform-in-disk outliers, and the raw blobs render wider than the
/// nominal sigma.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GapModel {
    /// Amplitude of the smooth view-dependent bias field.
    pub bias_amp: f64,
    /// Spatial frequency of the bias field over the viewing direction.
    pub bias_freq: f64,
    /// Symmetric scale error of the decoded coordinates about the crop
    /// center (fraction).
    pub scale_err: f64,
    /// Anisotropic scale error: +aniso on x, -aniso on y (fraction).
    pub aniso: f64,
    /// Symmetric shear coupling between the axes (fraction).
    pub shear: f64,
    /// Std of zero-mean Gaussian keypoint noise.
    pub noise_sigma: f64,
    /// Probability that a keypoint is additionally displaced as an outlier.
    pub outlier_prob: f64,
    /// Outliers are displaced uniformly within this radius.
    pub outlier_spread: f64,
    /// Blob sigma multiplier (>= 1) for the raw detector output.
    pub blob_sigma_inflation: f64,
}

impl GapModel {
    pub fn zero() -> Self {
        GapModel {
            bias_amp: 0.0,
            bias_freq: 0.0,
            scale_err: 0.0,
            aniso: 0.0,
            shear: 0.0,
            noise_sigma: 0.0,
            outlier_prob: 0.0,
            outlier_spread: 0.0,
            blob_sigma_inflation: 1.0,
        }
    }

    /// Scale the corruption severity; the bias-field frequency is left
    /// untouched so the field shape is comparable across severities.
    pub fn scaled(&self, severity: f64) -> Self {
        GapModel {
            bias_amp: self.bias_amp * severity,
            bias_freq: self.bias_freq,
            scale_err: self.scale_err * severity,
            aniso: self.aniso * severity,
            shear: self.shear * severity,
            noise_sigma: self.noise_sigma * severity,
            outlier_prob: (self.outlier_prob * severity).min(0.5),
            outlier_spread: self.outlier_spread,
            blob_sigma_inflation: 1.0 + (self.blob_sigma_inflation - 1.0) * severity,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bias_amp < 0.0
            || self.noise_sigma < 0.0
            || self.outlier_prob < 0.0
            || self.outlier_spread < 0.0
        {
            return Err("gap model parameters must be nonnegative".into());
        }
        if self.outlier_prob > 0.5 {
            return Err(format!("outlier_prob {} > 0.5 is unidentifiable", self.outlier_prob));
        }
        if self.blob_sigma_inflation < 1.0 {
            return Err("blob_sigma_inflation must be >= 1".into());
        }
        if self.scale_err.abs() > 0.2 || self.aniso.abs() > 0.2 || self.shear.abs() > 0.2 {
            return Err("affine gap terms beyond 20% are outside the model's regime".into());
        }
        Ok(())
    }

    /// Apply the deterministic affine miscalibration to a crop coordinate.
    pub fn affine(&self, p: &[f64; 2]) -> [f64; 2] {
        let half = ROI_OUT_SIZE as f64 / 2.0;
        let dx = p[0] - half;
        let dy = p[1] - half;
        [
            half + (1.0 + self.scale_err + self.aniso) * dx + self.shear * dy,
            half + (1.0 + self.scale_err - self.aniso) * dy + self.shear * dx,
        ]
    }
}

impl Default for GapModel {
    fn default() -> Self {
        GapModel {
            bias_amp: 2.0,
            bias_freq: 1.5,
            scale_err: 0.01,
            aniso: 0.02,
            shear: 0.015,
            noise_sigma: 1.0,
            outlier_prob: 0.05,
            outlier_spread: 30.0,
            blob_sigma_inflation: 1.5,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fixed pseudo-random unit vector for stream `j`; pure function so the
/// bias field is identical across runs and processes.
fn fixed_unit_vector(j: u64) -> Vector3<f64> {
    let mut s = splitmix64(j.wrapping_add(0x5eed));
    let mut next = || {
        s = splitmix64(s);
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    loop {
        let v = Vector3::new(next(), next(), next());
        let n = v.norm();
        if n > 0.1 {
            return v / n;
        }
    }
}

/// Smooth deterministic bias of keypoint `k` as a function of the viewing
/// direction (unit vector, target body frame). Crop pixels.
pub fn bias_field(gap: &GapModel, view_dir: &Vector3<f64>, k: usize) -> [f64; 2] {
    if gap.bias_amp == 0.0 {
        return [0.0, 0.0];
    }
    let u_k = fixed_unit_vector(2 * k as u64);
    let v_k = fixed_unit_vector(2 * k as u64 + 1);
    [
        gap.bias_amp * (gap.bias_freq * view_dir.dot(&u_k)).sin(),
        gap.bias_amp * (gap.bias_freq * view_dir.dot(&v_k)).cos(),
    ]
}

/// Simulated raw detector: renders one blob per keypoint at the corrupted
/// center. Centers are truth (crop pixels) plus the deterministic bias
/// field, Gaussian noise, and occasional uniform-in-disk outlier
/// displacement; blob sigma is inflated by the gap model. Deterministic
/// given the RNG state.
pub fn detect<R: Rng>(
    truth_px: &[[f64; 2]],
    view_dir: &Vector3<f64>,
    gap: &GapModel,
    rng: &mut R,
) -> HeatmapStack {
    let ratio = heat_per_crop();
    let sigma = BLOB_SIGMA * gap.blob_sigma_inflation;
    let mut maps = Vec::with_capacity(truth_px.len());
    for (k, p) in truth_px.iter().enumerate() {
        let warped = gap.affine(p);
        let b = bias_field(gap, view_dir, k);
        let mut c = [warped[0] + b[0], warped[1] + b[1]];
        if gap.noise_sigma > 0.0 {
            c[0] += gap.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            c[1] += gap.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        } else if gap.outlier_prob > 0.0 {
            // Keep the RNG stream layout fixed whether or not noise is on.
            let _: f64 = rng.sample(rand_distr::StandardNormal);
            let _: f64 = rng.sample(rand_distr::StandardNormal);
        }
        if gap.outlier_prob > 0.0 || gap.noise_sigma > 0.0 {
            let draw: f64 = rng.gen();
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius = gap.outlier_spread * rng.gen_range(0.0f64..1.0).sqrt();
            if draw < gap.outlier_prob {
                c[0] += radius * angle.cos();
                c[1] += radius * angle.sin();
            }
        }
        maps.push(render_blob(&[c[0] * ratio, c[1] * ratio], sigma, HEATMAP_SIZE));
    }
    HeatmapStack { maps }
}

// ---------------------------------------------------------------------------
// Refinement model parameters
// ---------------------------------------------------------------------------

/// Architecture of the coordinate-refinement MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub num_keypoints: usize,
    pub hidden: usize,
}

impl PredictorArch {
    pub fn new(num_keypoints: usize) -> Self {
        PredictorArch {
            num_keypoints,
            hidden: 64,
        }
    }

    pub fn in_dim(&self) -> usize {
        2 * self.num_keypoints
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        let (i, h) = (self.in_dim(), self.hidden);
        h * i + h + h * h + h + i * h + i
    }

    // Flat layout: W1 | b1 | W2 | b2 | W3 | b3 (matrices column-major).
    fn offsets(&self) -> [usize; 6] {
        let (i, h) = (self.in_dim(), self.hidden);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + i * h;
        [w1, b1, w2, b2, w3, b3]
    }
}

/// Trainable parameters plus AdamW moment estimates.
#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub arch: PredictorArch,
    pub theta: DVector<f64>,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub step: u64,
}

impl PredictorParams {
    /// Scaled-uniform initialization for the hidden layers, zeros for the
    /// output layer so the model starts as the identity correction.
    pub fn init<R: Rng>(arch: PredictorArch, rng: &mut R) -> Self {
        let p = arch.param_count();
        let mut theta = DVector::zeros(p);
        let [w1, b1, w2, _b2, _w3, _b3] = arch.offsets();
        let (i, h) = (arch.in_dim(), arch.hidden);
        let lim1 = (6.0 / (i + h) as f64).sqrt();
        for t in theta.as_mut_slice()[w1..b1].iter_mut() {
            *t = rng.gen_range(-lim1..lim1);
        }
        let lim2 = (6.0 / (2 * h) as f64).sqrt();
        for t in theta.as_mut_slice()[w2..w2 + h * h].iter_mut() {
            *t = rng.gen_range(-lim2..lim2);
        }
        PredictorParams {
            arch,
            theta,
            m: DVector::zeros(p),
            v: DVector::zeros(p),
            step: 0,
        }
    }

    fn weights(&self) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let [w1, b1, w2, b2, w3, b3] = self.arch.offsets();
        let (i, h) = (self.arch.in_dim(), self.arch.hidden);
        let t = self.theta.as_slice();
        (
            DMatrix::from_column_slice(h, i, &t[w1..b1]),
            DVector::from_column_slice(&t[b1..w2]),
            DMatrix::from_column_slice(h, h, &t[w2..b2]),
            DVector::from_column_slice(&t[b2..w3]),
            DMatrix::from_column_slice(i, h, &t[w3..b3]),
            DVector::from_column_slice(&t[b3..]),
        )
    }

    /// Simple content checksum for no-touch assertions.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0u64;
        for v in self.theta.iter() {
            acc = splitmix64(acc ^ v.to_bits());
        }
        acc
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Activations retained from the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    z0: DVector<f64>,
    h1: DVector<f64>,
    h2: DVector<f64>,
    centers_heat: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct PredictorOutput {
    /// Re-rendered blobs at the corrected coordinates, sigma = 2.
    pub stack: HeatmapStack,
    /// Corrected keypoint coordinates, crop pixels, `x1 y1 ... xK yK`.
    pub coords: DVector<f64>,
    /// Per-keypoint validity inherited from the detector decode.
    pub valid: Vec<bool>,
    pub cache: ForwardCache,
}

/// Run the refinement model on a detected stack. Each map is decoded, the
/// coordinates normalized, corrected by the MLP, and re-rendered as a
/// sigma = 2 blob. Keypoints whose maps fail to decode pass through
/// uncorrected (so they carry no parameter dependence) and are flagged.
pub fn forward(params: &PredictorParams, detected: &HeatmapStack) -> PredictorOutput {
    let k = params.arch.num_keypoints;
    assert_eq!(detected.len(), k, "stack size does not match architecture");
    let half = ROI_OUT_SIZE as f64 / 2.0;
    let ratio = heat_per_crop();

    let mut z0 = DVector::zeros(2 * k);
    let mut valid = vec![false; k];
    for (i, map) in detected.maps.iter().enumerate() {
        let crop = match decode_peak(map) {
            Ok((loc, _)) => {
                valid[i] = true;
                [loc[0] / ratio, loc[1] / ratio]
            }
            Err(_) => [half, half], // crop center placeholder
        };
        z0[2 * i] = crop[0] / half - 1.0;
        z0[2 * i + 1] = crop[1] / half - 1.0;
    }

    let (w1, b1, w2, b2, w3, b3) = params.weights();
    let h1 = (&w1 * &z0 + &b1).map(f64::tanh);
    let h2 = (&w2 * &h1 + &b2).map(f64::tanh);
    let corr = &w3 * &h2 + &b3;

    let mut coords = DVector::zeros(2 * k);
    let mut centers_heat = Vec::with_capacity(k);
    let mut maps = Vec::with_capacity(k);
    for i in 0..k {
        let out_norm = if valid[i] {
            [z0[2 * i] + corr[2 * i], z0[2 * i + 1] + corr[2 * i + 1]]
        } else {
            [z0[2 * i], z0[2 * i + 1]]
        };
        let crop = [(out_norm[0] + 1.0) * half, (out_norm[1] + 1.0) * half];
        coords[2 * i] = crop[0];
        coords[2 * i + 1] = crop[1];
        let heat = [crop[0] * ratio, crop[1] * ratio];
        maps.push(render_blob(&heat, BLOB_SIGMA, HEATMAP_SIZE));
        centers_heat.push(heat);
    }

    PredictorOutput {
        stack: HeatmapStack { maps },
        coords,
        valid,
        cache: ForwardCache {
            z0,
            h1,
            h2,
            centers_heat,
        },
    }
}

/// Exact gradient of [`crate::heatmap::mse_loss`] between the rendered
/// output stack and a pseudo-label stack with respect to the flat
/// parameter vector.
pub fn backward(params: &PredictorParams, out: &PredictorOutput, pl: &HeatmapStack) -> DVector<f64> {
    let k = params.arch.num_keypoints;
    assert_eq!(pl.len(), k, "pseudo-label stack size mismatch");
    let half = ROI_OUT_SIZE as f64 / 2.0;
    let ratio = heat_per_crop();
    let inv_sig2 = 1.0 / (BLOB_SIGMA * BLOB_SIGMA);
    let scale_k = 2.0 / k as f64;

    // Loss gradient w.r.t. the corrected normalized coordinates. Invalid
    // keypoints carry no parameter dependence, so their rows stay zero.
    let mut delta3 = DVector::zeros(2 * k);
    for i in 0..k {
        if !out.valid[i] {
            continue;
        }
        let map = &out.stack.maps[i];
        let target = &pl.maps[i];
        let c = out.cache.centers_heat[i];
        let size = map.size();
        let (mut gx, mut gy) = (0.0, 0.0);
        for v in 0..size {
            let dy = v as f64 - c[1];
            for u in 0..size {
                let val = map.get(u, v);
                let resid = scale_k * (val - target.get(u, v)) * val * inv_sig2;
                gx += resid * (u as f64 - c[0]);
                gy += resid * dy;
            }
        }
        // Chain: heatmap px <- crop px <- normalized coordinate.
        delta3[2 * i] = gx * ratio * half;
        delta3[2 * i + 1] = gy * ratio * half;
    }

    let (_w1, _b1, w2, _b2, w3, _b3) = params.weights();
    let h1 = &out.cache.h1;
    let h2 = &out.cache.h2;
    let z0 = &out.cache.z0;

    let grad_w3 = &delta3 * h2.transpose();
    let grad_b3 = delta3.clone();
    let mut delta2 = w3.transpose() * &delta3;
    for (d, h) in delta2.iter_mut().zip(h2.iter()) {
        *d *= 1.0 - h * h;
    }
    let grad_w2 = &delta2 * h1.transpose();
    let grad_b2 = delta2.clone();
    let mut delta1 = w2.transpose() * &delta2;
    for (d, h) in delta1.iter_mut().zip(h1.iter()) {
        *d *= 1.0 - h * h;
    }
    let grad_w1 = &delta1 * z0.transpose();
    let grad_b1 = delta1;

    let mut grad = DVector::zeros(params.arch.param_count());
    let [w1o, b1o, w2o, b2o, w3o, b3o] = params.arch.offsets();
    grad.as_mut_slice()[w1o..b1o].copy_from_slice(grad_w1.as_slice());
    grad.as_mut_slice()[b1o..w2o].copy_from_slice(grad_b1.as_slice());
    grad.as_mut_slice()[w2o..b2o].copy_from_slice(grad_w2.as_slice());
    grad.as_mut_slice()[b2o..w3o].copy_from_slice(grad_b2.as_slice());
    grad.as_mut_slice()[w3o..b3o].copy_from_slice(grad_w3.as_slice());
    grad.as_mut_slice()[b3o..].copy_from_slice(grad_b3.as_slice());
    grad
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW step: exponential moving moments with bias correction, then
/// `theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta` with the
/// weight decay decoupled from the adaptive update.
pub fn optimizer_step(params: &mut PredictorParams, grad: &DVector<f64>, lr: f64, wd: f64) {
    assert_eq!(grad.len(), params.theta.len());
    params.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(params.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(params.step as i32);
    for i in 0..params.theta.len() {
        let g = grad[i];
        params.m[i] = ADAM_BETA1 * params.m[i] + (1.0 - ADAM_BETA1) * g;
        params.v[i] = ADAM_BETA2 * params.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = params.m[i] / bc1;
        let v_hat = params.v[i] / bc2;
        params.theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * wd * params.theta[i];
    }
    assert!(
        params.theta.iter().all(|t| t.is_finite()),
        "non-finite parameters after optimizer step {}",
        params.step
    );
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Write parameters and optimizer state: u32 header (K, hidden, P), then
/// step as u64, then theta | m | v as little-endian f64.
pub fn save_checkpoint<W: Write>(params: &PredictorParams, out: &mut W) -> std::io::Result<()> {
    out.write_all(&(params.arch.num_keypoints as u32).to_le_bytes())?;
    out.write_all(&(params.arch.hidden as u32).to_le_bytes())?;
    out.write_all(&(params.arch.param_count() as u32).to_le_bytes())?;
    out.write_all(&params.step.to_le_bytes())?;
    for field in [&params.theta, &params.m, &params.v] {
        for v in field.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(input: &mut R) -> std::io::Result<PredictorParams> {
    let mut hdr = [0u8; 20];
    input.read_exact(&mut hdr)?;
    let k = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
    let p = u32::from_le_bytes(hdr[8..12].try_into().unwrap()) as usize;
    let step = u64::from_le_bytes(hdr[12..20].try_into().unwrap());
    let arch = PredictorArch {
        num_keypoints: k,
        hidden,
    };
    if arch.param_count() != p {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("checkpoint declares {} params, architecture implies {}", p, arch.param_count()),
        ));
    }
    let mut read_vec = |n: usize| -> std::io::Result<DVector<f64>> {
        let mut buf = vec![0u8; 8 * n];
        input.read_exact(&mut buf)?;
        Ok(DVector::from_iterator(
            n,
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        ))
    };
    let theta = read_vec(p)?;
    let m = read_vec(p)?;
    let v = read_vec(p)?;
    Ok(PredictorParams {
        arch,
        theta,
        m,
        v,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::mse_loss;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn truth_points(k: usize) -> Vec<[f64; 2]> {
        (0..k)
            .map(|i| {
                let a = i as f64 / k as f64 * std::f64::consts::TAU;
                [128.0 + 70.0 * a.cos(), 128.0 + 55.0 * a.sin()]
            })
            .collect()
    }

    #[test]
    fn zero_gap_detector_hits_truth() {
        let truth = truth_points(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = detect(&truth, &Vector3::z(), &GapModel::zero(), &mut rng);
        let ratio = heat_per_crop();
        for (k, p) in truth.iter().enumerate() {
            let (loc, peak) = decode_peak(&stack.maps[k]).unwrap();
            assert!((loc[0] / ratio - p[0]).abs() < 0.25, "x error");
            assert!((loc[1] / ratio - p[1]).abs() < 0.25, "y error");
            // Sampled Gaussian: max pixel is within half a pixel of the
            // center, so the peak is at least exp(-0.5^2 * 2 / (2 sigma^2)).
            assert!(peak > (-0.0625f64).exp() - 1e-9, "peak {peak}");
        }
    }

    #[test]
    fn bias_only_detector_offsets_by_field() {
        let truth = truth_points(6);
        let gap = GapModel {
            bias_amp: 3.0,
            bias_freq: 2.0,
            ..GapModel::zero()
        };
        let dir = Vector3::new(0.2, -0.5, 0.84).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = detect(&truth, &dir, &gap, &mut rng);
        let ratio = heat_per_crop();
        for (k, p) in truth.iter().enumerate() {
            let b = bias_field(&gap, &dir, k);
            assert!(b[0].abs() <= 3.0 + 1e-12 && b[1].abs() <= 3.0 + 1e-12);
            let (loc, _) = decode_peak(&stack.maps[k]).unwrap();
            assert!((loc[0] / ratio - (p[0] + b[0])).abs() < 0.25);
            assert!((loc[1] / ratio - (p[1] + b[1])).abs() < 0.25);
        }
    }

    #[test]
    fn outlier_rate_monte_carlo() {
        let gap = GapModel {
            noise_sigma: 1.0,
            outlier_prob: 0.10,
            outlier_spread: 30.0,
            ..GapModel::zero()
        };
        let truth = vec![[128.0, 128.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ratio = heat_per_crop();
        let mut displaced = 0usize;
        let n = 1000;
        for _ in 0..n {
            let stack = detect(&truth, &Vector3::z(), &gap, &mut rng);
            let (loc, _) = decode_peak(&stack.maps[0]).unwrap();
            let d = ((loc[0] / ratio - 128.0).powi(2) + (loc[1] / ratio - 128.0).powi(2)).sqrt();
            if d > 3.0 * gap.noise_sigma {
                displaced += 1;
            }
        }
        let rate = displaced as f64 / n as f64;
        assert!((rate - 0.10).abs() < 0.025, "outlier rate {rate}");
    }

    #[test]
    fn detect_is_deterministic() {
        let truth = truth_points(11);
        let gap = GapModel::default();
        let a = detect(
            &truth,
            &Vector3::x(),
            &gap,
            &mut ChaCha8Rng::seed_from_u64(42),
        );
        let b = detect(
            &truth,
            &Vector3::x(),
            &gap,
            &mut ChaCha8Rng::seed_from_u64(42),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn zero_init_is_identity_correction() {
        let truth = truth_points(11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let detected = detect(&truth, &Vector3::z(), &GapModel::zero(), &mut rng);
        let params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        let out = forward(&params, &detected);
        let ratio = heat_per_crop();
        for (k, map) in detected.maps.iter().enumerate() {
            let (loc, _) = decode_peak(map).unwrap();
            assert_relative_eq!(out.coords[2 * k], loc[0] / ratio, epsilon = 1e-12);
            assert_relative_eq!(out.coords[2 * k + 1], loc[1] / ratio, epsilon = 1e-12);
        }
    }

    #[test]
    fn output_stack_peaks_at_corrected_coords() {
        let truth = truth_points(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let detected = detect(&truth, &Vector3::z(), &GapModel::default(), &mut rng);
        let mut params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        // Perturb the output layer so corrections are nonzero.
        let [_, _, _, _, w3o, _] = params.arch.offsets();
        for t in params.theta.as_mut_slice()[w3o..].iter_mut() {
            *t = 0.002;
        }
        let out = forward(&params, &detected);
        let ratio = heat_per_crop();
        for k in 0..11 {
            let (loc, _) = decode_peak(&out.stack.maps[k]).unwrap();
            assert!((loc[0] - out.coords[2 * k] * ratio).abs() < 0.05);
            assert!((loc[1] - out.coords[2 * k + 1] * ratio).abs() < 0.05);
        }
    }

    #[test]
    fn gradient_zero_at_minimum() {
        let truth = truth_points(11);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let detected = detect(&truth, &Vector3::z(), &GapModel::default(), &mut rng);
        let params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        let out = forward(&params, &detected);
        let grad = backward(&params, &out, &out.stack);
        assert!(grad.amax() < 1e-12, "grad at minimum {}", grad.amax());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let truth = truth_points(11);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gap = GapModel::default();
        let detected = detect(&truth, &Vector3::z(), &gap, &mut rng);
        let mut params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        // Non-trivial output layer so all layers contribute.
        let p = params.arch.param_count();
        for i in 0..p {
            params.theta[i] += 0.01 * ((i as f64 * 0.7).sin());
        }
        let pl_truth: Vec<_> = truth
            .iter()
            .map(|c| render_blob(&[c[0] * heat_per_crop(), c[1] * heat_per_crop()], BLOB_SIGMA, HEATMAP_SIZE))
            .collect();
        let pl = HeatmapStack { maps: pl_truth };

        let out = forward(&params, &detected);
        let grad = backward(&params, &out, &pl);

        use rand::Rng as _;
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let i = rng.gen_range(0..p);
            let mut plus = params.clone();
            plus.theta[i] += h;
            let mut minus = params.clone();
            minus.theta[i] -= h;
            let fd = (mse_loss(&forward(&plus, &detected).stack, &pl)
                - mse_loss(&forward(&minus, &detected).stack, &pl))
                / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst:e}");
    }

    #[test]
    fn descent_step_decreases_loss() {
        let truth = truth_points(11);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let detected = detect(&truth, &Vector3::z(), &GapModel::default(), &mut rng);
        let mut params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        let pl = HeatmapStack {
            maps: truth
                .iter()
                .map(|c| render_blob(&[c[0] * heat_per_crop(), c[1] * heat_per_crop()], BLOB_SIGMA, HEATMAP_SIZE))
                .collect(),
        };
        let out = forward(&params, &detected);
        let before = mse_loss(&out.stack, &pl);
        let grad = backward(&params, &out, &pl);
        params.theta -= 1e-3 * &grad / grad.norm().max(1e-12);
        let after = mse_loss(&forward(&params, &detected).stack, &pl);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn adamw_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = PredictorParams::init(PredictorArch::new(4), &mut rng);
        let p = params.arch.param_count();

        // Zero grad, zero decay: no-op.
        let before = params.theta.clone();
        optimizer_step(&mut params, &DVector::zeros(p), 1e-3, 0.0);
        assert_eq!(params.theta, before);

        // First bias-corrected step with constant gradient ~ -lr*sign(g).
        let mut params = PredictorParams::init(PredictorArch::new(4), &mut rng);
        let g = DVector::from_element(p, 0.25);
        let before = params.theta.clone();
        optimizer_step(&mut params, &g, 1e-3, 0.0);
        let delta = &params.theta - &before;
        for d in delta.iter() {
            assert_relative_eq!(*d, -1e-3 * 0.25 / (0.25 + ADAM_EPS), epsilon = 1e-9);
        }

        // Pure decoupled decay shrinks parameters by (1 - lr*wd).
        let mut params = PredictorParams::init(PredictorArch::new(4), &mut rng);
        let before = params.theta.clone();
        optimizer_step(&mut params, &DVector::zeros(p), 1e-2, 0.1);
        assert_relative_eq!(params.theta, before * (1.0 - 1e-2 * 0.1), epsilon = 1e-12);
    }

    #[test]
    fn overfits_constant_bias_on_fixed_input() {
        let truth = truth_points(11);
        let gap = GapModel {
            bias_amp: 4.0,
            bias_freq: 1.5,
            ..GapModel::zero()
        };
        let dir = Vector3::new(0.3, 0.1, 0.95).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let detected = detect(&truth, &dir, &gap, &mut rng);
        let pl = HeatmapStack {
            maps: truth
                .iter()
                .map(|c| render_blob(&[c[0] * heat_per_crop(), c[1] * heat_per_crop()], BLOB_SIGMA, HEATMAP_SIZE))
                .collect(),
        };
        let mut params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        for _ in 0..500 {
            let out = forward(&params, &detected);
            let grad = backward(&params, &out, &pl);
            optimizer_step(&mut params, &grad, 5e-3, 0.0);
        }
        let out = forward(&params, &detected);
        for (k, c) in truth.iter().enumerate() {
            assert!(
                (out.coords[2 * k] - c[0]).abs() < 0.5 && (out.coords[2 * k + 1] - c[1]).abs() < 0.5,
                "keypoint {k} residual ({}, {})",
                out.coords[2 * k] - c[0],
                out.coords[2 * k + 1] - c[1]
            );
        }
    }

    #[test]
    fn param_count_stable() {
        let arch = PredictorArch::new(11);
        assert_eq!(arch.param_count(), 64 * 22 + 64 + 64 * 64 + 64 + 22 * 64 + 22);
        assert_eq!(arch.param_count(), 7062);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = PredictorParams::init(PredictorArch::new(11), &mut rng);
        params.step = 17;
        params.m[3] = 0.5;
        params.v[9] = 0.25;
        let mut buf = Vec::new();
        save_checkpoint(&params, &mut buf).unwrap();
        let back = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.arch, params.arch);
        assert_eq!(back.step, 17);
        assert_eq!(back.theta, params.theta);
        assert_eq!(back.m, params.m);
        assert_eq!(back.v, params.v);
    }
}
