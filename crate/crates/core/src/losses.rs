//! The training objective: L1, SSIM, volume regularization, the
//! frequency-pyramid high-pass regularizer, and their weighted total, plus
//! the PSNR/SSIM evaluation metrics. Every term that feeds the optimizer
//! comes with an analytic gradient w.r.t. the rendered pixels (and, for
//! the volume term, the Gaussian scales).

use nalgebra::Vector3;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::img::{downsample_half, downsample_half_adjoint, ImageBuf};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {2}x{2} SSIM window")]
    ImageTooSmall(usize, usize, usize),
}

/// Scale set, per-scale weights, and high-pass cutoff for the frequency
/// pyramid, plus the iteration window in which the term is active.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyPyramidConfig {
    /// Downsample factors; each must be a power of 1/2.
    pub scales: Vec<f64>,
    /// Per-scale weights, same length as `scales`.
    pub weights: Vec<f64>,
    /// High-pass cutoff as a fraction of Nyquist, in (0, 1).
    pub cutoff: f64,
    /// Inclusive iteration window `[start, end]` in which the term is
    /// active.
    pub active_window: (u64, u64),
}

impl Default for FrequencyPyramidConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 0.5, 0.25],
            weights: vec![1.0, 1.0, 1.0],
            cutoff: 0.15,
            active_window: (3000, 15000),
        }
    }
}

impl FrequencyPyramidConfig {
    pub fn active_at(&self, iter: u64) -> bool {
        iter >= self.active_window.0 && iter <= self.active_window.1
    }

    /// Number of factor-2 halvings for each scale entry.
    fn halvings(&self) -> Vec<u32> {
        self.scales
            .iter()
            .map(|&s| {
                assert!(s > 0.0 && s <= 1.0, "scale factor out of range: {s}");
                let h = (1.0 / s).log2();
                let r = h.round();
                assert!((h - r).abs() < 1e-9, "scale factor {s} is not a power of 1/2");
                r as u32
            })
            .collect()
    }
}

/// Mixing weights of the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// SSIM mix: total uses (1-lambda) L1 + lambda (1-SSIM).
    pub lambda: f64,
    pub lambda_vol: f64,
    pub lambda_hf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            lambda_vol: 0.01,
            lambda_hf: 0.01,
        }
    }
}

fn check_shapes(a: &ImageBuf, b: &ImageBuf) -> Result<(), LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(render: &ImageBuf, gt: &ImageBuf) -> Result<f64, LossError> {
    check_shapes(render, gt)?;
    let n = render.data.len() as f64;
    Ok(render
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// L1 plus its gradient w.r.t. the render. The subgradient at exact
/// equality is zero.
pub fn l1_loss_with_grad(render: &ImageBuf, gt: &ImageBuf) -> Result<(f64, ImageBuf), LossError> {
    check_shapes(render, gt)?;
    let n = render.data.len() as f64;
    let mut grad = ImageBuf::zeros(render.width, render.height);
    let mut sum = 0.0;
    for (i, (a, b)) in render.data.iter().zip(&gt.data).enumerate() {
        let d = a - b;
        sum += d.abs();
        grad.data[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Separable valid-region windowed mean: output is (h-10) x (w-10).
fn window_mean(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let g = ssim_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                acc += gi * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                acc += gi * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`window_mean`]: spreads a valid-region field back onto the
/// source grid.
fn window_spread(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let g = ssim_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (i, gi) in g.iter().enumerate() {
                tmp[(y + i) * ow + x] += gi * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (i, gi) in g.iter().enumerate() {
                out[y * w + x + i] += gi * v;
            }
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), standard
/// stability constants on unit dynamic range, averaged per channel over
/// the valid region.
pub fn ssim(render: &ImageBuf, gt: &ImageBuf) -> Result<f64, LossError> {
    Ok(ssim_impl(render, gt, false)?.0)
}

/// SSIM plus its gradient w.r.t. the render pixels.
pub fn ssim_with_grad(render: &ImageBuf, gt: &ImageBuf) -> Result<(f64, ImageBuf), LossError> {
    let (v, g) = ssim_impl(render, gt, true)?;
    Ok((v, g.unwrap()))
}

fn ssim_impl(
    render: &ImageBuf,
    gt: &ImageBuf,
    with_grad: bool,
) -> Result<(f64, Option<ImageBuf>), LossError> {
    check_shapes(render, gt)?;
    let (w, h) = (render.width, render.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(LossError::ImageTooSmall(w, h, SSIM_WINDOW));
    }
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let count = (ow * oh * 3) as f64;

    let mut total = 0.0;
    let mut grad = if with_grad {
        Some(ImageBuf::zeros(w, h))
    } else {
        None
    };

    for c in 0..3 {
        let x = render.channel(c);
        let y = gt.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = window_mean(&x, w, h);
        let my = window_mean(&y, w, h);
        let exx = window_mean(&xx, w, h);
        let eyy = window_mean(&yy, w, h);
        let exy = window_mean(&xy, w, h);

        let mut d_mx = vec![0.0; ow * oh];
        let mut d_exx = vec![0.0; ow * oh];
        let mut d_exy = vec![0.0; ow * oh];

        for i in 0..ow * oh {
            let (mux, muy) = (mx[i], my[i]);
            let sx = exx[i] - mux * mux;
            let sy = eyy[i] - muy * muy;
            let sxy = exy[i] - mux * muy;
            let a1 = 2.0 * mux * muy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mux * mux + muy * muy + SSIM_C1;
            let b2 = sx + sy + SSIM_C2;
            total += (a1 * a2) / (b1 * b2);

            if with_grad {
                let ds_dmux =
                    2.0 * muy * a2 / (b1 * b2) - 2.0 * mux * a1 * a2 / (b1 * b1 * b2);
                let ds_dsx = -a1 * a2 / (b1 * b2 * b2);
                let ds_dsxy = 2.0 * a1 / (b1 * b2);
                d_mx[i] = ds_dmux - 2.0 * mux * ds_dsx - muy * ds_dsxy;
                d_exx[i] = ds_dsx;
                d_exy[i] = ds_dsxy;
            }
        }

        if let Some(gimg) = grad.as_mut() {
            let s_mx = window_spread(&d_mx, w, h);
            let s_exx = window_spread(&d_exx, w, h);
            let s_exy = window_spread(&d_exy, w, h);
            for i in 0..w * h {
                let g = (s_mx[i] + 2.0 * x[i] * s_exx[i] + y[i] * s_exy[i]) / count;
                gimg.data[i * 3 + c] = g;
            }
        }
    }

    Ok((total / count, grad))
}

/// Sum of per-Gaussian scale products over the active set.
pub fn volume_loss(scales: &[Vector3<f64>]) -> f64 {
    scales.iter().map(|s| s.x * s.y * s.z).sum()
}

/// Volume regularizer plus its gradient w.r.t. each scale vector.
pub fn volume_loss_with_grad(scales: &[Vector3<f64>]) -> (f64, Vec<Vector3<f64>>) {
    let mut grads = Vec::with_capacity(scales.len());
    let mut total = 0.0;
    for s in scales {
        total += s.x * s.y * s.z;
        grads.push(Vector3::new(s.y * s.z, s.x * s.z, s.x * s.y));
    }
    (total, grads)
}

/// Unnormalized forward 2D DFT of a real channel, rows first then columns.
pub fn dft2(data: &[f64], w: usize, h: usize) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let complex: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2_with(&mut planner, &complex, w, h)
}

fn fft2_with(
    planner: &mut FftPlanner<f64>,
    data: &[Complex<f64>],
    w: usize,
    h: usize,
) -> Vec<Complex<f64>> {
    assert_eq!(data.len(), w * h);
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf = data.to_vec();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

/// Ideal (hard) radial high-pass mask: true where the bin passes. The
/// centered frequency of each axis is normalized by its Nyquist bin, and
/// bins with radial distance below `cutoff` are zeroed (DC always is).
pub fn high_pass_mask(w: usize, h: usize, cutoff: f64) -> Vec<bool> {
    assert!(cutoff > 0.0 && cutoff < 1.0, "cutoff must be in (0,1)");
    let mut mask = vec![false; w * h];
    for v in 0..h {
        let fy = if v <= h / 2 { v as f64 } else { v as f64 - h as f64 };
        let ny = fy / (h as f64 / 2.0);
        for u in 0..w {
            let fx = if u <= w / 2 { u as f64 } else { u as f64 - w as f64 };
            let nx = fx / (w as f64 / 2.0);
            mask[v * w + u] = (nx * nx + ny * ny).sqrt() >= cutoff;
        }
    }
    mask
}

/// High-pass-filtered spectrum of one channel: the 2D DFT with all bins
/// below the cutoff radius zeroed, unit gain elsewhere.
pub fn high_pass_spectrum(data: &[f64], w: usize, h: usize, cutoff: f64) -> Vec<Complex<f64>> {
    let mask = high_pass_mask(w, h, cutoff);
    let mut spec = dft2(data, w, h);
    for (s, m) in spec.iter_mut().zip(&mask) {
        if !m {
            *s = Complex::new(0.0, 0.0);
        }
    }
    spec
}

/// Frequency-pyramid high-pass loss. For each scale both images are
/// bilinearly reduced, the per-channel high-pass spectra are differenced,
/// and the complex magnitudes accumulate weighted by lambda_s over the
/// pixel count at that scale. Scales whose reduced image would drop below
/// 4x4 are skipped with a warning.
pub fn frequency_pyramid_loss(
    render: &ImageBuf,
    gt: &ImageBuf,
    cfg: &FrequencyPyramidConfig,
) -> Result<f64, LossError> {
    Ok(fpr_impl(render, gt, cfg, false)?.0)
}

/// Frequency-pyramid loss plus its gradient w.r.t. the render pixels,
/// differentiable through the DFT and the bilinear reduction.
pub fn frequency_pyramid_loss_with_grad(
    render: &ImageBuf,
    gt: &ImageBuf,
    cfg: &FrequencyPyramidConfig,
) -> Result<(f64, ImageBuf), LossError> {
    let (v, g) = fpr_impl(render, gt, cfg, true)?;
    Ok((v, g.unwrap()))
}

fn fpr_impl(
    render: &ImageBuf,
    gt: &ImageBuf,
    cfg: &FrequencyPyramidConfig,
    with_grad: bool,
) -> Result<(f64, Option<ImageBuf>), LossError> {
    check_shapes(render, gt)?;
    assert_eq!(cfg.scales.len(), cfg.weights.len(), "scale/weight length mismatch");
    let halvings = cfg.halvings();
    let mut planner = FftPlanner::new();
    let mut total = 0.0;
    let mut grad = if with_grad {
        Some(ImageBuf::zeros(render.width, render.height))
    } else {
        None
    };

    for (&levels, &lambda_s) in halvings.iter().zip(&cfg.weights) {
        // Reduce both images, remembering the shape chain for the adjoint.
        let mut r = render.clone();
        let mut g = gt.clone();
        let mut shapes = vec![(r.width, r.height)];
        let mut degenerate = false;
        for _ in 0..levels {
            if r.width / 2 < 4 || r.height / 2 < 4 {
                degenerate = true;
                break;
            }
            r = downsample_half(&r);
            g = downsample_half(&g);
            shapes.push((r.width, r.height));
        }
        if degenerate || r.width < 4 || r.height < 4 {
            log::warn!(
                "frequency pyramid scale with {levels} halvings of {}x{} skipped: image too small",
                render.width,
                render.height
            );
            continue;
        }

        let (w, h) = (r.width, r.height);
        let n_s = (w * h) as f64;
        let mask = high_pass_mask(w, h, cfg.cutoff);
        let mut scale_grad = if with_grad {
            Some(ImageBuf::zeros(w, h))
        } else {
            None
        };

        for c in 0..3 {
            let rc: Vec<Complex<f64>> =
                r.channel(c).iter().map(|&v| Complex::new(v, 0.0)).collect();
            let gc: Vec<Complex<f64>> =
                g.channel(c).iter().map(|&v| Complex::new(v, 0.0)).collect();
            let fr = fft2_with(&mut planner, &rc, w, h);
            let fg = fft2_with(&mut planner, &gc, w, h);

            let mut cotangent = if with_grad {
                vec![Complex::new(0.0, 0.0); w * h]
            } else {
                Vec::new()
            };
            for i in 0..w * h {
                if !mask[i] {
                    continue;
                }
                let d = fr[i] - fg[i];
                let mag = d.norm();
                total += lambda_s / n_s * mag;
                if with_grad && mag > 0.0 {
                    cotangent[i] = d.conj() * (lambda_s / n_s / mag);
                }
            }
            if let Some(sg) = scale_grad.as_mut() {
                // d loss / d pixel = Re(forward DFT of the masked cotangent).
                let back = fft2_with(&mut planner, &cotangent, w, h);
                for (i, b) in back.iter().enumerate() {
                    sg.data[i * 3 + c] += b.re;
                }
            }
        }

        if let (Some(gimg), Some(mut sg)) = (grad.as_mut(), scale_grad) {
            // Chain back through the reduction pyramid.
            for level in (1..shapes.len()).rev() {
                let (pw, ph) = shapes[level - 1];
                sg = downsample_half_adjoint(&sg, pw, ph);
            }
            for (a, b) in gimg.data.iter_mut().zip(&sg.data) {
                *a += b;
            }
        }
    }

    Ok((total, grad))
}

/// Result of the full training objective at one iteration.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub vol: f64,
    pub hf: f64,
    /// Gradient w.r.t. the rendered pixels.
    pub d_render: ImageBuf,
    /// Gradient w.r.t. each provided Gaussian scale.
    pub d_scales: Vec<Vector3<f64>>,
}

/// Weighted total: (1-lambda) L1 + lambda (1-SSIM) + lambda_vol vol +
/// lambda_hf hf, the last term only inside the pyramid's active window.
pub fn total_loss(
    render: &ImageBuf,
    gt: &ImageBuf,
    scales: &[Vector3<f64>],
    weights: &LossWeights,
    fpr_cfg: &FrequencyPyramidConfig,
    iter: u64,
) -> Result<TotalLoss, LossError> {
    let (l1, l1_grad) = l1_loss_with_grad(render, gt)?;
    let (ssim_v, ssim_grad) = ssim_with_grad(render, gt)?;
    let (vol, vol_grads) = volume_loss_with_grad(scales);
    let hf_active = weights.lambda_hf != 0.0 && fpr_cfg.active_at(iter);
    let (hf, hf_grad) = if hf_active {
        let (v, g) = frequency_pyramid_loss_with_grad(render, gt, fpr_cfg)?;
        (v, Some(g))
    } else {
        (0.0, None)
    };

    let total = (1.0 - weights.lambda) * l1
        + weights.lambda * (1.0 - ssim_v)
        + weights.lambda_vol * vol
        + weights.lambda_hf * hf;

    let mut d_render = ImageBuf::zeros(render.width, render.height);
    for i in 0..d_render.data.len() {
        let mut g = (1.0 - weights.lambda) * l1_grad.data[i] - weights.lambda * ssim_grad.data[i];
        if let Some(hg) = &hf_grad {
            g += weights.lambda_hf * hg.data[i];
        }
        d_render.data[i] = g;
    }
    let d_scales = vol_grads
        .into_iter()
        .map(|g| g * weights.lambda_vol)
        .collect();

    Ok(TotalLoss {
        total,
        l1,
        ssim: ssim_v,
        vol,
        hf,
        d_render,
        d_scales,
    })
}

/// Peak signal-to-noise ratio in decibels for unit dynamic range. A zero
/// MSE returns the +infinity sentinel.
pub fn psnr(render: &ImageBuf, gt: &ImageBuf) -> Result<f64, LossError> {
    check_shapes(render, gt)?;
    let n = render.data.len() as f64;
    let mse = render
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
