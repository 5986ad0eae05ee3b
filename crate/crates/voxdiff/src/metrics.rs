//! Volumetric image metrics: single-scale and multi-scale SSIM, PSNR, and
//! the Fréchet distance between Gaussian feature fits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian window: size 7, sigma 1.5, normalized to sum 1.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

/// Canonical five-scale MS-SSIM weights; truncated and renormalized when
/// fewer scales are used.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Interpret a tensor as one scalar 3D field: rank 3, or rank 4/5 with unit
/// leading axes.
fn vol3(t: &Tensor) -> Result<((usize, usize, usize), &[f64])> {
    let s = t.shape();
    let spatial = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        5 if s[0] == 1 && s[1] == 1 => (s[2], s[3], s[4]),
        _ => {
            return Err(Error::shape(format!(
                "metric input must be one scalar volume, got {s:?}"
            )))
        }
    };
    Ok((spatial, t.data()))
}

/// Valid-mode separable convolution along one axis of a 3D field.
fn blur_axis(
    src: &[f64],
    (d, h, w): (usize, usize, usize),
    axis: usize,
    kernel: &[f64],
) -> (Vec<f64>, (usize, usize, usize)) {
    let k = kernel.len();
    let (od, oh, ow) = match axis {
        0 => (d - k + 1, h, w),
        1 => (d, h - k + 1, w),
        _ => (d, h, w - k + 1),
    };
    let mut out = vec![0.0; od * oh * ow];
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (j, &kv) in kernel.iter().enumerate() {
                    let (sz, sy, sx) = match axis {
                        0 => (z + j, y, x),
                        1 => (z, y + j, x),
                        _ => (z, y, x + j),
                    };
                    acc += kv * src[(sz * h + sy) * w + sx];
                }
                out[(z * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, (od, oh, ow))
}

fn blur3(src: &[f64], dims: (usize, usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
    let k = gaussian_kernel();
    let (a, da) = blur_axis(src, dims, 2, &k);
    let (b, db) = blur_axis(&a, da, 1, &k);
    blur_axis(&b, db, 0, &k)
}

struct SsimTerms {
    /// mean luminance*contrast*structure (the full index)
    full: f64,
    /// mean contrast*structure only
    cs: f64,
}

fn ssim_terms(x: &[f64], y: &[f64], dims: (usize, usize, usize), data_range: f64) -> SsimTerms {
    let c1 = (0.01 * data_range) * (0.01 * data_range);
    let c2 = (0.03 * data_range) * (0.03 * data_range);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
    let (mu_x, od) = blur3(x, dims);
    let (mu_y, _) = blur3(y, dims);
    let (m_xx, _) = blur3(&xx, dims);
    let (m_yy, _) = blur3(&yy, dims);
    let (m_xy, _) = blur3(&xy, dims);
    let n = od.0 * od.1 * od.2;
    let mut full = 0.0;
    let mut cs = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = (m_xx[i] - mx * mx).max(0.0);
        let vy = (m_yy[i] - my * my).max(0.0);
        let cxy = m_xy[i] - mx * my;
        let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let cs_i = (2.0 * cxy + c2) / (vx + vy + c2);
        full += lum * cs_i;
        cs += cs_i;
    }
    SsimTerms {
        full: full / n as f64,
        cs: cs / n as f64,
    }
}

/// Standard SSIM with a 7^3 Gaussian window (sigma 1.5), averaged over valid
/// positions.
pub fn ssim3d(x: &Tensor, y: &Tensor, data_range: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "ssim3d: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if data_range <= 0.0 {
        return Err(Error::invalid("ssim3d: data_range must be > 0"));
    }
    let (dims, xd) = vol3(x)?;
    let (_, yd) = vol3(y)?;
    if dims.0 < SSIM_WINDOW || dims.1 < SSIM_WINDOW || dims.2 < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim3d: extents {dims:?} below window {SSIM_WINDOW}"
        )));
    }
    Ok(ssim_terms(xd, yd, dims, data_range).full)
}

fn downsample2(src: &[f64], (d, h, w): (usize, usize, usize)) -> (Vec<f64>, (usize, usize, usize)) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; od * oh * ow];
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += src[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx];
                        }
                    }
                }
                out[(z * oh + y) * ow + x] = acc / 8.0;
            }
        }
    }
    (out, (od, oh, ow))
}

/// Multi-scale SSIM: contrast-structure terms at the finer scales (2x average
/// pooling between scales), the full index at the coarsest, combined as a
/// weighted geometric mean with renormalized canonical weights.
pub fn ms_ssim3d(x: &Tensor, y: &Tensor, data_range: f64, scales: usize) -> Result<f64> {
    if scales == 0 || scales > MSSSIM_WEIGHTS.len() {
        return Err(Error::invalid(format!(
            "ms_ssim3d: scales {scales} outside 1..={}",
            MSSSIM_WEIGHTS.len()
        )));
    }
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "ms_ssim3d: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (dims, xd) = vol3(x)?;
    let (_, yd) = vol3(y)?;
    let min_ext = dims.0.min(dims.1).min(dims.2);
    let needed = SSIM_WINDOW << (scales - 1);
    if min_ext < needed {
        return Err(Error::shape(format!(
            "ms_ssim3d: extent {min_ext} too small for {scales} scales; needs >= {needed}"
        )));
    }
    if scales == 1 {
        // Degenerate recursion: exactly the single-scale index, including
        // possible negative values that the geometric mean below would clamp.
        return Ok(ssim_terms(xd, yd, dims, data_range).full);
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..scales].iter().map(|w| w / wsum).collect();
    let mut cur_x = xd.to_vec();
    let mut cur_y = yd.to_vec();
    let mut cur_dims = dims;
    let mut score = 1.0;
    for (j, &wj) in weights.iter().enumerate() {
        let terms = ssim_terms(&cur_x, &cur_y, cur_dims, data_range);
        if j + 1 == scales {
            score *= terms.full.max(0.0).powf(wj);
        } else {
            score *= terms.cs.max(0.0).powf(wj);
            let (nx, nd) = downsample2(&cur_x, cur_dims);
            let (ny, _) = downsample2(&cur_y, cur_dims);
            cur_x = nx;
            cur_y = ny;
            cur_dims = nd;
        }
    }
    Ok(score)
}

/// Peak signal-to-noise ratio in dB; +infinity when the inputs are equal.
pub fn psnr(x: &Tensor, y: &Tensor, data_range: f64) -> Result<f64> {
    let mse = x.mse(y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and the orthogonal matrix whose columns are eigenvectors.
pub fn symmetric_eigen(mat: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(mat.len(), d * d);
    let mut a = mat.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = mat.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() < 1e-13 * frob {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[p * d + i];
                    let aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..d).map(|i| a[i * d + i]).collect();
    (vals, v)
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let av = a[i * d + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += av * b[k * d + j];
            }
        }
    }
    out
}

/// Mean vector and sample covariance (n-1 denominator) of a feature set.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "feature set needs >= 2 samples, got {n}"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::shape("feature vectors have mixed widths"));
    }
    let mut mean = vec![0.0; d];
    for f in features {
        for i in 0..d {
            mean[i] += f[i];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    // Shrinkage keeps the covariance well conditioned when the sample count
    // is small relative to the feature width.
    if n < 5 * d {
        for i in 0..d {
            cov[i * d + i] += 1e-6;
        }
    }
    Ok((mean, cov))
}

fn psd_sqrt(cov: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(cov, d);
    for &l in &vals {
        if l < -1e-8 {
            return Err(Error::numeric(format!(
                "covariance not PSD: eigenvalue {l}"
            )));
        }
    }
    // V diag(sqrt(max(l,0))) V^T
    let mut scaled = vec![0.0; d * d]; // rows of V^T scaled by sqrt(l)
    for j in 0..d {
        let s = vals[j].max(0.0).sqrt();
        for i in 0..d {
            scaled[j * d + i] = s * vecs[i * d + j];
        }
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vecs[i * d + k] * scaled[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    Ok(out)
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with the cross term
/// computed through the symmetric product Sa^{1/2} Sb Sa^{1/2}.
pub fn frechet_distance(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = feature_stats(features_a)?;
    let (mu_b, cov_b) = feature_stats(features_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape(format!(
            "feature widths differ: {} vs {}",
            mu_a.len(),
            mu_b.len()
        )));
    }
    let d = mu_a.len();
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sqrt_a = psd_sqrt(&cov_a, d)?;
    let inner = matmul(&sqrt_a, &matmul(&cov_b, &sqrt_a, d), d);
    // Symmetrize against rounding before the eigen solve.
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = symmetric_eigen(&sym, d);
    let mut tr_sqrt = 0.0;
    for &l in &vals {
        if l < -1e-8 {
            return Err(Error::numeric(format!(
                "cross-covariance product not PSD: eigenvalue {l}"
            )));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}
