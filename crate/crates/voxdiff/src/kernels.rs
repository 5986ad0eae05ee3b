//! Inner loops for 3D convolution. Shared by the tape's forward and backward
//! passes. The innermost loops run over the contiguous width axis so the
//! compiler can vectorize them.

/// Valid output extent for one axis.
#[inline]
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = input + 2 * padding;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Range of output positions `o` with `0 <= o*stride + offset < input`.
#[inline]
fn valid_out_range(out: usize, input: usize, stride: usize, offset: isize) -> (usize, usize) {
    // o >= ceil(-offset / stride)
    let lo = if offset >= 0 {
        0usize
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // o <= (input - 1 - offset) / stride
    let max_i = input as isize - 1 - offset;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_d: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_d: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    #[inline]
    fn in_spatial(&self) -> usize {
        self.in_d * self.in_h * self.in_w
    }
    #[inline]
    fn out_spatial(&self) -> usize {
        self.out_d * self.out_h * self.out_w
    }
}

/// Fused width-axis taps for the k=3, stride=1 fast path.
/// Adds `w0*in[x-1+off0] + w1*in[x+off0] + w2*in[x+1+off0]`-style rows where
/// `off0 = -p` for the forward direction.
#[inline]
fn row_fma3_pad1(out_row: &mut [f64], in_row: &[f64], w0: f64, w1: f64, w2: f64) {
    let n = out_row.len();
    debug_assert_eq!(n, in_row.len());
    if n == 0 {
        return;
    }
    if n == 1 {
        out_row[0] += w1 * in_row[0];
        return;
    }
    out_row[0] += w1 * in_row[0] + w2 * in_row[1];
    for x in 1..n - 1 {
        out_row[x] += w0 * in_row[x - 1] + w1 * in_row[x] + w2 * in_row[x + 1];
    }
    out_row[n - 1] += w0 * in_row[n - 2] + w1 * in_row[n - 1];
}

#[inline]
fn row_fma3_pad0(out_row: &mut [f64], in_row: &[f64], w0: f64, w1: f64, w2: f64) {
    // out extent = in extent - 2; every tap valid.
    for (x, o) in out_row.iter_mut().enumerate() {
        *o += w0 * in_row[x] + w1 * in_row[x + 1] + w2 * in_row[x + 2];
    }
}

#[inline]
fn row_dot3_pad1(go_row: &[f64], in_row: &[f64], acc: &mut [f64; 3]) {
    let n = go_row.len();
    if n == 0 {
        return;
    }
    if n == 1 {
        acc[1] += go_row[0] * in_row[0];
        return;
    }
    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
    a1 += go_row[0] * in_row[0];
    a2 += go_row[0] * in_row[1];
    for x in 1..n - 1 {
        let g = go_row[x];
        a0 += g * in_row[x - 1];
        a1 += g * in_row[x];
        a2 += g * in_row[x + 1];
    }
    let g = go_row[n - 1];
    a0 += g * in_row[n - 2];
    a1 += g * in_row[n - 1];
    acc[0] += a0;
    acc[1] += a1;
    acc[2] += a2;
}

#[inline]
fn row_dot3_pad0(go_row: &[f64], in_row: &[f64], acc: &mut [f64; 3]) {
    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
    for (x, &g) in go_row.iter().enumerate() {
        a0 += g * in_row[x];
        a1 += g * in_row[x + 1];
        a2 += g * in_row[x + 2];
    }
    acc[0] += a0;
    acc[1] += a1;
    acc[2] += a2;
}

/// out[b,co,z,y,x] = sum_{ci,kd,kh,kw} in[b,ci,z*s+kd-p, y*s+kh-p, x*s+kw-p] * w[co,ci,kd,kh,kw]
pub fn conv3d_forward(input: &[f64], weight: &[f64], dims: &ConvDims) -> Vec<f64> {
    let d = dims;
    if d.k == 3 && d.stride == 1 && d.padding <= 1 {
        return conv3d_forward_k3s1(input, weight, dims);
    }
    let mut out = vec![0.0; d.batch * d.c_out * d.out_spatial()];
    let k = d.k;
    let s = d.stride;
    let p = d.padding as isize;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * d.out_spatial();
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * d.in_spatial();
                let w_base = (co * d.c_in + ci) * k * k * k;
                for kd in 0..k {
                    let (z0, z1) = valid_out_range(d.out_d, d.in_d, s, kd as isize - p);
                    for kh in 0..k {
                        let (y0, y1) = valid_out_range(d.out_h, d.in_h, s, kh as isize - p);
                        for kw in 0..k {
                            let wv = weight[w_base + (kd * k + kh) * k + kw];
                            let off_w = kw as isize - p;
                            let (x0, x1) = valid_out_range(d.out_w, d.in_w, s, off_w);
                            if x0 >= x1 {
                                continue;
                            }
                            for z in z0..z1 {
                                let iz = (z * s) as isize + kd as isize - p;
                                for y in y0..y1 {
                                    let iy = (y * s) as isize + kh as isize - p;
                                    let in_row = in_base
                                        + (iz as usize * d.in_h + iy as usize) * d.in_w;
                                    let out_row = out_base + (z * d.out_h + y) * d.out_w;
                                    if s == 1 {
                                        let ix0 = (x0 as isize + off_w) as usize;
                                        let src = &input[in_row + ix0..in_row + ix0 + (x1 - x0)];
                                        let dst = &mut out[out_row + x0..out_row + x1];
                                        for (o, i) in dst.iter_mut().zip(src.iter()) {
                                            *o += wv * *i;
                                        }
                                    } else {
                                        for x in x0..x1 {
                                            let ix = (x * s) as isize + off_w;
                                            out[out_row + x] +=
                                                wv * input[in_row + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_forward_k3s1(input: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.c_out * d.out_spatial()];
    let p = d.padding as isize;
    let pad1 = d.padding == 1;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * d.out_spatial();
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * d.in_spatial();
                let w_base = (co * d.c_in + ci) * 27;
                for kd in 0..3usize {
                    let (z0, z1) = valid_out_range(d.out_d, d.in_d, 1, kd as isize - p);
                    for kh in 0..3usize {
                        let (y0, y1) = valid_out_range(d.out_h, d.in_h, 1, kh as isize - p);
                        let wt = &weight[w_base + (kd * 3 + kh) * 3..w_base + (kd * 3 + kh) * 3 + 3];
                        for z in z0..z1 {
                            let iz = (z as isize + kd as isize - p) as usize;
                            for y in y0..y1 {
                                let iy = (y as isize + kh as isize - p) as usize;
                                let in_row_at = in_base + (iz * d.in_h + iy) * d.in_w;
                                let out_row_at = out_base + (z * d.out_h + y) * d.out_w;
                                if pad1 {
                                    let (orow, irow) = (
                                        &mut out[out_row_at..out_row_at + d.out_w],
                                        &input[in_row_at..in_row_at + d.in_w],
                                    );
                                    row_fma3_pad1(orow, irow, wt[0], wt[1], wt[2]);
                                } else {
                                    let (orow, irow) = (
                                        &mut out[out_row_at..out_row_at + d.out_w],
                                        &input[in_row_at..in_row_at + d.in_w],
                                    );
                                    row_fma3_pad0(orow, irow, wt[0], wt[1], wt[2]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input: scatter of `grad_out` through the kernel.
pub fn conv3d_backward_input(grad_out: &[f64], weight: &[f64], dims: &ConvDims) -> Vec<f64> {
    let d = dims;
    if d.k == 3 && d.stride == 1 && d.padding == 1 {
        return conv3d_backward_input_k3s1p1(grad_out, weight, dims);
    }
    let mut grad_in = vec![0.0; d.batch * d.c_in * d.in_spatial()];
    let k = d.k;
    let s = d.stride;
    let p = d.padding as isize;
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let in_base = (b * d.c_in + ci) * d.in_spatial();
            for co in 0..d.c_out {
                let out_base = (b * d.c_out + co) * d.out_spatial();
                let w_base = (co * d.c_in + ci) * k * k * k;
                for kd in 0..k {
                    let (z0, z1) = valid_out_range(d.out_d, d.in_d, s, kd as isize - p);
                    for kh in 0..k {
                        let (y0, y1) = valid_out_range(d.out_h, d.in_h, s, kh as isize - p);
                        for kw in 0..k {
                            let wv = weight[w_base + (kd * k + kh) * k + kw];
                            let off_w = kw as isize - p;
                            let (x0, x1) = valid_out_range(d.out_w, d.in_w, s, off_w);
                            if x0 >= x1 {
                                continue;
                            }
                            for z in z0..z1 {
                                let iz = (z * s) as isize + kd as isize - p;
                                for y in y0..y1 {
                                    let iy = (y * s) as isize + kh as isize - p;
                                    let in_row = in_base
                                        + (iz as usize * d.in_h + iy as usize) * d.in_w;
                                    let out_row = out_base + (z * d.out_h + y) * d.out_w;
                                    if s == 1 {
                                        let ix0 = (x0 as isize + off_w) as usize;
                                        let src = &grad_out[out_row + x0..out_row + x1];
                                        let dst = &mut grad_in
                                            [in_row + ix0..in_row + ix0 + (x1 - x0)];
                                        for (gi, go) in dst.iter_mut().zip(src.iter()) {
                                            *gi += wv * *go;
                                        }
                                    } else {
                                        for x in x0..x1 {
                                            let ix = (x * s) as isize + off_w;
                                            grad_in[in_row + ix as usize] +=
                                                wv * grad_out[out_row + x];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// With k=3, s=1, p=1 the input gradient is itself a k3s1p1 convolution of
/// `grad_out` with the kernel flipped on every axis and channels transposed.
fn conv3d_backward_input_k3s1p1(grad_out: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut wt = vec![0.0; d.c_in * d.c_out * 27];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for t in 0..27 {
                wt[(ci * d.c_out + co) * 27 + (26 - t)] = weight[(co * d.c_in + ci) * 27 + t];
            }
        }
    }
    let flipped = ConvDims {
        batch: d.batch,
        c_in: d.c_out,
        c_out: d.c_in,
        k: 3,
        stride: 1,
        padding: 1,
        in_d: d.out_d,
        in_h: d.out_h,
        in_w: d.out_w,
        out_d: d.in_d,
        out_h: d.in_h,
        out_w: d.in_w,
    };
    conv3d_forward_k3s1(grad_out, &wt, &flipped)
}

fn conv3d_backward_weight_k3s1(input: &[f64], grad_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let p = d.padding as isize;
    let pad1 = d.padding == 1;
    let mut grad_w = vec![0.0; d.c_out * d.c_in * 27];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * d.out_spatial();
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * d.in_spatial();
                let w_base = (co * d.c_in + ci) * 27;
                for kd in 0..3usize {
                    let (z0, z1) = valid_out_range(d.out_d, d.in_d, 1, kd as isize - p);
                    for kh in 0..3usize {
                        let (y0, y1) = valid_out_range(d.out_h, d.in_h, 1, kh as isize - p);
                        let mut acc = [0.0; 3];
                        for z in z0..z1 {
                            let iz = (z as isize + kd as isize - p) as usize;
                            for y in y0..y1 {
                                let iy = (y as isize + kh as isize - p) as usize;
                                let in_row_at = in_base + (iz * d.in_h + iy) * d.in_w;
                                let out_row_at = out_base + (z * d.out_h + y) * d.out_w;
                                let go_row = &grad_out[out_row_at..out_row_at + d.out_w];
                                let in_row = &input[in_row_at..in_row_at + d.in_w];
                                if pad1 {
                                    row_dot3_pad1(go_row, in_row, &mut acc);
                                } else {
                                    row_dot3_pad0(go_row, in_row, &mut acc);
                                }
                            }
                        }
                        for kw in 0..3 {
                            grad_w[w_base + (kd * 3 + kh) * 3 + kw] += acc[kw];
                        }
                    }
                }
            }
        }
    }
    grad_w
}

/// Gradient with respect to the weights: per-tap dot products of `grad_out`
/// rows against input rows.
pub fn conv3d_backward_weight(input: &[f64], grad_out: &[f64], dims: &ConvDims) -> Vec<f64> {
    let d = dims;
    if d.k == 3 && d.stride == 1 && d.padding <= 1 {
        return conv3d_backward_weight_k3s1(input, grad_out, dims);
    }
    let k = d.k;
    let s = d.stride;
    let p = d.padding as isize;
    let mut grad_w = vec![0.0; d.c_out * d.c_in * k * k * k];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * d.out_spatial();
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * d.in_spatial();
                let w_base = (co * d.c_in + ci) * k * k * k;
                for kd in 0..k {
                    let (z0, z1) = valid_out_range(d.out_d, d.in_d, s, kd as isize - p);
                    for kh in 0..k {
                        let (y0, y1) = valid_out_range(d.out_h, d.in_h, s, kh as isize - p);
                        for kw in 0..k {
                            let off_w = kw as isize - p;
                            let (x0, x1) = valid_out_range(d.out_w, d.in_w, s, off_w);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for z in z0..z1 {
                                let iz = (z * s) as isize + kd as isize - p;
                                for y in y0..y1 {
                                    let iy = (y * s) as isize + kh as isize - p;
                                    let in_row = in_base
                                        + (iz as usize * d.in_h + iy as usize) * d.in_w;
                                    let out_row = out_base + (z * d.out_h + y) * d.out_w;
                                    if s == 1 {
                                        let ix0 = (x0 as isize + off_w) as usize;
                                        let lhs = &grad_out[out_row + x0..out_row + x1];
                                        let rhs =
                                            &input[in_row + ix0..in_row + ix0 + (x1 - x0)];
                                        let mut dot = 0.0;
                                        for (a, b) in lhs.iter().zip(rhs.iter()) {
                                            dot += *a * *b;
                                        }
                                        acc += dot;
                                    } else {
                                        for x in x0..x1 {
                                            let ix = (x * s) as isize + off_w;
                                            acc += grad_out[out_row + x]
                                                * input[in_row + ix as usize];
                                        }
                                    }
                                }
                            }
                            grad_w[w_base + (kd * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    grad_w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    /// Seven nested loops, straight from the definition. The oracle for the
    /// fast path.
    pub fn conv3d_reference(input: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.c_out * d.out_d * d.out_h * d.out_w];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for z in 0..d.out_d {
                    for y in 0..d.out_h {
                        for x in 0..d.out_w {
                            let mut acc = 0.0;
                            for ci in 0..d.c_in {
                                for kd in 0..d.k {
                                    for kh in 0..d.k {
                                        for kw in 0..d.k {
                                            let iz = (z * d.stride + kd) as isize
                                                - d.padding as isize;
                                            let iy = (y * d.stride + kh) as isize
                                                - d.padding as isize;
                                            let ix = (x * d.stride + kw) as isize
                                                - d.padding as isize;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d.in_d as isize
                                                || iy >= d.in_h as isize
                                                || ix >= d.in_w as isize
                                            {
                                                continue;
                                            }
                                            let iv = input[(((b * d.c_in + ci) * d.in_d
                                                + iz as usize)
                                                * d.in_h
                                                + iy as usize)
                                                * d.in_w
                                                + ix as usize];
                                            let wv = weight[(((co * d.c_in + ci) * d.k + kd)
                                                * d.k
                                                + kh)
                                                * d.k
                                                + kw];
                                            acc += iv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((b * d.c_out + co) * d.out_d + z) * d.out_h + y) * d.out_w
                                + x] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn dims(
        batch: usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        ext: usize,
    ) -> ConvDims {
        let out = conv_out_extent(ext, k, stride, padding).unwrap();
        ConvDims {
            batch,
            c_in,
            c_out,
            k,
            stride,
            padding,
            in_d: ext,
            in_h: ext,
            in_w: ext,
            out_d: out,
            out_h: out,
            out_w: out,
        }
    }

    #[test]
    fn matches_reference_over_shapes() {
        let mut rng = CounterRng::new(11);
        for (b, ci, co, k, s, p, ext) in [
            (1, 1, 1, 3, 1, 0, 4),
            (1, 2, 3, 3, 1, 1, 5),
            (2, 3, 2, 3, 2, 1, 6),
            (1, 2, 2, 1, 1, 0, 4),
            (1, 1, 2, 5, 1, 2, 6),
            (1, 2, 1, 3, 2, 0, 7),
        ] {
            let d = dims(b, ci, co, k, s, p, ext);
            let input = rng.normal_vec(b * ci * ext * ext * ext);
            let weight = rng.normal_vec(co * ci * k * k * k);
            let fast = conv3d_forward(&input, &weight, &d);
            let slow = conv3d_reference(&input, &weight, &d);
            let max = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "k={k} s={s} p={p}: max diff {max}");
        }
    }
}
