//! Single-level orthonormal 3D Haar transform.
//!
//! Per axis the pair (a, b) maps to low = (a+b)/sqrt(2), high = (a-b)/sqrt(2),
//! applied along width, then height, then depth. The 1/sqrt(2) normalization
//! makes the transform orthonormal, so N(0, I) noise in voxel space stays
//! N(0, I) in subband space and diffusion schedules transfer unchanged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUBBANDS: usize = 8;

/// Subband order per source channel: index = 4*D_high + 2*H_high + W_high,
/// i.e. (LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH).
pub const SUBBAND_NAMES: [&str; 8] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

const INV_SQRT8: f64 = 0.35355339059327373; // 1 / (2*sqrt(2))

/// An 8-subband stack: [B, 8*C, D/2, H/2, W/2], subbands interleaved per
/// source channel.
#[derive(Clone, Debug)]
pub struct SubbandStack {
    data: Tensor,
}

impl SubbandStack {
    /// Wrap an existing tensor, checking the channel-count contract.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (_, c, _, _, _) = t.dims5()?;
        if c % SUBBANDS != 0 {
            return Err(Error::shape(format!(
                "subband stack channel count {c} not divisible by {SUBBANDS}"
            )));
        }
        Ok(SubbandStack { data: t })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn source_channels(&self) -> usize {
        self.data.shape()[1] / SUBBANDS
    }
}

#[inline]
fn sign(bit: usize, offset: usize) -> f64 {
    // low-pass taps are +1, high-pass taps are (+1, -1) over (near, far).
    if bit == 1 && offset == 1 {
        -1.0
    } else {
        1.0
    }
}

/// Forward transform: [B,C,D,H,W] -> [B,8C,D/2,H/2,W/2]. All spatial extents
/// must be even.
pub fn dwt3(volume: &Tensor) -> Result<SubbandStack> {
    let (b, c, d, h, w) = volume.dims5()?;
    for (axis, ext) in [("depth", d), ("height", h), ("width", w)] {
        if ext % 2 != 0 {
            return Err(Error::shape(format!(
                "dwt3: {axis} extent {ext} is odd; even extents required"
            )));
        }
    }
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let src = volume.data();
    let mut out = vec![0.0; b * c * SUBBANDS * hd * hh * hw];
    let in_sp = d * h * w;
    let out_sp = hd * hh * hw;
    for bi in 0..b {
        for ci in 0..c {
            let sbase = (bi * c + ci) * in_sp;
            for sb in 0..SUBBANDS {
                let (db, hb, wb) = (sb >> 2 & 1, sb >> 1 & 1, sb & 1);
                let obase = (bi * c * SUBBANDS + ci * SUBBANDS + sb) * out_sp;
                for z in 0..hd {
                    for y in 0..hh {
                        for x in 0..hw {
                            let mut acc = 0.0;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = src[sbase
                                            + ((2 * z + dz) * h + 2 * y + dy) * w
                                            + 2 * x
                                            + dx];
                                        acc += sign(db, dz) * sign(hb, dy) * sign(wb, dx) * v;
                                    }
                                }
                            }
                            out[obase + (z * hh + y) * hw + x] = acc * INV_SQRT8;
                        }
                    }
                }
            }
        }
    }
    SubbandStack::from_tensor(Tensor::new(&[b, c * SUBBANDS, hd, hh, hw], out)?)
}

/// Inverse transform: [B,8C,D/2,H/2,W/2] -> [B,C,D,H,W]. Exact inverse of
/// [`dwt3`] (transpose of an orthonormal map).
pub fn idwt3(stack: &SubbandStack) -> Result<Tensor> {
    let (b, c8, hd, hh, hw) = stack.tensor().dims5()?;
    let c = c8 / SUBBANDS;
    let (d, h, w) = (2 * hd, 2 * hh, 2 * hw);
    let src = stack.tensor().data();
    let mut out = vec![0.0; b * c * d * h * w];
    let in_sp = hd * hh * hw;
    let out_sp = d * h * w;
    for bi in 0..b {
        for ci in 0..c {
            let obase = (bi * c + ci) * out_sp;
            for sb in 0..SUBBANDS {
                let (db, hb, wb) = (sb >> 2 & 1, sb >> 1 & 1, sb & 1);
                let sbase = (bi * c * SUBBANDS + ci * SUBBANDS + sb) * in_sp;
                for z in 0..hd {
                    for y in 0..hh {
                        for x in 0..hw {
                            let v = src[sbase + (z * hh + y) * hw + x] * INV_SQRT8;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        out[obase
                                            + ((2 * z + dz) * h + 2 * y + dy) * w
                                            + 2 * x
                                            + dx] +=
                                            sign(db, dz) * sign(hb, dy) * sign(wb, dx) * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, d, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn constant_ones_concentrate_in_lll() {
        let v = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let stack = dwt3(&v).unwrap();
        let data = stack.tensor().data();
        assert_eq!(stack.tensor().shape(), &[1, 8, 1, 1, 1]);
        let expect = 2.0 * 2.0_f64.sqrt(); // (sqrt(2))^3 low-pass gain
        assert!((data[0] - expect).abs() < 1e-12, "LLL = {}", data[0]);
        for (i, &d) in data.iter().enumerate().skip(1) {
            assert!(d.abs() < 1e-12, "{} should be zero, got {d}", SUBBAND_NAMES[i]);
        }
    }

    #[test]
    fn zero_volume_gives_zero_stack() {
        let stack = dwt3(&Tensor::zeros(&[1, 2, 4, 4, 4])).unwrap();
        assert!(stack.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lll_only_stack_inverts_to_constant_ones() {
        let mut data = vec![0.0; 8];
        data[0] = 2.0 * 2.0_f64.sqrt();
        let stack =
            SubbandStack::from_tensor(Tensor::new(&[1, 8, 1, 1, 1], data).unwrap()).unwrap();
        let v = idwt3(&stack).unwrap();
        assert_eq!(v.shape(), &[1, 1, 2, 2, 2]);
        for &x in v.data() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_stack_inverts_to_zero_volume() {
        let stack =
            SubbandStack::from_tensor(Tensor::zeros(&[1, 8, 2, 2, 2])).unwrap();
        assert!(idwt3(&stack).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_and_energy_on_random_volume() {
        let mut rng = CounterRng::new(21);
        let v = Tensor::randn(&[1, 1, 4, 4, 4], &mut rng);
        let stack = dwt3(&v).unwrap();
        let back = idwt3(&stack).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-10);
        let e_in = v.sum_squares();
        let e_out = stack.tensor().sum_squares();
        assert!(((e_in - e_out) / e_in).abs() < 1e-10);
    }

    #[test]
    fn stack_round_trip_is_identity() {
        let mut rng = CounterRng::new(22);
        let stack =
            SubbandStack::from_tensor(Tensor::randn(&[1, 8, 2, 2, 2], &mut rng)).unwrap();
        let v = idwt3(&stack).unwrap();
        let back = dwt3(&v).unwrap();
        assert!(back.tensor().max_abs_diff(stack.tensor()) < 1e-10);
    }

    #[test]
    fn odd_extent_rejected_with_axis_named() {
        let err = dwt3(&Tensor::zeros(&[1, 1, 3, 4, 4])).unwrap_err().to_string();
        assert!(err.contains("depth"), "{err}");
        let err = dwt3(&Tensor::zeros(&[1, 1, 4, 4, 5])).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }

    #[test]
    fn channel_count_not_divisible_by_8_rejected() {
        assert!(SubbandStack::from_tensor(Tensor::zeros(&[1, 12, 2, 2, 2])).is_err());
    }

    #[test]
    fn both_transforms_are_linear() {
        let mut rng = CounterRng::new(23);
        let x = Tensor::randn(&[1, 1, 4, 4, 4], &mut rng);
        let y = Tensor::randn(&[1, 1, 4, 4, 4], &mut rng);
        let (a, b) = (1.7, -0.4);
        let lhs = dwt3(&x.affine(a, &y, b).unwrap()).unwrap();
        let rhs = dwt3(&x)
            .unwrap()
            .tensor()
            .affine(a, dwt3(&y).unwrap().tensor(), b)
            .unwrap();
        assert!(lhs.tensor().max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn white_noise_subband_variance_is_unit() {
        // Orthonormality: unit-variance input noise stays unit variance in
        // every subband. >= 1e5 coefficients per subband.
        let mut rng = CounterRng::new(24);
        let n_vols = 200;
        let mut sums = [0.0; 8];
        let mut sqs = [0.0; 8];
        let per = 8 * 8 * 8;
        for _ in 0..n_vols {
            let v = Tensor::randn(&[1, 1, 16, 16, 16], &mut rng);
            let stack = dwt3(&v).unwrap();
            let data = stack.tensor().data();
            for sb in 0..8 {
                for &x in &data[sb * per..(sb + 1) * per] {
                    sums[sb] += x;
                    sqs[sb] += x * x;
                }
            }
        }
        let n = (n_vols * per) as f64;
        assert!(n >= 1e5);
        for sb in 0..8 {
            let mean = sums[sb] / n;
            let var = sqs[sb] / n - mean * mean;
            assert!(
                (var - 1.0).abs() < 0.02,
                "{} variance {var}",
                SUBBAND_NAMES[sb]
            );
        }
    }
}
