//! Binary PGM (P5) export of mid-axial slice grids for quick inspection.

use std::path::Path;

use voxdiff::error::{Error, Result};
use voxdiff::tensor::Tensor;

fn mid_slice(volume: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, d, h, w) = volume.dims4()?;
    if c != 1 {
        return Err(Error::shape("slice export expects single-channel volumes"));
    }
    let z = d / 2;
    let mut out = Vec::with_capacity(h * w);
    out.extend_from_slice(&volume.data()[z * h * w..(z + 1) * h * w]);
    Ok((out, h, w))
}

/// Write volumes side by side as one 8-bit graymap. `signed` panels are
/// scaled symmetrically around mid-gray; others map [0,1] to [0,255].
pub fn write_slice_grid(panels: &[(&Tensor, bool)], path: &Path) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::invalid("slice grid needs at least one panel"));
    }
    let gap = 2usize;
    let mut slices = Vec::new();
    let (mut h, mut w) = (0, 0);
    for (vol, signed) in panels {
        let (s, sh, sw) = mid_slice(vol)?;
        h = h.max(sh);
        w = w.max(sw);
        slices.push((s, sh, sw, *signed));
    }
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut img = vec![0u8; h * total_w];
    for (p, (slice, sh, sw, signed)) in slices.iter().enumerate() {
        let x0 = p * (w + gap);
        let max_abs = slice
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        for y in 0..*sh {
            for x in 0..*sw {
                let v = slice[y * sw + x];
                let g = if *signed {
                    (127.5 + 127.5 * (v / max_abs)).clamp(0.0, 255.0)
                } else {
                    (v * 255.0).clamp(0.0, 255.0)
                };
                img[y * total_w + x0 + x] = g.round() as u8;
            }
        }
    }
    let mut bytes = format!("P5\n{total_w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&img);
    std::fs::write(path, bytes)?;
    Ok(())
}
