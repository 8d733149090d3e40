use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::raster::RasterImage;
use super::tiling::BackbonePreset;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Bilinear resize with half-pixel centres (no antialiasing), producing
/// float samples on the 0–255 scale in `[C, H, W]` layout.
pub fn resize_bilinear(img: &RasterImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let c = img.channels;
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, sx, img.width)).collect();
    let mut out = vec![0f32; c * out_w * out_h];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let p = |xx: usize, yy: usize| f64::from(img.data[(yy * img.width + xx) * c + ch]);
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out[(ch * out_h + y) * out_w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

/// Python-style round half to even.
fn round_half_even(v: f64) -> usize {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        (r - 1.0) as usize
    } else {
        r as usize
    }
}

/// Shorter edge resized to the preset target, centre crop, scale to [0, 1],
/// per-channel ImageNet normalisation. Output shape `[3, crop, crop]`.
pub fn preprocess_patch(patch: &RasterImage, preset: BackbonePreset) -> Result<Tensor<f32>> {
    if patch.channels != 3 {
        return Err(Error::invalid(format!("preprocessing needs RGB input, got {} channel(s)", patch.channels)));
    }
    let (target, crop) = preset.sizes();
    let (w, h) = (patch.width, patch.height);
    let (rw, rh) = if w <= h { (target, target * h / w) } else { (target * w / h, target) };
    let resized = resize_bilinear(patch, rw, rh);
    let top = round_half_even((rh - crop) as f64 / 2.0);
    let left = round_half_even((rw - crop) as f64 / 2.0);
    let mut out = Vec::with_capacity(3 * crop * crop);
    for ch in 0..3 {
        for y in top..top + crop {
            for x in left..left + crop {
                let v = resized[(ch * rh + y) * rw + x] / 255.0;
                out.push((v - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch]);
            }
        }
    }
    Tensor::new(&[3, crop, crop], out)
}
