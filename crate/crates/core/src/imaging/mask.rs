//! HSV tissue masking and binary mask refinement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::raster::RasterImage;
use super::tiling::TilingConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskProvenance {
    HsvThreshold,
    ExternalModel,
}

/// Binary raster with values in {0, 255}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub raster: RasterImage,
    pub provenance: MaskProvenance,
}

impl TissueMask {
    pub fn from_raster(raster: RasterImage, provenance: MaskProvenance) -> Result<Self> {
        if raster.channels != 1 {
            return Err(Error::invalid("mask must be single-channel"));
        }
        if let Some(v) = raster.data.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::invalid(format!("mask holds non-binary value {v}")));
        }
        Ok(TissueMask { raster, provenance })
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn area(&self) -> usize {
        self.raster.data.iter().filter(|&&v| v == 255).count()
    }

    pub fn fraction(&self) -> f64 {
        let n = self.raster.data.len();
        if n == 0 {
            0.0
        } else {
            self.area() as f64 / n as f64
        }
    }
}

/// 8-bit HSV saturation: `round(255 · (max − min) / max)`, 0 for black.
pub fn saturation(r: u8, g: u8, b: u8) -> u8 {
    let max = u32::from(r.max(g).max(b));
    let min = u32::from(r.min(g).min(b));
    if max == 0 {
        0
    } else {
        ((255 * (max - min) + max / 2) / max) as u8
    }
}

/// Square median filter of odd size `k` with edge replication.
pub fn median_filter(src: &[u8], width: usize, height: usize, k: usize) -> Vec<u8> {
    assert!(k % 2 == 1, "median kernel must be odd");
    let r = (k / 2) as isize;
    let rank = (k * k) / 2;
    let at = |x: isize, y: isize| -> u8 {
        let cx = x.clamp(0, width as isize - 1) as usize;
        let cy = y.clamp(0, height as isize - 1) as usize;
        src[cy * width + cx]
    };
    let mut out = vec![0u8; width * height];
    for y in 0..height as isize {
        // sliding histogram along the row
        let mut hist = [0u32; 256];
        for dy in -r..=r {
            for dx in -r..=r {
                hist[at(dx, y + dy) as usize] += 1;
            }
        }
        for x in 0..width as isize {
            if x > 0 {
                for dy in -r..=r {
                    hist[at(x - 1 - r, y + dy) as usize] -= 1;
                    hist[at(x + r, y + dy) as usize] += 1;
                }
            }
            let mut seen = 0u32;
            let mut v = 0usize;
            while seen + hist[v] <= rank as u32 {
                seen += hist[v];
                v += 1;
            }
            out[y as usize * width + x as usize] = v as u8;
        }
    }
    out
}

/// RGB → saturation → nearest-neighbour downsample → median blur →
/// `S > threshold`, mapped back to full resolution. Returns the mask and its
/// tissue fraction.
pub fn tissue_mask_hsv(patch: &RasterImage, cfg: &TilingConfig) -> Result<(TissueMask, f64)> {
    if patch.channels != 3 {
        return Err(Error::invalid(format!("tissue masking needs RGB input, got {} channel(s)", patch.channels)));
    }
    cfg.validate()?;
    let f = cfg.downsample_factor;
    let (w, h) = (patch.width.div_ceil(f), patch.height.div_ceil(f));
    let mut sat = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = patch.pixel(x * f, y * f);
            sat.push(saturation(p[0], p[1], p[2]));
        }
    }
    let blurred = median_filter(&sat, w, h, cfg.blur_kernel);
    let mut data = vec![0u8; patch.width * patch.height];
    for y in 0..patch.height {
        for x in 0..patch.width {
            if blurred[(y / f) * w + x / f] > cfg.saturation_threshold {
                data[y * patch.width + x] = 255;
            }
        }
    }
    let mask = TissueMask {
        raster: RasterImage { width: patch.width, height: patch.height, channels: 1, data },
        provenance: MaskProvenance::HsvThreshold,
    };
    let fraction = mask.fraction();
    Ok((mask, fraction))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub min_object_px: usize,
    pub min_hole_px: usize,
    /// Side of the square closing element; 0 or 1 disables closing.
    pub closing_size: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { min_object_px: 10_000, min_hole_px: 1_000, closing_size: 3 }
    }
}

/// Labels connected components of pixels equal to `value`. Returns per-pixel
/// labels (`usize::MAX` for other pixels) and component sizes.
fn components(data: &[u8], w: usize, h: usize, value: u8, eight: bool) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut label = vec![usize::MAX; data.len()];
    let mut sizes = Vec::new();
    let mut touches_border = Vec::new();
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = if eight {
        &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
    } else {
        &[(0, -1), (-1, 0), (1, 0), (0, 1)]
    };
    for start in 0..data.len() {
        if data[start] != value || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        let mut border = false;
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            if x == 0 || y == 0 || x == w as isize - 1 || y == h as isize - 1 {
                border = true;
            }
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if data[q] == value && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
        touches_border.push(border);
    }
    (label, sizes, touches_border)
}

fn morph(data: &[u8], w: usize, h: usize, k: usize, dilate: bool) -> Vec<u8> {
    let r = (k / 2) as isize;
    let mut out = vec![0u8; data.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hit = !dilate;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let cx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let cy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let on = data[cy * w + cx] == 255;
                    if dilate && on {
                        hit = true;
                        break 'win;
                    }
                    if !dilate && !on {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out[y as usize * w + x as usize] = if hit { 255 } else { 0 };
        }
    }
    out
}

/// Removes 8-connected objects smaller than `min_object_px`, applies a square
/// closing (edge replication), then fills 4-connected background regions
/// smaller than `min_hole_px` that do not touch the image border.
pub fn refine_mask(mask: &TissueMask, cfg: &RefineConfig) -> Result<TissueMask> {
    let m = TissueMask::from_raster(mask.raster.clone(), mask.provenance)?;
    let (w, h) = (m.width(), m.height());
    let mut data = m.raster.data;
    if data.is_empty() {
        return Ok(TissueMask { raster: RasterImage { width: w, height: h, channels: 1, data }, provenance: mask.provenance });
    }

    let (label, sizes, _) = components(&data, w, h, 255, true);
    for (p, &l) in label.iter().enumerate() {
        if l != usize::MAX && sizes[l] < cfg.min_object_px {
            data[p] = 0;
        }
    }

    if cfg.closing_size > 1 {
        let dilated = morph(&data, w, h, cfg.closing_size, true);
        data = morph(&dilated, w, h, cfg.closing_size, false);
    }

    let (label, sizes, border) = components(&data, w, h, 0, false);
    for (p, &l) in label.iter().enumerate() {
        if l != usize::MAX && !border[l] && sizes[l] < cfg.min_hole_px {
            data[p] = 255;
        }
    }
    Ok(TissueMask { raster: RasterImage { width: w, height: h, channels: 1, data }, provenance: mask.provenance })
}
