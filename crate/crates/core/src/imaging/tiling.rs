use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mask::tissue_mask_hsv;
use super::raster::RasterImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackbonePreset {
    Inceptionv3,
    Vgg16,
    Dinov2,
}

impl BackbonePreset {
    /// (resize target of the shorter edge, centre-crop size)
    pub fn sizes(self) -> (usize, usize) {
        match self {
            BackbonePreset::Inceptionv3 => (342, 299),
            BackbonePreset::Vgg16 | BackbonePreset::Dinov2 => (256, 224),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inceptionv3" => Ok(BackbonePreset::Inceptionv3),
            "vgg16" => Ok(BackbonePreset::Vgg16),
            "dinov2" => Ok(BackbonePreset::Dinov2),
            other => Err(Error::invalid(format!("unknown backbone preset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub patch_size: usize,
    pub blur_kernel: usize,
    pub saturation_threshold: u8,
    pub min_tissue_fraction: f64,
    pub downsample_factor: usize,
    pub backbone_preset: BackbonePreset,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch_size: 512,
            blur_kernel: 7,
            saturation_threshold: 20,
            min_tissue_fraction: 0.05,
            downsample_factor: 4,
            backbone_preset: BackbonePreset::Inceptionv3,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.downsample_factor == 0 {
            return Err(Error::invalid("patch_size and downsample_factor must be positive"));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::invalid(format!("blur kernel {} must be odd", self.blur_kernel)));
        }
        if !(self.min_tissue_fraction > 0.0 && self.min_tissue_fraction < 1.0) {
            return Err(Error::invalid(format!("min_tissue_fraction {} outside (0, 1)", self.min_tissue_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub origin_x: usize,
    pub origin_y: usize,
    pub size: usize,
    pub tissue_fraction: f64,
}

impl Patch {
    pub fn accepted(&self, cfg: &TilingConfig) -> bool {
        self.tissue_fraction > cfg.min_tissue_fraction
    }
}

/// Row-major grid of non-overlapping patches; partial border tiles dropped.
pub fn tile_grid(width: usize, height: usize, size: usize) -> Result<Vec<Patch>> {
    if size == 0 || width < size || height < size {
        return Err(Error::invalid(format!("image {width}x{height} is smaller than one {size}px patch")));
    }
    let mut out = Vec::with_capacity((width / size) * (height / size));
    for gy in 0..height / size {
        for gx in 0..width / size {
            out.push(Patch { origin_x: gx * size, origin_y: gy * size, size, tissue_fraction: 0.0 });
        }
    }
    Ok(out)
}

/// `index.json` of a pre-extracted tile directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileIndex {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub level: u32,
}

pub enum WsiSource {
    Raster(RasterImage),
    /// `{dir}/{x}_{y}.png` plus `{dir}/index.json`.
    TileDir(PathBuf),
}

impl WsiSource {
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(WsiSource::TileDir(path.to_path_buf()))
        } else {
            Ok(WsiSource::Raster(RasterImage::load_png(path)?))
        }
    }

    fn dims(&self, cfg: &TilingConfig) -> Result<(usize, usize, usize)> {
        match self {
            WsiSource::Raster(r) => Ok((r.width, r.height, cfg.patch_size)),
            WsiSource::TileDir(dir) => {
                let idx = read_tile_index(dir)?;
                Ok((idx.width, idx.height, idx.patch_size))
            }
        }
    }

    pub fn patch_pixels(&self, p: &Patch) -> Result<RasterImage> {
        match self {
            WsiSource::Raster(r) => r.crop(p.origin_x, p.origin_y, p.size, p.size),
            WsiSource::TileDir(dir) => {
                let img = RasterImage::load_png(&dir.join(format!("{}_{}.png", p.origin_x, p.origin_y)))?;
                if img.width != p.size || img.height != p.size {
                    return Err(Error::invalid(format!(
                        "tile {}_{}.png is {}x{}, index says {}",
                        p.origin_x, p.origin_y, img.width, img.height, p.size
                    )));
                }
                Ok(img)
            }
        }
    }
}

pub fn read_tile_index(dir: &Path) -> Result<TileIndex> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Grid of the source.
pub fn tile_wsi(source: &WsiSource, cfg: &TilingConfig) -> Result<Vec<Patch>> {
    let (w, h, size) = source.dims(cfg)?;
    tile_grid(w, h, size)
}

/// Tiles the source and fills each patch's tissue fraction. Patches are
/// masked in parallel and returned in row-major order.
pub fn scan_slide(source: &WsiSource, cfg: &TilingConfig) -> Result<Vec<Patch>> {
    cfg.validate()?;
    let grid = tile_wsi(source, cfg)?;
    grid.into_par_iter()
        .map(|mut p| {
            let pixels = source.patch_pixels(&p)?;
            p.tissue_fraction = tissue_mask_hsv(&pixels, cfg)?.1;
            Ok(p)
        })
        .collect()
}

/// The `k` patches with the highest tissue fraction; ties by `(origin_y,
/// origin_x)`.
pub fn rank_patches(patches: &[Patch], k: usize) -> Vec<Patch> {
    let mut sorted = patches.to_vec();
    sorted.sort_by(|a, b| {
        b.tissue_fraction
            .total_cmp(&a.tissue_fraction)
            .then(a.origin_y.cmp(&b.origin_y))
            .then(a.origin_x.cmp(&b.origin_x))
    });
    sorted.truncate(k);
    sorted
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origins(p: &[Patch]) -> Vec<(usize, usize)> {
        p.iter().map(|p| (p.origin_x, p.origin_y)).collect()
    }

    #[test]
    fn grid_flooring() {
        assert_eq!(origins(&tile_grid(1024, 1024, 512).unwrap()), vec![(0, 0), (512, 0), (0, 512), (512, 512)]);
        assert_eq!(tile_grid(1023, 1024, 512).unwrap().len(), 2);
        assert_eq!(tile_grid(512, 512, 512).unwrap().len(), 1);
        assert!(tile_grid(511, 900, 512).is_err());
    }

    fn with_fraction(x: usize, y: usize, f: f64) -> Patch {
        Patch { origin_x: x, origin_y: y, size: 512, tissue_fraction: f }
    }

    #[test]
    fn ranking_rules() {
        let ps = vec![with_fraction(0, 0, 0.9), with_fraction(512, 0, 0.1), with_fraction(0, 512, 0.5)];
        assert_eq!(origins(&rank_patches(&ps, 2)), vec![(0, 0), (0, 512)]);
        let many: Vec<Patch> = (0..30).map(|i| with_fraction(i * 512, 0, 0.3)).collect();
        assert_eq!(rank_patches(&many, 50).len(), 30);
        let ties = vec![with_fraction(512, 512, 0.4), with_fraction(1024, 0, 0.4), with_fraction(0, 512, 0.4)];
        assert_eq!(origins(&rank_patches(&ties, 3)), vec![(1024, 0), (0, 512), (512, 512)]);
        assert!(rank_patches(&[], 5).is_empty());
    }

    #[test]
    fn tile_directory_source() {
        let dir = tempfile::tempdir().unwrap();
        let idx = TileIndex { width: 16, height: 8, patch_size: 8, level: 0 };
        std::fs::write(dir.path().join("index.json"), serde_json::to_string(&idx).unwrap()).unwrap();
        RasterImage::filled(8, 8, &[255, 0, 0]).save_png(&dir.path().join("0_0.png")).unwrap();
        RasterImage::filled(8, 8, &[9, 9, 9]).save_png(&dir.path().join("8_0.png")).unwrap();
        let cfg = TilingConfig { downsample_factor: 1, ..Default::default() };
        let ps = scan_slide(&WsiSource::open(dir.path()).unwrap(), &cfg).unwrap();
        assert_eq!(ps.iter().map(|p| p.tissue_fraction).collect::<Vec<_>>(), vec![1.0, 0.0]);
    }
}
