//! Slide tiling, HSV tissue masking, patch preprocessing and mask refinement.

pub mod mask;
pub mod preprocess;
pub mod raster;
pub mod tiling;

pub use mask::{median_filter, refine_mask, saturation, tissue_mask_hsv, MaskProvenance, RefineConfig, TissueMask};
pub use preprocess::{preprocess_patch, resize_bilinear};
pub use raster::RasterImage;
pub use tiling::{rank_patches, scan_slide, tile_grid, tile_wsi, BackbonePreset, Patch, TileIndex, TilingConfig, WsiSource};
