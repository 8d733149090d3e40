use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit row-major raster with 1 (mask) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("{channels} channels; expected 1 or 3")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "raster",
                format!("{width}x{height}x{channels} needs {} bytes, got {}", width * height * channels, data.len()),
            ));
        }
        Ok(RasterImage { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Self {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        RasterImage { width, height, channels: pixel.len(), data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Fills the half-open rectangle `[x0, x1) x [y0, y1)`, clipped.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, pixel: &[u8]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.pixel_mut(x, y).copy_from_slice(pixel);
            }
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::invalid(format!(
                "crop {w}x{h} at ({x},{y}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for row in y..y + h {
            let s = (row * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[s..s + w * self.channels]);
        }
        Ok(RasterImage { width: w, height: h, channels: self.channels, data })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
        Ok(match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                RasterImage { width: g.width() as usize, height: g.height() as usize, channels: 1, data: g.into_raw() }
            }
            _ => {
                let c = img.to_rgb8();
                RasterImage { width: c.width() as usize, height: c.height() as usize, channels: 3, data: c.into_raw() }
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        let mut bytes = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut bytes),
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RasterImage::filled(5, 4, &[10, 20, 30]);
        img.fill_rect(1, 1, 3, 2, &[200, 0, 7]);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RasterImage::load_png(&p).unwrap(), img);
        let mask = RasterImage::filled(3, 3, &[255]);
        mask.save_png(&p).unwrap();
        assert_eq!(RasterImage::load_png(&p).unwrap(), mask);
    }
}
