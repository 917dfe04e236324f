//! RGB rasters in `[0, 1]`, plus the resize/crop/patchify helpers used by
//! storage, augmentation and the vision encoder.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, Rgb32FImage, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    img: Rgb32FImage,
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Raster {
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f32; 3]) -> Self {
        Self {
            img: Rgb32FImage::from_fn(width, height, |x, y| Rgb(f(x, y))),
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self::from_fn(img.width(), img.height(), |x, y| {
            let p = img.get_pixel(x, y).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width(), self.height(), |x, y| {
            let p = self.img.get_pixel(x, y).0;
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn width(&self) -> u32 {
        self.img.width()
    }

    pub fn height(&self) -> u32 {
        self.img.height()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.img.dimensions()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        self.img.get_pixel(x, y).0
    }

    pub fn crop(&self, b: CropBox) -> Raster {
        Raster {
            img: imageops::crop_imm(&self.img, b.x, b.y, b.width, b.height).to_image(),
        }
    }

    pub fn resize(&self, width: u32, height: u32) -> Raster {
        if self.dims() == (width, height) {
            return self.clone();
        }
        Raster {
            img: imageops::resize(&self.img, width, height, FilterType::Triangle),
        }
    }

    pub fn crop_resize(&self, b: CropBox, size: u32) -> Raster {
        self.crop(b).resize(size, size)
    }

    /// Non-overlapping `patch x patch` tiles in row-major order, each flattened
    /// as `(y, x, channel)`. Output shape `[(w/p)*(h/p), 3*p*p]`.
    pub fn patchify(&self, patch: u32) -> Result<Array2<f64>> {
        let (w, h) = self.dims();
        if patch == 0 || w % patch != 0 || h % patch != 0 {
            return Err(Error::Shape(format!(
                "{w}x{h} image is not divisible into {patch}px patches"
            )));
        }
        let (gw, gh) = (w / patch, h / patch);
        let p = patch as usize;
        let mut out = Array2::zeros(((gw * gh) as usize, 3 * p * p));
        for py in 0..gh {
            for px in 0..gw {
                let row = (py * gw + px) as usize;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let v = self.pixel(px * patch + dx, py * patch + dy);
                        let base = 3 * (dy as usize * p + dx as usize);
                        for c in 0..3 {
                            out[[row, base + c]] = v[c] as f64;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Shorter side resized to `store_size`, then a centered `store_size` square crop.
pub fn resize_for_store(image: &Raster, store_size: u32, min_side: u32) -> Result<Raster> {
    let (w, h) = image.dims();
    if w.min(h) < min_side.max(1) {
        return Err(Error::Data(format!(
            "{w}x{h} image is below the {min_side}px minimum side"
        )));
    }
    let short = w.min(h) as f64;
    let scale = store_size as f64 / short;
    let (rw, rh) = if w <= h {
        (store_size, ((h as f64 * scale).round() as u32).max(store_size))
    } else {
        (((w as f64 * scale).round() as u32).max(store_size), store_size)
    };
    let resized = image.resize(rw, rh);
    let b = CropBox {
        x: (rw - store_size) / 2,
        y: (rh - store_size) / 2,
        width: store_size,
        height: store_size,
    };
    Ok(resized.crop(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Raster {
        Raster::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.5])
    }

    #[test]
    fn store_resize_square_inputs() {
        let out = resize_for_store(&gradient(512, 512), 256, 32).unwrap();
        assert_eq!(out.dims(), (256, 256));
        let same = gradient(256, 256);
        assert_eq!(resize_for_store(&same, 256, 32).unwrap(), same);
    }

    #[test]
    fn store_resize_crops_22_columns_each_side() {
        // 300x256: the short side is already 256, so only the center crop applies.
        let src = Raster::from_fn(300, 256, |x, y| [x as f32 / 300.0, y as f32 / 256.0, 0.0]);
        let out = resize_for_store(&src, 256, 32).unwrap();
        assert_eq!(out.dims(), (256, 256));
        for y in [0, 100, 255] {
            for x in [0, 128, 255] {
                assert_eq!(out.pixel(x, y), src.pixel(x + 22, y));
            }
        }
    }

    #[test]
    fn store_resize_rejects_undersized() {
        assert!(resize_for_store(&gradient(20, 512), 256, 32).is_err());
    }

    #[test]
    fn store_resize_output_constant_across_aspects() {
        for (w, h) in [(40, 33), (33, 400), (1000, 37), (64, 64), (257, 255)] {
            assert_eq!(resize_for_store(&gradient(w, h), 32, 32).unwrap().dims(), (32, 32));
        }
    }

    #[test]
    fn patchify_layout() {
        let img = Raster::from_fn(4, 4, |x, y| [x as f32, y as f32, 0.0]);
        let p = img.patchify(2).unwrap();
        assert_eq!(p.dim(), (4, 12));
        // patch 1 is top-right: first pixel (2, 0)
        assert_eq!(p[[1, 0]], 2.0);
        assert_eq!(p[[1, 1]], 0.0);
        // patch 2 is bottom-left, its last pixel (1, 3)
        assert_eq!(p[[2, 9]], 1.0);
        assert_eq!(p[[2, 10]], 3.0);
        assert!(img.patchify(3).is_err());
    }
}
