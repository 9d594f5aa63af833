//! Grayscale image ingestion and output (8-bit PNG and PGM).

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// BT.601 luma of an 8-bit RGB triple, scaled to `[0, 1]`.
pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Reads an 8-bit grayscale or RGB image as `[H, W, 1]` in `[0, 1]`. Alpha
/// channels are ignored; 16-bit and float images are rejected.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.as_raw().chunks(2).map(|p| p[0] as f64 / 255.0).collect(),
        DynamicImage::ImageRgb8(c) => c.as_raw().chunks(3).map(|p| luminance(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageRgba8(c) => c.as_raw().chunks(4).map(|p| luminance(p[0], p[1], p[2])).collect(),
        other => {
            return Err(Error::io(
                path,
                format!("unsupported pixel format {:?}; only 8-bit images are read", other.color()),
            ))
        }
    };
    Tensor::new(&[h, w, 1], data)
}

/// Writes an `[H, W, 1]` tensor as 8-bit grayscale, clamping to `[0, 1]` and
/// rounding. The format follows the extension (`.png` or `.pgm`).
pub fn save_grayscale(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match *image.shape() {
        [h, w, 1] | [h, w] => (h, w),
        ref s => return Err(Error::Usage(format!("cannot save tensor of shape {s:?} as a grayscale image"))),
    };
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => ImageFormat::Png,
        Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => return Err(Error::Usage(format!("{}: output must end in .png or .pgm", path.display()))),
    };
    let bytes = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let gray = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    gray.save_with_format(path, format).map_err(|e| Error::io(path, e))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn luminance_weights() {
        assert!((luminance(255, 0, 0) - 0.299).abs() < 1e-12);
        assert!((luminance(77, 77, 77) - 77.0 / 255.0).abs() < 1e-12);
        assert_eq!(luminance(255, 255, 255), 1.0);
    }

    #[test]
    fn round_trips_through_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[5, 7, 1], |i| (i * 6) as f64 / 255.0);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            save_grayscale(&p, &img).unwrap();
            let back = load_grayscale(&p).unwrap();
            assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
        }
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
        assert!(save_grayscale(dir.path().join("a.bmp"), &img).is_err());
    }

    #[test]
    fn rgb_is_converted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let mut rgb = RgbImage::new(2, 1);
        rgb.put_pixel(0, 0, Rgb([255, 0, 0]));
        rgb.put_pixel(1, 0, Rgb([40, 40, 40]));
        rgb.save(&p).unwrap();
        let t = load_grayscale(&p).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-12);
        assert!((t.data()[1] - 40.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(2, 2, vec![0, 1000, 2000, 65535]).unwrap();
        img.save(&p).unwrap();
        assert!(matches!(load_grayscale(&p), Err(Error::Io { .. })));
        assert!(load_grayscale(dir.path().join("missing.png")).is_err());
    }
}
