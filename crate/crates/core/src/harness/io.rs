//! PNG and binary PPM reading and writing.

use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::img::Image;

const EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];

/// Reads an 8-bit image as three planes in [0, 1].
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded =
        image::load_from_memory(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::filled(3, h, w, 0.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.plane_mut(c)[y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(img)
}

fn to_rgb8(img: &Image) -> Result<RgbImage> {
    if img.channels != 3 && img.channels != 1 {
        return Err(Error::Contract(format!(
            "cannot encode a {}-channel image",
            img.channels
        )));
    }
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = img.at(c.min(img.channels - 1), y as usize, x as usize);
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// Writes PNG or binary PPM depending on the extension.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    to_rgb8(img)?
        .save_with_format(path, format)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Supported image files of a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Every supported image in `dir` with its file name.
pub fn read_dir_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, read_image(&p)?))
        })
        .collect()
}

/// Tiles equally sized images into rows of `columns`, separated by one-pixel white lines.
pub fn grid(images: &[&Image], columns: usize) -> Result<Image> {
    let Some(first) = images.first() else {
        return Err(Error::Contract("grid of no images".into()));
    };
    if let Some(bad) = images.iter().find(|i| !i.same_dims(first)) {
        return Err(Error::Contract(format!(
            "grid mixes {}x{} and {}x{}",
            first.height, first.width, bad.height, bad.width
        )));
    }
    let columns = columns.max(1);
    let rows = images.len().div_ceil(columns);
    let (h, w) = (first.height, first.width);
    let (gh, gw) = (rows * (h + 1) + 1, columns * (w + 1) + 1);
    let mut out = Image::filled(first.channels, gh, gw, 1.0);
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / columns) * (h + 1) + 1, (k % columns) * (w + 1) + 1);
        for c in 0..first.channels {
            for y in 0..h {
                let dst = (oy + y) * gw + ox;
                out.plane_mut(c)[dst..dst + w].copy_from_slice(&img.plane(c)[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}
