//! PNG reading and writing for images and label maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Stable color for a category id; `background` is black.
pub fn palette_color(id: usize, background: usize) -> [u8; 3] {
    if id == background {
        return [0, 0, 0];
    }
    // Golden-angle hue walk at fixed saturation and value.
    let h = (id as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

pub fn palette(num_categories: usize) -> Vec<[u8; 3]> {
    (0..=num_categories)
        .map(|i| palette_color(i, num_categories))
        .collect()
}

pub fn write_rgb_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Reads an image and resizes it to `size x size`, keeping the original
/// `(height, width)`.
pub fn read_rgb_image(path: &Path, size: usize) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let original = (img.height() as usize, img.width() as usize);
    let img = if original == (size, size) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    let pixels = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    });
    ImageTensor::new(pixels, original)
}

/// Single-channel indexed PNG; the palette index is the label.
pub fn write_indexed_png(path: &Path, labels: &Array2<u16>, colors: &[[u8; 3]]) -> Result<()> {
    let (h, w) = labels.dim();
    if labels.iter().any(|&l| l as usize >= colors.len().min(256)) {
        return Err(Error::ShapeMismatch(format!(
            "label outside a palette of {} entries",
            colors.len()
        )));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(colors.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}

/// Reads raw indices of an 8-bit indexed or grayscale PNG.
pub fn read_indexed_png(path: &Path) -> Result<Array2<u16>> {
    let file = File::open(path).map_err(|_| Error::MissingImage(path.to_path_buf()))?;
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptFile(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::CorruptFile(format!(
            "{}: expected an 8-bit single-channel PNG",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| buf[y * info.line_size + x] as u16))
}
