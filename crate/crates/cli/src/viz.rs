//! Portable-pixmap rendering of a frame with two marked points.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};
use stsn_core::Tensor;

use crate::error::CliError;

const REFERENCE: Rgb<u8> = Rgb([255, 0, 0]);
const SAMPLED: Rgb<u8> = Rgb([0, 255, 0]);

/// Grayscale frame `[1, H, W]` with a red cross at `reference` and a green one at `sampled`.
pub fn render(frame: &Tensor<f64>, reference: (f64, f64), sampled: (f64, f64)) -> RgbImage {
    let (h, w) = (frame.dims()[1], frame.dims()[2]);
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = frame.at(&[0, y as usize, x as usize]).clamp(0.0, 1.0);
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    mark(&mut img, reference, REFERENCE);
    mark(&mut img, sampled, SAMPLED);
    img
}

/// Plus-shaped marker of arm length 2 at the pixel containing `(y, x)`, clipped to the image.
fn mark(img: &mut RgbImage, (y, x): (f64, f64), color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (cy, cx) = (y.floor() as i64, x.floor() as i64);
    for d in -2..=2i64 {
        for (py, px) in [(cy + d, cx), (cy, cx + d)] {
            if (0..h).contains(&py) && (0..w).contains(&px) {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
    }
}

/// Binary P6 pixmap.
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path.display(), e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| CliError::io(path.display(), e))
}
