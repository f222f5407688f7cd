use std::io::Cursor;
use std::sync::Arc;

use image::imageops::FilterType;
use image::{ImageFormat, ImageReader, RgbImage};

use super::{ImageAttachment, ProviderError};

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, ProviderError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ProviderError::UnsupportedImage(e.to_string()))?;
    let img = reader
        .decode()
        .map_err(|e| ProviderError::UnsupportedImage(e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

fn dimensions(bytes: &[u8]) -> Result<(u32, u32), ProviderError> {
    ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ProviderError::UnsupportedImage(e.to_string()))?
        .into_dimensions()
        .map_err(|e| ProviderError::UnsupportedImage(e.to_string()))
}

/// Re-encodes as PNG with the longest side at most `cap`; `None` when the
/// image already fits.
pub fn downscale_to_cap(bytes: &[u8], cap: u32) -> Result<Option<Vec<u8>>, ProviderError> {
    let (w, h) = dimensions(bytes)?;
    if w.max(h) <= cap || cap == 0 {
        return Ok(None);
    }
    let scale = cap as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    let img = decode_rgb(bytes)?;
    let resized = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
    Ok(Some(encode_png(&resized)))
}

pub(crate) fn cap_attachment(img: &ImageAttachment, cap: u32) -> Result<ImageAttachment, ProviderError> {
    match downscale_to_cap(&img.data, cap)? {
        None => Ok(img.clone()),
        Some(bytes) => Ok(ImageAttachment {
            media_type: "image/png".into(),
            data: Arc::new(bytes),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downscales_longest_side() {
        let img = RgbImage::from_pixel(300, 100, image::Rgb([10, 20, 30]));
        let png = encode_png(&img);
        assert!(downscale_to_cap(&png, 300).unwrap().is_none());
        let small = downscale_to_cap(&png, 150).unwrap().unwrap();
        assert_eq!(dimensions(&small).unwrap(), (150, 50));
    }

    #[test]
    fn corrupt_payload_is_unsupported() {
        assert!(matches!(
            decode_rgb(b"definitely not an image"),
            Err(ProviderError::UnsupportedImage(_))
        ));
    }
}
