use std::io::Cursor;

use cseg_core::model::Segmentation;
use cseg_core::Tensor;
use image::{ImageBuffer, ImageFormat, Luma};

use crate::error::ApiError;

/// Decodes an RGB(A) or gray PNG into an `[h, w, 3]` tensor in `[0, 1]`.
pub fn decode_image(bytes: &[u8], max_side: usize) -> Result<Tensor<f32>, ApiError> {
    if bytes.is_empty() {
        return Err(ApiError::bad_request("decode_error", "empty image payload"));
    }
    let reader = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::bad_request("decode_error", e.to_string()))?;
    if w as usize > max_side || h as usize > max_side {
        return Err(ApiError::new(
            axum::http::StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("image is {w}x{h}, limit is {max_side} per side"),
        ));
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ApiError::bad_request("decode_error", e.to_string()))?
        .to_rgb8();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).map_err(ApiError::from)
}

/// Encodes an `[h, w, 3]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn encode_image(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w, _) = image.dims3();
    let raw = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<image::Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png encode");
    out.into_inner()
}

pub fn encode_labels(seg: &Segmentation) -> Vec<u8> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(seg.width() as u32, seg.height() as u32, seg.labels().to_vec()).expect("buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png encode");
    out.into_inner()
}

/// Width, height and row-major labels of a 16-bit label PNG.
pub fn decode_labels(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), ApiError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ApiError::bad_request("decode_error", e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => return Err(ApiError::bad_request("decode_error", format!("expected 16-bit gray, got {:?}", other.color()))),
    };
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}
