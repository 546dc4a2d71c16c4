//! Grayscale PNG encoding for images sent over HTTP.

use base64::Engine;

use crate::error::RunError;

pub fn to_gray8(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn encode_png(pixels: &[f64], side: usize) -> Result<Vec<u8>, RunError> {
    if pixels.len() != side * side {
        return Err(RunError::runtime(format!(
            "{} pixels do not form a {side}x{side} image",
            pixels.len()
        )));
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, side as u32, side as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(RunError::runtime)?;
    writer
        .write_image_data(&to_gray8(pixels))
        .map_err(RunError::runtime)?;
    writer.finish().map_err(RunError::runtime)?;
    Ok(out)
}

pub fn png_base64(pixels: &[f64], side: usize) -> Result<String, RunError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(pixels, side)?))
}

/// Decodes a base64 PNG to `(width, height, color type, bit depth, bytes)`.
pub fn decode_png_base64(
    b64: &str,
) -> Result<(u32, u32, png::ColorType, png::BitDepth, Vec<u8>), RunError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(RunError::runtime)?;
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(RunError::runtime)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(RunError::runtime)?;
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, info.color_type, info.bit_depth, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let px: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let (w, h, color, depth, bytes) = decode_png_base64(&png_base64(&px, 4).unwrap()).unwrap();
        assert_eq!((w, h), (4, 4));
        assert_eq!(color, png::ColorType::Grayscale);
        assert_eq!(depth, png::BitDepth::Eight);
        assert_eq!(bytes, to_gray8(&px));
        assert_eq!(bytes[0], 0);
        assert_eq!(bytes[15], 255);
        assert!(encode_png(&px, 5).is_err());
    }
}
