//! 8-bit RGB image codecs (binary PPM and PNG) and bilinear resampling.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Reads a P6 or PNG file into a `[3, H, W]` map with values `byte / 255`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(Error::Format("unsupported image container (expected P6 PPM or PNG)".into()))
    }
}

fn planar(width: usize, height: usize, rgb: &[u8]) -> Result<Tensor> {
    let plane = width * height;
    let mut values = vec![0.0; 3 * plane];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            values[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new([3, height, width], values)
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for (slot, what) in header.iter_mut().zip(["width", "height", "maxval"]) {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Corruption(format!("PPM header ends before {what}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PPM {what} is not a number")))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero extent".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Corruption("PPM header not terminated".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Corruption(format!(
            "PPM raster has {} of {need} bytes",
            raster.len()
        )));
    }
    planar(width, height, &raster[..need])
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let corrupt = |e: png::DecodingError| Error::Corruption(format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Format(format!("PNG color type {other:?}"))),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks(stride).take(h) {
        for px in row[..w * channels].chunks_exact(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    planar(w, h, &rgb)
}

fn to_bytes(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected a [3,H,W] image, got {:?}", image.shape())));
    };
    let plane = h * w;
    let v = image.values();
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            rgb.push((v[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w, h, rgb))
}

/// PNG bytes of a `[3, H, W]` map in `[0, 1]`.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_bytes(image)?;
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format(format!("PNG encode: {e}"));
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(&rgb).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(out)
}

pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear sample of one `h × w` plane at fractional `(y, x)`. Neighbours
/// outside the plane count as zero.
#[inline]
pub fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as i64, x0 as i64);
    let at = |yy: i64, xx: i64| {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let weight = wy * wx;
            if weight != 0.0 {
                v += weight * at(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Resamples `[C, H, W]` to `[C, out_h, out_w]` on pixel centres, clamping at
/// the border.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected [C,H,W], got {:?}", image.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Size("resize target must be non-empty".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.values().chunks(h * w) {
        for oy in 0..out_h {
            let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            for ox in 0..out_w {
                let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                out.push(sample_bilinear(plane, h, w, y, x));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, raster: &[u8]) -> Vec<u8> {
        let mut b = format!("P6\n# comment\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(raster);
        b
    }

    #[test]
    fn ppm_pixels() {
        let white = decode_bytes(&ppm(1, 1, &[255, 255, 255])).unwrap();
        assert_eq!(white.shape(), &[3, 1, 1]);
        assert_eq!(white.values(), &[1.0, 1.0, 1.0]);
        let black = decode_bytes(&ppm(1, 1, &[0, 0, 0])).unwrap();
        assert_eq!(black.values(), &[0.0; 3]);
        let rg = decode_bytes(&ppm(2, 1, &[255, 0, 0, 0, 255, 0])).unwrap();
        assert_eq!(rg.shape(), &[3, 1, 2]);
        assert_eq!(rg.values(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn container_errors() {
        assert!(matches!(decode_bytes(b"GIF89a"), Err(Error::Format(_))));
        assert!(matches!(
            decode_bytes(&ppm(2, 2, &[1, 2, 3])),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(decode_bytes(b"P6\n2 2\n65535\n"), Err(Error::Format(_))));
        let png = encode_png(&Tensor::full([3, 4, 4], 0.5).unwrap()).unwrap();
        assert!(matches!(
            decode_bytes(&png[..png.len() - 20]),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn png_round_trip() {
        let values: Vec<f64> = (0..48).map(|i| (i * 5) as f64 / 255.0).collect();
        let img = Tensor::new([3, 4, 4], values).unwrap();
        let back = decode_bytes(&encode_png(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::new([3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);
        let flat = resize_bilinear(&Tensor::full([3, 5, 7], 0.25).unwrap(), 4, 3).unwrap();
        assert!(flat.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
