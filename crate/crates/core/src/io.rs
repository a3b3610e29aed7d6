//! PNG encoding for renders, semantic masks and depth maps.

use std::io::Cursor;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Colors for class ids, in merged-schema order.
pub const PALETTE: [[u8; 3]; 13] = [
    [0, 0, 0],
    [204, 153, 127],
    [102, 51, 0],
    [0, 102, 204],
    [153, 153, 0],
    [255, 153, 51],
    [255, 0, 0],
    [102, 204, 0],
    [204, 0, 102],
    [51, 25, 0],
    [153, 0, 204],
    [255, 204, 204],
    [0, 153, 153],
];

fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Round `[0, 1]` values to the nearest representable 8-bit level.
pub fn quantize_image(image: &Array3<f32>) -> Array3<f32> {
    image.mapv(|x| quantize(x) as f32 / 255.0)
}

/// `H x W x 3` floats in `[0, 1]` to 8-bit RGB PNG bytes.
pub fn encode_rgb(image: &Array3<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::shape("image", "H x W x 3", format!("{:?}", image.dim())));
    }
    let data: Vec<u8> = image.iter().map(|&x| quantize(x)).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Parse(e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| Error::Parse(e.to_string()))?;
    }
    Ok(out)
}

/// Decode any supported image (PNG, JPEG) to `H x W x 3` floats.
pub fn decode_rgb(bytes: &[u8]) -> Result<Array3<f32>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Parse(format!("image: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), data).expect("rgb buffer"))
}

/// Class ids to an indexed PNG whose palette covers every id.
pub fn encode_mask(labels: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = labels.dim();
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let entries = (max + 1).max(PALETTE.len());
    let mut palette = Vec::with_capacity(entries * 3);
    for i in 0..entries {
        let c = PALETTE.get(i).copied().unwrap_or([i as u8; 3]);
        palette.extend_from_slice(&c);
    }
    let data: Vec<u8> = labels.iter().copied().collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let mut writer = enc.write_header().map_err(|e| Error::Parse(e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| Error::Parse(e.to_string()))?;
    }
    Ok(out)
}

/// Read class ids from an indexed or 8-bit grayscale PNG.
pub fn decode_mask(bytes: &[u8]) -> Result<Array2<u8>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Parse(format!("mask png: {e}")))?;
    let (color, depth) = reader.output_color_type();
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if depth != png::BitDepth::Eight {
        return Err(Error::Parse(format!("mask png must be 8-bit, got {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Indexed | png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
    };
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h * channels)];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Parse(format!("mask png: {e}")))?;
    buf.truncate(frame.buffer_size());
    let stride = frame.line_size;
    // RGB masks are accepted when every pixel is gray (all channels equal).
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let px = &buf[i * stride + j * channels..i * stride + (j + 1) * channels];
            let gray = px[0];
            if channels >= 3 && (px[1] != gray || px[2] != gray) {
                return Err(Error::Parse("mask png must be indexed or grayscale".into()));
            }
            out[[i, j]] = gray;
        }
    }
    Ok(out)
}

/// Depth mapped linearly from `[near, far]` to 16-bit grayscale.
pub fn encode_depth(depth: &Array2<f32>, near: f64, far: f64) -> Result<Vec<u8>> {
    let (h, w) = depth.dim();
    let mut data = Vec::with_capacity(h * w * 2);
    for &d in depth {
        let t = ((d as f64 - near) / (far - near)).clamp(0.0, 1.0);
        data.extend_from_slice(&((t * 65535.0).round() as u16).to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(|e| Error::Parse(e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| Error::Parse(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse(message) => Error::Image {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    with_path(path, decode_rgb(&read_file(path)?))
}

pub fn write_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    write_file(path, &encode_rgb(image)?)
}

pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    with_path(path, decode_mask(&read_file(path)?))
}

pub fn write_mask(path: &Path, labels: &Array2<u8>) -> Result<()> {
    write_file(path, &encode_mask(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_is_exact() {
        let labels = Array2::from_shape_fn((5, 7), |(i, j)| ((i * 7 + j) % 13) as u8);
        let bytes = encode_mask(&labels).unwrap();
        assert_eq!(decode_mask(&bytes).unwrap(), labels);
        let wide = Array2::from_elem((2, 2), 40u8);
        assert_eq!(decode_mask(&encode_mask(&wide).unwrap()).unwrap(), wide);
    }

    #[test]
    fn rgb_round_trip_after_quantization() {
        let img = Array3::from_shape_fn((4, 3, 3), |(i, j, k)| ((i + j + k) as f32 * 0.137).fract());
        let q = quantize_image(&img);
        let back = decode_rgb(&encode_rgb(&img).unwrap()).unwrap();
        assert_eq!(back, q);
        assert_eq!(encode_rgb(&q).unwrap(), encode_rgb(&img).unwrap());
    }

    #[test]
    fn grayscale_mask_accepted() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[3, 17]).unwrap();
        }
        assert_eq!(decode_mask(&out).unwrap(), ndarray::arr2(&[[3u8, 17]]));
    }

    #[test]
    fn depth_png_is_sixteen_bit() {
        let d = ndarray::arr2(&[[1.0f32, 2.0]]);
        let bytes = encode_depth(&d, 1.0, 2.0).unwrap();
        let dec = png::Decoder::new(Cursor::new(bytes)).read_info().unwrap();
        assert_eq!(dec.info().bit_depth, png::BitDepth::Sixteen);
    }
}
