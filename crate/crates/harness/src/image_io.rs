//! Image export: binary PPM (P6) always, PNG with the `png` feature.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context as _, Result};
use draft_lab_core::{Real, Tensor};

/// `[3, h, w]` in `[0, 1]` to interleaved 8-bit RGB.
pub fn to_rgb8<R: Real>(img: &Tensor<R>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[0] == 3, "expected a [3, h, w] image, got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].as_f64();
                let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok((h, w, out))
}

pub fn encode_ppm<R: Real>(img: &Tensor<R>) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_rgb8(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

pub fn write_ppm<R: Real>(path: &Path, img: &Tensor<R>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_ppm(img)?).with_context(|| format!("writing {}", path.display()))
}

/// Parses a P6 file written by [`encode_ppm`].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        ensure!(start < i, "truncated PPM header");
        fields.push(std::str::from_utf8(&bytes[start..i])?.to_string());
    }
    ensure!(fields[0] == "P6" && fields[3] == "255", "not an 8-bit P6 file");
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let px = &bytes[i + 1..];
    ensure!(px.len() == 3 * w * h, "PPM payload has {} bytes, expected {}", px.len(), 3 * w * h);
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.data_mut()[(c * h + y) * w + x] = px[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(t)
}

#[cfg(feature = "png")]
pub fn write_png<R: Real>(path: &Path, img: &Tensor<R>) -> Result<()> {
    let (h, w, rgb) = to_rgb8(img)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&rgb)?;
    Ok(())
}

#[cfg(not(feature = "png"))]
pub fn write_png<R: Real>(_path: &Path, _img: &Tensor<R>) -> Result<()> {
    anyhow::bail!("PNG export needs the `png` feature")
}

/// Tiles equally sized images into one grid with `cols` columns.
pub fn grid<R: Real>(images: &[Tensor<R>], cols: usize) -> Result<Tensor<R>> {
    ensure!(!images.is_empty() && cols > 0, "empty grid");
    let s = images[0].shape().to_vec();
    ensure!(images.iter().all(|i| i.shape() == s.as_slice()), "grid images differ in shape");
    let (h, w) = (s[1], s[2]);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::zeros(&[3, gh, gw]);
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(c * gh + oy + y) * gw + ox + x] = img.data()[(c * h + y) * w + x];
                }
            }
        }
    }
    Ok(out)
}
