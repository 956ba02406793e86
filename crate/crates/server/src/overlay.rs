//! PNG encoding of prediction overlays and scene previews.

use landtune::nn::Tensor;
use landtune::palette::Palette;
use landtune::{Error, Result};

fn encode(w: usize, h: usize, color: png::ColorType, palette: Option<Vec<u8>>, px: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    let mut wr = enc.write_header().map_err(err)?;
    wr.write_image_data(px).map_err(err)?;
    wr.finish().map_err(err)?;
    Ok(out)
}

/// 8-bit indexed PNG; `PLTE` lists the palette colors in class order.
pub fn indexed_png(w: usize, h: usize, classes: &[u8], palette: &Palette) -> Result<Vec<u8>> {
    if classes.len() != w * h {
        return Err(Error::Dimension {
            axis: "overlay pixels".into(),
            expected: w * h,
            actual: classes.len(),
        });
    }
    let plte = palette.classes().iter().flat_map(|c| c.color).collect();
    encode(w, h, png::ColorType::Indexed, Some(plte), classes)
}

pub fn gray_png(w: usize, h: usize, px: &[u8]) -> Result<Vec<u8>> {
    encode(w, h, png::ColorType::Grayscale, None, px)
}

/// RGB preview of the first three bands, linearly scaled from `[0, 1]`.
pub fn preview_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c < 3 {
        return Err(Error::Dimension {
            axis: "preview bands".into(),
            expected: 3,
            actual: c,
        });
    }
    let n = h * w;
    let d = image.data();
    let mut px = Vec::with_capacity(3 * n);
    for p in 0..n {
        for b in 0..3 {
            px.push((d[b * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode(w, h, png::ColorType::Rgb, None, &px)
}
