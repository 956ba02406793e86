//! GLRS raster files and PNG import.
//!
//! Layout (little-endian): magic `GLRS`, u16 version, u32 width, u32 height,
//! u32 bands, u8 has-labels flag, `bands·height·width` f32 planes, then an
//! optional `height·width` u8 label plane, then a CRC32 of everything before.

use std::io::Cursor;
use std::path::Path;

use crate::codec::{framed, put_f32s, put_u16, put_u32, seal, Reader};
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::{fnv64, Scene};

pub const RASTER_MAGIC: &[u8; 4] = b"GLRS";
pub const RASTER_VERSION: u16 = 1;
const MAX_PIXELS: usize = 1 << 26;
const MAX_BANDS: usize = 64;

pub fn raster_to_bytes(scene: &Scene) -> Vec<u8> {
    let (bands, rows, cols) = scene.image.dims3().expect("scene image is rank 3");
    let mut out = Vec::with_capacity(19 + scene.image.len() * 4 + rows * cols + 4);
    out.extend_from_slice(RASTER_MAGIC);
    put_u16(&mut out, RASTER_VERSION);
    put_u32(&mut out, cols as u32);
    put_u32(&mut out, rows as u32);
    put_u32(&mut out, bands as u32);
    out.push(scene.labels.is_some() as u8);
    put_f32s(&mut out, scene.image.data());
    if let Some(labels) = &scene.labels {
        out.extend_from_slice(labels);
    }
    seal(out)
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<Scene> {
    let body = framed(bytes, RASTER_MAGIC, RASTER_VERSION)?;
    let mut r = Reader::at(body, 6);
    let cols = r.u32("width")? as usize;
    let rows = r.u32("height")? as usize;
    let bands = r.u32("bands")? as usize;
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::format(
                r.pos() - 1,
                format!("label flag must be 0 or 1, got {other}"),
            ))
        }
    };
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(Error::format(6, "raster dimensions must be positive"));
    }
    let pixels = rows
        .checked_mul(cols)
        .filter(|&p| p <= MAX_PIXELS)
        .ok_or_else(|| Error::format(6, format!("{cols}x{rows} raster exceeds the size limit")))?;
    if bands > MAX_BANDS {
        return Err(Error::format(
            14,
            format!("{bands} bands exceeds the limit of {MAX_BANDS}"),
        ));
    }
    let expected = pixels * bands * 4 + if has_labels { pixels } else { 0 };
    if r.remaining() != expected {
        return Err(Error::format(
            r.pos(),
            format!(
                "header declares {cols}x{rows}x{bands} ({expected} payload bytes) but {} remain",
                r.remaining()
            ),
        ));
    }
    let data = r.f32s(pixels * bands, "band planes")?;
    let labels = if has_labels {
        Some(r.bytes(pixels, "label plane")?.to_vec())
    } else {
        None
    };
    Ok(Scene {
        image: Tensor::new(vec![bands, rows, cols], data)?,
        labels,
        fingerprint: fnv64(bytes),
    })
}

pub fn export_raster(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, raster_to_bytes(scene))?;
    Ok(())
}

pub fn import_raster(path: &Path) -> Result<Scene> {
    raster_from_bytes(&std::fs::read(path)?)
}

/// Decode a PNG into 8-bit samples: `(width, height, channels, samples)`.
fn decode_png(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let limits = png::Limits { bytes: MAX_PIXELS * 4 };
    let mut decoder = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(0, format!("{what}: {e}")))?;
    let (w, h) = (reader.info().width as usize, reader.info().height as usize);
    if w.saturating_mul(h) > MAX_PIXELS {
        return Err(Error::format(
            16,
            format!("{what}: {w}x{h} exceeds {MAX_PIXELS} pixels"),
        ));
    }
    // The decoder's palette expansion assumes whole RGB entries.
    if let Some(plte) = reader.info().palette.as_deref() {
        if plte.len() % 3 != 0 || plte.len() > 768 {
            return Err(Error::format(
                0,
                format!("{what}: palette of {} bytes is not whole RGB entries", plte.len()),
            ));
        }
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(0, format!("{what}: image too large")))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("{what}: {e}")))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Build a four-band scene from an RGB PNG, a grayscale near-infrared PNG and
/// an optional grayscale label PNG whose sample values are class indices.
/// Samples are scaled to `[0, 1]`; alpha channels are ignored.
pub fn import_png(rgb: &[u8], nir: &[u8], labels: Option<&[u8]>) -> Result<Scene> {
    let (w, h, ch, rgb_px) = decode_png(rgb, "rgb image")?;
    if ch < 3 {
        return Err(Error::format(
            0,
            format!("rgb image has {ch} channels, need at least 3"),
        ));
    }
    let (nw, nh, nch, nir_px) = decode_png(nir, "nir image")?;
    if (nw, nh) != (w, h) {
        return Err(Error::dim("nir image width", w, nw));
    }
    let n = w * h;
    let mut data = vec![0f32; 4 * n];
    for p in 0..n {
        for b in 0..3 {
            data[b * n + p] = rgb_px[p * ch + b] as f32 / 255.0;
        }
        data[3 * n + p] = nir_px[p * nch] as f32 / 255.0;
    }
    let labels = match labels {
        None => None,
        Some(bytes) => {
            let (lw, lh, lch, px) = decode_png(bytes, "label image")?;
            if (lw, lh) != (w, h) {
                return Err(Error::dim("label image width", w, lw));
            }
            Some((0..n).map(|p| px[p * lch]).collect())
        }
    };
    let mut hashed = Vec::with_capacity(rgb.len() + nir.len());
    hashed.extend_from_slice(rgb);
    hashed.extend_from_slice(nir);
    Ok(Scene {
        image: Tensor::new(vec![4, h, w], data)?,
        labels,
        fingerprint: fnv64(&hashed),
    })
}
