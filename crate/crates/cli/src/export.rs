//! Prototype export: a raw little-endian dump with a JSON sidecar, and a
//! tiled image of the decoded prototypes laid out on the map grid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vit_som::model::VitSom;
use vit_som::ndgrad::Tensor;
use vit_som::vit::Task;
use vit_som::{Error, Result};

use crate::run::io_err;

/// Pixels between neighbouring tiles.
const GAP: usize = 1;
const GAP_LEVEL: u8 = 128;

/// Sidecar describing a raw `f64` dump.
#[derive(Clone, Debug, Serialize)]
pub struct RawSidecar {
    pub dtype: &'static str,
    pub shape: Vec<usize>,
    pub map_height: usize,
    pub map_width: usize,
    pub metric: String,
    pub step: u64,
}

/// An 8-bit image in row-major, channel-interleaved order.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl TiledImage {
    /// Binary PGM (`P5`) for one channel, PPM (`P6`) for three.
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Export(format!("{c}-channel tiles have no PNM encoding"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        Ok(out)
    }

    pub fn extension(&self) -> &'static str {
        if self.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }
}

/// Tiles `images: [rows·cols, C, H, W]` into one picture, tile `r·cols + c`
/// at grid position `(r, c)`. Values are clamped to `[0, 1]`.
pub fn render_tiles(images: &Tensor, rows: usize, cols: usize) -> Result<TiledImage> {
    let s = images.shape();
    if s.len() != 4 || s[0] != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::Export(format!(
            "cannot tile images of shape {s:?} on a {rows}×{cols} grid"
        )));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    if c != 1 && c != 3 {
        return Err(Error::Export(format!("{c}-channel images cannot be rendered")));
    }
    let width = cols * w + (cols - 1) * GAP;
    let height = rows * h + (rows - 1) * GAP;
    let mut pixels = vec![GAP_LEVEL; width * height * c];
    let data = images.data();
    for tile in 0..rows * cols {
        let (r, col) = (tile / cols, tile % cols);
        let (y0, x0) = (r * (h + GAP), col * (w + GAP));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = data[((tile * c + ch) * h + y) * w + x];
                    let level = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) * 255.0 };
                    pixels[((y0 + y) * width + x0 + x) * c + ch] = level.round() as u8;
                }
            }
        }
    }
    Ok(TiledImage {
        width,
        height,
        channels: c,
        pixels,
    })
}

pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Files written by [`export_prototypes`].
#[derive(Clone, Debug, Serialize)]
pub struct Exported {
    pub raw: PathBuf,
    pub sidecar: PathBuf,
    pub image: PathBuf,
}

/// Writes the raw prototype dump, then renders the decoded prototypes.
///
/// Only clustering models carry a decoder; a classification map lives in
/// latent space with no pixel rendering, which is an export error (the raw
/// dump is still written).
pub fn export_prototypes(model: &VitSom, step: u64, out: &Path) -> Result<Exported> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let protos = model.store().tensor(model.prototypes_id());
    let cfg = model.config();
    let raw = out.join("prototypes.bin");
    fs::write(&raw, encode_raw(protos)).map_err(|e| io_err(&raw, e))?;
    let sidecar = out.join("prototypes.json");
    let meta = RawSidecar {
        dtype: "f64le",
        shape: protos.shape().to_vec(),
        map_height: cfg.map_height,
        map_width: cfg.map_width,
        metric: cfg.metric.to_string(),
        step,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Export(e.to_string()))?;
    fs::write(&sidecar, json + "\n").map_err(|e| io_err(&sidecar, e))?;

    if model.task() != Task::Clustering {
        return Err(Error::Export(format!(
            "prototypes of dimension {} live in the latent space of a classification model, \
             which has no decoder; only the raw dump was written",
            protos.shape()[1]
        )));
    }
    let decoded = model.decode_latents(protos)?;
    let tiles = render_tiles(&decoded, cfg.map_height, cfg.map_width)?;
    let image = out.join(format!("prototypes.{}", tiles.extension()));
    fs::write(&image, tiles.to_pnm()?).map_err(|e| io_err(&image, e))?;
    Ok(Exported { raw, sidecar, image })
}
