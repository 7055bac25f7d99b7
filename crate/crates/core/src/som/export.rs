use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Metric, SomGrid};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// JSON sidecar describing a raw prototype dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHeader {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub metric: Metric,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the prototypes as `M·dim` little-endian `f64`s to `path` and the
/// header to `path` + `.json`.
pub fn write_raw(grid: &SomGrid, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = grid.prototypes().data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = PrototypeHeader {
        height: grid.height(),
        width: grid.width(),
        dim: grid.dim(),
        metric: grid.metric(),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serialises");
    let side = sidecar(path);
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn read_raw(path: &Path) -> Result<SomGrid> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: PrototypeHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: side.clone(),
        msg: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = header.height * header.width;
    if bytes.len() != m * header.dim * 8 {
        return Err(Error::Integrity {
            path: path.to_owned(),
            msg: format!("expected {} bytes, found {}", m * header.dim * 8, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SomGrid::from_prototypes(
        header.height,
        header.width,
        header.metric,
        Tensor::new(&[m, header.dim], data)?,
    )
}

/// Tiles `rows×cols` images (each `channels×tile_h×tile_w`, values in
/// `[0, 1]`) into one binary PGM (1 channel) or PPM (3 channels), with a
/// one-pixel dark border between tiles.
pub fn render_tiles(
    tiles: &[Vec<f64>],
    rows: usize,
    cols: usize,
    channels: usize,
    tile_h: usize,
    tile_w: usize,
) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(Error::Export(format!("cannot render {channels}-channel tiles")));
    }
    if tiles.len() != rows * cols {
        return Err(Error::Export(format!("{} tiles for a {rows}x{cols} grid", tiles.len())));
    }
    let tile_len = channels * tile_h * tile_w;
    if let Some(bad) = tiles.iter().find(|t| t.len() != tile_len) {
        return Err(Error::Export(format!(
            "tile of {} values, expected {channels}x{tile_h}x{tile_w}",
            bad.len()
        )));
    }
    const PAD: usize = 1;
    let width = cols * (tile_w + PAD) + PAD;
    let height = rows * (tile_h + PAD) + PAD;
    let mut pixels = vec![0u8; width * height * channels];
    for (t, tile) in tiles.iter().enumerate() {
        let (tr, tc) = (t / cols, t % cols);
        let y0 = PAD + tr * (tile_h + PAD);
        let x0 = PAD + tc * (tile_w + PAD);
        for y in 0..tile_h {
            for x in 0..tile_w {
                for c in 0..channels {
                    let v = tile[c * tile_h * tile_w + y * tile_w + x];
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    pixels[((y0 + y) * width + x0 + x) * channels + c] = byte;
                }
            }
        }
    }
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}
