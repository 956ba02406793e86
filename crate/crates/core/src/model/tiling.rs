//! Fixed tiling of a scene into model-sized input windows whose outputs
//! abut without overlap.
//!
//! Group normalization makes every output pixel depend on statistics of its
//! whole tile, so a pixel's prediction is only well defined relative to a
//! tiling. Training on cached tile features and evaluating the scene both
//! use the same grid, so the two always agree.

use rayon::prelude::*;

use super::params::ModelParams;
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::label::Extent;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileId {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub scene_rows: usize,
    pub scene_cols: usize,
}

impl TileGrid {
    pub fn new(spec: &ModelSpec, scene_rows: usize, scene_cols: usize) -> Result<Self> {
        let input = spec.tile_input();
        let g = spec.axis_geometry(input).ok_or_else(|| Error::Extent {
            height: input,
            width: input,
            min: spec.min_input(),
        })?;
        if scene_rows < input || scene_cols < input {
            return Err(Error::Extent {
                height: scene_rows,
                width: scene_cols,
                min: input,
            });
        }
        Ok(TileGrid {
            input,
            output: g.output,
            offset: g.offset,
            tile_rows: (scene_rows - input) / g.output + 1,
            tile_cols: (scene_cols - input) / g.output + 1,
            scene_rows,
            scene_cols,
        })
    }

    /// Pixels covered by some tile's output.
    pub fn extent(&self) -> Extent {
        Extent::new(
            self.offset,
            self.offset,
            self.tile_rows * self.output,
            self.tile_cols * self.output,
        )
    }

    pub fn tiles(&self) -> impl Iterator<Item = TileId> + '_ {
        (0..self.tile_rows).flat_map(move |row| (0..self.tile_cols).map(move |col| TileId { row, col }))
    }

    pub fn tile_count(&self) -> usize {
        self.tile_rows * self.tile_cols
    }

    /// Tile containing scene pixel `(row, col)` and the pixel's position in
    /// that tile's output.
    pub fn locate(&self, row: usize, col: usize) -> Result<(TileId, usize, usize)> {
        let ext = self.extent();
        if !ext.contains(row, col) {
            return Err(Error::Coordinate {
                row,
                col,
                extent: format!("predictable extent {ext}"),
            });
        }
        let (r, c) = (row - self.offset, col - self.offset);
        Ok((
            TileId {
                row: r / self.output,
                col: c / self.output,
            },
            r % self.output,
            c % self.output,
        ))
    }

    /// Scene coordinate of the tile input's top-left pixel.
    pub fn input_origin(&self, tile: TileId) -> (usize, usize) {
        (tile.row * self.output, tile.col * self.output)
    }

    pub fn crop_input(&self, image: &Tensor<f32>, tile: TileId) -> Result<Tensor<f32>> {
        let (c, h, w) = image.dims3()?;
        if h != self.scene_rows || w != self.scene_cols {
            return Err(Error::dim("scene rows", self.scene_rows, h));
        }
        let (r0, c0) = self.input_origin(tile);
        crop(image, c, r0, c0, self.input, self.input)
    }
}

pub(crate) fn crop(
    image: &Tensor<f32>,
    c: usize,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
) -> Result<Tensor<f32>> {
    let (_, h, w) = image.dims3()?;
    let mut data = Vec::with_capacity(c * rows * cols);
    for ch in 0..c {
        for i in 0..rows {
            let s = (ch * h + r0 + i) * w + c0;
            data.extend_from_slice(&image.data()[s..s + cols]);
        }
    }
    Tensor::new(vec![c, rows, cols], data)
}

/// Class distributions over a scene's predictable extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    /// `[classes, extent.rows, extent.cols]`.
    pub probs: Tensor<f32>,
    pub extent: Extent,
}

impl ScenePrediction {
    pub fn classes(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Class distribution at scene pixel `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> Vec<f32> {
        let (r, c) = (row - self.extent.row0, col - self.extent.col0);
        let plane = self.extent.area();
        (0..self.classes())
            .map(|k| self.probs.data()[k * plane + r * self.extent.cols + c])
            .collect()
    }

    /// Most likely class at `(row, col)`; ties go to the lower class index.
    pub fn argmax_at(&self, row: usize, col: usize) -> usize {
        argmax(&self.at(row, col))
    }

    /// Row-major argmax raster over the extent.
    pub fn argmax_raster(&self) -> Vec<u8> {
        let plane = self.extent.area();
        let n = self.classes();
        (0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..n {
                    if self.probs.data()[k * plane + p] > self.probs.data()[best * plane + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Assemble from per-tile output maps laid out on `grid`.
    pub fn from_tiles(grid: &TileGrid, tiles: &[(TileId, Tensor<f32>)]) -> Result<Self> {
        let extent = grid.extent();
        let n = tiles
            .first()
            .map(|(_, t)| t.shape()[0])
            .ok_or(Error::Empty("tile set"))?;
        let mut probs = Tensor::zeros(&[n, extent.rows, extent.cols]);
        let o = grid.output;
        for (tile, t) in tiles {
            if t.shape() != [n, o, o] {
                return Err(Error::dim("tile output", n * o * o, t.len()));
            }
            let (r0, c0) = (tile.row * o, tile.col * o);
            for k in 0..n {
                for i in 0..o {
                    let dst = (k * extent.rows + r0 + i) * extent.cols + c0;
                    let src = (k * o + i) * o;
                    probs.data_mut()[dst..dst + o].copy_from_slice(&t.data()[src..src + o]);
                }
            }
        }
        Ok(ScenePrediction { probs, extent })
    }
}

pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Tiled forward pass over a whole scene image.
pub fn predict_scene(params: &ModelParams, image: &Tensor<f32>) -> Result<ScenePrediction> {
    let (_, h, w) = image.dims3()?;
    let grid = TileGrid::new(&params.spec, h, w)?;
    let tiles: Vec<TileId> = grid.tiles().collect();
    let outs = tiles
        .par_iter()
        .map(|&t| {
            let input = grid.crop_input(image, t)?;
            Ok((t, params.forward(&input)?.probs))
        })
        .collect::<Result<Vec<_>>>()?;
    ScenePrediction::from_tiles(&grid, &outs)
}
