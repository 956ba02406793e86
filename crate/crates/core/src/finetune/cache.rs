use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::label::LabelPoint;
use crate::model::{run_layers, FeatureState, ModelParams, ScenePrediction, TileGrid, TileId};
use crate::nn::Tensor;

/// Trunk activations at a fixed program cut, per scene tile.
///
/// Features are computed once per tile that holds at least one label; later
/// retrains with more labels only run the trunk on newly touched tiles.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    cut: usize,
    fingerprint: u64,
    grid: TileGrid,
    tiles: BTreeMap<TileId, FeatureState<f32>>,
    executions: usize,
}

/// Labels of one tile, in tile-output coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TileLabels {
    pub tile: TileId,
    pub labels: Vec<LabelPoint>,
}

impl FeatureCache {
    pub fn new(params: &ModelParams, cut: usize, scene_rows: usize, scene_cols: usize) -> Result<Self> {
        let layers = params.spec.layers().len();
        if cut >= layers {
            return Err(Error::config(format!(
                "cache cut {cut} must precede the final layer ({layers} layers)"
            )));
        }
        Ok(FeatureCache {
            cut,
            fingerprint: params.trunk_fingerprint(cut),
            grid: TileGrid::new(&params.spec, scene_rows, scene_cols)?,
            tiles: BTreeMap::new(),
            executions: 0,
        })
    }

    pub fn cut(&self) -> usize {
        self.cut
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Trunk forward passes performed over the cache's lifetime.
    pub fn trunk_executions(&self) -> usize {
        self.executions
    }

    pub fn cached_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn state(&self, tile: TileId) -> Option<&FeatureState<f32>> {
        self.tiles.get(&tile)
    }

    /// Error unless `params` has the trunk these features came from.
    pub fn check(&self, params: &ModelParams) -> Result<()> {
        let current = params.trunk_fingerprint(self.cut);
        if current != self.fingerprint {
            return Err(Error::StaleCache {
                cached: self.fingerprint,
                current,
            });
        }
        Ok(())
    }

    /// Compute features for every tile holding one of `labels` that is not
    /// cached yet. Returns the number of trunk executions performed.
    pub fn update(&mut self, params: &ModelParams, image: &Tensor<f32>, labels: &[LabelPoint]) -> Result<usize> {
        self.check(params)?;
        let mut missing = Vec::new();
        for l in labels {
            let (tile, _, _) = self.grid.locate(l.row, l.col)?;
            if !self.tiles.contains_key(&tile) && !missing.contains(&tile) {
                missing.push(tile);
            }
        }
        let layers = params.spec.layers();
        let trunk = &layers[..self.cut];
        let grid = self.grid;
        let computed = missing
            .par_iter()
            .map(|&tile| {
                let input = grid.crop_input(image, tile)?;
                let (input, _) = params.prepare_input(&input)?;
                Ok((tile, run_layers(trunk, &params.tensors, FeatureState::new(input))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = computed.len();
        self.tiles.extend(computed);
        self.executions += n;
        Ok(n)
    }

    /// Compute features for every tile of the grid.
    pub fn fill(&mut self, params: &ModelParams, image: &Tensor<f32>) -> Result<usize> {
        let grid = self.grid;
        let everywhere: Vec<LabelPoint> = grid
            .tiles()
            .map(|t| LabelPoint::new(grid.offset + t.row * grid.output, grid.offset + t.col * grid.output, 0))
            .collect();
        self.update(params, image, &everywhere)
    }

    /// Whole-scene prediction from cached features; requires a filled cache.
    /// Equals the tiled forward pass of `params` on the cached image.
    pub fn predict(&self, params: &ModelParams) -> Result<ScenePrediction> {
        self.check(params)?;
        if self.tiles.len() != self.grid.tile_count() {
            return Err(Error::config(format!(
                "cache holds {} of {} tiles; fill it before predicting",
                self.tiles.len(),
                self.grid.tile_count()
            )));
        }
        let layers = params.spec.layers();
        let tail = &layers[self.cut..];
        let states: Vec<(&TileId, &FeatureState<f32>)> = self.tiles.iter().collect();
        let outs = states
            .par_iter()
            .map(|(&tile, state)| Ok((tile, run_layers(tail, &params.tensors, (*state).clone())?.current)))
            .collect::<Result<Vec<_>>>()?;
        ScenePrediction::from_tiles(&self.grid, &outs)
    }

    /// Group scene-coordinate labels by tile, in tile order.
    pub fn group(&self, labels: &[LabelPoint]) -> Result<Vec<TileLabels>> {
        let mut groups: BTreeMap<TileId, Vec<LabelPoint>> = BTreeMap::new();
        for l in labels {
            let (tile, r, c) = self.grid.locate(l.row, l.col)?;
            if !self.tiles.contains_key(&tile) {
                return Err(Error::config(format!(
                    "label at ({}, {}) lies in tile ({}, {}) which has no cached features",
                    l.row, l.col, tile.row, tile.col
                )));
            }
            groups.entry(tile).or_default().push(LabelPoint::new(r, c, l.class));
        }
        Ok(groups
            .into_iter()
            .map(|(tile, labels)| TileLabels { tile, labels })
            .collect())
    }
}
