#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use landtune::eval::ClassRaster;
use landtune::harness::{train_source_model, BaseRecipe};
use landtune::model::{Checkpoint, ModelParams, Provenance};
use landtune::palette::Palette;
use landtune::Extent;
use landtune::LabelPoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The default source-domain base model. Training is deterministic, so the
/// checkpoint is kept in the cargo tmpdir and reused across test binaries.
pub fn base() -> &'static ModelParams {
    static BASE: OnceLock<ModelParams> = OnceLock::new();
    BASE.get_or_init(|| {
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("landtune-default-base.glck");
        if let Ok(ck) = Checkpoint::load(&path) {
            return ck.params;
        }
        let params = train_source_model(&BaseRecipe::default()).unwrap().params;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        checkpoint(&params).save(&tmp).unwrap();
        std::fs::rename(&tmp, &path).unwrap();
        params
    })
}

pub fn checkpoint(params: &ModelParams) -> Checkpoint {
    Checkpoint {
        params: params.clone(),
        palette: Palette::land_cover(),
        provenance: Provenance { seed: 0, epochs: 10 },
    }
}

/// `count` distinct ground-truth points drawn uniformly from `extent`.
pub fn random_labels(truth: &ClassRaster, extent: Extent, count: usize, seed: u64) -> Vec<LabelPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r = rng.random_range(extent.row0..extent.row0 + extent.rows);
        let c = rng.random_range(extent.col0..extent.col0 + extent.cols);
        if seen.insert((r, c)) {
            out.push(LabelPoint::new(r, c, truth.at(r, c) as usize));
        }
    }
    out
}
