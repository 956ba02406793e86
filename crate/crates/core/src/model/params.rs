use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exec::{run_layers, FeatureState};
use super::spec::{Geometry, LayerKind, ModelSpec};
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

/// Network weights together with the architecture they belong to.
///
/// Values are never mutated in place by fine-tuning; every run produces a new
/// `ModelParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub tensors: ParamSet<f32>,
}

/// Per-pixel class distributions and where they sit in the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    /// `[classes, out_rows, out_cols]`.
    pub probs: Tensor<f32>,
    pub geometry: Geometry,
}

impl ProbabilityMap {
    /// Input-frame coordinate of output pixel `(0, 0)`.
    pub fn offset(&self) -> (usize, usize) {
        (self.geometry.rows.offset, self.geometry.cols.offset)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl ModelParams {
    /// He-uniform convolution weights, zero biases, unit gamma and zero beta.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = ParamSet::new();
        for layer in spec.layers() {
            let names = layer.param_names();
            let shapes = layer.param_shapes();
            match layer.kind {
                k if k.is_conv() => {
                    let ws = &shapes[0];
                    let fan_in = ws[1] * ws[2] * ws[3];
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    tensors.insert(
                        names[0].clone(),
                        Tensor::from_fn(ws, |_| rng.random_range(-bound..bound)),
                    );
                    tensors.insert(names[1].clone(), Tensor::zeros(&shapes[1]));
                }
                LayerKind::GroupNorm { .. } => {
                    tensors.insert(names[0].clone(), Tensor::full(&shapes[0], 1.0));
                    tensors.insert(names[1].clone(), Tensor::zeros(&shapes[1]));
                }
                _ => {}
            }
        }
        Ok(ModelParams {
            spec: spec.clone(),
            tensors,
        })
    }

    /// Crop the top-left viable region of `image` for a forward pass.
    pub fn prepare_input(&self, image: &Tensor<f32>) -> Result<(Tensor<f32>, Geometry)> {
        let (c, h, w) = image.dims3()?;
        if c != self.spec.channels {
            return Err(Error::dim("input channel", self.spec.channels, c));
        }
        let geo = self.spec.geometry(h, w)?;
        let (rh, rw) = (geo.rows.input, geo.cols.input);
        if rh == h && rw == w {
            return Ok((image.clone(), geo));
        }
        let mut data = Vec::with_capacity(c * rh * rw);
        for ch in 0..c {
            for i in 0..rh {
                let s = (ch * h + i) * w;
                data.extend_from_slice(&image.data()[s..s + rw]);
            }
        }
        Ok((Tensor::new(vec![c, rh, rw], data)?, geo))
    }

    /// Full forward pass. Deterministic; no stochastic layers at inference.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<ProbabilityMap> {
        let (input, geometry) = self.prepare_input(image)?;
        let out = run_layers(&self.spec.layers(), &self.tensors, FeatureState::new(input))?;
        Ok(ProbabilityMap {
            probs: out.current,
            geometry,
        })
    }

    /// Activation state at program index `cut` (input to `layers()[cut]`).
    pub fn state_at(&self, image: &Tensor<f32>, cut: usize) -> Result<FeatureState<f32>> {
        let layers = self.spec.layers();
        if cut > layers.len() {
            return Err(Error::config(format!("cut {cut} beyond {} layers", layers.len())));
        }
        let (input, _) = self.prepare_input(image)?;
        run_layers(&layers[..cut], &self.tensors, FeatureState::new(input))
    }

    /// The feature map feeding a tail of the last `k` convolutional layers.
    pub fn extract_features(&self, image: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
        let max = self.spec.max_tail_k();
        if k == 0 || k > max {
            return Err(Error::config(format!("tail cut k={k} outside 1..={max}")));
        }
        let cut = self.spec.tail_start(k)?;
        Ok(self.state_at(image, cut)?.current)
    }

    /// Runs the last-`k` tail on features from [`ModelParams::extract_features`].
    pub fn tail_forward(&self, k: usize, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let cut = self.spec.tail_start(k)?;
        let layers = self.spec.layers();
        Ok(run_layers(&layers[cut..], &self.tensors, FeatureState::new(features.clone()))?.current)
    }

    /// Names of all parameters owned by layers at or after `cut`.
    pub fn tail_param_names(&self, cut: usize) -> Vec<String> {
        self.spec.layers()[cut..].iter().flat_map(|l| l.param_names()).collect()
    }

    fn hash_where(&self, keep: impl Fn(&str) -> bool) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, t) in &self.tensors {
            if !keep(name) {
                continue;
            }
            h = fnv(h, name.as_bytes());
            for &d in t.shape() {
                h = fnv(h, &(d as u64).to_le_bytes());
            }
            for v in t.data() {
                h = fnv(h, &v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Hash of every parameter of the layers before `cut`.
    pub fn trunk_fingerprint(&self, cut: usize) -> u64 {
        let trunk: Vec<String> = self.spec.layers()[..cut.min(self.spec.layers().len())]
            .iter()
            .flat_map(|l| {
                let mut names = l.param_names();
                if l.kind.is_conv() {
                    names.push(format!("{}.mask", l.name));
                }
                names
            })
            .collect();
        let h = self.hash_where(|n| trunk.iter().any(|t| t == n));
        fnv(h, &(cut as u64).to_le_bytes())
    }

    pub fn fingerprint(&self) -> u64 {
        self.hash_where(|_| true)
    }

    /// CRC32 over every tensor's name and bit pattern.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(&v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize()
    }

    /// Grow the classifier by one output. The new class gets zero weights and
    /// a bias 10 below the smallest existing bias, so it never wins an argmax
    /// until it has been trained.
    pub fn add_class(&self) -> Result<ModelParams> {
        let mut next = self.clone();
        let n = self.spec.classes;
        let w = next
            .tensors
            .get("head.conv.weight")
            .ok_or_else(|| Error::config("missing head.conv.weight"))?;
        let features = w.shape()[1];
        let mut wdata = w.data().to_vec();
        wdata.extend(std::iter::repeat_n(0.0, features));
        let b = &next.tensors["head.conv.bias"];
        let min_bias = b.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let mut bdata = b.data().to_vec();
        bdata.push(min_bias - 10.0);
        next.tensors.insert(
            "head.conv.weight".into(),
            Tensor::new(vec![n + 1, features, 1, 1], wdata)?,
        );
        next.tensors
            .insert("head.conv.bias".into(), Tensor::new(vec![n + 1], bdata)?);
        next.spec.classes = n + 1;
        Ok(next)
    }

    /// Parameters of `self` that differ (bitwise) from `other`.
    pub fn changed_params(&self, other: &ModelParams) -> Vec<String> {
        let mut names: Vec<String> = self
            .tensors
            .iter()
            .filter(|(k, v)| {
                other
                    .tensors
                    .get(*k)
                    .is_none_or(|o| o.shape() != v.shape() || bits(o) != bits(v))
            })
            .map(|(k, _)| k.clone())
            .collect();
        names.extend(other.tensors.keys().filter(|k| !self.tensors.contains_key(*k)).cloned());
        names
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
