//! Network architecture description and the layer program derived from it.

use crate::error::{Error, Result};

/// Which preset a [`ModelSpec`] was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Small network trainable in seconds on a laptop.
    Desk,
    /// The full-size U-net: depth 4, 32 base filters, 240×240 patches.
    Paper,
    Custom,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
            Profile::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            "custom" => Ok(Profile::Custom),
            other => Err(Error::config(format!("unknown profile `{other}`"))),
        }
    }
}

/// U-net style encoder-decoder with valid padding.
///
/// Each of the `depth` encoder levels runs two 3×3 convolutions (the second
/// followed by group norm) and a 2×2 max-pool; filters double per level.
/// The decoder mirrors it with 2×2 transposed convolutions and center-cropped
/// skip connections. The last decoder level widens to `head_filters`, which a
/// 1×1 convolution maps to `classes` logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub depth: usize,
    pub base_filters: usize,
    pub head_filters: usize,
    pub classes: usize,
    pub channels: usize,
    pub groups: usize,
    /// Input extent of training patches and of inference tiles. Trimmed to
    /// the largest viable extent when it is not itself viable.
    pub patch_size: usize,
    pub profile: Profile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    GroupNorm {
        groups: usize,
    },
    Relu,
    MaxPool2x2,
    Deconv2x2,
    Softmax,
    /// Save the current map for a later [`LayerKind::ConcatSkip`].
    PushSkip,
    /// Pop the most recent saved map, center-crop it to the current extent
    /// and prepend it along the channel axis.
    ConcatSkip,
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::Deconv2x2)
    }

    pub fn has_params(&self) -> bool {
        self.is_conv() || matches!(self, LayerKind::GroupNorm { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Convolution whose channel mask (`<conv>.mask`) is applied to this
    /// op's output, if one is present in the parameters.
    pub mask_of: Option<String>,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            in_channels,
            out_channels,
            mask_of: None,
        }
    }

    /// Names of the parameter tensors this layer owns.
    pub fn param_names(&self) -> Vec<String> {
        match self.kind {
            k if k.is_conv() => vec![format!("{}.weight", self.name), format!("{}.bias", self.name)],
            LayerKind::GroupNorm { .. } => vec![format!("{}.gamma", self.name), format!("{}.beta", self.name)],
            _ => Vec::new(),
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            LayerKind::Conv3x3 => vec![vec![o, i, 3, 3], vec![o]],
            LayerKind::Conv1x1 => vec![vec![o, i, 1, 1], vec![o]],
            LayerKind::Deconv2x2 => vec![vec![o, i, 2, 2], vec![o]],
            LayerKind::GroupNorm { .. } => vec![vec![o], vec![o]],
            _ => Vec::new(),
        }
    }
}

/// Spatial bookkeeping of one axis through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisGeometry {
    pub input: usize,
    pub output: usize,
    /// Input index of output index 0.
    pub offset: usize,
}

/// Result of tracing an input extent through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub rows: AxisGeometry,
    pub cols: AxisGeometry,
}

impl ModelSpec {
    pub fn desk() -> Self {
        ModelSpec {
            depth: 2,
            base_filters: 8,
            head_filters: 16,
            classes: 4,
            channels: 4,
            groups: 4,
            patch_size: 64,
            profile: Profile::Desk,
        }
    }

    pub fn paper() -> Self {
        ModelSpec {
            depth: 4,
            base_filters: 32,
            head_filters: 64,
            classes: 4,
            channels: 4,
            groups: 8,
            patch_size: 240,
            profile: Profile::Paper,
        }
    }

    pub fn bottleneck_filters(&self) -> usize {
        self.base_filters << self.depth
    }

    fn level_filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.head_filters == 0 || self.classes < 2 || self.channels == 0 {
            return Err(Error::config(
                "filter, class and channel counts must be positive (classes >= 2)",
            ));
        }
        for layer in self.layers() {
            if let LayerKind::GroupNorm { groups } = layer.kind {
                if groups == 0 || layer.out_channels % groups != 0 {
                    return Err(Error::config(format!(
                        "{}: {} channels not divisible by {groups} groups",
                        layer.name, layer.out_channels
                    )));
                }
            }
        }
        if self.largest_viable(self.patch_size).is_none() {
            return Err(Error::config(format!(
                "patch size {} is below the minimum viable input extent {}",
                self.patch_size,
                self.min_input()
            )));
        }
        Ok(())
    }

    fn push_block(&self, out: &mut Vec<LayerSpec>, prefix: &str, cin: usize, cout: usize) {
        out.push(LayerSpec::new(format!("{prefix}.conv1"), LayerKind::Conv3x3, cin, cout));
        let mut relu1 = LayerSpec::new(format!("{prefix}.relu1"), LayerKind::Relu, cout, cout);
        relu1.mask_of = Some(format!("{prefix}.conv1"));
        out.push(relu1);
        out.push(LayerSpec::new(
            format!("{prefix}.conv2"),
            LayerKind::Conv3x3,
            cout,
            cout,
        ));
        out.push(LayerSpec::new(
            format!("{prefix}.norm"),
            LayerKind::GroupNorm { groups: self.groups },
            cout,
            cout,
        ));
        let mut relu2 = LayerSpec::new(format!("{prefix}.relu2"), LayerKind::Relu, cout, cout);
        relu2.mask_of = Some(format!("{prefix}.conv2"));
        out.push(relu2);
    }

    /// The full op sequence, input to per-pixel class distribution.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut ch = self.channels;
        for level in 0..self.depth {
            let f = self.level_filters(level);
            let prefix = format!("enc{level}");
            self.push_block(&mut out, &prefix, ch, f);
            out.push(LayerSpec::new(format!("{prefix}.skip"), LayerKind::PushSkip, f, f));
            out.push(LayerSpec::new(format!("{prefix}.pool"), LayerKind::MaxPool2x2, f, f));
            ch = f;
        }
        let mid = if self.depth == 0 {
            self.head_filters
        } else {
            self.bottleneck_filters()
        };
        self.push_block(&mut out, "mid", ch, mid);
        ch = mid;
        for level in (0..self.depth).rev() {
            let f = self.level_filters(level);
            let prefix = format!("up{level}");
            let mut deconv = LayerSpec::new(format!("{prefix}.deconv"), LayerKind::Deconv2x2, ch, f);
            deconv.mask_of = Some(deconv.name.clone());
            out.push(deconv);
            out.push(LayerSpec::new(
                format!("{prefix}.concat"),
                LayerKind::ConcatSkip,
                f,
                2 * f,
            ));
            let width = if level == 0 { self.head_filters } else { f };
            self.push_block(&mut out, &prefix, 2 * f, width);
            ch = width;
        }
        out.push(LayerSpec::new("head.conv", LayerKind::Conv1x1, ch, self.classes));
        out.push(LayerSpec::new(
            "head.softmax",
            LayerKind::Softmax,
            self.classes,
            self.classes,
        ));
        out
    }

    /// Trace one spatial axis through the program. `None` when some layer
    /// would have non-positive extent or a pooling input is odd (which would
    /// misalign the skip connections).
    pub fn axis_geometry(&self, input: usize) -> Option<AxisGeometry> {
        let mut len = input as i64;
        let mut origin = 0i64;
        let mut stride = 1i64;
        let mut skips: Vec<(i64, i64)> = Vec::new();
        for layer in self.layers() {
            match layer.kind {
                LayerKind::Conv3x3 => {
                    len -= 2;
                    origin += stride;
                }
                LayerKind::MaxPool2x2 => {
                    if len < 2 || len % 2 != 0 {
                        return None;
                    }
                    len /= 2;
                    stride *= 2;
                }
                LayerKind::Deconv2x2 => {
                    len *= 2;
                    stride /= 2;
                }
                LayerKind::PushSkip => skips.push((len, origin)),
                LayerKind::ConcatSkip => {
                    let (slen, sorigin) = skips.pop()?;
                    let margin = slen - len;
                    if margin < 0 || margin % 2 != 0 || sorigin + stride * margin / 2 != origin {
                        return None;
                    }
                }
                _ => {}
            }
            if len < 1 {
                return None;
            }
        }
        Some(AxisGeometry {
            input,
            output: len as usize,
            offset: origin as usize,
        })
    }

    /// Smallest viable input extent.
    pub fn min_input(&self) -> usize {
        (1..=1 << 16)
            .find(|&n| self.axis_geometry(n).is_some())
            .unwrap_or(usize::MAX)
    }

    /// Largest viable extent not exceeding `n`.
    pub fn largest_viable(&self, n: usize) -> Option<usize> {
        (1..=n).rev().find(|&m| self.axis_geometry(m).is_some())
    }

    /// Geometry of a `rows × cols` input after trimming each axis down to the
    /// largest viable extent (the trimmed rows/cols come off the bottom/right).
    pub fn geometry(&self, rows: usize, cols: usize) -> Result<Geometry> {
        let min = self.min_input();
        let extent_err = || Error::Extent {
            height: rows,
            width: cols,
            min,
        };
        let r = self.largest_viable(rows).ok_or_else(extent_err)?;
        let c = self.largest_viable(cols).ok_or_else(extent_err)?;
        Ok(Geometry {
            rows: self.axis_geometry(r).ok_or_else(extent_err)?,
            cols: self.axis_geometry(c).ok_or_else(extent_err)?,
        })
    }

    /// Index into [`ModelSpec::layers`] where the tail holding the final `k`
    /// convolutional layers begins.
    pub fn tail_start(&self, k: usize) -> Result<usize> {
        let layers = self.layers();
        let mut seen = 0;
        for (i, layer) in layers.iter().enumerate().rev() {
            if layer.kind.is_conv() {
                seen += 1;
                if seen == k {
                    return Ok(i);
                }
            }
        }
        Err(Error::config(format!(
            "model has only {seen} convolutional layers, asked for {k}"
        )))
    }

    /// Number of convolutional layers after the last up-sampling op; the
    /// range of tail cuts whose input is a single feature map.
    pub fn max_tail_k(&self) -> usize {
        let layers = self.layers();
        let last_up = layers.iter().rposition(|l| l.kind == LayerKind::Deconv2x2);
        layers
            .iter()
            .skip(last_up.map_or(0, |i| i + 1))
            .filter(|l| l.kind.is_conv())
            .count()
    }

    /// Name → shape of every parameter tensor.
    pub fn param_shapes(&self) -> std::collections::BTreeMap<String, Vec<usize>> {
        self.layers()
            .iter()
            .flat_map(|l| l.param_names().into_iter().zip(l.param_shapes()))
            .collect()
    }

    /// Viable extent actually used for patches and tiles.
    pub fn tile_input(&self) -> usize {
        self.largest_viable(self.patch_size).unwrap_or(self.patch_size)
    }

    /// Names of the convolutional layers, in forward order.
    pub fn conv_names(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .filter(|l| l.kind.is_conv())
            .map(|l| l.name)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Per-layer extent rules applied by hand to the desk layer list.
    fn desk_extent_by_hand(mut n: usize) -> usize {
        n -= 4; // enc0 convs
        n /= 2;
        n -= 4; // enc1
        n /= 2;
        n -= 4; // mid
        n *= 2;
        n -= 4; // up1
        n *= 2;
        n - 4 // up0, 1x1 head keeps extent
    }

    #[test]
    fn desk_extent_matches_hand_arithmetic() {
        let spec = ModelSpec::desk();
        let g = spec.axis_geometry(64).unwrap();
        assert_eq!(g.output, desk_extent_by_hand(64));
        assert_eq!(g.output, 24);
        assert_eq!(g.offset, 20);
        assert_eq!(spec.min_input(), 44);
        assert_eq!(spec.axis_geometry(200).unwrap().output, 160);
    }

    #[test]
    fn paper_profile_shape() {
        let spec = ModelSpec::paper();
        spec.validate().unwrap();
        assert_eq!(spec.bottleneck_filters(), 512);
        let layers = spec.layers();
        let head = layers.iter().find(|l| l.name == "head.conv").unwrap();
        assert_eq!((head.in_channels, head.out_channels), (64, 4));
        let pools = layers.iter().filter(|l| l.kind == LayerKind::MaxPool2x2).count();
        let ups = layers.iter().filter(|l| l.kind == LayerKind::Deconv2x2).count();
        assert_eq!((pools, ups), (4, 4));
        // 240 is not viable for four pooling levels; it trims to 236.
        assert!(spec.axis_geometry(240).is_none());
        let g = spec.geometry(240, 240).unwrap();
        assert_eq!(g.rows.input, 236);
        assert!(g.rows.output > 0 && g.rows.output < 236);
        assert_eq!(spec.min_input(), 188);
    }

    #[test]
    fn filters_double_per_level() {
        let spec = ModelSpec::paper();
        let layers = spec.layers();
        for level in 0..4 {
            let conv = layers.iter().find(|l| l.name == format!("enc{level}.conv2")).unwrap();
            assert_eq!(conv.out_channels, 32 << level);
        }
    }

    #[test]
    fn tail_cuts() {
        let spec = ModelSpec::desk();
        let layers = spec.layers();
        assert_eq!(layers[spec.tail_start(1).unwrap()].name, "head.conv");
        assert_eq!(layers[spec.tail_start(2).unwrap()].name, "up0.conv2");
        assert_eq!(layers[spec.tail_start(3).unwrap()].name, "up0.conv1");
        assert_eq!(spec.max_tail_k(), 3);
        let flat = ModelSpec {
            depth: 0,
            ..ModelSpec::desk()
        };
        assert_eq!(flat.tail_start(3).unwrap(), 0);
    }

    #[test]
    fn too_small_input_reports_minimum() {
        let err = ModelSpec::desk().geometry(40, 64).unwrap_err();
        assert!(matches!(err, Error::Extent { min: 44, .. }), "{err}");
    }

    #[test]
    fn trims_to_viable() {
        let g = ModelSpec::desk().geometry(66, 65).unwrap();
        assert_eq!(g.rows.input, 64);
        assert_eq!(g.cols.input, 64);
    }
}
