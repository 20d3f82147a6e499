//! Equivariant feature pyramids: a toy backbone, lateral projections and a
//! top-down path whose fusion step is selected by [`Variant`].
//!
//! Level 0 is the finest. With `L` levels the backbone produces `C_0..C_{L-1}`
//! at spatial sizes `H, H/2, …`, and the pyramid returns `P_0..P_{L-1}` at the
//! same sizes:
//!
//! ```text
//! inner_{L-1} = lateral(C_{L-1})
//! inner_l     = fuse(lateral(C_l), upsample(A(inner_{l+1})))
//! P_l         = smooth(inner_l)
//! ```
//!
//! `A` is the identity, SE or ReCA and `fuse` is addition, plain iAFF or
//! ReAFF, depending on the variant.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::groupequiv::{
    check_orientations, group_conv_var, lift_conv_var, GroupConvParams, GroupConvVars, LiftConvParams, LiftConvVars,
    ReFeatureMap,
};
use crate::io::{LayerEntry, Manifest, ManifestReader, ManifestWriter};
use crate::params::Params;
use crate::reaff::{iaff_forward_var, reaff_forward_var, IAffParams, IAffVars, ReAFFParams, ReAFFVars};
use crate::reca::{
    clamp_reduction, reca_forward_var, se_forward_var, ReCAParams, ReCAVars, SEParams, SEVars, DEFAULT_REDUCTION,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "plus_se")]
    PlusSE,
    #[serde(rename = "plus_reca")]
    PlusReCA,
    #[serde(rename = "plus_iaff")]
    PlusIAFF,
    #[serde(rename = "reaffpn")]
    ReAFFPN,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::PlusSE,
        Variant::PlusReCA,
        Variant::PlusIAFF,
        Variant::ReAFFPN,
    ];

    /// Identifier used in configs and reports.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PlusSE => "plus_se",
            Variant::PlusReCA => "plus_reca",
            Variant::PlusIAFF => "plus_iaff",
            Variant::ReAFFPN => "reaffpn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "ReFPN",
            Variant::PlusSE => "ReFPN+Channel Attention",
            Variant::PlusReCA => "ReFPN+ReCA",
            Variant::PlusIAFF => "ReFPN+iAFF",
            Variant::ReAFFPN => "ReAFFPN",
        }
    }

    /// Whether the variant commutes with the group action for every `N`.
    /// The others only do so for the trivial group.
    pub fn is_equivariant(self) -> bool {
        matches!(self, Variant::Baseline | Variant::PlusReCA | Variant::ReAFFPN)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

fn default_levels() -> usize {
    4
}

fn default_in_channels() -> usize {
    3
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

fn default_kernel_size() -> usize {
    3
}

fn default_variant() -> Variant {
    Variant::ReAFFPN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Kernel channels `K` of every backbone and pyramid level.
    #[serde(alias = "lateral_kernel_channels")]
    pub kernel_channels: usize,
    pub orientations: usize,
    /// Requested attention bottleneck ratio; see [`PyramidConfig::effective_reduction`].
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Spatial extent of the backbone and smoothing kernels.
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    /// Zero every convolution bias, so a zero image maps to zero features.
    #[serde(default)]
    pub zero_bias: bool,
}

impl PyramidConfig {
    pub fn new(kernel_channels: usize, orientations: usize, variant: Variant) -> Self {
        Self {
            levels: default_levels(),
            in_channels: default_in_channels(),
            kernel_channels,
            orientations,
            reduction: default_reduction(),
            kernel_size: default_kernel_size(),
            variant,
            seed: 0,
            zero_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.levels > 16 {
            return bad(format!("levels must be at most 16, got {}", self.levels));
        }
        check_orientations(self.orientations).map_err(|e| Error::Config(e.to_string()))?;
        if self.in_channels == 0 || self.kernel_channels == 0 {
            return bad("in_channels and kernel_channels must be positive".into());
        }
        if self.reduction == 0 {
            return bad("reduction must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    /// The largest divisor of `K` not above the requested ratio, so the
    /// attention bottleneck keeps a whole number of channels.
    pub fn effective_reduction(&self) -> usize {
        clamp_reduction(self.kernel_channels, self.reduction)
    }

    pub fn channels(&self) -> usize {
        self.kernel_channels * self.orientations
    }

    /// Input extents must be divisible by this for every stride-2 stage to
    /// see an even grid.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::Rank {
                op: "pyramid input",
                expected: 4,
                shape: shape.to_vec(),
            });
        };
        if c != self.in_channels {
            return Err(Error::Dimension {
                op: "pyramid input",
                axis: 1,
                expected: self.in_channels,
                found: c,
            });
        }
        if h != w {
            return Err(Error::invalid(format!("pyramid input must be square, got {h}x{w}")));
        }
        let m = self.spatial_multiple();
        if h % m != 0 {
            return Err(Error::invalid(format!(
                "spatial size {h} not divisible by {m} (2^(levels-1) for {} levels)",
                self.levels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub stem: LiftConvParams,
    /// Two group convolutions per level; the first one of every level after
    /// the first has stride 2.
    pub levels: Vec<Vec<GroupConvParams>>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub stem: LiftConvVars,
    pub levels: Vec<Vec<GroupConvVars>>,
}

impl Params for BackboneParams {
    type Bound = BackboneVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.stem.tensors();
        v.extend(self.levels.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.stem.tensors_mut();
        v.extend(self.levels.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<BackboneVars> {
        Ok(BackboneVars {
            stem: self.stem.bind_from(vars)?,
            levels: self.levels.bind_from(vars)?,
        })
    }
}

/// Per-variant attention and fusion parameters, one entry per top-down
/// step. Entry `l` acts on the path from level `l + 1` into level `l`.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Baseline,
    PlusSE(Vec<SEParams>),
    PlusReCA(Vec<ReCAParams>),
    PlusIAFF(Vec<IAffParams>),
    ReAFFPN(Vec<ReAFFParams>),
}

#[derive(Clone, Debug)]
pub enum HeadVars {
    Baseline,
    PlusSE(Vec<SEVars>),
    PlusReCA(Vec<ReCAVars>),
    PlusIAFF(Vec<IAffVars>),
    ReAFFPN(Vec<ReAFFVars>),
}

impl HeadParams {
    pub fn variant(&self) -> Variant {
        match self {
            HeadParams::Baseline => Variant::Baseline,
            HeadParams::PlusSE(_) => Variant::PlusSE,
            HeadParams::PlusReCA(_) => Variant::PlusReCA,
            HeadParams::PlusIAFF(_) => Variant::PlusIAFF,
            HeadParams::ReAFFPN(_) => Variant::ReAFFPN,
        }
    }

    fn steps(&self) -> Option<usize> {
        match self {
            HeadParams::Baseline => None,
            HeadParams::PlusSE(v) => Some(v.len()),
            HeadParams::PlusReCA(v) => Some(v.len()),
            HeadParams::PlusIAFF(v) => Some(v.len()),
            HeadParams::ReAFFPN(v) => Some(v.len()),
        }
    }
}

impl Params for HeadParams {
    type Bound = HeadVars;

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            HeadParams::Baseline => Vec::new(),
            HeadParams::PlusSE(v) => v.tensors(),
            HeadParams::PlusReCA(v) => v.tensors(),
            HeadParams::PlusIAFF(v) => v.tensors(),
            HeadParams::ReAFFPN(v) => v.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            HeadParams::Baseline => Vec::new(),
            HeadParams::PlusSE(v) => v.tensors_mut(),
            HeadParams::PlusReCA(v) => v.tensors_mut(),
            HeadParams::PlusIAFF(v) => v.tensors_mut(),
            HeadParams::ReAFFPN(v) => v.tensors_mut(),
        }
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<HeadVars> {
        Ok(match self {
            HeadParams::Baseline => HeadVars::Baseline,
            HeadParams::PlusSE(v) => HeadVars::PlusSE(v.bind_from(vars)?),
            HeadParams::PlusReCA(v) => HeadVars::PlusReCA(v.bind_from(vars)?),
            HeadParams::PlusIAFF(v) => HeadVars::PlusIAFF(v.bind_from(vars)?),
            HeadParams::ReAFFPN(v) => HeadVars::ReAFFPN(v.bind_from(vars)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidParams {
    pub config: PyramidConfig,
    pub backbone: BackboneParams,
    /// 1×1 group convolution per level.
    pub lateral: Vec<GroupConvParams>,
    /// `kernel_size` group convolution per level, applied after fusion.
    pub smooth: Vec<GroupConvParams>,
    pub head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub backbone: BackboneVars,
    pub lateral: Vec<GroupConvVars>,
    pub smooth: Vec<GroupConvVars>,
    pub head: HeadVars,
    pub orientations: usize,
}

// Seed tags of the independently drawn parameter groups. The backbone and
// neck do not depend on the variant, so variants built from one seed share
// them and differ only in the head.
const TAG_BACKBONE: u64 = 1;
const TAG_NECK: u64 = 2;
const TAG_HEAD: u64 = 3;

impl PyramidParams {
    pub fn init(config: &PyramidConfig) -> Result<Self> {
        config.validate()?;
        let (k, n, ks, levels) = (
            config.kernel_channels,
            config.orientations,
            config.kernel_size,
            config.levels,
        );
        let r = config.effective_reduction();

        let mut rng = Rng::new(derive_seed(config.seed, TAG_BACKBONE));
        let stem = LiftConvParams::init(k, config.in_channels, ks, &mut rng)?;
        let backbone_levels = (0..levels)
            .map(|_| {
                (0..2)
                    .map(|_| GroupConvParams::init(k, k, n, ks, &mut rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rng = Rng::new(derive_seed(config.seed, TAG_NECK));
        let lateral = (0..levels)
            .map(|_| GroupConvParams::init(k, k, n, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let smooth = (0..levels)
            .map(|_| GroupConvParams::init(k, k, n, ks, &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let mut rng = Rng::new(derive_seed(config.seed, TAG_HEAD));
        let c = config.channels();
        let steps = levels - 1;
        let head = match config.variant {
            Variant::Baseline => HeadParams::Baseline,
            Variant::PlusSE => HeadParams::PlusSE(
                (0..steps)
                    .map(|_| SEParams::init(c, r, false, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            Variant::PlusReCA => HeadParams::PlusReCA(
                (0..steps)
                    .map(|_| ReCAParams::init_with_random_norm(c, n, r, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            Variant::PlusIAFF => HeadParams::PlusIAFF(
                (0..steps)
                    .map(|_| IAffParams::init(c, r, false, &mut rng))
                    .collect::<Result<_>>()?,
            ),
            Variant::ReAFFPN => HeadParams::ReAFFPN(
                (0..steps)
                    .map(|_| ReAFFParams::init(c, n, r, &mut rng))
                    .collect::<Result<_>>()?,
            ),
        };

        let mut p = Self {
            config: config.clone(),
            backbone: BackboneParams {
                stem,
                levels: backbone_levels,
            },
            lateral,
            smooth,
            head,
        };
        if config.zero_bias {
            p.zero_conv_biases();
        }
        Ok(p)
    }

    fn zero_conv_biases(&mut self) {
        let biases = std::iter::once(&mut self.backbone.stem.bias)
            .chain(self.backbone.levels.iter_mut().flatten().map(|c| &mut c.bias))
            .chain(self.lateral.iter_mut().map(|c| &mut c.bias))
            .chain(self.smooth.iter_mut().map(|c| &mut c.bias));
        for b in biases {
            *b = Tensor::zeros(b.shape());
        }
    }

    pub fn variant(&self) -> Variant {
        self.head.variant()
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn orientations(&self) -> usize {
        self.config.orientations
    }

    fn check_structure(&self) -> Result<()> {
        let l = self.config.levels;
        let ok = self.backbone.levels.len() == l
            && self.lateral.len() == l
            && self.smooth.len() == l
            && self.head.steps().is_none_or(|s| s + 1 == l);
        if !ok {
            return Err(Error::invalid(format!(
                "pyramid parameters do not describe {l} levels"
            )));
        }
        if self.head.variant() != self.config.variant {
            return Err(Error::Config(format!(
                "config variant {} does not match head parameters {}",
                self.config.variant,
                self.head.variant()
            )));
        }
        Ok(())
    }

    /// Backbone features and pyramid outputs, finest level first.
    pub fn forward(&self, x: &Tensor) -> Result<PyramidOutput> {
        self.config.validate_input(x.shape())?;
        self.check_structure()?;
        let n = self.orientations();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = self.bind(&mut tape)?;
        let feats = backbone_var(&mut tape, xv, &pv.backbone, n)?;
        let outs = pyramid_var(&mut tape, &feats, &pv)?;
        let collect = |vs: &[Var]| -> Result<Vec<ReFeatureMap>> {
            vs.iter()
                .map(|&v| ReFeatureMap::new(tape.value(v)?.clone(), n))
                .collect()
        };
        Ok(PyramidOutput {
            features: collect(&feats)?,
            pyramid: collect(&outs)?,
        })
    }

    /// Every layer as a manifest entry with its tensors, walked in the same
    /// order as [`Params::tensors`].
    pub fn layers(&self) -> Vec<LayerTensors<'_>> {
        let n = self.orientations();
        let c = self.config.channels();
        let r = self.config.effective_reduction();
        let stem = &self.backbone.stem;
        let mut out = vec![(
            LayerEntry {
                k_in: stem.c_in(),
                k_out: stem.k_out(),
                kernel_size: stem.kernel_size(),
                ..layer_entry("backbone.stem".into(), "lift_conv", n)
            },
            vec![("weight", &stem.weight), ("bias", &stem.bias)],
        )];
        for (l, convs) in self.backbone.levels.iter().enumerate() {
            for (j, p) in convs.iter().enumerate() {
                out.push(conv_layer(format!("backbone.level{l}.conv{j}"), p));
            }
        }
        for (l, p) in self.lateral.iter().enumerate() {
            out.push(conv_layer(format!("neck.lateral{l}"), p));
        }
        for (l, p) in self.smooth.iter().enumerate() {
            out.push(conv_layer(format!("neck.smooth{l}"), p));
        }
        match &self.head {
            HeadParams::Baseline => {}
            HeadParams::PlusSE(v) => {
                for (l, p) in v.iter().enumerate() {
                    out.push(se_layer(format!("head.step{l}.se"), p, n, c, r));
                }
            }
            HeadParams::PlusReCA(v) => {
                for (l, p) in v.iter().enumerate() {
                    out.push(reca_layer(format!("head.step{l}.reca"), p));
                }
            }
            HeadParams::PlusIAFF(v) => {
                for (l, p) in v.iter().enumerate() {
                    for (s, stage) in [("stage1", &p.stage1), ("stage2", &p.stage2)] {
                        out.push(se_layer(format!("head.step{l}.{s}.global"), &stage.global, n, c, r));
                        out.push(se_layer(format!("head.step{l}.{s}.local"), &stage.local, n, c, r));
                    }
                }
            }
            HeadParams::ReAFFPN(v) => {
                for (l, p) in v.iter().enumerate() {
                    for (s, stage) in [("stage1", &p.stage1), ("stage2", &p.stage2)] {
                        out.push(reca_layer(format!("head.step{l}.{s}.global"), &stage.global));
                        out.push(reca_layer(format!("head.step{l}.{s}.local"), &stage.local));
                    }
                }
            }
        }
        out
    }

    /// Writes every parameter tensor plus a manifest embedding the config.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let mut w = ManifestWriter::new(dir)?;
        w.manifest.config = Some(serde_json::to_value(&self.config)?);
        for (entry, tensors) in self.layers() {
            w.push_layer(entry, &tensors)?;
        }
        w.finish()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let reader = ManifestReader::open(dir)?;
        let config: PyramidConfig = serde_json::from_value(
            reader
                .manifest
                .config
                .clone()
                .ok_or_else(|| Error::Format("manifest carries no pyramid config".into()))?,
        )?;
        let mut p = Self::init(&config)?;
        let slots: Vec<(String, &'static str, Vec<usize>)> = p
            .layers()
            .into_iter()
            .flat_map(|(e, ts)| {
                ts.into_iter()
                    .map(move |(role, t)| (e.name.clone(), role, t.shape().to_vec()))
            })
            .collect();
        let mut loaded = Vec::with_capacity(slots.len());
        for (layer, role, shape) in &slots {
            let t = reader.tensor(layer, role)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{layer}.{role}: stored shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
            loaded.push(t);
        }
        for (dst, src) in p.tensors_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(p)
    }
}

impl Params for PyramidParams {
    type Bound = PyramidVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        v.extend(self.lateral.tensors());
        v.extend(self.smooth.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.lateral.tensors_mut());
        v.extend(self.smooth.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<PyramidVars> {
        Ok(PyramidVars {
            backbone: self.backbone.bind_from(vars)?,
            lateral: self.lateral.bind_from(vars)?,
            smooth: self.smooth.bind_from(vars)?,
            head: self.head.bind_from(vars)?,
            orientations: self.orientations(),
        })
    }
}

/// A manifest layer entry and its `(role, tensor)` pairs.
pub type LayerTensors<'a> = (LayerEntry, Vec<(&'static str, &'a Tensor)>);

fn layer_entry(name: String, kind: &str, orientations: usize) -> LayerEntry {
    LayerEntry {
        name,
        kind: kind.to_owned(),
        orientations,
        k_in: 0,
        k_out: 0,
        kernel_size: 1,
        reduction: None,
        channels: None,
        tensors: Vec::new(),
    }
}

fn conv_layer(name: String, p: &GroupConvParams) -> LayerTensors<'_> {
    (
        LayerEntry {
            k_in: p.k_in(),
            k_out: p.k_out(),
            kernel_size: p.kernel_size(),
            ..layer_entry(name, "group_conv", p.orientations())
        },
        vec![("weight", &p.weight), ("bias", &p.bias)],
    )
}

fn se_layer(name: String, p: &SEParams, n: usize, channels: usize, r: usize) -> LayerTensors<'_> {
    let mut ts = vec![("w1", &p.w1), ("w2", &p.w2)];
    if let Some(norm) = &p.norm {
        ts.push(("gamma", &norm.gamma));
        ts.push(("beta", &norm.beta));
    }
    (
        LayerEntry {
            k_in: channels,
            k_out: p.hidden(),
            reduction: Some(r),
            channels: Some(channels),
            ..layer_entry(name, "se", n)
        },
        ts,
    )
}

fn reca_layer(name: String, p: &ReCAParams) -> LayerTensors<'_> {
    (
        LayerEntry {
            k_in: p.kernel_channels(),
            k_out: p.hidden(),
            reduction: Some(p.reduction),
            channels: Some(p.channels()),
            ..layer_entry(name, "reca", p.orientations())
        },
        vec![
            ("w_a", &p.w_a),
            ("w_b", &p.w_b),
            ("gamma", &p.norm.gamma),
            ("beta", &p.norm.beta),
        ],
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidOutput {
    pub features: Vec<ReFeatureMap>,
    pub pyramid: Vec<ReFeatureMap>,
}

/// Backbone features `C_0 .. C_{L-1}`, finest first.
pub fn backbone_var(tape: &mut Tape, x: Var, p: &BackboneVars, n: usize) -> Result<Vec<Var>> {
    let mut h = lift_conv_var(tape, x, &p.stem, n)?;
    h = tape.relu(h)?;
    let mut feats = Vec::with_capacity(p.levels.len());
    for (l, convs) in p.levels.iter().enumerate() {
        for (j, conv) in convs.iter().enumerate() {
            let stride = if l > 0 && j == 0 { 2 } else { 1 };
            h = group_conv_var(tape, h, conv, stride)?;
            h = tape.relu(h)?;
        }
        feats.push(h);
    }
    Ok(feats)
}

/// Neck and head on backbone features; returns `P_0 .. P_{L-1}`.
pub fn pyramid_var(tape: &mut Tape, feats: &[Var], p: &PyramidVars) -> Result<Vec<Var>> {
    let levels = p.lateral.len();
    if feats.len() != levels || p.smooth.len() != levels {
        return Err(Error::invalid(format!(
            "pyramid expects {levels} feature levels, got {}",
            feats.len()
        )));
    }
    let mut outs = vec![None; levels];
    let mut inner = group_conv_var(tape, feats[levels - 1], &p.lateral[levels - 1], 1)?;
    outs[levels - 1] = Some(group_conv_var(tape, inner, &p.smooth[levels - 1], 1)?);
    for l in (0..levels - 1).rev() {
        let lat = group_conv_var(tape, feats[l], &p.lateral[l], 1)?;
        let top = match &p.head {
            HeadVars::PlusSE(v) => se_forward_var(tape, inner, &v[l])?,
            HeadVars::PlusReCA(v) => reca_forward_var(tape, inner, &v[l])?,
            _ => inner,
        };
        let up = tape.upsample_nearest2x(top)?;
        inner = match &p.head {
            HeadVars::PlusIAFF(v) => iaff_forward_var(tape, lat, up, &v[l])?,
            HeadVars::ReAFFPN(v) => reaff_forward_var(tape, lat, up, &v[l])?,
            _ => tape.add(lat, up)?,
        };
        outs[l] = Some(group_conv_var(tape, inner, &p.smooth[l], 1)?);
    }
    Ok(outs.into_iter().map(|o| o.expect("every level assigned")).collect())
}

/// Backbone features `C_0..C_{L-1}` of an image batch `[B, in, H, W]`.
pub fn toy_backbone(x: &Tensor, p: &PyramidParams) -> Result<Vec<ReFeatureMap>> {
    p.config.validate_input(x.shape())?;
    let n = p.orientations();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bv = p.backbone.bind(&mut tape)?;
    backbone_var(&mut tape, xv, &bv, n)?
        .into_iter()
        .map(|v| ReFeatureMap::new(tape.value(v)?.clone(), n))
        .collect()
}

/// Top-down pyramid over precomputed backbone features.
pub fn build_pyramid(feats: &[ReFeatureMap], p: &PyramidParams, variant: Variant) -> Result<Vec<ReFeatureMap>> {
    p.check_structure()?;
    if variant != p.variant() {
        return Err(Error::Config(format!(
            "requested variant {variant} but parameters are for {}",
            p.variant()
        )));
    }
    if feats.len() != p.levels() {
        return Err(Error::invalid(format!(
            "pyramid expects {} feature levels, got {}",
            p.levels(),
            feats.len()
        )));
    }
    let n = p.orientations();
    let mut tape = Tape::new();
    let mut fv = Vec::with_capacity(feats.len());
    for f in feats {
        if f.orientations() != n {
            return Err(Error::OrientationMismatch {
                what: "pyramid feature",
                expected: n,
                found: f.orientations(),
            });
        }
        fv.push(tape.leaf(f.tensor().clone()));
    }
    let pv = p.bind(&mut tape)?;
    pyramid_var(&mut tape, &fv, &pv)?
        .into_iter()
        .map(|v| ReFeatureMap::new(tape.value(v)?.clone(), n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groupequiv::{g_act, group_conv, quarter_turns};
    use crate::reaff::reaff_forward;
    use crate::tensor::{add, rot90, upsample_nearest2x};

    fn small(variant: Variant, n: usize) -> PyramidConfig {
        PyramidConfig {
            levels: 2,
            reduction: 2,
            seed: 11,
            ..PyramidConfig::new(4, n, variant)
        }
    }

    fn image(seed: u64, hw: usize) -> Tensor {
        Tensor::uniform(&[1, 3, hw, hw], -1.0, 1.0, &mut Rng::new(seed))
    }

    fn worst_residual(p: &PyramidParams, x: &Tensor) -> f64 {
        let n = p.orientations();
        let base = p.forward(x).unwrap().pyramid;
        let mut worst: f64 = 0.0;
        for s in 1..n {
            let xr = rot90(x, quarter_turns(n, s)).unwrap();
            let rotated = p.forward(&xr).unwrap().pyramid;
            for (a, b) in rotated.iter().zip(&base) {
                let expect = g_act(b, s).unwrap();
                worst = worst.max(a.tensor().relative_residual(expect.tensor()).unwrap());
            }
        }
        worst
    }

    #[test]
    fn shapes_follow_levels() {
        let p = PyramidParams::init(&small(Variant::Baseline, 4)).unwrap();
        let out = p.forward(&image(0, 8)).unwrap();
        let shapes: Vec<_> = out.features.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 16, 8, 8], vec![1, 16, 4, 4]]);
        let pshapes: Vec<_> = out.pyramid.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(pshapes, shapes);
    }

    #[test]
    fn zero_image_zero_features_without_bias() {
        for v in Variant::ALL {
            let cfg = PyramidConfig {
                zero_bias: true,
                ..small(v, 4)
            };
            let p = PyramidParams::init(&cfg).unwrap();
            let out = p.forward(&Tensor::zeros(&[1, 3, 8, 8])).unwrap();
            for f in out.features.iter().chain(&out.pyramid) {
                assert_eq!(f.tensor().max_abs(), 0.0, "{v}");
            }
        }
    }

    #[test]
    fn baseline_wiring() {
        let p = PyramidParams::init(&small(Variant::Baseline, 2)).unwrap();
        let x = image(1, 8);
        let out = p.forward(&x).unwrap();
        let lat0 = group_conv(&out.features[0], &p.lateral[0], 1).unwrap();
        let lat1 = group_conv(&out.features[1], &p.lateral[1], 1).unwrap();
        let up = upsample_nearest2x(lat1.tensor()).unwrap();
        let inner = ReFeatureMap::new(add(lat0.tensor(), &up).unwrap(), 2).unwrap();
        let p0 = group_conv(&inner, &p.smooth[0], 1).unwrap();
        let p1 = group_conv(&lat1, &p.smooth[1], 1).unwrap();
        assert_eq!(out.pyramid, vec![p0, p1]);
        assert_eq!(build_pyramid(&out.features, &p, Variant::Baseline).unwrap(), out.pyramid);
    }

    #[test]
    fn reaff_head_passes_through_equal_inputs() {
        let p = PyramidParams::init(&small(Variant::ReAFFPN, 4)).unwrap();
        let HeadParams::ReAFFPN(steps) = &p.head else { unreachable!() };
        let feats = toy_backbone(&image(2, 8), &p).unwrap();
        let lat = group_conv(&feats[0], &p.lateral[0], 1).unwrap();
        let fused = reaff_forward(&lat, &lat, &steps[0]).unwrap();
        assert!(fused.tensor().max_abs_diff(lat.tensor()).unwrap() <= 1e-12);
    }

    #[test]
    fn backbone_levels_are_equivariant() {
        let p = PyramidParams::init(&PyramidConfig {
            levels: 3,
            ..small(Variant::Baseline, 4)
        })
        .unwrap();
        let x = image(3, 16);
        let base = toy_backbone(&x, &p).unwrap();
        for s in 1..4 {
            let rot = toy_backbone(&rot90(&x, s as i64).unwrap(), &p).unwrap();
            for (a, b) in rot.iter().zip(&base) {
                let r = a.tensor().relative_residual(g_act(b, s).unwrap().tensor()).unwrap();
                assert!(r <= 1e-10, "s={s} residual {r:e}");
            }
        }
    }

    #[test]
    fn variant_equivariance_pattern() {
        for v in Variant::ALL {
            let p = PyramidParams::init(&small(v, 4)).unwrap();
            let r = worst_residual(&p, &image(4, 8));
            if v.is_equivariant() {
                assert!(r <= 1e-10, "{v}: {r:e}");
            } else {
                assert!(r >= 1e-2, "{v}: {r:e}");
            }
        }
    }

    #[test]
    fn trivial_group_is_always_equivariant() {
        // Only the identity element exists, so the residual is vacuous; the
        // forward pass must still work with batch-of-two statistics.
        for v in Variant::ALL {
            let p = PyramidParams::init(&small(v, 1)).unwrap();
            let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut Rng::new(5));
            assert_eq!(worst_residual(&p, &x), 0.0);
        }
    }

    #[test]
    fn shared_backbone_across_variants() {
        let a = PyramidParams::init(&small(Variant::Baseline, 4)).unwrap();
        let b = PyramidParams::init(&small(Variant::ReAFFPN, 4)).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.lateral, b.lateral);
        assert_eq!(a.smooth, b.smooth);
    }

    #[test]
    fn deterministic_by_seed() {
        let cfg = small(Variant::ReAFFPN, 4);
        let x = image(6, 8);
        let a = PyramidParams::init(&cfg).unwrap().forward(&x).unwrap();
        let b = PyramidParams::init(&cfg).unwrap().forward(&x).unwrap();
        assert_eq!(a, b);
        let c = PyramidParams::init(&PyramidConfig { seed: 12, ..cfg })
            .unwrap()
            .forward(&x)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn input_validation() {
        let p = PyramidParams::init(&PyramidConfig {
            levels: 3,
            ..small(Variant::Baseline, 4)
        })
        .unwrap();
        let err = p.forward(&image(0, 6)).unwrap_err().to_string();
        assert!(err.contains("not divisible"), "{err}");
        assert!(p.forward(&Tensor::zeros(&[1, 3, 8, 4])).is_err());
        assert!(p.forward(&Tensor::zeros(&[1, 2, 8, 8])).is_err());
        assert!(PyramidParams::init(&PyramidConfig {
            levels: 1,
            ..small(Variant::Baseline, 4)
        })
        .is_err());
        assert!(PyramidParams::init(&small(Variant::Baseline, 3)).is_err());
    }

    #[test]
    fn mismatched_variant_or_levels_rejected() {
        let p = PyramidParams::init(&small(Variant::PlusReCA, 4)).unwrap();
        let feats = toy_backbone(&image(0, 8), &p).unwrap();
        assert!(build_pyramid(&feats, &p, Variant::ReAFFPN).is_err());
        assert!(build_pyramid(&feats[..1], &p, Variant::PlusReCA).is_err());
    }

    #[test]
    fn layers_walk_params_order() {
        for v in Variant::ALL {
            let p = PyramidParams::init(&small(v, 4)).unwrap();
            let from_layers: Vec<*const Tensor> = p
                .layers()
                .into_iter()
                .flat_map(|(_, ts)| ts.into_iter().map(|(_, t)| t as *const Tensor))
                .collect();
            let from_params: Vec<*const Tensor> = p.tensors().into_iter().map(|t| t as *const Tensor).collect();
            assert_eq!(from_layers, from_params, "{v}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        for v in Variant::ALL {
            let p = PyramidParams::init(&small(v, 2)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            p.save(dir.path()).unwrap();
            assert_eq!(PyramidParams::load(dir.path()).unwrap(), p, "{v}");
        }
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: PyramidConfig =
            serde_json::from_str(r#"{"lateral_kernel_channels": 8, "orientations": 4, "variant": "plus_se"}"#).unwrap();
        assert_eq!(cfg.levels, 4);
        assert_eq!(cfg.kernel_channels, 8);
        assert_eq!(cfg.variant, Variant::PlusSE);
        assert_eq!(cfg.effective_reduction(), 8);
        assert_eq!("reaffpn".parse::<Variant>().unwrap(), Variant::ReAFFPN);
    }
}
