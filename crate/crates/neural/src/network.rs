//! U-Net family with additive skips, four filter-block variants and an
//! optional upscaling head producing masks at twice the input resolution.
//!
//! The architecture is written once against [`Builder`]; a shape-only
//! builder derives the parameter layout (and counts it without allocating)
//! while the graph builder runs the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Tensor, Var};
use crate::NeuralError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterBlockKind {
    /// conv → ReLU → conv → ReLU
    Plain,
    /// conv → ReLU → conv, + input, ReLU
    Residual,
    /// conv → norm → ReLU → conv → norm, + input, ReLU
    ResidualNorm,
    /// norm → ReLU → conv → norm → ReLU → conv, + input
    PreActivation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub block_kind: FilterBlockKind,
    pub dropout_rate: f64,
    pub upscaling_head: bool,
    pub out_segments: usize,
    pub norm_groups: usize,
    /// `[channels, D, H, W]`
    pub input_shape: [usize; 4],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_filters: 32,
            block_kind: FilterBlockKind::PreActivation,
            dropout_rate: 0.2,
            upscaling_head: true,
            out_segments: 3,
            norm_groups: 8,
            input_shape: [4, 128, 128, 128],
        }
    }
}

pub const MAX_LEVELS: usize = 6;

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.levels == 0 || self.levels > MAX_LEVELS {
            return Err(NeuralError::BadConfig(format!("levels must be in 1..={MAX_LEVELS}, got {}", self.levels)));
        }
        if self.base_filters == 0 || self.out_segments == 0 || self.norm_groups == 0 || self.input_shape[0] == 0 {
            return Err(NeuralError::BadConfig("filters, segments, norm groups and channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NeuralError::BadConfig(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        let div = 1 << (self.levels - 1);
        let spatial = [self.input_shape[1], self.input_shape[2], self.input_shape[3]];
        if spatial.iter().any(|&d| d == 0 || d % div != 0) {
            return Err(NeuralError::IndivisibleShape { shape: spatial, divisor: div });
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Largest divisor of `channels` not above the configured group count.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels)).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
    }

    /// Output spatial dims: the input's, doubled with the upscaling head.
    pub fn output_spatial(&self) -> [usize; 3] {
        let f = if self.upscaling_head { 2 } else { 1 };
        [self.input_shape[1] * f, self.input_shape[2] * f, self.input_shape[3] * f]
    }

    pub fn resolution_factor(&self) -> usize {
        if self.upscaling_head {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Convolution kernel with its effective fan-in for He init.
    Kernel {
        fan_in: usize,
    },
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The operations the architecture needs. `T` is a feature-map handle.
trait Builder {
    type T: Copy;
    fn channels(&self, x: Self::T) -> usize;
    fn spatial(&self, x: Self::T) -> [usize; 3];
    /// Convolution plus bias.
    fn conv(&mut self, name: &str, x: Self::T, c_out: usize, k: usize, stride: usize) -> Result<Self::T, NeuralError>;
    /// Stride-2 transposed convolution plus bias.
    fn conv_t(&mut self, name: &str, x: Self::T, c_out: usize) -> Result<Self::T, NeuralError>;
    fn norm(&mut self, name: &str, x: Self::T, groups: usize) -> Result<Self::T, NeuralError>;
    fn relu(&mut self, x: Self::T) -> Self::T;
    fn add(&mut self, a: Self::T, b: Self::T) -> Result<Self::T, NeuralError>;
    fn dropout(&mut self, x: Self::T, rate: f64) -> Result<Self::T, NeuralError>;
    fn sigmoid(&mut self, x: Self::T) -> Self::T;
}

fn filter_block<B: Builder>(
    b: &mut B,
    cfg: &NetworkConfig,
    name: &str,
    x: B::T,
    c_out: usize,
) -> Result<B::T, NeuralError> {
    let shortcut = if b.channels(x) == c_out { x } else { b.conv(&format!("{name}.proj"), x, c_out, 1, 1)? };
    let g = cfg.groups_for(c_out);
    let gin = cfg.groups_for(b.channels(x));
    let n = |s: &str| format!("{name}.{s}");
    Ok(match cfg.block_kind {
        FilterBlockKind::Plain => {
            let y = b.conv(&n("conv1"), x, c_out, 3, 1)?;
            let y = b.relu(y);
            let y = b.conv(&n("conv2"), y, c_out, 3, 1)?;
            b.relu(y)
        }
        FilterBlockKind::Residual => {
            let y = b.conv(&n("conv1"), x, c_out, 3, 1)?;
            let y = b.relu(y);
            let y = b.conv(&n("conv2"), y, c_out, 3, 1)?;
            let y = b.add(y, shortcut)?;
            b.relu(y)
        }
        FilterBlockKind::ResidualNorm => {
            let y = b.conv(&n("conv1"), x, c_out, 3, 1)?;
            let y = b.norm(&n("norm1"), y, g)?;
            let y = b.relu(y);
            let y = b.conv(&n("conv2"), y, c_out, 3, 1)?;
            let y = b.norm(&n("norm2"), y, g)?;
            let y = b.add(y, shortcut)?;
            b.relu(y)
        }
        FilterBlockKind::PreActivation => {
            let y = b.norm(&n("norm1"), x, gin)?;
            let y = b.relu(y);
            let y = b.conv(&n("conv1"), y, c_out, 3, 1)?;
            let y = b.norm(&n("norm2"), y, g)?;
            let y = b.relu(y);
            let y = b.conv(&n("conv2"), y, c_out, 3, 1)?;
            b.add(y, shortcut)?
        }
    })
}

fn architecture<B: Builder>(b: &mut B, cfg: &NetworkConfig, input: B::T) -> Result<B::T, NeuralError> {
    let levels = cfg.levels;
    let mut x = b.conv("init", input, cfg.width(0), 3, 1)?;
    x = b.dropout(x, cfg.dropout_rate)?;
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        if l > 0 {
            x = b.conv(&format!("down{l}"), x, cfg.width(l), 3, 2)?;
        }
        for i in 0..2 {
            x = filter_block(b, cfg, &format!("enc{l}.{i}"), x, cfg.width(l))?;
        }
        skips.push(x);
    }
    for l in (0..levels - 1).rev() {
        x = b.conv_t(&format!("up{l}"), x, cfg.width(l))?;
        x = b.add(x, skips[l])?;
        let blocks = if l == 0 { 2 } else { 1 };
        for i in 0..blocks {
            x = filter_block(b, cfg, &format!("dec{l}.{i}"), x, cfg.width(l))?;
        }
    }
    if cfg.upscaling_head {
        let up = b.conv_t("head.up", x, cfg.width(0))?;
        let filtered = b.conv("head.skip_conv", skips[0], cfg.width(0), 3, 1)?;
        let filtered = b.conv_t("head.skip_up", filtered, cfg.width(0))?;
        x = b.add(up, filtered)?;
    }
    let logits = b.conv("out", x, cfg.out_segments, 1, 1)?;
    Ok(b.sigmoid(logits))
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    c: usize,
    sp: [usize; 3],
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: ParamRole) {
        self.specs.push(ParamSpec { name, shape, role });
    }
}

impl Builder for LayoutBuilder {
    type T = Shape;

    fn channels(&self, x: Shape) -> usize {
        x.c
    }

    fn spatial(&self, x: Shape) -> [usize; 3] {
        x.sp
    }

    fn conv(&mut self, name: &str, x: Shape, c_out: usize, k: usize, stride: usize) -> Result<Shape, NeuralError> {
        self.push(format!("{name}.w"), vec![c_out, x.c, k, k, k], ParamRole::Kernel { fan_in: x.c * k * k * k });
        self.push(format!("{name}.b"), vec![c_out], ParamRole::Bias);
        Ok(Shape { c: c_out, sp: x.sp.map(|d| d.div_ceil(stride)) })
    }

    fn conv_t(&mut self, name: &str, x: Shape, c_out: usize) -> Result<Shape, NeuralError> {
        // each output voxel of a stride-2 transposed conv sees 27/8 taps on average
        let fan_in = (x.c * 27).div_ceil(8);
        self.push(format!("{name}.w"), vec![x.c, c_out, 3, 3, 3], ParamRole::Kernel { fan_in });
        self.push(format!("{name}.b"), vec![c_out], ParamRole::Bias);
        Ok(Shape { c: c_out, sp: x.sp.map(|d| d * 2) })
    }

    fn norm(&mut self, name: &str, x: Shape, groups: usize) -> Result<Shape, NeuralError> {
        if !x.c.is_multiple_of(groups) {
            return Err(NeuralError::BadGroupCount { channels: x.c, groups });
        }
        self.push(format!("{name}.gamma"), vec![x.c], ParamRole::NormScale);
        self.push(format!("{name}.beta"), vec![x.c], ParamRole::NormShift);
        Ok(x)
    }

    fn relu(&mut self, x: Shape) -> Shape {
        x
    }

    fn add(&mut self, a: Shape, b: Shape) -> Result<Shape, NeuralError> {
        if a.c != b.c || a.sp != b.sp {
            return Err(NeuralError::ShapeMismatch(format!(
                "additive skip joins {}×{:?} with {}×{:?}",
                a.c, a.sp, b.c, b.sp
            )));
        }
        Ok(a)
    }

    fn dropout(&mut self, x: Shape, _rate: f64) -> Result<Shape, NeuralError> {
        Ok(x)
    }

    fn sigmoid(&mut self, x: Shape) -> Shape {
        x
    }
}

struct GraphBuilder<'a> {
    g: &'a mut Graph,
    params: &'a [Var],
    specs: &'a [ParamSpec],
    next: usize,
    training: bool,
    rng: &'a mut ChaCha8Rng,
}

impl GraphBuilder<'_> {
    fn take(&mut self, name: &str) -> Var {
        let v = self.params[self.next];
        debug_assert_eq!(self.specs[self.next].name, name);
        self.next += 1;
        v
    }
}

impl Builder for GraphBuilder<'_> {
    type T = Var;

    fn channels(&self, x: Var) -> usize {
        self.g.value(x).shape[1]
    }

    fn spatial(&self, x: Var) -> [usize; 3] {
        let s = &self.g.value(x).shape;
        [s[2], s[3], s[4]]
    }

    fn conv(&mut self, name: &str, x: Var, _c_out: usize, _k: usize, stride: usize) -> Result<Var, NeuralError> {
        let w = self.take(&format!("{name}.w"));
        let b = self.take(&format!("{name}.b"));
        let y = self.g.conv3d(x, w, stride)?;
        self.g.add_bias(y, b)
    }

    fn conv_t(&mut self, name: &str, x: Var, _c_out: usize) -> Result<Var, NeuralError> {
        let w = self.take(&format!("{name}.w"));
        let b = self.take(&format!("{name}.b"));
        let y = self.g.conv3d_transpose(x, w)?;
        self.g.add_bias(y, b)
    }

    fn norm(&mut self, name: &str, x: Var, groups: usize) -> Result<Var, NeuralError> {
        let gamma = self.take(&format!("{name}.gamma"));
        let beta = self.take(&format!("{name}.beta"));
        self.g.group_norm(x, gamma, beta, groups)
    }

    fn relu(&mut self, x: Var) -> Var {
        self.g.relu(x)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.g.add(a, b)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, NeuralError> {
        self.g.spatial_dropout(x, rate, self.training, self.rng)
    }

    fn sigmoid(&mut self, x: Var) -> Var {
        self.g.sigmoid(x)
    }
}

/// Parameter layout and output shape `[out_segments, D', H', W']`, without
/// allocating any weights.
pub fn layout(cfg: &NetworkConfig) -> Result<(Vec<ParamSpec>, [usize; 4]), NeuralError> {
    cfg.validate()?;
    let mut b = LayoutBuilder::default();
    let input = Shape { c: cfg.input_shape[0], sp: [cfg.input_shape[1], cfg.input_shape[2], cfg.input_shape[3]] };
    let out = architecture(&mut b, cfg, input)?;
    debug_assert_eq!(b.spatial(out), cfg.output_spatial());
    Ok((b.specs, [out.c, out.sp[0], out.sp[1], out.sp[2]]))
}

pub fn parameter_count(cfg: &NetworkConfig) -> Result<usize, NeuralError> {
    Ok(layout(cfg)?.0.iter().map(ParamSpec::len).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub spec: ParamSpec,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Param>,
}

impl Network {
    /// Builds the network with He-normal kernels (a near-zero output
    /// kernel), zero biases and shifts, unit norm scales.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NeuralError> {
        let (specs, _) = layout(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|spec| {
                let n = spec.len();
                let data = match spec.role {
                    ParamRole::Kernel { fan_in } => {
                        // small output kernel: sigmoids start unsaturated near 0.5
                        let gain = if spec.name == "out.w" { 0.01 } else { 2.0 };
                        let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive sd");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                    ParamRole::Bias | ParamRole::NormShift => vec![0.0; n],
                    ParamRole::NormScale => vec![1.0; n],
                };
                Param { spec, data }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Output shape for one sample: `[out_segments, D', H', W']`.
    pub fn output_shape(&self) -> [usize; 4] {
        let [d, h, w] = self.config.output_spatial();
        [self.config.out_segments, d, h, w]
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(Tensor { shape: p.spec.shape.clone(), data: p.data.clone() })).collect()
    }

    /// Runs the network on `input` (`[N, C, D, H, W]`) over parameters
    /// previously bound with [`Network::bind`].
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        input: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, NeuralError> {
        // Fully convolutional: any spatial size divisible by the level
        // stride works, not only the configured one.
        let shape = g.value(input).shape.clone();
        let div = 1 << (self.config.levels - 1);
        if shape.len() != 5 || shape[1] != self.config.input_shape[0] {
            return Err(NeuralError::ShapeMismatch(format!(
                "network expects [N, {}, D, H, W], got {shape:?}",
                self.config.input_shape[0]
            )));
        }
        if shape[2..].iter().any(|&d| d == 0 || d % div != 0) {
            return Err(NeuralError::IndivisibleShape { shape: [shape[2], shape[3], shape[4]], divisor: div });
        }
        let specs: Vec<ParamSpec> = self.params.iter().map(|p| p.spec.clone()).collect();
        let mut b = GraphBuilder { g, params, specs: &specs, next: 0, training, rng };
        let out = architecture(&mut b, &self.config, input)?;
        debug_assert_eq!(b.next, params.len());
        Ok(out)
    }

    /// Inference on a `[N, C, D, H, W]` tensor.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor, NeuralError> {
        let mut g = Graph::new();
        let params: Vec<Var> =
            self.params.iter().map(|p| g.input(Tensor { shape: p.spec.shape.clone(), data: p.data.clone() })).collect();
        let x = g.input(input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &params, x, false, &mut rng)?;
        Ok(g.value(out).clone())
    }
}

impl Network {
    /// Inference tile by tile (non-overlapping), so feature statistics match
    /// a network trained on crops of the same size.
    pub fn predict_tiled(&self, input: &Tensor, tile: [usize; 3]) -> Result<Tensor, NeuralError> {
        let sp = [input.shape[2], input.shape[3], input.shape[4]];
        if (0..3).any(|a| tile[a] == 0 || !sp[a].is_multiple_of(tile[a])) {
            return Err(NeuralError::ShapeMismatch(format!("tile {tile:?} does not divide {sp:?}")));
        }
        if tile == sp {
            return self.predict(input);
        }
        let f = self.config.resolution_factor();
        let (n, c) = (input.shape[0], input.shape[1]);
        let s = self.config.out_segments;
        let out_sp = sp.map(|d| d * f);
        let mut out = Tensor::zeros(vec![n, s, out_sp[0], out_sp[1], out_sp[2]]);
        for z in (0..sp[0]).step_by(tile[0]) {
            for y in (0..sp[1]).step_by(tile[1]) {
                for x in (0..sp[2]).step_by(tile[2]) {
                    let part = copy_box(input, [z, y, x], tile, n, c);
                    let pred = self.predict(&part)?;
                    paste_box(&mut out, &pred, [z * f, y * f, x * f]);
                }
            }
        }
        Ok(out)
    }
}

fn copy_box(t: &Tensor, origin: [usize; 3], size: [usize; 3], n: usize, c: usize) -> Tensor {
    let (d, h, w) = (t.shape[2], t.shape[3], t.shape[4]);
    let mut data = Vec::with_capacity(n * c * size.iter().product::<usize>());
    for nc in 0..n * c {
        for z in origin[0]..origin[0] + size[0] {
            for y in origin[1]..origin[1] + size[1] {
                let row = ((nc * d + z) * h + y) * w + origin[2];
                data.extend_from_slice(&t.data[row..row + size[2]]);
            }
        }
    }
    Tensor { shape: vec![n, c, size[0], size[1], size[2]], data }
}

fn paste_box(dst: &mut Tensor, src: &Tensor, origin: [usize; 3]) {
    let (d, h, w) = (dst.shape[2], dst.shape[3], dst.shape[4]);
    let (sd, sh, sw) = (src.shape[2], src.shape[3], src.shape[4]);
    for nc in 0..src.shape[0] * src.shape[1] {
        for z in 0..sd {
            for y in 0..sh {
                let from = ((nc * sd + z) * sh + y) * sw;
                let to = ((nc * d + origin[0] + z) * h + origin[1] + y) * w + origin[2];
                dst.data[to..to + sw].copy_from_slice(&src.data[from..from + sw]);
            }
        }
    }
}

/// Published totals for the two upscaling variants (base width 32).
pub const REFERENCE_PARAMS_5_LEVEL: usize = 13_150_000;
pub const REFERENCE_PARAMS_4_LEVEL: usize = 2_870_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub levels: usize,
    pub base_filters: usize,
    pub block_kind: FilterBlockKind,
    pub upscaling_head: bool,
    pub count: usize,
    pub reference: Option<usize>,
    /// `count − reference`
    pub delta: Option<i64>,
    pub relative_delta: Option<f64>,
}

impl ParameterReport {
    pub fn line(&self) -> String {
        match (self.reference, self.delta, self.relative_delta) {
            (Some(r), Some(d), Some(rel)) => format!(
                "{}-level upscaling={} base={}: {} parameters (reference {r}, delta {d:+}, {:+.1}%)",
                self.levels,
                self.upscaling_head,
                self.base_filters,
                self.count,
                rel * 100.0
            ),
            _ => format!(
                "{}-level upscaling={} base={}: {} parameters",
                self.levels, self.upscaling_head, self.base_filters, self.count
            ),
        }
    }
}

/// Counts parameters and, for the published 4-/5-level upscaling variants,
/// the delta against their reported totals.
pub fn parameter_report(cfg: &NetworkConfig) -> Result<ParameterReport, NeuralError> {
    let count = parameter_count(cfg)?;
    let reference = match (cfg.levels, cfg.upscaling_head) {
        (5, true) => Some(REFERENCE_PARAMS_5_LEVEL),
        (4, true) => Some(REFERENCE_PARAMS_4_LEVEL),
        _ => None,
    };
    let delta = reference.map(|r| count as i64 - r as i64);
    let relative_delta = reference.map(|r| (count as f64 - r as f64) / r as f64);
    Ok(ParameterReport {
        levels: cfg.levels,
        base_filters: cfg.base_filters,
        block_kind: cfg.block_kind,
        upscaling_head: cfg.upscaling_head,
        count,
        reference,
        delta,
        relative_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(levels: usize, upscaling: bool, kind: FilterBlockKind) -> NetworkConfig {
        NetworkConfig {
            levels,
            base_filters: 2,
            block_kind: kind,
            dropout_rate: 0.0,
            upscaling_head: upscaling,
            out_segments: 3,
            norm_groups: 2,
            input_shape: [4, 4, 4, 4],
        }
    }

    #[test]
    fn four_level_upscaling_shape() {
        let cfg = NetworkConfig { input_shape: [4, 16, 32, 32], ..NetworkConfig::default() };
        let (_, out) = layout(&cfg).unwrap();
        assert_eq!(out, [3, 32, 64, 64]);
        let plain = NetworkConfig { upscaling_head: false, ..cfg };
        assert_eq!(layout(&plain).unwrap().1, [3, 16, 32, 32]);
    }

    #[test]
    fn indivisible_shape_rejected() {
        let cfg = NetworkConfig { input_shape: [4, 12, 32, 32], ..NetworkConfig::default() };
        assert!(matches!(layout(&cfg), Err(NeuralError::IndivisibleShape { divisor: 8, .. })));
    }

    #[test]
    fn count_matches_allocation() {
        for kind in [
            FilterBlockKind::Plain,
            FilterBlockKind::Residual,
            FilterBlockKind::ResidualNorm,
            FilterBlockKind::PreActivation,
        ] {
            for up in [false, true] {
                let cfg = tiny(2, up, kind);
                let net = Network::new(cfg.clone(), 1).unwrap();
                assert_eq!(net.parameter_count(), parameter_count(&cfg).unwrap());
                let x = Tensor::zeros(vec![1, 4, 4, 4, 4]);
                let y = net.predict(&x).unwrap();
                assert_eq!(y.shape[1..], net.output_shape()[..]);
            }
        }
    }

    #[test]
    fn plain_block_has_no_norm_params() {
        let (specs, _) = layout(&tiny(2, false, FilterBlockKind::Plain)).unwrap();
        assert!(specs.iter().all(|s| !matches!(s.role, ParamRole::NormScale | ParamRole::NormShift)));
    }

    #[test]
    fn groups_are_clamped_to_divisors() {
        let cfg = NetworkConfig { norm_groups: 8, ..NetworkConfig::default() };
        assert_eq!(cfg.groups_for(4), 4);
        assert_eq!(cfg.groups_for(12), 6);
        assert_eq!(cfg.groups_for(64), 8);
    }

    #[test]
    fn outputs_are_probabilities() {
        let net = Network::new(tiny(2, true, FilterBlockKind::PreActivation), 3).unwrap();
        let x = Tensor::new(vec![1, 4, 4, 4, 4], (0..256).map(|i| ((i * 37) % 11) as f64 - 5.0).collect()).unwrap();
        let y = net.predict(&x).unwrap();
        let (lo, hi) = y.data.iter().fold((1.0f64, 0.0f64), |(a, b), &p| (a.min(p), b.max(p)));
        assert!(y.data.iter().all(|&p| p > 0.0 && p < 1.0), "{lo} {hi}");
    }

    #[test]
    fn reports_reference_delta() {
        let cfg = NetworkConfig { levels: 5, input_shape: [4, 80, 160, 128], ..NetworkConfig::default() };
        let r = parameter_report(&cfg).unwrap();
        assert_eq!(r.reference, Some(REFERENCE_PARAMS_5_LEVEL));
        assert_eq!(r.delta, Some(r.count as i64 - REFERENCE_PARAMS_5_LEVEL as i64));
        assert!(r.line().contains("reference 13150000"));
    }
}
