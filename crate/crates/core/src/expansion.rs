//! Structure expansion: a 2D-encoder / 3D-decoder U-Net that lifts a
//! depth-averaged print image into a structural volume.

use std::path::Path;

use p2v_nn::layers::{Conv, ConvTranspose};
use p2v_nn::{Adam, AdamConfig, ConvGeom, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::metrics::{ssim_values, ssim_values_grad, SsimParams};
use crate::tensor_io::{Image2D, Volume3D};
use crate::training::{image_tensor, load_checkpoint, save_checkpoint, tensor_volume, EpochMeans, LossHistory};
use crate::util::{mix_seed, rng};
use crate::{Error, Result};

pub const STAGE: &str = "expansion";
pub const LEVELS: usize = 4;
/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the BCE.
pub const BCE_EPS: f64 = 1e-7;
const IN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Encoder channels per level, as multiples of `base_channels`.
    pub channel_multipliers: Vec<usize>,
    /// Bottleneck channels as a multiple of `base_channels`.
    pub bottleneck_multiplier: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Concatenate the depth-broadcast input image before the final 1x1x1
    /// convolution.
    pub input_skip: bool,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    /// Desk scale: 8x64x64 volumes.
    fn default() -> Self {
        Self {
            levels: LEVELS,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4, 8],
            bottleneck_multiplier: 16,
            depth: 8,
            height: 64,
            width: 64,
            input_skip: true,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 40,
            seed: 0,
        }
    }
}

impl ExpansionConfig {
    /// Full scale: 32x256x256 volumes, 64 base channels.
    pub fn full_scale() -> Self {
        Self { base_channels: 64, depth: 32, height: 256, width: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::Invalid(format!("expansion network has {LEVELS} levels, config asks for {}", self.levels)));
        }
        if self.channel_multipliers.len() != LEVELS || self.channel_multipliers.contains(&0) {
            return Err(Error::Invalid(format!("need {LEVELS} positive channel multipliers")));
        }
        if self.base_channels == 0 || self.bottleneck_multiplier == 0 {
            return Err(Error::Invalid("expansion channel counts must be positive".into()));
        }
        if self.depth < 8 || self.height < 8 || self.width < 8 {
            return Err(Error::Invalid(format!("target {}x{}x{} below 8", self.depth, self.height, self.width)));
        }
        let f = 1 << LEVELS;
        if self.height % f != 0 || self.width % f != 0 {
            return Err(Error::Invalid(format!("target {}x{} not divisible by {f}", self.height, self.width)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid("expansion learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn target_dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    /// Depth after each decoder stage: doubling from 1, never past the
    /// target depth.
    pub fn depth_trajectory(&self) -> Vec<usize> {
        let mut d = 1;
        (0..LEVELS)
            .map(|_| {
                if 2 * d <= self.depth {
                    d *= 2;
                }
                d
            })
            .collect()
    }
}

/// Repeats `[N, C, h, w]` features `d` times along a new depth axis and
/// linearly resizes the plane to `(h', w')`.
fn broadcast_skip_node(g: &mut Graph, x: Var, target: [usize; 3]) -> Var {
    let r = g.repeat_depth(x, target[0]);
    g.resize(r, target)
}

/// Depth-broadcast skip on a plain tensor: `[C, h, w] -> [C, d, h', w']`
/// or `[N, C, h, w] -> [N, C, d, h', w']`.
pub fn broadcast_skip(features: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    if target.contains(&0) {
        return Err(Error::Shape(format!("broadcast target {target:?} has a zero extent")));
    }
    let s = features.shape().to_vec();
    let batched = match s.len() {
        3 => features.clone().reshape(&[1, s[0], s[1], s[2]]),
        4 => features.clone(),
        _ => return Err(Error::Shape(format!("broadcast_skip expects [C,h,w] or [N,C,h,w], got {s:?}"))),
    };
    let mut g = Graph::new(false);
    let x = g.input(batched);
    let y = broadcast_skip_node(&mut g, x, target);
    let out = g.value(y).clone();
    Ok(if s.len() == 3 { out.reshape(&[s[0], target[0], target[1], target[2]]) } else { out })
}

/// Mean BCE of `pred` against soft targets `real`, and its gradient.
fn bce_with_grad(pred: &[f64], real: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(real) {
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        let inside = p > BCE_EPS && p < 1.0 - BCE_EPS;
        grad.push(if inside { (q - y) / (q * (1.0 - q)) / n } else { 0.0 });
    }
    (loss / n, grad)
}

/// Components of the expansion loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionLoss {
    pub bce: f64,
    pub ssim: f64,
    /// `bce + (1 - ssim)`.
    pub total: f64,
}

fn check_pair(v_pred: &Volume3D, v_real: &Volume3D) -> Result<[usize; 3]> {
    if v_pred.dims() != v_real.dims() {
        return Err(Error::Dims { expected: format!("{:?}", v_real.dims()), found: format!("{:?}", v_pred.dims()) });
    }
    let (d, h, w) = v_pred.dims();
    Ok([d, h, w])
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn expansion_loss_parts(v_pred: &Volume3D, v_real: &Volume3D) -> Result<ExpansionLoss> {
    let dims = check_pair(v_pred, v_real)?;
    let (p, r) = (to_f64(v_pred.values()), to_f64(v_real.values()));
    let bce = bce_with_grad(&p, &r).0;
    let ssim = ssim_values(&p, &r, dims, &SsimParams::volumetric())?;
    Ok(ExpansionLoss { bce, ssim, total: bce + (1.0 - ssim) })
}

/// Voxelwise BCE plus `1 - SSIM3D`.
pub fn expansion_loss(v_pred: &Volume3D, v_real: &Volume3D) -> Result<f64> {
    Ok(expansion_loss_parts(v_pred, v_real)?.total)
}

/// The expansion loss on raw values, with its gradient in `pred`.
pub fn expansion_loss_grad(pred: &[f64], real: &[f64], dims: [usize; 3]) -> Result<(ExpansionLoss, Vec<f64>)> {
    let (bce, mut grad) = bce_with_grad(pred, real);
    let (ssim, ds) = ssim_values_grad(pred, real, dims, &SsimParams::volumetric())?;
    for (g, s) in grad.iter_mut().zip(ds) {
        *g -= s;
    }
    Ok((ExpansionLoss { bce, ssim, total: bce + (1.0 - ssim) }, grad))
}

struct Block2d {
    a: Conv,
    b: Conv,
}

/// The structure expansion network.
pub struct ExpansionNet {
    pub config: ExpansionConfig,
    pub params: ParamStore,
    enc: Vec<Block2d>,
    bottleneck: Conv,
    lift: Conv,
    ups: Vec<ConvTranspose>,
    fuse: Vec<Conv>,
    out: Conv,
}

impl ExpansionNet {
    pub fn new(config: ExpansionConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[config.seed, 0xe4a]));
        let chans: Vec<usize> = config.channel_multipliers.iter().map(|m| m * config.base_channels).collect();
        let mut enc = Vec::new();
        let mut ci = 1;
        for (k, &c) in chans.iter().enumerate() {
            enc.push(Block2d {
                a: Conv::new2d(&mut ps, &mut r, &format!("enc{k}.a"), ci, c, 3, 1, 1, false),
                b: Conv::new2d(&mut ps, &mut r, &format!("enc{k}.b"), c, c, 3, 1, 1, false),
            });
            ci = c;
        }
        let cb = config.bottleneck_multiplier * config.base_channels;
        let bottleneck = Conv::new2d(&mut ps, &mut r, "bottleneck", ci, cb, 3, 1, 1, false);
        let lift = Conv::new3d(&mut ps, &mut r, "lift", cb, cb, ConvGeom::cube(3, 1, 1), false);
        let (mut ups, mut fuse) = (Vec::new(), Vec::new());
        let mut ci = cb;
        let mut depth = 1;
        for (s, &d) in config.depth_trajectory().iter().enumerate() {
            let c = chans[LEVELS - 1 - s];
            let sd = d / depth;
            let geom = ConvGeom { kernel: [sd, 2, 2], stride: [sd, 2, 2], pad: [0; 3] };
            ups.push(ConvTranspose::new3d(&mut ps, &mut r, &format!("up{s}"), ci, c, geom));
            fuse.push(Conv::new3d(&mut ps, &mut r, &format!("fuse{s}"), 2 * c, c, ConvGeom::cube(3, 1, 1), false));
            ci = c;
            depth = d;
        }
        let out_in = ci + usize::from(config.input_skip);
        let out = Conv::new3d(&mut ps, &mut r, "out", out_in, 1, ConvGeom::cube(1, 1, 0), true);
        Ok(Self { config, params: ps, enc, bottleneck, lift, ups, fuse, out })
    }

    fn norm_relu(g: &mut Graph, x: Var) -> Var {
        let x = g.instance_norm(x, IN_EPS);
        g.relu(x)
    }

    fn lift_node(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], 1, s[2], s[3]]);
        let x = self.lift.forward(g, &self.params, x);
        Self::norm_relu(g, x)
    }

    /// Seeded 2D-to-3D lift of bottleneck features `[1, C, h, w]` to
    /// `[1, C, 1, h, w]`.
    pub fn lift(&self, features: &Tensor) -> Result<Tensor> {
        let cb = self.config.bottleneck_multiplier * self.config.base_channels;
        let s = features.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != cb {
            return Err(Error::Shape(format!("lift expects [1, {cb}, h, w], got {s:?}")));
        }
        let mut g = Graph::new(false);
        let x = g.input(features.clone());
        let y = self.lift_node(&mut g, x);
        Ok(g.value(y).clone())
    }

    fn graph_forward(&self, g: &mut Graph, input: Var) -> Var {
        let ps = &self.params;
        let mut skips = Vec::new();
        let mut h = input;
        for b in &self.enc {
            h = b.a.forward(g, ps, h);
            h = Self::norm_relu(g, h);
            h = b.b.forward(g, ps, h);
            h = Self::norm_relu(g, h);
            skips.push(h);
            h = g.max_pool(h, [1, 2, 2]);
        }
        h = self.bottleneck.forward(g, ps, h);
        h = Self::norm_relu(g, h);
        h = self.lift_node(g, h);
        for ((up, fuse), &skip) in self.ups.iter().zip(&self.fuse).zip(skips.iter().rev()) {
            h = up.forward(g, ps, h);
            let s = g.shape(h);
            let dims = [s[2], s[3], s[4]];
            let skip = broadcast_skip_node(g, skip, dims);
            h = g.concat_channels(&[h, skip]);
            h = fuse.forward(g, ps, h);
            h = Self::norm_relu(g, h);
        }
        let target = self.config.target_dims();
        h = g.resize(h, target);
        if self.config.input_skip {
            let x = broadcast_skip_node(g, input, target);
            h = g.concat_channels(&[h, x]);
        }
        let o = self.out.forward(g, ps, h);
        g.sigmoid(o)
    }

    fn check_input(&self, img: &Image2D) -> Result<()> {
        let f = 1 << LEVELS;
        if img.height() % f != 0 || img.width() % f != 0 {
            return Err(Error::Shape(format!("input {}x{} not divisible by {f}", img.height(), img.width())));
        }
        if (img.height(), img.width()) != (self.config.height, self.config.width) {
            return Err(Error::Dims {
                expected: format!("{}x{}", self.config.height, self.config.width),
                found: format!("{}x{}", img.height(), img.width()),
            });
        }
        Ok(())
    }

    /// Structural volume `D x H' x W'` for one image.
    pub fn forward(&self, img: &Image2D) -> Result<Volume3D> {
        self.check_input(img)?;
        let mut g = Graph::new(false);
        let x = g.input(image_tensor(img));
        let y = self.graph_forward(&mut g, x);
        tensor_volume(g.value(y))
    }

    /// Trains on `(image, volume)` pairs for `config.epochs` epochs;
    /// columns `loss_total, bce, ssim_term`.
    pub fn train(&mut self, pairs: &[(Image2D, Volume3D)]) -> Result<LossHistory> {
        if pairs.is_empty() {
            return Err(Error::Invalid("expansion training needs at least one pair".into()));
        }
        let target = self.config.target_dims();
        for (img, v) in pairs {
            self.check_input(img)?;
            let (d, h, w) = v.dims();
            if [d, h, w] != target {
                return Err(Error::Dims { expected: format!("{target:?}"), found: format!("{:?}", [d, h, w]) });
            }
        }
        let c = &self.config;
        let mut opt = Adam::new(AdamConfig { lr: c.lr, beta1: c.beta1, beta2: c.beta2, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut r = rng(mix_seed(&[c.seed, 0x0e0]));
        let mut history = LossHistory::new(&["bce", "ssim_term"]);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut r);
            let mut means = EpochMeans::new(3);
            for &i in &order {
                let (img, v) = &pairs[i];
                let mut g = Graph::new(true);
                let x = g.input(image_tensor(img));
                let y = self.graph_forward(&mut g, x);
                let real = to_f64(v.values());
                let mut parts = None;
                let loss = g.custom_scalar(&[y], |vals| {
                    let pred = to_f64(vals[0].data());
                    let (l, grad) = expansion_loss_grad(&pred, &real, target).expect("shapes checked");
                    parts = Some(l);
                    (l.total, vec![grad.into_iter().map(|v| v as f32).collect()])
                });
                let l = parts.expect("loss evaluated");
                means.add(&[l.total, l.bce, 1.0 - l.ssim]);
                let grads = g.backward(loss);
                opt.step(&mut self.params, &grads);
            }
            history.push(means.finish());
        }
        Ok(history)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path.as_ref(), STAGE, &self.config, self.config.target_dims(), &[("generator", &self.params)])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, _, ck) = load_checkpoint::<ExpansionConfig>(path.as_ref(), STAGE)?;
        let mut net = Self::new(config)?;
        p2v_nn::restore_into(&mut net.params, ck.store("generator")?)?;
        Ok(net)
    }
}

/// Builds and trains an expansion network.
pub fn train_expansion(pairs: &[(Image2D, Volume3D)], config: &ExpansionConfig) -> Result<(ExpansionNet, LossHistory)> {
    let mut net = ExpansionNet::new(config.clone())?;
    let history = net.train(pairs)?;
    Ok((net, history))
}
