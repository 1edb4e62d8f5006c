//! Realism refiner: a 3D U-Net that gives a structural volume OCT texture,
//! judged by a volumetric PatchGAN. The adversarial and L1 primitives here
//! are shared with the style stage.

use std::path::Path;

use p2v_nn::layers::{BatchNorm, Conv, ConvTranspose};
use p2v_nn::{Adam, AdamConfig, ConvGeom, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::tensor_io::Volume3D;
use crate::training::{
    load_checkpoint, noise_tensor, save_checkpoint, sigmoid, softplus, tensor_volume, volume_tensor, EpochMeans,
    LossHistory,
};
use crate::util::{mix_seed, rng};
use crate::{Error, Result};

pub const STAGE: &str = "refiner";

/// Per-patch realness logits of a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScores {
    pub dims: [usize; 3],
    pub logits: Vec<f32>,
}

impl PatchScores {
    pub fn constant(dims: [usize; 3], logit: f32) -> Self {
        Self { dims, logits: vec![logit; dims.iter().product()] }
    }

    fn as_f64(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| l as f64).collect()
    }
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a constant label,
/// with its gradient in the logits.
pub fn bce_with_logits(logits: &[f64], label: f64) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().map(|&l| label * softplus(-l) + (1.0 - label) * softplus(l)).sum::<f64>() / n;
    let grad = logits.iter().map(|&l| (sigmoid(l) - label) / n).collect();
    (loss, grad)
}

/// Non-saturating generator loss: fakes labelled real.
pub fn adversarial_loss_g(d_fake: &PatchScores) -> f64 {
    bce_with_logits(&d_fake.as_f64(), 1.0).0
}

/// Discriminator loss: real labelled 1 plus fake labelled 0.
pub fn adversarial_loss_d(d_real: &PatchScores, d_fake: &PatchScores) -> f64 {
    bce_with_logits(&d_real.as_f64(), 1.0).0 + bce_with_logits(&d_fake.as_f64(), 0.0).0
}

fn same_shape(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dims { expected: format!("{:?}", a.dims()), found: format!("{:?}", b.dims()) });
    }
    Ok(())
}

/// Mean absolute voxel difference.
pub fn l1_fidelity(v_real: &Volume3D, v_r: &Volume3D) -> Result<f64> {
    same_shape(v_real, v_r)?;
    let pred: Vec<f64> = v_r.values().iter().map(|&v| v as f64).collect();
    let real: Vec<f64> = v_real.values().iter().map(|&v| v as f64).collect();
    Ok(l1_with_grad(&pred, &real).0)
}

/// Mean |pred - real| and its gradient in `pred` (zero at ties).
pub fn l1_with_grad(pred: &[f64], real: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let loss = pred.iter().zip(real).map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(real)
        .map(|(p, r)| match p.partial_cmp(r) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    (loss, grad)
}

/// Generator objective `adv_g + alpha * L1`.
pub fn refiner_objective(d_fake: &PatchScores, v_real: &Volume3D, v_r: &Volume3D, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(adversarial_loss_g(d_fake) + alpha * l1_fidelity(v_real, v_r)?)
}

/// The generator objective on raw values with gradients in the logits and
/// in the refined volume.
pub fn refiner_objective_grad(logits: &[f64], real: &[f64], pred: &[f64], alpha: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (adv, d_logits) = bce_with_logits(logits, 1.0);
    let (l1, d_pred) = l1_with_grad(pred, real);
    (adv + alpha * l1, d_logits, d_pred.into_iter().map(|g| alpha * g).collect())
}

pub(crate) fn bce_node(g: &mut Graph, logits: Var, label: f64) -> Var {
    g.custom_scalar(&[logits], move |vals| {
        let l: Vec<f64> = vals[0].data().iter().map(|&v| v as f64).collect();
        let (loss, grad) = bce_with_logits(&l, label);
        (loss, vec![grad.into_iter().map(|v| v as f32).collect()])
    })
}

pub(crate) fn l1_node(g: &mut Graph, pred: Var, real: &[f32]) -> Var {
    let real: Vec<f64> = real.iter().map(|&v| v as f64).collect();
    g.custom_scalar(&[pred], move |vals| {
        let p: Vec<f64> = vals[0].data().iter().map(|&v| v as f64).collect();
        let (loss, grad) = l1_with_grad(&p, &real);
        (loss, vec![grad.into_iter().map(|v| v as f32).collect()])
    })
}

/// Normalized intensity histogram over [0, 1].
pub fn intensity_histogram(v: &Volume3D, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins.max(1)];
    for &x in v.values() {
        let b = ((x as f64 * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = v.values().len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

pub fn histogram_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Channels of the first generator block; doubled per level.
    pub base_channels: usize,
    /// Channels of the first discriminator layer; doubled per layer.
    pub disc_channels: usize,
    pub alpha: f64,
    pub lr: f32,
    /// Discriminator learning rate. A twentieth of the generator's keeps the
    /// discriminator from saturating on the short desk-scale schedules.
    pub disc_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epochs: usize,
    /// Discriminator also sees the structural volume.
    pub conditional: bool,
    /// Feed a seeded Gaussian noise channel to the generator, the source
    /// of its speckle.
    pub noise: bool,
    /// Add the structural volume's logit to the output logit, so the
    /// untrained generator starts near the identity.
    pub residual: bool,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            disc_channels: 8,
            alpha: 10.0,
            lr: 2e-4,
            disc_lr: 1e-5,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 60,
            conditional: false,
            noise: true,
            residual: true,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.disc_channels == 0 {
            return Err(Error::Invalid("refiner channel counts must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::Invalid("refiner learning rates must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f32) -> Adam {
        Adam::new(AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() })
    }
}

const DISC_LAYERS: usize = 4;
const GEN_LEVELS: usize = 3;
const LEAKY: f32 = 0.2;

/// Kernel-4, stride-2 geometry for one discriminator layer. Padding is 1,
/// or 2 on an axis of extent 1 so that the axis stays at one patch.
fn disc_geom(input: [usize; 3]) -> ConvGeom {
    let pad = input.map(|n| if n < 2 { 2 } else { 1 });
    ConvGeom { kernel: [4; 3], stride: [2; 3], pad }
}

/// Patch grid of the discriminator for an input of `dims`.
pub fn patch_grid(dims: [usize; 3]) -> Result<[usize; 3]> {
    if dims[0] == 0 || dims[1] < 16 || dims[2] < 16 {
        return Err(Error::Shape(format!("volume {dims:?} is too small for the patch discriminator (H, W >= 16)")));
    }
    let mut n = dims;
    for _ in 0..DISC_LAYERS {
        n = disc_geom(n).conv_out(n).expect("padding keeps every axis valid");
    }
    Ok(n)
}

/// Volumetric PatchGAN: four stride-2 convolutions with LeakyReLU and a
/// 1x1x1 logit projection. No normalization, so each logit depends only on
/// its receptive field.
pub struct PatchDiscriminator {
    pub params: ParamStore,
    convs: Vec<Conv>,
    proj: Conv,
}

impl PatchDiscriminator {
    pub fn new(in_channels: usize, base: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[seed, 0xd15c]));
        let mut convs = Vec::new();
        let mut ci = in_channels;
        for k in 0..DISC_LAYERS {
            let co = base << k;
            convs.push(Conv::new3d(&mut ps, &mut r, &format!("d{k}"), ci, co, ConvGeom::cube(4, 2, 1), true));
            ci = co;
        }
        let proj = Conv::new3d(&mut ps, &mut r, "proj", ci, 1, ConvGeom::cube(1, 1, 0), true);
        Self { params: ps, convs, proj }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        patch_grid([s[2], s[3], s[4]])?;
        let mut h = x;
        for c in &self.convs {
            let s = g.shape(h);
            h = c.forward_with(g, &self.params, h, disc_geom([s[2], s[3], s[4]]));
            h = g.leaky_relu(h, LEAKY);
        }
        Ok(self.proj.forward(g, &self.params, h))
    }
}

struct Block {
    conv: Conv,
    bn: BatchNorm,
}

impl Block {
    fn new(ps: &mut ParamStore, r: &mut p2v_nn::ChaCha8Rng, name: &str, ci: usize, co: usize) -> Self {
        Self {
            conv: Conv::new3d(ps, r, &format!("{name}.conv"), ci, co, ConvGeom::cube(3, 1, 1), false),
            bn: BatchNorm::new(ps, &format!("{name}.bn"), co),
        }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let h = self.conv.forward(g, ps, x);
        let h = self.bn.forward(g, ps, h);
        g.relu(h)
    }
}

/// Three-level 3D U-Net with conv-BN-ReLU blocks, max-pool downsampling
/// and stride-2 transposed-convolution upsampling.
pub struct RefinerGenerator {
    pub params: ParamStore,
    enc: Vec<Block>,
    mid: Block,
    ups: Vec<ConvTranspose>,
    dec: Vec<Block>,
    out: Conv,
}

impl RefinerGenerator {
    pub fn new(in_channels: usize, base: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[seed, 0x9e4]));
        let chans: Vec<usize> = (0..GEN_LEVELS).map(|k| base << k).collect();
        let mut enc = Vec::new();
        let mut ci = in_channels;
        for (k, &c) in chans.iter().enumerate() {
            enc.push(Block::new(&mut ps, &mut r, &format!("enc{k}"), ci, c));
            ci = c;
        }
        let mid = Block::new(&mut ps, &mut r, "mid", ci, ci);
        let (mut ups, mut dec) = (Vec::new(), Vec::new());
        for (k, &c) in chans.iter().enumerate().rev() {
            ups.push(ConvTranspose::new3d(&mut ps, &mut r, &format!("up{k}"), ci, c, ConvGeom::cube(2, 2, 0)));
            dec.push(Block::new(&mut ps, &mut r, &format!("dec{k}"), 2 * c, c));
            ci = c;
        }
        let out = Conv::new3d(&mut ps, &mut r, "out", ci, 1, ConvGeom::cube(1, 1, 0), true);
        Self { params: ps, enc, mid, ups, dec, out }
    }

    /// Output logits (before the sigmoid).
    fn logits(&self, g: &mut Graph, x: Var) -> Var {
        let ps = &self.params;
        let mut skips = Vec::new();
        let mut h = x;
        for b in &self.enc {
            h = b.forward(g, ps, h);
            skips.push(h);
            h = g.max_pool(h, [2, 2, 2]);
        }
        h = self.mid.forward(g, ps, h);
        for ((up, b), &skip) in self.ups.iter().zip(&self.dec).zip(skips.iter().rev()) {
            h = up.forward(g, ps, h);
            h = g.concat_channels(&[h, skip]);
            h = b.forward(g, ps, h);
        }
        self.out.forward(g, ps, h)
    }
}

/// Logit of a volume clamped away from 0 and 1.
fn logit_tensor(t: &Tensor) -> Tensor {
    t.map(|v| {
        let p = v.clamp(0.01, 0.99);
        (p / (1.0 - p)).ln()
    })
}

/// Trained (or freshly initialized) refiner generator and discriminator
/// for one volume shape.
pub struct Refiner {
    pub config: RefinerConfig,
    dims: [usize; 3],
    pub generator: RefinerGenerator,
    pub discriminator: PatchDiscriminator,
}

impl Refiner {
    pub fn new(config: RefinerConfig, dims: [usize; 3]) -> Result<Self> {
        config.validate()?;
        if dims.iter().any(|&n| n == 0 || n % (1 << GEN_LEVELS) != 0) {
            return Err(Error::Shape(format!("refiner dims {dims:?} must be positive multiples of {}", 1 << GEN_LEVELS)));
        }
        patch_grid(dims)?;
        let gen_in = 1 + usize::from(config.noise);
        let disc_in = 1 + usize::from(config.conditional);
        Ok(Self {
            generator: RefinerGenerator::new(gen_in, config.base_channels, config.seed),
            discriminator: PatchDiscriminator::new(disc_in, config.disc_channels, config.seed),
            config,
            dims,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn check(&self, v: &Volume3D) -> Result<()> {
        let (d, h, w) = v.dims();
        if [d, h, w] != self.dims {
            return Err(Error::Dims { expected: format!("{:?}", self.dims), found: format!("{:?}", [d, h, w]) });
        }
        Ok(())
    }

    fn generate(&self, g: &mut Graph, v_e: &Tensor, noise_seed: u64) -> Var {
        let x = g.input(v_e.clone());
        let x = if self.config.noise {
            let n = g.input(noise_tensor(v_e.shape(), noise_seed));
            g.concat_channels(&[x, n])
        } else {
            x
        };
        let mut out = self.generator.logits(g, x);
        if self.config.residual {
            let base = g.input(logit_tensor(v_e));
            out = g.add(out, base);
        }
        g.sigmoid(out)
    }

    fn disc_input(&self, g: &mut Graph, v: Var, v_e: &Tensor) -> Var {
        if self.config.conditional {
            let c = g.input(v_e.clone());
            g.concat_channels(&[v, c])
        } else {
            v
        }
    }

    /// Refines a structural volume. `noise_seed` selects the speckle
    /// realization; the call is otherwise pure.
    pub fn refine(&self, v_e: &Volume3D, noise_seed: u64) -> Result<Volume3D> {
        self.check(v_e)?;
        let mut g = Graph::new(false);
        let out = self.generate(&mut g, &volume_tensor(v_e), noise_seed);
        tensor_volume(g.value(out))
    }

    /// Patch logits for `v`; `condition` is the structural volume and is
    /// required by a conditional discriminator.
    pub fn discriminate(&self, v: &Volume3D, condition: Option<&Volume3D>) -> Result<PatchScores> {
        self.check(v)?;
        let mut g = Graph::new(false);
        let x = g.input(volume_tensor(v));
        let x = match (self.config.conditional, condition) {
            (true, Some(c)) => {
                self.check(c)?;
                self.disc_input(&mut g, x, &volume_tensor(c))
            }
            (true, None) => return Err(Error::Invalid("conditional discriminator needs the structural volume".into())),
            (false, _) => x,
        };
        let logits = self.discriminator.forward(&mut g, x)?;
        let s = g.shape(logits);
        Ok(PatchScores { dims: [s[2], s[3], s[4]], logits: g.value(logits).data().to_vec() })
    }

    /// Alternating generator/discriminator training on `(V_E, V_real)`
    /// pairs for `config.epochs` epochs.
    pub fn train(&mut self, pairs: &[(Volume3D, Volume3D)]) -> Result<LossHistory> {
        if pairs.is_empty() {
            return Err(Error::Invalid("refiner training needs at least one pair".into()));
        }
        for (ve, real) in pairs {
            self.check(ve)?;
            self.check(real)?;
        }
        let data: Vec<(Tensor, Tensor)> = pairs.iter().map(|(a, b)| (volume_tensor(a), volume_tensor(b))).collect();
        let (mut g_opt, mut d_opt) = (self.config.adam(self.config.lr), self.config.adam(self.config.disc_lr));
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut r = rng(mix_seed(&[self.config.seed, 0x0bde]));
        let mut history = LossHistory::new(&["adv_g", "l1", "loss_d"]);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut r);
            let mut means = EpochMeans::new(4);
            for (step, &i) in order.iter().enumerate() {
                let seed = mix_seed(&[self.config.seed, epoch as u64, step as u64, 0x5eed]);
                means.add(&self.train_step(&data[i].0, &data[i].1, seed, &mut g_opt, &mut d_opt)?);
            }
            history.push(means.finish());
        }
        Ok(history)
    }

    fn train_step(&mut self, ve: &Tensor, real: &Tensor, seed: u64, g_opt: &mut Adam, d_opt: &mut Adam) -> Result<[f64; 4]> {
        let alpha = self.config.alpha;
        let mut g = Graph::new(true);
        g.freeze(&self.discriminator.params);
        let fake = self.generate(&mut g, ve, seed);
        let d_in = self.disc_input(&mut g, fake, ve);
        let logits = self.discriminator.forward(&mut g, d_in)?;
        let adv = bce_node(&mut g, logits, 1.0);
        let l1 = l1_node(&mut g, fake, real.data());
        let total = g.weighted_sum(&[(adv, 1.0), (l1, alpha as f32)]);
        let (adv_v, l1_v) = (g.value(adv).item() as f64, g.value(l1).item() as f64);
        let grads = g.backward(total);
        g_opt.step(&mut self.generator.params, &grads);
        self.generator.params.apply_buffer_updates(&mut g);
        let fake_t = g.value(fake).clone();

        let mut g = Graph::new(true);
        let x_real = g.input(real.clone());
        let x_real = self.disc_input(&mut g, x_real, ve);
        let x_fake = g.input(fake_t);
        let x_fake = self.disc_input(&mut g, x_fake, ve);
        let l_real = self.discriminator.forward(&mut g, x_real)?;
        let l_fake = self.discriminator.forward(&mut g, x_fake)?;
        let a = bce_node(&mut g, l_real, 1.0);
        let b = bce_node(&mut g, l_fake, 0.0);
        let loss_d = g.add(a, b);
        let d_v = g.value(loss_d).item() as f64;
        let grads = g.backward(loss_d);
        d_opt.step(&mut self.discriminator.params, &grads);
        Ok([adv_v + alpha * l1_v, adv_v, l1_v, d_v])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            path.as_ref(),
            STAGE,
            &self.config,
            self.dims,
            &[("generator", &self.generator.params), ("discriminator", &self.discriminator.params)],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, dims, ck) = load_checkpoint::<RefinerConfig>(path.as_ref(), STAGE)?;
        let mut r = Self::new(config, dims)?;
        p2v_nn::restore_into(&mut r.generator.params, ck.store("generator")?)?;
        p2v_nn::restore_into(&mut r.discriminator.params, ck.store("discriminator")?)?;
        Ok(r)
    }
}

/// Builds a refiner for the pairs' shape and trains it.
pub fn train_refiner(pairs: &[(Volume3D, Volume3D)], config: &RefinerConfig) -> Result<(Refiner, LossHistory)> {
    let (d, h, w) = pairs.first().ok_or_else(|| Error::Invalid("refiner training needs at least one pair".into()))?.0.dims();
    let mut r = Refiner::new(config.clone(), [d, h, w])?;
    let history = r.train(pairs)?;
    Ok((r, history))
}
