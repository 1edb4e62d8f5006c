//! Style transfer: turns a binary impression into a grayscale image in the
//! style of a depth-averaged OCT scan. A content encoder/decoder is
//! restyled through AdaIN by codes from a style encoder, and trained with
//! adversarial, contrastive-style (CSL) and feature-matching losses.

use std::collections::BTreeMap;
use std::path::Path;

use p2v_nn::layers::{Conv, Linear};
use p2v_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::refiner::{bce_node, l1_node};
use crate::tensor_io::{BinaryImage2D, Category, Image2D};
use crate::training::{image_tensor, load_checkpoint, save_checkpoint, tensor_image, EpochMeans, LossHistory};
use crate::util::{mix_seed, rng};
use crate::{Error, Result};

pub const STAGE: &str = "style";
pub const ADAIN_EPS: f32 = 1e-5;
const LEAKY: f32 = 0.2;
/// `softplus(STD_BIAS) == 1`, so untrained std heads leave features unscaled.
const STD_BIAS: f32 = 0.541_324_85;

/// Replaces the per-channel statistics of `content` (`[C, H, W]` or
/// `[N, C, H, W]` with N = 1) by `style_mean` / `style_std`.
pub fn adain(content: &Tensor, style_mean: &[f32], style_std: &[f32], eps: f32) -> Result<Tensor> {
    let s = content.shape().to_vec();
    let x = match s.len() {
        3 => content.clone().reshape(&[1, s[0], s[1], s[2]]),
        4 if s[0] == 1 => content.clone(),
        _ => return Err(Error::Shape(format!("adain expects [C,H,W] or [1,C,H,W], got {s:?}"))),
    };
    let c = x.shape()[1];
    if style_mean.len() != c || style_std.len() != c {
        return Err(Error::Shape(format!("{c} channels but {} means and {} stds", style_mean.len(), style_std.len())));
    }
    if style_std.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Invalid("style std must be >= 0".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid("adain eps must be > 0".into()));
    }
    let mut g = Graph::new(false);
    let xv = g.input(x);
    let m = g.input(Tensor::new(vec![1, c], style_mean.to_vec()));
    let sd = g.input(Tensor::new(vec![1, c], style_std.to_vec()));
    let y = g.adain(xv, m, sd, eps);
    Ok(g.value(y).clone().reshape(&s))
}

/// Global style embedding of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode(pub Vec<f32>);

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / norm).collect(), norm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient through `u -> u / |u|`: `(g - û (û·g)) / |u|`.
fn unit_backward(u_hat: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(u_hat, g);
    g.iter().zip(u_hat).map(|(gi, ui)| (gi - ui * proj) / norm).collect()
}

/// Gradients of [`csl_loss_grad`].
#[derive(Clone, Debug)]
pub struct CslGrad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Contrastive style loss on L2-normalized codes with its gradient.
pub fn csl_loss_grad(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], t: f64) -> Result<(f64, CslGrad)> {
    if negatives.is_empty() {
        return Err(Error::Invalid("csl_loss needs at least one negative".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("temperature must be > 0, got {t}")));
    }
    let n = anchor.len();
    if positive.len() != n || negatives.iter().any(|v| v.len() != n) {
        return Err(Error::Shape("style codes differ in length".into()));
    }
    let (a, na) = unit(anchor);
    let (p, np) = unit(positive);
    let negs: Vec<(Vec<f64>, f64)> = negatives.iter().map(|v| unit(v)).collect();
    let mut logits = vec![dot(&a, &p) / t];
    logits.extend(negs.iter().map(|(u, _)| dot(&a, u) / t));
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let loss = m + z.ln() - logits[0];
    // d loss / d logit_k = softmax_k - [k == 0]
    let w: Vec<f64> = logits.iter().enumerate().map(|(k, l)| (l - m).exp() / z - f64::from(u8::from(k == 0))).collect();
    let mut ga = vec![0.0; n];
    for (i, gi) in ga.iter_mut().enumerate() {
        *gi = w[0] * p[i] / t + negs.iter().zip(&w[1..]).map(|((u, _), wk)| wk * u[i] / t).sum::<f64>();
    }
    let gp: Vec<f64> = a.iter().map(|ai| w[0] * ai / t).collect();
    let grad = CslGrad {
        anchor: unit_backward(&a, na, &ga),
        positive: unit_backward(&p, np, &gp),
        negatives: negs
            .iter()
            .zip(&w[1..])
            .map(|((u, nu), wk)| unit_backward(u, *nu, &a.iter().map(|ai| wk * ai / t).collect::<Vec<_>>()))
            .collect(),
    };
    Ok((loss.max(0.0), grad))
}

/// InfoNCE-style loss of an anchor code against one positive and several
/// negatives, at temperature `t`.
pub fn csl_loss(anchor: &StyleCode, positive: &StyleCode, negatives: &[StyleCode], t: f64) -> Result<f64> {
    let f = |c: &StyleCode| c.0.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let negs: Vec<Vec<f64>> = negatives.iter().map(f).collect();
    Ok(csl_loss_grad(&f(anchor), &f(positive), &negs, t)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub base_channels: usize,
    pub style_channels: usize,
    pub style_dim: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
    pub temperature: f64,
    pub negatives: usize,
    pub w_adv: f64,
    pub w_csl: f64,
    pub w_fm: f64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            style_channels: 8,
            style_dim: 128,
            res_blocks: 2,
            disc_channels: 16,
            temperature: 0.07,
            negatives: 15,
            w_adv: 1.0,
            w_csl: 1.0,
            w_fm: 10.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 40,
            seed: 0,
        }
    }
}

impl StyleConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.base_channels, self.style_channels, self.style_dim, self.disc_channels].contains(&0) {
            return Err(Error::Invalid("style channel counts must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.negatives == 0 {
            return Err(Error::Invalid("need at least one CSL negative".into()));
        }
        if [self.w_adv, self.w_csl, self.w_fm].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid("style learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Exemplar z-mean images by category.
#[derive(Clone, Debug, Default)]
pub struct ExemplarPool {
    pub categories: BTreeMap<Category, Vec<Image2D>>,
}

impl ExemplarPool {
    pub fn validate(&self, dims: (usize, usize), min_total: usize) -> Result<()> {
        for c in Category::ALL {
            let imgs = self.categories.get(&c).map(Vec::as_slice).unwrap_or_default();
            if imgs.is_empty() {
                return Err(Error::Invalid(format!("exemplar pool has no {} images", c.name())));
            }
            if let Some(bad) = imgs.iter().find(|i| i.dims() != dims) {
                return Err(Error::Dims { expected: format!("{dims:?}"), found: format!("{:?}", bad.dims()) });
            }
        }
        if self.len() < min_total {
            return Err(Error::Invalid(format!("exemplar pool holds {} images, need {min_total}", self.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All exemplars in category order, with their categories.
    fn flat(&self) -> Vec<(Category, &Image2D)> {
        self.categories.iter().flat_map(|(c, v)| v.iter().map(move |i| (*c, i))).collect()
    }
}

/// One training example: impression, its paired ground-truth z-mean and
/// the impression's category.
#[derive(Clone, Debug)]
pub struct StylePair {
    pub print: BinaryImage2D,
    pub target: Image2D,
    pub category: Category,
}

struct AdaBlock {
    conv: Conv,
    mean: Linear,
    std: Linear,
}

/// Generator (content encoder, residual blocks, AdaIN decoder) plus the
/// style encoder; they share one parameter store.
pub struct StyleGenerator {
    pub params: ParamStore,
    enc: Vec<Conv>,
    res: Vec<(Conv, Conv)>,
    dec: Vec<AdaBlock>,
    out: Conv,
    style: Vec<Conv>,
    style_head: Linear,
}

/// Planar PatchGAN: three stride-2 convolutions with LeakyReLU and a 1x1
/// logit projection. Intermediate activations feed feature matching.
pub struct StyleDiscriminator {
    pub params: ParamStore,
    convs: Vec<Conv>,
    proj: Conv,
}

impl StyleDiscriminator {
    fn new(base: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[seed, 0x2dd]));
        let mut convs = Vec::new();
        let mut ci = 1;
        for k in 0..3 {
            let co = base << k;
            convs.push(Conv::new2d(&mut ps, &mut r, &format!("d{k}"), ci, co, 4, 2, 1, true));
            ci = co;
        }
        let proj = Conv::new2d(&mut ps, &mut r, "proj", ci, 1, 1, 1, 0, true);
        Self { params: ps, convs, proj }
    }

    /// Logits and the activation after every convolution.
    fn forward(&self, g: &mut Graph, x: Var) -> (Var, Vec<Var>) {
        let mut feats = Vec::new();
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, &self.params, h);
            h = g.leaky_relu(h, LEAKY);
            feats.push(h);
        }
        (self.proj.forward(g, &self.params, h), feats)
    }
}

impl StyleGenerator {
    fn new(cfg: &StyleConfig) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[cfg.seed, 0x571e]));
        let c = cfg.base_channels;
        let enc = vec![
            Conv::new2d(&mut ps, &mut r, "enc0", 1, c, 3, 1, 1, false),
            Conv::new2d(&mut ps, &mut r, "enc1", c, 2 * c, 4, 2, 1, false),
            Conv::new2d(&mut ps, &mut r, "enc2", 2 * c, 4 * c, 4, 2, 1, false),
        ];
        let res = (0..cfg.res_blocks)
            .map(|k| {
                (
                    Conv::new2d(&mut ps, &mut r, &format!("res{k}.a"), 4 * c, 4 * c, 3, 1, 1, false),
                    Conv::new2d(&mut ps, &mut r, &format!("res{k}.b"), 4 * c, 4 * c, 3, 1, 1, false),
                )
            })
            .collect();
        let widths = [(4 * c, 2 * c), (2 * c, c), (c, c)];
        let dec = widths
            .iter()
            .enumerate()
            .map(|(k, &(ci, co))| AdaBlock {
                conv: Conv::new2d(&mut ps, &mut r, &format!("dec{k}"), ci, co, 3, 1, 1, false),
                mean: Linear::with_constant_output(&mut ps, &format!("dec{k}.mean"), cfg.style_dim, co, 0.0),
                std: Linear::with_constant_output(&mut ps, &format!("dec{k}.std"), cfg.style_dim, co, STD_BIAS),
            })
            .collect();
        let out = Conv::new2d(&mut ps, &mut r, "out", c, 1, 3, 1, 1, true);
        let s = cfg.style_channels;
        let chans = [1, s, 2 * s, 4 * s, 4 * s];
        let style = (0..4).map(|k| Conv::new2d(&mut ps, &mut r, &format!("style{k}"), chans[k], chans[k + 1], 4, 2, 1, true)).collect();
        let style_head = Linear::new(&mut ps, &mut r, "style.head", 4 * s, cfg.style_dim);
        Self { params: ps, enc, res, dec, out, style, style_head }
    }

    fn encode_style(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for c in &self.style {
            h = c.forward(g, &self.params, h);
            h = g.leaky_relu(h, LEAKY);
        }
        let pooled = g.global_avg_pool(h);
        self.style_head.forward(g, &self.params, pooled)
    }

    fn generate(&self, g: &mut Graph, content: Var, code: Var) -> Var {
        let ps = &self.params;
        let mut h = content;
        for c in &self.enc {
            h = c.forward(g, ps, h);
            h = g.instance_norm(h, ADAIN_EPS);
            h = g.relu(h);
        }
        for (a, b) in &self.res {
            let mut r = a.forward(g, ps, h);
            r = g.instance_norm(r, ADAIN_EPS);
            r = g.relu(r);
            r = b.forward(g, ps, r);
            r = g.instance_norm(r, ADAIN_EPS);
            h = g.add(h, r);
        }
        for (k, blk) in self.dec.iter().enumerate() {
            if k < 2 {
                let s = g.shape(h);
                let dims = [1, s[2] * 2, s[3] * 2];
                h = g.resize(h, dims);
            }
            h = blk.conv.forward(g, ps, h);
            let mean = blk.mean.forward(g, ps, code);
            let std = blk.std.forward(g, ps, code);
            let std = g.softplus(std);
            h = g.adain(h, mean, std, ADAIN_EPS);
            h = g.relu(h);
        }
        let o = self.out.forward(g, ps, h);
        g.sigmoid(o)
    }
}

/// Trained (or fresh) style-transfer networks for one image size.
pub struct StyleTransfer {
    pub config: StyleConfig,
    dims: (usize, usize),
    pub generator: StyleGenerator,
    pub discriminator: StyleDiscriminator,
}

impl StyleTransfer {
    pub fn new(config: StyleConfig, dims: (usize, usize)) -> Result<Self> {
        config.validate()?;
        if dims.0 % 16 != 0 || dims.1 % 16 != 0 || dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Shape(format!("style stage needs sides divisible by 16, got {dims:?}")));
        }
        Ok(Self {
            generator: StyleGenerator::new(&config),
            discriminator: StyleDiscriminator::new(config.disc_channels, config.seed),
            config,
            dims,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.dims {
            return Err(Error::Dims { expected: format!("{:?}", self.dims), found: format!("{dims:?}") });
        }
        Ok(())
    }

    pub fn style_encode(&self, img: &Image2D) -> Result<StyleCode> {
        self.check(img.dims())?;
        let mut g = Graph::new(false);
        let x = g.input(image_tensor(img));
        let z = self.generator.encode_style(&mut g, x);
        Ok(StyleCode(g.value(z).data().to_vec()))
    }

    /// Restyles impression `i_m` after `exemplar`.
    pub fn generate(&self, i_m: &BinaryImage2D, exemplar: &Image2D) -> Result<Image2D> {
        self.check(i_m.dims())?;
        self.check(exemplar.dims())?;
        let mut g = Graph::new(false);
        let x = g.input(image_tensor(&i_m.to_image()));
        let e = g.input(image_tensor(exemplar));
        let code = self.generator.encode_style(&mut g, e);
        let y = self.generator.generate(&mut g, x, code);
        tensor_image(g.value(y))
    }

    /// Alternating generator/discriminator training; columns
    /// `loss_total, adv_g, csl, fm, loss_d`.
    pub fn train(&mut self, pairs: &[StylePair], pool: &ExemplarPool) -> Result<LossHistory> {
        if pairs.is_empty() {
            return Err(Error::Invalid("style training needs at least one pair".into()));
        }
        pool.validate(self.dims, self.config.negatives + 1)?;
        for p in pairs {
            self.check(p.print.dims())?;
            self.check(p.target.dims())?;
        }
        let cfg = self.config.clone();
        let adam = || Adam::new(AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() });
        let (mut g_opt, mut d_opt) = (adam(), adam());
        let flat = pool.flat();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut r = rng(mix_seed(&[cfg.seed, 0x7a1]));
        let mut history = LossHistory::new(&["adv_g", "csl", "fm", "loss_d"]);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut r);
            let mut means = EpochMeans::new(5);
            for &i in &order {
                let pair = &pairs[i];
                let candidates: Vec<usize> = (0..flat.len()).filter(|&k| flat[k].0 == pair.category).collect();
                let ex = *candidates.choose(&mut r).expect("pool validated");
                let others: Vec<usize> = (0..flat.len()).filter(|&k| k != ex).collect();
                let negs: Vec<&Image2D> = others.choose_multiple(&mut r, cfg.negatives).map(|&k| flat[k].1).collect();
                means.add(&self.train_step(pair, flat[ex].1, &negs, &mut g_opt, &mut d_opt));
            }
            history.push(means.finish());
        }
        Ok(history)
    }

    fn train_step(&mut self, pair: &StylePair, exemplar: &Image2D, negs: &[&Image2D], g_opt: &mut Adam, d_opt: &mut Adam) -> [f64; 5] {
        let cfg = &self.config;
        let gen = &self.generator;
        let mut g = Graph::new(true);
        g.freeze(&self.discriminator.params);
        let x = g.input(image_tensor(&pair.print.to_image()));
        let e = g.input(image_tensor(exemplar));
        let pos = gen.encode_style(&mut g, e);
        let fake = gen.generate(&mut g, x, pos);
        let anchor = gen.encode_style(&mut g, fake);
        let neg_codes: Vec<Var> = negs
            .iter()
            .map(|img| {
                let v = g.input(image_tensor(img));
                gen.encode_style(&mut g, v)
            })
            .collect();
        let t = cfg.temperature;
        let mut codes = vec![anchor, pos];
        codes.extend(&neg_codes);
        let csl = g.custom_scalar(&codes, move |vals| {
            let f = |x: &Tensor| x.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
            let negs: Vec<Vec<f64>> = vals[2..].iter().map(|v| f(v)).collect();
            let (loss, grad) = csl_loss_grad(&f(vals[0]), &f(vals[1]), &negs, t).expect("validated codes");
            let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
            let mut grads = vec![to32(grad.anchor), to32(grad.positive)];
            grads.extend(grad.negatives.into_iter().map(to32));
            (loss, grads)
        });
        let (logits, fake_feats) = self.discriminator.forward(&mut g, fake);
        let adv = bce_node(&mut g, logits, 1.0);
        let real = g.input(image_tensor(&pair.target));
        let (_, real_feats) = self.discriminator.forward(&mut g, real);
        let mut fm_terms = Vec::new();
        for (&f, &rf) in fake_feats.iter().zip(&real_feats) {
            let target = g.value(rf).data().to_vec();
            fm_terms.push(l1_node(&mut g, f, &target));
        }
        let n_fm = fm_terms.len() as f32;
        let fm = g.weighted_sum(&fm_terms.iter().map(|&v| (v, 1.0 / n_fm)).collect::<Vec<_>>());
        let total = g.weighted_sum(&[(adv, cfg.w_adv as f32), (csl, cfg.w_csl as f32), (fm, cfg.w_fm as f32)]);
        let vals = [total, adv, csl, fm].map(|v| g.value(v).item() as f64);
        let grads = g.backward(total);
        g_opt.step(&mut self.generator.params, &grads);
        let fake_t = g.value(fake).clone();

        let mut g = Graph::new(true);
        let xr = g.input(image_tensor(&pair.target));
        let xf = g.input(fake_t);
        let (lr, _) = self.discriminator.forward(&mut g, xr);
        let (lf, _) = self.discriminator.forward(&mut g, xf);
        let a = bce_node(&mut g, lr, 1.0);
        let b = bce_node(&mut g, lf, 0.0);
        let loss_d = g.add(a, b);
        let d = g.value(loss_d).item() as f64;
        let grads = g.backward(loss_d);
        d_opt.step(&mut self.discriminator.params, &grads);
        [vals[0], vals[1], vals[2], vals[3], d]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            path.as_ref(),
            STAGE,
            &self.config,
            [1, self.dims.0, self.dims.1],
            &[("generator", &self.generator.params), ("discriminator", &self.discriminator.params)],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, dims, ck) = load_checkpoint::<StyleConfig>(path.as_ref(), STAGE)?;
        let mut s = Self::new(config, (dims[1], dims[2]))?;
        p2v_nn::restore_into(&mut s.generator.params, ck.store("generator")?)?;
        p2v_nn::restore_into(&mut s.discriminator.params, ck.store("discriminator")?)?;
        Ok(s)
    }
}

/// Builds and trains the style stage.
pub fn train_style_stage(pairs: &[StylePair], pool: &ExemplarPool, config: &StyleConfig) -> Result<(StyleTransfer, LossHistory)> {
    let first = pairs.first().ok_or_else(|| Error::Invalid("style training needs at least one pair".into()))?;
    let mut s = StyleTransfer::new(config.clone(), first.print.dims())?;
    let history = s.train(pairs, pool)?;
    Ok((s, history))
}
