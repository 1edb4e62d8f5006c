//! SSIM (2D/3D, with gradient), Gaussian feature statistics and the
//! Fréchet distance, embedders for FID/FVD, and ROC/EER/TAR.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use p2v_nn::layers::{Conv, Linear};
use p2v_nn::{Adam, AdamConfig, ConvGeom, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;

use crate::tensor_io::{read_volume, DatasetManifest, Image2D, Volume3D};
use crate::util::{gaussian_taps, mix_seed, rng};
use crate::{Error, Result};

// ---------------------------------------------------------------- SSIM

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub const C1: f64 = 0.01 * 0.01;
    pub const C2: f64 = 0.03 * 0.03;

    pub fn planar() -> Self {
        Self { window: 11, sigma: 1.5, c1: Self::C1, c2: Self::C2 }
    }

    pub fn volumetric() -> Self {
        Self { window: 7, sigma: 1.5, c1: Self::C1, c2: Self::C2 }
    }

    fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Invalid(format!("SSIM window {} must be odd and at least 3", self.window)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Invalid("SSIM sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Anything SSIM can compare: a `[depth, height, width]` grid of values.
pub trait Spatial {
    fn spatial_dims(&self) -> [usize; 3];
    fn spatial_values(&self) -> &[f32];
}

impl Spatial for Image2D {
    fn spatial_dims(&self) -> [usize; 3] {
        [1, self.height(), self.width()]
    }

    fn spatial_values(&self) -> &[f32] {
        self.values()
    }
}

impl Spatial for Volume3D {
    fn spatial_dims(&self) -> [usize; 3] {
        let (d, h, w) = self.dims();
        [d, h, w]
    }

    fn spatial_values(&self) -> &[f32] {
        self.values()
    }
}

/// Gaussian filtering along one axis, truncated at the borders. With
/// `normalize`, the weights of each output are rescaled to sum to one
/// (so constants are preserved); otherwise the raw taps are used (the
/// adjoint pass divides by the border norms beforehand).
fn filter_axis(x: &[f64], dims: [usize; 3], axis: usize, taps: &[f64], normalize: bool) -> Vec<f64> {
    let n = dims[axis];
    if n == 1 {
        return x.to_vec();
    }
    let r = taps.len() / 2;
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let norms = border_norms(n, taps);
    let mut out = vec![0.0f64; x.len()];
    for o in 0..outer {
        for i in 0..n {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            let scale = if normalize { 1.0 / norms[i] } else { 1.0 };
            for j in lo..=hi {
                let t = taps[j + r - i] * scale;
                let src = &x[(o * n + j) * inner..][..inner];
                let dst = &mut out[(o * n + i) * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += t * s;
                }
            }
        }
    }
    out
}

/// Sum of the in-range taps for each position along an axis.
fn border_norms(n: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    (0..n).map(|i| (i.saturating_sub(r)..=(i + r).min(n - 1)).map(|j| taps[j + r - i]).sum()).collect()
}

fn window_filter(x: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for axis in 0..3 {
        cur = filter_axis(&cur, dims, axis, taps, true);
    }
    cur
}

/// Adjoint of [`window_filter`].
fn window_filter_adjoint(y: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let mut cur = y.to_vec();
    for axis in (0..3).rev() {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let norms = border_norms(n, taps);
        let inner: usize = dims[axis + 1..].iter().product();
        for (k, v) in cur.iter_mut().enumerate() {
            *v /= norms[(k / inner) % n];
        }
        cur = filter_axis(&cur, dims, axis, taps, false);
    }
    cur
}

struct SsimMaps {
    ssim: f64,
    /// d(mean SSIM)/d(a), when requested.
    grad: Option<Vec<f64>>,
}

fn ssim_core(a: &[f64], b: &[f64], dims: [usize; 3], p: &SsimParams, want_grad: bool) -> Result<SsimMaps> {
    p.validate()?;
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!("SSIM inputs of {} and {} values for dims {dims:?}", a.len(), b.len())));
    }
    let taps = gaussian_taps(p.window / 2, p.sigma);
    let f = |v: &[f64]| window_filter(v, dims, &taps);
    let mu_a = f(a);
    let mu_b = f(b);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, e_bb, e_ab) = (f(&aa), f(&bb), f(&ab));
    let mut total = 0.0;
    let (mut ga, mut gb, mut gc) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let n1 = 2.0 * ma * mb + p.c1;
        let n2 = 2.0 * cov + p.c2;
        let d1 = ma * ma + mb * mb + p.c1;
        let d2 = va + vb + p.c2;
        let s = n1 * n2 / (d1 * d2);
        total += s;
        if want_grad {
            let ds_dmu = 2.0 * mb * n2 / (d1 * d2) - 2.0 * ma * s / d1;
            let ds_dva = -s / d2;
            let ds_dcov = 2.0 * n1 / (d1 * d2);
            ga[i] = ds_dmu - 2.0 * ma * ds_dva - mb * ds_dcov;
            gb[i] = ds_dva;
            gc[i] = ds_dcov;
        }
    }
    let ssim = total / n as f64;
    let grad = want_grad.then(|| {
        let fa = window_filter_adjoint(&ga, dims, &taps);
        let fb = window_filter_adjoint(&gb, dims, &taps);
        let fc = window_filter_adjoint(&gc, dims, &taps);
        (0..n).map(|q| (fa[q] + 2.0 * a[q] * fb[q] + b[q] * fc[q]) / n as f64).collect()
    });
    Ok(SsimMaps { ssim, grad })
}

/// Mean SSIM over all positions of `[d, h, w]` grids (`d = 1` for images).
pub fn ssim_values(a: &[f64], b: &[f64], dims: [usize; 3], p: &SsimParams) -> Result<f64> {
    Ok(ssim_core(a, b, dims, p, false)?.ssim)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_values_grad(a: &[f64], b: &[f64], dims: [usize; 3], p: &SsimParams) -> Result<(f64, Vec<f64>)> {
    let m = ssim_core(a, b, dims, p, true)?;
    Ok((m.ssim, m.grad.expect("requested")))
}

pub fn ssim<T: Spatial>(a: &T, b: &T, p: &SsimParams) -> Result<f64> {
    if a.spatial_dims() != b.spatial_dims() {
        return Err(Error::Shape(format!("SSIM of {:?} vs {:?}", a.spatial_dims(), b.spatial_dims())));
    }
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    ssim_values(&to64(a.spatial_values()), &to64(b.spatial_values()), a.spatial_dims(), p)
}

/// Planar SSIM with the standard 11-tap window.
pub fn ssim2d(a: &Image2D, b: &Image2D) -> Result<f64> {
    ssim(a, b, &SsimParams::planar())
}

/// Volumetric SSIM with the 7-tap window.
pub fn ssim3d(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    ssim(a, b, &SsimParams::volumetric())
}

// ------------------------------------------------- Gaussian statistics

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sample mean and unbiased covariance.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples for statistics, got {}", features.len())));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = features.len() as f64;
    let mut mean = DVector::<f64>::zeros(dim);
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for f in features {
        let d = DVector::from_iterator(dim, f.iter().zip(mean.iter()).map(|(v, m)| v - m));
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    Ok(GaussianStats { mean, cov })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, using the symmetric
/// form `Tr((S1^(1/2) S2 S1^(1/2))^(1/2))` for the cross term.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    if s1.mean.len() != s2.mean.len() || s1.cov.shape() != s2.cov.shape() {
        return Err(Error::Shape(format!("Fréchet distance of {}-dim vs {}-dim stats", s1.mean.len(), s2.mean.len())));
    }
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let (c1, c2) = (sym(&s1.cov), sym(&s2.cov));
    let r1 = psd_sqrt(&c1);
    let inner = &r1 * &c2 * &r1;
    let cross: f64 = SymmetricEigen::new(sym(&inner)).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (&s1.mean - &s2.mean).norm_squared();
    Ok((diff + c1.trace() + c2.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&gaussian_stats(a)?, &gaussian_stats(b)?)
}

// ------------------------------------------------------------ Embedders

/// A feature extractor for FID (images) or FVD (volumes).
pub trait Embedder<T> {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    fn embed(&self, x: &T) -> Result<Vec<f64>>;
}

/// Fixed-seed random strided convolution network (three stride-2 layers,
/// LeakyReLU, global average pooling to 64 features). Used as the default
/// embedder when no pretrained features are supplied.
pub struct RandomConvEmbedder {
    seed: u64,
    volumetric: bool,
    params: ParamStore,
    convs: Vec<Conv>,
}

pub const EMBED_DIM: usize = 64;

impl RandomConvEmbedder {
    fn build(seed: u64, volumetric: bool) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[seed, volumetric as u64, 0xe3b]));
        let chans = [1, 16, 32, EMBED_DIM];
        let convs = (0..3)
            .map(|i| {
                let name = format!("embed{i}");
                if volumetric {
                    Conv::new3d(&mut ps, &mut r, &name, chans[i], chans[i + 1], ConvGeom::cube(3, 2, 1), true)
                } else {
                    Conv::new2d(&mut ps, &mut r, &name, chans[i], chans[i + 1], 3, 2, 1, true)
                }
            })
            .collect();
        Self { seed, volumetric, params: ps, convs }
    }

    pub fn images(seed: u64) -> Self {
        Self::build(seed, false)
    }

    pub fn volumes(seed: u64) -> Self {
        Self::build(seed, true)
    }

    fn run(&self, input: Tensor) -> Vec<f64> {
        let mut g = Graph::new(false);
        let mut h = g.input(input);
        for c in &self.convs {
            h = c.forward(&mut g, &self.params, h);
            h = g.leaky_relu(h, 0.2);
        }
        let pooled = g.global_avg_pool(h);
        g.value(pooled).data().iter().map(|&v| v as f64).collect()
    }
}

impl Embedder<Image2D> for RandomConvEmbedder {
    fn id(&self) -> String {
        format!("random-conv2d-{}", self.seed)
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, x: &Image2D) -> Result<Vec<f64>> {
        if self.volumetric {
            return Err(Error::Invalid("volumetric embedder applied to an image".into()));
        }
        Ok(self.run(Tensor::new(vec![1, 1, x.height(), x.width()], x.values().to_vec())))
    }
}

impl Embedder<Volume3D> for RandomConvEmbedder {
    fn id(&self) -> String {
        format!("random-conv3d-{}", self.seed)
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, x: &Volume3D) -> Result<Vec<f64>> {
        if !self.volumetric {
            return Err(Error::Invalid("planar embedder applied to a volume".into()));
        }
        let (d, h, w) = x.dims();
        Ok(self.run(Tensor::new(vec![1, 1, d, h, w], x.values().to_vec())))
    }
}

pub fn embed_all<T, E: Embedder<T> + ?Sized>(items: &[T], e: &E) -> Result<Vec<Vec<f64>>> {
    items.iter().map(|x| e.embed(x)).collect()
}

pub fn fid_score<E: Embedder<Image2D> + ?Sized>(set_a: &[Image2D], set_b: &[Image2D], e: &E) -> Result<f64> {
    frechet_from_features(&embed_all(set_a, e)?, &embed_all(set_b, e)?)
}

pub fn fvd_score<E: Embedder<Volume3D> + ?Sized>(set_a: &[Volume3D], set_b: &[Volume3D], e: &E) -> Result<f64> {
    frechet_from_features(&embed_all(set_a, e)?, &embed_all(set_b, e)?)
}

/// Every `stride`-th B-scan (x-z slice) of a volume; FID is computed over
/// these slices.
pub fn bscans_every(v: &Volume3D, stride: usize) -> Result<Vec<Image2D>> {
    (0..v.height()).step_by(stride.max(1)).map(|y| v.bscan(y)).collect()
}

// --------------------------------------------------------- Feature files

pub const FEATURE_MAGIC: [u8; 4] = *b"P2F1";

pub fn write_features(rows: &[Vec<f32>], path: impl AsRef<Path>) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * dim * rows.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in rows.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    if bytes.len() < 12 {
        return Err(Error::Truncated { expected: 12, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic { expected: FEATURE_MAGIC, found: magic });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * count * dim;
    if bytes.len() != expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let vals: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(if dim == 0 { vec![Vec::new(); count] } else { vals.chunks(dim).map(<[f32]>::to_vec).collect() })
}

// ------------------------------------------------------- ROC / EER / TAR

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Invalid("score set needs genuine and impostor scores".into()));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite score".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
}

/// ROC over thresholds -inf, every distinct score, +inf (ascending).
/// Accept when `score >= threshold`.
pub fn roc_points(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    s.validate()?;
    let mut gen = s.genuine.clone();
    let mut imp = s.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut all = vec![f64::NEG_INFINITY];
    all.extend(thresholds);
    all.push(f64::INFINITY);
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    Ok(all
        .into_iter()
        .map(|t| {
            let below_imp = imp.partition_point(|&v| v < t);
            let below_gen = gen.partition_point(|&v| v < t);
            RocPoint { far: (imp.len() - below_imp) as f64 / ni, frr: below_gen as f64 / ng, threshold: t }
        })
        .collect())
}

/// Equal error rate, linearly interpolated where FAR - FRR changes sign.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    let pts = roc_points(s)?;
    for i in 0..pts.len() {
        let d = pts[i].far - pts[i].frr;
        if d == 0.0 {
            return Ok(pts[i].far);
        }
        if d < 0.0 {
            let (p, q) = (pts[i - 1], pts[i]);
            let dp = p.far - p.frr;
            let t = dp / (dp - d);
            return Ok(p.far + t * (q.far - p.far));
        }
    }
    unreachable!("the +inf threshold has FAR 0 and FRR 1")
}

/// True-accept rate at the most permissive threshold whose FAR does not
/// exceed `far_target`, interpolated linearly in FAR towards the previous
/// ROC point.
pub fn tar_at_far(s: &ScoreSet, far_target: f64) -> Result<f64> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::Invalid(format!("FAR target {far_target} is outside (0, 1)")));
    }
    let pts = roc_points(s)?;
    let i = pts.iter().position(|p| p.far <= far_target).expect("last point has FAR 0");
    let q = pts[i];
    if q.far == far_target || i == 0 {
        return Ok(1.0 - q.frr);
    }
    let p = pts[i - 1];
    let t = (far_target - q.far) / (p.far - q.far);
    Ok(1.0 - (q.frr + t * (p.frr - q.frr)))
}

pub fn write_scores(s: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for v in &s.genuine {
        writeln!(out, "genuine {v}").unwrap();
    }
    for v in &s.impostor {
        writeln!(out, "impostor {v}").unwrap();
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let mut s = ScoreSet::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(label), Some(score), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Invalid(format!("score line {}: expected `label score`", n + 1)));
        };
        let v: f64 = score.parse().map_err(|_| Error::Invalid(format!("score line {}: bad number {score:?}", n + 1)))?;
        match label {
            "genuine" => s.genuine.push(v),
            "impostor" => s.impostor.push(v),
            _ => return Err(Error::Invalid(format!("score line {}: unknown label {label:?}", n + 1))),
        }
    }
    Ok(s)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// All-pairs scores: genuine when the labels match.
pub fn all_pairs_scores(features: &[Vec<f64>], labels: &[u32]) -> ScoreSet {
    let mut s = ScoreSet::default();
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let c = cosine(&features[i], &features[j]);
            if labels[i] == labels[j] {
                s.genuine.push(c);
            } else {
                s.impostor.push(c);
            }
        }
    }
    s
}

// ------------------------------------------------------- Tiny embedder

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TinyEmbedderConfig {
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TinyEmbedderConfig {
    fn default() -> Self {
        Self { epochs: 8, lr: 1e-3, seed: 7 }
    }
}

/// Small 3D convolutional identity classifier; its 64-dim penultimate
/// layer is the recognition feature (compared by cosine similarity).
pub struct TinyEmbedder {
    params: ParamStore,
    convs: Vec<Conv>,
    feature: Linear,
    head: Linear,
    seed: u64,
}

impl TinyEmbedder {
    pub fn new(n_classes: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut r = rng(mix_seed(&[seed, 0x71e]));
        let chans = [1, 8, 16, 32];
        let geoms = [
            ConvGeom { kernel: [3, 3, 3], stride: [1, 2, 2], pad: [1, 1, 1] },
            ConvGeom::cube(3, 2, 1),
            ConvGeom::cube(3, 2, 1),
        ];
        let convs = (0..3).map(|i| Conv::new3d(&mut ps, &mut r, &format!("conv{i}"), chans[i], chans[i + 1], geoms[i], true)).collect();
        let feature = Linear::new(&mut ps, &mut r, "feature", 32, EMBED_DIM);
        let head = Linear::new(&mut ps, &mut r, "head", EMBED_DIM, n_classes.max(1));
        Self { params: ps, convs, feature, head, seed }
    }

    fn features(&self, g: &mut Graph, v: &Volume3D) -> Var {
        let (d, h, w) = v.dims();
        let mut x = g.input(Tensor::new(vec![1, 1, d, h, w], v.values().to_vec()));
        for c in &self.convs {
            x = c.forward(g, &self.params, x);
            x = g.relu(x);
        }
        let pooled = g.global_avg_pool(x);
        self.feature.forward(g, &self.params, pooled)
    }

    /// Trains the identity classifier on `(volume, class)` pairs and
    /// returns the mean cross-entropy of each epoch.
    pub fn train(&mut self, data: &[(Volume3D, usize)], cfg: &TinyEmbedderConfig) -> Result<Vec<f64>> {
        let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut r = rng(mix_seed(&[cfg.seed, 0x5f]));
        let mut history = Vec::new();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut r);
            let mut total = 0.0;
            for &i in &order {
                let (v, class) = &data[i];
                let mut g = Graph::new(true);
                let f = self.features(&mut g, v);
                let f = g.relu(f);
                let logits = self.head.forward(&mut g, &self.params, f);
                let class = *class;
                let loss = g.custom_scalar(&[logits], move |vals| softmax_xent(vals[0].data(), class));
                total += g.value(loss).item() as f64;
                let grads = g.backward(loss);
                opt.step(&mut self.params, &grads);
            }
            history.push(total / data.len() as f64);
        }
        Ok(history)
    }
}

/// Cross-entropy of softmax(logits) against `class`, with its gradient.
pub fn softmax_xent(logits: &[f32], class: usize) -> (f64, Vec<Vec<f32>>) {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[class] / z).ln();
    let grad = exps.iter().enumerate().map(|(i, e)| (e / z - f64::from(u8::from(i == class))) as f32).collect();
    (loss, vec![grad])
}

impl Embedder<Volume3D> for TinyEmbedder {
    fn id(&self) -> String {
        format!("tiny-embedder-{}", self.seed)
    }

    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, x: &Volume3D) -> Result<Vec<f64>> {
        let mut g = Graph::new(false);
        let f = self.features(&mut g, x);
        Ok(g.value(f).data().iter().map(|&v| v as f64).collect())
    }
}

/// Trains a [`TinyEmbedder`] on the `volume` artifacts of a manifest.
pub fn tiny_embedder_train(dataset: &DatasetManifest, cfg: &TinyEmbedderConfig) -> Result<TinyEmbedder> {
    let ids = dataset.identities();
    if ids.len() < 2 {
        return Err(Error::Invalid("recognition training needs at least two identities".into()));
    }
    for &id in &ids {
        if dataset.entries.iter().filter(|e| e.identity_id == id).count() < 2 {
            return Err(Error::Invalid(format!("identity {id} has fewer than two impressions")));
        }
    }
    let mut data = Vec::new();
    for e in &dataset.entries {
        let class = ids.binary_search(&e.identity_id).expect("listed");
        data.push((read_volume(dataset.path(e, "volume")?)?, class));
    }
    let mut emb = TinyEmbedder::new(ids.len(), cfg.seed);
    emb.train(&data, cfg)?;
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn border_norms_are_partial_sums() {
        let taps = gaussian_taps(2, 1.0);
        let n = border_norms(6, &taps);
        assert!((n[2] - 1.0).abs() < 1e-15);
        assert!((n[0] - taps[2..].iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn filter_adjoint_identity() {
        let dims = [3, 5, 4];
        let taps = gaussian_taps(2, 1.5);
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let fx = window_filter(&x, dims, &taps);
        let fty = window_filter_adjoint(&y, dims, &taps);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn xent_gradient_sums_to_zero() {
        let (l, g) = softmax_xent(&[0.5, -1.0, 2.0], 2);
        assert!(l > 0.0);
        assert!(g[0].iter().sum::<f32>().abs() < 1e-6);
    }
}
