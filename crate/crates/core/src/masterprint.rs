//! Master prints, impression distortion (TPS warp + crop) and binarization.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor_io::{BinaryImage2D, Category, Image2D};
use crate::util::{blur2d, mix_seed, reflect, rng};
use crate::{Error, Result};

pub const Z_ID_LEN: usize = 512;
pub const Z_DISTORT_LEN: usize = 16;
pub const DEFAULT_DISTORTION_MAGNITUDE: f64 = 0.04;
pub const MIN_RIDGE_FREQ: f64 = 1.0 / 12.0;
pub const MAX_RIDGE_FREQ: f64 = 1.0 / 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub z_id: Vec<f32>,
    pub seed: u64,
}

impl IdentitySpec {
    pub fn new(z_id: Vec<f32>, seed: u64) -> Result<Self> {
        if z_id.len() != Z_ID_LEN {
            return Err(Error::Invalid(format!("z_id has {} values, expected {Z_ID_LEN}", z_id.len())));
        }
        if z_id.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("z_id holds a non-finite value".into()));
        }
        Ok(Self { z_id, seed })
    }

    /// Standard-normal identity vector drawn from `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut r = rng(mix_seed(&[seed, 0x1d]));
        let z_id = (0..Z_ID_LEN).map(|_| StandardNormal.sample(&mut r)).collect();
        Self { z_id, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionSpec {
    pub z_distort: Vec<f32>,
    pub crop_offset: (usize, usize),
    pub crop_size: (usize, usize),
}

impl DistortionSpec {
    pub fn new(z_distort: Vec<f32>, crop_offset: (usize, usize), crop_size: (usize, usize)) -> Result<Self> {
        if z_distort.len() != Z_DISTORT_LEN {
            return Err(Error::Invalid(format!("z_distort has {} values, expected {Z_DISTORT_LEN}", z_distort.len())));
        }
        if z_distort.iter().any(|v| !v.is_finite() || v.abs() > 3.0) {
            return Err(Error::Invalid("z_distort components must be finite with |z| <= 3".into()));
        }
        Ok(Self { z_distort, crop_offset, crop_size })
    }

    /// No distortion and a full-image window.
    pub fn identity(size: (usize, usize)) -> Self {
        Self { z_distort: vec![0.0; Z_DISTORT_LEN], crop_offset: (0, 0), crop_size: size }
    }

    /// Clipped standard-normal distortion with the crop window of
    /// `category` on a `size` source.
    pub fn sample(r: &mut impl Rng, size: (usize, usize), category: Category) -> Self {
        let z_distort = (0..Z_DISTORT_LEN)
            .map(|_| {
                let v: f32 = StandardNormal.sample(r);
                v.clamp(-3.0, 3.0)
            })
            .collect();
        let (crop_offset, crop_size) = category_window(size, category);
        Self { z_distort, crop_offset, crop_size }
    }
}

/// Full-width row band used for each partial-impression category.
pub fn category_window((h, w): (usize, usize), category: Category) -> ((usize, usize), (usize, usize)) {
    let rows = |a: f64, b: f64| {
        let y0 = (a * h as f64).round() as usize;
        let y1 = ((b * h as f64).round() as usize).min(h);
        ((y0, 0), (y1 - y0, w))
    };
    match category {
        Category::Full => ((0, 0), (h, w)),
        Category::Upper => rows(0.0, 0.55),
        Category::Middle => rows(0.225, 0.775),
        Category::Lower => rows(0.45, 1.0),
    }
}

/// Thin-plate-spline map in normalized (y, x) coordinates:
/// `f(p) = A [1, y, x]^T + sum_i w_i U(|p - c_i|)` with
/// `U(r) = r^2 ln r^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsWarp {
    pub control_points: Vec<[f64; 2]>,
    pub displacements: Vec<[f64; 2]>,
    /// Rows map `[1, y, x]` to the output y and x.
    pub affine: [[f64; 3]; 2],
    pub weights: Vec<[f64; 2]>,
}

pub fn tps_kernel(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl TpsWarp {
    pub fn identity() -> Self {
        Self {
            control_points: Vec::new(),
            displacements: Vec::new(),
            affine: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            weights: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.affine == [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] && self.weights.iter().all(|w| *w == [0.0, 0.0])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let a = self.affine[k];
            *o = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            let u = tps_kernel((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

/// Fits the TPS interpolating `control_points[i] -> control_points[i] +
/// displacements[i]` by LU with partial pivoting.
pub fn fit_tps(control_points: &[[f64; 2]], displacements: &[[f64; 2]]) -> Result<TpsWarp> {
    let k = control_points.len();
    if k != displacements.len() {
        return Err(Error::Shape(format!("{k} control points but {} displacements", displacements.len())));
    }
    if k < 4 {
        return Err(Error::Singular(format!("{k} control points, need at least 4")));
    }
    if control_points.iter().chain(displacements).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite control point or displacement".into()));
    }
    for i in 0..k {
        for j in i + 1..k {
            let d2 = (control_points[i][0] - control_points[j][0]).powi(2) + (control_points[i][1] - control_points[j][1]).powi(2);
            if d2 < 1e-20 {
                return Err(Error::Singular(format!("control points {i} and {j} coincide")));
            }
        }
    }
    // Collinear points leave the affine block rank-deficient: the centered
    // scatter matrix is then singular.
    let n = k as f64;
    let my = control_points.iter().map(|p| p[0]).sum::<f64>() / n;
    let mx = control_points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for p in control_points {
        syy += (p[0] - my).powi(2);
        sxx += (p[1] - mx).powi(2);
        sxy += (p[0] - my) * (p[1] - mx);
    }
    if syy * sxx - sxy * sxy <= 1e-12 * (syy + sxx).powi(2) {
        return Err(Error::Singular("control points are collinear".into()));
    }
    if displacements.iter().all(|d| *d == [0.0, 0.0]) {
        return Ok(TpsWarp {
            control_points: control_points.to_vec(),
            displacements: displacements.to_vec(),
            weights: vec![[0.0; 2]; k],
            ..TpsWarp::identity()
        });
    }

    let size = k + 3;
    let mut l = DMatrix::<f64>::zeros(size, size);
    for i in 0..k {
        for j in 0..k {
            let (a, b) = (control_points[i], control_points[j]);
            l[(i, j)] = tps_kernel((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2));
        }
        let row = [1.0, control_points[i][0], control_points[i][1]];
        for (c, &v) in row.iter().enumerate() {
            l[(i, k + c)] = v;
            l[(k + c, i)] = v;
        }
    }
    let lu = l.lu();
    let mut coords = [DVector::<f64>::zeros(size), DVector::<f64>::zeros(size)];
    for axis in 0..2 {
        let rhs = DVector::from_fn(size, |i, _| if i < k { control_points[i][axis] + displacements[i][axis] } else { 0.0 });
        coords[axis] = lu.solve(&rhs).ok_or_else(|| Error::Singular("TPS system is singular".into()))?;
        if coords[axis].iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("TPS solve produced non-finite weights".into()));
        }
    }
    let weights = (0..k).map(|i| [coords[0][i], coords[1][i]]).collect();
    let affine = [
        [coords[0][k], coords[0][k + 1], coords[0][k + 2]],
        [coords[1][k], coords[1][k + 1], coords[1][k + 2]],
    ];
    Ok(TpsWarp { control_points: control_points.to_vec(), displacements: displacements.to_vec(), affine, weights })
}

/// The eight interior control points (3x3 grid without its center, row
/// major) followed by the four pinned corners.
pub fn distortion_control_points() -> Vec<[f64; 2]> {
    let grid = [0.15, 0.5, 0.85];
    let mut pts = Vec::with_capacity(12);
    for (i, &y) in grid.iter().enumerate() {
        for (j, &x) in grid.iter().enumerate() {
            if (i, j) != (1, 1) {
                pts.push([y, x]);
            }
        }
    }
    pts.extend([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
    pts
}

pub fn distortion_to_warp(spec: &DistortionSpec, magnitude: f64) -> Result<TpsWarp> {
    if !(magnitude > 0.0) {
        return Err(Error::Invalid(format!("distortion magnitude {magnitude} must be positive")));
    }
    let pts = distortion_control_points();
    let mut disp = vec![[0.0; 2]; pts.len()];
    for (i, d) in disp.iter_mut().take(8).enumerate() {
        *d = [spec.z_distort[2 * i] as f64 * magnitude, spec.z_distort[2 * i + 1] as f64 * magnitude];
    }
    fit_tps(&pts, &disp)
}

/// Rasters that can be resampled: grayscale (bilinear) and binary
/// (nearest neighbour, so values stay in {0, 1}).
pub trait Raster: Sized {
    fn raster_dims(&self) -> (usize, usize);
    /// Sample at continuous pixel coordinates inside the domain.
    fn sample(&self, y: f64, x: f64) -> f32;
    fn from_samples(h: usize, w: usize, values: Vec<f32>) -> Result<Self>;
}

/// Snaps coordinates that are within rounding error of a pixel centre so
/// identity maps reproduce their input exactly.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

impl Raster for Image2D {
    fn raster_dims(&self) -> (usize, usize) {
        self.dims()
    }

    fn sample(&self, y: f64, x: f64) -> f32 {
        let (h, w) = self.dims();
        let (y, x) = (snap(y), snap(x));
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (y - y0 as f64, x - x0 as f64);
        let top = (1.0 - tx) * self.get(y0, x0) as f64 + tx * self.get(y0, x1) as f64;
        let bottom = (1.0 - tx) * self.get(y1, x0) as f64 + tx * self.get(y1, x1) as f64;
        ((1.0 - ty) * top + ty * bottom) as f32
    }

    fn from_samples(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        Image2D::clamped(h, w, values)
    }
}

impl Raster for BinaryImage2D {
    fn raster_dims(&self) -> (usize, usize) {
        self.dims()
    }

    fn sample(&self, y: f64, x: f64) -> f32 {
        let (h, w) = self.dims();
        let yi = (y.round() as usize).min(h - 1);
        let xi = (x.round() as usize).min(w - 1);
        self.get(yi, xi) as f32
    }

    fn from_samples(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        BinaryImage2D::new(h, w, values.into_iter().map(|v| u8::from(v >= 0.5)).collect())
    }
}

fn normalized(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Backward warp: `out(q) = img(warp(q))`, 0 where `warp(q)` leaves the
/// image.
pub fn tps_warp_image<R: Raster>(img: &R, warp: &TpsWarp) -> Result<R> {
    let (h, w) = img.raster_dims();
    let (sy, sx) = ((h - 1).max(1) as f64, (w - 1).max(1) as f64);
    let tol = 1e-6;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let [py, px] = warp.apply([normalized(y, h), normalized(x, w)]);
            let (py, px) = (py * sy, px * sx);
            if py < -tol || px < -tol || py > sy + tol || px > sx + tol {
                out.push(0.0);
            } else {
                out.push(img.sample(py.clamp(0.0, sy), px.clamp(0.0, sx)));
            }
        }
    }
    R::from_samples(h, w, out)
}

/// Keeps the `crop_size` window at `crop_offset` on a zero background
/// (the impression's position on the sensor is retained) and resamples to
/// `canonical` when the source has a different size.
pub fn crop_impression<R: Raster>(img: &R, spec: &DistortionSpec, canonical: (usize, usize)) -> Result<R> {
    let (h, w) = img.raster_dims();
    let ((oy, ox), (ch, cw)) = (spec.crop_offset, spec.crop_size);
    if ch == 0 || cw == 0 || oy + ch > h || ox + cw > w {
        return Err(Error::Invalid(format!(
            "crop window {ch}x{cw} at ({oy}, {ox}) does not fit a {h}x{w} image"
        )));
    }
    let (th, tw) = canonical;
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            // Pixel centre of the canonical grid in source coordinates.
            let syf = if th == h { y as f64 } else { ((y as f64 + 0.5) * h as f64 / th as f64 - 0.5).clamp(0.0, (h - 1) as f64) };
            let sxf = if tw == w { x as f64 } else { ((x as f64 + 0.5) * w as f64 / tw as f64 - 0.5).clamp(0.0, (w - 1) as f64) };
            let inside = syf >= oy as f64 - 0.5 && syf < (oy + ch) as f64 - 0.5 && sxf >= ox as f64 - 0.5 && sxf < (ox + cw) as f64 - 0.5;
            out.push(if inside { img.sample(syf, sxf) } else { 0.0 });
        }
    }
    R::from_samples(th, tw, out)
}

/// A mask image that is 1 inside the crop window, used to assign the
/// impression category.
pub fn crop_mask(size: (usize, usize), spec: &DistortionSpec) -> Result<Image2D> {
    let ((oy, ox), (ch, cw)) = (spec.crop_offset, spec.crop_size);
    Image2D::from_fn(size.0, size.1, |y, x| f32::from(y >= oy && y < oy + ch && x >= ox && x < ox + cw))
}

/// Quantized bank of DC-free, unit-norm Gabor kernels.
pub(crate) struct GaborBank {
    n_orient: usize,
    freqs: Vec<f64>,
    radius: Vec<usize>,
    /// Index `[freq][orientation]`.
    kernels: Vec<Vec<Vec<f32>>>,
}

impl GaborBank {
    /// `sigma_periods` is the envelope width in ridge periods.
    pub fn new(freqs: &[f64], n_orient: usize, sigma_periods: f64) -> Self {
        let mut kernels = Vec::new();
        let mut radius = Vec::new();
        for &f in freqs {
            let sigma = sigma_periods / f;
            let r = (2.5 * sigma).ceil() as usize;
            radius.push(r);
            let mut per_orient = Vec::new();
            for o in 0..n_orient {
                let theta = o as f64 * PI / n_orient as f64;
                let (s, c) = theta.sin_cos();
                let side = 2 * r + 1;
                let mut env = Vec::with_capacity(side * side);
                let mut wave = Vec::with_capacity(side * side);
                for dy in -(r as isize)..=r as isize {
                    for dx in -(r as isize)..=r as isize {
                        let (dy, dx) = (dy as f64, dx as f64);
                        env.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
                        let u = -dx * s + dy * c;
                        wave.push((2.0 * PI * f * u).cos());
                    }
                }
                let dc = env.iter().zip(&wave).map(|(e, w)| e * w).sum::<f64>() / env.iter().sum::<f64>();
                let taps: Vec<f64> = env.iter().zip(&wave).map(|(e, w)| e * (w - dc)).collect();
                let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
                per_orient.push(taps.iter().map(|t| (t / norm) as f32).collect());
            }
            kernels.push(per_orient);
        }
        Self { n_orient, freqs: freqs.to_vec(), radius, kernels }
    }

    pub fn orientation_bin(&self, theta: f64) -> usize {
        let t = theta.rem_euclid(PI);
        ((t / PI * self.n_orient as f64).round() as usize) % self.n_orient
    }

    pub fn freq_bin(&self, f: f64) -> usize {
        let mut best = 0;
        for (i, &g) in self.freqs.iter().enumerate() {
            if (g - f).abs() < (self.freqs[best] - f).abs() {
                best = i;
            }
        }
        best
    }

    /// Response at `(y, x)` with reflected borders.
    pub fn apply_at(&self, src: &[f32], h: usize, w: usize, y: usize, x: usize, fi: usize, oi: usize) -> f32 {
        let r = self.radius[fi] as isize;
        let taps = &self.kernels[fi][oi];
        let side = 2 * r + 1;
        let interior = y as isize >= r && x as isize >= r && (y as isize + r) < h as isize && (x as isize + r) < w as isize;
        let mut acc = 0.0f32;
        if interior {
            for ky in 0..side {
                let row = &src[(y + ky as usize - r as usize) * w + x - r as usize..][..side as usize];
                let krow = &taps[(ky * side) as usize..][..side as usize];
                acc += row.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>();
            }
        } else {
            for ky in 0..side {
                let sy = reflect(y as isize + ky - r, h);
                for kx in 0..side {
                    let sx = reflect(x as isize + kx - r, w);
                    acc += src[sy * w + sx] * taps[(ky * side + kx) as usize];
                }
            }
        }
        acc
    }
}

/// Zero-pole orientation model: ridge direction at `p` from cores and
/// deltas (positions in pixels).
fn pole_orientation(theta0: f64, cores: &[(f64, f64)], deltas: &[(f64, f64)], y: f64, x: f64) -> f64 {
    let mut t = theta0;
    for &(cy, cx) in cores {
        t += 0.5 * (y - cy).atan2(x - cx);
    }
    for &(dy, dx) in deltas {
        t -= 0.5 * (y - dy).atan2(x - dx);
    }
    t
}

fn squash(v: f32) -> f64 {
    (v as f64).tanh()
}

/// Procedural master print: a singular-point orientation field and a
/// smooth ridge-frequency field steer repeated Gabor filtering of noise,
/// thresholded at zero (ridges are 1).
pub fn synth_master_print(spec: &IdentitySpec, size: (usize, usize)) -> Result<BinaryImage2D> {
    let (h, w) = size;
    if h < 64 || w < 64 {
        return Err(Error::Invalid(format!("master prints need at least 64x64 pixels, got {h}x{w}")));
    }
    let z = &spec.z_id;
    if z.len() != Z_ID_LEN {
        return Err(Error::Invalid(format!("z_id has {} values, expected {Z_ID_LEN}", z.len())));
    }
    let (hf, wf) = (h as f64, w as f64);
    let n_sing = 2 + ((squash(z[0]) + 1.0) * 1.5).floor().min(2.0) as usize;
    let (n_cores, n_deltas) = match n_sing {
        2 => (1, 1),
        3 => (2, 1),
        _ => (2, 2),
    };
    let cores: Vec<(f64, f64)> = (0..n_cores)
        .map(|i| (hf * (0.4 + 0.12 * squash(z[1 + 2 * i])), wf * (0.5 + 0.18 * squash(z[2 + 2 * i]))))
        .collect();
    let deltas: Vec<(f64, f64)> = (0..n_deltas)
        .map(|i| (hf * (0.78 + 0.1 * squash(z[5 + 2 * i])), wf * (0.5 + 0.35 * squash(z[6 + 2 * i]))))
        .collect();
    let theta0 = 0.3 * squash(z[9]);
    let fa: Vec<f64> = (10..16).map(|i| squash(z[i])).collect();

    let bank = GaborBank::new(&[1.0 / 12.0, 1.0 / 10.0, 1.0 / 8.5, 1.0 / 7.25, 1.0 / 6.0], 24, 0.55);
    let mut orient = vec![0usize; h * w];
    let mut freq = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yn, xn) = (y as f64 / hf, x as f64 / wf);
            let t = pole_orientation(theta0, &cores, &deltas, y as f64, x as f64);
            orient[y * w + x] = bank.orientation_bin(t);
            let s = fa[0] + 0.8 * fa[1] * (yn - 0.5) + 0.8 * fa[2] * (xn - 0.5)
                + 0.5 * fa[3] * (PI * (yn + fa[4])).sin() * (PI * (xn + fa[5])).cos();
            let f = MIN_RIDGE_FREQ + (MAX_RIDGE_FREQ - MIN_RIDGE_FREQ) / (1.0 + (-1.5 * s).exp());
            freq[y * w + x] = bank.freq_bin(f);
        }
    }

    let bits: Vec<u64> = z.iter().map(|v| v.to_bits() as u64).collect();
    let mut r = rng(mix_seed(&[mix_seed(&bits), spec.seed, 0x6d70]));
    let mut field: Vec<f32> = (0..h * w).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let mut next = vec![0.0f32; h * w];
    for _ in 0..8 {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                next[i] = bank.apply_at(&field, h, w, y, x, freq[i], orient[i]);
            }
        }
        let rms = (next.iter().map(|v| (v * v) as f64).sum::<f64>() / next.len() as f64).sqrt().max(1e-12) as f32;
        for (f, n) in field.iter_mut().zip(&next) {
            *f = (2.0 * n / rms).tanh();
        }
    }
    BinaryImage2D::new(h, w, field.iter().map(|&v| u8::from(v > 0.0)).collect())
}

/// Output of the classical binarizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Binarized {
    pub image: BinaryImage2D,
    /// The input had no contrast; `image` is all zeros.
    pub blank: bool,
}

/// Ridge orientation (radians, ridge direction) per pixel from the
/// smoothed gradient structure tensor.
pub fn ridge_orientation(values: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let mut gxx = vec![0.0f32; h * w];
    let mut gyy = vec![0.0f32; h * w];
    let mut gxy = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let at = |yy: isize, xx: isize| values[reflect(yy, h) * w + reflect(xx, w)];
            let (yi, xi) = (y as isize, x as isize);
            let gx = 0.5 * (at(yi, xi + 1) - at(yi, xi - 1));
            let gy = 0.5 * (at(yi + 1, xi) - at(yi - 1, xi));
            gxx[y * w + x] = gx * gx;
            gyy[y * w + x] = gy * gy;
            gxy[y * w + x] = gx * gy;
        }
    }
    let (gxx, gyy, gxy) = (blur2d(&gxx, h, w, sigma), blur2d(&gyy, h, w, sigma), blur2d(&gxy, h, w, sigma));
    (0..h * w)
        .map(|i| 0.5 * (2.0 * gxy[i] as f64).atan2(gxx[i] as f64 - gyy[i] as f64) + PI / 2.0)
        .collect()
}

/// Classical binarization: structure-tensor orientation, oriented Gabor
/// enhancement at the locally strongest ridge frequency, and a threshold
/// against the local mean of the enhanced image.
pub fn binarize_print(img: &Image2D) -> Binarized {
    let (h, w) = img.dims();
    let v = img.values();
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    if std < 1e-6 {
        return Binarized { image: BinaryImage2D::new(h, w, vec![0; h * w]).expect("valid dims"), blank: true };
    }
    let norm: Vec<f32> = v.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect();
    let theta = ridge_orientation(&norm, h, w, 3.0);
    let bank = GaborBank::new(&[1.0 / 11.0, 1.0 / 8.5, 1.0 / 6.5], 24, 0.5);
    let mut responses = Vec::new();
    for fi in 0..bank.freqs.len() {
        let r: Vec<f32> = (0..h * w).map(|i| bank.apply_at(&norm, h, w, i / w, i % w, fi, bank.orientation_bin(theta[i]))).collect();
        responses.push(r);
    }
    let energies: Vec<Vec<f32>> = responses.iter().map(|r| blur2d(&r.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, 4.0)).collect();
    let enhanced: Vec<f32> = (0..h * w)
        .map(|i| {
            let best = (0..energies.len()).max_by(|&a, &b| energies[a][i].total_cmp(&energies[b][i])).unwrap();
            responses[best][i]
        })
        .collect();
    let local = blur2d(&enhanced, h, w, 6.0);
    let image = BinaryImage2D::new(h, w, enhanced.iter().zip(&local).map(|(e, m)| u8::from(e > m)).collect()).expect("valid dims");
    Binarized { image, blank: false }
}

/// Fraction of pixels where two binary images agree.
pub fn agreement(a: &BinaryImage2D, b: &BinaryImage2D) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.values().iter().zip(b.values()).filter(|(x, y)| x == y).count() as f64 / a.values().len() as f64
}

pub mod learned {
    //! Optional learned binarizer: a small convolutional autoencoder
    //! regressing the classical binarizer's output with per-pixel L2 loss.

    use p2v_nn::layers::{Conv, ConvTranspose};
    use p2v_nn::{Adam, AdamConfig, ConvGeom, Graph, ParamStore, Tensor, Var};

    use super::binarize_print;
    use crate::tensor_io::{BinaryImage2D, Image2D};
    use crate::util::rng;
    use crate::{Error, Result};

    pub struct BinarizerNet {
        pub params: ParamStore,
        enc1: Conv,
        enc2: Conv,
        dec1: ConvTranspose,
        dec2: ConvTranspose,
        out: Conv,
    }

    impl BinarizerNet {
        pub fn new(seed: u64) -> Self {
            let mut ps = ParamStore::new();
            let mut r = rng(seed);
            let enc1 = Conv::new2d(&mut ps, &mut r, "enc1", 1, 8, 3, 2, 1, true);
            let enc2 = Conv::new2d(&mut ps, &mut r, "enc2", 8, 16, 3, 2, 1, true);
            let g = ConvGeom { kernel: [1, 2, 2], stride: [1, 2, 2], pad: [0, 0, 0] };
            let dec1 = ConvTranspose::new3d(&mut ps, &mut r, "dec1", 16, 8, g);
            let dec2 = ConvTranspose::new3d(&mut ps, &mut r, "dec2", 8, 8, g);
            let out = Conv::new2d(&mut ps, &mut r, "out", 9, 1, 3, 1, 1, true);
            Self { params: ps, enc1, enc2, dec1, dec2, out }
        }

        fn forward(&self, g: &mut Graph, x: Var) -> Var {
            let ps = &self.params;
            let h = self.enc1.forward(g, ps, x);
            let h = g.relu(h);
            let h = self.enc2.forward(g, ps, h);
            let h = g.relu(h);
            // Transposed convs are volumetric; run them on a unit depth.
            let s = g.shape(h).to_vec();
            let h = g.reshape(h, &[s[0], s[1], 1, s[2], s[3]]);
            let h = self.dec1.forward(g, ps, h);
            let h = g.relu(h);
            let h = self.dec2.forward(g, ps, h);
            let h = g.relu(h);
            let s = g.shape(h).to_vec();
            let h = g.reshape(h, &[s[0], s[1], s[3], s[4]]);
            let h = g.concat_channels(&[h, x]);
            let h = self.out.forward(g, ps, h);
            g.sigmoid(h)
        }

        fn input(img: &Image2D) -> Tensor {
            Tensor::new(vec![1, 1, img.height(), img.width()], img.values().to_vec())
        }

        /// Soft ridge probability per pixel.
        pub fn predict(&self, img: &Image2D) -> Result<Image2D> {
            if img.height() % 4 != 0 || img.width() % 4 != 0 {
                return Err(Error::Shape(format!("learned binarizer needs sides divisible by 4, got {:?}", img.dims())));
            }
            let mut g = Graph::new(false);
            let x = g.input(Self::input(img));
            let y = self.forward(&mut g, x);
            Image2D::clamped(img.height(), img.width(), g.value(y).data().to_vec())
        }

        pub fn binarize(&self, img: &Image2D) -> Result<BinaryImage2D> {
            Ok(BinaryImage2D::threshold(&self.predict(img)?, 0.5))
        }

        /// Trains against classical binarizer targets; returns the mean
        /// loss of each epoch.
        pub fn train(&mut self, images: &[Image2D], epochs: usize, lr: f32) -> Result<Vec<f64>> {
            if images.is_empty() {
                return Err(Error::Invalid("no training images".into()));
            }
            let targets: Vec<Vec<f32>> = images.iter().map(|im| binarize_print(im).image.to_image().into_values()).collect();
            let mut opt = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
            let mut history = Vec::with_capacity(epochs);
            for _ in 0..epochs {
                let mut total = 0.0;
                for (img, target) in images.iter().zip(&targets) {
                    let mut g = Graph::new(true);
                    let x = g.input(Self::input(img));
                    let y = self.forward(&mut g, x);
                    let t = target.clone();
                    let loss = g.custom_scalar(&[y], move |v| {
                        let n = t.len() as f64;
                        let d: Vec<f64> = v[0].data().iter().zip(&t).map(|(&a, &b)| a as f64 - b as f64).collect();
                        let l = d.iter().map(|e| e * e).sum::<f64>() / n;
                        (l, vec![d.iter().map(|e| (2.0 * e / n) as f32).collect()])
                    });
                    total += g.value(loss).item() as f64;
                    let grads = g.backward(loss);
                    opt.step(&mut self.params, &grads);
                }
                history.push(total / images.len() as f64);
            }
            Ok(history)
        }

        /// Mean |prediction - classical output| over `images`.
        pub fn deviation(&self, images: &[Image2D]) -> Result<f64> {
            let mut total = 0.0;
            for img in images {
                let p = self.predict(img)?;
                let t = binarize_print(img).image.to_image();
                total += p.values().iter().zip(t.values()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / p.values().len() as f64;
            }
            Ok(total / images.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_at_zero() {
        assert_eq!(tps_kernel(0.0), 0.0);
        assert!((tps_kernel(std::f64::consts::E) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn control_layout() {
        let pts = distortion_control_points();
        assert_eq!(pts.len(), 12);
        assert_eq!(pts[0], [0.15, 0.15]);
        assert_eq!(pts[3], [0.5, 0.15]);
        assert_eq!(pts[4], [0.5, 0.85]);
        assert_eq!(pts[8], [0.0, 0.0]);
    }

    #[test]
    fn duplicate_and_collinear_points_fail() {
        let dup = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert!(matches!(fit_tps(&dup, &[[0.1, 0.0]; 4]), Err(Error::Singular(_))));
        let line = [[0.0, 0.0], [0.25, 0.25], [0.5, 0.5], [1.0, 1.0]];
        assert!(matches!(fit_tps(&line, &[[0.1, 0.0]; 4]), Err(Error::Singular(_))));
    }

    #[test]
    fn gabor_kernels_are_dc_free() {
        let bank = GaborBank::new(&[1.0 / 8.0], 8, 0.5);
        for k in &bank.kernels[0] {
            assert!(k.iter().map(|&v| v as f64).sum::<f64>().abs() < 1e-5);
        }
    }

    #[test]
    fn category_windows_fit() {
        for c in Category::ALL {
            let ((oy, _), (ch, cw)) = category_window((64, 64), c);
            assert!(oy + ch <= 64 && cw == 64);
        }
    }
}
