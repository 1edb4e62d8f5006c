//! Procedural fingertip OCT phantoms: layered skin (stratum corneum,
//! viable epidermis, dermal junction, dermis) shaped by a ridge print,
//! with attenuation, contact gaps and multiplicative speckle.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::masterprint::{
    crop_impression, distortion_to_warp, synth_master_print, tps_warp_image, DistortionSpec, IdentitySpec,
    DEFAULT_DISTORTION_MAGNITUDE,
};
use crate::tensor_io::{
    write_depth_map, write_image, write_volume, z_mean_projection, BinaryImage2D, Category, DatasetManifest, DepthMap,
    ManifestEntry, Volume3D,
};
use crate::util::{blur2d, mix_seed, rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    /// Volume depth D in voxels.
    pub depth: usize,
    /// Surface depth of valleys; ridges sit `ridge_amplitude` higher.
    pub surface_base: f64,
    pub ridge_amplitude: f64,
    pub corneum_thickness: f64,
    pub corneum_variation: f64,
    /// Junction depth below the surface, reduced by `junction_amplitude`
    /// under ridges.
    pub junction_offset: f64,
    pub junction_amplitude: f64,
    pub air_level: f64,
    pub corneum_level: f64,
    pub epidermis_level: f64,
    pub junction_level: f64,
    pub dermis_level: f64,
    /// Per-voxel decay of the dermis texture below the junction.
    pub dermis_decay: f64,
    /// Attenuation coefficient per voxel below the surface.
    pub attenuation: f64,
    /// Gamma shape of the speckle; `None` disables speckle.
    pub speckle_shape: Option<f64>,
    pub gap_probability: f64,
    /// Peak wedge depth in voxels.
    pub gap_depth: f64,
    /// Wedge width as a fraction of the image width.
    pub gap_width: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            depth: 8,
            surface_base: 2.0,
            ridge_amplitude: 1.5,
            corneum_thickness: 1.2,
            corneum_variation: 0.3,
            junction_offset: 3.0,
            junction_amplitude: 0.5,
            air_level: 0.02,
            corneum_level: 0.8,
            epidermis_level: 0.3,
            junction_level: 0.9,
            dermis_level: 0.45,
            dermis_decay: 0.15,
            attenuation: 0.06,
            speckle_shape: Some(30.0),
            gap_probability: 0.25,
            gap_depth: 1.0,
            gap_width: 0.3,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        let d = self.depth as f64;
        if self.depth < 8 {
            return bad(format!("phantom depth {} is below 8", self.depth));
        }
        if !(self.surface_base > 0.0 && self.surface_base < d) {
            return bad(format!("surface base {} must lie in (0, {d})", self.surface_base));
        }
        if self.ridge_amplitude < 0.0 || self.ridge_amplitude > self.surface_base {
            return bad("ridge amplitude must be in [0, surface_base]".into());
        }
        if self.corneum_thickness <= 0.0 || self.corneum_variation < 0.0 || self.corneum_variation >= self.corneum_thickness {
            return bad("corneum thickness must be positive and exceed its variation".into());
        }
        if self.junction_amplitude < 0.0 || self.junction_offset - self.junction_amplitude < 1.0 {
            return bad("junction must sit at least one voxel below the surface".into());
        }
        if self.gap_depth < 0.0 || !(0.0..=1.0).contains(&self.gap_probability) || !(0.0..=1.0).contains(&self.gap_width) {
            return bad("gap depth must be >= 0; gap probability and width in [0, 1]".into());
        }
        let deepest = self.surface_base + self.gap_depth + self.junction_offset + 1.0;
        if deepest > d {
            return bad(format!("layers reach depth {deepest}, deeper than the volume depth {d}"));
        }
        let levels = [
            self.air_level,
            self.corneum_level,
            self.epidermis_level,
            self.junction_level,
            self.dermis_level,
        ];
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("brightness levels must be in [0, 1]".into());
        }
        if self.attenuation < 0.0 || self.dermis_decay < 0.0 {
            return bad("attenuation and dermis decay must be >= 0".into());
        }
        if let Some(k) = self.speckle_shape {
            if !(k > 0.0) {
                return bad(format!("speckle shape {k} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    pub surface_map: DepthMap,
    pub junction_map: DepthMap,
    /// Everything except speckle.
    pub clean_volume: Volume3D,
}

/// Length of `[a, b) ∩ [lo, hi)`.
fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

/// Smooth field with values in roughly [-1, 1].
fn smooth_noise(r: &mut impl Rng, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let raw: Vec<f32> = (0..h * w).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let b = blur2d(&raw, h, w, sigma);
    let peak = b.iter().fold(1e-6f32, |m, v| m.max(v.abs()));
    b.iter().map(|&v| (v / peak) as f64).collect()
}

pub fn generate_phantom(print: &BinaryImage2D, params: &PhantomParams) -> Result<(Volume3D, PhantomTruth)> {
    params.validate()?;
    let (h, w) = print.dims();
    let d = params.depth;
    let mut r = rng(mix_seed(&[params.seed, 0x9a7]));
    let ridge = blur2d(&print.to_image().into_values(), h, w, 1.0);

    // Contact-gap wedge: a tent profile across a band of columns that
    // pushes the skin below the flat plate.
    let mut gap = vec![0.0f64; w];
    if params.gap_probability > 0.0 && r.random::<f64>() < params.gap_probability {
        let width = (params.gap_width * w as f64).max(2.0);
        let x0 = r.random_range(0.0..(w as f64 - width).max(1.0));
        for (x, g) in gap.iter_mut().enumerate() {
            let t = (x as f64 + 0.5 - x0) / width;
            if (0.0..=1.0).contains(&t) {
                *g = params.gap_depth * (1.0 - (2.0 * t - 1.0).abs());
            }
        }
    }
    let corneum_noise = smooth_noise(&mut r, h, w, 4.0);
    let dermis_noise: Vec<Vec<f64>> = (0..d).map(|_| smooth_noise(&mut r, h, w, 1.5)).collect();

    let mut clean = vec![0.0f32; d * h * w];
    let mut surface_map = DepthMap::filled(h, w, 0);
    let mut junction_map = DepthMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = ridge[i] as f64;
            let surface = params.surface_base - params.ridge_amplitude * s + gap[x];
            let corneum_end = surface + params.corneum_thickness + params.corneum_variation * corneum_noise[i];
            let junction = surface + params.junction_offset - params.junction_amplitude * s;
            let junction_end = junction + 1.0;
            // Dermal papillae under ridges light up the junction.
            let junction_level = params.junction_level * (0.3 + 0.7 * s);
            surface_map.values[i] = (surface.round() as usize).min(d - 1);
            junction_map.values[i] = (junction.round() as usize).min(d - 1);
            for z in 0..d {
                let (lo, hi) = (z as f64, z as f64 + 1.0);
                let dermis = {
                    let depth_below = (lo + 0.5 - junction_end).max(0.0);
                    params.dermis_level * (0.75 + 0.25 * dermis_noise[z][i]) * (-params.dermis_decay * depth_below).exp()
                };
                let value = params.air_level * overlap(f64::NEG_INFINITY, surface, lo, hi)
                    + params.corneum_level * overlap(surface, corneum_end, lo, hi)
                    + params.epidermis_level * overlap(corneum_end, junction, lo, hi)
                    + junction_level * overlap(junction, junction_end, lo, hi)
                    + dermis * overlap(junction_end, f64::INFINITY, lo, hi);
                let atten = (-params.attenuation * (lo + 0.5 - surface).max(0.0)).exp();
                clean[(z * h + y) * w + x] = (value * atten).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let clean_volume = Volume3D::new(d, h, w, clean)?;
    let volume = match params.speckle_shape {
        Some(k) => apply_speckle(&clean_volume, k, mix_seed(&[params.seed, 0x5e]))?,
        None => clean_volume.clone(),
    };
    Ok((volume, PhantomTruth { surface_map, junction_map, clean_volume }))
}

/// Multiplies every voxel by i.i.d. Gamma(k, 1/k) noise (mean 1, variance
/// 1/k) and clamps to [0, 1].
pub fn apply_speckle(v: &Volume3D, k: f64, seed: u64) -> Result<Volume3D> {
    let gamma = Gamma::new(k, 1.0 / k).map_err(|e| Error::Invalid(format!("speckle shape {k}: {e}")))?;
    let mut r = rng(seed);
    let (d, h, w) = v.dims();
    let values = v.values().iter().map(|&x| (x as f64 * gamma.sample(&mut r)).clamp(0.0, 1.0) as f32).collect();
    Volume3D::new(d, h, w, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub identities: usize,
    pub impressions: usize,
    pub height: usize,
    pub width: usize,
    pub distortion_magnitude: f64,
    /// Relative weights of the full, upper, middle and lower categories.
    pub category_weights: [f64; 4],
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            identities: 64,
            impressions: 4,
            height: 64,
            width: 64,
            // Half the warp default: at 64x64 the default displaces ridges by a
            // quarter period, which erases same-identity similarity.
            distortion_magnitude: DEFAULT_DISTORTION_MAGNITUDE / 2.0,
            category_weights: [0.4, 0.2, 0.2, 0.2],
        }
    }
}

const WEIGHTED_CATEGORIES: [Category; 4] = [Category::Full, Category::Upper, Category::Middle, Category::Lower];

pub(crate) fn pick_category(r: &mut impl Rng, weights: &[f64; 4]) -> Category {
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (c, &wt) in WEIGHTED_CATEGORIES.iter().zip(weights) {
        if u < wt {
            return *c;
        }
        u -= wt;
    }
    Category::Full
}

/// One generated impression together with its intermediate print.
pub struct PhantomSample {
    pub entry: ManifestEntry,
    pub impression: BinaryImage2D,
    pub volume: Volume3D,
    pub truth: PhantomTruth,
}

/// Generates the impression `(identity, impression)` of a dataset.
pub fn phantom_sample(
    spec: &DatasetSpec,
    params: &PhantomParams,
    master_seed: u64,
    identity: u32,
    impression: u32,
    master: &BinaryImage2D,
) -> Result<PhantomSample> {
    let seed = mix_seed(&[master_seed, identity as u64, impression as u64]);
    let mut r = rng(seed);
    let category = pick_category(&mut r, &spec.category_weights);
    let size = (spec.height, spec.width);
    let dist = DistortionSpec::sample(&mut r, size, category);
    let warp = distortion_to_warp(&dist, spec.distortion_magnitude)?;
    let print = crop_impression(&tps_warp_image(master, &warp)?, &dist, size)?;
    let (volume, truth) = generate_phantom(&print, &PhantomParams { seed, ..params.clone() })?;
    let dir = format!("id_{identity}/imp_{impression}");
    let paths = ["print", "volume", "zmean", "surface", "junction"]
        .into_iter()
        .map(|k| (k.to_string(), format!("{dir}/{k}.p2v")))
        .collect::<BTreeMap<_, _>>();
    let entry = ManifestEntry { identity_id: identity, impression_id: impression, category, paths, seed };
    Ok(PhantomSample { entry, impression: print, volume, truth })
}

pub fn master_print_for(spec: &DatasetSpec, master_seed: u64, identity: u32) -> Result<BinaryImage2D> {
    let id = IdentitySpec::sample(mix_seed(&[master_seed, identity as u64, 0x1d]));
    synth_master_print(&id, (spec.height, spec.width))
}

/// Writes `<root>/id_<k>/imp_<j>/{print,volume,zmean,surface,junction}.p2v`
/// and `manifest.json`.
pub fn build_phantom_dataset(
    root: impl AsRef<Path>,
    spec: &DatasetSpec,
    params: &PhantomParams,
    master_seed: u64,
) -> Result<DatasetManifest> {
    params.validate()?;
    if spec.identities == 0 || spec.impressions == 0 {
        return Err(Error::Invalid("dataset needs at least one identity and impression".into()));
    }
    if spec.category_weights.iter().any(|w| *w < 0.0) || spec.category_weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Invalid("category weights must be non-negative and not all zero".into()));
    }
    let root = root.as_ref();
    let mut entries = Vec::with_capacity(spec.identities * spec.impressions);
    for identity in 0..spec.identities as u32 {
        let master = master_print_for(spec, master_seed, identity)?;
        for impression in 0..spec.impressions as u32 {
            let s = phantom_sample(spec, params, master_seed, identity, impression, &master)?;
            let p = |k: &str| root.join(&s.entry.paths[k]);
            write_image(&s.impression.to_image(), p("print"))?;
            write_volume(&s.volume, p("volume"))?;
            write_image(&z_mean_projection(&s.volume), p("zmean"))?;
            write_depth_map(&s.truth.surface_map, p("surface"))?;
            write_depth_map(&s.truth.junction_map, p("junction"))?;
            entries.push(s.entry);
        }
    }
    let manifest = DatasetManifest::new(root, entries)?;
    manifest.save()?;
    Ok(manifest)
}
