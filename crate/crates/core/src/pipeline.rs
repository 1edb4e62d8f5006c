//! Orchestration: run configuration, the stage training commands,
//! end-to-end synthesis, evaluation and image export.
//!
//! Everything a run produces lives under one output directory:
//!
//! ```text
//! <out>/phantoms/       procedural training data + manifest.json
//! <out>/checkpoints/    style.p2ck, expansion.p2ck, refiner.p2ck
//! <out>/losses/         <stage>.csv
//! <out>/synth/          synthesized records + manifest.json
//! <out>/report.json     evaluation report
//! <out>/timing.json     wall-clock seconds per command (not reproducible)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::expansion::{ExpansionConfig, ExpansionNet};
use crate::masterprint::{crop_impression, distortion_to_warp, synth_master_print, tps_warp_image, DistortionSpec, IdentitySpec};
use crate::metrics::{
    all_pairs_scores, bscans_every, eer, embed_all, fid_score, fvd_score, tar_at_far, RandomConvEmbedder, TinyEmbedder,
    TinyEmbedderConfig,
};
use crate::phantom::{build_phantom_dataset, pick_category, DatasetSpec, PhantomParams};
use crate::refiner::{Refiner, RefinerConfig};
use crate::style::{ExemplarPool, StyleConfig, StylePair, StyleTransfer};
use crate::tensor_io::{
    detect_surface, extract_enface_layer, read_depth_map, read_image, read_volume, write_image, write_volume, z_mean_projection,
    BinaryImage2D, DatasetManifest, DepthMap, Image2D, ManifestEntry, Volume3D,
};
use crate::util::{mix_seed, rng};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Which training entries the stages see and how the exemplar pool is
/// drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// The first `train_pairs` manifest entries train every stage; the rest
    /// are held out.
    pub train_pairs: usize,
    /// Exemplars per category taken from the phantom z-means.
    pub pool_per_category: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { train_pairs: 64, pool_per_category: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub identities: usize,
    pub impressions: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { identities: 8, impressions: 15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Every `bscan_stride`-th B-scan enters the FID.
    pub bscan_stride: usize,
    pub embedder_seed: u64,
    /// Also train the tiny recognition embedder and report EER / TAR.
    pub recognition: bool,
    pub recognition_epochs: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { bscan_stride: 4, embedder_seed: 0, recognition: true, recognition_epochs: 8 }
    }
}

/// One run's configuration. The default is the desk-scale smoke setup:
/// 64 identities x 4 impressions at 8x64x64, five epochs per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub phantom: PhantomParams,
    pub style: StyleConfig,
    pub expansion: ExpansionConfig,
    pub refiner: RefinerConfig,
    pub training: TrainingConfig,
    pub synthesis: SynthesisConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            dataset: DatasetSpec::default(),
            phantom: PhantomParams::default(),
            style: StyleConfig { epochs: 5, ..StyleConfig::default() },
            expansion: ExpansionConfig { epochs: 5, ..ExpansionConfig::default() },
            refiner: RefinerConfig { epochs: 5, ..RefinerConfig::default() },
            training: TrainingConfig::default(),
            synthesis: SynthesisConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `(D, H, W)` shared by all stages.
    pub fn resolution(&self) -> [usize; 3] {
        self.expansion.target_dims()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "config format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.phantom.validate()?;
        self.style.validate()?;
        self.expansion.validate()?;
        self.refiner.validate()?;
        let [d, h, w] = self.resolution();
        if self.phantom.depth != d {
            return Err(Error::Invalid(format!("phantom depth {} differs from expansion depth {d}", self.phantom.depth)));
        }
        if (self.dataset.height, self.dataset.width) != (h, w) {
            return Err(Error::Invalid(format!(
                "dataset is {}x{} but the stages expect {h}x{w}",
                self.dataset.height, self.dataset.width
            )));
        }
        if d % 8 != 0 {
            return Err(Error::Invalid(format!("depth {d} must be a multiple of 8 for the refiner")));
        }
        if self.dataset.identities == 0 || self.dataset.impressions == 0 {
            return Err(Error::Invalid("dataset needs at least one identity and impression".into()));
        }
        if self.training.train_pairs == 0 || self.training.pool_per_category == 0 {
            return Err(Error::Invalid("train_pairs and pool_per_category must be positive".into()));
        }
        if self.evaluation.bscan_stride == 0 {
            return Err(Error::Invalid("bscan_stride must be positive".into()));
        }
        Ok(())
    }

    fn stage_seed(&self, tag: u64) -> u64 {
        mix_seed(&[self.seed, tag])
    }

    /// Stage configs with seeds derived from the global seed.
    pub fn style_config(&self) -> StyleConfig {
        StyleConfig { seed: self.stage_seed(1), ..self.style.clone() }
    }

    pub fn expansion_config(&self) -> ExpansionConfig {
        ExpansionConfig { seed: self.stage_seed(2), ..self.expansion.clone() }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig { seed: self.stage_seed(3), ..self.refiner.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "cli", derive(clap::ValueEnum))]
pub enum Stage {
    Style,
    Expansion,
    Refiner,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Style => crate::style::STAGE,
            Stage::Expansion => crate::expansion::STAGE,
            Stage::Refiner => crate::refiner::STAGE,
        }
    }
}

/// Process exit code for an error: 2 validation, 3 missing prerequisite,
/// 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Missing(_) => 3,
        Error::Io { .. } | Error::Image(_) | Error::Nn(p2v_nn::NnError::Io(_)) => 4,
        _ => 2,
    }
}

/// FID/FVD of the structural and refined sets against the reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub embedder: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub fvd_structural: f64,
    pub fvd_refined: f64,
    pub fid_structural: f64,
    pub fid_refined: f64,
    pub recognition: Option<RecognitionReport>,
}

/// Verification on the refined volumes with an embedder trained on the
/// reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub embedder: String,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub eer: f64,
    pub tar_at_far_1e2: f64,
}

/// A configured run rooted at one output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>, workers: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, out: out.into(), workers: workers.max(1) })
    }

    pub fn phantoms_dir(&self) -> PathBuf {
        self.out.join("phantoms")
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.out.join("synth")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}.p2ck", stage.name()))
    }

    pub fn loss_path(&self, stage: Stage) -> PathBuf {
        self.out.join("losses").join(format!("{}.csv", stage.name()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.json")
    }

    /// Merges `seconds` for `key` into `timing.json`.
    pub fn record_timing(&self, key: &str, seconds: f64) -> Result<()> {
        let path = self.out.join("timing.json");
        let mut t: BTreeMap<String, f64> = match std::fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        t.insert(key.to_string(), seconds);
        write_text(&path, &serde_json::to_string_pretty(&t)?)
    }

    pub fn make_phantoms(&self) -> Result<DatasetManifest> {
        let c = &self.config;
        build_phantom_dataset(self.phantoms_dir(), &c.dataset, &c.phantom, c.seed)
    }

    fn phantoms(&self) -> Result<DatasetManifest> {
        let dir = self.phantoms_dir();
        if !dir.join("manifest.json").exists() {
            return Err(Error::Missing(format!("missing phantom dataset at {} (run make-phantoms)", dir.display())));
        }
        DatasetManifest::load(dir)
    }

    /// Manifest entries used for training; the rest are held out.
    pub fn split(&self, m: &DatasetManifest) -> (Vec<ManifestEntry>, Vec<ManifestEntry>) {
        let n = self.config.training.train_pairs.min(m.entries.len());
        (m.entries[..n].to_vec(), m.entries[n..].to_vec())
    }

    /// Exemplar pool: the first `pool_per_category` z-means of each
    /// category in manifest order.
    pub fn exemplar_pool(&self, m: &DatasetManifest) -> Result<ExemplarPool> {
        let mut pool = ExemplarPool::default();
        for e in &m.entries {
            let list = pool.categories.entry(e.category).or_default();
            if list.len() < self.config.training.pool_per_category {
                list.push(read_image(m.path(e, "zmean")?)?);
            }
        }
        Ok(pool)
    }

    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let p = self.checkpoint_path(stage);
        if !p.exists() {
            return Err(Error::Missing(format!("missing {} checkpoint ({})", stage.name(), p.display())));
        }
        Ok(p)
    }

    /// Trains one stage and writes its checkpoint and loss CSV. Returns the
    /// checkpoint path.
    pub fn train(&self, stage: Stage) -> Result<PathBuf> {
        if stage == Stage::Refiner {
            self.require(Stage::Expansion)?;
        }
        let m = self.phantoms()?;
        let (train, _) = self.split(&m);
        let path = self.checkpoint_path(stage);
        let history = match stage {
            Stage::Style => {
                let pool = self.exemplar_pool(&m)?;
                let pairs = train
                    .iter()
                    .map(|e| {
                        Ok(StylePair {
                            print: BinaryImage2D::from_image(&read_image(m.path(e, "print")?)?)?,
                            target: read_image(m.path(e, "zmean")?)?,
                            category: e.category,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (net, h) = crate::style::train_style_stage(&pairs, &pool, &self.config.style_config())?;
                net.save(&path)?;
                h
            }
            Stage::Expansion => {
                let pairs = train
                    .iter()
                    .map(|e| Ok((read_image(m.path(e, "zmean")?)?, read_volume(m.path(e, "volume")?)?)))
                    .collect::<Result<Vec<_>>>()?;
                let (net, h) = crate::expansion::train_expansion(&pairs, &self.config.expansion_config())?;
                net.save(&path)?;
                h
            }
            Stage::Refiner => {
                let g_e = ExpansionNet::load(self.require(Stage::Expansion)?)?;
                let pairs = train
                    .iter()
                    .map(|e| Ok((g_e.forward(&read_image(m.path(e, "zmean")?)?)?, read_volume(m.path(e, "volume")?)?)))
                    .collect::<Result<Vec<_>>>()?;
                let (net, h) = crate::refiner::train_refiner(&pairs, &self.config.refiner_config())?;
                net.save(&path)?;
                h
            }
        };
        let csv = self.loss_path(stage);
        if let Some(dir) = csv.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        history.write_csv(&csv)?;
        Ok(path)
    }

    /// Runs master print -> impression -> style -> expansion -> refiner for
    /// `identities x impressions` records and writes every artifact.
    pub fn synthesize(&self, identities: usize, impressions: usize) -> Result<DatasetManifest> {
        let style_path = self.require(Stage::Style)?;
        let exp_path = self.require(Stage::Expansion)?;
        let ref_path = self.require(Stage::Refiner)?;
        if identities == 0 || impressions == 0 {
            return Err(Error::Invalid("synthesis needs at least one identity and impression".into()));
        }
        let pool = self.exemplar_pool(&self.phantoms()?)?;
        let stages = Stages {
            style: StyleTransfer::load(style_path)?,
            expansion: ExpansionNet::load(exp_path)?,
            refiner: Refiner::load(ref_path)?,
        };
        let jobs: Vec<(u32, u32)> =
            (0..identities as u32).flat_map(|i| (0..impressions as u32).map(move |j| (i, j))).collect();
        let root = self.synth_dir();
        let next = AtomicUsize::new(0);
        let mut results: Vec<(usize, Result<ManifestEntry>)> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.workers.min(jobs.len()))
                .map(|_| {
                    s.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let k = next.fetch_add(1, Ordering::Relaxed);
                            let Some(&(id, imp)) = jobs.get(k) else { break };
                            done.push((k, self.synthesize_one(&stages, &pool, &root, id, imp)));
                        }
                        done
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("synthesis worker panicked")).collect()
        });
        results.sort_by_key(|(k, _)| *k);
        let entries = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest::new(root, entries)?;
        manifest.save()?;
        Ok(manifest)
    }

    fn synthesize_one(&self, st: &Stages, pool: &ExemplarPool, root: &Path, id: u32, imp: u32) -> Result<ManifestEntry> {
        let c = &self.config;
        let size = (c.dataset.height, c.dataset.width);
        let master = synth_master_print(&IdentitySpec::sample(mix_seed(&[c.seed, 0x5e17, id as u64])), size)?;
        let seed = mix_seed(&[c.seed, 0x5e17, id as u64, imp as u64]);
        let mut r = rng(seed);
        let category = pick_category(&mut r, &c.dataset.category_weights);
        let dist = DistortionSpec::sample(&mut r, size, category);
        let warp = distortion_to_warp(&dist, c.dataset.distortion_magnitude)?;
        // Warping and cropping a binary print keeps it binary, so the
        // binarization step is a pass-through here.
        let print = crop_impression(&tps_warp_image(&master, &warp)?, &dist, size)?;
        let exemplars = &pool.categories[&category];
        let exemplar = &exemplars[(mix_seed(&[seed, 0xe7]) % exemplars.len() as u64) as usize];
        let styled = st.style.generate(&print, exemplar)?;
        let structural = st.expansion.forward(&styled)?;
        let refined = st.refiner.refine(&structural, mix_seed(&[seed, 0x4e]))?;
        let dir = format!("id_{id}/imp_{imp}");
        let mut paths = BTreeMap::new();
        for k in ["master", "print", "styled", "structural", "refined"] {
            paths.insert(k.to_string(), format!("{dir}/{k}.p2v"));
        }
        write_image(&master.to_image(), root.join(&paths["master"]))?;
        write_image(&print.to_image(), root.join(&paths["print"]))?;
        write_image(&styled, root.join(&paths["styled"]))?;
        write_volume(&structural, root.join(&paths["structural"]))?;
        write_volume(&refined, root.join(&paths["refined"]))?;
        Ok(ManifestEntry { identity_id: id, impression_id: imp, category, paths, seed })
    }

    /// FVD/FID of the fake set's structural and refined volumes against the
    /// real volumes. A manifest without those artifacts (e.g. a phantom
    /// manifest) contributes its `volume` files to both.
    pub fn evaluate(&self, real: impl AsRef<Path>, fake: impl AsRef<Path>) -> Result<EvaluationReport> {
        let real = DatasetManifest::load(real.as_ref())?;
        let fake = DatasetManifest::load(fake.as_ref())?;
        if real.entries.is_empty() || fake.entries.is_empty() {
            return Err(Error::Invalid("evaluation needs non-empty manifests".into()));
        }
        let load = |m: &DatasetManifest, key: &str| -> Result<Vec<Volume3D>> {
            m.entries
                .iter()
                .map(|e| {
                    let k = if e.paths.contains_key(key) { key } else { "volume" };
                    read_volume(m.path(e, k)?)
                })
                .collect()
        };
        let reals = load(&real, "volume")?;
        let structural = load(&fake, "structural")?;
        let refined = load(&fake, "refined")?;
        let dims = reals[0].dims();
        if let Some(v) = reals.iter().chain(&structural).chain(&refined).find(|v| v.dims() != dims) {
            return Err(Error::Shape(format!(
                "embedder input mismatch: volumes of {:?} and {:?} cannot share one embedder",
                dims,
                v.dims()
            )));
        }
        let ev = &self.config.evaluation;
        let vol_embedder = RandomConvEmbedder::volumes(ev.embedder_seed);
        let img_embedder = RandomConvEmbedder::images(ev.embedder_seed);
        let slices = |vs: &[Volume3D]| -> Result<Vec<Image2D>> {
            Ok(vs.iter().map(|v| bscans_every(v, ev.bscan_stride)).collect::<Result<Vec<_>>>()?.concat())
        };
        let (real_slices, s_slices, r_slices) = (slices(&reals)?, slices(&structural)?, slices(&refined)?);
        let recognition = if ev.recognition { self.recognition(&real, &fake, &refined)? } else { None };
        use crate::metrics::Embedder;
        Ok(EvaluationReport {
            embedder: Embedder::<Volume3D>::id(&vol_embedder),
            n_real: reals.len(),
            n_fake: refined.len(),
            fvd_structural: fvd_score(&reals, &structural, &vol_embedder)?,
            fvd_refined: fvd_score(&reals, &refined, &vol_embedder)?,
            fid_structural: fid_score(&real_slices, &s_slices, &img_embedder)?,
            fid_refined: fid_score(&real_slices, &r_slices, &img_embedder)?,
            recognition,
        })
    }

    /// Verification of the refined set by an embedder trained on the reals;
    /// `None` when either set lacks two impressions of two identities.
    fn recognition(&self, real: &DatasetManifest, fake: &DatasetManifest, refined: &[Volume3D]) -> Result<Option<RecognitionReport>> {
        let enough = |m: &DatasetManifest| {
            let ids = m.identities();
            ids.len() >= 2 && ids.iter().all(|&i| m.entries.iter().filter(|e| e.identity_id == i).count() >= 2)
        };
        if !enough(real) || !enough(fake) {
            return Ok(None);
        }
        let cfg = TinyEmbedderConfig {
            epochs: self.config.evaluation.recognition_epochs,
            seed: mix_seed(&[self.config.seed, 0x7e]),
            ..TinyEmbedderConfig::default()
        };
        let emb: TinyEmbedder = crate::metrics::tiny_embedder_train(real, &cfg)?;
        let feats = embed_all(refined, &emb)?;
        let labels: Vec<u32> = fake.entries.iter().map(|e| e.identity_id).collect();
        let scores = all_pairs_scores(&feats, &labels);
        use crate::metrics::Embedder;
        Ok(Some(RecognitionReport {
            embedder: Embedder::<Volume3D>::id(&emb),
            genuine_pairs: scores.genuine.len(),
            impostor_pairs: scores.impostor.len(),
            eer: eer(&scores)?,
            tar_at_far_1e2: tar_at_far(&scores, 1e-2)?,
        }))
    }

    /// Records the effective configuration beside the outputs.
    pub fn write_config(&self) -> Result<PathBuf> {
        let path = self.out.join("config.json");
        write_text(&path, &self.config.to_json()?)?;
        Ok(path)
    }

    pub fn write_report(&self, report: &EvaluationReport) -> Result<PathBuf> {
        let path = self.report_path();
        write_text(&path, &serde_json::to_string_pretty(report)?)?;
        Ok(path)
    }
}

struct Stages {
    style: StyleTransfer,
    expansion: ExpansionNet,
    refiner: Refiner,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = text.to_string();
    if !s.ends_with('\n') {
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Rounds `[0, 1]` values to 8 bits.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_png(img: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, quantize(img.values()))
        .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image2D> {
    let img = image::open(path.as_ref())?.to_luma8();
    let (w, h) = img.dimensions();
    Image2D::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

/// Junction below a detected surface when no junction map is stored
/// beside the volume.
const FALLBACK_JUNCTION_OFFSET: usize = 3;

/// Writes three B-scans (at H/4, H/2, 3H/4), the z-mean projection and the
/// en-face images at the surface and the junction. Depth maps are taken
/// from `surface.p2v` / `junction.p2v` beside the volume when present and
/// otherwise estimated from the volume.
pub fn export_views(volume: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let volume = volume.as_ref();
    let out_dir = out_dir.as_ref();
    let v = read_volume(volume)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (d, h, _) = v.dims();
    let sibling = |name: &str| volume.parent().map(|p| p.join(name)).filter(|p| p.exists());
    let surface = match sibling("surface.p2v") {
        Some(p) => read_depth_map(p)?,
        None => detect_surface(&v, 0.3, 3)?,
    };
    let junction = match sibling("junction.p2v") {
        Some(p) => read_depth_map(p)?,
        None => DepthMap {
            height: surface.height,
            width: surface.width,
            values: surface.values.iter().map(|&z| (z + FALLBACK_JUNCTION_OFFSET).min(d - 1)).collect(),
        },
    };
    let mut written = Vec::new();
    let mut save = |img: &Image2D, name: String| -> Result<()> {
        let p = out_dir.join(name);
        write_png(img, &p)?;
        written.push(p);
        Ok(())
    };
    for y in [h / 4, h / 2, 3 * h / 4] {
        save(&v.bscan(y)?, format!("bscan_y{y:03}.png"))?;
    }
    save(&z_mean_projection(&v), "zmean.png".into())?;
    save(&extract_enface_layer(&v, &surface, 1)?, "enface_surface.png".into())?;
    save(&extract_enface_layer(&v, &junction, 1)?, "enface_junction.png".into())?;
    Ok(written)
}
