//! Image and volume types, the raw float32 container, dataset manifests and
//! the projection/extraction operations shared by every stage.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"P2V1";
const DTYPE_F32: u8 = 1;
const MIN_SIDE: usize = 8;

fn check_unit_range(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        Some(i) => Err(Error::Invalid(format!("value {} at index {i} is outside [0, 1]", values[i]))),
        None => Ok(()),
    }
}

/// Grayscale image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} image", values.len())));
        }
        check_unit_range(&values)?;
        Ok(Self { height, width, values })
    }

    /// Builds an image from arbitrary finite values, clamping into [0, 1]
    /// (NaN becomes 0).
    pub fn clamped(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let values = values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(height, width, values)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values)
    }

    pub fn constant(height: usize, width: usize, c: f32) -> Result<Self> {
        Self::new(height, width, vec![c; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Binary image with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImage2D {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryImage2D {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Shape(format!("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} image", values.len())));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("binary image holds value {v}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    /// 1 where `img > threshold`.
    pub fn threshold(img: &Image2D, threshold: f32) -> Self {
        let values = img.values().iter().map(|&v| u8::from(v > threshold)).collect();
        Self { height: img.height, width: img.width, values }
    }

    /// Reads a grayscale image whose values are all exactly 0 or 1.
    pub fn from_image(img: &Image2D) -> Result<Self> {
        let values = img
            .values()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(Error::Invalid(format!("value {v} in a binary image"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(img.height, img.width, values)
    }

    pub fn to_image(&self) -> Image2D {
        Image2D { height: self.height, width: self.width, values: self.values.iter().map(|&v| v as f32).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.values.len() as f64
    }
}

/// Intensity volume indexed (z, y, x) with x fastest, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    depth: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Volume3D {
    pub fn new(depth: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty volume {depth}x{height}x{width}")));
        }
        if values.len() != depth * height * width {
            return Err(Error::Shape(format!("{} values for a {depth}x{height}x{width} volume", values.len())));
        }
        check_unit_range(&values)?;
        Ok(Self { depth, height, width, values })
    }

    pub fn clamped(depth: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let values = values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(depth, height, width, values)
    }

    pub fn constant(depth: usize, height: usize, width: usize, c: f32) -> Result<Self> {
        Self::new(depth, height, width, vec![c; depth * height * width])
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[(z * self.height + y) * self.width + x]
    }

    /// En-face slice at depth `z`.
    pub fn slice(&self, z: usize) -> Result<Image2D> {
        let plane = self.height * self.width;
        Image2D::new(self.height, self.width, self.values[z * plane..(z + 1) * plane].to_vec())
    }

    /// Cross-section (x-z plane) at row `y`: a `depth x width` image.
    pub fn bscan(&self, y: usize) -> Result<Image2D> {
        let mut out = Vec::with_capacity(self.depth * self.width);
        for z in 0..self.depth {
            let start = (z * self.height + y) * self.width;
            out.extend_from_slice(&self.values[start..start + self.width]);
        }
        Image2D::new(self.depth, self.width, out)
    }
}

/// Per-column depth indices, e.g. surface or junction depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<usize>,
}

impl DepthMap {
    pub fn filled(height: usize, width: usize, z: usize) -> Self {
        Self { height, width, values: vec![z; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<usize>() as f64 / self.values.len() as f64
    }
}

/// Raw contents of a container file before type-specific validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_container(dims: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_container(bytes: &[u8], expect_ndim: u8) -> Result<RawArray> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { expected: 8, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic { expected: CONTAINER_MAGIC, found: magic });
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::Dtype(bytes[4]));
    }
    let ndim = bytes[5];
    if ndim != expect_ndim {
        return Err(Error::Dims { expected: format!("{expect_ndim} dimensions"), found: format!("{ndim}") });
    }
    let header = 8 + 4 * ndim as usize;
    if bytes.len() < header {
        return Err(Error::Truncated { expected: header, found: bytes.len() });
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + 4 * count;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::Dims {
            expected: format!("{expected} bytes for dims {dims:?}"),
            found: format!("{} bytes", bytes.len()),
        });
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawArray { dims, data })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_container(&[v.depth, v.height, v.width], &v.values))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let raw = decode_container(&read_bytes(path.as_ref())?, 3)?;
    Volume3D::new(raw.dims[0], raw.dims[1], raw.dims[2], raw.data)
}

pub fn write_image(img: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_container(&[img.height, img.width], &img.values))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let raw = decode_container(&read_bytes(path.as_ref())?, 2)?;
    Image2D::new(raw.dims[0], raw.dims[1], raw.data)
}

/// Depth maps share the image container, holding integer depths as floats.
pub fn write_depth_map(m: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = m.values.iter().map(|&v| v as f32).collect();
    write_bytes(path.as_ref(), &encode_container(&[m.height, m.width], &data))
}

pub fn read_depth_map(path: impl AsRef<Path>) -> Result<DepthMap> {
    let raw = decode_container(&read_bytes(path.as_ref())?, 2)?;
    let values = raw
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f32 {
                Ok(v as usize)
            } else {
                Err(Error::Invalid(format!("depth {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthMap { height: raw.dims[0], width: raw.dims[1], values })
}

/// Mean over depth of every A-line.
pub fn z_mean_projection(v: &Volume3D) -> Image2D {
    let plane = v.height * v.width;
    let mut acc = vec![0.0f64; plane];
    for z in 0..v.depth {
        for (a, &x) in acc.iter_mut().zip(&v.values[z * plane..(z + 1) * plane]) {
            *a += x as f64;
        }
    }
    let values = acc.into_iter().map(|a| ((a / v.depth as f64) as f32).clamp(0.0, 1.0)).collect();
    Image2D { height: v.height, width: v.width, values }
}

/// Mean of `band` voxels starting at `depth_map[y, x]` in each A-line,
/// truncated at the bottom of the volume.
pub fn extract_enface_layer(v: &Volume3D, depth_map: &DepthMap, band: usize) -> Result<Image2D> {
    if (depth_map.height, depth_map.width) != (v.height, v.width) {
        return Err(Error::Shape(format!(
            "depth map {}x{} for a volume of {}x{} columns",
            depth_map.height, depth_map.width, v.height, v.width
        )));
    }
    if band == 0 {
        return Err(Error::Invalid("band must be at least 1".into()));
    }
    let mut values = Vec::with_capacity(v.height * v.width);
    for y in 0..v.height {
        for x in 0..v.width {
            let z0 = depth_map.get(y, x);
            if z0 >= v.depth {
                return Err(Error::Invalid(format!("depth {z0} at ({y}, {x}) is outside 0..{}", v.depth)));
            }
            let z1 = (z0 + band).min(v.depth);
            let sum: f64 = (z0..z1).map(|z| v.get(z, y, x) as f64).sum();
            values.push(((sum / (z1 - z0) as f64) as f32).clamp(0.0, 1.0));
        }
    }
    Ok(Image2D { height: v.height, width: v.width, values })
}

/// Surface depth per column: first z where the median-smoothed A-line
/// exceeds `threshold` (`D - 1` if it never does). `smoothing` is the
/// median window length; 0 and 1 disable smoothing.
pub fn detect_surface(v: &Volume3D, threshold: f32, smoothing: usize) -> Result<DepthMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!("threshold {threshold} is outside (0, 1)")));
    }
    let half = smoothing.max(1) / 2;
    let mut line = vec![0.0f32; v.depth];
    let mut window = Vec::with_capacity(2 * half + 1);
    let mut out = Vec::with_capacity(v.height * v.width);
    for y in 0..v.height {
        for x in 0..v.width {
            for (z, l) in line.iter_mut().enumerate() {
                *l = v.get(z, y, x);
            }
            let hit = (0..v.depth).find(|&z| {
                window.clear();
                window.extend_from_slice(&line[z.saturating_sub(half)..(z + half + 1).min(v.depth)]);
                window.sort_by(f32::total_cmp);
                median(&window) > threshold
            });
            out.push(hit.unwrap_or(v.depth - 1));
        }
    }
    Ok(DepthMap { height: v.height, width: v.width, values: out })
}

fn median(sorted: &[f32]) -> f32 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Upper,
    Middle,
    Lower,
    Full,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Upper, Category::Middle, Category::Lower, Category::Full];

    pub fn name(self) -> &'static str {
        match self {
            Category::Upper => "upper",
            Category::Middle => "middle",
            Category::Lower => "lower",
            Category::Full => "full",
        }
    }
}

/// Otsu's threshold computed exactly over the distinct values (no
/// histogram binning). Pixels strictly above the returned value form the
/// upper class. `None` for constant input.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = sorted.iter().map(|&v| v as f64).sum();
    let mut best: Option<(f64, f32)> = None;
    let (mut count0, mut sum0) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        while i < sorted.len() && sorted[i] == v {
            count0 += 1.0;
            sum0 += v as f64;
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let count1 = n - count0;
        let (m0, m1) = (sum0 / count0, (total - sum0) / count1);
        let between = count0 * count1 * (m0 - m1).powi(2);
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, v));
        }
    }
    best.map(|(_, t)| t)
}

/// Classifies an impression by its Otsu foreground: `Full` when the
/// foreground covers more than `coverage_threshold` of the image,
/// otherwise by which third of the rows holds the foreground centroid.
pub fn foreground_category(img: &Image2D, coverage_threshold: f64) -> Result<Category> {
    if !(coverage_threshold > 0.0 && coverage_threshold < 1.0) {
        return Err(Error::Invalid(format!("coverage threshold {coverage_threshold} is outside (0, 1)")));
    }
    let fg: Vec<bool> = match otsu_threshold(img.values()) {
        Some(t) => img.values().iter().map(|&v| v > t).collect(),
        // A constant image is either all foreground or blank.
        None => vec![img.values()[0] > 0.0; img.values().len()],
    };
    let count = fg.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::BlankImage);
    }
    if count as f64 / fg.len() as f64 > coverage_threshold {
        return Ok(Category::Full);
    }
    let row_sum: f64 = fg.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| (i / img.width) as f64 + 0.5).sum();
    let centroid = row_sum / count as f64;
    let h = img.height as f64;
    Ok(if centroid < h / 3.0 {
        Category::Upper
    } else if centroid < 2.0 * h / 3.0 {
        Category::Middle
    } else {
        Category::Lower
    })
}

pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub identity_id: u32,
    pub impression_id: u32,
    pub category: Category,
    /// Stage name to file path, relative to the manifest's directory.
    pub paths: BTreeMap<String, String>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries, root: root.into() };
        m.check_unique()?;
        Ok(m)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert((e.identity_id, e.impression_id)) {
                return Err(Error::Invalid(format!(
                    "duplicate manifest entry identity {} impression {}",
                    e.identity_id, e.impression_id
                )));
            }
        }
        Ok(())
    }

    pub fn path(&self, entry: &ManifestEntry, stage: &str) -> Result<PathBuf> {
        entry
            .paths
            .get(stage)
            .map(|p| self.root.join(p))
            .ok_or_else(|| Error::Missing(format!("entry {}/{} has no {stage:?} artifact", entry.identity_id, entry.impression_id)))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes `manifest.json` into the manifest's root directory.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join("manifest.json");
        write_bytes(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }

    /// Loads a manifest file (or a directory containing `manifest.json`)
    /// and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join("manifest.json");
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_unique()?;
        for e in &m.entries {
            for rel in e.paths.values() {
                let p = m.root.join(rel);
                if !p.is_file() {
                    return Err(Error::Missing(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_volume_file_layout() {
        let v = Volume3D::constant(2, 2, 2, 0.0).unwrap();
        let bytes = encode_container(&[2, 2, 2], v.values());
        assert_eq!(&bytes[..8], b"P2V1\x01\x03\x00\x00");
        assert_eq!(&bytes[8..20], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 32);
        assert!(bytes[20..].iter().all(|&b| b == 0));
    }

    #[test]
    fn decode_rejects_damage() {
        let bytes = encode_container(&[2, 2, 2], &[0.5; 8]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad, 3), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_container(&bytes[..bytes.len() - 3], 3), Err(Error::Truncated { .. })));
        assert!(matches!(decode_container(&bytes, 2), Err(Error::Dims { .. })));
        let mut dtype = bytes.clone();
        dtype[4] = 2;
        assert!(matches!(decode_container(&dtype, 3), Err(Error::Dtype(2))));
    }

    #[test]
    fn two_slice_projection() {
        let mut values = vec![0.0; 64];
        values.extend(vec![1.0; 64]);
        let v = Volume3D::new(2, 8, 8, values).unwrap();
        assert!(z_mean_projection(&v).values().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn bscan_orientation() {
        let v = Volume3D::new(8, 8, 9, (0..576).map(|i| i as f32 / 575.0).collect()).unwrap();
        let b = v.bscan(3).unwrap();
        assert_eq!(b.dims(), (8, 9));
        assert_eq!(b.get(6, 5), v.get(6, 3, 5));
    }

    #[test]
    fn otsu_splits_two_levels() {
        let t = otsu_threshold(&[0.1, 0.1, 0.1, 0.9, 0.9]).unwrap();
        assert_eq!(t, 0.1);
        assert_eq!(otsu_threshold(&[0.4; 5]), None);
    }

    #[test]
    fn median_window() {
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[1.0, 3.0]), 2.0);
    }
}
