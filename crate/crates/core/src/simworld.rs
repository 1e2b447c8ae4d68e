//! Procedural 2.5-D desk-scale scenes with exact depth and semantics.
//!
//! A scene is a back wall and a receding floor plus a handful of
//! axis-aligned rectangles and ellipses standing on the floor. Each object
//! has one class and one constant depth; its bottom edge touches the floor
//! row at that depth and its pixel size shrinks with distance. Visual
//! appearance (palette, texture, noise) is the per-domain knob; geometry and
//! lighting are shared between domains.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Horizon position as a fraction of image height, before per-scene jitter.
const HORIZON_FRACTION: f64 = 0.3;
const HORIZON_JITTER: f64 = 0.05;
/// Object extent range in meters.
const OBJECT_SIZE: (f64, f64) = (0.4, 1.6);
/// Per-object brightness variation around the class color.
const ALBEDO_JITTER: f64 = 0.25;
/// Per-scene illumination gain range.
const SCENE_GAIN: (f64, f64) = (0.7, 1.2);
/// Focal length as a fraction of image height.
const FOCAL_FRACTION: f64 = 0.6;
/// Brightness falls linearly to this factor at the far end of the depth range.
const FAR_SHADE: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureStyle {
    Flat,
    Striped,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// `(min, max)` depth in meters.
    pub depth_range: (f64, f64),
    /// Inclusive `(min, max)` object count.
    pub num_objects: (usize, usize),
    /// Class 0 is the background.
    pub num_classes: usize,
    pub palette: Vec<[f64; 3]>,
    pub texture_style: TextureStyle,
    pub pixel_noise_sigma: f64,
    pub seed_namespace: u64,
}

impl DomainConfig {
    /// Stand-in for the real-world target domain.
    pub fn target_default() -> Self {
        Self {
            name: "target".into(),
            image_size: (48, 64),
            depth_range: (0.5, 10.0),
            num_objects: (3, 8),
            num_classes: 6,
            palette: vec![
                [0.72, 0.66, 0.56],
                [0.55, 0.35, 0.25],
                [0.35, 0.45, 0.30],
                [0.30, 0.35, 0.50],
                [0.75, 0.72, 0.70],
                [0.60, 0.50, 0.20],
            ],
            texture_style: TextureStyle::Striped,
            pixel_noise_sigma: 0.03,
            seed_namespace: 1_000_000,
        }
    }

    /// Stand-in for out-of-distribution simulator imagery.
    pub fn ood_default() -> Self {
        Self {
            name: "ood".into(),
            image_size: (48, 64),
            depth_range: (0.5, 10.0),
            num_objects: (3, 8),
            num_classes: 6,
            palette: vec![
                [0.55, 0.50, 0.42],
                [0.95, 0.20, 0.20],
                [0.20, 0.85, 0.30],
                [0.95, 0.85, 0.15],
                [0.70, 0.25, 0.85],
                [0.15, 0.80, 0.85],
            ],
            texture_style: TextureStyle::Noisy,
            pixel_noise_sigma: 0.0,
            seed_namespace: 2_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dmin, dmax) = self.depth_range;
        if !(dmin > 0.0 && dmax > dmin && dmax.is_finite()) {
            return Err(Error::Config(format!("{}: depth_range must satisfy 0 < min < max, got {:?}", self.name, self.depth_range)));
        }
        if dmax * 1000.0 > u16::MAX as f64 {
            return Err(Error::Config(format!("{}: depth_range max {dmax} m exceeds the 16-bit millimeter encoding", self.name)));
        }
        let (h, w) = self.image_size;
        if h < 2 || w < 2 {
            return Err(Error::Config(format!("{}: image_size must be at least 2x2, got {h}x{w}", self.name)));
        }
        if self.num_objects.0 > self.num_objects.1 {
            return Err(Error::Config(format!("{}: num_objects min exceeds max", self.name)));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!("{}: num_classes must be in [2, 256], got {}", self.name, self.num_classes)));
        }
        if self.palette.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{}: palette has {} entries but num_classes is {}",
                self.name,
                self.palette.len(),
                self.num_classes
            )));
        }
        if self.palette.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("{}: palette channels must lie in [0, 1]", self.name)));
        }
        if !(0.0..=0.2).contains(&self.pixel_noise_sigma) {
            return Err(Error::Config(format!("{}: pixel_noise_sigma must lie in [0, 0.2]", self.name)));
        }
        Ok(())
    }
}

/// One registered RGB / depth / semantics triplet, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `height x width x 3`, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Meters; 0 marks an invalid pixel.
    pub depth: Vec<f32>,
    pub semantics: Vec<u8>,
}

impl Sample {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// RGB as a `1 x 3 x H x W` tensor.
    pub fn rgb_tensor(&self) -> Tensor<f32> {
        let n = self.pixel_count();
        let mut data = vec![0.0; 3 * n];
        for (p, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + p] = px[c];
            }
        }
        Tensor::from_vec([1, 3, self.height, self.width], data).expect("consistent sample")
    }

    pub fn depth_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 1, self.height, self.width], self.depth.clone()).expect("consistent sample")
    }

    /// Distinct class ids present, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &s in &self.semantics {
            seen[s as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone)]
struct SceneObject {
    class: u8,
    /// Brightness factor on the class color.
    albedo: f64,
    depth: f64,
    shape: Shape,
    /// Pixel-space bounds `[x0, x1) x [y0, y1)` in continuous coordinates.
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl SceneObject {
    fn covers(&self, px: f64, py: f64) -> bool {
        if px < self.x0 || px >= self.x1 || py < self.y0 || py >= self.y1 {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let cx = 0.5 * (self.x0 + self.x1);
                let cy = 0.5 * (self.y0 + self.y1);
                let rx = 0.5 * (self.x1 - self.x0);
                let ry = 0.5 * (self.y1 - self.y0);
                let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// Geometry shared by every domain: horizon and floor depth profile.
#[derive(Debug, Clone, Copy)]
struct Ground {
    horizon: f64,
    height: f64,
    dmin: f64,
    dmax: f64,
}

impl Ground {
    /// Floor (or back wall) depth at vertical pixel coordinate `y`.
    fn depth_at(&self, y: f64) -> f64 {
        if y <= self.horizon {
            return self.dmax;
        }
        let t = ((y - self.horizon) / (self.height - self.horizon)).min(1.0);
        1.0 / (1.0 / self.dmax + t * (1.0 / self.dmin - 1.0 / self.dmax))
    }

    /// Row where the floor reaches depth `d`.
    fn row_of(&self, d: f64) -> f64 {
        let t = (1.0 / d - 1.0 / self.dmax) / (1.0 / self.dmin - 1.0 / self.dmax);
        self.horizon + t * (self.height - self.horizon)
    }
}

fn scene_rng(config: &DomainConfig, seed: u64) -> ChaCha8Rng {
    // splitmix64 over (namespace, seed) so namespaces do not alias.
    let mut z = config.seed_namespace.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_objects(config: &DomainConfig, ground: &Ground, width: f64, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let count = rng.random_range(config.num_objects.0..=config.num_objects.1);
    let focal = FOCAL_FRACTION * ground.height;
    (0..count)
        .map(|_| {
            let class = rng.random_range(1..config.num_classes) as u8;
            let depth = rng.random_range(config.depth_range.0..=config.depth_range.1);
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let w_m = rng.random_range(OBJECT_SIZE.0..OBJECT_SIZE.1);
            let h_m = rng.random_range(OBJECT_SIZE.0..OBJECT_SIZE.1);
            let cx = rng.random_range(0.0..width);
            let (w_px, h_px) = (w_m * focal / depth, h_m * focal / depth);
            let bottom = ground.row_of(depth);
            let albedo = rng.random_range(1.0 - ALBEDO_JITTER..=1.0 + ALBEDO_JITTER);
            SceneObject { class, albedo, depth, shape, x0: cx - 0.5 * w_px, x1: cx + 0.5 * w_px, y0: bottom - h_px, y1: bottom }
        })
        .collect()
}

fn texture(style: TextureStyle, u: f64, v: f64, rng: &mut ChaCha8Rng) -> f64 {
    match style {
        TextureStyle::Flat => 1.0,
        TextureStyle::Striped => {
            let cu = (u / 0.15).floor() as i64;
            let cv = (v / 0.15).floor() as i64;
            if (cu + cv).rem_euclid(2) == 0 {
                1.0
            } else {
                0.78
            }
        }
        TextureStyle::Noisy => 0.85 + 0.3 * rng.random::<f64>(),
    }
}

/// Renders one scene. Deterministic in `(config, seed)`.
pub fn generate_sample(config: &DomainConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let (height, width) = config.image_size;
    let (dmin, dmax) = config.depth_range;
    let mut rng = scene_rng(config, seed);
    let horizon = height as f64 * (HORIZON_FRACTION + rng.random_range(-HORIZON_JITTER..=HORIZON_JITTER));
    let ground = Ground { horizon, height: height as f64, dmin, dmax };
    let objects = sample_objects(config, &ground, width as f64, &mut rng);
    let focal = FOCAL_FRACTION * height as f64;
    let gain = rng.random_range(SCENE_GAIN.0..=SCENE_GAIN.1);

    let n = height * width;
    let mut depth = vec![0f32; n];
    let mut semantics = vec![0u8; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for y in 0..height {
        let py = y as f64 + 0.5;
        let floor = ground.depth_at(py);
        for x in 0..width {
            let px = x as f64 + 0.5;
            let mut best = floor;
            let mut who = None;
            for (k, obj) in objects.iter().enumerate() {
                if obj.depth < best && obj.covers(px, py) {
                    best = obj.depth;
                    who = Some(k);
                }
            }
            let i = y * width + x;
            depth[i] = best as f32;
            owner[i] = who;
            semantics[i] = who.map_or(0, |k| objects[k].class);
        }
    }

    let noise = Normal::new(0.0, config.pixel_noise_sigma.max(1e-12)).expect("valid sigma");
    let mut rgb = vec![0f32; 3 * n];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let d = depth[i] as f64;
            let (base, albedo, u, v) = match owner[i] {
                Some(k) => {
                    let o = &objects[k];
                    (config.palette[o.class as usize], o.albedo, (x as f64 - o.x0) * d / focal, (y as f64 - o.y0) * d / focal)
                }
                None if (y as f64 + 0.5) <= ground.horizon => (config.palette[0], 1.0, (x as f64 - 0.5 * width as f64) * d / focal, y as f64 * d / focal),
                None => (config.palette[0], 1.0, (x as f64 - 0.5 * width as f64) * d / focal, d),
            };
            let shade = 1.0 - (1.0 - FAR_SHADE) * (d - dmin) / (dmax - dmin);
            let tex = texture(config.texture_style, u, v, &mut rng);
            for c in 0..3 {
                let mut val = base[c] * albedo * gain * shade * tex;
                if config.pixel_noise_sigma > 0.0 {
                    val += noise.sample(&mut rng);
                }
                rgb[3 * i + c] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Sample { height, width, rgb, depth, semantics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub rgb: String,
    pub depth: String,
    pub semantics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: DomainConfig,
    pub count: usize,
    pub sample_records: Vec<SampleRecord>,
    pub format_version: u32,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported dataset format_version {}", m.format_version)));
        }
        if m.count != m.sample_records.len() || m.sample_records.iter().enumerate().any(|(i, r)| r.id != i) {
            return Err(Error::format(&path, "sample ids must be dense 0..count-1"));
        }
        m.domain.validate()?;
        m.root = dir.to_path_buf();
        Ok(m)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_sample(&self, id: usize) -> Result<Sample> {
        load_sample(self, id)
    }
}

fn encode_rgb(s: &Sample) -> Vec<u8> {
    s.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn encode_depth_mm(d: f32) -> u16 {
    (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

fn write_sample(root: &Path, record: &SampleRecord, s: &Sample) -> Result<()> {
    let (w, h) = (s.width as u32, s.height as u32);
    let rgb = RgbImage::from_raw(w, h, encode_rgb(s)).expect("buffer size matches");
    let p = root.join(&record.rgb);
    rgb.save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, s.depth.iter().map(|&d| encode_depth_mm(d)).collect()).expect("buffer size matches");
    let p = root.join(&record.depth);
    depth.save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
    let sem = GrayImage::from_raw(w, h, s.semantics.clone()).expect("buffer size matches");
    let p = root.join(&record.semantics);
    sem.save(&p).map_err(|e| Error::format(&p, e.to_string()))?;
    Ok(())
}

/// Writes `count` samples with seeds `seed_namespace + i` plus a manifest.
///
/// Output is staged next to `out_dir` and moved into place only when every
/// file was written; on failure nothing is left behind.
pub fn generate_dataset(config: &DomainConfig, count: usize, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let name = out_dir.file_name().ok_or_else(|| Error::Config(format!("invalid output directory {}", out_dir.display())))?;
    let parent = out_dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{}.partial", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = write_dataset(config, count, &staging);
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    if out_dir.exists() {
        if !out_dir.join("manifest.json").exists() && fs::read_dir(out_dir).map(|mut d| d.next().is_some()).unwrap_or(true) {
            let _ = fs::remove_dir_all(&staging);
            return Err(Error::Config(format!("{} exists and is not a dataset directory; refusing to overwrite", out_dir.display())));
        }
        fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(DatasetManifest { root: out_dir.to_path_buf(), ..manifest })
}

fn write_dataset(config: &DomainConfig, count: usize, root: &Path) -> Result<DatasetManifest> {
    for sub in ["rgb", "depth", "sem"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(count);
    for id in 0..count {
        let record = SampleRecord {
            id,
            rgb: format!("rgb/{id}.png"),
            depth: format!("depth/{id}.png"),
            semantics: format!("sem/{id}.png"),
        };
        let sample = generate_sample(config, config.seed_namespace + id as u64)?;
        write_sample(root, &record, &sample)?;
        records.push(record);
    }
    let manifest = DatasetManifest {
        domain: config.clone(),
        count,
        sample_records: records,
        format_version: DATASET_FORMAT_VERSION,
        root: root.to_path_buf(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_sample(manifest: &DatasetManifest, id: usize) -> Result<Sample> {
    let record = manifest
        .sample_records
        .get(id)
        .ok_or_else(|| Error::InvalidInput(format!("sample id {id} out of range (count {})", manifest.count)))?;
    let (h, w) = manifest.domain.image_size;
    let open = |rel: &str| -> Result<image::DynamicImage> {
        let p = manifest.root.join(rel);
        let img = image::open(&p).map_err(|e| Error::format(&p, e.to_string()))?;
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::format(&p, format!("expected {h}x{w} image, found {}x{}", img.height(), img.width())));
        }
        Ok(img)
    };
    let rgb_img = open(&record.rgb)?;
    let image::DynamicImage::ImageRgb8(rgb_img) = rgb_img else {
        return Err(Error::format(manifest.root.join(&record.rgb), "expected 8-bit RGB"));
    };
    let depth_img = open(&record.depth)?;
    let image::DynamicImage::ImageLuma16(depth_img) = depth_img else {
        return Err(Error::format(manifest.root.join(&record.depth), "expected 16-bit grayscale"));
    };
    let sem_img = open(&record.semantics)?;
    let image::DynamicImage::ImageLuma8(sem_img) = sem_img else {
        return Err(Error::format(manifest.root.join(&record.semantics), "expected 8-bit grayscale"));
    };
    let semantics = sem_img.into_raw();
    if let Some(&bad) = semantics.iter().find(|&&s| s as usize >= manifest.domain.num_classes) {
        return Err(Error::format(manifest.root.join(&record.semantics), format!("class id {bad} out of range")));
    }
    Ok(Sample {
        height: h,
        width: w,
        rgb: rgb_img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        depth: depth_img.into_raw().into_iter().map(|mm| (mm as f64 / 1000.0) as f32).collect(),
        semantics,
    })
}

/// A whole dataset held in memory in network layout.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub domain: DomainConfig,
    /// `N x 3 x H x W`.
    pub images: Tensor<f32>,
    /// `N x 1 x H x W`, meters.
    pub depths: Tensor<f32>,
    /// `N` maps of `H * W` class ids.
    pub semantics: Vec<Vec<u8>>,
}

impl LoadedDataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let samples = (0..manifest.count).map(|i| load_sample(manifest, i)).collect::<Result<Vec<_>>>()?;
        Self::from_samples(manifest.domain.clone(), &samples)
    }

    pub fn from_samples(domain: DomainConfig, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        let images = Tensor::stack(&samples.iter().map(Sample::rgb_tensor).collect::<Vec<_>>())?;
        let depths = Tensor::stack(&samples.iter().map(Sample::depth_tensor).collect::<Vec<_>>())?;
        Ok(Self { domain, images, depths, semantics: samples.iter().map(|s| s.semantics.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_depth(&self) -> bool {
        self.depths.data().iter().any(|&d| d > 0.0)
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Self {
            domain: self.domain.clone(),
            images: self.images.gather(&idx),
            depths: self.depths.gather(&idx),
            semantics: idx.iter().map(|&i| self.semantics[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DomainConfig {
        DomainConfig { image_size: (24, 32), ..DomainConfig::target_default() }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let c = small();
        assert_eq!(generate_sample(&c, 7).unwrap(), generate_sample(&c, 7).unwrap());
    }

    #[test]
    fn empty_scene_is_floor_only() {
        let c = DomainConfig { num_objects: (0, 0), ..small() };
        let s = generate_sample(&c, 1).unwrap();
        assert!(s.semantics.iter().all(|&v| v == 0));
        // Depth is constant along rows and non-increasing downwards.
        for y in 0..s.height {
            let row = &s.depth[y * s.width..(y + 1) * s.width];
            assert!(row.iter().all(|&d| d == row[0]));
            if y > 0 {
                assert!(row[0] <= s.depth[(y - 1) * s.width]);
            }
        }
        let (dmin, dmax) = c.depth_range;
        assert!(s.depth.iter().all(|&d| d as f64 >= dmin - 1e-6 && d as f64 <= dmax + 1e-6));
    }

    #[test]
    fn namespace_changes_content() {
        let a = small();
        let b = DomainConfig { seed_namespace: a.seed_namespace + 17, ..a.clone() };
        assert_ne!(generate_sample(&a, 3).unwrap().rgb, generate_sample(&b, 3).unwrap().rgb);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.depth_range = (0.0, 5.0);
        assert!(generate_sample(&c, 0).is_err());
        let mut c = small();
        c.depth_range = (3.0, 2.0);
        assert!(generate_sample(&c, 0).is_err());
        let mut c = small();
        c.palette.pop();
        assert!(generate_sample(&c, 0).is_err());
        let mut c = small();
        c.palette[1][2] = 1.5;
        assert!(generate_sample(&c, 0).is_err());
        let mut c = small();
        c.num_classes = 1;
        c.palette.truncate(1);
        assert!(generate_sample(&c, 0).is_err());
        let mut c = small();
        c.pixel_noise_sigma = 0.3;
        assert!(generate_sample(&c, 0).is_err());
    }

    #[test]
    fn sample_invariants_hold() {
        let c = small();
        for seed in 0..20 {
            let s = generate_sample(&c, seed).unwrap();
            assert_eq!(s.rgb.len(), 3 * s.pixel_count());
            assert_eq!(s.depth.len(), s.pixel_count());
            assert!(s.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            for (&d, &k) in s.depth.iter().zip(&s.semantics) {
                assert!((k as usize) < c.num_classes);
                if k != 0 {
                    assert!(d as f64 >= c.depth_range.0 && d as f64 <= c.depth_range.1);
                }
            }
        }
    }

    /// Independent re-rasterization: replay the scene RNG and check that
    /// every pixel carries the nearest covering object (or the floor).
    #[test]
    fn occlusion_matches_brute_force_rasterization() {
        let c = small();
        for seed in 0..10 {
            let s = generate_sample(&c, seed).unwrap();
            let mut rng = scene_rng(&c, seed);
            let (h, w) = c.image_size;
            let horizon = h as f64 * (HORIZON_FRACTION + rng.random_range(-HORIZON_JITTER..=HORIZON_JITTER));
            let ground = Ground { horizon, height: h as f64, dmin: c.depth_range.0, dmax: c.depth_range.1 };
            let objects = sample_objects(&c, &ground, w as f64, &mut rng);
            for o in &objects {
                // Objects stand on the floor at their own depth.
                assert!((ground.row_of(o.depth) - o.y1).abs() < 1e-9);
            }
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let covering: Vec<&SceneObject> = objects.iter().filter(|o| o.covers(px, py)).collect();
                    let floor = ground.depth_at(py);
                    let nearest = covering.iter().map(|o| o.depth).fold(floor, f64::min);
                    let i = y * w + x;
                    assert_eq!(s.depth[i], nearest as f32);
                    // The owning instance's region: semantics and depth agree.
                    if let Some(o) = covering.iter().find(|o| o.depth == nearest) {
                        assert_eq!(s.semantics[i], o.class);
                    } else {
                        assert_eq!(s.semantics[i], 0);
                    }
                }
            }
        }
    }

    #[test]
    fn pooled_histogram_is_non_degenerate() {
        let c = DomainConfig { image_size: (48, 64), ..DomainConfig::target_default() };
        let mut bins = [0usize; 20];
        for seed in 0..100 {
            for &d in &generate_sample(&c, seed).unwrap().depth {
                let t = (d as f64 - 0.0) / 10.0;
                bins[((t * 20.0) as usize).min(19)] += 1;
            }
        }
        assert!(bins.iter().filter(|&&b| b > 0).count() >= 10, "{bins:?}");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let out = dir.path().join("ds");
        let m = generate_dataset(&c, 4, &out).unwrap();
        assert_eq!(m.count, 4);
        assert_eq!(m.sample_records.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let loaded = DatasetManifest::load(&out).unwrap();
        assert_eq!(loaded, m);
        for id in 0..4 {
            let orig = generate_sample(&c, c.seed_namespace + id as u64).unwrap();
            let back = loaded.load_sample(id).unwrap();
            assert_eq!(back.semantics, orig.semantics);
            let max_rgb = orig.rgb.iter().zip(&back.rgb).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(max_rgb <= 1.0 / 255.0 + 1e-6, "{max_rgb}");
            let max_d = orig.depth.iter().zip(&back.depth).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(max_d <= 0.0005 + 1e-6, "{max_d}");
        }
        assert!(loaded.load_sample(4).is_err());
    }

    #[test]
    fn depth_encoding_is_exact_millimeters() {
        assert_eq!(encode_depth_mm(2.0), 2000);
        assert_eq!((encode_depth_mm(2.0) as f64 / 1000.0) as f32, 2.0);
        assert_eq!(encode_depth_mm(0.0), 0);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate_dataset(&c, 3, &a).unwrap();
        generate_dataset(&c, 3, &b).unwrap();
        for rel in ["manifest.json", "rgb/0.png", "depth/1.png", "sem/2.png"] {
            assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
        }
        // Regenerating in place replaces the previous dataset.
        generate_dataset(&c, 2, &a).unwrap();
        assert_eq!(DatasetManifest::load(&a).unwrap().count, 2);
        assert!(!a.join("rgb/2.png").exists());
    }

    #[test]
    fn failed_generation_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        // Parent is a regular file, so creating the dataset must fail.
        let out = blocker.join("ds");
        assert!(generate_dataset(&small(), 2, &out).is_err());
        assert!(!out.exists());
        let bad_dir = dir.path().join("occupied");
        fs::create_dir(&bad_dir).unwrap();
        fs::write(bad_dir.join("notes.txt"), b"keep").unwrap();
        assert!(generate_dataset(&small(), 2, &bad_dir).is_err());
        assert!(bad_dir.join("notes.txt").exists());
        assert!(!dir.path().join(".occupied.partial").exists());
    }

    #[test]
    fn corrupt_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let m = generate_dataset(&small(), 1, &out).unwrap();
        fs::write(out.join("depth/0.png"), b"garbage").unwrap();
        let err = m.load_sample(0).unwrap_err();
        assert!(err.to_string().contains("depth/0.png"), "{err}");
    }
}
