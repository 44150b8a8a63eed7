//! Procedural stand-in for a conditional generative model: random
//! multi-class masks, appearance-varied renders of each mask (the semantic
//! stack), and a shifted target appearance domain for out-of-domain
//! evaluation.
//!
//! Rendering is a pure function of (mask, params, seed): per-class base
//! intensity plus per-member jitter, additive texture noise, a smooth
//! multiplicative bias field, Gaussian blur, gamma, clamp to [0,1].

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{streams, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// H x W class labels; class 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self, SynthError> {
        if labels.len() != height * width {
            return Err(SynthError::Invalid(format!(
                "mask labels {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SynthError::Invalid(format!(
                "label {} >= num_classes {}",
                bad, num_classes
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn class_present(&self, class: u8) -> bool {
        self.labels.iter().any(|&l| l == class)
    }
}

/// Appearance parameters for one rendering domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    /// Per-class base gray level in [0,1], indexed by class id.
    pub class_intensity: Vec<f64>,
    /// Half-width of the per-member uniform intensity offset per class.
    pub intensity_jitter: f64,
    /// Std of additive per-pixel Gaussian noise.
    pub texture_noise_std: f64,
    /// Amplitude of the smooth multiplicative gradient field.
    pub bias_field_strength: f64,
    /// Gaussian blur sigma in pixels; 0 disables.
    pub blur_sigma: f64,
    /// Per-member gamma exponent range [lo, hi].
    pub gamma_range: (f64, f64),
}

impl DomainParams {
    pub fn validate(&self, num_classes: u8) -> Result<(), SynthError> {
        if self.class_intensity.len() != num_classes as usize {
            return Err(SynthError::Invalid(format!(
                "class_intensity has {} entries, expected {}",
                self.class_intensity.len(),
                num_classes
            )));
        }
        if self.class_intensity.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(SynthError::Invalid("class_intensity outside [0,1]".into()));
        }
        if self.intensity_jitter < 0.0
            || self.texture_noise_std < 0.0
            || self.bias_field_strength < 0.0
            || self.blur_sigma < 0.0
        {
            return Err(SynthError::Invalid("negative appearance parameter".into()));
        }
        let (lo, hi) = self.gamma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(SynthError::Invalid(format!(
                "gamma_range ({}, {}) must satisfy 0 < lo <= hi",
                lo, hi
            )));
        }
        Ok(())
    }

    /// Noise-free params: renders are exact per-class constants.
    pub fn noiseless(class_intensity: Vec<f64>) -> Self {
        Self {
            class_intensity,
            intensity_jitter: 0.0,
            texture_noise_std: 0.0,
            bias_field_strength: 0.0,
            blur_sigma: 0.0,
            gamma_range: (1.0, 1.0),
        }
    }

    /// Default source appearance for K classes: intensities spread over
    /// [0.1, 0.9] with generous per-member jitter so stack members differ.
    pub fn default_source(num_classes: u8) -> Self {
        let k = num_classes as usize;
        let class_intensity = (0..k)
            .map(|c| 0.1 + 0.8 * c as f64 / (k - 1).max(1) as f64)
            .collect();
        Self {
            class_intensity,
            intensity_jitter: 0.25,
            texture_noise_std: 0.05,
            bias_field_strength: 0.18,
            blur_sigma: 0.45,
            gamma_range: (0.85, 1.2),
        }
    }

    /// Default shifted target appearance: contrast compressed and shifted
    /// brighter, texture noise doubled, bias field strengthened, wider
    /// gamma range. Class ordering is preserved (appearance shift, not a
    /// label permutation).
    pub fn default_target(num_classes: u8) -> Self {
        let src = Self::default_source(num_classes);
        let class_intensity = src
            .class_intensity
            .iter()
            .map(|&v| (0.5 + 0.7 * (v - 0.5) + 0.1).clamp(0.0, 1.0))
            .collect();
        Self {
            class_intensity,
            intensity_jitter: src.intensity_jitter,
            texture_noise_std: src.texture_noise_std * 2.0,
            bias_field_strength: src.bias_field_strength * 2.0,
            blur_sigma: src.blur_sigma,
            gamma_range: (0.7, 1.3),
        }
    }
}

/// n renders of one mask; member 0 is the canonical "original" image.
#[derive(Debug, Clone)]
pub struct ImageStack {
    pub mask: SegmentationMask,
    pub images: Vec<Vec<f32>>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub shapes_per_class: usize,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_classes < 2 {
            return Err(SynthError::Invalid("num_classes must be >= 2".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(SynthError::Invalid("mask must be at least 16x16".into()));
        }
        if self.shapes_per_class == 0 {
            return Err(SynthError::Invalid("shapes_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rasterize one wobbly ellipse of class `class` into `labels`.
fn draw_blob(labels: &mut [u8], h: usize, w: usize, class: u8, rng: &mut Rng) {
    let cx = rng.uniform(0.15, 0.85) * w as f64;
    let cy = rng.uniform(0.15, 0.85) * h as f64;
    let min_dim = h.min(w) as f64;
    let a = rng.uniform(0.08, 0.24) * min_dim;
    let b = rng.uniform(0.08, 0.24) * min_dim;
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();
    let amp1 = rng.uniform(0.0, 0.15);
    let amp2 = rng.uniform(0.0, 0.12);
    let ph1 = rng.uniform(0.0, std::f64::consts::TAU);
    let ph2 = rng.uniform(0.0, std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = cos_t * dx + sin_t * dy;
            let v = -sin_t * dx + cos_t * dy;
            let r = ((u / a) * (u / a) + (v / b) * (v / b)).sqrt();
            let phi = v.atan2(u);
            let boundary = 1.0 + amp1 * (2.0 * phi + ph1).sin() + amp2 * (3.0 * phi + ph2).sin();
            if r <= boundary {
                labels[y * w + x] = class;
            }
        }
    }
}

/// Background plus randomly placed wobbly ellipses per foreground class,
/// later shapes overwriting earlier ones. Classes that end up empty are
/// re-drawn up to 10 rounds, then allowed to stay absent.
pub fn gen_mask(rng: &mut Rng, cfg: &MaskConfig) -> Result<SegmentationMask, SynthError> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u8; h * w];
    for class in 1..cfg.num_classes {
        for _ in 0..cfg.shapes_per_class {
            draw_blob(&mut labels, h, w, class, rng);
        }
    }
    for _ in 0..10 {
        let mut present = vec![false; cfg.num_classes as usize];
        for &l in &labels {
            present[l as usize] = true;
        }
        let missing: Vec<u8> = (1..cfg.num_classes).filter(|&c| !present[c as usize]).collect();
        if missing.is_empty() {
            break;
        }
        for class in missing {
            draw_blob(&mut labels, h, w, class, rng);
        }
    }
    SegmentationMask::new(h, w, cfg.num_classes, labels)
}

fn gaussian_blur(img: &mut Vec<f64>, h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    // horizontal
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w as isize);
                acc += kv * img[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // vertical
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h as isize);
                acc += kv * tmp[sy * w + x];
            }
            img[y * w + x] = acc;
        }
    }
}

/// Render one appearance sample of the mask. Deterministic per
/// (mask, params, rng state); consumes the given rng.
pub fn render(mask: &SegmentationMask, dp: &DomainParams, rng: &mut Rng) -> Result<Vec<f32>, SynthError> {
    dp.validate(mask.num_classes)?;
    let (h, w) = (mask.height, mask.width);
    let k = mask.num_classes as usize;

    // per-member photometric state: one contrast/brightness pair applied to
    // every class, so members vary in appearance but keep the class ordering
    let contrast = 1.0 + dp.intensity_jitter * rng.uniform(-1.0, 1.0);
    let brightness = dp.intensity_jitter * rng.uniform(-1.0, 1.0);
    let member_intensity: Vec<f64> = (0..k)
        .map(|c| (0.5 + (dp.class_intensity[c] - 0.5) * contrast + brightness).clamp(0.0, 1.0))
        .collect();

    let mut img: Vec<f64> = mask
        .labels
        .iter()
        .map(|&l| member_intensity[l as usize])
        .collect();

    if dp.texture_noise_std > 0.0 {
        for v in &mut img {
            *v += rng.normal(0.0, dp.texture_noise_std);
        }
    }

    if dp.bias_field_strength > 0.0 {
        let angle = rng.uniform(0.0, std::f64::consts::TAU);
        let (dy, dx) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / (w - 1) as f64 - 0.5;
                let v = y as f64 / (h - 1) as f64 - 0.5;
                let g = u * dx + v * dy; // in [-0.71, 0.71]
                img[y * w + x] *= 1.0 + dp.bias_field_strength * g;
            }
        }
    }

    gaussian_blur(&mut img, h, w, dp.blur_sigma);

    let gamma = rng.uniform_range(dp.gamma_range);
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
        if gamma != 1.0 {
            *v = v.powf(gamma);
        }
    }
    Ok(img.iter().map(|&v| v as f32).collect())
}

/// n independent renders of the same mask, each from its own substream.
pub fn gen_stack(
    mask: &SegmentationMask,
    dp: &DomainParams,
    n: usize,
    rng: &Rng,
) -> Result<ImageStack, SynthError> {
    if n < 2 {
        return Err(SynthError::Invalid(format!("stack size {} must be >= 2", n)));
    }
    let mut images = Vec::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    for member in 0..n {
        let mut r = rng.child(member as u64);
        seeds.push(r.stream());
        images.push(render(mask, dp, &mut r)?);
    }
    Ok(ImageStack {
        mask: mask.clone(),
        images,
        seeds,
    })
}

/// Full benchmark configuration: geometry, stack size, split sizes, and
/// the two appearance domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub mask: MaskConfig,
    /// Semantic stack size n per training mask.
    pub stack_size: usize,
    pub train_stacks: usize,
    pub test_source: usize,
    pub test_target: usize,
    pub source_domain: DomainParams,
    pub target_domain: DomainParams,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.mask.validate()?;
        if self.stack_size < 2 {
            return Err(SynthError::Invalid("stack_size must be >= 2".into()));
        }
        if self.train_stacks == 0 || self.test_source == 0 || self.test_target == 0 {
            return Err(SynthError::Invalid("split sizes must be >= 1".into()));
        }
        self.source_domain.validate(self.mask.num_classes)?;
        self.target_domain.validate(self.mask.num_classes)?;
        Ok(())
    }

    /// Desk-scale default: 64x64, K=4, 200 training stacks of n=16,
    /// 50 + 50 test images.
    pub fn default_desk() -> Self {
        let num_classes = 4;
        Self {
            mask: MaskConfig {
                height: 64,
                width: 64,
                num_classes,
                shapes_per_class: 2,
            },
            stack_size: 16,
            train_stacks: 200,
            test_source: 50,
            test_target: 50,
            source_domain: DomainParams::default_source(num_classes),
            target_domain: DomainParams::default_target(num_classes),
        }
    }
}

/// In-memory dataset: training stacks plus labelled single-image test
/// splits for the source and shifted target domains.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cfg: DatasetConfig,
    pub seed: u64,
    pub train: Vec<ImageStack>,
    pub test_source: Vec<(Vec<f32>, SegmentationMask)>,
    pub test_target: Vec<(Vec<f32>, SegmentationMask)>,
}

// Salt ranges keep train/test mask substreams disjoint by construction.
const SALT_TRAIN: u64 = 0x1000_0000;
const SALT_TEST_SOURCE: u64 = 0x2000_0000;
const SALT_TEST_TARGET: u64 = 0x3000_0000;

/// Pure function of (cfg, seed): fresh masks per split, source renders for
/// train/test_source, target renders for test_target.
pub fn gen_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let data_rng = Rng::new(seed, streams::DATA);

    let mut train = Vec::with_capacity(cfg.train_stacks);
    for i in 0..cfg.train_stacks {
        let mut mask_rng = data_rng.child(SALT_TRAIN + i as u64);
        let mask = gen_mask(&mut mask_rng, &cfg.mask)?;
        let stack_rng = data_rng.child(SALT_TRAIN + 0x0800_0000 + i as u64);
        train.push(gen_stack(&mask, &cfg.source_domain, cfg.stack_size, &stack_rng)?);
    }

    let render_split = |salt: u64, count: usize, dp: &DomainParams| -> Result<Vec<(Vec<f32>, SegmentationMask)>, SynthError> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut mask_rng = data_rng.child(salt + i as u64);
            let mask = gen_mask(&mut mask_rng, &cfg.mask)?;
            let mut r = data_rng.child(salt + 0x0800_0000 + i as u64);
            let img = render(&mask, dp, &mut r)?;
            out.push((img, mask));
        }
        Ok(out)
    };
    let test_source = render_split(SALT_TEST_SOURCE, cfg.test_source, &cfg.source_domain)?;
    let test_target = render_split(SALT_TEST_TARGET, cfg.test_target, &cfg.target_domain)?;

    Ok(Dataset {
        cfg: cfg.clone(),
        seed,
        train,
        test_source,
        test_target,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub cfg: DatasetConfig,
    pub seed: u64,
    pub rng_algorithm: String,
    pub train: Vec<String>,
    pub test_source: Vec<String>,
    pub test_target: Vec<String>,
    /// Per-stack member seeds, keyed by id.
    pub stack_seeds: BTreeMap<String, Vec<u64>>,
}

fn write_pgm(path: &Path, mask: &SegmentationMask) -> Result<(), SynthError> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend_from_slice(&mask.labels);
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_pgm(path: &Path, num_classes: u8) -> Result<SegmentationMask, SynthError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let text_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, b)| b[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| SynthError::Corrupt(format!("{}: bad PGM header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..text_end])
        .map_err(|_| SynthError::Corrupt(format!("{}: bad PGM header", path.display())))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(SynthError::Corrupt(format!("{}: not a P5 PGM", path.display())));
    }
    let dims = lines
        .next()
        .ok_or_else(|| SynthError::Corrupt(format!("{}: bad PGM dims", path.display())))?;
    let mut it = dims.split_whitespace();
    let w: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SynthError::Corrupt(format!("{}: bad width", path.display())))?;
    let h: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SynthError::Corrupt(format!("{}: bad height", path.display())))?;
    let labels = bytes[text_end + 1..].to_vec();
    SegmentationMask::new(h, w, num_classes, labels)
}

fn write_f32(path: &Path, data: &[f32]) -> Result<(), SynthError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>, SynthError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(SynthError::Corrupt(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write the dataset directory layout:
/// `masks/<id>.pgm`, `stacks/<id>/<k>.f32`, `meta.json`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), SynthError> {
    let masks_dir = dir.join("masks");
    let stacks_dir = dir.join("stacks");
    fs::create_dir_all(&masks_dir).map_err(|e| io_err(&masks_dir, e))?;
    fs::create_dir_all(&stacks_dir).map_err(|e| io_err(&stacks_dir, e))?;

    let mut meta = DatasetMeta {
        cfg: ds.cfg.clone(),
        seed: ds.seed,
        rng_algorithm: crate::rng::RNG_ALGORITHM.to_string(),
        train: Vec::new(),
        test_source: Vec::new(),
        test_target: Vec::new(),
        stack_seeds: BTreeMap::new(),
    };

    for (i, stack) in ds.train.iter().enumerate() {
        let id = format!("train_{:04}", i);
        write_pgm(&masks_dir.join(format!("{}.pgm", id)), &stack.mask)?;
        let sd = stacks_dir.join(&id);
        fs::create_dir_all(&sd).map_err(|e| io_err(&sd, e))?;
        for (k, img) in stack.images.iter().enumerate() {
            write_f32(&sd.join(format!("{}.f32", k)), img)?;
        }
        meta.stack_seeds.insert(id.clone(), stack.seeds.clone());
        meta.train.push(id);
    }
    let write_split = |prefix: &str,
                           items: &[(Vec<f32>, SegmentationMask)],
                           list: &mut Vec<String>|
     -> Result<(), SynthError> {
        for (i, (img, mask)) in items.iter().enumerate() {
            let id = format!("{}_{:04}", prefix, i);
            write_pgm(&masks_dir.join(format!("{}.pgm", id)), mask)?;
            let sd = stacks_dir.join(&id);
            fs::create_dir_all(&sd).map_err(|e| io_err(&sd, e))?;
            write_f32(&sd.join("0.f32"), img)?;
            list.push(id);
        }
        Ok(())
    };
    let mut test_source_ids = Vec::new();
    let mut test_target_ids = Vec::new();
    write_split("src", &ds.test_source, &mut test_source_ids)?;
    write_split("tgt", &ds.test_target, &mut test_target_ids)?;
    meta.test_source = test_source_ids;
    meta.test_target = test_target_ids;

    let meta_path = dir.join("meta.json");
    let mut f = fs::File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    f.write_all(json.as_bytes()).map_err(|e| io_err(&meta_path, e))?;
    f.write_all(b"\n").map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let meta_path = dir.join("meta.json");
    let meta_str = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_str)
        .map_err(|e| SynthError::Corrupt(format!("meta.json: {}", e)))?;
    let cfg = meta.cfg.clone();
    let pixels = cfg.mask.height * cfg.mask.width;
    let k = cfg.mask.num_classes;

    let mut train = Vec::with_capacity(meta.train.len());
    for id in &meta.train {
        let mask = read_pgm(&dir.join("masks").join(format!("{}.pgm", id)), k)?;
        let mut images = Vec::with_capacity(cfg.stack_size);
        for m in 0..cfg.stack_size {
            images.push(read_f32(&dir.join("stacks").join(id).join(format!("{}.f32", m)), pixels)?);
        }
        let seeds = meta.stack_seeds.get(id).cloned().unwrap_or_default();
        train.push(ImageStack { mask, images, seeds });
    }
    let load_split = |ids: &[String]| -> Result<Vec<(Vec<f32>, SegmentationMask)>, SynthError> {
        ids.iter()
            .map(|id| {
                let mask = read_pgm(&dir.join("masks").join(format!("{}.pgm", id)), k)?;
                let img = read_f32(&dir.join("stacks").join(id).join("0.f32"), pixels)?;
                Ok((img, mask))
            })
            .collect()
    };
    let test_source = load_split(&meta.test_source)?;
    let test_target = load_split(&meta.test_target)?;
    Ok(Dataset {
        cfg,
        seed: meta.seed,
        train,
        test_source,
        test_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_cfg() -> MaskConfig {
        MaskConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            shapes_per_class: 2,
        }
    }

    #[test]
    fn gen_mask_labels_in_range() {
        let mut rng = Rng::new(5, 0);
        let m = gen_mask(&mut rng, &mask_cfg()).unwrap();
        assert!(m.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn gen_mask_deterministic() {
        let a = gen_mask(&mut Rng::new(5, 3), &mask_cfg()).unwrap();
        let b = gen_mask(&mut Rng::new(5, 3), &mask_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn most_masks_contain_all_classes() {
        let cfg = mask_cfg();
        let mut full = 0;
        for seed in 0..100u64 {
            let m = gen_mask(&mut Rng::new(seed, 0), &cfg).unwrap();
            if (1..4).all(|c| m.class_present(c)) {
                full += 1;
            }
        }
        assert!(full >= 95, "only {} of 100 masks had all classes", full);
    }

    #[test]
    fn noiseless_render_is_exact_class_constants() {
        let mut rng = Rng::new(1, 0);
        let mask = gen_mask(&mut rng, &mask_cfg()).unwrap();
        let dp = DomainParams::noiseless(vec![0.1, 0.4, 0.6, 0.9]);
        let img = render(&mask, &dp, &mut Rng::new(2, 0)).unwrap();
        for (v, &l) in img.iter().zip(&mask.labels) {
            assert_eq!(*v, dp.class_intensity[l as usize] as f32);
        }
    }

    #[test]
    fn render_deterministic_and_in_range() {
        let mut rng = Rng::new(1, 0);
        let mask = gen_mask(&mut rng, &mask_cfg()).unwrap();
        let dp = DomainParams::default_source(4);
        let a = render(&mask, &dp, &mut Rng::new(7, 9)).unwrap();
        let b = render(&mask, &dp, &mut Rng::new(7, 9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    }

    #[test]
    fn source_and_target_foreground_differ() {
        let mut rng = Rng::new(1, 0);
        let mask = gen_mask(&mut rng, &mask_cfg()).unwrap();
        let fg_mean = |img: &[f32]| {
            let (mut s, mut n) = (0.0f64, 0usize);
            for (v, &l) in img.iter().zip(&mask.labels) {
                if l > 0 {
                    s += *v as f64;
                    n += 1;
                }
            }
            s / n as f64
        };
        let src = render(&mask, &DomainParams::noiseless(DomainParams::default_source(4).class_intensity), &mut Rng::new(3, 0)).unwrap();
        let tgt = render(&mask, &DomainParams::noiseless(DomainParams::default_target(4).class_intensity), &mut Rng::new(3, 0)).unwrap();
        assert!((fg_mean(&src) - fg_mean(&tgt)).abs() > 0.02);
        let si = DomainParams::default_source(4).class_intensity;
        let ti = DomainParams::default_target(4).class_intensity;
        let max_diff = si
            .iter()
            .zip(&ti)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.1, "class intensity shift {}", max_diff);
    }

    #[test]
    fn stack_members_differ() {
        let mut rng = Rng::new(1, 0);
        let mask = gen_mask(&mut rng, &mask_cfg()).unwrap();
        let dp = DomainParams::default_source(4);
        let stack = gen_stack(&mask, &dp, 16, &Rng::new(4, 0)).unwrap();
        assert_eq!(stack.images.len(), 16);
        for i in 0..stack.images.len() {
            for j in i + 1..stack.images.len() {
                assert_ne!(stack.images[i], stack.images[j], "members {} and {} identical", i, j);
            }
        }
    }

    #[test]
    fn stack_of_one_rejected_two_accepted() {
        let mut rng = Rng::new(1, 0);
        let mask = gen_mask(&mut rng, &mask_cfg()).unwrap();
        let dp = DomainParams::default_source(4);
        assert!(gen_stack(&mask, &dp, 1, &Rng::new(4, 0)).is_err());
        assert!(gen_stack(&mask, &dp, 2, &Rng::new(4, 0)).is_ok());
    }

    #[test]
    fn dataset_counts_and_roundtrip() {
        let mut cfg = DatasetConfig::default_desk();
        cfg.train_stacks = 3;
        cfg.test_source = 2;
        cfg.test_target = 2;
        cfg.stack_size = 2;
        let ds = gen_dataset(&cfg, 77).unwrap();
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.test_source.len(), 2);
        assert_eq!(ds.test_target.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train.len(), 3);
        assert_eq!(loaded.train[0].mask, ds.train[0].mask);
        assert_eq!(loaded.train[0].images, ds.train[0].images);
        assert_eq!(loaded.test_target[1].0, ds.test_target[1].0);
    }

    #[test]
    fn dataset_is_pure_function_of_cfg_and_seed() {
        let mut cfg = DatasetConfig::default_desk();
        cfg.train_stacks = 2;
        cfg.test_source = 1;
        cfg.test_target = 1;
        cfg.stack_size = 2;
        let a = gen_dataset(&cfg, 5).unwrap();
        let b = gen_dataset(&cfg, 5).unwrap();
        assert_eq!(a.train[0].images, b.train[0].images);
        assert_eq!(a.test_source[0].0, b.test_source[0].0);
    }
}
