//! Dataset ingestion, procedural toy domains, few-shot sampling and image
//! persistence.
//!
//! The toy benchmark pairs a colourful *source* domain of filled geometric
//! shapes with a related *target* domain that draws the same geometry as a
//! grayscale stroke sketch. Both share the latent factors (shape kind,
//! position, size), so source/target correspondence is meaningful.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageBuffer, Rgb};
use ndarray::{s, Array3, Array4};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, Error, Result};
use crate::models::{ImageBatch, Provenance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// Rendering style of a procedural domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Stroke width as a fraction of the shape size; 0 renders filled shapes.
    pub stroke: f64,
    pub grayscale: bool,
    /// Background level in [-1, 1] (midpoint of the random range for colour).
    pub background: f64,
    /// Shape/ink level for grayscale styles.
    pub ink: f64,
}

impl StyleParams {
    pub fn source() -> Self {
        Self { stroke: 0.0, grayscale: false, background: -0.7, ink: 0.0 }
    }

    pub fn target() -> Self {
        Self { stroke: 0.6, grayscale: true, background: 0.3, ink: -0.7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetKind {
    ImageFolder { root: PathBuf },
    Synthetic { seed: u64, domain: Domain, count: usize, style: StyleParams },
}

/// Description of a dataset; materialized with [`Dataset::load`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Fraction of images assigned to the eval split.
    pub eval_fraction: f64,
    pub resolution: usize,
    pub channels: usize,
}

/// Latent factors of one procedural image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    /// 0 = disk, 1 = square, 2 = triangle
    pub kind: u8,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub hue: f64,
    pub shade: f64,
}

impl Factors {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            kind: rng.random_range(0..3),
            cx: rng.random_range(0.3..0.7),
            cy: rng.random_range(0.3..0.7),
            size: rng.random_range(0.14..0.3),
            hue: rng.random_range(0.0..1.0),
            shade: rng.random_range(-0.15..0.15),
        }
    }

    /// Discrete label combining kind, position quadrant and size bin
    /// (24 classes).
    pub fn label(&self) -> usize {
        let quad = (self.cx >= 0.5) as usize + 2 * (self.cy >= 0.5) as usize;
        let big = (self.size >= 0.22) as usize;
        (self.kind as usize * 4 + quad) * 2 + big
    }

    fn inside(&self, u: f64, v: f64, scale: f64) -> bool {
        let r = self.size * scale;
        if r <= 0.0 {
            return false;
        }
        let (dx, dy) = (u - self.cx, v - self.cy);
        match self.kind {
            0 => dx * dx + dy * dy < r * r,
            1 => dx.abs().max(dy.abs()) < 0.85 * r,
            _ => {
                // upward triangle: apex at top, base below centre
                let top = -r;
                let base = 0.7 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half = 0.95 * r * (dy - top) / (base - top);
                dx.abs() < half
            }
        }
    }
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Renders one image (C, H, W) in [-1, 1] with 4x4 supersampling.
pub fn render(f: &Factors, style: &StyleParams, resolution: usize, channels: usize) -> Array3<f64> {
    const SS: usize = 4;
    let mut img = Array3::zeros((channels, resolution, resolution));
    let bg: Vec<f64> = if style.grayscale {
        vec![style.background; channels]
    } else {
        (0..channels).map(|c| (style.background + f.shade * (1.0 + c as f64 * 0.3)).clamp(-1.0, 1.0)).collect()
    };
    let fg: Vec<f64> = if style.grayscale {
        vec![style.ink; channels]
    } else {
        let rgb = hue_to_rgb(f.hue);
        (0..channels).map(|c| 0.1 + 0.9 * rgb[c % 3]).collect()
    };
    let half = style.stroke / 2.0;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut cover = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / resolution as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / resolution as f64;
                    let hit = if style.stroke > 0.0 {
                        f.inside(u, v, 1.0 + half) && !f.inside(u, v, 1.0 - half)
                    } else {
                        f.inside(u, v, 1.0)
                    };
                    cover += hit as usize;
                }
            }
            let a = cover as f64 / (SS * SS) as f64;
            for c in 0..channels {
                img[[c, y, x]] = (1.0 - a) * bg[c] + a * fg[c];
            }
        }
    }
    img
}

/// A materialized dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: ImageBatch,
    pub names: Vec<String>,
    pub splits: Vec<Split>,
    /// Present for procedural datasets.
    pub factors: Option<Vec<Factors>>,
    /// Undecodable files skipped while loading a folder.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        match &spec.kind {
            DatasetKind::Synthetic { seed, domain, count, style } => {
                let provenance = match domain {
                    Domain::Source => Provenance::RealSource,
                    Domain::Target => Provenance::RealTarget,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let factors: Vec<Factors> = (0..*count).map(|_| Factors::sample(&mut rng)).collect();
                let mut data = Array4::zeros((*count, spec.channels, spec.resolution, spec.resolution));
                for (i, f) in factors.iter().enumerate() {
                    data.slice_mut(s![i, .., .., ..]).assign(&render(f, style, spec.resolution, spec.channels));
                }
                let names = (0..*count).map(|i| format!("{i:06}")).collect();
                let splits = assign_splits(*count, spec.eval_fraction, *seed);
                Ok(Self { images: ImageBatch::new(data, provenance)?, names, splits, factors: Some(factors), skipped: 0 })
            }
            DatasetKind::ImageFolder { root } => {
                let mut parts = Vec::new();
                let mut names = Vec::new();
                let mut splits = Vec::new();
                let mut skipped = 0;
                for split in [Split::Train, Split::Eval] {
                    let dir = root.join(split.name());
                    if !dir.is_dir() {
                        continue;
                    }
                    let mut stream = ImageFolderStream::open(&dir, spec.resolution, spec.channels, 64)?;
                    for batch in stream.by_ref() {
                        let batch = batch?;
                        splits.extend(std::iter::repeat_n(split, batch.len()));
                        parts.push(batch);
                    }
                    skipped += stream.skipped;
                    names.extend(stream.names.iter().map(|n| format!("{}/{n}", split.name())));
                }
                if parts.is_empty() {
                    return Err(input_err(format!("no decodable images under {}", root.display())));
                }
                let refs: Vec<&ImageBatch> = parts.iter().collect();
                let images = ImageBatch::concat(&refs)?;
                Ok(Self { images, names, splits, factors: None, skipped })
            }
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(rows),
            names: rows.iter().map(|&i| self.names[i].clone()).collect(),
            splits: rows.iter().map(|&i| self.splits[i]).collect(),
            factors: self.factors.as_ref().map(|f| rows.iter().map(|&i| f[i]).collect()),
            skipped: 0,
        }
    }

    pub fn split(&self, split: Split) -> Dataset {
        self.subset(&self.indices_of(split))
    }

    /// Content hashes of every image (8-bit quantized pixels).
    pub fn hashes(&self) -> Vec<String> {
        image_hashes(&self.images)
    }

    /// Structured-text manifest: one `split/name sha256` line per image.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for ((name, split), h) in self.names.iter().zip(&self.splits).zip(self.hashes()) {
            let name = if name.contains('/') { name.clone() } else { format!("{}/{name}", split.name()) };
            out.push_str(&format!("{name} {h}\n"));
        }
        out
    }
}

fn assign_splits(count: usize, eval_fraction: f64, seed: u64) -> Vec<Split> {
    let n_eval = ((count as f64) * eval_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let eval: BTreeSet<usize> = index::sample(&mut rng, count, n_eval.min(count)).into_iter().collect();
    (0..count).map(|i| if eval.contains(&i) { Split::Eval } else { Split::Train }).collect()
}

/// Source and target specs of the toy benchmark, sharing the factor model.
pub fn synthesize_toy_domains(
    seed: u64,
    counts: (usize, usize),
    resolution: usize,
    channels: usize,
) -> (DatasetSpec, DatasetSpec) {
    let source = DatasetSpec {
        kind: DatasetKind::Synthetic { seed, domain: Domain::Source, count: counts.0, style: StyleParams::source() },
        eval_fraction: 0.2,
        resolution,
        channels,
    };
    let target = DatasetSpec {
        kind: DatasetKind::Synthetic {
            seed: seed.wrapping_add(0x9e37_79b9),
            domain: Domain::Target,
            count: counts.1,
            style: StyleParams::target(),
        },
        eval_fraction: 0.5,
        resolution,
        channels,
    };
    (source, target)
}

/// Shannon entropy (nats) of the factor labels.
pub fn label_entropy(factors: &[Factors]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for f in factors {
        *counts.entry(f.label()).or_default() += 1;
    }
    let n = factors.len() as f64;
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Uniform sample of `m` training-split images without replacement.
/// Returns the images and their dataset indices.
pub fn sample_few_shot(dataset: &Dataset, m: usize, seed: u64) -> Result<(ImageBatch, Vec<usize>)> {
    let pool = dataset.indices_of(Split::Train);
    if pool.len() < m {
        return Err(input_err(format!("dataset has {} training images, {m} requested", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = index::sample(&mut rng, pool.len(), m).into_iter().map(|k| pool[k]).collect();
    Ok((dataset.images.select(&picked), picked))
}

/// Fails when any image hash appears in both sets.
pub fn assert_disjoint(a: &ImageBatch, b: &ImageBatch) -> Result<()> {
    let ha: BTreeSet<String> = image_hashes(a).into_iter().collect();
    match image_hashes(b).into_iter().find(|h| ha.contains(h)) {
        Some(h) => Err(input_err(format!("image {h} appears in both the few-shot and evaluation sets"))),
        None => Ok(()),
    }
}

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn image_hashes(images: &ImageBatch) -> Vec<String> {
    images
        .data()
        .outer_iter()
        .map(|img| {
            let mut h = Sha256::new();
            h.update(img.iter().map(|&v| to_u8(v)).collect::<Vec<u8>>());
            h.finalize().iter().map(|b| format!("{b:02x}")).collect()
        })
        .collect()
}

fn to_rgb_image(img: ndarray::ArrayView3<f64>) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (c, h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(img[[ch.min(c - 1), y as usize, x as usize]]);
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes each image as `<dir>/<name>.png`.
pub fn save_pngs(images: &ImageBatch, dir: &Path, names: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (img, name) in images.data().outer_iter().zip(names) {
        to_rgb_image(img).save(dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// Tiles images into a grid PNG, `cols` per row, nearest-neighbour upscaled
/// by `scale`.
pub fn save_grid(images: &ImageBatch, cols: usize, scale: u32, path: &Path) -> Result<()> {
    if images.is_empty() {
        return Err(input_err("cannot draw an empty grid"));
    }
    let (_, h, w) = images.image_dim();
    let cols = cols.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let (cw, ch) = (w as u32 * scale + 2, h as u32 * scale + 2);
    let mut canvas = ImageBuffer::from_pixel(cols as u32 * cw, rows as u32 * ch, Rgb([255u8, 255, 255]));
    for (k, img) in images.data().outer_iter().enumerate() {
        let tile = to_rgb_image(img);
        let (ox, oy) = ((k % cols) as u32 * cw + 1, (k / cols) as u32 * ch + 1);
        for y in 0..h as u32 * scale {
            for x in 0..w as u32 * scale {
                canvas.put_pixel(ox + x, oy + y, *tile.get_pixel(x / scale, y / scale));
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    canvas.save(path)?;
    Ok(())
}

/// Streams a directory of images in filename order, `batch` at a time.
pub struct ImageFolderStream {
    files: Vec<PathBuf>,
    pos: usize,
    resolution: usize,
    channels: usize,
    batch: usize,
    /// Names (file stems) of the images yielded so far.
    pub names: Vec<String>,
    /// Files that failed to decode.
    pub skipped: usize,
}

impl ImageFolderStream {
    pub fn open(dir: &Path, resolution: usize, channels: usize, batch: usize) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Missing(dir.to_path_buf()));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(input_err(format!("image folder {} is empty", dir.display())));
        }
        Ok(Self { files, pos: 0, resolution, channels, batch: batch.max(1), names: Vec::new(), skipped: 0 })
    }

    fn decode(&self, path: &Path) -> Option<Array3<f64>> {
        let img = image::open(path).ok()?;
        let r = self.resolution as u32;
        let rgb = img.resize_exact(r, r, FilterType::Triangle).to_rgb8();
        let mut out = Array3::zeros((self.channels, self.resolution, self.resolution));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..self.channels {
                let v = if self.channels == 1 {
                    (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0 / 127.5 - 1.0
                } else {
                    from_u8(px[c % 3])
                };
                out[[c, y as usize, x as usize]] = v;
            }
        }
        Some(out)
    }
}

impl Iterator for ImageFolderStream {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut imgs = Vec::new();
        while imgs.len() < self.batch && self.pos < self.files.len() {
            let path = self.files[self.pos].clone();
            self.pos += 1;
            match self.decode(&path) {
                Some(img) => {
                    self.names.push(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
                    imgs.push(img);
                }
                None => {
                    log::warn!("skipping undecodable file {}", path.display());
                    self.skipped += 1;
                }
            }
        }
        if imgs.is_empty() {
            return None;
        }
        let views: Vec<_> = imgs.iter().map(|a| a.view().insert_axis(ndarray::Axis(0))).collect();
        let data = ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform image shapes");
        Some(ImageBatch::new(data, Provenance::RealTarget))
    }
}

/// Writes a dataset as `<root>/<split>/<name>.png` plus `manifest.txt`.
pub fn export_folder(dataset: &Dataset, root: &Path) -> Result<()> {
    for split in [Split::Train, Split::Eval] {
        let part = dataset.split(split);
        if part.is_empty() {
            continue;
        }
        let names: Vec<String> =
            part.names.iter().map(|n| n.rsplit('/').next().unwrap_or(n).to_string()).collect();
        save_pngs(&part.images, &root.join(split.name()), &names)?;
    }
    fs::write(root.join("manifest.txt"), dataset.manifest())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> (Dataset, Dataset) {
        let (s, t) = synthesize_toy_domains(seed, (200, 100), 16, 3);
        (Dataset::load(&s).unwrap(), Dataset::load(&t).unwrap())
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let (a, _) = small(7);
        let (b, _) = small(7);
        assert_eq!(a.images, b.images);
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (c, _) = small(8);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let (s, _) = small(1);
        let train = s.indices_of(Split::Train);
        let eval = s.indices_of(Split::Eval);
        assert_eq!(train.len() + eval.len(), s.len());
        assert_eq!(eval.len(), 40);
        assert!(train.iter().all(|i| !eval.contains(i)));
    }

    #[test]
    fn target_is_grayscale_stroke() {
        let (_, t) = small(2);
        let img = t.images.data();
        for n in 0..5 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(img[[n, 0, y, x]], img[[n, 2, y, x]]);
                }
            }
            // mostly background with some ink
            let dark = img.slice(s![n, 0, .., ..]).iter().filter(|v| **v < 0.0).count();
            assert!(dark > 3 && dark < 128, "{dark}");
        }
    }

    #[test]
    fn few_shot_sampling() {
        let (_, t) = small(3);
        let (shots, idx) = sample_few_shot(&t, 10, 5).unwrap();
        assert_eq!(shots.len(), 10);
        assert!(idx.iter().all(|&i| t.splits[i] == Split::Train));
        let (again, idx2) = sample_few_shot(&t, 10, 5).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(shots, again);
        assert!(assert_disjoint(&shots, &t.split(Split::Eval).images).is_ok());
        assert!(assert_disjoint(&shots, &shots).is_err());
        let all = t.indices_of(Split::Train).len();
        let (full, fidx) = sample_few_shot(&t, all, 1).unwrap();
        assert_eq!(full.len(), all);
        let mut sorted = fidx.clone();
        sorted.sort();
        assert_eq!(sorted, t.indices_of(Split::Train));
        assert!(sample_few_shot(&t, all + 1, 1).is_err());
    }

    #[test]
    fn source_has_more_factor_entropy_than_a_few_shot_subset() {
        let (s, _) = small(4);
        let f = s.factors.as_ref().unwrap();
        let full = label_entropy(f);
        for seed in 0..20 {
            let (_, idx) = sample_few_shot(&s, 10, seed).unwrap();
            let sub: Vec<Factors> = idx.iter().map(|&i| f[i]).collect();
            assert!(label_entropy(&sub) < full);
        }
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = small(5);
        let part = s.subset(&[0, 1, 2, 3]);
        let names: Vec<String> = (0..4).map(|i| format!("img{i}")).collect();
        save_pngs(&part.images, &dir.path().join("train"), &names).unwrap();
        std::fs::write(dir.path().join("train").join("broken.png"), b"not an image").unwrap();
        let spec = DatasetSpec {
            kind: DatasetKind::ImageFolder { root: dir.path().to_path_buf() },
            eval_fraction: 0.0,
            resolution: 16,
            channels: 3,
        };
        let loaded = Dataset::load(&spec).unwrap();
        assert_eq!(loaded.len(), 4);
        assert_eq!(loaded.skipped, 1);
        let max_err = loaded
            .images
            .data()
            .iter()
            .zip(part.images.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 1.0 / 127.5 + 1e-12, "{max_err}");
        let again = Dataset::load(&spec).unwrap();
        assert_eq!(again.images, loaded.images);
        assert_eq!(again.names, vec!["train/img0", "train/img1", "train/img2", "train/img3"]);
    }

    #[test]
    fn empty_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ImageFolderStream::open(dir.path(), 16, 3, 4).is_err());
        assert!(matches!(ImageFolderStream::open(&dir.path().join("nope"), 16, 3, 4), Err(Error::Missing(_))));
    }
}
