//! Desk-scale synthetic data: detections whose features are a noisy category
//! one-hot, expressions naming one to three categories, ground-truth regions
//! and an embedding table with orthogonal category vectors.
//!
//! Images are a 5×5 grid of 100px cells. Ground-truth objects sit in distinct
//! cells and each gets tight detections (IoU > 0.5); background false
//! positives fill other cells, so they never hit a ground-truth object.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::ingest::{
    write_detection_dump, write_embeddings, write_expressions, write_regions, DetectionRecord, EmbeddingTable,
    ExpressionRecord, GroundTruthRegion, ImageDetections, Split,
};

pub const CATEGORY_NAMES: [&str; 8] = ["person", "dog", "cat", "car", "bus", "chair", "cup", "bottle"];
const GRID: usize = 5;
const CELL: f64 = 100.0;
/// Non-category words used by the templates.
const FILLER: [&str; 5] = ["the", "next", "to", "between", "and"];

pub const DETECTIONS_FILE: &str = "detections.tsv";
pub const EXPRESSIONS_FILE: &str = "expressions.tsv";
pub const REGIONS_FILE: &str = "regions.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_images: usize,
    pub eval_images: usize,
    pub categories: usize,
    pub boxes_per_image: usize,
    /// Standard deviation of the Gaussian feature noise.
    pub noise: f64,
    pub seed: u64,
    pub expressions_per_image: usize,
    pub embedding_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_images: 200,
            eval_images: 50,
            categories: 8,
            boxes_per_image: 20,
            noise: 0.1,
            seed: 7,
            expressions_per_image: 2,
            embedding_dim: 300,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_images + self.eval_images == 0
            || self.categories == 0
            || self.boxes_per_image == 0
            || self.expressions_per_image == 0
        {
            return Err(Error::Config(
                "image, category, box and expression counts must be >= 1".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        if self.categories + FILLER.len() > self.embedding_dim {
            return Err(Error::Config(format!(
                "{} categories need an embedding dimension of at least {}",
                self.categories,
                self.categories + FILLER.len()
            )));
        }
        Ok(())
    }
}

pub fn category_name(k: usize) -> String {
    CATEGORY_NAMES
        .get(k)
        .map_or_else(|| format!("thing{k}"), |s| s.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub feature_dim: usize,
    pub detections: Vec<ImageDetections>,
    pub expressions: Vec<ExpressionRecord>,
    pub regions: Vec<GroundTruthRegion>,
    pub embeddings: EmbeddingTable,
}

/// Paths of a generated dataset directory.
#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub detections: PathBuf,
    pub expressions: PathBuf,
    pub regions: PathBuf,
    pub embeddings: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        SynthPaths {
            detections: d.join(DETECTIONS_FILE),
            expressions: d.join(EXPRESSIONS_FILE),
            regions: d.join(REGIONS_FILE),
            embeddings: d.join(EMBEDDINGS_FILE),
        }
    }
}

impl SynthData {
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<SynthPaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = SynthPaths::in_dir(dir);
        write_detection_dump(&p.detections, self.feature_dim, &self.detections)?;
        write_expressions(&p.expressions, &self.expressions)?;
        write_regions(&p.regions, &self.regions)?;
        write_embeddings(&p.embeddings, &self.embeddings)?;
        Ok(p)
    }
}

fn cell_box(rng: &mut ChaCha8Rng, cell: usize) -> BBox {
    let (cx, cy) = ((cell % GRID) as f64 * CELL, (cell / GRID) as f64 * CELL);
    let w = rng.random_range(50.0..90.0);
    let h = rng.random_range(50.0..90.0);
    let x = cx + rng.random_range(0.0..CELL - w);
    let y = cy + rng.random_range(0.0..CELL - h);
    BBox::new(round1(x), round1(y), round1(x + w), round1(y + h)).expect("positive size")
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// A detection of `gt` with IoU above 0.6.
fn jitter(rng: &mut ChaCha8Rng, gt: &BBox) -> BBox {
    let (w, h) = (gt.width(), gt.height());
    loop {
        let mut d = |s: f64| round1(rng.random_range(-0.1..0.1) * s);
        let b = BBox::new(gt.x1 + d(w), gt.y1 + d(h), gt.x2 + d(w), gt.y2 + d(h));
        if let Ok(b) = b {
            if iou(&b, gt) > 0.6 {
                return b;
            }
        }
    }
}

fn feature(rng: &mut ChaCha8Rng, category: usize, dim: usize, noise: &Option<Normal<f64>>) -> Vec<f64> {
    let mut f = vec![0.0; dim];
    f[category] = 1.0;
    if let Some(n) = noise {
        f.iter_mut().for_each(|x| *x += n.sample(rng));
    }
    f
}

fn confidence(rng: &mut ChaCha8Rng) -> f64 {
    (rng.random_range(0.3..1.0f64) * 1000.0).round() / 1000.0
}

/// Deterministic in `cfg` (including the seed).
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("valid sigma"));
    let dim = cfg.categories;
    let mut detections = Vec::new();
    let mut expressions = Vec::new();
    let mut regions = Vec::new();

    for i in 0..cfg.train_images + cfg.eval_images {
        let split = if i < cfg.train_images { Split::Train } else { Split::Val };
        let image_id = format!("img{i:04}");
        let n_obj = rng.random_range(2..=4).min(cfg.categories).min(cfg.boxes_per_image);
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        cells.shuffle(&mut rng);
        let mut cats: Vec<usize> = (0..cfg.categories).collect();
        cats.shuffle(&mut rng);
        let cats = &cats[..n_obj];

        let objects: Vec<(usize, BBox)> = cats
            .iter()
            .zip(&cells)
            .map(|(&c, &cell)| (c, cell_box(&mut rng, cell)))
            .collect();
        let tp_per = if cfg.boxes_per_image >= 2 * n_obj { 2 } else { 1 };
        let mut records = Vec::with_capacity(cfg.boxes_per_image);
        for (k, &(c, gt)) in objects.iter().enumerate() {
            regions.push(GroundTruthRegion {
                region_id: format!("{image_id}_r{k}"),
                image_id: image_id.clone(),
                bbox: gt,
                category_name: category_name(c),
            });
            for _ in 0..tp_per {
                records.push((c, jitter(&mut rng, &gt)));
            }
        }
        let free = &cells[n_obj..];
        let mut f = 0;
        while records.len() < cfg.boxes_per_image {
            let c = rng.random_range(0..cfg.categories);
            records.push((c, cell_box(&mut rng, free[f % free.len()])));
            f += 1;
        }
        records.shuffle(&mut rng);
        detections.push(ImageDetections {
            image_id: image_id.clone(),
            records: records
                .into_iter()
                .map(|(c, bbox)| DetectionRecord {
                    bbox,
                    category_id: c as i64,
                    category_name: category_name(c),
                    confidence: confidence(&mut rng),
                    feature: feature(&mut rng, c, dim, &noise),
                })
                .collect(),
        });

        for j in 0..cfg.expressions_per_image {
            let (ref_cat, ref_box) = objects[j % n_obj];
            let others: Vec<usize> = (0..n_obj).filter(|&k| k != j % n_obj).map(|k| objects[k].0).collect();
            let n_ctx = rng.random_range(0..=others.len().min(2));
            let ref_word = category_name(ref_cat);
            let (tokens, tags): (Vec<String>, Vec<&str>) = match n_ctx {
                0 => (vec!["the".into(), ref_word], vec!["DET", "NOUN"]),
                1 => (
                    vec![
                        "the".into(),
                        ref_word,
                        "next".into(),
                        "to".into(),
                        "the".into(),
                        category_name(others[0]),
                    ],
                    vec!["DET", "NOUN", "ADV", "ADP", "DET", "NOUN"],
                ),
                _ => (
                    vec![
                        "the".into(),
                        ref_word,
                        "between".into(),
                        "the".into(),
                        category_name(others[0]),
                        "and".into(),
                        "the".into(),
                        category_name(others[1]),
                    ],
                    vec!["DET", "NOUN", "ADP", "DET", "NOUN", "CCONJ", "DET", "NOUN"],
                ),
            };
            expressions.push(ExpressionRecord {
                expression_id: format!("{image_id}_e{j}"),
                image_id: image_id.clone(),
                tokens,
                pos_tags: Some(tags.into_iter().map(String::from).collect()),
                referent: ref_box,
                split,
            });
        }
    }

    let mut embeddings = EmbeddingTable::new(cfg.embedding_dim);
    let unit = |k: usize| {
        let mut v = vec![0.0; cfg.embedding_dim];
        v[k] = 1.0;
        v
    };
    for c in 0..cfg.categories {
        embeddings.insert(category_name(c), unit(c))?;
    }
    for (k, w) in FILLER.iter().enumerate() {
        embeddings.insert(*w, unit(cfg.categories + k))?;
    }

    Ok(SynthData {
        feature_dim: dim,
        detections,
        expressions,
        regions,
        embeddings,
    })
}
