//! Procedurally generated figure/caption corpus of colored shapes.
//!
//! Each figure shows one filled shape on a white background; its caption
//! names the shape and the color among filler words. Records cycle through
//! the shape × color grid, so with at most one record per combination every
//! negative caption names a wrong shape or a wrong color, which makes the
//! correspondence task separable by construction.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embeddings::{EmbeddingTable, PretrainedTables, TableKind};
use super::record::{tokenize, write_manifest, CorpusRecord};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

pub const COLORS: [(&str, [u8; 3]); 5] = [
    ("red", [220, 30, 30]),
    ("green", [30, 170, 40]),
    ("blue", [30, 60, 220]),
    ("orange", [240, 150, 20]),
    ("purple", [140, 40, 170]),
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether the pixel center `(x, y)` lies inside the shape centered at
    /// `(cx, cy)` with half-extent `r`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Triangle => {
                // Apex up; base at cy + r.
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Cross => {
                let arm = r * 0.35;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

const TEMPLATES: [&str; 4] = [
    "Figure {n}: a {color} {shape} drawn on a white background.",
    "The plot shows one {color} {shape} near the {place}.",
    "Schematic of a single {shape}, colored {color}, placed {place}.",
    "Illustration: {color} {shape} ({place} region) used as a toy example.",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub records: usize,
    /// Number of shape kinds used (1–4); also the number of class labels.
    pub shapes: usize,
    /// Number of colors used (1–5).
    pub colors: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl SynthConfig {
    /// 20 records covering all 4 × 5 shape/color combinations once.
    pub fn overfit(seed: u64) -> Self {
        Self {
            records: 20,
            shapes: 4,
            colors: 5,
            image_size: 32,
            seed,
        }
    }

    /// Three shape classes, used for the labeled transfer experiments.
    pub fn labeled(records: usize, seed: u64) -> Self {
        Self {
            records,
            shapes: 3,
            colors: 5,
            image_size: 32,
            seed,
        }
    }
}

/// Records plus their in-memory figures (index-aligned).
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub records: Vec<CorpusRecord>,
    pub images: Vec<RgbImage>,
}

impl SynthCorpus {
    /// Writes `{id}.png` figures and `manifest.jsonl` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut records = self.records.clone();
        for (r, img) in records.iter_mut().zip(&self.images) {
            let path = dir.join(&r.image_path);
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        }
        // Keep image paths relative so the directory can be moved.
        for r in &mut records {
            r.image_path = r.image_path.file_name().map(Into::into).unwrap_or_default();
        }
        write_manifest(dir.join("manifest.jsonl"), &records)
    }
}

/// Generates the shapes corpus. Lemmas are the tokens themselves; shape and
/// color words carry `shape:*` / `color:*` concepts and "figure"/"plot"
/// words carry the generic `kg:figure` concept.
pub fn shapes_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    if !(1..=SHAPES.len()).contains(&config.shapes) || !(1..=COLORS.len()).contains(&config.colors) {
        return Err(Error::Config(format!(
            "shapes must be 1–{} and colors 1–{}",
            SHAPES.len(),
            COLORS.len()
        )));
    }
    if config.image_size < 8 {
        return Err(Error::Config("synthetic figures need at least 8 pixels per side".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let places = ["center", "left", "right", "top", "bottom"];
    let size = f64::from(config.image_size);
    let mut records = Vec::with_capacity(config.records);
    let mut images = Vec::with_capacity(config.records);
    for i in 0..config.records {
        let shape = SHAPES[i % config.shapes];
        let (color, rgb) = COLORS[(i / config.shapes) % config.colors];
        let r = size * rng.gen_range(0.18..0.28);
        let cx = rng.gen_range(r + 1.0..size - r - 1.0);
        let cy = rng.gen_range(r + 1.0..size - r - 1.0);
        let img = RgbImage::from_fn(config.image_size, config.image_size, |x, y| {
            if shape.contains(f64::from(x) + 0.5, f64::from(y) + 0.5, cx, cy, r) {
                Rgb(rgb)
            } else {
                Rgb([255, 255, 255])
            }
        });
        let place = places.choose(&mut rng).copied().unwrap_or("center");
        let caption = TEMPLATES[rng.gen_range(0..TEMPLATES.len())]
            .replace("{n}", &(i + 1).to_string())
            .replace("{color}", color)
            .replace("{shape}", shape.name())
            .replace("{place}", place);
        let tokens = tokenize(&caption);
        let concepts = tokens
            .iter()
            .map(|t| match t.as_str() {
                t if t == shape.name() => vec![format!("shape:{t}")],
                t if t == color => vec![format!("color:{t}")],
                "figure" | "plot" | "schematic" | "illustration" => vec!["kg:figure".to_string()],
                _ => Vec::new(),
            })
            .collect();
        let id = format!("shape{i:04}");
        records.push(CorpusRecord {
            image_path: format!("{id}.png").into(),
            id,
            lemmas: Some(tokens.clone()),
            concepts: Some(concepts),
            tokens,
            label: Some(shape.name().to_string()),
            visual_feature: None,
        });
        images.push(img);
    }
    Ok(SynthCorpus { records, images })
}

/// Random pretrained tables covering the corpus: a word table over every
/// token, a lemma table over every lemma and a concept table over every
/// concept id, each of dimension `dim` with values uniform in ±0.5.
pub fn synthetic_tables(records: &[CorpusRecord], dim: usize, seed: u64) -> Result<PretrainedTables> {
    let mut words = BTreeSet::new();
    let mut lemmas = BTreeSet::new();
    let mut concepts = BTreeSet::new();
    for r in records {
        words.extend(r.tokens.iter().cloned());
        lemmas.extend(r.lemmas.iter().flatten().cloned());
        concepts.extend(r.concepts.iter().flatten().flatten().cloned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |kind: TableKind, keys: BTreeSet<String>| -> Result<EmbeddingTable> {
        let mut t = EmbeddingTable::new(kind, dim)?;
        for k in keys {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
            t.insert(k, &v)?;
        }
        Ok(t)
    };
    Ok(PretrainedTables {
        word: Some(build(TableKind::Word, words)?),
        lemma: Some(build(TableKind::Lemma, lemmas)?),
        concept: Some(build(TableKind::Concept, concepts)?),
    })
}
