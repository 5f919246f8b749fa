//! Preprocessed corpus: figure tensors and encoded captions.

use image::RgbImage;

use super::embeddings::PretrainedTables;
use super::image::{load_image, rgb_to_tensor, preprocess};
use super::record::CorpusRecord;
use super::vocab::{encode_caption, EncodedCaption, Vocab};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::par;

/// Records with their `[3, S, S]` figures (absent when every figure is
/// replaced by a precomputed feature) and `max_len` caption encodings.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<CorpusRecord>,
    pub images: Option<Vec<Tensor<f32>>>,
    pub captions: Vec<EncodedCaption>,
}

impl Dataset {
    /// Loads every figure from disk (in parallel) at `image_size` pixels.
    /// With `load_images == false` the figures are skipped, which is only
    /// useful together with precomputed visual features.
    pub fn load(
        records: Vec<CorpusRecord>,
        vocab: &Vocab,
        tables: &PretrainedTables,
        image_size: usize,
        max_len: usize,
        load_images: bool,
    ) -> Result<Self> {
        let images = if load_images {
            let loaded = par::map_range(records.len(), |i| load_image(&records[i].image_path, image_size));
            Some(loaded.into_iter().collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self::assemble(records, images, vocab, tables, max_len))
    }

    /// Builds a dataset from in-memory figures (index-aligned with records).
    pub fn from_images(
        records: Vec<CorpusRecord>,
        images: &[RgbImage],
        vocab: &Vocab,
        tables: &PretrainedTables,
        image_size: usize,
        max_len: usize,
    ) -> Self {
        let tensors = images
            .iter()
            .map(|img| {
                if img.width() as usize == image_size && img.height() as usize == image_size {
                    rgb_to_tensor(img)
                } else {
                    preprocess(&image::DynamicImage::ImageRgb8(img.clone()), image_size)
                }
            })
            .collect();
        Self::assemble(records, Some(tensors), vocab, tables, max_len)
    }

    fn assemble(
        records: Vec<CorpusRecord>,
        images: Option<Vec<Tensor<f32>>>,
        vocab: &Vocab,
        tables: &PretrainedTables,
        max_len: usize,
    ) -> Self {
        let captions = records.iter().map(|r| encode_caption(r, vocab, tables, max_len)).collect();
        Self {
            records,
            images,
            captions,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Restriction to the given record indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            images: self.images.as_ref().map(|im| indices.iter().map(|&i| im[i].clone()).collect()),
            captions: indices.iter().map(|&i| self.captions[i].clone()).collect(),
        }
    }

    /// Sorted distinct labels; an error names the first unlabeled record.
    pub fn labels(&self) -> Result<Vec<String>> {
        let mut labels = Vec::new();
        for r in &self.records {
            let label = r
                .label
                .as_ref()
                .ok_or_else(|| crate::Error::Config(format!("record {} has no label", r.id)))?;
            labels.push(label.clone());
        }
        labels.sort();
        labels.dedup();
        Ok(labels)
    }
}
