//! Activation heatmaps: spatial maps over figures and per-token saliency
//! over captions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::{tensor_to_rgb, Dataset};
use crate::error::{io_err, Error, Result};
use crate::model::trunks::{language_forward, vision_forward};
use crate::model::{FccModel, VisualSource};
use crate::nn::Mode;

/// Opacity of the heatmap drawn over a figure.
pub const OVERLAY_ALPHA: f32 = 0.5;

/// Min-max normalization to [0, 1]; a constant input maps to zeros.
pub fn normalize_min_max(values: &[f32]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Bilinear resampling of a row-major `h × w` map to `out_h × out_w`, with
/// pixel centers aligned.
pub fn upsample_bilinear(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |o: usize, out: usize, src: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * src as f32 / out as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(src - 1), x - x0 as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let at = |y: usize, x: usize| map[y * w + x];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Blue (0) → red (1) color ramp.
fn ramp(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// One feature's spatial activation over a figure.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionHeatmap {
    pub feature: usize,
    /// `[s, s]` pre-pool activation of the last vision block.
    pub raw: Tensor<f32>,
    /// `raw` min-max normalized to [0, 1].
    pub normalized: Tensor<f32>,
    /// Pooled feature value (the map's maximum).
    pub pooled: f32,
}

impl VisionHeatmap {
    /// `(row, column)` of the largest raw activation (first in row-major
    /// order on ties).
    pub fn peak(&self) -> (usize, usize) {
        let w = self.raw.shape()[1];
        let i = crate::training::argmax(self.raw.data());
        (i / w, i % w)
    }

    /// The normalized map resized to `size × size`.
    pub fn upsampled(&self, size: usize) -> Vec<f32> {
        let (h, w) = (self.raw.shape()[0], self.raw.shape()[1]);
        upsample_bilinear(self.normalized.data(), h, w, size, size)
    }

    /// The map upsampled to the figure's size and alpha-blended over it.
    pub fn overlay(&self, figure: &Tensor<f32>) -> RgbImage {
        let (h, w) = (figure.shape()[1], figure.shape()[2]);
        let heat = upsample_bilinear(
            self.normalized.data(),
            self.raw.shape()[0],
            self.raw.shape()[1],
            h,
            w,
        );
        let base = tensor_to_rgb(figure);
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = base.get_pixel(x, y);
            let c = ramp(heat[y as usize * w + x as usize]);
            let mix = |k: usize| {
                let v = (1.0 - OVERLAY_ALPHA) * f32::from(px[k]) / 255.0 + OVERLAY_ALPHA * c[k];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([mix(0), mix(1), mix(2)])
        })
    }

    /// The raw map as CSV, one row per line.
    pub fn csv(&self) -> String {
        let w = self.raw.shape()[1];
        let mut out = String::new();
        for row in self.raw.data().chunks(w) {
            let line: Vec<String> = row.iter().map(f32::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `{stem}.png` (overlay) and `{stem}.csv` (raw map) into `dir`.
    pub fn write(&self, figure: &Tensor<f32>, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let png = dir.join(format!("{stem}.png"));
        self.overlay(figure)
            .save(&png)
            .map_err(|e| Error::Image {
                path: png.clone(),
                detail: e.to_string(),
            })?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.csv()).map_err(io_err(&csv))
    }
}

fn check_feature(model: &FccModel, feature: usize) -> Result<()> {
    let f = model.arch.feature_dim();
    if feature >= f {
        return Err(Error::Config(format!("feature {feature} out of range (features: {f})")));
    }
    Ok(())
}

/// Spatial map of `feature` for a `[3, S, S]` figure.
pub fn vision_heatmap(model: &FccModel, figure: &Tensor<f32>, feature: usize) -> Result<VisionHeatmap> {
    check_feature(model, feature)?;
    if model.visual == VisualSource::Precomputed {
        return Err(Error::Config("the model uses precomputed visual features and has no vision network".into()));
    }
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, &|_| true);
    let x = tape.leaf(Tensor::stack(&[figure])?, false);
    let out = vision_forward(&mut tape, &model.params, &binding, &model.arch, x, Mode::Infer)?;
    let map = tape.value(out.last_map);
    let (s0, s1) = (map.shape()[2], map.shape()[3]);
    let plane = map.data()[feature * s0 * s1..(feature + 1) * s0 * s1].to_vec();
    let pooled = tape.value(out.features).data()[feature];
    Ok(VisionHeatmap {
        feature,
        normalized: Tensor::new([s0, s1], normalize_min_max(&plane))?,
        raw: Tensor::new([s0, s1], plane)?,
        pooled,
    })
}

/// Per-token saliency of a caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextHeatmap {
    pub features: Vec<usize>,
    /// Caption words, one per non-padding position.
    pub tokens: Vec<String>,
    /// Normalized score of every input position; padding positions are 0.
    pub scores: Vec<f32>,
}

impl TextHeatmap {
    /// Scores of the caption's own tokens.
    pub fn token_scores(&self) -> &[f32] {
        &self.scores[..self.tokens.len()]
    }

    /// `position,token,score` rows.
    pub fn csv(&self) -> String {
        let mut out = String::from("position,token,score\n");
        for (i, (t, s)) in self.tokens.iter().zip(&self.scores).enumerate() {
            let _ = writeln!(out, "{i},{t},{s}");
        }
        out
    }

    /// The caption with every token shaded by its score.
    pub fn html(&self) -> String {
        let mut out = String::from("<p style=\"font-family:sans-serif;line-height:1.8\">\n");
        for (t, s) in self.tokens.iter().zip(&self.scores) {
            let escaped = t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
            let _ = writeln!(
                out,
                "<span title=\"{s:.3}\" style=\"background:rgba(255,0,0,{s:.3});padding:2px\">{escaped}</span>"
            );
        }
        out.push_str("</p>\n");
        out
    }

    /// Writes `{stem}.csv` and `{stem}.html` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, body) in [("csv", self.csv()), ("html", self.html())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Saliency of every caption position for the sum of `features`: the norm
/// of that sum's gradient with respect to the position's combined
/// embedding, min-max normalized over the caption's tokens.
pub fn text_heatmap(model: &FccModel, data: &Dataset, row: usize, features: &[usize]) -> Result<TextHeatmap> {
    if features.is_empty() {
        return Err(Error::Config("select at least one feature".into()));
    }
    for &f in features {
        check_feature(model, f)?;
    }
    let caption = &data.captions[row];
    let combined = {
        let mut tape = Tape::new();
        let binding = model.params.bind(&mut tape, &|_| true);
        let v = model.combine(&mut tape, &binding, &[caption])?;
        tape.value(v).clone()
    };
    let (len, dim) = (model.arch.seq_len, model.arch.embed_dim);
    let mut tape = Tape::new();
    let binding = model.params.bind(&mut tape, &|_| true);
    let x = tape.leaf(combined, true);
    let out = language_forward(&mut tape, &model.params, &binding, &model.arch, x)?;
    let mut mask = vec![0.0f32; model.arch.feature_dim()];
    for &f in features {
        mask[f] = 1.0;
    }
    let mask = tape.leaf(Tensor::new([1, mask.len()], mask)?, false);
    let selected = tape.mul(out, mask)?;
    let total = tape.sum(selected)?;
    let grads = tape.backward(total)?;
    let g = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros([1, len, dim]));
    let words = caption.length.min(len);
    let norms: Vec<f32> = (0..words)
        .map(|p| g.data()[p * dim..(p + 1) * dim].iter().map(|v| v * v).sum::<f32>().sqrt())
        .collect();
    let mut scores = normalize_min_max(&norms);
    scores.resize(len, 0.0);
    Ok(TextHeatmap {
        features: features.to_vec(),
        tokens: data.records[row].tokens.iter().take(words).cloned().collect(),
        scores,
    })
}
