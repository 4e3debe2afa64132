//! Zero-shot evaluation of a model on a labelled image-caption split:
//! classification on the clean split and on shifted copies, retrieval in both
//! directions, and center-frame classification of short synthetic clips.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::metrics::{
    build_class_embeddings, center_frame, mean_top1_top5, retrieval, robustness_gap, round1,
    zero_shot_classify, ClassEmbedding, RECALL_KS,
};
use super::report::{Accuracy, EvalReport, VideoMetric, REPORT_SCHEMA_VERSION};
use crate::data::{to_unit_range, Record, Tokenizer};
use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

pub const REFERENCE: &str = "holdout";
pub const DEFAULT_TEMPLATES: [&str; 1] = ["a photo of a {}"];
const CHUNK: usize = 32;
const CLIP_FRAMES: usize = 5;

/// Distribution shifts applied to the reference split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    Noise,
    Contrast,
    Translate,
    Blur,
}

impl Shift {
    pub const ALL: [Shift; 4] = [Shift::Noise, Shift::Contrast, Shift::Translate, Shift::Blur];

    pub fn name(self) -> &'static str {
        match self {
            Shift::Noise => "holdout-noise",
            Shift::Contrast => "holdout-contrast",
            Shift::Translate => "holdout-shift",
            Shift::Blur => "holdout-blur",
        }
    }

    /// `image` is `[c, s, s]` in [-1, 1].
    pub fn apply<R: Rng>(self, image: &[f32], channels: usize, size: usize, rng: &mut R) -> Vec<f32> {
        match self {
            Shift::Noise => {
                let n = Normal::new(0.0f32, 0.3).expect("valid std");
                image.iter().map(|&x| (x + n.sample(rng)).clamp(-1.0, 1.0)).collect()
            }
            Shift::Contrast => image.iter().map(|&x| 0.4 * x).collect(),
            Shift::Translate => translate(image, channels, size, (size / 8).max(1) as isize),
            Shift::Blur => box_blur(image, channels, size),
        }
    }
}

/// Circular shift by `d` pixels along both axes.
fn translate(image: &[f32], channels: usize, s: usize, d: isize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    let wrap = |i: usize| (i as isize - d).rem_euclid(s as isize) as usize;
    for c in 0..channels {
        for y in 0..s {
            for x in 0..s {
                out[(c * s + y) * s + x] = image[(c * s + wrap(y)) * s + wrap(x)];
            }
        }
    }
    out
}

fn box_blur(image: &[f32], channels: usize, s: usize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let (mut acc, mut n) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..=(y + 1).min(s - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(s - 1) {
                        acc += image[(c * s + yy) * s + xx];
                        n += 1.0;
                    }
                }
                out[(c * s + y) * s + x] = acc / n;
            }
        }
    }
    out
}

/// A labelled split ready for evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    /// `[c, s, s]` in [-1, 1].
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
    pub captions: Vec<Vec<u8>>,
    pub image_size: usize,
    pub channels: usize,
}

impl EvalSet {
    pub fn from_records(records: &[Record], image_size: usize, channels: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("evaluation split is empty".into()));
        }
        let want = channels * image_size * image_size;
        if let Some(i) = records.iter().position(|r| r.image.len() != want) {
            return Err(Error::Input(format!(
                "record {i} has {} image bytes, expected {want}",
                records[i].image.len()
            )));
        }
        Ok(EvalSet {
            images: records
                .iter()
                .map(|r| r.image.iter().map(|&b| to_unit_range(b)).collect())
                .collect(),
            labels: records.iter().map(|r| r.class_id).collect(),
            captions: records.iter().map(|r| r.caption.clone()).collect(),
            image_size,
            channels,
        })
    }
}

pub fn embed_images(model: &ClipModel, images: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
    let cfg = &model.config.image;
    let per = cfg.channels * cfg.image_size * cfg.image_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        if let Some(bad) = chunk.iter().find(|i| i.len() != per) {
            return Err(Error::dim("embed_images", &[bad.len()], &[per]));
        }
        let flat: Vec<f32> = chunk.concat();
        let t = Tensor::new(flat, &[chunk.len(), cfg.channels, cfg.image_size, cfg.image_size])?;
        out.extend(model.embed_images(&t)?.rows());
    }
    Ok(out)
}

pub fn embed_captions<S: AsRef<[u8]>>(model: &ClipModel, captions: &[S]) -> Result<Vec<Vec<f32>>> {
    let tok = Tokenizer::new(model.config.text.context_length);
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(CHUNK) {
        let ids = tok.encode_batch(chunk);
        out.extend(model.embed_texts(&ids, chunk.len())?.rows());
    }
    Ok(out)
}

pub fn class_embeddings(
    model: &ClipModel,
    class_names: &[String],
    templates: &[String],
) -> Result<Vec<ClassEmbedding>> {
    build_class_embeddings(class_names, templates, |caps| embed_captions(model, caps))
}

/// Runs the full protocol. `seed` only drives the noise shift.
pub fn evaluate(
    model: &ClipModel,
    set: &EvalSet,
    class_names: &[String],
    templates: &[String],
    seed: u64,
) -> Result<EvalReport> {
    let classes = class_embeddings(model, class_names, templates)?;
    let classify = |images: &[Vec<f32>]| -> Result<Accuracy> {
        let emb = embed_images(model, images)?;
        let r = zero_shot_classify(&emb, &classes, Some(&set.labels))?;
        Ok(Accuracy::rounded(
            r.top1_acc.expect("labels given"),
            r.top5_acc,
        ))
    };

    let mut benchmarks = BTreeMap::new();
    let reference = classify(&set.images)?;
    benchmarks.insert(REFERENCE.to_string(), reference);
    let mut rng = seeds::rng(seed, stream::EVAL, 0);
    let mut variants = Vec::new();
    for shift in Shift::ALL {
        let shifted: Vec<Vec<f32>> = set
            .images
            .iter()
            .map(|im| shift.apply(im, set.channels, set.image_size, &mut rng))
            .collect();
        let acc = classify(&shifted)?;
        variants.push(acc.top1);
        benchmarks.insert(shift.name().to_string(), acc);
    }
    let gap = robustness_gap(reference.top1, &variants)?.rounded(reference.top1);

    // a caption is a match for every image carrying the same text
    let img_emb = embed_images(model, &set.images)?;
    let cap_emb = embed_captions(model, &set.captions)?;
    let mut by_text: BTreeMap<&[u8], Vec<usize>> = BTreeMap::new();
    for (i, c) in set.captions.iter().enumerate() {
        by_text.entry(c).or_default().push(i);
    }
    let caption_images: Vec<Vec<usize>> =
        set.captions.iter().map(|c| by_text[c.as_slice()].clone()).collect();
    let retrieval = retrieval(&img_emb, &cap_emb, &caption_images, &RECALL_KS)?;

    let step = (set.image_size / 32).max(1) as isize;
    let mid = (CLIP_FRAMES / 2) as isize;
    let centers: Vec<Vec<f32>> = set
        .images
        .iter()
        .map(|im| {
            let clip: Vec<Vec<f32>> = (0..CLIP_FRAMES as isize)
                .map(|k| translate(im, set.channels, set.image_size, (k - mid) * step))
                .collect();
            center_frame(&clip).cloned()
        })
        .collect::<Result<_>>()?;
    let v = classify(&centers)?;
    let top5 = v.top5.expect("labels given");
    let video = VideoMetric {
        frames_per_clip: CLIP_FRAMES,
        top1: v.top1,
        top5,
        mean_top1_top5: round1(mean_top1_top5(v.top1, top5)?),
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        reference: REFERENCE.into(),
        benchmarks,
        averaged_accuracy: gap.avg,
        delta_gap: gap.delta,
        retrieval: Some(retrieval),
        video: Some(video),
    })
}
