use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recall cut-offs reported for retrieval.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Prompt-ensembled text embedding of one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEmbedding {
    pub name: String,
    pub templates: Vec<String>,
    /// Unit norm.
    pub vector: Vec<f32>,
}

/// Rounds to one decimal, halves away from zero. The small guard absorbs
/// binary representation error in values such as `75.95`.
pub fn round1(x: f64) -> f64 {
    x.signum() * ((x.abs() * 10.0 + 0.5 + 1e-9).floor() / 10.0)
}

fn normalize(v: &[f32]) -> Result<Vec<f64>> {
    let n = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Input("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|&x| f64::from(x) / n).collect())
}

/// Fills every template with every class name, embeds the captions with
/// `embed` (one output row per caption), and averages the normalized rows
/// per class before renormalizing.
pub fn build_class_embeddings<F>(
    class_names: &[String],
    templates: &[String],
    mut embed: F,
) -> Result<Vec<ClassEmbedding>>
where
    F: FnMut(&[String]) -> Result<Vec<Vec<f32>>>,
{
    if class_names.is_empty() {
        return Err(Error::Input("class list is empty".into()));
    }
    if templates.is_empty() {
        return Err(Error::Input("need at least one prompt template".into()));
    }
    let mut out = Vec::with_capacity(class_names.len());
    for name in class_names {
        let captions: Vec<String> = templates.iter().map(|t| t.replace("{}", name)).collect();
        let rows = embed(&captions)?;
        if rows.len() != captions.len() {
            return Err(Error::dim("build_class_embeddings", &[rows.len()], &[captions.len()]));
        }
        let d = rows[0].len();
        let mut mean = vec![0.0f64; d];
        for r in &rows {
            if r.len() != d {
                return Err(Error::dim("build_class_embeddings", &[r.len()], &[d]));
            }
            for (m, x) in mean.iter_mut().zip(normalize(r)?) {
                *m += x;
            }
        }
        let mean: Vec<f32> = mean.iter().map(|&x| x as f32).collect();
        let unit = normalize(&mean)?;
        out.push(ClassEmbedding {
            name: name.clone(),
            templates: templates.to_vec(),
            vector: unit.iter().map(|&x| x as f32).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub predictions: Vec<usize>,
    /// Class indices ordered by descending score, at most five per image.
    pub top5: Vec<Vec<usize>>,
    /// Percentages, present when labels were given.
    pub top1_acc: Option<f64>,
    pub top5_acc: Option<f64>,
}

/// Indices sorted by descending score, ties toward the lower index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn cosine_matrix(queries: &[Vec<f32>], gallery: &[Vec<f32>], op: &'static str) -> Result<Vec<Vec<f64>>> {
    let d = gallery.first().map(Vec::len).unwrap_or(0);
    let g: Vec<Vec<f64>> = gallery
        .iter()
        .map(|v| {
            if v.len() != d {
                return Err(Error::dim(op, &[v.len()], &[d]));
            }
            normalize(v)
        })
        .collect::<Result<_>>()?;
    queries
        .iter()
        .map(|q| {
            if q.len() != d {
                return Err(Error::dim(op, &[q.len()], &[d]));
            }
            let q = normalize(q)?;
            Ok(g.iter().map(|c| c.iter().zip(&q).map(|(a, b)| a * b).sum()).collect())
        })
        .collect()
}

/// Classifies each image by cosine similarity to the class embeddings.
pub fn zero_shot_classify(
    images: &[Vec<f32>],
    classes: &[ClassEmbedding],
    labels: Option<&[u32]>,
) -> Result<Classification> {
    if classes.is_empty() {
        return Err(Error::Input("no class embeddings".into()));
    }
    let vecs: Vec<Vec<f32>> = classes.iter().map(|c| c.vector.clone()).collect();
    let sims = cosine_matrix(images, &vecs, "zero_shot_classify")?;
    let ranked: Vec<Vec<usize>> = sims.iter().map(|s| ranking(s)).collect();
    let predictions: Vec<usize> = ranked.iter().map(|r| r[0]).collect();
    let top5: Vec<Vec<usize>> = ranked.iter().map(|r| r[..r.len().min(5)].to_vec()).collect();
    let (mut top1_acc, mut top5_acc) = (None, None);
    if let Some(labels) = labels {
        if labels.len() != images.len() {
            return Err(Error::dim("zero_shot_classify", &[labels.len()], &[images.len()]));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes.len()) {
            return Err(Error::Input(format!("label {l} outside {} classes", classes.len())));
        }
        let n = images.len().max(1) as f64;
        let hit1 = predictions.iter().zip(labels).filter(|(p, &l)| **p == l as usize).count();
        let hit5 = top5
            .iter()
            .zip(labels)
            .filter(|(t, &l)| t.contains(&(l as usize)))
            .count();
        top1_acc = Some(100.0 * hit1 as f64 / n);
        top5_acc = Some(100.0 * hit5 as f64 / n);
    }
    Ok(Classification {
        predictions,
        top5,
        top1_acc,
        top5_acc,
    })
}

/// R@k over a `queries × gallery` similarity matrix: the percentage of
/// queries with a ground-truth item among their `k` highest-scoring gallery
/// entries (ties toward the lower gallery index).
pub fn recall_at_k(
    similarity: &[Vec<f64>],
    ground_truth: &[Vec<usize>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if similarity.len() != ground_truth.len() {
        return Err(Error::dim("recall_at_k", &[similarity.len()], &[ground_truth.len()]));
    }
    let width = similarity.first().map(Vec::len).unwrap_or(0);
    let mut best_rank = Vec::with_capacity(similarity.len());
    for (q, (row, gt)) in similarity.iter().zip(ground_truth).enumerate() {
        if row.len() != width {
            return Err(Error::dim("recall_at_k", &[row.len()], &[width]));
        }
        if gt.is_empty() {
            return Err(Error::Input(format!("query {q} has no ground-truth item")));
        }
        if let Some(g) = gt.iter().find(|&&g| g >= width) {
            return Err(Error::Input(format!("query {q} names gallery item {g} of {width}")));
        }
        let order = ranking(row);
        let rank = order.iter().position(|i| gt.contains(i)).expect("gt within gallery");
        best_rank.push(rank);
    }
    let n = best_rank.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, 100.0 * best_rank.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect())
}

/// Recall in both directions for paired image and text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    /// Image queries against the caption gallery.
    pub text_retrieval: BTreeMap<usize, f64>,
    /// Caption queries against the image gallery.
    pub image_retrieval: BTreeMap<usize, f64>,
}

/// `caption_images[j]` lists the images caption `j` describes; an image may
/// have several captions and a caption several images.
pub fn retrieval(
    images: &[Vec<f32>],
    captions: &[Vec<f32>],
    caption_images: &[Vec<usize>],
    ks: &[usize],
) -> Result<RetrievalTable> {
    if captions.len() != caption_images.len() {
        return Err(Error::dim("retrieval", &[captions.len()], &[caption_images.len()]));
    }
    let mut img_gt = vec![Vec::new(); images.len()];
    for (j, targets) in caption_images.iter().enumerate() {
        for &i in targets {
            img_gt
                .get_mut(i)
                .ok_or_else(|| Error::Input(format!("caption {j} points at missing image {i}")))?
                .push(j);
        }
    }
    if let Some(i) = img_gt.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("image query {i} has no caption")));
    }
    let i2t = cosine_matrix(images, captions, "retrieval")?;
    let t2i = cosine_matrix(captions, images, "retrieval")?;
    let t2i_gt: Vec<Vec<usize>> = caption_images.to_vec();
    if let Some(j) = t2i_gt.iter().position(Vec::is_empty) {
        return Err(Error::Input(format!("caption query {j} has no image")));
    }
    Ok(RetrievalTable {
        text_retrieval: recall_at_k(&i2t, &img_gt, ks)?,
        image_retrieval: recall_at_k(&t2i, &t2i_gt, ks)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub avg: f64,
    pub delta: f64,
}

impl Gap {
    /// Table presentation: average at one decimal and the gap taken against
    /// that printed average, so the two columns stay consistent.
    pub fn rounded(&self, reference: f64) -> Gap {
        let avg = round1(self.avg);
        Gap {
            avg,
            delta: round1(reference - avg),
        }
    }
}

/// Mean over the reference and its variants, and the reference minus it.
pub fn robustness_gap(reference: f64, variants: &[f64]) -> Result<Gap> {
    if variants.is_empty() {
        return Err(Error::Input("robustness gap needs at least one variant".into()));
    }
    if let Some(v) = std::iter::once(&reference)
        .chain(variants)
        .find(|v| !(0.0..=100.0).contains(*v))
    {
        return Err(Error::Input(format!("accuracy {v} outside [0, 100]")));
    }
    let avg = (reference + variants.iter().sum::<f64>()) / (variants.len() + 1) as f64;
    Ok(Gap {
        avg,
        delta: reference - avg,
    })
}

pub fn mean_top1_top5(top1: f64, top5: f64) -> Result<f64> {
    if top5 < top1 {
        return Err(Error::Input(format!("top-5 {top5} below top-1 {top1}")));
    }
    Ok((top1 + top5) / 2.0)
}

/// The frame at `floor(n / 2)`.
pub fn center_frame<T>(frames: &[T]) -> Result<&T> {
    frames
        .get(frames.len() / 2)
        .ok_or_else(|| Error::Input("video has no frames".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn embed_lookup(table: Vec<(&'static str, Vec<f32>)>) -> impl FnMut(&[String]) -> Result<Vec<Vec<f32>>> {
        move |caps: &[String]| {
            Ok(caps
                .iter()
                .map(|c| table.iter().find(|(k, _)| *k == c).unwrap().1.clone())
                .collect())
        }
    }

    #[test]
    fn single_and_duplicate_templates() {
        let names = vec!["cat".to_string()];
        let table = vec![("a cat", vec![3.0, 4.0])];
        let one = build_class_embeddings(&names, &["a {}".into()], embed_lookup(table.clone())).unwrap();
        assert_eq!(one[0].vector, vec![0.6, 0.8]);
        let two =
            build_class_embeddings(&names, &["a {}".into(), "a {}".into()], embed_lookup(table)).unwrap();
        assert_eq!(one[0].vector, two[0].vector);
    }

    #[test]
    fn orthogonal_templates_average_at_45_degrees() {
        let names = vec!["cat".to_string()];
        let table = vec![("a cat", vec![2.0, 0.0]), ("the cat", vec![0.0, 5.0])];
        let e = build_class_embeddings(&names, &["a {}".into(), "the {}".into()], embed_lookup(table))
            .unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((e[0].vector[0] - h).abs() < 1e-6 && (e[0].vector[1] - h).abs() < 1e-6);
    }

    #[test]
    fn empty_inputs_rejected() {
        let f = |_: &[String]| -> Result<Vec<Vec<f32>>> { unreachable!() };
        assert!(matches!(build_class_embeddings(&[], &["{}".into()], f), Err(Error::Input(_))));
        assert!(matches!(
            build_class_embeddings(&["a".into()], &[], f),
            Err(Error::Input(_))
        ));
    }

    fn classes(vs: Vec<Vec<f32>>) -> Vec<ClassEmbedding> {
        vs.into_iter()
            .enumerate()
            .map(|(i, vector)| ClassEmbedding {
                name: format!("c{i}"),
                templates: vec![],
                vector,
            })
            .collect()
    }

    #[test]
    fn one_hot_classification_is_perfect() {
        let imgs: Vec<_> = (0..4).map(|i| one_hot(i, 4)).collect();
        let cls = classes((0..4).map(|i| one_hot(i, 4)).collect());
        let r = zero_shot_classify(&imgs, &cls, Some(&[0, 1, 2, 3])).unwrap();
        assert_eq!(r.top1_acc, Some(100.0));
        assert_eq!(r.top5_acc, Some(100.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cls = classes(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let r = zero_shot_classify(&[vec![1.0, 0.0]], &cls, None).unwrap();
        assert_eq!(r.predictions, vec![0]);
    }

    #[test]
    fn dimension_mismatch() {
        let cls = classes(vec![vec![1.0, 0.0]]);
        assert!(matches!(
            zero_shot_classify(&[vec![1.0, 0.0, 0.0]], &cls, None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn recall_identity_pairing() {
        let e: Vec<_> = (0..12).map(|i| one_hot(i, 12)).collect();
        let t = retrieval(&e, &e, &(0..12).map(|i| vec![i]).collect::<Vec<_>>(), &RECALL_KS).unwrap();
        assert!(t.text_retrieval.values().chain(t.image_retrieval.values()).all(|&v| v == 100.0));
    }

    #[test]
    fn recall_constructed_ranks() {
        // 3 images, 6 captions (2k and 2k+1 describe image k); each image
        // ranks one own caption first and the other last.
        let mut sim = vec![vec![0.0; 6]; 3];
        for (i, row) in sim.iter_mut().enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s = 0.5 - 0.01 * j as f64;
            }
            row[2 * i] = 1.0;
            row[2 * i + 1] = -1.0;
        }
        let gt: Vec<Vec<usize>> = (0..3).map(|i| vec![2 * i, 2 * i + 1]).collect();
        let r = recall_at_k(&sim, &gt, &RECALL_KS).unwrap();
        assert_eq!(r[&1], 100.0);
        // transpose: caption 2i+1 ranks its image below the other two
        let t: Vec<Vec<f64>> = (0..6).map(|j| (0..3).map(|i| sim[i][j]).collect()).collect();
        let tgt: Vec<Vec<usize>> = (0..6).map(|j| vec![j / 2]).collect();
        let r = recall_at_k(&t, &tgt, &[1, 2, 3]).unwrap();
        assert_eq!(r[&1], 50.0);
        assert_eq!(r[&3], 100.0);
    }

    #[test]
    fn query_without_ground_truth_named() {
        let e = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        match retrieval(&e, &e[..1], &[vec![0]], &RECALL_KS) {
            Err(Error::Input(m)) => assert!(m.contains("image query 1")),
            other => panic!("{other:?}"),
        }
        match recall_at_k(&[vec![1.0]], &[vec![]], &[1]) {
            Err(Error::Input(m)) => assert!(m.contains("query 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gap_examples() {
        let g = robustness_gap(80.4, &[82.9, 93.2, 73.8, 68.9, 78.4]).unwrap().rounded(80.4);
        assert_eq!((g.avg, g.delta), (79.6, 0.8));
        let g = robustness_gap(82.0, &[82.1, 94.5, 75.7, 71.6, 79.6]).unwrap().rounded(82.0);
        assert_eq!((g.avg, g.delta), (80.9, 1.1));
        let g = robustness_gap(50.0, &[50.0, 50.0]).unwrap();
        assert_eq!(g.delta, 0.0);
        assert!(robustness_gap(50.0, &[]).is_err());
        assert!(robustness_gap(50.0, &[101.0]).is_err());
    }

    #[test]
    fn top1_top5_and_center_frame() {
        assert_eq!(mean_top1_top5(50.0, 70.0).unwrap(), 60.0);
        assert_eq!(mean_top1_top5(42.5, 42.5).unwrap(), 42.5);
        assert!(mean_top1_top5(70.0, 50.0).is_err());
        assert_eq!(*center_frame(&[7]).unwrap(), 7);
        assert_eq!(*center_frame(&[0, 1, 2, 3, 4]).unwrap(), 2);
        assert_eq!(*center_frame(&[0, 1, 2, 3]).unwrap(), 2);
        assert!(center_frame::<u8>(&[]).is_err());
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round1(75.95), 76.0);
        assert_eq!(round1(0.84), 0.8);
        assert_eq!(round1(-2.55), -2.6);
    }
}
