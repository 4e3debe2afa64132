use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use super::augment::random_resized_crop;
use super::shard::Record;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

/// Maps an 8-bit pixel to [-1, 1].
pub fn to_unit_range(b: u8) -> f32 {
    f32::from(b) / 127.5 - 1.0
}

#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<Record>,
    pub image_size: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[b, c, s, s]` pixels in [-1, 1].
    pub images: Vec<f32>,
    pub image_shape: [usize; 4],
    /// `b × context_length` token ids.
    pub tokens: Vec<u32>,
    pub classes: Vec<u32>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn image_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.images.clone(), &self.image_shape)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// How batches are drawn from a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    /// Random-resized-crop area range; `None` reads raw images.
    pub crop: Option<(f64, f64)>,
    pub context_length: usize,
}

impl Dataset {
    pub fn new(records: Vec<Record>, image_size: usize, channels: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("dataset has no records".into()));
        }
        let want = channels * image_size * image_size;
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.image.len() != want) {
            return Err(Error::Input(format!(
                "record {i} has {} image bytes, expected {want}",
                r.image.len()
            )));
        }
        Ok(Dataset {
            records,
            image_size,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn epoch_permutation(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeds::rng(seed, stream::EPOCH, epoch));
        idx
    }

    /// Record indices of the `attempt`-th batch: consecutive positions of the
    /// stream of epoch permutations.
    pub fn batch_indices(&self, seed: u64, attempt: u64, batch_size: usize) -> Vec<usize> {
        let n = self.len() as u64;
        let start = attempt * batch_size as u64;
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in start..start + batch_size as u64 {
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.epoch_permutation(seed, epoch)));
            }
            out.push(cached.as_ref().expect("set above").1[(pos % n) as usize]);
        }
        out
    }

    pub fn image(&self, i: usize) -> Vec<f32> {
        self.records[i].image.iter().map(|&b| to_unit_range(b)).collect()
    }

    /// Assembles the records at `indices`, cropping with a generator derived
    /// from `(seed, attempt)` when `crop` is set.
    pub fn assemble(
        &self,
        indices: &[usize],
        tokenizer: &Tokenizer,
        crop: Option<(f64, f64)>,
        seed: u64,
        attempt: u64,
    ) -> Result<Batch> {
        let s = self.image_size;
        let mut pixels = Vec::with_capacity(indices.len() * self.channels * s * s);
        let mut rng = seeds::rng(seed, stream::AUGMENT, attempt);
        for &i in indices {
            let img = self.image(i);
            match crop {
                Some(range) => {
                    pixels.extend(random_resized_crop(&img, self.channels, s, range, &mut rng)?)
                }
                None => pixels.extend(img),
            }
        }
        let captions: Vec<&[u8]> = indices.iter().map(|&i| &self.records[i].caption[..]).collect();
        Ok(Batch {
            images: pixels,
            image_shape: [indices.len(), self.channels, s, s],
            tokens: tokenizer.encode_batch(&captions),
            classes: indices.iter().map(|&i| self.records[i].class_id).collect(),
            indices: indices.to_vec(),
        })
    }

    pub fn batch(&self, plan: &BatchPlan, attempt: u64) -> Result<Batch> {
        if plan.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let idx = self.batch_indices(plan.seed, attempt, plan.batch_size);
        self.assemble(
            &idx,
            &Tokenizer::new(plan.context_length),
            plan.crop,
            plan.seed,
            attempt,
        )
    }
}

/// Produces batches for consecutive attempts on a background thread through
/// a bounded queue. Output is identical to calling [`Dataset::batch`] in order.
pub struct Prefetcher {
    rx: Option<Receiver<Result<Batch>>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(dataset: Arc<Dataset>, plan: BatchPlan, first: u64, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for attempt in first.. {
                if tx.send(dataset.batch(&plan, attempt)).is_err() {
                    break;
                }
            }
        });
        Prefetcher {
            rx: Some(rx),
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // closing the receiver makes the producer's next send fail
        self.rx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_corpus, CorpusSpec};

    fn dataset(n_per_class: usize) -> Dataset {
        let c = generate_corpus(&CorpusSpec::new(4, n_per_class, 8, 0)).unwrap();
        Dataset::new(c.train, 8, 3).unwrap()
    }

    #[test]
    fn epoch_is_a_permutation() {
        let d = dataset(5);
        let plan_seed = 42;
        let n = d.len();
        let mut seen = Vec::new();
        for attempt in 0..(n / 4) as u64 {
            seen.extend(d.batch_indices(plan_seed, attempt, 4));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(d.batch_indices(plan_seed, 3, 4), d.batch_indices(plan_seed, 3, 4));
    }

    #[test]
    fn batch_spanning_epochs() {
        let d = dataset(3);
        let idx = d.batch_indices(1, 1, 8);
        let p0 = d.epoch_permutation(1, 0);
        let p1 = d.epoch_permutation(1, 1);
        assert_eq!(&idx[..4], &p0[8..]);
        assert_eq!(&idx[4..], &p1[..4]);
    }

    #[test]
    fn eval_batches_are_raw() {
        let d = dataset(2);
        let plan = BatchPlan {
            seed: 0,
            batch_size: 3,
            crop: None,
            context_length: 16,
        };
        let b = d.batch(&plan, 0).unwrap();
        assert_eq!(b.image_tensor().unwrap().shape(), &[3, 3, 8, 8]);
        assert_eq!(&b.images[..192], &d.image(b.indices[0])[..]);
        assert_eq!(b.tokens.len(), 48);
        assert!(b.images.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn prefetch_matches_sync() {
        let d = Arc::new(dataset(4));
        let plan = BatchPlan {
            seed: 5,
            batch_size: 4,
            crop: Some((0.9, 1.0)),
            context_length: 16,
        };
        let fetched: Vec<Batch> = Prefetcher::spawn(d.clone(), plan, 2, 2)
            .take(5)
            .map(|b| b.unwrap())
            .collect();
        for (k, b) in fetched.iter().enumerate() {
            let s = d.batch(&plan, 2 + k as u64).unwrap();
            assert_eq!(b.images, s.images);
            assert_eq!(b.tokens, s.tokens);
        }
    }

    #[test]
    fn pixel_range() {
        assert_eq!(to_unit_range(0), -1.0);
        assert_eq!(to_unit_range(255), 1.0);
    }
}
