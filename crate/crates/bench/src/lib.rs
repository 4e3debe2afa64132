//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use clipforge_core::data::{generate_corpus, CorpusSpec, Dataset};
use clipforge_core::train::TrainConfig;

/// A small corpus and a config sized to it.
pub fn toy_setup(image_size: usize, patch_size: usize, batch_size: usize, mask_ratio: f64) -> (TrainConfig, Arc<Dataset>) {
    let spec = CorpusSpec::new(8, 8, image_size, 7);
    let corpus = generate_corpus(&spec).expect("valid spec");
    let ds = Dataset::new(corpus.train, image_size, 3).expect("non-empty corpus");
    let cfg = TrainConfig {
        image_size_px: image_size,
        patch_size_px: patch_size,
        batch_size,
        mask_ratio,
        total_steps: 1 << 30,
        ..TrainConfig::default()
    };
    (cfg, Arc::new(ds))
}
