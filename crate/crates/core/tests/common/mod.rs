#![allow(dead_code)]

use promptforge::encoders::{EncoderConfig, EncoderWeights};
use promptforge::episodes::{generate_synthetic_domain, Dataset, SyntheticDomainSpec};
use promptforge::pipeline::{PipelineConfig, TextFeatureCache, Variant};
use promptforge::semantic::SelectionConfig;

/// d = 64 with one layer and 16-px images: same code paths, fast tests.
pub fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 64,
        layers: 1,
        heads: 4,
        mlp_ratio: 2,
        patch_size: 8,
        image_size: 16,
        vocab_hash_buckets: 512,
        max_text_len: 32,
    }
}

pub struct Fixture {
    pub weights: EncoderWeights,
    pub dataset: Dataset,
    pub text: TextFeatureCache,
}

pub fn fixture(seed: u64) -> Fixture {
    let weights = EncoderWeights::init_frozen(&small_encoder(), seed).unwrap();
    let dataset = generate_synthetic_domain(&SyntheticDomainSpec {
        image_size: 16,
        images_per_class: 25,
        seed,
        ..Default::default()
    })
    .unwrap();
    let text = TextFeatureCache::build(&dataset.corpus, &weights).unwrap();
    Fixture { weights, dataset, text }
}

pub fn small_pipeline(variant: Variant, n_v: usize, iterations: usize) -> PipelineConfig {
    PipelineConfig {
        variant,
        n_v,
        iterations,
        classifier_epochs: 20,
        lr_classifier: 1e-2,
        t_s: 4,
        selection: SelectionConfig {
            c: 24,
            m: 8,
            gamma_shape: 2.0,
            gamma_scale: 6.0,
        },
        feature_budget: None,
        ..PipelineConfig::default()
    }
}
