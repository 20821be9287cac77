#![allow(dead_code)]

use std::path::Path;

use oceanprompt::datastore::{write_dataset, Dataset, Splits};
use oceanprompt::model::{ModelConfig, Variant};
use oceanprompt::pipeline::{generate_synthetic, provenance, synthetic_universe, SynthConfig};

pub fn tiny_synth(steps: usize) -> SynthConfig {
    SynthConfig {
        height: 16,
        width: 16,
        steps,
        ..SynthConfig::default()
    }
}

/// Writes a 16×16 dataset with the given split sizes and opens it.
pub fn tiny_dataset(dir: &Path, train: usize, val: usize, test: usize) -> Dataset {
    let cfg = tiny_synth(train + val + test);
    let out = generate_synthetic(&cfg).unwrap();
    write_dataset(
        &out.samples,
        &synthetic_universe(),
        &Splits::contiguous(train, val, test),
        dir,
        &provenance(&cfg),
    )
    .unwrap();
    Dataset::open(dir).unwrap()
}

pub fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        codebook_size: 3,
        template_size: 4,
        mixer_hidden: 8,
        stages: 2,
        variant,
        ..ModelConfig::default()
    }
}
