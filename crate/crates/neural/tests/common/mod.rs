#![allow(dead_code)]

use dmc_core::corpus::{generate_synthetic_corpus, PairedCorpus};
use dmc_core::dataset::{generate_mcic, split_dataset, Instance, Split, SplitSpec};
use dmc_core::pvembed::{train_pv, PVHyperParams};
use dmc_core::scoring::ScoreParams;
use dmc_neural::ItemSet;

pub struct Pipeline {
    pub corpus: PairedCorpus,
    pub instances: Vec<Instance>,
    pub train: ItemSet<f32>,
    pub dev: ItemSet<f32>,
}

/// synth → train-pv → gen → split, as the CLI would run it.
pub fn pipeline(seed: u64, n_images: usize, dev_images: usize) -> Pipeline {
    pipeline_with(seed, n_images, dev_images, 120, 32)
}

pub fn pipeline_with(
    seed: u64,
    n_images: usize,
    dev_images: usize,
    vocab: usize,
    d_img: usize,
) -> Pipeline {
    let corpus = generate_synthetic_corpus(seed, n_images, 5, vocab, d_img).unwrap();
    let pv = train_pv(
        &corpus,
        &PVHyperParams {
            dim: 32,
            epochs: 10,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let instances = generate_mcic(&corpus, &pv, &ScoreParams::default()).unwrap();
    let instances = split_dataset(
        instances,
        &SplitSpec {
            dev_images,
            test_images: dev_images,
            seed,
        },
    )
    .unwrap();
    let train = ItemSet::from_split(&instances, Split::Train, &corpus).unwrap();
    let dev = ItemSet::from_split(&instances, Split::Dev, &corpus).unwrap();
    Pipeline {
        corpus,
        instances,
        train,
        dev,
    }
}
