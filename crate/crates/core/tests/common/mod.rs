#![allow(dead_code)]

use mcrec_core::data::{Record, VocabSizes};
use mcrec_core::numerics::ParamSet;
use mcrec_core::pretrain::init_heads;
use mcrec_core::tune::init_adapter;
use mcrec_core::{rng, BackboneParams, EncoderConfig};

pub fn sizes() -> VocabSizes {
    VocabSizes {
        diagnoses: 7,
        procedures: 6,
        medications: 5,
    }
}

/// c=8, K=2, A=2.
pub fn small_encoder(shared_towers: bool) -> EncoderConfig {
    EncoderConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        max_len: 16,
        shared_towers,
    }
}

pub fn two_records() -> Vec<Record> {
    vec![
        Record::new("a", vec![0, 2, 5], vec![1, 3], vec![0, 2]).unwrap(),
        Record::new("a", vec![1, 6], vec![0, 4, 5], vec![1, 3, 4]).unwrap(),
    ]
}

pub fn backbone(enc: &EncoderConfig, seed: u64) -> ParamSet {
    BackboneParams::init_seeded(enc, sizes(), seed).unwrap().params
}

pub fn pretrain_params(enc: &EncoderConfig, shared_heads: bool, seed: u64) -> ParamSet {
    let heads = init_heads(enc.dim, sizes(), shared_heads, &mut rng::stream(seed, &["heads"]));
    backbone(enc, seed).merged(&heads)
}

pub fn tune_params(enc: &EncoderConfig, prompts: usize, seed: u64) -> ParamSet {
    let adapter = init_adapter(enc.dim, sizes(), prompts, &mut rng::stream(seed, &["adapter"]));
    backbone(enc, seed).merged(&adapter)
}
