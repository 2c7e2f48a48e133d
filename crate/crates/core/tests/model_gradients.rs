//! Central differences against the tape on the complete composed losses.

mod common;

use common::*;
use mcrec_core::data::{collate, mask_sample, BatchItem, Mode};
use mcrec_core::numerics::{grad_check, Binder, Graph, ParamSet};
use mcrec_core::pretrain::pretrain_objective;
use mcrec_core::tune::{recommend_logits, tune_loss};
use mcrec_core::{rng, EncoderConfig, PretrainConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_pretrain(enc: &EncoderConfig, cfg: &PretrainConfig) -> f64 {
    let records = two_records();
    let mut r = rng::stream(3, &["mask"]);
    let items: Vec<BatchItem> = records
        .iter()
        .map(|rec| BatchItem::masked(rec, mask_sample(rec, 0.4, sizes(), &mut r)))
        .collect();
    let batch = collate(&items, Mode::Pretrain, enc.max_len, sizes());
    let params = pretrain_params(enc, cfg.shared_heads, 11);
    let objective = |ps: &ParamSet| {
        let mut g = Graph::new();
        let mut b = Binder::all(ps);
        let t = pretrain_objective(&mut g, &mut b, enc, cfg, &batch)?;
        Ok(g.value(t.total).item())
    };
    let mut g = Graph::new();
    let mut b = Binder::all(&params);
    let t = pretrain_objective(&mut g, &mut b, enc, cfg, &batch).unwrap();
    g.backward(t.total).unwrap();
    let grads = b.grads(&g);
    assert_eq!(grads.len(), params.len(), "every tensor reaches the loss");
    grad_check(objective, &params, &grads, H).unwrap().max_relative_error
}

fn gamma_one() -> PretrainConfig {
    // γ = 1 so the contrastive branch is not drowned out by the mask term.
    PretrainConfig {
        gamma: 1.0,
        ..Default::default()
    }
}

#[test]
fn pretraining_loss_gradient() {
    let err = check_pretrain(&small_encoder(true), &gamma_one());
    assert!(err <= TOL, "max relative error {err}");
}

#[test]
fn pretraining_loss_gradient_standard_infonce() {
    let cfg = PretrainConfig {
        include_positive_in_denominator: true,
        ..gamma_one()
    };
    let err = check_pretrain(&small_encoder(true), &cfg);
    assert!(err <= TOL, "max relative error {err}");
}

#[test]
fn pretraining_loss_gradient_ablation_variants() {
    let shared = PretrainConfig {
        shared_heads: true,
        ..gamma_one()
    };
    assert!(check_pretrain(&small_encoder(false), &gamma_one()) <= TOL);
    assert!(check_pretrain(&small_encoder(true), &shared) <= TOL);
}

fn check_tune(prompts: usize) -> f64 {
    let enc = small_encoder(true);
    let records = two_records();
    let items: Vec<BatchItem> = records.iter().map(BatchItem::plain).collect();
    let batch = collate(&items, Mode::Tune { prompts }, enc.max_len, sizes());
    let params = tune_params(&enc, prompts, 5);
    let build = |g: &mut Graph, b: &mut Binder| {
        let logits = recommend_logits(g, b, &enc, &batch)?;
        tune_loss(g, logits, &batch.medication_targets)
    };
    let objective = |ps: &ParamSet| {
        let mut g = Graph::new();
        let mut b = Binder::all(ps);
        let l = build(&mut g, &mut b)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let mut b = Binder::all(&params);
    let l = build(&mut g, &mut b).unwrap();
    g.backward(l).unwrap();
    let grads = b.grads(&g);
    assert_eq!(grads.len(), params.len());
    grad_check(objective, &params, &grads, H).unwrap().max_relative_error
}

#[test]
fn tuning_loss_gradient_with_prompts() {
    let err = check_tune(2);
    assert!(err <= TOL, "max relative error {err}");
}

#[test]
fn tuning_loss_gradient_without_prompts() {
    let err = check_tune(0);
    assert!(err <= TOL, "max relative error {err}");
}

#[test]
fn frozen_backbone_receives_no_gradient() {
    let enc = small_encoder(true);
    let records = two_records();
    let items: Vec<BatchItem> = records.iter().map(BatchItem::plain).collect();
    let batch = collate(&items, Mode::Tune { prompts: 2 }, enc.max_len, sizes());
    let params = tune_params(&enc, 2, 5);
    let mut g = Graph::new();
    let mut b = Binder::new(&params, |n| !mcrec_core::BackboneParams::is_backbone_param(n));
    let logits = recommend_logits(&mut g, &mut b, &enc, &batch).unwrap();
    let l = tune_loss(&mut g, logits, &batch.medication_targets).unwrap();
    g.backward(l).unwrap();
    let names: Vec<String> = b.grads(&g).into_keys().collect();
    assert_eq!(
        names,
        ["head.W_1", "head.W_2", "head.b_1", "head.b_2", "prompt_d", "prompt_p"]
    );
}
