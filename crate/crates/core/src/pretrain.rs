//! Stage 1: masked-set reconstruction plus diagnosis/procedure contrastive
//! alignment over the pooled training records of every center.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{collate, mask_sample, Batch, BatchItem, Mode, MultiCenterDataset, Partition, Record, VocabSizes};
use crate::encoder::{encode, encode_tower, BackboneParams, EncoderConfig, Tower};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, report::write_file};
use crate::numerics::{fan_in_uniform, Adam, Binder, Checkpoint, Graph, ParamSet, Tensor, Var};
use crate::rng::{self, Rng};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const HEADS_FILE: &str = "pretrain_heads.ckpt";
pub const METRICS_FILE: &str = "pretrain_metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Weight γ of the contrastive term.
    pub gamma: f64,
    /// Temperature τ.
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_ratio: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub mask_task: bool,
    pub contrastive_task: bool,
    /// Share the hidden layer of the two mask heads and of the two projectors.
    pub shared_heads: bool,
    /// Standard InfoNCE denominator instead of the positive-excluded one.
    pub include_positive_in_denominator: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-2,
            temperature: 0.8,
            batch_size: 64,
            learning_rate: 5e-4,
            mask_ratio: crate::data::DEFAULT_MASK_RATIO,
            max_epochs: 20,
            patience: 3,
            mask_task: true,
            contrastive_task: true,
            shared_heads: false,
            include_positive_in_denominator: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be a finite non-negative number"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Whether the contrastive term contributes at all.
    pub fn uses_contrastive(&self) -> bool {
        self.contrastive_task && self.gamma > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Diagnosis,
    Procedure,
}

impl Side {
    fn suffix(self) -> &'static str {
        match self {
            Side::Diagnosis => "d",
            Side::Procedure => "p",
        }
    }
}

fn hidden_prefix(kind: &str, side: Side, shared: bool) -> String {
    if shared {
        format!("{kind}_shared")
    } else {
        format!("{kind}_{}", side.suffix())
    }
}

/// Mask heads (c → c → vocab) and projectors (c → c → c), ReLU in between.
pub fn init_heads(c: usize, sizes: VocabSizes, shared: bool, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    for kind in ["mask", "proj"] {
        let sides: &[Side] = if shared { &[Side::Diagnosis] } else { &[Side::Diagnosis, Side::Procedure] };
        for &side in sides {
            let h = hidden_prefix(kind, side, shared);
            p.insert(format!("{h}.W_1"), fan_in_uniform(&[c, c], c, rng));
            p.insert(format!("{h}.b_1"), Tensor::zeros(&[c]));
        }
        for side in [Side::Diagnosis, Side::Procedure] {
            let out = match (kind, side) {
                ("mask", Side::Diagnosis) => sizes.diagnoses,
                ("mask", Side::Procedure) => sizes.procedures,
                _ => c,
            };
            let o = format!("{kind}_{}", side.suffix());
            p.insert(format!("{o}.W_2"), fan_in_uniform(&[c, out], c, rng));
            p.insert(format!("{o}.b_2"), Tensor::zeros(&[out]));
        }
    }
    p
}

fn two_layer(g: &mut Graph, binder: &mut Binder, hidden: &str, out: &str, x: Var) -> Result<Var> {
    let w1 = binder.get(g, &format!("{hidden}.W_1"))?;
    let b1 = binder.get(g, &format!("{hidden}.b_1"))?;
    let w2 = binder.get(g, &format!("{out}.W_2"))?;
    let b2 = binder.get(g, &format!("{out}.b_2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row_bias(y, b2)
}

/// Mask-prediction logits over the side's vocabulary.
pub fn mask_logits(g: &mut Graph, binder: &mut Binder, side: Side, r: Var, shared: bool) -> Result<Var> {
    two_layer(g, binder, &hidden_prefix("mask", side, shared), &format!("mask_{}", side.suffix()), r)
}

/// Projector output `u`.
pub fn project(g: &mut Graph, binder: &mut Binder, side: Side, r: Var, shared: bool) -> Result<Var> {
    two_layer(g, binder, &hidden_prefix("proj", side, shared), &format!("proj_{}", side.suffix()), r)
}

/// BCE on both towers' masked codes: summed over the vocabulary, averaged
/// over the batch, diagnosis plus procedure.
pub fn mask_loss(g: &mut Graph, logits_d: Var, y_d: &Tensor, logits_p: Var, y_p: &Tensor) -> Result<Var> {
    let ld = g.bce_with_logits(logits_d, y_d)?;
    let lp = g.bce_with_logits(logits_p, y_p)?;
    g.add(ld, lp)
}

/// `L_dp + L_pd` over cosine similarities scaled by `1/τ`.
pub fn contrastive_loss(g: &mut Graph, u_d: Var, u_p: Var, temperature: f64, include_positive: bool) -> Result<Var> {
    if g.value(u_d).rows() < 2 {
        return Err(Error::Shape("contrastive loss needs at least two records".into()));
    }
    let nd = g.l2_normalize_rows(u_d)?;
    let np = g.l2_normalize_rows(u_p)?;
    let npt = g.transpose(np)?;
    let s = g.matmul(nd, npt)?;
    let s = g.scale(s, 1.0 / temperature)?;
    let l_dp = g.contrastive(s, include_positive)?;
    let st = g.transpose(s)?;
    let l_pd = g.contrastive(st, include_positive)?;
    g.add(l_dp, l_pd)
}

pub struct PretrainTerms {
    pub total: Var,
    pub mask: Option<Var>,
    pub contrastive: Option<Var>,
}

/// `L_mask + γ·L_contrastive` from one forward pass over `batch`.
pub fn pretrain_objective(
    g: &mut Graph,
    binder: &mut Binder,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    batch: &Batch,
) -> Result<PretrainTerms> {
    let (rd, rp) = encode(g, binder, enc, batch)?;
    let mask = if cfg.mask_task {
        let ld = mask_logits(g, binder, Side::Diagnosis, rd, cfg.shared_heads)?;
        let lp = mask_logits(g, binder, Side::Procedure, rp, cfg.shared_heads)?;
        Some(mask_loss(
            g,
            ld,
            &batch.masked_diagnosis_targets,
            lp,
            &batch.masked_procedure_targets,
        )?)
    } else {
        None
    };
    let contrastive = if cfg.uses_contrastive() {
        let ud = project(g, binder, Side::Diagnosis, rd, cfg.shared_heads)?;
        let up = project(g, binder, Side::Procedure, rp, cfg.shared_heads)?;
        Some(contrastive_loss(g, ud, up, cfg.temperature, cfg.include_positive_in_denominator)?)
    } else {
        None
    };
    let total = match (mask, contrastive) {
        (Some(m), Some(c)) => {
            let wc = g.scale(c, cfg.gamma)?;
            g.add(m, wc)?
        }
        (Some(m), None) => m,
        (None, Some(c)) => g.scale(c, cfg.gamma)?,
        (None, None) => return Err(Error::config("mask_task", "both pretraining tasks are disabled")),
    };
    Ok(PretrainTerms {
        total,
        mask,
        contrastive,
    })
}

/// Masked items when the mask task is on, plain ones otherwise.
fn make_items(records: &[&Record], cfg: &PretrainConfig, sizes: VocabSizes, rng: &mut Rng) -> Vec<BatchItem> {
    records
        .iter()
        .map(|r| {
            if cfg.mask_task {
                BatchItem::masked(r, mask_sample(r, cfg.mask_ratio, sizes, rng))
            } else {
                BatchItem::plain(r)
            }
        })
        .collect()
}

/// Splits `n` into chunks of `size`, folding a trailing singleton into the
/// previous chunk so every batch has negatives.
pub fn chunk_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() > 1 && out.last().is_some_and(|(s, e)| e - s == 1) {
        let (_, e) = out.pop().unwrap();
        out.last_mut().unwrap().1 = e;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mask_loss: f64,
    pub train_contrastive_loss: f64,
    /// Validation masked-diagnosis average precision, or the negated
    /// validation contrastive loss when the mask task is off.
    pub validation_score: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: BackboneParams,
    pub heads: ParamSet,
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
}

impl PretrainOutcome {
    pub fn heads_checkpoint(&self, cfg: &PretrainConfig) -> Checkpoint {
        Checkpoint::new(self.heads.clone())
            .with_meta("kind", "pretrain_heads")
            .with_meta("shared_heads", cfg.shared_heads)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_mask_loss,train_contrastive_loss,validation_score\n");
        for e in &self.history {
            writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9}",
                e.epoch, e.train_loss, e.train_mask_loss, e.train_contrastive_loss, e.validation_score
            )
            .unwrap();
        }
        s
    }

    /// Writes the backbone, the heads and the metrics CSV into `dir`.
    pub fn save(&self, dir: &Path, cfg: &PretrainConfig) -> Result<()> {
        self.backbone.save(&dir.join(BACKBONE_FILE))?;
        self.heads_checkpoint(cfg).save(&dir.join(HEADS_FILE))?;
        write_file(&dir.join(METRICS_FILE), self.metrics_csv())
    }
}

struct Sums {
    total: f64,
    mask: f64,
    contrastive: f64,
    n: usize,
}

impl Sums {
    fn new() -> Self {
        Self {
            total: 0.0,
            mask: 0.0,
            contrastive: 0.0,
            n: 0,
        }
    }

    fn add(&mut self, g: &Graph, t: &PretrainTerms, weight: usize) {
        let w = weight as f64;
        self.total += w * g.value(t.total).item();
        self.mask += w * t.mask.map_or(0.0, |v| g.value(v).item());
        self.contrastive += w * t.contrastive.map_or(0.0, |v| g.value(v).item());
        self.n += weight;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.total / n, self.mask / n, self.contrastive / n)
    }
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    let x = g.value(v).item();
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: loss = {x}")))
    }
}

fn validation_score(
    params: &ParamSet,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    items: &[BatchItem],
    sizes: VocabSizes,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, e) in chunk_bounds(items.len(), cfg.batch_size) {
        let batch = collate(&items[s..e], Mode::Pretrain, enc.max_len, sizes);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(params);
        if cfg.mask_task {
            let rd = encode_tower(&mut g, &mut binder, enc, Tower::Diagnosis, &batch.diagnoses, 0)?;
            let logits = mask_logits(&mut g, &mut binder, Side::Diagnosis, rd, cfg.shared_heads)?;
            let lv = g.value(logits);
            let y = &batch.masked_diagnosis_targets;
            for b in 0..batch.size() {
                let labels: Vec<bool> = y.row(b).iter().map(|&v| v > 0.5).collect();
                if let Some(ap) = average_precision(&labels, lv.row(b)) {
                    total += ap;
                    n += 1;
                }
            }
        } else {
            let terms = pretrain_objective(&mut g, &mut binder, enc, cfg, &batch)?;
            let c = terms.contrastive.expect("contrastive task is on");
            check_finite(&g, c, "validation")?;
            total -= g.value(c).item() * batch.size() as f64;
            n += batch.size();
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Runs stage 1 on the pooled training records of every center.
///
/// Epoch 0 is an evaluation pass at initialization. Each later epoch is one
/// pass over the shuffled pooled training set; the parameters with the best
/// validation score are returned. With both tasks disabled the freshly
/// initialized backbone is returned unchanged.
pub fn run_pretrain(
    dataset: &MultiCenterDataset,
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let sizes = dataset.vocab.sizes();
    let backbone = BackboneParams::init_seeded(enc, sizes, seed)?;
    let heads = init_heads(enc.dim, sizes, cfg.shared_heads, &mut rng::stream(seed, &["pretrain-heads"]));
    if !cfg.mask_task && !cfg.uses_contrastive() {
        return Ok(PretrainOutcome {
            backbone,
            heads,
            history: Vec::new(),
            best_epoch: 0,
        });
    }
    let train = dataset.pooled(Partition::Train);
    if train.len() < 2 {
        return Err(Error::InvalidData("pretraining needs at least two training records".into()));
    }
    let val = dataset.pooled(Partition::Validation);
    let val_items = make_items(&val, cfg, sizes, &mut rng::stream(seed, &["pretrain-validation-mask"]));

    let mut state = backbone.params.merged(&heads);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();
    let mut best = state.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;

    for epoch in 0..=cfg.max_epochs {
        let tag = epoch.to_string();
        let mut order: Vec<&Record> = train.clone();
        order.shuffle(&mut rng::stream(seed, &["pretrain-shuffle", &tag]));
        let items = make_items(&order, cfg, sizes, &mut rng::stream(seed, &["pretrain-mask", &tag]));
        let mut sums = Sums::new();
        for (s, e) in chunk_bounds(items.len(), cfg.batch_size) {
            let batch = collate(&items[s..e], Mode::Pretrain, enc.max_len, sizes);
            let mut g = Graph::new();
            if epoch == 0 {
                let mut binder = Binder::frozen(&state);
                let terms = pretrain_objective(&mut g, &mut binder, enc, cfg, &batch)?;
                check_finite(&g, terms.total, "pretraining epoch 0")?;
                sums.add(&g, &terms, e - s);
                continue;
            }
            let mut binder = Binder::all(&state);
            let terms = pretrain_objective(&mut g, &mut binder, enc, cfg, &batch)?;
            check_finite(&g, terms.total, &format!("pretraining epoch {epoch}, batch at {s}"))?;
            sums.add(&g, &terms, e - s);
            g.backward(terms.total)?;
            let grads = binder.grads(&g);
            drop(binder);
            adam.step(&mut state, &grads)?;
        }
        let (train_loss, train_mask_loss, train_contrastive_loss) = sums.mean();
        let validation_score = validation_score(&state, enc, cfg, &val_items, sizes)?;
        log::info!("pretrain epoch {epoch}: loss {train_loss:.5}, validation {validation_score:.5}");
        history.push(PretrainEpoch {
            epoch,
            train_loss,
            train_mask_loss,
            train_contrastive_loss,
            validation_score,
        });
        if validation_score > best_score {
            best_score = validation_score;
            best = state.clone();
            best_epoch = epoch;
            stale = 0;
        } else if epoch > 0 {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let backbone = BackboneParams {
        params: best.filter(BackboneParams::is_backbone_param),
        ..backbone
    };
    let heads = best.filter(|n| !BackboneParams::is_backbone_param(n));
    Ok(PretrainOutcome {
        backbone,
        heads,
        history,
        best_epoch,
    })
}

/// Mean cosine of matched `(u_d^i, u_p^i)` pairs and of mismatched pairs
/// `i ≠ j`, over unmasked `records` in batches of `batch_size`.
pub fn alignment(
    backbone: &BackboneParams,
    heads: &ParamSet,
    shared_heads: bool,
    records: &[&Record],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let params = backbone.params.merged(heads);
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for (s, e) in chunk_bounds(records.len(), batch_size.max(2)) {
        let items: Vec<BatchItem> = records[s..e].iter().map(|r| BatchItem::plain(r)).collect();
        let batch = collate(&items, Mode::Pretrain, backbone.config.max_len, backbone.sizes);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&params);
        let (rd, rp) = encode(&mut g, &mut binder, &backbone.config, &batch)?;
        let ud = project(&mut g, &mut binder, Side::Diagnosis, rd, shared_heads)?;
        let up = project(&mut g, &mut binder, Side::Procedure, rp, shared_heads)?;
        let nd = g.l2_normalize_rows(ud)?;
        let np = g.l2_normalize_rows(up)?;
        let (a, b) = (g.value(nd), g.value(np));
        for i in 0..batch.size() {
            for j in 0..batch.size() {
                let c: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                if i == j {
                    pos += c;
                    npos += 1;
                } else {
                    neg += c;
                    nneg += 1;
                }
            }
        }
    }
    Ok((pos / npos.max(1) as f64, neg / nneg.max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn tiny() -> (MultiCenterDataset, EncoderConfig) {
        let gen = GeneratorConfig {
            centers: 2,
            records_min: 60,
            records_max: 60,
            diagnosis_vocab: 24,
            procedure_vocab: 16,
            medication_vocab: 16,
            conditions: 4,
            ..Default::default()
        };
        let enc = EncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            max_len: 20,
            shared_towers: true,
        };
        (generate(&gen, 0).unwrap(), enc)
    }

    #[test]
    fn contrastive_hand_case() {
        let mut g = Graph::new();
        let ud = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let up = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let l = contrastive_loss(&mut g, ud, up, 1.0, false).unwrap();
        assert!((g.value(l).item() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_single_record() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!(contrastive_loss(&mut g, u, u, 1.0, false).is_err());
    }

    #[test]
    fn mask_loss_at_zero_logits() {
        let mut g = Graph::new();
        let ld = g.constant(Tensor::zeros(&[1, 5])).unwrap();
        let lp = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let mut yd = Tensor::zeros(&[1, 5]);
        yd.data_mut()[2] = 1.0;
        let l = mask_loss(&mut g, ld, &yd, lp, &Tensor::zeros(&[1, 3])).unwrap();
        assert!((g.value(l).item() - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn chunking_never_leaves_a_singleton() {
        assert_eq!(chunk_bounds(5, 2), vec![(0, 2), (2, 5)]);
        assert_eq!(chunk_bounds(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(chunk_bounds(1, 4), vec![(0, 1)]);
    }

    #[test]
    fn shared_heads_replace_hidden_layers() {
        let s = VocabSizes {
            diagnoses: 5,
            procedures: 4,
            medications: 3,
        };
        let p = init_heads(4, s, true, &mut rng::stream(0, &[]));
        assert!(p.contains("mask_shared.W_1") && p.contains("proj_shared.b_1"));
        assert!(!p.contains("mask_d.W_1"));
        assert_eq!(p.get("mask_p.W_2").unwrap().shape(), &[4, 4]);
        assert_eq!(p.get("mask_d.W_2").unwrap().shape(), &[4, 5]);
    }

    #[test]
    fn gamma_zero_is_mask_loss_only() {
        let (ds, enc) = tiny();
        let sizes = ds.vocab.sizes();
        let bb = BackboneParams::init_seeded(&enc, sizes, 1).unwrap();
        let heads = init_heads(enc.dim, sizes, false, &mut rng::stream(1, &["h"]));
        let params = bb.params.merged(&heads);
        let recs = ds.pooled(Partition::Train);
        let cfg = PretrainConfig::default();
        let items = make_items(&recs[..4], &cfg, sizes, &mut rng::stream(1, &["m"]));
        let batch = collate(&items, Mode::Pretrain, enc.max_len, sizes);
        let eval = |gamma: f64| {
            let c = PretrainConfig { gamma, ..cfg.clone() };
            let mut g = Graph::new();
            let mut b = Binder::frozen(&params);
            let t = pretrain_objective(&mut g, &mut b, &enc, &c, &batch).unwrap();
            (g.value(t.total).item(), t.mask.map(|m| g.value(m).item()))
        };
        let (total0, mask0) = eval(0.0);
        assert_eq!(Some(total0), mask0);
        let (total1, _) = eval(1e-2);
        assert!(total1.is_finite() && total1 != total0);
    }

    #[test]
    fn short_run_is_deterministic_and_learns() {
        let (ds, enc) = tiny();
        let cfg = PretrainConfig {
            max_epochs: 3,
            patience: 10,
            batch_size: 16,
            learning_rate: 5e-3,
            ..Default::default()
        };
        let a = run_pretrain(&ds, &enc, &cfg, 7).unwrap();
        let b = run_pretrain(&ds, &enc, &cfg, 7).unwrap();
        assert_eq!(a.backbone.to_checkpoint().to_bytes(), b.backbone.to_checkpoint().to_bytes());
        assert_eq!(a.history.len(), 4);
        assert!(a.history[3].train_loss < a.history[0].train_loss);
    }

    #[test]
    fn no_tasks_returns_initial_backbone() {
        let (ds, enc) = tiny();
        let cfg = PretrainConfig {
            mask_task: false,
            contrastive_task: false,
            ..Default::default()
        };
        let out = run_pretrain(&ds, &enc, &cfg, 3).unwrap();
        assert_eq!(out.backbone, BackboneParams::init_seeded(&enc, ds.vocab.sizes(), 3).unwrap());
        assert!(out.history.is_empty());
    }
}
