//! Stage 2: per-center adaptation, the model store, inference and
//! evaluation.
//!
//! A center's model is `shared backbone ∪ adapter`, with adapter tensors
//! taking precedence. Adapter tensors are `prompt_d`, `prompt_p` (b × c) and
//! the recommendation head `head.W_1` (2c × c), `head.b_1`, `head.W_2`
//! (c × |M|), `head.b_2`; regimes that train the backbone per center also
//! keep a full backbone copy in the adapter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{collate, BatchItem, Mode, MultiCenterDataset, Partition, Record, VocabSizes};
use crate::encoder::{encode, BackboneParams, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{jaccard, report::write_file, score_record, threshold, EvalResult, GroupThresholds};
use crate::numerics::{fan_in_uniform, sigmoid, Adam, Binder, Checkpoint, Graph, ParamSet, Tensor, Var};
use crate::rng::{self, Rng};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CENTERS_DIR: &str = "centers";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
/// Adapter key used by the single pooled model of the full-train regime.
pub const POOLED: &str = "pooled";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Frozen backbone; prompts and head per center.
    Prompt,
    /// Everything per center, starting from the pretrained backbone.
    Finetune,
    /// Frozen backbone; head only.
    FinetuneFreeze,
    /// One model on pooled data from a fresh initialization.
    FullTrain,
    /// One fresh model per center.
    SingleTrain,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Prompt,
        Regime::Finetune,
        Regime::FinetuneFreeze,
        Regime::FullTrain,
        Regime::SingleTrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Prompt => "prompt",
            Regime::Finetune => "finetune",
            Regime::FinetuneFreeze => "finetune-freeze",
            Regime::FullTrain => "full-train",
            Regime::SingleTrain => "single-train",
        }
    }

    pub fn needs_pretrained_backbone(self) -> bool {
        matches!(self, Regime::Prompt | Regime::Finetune | Regime::FinetuneFreeze)
    }

    /// Whether the backbone is shared by all centers in the store.
    pub fn shares_backbone(self) -> bool {
        matches!(self, Regime::Prompt | Regime::FinetuneFreeze | Regime::FullTrain)
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::config("regime", format!("unknown regime `{s}`")))
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    /// Prompt vectors per tower, used by the prompt regime.
    pub prompts: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Probability threshold t.
    pub threshold: f64,
    pub regime: Regime,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            prompts: 2,
            learning_rate: 5e-4,
            batch_size: 64,
            threshold: 0.3,
            regime: Regime::Prompt,
            max_epochs: 30,
            patience: 3,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Prompt count actually used by the configured regime.
    pub fn effective_prompts(&self) -> usize {
        if self.regime == Regime::Prompt {
            self.prompts
        } else {
            0
        }
    }
}

/// Fresh adapter tensors: prompts (when `prompts > 0`) and the head.
pub fn init_adapter(c: usize, sizes: VocabSizes, prompts: usize, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    if prompts > 0 {
        p.insert("prompt_d", fan_in_uniform(&[prompts, c], c, rng));
        p.insert("prompt_p", fan_in_uniform(&[prompts, c], c, rng));
    }
    p.insert("head.W_1", fan_in_uniform(&[2 * c, c], 2 * c, rng));
    p.insert("head.b_1", Tensor::zeros(&[c]));
    p.insert("head.W_2", fan_in_uniform(&[c, sizes.medications], c, rng));
    p.insert("head.b_2", Tensor::zeros(&[sizes.medications]));
    p
}

/// Recommendation head on `[r_d ‖ r_p]`.
pub fn head_logits(g: &mut Graph, binder: &mut Binder, features: Var) -> Result<Var> {
    let w1 = binder.get(g, "head.W_1")?;
    let b1 = binder.get(g, "head.b_1")?;
    let w2 = binder.get(g, "head.W_2")?;
    let b2 = binder.get(g, "head.b_2")?;
    let h = g.matmul(features, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, w2)?;
    g.add_row_bias(y, b2)
}

/// `[r_d ‖ r_p]` for a tune-mode batch.
pub fn features(g: &mut Graph, binder: &mut Binder, enc: &EncoderConfig, batch: &crate::data::Batch) -> Result<Var> {
    let (rd, rp) = encode(g, binder, enc, batch)?;
    g.concat_cols(rd, rp)
}

/// Medication logits, `B × |M|`.
pub fn recommend_logits(
    g: &mut Graph,
    binder: &mut Binder,
    enc: &EncoderConfig,
    batch: &crate::data::Batch,
) -> Result<Var> {
    let x = features(g, binder, enc, batch)?;
    head_logits(g, binder, x)
}

/// Multi-label BCE against the medication targets: summed over
/// medications, averaged over the batch.
pub fn tune_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    g.bce_with_logits(logits, targets)
}

/// Trainable tensors of one center's model.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterAdapter {
    pub center_id: String,
    pub params: ParamSet,
}

impl CenterAdapter {
    pub fn prompts(&self) -> usize {
        self.params.get("prompt_d").map_or(0, |t| t.rows())
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "center_adapter")
            .with_meta("center_id", &self.center_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub regime: Regime,
    pub prompts: usize,
    pub centers: Vec<String>,
    pub shared_backbone: bool,
    pub encoder: EncoderConfig,
    pub vocab: VocabSizes,
    pub config_hash: String,
}

/// Shared backbone (when the regime has one) plus per-center adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterModelStore {
    pub regime: Regime,
    pub encoder: EncoderConfig,
    pub sizes: VocabSizes,
    pub backbone: Option<ParamSet>,
    pub adapters: BTreeMap<String, CenterAdapter>,
    pub config_hash: String,
}

impl CenterModelStore {
    pub fn prompts(&self) -> usize {
        self.adapters.values().next().map_or(0, CenterAdapter::prompts)
    }

    fn adapter_key<'a>(&self, center: &'a str) -> &'a str {
        if self.regime == Regime::FullTrain {
            POOLED
        } else {
            center
        }
    }

    pub fn adapter(&self, center: &str) -> Result<&CenterAdapter> {
        self.adapters
            .get(self.adapter_key(center))
            .ok_or_else(|| Error::UnknownCenter(center.to_string()))
    }

    /// Full parameter set used to serve `center`.
    pub fn model_params(&self, center: &str) -> Result<ParamSet> {
        let a = self.adapter(center)?;
        Ok(match &self.backbone {
            Some(b) => b.merged(&a.params),
            None => a.params.clone(),
        })
    }

    /// Backbone tensors used to serve `center`.
    pub fn backbone_for(&self, center: &str) -> Result<BackboneParams> {
        let params = self.model_params(center)?.filter(BackboneParams::is_backbone_param);
        Ok(BackboneParams {
            config: self.encoder.clone(),
            sizes: self.sizes,
            params,
        })
    }

    pub fn manifest(&self) -> StoreManifest {
        StoreManifest {
            regime: self.regime,
            prompts: self.prompts(),
            centers: self.adapters.keys().cloned().collect(),
            shared_backbone: self.backbone.is_some(),
            encoder: self.encoder.clone(),
            vocab: self.sizes,
            config_hash: self.config_hash.clone(),
        }
    }

    /// `manifest.json`, `backbone.ckpt` when shared, `centers/<id>.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(CENTERS_DIR)).map_err(|e| Error::io(dir, e))?;
        if let Some(b) = &self.backbone {
            BackboneParams {
                config: self.encoder.clone(),
                sizes: self.sizes,
                params: b.clone(),
            }
            .save(&dir.join(BACKBONE_FILE))?;
        }
        for (id, a) in &self.adapters {
            a.to_checkpoint().save(&dir.join(CENTERS_DIR).join(format!("{id}.ckpt")))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest())?;
        write_file(&dir.join(MANIFEST_FILE), json + "\n")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("model store manifest {}", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: StoreManifest = serde_json::from_str(&text)?;
        let backbone = if m.shared_backbone {
            Some(BackboneParams::load(&dir.join(BACKBONE_FILE))?.params)
        } else {
            None
        };
        let mut adapters = BTreeMap::new();
        for id in &m.centers {
            let ckpt = Checkpoint::load(&dir.join(CENTERS_DIR).join(format!("{id}.ckpt")))?;
            adapters.insert(
                id.clone(),
                CenterAdapter {
                    center_id: id.clone(),
                    params: ckpt.params,
                },
            );
        }
        Ok(Self {
            regime: m.regime,
            encoder: m.encoder,
            sizes: m.vocab,
            backbone,
            adapters,
            config_hash: m.config_hash,
        })
    }

    /// Sigmoid probabilities for each record, served by `center`'s model.
    pub fn predict(&self, center: &str, records: &[&Record], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let params = self.model_params(center)?;
        predict_with(&params, &self.encoder, self.sizes, self.prompts(), records, batch_size)
    }
}

fn predict_with(
    params: &ParamSet,
    enc: &EncoderConfig,
    sizes: VocabSizes,
    prompts: usize,
    records: &[&Record],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let items: Vec<BatchItem> = chunk.iter().map(|r| BatchItem::plain(r)).collect();
        let batch = collate(&items, Mode::Tune { prompts }, enc.max_len, sizes);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(params);
        let logits = recommend_logits(&mut g, &mut binder, enc, &batch)?;
        let v = g.value(logits);
        for b in 0..batch.size() {
            out.push(v.row(b).iter().map(|&z| sigmoid(z)).collect());
        }
    }
    Ok(out)
}

/// Recommended medication ids `{ j : ŷ_j > t }` for one record.
pub fn infer(record: &Record, center: &str, store: &CenterModelStore, t: f64) -> Result<Vec<usize>> {
    let probs = store.predict(center, &[record], 1)?;
    Ok(threshold(&probs[0], t))
}

/// Recommended medications with their probabilities, most probable first
/// (ties by id).
pub fn infer_ranked(record: &Record, center: &str, store: &CenterModelStore, t: f64) -> Result<Vec<(usize, f64)>> {
    let probs = store.predict(center, &[record], 1)?.remove(0);
    let mut picked: Vec<(usize, f64)> = threshold(&probs, t).into_iter().map(|j| (j, probs[j])).collect();
    picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(picked)
}

/// Scores every center's `part` records with its own model.
pub fn evaluate(
    dataset: &MultiCenterDataset,
    part: Partition,
    store: &CenterModelStore,
    t: f64,
    groups: &GroupThresholds,
    batch_size: usize,
) -> Result<EvalResult> {
    let mut scores = Vec::new();
    let mut sizes = BTreeMap::new();
    for c in dataset.center_ids() {
        sizes.insert(c.clone(), dataset.records(c)?.len());
        let records = dataset.partition(c, part)?;
        let probs = store.predict(c, &records, batch_size)?;
        for (r, p) in records.iter().zip(&probs) {
            scores.push(score_record(c, &r.medications, p, t));
        }
    }
    EvalResult::from_scores(scores, &sizes, groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_jaccard: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneReport {
    /// Per adapter key.
    pub history: BTreeMap<String, Vec<TuneEpoch>>,
    /// Number of trained scalars per adapter key.
    pub tuned_parameters: BTreeMap<String, usize>,
}

impl TuneReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("center_id,epoch,train_loss,validation_jaccard\n");
        for (c, h) in &self.history {
            for e in h {
                writeln!(s, "{c},{},{:.9},{:.9}", e.epoch, e.train_loss, e.validation_jaccard).unwrap();
            }
        }
        s
    }
}

/// Inputs to one model's training run.
struct Job<'a> {
    key: String,
    params: ParamSet,
    trainable: fn(&str) -> bool,
    prompts: usize,
    train: Vec<&'a Record>,
    validation: Vec<&'a Record>,
}

fn adapter_only(name: &str) -> bool {
    !BackboneParams::is_backbone_param(name)
}

fn head_only(name: &str) -> bool {
    name.starts_with("head.")
}

fn everything(_: &str) -> bool {
    true
}

fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: loss = {x}")))
    }
}

fn mean_jaccard(probs: &[Vec<f64>], records: &[&Record], t: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let sum: f64 = records
        .iter()
        .zip(probs)
        .map(|(r, p)| jaccard(&r.medications, &threshold(p, t)))
        .sum();
    sum / records.len() as f64
}

fn medication_targets(records: &[&Record], m: usize) -> Tensor {
    let mut t = Tensor::zeros(&[records.len(), m]);
    for (i, r) in records.iter().enumerate() {
        for &j in &r.medications {
            t.data_mut()[i * m + j] = 1.0;
        }
    }
    t
}

/// Frozen `[r_d ‖ r_p]` rows, one per record.
fn cached_features(params: &ParamSet, enc: &EncoderConfig, sizes: VocabSizes, records: &[&Record], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let items: Vec<BatchItem> = chunk.iter().map(|r| BatchItem::plain(r)).collect();
        let batch = collate(&items, Mode::Tune { prompts: 0 }, enc.max_len, sizes);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(params);
        let x = features(&mut g, &mut binder, enc, &batch)?;
        let v = g.value(x);
        out.extend((0..batch.size()).map(|b| v.row(b).to_vec()));
    }
    Ok(out)
}

fn rows_tensor(rows: &[&Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// Trains one model with Adam and early stopping on validation Jaccard.
/// Returns the best parameters and the per-epoch history; epoch 0 is the
/// evaluation at initialization.
fn train_job(
    job: &Job,
    enc: &EncoderConfig,
    sizes: VocabSizes,
    cfg: &TuneConfig,
    seed: u64,
    cache_backbone: bool,
) -> Result<(ParamSet, Vec<TuneEpoch>)> {
    let mut state = job.params.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let mode = Mode::Tune { prompts: job.prompts };
    let bs = cfg.batch_size;
    let (train_cache, val_cache) = if cache_backbone {
        (
            Some(cached_features(&state, enc, sizes, &job.train, bs)?),
            Some(cached_features(&state, enc, sizes, &job.validation, bs)?),
        )
    } else {
        (None, None)
    };
    let val_probs = |state: &ParamSet| -> Result<Vec<Vec<f64>>> {
        match &val_cache {
            Some(feats) => {
                let mut out = Vec::with_capacity(feats.len());
                for chunk in feats.chunks(bs) {
                    let mut g = Graph::new();
                    let mut binder = Binder::frozen(state);
                    let x = g.constant(rows_tensor(&chunk.iter().collect::<Vec<_>>())?)?;
                    let logits = head_logits(&mut g, &mut binder, x)?;
                    let v = g.value(logits);
                    out.extend((0..chunk.len()).map(|b| v.row(b).iter().map(|&z| sigmoid(z)).collect()));
                }
                Ok(out)
            }
            None => predict_with(state, enc, sizes, job.prompts, &job.validation, bs),
        }
    };

    let mut history = Vec::new();
    let mut best = state.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 0..=cfg.max_epochs {
        let tag = epoch.to_string();
        let mut order: Vec<usize> = (0..job.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &["tune-shuffle", &job.key, &tag]));
        let (mut loss_sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(bs) {
            let records: Vec<&Record> = chunk.iter().map(|&i| job.train[i]).collect();
            let targets = medication_targets(&records, sizes.medications);
            let mut g = Graph::new();
            let mut binder = if epoch == 0 {
                Binder::frozen(&state)
            } else {
                Binder::new(&state, job.trainable)
            };
            let logits = match &train_cache {
                Some(feats) => {
                    let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &feats[i]).collect();
                    let x = g.constant(rows_tensor(&rows)?)?;
                    head_logits(&mut g, &mut binder, x)?
                }
                None => {
                    let items: Vec<BatchItem> = records.iter().map(|r| BatchItem::plain(r)).collect();
                    let batch = collate(&items, mode, enc.max_len, sizes);
                    recommend_logits(&mut g, &mut binder, enc, &batch)?
                }
            };
            let loss = tune_loss(&mut g, logits, &targets)?;
            let lv = g.value(loss).item();
            check_finite(lv, &format!("tuning `{}` epoch {epoch}", job.key))?;
            loss_sum += lv * records.len() as f64;
            n += records.len();
            if epoch > 0 {
                g.backward(loss)?;
                let grads = binder.grads(&g);
                drop(binder);
                adam.step(&mut state, &grads)?;
            }
        }
        let train_loss = loss_sum / n.max(1) as f64;
        let validation_jaccard = mean_jaccard(&val_probs(&state)?, &job.validation, cfg.threshold);
        log::debug!("tune {} epoch {epoch}: loss {train_loss:.5}, validation jaccard {validation_jaccard:.5}", job.key);
        history.push(TuneEpoch {
            epoch,
            train_loss,
            validation_jaccard,
        });
        if validation_jaccard > best_score {
            best_score = validation_jaccard;
            best = state.clone();
            stale = 0;
        } else if epoch > 0 {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Runs stage 2 under `cfg.regime`.
///
/// `pretrained` is required by the prompt, finetune and finetune-freeze
/// regimes and ignored by full-train and single-train, which start from
/// [`BackboneParams::init_seeded`]. Centers are trained on up to `jobs`
/// threads; every center draws from its own seeded streams, so the result
/// does not depend on `jobs`.
pub fn run_tune(
    dataset: &MultiCenterDataset,
    pretrained: Option<&BackboneParams>,
    enc: &EncoderConfig,
    cfg: &TuneConfig,
    seed: u64,
    jobs: usize,
) -> Result<(CenterModelStore, TuneReport)> {
    cfg.validate()?;
    let sizes = dataset.vocab.sizes();
    let regime = cfg.regime;
    let backbone = if regime.needs_pretrained_backbone() {
        let b = pretrained.ok_or_else(|| Error::MissingArtifact("pretrained backbone required".into()))?;
        if b.sizes != sizes {
            return Err(Error::InvalidData("backbone vocabulary sizes differ from the dataset".into()));
        }
        b.clone()
    } else {
        BackboneParams::init_seeded(enc, sizes, seed)?
    };
    let enc = &backbone.config;
    let prompts = cfg.effective_prompts();
    let c = enc.dim;
    let adapter_init = |key: &str| init_adapter(c, sizes, prompts, &mut rng::stream(seed, &["adapter-init", regime.as_str(), key]));

    let mut work: Vec<Job> = Vec::new();
    if regime == Regime::FullTrain {
        work.push(Job {
            key: POOLED.to_string(),
            params: backbone.params.merged(&adapter_init(POOLED)),
            trainable: everything,
            prompts,
            train: dataset.pooled(Partition::Train),
            validation: dataset.pooled(Partition::Validation),
        });
    } else {
        for center in dataset.center_ids() {
            work.push(Job {
                key: center.clone(),
                params: backbone.params.merged(&adapter_init(center)),
                trainable: match regime {
                    Regime::Prompt => adapter_only,
                    Regime::FinetuneFreeze => head_only,
                    _ => everything,
                },
                prompts,
                train: dataset.partition(center, Partition::Train)?,
                validation: dataset.partition(center, Partition::Validation)?,
            });
        }
    }

    let cache = regime == Regime::FinetuneFreeze;
    let results: Vec<Result<(ParamSet, Vec<TuneEpoch>)>> = if jobs <= 1 || work.len() <= 1 {
        work.iter().map(|j| train_job(j, enc, sizes, cfg, seed, cache)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<(ParamSet, Vec<TuneEpoch>)>>>> =
            work.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs.min(work.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= work.len() {
                        break;
                    }
                    let r = train_job(&work[i], enc, sizes, cfg, seed, cache);
                    *slots[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("job ran"))
            .collect()
    };

    let mut adapters = BTreeMap::new();
    let mut history = BTreeMap::new();
    let mut tuned = BTreeMap::new();
    let mut shared_backbone = None;
    for (job, res) in work.iter().zip(results) {
        let (params, hist) = res?;
        let count: usize = params.iter().filter(|(n, _)| (job.trainable)(n)).map(|(_, t)| t.len()).sum();
        tuned.insert(job.key.clone(), count);
        history.insert(job.key.clone(), hist);
        let adapter_params = if regime.shares_backbone() {
            if regime == Regime::FullTrain {
                shared_backbone = Some(params.filter(BackboneParams::is_backbone_param));
            }
            params.filter(adapter_only)
        } else {
            params
        };
        adapters.insert(
            job.key.clone(),
            CenterAdapter {
                center_id: job.key.clone(),
                params: adapter_params,
            },
        );
    }
    let backbone_params = match regime {
        Regime::Prompt | Regime::FinetuneFreeze => Some(backbone.params.clone()),
        Regime::FullTrain => shared_backbone,
        _ => None,
    };
    let store = CenterModelStore {
        regime,
        encoder: enc.clone(),
        sizes,
        backbone: backbone_params,
        adapters,
        config_hash: String::new(),
    };
    Ok((
        store,
        TuneReport {
            history,
            tuned_parameters: tuned,
        },
    ))
}

/// `2·b·c + (2c·c + c) + (c·|M| + |M|)`: prompts plus head.
pub fn prompt_regime_parameter_count(b: usize, c: usize, medications: usize) -> usize {
    2 * b * c + (2 * c * c + c) + (c * medications + medications)
}

/// Size in bytes of every file under `dir`.
pub fn directory_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let meta = entry.metadata().map_err(|e| Error::io(entry.path(), e))?;
        total += if meta.is_dir() { directory_bytes(&entry.path())? } else { meta.len() };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};

    fn tiny() -> (MultiCenterDataset, EncoderConfig) {
        let gen = GeneratorConfig {
            centers: 2,
            records_min: 50,
            records_max: 70,
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

    fn quick(regime: Regime) -> TuneConfig {
        TuneConfig {
            regime,
            max_epochs: 2,
            patience: 5,
            batch_size: 16,
            learning_rate: 5e-3,
            ..Default::default()
        }
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert!("bogus".parse::<Regime>().is_err());
    }

    #[test]
    fn loss_at_zero_logits() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 5])).unwrap();
        let mut y = Tensor::zeros(&[2, 5]);
        y.data_mut()[1] = 1.0;
        let l = tune_loss(&mut g, z, &y).unwrap();
        assert!((g.value(l).item() - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let big = g.constant(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap()).unwrap();
        let l = tune_loss(&mut g, big, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn prompt_regime_requires_backbone() {
        let (ds, enc) = tiny();
        let err = run_tune(&ds, None, &enc, &quick(Regime::Prompt), 1, 1).unwrap_err();
        assert!(err.to_string().contains("pretrained backbone required"));
    }

    #[test]
    fn prompt_regime_freezes_backbone_and_audits_count() {
        let (ds, enc) = tiny();
        let bb = BackboneParams::init_seeded(&enc, ds.vocab.sizes(), 9).unwrap();
        let (store, report) = run_tune(&ds, Some(&bb), &enc, &quick(Regime::Prompt), 1, 1).unwrap();
        assert_eq!(store.backbone.as_ref().unwrap(), &bb.params);
        let expected = prompt_regime_parameter_count(2, 8, 16);
        assert!(report.tuned_parameters.values().all(|&n| n == expected));
        for a in store.adapters.values() {
            assert_eq!(a.params.numel(), expected);
        }
    }

    #[test]
    fn zero_prompts_match_the_plain_path() {
        let (ds, enc) = tiny();
        let sizes = ds.vocab.sizes();
        let bb = BackboneParams::init_seeded(&enc, sizes, 2).unwrap();
        let params = bb.params.merged(&init_adapter(8, sizes, 0, &mut rng::stream(0, &[])));
        let recs = ds.pooled(Partition::Test);
        let a = predict_with(&params, &enc, sizes, 0, &recs[..3], 8).unwrap();
        for (r, p) in recs[..3].iter().zip(&a) {
            let one = predict_with(&params, &enc, sizes, 0, &[*r], 1).unwrap();
            assert_eq!(&one[0], p);
            assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
            assert_eq!(p.len(), 16);
        }
    }

    #[test]
    fn parallel_and_serial_stores_agree() {
        let (ds, enc) = tiny();
        let bb = BackboneParams::init_seeded(&enc, ds.vocab.sizes(), 4).unwrap();
        let (a, _) = run_tune(&ds, Some(&bb), &enc, &quick(Regime::Prompt), 5, 1).unwrap();
        let (b, _) = run_tune(&ds, Some(&bb), &enc, &quick(Regime::Prompt), 5, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn store_round_trips_through_files() {
        let (ds, enc) = tiny();
        for regime in Regime::ALL {
            let bb = BackboneParams::init_seeded(&enc, ds.vocab.sizes(), 4).unwrap();
            let (store, _) = run_tune(&ds, Some(&bb), &enc, &quick(regime), 5, 1).unwrap();
            let dir = tempfile::tempdir().unwrap();
            store.save(dir.path()).unwrap();
            let back = CenterModelStore::load(dir.path()).unwrap();
            assert_eq!(back, store, "{regime}");
            let r = &ds.pooled(Partition::Test)[0];
            let got = infer(r, &r.center_id, &back, 0.3).unwrap();
            assert!(got.windows(2).all(|w| w[0] < w[1]));
            assert!(infer(r, &r.center_id, &back, 1.0).unwrap().is_empty());
        }
    }

    #[test]
    fn finetune_freeze_changes_only_the_head() {
        let (ds, enc) = tiny();
        let bb = BackboneParams::init_seeded(&enc, ds.vocab.sizes(), 4).unwrap();
        let (store, report) = run_tune(&ds, Some(&bb), &enc, &quick(Regime::FinetuneFreeze), 5, 1).unwrap();
        assert_eq!(store.backbone.as_ref().unwrap(), &bb.params);
        assert!(report.tuned_parameters.values().all(|&n| n == 2 * 8 * 8 + 8 + 8 * 16 + 16));
        assert!(store.adapters.values().all(|a| !a.params.contains("prompt_d")));
    }

    #[test]
    fn unknown_center_is_reported() {
        let (ds, enc) = tiny();
        let bb = BackboneParams::init_seeded(&enc, ds.vocab.sizes(), 4).unwrap();
        let (store, _) = run_tune(&ds, Some(&bb), &enc, &quick(Regime::Prompt), 5, 1).unwrap();
        let r = &ds.pooled(Partition::Test)[0];
        assert!(matches!(infer(r, "nowhere", &store, 0.3), Err(Error::UnknownCenter(_))));
    }
}
