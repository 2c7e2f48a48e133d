//! Twin transformer set-encoder with CLS readout and no positional
//! embedding.
//!
//! Parameters live in a flat [`ParamSet`] under the names
//! `E_d`, `E_p` and `encoder.layer{i}.{W_Q,W_K,W_V,W_O,W_1,b_1,W_2,b_2,ln1.gain,ln1.bias,ln2.gain,ln2.bias}`.
//! `W_Q`, `W_K`, `W_V` are stored as `c × c` matrices whose column block
//! `a·c/A .. (a+1)·c/A` is head `a`'s projection. With separate towers the
//! procedure tower reads `encoder_p.layer{i}.*` instead.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, TowerInput, VocabSizes};
use crate::error::{Error, Result};
use crate::numerics::{fan_in_uniform, AttentionLayout, Binder, Checkpoint, Graph, ParamSet, Tensor, Var, ATTENTION_MASK_BIAS};
use crate::rng::Rng;

pub const LAYER_TENSORS: [&str; 12] = [
    "W_Q", "W_K", "W_V", "W_O", "W_1", "b_1", "W_2", "b_2", "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding width c.
    pub dim: usize,
    /// Transformer layers K.
    pub layers: usize,
    /// Attention heads A.
    pub heads: usize,
    pub max_len: usize,
    pub shared_towers: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            layers: 2,
            heads: 2,
            max_len: 100,
            shared_towers: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!("must divide dim ({}), got {}", self.dim, self.heads),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2"));
        }
        Ok(())
    }

    fn to_meta(&self, ckpt: Checkpoint) -> Checkpoint {
        ckpt.with_meta("encoder.dim", self.dim)
            .with_meta("encoder.layers", self.layers)
            .with_meta("encoder.heads", self.heads)
            .with_meta("encoder.max_len", self.max_len)
            .with_meta("encoder.shared_towers", self.shared_towers)
    }

    fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        fn field<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
            ckpt.metadata
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::MissingParam(format!("checkpoint metadata `{key}`")))
        }
        Ok(Self {
            dim: field(ckpt, "encoder.dim")?,
            layers: field(ckpt, "encoder.layers")?,
            heads: field(ckpt, "encoder.heads")?,
            max_len: field(ckpt, "encoder.max_len")?,
            shared_towers: field(ckpt, "encoder.shared_towers")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Diagnosis,
    Procedure,
}

impl Tower {
    pub fn table(self) -> &'static str {
        match self {
            Tower::Diagnosis => "E_d",
            Tower::Procedure => "E_p",
        }
    }

    pub fn prompt(self) -> &'static str {
        match self {
            Tower::Diagnosis => "prompt_d",
            Tower::Procedure => "prompt_p",
        }
    }

    pub fn layer_prefix(self, cfg: &EncoderConfig, layer: usize) -> String {
        match (self, cfg.shared_towers) {
            (Tower::Procedure, false) => format!("encoder_p.layer{layer}"),
            _ => format!("encoder.layer{layer}"),
        }
    }
}

/// Backbone `{E_d, E_p, Θ_encoder}` plus the architecture it was built with.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: EncoderConfig,
    pub sizes: VocabSizes,
    pub params: ParamSet,
}

fn layer_params(prefix: &str, c: usize, rng: &mut Rng, out: &mut ParamSet) {
    for w in ["W_Q", "W_K", "W_V", "W_O", "W_1", "W_2"] {
        out.insert(format!("{prefix}.{w}"), fan_in_uniform(&[c, c], c, rng));
    }
    for b in ["b_1", "b_2", "ln1.bias", "ln2.bias"] {
        out.insert(format!("{prefix}.{b}"), Tensor::zeros(&[c]));
    }
    for gname in ["ln1.gain", "ln2.gain"] {
        out.insert(format!("{prefix}.{gname}"), Tensor::full(&[c], 1.0));
    }
}

impl BackboneParams {
    /// Fresh initialization: embeddings and weights uniform in ±1/√c, biases
    /// zero, layer-norm gains one.
    pub fn init(config: &EncoderConfig, sizes: VocabSizes, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let mut params = ParamSet::new();
        params.insert("E_d", fan_in_uniform(&[sizes.diagnoses + 2, c], c, rng));
        params.insert("E_p", fan_in_uniform(&[sizes.procedures + 2, c], c, rng));
        for i in 0..config.layers {
            layer_params(&format!("encoder.layer{i}"), c, rng, &mut params);
        }
        if !config.shared_towers {
            for i in 0..config.layers {
                layer_params(&format!("encoder_p.layer{i}"), c, rng, &mut params);
            }
        }
        Ok(Self {
            config: config.clone(),
            sizes,
            params,
        })
    }

    /// [`BackboneParams::init`] on the stream every regime shares for a run
    /// seed, so pretrained and from-scratch models start from the same point.
    pub fn init_seeded(config: &EncoderConfig, sizes: VocabSizes, seed: u64) -> Result<Self> {
        Self::init(config, sizes, &mut crate::rng::stream(seed, &["backbone-init"]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let ckpt = Checkpoint::new(self.params.clone())
            .with_meta("kind", "backbone")
            .with_meta("init", "uniform_fan_in")
            .with_meta("vocab.diagnoses", self.sizes.diagnoses)
            .with_meta("vocab.procedures", self.sizes.procedures)
            .with_meta("vocab.medications", self.sizes.medications);
        self.config.to_meta(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = EncoderConfig::from_meta(ckpt)?;
        let size = |k: &str| -> Result<usize> {
            ckpt.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::MissingParam(format!("checkpoint metadata `{k}`")))
        };
        let sizes = VocabSizes {
            diagnoses: size("vocab.diagnoses")?,
            procedures: size("vocab.procedures")?,
            medications: size("vocab.medications")?,
        };
        let bb = Self {
            config,
            sizes,
            params: ckpt.params.clone(),
        };
        for name in bb.param_names() {
            if !bb.params.contains(&name) {
                return Err(Error::MissingParam(name));
            }
        }
        Ok(bb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Names of every backbone tensor.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["E_d".to_string(), "E_p".to_string()];
        let mut prefixes = vec!["encoder"];
        if !self.config.shared_towers {
            prefixes.push("encoder_p");
        }
        for p in prefixes {
            for i in 0..self.config.layers {
                names.extend(LAYER_TENSORS.iter().map(|t| format!("{p}.layer{i}.{t}")));
            }
        }
        names
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name == "E_d" || name == "E_p" || name.starts_with("encoder.") || name.starts_with("encoder_p.")
    }
}

/// Single-sequence attention `softmax(QKᵀ/√c + mask)V` composed from tape
/// primitives. `c` is the column count of `q`; keys with `key_mask[j] ==
/// false` receive [`ATTENTION_MASK_BIAS`].
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
    let (lq, c) = (g.value(q).rows(), g.value(q).cols());
    let lk = g.value(k).rows();
    if key_mask.len() != lk {
        return Err(Error::Shape(format!("attention mask length {} vs {lk} keys", key_mask.len())));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let mut bias = Tensor::zeros(&[lq, lk]);
    for i in 0..lq {
        for (j, &keep) in key_mask.iter().enumerate() {
            if !keep {
                bias.data_mut()[i * lk + j] = ATTENTION_MASK_BIAS;
            }
        }
    }
    let scores = g.add_const(scores, &bias)?;
    let p = g.softmax_rows(scores)?;
    g.matmul(p, v)
}

/// One post-LN transformer layer over stacked sequences `x` (`(B·L) × c`).
pub fn transformer_layer(
    g: &mut Graph,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    mask: &[bool],
    layout: AttentionLayout,
) -> Result<Var> {
    let mut p = |g: &mut Graph, n: &str| binder.get(g, &format!("{prefix}.{n}"));
    let (wq, wk, wv, wo) = (p(g, "W_Q")?, p(g, "W_K")?, p(g, "W_V")?, p(g, "W_O")?);
    let (w1, b1, w2, b2) = (p(g, "W_1")?, p(g, "b_1")?, p(g, "W_2")?, p(g, "b_2")?);
    let (g1, be1, g2, be2) = (p(g, "ln1.gain")?, p(g, "ln1.bias")?, p(g, "ln2.gain")?, p(g, "ln2.bias")?);

    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let heads = g.attention(q, k, v, mask, layout)?;
    let att = g.matmul(heads, wo)?;
    let res = g.add(x, att)?;
    let m = g.layer_norm(res, g1, be1)?;

    let h = g.matmul(m, w1)?;
    let h = g.add_row_bias(h, b1)?;
    let h = g.relu(h)?;
    let f = g.matmul(h, w2)?;
    let f = g.add_row_bias(f, b2)?;
    let res = g.add(m, f)?;
    g.layer_norm(res, g2, be2)
}

/// Runs one tower and returns the CLS rows, `B × c`.
///
/// When `input` carries prompt slots their ids index rows appended below the
/// embedding table, so the tower's prompt matrix must be bound in `binder`.
pub fn encode_tower(
    g: &mut Graph,
    binder: &mut Binder,
    cfg: &EncoderConfig,
    tower: Tower,
    input: &TowerInput,
    prompts: usize,
) -> Result<Var> {
    let mut table = binder.get(g, tower.table())?;
    if prompts > 0 {
        let prompt = binder.get(g, tower.prompt())?;
        if g.value(prompt).rows() != prompts {
            return Err(Error::Shape(format!(
                "`{}` has {} rows, batch expects {prompts}",
                tower.prompt(),
                g.value(prompt).rows()
            )));
        }
        table = g.concat_rows(table, prompt)?;
    }
    let mut x = g.gather_rows(table, &input.ids)?;
    let layout = AttentionLayout {
        batch: input.batch,
        len: input.len,
        heads: cfg.heads,
    };
    for i in 0..cfg.layers {
        x = transformer_layer(g, binder, &tower.layer_prefix(cfg, i), x, &input.mask, layout)?;
    }
    g.gather_rows(x, &input.cls_rows())
}

/// Encodes both towers of a batch: `(r_d, r_p)`, each `B × c`.
pub fn encode(g: &mut Graph, binder: &mut Binder, cfg: &EncoderConfig, batch: &Batch) -> Result<(Var, Var)> {
    let prompts = batch.mode.prompts();
    let rd = encode_tower(g, binder, cfg, Tower::Diagnosis, &batch.diagnoses, prompts)?;
    let rp = encode_tower(g, binder, cfg, Tower::Procedure, &batch.procedures, prompts)?;
    Ok((rd, rp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collate, BatchItem, Mode, Record};
    use crate::rng;

    fn sizes() -> VocabSizes {
        VocabSizes {
            diagnoses: 10,
            procedures: 8,
            medications: 6,
        }
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            max_len: 20,
            shared_towers: true,
        }
    }

    fn value_of(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = EncoderConfig {
            dim: 10,
            heads: 3,
            ..small_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_key_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.3, 0.5]]).unwrap()).unwrap();
        let k = g.constant(Tensor::from_rows(&[vec![4.0, 1.0]]).unwrap()).unwrap();
        let v = g.constant(Tensor::from_rows(&[vec![7.0, 9.0]]).unwrap()).unwrap();
        let out = attention(&mut g, q, k, v, &[true]).unwrap();
        assert_eq!(value_of(&g, out), vec![7.0, 9.0, 7.0, 9.0]);
    }

    #[test]
    fn identical_keys_and_values_give_that_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![0.2, 0.9]]).unwrap()).unwrap();
        let k = g.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap()).unwrap();
        let v = g.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap()).unwrap();
        let out = attention(&mut g, q, k, v, &[true, true]).unwrap();
        let got = value_of(&g, out);
        assert!((got[0] - 3.0).abs() < 1e-12 && (got[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_shapes_and_checkpoint_round_trip() {
        let cfg = small_cfg();
        let bb = BackboneParams::init(&cfg, sizes(), &mut rng::stream(1, &["init"])).unwrap();
        assert_eq!(bb.params.get("E_d").unwrap().shape(), &[12, 8]);
        assert_eq!(bb.params.get("E_p").unwrap().shape(), &[10, 8]);
        assert_eq!(bb.params.len(), 2 + 12 * cfg.layers);
        let back = BackboneParams::from_checkpoint(&Checkpoint::from_bytes(&bb.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, bb);
    }

    #[test]
    fn separate_towers_duplicate_layers() {
        let cfg = EncoderConfig {
            shared_towers: false,
            ..small_cfg()
        };
        let bb = BackboneParams::init(&cfg, sizes(), &mut rng::stream(1, &["init"])).unwrap();
        assert_eq!(bb.params.len(), 2 + 24 * cfg.layers);
        assert_ne!(
            bb.params.get("encoder.layer0.W_Q").unwrap(),
            bb.params.get("encoder_p.layer0.W_Q").unwrap()
        );
    }

    #[test]
    fn shared_towers_transform_identically() {
        // Same embedding table on both sides ⇒ same representation.
        let cfg = small_cfg();
        let mut s = sizes();
        s.procedures = s.diagnoses;
        let mut bb = BackboneParams::init(&cfg, s, &mut rng::stream(3, &["init"])).unwrap();
        let e = bb.params.get("E_d").unwrap().clone();
        bb.params.insert("E_p", e);
        let r = Record::new("c", vec![1, 4, 7], vec![1, 4, 7], vec![0]).unwrap();
        let batch = collate(&[BatchItem::plain(&r)], Mode::Pretrain, cfg.max_len, s);
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&bb.params);
        let (rd, rp) = encode(&mut g, &mut binder, &cfg, &batch).unwrap();
        assert_eq!(value_of(&g, rd), value_of(&g, rp));
    }

    #[test]
    fn changing_a_code_changes_the_representation() {
        let cfg = small_cfg();
        let bb = BackboneParams::init(&cfg, sizes(), &mut rng::stream(4, &["init"])).unwrap();
        let a = Record::new("c", vec![1, 2, 3], vec![0], vec![0]).unwrap();
        let b = Record::new("c", vec![1, 2, 5], vec![0], vec![0]).unwrap();
        let batch = collate(&[BatchItem::plain(&a), BatchItem::plain(&b)], Mode::Pretrain, cfg.max_len, sizes());
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&bb.params);
        let (rd, _) = encode(&mut g, &mut binder, &cfg, &batch).unwrap();
        let v = g.value(rd);
        assert_ne!(v.row(0), v.row(1));
    }
}
