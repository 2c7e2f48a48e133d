use rand::seq::index;
use rand::Rng;

use super::record::Record;
use super::vocab::VocabSizes;
use crate::numerics::Tensor;

pub const DEFAULT_MASK_RATIO: f64 = 0.15;

/// Result of masking one record's diagnosis and procedure sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSample {
    /// Diagnosis token ids with masked positions replaced by the MASK id.
    pub diagnosis_tokens: Vec<usize>,
    pub procedure_tokens: Vec<usize>,
    /// Codes hidden from the encoder; the multi-hot targets `y_d` / `y_p`.
    pub masked_diagnoses: Vec<usize>,
    pub masked_procedures: Vec<usize>,
}

/// Number of positions to hide in a set of `n`: `round(ratio·n)`, at least
/// one when the set is non-empty.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

fn mask_set<R: Rng + ?Sized>(codes: &[usize], ratio: f64, mask_id: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let k = mask_count(codes.len(), ratio);
    let mut picked = index::sample(rng, codes.len(), k).into_vec();
    picked.sort_unstable();
    let mut tokens = codes.to_vec();
    let mut masked = Vec::with_capacity(k);
    for i in picked {
        masked.push(codes[i]);
        tokens[i] = mask_id;
    }
    (tokens, masked)
}

/// Independently hides `round(ratio·size)` (minimum one) codes of each
/// non-empty set behind the MASK token.
pub fn mask_sample<R: Rng + ?Sized>(record: &Record, ratio: f64, sizes: VocabSizes, rng: &mut R) -> MaskSample {
    let (diagnosis_tokens, masked_diagnoses) = mask_set(&record.diagnoses, ratio, sizes.diagnoses + 1, rng);
    let (procedure_tokens, masked_procedures) = mask_set(&record.procedures, ratio, sizes.procedures + 1, rng);
    MaskSample {
        diagnosis_tokens,
        procedure_tokens,
        masked_diagnoses,
        masked_procedures,
    }
}

/// How sequences are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `[CLS, codes…]`
    Pretrain,
    /// `[CLS, prompt_1…prompt_b, codes…]`
    Tune { prompts: usize },
}

impl Mode {
    pub fn prompts(self) -> usize {
        match self {
            Mode::Pretrain => 0,
            Mode::Tune { prompts } => prompts,
        }
    }
}

/// Everything collate needs from one record.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub center_id: String,
    pub diagnosis_tokens: Vec<usize>,
    pub procedure_tokens: Vec<usize>,
    pub masked_diagnoses: Vec<usize>,
    pub masked_procedures: Vec<usize>,
    pub medications: Vec<usize>,
}

impl BatchItem {
    pub fn plain(r: &Record) -> Self {
        Self {
            center_id: r.center_id.clone(),
            diagnosis_tokens: r.diagnoses.clone(),
            procedure_tokens: r.procedures.clone(),
            masked_diagnoses: Vec::new(),
            masked_procedures: Vec::new(),
            medications: r.medications.clone(),
        }
    }

    pub fn masked(r: &Record, m: MaskSample) -> Self {
        Self {
            center_id: r.center_id.clone(),
            diagnosis_tokens: m.diagnosis_tokens,
            procedure_tokens: m.procedure_tokens,
            masked_diagnoses: m.masked_diagnoses,
            masked_procedures: m.masked_procedures,
            medications: r.medications.clone(),
        }
    }
}

/// Padded id matrix for one tower.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerInput {
    /// Row-major `batch × len` token ids. Padding positions hold the CLS id.
    pub ids: Vec<usize>,
    /// `true` for real positions, `false` for padding.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TowerInput {
    fn build(seqs: &[Vec<usize>], cls: usize, prompt_base: usize, prompts: usize, max_len: usize) -> Self {
        let keep = max_len.saturating_sub(1 + prompts);
        let len = seqs.iter().map(|s| 1 + prompts + s.len().min(keep)).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.push(cls);
            mask.push(true);
            for k in 0..prompts {
                ids.push(prompt_base + k);
                mask.push(true);
            }
            let body = &s[..s.len().min(keep)];
            ids.extend_from_slice(body);
            mask.extend(std::iter::repeat_n(true, body.len()));
            let pad = len - 1 - prompts - body.len();
            ids.extend(std::iter::repeat_n(cls, pad));
            mask.extend(std::iter::repeat_n(false, pad));
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            len,
        }
    }

    /// Row offsets of every CLS position.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.len).collect()
    }

    /// Code tokens of row `b` with CLS, prompt slots and padding stripped.
    pub fn codes(&self, b: usize, prompts: usize) -> Vec<usize> {
        let row = &self.ids[b * self.len..(b + 1) * self.len];
        let m = &self.mask[b * self.len..(b + 1) * self.len];
        row.iter()
            .zip(m)
            .skip(1 + prompts)
            .filter(|(_, &keep)| keep)
            .map(|(&id, _)| id)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mode: Mode,
    pub diagnoses: TowerInput,
    pub procedures: TowerInput,
    /// `batch × |D|` multi-hot of masked diagnoses.
    pub masked_diagnosis_targets: Tensor,
    /// `batch × |P|` multi-hot of masked procedures.
    pub masked_procedure_targets: Tensor,
    /// `batch × |M|` multi-hot of prescribed medications.
    pub medication_targets: Tensor,
    pub center_ids: Vec<String>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.center_ids.len()
    }
}

fn multi_hot(rows: impl Iterator<Item = Vec<usize>>, n_rows: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n_rows, width]);
    for (i, ids) in rows.enumerate() {
        for id in ids {
            t.data_mut()[i * width + id] = 1.0;
        }
    }
    t
}

/// Assembles padded tower inputs and target matrices.
///
/// Sequences are truncated so that CLS, the prompt slots and the kept codes
/// fit in `max_len`; the batch is padded to its longest row.
///
/// # Panics
/// If `items` is empty.
pub fn collate(items: &[BatchItem], mode: Mode, max_len: usize, sizes: VocabSizes) -> Batch {
    assert!(!items.is_empty(), "collate needs at least one record");
    let prompts = mode.prompts();
    let d_seqs: Vec<Vec<usize>> = items.iter().map(|i| i.diagnosis_tokens.clone()).collect();
    let p_seqs: Vec<Vec<usize>> = items.iter().map(|i| i.procedure_tokens.clone()).collect();
    let n = items.len();
    Batch {
        mode,
        diagnoses: TowerInput::build(&d_seqs, sizes.diagnoses, sizes.diagnoses + 2, prompts, max_len),
        procedures: TowerInput::build(&p_seqs, sizes.procedures, sizes.procedures + 2, prompts, max_len),
        masked_diagnosis_targets: multi_hot(items.iter().map(|i| i.masked_diagnoses.clone()), n, sizes.diagnoses),
        masked_procedure_targets: multi_hot(items.iter().map(|i| i.masked_procedures.clone()), n, sizes.procedures),
        medication_targets: multi_hot(items.iter().map(|i| i.medications.clone()), n, sizes.medications),
        center_ids: items.iter().map(|i| i.center_id.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    const SIZES: VocabSizes = VocabSizes {
        diagnoses: 200,
        procedures: 20,
        medications: 5,
    };

    fn rec(d: Vec<usize>, p: Vec<usize>) -> Record {
        Record::new("c", d, p, vec![0]).unwrap()
    }

    #[test]
    fn single_diagnosis_is_always_masked() {
        for ratio in [0.01, 0.15, 0.9] {
            let m = mask_sample(&rec(vec![4], vec![]), ratio, SIZES, &mut rng::stream(1, &[]));
            assert_eq!(m.masked_diagnoses, vec![4]);
            assert_eq!(m.diagnosis_tokens, vec![SIZES.diagnoses + 1]);
        }
    }

    #[test]
    fn ratio_034_of_three_masks_one() {
        let m = mask_sample(&rec(vec![3, 7, 9], vec![]), 0.34, SIZES, &mut rng::stream(2, &[]));
        assert_eq!(m.masked_diagnoses.len(), 1);
        let items = [BatchItem::masked(&rec(vec![3, 7, 9], vec![]), m)];
        let b = collate(&items, Mode::Pretrain, 100, SIZES);
        assert_eq!(b.masked_diagnosis_targets.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn empty_procedures_mask_nothing() {
        let r = rec(vec![1, 2], vec![]);
        let m = mask_sample(&r, 0.5, SIZES, &mut rng::stream(3, &[]));
        assert!(m.masked_procedures.is_empty());
        let b = collate(&[BatchItem::masked(&r, m)], Mode::Pretrain, 100, SIZES);
        assert!(b.masked_procedure_targets.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.procedures.len, 1);
    }

    #[test]
    fn padding_layout() {
        let items = [
            BatchItem::plain(&rec(vec![1, 2], vec![0])),
            BatchItem::plain(&rec(vec![1, 2, 3, 4], vec![0])),
        ];
        let b = collate(&items, Mode::Pretrain, 100, SIZES);
        assert_eq!(b.diagnoses.len, 5);
        assert_eq!(&b.diagnoses.mask[..5], &[true, true, true, false, false]);
        assert_eq!(&b.diagnoses.mask[5..], &[true; 5]);
        assert_eq!(b.diagnoses.ids[0], SIZES.diagnoses);
        assert_eq!(b.diagnoses.ids[5], SIZES.diagnoses);
    }

    #[test]
    fn truncation_keeps_cls_plus_99() {
        let r = rec((0..150).collect(), vec![]);
        let b = collate(&[BatchItem::plain(&r)], Mode::Pretrain, 100, SIZES);
        assert_eq!(b.diagnoses.len, 100);
        assert_eq!(b.diagnoses.codes(0, 0), (0..99).collect::<Vec<_>>());
    }

    #[test]
    fn tune_layout_places_prompts_after_cls() {
        let r = rec(vec![5, 6], vec![1]);
        let b = collate(&[BatchItem::plain(&r)], Mode::Tune { prompts: 2 }, 100, SIZES);
        let d = SIZES.diagnoses;
        assert_eq!(b.diagnoses.ids, vec![d, d + 2, d + 3, 5, 6]);
        let p = SIZES.procedures;
        assert_eq!(b.procedures.ids, vec![p, p + 2, p + 3, 1]);
        // Truncation budget shrinks by the prompt count.
        let long = rec((0..150).collect(), vec![]);
        let b = collate(&[BatchItem::plain(&long)], Mode::Tune { prompts: 2 }, 100, SIZES);
        assert_eq!(b.diagnoses.codes(0, 2).len(), 97);
    }

    proptest! {
        #[test]
        fn unpadding_recovers_inputs(
            sets in prop::collection::vec(
                (prop::collection::btree_set(0usize..200, 1..12), prop::collection::btree_set(0usize..20, 0..6)),
                1..6),
            prompts in 0usize..3,
        ) {
            let records: Vec<Record> = sets
                .iter()
                .map(|(d, p)| rec(d.iter().copied().collect(), p.iter().copied().collect()))
                .collect();
            let items: Vec<BatchItem> = records.iter().map(BatchItem::plain).collect();
            let mode = if prompts == 0 { Mode::Pretrain } else { Mode::Tune { prompts } };
            let b = collate(&items, mode, 100, SIZES);
            for (i, r) in records.iter().enumerate() {
                prop_assert_eq!(b.diagnoses.codes(i, prompts), r.diagnoses.clone());
                prop_assert_eq!(b.procedures.codes(i, prompts), r.procedures.clone());
                prop_assert_eq!(b.diagnoses.ids[i * b.diagnoses.len], SIZES.diagnoses);
            }
        }

        #[test]
        fn masks_hide_exactly_the_targets(
            d in prop::collection::btree_set(0usize..200, 1..20),
            p in prop::collection::btree_set(0usize..20, 0..10),
            ratio in 0.01f64..0.99,
            seed in 0u64..1000,
        ) {
            let r = rec(d.iter().copied().collect(), p.iter().copied().collect());
            let m = mask_sample(&r, ratio, SIZES, &mut rng::stream(seed, &[]));
            prop_assert_eq!(m.masked_diagnoses.len(), mask_count(r.diagnoses.len(), ratio));
            let hidden: Vec<usize> = r.diagnoses.iter().zip(&m.diagnosis_tokens)
                .filter(|(_, &t)| t == SIZES.diagnoses + 1).map(|(&c, _)| c).collect();
            prop_assert_eq!(hidden, m.masked_diagnoses.clone());
            let hidden_p: Vec<usize> = r.procedures.iter().zip(&m.procedure_tokens)
                .filter(|(_, &t)| t == SIZES.procedures + 1).map(|(&c, _)| c).collect();
            prop_assert_eq!(hidden_p, m.masked_procedures.clone());
            prop_assert!(!m.diagnosis_tokens.contains(&SIZES.diagnoses));
        }
    }
}
