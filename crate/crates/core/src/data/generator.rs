//! Synthetic multi-center EHR corpus with a single heterogeneity knob.
//!
//! Shared structure (identical for every center):
//! - diagnoses are grouped into latent conditions; each condition has a
//!   categorical distribution over its own diagnosis codes,
//! - a diagnosis → procedure affinity table,
//! - ground-truth medication sets per diagnosis and per procedure.
//!
//! Each center mixes every shared distribution with a private Dirichlet draw
//! at weight `heterogeneity` (η): condition prevalence, within-condition
//! diagnosis frequencies and procedure affinities. Its medication mapping is
//! perturbed by additions and deletions at rate ∝ η, each medication is
//! swapped for a center-specific substitute with probability η (a local
//! formulary), and it carries a few house medications prescribed with
//! probability ∝ η. At η = 0 all centers share one distribution.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::dataset::MultiCenterDataset;
use super::record::Record;
use super::vocab::{Vocabularies, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{self, Rng as StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of centers H.
    pub centers: usize,
    /// Record counts are spread evenly from `records_min` (first center) to
    /// `records_max` (last center).
    pub records_min: usize,
    pub records_max: usize,
    pub diagnosis_vocab: usize,
    pub procedure_vocab: usize,
    pub medication_vocab: usize,
    /// Number of latent conditions.
    pub conditions: usize,
    /// η ∈ [0, 1].
    pub heterogeneity: f64,
    pub mean_diagnoses: f64,
    pub mean_procedures: f64,
    /// Medications shared by every diagnosis of a condition.
    pub core_medications: usize,
    /// Probability that a diagnosis also carries its own specific medication.
    pub specific_medication_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            centers: 6,
            records_min: 300,
            records_max: 1300,
            diagnosis_vocab: 360,
            procedure_vocab: 200,
            medication_vocab: 60,
            conditions: 12,
            heterogeneity: 0.6,
            mean_diagnoses: 4.0,
            mean_procedures: 5.0,
            core_medications: 3,
            specific_medication_rate: 0.3,
            seed: 2024,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("centers", self.centers),
            ("records_min", self.records_min),
            ("records_max", self.records_max),
            ("diagnosis_vocab", self.diagnosis_vocab),
            ("procedure_vocab", self.procedure_vocab),
            ("medication_vocab", self.medication_vocab),
            ("conditions", self.conditions),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.records_min > self.records_max {
            return Err(Error::config("records_min", "must not exceed records_max"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config(
                "heterogeneity",
                format!("must lie in [0, 1], got {}", self.heterogeneity),
            ));
        }
        for (field, v) in [
            ("mean_diagnoses", self.mean_diagnoses),
            ("mean_procedures", self.mean_procedures),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be a positive number"));
            }
        }
        if !(0.0..=1.0).contains(&self.specific_medication_rate) {
            return Err(Error::config("specific_medication_rate", "must lie in [0, 1]"));
        }
        if self.mean_diagnoses < 1.0 {
            return Err(Error::config("mean_diagnoses", "must be at least 1"));
        }
        if self.conditions > self.diagnosis_vocab
            || self.conditions > self.procedure_vocab
            || self.conditions > self.medication_vocab
        {
            return Err(Error::config("conditions", "must not exceed any vocabulary size"));
        }
        Ok(())
    }

    pub fn records_for(&self, center: usize) -> usize {
        if self.centers == 1 {
            return self.records_min;
        }
        let span = (self.records_max - self.records_min) as f64;
        self.records_min + (span * center as f64 / (self.centers - 1) as f64).round() as usize
    }

    pub fn center_id(center: usize) -> String {
        format!("center_{center:02}")
    }
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn mix(global: &[f64], private: &[f64], eta: f64) -> Vec<f64> {
    global.iter().zip(private).map(|(g, p)| (1.0 - eta) * g + eta * p).collect()
}

/// Codes `i` with `i % conditions == c`.
fn block(n: usize, conditions: usize, c: usize) -> Vec<usize> {
    (c..n).step_by(conditions).collect()
}

/// Shared, center-independent structure.
struct World {
    condition_prevalence: Vec<f64>,
    /// Per condition: member diagnosis codes and their weights.
    condition_codes: Vec<Vec<usize>>,
    condition_weights: Vec<Vec<f64>>,
    /// Per diagnosis: dense distribution over procedures.
    affinity: Vec<Vec<f64>>,
    diagnosis_meds: Vec<Vec<usize>>,
    procedure_meds: Vec<Vec<usize>>,
}

impl World {
    fn build(cfg: &GeneratorConfig, rng: &mut StreamRng) -> Self {
        let t = cfg.conditions;
        let condition_prevalence = dirichlet(2.0, t, rng);
        let condition_codes: Vec<Vec<usize>> = (0..t).map(|c| block(cfg.diagnosis_vocab, t, c)).collect();
        let condition_weights = condition_codes.iter().map(|codes| dirichlet(1.0, codes.len(), rng)).collect();

        let mut affinity = Vec::with_capacity(cfg.diagnosis_vocab);
        for d in 0..cfg.diagnosis_vocab {
            let procs = block(cfg.procedure_vocab, t, d % t);
            let k = procs.len().min(3);
            let chosen: Vec<usize> = procs.choose_multiple(rng, k).copied().collect();
            let w = dirichlet(1.0, k, rng);
            let mut row = vec![0.0; cfg.procedure_vocab];
            for (p, wi) in chosen.iter().zip(w) {
                row[*p] = wi;
            }
            affinity.push(row);
        }

        // Each condition has core medications shared by its diagnoses; some
        // diagnoses add one of their own.
        let core: Vec<Vec<usize>> = (0..t)
            .map(|c| {
                let pool = block(cfg.medication_vocab, t, c);
                pool.choose_multiple(rng, pool.len().min(cfg.core_medications)).copied().collect()
            })
            .collect();
        let mut diagnosis_meds = Vec::with_capacity(cfg.diagnosis_vocab);
        for d in 0..cfg.diagnosis_vocab {
            let mut meds = core[d % t].clone();
            if rng.gen_bool(cfg.specific_medication_rate) {
                meds.push(rng.gen_range(0..cfg.medication_vocab));
            }
            meds.sort_unstable();
            meds.dedup();
            diagnosis_meds.push(meds);
        }
        let mut procedure_meds = Vec::with_capacity(cfg.procedure_vocab);
        for p in 0..cfg.procedure_vocab {
            let pool = block(cfg.medication_vocab, t, p % t);
            let meds = if rng.gen_bool(0.5) {
                vec![*pool.choose(rng).expect("non-empty pool")]
            } else {
                Vec::new()
            };
            procedure_meds.push(meds);
        }
        Self {
            condition_prevalence,
            condition_codes,
            condition_weights,
            affinity,
            diagnosis_meds,
            procedure_meds,
        }
    }
}

/// One center's perturbed copy of the world.
struct CenterModel {
    condition: WeightedIndex<f64>,
    within: Vec<WeightedIndex<f64>>,
    affinity: Vec<WeightedIndex<f64>>,
    diagnosis_meds: Vec<Vec<usize>>,
    /// Formulary: medication `m` is dispensed as `substitute[m]`.
    substitute: Vec<usize>,
    house_meds: Vec<usize>,
    house_rate: f64,
}

impl CenterModel {
    fn build(cfg: &GeneratorConfig, world: &World, rng: &mut StreamRng) -> Self {
        let eta = cfg.heterogeneity;
        let prevalence = mix(&world.condition_prevalence, &dirichlet(0.5, cfg.conditions, rng), eta);
        let within = world
            .condition_weights
            .iter()
            .map(|w| WeightedIndex::new(mix(w, &dirichlet(0.5, w.len(), rng), eta)).expect("valid weights"))
            .collect();
        let affinity = world
            .affinity
            .iter()
            .map(|row| {
                let mut private = vec![0.0; cfg.procedure_vocab];
                let k = cfg.procedure_vocab.min(3);
                let idx = rand::seq::index::sample(rng, cfg.procedure_vocab, k);
                for (p, w) in idx.iter().zip(dirichlet(1.0, k, rng)) {
                    private[p] = w;
                }
                WeightedIndex::new(mix(row, &private, eta)).expect("valid weights")
            })
            .collect();
        let flip = 0.5 * eta;
        let diagnosis_meds = world
            .diagnosis_meds
            .iter()
            .map(|meds| {
                let mut m = meds.clone();
                if m.len() > 1 && rng.gen_bool(flip) {
                    let i = rng.gen_range(0..m.len());
                    m.remove(i);
                }
                if rng.gen_bool(flip) {
                    m.push(rng.gen_range(0..cfg.medication_vocab));
                }
                m.sort_unstable();
                m.dedup();
                m
            })
            .collect();
        let substitute = (0..cfg.medication_vocab)
            .map(|m| {
                if rng.gen_bool(eta) {
                    rng.gen_range(0..cfg.medication_vocab)
                } else {
                    m
                }
            })
            .collect();
        let house_meds = rand::seq::index::sample(rng, cfg.medication_vocab, cfg.medication_vocab.min(2)).into_vec();
        Self {
            condition: WeightedIndex::new(prevalence).expect("valid weights"),
            within,
            affinity,
            diagnosis_meds,
            substitute,
            house_meds,
            house_rate: 0.5 * eta,
        }
    }

    fn sample(&self, cfg: &GeneratorConfig, world: &World, center_id: &str, rng: &mut StreamRng) -> Record {
        let n_conditions = if rng.gen_bool(0.4) { 2 } else { 1 };
        let mut conditions = Vec::with_capacity(2);
        while conditions.len() < n_conditions.min(cfg.conditions) {
            let c = self.condition.sample(rng);
            if !conditions.contains(&c) {
                conditions.push(c);
            }
        }
        let extra_diag = Poisson::new(cfg.mean_diagnoses - 1.0).map_or(0.0, |p| p.sample(rng)) as usize;
        let mut diagnoses = BTreeSet::new();
        for _ in 0..1 + extra_diag {
            let c = *conditions.choose(rng).expect("at least one condition");
            let code = world.condition_codes[c][self.within[c].sample(rng)];
            diagnoses.insert(code);
        }
        let diag_list: Vec<usize> = diagnoses.iter().copied().collect();
        let n_proc = Poisson::new(cfg.mean_procedures).map_or(0.0, |p| p.sample(rng)) as usize;
        let mut procedures = BTreeSet::new();
        for _ in 0..n_proc {
            let d = *diag_list.choose(rng).expect("non-empty");
            procedures.insert(self.affinity[d].sample(rng));
        }
        let mut meds = BTreeSet::new();
        for &d in &diag_list {
            meds.extend(self.diagnosis_meds[d].iter().map(|&m| self.substitute[m]));
        }
        for &p in &procedures {
            meds.extend(world.procedure_meds[p].iter().map(|&m| self.substitute[m]));
        }
        for &h in &self.house_meds {
            if rng.gen_bool(self.house_rate) {
                meds.insert(h);
            }
        }
        if meds.is_empty() {
            meds.insert(block(cfg.medication_vocab, cfg.conditions, conditions[0])[0]);
        }
        Record::new(
            center_id,
            diag_list,
            procedures.into_iter().collect(),
            meds.into_iter().collect(),
        )
        .expect("diagnosis set is non-empty")
    }
}

fn vocabulary(prefix: char, n: usize) -> Vocabulary {
    Vocabulary::new((0..n).map(|i| format!("{prefix}{i:04}")).collect()).expect("distinct codes")
}

/// Generates the corpus. Splits are drawn with `split_seed`.
pub fn generate(cfg: &GeneratorConfig, split_seed: u64) -> Result<MultiCenterDataset> {
    cfg.validate()?;
    let world = World::build(cfg, &mut rng::stream(cfg.seed, &["world"]));
    let mut records = Vec::new();
    for h in 0..cfg.centers {
        let id = GeneratorConfig::center_id(h);
        let model = CenterModel::build(cfg, &world, &mut rng::stream(cfg.seed, &["center", &id]));
        let mut r = rng::stream(cfg.seed, &["records", &id]);
        for _ in 0..cfg.records_for(h) {
            records.push(model.sample(cfg, &world, &id, &mut r));
        }
    }
    let vocab = Vocabularies {
        diagnoses: vocabulary('D', cfg.diagnosis_vocab),
        procedures: vocabulary('P', cfg.procedure_vocab),
        medications: vocabulary('M', cfg.medication_vocab),
    };
    MultiCenterDataset::new(vocab, records, split_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_heterogeneity() {
        let cfg = GeneratorConfig {
            heterogeneity: 1.5,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("heterogeneity"));
    }

    #[test]
    fn record_counts_span_the_range() {
        let cfg = GeneratorConfig::default();
        let sizes: Vec<usize> = (0..cfg.centers).map(|h| cfg.records_for(h)).collect();
        assert_eq!(sizes, vec![300, 500, 700, 900, 1100, 1300]);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = GeneratorConfig {
            records_min: 40,
            records_max: 80,
            centers: 3,
            ..Default::default()
        };
        let a = generate(&cfg, 1).unwrap();
        let b = generate(&cfg, 1).unwrap();
        assert_eq!(a, b);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        a.save_dir(dir_a.path()).unwrap();
        b.save_dir(dir_b.path()).unwrap();
        for f in ["records.jsonl", "diag_vocab.txt", "proc_vocab.txt", "med_vocab.txt"] {
            assert_eq!(
                std::fs::read(dir_a.path().join(f)).unwrap(),
                std::fs::read(dir_b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn every_record_is_well_formed() {
        let cfg = GeneratorConfig {
            records_min: 100,
            records_max: 100,
            centers: 2,
            ..Default::default()
        };
        let ds = generate(&cfg, 0).unwrap();
        for c in ds.center_ids() {
            for r in ds.records(c).unwrap() {
                assert!(!r.diagnoses.is_empty());
                assert!(!r.medications.is_empty());
                r.check_ranges(&ds.vocab).unwrap();
            }
        }
    }
}
