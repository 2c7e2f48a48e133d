use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use super::record::{Record, RecordLine};
use super::vocab::{Vocabularies, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

pub const RECORDS_FILE: &str = "records.jsonl";

/// Index partition of one center's records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Split {
    /// 8:1:1 split of `n` shuffled indices: validation and test each take
    /// `round(n/10)`, train keeps the rest.
    pub fn ratio_8_1_1(n: usize, seed: u64, center: &str) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(seed, &["split", center]));
        let tenth = (n as f64 / 10.0).round() as usize;
        let n_val = tenth.min(n.saturating_sub(1));
        let n_test = tenth.min(n.saturating_sub(1 + n_val));
        let validation = idx[..n_val].to_vec();
        let test = idx[n_val..n_val + n_test].to_vec();
        let train = idx[n_val + n_test..].to_vec();
        Self {
            train,
            validation,
            test,
        }
    }

    pub fn part(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }
}

/// Records grouped by center, with per-center splits derived from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiCenterDataset {
    pub vocab: Vocabularies,
    centers: BTreeMap<String, Vec<Record>>,
    splits: BTreeMap<String, Split>,
    split_seed: u64,
}

impl MultiCenterDataset {
    pub fn new(vocab: Vocabularies, records: Vec<Record>, split_seed: u64) -> Result<Self> {
        let mut centers: BTreeMap<String, Vec<Record>> = BTreeMap::new();
        for r in records {
            r.check_ranges(&vocab)?;
            centers.entry(r.center_id.clone()).or_default().push(r);
        }
        let mut ds = Self {
            vocab,
            centers,
            splits: BTreeMap::new(),
            split_seed,
        };
        ds.resplit(split_seed);
        Ok(ds)
    }

    /// Re-draws every center's 8:1:1 partition from `seed`.
    pub fn resplit(&mut self, seed: u64) {
        self.split_seed = seed;
        self.splits = self
            .centers
            .iter()
            .map(|(c, rs)| (c.clone(), Split::ratio_8_1_1(rs.len(), seed, c)))
            .collect();
    }

    pub fn with_split_seed(mut self, seed: u64) -> Self {
        self.resplit(seed);
        self
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }

    pub fn center_ids(&self) -> impl Iterator<Item = &String> {
        self.centers.keys()
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn num_records(&self) -> usize {
        self.centers.values().map(Vec::len).sum()
    }

    pub fn records(&self, center: &str) -> Result<&[Record]> {
        self.centers
            .get(center)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCenter(center.to_string()))
    }

    pub fn split(&self, center: &str) -> Result<&Split> {
        self.splits
            .get(center)
            .ok_or_else(|| Error::UnknownCenter(center.to_string()))
    }

    pub fn partition(&self, center: &str, part: Partition) -> Result<Vec<&Record>> {
        let records = self.records(center)?;
        Ok(self.split(center)?.part(part).iter().map(|&i| &records[i]).collect())
    }

    /// Union of one partition over all centers, in center order.
    pub fn pooled(&self, part: Partition) -> Vec<&Record> {
        self.centers
            .keys()
            .flat_map(|c| self.partition(c, part).expect("center exists"))
            .collect()
    }

    /// Normalized medication frequencies of one center over all its records.
    pub fn prescription_distribution(&self, center: &str) -> Result<Vec<f64>> {
        let records = self.records(center)?;
        let mut counts = vec![0.0; self.vocab.medications.len()];
        for r in records {
            for &m in &r.medications {
                counts[m] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return Err(Error::InvalidData(format!("center `{center}` prescribes nothing")));
        }
        counts.iter_mut().for_each(|c| *c /= total);
        Ok(counts)
    }

    pub fn to_lines(&self) -> Vec<RecordLine> {
        self.centers
            .values()
            .flatten()
            .map(|r| RecordLine::from_record(r, &self.vocab))
            .collect()
    }

    /// Writes `records.jsonl` and the three vocabulary files into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save_dir(dir)?;
        let mut out = String::new();
        for line in self.to_lines() {
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        let path = dir.join(RECORDS_FILE);
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    /// Loads a directory written by [`MultiCenterDataset::save_dir`] with its
    /// vocabularies fixed and no center filtering.
    pub fn load_dir(dir: &Path, split_seed: u64) -> Result<Self> {
        let vocab = Vocabularies::load_dir(dir)?;
        let (ds, _) = ingest(
            &dir.join(RECORDS_FILE),
            &IngestOptions {
                vocab: VocabSource::Fixed(vocab),
                min_records_per_center: 1,
                seed: split_seed,
            },
        )?;
        Ok(ds)
    }

    /// Per-center record counts, split sizes and mean set sizes.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "center_id,records,train,validation,test,mean_diagnoses,mean_procedures,mean_medications\n",
        );
        for (c, rs) in &self.centers {
            let split = &self.splits[c];
            let n = rs.len().max(1) as f64;
            let mean = |f: fn(&Record) -> usize| rs.iter().map(f).sum::<usize>() as f64 / n;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4},{:.4}",
                c,
                rs.len(),
                split.train.len(),
                split.validation.len(),
                split.test.len(),
                mean(|r| r.diagnoses.len()),
                mean(|r| r.procedures.len()),
                mean(|r| r.medications.len()),
            );
        }
        s
    }

    /// Histogram of set sizes per center and set kind.
    pub fn set_size_histogram_csv(&self) -> String {
        let mut s = String::from("center_id,kind,size,count\n");
        for (c, rs) in &self.centers {
            let kinds: [(&str, fn(&Record) -> usize); 3] = [
                ("diagnoses", |r| r.diagnoses.len()),
                ("procedures", |r| r.procedures.len()),
                ("medications", |r| r.medications.len()),
            ];
            for (kind, f) in kinds {
                let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
                for r in rs {
                    *hist.entry(f(r)).or_default() += 1;
                }
                for (size, count) in hist {
                    let _ = writeln!(s, "{c},{kind},{size},{count}");
                }
            }
        }
        s
    }
}

/// Where vocabularies come from during ingestion.
#[derive(Clone, Debug)]
pub enum VocabSource {
    /// Codes must resolve; an unknown code is an error.
    Fixed(Vocabularies),
    /// Built from the corpus, keeping the `top_*` most frequent codes
    /// (all when `None`). Codes outside the kept set are dropped.
    FromCorpus {
        top_diagnoses: Option<usize>,
        top_procedures: Option<usize>,
        top_medications: Option<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub vocab: VocabSource,
    /// Centers with fewer records are dropped with a warning.
    pub min_records_per_center: usize,
    pub seed: u64,
}

pub const DEFAULT_MIN_RECORDS_PER_CENTER: usize = 60;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub dropped_centers: Vec<(String, usize)>,
    /// Records dropped because filtering emptied their diagnosis or
    /// medication set (corpus-built vocabularies only).
    pub dropped_records: usize,
}

pub fn parse_record_lines(text: &str) -> Result<Vec<RecordLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidData(format!("records line {}: {e}", i + 1)))
        })
        .collect()
}

fn top_k(lines: &[RecordLine], field: fn(&RecordLine) -> &Vec<String>, k: Option<usize>) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in lines {
        let mut seen: Vec<&str> = field(l).iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if let Some(k) = k {
        ranked.truncate(k);
    }
    let mut codes: Vec<String> = ranked.into_iter().map(|(c, _)| c.to_string()).collect();
    codes.sort();
    Vocabulary::new(codes)
}

pub fn ingest(records_path: &Path, opts: &IngestOptions) -> Result<(MultiCenterDataset, IngestReport)> {
    let text = std::fs::read_to_string(records_path).map_err(|e| Error::io(records_path, e))?;
    ingest_lines(parse_record_lines(&text)?, opts)
}

pub fn ingest_lines(lines: Vec<RecordLine>, opts: &IngestOptions) -> Result<(MultiCenterDataset, IngestReport)> {
    let mut report = IngestReport::default();
    if let Some(l) = lines.iter().find(|l| l.diag.is_empty()) {
        return Err(Error::InvalidData(format!(
            "record in center `{}` has an empty diagnosis set",
            l.center_id
        )));
    }
    let (vocab, strict) = match &opts.vocab {
        VocabSource::Fixed(v) => (v.clone(), true),
        VocabSource::FromCorpus {
            top_diagnoses,
            top_procedures,
            top_medications,
        } => (
            Vocabularies {
                diagnoses: top_k(&lines, |l| &l.diag, *top_diagnoses)?,
                procedures: top_k(&lines, |l| &l.proc, *top_procedures)?,
                medications: top_k(&lines, |l| &l.med, *top_medications)?,
            },
            false,
        ),
    };

    let resolve = |codes: &[String], v: &Vocabulary, kind: &'static str| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(codes.len());
        for c in codes {
            match v.id(c) {
                Some(i) => out.push(i),
                None if strict => {
                    return Err(Error::UnknownCode {
                        kind,
                        code: c.clone(),
                    })
                }
                None => {}
            }
        }
        Ok(out)
    };

    let mut records = Vec::with_capacity(lines.len());
    for l in &lines {
        let d = resolve(&l.diag, &vocab.diagnoses, "diagnosis")?;
        let p = resolve(&l.proc, &vocab.procedures, "procedure")?;
        let m = resolve(&l.med, &vocab.medications, "medication")?;
        if !strict && (d.is_empty() || (m.is_empty() && !l.med.is_empty())) {
            report.dropped_records += 1;
            continue;
        }
        records.push(Record::new(l.center_id.clone(), d, p, m)?);
    }

    let mut per_center: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *per_center.entry(r.center_id.as_str()).or_default() += 1;
    }
    let small: Vec<(String, usize)> = per_center
        .iter()
        .filter(|(_, &n)| n < opts.min_records_per_center)
        .map(|(c, &n)| (c.to_string(), n))
        .collect();
    for (c, n) in &small {
        log::warn!(
            "dropping center `{c}`: {n} records < minimum {}",
            opts.min_records_per_center
        );
    }
    records.retain(|r| !small.iter().any(|(c, _)| *c == r.center_id));
    report.dropped_centers = small;
    Ok((MultiCenterDataset::new(vocab, records, opts.seed)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(center: &str, d: &[&str], p: &[&str], m: &[&str]) -> RecordLine {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        RecordLine {
            center_id: center.into(),
            diag: s(d),
            proc: s(p),
            med: s(m),
        }
    }

    fn vocab() -> Vocabularies {
        let v = |c: &[&str]| Vocabulary::new(c.iter().map(|x| x.to_string()).collect()).unwrap();
        Vocabularies {
            diagnoses: v(&["d0", "d1", "d2"]),
            procedures: v(&["p0", "p1"]),
            medications: v(&["m0", "m1", "m2", "m3"]),
        }
    }

    fn fixed(min: usize, seed: u64) -> IngestOptions {
        IngestOptions {
            vocab: VocabSource::Fixed(vocab()),
            min_records_per_center: min,
            seed,
        }
    }

    #[test]
    fn ten_records_split_eight_one_one() {
        let s = Split::ratio_8_1_1(10, 1, "c");
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn two_centers_of_five_records() {
        let lines: Vec<_> = (0..10)
            .map(|i| line(if i < 5 { "a" } else { "b" }, &["d0"], &[], &["m0"]))
            .collect();
        let (ds, _) = ingest_lines(lines, &fixed(1, 3)).unwrap();
        for c in ["a", "b"] {
            let s = ds.split(c).unwrap();
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 5);
            assert!(s.train.len() >= 3);
        }
    }

    #[test]
    fn unknown_code_under_fixed_vocab_names_the_code() {
        let err = ingest_lines(vec![line("a", &["d0"], &[], &["m9"])], &fixed(1, 0)).unwrap_err();
        assert!(err.to_string().contains("m9"), "{err}");
    }

    #[test]
    fn empty_diagnosis_set_is_rejected() {
        assert!(ingest_lines(vec![line("a", &[], &[], &["m0"])], &fixed(1, 0)).is_err());
    }

    #[test]
    fn small_centers_are_dropped() {
        let mut lines: Vec<_> = (0..6).map(|_| line("big", &["d0"], &[], &["m0"])).collect();
        lines.push(line("tiny", &["d1"], &[], &["m1"]));
        let (ds, report) = ingest_lines(lines, &fixed(5, 0)).unwrap();
        assert_eq!(ds.num_centers(), 1);
        assert_eq!(report.dropped_centers, vec![("tiny".to_string(), 1)]);
    }

    #[test]
    fn same_seed_gives_same_splits() {
        let lines: Vec<_> = (0..30).map(|i| line(["a", "b"][i % 2], &["d0"], &[], &["m0"])).collect();
        let (x, _) = ingest_lines(lines.clone(), &fixed(1, 9)).unwrap();
        let (y, _) = ingest_lines(lines, &fixed(1, 9)).unwrap();
        assert_eq!(x, y);
        let z = x.clone().with_split_seed(10);
        assert_ne!(x.split("a").unwrap(), z.split("a").unwrap());
        assert_eq!(x.clone().with_split_seed(9), x);
    }

    #[test]
    fn corpus_vocab_keeps_top_k() {
        let lines = vec![
            line("a", &["x", "y"], &["p"], &["m1", "m2"]),
            line("a", &["x"], &[], &["m1"]),
            line("a", &["z"], &[], &["m2"]),
            line("a", &["y"], &[], &["m3"]),
        ];
        let opts = IngestOptions {
            vocab: VocabSource::FromCorpus {
                top_diagnoses: Some(2),
                top_procedures: None,
                top_medications: Some(2),
            },
            min_records_per_center: 1,
            seed: 0,
        };
        let (ds, report) = ingest_lines(lines, &opts).unwrap();
        assert_eq!(ds.vocab.diagnoses.codes(), &["x", "y"]);
        assert_eq!(ds.vocab.medications.codes(), &["m1", "m2"]);
        // "z" and "m3" records lose their only diagnosis / medication.
        assert_eq!(report.dropped_records, 2);
        assert_eq!(ds.num_records(), 2);
    }

    #[test]
    fn prescription_distribution_counts() {
        let (ds, _) = ingest_lines(vec![line("a", &["d0"], &[], &["m0", "m1"])], &fixed(1, 0)).unwrap();
        assert_eq!(ds.prescription_distribution("a").unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        let (ds, _) = ingest_lines(
            vec![line("a", &["d0"], &[], &["m0"]), line("a", &["d1"], &[], &["m0"])],
            &fixed(1, 0),
        )
        .unwrap();
        assert_eq!(ds.prescription_distribution("a").unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(ds.prescription_distribution("nope"), Err(Error::UnknownCenter(_))));
    }

    #[test]
    fn save_and_load_round_trip() {
        let lines: Vec<_> = (0..12)
            .map(|i| line(["a", "b"][i % 2], &["d0", "d2"], &["p1"], &["m3", "m0"]))
            .collect();
        let (ds, _) = ingest_lines(lines, &fixed(1, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = MultiCenterDataset::load_dir(dir.path(), 5).unwrap();
        assert_eq!(back, ds);
    }
}
