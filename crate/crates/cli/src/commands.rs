use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mcrec_core::data::{
    generate, ingest, IngestOptions, MultiCenterDataset, Partition, Record, VocabSource,
};
use mcrec_core::metrics::{jsd_matrix, mean_pairwise, report, EvalResult};
use mcrec_core::pretrain::{alignment, run_pretrain, PretrainOutcome};
use mcrec_core::tune::{evaluate, infer_ranked, run_tune, CenterModelStore, Regime, TuneReport};
use mcrec_core::BackboneParams;
use serde::Deserialize;

use crate::config::{echo, RunConfig};
use crate::{require, CliError, CliResult, Layout};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SET_SIZES_FILE: &str = "set_sizes.csv";
pub const RECORD_COUNTS_FILE: &str = "record_counts.csv";
pub const JSD_FILE: &str = "jsd.csv";
pub const HEATMAP_FILE: &str = "jsd_heatmap.pgm";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const TUNED_PARAMETERS_FILE: &str = "tuned_parameters.csv";
pub const OVERALL_FILE: &str = "overall.csv";
pub const PER_CENTER_FILE: &str = "per_center.csv";
pub const PER_GROUP_FILE: &str = "per_group.csv";

/// Generated (or ingested) dataset, before any split-seed is applied.
pub fn build_dataset(cfg: &RunConfig, split_seed: u64) -> CliResult<MultiCenterDataset> {
    if cfg.ingest.records_file.is_empty() {
        return Ok(generate(&cfg.generator, split_seed)?);
    }
    let path = Path::new(&cfg.ingest.records_file);
    require(path, "records file")?;
    let top = |k: usize| (k > 0).then_some(k);
    let (ds, rep) = ingest(
        path,
        &IngestOptions {
            vocab: VocabSource::FromCorpus {
                top_diagnoses: top(cfg.ingest.top_diagnoses),
                top_procedures: top(cfg.ingest.top_procedures),
                top_medications: top(cfg.ingest.top_medications),
            },
            min_records_per_center: cfg.ingest.min_records_per_center,
            seed: split_seed,
        },
    )?;
    if rep.dropped_records > 0 {
        log::warn!("{} records dropped by vocabulary filtering", rep.dropped_records);
    }
    Ok(ds)
}

/// Loads the dataset written by `gen-data`, split with `cfg.seed`.
pub fn load_dataset(dir: &Path, seed: u64) -> CliResult<MultiCenterDataset> {
    require(&dir.join(mcrec_core::data::RECORDS_FILE), "dataset; run `mcrec gen-data` first")?;
    Ok(MultiCenterDataset::load_dir(dir, seed)?)
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<String> {
    let dir = Layout::new(cfg.output_root()).data();
    let ds = build_dataset(cfg, cfg.seed)?;
    ds.save_dir(&dir)?;
    report::write_file(&dir.join(SUMMARY_FILE), ds.summary_csv())?;
    report::write_file(&dir.join(SET_SIZES_FILE), ds.set_size_histogram_csv())?;
    echo(cfg, &dir)?;
    Ok(format!(
        "wrote {} records from {} centers to {}\n{}",
        ds.num_records(),
        ds.num_centers(),
        dir.display(),
        ds.summary_csv()
    ))
}

/// Record-count histogram, set-size histogram and the pairwise prescription
/// divergence table and heatmap.
pub fn analyze(cfg: &RunConfig, dataset_dir: Option<&Path>) -> CliResult<String> {
    let layout = Layout::new(cfg.output_root());
    let src = dataset_dir.map(Path::to_path_buf).unwrap_or_else(|| layout.data());
    let ds = load_dataset(&src, cfg.seed)?;
    let out = layout.analysis();
    let mut counts = String::from("center_id,records,group\n");
    for c in ds.center_ids() {
        let n = ds.records(c)?.len();
        writeln!(counts, "{c},{n},{}", cfg.groups.group(n).as_str()).unwrap();
    }
    let (ids, m) = jsd_matrix(&ds)?;
    report::write_file(&out.join(RECORD_COUNTS_FILE), &counts)?;
    report::write_file(&out.join(SET_SIZES_FILE), ds.set_size_histogram_csv())?;
    report::write_file(&out.join(JSD_FILE), report::jsd_csv(&ids, &m))?;
    report::write_file(&out.join(HEATMAP_FILE), report::heatmap_pgm(&m, 16))?;
    echo(cfg, &out)?;
    Ok(format!(
        "{counts}mean pairwise prescription JSD {:.6}\nwrote {}",
        mean_pairwise(&m),
        out.display()
    ))
}

pub fn pretrain(cfg: &RunConfig) -> CliResult<(PretrainOutcome, String)> {
    let layout = Layout::new(cfg.output_root());
    let ds = load_dataset(&layout.data(), cfg.seed)?;
    let dir = layout.pretrain(&cfg.variant());
    let outcome = pretrain_into(cfg, &ds, cfg.seed, &dir)?;
    let last = outcome.history.last();
    let msg = format!(
        "pretrained {} epochs (best {}), final train loss {:.6}\nwrote {}",
        outcome.history.len().saturating_sub(1),
        outcome.best_epoch,
        last.map_or(f64::NAN, |e| e.train_loss),
        dir.display()
    );
    Ok((outcome, msg))
}

pub(crate) fn pretrain_into(
    cfg: &RunConfig,
    ds: &MultiCenterDataset,
    seed: u64,
    dir: &Path,
) -> CliResult<PretrainOutcome> {
    let outcome = run_pretrain(ds, &cfg.encoder, &cfg.pretrain, seed)?;
    outcome.save(dir, &cfg.pretrain)?;
    let val = ds.pooled(Partition::Validation);
    let (pos, neg) = alignment(
        &outcome.backbone,
        &outcome.heads,
        cfg.pretrain.shared_heads,
        &val,
        cfg.pretrain.batch_size,
    )?;
    report::write_file(
        &dir.join(ALIGNMENT_FILE),
        format!("mean_positive_cosine,mean_negative_cosine\n{pos:.9},{neg:.9}\n"),
    )?;
    echo(cfg, dir)?;
    Ok(outcome)
}

/// The pretrained backbone of the configured variant, if one exists.
pub fn load_backbone(cfg: &RunConfig, pretrain_dir: &Path) -> CliResult<Option<BackboneParams>> {
    let path = pretrain_dir.join(mcrec_core::pretrain::BACKBONE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let b = BackboneParams::load(&path)?;
    if b.config != cfg.encoder {
        return Err(CliError::Config(format!(
            "backbone {} was pretrained with a different encoder configuration",
            path.display()
        )));
    }
    Ok(Some(b))
}

pub fn tune(cfg: &RunConfig) -> CliResult<(CenterModelStore, TuneReport, String)> {
    let layout = Layout::new(cfg.output_root());
    let ds = load_dataset(&layout.data(), cfg.seed)?;
    let variant = cfg.variant();
    let backbone = if cfg.tune.regime.needs_pretrained_backbone() {
        load_backbone(cfg, &layout.pretrain(&variant))?
    } else {
        None
    };
    let dir = layout.tune(&variant, cfg.tune.regime);
    let (store, rep) = tune_into(cfg, &ds, backbone.as_ref(), cfg.seed, cfg.jobs, &dir)?;
    let msg = format!(
        "tuned {} adapter(s) under {}; tuned parameters per adapter: {:?}\nwrote {}",
        store.adapters.len(),
        cfg.tune.regime,
        rep.tuned_parameters.values().collect::<Vec<_>>(),
        dir.display()
    );
    Ok((store, rep, msg))
}

pub(crate) fn tune_into(
    cfg: &RunConfig,
    ds: &MultiCenterDataset,
    backbone: Option<&BackboneParams>,
    seed: u64,
    jobs: usize,
    dir: &Path,
) -> CliResult<(CenterModelStore, TuneReport)> {
    let (mut store, rep) = run_tune(ds, backbone, &cfg.encoder, &cfg.tune, seed, jobs)?;
    store.config_hash = cfg.hash();
    store.save(&dir.join(crate::STORE_DIR))?;
    report::write_file(&dir.join(HISTORY_FILE), rep.history_csv())?;
    let mut tuned = String::from("center_id,tuned_parameters\n");
    for (k, n) in &rep.tuned_parameters {
        writeln!(tuned, "{k},{n}").unwrap();
    }
    report::write_file(&dir.join(TUNED_PARAMETERS_FILE), tuned)?;
    echo(cfg, dir)?;
    Ok((store, rep))
}

/// Evaluates `regimes` (every store present when empty) on `partition` and
/// writes overall, per-center and per-group tables.
pub fn evaluate_cmd(
    cfg: &RunConfig,
    regimes: &[Regime],
    partition: Partition,
) -> CliResult<(Vec<(String, EvalResult)>, String)> {
    let layout = Layout::new(cfg.output_root());
    let ds = load_dataset(&layout.data(), cfg.seed)?;
    let variant = cfg.variant();
    let wanted: Vec<Regime> = if regimes.is_empty() {
        Regime::ALL
            .into_iter()
            .filter(|r| layout.store(&variant, *r).join(mcrec_core::tune::MANIFEST_FILE).exists())
            .collect()
    } else {
        regimes.to_vec()
    };
    if wanted.is_empty() {
        return Err(CliError::Missing(format!(
            "no tuned model stores under {}",
            layout.root.join("tune").join(&variant).display()
        )));
    }
    let mut results = Vec::new();
    for r in wanted {
        let store = CenterModelStore::load(&layout.store(&variant, r))?;
        let res = evaluate(&ds, partition, &store, cfg.tune.threshold, &cfg.groups, cfg.tune.batch_size)?;
        results.push((r.as_str().to_string(), res));
    }
    let out = layout.eval(&variant);
    let msg = write_eval_tables(cfg, &results, &out)?;
    Ok((results, msg))
}

pub(crate) fn write_eval_tables(cfg: &RunConfig, results: &[(String, EvalResult)], out: &Path) -> CliResult<String> {
    let rows: Vec<(String, &EvalResult)> = results.iter().map(|(m, r)| (m.clone(), r)).collect();
    let baseline = cfg.matrix.baseline.as_str();
    let overall = report::overall_csv(&rows);
    let per_group = report::per_group_csv(&rows, Some(baseline));
    report::write_file(&out.join(OVERALL_FILE), &overall)?;
    report::write_file(&out.join(PER_CENTER_FILE), report::per_center_csv(&rows))?;
    report::write_file(&out.join(PER_GROUP_FILE), &per_group)?;
    echo(cfg, out)?;
    Ok(format!("{overall}\n{per_group}\nwrote {}", out.display()))
}

/// Input line for `infer`: the record format with the medication set optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferLine {
    pub center_id: String,
    pub diag: Vec<String>,
    #[serde(default)]
    pub proc: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    med: Vec<String>,
}

/// Recommended medication codes with probabilities, most probable first,
/// one output line per input record.
pub fn infer_cmd(cfg: &RunConfig, regime: Regime, input: &str, center: Option<&str>) -> CliResult<String> {
    let layout = Layout::new(cfg.output_root());
    let vocab = mcrec_core::Vocabularies::load_dir(&layout.data())
        .map_err(|_| CliError::Missing("vocabularies; run `mcrec gen-data` first".into()))?;
    let store_dir = layout.store(&cfg.variant(), regime);
    require(&store_dir.join(mcrec_core::tune::MANIFEST_FILE), "tuned model store")?;
    let store = CenterModelStore::load(&store_dir)?;
    let mut out = String::new();
    for (i, line) in input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: InferLine = serde_json::from_str(line)
            .map_err(|e| CliError::Core(mcrec_core::Error::InvalidData(format!("input line {}: {e}", i + 1))))?;
        let center_id = center.unwrap_or(&l.center_id).to_string();
        let resolve = |codes: &[String], v: &mcrec_core::data::Vocabulary, kind: &'static str| {
            codes
                .iter()
                .map(|c| {
                    v.id(c).ok_or_else(|| mcrec_core::Error::UnknownCode {
                        kind,
                        code: c.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let record = Record::new(
            center_id.clone(),
            resolve(&l.diag, &vocab.diagnoses, "diagnosis")?,
            resolve(&l.proc, &vocab.procedures, "procedure")?,
            Vec::new(),
        )?;
        let ranked = infer_ranked(&record, &center_id, &store, cfg.tune.threshold)?;
        let codes: Vec<String> = ranked
            .iter()
            .map(|(j, p)| format!("{}:{p:.4}", vocab.medications.code(*j).unwrap_or("?")))
            .collect();
        writeln!(out, "{center_id}\t{}", codes.join(" ")).unwrap();
    }
    Ok(out)
}

/// Every file under `dir`, relative path to bytes, for artifact comparison.
pub fn snapshot(dir: &Path) -> CliResult<BTreeMap<PathBuf, Vec<u8>>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> CliResult<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        for e in entries {
            let p = e.map_err(|e| CliError::Io(dir.to_path_buf(), e))?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let bytes = std::fs::read(&p).map_err(|e| CliError::Io(p.clone(), e))?;
                out.insert(p.strip_prefix(base).unwrap_or(&p).to_path_buf(), bytes);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
