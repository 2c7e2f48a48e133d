//! Seeds × regimes experiment matrix with per-seed resume.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use mcrec_core::data::{MultiCenterDataset, Partition};
use mcrec_core::metrics::{report, Aggregate, Group};
use mcrec_core::tune::{directory_bytes, evaluate, Regime};
use mcrec_core::BackboneParams;
use serde::{Deserialize, Serialize};

use crate::commands::{build_dataset, pretrain_into, tune_into};
use crate::config::{echo, RunConfig};
use crate::{CliError, CliResult, Layout, STORE_DIR};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "result.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const AGGREGATE_HEADER: &str =
    "regime,scope,seeds,prauc_mean,prauc_std,jaccard_mean,jaccard_std,f1_mean,f1_std,improvement_vs_baseline";

/// Version string of the running binary, `git describe` style when built
/// from a checkout.
pub const SOURCE_VERSION: &str = env!("MCREC_SOURCE_VERSION");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub dir: String,
    pub pretrained: bool,
    pub completed: Vec<Regime>,
    pub finished: bool,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub config_hash: String,
    pub source_version: String,
    pub finished: bool,
    pub seeds: BTreeMap<u64, SeedEntry>,
}

/// One (seed, regime) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafResult {
    pub seed: u64,
    pub regime: Regime,
    pub variant: String,
    pub overall: Aggregate,
    pub per_group: BTreeMap<String, Aggregate>,
    pub per_center: BTreeMap<String, Aggregate>,
    pub tuned_parameters: BTreeMap<String, usize>,
    pub store_bytes: u64,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub regime: Regime,
    /// `overall` or a group name.
    pub scope: String,
    pub seeds: usize,
    pub prauc: MeanStd,
    pub jaccard: MeanStd,
    pub f1: MeanStd,
    pub improvement_vs_baseline: Option<f64>,
}

pub struct MatrixOutcome {
    pub manifest: ExperimentManifest,
    pub leaves: Vec<LeafResult>,
    pub aggregate: Vec<AggregateRow>,
    /// Seeds skipped because an earlier run had completed them.
    pub resumed: Vec<u64>,
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn write_manifest(path: &Path, m: &ExperimentManifest) -> CliResult<()> {
    let json = serde_json::to_string_pretty(m).map_err(mcrec_core::Error::from)?;
    report::write_file(path, json + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    Ok(serde_json::from_str(&text).map_err(mcrec_core::Error::from)?)
}

/// Runs the pipeline for every seed and regime, then aggregates.
pub fn run_matrix(cfg: &RunConfig) -> CliResult<MatrixOutcome> {
    let root = Layout::new(cfg.output_root()).matrix();
    let manifest_path = root.join(MANIFEST_FILE);
    let hash = cfg.hash();
    let mut manifest = if manifest_path.exists() {
        let m: ExperimentManifest = read_json(&manifest_path)?;
        if m.config_hash != hash {
            return Err(CliError::Config(format!(
                "{} holds a run with a different configuration; use another output_root",
                root.display()
            )));
        }
        m
    } else {
        ExperimentManifest {
            run_id: hash[..12].to_string(),
            config_hash: hash.clone(),
            source_version: SOURCE_VERSION.to_string(),
            finished: false,
            seeds: BTreeMap::new(),
        }
    };
    for &s in &cfg.seeds {
        manifest.seeds.entry(s).or_insert_with(|| SeedEntry {
            dir: format!("seed-{s}"),
            ..Default::default()
        });
    }
    manifest.finished = false;
    echo(cfg, &root)?;
    write_manifest(&manifest_path, &manifest)?;

    let base = build_dataset(cfg, cfg.seeds[0])?;
    base.save_dir(&root.join("data"))?;

    let resumed: Vec<u64> = cfg
        .seeds
        .iter()
        .copied()
        .filter(|s| manifest.seeds[s].finished)
        .collect();
    let pending: Vec<u64> = cfg.seeds.iter().copied().filter(|s| !resumed.contains(s)).collect();
    let workers = cfg.jobs.min(pending.len()).max(1);
    let inner_jobs = if workers == 1 { cfg.jobs } else { 1 };
    let shared = Mutex::new(manifest);
    let next = AtomicUsize::new(0);
    let errors: Mutex<Vec<(u64, CliError)>> = Mutex::new(Vec::new());

    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&seed) = pending.get(i) else { break };
        let mut ds = base.clone();
        ds.resplit(seed);
        if let Err(e) = run_seed(cfg, &ds, seed, inner_jobs, &root, &shared, &manifest_path) {
            log::error!("seed {seed}: {e}");
            errors.lock().unwrap().push((seed, e));
        }
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let mut manifest = shared.into_inner().unwrap();
    if let Some((seed, e)) = errors.into_inner().unwrap().into_iter().min_by_key(|(s, _)| *s) {
        write_manifest(&manifest_path, &manifest)?;
        log::error!("matrix incomplete; completed seeds are kept in {}", root.display());
        return Err(match e {
            CliError::Core(inner) => CliError::Core(inner),
            other => CliError::Config(format!("seed {seed}: {other}")),
        });
    }

    let mut leaves = Vec::new();
    for &s in &cfg.seeds {
        for &r in &cfg.matrix.regimes {
            leaves.push(read_json::<LeafResult>(&seed_dir(&root, s).join(r.as_str()).join(RESULT_FILE))?);
        }
    }
    let aggregate = aggregate(&leaves, &cfg.matrix.regimes, cfg.matrix.baseline);
    report::write_file(&root.join(AGGREGATE_FILE), aggregate_csv(&aggregate))?;
    manifest.finished = true;
    write_manifest(&manifest_path, &manifest)?;
    Ok(MatrixOutcome {
        manifest,
        leaves,
        aggregate,
        resumed,
    })
}

fn run_seed(
    cfg: &RunConfig,
    ds: &MultiCenterDataset,
    seed: u64,
    jobs: usize,
    root: &Path,
    manifest: &Mutex<ExperimentManifest>,
    manifest_path: &Path,
) -> CliResult<()> {
    let dir = seed_dir(root, seed);
    let update = |f: &dyn Fn(&mut SeedEntry)| -> CliResult<()> {
        let mut m = manifest.lock().unwrap();
        f(m.seeds.get_mut(&seed).expect("seed registered"));
        write_manifest(manifest_path, &m)
    };
    let entry = manifest.lock().unwrap().seeds[&seed].clone();

    let needs_backbone = cfg.matrix.regimes.iter().any(|r| r.needs_pretrained_backbone());
    let pretrain_dir = dir.join("pretrain");
    let backbone: Option<BackboneParams> = if !needs_backbone {
        None
    } else if entry.pretrained {
        Some(BackboneParams::load(&pretrain_dir.join(mcrec_core::pretrain::BACKBONE_FILE))?)
    } else {
        let t = Instant::now();
        let out = pretrain_into(cfg, ds, seed, &pretrain_dir)?;
        let secs = t.elapsed().as_secs_f64();
        update(&|e| {
            e.pretrained = true;
            e.timings.insert("pretrain".into(), secs);
        })?;
        Some(out.backbone)
    };

    for &regime in &cfg.matrix.regimes {
        let leaf_dir = dir.join(regime.as_str());
        if entry.completed.contains(&regime) && leaf_dir.join(RESULT_FILE).exists() {
            continue;
        }
        let t = Instant::now();
        let mut rcfg = cfg.clone();
        rcfg.tune.regime = regime;
        let (store, rep) = tune_into(&rcfg, ds, backbone.as_ref(), seed, jobs, &leaf_dir)?;
        let res = evaluate(ds, Partition::Test, &store, cfg.tune.threshold, &cfg.groups, cfg.tune.batch_size)?;
        let leaf = LeafResult {
            seed,
            regime,
            variant: cfg.variant(),
            overall: res.overall.clone(),
            per_group: res
                .per_group
                .iter()
                .map(|(g, a)| (g.as_str().to_string(), a.clone()))
                .collect(),
            per_center: res.per_center.clone(),
            tuned_parameters: rep.tuned_parameters.clone(),
            store_bytes: directory_bytes(&leaf_dir.join(STORE_DIR))?,
        };
        let json = serde_json::to_string_pretty(&leaf).map_err(mcrec_core::Error::from)?;
        report::write_file(&leaf_dir.join(RESULT_FILE), json + "\n")?;
        let secs = t.elapsed().as_secs_f64();
        update(&|e| {
            if !e.completed.contains(&regime) {
                e.completed.push(regime);
            }
            e.timings.insert(regime.as_str().into(), secs);
        })?;
    }
    update(&|e| e.finished = true)
}

/// Mean ± std over seeds for every regime, overall and per group, with the
/// relative Jaccard gain over `baseline` in the same scope.
pub fn aggregate(leaves: &[LeafResult], regimes: &[Regime], baseline: Regime) -> Vec<AggregateRow> {
    let scopes: Vec<String> = std::iter::once("overall".to_string())
        .chain([Group::Small, Group::Medium, Group::Large].map(|g| g.as_str().to_string()))
        .collect();
    let pick = |l: &LeafResult, scope: &str| -> Option<Aggregate> {
        if scope == "overall" {
            Some(l.overall.clone())
        } else {
            l.per_group.get(scope).cloned()
        }
    };
    let mut rows = Vec::new();
    for &regime in regimes {
        for scope in &scopes {
            let aggs: Vec<Aggregate> = leaves
                .iter()
                .filter(|l| l.regime == regime)
                .filter_map(|l| pick(l, scope))
                .collect();
            if aggs.is_empty() {
                continue;
            }
            let col = |f: fn(&Aggregate) -> f64| MeanStd::of(&aggs.iter().map(f).collect::<Vec<_>>());
            rows.push(AggregateRow {
                regime,
                scope: scope.clone(),
                seeds: aggs.len(),
                prauc: col(|a| a.mean.prauc),
                jaccard: col(|a| a.mean.jaccard),
                f1: col(|a| a.mean.f1),
                improvement_vs_baseline: None,
            });
        }
    }
    let base: BTreeMap<String, f64> = rows
        .iter()
        .filter(|r| r.regime == baseline)
        .map(|r| (r.scope.clone(), r.jaccard.mean))
        .collect();
    for r in &mut rows {
        r.improvement_vs_baseline = base.get(&r.scope).map(|&b| report::improvement(r.jaccard.mean, b));
    }
    rows
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = format!("{AGGREGATE_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.regime,
            r.scope,
            r.seeds,
            r.prauc.mean,
            r.prauc.std,
            r.jaccard.mean,
            r.jaccard.std,
            r.f1.mean,
            r.f1.std,
            r.improvement_vs_baseline.map(|v| v.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    s
}
