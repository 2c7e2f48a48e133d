//! CSV and image emitters. All output is a deterministic function of the
//! inputs.

use std::fmt::Write as _;
use std::path::Path;

use super::{EvalResult, Group};
use crate::error::{Error, Result};

pub const PER_GROUP_HEADER: &str = "model,group,prauc,jaccard,f1,improvement_vs_baseline";

/// Writes `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn jsd_csv(ids: &[String], m: &[Vec<f64>]) -> String {
    let mut s = String::from("center_id");
    for id in ids {
        write!(s, ",{id}").unwrap();
    }
    s.push('\n');
    for (id, row) in ids.iter().zip(m) {
        s.push_str(id);
        for v in row {
            write!(s, ",{v:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Binary greyscale PGM with one `cell × cell` square per matrix entry;
/// 0 maps to white and 1 to black.
pub fn heatmap_pgm(m: &[Vec<f64>], cell: usize) -> Vec<u8> {
    let h = m.len();
    let side = h * cell;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for row in m {
        let line: Vec<u8> = row
            .iter()
            .flat_map(|&v| std::iter::repeat_n((255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8, cell))
            .collect();
        for _ in 0..cell {
            out.extend_from_slice(&line);
        }
    }
    out
}

pub fn overall_csv(rows: &[(String, &EvalResult)]) -> String {
    let mut s = String::from("model,records,prauc,jaccard,f1,prauc_skipped\n");
    for (model, r) in rows {
        let o = &r.overall;
        writeln!(
            s,
            "{model},{},{:.6},{:.6},{:.6},{}",
            o.records, o.mean.prauc, o.mean.jaccard, o.mean.f1, o.prauc_skipped
        )
        .unwrap();
    }
    s
}

pub fn per_center_csv(rows: &[(String, &EvalResult)]) -> String {
    let mut s = String::from("model,center_id,records,prauc,jaccard,f1,prauc_skipped\n");
    for (model, r) in rows {
        for (c, a) in &r.per_center {
            writeln!(
                s,
                "{model},{c},{},{:.6},{:.6},{:.6},{}",
                a.records, a.mean.prauc, a.mean.jaccard, a.mean.f1, a.prauc_skipped
            )
            .unwrap();
        }
    }
    s
}

/// Relative Jaccard gain of `value` over `base`.
pub fn improvement(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (value - base) / base
    }
}

/// Per-group table. `improvement_vs_baseline` is the relative Jaccard gain
/// over the row of model `baseline` in the same group, empty when there is
/// no baseline.
pub fn per_group_csv(rows: &[(String, &EvalResult)], baseline: Option<&str>) -> String {
    let base = baseline.and_then(|b| rows.iter().find(|(m, _)| m == b)).map(|(_, r)| *r);
    let mut s = format!("{PER_GROUP_HEADER}\n");
    for (model, r) in rows {
        for (g, a) in &r.per_group {
            let imp = base
                .and_then(|b| b.per_group.get(g))
                .map(|b| format!("{:.6}", improvement(a.mean.jaccard, b.mean.jaccard)))
                .unwrap_or_default();
            writeln!(
                s,
                "{model},{},{:.6},{:.6},{:.6},{imp}",
                Group::as_str(*g),
                a.mean.prauc,
                a.mean.jaccard,
                a.mean.f1
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let m = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let img = heatmap_pgm(&m, 3);
        let header = b"P5\n6 6\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 36);
        assert_eq!(px[0], 255);
        assert_eq!(px[3], 0);
    }

    #[test]
    fn per_group_header() {
        let s = per_group_csv(&[], None);
        assert_eq!(s.lines().next(), Some(PER_GROUP_HEADER));
    }
}
