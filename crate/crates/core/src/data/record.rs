use serde::{Deserialize, Serialize};

use super::vocab::Vocabularies;
use crate::error::{Error, Result};

/// One encounter. Code sets are stored as sorted, de-duplicated id lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub center_id: String,
    pub diagnoses: Vec<usize>,
    pub procedures: Vec<usize>,
    pub medications: Vec<usize>,
}

impl Record {
    /// Canonicalizes the sets (sort + dedup) and checks the non-empty
    /// diagnosis invariant.
    pub fn new(
        center_id: impl Into<String>,
        mut diagnoses: Vec<usize>,
        mut procedures: Vec<usize>,
        mut medications: Vec<usize>,
    ) -> Result<Self> {
        for set in [&mut diagnoses, &mut procedures, &mut medications] {
            set.sort_unstable();
            set.dedup();
        }
        let center_id = center_id.into();
        if diagnoses.is_empty() {
            return Err(Error::InvalidData(format!(
                "record in center `{center_id}` has an empty diagnosis set"
            )));
        }
        Ok(Self {
            center_id,
            diagnoses,
            procedures,
            medications,
        })
    }

    pub fn check_ranges(&self, vocab: &Vocabularies) -> Result<()> {
        let checks = [
            ("diagnosis", &self.diagnoses, vocab.diagnoses.len()),
            ("procedure", &self.procedures, vocab.procedures.len()),
            ("medication", &self.medications, vocab.medications.len()),
        ];
        for (what, ids, size) in checks {
            if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
                return Err(Error::IndexOutOfRange {
                    what: format!("{what} vocabulary"),
                    index: bad,
                    size,
                });
            }
        }
        Ok(())
    }
}

/// Line format of the records file (JSON Lines, one object per encounter).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct RecordLine {
    pub center_id: String,
    pub diag: Vec<String>,
    #[serde(default)]
    pub proc: Vec<String>,
    pub med: Vec<String>,
}

impl RecordLine {
    pub fn from_record(r: &Record, vocab: &Vocabularies) -> Self {
        let codes = |ids: &[usize], v: &super::Vocabulary| -> Vec<String> {
            ids.iter().map(|&i| v.code(i).unwrap_or_default().to_string()).collect()
        };
        Self {
            center_id: r.center_id.clone(),
            diag: codes(&r.diagnoses, &vocab.diagnoses),
            proc: codes(&r.procedures, &vocab.procedures),
            med: codes(&r.medications, &vocab.medications),
        }
    }
}
