use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered list of distinct codes; a code's id is its position.
///
/// Embedding tables built over a vocabulary reserve two extra rows after the
/// codes: [`Vocabulary::cls_id`] and [`Vocabulary::mask_id`]. Prompt slots, when
/// present, follow at [`Vocabulary::prompt_id`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(codes: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary code `{c}`")));
            }
        }
        Ok(Self { codes, index })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn id(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, id: usize) -> Option<&str> {
        self.codes.get(id).map(String::as_str)
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn cls_id(&self) -> usize {
        self.codes.len()
    }

    pub fn mask_id(&self) -> usize {
        self.codes.len() + 1
    }

    pub fn prompt_id(&self, slot: usize) -> usize {
        self.codes.len() + 2 + slot
    }

    /// Rows in an embedding table: codes plus CLS and MASK.
    pub fn table_rows(&self) -> usize {
        self.codes.len() + 2
    }

    /// One code per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.codes.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Diagnosis, procedure and medication vocabularies.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabularies {
    pub diagnoses: Vocabulary,
    pub procedures: Vocabulary,
    pub medications: Vocabulary,
}

/// Just the vocabulary sizes, which is all the models need.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabSizes {
    pub diagnoses: usize,
    pub procedures: usize,
    pub medications: usize,
}

impl Vocabularies {
    pub fn sizes(&self) -> VocabSizes {
        VocabSizes {
            diagnoses: self.diagnoses.len(),
            procedures: self.procedures.len(),
            medications: self.medications.len(),
        }
    }

    pub const DIAGNOSIS_FILE: &'static str = "diag_vocab.txt";
    pub const PROCEDURE_FILE: &'static str = "proc_vocab.txt";
    pub const MEDICATION_FILE: &'static str = "med_vocab.txt";

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            diagnoses: Vocabulary::load(&dir.join(Self::DIAGNOSIS_FILE))?,
            procedures: Vocabulary::load(&dir.join(Self::PROCEDURE_FILE))?,
            medications: Vocabulary::load(&dir.join(Self::MEDICATION_FILE))?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.diagnoses.save(&dir.join(Self::DIAGNOSIS_FILE))?;
        self.procedures.save(&dir.join(Self::PROCEDURE_FILE))?;
        self.medications.save(&dir.join(Self::MEDICATION_FILE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_reserved_rows() {
        let v = Vocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.code(2), Some("c"));
        assert_eq!(v.cls_id(), 3);
        assert_eq!(v.mask_id(), 4);
        assert_eq!(v.prompt_id(1), 6);
        assert_eq!(v.table_rows(), 5);
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }
}
