//! Tokenized task corpora grouped by split.

use crate::backbone::{Example, Tokenizer};
use crate::error::{Error, Result};
use crate::taskforge::{Split, TaskRecord, TaskType};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task_type: TaskType,
    pub dataset_id: String,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// Gold target strings of the test split, parallel to `test`.
    pub test_targets: Vec<String>,
}

impl TaskData {
    /// Encodes one dataset, keeping at most `train_cap` training records.
    pub fn from_records(
        tok: &Tokenizer,
        records: &[TaskRecord],
        train_cap: Option<usize>,
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("empty task corpus"))?;
        let (task_type, dataset_id) = (first.task_type, first.dataset_id.clone());
        let mut data = TaskData {
            task_type,
            dataset_id,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            test_targets: Vec::new(),
        };
        for r in records {
            if r.task_type != task_type || r.dataset_id != data.dataset_id {
                return Err(Error::contract(format!(
                    "corpus mixes datasets: {}/{} and {}/{}",
                    task_type, data.dataset_id, r.task_type, r.dataset_id
                )));
            }
            let ex = tok.encode_example(&r.input, &r.target)?;
            match r.split {
                Split::Train => {
                    if train_cap.is_none_or(|c| data.train.len() < c) {
                        data.train.push(ex);
                    }
                }
                Split::Validation => data.validation.push(ex),
                Split::Test => {
                    data.test.push(ex);
                    data.test_targets.push(r.target.clone());
                }
            }
        }
        Ok(data)
    }

    /// Concatenates datasets of one task type under a shared id.
    pub fn merge(parts: &[TaskData], dataset_id: &str) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("nothing to merge"))?;
        let mut out = TaskData {
            dataset_id: dataset_id.to_string(),
            train: vec![],
            validation: vec![],
            test: vec![],
            test_targets: vec![],
            ..first.clone()
        };
        for p in parts {
            if p.task_type != first.task_type {
                return Err(Error::contract(format!(
                    "cannot merge {} with {}",
                    p.task_type, first.task_type
                )));
            }
            out.train.extend(p.train.iter().cloned());
            out.validation.extend(p.validation.iter().cloned());
            out.test.extend(p.test.iter().cloned());
            out.test_targets.extend(p.test_targets.iter().cloned());
        }
        Ok(out)
    }

    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(Example::len)
            .max()
            .unwrap_or(0)
    }
}
