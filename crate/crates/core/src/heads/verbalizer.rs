use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{encode_bytes, EOS};
use crate::error::{Error, Result};
use crate::task::{Task, TaskMap};

/// Label strings in class-index order for each task.
pub fn default_label_strings() -> TaskMap<Vec<String>> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    TaskMap::new(
        s(&["T", "F"]),
        s(&["RELEVANT", "NOT RELEVANT"]),
        s(&["SUPPORTS", "PARTIALLY SUPPORTS", "PARTIALLY REFUTES", "REFUTES"]),
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizedLabel {
    pub label: String,
    pub tokens: Vec<u32>,
}

/// Bijective map between class indices and the token sequences a language
/// model head is scored on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    tables: TaskMap<Vec<VerbalizedLabel>>,
}

impl Default for Verbalizer {
    fn default() -> Self {
        Self::new(default_label_strings()).expect("default labels are distinct")
    }
}

impl Verbalizer {
    pub fn new(labels: TaskMap<Vec<String>>) -> Result<Self> {
        let mut tables = TaskMap::default();
        for task in Task::ALL {
            let strings = &labels[task];
            if strings.len() != task.num_classes() {
                return Err(Error::Config(format!(
                    "{task} verbalizer needs {} labels, got {}",
                    task.num_classes(),
                    strings.len()
                )));
            }
            let entries: Vec<VerbalizedLabel> = strings
                .iter()
                .map(|s| VerbalizedLabel {
                    label: s.clone(),
                    tokens: encode_bytes(s),
                })
                .collect();
            Self::check_table(task, &entries)?;
            tables[task] = entries;
        }
        Ok(Self { tables })
    }

    /// Builds from explicit token sequences; rejects duplicates and empties.
    pub fn from_tokens(tables: TaskMap<Vec<VerbalizedLabel>>) -> Result<Self> {
        for task in Task::ALL {
            if tables[task].len() != task.num_classes() {
                return Err(Error::Config(format!("{task} verbalizer has wrong label count")));
            }
            Self::check_table(task, &tables[task])?;
        }
        Ok(Self { tables })
    }

    fn check_table(task: Task, entries: &[VerbalizedLabel]) -> Result<()> {
        for (i, a) in entries.iter().enumerate() {
            if a.tokens.is_empty() {
                return Err(Error::Config(format!("{task} label {:?} has no tokens", a.label)));
            }
            for b in &entries[i + 1..] {
                if a.tokens == b.tokens || a.label == b.label {
                    return Err(Error::Config(format!(
                        "{task} labels {:?} and {:?} are not distinct",
                        a.label, b.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self, task: Task) -> &[VerbalizedLabel] {
        &self.tables[task]
    }

    /// Tokens the model is trained to emit for `class`: label bytes then EOS.
    pub fn response_ids(&self, task: Task, class: usize) -> Vec<u32> {
        let mut ids = self.tables[task][class].tokens.clone();
        ids.push(EOS);
        ids
    }

    pub fn label(&self, task: Task, class: usize) -> &str {
        &self.tables[task][class].label
    }

    /// Option list rendered into prompts, e.g. `SUPPORTS/REFUTES`.
    pub fn label_str(&self, task: Task) -> String {
        self.tables[task]
            .iter()
            .map(|l| l.label.to_uppercase())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn class_of(&self, task: Task, label: &str) -> Option<usize> {
        self.tables[task].iter().position(|l| l.label == label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_bijective() {
        let v = Verbalizer::default();
        assert_eq!(v.labels(Task::StanceDetection).len(), 4);
        assert_eq!(
            v.label_str(Task::StanceDetection),
            "SUPPORTS/PARTIALLY SUPPORTS/PARTIALLY REFUTES/REFUTES"
        );
        assert_eq!(v.label_str(Task::ClaimDetection), "T/F");
        assert_eq!(v.class_of(Task::StanceDetection, "REFUTES"), Some(3));
        assert_eq!(v.response_ids(Task::ClaimDetection, 0), vec![84, EOS]);
    }

    #[test]
    fn duplicate_token_sequences_rejected() {
        let mut labels = default_label_strings();
        labels.sd[1] = "SUPPORTS".into();
        assert!(matches!(Verbalizer::new(labels), Err(Error::Config(_))));

        let mut tables = Verbalizer::default().tables;
        tables.cd[1].tokens = tables.cd[0].tokens.clone();
        assert!(Verbalizer::from_tokens(tables).is_err());
    }
}
