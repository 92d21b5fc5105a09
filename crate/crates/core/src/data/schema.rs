//! Line-delimited JSON dataset files, one record per line.
//!
//! | task | fields                                   | labels                         |
//! |------|------------------------------------------|--------------------------------|
//! | CD   | `text`, `label`                          | `T`, `F`                       |
//! | ER   | `query`, `snippet`, `label`              | `REL`, `NREL`                  |
//! | SD   | `claim`, `evidence`, `label`             | `SUP`, `P-SUP`, `P-REF`, `REF` |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;

/// File-format label strings in class-index order.
pub fn file_labels(task: Task) -> &'static [&'static str] {
    match task {
        Task::ClaimDetection => &["T", "F"],
        Task::EvidenceRanking => &["REL", "NREL"],
        Task::StanceDetection => &["SUP", "P-SUP", "P-REF", "REF"],
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClaimExample {
    pub text: String,
    /// `true` when checkworthy.
    pub checkworthy: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RerankExample {
    /// Claim plus its associated question.
    pub query: String,
    pub snippet: String,
    pub relevant: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stance {
    Supported,
    PartiallySupported,
    PartiallyRefuted,
    Refuted,
}

impl Stance {
    pub const ALL: [Stance; 4] = [
        Stance::Supported,
        Stance::PartiallySupported,
        Stance::PartiallyRefuted,
        Stance::Refuted,
    ];

    pub fn class(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StanceExample {
    pub claim: String,
    pub evidence: String,
    pub stance: Stance,
}

/// An example of any task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Claim(ClaimExample),
    Rerank(RerankExample),
    Stance(StanceExample),
}

impl Example {
    pub fn task(&self) -> Task {
        match self {
            Example::Claim(_) => Task::ClaimDetection,
            Example::Rerank(_) => Task::EvidenceRanking,
            Example::Stance(_) => Task::StanceDetection,
        }
    }

    /// Class index in the task's label order.
    pub fn class(&self) -> usize {
        match self {
            Example::Claim(e) => usize::from(!e.checkworthy),
            Example::Rerank(e) => usize::from(!e.relevant),
            Example::Stance(e) => e.stance.class(),
        }
    }

    /// Builds an example of `task` with the given class and text fields.
    /// `second` is ignored for claim detection.
    pub fn from_parts(task: Task, class: usize, first: String, second: String) -> Result<Self> {
        if class >= task.num_classes() {
            return Err(Error::Label {
                index: 0,
                label: class as i64,
                classes: task.num_classes(),
            });
        }
        Ok(match task {
            Task::ClaimDetection => Example::Claim(ClaimExample {
                text: first,
                checkworthy: class == 0,
            }),
            Task::EvidenceRanking => Example::Rerank(RerankExample {
                query: first,
                snippet: second,
                relevant: class == 0,
            }),
            Task::StanceDetection => Example::Stance(StanceExample {
                claim: first,
                evidence: second,
                stance: Stance::ALL[class],
            }),
        })
    }

    /// `(first segment, optional second segment)`.
    pub fn segments(&self) -> (&str, Option<&str>) {
        match self {
            Example::Claim(e) => (&e.text, None),
            Example::Rerank(e) => (&e.query, Some(&e.snippet)),
            Example::Stance(e) => (&e.claim, Some(&e.evidence)),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClaimRecord {
    text: String,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct RerankRecord {
    query: String,
    snippet: String,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct StanceRecord {
    claim: String,
    evidence: String,
    label: String,
}

fn parse_line(task: Task, line: &str) -> std::result::Result<(String, String, String), String> {
    let (a, b, label) = match task {
        Task::ClaimDetection => {
            let r: ClaimRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            (r.text, String::new(), r.label)
        }
        Task::EvidenceRanking => {
            let r: RerankRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            (r.query, r.snippet, r.label)
        }
        Task::StanceDetection => {
            let r: StanceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
            (r.claim, r.evidence, r.label)
        }
    };
    if a.is_empty() || (task.is_pair() && b.is_empty()) {
        return Err("empty text field".into());
    }
    Ok((a, b, label))
}

/// Reads a dataset file. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn load_dataset(path: &Path, task: Task) -> Result<Vec<Example>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (a, b, label) = parse_line(task, &line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        })?;
        let class = file_labels(task)
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                path: path.to_path_buf(),
                line: lineno,
                label: label.clone(),
            })?;
        out.push(Example::from_parts(task, class, a, b)?);
    }
    Ok(out)
}

/// One JSON line for `example`, without the trailing newline.
pub fn to_json_line(example: &Example) -> Result<String> {
    let label = file_labels(example.task())[example.class()].to_string();
    Ok(match example {
        Example::Claim(e) => serde_json::to_string(&ClaimRecord {
            text: e.text.clone(),
            label,
        })?,
        Example::Rerank(e) => serde_json::to_string(&RerankRecord {
            query: e.query.clone(),
            snippet: e.snippet.clone(),
            label,
        })?,
        Example::Stance(e) => serde_json::to_string(&StanceRecord {
            claim: e.claim.clone(),
            evidence: e.evidence.clone(),
            label,
        })?,
    })
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        writeln!(w, "{}", to_json_line(e)?)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write_tmp("");
        assert!(load_dataset(f.path(), Task::ClaimDetection).unwrap().is_empty());
    }

    #[test]
    fn one_stance_line() {
        let f = write_tmp(r#"{"claim": "c", "evidence": "e", "label": "P-REF"}"#);
        let ds = load_dataset(f.path(), Task::StanceDetection).unwrap();
        assert_eq!(
            ds,
            vec![Example::Stance(StanceExample {
                claim: "c".into(),
                evidence: "e".into(),
                stance: Stance::PartiallyRefuted,
            })]
        );
    }

    #[test]
    fn unknown_label_names_line() {
        let f = write_tmp(
            "{\"text\": \"a\", \"label\": \"T\"}\n{\"text\": \"b\", \"label\": \"MAYBE\"}\n",
        );
        match load_dataset(f.path(), Task::ClaimDetection).unwrap_err() {
            Error::UnknownLabel { line, label, .. } => {
                assert_eq!(line, 2);
                assert_eq!(label, "MAYBE");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_is_parse_error() {
        let f = write_tmp("{\"query\": \"q\", \"label\": \"REL\"}\n");
        match load_dataset(f.path(), Task::EvidenceRanking).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        let f = write_tmp("not json\n");
        assert!(matches!(
            load_dataset(f.path(), Task::ClaimDetection),
            Err(Error::Parse { line: 1, .. })
        ));
        let f = write_tmp("{\"text\": \"\", \"label\": \"T\"}\n");
        assert!(matches!(
            load_dataset(f.path(), Task::ClaimDetection),
            Err(Error::Parse { .. })
        ));
    }
}
