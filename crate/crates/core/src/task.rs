//! The three fact-checking tasks and a fixed-size per-task map.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "CD")]
    ClaimDetection,
    #[serde(rename = "ER")]
    EvidenceRanking,
    #[serde(rename = "SD")]
    StanceDetection,
}

impl Task {
    pub const ALL: [Task; 3] = [
        Task::ClaimDetection,
        Task::EvidenceRanking,
        Task::StanceDetection,
    ];

    pub fn index(self) -> usize {
        match self {
            Task::ClaimDetection => 0,
            Task::EvidenceRanking => 1,
            Task::StanceDetection => 2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Task::ClaimDetection => "CD",
            Task::EvidenceRanking => "ER",
            Task::StanceDetection => "SD",
        }
    }

    /// Single-letter name used in task-order strings such as `C-S-R`.
    pub fn letter(self) -> char {
        match self {
            Task::ClaimDetection => 'C',
            Task::EvidenceRanking => 'R',
            Task::StanceDetection => 'S',
        }
    }

    pub fn from_letter(c: char) -> Option<Task> {
        match c.to_ascii_uppercase() {
            'C' => Some(Task::ClaimDetection),
            'R' => Some(Task::EvidenceRanking),
            'S' => Some(Task::StanceDetection),
            _ => None,
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// Short class names in class-index order, as used in report columns.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::ClaimDetection => &["T", "F"],
            Task::EvidenceRanking => &["Rel", "NRel"],
            Task::StanceDetection => &["Sup", "P-Sup", "P-Ref", "Ref"],
        }
    }

    /// Whether the task classifies a pair of text segments.
    pub fn is_pair(self) -> bool {
        !matches!(self, Task::ClaimDetection)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CD" | "C" | "CLAIM" => Ok(Task::ClaimDetection),
            "ER" | "R" | "RERANK" | "RANKING" => Ok(Task::EvidenceRanking),
            "SD" | "S" | "STANCE" => Ok(Task::StanceDetection),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// One value per task, indexable by [`Task`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMap<T> {
    pub cd: T,
    pub er: T,
    pub sd: T,
}

impl<T> TaskMap<T> {
    pub fn new(cd: T, er: T, sd: T) -> Self {
        Self { cd, er, sd }
    }

    pub fn from_fn(mut f: impl FnMut(Task) -> T) -> Self {
        Self {
            cd: f(Task::ClaimDetection),
            er: f(Task::EvidenceRanking),
            sd: f(Task::StanceDetection),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Task, &T) -> U) -> TaskMap<U> {
        TaskMap::from_fn(|t| f(t, &self[t]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Task, &T)> {
        Task::ALL.into_iter().map(move |t| (t, &self[t]))
    }
}

impl<T: Copy> TaskMap<T> {
    pub fn to_array(&self) -> [T; 3] {
        [self.cd, self.er, self.sd]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T> Index<Task> for TaskMap<T> {
    type Output = T;

    fn index(&self, t: Task) -> &T {
        match t {
            Task::ClaimDetection => &self.cd,
            Task::EvidenceRanking => &self.er,
            Task::StanceDetection => &self.sd,
        }
    }
}

impl<T> IndexMut<Task> for TaskMap<T> {
    fn index_mut(&mut self, t: Task) -> &mut T {
        match t {
            Task::ClaimDetection => &mut self.cd,
            Task::EvidenceRanking => &mut self.er,
            Task::StanceDetection => &mut self.sd,
        }
    }
}
