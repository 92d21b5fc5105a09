//! Instruction prompts built from the versioned templates in
//! `assets/prompts/v1`.
//!
//! A rendered prompt is the task template with `{label_str}` replaced by the
//! slash-separated label list, followed by optional demonstrations and the
//! example itself:
//!
//! ```text
//! <template>
//!
//! Text: <demo text>
//! Answer: T
//!
//! Text: <example text>
//! Answer: 
//! ```
//!
//! Pair tasks use `Query:`/`Document:` (re-ranking) and `Claim:`/`Evidence:`
//! (stance) field names. The response is the verbalized label followed by EOS.

use super::tokenizer::{encode_bytes, BOS};
use super::Example;
use crate::error::{Error, Result};
use crate::heads::Verbalizer;
use crate::task::Task;

pub const PROMPT_VERSION: &str = "v1";

const CLAIM_DETECTION: &str = include_str!("../../assets/prompts/v1/claim_detection.txt");
const EVIDENCE_RANKING: &str = include_str!("../../assets/prompts/v1/evidence_ranking.txt");
const STANCE_DETECTION: &str = include_str!("../../assets/prompts/v1/stance_detection.txt");

/// Raw template text with its `{label_str}` placeholder.
pub fn template(task: Task) -> &'static str {
    match task {
        Task::ClaimDetection => CLAIM_DETECTION,
        Task::EvidenceRanking => EVIDENCE_RANKING,
        Task::StanceDetection => STANCE_DETECTION,
    }
}

/// Template with the label list filled in.
pub fn instruction(task: Task, verbalizer: &Verbalizer) -> String {
    template(task).replace("{label_str}", &verbalizer.label_str(task))
}

fn field_names(task: Task) -> (&'static str, Option<&'static str>) {
    match task {
        Task::ClaimDetection => ("Text", None),
        Task::EvidenceRanking => ("Query", Some("Document")),
        Task::StanceDetection => ("Claim", Some("Evidence")),
    }
}

/// Appends `\n\n<Field>: a[\n<Field2>: b]\nAnswer: ` around `fields`.
fn push_block(out: &mut Vec<u32>, task: Task, fields: (&[u32], Option<&[u32]>)) {
    let (n1, n2) = field_names(task);
    out.extend(encode_bytes(&format!("\n\n{n1}: ")));
    out.extend_from_slice(fields.0);
    if let (Some(n2), Some(b)) = (n2, fields.1) {
        out.extend(encode_bytes(&format!("\n{n2}: ")));
        out.extend_from_slice(b);
    }
    out.extend(encode_bytes("\nAnswer: "));
}

/// One demonstration per label: the first example of each class in
/// `pool`, in class order. Classes without an example are skipped.
pub fn pick_demonstrations(task: Task, pool: &[Example]) -> Vec<Example> {
    (0..task.num_classes())
        .filter_map(|c| pool.iter().find(|e| e.task() == task && e.class() == c).cloned())
        .collect()
}

/// A formatted instruction/response pair and whether the input was cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
    pub truncated: bool,
}

/// Builds `(prompt, response)` for `example`. When the whole sequence would
/// exceed `max_len` tokens the example's own fields are cut from the front
/// (first segment before second); the template, demonstrations and response
/// are never cut, and if they alone do not fit the result is an error.
pub fn format_instruction(
    example: &Example,
    few_shot: &[Example],
    verbalizer: &Verbalizer,
    max_len: usize,
) -> Result<Instruction> {
    let task = example.task();
    let mut prefix = vec![BOS];
    prefix.extend(encode_bytes(&instruction(task, verbalizer)));
    for demo in few_shot {
        if demo.task() != task {
            return Err(Error::Input(format!(
                "{} demonstration given for a {task} example",
                demo.task()
            )));
        }
        let (a, b) = demo.segments();
        let (a, b) = (encode_bytes(a), b.map(encode_bytes));
        push_block(&mut prefix, task, (&a, b.as_deref()));
        prefix.extend(verbalizer.labels(task)[demo.class()].tokens.iter().copied());
    }
    let response_ids = verbalizer.response_ids(task, example.class());

    let (a, b) = example.segments();
    let mut a = encode_bytes(a);
    let mut b = b.map(encode_bytes);
    let mut skeleton = Vec::new();
    push_block(&mut skeleton, task, (&[], b.as_ref().map(|_| &[][..])));
    let fixed = prefix.len() + skeleton.len() + response_ids.len();
    let content = a.len() + b.as_ref().map_or(0, Vec::len);
    let mut truncated = false;
    if fixed + content > max_len {
        if fixed >= max_len {
            return Err(Error::Truncation {
                len: fixed + content,
                max: max_len,
                what: "instruction template and response",
            });
        }
        let mut excess = fixed + content - max_len;
        let cut = excess.min(a.len());
        a.drain(..cut);
        excess -= cut;
        if let Some(b) = b.as_mut() {
            let cut = excess.min(b.len());
            b.drain(..cut);
        }
        truncated = true;
    }
    let mut prompt_ids = prefix;
    push_block(&mut prompt_ids, task, (&a, b.as_deref()));
    Ok(Instruction {
        prompt_ids,
        response_ids,
        truncated,
    })
}
