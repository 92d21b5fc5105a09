//! Turning examples into token sequences for a given head mode.
//!
//! | mode | input                                                        |
//! |------|--------------------------------------------------------------|
//! | CLS  | `[BOS] text [EOS]`, or one such sequence per pair segment    |
//! | CLM  | prompt `[BOS] a [SEP] (b [SEP])`, response `label [EOS]`     |
//! | IT   | instruction prompt and `label [EOS]` response                |
//!
//! Over-long inputs lose context from the front; labels are never cut.

use super::prompts::{format_instruction, pick_demonstrations};
use super::tokenizer::{encode_bytes, tokenize, BOS, SEP};
use super::Example;
use crate::error::{Error, Result};
use crate::heads::{HeadMode, Verbalizer};
use crate::task::Task;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncodedInput {
    Single(Vec<u32>),
    Pair(Vec<u32>, Vec<u32>),
    /// Generative modes: the model is trained on `prompt ++ response` with
    /// loss on the response only.
    Prompted { prompt: Vec<u32>, response: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub task: Task,
    pub class: usize,
    pub input: EncodedInput,
}

/// Settings that decide how examples become token sequences.
#[derive(Clone, Debug)]
pub struct Encoding<'a> {
    pub mode: HeadMode,
    pub max_seq_len: usize,
    pub verbalizer: &'a Verbalizer,
    /// Demonstrations prepended to every instruction prompt (IT mode).
    pub demonstrations: &'a [Example],
}

/// Keeps `BOS` and the last `max - 2` content tokens before `EOS`.
fn clip_sequence(ids: Vec<u32>, max: usize) -> (Vec<u32>, bool) {
    if ids.len() <= max {
        return (ids, false);
    }
    let mut out = Vec::with_capacity(max);
    out.push(ids[0]);
    out.extend_from_slice(&ids[ids.len() - (max - 1)..]);
    (out, true)
}

fn clm_prompt(example: &Example, budget: usize) -> Result<(Vec<u32>, bool)> {
    let (a, b) = example.segments();
    let mut context = encode_bytes(a);
    context.push(SEP);
    if let Some(b) = b {
        context.extend(encode_bytes(b));
        context.push(SEP);
    }
    if budget < 2 {
        return Err(Error::Truncation {
            len: context.len() + 1,
            max: budget,
            what: "joint prompt",
        });
    }
    let truncated = context.len() + 1 > budget;
    if truncated {
        context.drain(..context.len() + 1 - budget);
    }
    let mut prompt = vec![BOS];
    prompt.extend(context);
    Ok((prompt, truncated))
}

/// Encodes one example; the flag reports whether context was cut.
pub fn encode_example(example: &Example, enc: &Encoding<'_>) -> Result<(EncodedExample, bool)> {
    let task = example.task();
    let max = enc.max_seq_len;
    if max < 3 {
        return Err(Error::Config(format!("max_seq_len {max} is too small")));
    }
    let (input, truncated) = match enc.mode {
        HeadMode::Cls => {
            let (a, b) = example.segments();
            let (a, ta) = clip_sequence(tokenize(a), max);
            match b {
                None => (EncodedInput::Single(a), ta),
                Some(b) => {
                    let (b, tb) = clip_sequence(tokenize(b), max);
                    (EncodedInput::Pair(a, b), ta || tb)
                }
            }
        }
        HeadMode::Clm => {
            let response = enc.verbalizer.response_ids(task, example.class());
            let budget = max.saturating_sub(response.len());
            let (prompt, t) = clm_prompt(example, budget)?;
            (EncodedInput::Prompted { prompt, response }, t)
        }
        HeadMode::It => {
            let ins = format_instruction(example, enc.demonstrations, enc.verbalizer, max)?;
            (
                EncodedInput::Prompted {
                    prompt: ins.prompt_ids,
                    response: ins.response_ids,
                },
                ins.truncated,
            )
        }
    };
    Ok((
        EncodedExample {
            task,
            class: example.class(),
            input,
        },
        truncated,
    ))
}

/// Encodes a dataset. Returns the encoded examples and how many were cut.
pub fn encode_examples(examples: &[Example], enc: &Encoding<'_>) -> Result<(Vec<EncodedExample>, usize)> {
    let mut cut = 0;
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let (x, t) = encode_example(e, enc)?;
        cut += usize::from(t);
        out.push(x);
    }
    if cut > 0 {
        log::warn!("{cut} of {} examples had their context truncated", examples.len());
    }
    Ok((out, cut))
}

/// Demonstrations for `task` drawn from `pool` when `few_shot` is enabled.
pub fn demonstrations_for(task: Task, pool: &[Example], few_shot: bool) -> Vec<Example> {
    if few_shot {
        pick_demonstrations(task, pool)
    } else {
        Vec::new()
    }
}
