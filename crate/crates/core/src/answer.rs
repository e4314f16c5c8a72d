//! Token vocabulary and the fixed answer format
//! `<st_1><st_2><st_3><st_4> Answer: <finding>: yes|no, ...` over the 14
//! findings in canonical order.

use crate::error::{Error, Result};
use crate::{Labels, NUM_GAZE_TOKENS, NUM_LABELS};

/// Canonical finding order; label `j` of every vector refers to `FINDINGS[j]`.
pub const FINDINGS: [&str; NUM_LABELS] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

pub const PLACEHOLDER_GLYPHS: [&str; NUM_GAZE_TOKENS] = ["<st_1>", "<st_2>", "<st_3>", "<st_4>"];
pub const ANSWER_LITERAL: &str = "Answer:";

/// Fixed token ids. Ids at or above [`Vocab::NUM_DEFINED`] are unused.
pub struct Vocab;

impl Vocab {
    pub const PAD: u32 = 0;
    pub const IMAGE: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const PLACEHOLDER: [u32; NUM_GAZE_TOKENS] = [4, 5, 6, 7];
    pub const ANSWER: u32 = 8;
    pub const YES: u32 = 9;
    pub const NO: u32 = 10;
    pub const FINDING_BASE: u32 = 11;
    pub const REPORT: u32 = Self::FINDING_BASE + NUM_LABELS as u32;
    pub const THE: u32 = Self::REPORT + 1;
    pub const FINDINGS_WORD: u32 = Self::REPORT + 2;
    pub const NUM_DEFINED: u32 = Self::REPORT + 3;

    pub fn finding(j: usize) -> u32 {
        Self::FINDING_BASE + j as u32
    }

    pub fn surface(id: u32) -> String {
        match id {
            Self::PAD => "<pad>".into(),
            Self::IMAGE => "<img>".into(),
            Self::BOS => "<bos>".into(),
            Self::EOS => "<eos>".into(),
            4..=7 => PLACEHOLDER_GLYPHS[(id - 4) as usize].into(),
            Self::ANSWER => ANSWER_LITERAL.into(),
            Self::YES => "yes".into(),
            Self::NO => "no".into(),
            id if (Self::FINDING_BASE..Self::REPORT).contains(&id) => {
                FINDINGS[(id - Self::FINDING_BASE) as usize].into()
            }
            Self::REPORT => "Report".into(),
            Self::THE => "the".into(),
            Self::FINDINGS_WORD => "findings".into(),
            other => format!("<unk_{other}>"),
        }
    }
}

/// The instruction prompt used for every sample.
pub fn default_prompt() -> Vec<u32> {
    vec![Vocab::BOS, Vocab::REPORT, Vocab::THE, Vocab::FINDINGS_WORD]
}

/// Answer token ids: four placeholders, `Answer:`, then finding/yes-no pairs.
pub fn answer_tokens(labels: &Labels) -> Vec<u32> {
    let mut out = Vec::with_capacity(answer_len());
    out.extend_from_slice(&Vocab::PLACEHOLDER);
    out.push(Vocab::ANSWER);
    for (j, &y) in labels.iter().enumerate() {
        out.push(Vocab::finding(j));
        out.push(if y == 1 { Vocab::YES } else { Vocab::NO });
    }
    out
}

pub const fn answer_len() -> usize {
    NUM_GAZE_TOKENS + 1 + 2 * NUM_LABELS
}

/// Offset of the yes/no token of finding `j` within the answer.
pub const fn decision_offset(j: usize) -> usize {
    NUM_GAZE_TOKENS + 2 + 2 * j
}

pub fn render_fixed_answer(labels: &Labels) -> String {
    detokenize_answer(&answer_tokens(labels))
}

/// Renders answer tokens as text. Malformed token streams still render so the
/// strict parser can report where they go wrong.
pub fn detokenize_answer(tokens: &[u32]) -> String {
    let n = tokens.len().min(NUM_GAZE_TOKENS);
    let mut text: String = tokens[..n].iter().map(|&t| Vocab::surface(t)).collect();
    let rest = &tokens[n..];
    if let Some((&first, clauses)) = rest.split_first() {
        text.push(' ');
        text.push_str(&Vocab::surface(first));
        let rendered: Vec<String> = clauses
            .chunks(2)
            .map(|c| match c {
                [name, value] => format!("{}: {}", Vocab::surface(*name), Vocab::surface(*value)),
                [name] => format!("{}:", Vocab::surface(*name)),
                _ => unreachable!(),
            })
            .collect();
        if !rendered.is_empty() {
            text.push(' ');
            text.push_str(&rendered.join(", "));
        }
    }
    text
}

/// Strict parser for the fixed answer format. Errors carry the 1-based index
/// of the first offending clause (0 for the placeholder / `Answer:` prefix).
pub fn parse_fixed_answer(text: &str) -> Result<Labels> {
    let prefix_err = |msg: &str| Error::AnswerParse {
        clause: 0,
        msg: msg.to_string(),
    };
    let mut rest = text;
    for glyph in PLACEHOLDER_GLYPHS {
        rest = rest
            .strip_prefix(glyph)
            .ok_or_else(|| prefix_err(&format!("expected placeholder `{glyph}`")))?;
    }
    rest = rest
        .strip_prefix(' ')
        .and_then(|r| r.strip_prefix(ANSWER_LITERAL))
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| prefix_err("expected ` Answer: ` after the placeholders"))?;

    let clauses: Vec<&str> = rest.split(", ").collect();
    let mut labels = [0u8; NUM_LABELS];
    for (j, name) in FINDINGS.iter().enumerate() {
        let clause = j + 1;
        let Some(c) = clauses.get(j) else {
            return Err(Error::AnswerParse {
                clause,
                msg: format!("missing clause for `{name}`"),
            });
        };
        let value = c
            .strip_prefix(name)
            .and_then(|r| r.strip_prefix(": "))
            .ok_or_else(|| Error::AnswerParse {
                clause,
                msg: format!("expected `{name}: yes|no`, found `{c}`"),
            })?;
        labels[j] = match value {
            "yes" => 1,
            "no" => 0,
            other => {
                return Err(Error::AnswerParse {
                    clause,
                    msg: format!("expected yes or no, found `{other}`"),
                })
            }
        };
    }
    if clauses.len() > NUM_LABELS {
        return Err(Error::AnswerParse {
            clause: NUM_LABELS + 1,
            msg: "trailing clauses after the last finding".into(),
        });
    }
    Ok(labels)
}
