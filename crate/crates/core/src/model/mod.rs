//! Causal transformer over composed multimodal segments.

mod beam;
mod checkpoint;
mod compose;
mod infer;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use beam::{beam_search, BeamParams, StepModel};
pub use checkpoint::Checkpoint;
pub use compose::{compose_full, compose_input, concat_channels, ComposedInput, PackedBatch};
pub use infer::{KvCache, TransformerStep};
pub use transformer::{embed_video, GraphOutput, Transformer};

/// Input segment kinds. `AnswerPrefix` is always last in a composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Video,
    Caption,
    History,
    Question,
    AnswerPrefix,
}

impl Segment {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Ordered, duplicate-free list of segments ending with `AnswerPrefix`.
///
/// The short notation joins letters with `_`: `v` video, `h` dialogue
/// history including the caption, `q` question, `a` answer prefix. So
/// `v_h_q_a` is the full input, `h_a` the default hallucination input and `a`
/// the answer-only input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SegmentComposition(Vec<Segment>);

impl SegmentComposition {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.last() != Some(&Segment::AnswerPrefix) {
            return Err(Error::arg("composition must end with the answer prefix"));
        }
        for (i, s) in segments.iter().enumerate() {
            if segments[..i].contains(s) {
                return Err(Error::arg(format!("duplicate segment {s:?} in composition")));
            }
        }
        Ok(Self(segments))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.0
    }

    pub fn contains(&self, s: Segment) -> bool {
        self.0.contains(&s)
    }

    /// `[v‖h‖q‖a]`
    pub fn full() -> Self {
        Self(vec![
            Segment::Video,
            Segment::Caption,
            Segment::History,
            Segment::Question,
            Segment::AnswerPrefix,
        ])
    }

    /// `[h‖a]`
    pub fn history_only() -> Self {
        Self(vec![Segment::Caption, Segment::History, Segment::AnswerPrefix])
    }

    /// `[a]`
    pub fn answer_only() -> Self {
        Self(vec![Segment::AnswerPrefix])
    }

    /// The five hallucination-model input variants compared in the ablation.
    pub fn hlm_variants() -> Vec<Self> {
        ["h_a", "q_a", "v_a", "v_h_a", "h_q_a"]
            .iter()
            .map(|s| s.parse().expect("valid variant"))
            .collect()
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for s in &self.0 {
            let p = match s {
                Segment::Video => "v",
                Segment::Caption if self.contains(Segment::History) => continue,
                Segment::Caption => "c",
                Segment::History => "h",
                Segment::Question => "q",
                Segment::AnswerPrefix => "a",
            };
            parts.push(p);
        }
        parts.join("_")
    }
}

impl FromStr for SegmentComposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut segs = Vec::new();
        for part in s.split('_') {
            match part {
                "v" => segs.push(Segment::Video),
                "h" => segs.extend([Segment::Caption, Segment::History]),
                "c" => segs.push(Segment::Caption),
                "q" => segs.push(Segment::Question),
                "a" => segs.push(Segment::AnswerPrefix),
                other => return Err(Error::arg(format!("unknown segment `{other}` in `{s}`"))),
            }
        }
        Self::new(segs)
    }
}

impl TryFrom<String> for SegmentComposition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SegmentComposition> for String {
    fn from(c: SegmentComposition) -> String {
        c.name()
    }
}

impl fmt::Display for SegmentComposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Filled from the vocabulary when a model is built for a corpus.
    pub vocab_size: usize,
    pub channel_widths: (usize, usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            max_positions: 192,
            vocab_size: 0,
            channel_widths: (16, 16, 8),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("model.{key}"),
                message,
            })
        };
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad("n_heads", format!("d = {} must be a positive multiple of n_heads = {}", self.d, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        if self.max_positions == 0 {
            return bad("max_positions", "must be positive".into());
        }
        if self.vocab_size <= crate::textproc::SEP {
            return bad("vocab_size", format!("{} leaves no room for words", self.vocab_size));
        }
        let (a, b, c) = self.channel_widths;
        if a == 0 || b == 0 || c == 0 {
            return bad("channel_widths", "widths must be at least 1".into());
        }
        Ok(())
    }

    pub fn video_width(&self) -> usize {
        let (a, b, c) = self.channel_widths;
        a + b + c
    }
}

#[cfg(test)]
mod tests;
