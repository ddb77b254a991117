use std::ops::Range;

use super::{Segment, SegmentComposition};
use crate::autograd::Span;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{DialogueExample, SyntheticVideo};
use crate::tensor::Matrix;
use crate::textproc::{Vocabulary, BOS, EOS, PAD, SEP};

/// One composed sequence. Video rows occupy positions
/// `video_start..video_start + video.rows()` and carry `PAD` in `tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedInput {
    pub tokens: Vec<usize>,
    pub segments: Vec<Segment>,
    pub video_start: usize,
    pub video: Option<Matrix<f32>>,
    /// Position of `BOS`; the answer segment runs to the end.
    pub answer_start: usize,
    /// Next-token targets for every answer position (teacher forcing), or
    /// empty for a bare prefix.
    pub targets: Vec<usize>,
}

impl ComposedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn answer_len(&self) -> usize {
        self.len() - self.answer_start
    }

    pub fn is_video(&self, pos: usize) -> bool {
        self.video
            .as_ref()
            .is_some_and(|v| (self.video_start..self.video_start + v.rows()).contains(&pos))
    }
}

/// Row-wise `[rgb ‖ opt ‖ aud]`.
pub fn concat_channels(video: &SyntheticVideo) -> Matrix<f32> {
    video.features_rgb.hcat(&video.features_opt).hcat(&video.features_aud)
}

fn context(
    example: &DialogueExample,
    video: Option<&SyntheticVideo>,
    vocab: &Vocabulary,
    composition: &SegmentComposition,
) -> Result<ComposedInput> {
    let mut c = ComposedInput {
        tokens: Vec::new(),
        segments: Vec::new(),
        video_start: 0,
        video: None,
        answer_start: 0,
        targets: Vec::new(),
    };
    let push = |c: &mut ComposedInput, ids: &[usize], seg: Segment| {
        c.tokens.extend_from_slice(ids);
        c.tokens.push(SEP);
        c.segments.extend(std::iter::repeat_n(seg, ids.len() + 1));
    };
    for &seg in composition.segments() {
        match seg {
            Segment::Video => {
                let v = video.ok_or_else(|| {
                    Error::arg(format!("composition needs video for `{}`", example.example_id))
                })?;
                if v.video_id != example.video_id {
                    return Err(Error::Integrity(format!(
                        "video `{}` supplied for example `{}`",
                        v.video_id, example.example_id
                    )));
                }
                let m = concat_channels(v);
                c.video_start = c.tokens.len();
                push(&mut c, &vec![PAD; m.rows()], seg);
                c.video = Some(m);
            }
            Segment::Caption => push(&mut c, &vocab.encode(&example.caption), seg),
            Segment::History => push(&mut c, &vocab.encode(&example.history_tokens()), seg),
            Segment::Question => push(&mut c, &vocab.encode(&example.question), seg),
            Segment::AnswerPrefix => {
                c.answer_start = c.tokens.len();
                c.tokens.push(BOS);
                c.segments.push(seg);
            }
        }
    }
    Ok(c)
}

/// Prefix input for predicting answer token `t` (1-based; `t = m + 1`
/// predicts `EOS`). Returns the input and the position of `a_{t−1}`, which
/// holds `BOS` when `t = 1`.
pub fn compose_input(
    example: &DialogueExample,
    video: Option<&SyntheticVideo>,
    vocab: &Vocabulary,
    composition: &SegmentComposition,
    t: usize,
) -> Result<(ComposedInput, usize)> {
    let m = example.answer.len() + 1;
    if t == 0 || t > m {
        return Err(Error::arg(format!("t = {t} outside 1..={m}")));
    }
    let mut c = context(example, video, vocab, composition)?;
    let prefix = vocab.encode(&example.answer[..t - 1]);
    c.segments.extend(std::iter::repeat_n(Segment::AnswerPrefix, prefix.len()));
    c.tokens.extend(prefix);
    let idx = c.len() - 1;
    Ok((c, idx))
}

/// Teacher-forced input: the answer segment is `BOS a_1 … a_m` and the
/// targets are `a_1 … a_m EOS`.
pub fn compose_full(
    example: &DialogueExample,
    video: Option<&SyntheticVideo>,
    vocab: &Vocabulary,
    composition: &SegmentComposition,
) -> Result<ComposedInput> {
    if example.answer.is_empty() {
        return Err(Error::arg(format!("example `{}` has an empty answer", example.example_id)));
    }
    let mut c = context(example, video, vocab, composition)?;
    let ans = vocab.encode(&example.answer);
    c.segments.extend(std::iter::repeat_n(Segment::AnswerPrefix, ans.len()));
    c.tokens.extend_from_slice(&ans);
    c.targets = ans;
    c.targets.push(EOS);
    Ok(c)
}

/// Several composed sequences packed row-wise for one forward pass.
#[derive(Debug, Clone)]
pub struct PackedBatch<S> {
    pub n_rows: usize,
    pub token_rows: Vec<usize>,
    pub token_ids: Vec<usize>,
    pub video_rows: Vec<usize>,
    pub video: Matrix<S>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
    pub spans: Vec<Span>,
    /// Global rows of every answer position, example by example.
    pub answer_rows: Vec<usize>,
    /// Range of `answer_rows` belonging to each example.
    pub answer_ranges: Vec<Range<usize>>,
    pub targets: Vec<usize>,
    /// Per-target weight `1 / (n_examples · m_i)`, so the weighted sum is
    /// the mean per-example loss.
    pub weights: Vec<S>,
}

impl<S: Scalar> PackedBatch<S> {
    pub fn new(inputs: &[ComposedInput], max_positions: usize, video_width: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut b = PackedBatch {
            n_rows: 0,
            token_rows: Vec::new(),
            token_ids: Vec::new(),
            video_rows: Vec::new(),
            video: Matrix::zeros(0, video_width),
            positions: Vec::new(),
            segments: Vec::new(),
            spans: Vec::new(),
            answer_rows: Vec::new(),
            answer_ranges: Vec::new(),
            targets: Vec::new(),
            weights: Vec::new(),
        };
        let mut video_data: Vec<S> = Vec::new();
        let n_ex = S::lit(inputs.len() as f64);
        for c in inputs {
            if c.len() > max_positions {
                return Err(Error::arg(format!(
                    "sequence of length {} exceeds max_positions {max_positions}",
                    c.len()
                )));
            }
            if !c.targets.is_empty() && c.targets.len() != c.answer_len() {
                return Err(Error::arg("targets must cover every answer position"));
            }
            let base = b.n_rows;
            for p in 0..c.len() {
                if c.is_video(p) {
                    let v = c.video.as_ref().expect("video present");
                    if v.cols() != video_width {
                        return Err(Error::arg(format!(
                            "video width {} does not match model width {video_width}",
                            v.cols()
                        )));
                    }
                    b.video_rows.push(base + p);
                    video_data.extend(v.row(p - c.video_start).iter().map(|&x| S::lit(x as f64)));
                } else {
                    b.token_rows.push(base + p);
                    b.token_ids.push(c.tokens[p]);
                }
                b.positions.push(p);
                b.segments.push(c.segments[p].index());
            }
            b.spans.push(Span {
                start: base,
                len: c.len(),
            });
            let a0 = b.answer_rows.len();
            b.answer_rows.extend((c.answer_start..c.len()).map(|p| base + p));
            b.answer_ranges.push(a0..b.answer_rows.len());
            b.targets.extend_from_slice(&c.targets);
            let w = S::one() / (n_ex * S::lit(c.targets.len().max(1) as f64));
            b.weights.extend(std::iter::repeat_n(w, c.targets.len()));
            b.n_rows += c.len();
        }
        b.video = Matrix::from_vec(b.video_rows.len(), video_width, video_data);
        Ok(b)
    }

    pub fn n_examples(&self) -> usize {
        self.spans.len()
    }

    pub fn has_targets(&self) -> bool {
        self.targets.len() == self.answer_rows.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, DataConfig};

    fn setup() -> (crate::synthdata::Corpus, Vocabulary) {
        let corpus = generate_corpus(&DataConfig {
            n_videos: 4,
            ..DataConfig::default()
        })
        .unwrap();
        let vocab = Vocabulary::build(corpus.sentences()).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn answer_only_first_step_is_bos() {
        let (corpus, vocab) = setup();
        let ex = &corpus.examples()[2];
        let (c, idx) = compose_input(ex, None, &vocab, &SegmentComposition::answer_only(), 1).unwrap();
        assert_eq!(c.tokens, vec![BOS]);
        assert_eq!(idx, 0);
    }

    #[test]
    fn prefix_semantics_and_excluded_segments() {
        let (corpus, vocab) = setup();
        let ex = &corpus.examples()[3];
        let v = corpus.video(&ex.video_id).unwrap();
        let (c, idx) = compose_input(ex, Some(v), &vocab, &SegmentComposition::full(), 3).unwrap();
        assert_eq!(&c.tokens[c.answer_start + 1..], vocab.encode(&ex.answer[..2]).as_slice());
        assert_eq!(idx, c.len() - 1);
        assert_eq!(c.video.as_ref().unwrap().rows(), v.frames());

        let (h, _) = compose_input(ex, None, &vocab, &SegmentComposition::history_only(), 1).unwrap();
        assert!(!h.segments.contains(&Segment::Question));
        assert!(h.video.is_none());
        // question-specific words never enter the [h‖a] sequence
        let n_sep = h.tokens.iter().filter(|&&t| t == SEP).count();
        assert_eq!(n_sep, 2);
        assert!(compose_input(ex, None, &vocab, &SegmentComposition::full(), 1).is_err());
        assert!(compose_input(ex, Some(v), &vocab, &SegmentComposition::full(), 0).is_err());
        assert!(compose_input(ex, Some(v), &vocab, &SegmentComposition::full(), ex.answer.len() + 2).is_err());
    }

    #[test]
    fn full_composition_targets_shift_by_one() {
        let (corpus, vocab) = setup();
        let ex = &corpus.examples()[0];
        let v = corpus.video(&ex.video_id).unwrap();
        let c = compose_full(ex, Some(v), &vocab, &SegmentComposition::full()).unwrap();
        assert_eq!(c.targets.len(), ex.answer.len() + 1);
        assert_eq!(*c.targets.last().unwrap(), EOS);
        assert_eq!(c.tokens[c.answer_start], BOS);
        assert_eq!(&c.tokens[c.answer_start + 1..], &c.targets[..c.targets.len() - 1]);
        for t in 1..=c.targets.len() {
            let (p, idx) = compose_input(ex, Some(v), &vocab, &SegmentComposition::full(), t).unwrap();
            assert_eq!(idx, c.answer_start + t - 1);
            assert_eq!(p.tokens[..], c.tokens[..=idx]);
        }
    }

    #[test]
    fn packing_tracks_rows() {
        let (corpus, vocab) = setup();
        let exs = corpus.examples();
        let inputs: Vec<ComposedInput> = exs[..3]
            .iter()
            .map(|e| compose_full(e, corpus.video(&e.video_id).ok(), &vocab, &SegmentComposition::full()).unwrap())
            .collect();
        let b = PackedBatch::<f64>::new(&inputs, 512, 40).unwrap();
        assert_eq!(b.n_rows, inputs.iter().map(ComposedInput::len).sum::<usize>());
        assert_eq!(b.token_rows.len() + b.video_rows.len(), b.n_rows);
        assert_eq!(b.video.rows(), 12);
        let wsum: f64 = b.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!(PackedBatch::<f64>::new(&inputs, 10, 40).is_err());
    }
}
