//! Splices FCN token spans into word sequences.
//!
//! Layout: `<bos> prompt <sep> answer <eos>`, where every `<fcn>` in the
//! prompt expands to a full span of `span_len` positions. Targets sit on the
//! positions that predict the answer words and the closing `<eos>`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};

use super::tokenizer::Tokenizer;
use super::LmParams;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Word(usize),
    Fcn { span: usize, row: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PositionMap {
    pub fcn_spans: Vec<Range<usize>>,
    pub answer: Range<usize>,
}

impl PositionMap {
    pub fn fcn_positions(&self) -> Vec<usize> {
        self.fcn_spans.iter().flat_map(|r| r.clone()).collect()
    }

    /// Query positions whose next-token output is an answer word.
    pub fn prediction_positions(&self) -> Range<usize> {
        if self.answer.is_empty() {
            self.answer.clone()
        } else {
            self.answer.start - 1..self.answer.end - 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub slots: Vec<Slot>,
    pub targets: Vec<Option<usize>>,
    pub map: PositionMap,
}

impl Assembly {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn span_count(&self) -> usize {
        self.map.fcn_spans.len()
    }

    /// Appends a generated word (used during decoding).
    pub fn push_word(&mut self, id: usize) {
        self.slots.push(Slot::Word(id));
        self.targets.push(None);
    }
}

/// What fills one FCN span at embedding time.
#[derive(Debug, Clone)]
pub enum SpanFill<'a> {
    /// Projected encoder tokens, one row per span position.
    Tokens(ArrayView2<'a, f64>),
    /// Learned null embedding at every position.
    Null,
    /// Word embeddings at chosen positions, null elsewhere.
    Words(&'a [Option<usize>]),
}

pub fn assemble(
    tok: &Tokenizer,
    prompt: &[usize],
    span_len: usize,
    expected_spans: usize,
    answer: &[usize],
) -> Result<Assembly> {
    let placeholders = prompt.iter().filter(|&&id| id == tok.fcn()).count();
    if placeholders != expected_spans {
        return Err(invalid!(
            "prompt has {placeholders} FCN placeholders but {expected_spans} FCN sequences were supplied"
        ));
    }
    let mut slots = vec![Slot::Word(tok.bos())];
    let mut spans = Vec::new();
    for &id in prompt {
        if id == tok.fcn() {
            let start = slots.len();
            let span = spans.len();
            slots.extend((0..span_len).map(|row| Slot::Fcn { span, row }));
            spans.push(start..slots.len());
        } else {
            slots.push(Slot::Word(id));
        }
    }
    slots.push(Slot::Word(tok.sep()));
    let answer_start = slots.len();
    let mut targets = vec![None; slots.len()];
    if !answer.is_empty() {
        for &id in answer.iter().chain(std::iter::once(&tok.eos())) {
            *targets.last_mut().expect("non-empty") = Some(id);
            slots.push(Slot::Word(id));
            targets.push(None);
        }
        // `<eos>` predicts nothing.
        slots.pop();
        targets.pop();
    }
    Ok(Assembly {
        targets,
        map: PositionMap {
            fcn_spans: spans,
            answer: answer_start..answer_start + answer.len(),
        },
        slots,
    })
}

/// Builds the input matrix: slot embeddings plus learned positions.
pub fn embed(params: &LmParams, asm: &Assembly, fills: &[SpanFill<'_>]) -> Result<Array2<f64>> {
    let n = asm.len();
    let d = params.d_model();
    if fills.len() != asm.span_count() {
        return Err(invalid!(
            "{} span fills for {} spans",
            fills.len(),
            asm.span_count()
        ));
    }
    if n > params.pos_emb.nrows() {
        return Err(invalid!(
            "sequence length {n} exceeds the position table ({})",
            params.pos_emb.nrows()
        ));
    }
    for fill in fills {
        let ok = match fill {
            SpanFill::Tokens(t) => {
                t.ncols() == d
                    && asm
                        .map
                        .fcn_spans
                        .first()
                        .is_none_or(|r| r.len() == t.nrows())
            }
            SpanFill::Null => true,
            SpanFill::Words(w) => asm.map.fcn_spans.first().is_none_or(|r| r.len() == w.len()),
        };
        if !ok {
            return Err(invalid!(
                "FCN span fill does not match the span length or model width"
            ));
        }
    }
    let mut x = params.pos_emb.slice(ndarray::s![..n, ..]).to_owned();
    for (t, slot) in asm.slots.iter().enumerate() {
        let mut row = x.row_mut(t);
        match *slot {
            Slot::Word(id) => row += &params.tok_emb.row(id),
            Slot::Fcn { span, row: r } => match &fills[span] {
                SpanFill::Tokens(tokens) => row += &tokens.row(r),
                SpanFill::Null => row += &params.null_fcn,
                SpanFill::Words(words) => match words[r] {
                    Some(id) => row += &params.tok_emb.row(id),
                    None => row += &params.null_fcn,
                },
            },
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_words(["is", "the", "subject", "male", "same", "yes"])
    }

    #[test]
    fn single_placeholder_expands_to_span() {
        let t = tok();
        let prompt = t.tokenize("is the <fcn> subject male");
        let asm = assemble(&t, &prompt, 124, 1, &[]).unwrap();
        // bos + 4 words + 124 + sep
        assert_eq!(asm.len(), 1 + 4 + 124 + 1);
        assert_eq!(asm.map.fcn_spans, vec![3..127]);
        assert!(asm.map.answer.is_empty());
        assert!(asm.targets.iter().all(Option::is_none));
    }

    #[test]
    fn two_placeholders_give_disjoint_spans() {
        let t = tok();
        let prompt = t.tokenize("is <fcn> same <fcn>");
        let asm = assemble(&t, &prompt, 124, 2, &t.tokenize("yes")).unwrap();
        let (a, b) = (&asm.map.fcn_spans[0], &asm.map.fcn_spans[1]);
        assert_eq!((a.len(), b.len()), (124, 124));
        assert!(a.end <= b.start);
        assert_eq!(asm.map.answer.len(), 1);
        let sep = asm.map.answer.start - 1;
        assert_eq!(asm.targets[sep], Some(t.id("yes")));
        assert_eq!(asm.targets[sep + 1], Some(t.eos()));
        assert_eq!(asm.targets.iter().flatten().count(), 2);
        assert_eq!(asm.map.prediction_positions(), sep..sep + 1);
    }

    #[test]
    fn placeholder_mismatch_is_an_error() {
        let t = tok();
        let prompt = t.tokenize("is <fcn> same <fcn>");
        assert!(assemble(&t, &prompt, 7, 1, &[]).is_err());
    }
}
