//! Beam search over the generator.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bank::{BankError, CandidateGenerator, GeneratedCandidate};
use crate::exprcore::MappedProblem;
use crate::model::{DecoderState, IncrementalDecoder, Model, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated ids after `[bos]`; ends with `[eos]` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// False when the length limit was reached before `[eos]`.
    pub finished: bool,
}

impl BeamHypothesis {
    /// Tokens without the closing `[eos]`.
    pub fn body(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Higher score first, then lexicographically smaller token sequence.
pub fn hypothesis_order(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a_tokens.cmp(b_tokens))
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    state: DecoderState,
}

/// Top-`k` sequences for `source`, best first.
///
/// `max_len` bounds the decoder sequence including `[bos]` and `[eos]`, so at
/// most `max_len - 1` tokens are generated. Each step extends every live prefix
/// by every expression token or `[eos]` and keeps the `k` best extensions;
/// those ending in `[eos]` are finished. At the last step the remaining
/// extensions are kept unfinished. Search stops once no live prefix can beat
/// the `k`-th finished hypothesis, because log-probabilities only decrease.
pub fn beam_search(model: &Model, source: &[usize], k: usize, max_len: usize) -> Result<Vec<BeamHypothesis>, ModelError> {
    if k == 0 || max_len < 2 {
        return Err(ModelError::DimensionMismatch(format!("beam size {k} / length limit {max_len}")));
    }
    let decoder = IncrementalDecoder::new(model, source)?;
    let eos = model.vocab.eos();
    let generable = model.vocab.generable();
    let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, state: decoder.initial_state() }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    let steps = max_len - 1;
    for step in 1..=steps {
        let feed: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(model.vocab.bos())).collect();
        let mut states: Vec<DecoderState> = live.iter().map(|h| h.state.clone()).collect();
        let log_probs = decoder.step(&mut states, &feed);

        let mut candidates: Vec<(usize, usize, f64, Vec<usize>)> = Vec::with_capacity(live.len() * generable.len());
        for (i, h) in live.iter().enumerate() {
            for &token in &generable {
                let mut tokens = h.tokens.clone();
                tokens.push(token);
                candidates.push((i, token, h.log_prob + log_probs[[i, token]], tokens));
            }
        }
        candidates.sort_by(|a, b| hypothesis_order(a.2, &a.3, b.2, &b.3));
        candidates.truncate(k);

        let mut next = Vec::new();
        for (parent, token, log_prob, tokens) in candidates {
            if token == eos {
                pool.push(BeamHypothesis { tokens, log_prob, finished: true });
            } else if step == steps {
                pool.push(BeamHypothesis { tokens, log_prob, finished: false });
            } else {
                next.push(Live { tokens, log_prob, state: states[parent].clone() });
            }
        }
        pool.sort_by(|a, b| hypothesis_order(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
        pool.truncate(k);
        live = next;
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (pool.len() == k && best_live < pool[k - 1].log_prob) {
            break;
        }
    }
    Ok(pool)
}

/// Candidate source backed by the model's beam search.
pub struct ModelGenerator<'m> {
    pub model: &'m Model,
    pub max_len: usize,
}

impl CandidateGenerator for ModelGenerator<'_> {
    fn generate(&self, problem: &MappedProblem, k: usize) -> Result<Vec<GeneratedCandidate>, BankError> {
        let source = self.model.vocab.encode(&problem.tokens).map_err(|e| BankError::Generator(e.to_string()))?;
        let beams = beam_search(self.model, &source, k, self.max_len).map_err(|e| BankError::Generator(e.to_string()))?;
        Ok(beams
            .into_iter()
            .map(|h| GeneratedCandidate { tokens: self.model.vocab.decode(h.body()), log_prob: h.log_prob })
            .collect())
    }
}
