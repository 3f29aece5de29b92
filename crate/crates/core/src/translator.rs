//! Translation as repeated next-word classification.
//!
//! The classifier input is the embedded source sentence (ending in its
//! end-of-sentence id, which doubles as the separator) followed by the
//! embedded target prefix, all in one recurrent stream. The distribution for
//! the first target word is read right after the source.

use std::cmp::Ordering;

use crate::corpus::{TokenId, TokenSequence};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::gru::{self, HiddenState, ModelParameters};
use crate::numerics::{argmax, softmax, Matrix, Real, Vector};

/// How the target prefix is formed when measuring next-word accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixMode {
    /// Ground-truth prefix.
    Correct,
    /// The model's own previous predictions.
    SelfFed,
}

/// How per-position hits are pooled into one accuracy figure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Hits over all positions of all pairs.
    #[default]
    Token,
    /// Mean of per-sentence accuracies.
    Sentence,
}

/// A trained model together with the frozen embedding tables it reads.
#[derive(Clone, Copy, Debug)]
pub struct Translator<'a, T> {
    params: &'a ModelParameters<T>,
    source: &'a EmbeddingTable,
    target: &'a EmbeddingTable,
}

/// Incremental decoding state: hidden activations after the source and the
/// emitted prefix, plus the distribution over the next word.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    pub source_ids: TokenSequence,
    pub emitted_ids: Vec<TokenId>,
    pub cumulative_log_prob: f64,
    pub hidden: HiddenState<T>,
    next: Vector<T>,
}

impl<T: Real> DecodeState<T> {
    /// Distribution over the next target id.
    pub fn distribution(&self) -> &[T] {
        &self.next
    }

    pub fn is_finished(&self, eos_id: TokenId) -> bool {
        self.emitted_ids.last() == Some(&eos_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub emitted_ids: Vec<TokenId>,
    pub cumulative_log_prob: f64,
    /// Ended with end-of-sentence or hit the length cap.
    pub finished: bool,
}

impl<'a, T: Real> Translator<'a, T> {
    pub fn new(
        params: &'a ModelParameters<T>,
        source: &'a EmbeddingTable,
        target: &'a EmbeddingTable,
    ) -> Result<Self> {
        params.validate()?;
        let shape = params.shape();
        for (name, table) in [("source", source), ("target", target)] {
            if table.dim() != shape.input_size {
                return Err(Error::EmbeddingDim {
                    expected: shape.input_size,
                    found: table.dim(),
                });
            }
            if table.rows() < 2 {
                return Err(Error::Vocabulary(format!("{name} table has no reserved ids")));
            }
        }
        if target.rows() != shape.vocab_size {
            return Err(Error::dim(
                "Translator (target ids vs output classes)",
                shape.vocab_size,
                target.rows(),
            ));
        }
        Ok(Translator {
            params,
            source,
            target,
        })
    }

    pub fn params(&self) -> &ModelParameters<T> {
        self.params
    }

    pub fn eos_id(&self) -> TokenId {
        (self.target.rows() - 1) as TokenId
    }

    pub fn nf_id(&self) -> TokenId {
        (self.target.rows() - 2) as TokenId
    }

    fn feed(&self, hidden: &mut HiddenState<T>, table: &EmbeddingTable, id: TokenId) -> Result<()> {
        let x = table.gather::<T>(&[id])?;
        gru::step(self.params, hidden, &x, None)
    }

    fn distribution(&self, hidden: &HiddenState<T>) -> Result<Vector<T>> {
        let logits = gru::output_logits(self.params, hidden.top())?;
        Ok(softmax(logits.row(0)))
    }

    /// Consumes the source sentence.
    pub fn start(&self, source: &TokenSequence) -> Result<DecodeState<T>> {
        if source.is_empty() {
            return Err(Error::EmptyInput("source sentence"));
        }
        let mut hidden = HiddenState::zeros(self.params.shape(), 1);
        for &id in &source.ids {
            self.feed(&mut hidden, self.source, id)?;
        }
        let next = self.distribution(&hidden)?;
        Ok(DecodeState {
            source_ids: source.clone(),
            emitted_ids: Vec::new(),
            cumulative_log_prob: 0.0,
            hidden,
            next,
        })
    }

    /// Emits `id`, adding its log-probability. Emitting end-of-sentence
    /// finishes the state; nothing may follow it.
    pub fn advance(&self, state: &mut DecodeState<T>, id: TokenId) -> Result<()> {
        let eos = self.eos_id();
        if state.is_finished(eos) {
            return Err(Error::Config("cannot extend past end-of-sentence".into()));
        }
        let p = *state.next.get(id as usize).ok_or(Error::InvalidId {
            id,
            len: self.target.rows(),
        })?;
        state.cumulative_log_prob += p.as_f64().ln();
        state.emitted_ids.push(id);
        if id != eos {
            self.feed(&mut state.hidden, self.target, id)?;
            state.next = self.distribution(&state.hidden)?;
        }
        Ok(())
    }

    /// `P(next = v | source, prefix)` for every target id `v`, computed from
    /// scratch over the concatenated stream.
    pub fn next_word_distribution(
        &self,
        source: &TokenSequence,
        partial_target: &TokenSequence,
    ) -> Result<Vector<T>> {
        if source.is_empty() {
            return Err(Error::EmptyInput("source sentence"));
        }
        let mut inputs: Vec<Matrix<T>> = Vec::with_capacity(source.len() + partial_target.len());
        for &id in &source.ids {
            inputs.push(self.source.gather(&[id])?);
        }
        for &id in &partial_target.ids {
            inputs.push(self.target.gather(&[id])?);
        }
        let (state, _) =
            gru::forward_batch(&inputs, self.params, &HiddenState::zeros(self.params.shape(), 1))?;
        self.distribution(&state)
    }

    /// `ln P(target | source)` as the sum of per-step conditional
    /// log-probabilities. `target` must end with end-of-sentence.
    pub fn sequence_log_probability(
        &self,
        source: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<f64> {
        if target.ids.last() != Some(&self.eos_id()) {
            return Err(Error::MissingEos);
        }
        let mut state = self.start(source)?;
        for &id in &target.ids {
            self.advance(&mut state, id)?;
        }
        Ok(state.cumulative_log_prob)
    }

    /// Emits the most probable word (lowest id on ties) until end-of-sentence
    /// or `max_len` words.
    pub fn greedy_decode(
        &self,
        source: &TokenSequence,
        max_len: usize,
    ) -> Result<(Vec<TokenId>, f64)> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let eos = self.eos_id();
        let mut state = self.start(source)?;
        while state.emitted_ids.len() < max_len {
            let id = argmax(state.distribution()) as TokenId;
            self.advance(&mut state, id)?;
            if id == eos {
                break;
            }
        }
        Ok((state.emitted_ids, state.cumulative_log_prob))
    }

    /// Beam search on cumulative log-probability, without length
    /// normalization. Hypotheses that emit end-of-sentence are set aside;
    /// at the end they are ranked together with the surviving (length-capped)
    /// hypotheses. Returns every retained hypothesis, best first.
    pub fn beam_decode(
        &self,
        source: &TokenSequence,
        beam_width: usize,
        max_len: usize,
    ) -> Result<Vec<Hypothesis>> {
        if beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let eos = self.eos_id();
        let mut live = vec![self.start(source)?];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for _ in 0..max_len {
            struct Candidate<T> {
                score: f64,
                p: T,
                parent: usize,
                id: TokenId,
            }
            let mut candidates: Vec<Candidate<T>> = Vec::new();
            for (parent, state) in live.iter().enumerate() {
                for (id, &p) in state.distribution().iter().enumerate() {
                    candidates.push(Candidate {
                        score: state.cumulative_log_prob + p.as_f64().ln(),
                        p,
                        parent,
                        id: id as TokenId,
                    });
                }
            }
            // Best first; equal scores fall back to the raw probability, then
            // to the better-ranked parent and the lower id.
            let order = |a: &Candidate<T>, b: &Candidate<T>| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| b.p.partial_cmp(&a.p).unwrap_or(Ordering::Equal))
                    .then_with(|| a.parent.cmp(&b.parent))
                    .then_with(|| a.id.cmp(&b.id))
            };
            if candidates.len() > beam_width {
                candidates.select_nth_unstable_by(beam_width - 1, order);
                candidates.truncate(beam_width);
            }
            candidates.sort_unstable_by(order);

            let mut next_live = Vec::with_capacity(candidates.len());
            for c in candidates {
                let mut state = live[c.parent].clone();
                self.advance(&mut state, c.id)?;
                if c.id == eos {
                    finished.push(Hypothesis {
                        emitted_ids: state.emitted_ids,
                        cumulative_log_prob: state.cumulative_log_prob,
                        finished: true,
                    });
                } else {
                    next_live.push(state);
                }
            }
            live = next_live;
            if live.is_empty() {
                break;
            }
        }

        finished.extend(live.into_iter().map(|s| Hypothesis {
            emitted_ids: s.emitted_ids,
            cumulative_log_prob: s.cumulative_log_prob,
            finished: true,
        }));
        finished.sort_by(|a, b| b.cumulative_log_prob.total_cmp(&a.cumulative_log_prob));
        Ok(finished)
    }

    /// Fraction of target positions where the argmax prediction equals the
    /// ground-truth next word, given the source and a prefix chosen by `mode`.
    pub fn next_word_accuracy(
        &self,
        dataset: &[(TokenSequence, TokenSequence)],
        mode: PrefixMode,
        averaging: Averaging,
    ) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyInput("accuracy dataset"));
        }
        let mut hits_total = 0usize;
        let mut positions_total = 0usize;
        let mut sentence_sum = 0.0;
        let mut sentences = 0usize;
        for (source, target) in dataset {
            let predictions = self.predict_positions(source, target, mode)?;
            let hits = predictions
                .iter()
                .zip(&target.ids)
                .filter(|(p, t)| p == t)
                .count();
            hits_total += hits;
            positions_total += target.len();
            if !target.is_empty() {
                sentence_sum += hits as f64 / target.len() as f64;
                sentences += 1;
            }
        }
        let acc = match averaging {
            Averaging::Token if positions_total > 0 => hits_total as f64 / positions_total as f64,
            Averaging::Sentence if sentences > 0 => sentence_sum / sentences as f64,
            _ => return Err(Error::EmptyInput("accuracy dataset has no target positions")),
        };
        Ok(acc)
    }

    /// Argmax prediction at every target position.
    pub fn predict_positions(
        &self,
        source: &TokenSequence,
        target: &TokenSequence,
        mode: PrefixMode,
    ) -> Result<Vec<TokenId>> {
        let mut state = self.start(source)?;
        let mut out = Vec::with_capacity(target.len());
        for (k, &truth) in target.ids.iter().enumerate() {
            let pred = argmax(state.distribution()) as TokenId;
            out.push(pred);
            if k + 1 < target.len() {
                let fed = match mode {
                    PrefixMode::Correct => truth,
                    PrefixMode::SelfFed => pred,
                };
                // Feed even an early end-of-sentence: the prefix keeps the
                // ground-truth length.
                self.feed(&mut state.hidden, self.target, fed)?;
                state.next = self.distribution(&state.hidden)?;
            }
        }
        Ok(out)
    }
}

/// Accuracy of a list of predictions against the truth, position by position.
pub fn position_accuracy(predictions: &[TokenId], truth: &[TokenId]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::dim("position_accuracy", truth.len(), predictions.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("no positions"));
    }
    let hits = predictions.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Side;
    use crate::gru::ModelShape;

    fn setup(vocab: usize, seed: u64) -> (ModelParameters<f64>, EmbeddingTable, EmbeddingTable) {
        let shape = ModelShape {
            layers: 2,
            hidden_size: 4,
            input_size: 3,
            vocab_size: vocab,
        };
        let mut p = ModelParameters::glorot(shape, seed);
        // spread the output distribution so it is far from uniform
        for x in p.output_weight.as_mut_slice() {
            *x *= 4.0;
        }
        let src = EmbeddingTable::random(6, 3, seed + 1);
        let tgt = EmbeddingTable::random(vocab, 3, seed + 2);
        (p, src, tgt)
    }

    fn src(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), Side::Source)
    }

    fn tgt(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), Side::Target)
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let shape = ModelShape {
            layers: 1,
            hidden_size: 3,
            input_size: 3,
            vocab_size: 4,
        };
        let p = ModelParameters::<f64>::zeros(shape);
        let (s, t) = (EmbeddingTable::random(5, 3, 0), EmbeddingTable::random(4, 3, 1));
        let tr = Translator::new(&p, &s, &t).unwrap();
        let d = tr.next_word_distribution(&src(&[0, 1, 4]), &tgt(&[2])).unwrap();
        assert!(d.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let lp = tr.sequence_log_probability(&src(&[0, 4]), &tgt(&[0, 1, 3])).unwrap();
        assert!((lp - 3.0 * 0.25f64.ln()).abs() < 1e-12);

        // uniform ties go to id 0, which is not end-of-sentence
        let (ids, _) = tr.greedy_decode(&src(&[0, 4]), 5).unwrap();
        assert_eq!(ids, vec![0; 5]);
    }

    #[test]
    fn incremental_matches_from_scratch() {
        let (p, s, t) = setup(5, 3);
        let tr = Translator::new(&p, &s, &t).unwrap();
        let source = src(&[1, 2, 5]);
        let mut state = tr.start(&source).unwrap();
        let mut prefix = Vec::new();
        for id in [3u32, 0, 2] {
            let direct = tr.next_word_distribution(&source, &tgt(&prefix)).unwrap();
            for (a, b) in direct.iter().zip(state.distribution()) {
                assert!((a - b).abs() < 1e-12);
            }
            tr.advance(&mut state, id).unwrap();
            prefix.push(id);
        }
        let sum: f64 = state.distribution().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_probability_is_product_of_conditionals() {
        let (p, s, t) = setup(5, 8);
        let tr = Translator::new(&p, &s, &t).unwrap();
        let source = src(&[0, 3, 5]);
        let target = [2u32, 2, 1, 4];
        let lp = tr.sequence_log_probability(&source, &tgt(&target)).unwrap();
        let mut product = 1.0;
        for k in 0..target.len() {
            let d = tr.next_word_distribution(&source, &tgt(&target[..k])).unwrap();
            product *= d[target[k] as usize];
        }
        assert!(lp <= 0.0);
        assert!((lp.exp() - product).abs() <= 1e-9 * product);

        assert!(matches!(
            tr.sequence_log_probability(&source, &tgt(&[1, 2])),
            Err(Error::MissingEos)
        ));
    }

    #[test]
    fn greedy_respects_caps_and_eos() {
        let (p, s, t) = setup(5, 1);
        let tr = Translator::new(&p, &s, &t).unwrap();
        let (ids, lp) = tr.greedy_decode(&src(&[0, 5]), 1).unwrap();
        assert_eq!(ids.len(), 1);
        assert!(lp <= 0.0);
        for seed in 0..20 {
            let (p, s, t) = setup(5, seed);
            let tr = Translator::new(&p, &s, &t).unwrap();
            let (ids, _) = tr.greedy_decode(&src(&[1, 2, 5]), 7).unwrap();
            assert!(ids.len() <= 7);
            if let Some(pos) = ids.iter().position(|&i| i == tr.eos_id()) {
                assert_eq!(pos, ids.len() - 1);
            }
        }
        assert!(tr.greedy_decode(&src(&[0]), 0).is_err());
        assert!(tr.start(&src(&[])).is_err());
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..10 {
            let (p, s, t) = setup(6, seed);
            let tr = Translator::new(&p, &s, &t).unwrap();
            let source = src(&[2, 0, 5]);
            let (ids, lp) = tr.greedy_decode(&source, 6).unwrap();
            let beam = tr.beam_decode(&source, 1, 6).unwrap();
            assert_eq!(beam[0].emitted_ids, ids);
            assert_eq!(beam[0].cumulative_log_prob.to_bits(), lp.to_bits());
            let wide = tr.beam_decode(&source, 4, 6).unwrap();
            assert!(wide[0].cumulative_log_prob >= beam[0].cumulative_log_prob);
        }
    }

    #[test]
    fn accuracy_counts_positions() {
        assert!((position_accuracy(&[1, 2, 3], &[1, 9, 3]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let (p, s, t) = setup(5, 2);
        let tr = Translator::new(&p, &s, &t).unwrap();
        assert!(tr
            .next_word_accuracy(&[], PrefixMode::Correct, Averaging::Token)
            .is_err());
        let data = vec![(src(&[0, 5]), tgt(&[1, 4])), (src(&[1, 5]), tgt(&[2, 0, 4]))];
        for mode in [PrefixMode::Correct, PrefixMode::SelfFed] {
            let a = tr.next_word_accuracy(&data, mode, Averaging::Token).unwrap();
            assert!((0.0..=1.0).contains(&a));
        }
    }
}
