//! Greedy, beam and ancestral decoding over any autoregressive model, plus
//! sampling-based minimum Bayes risk selection and n-best flattening.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::edit_distance;
use crate::vocab::{Alphabet, TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn new(ids: Vec<TokenId>, alphabet: Alphabet, log_prob: f64) -> Self {
        Hypothesis {
            tokens: TokenSequence::new(ids, alphabet),
            log_prob,
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.tokens.ids
    }
}

/// Descending score, then ascending tokens.
fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.ids.cmp(&b.tokens.ids))
}

/// Anything that yields next-token log-probabilities after a prefix.
/// Impossible tokens carry `-inf`.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> TokenId;
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

fn check_row(row: &[f64], expected: usize) -> Result<()> {
    if row.len() != expected {
        return Err(Error::Dimension(format!(
            "model returned {} scores for a vocabulary of {expected}",
            row.len()
        )));
    }
    if row.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("model returned NaN log-probabilities".into()));
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring token at each step, lowest id on ties. Stops at EOS
/// (not included in the tokens, included in the score) or after `max_len`
/// steps.
pub fn greedy_decode<M: NextTokenModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    max_len: usize,
    alphabet: Alphabet,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut prefix = context.to_vec();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let row = model.next_log_probs(&prefix)?;
        check_row(&row, model.vocab_size())?;
        let best = argmax(&row);
        if row[best] == f64::NEG_INFINITY {
            return Err(Error::Input("no token has positive probability".into()));
        }
        log_prob += row[best];
        if best as TokenId == model.eos() {
            break;
        }
        prefix.push(best as TokenId);
    }
    Ok(Hypothesis::new(prefix[context.len()..].to_vec(), alphabet, log_prob))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    /// Whether each entry reached EOS.
    pub finished: Vec<bool>,
    pub width: usize,
    /// Set when unfinished hypotheses fill up the list.
    pub padded: bool,
}

impl NBestList {
    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

/// Length-synchronous beam search without length normalization.
pub fn beam_decode<M: NextTokenModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    width: usize,
    n: usize,
    max_len: usize,
    alphabet: Alphabet,
) -> Result<NBestList> {
    if n == 0 || n > width {
        return Err(Error::Config(format!("need 1 <= n ({n}) <= width ({width})")));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let mut beams = vec![Hypothesis::new(vec![], alphabet, 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut expansions: Vec<(Hypothesis, bool)> = Vec::new();
        for beam in &beams {
            let mut prefix = context.to_vec();
            prefix.extend_from_slice(beam.ids());
            let row = model.next_log_probs(&prefix)?;
            check_row(&row, model.vocab_size())?;
            for (t, &lp) in row.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = beam.ids().to_vec();
                ids.push(t as TokenId);
                expansions.push((Hypothesis::new(ids, alphabet, beam.log_prob + lp), t as TokenId == eos));
            }
        }
        expansions.sort_by(|a, b| by_score(&a.0, &b.0));
        expansions.truncate(width);
        beams.clear();
        for (mut h, done) in expansions {
            if done {
                h.tokens.ids.pop();
                finished.push(h);
            } else {
                beams.push(h);
            }
        }
        if beams.is_empty() {
            break;
        }
        // scores only fall, so no live beam can overtake the n-th finished one
        if finished.len() >= n {
            finished.sort_by(by_score);
            if beams[0].log_prob < finished[n - 1].log_prob {
                break;
            }
        }
    }
    finished.sort_by(by_score);
    finished.truncate(n);
    let mut list: Vec<(Hypothesis, bool)> = finished.into_iter().map(|h| (h, true)).collect();
    let padded = list.len() < n && !beams.is_empty();
    beams.sort_by(by_score);
    let missing = n - list.len();
    list.extend(beams.into_iter().take(missing).map(|h| (h, false)));
    list.sort_by(|a, b| by_score(&a.0, &b.0));
    let (hypotheses, finished) = list.into_iter().unzip();
    Ok(NBestList {
        hypotheses,
        finished,
        width,
        padded,
    })
}

fn sample_index<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in row.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// `count` independent samples drawn token by token from the untempered
/// model distribution.
pub fn ancestral_sample<M: NextTokenModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[TokenId],
    count: usize,
    max_len: usize,
    alphabet: Alphabet,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut prefix = context.to_vec();
        let mut log_prob = 0.0;
        for _ in 0..max_len {
            let row = model.next_log_probs(&prefix)?;
            check_row(&row, model.vocab_size())?;
            let t = sample_index(&row, rng);
            log_prob += row[t];
            if t as TokenId == model.eos() {
                break;
            }
            prefix.push(t as TokenId);
        }
        out.push(Hypothesis::new(prefix[context.len()..].to_vec(), alphabet, log_prob));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Utility {
    NegWer,
}

impl Utility {
    /// `-edit_distance / max(|anchor|, 1)`; an empty anchor scores the
    /// candidate by its length.
    pub fn score(self, candidate: &[TokenId], anchor: &[TokenId]) -> f64 {
        match self {
            Utility::NegWer => -(edit_distance(candidate, anchor) as f64) / anchor.len().max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Samples,
    Provided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbrConfig {
    pub samples: usize,
    pub utility: Utility,
    pub candidate_source: CandidateSource,
}

impl Default for MbrConfig {
    fn default() -> Self {
        MbrConfig {
            samples: 10,
            utility: Utility::NegWer,
            candidate_source: CandidateSource::Samples,
        }
    }
}

impl MbrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("MBR sample count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Expected utility of every candidate against weighted anchors, best
/// first (ties: higher log-probability, then lexicographic tokens).
pub fn mbr_rank_weighted(
    candidates: &[Hypothesis],
    anchors: &[(&[TokenId], f64)],
    utility: Utility,
) -> Result<Vec<(usize, f64)>> {
    if candidates.is_empty() || anchors.is_empty() {
        return Err(Error::Input("MBR needs candidates and anchors".into()));
    }
    let total: f64 = anchors.iter().map(|a| a.1).sum();
    if !(total > 0.0) {
        return Err(Error::Input("anchor weights must have positive mass".into()));
    }
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let eu = anchors
                .iter()
                .map(|(a, w)| w * utility.score(c.ids(), a))
                .sum::<f64>()
                / total;
            (i, eu)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| by_score(&candidates[a.0], &candidates[b.0]))
    });
    Ok(ranked)
}

/// Groups identical anchors so each distinct string is scored once.
pub fn mbr_rank(candidates: &[Hypothesis], anchors: &[Hypothesis], utility: Utility) -> Result<Vec<(usize, f64)>> {
    let mut counts: BTreeMap<&[TokenId], f64> = BTreeMap::new();
    for a in anchors {
        *counts.entry(a.ids()).or_insert(0.0) += 1.0;
    }
    let grouped: Vec<(&[TokenId], f64)> = counts.into_iter().collect();
    mbr_rank_weighted(candidates, &grouped, utility)
}

pub fn mbr_select(candidates: &[Hypothesis], anchors: &[Hypothesis], utility: Utility) -> Result<Hypothesis> {
    let ranked = mbr_rank(candidates, anchors, utility)?;
    Ok(candidates[ranked[0].0].clone())
}

/// Distinct sampled strings, each keeping its best log-probability.
pub fn unique_hypotheses(samples: &[Hypothesis]) -> Vec<Hypothesis> {
    let mut best: BTreeMap<&[TokenId], &Hypothesis> = BTreeMap::new();
    for s in samples {
        best.entry(s.ids())
            .and_modify(|h| {
                if s.log_prob > h.log_prob {
                    *h = s;
                }
            })
            .or_insert(s);
    }
    let mut out: Vec<Hypothesis> = best.into_values().cloned().collect();
    out.sort_by(by_score);
    out
}

/// Sampling-based MBR: the unique samples are the candidates and all
/// samples are the anchors. Returns the selection and the ranked list.
pub fn mbr_from_samples(samples: &[Hypothesis], utility: Utility) -> Result<(Hypothesis, Vec<(Hypothesis, f64)>)> {
    let candidates = unique_hypotheses(samples);
    let ranked = mbr_rank(&candidates, samples, utility)?;
    let list: Vec<(Hypothesis, f64)> = ranked.iter().map(|&(i, eu)| (candidates[i].clone(), eu)).collect();
    Ok((list[0].0.clone(), list))
}

/// Candidates joined best-first with `sep` between them.
pub fn flatten_candidates(list: &[Hypothesis], sep: TokenId) -> Result<TokenSequence> {
    if list.is_empty() {
        return Err(Error::Input("cannot flatten an empty candidate list".into()));
    }
    let mut sorted: Vec<&Hypothesis> = list.iter().collect();
    sorted.sort_by(|a, b| by_score(a, b));
    let mut ids = Vec::new();
    for (i, h) in sorted.iter().enumerate() {
        if i > 0 {
            ids.push(sep);
        }
        ids.extend_from_slice(h.ids());
    }
    Ok(TokenSequence::new(ids, sorted[0].tokens.alphabet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;
    use proptest::prelude::*;

    /// Fixed table of next-token distributions keyed by prefix length and
    /// last token; EOS is the last id.
    struct TableModel {
        vocab: usize,
        rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
        fallback: Vec<f64>,
    }

    impl NextTokenModel for TableModel {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn eos(&self) -> TokenId {
            (self.vocab - 1) as TokenId
        }
        fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.rows.get(prefix).cloned().unwrap_or_else(|| self.fallback.clone()))
        }
    }

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn greedy_follows_local_choice() {
        // step 0 prefers token 0 (0.6) but the best full sequence starts with 1
        let mut rows = BTreeMap::new();
        rows.insert(vec![], ln(&[0.6, 0.4, 0.0]));
        rows.insert(vec![0], ln(&[0.5, 0.5, 0.0]));
        rows.insert(vec![1], ln(&[1.0, 0.0, 0.0]));
        let m = TableModel { vocab: 3, rows, fallback: ln(&[0.0, 0.0, 1.0]) };
        let g = greedy_decode(&m, &[], 5, Alphabet::Word).unwrap();
        assert_eq!(g.ids(), &[0, 0]);
        assert!((g.log_prob - (0.6f64 * 0.5).ln()).abs() < 1e-12);
        let beam = beam_decode(&m, &[], 4, 1, 5, Alphabet::Word).unwrap();
        assert_eq!(beam.hypotheses[0].ids(), &[1, 0]);
    }

    #[test]
    fn greedy_bounds_and_ties() {
        let m = TableModel { vocab: 3, rows: BTreeMap::new(), fallback: ln(&[0.5, 0.5, 0.0]) };
        let g = greedy_decode(&m, &[], 1, Alphabet::Word).unwrap();
        assert_eq!(g.ids(), &[0]);
        assert!(greedy_decode(&m, &[], 0, Alphabet::Word).is_err());
    }

    #[test]
    fn padding_contract() {
        // only four sequences ever finish: EOS allowed right after tokens 0..4
        let v = 12;
        let mut rows = BTreeMap::new();
        let mut root = vec![f64::NEG_INFINITY; v];
        for t in 0..10 {
            root[t] = (0.1f64).ln();
        }
        rows.insert(vec![], root);
        let mut eos_row = vec![f64::NEG_INFINITY; v];
        eos_row[v - 1] = 0.0;
        for t in 0..4 {
            rows.insert(vec![t], eos_row.clone());
        }
        let mut cont = vec![f64::NEG_INFINITY; v];
        cont[0] = 0.0;
        let m = TableModel { vocab: v, rows, fallback: cont };
        let list = beam_decode(&m, &[], 12, 10, 3, Alphabet::Word).unwrap();
        assert_eq!(list.len(), 10);
        assert!(list.padded);
        assert_eq!(list.finished.iter().filter(|f| !**f).count(), 6);
        assert!(list.hypotheses.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }

    #[test]
    fn deterministic_sampler_repeats() {
        let m = TableModel { vocab: 3, rows: BTreeMap::from([(vec![], ln(&[0.0, 1.0, 0.0]))]), fallback: ln(&[0.0, 0.0, 1.0]) };
        let s = ancestral_sample(&m, &[], 5, 4, Alphabet::Word, &mut substream(1, "s")).unwrap();
        assert!(s.iter().all(|h| h.ids() == [1] && h.log_prob == 0.0));
    }

    fn hyp(ids: &[TokenId], lp: f64) -> Hypothesis {
        Hypothesis::new(ids.to_vec(), Alphabet::Word, lp)
    }

    #[test]
    fn mbr_examples() {
        let only = hyp(&[1, 2], -0.3);
        let (sel, ranked) = (mbr_select(&[only.clone()], &[only.clone()], Utility::NegWer).unwrap(), mbr_rank(&[only.clone()], &[only.clone()], Utility::NegWer).unwrap());
        assert_eq!(sel, only);
        assert_eq!(ranked[0].1, 0.0);

        let ab = hyp(&[0, 1], -1.0);
        let ac = hyp(&[0, 2], -0.5);
        let anchors = [ab.clone(), ab.clone(), ac.clone()];
        let ranked = mbr_rank(&[ab.clone(), ac.clone()], &anchors, Utility::NegWer).unwrap();
        assert_eq!(ranked[0].0, 0);
        assert!((ranked[0].1 + 1.0 / 6.0).abs() < 1e-12);
        assert!((ranked[1].1 + 1.0 / 3.0).abs() < 1e-12);
        assert!(mbr_select(&[], &anchors, Utility::NegWer).is_err());
        assert!(mbr_select(&[ab.clone()], &[], Utility::NegWer).is_err());
    }

    #[test]
    fn mbr_ties_use_log_prob_then_tokens() {
        let a = hyp(&[1], -2.0);
        let b = hyp(&[2], -1.0);
        let anchors = [hyp(&[1], 0.0), hyp(&[2], 0.0)];
        assert_eq!(mbr_select(&[a.clone(), b.clone()], &anchors, Utility::NegWer).unwrap(), b);
        let c = hyp(&[2], -2.0);
        assert_eq!(mbr_select(&[c, a.clone()], &anchors, Utility::NegWer).unwrap(), a);
    }

    #[test]
    fn flatten_examples() {
        let a = hyp(&[0, 1], -0.1);
        let b = hyp(&[0, 2], -0.5);
        assert_eq!(flatten_candidates(&[a.clone()], 9).unwrap().ids, vec![0, 1]);
        let ab = flatten_candidates(&[a.clone(), b.clone()], 9).unwrap();
        assert_eq!(ab.ids, vec![0, 1, 9, 0, 2]);
        assert_eq!(flatten_candidates(&[b, a], 9).unwrap(), ab);
        assert!(flatten_candidates(&[], 9).is_err());
    }

    proptest! {
        #[test]
        fn mbr_picks_a_candidate_and_ignores_scale(
            cands in proptest::collection::vec(proptest::collection::vec(0u32..4, 0..5), 1..5),
            anchors in proptest::collection::vec(proptest::collection::vec(0u32..4, 0..5), 1..6),
            scale in 0.1f64..10.0,
        ) {
            let cands: Vec<Hypothesis> = cands.iter().enumerate().map(|(i, c)| hyp(c, -(i as f64))).collect();
            let anchors: Vec<Hypothesis> = anchors.iter().map(|a| hyp(a, 0.0)).collect();
            let sel = mbr_select(&cands, &anchors, Utility::NegWer).unwrap();
            prop_assert!(cands.contains(&sel));
            let weighted: Vec<(&[TokenId], f64)> = anchors.iter().map(|a| (a.ids(), scale)).collect();
            let ranked = mbr_rank_weighted(&cands, &weighted, Utility::NegWer).unwrap();
            // equal under scaling up to rounding, so exact ties may flip
            let eu_sel = ranked.iter().find(|(i, _)| cands[*i] == sel).unwrap().1;
            prop_assert!((ranked[0].1 - eu_sel).abs() < 1e-12);
        }
    }
}
