//! Simulated recognizer: an explicit, enumerable distribution over
//! hypothesis token sequences given a truth transcript.
//!
//! The channel walks `2n + 1` states for an `n`-token truth. Even states are
//! gaps (emit nothing, or insert one token); odd states are truth tokens
//! (emit per the confusion row, or delete). A truth token equal to its
//! predecessor may additionally be collapsed (dropped), which mimics
//! recognizers smoothing over repetitions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{Hypothesis, NextTokenModel};
use crate::error::{Error, Result};
use crate::vocab::{Alphabet, TokenId, TokenSequence};

const SUM_TOL: f64 = 1e-9;
pub const MAX_ENUM_TRUTH: usize = 4;
pub const MAX_ENUM_ALPHABET: usize = 5;

/// Emission distribution of one truth token; `emit` includes the token
/// itself (keep) and its substitutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionRow {
    pub emit: BTreeMap<TokenId, f64>,
    #[serde(default)]
    pub delete: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub alphabet: Alphabet,
    /// Rows for tokens with non-trivial behaviour.
    pub confusions: BTreeMap<TokenId, ConfusionRow>,
    /// Deletion probability for tokens without a row (kept otherwise).
    pub p_delete: f64,
    pub p_insert: f64,
    pub insertions: BTreeMap<TokenId, f64>,
    /// Chance of dropping a token that repeats the previous truth token.
    pub p_collapse: f64,
    pub seed: u64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec::noiseless(Alphabet::Word)
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl ChannelSpec {
    pub fn noiseless(alphabet: Alphabet) -> Self {
        ChannelSpec {
            alphabet,
            confusions: BTreeMap::new(),
            p_delete: 0.0,
            p_insert: 0.0,
            insertions: BTreeMap::new(),
            p_collapse: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob("p_delete", self.p_delete)?;
        check_prob("p_insert", self.p_insert)?;
        check_prob("p_collapse", self.p_collapse)?;
        for (tok, row) in &self.confusions {
            check_prob(&format!("delete[{tok}]"), row.delete)?;
            for (t, &p) in &row.emit {
                check_prob(&format!("confusion[{tok}][{t}]"), p)?;
            }
            let total: f64 = row.emit.values().sum::<f64>() + row.delete;
            if (total - 1.0).abs() > SUM_TOL {
                return Err(Error::Config(format!(
                    "confusion row for token {tok} sums to {total}"
                )));
            }
        }
        for (t, &p) in &self.insertions {
            check_prob(&format!("insertion[{t}]"), p)?;
        }
        let total: f64 = self.insertions.values().sum();
        if self.p_insert > 0.0 && (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Config(format!(
                "insertion distribution sums to {total}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ChannelSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("channel spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    fn row_for(&self, token: TokenId) -> (Vec<(TokenId, f64)>, f64) {
        match self.confusions.get(&token) {
            Some(row) => (
                row.emit
                    .iter()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(&t, &p)| (t, p))
                    .collect(),
                row.delete,
            ),
            None => {
                let keep = 1.0 - self.p_delete;
                let emit = if keep > 0.0 { vec![(token, keep)] } else { vec![] };
                (emit, self.p_delete)
            }
        }
    }

    /// Lay the channel out over the states of one truth transcript.
    pub fn compile(&self, truth: &[TokenId]) -> Result<CompiledChannel> {
        self.validate()?;
        let gap_emit: Vec<(TokenId, f64)> = if self.p_insert > 0.0 {
            self.insertions
                .iter()
                .filter(|(_, &p)| p > 0.0)
                .map(|(&t, &p)| (t, self.p_insert * p))
                .collect()
        } else {
            vec![]
        };
        let gap = State {
            silent: 1.0 - self.p_insert,
            emit: gap_emit,
        };
        let mut states = vec![gap.clone()];
        for (j, &t) in truth.iter().enumerate() {
            let (mut emit, mut delete) = self.row_for(t);
            if j > 0 && truth[j - 1] == t && self.p_collapse > 0.0 {
                let keep = 1.0 - self.p_collapse;
                delete = self.p_collapse + keep * delete;
                emit.iter_mut().for_each(|(_, p)| *p *= keep);
                emit.retain(|(_, p)| *p > 0.0);
            }
            states.push(State { silent: delete, emit });
            states.push(gap.clone());
        }
        Ok(CompiledChannel {
            states,
            alphabet: self.alphabet,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct State {
    silent: f64,
    emit: Vec<(TokenId, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledChannel {
    states: Vec<State>,
    alphabet: Alphabet,
}

impl CompiledChannel {
    /// Distinct tokens the channel can emit.
    pub fn output_alphabet(&self) -> BTreeSet<TokenId> {
        self.states
            .iter()
            .flat_map(|s| s.emit.iter().map(|&(t, _)| t))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Hypothesis {
        let mut ids = Vec::new();
        let mut log_prob = 0.0;
        for state in &self.states {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            for &(t, p) in &state.emit {
                acc += p;
                if u < acc {
                    chosen = Some((t, p));
                    break;
                }
            }
            match chosen {
                Some((t, p)) => {
                    ids.push(t);
                    log_prob += p.ln();
                }
                None if state.silent > 0.0 => log_prob += state.silent.ln(),
                None => {
                    // rounding left `u` above the cumulative mass
                    let &(t, p) = state.emit.last().expect("state has some outcome");
                    ids.push(t);
                    log_prob += p.ln();
                }
            }
        }
        Hypothesis {
            tokens: TokenSequence::new(ids, self.alphabet),
            log_prob,
        }
    }

    /// Every reachable string with its total probability, sorted by
    /// descending probability then by tokens.
    pub fn enumerate(&self) -> Vec<(TokenSequence, f64)> {
        let mut current: HashMap<Vec<TokenId>, f64> = HashMap::from([(Vec::new(), 1.0)]);
        for state in &self.states {
            let mut next: HashMap<Vec<TokenId>, f64> = HashMap::with_capacity(current.len());
            for (s, p) in current {
                if state.silent > 0.0 {
                    *next.entry(s.clone()).or_insert(0.0) += p * state.silent;
                }
                for &(t, q) in &state.emit {
                    let mut s2 = s.clone();
                    s2.push(t);
                    *next.entry(s2).or_insert(0.0) += p * q;
                }
            }
            current = next;
        }
        let mut out: Vec<(Vec<TokenId>, f64)> = current.into_iter().filter(|(_, p)| *p > 0.0).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.into_iter()
            .map(|(ids, p)| (TokenSequence::new(ids, self.alphabet), p))
            .collect()
    }

    /// Exact next-token log-probabilities after `prefix`, followed by the
    /// end-of-sequence log-probability.
    pub fn next_distribution(&self, prefix: &[TokenId]) -> (BTreeMap<TokenId, f64>, f64) {
        let k = self.states.len();
        // alpha[i]: prefix emitted with its last token produced before state i
        let mut alpha = vec![0.0; k + 1];
        alpha[0] = 1.0;
        let beta_of = |alpha: &[f64]| {
            let mut beta = vec![0.0; k + 1];
            for i in 0..=k {
                beta[i] = alpha[i] + if i > 0 { beta[i - 1] * self.states[i - 1].silent } else { 0.0 };
            }
            beta
        };
        for &x in prefix {
            let beta = beta_of(&alpha);
            let mut next = vec![0.0; k + 1];
            for i in 0..k {
                if let Some(&(_, p)) = self.states[i].emit.iter().find(|(t, _)| *t == x) {
                    next[i + 1] = beta[i] * p;
                }
            }
            let z: f64 = next.iter().sum();
            if z > 0.0 {
                next.iter_mut().for_each(|v| *v /= z);
            }
            alpha = next;
        }
        let beta = beta_of(&alpha);
        let mut mass: BTreeMap<TokenId, f64> = BTreeMap::new();
        for i in 0..k {
            for &(t, p) in &self.states[i].emit {
                *mass.entry(t).or_insert(0.0) += beta[i] * p;
            }
        }
        let end = beta[k];
        let total: f64 = mass.values().sum::<f64>() + end;
        if total <= 0.0 {
            return (BTreeMap::new(), 0.0);
        }
        mass.values_mut().for_each(|v| *v /= total);
        (mass, end / total)
    }
}

pub fn sample_hypothesis<R: Rng + ?Sized>(
    spec: &ChannelSpec,
    truth: &TokenSequence,
    rng: &mut R,
) -> Result<Hypothesis> {
    if truth.is_empty() {
        return Err(Error::Input("truth transcript is empty".into()));
    }
    Ok(spec.compile(&truth.ids)?.sample(rng))
}

pub fn exact_distribution(spec: &ChannelSpec, truth: &TokenSequence) -> Result<Vec<(TokenSequence, f64)>> {
    let channel = spec.compile(&truth.ids)?;
    let alphabet = channel.output_alphabet().len();
    if truth.len() > MAX_ENUM_TRUTH || alphabet > MAX_ENUM_ALPHABET {
        let estimate = ((alphabet + 1) as f64).powi(2 * truth.len() as i32 + 1);
        return Err(Error::EnumerationRefused {
            estimate,
            reason: format!(
                "truth length {} (max {MAX_ENUM_TRUTH}), output alphabet {alphabet} (max {MAX_ENUM_ALPHABET})",
                truth.len()
            ),
        });
    }
    Ok(channel.enumerate())
}

/// Autoregressive view of a compiled channel, so the generic decoders can
/// search and sample it.
#[derive(Debug, Clone)]
pub struct ChannelLm {
    channel: CompiledChannel,
    eos: TokenId,
}

impl ChannelLm {
    /// `eos` must exceed every token the channel can emit.
    pub fn new(channel: CompiledChannel, eos: TokenId) -> Result<Self> {
        if let Some(&max) = channel.output_alphabet().iter().next_back() {
            if max >= eos {
                return Err(Error::Config(format!(
                    "channel emits token {max}, end marker {eos} must be larger"
                )));
            }
        }
        Ok(ChannelLm { channel, eos })
    }

    pub fn channel(&self) -> &CompiledChannel {
        &self.channel
    }
}

impl NextTokenModel for ChannelLm {
    fn vocab_size(&self) -> usize {
        self.eos as usize + 1
    }

    fn eos(&self) -> TokenId {
        self.eos
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let (mass, end) = self.channel.next_distribution(prefix);
        let mut out = vec![f64::NEG_INFINITY; self.vocab_size()];
        for (t, p) in mass {
            if p > 0.0 {
                out[t as usize] = p.ln();
            }
        }
        out[self.eos as usize] = if end > 0.0 { end.ln() } else { f64::NEG_INFINITY };
        if out.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(Error::Input("prefix has zero probability under the channel".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;
    use proptest::prelude::*;

    fn seq(ids: &[TokenId]) -> TokenSequence {
        TokenSequence::new(ids.to_vec(), Alphabet::Word)
    }

    fn binary(keep: f64) -> ChannelSpec {
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.confusions.insert(0, ConfusionRow { emit: BTreeMap::from([(0, keep), (1, 1.0 - keep)]), delete: 0.0 });
        spec.confusions.insert(1, ConfusionRow { emit: BTreeMap::from([(1, keep), (0, 1.0 - keep)]), delete: 0.0 });
        spec
    }

    #[test]
    fn noiseless_channel_copies_truth() {
        let spec = ChannelSpec::noiseless(Alphabet::Word);
        let h = sample_hypothesis(&spec, &seq(&[3, 1, 2]), &mut substream(0, "t")).unwrap();
        assert_eq!(h.tokens.ids, vec![3, 1, 2]);
        assert_eq!(h.log_prob, 0.0);
        assert_eq!(exact_distribution(&spec, &seq(&[3, 1])).unwrap(), vec![(seq(&[3, 1]), 1.0)]);
    }

    #[test]
    fn certain_deletion_yields_empty() {
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.p_delete = 1.0;
        let h = sample_hypothesis(&spec, &seq(&[1, 2, 3]), &mut substream(0, "t")).unwrap();
        assert!(h.tokens.is_empty());
    }

    #[test]
    fn substitution_read_directly() {
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.confusions.insert(0, ConfusionRow { emit: BTreeMap::from([(0, 0.7), (1, 0.3)]), delete: 0.0 });
        let d = exact_distribution(&spec, &seq(&[0])).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].0.ids, vec![0]);
        assert!((d[0].1 - 0.7).abs() < 1e-12);
        assert!((d[1].1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn deletion_lattice_sums_to_one() {
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.p_delete = 0.1;
        let d = exact_distribution(&spec, &seq(&[0, 1])).unwrap();
        // keep/keep, keep/del, del/keep, del/del
        let expect = [(vec![0, 1], 0.81), (vec![0], 0.09), (vec![1], 0.09), (vec![], 0.01)];
        assert_eq!(d.len(), 4);
        for (ids, p) in expect {
            let got = d.iter().find(|(s, _)| s.ids == ids).unwrap().1;
            assert!((got - p).abs() < 1e-12);
        }
        assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_strings_are_merged() {
        // deleting either copy of a repeated token yields the same string
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.p_delete = 0.5;
        let d = exact_distribution(&spec, &seq(&[2, 2])).unwrap();
        let single = d.iter().find(|(s, _)| s.ids == vec![2]).unwrap().1;
        assert!((single - 0.5).abs() < 1e-12);
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn monte_carlo_matches_product() {
        let spec = binary(0.9);
        let truth = seq(&[0, 1]);
        let mut rng = substream(5, "mc");
        let hits = (0..10_000)
            .filter(|_| sample_hypothesis(&spec, &truth, &mut rng).unwrap().tokens == truth)
            .count();
        assert!((hits as f64 / 10_000.0 - 0.81).abs() < 0.02);
    }

    #[test]
    fn refuses_large_spaces() {
        let spec = ChannelSpec::noiseless(Alphabet::Word);
        match exact_distribution(&spec, &seq(&[0, 1, 2, 3, 4])) {
            Err(Error::EnumerationRefused { estimate, .. }) => assert!(estimate > 1000.0),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = binary(0.9);
        spec.confusions.get_mut(&0).unwrap().delete = 0.2;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.p_insert = 0.2;
        spec.insertions.insert(1, 0.5);
        assert!(spec.validate().is_err());
        assert!(ChannelSpec::from_json(r#"{"p_delete": 1.5}"#).is_err());
        let ok = ChannelSpec::from_json(r#"{"alphabet":"phone","p_delete":0.1}"#).unwrap();
        assert_eq!(ok.alphabet, Alphabet::Phone);
    }

    #[test]
    fn collapse_drops_repeats() {
        let mut spec = ChannelSpec::noiseless(Alphabet::Word);
        spec.p_collapse = 1.0;
        let d = exact_distribution(&spec, &seq(&[2, 2, 1])).unwrap();
        assert_eq!(d, vec![(seq(&[2, 1]), 1.0)]);
    }

    fn noisy_spec() -> ChannelSpec {
        let mut spec = binary(0.8);
        spec.confusions.get_mut(&0).unwrap().emit.insert(0, 0.7);
        spec.confusions.get_mut(&0).unwrap().delete = 0.1;
        spec.p_insert = 0.2;
        spec.insertions = BTreeMap::from([(0, 0.5), (2, 0.5)]);
        spec.p_collapse = 0.3;
        spec
    }

    #[test]
    fn autoregressive_view_reproduces_string_probabilities() {
        let spec = noisy_spec();
        let truth = seq(&[0, 0, 1]);
        let lm = ChannelLm::new(spec.compile(&truth.ids).unwrap(), 3).unwrap();
        for (s, p) in exact_distribution(&spec, &truth).unwrap() {
            let mut lp = 0.0;
            for i in 0..s.len() {
                lp += lm.next_log_probs(&s.ids[..i]).unwrap()[s.ids[i] as usize];
            }
            lp += lm.next_log_probs(&s.ids).unwrap()[3];
            assert!((lp.exp() - p).abs() < 1e-12, "{:?}: {} vs {p}", s.ids, lp.exp());
        }
    }

    proptest! {
        #[test]
        fn distributions_normalize(
            keep in 0.05f64..1.0,
            p_del in 0.0f64..0.5,
            p_ins in 0.0f64..0.5,
            truth in proptest::collection::vec(0u32..3, 1..4),
        ) {
            let mut spec = ChannelSpec::noiseless(Alphabet::Word);
            spec.confusions.insert(0, ConfusionRow {
                emit: BTreeMap::from([(0, keep * (1.0 - p_del)), (1, (1.0 - keep) * (1.0 - p_del))]),
                delete: p_del,
            });
            spec.p_delete = p_del;
            spec.p_insert = p_ins;
            spec.insertions = BTreeMap::from([(2, 1.0)]);
            let d = exact_distribution(&spec, &seq(&truth)).unwrap();
            let total: f64 = d.iter().map(|x| x.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|x| x.1 > 0.0));
        }
    }
}
