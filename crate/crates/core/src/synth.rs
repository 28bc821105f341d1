//! Synthetic stuttered-speech corpus.
//!
//! Lexical cues live only in the transcript (fillers, repeated words,
//! fragments before a matching word); acoustic cues live only in the
//! feature channels (channel 0 for prolongations, 1 for blocks, 2 for
//! modified speech). Gold labels are computed from the stored data by
//! fixed rules, then a simulated recognizer produces the hypotheses.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::asr::{ChannelLm, ChannelSpec, ConfusionRow};
use crate::decoding::{ancestral_sample, beam_decode, greedy_decode, mbr_from_samples, MbrConfig};
use crate::error::{Error, Result};
use crate::fusion::{AcousticFeatures, Candidate, ClipExample, DecoderMode, Split};
use crate::labels::{DysfluencyClass, LabelSet, Schema};
use crate::seed::{derive_seed, indexed_substream, StreamRng};
use crate::vocab::{Alphabet, TokenId, Vocab};

pub const CONTENT_WORDS: [&str; 16] = [
    "cat", "cup", "dog", "door", "sun", "sand", "moon", "milk", "tree", "tent", "fish", "fire", "boat", "bell", "rock", "rope",
];
/// Short words that stutter-like repetitions attach to.
pub const FUNCTION_WORDS: [&str; 4] = ["i", "and", "so", "the"];
pub const FILLERS: [&str; 3] = ["uh", "um", "er"];

pub fn fragment_of(word: &str) -> String {
    format!("{}-", &word[..1])
}

pub fn fragments() -> Vec<String> {
    let set: BTreeSet<String> = CONTENT_WORDS.iter().map(|w| fragment_of(w)).collect();
    set.into_iter().collect()
}

/// Letter-level phone symbols, written `/x/`.
pub fn phones_of(token: &str) -> Vec<String> {
    token
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| format!("/{c}/"))
        .collect()
}

/// Every token the generator can write, in a fixed order.
pub fn lexicon() -> Vec<String> {
    let mut out: Vec<String> = CONTENT_WORDS.iter().map(|s| s.to_string()).collect();
    out.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    out.extend(FILLERS.iter().map(|s| s.to_string()));
    out.extend(fragments());
    let phones: BTreeSet<String> = out.iter().flat_map(|t| phones_of(t)).collect();
    out.extend(phones);
    out
}

pub fn synthetic_vocab() -> Vocab {
    Vocab::new(lexicon()).expect("lexicon is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassPriors {
    pub blk: f64,
    pub int: f64,
    pub pro: f64,
    pub snd: f64,
    pub wrd: f64,
    #[serde(rename = "mod")]
    pub modified: f64,
}

impl Default for ClassPriors {
    fn default() -> Self {
        ClassPriors {
            blk: 0.15,
            int: 0.15,
            pro: 0.15,
            snd: 0.15,
            wrd: 0.15,
            modified: 0.15,
        }
    }
}

impl ClassPriors {
    pub fn get(&self, c: DysfluencyClass) -> f64 {
        match c {
            DysfluencyClass::Blk => self.blk,
            DysfluencyClass::Int => self.int,
            DysfluencyClass::Pro => self.pro,
            DysfluencyClass::Snd => self.snd,
            DysfluencyClass::Wrd => self.wrd,
            DysfluencyClass::Mod => self.modified,
        }
    }
}

/// Recognizer noise for one alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub substitute: f64,
    pub delete: f64,
    pub insert: f64,
    /// Deletion probability of fillers and fragments.
    pub drop_disfluent: f64,
    pub collapse: f64,
    /// Per-token chance of a confusion the recognizer gets wrong more often
    /// than right.
    pub hard_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            substitute: 0.05,
            delete: 0.03,
            insert: 0.02,
            drop_disfluent: 0.15,
            collapse: 0.10,
            hard_rate: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub clips: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub schema: Schema,
    pub priors: ClassPriors,
    /// Chance of one fluent function word in a sentence.
    pub function_word_rate: f64,
    /// Thresholds on the channel means for Pro, Blk and Mod.
    pub thresholds: [f64; 3],
    /// Range of the clip-mean distance from a threshold.
    pub margin: [f64; 2],
    pub frame_noise: f64,
    /// Encoder layer tag; layer 24 with finetuning gives the cleanest cues.
    pub layer: u32,
    pub finetuned: bool,
    pub word_noise: NoiseSpec,
    pub phone_noise: NoiseSpec,
    pub beam_width: usize,
    pub nbest: usize,
    pub mbr: MbrConfig,
    pub modes: Vec<DecoderMode>,
    pub split_fractions: [f64; 2],
    /// Exact train/dev/test counts; overrides `clips` and the fractions.
    pub split_counts: Option<[usize; 3]>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clips: 500,
            frames: 150,
            feature_dim: 16,
            schema: Schema::Sep28k,
            priors: ClassPriors::default(),
            function_word_rate: 0.5,
            thresholds: [0.0; 3],
            margin: [0.5, 1.5],
            frame_noise: 0.3,
            layer: 24,
            finetuned: true,
            word_noise: NoiseSpec::default(),
            phone_noise: NoiseSpec {
                collapse: 0.0,
                ..NoiseSpec::default()
            },
            beam_width: 12,
            nbest: 10,
            mbr: MbrConfig::default(),
            modes: DecoderMode::ALL.to_vec(),
            split_fractions: [0.7, 0.1],
            split_counts: None,
            seed: 0,
        }
    }
}

fn check_rate(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_clips() == 0 {
            return Err(Error::Config("corpus needs at least one clip".into()));
        }
        if self.frames == 0 || self.feature_dim < 3 {
            return Err(Error::Config("features need at least one frame and three channels".into()));
        }
        if !self.thresholds.iter().all(|t| t.is_finite()) {
            return Err(Error::Config("thresholds must be finite".into()));
        }
        if !(self.margin[0] >= 0.0 && self.margin[1] >= self.margin[0] && self.margin[1].is_finite()) {
            return Err(Error::Config(format!("margin {:?} is not an interval", self.margin)));
        }
        if !(self.frame_noise >= 0.0 && self.frame_noise.is_finite()) {
            return Err(Error::Config("frame_noise must be non-negative".into()));
        }
        for c in DysfluencyClass::ALL {
            check_rate(&format!("prior {}", c.tag()), self.priors.get(c))?;
        }
        check_rate("function_word_rate", self.function_word_rate)?;
        for (name, n) in [("word_noise", &self.word_noise), ("phone_noise", &self.phone_noise)] {
            for (field, p) in [
                ("substitute", n.substitute),
                ("delete", n.delete),
                ("insert", n.insert),
                ("drop_disfluent", n.drop_disfluent),
                ("collapse", n.collapse),
                ("hard_rate", n.hard_rate),
            ] {
                check_rate(&format!("{name}.{field}"), p)?;
            }
            if n.substitute + n.delete > 1.0 {
                return Err(Error::Config(format!("{name}: substitute + delete exceeds 1")));
            }
        }
        if self.nbest == 0 || self.nbest > self.beam_width {
            return Err(Error::Config(format!("need 1 <= nbest ({}) <= beam_width ({})", self.nbest, self.beam_width)));
        }
        self.mbr.validate()?;
        let [a, b] = self.split_fractions;
        if !(a >= 0.0 && b >= 0.0 && a + b <= 1.0) {
            return Err(Error::Config(format!("split fractions {a}, {b} are invalid")));
        }
        Ok(())
    }

    pub fn total_clips(&self) -> usize {
        match self.split_counts {
            Some(c) => c.iter().sum(),
            None => self.clips,
        }
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n = self.total_clips();
        let (tr, dv) = match self.split_counts {
            Some([tr, dv, _]) => (tr, dv),
            None => {
                let tr = (self.split_fractions[0] * n as f64).round() as usize;
                let dv = (self.split_fractions[1] * n as f64).round() as usize;
                (tr.min(n), dv.min(n - tr.min(n)))
            }
        };
        if index < tr {
            Split::Train
        } else if index < tr + dv {
            Split::Dev
        } else {
            Split::Test
        }
    }

    /// Signal-to-noise factor of the acoustic cues for the encoder tag.
    pub fn acoustic_scale(&self) -> f64 {
        match (self.finetuned, self.layer >= 24) {
            (true, true) => 1.0,
            (true, false) => 0.6,
            (false, true) => 0.4,
            (false, false) => 0.25,
        }
    }

    /// Classes that can never be produced under this spec.
    pub fn unreachable_classes(&self) -> Vec<DysfluencyClass> {
        self.schema
            .classes()
            .into_iter()
            .filter(|&c| self.priors.get(c) == 0.0)
            .collect()
    }
}

fn is_word(t: &str) -> bool {
    CONTENT_WORDS.contains(&t) || FUNCTION_WORDS.contains(&t)
}

/// Gold lexical classes of a transcript.
pub fn lexical_labels(tokens: &[&str]) -> LabelSet {
    let mut out = LabelSet::empty();
    if tokens.iter().any(|t| FILLERS.contains(t)) {
        out.insert(DysfluencyClass::Int);
    }
    for w in tokens.windows(2) {
        if w[0] == w[1] && is_word(w[0]) {
            out.insert(DysfluencyClass::Wrd);
        }
        if let Some(stem) = w[0].strip_suffix('-') {
            if !stem.is_empty() && CONTENT_WORDS.contains(&w[1]) && w[1].starts_with(stem) {
                out.insert(DysfluencyClass::Snd);
            }
        }
    }
    out
}

/// Gold acoustic classes from channel means of the stored features.
pub fn acoustic_labels(features: &AcousticFeatures, thresholds: [f64; 3], schema: Schema) -> Result<LabelSet> {
    let mean = features.pooled()?;
    let mut out = LabelSet::empty();
    if mean[0] > thresholds[0] {
        out.insert(DysfluencyClass::Pro);
    }
    if mean[1] > thresholds[1] {
        out.insert(DysfluencyClass::Blk);
    }
    if schema.contains(DysfluencyClass::Mod) && mean[2] > thresholds[2] {
        out.insert(DysfluencyClass::Mod);
    }
    Ok(out)
}

pub fn gold_labels(transcript: &str, features: &AcousticFeatures, thresholds: [f64; 3], schema: Schema) -> Result<LabelSet> {
    let tokens: Vec<&str> = transcript.split_whitespace().collect();
    let lexical = lexical_labels(&tokens);
    let acoustic = acoustic_labels(features, thresholds, schema)?;
    Ok(LabelSet::from_bits(lexical.bits() | acoustic.bits()))
}

fn sample_transcript(spec: &SynthSpec, rng: &mut StreamRng) -> Vec<String> {
    let n = rng.gen_range(4..=7);
    let mut toks: Vec<String> = CONTENT_WORDS.choose_multiple(rng, n).map(|s| s.to_string()).collect();
    if rng.gen_bool(spec.function_word_rate) {
        let i = rng.gen_range(0..=toks.len());
        toks.insert(i, FUNCTION_WORDS.choose(rng).expect("non-empty").to_string());
    }
    let wants = |c: DysfluencyClass, rng: &mut StreamRng| rng.gen_bool(spec.priors.get(c));
    let (wrd, snd, int) = (
        wants(DysfluencyClass::Wrd, rng),
        wants(DysfluencyClass::Snd, rng),
        wants(DysfluencyClass::Int, rng),
    );
    if wrd {
        let i = rng.gen_range(0..=toks.len());
        let w = FUNCTION_WORDS.choose(rng).expect("non-empty").to_string();
        for _ in 0..rng.gen_range(2..=3) {
            toks.insert(i, w.clone());
        }
    }
    if snd {
        let idx: Vec<usize> = (0..toks.len())
            .filter(|&i| CONTENT_WORDS.contains(&toks[i].as_str()))
            .collect();
        let i = *idx.choose(rng).expect("sentences hold content words");
        let frag = fragment_of(&toks[i]);
        toks.insert(i, frag);
    }
    if int {
        for _ in 0..rng.gen_range(1..=2) {
            let i = rng.gen_range(0..=toks.len());
            toks.insert(i, FILLERS.choose(rng).expect("non-empty").to_string());
        }
    }
    toks
}

fn sample_features(spec: &SynthSpec, rng: &mut StreamRng) -> AcousticFeatures {
    let scale = spec.acoustic_scale();
    let classes = [DysfluencyClass::Pro, DysfluencyClass::Blk, DysfluencyClass::Mod];
    let mut means = vec![0.0; spec.feature_dim];
    for (ch, c) in classes.iter().enumerate() {
        let on = spec.schema.contains(*c) && rng.gen_bool(spec.priors.get(*c));
        let offset = rng.gen_range(spec.margin[0]..=spec.margin[1]) * scale;
        means[ch] = spec.thresholds[ch] + if on { offset } else { -offset };
    }
    for m in means.iter_mut().skip(3) {
        *m = rng.gen_range(-1.0..1.0);
    }
    let noise = Normal::new(0.0, spec.frame_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let frames = Array2::from_shape_fn((spec.frames, spec.feature_dim), |(_, j)| {
        let n = if spec.frame_noise > 0.0 { noise.sample(rng) } else { 0.0 };
        (means[j] + n) as f32
    });
    AcousticFeatures {
        frames,
        layer: spec.layer,
        finetuned: spec.finetuned,
    }
}

/// The other content word sharing an initial, the usual confusion.
fn partner(word: &str) -> Option<&'static str> {
    CONTENT_WORDS
        .iter()
        .copied()
        .find(|w| *w != word && w.as_bytes()[0] == word.as_bytes()[0])
}

fn word_channel(truth: &[String], noise: &NoiseSpec, vocab: &Vocab, rng: &mut StreamRng, seed: u64) -> ChannelSpec {
    let mut spec = ChannelSpec::noiseless(Alphabet::Word);
    spec.seed = seed;
    spec.p_delete = noise.delete;
    spec.p_insert = noise.insert;
    let n = CONTENT_WORDS.len() as f64;
    spec.insertions = CONTENT_WORDS.iter().map(|w| (vocab.id_or_unk(w), 1.0 / n)).collect();
    spec.p_collapse = noise.collapse;
    if rng.gen_bool(noise.hard_rate) {
        spec.p_collapse = spec.p_collapse.max(0.7);
    }
    for t in truth {
        let id = vocab.id_or_unk(t);
        let hard = rng.gen_bool(noise.hard_rate);
        let row = if FILLERS.contains(&t.as_str()) || t.ends_with('-') {
            let drop = if hard { 0.65 } else { noise.drop_disfluent };
            ConfusionRow {
                emit: BTreeMap::from([(id, 1.0 - drop)]),
                delete: drop,
            }
        } else if let Some(p) = partner(t) {
            let (sub, del) = if hard { (0.6, 0.1) } else { (noise.substitute, noise.delete) };
            ConfusionRow {
                emit: BTreeMap::from([(id, 1.0 - sub - del), (vocab.id_or_unk(p), sub)]),
                delete: del,
            }
        } else {
            continue;
        };
        // a token keeps its harder row if it occurs twice
        if hard || !spec.confusions.contains_key(&id) {
            spec.confusions.insert(id, row);
        }
    }
    spec
}

fn phone_channel(truth: &[String], noise: &NoiseSpec, vocab: &Vocab, rng: &mut StreamRng, seed: u64) -> ChannelSpec {
    let mut spec = ChannelSpec::noiseless(Alphabet::Phone);
    spec.seed = seed;
    spec.p_delete = noise.delete;
    spec.p_collapse = noise.collapse;
    let inventory: Vec<TokenId> = {
        let set: BTreeSet<TokenId> = lexicon().iter().filter(|t| t.starts_with('/')).map(|t| vocab.id_or_unk(t)).collect();
        set.into_iter().collect()
    };
    if noise.insert > 0.0 {
        spec.p_insert = noise.insert;
        let n = inventory.len() as f64;
        spec.insertions = inventory.iter().map(|&p| (p, 1.0 / n)).collect();
    }
    for t in truth {
        let id = vocab.id_or_unk(t);
        if spec.confusions.contains_key(&id) {
            continue;
        }
        let hard = rng.gen_bool(noise.hard_rate);
        let (sub, del) = if hard { (0.6, 0.1) } else { (noise.substitute, noise.delete) };
        let other = **inventory.iter().filter(|&&p| p != id).collect::<Vec<_>>().choose(rng).expect("inventory");
        spec.confusions.insert(
            id,
            ConfusionRow {
                emit: BTreeMap::from([(id, 1.0 - sub - del), (other, sub)]),
                delete: del,
            },
        );
    }
    spec
}

/// Recognizer outputs for one clip under every requested mode.
pub fn recognize(
    spec: &SynthSpec,
    transcript: &[String],
    vocab: &Vocab,
    clip_seed: u64,
) -> Result<BTreeMap<DecoderMode, Vec<Candidate>>> {
    let mut rng = indexed_substream(clip_seed, "channel", &[]);
    let words = word_channel(transcript, &spec.word_noise, vocab, &mut rng, clip_seed);
    let ids: Vec<TokenId> = transcript.iter().map(|t| vocab.id_or_unk(t)).collect();
    let eos = vocab.eos();
    let word_lm = ChannelLm::new(words.compile(&ids)?, eos)?;
    let max_len = 2 * ids.len() + 2;
    let text = |h: &[TokenId]| vocab.decode(h);
    let mut out = BTreeMap::new();
    for &mode in &spec.modes {
        let cands = match mode {
            DecoderMode::OneBest => {
                let h = greedy_decode(&word_lm, &[], max_len, Alphabet::Word)?;
                vec![Candidate { text: text(h.ids()), score: 0.0 }]
            }
            DecoderMode::NBest => beam_decode(&word_lm, &[], spec.beam_width, spec.nbest, max_len, Alphabet::Word)?
                .hypotheses
                .iter()
                .map(|h| Candidate { text: text(h.ids()), score: h.log_prob })
                .collect(),
            DecoderMode::Mbr => {
                let mut srng = indexed_substream(clip_seed, "sampling", &[]);
                let samples = ancestral_sample(&word_lm, &[], spec.mbr.samples, max_len, Alphabet::Word, &mut srng)?;
                let (_, ranked) = mbr_from_samples(&samples, spec.mbr.utility)?;
                ranked
                    .iter()
                    .map(|(h, eu)| Candidate { text: text(h.ids()), score: *eu })
                    .collect()
            }
            DecoderMode::Phon => {
                let phones: Vec<String> = transcript.iter().flat_map(|t| phones_of(t)).collect();
                let pspec = phone_channel(&phones, &spec.phone_noise, vocab, &mut rng, clip_seed);
                let pids: Vec<TokenId> = phones.iter().map(|t| vocab.id_or_unk(t)).collect();
                let plm = ChannelLm::new(pspec.compile(&pids)?, eos)?;
                let h = greedy_decode(&plm, &[], 2 * pids.len() + 2, Alphabet::Phone)?;
                vec![Candidate { text: text(h.ids()), score: 0.0 }]
            }
        };
        out.insert(mode, cands);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub schema: Schema,
    pub examples: Vec<ClipExample>,
    pub warnings: Vec<String>,
}

pub fn generate_clip(spec: &SynthSpec, vocab: &Vocab, index: usize) -> Result<ClipExample> {
    let clip_seed = derive_seed(spec.seed, "data", &[index as u64]);
    let mut rng = indexed_substream(clip_seed, "content", &[]);
    let transcript = sample_transcript(spec, &mut rng);
    let features = sample_features(spec, &mut rng);
    let text = transcript.join(" ");
    let labels = gold_labels(&text, &features, spec.thresholds, spec.schema)?;
    let hypotheses = recognize(spec, &transcript, vocab, clip_seed)?;
    Ok(ClipExample {
        id: format!("clip-{index:05}"),
        features,
        transcript: text,
        hypotheses,
        labels,
        split: spec.split_of(index),
    })
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let vocab = synthetic_vocab();
    let mut warnings = Vec::new();
    for c in spec.unreachable_classes() {
        warnings.push(format!("class {} has prior 0 and will never occur", c.tag()));
    }
    if spec.modes.is_empty() {
        return Err(Error::Config("at least one decoder mode is required".into()));
    }
    let examples = (0..spec.total_clips())
        .map(|i| generate_clip(spec, &vocab, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedCorpus {
        schema: spec.schema,
        examples,
        warnings,
    })
}
