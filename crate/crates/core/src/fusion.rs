//! Acoustic prefix fusion: a pooled acoustic vector is projected into the
//! token space, prepended to `[BOS] hypothesis [LAB]`, and the model is
//! trained to continue with the serialized label string and `[EOS]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{flatten_candidates, greedy_decode, Hypothesis};
use crate::error::{Error, Result};
use crate::labels::{parse_labels, serialize_labels, LabelSet, Schema};
use crate::lm::{CausalLm, LmConfig, LmContext, LmTrainable, ModelInput};
use crate::lora::LoraConfig;
use crate::params::{emit, emit_mut, nest, nest_mut, Parameters, Visitor, VisitorMut};
use crate::real::{self, Real};
use crate::seed::{substream, StreamRng};
use crate::vocab::{Alphabet, TokenId, Vocab};

/// Generation stops after this many steps even without `[EOS]`.
pub const MAX_LABEL_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DecoderMode {
    #[serde(rename = "1-best")]
    OneBest,
    #[serde(rename = "N-best")]
    NBest,
    #[serde(rename = "Phon")]
    Phon,
    #[serde(rename = "MBR")]
    Mbr,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 4] = [DecoderMode::OneBest, DecoderMode::NBest, DecoderMode::Phon, DecoderMode::Mbr];

    pub fn name(self) -> &'static str {
        match self {
            DecoderMode::OneBest => "1-best",
            DecoderMode::NBest => "N-best",
            DecoderMode::Phon => "Phon",
            DecoderMode::Mbr => "MBR",
        }
    }

    pub fn alphabet(self) -> Alphabet {
        match self {
            DecoderMode::Phon => Alphabet::Phone,
            _ => Alphabet::Word,
        }
    }
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecoderMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown decoder mode {s:?} (1-best, N-best, Phon, MBR)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A scored hypothesis in surface form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    /// `L × a`, frames by feature dims.
    pub frames: Array2<f32>,
    pub layer: u32,
    pub finetuned: bool,
}

impl AcousticFeatures {
    pub fn new(frames: Array2<f32>) -> Self {
        AcousticFeatures {
            frames,
            layer: 24,
            finetuned: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.nrows() == 0 || self.frames.ncols() == 0 {
            return Err(Error::Data(format!(
                "feature matrix is {}x{}",
                self.frames.nrows(),
                self.frames.ncols()
            )));
        }
        if !self.frames.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("feature matrix has non-finite entries".into()));
        }
        Ok(())
    }

    /// Mean over frames, accumulated in 64-bit.
    pub fn pooled(&self) -> Result<Array1<f64>> {
        self.validate()?;
        let n = self.frames.nrows() as f64;
        let mut out = Array1::<f64>::zeros(self.frames.ncols());
        for row in self.frames.rows() {
            out.zip_mut_with(&row, |acc, &v| *acc += f64::from(v));
        }
        Ok(out / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipExample {
    pub id: String,
    pub features: AcousticFeatures,
    pub transcript: String,
    pub hypotheses: BTreeMap<DecoderMode, Vec<Candidate>>,
    pub labels: LabelSet,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            input_dim: 16,
            hidden: 512,
            dropout: 0.10,
        }
    }
}

/// Mean-pool, `linear(a → hidden)`, ReLU, dropout, `linear(hidden → d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticProjector<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub dropout_p: f64,
}

pub struct ProjectorCache<T> {
    input: Array1<T>,
    pre: Array1<T>,
    hidden: Array1<T>,
    mask: Option<Array1<T>>,
}

impl<T: Real> AcousticProjector<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ProjectorConfig, d_model: usize, rng: &mut R) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("projector dropout {} outside [0, 1)", cfg.dropout)));
        }
        let b1 = 1.0 / (cfg.input_dim as f64).sqrt();
        let b2 = 1.0 / (cfg.hidden as f64).sqrt();
        Ok(AcousticProjector {
            w1: real::uniform(cfg.hidden, cfg.input_dim, b1, rng),
            b1: real::uniform(1, cfg.hidden, b1, rng).into_shape_with_order(cfg.hidden).expect("row"),
            w2: real::uniform(d_model, cfg.hidden, b2, rng),
            b2: real::uniform(1, d_model, b2, rng).into_shape_with_order(d_model).expect("row"),
            dropout_p: cfg.dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        AcousticProjector {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            dropout_p: self.dropout_p,
        }
    }

    pub fn cast<U: Real>(&self) -> AcousticProjector<U> {
        AcousticProjector {
            w1: self.w1.mapv(|v| U::of(v.f64())),
            b1: self.b1.mapv(|v| U::of(v.f64())),
            w2: self.w2.mapv(|v| U::of(v.f64())),
            b2: self.b2.mapv(|v| U::of(v.f64())),
            dropout_p: self.dropout_p,
        }
    }

    /// Forward pass on an already pooled vector. `rng` enables dropout.
    pub fn forward_pooled(&self, pooled: ArrayView1<T>, rng: Option<&mut StreamRng>) -> Result<(Array1<T>, ProjectorCache<T>)> {
        if pooled.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "features have {} dims, projector expects {}",
                pooled.len(),
                self.input_dim()
            )));
        }
        let pre = self.w1.dot(&pooled) + &self.b1;
        let mut hidden = pre.mapv(|v| v.max(T::zero()));
        let mask = match rng {
            Some(rng) if self.dropout_p > 0.0 => {
                let m = real::dropout_mask::<T, _>(1, hidden.len(), self.dropout_p, rng)
                    .into_shape_with_order(hidden.len())
                    .expect("row");
                hidden *= &m;
                Some(m)
            }
            _ => None,
        };
        let out = self.w2.dot(&hidden) + &self.b2;
        Ok((
            out,
            ProjectorCache {
                input: pooled.to_owned(),
                pre,
                hidden,
                mask,
            },
        ))
    }

    pub fn backward(&self, cache: &ProjectorCache<T>, d_out: ArrayView1<T>, grad: &mut AcousticProjector<T>) {
        grad.b2 += &d_out;
        outer_add(&mut grad.w2, d_out, cache.hidden.view());
        let mut dh = self.w2.t().dot(&d_out);
        if let Some(m) = &cache.mask {
            dh *= m;
        }
        dh.zip_mut_with(&cache.pre, |g, &p| {
            if p <= T::zero() {
                *g = T::zero();
            }
        });
        grad.b1 += &dh;
        outer_add(&mut grad.w1, dh.view(), cache.input.view());
    }
}

fn outer_add<T: Real>(m: &mut Array2<T>, a: ArrayView1<T>, b: ArrayView1<T>) {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let ai = a[i];
        if ai != T::zero() {
            row.scaled_add(ai, &b);
        }
    }
}

impl<T: Real> Parameters<T> for AcousticProjector<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        emit(f, "w1", &self.w1);
        emit(f, "b1", &self.b1);
        emit(f, "w2", &self.w2);
        emit(f, "b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        emit_mut(f, "w1", &mut self.w1);
        emit_mut(f, "b1", &mut self.b1);
        emit_mut(f, "w2", &mut self.w2);
        emit_mut(f, "b2", &mut self.b2);
    }
}

/// Which modalities reach the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modalities {
    /// When false the projector output is replaced by zeros.
    pub acoustic: bool,
    /// When false hypotheses are replaced by an empty sequence.
    pub lexical: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Modalities {
            acoustic: true,
            lexical: true,
        }
    }
}

impl Modalities {
    pub fn acoustic_only() -> Self {
        Modalities {
            acoustic: true,
            lexical: false,
        }
    }

    pub fn lexical_only() -> Self {
        Modalities {
            acoustic: false,
            lexical: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub projector: ProjectorConfig,
    pub schema: Schema,
    pub modalities: Modalities,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            projector: ProjectorConfig::default(),
            schema: Schema::Sep28k,
            modalities: Modalities::default(),
        }
    }
}

/// The full detector: frozen LM with adapters, projector and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T = f32> {
    pub config: FusionConfig,
    pub vocab: Vocab,
    pub lm: CausalLm<T>,
    pub projector: AcousticProjector<T>,
}

/// A training record reduced to what the loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub pooled: Array1<f64>,
    pub tokens: Vec<TokenId>,
    /// Indexed by position; position 0 is the prefix vector.
    pub loss_mask: Vec<bool>,
}

impl EncodedExample {
    pub fn positions(&self) -> usize {
        self.tokens.len() + 1
    }
}

/// `[BOS] hyp [LAB] (labels [EOS])`, cut from the hypothesis tail so that
/// one prefix vector plus the tokens fit in `max_len`.
pub fn assemble_tokens(
    vocab: &Vocab,
    hyp: &[TokenId],
    labels: Option<&[TokenId]>,
    max_len: usize,
) -> Result<(Vec<TokenId>, Vec<bool>)> {
    let label_len = labels.map_or(0, |l| l.len() + 1);
    let fixed = 1 + 2 + label_len;
    if fixed > max_len {
        return Err(Error::Assembly(format!(
            "labels need {fixed} positions but only {max_len} are available"
        )));
    }
    let keep = hyp.len().min(max_len - fixed);
    let mut tokens = Vec::with_capacity(fixed - 1 + keep);
    tokens.push(vocab.bos());
    tokens.extend_from_slice(&hyp[..keep]);
    tokens.push(vocab.lab());
    let mut mask = vec![false; tokens.len() + 1];
    if let Some(labels) = labels {
        tokens.extend_from_slice(labels);
        tokens.push(vocab.eos());
        mask.resize(tokens.len() + 1, true);
    }
    Ok((tokens, mask))
}

/// Builds the model input from a prefix vector, hypothesis and optional
/// label tokens.
pub fn assemble_input<T: Real>(
    vocab: &Vocab,
    prefix: ArrayView1<T>,
    hyp: &[TokenId],
    labels: Option<&[TokenId]>,
    max_len: usize,
) -> Result<ModelInput<T>> {
    let (tokens, loss_mask) = assemble_tokens(vocab, hyp, labels, max_len)?;
    Ok(ModelInput {
        prefix: prefix.to_owned().insert_axis(ndarray::Axis(0)),
        tokens,
        loss_mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, without the final `[EOS]`.
    pub ids: Vec<TokenId>,
    pub text: String,
    pub hit_eos: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: LabelSet,
    pub raw: String,
}

/// Gradients of the trainable parts of a [`FusionModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads<T> {
    pub lm: LmTrainable<T>,
    pub projector: AcousticProjector<T>,
}

impl<T: Real> FusionGrads<T> {
    pub fn add(&mut self, other: &FusionGrads<T>) {
        self.add_scaled(other, T::one());
    }
}

impl<T: Real> Parameters<T> for FusionGrads<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        nest(f, "lm", &self.lm);
        nest(f, "projector", &self.projector);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        nest_mut(f, "lm", &mut self.lm);
        nest_mut(f, "projector", &mut self.projector);
    }
}

/// Only the trainable tensors: adapters, label rows, projector.
impl<T: Real> Parameters<T> for FusionModel<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        nest(f, "lm", &self.lm.trainable);
        nest(f, "projector", &self.projector);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        nest_mut(f, "lm", &mut self.lm.trainable);
        nest_mut(f, "projector", &mut self.projector);
    }
}

impl<T: Real> FusionModel<T> {
    pub fn new(config: FusionConfig, vocab: Vocab) -> Result<Self> {
        let mut config = config;
        config.lm.vocab_size = vocab.len();
        let lm = CausalLm::new(&config.lm, vocab.label_start(), &config.lora)?;
        let mut rng = substream(config.lm.seed, "projector");
        let projector = AcousticProjector::new(&config.projector, config.lm.d_model, &mut rng)?;
        Ok(FusionModel {
            config,
            vocab,
            lm,
            projector,
        })
    }

    pub fn schema(&self) -> Schema {
        self.config.schema
    }

    pub fn modalities(&self) -> Modalities {
        self.config.modalities
    }

    pub fn set_modalities(&mut self, m: Modalities) {
        self.config.modalities = m;
    }

    pub fn max_len(&self) -> usize {
        self.config.lm.max_seq_len
    }

    pub fn cast<U: Real>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            lm: self.lm.cast(),
            projector: self.projector.cast(),
        }
    }

    pub fn zero_grads(&self) -> FusionGrads<T> {
        FusionGrads {
            lm: self.lm.trainable.zeros_like(),
            projector: self.projector.zeros_like(),
        }
    }

    /// Every tensor with its checkpoint name, trainable or not.
    pub fn visit_all(&self, f: &mut Visitor<'_, T>) {
        self.lm.base.visit(&mut |n, s, v| f(&format!("base/{n}"), s, v));
        for (i, b) in self.lm.trainable.blocks.iter().enumerate() {
            b.q.visit(&mut |n, s, v| f(&format!("adapter/block{i}.q.{n}"), s, v));
            b.v.visit(&mut |n, s, v| f(&format!("adapter/block{i}.v.{n}"), s, v));
        }
        emit(f, "label/embed", &self.lm.trainable.label_embed);
        emit(f, "label/head", &self.lm.trainable.label_head);
        self.projector.visit(&mut |n, s, v| f(&format!("projector/{n}"), s, v));
    }

    pub fn visit_all_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        self.lm.base.visit_mut(&mut |n, v| f(&format!("base/{n}"), v));
        for (i, b) in self.lm.trainable.blocks.iter_mut().enumerate() {
            b.q.visit_mut(&mut |n, v| f(&format!("adapter/block{i}.q.{n}"), v));
            b.v.visit_mut(&mut |n, v| f(&format!("adapter/block{i}.v.{n}"), v));
        }
        emit_mut(f, "label/embed", &mut self.lm.trainable.label_embed);
        emit_mut(f, "label/head", &mut self.lm.trainable.label_head);
        self.projector.visit_mut(&mut |n, v| f(&format!("projector/{n}"), v));
    }

    /// Projector output for pooled features, zeroed when the acoustic
    /// modality is switched off.
    pub fn project_pooled(&self, pooled: &Array1<f64>, rng: Option<&mut StreamRng>) -> Result<(Array1<T>, Option<ProjectorCache<T>>)> {
        if !self.modalities().acoustic {
            return Ok((Array1::zeros(self.lm.d_model()), None));
        }
        if !pooled.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("pooled features are not finite".into()));
        }
        let x = pooled.mapv(T::of);
        let (out, cache) = self.projector.forward_pooled(x.view(), rng)?;
        Ok((out, Some(cache)))
    }

    pub fn project_acoustic(&self, feats: &AcousticFeatures, rng: Option<&mut StreamRng>) -> Result<Array1<T>> {
        Ok(self.project_pooled(&feats.pooled()?, rng)?.0)
    }

    /// Lexical input for a clip under a decoder mode.
    pub fn hypothesis_tokens(&self, example: &ClipExample, mode: DecoderMode) -> Result<Vec<TokenId>> {
        let cands = example
            .hypotheses
            .get(&mode)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Data(format!("clip {} has no {mode} hypotheses", example.id)))?;
        if !self.modalities().lexical {
            return Ok(Vec::new());
        }
        let hyps: Vec<Hypothesis> = cands
            .iter()
            .map(|c| Hypothesis::new(self.vocab.encode(&c.text), mode.alphabet(), c.score))
            .collect();
        Ok(flatten_candidates(&hyps, self.vocab.sep())?.ids)
    }

    pub fn encode_example(&self, example: &ClipExample, mode: DecoderMode) -> Result<EncodedExample> {
        let hyp = self.hypothesis_tokens(example, mode)?;
        let label_text = serialize_labels(example.labels, self.schema())?;
        let labels = self.vocab.encode_label_string(&label_text);
        let (tokens, loss_mask) = assemble_tokens(&self.vocab, &hyp, Some(&labels), self.max_len())?;
        Ok(EncodedExample {
            pooled: example.features.pooled()?,
            tokens,
            loss_mask,
        })
    }

    fn model_input(&self, ex: &EncodedExample, prefix: Array1<T>) -> ModelInput<T> {
        let mut input = ModelInput {
            prefix: prefix.insert_axis(ndarray::Axis(0)),
            tokens: ex.tokens.clone(),
            loss_mask: ex.loss_mask.clone(),
        };
        input.trim_padding(self.vocab.pad());
        input
    }

    /// Summed cross-entropy and target count, eval mode.
    pub fn example_loss(&self, ex: &EncodedExample) -> Result<(f64, usize)> {
        let (prefix, _) = self.project_pooled(&ex.pooled, None)?;
        self.lm.masked_loss(&self.model_input(ex, prefix))
    }

    /// Summed cross-entropy, target count and gradients of the sum.
    pub fn example_grad(&self, ex: &EncodedExample, mut rng: Option<&mut StreamRng>) -> Result<(f64, usize, FusionGrads<T>)> {
        let (prefix, cache) = self.project_pooled(&ex.pooled, rng.as_deref_mut())?;
        let input = self.model_input(ex, prefix);
        let (loss, count, lm_grads, d_prefix) = self.lm.loss_and_grad(&input, rng.as_deref_mut())?;
        let mut grads = FusionGrads {
            lm: lm_grads,
            projector: self.projector.zeros_like(),
        };
        if let Some(cache) = cache {
            self.projector.backward(&cache, d_prefix.row(0), &mut grads.projector);
        }
        Ok((loss, count, grads))
    }

    /// Gradients summed over `batch` in order. `seeds` gives one dropout
    /// stream per example; `None` runs in eval mode.
    pub fn batch_grad(&self, batch: &[EncodedExample], seeds: Option<&[u64]>) -> Result<(f64, usize, FusionGrads<T>)> {
        let parts: Vec<Result<(f64, usize, FusionGrads<T>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = seeds.map(|s| <StreamRng as rand::SeedableRng>::seed_from_u64(s[i]));
                self.example_grad(ex, rng.as_mut())
            })
            .collect();
        let mut total = self.zero_grads();
        let mut loss = 0.0;
        let mut count = 0;
        for part in parts {
            let (l, c, g) = part?;
            loss += l;
            count += c;
            total.add(&g);
        }
        Ok((loss, count, total))
    }

    /// Mean label loss over all masked positions of the batch.
    pub fn label_loss(&self, batch: &[EncodedExample]) -> Result<f64> {
        let parts: Vec<Result<(f64, usize)>> = batch.par_iter().map(|ex| self.example_loss(ex)).collect();
        let (mut loss, mut count) = (0.0, 0);
        for p in parts {
            let (l, c) = p?;
            loss += l;
            count += c;
        }
        if count == 0 {
            return Err(Error::Input("batch has no masked positions".into()));
        }
        Ok(loss / count as f64)
    }

    /// Greedy label generation from the `[LAB]` position.
    pub fn generate_labels(&self, prefix: ArrayView1<T>, hyp: &[TokenId]) -> Result<Generation> {
        let input = assemble_input(&self.vocab, prefix, hyp, None, self.max_len() - MAX_LABEL_STEPS)?;
        let ctx = LmContext { model: &self.lm, input };
        let out = greedy_decode(&ctx, &[], MAX_LABEL_STEPS, Alphabet::Label)?;
        let ids = out.tokens.ids;
        let hit_eos = ids.len() < MAX_LABEL_STEPS;
        Ok(Generation {
            text: self.vocab.detokenize(&ids),
            ids,
            hit_eos,
        })
    }

    pub fn generate_label_string(&self, prefix: ArrayView1<T>, hyp: &[TokenId]) -> Result<String> {
        Ok(self.generate_labels(prefix, hyp)?.text)
    }

    pub fn predict(&self, example: &ClipExample, mode: DecoderMode) -> Result<Prediction> {
        let hyp = self.hypothesis_tokens(example, mode)?;
        let prefix = self.project_acoustic(&example.features, None)?;
        let raw = self.generate_label_string(prefix.view(), &hyp)?;
        Ok(Prediction {
            labels: parse_labels(&raw, self.schema()),
            raw,
        })
    }

    /// Label-position logits for a clip, used to probe prefix influence.
    pub fn label_logits(&self, example: &ClipExample, mode: DecoderMode) -> Result<Array1<T>> {
        let hyp = self.hypothesis_tokens(example, mode)?;
        let prefix = self.project_acoustic(&example.features, None)?;
        let input = assemble_input(&self.vocab, prefix.view(), &hyp, None, self.max_len())?;
        let logits = self.lm.next_token_logits(&input)?;
        Ok(logits.row(logits.nrows() - 1).to_owned())
    }
}

/// Mean label loss of a plain LM over pre-assembled inputs.
pub fn label_loss<T: Real>(model: &CausalLm<T>, batch: &[ModelInput<T>]) -> Result<f64> {
    let (mut loss, mut count) = (0.0, 0);
    for input in batch {
        let mut input = input.clone();
        input.trim_padding(0);
        if input.n_targets() == 0 {
            return Err(Error::Input("input has an empty loss mask".into()));
        }
        let (l, c) = model.masked_loss(&input)?;
        loss += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::Input("batch has no masked positions".into()));
    }
    Ok(loss / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::DysfluencyClass;
    use crate::training::{AdamW, TrainConfig};
    use ndarray::array;
    use rand::SeedableRng;

    fn config(d: usize, a: usize) -> FusionConfig {
        FusionConfig {
            lm: LmConfig {
                d_model: d,
                n_layers: 1,
                n_heads: 2,
                d_ff: 2 * d,
                max_seq_len: 64,
                seed: 5,
                ..LmConfig::default()
            },
            lora: LoraConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.0,
            },
            projector: ProjectorConfig {
                input_dim: a,
                hidden: 6,
                dropout: 0.0,
            },
            ..FusionConfig::default()
        }
    }

    fn model<T: Real>() -> FusionModel<T> {
        let vocab = Vocab::new(["cat", "uh", "the"]).unwrap();
        FusionModel::new(config(8, 3), vocab).unwrap()
    }

    fn clip(labels: &[DysfluencyClass], hyp: &str, v: f32) -> ClipExample {
        ClipExample {
            id: "c".into(),
            features: AcousticFeatures::new(Array2::from_shape_fn((4, 3), |(i, j)| v + (i as f32 - 1.5) * 0.1 * j as f32)),
            transcript: hyp.into(),
            hypotheses: BTreeMap::from([(
                DecoderMode::OneBest,
                vec![Candidate {
                    text: hyp.into(),
                    score: 0.0,
                }],
            )]),
            labels: labels.iter().copied().collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn constant_frames_match_single_frame() {
        let m = model::<f64>();
        let v = [0.3f32, -1.2, 2.0];
        let many = AcousticFeatures::new(Array2::from_shape_fn((7, 3), |(_, j)| v[j]));
        let one = AcousticFeatures::new(Array2::from_shape_fn((1, 3), |(_, j)| v[j]));
        assert_eq!(m.project_acoustic(&many, None).unwrap(), m.project_acoustic(&one, None).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = model::<f64>();
        m.projector = m.projector.zeros_like();
        let out = m.project_acoustic(&clip(&[], "cat", 1.0).features, None).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_projection() {
        let (hidden, d) = (512, 3);
        let mut p = AcousticProjector::<f64> {
            w1: Array2::zeros((hidden, 2)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_elem((d, hidden), 1.0 / 512.0),
            b2: array![0.0, 1.0, 2.0],
            dropout_p: 0.1,
        };
        for (j, mut row) in p.w1.rows_mut().into_iter().enumerate() {
            // even units see 2 - 1 = 1, odd units -2 and are cut by the ReLU
            row.assign(&if j % 2 == 0 { array![1.0, -1.0] } else { array![-1.0, 0.0] });
        }
        let (out, _) = p.forward_pooled(array![2.0, 1.0].view(), None).unwrap();
        assert_eq!(out, array![0.5, 1.5, 2.5]);
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let m = model::<f32>();
        let mut c = clip(&[], "cat", 0.0);
        c.features.frames[[0, 0]] = f32::NAN;
        assert!(matches!(m.project_acoustic(&c.features, None), Err(Error::Data(_))));
        let mut wide = clip(&[], "cat", 0.0);
        wide.features.frames = Array2::zeros((2, 5));
        assert!(matches!(m.project_acoustic(&wide.features, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn assembly_contracts() {
        let vocab = Vocab::new(["a"]).unwrap();
        let (tokens, mask) = assemble_tokens(&vocab, &[5, 5], None, 1024).unwrap();
        assert_eq!(tokens, vec![vocab.bos(), 5, 5, vocab.lab()]);
        assert!(mask.iter().all(|m| !m));

        let hyp = vec![5; 2000];
        let labels = vocab.encode_label_string("Blk;Int");
        let (tokens, mask) = assemble_tokens(&vocab, &hyp, Some(&labels), 1024).unwrap();
        assert_eq!(tokens.len() + 1, 1024);
        assert_eq!(&tokens[tokens.len() - 4..tokens.len() - 1], &labels[..]);
        assert_eq!(*tokens.last().unwrap(), vocab.eos());
        assert_eq!(mask.iter().filter(|&&m| m).count(), labels.len() + 1);

        assert!(matches!(
            assemble_tokens(&vocab, &[], Some(&labels), 5),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn unmasked_targets_are_never_read() {
        let m = model::<f64>();
        let ex = m.encode_example(&clip(&[DysfluencyClass::Int], "uh cat the", 0.5), DecoderMode::OneBest).unwrap();
        let (prefix, _) = m.project_pooled(&ex.pooled, None).unwrap();
        let input = m.model_input(&ex, prefix);
        let mut targets: Vec<TokenId> = (0..input.positions()).map(|i| input.token_at(i).unwrap_or(0)).collect();
        let base = m.lm.masked_loss_targets(&input, &targets).unwrap();
        assert_eq!(base, m.lm.masked_loss(&input).unwrap());
        let free: Vec<usize> = (0..targets.len()).filter(|&i| !input.loss_mask[i]).collect();
        let first = targets[free[0]];
        for w in free.windows(2) {
            targets[w[0]] = targets[w[1]];
        }
        targets[*free.last().unwrap()] = first;
        assert_eq!(m.lm.masked_loss_targets(&input, &targets).unwrap(), base);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = model::<f64>();
        m.lm.base.head.fill(0.0);
        m.lm.trainable.label_head.fill(0.0);
        let ex = m.encode_example(&clip(&[DysfluencyClass::Blk], "cat", 0.0), DecoderMode::OneBest).unwrap();
        let loss = m.label_loss(&[ex]).unwrap();
        assert!((loss - (m.vocab.len() as f64).ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = model::<f64>();
        let input = assemble_input(&m.vocab, Array1::zeros(8).view(), &[5], None, 64).unwrap();
        assert!(matches!(label_loss(&m.lm, &[input]), Err(Error::Input(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = model::<f64>();
        let mut rng = StreamRng::seed_from_u64(3);
        m.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5)));
        let examples = [
            clip(&[DysfluencyClass::Int], "uh cat", 0.7),
            clip(&[DysfluencyClass::Blk, DysfluencyClass::Wrd], "the the", -0.4),
        ];
        let batch: Vec<EncodedExample> = examples.iter().map(|c| m.encode_example(c, DecoderMode::OneBest).unwrap()).collect();
        let (_, count, grads) = m.batch_grad(&batch, None).unwrap();
        let analytic = grads.flatten();
        let names = m.names();
        let flat = m.flatten();
        let h = 1e-5;
        let mut checked = 0;
        for i in (0..flat.len()).step_by(3) {
            let at = |x: f64| {
                let mut p = flat.clone();
                p[i] = x;
                let mut mm = m.clone();
                mm.assign(&p);
                mm.label_loss(&batch).unwrap() * count as f64
            };
            let fd = (at(flat[i] + h) - at(flat[i] - h)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-4, "{}: fd {fd} analytic {}", names[i], analytic[i]);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn generation_is_bounded() {
        let mut m = model::<f32>();
        for seed in 0..20 {
            m.lm.trainable.label_head.mapv_inplace(|v| v * 3.0 + seed as f32 * 0.01);
            let c = clip(&[], "cat uh", seed as f32 * 0.1);
            let prefix = m.project_acoustic(&c.features, None).unwrap();
            let g = m.generate_labels(prefix.view(), &[5, 6]).unwrap();
            assert!(g.ids.len() <= MAX_LABEL_STEPS);
            m.predict(&c, DecoderMode::OneBest).unwrap();
        }

        // a head that always prefers Blk never reaches [EOS]
        m.lm.base.lnf_g.fill(0.0);
        m.lm.base.lnf_b.fill(0.0);
        m.lm.base.lnf_b[0] = 1.0;
        m.lm.base.head.fill(0.0);
        m.lm.trainable.label_head.fill(0.0);
        let blk = m.vocab.id("Blk").unwrap() as usize - m.vocab.label_start();
        m.lm.trainable.label_head[[blk, 0]] = 10.0;
        let prefix = Array1::zeros(8);
        let g = m.generate_labels(prefix.view(), &[5]).unwrap();
        assert_eq!(g.ids.len(), MAX_LABEL_STEPS);
        assert!(!g.hit_eos);
        assert!(parse_labels(&g.text, Schema::Sep28k).is_empty(), "{}", g.text);
    }

    #[test]
    fn memorizes_a_single_clip() {
        let mut m = model::<f32>();
        let c = clip(&[DysfluencyClass::Blk, DysfluencyClass::Int], "uh cat", 0.3);
        let batch = vec![m.encode_example(&c, DecoderMode::OneBest).unwrap()];
        let cfg = TrainConfig {
            lr0: 3e-2,
            beta1: 0.9,
            weight_decay: 0.0,
            effective_batch: 1,
            micro_batch: 1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(m.num_params());
        for _ in 0..800 {
            crate::training::train_step(&mut m, &mut opt, &batch, None, cfg.lr0, &cfg).unwrap();
        }
        let loss = m.label_loss(&batch).unwrap();
        assert!(loss <= 1e-3, "{loss}");
        let p = m.predict(&c, DecoderMode::OneBest).unwrap();
        assert_eq!(p.raw, "Blk;Int");
        assert_eq!(p.labels, c.labels);
        let g = m.generate_labels(m.project_acoustic(&c.features, None).unwrap().view(), &m.hypothesis_tokens(&c, DecoderMode::OneBest).unwrap()).unwrap();
        assert!(g.hit_eos);
        assert_eq!(g.ids.len(), 3);
    }

    #[test]
    fn ablation_switches_are_exact() {
        let mut m = model::<f64>();
        let a = clip(&[], "cat uh", 1.0);
        let b = clip(&[], "cat uh", -2.0);
        assert_ne!(m.label_logits(&a, DecoderMode::OneBest).unwrap(), m.label_logits(&b, DecoderMode::OneBest).unwrap());
        m.set_modalities(Modalities::lexical_only());
        assert_eq!(m.label_logits(&a, DecoderMode::OneBest).unwrap(), m.label_logits(&b, DecoderMode::OneBest).unwrap());
        m.set_modalities(Modalities::acoustic_only());
        assert!(m.hypothesis_tokens(&a, DecoderMode::OneBest).unwrap().is_empty());
        assert!(matches!(m.hypothesis_tokens(&a, DecoderMode::Mbr), Err(Error::Data(_))));
    }

    #[test]
    fn decoder_mode_names() {
        for mode in DecoderMode::ALL {
            assert_eq!(mode.name().parse::<DecoderMode>().unwrap(), mode);
        }
        assert_eq!("mbr".parse::<DecoderMode>().unwrap(), DecoderMode::Mbr);
        assert!("2-best".parse::<DecoderMode>().is_err());
    }
}
