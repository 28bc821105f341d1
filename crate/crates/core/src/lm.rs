//! Small pre-norm causal transformer with hand-written backpropagation.
//!
//! The base weights are frozen. Gradients are produced only for the LoRA
//! adapters on the query/value projections, for the label-alphabet rows of
//! the embedding table and output head, and for the continuous prefix
//! vectors (which the caller routes into the acoustic projector).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::decoding::NextTokenModel;
use crate::error::{Error, Result};
use crate::lora::{init_adapter, LoraAdapter, LoraCache, LoraConfig};
use crate::params::{emit, emit_mut, nest, nest_mut, Parameters, Visitor, VisitorMut};
use crate::real::{self, Real};
use crate::seed::{substream, StreamRng};
use crate::vocab::{TokenId, TokenSequence};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 1024,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

/// Frozen weights. `embed` and `head` cover the ids below `label_start`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights<T> {
    pub embed: Array2<T>,
    pub pos: Array2<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub head: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters<T> {
    pub q: LoraAdapter<T>,
    pub v: LoraAdapter<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmTrainable<T> {
    pub blocks: Vec<BlockAdapters<T>>,
    /// Input embeddings of the label alphabet.
    pub label_embed: Array2<T>,
    /// Output head rows of the label alphabet.
    pub label_head: Array2<T>,
}

impl<T: Real> LmTrainable<T> {
    pub fn zeros_like(&self) -> Self {
        LmTrainable {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockAdapters {
                    q: b.q.zeros_like(),
                    v: b.v.zeros_like(),
                })
                .collect(),
            label_embed: Array2::zeros(self.label_embed.raw_dim()),
            label_head: Array2::zeros(self.label_head.raw_dim()),
        }
    }
}

impl<T: Real> Parameters<T> for LmTrainable<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        for (i, b) in self.blocks.iter().enumerate() {
            nest(f, &format!("block{i}.q"), &b.q);
            nest(f, &format!("block{i}.v"), &b.v);
        }
        emit(f, "label_embed", &self.label_embed);
        emit(f, "label_head", &self.label_head);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            nest_mut(f, &format!("block{i}.q"), &mut b.q);
            nest_mut(f, &format!("block{i}.v"), &mut b.v);
        }
        emit_mut(f, "label_embed", &mut self.label_embed);
        emit_mut(f, "label_head", &mut self.label_head);
    }
}

impl<T: Real> Parameters<T> for BaseWeights<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        emit(f, "embed", &self.embed);
        emit(f, "pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            emit(f, &format!("{p}.ln1_g"), &b.ln1_g);
            emit(f, &format!("{p}.ln1_b"), &b.ln1_b);
            emit(f, &format!("{p}.wq"), &b.wq);
            emit(f, &format!("{p}.wk"), &b.wk);
            emit(f, &format!("{p}.wv"), &b.wv);
            emit(f, &format!("{p}.wo"), &b.wo);
            emit(f, &format!("{p}.ln2_g"), &b.ln2_g);
            emit(f, &format!("{p}.ln2_b"), &b.ln2_b);
            emit(f, &format!("{p}.w1"), &b.w1);
            emit(f, &format!("{p}.b1"), &b.b1);
            emit(f, &format!("{p}.w2"), &b.w2);
            emit(f, &format!("{p}.b2"), &b.b2);
        }
        emit(f, "lnf_g", &self.lnf_g);
        emit(f, "lnf_b", &self.lnf_b);
        emit(f, "head", &self.head);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        emit_mut(f, "embed", &mut self.embed);
        emit_mut(f, "pos", &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}");
            emit_mut(f, &format!("{p}.ln1_g"), &mut b.ln1_g);
            emit_mut(f, &format!("{p}.ln1_b"), &mut b.ln1_b);
            emit_mut(f, &format!("{p}.wq"), &mut b.wq);
            emit_mut(f, &format!("{p}.wk"), &mut b.wk);
            emit_mut(f, &format!("{p}.wv"), &mut b.wv);
            emit_mut(f, &format!("{p}.wo"), &mut b.wo);
            emit_mut(f, &format!("{p}.ln2_g"), &mut b.ln2_g);
            emit_mut(f, &format!("{p}.ln2_b"), &mut b.ln2_b);
            emit_mut(f, &format!("{p}.w1"), &mut b.w1);
            emit_mut(f, &format!("{p}.b1"), &mut b.b1);
            emit_mut(f, &format!("{p}.w2"), &mut b.w2);
            emit_mut(f, &format!("{p}.b2"), &mut b.b2);
        }
        emit_mut(f, "lnf_g", &mut self.lnf_g);
        emit_mut(f, "lnf_b", &mut self.lnf_b);
        emit_mut(f, "head", &mut self.head);
    }
}

/// Prefix vectors, token ids and the per-position loss mask.
///
/// `loss_mask[i]` marks position `i` as a target, predicted from the logits
/// at position `i - 1`. Positions count prefix vectors first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub prefix: Array2<T>,
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
}

impl<T: Real> ModelInput<T> {
    pub fn new(prefix: Array2<T>, tokens: Vec<TokenId>) -> Self {
        let n = prefix.nrows() + tokens.len();
        ModelInput {
            prefix,
            tokens,
            loss_mask: vec![false; n],
        }
    }

    pub fn tokens_only(d_model: usize, tokens: Vec<TokenId>) -> Self {
        Self::new(Array2::zeros((0, d_model)), tokens)
    }

    pub fn n_prefix(&self) -> usize {
        self.prefix.nrows()
    }

    pub fn positions(&self) -> usize {
        self.prefix.nrows() + self.tokens.len()
    }

    /// Token id at a position, `None` for prefix positions.
    pub fn token_at(&self, position: usize) -> Option<TokenId> {
        position
            .checked_sub(self.n_prefix())
            .map(|i| self.tokens[i])
    }

    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Drop trailing padding so that padded and unpadded inputs run the
    /// exact same arithmetic.
    pub fn trim_padding(&mut self, pad: TokenId) {
        let p = self.n_prefix();
        while let Some(&last) = self.tokens.last() {
            let pos = p + self.tokens.len() - 1;
            if last != pad || self.loss_mask[pos] {
                break;
            }
            self.tokens.pop();
            self.loss_mask.pop();
        }
    }

    pub fn cast<U: Real>(&self) -> ModelInput<U> {
        ModelInput {
            prefix: self.prefix.mapv(|v| U::of(v.f64())),
            tokens: self.tokens.clone(),
            loss_mask: self.loss_mask.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

fn layer_norm<T: Real>(x: ArrayView2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(T::zero(), |a, &v| a + v * v) / d;
        *inv = T::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Real>(dy: ArrayView2<T>, cache: &LnCache<T>, g: &Array1<T>) -> Array2<T> {
    let d = T::of(dy.ncols() as f64);
    let dxhat = &dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum = dh.sum();
        let dot = dh.dot(&xh);
        let inv = cache.inv_std[i];
        let mut out = dx.row_mut(i);
        for j in 0..dh.len() {
            out[j] = inv / d * (d * dh[j] - sum - xh[j] * dot);
        }
    }
    dx
}

fn gelu<T: Real>(u: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * u * (T::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * u * u)
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    lq: Option<LoraCache<T>>,
    lv: Option<LoraCache<T>>,
    ln2: LnCache<T>,
    u: Array2<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    /// Final normalized hidden states, `positions × d_model`.
    pub hidden: Array2<T>,
    n_prefix: usize,
    tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalLm<T> {
    pub config: LmConfig,
    pub lora: LoraConfig,
    pub base: BaseWeights<T>,
    pub trainable: LmTrainable<T>,
    /// When false the adapters contribute nothing (base model only).
    pub adapters_enabled: bool,
}

impl<T: Real> CausalLm<T> {
    /// Seeded model whose last `vocab_size - label_start` ids form the
    /// trainable label alphabet.
    pub fn new(config: &LmConfig, label_start: usize, lora: &LoraConfig) -> Result<Self> {
        config.validate()?;
        if label_start == 0 || label_start >= config.vocab_size {
            return Err(Error::Config(format!(
                "label_start {label_start} must lie inside the vocabulary of {}",
                config.vocab_size
            )));
        }
        let d = config.d_model;
        let mut rng = substream(config.seed, "lm/base");
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: real::gaussian(d, d, INIT_STD, &mut rng),
                wk: real::gaussian(d, d, INIT_STD, &mut rng),
                wv: real::gaussian(d, d, INIT_STD, &mut rng),
                wo: real::gaussian(d, d, INIT_STD, &mut rng),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: real::gaussian(config.d_ff, d, INIT_STD, &mut rng),
                b1: Array1::zeros(config.d_ff),
                w2: real::gaussian(d, config.d_ff, INIT_STD, &mut rng),
                b2: Array1::zeros(d),
            })
            .collect();
        let base = BaseWeights {
            embed: real::gaussian(label_start, d, INIT_STD, &mut rng),
            pos: real::gaussian(config.max_seq_len, d, INIT_STD, &mut rng),
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            head: real::gaussian(label_start, d, INIT_STD, &mut rng),
        };
        let mut rng = substream(config.seed, "lm/adapters");
        let mut adapters = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let q = init_adapter(d, d, lora.rank, lora.alpha, &mut rng)?
                .with_dropout(lora.dropout)
                .with_target(format!("block{i}.wq"));
            let v = init_adapter(d, d, lora.rank, lora.alpha, &mut rng)?
                .with_dropout(lora.dropout)
                .with_target(format!("block{i}.wv"));
            adapters.push(BlockAdapters { q, v });
        }
        let n_label = config.vocab_size - label_start;
        let mut rng = substream(config.seed, "lm/labels");
        let trainable = LmTrainable {
            blocks: adapters,
            label_embed: real::gaussian(n_label, d, INIT_STD, &mut rng),
            label_head: real::gaussian(n_label, d, INIT_STD, &mut rng),
        };
        Ok(CausalLm {
            config: config.clone(),
            lora: *lora,
            base,
            trainable,
            adapters_enabled: true,
        })
    }

    pub fn label_start(&self) -> usize {
        self.base.embed.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn eos(&self) -> TokenId {
        (self.config.vocab_size - 1) as TokenId
    }

    /// Turn the adapters off; the forward pass then depends only on the
    /// base weights, the label rows and the input.
    pub fn detach_adapters(&mut self) {
        self.adapters_enabled = false;
    }

    pub fn cast<U: Real>(&self) -> CausalLm<U> {
        fn c1<T: Real, U: Real>(a: &Array1<T>) -> Array1<U> {
            a.mapv(|v| U::of(v.f64()))
        }
        fn c2<T: Real, U: Real>(a: &Array2<T>) -> Array2<U> {
            a.mapv(|v| U::of(v.f64()))
        }
        let b = &self.base;
        CausalLm {
            config: self.config.clone(),
            lora: self.lora,
            base: BaseWeights {
                embed: c2(&b.embed),
                pos: c2(&b.pos),
                blocks: b
                    .blocks
                    .iter()
                    .map(|w| BlockWeights {
                        ln1_g: c1(&w.ln1_g),
                        ln1_b: c1(&w.ln1_b),
                        wq: c2(&w.wq),
                        wk: c2(&w.wk),
                        wv: c2(&w.wv),
                        wo: c2(&w.wo),
                        ln2_g: c1(&w.ln2_g),
                        ln2_b: c1(&w.ln2_b),
                        w1: c2(&w.w1),
                        b1: c1(&w.b1),
                        w2: c2(&w.w2),
                        b2: c1(&w.b2),
                    })
                    .collect(),
                lnf_g: c1(&b.lnf_g),
                lnf_b: c1(&b.lnf_b),
                head: c2(&b.head),
            },
            trainable: LmTrainable {
                blocks: self
                    .trainable
                    .blocks
                    .iter()
                    .map(|a| BlockAdapters {
                        q: a.q.cast(),
                        v: a.v.cast(),
                    })
                    .collect(),
                label_embed: c2(&self.trainable.label_embed),
                label_head: c2(&self.trainable.label_head),
            },
            adapters_enabled: self.adapters_enabled,
        }
    }

    pub fn validate_input(&self, input: &ModelInput<T>) -> Result<()> {
        let n = input.positions();
        if n == 0 {
            return Err(Error::Input("model input has no positions".into()));
        }
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if input.prefix.ncols() != self.d_model() {
            return Err(Error::Dimension(format!(
                "prefix vectors have {} dims, model has {}",
                input.prefix.ncols(),
                self.d_model()
            )));
        }
        if input.loss_mask.len() != n {
            return Err(Error::Input(format!(
                "loss mask has {} entries for {n} positions",
                input.loss_mask.len()
            )));
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        for (i, &m) in input.loss_mask.iter().enumerate() {
            if !m {
                continue;
            }
            let ok = i > 0
                && input
                    .token_at(i)
                    .is_some_and(|t| t as usize >= self.label_start());
            if !ok {
                return Err(Error::Input(format!(
                    "loss mask set on position {i}, which is not a label token"
                )));
            }
        }
        Ok(())
    }

    fn embed(&self, input: &ModelInput<T>) -> Array2<T> {
        let n = input.positions();
        let d = self.d_model();
        let p = input.n_prefix();
        let ls = self.label_start();
        let mut x = Array2::zeros((n, d));
        x.slice_mut(s![..p, ..]).assign(&input.prefix);
        for (i, &t) in input.tokens.iter().enumerate() {
            let t = t as usize;
            let row = if t < ls {
                self.base.embed.row(t)
            } else {
                self.trainable.label_embed.row(t - ls)
            };
            x.row_mut(p + i).assign(&row);
        }
        x += &self.base.pos.slice(s![..n, ..]);
        x
    }

    /// Runs the blocks and the final norm. `rng` enables adapter dropout.
    pub fn forward_hidden(
        &self,
        input: &ModelInput<T>,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<ForwardCache<T>> {
        self.validate_input(input)?;
        let n = input.positions();
        let heads = self.config.n_heads;
        let hd = self.d_model() / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut x = self.embed(input);
        let mut caches = Vec::with_capacity(self.base.blocks.len());
        for (w, ad) in self.base.blocks.iter().zip(&self.trainable.blocks) {
            let (h1, ln1) = layer_norm(x.view(), &w.ln1_g, &w.ln1_b);
            let mut q = real::linear(h1.view(), w.wq.view());
            let k = real::linear(h1.view(), w.wk.view());
            let mut v = real::linear(h1.view(), w.wv.view());
            let (mut lq, mut lv) = (None, None);
            if self.adapters_enabled {
                let (dq, cq) = ad.q.forward_rows(h1.view(), rng.as_deref_mut());
                let (dv, cv) = ad.v.forward_rows(h1.view(), rng.as_deref_mut());
                q += &dq;
                v += &dv;
                lq = Some(cq);
                lv = Some(cv);
            }
            let mut att = Array2::zeros((n, self.d_model()));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for i in 0..n {
                    for j in i + 1..n {
                        sc[[i, j]] = T::neg_infinity();
                    }
                }
                real::softmax_rows(&mut sc);
                att.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            x += &real::linear(att.view(), w.wo.view());
            let (h2, ln2) = layer_norm(x.view(), &w.ln2_g, &w.ln2_b);
            let u = real::linear(h2.view(), w.w1.view()) + &w.b1;
            let a = u.mapv(gelu);
            x += &(real::linear(a.view(), w.w2.view()) + &w.b2);
            caches.push(BlockCache {
                ln1,
                q,
                k,
                v,
                probs,
                lq,
                lv,
                ln2,
                u,
            });
        }
        let (hidden, lnf) = layer_norm(x.view(), &self.base.lnf_g, &self.base.lnf_b);
        Ok(ForwardCache {
            blocks: caches,
            lnf,
            hidden,
            n_prefix: input.n_prefix(),
            tokens: input.tokens.clone(),
        })
    }

    /// Logits for the given hidden rows.
    pub fn logits_rows(&self, hidden: ArrayView2<T>) -> Array2<T> {
        let ls = self.label_start();
        let mut out = Array2::zeros((hidden.nrows(), self.vocab_size()));
        out.slice_mut(s![.., ..ls])
            .assign(&real::linear(hidden, self.base.head.view()));
        out.slice_mut(s![.., ls..])
            .assign(&real::linear(hidden, self.trainable.label_head.view()));
        out
    }

    /// Per-position logits, `positions × vocab_size`, eval mode.
    pub fn next_token_logits(&self, input: &ModelInput<T>) -> Result<Array2<T>> {
        let cache = self.forward_hidden(input, None)?;
        Ok(self.logits_rows(cache.hidden.view()))
    }

    /// Log-probability of the last position's next token distribution.
    pub fn last_log_probs(&self, input: &ModelInput<T>) -> Result<Array1<T>> {
        let cache = self.forward_hidden(input, None)?;
        let n = cache.hidden.nrows();
        let logits = self.logits_rows(cache.hidden.slice(s![n - 1..n, ..]));
        Ok(real::log_softmax(logits.row(0)))
    }

    /// Sum of `log p(continuation | context)` in eval mode.
    pub fn sequence_log_prob(&self, context: &ModelInput<T>, continuation: &TokenSequence) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        if context.positions() == 0 {
            return Err(Error::Input("context must hold at least one position".into()));
        }
        let mut full = context.clone();
        full.tokens.extend_from_slice(&continuation.ids);
        full.loss_mask = vec![false; full.positions()];
        let logits = self.next_token_logits(&full)?;
        let start = context.positions() - 1;
        let mut total = 0.0;
        for (j, &t) in continuation.ids.iter().enumerate() {
            let lp = real::log_softmax(logits.row(start + j));
            total += lp[t as usize].f64();
        }
        Ok(total)
    }

    /// Summed cross-entropy over masked positions and their count, eval
    /// mode, no gradients.
    pub fn masked_loss(&self, input: &ModelInput<T>) -> Result<(f64, usize)> {
        let targets: Vec<TokenId> = (0..input.positions()).map(|i| input.token_at(i).unwrap_or(0)).collect();
        self.masked_loss_targets(input, &targets)
    }

    /// Like [`masked_loss`](Self::masked_loss) but with the target of every
    /// position given explicitly; targets off the mask are never read.
    pub fn masked_loss_targets(&self, input: &ModelInput<T>, targets: &[TokenId]) -> Result<(f64, usize)> {
        if targets.len() != input.positions() {
            return Err(Error::Dimension(format!(
                "{} targets for {} positions",
                targets.len(),
                input.positions()
            )));
        }
        let cache = self.forward_hidden(input, None)?;
        let rows: Vec<usize> = (1..input.positions())
            .filter(|&i| input.loss_mask[i])
            .map(|i| i - 1)
            .collect();
        let logits = self.logits_rows(cache.hidden.select(Axis(0), &rows).view());
        let mut loss = 0.0;
        for (r, &row) in rows.iter().enumerate() {
            let target = targets[row + 1] as usize;
            if target >= logits.ncols() {
                return Err(Error::Input(format!("target {target} is outside the vocabulary")));
            }
            loss += (real::log_sum_exp(logits.row(r)) - logits[[r, target]]).f64();
        }
        Ok((loss, rows.len()))
    }

    /// Summed cross-entropy over masked positions plus gradients of that
    /// sum. Returns `(loss_sum, n_targets, grads, d_prefix)`.
    pub fn loss_and_grad(
        &self,
        input: &ModelInput<T>,
        rng: Option<&mut StreamRng>,
    ) -> Result<(f64, usize, LmTrainable<T>, Array2<T>)> {
        let cache = self.forward_hidden(input, rng)?;
        let rows: Vec<usize> = (1..input.positions())
            .filter(|&i| input.loss_mask[i])
            .map(|i| i - 1)
            .collect();
        let n = cache.hidden.nrows();
        let d = self.d_model();
        let sel = cache.hidden.select(Axis(0), &rows);
        let logits = self.logits_rows(sel.view());
        let mut dlogits = logits.clone();
        real::softmax_rows(&mut dlogits);
        let mut loss = 0.0;
        for (r, &row) in rows.iter().enumerate() {
            let target = input.token_at(row + 1).expect("masked positions are tokens") as usize;
            let lse = real::log_sum_exp(logits.row(r));
            loss += (lse - logits[[r, target]]).f64();
            dlogits[[r, target]] -= T::one();
        }
        let mut grads = self.trainable.zeros_like();
        let ls = self.label_start();
        grads.label_head = dlogits.slice(s![.., ls..]).t().dot(&sel);
        let dsel = dlogits.slice(s![.., ..ls]).dot(&self.base.head)
            + dlogits.slice(s![.., ls..]).dot(&self.trainable.label_head);
        let mut dhidden = Array2::zeros((n, d));
        for (r, &row) in rows.iter().enumerate() {
            dhidden.row_mut(row).assign(&dsel.row(r));
        }
        let d_prefix = self.backward(&cache, dhidden.view(), &mut grads);
        Ok((loss, rows.len(), grads, d_prefix))
    }

    /// Backpropagates `d hidden` through the network. Accumulates into
    /// `grads` and returns the gradient with respect to the prefix vectors.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dhidden: ArrayView2<T>,
        grads: &mut LmTrainable<T>,
    ) -> Array2<T> {
        let heads = self.config.n_heads;
        let hd = self.d_model() / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut dx = layer_norm_backward(dhidden, &cache.lnf, &self.base.lnf_g);
        for (idx, c) in cache.blocks.iter().enumerate().rev() {
            let w = &self.base.blocks[idx];
            let ad = &self.trainable.blocks[idx];
            // feed-forward branch
            let da = dx.dot(&w.w2);
            let mut du = da;
            du.zip_mut_with(&c.u, |g, &u| *g *= gelu_grad(u));
            let dh2 = du.dot(&w.w1);
            dx += &layer_norm_backward(dh2.view(), &c.ln2, &w.ln2_g);
            // attention branch
            let datt = dx.dot(&w.wo);
            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let p = &c.probs[h];
                let dout = datt.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&dout));
                let dp = dout.dot(&c.v.slice(cols).t());
                let mut dsc = &dp * p;
                for (mut row, prow) in dsc.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                    let sum = row.sum();
                    row.zip_mut_with(&prow, |g, &pv| *g = *g - pv * sum);
                }
                dsc.mapv_inplace(|g| g * scale);
                dq.slice_mut(cols).assign(&dsc.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&dsc.t().dot(&c.q.slice(cols)));
            }
            let mut dh1 = dq.dot(&w.wq) + dk.dot(&w.wk) + dv.dot(&w.wv);
            if let (Some(lq), Some(lv)) = (&c.lq, &c.lv) {
                let g = &mut grads.blocks[idx];
                dh1 += &ad.q.backward_rows(lq, dq.view(), &mut g.q);
                dh1 += &ad.v.backward_rows(lv, dv.view(), &mut g.v);
            }
            dx += &layer_norm_backward(dh1.view(), &c.ln1, &w.ln1_g);
        }
        let ls = self.label_start();
        for (i, &t) in cache.tokens.iter().enumerate() {
            let t = t as usize;
            if t >= ls {
                let mut row = grads.label_embed.row_mut(t - ls);
                row += &dx.row(cache.n_prefix + i);
            }
        }
        dx.slice(s![..cache.n_prefix, ..]).to_owned()
    }
}

/// A fixed model input to which generated tokens are appended.
pub struct LmContext<'a, T> {
    pub model: &'a CausalLm<T>,
    pub input: ModelInput<T>,
}

impl<T: Real> NextTokenModel for LmContext<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn eos(&self) -> TokenId {
        self.model.eos()
    }

    /// `prefix` continues the stored tokens.
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut input = self.input.clone();
        input.tokens.extend_from_slice(prefix);
        input.loss_mask.resize(input.positions(), false);
        let row = self.model.last_log_probs(&input)?;
        Ok(row.iter().map(|v| v.f64()).collect())
    }
}
