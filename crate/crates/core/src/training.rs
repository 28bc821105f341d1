//! Optimisation loop: decoupled weight decay Adam, linear warmup and decay,
//! gradient accumulation to an effective batch, and early stopping on the
//! development loss.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{make_batches, BatchConfig};
use crate::error::{Error, Result};
use crate::fusion::{DecoderMode, EncodedExample, FusionModel};
use crate::params::Parameters;
use crate::real::all_finite;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub warmup_frac: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub decoder_mode: DecoderMode,
    /// Adapter and projector dropout during training.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            weight_decay: 1e-4,
            eps: 1e-8,
            beta1: 0.99,
            beta2: 0.999,
            effective_batch: 32,
            micro_batch: 8,
            warmup_frac: 0.05,
            patience: 5,
            max_epochs: 30,
            seed: 0,
            decoder_mode: DecoderMode::OneBest,
            dropout: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.effective_batch % self.micro_batch != 0 {
            return fail(format!(
                "effective_batch {} is not divisible by micro_batch {}",
                self.effective_batch, self.micro_batch
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!("warmup_frac {} must lie in (0, 1)", self.warmup_frac));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) || !(self.weight_decay >= 0.0) {
            return fail("learning rate and weight decay must be non-negative".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        // guard against 0.05 * n landing a hair above an integer
        ((self.warmup_frac * total_steps as f64) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.effective_batch)
    }
}

/// Linear ramp from 0 to `lr0` over the warmup, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at_step(config: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Config(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    let warmup = config.warmup_steps(total_steps);
    let lr = if step >= total_steps {
        0.0
    } else if step < warmup {
        config.lr0 * step as f64 / warmup as f64
    } else {
        config.lr0 * (total_steps - step) as f64 / (total_steps - warmup) as f64
    };
    Ok(lr)
}

/// Adam moments over a flat parameter vector with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// `θ ← θ - lr·wd·θ`, then `θ ← θ - lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut dyn Parameters<f32>, grads: &[f32], lr: f64, cfg: &TrainConfig) {
        assert_eq!(grads.len(), self.m.len(), "gradient length differs from optimizer state");
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = (lr * cfg.weight_decay) as f32;
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, values| {
            for (j, theta) in values.iter_mut().enumerate() {
                let i = offset + j;
                let g = f64::from(grads[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                *theta -= decay * *theta;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                *theta -= update as f32;
            }
            offset += values.len();
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_dev_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub optimizer: AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub patience: usize,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: FusionModel<f32>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub log: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Dev-loss source; the default evaluates the label loss on the dev split.
pub type DevScorer<'a> = dyn FnMut(usize, &FusionModel<f32>) -> Result<f64> + 'a;

#[derive(Default)]
pub struct TrainHooks<'a> {
    pub dev_scorer: Option<Box<DevScorer<'a>>>,
    /// Directory for `train_log.jsonl`, `best.ckpt`, `last.ckpt` and the
    /// `best` marker.
    pub out_dir: Option<PathBuf>,
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Data(format!("log record: {e}")))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One optimizer update over `batch`, accumulated micro-batch by
/// micro-batch. Returns the mean loss of the batch.
pub fn train_step(
    model: &mut FusionModel<f32>,
    optimizer: &mut AdamW,
    batch: &[EncodedExample],
    dropout_seeds: Option<&[u64]>,
    lr: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let mut total = model.zero_grads();
    let mut loss = 0.0;
    let mut count = 0;
    for (c, chunk) in batch.chunks(config.micro_batch).enumerate() {
        let seeds = dropout_seeds.map(|s| &s[c * config.micro_batch..c * config.micro_batch + chunk.len()]);
        let (l, n, g) = model.batch_grad(chunk, seeds)?;
        loss += l;
        count += n;
        total.add(&g);
    }
    if count == 0 {
        return Err(Error::Input("batch has no label targets".into()));
    }
    let mut flat = total.flatten();
    let scale = 1.0 / count as f32;
    flat.iter_mut().for_each(|g| *g *= scale);
    if !loss.is_finite() || !all_finite(&flat) {
        return Err(Error::Numeric(format!(
            "non-finite loss or gradient at optimizer step {} (loss sum {loss})",
            optimizer.t + 1
        )));
    }
    optimizer.step(model, &flat, lr, config);
    Ok(loss / count as f64)
}

pub fn train(
    model: &mut FusionModel<f32>,
    train_set: &[EncodedExample],
    dev_set: &[EncodedExample],
    config: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Input("training needs non-empty train and dev splits".into()));
    }
    let TrainHooks {
        mut dev_scorer,
        out_dir,
    } = hooks;
    let log_path = out_dir.as_ref().map(|d| d.join("train_log.jsonl"));
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        if let Some(p) = &log_path {
            if p.exists() {
                std::fs::remove_file(p).map_err(|e| Error::io(format!("resetting {}", p.display()), e))?;
            }
        }
    }

    let steps_per_epoch = config.steps_per_epoch(train_set.len());
    let total_steps = steps_per_epoch * config.max_epochs;
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        best_dev_loss: f64::INFINITY,
        best_epoch: 0,
        epochs_since_improvement: 0,
        optimizer: AdamW::new(model.num_params()),
    };
    let mut best = model.clone();
    let mut log = Vec::new();
    let batching = BatchConfig {
        batch_size: config.effective_batch,
        max_len: model.max_len(),
        pad: model.vocab.pad(),
        lab: model.vocab.lab(),
    };

    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        let batches = make_batches(train_set, &batching, config.seed, epoch)?;
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let seeds: Vec<u64> = (0..batch.examples.len())
                .map(|k| derive_seed(config.seed, "dropout", &[epoch as u64, b as u64, k as u64]))
                .collect();
            lr = lr_at_step(config, state.step + 1, total_steps)?;
            let seeds = config.dropout.then_some(&seeds[..]);
            epoch_loss += train_step(model, &mut state.optimizer, &batch.examples, seeds, lr, config)?;
            state.step += 1;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;
        let dev_loss = match dev_scorer.as_mut() {
            Some(f) => f(epoch, model)?,
            None => model.label_loss(dev_set)?,
        };
        if !dev_loss.is_finite() {
            return Err(Error::Numeric(format!("dev loss is {dev_loss} after epoch {epoch}")));
        }
        let improved = dev_loss < state.best_dev_loss;
        if improved {
            state.best_dev_loss = dev_loss;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            best = model.clone();
        } else {
            state.epochs_since_improvement += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            lr,
            patience: state.epochs_since_improvement,
            best: improved,
        };
        if let Some(dir) = &out_dir {
            append_log(log_path.as_ref().expect("set with out_dir"), &record)?;
            if improved {
                checkpoint::save(model, &dir.join("best.ckpt"))?;
                let marker = serde_json::json!({"checkpoint": "best.ckpt", "epoch": epoch, "dev_loss": dev_loss});
                checkpoint::write_atomic(&dir.join("best"), format!("{marker}\n").as_bytes())?;
            }
        }
        log.push(record);
        if state.epochs_since_improvement >= config.patience {
            break;
        }
    }
    if let Some(dir) = &out_dir {
        checkpoint::save(model, &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch: state.best_epoch,
        best_dev_loss: state.best_dev_loss,
        log,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.warmup_steps(1000), 50);
        assert!((lr_at_step(&cfg, 25, 1000).unwrap() - 1e-4).abs() < 1e-12);
        assert_eq!(lr_at_step(&cfg, 50, 1000).unwrap(), 2e-4);
        assert_eq!(lr_at_step(&cfg, 1000, 1000).unwrap(), 0.0);
        assert_eq!(lr_at_step(&cfg, 0, 1000).unwrap(), 0.0);
        // halfway through the decay
        assert!((lr_at_step(&cfg, 525, 1000).unwrap() - 1e-4).abs() < 1e-12);
        assert!(lr_at_step(&cfg, 1001, 1000).is_err());
        assert!(lr_at_step(&cfg, 0, 0).is_err());
        assert_eq!(cfg.warmup_steps(60), 3);
        assert_eq!(cfg.warmup_steps(1), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.micro_batch = 5;
        assert!(cfg.validate().is_err());
        cfg.micro_batch = 8;
        cfg.warmup_frac = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient: only the decay term moves the parameter
        struct One(Vec<f32>);
        impl Parameters<f32> for One {
            fn visit(&self, f: &mut crate::params::Visitor<'_, f32>) {
                f("x", &[1], &self.0);
            }
            fn visit_mut(&mut self, f: &mut crate::params::VisitorMut<'_, f32>) {
                f("x", &mut self.0);
            }
        }
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut p = One(vec![2.0]);
        let mut opt = AdamW::new(1);
        opt.step(&mut p, &[0.0], 0.1, &cfg);
        assert!((p.0[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-7);
        assert_eq!(opt.m, vec![0.0]);

        // first step with a gradient moves by lr regardless of its magnitude
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = One(vec![1.0]);
        let mut opt = AdamW::new(1);
        opt.step(&mut p, &[3.0], 0.01, &cfg);
        assert!((p.0[0] - 0.99).abs() < 1e-6);
    }
}
