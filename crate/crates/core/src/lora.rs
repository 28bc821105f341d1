//! Low-rank adapters over frozen linear maps.
//!
//! An adapter adds `(alpha / r) · B · A` to a frozen `m × n` weight `W`, with
//! `A: r × n` drawn from a seeded Gaussian and `B: m × r` starting at zero, so
//! the adapted map equals `W` until training moves `B`. Dropout is applied to
//! the adapter input only while training.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{emit, emit_mut, Parameters, Visitor, VisitorMut};
use crate::real::{self, Real};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        // Toy layer widths cannot host the rank-64 setting of large models.
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.10,
        }
    }
}

impl LoraConfig {
    /// Rank 64, for backbones wide enough to host it.
    pub fn large_model() -> Self {
        LoraConfig {
            rank: 64,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    /// `r × n`
    pub a: Array2<T>,
    /// `m × r`
    pub b: Array2<T>,
    pub alpha: f64,
    pub dropout_p: f64,
    /// Name of the frozen weight this adapter targets.
    pub target: String,
}

pub fn init_adapter<T: Real, R: Rng + ?Sized>(
    m: usize,
    n: usize,
    r: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LoraAdapter<T>> {
    if r == 0 || r > m.min(n) {
        return Err(Error::Config(format!(
            "LoRA rank {r} outside 1..={} for a {m}x{n} weight",
            m.min(n)
        )));
    }
    if !alpha.is_finite() {
        return Err(Error::Config("LoRA alpha must be finite".into()));
    }
    Ok(LoraAdapter {
        a: real::gaussian(r, n, INIT_STD, rng),
        b: Array2::zeros((m, r)),
        alpha,
        dropout_p: 0.0,
        target: String::new(),
    })
}

/// Activations kept from a row-batched adapter pass.
#[derive(Debug, Clone)]
pub struct LoraCache<T> {
    /// Adapter input after dropout, `rows × n`.
    input: Array2<T>,
    mask: Option<Array2<T>>,
    /// `input · Aᵀ`, `rows × r`.
    low: Array2<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_target(mut self, target: impl Into<String>) -> Self {
        self.target = target.into();
        self
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn scale(&self) -> T {
        T::of(self.alpha / self.rank() as f64)
    }

    /// The full-rank update `(alpha / r) · B · A`.
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scale()
    }

    fn check_weight(&self, w: ArrayView2<T>) -> Result<()> {
        if w.dim() != (self.out_dim(), self.in_dim()) {
            return Err(Error::Dimension(format!(
                "weight is {:?}, adapter expects {}x{}",
                w.dim(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Adapter contribution for a batch of rows. `rng` enables dropout.
    pub fn forward_rows<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<T>,
        rng: Option<&mut R>,
    ) -> (Array2<T>, LoraCache<T>) {
        let mask = match rng {
            Some(rng) if self.dropout_p > 0.0 => Some(real::dropout_mask(
                x.nrows(),
                x.ncols(),
                self.dropout_p,
                rng,
            )),
            _ => None,
        };
        let input = match &mask {
            Some(m) => &x * m,
            None => x.to_owned(),
        };
        let low = real::linear(input.view(), self.a.view());
        let out = real::linear(low.view(), self.b.view()) * self.scale();
        (out, LoraCache { input, mask, low })
    }

    /// Accumulates `dA`, `dB` into `grad` and returns the gradient with
    /// respect to the adapter input rows.
    pub fn backward_rows(
        &self,
        cache: &LoraCache<T>,
        d_out: ArrayView2<T>,
        grad: &mut LoraAdapter<T>,
    ) -> Array2<T> {
        let s = self.scale();
        // dB = s · dYᵀ · low
        grad.b.scaled_add(s, &d_out.t().dot(&cache.low));
        let d_low = d_out.dot(&self.b) * s;
        grad.a.scaled_add(T::one(), &d_low.t().dot(&cache.input));
        let d_input = d_low.dot(&self.a);
        match &cache.mask {
            Some(m) => d_input * m,
            None => d_input,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LoraAdapter {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
            alpha: self.alpha,
            dropout_p: self.dropout_p,
            target: self.target.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: self.a.mapv(|v| U::of(v.f64())),
            b: self.b.mapv(|v| U::of(v.f64())),
            alpha: self.alpha,
            dropout_p: self.dropout_p,
            target: self.target.clone(),
        }
    }
}

/// `W·x + (alpha/r)·B·(A·drop(x))`; `W` is never modified.
pub fn adapted_forward<T: Real, R: Rng + ?Sized>(
    w: ArrayView2<T>,
    adapter: &LoraAdapter<T>,
    x: ArrayView1<T>,
    training: bool,
    rng: &mut R,
) -> Result<Array1<T>> {
    adapter.check_weight(w)?;
    if x.len() != adapter.in_dim() {
        return Err(Error::Dimension(format!(
            "input has {} entries, weight expects {}",
            x.len(),
            adapter.in_dim()
        )));
    }
    let rows = x.insert_axis(ndarray::Axis(0));
    let (update, _) = adapter.forward_rows(rows, training.then_some(rng));
    Ok(w.dot(&x) + update.row(0))
}

/// Fold the adapter into the frozen weight: `W' = W + (alpha/r)·B·A`.
pub fn merge<T: Real>(w: ArrayView2<T>, adapter: &LoraAdapter<T>) -> Result<Array2<T>> {
    adapter.check_weight(w)?;
    Ok(&w + &adapter.delta())
}

impl<T: Real> Parameters<T> for LoraAdapter<T> {
    fn visit(&self, f: &mut Visitor<'_, T>) {
        emit(f, "A", &self.a);
        emit(f, "B", &self.b);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>) {
        emit_mut(f, "A", &mut self.a);
        emit_mut(f, "B", &mut self.b);
    }
}
