//! Named traversal over trainable tensors, used by the optimizer, gradient
//! checks and checkpointing.

use ndarray::{Array, Dimension};

use crate::real::Real;

pub type Visitor<'a, T> = dyn FnMut(&str, &[usize], &[T]) + 'a;
pub type VisitorMut<'a, T> = dyn FnMut(&str, &mut [T]) + 'a;

pub trait Parameters<T: Real> {
    /// Calls `f(name, shape, values)` for every tensor in a fixed order.
    fn visit(&self, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, f: &mut VisitorMut<'_, T>);

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, _| out.push(name.to_string()));
        out
    }

    fn fill(&mut self, value: T) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = value));
    }

    /// `self += scale * other`, element for element in traversal order.
    fn add_scaled(&mut self, other: &dyn Parameters<T>, scale: T) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            for (x, g) in v.iter_mut().zip(&flat[offset..]) {
                *x += *g * scale;
            }
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "parameter layouts differ");
    }

    /// Overwrite every value from a flat vector in traversal order.
    fn assign(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "parameter layouts differ");
    }
}

pub(crate) fn emit<T: Real, D: Dimension>(f: &mut Visitor<'_, T>, name: &str, a: &Array<T, D>) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn emit_mut<T: Real, D: Dimension>(f: &mut VisitorMut<'_, T>, name: &str, a: &mut Array<T, D>) {
    f(name, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn nest<T: Real>(f: &mut Visitor<'_, T>, prefix: &str, inner: &dyn Parameters<T>) {
    inner.visit(&mut |name, shape, v| f(&format!("{prefix}.{name}"), shape, v));
}

pub(crate) fn nest_mut<T: Real>(f: &mut VisitorMut<'_, T>, prefix: &str, inner: &mut dyn Parameters<T>) {
    inner.visit_mut(&mut |name, v| f(&format!("{prefix}.{name}"), v));
}
