use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// A named weight matrix with a frozen flag. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub frozen: bool,
}

impl Param {
    pub fn trainable(value: Array2<f64>) -> Self {
        Self {
            value,
            frozen: false,
        }
    }

    pub fn frozen(value: Array2<f64>) -> Self {
        Self {
            value,
            frozen: true,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::trainable(Array2::zeros((rows, cols)))
    }

    pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        Self::trainable(Array2::from_shape_simple_fn((rows, cols), || {
            dist.sample(rng)
        }))
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite");
        Self::trainable(Array2::from_shape_simple_fn((rows, cols), || {
            dist.sample(rng)
        }))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Uniform traversal over named parameters. Names are dotted paths built
/// from `prefix`; traversal order is fixed.
pub trait VisitParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn collect_params<T: VisitParams + ?Sized>(t: &T) -> BTreeMap<String, Param> {
    let mut out = BTreeMap::new();
    t.visit("", &mut |name, p| {
        out.insert(name.to_owned(), p.clone());
    });
    out
}

pub fn set_frozen<T: VisitParams + ?Sized>(t: &mut T, frozen: bool) {
    t.visit_mut("", &mut |_, p| p.frozen = frozen);
}

/// SHA-256 over every parameter selected by `select`, covering names,
/// shapes and the exact bit patterns of the values.
pub fn digest_where<T: VisitParams + ?Sized>(t: &T, select: impl Fn(&Param) -> bool) -> String {
    let mut params = Vec::new();
    t.visit("", &mut |name, p| {
        if select(p) {
            params.push((name.to_owned(), p.clone()));
        }
    });
    params.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        h.update([0u8]);
        let (r, c) = p.shape();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        for v in p.value.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn frozen_digest<T: VisitParams + ?Sized>(t: &T) -> String {
    digest_where(t, |p| p.frozen)
}

pub fn count_params<T: VisitParams + ?Sized>(t: &T, trainable_only: bool) -> usize {
    let mut n = 0;
    t.visit("", &mut |_, p| {
        if !trainable_only || !p.frozen {
            n += p.len();
        }
    });
    n
}
