//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every operation the model needs is a node; gradients are accumulated in
//! one reverse sweep. Only parameters registered through [`Graph::param`]
//! that are not frozen are reported back as trainable gradients.

use crate::params::Param;
use ndarray::{s, Array2, Axis, Zip};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Array2<f64>,
    },
    Mse {
        pred: Var,
        rows: Vec<usize>,
        diff: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise layer norm returning `(y, xhat, inv_std)`.
pub fn layer_norm(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    bias: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv.push(is);
    }
    let y = &xhat * &gain.row(0) + bias.row(0);
    (y, xhat, inv)
}

/// Softmax over each row `i`, restricted to columns `j <= i`.
pub fn causal_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut y = Array2::zeros(x.raw_dim());
    for (i, (xr, mut yr)) in x.rows().into_iter().zip(y.rows_mut()).enumerate() {
        let lim = (i + 1).min(x.ncols());
        let max = xr
            .slice(s![..lim])
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for j in 0..lim {
            let e = (xr[j] - max).exp();
            yr[j] = e;
            sum += e;
        }
        for j in 0..lim {
            yr[j] /= sum;
        }
    }
    y
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, name: &str, p: &Param) -> Var {
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        if !p.frozen {
            self.params.push((name.to_owned(), v));
        }
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Broadcast a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn mul_const(&mut self, a: Var, m: Array2<f64>) -> Var {
        let v = self.value(a) * &m;
        self.push(v, Op::MulConst(a, m), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (y, xhat, inv_std) = layer_norm(self.value(x), self.value(gain), self.value(bias));
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let v = causal_softmax(self.value(a));
        self.push(v, Op::CausalSoftmax(a), &[a])
    }

    pub fn col_slice(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::ColSlice(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `i` of the result is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((idx.len(), src.ncols()));
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = j {
                v.row_mut(i).assign(&src.row(*j));
            }
        }
        self.push(v, Op::GatherRows(a, idx), &[a])
    }

    /// Assemble an `n x cols` matrix: row `i` of each part lands at its
    /// listed destination. Rows no part covers stay zero.
    pub fn scatter_rows(&mut self, n: usize, cols: usize, parts: Vec<(Var, Vec<usize>)>) -> Var {
        let mut v = Array2::zeros((n, cols));
        for (p, dest) in &parts {
            let src = self.value(*p);
            for (i, &d) in dest.iter().enumerate() {
                v.row_mut(d).assign(&src.row(i));
            }
        }
        let parents: Vec<Var> = parts.iter().map(|(p, _)| *p).collect();
        self.push(v, Op::ScatterRows(parts), &parents)
    }

    /// Mean cross-entropy over `(row, class)` pairs; 0 for an empty list.
    pub fn cross_entropy(&mut self, logits: Var, rows: Vec<(usize, usize)>) -> Var {
        let l = self.value(logits);
        let mut probs = Array2::zeros((rows.len(), l.ncols()));
        let mut total = 0.0;
        for (k, &(r, c)) in rows.iter().enumerate() {
            let row = l.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
            probs.row_mut(k).assign(&row.mapv(|v| (v - lse).exp()));
        }
        let mean = if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        };
        self.push(
            Array2::from_elem((1, 1), mean),
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared error over every listed row and column; 0 for an empty list.
    pub fn mse(&mut self, pred: Var, rows: Vec<usize>, targets: &Array2<f64>) -> Var {
        let p = self.value(pred);
        let mut diff = Array2::zeros((rows.len(), p.ncols()));
        for (k, &r) in rows.iter().enumerate() {
            diff.row_mut(k).assign(&(&p.row(r) - &targets.row(k)));
        }
        let denom = (rows.len() * p.ncols()) as f64;
        let mean = if rows.is_empty() {
            0.0
        } else {
            diff.iter().map(|d| d * d).sum::<f64>() / denom
        };
        self.push(
            Array2::from_elem((1, 1), mean),
            Op::Mse { pred, rows, diff },
            &[pred],
        )
    }

    /// Reverse sweep from a scalar node. Returns gradients of every trainable
    /// parameter registered on this graph, keyed by name.
    pub fn backward(&self, out: Var) -> BTreeMap<String, Array2<f64>> {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(Array2::ones(self.nodes[out.0].value.raw_dim()));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => *e += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    let sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, g);
                    acc(*row, sum);
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::MulConst(a, m) => acc(*a, g * m),
                Op::Gelu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gn = self.value(*gain).row(0).to_owned();
                    acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let n = g.ncols() as f64;
                    let mut dx = &g * &gn;
                    for ((mut row, xh), is) in
                        dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let sum = row.sum();
                        let dot = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &h| *d = is / n * (n * *d - sum - h * dot));
                    }
                    acc(*x, dx);
                }
                Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for (mut dr, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = dr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        Zip::from(&mut dr)
                            .and(&yr)
                            .for_each(|d, &y| *d = y * (*d - dot));
                    }
                    acc(*a, d);
                }
                Op::ColSlice(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    for (r, j) in idx.iter().enumerate() {
                        if let Some(j) = j {
                            let mut row = d.row_mut(*j);
                            row += &g.row(r);
                        }
                    }
                    acc(*a, d);
                }
                Op::ScatterRows(parts) => {
                    for (p, dest) in parts {
                        let mut d = Array2::zeros(self.value(*p).raw_dim());
                        for (r, &j) in dest.iter().enumerate() {
                            d.row_mut(r).assign(&g.row(j));
                        }
                        acc(*p, d);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    probs,
                } => {
                    let upstream = g[[0, 0]];
                    let mut d = Array2::zeros(self.value(*logits).raw_dim());
                    if !rows.is_empty() {
                        let w = upstream / rows.len() as f64;
                        for (k, &(r, c)) in rows.iter().enumerate() {
                            let mut row = d.row_mut(r);
                            row.scaled_add(w, &probs.row(k));
                            row[c] -= w;
                        }
                    }
                    acc(*logits, d);
                }
                Op::Mse { pred, rows, diff } => {
                    let upstream = g[[0, 0]];
                    let mut d = Array2::zeros(self.value(*pred).raw_dim());
                    if !rows.is_empty() {
                        let w = 2.0 * upstream / (rows.len() * diff.ncols()) as f64;
                        for (k, &r) in rows.iter().enumerate() {
                            d.row_mut(r).scaled_add(w, &diff.row(k));
                        }
                    }
                    acc(*pred, d);
                }
            }
        }

        let mut out_grads = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Array2::zeros(self.nodes[v.0].value.raw_dim()));
            match out_grads.get_mut(name) {
                Some(existing) => *existing += &g,
                None => {
                    out_grads.insert(name.clone(), g);
                }
            }
        }
        out_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of a scalar function of one parameter matrix.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, init: Array2<f64>) {
        let p = Param::trainable(init.clone());
        let mut g = Graph::new();
        let x = g.param("x", &p);
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = &grads["x"];
        let h = 1e-6;
        for idx in 0..init.len() {
            let eval = |delta: f64| {
                let mut v = init.clone();
                let (r, c) = (idx / init.ncols(), idx % init.ncols());
                v[[r, c]] += delta;
                let mut g = Graph::new();
                let x = g.param("x", &Param::trainable(v));
                let o = build(&mut g, x);
                g.scalar(o)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + a.abs().max(num.abs())),
                "idx {idx}: analytic {a} numeric {num}"
            );
        }
    }

    #[test]
    fn ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_mat(&mut rng, 3, 4);
        let t = rand_mat(&mut rng, 2, 4);
        let gain = rand_mat(&mut rng, 1, 4);
        let x0 = rand_mat(&mut rng, 5, 4);
        check(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul_t(x, wv);
                let gn = g.constant(gain.clone());
                let z = g.concat_cols(&[y, y]);
                let z = g.col_slice(z, 1, 4);
                let b = g.constant(Array2::zeros((1, 4)));
                let z = g.layer_norm(z, gn, b);
                let z = g.gelu(z);
                let z = g.gather_rows(z, vec![Some(4), None, Some(0), Some(4), Some(2)]);
                let sc = g.matmul_t(z, z);
                let sm = g.causal_softmax(sc);
                let sm = g.scale(sm, 3.0);
                let m = g.matmul(sm, z);
                let m = g.mul_const(m, Array2::from_elem((5, 4), 0.5));
                let m2 = g.scatter_rows(5, 4, vec![(m, vec![4, 3, 2, 1, 0])]);
                let s = g.add(m, m2);
                let bias = g.constant(Array2::from_elem((1, 4), 0.1));
                let s = g.add_row(s, bias);
                let ce = g.cross_entropy(s, vec![(0, 1), (3, 2), (4, 0)]);
                let ms = g.mse(s, vec![1, 2], &t);
                let ms = g.scale(ms, 0.7);
                g.add(ce, ms)
            },
            x0,
        );
    }

    #[test]
    fn layer_norm_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_mat(&mut rng, 3, 5);
        let t = rand_mat(&mut rng, 3, 5);
        check(
            |g, gain| {
                let xv = g.constant(x.clone());
                let b = g.constant(Array2::zeros((1, 5)));
                let y = g.layer_norm(xv, gain, b);
                g.mse(y, vec![0, 1, 2], &t)
            },
            rand_mat(&mut rng, 1, 5),
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let y = causal_softmax(&array![[1.0, 5.0, 2.0], [0.0, 0.0, 9.0], [1.0, 1.0, 1.0]]);
        assert_eq!(y[[0, 0]], 1.0);
        assert_eq!(y[[0, 1]], 0.0);
        assert_eq!(y[[1, 2]], 0.0);
        assert!((y[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((y.row(2).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", &Param::frozen(Array2::ones((2, 2))));
        let b = g.param("b", &Param::trainable(Array2::ones((2, 2))));
        let c = g.matmul(a, b);
        let l = g.mse(c, vec![0, 1], &Array2::zeros((2, 2)));
        let grads = g.backward(l);
        assert!(grads.contains_key("b"));
        assert!(!grads.contains_key("a"));
    }
}
