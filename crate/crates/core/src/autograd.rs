//! A small reverse-mode differentiation tape over 2-D matrices.
//!
//! Each operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because inputs always precede their consumers.
//!
//! Parameters are recorded by reference, so building a graph never copies
//! weights.

use std::borrow::Cow;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Matrix, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Softmax(Var),
    Concat(Vec<Var>),
    Gather { table: Var, ids: Vec<u32> },
    Mask { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Matrix<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// Differentiable leaf borrowed from the caller.
    pub fn param(&mut self, value: &'p Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Differentiable owned leaf.
    pub fn param_owned(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'p Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.derived(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Add a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        Ok(self.derived(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.derived(out, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, xv.cols()) || b.shape() != (1, xv.cols()) {
            return Err(Error::Shape(format!(
                "layer_norm: {:?} with gain {:?} bias {:?}",
                xv.shape(),
                g.shape(),
                b.shape()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let (xhat, _) = normalize_row(xv.row(r), eps);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xhat[c] * g.data()[c] + b.data()[c];
            }
        }
        Ok(self.derived(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            },
            &[x, gain, bias],
        ))
    }

    /// Row-wise softmax. Entries whose `allowed` flag is false receive zero
    /// probability; a row with nothing allowed is an error.
    pub fn softmax(&mut self, x: Var, allowed: Option<Rc<[bool]>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(a) = &allowed {
            if a.len() != xv.len() {
                return Err(Error::Shape(format!(
                    "softmax mask of {} entries for {:?}",
                    a.len(),
                    xv.shape()
                )));
            }
        }
        let cols = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let row_mask = allowed.as_deref().map(|a| &a[r * cols..(r + 1) * cols]);
            if !softmax_row(xv.row(r), row_mask, out.row_mut(r)) {
                return Err(Error::EmptyAttention { row: r });
            }
        }
        Ok(self.derived(out, Op::Softmax(x), &[x]))
    }

    /// Concatenate along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.derived(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Select rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= t.rows() {
                return Err(Error::InvalidArgument(format!(
                    "id {id} outside embedding table of {} rows",
                    t.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        Ok(self.derived(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::Shape("mask length differs from input".into()));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data)?;
        Ok(self.derived(out, Op::Mask { x, mask }, &[x]))
    }

    /// Summed negative log-likelihood `-Σ log softmax(row_i)[target_i]` over
    /// rows whose target is `Some`. Produces a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {} logit rows",
                targets.len(),
                lv.rows()
            )));
        }
        let mut total = T::zero();
        let mut probs = vec![T::zero(); lv.cols()];
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t as usize >= lv.cols() {
                return Err(Error::InvalidArgument(format!(
                    "target {t} outside {} classes",
                    lv.cols()
                )));
            }
            softmax_row(lv.row(r), None, &mut probs);
            total = total - log_prob_at(lv.row(r), t as usize, &probs);
        }
        let out = Matrix::filled(1, 1, total);
        Ok(self.derived(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Gradients of the `1 × 1` node `root`, scaled by `seed`.
    pub fn backward(&self, root: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, seed));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Matrix<T>,
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b))?);
                acc(*b, self.value(*a).t_matmul(g)?);
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.matmul(self.value(*b))?);
                acc(*b, g.t_matmul(self.value(*a))?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                acc(*bias, g.sum_rows());
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*a, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.shape();
                let n = T::from_usize(cols).unwrap();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let (xhat, rstd) = normalize_row(xv.row(r), *eps);
                    let dy = g.row(r);
                    let dxhat: Vec<T> = dy.iter().zip(gv.data()).map(|(&d, &gn)| d * gn).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<T>() / n;
                    for c in 0..cols {
                        dx.set(r, c, rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx));
                        let cur = dgain.get(0, c);
                        dgain.set(0, c, cur + dy[c] * xhat[c]);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, g.sum_rows());
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.shape();
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let p = out.row(r);
                    let dp = g.row(r);
                    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = p[c] * (dp[c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut part = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        part.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    acc(p, part);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                        *d = *d + gv;
                    }
                }
                acc(*table, dt);
            }
            Op::Mask { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let seed = g.get(0, 0);
                let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = dl.row_mut(r);
                    softmax_row(lv.row(r), None, row);
                    row[t as usize] = row[t as usize] - T::one();
                    for d in row.iter_mut() {
                        *d = *d * seed;
                    }
                }
                acc(*logits, dl);
            }
        }
        Ok(())
    }
}

/// `(x - mean) / sqrt(var + eps)` and the reciprocal standard deviation.
fn normalize_row<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    (row.iter().map(|&x| (x - mean) * rstd).collect(), rstd)
}

/// `log p[t]`, falling back to a log-sum-exp form when `p[t]` underflows.
fn log_prob_at<T: Scalar>(row: &[T], t: usize, probs: &[T]) -> T {
    if probs[t] > T::min_positive_value() {
        return probs[t].ln();
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
    row[t] - lse
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Compare backward against central differences for a scalar graph
    /// built by `f` from a list of parameter matrices.
    fn check<F>(params: Vec<Matrix<f64>>, f: F)
    where
        F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root, 1.0).unwrap();

        let eval = |ps: &[Matrix<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p)).collect();
            let r = f(&mut t, &vs);
            t.value(r).get(0, 0)
        };
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get(vars[pi]).cloned().unwrap_or(Matrix::zeros(p.rows(), p.cols()));
            for k in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {pi} coord {k}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_transpose_products() {
        let mut rng = SplitMix64::new(1);
        let ps = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 5, 2)];
        check(ps, |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap();
            let s = t.matmul_t(ab, v[2]).unwrap();
            let p = t.softmax(s, None).unwrap();
            t.cross_entropy(p, &[Some(1), Some(4), None]).unwrap()
        });
    }

    #[test]
    fn layer_norm_relu_bias_concat() {
        let mut rng = SplitMix64::new(2);
        let ps = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 1, 4),
            random(&mut rng, 1, 4),
            random(&mut rng, 3, 2),
            random(&mut rng, 1, 6),
        ];
        check(ps, |t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let r = t.relu(ln);
            let c = t.concat_cols(&[r, v[3]]).unwrap();
            let b = t.add_row(c, v[4]).unwrap();
            let s = t.scale(b, 1.5);
            let s = t.add(s, c).unwrap();
            t.cross_entropy(s, &[Some(0), Some(5), Some(2)]).unwrap()
        });
    }

    #[test]
    fn masked_softmax_gather_and_mask() {
        let mut rng = SplitMix64::new(3);
        let ps = vec![random(&mut rng, 5, 3), random(&mut rng, 3, 3)];
        check(ps, |t, v| {
            let e = t.gather(v[0], &[4, 1, 4]).unwrap();
            let e = t.mask(e, vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
            let s = t.matmul_t(e, v[1]).unwrap();
            let allowed: Rc<[bool]> = vec![true, false, false, true, true, false, true, true, true].into();
            let p = t.softmax(s, Some(allowed)).unwrap();
            let y = t.matmul(p, v[1]).unwrap();
            t.cross_entropy(y, &[Some(2), Some(0), Some(1)]).unwrap()
        });
    }

    #[test]
    fn unused_rows_get_exactly_zero_and_seed_scales() {
        let table = Matrix::<f64>::from_rows(&[&[0.1, 0.2], &[0.3, -0.4], &[0.5, 0.6]]);
        let mut tape = Tape::new();
        let t = tape.param(&table);
        let e = tape.gather(t, &[0, 0]).unwrap();
        let loss = tape.cross_entropy(e, &[Some(1), Some(0)]).unwrap();
        let g1 = tape.backward(loss, 1.0).unwrap();
        let g2 = tape.backward(loss, 2.0).unwrap();
        let d1 = g1.get(t).unwrap();
        assert_eq!(d1.row(1), &[0.0, 0.0]);
        assert_eq!(d1.row(2), &[0.0, 0.0]);
        for (a, b) in d1.data().iter().zip(g2.get(t).unwrap().data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Matrix::zeros(2, 2));
        let err = tape.softmax(x, Some(vec![true, false, false, false].into())).unwrap_err();
        assert!(matches!(err, Error::EmptyAttention { row: 1 }));
    }
}
