//! Scaled dot-product and multi-head attention.
//!
//! The tape-level functions here are what the Transformer layers use; the
//! free functions [`scaled_dot_attention`] and [`multi_head`] wrap them for
//! direct evaluation on plain matrices.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

/// Which keys each query may attend to (`true` = visible).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask of {} flags for {rows}x{cols}",
                allowed.len()
            )));
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Every query sees exactly the keys flagged in `key_visible`.
    pub fn keys(rows: usize, key_visible: &[bool]) -> Self {
        let cols = key_visible.len();
        let allowed = (0..rows).flat_map(|_| key_visible.iter().copied()).collect();
        Self { rows, cols, allowed }
    }

    /// Query `i` sees visible keys `j <= i`.
    pub fn causal(key_visible: &[bool]) -> Self {
        let n = key_visible.len();
        let allowed = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| j <= i && key_visible[j])
            .collect();
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub(crate) fn to_shared(&self) -> Rc<[bool]> {
        self.allowed.clone().into()
    }
}

/// Output of [`scaled_dot_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T: Scalar> {
    pub output: Matrix<T>,
    pub weights: Matrix<T>,
}

/// `softmax(q kᵀ / √d_k) v` on the tape; returns `(output, weights)`.
pub(crate) fn attend<T: Scalar>(
    tape: &mut Tape<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Rc<[bool]>>,
) -> Result<(Var, Var)> {
    let d_k = tape.value(q).cols();
    if tape.value(k).rows() != tape.value(v).rows() {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            tape.value(k).rows(),
            tape.value(v).rows()
        )));
    }
    let scores = tape.matmul_t(q, k)?;
    let scale = T::one() / T::from_usize(d_k).unwrap().sqrt();
    let scaled = tape.scale(scores, scale);
    let weights = tape.softmax(scaled, mask)?;
    let output = tape.matmul(weights, v)?;
    Ok((output, weights))
}

/// Per-head projection handles on a tape.
pub(crate) struct HeadVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

/// `Concat(head_1..head_h) W^O` with `head_i = attend(x_q W_i^Q, x_kv W_i^K, x_kv W_i^V)`.
pub(crate) fn multi_head_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x_q: Var,
    x_kv: Var,
    mask: Option<Rc<[bool]>>,
    heads: &HeadVars,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.query.len());
    for h in 0..heads.query.len() {
        let q = tape.matmul(x_q, heads.query[h])?;
        let k = tape.matmul(x_kv, heads.key[h])?;
        let v = tape.matmul(x_kv, heads.value[h])?;
        let (out, _) = attend(tape, q, k, v, mask.clone())?;
        outs.push(out);
    }
    let concat = tape.concat_cols(&outs)?;
    tape.matmul(concat, heads.output)
}

/// Scaled dot-product attention over plain matrices.
///
/// `q` is `n_q × d_k`, `k` is `n_k × d_k`, `v` is `n_k × d_v`; the mask, if
/// given, is `n_q × n_k`. A query row with no visible key is an error.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: Option<&AttentionMask>,
) -> Result<Attention<T>> {
    if let Some(m) = mask {
        if m.shape() != (q.rows(), k.rows()) {
            return Err(Error::Shape(format!(
                "mask {:?} for {} queries and {} keys",
                m.shape(),
                q.rows(),
                k.rows()
            )));
        }
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant_ref(q), tape.constant_ref(k), tape.constant_ref(v));
    let (out, weights) = attend(&mut tape, qv, kv, vv, mask.map(AttentionMask::to_shared))?;
    Ok(Attention {
        output: tape.value(out).clone(),
        weights: tape.value(weights).clone(),
    })
}

/// Projection matrices for one multi-head attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights<T: Scalar> {
    /// `h` matrices of `d_model × d_k`.
    pub query: Vec<Matrix<T>>,
    /// `h` matrices of `d_model × d_k`.
    pub key: Vec<Matrix<T>>,
    /// `h` matrices of `d_model × d_v`.
    pub value: Vec<Matrix<T>>,
    /// `h·d_v × d_model`.
    pub output: Matrix<T>,
}

impl<T: Scalar> MultiHeadWeights<T> {
    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

/// Multi-head attention over plain matrices; returns `n_q × d_model`.
pub fn multi_head<T: Scalar>(
    x_q: &Matrix<T>,
    x_k: &Matrix<T>,
    x_v: &Matrix<T>,
    mask: Option<&AttentionMask>,
    weights: &MultiHeadWeights<T>,
) -> Result<Matrix<T>> {
    let h = weights.heads();
    if h == 0 || weights.key.len() != h || weights.value.len() != h {
        return Err(Error::Shape("multi-head weights need h ≥ 1 matching projections".into()));
    }
    let mut tape = Tape::new();
    let (q_in, k_in, v_in) = (tape.constant_ref(x_q), tape.constant_ref(x_k), tape.constant_ref(x_v));
    let mask = mask.map(AttentionMask::to_shared);
    let mut outs = Vec::with_capacity(h);
    for i in 0..h {
        let wq = tape.constant_ref(&weights.query[i]);
        let wk = tape.constant_ref(&weights.key[i]);
        let wv = tape.constant_ref(&weights.value[i]);
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(k_in, wk)?;
        let v = tape.matmul(v_in, wv)?;
        outs.push(attend(&mut tape, q, k, v, mask.clone())?.0);
    }
    let concat = tape.concat_cols(&outs)?;
    let wo = tape.constant_ref(&weights.output);
    let out = tape.matmul(concat, wo)?;
    Ok(tape.value(out).clone())
}
