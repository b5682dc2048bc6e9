//! Multi-head attention and its shape-adaptive (foreground/background
//! partitioned) variant, with exact backward passes.
//!
//! Shape-adaptive attention splits the tokens of an irregular canvas into a
//! foreground group (inside the canvas) and a background group. Foreground
//! queries attend only to foreground keys and values, background queries only
//! to background ones, and the two results are merged row-wise by the
//! query-side mask:
//!
//! ```text
//! out = m_a * MHA(Q, K_fg, V_fg) + (1 - m_a) * MHA(Q, K_bg, V_bg)
//! ```
//!
//! Cross-attention uses the same routing with the prompt tokens as the
//! foreground key/value set and the null (unconditional) tokens as the
//! background set.

use crate::error::{param_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Token-major matrix: `n_tokens` rows of `dim` features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix<T> {
    n_tokens: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> TokenMatrix<T> {
    pub fn new(n_tokens: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n_tokens * dim {
            return Err(shape_err(format!(
                "token matrix {}x{} needs {} values, got {}",
                n_tokens,
                dim,
                n_tokens * dim,
                data.len()
            )));
        }
        Ok(Self {
            n_tokens,
            dim,
            data,
        })
    }

    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        Self {
            n_tokens,
            dim,
            data: vec![T::zero(); n_tokens * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(shape_err("ragged token rows"));
        }
        Ok(Self {
            n_tokens: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `idx`, in order.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n_tokens: idx.len(),
            dim: self.dim,
            data,
        }
    }

    fn scatter_add(&mut self, idx: &[usize], src: &Self) {
        for (r, &i) in idx.iter().enumerate() {
            for (d, s) in self.row_mut(i).iter_mut().zip(src.row(r)) {
                *d += *s;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Per-token binary mask; `true` marks a foreground token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    data: Vec<bool>,
}

impl TokenMask {
    pub fn new(data: Vec<bool>) -> Self {
        Self { data }
    }

    pub fn from_binary(values: &[u8]) -> Result<Self> {
        values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(param_err(format!("token mask value {other} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn all(n: usize, value: bool) -> Self {
        Self {
            data: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.data[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn foreground(&self) -> Vec<usize> {
        self.indices(true)
    }

    pub fn background(&self) -> Vec<usize> {
        self.indices(false)
    }

    fn indices(&self, value: bool) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == value)
            .map(|(i, _)| i)
            .collect()
    }

    /// Concatenation of token masks (token order of a joint sequence).
    pub fn concat(parts: &[&TokenMask]) -> Self {
        Self {
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        }
    }
}

/// Keys and their paired values.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue<'a, T> {
    pub keys: &'a TokenMatrix<T>,
    pub values: &'a TokenMatrix<T>,
}

impl<'a, T: Scalar> KeyValue<'a, T> {
    pub fn new(keys: &'a TokenMatrix<T>, values: &'a TokenMatrix<T>) -> Self {
        Self { keys, values }
    }

    /// Tokens used as both keys and values.
    pub fn tied(tokens: &'a TokenMatrix<T>) -> Self {
        Self {
            keys: tokens,
            values: tokens,
        }
    }
}

/// Gradients of an attention call with respect to its inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub d_q: TokenMatrix<T>,
    pub d_k: TokenMatrix<T>,
    pub d_v: TokenMatrix<T>,
}

/// Gradients of a routed (two key/value set) attention call.
#[derive(Clone, Debug)]
pub struct RoutedGrads<T> {
    pub d_q: TokenMatrix<T>,
    pub fg: (TokenMatrix<T>, TokenMatrix<T>),
    pub bg: (TokenMatrix<T>, TokenMatrix<T>),
}

fn check_heads(dim: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || !dim.is_multiple_of(n_heads) {
        return Err(param_err(format!(
            "dim {dim} is not divisible by {n_heads} heads"
        )));
    }
    Ok(dim / n_heads)
}

fn check_qkv<T: Scalar>(q: &TokenMatrix<T>, kv: KeyValue<'_, T>) -> Result<()> {
    if kv.keys.n_tokens != kv.values.n_tokens {
        return Err(shape_err(format!(
            "{} keys but {} values",
            kv.keys.n_tokens, kv.values.n_tokens
        )));
    }
    if kv.keys.dim != q.dim {
        return Err(shape_err(format!(
            "query dim {} vs key dim {}",
            q.dim, kv.keys.dim
        )));
    }
    if kv.values.dim != q.dim {
        return Err(shape_err(format!(
            "query dim {} vs value dim {}",
            q.dim, kv.values.dim
        )));
    }
    Ok(())
}

/// Softmax-normalised attention probabilities for one head, `nq x nk`.
fn head_probs<T: Scalar>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    head: usize,
    head_dim: usize,
) -> Vec<T> {
    let (nq, nk, d) = (q.n_tokens, k.n_tokens, q.dim);
    let off = head * head_dim;
    let scale = T::one() / T::from_usize_lossy(head_dim).sqrt();
    let mut s = vec![T::zero(); nq * nk];
    T::gemm(
        nq,
        head_dim,
        nk,
        scale,
        &q.data[off..],
        d as isize,
        1,
        &k.data[off..],
        1,
        d as isize,
        T::zero(),
        &mut s,
        nk as isize,
        1,
    );
    for row in s.chunks_mut(nk) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    s
}

/// Per-head attention weights (`nq x nk`, row-major) of `mha(q, k, ·)`.
pub fn attention_weights<T: Scalar>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    n_heads: usize,
) -> Result<Vec<Vec<T>>> {
    let head_dim = check_heads(q.dim, n_heads)?;
    if k.n_tokens == 0 {
        return Err(Error::EmptyKeys);
    }
    Ok((0..n_heads)
        .map(|h| head_probs(q, k, h, head_dim))
        .collect())
}

/// Plain multi-head scaled dot-product attention. Heads are concatenated;
/// there is no output projection.
pub fn mha<T: Scalar>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
    n_heads: usize,
) -> Result<TokenMatrix<T>> {
    let kv = KeyValue::new(k, v);
    check_qkv(q, kv)?;
    let head_dim = check_heads(q.dim, n_heads)?;
    if k.n_tokens == 0 {
        return Err(Error::EmptyKeys);
    }
    Ok(mha_unchecked(q, kv, n_heads, head_dim))
}

fn mha_unchecked<T: Scalar>(
    q: &TokenMatrix<T>,
    kv: KeyValue<'_, T>,
    n_heads: usize,
    head_dim: usize,
) -> TokenMatrix<T> {
    let (nq, nk, d) = (q.n_tokens, kv.keys.n_tokens, q.dim);
    let mut out = TokenMatrix::zeros(nq, d);
    if nq == 0 {
        return out;
    }
    for h in 0..n_heads {
        let p = head_probs(q, kv.keys, h, head_dim);
        let off = h * head_dim;
        T::gemm(
            nq,
            nk,
            head_dim,
            T::one(),
            &p,
            nk as isize,
            1,
            &kv.values.data[off..],
            d as isize,
            1,
            T::zero(),
            &mut out.data[off..],
            d as isize,
            1,
        );
    }
    out
}

/// Backward pass of [`mha`] given the upstream gradient `d_out`.
pub fn mha_backward<T: Scalar>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
    n_heads: usize,
    d_out: &TokenMatrix<T>,
) -> Result<AttentionGrads<T>> {
    let kv = KeyValue::new(k, v);
    check_qkv(q, kv)?;
    let head_dim = check_heads(q.dim, n_heads)?;
    if k.n_tokens == 0 {
        return Err(Error::EmptyKeys);
    }
    if d_out.n_tokens != q.n_tokens || d_out.dim != q.dim {
        return Err(shape_err("upstream gradient shape differs from output"));
    }
    Ok(mha_backward_unchecked(q, kv, n_heads, head_dim, d_out))
}

fn mha_backward_unchecked<T: Scalar>(
    q: &TokenMatrix<T>,
    kv: KeyValue<'_, T>,
    n_heads: usize,
    head_dim: usize,
    d_out: &TokenMatrix<T>,
) -> AttentionGrads<T> {
    let (nq, nk, d) = (q.n_tokens, kv.keys.n_tokens, q.dim);
    let mut d_q = TokenMatrix::zeros(nq, d);
    let mut d_k = TokenMatrix::zeros(nk, d);
    let mut d_v = TokenMatrix::zeros(nk, d);
    if nq == 0 {
        return AttentionGrads { d_q, d_k, d_v };
    }
    let scale = T::one() / T::from_usize_lossy(head_dim).sqrt();
    let mut dp = vec![T::zero(); nq * nk];
    for h in 0..n_heads {
        let off = h * head_dim;
        let p = head_probs(q, kv.keys, h, head_dim);
        // dV_h = P^T dO_h
        T::gemm(
            nk,
            nq,
            head_dim,
            T::one(),
            &p,
            1,
            nk as isize,
            &d_out.data[off..],
            d as isize,
            1,
            T::zero(),
            &mut d_v.data[off..],
            d as isize,
            1,
        );
        // dP = dO_h V_h^T
        T::gemm(
            nq,
            head_dim,
            nk,
            T::one(),
            &d_out.data[off..],
            d as isize,
            1,
            &kv.values.data[off..],
            1,
            d as isize,
            T::zero(),
            &mut dp,
            nk as isize,
            1,
        );
        // dS = P * (dP - rowsum(P * dP)), folded with the score scale.
        for (prow, dprow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
            let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in dprow.iter_mut().zip(prow) {
                *g = pv * (*g - dot) * scale;
            }
        }
        // dQ_h = dS K_h ; dK_h = dS^T Q_h
        T::gemm(
            nq,
            nk,
            head_dim,
            T::one(),
            &dp,
            nk as isize,
            1,
            &kv.keys.data[off..],
            d as isize,
            1,
            T::zero(),
            &mut d_q.data[off..],
            d as isize,
            1,
        );
        T::gemm(
            nk,
            nq,
            head_dim,
            T::one(),
            &dp,
            1,
            nk as isize,
            &q.data[off..],
            d as isize,
            1,
            T::zero(),
            &mut d_k.data[off..],
            d as isize,
            1,
        );
    }
    AttentionGrads { d_q, d_k, d_v }
}

/// Attention where foreground queries (`m_a` set) use the `fg` key/value set
/// and background queries use the `bg` set.
pub fn routed_attention<T: Scalar>(
    q: &TokenMatrix<T>,
    m_a: &TokenMask,
    fg: KeyValue<'_, T>,
    bg: KeyValue<'_, T>,
    n_heads: usize,
) -> Result<TokenMatrix<T>> {
    let head_dim = check_routing(q, m_a, fg, bg, n_heads)?;
    let mut out = TokenMatrix::zeros(q.n_tokens, q.dim);
    for (rows, kv) in [(m_a.foreground(), fg), (m_a.background(), bg)] {
        if rows.is_empty() {
            continue;
        }
        let part = mha_unchecked(&q.gather(&rows), kv, n_heads, head_dim);
        out.scatter_add(&rows, &part);
    }
    Ok(out)
}

/// Backward pass of [`routed_attention`].
pub fn routed_attention_backward<T: Scalar>(
    q: &TokenMatrix<T>,
    m_a: &TokenMask,
    fg: KeyValue<'_, T>,
    bg: KeyValue<'_, T>,
    n_heads: usize,
    d_out: &TokenMatrix<T>,
) -> Result<RoutedGrads<T>> {
    let head_dim = check_routing(q, m_a, fg, bg, n_heads)?;
    if d_out.n_tokens != q.n_tokens || d_out.dim != q.dim {
        return Err(shape_err("upstream gradient shape differs from output"));
    }
    let mut d_q = TokenMatrix::zeros(q.n_tokens, q.dim);
    let mut grads = Vec::with_capacity(2);
    for (rows, kv) in [(m_a.foreground(), fg), (m_a.background(), bg)] {
        if rows.is_empty() {
            grads.push((
                TokenMatrix::zeros(kv.keys.n_tokens, q.dim),
                TokenMatrix::zeros(kv.values.n_tokens, q.dim),
            ));
            continue;
        }
        let g = mha_backward_unchecked(
            &q.gather(&rows),
            kv,
            n_heads,
            head_dim,
            &d_out.gather(&rows),
        );
        d_q.scatter_add(&rows, &g.d_q);
        grads.push((g.d_k, g.d_v));
    }
    let bg_g = grads.pop().expect("two groups");
    let fg_g = grads.pop().expect("two groups");
    Ok(RoutedGrads {
        d_q,
        fg: fg_g,
        bg: bg_g,
    })
}

fn check_routing<T: Scalar>(
    q: &TokenMatrix<T>,
    m_a: &TokenMask,
    fg: KeyValue<'_, T>,
    bg: KeyValue<'_, T>,
    n_heads: usize,
) -> Result<usize> {
    if m_a.len() != q.n_tokens {
        return Err(shape_err(format!(
            "query mask has {} entries for {} queries",
            m_a.len(),
            q.n_tokens
        )));
    }
    check_qkv(q, fg)?;
    check_qkv(q, bg)?;
    let head_dim = check_heads(q.dim, n_heads)?;
    let n_fg = m_a.as_slice().iter().filter(|&&v| v).count();
    if n_fg > 0 && fg.keys.n_tokens == 0 {
        return Err(Error::DegeneratePartition(format!(
            "{n_fg} foreground queries but no foreground keys"
        )));
    }
    let n_bg = q.n_tokens - n_fg;
    if n_bg > 0 && bg.keys.n_tokens == 0 {
        return Err(Error::DegeneratePartition(format!(
            "{n_bg} background queries but no background keys"
        )));
    }
    Ok(head_dim)
}

/// Shape-adaptive self-attention: `m_a` partitions queries, `key_mask`
/// partitions keys and values.
pub fn shape_adaptive_mha<T: Scalar>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
    m_a: &TokenMask,
    key_mask: &TokenMask,
    n_heads: usize,
) -> Result<TokenMatrix<T>> {
    let split = KeySplit::new(k, v, key_mask)?;
    routed_attention(q, m_a, split.fg(), split.bg(), n_heads)
}

/// Backward pass of [`shape_adaptive_mha`]; key/value gradients are
/// scattered back to the full token order.
pub fn shape_adaptive_mha_backward<T: Scalar>(
    q: &TokenMatrix<T>,
    k: &TokenMatrix<T>,
    v: &TokenMatrix<T>,
    m_a: &TokenMask,
    key_mask: &TokenMask,
    n_heads: usize,
    d_out: &TokenMatrix<T>,
) -> Result<AttentionGrads<T>> {
    let split = KeySplit::new(k, v, key_mask)?;
    let g = routed_attention_backward(q, m_a, split.fg(), split.bg(), n_heads, d_out)?;
    let mut d_k = TokenMatrix::zeros(k.n_tokens, k.dim);
    let mut d_v = TokenMatrix::zeros(v.n_tokens, v.dim);
    d_k.scatter_add(&split.fg_idx, &g.fg.0);
    d_v.scatter_add(&split.fg_idx, &g.fg.1);
    d_k.scatter_add(&split.bg_idx, &g.bg.0);
    d_v.scatter_add(&split.bg_idx, &g.bg.1);
    Ok(AttentionGrads {
        d_q: g.d_q,
        d_k,
        d_v,
    })
}

/// Shape-adaptive cross-attention: foreground queries attend to the prompt
/// tokens, background queries to the null tokens.
pub fn shape_adaptive_cross<T: Scalar>(
    q: &TokenMatrix<T>,
    prompt: KeyValue<'_, T>,
    null: KeyValue<'_, T>,
    m_a: &TokenMask,
    n_heads: usize,
) -> Result<TokenMatrix<T>> {
    if prompt.keys.n_tokens == 0 || null.keys.n_tokens == 0 {
        return Err(Error::EmptyKeys);
    }
    routed_attention(q, m_a, prompt, null, n_heads)
}

struct KeySplit<T> {
    fg_idx: Vec<usize>,
    bg_idx: Vec<usize>,
    k_fg: TokenMatrix<T>,
    v_fg: TokenMatrix<T>,
    k_bg: TokenMatrix<T>,
    v_bg: TokenMatrix<T>,
}

impl<T: Scalar> KeySplit<T> {
    fn new(k: &TokenMatrix<T>, v: &TokenMatrix<T>, key_mask: &TokenMask) -> Result<Self> {
        if key_mask.len() != k.n_tokens {
            return Err(shape_err(format!(
                "key mask has {} entries for {} keys",
                key_mask.len(),
                k.n_tokens
            )));
        }
        if v.n_tokens != k.n_tokens {
            return Err(shape_err(format!(
                "{} keys but {} values",
                k.n_tokens, v.n_tokens
            )));
        }
        let fg_idx = key_mask.foreground();
        let bg_idx = key_mask.background();
        Ok(Self {
            k_fg: k.gather(&fg_idx),
            v_fg: v.gather(&fg_idx),
            k_bg: k.gather(&bg_idx),
            v_bg: v.gather(&bg_idx),
            fg_idx,
            bg_idx,
        })
    }

    fn fg(&self) -> KeyValue<'_, T> {
        KeyValue::new(&self.k_fg, &self.v_fg)
    }

    fn bg(&self) -> KeyValue<'_, T> {
        KeyValue::new(&self.k_bg, &self.v_bg)
    }
}

/// Numerically stable log-sum-exp, used by tests and diagnostics.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tm(rows: &[&[f64]]) -> TokenMatrix<f64> {
        TokenMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_tm(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenMatrix<f64> {
        TokenMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct softmax attention for a single head, written without gemm.
    fn oracle_single_head(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = tm(&[&[1.0, 2.0], &[-3.0, 0.5], &[0.0, 0.0]]);
        let k = tm(&[&[0.3, -0.7]]);
        let v = tm(&[&[5.0, -1.0]]);
        let out = mha(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[5.0, -1.0]);
        }
    }

    #[test]
    fn one_hot_self_attention_selects_itself() {
        let big = 60.0;
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { big } else { 0.0 }).collect())
            .collect();
        let x = TokenMatrix::from_rows(&rows).unwrap();
        let out = mha(&x, &x, &x, 1).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn small_integer_instance_matches_softmax_oracle() {
        let q = vec![vec![1.0, 0.0, 2.0, -1.0], vec![0.0, 1.0, -1.0, 1.0]];
        let k = vec![
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 2.0, 1.0, -1.0],
            vec![-1.0, 0.0, 1.0, 2.0],
        ];
        let v = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, -1.0, 1.0, 0.0],
            vec![2.0, 0.0, -2.0, 1.0],
        ];
        let out = mha(
            &TokenMatrix::from_rows(&q).unwrap(),
            &TokenMatrix::from_rows(&k).unwrap(),
            &TokenMatrix::from_rows(&v).unwrap(),
            1,
        )
        .unwrap();
        let expect = oracle_single_head(&q, &k, &v);
        for (i, row) in expect.iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn error_paths() {
        let q = tm(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(mha(&q, &q, &q, 2), Err(Error::Parameter(_))));
        let empty = TokenMatrix::<f64>::zeros(0, 3);
        assert!(matches!(mha(&q, &empty, &empty, 1), Err(Error::EmptyKeys)));
        let m_a = TokenMask::all(1, true);
        let key_mask = TokenMask::all(1, false);
        assert!(matches!(
            shape_adaptive_mha(&q, &q, &q, &m_a, &key_mask, 1),
            Err(Error::DegeneratePartition(_))
        ));
        // an empty query group does not need matching keys
        let m_bg = TokenMask::all(1, false);
        assert!(shape_adaptive_mha(&q, &q, &q, &m_bg, &key_mask, 1).is_ok());
    }

    #[test]
    fn full_foreground_collapses_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_tm(&mut rng, 7, 8);
        let k = random_tm(&mut rng, 7, 8);
        let v = random_tm(&mut rng, 7, 8);
        let all = TokenMask::all(7, true);
        let a = shape_adaptive_mha(&q, &k, &v, &all, &all, 2).unwrap();
        let b = mha(&q, &k, &v, 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn two_by_two_partition_matches_two_group_oracle() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]];
        let k = vec![vec![2.0, 1.0], vec![0.0, -1.0], vec![1.0, 3.0], vec![-2.0, 0.0]];
        let v = vec![vec![1.0, -1.0], vec![3.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]];
        let mask = TokenMask::new(vec![true, false, true, false]);
        let out = shape_adaptive_mha(
            &TokenMatrix::from_rows(&q).unwrap(),
            &TokenMatrix::from_rows(&k).unwrap(),
            &TokenMatrix::from_rows(&v).unwrap(),
            &mask,
            &mask,
            1,
        )
        .unwrap();
        let fg = oracle_single_head(
            &q,
            &[k[0].clone(), k[2].clone()],
            &[v[0].clone(), v[2].clone()],
        );
        let bg = oracle_single_head(
            &q,
            &[k[1].clone(), k[3].clone()],
            &[v[1].clone(), v[3].clone()],
        );
        for i in 0..4 {
            let expect = if mask.get(i) { &fg[i] } else { &bg[i] };
            for (a, b) in out.row(i).iter().zip(expect) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_routing_single_tokens_return_value_rows() {
        let q = tm(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let pk = tm(&[&[0.1, 0.2]]);
        let pv = tm(&[&[7.0, 8.0]]);
        let nk = tm(&[&[0.0, 0.0]]);
        let nv = tm(&[&[-1.0, -2.0]]);
        let m_a = TokenMask::new(vec![true, false, true]);
        let out = shape_adaptive_cross(
            &q,
            KeyValue::new(&pk, &pv),
            KeyValue::new(&nk, &nv),
            &m_a,
            1,
        )
        .unwrap();
        assert_eq!(out.row(0), &[7.0, 8.0]);
        assert_eq!(out.row(1), &[-1.0, -2.0]);
        assert_eq!(out.row(2), &[7.0, 8.0]);
    }

    #[test]
    fn cross_all_background_ignores_prompt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_tm(&mut rng, 5, 4);
        let p1 = random_tm(&mut rng, 3, 4);
        let p2 = random_tm(&mut rng, 3, 4);
        let null = random_tm(&mut rng, 2, 4);
        let m_a = TokenMask::all(5, false);
        let a = shape_adaptive_cross(&q, KeyValue::tied(&p1), KeyValue::tied(&null), &m_a, 2)
            .unwrap();
        let b = shape_adaptive_cross(&q, KeyValue::tied(&p2), KeyValue::tied(&null), &m_a, 2)
            .unwrap();
        assert_eq!(a, b);
        let all = TokenMask::all(5, true);
        let c = shape_adaptive_cross(&q, KeyValue::tied(&p1), KeyValue::tied(&null), &all, 2)
            .unwrap();
        assert!(c.max_abs_diff(&mha(&q, &p1, &p1, 2).unwrap()) < 1e-12);
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_tm(&mut rng, 6, 8);
        let k = random_tm(&mut rng, 9, 8);
        for w in attention_weights(&q, &k, 4).unwrap() {
            for row in w.chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn loss(out: &TokenMatrix<f64>, w: &TokenMatrix<f64>) -> f64 {
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = random_tm(&mut rng, 6, 4);
        let k = random_tm(&mut rng, 6, 4);
        let v = random_tm(&mut rng, 6, 4);
        let w = random_tm(&mut rng, 6, 4);
        let mask = TokenMask::new(vec![true, false, true, true, false, false]);
        let f = |q: &TokenMatrix<f64>, k: &TokenMatrix<f64>, v: &TokenMatrix<f64>| {
            loss(&shape_adaptive_mha(q, k, v, &mask, &mask, 2).unwrap(), &w)
        };
        let g = shape_adaptive_mha_backward(&q, &k, &v, &mask, &mask, 2, &w).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &g.d_q), (1, &g.d_k), (2, &g.d_v)] {
            for i in 0..24 {
                let mut xs = [q.clone(), k.clone(), v.clone()];
                xs[which].data_mut()[i] += h;
                let up = f(&xs[0], &xs[1], &xs[2]);
                xs[which].data_mut()[i] -= 2.0 * h;
                let down = f(&xs[0], &xs[1], &xs[2]);
                let fd = (up - down) / (2.0 * h);
                let an = grad.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "input {which} elem {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp(&[1000.0f64, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
