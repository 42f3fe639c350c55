//! Dense row-major `f32` tensors and the handful of kernels a Llama-style
//! forward pass needs.
//!
//! Every reduction runs in ascending index order so repeated runs are
//! bit-identical. Kernels never mutate their inputs; they allocate outputs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of rows when viewed as a matrix over the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn l2_norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::dim(op, &self.shape, &[])),
        }
    }

    /// Contiguous column block `[start, start + width)` of a matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<Tensor> {
        let (rows, cols) = self.matrix_dims("columns")?;
        if width == 0 || start + width > cols {
            return Err(Error::dim("columns", &self.shape, &[start, width]));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + width]);
        }
        Tensor::new(vec![rows, width], data)
    }

    /// Contiguous row block `[start, start + count)` of a matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Tensor> {
        let (rows, cols) = self.matrix_dims("row_block")?;
        if count == 0 || start + count > rows {
            return Err(Error::dim("row_block", &self.shape, &[start, count]));
        }
        Tensor::new(
            vec![count, cols],
            self.data[start * cols..(start + count) * cols].to_vec(),
        )
    }

    pub fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let (rows, _) = first.matrix_dims("concat_columns")?;
        let mut total = 0;
        for p in parts {
            let (r, c) = p.matrix_dims("concat_columns")?;
            if r != rows {
                return Err(Error::dim("concat_columns", &first.shape, &p.shape));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::new(vec![rows, total], data)
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let cols = first.last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != 2 || p.last_dim() != cols {
                return Err(Error::dim("concat_rows", &first.shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// `a [m×k] · b [k×n]`. Each output element accumulates over `k` in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b
        .matrix_dims("matmul")
        .map_err(|_| Error::dim("matmul", &a.shape, &b.shape))?;
    if k != k2 {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise `r / sqrt(mean(r²) + eps) ⊙ gain` over the last dimension.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.shape() != [d] {
        return Err(Error::dim("rmsnorm", &x.shape, &gain.shape));
    }
    if eps < 0.0 {
        return Err(Error::config("rmsnorm eps must be nonnegative"));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data.chunks_exact(d) {
        let mean_sq = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let denom = (mean_sq + eps).sqrt();
        // zero row with eps = 0 stays zero instead of 0/0
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        out.extend(row.iter().zip(&gain.data).map(|(v, g)| v * inv * g));
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect(),
    }
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::dim(op, &a.shape, &b.shape));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// In-place `acc += x`.
pub fn add_assign(acc: &mut Tensor, x: &Tensor) -> Result<()> {
    if acc.shape != x.shape {
        return Err(Error::dim("add_assign", &acc.shape, &x.shape));
    }
    for (a, b) in acc.data.iter_mut().zip(&x.data) {
        *a += b;
    }
    Ok(())
}

/// Gathers rows of `table [vocab×d]` for each id; output is `[ids.len()×d]`.
pub fn embed_lookup(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (vocab, d) = table.matrix_dims("embed_lookup")?;
    if ids.is_empty() {
        return Err(Error::config("embed_lookup with no ids"));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::config(format!("token id {id} out of range for vocab {vocab}")));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Index of the maximum of each row over the last dimension; ties go to the lowest index.
pub fn argmax_last(x: &Tensor) -> Vec<usize> {
    x.data
        .chunks_exact(x.last_dim())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Rotary embedding over `x [t × n·head_dim]`: within each head, the pair
/// `(2j, 2j+1)` at position `p` is rotated by `p · base^(-2j/head_dim)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], head_dim: usize, base: f32) -> Result<Tensor> {
    let width = x.last_dim();
    if head_dim == 0 || !head_dim.is_multiple_of(2) || !width.is_multiple_of(head_dim) {
        return Err(Error::dim("rope_apply", &x.shape, &[head_dim]));
    }
    if positions.len() != x.rows() {
        return Err(Error::dim("rope_apply", &x.shape, &[positions.len()]));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|j| (base as f64).powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    let mut out = x.data.clone();
    for (row, &pos) in out.chunks_exact_mut(width).zip(positions) {
        for head in row.chunks_exact_mut(head_dim) {
            for (j, freq) in inv_freq.iter().enumerate() {
                let angle = pos as f64 * freq;
                let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * cos - b * sin;
                head[2 * j + 1] = a * sin + b * cos;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

struct HeadGeometry {
    q_len: usize,
    kv_len: usize,
    head_dim: usize,
    group: usize,
    n_heads: usize,
    n_kv_heads: usize,
}

fn head_geometry(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, n_kv_heads: usize) -> Result<HeadGeometry> {
    if n_heads == 0 || n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
        return Err(Error::config(format!(
            "n_heads {n_heads} must be a positive multiple of n_kv_heads {n_kv_heads}"
        )));
    }
    let q_width = q.last_dim();
    if !q_width.is_multiple_of(n_heads) {
        return Err(Error::config(format!(
            "query width {q_width} not divisible by {n_heads} heads"
        )));
    }
    let head_dim = q_width / n_heads;
    if k.shape != v.shape || k.last_dim() != n_kv_heads * head_dim {
        return Err(Error::config(format!(
            "key/value shapes {:?}/{:?} incompatible with {n_kv_heads} kv heads of dim {head_dim}",
            k.shape, v.shape
        )));
    }
    let (q_len, kv_len) = (q.rows(), k.rows());
    if kv_len < q_len {
        return Err(Error::config(format!(
            "kv length {kv_len} shorter than query length {q_len}"
        )));
    }
    Ok(HeadGeometry {
        q_len,
        kv_len,
        head_dim,
        group: n_heads / n_kv_heads,
        n_heads,
        n_kv_heads,
    })
}

/// Post-softmax weights for query row `t` of head `h`. Query `t` sits at
/// absolute position `kv_len - q_len + t` and sees keys at or before it.
fn softmax_row(q: &Tensor, k: &Tensor, g: &HeadGeometry, h: usize, t: usize, scale: f32, out: &mut Vec<f32>) {
    let kvh = h / g.group;
    let q_off = t * g.n_heads * g.head_dim + h * g.head_dim;
    let qv = &q.data[q_off..q_off + g.head_dim];
    let visible = g.kv_len - g.q_len + t + 1;
    out.clear();
    for j in 0..visible {
        let k_off = j * g.n_kv_heads * g.head_dim + kvh * g.head_dim;
        let kv = &k.data[k_off..k_off + g.head_dim];
        let dot: f32 = qv.iter().zip(kv).fold(0.0, |acc, (a, b)| acc + a * b);
        out.push(dot * scale);
    }
    let max = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for w in out.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in out.iter_mut() {
        *w /= sum;
    }
}

/// Grouped-query causal attention.
///
/// `q` is `[q_len × n_heads·head_dim]`, `k`/`v` are `[kv_len × n_kv_heads·head_dim]`
/// with `kv_len ≥ q_len`; the trailing `q_len` key positions align with the
/// queries, earlier ones come from a cache. Query head `h` reads KV head
/// `h / (n_heads / n_kv_heads)`.
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    n_kv_heads: usize,
    scale: f32,
) -> Result<Tensor> {
    let g = head_geometry(q, k, v, n_heads, n_kv_heads)?;
    let mut out = vec![0.0f32; g.q_len * n_heads * g.head_dim];
    let mut weights = Vec::with_capacity(g.kv_len);
    for t in 0..g.q_len {
        for h in 0..n_heads {
            softmax_row(q, k, &g, h, t, scale, &mut weights);
            let kvh = h / g.group;
            let o_off = t * n_heads * g.head_dim + h * g.head_dim;
            let o = &mut out[o_off..o_off + g.head_dim];
            for (j, &w) in weights.iter().enumerate() {
                let v_off = j * n_kv_heads * g.head_dim + kvh * g.head_dim;
                for (acc, &vv) in o.iter_mut().zip(&v.data[v_off..v_off + g.head_dim]) {
                    *acc += w * vv;
                }
            }
        }
    }
    Tensor::new(vec![g.q_len, n_heads * g.head_dim], out)
}

/// Full post-softmax weight matrix per query head, `[q_len × kv_len]`, with
/// masked entries exactly zero. Diagnostic companion of [`causal_attention`].
pub fn causal_attention_weights(
    q: &Tensor,
    k: &Tensor,
    n_heads: usize,
    n_kv_heads: usize,
    scale: f32,
) -> Result<Vec<Tensor>> {
    let g = head_geometry(q, k, k, n_heads, n_kv_heads)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut row = Vec::with_capacity(g.kv_len);
    for h in 0..n_heads {
        let mut m = Tensor::zeros(&[g.q_len, g.kv_len]);
        for t in 0..g.q_len {
            softmax_row(q, k, &g, h, t, scale, &mut row);
            m.data[t * g.kv_len..t * g.kv_len + row.len()].copy_from_slice(&row);
        }
        heads.push(m);
    }
    Ok(heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalRng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        t(&[m, n], &out)
    }

    #[test]
    fn matmul_identity_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap(), a);
        let b = t(&[2, 1], &[5., 7.]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = NormalRng::new(7);
        let a = rng.tensor(&[4, 8], 1.0);
        let b = rng.tensor(&[8, 3], 1.0);
        assert!(matmul(&a, &b).unwrap().bit_eq(&triple_loop(&a, &b)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn rmsnorm_cases() {
        let out = rmsnorm(&t(&[4], &[2., 2., 2., 2.]), &Tensor::ones(&[4]), 0.0).unwrap();
        assert_eq!(out.data(), &[1., 1., 1., 1.]);
        let out = rmsnorm(&Tensor::zeros(&[2, 4]), &Tensor::ones(&[4]), 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            rmsnorm(&Tensor::zeros(&[2, 4]), &Tensor::ones(&[3]), 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rmsnorm_random_row_has_unit_mean_square() {
        let mut rng = NormalRng::new(11);
        let x = rng.tensor(&[1, 32], 1.0);
        let gain = Tensor::from_fn(&[32], |i| 0.5 + i as f32 * 0.1);
        let out = rmsnorm(&x, &gain, 1e-5).unwrap();
        let ms: f64 = out
            .data()
            .iter()
            .zip(gain.data())
            .map(|(o, g)| ((o / g) as f64).powi(2))
            .sum::<f64>()
            / 32.0;
        let x_ms: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 32.0;
        let expected = x_ms / (x_ms + 1e-5);
        assert!((ms - expected).abs() < 1e-5, "{ms} vs {expected}");
    }

    #[test]
    fn attention_single_position_returns_v() {
        let q = t(&[1, 4], &[0.3, -1.0, 2.0, 0.5]);
        let k = t(&[1, 4], &[1.0, 0.1, -0.2, 0.7]);
        let v = t(&[1, 4], &[9., 8., 7., 6.]);
        let out = causal_attention(&q, &k, &v, 2, 2, 0.5).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_orthogonal_query_averages_visible_values() {
        let q = t(&[2, 2], &[0., 0., 0., 0.]);
        let k = t(&[2, 2], &[1., 0., 0., 1.]);
        let v = t(&[2, 2], &[2., 4., 6., 8.]);
        let out = causal_attention(&q, &k, &v, 1, 1, 1.0).unwrap();
        // position 0 sees only row 0, position 1 averages both
        assert_eq!(out.data(), &[2., 4., 4., 6.]);
    }

    #[test]
    fn attention_rejects_bad_head_geometry() {
        let q = Tensor::zeros(&[1, 12]);
        let k = Tensor::zeros(&[1, 8]);
        assert!(matches!(causal_attention(&q, &k, &k, 3, 2, 1.0), Err(Error::Config(_))));
        assert!(matches!(causal_attention(&q, &k, &k, 4, 0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn attention_weight_rows_sum_to_one_and_mask_is_zero() {
        let mut rng = NormalRng::new(3);
        let q = rng.tensor(&[5, 8], 1.0);
        let k = rng.tensor(&[5, 4], 1.0);
        for w in causal_attention_weights(&q, &k, 2, 1, 0.5).unwrap() {
            for r in 0..5 {
                let row = w.row(r);
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!(row[r + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = NormalRng::new(1);
        let x = rng.tensor(&[3, 8], 1.0);
        assert_eq!(rope_apply(&x, &[0, 0, 0], 4, 10000.0).unwrap(), x);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let x = t(&[1, 4], &[3., 4., 1., 0.]);
        let y = rope_apply(&x, &[5], 4, 10000.0).unwrap();
        let n0 = (y.data()[0].powi(2) + y.data()[1].powi(2)).sqrt();
        assert!((n0 - 5.0).abs() < 1e-5);
        assert!(rope_apply(&x, &[1, 2], 4, 10000.0).is_err());
        assert!(rope_apply(&x, &[1], 3, 10000.0).is_err());
    }

    #[test]
    fn pointwise_helpers() {
        assert_eq!(silu(&Tensor::zeros(&[3])).data(), &[0., 0., 0.]);
        let x = t(&[2], &[1.5, -2.0]);
        assert_eq!(add(&x, &Tensor::zeros(&[2])).unwrap(), x);
        assert!(add(&x, &Tensor::zeros(&[3])).is_err());
        assert_eq!(argmax_last(&t(&[2, 3], &[1., 3., 3., 0., -1., -1.])), vec![1, 0]);
        let table = t(&[3, 2], &[0., 1., 2., 3., 4., 5.]);
        assert_eq!(embed_lookup(&table, &[2, 0]).unwrap().data(), &[4., 5., 0., 1.]);
        assert!(embed_lookup(&table, &[3]).is_err());
    }

    #[test]
    fn column_and_row_blocks_round_trip() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f32);
        let parts = [a.columns(0, 2).unwrap(), a.columns(2, 2).unwrap()];
        assert!(Tensor::concat_columns(&parts).unwrap().bit_eq(&a));
        let rows = [a.row_block(0, 1).unwrap(), a.row_block(1, 2).unwrap()];
        assert!(Tensor::concat_rows(&rows).unwrap().bit_eq(&a));
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
