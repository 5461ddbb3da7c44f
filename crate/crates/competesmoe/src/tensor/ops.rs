//! Forward implementations and backward rules for every tape operation.

use super::{matmul_nn, matmul_nt, matmul_tn, NodeId, Op, Tape};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl Tape {
    fn rank2(&self, op: &'static str, x: NodeId) -> Result<(usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::RankMismatch {
                op,
                expected: 2,
                shape: self.nodes[x.0].shape.clone(),
            }),
        }
    }

    fn rank1(&self, op: &'static str, x: NodeId) -> Result<usize> {
        match self.nodes[x.0].shape[..] {
            [n] => Ok(n),
            _ => Err(Error::RankMismatch {
                op,
                expected: 1,
                shape: self.nodes[x.0].shape.clone(),
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── graph-building ops ──────────────────────────────────────────

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let data = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push_node(data, vec![m, n], rg, Op::MatMul { a, b, m, k: ka, n }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2("transpose", x)?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![n, m], rg, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push_node(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push_node(data, shape, rg, Op::Sub { a, b }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push_node(data, shape, rg, Op::Mul { a, b }))
    }

    /// `[m,d] + [d]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, d) = self.rank2("add_bias", x)?;
        let db = self.rank1("add_bias", bias)?;
        if db != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![m, d],
                rhs: vec![db],
            });
        }
        let b = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v + b[idx % d])
            .collect();
        let rg = self.any_requires(&[x, bias]);
        Ok(self.push_node(data, vec![m, d], rg, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Relu { x })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Gelu { x })
    }

    /// |x|, with subgradient 0 at the origin.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.abs()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Abs { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Exp { x })
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Ln { x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Sqrt { x })
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| 1.0 / v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        self.push_node(data, shape, rg, Op::Recip { x })
    }

    /// Row-wise softmax over `[m,n]`. `-inf` entries come out exactly 0 and
    /// pass back exactly zero gradient. A row with no finite entry is an
    /// error rather than a NaN.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2("softmax_rows", x)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::DegenerateRow { row: i });
            }
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![m, n], rg, Op::SoftmaxRows { x }))
    }

    /// Euclidean norm of each row: `[m,n] → [m]`. The all-zero row takes
    /// subgradient 0.
    pub fn l2_norm_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2("l2_norm_rows", x)?;
        let data: Vec<f64> = (0..m)
            .map(|i| {
                self.nodes[x.0].data[i * n..(i + 1) * n]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![m], rg, Op::L2NormRows { x }))
    }

    /// Scale each row to unit Euclidean norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2("normalize_rows", x)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![m, n], rg, Op::NormalizeRows { x }))
    }

    /// Per-row layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, d) = self.rank2("layer_norm", x)?;
        let dg = self.rank1("layer_norm", gamma)?;
        let db = self.rank1("layer_norm", beta)?;
        if dg != d || db != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, d],
                rhs: vec![dg.max(db)],
            });
        }
        let g = self.nodes[gamma.0].data.clone();
        let b = self.nodes[beta.0].data.clone();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, (o, &v)) in data[i * d..(i + 1) * d].iter_mut().zip(row).enumerate() {
                *o = g[j] * ((v - mean) * inv) + b[j];
            }
        }
        let rg = self.any_requires(&[x, gamma, beta]);
        Ok(self.push_node(data, vec![m, d], rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[m,V]`), computed with the log-sum-exp trick.
    pub fn cross_entropy_nll(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, v) = self.rank2("cross_entropy_nll", logits)?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_nll",
                lhs: vec![m, v],
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy_nll",
                    index: t,
                    size: v,
                });
            }
            let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.any_requires(&[logits]);
        Ok(self.push_node(
            vec![total / m as f64],
            vec![1],
            rg,
            Op::CrossEntropyNll { logits, targets: targets.to_vec() },
        ))
    }

    /// Replace entries where `mask` is true with `-inf`. Masked positions
    /// receive exactly zero gradient.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &msk)| if msk { f64::NEG_INFINITY } else { v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, shape, rg, Op::MaskedFill { x, mask: mask.to_vec() }))
    }

    /// Select rows of `src` by index, repeats allowed: `[r,d] → [rows.len(),d]`.
    /// Doubles as the embedding lookup.
    pub fn gather_rows(&mut self, src: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, d) = self.rank2("gather_rows", src)?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &ri in rows {
            if ri >= r {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: ri,
                    size: r,
                });
            }
            data.extend_from_slice(&self.nodes[src.0].data[ri * d..(ri + 1) * d]);
        }
        let rg = self.any_requires(&[src]);
        Ok(self.push_node(
            data,
            vec![rows.len(), d],
            rg,
            Op::GatherRows { src, rows: rows.to_vec() },
        ))
    }

    /// Add row `i` of `src` into row `rows[i]` of a zero `[out_rows,d]`
    /// tensor. Inverse routing step for expert outputs.
    pub fn scatter_add_rows(&mut self, src: NodeId, rows: &[usize], out_rows: usize) -> Result<NodeId> {
        let (m, d) = self.rank2("scatter_add_rows", src)?;
        if rows.len() != m {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: vec![m, d],
                rhs: vec![rows.len()],
            });
        }
        let mut data = vec![0.0; out_rows * d];
        for (i, &ri) in rows.iter().enumerate() {
            if ri >= out_rows {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: ri,
                    size: out_rows,
                });
            }
            for j in 0..d {
                data[ri * d + j] += self.nodes[src.0].data[i * d + j];
            }
        }
        let rg = self.any_requires(&[src]);
        Ok(self.push_node(
            data,
            vec![out_rows, d],
            rg,
            Op::ScatterAddRows { src, rows: rows.to_vec() },
        ))
    }

    /// Extract one column as a rank-1 tensor: `[m,n] → [m]`.
    pub fn column(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let (m, n) = self.rank2("column", x)?;
        if col >= n {
            return Err(Error::IndexOutOfRange { op: "column", index: col, size: n });
        }
        let data: Vec<f64> = (0..m).map(|i| self.nodes[x.0].data[i * n + col]).collect();
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![m], rg, Op::Column { x, col }))
    }

    /// Multiply row `i` of `[m,d]` by `s[i]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, d) = self.rank2("scale_rows", x)?;
        let ms = self.rank1("scale_rows", s)?;
        if ms != m {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![m, d],
                rhs: vec![ms],
            });
        }
        let sv = &self.nodes[s.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v * sv[idx / d])
            .collect();
        let rg = self.any_requires(&[x, s]);
        Ok(self.push_node(data, vec![m, d], rg, Op::ScaleRows { x, s }))
    }

    /// Multiply column `j` of `[m,k]` by `s[j]`.
    pub fn mul_cols(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2("mul_cols", x)?;
        let ks = self.rank1("mul_cols", s)?;
        if ks != k {
            return Err(Error::ShapeMismatch {
                op: "mul_cols",
                lhs: vec![m, k],
                rhs: vec![ks],
            });
        }
        let sv = &self.nodes[s.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v * sv[idx % k])
            .collect();
        let rg = self.any_requires(&[x, s]);
        Ok(self.push_node(data, vec![m, k], rg, Op::MulCols { x, s }))
    }

    /// Divide column `j` of `[m,k]` by `s[j]`.
    pub fn div_cols(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2("div_cols", x)?;
        let ks = self.rank1("div_cols", s)?;
        if ks != k {
            return Err(Error::ShapeMismatch {
                op: "div_cols",
                lhs: vec![m, k],
                rhs: vec![ks],
            });
        }
        let sv = &self.nodes[s.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(idx, v)| v / sv[idx % k])
            .collect();
        let rg = self.any_requires(&[x, s]);
        Ok(self.push_node(data, vec![m, k], rg, Op::DivCols { x, s }))
    }

    /// Divide every element by a single-element node.
    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::RankMismatch {
                op: "div_scalar",
                expected: 0,
                shape: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v / sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x, s]);
        Ok(self.push_node(data, shape, rg, Op::DivScalar { x, s }))
    }

    /// Sum each row: `[m,k] → [m]`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, k) = self.rank2("row_sum", x)?;
        let data: Vec<f64> = (0..m)
            .map(|i| self.nodes[x.0].data[i * k..(i + 1) * k].iter().sum())
            .collect();
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![m], rg, Op::RowSum { x }))
    }

    /// Column means: `[m,d] → [1,d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, d) = self.rank2("mean_rows", x)?;
        let mut data = vec![0.0; d];
        for i in 0..m {
            for j in 0..d {
                data[j] += self.nodes[x.0].data[i * d + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![1, d], rg, Op::MeanRows { x }))
    }

    /// Stack rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let (m, _) = self.rank2("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mx, nx) = self.rank2("concat_cols", x)?;
            if mx != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            widths.push(nx);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[x.0].data[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_requires(xs);
        Ok(self.push_node(data, vec![m, total], rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "concat_rows of nothing");
        let (_, d) = self.rank2("concat_rows", xs[0])?;
        let mut total = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (mx, dx) = self.rank2("concat_rows", x)?;
            if dx != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[xs[0].0].shape.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
            total += mx;
            data.extend_from_slice(&self.nodes[x.0].data);
        }
        let rg = self.any_requires(xs);
        Ok(self.push_node(data, vec![total, d], rg, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Columns `start..end` of `[m,n]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.rank2("slice_cols", x)?;
        if start > end || end > n {
            return Err(Error::IndexOutOfRange { op: "slice_cols", index: end, size: n });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.nodes[x.0].data[i * n + start..i * n + end]);
        }
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, vec![m, w], rg, Op::SliceCols { x, start, end }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.any_requires(&[x]);
        self.push_node(vec![total], vec![1], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len();
        let total: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.any_requires(&[x]);
        self.push_node(vec![total / n as f64], vec![1], rg, Op::Mean { x })
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let n = self.nodes[a.0].data.len();
        let total: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push_node(vec![total / n as f64], vec![1], rg, Op::Mse { a, b }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.any_requires(&[x]);
        Ok(self.push_node(data, shape, rg, Op::Reshape { x }))
    }

    // ── backward rules ──────────────────────────────────────────────

    /// Propagate `g` (gradient of the loss w.r.t. node `out`) into the
    /// operation's inputs.
    pub(crate) fn backprop_op(&mut self, out: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let da = matmul_nt(g, &self.nodes[b.0].data, m, n, k);
                let db = matmul_tn(&self.nodes[a.0].data, g, k, m, n);
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Transpose { x } => {
                // out is [n,m]; route g back to [m,n].
                let (n, m) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                self.accum(x, &dx);
            }
            Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }
            Op::Sub { a, b } => {
                self.accum(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(gi, ai)| gi * ai).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::AddBias { x, bias } => {
                self.accum(x, g);
                let d = self.nodes[bias.0].data.len();
                let mut db = vec![0.0; d];
                for (idx, gi) in g.iter().enumerate() {
                    db[idx % d] += gi;
                }
                self.accum(bias, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gi, &v)| {
                        let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Abs { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gi, &xi)| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Exp { x } => {
                let dx: Vec<f64> = g.iter().zip(&self.nodes[out].data).map(|(gi, yi)| gi * yi).collect();
                self.accum(x, &dx);
            }
            Op::Ln { x } => {
                let dx: Vec<f64> = g.iter().zip(&self.nodes[x.0].data).map(|(gi, xi)| gi / xi).collect();
                self.accum(x, &dx);
            }
            Op::Sqrt { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].data)
                    .map(|(gi, yi)| gi / (2.0 * yi))
                    .collect();
                self.accum(x, &dx);
            }
            Op::Recip { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[out].data)
                    .map(|(gi, yi)| -gi * yi * yi)
                    .collect();
                self.accum(x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let y = &self.nodes[out].data;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for (o, (yi, gi)) in dx[i * n..(i + 1) * n].iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accum(x, &dx);
            }
            Op::L2NormRows { x } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let norm = self.nodes[out].data[i];
                    if norm == 0.0 {
                        continue; // subgradient 0 at the zero row
                    }
                    let scale = g[i] / norm;
                    for (o, xv) in dx[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&self.nodes[x.0].data[i * n..(i + 1) * n])
                    {
                        *o = scale * xv;
                    }
                }
                self.accum(x, &dx);
            }
            Op::NormalizeRows { x } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &self.nodes[x.0].data[i * n..(i + 1) * n];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &self.nodes[out].data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for (o, (yi, gi)) in dx[i * n..(i + 1) * n].iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gi - yi * dot) / norm;
                    }
                }
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let gam = self.nodes[gamma.0].data.clone();
                let mut dx = vec![0.0; m * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..m {
                    let row = &self.nodes[x.0].data[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gr = &g[i * d..(i + 1) * d];
                    let dxhat: Vec<f64> = gr.iter().zip(&gam).map(|(gi, gj)| gi * gj).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx[i * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accum(x, &dx);
                self.accum(gamma, &dgamma);
                self.accum(beta, &dbeta);
            }
            Op::CrossEntropyNll { logits, ref targets } => {
                let (m, v) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let gs = g[0] / m as f64;
                let mut dx = vec![0.0; m * v];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - max).exp() / denom;
                        dx[i * v + j] = gs * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum(logits, &dx);
            }
            Op::MaskedFill { x, ref mask } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(mask)
                    .map(|(gi, &msk)| if msk { 0.0 } else { *gi })
                    .collect();
                self.accum(x, &dx);
            }
            Op::GatherRows { src, ref rows } => {
                let (r, d) = (self.nodes[src.0].shape[0], self.nodes[src.0].shape[1]);
                let mut dsrc = vec![0.0; r * d];
                for (i, &ri) in rows.iter().enumerate() {
                    for j in 0..d {
                        dsrc[ri * d + j] += g[i * d + j];
                    }
                }
                self.accum(src, &dsrc);
            }
            Op::ScatterAddRows { src, ref rows, .. } => {
                let (m, d) = (self.nodes[src.0].shape[0], self.nodes[src.0].shape[1]);
                let mut dsrc = vec![0.0; m * d];
                for (i, &ri) in rows.iter().enumerate() {
                    dsrc[i * d..(i + 1) * d].copy_from_slice(&g[ri * d..(ri + 1) * d]);
                }
                self.accum(src, &dsrc);
            }
            Op::Column { x, col } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + col] = g[i];
                }
                self.accum(x, &dx);
            }
            Op::ScaleRows { x, s } => {
                let (m, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let sv = &self.nodes[s.0].data;
                let dx: Vec<f64> = g.iter().enumerate().map(|(idx, gi)| gi * sv[idx / d]).collect();
                let mut ds = vec![0.0; m];
                for (idx, gi) in g.iter().enumerate() {
                    ds[idx / d] += gi * self.nodes[x.0].data[idx];
                }
                self.accum(x, &dx);
                self.accum(s, &ds);
            }
            Op::MulCols { x, s } => {
                let k = self.nodes[s.0].data.len();
                let sv = &self.nodes[s.0].data;
                let dx: Vec<f64> = g.iter().enumerate().map(|(idx, gi)| gi * sv[idx % k]).collect();
                let mut ds = vec![0.0; k];
                for (idx, gi) in g.iter().enumerate() {
                    ds[idx % k] += gi * self.nodes[x.0].data[idx];
                }
                self.accum(x, &dx);
                self.accum(s, &ds);
            }
            Op::DivCols { x, s } => {
                let k = self.nodes[s.0].data.len();
                let sv = &self.nodes[s.0].data;
                let dx: Vec<f64> = g.iter().enumerate().map(|(idx, gi)| gi / sv[idx % k]).collect();
                let mut ds = vec![0.0; k];
                for (idx, gi) in g.iter().enumerate() {
                    let sj = sv[idx % k];
                    ds[idx % k] -= gi * self.nodes[x.0].data[idx] / (sj * sj);
                }
                self.accum(x, &dx);
                self.accum(s, &ds);
            }
            Op::DivScalar { x, s } => {
                let sv = self.nodes[s.0].data[0];
                let dx: Vec<f64> = g.iter().map(|gi| gi / sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gi, xi)| -gi * xi / (sv * sv))
                    .sum();
                self.accum(x, &dx);
                self.accum(s, &[ds]);
            }
            Op::RowSum { x } => {
                let (m, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut dx = vec![0.0; m * k];
                for i in 0..m {
                    for o in dx[i * k..(i + 1) * k].iter_mut() {
                        *o = g[i];
                    }
                }
                self.accum(x, &dx);
            }
            Op::MeanRows { x } => {
                let (m, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let inv = 1.0 / m as f64;
                let mut dx = vec![0.0; m * d];
                for i in 0..m {
                    for j in 0..d {
                        dx[i * d + j] = g[j] * inv;
                    }
                }
                self.accum(x, &dx);
            }
            Op::ConcatCols { ref xs } => {
                let m = self.nodes[out].shape[0];
                let total = self.nodes[out].shape[1];
                let widths: Vec<usize> = xs.iter().map(|&x| self.nodes[x.0].shape[1]).collect();
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    let mut dx = vec![0.0; m * w];
                    for i in 0..m {
                        dx[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.accum(x, &dx);
                    offset += w;
                }
            }
            Op::ConcatRows { ref xs } => {
                let d = self.nodes[out].shape[1];
                let mut offset = 0;
                for &x in xs {
                    let mx = self.nodes[x.0].shape[0];
                    let dx = g[offset * d..(offset + mx) * d].to_vec();
                    self.accum(x, &dx);
                    offset += mx;
                }
            }
            Op::SliceCols { x, start, end } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let w = end - start;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accum(x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.accum(x, &dx);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].data.len();
                let dx = vec![g[0] / n as f64; n];
                self.accum(x, &dx);
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a.0].data.len();
                let scale = 2.0 * g[0] / n as f64;
                let da: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.accum(a, &da);
                self.accum(b, &db);
            }
            Op::Reshape { x } => {
                self.accum(x, g);
            }
        }
    }
}
