//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and the data
//! its local backward rule needs. Nodes only reference earlier nodes, so the
//! tape is always in topological order and `backward` is a single reverse
//! sweep that visits each node once.

use crate::error::TensorError;
use crate::kernels::{self, gemm};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Visibility pattern for [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// The first `prefix` positions see each other; every later position `i`
    /// sees the prefix and positions `<= i`.
    PrefixCausal { prefix: usize },
}

impl AttnMask {
    pub fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::PrefixCausal { prefix } => {
                if query < prefix {
                    key < prefix
                } else {
                    key <= query
                }
            }
        }
    }
}

/// Vector-Jacobian product of a user-supplied operation: maps the upstream
/// gradient to one gradient buffer per input.
pub type CustomVjp = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention(Box<AttnCache>),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows {
        x: Var,
        group_rows: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        logits: Var,
        targets: Vec<f64>,
        sig: Vec<f64>,
    },
    TokenLogProbs {
        logits: Var,
        targets: Vec<usize>,
        inv_temp: f64,
        probs: Vec<f64>,
    },
    ClippedSurrogate {
        logp: Var,
        slope: Vec<f64>,
    },
    Kl {
        logits: Var,
        inv_temp: f64,
        probs: Vec<f64>,
        log_ratio: Vec<f64>,
        kl_rows: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        vjp: CustomVjp,
    },
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    nq: usize,
    nk: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable operations and replays them in reverse.
///
/// A tape is confined to one thread of execution for the duration of a
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

type Result<T> = std::result::Result<T, TensorError>;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    /// A leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Tensor::from_parts(shape, data), requires_grad, op))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        self.push(
            "matmul",
            vec![m, n],
            out,
            &[a, b],
            Op::MatMul { a, b, m, k, n },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, &[a, b], Op::Add { a, b })
    }

    /// Adds a row vector to every slice along the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, data, &[x, row], Op::AddRow { x, row })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, data, &[x], Op::Scale { x, s })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::gelu(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, data, &[x], Op::Gelu { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        data.chunks_exact_mut(cols)
            .for_each(kernels::softmax_inplace);
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, data, &[x], Op::Softmax { x })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, data, &[x], Op::LogSoftmax { x })
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid(
                "layer_norm eps must be positive".into(),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / cols);
        let mut out = vec![0.0; xv.len()];
        for ((xr, hr), or) in xv
            .chunks_exact(cols)
            .zip(xhat.chunks_exact_mut(cols))
            .zip(out.chunks_exact_mut(cols))
        {
            inv_std.push(kernels::normalize_row(xr, eps, hr));
            for j in 0..cols {
                or[j] = hr[j] * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention applied independently to `groups`
    /// equally sized blocks of rows.
    ///
    /// `q` is `(groups·nq)×dk`, `k` is `(groups·nk)×dk` and `v` is
    /// `(groups·nk)×dv`; the result is `(groups·nq)×dv`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        mask: AttnMask,
    ) -> Result<Var> {
        let (qr, dk) = self.dims2("attention", q)?;
        let (kr, dk2) = self.dims2("attention", k)?;
        let (vr, dv) = self.dims2("attention", v)?;
        if groups == 0 || dk != dk2 || kr != vr || qr % groups != 0 || kr % groups != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let (nq, nk) = (qr / groups, kr / groups);
        if let AttnMask::PrefixCausal { .. } = mask {
            if nq != nk {
                return Err(TensorError::Invalid(
                    "prefix-causal attention needs as many keys as queries".into(),
                ));
            }
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; groups * nq * nk];
        let mut out = vec![0.0; groups * nq * dv];
        for g in 0..groups {
            let qg = &qv[g * nq * dk..(g + 1) * nq * dk];
            let kg = &kv[g * nk * dk..(g + 1) * nk * dk];
            let vg = &vv[g * nk * dv..(g + 1) * nk * dv];
            let pg = &mut probs[g * nq * nk..(g + 1) * nq * nk];
            gemm(nq, dk, nk, qg, false, kg, true, pg, 0.0);
            for (i, row) in pg.chunks_exact_mut(nk).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if mask.allows(i, j) {
                        *s * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                kernels::softmax_inplace(row);
            }
            gemm(
                nq,
                nk,
                dv,
                pg,
                false,
                vg,
                false,
                &mut out[g * nq * dv..(g + 1) * nq * dv],
                0.0,
            );
        }
        let cache = AttnCache {
            q,
            k,
            v,
            groups,
            nq,
            nk,
            dk,
            dv,
            scale,
            probs,
        };
        self.push(
            "attention",
            vec![qr, dv],
            out,
            &[q, k, v],
            Op::Attention(Box::new(cache)),
        )
    }

    /// Gathers rows of `table` (`V×D`) by index into a `len(ids)×D` tensor.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("embed", table)?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embed needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes: rows,
            });
        }
        let t = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| t[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        self.push(
            "embed",
            vec![ids.len(), cols],
            data,
            &[table],
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over consecutive blocks of `group_rows` rows: `(G·n)×D → G×D`.
    pub fn mean_rows(&mut self, x: Var, group_rows: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_rows", x)?;
        if group_rows == 0 || rows % group_rows != 0 {
            return Err(TensorError::Invalid(format!(
                "mean_rows: {rows} rows not divisible into groups of {group_rows}"
            )));
        }
        let groups = rows / group_rows;
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups * cols];
        for g in 0..groups {
            let o = &mut out[g * cols..(g + 1) * cols];
            for r in 0..group_rows {
                let row = &xv[(g * group_rows + r) * cols..(g * group_rows + r + 1) * cols];
                o.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a /= group_rows as f64);
        }
        self.push(
            "mean_rows",
            vec![groups, cols],
            out,
            &[x],
            Op::MeanRows { x, group_rows },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            "concat_rows",
            vec![rows, cols],
            data,
            parts,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > rows {
            return Err(TensorError::Invalid(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            "slice_rows",
            vec![len, cols],
            data,
            &[x],
            Op::SliceRows { x, start },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            vec![rows, total],
            data,
            parts,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::Invalid(format!(
                "slice_cols {start}..{} out of {cols} columns",
                start + len
            )));
        }
        let xv = self.value(x).data();
        let data = (0..rows)
            .flat_map(|r| xv[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            vec![rows, len],
            data,
            &[x],
            Op::SliceCols { x, start },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("reshape", shape, data, &[x], Op::Reshape { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], &[x], Op::Sum { x })
    }

    /// `Σ x_i w_i` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(
            "weighted_sum",
            vec![1],
            vec![s],
            &[x],
            Op::WeightedSum {
                x,
                w: w.data().to_vec(),
            },
        )
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, classes) = self.dims2("cross_entropy", logits)?;
        if targets.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![b, classes],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(classes).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= b as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of independent logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let xs = self.value(logits).data();
        if xs.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = xs.len() as f64;
        let loss = xs
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let sig = xs.iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(
            "bce_with_logits",
            vec![1],
            vec![loss],
            &[logits],
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                sig,
            },
        )
    }

    /// Per-row log-probability of `targets` under `softmax(logits / T)`,
    /// returned as a `rows×1` column.
    pub fn token_log_probs(
        &mut self,
        logits: Var,
        targets: &[usize],
        temperature: f64,
    ) -> Result<Var> {
        let (rows, classes) = self.dims2("token_log_probs", logits)?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "token_log_probs",
                lhs: vec![rows, classes],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes,
            });
        }
        if !(temperature > 0.0) {
            return Err(TensorError::Invalid("temperature must be positive".into()));
        }
        let inv_temp = 1.0 / temperature;
        let mut probs: Vec<f64> = self
            .value(logits)
            .data()
            .iter()
            .map(|v| v * inv_temp)
            .collect();
        let mut out = Vec::with_capacity(rows);
        for (row, &t) in probs.chunks_exact_mut(classes).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            out.push(row[t] - lse);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        self.push(
            "token_log_probs",
            vec![rows, 1],
            out,
            &[logits],
            Op::TokenLogProbs {
                logits,
                targets: targets.to_vec(),
                inv_temp,
                probs,
            },
        )
    }

    /// PPO clipped surrogate loss `-mean_i min(ρ_i A, clip(ρ_i, 1-ε, 1+ε) A)`
    /// with `ρ_i = exp(logp_i - old_logp_i)`.
    pub fn clipped_surrogate(
        &mut self,
        logp: Var,
        old_logp: &[f64],
        advantage: f64,
        eps: f64,
    ) -> Result<Var> {
        let lp = self.value(logp).data();
        if lp.len() != old_logp.len() {
            return Err(TensorError::ShapeMismatch {
                op: "clipped_surrogate",
                lhs: self.shape(logp).to_vec(),
                rhs: vec![old_logp.len()],
            });
        }
        let n = lp.len() as f64;
        let mut total = 0.0;
        let mut slope = Vec::with_capacity(lp.len());
        for (&new, &old) in lp.iter().zip(old_logp) {
            let ratio = (new - old).exp();
            let unclipped = ratio * advantage;
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
            if unclipped <= clipped {
                total += unclipped;
                slope.push(-unclipped / n);
            } else {
                total += clipped;
                slope.push(0.0);
            }
        }
        self.push(
            "clipped_surrogate",
            vec![1],
            vec![-total / n],
            &[logp],
            Op::ClippedSurrogate { logp, slope },
        )
    }

    /// Mean over rows of `KL(softmax(logits / T) ‖ exp(ref_logp))`.
    pub fn kl_to_reference(
        &mut self,
        logits: Var,
        ref_logp: &Tensor,
        temperature: f64,
    ) -> Result<Var> {
        if self.shape(logits) != ref_logp.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_to_reference",
                lhs: self.shape(logits).to_vec(),
                rhs: ref_logp.shape().to_vec(),
            });
        }
        if !(temperature > 0.0) {
            return Err(TensorError::Invalid("temperature must be positive".into()));
        }
        let inv_temp = 1.0 / temperature;
        let classes = ref_logp.cols();
        let mut probs: Vec<f64> = self
            .value(logits)
            .data()
            .iter()
            .map(|v| v * inv_temp)
            .collect();
        let mut log_ratio = vec![0.0; probs.len()];
        let mut kl_rows = Vec::with_capacity(probs.len() / classes);
        for ((row, lr), rr) in probs
            .chunks_exact_mut(classes)
            .zip(log_ratio.chunks_exact_mut(classes))
            .zip(ref_logp.data().chunks_exact(classes))
        {
            let lse = kernels::log_sum_exp(row);
            let mut kl = 0.0;
            for j in 0..classes {
                let logp = row[j] - lse;
                let p = logp.exp();
                lr[j] = logp - rr[j];
                row[j] = p;
                kl += p * lr[j];
            }
            kl_rows.push(kl.max(0.0));
        }
        let mean = kl_rows.iter().sum::<f64>() / kl_rows.len() as f64;
        self.push(
            "kl_to_reference",
            vec![1],
            vec![mean],
            &[logits],
            Op::Kl {
                logits,
                inv_temp,
                probs,
                log_ratio,
                kl_rows,
            },
        )
    }

    /// An operation with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: CustomVjp) -> Result<Var> {
        let (shape, data) = (value.shape().to_vec(), value.into_data());
        self.push(
            "custom",
            shape,
            data,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
        )
    }

    /// Accumulates gradients of the scalar `loss` into every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::StaleTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Forgets accumulated gradients so `backward` may run again.
    pub fn clear_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros for
    /// nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.as_ref().and_then(|g| g[v.0].as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient buffer of `v`, if the loss reached it.
    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref().and_then(|g| g[v.0].as_deref())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if tracked(a) {
                    let da = slot(grads, a, m * k);
                    gemm(m, n, k, g, false, val(b), true, da, 1.0);
                }
                if tracked(b) {
                    let db = slot(grads, b, k * n);
                    gemm(k, m, n, val(a), true, g, false, db, 1.0);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if tracked(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            &Op::AddRow { x, row } => {
                if tracked(x) {
                    axpy(slot(grads, x, g.len()), g, 1.0);
                }
                if tracked(row) {
                    let cols = nodes[row.0].value.numel();
                    let dr = slot(grads, row, cols);
                    for gr in g.chunks_exact(cols) {
                        axpy(dr, gr, 1.0);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if tracked(a) {
                    let bv = val(b);
                    let da = slot(grads, a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if tracked(b) {
                    let av = val(a);
                    let db = slot(grads, b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale { x, s } => axpy(slot(grads, x, g.len()), g, s),
            &Op::Gelu { x } => {
                let xv = val(x);
                let dx = slot(grads, x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * kernels::gelu_grad(xv[j]);
                }
            }
            &Op::Softmax { x } => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.cols();
                let dx = slot(grads, x, g.len());
                for ((yr, gr), dr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            &Op::LogSoftmax { x } => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.cols();
                let dx = slot(grads, x, g.len());
                for ((yr, gr), dr) in y
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = nodes[i].value.cols();
                let gv = val(*gain);
                if tracked(*gain) {
                    let dg = slot(grads, *gain, cols);
                    for (hr, gr) in xhat.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for j in 0..cols {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if tracked(*bias) {
                    let db = slot(grads, *bias, cols);
                    for gr in g.chunks_exact(cols) {
                        axpy(db, gr, 1.0);
                    }
                }
                if tracked(*x) {
                    let d = cols as f64;
                    let dx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; cols];
                    for (r, ((hr, gr), dr)) in xhat
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(dx.chunks_exact_mut(cols))
                        .enumerate()
                    {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cols {
                            dh[j] = gr[j] * gv[j];
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                        }
                        let c = inv_std[r] / d;
                        for j in 0..cols {
                            dr[j] += c * (d * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Attention(c) => self.backprop_attention(c, g, grads),
            Op::Embed { table, ids } => {
                let cols = nodes[table.0].value.cols();
                let dt = slot(grads, *table, nodes[table.0].value.numel());
                for (gr, &id) in g.chunks_exact(cols).zip(ids) {
                    axpy(&mut dt[id * cols..(id + 1) * cols], gr, 1.0);
                }
            }
            &Op::MeanRows { x, group_rows } => {
                let cols = nodes[i].value.cols();
                let dx = slot(grads, x, nodes[x.0].value.numel());
                let w = 1.0 / group_rows as f64;
                for (r, dr) in dx.chunks_exact_mut(cols).enumerate() {
                    let grp = r / group_rows;
                    axpy(dr, &g[grp * cols..(grp + 1) * cols], w);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    if tracked(p) {
                        axpy(slot(grads, p, n), &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let cols = nodes[i].value.cols();
                let dx = slot(grads, x, nodes[x.0].value.numel());
                axpy(&mut dx[start * cols..start * cols + g.len()], g, 1.0);
            }
            Op::ConcatCols { parts } => {
                let total = nodes[i].value.cols();
                let rows = nodes[i].value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if tracked(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            axpy(
                                &mut dp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                                1.0,
                            );
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let len = nodes[i].value.cols();
                let cols = nodes[x.0].value.cols();
                let dx = slot(grads, x, nodes[x.0].value.numel());
                for (r, gr) in g.chunks_exact(len).enumerate() {
                    axpy(&mut dx[r * cols + start..r * cols + start + len], gr, 1.0);
                }
            }
            &Op::Reshape { x } => axpy(slot(grads, x, g.len()), g, 1.0),
            &Op::Sum { x } => {
                let dx = slot(grads, x, nodes[x.0].value.numel());
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::WeightedSum { x, w } => axpy(slot(grads, *x, w.len()), w, g[0]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = nodes[logits.0].value.cols();
                let scale = g[0] / targets.len() as f64;
                let dl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut dl[r * classes..(r + 1) * classes];
                    axpy(row, &probs[r * classes..(r + 1) * classes], scale);
                    row[t] -= scale;
                }
            }
            Op::Bce {
                logits,
                targets,
                sig,
            } => {
                let scale = g[0] / targets.len() as f64;
                let dl = slot(grads, *logits, sig.len());
                for j in 0..sig.len() {
                    dl[j] += scale * (sig[j] - targets[j]);
                }
            }
            Op::TokenLogProbs {
                logits,
                targets,
                inv_temp,
                probs,
            } => {
                let classes = nodes[logits.0].value.cols();
                let dl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let s = g[r] * inv_temp;
                    let row = &mut dl[r * classes..(r + 1) * classes];
                    axpy(row, &probs[r * classes..(r + 1) * classes], -s);
                    row[t] += s;
                }
            }
            Op::ClippedSurrogate { logp, slope } => {
                axpy(slot(grads, *logp, slope.len()), slope, g[0])
            }
            Op::Kl {
                logits,
                inv_temp,
                probs,
                log_ratio,
                kl_rows,
            } => {
                let classes = nodes[logits.0].value.cols();
                let scale = g[0] * inv_temp / kl_rows.len() as f64;
                let dl = slot(grads, *logits, probs.len());
                for (r, &kl) in kl_rows.iter().enumerate() {
                    for j in r * classes..(r + 1) * classes {
                        dl[j] += scale * probs[j] * (log_ratio[j] - kl);
                    }
                }
            }
            Op::Custom { inputs, vjp } => {
                let parts = vjp(g);
                for (&v, part) in inputs.iter().zip(parts) {
                    if tracked(v) {
                        axpy(slot(grads, v, part.len()), &part, 1.0);
                    }
                }
            }
        }
    }

    fn backprop_attention(&self, c: &AttnCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttnCache {
            q,
            k,
            v,
            groups,
            nq,
            nk,
            dk,
            dv,
            scale,
            ref probs,
        } = *c;
        let nodes = &self.nodes;
        let (qv, kv, vv) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let mut dq = vec![0.0; qv.len()];
        let mut dk_buf = vec![0.0; kv.len()];
        let mut dv_buf = vec![0.0; vv.len()];
        let mut dp = vec![0.0; nq * nk];
        for grp in 0..groups {
            let pg = &probs[grp * nq * nk..(grp + 1) * nq * nk];
            let gg = &g[grp * nq * dv..(grp + 1) * nq * dv];
            let qg = &qv[grp * nq * dk..(grp + 1) * nq * dk];
            let kg = &kv[grp * nk * dk..(grp + 1) * nk * dk];
            let vg = &vv[grp * nk * dv..(grp + 1) * nk * dv];
            gemm(
                nk,
                nq,
                dv,
                pg,
                true,
                gg,
                false,
                &mut dv_buf[grp * nk * dv..(grp + 1) * nk * dv],
                0.0,
            );
            gemm(nq, dv, nk, gg, false, vg, true, &mut dp, 0.0);
            for (pr, dr) in pg.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            gemm(
                nq,
                nk,
                dk,
                &dp,
                false,
                kg,
                false,
                &mut dq[grp * nq * dk..(grp + 1) * nq * dk],
                0.0,
            );
            gemm(
                nk,
                nq,
                dk,
                &dp,
                true,
                qg,
                false,
                &mut dk_buf[grp * nk * dk..(grp + 1) * nk * dk],
                0.0,
            );
        }
        for (var, buf) in [(q, dq), (k, dk_buf), (v, dv_buf)] {
            if nodes[var.0].requires_grad {
                axpy(slot(grads, var, buf.len()), &buf, 1.0);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
