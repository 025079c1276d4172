use super::{Buf, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    // tanh(u) = 1 − 2/(e^{2u} + 1): one exp instead of libm's tanh, and the
    // saturated ends come out as exactly ±1.
    let t = S::one() - S::lit(2.0) / ((u + u).exp() + S::one());
    let value = half * x * (S::one() + t);
    let du = c * (S::one() + S::lit(3.0) * k * x * x);
    let grad = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (value, grad)
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push_node(shape, Buf::Owned(out), op, rg)
    }

    fn map_unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let out: Vec<S> = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_node(shape, Buf::Owned(out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.map_unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds `bias` (length = columns) to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias);
        let out: Vec<S> = self
            .value(x)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let rg = self.rg(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push_node(shape, Buf::Owned(out), Op::AddRowBias(x, bias), rg))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// `alpha · op(a) · op(b)`, plus `bias` added to every row when given.
    #[allow(clippy::too_many_arguments)]
    fn matmul_general(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        alpha: S,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (ar, ac) = self.matrix("matmul", a)?;
        let (br, bc) = self.matrix("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (rsa, csa) = strides(ac, ta);
        let (rsb, csb) = strides(bc, tb);
        let (av, bv) = (self.value(a), self.value(b));
        let out = match bias {
            None => S::gemm_new(m, k, n, alpha, av, rsa, csa, bv, rsb, csb, n as isize, 1),
            Some(bias) => {
                let bb = self.value(bias);
                if bb.len() != n {
                    return Err(Error::shape("linear bias", self.shape(bias), &[n]));
                }
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(bb);
                }
                S::gemm(
                    m,
                    k,
                    n,
                    alpha,
                    av,
                    rsa,
                    csa,
                    bv,
                    rsb,
                    csb,
                    S::one(),
                    &mut out,
                    n as isize,
                    1,
                );
                out
            }
        };
        let rg = self.rg(&[a, b]) || bias.is_some_and(|b| self.rg(&[b]));
        Ok(self.push_node(
            vec![m, n],
            Buf::Owned(out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
                alpha,
                bias,
            },
            rg,
        ))
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false, S::one(), None)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true, S::one(), None)
    }

    /// `alpha · a · bᵀ` as one node; attention logits use it to fold in the
    /// `1/√d` scale.
    pub fn matmul_nt_scaled(&mut self, a: Var, b: Var, alpha: S) -> Result<Var> {
        self.matmul_general(a, b, false, true, alpha, None)
    }

    /// `x · Wᵀ + b` with `W: [out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.matmul_general(x, w, false, true, S::one(), b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", x)?;
        let v = self.value(x);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push_node(vec![c, r], Buf::Owned(out), Op::Transpose(x), rg))
    }

    /// Concatenation along `axis` 0 (rows) or 1 (columns) of rank-2 tensors.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(Error::Contract(format!("concat axis {axis} unsupported"))),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, cols) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push_node(
            vec![rows, cols],
            Buf::Owned(out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (rows, _) = self.dims(first);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push_node(
            vec![rows, cols],
            Buf::Owned(out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start+len` of a matrix (a vector counts as one row).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push_node(
            vec![len, c],
            Buf::Owned(out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push_node(
            vec![r, len],
            Buf::Owned(out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix("embedding", table)?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        let t = self.value(table);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("embedding", &[rows, cols], &[id]));
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push_node(
            vec![ids.len(), cols],
            Buf::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise layer normalization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = S::lit(LN_EPS);
        let n = S::from_usize(cols).unwrap();
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xv.chunks(cols) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push_node(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (out, deriv): (Vec<S>, Vec<S>) = self.value(x).iter().map(|&v| gelu_parts(v)).unzip();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_node(shape, Buf::Owned(out), Op::Gelu { x, deriv }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    /// Softmax over the last axis restricted to `mask == true` entries.
    ///
    /// Masked entries are exactly zero; a row without any allowed entry is an
    /// error.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_softmax", self.shape(x), &[mask.len()]));
        }
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        let rows = out.chunks_mut(cols.max(1)).zip(xv.chunks(cols.max(1)));
        for (r, ((o, row), mrow)) in rows.zip(mask.chunks(cols.max(1))).enumerate() {
            let mut max = S::neg_infinity();
            let mut any = false;
            for (&v, &m) in row.iter().zip(mrow) {
                if m {
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(Error::DegenerateMask { row: r });
            }
            let mut total = S::zero();
            for ((o, &v), &m) in o.iter_mut().zip(row).zip(mrow) {
                if m {
                    let e = (v - max).exp();
                    *o = e;
                    total += e;
                }
            }
            let inv = S::one() / total;
            o.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push_node(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            Op::MaskedSoftmax(x),
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        self.prefix_softmax(x, |_| cols)
    }

    /// Softmax of a square score matrix where row `r` sees columns `0..=r`;
    /// equal to [`Tape::masked_softmax`] under the lower-triangular mask.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if rows != cols {
            return Err(Error::shape("causal_softmax", self.shape(x), &[cols, cols]));
        }
        self.prefix_softmax(x, |r| r + 1)
    }

    /// Softmax of row `r` over its first `allowed(r)` columns.
    fn prefix_softmax(&mut self, x: Var, allowed: impl Fn(usize) -> usize) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        let rows = out.chunks_mut(cols.max(1)).zip(xv.chunks(cols.max(1)));
        for (r, (o, row)) in rows.enumerate() {
            let len = allowed(r).min(cols);
            if len == 0 {
                return Err(Error::DegenerateMask { row: r });
            }
            let (o, row) = (&mut o[..len], &row[..len]);
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut total = S::zero();
            for (o, &v) in o.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            let inv = S::one() / total;
            o.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push_node(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            Op::MaskedSoftmax(x),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<S>();
        let rg = self.rg(&[x]);
        self.push_node(vec![1], Buf::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::from_usize(self.value(x).len().max(1)).unwrap();
        let s = self.value(x).iter().copied().sum::<S>() / n;
        let rg = self.rg(&[x]);
        self.push_node(vec![1], Buf::Owned(vec![s]), Op::Mean(x), rg)
    }

    /// `aᵀb / (‖a‖‖b‖)` over two same-shape tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let na = av.iter().map(|&x| x * x).sum::<S>().sqrt();
        let nb = bv.iter().map(|&x| x * x).sum::<S>().sqrt();
        if na == S::zero() || nb == S::zero() {
            return Err(Error::ZeroNorm("cosine_similarity"));
        }
        let dot = av.iter().zip(bv).map(|(&x, &y)| x * y).sum::<S>();
        let rg = self.rg(&[a, b]);
        Ok(self.push_node(
            vec![1],
            Buf::Owned(vec![dot / (na * nb)]),
            Op::Cosine { a, b, na, nb },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if n == S::zero() {
                return Err(Error::ZeroNorm("normalize_rows"));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(&[x]);
        Ok(self.push_node(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            Op::NormalizeRows { x, norms },
            rg,
        ))
    }

    /// `x · s` for a one-element tensor `s`; differentiable in both.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s)[0];
        let out: Vec<S> = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push_node(
            self.shape(x).to_vec(),
            Buf::Owned(out),
            Op::ScaleBy { x, s },
            rg,
        ))
    }

    /// In-batch contrastive loss over a square logit matrix.
    ///
    /// Row `i` treats column `partner[i]` as its positive and every other
    /// column except `i` itself as a negative:
    /// `mean_i [ log Σ_{j≠i} exp(l_ij) − l_{i,partner(i)} ]`.
    /// Evaluated relative to the positive logit with `ln_1p`, which keeps
    /// nearly-zero losses accurate to the last bits.
    pub fn contrastive(&mut self, logits: Var, partner: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix("contrastive", logits)?;
        if rows != cols || partner.len() != rows {
            return Err(Error::shape("contrastive", &[rows, cols], &[partner.len()]));
        }
        if rows < 2 {
            return Err(Error::Contract(
                "contrastive loss needs at least two rows".into(),
            ));
        }
        for (i, &p) in partner.iter().enumerate() {
            if p >= rows || p == i {
                return Err(Error::Contract(format!("invalid partner {p} for row {i}")));
            }
        }
        let l = self.value(logits);
        let mut probs = vec![S::zero(); rows * cols];
        let mut total = S::zero();
        for i in 0..rows {
            let row = &l[i * cols..(i + 1) * cols];
            let pos = row[partner[i]];
            let others = (0..cols).filter(|&j| j != i && j != partner[i]);
            let m = others
                .clone()
                .map(|j| row[j] - pos)
                .fold(S::neg_infinity(), S::max);
            let li = if m <= S::zero() {
                others.map(|j| (row[j] - pos).exp()).sum::<S>().ln_1p()
            } else {
                m + ((-m).exp() + others.map(|j| (row[j] - pos - m).exp()).sum::<S>()).ln()
            };
            total += li;
            for j in (0..cols).filter(|&j| j != i) {
                probs[i * cols + j] = (row[j] - pos - li).exp();
            }
        }
        let n = S::from_usize(rows).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push_node(
            vec![1],
            Buf::Owned(vec![total / n]),
            Op::Contrastive {
                logits,
                partner: partner.to_vec(),
                probs,
            },
            rg,
        ))
    }
}

pub(crate) fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}
