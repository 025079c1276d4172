use super::ops::strides;
use super::{Node, Op, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::dims2;

/// Gradient slot of `v`, allocated on first use; `None` when `v` needs no
/// gradient.
fn slot<'g, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'g mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'g mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); len]))
}

impl<S: Scalar> Tape<S> {
    pub(super) fn propagate(&mut self, idx: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let val = |v: Var| -> &[S] { &nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = slot(nodes, grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, &x)| *s -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((s, &x), &o) in s.iter_mut().zip(g).zip(val(*b)) {
                        *s += x * o;
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for ((s, &x), &o) in s.iter_mut().zip(g).zip(val(*a)) {
                        *s += x * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &v)| *s += v * *c);
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
                }
                let cols = val(*b).len();
                if let Some(s) = slot(nodes, grads, *b) {
                    for row in g.chunks(cols) {
                        s.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
                alpha,
                bias,
            } => {
                if let Some(s) = bias.and_then(|b| slot(nodes, grads, b)) {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                }
                let (_, ac) = dims2(&nodes[a.0].shape);
                let (_, bc) = dims2(&nodes[b.0].shape);
                let (rsa, csa) = strides(ac, ta);
                let (rsb, csb) = strides(bc, tb);
                let bv = val(b);
                let av = val(a);
                if nodes[a.0].requires_grad {
                    // dA' = α · G · B'ᵀ, written through A's own layout
                    let (gr, gc) = (n as isize, 1);
                    match &mut grads[a.0] {
                        Some(s) => S::gemm(
                            m,
                            n,
                            k,
                            alpha,
                            g,
                            gr,
                            gc,
                            bv,
                            csb,
                            rsb,
                            S::one(),
                            s,
                            rsa,
                            csa,
                        ),
                        empty => {
                            *empty = Some(S::gemm_new(
                                m, n, k, alpha, g, gr, gc, bv, csb, rsb, rsa, csa,
                            ))
                        }
                    }
                }
                if nodes[b.0].requires_grad {
                    // dB' = α · A'ᵀ · G
                    let (gr, gc) = (n as isize, 1);
                    match &mut grads[b.0] {
                        Some(s) => S::gemm(
                            k,
                            m,
                            n,
                            alpha,
                            av,
                            csa,
                            rsa,
                            g,
                            gr,
                            gc,
                            S::one(),
                            s,
                            rsb,
                            csb,
                        ),
                        empty => {
                            *empty = Some(S::gemm_new(
                                k, m, n, alpha, av, csa, rsa, g, gr, gc, rsb, csb,
                            ))
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = dims2(&nodes[x.0].shape);
                if let Some(s) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(s) = slot(nodes, grads, p) {
                        s.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(s, &v)| *s += v);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims2(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let (_, c) = dims2(&nodes[p.0].shape);
                    if let Some(s) = slot(nodes, grads, p) {
                        for i in 0..rows {
                            for j in 0..c {
                                s[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceRows { x, start } => {
                let (_, c) = dims2(&nodes[x.0].shape);
                if let Some(s) = slot(nodes, grads, x) {
                    s[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, &v)| *s += v);
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = dims2(&nodes[x.0].shape);
                let (_, len) = dims2(&node.shape);
                if let Some(s) = slot(nodes, grads, x) {
                    for i in 0..r {
                        for j in 0..len {
                            s[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (_, c) = dims2(&nodes[table.0].shape);
                if let Some(s) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        s[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(s, &v)| *s += v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (_, cols) = dims2(&node.shape);
                let gam = val(*gamma);
                if let Some(s) = slot(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *beta) {
                    for grow in g.chunks(cols) {
                        s.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    let n = S::from_usize(cols).unwrap();
                    let mut dh = vec![S::zero(); cols];
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..cols {
                            dh[j] = grow[j] * gam[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hrow[j];
                        }
                        let k = rstd[r] / n;
                        let out = &mut s[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += k * (n * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu { x, deriv } => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((s, &v), &d) in s.iter_mut().zip(g).zip(deriv) {
                        *s += v * d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((s, &v), &y) in s.iter_mut().zip(g).zip(node.value.iter()) {
                        *s += v * y * (S::one() - y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((s, &v), &y) in s.iter_mut().zip(g).zip(node.value.iter()) {
                        *s += v * y;
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let (_, cols) = dims2(&node.shape);
                if let Some(s) = slot(nodes, grads, *x) {
                    for (r, (grow, yrow)) in g.chunks(cols).zip(node.value.chunks(cols)).enumerate()
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<S>();
                        let out = &mut s[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let n = S::from_usize(s.len().max(1)).unwrap();
                    s.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
            &Op::Cosine { a, b, na, nb } => {
                let cos = node.value[0];
                let (av, bv) = (val(a), val(b));
                if let Some(s) = slot(nodes, grads, a) {
                    for ((s, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *s += g[0] * (y / (na * nb) - cos * x / (na * na));
                    }
                }
                if let Some(s) = slot(nodes, grads, b) {
                    for ((s, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *s += g[0] * (x / (na * nb) - cos * y / (nb * nb));
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let (_, cols) = dims2(&node.shape);
                if let Some(s) = slot(nodes, grads, *x) {
                    for (r, (grow, yrow)) in g.chunks(cols).zip(node.value.chunks(cols)).enumerate()
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<S>();
                        let out = &mut s[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                }
            }
            &Op::ScaleBy { x, s: sc } => {
                let c = val(sc)[0];
                let xv = val(x);
                if let Some(s) = slot(nodes, grads, sc) {
                    s[0] += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<S>();
                }
                if let Some(s) = slot(nodes, grads, x) {
                    s.iter_mut().zip(g).for_each(|(s, &v)| *s += v * c);
                }
            }
            Op::Contrastive {
                logits,
                partner,
                probs,
            } => {
                let rows = partner.len();
                let n = S::from_usize(rows).unwrap();
                if let Some(s) = slot(nodes, grads, *logits) {
                    let k = g[0] / n;
                    for i in 0..rows {
                        for j in 0..rows {
                            s[i * rows + j] += k * probs[i * rows + j];
                        }
                        s[i * rows + partner[i]] -= k;
                    }
                }
            }
        }
    }
}
