//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Parameter
//! leaves read their value straight from the borrowed [`ParamStore`], so a
//! forward pass never copies weights. [`Tape::backward`] walks the record once
//! in reverse and returns per-parameter gradients.

use super::matrix::{attention_scale, masked_softmax, Matrix};
use super::param::{ParamGrads, ParamId, ParamStore};
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Softmax {
        input: NodeId,
        scale: T,
    },
    GatedMerge {
        base: NodeId,
        terms: Vec<(NodeId, NodeId)>,
    },
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    SliceRows {
        input: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Option<Matrix<T>>,
}

pub struct Tape<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(pid), _) => self.store.value(*pid),
            (_, Some(v)) => v,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Broadcast-adds the `1×c` node `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(a, bias), v))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn softmax(&mut self, input: NodeId, scale: T, causal: bool) -> NodeId {
        let v = masked_softmax(self.value(input), scale, causal);
        self.push(Op::Softmax { input, scale }, v)
    }

    /// Scaled attention normalization: row softmax of `scores / sqrt(d_emb)`.
    pub fn attention_normalize(&mut self, scores: NodeId, d_emb: usize, causal: bool) -> NodeId {
        self.softmax(scores, attention_scale(d_emb), causal)
    }

    /// `base + Σ gate_k · tok_k` with `1×1` gate nodes.
    ///
    /// A term whose gate is exactly zero leaves the forward value untouched, so
    /// zero gates reproduce `base` bit for bit; its gradient is still recorded.
    pub fn gated_merge(&mut self, base: NodeId, terms: &[(NodeId, NodeId)]) -> Result<NodeId> {
        let mut v = self.value(base).clone();
        for &(tok, gate) in terms {
            let g = self.value(gate);
            if g.shape() != (1, 1) {
                return Err(Error::FusionShape(format!(
                    "gate must be 1x1, got {:?}",
                    g.shape()
                )));
            }
            let g = g.data()[0];
            let t = self.value(tok);
            if t.shape() != v.shape() {
                return Err(Error::FusionShape(format!(
                    "token block {:?} does not match layer output {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            if g != T::zero() {
                v.axpy(g, t)?;
            }
        }
        Ok(self.push(
            Op::GatedMerge {
                base,
                terms: terms.to_vec(),
            },
            v,
        ))
    }

    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape(),
                rhs: (bad, 0),
            });
        }
        let v = t.gather_rows(rows);
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            v,
        ))
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = self.value(input);
        if start + len > m.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: m.shape(),
                rhs: (start + len, m.cols()),
            });
        }
        let v = m.slice_rows(start, len);
        Ok(self.push(Op::SliceRows { input, start }, v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vconcat(&mats)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    /// Mean negative log-likelihood over the rows that carry a target. Rows
    /// with `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: l.shape(),
                rhs: (targets.len(), 1),
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Evaluation("cross entropy with no targets".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= l.cols()) {
            return Err(Error::Vocabulary(bad as u32));
        }
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                total += log_sum_exp(l.row(i)) - l[(i, t)];
            }
        }
        let v = Matrix::scalar(total / T::lit(count as f64));
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            v,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn backward(&self, loss: NodeId) -> Result<ParamGrads<T>> {
        self.backward_with_trace(loss).map(|(g, _)| g)
    }

    /// Like [`Tape::backward`], also returning the node ids visited, in visit
    /// order.
    pub fn backward_with_trace(&self, loss: NodeId) -> Result<(ParamGrads<T>, Vec<NodeId>)> {
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        let seed = self.value(loss);
        grads[loss.0] = Some(Matrix::filled(seed.rows(), seed.cols(), T::one()));
        let mut params: Vec<Option<Matrix<T>>> = vec![None; self.store.len()];
        let mut visited = Vec::with_capacity(loss.0 + 1);

        for idx in (0..=loss.0).rev() {
            visited.push(NodeId(idx));
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(pid) => accumulate(&mut params[pid.0], g)?,
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::MatMulT(a, b) => {
                    // c = a·bᵀ: da = g·b, db = gᵀ·a
                    let da = g.matmul(self.value(*b))?;
                    let db = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads[a.0], da)?;
                    accumulate(&mut grads[b.0], db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone())?;
                    accumulate(&mut grads[b.0], g)?;
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[a.0], g)?;
                    accumulate(&mut grads[bias.0], db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s))?,
                Op::Softmax { input, scale } => {
                    // masked entries have y = 0, so their gradient vanishes
                    let y = self.nodes[idx].value.as_ref().expect("softmax value");
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = super::matrix::dot(yr, gr);
                        for (d, (&yv, &gv)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *d = *scale * yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads[input.0], dx)?;
                }
                Op::GatedMerge { base, terms } => {
                    for &(tok, gate) in terms {
                        let gv = self.scalar(gate);
                        let t = self.value(tok);
                        let dg = super::matrix::dot(g.data(), t.data());
                        accumulate(&mut grads[gate.0], Matrix::scalar(dg))?;
                        accumulate(&mut grads[tok.0], g.scale(gv))?;
                    }
                    accumulate(&mut grads[base.0], g)?;
                }
                Op::Gather { table, rows } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &v) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[table.0], dt)?;
                }
                Op::SliceRows { input, start } => {
                    let m = self.value(*input);
                    let mut dm = Matrix::zeros(m.rows(), m.cols());
                    for i in 0..g.rows() {
                        dm.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[input.0], dm)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        accumulate(&mut grads[p.0], g.slice_rows(offset, rows))?;
                        offset += rows;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let l = self.value(*logits);
                    let count = T::lit(targets.iter().flatten().count() as f64);
                    let upstream = g.data()[0] / count;
                    let mut dl = Matrix::zeros(l.rows(), l.cols());
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = l.row(i);
                        let lse = log_sum_exp(row);
                        for (j, d) in dl.row_mut(i).iter_mut().enumerate() {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *d = upstream * (p - onehot);
                        }
                    }
                    accumulate(&mut grads[logits.0], dl)?;
                }
                Op::Sum(a) => {
                    let m = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads[a.0], Matrix::filled(m.rows(), m.cols(), gv))?;
                }
            }
        }
        Ok((ParamGrads { slots: params }, visited))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
