//! Minimal reverse-mode differentiation over flat `f64` buffers.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates vector-Jacobian products into every node. Shapes are not
//! tracked here; callers own the layout of each buffer.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

type Vjp = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Node {
    value: Rc<Vec<f64>>,
    parents: Vec<(usize, Vjp)>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}(len={})", self.id, self.len())
    }
}

/// Compressed sparse row matrix used for every fixed linear map
/// (convolutions with frozen weights, pooling, resampling, warps).
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row lists of `(column, weight)`.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                debug_assert!(c < cols);
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "sparse apply: input length");
        (0..self.rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "sparse transpose: input length");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.vals[k] * yr;
            }
        }
        out
    }
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.id]],
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Vec<f64>, parents: Vec<(usize, Vjp)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf node. Every node is differentiable; constants are leaves whose
    /// gradient is simply never read.
    pub fn input(&self, value: Vec<f64>) -> Var<'_> {
        self.push(value, Vec::new())
    }

    pub fn constant(&self, value: Vec<f64>) -> Var<'_> {
        self.input(value)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.input(vec![x])
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_rc(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a length-1 node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward needs a scalar root"
        );
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (pid, vjp) in &nodes[id].parents {
                let contrib = vjp(&g);
                debug_assert_eq!(contrib.len(), lens[*pid]);
                match &mut grads[*pid] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads, lens }
    }

    /// Concatenates buffers end to end.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        let mut value = Vec::new();
        let mut parents: Vec<(usize, Vjp)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let v = p.value();
            let n = v.len();
            value.extend_from_slice(&v);
            let start = offset;
            parents.push((
                p.id,
                Box::new(move |g: &[f64]| g[start..start + n].to_vec()),
            ));
            offset += n;
        }
        self.push(value, parents)
    }
}

fn broadcast_get(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn reduce_to(len: usize, g: Vec<f64>) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.graph.value_rc(self.id)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().as_ref().clone()
    }

    /// The single entry of a length-1 node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar node");
        v[0]
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let n = a.len().max(b.len());
        assert!(
            a.len() == b.len() || a.len() == 1 || b.len() == 1,
            "elementwise op on lengths {} and {}",
            a.len(),
            b.len()
        );
        let out: Vec<f64> = (0..n)
            .map(|i| f(broadcast_get(&a, i), broadcast_get(&b, i)))
            .collect();
        let (a1, b1) = (Rc::clone(&a), Rc::clone(&b));
        let (a2, b2) = (a, b);
        let (la, lb) = (a1.len(), b1.len());
        self.graph.push(
            out,
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| {
                        let full = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * da(broadcast_get(&a1, i), broadcast_get(&b1, i)))
                            .collect();
                        reduce_to(la, full)
                    }),
                ),
                (
                    other.id,
                    Box::new(move |g: &[f64]| {
                        let full = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * db(broadcast_get(&a2, i), broadcast_get(&b2, i)))
                            .collect();
                        reduce_to(lb, full)
                    }),
                ),
            ],
        )
    }

    /// Elementwise sum; either side may be length 1 and is broadcast.
    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y_rc = Rc::new(y.clone());
        self.graph.push(
            y,
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    g.iter()
                        .zip(x.iter().zip(y_rc.iter()))
                        .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect()
                }),
            )],
        )
    }

    pub fn add_const(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_const(self, c: f64) -> Var<'g> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_const(-1.0)
    }

    /// `1 - x`, the complement used by every mask blend.
    pub fn one_minus(self) -> Var<'g> {
        self.unary(|x| 1.0 - x, |_, _| -1.0)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// Sum of all entries, as a length-1 node.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let n = x.len();
        let s = x.iter().sum();
        self.graph.push(
            vec![s],
            vec![(self.id, Box::new(move |g: &[f64]| vec![g[0]; n]))],
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.len().max(1) as f64;
        self.sum().mul_const(1.0 / n)
    }

    pub fn dot(self, other: Var<'g>) -> Var<'g> {
        self.mul(other).sum()
    }

    /// Dot product with a fixed vector.
    pub fn dot_const(self, c: Rc<Vec<f64>>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.len(), c.len(), "dot_const length");
        let s = x.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        self.graph.push(
            vec![s],
            vec![(
                self.id,
                Box::new(move |g: &[f64]| c.iter().map(|ci| ci * g[0]).collect()),
            )],
        )
    }

    /// Gather: `out[i] = self[indices[i]]`. Indices may repeat, which makes
    /// this the broadcast, slice, and permutation primitive at once.
    pub fn select(self, indices: Rc<Vec<usize>>) -> Var<'g> {
        let x = self.value();
        let n = x.len();
        let out: Vec<f64> = indices.iter().map(|&i| x[i]).collect();
        self.graph.push(
            out,
            vec![(
                self.id,
                Box::new(move |g: &[f64]| {
                    let mut acc = vec![0.0; n];
                    for (gi, &i) in g.iter().zip(indices.iter()) {
                        acc[i] += gi;
                    }
                    acc
                }),
            )],
        )
    }

    /// Contiguous sub-range.
    pub fn slice(self, start: usize, len: usize) -> Var<'g> {
        self.select(Rc::new((start..start + len).collect()))
    }

    /// Repeats a length-1 node `n` times.
    pub fn broadcast(self, n: usize) -> Var<'g> {
        assert_eq!(self.len(), 1, "broadcast of non-scalar");
        self.select(Rc::new(vec![0; n]))
    }

    /// `M · self` for a fixed sparse `M`.
    pub fn linear(self, m: Arc<SparseMatrix>) -> Var<'g> {
        let out = m.apply(&self.value());
        self.graph.push(
            out,
            vec![(self.id, Box::new(move |g: &[f64]| m.apply_transpose(g)))],
        )
    }

    /// Dense row-major product: `self` is `m×k`, `rhs` is `k×n`.
    pub fn matmul(self, rhs: Var<'g>, m: usize, k: usize, n: usize) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.len(), m * k, "matmul lhs shape");
        assert_eq!(b.len(), k * n, "matmul rhs shape");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &b[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                dst.iter_mut().zip(row).for_each(|(d, r)| *d += aip * r);
            }
        }
        let (a1, b1) = (Rc::clone(&a), Rc::clone(&b));
        self.graph.push(
            out,
            vec![
                (
                    self.id,
                    Box::new(move |g: &[f64]| {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let row = &b1[p * n..(p + 1) * n];
                                da[i * k + p] = gi.iter().zip(row).map(|(x, y)| x * y).sum();
                            }
                        }
                        da
                    }),
                ),
                (
                    rhs.id,
                    Box::new(move |g: &[f64]| {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = a1[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let dst = &mut db[p * n..(p + 1) * n];
                                dst.iter_mut().zip(gi).for_each(|(d, x)| *d += aip * x);
                            }
                        }
                        db
                    }),
                ),
            ],
        )
    }

    /// Scales to unit Euclidean norm (with a tiny floor on the norm).
    pub fn normalize(self) -> Var<'g> {
        let norm = self.square().sum().add_const(1e-24).sqrt();
        self.div(norm)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error used by gradient checks: `‖a−b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Analytic gradient of `build` at `x` against central differences; returns
/// the relative error.
pub fn check_gradient(
    x: &[f64],
    h: f64,
    build: impl for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
) -> f64 {
    let g = Graph::new();
    let v = g.input(x.to_vec());
    let out = build(&g, v);
    let analytic = g.backward(out).wrt(v);
    let numeric = numeric_gradient(
        |p| {
            let g2 = Graph::new();
            let v2 = g2.input(p.to_vec());
            build(&g2, v2).item()
        },
        x,
        h,
    );
    relative_error(&analytic, &numeric, 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(
        f: impl Fn(&Graph, Var<'_>) -> f64 + Copy,
        build: impl for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
        x: Vec<f64>,
    ) {
        let g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&g, v);
        let analytic = g.backward(out).wrt(v);
        let numeric = numeric_gradient(
            |p| {
                let g2 = Graph::new();
                let v2 = g2.input(p.to_vec());
                f(&g2, v2)
            },
            &x,
            1e-6,
        );
        let err = relative_error(&analytic, &numeric, 1e-12);
        assert!(
            err < 1e-6,
            "relative error {err}: {analytic:?} vs {numeric:?}"
        );
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let build = |_g: &Graph, v: Var<'_>| -> f64 {
            v.tanh()
                .mul(v.sigmoid())
                .add_const(0.3)
                .square()
                .exp()
                .ln()
                .sum()
                .item()
        };
        check(
            build,
            |_g, v| {
                v.tanh()
                    .mul(v.sigmoid())
                    .add_const(0.3)
                    .square()
                    .exp()
                    .ln()
                    .sum()
            },
            vec![0.3, -1.2, 0.7, 2.0],
        );
    }

    #[test]
    fn broadcast_division_reduces_gradient() {
        check(
            |g, v| {
                let s = v.slice(0, 1);
                v.div(s.add_const(3.0))
                    .mul(g.constant(vec![1.0, 2.0, 3.0]))
                    .sum()
                    .item()
            },
            |g, v| {
                let s = v.slice(0, 1);
                v.div(s.add_const(3.0))
                    .mul(g.constant(vec![1.0, 2.0, 3.0]))
                    .sum()
            },
            vec![0.5, -0.25, 1.5],
        );
    }

    #[test]
    fn matmul_gradient_both_sides() {
        let f = |g: &Graph, v: Var<'_>| -> f64 {
            let a = v.slice(0, 6);
            let b = v.slice(6, 6);
            a.matmul(b, 2, 3, 2).square().sum().item() + 0.0 * g.len() as f64
        };
        check(
            f,
            |_g, v| {
                let a = v.slice(0, 6);
                let b = v.slice(6, 6);
                a.matmul(b, 2, 3, 2).square().sum()
            },
            (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
    }

    #[test]
    fn sparse_linear_and_select() {
        let m = Arc::new(SparseMatrix::from_rows(
            3,
            vec![vec![(0, 1.0), (2, -2.0)], vec![(1, 0.5)], vec![]],
        ));
        let idx = Rc::new(vec![2, 0, 0, 1]);
        check(
            |_g, v| {
                v.linear(Arc::clone(&m))
                    .select(Rc::clone(&idx))
                    .square()
                    .sum()
                    .item()
            },
            |_g, v| {
                v.linear(Arc::clone(&m))
                    .select(Rc::clone(&idx))
                    .square()
                    .sum()
            },
            vec![0.2, -0.4, 0.9],
        );
    }

    #[test]
    fn normalize_yields_unit_vector() {
        let g = Graph::new();
        let v = g.input(vec![3.0, 4.0]).normalize();
        let val = v.value();
        assert!((val[0] - 0.6).abs() < 1e-12 && (val[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn unused_input_has_zero_gradient() {
        let g = Graph::new();
        let a = g.input(vec![1.0, 2.0]);
        let b = g.input(vec![5.0]);
        let out = a.sum();
        let grads = g.backward(out);
        assert_eq!(grads.wrt(b), vec![0.0]);
        assert_eq!(grads.wrt(a), vec![1.0, 1.0]);
    }
}
