//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to propagate gradients back to its inputs.
//! Everything is a 2-D matrix; scalars are `1 x 1`.

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

use crate::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Transpose(Var),
    MaxPoolSegments { input: Var, argmax: Vec<usize> },
    Gather { table: Var, indices: Vec<usize> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LayerNorm { input: Var, inv_std: Vec<(T, bool)> },
    L2Normalize { input: Var, norms: Vec<T> },
    Softmax(Var),
    CausalSoftmax(Var),
    CrossEntropy { logits: Var, probs: Array2<T>, targets: Vec<Option<usize>>, count: usize },
    Sum(Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Tape of recorded operations.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that influenced it.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, `None` when `v` did not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros of the given shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Borrow the value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Array2<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn unary<F>(&self, a: Var, f: F) -> Array2<T>
    where
        F: FnOnce(&Array2<T>) -> Array2<T>,
    {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn binary<F>(&self, a: Var, b: Var, f: F) -> Array2<T>
    where
        F: FnOnce(&Array2<T>, &Array2<T>) -> Array2<T>,
    {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| {
            assert_eq!(x.ncols(), y.nrows(), "matmul inner dimension");
            x.dot(y)
        });
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add shape");
            x + y
        });
        self.push(out, Op::Add(a, b))
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul shape");
            x * y
        });
        self.push(out, Op::Mul(a, b))
    }

    /// Add a `1 x C` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let out = self.binary(a, row, |x, r| {
            assert_eq!(r.dim(), (1, x.ncols()), "add_row shape");
            x + r
        });
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiply every row of `a` element-wise by a `1 x C` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let out = self.binary(a, row, |x, r| {
            assert_eq!(r.dim(), (1, x.ncols()), "mul_row shape");
            x * r
        });
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.unary(a, |x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.unary(a, |x| x.mapv(|v| if v > T::zero() { v } else { T::zero() }));
        self.push(out, Op::Relu(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.unary(a, |x| x.t().to_owned());
        self.push(out, Op::Transpose(a))
    }

    /// Column-wise max over consecutive blocks of `segment` rows.
    ///
    /// Ties resolve to the earliest row of the block.
    pub fn max_pool_segments(&self, a: Var, segment: usize) -> Var {
        let (out, argmax) = self.unary_pair(a, |x| {
            assert!(segment > 0 && x.nrows() % segment == 0, "segment must divide rows");
            let blocks = x.nrows() / segment;
            let cols = x.ncols();
            let mut out = Array2::zeros((blocks, cols));
            let mut argmax = vec![0usize; blocks * cols];
            for b in 0..blocks {
                for c in 0..cols {
                    let mut best = b * segment;
                    let mut best_val = x[[best, c]];
                    for r in b * segment + 1..(b + 1) * segment {
                        if x[[r, c]] > best_val {
                            best_val = x[[r, c]];
                            best = r;
                        }
                    }
                    out[[b, c]] = best_val;
                    argmax[b * cols + c] = best;
                }
            }
            (out, argmax)
        });
        self.push(out, Op::MaxPoolSegments { input: a, argmax })
    }

    fn unary_pair<F, R>(&self, a: Var, f: F) -> (Array2<T>, R)
    where
        F: FnOnce(&Array2<T>) -> (Array2<T>, R),
    {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather(&self, table: Var, indices: &[usize]) -> Var {
        let out = self.unary(table, |t| {
            let mut out = Array2::zeros((indices.len(), t.ncols()));
            for (r, &i) in indices.iter().enumerate() {
                assert!(i < t.nrows(), "gather index {i} out of range {}", t.nrows());
                out.row_mut(r).assign(&t.row(i));
            }
            out
        });
        self.push(out, Op::Gather { table, indices: indices.to_vec() })
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.unary(a, |x| x.slice(s![start..start + len, ..]).to_owned());
        self.push(out, Op::SliceRows { input: a, start })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.unary(a, |x| x.slice(s![.., start..start + len]).to_owned());
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Standardize each row to zero mean and unit variance, dividing by
    /// `max(std, sigma_floor)`. No affine part; compose with `mul_row`/`add_row`.
    pub fn layer_norm(&self, a: Var, sigma_floor: T) -> Var {
        let (out, inv_std) = self.unary_pair(a, |x| {
            let n = T::of(x.ncols() as f64);
            let mut out = x.clone();
            let mut inv = Vec::with_capacity(x.nrows());
            for mut row in out.rows_mut() {
                let mean = row.sum() / n;
                row.mapv_inplace(|v| v - mean);
                let var = row.iter().map(|&v| v * v).sum::<T>() / n;
                let sd = var.sqrt();
                let floored = sd < sigma_floor;
                let is = T::one() / sd.max(sigma_floor);
                row.mapv_inplace(|v| v * is);
                inv.push((is, floored));
            }
            (out, inv)
        });
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    /// Scale each row to unit Euclidean norm. Rows with norm below 1e-12 are
    /// divided by 1e-12 instead.
    pub fn l2_normalize(&self, a: Var) -> Var {
        let (out, norms) = self.unary_pair(a, |x| {
            let floor = T::of(1e-12);
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.nrows());
            for mut row in out.rows_mut() {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
                row.mapv_inplace(|v| v / n);
                norms.push(n);
            }
            (out, norms)
        });
        self.push(out, Op::L2Normalize { input: a, norms })
    }

    pub fn softmax(&self, a: Var) -> Var {
        let out = self.unary(a, |x| softmax_rows(x, false));
        self.push(out, Op::Softmax(a))
    }

    /// Row softmax of a square matrix where row `i` only sees columns `<= i`.
    pub fn causal_softmax(&self, a: Var) -> Var {
        let out = self.unary(a, |x| {
            assert_eq!(x.nrows(), x.ncols(), "causal softmax needs a square matrix");
            softmax_rows(x, true)
        });
        self.push(out, Op::CausalSoftmax(a))
    }

    /// Mean negative log-likelihood over rows that carry a target.
    ///
    /// Panics when no row has a target; callers validate that first.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (out, probs) = self.unary_pair(logits, |x| {
            assert_eq!(x.nrows(), targets.len(), "one target slot per row");
            let probs = softmax_rows(x, false);
            let mut total = T::zero();
            let mut count = 0usize;
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    assert!(t < x.ncols(), "target {t} out of range");
                    total += -log_softmax_at(x.row(r), t);
                    count += 1;
                }
            }
            assert!(count > 0, "cross entropy without targets");
            (Array2::from_elem((1, 1), total / T::of(count as f64)), probs)
        });
        let count = targets.iter().filter(|t| t.is_some()).count();
        self.push(
            out,
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), count },
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = self.unary(a, |x| Array2::from_elem((1, 1), x.sum()));
        self.push(out, Op::Sum(a))
    }

    /// Mean of the rows as a `1 x C` node.
    pub fn mean_rows(&self, a: Var) -> Var {
        let rows = self.shape(a).0;
        let w = self.leaf(Array2::from_elem((1, rows), T::one() / T::of(rows as f64)));
        self.matmul(w, a)
    }

    /// Backpropagate from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads, *a, &g * bv);
                    accumulate(&mut grads, *b, &g * av);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let av = &nodes[a.0].value;
                    let rv = &nodes[r.0].value;
                    accumulate(&mut grads, *r, (&g * av).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, &g * rv);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::MaxPoolSegments { input, argmax } => {
                    let shape = nodes[input.0].value.dim();
                    let cols = shape.1;
                    let mut d = Array2::zeros(shape);
                    for (k, &r) in argmax.iter().enumerate() {
                        let (b, c) = (k / cols, k % cols);
                        d[[r, c]] += g[[b, c]];
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::Gather { table, indices } => {
                    let shape = nodes[table.0].value.dim();
                    let mut d = Array2::zeros(shape);
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::SliceRows { input, start } => {
                    let shape = nodes[input.0].value.dim();
                    let mut d = Array2::zeros(shape);
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *input, d);
                }
                Op::SliceCols { input, start } => {
                    let shape = nodes[input.0].value.dim();
                    let mut d = Array2::zeros(shape);
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *input, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = nodes[p.0].value.nrows();
                        accumulate(&mut grads, *p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = nodes[p.0].value.ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + cols]).to_owned());
                        offset += cols;
                    }
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let n = T::of(y.ncols() as f64);
                    let mut d = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / n;
                        let (is, floored) = inv_std[r];
                        // A floored row divides by a constant, so only the centering term remains.
                        let mean_gy = if floored {
                            T::zero()
                        } else {
                            gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n
                        };
                        for c in 0..y.ncols() {
                            d[[r, c]] = is * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::L2Normalize { input, norms } => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let gy = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..y.ncols() {
                            d[[r, c]] = (gr[c] - yr[c] * gy) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *input, d);
                }
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let gy = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..y.ncols() {
                            d[[r, c]] = yr[c] * (gr[c] - gy);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::CrossEntropy { logits, probs, targets, count } => {
                    let scale = g[[0, 0]] / T::of(*count as f64);
                    let mut d = Array2::zeros(probs.dim());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut row = d.row_mut(r);
                            row.assign(&probs.row(r));
                            row[t] -= T::one();
                            row.mapv_inplace(|v| v * scale);
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::Sum(a) => {
                    let shape = nodes[a.0].value.dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
            }
            // keep gradients of leaves (and anything else) for inspection
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

/// Numerically stable row softmax; `causal` zeroes entries above the diagonal.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>, causal: bool) -> Array2<T> {
    let mut out = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let visible = if causal { r + 1 } else { x.ncols() };
        let row = x.row(r);
        let max = row.iter().take(visible).fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for c in 0..visible {
            let e = (row[c] - max).exp();
            out[[r, c]] = e;
            total += e;
        }
        for c in 0..visible {
            out[[r, c]] /= total;
        }
    }
    out
}

/// `log softmax(row)[t]` computed with the log-sum-exp shift.
pub fn log_softmax_at<T: Scalar>(row: ndarray::ArrayView1<'_, T>, t: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[t] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use ndarray::array;

    fn probe(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        // small deterministic pseudo-random values, no ties
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Array2::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Checks d(loss)/d(input) of a single-input builder against central differences.
    fn check<F>(input: Array2<f64>, build: F)
    where
        F: Fn(&Graph<f64>, Var) -> Var,
    {
        let g = Graph::new();
        let x = g.leaf(input.clone());
        let out = build(&g, x);
        let grads = g.backward(out);
        let analytic = grads.get_or_zeros(x, input.dim());
        let numeric = central_difference(&input, 1e-5, |p| {
            let g = Graph::new();
            let x = g.leaf(p.clone());
            let out = build(&g, x);
            g.scalar(out)
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }

    fn weighted_sum(g: &Graph<f64>, v: Var, seed: u64) -> Var {
        let shape = g.shape(v);
        let w = g.leaf(probe(seed, shape.0, shape.1));
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        check(probe(1, 3, 4), |g, x| {
            let w = g.leaf(probe(2, 4, 2));
            let bias = g.leaf(probe(3, 1, 2));
            let y = g.add_row(g.matmul(x, w), bias);
            let y = g.mul_row(y, bias);
            weighted_sum(g, y, 4)
        });
        check(probe(5, 1, 4), |g, r| {
            let a = g.leaf(probe(6, 3, 4));
            let y = g.mul_row(a, r);
            let y = g.add_row(y, r);
            weighted_sum(g, y, 7)
        });
    }

    #[test]
    fn pooling_gather_slice_concat_gradients() {
        check(probe(8, 6, 3), |g, x| {
            let pooled = g.max_pool_segments(x, 3);
            let picked = g.gather(x, &[0, 5, 5, 2]);
            let sl = g.slice_rows(x, 1, 2);
            let sc = g.slice_cols(x, 1, 2);
            let sc = g.transpose(sc);
            let cat = g.concat_rows(&[pooled, picked, sl]);
            let a = weighted_sum(g, cat, 9);
            let b = weighted_sum(g, sc, 10);
            let cc = g.concat_cols(&[x, x]);
            let c = weighted_sum(g, cc, 11);
            g.add(g.add(a, b), c)
        });
    }

    #[test]
    fn normalization_gradients() {
        check(probe(12, 4, 5), |g, x| {
            let y = g.layer_norm(x, 1e-5);
            weighted_sum(g, y, 13)
        });
        check(probe(14, 4, 5), |g, x| {
            let y = g.l2_normalize(x);
            weighted_sum(g, y, 15)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        check(probe(16, 3, 4), |g, x| {
            let y = g.softmax(g.scale(x, 2.0));
            weighted_sum(g, y, 17)
        });
        check(probe(18, 4, 4), |g, x| {
            let y = g.causal_softmax(x);
            weighted_sum(g, y, 19)
        });
        check(probe(20, 4, 5), |g, x| g.cross_entropy(x, &[Some(1), None, Some(4), Some(0)]));
        check(probe(21, 3, 4), |g, x| {
            let y = g.relu(x);
            let m = g.mean_rows(y);
            weighted_sum(g, m, 22)
        });
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_classes() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Array2::zeros((2, 6)));
        let l = g.cross_entropy(x, &[Some(0), Some(5)]);
        assert!((g.scalar(l) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let g = Graph::<f64>::new();
        let x = g.leaf(array![[1.0, 5.0], [1.0, 1.0]]);
        let y = g.causal_softmax(x);
        let y = g.value(y);
        assert_eq!(y[[0, 0]], 1.0);
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn max_pool_breaks_ties_to_first_row() {
        let g = Graph::<f64>::new();
        let x = g.leaf(array![[1.0, 2.0], [1.0, 3.0]]);
        let p = g.max_pool_segments(x, 2);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 0.0], [0.0, 1.0]]);
    }
}
