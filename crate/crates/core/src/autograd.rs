//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Every value is an `Array2<f64>`; sequences are stored batch-major as
//! `[batch * seq_len, width]`. Ops cache what their backward pass needs.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    ScaleExp(Var, Var),
    DiagXent {
        logits: Var,
        probs: Array2<f64>,
    },
    Mse {
        pred: Var,
        target: Array2<f64>,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every parameter touched by the graph.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    pub grads: Vec<(ParamId, Array2<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls within one graph share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Broadcast a `[1, m]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(r)).and(&row).for_each(|h, &v| *h = (v - mean) * is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over `[batch * seq_len, width]`
    /// inputs. With `causal`, position `i` attends to positions `0..=i` only.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.dim();
        assert_eq!(rows % seq_len, 0, "rows not a multiple of seq_len");
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let batch = rows / seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((rows, width));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![r.clone(), c.clone()]);
                let kh = kv.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut p = qh.dot(&kh.t());
                p *= scale;
                softmax_rows_in_place(&mut p, causal);
                out.slice_mut(s![r.clone(), c.clone()]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
        )
    }

    /// Row `r` of the output is row `idx[r]` of `src`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let mut out = Array2::zeros((idx.len(), sv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&sv.row(i));
        }
        self.push(out, Op::Gather { src, idx })
    }

    /// Vertical concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat width mismatch");
        self.push(out, Op::Concat(a, b))
    }

    /// Row-wise L2 normalization. Callers must ensure no row is zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = xv.clone();
        for (mut row, &n) in out.outer_iter_mut().zip(&norms) {
            row /= n;
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// `a * exp(s)` for a `[1, 1]` scalar `s`.
    pub fn scale_exp(&mut self, a: Var, s_var: Var) -> Var {
        let f = self.scalar(s_var).exp();
        let out = self.value(a) * f;
        self.push(out, Op::ScaleExp(a, s_var))
    }

    /// Mean over rows of `-log softmax(row)[i]` for square `[n, n]` logits.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Var {
        let lv = self.value(logits);
        let n = lv.nrows();
        assert_eq!(n, lv.ncols(), "diagonal cross-entropy needs square logits");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, mut row) in probs.outer_iter_mut().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[i];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let out = Array2::from_elem((1, 1), loss / n as f64);
        self.push(out, Op::DiagXent { logits, probs })
    }

    /// Mean squared error against a constant target, averaged over all entries.
    pub fn mse(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shape mismatch");
        let n = pv.len().max(1) as f64;
        let loss = Zip::from(pv).and(&target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / n;
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, target })
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, vars: Vec<Var>) -> Var {
        assert!(!vars.is_empty());
        let mut out = self.value(vars[0]).clone();
        for v in &vars[1..] {
            out += self.value(*v);
        }
        self.push(out, Op::Sum(vars))
    }

    pub fn mean(&mut self, vars: Vec<Var>) -> Var {
        let n = vars.len() as f64;
        let s = self.sum(vars);
        self.scale(s, 1.0 / n)
    }

    /// Back-propagate from a `[1, 1]` output and collect parameter gradients.
    pub fn backward(&mut self, output: Var) -> ParamGrads {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out: Vec<(ParamId, Array2<f64>)> = self
            .params
            .iter()
            .map(|(&p, &v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(self.nodes[v.0].value.dim()));
                (p, g)
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        ParamGrads { grads: out }
    }

    fn backprop_node(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.dot(self.value(*b));
                let gb = g.t().dot(self.value(*a));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_grad(x));
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let cols = xhat.ncols() as f64;
                let dxhat = g * gv;
                let mut dx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let h = xhat.row(r);
                    let mean_d = dh.sum() / cols;
                    let mean_dh = dh.dot(&h) / cols;
                    Zip::from(dx.row_mut(r))
                        .and(&dh)
                        .and(&h)
                        .for_each(|o, &d, &hv| *o = inv_std[r] * (d - mean_d - hv * mean_dh));
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, width) = qv.dim();
                let batch = rows / seq_len;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Array2::zeros((rows, width));
                let mut gk = Array2::zeros((rows, width));
                let mut gvv = Array2::zeros((rows, width));
                for b in 0..batch {
                    let r = b * seq_len..(b + 1) * seq_len;
                    for h in 0..*heads {
                        let c = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![r.clone(), c.clone()]);
                        let qh = qv.slice(s![r.clone(), c.clone()]);
                        let kh = kv.slice(s![r.clone(), c.clone()]);
                        let vh = vv.slice(s![r.clone(), c.clone()]);
                        gvv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vh.t());
                        let ds = softmax_backward(p.view(), dp.view()) * scale;
                        gq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                        gk.slice_mut(s![r.clone(), c.clone()]).assign(&ds.t().dot(&qh));
                    }
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gvv);
            }
            Op::Gather { src, idx } => {
                let mut gs = Array2::zeros(self.value(*src).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = gs.row_mut(i);
                    dst += &g.row(r);
                }
                accumulate(grads, *src, gs);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).nrows();
                accumulate(grads, *a, g.slice(s![..na, ..]).to_owned());
                accumulate(grads, *b, g.slice(s![na.., ..]).to_owned());
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut gx = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let d = yr.dot(&gr);
                    Zip::from(gx.row_mut(r))
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gv, &yv| *o = (gv - yv * d) / norms[r]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::ScaleExp(a, s_var) => {
                let f = self.scalar(*s_var).exp();
                let av = self.value(*a);
                accumulate(grads, *a, g * f);
                let ds = Zip::from(g).and(av).fold(0.0, |acc, &gv, &x| acc + gv * x) * f;
                accumulate(grads, *s_var, Array2::from_elem((1, 1), ds));
            }
            Op::DiagXent { logits, probs } => {
                let n = probs.nrows();
                let c = g[[0, 0]] / n as f64;
                let mut gl = probs * c;
                for i in 0..n {
                    gl[[i, i]] -= c;
                }
                accumulate(grads, *logits, gl);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let c = 2.0 * g[[0, 0]] / pv.len().max(1) as f64;
                accumulate(grads, *pred, (pv - target) * c);
            }
            Op::Sum(vars) => {
                for v in vars {
                    accumulate(grads, *v, g.clone());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row softmax; with `causal`, entries above the diagonal are excluded and set to zero.
fn softmax_rows_in_place(p: &mut Array2<f64>, causal: bool) {
    for (i, mut row) in p.outer_iter_mut().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row
            .iter()
            .take(limit)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.iter_mut().take(limit).for_each(|v| *v /= sum);
    }
}

fn softmax_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(p.dim());
    for r in 0..p.nrows() {
        let pr = p.row(r);
        let dr = dp.row(r);
        let dot = pr.dot(&dr);
        Zip::from(ds.row_mut(r))
            .and(&pr)
            .and(&dr)
            .for_each(|o, &pv, &dv| *o = pv * (dv - dot));
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        f: &dyn Fn(&ParamStore) -> f64,
        store: &ParamStore,
        id: ParamId,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(store.value(id).dim());
        let mut s = store.clone();
        for idx in 0..out.len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let orig = s.value(id)[[r, c]];
            s.value_mut(id)[[r, c]] = orig + h;
            let up = f(&s);
            s.value_mut(id)[[r, c]] = orig - h;
            let down = f(&s);
            s.value_mut(id)[[r, c]] = orig;
            out[[r, c]] = (up - down) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|x| x * x).sum().sqrt();
        let scale = a.mapv(|x| x * x).sum().sqrt() + b.mapv(|x| x * x).sum().sqrt();
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    #[test]
    fn attention_and_norm_gradients_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", crate::params::trunc_normal(&mut rng, 6, 4, 1.0), false);
        let w = store.add("w", crate::params::trunc_normal(&mut rng, 4, 4, 0.5), true);
        let gamma = store.add("g", Array2::from_elem((1, 4), 1.1), false);
        let beta = store.add("b", Array2::from_elem((1, 4), 0.1), false);
        let s = store.add("s", array![[0.3]], false);
        let f = |st: &ParamStore| -> (Graph, Var) {
            let mut g = Graph::new();
            let xv = g.param(st, x);
            let wv = g.param(st, w);
            let h = g.matmul(xv, wv);
            let gm = g.param(st, gamma);
            let bt = g.param(st, beta);
            let n = g.layer_norm(h, gm, bt);
            let a = g.attention(n, h, xv, 3, 2, true);
            let a = g.gelu(a);
            let a = g.l2_normalize(a);
            let rows = g.gather(a, vec![0, 3]);
            let cols = g.gather(a, vec![2, 5]);
            let sim = g.matmul_t(rows, cols);
            let sv = g.param(st, s);
            let logits = g.scale_exp(sim, sv);
            let lt = g.transpose(logits);
            let l1 = g.diag_cross_entropy(logits);
            let l2 = g.diag_cross_entropy(lt);
            let m = g.mse(a, Array2::from_elem((6, 4), 0.2));
            let out = g.mean(vec![l1, l2, m]);
            (g, out)
        };
        let (mut g, out) = f(&store);
        let grads = g.backward(out);
        let loss = |st: &ParamStore| {
            let (g, o) = f(st);
            g.scalar(o)
        };
        for id in store.ids() {
            let num = numeric_grad(&loss, &store, id);
            let err = rel_err(grads.get(id).unwrap(), &num);
            assert!(err < 1e-6, "param {} rel err {err}", store.entry(id).name);
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut p = array![[1.0, 5.0], [2.0, 3.0]];
        softmax_rows_in_place(&mut p, true);
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);
        assert!((p[[1, 0]] + p[[1, 1]] - 1.0).abs() < 1e-15);
    }
}
