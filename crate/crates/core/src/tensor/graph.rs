use super::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        cos: Vec<F>,
        sin: Vec<F>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<F>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        count: usize,
    },
    RowCosine {
        a: Var,
        b: Var,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, F)>),
}

#[derive(Debug)]
struct Node<F: Real> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A define-by-run computation record. Nodes are appended in evaluation order,
/// so every node's inputs precede it and reverse insertion order is a valid
/// reverse topological order.
#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar root with respect to the leaves that require them.
#[derive(Debug)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

/// Mutable view of `v`'s gradient buffer, zero-initialised on first use.
fn grad_slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are produced for it only if `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node is not a scalar");
        val[0]
    }

    /// Per-head attention probabilities `[batch, heads, T, T]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[F], usize, usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs,
                seq_len,
                heads,
                ..
            } => Some((probs.as_slice(), *heads, *seq_len)),
            _ => None,
        }
    }

    // ---- operations -------------------------------------------------------

    /// `a [m, k] @ b [k, n]`; `a` may have any leading axes that flatten to `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sb.len(), 2, "matmul rhs must be a matrix");
        let k = cols_of(&sa);
        assert_eq!(k, sb[0], "matmul inner dimension {sa:?} x {sb:?}");
        let m = self.value(a).len() / k;
        let n = sb[1];
        let out = matmul_into(self.value(a), self.value(b), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, out, Op::MatMul { a, b, m, k, n }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| x / (F::one() + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), rg)
    }

    /// Root-mean-square normalisation over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: F) -> Var {
        let c = cols_of(self.shape(x));
        assert_eq!(self.value(w).len(), c, "rms_norm gain length");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut inv_rms = Vec::with_capacity(xv.len() / c);
        let mut out = Vec::with_capacity(xv.len());
        let cf = F::of(c as f64);
        for row in xv.chunks_exact(c) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / cf;
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &g)| v * r * g));
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x, w, inv_rms }, rg)
    }

    /// Gathers rows of `table [V, C]` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        assert_eq!(shape.len(), 2, "embedding table must be a matrix");
        let (vocab, c) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    context: "embedding lookup",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotates consecutive pairs `(2i, 2i+1)` of every `head_dim`-wide block of
    /// each row by precomputed angles. `cos`/`sin` are `[rows, head_dim / 2]`.
    pub fn rope(&mut self, x: Var, cos: Vec<F>, sin: Vec<F>, head_dim: usize) -> Var {
        let c = cols_of(self.shape(x));
        assert!(head_dim % 2 == 0 && c % head_dim == 0);
        let half = head_dim / 2;
        let xv = self.value(x);
        let rows = xv.len() / c;
        assert_eq!(cos.len(), rows * half);
        assert_eq!(sin.len(), rows * half);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let (cs, sn) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            let src = &xv[r * c..(r + 1) * c];
            let dst = &mut out[r * c..(r + 1) * c];
            for (hs, hd) in src.chunks_exact(head_dim).zip(dst.chunks_exact_mut(head_dim)) {
                for i in 0..half {
                    let (a, b) = (hs[2 * i], hs[2 * i + 1]);
                    hd[2 * i] = a * cs[i] - b * sn[i];
                    hd[2 * i + 1] = a * sn[i] + b * cs[i];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            },
            rg,
        )
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, heads * d]`; each consecutive block of
    /// `seq_len` rows is an independent sequence. Scores are scaled by `1/sqrt(d)`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let shape = self.shape(q).to_vec();
        assert_eq!(self.shape(k), shape.as_slice());
        assert_eq!(self.shape(v), shape.as_slice());
        let c = cols_of(&shape);
        assert_eq!(c % heads, 0);
        let d = c / heads;
        let rows = self.value(q).len() / c;
        assert_eq!(rows % seq_len, 0, "rows must be a multiple of seq_len");
        let batch = rows / seq_len;
        let t = seq_len;
        let scale = F::one() / F::of(d as f64).sqrt();

        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![F::zero(); batch * heads * t * t];
        let mut out = vec![F::zero(); rows * c];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * c + h * d;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                // SAFETY: all views stay inside q/k/v/probs by construction.
                unsafe {
                    F::gemm(
                        t,
                        d,
                        t,
                        scale,
                        qv.as_ptr().add(base),
                        c as isize,
                        1,
                        kv.as_ptr().add(base),
                        1,
                        c as isize,
                        F::zero(),
                        p.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                for row in 0..t {
                    let r = &mut p[row * t..(row + 1) * t];
                    let mx = r[..=row].iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                    let mut z = F::zero();
                    for x in &mut r[..=row] {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    let inv = F::one() / z;
                    r[..=row].iter_mut().for_each(|x| *x *= inv);
                    r[row + 1..].iter_mut().for_each(|x| *x = F::zero());
                }
                unsafe {
                    F::gemm(
                        t,
                        t,
                        d,
                        F::one(),
                        p.as_ptr(),
                        t as isize,
                        1,
                        vv.as_ptr().add(base),
                        c as isize,
                        1,
                        F::zero(),
                        out.as_mut_ptr().add(base),
                        c as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Softmax over the last axis. Non-finite inputs are rejected.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let c = cols_of(self.shape(a));
        let av = self.value(a);
        if av.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let mut out = Vec::with_capacity(av.len());
        for row in av.chunks_exact(c) {
            let mx = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - mx).exp()));
            let z: F = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|x| *x = *x / z);
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg))
    }

    /// Mean cross-entropy over rows of `logits [R, V]` against one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&x| Some(x)).collect();
        self.masked_cross_entropy(logits, &t)
    }

    /// Cross-entropy averaged over the rows whose target is `Some`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vocab = cols_of(self.shape(logits));
        let lv = self.value(logits);
        let rows = lv.len() / vocab;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::invalid("cross-entropy needs at least one target"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::OutOfRange {
                context: "cross_entropy target",
                index: bad,
                limit: vocab,
            });
        }
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, (row, tgt)) in lv.chunks_exact(vocab).zip(targets).enumerate() {
            let Some(tgt) = *tgt else { continue };
            let mx = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = F::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - mx).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|x| *x = *x / z);
            total += (z.ln() + mx - row[tgt]).f64();
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let loss = F::of(total / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean over rows of the cosine similarity between matching rows of `a` and `b`.
    pub fn row_cosine_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "cosine of {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let c = cols_of(self.shape(a));
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.len() / c;
        let mut total = 0.0f64;
        for (ra, rb) in av.chunks_exact(c).zip(bv.chunks_exact(c)) {
            let (mut dot, mut na, mut nb) = (F::zero(), F::zero(), F::zero());
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == F::zero() || nb == F::zero() {
                return Err(Error::ZeroNorm("row cosine similarity"));
            }
            total += (dot / (na.sqrt() * nb.sqrt())).f64();
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![1],
            vec![F::of(total / rows as f64)],
            Op::RowCosine { a, b },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut s = F::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum takes scalars");
            s += w * self.value(v)[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(vec![1], vec![s], Op::WeightedSum(terms.to_vec()), rg)
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Each node is visited once, in
    /// reverse insertion order; only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(if i == root.0 {
                        "backward root"
                    } else {
                        "leaf gradient"
                    }));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let bv = self.value(b);
                    let da = grad_slot(grads, a, m * k);
                    // dA += dY [m,n] @ B^T [n,k]
                    unsafe {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            g.as_ptr(),
                            n as isize,
                            1,
                            bv.as_ptr(),
                            1,
                            n as isize,
                            F::one(),
                            da.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                }
                if self.rg(b) {
                    let av = self.value(a);
                    let db = grad_slot(grads, b, k * n);
                    // dB += A^T [k,m] @ dY [m,n]
                    unsafe {
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            av.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            F::one(),
                            db.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let d = g.iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, a, d);
                }
                if self.rg(b) {
                    let d = g.iter().zip(self.value(a)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, b, d);
                }
            }
            &Op::Scale(a, c) => {
                accumulate(grads, a, g.iter().map(|&x| x * c).collect());
            }
            &Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(&gy, &x)| {
                        let s = F::one() / (F::one() + (-x).exp());
                        gy * s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                accumulate(grads, a, d);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let c = cols_of(self.shape(x));
                let (xv, wv) = (self.value(x), self.value(w));
                let cf = F::of(c as f64);
                if self.rg(x) {
                    let mut dx = vec![F::zero(); xv.len()];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let xs = &xv[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        // dot(g * w, xhat) / c
                        let mut dot = F::zero();
                        for j in 0..c {
                            dot += gs[j] * wv[j] * xs[j] * ir;
                        }
                        let coef = dot / cf;
                        for j in 0..c {
                            dx[r * c + j] = ir * (gs[j] * wv[j] - xs[j] * ir * coef);
                        }
                    }
                    accumulate(grads, x, dx);
                }
                if self.rg(w) {
                    let mut dw = vec![F::zero(); c];
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..c {
                            dw[j] += g[r * c + j] * xv[r * c + j] * ir;
                        }
                    }
                    accumulate(grads, w, dw);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let c = cols_of(self.shape(table));
                let len = self.value(table).len();
                let dt = grad_slot(grads, table, len);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += g[r * c + j];
                    }
                }
            }
            Op::Rope {
                x,
                cos,
                sin,
                head_dim,
            } => {
                let c = cols_of(self.shape(*x));
                let half = head_dim / 2;
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..g.len() / c {
                    let (cs, sn) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                    let src = &g[r * c..(r + 1) * c];
                    let dst = &mut dx[r * c..(r + 1) * c];
                    for (hs, hd) in src.chunks_exact(*head_dim).zip(dst.chunks_exact_mut(*head_dim)) {
                        for i in 0..half {
                            let (a, b) = (hs[2 * i], hs[2 * i + 1]);
                            hd[2 * i] = a * cs[i] + b * sn[i];
                            hd[2 * i + 1] = -a * sn[i] + b * cs[i];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *seq_len, *heads, probs, g, grads),
            &Op::Softmax(a) => {
                let c = cols_of(self.shape(a));
                let y = &node.value;
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = cols_of(self.shape(*logits));
                let scale = g[0] / F::of(*count as f64);
                let mut d = vec![F::zero(); probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = *tgt else { continue };
                    for j in 0..vocab {
                        d[r * vocab + j] = probs[r * vocab + j] * scale;
                    }
                    d[r * vocab + tgt] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            &Op::RowCosine { a, b } => {
                let c = cols_of(self.shape(a));
                let (av, bv) = (self.value(a), self.value(b));
                let rows = av.len() / c;
                let scale = g[0] / F::of(rows as f64);
                let mut da = vec![F::zero(); av.len()];
                let mut db = vec![F::zero(); av.len()];
                for r in 0..rows {
                    let (ra, rb) = (&av[r * c..(r + 1) * c], &bv[r * c..(r + 1) * c]);
                    let (mut dot, mut na2, mut nb2) = (F::zero(), F::zero(), F::zero());
                    for (&x, &y) in ra.iter().zip(rb) {
                        dot += x * y;
                        na2 += x * x;
                        nb2 += y * y;
                    }
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let cos = dot / (na * nb);
                    let inv = F::one() / (na * nb);
                    for j in 0..c {
                        da[r * c + j] = scale * (rb[j] * inv - cos * ra[j] / na2);
                        db[r * c + j] = scale * (ra[j] * inv - cos * rb[j] / nb2);
                    }
                }
                if self.rg(a) {
                    accumulate(grads, a, da);
                }
                if self.rg(b) {
                    accumulate(grads, b, db);
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                accumulate(grads, a, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        accumulate(grads, v, vec![g[0] * w]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        t: usize,
        heads: usize,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let c = cols_of(self.shape(q));
        let d = c / heads;
        let rows = g.len() / c;
        let batch = rows / t;
        let scale = F::one() / F::of(d as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![F::zero(); g.len()];
        let mut dk = vec![F::zero(); g.len()];
        let mut dv = vec![F::zero(); g.len()];
        let mut ds = vec![F::zero(); t * t];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * c + h * d;
                let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                // SAFETY: strided views stay inside their buffers.
                unsafe {
                    // dP = dO V^T
                    F::gemm(
                        t,
                        d,
                        t,
                        F::one(),
                        g.as_ptr().add(base),
                        c as isize,
                        1,
                        vv.as_ptr().add(base),
                        1,
                        c as isize,
                        F::zero(),
                        ds.as_mut_ptr(),
                        t as isize,
                        1,
                    );
                }
                for row in 0..t {
                    let pr = &p[row * t..(row + 1) * t];
                    let sr = &mut ds[row * t..(row + 1) * t];
                    let dot: F = pr[..=row].iter().zip(&sr[..=row]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=row {
                        sr[j] = pr[j] * (sr[j] - dot) * scale;
                    }
                    sr[row + 1..].iter_mut().for_each(|x| *x = F::zero());
                }
                unsafe {
                    // dQ = dS K
                    F::gemm(
                        t,
                        t,
                        d,
                        F::one(),
                        ds.as_ptr(),
                        t as isize,
                        1,
                        kv.as_ptr().add(base),
                        c as isize,
                        1,
                        F::one(),
                        dq.as_mut_ptr().add(base),
                        c as isize,
                        1,
                    );
                    // dK = dS^T Q
                    F::gemm(
                        t,
                        t,
                        d,
                        F::one(),
                        ds.as_ptr(),
                        1,
                        t as isize,
                        qv.as_ptr().add(base),
                        c as isize,
                        1,
                        F::one(),
                        dk.as_mut_ptr().add(base),
                        c as isize,
                        1,
                    );
                    // dV = P^T dO
                    F::gemm(
                        t,
                        t,
                        d,
                        F::one(),
                        p.as_ptr(),
                        1,
                        t as isize,
                        g.as_ptr().add(base),
                        c as isize,
                        1,
                        F::one(),
                        dv.as_mut_ptr().add(base),
                        c as isize,
                        1,
                    );
                }
            }
        }
        if self.rg(q) {
            accumulate(grads, q, dq);
        }
        if self.rg(k) {
            accumulate(grads, k, dk);
        }
        if self.rg(v) {
            accumulate(grads, v, dv);
        }
    }
}
