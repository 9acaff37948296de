//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Operations are recorded into a [`Graph`] as they are evaluated; each node
//! keeps its parents together with a closure computing the vector-Jacobian
//! product for that edge. [`Graph::backward`] walks nodes in reverse insertion
//! order (which is a reverse topological order, since ops can only reference
//! earlier nodes) and visits each node exactly once.
//!
//! Contract: calling `backward` a second time without [`Graph::reset_grads`]
//! is an error, not a silent re-accumulation.

use crate::num;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Identifies which operation produced a node; carried by error values so a
/// non-finite intermediate can be traced to its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    AddScalar,
    Scale,
    ClampMin,
    Matmul,
    Affine,
    RowSum,
    LogSumExpRows,
    Sum,
    Mean,
    SubColVec,
    SubScalarNode,
    Detach,
    SliceCols,
    SliceRows,
    ConcatCols,
    GaussianCdf,
    GaussianLogPdf,
    LogisticCdf,
    LogisticLogPdf,
    SortPerm,
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value produced by {op:?} at node {node}")]
    NonFinite { op: OpTag, node: usize },
    #[error("backward called twice without reset_grads")]
    BackwardTwice,
    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

type GradFn = Box<dyn Fn(&Tensor) -> Tensor>;

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    parents: Vec<(NodeId, GradFn)>,
    op: OpTag,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<(OpTag, usize)>,
    backward_done: bool,
    kernel_pdf_evals: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of logistic kernel density evaluations performed by
    /// `logistic_log_pdf` ops so far; the trainer's cost contract reads this.
    pub fn kernel_pdf_evals(&self) -> u64 {
        self.kernel_pdf_evals
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if the node never received one.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols()))
    }

    pub fn op(&self, id: NodeId) -> OpTag {
        self.nodes[id.0].op
    }

    fn push(&mut self, value: Tensor, op: OpTag, parents: Vec<(NodeId, GradFn)>) -> NodeId {
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some((op, self.nodes.len()));
        }
        self.nodes.push(Node { value, grad: None, parents, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, OpTag::Leaf, vec![])
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, OpTag::Constant, vec![])
    }

    /// Value copy with the gradient path cut.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.push(v, OpTag::Detach, vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        self.push(
            v,
            OpTag::Add,
            vec![
                (a, Box::new(|g: &Tensor| g.clone())),
                (b, Box::new(|g: &Tensor| g.clone())),
            ],
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        self.push(
            v,
            OpTag::Sub,
            vec![
                (a, Box::new(|g: &Tensor| g.clone())),
                (b, Box::new(|g: &Tensor| g.map(|x| -x))),
            ],
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = av.zip(&bv, |x, y| x * y);
        self.push(
            v,
            OpTag::Mul,
            vec![
                (a, Box::new(move |g: &Tensor| g.zip(&bv, |gv, y| gv * y))),
                (b, Box::new(move |g: &Tensor| g.zip(&av, |gv, x| gv * x))),
            ],
        )
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = av.zip(&bv, |x, y| x / y);
        let bv2 = bv.clone();
        self.push(
            v,
            OpTag::Div,
            vec![
                (a, Box::new(move |g: &Tensor| g.zip(&bv, |gv, y| gv / y))),
                (
                    b,
                    Box::new(move |g: &Tensor| {
                        let mut out = g.clone();
                        for i in 0..out.len() {
                            let x = av.data()[i];
                            let y = bv2.data()[i];
                            out.data_mut()[i] = -g.data()[i] * x / (y * y);
                        }
                        out
                    }),
                ),
            ],
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(v, OpTag::Neg, vec![(a, Box::new(|g: &Tensor| g.map(|x| -x)))])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::exp);
        let out = v.clone();
        self.push(v, OpTag::Exp, vec![(a, Box::new(move |g: &Tensor| g.zip(&out, |gv, e| gv * e)))])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let v = av.map(f64::ln);
        self.push(v, OpTag::Log, vec![(a, Box::new(move |g: &Tensor| g.zip(&av, |gv, x| gv / x)))])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(f64::tanh);
        let out = v.clone();
        self.push(
            v,
            OpTag::Tanh,
            vec![(a, Box::new(move |g: &Tensor| g.zip(&out, |gv, t| gv * (1.0 - t * t))))],
        )
    }

    /// Subgradient 0 at exactly zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let v = av.map(|x| x.max(0.0));
        self.push(
            v,
            OpTag::Relu,
            vec![(
                a,
                Box::new(move |g: &Tensor| g.zip(&av, |gv, x| if x > 0.0 { gv } else { 0.0 })),
            )],
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(num::sigmoid);
        let out = v.clone();
        self.push(
            v,
            OpTag::Sigmoid,
            vec![(a, Box::new(move |g: &Tensor| g.zip(&out, |gv, s| gv * s * (1.0 - s))))],
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let v = av.map(num::softplus);
        self.push(
            v,
            OpTag::Softplus,
            vec![(a, Box::new(move |g: &Tensor| g.zip(&av, |gv, x| gv * num::sigmoid(x))))],
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, OpTag::AddScalar, vec![(a, Box::new(|g: &Tensor| g.clone()))])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| c * x);
        self.push(v, OpTag::Scale, vec![(a, Box::new(move |g: &Tensor| g.map(|x| c * x)))])
    }

    /// Elementwise max(a, lo); gradient passes only where a > lo.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let v = av.map(|x| x.max(lo));
        self.push(
            v,
            OpTag::ClampMin,
            vec![(
                a,
                Box::new(move |g: &Tensor| g.zip(&av, |gv, x| if x > lo { gv } else { 0.0 })),
            )],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = av.matmul(&bv);
        let av2 = av.clone();
        let bv2 = bv.clone();
        self.push(
            v,
            OpTag::Matmul,
            vec![
                (a, Box::new(move |g: &Tensor| g.matmul_nt(&bv2))),
                (b, Box::new(move |g: &Tensor| av2.matmul_tn(g))),
            ],
        )
    }

    /// x (m,d) * w (d,h) + b (1,h) broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.clone();
        let wv = self.nodes[w.0].value.clone();
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), wv.cols(), "bias width must match weight output");
        let mut v = xv.matmul(&wv);
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                let val = v.get(r, c) + bv.get(0, c);
                v.set(r, c, val);
            }
        }
        let xv2 = xv.clone();
        let wv2 = wv.clone();
        self.push(
            v,
            OpTag::Affine,
            vec![
                (x, Box::new(move |g: &Tensor| g.matmul_nt(&wv2))),
                (w, Box::new(move |g: &Tensor| xv2.matmul_tn(g))),
                (b, Box::new(|g: &Tensor| g.col_sums())),
            ],
        )
    }

    /// (m,n) -> (m,1) sums along each row.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let cols = self.nodes[a.0].value.cols();
        let v = self.nodes[a.0].value.row_sums();
        self.push(
            v,
            OpTag::RowSum,
            vec![(
                a,
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let gv = g.get(r, 0);
                        for c in 0..cols {
                            out.set(r, c, gv);
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Row-wise log(sum(exp(.))) with max shift: (m,n) -> (m,1).
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.shape();
        let mut out = Tensor::zeros(m, 1);
        let mut soft = Tensor::zeros(m, n);
        for r in 0..m {
            let row = av.row(r);
            let lse = num::logsumexp(row);
            out.set(r, 0, lse);
            for c in 0..n {
                soft.set(r, c, (row[c] - lse).exp());
            }
        }
        self.push(
            out,
            OpTag::LogSumExpRows,
            vec![(
                a,
                Box::new(move |g: &Tensor| {
                    let mut gr = Tensor::zeros(m, n);
                    for r in 0..m {
                        let gv = g.get(r, 0);
                        for c in 0..n {
                            gr.set(r, c, gv * soft.get(r, c));
                        }
                    }
                    gr
                }),
            )],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.shape();
        let v = Tensor::scalar(av.sum());
        self.push(
            v,
            OpTag::Sum,
            vec![(a, Box::new(move |g: &Tensor| Tensor::filled(m, n, g.item())))],
        )
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.shape();
        let count = (m * n) as f64;
        let v = Tensor::scalar(av.sum() / count);
        self.push(
            v,
            OpTag::Mean,
            vec![(a, Box::new(move |g: &Tensor| Tensor::filled(m, n, g.item() / count)))],
        )
    }

    /// a (m,n) minus a column vector v (m,1) broadcast across columns.
    pub fn sub_colvec(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let cv = &self.nodes[col.0].value;
        assert_eq!(cv.cols(), 1, "broadcast operand must be a column vector");
        assert_eq!(cv.rows(), av.rows(), "row counts must match");
        let (m, n) = av.shape();
        let mut v = av.clone();
        for r in 0..m {
            let s = cv.get(r, 0);
            for c in 0..n {
                let val = v.get(r, c) - s;
                v.set(r, c, val);
            }
        }
        self.push(
            v,
            OpTag::SubColVec,
            vec![
                (a, Box::new(|g: &Tensor| g.clone())),
                (col, Box::new(|g: &Tensor| g.row_sums().map(|x| -x))),
            ],
        )
    }

    /// a (m,n) minus a scalar node s (1,1) broadcast everywhere.
    pub fn sub_scalar_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s.0].value.item();
        let v = self.nodes[a.0].value.map(|x| x - sv);
        self.push(
            v,
            OpTag::SubScalarNode,
            vec![
                (a, Box::new(|g: &Tensor| g.clone())),
                (s, Box::new(|g: &Tensor| Tensor::scalar(-g.sum()))),
            ],
        )
    }

    /// Columns [from, to) of a.
    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.shape();
        assert!(from < to && to <= n, "column slice out of range");
        let mut v = Tensor::zeros(m, to - from);
        for r in 0..m {
            for c in from..to {
                v.set(r, c - from, av.get(r, c));
            }
        }
        self.push(
            v,
            OpTag::SliceCols,
            vec![(
                a,
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(m, n);
                    for r in 0..m {
                        for c in from..to {
                            out.set(r, c, g.get(r, c - from));
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Rows [from, to) of a.
    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.shape();
        assert!(from < to && to <= m, "row slice out of range");
        let mut data = Vec::with_capacity((to - from) * n);
        for r in from..to {
            data.extend_from_slice(av.row(r));
        }
        let v = Tensor::from_vec(to - from, n, data);
        self.push(
            v,
            OpTag::SliceRows,
            vec![(
                a,
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(m, n);
                    for r in from..to {
                        for c in 0..n {
                            out.set(r, c, g.get(r - from, c));
                        }
                    }
                    out
                }),
            )],
        )
    }

    /// Horizontal concatenation; all inputs must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut v = Tensor::zeros(m, total);
        let mut offset = 0;
        for (p, w) in parts.iter().zip(widths.iter()) {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                for c in 0..*w {
                    v.set(r, offset + c, pv.get(r, c));
                }
            }
            offset += w;
        }
        let mut edges: Vec<(NodeId, GradFn)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (p, w) in parts.iter().zip(widths.iter()) {
            let (off, w) = (offset, *w);
            edges.push((
                *p,
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        for c in 0..w {
                            out.set(r, c, g.get(r, off + c));
                        }
                    }
                    out
                }),
            ));
            offset += w;
        }
        self.push(v, OpTag::ConcatCols, edges)
    }

    /// out[i,k] = Phi((y_i - mu[i,k]) / sigma[i,k]); y is (m,1), mu and sigma (m,K).
    pub fn gaussian_cdf(&mut self, y: NodeId, mu: NodeId, sigma: NodeId) -> NodeId {
        let yv = self.nodes[y.0].value.clone();
        let mv = self.nodes[mu.0].value.clone();
        let sv = self.nodes[sigma.0].value.clone();
        assert_eq!(yv.cols(), 1, "targets must be a column vector");
        assert_eq!(mv.shape(), sv.shape());
        assert_eq!(yv.rows(), mv.rows());
        let (m, k) = mv.shape();
        let mut v = Tensor::zeros(m, k);
        // density / sigma, the common factor of all three partials
        let mut dens = Tensor::zeros(m, k);
        let mut ts = Tensor::zeros(m, k);
        for r in 0..m {
            for c in 0..k {
                let t = (yv.get(r, 0) - mv.get(r, c)) / sv.get(r, c);
                v.set(r, c, num::norm_cdf(t));
                dens.set(r, c, num::norm_pdf(t) / sv.get(r, c));
                ts.set(r, c, t);
            }
        }
        let d1 = dens.clone();
        let d2 = dens.clone();
        self.push(
            v,
            OpTag::GaussianCdf,
            vec![
                (y, Box::new(move |g: &Tensor| g.zip(&d1, |gv, d| gv * d).row_sums())),
                (mu, Box::new(move |g: &Tensor| g.zip(&d2, |gv, d| -gv * d))),
                (
                    sigma,
                    Box::new(move |g: &Tensor| {
                        g.zip(&dens, |gv, d| gv * d).zip(&ts, |gd, t| -gd * t)
                    }),
                ),
            ],
        )
    }

    /// out[i,k] = log N(y_i; mu[i,k], sigma[i,k]^2); shapes as in `gaussian_cdf`.
    pub fn gaussian_log_pdf(&mut self, y: NodeId, mu: NodeId, sigma: NodeId) -> NodeId {
        let yv = self.nodes[y.0].value.clone();
        let mv = self.nodes[mu.0].value.clone();
        let sv = self.nodes[sigma.0].value.clone();
        assert_eq!(yv.cols(), 1, "targets must be a column vector");
        assert_eq!(mv.shape(), sv.shape());
        assert_eq!(yv.rows(), mv.rows());
        let (m, k) = mv.shape();
        let mut v = Tensor::zeros(m, k);
        let mut t_over_s = Tensor::zeros(m, k);
        let mut dsig = Tensor::zeros(m, k);
        for r in 0..m {
            for c in 0..k {
                let s = sv.get(r, c);
                let t = (yv.get(r, 0) - mv.get(r, c)) / s;
                v.set(r, c, -0.5 * t * t - s.ln() - 0.5 * num::LN_2PI);
                t_over_s.set(r, c, t / s);
                dsig.set(r, c, (t * t - 1.0) / s);
            }
        }
        let a1 = t_over_s.clone();
        let a2 = t_over_s;
        self.push(
            v,
            OpTag::GaussianLogPdf,
            vec![
                (y, Box::new(move |g: &Tensor| g.zip(&a1, |gv, d| -gv * d).row_sums())),
                (mu, Box::new(move |g: &Tensor| g.zip(&a2, |gv, d| gv * d))),
                (sigma, Box::new(move |g: &Tensor| g.zip(&dsig, |gv, d| gv * d))),
            ],
        )
    }

    /// Pairwise logistic CDF matrix: out[i,j] = F_Log(x_i; c_j, scale).
    /// x is (m,1), centers (n,1).
    pub fn logistic_cdf(&mut self, x: NodeId, centers: NodeId, scale: f64) -> NodeId {
        let xv = self.nodes[x.0].value.clone();
        let cv = self.nodes[centers.0].value.clone();
        assert_eq!(xv.cols(), 1);
        assert_eq!(cv.cols(), 1);
        let (m, n) = (xv.rows(), cv.rows());
        let mut v = Tensor::zeros(m, n);
        let mut dens = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let s = num::sigmoid((xv.get(i, 0) - cv.get(j, 0)) / scale);
                v.set(i, j, s);
                dens.set(i, j, s * (1.0 - s) / scale);
            }
        }
        let d1 = dens.clone();
        self.push(
            v,
            OpTag::LogisticCdf,
            vec![
                (x, Box::new(move |g: &Tensor| g.zip(&d1, |gv, d| gv * d).row_sums())),
                (
                    centers,
                    Box::new(move |g: &Tensor| {
                        let mut out = Tensor::zeros(g.cols(), 1);
                        for j in 0..g.cols() {
                            let mut acc = 0.0;
                            for i in 0..g.rows() {
                                acc -= g.get(i, j) * dens.get(i, j);
                            }
                            out.set(j, 0, acc);
                        }
                        out
                    }),
                ),
            ],
        )
    }

    /// Pairwise logistic log-density matrix: out[i,j] = log f_Log(x_i; c_j, scale).
    /// Each evaluation increments the kernel counter once.
    pub fn logistic_log_pdf(&mut self, x: NodeId, centers: NodeId, scale: f64) -> NodeId {
        let xv = self.nodes[x.0].value.clone();
        let cv = self.nodes[centers.0].value.clone();
        assert_eq!(xv.cols(), 1);
        assert_eq!(cv.cols(), 1);
        let (m, n) = (xv.rows(), cv.rows());
        let mut v = Tensor::zeros(m, n);
        // d out / d x = -tanh(u/2) / scale, cached with the sign folded in
        let mut slope = Tensor::zeros(m, n);
        let ln_scale = scale.ln();
        for i in 0..m {
            let xi = xv.get(i, 0);
            for j in 0..n {
                let u = (xi - cv.get(j, 0)) / scale;
                let au = u.abs();
                let e = (-au).exp();
                v.set(i, j, -au - 2.0 * e.ln_1p() - ln_scale);
                let t = 1.0 - 2.0 * e / (1.0 + e); // tanh(|u|/2)
                slope.set(i, j, -u.signum() * t / scale);
            }
        }
        self.kernel_pdf_evals += (m * n) as u64;
        let s1 = slope.clone();
        self.push(
            v,
            OpTag::LogisticLogPdf,
            vec![
                (x, Box::new(move |g: &Tensor| g.zip(&s1, |gv, d| gv * d).row_sums())),
                (
                    centers,
                    Box::new(move |g: &Tensor| {
                        let mut out = Tensor::zeros(g.cols(), 1);
                        for j in 0..g.cols() {
                            let mut acc = 0.0;
                            for i in 0..g.rows() {
                                acc -= g.get(i, j) * slope.get(i, j);
                            }
                            out.set(j, 0, acc);
                        }
                        out
                    }),
                ),
            ],
        )
    }

    /// Ascending sort of a column vector. The gradient routes through the hard
    /// permutation, which is exact wherever entries are distinct; ties keep
    /// their original order (stable sort).
    pub fn sort_with_permutation(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.cols(), 1, "sort operates on column vectors");
        let m = av.rows();
        let mut idx: Vec<usize> = (0..m).collect();
        let vals = av.data().to_vec();
        idx.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
        let sorted: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
        let v = Tensor::from_vec(m, 1, sorted);
        self.push(
            v,
            OpTag::SortPerm,
            vec![(
                a,
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(m, 1);
                    for (pos, &orig) in idx.iter().enumerate() {
                        out.set(orig, 0, g.get(pos, 0));
                    }
                    out
                }),
            )],
        )
    }

    /// True once any op has produced a non-finite value.
    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.first_nonfinite {
            Some((op, node)) => Err(DiffError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Reverse pass from a scalar loss node. Each node is visited once in
    /// reverse topological (= reverse insertion) order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        self.check_finite()?;
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let lshape = self.nodes[loss.0].value.shape();
        if lshape != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows: lshape.0, cols: lshape.1 });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            // Move the edges out so we can mutate parent grads while calling
            // the closures; restore them afterward.
            let parents = std::mem::take(&mut self.nodes[i].parents);
            for (pid, gf) in &parents {
                let contrib = gf(&g);
                match &mut self.nodes[pid.0].grad {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].parents = parents;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Clear accumulated gradients so the same graph may run backward again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }
}

/// Evaluate a scalar expression and return its value plus the gradient with
/// respect to every leaf, in leaf order. Unused leaves get zero gradients.
pub fn eval_and_grad<F>(inputs: &[Tensor], build: F) -> Result<(f64, Vec<Tensor>), DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    g.backward(out)?;
    let value = g.value(out).item();
    let grads = leaves.iter().map(|&l| g.grad_or_zeros(l)).collect();
    Ok((value, grads))
}

/// Evaluate the expression value only (used for finite differencing).
pub fn eval_value<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    if g.check_finite().is_err() {
        return f64::NAN;
    }
    g.value(out).item()
}

/// Location and magnitude of the worst finite-difference disagreement.
#[derive(Debug, Clone)]
pub struct FdCoord {
    pub input: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub central: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: Option<FdCoord>,
}

/// Compare analytic gradients against central finite differences for every
/// coordinate of every input. Error metric per coordinate:
/// |analytic - central| / max(1, |central|). Non-finite differences surface
/// as infinite error with the coordinate reported, never as a silent pass.
pub fn finite_diff_check<F>(inputs: &[Tensor], h: f64, build: &F) -> Result<FdReport, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    assert!(h > 0.0, "step must be positive");
    let (_, grads) = eval_and_grad(inputs, build)?;
    let mut report = FdReport { max_rel_err: 0.0, worst: None };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for r in 0..input.rows() {
            for c in 0..input.cols() {
                let orig = input.get(r, c);
                work[i].set(r, c, orig + h);
                let fp = eval_value(&work, build);
                work[i].set(r, c, orig - h);
                let fm = eval_value(&work, build);
                work[i].set(r, c, orig);
                let central = (fp - fm) / (2.0 * h);
                let analytic = grads[i].get(r, c);
                let err = if central.is_finite() {
                    (analytic - central).abs() / central.abs().max(1.0)
                } else {
                    f64::INFINITY
                };
                if err > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = err;
                    report.worst = Some(FdCoord { input: i, row: r, col: c, analytic, central });
                }
            }
        }
    }
    Ok(report)
}
