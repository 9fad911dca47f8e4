//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor in this crate is a row-major 2-D array. Vectors are `(n, 1)`
//! or `(1, n)`, scalars are `(1, 1)`, and spatial maps are flattened to
//! `(h * w, channels)` with the side lengths carried separately. A [`Tape`]
//! records one forward pass; [`Tape::backward`] replays it in reverse and
//! accumulates vector-Jacobian products into every reachable leaf.
//!
//! The engine is single-threaded and deterministic: identical inputs produce
//! bitwise-identical values and gradients.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Dense value type shared by the whole crate.
pub type Mat = Array2<f64>;

type BackFn = Box<dyn Fn(&Mat) -> Vec<(usize, Mat)>>;

struct Node {
    value: Rc<Mat>,
    back: Option<BackFn>,
}

/// Records a single forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    by_id: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.by_id.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Introduces a leaf value. Leaves have no parents; gradients accumulate
    /// into them and are read back through [`Gradients::get`].
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, None)
    }

    /// Convenience leaf from a scalar.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Mat::from_elem((1, 1), value))
    }

    /// Runs reverse-mode accumulation from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.dim(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[output.id] = Some(Mat::from_elem((1, 1), 1.0));
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(back) = &nodes[id].back {
                for (parent, contrib) in back(&grad) {
                    match &mut grads[parent] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { by_id: grads }
    }

    /// Row-wise concatenation. All parts must share a column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value_rc()).collect();
        let cols = values[0].ncols();
        let rows: usize = values.iter().map(|v| v.nrows()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut offset = 0;
        for v in &values {
            out.slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                .assign(v);
            offset += v.nrows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut offset = 0;
                let mut contribs = Vec::with_capacity(ids.len());
                for (&id, &n) in ids.iter().zip(&sizes) {
                    contribs.push((id, g.slice(ndarray::s![offset..offset + n, ..]).to_owned()));
                    offset += n;
                }
                contribs
            })),
        )
    }

    /// Column-wise concatenation. All parts must share a row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value_rc()).collect();
        let rows = values[0].nrows();
        let cols: usize = values.iter().map(|v| v.ncols()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut offset = 0;
        for v in &values {
            out.slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            offset += v.ncols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            Some(Box::new(move |g| {
                let mut offset = 0;
                let mut contribs = Vec::with_capacity(ids.len());
                for (&id, &n) in ids.iter().zip(&sizes) {
                    contribs.push((id, g.slice(ndarray::s![.., offset..offset + n]).to_owned()));
                    offset += n;
                }
                contribs
            })),
        )
    }
}

impl<'t> Var<'t> {
    pub fn value_rc(&self) -> Rc<Mat> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Copies the current value off the tape.
    pub fn value(&self) -> Mat {
        (*self.value_rc()).clone()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.value_rc().dim()
    }

    pub fn nrows(&self) -> usize {
        self.dim().0
    }

    pub fn ncols(&self) -> usize {
        self.dim().1
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn item(&self) -> f64 {
        let v = self.value_rc();
        assert_eq!(v.dim(), (1, 1), "item() requires a scalar node");
        v[(0, 0)]
    }

    fn unary(self, value: Mat, back: impl Fn(&Mat) -> Mat + 'static) -> Var<'t> {
        let id = self.id;
        self.tape
            .push(value, Some(Box::new(move |g| vec![(id, back(g))])))
    }

    fn binary(
        self,
        other: Var<'t>,
        value: Mat,
        back: impl Fn(&Mat) -> (Mat, Mat) + 'static,
    ) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                let (ga, gb) = back(g);
                vec![(a, ga), (b, gb)]
            })),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.dim(), b.dim(), "add: shape mismatch");
        self.binary(other, &*a + &*b, |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.dim(), b.dim(), "sub: shape mismatch");
        self.binary(other, &*a - &*b, |g| (g.clone(), -g))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.dim(), b.dim(), "mul: shape mismatch");
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(other, &*a * &*b, move |g| (g * &*bc, g * &*ac))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.dim(), b.dim(), "div: shape mismatch");
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(other, &*a / &*b, move |g| {
            (g / &*bc, -(g * &*ac) / (&*bc * &*bc))
        })
    }

    /// Broadcast-add a `(1, c)` row bias to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), bias.value_rc());
        assert_eq!(b.nrows(), 1, "add_row: bias must be (1, c)");
        assert_eq!(a.ncols(), b.ncols(), "add_row: column mismatch");
        self.binary(bias, &*a + &*b, |g| {
            (g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0)))
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let a = self.value_rc();
        self.unary(&*a * c, move |g| g * c)
    }

    /// Multiplies every entry by a scalar node (useful for learned scales).
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value_rc(), s.value_rc());
        assert_eq!(sv.dim(), (1, 1), "scale_by: scale must be (1, 1)");
        let c = sv[(0, 0)];
        let ac = Rc::clone(&a);
        self.binary(s, &*a * c, move |g| {
            let gs = (g * &*ac).sum();
            (g * c, Mat::from_elem((1, 1), gs))
        })
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let a = self.value_rc();
        self.unary(&*a + c, |g| g.clone())
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimension mismatch");
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(other, a.dot(&*b), move |g| {
            (g.dot(&bc.t()), ac.t().dot(g))
        })
    }

    /// `self @ other.T` without materializing the transpose on the tape.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.ncols(), b.ncols(), "matmul_t: inner dimension mismatch");
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(other, a.dot(&b.t()), move |g| {
            (g.dot(&*bc), g.t().dot(&*ac))
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value_rc();
        self.unary(a.t().to_owned(), |g| g.t().to_owned())
    }

    /// Row slice `[r0, r1)`.
    pub fn rows(self, r0: usize, r1: usize) -> Var<'t> {
        let a = self.value_rc();
        assert!(r0 <= r1 && r1 <= a.nrows(), "rows: range out of bounds");
        let dim = a.dim();
        self.unary(a.slice(ndarray::s![r0..r1, ..]).to_owned(), move |g| {
            let mut out = Mat::zeros(dim);
            out.slice_mut(ndarray::s![r0..r1, ..]).assign(g);
            out
        })
    }

    /// Column slice `[c0, c1)`.
    pub fn cols(self, c0: usize, c1: usize) -> Var<'t> {
        let a = self.value_rc();
        assert!(c0 <= c1 && c1 <= a.ncols(), "cols: range out of bounds");
        let dim = a.dim();
        self.unary(a.slice(ndarray::s![.., c0..c1]).to_owned(), move |g| {
            let mut out = Mat::zeros(dim);
            out.slice_mut(ndarray::s![.., c0..c1]).assign(g);
            out
        })
    }

    /// Gathers rows of `self` (a table) by index; duplicate indices accumulate
    /// gradient into the same row.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let a = self.value_rc();
        let dim = a.dim();
        for &i in idx {
            assert!(i < dim.0, "gather_rows: index {i} out of bounds");
        }
        let mut out = Mat::zeros((idx.len(), dim.1));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&a.row(i));
        }
        let idx = idx.to_vec();
        self.unary(out, move |g| {
            let mut acc = Mat::zeros(dim);
            for (r, &i) in idx.iter().enumerate() {
                let mut row = acc.row_mut(i);
                row += &g.row(r);
            }
            acc
        })
    }

    pub fn relu(self) -> Var<'t> {
        let a = self.value_rc();
        let ac = Rc::clone(&a);
        self.unary(a.mapv(|x| x.max(0.0)), move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&ac, |gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            });
            out
        })
    }

    pub fn gelu(self) -> Var<'t> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044_715;
        let a = self.value_rc();
        let ac = Rc::clone(&a);
        let value = a.mapv(|x| 0.5 * x * (1.0 + (K * (x + C3 * x * x * x)).tanh()));
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&ac, |gv, &x| {
                let u = K * (x + C3 * x * x * x);
                let t = u.tanh();
                let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C3 * x * x);
                *gv *= d;
            });
            out
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let a = self.value_rc();
        let value = a.mapv(stable_sigmoid);
        let vc = value.clone();
        self.unary(value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&vc, |gv, &s| *gv *= s * (1.0 - s));
            out
        })
    }

    pub fn min_ew(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.dim(), b.dim(), "min_ew: shape mismatch");
        let mut value = Mat::zeros(a.dim());
        for ((v, &x), &y) in value.iter_mut().zip(a.iter()).zip(b.iter()) {
            *v = x.min(y);
        }
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(other, value, move |g| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            for (((gav, gbv), &x), &y) in ga
                .iter_mut()
                .zip(gb.iter_mut())
                .zip(ac.iter())
                .zip(bc.iter())
            {
                // Subgradient: ties route to the left operand.
                if x <= y {
                    *gbv = 0.0;
                } else {
                    *gav = 0.0;
                }
            }
            (ga, gb)
        })
    }

    pub fn max_ew(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value_rc(), other.value_rc());
        assert_eq!(a.dim(), b.dim(), "max_ew: shape mismatch");
        let mut value = Mat::zeros(a.dim());
        for ((v, &x), &y) in value.iter_mut().zip(a.iter()).zip(b.iter()) {
            *v = x.max(y);
        }
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.binary(other, value, move |g| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            for (((gav, gbv), &x), &y) in ga
                .iter_mut()
                .zip(gb.iter_mut())
                .zip(ac.iter())
                .zip(bc.iter())
            {
                if x >= y {
                    *gbv = 0.0;
                } else {
                    *gav = 0.0;
                }
            }
            (ga, gb)
        })
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value_rc();
        let mut value = (*a).clone();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let yc = value.clone();
        self.unary(value, move |g| {
            let mut out = g * &yc;
            for (mut orow, yrow) in out.rows_mut().into_iter().zip(yc.rows()) {
                let dot: f64 = orow.iter().zip(yrow.iter()).map(|(&o, _)| o).sum();
                // orow currently holds g*y; dot = sum(g*y) per row.
                orow.zip_mut_with(&yrow, |o, &y| *o -= dot * y);
            }
            out
        })
    }

    /// Row-wise layer normalization with affine parameters `(1, c)`.
    pub fn layernorm_rows(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value_rc();
        let gm = gamma.value_rc();
        let bt = beta.value_rc();
        let c = x.ncols();
        assert_eq!(gm.dim(), (1, c), "layernorm: gamma must be (1, c)");
        assert_eq!(bt.dim(), (1, c), "layernorm: beta must be (1, c)");
        let mut xhat = Mat::zeros(x.dim());
        let mut inv_sigma = Vec::with_capacity(x.nrows());
        for (r, row) in x.rows().into_iter().enumerate() {
            let mu = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma.push(is);
            for (j, &v) in row.iter().enumerate() {
                xhat[(r, j)] = (v - mu) * is;
            }
        }
        let value = &xhat * &*gm + &*bt;
        let (x_id, g_id, b_id) = (self.id, gamma.id, beta.id);
        let gm_c = Rc::clone(&gm);
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let ggamma = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let mut gx = Mat::zeros(g.dim());
                for (r, grow) in g.rows().into_iter().enumerate() {
                    let is = inv_sigma[r];
                    // dxhat = g * gamma
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * gm_c[(0, j)])
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .enumerate()
                        .map(|(j, &d)| d * xhat[(r, j)])
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        gx[(r, j)] =
                            is * (dxhat[j] - mean_dxhat - xhat[(r, j)] * mean_dxhat_xhat);
                    }
                }
                vec![(x_id, gx), (g_id, ggamma), (b_id, gbeta)]
            })),
        )
    }

    /// L2-normalizes each row to unit norm.
    pub fn l2norm_rows(self, eps: f64) -> Var<'t> {
        let x = self.value_rc();
        let mut value = (*x).clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let n = (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let xc = Rc::clone(&x);
        self.unary(value, move |g| {
            let mut out = Mat::zeros(g.dim());
            for (r, grow) in g.rows().into_iter().enumerate() {
                let n = norms[r];
                let xg: f64 = xc.row(r).iter().zip(grow.iter()).map(|(&x, &gv)| x * gv).sum();
                for (j, &gv) in grow.iter().enumerate() {
                    out[(r, j)] = gv / n - xc[(r, j)] * xg / (n * n * n);
                }
            }
            out
        })
    }

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value_rc();
        let dim = a.dim();
        self.unary(Mat::from_elem((1, 1), a.sum()), move |g| {
            Mat::from_elem(dim, g[(0, 0)])
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let a = self.value_rc();
        let dim = a.dim();
        let n = (dim.0 * dim.1) as f64;
        self.unary(Mat::from_elem((1, 1), a.sum() / n), move |g| {
            Mat::from_elem(dim, g[(0, 0)] / n)
        })
    }

    /// Bilinear resize of a `(h * w, c)` map to `(oh * ow, c)`.
    ///
    /// Uses the half-pixel-center convention; resizing to the same shape is
    /// the identity and resizing a constant map yields the same constant.
    pub fn resize_bilinear(self, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Var<'t> {
        let x = self.value_rc();
        assert_eq!(x.nrows(), h * w, "resize_bilinear: input shape mismatch");
        let c = x.ncols();
        // Each output row is a fixed convex combination of at most 4 inputs.
        let mut taps: Vec<[(usize, f64); 4]> = Vec::with_capacity(oh * ow);
        for oi in 0..oh {
            let (i0, i1, fi) = sample_axis(oi, oh, h);
            for oj in 0..ow {
                let (j0, j1, fj) = sample_axis(oj, ow, w);
                taps.push([
                    (i0 * w + j0, (1.0 - fi) * (1.0 - fj)),
                    (i0 * w + j1, (1.0 - fi) * fj),
                    (i1 * w + j0, fi * (1.0 - fj)),
                    (i1 * w + j1, fi * fj),
                ]);
            }
        }
        let mut out = Mat::zeros((oh * ow, c));
        for (r, tap) in taps.iter().enumerate() {
            for &(src, wgt) in tap {
                if wgt != 0.0 {
                    let mut row = out.row_mut(r);
                    row.scaled_add(wgt, &x.row(src));
                }
            }
        }
        let in_dim = (h * w, c);
        self.unary(out, move |g| {
            let mut acc = Mat::zeros(in_dim);
            for (r, tap) in taps.iter().enumerate() {
                for &(src, wgt) in tap {
                    if wgt != 0.0 {
                        let mut row = acc.row_mut(src);
                        row.scaled_add(wgt, &g.row(r));
                    }
                }
            }
            acc
        })
    }

    /// 2x2 average pooling of a `(h * w, c)` map; `h` and `w` must be even.
    pub fn avgpool2(self, (h, w): (usize, usize)) -> Var<'t> {
        let x = self.value_rc();
        assert_eq!(x.nrows(), h * w, "avgpool2: input shape mismatch");
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2: odd spatial size");
        let c = x.ncols();
        let (ph, pw) = (h / 2, w / 2);
        let mut out = Mat::zeros((ph * pw, c));
        for i in 0..ph {
            for j in 0..pw {
                let mut row = out.row_mut(i * pw + j);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    row.scaled_add(0.25, &x.row((2 * i + di) * w + (2 * j + dj)));
                }
            }
        }
        let in_dim = (h * w, c);
        self.unary(out, move |g| {
            let mut acc = Mat::zeros(in_dim);
            for i in 0..ph {
                for j in 0..pw {
                    let grow = g.row(i * pw + j);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let mut row = acc.row_mut((2 * i + di) * w + (2 * j + dj));
                        row.scaled_add(0.25, &grow);
                    }
                }
            }
            acc
        })
    }

    /// Mean next-token cross-entropy over positions where `mask` is true.
    ///
    /// `self` is a `(t, v)` logit matrix; `targets[i]` is the label for row
    /// `i` and is only consulted where `mask[i]`. When the mask is all false
    /// the result is 0 by convention.
    pub fn cross_entropy_masked(self, targets: &[usize], mask: &[bool]) -> Var<'t> {
        let logits = self.value_rc();
        let (t, v) = logits.dim();
        assert_eq!(targets.len(), t, "cross_entropy_masked: target length");
        assert_eq!(mask.len(), t, "cross_entropy_masked: mask length");
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            let dim = logits.dim();
            return self.unary(Mat::zeros((1, 1)), move |_| Mat::zeros(dim));
        }
        let mut total = 0.0;
        // Softmax rows are recomputed in backward from the saved logits.
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            assert!(targets[i] < v, "cross_entropy_masked: target out of range");
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let value = Mat::from_elem((1, 1), total / count as f64);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let lc = Rc::clone(&logits);
        self.unary(value, move |g| {
            let scale = g[(0, 0)] / count as f64;
            let mut out = Mat::zeros((t, v));
            for i in 0..t {
                if !mask[i] {
                    continue;
                }
                let row = lc.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                for j in 0..v {
                    let p = (row[j] - m).exp() / denom;
                    let delta = if j == targets[i] { 1.0 } else { 0.0 };
                    out[(i, j)] = scale * (p - delta);
                }
            }
            out
        })
    }

    /// Focal sigmoid binary cross-entropy summed over the whole grid and
    /// divided by `normalizer`.
    ///
    /// `targets` is a same-shaped 0/1 matrix. Positive cells use weight
    /// `alpha`, negative cells `1 - alpha`, both modulated by `(1 - p_t)^gamma`.
    pub fn focal_bce(self, targets: &Mat, alpha: f64, gamma: f64, normalizer: f64) -> Var<'t> {
        let logits = self.value_rc();
        assert_eq!(logits.dim(), targets.dim(), "focal_bce: shape mismatch");
        assert!(normalizer > 0.0, "focal_bce: normalizer must be positive");
        let mut total = 0.0;
        for (&x, &t) in logits.iter().zip(targets.iter()) {
            let p = stable_sigmoid(x);
            // log p = -softplus(-x), log(1-p) = -softplus(x)
            let log_p = -softplus(-x);
            let log_1p = -softplus(x);
            total += if t > 0.5 {
                -alpha * (1.0 - p).powf(gamma) * log_p
            } else {
                -(1.0 - alpha) * p.powf(gamma) * log_1p
            };
        }
        let value = Mat::from_elem((1, 1), total / normalizer);
        let lc = Rc::clone(&logits);
        let tc = targets.clone();
        self.unary(value, move |g| {
            let scale = g[(0, 0)] / normalizer;
            let mut out = Mat::zeros(lc.dim());
            for ((o, &x), &t) in out.iter_mut().zip(lc.iter()).zip(tc.iter()) {
                let p = stable_sigmoid(x);
                let d = if t > 0.5 {
                    let log_p = -softplus(-x);
                    alpha * gamma * p * (1.0 - p).powf(gamma) * log_p
                        - alpha * (1.0 - p).powf(gamma + 1.0)
                } else {
                    let log_1p = -softplus(x);
                    -(1.0 - alpha) * gamma * (1.0 - p) * p.powf(gamma) * log_1p
                        + (1.0 - alpha) * p.powf(gamma + 1.0)
                };
                *o = scale * d;
            }
            out
        })
    }
}

fn sample_axis(out_idx: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    // Half-pixel centers, clamped at the borders.
    let src = (out_idx as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of the built scalar's gradient w.r.t. `x0`.
    fn fd_check_builder<F>(x0: &Mat, build: F, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(x0.dim()));
        let eps = 1e-5;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut xp = x0.clone();
                xp[(i, j)] += eps;
                let mut xm = x0.clone();
                xm[(i, j)] -= eps;
                let tp = Tape::new();
                let vp = tp.leaf(xp);
                let fp = build(&tp, vp).item();
                let tm = Tape::new();
                let vm = tm.leaf(xm);
                let fm = build(&tm, vm).item();
                let fd = (fp - fm) / (2.0 * eps);
                let a = analytic[(i, j)];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "grad mismatch at ({i},{j}): analytic {a}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random_mat(&mut rng, 3, 4);
        fd_check_builder(&x0, |_t, x| x.mul(x).sum_all(), 1e-6);
    }

    #[test]
    fn matmul_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = random_mat(&mut rng, 3, 5);
        let w = random_mat(&mut rng, 5, 2);
        fd_check_builder(
            &x0,
            move |t, x| {
                let wv = t.leaf(w.clone());
                x.matmul(wv).gelu().sigmoid().mean_all()
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_mat(&mut rng, 4, 6);
        fd_check_builder(
            &x0,
            |t, x| {
                let g = t.leaf(Mat::from_elem((1, 6), 1.1));
                let b = t.leaf(Mat::from_elem((1, 6), -0.2));
                x.layernorm_rows(g, b, 1e-5).softmax_rows().mul(x).sum_all()
            },
            1e-5,
        );
    }

    #[test]
    fn slicing_concat_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = random_mat(&mut rng, 6, 4);
        fd_check_builder(
            &x0,
            |t, x| {
                let top = x.rows(0, 2);
                let bottom = x.rows(2, 6).cols(1, 3);
                let gathered = x.gather_rows(&[0, 0, 5]);
                let joined = t.concat_rows(&[top, gathered]);
                joined.sum_all().add(bottom.mul(bottom).sum_all())
            },
            1e-6,
        );
    }

    #[test]
    fn resize_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random_mat(&mut rng, 16, 3); // 4x4 map, 3 channels
        fd_check_builder(
            &x0,
            |_t, x| {
                let up = x.resize_bilinear((4, 4), (6, 6));
                let down = x.avgpool2((4, 4));
                up.sum_all().add(down.mul(down).sum_all())
            },
            1e-6,
        );
    }

    #[test]
    fn resize_constant_map_is_constant() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((16, 2), 3.25));
        let up = x.resize_bilinear((4, 4), (7, 5));
        assert!(up.value().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_gradients_and_uniform_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = random_mat(&mut rng, 5, 7);
        let targets = vec![1, 4, 0, 6, 3];
        let mask = vec![false, true, true, false, true];
        let (tc, mc) = (targets.clone(), mask.clone());
        fd_check_builder(
            &x0,
            move |_t, x| x.cross_entropy_masked(&tc, &mc),
            1e-6,
        );
        // Zero logits are uniform: loss must be ln(v) exactly up to fp error.
        let tape = Tape::new();
        let zeros = tape.leaf(Mat::zeros((3, 11)));
        let loss = zeros.cross_entropy_masked(&[0, 5, 10], &[true, true, true]);
        assert!((loss.item() - (11.0f64).ln()).abs() < 1e-12);
        drop((targets, mask));
    }

    #[test]
    fn focal_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random_mat(&mut rng, 3, 4);
        let mut targets = Mat::zeros((3, 4));
        targets[(0, 1)] = 1.0;
        targets[(2, 3)] = 1.0;
        let tc = targets.clone();
        fd_check_builder(
            &x0,
            move |_t, x| x.focal_bce(&tc, 0.25, 2.0, 2.0),
            1e-5,
        );
    }

    #[test]
    fn min_max_div_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random_mat(&mut rng, 4, 3);
        let other = random_mat(&mut rng, 4, 3);
        let positive = other.mapv(|v| v.abs() + 0.5);
        fd_check_builder(
            &x0,
            move |t, x| {
                let o = t.leaf(positive.clone());
                let lo = x.min_ew(o);
                let hi = x.max_ew(o);
                hi.sub(lo).div(o).sum_all()
            },
            1e-6,
        );
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::from_elem((1, 1), 3.0));
        // f = x*x + x  => df/dx = 2x + 1 = 7
        let loss = x.mul(x).add(x).sum_all();
        let grads = tape.backward(loss);
        assert!((grads.get(x).unwrap()[(0, 0)] - 7.0).abs() < 1e-12);
    }
}
