//! Minimal reverse-mode tape over `ndarray` in `f64`.
//!
//! A [`Graph`] records every forward operation as a node holding its
//! value and a backward closure. [`Graph::backward`] walks the tape in
//! reverse creation order (a topological order by construction) and
//! accumulates gradients into every node that requires them. Values are
//! reference-counted so backward closures can capture inputs without
//! copying.
//!
//! The op set is exactly what the model needs: dense/conv linear maps,
//! pointwise nonlinearities, batch/instance normalization in train and
//! frozen-statistics modes, masked max pooling, pairwise differences for
//! relation attention, soft-assignment aggregation and a couple of fused
//! loss heads. Each backward formula is verified against central finite
//! differences in this module's tests and again, op by op, in
//! [`crate::gradcheck`].

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn};
use std::rc::Rc;

use crate::parallel::map_indexed;

/// Dynamic-rank `f64` array, the only value type on the tape.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tid(usize);

type BackFn = Box<dyn Fn(&Arr) -> Vec<(Tid, Arr)>>;

struct Node {
    value: Rc<Arr>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Reverse-mode tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Tid`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, t: Tid) -> Option<&Arr> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tid) -> Option<Arr> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn im2col(x: &Arr, bi: usize, g: ConvGeom) -> ndarray::Array2<f64> {
    let mut cols = ndarray::Array2::<f64>::zeros((g.cin * g.kh * g.kw, g.ho * g.wo));
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let krow = (ci * g.kh + ky) * g.kw + kx;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        cols[[krow, oy * g.wo + ox]] = x[[bi, ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &ndarray::Array2<f64>, g: ConvGeom) -> ndarray::Array3<f64> {
    let mut gx = ndarray::Array3::<f64>::zeros((g.cin, g.h, g.w));
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let krow = (ci * g.kh + ky) * g.kw + kx;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcols[[krow, oy * g.wo + ox]];
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn reshaped(a: Arr, dims: &[usize]) -> Arr {
    debug_assert_eq!(a.len(), dims.iter().product::<usize>());
    a.into_shape_with_order(IxDyn(dims)).expect("reshape: non-contiguous value")
}

fn zeros_like_dims(dims: &[usize]) -> Arr {
    Arr::zeros(IxDyn(dims))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, needs_grad: bool, back: Option<BackFn>) -> Tid {
        // Every node value is kept in standard layout so later reshapes
        // are zero-copy views.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let id = Tid(self.nodes.len());
        self.nodes.push(Node {
            value: Rc::new(value),
            back,
            needs_grad,
        });
        id
    }

    /// Leaf that participates in differentiation (parameters, probed inputs).
    pub fn leaf(&mut self, value: Arr) -> Tid {
        self.push(value, true, None)
    }

    /// Leaf excluded from differentiation (inputs, masks, frozen stats).
    pub fn constant(&mut self, value: Arr) -> Tid {
        self.push(value, false, None)
    }

    pub fn value(&self, t: Tid) -> &Arr {
        &self.nodes[t.0].value
    }

    pub fn value_rc(&self, t: Tid) -> Rc<Arr> {
        Rc::clone(&self.nodes[t.0].value)
    }

    pub fn needs_grad(&self, t: Tid) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate in node
    /// creation order reversed, so the result is deterministic.
    pub fn backward(&self, root: Tid) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.value(root).raw_dim()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[id].take() else { continue };
            for (pid, contrib) in back(&g) {
                debug_assert!(pid.0 < id, "backward edge must point to earlier node");
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn unary<F>(&mut self, a: Tid, value: Arr, back: F) -> Tid
    where
        F: Fn(&Arr) -> Arr + 'static,
    {
        let needs = self.needs_grad(a);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| vec![(a, back(g))]))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let value = av + bv;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g.clone()));
                }
                if nb {
                    out.push((b, g.clone()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || nb, back)
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let value = av - bv;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g.clone()));
                }
                if nb {
                    out.push((b, g.mapv(|x| -x)));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || nb, back)
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let value = &*av * &*bv;
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn> = if na || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if na {
                    out.push((a, g * &*bv));
                }
                if nb {
                    out.push((b, g * &*av));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, na || nb, back)
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let value = self.value(a).mapv(|x| x * c);
        self.unary(a, value, move |g| g.mapv(|x| x * c))
    }

    pub fn add_scalar(&mut self, a: Tid, c: f64) -> Tid {
        let value = self.value(a).mapv(|x| x + c);
        self.unary(a, value, |g| g.clone())
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let av = self.value_rc(a);
        let value = av.mapv(|x| x.max(0.0));
        self.unary(a, value, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&av, |gi, &x| {
                if x <= 0.0 {
                    *gi = 0.0;
                }
            });
            out
        })
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out_rc = Rc::new(value.clone());
        let needs = self.needs_grad(a);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                gx.zip_mut_with(&out_rc, |gi, &s| *gi *= s * (1.0 - s));
                vec![(a, gx)]
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let value = self.value(a).mapv(f64::tanh);
        let out_rc = Rc::new(value.clone());
        let needs = self.needs_grad(a);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let mut gx = g.clone();
                gx.zip_mut_with(&out_rc, |gi, &t| *gi *= 1.0 - t * t);
                vec![(a, gx)]
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    // ---- shape plumbing --------------------------------------------------

    pub fn reshape(&mut self, a: Tid, dims: &[usize]) -> Tid {
        let in_dims: Vec<usize> = self.value(a).shape().to_vec();
        let value = reshaped(self.value(a).clone(), dims);
        self.unary(a, value, move |g| reshaped(g.clone(), &in_dims))
    }

    /// Generalized transpose; the value is materialized in standard layout.
    pub fn permute(&mut self, a: Tid, axes: &[usize]) -> Tid {
        let axes_v = axes.to_vec();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        self.unary(a, value, move |g| {
            g.view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()
        })
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|&t| self.value(t).view()).collect();
        let last = views[0].ndim() - 1;
        let value = ndarray::concatenate(Axis(last), &views).expect("concat_last: shape mismatch");
        let widths: Vec<usize> = views.iter().map(|v| v.shape()[last]).collect();
        drop(views);
        let parts_v: Vec<Tid> = parts.to_vec();
        let needs_each: Vec<bool> = parts_v.iter().map(|&t| self.needs_grad(t)).collect();
        let needs = needs_each.iter().any(|&b| b);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let last = g.ndim() - 1;
                let mut out = Vec::new();
                let mut off = 0usize;
                for (i, &w) in widths.iter().enumerate() {
                    if needs_each[i] {
                        let piece = g
                            .slice_axis(Axis(last), ndarray::Slice::from(off..off + w))
                            .to_owned();
                        out.push((parts_v[i], piece));
                    }
                    off += w;
                }
                out
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    /// Concatenate 2-D row blocks along axis 0.
    pub fn concat_rows(&mut self, parts: &[Tid]) -> Tid {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|&t| self.value(t).view()).collect();
        assert!(views.iter().all(|v| v.ndim() == 2));
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let heights: Vec<usize> = views.iter().map(|v| v.shape()[0]).collect();
        drop(views);
        let parts_v: Vec<Tid> = parts.to_vec();
        let needs_each: Vec<bool> = parts_v.iter().map(|&t| self.needs_grad(t)).collect();
        let needs = needs_each.iter().any(|&b| b);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                let mut off = 0usize;
                for (i, &h) in heights.iter().enumerate() {
                    if needs_each[i] {
                        let piece = g
                            .slice_axis(Axis(0), ndarray::Slice::from(off..off + h))
                            .to_owned();
                        out.push((parts_v[i], piece));
                    }
                    off += h;
                }
                out
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    /// Pick index `i` along `axis`, dropping that axis.
    pub fn select_axis(&mut self, a: Tid, axis: usize, i: usize) -> Tid {
        let in_dims: Vec<usize> = self.value(a).shape().to_vec();
        let value = self.value(a).index_axis(Axis(axis), i).to_owned();
        self.unary(a, value, move |g| {
            let mut out = zeros_like_dims(&in_dims);
            out.index_axis_mut(Axis(axis), i).assign(g);
            out
        })
    }

    /// Rows `start..end` of a 2-D array.
    pub fn slice_rows(&mut self, a: Tid, start: usize, end: usize) -> Tid {
        let in_dims: Vec<usize> = self.value(a).shape().to_vec();
        assert_eq!(in_dims.len(), 2);
        let value = self
            .value(a)
            .slice_axis(Axis(0), ndarray::Slice::from(start..end))
            .to_owned();
        self.unary(a, value, move |g| {
            let mut out = zeros_like_dims(&in_dims);
            out.slice_axis_mut(Axis(0), ndarray::Slice::from(start..end))
                .assign(g);
            out
        })
    }

    /// Gather rows of a 2-D table (embedding lookup). Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Tid, indices: &[usize]) -> Tid {
        let tv = self.value(table);
        assert_eq!(tv.ndim(), 2);
        let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
        let mut value = Arr::zeros(IxDyn(&[indices.len(), cols]));
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < rows, "gather_rows: index {i} out of range {rows}");
            value
                .index_axis_mut(Axis(0), r)
                .assign(&tv.index_axis(Axis(0), i));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.unary(table, value, move |g| {
            let mut out = zeros_like_dims(&[rows, cols]);
            for (r, &i) in idx.iter().enumerate() {
                let mut row = out.index_axis_mut(Axis(0), i);
                row += &g.index_axis(Axis(0), r);
            }
            out
        })
    }

    // ---- linear maps -----------------------------------------------------

    /// `x [.., in] · w[out, in]ᵀ -> [.., out]`, the shared dense projection.
    pub fn linear(&mut self, x: Tid, w: Tid) -> Tid {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        assert_eq!(wv.ndim(), 2);
        let in_dim = *xv.shape().last().expect("linear: scalar input");
        assert_eq!(in_dim, wv.shape()[1], "linear: inner dim mismatch");
        let out_dim = wv.shape()[0];
        let rows = xv.len() / in_dim;

        let x2 = xv.view().into_shape_with_order((rows, in_dim)).unwrap();
        let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
        let mut out2 = ndarray::Array2::<f64>::zeros((rows, out_dim));
        // Row-chunked product; chunk size fixed so results do not depend on
        // the thread count.
        let chunk = 512usize;
        let pieces = map_indexed(rows.div_ceil(chunk), |ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(rows);
            x2.slice_axis(Axis(0), ndarray::Slice::from(lo..hi)).dot(&w2.t())
        });
        for (ci, piece) in pieces.into_iter().enumerate() {
            let lo = ci * chunk;
            let hi = (lo + piece.shape()[0]).min(rows);
            out2.slice_axis_mut(Axis(0), ndarray::Slice::from(lo..hi)).assign(&piece);
        }
        let mut out_dims: Vec<usize> = xv.shape().to_vec();
        *out_dims.last_mut().unwrap() = out_dim;
        let value = reshaped(out2.into_dyn(), &out_dims);

        let (nx, nw) = (self.needs_grad(x), self.needs_grad(w));
        let in_dims: Vec<usize> = xv.shape().to_vec();
        let back: Option<BackFn> = if nx || nw {
            Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((rows, out_dim)).unwrap();
                let x2 = xv.view().into_shape_with_order((rows, in_dim)).unwrap();
                let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::new();
                if nx {
                    let gx = g2.dot(&w2);
                    out.push((x, reshaped(gx.into_dyn(), &in_dims)));
                }
                if nw {
                    let gw = g2.t().dot(&x2);
                    out.push((w, gw.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, nx || nw, back)
    }

    /// Add a `[features]` bias to the last axis.
    pub fn add_bias(&mut self, x: Tid, b: Tid) -> Tid {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.ndim(), 1);
        let f = bv.len();
        assert_eq!(*xv.shape().last().unwrap(), f, "add_bias: feature mismatch");
        let rows = xv.len() / f;
        let dims: Vec<usize> = xv.shape().to_vec();
        let x2 = xv.view().into_shape_with_order((rows, f)).unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let value = reshaped((&x2 + &b1).into_dyn(), &dims);
        let (nx, nb) = (self.needs_grad(x), self.needs_grad(b));
        let back: Option<BackFn> = if nx || nb {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if nx {
                    out.push((x, g.clone()));
                }
                if nb {
                    let g2 = g.view().into_shape_with_order((rows, f)).unwrap();
                    out.push((b, g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, nx || nb, back)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let dims: Vec<usize> = self.value(a).shape().to_vec();
        let value = Arr::from_elem(IxDyn(&[1]), self.value(a).sum());
        self.unary(a, value, move |g| Arr::from_elem(IxDyn(&dims), g[[0]]))
    }

    /// Mean over the last axis: `[.., m] -> [..]`.
    pub fn mean_last(&mut self, a: Tid) -> Tid {
        let dims: Vec<usize> = self.value(a).shape().to_vec();
        let m = *dims.last().expect("mean_last: scalar input");
        let lead: Vec<usize> = dims[..dims.len() - 1].to_vec();
        let rows = self.value(a).len() / m;
        let a2 = self.value(a).view().into_shape_with_order((rows, m)).unwrap();
        let value = reshaped(a2.mean_axis(Axis(1)).unwrap().into_dyn(), &lead);
        self.unary(a, value, move |g| {
            let mut out = zeros_like_dims(&dims);
            let mut out2 = out.view_mut().into_shape_with_order((rows, m)).unwrap();
            let gflat = g.view().into_shape_with_order(rows).unwrap();
            for (mut row, &gi) in out2.axis_iter_mut(Axis(0)).zip(gflat.iter()) {
                row.fill(gi / m as f64);
            }
            drop(out2);
            out
        })
    }

    /// Max over the last axis with a validity mask (`true` = eligible).
    /// Ties break toward the lowest index; each row needs one valid slot.
    pub fn masked_max_last(&mut self, a: Tid, valid: &[bool]) -> Tid {
        let dims: Vec<usize> = self.value(a).shape().to_vec();
        let m = *dims.last().unwrap();
        let rows = self.value(a).len() / m;
        assert_eq!(valid.len(), rows * m, "masked_max_last: mask length");
        let lead: Vec<usize> = dims[..dims.len() - 1].to_vec();
        let a2 = self.value(a).view().into_shape_with_order((rows, m)).unwrap();
        let mut value = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..m {
                if !valid[r * m + c] {
                    continue;
                }
                let x = a2[[r, c]];
                if best.map_or(true, |(_, bx)| x > bx) {
                    best = Some((c, x));
                }
            }
            let (c, x) = best.expect("masked_max_last: row with no valid entry");
            value.push(x);
            argmax.push(c);
        }
        let value = reshaped(Arr::from_shape_vec(IxDyn(&[rows]), value).unwrap(), &lead);
        self.unary(a, value, move |g| {
            let gflat = g.view().into_shape_with_order(rows).unwrap();
            let mut out = zeros_like_dims(&dims);
            let mut out2 = out.view_mut().into_shape_with_order((rows, m)).unwrap();
            for r in 0..rows {
                out2[[r, argmax[r]]] = gflat[r];
            }
            drop(out2);
            out
        })
    }

    /// Max over the last axis (all entries eligible).
    pub fn max_last(&mut self, a: Tid) -> Tid {
        let n = self.value(a).len();
        self.masked_max_last(a, &vec![true; n])
    }

    // ---- broadcast helpers -----------------------------------------------

    /// `x[b, c, s] * w[b, c]` with `w` broadcast over the trailing axis.
    pub fn mul_bc_channel(&mut self, x: Tid, w: Tid) -> Tid {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        assert_eq!(xv.ndim(), 3);
        assert_eq!(wv.ndim(), 2);
        let (b, c, s) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(wv.shape(), &[b, c]);
        let mut value = (*xv).clone();
        for bi in 0..b {
            for ci in 0..c {
                let wv_bc = wv[[bi, ci]];
                value
                    .index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * wv_bc);
            }
        }
        let (nx, nw) = (self.needs_grad(x), self.needs_grad(w));
        let back: Option<BackFn> = if nx || nw {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if nx {
                    let mut gx = g.clone();
                    for bi in 0..b {
                        for ci in 0..c {
                            let wv_bc = wv[[bi, ci]];
                            gx.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .mapv_inplace(|v| v * wv_bc);
                        }
                    }
                    out.push((x, gx));
                }
                if nw {
                    let mut gw = zeros_like_dims(&[b, c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for si in 0..s {
                                acc += g[[bi, ci, si]] * xv[[bi, ci, si]];
                            }
                            gw[[bi, ci]] = acc;
                        }
                    }
                    out.push((w, gw));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, nx || nw, back)
    }

    /// Repeat `x[..]` along a new trailing axis of width `d`.
    pub fn broadcast_last(&mut self, x: Tid, d: usize) -> Tid {
        let dims: Vec<usize> = self.value(x).shape().to_vec();
        let mut out_dims = dims.clone();
        out_dims.push(d);
        let rows = self.value(x).len();
        let xflat = self.value(x).view().into_shape_with_order(rows).unwrap();
        let mut value = Arr::zeros(IxDyn(&[rows, d]));
        for (mut row, &v) in value.axis_iter_mut(Axis(0)).zip(xflat.iter()) {
            row.fill(v);
        }
        let value = reshaped(value, &out_dims);
        self.unary(x, value, move |g| {
            let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
            reshaped(g2.sum_axis(Axis(1)).into_dyn(), &dims)
        })
    }

    // ---- pairwise differences (relation attention) ------------------------

    /// `out[b, i, j, :] = a[b, i, :] - b[b, j, :]`.
    pub fn pairwise_diff(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (bs, na, m) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let nb = bv.shape()[1];
        assert_eq!(bv.shape(), &[bs, nb, m]);
        let mut value = Arr::zeros(IxDyn(&[bs, na, nb, m]));
        {
            let out_slice = value.as_slice_mut().unwrap();
            let a_sl = av.as_slice().unwrap();
            let b_sl = bv.as_slice().unwrap();
            crate::parallel::for_each_chunk_mut(out_slice, nb * m, |row, chunk| {
                let (bi, i) = (row / na, row % na);
                let arow = &a_sl[(bi * na + i) * m..(bi * na + i + 1) * m];
                for j in 0..nb {
                    let brow = &b_sl[(bi * nb + j) * m..(bi * nb + j + 1) * m];
                    for k in 0..m {
                        chunk[j * m + k] = arow[k] - brow[k];
                    }
                }
            });
        }
        let (ng_a, ng_b) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn> = if ng_a || ng_b {
            Some(Box::new(move |g| {
                let g4 = g.view().into_shape_with_order((bs, na, nb, m)).unwrap();
                let mut out = Vec::new();
                if ng_a {
                    let ga = g4.sum_axis(Axis(2));
                    out.push((a, ga.into_dyn()));
                }
                if ng_b {
                    let gb = g4.sum_axis(Axis(1)).mapv(|x| -x);
                    out.push((b, gb.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ng_a || ng_b, back)
    }

    /// `out[b, i, j, :] = a[b, i, :] - c[j, :]` with a batch-shared `c`
    /// (topic centers).
    pub fn pairwise_diff_shared(&mut self, a: Tid, c: Tid) -> Tid {
        let av = self.value_rc(a);
        let cv = self.value_rc(c);
        assert_eq!(av.ndim(), 3);
        assert_eq!(cv.ndim(), 2);
        let (bs, na, m) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let k = cv.shape()[0];
        assert_eq!(cv.shape()[1], m);
        let mut value = Arr::zeros(IxDyn(&[bs, na, k, m]));
        {
            let out_slice = value.as_slice_mut().unwrap();
            let a_sl = av.as_slice().unwrap();
            let c_sl = cv.as_slice().unwrap();
            crate::parallel::for_each_chunk_mut(out_slice, k * m, |row, chunk| {
                let arow = &a_sl[row * m..(row + 1) * m];
                for j in 0..k {
                    let crow = &c_sl[j * m..(j + 1) * m];
                    for d in 0..m {
                        chunk[j * m + d] = arow[d] - crow[d];
                    }
                }
            });
        }
        let (ng_a, ng_c) = (self.needs_grad(a), self.needs_grad(c));
        let back: Option<BackFn> = if ng_a || ng_c {
            Some(Box::new(move |g| {
                let g4 = g.view().into_shape_with_order((bs, na, k, m)).unwrap();
                let mut out = Vec::new();
                if ng_a {
                    out.push((a, g4.sum_axis(Axis(2)).into_dyn()));
                }
                if ng_c {
                    let gc = g4
                        .sum_axis(Axis(0))
                        .sum_axis(Axis(0))
                        .mapv(|x| -x);
                    out.push((c, gc.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ng_a || ng_c, back)
    }

    /// Soft-assignment pooling: `out[b, j, :] = Σ_i a[b, i, j, :] ⊙ z[b, i, :]`.
    pub fn weighted_aggregate(&mut self, assign: Tid, z: Tid) -> Tid {
        let av = self.value_rc(assign);
        let zv = self.value_rc(z);
        assert_eq!(av.ndim(), 4);
        assert_eq!(zv.ndim(), 3);
        let (bs, p, k, d) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        assert_eq!(zv.shape(), &[bs, p, d]);
        let mut value = Arr::zeros(IxDyn(&[bs, k, d]));
        for bi in 0..bs {
            for i in 0..p {
                for j in 0..k {
                    for di in 0..d {
                        value[[bi, j, di]] += av[[bi, i, j, di]] * zv[[bi, i, di]];
                    }
                }
            }
        }
        let (ng_a, ng_z) = (self.needs_grad(assign), self.needs_grad(z));
        let back: Option<BackFn> = if ng_a || ng_z {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                if ng_a {
                    let mut ga = zeros_like_dims(&[bs, p, k, d]);
                    for bi in 0..bs {
                        for i in 0..p {
                            for j in 0..k {
                                for di in 0..d {
                                    ga[[bi, i, j, di]] = g[[bi, j, di]] * zv[[bi, i, di]];
                                }
                            }
                        }
                    }
                    out.push((assign, ga));
                }
                if ng_z {
                    let mut gz = zeros_like_dims(&[bs, p, d]);
                    for bi in 0..bs {
                        for i in 0..p {
                            for j in 0..k {
                                for di in 0..d {
                                    gz[[bi, i, di]] += g[[bi, j, di]] * av[[bi, i, j, di]];
                                }
                            }
                        }
                    }
                    out.push((z, gz));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ng_a || ng_z, back)
    }

    // ---- normalization ----------------------------------------------------

    /// Batch norm over rows of `x [rows, features]` using batch statistics.
    /// Returns the node plus the biased batch mean/var for running-stat
    /// updates.
    pub fn batchnorm_train(
        &mut self,
        x: Tid,
        gamma: Tid,
        beta: Tid,
        eps: f64,
    ) -> (Tid, ndarray::Array1<f64>, ndarray::Array1<f64>) {
        let xv = self.value_rc(x);
        assert_eq!(xv.ndim(), 2);
        let (rows, f) = (xv.shape()[0], xv.shape()[1]);
        // rows == 1 is the degenerate single-center case: x̂ = 0, the
        // output collapses to β and the input gradient vanishes.
        assert!(rows >= 1, "batchnorm_train needs at least 1 row");
        let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
        let mean = x2.mean_axis(Axis(0)).unwrap();
        let mut var = ndarray::Array1::<f64>::zeros(f);
        for r in 0..rows {
            for c in 0..f {
                let d = x2[[r, c]] - mean[c];
                var[c] += d * d;
            }
        }
        var.mapv_inplace(|v| v / rows as f64);
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = ndarray::Array2::<f64>::zeros((rows, f));
        for r in 0..rows {
            for c in 0..f {
                xhat[[r, c]] = (x2[[r, c]] - mean[c]) * inv_std[c];
            }
        }
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((rows, f));
        for r in 0..rows {
            for c in 0..f {
                value[[r, c]] = g1[c] * xhat[[r, c]] + b1[c];
            }
        }
        let xhat_rc = Rc::new(xhat);
        let inv_std_rc = Rc::new(inv_std);
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let needs = nx || ng || nb;
        let back: Option<BackFn> = if needs {
            let gv = Rc::clone(&gv);
            let xhat_rc = Rc::clone(&xhat_rc);
            let inv_std_rc = Rc::clone(&inv_std_rc);
            Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((rows, f)).unwrap();
                let xhat = &*xhat_rc;
                let mut out = Vec::new();
                if nb {
                    out.push((beta, g2.sum_axis(Axis(0)).into_dyn()));
                }
                if ng {
                    let mut gg = ndarray::Array1::<f64>::zeros(f);
                    for r in 0..rows {
                        for c in 0..f {
                            gg[c] += g2[[r, c]] * xhat[[r, c]];
                        }
                    }
                    out.push((gamma, gg.into_dyn()));
                }
                if nx {
                    let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                    let mut mean_g = ndarray::Array1::<f64>::zeros(f);
                    let mut mean_gx = ndarray::Array1::<f64>::zeros(f);
                    for r in 0..rows {
                        for c in 0..f {
                            mean_g[c] += g2[[r, c]];
                            mean_gx[c] += g2[[r, c]] * xhat[[r, c]];
                        }
                    }
                    mean_g.mapv_inplace(|v| v / rows as f64);
                    mean_gx.mapv_inplace(|v| v / rows as f64);
                    let mut gx = ndarray::Array2::<f64>::zeros((rows, f));
                    for r in 0..rows {
                        for c in 0..f {
                            gx[[r, c]] = g1[c]
                                * inv_std_rc[c]
                                * (g2[[r, c]] - mean_g[c] - xhat[[r, c]] * mean_gx[c]);
                        }
                    }
                    out.push((x, gx.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        let node = self.push(value.into_dyn(), needs, back);
        (node, mean, var)
    }

    /// Batch norm with frozen statistics (evaluation / gradient checking):
    /// a per-feature affine map.
    pub fn batchnorm_eval(
        &mut self,
        x: Tid,
        gamma: Tid,
        beta: Tid,
        mean: &ndarray::Array1<f64>,
        var: &ndarray::Array1<f64>,
        eps: f64,
    ) -> Tid {
        let xv = self.value_rc(x);
        assert_eq!(xv.ndim(), 2);
        let (rows, f) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(mean.len(), f);
        assert_eq!(var.len(), f);
        let inv_std = Rc::new(var.mapv(|v| 1.0 / (v + eps).sqrt()));
        let mean_rc = Rc::new(mean.clone());
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let x2 = xv.view().into_dimensionality::<Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((rows, f));
        for r in 0..rows {
            for c in 0..f {
                value[[r, c]] = g1[c] * (x2[[r, c]] - mean_rc[c]) * inv_std[c] + b1[c];
            }
        }
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let needs = nx || ng || nb;
        let back: Option<BackFn> = if needs {
            let gv = Rc::clone(&gv);
            let xv = Rc::clone(&xv);
            let inv_std = Rc::clone(&inv_std);
            let mean_rc = Rc::clone(&mean_rc);
            Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((rows, f)).unwrap();
                let x2 = xv.view().into_shape_with_order((rows, f)).unwrap();
                let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = Vec::new();
                if nb {
                    out.push((beta, g2.sum_axis(Axis(0)).into_dyn()));
                }
                if ng {
                    let mut gg = ndarray::Array1::<f64>::zeros(f);
                    for r in 0..rows {
                        for c in 0..f {
                            gg[c] += g2[[r, c]] * (x2[[r, c]] - mean_rc[c]) * inv_std[c];
                        }
                    }
                    out.push((gamma, gg.into_dyn()));
                }
                if nx {
                    let mut gx = ndarray::Array2::<f64>::zeros((rows, f));
                    for r in 0..rows {
                        for c in 0..f {
                            gx[[r, c]] = g2[[r, c]] * g1[c] * inv_std[c];
                        }
                    }
                    out.push((x, gx.into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value.into_dyn(), needs, back)
    }

    /// Instance normalization of `x [b, c, s]`: per (sample, channel)
    /// statistics over the trailing spatial axis.
    pub fn instance_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Tid {
        let xv = self.value_rc(x);
        assert_eq!(xv.ndim(), 3);
        let (b, c, s) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(s >= 1);
        let gv = self.value_rc(gamma);
        let bv = self.value_rc(beta);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = Arr::zeros(IxDyn(&[b, c, s]));
        let mut inv_std = ndarray::Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut mean = 0.0;
                for si in 0..s {
                    mean += xv[[bi, ci, si]];
                }
                mean /= s as f64;
                let mut var = 0.0;
                for si in 0..s {
                    let d = xv[[bi, ci, si]] - mean;
                    var += d * d;
                }
                var /= s as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[[bi, ci]] = istd;
                for si in 0..s {
                    xhat[[bi, ci, si]] = (xv[[bi, ci, si]] - mean) * istd;
                }
            }
        }
        let mut value = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                let (gc, bc) = (gv[[ci]], bv[[ci]]);
                for si in 0..s {
                    value[[bi, ci, si]] = gc * xhat[[bi, ci, si]] + bc;
                }
            }
        }
        let xhat_rc = Rc::new(xhat);
        let inv_std_rc = Rc::new(inv_std);
        let (nx, ng, nb) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let needs = nx || ng || nb;
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let xhat = &*xhat_rc;
                let mut out = Vec::new();
                if nb {
                    let mut gb = ndarray::Array1::<f64>::zeros(c);
                    for bi in 0..b {
                        for ci in 0..c {
                            for si in 0..s {
                                gb[ci] += g[[bi, ci, si]];
                            }
                        }
                    }
                    out.push((beta, gb.into_dyn()));
                }
                if ng {
                    let mut gg = ndarray::Array1::<f64>::zeros(c);
                    for bi in 0..b {
                        for ci in 0..c {
                            for si in 0..s {
                                gg[ci] += g[[bi, ci, si]] * xhat[[bi, ci, si]];
                            }
                        }
                    }
                    out.push((gamma, gg.into_dyn()));
                }
                if nx {
                    let mut gx = zeros_like_dims(&[b, c, s]);
                    for bi in 0..b {
                        for ci in 0..c {
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for si in 0..s {
                                mean_g += g[[bi, ci, si]];
                                mean_gx += g[[bi, ci, si]] * xhat[[bi, ci, si]];
                            }
                            mean_g /= s as f64;
                            mean_gx /= s as f64;
                            let scale = gv[[ci]] * inv_std_rc[[bi, ci]];
                            for si in 0..s {
                                gx[[bi, ci, si]] = scale
                                    * (g[[bi, ci, si]]
                                        - mean_g
                                        - xhat[[bi, ci, si]] * mean_gx);
                            }
                        }
                    }
                    out.push((x, gx));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    /// L2-normalize each vector along the last axis. Zero-norm vectors map
    /// to zero (and receive zero gradient).
    pub fn l2_normalize_last(&mut self, x: Tid) -> Tid {
        let xv = self.value_rc(x);
        let dims: Vec<usize> = xv.shape().to_vec();
        let m = *dims.last().unwrap();
        let rows = xv.len() / m;
        let x2 = xv.view().into_shape_with_order((rows, m)).unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((rows, m));
        let mut norms = vec![0.0f64; rows];
        for r in 0..rows {
            let n = x2.row(r).dot(&x2.row(r)).sqrt();
            norms[r] = n;
            if n > 0.0 {
                for c in 0..m {
                    value[[r, c]] = x2[[r, c]] / n;
                }
            }
        }
        let out_rc = Rc::new(value.clone());
        let needs = self.needs_grad(x);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let g2 = g.view().into_shape_with_order((rows, m)).unwrap();
                let mut gx = ndarray::Array2::<f64>::zeros((rows, m));
                for r in 0..rows {
                    let n = norms[r];
                    if n > 0.0 {
                        let y = out_rc.row(r);
                        let dot = y.dot(&g2.row(r));
                        for c in 0..m {
                            gx[[r, c]] = (g2[[r, c]] - y[c] * dot) / n;
                        }
                    }
                }
                vec![(x, reshaped(gx.into_dyn(), &dims))]
            }))
        } else {
            None
        };
        let value = reshaped(value.into_dyn(), &xv.shape().to_vec());
        self.push(value, needs, back)
    }

    // ---- fused heads -------------------------------------------------------

    /// Cosine similarity of two 1-D vectors as a scalar node. A zero-norm
    /// side yields similarity 0 with zero gradient.
    pub fn cosine(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        assert_eq!(av.ndim(), 1);
        assert_eq!(av.shape(), bv.shape(), "cosine: length mismatch");
        let a1 = av.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let na = a1.dot(&a1).sqrt();
        let nb = b1.dot(&b1).sqrt();
        let degenerate = na == 0.0 || nb == 0.0;
        let cos = if degenerate { 0.0 } else { a1.dot(&b1) / (na * nb) };
        let value = Arr::from_elem(IxDyn(&[1]), cos);
        let (ng_a, ng_b) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn> = if ng_a || ng_b {
            Some(Box::new(move |g| {
                if degenerate {
                    return Vec::new();
                }
                let gs = g[[0]];
                let a1 = av.view().into_dimensionality::<Ix1>().unwrap();
                let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = Vec::new();
                if ng_a {
                    let ga = b1.mapv(|x| x / (na * nb)) - a1.mapv(|x| cos * x / (na * na));
                    out.push((a, ga.mapv(|x| x * gs).into_dyn()));
                }
                if ng_b {
                    let gb = a1.mapv(|x| x / (na * nb)) - b1.mapv(|x| cos * x / (nb * nb));
                    out.push((b, gb.mapv(|x| x * gs).into_dyn()));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ng_a || ng_b, back)
    }

    /// Mean softmax cross-entropy of `logits [batch, classes]` against
    /// integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Tid, labels: &[usize]) -> Tid {
        let lv = self.value_rc(logits);
        assert_eq!(lv.ndim(), 2);
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), b);
        for &y in labels {
            assert!(y < k, "softmax_cross_entropy: label {y} out of range {k}");
        }
        let l2 = lv.view().into_dimensionality::<Ix2>().unwrap();
        let mut probs = ndarray::Array2::<f64>::zeros((b, k));
        let mut loss = 0.0;
        for r in 0..b {
            let row = l2.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                z += (row[c] - m).exp();
            }
            let lse = m + z.ln();
            loss += lse - row[labels[r]];
            for c in 0..k {
                probs[[r, c]] = (row[c] - m).exp() / z;
            }
        }
        loss /= b as f64;
        let value = Arr::from_elem(IxDyn(&[1]), loss);
        let labels_v: Vec<usize> = labels.to_vec();
        let probs_rc = Rc::new(probs);
        let needs = self.needs_grad(logits);
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let gs = g[[0]] / b as f64;
                let mut gx = (*probs_rc).clone();
                for (r, &y) in labels_v.iter().enumerate() {
                    gx[[r, y]] -= 1.0;
                }
                gx.mapv_inplace(|v| v * gs);
                vec![(logits, gx.into_dyn())]
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    /// 2-D convolution, stride `s`, symmetric zero padding `p`.
    /// `x [b, cin, h, w]`, `w [cout, cin, kh, kw]`, `bias [cout]`.
    pub fn conv2d(&mut self, x: Tid, w: Tid, bias: Tid, stride: usize, pad: usize) -> Tid {
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let bv = self.value_rc(bias);
        assert_eq!(xv.ndim(), 4);
        assert_eq!(wv.ndim(), 4);
        let (b, cin, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, cin_w, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, cin_w, "conv2d: channel mismatch");
        assert_eq!(bv.len(), cout);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let ksz = cin * kh * kw;
        let npos = ho * wo;
        let geom = ConvGeom {
            cin,
            h,
            w: wid,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };

        let w2 = wv.view().into_shape_with_order((cout, ksz)).unwrap().to_owned();
        let outs = {
            let xv_ref: &Arr = &xv;
            let w2 = &w2;
            let bv_ref: &Arr = &bv;
            map_indexed(b, move |bi| {
                let cols = im2col(xv_ref, bi, geom);
                let mut o = w2.dot(&cols);
                for co in 0..cout {
                    let add = bv_ref[[co]];
                    o.row_mut(co).mapv_inplace(|v| v + add);
                }
                o
            })
        };
        let mut value = Arr::zeros(IxDyn(&[b, cout, ho, wo]));
        for (bi, o) in outs.iter().enumerate() {
            let dst = value.index_axis_mut(Axis(0), bi);
            let mut dst2 = dst.into_shape_with_order((cout, npos)).unwrap();
            dst2.assign(o);
        }

        let (nx, nw, nb) = (
            self.needs_grad(x),
            self.needs_grad(w),
            self.needs_grad(bias),
        );
        let needs = nx || nw || nb;
        let back: Option<BackFn> = if needs {
            Some(Box::new(move |g| {
                let mut out = Vec::new();
                let g4 = g.view().into_shape_with_order((b, cout, npos)).unwrap();
                if nb {
                    let mut gb = ndarray::Array1::<f64>::zeros(cout);
                    for bi in 0..b {
                        for co in 0..cout {
                            for pp in 0..npos {
                                gb[co] += g4[[bi, co, pp]];
                            }
                        }
                    }
                    out.push((bias, gb.into_dyn()));
                }
                if nw {
                    let xv_ref: &Arr = &xv;
                    let g4_ref = &g4;
                    let per_sample = map_indexed(b, move |bi| {
                        let cols = im2col(xv_ref, bi, geom);
                        let gsl = g4_ref.index_axis(Axis(0), bi);
                        gsl.dot(&cols.t())
                    });
                    let mut gw = ndarray::Array2::<f64>::zeros((cout, ksz));
                    for p in per_sample {
                        gw += &p;
                    }
                    out.push((w, reshaped(gw.into_dyn(), &[cout, cin, kh, kw])));
                }
                if nx {
                    let w2 = wv.view().into_shape_with_order((cout, ksz)).unwrap();
                    let w2_ref = &w2;
                    let g4_ref = &g4;
                    let per_sample = map_indexed(b, move |bi| {
                        let gsl = g4_ref.index_axis(Axis(0), bi);
                        let gcols = w2_ref.t().dot(&gsl); // [ksz, npos]
                        col2im(&gcols, geom)
                    });
                    let mut gx_all = Arr::zeros(IxDyn(&[b, cin, h, wid]));
                    for (bi, gx) in per_sample.into_iter().enumerate() {
                        gx_all.index_axis_mut(Axis(0), bi).assign(&gx);
                    }
                    out.push((x, gx_all));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    /// Sum a list of same-shaped nodes (used for scalar loss terms).
    pub fn add_many(&mut self, terms: &[Tid]) -> Tid {
        assert!(!terms.is_empty());
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(dims: &[usize], seed: u64) -> Arr {
        let mut rng = crate::rng::stream(seed);
        Arr::from_shape_simple_fn(IxDyn(dims), || crate::rng::normal(&mut rng))
    }

    /// Central finite-difference check of `build` (scalar output) against
    /// the tape gradient, over every element of every leaf.
    fn fd_check(inputs: &[Arr], build: impl Fn(&mut Graph, &[Tid]) -> Tid, tol: f64) {
        let mut g = Graph::new();
        let ids: Vec<Tid> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root);
        let h = 1e-6;
        for (k, base) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[k])
                .cloned()
                .unwrap_or_else(|| Arr::zeros(base.raw_dim()));
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let mut pert: Vec<Arr> = inputs.to_vec();
                    pert[k].as_slice_mut().unwrap()[idx] += delta;
                    let mut g = Graph::new();
                    let ids: Vec<Tid> = pert.iter().map(|a| g.leaf(a.clone())).collect();
                    let root = build(&mut g, &ids);
                    g.value(root)[[0]]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic.as_slice().unwrap()[idx];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    ((ana - num) / denom).abs() < tol,
                    "input {k} elem {idx}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    fn weighted_sum(g: &mut Graph, x: Tid, seed: u64) -> Tid {
        let w = g.constant(randn(&g.value(x).shape().to_vec(), seed));
        let prod = g.mul(x, w);
        g.sum_all(prod)
    }

    #[test]
    fn elementwise_grads() {
        fd_check(&[randn(&[3, 4], 0), randn(&[3, 4], 1)], |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let m = g.mul(s, ids[0]);
            let r = g.relu(m);
            let t = g.tanh(r);
            let sg = g.sigmoid(t);
            weighted_sum(g, sg, 99)
        }, 1e-6);
    }

    #[test]
    fn linear_and_bias_grads() {
        fd_check(
            &[randn(&[2, 3, 4], 0), randn(&[5, 4], 1), randn(&[5], 2)],
            |g, ids| {
                let y = g.linear(ids[0], ids[1]);
                let y = g.add_bias(y, ids[2]);
                weighted_sum(g, y, 7)
            },
            1e-6,
        );
    }

    #[test]
    fn shape_op_grads() {
        fd_check(&[randn(&[2, 3, 4], 0)], |g, ids| {
            let p = g.permute(ids[0], &[2, 0, 1]);
            let r = g.reshape(p, &[4, 6]);
            let s = g.slice_rows(r, 1, 3);
            weighted_sum(g, s, 3)
        }, 1e-6);
        fd_check(&[randn(&[2, 3], 0), randn(&[2, 5], 1)], |g, ids| {
            let c = g.concat_last(&[ids[0], ids[1]]);
            weighted_sum(g, c, 4)
        }, 1e-6);
        fd_check(&[randn(&[4, 3], 0)], |g, ids| {
            let rows = g.gather_rows(ids[0], &[1, 1, 3, 0]);
            weighted_sum(g, rows, 5)
        }, 1e-6);
    }

    #[test]
    fn reduction_grads() {
        fd_check(&[randn(&[3, 5], 0)], |g, ids| {
            let m = g.mean_last(ids[0]);
            weighted_sum(g, m, 11)
        }, 1e-6);
        // Max with a mask: exclude the last column.
        fd_check(&[randn(&[3, 5], 0)], |g, ids| {
            let mut valid = vec![true; 15];
            for r in 0..3 {
                valid[r * 5 + 4] = false;
            }
            let m = g.masked_max_last(ids[0], &valid);
            weighted_sum(g, m, 12)
        }, 1e-6);
    }

    #[test]
    fn pairwise_and_aggregate_grads() {
        fd_check(&[randn(&[2, 3, 4], 0), randn(&[2, 5, 4], 1)], |g, ids| {
            let d = g.pairwise_diff(ids[0], ids[1]);
            weighted_sum(g, d, 13)
        }, 1e-6);
        fd_check(&[randn(&[2, 3, 4], 0), randn(&[5, 4], 1)], |g, ids| {
            let d = g.pairwise_diff_shared(ids[0], ids[1]);
            weighted_sum(g, d, 14)
        }, 1e-6);
        fd_check(&[randn(&[2, 3, 4, 5], 0), randn(&[2, 3, 5], 1)], |g, ids| {
            let v = g.weighted_aggregate(ids[0], ids[1]);
            weighted_sum(g, v, 15)
        }, 1e-6);
    }

    #[test]
    fn broadcast_grads() {
        fd_check(&[randn(&[2, 3, 4], 0), randn(&[2, 3], 1)], |g, ids| {
            let y = g.mul_bc_channel(ids[0], ids[1]);
            weighted_sum(g, y, 16)
        }, 1e-6);
        fd_check(&[randn(&[2, 3], 0)], |g, ids| {
            let y = g.broadcast_last(ids[0], 4);
            weighted_sum(g, y, 17)
        }, 1e-6);
    }

    #[test]
    fn norm_grads() {
        fd_check(
            &[randn(&[6, 4], 0), randn(&[4], 1), randn(&[4], 2)],
            |g, ids| {
                let (y, _, _) = g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5);
                weighted_sum(g, y, 18)
            },
            1e-5,
        );
        let mean = ndarray::Array1::from_vec(vec![0.3, -0.2, 0.1, 0.05]);
        let var = ndarray::Array1::from_vec(vec![1.2, 0.7, 0.9, 1.5]);
        fd_check(
            &[randn(&[6, 4], 0), randn(&[4], 1), randn(&[4], 2)],
            move |g, ids| {
                let y = g.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5);
                weighted_sum(g, y, 19)
            },
            1e-6,
        );
        fd_check(
            &[randn(&[2, 3, 5], 0), randn(&[3], 1), randn(&[3], 2)],
            |g, ids| {
                let y = g.instance_norm(ids[0], ids[1], ids[2], 1e-5);
                weighted_sum(g, y, 20)
            },
            1e-5,
        );
        fd_check(&[randn(&[4, 5], 0)], |g, ids| {
            let y = g.l2_normalize_last(ids[0]);
            weighted_sum(g, y, 21)
        }, 1e-5);
    }

    #[test]
    fn zero_vector_normalizes_to_zero() {
        let mut g = Graph::new();
        let mut x = randn(&[3, 4], 0);
        x.index_axis_mut(Axis(0), 1).fill(0.0);
        let id = g.leaf(x);
        let y = g.l2_normalize_last(id);
        assert!(g.value(y).index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.get(id).unwrap();
        assert!(gx.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fused_head_grads() {
        fd_check(&[randn(&[6], 0), randn(&[6], 1)], |g, ids| {
            g.cosine(ids[0], ids[1])
        }, 1e-6);
        fd_check(&[randn(&[3, 5], 0)], |g, ids| {
            g.softmax_cross_entropy(ids[0], &[1, 4, 0])
        }, 1e-6);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(Arr::zeros(IxDyn(&[4])));
        let b = g.leaf(randn(&[4], 1));
        let c = g.cosine(a, b);
        assert_eq!(g.value(c)[[0]], 0.0);
        let grads = g.backward(c);
        assert!(grads.get(b).is_none() || grads.get(b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_grads() {
        fd_check(
            &[randn(&[2, 2, 5, 4], 0), randn(&[3, 2, 3, 3], 1), randn(&[3], 2)],
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1);
                weighted_sum(g, y, 22)
            },
            1e-5,
        );
    }

    #[test]
    fn conv2d_shapes_follow_stride_arithmetic() {
        let mut g = Graph::new();
        let x = g.constant(randn(&[1, 3, 48, 16], 0));
        let w = g.constant(randn(&[32, 3, 3, 3], 1));
        let b = g.constant(Arr::zeros(IxDyn(&[32])));
        let y = g.conv2d(x, w, b, 2, 1);
        assert_eq!(g.value(y).shape(), &[1, 32, 24, 8]);
    }

    #[test]
    fn max_breaks_ties_toward_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(Arr::from_shape_vec(IxDyn(&[1, 3]), vec![2.0, 2.0, 1.0]).unwrap());
        let m = g.max_last(x);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_over_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(Arr::from_elem(IxDyn(&[1]), 3.0));
        let y = g.mul(x, x); // x^2
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!((grads.get(x).unwrap()[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(randn(&[2, 2], 0));
        let y = g.relu(x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn parallel_and_sequential_linear_agree() {
        // The row-chunked matmul must not depend on chunk boundaries.
        let x = randn(&[700, 6], 0);
        let w = randn(&[3, 6], 1);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let y = g.linear(xi, wi);
        let x2 = x.view().into_shape_with_order((700, 6)).unwrap();
        let w2 = w.view().into_shape_with_order((3, 6)).unwrap();
        let expect = x2.dot(&w2.t());
        let got = g.value(y).view().into_shape_with_order((700, 3)).unwrap().to_owned();
        assert!(expect
            .iter()
            .zip(got.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rng_probe_is_fd_comparable() {
        let mut rng = crate::rng::stream(1);
        let _ = rng.gen::<f64>();
    }
}
