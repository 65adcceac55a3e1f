//! Minimal define-by-run reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! A [`Graph`] is rebuilt per training step. Ops append nodes; `backward`
//! walks the tape in reverse. Convolution backward passes recompute their
//! im2col lowering from the stored activations instead of caching it, which
//! keeps peak memory proportional to the activations alone.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use super::conv::{col2im2d, col2im3d, conv_out, im2col2d, im2col3d};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(pub usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &Graph) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    data: ArrayD<f64>,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// When false, no backward closures are recorded (inference mode).
    pub grad_enabled: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, data: ArrayD<f64>) -> T {
        let requires = self.grad_enabled;
        self.push(data, vec![], None, requires)
    }

    /// Non-trainable input or constant.
    pub fn constant(&mut self, data: ArrayD<f64>) -> T {
        self.push(data, vec![], None, false)
    }

    pub fn scalar(&mut self, v: f64) -> T {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self, t: T) -> &ArrayD<f64> {
        &self.nodes[t.0].data
    }

    pub fn scalar_value(&self, t: T) -> f64 {
        let d = &self.nodes[t.0].data;
        debug_assert_eq!(d.len(), 1);
        *d.iter().next().unwrap()
    }

    pub fn shape(&self, t: T) -> Vec<usize> {
        self.nodes[t.0].data.shape().to_vec()
    }

    fn push(
        &mut self,
        data: ArrayD<f64>,
        parents: Vec<usize>,
        back: Option<BackFn>,
        requires: bool,
    ) -> T {
        let keep = requires && self.grad_enabled;
        self.nodes.push(Node {
            data,
            parents,
            back: if keep { back } else { None },
            requires: keep,
        });
        T(self.nodes.len() - 1)
    }

    fn requires_any(&self, ids: &[T]) -> bool {
        ids.iter().any(|t| self.nodes[t.0].requires)
    }

    /// Gradients of `loss` (a 1-element tensor) with respect to every node.
    pub fn backward(&self, loss: T) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward target must be a scalar tensor"
        );
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].data.raw_dim(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                let parent_grads = back(&g, self);
                for (pid, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        match &mut grads[*pid] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: T, b: T) -> T {
        let data = &self.nodes[a.0].data + &self.nodes[b.0].data;
        let req = self.requires_any(&[a, b]);
        self.push(
            data,
            vec![a.0, b.0],
            Some(Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])),
            req,
        )
    }

    pub fn sub(&mut self, a: T, b: T) -> T {
        let data = &self.nodes[a.0].data - &self.nodes[b.0].data;
        let req = self.requires_any(&[a, b]);
        self.push(
            data,
            vec![a.0, b.0],
            Some(Box::new(|g, _| vec![Some(g.clone()), Some(-g)])),
            req,
        )
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        let data = &self.nodes[a.0].data * &self.nodes[b.0].data;
        let req = self.requires_any(&[a, b]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            data,
            vec![ai, bi],
            Some(Box::new(move |g, gr| {
                vec![
                    Some(g * &gr.nodes[bi].data),
                    Some(g * &gr.nodes[ai].data),
                ]
            })),
            req,
        )
    }

    pub fn div(&mut self, a: T, b: T) -> T {
        let data = &self.nodes[a.0].data / &self.nodes[b.0].data;
        let req = self.requires_any(&[a, b]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            data,
            vec![ai, bi],
            Some(Box::new(move |g, gr| {
                let bv = &gr.nodes[bi].data;
                let av = &gr.nodes[ai].data;
                vec![Some(g / bv), Some(-(g * av) / (bv * bv))]
            })),
            req,
        )
    }

    pub fn neg(&mut self, a: T) -> T {
        let data = -&self.nodes[a.0].data;
        let req = self.requires_any(&[a]);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(|g, _| vec![Some(-g)])),
            req,
        )
    }

    pub fn scale(&mut self, a: T, c: f64) -> T {
        let data = self.nodes[a.0].data.mapv(|v| v * c);
        let req = self.requires_any(&[a]);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(g.mapv(|v| v * c))])),
            req,
        )
    }

    pub fn add_scalar(&mut self, a: T, c: f64) -> T {
        let data = self.nodes[a.0].data.mapv(|v| v + c);
        let req = self.requires_any(&[a]);
        self.push(
            data,
            vec![a.0],
            Some(Box::new(|g, _| vec![Some(g.clone())])),
            req,
        )
    }

    pub fn abs(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.mapv(f64::abs);
        let req = self.requires_any(&[a]);
        let ai = a.0;
        self.push(
            data,
            vec![ai],
            Some(Box::new(move |g, gr| {
                vec![Some(g * &gr.nodes[ai].data.mapv(|v| v.signum()))]
            })),
            req,
        )
    }

    pub fn square(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.mapv(|v| v * v);
        let req = self.requires_any(&[a]);
        let ai = a.0;
        self.push(
            data,
            vec![ai],
            Some(Box::new(move |g, gr| {
                vec![Some(g * &gr.nodes[ai].data.mapv(|v| 2.0 * v))]
            })),
            req,
        )
    }

    pub fn sqrt(&mut self, a: T) -> T {
        let out = self.nodes[a.0].data.mapv(f64::sqrt);
        let req = self.requires_any(&[a]);
        let saved = out.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![Some(g * &saved.mapv(|v| 0.5 / v.max(1e-12)))]
            })),
            req,
        )
    }

    pub fn exp(&mut self, a: T) -> T {
        let out = self.nodes[a.0].data.mapv(f64::exp);
        let req = self.requires_any(&[a]);
        let saved = out.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| vec![Some(g * &saved)])),
            req,
        )
    }

    pub fn relu(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.mapv(|v| v.max(0.0));
        let req = self.requires_any(&[a]);
        let ai = a.0;
        self.push(
            data,
            vec![ai],
            Some(Box::new(move |g, gr| {
                vec![Some(
                    g * &gr.nodes[ai].data.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                )]
            })),
            req,
        )
    }

    pub fn sigmoid(&mut self, a: T) -> T {
        let out = self.nodes[a.0].data.mapv(sigmoid_f);
        let req = self.requires_any(&[a]);
        let saved = out.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![Some(g * &saved.mapv(|s| s * (1.0 - s)))]
            })),
            req,
        )
    }

    pub fn silu(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.mapv(|v| v * sigmoid_f(v));
        let req = self.requires_any(&[a]);
        let ai = a.0;
        self.push(
            data,
            vec![ai],
            Some(Box::new(move |g, gr| {
                vec![Some(g * &gr.nodes[ai].data.mapv(|v| {
                    let s = sigmoid_f(v);
                    s * (1.0 + v * (1.0 - s))
                }))]
            })),
            req,
        )
    }

    /// Cuts the gradient: output equals input but is treated as a constant.
    pub fn detach(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.clone();
        self.constant(data)
    }

    // ---- reductions / reshaping ----

    pub fn sum_all(&mut self, a: T) -> T {
        let s = self.nodes[a.0].data.sum();
        let req = self.requires_any(&[a]);
        let shape = self.nodes[a.0].data.raw_dim();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![Some(ArrayD::from_elem(shape.clone(), g[[0]]))]
            })),
            req,
        )
    }

    pub fn mean_all(&mut self, a: T) -> T {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: T, shape: &[usize]) -> T {
        let data = self.nodes[a.0]
            .data
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let req = self.requires_any(&[a]);
        let old = self.nodes[a.0].data.raw_dim();
        self.push(
            data,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![Some(
                    g.clone()
                        .into_shape_with_order(old.clone())
                        .expect("reshape backward"),
                )]
            })),
            req,
        )
    }

    pub fn concat(&mut self, axis: usize, xs: &[T]) -> T {
        let views: Vec<_> = xs.iter().map(|t| self.nodes[t.0].data.view()).collect();
        let data = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let req = self.requires_any(xs);
        let extents: Vec<usize> = xs
            .iter()
            .map(|t| self.nodes[t.0].data.shape()[axis])
            .collect();
        let parents: Vec<usize> = xs.iter().map(|t| t.0).collect();
        self.push(
            data,
            parents,
            Some(Box::new(move |g, _| {
                let mut out = Vec::with_capacity(extents.len());
                let mut offset = 0;
                for e in &extents {
                    let piece = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + *e as isize))
                        .to_owned();
                    out.push(Some(piece));
                    offset += *e as isize;
                }
                out
            })),
            req,
        )
    }

    // ---- linear algebra ----

    /// a: [M, K] @ b: [K, N] -> [M, N]
    pub fn matmul(&mut self, a: T, b: T) -> T {
        let am = as2(&self.nodes[a.0].data);
        let bm = as2(&self.nodes[b.0].data);
        let data = am.dot(&bm).into_dyn();
        let req = self.requires_any(&[a, b]);
        let (ai, bi) = (a.0, b.0);
        self.push(
            data,
            vec![ai, bi],
            Some(Box::new(move |g, gr| {
                let gm = as2(g);
                let am = as2(&gr.nodes[ai].data);
                let bm = as2(&gr.nodes[bi].data);
                vec![
                    Some(gm.dot(&bm.t()).into_dyn()),
                    Some(am.t().dot(&gm).into_dyn()),
                ]
            })),
            req,
        )
    }

    /// x: [N, F] plus row-broadcast bias b: [F].
    pub fn add_bias_row(&mut self, x: T, b: T) -> T {
        let xd = as2(&self.nodes[x.0].data);
        let bd = &self.nodes[b.0].data;
        let b1 = Array1::from_iter(bd.iter().cloned());
        let data = (&xd + &b1).into_dyn();
        let req = self.requires_any(&[x, b]);
        self.push(
            data,
            vec![x.0, b.0],
            Some(Box::new(move |g, _| {
                let gm = as2(g);
                let db = gm.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            })),
            req,
        )
    }

    /// Softmax over a 1-d tensor.
    pub fn softmax1d(&mut self, a: T) -> T {
        let x = &self.nodes[a.0].data;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = x.mapv(|v| (v - m).exp());
        let s: f64 = e.sum();
        let out = e.mapv(|v| v / s);
        let req = self.requires_any(&[a]);
        let saved = out.clone();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g, _| {
                let dot: f64 = g.iter().zip(saved.iter()).map(|(a, b)| a * b).sum();
                vec![Some(
                    ndarray::Zip::from(g)
                        .and(&saved)
                        .map_collect(|gv, sv| sv * (gv - dot)),
                )]
            })),
            req,
        )
    }

    // ---- convolutions ----

    /// x: [N, Ci, H, W], w: [Co, Ci, kh, kw], b: [Co].
    pub fn conv2d(&mut self, x: T, w: T, b: Option<T>, stride: [usize; 2], pad: [usize; 2]) -> T {
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let (n, _ci, h, wi) = (xd.shape()[0], xd.shape()[1], xd.shape()[2], xd.shape()[3]);
        let (co, k) = (wd.shape()[0], [wd.shape()[2], wd.shape()[3]]);
        let ho = conv_out(h, k[0], stride[0], pad[0]);
        let wo = conv_out(wi, k[1], stride[1], pad[1]);

        let cols = im2col2d(xd, k, stride, pad);
        let wmat = as2(&wd.view().into_shape_with_order((co, wd.len() / co)).unwrap().into_dyn().to_owned());
        let ymat = wmat.dot(&cols); // [Co, N*Ho*Wo]
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, co, ho, wo]));
        for c in 0..co {
            for ni in 0..n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        y[[ni, c, oh, ow]] = ymat[[c, (ni * ho + oh) * wo + ow]];
                    }
                }
            }
        }
        if let Some(bt) = b {
            let bd = &self.nodes[bt.0].data;
            for c in 0..co {
                let bv = bd[[c]];
                for ni in 0..n {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            y[[ni, c, oh, ow]] += bv;
                        }
                    }
                }
            }
        }

        let mut parents = vec![x.0, w.0];
        if let Some(bt) = b {
            parents.push(bt.0);
        }
        let req = self.requires_any(
            &parents.iter().map(|p| T(*p)).collect::<Vec<_>>(),
        );
        let (xi, wi_id) = (x.0, w.0);
        let has_bias = b.is_some();
        self.push(
            y,
            parents,
            Some(Box::new(move |g, gr| {
                let xd = &gr.nodes[xi].data;
                let wd = &gr.nodes[wi_id].data;
                let (n, _ci, h, wdim) = (xd.shape()[0], xd.shape()[1], xd.shape()[2], xd.shape()[3]);
                let co = wd.shape()[0];
                let k = [wd.shape()[2], wd.shape()[3]];
                let ho = conv_out(h, k[0], stride[0], pad[0]);
                let wo = conv_out(wdim, k[1], stride[1], pad[1]);
                // gather grad into [Co, N*Ho*Wo]
                let mut gmat = Array2::<f64>::zeros((co, n * ho * wo));
                for c in 0..co {
                    for ni in 0..n {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                gmat[[c, (ni * ho + oh) * wo + ow]] = g[[ni, c, oh, ow]];
                            }
                        }
                    }
                }
                let cols = im2col2d(xd, k, stride, pad);
                let dwmat = gmat.dot(&cols.t()); // [Co, Ci*kh*kw]
                let dw = dwmat
                    .into_shape_with_order(wd.raw_dim())
                    .expect("conv2d dw shape")
                    .into_dyn();
                let wmat = as2(&wd.view().into_shape_with_order((co, wd.len() / co)).unwrap().into_dyn().to_owned());
                let dcols = wmat.t().dot(&gmat);
                let dx = col2im2d(&dcols, xd.shape(), k, stride, pad);
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(&[co]));
                    for c in 0..co {
                        let mut s = 0.0;
                        for ni in 0..n {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    s += g[[ni, c, oh, ow]];
                                }
                            }
                        }
                        db[[c]] = s;
                    }
                    out.push(Some(db));
                }
                out
            })),
            req,
        )
    }

    /// x: [N, Ci, D, H, W], w: [Co, Ci, kd, kh, kw], b: [Co].
    pub fn conv3d(&mut self, x: T, w: T, b: Option<T>, stride: [usize; 3], pad: [usize; 3]) -> T {
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let s = xd.shape();
        let (n, d, h, wdim) = (s[0], s[2], s[3], s[4]);
        let co = wd.shape()[0];
        let k = [wd.shape()[2], wd.shape()[3], wd.shape()[4]];
        let d_o = conv_out(d, k[0], stride[0], pad[0]);
        let ho = conv_out(h, k[1], stride[1], pad[1]);
        let wo = conv_out(wdim, k[2], stride[2], pad[2]);

        let cols = im2col3d(xd, k, stride, pad);
        let wmat = as2(&wd.view().into_shape_with_order((co, wd.len() / co)).unwrap().into_dyn().to_owned());
        let ymat = wmat.dot(&cols);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, co, d_o, ho, wo]));
        {
            let bd = b.map(|bt| self.nodes[bt.0].data.clone());
            for c in 0..co {
                let bv = bd.as_ref().map_or(0.0, |bv| bv[[c]]);
                for ni in 0..n {
                    for od in 0..d_o {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                y[[ni, c, od, oh, ow]] =
                                    ymat[[c, ((ni * d_o + od) * ho + oh) * wo + ow]] + bv;
                            }
                        }
                    }
                }
            }
        }

        let mut parents = vec![x.0, w.0];
        if let Some(bt) = b {
            parents.push(bt.0);
        }
        let req = self.requires_any(&parents.iter().map(|p| T(*p)).collect::<Vec<_>>());
        let (xi, wid) = (x.0, w.0);
        let has_bias = b.is_some();
        self.push(
            y,
            parents,
            Some(Box::new(move |g, gr| {
                let xd = &gr.nodes[xi].data;
                let wd = &gr.nodes[wid].data;
                let s = xd.shape();
                let (n, d, h, wdim) = (s[0], s[2], s[3], s[4]);
                let co = wd.shape()[0];
                let k = [wd.shape()[2], wd.shape()[3], wd.shape()[4]];
                let d_o = conv_out(d, k[0], stride[0], pad[0]);
                let ho = conv_out(h, k[1], stride[1], pad[1]);
                let wo = conv_out(wdim, k[2], stride[2], pad[2]);
                let mut gmat = Array2::<f64>::zeros((co, n * d_o * ho * wo));
                for c in 0..co {
                    for ni in 0..n {
                        for od in 0..d_o {
                            for oh in 0..ho {
                                for ow in 0..wo {
                                    gmat[[c, ((ni * d_o + od) * ho + oh) * wo + ow]] =
                                        g[[ni, c, od, oh, ow]];
                                }
                            }
                        }
                    }
                }
                let cols = im2col3d(xd, k, stride, pad);
                let dwmat = gmat.dot(&cols.t());
                let dw = dwmat
                    .into_shape_with_order(wd.raw_dim())
                    .expect("conv3d dw shape")
                    .into_dyn();
                let wmat = as2(&wd.view().into_shape_with_order((co, wd.len() / co)).unwrap().into_dyn().to_owned());
                let dcols = wmat.t().dot(&gmat);
                let dx = col2im3d(&dcols, xd.shape(), k, stride, pad);
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(&[co]));
                    for c in 0..co {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            for od in 0..d_o {
                                for oh in 0..ho {
                                    for ow in 0..wo {
                                        acc += g[[ni, c, od, oh, ow]];
                                    }
                                }
                            }
                        }
                        db[[c]] = acc;
                    }
                    out.push(Some(db));
                }
                out
            })),
            req,
        )
    }

    /// Transposed 3D convolution. x: [N, Ci, D, H, W], w: [Ci, Co, kd, kh, kw].
    /// Output extent per axis: (in - 1) * stride - 2 * pad + k.
    pub fn conv_transpose3d(
        &mut self,
        x: T,
        w: T,
        b: Option<T>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> T {
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let s = xd.shape();
        let (n, ci, d, h, wdim) = (s[0], s[1], s[2], s[3], s[4]);
        let co = wd.shape()[1];
        let k = [wd.shape()[2], wd.shape()[3], wd.shape()[4]];
        let d_o = (d - 1) * stride[0] + k[0] - 2 * pad[0];
        let ho = (h - 1) * stride[1] + k[1] - 2 * pad[1];
        let wo = (wdim - 1) * stride[2] + k[2] - 2 * pad[2];

        // Gather x into [Ci, N*D*H*W], expand through w^T, scatter via col2im.
        let xmat = gather_chan3(xd);
        let wmat = as2(&wd.view().into_shape_with_order((ci, wd.len() / ci)).unwrap().into_dyn().to_owned());
        let cols = wmat.t().dot(&xmat); // [Co*kd*kh*kw, N*D*H*W]
        let yshape = [n, co, d_o, ho, wo];
        let mut y = col2im3d(&cols, &yshape, k, stride, pad);
        if let Some(bt) = b {
            let bd = &self.nodes[bt.0].data;
            for c in 0..co {
                let bv = bd[[c]];
                y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bv);
            }
        }

        let mut parents = vec![x.0, w.0];
        if let Some(bt) = b {
            parents.push(bt.0);
        }
        let req = self.requires_any(&parents.iter().map(|p| T(*p)).collect::<Vec<_>>());
        let (xi, wid) = (x.0, w.0);
        let has_bias = b.is_some();
        self.push(
            y,
            parents,
            Some(Box::new(move |g, gr| {
                let xd = &gr.nodes[xi].data;
                let wd = &gr.nodes[wid].data;
                let ci = xd.shape()[1];
                let co = wd.shape()[1];
                let k = [wd.shape()[2], wd.shape()[3], wd.shape()[4]];
                // dX = conv(g, w): im2col of g then w_mat @ cols.
                let gcols = im2col3d(g, k, stride, pad); // [Co*k^3, N*D*H*W]
                let wmat = as2(&wd.view().into_shape_with_order((ci, wd.len() / ci)).unwrap().into_dyn().to_owned());
                let dxmat = wmat.dot(&gcols); // [Ci, N*D*H*W]
                let dx = scatter_chan3(&dxmat, xd.shape());
                // dW = x_mat @ gcols^T -> [Ci, Co*k^3]
                let xmat = gather_chan3(xd);
                let dwmat = xmat.dot(&gcols.t());
                let dw = dwmat
                    .into_shape_with_order(wd.raw_dim())
                    .expect("convT3d dw shape")
                    .into_dyn();
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = ArrayD::<f64>::zeros(IxDyn(&[co]));
                    for c in 0..co {
                        db[[c]] = g.index_axis(Axis(1), c).sum();
                    }
                    out.push(Some(db));
                }
                out
            })),
            req,
        )
    }

    // ---- pooling / resampling ----

    /// Non-overlapping average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: T, k: usize) -> T {
        let xd = &self.nodes[x.0].data;
        let s = xd.shape().to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ho, wo) = (h / k, w / k);
        let lead: usize = s[..s.len() - 2].iter().product();
        let xv = xd
            .view()
            .into_shape_with_order((lead, h, w))
            .expect("avg_pool2d view");
        let mut out = ndarray::Array3::<f64>::zeros((lead, ho, wo));
        let inv = 1.0 / (k * k) as f64;
        for l in 0..lead {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..k {
                        for j in 0..k {
                            acc += xv[[l, oh * k + i, ow * k + j]];
                        }
                    }
                    out[[l, oh, ow]] = acc * inv;
                }
            }
        }
        let mut oshape = s.clone();
        let ln = oshape.len();
        oshape[ln - 2] = ho;
        oshape[ln - 1] = wo;
        let data = out.into_shape_with_order(IxDyn(&oshape)).unwrap();
        let req = self.requires_any(&[x]);
        self.push(
            data,
            vec![x.0],
            Some(Box::new(move |g, _| {
                let gs = g.shape().to_vec();
                let (gho, gwo) = (gs[gs.len() - 2], gs[gs.len() - 1]);
                let lead: usize = gs[..gs.len() - 2].iter().product();
                let gv = g
                    .view()
                    .into_shape_with_order((lead, gho, gwo))
                    .expect("avg_pool2d backward view");
                let mut dx = ndarray::Array3::<f64>::zeros((lead, gho * k, gwo * k));
                let inv = 1.0 / (k * k) as f64;
                for l in 0..lead {
                    for oh in 0..gho {
                        for ow in 0..gwo {
                            let gval = gv[[l, oh, ow]] * inv;
                            for i in 0..k {
                                for j in 0..k {
                                    dx[[l, oh * k + i, ow * k + j]] = gval;
                                }
                            }
                        }
                    }
                }
                let mut xshape = gs;
                let ln = xshape.len();
                xshape[ln - 2] *= k;
                xshape[ln - 1] *= k;
                vec![Some(dx.into_shape_with_order(IxDyn(&xshape)).unwrap())]
            })),
            req,
        )
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample_nearest2d(&mut self, x: T) -> T {
        let xd = &self.nodes[x.0].data;
        let s = xd.shape().to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let xv = xd
            .view()
            .into_shape_with_order((lead, h, w))
            .expect("upsample view");
        let mut out = ndarray::Array3::<f64>::zeros((lead, h * 2, w * 2));
        for l in 0..lead {
            for i in 0..h * 2 {
                for j in 0..w * 2 {
                    out[[l, i, j]] = xv[[l, i / 2, j / 2]];
                }
            }
        }
        let mut oshape = s.clone();
        let ln = oshape.len();
        oshape[ln - 2] = h * 2;
        oshape[ln - 1] = w * 2;
        let data = out.into_shape_with_order(IxDyn(&oshape)).unwrap();
        let req = self.requires_any(&[x]);
        self.push(
            data,
            vec![x.0],
            Some(Box::new(move |g, _| {
                let gs = g.shape().to_vec();
                let (gh, gw) = (gs[gs.len() - 2], gs[gs.len() - 1]);
                let lead: usize = gs[..gs.len() - 2].iter().product();
                let gv = g
                    .view()
                    .into_shape_with_order((lead, gh, gw))
                    .expect("upsample backward view");
                let mut dx = ndarray::Array3::<f64>::zeros((lead, gh / 2, gw / 2));
                for l in 0..lead {
                    for i in 0..gh {
                        for j in 0..gw {
                            dx[[l, i / 2, j / 2]] += gv[[l, i, j]];
                        }
                    }
                }
                let mut xshape = gs;
                let ln = xshape.len();
                xshape[ln - 2] /= 2;
                xshape[ln - 1] /= 2;
                vec![Some(dx.into_shape_with_order(IxDyn(&xshape)).unwrap())]
            })),
            req,
        )
    }

    // ---- channel broadcasting ----

    /// Mean over every axis after the first two: [N, C, ...] -> [N, C].
    pub fn mean_channels(&mut self, x: T) -> T {
        let xd = &self.nodes[x.0].data;
        let s = xd.shape().to_vec();
        let (n, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let xv = xd
            .view()
            .into_shape_with_order((n, c, spatial))
            .expect("mean_channels view");
        let data = xv.mean_axis(Axis(2)).unwrap().into_dyn();
        let req = self.requires_any(&[x]);
        self.push(
            data,
            vec![x.0],
            Some(Box::new(move |g, _| {
                let gv = as2(g);
                let inv = 1.0 / spatial as f64;
                let mut dx = ndarray::Array3::<f64>::zeros((n, c, spatial));
                for ni in 0..n {
                    for ci in 0..c {
                        let gval = gv[[ni, ci]] * inv;
                        for sp in 0..spatial {
                            dx[[ni, ci, sp]] = gval;
                        }
                    }
                }
                vec![Some(dx.into_shape_with_order(IxDyn(&s)).unwrap())]
            })),
            req,
        )
    }

    /// x: [N, C, ...] * s: [N, C] broadcast over trailing axes.
    pub fn bc_mul_channel(&mut self, x: T, scale: T) -> T {
        self.bc_channel(x, scale, true)
    }

    /// x: [N, C, ...] + s: [N, C] broadcast over trailing axes.
    pub fn bc_add_channel(&mut self, x: T, shift: T) -> T {
        self.bc_channel(x, shift, false)
    }

    fn bc_channel(&mut self, x: T, s: T, multiply: bool) -> T {
        let xd = &self.nodes[x.0].data;
        let sd = as2(&self.nodes[s.0].data);
        let shape = xd.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let xv = xd
            .view()
            .into_shape_with_order((n, c, spatial))
            .expect("bc_channel view");
        let mut out = ndarray::Array3::<f64>::zeros((n, c, spatial));
        for ni in 0..n {
            for ci in 0..c {
                let sv = sd[[ni, ci]];
                for sp in 0..spatial {
                    out[[ni, ci, sp]] = if multiply {
                        xv[[ni, ci, sp]] * sv
                    } else {
                        xv[[ni, ci, sp]] + sv
                    };
                }
            }
        }
        let data = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let req = self.requires_any(&[x, s]);
        let (xi, si) = (x.0, s.0);
        self.push(
            data,
            vec![xi, si],
            Some(Box::new(move |g, gr| {
                let gv = g
                    .view()
                    .into_shape_with_order((n, c, spatial))
                    .expect("bc_channel backward view");
                let mut ds = Array2::<f64>::zeros((n, c));
                let dx;
                if multiply {
                    let sd = as2(&gr.nodes[si].data);
                    let xd = &gr.nodes[xi].data;
                    let xv = xd.view().into_shape_with_order((n, c, spatial)).unwrap();
                    let mut dxa = ndarray::Array3::<f64>::zeros((n, c, spatial));
                    for ni in 0..n {
                        for ci in 0..c {
                            let sv = sd[[ni, ci]];
                            let mut acc = 0.0;
                            for sp in 0..spatial {
                                dxa[[ni, ci, sp]] = gv[[ni, ci, sp]] * sv;
                                acc += gv[[ni, ci, sp]] * xv[[ni, ci, sp]];
                            }
                            ds[[ni, ci]] = acc;
                        }
                    }
                    dx = dxa;
                } else {
                    for ni in 0..n {
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for sp in 0..spatial {
                                acc += gv[[ni, ci, sp]];
                            }
                            ds[[ni, ci]] = acc;
                        }
                    }
                    dx = gv.to_owned();
                }
                vec![
                    Some(dx.into_shape_with_order(g.raw_dim()).unwrap()),
                    Some(ds.into_dyn()),
                ]
            })),
            req,
        )
    }

    /// Collapses the depth axis of x: [N, C, D, H, W] with weights w: [D]
    /// (softmax-style weighted sum) -> [N, C, H, W].
    pub fn collapse_depth(&mut self, x: T, w: T) -> T {
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let s = xd.shape();
        let (n, c, d, h, wdim) = (s[0], s[1], s[2], s[3], s[4]);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, wdim]));
        for ni in 0..n {
            for ci in 0..c {
                for di in 0..d {
                    let wv = wd[[di]];
                    for hi in 0..h {
                        for wi in 0..wdim {
                            out[[ni, ci, hi, wi]] += wv * xd[[ni, ci, di, hi, wi]];
                        }
                    }
                }
            }
        }
        let req = self.requires_any(&[x, w]);
        let (xi, wiid) = (x.0, w.0);
        self.push(
            out,
            vec![xi, wiid],
            Some(Box::new(move |g, gr| {
                let xd = &gr.nodes[xi].data;
                let wd = &gr.nodes[wiid].data;
                let s = xd.shape();
                let (n, c, d, h, wdim) = (s[0], s[1], s[2], s[3], s[4]);
                let mut dx = ArrayD::<f64>::zeros(xd.raw_dim());
                let mut dw = ArrayD::<f64>::zeros(IxDyn(&[d]));
                for ni in 0..n {
                    for ci in 0..c {
                        for di in 0..d {
                            let wv = wd[[di]];
                            let mut acc = 0.0;
                            for hi in 0..h {
                                for wi in 0..wdim {
                                    let gv = g[[ni, ci, hi, wi]];
                                    dx[[ni, ci, di, hi, wi]] = gv * wv;
                                    acc += gv * xd[[ni, ci, di, hi, wi]];
                                }
                            }
                            dw[[di]] += acc;
                        }
                    }
                }
                vec![Some(dx), Some(dw)]
            })),
            req,
        )
    }
}

fn sigmoid_f(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// View a dyn array as 2-d (panics if ndim != 2).
fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d tensor")
        .to_owned()
}

/// [N, C, D, H, W] -> [C, N*D*H*W]
fn gather_chan3(x: &ArrayD<f64>) -> Array2<f64> {
    let s = x.shape();
    let (n, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = Array2::<f64>::zeros((c, n * d * h * w));
    for ni in 0..n {
        for ci in 0..c {
            for di in 0..d {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[ci, ((ni * d + di) * h + hi) * w + wi]] = x[[ni, ci, di, hi, wi]];
                    }
                }
            }
        }
    }
    out
}

/// Inverse layout of [`gather_chan3`].
fn scatter_chan3(m: &Array2<f64>, shape: &[usize]) -> ArrayD<f64> {
    let (n, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(shape));
    for ni in 0..n {
        for ci in 0..c {
            for di in 0..d {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[ni, ci, di, hi, wi]] = m[[ci, ((ni * d + di) * h + hi) * w + wi]];
                    }
                }
            }
        }
    }
    out
}
