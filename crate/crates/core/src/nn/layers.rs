//! Parameterized layers: plain f64 arrays plus graph-handle wrappers.
//!
//! Each layer owns its parameters as `ndarray` arrays. `bind` registers the
//! parameters as graph leaves (in a deterministic order, appended to `ids`)
//! and returns a lightweight handle whose `fwd` builds the op.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, T};

/// He-style normal initialization, deterministic per rng state.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        Conv2d {
            w: init_normal(rng, &[cout, cin, k, k], (2.0 / fan_in).sqrt()),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride: [stride, stride],
            pad: [pad, pad],
        }
    }

    pub fn zeroed(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: ArrayD::zeros(IxDyn(&[cout, cin, k, k])),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride: [stride, stride],
            pad: [pad, pad],
        }
    }

    pub fn bind(&self, g: &mut Graph, ids: &mut Vec<T>) -> Conv2dT {
        let w = g.leaf(self.w.clone());
        let b = g.leaf(self.b.clone());
        ids.push(w);
        ids.push(b);
        Conv2dT {
            w,
            b,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct Conv2dT {
    pub w: T,
    pub b: T,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl Conv2dT {
    pub fn fwd(&self, g: &mut Graph, x: T) -> T {
        g.conv2d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = (cin * k[0] * k[1] * k[2]) as f64;
        Conv3d {
            w: init_normal(rng, &[cout, cin, k[0], k[1], k[2]], (2.0 / fan_in).sqrt()),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph, ids: &mut Vec<T>) -> Conv3dT {
        let w = g.leaf(self.w.clone());
        let b = g.leaf(self.b.clone());
        ids.push(w);
        ids.push(b);
        Conv3dT {
            w,
            b,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct Conv3dT {
    pub w: T,
    pub b: T,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dT {
    pub fn fwd(&self, g: &mut Graph, x: T) -> T {
        g.conv3d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

/// Transposed 3D convolution, weight layout [Ci, Co, kd, kh, kw].
#[derive(Debug, Clone)]
pub struct ConvT3d {
    pub w: ArrayD<f64>,
    pub b: ArrayD<f64>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvT3d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = (cin * k[0] * k[1] * k[2]) as f64;
        ConvT3d {
            w: init_normal(rng, &[cin, cout, k[0], k[1], k[2]], (2.0 / fan_in).sqrt()),
            b: ArrayD::zeros(IxDyn(&[cout])),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph, ids: &mut Vec<T>) -> ConvT3dT {
        let w = g.leaf(self.w.clone());
        let b = g.leaf(self.b.clone());
        ids.push(w);
        ids.push(b);
        ConvT3dT {
            w,
            b,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct ConvT3dT {
    pub w: T,
    pub b: T,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvT3dT {
    pub fn fwd(&self, g: &mut Graph, x: T) -> T {
        g.conv_transpose3d(x, self.w, Some(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ArrayD<f64>, // [F, O]
    pub b: ArrayD<f64>, // [O]
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, fin: usize, fout: usize) -> Self {
        Linear {
            w: init_normal(rng, &[fin, fout], (1.0 / fin as f64).sqrt()),
            b: ArrayD::zeros(IxDyn(&[fout])),
        }
    }

    pub fn zeroed(fin: usize, fout: usize) -> Self {
        Linear {
            w: ArrayD::zeros(IxDyn(&[fin, fout])),
            b: ArrayD::zeros(IxDyn(&[fout])),
        }
    }

    pub fn bind(&self, g: &mut Graph, ids: &mut Vec<T>) -> LinearT {
        let w = g.leaf(self.w.clone());
        let b = g.leaf(self.b.clone());
        ids.push(w);
        ids.push(b);
        LinearT { w, b }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut ArrayD<f64>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[derive(Clone, Copy)]
pub struct LinearT {
    pub w: T,
    pub b: T,
}

impl LinearT {
    /// x: [N, F] -> [N, O]
    pub fn fwd(&self, g: &mut Graph, x: T) -> T {
        let y = g.matmul(x, self.w);
        g.add_bias_row(y, self.b)
    }
}
