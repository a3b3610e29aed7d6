//! 2-D convolution (NCHW, cross-correlation) via im2col.
//!
//! The forward op and its two adjoints form a closed set: each one's
//! backward is expressed with the other two, so convolutions support
//! gradients of gradients.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

use crate::{Element, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn out_size(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.padding - k) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn new(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be NCHW");
        assert_eq!(w_shape.len(), 4, "conv weight must be OCHW");
        assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch");
        let (kh, kw) = (w_shape[2], w_shape[3]);
        assert!(x_shape[2] + 2 * spec.padding >= kh && x_shape[3] + 2 * spec.padding >= kw);
        Self {
            n: x_shape[0],
            c: x_shape[1],
            h: x_shape[2],
            w: x_shape[3],
            kh,
            kw,
            oh: spec.out_size(x_shape[2], kh),
            ow: spec.out_size(x_shape[3], kw),
            spec,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Visit every (col-matrix index, input index) pair that is in bounds.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let ncols = self.cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    for n in 0..self.n {
                        let in_base = (n * self.c + c) * self.h * self.w;
                        for oy in 0..self.oh {
                            let y = oy as isize * s - p + i as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.ow {
                                let x = ox as isize * s - p + j as isize;
                                if x < 0 || x >= self.w as isize {
                                    continue;
                                }
                                let col = (n * self.oh + oy) * self.ow + ox;
                                f(
                                    row * ncols + col,
                                    in_base + y as usize * self.w + x as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, x: &ArrayD<T>) -> Array2<T> {
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); self.rows() * self.cols()];
        self.for_each(|dst, s| out[dst] = src[s]);
        Array2::from_shape_vec((self.rows(), self.cols()), out).expect("im2col shape")
    }

    fn col2im<T: Element>(&self, cols: &Array2<T>) -> ArrayD<T> {
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); self.n * self.c * self.h * self.w];
        self.for_each(|s, dst| out[dst] = out[dst] + src[s]);
        ArrayD::from_shape_vec(IxDyn(&[self.n, self.c, self.h, self.w]), out)
            .expect("col2im shape")
    }

    /// [N, O, OH, OW] -> [O, N*OH*OW]
    fn out_to_mat<T: Element>(&self, y: &ArrayD<T>) -> Array2<T> {
        let o = y.shape()[1];
        y.view()
            .permuted_axes(IxDyn(&[1, 0, 2, 3]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, self.cols()))
            .expect("output matrix shape")
    }

    /// [O, N*OH*OW] -> [N, O, OH, OW]
    fn mat_to_out<T: Element>(&self, m: Array2<T>) -> ArrayD<T> {
        let o = m.nrows();
        m.into_shape_with_order(IxDyn(&[o, self.n, self.oh, self.ow]))
            .expect("output shape")
            .permuted_axes(IxDyn(&[1, 0, 2, 3]))
            .as_standard_layout()
            .into_owned()
    }
}

fn weight_mat<T: Element>(w: &ArrayD<T>) -> Array2<T> {
    let o = w.shape()[0];
    let rest = w.len() / o.max(1);
    w.as_standard_layout()
        .into_owned()
        .into_shape_with_order((o, rest))
        .expect("weight matrix")
}

impl<T: Element> Var<T> {
    /// Cross-correlation of `self` (`[N, C, H, W]`) with `weight` (`[O, C, kh, kw]`).
    pub fn conv2d(&self, weight: &Var<T>, spec: Conv2dSpec) -> Var<T> {
        let geo = Geometry::new(self.shape(), weight.shape(), spec);
        let cols = geo.im2col(self.value());
        let y = weight_mat(weight.value()).dot(&cols);
        let value = geo.mat_to_out(y);
        let (xs, ws) = (self.shape().to_vec(), weight.shape().to_vec());
        Var::from_op(value, vec![self.clone(), weight.clone()], move |p, _, g, need| {
            vec![
                need[0].then(|| Var::conv2d_input_grad(g, &p[1], &xs, spec)),
                need[1].then(|| Var::conv2d_weight_grad(&p[0], g, &ws, spec)),
            ]
        })
    }

    /// Adjoint of `conv2d` with respect to its input (a transposed convolution).
    pub fn conv2d_input_grad(
        gy: &Var<T>,
        weight: &Var<T>,
        x_shape: &[usize],
        spec: Conv2dSpec,
    ) -> Var<T> {
        let geo = Geometry::new(x_shape, weight.shape(), spec);
        let gcols = weight_mat(weight.value()).t().dot(&geo.out_to_mat(gy.value()));
        let value = geo.col2im(&gcols);
        let ws = weight.shape().to_vec();
        Var::from_op(value, vec![gy.clone(), weight.clone()], move |p, _, g, need| {
            vec![
                need[0].then(|| g.conv2d(&p[1], spec)),
                need[1].then(|| Var::conv2d_weight_grad(g, &p[0], &ws, spec)),
            ]
        })
    }

    /// Adjoint of `conv2d` with respect to its weight.
    pub fn conv2d_weight_grad(
        x: &Var<T>,
        gy: &Var<T>,
        w_shape: &[usize],
        spec: Conv2dSpec,
    ) -> Var<T> {
        let geo = Geometry::new(x.shape(), w_shape, spec);
        let cols = geo.im2col(x.value());
        let gw = geo.out_to_mat(gy.value()).dot(&cols.t());
        let value = gw
            .into_dimensionality::<Ix2>()
            .expect("2-D")
            .into_shape_with_order(IxDyn(w_shape))
            .expect("weight grad shape");
        let xs = x.shape().to_vec();
        Var::from_op(value, vec![x.clone(), gy.clone()], move |p, _, g, need| {
            vec![
                need[0].then(|| Var::conv2d_input_grad(&p[1], g, &xs, spec)),
                need[1].then(|| p[0].conv2d(g, spec)),
            ]
        })
    }
}
