use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

use crate::{Element, Var};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// How an operand of shape `op` maps onto a contiguous buffer of shape `out`.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Pattern {
    Full,
    /// Element `i` reads `op[i % len]`.
    Repeat(usize),
    /// Element `i` reads `op[i / inner]`.
    Stretch(usize),
}

fn pattern(op: &[usize], out: &[usize]) -> Option<Pattern> {
    let n = out.len();
    if op.len() > n {
        return None;
    }
    let mut p = vec![1; n - op.len()];
    p.extend_from_slice(op);
    if p == out {
        return Some(Pattern::Full);
    }
    let lead = p.iter().position(|&d| d != 1).unwrap_or(n);
    if p[lead..] == out[lead..] {
        return Some(Pattern::Repeat(out[lead..].iter().product()));
    }
    let last = p.iter().rposition(|&d| d != 1)?;
    if p[..=last] == out[..=last] {
        return Some(Pattern::Stretch(out[last + 1..].iter().product()));
    }
    None
}

fn zip_with<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    if let (Some(x), Some(y)) = (a.as_slice(), b.as_slice()) {
        if let (Some(pa), Some(pb)) = (pattern(a.shape(), &shape), pattern(b.shape(), &shape)) {
            let total: usize = shape.iter().product();
            let mut out = Vec::with_capacity(total);
            match (pa, pb) {
                (Pattern::Full, Pattern::Full) => {
                    out.extend(x.iter().zip(y).map(|(&p, &q)| f(p, q)));
                }
                (Pattern::Full, Pattern::Repeat(l)) if l > 0 => {
                    for chunk in x.chunks_exact(l) {
                        out.extend(chunk.iter().zip(y).map(|(&p, &q)| f(p, q)));
                    }
                }
                (Pattern::Repeat(l), Pattern::Full) if l > 0 => {
                    for chunk in y.chunks_exact(l) {
                        out.extend(x.iter().zip(chunk).map(|(&p, &q)| f(p, q)));
                    }
                }
                (Pattern::Full, Pattern::Stretch(s)) if s > 0 => {
                    for (chunk, &q) in x.chunks_exact(s).zip(y) {
                        out.extend(chunk.iter().map(|&p| f(p, q)));
                    }
                }
                (Pattern::Stretch(s), Pattern::Full) if s > 0 => {
                    for (chunk, &p) in y.chunks_exact(s).zip(x) {
                        out.extend(chunk.iter().map(|&q| f(p, q)));
                    }
                }
                _ => {
                    let at = |p: Pattern, i: usize| match p {
                        Pattern::Full => i,
                        Pattern::Repeat(l) => i % l.max(1),
                        Pattern::Stretch(s) => i / s.max(1),
                    };
                    out.extend((0..total).map(|i| f(x[at(pa, i)], y[at(pb, i)])));
                }
            }
            return ArrayD::from_shape_vec(IxDyn(&shape), out).expect("broadcast result");
        }
    }
    let shape = IxDyn(&shape);
    let av = a.broadcast(shape.clone()).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// Sum `arr` over broadcast axes so that it takes `shape`.
pub fn reduce_to_shape<T: Element>(arr: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if arr.shape() == shape {
        return arr.clone();
    }
    assert!(arr.ndim() >= shape.len(), "cannot reduce {:?} to {:?}", arr.shape(), shape);
    if let (Some(x), Some(p)) = (arr.as_slice(), pattern(shape, arr.shape())) {
        let len: usize = shape.iter().product();
        match p {
            Pattern::Repeat(l) if l > 0 => {
                let mut acc = vec![T::zero(); l];
                for chunk in x.chunks_exact(l) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a = *a + v;
                    }
                }
                return ArrayD::from_shape_vec(IxDyn(shape), acc).expect("reduced");
            }
            Pattern::Stretch(s) if s > 0 => {
                let acc: Vec<T> = x.chunks_exact(s).map(|c| c.iter().fold(T::zero(), |a, &v| a + v)).collect();
                debug_assert_eq!(acc.len(), len);
                return ArrayD::from_shape_vec(IxDyn(shape), acc).expect("reduced");
            }
            _ => {}
        }
    }
    let mut out = arr.to_owned();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(out.shape(), shape);
    out
}

fn broadcast_array<T: Element>(arr: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if let (Some(x), Some(p)) = (arr.as_slice(), pattern(arr.shape(), shape)) {
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        match p {
            Pattern::Full => out.extend_from_slice(x),
            Pattern::Repeat(l) => {
                while out.len() < total {
                    out.extend_from_slice(&x[..l]);
                }
            }
            Pattern::Stretch(s) => {
                for &v in x {
                    out.extend(std::iter::repeat(v).take(s));
                }
            }
        }
        if out.len() == total {
            return ArrayD::from_shape_vec(IxDyn(shape), out).expect("broadcast");
        }
    }
    arr.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", arr.shape(), shape))
        .to_owned()
}

fn standard<T: Element>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<T: Element> Var<T> {
    // ---- binary, broadcasting ------------------------------------------------

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = zip_with(self.value(), other.value(), |a, b| a + b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |_, _, g, need| {
            vec![need[0].then(|| g.sum_to(&sa)), need[1].then(|| g.sum_to(&sb))]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = zip_with(self.value(), other.value(), |a, b| a - b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |_, _, g, need| {
            vec![
                need[0].then(|| g.sum_to(&sa)),
                need[1].then(|| g.neg().sum_to(&sb)),
            ]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = zip_with(self.value(), other.value(), |a, b| a * b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |p, _, g, need| {
            vec![
                need[0].then(|| g.mul(&p[1]).sum_to(&sa)),
                need[1].then(|| g.mul(&p[0]).sum_to(&sb)),
            ]
        })
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        let value = zip_with(self.value(), other.value(), |a, b| a / b);
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::from_op(value, vec![self.clone(), other.clone()], move |p, out, g, need| {
            vec![
                need[0].then(|| g.div(&p[1]).sum_to(&sa)),
                need[1].then(|| g.mul(out).div(&p[1]).neg().sum_to(&sb)),
            ]
        })
    }

    // ---- unary ---------------------------------------------------------------

    pub fn neg(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|x| -x), vec![self.clone()], |_, _, g, _| {
            vec![Some(g.neg())]
        })
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        let k = T::of(c);
        Var::from_op(self.value().mapv(|x| x * k), vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.scale(c))]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let k = T::of(c);
        Var::from_op(self.value().mapv(|x| x + k), vec![self.clone()], |_, _, g, _| {
            vec![Some(g.clone())]
        })
    }

    pub fn sin(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::sin), vec![self.clone()], |p, _, g, _| {
            vec![Some(g.mul(&p[0].cos()))]
        })
    }

    pub fn cos(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::cos), vec![self.clone()], |p, _, g, _| {
            vec![Some(g.mul(&p[0].sin()).neg())]
        })
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::exp), vec![self.clone()], |_, out, g, _| {
            vec![Some(g.mul(out))]
        })
    }

    pub fn ln(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::ln), vec![self.clone()], |p, _, g, _| {
            vec![Some(g.div(&p[0]))]
        })
    }

    pub fn sqrt(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::sqrt), vec![self.clone()], |_, out, g, _| {
            vec![Some(g.div(out).scale(0.5))]
        })
    }

    pub fn square(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|x| x * x), vec![self.clone()], |p, _, g, _| {
            vec![Some(g.mul(&p[0]).scale(2.0))]
        })
    }

    /// Logistic function, evaluated without overflow for large `|x|`.
    pub fn sigmoid(&self) -> Var<T> {
        let value = self.value().mapv(sigmoid_scalar);
        Var::from_op(value, vec![self.clone()], |_, out, g, _| {
            let slope = out.mul(&out.neg().add_scalar(1.0));
            vec![Some(g.mul(&slope))]
        })
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&self) -> Var<T> {
        let value = self.value().mapv(softplus_scalar);
        Var::from_op(value, vec![self.clone()], |p, _, g, _| {
            vec![Some(g.mul(&p[0].sigmoid()))]
        })
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::abs), vec![self.clone()], |p, _, g, _| {
            let sign = p[0].value().mapv(|x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            vec![Some(g.mul(&Var::constant(sign)))]
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::of(slope);
        let value = self.value().mapv(|x| if x > T::zero() { x } else { x * s });
        Var::from_op(value, vec![self.clone()], move |p, _, g, _| {
            let mask = p[0]
                .value()
                .mapv(|x| if x > T::zero() { T::one() } else { s });
            vec![Some(g.mul(&Var::constant(mask)))]
        })
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.broadcast_to(&shape))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Var<T> {
        let shape = self.shape().to_vec();
        let mut value = self.value().sum_axis(Axis(axis));
        if keepdim {
            value = value.insert_axis(Axis(axis));
        }
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            let g = if keepdim {
                g.clone()
            } else {
                let mut kept = shape.clone();
                kept[axis] = 1;
                g.reshape(&kept)
            };
            vec![Some(g.broadcast_to(&shape))]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Var<T> {
        let n = self.shape()[axis].max(1) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    /// Sum over broadcast axes down to `shape` (adjoint of `broadcast_to`).
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        let value = reduce_to_shape(self.value(), shape);
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.broadcast_to(&orig))]
        })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        let value = broadcast_array(self.value(), shape);
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.sum_to(&orig))]
        })
    }

    // ---- shape -------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let orig = self.shape().to_vec();
        let value = standard(self.value().clone())
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", orig, shape));
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.reshape(&orig))]
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let value = standard(self.value().clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.permute(&inverse))]
        })
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var<T> {
        self.permute(&[1, 0])
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let total = self.shape()[axis];
        assert!(start + len <= total, "narrow out of range");
        if start == 0 && len == total {
            return self.clone();
        }
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.pad_axis(axis, start, total))]
        })
    }

    /// Embed into zeros of length `total` along `axis`, at offset `start`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var<T> {
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.narrow(axis, start, len))]
        })
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes agree");
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(value, parts.to_vec(), move |_, _, g, need| {
            let mut offset = 0;
            lens.iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let piece = n.then(|| g.narrow(axis, offset, len));
                    offset += len;
                    piece
                })
                .collect()
        })
    }

    // ---- linear algebra ------------------------------------------------------------

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        matmul_t(self, other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        matmul_t(self, other, ta, tb)
    }

    // ---- composites ------------------------------------------------------------------

    pub fn softmax(&self, axis: usize) -> Var<T> {
        let shifted = self.sub(&Var::constant(max_keep(self.value(), axis)));
        let e = shifted.exp();
        e.div(&e.sum_axis(axis, true))
    }

    pub fn log_softmax(&self, axis: usize) -> Var<T> {
        let shifted = self.sub(&Var::constant(max_keep(self.value(), axis)));
        shifted.sub(&shifted.exp().sum_axis(axis, true).ln())
    }

    /// Running sum along `axis`. `exclusive` drops the current element;
    /// `reverse` accumulates from the far end.
    pub fn cumsum(&self, axis: usize, exclusive: bool, reverse: bool) -> Var<T> {
        let mut value = self.value().clone();
        let n = value.shape()[axis];
        for mut lane in value.lanes_mut(Axis(axis)) {
            let mut acc = T::zero();
            for k in 0..n {
                let i = if reverse { n - 1 - k } else { k };
                let x = lane[i];
                if exclusive {
                    lane[i] = acc;
                    acc = acc + x;
                } else {
                    acc = acc + x;
                    lane[i] = acc;
                }
            }
        }
        Var::from_op(value, vec![self.clone()], move |_, _, g, _| {
            vec![Some(g.cumsum(axis, exclusive, !reverse))]
        })
    }
}

fn max_keep<T: Element>(a: &ArrayD<T>, axis: usize) -> ArrayD<T> {
    a.fold_axis(Axis(axis), T::neg_infinity(), |&m, &x| if x > m { x } else { m })
        .insert_axis(Axis(axis))
}

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Element>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn matmul_t<T: Element>(a: &Var<T>, b: &Var<T>, ta: bool, tb: bool) -> Var<T> {
    let av = a.value().view().into_dimensionality::<Ix2>().expect("matmul lhs is 2-D");
    let bv = b.value().view().into_dimensionality::<Ix2>().expect("matmul rhs is 2-D");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    assert_eq!(
        av.ncols(),
        bv.nrows(),
        "matmul inner dims: {:?} x {:?}",
        av.shape(),
        bv.shape()
    );
    let value = av.dot(&bv).into_dyn();
    Var::from_op(value, vec![a.clone(), b.clone()], move |p, _, g, need| {
        let (a, b) = (&p[0], &p[1]);
        let ga = need[0].then(|| match (ta, tb) {
            (false, false) => g.matmul_t(b, false, true),
            (false, true) => g.matmul_t(b, false, false),
            (true, false) => b.matmul_t(g, false, true),
            (true, true) => b.matmul_t(g, true, true),
        });
        let gb = need[1].then(|| match (ta, tb) {
            (false, false) => a.matmul_t(g, true, false),
            (true, false) => a.matmul_t(g, false, false),
            (false, true) => g.matmul_t(a, true, false),
            (true, true) => g.matmul_t(a, true, true),
        });
        vec![ga, gb]
    })
}
