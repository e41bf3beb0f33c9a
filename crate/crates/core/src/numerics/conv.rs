//! Convolution and pooling on channel-last images `[H, W, C]`.

use std::rc::Rc;

use super::graph::Var;
use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Input row/column for output position and kernel tap, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    /// 2-D cross-correlation of `[H, W, Cin]` with a kernel `[kh, kw, Cin, Cout]`
    /// using zero padding. Output is `[Ho, Wo, Cout]`.
    pub fn conv2d(self, kernel: Var<'g, S>, stride: usize, pad: usize) -> Var<'g, S> {
        self.same_graph(&kernel);
        let (sx, sk) = (self.shape(), kernel.shape());
        assert!(
            sx.len() == 3 && sk.len() == 4 && sx[2] == sk[2] && stride > 0,
            "conv2d: image {sx:?} incompatible with kernel {sk:?} (stride {stride})"
        );
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel {sk:?} larger than padded image {sx:?}");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { h, w, cin, kh, kw, cout, stride, pad, ho, wo };
        let (x, k) = (self.value(), kernel.value());
        let y = conv_forward(&geom, &x, &k);
        let (ix, ik) = (self.id, kernel.id);
        self.graph.push_op("conv2d", vec![ho, wo, cout], y, &[ix, ik], move |g, sink| {
            if sink.wants(ix) {
                conv_backward_input(&geom, g, &k, sink.buf(ix));
            }
            if sink.wants(ik) {
                conv_backward_kernel(&geom, g, &x, sink.buf(ik));
            }
        })
    }

    /// Non-overlapping `size × size` max pooling; trailing rows/columns that
    /// do not fill a window are dropped.
    pub fn max_pool2d(self, size: usize) -> Var<'g, S> {
        let s = self.shape();
        assert!(s.len() == 3 && size > 0 && s[0] >= size && s[1] >= size, "max_pool2d: bad input {s:?}");
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / size, w / size);
        let x = self.value();
        let mut y = Vec::with_capacity(ho * wo * c);
        let mut arg = Vec::with_capacity(ho * wo * c);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = (S::neg_infinity(), 0usize);
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = ((oy * size + dy) * w + ox * size + dx) * c + ch;
                            if x[i] > best.0 {
                                best = (x[i], i);
                            }
                        }
                    }
                    y.push(best.0);
                    arg.push(best.1);
                }
            }
        }
        Self::routed(self, "max_pool2d", vec![ho, wo, c], y, arg)
    }

    /// Channel-wise maximum over all spatial positions: `[H, W, C] -> [C]`.
    pub fn global_max_pool(self) -> Var<'g, S> {
        let s = self.shape();
        assert_eq!(s.len(), 3, "global_max_pool: expected [H, W, C], got {s:?}");
        let c = s[2];
        let x = self.value();
        let mut best = vec![(S::neg_infinity(), 0usize); c];
        for (i, &v) in x.iter().enumerate() {
            let b = &mut best[i % c];
            if v > b.0 {
                *b = (v, i);
            }
        }
        let (y, arg): (Vec<S>, Vec<usize>) = best.into_iter().unzip();
        Self::routed(self, "global_max_pool", vec![c], y, arg)
    }

    fn routed(self, op: &'static str, shape: Vec<usize>, y: Vec<S>, arg: Vec<usize>) -> Var<'g, S> {
        let arg: Rc<[usize]> = arg.into();
        let id = self.id;
        self.graph.push_op(op, shape, y, &[id], move |g, sink| {
            let buf = sink.buf(id);
            for (o, &i) in arg.iter().enumerate() {
                buf[i] += g[o];
            }
        })
    }
}

fn conv_forward<S: Scalar>(c: &ConvGeom, x: &[S], k: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); c.ho * c.wo * c.cout];
    for oy in 0..c.ho {
        for ox in 0..c.wo {
            let out = &mut y[(oy * c.wo + ox) * c.cout..(oy * c.wo + ox + 1) * c.cout];
            for ky in 0..c.kh {
                let Some(iy) = c.src(oy, ky, c.h) else { continue };
                for kx in 0..c.kw {
                    let Some(ix) = c.src(ox, kx, c.w) else { continue };
                    let xin = &x[(iy * c.w + ix) * c.cin..(iy * c.w + ix + 1) * c.cin];
                    let kbase = (ky * c.kw + kx) * c.cin * c.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &k[kbase + ci * c.cout..kbase + (ci + 1) * c.cout];
                        for (o, &kv) in out.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward_input<S: Scalar>(c: &ConvGeom, g: &[S], k: &[S], dx: &mut [S]) {
    for oy in 0..c.ho {
        for ox in 0..c.wo {
            let gout = &g[(oy * c.wo + ox) * c.cout..(oy * c.wo + ox + 1) * c.cout];
            for ky in 0..c.kh {
                let Some(iy) = c.src(oy, ky, c.h) else { continue };
                for kx in 0..c.kw {
                    let Some(ix) = c.src(ox, kx, c.w) else { continue };
                    let kbase = (ky * c.kw + kx) * c.cin * c.cout;
                    let dxin = &mut dx[(iy * c.w + ix) * c.cin..(iy * c.w + ix + 1) * c.cin];
                    for (ci, d) in dxin.iter_mut().enumerate() {
                        let krow = &k[kbase + ci * c.cout..kbase + (ci + 1) * c.cout];
                        *d += gout.iter().zip(krow).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel<S: Scalar>(c: &ConvGeom, g: &[S], x: &[S], dk: &mut [S]) {
    for oy in 0..c.ho {
        for ox in 0..c.wo {
            let gout = &g[(oy * c.wo + ox) * c.cout..(oy * c.wo + ox + 1) * c.cout];
            for ky in 0..c.kh {
                let Some(iy) = c.src(oy, ky, c.h) else { continue };
                for kx in 0..c.kw {
                    let Some(ix) = c.src(ox, kx, c.w) else { continue };
                    let xin = &x[(iy * c.w + ix) * c.cin..(iy * c.w + ix + 1) * c.cin];
                    let kbase = (ky * c.kw + kx) * c.cin * c.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let drow = &mut dk[kbase + ci * c.cout..kbase + (ci + 1) * c.cout];
                        for (d, &gv) in drow.iter_mut().zip(gout) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
}
