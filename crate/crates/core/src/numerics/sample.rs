//! Differentiable bilinear image sampling.
//!
//! Coordinates are normalized and corner-aligned: `x = -1` is the centre of
//! the first column and `x = +1` the centre of the last; likewise `y` for
//! rows. Samples outside the image read zero.

use std::rc::Rc;

use super::graph::Var;
use super::Scalar;

/// Distance (in pixels) below which a coordinate is treated as an exact
/// pixel centre, so identity grids reproduce the image bit-for-bit.
const SNAP: f64 = 1e-9;

#[derive(Clone, Copy)]
struct Tap<S> {
    r0: isize,
    c0: isize,
    fy: S,
    fx: S,
}

fn pixel_coord<S: Scalar>(u: S, extent: usize) -> (isize, S) {
    let scale = S::from_usize(extent - 1).expect("extent") * S::lit(0.5);
    let mut p = (u + S::one()) * scale;
    let r = p.round();
    if (p - r).abs() < S::lit(SNAP) {
        p = r;
    }
    let base = p.floor();
    (base.to_isize().unwrap_or(isize::MIN / 2), p - base)
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Samples an `[H, W, C]` image at `[N, 2]` normalized `(x, y)` points,
    /// returning `[N, C]`. Differentiable in both the image and the points.
    pub fn bilinear_sample(self, coords: Var<'g, S>) -> Var<'g, S> {
        self.same_graph(&coords);
        let (si, sc) = (self.shape(), coords.shape());
        assert!(
            si.len() == 3 && si.iter().all(|&d| d > 0) && sc.len() == 2 && sc[1] == 2,
            "bilinear_sample: image {si:?} / coords {sc:?}"
        );
        let (h, w, c) = (si[0], si[1], si[2]);
        let n = sc[0];
        let (img, xy) = (self.value(), coords.value());
        let read = move |img: &[S], r: isize, col: isize, ch: usize| -> S {
            if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                S::zero()
            } else {
                img[(r as usize * w + col as usize) * c + ch]
            }
        };
        let mut taps = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n * c);
        for p in 0..n {
            let (c0, fx) = pixel_coord(xy[2 * p], w);
            let (r0, fy) = pixel_coord(xy[2 * p + 1], h);
            taps.push(Tap { r0, c0, fy, fx });
            for ch in 0..c {
                let v00 = read(&img, r0, c0, ch);
                let v01 = read(&img, r0, c0 + 1, ch);
                let v10 = read(&img, r0 + 1, c0, ch);
                let v11 = read(&img, r0 + 1, c0 + 1, ch);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                y.push(top + (bot - top) * fy);
            }
        }
        let taps: Rc<[Tap<S>]> = taps.into();
        let (ii, ic) = (self.id, coords.id);
        let half_w = S::from_usize(w - 1).expect("w") * S::lit(0.5);
        let half_h = S::from_usize(h - 1).expect("h") * S::lit(0.5);
        self.graph.push_op("bilinear_sample", vec![n, c], y, &[ii, ic], move |g, sink| {
            if sink.wants(ii) {
                let buf = sink.buf(ii);
                let mut put = |r: isize, col: isize, ch: usize, v: S| {
                    if r >= 0 && col >= 0 && r < h as isize && col < w as isize {
                        buf[(r as usize * w + col as usize) * c + ch] += v;
                    }
                };
                for (p, t) in taps.iter().enumerate() {
                    let (fx, fy) = (t.fx, t.fy);
                    for ch in 0..c {
                        let gv = g[p * c + ch];
                        put(t.r0, t.c0, ch, gv * (S::one() - fy) * (S::one() - fx));
                        put(t.r0, t.c0 + 1, ch, gv * (S::one() - fy) * fx);
                        put(t.r0 + 1, t.c0, ch, gv * fy * (S::one() - fx));
                        put(t.r0 + 1, t.c0 + 1, ch, gv * fy * fx);
                    }
                }
            }
            if sink.wants(ic) {
                let buf = sink.buf(ic);
                for (p, t) in taps.iter().enumerate() {
                    let (fx, fy) = (t.fx, t.fy);
                    let (mut dx, mut dy) = (S::zero(), S::zero());
                    for ch in 0..c {
                        let gv = g[p * c + ch];
                        let v00 = read(&img, t.r0, t.c0, ch);
                        let v01 = read(&img, t.r0, t.c0 + 1, ch);
                        let v10 = read(&img, t.r0 + 1, t.c0, ch);
                        let v11 = read(&img, t.r0 + 1, t.c0 + 1, ch);
                        dx += gv * ((S::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                        dy += gv * ((S::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    buf[2 * p] += dx * half_w;
                    buf[2 * p + 1] += dy * half_h;
                }
            }
        })
    }
}
