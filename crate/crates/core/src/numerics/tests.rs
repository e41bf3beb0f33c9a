use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn square_gradient() {
    let g = Graph::new();
    let x = g.input(vec![], vec![3.0]);
    let grads = g.backward(x * x).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
}

#[test]
fn product_gradient() {
    let g = Graph::new();
    let x = g.input(vec![], vec![2.0]);
    let y = g.input(vec![], vec![5.0]);
    let grads = g.backward(x * y).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[5.0]);
    assert_eq!(grads.wrt(y).unwrap(), &[2.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let g = Graph::new();
    let x = g.input(vec![2], vec![1.0, 2.0]);
    let y = x.tanh();
    assert!(matches!(g.backward(y), Err(NumericsError::NonScalarLoss { .. })));
}

#[test]
fn graph_is_single_use() {
    let g = Graph::new();
    let x = g.input(vec![], vec![1.5]);
    let y = x.exp();
    assert!(g.backward(y).is_ok());
    assert_eq!(g.backward(y).err(), Some(NumericsError::GraphConsumed));
}

#[test]
fn disconnected_tensor_has_no_gradient() {
    let a = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
    let g = Graph::new();
    let va = g.param(&a);
    let _vb = g.param(&b);
    let grads = g.backward(va.square().sum()).unwrap();
    assert_eq!(grads.of(&a).unwrap(), &[2.0, 4.0]);
    assert!(grads.of(&b).is_none());
}

#[test]
fn non_finite_values_surface_as_errors() {
    let g = Graph::new();
    let x = g.input(vec![], vec![-1.0]);
    let y = x.ln();
    assert!(matches!(g.backward(y), Err(NumericsError::NonFinite { op: "ln" })));
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (din, dh, dout) = (3, 5, 4);
    let x = rand_vec(&mut rng, din, -1.0, 1.0);
    let sizes = [dh * din, dh, dout * dh, dout];
    let total: usize = sizes.iter().sum();
    let p0 = rand_vec(&mut rng, total, -0.8, 0.8);
    let f = gradcheck::func(move |p| {
        let g = p.graph();
        let mut off = 0;
        let mut take = |n: usize, shape: &[usize]| {
            let idx: Vec<usize> = (off..off + n).collect();
            off += n;
            p.gather(&idx, shape)
        };
        let w1 = take(sizes[0], &[dh, din]);
        let b1 = take(sizes[1], &[dh]);
        let w2 = take(sizes[2], &[dout, dh]);
        let b2 = take(sizes[3], &[dout]);
        let xin = g.constant(vec![din], x.clone());
        xin.linear(w1, b1).tanh().linear(w2, b2).softmax_cross_entropy(&[2])
    });
    let report = gradcheck::check(f, &[total], &p0, 1e-5);
    assert!(report.relative_error() < 1e-6, "rel err {}", report.relative_error());
}

/// Independent truncated-series oracle: 30 Taylor terms, no scaling.
fn taylor30(a: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    let mut term = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for k in 0..30 {
        for i in 0..9 {
            out[i] += term[i];
        }
        let mut next = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                next[r * 3 + c] = (0..3).map(|j| term[r * 3 + j] * a[j * 3 + c]).sum::<f64>() / (k + 1) as f64;
            }
        }
        term = next;
    }
    out
}

fn matexp_values(a: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    matexp(g.constant(vec![3, 3], a.to_vec())).to_vec()
}

#[test]
fn matexp_of_zero_is_identity() {
    assert_eq!(matexp_values(&[0.0; 9]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn matexp_quarter_rotation() {
    let r = std::f64::consts::FRAC_PI_2;
    let e = matexp_values(&[0.0, r, 0.0, -r, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let want = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    for (a, b) in e.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{e:?}");
    }
}

#[test]
fn matexp_matches_series_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let a: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let got = matexp_values(&a);
        let want = taylor30(&a);
        let err = got.iter().zip(want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "max abs err {err}");
    }
}

#[test]
#[should_panic(expected = "3x3")]
fn matexp_rejects_other_shapes() {
    let g = Graph::new();
    matexp(g.constant(vec![2, 2], vec![0.0; 4]));
}

#[test]
fn squaring_count_follows_one_norm() {
    assert_eq!(squaring_count(&[0.5, 0.0, 0.0, 0.0], 2), 0);
    assert_eq!(squaring_count(&[3.0, 0.0, 1.0, 0.0], 2), 2);
    assert_eq!(squaring_count(&[2.0, 0.0, 0.0, 0.0], 2), 1);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matexp_group_inverse(a in proptest::array::uniform9(-1.0f64..1.0), r in 0.0f64..2.0) {
            // Rescale to ‖A‖₁ = r ≤ 2.
            let norm = (0..3).map(|j| (0..3).map(|i| a[i * 3 + j].abs()).sum::<f64>()).fold(0.0, f64::max);
            prop_assume!(norm > 1e-9);
            let a: Vec<f64> = a.iter().map(|v| v * r / norm).collect();
            let neg: Vec<f64> = a.iter().map(|v| -v).collect();
            let (p, q) = (matexp_values(&a), matexp_values(&neg));
            for i in 0..3 {
                for j in 0..3 {
                    let v: f64 = (0..3).map(|k| p[i * 3 + k] * q[k * 3 + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((v - want).abs() < 1e-9);
                }
            }
        }
    }
}

fn sample_values(img: &[f64], shape: [usize; 3], coords: &[f64]) -> Vec<f64> {
    let g = Graph::new();
    let im = g.constant(shape.to_vec(), img.to_vec());
    let c = g.constant(vec![coords.len() / 2, 2], coords.to_vec());
    im.bilinear_sample(c).to_vec()
}

fn center_grid(h: usize, w: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for col in 0..w {
            c.push(-1.0 + 2.0 * col as f64 / (w - 1) as f64);
            c.push(-1.0 + 2.0 * r as f64 / (h - 1) as f64);
        }
    }
    c
}

#[test]
fn bilinear_identity_grid_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(h, w, c) in &[(5, 7, 2), (16, 16, 1), (13, 9, 3)] {
        let img = rand_vec(&mut rng, h * w * c, 0.0, 1.0);
        assert_eq!(sample_values(&img, [h, w, c], &center_grid(h, w)), img);
    }
}

#[test]
fn bilinear_midpoint_is_mean_of_four() {
    let img = vec![1.0, 2.0, 3.0, 4.0];
    assert_eq!(sample_values(&img, [2, 2, 1], &[0.0, 0.0]), vec![2.5]);
}

#[test]
fn bilinear_out_of_range_reads_zero() {
    let img = vec![1.0; 9];
    assert_eq!(sample_values(&img, [3, 3, 1], &[3.5, 0.0, 0.0, -4.0]), vec![0.0, 0.0]);
    // Half a pixel past the last column: half weight on the zero padding.
    assert_eq!(sample_values(&img, [3, 3, 1], &[1.5, 0.0]), vec![0.5]);
}

#[test]
fn bilinear_coordinate_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, c) = (6, 7, 2);
    let img = rand_vec(&mut rng, h * w * c, 0.0, 1.0);
    let weights = rand_vec(&mut rng, c, 0.5, 1.5);
    let mut checked = 0;
    while checked < 100 {
        let xy = [rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95)];
        // Stay away from the grid lines where bilinear interpolation has kinks.
        let near_kink = |u: f64, n: usize| {
            let p = (u + 1.0) * 0.5 * (n - 1) as f64;
            (p - p.round()).abs() < 1e-3
        };
        if near_kink(xy[0], w) || near_kink(xy[1], h) {
            continue;
        }
        let (im, wt) = (img.clone(), weights.clone());
        let f = gradcheck::func(move |p| {
            let g = p.graph();
            let imv = g.constant(vec![h, w, c], im.clone());
            let wv = g.constant(vec![1, c], wt.clone());
            (imv.bilinear_sample(p) * wv).sum()
        });
        let report = gradcheck::check(f, &[1, 2], &xy, 1e-5);
        assert!(report.relative_error() < 1e-4, "at {xy:?}: {report:?}");
        checked += 1;
    }
}

#[test]
fn logsumexp_and_cross_entropy_closed_forms() {
    let g = Graph::new();
    let x = g.constant(vec![2], vec![0.0, 0.0]);
    assert!((x.logsumexp(0).item() - 2f64.ln()).abs() < 1e-15);
    let big = g.constant(vec![2], vec![1000.0, 1000.0]);
    assert!((big.logsumexp(0).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    let logits = g.constant(vec![10], vec![0.3; 10]);
    for label in 0..10 {
        assert!((logits.softmax_cross_entropy(&[label]).item() - 10f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn conv2d_matches_dense_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = rand_vec(&mut rng, 25, 0.0, 1.0);
    let kernel = vec![1.0 / 9.0; 9];
    for pad in [0usize, 1] {
        let g = Graph::new();
        let out = g.constant(vec![5, 5, 1], img.clone()).conv2d(g.constant(vec![3, 3, 1, 1], kernel.clone()), 1, pad);
        let n = 5 + 2 * pad - 2;
        let mut want = vec![0.0; n * n];
        for oy in 0..n {
            for ox in 0..n {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky - pad as isize, ox as isize + kx - pad as isize);
                        if (0..5).contains(&iy) && (0..5).contains(&ix) {
                            acc += img[(iy * 5 + ix) as usize] * kernel[(ky * 3 + kx) as usize];
                        }
                    }
                }
                want[oy * n + ox] = acc;
            }
        }
        assert_eq!(out.shape(), vec![n, n, 1]);
        assert_eq!(out.to_vec(), want);
    }
}

/// Randomized finite-difference sweep over every differentiable primitive.
#[test]
fn every_primitive_passes_gradient_checks() {
    let report = gradcheck::primitive_sweep(21, 10);
    assert!(report.len() >= 25);
    for (name, err) in report {
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}
