//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matexp, Graph, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom == 0.0 {
            diff
        } else {
            diff / denom
        }
    }
}

/// Compares the backward-pass gradient of a scalar function of one input
/// against central differences with step `h`.
pub fn check<F>(f: F, shape: &[usize], x0: &[f64], h: f64) -> GradCheck
where
    F: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    let g = Graph::new();
    let x = g.input(shape.to_vec(), x0.to_vec());
    let y = f(x);
    let grads = g.backward(y).expect("backward");
    let analytic = grads.wrt(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);
    let eval = |v: &[f64]| {
        let g = Graph::new();
        let x = g.constant(shape.to_vec(), v.to_vec());
        f(x).item()
    };
    let mut numeric = Vec::with_capacity(x0.len());
    let mut probe = x0.to_vec();
    for i in 0..x0.len() {
        probe[i] = x0[i] + h;
        let up = eval(&probe);
        probe[i] = x0[i] - h;
        let down = eval(&probe);
        probe[i] = x0[i];
        numeric.push((up - down) / (2.0 * h));
    }
    GradCheck { analytic, numeric }
}

/// Pins a closure to the higher-ranked signature [`check`] expects.
pub fn func<F>(f: F) -> F
where
    F: for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>,
{
    f
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Runs `trials` randomized checks of every differentiable primitive and
/// returns the worst relative error seen for each.
pub fn primitive_sweep(seed: u64, trials: usize) -> Vec<(&'static str, f64)> {
    type Case = (&'static str, Vec<usize>, f64, f64, Box<dyn for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>>);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mat = rand_vec(&mut rng, 12, -1.0, 1.0);
    let kern = rand_vec(&mut rng, 3 * 3 * 2 * 3, -1.0, 1.0);
    let img = rand_vec(&mut rng, 5 * 4 * 2, -1.0, 1.0);
    let wmat = rand_vec(&mut rng, 3 * 4, -1.0, 1.0);
    let bias = rand_vec(&mut rng, 3, -1.0, 1.0);
    let probe = rand_vec(&mut rng, 64, -1.0, 1.0);
    let weigh = func(move |v| {
        let n = v.numel();
        let w = v.graph().constant(v.shape(), probe.iter().cycle().take(n).copied().collect());
        (v * w).sum()
    });
    let w1 = weigh.clone();
    let cases: Vec<Case> = vec![
        ("exp", vec![6], -1.0, 1.0, Box::new({ let w = weigh.clone(); move |x| w(x.exp()) })),
        ("ln", vec![6], 0.2, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.ln()) })),
        ("tanh", vec![6], -2.0, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.tanh()) })),
        ("atanh", vec![6], -0.9, 0.9, Box::new({ let w = weigh.clone(); move |x| w(x.atanh()) })),
        ("relu", vec![6], 0.1, 1.0, Box::new({ let w = weigh.clone(); move |x| w(x.relu()) })),
        ("softplus", vec![6], -3.0, 3.0, Box::new({ let w = weigh.clone(); move |x| w(x.softplus()) })),
        ("sigmoid", vec![6], -3.0, 3.0, Box::new({ let w = weigh.clone(); move |x| w(x.sigmoid()) })),
        ("sqrt", vec![6], 0.2, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.sqrt()) })),
        ("soft_clamp", vec![6], -9.0, 9.0, Box::new({ let w = weigh.clone(); move |x| w(x.soft_clamp(5.0)) })),
        ("mul/div", vec![6], 0.5, 2.0, Box::new({ let w = weigh.clone(); move |x| w((x * x.exp()) / (x + 1.0)) })),
        ("broadcast", vec![3], -1.0, 1.0, Box::new({ let w = weigh.clone(); move |x| { let g = x.graph();
            let m = g.constant(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect());
            w(m * x)
        } })),
        ("matmul", vec![3, 4], -1.0, 1.0, Box::new({ let w = weigh.clone(); let m = mat.clone(); move |x| { let g = x.graph();
            let b = g.constant(vec![4, 3], m.clone());
            w(x.matmul(b)) + w(b.matmul(x).tanh())
        } })),
        ("linear", vec![2, 4], -1.0, 1.0, Box::new({ let w = weigh.clone(); let (a, b) = (wmat.clone(), bias.clone()); move |x| { let g = x.graph();
            w(x.linear(g.constant(vec![3, 4], a.clone()), g.constant(vec![3], b.clone())))
        } })),
        ("linear-weights", vec![3, 4], -1.0, 1.0, Box::new({ let w = weigh.clone(); let b = bias.clone(); move |x| { let g = x.graph();
            let xin = g.constant(vec![2, 4], (0..8).map(|i| (i as f64 * 0.37).sin()).collect());
            w(xin.linear(x, g.constant(vec![3], b.clone())))
        } })),
        ("logsumexp", vec![3, 4], -2.0, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.logsumexp(0)) + w(x.logsumexp(1)) })),
        ("log_softmax", vec![2, 5], -2.0, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.log_softmax()) })),
        ("cross_entropy", vec![3, 4], -2.0, 2.0, Box::new(|x| x.softmax_cross_entropy(&[0, 3, 1]))),
        ("sum_last/mean", vec![3, 4], -2.0, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.sum_last().square()) + x.mean() })),
        ("gather/transpose", vec![3, 4], -2.0, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.transpose().gather(&[0, 5, 5, 11], &[4]).tanh()) })),
        ("concat", vec![4], -2.0, 2.0, Box::new({ let w = weigh.clone(); move |x| w(x.graph().concat(&[x.tanh(), x, x.exp()])) })),
        ("conv2d-input", vec![5, 4, 2], -1.0, 1.0, Box::new({ let w = weigh.clone(); let k = kern.clone(); move |x| { let g = x.graph();
            w(x.conv2d(g.constant(vec![3, 3, 2, 3], k.clone()), 2, 1).tanh())
        } })),
        ("conv2d-kernel", vec![3, 3, 2, 3], -1.0, 1.0, Box::new({ let w = weigh.clone(); let im = img.clone(); move |x| { let g = x.graph();
            w(g.constant(vec![5, 4, 2], im.clone()).conv2d(x, 1, 1).tanh())
        } })),
        ("conv2d-kernel-strided", vec![3, 3, 2, 3], -1.0, 1.0, Box::new({ let w = weigh.clone(); let im = img.clone(); move |x| { let g = x.graph();
            w(g.constant(vec![5, 4, 2], im.clone()).conv2d(x, 2, 1).tanh())
        } })),
        ("max_pool", vec![4, 4, 2], -1.0, 1.0, Box::new({ let w = weigh.clone(); move |x| w(x.max_pool2d(2)) + w(x.global_max_pool()) })),
        ("bilinear-image", vec![5, 4, 2], -1.0, 1.0, Box::new({ let w = weigh.clone(); move |x| { let g = x.graph();
            let c = g.constant(vec![3, 2], vec![0.13, -0.41, 0.77, 0.29, -1.2, 0.5]);
            w(x.bilinear_sample(c))
        } })),
        ("matexp", vec![3, 3], -1.0, 1.0, Box::new(move |x| w1(matexp(x.mul_scalar(1.7))))),
    ];
    let mut worst = Vec::with_capacity(cases.len());
    for (name, shape, lo, hi, f) in &cases {
        let n: usize = shape.iter().product();
        let err = (0..trials)
            .map(|_| {
                let x0 = rand_vec(&mut rng, n, *lo, *hi);
                check(f, shape, &x0, 1e-5).relative_error()
            })
            .fold(0.0, f64::max);
        worst.push((*name, err));
    }
    worst
}
