//! Finite-difference checks of every hand-written gradient.

use sparse_dgm::experiment::{gradcheck_case, GradCase};
use sparse_dgm::nd::rng::normal_matrix;
use sparse_dgm::nd::{stream, Activation, Mlp, Stream};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn check_mlp(dims: &[usize], seed: u64, max_coords: usize) {
    let mut rng = stream(seed, Stream::Init);
    let mut net = Mlp::init(dims, Activation::Relu, &mut rng).unwrap();
    let input = normal_matrix(&mut rng, 1, dims[0]).row(0).to_vec();
    let upstream = normal_matrix(&mut rng, 1, *dims.last().unwrap()).row(0).to_vec();
    let f = |net: &Mlp, x: &[f64]| -> f64 {
        net.forward(x)
            .unwrap()
            .iter()
            .zip(&upstream)
            .map(|(a, b)| a * b)
            .sum()
    };
    let (grads, dx) = net.backward(&input, &upstream).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let total: usize = analytic.iter().map(|v| v.len()).sum();
    let stride = (total / max_coords).max(1);
    let mut flat = 0usize;
    let mut worst = 0.0_f64;
    for (t, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            flat += 1;
            if flat % stride != 0 {
                continue;
            }
            let orig = net.param_slices_mut()[t][i];
            net.param_slices_mut()[t][i] = orig + H;
            let up = f(&net, &input);
            net.param_slices_mut()[t][i] = orig - H;
            let down = f(&net, &input);
            net.param_slices_mut()[t][i] = orig;
            let fd = (up - down) / (2.0 * H);
            worst = worst.max(rel_err(g[i], fd));
        }
    }
    for i in 0..input.len() {
        let mut p = input.clone();
        let mut m = input.clone();
        p[i] += H;
        m[i] -= H;
        let fd = (f(&net, &p) - f(&net, &m)) / (2.0 * H);
        worst = worst.max(rel_err(dx[i], fd));
    }
    assert!(worst < REL_TOL, "dims {dims:?}: worst relative error {worst:e}");
}

#[test]
fn mlp_gradients_small() {
    for seed in 0..5 {
        check_mlp(&[3, 6, 6, 2], seed, usize::MAX);
    }
}

#[test]
fn mlp_gradients_experiment_shapes() {
    // (input, hidden width, output) for every experiment configuration,
    // decoder and encoder directions, with 3 hidden layers.
    let shapes = [(5, 50, 7), (7, 50, 5), (30, 300, 300), (300, 300, 30), (20, 100, 500), (500, 100, 20),
                  (20, 50, 500), (15, 100, 558), (558, 100, 15)];
    for (seed, (i, h, o)) in shapes.into_iter().enumerate() {
        check_mlp(&[i, h, h, h, o], seed as u64, 400);
    }
}

#[test]
fn elbo_gradients_sparse_gaussian() {
    for seed in 0..5 {
        let e = gradcheck_case(GradCase::Sparse, seed).unwrap();
        assert!(e.passed, "{e:?}");
    }
}

#[test]
fn elbo_gradients_other_modes() {
    for seed in 0..3 {
        for case in [GradCase::Vae, GradCase::BetaVae, GradCase::Multinomial, GradCase::CorrelatedPrior] {
            let e = gradcheck_case(case, seed).unwrap();
            assert!(e.passed, "{e:?}");
        }
    }
}
