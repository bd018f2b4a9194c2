use semalign::grad::{check_gradient, Tape, Var, FD_STEP};
use semalign::kernels::KernelSpec;
use semalign::losses::{
    clip_contrastive_node, mkmmd_node, sdd_node, ssl_node, Divergence, MmdEstimator, SddConfig,
    SslDenominator,
};
use semalign::{Matrix, Result, Rng};

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-2.0, 2.0))
}

fn check(name: &str, build: impl Fn(&mut Tape, Var) -> Result<Var>, at: &Matrix) {
    let chk = check_gradient(build, at, FD_STEP).unwrap();
    assert!(
        chk.max_rel_error < 1e-5,
        "{name}: max rel error {:e} (abs {:e})",
        chk.max_rel_error,
        chk.max_abs_error
    );
}

fn sdd_configs() -> Vec<SddConfig> {
    let mut out = Vec::new();
    for rd in [true, false] {
        for div in [Divergence::Kl, Divergence::Mse] {
            out.push(SddConfig {
                use_relative_distance: rd,
                divergence: div,
                ..SddConfig::default()
            });
        }
    }
    out.push(SddConfig {
        bandwidth: 0.6,
        ..SddConfig::default()
    });
    out
}

#[test]
fn sdd_gradients_in_both_arguments() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
        for cfg in sdd_configs() {
            check(
                &format!("sdd wrt u {cfg:?}"),
                |t, x| {
                    let y = t.leaf(v.clone());
                    sdd_node(t, x, y, &cfg)
                },
                &u,
            );
            check(
                &format!("sdd wrt v {cfg:?}"),
                |t, y| {
                    let x = t.leaf(u.clone());
                    sdd_node(t, x, y, &cfg)
                },
                &v,
            );
        }
    }
}

#[test]
fn mmd_gradients() {
    let specs = [
        KernelSpec::Gaussian { gamma_sq: 3.0 },
        KernelSpec::Polynomial {
            coef0: 1.0,
            degree: 2,
        },
    ];
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
        let logits = random(1, 2, &mut rng);
        for est in [MmdEstimator::Biased, MmdEstimator::Unbiased] {
            check(
                "mmd wrt u",
                |t, x| {
                    let y = t.leaf(v.clone());
                    let l = t.leaf(logits.clone());
                    let beta = t.row_softmax(l);
                    mkmmd_node(t, &specs, beta, x, y, est)
                },
                &u,
            );
            check(
                "mmd wrt beta logits",
                |t, l| {
                    let x = t.leaf(u.clone());
                    let y = t.leaf(v.clone());
                    let beta = t.row_softmax(l);
                    mkmmd_node(t, &specs, beta, x, y, est)
                },
                &logits,
            );
        }
    }
}

#[test]
fn contrastive_gradients() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed);
        let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
        let tau = Matrix::scalar(0.5);
        check(
            "clip wrt u",
            |t, x| {
                let y = t.leaf(v.clone());
                let tau = t.leaf(tau.clone());
                clip_contrastive_node(t, x, y, tau)
            },
            &u,
        );
        check(
            "clip wrt tau",
            |t, tau| {
                let x = t.leaf(u.clone());
                let y = t.leaf(v.clone());
                clip_contrastive_node(t, x, y, tau)
            },
            &tau,
        );
        for denom in [SslDenominator::Literal, SslDenominator::SimClr] {
            check(
                "ssl wrt z",
                |t, x| {
                    let y = t.leaf(v.clone());
                    let tau = t.leaf(tau.clone());
                    ssl_node(t, x, y, tau, denom)
                },
                &u,
            );
            check(
                "ssl wrt z_pos",
                |t, y| {
                    let x = t.leaf(u.clone());
                    let tau = t.leaf(tau.clone());
                    ssl_node(t, x, y, tau, denom)
                },
                &v,
            );
        }
    }
}

#[test]
fn detached_spread_changes_the_gradient_but_not_the_value() {
    let mut rng = Rng::new(42);
    let (u, v) = (random(8, 4, &mut rng), random(8, 4, &mut rng));
    let grad = |cfg: SddConfig| {
        let mut t = Tape::new();
        let x = t.leaf(u.clone());
        let y = t.leaf(v.clone());
        let l = sdd_node(&mut t, x, y, &cfg).unwrap();
        (t.scalar(l), t.backward(l).unwrap().wrt(x))
    };
    let (full_v, full_g) = grad(SddConfig::default());
    let (det_v, det_g) = grad(SddConfig {
        detach_sigma: true,
        ..SddConfig::default()
    });
    assert_eq!(full_v, det_v);
    assert!(full_g.sub(&det_g).unwrap().max_abs() > 1e-6);
}
