//! Release gate: one test per acceptance criterion. Every test prints exactly
//! one `[PASS]`/`[FAIL]` line with its measured numbers (visible with
//! `cargo test -p waveguard-core --test acceptance -- --nocapture`).

use std::sync::OnceLock;
use std::time::Instant;
use waveguard_core::dataio::make_dataset;
use waveguard_core::harness::{
    ablation_csv, ablate_discriminator, eval_csv, evaluate, init_train_state, random_baseline,
    run_training, sweep_csv, sweep_epsilon, train_log_csv, train_protector, TrainConfig,
    EPSILON_GRID,
};
use waveguard_core::metrics::{asr, psnr, ssim, EvalReport};
use waveguard_core::rng;
use waveguard_core::surrogate::{train_surrogate, SwapModel};
use waveguard_core::tensor::{
    avg_pool2d, batch_norm2d, concat_channels, conv2d, fully_connected, global_avg_pool,
    haar2_forward, haar2_inverse, upsample_nearest2x, BnStats, Mode, Reduce, Tensor,
};
use waveguard_core::wavelet::{dwt2, idwt2};

type T64 = Tensor<f64>;
type T32 = Tensor<f32>;

fn verdict(ok: bool, line: String) {
    if ok {
        println!("[PASS] {line}");
    } else {
        println!("[FAIL] {line}");
        panic!("{line}");
    }
}

// ---------------------------------------------------------------------------
// criterion 1: wavelet round-trip and energy preservation
// ---------------------------------------------------------------------------

#[test]
fn wavelet_round_trip_and_energy() {
    let started = Instant::now();
    let mut worst_rt = 0.0f64;
    let mut worst_energy = 0.0f64;
    let mut images = 0usize;
    for (si, &size) in [32usize, 64, 128].iter().enumerate() {
        let quota = if si == 0 { 334 } else { 333 };
        let batch = 16;
        let mut done = 0;
        let mut r = rng::stream(7001, "acceptance-wavelet", si as u64);
        while done < quota {
            let n = batch.min(quota - done);
            let x = T64::uniform(&[n, 3, size, size], -1.0, 1.0, &mut r);
            let bands = dwt2(&x).unwrap();
            let y = idwt2(&bands).unwrap();
            let xd = x.to_vec();
            let yd = y.to_vec();
            let rt = xd
                .iter()
                .zip(&yd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let ex: f64 = xd.iter().map(|v| v * v).sum();
            let eb: f64 = [&bands.ll, &bands.hl, &bands.lh, &bands.hh]
                .iter()
                .flat_map(|t| t.to_vec())
                .map(|v| v * v)
                .sum();
            worst_rt = worst_rt.max(rt);
            worst_energy = worst_energy.max((ex - eb).abs() / ex);
            done += n;
            images += n;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst_rt <= 1e-9 && worst_energy <= 1e-9 && secs <= 10.0,
        format!(
            "wavelet: {images} images, round-trip Linf {worst_rt:.2e} (<= 1e-9), \
             energy rel {worst_energy:.2e} (<= 1e-9), {secs:.1}s (<= 10s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: autodiff vs central finite differences
// ---------------------------------------------------------------------------

const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;
const FD_INSTANCES: usize = 20;

/// One input leaf: shape, values, and whether its gradient is checked.
struct Leaf {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: bool,
}

fn leaf(shape: &[usize], data: Vec<f64>, grad: bool) -> Leaf {
    assert_eq!(shape.iter().product::<usize>(), data.len());
    Leaf { shape: shape.to_vec(), data, grad }
}

fn build(leaves: &[Leaf]) -> Vec<T64> {
    leaves
        .iter()
        .map(|l| {
            let t = T64::from_vec(&l.shape, l.data.clone()).unwrap();
            if l.grad {
                t.with_grad()
            } else {
                t
            }
        })
        .collect()
}

/// Worst |analytic − numeric| / max(|analytic|, |numeric|, 1e-3) over every
/// element of every grad-enabled leaf. The 1e-3 floor turns the comparison
/// absolute (<= 1e-6) where the true gradient is too small for a relative
/// reading over central differences.
fn fd_case(leaves: &[Leaf], f: &dyn Fn(&[T64]) -> T64) -> (f64, usize) {
    let tensors = build(leaves);
    let loss = f(&tensors);
    assert_eq!(loss.numel(), 1, "fd loss must be scalar");
    loss.backward().unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (i, l) in leaves.iter().enumerate() {
        if !l.grad {
            continue;
        }
        let analytic = tensors[i].grad().expect("grad populated");
        for j in 0..l.data.len() {
            let eval = |delta: f64| -> f64 {
                let mut poked: Vec<Leaf> = leaves
                    .iter()
                    .map(|l| leaf(&l.shape, l.data.clone(), false))
                    .collect();
                poked[i].data[j] += delta;
                f(&build(&poked)).item().unwrap()
            };
            let numeric = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked)
}

fn uniform_vec(r: &mut impl rand_core::RngCore, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    T64::uniform(&[n], lo, hi, r).to_vec()
}

/// Push every element at least `margin` away from zero (kink avoidance).
fn away_from_zero(v: Vec<f64>, margin: f64) -> Vec<f64> {
    v.into_iter()
        .map(|x| if x >= 0.0 { x + margin } else { x - margin })
        .collect()
}

/// Map [-1,1] samples into [-0.45,0.45] or +/-[0.55,1.0]: at least 0.05 from
/// the clamp edges at +/-0.5.
fn away_from_half(v: Vec<f64>) -> Vec<f64> {
    v.into_iter()
        .map(|u| {
            let t = u * 0.9;
            if t > 0.45 {
                t + 0.1
            } else if t < -0.45 {
                t - 0.1
            } else {
                t
            }
        })
        .collect()
}

#[test]
fn gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut ops = 0usize;
    let mut run = |name: &str, case: &mut dyn FnMut(u64) -> (f64, usize)| {
        let mut op_worst = 0.0f64;
        for k in 0..FD_INSTANCES {
            let (w, c) = case(k as u64);
            op_worst = op_worst.max(w);
            checked += c;
        }
        assert!(op_worst <= FD_TOL, "{name}: worst fd error {op_worst:.3e} > {FD_TOL}");
        worst = worst.max(op_worst);
        ops += 1;
    };

    let sh = [2usize, 3, 4, 4];
    let n = sh.iter().product::<usize>();

    run("add", &mut |k| {
        let mut r = rng::stream(8100, "fd", k);
        let w = uniform_vec(&mut r, n, 0.5, 1.5);
        let leaves = vec![
            leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true),
            leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true),
            leaf(&sh, w, false),
        ];
        fd_case(&leaves, &|t| t[0].add(&t[1]).unwrap().mul(&t[2]).unwrap().reduce(Reduce::Mean))
    });

    run("sub", &mut |k| {
        let mut r = rng::stream(8101, "fd", k);
        let w = uniform_vec(&mut r, n, 0.5, 1.5);
        let leaves = vec![
            leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true),
            leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true),
            leaf(&sh, w, false),
        ];
        fd_case(&leaves, &|t| t[0].sub(&t[1]).unwrap().mul(&t[2]).unwrap().reduce(Reduce::Mean))
    });

    run("mul", &mut |k| {
        let mut r = rng::stream(8102, "fd", k);
        let leaves = vec![
            leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true),
            leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true),
        ];
        fd_case(&leaves, &|t| t[0].mul(&t[1]).unwrap().reduce(Reduce::Mean))
    });

    run("affine", &mut |k| {
        let mut r = rng::stream(8103, "fd", k);
        let leaves = vec![leaf(&sh, uniform_vec(&mut r, n, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| t[0].affine(1.7, -0.3).reduce(Reduce::Mean))
    });

    run("relu", &mut |k| {
        let mut r = rng::stream(8104, "fd", k);
        let x = away_from_zero(uniform_vec(&mut r, n, -1.0, 1.0), 0.05);
        let leaves = vec![leaf(&sh, x, true)];
        fd_case(&leaves, &|t| t[0].relu().reduce(Reduce::Mean))
    });

    run("leaky_relu", &mut |k| {
        let mut r = rng::stream(8105, "fd", k);
        let x = away_from_zero(uniform_vec(&mut r, n, -1.0, 1.0), 0.05);
        let leaves = vec![leaf(&sh, x, true)];
        fd_case(&leaves, &|t| t[0].leaky_relu(0.2).reduce(Reduce::Mean))
    });

    run("tanh", &mut |k| {
        let mut r = rng::stream(8106, "fd", k);
        let leaves = vec![leaf(&sh, uniform_vec(&mut r, n, -2.0, 2.0), true)];
        fd_case(&leaves, &|t| t[0].tanh().reduce(Reduce::Mean))
    });

    run("sigmoid", &mut |k| {
        let mut r = rng::stream(8107, "fd", k);
        let leaves = vec![leaf(&sh, uniform_vec(&mut r, n, -2.0, 2.0), true)];
        fd_case(&leaves, &|t| t[0].sigmoid().reduce(Reduce::Mean))
    });

    run("ln", &mut |k| {
        let mut r = rng::stream(8108, "fd", k);
        let leaves = vec![leaf(&sh, uniform_vec(&mut r, n, 0.2, 3.0), true)];
        fd_case(&leaves, &|t| t[0].ln().reduce(Reduce::Mean))
    });

    run("clamp", &mut |k| {
        let mut r = rng::stream(8109, "fd", k);
        let x = away_from_half(uniform_vec(&mut r, n, -1.0, 1.0));
        let leaves = vec![leaf(&sh, x, true)];
        fd_case(&leaves, &|t| t[0].clamp(-0.5, 0.5).reduce(Reduce::Mean))
    });

    run("conv2d", &mut |k| {
        let mut r = rng::stream(8110, "fd", k);
        let (kside, stride, pad) = match k % 4 {
            0 => (3usize, 1usize, 1usize),
            1 => (3, 2, 1),
            2 => (1, 1, 0),
            _ => (3, 1, 0),
        };
        let xq = 2 * 3 * 6 * 6;
        let wq = 4 * 3 * kside * kside;
        let leaves = vec![
            leaf(&[2, 3, 6, 6], uniform_vec(&mut r, xq, -1.0, 1.0), true),
            leaf(&[4, 3, kside, kside], uniform_vec(&mut r, wq, -0.5, 0.5), true),
            leaf(&[4], uniform_vec(&mut r, 4, -0.5, 0.5), true),
        ];
        fd_case(&leaves, &|t| {
            conv2d(&t[0], &t[1], &t[2], stride, pad).unwrap().reduce(Reduce::Mean)
        })
    });

    run("avg_pool2d", &mut |k| {
        let mut r = rng::stream(8111, "fd", k);
        let window = if k % 2 == 0 { 2 } else { 3 };
        let q = 2 * 2 * 6 * 6;
        let leaves = vec![leaf(&[2, 2, 6, 6], uniform_vec(&mut r, q, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| avg_pool2d(&t[0], window).unwrap().reduce(Reduce::Mean))
    });

    run("upsample_nearest2x", &mut |k| {
        let mut r = rng::stream(8112, "fd", k);
        let q = 2 * 2 * 5 * 5;
        let wq = 2 * 2 * 10 * 10;
        let w = uniform_vec(&mut r, wq, 0.5, 1.5);
        let leaves = vec![
            leaf(&[2, 2, 5, 5], uniform_vec(&mut r, q, -1.0, 1.0), true),
            leaf(&[2, 2, 10, 10], w, false),
        ];
        fd_case(&leaves, &|t| {
            upsample_nearest2x(&t[0]).unwrap().mul(&t[1]).unwrap().reduce(Reduce::Mean)
        })
    });

    run("batch_norm2d_train", &mut |k| {
        let mut r = rng::stream(8113, "fd", k);
        let q = 4 * 2 * 4 * 4;
        let leaves = vec![
            leaf(&[4, 2, 4, 4], uniform_vec(&mut r, q, -1.0, 1.0), true),
            leaf(&[2], uniform_vec(&mut r, 2, 0.5, 1.5), true),
            leaf(&[2], uniform_vec(&mut r, 2, -0.5, 0.5), true),
        ];
        let stats = BnStats::<f64>::new(2);
        fd_case(&leaves, &|t| {
            batch_norm2d(&t[0], &t[1], &t[2], &stats, Mode::Train)
                .unwrap()
                .reduce(Reduce::Mean)
        })
    });

    run("batch_norm2d_eval", &mut |k| {
        let mut r = rng::stream(8114, "fd", k);
        let q = 4 * 2 * 4 * 4;
        // seed the running stats with one training pass on separate data
        let stats = BnStats::<f64>::new(2);
        let warm = T64::uniform(&[4, 2, 4, 4], -2.0, 2.0, &mut r);
        let g1 = T64::full(&[2], 1.0);
        let b0 = T64::zeros(&[2]);
        batch_norm2d(&warm, &g1, &b0, &stats, Mode::Train).unwrap();
        let leaves = vec![
            leaf(&[4, 2, 4, 4], uniform_vec(&mut r, q, -1.0, 1.0), true),
            leaf(&[2], uniform_vec(&mut r, 2, 0.5, 1.5), true),
            leaf(&[2], uniform_vec(&mut r, 2, -0.5, 0.5), true),
        ];
        fd_case(&leaves, &|t| {
            batch_norm2d(&t[0], &t[1], &t[2], &stats, Mode::Eval)
                .unwrap()
                .reduce(Reduce::Mean)
        })
    });

    run("concat_channels", &mut |k| {
        let mut r = rng::stream(8115, "fd", k);
        let leaves = vec![
            leaf(&[2, 1, 3, 3], uniform_vec(&mut r, 18, -1.0, 1.0), true),
            leaf(&[2, 2, 3, 3], uniform_vec(&mut r, 36, -1.0, 1.0), true),
            leaf(&[2, 3, 3, 3], uniform_vec(&mut r, 54, -1.0, 1.0), true),
            leaf(&[2, 6, 3, 3], uniform_vec(&mut r, 108, 0.5, 1.5), false),
        ];
        fd_case(&leaves, &|t| {
            concat_channels(&[&t[0], &t[1], &t[2]])
                .unwrap()
                .mul(&t[3])
                .unwrap()
                .reduce(Reduce::Mean)
        })
    });

    run("slice_channels", &mut |k| {
        let mut r = rng::stream(8116, "fd", k);
        let q = 2 * 6 * 3 * 3;
        let leaves = vec![leaf(&[2, 6, 3, 3], uniform_vec(&mut r, q, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| {
            t[0].slice_channels(1, 4).unwrap().reduce(Reduce::Mean)
        })
    });

    run("global_avg_pool", &mut |k| {
        let mut r = rng::stream(8117, "fd", k);
        let q = 2 * 3 * 4 * 4;
        let w = uniform_vec(&mut r, 6, 0.5, 1.5);
        let leaves = vec![
            leaf(&[2, 3, 4, 4], uniform_vec(&mut r, q, -1.0, 1.0), true),
            leaf(&[2, 3], w, false),
        ];
        fd_case(&leaves, &|t| {
            global_avg_pool(&t[0]).unwrap().mul(&t[1]).unwrap().reduce(Reduce::Mean)
        })
    });

    run("fully_connected", &mut |k| {
        let mut r = rng::stream(8118, "fd", k);
        let leaves = vec![
            leaf(&[3, 5], uniform_vec(&mut r, 15, -1.0, 1.0), true),
            leaf(&[5, 4], uniform_vec(&mut r, 20, -0.5, 0.5), true),
            leaf(&[4], uniform_vec(&mut r, 4, -0.5, 0.5), true),
        ];
        fd_case(&leaves, &|t| {
            fully_connected(&t[0], &t[1], &t[2]).unwrap().reduce(Reduce::Mean)
        })
    });

    run("mul_channels", &mut |k| {
        let mut r = rng::stream(8119, "fd", k);
        let q = 2 * 3 * 4 * 4;
        let leaves = vec![
            leaf(&[2, 3, 4, 4], uniform_vec(&mut r, q, -1.0, 1.0), true),
            leaf(&[2, 3], uniform_vec(&mut r, 6, -1.0, 1.0), true),
        ];
        fd_case(&leaves, &|t| t[0].mul_channels(&t[1]).unwrap().reduce(Reduce::Mean))
    });

    run("reduce_mean", &mut |k| {
        let mut r = rng::stream(8120, "fd", k);
        let leaves = vec![leaf(&[3, 4], uniform_vec(&mut r, 12, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| t[0].reduce(Reduce::Mean))
    });

    run("reduce_sum", &mut |k| {
        let mut r = rng::stream(8121, "fd", k);
        let leaves = vec![leaf(&[3, 4], uniform_vec(&mut r, 12, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| t[0].reduce(Reduce::Sum))
    });

    run("reduce_l1", &mut |k| {
        let mut r = rng::stream(8122, "fd", k);
        let x = away_from_zero(uniform_vec(&mut r, 12, -1.0, 1.0), 0.05);
        let leaves = vec![leaf(&[3, 4], x, true)];
        fd_case(&leaves, &|t| t[0].reduce(Reduce::L1Norm))
    });

    run("reduce_l2", &mut |k| {
        let mut r = rng::stream(8123, "fd", k);
        let leaves = vec![leaf(&[3, 4], uniform_vec(&mut r, 12, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| t[0].reduce(Reduce::L2Norm))
    });

    run("haar_forward", &mut |k| {
        let mut r = rng::stream(8124, "fd", k);
        // output carries 4x the channels at half the spatial size
        let leaves = vec![
            leaf(&[1, 2, 4, 4], uniform_vec(&mut r, 32, -1.0, 1.0), true),
            leaf(&[1, 8, 2, 2], uniform_vec(&mut r, 32, 0.5, 1.5), false),
        ];
        fd_case(&leaves, &|t| {
            haar2_forward(&t[0]).unwrap().mul(&t[1]).unwrap().reduce(Reduce::Mean)
        })
    });

    run("haar_inverse", &mut |k| {
        let mut r = rng::stream(8125, "fd", k);
        let leaves = vec![leaf(&[1, 8, 2, 2], uniform_vec(&mut r, 32, -1.0, 1.0), true)];
        fd_case(&leaves, &|t| haar2_inverse(&t[0]).unwrap().reduce(Reduce::Mean))
    });

    run("budget_project", &mut |k| {
        let mut r = rng::stream(8126, "fd", k);
        let q = 1 * 3 * 4 * 4;
        let base = uniform_vec(&mut r, q, -0.5, 0.5);
        // residuals land well inside the band or well outside it, never near
        // the +/-0.1 kink (or the [-1,1] edges, given |base| <= 0.5)
        let res: Vec<f64> = uniform_vec(&mut r, q, -1.0, 1.0)
            .into_iter()
            .map(|u| {
                if u.abs() < 0.5 {
                    u * 0.05
                } else {
                    (0.15 + (u.abs() - 0.5) * 0.2) * u.signum()
                }
            })
            .collect();
        let x: Vec<f64> = base.iter().zip(&res).map(|(b, r)| b + r).collect();
        let leaves = vec![
            leaf(&[1, 3, 4, 4], x, true),
            leaf(&[1, 3, 4, 4], base, false),
        ];
        fd_case(&leaves, &|t| {
            t[0].budget_project(&t[1], 0.1, 0.1).unwrap().reduce(Reduce::Mean)
        })
    });

    run("composite_conv_relu_mean", &mut |k| {
        // resample until no pre-activation value sits near the relu kink
        let mut pick = k;
        loop {
            let mut r = rng::stream(8127, "fd", pick);
            let xq = 1 * 2 * 5 * 5;
            let wq = 3 * 2 * 3 * 3;
            let x = uniform_vec(&mut r, xq, -1.0, 1.0);
            let w = uniform_vec(&mut r, wq, -0.5, 0.5);
            let b = uniform_vec(&mut r, 3, -0.3, 0.3);
            let xt = T64::from_vec(&[1, 2, 5, 5], x.clone()).unwrap();
            let wt = T64::from_vec(&[3, 2, 3, 3], w.clone()).unwrap();
            let bt = T64::from_vec(&[3], b.clone()).unwrap();
            let pre = conv2d(&xt, &wt, &bt, 1, 1).unwrap().to_vec();
            if pre.iter().any(|v| v.abs() < 0.02) {
                pick += 1000;
                continue;
            }
            let leaves = vec![
                leaf(&[1, 2, 5, 5], x, true),
                leaf(&[3, 2, 3, 3], w, true),
                leaf(&[3], b, true),
            ];
            return fd_case(&leaves, &|t| {
                conv2d(&t[0], &t[1], &t[2], 1, 1).unwrap().relu().reduce(Reduce::Mean)
            });
        }
    });

    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst <= FD_TOL && secs <= 60.0,
        format!(
            "autodiff: {ops} ops x {FD_INSTANCES} instances, {checked} partials, \
             worst rel err {worst:.2e} (<= {FD_TOL:.0e}), {secs:.1}s (<= 60s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: metric oracles
// ---------------------------------------------------------------------------

#[test]
fn metric_oracles_hold() {
    // uniform +1/255 offset has a closed-form PSNR of 20*log10(255)
    let mut r = rng::stream(7003, "acceptance-metrics", 0);
    let a: Vec<f64> = T64::uniform(&[3 * 32 * 32], 0.0, 254.0 / 255.0, &mut r).to_vec();
    let b: Vec<f64> = a.iter().map(|v| v + 1.0 / 255.0).collect();
    let measured = psnr(&a, &b).unwrap();
    let expected = 20.0 * 255.0f64.log10();
    let psnr_ok = (measured - expected).abs() <= 0.01;

    let x: Vec<f64> = T64::uniform(&[3 * 32 * 32], 0.0, 1.0, &mut r).to_vec();
    let self_ssim = ssim(&x, &x, 3, 32, 32).unwrap();
    let ssim_ok = self_ssim == 1.0;

    let rate = asr(&[0.06, 0.04], 0.05).unwrap();
    let asr_ok = rate == 0.5;

    verdict(
        psnr_ok && ssim_ok && asr_ok,
        format!(
            "metrics: psnr(+1/255) {measured:.4} dB (expect {expected:.4} +/- 0.01), \
             ssim(x,x) {self_ssim} (expect exactly 1), asr([0.06,0.04] @ 0.05) {rate} (expect 0.5)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: perturbation budget holds at every training stage
// ---------------------------------------------------------------------------

#[test]
fn perturbation_budget_never_violated() {
    let splits = make_dataset(24, 32, 7004).unwrap();
    let surrogate = SwapModel::<f32>::new(7004).unwrap();
    let mut total_calls = 0usize;
    let mut violations = 0usize;
    let mut worst_margin = 0.0f64; // max deviation/epsilon seen, should stay <= 1
    for &epsilon in &[0.01f64, 0.05] {
        let cfg = TrainConfig {
            epsilon,
            epochs: 0, // advanced manually below
            batch: 8,
            seed: 7004,
            ..TrainConfig::default()
        };
        let mut state = init_train_state::<f32>(&TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        state.cfg.epochs = 0;
        let mut r = rng::stream(7004, "acceptance-budget", (epsilon * 1000.0) as u64);
        for stage in 0..10 {
            // move to the next training stage, then audit a burst of calls
            state.cfg.epochs = stage + 1;
            run_training(&mut state, &surrogate, &splits.train).unwrap();
            for call in 0..10 {
                let x_t = if call % 2 == 0 {
                    T32::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut r)
                } else {
                    // saturated inputs exercise the [-1,1] range clamp
                    T32::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut r).affine(1.6, 0.0).clamp(-1.0, 1.0)
                };
                let mode = if call % 3 == 0 { Mode::Train } else { Mode::Eval };
                let x_p = state.model.protect(&x_t, mode).unwrap();
                let (a, b) = (x_t.to_vec(), x_p.to_vec());
                for (t, p) in a.iter().zip(&b) {
                    let dev = (*p as f64 - *t as f64).abs() / 2.0;
                    if dev > epsilon || (*p as f64).abs() > 1.0 {
                        violations += 1;
                    }
                    worst_margin = worst_margin.max(dev / epsilon);
                }
                total_calls += 1;
            }
        }
    }
    verdict(
        violations == 0 && total_calls == 200,
        format!(
            "budget: {total_calls} protect calls across 10 training stages x {{0.01, 0.05}}, \
             {violations} violations (expect 0), max deviation/epsilon {worst_margin:.6}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: end-to-end attack efficacy at defaults
// ---------------------------------------------------------------------------

const EFFICACY_SEEDS: [u64; 3] = [0, 1, 2];

struct EfficacyFixture {
    reports: Vec<EvalReport>,
    baselines: Vec<EvalReport>,
    secs: f64,
}

fn efficacy() -> &'static EfficacyFixture {
    static FIX: OnceLock<EfficacyFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let started = Instant::now();
        let splits = make_dataset(500, 64, 20240).unwrap();
        let (surrogate, _) = train_surrogate::<f32>(&splits.train, 30, 20240).unwrap();
        let mut reports = Vec::new();
        let mut baselines = Vec::new();
        for &seed in &EFFICACY_SEEDS {
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let (model, _) = train_protector::<f32>(&cfg, &surrogate, &splits.train).unwrap();
            reports.push(evaluate(&model, &surrogate, &splits.test).unwrap());
            baselines
                .push(random_baseline(&surrogate, &splits.test, cfg.epsilon, seed + 100).unwrap());
        }
        EfficacyFixture { reports, baselines, secs: started.elapsed().as_secs_f64() }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn trained_protector_attack_efficacy() {
    let fix = efficacy();
    let asr_trained = mean(fix.reports.iter().map(|r| r.asr()));
    let asr_random = mean(fix.baselines.iter().map(|r| r.asr()));
    let psnr_mean = mean(fix.reports.iter().map(|r| r.mean_psnr()));
    let ssim_mean = mean(fix.reports.iter().map(|r| r.mean_ssim()));
    let minutes = fix.secs / 60.0;
    verdict(
        asr_trained >= 0.60 && asr_random <= 0.10 && psnr_mean >= 32.0 && ssim_mean >= 0.90
            && minutes <= 30.0,
        format!(
            "efficacy: 3-seed means over 50 test pairs at 64px/eps 0.05/30 epochs -- \
             ASR {asr_trained:.3} (>= 0.60), random-noise ASR {asr_random:.3} (<= 0.10), \
             PSNR {psnr_mean:.2} dB (>= 32), SSIM {ssim_mean:.4} (>= 0.90), {minutes:.1} min (<= 30)"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: amplitude sweep trend reproduction
// ---------------------------------------------------------------------------

#[test]
fn amplitude_sweep_reproduces_trends() {
    // lighter sweep config: 32px images, 250 faces, 20 epochs per run;
    // 6 amplitudes x 3 seeds = 18 retrainings
    let started = Instant::now();
    let splits = make_dataset(250, 32, 20241).unwrap();
    let (surrogate, _) = train_surrogate::<f32>(&splits.train, 120, 20241).unwrap();
    let base = TrainConfig { epochs: 20, ..TrainConfig::default() };
    let rows = sweep_epsilon(&base, &EPSILON_GRID, &[0, 1, 2], &surrogate, &splits).unwrap();
    let asr_monotone = rows.windows(2).all(|w| w[1].asr >= w[0].asr);
    let psnr_monotone = rows.windows(2).all(|w| w[1].psnr <= w[0].psnr);
    let ssim_monotone = rows.windows(2).all(|w| w[1].ssim <= w[0].ssim);
    let low_end = rows[0].asr <= 0.05;
    let anchor = rows.iter().find(|r| r.epsilon == 0.05).unwrap().asr >= 0.5;
    let hours = started.elapsed().as_secs_f64() / 3600.0;
    let profile: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2}:{:.2}/{:.3}/{:.2}", r.epsilon, r.psnr, r.ssim, r.asr))
        .collect();
    verdict(
        asr_monotone && psnr_monotone && ssim_monotone && low_end && anchor && hours <= 3.0,
        format!(
            "sweep: eps:PSNR/SSIM/ASR = {} -- ASR non-decreasing {asr_monotone}, \
             PSNR non-increasing {psnr_monotone}, SSIM non-increasing {ssim_monotone}, \
             ASR(0.01) {:.3} (<= 0.05), ASR(0.05) {:.3} (>= 0.5), {hours:.2} h (<= 3)",
            profile.join(" "),
            rows[0].asr,
            rows.iter().find(|r| r.epsilon == 0.05).unwrap().asr
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: end-to-end determinism of every CSV
// ---------------------------------------------------------------------------

#[test]
fn end_to_end_runs_are_deterministic() {
    let one_run = || -> (String, String, String, String) {
        let splits = make_dataset(60, 32, 7007).unwrap();
        let (surrogate, _) = train_surrogate::<f32>(&splits.train, 3, 7007).unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 7, ..TrainConfig::default() };
        let (model, log) = train_protector::<f32>(&cfg, &surrogate, &splits.train).unwrap();
        let report = evaluate(&model, &surrogate, &splits.test).unwrap();
        let quick = TrainConfig { epochs: 1, seed: 7, ..TrainConfig::default() };
        let rows = sweep_epsilon(&quick, &[0.01, 0.05], &[7], &surrogate, &splits).unwrap();
        let ab = ablate_discriminator(&quick, &surrogate, &splits).unwrap();
        (train_log_csv(&log), eval_csv(&report), sweep_csv(&rows), ablation_csv(&ab))
    };
    let (a1, b1, c1, d1) = one_run();
    let (a2, b2, c2, d2) = one_run();
    let ok = a1 == a2 && b1 == b2 && c1 == c2 && d1 == d2;
    verdict(
        ok,
        format!(
            "determinism: repeated end-to-end run -- train log {} eval {} sweep {} ablation {} \
             (all byte-identical)",
            a1 == a2,
            b1 == b2,
            c1 == c2,
            d1 == d2
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: perturbation energy is confined to the low band
// ---------------------------------------------------------------------------

#[test]
fn perturbation_energy_stays_low_frequency() {
    let splits = make_dataset(120, 32, 7008).unwrap();
    let (surrogate, _) = train_surrogate::<f32>(&splits.train, 40, 7008).unwrap();
    let cfg = TrainConfig { epochs: 10, seed: 8, ..TrainConfig::default() };
    let mut state = init_train_state::<f32>(&cfg).unwrap();
    state.model.low_band_only = true;
    run_training(&mut state, &surrogate, &splits.train).unwrap();

    let mut ll_sum = 0.0f64;
    let mut high_sum = 0.0f64;
    for (img, _) in &splits.test.items {
        let x_t = img.to_tensor::<f32>();
        let x_p = state.model.protect(&x_t, Mode::Eval).unwrap();
        let diff: Vec<f64> = x_p
            .to_vec()
            .iter()
            .zip(x_t.to_vec())
            .map(|(p, t)| *p as f64 - t as f64)
            .collect();
        let d = T64::from_vec(&[1, 3, 32, 32], diff).unwrap();
        let bands = dwt2(&d).unwrap();
        let energy = |t: &T64| t.to_vec().iter().map(|v| v * v).sum::<f64>();
        ll_sum += energy(&bands.ll);
        high_sum += energy(&bands.hl) + energy(&bands.lh) + energy(&bands.hh);
    }
    let ratio = ll_sum / high_sum.max(f64::MIN_POSITIVE);
    verdict(
        ll_sum >= 5.0 * high_sum && ll_sum > 0.0,
        format!(
            "frequency locality: test-split low-band energy {ll_sum:.3e} vs detail {high_sum:.3e}, \
             ratio {ratio:.1e} (>= 5)"
        ),
    );
}
