//! Scratch probe: per-op timings at the decoder's tensor shapes.

use std::time::Instant;

use rand_core::RngCore;
use waveguard_core::rng;
use waveguard_core::tensor::{wavelet, Mode, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "probe4", 0);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| (r.next_u32() as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32 * 0.5)
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn timed<F: FnMut()>(label: &str, reps: usize, mut f: F) {
    f();
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    let ms = t.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!("{label:<34} {ms:>8.2} ms");
}

fn main() {
    let reps = 10;
    let b = 8;
    let w = 12;

    let x60 = randn(&[b, 5 * w, 32, 32], 1);
    let k60 = randn(&[2 * w, 5 * w, 3, 3], 2);
    let bias24 = randn(&[2 * w], 3);
    timed("conv 60->24 k3 s1 @32", reps, || {
        let _ = x60.conv2d(&k60, &bias24, 1, 1).unwrap();
    });

    let x24s = randn(&[b, 2 * w, 32, 32], 4);
    let g24 = randn(&[2 * w], 5);
    let bb24 = randn(&[2 * w], 6);
    let mut rm = vec![0.0f32; 2 * w];
    let mut rv = vec![1.0f32; 2 * w];
    timed("bn 24 @32 train", reps, || {
        let _ = x24s.batch_norm2d(&g24, &bb24, &mut rm, &mut rv, 0.1, 1e-5, Mode::Train).unwrap();
    });
    timed("relu 24 @32", reps, || {
        let _ = x24s.relu();
    });

    let k256 = randn(&[256, 2 * w, 1, 1], 7);
    let bias256 = randn(&[256], 8);
    timed("conv 24->256 k1 @32", reps, || {
        let _ = x24s.conv2d(&k256, &bias256, 1, 0).unwrap();
    });

    let x256 = randn(&[b, 256, 32, 32], 9);
    let g256 = randn(&[256], 10);
    let bb256 = randn(&[256], 11);
    let mut rm2 = vec![0.0f32; 256];
    let mut rv2 = vec![1.0f32; 256];
    timed("bn 256 @32 train", reps, || {
        let _ = x256.batch_norm2d(&g256, &bb256, &mut rm2, &mut rv2, 0.1, 1e-5, Mode::Train).unwrap();
    });
    timed("relu 256 @32", reps, || {
        let _ = x256.relu();
    });

    let k48 = randn(&[4 * w, 256, 1, 1], 12);
    let bias48 = randn(&[4 * w], 13);
    timed("conv 256->48 k1 @32", reps, || {
        let _ = x256.conv2d(&k48, &bias48, 1, 0).unwrap();
    });

    let x48 = randn(&[b, 4 * w, 32, 32], 14);
    timed("idwt 48 @32", reps, || {
        let _ = wavelet::idwt2(&x48).unwrap();
    });

    let x24 = randn(&[b, 2 * w, 64, 64], 15);
    timed("upsample 24 @64", reps, || {
        let _ = x24.upsample_nearest2x().unwrap();
    });

    let x24u = randn(&[b, 2 * w, 128, 128], 16);
    let k12 = randn(&[w, 2 * w, 3, 3], 17);
    let bias12 = randn(&[w], 18);
    timed("conv 24->12 k3 s2 @128", reps, || {
        let _ = x24u.conv2d(&k12, &bias12, 2, 1).unwrap();
    });

    let x12u = randn(&[b, w, 128, 128], 19);
    let k12b = randn(&[w, w, 3, 3], 20);
    timed("conv 12->12 k3 s2 @128", reps, || {
        let _ = x12u.conv2d(&k12b, &bias12, 2, 1).unwrap();
    });

    let x12 = randn(&[b, w, 64, 64], 21);
    let k3 = randn(&[3, w, 3, 3], 22);
    let bias3 = randn(&[3], 23);
    timed("conv 12->3 k3 s1 @64", reps, || {
        let _ = x12.conv2d(&k3, &bias3, 1, 1).unwrap();
    });
    timed("tanh 3 @64", reps, || {
        let x3 = randn(&[b, 3, 64, 64], 24);
        let _ = x3.tanh();
    });

    // encoder-shaped ops
    let x3e = randn(&[b, 3, 64, 64], 25);
    let ke = randn(&[w, 3, 3, 3], 26);
    timed("conv 3->12 k3 s1 @64", reps, || {
        let _ = x3e.conv2d(&ke, &bias12, 1, 1).unwrap();
    });
    let x12e = randn(&[b, w, 64, 64], 27);
    let k12e = randn(&[w, w, 3, 3], 28);
    timed("conv 12->12 k3 s1 @64", reps, || {
        let _ = x12e.conv2d(&k12e, &bias12, 1, 1).unwrap();
    });
    timed("dwt 12 @64", reps, || {
        let _ = wavelet::dwt2(&x12e).unwrap();
    });

    let parts = [
        randn(&[b, w, 32, 32], 29),
        randn(&[b, w, 32, 32], 30),
        randn(&[b, w, 32, 32], 31),
        randn(&[b, w, 32, 32], 32),
        randn(&[b, w, 32, 32], 33),
    ];
    timed("concat 5x12 @32", reps, || {
        let refs: Vec<&Tensor> = parts.iter().collect();
        let _ = Tensor::concat_channels(&refs).unwrap();
    });
}
