//! Scratch timing probe (not part of the deliverable): attributes one
//! training step's wall time to pipeline stages. args: res batch reps

use std::time::Instant;
use waveguard_core::objectives::{
    adv_loss_discriminator, adv_loss_generator, rec_loss, swap_loss, total_loss, LossWeights,
};
use waveguard_core::protector::{ProtectorModel, DEFAULT_WIDTH};
use waveguard_core::rng;
use waveguard_core::surrogate::SwapModel;
use waveguard_core::tensor::{Adam, Mode, Tensor};

type T = Tensor<f32>;

fn timed<R>(label: &str, reps: usize, mut f: impl FnMut() -> R) -> R {
    let t = Instant::now();
    let mut out = None;
    for _ in 0..reps {
        out = Some(f());
    }
    println!("{label:<28} {:>8.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    out.unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let res: usize = args[1].parse().unwrap();
    let batch: usize = args[2].parse().unwrap();
    let reps: usize = args[3].parse().unwrap();

    let model = ProtectorModel::<f32>::new(DEFAULT_WIDTH, 0.05, 1).unwrap();
    let surrogate = SwapModel::<f32>::new(2).unwrap();
    let mut opt = Adam::new(1e-4);
    let mut disc_opt = Adam::new(1e-4);
    let w = LossWeights::default();
    let mut r = rng::stream(3, "probe3", 0);
    let x_t = T::uniform(&[batch, 3, res, res], -0.9, 0.9, &mut r);
    let x_s = T::uniform(&[batch, 3, res, res], -0.9, 0.9, &mut r);

    println!("res {res} batch {batch} width {DEFAULT_WIDTH} reps {reps}");

    let enc = timed("encode fwd", reps, || model.encode(&x_t, Mode::Train).unwrap());
    let p = timed("generate fwd", reps, || {
        model.generate_perturbation(&enc.f_low, Mode::Train).unwrap()
    });
    timed("decode fwd", reps, || model.decode(&enc, &p, Mode::Train).unwrap());
    let x_p = timed("protect fwd (all)", reps, || model.protect(&x_t, Mode::Train).unwrap());
    let y = timed("swap fwd (clean)", reps, || {
        surrogate.swap(&x_s, &x_t, Mode::Eval).unwrap().detach()
    });
    let y_p = timed("swap fwd (graph)", reps, || surrogate.swap(&x_s, &x_p, Mode::Eval).unwrap());
    let prob = timed("disc fwd", reps, || model.discriminate(&x_p, Mode::Train).unwrap());

    let total = timed("loss fwd", reps, || {
        let rec = rec_loss(&x_p, &x_t).unwrap();
        let adv = adv_loss_generator(&prob);
        let sw = swap_loss(&y_p, &y).unwrap();
        total_loss(&rec, &adv, &sw, &w).unwrap()
    });

    timed("backward (gen side)", reps, || {
        total.backward().unwrap();
        model.params.zero_grad();
        surrogate.params.zero_grad();
    });
    total.backward().unwrap();
    timed("adam step", reps, || (&mut opt).step(&model.params).unwrap());
    model.params.zero_grad();
    surrogate.params.zero_grad();

    timed("disc step (full)", reps, || {
        let p_real = model.discriminate(&x_t, Mode::Train).unwrap();
        let p_fake = model.discriminate(&x_p.detach(), Mode::Train).unwrap();
        let dl = adv_loss_discriminator(&p_real, &p_fake);
        dl.backward().unwrap();
        disc_opt.step(&model.disc_params).unwrap();
        model.disc_params.zero_grad();
    });

    // one full composite step for cross-checking the parts
    timed("full step", reps, || {
        let x_p = model.protect(&x_t, Mode::Train).unwrap();
        let y = surrogate.swap(&x_s, &x_t, Mode::Eval).unwrap().detach();
        let y_p = surrogate.swap(&x_s, &x_p, Mode::Eval).unwrap();
        let prob = model.discriminate(&x_p, Mode::Train).unwrap();
        let rec = rec_loss(&x_p, &x_t).unwrap();
        let adv = adv_loss_generator(&prob);
        let sw = swap_loss(&y_p, &y).unwrap();
        let total = total_loss(&rec, &adv, &sw, &w).unwrap();
        total.backward().unwrap();
        opt.step(&model.params).unwrap();
        model.params.zero_grad();
        surrogate.params.zero_grad();
        let p_real = model.discriminate(&x_t, Mode::Train).unwrap();
        let p_fake = model.discriminate(&x_p.detach(), Mode::Train).unwrap();
        let dl = adv_loss_discriminator(&p_real, &p_fake);
        dl.backward().unwrap();
        disc_opt.step(&model.disc_params).unwrap();
        model.disc_params.zero_grad();
    });
}
