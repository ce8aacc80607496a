//! Central-difference gradient checking in f64, shared by the gradcheck
//! tests and the acceptance runner.
#![allow(dead_code)]

use lataug::autodiff::{BnMode, Tape, Var};
use lataug::losses;
use lataug::nn::{self, NetworkSpec, Skips};
use lataug::params::{Bound, NetworkParams};
use lataug::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
/// Network objectives sum thousands of terms of order one, so the roundoff
/// in a difference quotient is about `1e-16 · L / h`; a larger step keeps
/// that well below small gradient entries. Objectives with an L1 term on
/// a densely perturbed image cross kinks at that step and keep `STEP`.
pub const NET_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-5;

type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    body: Body,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn eval_case(case: &OpCase, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.body)(&mut tape, &vars).expect("forward");
    tape.value(out).unwrap().item()
}

impl OpCase {
    /// Worst relative error over every input coordinate.
    pub fn max_rel_error(&self) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = (self.body)(&mut tape, &vars).expect("forward");
        let grads = tape.backward(out).expect("backward");
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.inputs[k].shape()));
            for j in 0..self.inputs[k].len() {
                let mut plus = self.inputs.clone();
                plus[k].data_mut()[j] += STEP;
                let mut minus = self.inputs.clone();
                minus[k].data_mut()[j] -= STEP;
                let numeric = (eval_case(self, &plus) - eval_case(self, &minus)) / (2.0 * STEP);
                worst = worst.max(rel(analytic.data()[j], numeric));
            }
        }
        worst
    }
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, body: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        body: Box::new(body),
    }
}

/// `sum(v ⊙ r)` with a fixed random `r`, turning any output into a scalar
/// whose gradient exercises every output element.
fn project(tape: &mut Tape<f64>, v: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(v, c)?;
    tape.sum(p)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Uniform values pushed at least `gap` away from zero, keeping finite
/// differences off the kinks of abs and leaky ReLU.
fn off_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, rng).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let r = uniform(&[2, 4, 3, 3], rng);
    out.push(case(
        "conv2d",
        vec![uniform(&[2, 3, 6, 6], rng), uniform(&[4, 3, 4, 4], rng), uniform(&[4], rng)],
        move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(t, y, &r)
        },
    ));
    let r = uniform(&[1, 2, 3, 3], rng);
    out.push(case(
        "conv2d_stride1",
        vec![uniform(&[1, 2, 5, 5], rng), uniform(&[2, 2, 3, 3], rng), uniform(&[2], rng)],
        move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 0)?;
            project(t, y, &r)
        },
    ));
    let r = uniform(&[2, 2, 6, 6], rng);
    out.push(case(
        "conv_transpose2d",
        vec![uniform(&[2, 3, 3, 3], rng), uniform(&[3, 2, 4, 4], rng), uniform(&[2], rng)],
        move |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], v[2], 2, 1)?;
            project(t, y, &r)
        },
    ));
    let r = uniform(&[3, 2, 3, 3], rng);
    out.push(case(
        "batchnorm2d_train",
        vec![uniform(&[3, 2, 3, 3], rng), uniform(&[2], rng), uniform(&[2], rng)],
        move |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], BnMode::Train, 1e-5)?;
            project(t, y, &r)
        },
    ));
    let r = uniform(&[2, 3, 2, 2], rng);
    let (rm, rv): (Vec<f64>, Vec<f64>) = (0..3).map(|_| (rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0))).unzip();
    out.push(case(
        "batchnorm2d_eval",
        vec![uniform(&[2, 3, 2, 2], rng), uniform(&[3], rng), uniform(&[3], rng)],
        move |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &rm, &rv, BnMode::Eval, 1e-5)?;
            project(t, y, &r)
        },
    ));
    let r = uniform(&[4, 5], rng);
    out.push(case("leaky_relu", vec![off_zero(&[4, 5], 0.01, rng)], move |t, v| {
        let y = t.leaky_relu(v[0], 0.2)?;
        project(t, y, &r)
    }));
    let r = uniform(&[3, 4], rng);
    out.push(case(
        "linear",
        vec![uniform(&[3, 5], rng), uniform(&[4, 5], rng), uniform(&[4], rng)],
        move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            project(t, y, &r)
        },
    ));
    let (rx, ry) = (uniform(&[2, 2, 4, 5], rng), uniform(&[2, 2, 4, 5], rng));
    out.push(case("image_gradient", vec![uniform(&[2, 2, 4, 5], rng)], move |t, v| {
        let (gx, gy) = t.image_gradient(v[0])?;
        let a = project(t, gx, &rx)?;
        let b = project(t, gy, &ry)?;
        t.add(a, b)
    }));
    let a = uniform(&[3, 4], rng);
    let b = a.zip_map(&off_zero(&[3, 4], 0.05, rng), "t", |p, q| p + q).unwrap();
    out.push(case("l1_loss", vec![a, b], |t, v| t.l1_loss(v[0], v[1])));
    let targets = Tensor::rand_uniform(&[5, 1], 0.0, 1.0, rng);
    out.push(case(
        "bce_with_logits",
        vec![Tensor::rand_uniform(&[5, 1], -4.0, 4.0, rng)],
        move |t, v| t.bce_with_logits(v[0], targets.clone()),
    ));
    let r = uniform(&[3, 3], rng);
    out.push(case("tanh", vec![uniform(&[3, 3], rng)], move |t, v| {
        let y = t.tanh(v[0])?;
        project(t, y, &r)
    }));
    let r = uniform(&[2, 5], rng);
    out.push(case("concat", vec![uniform(&[2, 2], rng), uniform(&[2, 3], rng)], move |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        project(t, y, &r)
    }));
    out.push(case(
        "mul_scale_mean",
        vec![uniform(&[2, 3], rng), uniform(&[2, 3], rng)],
        |t, v| {
            let p = t.mul(v[0], v[1])?;
            let d = t.sub(p, v[0])?;
            let s = t.scale(d, 1.7)?;
            t.mean(s)
        },
    ));

    // composite losses
    let (a, b) = (uniform(&[2, 3, 5, 5], rng), uniform(&[2, 3, 5, 5], rng));
    out.push(case("rec_loss", vec![a, b], |t, v| losses::rec_loss(t, v[0], v[1])));
    let real = uniform(&[3, 6], rng);
    let fake = real.zip_map(&off_zero(&[3, 6], 0.05, rng), "t", |p, q| p + q).unwrap();
    out.push(case("feature_loss", vec![fake], move |t, v| losses::feature_loss(t, &real, v[0])));
    out.push(case(
        "discriminator_loss",
        vec![
            Tensor::rand_uniform(&[4, 1], -3.0, 3.0, rng),
            Tensor::rand_uniform(&[4, 1], -3.0, 3.0, rng),
        ],
        |t, v| losses::discriminator_loss(t, v[0], v[1]),
    ));
    out.push(case(
        "generator_adv_loss",
        vec![Tensor::rand_uniform(&[4, 1], -3.0, 3.0, rng)],
        |t, v| losses::generator_adv_loss(t, v[0]),
    ));
    out
}

pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        height: 16,
        width: 16,
        channels: 3,
        latent_dim: 6,
        coder_layers: 2,
        base_width: 3,
        max_width: 6,
        disc_layers: 3,
        disc_features: 5,
        latent_proj: 4,
        leaky_slope: 0.2,
        skips: vec![1, 2],
    }
}

type NetBody = Box<dyn Fn(&mut Tape<f64>, &mut Bound<'_, f64>) -> Result<Var>>;

/// A scalar function of one network's parameters, checked at a few
/// randomly chosen trainable coordinates.
pub struct NetCase {
    pub name: &'static str,
    params: NetworkParams<f64>,
    coords: Vec<(String, usize)>,
    step: f64,
    body: NetBody,
}

impl NetCase {
    fn eval(&self, params: &NetworkParams<f64>) -> f64 {
        let mut p = params.clone();
        let mut tape = Tape::new();
        let mut b = Bound::new(&mut p, BnMode::Train, true);
        let out = (self.body)(&mut tape, &mut b).expect("forward");
        tape.value(out).unwrap().item()
    }

    pub fn max_rel_error(&self) -> f64 {
        let mut p = self.params.clone();
        let mut tape = Tape::new();
        let mut b = Bound::new(&mut p, BnMode::Train, true);
        let out = (self.body)(&mut tape, &mut b).expect("forward");
        let binding = b.finish();
        let grads = tape.backward(out).expect("backward");
        let mut worst: f64 = 0.0;
        for (name, j) in &self.coords {
            let idx = self.params.names().position(|n| n == name).unwrap();
            let analytic = binding.var(idx).and_then(|v| grads.get(v)).map_or(0.0, |g| g.data()[*j]);
            let mut plus = self.params.clone();
            plus.get_mut(name).unwrap().data_mut()[*j] += self.step;
            let mut minus = self.params.clone();
            minus.get_mut(name).unwrap().data_mut()[*j] -= self.step;
            let numeric = (self.eval(&plus) - self.eval(&minus)) / (2.0 * self.step);
            worst = worst.max(rel(analytic, numeric));
        }
        worst
    }
}

fn pick_coords(params: &NetworkParams<f64>, count: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let names: Vec<&str> = params.names().filter(|n| params.is_trainable(n)).collect();
    (0..count)
        .map(|_| {
            let n = names[rng.random_range(0..names.len())];
            (n.to_string(), rng.random_range(0..params.get(n).unwrap().len()))
        })
        .collect()
}

/// Stage-level objectives through the real networks: the AAE generator
/// loss w.r.t. the encoder, the cGAN generator loss w.r.t. the generator,
/// and the cGAN discriminator logit w.r.t. its input image.
pub fn network_cases(seed: u64, coords: usize) -> Vec<NetCase> {
    let spec = tiny_spec();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (enc, enc_p) = nn::build_encoder::<f64, _>(&spec, rng).unwrap();
    let (dec, dec_p) = nn::build_decoder::<f64, _>(&spec, rng).unwrap();
    let (disc, disc_p) = nn::build_aae_discriminator::<f64, _>(&spec, rng).unwrap();
    let (gen, gen_p) = nn::build_cgan_generator::<f64, _>(&spec, rng).unwrap();
    let (cd, cd_p) = nn::build_cgan_discriminator::<f64, _>(&spec, rng).unwrap();
    let x = Tensor::<f64>::rand_uniform(&spec.image_shape(3), -1.0, 1.0, rng);
    let next = Tensor::<f64>::rand_uniform(&spec.image_shape(3), -1.0, 1.0, rng);
    let latent = Tensor::<f64>::randn(&[3, spec.latent_dim], 1.0, rng);
    let real_feat = Tensor::<f64>::randn(&[3, spec.disc_features], 1.0, rng);
    let mut out = Vec::new();

    let coords_e = pick_coords(&enc_p, coords, rng);
    let (x1, dec1, disc1, dec_p1, disc_p1) = (x.clone(), dec.clone(), disc.clone(), dec_p.clone(), disc_p.clone());
    out.push(NetCase {
        name: "aae_generator_loss(encoder)",
        params: enc_p,
        coords: coords_e,
        step: STEP,
        body: Box::new(move |t, b| {
            let xi = t.constant(x1.clone());
            let code = enc.forward(t, b, xi)?;
            let mut dp = dec_p1.clone();
            let rec = dec1.forward(t, &mut Bound::new(&mut dp, BnMode::Train, false), code)?;
            let mut ap = disc_p1.clone();
            let d = disc1.forward(t, &mut Bound::new(&mut ap, BnMode::Train, false), code, rec)?;
            let adv = losses::generator_adv_loss(t, d.logit)?;
            let r = losses::rec_loss(t, rec, xi)?;
            let r = t.scale(r, 10.0)?;
            t.add(adv, r)
        }),
    });

    let coords_g = pick_coords(&gen_p, coords, rng);
    let (x2, n2, l2, cd2, cdp2) = (x.clone(), next.clone(), latent.clone(), cd.clone(), cd_p.clone());
    let (enc2, encp2) = nn::build_encoder::<f64, _>(&spec, rng).unwrap();
    out.push(NetCase {
        name: "cgan_generator_loss(generator)",
        params: gen_p,
        coords: coords_g,
        step: NET_STEP,
        body: Box::new(move |t, b| {
            let cond = t.constant(x2.clone());
            let target = t.constant(n2.clone());
            let l = t.constant(l2.clone());
            let fake = gen.forward(t, b, l, cond, Skips::Live)?;
            let mut dp = cdp2.clone();
            let d = cd2.forward(t, &mut Bound::new(&mut dp, BnMode::Train, false), fake, cond)?;
            let adv = losses::generator_adv_loss(t, d.logit)?;
            let rec = losses::rec_loss(t, fake, target)?;
            let rec = t.scale(rec, 10.0)?;
            // feature term through the frozen AAE path: eval-mode encoder and discriminator
            let mut ep = encp2.clone();
            let code = enc2.forward(t, &mut Bound::new(&mut ep, BnMode::Eval, false), fake)?;
            let f = disc.forward(t, &mut Bound::eval(&disc_p), code, fake)?;
            let feat = losses::feature_loss(t, &real_feat, f.features)?;
            let s = t.add(adv, rec)?;
            t.add(s, feat)
        }),
    });

    let coords_d = pick_coords(&cd_p, coords, rng);
    let (x3, n3) = (x.clone(), next.clone());
    let cd3 = cd.clone();
    out.push(NetCase {
        name: "cgan_discriminator_loss(discriminator)",
        params: cd_p,
        coords: coords_d,
        step: NET_STEP,
        body: Box::new(move |t, b| {
            let cond = t.constant(x3.clone());
            let real = t.constant(n3.clone());
            let fake = t.constant(n3.map(|v| 0.5 * v));
            let dr = cd3.forward(t, b, real, cond)?;
            let df = cd3.forward(t, b, fake, cond)?;
            losses::discriminator_loss(t, dr.logit, df.logit)
        }),
    });
    out
}

/// d logit / d candidate pixel for the cGAN discriminator at three random
/// coordinates.
pub fn discriminator_input_case(seed: u64) -> OpCase {
    let spec = tiny_spec();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (cd, cd_p) = nn::build_cgan_discriminator::<f64, _>(&spec, rng).unwrap();
    let cond = Tensor::<f64>::rand_uniform(&spec.image_shape(2), -1.0, 1.0, rng);
    let cand = Tensor::<f64>::rand_uniform(&spec.image_shape(2), -1.0, 1.0, rng);
    let r = Tensor::<f64>::rand_uniform(&[2, 1], -1.0, 1.0, rng);
    case("cgan_discriminator_logit(input)", vec![cand], move |t, v| {
        let c = t.constant(cond.clone());
        let mut p = cd_p.clone();
        let d = cd.forward(t, &mut Bound::new(&mut p, BnMode::Train, false), v[0], c)?;
        project(t, d.logit, &r)
    })
}

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const TOLERANCE: f64 = 1e-4;
