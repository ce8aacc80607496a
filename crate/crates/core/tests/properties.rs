mod common;

use lataug::autodiff::{BnMode, Tape};
use lataug::data::{extract_pairs, synth_video, MotionKind};
use lataug::nn::{self, Skips};
use lataug::params::{Bound, NetworkParams};
use lataug::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outputs {
    code: Tensor<f32>,
    rec: Tensor<f32>,
    aae_logit: Tensor<f32>,
    aae_features: Tensor<f32>,
    gen: Tensor<f32>,
    cgan_logit: Tensor<f32>,
    cgan_features: Tensor<f32>,
}

/// Runs all five networks once on `x`.
fn run_all(seed: u64, x: &Tensor<f32>, mode: BnMode, params: &mut [NetworkParams<f32>; 5]) -> Outputs {
    let spec = common::tiny_spec();
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let enc = nn::build_encoder::<f32, _>(&spec, r).unwrap().0;
    let dec = nn::build_decoder::<f32, _>(&spec, r).unwrap().0;
    let disc = nn::build_aae_discriminator::<f32, _>(&spec, r).unwrap().0;
    let gen = nn::build_cgan_generator::<f32, _>(&spec, r).unwrap().0;
    let cd = nn::build_cgan_discriminator::<f32, _>(&spec, r).unwrap().0;
    let [ep, dp, ap, gp, cp] = params;
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let z = enc.forward(&mut t, &mut Bound::new(ep, mode, false), xi).unwrap();
    let y = dec.forward(&mut t, &mut Bound::new(dp, mode, false), z).unwrap();
    let a = disc.forward(&mut t, &mut Bound::new(ap, mode, false), z, y).unwrap();
    let g = gen.forward(&mut t, &mut Bound::new(gp, mode, false), z, xi, Skips::Live).unwrap();
    let c = cd.forward(&mut t, &mut Bound::new(cp, mode, false), g, xi).unwrap();
    let v = |id| t.value(id).unwrap().clone();
    Outputs {
        code: v(z),
        rec: v(y),
        aae_logit: v(a.logit),
        aae_features: v(a.features),
        gen: v(g),
        cgan_logit: v(c.logit),
        cgan_features: v(c.features),
    }
}

fn fresh_params(seed: u64) -> [NetworkParams<f32>; 5] {
    let spec = common::tiny_spec();
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    [
        nn::build_encoder::<f32, _>(&spec, r).unwrap().1,
        nn::build_decoder::<f32, _>(&spec, r).unwrap().1,
        nn::build_aae_discriminator::<f32, _>(&spec, r).unwrap().1,
        nn::build_cgan_generator::<f32, _>(&spec, r).unwrap().1,
        nn::build_cgan_discriminator::<f32, _>(&spec, r).unwrap().1,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn networks_keep_the_shape_contract(seed in 0u64..1000, batch in 1usize..6, train in any::<bool>()) {
        let spec = common::tiny_spec();
        // a batch of one has no spread for batch statistics
        let mode = if train && batch > 1 { BnMode::Train } else { BnMode::Eval };
        let x = Tensor::<f32>::rand_uniform(&spec.image_shape(batch), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let o = run_all(seed, &x, mode, &mut fresh_params(seed));
        prop_assert_eq!(o.code.shape(), &[batch, spec.latent_dim]);
        prop_assert_eq!(o.rec.shape(), x.shape());
        prop_assert_eq!(o.gen.shape(), x.shape());
        prop_assert_eq!(o.aae_logit.shape(), &[batch, 1]);
        prop_assert_eq!(o.cgan_logit.shape(), &[batch, 1]);
        prop_assert_eq!(o.aae_features.shape(), &[batch, spec.disc_features]);
        prop_assert_eq!(o.cgan_features.shape(), &[batch, spec.disc_features]);
        for t in [&o.code, &o.rec, &o.gen, &o.aae_logit, &o.cgan_logit, &o.aae_features, &o.cgan_features] {
            prop_assert!(t.is_finite());
        }
        for t in [&o.rec, &o.gen] {
            prop_assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn forwards_are_pure(seed in 0u64..1000, batch in 2usize..5, train in any::<bool>()) {
        let spec = common::tiny_spec();
        let mode = if train { BnMode::Train } else { BnMode::Eval };
        let x = Tensor::<f32>::rand_uniform(&spec.image_shape(batch), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
        let params = fresh_params(seed);
        let (mut p1, mut p2) = (params.clone(), params.clone());
        let a = run_all(seed, &x, mode, &mut p1);
        let b = run_all(seed, &x, mode, &mut p2);
        prop_assert!(p1 == p2);
        if !train {
            prop_assert!(p1 == params, "eval forward changed the parameters");
        }
        for (u, v) in [(&a.code, &b.code), (&a.rec, &b.rec), (&a.gen, &b.gen), (&a.aae_logit, &b.aae_logit), (&a.cgan_logit, &b.cgan_logit)] {
            prop_assert_eq!(u.data(), v.data());
        }
    }

    #[test]
    fn extract_pairs_is_deterministic(seed in 0u64..500, rotate in any::<bool>(), lo in 0.0f64..0.6, width in 0.05f64..0.4, max_gap in 1usize..4) {
        let (kind, amp) = if rotate { (MotionKind::Rotate, 0.25) } else { (MotionKind::Translate, 2.5) };
        let v = synth_video(kind, 10, 16, amp, seed).unwrap();
        let hi = (lo + width).min(1.0);
        let a = extract_pairs(&v.sequence, lo, hi, max_gap).unwrap();
        let b = extract_pairs(&v.sequence.clone(), lo, hi, max_gap).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!((p.anchor, p.gap, &p.sequence), (q.anchor, q.gap, &q.sequence));
            prop_assert_eq!(p.first.data(), q.first.data());
            prop_assert_eq!(p.second.data(), q.second.data());
            prop_assert!(p.gap >= 1 && p.gap <= max_gap);
        }
    }
}
