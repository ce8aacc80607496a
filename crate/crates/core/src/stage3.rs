//! Stage III: a conditional GAN that renders the regressed code `d̂` into
//! the next frame, conditioned on the current frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, Tape};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, ModelKind};
use crate::kernels;
use crate::kv::{KvDoc, KvWriter};
use crate::losses;
use crate::nn::{self, CganDiscriminator, Generator, NetworkSpec, Skips};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::{Bound, NetworkParams};
use crate::stage1::{check_dataset, check_finite, map_chunks, AaeModel, Batcher, INFER_CHUNK};
use crate::stage2::LinearDynamicsModel;
use crate::tensor::Tensor;

/// Which discriminator supplies the penultimate features for the feature
/// loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Stage I discriminator on `(encode(img), img)`.
    Aae,
    /// Stage III discriminator on `(img, condition)`.
    Cgan,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aae" => Ok(FeatureSource::Aae),
            "cgan" => Ok(FeatureSource::Cgan),
            o => Err(format!("unknown feature source `{o}` (expected aae|cgan)")),
        }
    }
}

impl std::fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureSource::Aae => "aae",
            FeatureSource::Cgan => "cgan",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Config {
    /// Tied to the Stage I reconstruction weight.
    pub lambda_iii: f64,
    pub lambda_feat: f64,
    pub feature_source: FeatureSource,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            lambda_iii: 10.0,
            lambda_feat: 1.0,
            feature_source: FeatureSource::Aae,
            batch: 16,
            steps: 500,
            optimizer: OptimizerConfig::default().with_lr(1e-3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CganModel {
    pub spec: NetworkSpec,
    pub generator: Generator,
    pub discriminator: CganDiscriminator,
    pub generator_params: NetworkParams<f32>,
    pub discriminator_params: NetworkParams<f32>,
    pub lambda_iii: f64,
    pub lambda_feat: f64,
    pub feature_source: FeatureSource,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage3Record {
    pub step: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_rec: f64,
    pub g_feat: f64,
    pub g_total: f64,
}

/// Condition frames, target frames and the regressed codes, row-aligned.
#[derive(Clone, Debug)]
pub struct ConditionedPairs {
    pub condition: Tensor<f32>,
    pub target: Tensor<f32>,
    pub latent: Tensor<f32>,
}

/// `d̂ = A·[encode(x); 1]` as the pipeline computes it: through the f32
/// fully connected form of `A`.
pub fn regress(aae: &AaeModel, dynamics: &LinearDynamicsModel, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    if dynamics.latent_dim() != aae.spec.latent_dim {
        return Err(Error::Boundary {
            boundary: "encoder output -> dynamics input",
            expected: aae.spec.latent_dim,
            got: dynamics.latent_dim(),
        });
    }
    let (w, b) = dynamics.as_linear_layer();
    kernels::linear(&aae.encode(images)?, &w, &b)
}

impl CganModel {
    pub fn new(spec: &NetworkSpec, cfg: &Stage3Config, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (generator, generator_params) = nn::build_cgan_generator(spec, &mut rng)?;
        let (discriminator, discriminator_params) = nn::build_cgan_discriminator(spec, &mut rng)?;
        Ok(CganModel {
            spec: spec.clone(),
            generator,
            discriminator,
            generator_params,
            discriminator_params,
            lambda_iii: cfg.lambda_iii,
            lambda_feat: cfg.lambda_feat,
            feature_source: cfg.feature_source,
        })
    }

    /// Eval-mode generation.
    pub fn generate(&self, latent: &Tensor<f32>, condition: &Tensor<f32>, skips: Skips) -> Result<Tensor<f32>> {
        let n = check_dataset(&self.spec, condition, "generate")?;
        latent.expect_shape("generate latent", &[n, self.spec.latent_dim])?;
        let mut rows = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let l = tape.constant(latent.select_outer(&idx));
            let c = tape.constant(condition.select_outer(&idx));
            let y = self
                .generator
                .forward(&mut tape, &mut Bound::eval(&self.generator_params), l, c, skips)?;
            let y = tape.value(y)?;
            rows.extend((0..idx.len()).map(|i| y.index_outer(i)));
        }
        Tensor::stack(&rows.iter().collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = KvWriter::default()
            .section("stage3")
            .kv("lambda_iii", self.lambda_iii)
            .kv("lambda_iii_feat", self.lambda_feat)
            .kv("feature_source", self.feature_source)
            .finish();
        let mut c = Checkpoint::new(ModelKind::Cgan, self.spec.to_kv(), meta);
        c.push_params("generator", &self.generator_params);
        c.push_params("discriminator", &self.discriminator_params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Cgan)?;
        let spec = NetworkSpec::from_kv(&KvDoc::parse(&c.spec)?)?;
        let n = spec.param_counts();
        c.ensure_holds(n.generator + n.cgan_discriminator)?;
        let meta = KvDoc::parse(&c.meta)?;
        let mut r = meta.reader("stage3");
        let d = Stage3Config::default();
        let cfg = Stage3Config {
            lambda_iii: r.get("lambda_iii", d.lambda_iii)?,
            lambda_feat: r.get("lambda_iii_feat", d.lambda_feat)?,
            feature_source: r.get("feature_source", d.feature_source)?,
            ..d
        };
        let mut m = CganModel::new(&spec, &cfg, 0)?;
        c.load_params("generator", &mut m.generator_params)?;
        c.load_params("discriminator", &mut m.discriminator_params)?;
        Ok(m)
    }
}

/// AAE-discriminator penultimate features of `(encode(img), img)`.
fn aae_features(aae: &AaeModel, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    map_chunks(images, |x| {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let z = aae.encoder.forward(&mut tape, &mut Bound::eval(&aae.encoder_params), xv)?;
        let out = aae
            .discriminator
            .forward(&mut tape, &mut Bound::eval(&aae.discriminator_params), z, xv)?;
        Ok(tape.value(out.features)?.clone())
    })
}

/// Trains a fresh cGAN on `(first, second)` frame pairs. The AAE and the
/// dynamics model are only read.
pub fn train_stage3(
    first: &Tensor<f32>,
    second: &Tensor<f32>,
    aae: &AaeModel,
    dynamics: &LinearDynamicsModel,
    cfg: &Stage3Config,
    seed: u64,
) -> Result<(CganModel, Vec<Stage3Record>)> {
    let mut model = CganModel::new(&aae.spec, cfg, seed)?;
    let data = ConditionedPairs {
        condition: first.clone(),
        target: second.clone(),
        latent: regress(aae, dynamics, first)?,
    };
    let history = continue_stage3(&mut model, &data, aae, cfg, seed)?;
    Ok((model, history))
}

pub fn continue_stage3(
    model: &mut CganModel,
    data: &ConditionedPairs,
    aae: &AaeModel,
    cfg: &Stage3Config,
    seed: u64,
) -> Result<Vec<Stage3Record>> {
    let n = check_dataset(&model.spec, &data.condition, "train_stage3 condition")?;
    data.target.expect_shape("train_stage3 target", data.condition.shape())?;
    data.latent.expect_shape("train_stage3 latent", &[n, model.spec.latent_dim])?;
    if n == 0 || cfg.batch == 0 {
        return Err(Error::invalid("train_stage3", "empty pair set or zero batch size"));
    }
    if aae.spec != model.spec {
        return Err(Error::Spec("AAE and cGAN were built from different network specs".into()));
    }
    let real_aae_features = match model.feature_source {
        FeatureSource::Aae => Some(aae_features(aae, &data.target)?),
        FeatureSource::Cgan => None,
    };
    let mut batcher = Batcher::new(n, seed.wrapping_add(3));
    let mut opt_g = OptimizerState::new(cfg.optimizer);
    let mut opt_d = OptimizerState::new(cfg.optimizer);
    let (l_rec, l_feat) = (model.lambda_iii as f32, model.lambda_feat as f32);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = batcher.next_batch(cfg.batch);
        let cond = data.condition.select_outer(&idx);
        let target = data.target.select_outer(&idx);
        let latent = data.latent.select_outer(&idx);

        let mut tape = Tape::new();
        let cv = tape.constant(cond.clone());
        let tv = tape.constant(target.clone());
        let lv = tape.constant(latent);
        let mut gb = Bound::new(&mut model.generator_params, BnMode::Train, true);
        let fake = model.generator.forward(&mut tape, &mut gb, lv, cv, Skips::Live)?;

        let d_loss = {
            let mut dt = Tape::new();
            let c = dt.constant(cond);
            let real_img = dt.constant(target);
            let fake_img = dt.constant(tape.value(fake)?.clone());
            let mut b = Bound::new(&mut model.discriminator_params, BnMode::Train, true);
            let real = model.discriminator.forward(&mut dt, &mut b, real_img, c)?;
            let fk = model.discriminator.forward(&mut dt, &mut b, fake_img, c)?;
            let loss = losses::discriminator_loss(&mut dt, real.logit, fk.logit)?;
            let value = dt.value(loss)?.item() as f64;
            check_finite(step, &[("d_loss", value)])?;
            let binding = b.finish();
            let g = dt.backward(loss)?;
            opt_d.step(&mut model.discriminator_params, &binding, &g)?;
            value
        };

        let scored = model
            .discriminator
            .forward(&mut tape, &mut Bound::eval(&model.discriminator_params), fake, cv)?;
        let adv = losses::generator_adv_loss(&mut tape, scored.logit)?;
        let rec = losses::rec_loss(&mut tape, fake, tv)?;
        let feat = match &real_aae_features {
            Some(all) => {
                let real = all.select_outer(&idx);
                let z = aae.encoder.forward(&mut tape, &mut Bound::eval(&aae.encoder_params), fake)?;
                let out = aae
                    .discriminator
                    .forward(&mut tape, &mut Bound::eval(&aae.discriminator_params), z, fake)?;
                losses::feature_loss(&mut tape, &real, out.features)?
            }
            None => {
                let mut probe = Tape::new();
                let t = probe.constant(tape.value(tv)?.clone());
                let c = probe.constant(tape.value(cv)?.clone());
                let out = model
                    .discriminator
                    .forward(&mut probe, &mut Bound::eval(&model.discriminator_params), t, c)?;
                let real = probe.value(out.features)?.clone();
                let fk = model
                    .discriminator
                    .forward(&mut tape, &mut Bound::eval(&model.discriminator_params), fake, cv)?;
                losses::feature_loss(&mut tape, &real, fk.features)?
            }
        };
        let rec_w = tape.scale(rec, l_rec)?;
        let feat_w = tape.scale(feat, l_feat)?;
        let total = tape.add(adv, rec_w)?;
        let total = tape.add(total, feat_w)?;
        let v = |t: &Tape<f32>, x| -> Result<f64> { Ok(t.value(x)?.item() as f64) };
        let rec_ = Stage3Record {
            step,
            d_loss,
            g_adv: v(&tape, adv)?,
            g_rec: v(&tape, rec)?,
            g_feat: v(&tape, feat)?,
            g_total: v(&tape, total)?,
        };
        check_finite(
            step,
            &[
                ("d_loss", rec_.d_loss),
                ("g_adv", rec_.g_adv),
                ("g_rec", rec_.g_rec),
                ("g_feat", rec_.g_feat),
            ],
        )?;
        let binding = gb.finish();
        let g = tape.backward(total)?;
        opt_g.step(&mut model.generator_params, &binding, &g)?;
        history.push(rec_);
    }
    Ok(history)
}

/// Mean reconstruction loss of the generator on aligned data, eval mode.
pub fn evaluate_rec(model: &CganModel, data: &ConditionedPairs) -> Result<f64> {
    let fake = model.generate(&data.latent, &data.condition, Skips::Live)?;
    let mut tape = Tape::new();
    let f = tape.constant(fake);
    let t = tape.constant(data.target.clone());
    let l = losses::rec_loss(&mut tape, f, t)?;
    Ok(tape.value(l)?.item() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage1::Stage1Config;

    pub(crate) fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            height: 16,
            width: 16,
            channels: 3,
            latent_dim: 8,
            coder_layers: 2,
            base_width: 4,
            max_width: 8,
            disc_layers: 3,
            disc_features: 8,
            latent_proj: 4,
            leaky_slope: 0.2,
            skips: vec![1],
        }
    }

    fn frames(n: usize, seed: u64) -> Tensor<f32> {
        Tensor::rand_uniform(&[n, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_steps_and_frozen_stages() {
        let spec = tiny_spec();
        let aae = crate::stage1::train_stage1(
            &frames(4, 1),
            &spec,
            &Stage1Config {
                steps: 1,
                batch: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap()
        .0;
        let dynamics = LinearDynamicsModel::identity(8);
        let (before_aae, before_a) = (aae.to_checkpoint(), dynamics.clone());
        for (steps, source) in [(0, FeatureSource::Aae), (2, FeatureSource::Aae), (2, FeatureSource::Cgan)] {
            let cfg = Stage3Config {
                steps,
                batch: 2,
                feature_source: source,
                ..Default::default()
            };
            let (m, h) = train_stage3(&frames(3, 2), &frames(3, 3), &aae, &dynamics, &cfg, 4).unwrap();
            assert_eq!(h.len(), steps);
            if steps == 0 {
                assert_eq!(m.generator_params, CganModel::new(&spec, &cfg, 4).unwrap().generator_params);
            }
            for r in &h {
                let sum = r.g_adv + cfg.lambda_iii * r.g_rec + cfg.lambda_feat * r.g_feat;
                assert!((sum - r.g_total).abs() < 1e-4 * r.g_total.abs().max(1.0));
            }
        }
        assert_eq!(aae.to_checkpoint(), before_aae);
        assert_eq!(dynamics, before_a);
    }

    #[test]
    fn dimension_mismatch_at_boundary() {
        let spec = tiny_spec();
        let aae = AaeModel::new(&spec, 1.0, 10.0, 0).unwrap();
        let err = regress(&aae, &LinearDynamicsModel::identity(5), &frames(2, 0)).unwrap_err();
        assert!(err.to_string().contains("encoder output"));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = Stage3Config {
            lambda_feat: 0.5,
            feature_source: FeatureSource::Cgan,
            ..Default::default()
        };
        let m = CganModel::new(&tiny_spec(), &cfg, 8).unwrap();
        let back = CganModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.generator_params, m.generator_params);
        assert_eq!(back.lambda_feat, 0.5);
        assert_eq!(back.feature_source, FeatureSource::Cgan);
    }
}
