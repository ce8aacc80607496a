//! Stage I: the adversarial autoencoder. The encoder/decoder pair learns to
//! reconstruct frames while a discriminator on (latent, image) pairs pulls
//! the codes toward a Gaussian prior.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, Tape};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, ModelKind};
use crate::kv::{KvDoc, KvWriter};
use crate::losses;
use crate::nn::{self, AaeDiscriminator, Decoder, Encoder, NetworkSpec};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::{Bound, NetworkParams};
use crate::tensor::Tensor;

/// Rows processed per forward pass during inference.
pub(crate) const INFER_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub lambda_i: f64,
    pub prior_sigma: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lambda_i: 10.0,
            prior_sigma: 1.0,
            batch: 16,
            steps: 500,
            optimizer: OptimizerConfig::default().with_lr(1e-3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AaeModel {
    pub spec: NetworkSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: AaeDiscriminator,
    pub encoder_params: NetworkParams<f32>,
    pub decoder_params: NetworkParams<f32>,
    pub discriminator_params: NetworkParams<f32>,
    pub prior_sigma: f64,
    pub lambda_i: f64,
}

/// One row of the Stage I loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Record {
    pub step: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_rec: f64,
}

/// Epoch-wise shuffled index stream; batches may straddle epochs.
pub struct Batcher {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        Batcher {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub(crate) fn check_finite(step: usize, parts: &[(&str, f64)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let breakdown = parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ");
    Err(Error::NonFinite { step, breakdown })
}

pub(crate) fn check_dataset(spec: &NetworkSpec, images: &Tensor<f32>, what: &'static str) -> Result<usize> {
    match *images.shape() {
        [n, c, h, w] if c == spec.channels && h == spec.height && w == spec.width => Ok(n),
        _ => Err(Error::Shape {
            op: what,
            expected: spec.image_shape(images.shape()[0]).to_vec(),
            got: images.shape().to_vec(),
        }),
    }
}

impl AaeModel {
    pub fn new(spec: &NetworkSpec, prior_sigma: f64, lambda_i: f64, seed: u64) -> Result<Self> {
        if !(prior_sigma > 0.0) || !(lambda_i >= 0.0) {
            return Err(Error::invalid(
                "aae",
                format!("need prior_sigma > 0 and lambda_i >= 0, got {prior_sigma}, {lambda_i}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (encoder, encoder_params) = nn::build_encoder(spec, &mut rng)?;
        let (decoder, decoder_params) = nn::build_decoder(spec, &mut rng)?;
        let (discriminator, discriminator_params) = nn::build_aae_discriminator(spec, &mut rng)?;
        Ok(AaeModel {
            spec: spec.clone(),
            encoder,
            decoder,
            discriminator,
            encoder_params,
            decoder_params,
            discriminator_params,
            prior_sigma,
            lambda_i,
        })
    }

    /// Latent codes `[N, Z]`, eval-mode batch norm.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_dataset(&self.spec, images, "encode")?;
        map_chunks(images, |x| {
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let z = self.encoder.forward(&mut tape, &mut Bound::eval(&self.encoder_params), v)?;
            Ok(tape.value(z)?.clone())
        })
    }

    pub fn decode(&self, latents: &Tensor<f32>) -> Result<Tensor<f32>> {
        map_chunks(latents, |z| {
            let mut tape = Tape::new();
            let v = tape.constant(z);
            let y = self.decoder.forward(&mut tape, &mut Bound::eval(&self.decoder_params), v)?;
            Ok(tape.value(y)?.clone())
        })
    }

    /// Mean reconstruction loss over `images` in eval mode.
    pub fn reconstruction_loss(&self, images: &Tensor<f32>) -> Result<f64> {
        let n = check_dataset(&self.spec, images, "reconstruction_loss")?;
        let mut total = 0.0;
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let x = images.select_outer(&idx);
            let mut tape = Tape::new();
            let v = tape.constant(x);
            let z = self.encoder.forward(&mut tape, &mut Bound::eval(&self.encoder_params), v)?;
            let y = self.decoder.forward(&mut tape, &mut Bound::eval(&self.decoder_params), z)?;
            let l = losses::rec_loss(&mut tape, y, v)?;
            total += tape.value(l)?.item() as f64 * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = KvWriter::default()
            .section("stage1")
            .kv("prior_sigma", self.prior_sigma)
            .kv("lambda_i", self.lambda_i)
            .finish();
        let mut c = Checkpoint::new(ModelKind::Aae, self.spec.to_kv(), meta);
        c.push_params("encoder", &self.encoder_params);
        c.push_params("decoder", &self.decoder_params);
        c.push_params("discriminator", &self.discriminator_params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Aae)?;
        let spec = NetworkSpec::from_kv(&KvDoc::parse(&c.spec)?)?;
        let n = spec.param_counts();
        c.ensure_holds(n.encoder + n.decoder + n.aae_discriminator)?;
        let meta = KvDoc::parse(&c.meta)?;
        let mut r = meta.reader("stage1");
        let prior_sigma = r.get("prior_sigma", 1.0)?;
        let lambda_i = r.get("lambda_i", 10.0)?;
        let mut m = AaeModel::new(&spec, prior_sigma, lambda_i, 0)?;
        c.load_params("encoder", &mut m.encoder_params)?;
        c.load_params("decoder", &mut m.decoder_params)?;
        c.load_params("discriminator", &mut m.discriminator_params)?;
        Ok(m)
    }
}

/// Applies `f` to consecutive row chunks and stacks the results.
pub(crate) fn map_chunks(x: &Tensor<f32>, mut f: impl FnMut(Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let mut rows: Vec<Tensor<f32>> = Vec::with_capacity(n);
    for start in (0..n).step_by(INFER_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
        let out = f(x.select_outer(&idx))?;
        rows.extend((0..idx.len()).map(|i| out.index_outer(i)));
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    Tensor::stack(&refs)
}

/// Trains a fresh AAE on `images` (`[N, C, H, W]` in `[-1, 1]`).
pub fn train_stage1(images: &Tensor<f32>, spec: &NetworkSpec, cfg: &Stage1Config, seed: u64) -> Result<(AaeModel, Vec<Stage1Record>)> {
    let mut model = AaeModel::new(spec, cfg.prior_sigma, cfg.lambda_i, seed)?;
    let history = continue_stage1(&mut model, images, cfg, seed)?;
    Ok((model, history))
}

/// Runs `cfg.steps` alternating discriminator/autoencoder updates.
pub fn continue_stage1(model: &mut AaeModel, images: &Tensor<f32>, cfg: &Stage1Config, seed: u64) -> Result<Vec<Stage1Record>> {
    let n = check_dataset(&model.spec, images, "train_stage1")?;
    if n == 0 || cfg.batch == 0 {
        return Err(Error::invalid("train_stage1", "empty dataset or zero batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4731);
    let mut batcher = Batcher::new(n, seed.wrapping_add(1));
    let mut opt_e = OptimizerState::new(cfg.optimizer);
    let mut opt_dec = OptimizerState::new(cfg.optimizer);
    let mut opt_d = OptimizerState::new(cfg.optimizer);
    let z_dim = model.spec.latent_dim;
    let lambda = model.lambda_i as f32;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = batcher.next_batch(cfg.batch);
        let y = images.select_outer(&idx);
        let prior = Tensor::<f32>::randn(&[idx.len(), z_dim], model.prior_sigma, &mut rng);

        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let mut eb = Bound::new(&mut model.encoder_params, BnMode::Train, true);
        let mut db = Bound::new(&mut model.decoder_params, BnMode::Train, true);
        let code = model.encoder.forward(&mut tape, &mut eb, yv)?;
        let recon = model.decoder.forward(&mut tape, &mut db, code)?;

        // discriminator update on detached fakes
        let d_loss = {
            let mut dt = Tape::new();
            let real_z = dt.constant(prior);
            let real_y = dt.constant(y);
            let fake_z = dt.constant(tape.value(code)?.clone());
            let fake_y = dt.constant(tape.value(recon)?.clone());
            let mut b = Bound::new(&mut model.discriminator_params, BnMode::Train, true);
            let real = model.discriminator.forward(&mut dt, &mut b, real_z, real_y)?;
            let fake = model.discriminator.forward(&mut dt, &mut b, fake_z, fake_y)?;
            let loss = losses::discriminator_loss(&mut dt, real.logit, fake.logit)?;
            let value = dt.value(loss)?.item() as f64;
            check_finite(step, &[("d_loss", value)])?;
            let binding = b.finish();
            let g = dt.backward(loss)?;
            opt_d.step(&mut model.discriminator_params, &binding, &g)?;
            value
        };

        let mut fb = Bound::new(&mut model.discriminator_params, BnMode::Train, false);
        let scored = model.discriminator.forward(&mut tape, &mut fb, code, recon)?;
        let adv = losses::generator_adv_loss(&mut tape, scored.logit)?;
        let rec = losses::rec_loss(&mut tape, recon, yv)?;
        let weighted = tape.scale(rec, lambda)?;
        let total = tape.add(adv, weighted)?;
        let (g_adv, g_rec) = (tape.value(adv)?.item() as f64, tape.value(rec)?.item() as f64);
        check_finite(step, &[("d_loss", d_loss), ("g_adv", g_adv), ("g_rec", g_rec)])?;
        let (eb, db) = (eb.finish(), db.finish());
        let g = tape.backward(total)?;
        opt_e.step(&mut model.encoder_params, &eb, &g)?;
        opt_dec.step(&mut model.decoder_params, &db, &g)?;
        history.push(Stage1Record {
            step,
            d_loss,
            g_adv,
            g_rec,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
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

    fn data(n: usize) -> Tensor<f32> {
        Tensor::rand_uniform(&[n, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(5, 1);
        let mut first: Vec<usize> = b.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next_batch(7).len(), 7);
    }

    #[test]
    fn zero_steps_leaves_initialization() {
        let spec = tiny_spec();
        let cfg = Stage1Config {
            steps: 0,
            ..Default::default()
        };
        let (m, h) = train_stage1(&data(4), &spec, &cfg, 11).unwrap();
        let fresh = AaeModel::new(&spec, 1.0, 10.0, 11).unwrap();
        assert!(h.is_empty());
        assert_eq!(m.encoder_params, fresh.encoder_params);
        assert_eq!(m.decoder_params, fresh.decoder_params);
        assert_eq!(m.discriminator_params, fresh.discriminator_params);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let spec = tiny_spec();
        let cfg = Stage1Config {
            steps: 3,
            batch: 4,
            ..Default::default()
        };
        let (a, ha) = train_stage1(&data(6), &spec, &cfg, 5).unwrap();
        let (b, hb) = train_stage1(&data(6), &spec, &cfg, 5).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.encoder_params, b.encoder_params);
        assert_eq!(a.discriminator_params, b.discriminator_params);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = AaeModel::new(&tiny_spec(), 1.0, 10.0, 0).unwrap();
        let x = data(3);
        let z = m.encode(&x).unwrap();
        assert_eq!(z.shape(), &[3, 8]);
        assert_eq!(z, m.encode(&x).unwrap());
        assert!(m.encode(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn checkpoint_reproduces_encode() {
        let m = AaeModel::new(&tiny_spec(), 0.5, 3.0, 9).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = AaeModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.prior_sigma, 0.5);
        assert_eq!(back.lambda_i, 3.0);
        let x = data(2);
        let (a, b) = (m.encode(&x).unwrap(), back.encode(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AaeModel::new(&tiny_spec(), 0.0, 1.0, 0).is_err());
        assert!(AaeModel::new(&tiny_spec(), 1.0, -1.0, 0).is_err());
    }
}
