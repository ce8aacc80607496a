//! The unified model: Stage I encoder, the dynamics map as a fully
//! connected layer, and the Stage III generator. Supports one-step
//! prediction, iterated prediction, joint fine-tuning and SSIM-gated
//! augmentation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::ssim;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, ModelKind};
use crate::kv::{KvDoc, KvWriter};
use crate::losses;
use crate::nn::{self, Encoder, Generator, NetworkSpec, Skips};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::{Binding, Bound, NetworkParams};
use crate::stage1::{check_dataset, check_finite, AaeModel, INFER_CHUNK};
use crate::stage2::LinearDynamicsModel;
use crate::stage3::CganModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub finetune_steps: usize,
}

#[derive(Clone, Debug)]
pub struct UnifiedModel {
    pub spec: NetworkSpec,
    pub encoder: Encoder,
    pub encoder_params: NetworkParams<f32>,
    /// `weight [Z, Z]` and `bias [Z]`: the dynamics matrix split into its
    /// linear and constant parts.
    pub dynamics_params: NetworkParams<f32>,
    pub generator: Generator,
    pub generator_params: NetworkParams<f32>,
    pub provenance: Provenance,
}

fn dynamics_layer(dynamics: &LinearDynamicsModel) -> NetworkParams<f32> {
    let (w, b) = dynamics.as_linear_layer();
    let mut p = NetworkParams::new();
    p.insert("weight", w, true);
    p.insert("bias", b, true);
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    /// Size of the fixed batch reused at every step.
    pub batch: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            batch: 64,
            optimizer: OptimizerConfig::default().with_lr(2e-5),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: usize,
    pub rec: f64,
}

/// Gradient norms per component for one fine-tuning loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentGradients {
    pub encoder: f64,
    pub dynamics: f64,
    pub generator: f64,
}

struct Bindings {
    encoder: Binding,
    dynamics: Binding,
    generator: Binding,
}

impl UnifiedModel {
    /// Keeps the encoder, `A` and the generator; drops the decoder and both
    /// discriminators.
    pub fn assemble(aae: &AaeModel, dynamics: &LinearDynamicsModel, cgan: &CganModel) -> Result<Self> {
        if aae.spec != cgan.spec {
            return Err(Error::Spec("AAE and cGAN were built from different network specs".into()));
        }
        let z = aae.spec.latent_dim;
        if dynamics.latent_dim() != z {
            return Err(Error::Boundary {
                boundary: "encoder output -> dynamics input",
                expected: z,
                got: dynamics.latent_dim(),
            });
        }
        let dynamics_params = dynamics_layer(dynamics);
        Ok(UnifiedModel {
            spec: aae.spec.clone(),
            encoder: aae.encoder.clone(),
            encoder_params: aae.encoder_params.clone(),
            dynamics_params,
            generator: cgan.generator.clone(),
            generator_params: cgan.generator_params.clone(),
            provenance: Provenance::default(),
        })
    }

    /// Records the whole chain on `tape` with the supplied bindings.
    fn chain(
        &self,
        tape: &mut Tape<f32>,
        enc: &mut Bound<'_, f32>,
        dynb: &mut Bound<'_, f32>,
        gen: &mut Bound<'_, f32>,
        x: Var,
    ) -> Result<Var> {
        let code = self.encoder.forward(tape, enc, x)?;
        let w = dynb.get(tape, "weight")?;
        let b = dynb.get(tape, "bias")?;
        let shape = tape.value(w)?.shape().to_vec();
        if shape[1] != self.spec.latent_dim {
            return Err(Error::Boundary {
                boundary: "encoder output -> dynamics input",
                expected: self.spec.latent_dim,
                got: shape[1],
            });
        }
        let dhat = tape.linear(code, w, b)?;
        self.generator.forward(tape, gen, dhat, x, Skips::Live)
    }

    /// `generator(A·[encode(x); 1], x)`, eval mode throughout.
    pub fn predict_next(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = check_dataset(&self.spec, images, "predict_next input")?;
        let mut rows = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(images.select_outer(&idx));
            let y = self.chain(
                &mut tape,
                &mut Bound::eval(&self.encoder_params),
                &mut Bound::eval(&self.dynamics_params),
                &mut Bound::eval(&self.generator_params),
                x,
            )?;
            let y = tape.value(y)?;
            rows.extend((0..idx.len()).map(|i| y.index_outer(i)));
        }
        Tensor::stack(&rows.iter().collect::<Vec<_>>())
    }

    /// `k` chained predictions; each step consumes the previous output.
    pub fn iterate(&self, images: &Tensor<f32>, k: usize) -> Result<Vec<Tensor<f32>>> {
        if k == 0 {
            return Err(Error::invalid("iterate", "K must be at least 1"));
        }
        let mut out: Vec<Tensor<f32>> = Vec::with_capacity(k);
        for _ in 0..k {
            let next = self.predict_next(out.last().unwrap_or(images))?;
            if !next.is_finite() {
                return Err(Error::NonFinite {
                    step: out.len(),
                    breakdown: "iterated prediction produced non-finite pixels".into(),
                });
            }
            out.push(next);
        }
        Ok(out)
    }

    fn loss_and_grads(&self, first: &Tensor<f32>, second: &Tensor<f32>) -> Result<(f64, crate::autodiff::Gradients<f32>, Bindings)> {
        let mut tape = Tape::new();
        let x = tape.constant(first.clone());
        let t = tape.constant(second.clone());
        let mut enc = Bound::eval_trainable(&self.encoder_params);
        let mut dynb = Bound::eval_trainable(&self.dynamics_params);
        let mut gen = Bound::eval_trainable(&self.generator_params);
        let pred = self.chain(&mut tape, &mut enc, &mut dynb, &mut gen, x)?;
        let loss = losses::rec_loss(&mut tape, pred, t)?;
        let value = tape.value(loss)?.item() as f64;
        let b = Bindings {
            encoder: enc.finish(),
            dynamics: dynb.finish(),
            generator: gen.finish(),
        };
        let g = tape.backward(loss)?;
        Ok((value, g, b))
    }

    /// Norms of the fine-tuning loss gradient restricted to each component.
    pub fn component_gradients(&self, first: &Tensor<f32>, second: &Tensor<f32>) -> Result<ComponentGradients> {
        let (_, g, b) = self.loss_and_grads(first, second)?;
        let norm = |p: &NetworkParams<f32>, binding: &Binding| -> f64 {
            (0..p.len())
                .filter_map(|i| binding.var(i).and_then(|v| g.get(v)))
                .flat_map(|t| t.data().iter().map(|&x| (x as f64).powi(2)))
                .sum::<f64>()
                .sqrt()
        };
        Ok(ComponentGradients {
            encoder: norm(&self.encoder_params, &b.encoder),
            dynamics: norm(&self.dynamics_params, &b.dynamics),
            generator: norm(&self.generator_params, &b.generator),
        })
    }

    /// Joint descent on the reconstruction loss of the prediction against
    /// the true next frame. Batch norm stays in eval mode and one fixed
    /// batch (drawn from `seed`) is used at every step, so the objective is
    /// a fixed function of the parameters.
    pub fn finetune(&mut self, first: &Tensor<f32>, second: &Tensor<f32>, cfg: &FinetuneConfig, seed: u64) -> Result<Vec<FinetuneRecord>> {
        let n = check_dataset(&self.spec, first, "finetune")?;
        second.expect_shape("finetune target", first.shape())?;
        if n == 0 || cfg.batch == 0 {
            return Err(Error::invalid("finetune", "empty pair set or zero batch size"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(cfg.batch.min(n));
        let (x, t) = (first.select_outer(&order), second.select_outer(&order));
        let mut opts = [(); 3].map(|_| OptimizerState::new(cfg.optimizer));
        let mut history = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let (value, g, b) = self.loss_and_grads(&x, &t)?;
            check_finite(step, &[("rec", value)])?;
            opts[0].step(&mut self.encoder_params, &b.encoder, &g)?;
            opts[1].step(&mut self.dynamics_params, &b.dynamics, &g)?;
            opts[2].step(&mut self.generator_params, &b.generator, &g)?;
            history.push(FinetuneRecord { step, rec: value });
        }
        self.provenance.finetune_steps += cfg.steps;
        Ok(history)
    }

    /// Eval-mode reconstruction loss of the one-step prediction.
    pub fn prediction_loss(&self, first: &Tensor<f32>, second: &Tensor<f32>) -> Result<f64> {
        let pred = self.predict_next(first)?;
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let t = tape.constant(second.clone());
        let l = losses::rec_loss(&mut tape, p, t)?;
        Ok(tape.value(l)?.item() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = KvWriter::default()
            .section("provenance")
            .kv("sources", self.provenance.sources.join(", "))
            .kv("finetune_steps", self.provenance.finetune_steps)
            .finish();
        let mut c = Checkpoint::new(ModelKind::Unified, self.spec.to_kv(), meta);
        c.push_params("encoder", &self.encoder_params);
        c.push_params("dynamics", &self.dynamics_params);
        c.push_params("generator", &self.generator_params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Unified)?;
        let spec = NetworkSpec::from_kv(&KvDoc::parse(&c.spec)?)?;
        let meta = KvDoc::parse(&c.meta)?;
        let mut r = meta.reader("provenance");
        let provenance = Provenance {
            sources: r.get_list("sources", Vec::new())?,
            finetune_steps: r.get("finetune_steps", 0)?,
        };
        let (n, z) = (spec.param_counts(), spec.latent_dim);
        c.ensure_holds(n.encoder + n.generator + z * (z + 1))?;
        // every tensor is overwritten below, so the initializer seed is moot
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (encoder, encoder_params) = nn::build_encoder(&spec, &mut rng)?;
        let (generator, generator_params) = nn::build_cgan_generator(&spec, &mut rng)?;
        let dynamics_params = dynamics_layer(&LinearDynamicsModel::identity(z));
        let mut m = UnifiedModel {
            spec,
            encoder,
            encoder_params,
            dynamics_params,
            generator,
            generator_params,
            provenance: Provenance::default(),
        };
        c.load_params("encoder", &mut m.encoder_params)?;
        c.load_params("dynamics", &mut m.dynamics_params)?;
        c.load_params("generator", &mut m.generator_params)?;
        m.provenance = provenance;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentRow {
    pub input: usize,
    /// 1-based iteration index.
    pub iteration: usize,
    pub ssim: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct AugmentResult {
    /// `(input, iteration, image [C, H, W])` for every accepted candidate.
    pub accepted: Vec<(usize, usize, Tensor<f32>)>,
    pub report: Vec<AugmentRow>,
    /// All candidates, `iterations[k]` is `[N, C, H, W]`.
    pub iterations: Vec<Tensor<f32>>,
}

/// Iterates each input `k` times and keeps candidates whose SSIM to the
/// original lies in `[ssim_lo, ssim_hi]`.
pub fn augment_dataset(model: &UnifiedModel, images: &Tensor<f32>, k: usize, ssim_lo: f64, ssim_hi: f64) -> Result<AugmentResult> {
    if !(0.0 <= ssim_lo && ssim_lo < ssim_hi && ssim_hi <= 1.0) {
        return Err(Error::invalid(
            "augment_dataset",
            format!("need 0 <= ssim_lo < ssim_hi <= 1, got [{ssim_lo}, {ssim_hi}]"),
        ));
    }
    let n = check_dataset(&model.spec, images, "augment_dataset")?;
    let iterations = model.iterate(images, k)?;
    let mut accepted = Vec::new();
    let mut report = Vec::with_capacity(n * k);
    for i in 0..n {
        let original = images.index_outer(i);
        for (j, it) in iterations.iter().enumerate() {
            let cand = it.index_outer(i);
            let s = ssim(&cand, &original)?;
            let ok = ssim_lo <= s && s <= ssim_hi;
            report.push(AugmentRow {
                input: i,
                iteration: j + 1,
                ssim: s,
                accepted: ok,
            });
            if ok {
                accepted.push((i, j + 1, cand));
            }
        }
    }
    Ok(AugmentResult {
        accepted,
        report,
        iterations,
    })
}
