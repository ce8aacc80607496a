//! The run config shared by every training command.
//!
//! ```text
//! [network]
//! latent_dim = 64
//!
//! [stage1]
//! lambda_i = 30
//! steps = 500
//!
//! [run]
//! seed = 7
//! ```
//!
//! Missing keys take their defaults. `stage3.lambda_iii` follows
//! `stage1.lambda_i` and may only be given if it agrees with it.

use std::path::Path;

use lataug::kv::{KvDoc, KvWriter, SectionReader};
use lataug::nn::NetworkSpec;
use lataug::optim::{OptimizerConfig, OptimizerKind};
use lataug::pipeline::FinetuneConfig;
use lataug::stage1::Stage1Config;
use lataug::stage2::RidgeOptions;
use lataug::stage3::Stage3Config;
use lataug::{Error, Result};

pub const SECTIONS: &[&str] = &["network", "optimizer", "stage1", "stage2", "stage3", "finetune", "data", "run"];

/// File name of the resolved config written beside every command's outputs.
pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub ssim_lo: f64,
    pub ssim_hi: f64,
    pub max_gap: usize,
    /// Trailing fraction of every video held out from training.
    pub holdout: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            ssim_lo: 0.4,
            ssim_hi: 0.98,
            max_gap: 1,
            holdout: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    /// Kernels run single-threaded with a fixed reduction order, so every
    /// run is deterministic; the flag is accepted and echoed.
    pub deterministic: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            seed: 0,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkSpec,
    pub stage1: Stage1Config,
    pub stage2: RidgeOptions,
    pub stage3: Stage3Config,
    pub finetune: FinetuneConfig,
    pub data: DataSettings,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkSpec::desk(),
            stage1: Stage1Config::default(),
            stage2: RidgeOptions::default(),
            stage3: Stage3Config::default(),
            finetune: FinetuneConfig::default(),
            data: DataSettings::default(),
            run: RunSettings::default(),
        }
    }
}

fn bad(line: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Config {
        line: line.unwrap_or(0),
        msg: msg.into(),
    }
}

/// Reads a stage's step count, batch size and learning rate on top of the
/// shared optimizer settings.
fn stage_opt(r: &mut SectionReader<'_>, shared: OptimizerConfig, default_lr: f64) -> Result<OptimizerConfig> {
    let learning_rate: f64 = r.get("learning_rate", default_lr)?;
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(bad(
            r.line_of("learning_rate"),
            format!("learning_rate must be finite and >= 0, got {learning_rate}"),
        ));
    }
    Ok(OptimizerConfig { learning_rate, ..shared })
}

fn positive(r: &SectionReader<'_>, key: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(bad(r.line_of(key), format!("`{key}` must be at least 1")));
    }
    Ok(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        doc.check_sections(SECTIONS)?;
        let d = RunConfig::default();
        let network = NetworkSpec::from_kv(&doc)?;

        let mut r = doc.reader("optimizer");
        let shared = OptimizerConfig {
            kind: r.get("kind", OptimizerKind::Adam)?,
            beta1: r.get("beta1", d.stage1.optimizer.beta1)?,
            beta2: r.get("beta2", d.stage1.optimizer.beta2)?,
            epsilon: r.get("epsilon", d.stage1.optimizer.epsilon)?,
            learning_rate: 0.0,
        };
        r.finish()?;

        let mut r = doc.reader("stage1");
        let stage1 = Stage1Config {
            lambda_i: r.get("lambda_i", d.stage1.lambda_i)?,
            prior_sigma: r.get("prior_sigma", d.stage1.prior_sigma)?,
            batch: r.get("batch", d.stage1.batch)?,
            steps: r.get("steps", d.stage1.steps)?,
            optimizer: stage_opt(&mut r, shared, d.stage1.optimizer.learning_rate)?,
        };
        positive(&r, "batch", stage1.batch)?;
        if !(stage1.prior_sigma > 0.0) {
            return Err(bad(r.line_of("prior_sigma"), "prior_sigma must be positive"));
        }
        if !(stage1.lambda_i >= 0.0) {
            return Err(bad(r.line_of("lambda_i"), "lambda_i must be >= 0"));
        }
        r.finish()?;

        let mut r = doc.reader("stage2");
        let stage2 = RidgeOptions {
            lambda_rel: r.get("lambda_ii", d.stage2.lambda_rel)?,
            standardize: r.get("standardize", d.stage2.standardize)?,
        };
        if !(stage2.lambda_rel >= 0.0) {
            return Err(bad(r.line_of("lambda_ii"), "lambda_ii must be >= 0"));
        }
        r.finish()?;

        let mut r = doc.reader("stage3");
        let lambda_iii: f64 = r.get("lambda_iii", stage1.lambda_i)?;
        if lambda_iii != stage1.lambda_i {
            return Err(bad(
                r.line_of("lambda_iii"),
                format!("lambda_iii = {lambda_iii} must equal stage1.lambda_i = {}", stage1.lambda_i),
            ));
        }
        let stage3 = Stage3Config {
            lambda_iii,
            lambda_feat: r.get("lambda_iii_feat", d.stage3.lambda_feat)?,
            feature_source: r.get("feature_source", d.stage3.feature_source)?,
            batch: r.get("batch", d.stage3.batch)?,
            steps: r.get("steps", d.stage3.steps)?,
            optimizer: stage_opt(&mut r, shared, d.stage3.optimizer.learning_rate)?,
        };
        positive(&r, "batch", stage3.batch)?;
        r.finish()?;

        let mut r = doc.reader("finetune");
        let finetune = FinetuneConfig {
            steps: r.get("steps", d.finetune.steps)?,
            batch: r.get("batch", d.finetune.batch)?,
            optimizer: stage_opt(&mut r, shared, d.finetune.optimizer.learning_rate)?,
        };
        positive(&r, "batch", finetune.batch)?;
        r.finish()?;

        let mut r = doc.reader("data");
        let data = DataSettings {
            ssim_lo: r.get("ssim_lo", d.data.ssim_lo)?,
            ssim_hi: r.get("ssim_hi", d.data.ssim_hi)?,
            max_gap: r.get("max_gap", d.data.max_gap)?,
            holdout: r.get("holdout", d.data.holdout)?,
        };
        if !(0.0 <= data.ssim_lo && data.ssim_lo < data.ssim_hi && data.ssim_hi <= 1.0) {
            return Err(bad(
                r.line_of("ssim_lo").or(r.line_of("ssim_hi")),
                format!("need 0 <= ssim_lo < ssim_hi <= 1, got [{}, {}]", data.ssim_lo, data.ssim_hi),
            ));
        }
        positive(&r, "max_gap", data.max_gap)?;
        if !(0.0..1.0).contains(&data.holdout) {
            return Err(bad(
                r.line_of("holdout"),
                format!("holdout must be in [0, 1), got {}", data.holdout),
            ));
        }
        r.finish()?;

        let mut r = doc.reader("run");
        let run = RunSettings {
            seed: r.get("seed", d.run.seed)?,
            deterministic: r.get("deterministic", d.run.deterministic)?,
        };
        r.finish()?;

        Ok(RunConfig {
            network,
            stage1,
            stage2,
            stage3,
            finetune,
            data,
            run,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        RunConfig::parse(&text)
    }

    /// Every setting, defaults included, in the input format.
    pub fn to_kv(&self) -> String {
        let o = self.stage1.optimizer;
        let mut w = KvWriter::default();
        w.section("optimizer")
            .kv("kind", o.kind)
            .kv("beta1", o.beta1)
            .kv("beta2", o.beta2)
            .kv("epsilon", o.epsilon);
        w.section("stage1")
            .kv("lambda_i", self.stage1.lambda_i)
            .kv("prior_sigma", self.stage1.prior_sigma)
            .kv("batch", self.stage1.batch)
            .kv("steps", self.stage1.steps)
            .kv("learning_rate", o.learning_rate);
        w.section("stage2")
            .kv("lambda_ii", self.stage2.lambda_rel)
            .kv("standardize", self.stage2.standardize);
        w.section("stage3")
            .kv("lambda_iii", self.stage3.lambda_iii)
            .kv("lambda_iii_feat", self.stage3.lambda_feat)
            .kv("feature_source", self.stage3.feature_source)
            .kv("batch", self.stage3.batch)
            .kv("steps", self.stage3.steps)
            .kv("learning_rate", self.stage3.optimizer.learning_rate);
        w.section("finetune")
            .kv("steps", self.finetune.steps)
            .kv("batch", self.finetune.batch)
            .kv("learning_rate", self.finetune.optimizer.learning_rate);
        w.section("data")
            .kv("ssim_lo", self.data.ssim_lo)
            .kv("ssim_hi", self.data.ssim_hi)
            .kv("max_gap", self.data.max_gap)
            .kv("holdout", self.data.holdout);
        w.section("run")
            .kv("seed", self.run.seed)
            .kv("deterministic", self.run.deterministic);
        format!("{}\n{}", self.network.to_kv(), w.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_of(e: Error) -> usize {
        match e {
            Error::Config { line, .. } => line,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = "[stage1]\nsteps = 5\n\n[stage2]\nlambda_ii = 0.01\nlamda_ii = 0.1\n";
        assert_eq!(line_of(RunConfig::parse(text).unwrap_err()), 6);
        assert_eq!(line_of(RunConfig::parse("[stage9]\n").unwrap_err()), 1);
        assert_eq!(line_of(RunConfig::parse("# c\n[network]\nlatent = 3\n").unwrap_err()), 3);
    }

    #[test]
    fn lambda_iii_follows_lambda_i() {
        let c = RunConfig::parse("[stage1]\nlambda_i = 30\n").unwrap();
        assert_eq!(c.stage3.lambda_iii, 30.0);
        assert!(RunConfig::parse("[stage1]\nlambda_i = 30\n[stage3]\nlambda_iii = 30\n").is_ok());
        let e = RunConfig::parse("[stage1]\nlambda_i = 30\n[stage3]\nlambda_iii = 10\n").unwrap_err();
        assert_eq!(line_of(e), 4);
    }

    #[test]
    fn invalid_values_rejected() {
        assert_eq!(line_of(RunConfig::parse("[data]\nssim_lo = 0.9\nssim_hi = 0.5\n").unwrap_err()), 2);
        assert_eq!(line_of(RunConfig::parse("[stage1]\nbatch = 0\n").unwrap_err()), 2);
        assert_eq!(line_of(RunConfig::parse("[run]\nseed = -1\n").unwrap_err()), 2);
        assert!(RunConfig::parse("[optimizer]\nkind = rmsprop\n").is_err());
    }

    proptest! {
        #[test]
        fn resolved_config_roundtrips(
            lam in 0.0f64..100.0,
            lr in 1e-6f64..1e-1,
            steps in 1usize..1000,
            seed in any::<u64>(),
            lo in 0.0f64..0.5,
            gap in 1usize..4,
            sgd in any::<bool>(),
        ) {
            let mut c = RunConfig::default();
            c.stage1.lambda_i = lam;
            c.stage3.lambda_iii = lam;
            c.stage1.steps = steps;
            c.stage3.optimizer.learning_rate = lr;
            c.run.seed = seed;
            c.data.ssim_lo = lo;
            c.data.max_gap = gap;
            if sgd {
                for o in [&mut c.stage1.optimizer, &mut c.stage3.optimizer, &mut c.finetune.optimizer] {
                    o.kind = OptimizerKind::Sgd;
                }
            }
            let back = RunConfig::parse(&c.to_kv()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
