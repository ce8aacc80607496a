//! One function per subcommand. Each writes its outputs into a directory
//! along with the resolved config it ran with.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lataug::analysis::{cluster_separation, codes_matrix, pca_video_variance, spectrum_report};
use lataug::data::{
    holdout_cut, load_frames, load_videos, save_frame_png, split_pairs, stack_frames, stack_pairs, synth_video, FramePair, FrameSequence,
    MotionKind,
};
use lataug::io::Checkpoint;
use lataug::kv::KvWriter;
use lataug::pipeline::{augment_dataset, UnifiedModel};
use lataug::stage1::{train_stage1, AaeModel};
use lataug::stage2::{fit_dynamics, pairs_from_tensors, prediction_mse, LatentPairSet, LinearDynamicsModel, PairMeta};
use lataug::stage3::{train_stage3, CganModel};
use lataug::{Error, Result, Tensor};

use crate::config::{RunConfig, RESOLVED_NAME};

pub const AAE_FILE: &str = "aae.ckpt";
pub const DYNAMICS_FILE: &str = "dynamics.ckpt";
pub const CGAN_FILE: &str = "cgan.ckpt";
pub const UNIFIED_FILE: &str = "unified.ckpt";

/// Per-frame amplitude used when `--amplitude` is not given.
pub fn default_amplitude(kind: MotionKind) -> f64 {
    match kind {
        MotionKind::Translate | MotionKind::Mixed => 2.5,
        MotionKind::Rotate => 0.25,
        MotionKind::Scale => 0.02,
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Data {
        path: out.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::Data { path, msg: e.to_string() })
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    write(out.join(RESOLVED_NAME), &cfg.to_kv())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn synth_data(kind: MotionKind, length: usize, resolution: usize, amplitude: f64, seed: u64, out: &Path) -> Result<()> {
    let video = synth_video(kind, length, resolution, amplitude, seed)?;
    prepare_out(out)?;
    for (i, f) in video.sequence.frames.iter().enumerate() {
        save_frame_png(&out.join(format!("frame_{i:06}.png")), f)?;
    }
    let mut csv = String::from("frame,dx,angle,scale\n");
    for (i, m) in video.motion.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{},{}", m.dx, m.angle, m.scale);
    }
    write(out.join("motion.csv"), &csv)?;
    let echo = KvWriter::default()
        .section("synth")
        .kv("kind", kind)
        .kv("length", length)
        .kv("resolution", resolution)
        .kv("amplitude", amplitude)
        .kv("seed", seed)
        .finish();
    write(out.join(RESOLVED_NAME), &echo)
}

/// Training frames of every video: those before its hold-out cut.
fn training_frames(videos: &[FrameSequence], cfg: &RunConfig) -> Result<Tensor<f32>> {
    let frames: Vec<Tensor<f32>> = videos
        .iter()
        .flat_map(|v| v.frames[..holdout_cut(v.len(), cfg.data.holdout)].iter().cloned())
        .collect();
    if frames.is_empty() {
        return Err(Error::invalid("training data", "no frames left after the hold-out split"));
    }
    stack_frames(&frames)
}

/// `(train, held_out)` pairs over all videos.
fn split_all(videos: &[FrameSequence], cfg: &RunConfig) -> Result<(Vec<FramePair>, Vec<FramePair>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for v in videos {
        let pairs = lataug::data::extract_pairs(v, cfg.data.ssim_lo, cfg.data.ssim_hi, cfg.data.max_gap)?;
        let (a, b) = split_pairs(pairs, holdout_cut(v.len(), cfg.data.holdout));
        train.extend(a);
        test.extend(b);
    }
    if train.is_empty() {
        return Err(Error::invalid("frame pairs", "no training pairs pass the SSIM filter"));
    }
    Ok((train, test))
}

fn encode_pairs(aae: &AaeModel, pairs: &[FramePair]) -> Result<LatentPairSet> {
    let (a, b) = stack_pairs(pairs)?;
    let meta = pairs
        .iter()
        .map(|p| PairMeta {
            sequence: p.sequence.clone(),
            gap: p.gap,
        })
        .collect();
    pairs_from_tensors(&aae.encode(&a)?, &aae.encode(&b)?, meta)
}

fn load_aae(path: &Path) -> Result<AaeModel> {
    AaeModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_dynamics(path: &Path) -> Result<LinearDynamicsModel> {
    LinearDynamicsModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn loss_csv<R>(header: &str, rows: &[R], fmt: impl Fn(&R) -> String) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&fmt(r));
        s.push('\n');
    }
    s
}

pub fn train_stage1_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let videos = load_videos(data)?;
    let x = training_frames(&videos, cfg)?;
    prepare_out(out)?;
    write_resolved(out, cfg)?;
    let (model, history) = train_stage1(&x, &cfg.network, &cfg.stage1, cfg.run.seed)?;
    model.to_checkpoint().save(&out.join(AAE_FILE))?;
    write(
        out.join("stage1_loss.csv"),
        &loss_csv("step,d_loss,g_adv,g_rec", &history, |r| {
            format!("{},{},{},{}", r.step, r.d_loss, r.g_adv, r.g_rec)
        }),
    )
}

pub fn fit_stage2_cmd(cfg: &RunConfig, aae: &Path, videos: &Path, out: &Path) -> Result<()> {
    let model = load_aae(aae)?;
    let videos = load_videos(videos)?;
    let (train, test) = split_all(&videos, cfg)?;
    prepare_out(out)?;
    write_resolved(out, cfg)?;
    let train_set = encode_pairs(&model, &train)?;
    let dynamics = fit_dynamics(&train_set, cfg.stage2)?;
    let mut report = String::from("split,pairs,mse_dynamics,mse_identity,lambda_ii,lambda_abs\n");
    let mut row = |name: &str, set: &LatentPairSet| {
        let (p, i) = prediction_mse(&dynamics, set);
        let _ = writeln!(report, "{name},{},{p},{i},{},{}", set.len(), cfg.stage2.lambda_rel, dynamics.lambda);
    };
    row("train", &train_set);
    if !test.is_empty() {
        row("held_out", &encode_pairs(&model, &test)?);
    }
    let meta = KvWriter::default()
        .section("source")
        .kv("aae", file_name(aae))
        .kv("lambda_ii", cfg.stage2.lambda_rel)
        .finish();
    dynamics
        .to_checkpoint(model.spec.to_kv(), &format!("\n{meta}"))
        .save(&out.join(DYNAMICS_FILE))?;
    write(out.join("stage2_report.csv"), &report)
}

pub fn train_stage3_cmd(cfg: &RunConfig, aae: &Path, dynamics: &Path, videos: &Path, out: &Path) -> Result<()> {
    let aae_model = load_aae(aae)?;
    let dyn_model = load_dynamics(dynamics)?;
    let videos = load_videos(videos)?;
    let (train, _) = split_all(&videos, cfg)?;
    prepare_out(out)?;
    write_resolved(out, cfg)?;
    let (a, b) = stack_pairs(&train)?;
    let (model, history) = train_stage3(&a, &b, &aae_model, &dyn_model, &cfg.stage3, cfg.run.seed)?;
    model.to_checkpoint().save(&out.join(CGAN_FILE))?;
    write(
        out.join("stage3_loss.csv"),
        &loss_csv("step,d_loss,g_adv,g_rec", &history, |r| {
            format!("{},{},{},{}", r.step, r.d_loss, r.g_adv, r.g_rec)
        }),
    )
}

pub fn finetune_cmd(cfg: &RunConfig, aae: &Path, dynamics: &Path, cgan: &Path, videos: &Path, out: &Path) -> Result<()> {
    let aae_model = load_aae(aae)?;
    let dyn_model = load_dynamics(dynamics)?;
    let cgan_model = CganModel::from_checkpoint(&Checkpoint::load(cgan)?)?;
    let videos = load_videos(videos)?;
    let (train, _) = split_all(&videos, cfg)?;
    prepare_out(out)?;
    write_resolved(out, cfg)?;
    let mut unified = UnifiedModel::assemble(&aae_model, &dyn_model, &cgan_model)?;
    unified.provenance.sources = [aae, dynamics, cgan].iter().map(|p| file_name(p)).collect();
    let (a, b) = stack_pairs(&train)?;
    let history = unified.finetune(&a, &b, &cfg.finetune, cfg.run.seed)?;
    unified.to_checkpoint().save(&out.join(UNIFIED_FILE))?;
    write(
        out.join("finetune_loss.csv"),
        &loss_csv("step,rec", &history, |r| format!("{},{}", r.step, r.rec)),
    )
}

/// Rows of `original | iteration 1 | … | iteration K`, one row per input.
fn grid(images: &Tensor<f32>, iterations: &[Tensor<f32>]) -> Tensor<f32> {
    let (n, c, h, w) = images.dims4("grid").expect("validated by augment");
    let cols = iterations.len() + 1;
    let (gh, gw) = (n * h, cols * w);
    let mut out = Tensor::zeros(&[c, gh, gw]);
    let data = out.data_mut();
    for col in 0..cols {
        let src = if col == 0 { images } else { &iterations[col - 1] };
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let s = ((i * c + ch) * h + y) * w;
                    let d = (ch * gh + i * h + y) * gw + col * w;
                    data[d..d + w].copy_from_slice(&src.data()[s..s + w]);
                }
            }
        }
    }
    out
}

pub fn augment_cmd(model: &Path, images: &Path, k: usize, ssim_lo: f64, ssim_hi: f64, out: &Path) -> Result<()> {
    let unified = UnifiedModel::from_checkpoint(&Checkpoint::load(model)?)?;
    let seq = load_frames(images)?;
    let x = stack_frames(&seq.frames)?;
    let result = augment_dataset(&unified, &x, k, ssim_lo, ssim_hi)?;
    prepare_out(out)?;
    let echo = KvWriter::default()
        .section("augment")
        .kv("model", file_name(model))
        .kv("iterations", k)
        .kv("ssim_lo", ssim_lo)
        .kv("ssim_hi", ssim_hi)
        .finish();
    write(out.join(RESOLVED_NAME), &echo)?;
    let accepted_dir = out.join("accepted");
    prepare_out(&accepted_dir)?;
    for (i, j, img) in &result.accepted {
        save_frame_png(&accepted_dir.join(format!("input{i:04}_iter{j:02}.png")), img)?;
    }
    let mut csv = String::from("input,iteration,ssim,accepted\n");
    for r in &result.report {
        let _ = writeln!(csv, "{},{},{},{}", r.input, r.iteration, r.ssim, r.accepted as u8);
    }
    write(out.join("retention.csv"), &csv)?;
    save_frame_png(&out.join("grid.png"), &grid(&x, &result.iterations))
}

pub fn analyze_variance_cmd(aae: &Path, videos: &Path, target: f64, probe: Option<&str>, out: &Path) -> Result<()> {
    let model = load_aae(aae)?;
    let videos = load_videos(videos)?;
    let mut entries = Vec::with_capacity(videos.len());
    let mut codes = Vec::with_capacity(videos.len());
    for v in &videos {
        let c = codes_matrix(&model.encode(&stack_frames(&v.frames)?)?)?;
        entries.push(pca_video_variance(&v.id, &c, target)?);
        codes.push(c);
    }
    let report = spectrum_report(entries, target)?;
    prepare_out(out)?;
    let echo = KvWriter::default()
        .section("analyze")
        .kv("aae", file_name(aae))
        .kv("target", target)
        .kv("probe_video", probe.unwrap_or(""))
        .finish();
    write(out.join(RESOLVED_NAME), &echo)?;

    let mut csv = String::from("video,component,eigenvalue,cumulative\n");
    for e in &report.entries {
        for (k, (ev, cu)) in e.eigenvalues.iter().zip(&e.cumulative).enumerate() {
            let _ = writeln!(csv, "{},{},{ev},{cu}", e.id, k + 1);
        }
    }
    for (k, cu) in report.mean_curve.iter().enumerate() {
        let _ = writeln!(csv, "mean,{},,{cu}", k + 1);
    }
    write(out.join("spectrum.csv"), &csv)?;

    let width = report.entries.iter().map(|e| e.id.len()).max().unwrap_or(5).max(5);
    let mut table = format!("{:<width$}  k*({target})\n", "video");
    for e in &report.entries {
        let _ = writeln!(table, "{:<width$}  {}", e.id, e.k_star);
    }
    let mean_k = report
        .mean_curve
        .iter()
        .position(|&c| c >= target - 1e-12)
        .map_or(report.mean_curve.len(), |i| i + 1);
    let _ = writeln!(table, "{:<width$}  {mean_k}", "mean");
    if let Some(id) = probe {
        let Some(pi) = videos.iter().position(|v| v.id == id) else {
            return Err(Error::Data {
                path: PathBuf::from(id),
                msg: "probe video not among the inputs".into(),
            });
        };
        let rest: Vec<usize> = (0..videos.len()).filter(|&i| i != pi).collect();
        if rest.is_empty() {
            return Err(Error::invalid("analyze-variance", "cluster separation needs at least two videos"));
        }
        let z = codes[pi].ncols();
        let rows: usize = rest.iter().map(|&i| codes[i].nrows()).sum();
        let mut others = lataug::analysis::DMatrix::zeros(rows, z);
        let mut r = 0;
        for &i in &rest {
            others.rows_mut(r, codes[i].nrows()).copy_from(&codes[i]);
            r += codes[i].nrows();
        }
        let s = cluster_separation(&codes[pi], &others)?;
        let _ = writeln!(table, "\ncluster separation of {id} against the other videos: {s}");
    }
    write(out.join("spectrum.txt"), &table)
}
