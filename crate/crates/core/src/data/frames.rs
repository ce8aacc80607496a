use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ssim::ssim;

/// Ordered frames of one video, each `[C, H, W]` in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Tensor<f32>>,
    pub source: String,
}

impl FrameSequence {
    pub fn new(id: impl Into<String>, frames: Vec<Tensor<f32>>, source: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if let Some(first) = frames.first() {
            if first.ndim() != 3 {
                return Err(Error::invalid(
                    "frame sequence",
                    format!("frames must be [C, H, W], got {:?}", first.shape()),
                ));
            }
            for f in &frames {
                f.expect_shape("frame sequence", first.shape())?;
            }
        }
        Ok(FrameSequence {
            id,
            frames,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Two frames `gap` steps apart from one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub first: Tensor<f32>,
    pub second: Tensor<f32>,
    pub gap: usize,
    pub ssim: f64,
    pub sequence: String,
    /// Index of `first` within the sequence.
    pub anchor: usize,
}

/// Every `(t, t + x)` with `1 ≤ x ≤ max_gap` whose SSIM lies in
/// `[ssim_lo, ssim_hi]`. The upper bound drops near-static pairs, the lower
/// bound drops pairs with too much motion.
pub fn extract_pairs(seq: &FrameSequence, ssim_lo: f64, ssim_hi: f64, max_gap: usize) -> Result<Vec<FramePair>> {
    if !(0.0 <= ssim_lo && ssim_lo < ssim_hi && ssim_hi <= 1.0) {
        return Err(Error::invalid(
            "extract_pairs",
            format!("need 0 <= ssim_lo < ssim_hi <= 1, got [{ssim_lo}, {ssim_hi}]"),
        ));
    }
    if max_gap == 0 {
        return Err(Error::invalid("extract_pairs", "max_gap must be at least 1"));
    }
    let mut out = Vec::new();
    for t in 0..seq.len() {
        for x in 1..=max_gap {
            let Some(next) = seq.frames.get(t + x) else { break };
            let s = ssim(&seq.frames[t], next)?;
            if ssim_lo <= s && s <= ssim_hi {
                out.push(FramePair {
                    first: seq.frames[t].clone(),
                    second: next.clone(),
                    gap: x,
                    ssim: s,
                    sequence: seq.id.clone(),
                    anchor: t,
                });
            }
        }
    }
    Ok(out)
}

/// Index of the first held-out frame when the last `holdout` fraction of a
/// `len`-frame video is reserved for evaluation.
pub fn holdout_cut(len: usize, holdout: f64) -> usize {
    len - (len as f64 * holdout.clamp(0.0, 1.0)).round() as usize
}

/// Splits one video's pairs in time: training pairs lie entirely before
/// `cut`, held-out pairs start at or after it. Pairs straddling the cut
/// are dropped.
pub fn split_pairs(pairs: Vec<FramePair>, cut: usize) -> (Vec<FramePair>, Vec<FramePair>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for p in pairs {
        if p.anchor + p.gap < cut {
            train.push(p);
        } else if p.anchor >= cut {
            test.push(p);
        }
    }
    (train, test)
}

/// `[N, C, H, W]` from a list of `[C, H, W]` frames.
pub fn stack_frames(frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(&frames.iter().collect::<Vec<_>>())
}

/// Row-aligned `(first, second)` batches.
pub fn stack_pairs(pairs: &[FramePair]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let a: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.first).collect();
    let b: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.second).collect();
    Ok((Tensor::stack(&a)?, Tensor::stack(&b)?))
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png"))
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// PNG files in `dir`, sorted by file name.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| data_err(dir, e.to_string()))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| data_err(dir, e.to_string()))?.path();
        if p.is_file() && is_image(&p) {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Decodes one encoded image into RGB `[3, H, W]` in `[-1, 1]`.
pub fn decode_frame(bytes: &[u8]) -> std::result::Result<Tensor<f32>, image::ImageError> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        raw[rest * 3 + c] as f32 / 127.5 - 1.0
    }))
}

/// Decodes every PNG in `dir` (by file name order) into RGB `[3, H, W]`.
pub fn load_frames(dir: &Path) -> Result<FrameSequence> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(data_err(dir, "empty sequence: no .png frames"));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let bytes = std::fs::read(p).map_err(|e| data_err(p, e.to_string()))?;
        let t = decode_frame(&bytes).map_err(|e| data_err(p, e.to_string()))?;
        if let Some(first) = frames.first() {
            let first: &Tensor<f32> = first;
            if first.shape() != t.shape() {
                return Err(data_err(
                    p,
                    format!(
                        "resolution {}x{} differs from {}x{}",
                        t.shape()[2],
                        t.shape()[1],
                        first.shape()[2],
                        first.shape()[1]
                    ),
                ));
            }
        }
        frames.push(t);
    }
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("video").to_string();
    FrameSequence::new(id, frames, dir.display().to_string())
}

/// Either one frame directory or a root whose subdirectories are videos.
pub fn load_videos(path: &Path) -> Result<Vec<FrameSequence>> {
    if !path.is_dir() {
        return Err(data_err(path, "not a directory"));
    }
    if !frame_paths(path)?.is_empty() {
        return Ok(vec![load_frames(path)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| data_err(path, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        if !frame_paths(&d)?.is_empty() {
            out.push(load_frames(&d)?);
        }
    }
    if out.is_empty() {
        return Err(data_err(path, "no frame directories found"));
    }
    Ok(out)
}

/// Writes `[C, H, W]` in `[-1, 1]` as an 8-bit PNG (C = 1 or 3).
pub fn save_frame_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let &[c, h, w] = frame.shape() else {
        return Err(Error::invalid(
            "save_frame_png",
            format!("expected [C, H, W], got {:?}", frame.shape()),
        ));
    };
    let q = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let plane = h * w;
    match c {
        3 => {
            let mut buf = vec![0u8; plane * 3];
            for (i, px) in buf.iter_mut().enumerate() {
                *px = q(frame.data()[(i % 3) * plane + i / 3]);
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized")
                .save(path)?;
        }
        1 => {
            let buf: Vec<u8> = frame.data().iter().map(|&v| q(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized")
                .save(path)?;
        }
        _ => return Err(Error::invalid("save_frame_png", format!("{c} channels; only 1 or 3 are supported"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_from(frames: Vec<Tensor<f32>>) -> FrameSequence {
        FrameSequence::new("s", frames, "test").unwrap()
    }

    #[test]
    fn static_sequence_yields_no_pairs() {
        let f = Tensor::rand_uniform(&[3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let s = seq_from(vec![f; 5]);
        assert!(extract_pairs(&s, 0.4, 0.98, 2).unwrap().is_empty());
    }

    #[test]
    fn open_interval_counts_all_consecutive() {
        let base = Tensor::rand_uniform(&[1, 12, 12], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = seq_from((0..6).map(|i| base.map(|v| v * (1.0 - 0.05 * i as f32))).collect());
        assert_eq!(extract_pairs(&s, 0.0, 1.0, 1).unwrap().len(), 5);
    }

    #[test]
    fn bad_thresholds_rejected() {
        let s = seq_from(vec![]);
        assert!(extract_pairs(&s, 0.5, 0.5, 1).is_err());
        assert!(extract_pairs(&s, 0.1, 0.9, 0).is_err());
    }

    #[test]
    fn temporal_split_never_straddles() {
        let base = Tensor::rand_uniform(&[1, 12, 12], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let s = seq_from((0..10).map(|i| base.map(|v| v * (1.0 - 0.05 * i as f32))).collect());
        let cut = holdout_cut(10, 0.3);
        assert_eq!(cut, 7);
        let (train, test) = split_pairs(extract_pairs(&s, 0.0, 1.0, 2).unwrap(), cut);
        assert!(train.iter().all(|p| p.anchor + p.gap < 7));
        assert!(test.iter().all(|p| p.anchor >= 7));
        // 17 pairs in total; (5,7), (6,7) and (6,8) straddle the cut.
        assert_eq!(train.len() + test.len(), 14);
        assert_eq!(holdout_cut(10, 0.0), 10);
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames: Vec<Tensor<f32>> = (0..10).map(|_| Tensor::rand_uniform(&[3, 8, 6], -1.0, 1.0, &mut rng)).collect();
        for (i, f) in frames.iter().enumerate() {
            save_frame_png(&dir.path().join(format!("frame_{:06}.png", i + 1)), f).unwrap();
        }
        let back = load_frames(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in frames.iter().zip(&back.frames) {
            assert!(a.max_abs_diff(b) <= 1.0 / 127.5 * 0.5 + 1e-6);
        }
    }

    #[test]
    fn empty_and_mixed_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames(dir.path()), Err(Error::Data { .. })));
        save_frame_png(&dir.path().join("a.png"), &Tensor::zeros(&[3, 4, 4])).unwrap();
        save_frame_png(&dir.path().join("b.png"), &Tensor::zeros(&[3, 4, 5])).unwrap();
        assert!(load_frames(dir.path()).is_err());
    }

    #[test]
    fn videos_root_or_single_dir() {
        let root = tempfile::tempdir().unwrap();
        for v in ["v1", "v0"] {
            let d = root.path().join(v);
            std::fs::create_dir(&d).unwrap();
            for i in 0..3 {
                save_frame_png(&d.join(format!("frame_{i:06}.png")), &Tensor::zeros(&[3, 4, 4])).unwrap();
            }
        }
        let vids = load_videos(root.path()).unwrap();
        assert_eq!(vids.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(), vec!["v0", "v1"]);
        assert_eq!(load_videos(&root.path().join("v1")).unwrap().len(), 1);
    }
}
