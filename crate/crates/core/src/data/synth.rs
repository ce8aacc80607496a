use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::frames::FrameSequence;

/// Per-axis supersampling factor for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    /// Horizontal drift of `amplitude` pixels per frame; the canvas wraps.
    Translate,
    /// Rotation about the shape center by `amplitude` radians per frame.
    Rotate,
    /// Geometric growth by a factor `1 + amplitude` per frame, centered so
    /// the middle frame has unit scale.
    Scale,
    /// Translate plus rotation at `0.05 · amplitude` radians per frame.
    Mixed,
}

impl std::str::FromStr for MotionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "translate" => Ok(MotionKind::Translate),
            "rotate" => Ok(MotionKind::Rotate),
            "scale" => Ok(MotionKind::Scale),
            "mixed" => Ok(MotionKind::Mixed),
            o => Err(format!("unknown motion kind `{o}` (expected translate|rotate|scale|mixed)")),
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionKind::Translate => "translate",
            MotionKind::Rotate => "rotate",
            MotionKind::Scale => "scale",
            MotionKind::Mixed => "mixed",
        })
    }
}

/// Ground-truth pose of the shape in one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionState {
    /// Horizontal displacement from the start position, pixels.
    pub dx: f64,
    /// Orientation, radians.
    pub angle: f64,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub sequence: FrameSequence,
    pub motion: Vec<MotionState>,
    pub kind: MotionKind,
    pub amplitude: f64,
}

struct Appearance {
    background: [f64; 3],
    color_a: [f64; 3],
    color_b: [f64; 3],
    /// 0 for a disk, otherwise polygon side count.
    sides: u32,
    radius: f64,
    center: (f64, f64),
    angle0: f64,
    stripe_freq: f64,
    stripe_dir: f64,
    stripe_phase: f64,
    spot: (f64, f64),
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng, res: f64, centered: bool) -> Self {
        let mut color = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let background = color(-0.9, -0.4);
        let color_a = color(-0.3, 0.3);
        let color_b = color(0.5, 1.0);
        let sides = if rng.random_bool(0.5) { 0 } else { rng.random_range(3..=6) };
        let radius = res * rng.random_range(0.22..0.3);
        let jitter = res * 0.06;
        let center = if centered {
            (
                res / 2.0 + rng.random_range(-jitter..jitter),
                res / 2.0 + rng.random_range(-jitter..jitter),
            )
        } else {
            (rng.random_range(0.0..res), res / 2.0 + rng.random_range(-jitter..jitter))
        };
        Appearance {
            background,
            color_a,
            color_b,
            sides,
            radius,
            center,
            angle0: rng.random_range(0.0..TAU),
            stripe_freq: rng.random_range(0.8..1.6),
            stripe_dir: rng.random_range(0.0..PI),
            stripe_phase: rng.random_range(0.0..TAU),
            spot: (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
        }
    }

    fn inside(&self, u: f64, v: f64) -> bool {
        let rho = u.hypot(v);
        if self.sides == 0 {
            return rho <= self.radius;
        }
        let wedge = TAU / self.sides as f64;
        let phi = v.atan2(u).rem_euclid(wedge) - wedge / 2.0;
        rho * phi.cos() <= self.radius * (wedge / 2.0).cos()
    }

    /// Texture value in the shape's own frame, so it moves with the shape.
    fn texture(&self, u: f64, v: f64) -> [f64; 3] {
        let (un, vn) = (u / self.radius, v / self.radius);
        let s = (TAU * self.stripe_freq * (un * self.stripe_dir.cos() + vn * self.stripe_dir.sin()) + self.stripe_phase).sin();
        let d2 = (un - self.spot.0).powi(2) + (vn - self.spot.1).powi(2);
        let t = (0.5 + 0.35 * s + 0.5 * (-d2 / 0.08).exp()).clamp(0.0, 1.0);
        [0, 1, 2].map(|c| self.color_a[c] + (self.color_b[c] - self.color_a[c]) * t)
    }
}

fn motion_at(kind: MotionKind, amplitude: f64, t: usize, length: usize) -> MotionState {
    let t = t as f64;
    match kind {
        MotionKind::Translate => MotionState {
            dx: amplitude * t,
            angle: 0.0,
            scale: 1.0,
        },
        MotionKind::Rotate => MotionState {
            dx: 0.0,
            angle: amplitude * t,
            scale: 1.0,
        },
        MotionKind::Scale => MotionState {
            dx: 0.0,
            angle: 0.0,
            scale: (1.0 + amplitude).powf(t - (length - 1) as f64 / 2.0),
        },
        MotionKind::Mixed => MotionState {
            dx: amplitude * t,
            angle: 0.05 * amplitude * t,
            scale: 1.0,
        },
    }
}

fn render(app: &Appearance, m: &MotionState, res: usize) -> Tensor<f32> {
    let r = res as f64;
    let wrap = |d: f64| {
        let d = d.rem_euclid(r);
        if d >= r / 2.0 {
            d - r
        } else {
            d
        }
    };
    let (cx, cy) = (app.center.0 + m.dx, app.center.1);
    let ang = app.angle0 + m.angle;
    let (sin, cos) = ang.sin_cos();
    let mut out = vec![0f32; 3 * res * res];
    let ss = SUPERSAMPLE as f64;
    for py in 0..res {
        for px in 0..res {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / ss;
                    let y = py as f64 + (sy as f64 + 0.5) / ss;
                    let (dx, dy) = (wrap(x - cx), wrap(y - cy));
                    // into the shape frame: undo rotation, then scale
                    let u = (cos * dx + sin * dy) / m.scale;
                    let v = (-sin * dx + cos * dy) / m.scale;
                    let c = if app.inside(u, v) { app.texture(u, v) } else { app.background };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                out[(k * res + py) * res + px] = (acc[k] / (ss * ss)) as f32;
            }
        }
    }
    Tensor::new(&[3, res, res], out).expect("sized")
}

/// A textured disk or polygon on a plain background under one
/// low-dimensional motion. Appearance and start pose come from `seed`;
/// the motion itself is fixed by `kind` and `amplitude`.
pub fn synth_video(kind: MotionKind, length: usize, resolution: usize, amplitude: f64, seed: u64) -> Result<SynthVideo> {
    if length < 2 {
        return Err(Error::invalid("synth_video", format!("length {length} below 2")));
    }
    if resolution < 16 {
        return Err(Error::invalid("synth_video", format!("resolution {resolution} below 16")));
    }
    if !amplitude.is_finite() || (kind == MotionKind::Scale && amplitude <= -1.0) {
        return Err(Error::invalid("synth_video", format!("invalid amplitude {amplitude} for {kind}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let app = Appearance::sample(
        &mut rng,
        resolution as f64,
        !matches!(kind, MotionKind::Translate | MotionKind::Mixed),
    );
    let motion: Vec<MotionState> = (0..length).map(|t| motion_at(kind, amplitude, t, length)).collect();
    let frames = motion.iter().map(|m| render(&app, m, resolution)).collect();
    let sequence = FrameSequence::new(format!("{kind}_{seed}"), frames, format!("synthetic:{kind}:{amplitude}:{seed}"))?;
    Ok(SynthVideo {
        sequence,
        motion,
        kind,
        amplitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_static() {
        for kind in [MotionKind::Translate, MotionKind::Rotate, MotionKind::Scale, MotionKind::Mixed] {
            let v = synth_video(kind, 4, 16, 0.0, 3).unwrap();
            assert!(v.sequence.frames.windows(2).all(|w| w[0] == w[1]), "{kind}");
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = synth_video(MotionKind::Mixed, 5, 24, 1.5, 9).unwrap();
        let b = synth_video(MotionKind::Mixed, 5, 24, 1.5, 9).unwrap();
        let c = synth_video(MotionKind::Mixed, 5, 24, 1.5, 10).unwrap();
        assert_eq!(a.sequence, b.sequence);
        assert_ne!(a.sequence.frames, c.sequence.frames);
    }

    /// Circular cross-correlation peak between consecutive frames.
    fn best_shift(a: &Tensor<f32>, b: &Tensor<f32>, res: usize) -> (usize, usize) {
        let mut best = (f64::NEG_INFINITY, (0, 0));
        let mean = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let (ma, mb) = (mean(a), mean(b));
        for sy in 0..res {
            for sx in 0..res {
                let mut s = 0.0;
                for c in 0..3 {
                    for y in 0..res {
                        for x in 0..res {
                            let p = a.data()[(c * res + y) * res + x] as f64 - ma;
                            let q = b.data()[(c * res + (y + sy) % res) * res + (x + sx) % res] as f64 - mb;
                            s += p * q;
                        }
                    }
                }
                if s > best.0 {
                    best = (s, (sx, sy));
                }
            }
        }
        best.1
    }

    #[test]
    fn translation_matches_declared_displacement() {
        let res = 20;
        for (seed, amp) in [(1u64, 2.0), (2, 3.0), (3, 1.0)] {
            let v = synth_video(MotionKind::Translate, 3, res, amp, seed).unwrap();
            for w in v.sequence.frames.windows(2) {
                assert_eq!(best_shift(&w[0], &w[1], res), (amp as usize, 0), "seed {seed}");
            }
            assert_eq!(v.motion[2].dx - v.motion[1].dx, amp);
        }
    }

    #[test]
    fn values_in_range_and_validation() {
        let v = synth_video(MotionKind::Scale, 6, 16, 0.05, 0).unwrap();
        assert!(v.sequence.frames.iter().all(|f| f.data().iter().all(|x| (-1.0..=1.0).contains(x))));
        assert!(synth_video(MotionKind::Rotate, 1, 16, 0.1, 0).is_err());
        assert!(synth_video(MotionKind::Rotate, 4, 8, 0.1, 0).is_err());
        assert!(synth_video(MotionKind::Scale, 4, 16, -1.0, 0).is_err());
        assert!("spin".parse::<MotionKind>().is_err());
    }
}
