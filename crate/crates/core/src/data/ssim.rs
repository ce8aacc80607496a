use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stability constants for data in `[-1, 1]` (dynamic range 2).
pub const SSIM_C1: f64 = (0.01 * 2.0) * (0.01 * 2.0);
pub const SSIM_C2: f64 = (0.03 * 2.0) * (0.03 * 2.0);

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * plane[y * w + x + j];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean SSIM of two `[C, H, W]` images in `[-1, 1]`: 11×11 Gaussian window
/// (σ = 1.5), valid positions only, channels averaged.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.expect_shape("ssim", b.shape())?;
    let &[c, h, w] = a.shape() else {
        return Err(Error::invalid("ssim", format!("expected [C, H, W], got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let k = gaussian_kernel();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, h, w, &k), filter(&y, h, w, &k));
        let (exx, eyy, exy) = (filter(&xx, h, w, &k), filter(&yy, h, w, &k), filter(&xy, h, w, &k));
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let num = (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2);
            s += num / den;
        }
        total += s / mx.len() as f64;
    }
    Ok((total / c as f64).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation: for every window position build the weighted
    /// statistics from the 2-D Gaussian.
    fn reference(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let r = 5i64;
        let mut wts = vec![0.0; 121];
        for dy in -r..=r {
            for dx in -r..=r {
                wts[((dy + r) * 11 + dx + r) as usize] = (-((dx * dx + dy * dy) as f64) / 4.5).exp();
            }
        }
        let z: f64 = wts.iter().sum();
        let mut acc = 0.0;
        for ch in 0..c {
            let mut s = 0.0;
            let mut count = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = wts[i * 11 + j] / z;
                            let p = a.data()[(ch * h + y0 + i) * w + x0 + j] as f64;
                            let q = b.data()[(ch * h + y0 + i) * w + x0 + j] as f64;
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cv) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    s += ((2.0 * mx * my + SSIM_C1) * (2.0 * cv + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
            acc += s / count as f64;
        }
        acc / c as f64
    }

    fn img(shape: &[usize], seed: u64) -> Tensor<f32> {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        for seed in 0..5 {
            let x = img(&[3, 16, 20], seed);
            assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        }
    }

    #[test]
    fn inverted_structure_is_negative() {
        let noise = img(&[3, 16, 16], 1);
        let x = noise.map(|v| 0.5 + 0.3 * v);
        let y = noise.map(|v| 0.5 - 0.3 * v);
        assert!(ssim(&x, &y).unwrap() < -0.5);
    }

    #[test]
    fn matches_window_reference() {
        for seed in 0..3 {
            let a = img(&[2, 14, 17], seed);
            let b = a.zip_map(&img(&[2, 14, 17], seed + 10), "t", |p, q| 0.6 * p + 0.4 * q).unwrap();
            let (got, want) = (ssim(&a, &b).unwrap(), reference(&a, &b));
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn too_small_is_an_error() {
        let x = img(&[1, 10, 30], 0);
        assert!(ssim(&x, &x).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>(), mix in 0.0f32..1.0) {
            let a = img(&[1, 12, 13], seed);
            let b = a.zip_map(&img(&[1, 12, 13], seed ^ 1), "t", |p, q| mix * p + (1.0 - mix) * q).unwrap();
            let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
