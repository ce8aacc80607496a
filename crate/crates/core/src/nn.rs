//! Declarative network spec and the five networks built from it: the
//! Stage-I encoder, decoder and latent/image discriminator, and the
//! Stage-III skip-connected generator and conditional discriminator.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kv::{KvDoc, KvWriter};
use crate::params::{Bound, NetworkParams};
use crate::tensor::{Element, Tensor};

/// Convolution geometry shared by every coder layer: a 4×4 kernel with
/// stride 2 and padding 1 halves (or, transposed, doubles) resolution.
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

pub const MAX_RESOLUTION: usize = 8192;
pub const MAX_CHANNELS: usize = 64;
pub const MAX_WIDTH: usize = 1 << 16;
pub const MAX_LAYERS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Stride-2 conv layers per encoder/decoder.
    pub coder_layers: usize,
    pub base_width: usize,
    pub max_width: usize,
    /// Discriminator depth: `disc_layers - 2` conv layers plus two fully
    /// connected layers (penultimate features, logit).
    pub disc_layers: usize,
    /// Width of the discriminators' penultimate feature layer.
    pub disc_features: usize,
    /// Width of the AAE discriminator's latent pathway.
    pub latent_proj: usize,
    pub leaky_slope: f64,
    /// 1-based generator-encoder layers whose outputs skip to the decoder.
    pub skips: Vec<usize>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkSpec {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        NetworkSpec {
            height: 32,
            width: 32,
            channels: 3,
            latent_dim: 64,
            coder_layers: 4,
            base_width: 16,
            max_width: 256,
            disc_layers: 4,
            disc_features: 128,
            latent_proj: 64,
            leaky_slope: 0.2,
            skips: vec![2, 4],
        }
    }

    /// Full-size configuration: 8 conv layers per coder, 5-layer
    /// discriminators, 1024-d latent. Widths are a reconstruction; the
    /// exact per-layer table was never published.
    pub fn full() -> Self {
        NetworkSpec {
            height: 256,
            width: 256,
            channels: 3,
            latent_dim: 1024,
            coder_layers: 8,
            base_width: 64,
            max_width: 512,
            disc_layers: 5,
            disc_features: 512,
            latent_proj: 512,
            leaky_slope: 0.2,
            skips: vec![2, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!("empty input {}x{}x{}", self.channels, self.height, self.width));
        }
        if self.latent_dim == 0 || self.base_width == 0 || self.disc_features == 0 || self.latent_proj == 0 {
            return bad("latent_dim, base_width, disc_features and latent_proj must be positive".into());
        }
        // Generous caps that keep every parameter count well inside usize.
        let caps = [
            ("height", self.height, MAX_RESOLUTION),
            ("width", self.width, MAX_RESOLUTION),
            ("channels", self.channels, MAX_CHANNELS),
            ("latent_dim", self.latent_dim, MAX_WIDTH),
            ("base_width", self.base_width, MAX_WIDTH),
            ("max_width", self.max_width, MAX_WIDTH),
            ("disc_features", self.disc_features, MAX_WIDTH),
            ("latent_proj", self.latent_proj, MAX_WIDTH),
            ("coder_layers", self.coder_layers, MAX_LAYERS),
            ("disc_layers", self.disc_layers, MAX_LAYERS),
        ];
        if let Some((name, v, cap)) = caps.into_iter().find(|&(_, v, cap)| v > cap) {
            return bad(format!("{name} = {v} exceeds {cap}"));
        }
        if self.max_width < self.base_width {
            return bad(format!("max_width {} below base_width {}", self.max_width, self.base_width));
        }
        if self.coder_layers < 2 {
            return bad(format!("coder_layers {} below 2", self.coder_layers));
        }
        if self.disc_layers < 3 {
            return bad(format!("disc_layers {} below 3", self.disc_layers));
        }
        let down = self.coder_layers.max(self.disc_layers - 2);
        let factor = 1usize << down;
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return bad(format!(
                "resolution {}x{} not divisible by 2^{down} = {factor}",
                self.height, self.width
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        let mut seen = vec![false; self.coder_layers + 1];
        for &k in &self.skips {
            if k == 0 || k > self.coder_layers {
                return bad(format!("skip index {k} outside 1..={}", self.coder_layers));
            }
            if std::mem::replace(&mut seen[k], true) {
                return bad(format!("duplicate skip index {k}"));
            }
        }
        Ok(())
    }

    /// Output channels of coder layer `i` (1-based); layer 0 is the image.
    pub fn coder_width(&self, i: usize) -> usize {
        if i == 0 {
            self.channels
        } else {
            (self.base_width << (i - 1).min(30)).min(self.max_width)
        }
    }

    /// Spatial size after `i` stride-2 layers.
    pub fn res_after(&self, i: usize) -> (usize, usize) {
        (self.height >> i, self.width >> i)
    }

    pub fn bottleneck_len(&self) -> usize {
        let (h, w) = self.res_after(self.coder_layers);
        self.coder_width(self.coder_layers) * h * w
    }

    pub fn disc_convs(&self) -> usize {
        self.disc_layers - 2
    }

    fn disc_flat_len(&self) -> usize {
        let m = self.disc_convs();
        let (h, w) = self.res_after(m);
        self.coder_width(m) * h * w
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }

    pub fn to_kv(&self) -> String {
        let skips: Vec<String> = self.skips.iter().map(|s| s.to_string()).collect();
        KvWriter::default()
            .section("network")
            .kv("height", self.height)
            .kv("width", self.width)
            .kv("channels", self.channels)
            .kv("latent_dim", self.latent_dim)
            .kv("coder_layers", self.coder_layers)
            .kv("base_width", self.base_width)
            .kv("max_width", self.max_width)
            .kv("disc_layers", self.disc_layers)
            .kv("disc_features", self.disc_features)
            .kv("latent_proj", self.latent_proj)
            .kv("leaky_slope", self.leaky_slope)
            .kv("skips", skips.join(", "))
            .finish()
    }

    /// Reads the `[network]` section, starting from the desk defaults.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::desk();
        let mut r = doc.reader("network");
        let spec = NetworkSpec {
            height: r.get("height", d.height)?,
            width: r.get("width", d.width)?,
            channels: r.get("channels", d.channels)?,
            latent_dim: r.get("latent_dim", d.latent_dim)?,
            coder_layers: r.get("coder_layers", d.coder_layers)?,
            base_width: r.get("base_width", d.base_width)?,
            max_width: r.get("max_width", d.max_width)?,
            disc_layers: r.get("disc_layers", d.disc_layers)?,
            disc_features: r.get("disc_features", d.disc_features)?,
            latent_proj: r.get("latent_proj", d.latent_proj)?,
            leaky_slope: r.get("leaky_slope", d.leaky_slope)?,
            skips: r.get_list("skips", d.skips.clone())?,
        };
        r.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Trainable parameter counts, derived from the spec alone.
    pub fn param_counts(&self) -> ParamCounts {
        let l = self.coder_layers;
        let conv = |cin: usize, cout: usize| cout * cin * KERNEL * KERNEL + cout;
        let bn = |c: usize| 2 * c;
        let fc = |din: usize, dout: usize| dout * din + dout;
        let z = self.latent_dim;

        let coder_convs: usize = (1..=l)
            .map(|i| conv(self.coder_width(i - 1), self.coder_width(i)) + bn(self.coder_width(i)))
            .sum();
        let encoder = coder_convs + fc(self.bottleneck_len(), z);

        let decoder_deconvs = |skip_extra: &dyn Fn(usize) -> usize| -> usize {
            (1..=l)
                .map(|j| {
                    let src = l - j + 1;
                    let cin = self.coder_width(src) * (1 + skip_extra(src));
                    let cout = self.coder_width(l - j);
                    conv(cin, cout) + if j < l { bn(cout) } else { 0 }
                })
                .sum()
        };
        let decoder = fc(z, self.bottleneck_len()) + bn(self.coder_width(l)) + decoder_deconvs(&|_| 0);

        let disc_convs = |cin0: usize| -> usize {
            (1..=self.disc_convs())
                .map(|i| {
                    let cin = if i == 1 { cin0 } else { self.coder_width(i - 1) };
                    conv(cin, self.coder_width(i))
                })
                .sum()
        };
        let f = self.disc_features;
        let aae_disc = disc_convs(self.channels) + fc(z, self.latent_proj) + fc(self.disc_flat_len() + self.latent_proj, f) + fc(f, 1);
        let cgan_disc = disc_convs(2 * self.channels) + fc(self.disc_flat_len(), f) + fc(f, 1);

        let skip = |k: usize| usize::from(self.skips.contains(&k));
        let generator = coder_convs
            + fc(self.bottleneck_len(), z)
            + fc(2 * z, self.bottleneck_len())
            + bn(self.coder_width(l))
            + decoder_deconvs(&skip);

        ParamCounts {
            encoder,
            decoder,
            aae_discriminator: aae_disc,
            generator,
            cgan_discriminator: cgan_disc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub aae_discriminator: usize,
    pub generator: usize,
    pub cgan_discriminator: usize,
}

fn init_conv<T: Element, R: Rng + ?Sized>(p: &mut NetworkParams<T>, name: &str, shape: [usize; 4], bias: usize, rng: &mut R) {
    p.insert(format!("{name}.weight"), Tensor::randn(&shape, INIT_STD, rng), true);
    p.insert(format!("{name}.bias"), Tensor::zeros(&[bias]), true);
}

fn init_fc<T: Element, R: Rng + ?Sized>(p: &mut NetworkParams<T>, name: &str, din: usize, dout: usize, rng: &mut R) {
    p.insert(format!("{name}.weight"), Tensor::randn(&[dout, din], INIT_STD, rng), true);
    p.insert(format!("{name}.bias"), Tensor::zeros(&[dout]), true);
}

fn init_bn<T: Element>(p: &mut NetworkParams<T>, name: &str, c: usize) {
    p.insert(format!("{name}.gamma"), Tensor::ones(&[c]), true);
    p.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true);
    p.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false);
    p.insert(format!("{name}.running_var"), Tensor::ones(&[c]), false);
}

fn conv<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = b.get(tape, &format!("{name}.weight"))?;
    let bias = b.get(tape, &format!("{name}.bias"))?;
    tape.conv2d(x, w, bias, STRIDE, PAD)
}

fn deconv<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = b.get(tape, &format!("{name}.weight"))?;
    let bias = b.get(tape, &format!("{name}.bias"))?;
    tape.conv_transpose2d(x, w, bias, STRIDE, PAD)
}

fn fc<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    let w = b.get(tape, &format!("{name}.weight"))?;
    let bias = b.get(tape, &format!("{name}.bias"))?;
    tape.linear(x, w, bias)
}

fn bn<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, name: &str, x: Var) -> Result<Var> {
    let gamma = b.get(tape, &format!("{name}.gamma"))?;
    let beta = b.get(tape, &format!("{name}.beta"))?;
    let mode = b.mode;
    let eps = b.bn_eps;
    let (y, stats) = {
        let rm = b.buffer(&format!("{name}.running_mean"))?.data().to_vec();
        let rv = b.buffer(&format!("{name}.running_var"))?.data().to_vec();
        tape.batch_norm(x, gamma, beta, &rm, &rv, mode, eps)?
    };
    if let Some(stats) = stats {
        b.update_running(name, &stats)?;
    }
    Ok(y)
}

fn flatten<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.value(x)?.shape().to_vec();
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, &[n, rest])
}

fn check_image<T: Element>(tape: &Tape<T>, spec: &NetworkSpec, x: Var, boundary: &'static str) -> Result<usize> {
    let shape = tape.value(x)?.shape();
    match *shape {
        [n, c, h, w] if c == spec.channels && h == spec.height && w == spec.width => Ok(n),
        _ => Err(Error::Shape {
            op: boundary,
            expected: spec.image_shape(shape.first().copied().unwrap_or(1)).to_vec(),
            got: shape.to_vec(),
        }),
    }
}

fn check_latent<T: Element>(tape: &Tape<T>, spec: &NetworkSpec, z: Var, n: Option<usize>, boundary: &'static str) -> Result<usize> {
    let shape = tape.value(z)?.shape();
    match *shape {
        [m, d] if d == spec.latent_dim && n.is_none_or(|n| n == m) => Ok(m),
        _ => Err(Error::Shape {
            op: boundary,
            expected: vec![n.unwrap_or(shape[0]), spec.latent_dim],
            got: shape.to_vec(),
        }),
    }
}

/// Stage-I encoder: image → latent code.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: NetworkSpec,
}

/// Stage-I decoder: latent code → image in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub spec: NetworkSpec,
}

/// Scores (latent, image) pairs. The image runs through a conv stack, the
/// latent through a linear projection, and the two pathways are
/// concatenated before the last two layers.
#[derive(Clone, Debug)]
pub struct AaeDiscriminator {
    pub spec: NetworkSpec,
}

/// Stage-III generator: (regressed latent, condition image) → image.
#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: NetworkSpec,
}

/// Scores (candidate, condition) image pairs concatenated channel-wise.
#[derive(Clone, Debug)]
pub struct CganDiscriminator {
    pub spec: NetworkSpec,
}

/// Output of a discriminator forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `[N, 1]`
    pub logit: Var,
    /// Penultimate activations `[N, disc_features]`.
    pub features: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Skips {
    Live,
    /// Replace every skip tensor with zeros (ablation).
    Zeroed,
}

pub fn build_encoder<T: Element, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<(Encoder, NetworkParams<T>)> {
    spec.validate()?;
    let mut p = NetworkParams::new();
    for i in 1..=spec.coder_layers {
        init_conv(
            &mut p,
            &format!("conv{i}"),
            [spec.coder_width(i), spec.coder_width(i - 1), KERNEL, KERNEL],
            spec.coder_width(i),
            rng,
        );
        init_bn(&mut p, &format!("bn{i}"), spec.coder_width(i));
    }
    init_fc(&mut p, "fc", spec.bottleneck_len(), spec.latent_dim, rng);
    Ok((Encoder { spec: spec.clone() }, p))
}

pub fn build_decoder<T: Element, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<(Decoder, NetworkParams<T>)> {
    spec.validate()?;
    let l = spec.coder_layers;
    let mut p = NetworkParams::new();
    init_fc(&mut p, "fc", spec.latent_dim, spec.bottleneck_len(), rng);
    init_bn(&mut p, "bn0", spec.coder_width(l));
    for j in 1..=l {
        let (cin, cout) = (spec.coder_width(l - j + 1), spec.coder_width(l - j));
        init_conv(&mut p, &format!("deconv{j}"), [cin, cout, KERNEL, KERNEL], cout, rng);
        if j < l {
            init_bn(&mut p, &format!("bn{j}"), cout);
        }
    }
    Ok((Decoder { spec: spec.clone() }, p))
}

fn init_disc_convs<T: Element, R: Rng + ?Sized>(p: &mut NetworkParams<T>, spec: &NetworkSpec, cin0: usize, rng: &mut R) {
    for i in 1..=spec.disc_convs() {
        let cin = if i == 1 { cin0 } else { spec.coder_width(i - 1) };
        init_conv(
            p,
            &format!("conv{i}"),
            [spec.coder_width(i), cin, KERNEL, KERNEL],
            spec.coder_width(i),
            rng,
        );
    }
}

pub fn build_aae_discriminator<T: Element, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    rng: &mut R,
) -> Result<(AaeDiscriminator, NetworkParams<T>)> {
    spec.validate()?;
    let mut p = NetworkParams::new();
    init_disc_convs(&mut p, spec, spec.channels, rng);
    init_fc(&mut p, "latent", spec.latent_dim, spec.latent_proj, rng);
    init_fc(&mut p, "fc1", spec.disc_flat_len() + spec.latent_proj, spec.disc_features, rng);
    init_fc(&mut p, "fc2", spec.disc_features, 1, rng);
    Ok((AaeDiscriminator { spec: spec.clone() }, p))
}

pub fn build_cgan_generator<T: Element, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<(Generator, NetworkParams<T>)> {
    spec.validate()?;
    let l = spec.coder_layers;
    let mut p = NetworkParams::new();
    for i in 1..=l {
        init_conv(
            &mut p,
            &format!("enc{i}"),
            [spec.coder_width(i), spec.coder_width(i - 1), KERNEL, KERNEL],
            spec.coder_width(i),
            rng,
        );
        init_bn(&mut p, &format!("enc_bn{i}"), spec.coder_width(i));
    }
    init_fc(&mut p, "code", spec.bottleneck_len(), spec.latent_dim, rng);
    init_fc(&mut p, "dec_fc", 2 * spec.latent_dim, spec.bottleneck_len(), rng);
    init_bn(&mut p, "dec_bn0", spec.coder_width(l));
    for j in 1..=l {
        let src = l - j + 1;
        let extra = usize::from(spec.skips.contains(&src));
        let cin = spec.coder_width(src) * (1 + extra);
        let cout = spec.coder_width(l - j);
        init_conv(&mut p, &format!("dec{j}"), [cin, cout, KERNEL, KERNEL], cout, rng);
        if j < l {
            init_bn(&mut p, &format!("dec_bn{j}"), cout);
        }
    }
    Ok((Generator { spec: spec.clone() }, p))
}

pub fn build_cgan_discriminator<T: Element, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    rng: &mut R,
) -> Result<(CganDiscriminator, NetworkParams<T>)> {
    spec.validate()?;
    let mut p = NetworkParams::new();
    init_disc_convs(&mut p, spec, 2 * spec.channels, rng);
    init_fc(&mut p, "fc1", spec.disc_flat_len(), spec.disc_features, rng);
    init_fc(&mut p, "fc2", spec.disc_features, 1, rng);
    Ok((CganDiscriminator { spec: spec.clone() }, p))
}

impl Encoder {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, b: &mut Bound<'_, T>, image: Var) -> Result<Var> {
        check_image(tape, &self.spec, image, "encoder input")?;
        let alpha = T::from_f64(self.spec.leaky_slope);
        let mut h = image;
        for i in 1..=self.spec.coder_layers {
            h = conv(tape, b, &format!("conv{i}"), h)?;
            h = bn(tape, b, &format!("bn{i}"), h)?;
            h = tape.leaky_relu(h, alpha)?;
        }
        let h = flatten(tape, h)?;
        fc(tape, b, "fc", h)
    }
}

impl Decoder {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, b: &mut Bound<'_, T>, latent: Var) -> Result<Var> {
        let n = check_latent(tape, &self.spec, latent, None, "decoder input")?;
        let s = &self.spec;
        let l = s.coder_layers;
        let alpha = T::from_f64(s.leaky_slope);
        let (h0, w0) = s.res_after(l);
        let h = fc(tape, b, "fc", latent)?;
        let h = tape.reshape(h, &[n, s.coder_width(l), h0, w0])?;
        let h = bn(tape, b, "bn0", h)?;
        let mut h = tape.leaky_relu(h, alpha)?;
        for j in 1..=l {
            h = deconv(tape, b, &format!("deconv{j}"), h)?;
            if j < l {
                h = bn(tape, b, &format!("bn{j}"), h)?;
                h = tape.leaky_relu(h, alpha)?;
            }
        }
        tape.tanh(h)
    }
}

fn disc_conv_stack<T: Element>(tape: &mut Tape<T>, b: &mut Bound<'_, T>, spec: &NetworkSpec, x: Var) -> Result<Var> {
    let alpha = T::from_f64(spec.leaky_slope);
    let mut h = x;
    for i in 1..=spec.disc_convs() {
        h = conv(tape, b, &format!("conv{i}"), h)?;
        h = tape.leaky_relu(h, alpha)?;
    }
    flatten(tape, h)
}

impl AaeDiscriminator {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, b: &mut Bound<'_, T>, latent: Var, image: Var) -> Result<DiscOutput> {
        let n = check_image(tape, &self.spec, image, "aae discriminator image")?;
        check_latent(tape, &self.spec, latent, Some(n), "aae discriminator latent")?;
        let alpha = T::from_f64(self.spec.leaky_slope);
        let img = disc_conv_stack(tape, b, &self.spec, image)?;
        let lat = fc(tape, b, "latent", latent)?;
        let lat = tape.leaky_relu(lat, alpha)?;
        let h = tape.concat(&[img, lat])?;
        let h = fc(tape, b, "fc1", h)?;
        let features = tape.leaky_relu(h, alpha)?;
        let logit = fc(tape, b, "fc2", features)?;
        Ok(DiscOutput { logit, features })
    }
}

impl CganDiscriminator {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, b: &mut Bound<'_, T>, candidate: Var, condition: Var) -> Result<DiscOutput> {
        let n = check_image(tape, &self.spec, candidate, "cgan discriminator candidate")?;
        let m = check_image(tape, &self.spec, condition, "cgan discriminator condition")?;
        if n != m {
            return Err(Error::Boundary {
                boundary: "cgan discriminator batch",
                expected: n,
                got: m,
            });
        }
        let alpha = T::from_f64(self.spec.leaky_slope);
        let x = tape.concat(&[candidate, condition])?;
        let h = disc_conv_stack(tape, b, &self.spec, x)?;
        let h = fc(tape, b, "fc1", h)?;
        let features = tape.leaky_relu(h, alpha)?;
        let logit = fc(tape, b, "fc2", features)?;
        Ok(DiscOutput { logit, features })
    }
}

impl Generator {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, b: &mut Bound<'_, T>, latent: Var, condition: Var, skips: Skips) -> Result<Var> {
        let s = &self.spec;
        let n = check_image(tape, s, condition, "generator condition")?;
        check_latent(tape, s, latent, Some(n), "generator latent")?;
        let l = s.coder_layers;
        let alpha = T::from_f64(s.leaky_slope);

        let mut outs = Vec::with_capacity(l + 1);
        let mut h = condition;
        outs.push(h);
        for i in 1..=l {
            h = conv(tape, b, &format!("enc{i}"), h)?;
            h = bn(tape, b, &format!("enc_bn{i}"), h)?;
            h = tape.leaky_relu(h, alpha)?;
            outs.push(h);
        }
        let flat = flatten(tape, h)?;
        let code = fc(tape, b, "code", flat)?;
        let joint = tape.concat(&[code, latent])?;

        let (h0, w0) = s.res_after(l);
        let h = fc(tape, b, "dec_fc", joint)?;
        let h = tape.reshape(h, &[n, s.coder_width(l), h0, w0])?;
        let h = bn(tape, b, "dec_bn0", h)?;
        let mut h = tape.leaky_relu(h, alpha)?;
        for j in 1..=l {
            let src = l - j + 1;
            if s.skips.contains(&src) {
                let skip = match skips {
                    Skips::Live => outs[src],
                    Skips::Zeroed => {
                        let shape = tape.value(outs[src])?.shape().to_vec();
                        tape.constant(Tensor::zeros(&shape))
                    }
                };
                h = tape.concat(&[h, skip])?;
            }
            h = deconv(tape, b, &format!("dec{j}"), h)?;
            if j < l {
                h = bn(tape, b, &format!("dec_bn{j}"), h)?;
                h = tape.leaky_relu(h, alpha)?;
            }
        }
        tape.tanh(h)
    }
}
