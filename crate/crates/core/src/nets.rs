//! Encoder, decoder and density-ratio discriminator.
//!
//! The encoder is a stack of 3×3 stride-2 convolutions (padding 1) followed by
//! one dense layer producing `(μ, log σ²)`. The decoder maps `z` through a dense
//! layer to a `ladder[0]×1×1` map, one 3×3 stride-1 convolution, then 4×4
//! stride-2 transposed convolutions (padding 1) that double the spatial size
//! up to the image. Every layer is followed by ReLU except the last of each
//! network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const ENCODER_KERNEL: usize = 3;
const DECODER_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Output channels of each stride-2 convolution.
    pub ladder: Vec<usize>,
    pub latent_size: usize,
}

impl EncoderConfig {
    /// 64×64 RGB, five convolutions.
    pub fn full(latent_size: usize) -> Self {
        Self { image_size: 64, channels: 3, ladder: vec![32, 48, 64, 128, 256], latent_size }
    }

    /// 16×16 RGB, three convolutions.
    pub fn small(latent_size: usize) -> Self {
        Self { image_size: 16, channels: 3, ladder: vec![16, 32, 64], latent_size }
    }

    pub fn for_image_size(image_size: usize, latent_size: usize) -> Result<Self> {
        let cfg = match image_size {
            64 => Self::full(latent_size),
            16 => Self::small(latent_size),
            other => return Err(Error::Config(format!("image size must be 16 or 64, got {other}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 || self.channels == 0 {
            return Err(Error::Config("latent size and channels must be >= 1".into()));
        }
        if self.ladder.is_empty() || self.ladder.windows(2).any(|w| w[0] > w[1]) || self.ladder[0] == 0 {
            return Err(Error::Config(format!("encoder ladder {:?} must be non-empty and nondecreasing", self.ladder)));
        }
        let div = 1usize << self.ladder.len();
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{} for {} stride-2 stages",
                self.image_size,
                self.ladder.len(),
                self.ladder.len()
            )));
        }
        Ok(())
    }

    /// Spatial extent after each stage, starting with the input.
    pub fn spatial_trace(&self) -> Vec<usize> {
        (0..=self.ladder.len()).map(|i| self.image_size >> i).collect()
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            latent_size: self.latent_size,
            ladder: self.ladder.iter().rev().copied().collect(),
            channels: self.channels,
            image_size: self.image_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub latent_size: usize,
    /// Channel counts from the bottleneck outward, nonincreasing.
    pub ladder: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 || self.channels == 0 || self.ladder.is_empty() {
            return Err(Error::Config("decoder needs latent size, channels and a non-empty ladder".into()));
        }
        if self.image_size != 1 << (self.ladder.len() + 1) {
            return Err(Error::Config(format!(
                "decoder with {} layers of transposed convolution produces {}×{}, not {}",
                self.ladder.len() + 1,
                1 << (self.ladder.len() + 1),
                1 << (self.ladder.len() + 1),
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn num_deconv(&self) -> usize {
        self.ladder.len() + 1
    }

    pub fn spatial_trace(&self) -> Vec<usize> {
        (0..=self.num_deconv()).map(|i| 1 << i).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub latent_size: usize,
    pub hidden: Vec<usize>,
    pub leak: f64,
}

impl DiscriminatorConfig {
    pub fn new(latent_size: usize) -> Self {
        Self { latent_size, hidden: vec![256, 256, 256], leak: 0.2 }
    }
}

/// Kaiming-uniform draw: U(−b, b) with b = √(6 / fan_in).
fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape")
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), kaiming(&[fan_in, fan_out], fan_in, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = bind(tape, store, [self.weight, self.bias], frozen);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    transposed: bool,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (shape, fan_in) = if transposed {
            ([cin, cout, kernel, kernel], cout * kernel * kernel)
        } else {
            ([cout, cin, kernel, kernel], cin * kernel * kernel)
        };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), kaiming(&shape, fan_in, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            transposed,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = bind(tape, store, [self.weight, self.bias], false);
        let y = if self.transposed { tape.deconv2d(x, w, self.stride, 1)? } else { tape.conv2d(x, w, self.stride, 1)? };
        tape.add_bias(y, b)
    }
}

fn bind(tape: &mut Tape, store: &ParamStore, ids: [ParamId; 2], frozen: bool) -> (Var, Var) {
    if frozen {
        (tape.param_frozen(store, ids[0]), tape.param_frozen(store, ids[1]))
    } else {
        (tape.param(store, ids[0]), tape.param(store, ids[1]))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    convs: Vec<Conv>,
    head: Dense,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut cin = cfg.channels;
        for (i, &cout) in cfg.ladder.iter().enumerate() {
            convs.push(Conv::new(store, &format!("encoder.conv{i}"), cin, cout, ENCODER_KERNEL, 2, false, rng)?);
            cin = cout;
        }
        let last = *cfg.spatial_trace().last().unwrap();
        let flat = cin * last * last;
        let head = Dense::new(store, "encoder.head", flat, 2 * cfg.latent_size, rng)?;
        Ok(Self { cfg, convs, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Maps images (N×C×H×W) to `(μ, log σ²)`, each N×d.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let want = [self.cfg.channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Dimension(format!("encoder expects N×{:?} images, got {s:?}", want)));
        }
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(tape, store, h)?;
            h = tape.relu(y);
        }
        let n = s[0];
        let flat = tape.value(h).numel() / n;
        let h = tape.reshape(h, &[n, flat])?;
        let out = self.head.forward(tape, store, h, false)?;
        let d = self.cfg.latent_size;
        Ok((tape.slice_cols(out, 0, d)?, tape.slice_cols(out, d, d)?))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    input: Dense,
    conv: Conv,
    deconvs: Vec<Conv>,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let top = cfg.ladder[0];
        let input = Dense::new(store, "decoder.input", cfg.latent_size, top, rng)?;
        let conv = Conv::new(store, "decoder.conv", top, top, 3, 1, false, rng)?;
        let mut outs: Vec<usize> = cfg.ladder.clone();
        outs.push(cfg.channels);
        let mut deconvs = Vec::new();
        let mut cin = top;
        for (i, &cout) in outs.iter().enumerate() {
            deconvs.push(Conv::new(store, &format!("decoder.deconv{i}"), cin, cout, DECODER_KERNEL, 2, true, rng)?);
            cin = cout;
        }
        Ok(Self { cfg, input, conv, deconvs })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Maps latents (N×d) to image logits (N×C×H×W).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.cfg.latent_size {
            return Err(Error::Dimension(format!(
                "decoder expects N×{} latents, got {s:?}",
                self.cfg.latent_size
            )));
        }
        let h = self.input.forward(tape, store, z, false)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[s[0], self.cfg.ladder[0], 1, 1])?;
        let h = self.conv.forward(tape, store, h)?;
        let mut h = tape.relu(h);
        let last = self.deconvs.len() - 1;
        for (i, layer) in self.deconvs.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// MLP classifying latents as drawn from q(z) (logit 0) or from the product
/// of its marginals (logit 1).
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    layers: Vec<Dense>,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.latent_size == 0 {
            return Err(Error::Config("discriminator latent size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = cfg.latent_size;
        for (i, &width) in cfg.hidden.iter().chain(std::iter::once(&2)).enumerate() {
            layers.push(Dense::new(&mut params, &format!("discriminator.fc{i}"), fan_in, width, &mut rng)?);
            fan_in = width;
        }
        Ok(Self { cfg, layers, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// `(N×d) → (N×2)` logits. With `frozen`, the weights enter the tape as
    /// constants so only `z` receives gradient.
    pub fn forward(&self, tape: &mut Tape, z: Var, frozen: bool) -> Result<Var> {
        let mut h = z;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.params, h, frozen)?;
            if i != last {
                h = tape.leaky_relu(h, self.cfg.leak);
            }
        }
        Ok(h)
    }
}

/// Encoder and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Vae {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamStore,
}

impl Vae {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dec_cfg = cfg.decoder();
        let encoder = Encoder::new(cfg, &mut params, &mut rng)?;
        let decoder = Decoder::new(dec_cfg, &mut params, &mut rng)?;
        Ok(Self { encoder, decoder, params })
    }

    pub fn latent_size(&self) -> usize {
        self.encoder.cfg.latent_size
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.encoder.forward(tape, &self.params, x)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.decoder.forward(tape, &self.params, z)
    }

    /// Posterior parameters for a batch of images, without gradients.
    pub fn encode_batch(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (mu, lv) = self.encode(&mut tape, x)?;
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    /// Decoder logits for a batch of latents, without gradients.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }
}
