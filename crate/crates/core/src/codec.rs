//! Deterministic latent autoencoder: pixels `[3, H, W]` in `[-1, 1]` to
//! latents `[c, H/f, W/f]` and back.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{cosine_lr, gather_batch, Conv};
use crate::numerics::{
    adam_update_store, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Bound, Fragment, ParamId, ParamStore,
    Scalar, Tape, Tensor, Var,
};

pub const PREFIX: &str = "codec";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_size: usize,
    /// Spatial downsampling factor `f`; a power of two.
    pub downsample: usize,
    pub latent_channels: usize,
    pub base_width: usize,
}

impl CodecConfig {
    /// 32x32 images, `f = 4`, 4 latent channels.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            downsample: 4,
            latent_channels: 4,
            base_width: 16,
        }
    }

    /// `f = 8` for images of 64 pixels and up.
    pub fn wide(image_size: usize) -> Self {
        Self {
            image_size,
            downsample: 8,
            latent_channels: 4,
            base_width: 16,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size(), self.latent_size()]
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return invalid(format!("downsample factor must be a power of two >= 2, got {}", self.downsample));
        }
        if self.image_size % self.downsample != 0 {
            return invalid(format!(
                "image size {} not divisible by downsample factor {}",
                self.image_size, self.downsample
            ));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return invalid("codec widths must be positive");
        }
        Ok(())
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    store: ParamStore,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_up: Vec<Conv>,
    dec_out: Conv,
    shift: ParamId,
    scale: ParamId,
    trained: ParamId,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let n = |x: &str| format!("{PREFIX}.{x}");
        let widths: Vec<usize> = (0..=cfg.stages()).map(|i| cfg.base_width << i).collect();
        let top = *widths.last().unwrap();
        let enc_in = Conv::new(&mut s, &n("enc.in"), 3, widths[0], 3, 1, 2.0, &mut rng);
        let enc_down = (0..cfg.stages())
            .map(|i| Conv::new(&mut s, &n(&format!("enc.down{i}")), widths[i], widths[i + 1], 3, 2, 2.0, &mut rng))
            .collect();
        let enc_out = Conv::new(&mut s, &n("enc.out"), top, cfg.latent_channels, 3, 1, 1.0, &mut rng);
        let dec_in = Conv::new(&mut s, &n("dec.in"), cfg.latent_channels, top, 3, 1, 2.0, &mut rng);
        let dec_up = (0..cfg.stages())
            .rev()
            .map(|i| Conv::new(&mut s, &n(&format!("dec.up{i}")), widths[i + 1], widths[i], 3, 1, 2.0, &mut rng))
            .collect();
        let dec_out = Conv::new(&mut s, &n("dec.out"), widths[0], 3, 3, 1, 1.0, &mut rng);
        let shift = s.add(n("latent_shift"), Tensor::zeros(&[cfg.latent_channels]), false);
        let scale = s.add(n("latent_scale"), Tensor::full(&[cfg.latent_channels], 1.0), false);
        let trained = s.add(n("trained_epochs"), Tensor::zeros(&[1]), false);
        Ok(Self {
            cfg,
            store: s,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
            shift,
            scale,
            trained,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.store.get(self.trained).data()[0] > 0.0
    }

    pub fn encode_raw_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.enc_in.forward(tape, p, x)?;
        h = tape.silu(h)?;
        for conv in &self.enc_down {
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h)?;
        }
        self.enc_out.forward(tape, p, h)
    }

    pub fn decode_raw_on<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(tape, p, z)?;
        h = tape.silu(h)?;
        for conv in &self.dec_up {
            h = tape.upsample(h, 2)?;
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h)?;
        }
        self.dec_out.forward(tape, p, h)
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let f = self.cfg.downsample;
        if s.len() != 4 || s[1] != 3 || s[2] % f != 0 || s[3] % f != 0 {
            return invalid(format!(
                "encode expects [B, 3, H, W] with H, W divisible by {f}, got {s:?}"
            ));
        }
        if x.data().iter().any(|v| !(-1.0001..=1.0001).contains(v)) {
            return invalid("encode expects pixel values in [-1, 1]");
        }
        Ok(())
    }

    fn normalise(&self, raw: &Tensor, forward: bool) -> Tensor {
        let shift = self.store.get(self.shift).data();
        let scale = self.store.get(self.scale).data();
        let s = raw.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let d = raw.data();
        Tensor::from_fn(s, |i| {
            let ch = (i / plane) % c;
            if forward {
                (d[i] - shift[ch]) / scale[ch]
            } else {
                d[i] * scale[ch] + shift[ch]
            }
        })
    }

    /// Batch encode `[B, 3, H, W] -> [B, c, H/f, W/f]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        let mut tape = Tape::<f32>::inference();
        let p = tape.bind(&self.store);
        let xv = tape.constant(x.clone());
        let raw = self.encode_raw_on(&mut tape, &p, xv)?;
        self.normalise(tape.value(raw), true).ensure_finite("encode")
    }

    /// Batch decode `[B, c, h, w] -> [B, 3, h*f, w*f]`, clamped to `[-1, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.cfg.latent_channels {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: s.to_vec(),
                right: vec![0, self.cfg.latent_channels, 0, 0],
            });
        }
        let mut tape = Tape::<f32>::inference();
        let p = tape.bind(&self.store);
        let zv = tape.constant(self.normalise(z, false));
        let out = self.decode_raw_on(&mut tape, &p, zv)?;
        Ok(tape.value(out).clamp(-1.0, 1.0))
    }

    /// Encodes in chunks to bound memory.
    pub fn encode_all(&self, images: &[Tensor], chunk: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(images.len())).collect();
            let z = self.encode(&gather_batch(images, &idx)?)?;
            for i in 0..idx.len() {
                out.push(z.index0(i)?);
            }
        }
        Ok(out)
    }

    pub fn decode_all(&self, latents: &[Tensor], chunk: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(latents.len());
        for start in (0..latents.len()).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(latents.len())).collect();
            let x = self.decode(&gather_batch(latents, &idx)?)?;
            for i in 0..idx.len() {
                out.push(x.index0(i)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store.named())
    }

    pub fn load(cfg: CodecConfig, path: &Path) -> Result<Self> {
        let mut codec = Self::new(cfg, 0)?;
        codec.store.load_named(&load_checkpoint(path)?)?;
        Ok(codec)
    }

    /// Per-channel mean and standard deviation of raw latents, applied so
    /// that encoded latents are roughly standardised.
    fn fit_latent_stats(&mut self, images: &[Tensor]) -> Result<()> {
        let c = self.cfg.latent_channels;
        self.store.set(self.shift, Tensor::zeros(&[c]))?;
        self.store.set(self.scale, Tensor::full(&[c], 1.0))?;
        let lat = self.encode_all(images, 64)?;
        let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for z in &lat {
            let plane = z.len() / c;
            for (i, &v) in z.data().iter().enumerate() {
                sum[i / plane] += v as f64;
                sq[i / plane] += (v as f64) * (v as f64);
            }
            n += plane;
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&mean)
            .map(|(q, &m)| ((q / n as f64 - (m as f64).powi(2)).max(1e-8).sqrt()) as f32)
            .collect();
        self.store.set(self.shift, Tensor::new(&[c], mean)?)?;
        self.store.set(self.scale, Tensor::new(&[c], std)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1.5e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CodecTrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_mse: f64,
    pub heldout_mae: f64,
}

/// Mean squared and mean absolute reconstruction error over `images`.
pub fn reconstruction_error(codec: &Codec, images: &[Tensor]) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Ok((0.0, 0.0));
    }
    let lat = codec.encode_all(images, 64)?;
    let rec = codec.decode_all(&lat, 64)?;
    let (mut se, mut ae, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y) in images.iter().zip(&rec) {
        for (a, b) in x.data().iter().zip(y.data()) {
            let d = (a - b) as f64;
            se += d * d;
            ae += d.abs();
        }
        n += x.len();
    }
    Ok((se / n as f64, ae / n as f64))
}

pub fn train_codec(
    cfg: CodecConfig,
    train: &[Tensor],
    heldout: &[Tensor],
    tc: &CodecTrainConfig,
) -> Result<(Codec, CodecTrainReport)> {
    if train.is_empty() {
        return Err(Error::Dataset("codec training set is empty".into()));
    }
    let shape = train[0].shape().to_vec();
    if let Some(bad) = train.iter().chain(heldout).find(|t| t.shape() != shape.as_slice()) {
        return Err(Error::ShapeMismatch {
            op: "train_codec",
            left: shape,
            right: bad.shape().to_vec(),
        });
    }
    if shape != [3, cfg.image_size, cfg.image_size] {
        return invalid(format!("codec configured for {0}x{0} images, data is {shape:?}", cfg.image_size));
    }
    let mut codec = Codec::new(cfg, tc.seed)?;
    let mut state = AdamState::for_store(&codec.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xc0dec);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let mut report = CodecTrainReport::default();
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(tc.batch_size) {
            let x = gather_batch(train, chunk)?;
            let mut tape = Tape::<f32>::new();
            let p = tape.bind(&codec.store);
            let xv = tape.constant(x);
            let z = codec.encode_raw_on(&mut tape, &p, xv)?;
            let y = codec.decode_raw_on(&mut tape, &p, z)?;
            let loss = tape.mse(y, xv)?;
            epoch_loss += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?.for_params(&tape, &p);
            let adam = AdamConfig {
                lr: cosine_lr(tc.lr, step, total, 0.05),
                ..AdamConfig::default()
            };
            adam_update_store(&mut codec.store, &grads, &mut state, &adam)?;
            step += 1;
        }
        let avg = epoch_loss / train.len() as f64;
        info!("codec epoch {epoch}: mse {avg:.5}");
        report.epoch_losses.push(avg);
    }
    codec.fit_latent_stats(train)?;
    codec.store.set(codec.trained, Tensor::full(&[1], tc.epochs.max(1) as f32))?;
    let (mse, mae) = reconstruction_error(&codec, heldout)?;
    report.heldout_mse = mse;
    report.heldout_mae = mae;
    info!("codec held-out mse {mse:.5} mae {mae:.5}");
    Ok((codec, report))
}

/// Reconstruction loss of a fixed image batch, for gradient checking.
pub struct CodecFragment<'a> {
    pub codec: &'a Codec,
    pub images: Tensor,
}

impl Fragment for CodecFragment<'_> {
    fn params(&self) -> &ParamStore {
        &self.codec.store
    }

    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound) -> Result<Var> {
        let x = tape.constant(self.images.cast());
        let z = self.codec.encode_raw_on(tape, p, x)?;
        let y = self.codec.decode_raw_on(tape, p, z)?;
        tape.mse(y, x)
    }
}
