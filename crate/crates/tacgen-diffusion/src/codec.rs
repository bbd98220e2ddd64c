//! Small convolutional autoencoder mapping background-subtracted tactile
//! frames (and channel-broadcast contact masks) to a compact latent grid.
//! Trained once, then frozen; every diffusion model records the fingerprint
//! of the codec it was trained against.

use crate::error::{DiffusionError, Result};
use crate::net::Params;
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tacgen_core::rng::tagged_rng;
use tacgen_core::{ContactMask, Manifest, Split, TactileImage};
use tacgen_nn::{AdamW, ParamStore, Tape};

/// Latent layout is channels-first: (c, h, w).
pub type Latent = Array3<f64>;

pub const MIN_TRAIN_IMAGES: usize = 500;
const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    /// Spatial downsampling factor; 4 for the trained codec, 1 for identity.
    pub factor: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    /// Validation reconstruction SSIM the training run must reach.
    pub gate_ssim: f64,
    /// Fraction of training items drawn from the mask pool.
    pub mask_mix: f64,
    pub identity: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            latent_channels: 4,
            hidden: 16,
            steps: 1500,
            batch: 8,
            lr_start: 2e-3,
            lr_end: 2e-4,
            weight_decay: 1e-4,
            gate_ssim: 0.90,
            mask_mix: 0.25,
            identity: false,
        }
    }
}

impl CodecConfig {
    pub fn identity() -> Self {
        Self {
            factor: 1,
            latent_channels: 3,
            hidden: 0,
            steps: 0,
            batch: 0,
            lr_start: 0.0,
            lr_end: 0.0,
            weight_decay: 0.0,
            gate_ssim: 0.0,
            mask_mix: 0.0,
            identity: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.identity {
            if self.factor != 1 || self.latent_channels != 3 {
                return Err(DiffusionError::Invalid(
                    "identity codec requires factor 1 and 3 channels".into(),
                ));
            }
            return Ok(());
        }
        if self.factor != 4 {
            return Err(DiffusionError::Invalid(format!(
                "trained codec supports factor 4, got {}",
                self.factor
            )));
        }
        if self.latent_channels == 0 || self.hidden == 0 || self.batch == 0 {
            return Err(DiffusionError::Invalid("codec dims must be nonzero".into()));
        }
        Ok(())
    }
}

pub struct Codec {
    store: ParamStore,
    config: CodecConfig,
    lat_mean: Vec<f64>,
    lat_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_metric: f64,
}

fn init_codec_params(config: &CodecConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = tagged_rng(seed, "codec.init", 0);
    let h = config.hidden;
    let c = config.latent_channels;
    let spec: &[(&str, usize, usize)] = &[
        ("ae.e1", 3, h),
        ("ae.e2", h, 2 * h),
        ("ae.e3", 2 * h, c),
        ("ae.d1", c, 2 * h),
        ("ae.d2", 2 * h, h),
        ("ae.d3", h, 3),
    ];
    for (name, ci, co) in spec {
        let (w, b) = tacgen_nn::init::conv_init(&mut rng, *ci, *co, 3);
        store.add(&format!("{name}.w"), w);
        store.add(&format!("{name}.b"), b);
    }
    store
}

fn conv_block(tape: &mut Tape, p: &Params, name: &str, x: tacgen_nn::NodeId) -> tacgen_nn::NodeId {
    let w = p.node(tape, &format!("{name}.w"));
    let b = p.node(tape, &format!("{name}.b"));
    tape.conv2d(x, w, b, 1)
}

fn encoder_forward(tape: &mut Tape, p: &Params, x: tacgen_nn::NodeId) -> tacgen_nn::NodeId {
    let h = conv_block(tape, p, "ae.e1", x);
    let h = tape.silu(h);
    let h = tape.max_pool2(h);
    let h = conv_block(tape, p, "ae.e2", h);
    let h = tape.silu(h);
    let h = tape.max_pool2(h);
    conv_block(tape, p, "ae.e3", h)
}

fn decoder_forward(tape: &mut Tape, p: &Params, z: tacgen_nn::NodeId) -> tacgen_nn::NodeId {
    let h = conv_block(tape, p, "ae.d1", z);
    let h = tape.silu(h);
    let h = tape.upsample2(h);
    let h = conv_block(tape, p, "ae.d2", h);
    let h = tape.silu(h);
    let h = tape.upsample2(h);
    let h = conv_block(tape, p, "ae.d3", h);
    tape.sigmoid_op(h)
}

/// Image as (3, h, w) floats in [0, 1].
fn image_to_chw(img: &TactileImage) -> Array3<f64> {
    let hwc = img.to_f64();
    let (h, w, _) = hwc.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| hwc[(y, x, c)])
}

fn chw_to_image(chw: &Array3<f64>) -> TactileImage {
    let (_, h, w) = chw.dim();
    let hwc = Array3::from_shape_fn((h, w, 3), |(y, x, c)| chw[(c, y, x)]);
    TactileImage::from_f64(&hwc)
}

fn mask_to_chw(mask: &ContactMask) -> Array3<f64> {
    let m = mask.to_f64();
    let (h, w) = m.dim();
    Array3::from_shape_fn((3, h, w), |(_, y, x)| m[(y, x)])
}

impl Codec {
    pub fn identity() -> Self {
        Self {
            store: ParamStore::new(),
            config: CodecConfig::identity(),
            lat_mean: vec![0.5; 3],
            lat_std: vec![0.5; 3],
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        if self.config.identity {
            "identity:f1:c3".to_string()
        } else {
            self.store.fingerprint()
        }
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.config.factor;
        if h == 0 || w == 0 || h % (f.max(1)) != 0 || w % (f.max(1)) != 0 {
            return Err(DiffusionError::Invalid(format!(
                "input {h}x{w} not divisible by codec factor {f}"
            )));
        }
        Ok(())
    }

    /// Encode a batch of (3, h, w) float images already in [0, 1].
    pub fn encode_batch(&self, imgs: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c_in, h, w) = imgs.dim();
        if c_in != 3 {
            return Err(DiffusionError::ShapeMismatch {
                context: "encode",
                expected: vec![n, 3, h, w],
                actual: vec![n, c_in, h, w],
            });
        }
        self.check_input(h, w)?;
        let raw = if self.config.identity {
            imgs.clone()
        } else {
            let mut tape = Tape::new();
            let p = Params::frozen(&self.store);
            let x = tape.constant(imgs.clone());
            let z = encoder_forward(&mut tape, &p, x);
            tape.value(z)
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("encoder output is 4d")
        };
        let mut out = raw;
        for ch in 0..self.config.latent_channels {
            let (m, s) = (self.lat_mean[ch], self.lat_std[ch]);
            out.index_axis_mut(ndarray::Axis(1), ch).mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn decode_batch(&self, latents: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c, h, w) = latents.dim();
        if c != self.config.latent_channels {
            return Err(DiffusionError::ShapeMismatch {
                context: "decode",
                expected: vec![n, self.config.latent_channels, h, w],
                actual: vec![n, c, h, w],
            });
        }
        let mut denorm = latents.clone();
        for ch in 0..c {
            let (m, s) = (self.lat_mean[ch], self.lat_std[ch]);
            denorm.index_axis_mut(ndarray::Axis(1), ch).mapv_inplace(|v| v * s + m);
        }
        if self.config.identity {
            return Ok(denorm.mapv(|v| v.clamp(0.0, 1.0)));
        }
        let mut tape = Tape::new();
        let p = Params::frozen(&self.store);
        let z = tape.constant(denorm);
        let y = decoder_forward(&mut tape, &p, z);
        Ok(tape
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("decoder output is 4d"))
    }

    /// Encode one background-subtracted image.
    pub fn encode_image(&self, diff: &TactileImage) -> Result<Latent> {
        let chw = image_to_chw(diff);
        let (c, h, w) = chw.dim();
        let batch = chw.into_shape_with_order((1, c, h, w)).expect("insert batch axis");
        let z = self.encode_batch(&batch)?;
        let (_, zc, zh, zw) = z.dim();
        Ok(z.into_shape_with_order((zc, zh, zw)).expect("drop batch axis"))
    }

    /// Masks share the image codec; the single channel is broadcast to 3.
    pub fn encode_mask(&self, mask: &ContactMask) -> Result<Latent> {
        let chw = mask_to_chw(mask);
        let (c, h, w) = chw.dim();
        let batch = chw.into_shape_with_order((1, c, h, w)).expect("insert batch axis");
        let z = self.encode_batch(&batch)?;
        let (_, zc, zh, zw) = z.dim();
        Ok(z.into_shape_with_order((zc, zh, zw)).expect("drop batch axis"))
    }

    pub fn decode_image(&self, z: &Latent) -> Result<TactileImage> {
        let (c, h, w) = z.dim();
        let batch = z.clone().into_shape_with_order((1, c, h, w)).expect("insert batch axis");
        let y = self.decode_batch(&batch)?;
        let (_, yc, yh, yw) = y.dim();
        let chw = y.into_shape_with_order((yc, yh, yw)).expect("drop batch axis");
        Ok(chw_to_image(&chw))
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (self.config.latent_channels, h / self.config.factor, w / self.config.factor)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut store = self.store.clone();
        store.meta.insert("kind".into(), "codec".into());
        store
            .meta
            .insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        store
            .meta
            .insert("lat_mean".into(), serde_json::to_string(&self.lat_mean).expect("serializes"));
        store
            .meta
            .insert("lat_std".into(), serde_json::to_string(&self.lat_std).expect("serializes"));
        store.save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let get = |k: &str| -> Result<&String> {
            store
                .meta
                .get(k)
                .ok_or_else(|| DiffusionError::Invalid(format!("codec file missing meta key {k}")))
        };
        if get("kind")? != "codec" {
            return Err(DiffusionError::Invalid("not a codec weights file".into()));
        }
        let config: CodecConfig = serde_json::from_str(get("config")?)
            .map_err(|e| DiffusionError::Invalid(format!("bad codec config: {e}")))?;
        let lat_mean: Vec<f64> = serde_json::from_str(get("lat_mean")?)
            .map_err(|e| DiffusionError::Invalid(format!("bad codec stats: {e}")))?;
        let lat_std: Vec<f64> = serde_json::from_str(get("lat_std")?)
            .map_err(|e| DiffusionError::Invalid(format!("bad codec stats: {e}")))?;
        Ok(Self {
            store,
            config,
            lat_mean,
            lat_std,
        })
    }
}

fn stack_chw(items: &[&Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = items[0].dim();
    let mut out = Array4::zeros((items.len(), c, h, w));
    for (i, it) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(it);
    }
    out
}

/// Train the codec on the manifest's train split (background-subtracted
/// images plus broadcast masks), then gate on validation reconstruction SSIM.
pub fn train_codec(manifest: &Manifest, config: &CodecConfig, seed: u64) -> Result<(Codec, TrainReport)> {
    config.validate()?;
    if config.identity {
        return Ok((
            Codec::identity(),
            TrainReport {
                losses: vec![],
                final_metric: 1.0,
            },
        ));
    }

    let mut train_imgs: Vec<Array3<f64>> = Vec::new();
    let mut mask_imgs: Vec<Array3<f64>> = Vec::new();
    let mut val_imgs: Vec<TactileImage> = Vec::new();
    for s in &manifest.samples {
        match s.split {
            Split::Train => {
                let img = manifest.load_image(s)?;
                let bg = manifest.load_background(s)?;
                let diff = tacgen_core::image::subtract_background(&img, &bg)?;
                train_imgs.push(image_to_chw(&diff));
                let mask = manifest.load_mask(s)?;
                if !mask.is_empty() {
                    mask_imgs.push(mask_to_chw(&mask));
                }
            }
            Split::Val => {
                let img = manifest.load_image(s)?;
                let bg = manifest.load_background(s)?;
                val_imgs.push(tacgen_core::image::subtract_background(&img, &bg)?);
            }
            Split::Test => {}
        }
    }
    if train_imgs.len() < MIN_TRAIN_IMAGES {
        return Err(DiffusionError::InsufficientData {
            have: train_imgs.len(),
            need: MIN_TRAIN_IMAGES,
        });
    }

    let mut store = init_codec_params(config, seed);
    let mut opt = AdamW::new(&store, config.lr_start, config.weight_decay);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = tagged_rng(seed, "codec.step", step as u64);
        let mut batch_refs: Vec<&Array3<f64>> = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let from_masks = !mask_imgs.is_empty() && rng.random_bool(config.mask_mix);
            if from_masks {
                batch_refs.push(&mask_imgs[rng.random_range(0..mask_imgs.len())]);
            } else {
                batch_refs.push(&train_imgs[rng.random_range(0..train_imgs.len())]);
            }
        }
        let x = stack_chw(&batch_refs);
        let target = x.clone().into_dyn();

        let mut tape = Tape::new();
        let p = Params::trainable(&store);
        let xn = tape.constant(x);
        let z = encoder_forward(&mut tape, &p, xn);
        let y = decoder_forward(&mut tape, &p, z);
        let l1 = tape.l1_loss(y, &target, None);
        let l2 = tape.mse_loss(y, &target, None);
        let loss = tape.add_scaled(l1, l2, 0.5, 0.5);
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss, store.len());
        opt.lr = tacgen_nn::cosine_lr(step as u64, config.steps as u64, config.lr_start, config.lr_end);
        opt.step(&mut store, &grads);
    }

    // Latent statistics from a fixed subset of the train pool.
    let mut codec = Codec {
        store,
        config: config.clone(),
        lat_mean: vec![0.0; config.latent_channels],
        lat_std: vec![1.0; config.latent_channels],
    };
    let mut stat_rng = tagged_rng(seed, "codec.stats", 0);
    let mut idx: Vec<usize> = (0..train_imgs.len()).collect();
    idx.shuffle(&mut stat_rng);
    idx.truncate(256.min(train_imgs.len()));
    let mut sums = vec![0.0; config.latent_channels];
    let mut sqs = vec![0.0; config.latent_channels];
    let mut count = 0usize;
    for chunk in idx.chunks(32) {
        let refs: Vec<&Array3<f64>> = chunk.iter().map(|&i| &train_imgs[i]).collect();
        let z = codec.encode_batch(&stack_chw(&refs))?;
        let (n, _, zh, zw) = z.dim();
        count += n * zh * zw;
        for ch in 0..config.latent_channels {
            let view = z.index_axis(ndarray::Axis(1), ch);
            sums[ch] += view.sum();
            sqs[ch] += view.iter().map(|v| v * v).sum::<f64>();
        }
    }
    for ch in 0..config.latent_channels {
        let mean = sums[ch] / count as f64;
        let var = (sqs[ch] / count as f64 - mean * mean).max(0.0);
        codec.lat_mean[ch] = mean;
        codec.lat_std[ch] = var.sqrt().max(STD_FLOOR);
    }

    // Validation gate.
    let mut ssim_sum = 0.0;
    for img in &val_imgs {
        let z = codec.encode_image(img)?;
        let recon = codec.decode_image(&z)?;
        ssim_sum += tacgen_core::metrics::ssim(&recon, img)?;
    }
    let final_metric = if val_imgs.is_empty() { 0.0 } else { ssim_sum / val_imgs.len() as f64 };
    if final_metric < config.gate_ssim {
        return Err(DiffusionError::CodecNotConverged {
            achieved: final_metric,
            required: config.gate_ssim,
            steps: config.steps,
        });
    }
    Ok((codec, TrainReport { losses, final_metric }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_codec_roundtrips_within_quantization() {
        let codec = Codec::identity();
        let img = TactileImage::from_f64(&Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 13) % 255) as f64 / 255.0
        }));
        let z = codec.encode_image(&img).unwrap();
        assert_eq!(z.dim(), (3, 8, 8));
        let back = codec.decode_image(&z).unwrap();
        assert_eq!(img.mean_abs_diff(&back), 0.0);
    }

    #[test]
    fn identity_codec_centers_latents() {
        let codec = Codec::identity();
        let img = TactileImage::from_f64(&Array3::from_elem((4, 4, 3), 0.5));
        let z = codec.encode_image(&img).unwrap();
        // Mid-gray maps near zero under (v - 0.5) / 0.5.
        assert!(z.iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn trained_codec_shapes_and_determinism() {
        let config = CodecConfig::default();
        let store = init_codec_params(&config, 7);
        let codec = Codec {
            store,
            config,
            lat_mean: vec![0.0; 4],
            lat_std: vec![1.0; 4],
        };
        let img = TactileImage::from_f64(&Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y + 2 * x + 3 * c) % 9) as f64 / 9.0
        }));
        let z1 = codec.encode_image(&img).unwrap();
        let z2 = codec.encode_image(&img).unwrap();
        assert_eq!(z1.dim(), (4, 4, 4));
        assert_eq!(z1, z2);
        let y = codec.decode_image(&z1).unwrap();
        assert_eq!(y.height(), 16);
        assert_eq!(y.width(), 16);
        // Mask broadcast path shares the encoder.
        let mut mask = ContactMask::zeros(16, 16);
        for y in 4..10 {
            for x in 6..12 {
                mask.set(x, y, 1);
            }
        }
        let zm = codec.encode_mask(&mask).unwrap();
        assert_eq!(zm.dim(), (4, 4, 4));
        assert_ne!(zm, z1);
    }

    #[test]
    fn odd_input_dims_are_rejected() {
        let codec = Codec {
            store: init_codec_params(&CodecConfig::default(), 1),
            config: CodecConfig::default(),
            lat_mean: vec![0.0; 4],
            lat_std: vec![1.0; 4],
        };
        let img = TactileImage::from_f64(&Array3::zeros((10, 10, 3)));
        assert!(codec.encode_image(&img).is_err());
    }

    #[test]
    fn save_load_preserves_fingerprint_and_outputs() {
        let config = CodecConfig::default();
        let codec = Codec {
            store: init_codec_params(&config, 9),
            config,
            lat_mean: vec![0.1, -0.2, 0.3, 0.0],
            lat_std: vec![1.0, 2.0, 0.5, 1.5],
        };
        let dir = std::env::temp_dir().join(format!("tacgen-codec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("codec.tacw");
        codec.save(&path).unwrap();
        let loaded = Codec::load(&path).unwrap();
        assert_eq!(codec.fingerprint(), loaded.fingerprint());
        let img = TactileImage::from_f64(&Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y * 5 + x * 3 + c) % 7) as f64 / 7.0
        }));
        let a = codec.encode_image(&img).unwrap();
        let b = loaded.encode_image(&img).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
    }
}
