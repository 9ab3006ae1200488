//! Frozen raster ↔ latent codec.
//!
//! Elevation is replicated to three channels and encoded with the same
//! weights as RGB; decoded elevation is the channel mean.

use std::path::Path;

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::format::{Archive, Manifest};
use crate::nn::{AdamW, AdamWConfig, Conv2d, Graph, ParamStore, Tensor, Var};
use crate::raster::Mask;
use crate::rng::substream;

pub const RGB_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    ConvAutoencoder,
}

impl std::str::FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "conv" | "conv-autoencoder" => Ok(CodecKind::ConvAutoencoder),
            _ => Err(Error::param(format!("unknown codec kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for CodecKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CodecKind::Identity => "identity",
            CodecKind::ConvAutoencoder => "conv",
        })
    }
}

#[derive(Clone, Debug)]
struct ConvNet {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Codec {
    kind: CodecKind,
    downsample_factor: usize,
    latent_channels: usize,
    width: usize,
    params: ParamStore,
    net: Option<ConvNet>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl Codec {
    pub fn identity() -> Self {
        Self {
            kind: CodecKind::Identity,
            downsample_factor: 1,
            latent_channels: RGB_CHANNELS,
            width: 0,
            params: ParamStore::new(),
            net: None,
        }
    }

    /// Untrained convolutional autoencoder; `downsample_factor` must be a
    /// power of two.
    pub fn conv(downsample_factor: usize, latent_channels: usize, width: usize, seed: u64) -> Result<Self> {
        if downsample_factor < 2 || !downsample_factor.is_power_of_two() {
            return Err(Error::param(format!(
                "downsample factor must be a power of two >= 2, got {downsample_factor}"
            )));
        }
        if latent_channels == 0 || width == 0 {
            return Err(Error::param("codec widths must be positive"));
        }
        let mut rng = substream(seed, "codec.init", 0);
        let mut p = ParamStore::new();
        let levels = downsample_factor.trailing_zeros() as usize;
        let enc_in = Conv2d::new(&mut p, "enc.in", RGB_CHANNELS, width, 3, 1, 1.0, &mut rng);
        let enc_down = (0..levels)
            .map(|i| Conv2d::new(&mut p, &format!("enc.down{i}"), width, width, 3, 2, 1.0, &mut rng))
            .collect();
        let enc_out = Conv2d::new(&mut p, "enc.out", width, latent_channels, 3, 1, 1.0, &mut rng);
        let dec_in = Conv2d::new(&mut p, "dec.in", latent_channels, width, 3, 1, 1.0, &mut rng);
        let dec_up = (0..levels)
            .map(|i| Conv2d::new(&mut p, &format!("dec.up{i}"), width, width, 3, 1, 1.0, &mut rng))
            .collect();
        let dec_out = Conv2d::new(&mut p, "dec.out", width, RGB_CHANNELS, 3, 1, 1.0, &mut rng);
        Ok(Self {
            kind: CodecKind::ConvAutoencoder,
            downsample_factor,
            latent_channels,
            width,
            params: p,
            net: Some(ConvNet {
                enc_in,
                enc_down,
                enc_out,
                dec_in,
                dec_up,
                dec_out,
            }),
        })
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn downsample_factor(&self) -> usize {
        self.downsample_factor
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Latent `[C', H', W']` for a raster of spatial size `h × w`.
    pub fn latent_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        let f = self.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "raster {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok([self.latent_channels, h / f, w / f])
    }

    fn encode_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let net = self.net.as_ref().expect("conv codec");
        let h = net.enc_in.forward(g, x)?;
        let mut h = g.silu(h);
        for d in &net.enc_down {
            let y = d.forward(g, h)?;
            h = g.silu(y);
        }
        net.enc_out.forward(g, h)
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let net = self.net.as_ref().expect("conv codec");
        let h = net.dec_in.forward(g, z)?;
        let mut h = g.silu(h);
        for u in &net.dec_up {
            let up = g.upsample2x(h)?;
            let y = u.forward(g, up)?;
            h = g.silu(y);
        }
        net.dec_out.forward(g, h)
    }

    pub fn encode_rgb(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if c != RGB_CHANNELS {
            return Err(Error::shape(format!("encode_rgb needs 3 channels, got {c}")));
        }
        self.latent_shape(h, w)?;
        match self.kind {
            CodecKind::Identity => Ok(x.clone()),
            CodecKind::ConvAutoencoder => {
                let mut g = Graph::new(&self.params);
                let xi = g.input(x.clone());
                let z = self.encode_graph(&mut g, xi)?;
                Ok(g.value(z).clone())
            }
        }
    }

    pub fn encode_dem(&self, d: &Tensor) -> Result<Tensor> {
        self.encode_rgb(&replicate3(d)?)
    }

    /// Decodes to `[3, H, W]`, clamped to `[-1, 1]`.
    pub fn decode_rgb(&self, z: &Tensor) -> Result<Tensor> {
        let (c, _, _) = z.dims3()?;
        if c != self.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, codec expects {}",
                self.latent_channels
            )));
        }
        let raw = match self.kind {
            CodecKind::Identity => z.clone(),
            CodecKind::ConvAutoencoder => {
                let mut g = Graph::new(&self.params);
                let zi = g.input(z.clone());
                let out = self.decode_graph(&mut g, zi)?;
                g.value(out).clone()
            }
        };
        Ok(raw.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Decodes to `[1, H, W]` by averaging the three decoded channels.
    pub fn decode_dem(&self, z: &Tensor) -> Result<Tensor> {
        channel_mean(&self.decode_rgb(z)?)
    }

    /// Fits the autoencoder to `rasters` (each `[3, H, W]`) by mean squared
    /// reconstruction error. Returns the per-step loss trace.
    pub fn train(&mut self, rasters: &[Tensor], config: &CodecTrainConfig) -> Result<Vec<f64>> {
        if self.kind == CodecKind::Identity || config.iterations == 0 {
            return Ok(Vec::new());
        }
        if rasters.is_empty() {
            return Err(Error::param("codec training set is empty"));
        }
        let mut rng = substream(config.seed, "codec.train", 0);
        let mut opt = AdamW::new(
            &self.params,
            AdamWConfig {
                lr: config.learning_rate,
                ..Default::default()
            },
        );
        let b = config.batch_size.clamp(1, rasters.len());
        let mut trace = Vec::with_capacity(config.iterations);
        for _ in 0..config.iterations {
            let idx = sample_indices(&mut rng, rasters.len(), b);
            let mut grads = self.params.zeros_like();
            let mut loss = 0.0;
            for i in idx.iter() {
                let x = &rasters[i];
                let mut g = Graph::new(&self.params);
                let xi = g.input(x.clone());
                let z = self.encode_graph(&mut g, xi)?;
                let y = self.decode_graph(&mut g, z)?;
                let n = (x.len() * b) as f64;
                let diff = g.value(y).zip_map(x, |p, t| p - t)?;
                loss += diff.data().iter().map(|d| d * d).sum::<f64>() / n;
                let seed = diff.map(|d| 2.0 * d / n);
                g.backward_into(&[(y, &seed)], &mut grads)?;
            }
            if !loss.is_finite() {
                return Err(Error::param("codec training diverged"));
            }
            opt.step(&mut self.params, &grads);
            trace.push(loss);
        }
        Ok(trace)
    }

    /// Root-mean-square error of `decode_rgb(encode_rgb(x))` over `rasters`.
    pub fn reconstruction_rmse(&self, rasters: &[Tensor]) -> Result<f64> {
        let mut sse = 0.0;
        let mut n = 0usize;
        for x in rasters {
            let y = self.decode_rgb(&self.encode_rgb(x)?)?;
            sse += y.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += x.len();
        }
        Ok((sse / n.max(1) as f64).sqrt())
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        m.set("codec.kind", self.kind);
        m.set("codec.downsample", self.downsample_factor);
        m.set("codec.latent_channels", self.latent_channels);
        m.set("codec.width", self.width);
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Archive::from_params("codec", self.manifest(), &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?.expect_kind("codec", path)?;
        let kind: CodecKind = a.manifest.parse_value("codec.kind")?;
        let mut codec = match kind {
            CodecKind::Identity => Codec::identity(),
            CodecKind::ConvAutoencoder => Codec::conv(
                a.manifest.parse_value("codec.downsample")?,
                a.manifest.parse_value("codec.latent_channels")?,
                a.manifest.parse_value("codec.width")?,
                0,
            )?,
        };
        a.load_into(&mut codec.params)?;
        Ok(codec)
    }
}

/// `[1, H, W]` → `[3, H, W]` by stacking the channel three times.
pub fn replicate3(d: &Tensor) -> Result<Tensor> {
    let (c, _, _) = d.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("elevation raster needs 1 channel, got {c}")));
    }
    Tensor::concat_channels(&[d, d, d])
}

/// Mean of the three channels, written `c1 + ((c2 − c1) + (c3 − c1)) / 3`
/// so identical channels reduce to exactly `c1`.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("channel mean expects 3 channels, got {c}")));
    }
    let (a, b, d) = (x.channel(0), x.channel(1), x.channel(2));
    let data = (0..h * w)
        .map(|i| a[i] + ((b[i] - a[i]) + (d[i] - a[i])) / 3.0)
        .collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Conservative AND-pooling: a latent cell is valid iff every pixel of its
/// `factor × factor` footprint is valid.
pub fn resize_mask(m: &Mask, factor: usize) -> Result<Mask> {
    let (h, w) = m.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("mask {h}x{w} not divisible by factor {factor}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Mask::filled(ho, wo, true);
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) {
                out.set(r / factor, c / factor, false);
            }
        }
    }
    Ok(out)
}
