//! Joint RGB + elevation velocity predictor.
//!
//! ```text
//!  z_img ─┐                                   ┌─ head_img ─ v_img
//!         ├─ stem (shared weights) ─ mean ─ backbone ─┤
//!  z_dem ─┘            │ skip (mean)          └─ head_dem ─ v_dem
//!                      └──────────────────────────┴──────┘
//! ```
//!
//! The stem runs once per modality with the same weights; its outputs
//! (full-resolution skip and downsampled features) are averaged before the
//! backbone. Both heads receive the backbone output and the averaged skip.
//! Conditioning is a per-channel scale/shift computed from the time and
//! caption embeddings.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::format::{Archive, Manifest};
use crate::nn::{Conv2d, Graph, Linear, ParamId, ParamStore, ResBlock, Tensor, Var};
use crate::rng::{fnv1a, substream};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub stem_channels: usize,
    /// Backbone widths at 1/2 and 1/4 resolution.
    pub backbone_channels: [usize; 2],
    /// Caption/time embedding dimension `L`.
    pub embed_dim: usize,
    pub hash_buckets: usize,
    /// Training horizon `T`, used to scale the sinusoidal time features.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            stem_channels: 32,
            backbone_channels: [64, 128],
            embed_dim: 128,
            hash_buckets: 1024,
            timesteps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.latent_channels,
            self.stem_channels,
            self.backbone_channels[0],
            self.backbone_channels[1],
            self.hash_buckets,
            self.timesteps,
        ];
        if widths.contains(&0) {
            return Err(Error::param("denoiser sizes must be positive"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::param("embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    pub fn to_manifest(&self, m: &mut Manifest) {
        m.set("model.latent_channels", self.latent_channels);
        m.set("model.stem_channels", self.stem_channels);
        m.set(
            "model.channels",
            format!("{},{}", self.backbone_channels[0], self.backbone_channels[1]),
        );
        m.set("model.embed_dim", self.embed_dim);
        m.set("model.hash_buckets", self.hash_buckets);
        m.set("schedule.steps", self.timesteps);
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let ch = m.require("model.channels")?;
        let parts: Vec<usize> = ch
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::param(format!("bad model.channels {ch:?}")))?;
        let [a, b] = parts[..] else {
            return Err(Error::param(format!("model.channels needs two widths: {ch:?}")));
        };
        Ok(Self {
            latent_channels: m.parse_value("model.latent_channels")?,
            stem_channels: m.parse_value("model.stem_channels")?,
            backbone_channels: [a, b],
            embed_dim: m.parse_value("model.embed_dim")?,
            hash_buckets: m.parse_value("model.hash_buckets")?,
            timesteps: m.parse_value("schedule.steps")?,
        })
    }
}

/// Lowercased alphanumeric tokens (hyphens kept).
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !(c.is_alphanumeric() || c == '-'))
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sinusoidal features of `t / T` at geometrically spaced frequencies.
pub fn timestep_features(t: usize, horizon: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    // scale so t = T spans the slowest useful period
    let pos = t as f64 * 1000.0 / horizon as f64;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (pos * freq).sin();
        v[half + i] = (pos * freq).cos();
    }
    Tensor::from_vec(&[dim], v).expect("dim")
}

#[derive(Clone, Debug)]
struct Stem {
    conv_in: Conv2d,
    res: ResBlock,
    down: Conv2d,
}

#[derive(Clone, Debug)]
struct Backbone {
    res_hi: ResBlock,
    down: Conv2d,
    mid: ResBlock,
    up: Conv2d,
    merge: Conv2d,
    res_out: ResBlock,
}

#[derive(Clone, Debug)]
struct Head {
    up: Conv2d,
    merge: Conv2d,
    res: ResBlock,
    conv_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
    stem: Stem,
    backbone: Backbone,
    head_img: Head,
    head_dem: Head,
    time_in: Linear,
    time_out: Linear,
    caption_table: ParamId,
    caption_proj: Linear,
    null_embedding: ParamId,
}

/// Intermediate stem outputs of a forward pass, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct StemFeatures {
    pub skip_img: Tensor,
    pub skip_dem: Tensor,
    pub skip_mean: Tensor,
    pub down_mean: Tensor,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "denoiser.init", 0);
        let mut p = ParamStore::new();
        let c = &config;
        let (c0, c1, c2) = (c.stem_channels, c.backbone_channels[0], c.backbone_channels[1]);
        let l = c.embed_dim;
        let cond = Some(2 * l);
        let r = &mut rng;

        let stem = Stem {
            conv_in: Conv2d::new(&mut p, "stem.conv_in", c.latent_channels, c0, 3, 1, 1.0, r),
            res: ResBlock::new(&mut p, "stem.res", c0, None, r),
            down: Conv2d::new(&mut p, "stem.down", c0, c1, 3, 2, 1.0, r),
        };
        let backbone = Backbone {
            res_hi: ResBlock::new(&mut p, "backbone.res_hi", c1, cond, r),
            down: Conv2d::new(&mut p, "backbone.down", c1, c2, 3, 2, 1.0, r),
            mid: ResBlock::new(&mut p, "backbone.mid", c2, cond, r),
            up: Conv2d::new(&mut p, "backbone.up", c2, c1, 3, 1, 1.0, r),
            merge: Conv2d::new(&mut p, "backbone.merge", 2 * c1, c1, 3, 1, 1.0, r),
            res_out: ResBlock::new(&mut p, "backbone.res_out", c1, cond, r),
        };
        let head = |p: &mut ParamStore, name: &str, r: &mut crate::rng::StreamRng| Head {
            up: Conv2d::new(p, &format!("{name}.up"), c1, c0, 3, 1, 1.0, r),
            merge: Conv2d::new(p, &format!("{name}.merge"), 2 * c0, c0, 3, 1, 1.0, r),
            res: ResBlock::new(p, &format!("{name}.res"), c0, cond, r),
            conv_out: Conv2d::new(p, &format!("{name}.conv_out"), c0, c.latent_channels, 3, 1, 1.0, r),
        };
        let head_img = head(&mut p, "head_img", r);
        let head_dem = head(&mut p, "head_dem", r);

        let time_in = Linear::new(&mut p, "time.in", l, l, 1.0, r);
        let time_out = Linear::new(&mut p, "time.out", l, l, 1.0, r);
        let caption_table = p.add_init("caption.table", &[c.hash_buckets, l], 1, 1.0, r);
        let caption_proj = Linear::new(&mut p, "caption.proj", l, l, 1.0, r);
        let null = Tensor::randn(&[l], r);
        let null_embedding = p.add("caption.null", null);

        Ok(Self {
            config,
            params: p,
            stem,
            backbone,
            head_img,
            head_dem,
            time_in,
            time_out,
            caption_table,
            caption_proj,
            null_embedding,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn null_embedding(&self) -> &Tensor {
        self.params.get(self.null_embedding)
    }

    /// Hash-bucket rows for the caption's tokens.
    pub fn caption_rows(&self, prompt: &str) -> Vec<usize> {
        tokenize(prompt)
            .iter()
            .map(|tok| (fnv1a(tok.as_bytes()) % self.config.hash_buckets as u64) as usize)
            .collect()
    }

    pub fn caption_graph(&self, g: &mut Graph, prompt: &str) -> Result<Var> {
        let rows = self.caption_rows(prompt);
        if rows.is_empty() {
            return Ok(g.param(self.null_embedding));
        }
        let table = g.param(self.caption_table);
        let bag = g.embed_bag(table, rows)?;
        self.caption_proj.forward(g, bag)
    }

    /// Caption embedding of dimension `L`; text without tokens maps to the
    /// learned null embedding.
    pub fn embed_caption(&self, prompt: &str) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.caption_graph(&mut g, prompt)?;
        Ok(g.value(v).clone())
    }

    fn check_inputs(&self, x_img: &Tensor, x_dem: &Tensor) -> Result<()> {
        x_img.ensure_same_shape(x_dem, "modality latents")?;
        let (c, h, w) = x_img.dims3()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "latent spatial size {h}x{w} must be a positive multiple of 4"
            )));
        }
        Ok(())
    }

    fn conditioning(&self, g: &mut Graph, t: usize, caption: Var) -> Result<Var> {
        if t > self.config.timesteps {
            return Err(Error::param(format!(
                "timestep {t} beyond horizon {}",
                self.config.timesteps
            )));
        }
        let feats = g.input(timestep_features(t, self.config.timesteps, self.config.embed_dim));
        let h = self.time_in.forward(g, feats)?;
        let h = g.silu(h);
        let temb = self.time_out.forward(g, h)?;
        let joint = g.concat(temb, caption)?;
        Ok(g.silu(joint))
    }

    fn stem_forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let h = self.stem.conv_in.forward(g, x)?;
        let skip = self.stem.res.forward(g, h, None)?;
        let a = g.silu(skip);
        let down = self.stem.down.forward(g, a)?;
        Ok((skip, down))
    }

    fn head_forward(&self, head: &Head, g: &mut Graph, feat: Var, skip: Var, cond: Var) -> Result<Var> {
        let up = g.upsample2x(feat)?;
        let h = head.up.forward(g, up)?;
        let h = g.concat(h, skip)?;
        let h = head.merge.forward(g, h)?;
        let h = head.res.forward(g, h, Some(cond))?;
        let h = g.silu(h);
        head.conv_out.forward(g, h)
    }

    /// Records the full forward pass on `g`, returning `(v_img, v_dem)`.
    pub fn forward_graph(&self, g: &mut Graph, x_img: Var, x_dem: Var, t: usize, caption: Var) -> Result<(Var, Var)> {
        self.check_inputs(g.value(x_img), g.value(x_dem))?;
        if g.value(caption).len() != self.config.embed_dim {
            return Err(Error::shape(format!(
                "caption embedding has {} dims, model expects {}",
                g.value(caption).len(),
                self.config.embed_dim
            )));
        }
        let cond = self.conditioning(g, t, caption)?;

        let (skip_i, down_i) = self.stem_forward(g, x_img)?;
        let (skip_d, down_d) = self.stem_forward(g, x_dem)?;
        let skip = g.mean2(skip_i, skip_d)?;
        let feat = g.mean2(down_i, down_d)?;

        let b = &self.backbone;
        let hi = b.res_hi.forward(g, feat, Some(cond))?;
        let a = g.silu(hi);
        let lo = b.down.forward(g, a)?;
        let lo = b.mid.forward(g, lo, Some(cond))?;
        let up = g.upsample2x(lo)?;
        let up = b.up.forward(g, up)?;
        let merged = g.concat(up, hi)?;
        let merged = b.merge.forward(g, merged)?;
        let out = b.res_out.forward(g, merged, Some(cond))?;

        let v_img = self.head_forward(&self.head_img, g, out, skip, cond)?;
        let v_dem = self.head_forward(&self.head_dem, g, out, skip, cond)?;
        Ok((v_img, v_dem))
    }

    /// Velocity predictions for both modalities under a fixed embedding.
    pub fn forward(&self, x_img: &Tensor, x_dem: &Tensor, t: usize, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_inputs(x_img, x_dem)?;
        let mut g = Graph::new(&self.params);
        let xi = g.input(x_img.clone());
        let xd = g.input(x_dem.clone());
        let c = g.input(cond.clone());
        let (vi, vd) = self.forward_graph(&mut g, xi, xd, t, c)?;
        Ok((g.value(vi).clone(), g.value(vd).clone()))
    }

    pub fn stem_features(&self, x_img: &Tensor, x_dem: &Tensor) -> Result<StemFeatures> {
        self.check_inputs(x_img, x_dem)?;
        let mut g = Graph::new(&self.params);
        let xi = g.input(x_img.clone());
        let xd = g.input(x_dem.clone());
        let (si, di) = self.stem_forward(&mut g, xi)?;
        let (sd, dd) = self.stem_forward(&mut g, xd)?;
        let skip = g.mean2(si, sd)?;
        let down = g.mean2(di, dd)?;
        Ok(StemFeatures {
            skip_img: g.value(si).clone(),
            skip_dem: g.value(sd).clone(),
            skip_mean: g.value(skip).clone(),
            down_mean: g.value(down).clone(),
        })
    }

    /// Swaps the parameters of the two heads in place.
    pub fn swap_heads(&mut self) {
        let pairs: Vec<(ParamId, ParamId)> = self
            .params
            .ids()
            .filter_map(|id| {
                let name = self.params.name(id);
                let other = name.strip_prefix("head_img.")?;
                Some((id, self.params.find(&format!("head_dem.{other}"))?))
            })
            .collect();
        for (a, b) in pairs {
            let ta = self.params.get(a).clone();
            let tb = std::mem::replace(self.params.get_mut(b), ta);
            *self.params.get_mut(a) = tb;
        }
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        self.config.to_manifest(&mut m);
        m
    }

    /// Saves weights plus `extra` manifest entries (e.g. codec reference).
    pub fn save(&self, path: &Path, extra: &Manifest) -> Result<()> {
        let mut m = self.manifest();
        for (k, v) in extra.entries() {
            m.set(k.clone(), v);
        }
        Archive::from_params("denoiser", m, &self.params).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Manifest)> {
        let a = Archive::load(path)?.expect_kind("denoiser", path)?;
        let config = DenoiserConfig::from_manifest(&a.manifest)?;
        let mut model = DenoiserModel::new(config, 0)?;
        a.load_into(&mut model.params)?;
        Ok((model, a.manifest))
    }

    /// Draws params uniformly for tests that need a non-init state.
    pub fn perturb_params<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for id in self.params.ids().collect::<Vec<_>>() {
            for v in self.params.get_mut(id).data_mut() {
                *v += scale * rng.random_range(-1.0..1.0);
            }
        }
    }
}
