//! DDIM sampling of the joint latent pair under classifier-free guidance.

use rand::Rng;

use crate::codec::Codec;
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::substream;
use crate::schedules::{from_v, NoiseSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub prompt: String,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.0,
            eta: 0.0,
            seed: 0,
            prompt: String::new(),
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps must be >= 1"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::param(format!(
                "guidance scale {} must be >= 0",
                self.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Anything that predicts joint velocities from noisy latents.
pub trait JointDenoiser {
    fn velocity(&self, z_img: &Tensor, z_dem: &Tensor, t: usize, cond: &Tensor) -> Result<(Tensor, Tensor)>;
}

impl JointDenoiser for DenoiserModel {
    fn velocity(&self, z_img: &Tensor, z_dem: &Tensor, t: usize, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward(z_img, z_dem, t, cond)
    }
}

/// Where the guidance extrapolation is applied. Both give the same step
/// because `ε̂` is affine in `v` for fixed `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GuidanceSpace {
    #[default]
    Velocity,
    Epsilon,
}

/// `t_i = round(T (n − i) / n)` for `i = 0..=n`, from `T` down to 0.
pub fn timesteps(steps: usize, horizon: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > horizon {
        return Err(Error::param(format!("steps {steps} must lie in [1, {horizon}]")));
    }
    Ok((0..=steps)
        .map(|i| ((horizon * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect())
}

/// DDPM posterior std between two timesteps, scaled by `eta`.
pub fn ddim_tau(sched: &NoiseSchedule, t_from: usize, t_to: usize, eta: f64) -> f64 {
    let (af, sf) = (sched.alpha(t_from), sched.sigma(t_from));
    let (at, st) = (sched.alpha(t_to), sched.sigma(t_to));
    if eta == 0.0 || st == 0.0 {
        return 0.0;
    }
    let var = (st * st) / (sf * sf) * (1.0 - (af * af) / (at * at));
    eta * var.max(0.0).sqrt()
}

/// Conditional and unconditional embeddings for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance<'a> {
    pub cond: &'a Tensor,
    pub uncond: &'a Tensor,
    pub scale: f64,
    pub space: GuidanceSpace,
}

fn guided_v<D: JointDenoiser + ?Sized>(
    model: &D,
    z_img: &Tensor,
    z_dem: &Tensor,
    t: usize,
    g: &Guidance,
) -> Result<[(Tensor, Tensor); 2]> {
    // w = 1 and w = 0 are single-branch, so they reproduce plain sampling exactly
    if g.scale == 1.0 {
        let v = model.velocity(z_img, z_dem, t, g.cond)?;
        return Ok([(v.0.clone(), v.0), (v.1.clone(), v.1)]);
    }
    let (ui, ud) = model.velocity(z_img, z_dem, t, g.uncond)?;
    if g.scale == 0.0 {
        return Ok([(ui.clone(), ui), (ud.clone(), ud)]);
    }
    let (ci, cd) = model.velocity(z_img, z_dem, t, g.cond)?;
    Ok([(ci, ui), (cd, ud)])
}

fn combine(c: &Tensor, u: &Tensor, w: f64) -> Result<Tensor> {
    if w == 1.0 {
        return Ok(c.clone());
    }
    if w == 0.0 {
        return Ok(u.clone());
    }
    u.zip_map(c, |u, c| u + w * (c - u))
}

/// `(x̂, ε̂)` for one modality under guidance.
fn guided_estimate(
    z: &Tensor,
    (vc, vu): &(Tensor, Tensor),
    t: usize,
    w: f64,
    space: GuidanceSpace,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    match space {
        GuidanceSpace::Velocity => from_v(z, &combine(vc, vu, w)?, t, sched),
        GuidanceSpace::Epsilon => {
            let (_, ec) = from_v(z, vc, t, sched)?;
            let (_, eu) = from_v(z, vu, t, sched)?;
            let eps = combine(&ec, &eu, w)?;
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            let x = z.zip_map(&eps, |z, e| (z - s * e) / a)?;
            Ok((x, eps))
        }
    }
}

/// One DDIM update of both modalities from `t_from` to `t_to`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<D: JointDenoiser + ?Sized, R: Rng + ?Sized>(
    model: &D,
    z_img: &Tensor,
    z_dem: &Tensor,
    t_from: usize,
    t_to: usize,
    guidance: &Guidance,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if t_from <= t_to {
        return Err(Error::param(format!(
            "ddim step needs t_from > t_to, got {t_from} -> {t_to}"
        )));
    }
    if t_from > sched.steps() {
        return Err(Error::param(format!(
            "t_from {t_from} beyond horizon {}",
            sched.steps()
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param(format!("eta {eta} outside [0, 1]")));
    }
    let v = guided_v(model, z_img, z_dem, t_from, guidance)?;
    let at = sched.alpha(t_to);
    let tau = ddim_tau(sched, t_from, t_to, eta);
    let dir = if tau == 0.0 {
        sched.sigma(t_to)
    } else {
        (sched.sigma(t_to).powi(2) - tau * tau).max(0.0).sqrt()
    };
    let mut out = Vec::with_capacity(2);
    for (z, pair) in [(z_img, &v[0]), (z_dem, &v[1])] {
        let (x, e) = guided_estimate(z, pair, t_from, guidance.scale, guidance.space, sched)?;
        let mut next = x.zip_map(&e, |x, e| at * x + dir * e)?;
        if tau > 0.0 {
            let xi = Tensor::randn(z.shape(), rng);
            next.add_assign(&xi.map(|n| tau * n));
        }
        out.push(next);
    }
    let dem = out.pop().expect("two modalities");
    let img = out.pop().expect("two modalities");
    Ok((img, dem))
}

/// Runs the full schedule from independent `N(0, I)` draws.
pub fn sample_latents<D: JointDenoiser + ?Sized>(
    model: &D,
    shape: &[usize],
    guidance: &Guidance,
    config: &SampleConfig,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    config.validate()?;
    let ts = timesteps(config.steps, sched.steps())?;
    let mut z_img = Tensor::randn(shape, &mut substream(config.seed, "sample.eps_img", 0));
    let mut z_dem = Tensor::randn(shape, &mut substream(config.seed, "sample.eps_dem", 0));
    let mut rng = substream(config.seed, "sample.ddim", 0);
    for pair in ts.windows(2) {
        (z_img, z_dem) = ddim_step(
            model, &z_img, &z_dem, pair[0], pair[1], guidance, config.eta, sched, &mut rng,
        )?;
    }
    Ok((z_img, z_dem))
}

/// Decoded sample: RGB in `[-1, 1]`, elevation both normalized and in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub rgb: Tensor,
    pub dem_normalized: Tensor,
    pub dem_metres: Tensor,
}

/// Maps `[-1, 1]` back to `[lo, hi]` metres.
pub fn denormalize_elevation(d: &Tensor, (lo, hi): (f64, f64)) -> Tensor {
    d.map(|v| lo + (v + 1.0) * 0.5 * (hi - lo))
}

/// Samples latents for `config.prompt` at raster size `h × w` and decodes.
pub fn generate(
    model: &DenoiserModel,
    codec: &Codec,
    config: &SampleConfig,
    sched: &NoiseSchedule,
    (h, w): (usize, usize),
    elevation_bounds: (f64, f64),
) -> Result<Generated> {
    let shape = codec.latent_shape(h, w)?;
    let cond = model.embed_caption(&config.prompt)?;
    let uncond = model.null_embedding().clone();
    let guidance = Guidance {
        cond: &cond,
        uncond: &uncond,
        scale: config.guidance_scale,
        space: GuidanceSpace::Velocity,
    };
    let (zi, zd) = sample_latents(model, &shape, &guidance, config, sched)?;
    let rgb = codec.decode_rgb(&zi)?;
    let dem_normalized = codec.decode_dem(&zd)?;
    let dem_metres = denormalize_elevation(&dem_normalized, elevation_bounds);
    Ok(Generated {
        rgb,
        dem_normalized,
        dem_metres,
    })
}
