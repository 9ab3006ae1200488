//! Masked joint v-prediction training.
//!
//! Each sample draws one timestep shared by both modalities and two
//! independent noise tensors. Clean latents are zeroed outside the valid
//! mask before noising, so masked positions carry no information about the
//! data and contribute nothing to the loss or its gradients.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::captioner::{render_prompt, CaptionDescriptors, Descriptor, DescriptorSet};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Grads, Graph, ParamId, ParamStore, Tensor};
use crate::raster::Mask;
use crate::rng::substream;
use crate::schedules::{noise, to_v, NoiseSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub timesteps: usize,
    pub p_uncond: f64,
    pub p_partial: f64,
    pub seed: u64,
    pub loss_weights: (f64, f64),
    pub weight_decay: f64,
    /// Decay of an exponential moving average of the weights; 0 disables it.
    /// When enabled, the hook and the final model see the averaged weights.
    pub ema_decay: f64,
    /// Run per-sample passes on the rayon pool. Results are identical
    /// either way because gradients are reduced in sample order.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 80_000,
            learning_rate: 1e-5,
            timesteps: 1000,
            p_uncond: 0.1,
            p_partial: 0.5,
            seed: 0,
            loss_weights: (1.0, 1.0),
            weight_decay: 0.01,
            ema_decay: 0.0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::param("timesteps must be >= 1"));
        }
        self.dropout().validate()?;
        let (a, b) = self.loss_weights;
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::param(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    pub fn dropout(&self) -> DropoutConfig {
        DropoutConfig {
            p_uncond: self.p_uncond,
            p_partial: self.p_partial,
        }
    }
}

/// One encoded training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentItem {
    pub z_img: Tensor,
    pub z_dem: Tensor,
    /// Valid latent cells.
    pub mask: Mask,
    pub descriptors: CaptionDescriptors,
}

impl LatentItem {
    pub fn check(&self) -> Result<()> {
        self.z_img.ensure_same_shape(&self.z_dem, "modality latents")?;
        let (_, h, w) = self.z_img.dims3()?;
        if self.mask.dims() != (h, w) {
            return Err(Error::shape(format!(
                "latent mask {:?} vs latent {h}x{w}",
                self.mask.dims()
            )));
        }
        Ok(())
    }
}

/// A minibatch with one rendered prompt per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub z_img: Vec<Tensor>,
    pub z_dem: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub captions: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.z_img.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_img.is_empty()
    }

    fn check(&self) -> Result<()> {
        let b = self.len();
        if self.z_dem.len() != b || self.masks.len() != b || self.captions.len() != b {
            return Err(Error::shape("batch fields disagree on batch size"));
        }
        for i in 0..b {
            self.z_img[i].ensure_same_shape(&self.z_dem[i], "modality latents")?;
            let (_, h, w) = self.z_img[i].dims3()?;
            if self.masks[i].dims() != (h, w) {
                return Err(Error::shape(format!("mask {i} does not match latent {h}x{w}")));
            }
        }
        Ok(())
    }
}

/// Per-sample noise and timestep draws for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub t: Vec<usize>,
    pub eps_img: Vec<Tensor>,
    pub eps_dem: Vec<Tensor>,
}

impl Noise {
    /// Timesteps uniform on `1..=T`; ε draws for the image first, then the
    /// elevation, from the same stream.
    pub fn draw<R: Rng + ?Sized>(batch: &Batch, horizon: usize, rng: &mut R) -> Self {
        let mut t = Vec::with_capacity(batch.len());
        let mut eps_img = Vec::with_capacity(batch.len());
        let mut eps_dem = Vec::with_capacity(batch.len());
        for z in &batch.z_img {
            t.push(rng.random_range(1..=horizon));
            eps_img.push(Tensor::randn(z.shape(), rng));
            eps_dem.push(Tensor::randn(z.shape(), rng));
        }
        Self { t, eps_img, eps_dem }
    }
}

/// Loss value and its per-modality parts, each already normalized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub loss_img: f64,
    pub loss_dem: f64,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug)]
pub enum LossOutcome {
    Value(LossStats),
    /// No valid latent cell in the whole batch.
    Skipped,
}

impl LossOutcome {
    pub fn stats(&self) -> Option<LossStats> {
        match self {
            LossOutcome::Value(s) => Some(*s),
            LossOutcome::Skipped => None,
        }
    }
}

/// Noisy inputs and velocity targets for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub x_img: Tensor,
    pub x_dem: Tensor,
    pub v_img: Tensor,
    pub v_dem: Tensor,
}

fn masked(z: &Tensor, mask: &Mask) -> Tensor {
    let plane = mask.data();
    let mut out = z.clone();
    for ch in out.data_mut().chunks_mut(plane.len()) {
        for (v, &keep) in ch.iter_mut().zip(plane) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    out
}

/// Builds the model inputs `x_t` and targets `v` for every sample.
pub fn prepare(batch: &Batch, noise_draw: &Noise, sched: &NoiseSchedule) -> Result<Vec<Prepared>> {
    batch.check()?;
    if noise_draw.t.len() != batch.len()
        || noise_draw.eps_img.len() != batch.len()
        || noise_draw.eps_dem.len() != batch.len()
    {
        return Err(Error::shape("noise draws disagree with batch size"));
    }
    (0..batch.len())
        .map(|i| {
            // one timestep, both modalities
            let t = noise_draw.t[i];
            let zi = masked(&batch.z_img[i], &batch.masks[i]);
            let zd = masked(&batch.z_dem[i], &batch.masks[i]);
            Ok(Prepared {
                x_img: noise(&zi, &noise_draw.eps_img[i], t, sched)?,
                x_dem: noise(&zd, &noise_draw.eps_dem[i], t, sched)?,
                v_img: to_v(&zi, &noise_draw.eps_img[i], t, sched)?,
                v_dem: to_v(&zd, &noise_draw.eps_dem[i], t, sched)?,
            })
        })
        .collect()
}

struct SampleResult {
    sum_img: f64,
    sum_dem: f64,
    grads: Option<Grads>,
}

fn masked_sq(pred: &Tensor, target: &Tensor, mask: &Mask) -> f64 {
    let plane = mask.data();
    let mut s = 0.0;
    for (pc, tc) in pred.data().chunks(plane.len()).zip(target.data().chunks(plane.len())) {
        for ((p, t), &keep) in pc.iter().zip(tc).zip(plane) {
            if keep {
                let r = p - t;
                s += r * r;
            }
        }
    }
    s
}

fn masked_seed(pred: &Tensor, target: &Tensor, mask: &Mask, scale: f64) -> Tensor {
    let plane = mask.data();
    let mut out = Tensor::zeros(pred.shape());
    let n = plane.len();
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        if plane[k % n] {
            *o = scale * (pred.data()[k] - target.data()[k]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn sample_pass(
    model: &DenoiserModel,
    p: &Prepared,
    t: usize,
    caption: &str,
    mask: &Mask,
    weights: (f64, f64),
    norm: f64,
    with_grads: bool,
) -> Result<SampleResult> {
    if mask.count() == 0 {
        return Ok(SampleResult {
            sum_img: 0.0,
            sum_dem: 0.0,
            grads: None,
        });
    }
    let mut g = Graph::new(model.params());
    let xi = g.input(p.x_img.clone());
    let xd = g.input(p.x_dem.clone());
    let c = model.caption_graph(&mut g, caption)?;
    let (vi, vd) = model.forward_graph(&mut g, xi, xd, t, c)?;
    let sum_img = masked_sq(g.value(vi), &p.v_img, mask);
    let sum_dem = masked_sq(g.value(vd), &p.v_dem, mask);
    let grads = if with_grads {
        let si = masked_seed(g.value(vi), &p.v_img, mask, 2.0 * weights.0 / norm);
        let sd = masked_seed(g.value(vd), &p.v_dem, mask, 2.0 * weights.1 / norm);
        Some(g.backward(&[(vi, &si), (vd, &sd)])?)
    } else {
        None
    };
    Ok(SampleResult {
        sum_img,
        sum_dem,
        grads,
    })
}

fn loss_impl(
    model: &DenoiserModel,
    batch: &Batch,
    t: &[usize],
    prepared: &[Prepared],
    weights: (f64, f64),
    with_grads: bool,
    parallel: bool,
) -> Result<(LossOutcome, Option<Grads>)> {
    batch.check()?;
    if t.len() != batch.len() || prepared.len() != batch.len() {
        return Err(Error::shape("timesteps/targets disagree with batch size"));
    }
    let valid: usize = batch.masks.iter().map(Mask::count).sum();
    let total: usize = batch.masks.iter().map(|m| m.data().len()).sum();
    if valid == 0 {
        return Ok((LossOutcome::Skipped, None));
    }
    let channels = batch.z_img[0].shape()[0];
    let norm = (valid * channels * 2) as f64;
    let run = |i: usize| {
        sample_pass(
            model,
            &prepared[i],
            t[i],
            &batch.captions[i],
            &batch.masks[i],
            weights,
            norm,
            with_grads,
        )
    };
    let results: Vec<SampleResult> = if parallel {
        (0..batch.len()).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..batch.len()).map(run).collect::<Result<_>>()?
    };
    let (mut si, mut sd) = (0.0, 0.0);
    let mut grads = with_grads.then(|| model.params().zeros_like());
    for r in &results {
        si += r.sum_img;
        sd += r.sum_dem;
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.add_assign(g);
        }
    }
    let loss_img = si / norm;
    let loss_dem = sd / norm;
    let stats = LossStats {
        loss: weights.0 * loss_img + weights.1 * loss_dem,
        loss_img,
        loss_dem,
        valid_fraction: valid as f64 / total as f64,
    };
    Ok((LossOutcome::Value(stats), grads))
}

/// Masked v-prediction loss, normalized by `valid cells × C × 2`.
pub fn masked_vpred_loss(
    model: &DenoiserModel,
    batch: &Batch,
    noise_draw: &Noise,
    sched: &NoiseSchedule,
    weights: (f64, f64),
) -> Result<LossOutcome> {
    let prepared = prepare(batch, noise_draw, sched)?;
    loss_from_targets(model, batch, &noise_draw.t, &prepared, weights)
}

/// The loss on precomputed inputs and targets.
pub fn loss_from_targets(
    model: &DenoiserModel,
    batch: &Batch,
    t: &[usize],
    prepared: &[Prepared],
    weights: (f64, f64),
) -> Result<LossOutcome> {
    Ok(loss_impl(model, batch, t, prepared, weights, false, false)?.0)
}

/// Loss plus parameter gradients; `None` gradients when skipped.
pub fn loss_and_grads(
    model: &DenoiserModel,
    batch: &Batch,
    t: &[usize],
    prepared: &[Prepared],
    weights: (f64, f64),
    parallel: bool,
) -> Result<(LossOutcome, Option<Grads>)> {
    loss_impl(model, batch, t, prepared, weights, true, parallel)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub p_uncond: f64,
    pub p_partial: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p_uncond: 0.1,
            p_partial: 0.5,
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p_uncond) || !ok(self.p_partial) || self.p_uncond + self.p_partial > 1.0 {
            return Err(Error::param(format!(
                "dropout probabilities p_uncond={} p_partial={} must lie in [0, 1] and sum to at most 1",
                self.p_uncond, self.p_partial
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropOutcome {
    /// Every descriptor kept.
    Full,
    /// `k` of the four descriptors dropped.
    Partial(usize),
    /// Empty prompt.
    Unconditional,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionDraw {
    pub prompt: String,
    pub outcome: DropOutcome,
    pub anonymized: bool,
    pub regional: bool,
}

/// Draws a training prompt from complete descriptors.
pub fn caption_dropout<R: Rng + ?Sized>(
    descriptors: &CaptionDescriptors,
    config: &DropoutConfig,
    rng: &mut R,
) -> Result<CaptionDraw> {
    if !descriptors.is_complete() {
        return Err(Error::param("caption dropout needs all descriptors"));
    }
    let u: f64 = rng.random();
    let anonymized = rng.random_bool(0.5);
    let regional = rng.random_bool(0.5);
    if u < config.p_uncond {
        return Ok(CaptionDraw {
            prompt: String::new(),
            outcome: DropOutcome::Unconditional,
            anonymized,
            regional,
        });
    }
    let mut keep = DescriptorSet::ALL;
    let outcome = if u < config.p_uncond + config.p_partial {
        let k = rng.random_range(1..=3);
        for i in sample_indices(rng, Descriptor::ALL.len(), k) {
            keep.remove(Descriptor::ALL[i]);
        }
        DropOutcome::Partial(k)
    } else {
        DropOutcome::Full
    };
    let caption = descriptors.caption(anonymized, regional);
    Ok(CaptionDraw {
        prompt: render_prompt(&caption, keep),
        outcome,
        anonymized,
        regional,
    })
}

/// Assembles a batch from dataset indices, drawing prompts with dropout.
pub fn make_batch<R: Rng + ?Sized>(
    data: &[LatentItem],
    ids: &[usize],
    dropout: &DropoutConfig,
    rng: &mut R,
) -> Result<Batch> {
    let mut b = Batch {
        z_img: Vec::with_capacity(ids.len()),
        z_dem: Vec::with_capacity(ids.len()),
        masks: Vec::with_capacity(ids.len()),
        captions: Vec::with_capacity(ids.len()),
    };
    for &i in ids {
        let item = &data[i];
        b.z_img.push(item.z_img.clone());
        b.z_dem.push(item.z_dem.clone());
        b.masks.push(item.mask.clone());
        b.captions
            .push(caption_dropout(&item.descriptors, dropout, rng)?.prompt);
    }
    Ok(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub loss_img: f64,
    pub loss_dem: f64,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub skipped_batches: usize,
}

/// Writes the loss trace as CSV.
pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "loss_img", "loss_dem", "valid_fraction"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.loss_img.to_string(),
            r.loss_dem.to_string(),
            r.valid_fraction.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains in place; see [`train_with`].
pub fn train(
    model: &mut DenoiserModel,
    data: &[LatentItem],
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, data, sched, config, |_, _| Ok(()))
}

/// Runs `config.iterations` AdamW steps. `hook` sees every logged row
/// together with the updated model (for checkpoints and progress).
///
/// Step `s` draws its batch, prompts, timesteps and noise from the
/// substream `("train.step", s)` of the root seed, so a run is a pure
/// function of `(model, data, config)`.
pub fn train_with(
    model: &mut DenoiserModel,
    data: &[LatentItem],
    sched: &NoiseSchedule,
    config: &TrainConfig,
    mut hook: impl FnMut(&TraceRow, &DenoiserModel) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if sched.steps() != config.timesteps || model.config().timesteps != config.timesteps {
        return Err(Error::param(format!(
            "timestep horizon mismatch: schedule {}, model {}, config {}",
            sched.steps(),
            model.config().timesteps,
            config.timesteps
        )));
    }
    for item in data {
        item.check()?;
    }
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let dropout = config.dropout();
    let mut ema = (config.ema_decay > 0.0).then(|| model.clone());
    let mut report = TrainReport::default();
    for step in 0..config.iterations {
        let mut rng = substream(config.seed, "train.step", step as u64);
        let ids: Vec<usize> = if config.batch_size <= data.len() {
            sample_indices(&mut rng, data.len(), config.batch_size).into_vec()
        } else {
            (0..config.batch_size)
                .map(|_| rng.random_range(0..data.len()))
                .collect()
        };
        let batch = make_batch(data, &ids, &dropout, &mut rng)?;
        let draw = Noise::draw(&batch, config.timesteps, &mut rng);
        let prepared = prepare(&batch, &draw, sched)?;
        let (outcome, grads) = loss_and_grads(model, &batch, &draw.t, &prepared, config.loss_weights, config.parallel)?;
        let (LossOutcome::Value(stats), Some(grads)) = (outcome, grads) else {
            report.skipped_batches += 1;
            continue;
        };
        if !stats.loss.is_finite() || !grads.max_abs().is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                timesteps: draw.t,
                sample_ids: ids,
            });
        }
        opt.step(model.params_mut(), &grads);
        if let Some(avg) = ema.as_mut() {
            blend(avg.params_mut(), model.params(), config.ema_decay);
        }
        let row = TraceRow {
            step,
            loss: stats.loss,
            loss_img: stats.loss_img,
            loss_dem: stats.loss_dem,
            valid_fraction: stats.valid_fraction,
        };
        report.trace.push(row);
        hook(&row, ema.as_ref().unwrap_or(model))?;
    }
    if let Some(avg) = ema {
        *model = avg;
    }
    Ok(report)
}

/// `avg ← decay·avg + (1 − decay)·live`, tensor by tensor.
fn blend(avg: &mut ParamStore, live: &ParamStore, decay: f64) {
    let ids: Vec<ParamId> = live.ids().collect();
    for id in ids {
        let src = live.get(id).data();
        for (a, &x) in avg.get_mut(id).data_mut().iter_mut().zip(src) {
            *a = decay * *a + (1.0 - decay) * x;
        }
    }
}

/// Result of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
}

/// Relative error with a floor on the denominator so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Picks `n` distinct coordinates, covering every tensor at least once
/// when `n` allows.
pub fn pick_coordinates<R: Rng + ?Sized>(params: &ParamStore, n: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(n);
    for &id in &ids {
        if out.len() == n {
            break;
        }
        out.push((id, rng.random_range(0..params.get(id).len())));
    }
    let total = params.num_scalars();
    let mut flat = Vec::with_capacity(total);
    for &id in &ids {
        for j in 0..params.get(id).len() {
            flat.push((id, j));
        }
    }
    // distinct draws; at most one per tensor collides with the above
    for k in sample_indices(rng, total, n.min(total)) {
        if out.len() >= n {
            break;
        }
        if !out.contains(&flat[k]) {
            out.push(flat[k]);
        }
    }
    out
}

/// Central differences of `f` at `coords`, compared with `analytic`.
pub fn check_gradients(
    params: &mut ParamStore,
    analytic: &Grads,
    coords: &[(ParamId, usize)],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: coords.len(),
    };
    for &(id, j) in coords {
        let orig = params.get(id).data()[j];
        params.get_mut(id).data_mut()[j] = orig + h;
        let up = f(params)?;
        params.get_mut(id).data_mut()[j] = orig - h;
        let down = f(params)?;
        params.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(id).data()[j];
        report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
    }
    Ok(report)
}

/// Finite-difference check of the masked loss on `n_coords` parameters.
pub fn gradient_check(
    model: &mut DenoiserModel,
    batch: &Batch,
    noise_draw: &Noise,
    sched: &NoiseSchedule,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    const H: f64 = 1e-5;
    let weights = (1.0, 1.0);
    let prepared = prepare(batch, noise_draw, sched)?;
    let (outcome, grads) = loss_and_grads(model, batch, &noise_draw.t, &prepared, weights, false)?;
    let (LossOutcome::Value(_), Some(grads)) = (outcome, grads) else {
        return Err(Error::param("gradient check batch has no valid cells"));
    };
    let mut rng = substream(seed, "gradcheck.coords", 0);
    let coords = pick_coordinates(model.params(), n_coords, &mut rng);
    let mut probe = model.clone();
    let t = noise_draw.t.clone();
    let report = check_gradients(model.params_mut(), &grads, &coords, H, |p| {
        *probe.params_mut() = p.clone();
        let out = loss_from_targets(&probe, batch, &t, &prepared, weights)?;
        Ok(out.stats().map_or(0.0, |s| s.loss))
    })?;
    Ok(report)
}
