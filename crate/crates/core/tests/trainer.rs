use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terrain_diffusion::captioner::CaptionDescriptors;
use terrain_diffusion::captioner::{Biome, Month};
use terrain_diffusion::denoiser::DenoiserConfig;
use terrain_diffusion::denoiser::DenoiserModel;
use terrain_diffusion::error::Result;
use terrain_diffusion::nn::Linear;
use terrain_diffusion::nn::{Grads, Graph, ParamStore, Tensor};
use terrain_diffusion::raster::Mask;
use terrain_diffusion::schedules::NoiseSchedule;
use terrain_diffusion::trainer::*;

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 3,
        stem_channels: 4,
        backbone_channels: [6, 8],
        embed_dim: 8,
        hash_buckets: 64,
        timesteps: 1000,
    }
}

fn descriptors() -> CaptionDescriptors {
    CaptionDescriptors {
        biome: Some(Biome {
            ecoregion: "Alpine conifer forests".into(),
            biome_type: "Temperate Conifer Forests".into(),
        }),
        geological_local: Some("mountains".into()),
        geological_regional: Some("the Alps".into()),
        country: Some("Switzerland".into()),
        month: Some(Month::March),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, side: usize) -> Batch {
    let mut out = Batch {
        z_img: vec![],
        z_dem: vec![],
        masks: vec![],
        captions: vec![],
    };
    for i in 0..b {
        out.z_img.push(Tensor::randn(&[3, side, side], rng));
        out.z_dem.push(Tensor::randn(&[3, side, side], rng));
        let bits = (0..side * side).map(|_| rng.random_bool(0.7)).collect();
        out.masks.push(Mask::from_vec(side, side, bits).unwrap());
        out.captions.push(if i % 2 == 0 {
            "mountains in March".into()
        } else {
            String::new()
        });
    }
    out
}

// Scalar reimplementation of the loss, index by index.
fn oracle_loss(model: &DenoiserModel, batch: &Batch, n: &Noise, sched: &NoiseSchedule) -> f64 {
    let (mut sum, mut valid) = (0.0, 0usize);
    let c = batch.z_img[0].shape()[0];
    for i in 0..batch.len() {
        let t = n.t[i];
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let (_, h, w) = batch.z_img[i].dims3().unwrap();
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for (z, e) in [(&batch.z_img[i], &n.eps_img[i]), (&batch.z_dem[i], &n.eps_dem[i])] {
            let mut x = vec![0.0; c * h * w];
            let mut v = vec![0.0; c * h * w];
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let k = (ch * h + r) * w + col;
                        let m = if batch.masks[i].get(r, col) { 1.0 } else { 0.0 };
                        let z0 = z.data()[k] * m;
                        x[k] = a * z0 + s * e.data()[k];
                        v[k] = a * e.data()[k] - s * z0;
                    }
                }
            }
            xs.push(Tensor::from_vec(&[c, h, w], x).unwrap());
            vs.push(v);
        }
        let cond = model.embed_caption(&batch.captions[i]).unwrap();
        let (pi, pd) = model.forward(&xs[0], &xs[1], t, &cond).unwrap();
        for (p, v) in [(pi, &vs[0]), (pd, &vs[1])] {
            for ch in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        if batch.masks[i].get(r, col) {
                            let k = (ch * h + r) * w + col;
                            sum += (p.data()[k] - v[k]).powi(2);
                        }
                    }
                }
            }
        }
        valid += batch.masks[i].count();
    }
    sum / (valid * c * 2) as f64
}

#[test]
fn loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = DenoiserModel::new(tiny(), 3).unwrap();
    model.perturb_params(&mut rng, 0.05);
    let batch = random_batch(&mut rng, 3, 8);
    let sched = NoiseSchedule::default();
    let n = Noise::draw(&batch, 1000, &mut rng);
    let got = masked_vpred_loss(&model, &batch, &n, &sched, (1.0, 1.0)).unwrap();
    let want = oracle_loss(&model, &batch, &n, &sched);
    let s = got.stats().unwrap();
    assert!((s.loss - want).abs() < 1e-12 * want.max(1.0), "{} vs {want}", s.loss);
    assert!((s.loss - (s.loss_img + s.loss_dem)).abs() < 1e-12);
}

fn masked_sq(pred: &Tensor, target: &Tensor, mask: &Mask) -> f64 {
    let plane = mask.data();
    let mut s = 0.0;
    for (pc, tc) in pred.data().chunks(plane.len()).zip(target.data().chunks(plane.len())) {
        for ((p, t), &keep) in pc.iter().zip(tc).zip(plane) {
            if keep {
                s += (p - t) * (p - t);
            }
        }
    }
    s
}

#[test]
fn perfect_predictor_has_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = random_batch(&mut rng, 2, 4);
    let n = Noise::draw(&batch, 1000, &mut rng);
    let p = prepare(&batch, &n, &NoiseSchedule::default()).unwrap();
    for (i, pr) in p.iter().enumerate() {
        assert_eq!(masked_sq(&pr.v_img, &pr.v_img, &batch.masks[i]), 0.0);
    }
}

#[test]
fn empty_masks_skip_and_zero_sample_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = DenoiserModel::new(tiny(), 4).unwrap();
    let sched = NoiseSchedule::default();
    let mut batch = random_batch(&mut rng, 2, 4);
    let n = Noise::draw(&batch, 1000, &mut rng);
    let mut all_off = batch.clone();
    for m in &mut all_off.masks {
        *m = Mask::filled(4, 4, false);
    }
    assert!(matches!(
        masked_vpred_loss(&model, &all_off, &n, &sched, (1.0, 1.0)).unwrap(),
        LossOutcome::Skipped
    ));

    batch.masks[1] = Mask::filled(4, 4, false);
    let p = prepare(&batch, &n, &sched).unwrap();
    let (_, g) = loss_and_grads(&model, &batch, &n.t, &p, (1.0, 1.0), false).unwrap();
    let mut single = batch.clone();
    single.z_img.truncate(1);
    single.z_dem.truncate(1);
    single.masks.truncate(1);
    single.captions.truncate(1);
    let (_, g1) = loss_and_grads(&model, &single, &n.t[..1], &p[..1], (1.0, 1.0), false).unwrap();
    let (g, g1) = (g.unwrap(), g1.unwrap());
    for (a, b) in g.iter().zip(g1.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn parallel_and_serial_grads_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = DenoiserModel::new(tiny(), 5).unwrap();
    let batch = random_batch(&mut rng, 4, 4);
    let n = Noise::draw(&batch, 1000, &mut rng);
    let p = prepare(&batch, &n, &NoiseSchedule::default()).unwrap();
    let (_, a) = loss_and_grads(&model, &batch, &n.t, &p, (1.0, 1.0), false).unwrap();
    let (_, b) = loss_and_grads(&model, &batch, &n.t, &p, (1.0, 1.0), true).unwrap();
    for (x, y) in a.unwrap().iter().zip(b.unwrap().iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn loss_symmetric_under_modality_and_head_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = DenoiserModel::new(tiny(), 6).unwrap();
    let sched = NoiseSchedule::default();
    let batch = random_batch(&mut rng, 2, 4);
    let n = Noise::draw(&batch, 1000, &mut rng);
    let a = masked_vpred_loss(&model, &batch, &n, &sched, (1.0, 1.0)).unwrap();
    let mut swapped = batch.clone();
    std::mem::swap(&mut swapped.z_img, &mut swapped.z_dem);
    let ns = Noise {
        t: n.t.clone(),
        eps_img: n.eps_dem.clone(),
        eps_dem: n.eps_img.clone(),
    };
    model.swap_heads();
    let b = masked_vpred_loss(&model, &swapped, &ns, &sched, (1.0, 1.0)).unwrap();
    let (a, b) = (a.stats().unwrap(), b.stats().unwrap());
    assert!((a.loss - b.loss).abs() <= 1e-12 * a.loss);
    assert!((a.loss_img - b.loss_dem).abs() <= 1e-12 * a.loss);
}

#[test]
fn noise_draws_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = Batch {
        z_img: vec![Tensor::zeros(&[1, 1, 1]); 10_000],
        z_dem: vec![Tensor::zeros(&[1, 1, 1]); 10_000],
        masks: vec![Mask::filled(1, 1, true); 10_000],
        captions: vec![String::new(); 10_000],
    };
    let n = Noise::draw(&batch, 1000, &mut rng);
    let a: Vec<f64> = n.eps_img.iter().map(|t| t.data()[0]).collect();
    let b: Vec<f64> = n.eps_dem.iter().map(|t| t.data()[0]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let r = cov / (va * vb).sqrt();
    // 4 standard errors at n = 10^4
    assert!(r.abs() < 0.04, "correlation {r}");
}

#[test]
fn dropout_branches_and_validation() {
    let d = descriptors();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let never = DropoutConfig {
        p_uncond: 0.0,
        p_partial: 0.0,
    };
    let full = caption_dropout(&d, &never, &mut rng).unwrap();
    assert_eq!(full.outcome, DropOutcome::Full);
    assert!(full.prompt.starts_with("A Sentinel-2 image of "));
    assert!(full.prompt.ends_with(" in Switzerland in March"));
    let always = DropoutConfig {
        p_uncond: 1.0,
        p_partial: 0.0,
    };
    assert_eq!(caption_dropout(&d, &always, &mut rng).unwrap().prompt, "");
    let mut partial = d.clone();
    partial.country = None;
    assert!(caption_dropout(&partial, &never, &mut rng).is_err());
    assert!(DropoutConfig {
        p_uncond: 0.6,
        p_partial: 0.6
    }
    .validate()
    .is_err());
}

#[test]
fn zero_iterations_leave_model_unchanged() {
    let mut model = DenoiserModel::new(tiny(), 8).unwrap();
    let before = model.params().clone();
    let data = vec![LatentItem {
        z_img: Tensor::zeros(&[3, 4, 4]),
        z_dem: Tensor::zeros(&[3, 4, 4]),
        mask: Mask::filled(4, 4, true),
        descriptors: descriptors(),
    }];
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    let r = train(&mut model, &data, &NoiseSchedule::default(), &cfg).unwrap();
    assert!(r.trace.is_empty());
    for ((_, a), (_, b)) in model.params().iter().zip(before.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn ema_blends_initial_and_trained_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<LatentItem> = (0..2)
        .map(|_| LatentItem {
            z_img: Tensor::randn(&[3, 4, 4], &mut rng),
            z_dem: Tensor::randn(&[3, 4, 4], &mut rng),
            mask: Mask::filled(4, 4, true),
            descriptors: descriptors(),
        })
        .collect();
    let sched = NoiseSchedule::default();
    let init = DenoiserModel::new(tiny(), 8).unwrap();
    let raw_cfg = TrainConfig {
        iterations: 1,
        batch_size: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut raw = init.clone();
    train(&mut raw, &data, &sched, &raw_cfg).unwrap();
    let mut avg = init.clone();
    let decay = 0.9;
    train(
        &mut avg,
        &data,
        &sched,
        &TrainConfig {
            ema_decay: decay,
            ..raw_cfg.clone()
        },
    )
    .unwrap();
    let mut moved = false;
    for (((_, a), (_, r)), (_, i)) in avg.params().iter().zip(raw.params().iter()).zip(init.params().iter()) {
        for ((&a, &r), &i) in a.data().iter().zip(r.data()).zip(i.data()) {
            assert!((a - (decay * i + (1.0 - decay) * r)).abs() < 1e-15);
            moved |= r != i;
        }
    }
    assert!(moved);
    assert!(TrainConfig {
        ema_decay: 1.0,
        ..raw_cfg
    }
    .validate()
    .is_err());
}

#[test]
fn linear_quadratic_gradcheck_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ParamStore::new();
    let lin = Linear::new(&mut p, "toy", 5, 3, 1.0, &mut rng);
    let x = Tensor::randn(&[5], &mut rng);
    let y = Tensor::randn(&[3], &mut rng);
    let loss = |ps: &ParamStore| -> Result<(f64, Grads)> {
        let mut g = Graph::new(ps);
        let xi = g.input(x.clone());
        let out = lin.forward(&mut g, xi)?;
        let r = g.value(out).zip_map(&y, |a, b| a - b)?;
        let l = r.data().iter().map(|v| v * v).sum::<f64>();
        let seed = r.map(|v| 2.0 * v);
        Ok((l, g.backward(&[(out, &seed)])?))
    };
    let (_, grads) = loss(&p).unwrap();
    let coords = pick_coordinates(&p, 18, &mut rng);
    let rep = check_gradients(&mut p, &grads, &coords, 1e-5, |ps| Ok(loss(ps)?.0)).unwrap();
    assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    assert_eq!(rep.coordinates, 18);
}

#[test]
fn coordinates_cover_every_tensor() {
    let model = DenoiserModel::new(tiny(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c = pick_coordinates(model.params(), 200, &mut rng);
    assert!(c.len() >= 200);
    for id in model.params().ids() {
        assert!(c.iter().any(|(i, _)| *i == id));
    }
}
