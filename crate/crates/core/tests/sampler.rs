use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use terrain_diffusion::error::Result;
use terrain_diffusion::nn::Tensor;
use terrain_diffusion::rng::substream;
use terrain_diffusion::sampler::*;
use terrain_diffusion::schedules::NoiseSchedule;
use terrain_diffusion::schedules::{noise, to_v};

/// Posterior-mean denoiser for scalar `N(mu, s²)` data, same on both
/// modalities; the embedding's first entry shifts `mu` so guidance
/// has something to act on.
struct Gaussian {
    mu: f64,
    s: f64,
    sched: NoiseSchedule,
}

impl JointDenoiser for Gaussian {
    fn velocity(&self, z_img: &Tensor, z_dem: &Tensor, t: usize, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let (a, sg) = (self.sched.alpha(t), self.sched.sigma(t));
        let mu = self.mu + cond.data().first().copied().unwrap_or(0.0);
        let s2 = self.s * self.s;
        let v = |z: f64| {
            let x = (a * s2 * z + sg * sg * mu) / (a * a * s2 + sg * sg);
            let e = (z - a * x) / sg;
            a * e - sg * x
        };
        Ok((z_img.map(v), z_dem.map(v)))
    }
}

fn oracle() -> Gaussian {
    Gaussian {
        mu: 0.5,
        s: 0.25,
        sched: NoiseSchedule::default(),
    }
}

#[test]
fn timestep_grid() {
    let ts = timesteps(50, 1000).unwrap();
    assert_eq!(ts.len(), 51);
    assert_eq!((ts[0], ts[1], ts[50]), (1000, 980, 0));
    assert_eq!(timesteps(1, 1000).unwrap(), vec![1000, 0]);
    assert_eq!(timesteps(7, 10).unwrap(), vec![10, 9, 7, 6, 4, 3, 1, 0]);
    assert!(timesteps(0, 10).is_err() && timesteps(11, 10).is_err());
}

#[test]
fn step_rejects_bad_order() {
    let g = oracle();
    let c = Tensor::zeros(&[1]);
    let guide = Guidance {
        cond: &c,
        uncond: &c,
        scale: 7.0,
        space: GuidanceSpace::Velocity,
    };
    let z = Tensor::zeros(&[1, 1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ddim_step(&g, &z, &z, 5, 5, &guide, 0.0, &g.sched, &mut rng).is_err());
    assert!(ddim_step(&g, &z, &z, 4, 5, &guide, 0.0, &g.sched, &mut rng).is_err());
}

#[test]
fn exact_denoiser_recovers_data_in_one_step() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 4, 4], &mut rng);
    let e = Tensor::randn(&[2, 4, 4], &mut rng);
    struct Exact(Tensor);
    impl JointDenoiser for Exact {
        fn velocity(&self, _: &Tensor, _: &Tensor, _: usize, _: &Tensor) -> Result<(Tensor, Tensor)> {
            Ok((self.0.clone(), self.0.clone()))
        }
    }
    let t = 1000;
    let z = noise(&x, &e, t, &sched).unwrap();
    let m = Exact(to_v(&x, &e, t, &sched).unwrap());
    let c = Tensor::zeros(&[1]);
    let guide = Guidance {
        cond: &c,
        uncond: &c,
        scale: 7.0,
        space: GuidanceSpace::Velocity,
    };
    let (zi, _) = ddim_step(&m, &z, &z, t, 0, &guide, 0.0, &sched, &mut rng).unwrap();
    assert!(zi.max_abs_diff(&x) < 1e-12);
}

#[test]
fn eta_changes_only_stochastic_runs() {
    let g = oracle();
    let c = Tensor::from_vec(&[1], vec![0.1]).unwrap();
    let u = Tensor::zeros(&[1]);
    let guide = Guidance {
        cond: &c,
        uncond: &u,
        scale: 3.0,
        space: GuidanceSpace::Velocity,
    };
    let cfg = SampleConfig {
        steps: 10,
        seed: 3,
        ..SampleConfig::default()
    };
    let a = sample_latents(&g, &[1, 4, 4], &guide, &cfg, &g.sched).unwrap();
    let b = sample_latents(&g, &[1, 4, 4], &guide, &cfg, &g.sched).unwrap();
    assert_eq!(a, b);
    let stoch = SampleConfig {
        eta: 1.0,
        ..cfg.clone()
    };
    let s1 = sample_latents(&g, &[1, 4, 4], &guide, &stoch, &g.sched).unwrap();
    let s2 = sample_latents(&g, &[1, 4, 4], &guide, &stoch, &g.sched).unwrap();
    assert_eq!(s1, s2);
    assert_ne!(s1, a);
    assert_eq!(ddim_tau(&g.sched, 20, 0, 1.0), 0.0);
}

#[test]
fn deterministic_loop_matches_affine_flow_oracle() {
    // for Gaussian data each η = 0 step is affine: z' = k1 z + k2 mu
    let g = oracle();
    let (mu, s2) = (g.mu, g.s * g.s);
    let ts = timesteps(50, 1000).unwrap();
    let (mut p, mut q) = (1.0, 0.0);
    for w in ts.windows(2) {
        let (a, sg) = (g.sched.alpha(w[0]), g.sched.sigma(w[0]));
        let (at, st) = (g.sched.alpha(w[1]), g.sched.sigma(w[1]));
        let v = a * a * s2 + sg * sg;
        let (c1, c2) = (a * s2 / v, sg * sg / v);
        let k1 = at * c1 + st * (1.0 - a * c1) / sg;
        let k2 = at * c2 - st * a * c2 / sg;
        p *= k1;
        q = k1 * q + k2;
    }
    let c = Tensor::zeros(&[1]);
    let guide = Guidance {
        cond: &c,
        uncond: &c,
        scale: 1.0,
        space: GuidanceSpace::Velocity,
    };
    let cfg = SampleConfig {
        seed: 9,
        ..SampleConfig::default()
    };
    let (zi, zd) = sample_latents(&g, &[1, 8, 8], &guide, &cfg, &g.sched).unwrap();
    let start = Tensor::randn(&[1, 8, 8], &mut substream(9, "sample.eps_img", 0));
    for (out, z0) in zi.data().iter().zip(start.data()) {
        assert!((out - (p * z0 + q * mu)).abs() < 1e-10);
    }
    assert_ne!(zi, zd);
}

#[test]
fn elevation_denormalization() {
    let d = Tensor::from_vec(&[1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
    let m = denormalize_elevation(&d, (100.0, 300.0));
    assert_eq!(m.data(), &[100.0, 200.0, 300.0]);
}
