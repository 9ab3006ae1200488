//! `terrain`: command-line pipeline for joint RGB + elevation diffusion.
//!
//! Settings come from the key registry in `terrain_diffusion::config`.
//! Precedence, lowest first: registry defaults, `--config` file,
//! positional `key=value` pairs, `--key value` flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use terrain_diffusion::captioner::{render_prompt, Month, RegionAtlas};
use terrain_diffusion::codec::{replicate3, Codec};
use terrain_diffusion::config::{RunConfig, KEYS};
use terrain_diffusion::denoiser::{DenoiserConfig, DenoiserModel};
use terrain_diffusion::format::{write_gray16_png, write_gray8_png, write_rgb_png, Archive, Manifest};
use terrain_diffusion::geoprep::{histogram_match_channels, resample, union_masks, Interpolation, SameCrs};
use terrain_diffusion::nn::Tensor;
use terrain_diffusion::pipeline::{encode_corpus, separation};
use terrain_diffusion::raster::{GeoTransform, Mask, Raster};
use terrain_diffusion::render::{render_hillshade, Sun};
use terrain_diffusion::sampler::{generate, SampleConfig};
use terrain_diffusion::synthcorpus::Corpus;
use terrain_diffusion::trainer::{gradient_check, train_with, write_trace_csv, Batch, Noise, TraceRow};
use terrain_diffusion::{Error, Result};

const COMMANDS: [(&str, &str); 8] = [
    ("synth", "generate the synthetic corpus"),
    ("prep", "resample a sample onto a new grid and histogram-match its RGB"),
    ("caption", "caption a location from an atlas, or every corpus sample"),
    ("train", "train the codec (if any) and the denoiser"),
    ("sample", "generate rasters from a prompt"),
    ("render", "hillshade an elevation grid"),
    ("check-grad", "finite-difference check of the training gradients"),
    ("eval", "prompt separation statistics of a trained model"),
];

/// Largest relative error `check-grad` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

fn cli() -> Command {
    let mut root = Command::new("terrain")
        .about("Text-conditioned joint RGB + elevation terrain diffusion")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut cmd = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .short('c')
                    .value_name("FILE")
                    .help("key=value config file"),
            )
            .arg(
                Arg::new("pairs")
                    .value_name("KEY=VALUE")
                    .num_args(0..)
                    .action(ArgAction::Append)
                    .help("config overrides"),
            );
        for (key, default, help) in KEYS {
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{help} [default: {default}]")
            };
            cmd = cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(help));
        }
        root = root.subcommand(cmd);
    }
    root
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(Path::new(p))?,
        None => RunConfig::default(),
    };
    for pair in m.get_many::<String>("pairs").into_iter().flatten() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("expected key=value, found {pair:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.path("corpus.dir"))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.path("corpus.dir");
    let corpus = Corpus::generate(&cfg.corpus()?)?;
    corpus.save(&dir)?;
    cfg.save(&dir.join("run.cfg"))?;
    let report = corpus.stats().report();
    write_text(&dir.join("stats.txt"), &report)?;
    print!("{report}");
    println!("wrote {} samples to {}", corpus.samples.len(), dir.display());
    Ok(())
}

fn cmd_prep(cfg: &RunConfig) -> Result<()> {
    let input = cfg.existing_path("prep.input", "input archive")?;
    let out = cfg.path("prep.output");
    let a = Archive::load(&input)?.expect_kind("terrain-sample", &input)?;
    let tensor = |a: &Archive, name: &str, path: &Path| {
        a.tensor(name).cloned().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("missing tensor {name}"),
        })
    };
    let rgb = tensor(&a, "rgb", &input)?;
    let dem = tensor(&a, "dem", &input)?;
    let nodata = Mask::from_tensor(&tensor(&a, "nodata", &input)?)?;
    let cloud = Mask::from_tensor(&tensor(&a, "cloud", &input)?)?;
    let (_, h, w) = rgb.dims3()?;
    let pixel: f64 = a.manifest.parse_value("pixel_size").unwrap_or(1.0);
    let src_t = GeoTransform::north_up(0.0, h as f64 * pixel, pixel);

    let scale: f64 = cfg.value("prep.scale")?;
    let theta = cfg.value::<f64>("prep.rotation")?.to_radians();
    if !(scale > 0.0) {
        return Err(Error::Parameter("prep.scale must be > 0".into()));
    }
    let method = match cfg.get("prep.interpolation") {
        "bilinear" => Interpolation::Bilinear,
        "nearest" => Interpolation::Nearest,
        other => return Err(Error::Parameter(format!("unknown interpolation {other:?}"))),
    };
    // output grid rotated by theta about the tile centre
    let (th, tw) = ((h as f64 / scale).round() as usize, (w as f64 / scale).round() as usize);
    let p = pixel * scale;
    let (cx, cy) = src_t.apply(w as f64 / 2.0, h as f64 / 2.0);
    let (c, s) = (theta.cos(), theta.sin());
    let (a1, a2, a4, a5) = (p * c, p * s, p * s, -p * c);
    let x0 = cx - a1 * tw as f64 / 2.0 - a2 * th as f64 / 2.0;
    let y0 = cy - a4 * tw as f64 / 2.0 - a5 * th as f64 / 2.0;
    let target = GeoTransform([x0, a1, a2, y0, a4, a5]);

    let run = |data: Tensor, bad: &Mask| -> Result<Raster> {
        resample(
            &Raster::new(data, src_t, bad.clone())?,
            target,
            (th, tw),
            &SameCrs,
            method,
        )
    };
    let rgb_r = run(rgb, &nodata)?;
    let dem_r = run(dem, &nodata)?;
    let cloud_r = run(cloud.to_tensor(), &nodata)?;
    let cloud_m = Mask::from_vec(th, tw, cloud_r.data.data().iter().map(|&v| v > 0.0).collect())?;
    let nodata_m = rgb_r.nodata.clone();
    let valid = union_masks(&nodata_m, &cloud_m)?;

    let mut rgb_out = rgb_r.data;
    let reference = cfg.get("prep.reference");
    if !reference.is_empty() {
        let rp = cfg.existing_path("prep.reference", "reference archive")?;
        let r = Archive::load(&rp)?.expect_kind("terrain-sample", &rp)?;
        let ref_rgb = tensor(&r, "rgb", &rp)?;
        if ref_rgb.shape() != rgb_out.shape() {
            return Err(Error::Shape(format!(
                "reference {:?} does not match resampled {:?}",
                ref_rgb.shape(),
                rgb_out.shape()
            )));
        }
        rgb_out = histogram_match_channels(&rgb_out, &ref_rgb, &valid)?;
    }

    mkdir(&out)?;
    let mut m = Manifest::new();
    m.set("pixel_size", p);
    m.set("transform", target.to_row());
    m.set("source", input.display());
    let mut arch = Archive::new("terrain-sample", m);
    arch.push("rgb", rgb_out.clone());
    arch.push("dem", dem_r.data.clone());
    arch.push("cloud", cloud_m.to_tensor());
    arch.push("nodata", nodata_m.to_tensor());
    arch.save(&out.join("sample.bin"))?;
    write_rgb_png(&rgb_out, &out.join("rgb.png"))?;
    let (lo, hi) = min_max(dem_r.data.data());
    write_gray16_png(&dem_r.data, lo, hi, &out.join("dem.png"))?;
    let vbytes: Vec<u8> = valid.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_gray8_png(&vbytes, th, tw, &out.join("valid.png"))?;
    cfg.save(&out.join("run.cfg"))?;
    println!(
        "resampled {h}x{w} -> {th}x{tw}, valid fraction {:.3}, wrote {}",
        valid.fraction(),
        out.display()
    );
    Ok(())
}

fn min_max(v: &[f64]) -> (f64, f64) {
    let (lo, hi) = v
        .iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn cmd_caption(cfg: &RunConfig) -> Result<()> {
    if !cfg.get("caption.atlas").is_empty() {
        let atlas = RegionAtlas::load(&cfg.path("caption.atlas"))?;
        let month: Month = cfg.value("caption.month")?;
        let desc = atlas.lookup(cfg.value("caption.lon")?, cfg.value("caption.lat")?, month)?;
        let cap = desc.caption(false, false);
        println!("{}", render_prompt(&cap, cap.present()));
        return Ok(());
    }
    let corpus = load_corpus(cfg)?;
    let mut text = String::new();
    for s in &corpus.samples {
        let cap = s.descriptors.caption(false, false);
        text.push_str(&format!("{:06}\t{}\n", s.id, render_prompt(&cap, cap.present())));
    }
    let path = cfg.path("corpus.dir").join("captions.tsv");
    write_text(&path, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.path("train.dir");
    let corpus = load_corpus(cfg)?;
    let (train_ids, _) = corpus.split();
    mkdir(&dir)?;
    cfg.save(&dir.join("run.cfg"))?;

    let mut codec = cfg.new_codec()?;
    let codec_cfg = cfg.codec_train()?;
    if codec_cfg.iterations > 0 {
        let mut rasters = Vec::with_capacity(2 * train_ids.len());
        for &i in &train_ids {
            let s = &corpus.samples[i];
            rasters.push(s.rgb.clone());
            rasters.push(replicate3(&corpus.normalize_dem(&s.dem))?);
        }
        let trace = codec.train(&rasters, &codec_cfg)?;
        if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
            println!("codec loss {first:.5} -> {last:.5}");
        }
    }
    codec.save(&dir.join("codec.bin"))?;

    let data = encode_corpus(&corpus, &codec, &train_ids)?;
    let sched = cfg.schedule()?;
    let tc = cfg.train()?;
    let mut model = DenoiserModel::new(cfg.model(codec.latent_channels())?, cfg.model_seed()?)?;
    let log_every: usize = cfg.value::<usize>("train.log_every")?.max(1);
    let ckpt_every: usize = cfg.value("train.checkpoint_every")?;
    let mut extra = Manifest::new();
    extra.set("elevation.min", corpus.elevation_bounds.0);
    extra.set("elevation.max", corpus.elevation_bounds.1);
    extra.set("raster.size", corpus.config.size);
    extra.set("raster.pixel_size", corpus.config.pixel_size());
    let model_path = dir.join("model.bin");
    let trace_path = dir.join("trace.csv");
    let mut logged: Vec<TraceRow> = Vec::new();
    println!(
        "training {} parameters on {} samples for {} steps",
        model.params().num_scalars(),
        data.len(),
        tc.iterations
    );
    let report = train_with(&mut model, &data, &sched, &tc, |row, m| {
        if row.step % log_every == 0 || row.step + 1 == tc.iterations {
            logged.push(*row);
            println!("step {:>6} loss {:.5}", row.step, row.loss);
            write_trace_csv(&logged, &trace_path)?;
        }
        if ckpt_every > 0 && (row.step + 1) % ckpt_every == 0 {
            m.save(&model_path, &extra)?;
        }
        Ok(())
    })?;
    write_trace_csv(&logged, &trace_path)?;
    model.save(&model_path, &extra)?;
    println!(
        "done: {} steps logged, {} batches skipped, checkpoint {}",
        report.trace.len(),
        report.skipped_batches,
        model_path.display()
    );
    Ok(())
}

struct Trained {
    model: DenoiserModel,
    codec: Codec,
    bounds: (f64, f64),
    size: usize,
    pixel_size: f64,
}

fn load_trained(cfg: &RunConfig) -> Result<Trained> {
    let ckpt = cfg.path("sample.checkpoint");
    let codec_path = ckpt.with_file_name("codec.bin");
    for (what, p) in [("denoiser checkpoint", &ckpt), ("codec checkpoint", &codec_path)] {
        if !p.exists() {
            return Err(Error::Missing {
                what,
                path: p.to_path_buf(),
            });
        }
    }
    let (model, extra) = DenoiserModel::load(&ckpt)?;
    Ok(Trained {
        model,
        codec: Codec::load(&codec_path)?,
        bounds: (extra.parse_value("elevation.min")?, extra.parse_value("elevation.max")?),
        size: extra.parse_value("raster.size")?,
        pixel_size: extra.parse_value("raster.pixel_size")?,
    })
}

fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let sc = cfg.sample()?;
    let count: usize = cfg.value("sample.count")?;
    let sched = cfg.schedule()?;
    let dir = cfg.path("sample.dir");
    mkdir(&dir)?;
    cfg.save(&dir.join("run.cfg"))?;
    let mut m = Manifest::new();
    m.set("prompt", &sc.prompt);
    m.set("steps", sc.steps);
    m.set("guidance", sc.guidance_scale);
    m.set("eta", sc.eta);
    m.set("seed", sc.seed);
    m.set("count", count);
    m.set("checkpoint", cfg.get("sample.checkpoint"));
    m.write(&dir.join("manifest.cfg"))?;
    for i in 0..count {
        let c = SampleConfig {
            seed: sc.seed.wrapping_add(i as u64),
            ..sc.clone()
        };
        let g = generate(&t.model, &t.codec, &c, &sched, (t.size, t.size), t.bounds)?;
        let sd = dir.join(format!("{i:04}"));
        mkdir(&sd)?;
        write_rgb_png(&g.rgb, &sd.join("rgb.png"))?;
        write_gray16_png(&g.dem_metres, t.bounds.0, t.bounds.1, &sd.join("dem.png"))?;
        let hs = render_hillshade(&g.dem_metres, t.pixel_size, Sun::default())?;
        write_gray8_png(&hs, t.size, t.size, &sd.join("hillshade.png"))?;
        let mut am = Manifest::new();
        am.set("units.dem", "metres");
        am.set("pixel_size", t.pixel_size);
        am.set("seed", c.seed);
        let mut a = Archive::new("generated", am);
        a.push("rgb", g.rgb);
        a.push("dem", g.dem_metres);
        a.save(&sd.join("dem.bin"))?;
    }
    println!("wrote {count} samples to {}", dir.display());
    Ok(())
}

fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let input = cfg.existing_path("render.input", "elevation input")?;
    let a = Archive::load(&input)?;
    let dem = a.tensor("dem").cloned().ok_or_else(|| Error::Format {
        path: input.clone(),
        message: "archive has no dem tensor".into(),
    })?;
    let pixel_size: f64 = if cfg.get("render.pixel_size").is_empty() {
        a.manifest.parse_value("pixel_size").unwrap_or(1.0)
    } else {
        cfg.value("render.pixel_size")?
    };
    let sun = Sun {
        azimuth: cfg.value("render.azimuth")?,
        altitude: cfg.value("render.altitude")?,
    };
    let (_, h, w) = dem.dims3()?;
    let bytes = render_hillshade(&dem, pixel_size, sun)?;
    let out = cfg.path("render.output");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write_gray8_png(&bytes, h, w, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_check_grad(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed()?;
    let size: usize = cfg.value("checkgrad.size")?;
    let b: usize = cfg.value("checkgrad.batch")?;
    let n_coords: usize = cfg.value("checkgrad.coords")?;
    let mc = DenoiserConfig {
        latent_channels: 3,
        stem_channels: 4,
        backbone_channels: [6, 8],
        embed_dim: 8,
        hash_buckets: 64,
        timesteps: cfg.value("schedule.steps")?,
    };
    let mut model = DenoiserModel::new(mc, seed)?;
    // move off the initialization so every path carries signal
    let mut rng = terrain_diffusion::rng::substream(seed, "checkgrad.perturb", 0);
    model.perturb_params(&mut rng, 0.1);
    let mut rng = terrain_diffusion::rng::substream(seed, "checkgrad.batch", 0);
    let z = |rng: &mut terrain_diffusion::rng::StreamRng| Tensor::randn(&[3, size, size], rng).map(|v| v * 0.5);
    let mut batch = Batch {
        z_img: Vec::new(),
        z_dem: Vec::new(),
        masks: Vec::new(),
        captions: Vec::new(),
    };
    for i in 0..b {
        batch.z_img.push(z(&mut rng));
        batch.z_dem.push(z(&mut rng));
        batch.masks.push(Mask::from_fn(size, size, |r, c| (r + c + i) % 5 != 0));
        batch.captions.push(if i % 2 == 0 {
            "A Sentinel-2 image of Boreal Forest and mountains in Norway in May".into()
        } else {
            String::new()
        });
    }
    let sched = cfg.schedule()?;
    let noise = Noise::draw(&batch, sched.steps(), &mut rng);
    let report = gradient_check(&mut model, &batch, &noise, &sched, n_coords, seed)?;
    println!(
        "parameters {} coordinates {} max_rel_error {:.3e} max_abs_error {:.3e}",
        model.params().num_scalars(),
        report.coordinates,
        report.max_rel_error,
        report.max_abs_error
    );
    if report.max_rel_error < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "max relative error {:.3e} exceeds {GRAD_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let sep = cfg.separation()?;
    let sched = cfg.schedule()?;
    let r = separation(&t.model, &t.codec, &sched, &sep, (t.size, t.size), t.bounds)?;
    let summary = r.summary();
    let verdict = if r.passes() { "PASS" } else { "FAIL" };
    let dir = cfg
        .path("sample.checkpoint")
        .parent()
        .map(PathBuf::from)
        .unwrap_or_default();
    write_text(&dir.join("eval.txt"), &format!("{summary}\n{verdict}\n"))?;
    println!("{summary}\n{verdict}");
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve(sub).and_then(|cfg| match name {
        "synth" => cmd_synth(&cfg),
        "prep" => cmd_prep(&cfg),
        "caption" => cmd_caption(&cfg),
        "train" => cmd_train(&cfg),
        "sample" => cmd_sample(&cfg),
        "render" => cmd_render(&cfg),
        "check-grad" => cmd_check_grad(&cfg),
        "eval" => cmd_eval(&cfg),
        _ => unreachable!("clap rejects unknown commands"),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
