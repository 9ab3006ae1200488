use terrain_diffusion::captioner::Month;
use terrain_diffusion::nn::Tensor;
use terrain_diffusion::synthcorpus::*;

fn range(t: &Tensor) -> f64 {
    let d = t.data();
    d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[test]
fn landform_ranges_are_ordered_and_separated() {
    let mean = |l: Landform| (0..100).map(|s| range(&gen_heightmap(l, s, 32))).sum::<f64>() / 100.0;
    let (p, h, m) = (mean(Landform::Plains), mean(Landform::Hills), mean(Landform::Mountains));
    assert!(p * 2.0 <= h && h * 2.0 <= m, "{p} {h} {m}");
    for s in 0..100 {
        let rp = range(&gen_heightmap(Landform::Plains, s, 32));
        let rm = range(&gen_heightmap(Landform::Mountains, s, 32));
        assert!(rp < rm);
    }
}

#[test]
fn generators_are_deterministic() {
    let a = gen_heightmap(Landform::Hills, 5, 16);
    assert_eq!(a, gen_heightmap(Landform::Hills, 5, 16));
    assert_ne!(a, gen_heightmap(Landform::Hills, 6, 16));
    let r1 = gen_rgb(&a, BiomeKind::Steppe, Month::May, 5, 100.0).unwrap();
    assert_eq!(r1, gen_rgb(&a, BiomeKind::Steppe, Month::May, 5, 100.0).unwrap());
    assert_eq!(gen_cloudmask(0.4, 5, 16).unwrap(), gen_cloudmask(0.4, 5, 16).unwrap());
    let cfg = CorpusConfig {
        count: 3,
        size: 16,
        ..CorpusConfig::default()
    };
    assert_eq!(gen_sample(&cfg, 2).unwrap(), gen_sample(&cfg, 2).unwrap());
}

#[test]
fn flat_dem_gives_palette_tone() {
    let p = HeightParams {
        amplitude: 0.0,
        base_jitter: 0.0,
        ..Landform::Hills.params()
    };
    let dem = gen_heightmap_with(&p, 3, 8);
    assert!(dem.data().iter().all(|&v| v == dem.data()[0]));
    let rgb = gen_rgb(&dem, BiomeKind::Tundra, Month::July, 3, 100.0).unwrap();
    for ch in 0..3 {
        let c = rgb.channel(ch);
        assert!(c.iter().all(|&v| (v - c[0]).abs() < 1e-12));
    }
}

#[test]
fn forest_is_greener_than_desert() {
    let green = |b: BiomeKind| {
        (0..100)
            .map(|s| {
                let d = gen_heightmap(Landform::ALL[s as usize % 3], s, 16);
                let rgb = gen_rgb(&d, b, Month::ALL[s as usize % 12], s, 625.0).unwrap();
                rgb.channel(1).iter().sum::<f64>() / 256.0
            })
            .sum::<f64>()
            / 100.0
    };
    assert!(green(BiomeKind::Forest) > green(BiomeKind::Desert));
}

#[test]
fn cloud_coverage_is_exact() {
    assert_eq!(gen_cloudmask(0.0, 1, 32).unwrap().count(), 0);
    assert_eq!(gen_cloudmask(1.0, 1, 32).unwrap().count(), 1024);
    let mean = (0..100)
        .map(|s| gen_cloudmask(0.3, s, 32).unwrap().fraction())
        .sum::<f64>()
        / 100.0;
    assert!((0.25..=0.35).contains(&mean));
    for c in [0.1, 0.5, 0.9] {
        assert!((gen_cloudmask(c, 7, 32).unwrap().fraction() - c).abs() <= 0.05);
    }
    assert!(gen_cloudmask(1.5, 1, 8).is_err());
}

#[test]
fn trivial_classifiers_separate_classes() {
    let cfg = CorpusConfig {
        count: 300,
        size: 16,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&cfg).unwrap();
    let st = corpus.stats();
    assert!(st.landform_accuracy >= 0.95, "{}", st.report());
    assert!(st.biome_accuracy >= 0.95, "{}", st.report());
}

#[test]
fn corpus_round_trips_through_disk() {
    let cfg = CorpusConfig {
        count: 5,
        size: 8,
        nodata_prob: 0.5,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.samples.len(), 5);
    assert_eq!(back.elevation_bounds, corpus.elevation_bounds);
    for (a, b) in corpus.samples.iter().zip(&back.samples) {
        assert_eq!(a.descriptors, b.descriptors);
        assert_eq!(a.valid, b.valid);
        assert!(a.dem.max_abs_diff(&b.dem) < 1e-3);
    }
    let (train, test) = corpus.split();
    assert_eq!(train.len() + test.len(), 5);
    assert!(Corpus::load(&dir.path().join("absent")).is_err());
}
