use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::query::{build_vocab, EmbeddingSource};

fn tiny() -> (Separator, Vocabulary) {
    let cfg = ModelConfig::tiny();
    let vocab = build_vocab(&["tone", "noise"], cfg.d_query, 5).unwrap();
    (Separator::new(cfg, &vocab, 7).unwrap(), vocab)
}

fn noise(len: usize, seed: u64, rate: u32) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), rate).unwrap()
}

fn zero_param(sep: &mut Separator, name: &str) {
    let i = sep.params().index_of(name).unwrap();
    sep.params_mut().param_mut(i).data_mut().fill(0.0);
}

#[test]
fn config_validation() {
    ModelConfig::default().validate().unwrap();
    ModelConfig::tiny().validate().unwrap();
    ModelConfig::full_scale().validate().unwrap();
    let mut c = ModelConfig::default();
    c.channels = vec![8, 8, 32];
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.n_encoder_blocks = 2;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.kernel = 4;
    assert!(c.validate().is_err());
}

#[test]
fn film_examples() {
    let h = FeatureMap::new(1, 2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    assert_eq!(film(&h, &FilmParams::identity(1)).unwrap(), h);
    let c = film(&h, &FilmParams { gamma: vec![0.0], beta: vec![4.0] }).unwrap();
    assert!(c.data.iter().all(|&v| v == 4.0));
    let y = film(&h, &FilmParams { gamma: vec![2.0], beta: vec![-1.0] }).unwrap();
    assert_eq!(y.data, vec![1.0, -5.0, 0.0, 5.0]);
    assert!(film(&h, &FilmParams::identity(2)).is_err());
}

#[test]
fn per_channel_film() {
    let h = FeatureMap::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = film(&h, &FilmParams { gamma: vec![1.0, -1.0], beta: vec![0.0, 10.0] }).unwrap();
    assert_eq!(y.data, vec![1.0, 2.0, 7.0, 6.0]);
}

#[test]
fn film_generator_shapes_and_identity() {
    let mut cfg = ModelConfig::default();
    cfg.zero_init_film = true;
    let vocab = build_vocab(&["a", "b"], cfg.d_query, 1).unwrap();
    let sep = Separator::new(cfg.clone(), &vocab, 3).unwrap();
    let units = cfg.n_encoder_blocks * cfg.units_per_block * 2
        + cfg.n_bottleneck_blocks * cfg.bottleneck_units;
    let films = sep.film_generator(&sep.embed("a").unwrap()).unwrap();
    assert_eq!(films.len(), 2 * units);
    assert_eq!(sep.film_layer_count(), films.len());
    for f in &films {
        assert!(f.gamma.iter().all(|&g| g == 1.0));
        assert!(f.beta.iter().all(|&b| b == 0.0));
    }
    // Two units of two convs per encoder block: 8, 16, then 32 wide.
    assert_eq!(films[0].channels(), 8);
    assert_eq!(films[4].channels(), 16);
    assert_eq!(films[8].channels(), 32);
}

#[test]
fn film_generator_distinguishes_queries() {
    let cfg = ModelConfig::default();
    let vocab = build_vocab(&["a", "b"], cfg.d_query, 1).unwrap();
    let sep = Separator::new(cfg, &vocab, 3).unwrap();
    let fa = sep.film_generator(&sep.embed("a").unwrap()).unwrap();
    let fb = sep.film_generator(&sep.embed("b").unwrap()).unwrap();
    assert_ne!(fa, fb);
    assert_eq!(fa, sep.film_generator(&sep.embed("A ").unwrap()).unwrap());
}

#[test]
fn residual_unit_identity_and_shape() {
    let (sep, _) = tiny();
    let mut p = sep.unit_params("mid.0.unit.0").unwrap();
    let c = p.out_channels();
    assert!(p.shortcut.is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = FeatureMap::new(c, 4, 4, (0..c * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let id = FilmParams::identity(c);
    let y = residual_conv_block(&h, &p, [&id, &id], true, 0.01).unwrap();
    assert_eq!((y.channels, y.height, y.width), (c, 4, 4));
    assert!(y.data.iter().all(|v| v.is_finite()));
    p.conv1.data_mut().fill(0.0);
    p.conv2.data_mut().fill(0.0);
    let y = residual_conv_block(&h, &p, [&id, &id], false, 0.01).unwrap();
    assert_eq!(y, h);
}

#[test]
fn residual_unit_projection_shortcut() {
    let (sep, _) = tiny();
    let p = sep.unit_params("enc.1.unit.0").unwrap();
    assert_eq!((p.in_channels(), p.out_channels()), (2, 4));
    assert!(p.shortcut.is_some());
    let h = FeatureMap::new(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]).unwrap();
    let id = FilmParams::identity(4);
    let y = residual_conv_block(&h, &p, [&id, &id], false, 0.01).unwrap();
    assert_eq!(y.channels, 4);
    let wrong = FeatureMap::new(4, 2, 2, vec![0.0; 16]).unwrap();
    assert!(residual_conv_block(&wrong, &p, [&id, &id], false, 0.01).is_err());
}

#[test]
fn forward_contract() {
    let (sep, _) = tiny();
    let cfg = sep.config().clone();
    for len in [64, 77, 100] {
        let x = noise(len, len as u64, cfg.sample_rate);
        let (y, m) = sep.forward(&x, &sep.embed("tone").unwrap()).unwrap();
        assert_eq!(y.len(), len);
        assert!(y.samples().iter().all(|v| v.is_finite()));
        assert!(m.magnitude().iter().all(|&v| (0.0..=cfg.mask_ceiling).contains(&v)));
        assert!(m.phase_residual().iter().all(|p| p.abs() <= std::f64::consts::PI));
        assert_eq!(m.bins(), cfg.stft.bins());
    }
    let x = noise(100, 1, cfg.sample_rate);
    let e = sep.embed("tone").unwrap();
    assert_eq!(sep.forward(&x, &e).unwrap(), sep.forward(&x, &e).unwrap());
}

#[test]
fn forward_rejects_bad_input() {
    let (sep, _) = tiny();
    let e = sep.embed("tone").unwrap();
    assert!(matches!(sep.forward(&noise(10, 1, 8000), &e), Err(Error::TooShort { .. })));
    assert!(matches!(sep.forward(&noise(100, 1, 16000), &e), Err(Error::RateMismatch(..))));
    assert!(matches!(sep.separate(&noise(100, 1, 8000), "dog"), Err(Error::UnknownQuery(_))));
    let mut bad = sep.clone();
    bad.params_mut().param_mut(1).data_mut()[0] = f64::NAN;
    assert!(matches!(bad.forward(&noise(100, 1, 8000), &e), Err(Error::NonFinite(_))));
}

#[test]
fn identity_at_init() {
    let mut cfg = ModelConfig::tiny();
    cfg.zero_init_film = true;
    let vocab = build_vocab(&["x"], cfg.d_query, 1).unwrap();
    let mut sep = Separator::new(cfg.clone(), &vocab, 2).unwrap();
    zero_param(&mut sep, "head.weight");
    let x = noise(200, 9, cfg.sample_rate);
    let (y, m) = sep.forward(&x, &sep.embed("x").unwrap()).unwrap();
    assert!(m.magnitude().iter().all(|&v| (v - cfg.mask_ceiling / 2.0).abs() < 1e-15));
    assert!(m.phase_residual().iter().all(|&p| p == 0.0));
    // Ceiling 2 puts the unit mask at u = 0, so the output is the round trip.
    let err = y
        .samples()
        .iter()
        .zip(x.samples())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(err < 1e-9, "identity mask error {err}");
}

#[test]
fn checkpoint_round_trip() {
    let (sep, _) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    sep.save(&p, 7).unwrap();
    let back = Separator::load(&p).unwrap();
    assert_eq!(back.params(), sep.params());
    assert_eq!(back.config(), sep.config());
    assert_eq!(back.vocab_keys(), sep.vocab_keys());
    let a = std::fs::read(&p).unwrap();
    back.save(&p, 7).unwrap();
    assert_eq!(a, std::fs::read(&p).unwrap());
    let x = noise(100, 3, 8000);
    assert_eq!(sep.separate(&x, "noise").unwrap(), back.separate(&x, "noise").unwrap());
}

#[test]
fn checkpoint_rejects_corruption() {
    let (sep, _) = tiny();
    let mut bytes = sep.to_checkpoint(1, Vec::new(), None).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    bytes.truncate(bytes.len() - 4);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let mut ck = sep.to_checkpoint(1, Vec::new(), None);
    ck.header.manifest.retain(|m| m.name != "head.bias");
    assert!(Separator::from_checkpoint(&ck).is_err());
}

#[test]
fn external_query_fallback() {
    let (sep, _) = tiny();
    let v = QueryEmbedding::new(vec![0.5, -0.5, 0.5, 0.5], EmbeddingSource::External).unwrap();
    let mut map = BTreeMap::new();
    map.insert("dog bark".to_string(), v.clone());
    assert_eq!(sep.resolve_query("Dog  Bark", Some(&map)).unwrap(), v);
    assert!(sep.resolve_query("dog bark", None).is_err());
    assert_eq!(
        sep.resolve_query("tone", Some(&map)).unwrap().source(),
        EmbeddingSource::Table
    );
    let wide = QueryEmbedding::new(vec![1.0; 8], EmbeddingSource::External)
        .unwrap()
        .normalize()
        .unwrap();
    assert!(sep.forward(&noise(100, 1, 8000), &wide).is_err());
}

#[test]
fn batch_statistics_feed_running_buffers() {
    let (mut sep, _) = tiny();
    let xs: Vec<AudioClip> = (0..2).map(|i| noise(64, i, 8000)).collect();
    let mut tape = Tape::new();
    let out = sep
        .build_graph(&mut tape, &xs, QueryInput::Rows(&[0, 1]), NormMode::Batch, true)
        .unwrap();
    assert!(!out.stats.is_empty());
    let before = sep.params().buffers().to_vec();
    sep.update_running_stats(&out);
    assert_ne!(before, sep.params().buffers());
}
