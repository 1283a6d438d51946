//! Toy world, training and synthesis behaviour through the public API.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtdiff::align::AlignmentSpec;
use vtdiff::audio_encoder::EncoderConfig;
use vtdiff::harness::toy::measure_aperture_px;
use vtdiff::harness::{generate_sample, ToyWorldSpec};
use vtdiff::nn::{self, DEVICE};
use vtdiff::schedulers::ScheduleConfig;
use vtdiff::stdiff::{synthesize, train_step, DenoiserConfig, StDiffModel, SynthesisConfig, TrainConfig};
use vtdiff::vae::{VaeConfig, VaeModel};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn measured_aperture_tracks_the_control_signal() {
    let spec = ToyWorldSpec {
        resolution: (128, 128),
        clip_seconds: 3.0,
        ..ToyWorldSpec::default()
    };
    for index in 0..3 {
        let s = generate_sample(&spec, index).unwrap();
        let measured: Vec<f64> = s.frames.iter().map(measure_aperture_px).collect();
        let r = pearson(&measured, &s.frame_controls);
        assert!(r > 0.99, "sample {index}: r = {r}");
    }
}

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        channels: vec![8, 16],
        time_dim: 16,
        heads: 2,
        groups: 4,
        ..DenoiserConfig::default()
    }
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let mut model = StDiffModel::new(tiny_denoiser()).unwrap();
    let before = nn::snapshot(model.varmap()).unwrap();
    let config = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut opt = nn::adam(model.varmap(), config.learning_rate).unwrap();
    let sched = ScheduleConfig::default().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Tensor::randn(0f32, 1.0, (2, 3, 4, 4, 4), &DEVICE).unwrap();
    let audio = Tensor::randn(0f32, 1.0, (2, 12, 32), &DEVICE).unwrap();
    for _ in 0..3 {
        let loss = train_step(&mut model, &mut opt, &x0, &audio, &sched, &config, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }
    assert_eq!(nn::snapshot(model.varmap()).unwrap(), before);
}

#[test]
fn three_window_audio_gives_one_clip_of_three_frames_reproducibly() {
    let spec = AlignmentSpec {
        target_resolution: (32, 32),
        ..AlignmentSpec::default()
    };
    let waveform: Vec<f32> = (0..spec.boundary(3) as usize).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    let mut model = StDiffModel::new(tiny_denoiser()).unwrap();
    model.latent_size = (4, 4);
    let vae = VaeModel::new(VaeConfig {
        channels: [8, 8, 8, 8],
        ..VaeConfig::default()
    })
    .unwrap();
    let backend = EncoderConfig::default().build().unwrap();
    let sched = ScheduleConfig::default().build().unwrap();
    let cfg = SynthesisConfig {
        allow_untrained: true,
        ..SynthesisConfig::default()
    };
    let a = synthesize(&waveform, &model, &vae, backend.as_ref(), &sched, &spec, &cfg).unwrap();
    let b = synthesize(&waveform, &model, &vae, backend.as_ref(), &sched, &spec, &cfg).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    let other = SynthesisConfig { seed: 1, ..cfg.clone() };
    assert_ne!(synthesize(&waveform, &model, &vae, backend.as_ref(), &sched, &spec, &other).unwrap(), a);

    let strict = SynthesisConfig::default();
    assert!(matches!(
        synthesize(&waveform, &model, &vae, backend.as_ref(), &sched, &spec, &strict),
        Err(vtdiff::error::Error::Untrained(_))
    ));
}
