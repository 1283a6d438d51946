//! Invariants checked over randomized inputs.

use proptest::prelude::*;

use vtdiff::baselines::{contrastive_loss, quantize, Codebook, ContrastiveConfig, SemanticPair};
use vtdiff::harness::dataset::{decode_png, decode_wav, encode_png, encode_wav};
use vtdiff::harness::RunConfig;
use vtdiff::metrics::{fvd, kid, psnr, ssim, FeatureSet, SsimParams, FVD_REGULARIZER};
use vtdiff::schedulers::ScheduleConfig;
use vtdiff::stdiff::{clip_starts, stitch_plan};
use vtdiff::Frame;

fn frame_pair(max_side: usize) -> impl Strategy<Value = (Frame, Frame)> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0f32..=1.0, h * w),
            prop::collection::vec(0f32..=1.0, h * w),
        )
            .prop_map(move |(a, b)| (Frame::new(h, w, a).unwrap(), Frame::new(h, w, b).unwrap()))
    })
}

fn feature_pair() -> impl Strategy<Value = (FeatureSet, FeatureSet)> {
    (4usize..12, 1usize..5).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-3f64..3.0, n * d),
            prop::collection::vec(-3f64..3.0, n * d),
        )
            .prop_map(move |(a, b)| {
                (
                    FeatureSet::new(n, d, a, "prop").unwrap(),
                    FeatureSet::new(n, d, b, "prop").unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bars_fall_strictly_inside_the_unit_interval(
        steps in 2usize..2000,
        start in 1e-5f64..1e-2,
        span in 1e-4f64..0.05,
        infer in 1usize..50,
    ) {
        prop_assume!(infer <= steps);
        let sched = ScheduleConfig { train_steps: steps, beta_start: start, beta_end: start + span, inference_steps: infer }
            .build()
            .unwrap();
        let abar = sched.alpha_bars();
        prop_assert!(abar.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(abar.windows(2).all(|w| w[1] < w[0]));
        let ts = sched.inference_timesteps();
        prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ts.iter().all(|&t| (1..=steps).contains(&t)));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded((x, y) in frame_pair(20)) {
        let p = SsimParams::default();
        let xy = ssim(&x, &y, &p).unwrap();
        prop_assert!((xy - ssim(&y, &x, &p).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&xy));
        prop_assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_non_negative_on_unit_range((x, y) in frame_pair(16)) {
        let a = psnr(&x, &y, 1.0).unwrap();
        prop_assert_eq!(a, psnr(&y, &x, 1.0).unwrap());
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn distribution_distances_are_symmetric((a, b) in feature_pair()) {
        let k = kid(&a, &b).unwrap();
        prop_assert!((k - kid(&b, &a).unwrap()).abs() < 1e-9 * (1.0 + k.abs()));
        let f = fvd(&a, &b).unwrap();
        prop_assert!((f - fvd(&b, &a).unwrap()).abs() < 1e-6 * (1.0 + f.abs()));
        prop_assert!(f >= -1e-9);
        // The square root of the covariance product loses about eps * top² / floor
        // near the regularizer floor, so self-distance is only zero to that level.
        let top = a.data.iter().map(|v| v * v).sum::<f64>();
        let bound = 64.0 * f64::EPSILON * top * top / FVD_REGULARIZER;
        prop_assert!(fvd(&a, &a).unwrap() <= bound, "{} > {bound}", fvd(&a, &a).unwrap());
    }

    #[test]
    fn contrastive_loss_is_non_negative_and_zero_when_satisfied(
        d in 1usize..6,
        pairs in prop::collection::vec((prop::collection::vec(-2f32..2.0, 5), prop::collection::vec(-2f32..2.0, 5), any::<bool>()), 1..8),
        margin in 0f64..3.0,
    ) {
        let config = ContrastiveConfig { margin, ..ContrastiveConfig::default() };
        let pairs: Vec<SemanticPair> = pairs
            .into_iter()
            .map(|(a, b, positive)| SemanticPair { image_embedding: a[..d].to_vec(), speech_embedding: b[..d].to_vec(), positive })
            .collect();
        prop_assert!(contrastive_loss(&pairs, &config).unwrap() >= 0.0);

        // Positives collapsed onto their partner and negatives pushed past the margin cost nothing.
        let satisfied: Vec<SemanticPair> = pairs
            .iter()
            .map(|p| {
                let speech = if p.positive {
                    p.image_embedding.clone()
                } else {
                    p.image_embedding.iter().enumerate().map(|(i, v)| if i == 0 { v + margin as f32 + 0.01 } else { *v }).collect()
                };
                SemanticPair { speech_embedding: speech, ..p.clone() }
            })
            .collect();
        prop_assert_eq!(contrastive_loss(&satisfied, &config).unwrap(), 0.0);
    }

    #[test]
    fn quantization_picks_a_nearest_code_and_is_idempotent(
        size in 1usize..10,
        dim in 1usize..5,
        seed in any::<u64>(),
        vectors in prop::collection::vec(-3f32..3.0, 1..40),
    ) {
        let book = Codebook::new(size, dim, seed).unwrap();
        let n = vectors.len() / dim;
        prop_assume!(n > 0);
        let vectors = &vectors[..n * dim];
        let (q, idx) = quantize(vectors, dim, &book).unwrap();
        let dist = |v: &[f32], c: &[f32]| v.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
        for (row, &k) in idx.iter().enumerate() {
            let v = &vectors[row * dim..(row + 1) * dim];
            prop_assert_eq!(&q[row * dim..(row + 1) * dim], book.entry(k));
            let best = (0..size).map(|j| dist(v, book.entry(j))).fold(f32::INFINITY, f32::min);
            prop_assert!(dist(v, book.entry(k)) <= best);
        }
        let (again, idx2) = quantize(&q, dim, &book).unwrap();
        prop_assert_eq!(again, q);
        prop_assert_eq!(idx2.iter().map(|&k| book.entry(k)).collect::<Vec<_>>(), idx.iter().map(|&k| book.entry(k)).collect::<Vec<_>>());
    }

    #[test]
    fn stitch_plan_maps_every_frame_to_itself(frames in 1usize..200, clip in 1usize..20) {
        let starts = clip_starts(frames, clip);
        let plan = stitch_plan(frames, clip);
        prop_assert_eq!(plan.len(), frames);
        for (i, &(k, off)) in plan.iter().enumerate() {
            prop_assert!(k < starts.len());
            prop_assert!(off < clip.max(1));
            prop_assert_eq!(starts[k] + off, i);
        }
    }

    #[test]
    fn png_round_trip_is_within_one_quantization_step((x, _) in frame_pair(12)) {
        let back = decode_png(&encode_png(&x).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        for (a, b) in x.data.iter().zip(&back.data) {
            prop_assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn wav_round_trip_is_within_one_quantization_step(
        samples in prop::collection::vec(-0.99f32..0.99, 0..200),
        rate in 1000u32..48000,
    ) {
        let (back, sr) = decode_wav(&encode_wav(&samples, rate as f64).unwrap()).unwrap();
        prop_assert_eq!(sr, rate as f64);
        prop_assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7);
        }
    }

    #[test]
    fn config_survives_a_toml_round_trip(seed in any::<u64>(), toy in any::<bool>()) {
        let base = if toy { RunConfig::toy() } else { RunConfig::default() };
        let cfg = base.with_seed(seed);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
