use ndarray::{Array2, Array4};
use proptest::prelude::*;

use physmap::augment::apply_map;
use physmap::dissonance::{classify, contrastive_loss, LabelConvention, LossConfig};
use physmap::fusion::{build_graph, NodeFeatures};
use physmap::ingest::{segment_lengths, segment_streams, AudioSegment, CropSequence, Label};
use physmap::metrics::roc_auc;
use physmap::physio::{
    channel_means, estimate_waveforms, Estimator, EstimatorConfig, PhysioResponse, Waveform,
};
use physmap::physmaps::{generate_maps_with, Execution, MapMode, OcclusionConfig, PhysMap, Signal};

fn crops_from(values: &[u8], t: usize, size: usize) -> CropSequence {
    let frames = Array4::from_shape_fn((t, size, size, 3), |(f, i, j, c)| {
        values[((f * size + i) * size + j) * 3 + c] as f32 / 256.0
    });
    CropSequence::new(frames, 30.0).unwrap()
}

fn small_maps() -> OcclusionConfig {
    OcclusionConfig {
        patch: 3,
        stride: 3,
        map_size: 6,
        ..OcclusionConfig::default()
    }
}

fn label_vec(bits: &[bool]) -> Vec<Label> {
    bits.iter()
        .map(|&b| if b { Label::Fake } else { Label::Real })
        .collect()
}

/// Every channel weighted alike; no detrending.
struct ChannelMean;

impl Estimator for ChannelMean {
    fn estimate(&self, crops: &CropSequence) -> physmap::Result<PhysioResponse> {
        let [r, g, b] = channel_means(crops);
        let samples: Vec<f64> = (0..crops.len())
            .map(|t| (r[t] + g[t] + b[t]) / 3.0)
            .collect();
        let w = Waveform {
            samples,
            fps: crops.fps(),
        };
        Ok(PhysioResponse {
            pulse: w.clone(),
            resp: w,
            degenerate: false,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn segmentation_conserves_frames(
        total in 1usize..400,
        fps in 10u32..60,
        rate_hundreds in 1u32..20,
        d in prop::sample::select(vec![0.5f64, 1.0, 2.0]),
    ) {
        let rate = rate_hundreds * 100;
        let (n_frames, n_audio) = segment_lengths(d, fps as f64, rate);
        let crops = CropSequence::new(Array4::zeros((total, 2, 2, 3)), fps as f64).unwrap();
        // Each sample holds its own index, so a segment's first sample is its offset.
        let audio = AudioSegment::Samples {
            samples: (0..(total / n_frames + 2) * n_audio).map(|i| i as f32).collect(),
            sample_rate: rate,
        };
        let segs = segment_streams("v", Label::Real, &crops, &audio, d).unwrap();
        let used: usize = segs.iter().map(|s| s.crops.len()).sum();
        prop_assert_eq!(used + total % n_frames, total);
        let tol = 1.0 / fps as f64;
        for (k, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.index, k + 1);
            prop_assert_eq!(s.audio.len(), n_audio);
            let AudioSegment::Samples { samples, .. } = &s.audio else { unreachable!() };
            let video = ((k * n_frames) as f64 / fps as f64, ((k + 1) * n_frames) as f64 / fps as f64);
            let start = samples[0] as f64 / rate as f64;
            let sound = (start, start + n_audio as f64 / rate as f64);
            prop_assert!((video.0 - sound.0).abs() <= tol);
            prop_assert!((video.1 - sound.1).abs() <= tol);
        }
    }

    #[test]
    fn estimator_is_deterministic_and_length_preserving(
        values in prop::collection::vec(any::<u8>(), 20 * 4 * 4 * 3),
        method in prop::sample::select(vec!["green_mean", "chrom", "pos"]),
    ) {
        let crops = crops_from(&values, 20, 4);
        let cfg = EstimatorConfig::with_method(method.parse().unwrap());
        let a = estimate_waveforms(&crops, &cfg).unwrap();
        let b = estimate_waveforms(&crops, &cfg).unwrap();
        prop_assert_eq!(a.pulse.len(), 20);
        prop_assert_eq!(a.resp.len(), 20);
        prop_assert!(a.pulse.samples.iter().zip(&b.pulse.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn green_mean_is_linear_without_band_limit(
        x in prop::collection::vec(any::<u8>(), 20 * 4 * 4 * 3),
        y in prop::collection::vec(any::<u8>(), 20 * 4 * 4 * 3),
        qa in 0u8..=4,
        qb in 0u8..=4,
    ) {
        prop_assume!(qa + qb <= 4);
        // Quarter steps keep a·X + b·Y exact in f32.
        let (a, b) = (qa as f64 / 4.0, qb as f64 / 4.0);
        let cfg = EstimatorConfig { band_limit: false, ..EstimatorConfig::default() };
        let (cx, cy) = (crops_from(&x, 20, 4), crops_from(&y, 20, 4));
        let mixed = CropSequence::new(
            cx.frames() * a as f32 + cy.frames() * b as f32,
            30.0,
        ).unwrap();
        let ex = estimate_waveforms(&cx, &cfg).unwrap().pulse.samples;
        let ey = estimate_waveforms(&cy, &cfg).unwrap().pulse.samples;
        let em = estimate_waveforms(&mixed, &cfg).unwrap().pulse.samples;
        for t in 0..20 {
            prop_assert!((em[t] - (a * ex[t] + b * ey[t])).abs() <= 1e-9);
        }
    }

    #[test]
    fn maps_are_normalized_and_parallel_matches_serial(
        values in prop::collection::vec(any::<u8>(), 16 * 6 * 6 * 3),
        color in any::<bool>(),
    ) {
        let crops = crops_from(&values, 16, 6);
        let cfg = OcclusionConfig {
            mode: if color { MapMode::Color } else { MapMode::Gray },
            ..small_maps()
        };
        let est = EstimatorConfig::default();
        let serial = generate_maps_with(&crops, &cfg, &est, Execution::Serial).unwrap();
        let parallel = generate_maps_with(&crops, &cfg, &est, Execution::Parallel).unwrap();
        prop_assert_eq!(&serial, &parallel);
        if !serial.degenerate {
            prop_assert!(serial.values.iter().any(|&v| v == 0.0));
            prop_assert!(serial.values.iter().any(|&v| v == 1.0));
        }
        prop_assert!(serial.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gray_input_gives_equal_color_channels(values in prop::collection::vec(any::<u8>(), 8 * 6 * 6)) {
        let frames = Array4::from_shape_fn((8, 6, 6, 3), |(f, i, j, _)| values[(f * 6 + i) * 6 + j] as f32 / 255.0);
        let crops = CropSequence::new(frames, 30.0).unwrap();
        let cfg = OcclusionConfig { mode: MapMode::Color, ..small_maps() };
        let m = generate_maps_with(&crops, &cfg, &ChannelMean, Execution::Serial).unwrap();
        for v in m.values.lanes(ndarray::Axis(3)) {
            prop_assert!((v[0] - v[1]).abs() <= 1e-9 && (v[1] - v[2]).abs() <= 1e-9);
        }
    }

    #[test]
    fn frame_permutation_commutes_without_detrending(
        values in prop::collection::vec(any::<u8>(), 8 * 6 * 6 * 3),
        perm in Just((0..8usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let crops = crops_from(&values, 8, 6);
        let shuffled = CropSequence::new(
            Array4::from_shape_fn((8, 6, 6, 3), |(f, i, j, c)| crops.frames()[[perm[f], i, j, c]]),
            30.0,
        ).unwrap();
        let cfg = small_maps();
        let m = generate_maps_with(&crops, &cfg, &ChannelMean, Execution::Serial).unwrap();
        let p = generate_maps_with(&shuffled, &cfg, &ChannelMean, Execution::Serial).unwrap();
        for (f, &src) in perm.iter().enumerate() {
            prop_assert_eq!(p.values.index_axis(ndarray::Axis(0), f), m.values.index_axis(ndarray::Axis(0), src));
        }
    }

    #[test]
    fn augmentation_range_and_monotonicity(
        crop in prop::collection::vec(0u8..=255, 2 * 4 * 4 * 3),
        map in prop::collection::vec(0u8..=255, 2 * 4 * 4),
        bump in 0usize..32,
    ) {
        let crops = crops_from(&crop, 2, 4);
        let gray = PhysMap {
            values: Array4::from_shape_fn((2, 4, 4, 1), |(f, i, j, _)| map[(f * 4 + i) * 4 + j] as f32 / 255.0),
            signal: Signal::Hr,
            mode: MapMode::Gray,
            degenerate: false,
        };
        let out = apply_map(&crops, &gray).unwrap();
        prop_assert!(out.crops.frames().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut raised = gray.clone();
        let cell = raised.values.iter_mut().nth(bump).unwrap();
        *cell = (*cell + 0.25).min(1.0);
        let up = apply_map(&crops, &raised).unwrap();
        prop_assert!(up.crops.frames().iter().zip(out.crops.frames()).all(|(a, b)| a >= b));

        let color = PhysMap {
            values: Array4::from_shape_fn((2, 4, 4, 3), |(f, i, j, _)| gray.values[[f, i, j, 0]]),
            mode: MapMode::Color,
            ..gray.clone()
        };
        let via_color = apply_map(&crops, &color).unwrap();
        prop_assert!(via_color.crops.frames().iter().zip(out.crops.frames()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn adjacency_is_bipartite_symmetric_and_scale_free(
        t in 1usize..8,
        d in 1usize..6,
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let h = Array2::from_shape_fn((2 * t, d), |_| next());
        let g = build_graph(&NodeFeatures::new(h.clone()).unwrap());
        let a = &g.adjacency;
        for i in 0..2 * t {
            for j in 0..2 * t {
                prop_assert!((a[[i, j]] - a[[j, i]]).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&a[[i, j]]));
                if (i < t) == (j < t) {
                    prop_assert_eq!(a[[i, j]], 0.0);
                }
            }
        }
        let scaled = build_graph(&NodeFeatures::new(h * scale).unwrap());
        for (x, y) in scaled.adjacency.iter().zip(a.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn contrastive_loss_properties(
        pairs in prop::collection::vec((0.0f64..3.0, any::<bool>()), 1..40),
    ) {
        let (d, bits): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        let labels = label_vec(&bits);
        let semantic = LossConfig::default();
        let l = contrastive_loss(&d, &labels, &semantic).unwrap();
        prop_assert!(l >= 0.0);
        let satisfied = d.iter().zip(&labels).all(|(&x, &lab)| match lab {
            Label::Real => x == 0.0,
            Label::Fake => x >= semantic.margin,
        });
        prop_assert_eq!(l == 0.0, satisfied);

        let complemented: Vec<Label> = label_vec(&bits.iter().map(|b| !b).collect::<Vec<_>>());
        let verbatim = LossConfig { label_convention: LabelConvention::Verbatim, ..semantic };
        prop_assert_eq!(contrastive_loss(&d, &complemented, &verbatim).unwrap(), l);
    }

    #[test]
    fn classify_is_monotone(m in -5.0f64..5.0, step in 0.0f64..5.0, tau in -5.0f64..5.0) {
        if classify(m, tau, LabelConvention::Semantic) == Label::Fake {
            prop_assert_eq!(classify(m + step, tau, LabelConvention::Semantic), Label::Fake);
        }
    }

    #[test]
    fn auc_monotone_invariance_and_complement(
        raw in prop::collection::vec((-100i32..100, any::<bool>()), 2..60),
    ) {
        let (ints, bits): (Vec<i32>, Vec<bool>) = raw.into_iter().unzip();
        prop_assume!(bits.iter().any(|&b| b) && bits.iter().any(|&b| !b));
        let labels = label_vec(&bits);
        let scores: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s / 20.0).exp() * 3.0 - 7.0).collect();
        prop_assert_eq!(roc_auc(&warped, &labels).unwrap(), auc);

        let mut seen = std::collections::HashSet::new();
        prop_assume!(ints.iter().all(|v| seen.insert(*v)));
        let flipped = label_vec(&bits.iter().map(|b| !b).collect::<Vec<_>>());
        prop_assert_eq!(auc + roc_auc(&scores, &flipped).unwrap(), 1.0);
    }
}
