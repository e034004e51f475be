mod common;

use common::{oracle_pearson, random_series, rng};
use mmvq_core::features::*;
use proptest::prelude::*;

#[test]
fn fvtc_matches_brute_force_pearson() {
    let mut r = rng(11);
    for inst in 0..120 {
        let channels = 2 + inst % 4;
        let frames = 60 + inst;
        let s = random_series(&mut r, Modality::Audio, channels, frames, 10.0);
        let seg = Segment {
            index: 0,
            start_s: 0.0,
            end_s: frames as f64 / 10.0,
            audio_frames: 3..frames,
            video_frames: 0..0,
        };
        let delays = [0, 1, 4, 9];
        let (m, _) = build_fvtc(&s, &seg, &delays).unwrap();
        let t = frames - 3;
        for i in 0..channels {
            for j in 0..channels {
                for (k, &d) in delays.iter().enumerate() {
                    let x = &s.samples[i][3..3 + t - d];
                    let y = &s.samples[j][3 + d..];
                    let want = oracle_pearson(x, y);
                    assert!((m.get(i, j, k) - want).abs() < 1e-6, "inst {inst} ({i},{j},{d})");
                }
            }
        }
    }
}

#[test]
fn default_fvtc_shapes() {
    let cfg = FeatureConfig::default();
    assert_eq!(cfg.fvtc_shape(Modality::Audio), (8, 80));
    assert_eq!(cfg.fvtc_shape(Modality::Video), (10, 100));
    let mut r = rng(2);
    let a = random_series(&mut r, Modality::Audio, 8, 4500, 100.0);
    let mut v = random_series(&mut r, Modality::Video, 10, 1350, 30.0);
    v.channel_names = cfg.video_channels.clone();
    let mut a = a;
    a.channel_names = cfg.audio_channels.clone();
    let (segs, warnings) = session_features(&a, &v, &cfg).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(segs.len(), 1);
    assert_eq!(segs[0].audio.shape(), &[8, 80]);
    assert_eq!(segs[0].video.shape(), &[10, 100]);
}

#[test]
fn long_session_segment_count() {
    assert_eq!(segment_count(3960.0, 40.0, 35.0), 113);
    assert_eq!(segment_count(39.9, 40.0, 35.0), 0);
}

#[test]
fn cache_round_trip() {
    let mut r = rng(5);
    let cfg = FeatureConfig::default();
    let mut a = random_series(&mut r, Modality::Audio, 8, 8000, 100.0);
    let mut v = random_series(&mut r, Modality::Video, 10, 2400, 30.0);
    a.channel_names = cfg.audio_channels.clone();
    v.channel_names = cfg.video_channels.clone();
    let (segs, _) = session_features(&a, &v, &cfg).unwrap();
    assert_eq!(segs.len(), 2);
    let mut cache = FeatureCache::default();
    cache.sessions.insert("sess".into(), segs);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.mmvq");
    cache.save(&p).unwrap();
    assert_eq!(FeatureCache::load(&p).unwrap(), cache);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Pearson correlation ignores positive affine rescaling of a channel.
    #[test]
    fn fvtc_affine_invariant(seed in 0u64..1000, scale in 0.1f64..20.0, shift in -50.0f64..50.0, ch in 0usize..3) {
        let mut r = rng(seed);
        let s = random_series(&mut r, Modality::Video, 3, 90, 30.0);
        let mut t = s.clone();
        for x in &mut t.samples[ch] {
            *x = *x * scale + shift;
        }
        let seg = Segment { index: 0, start_s: 0.0, end_s: 3.0, audio_frames: 0..0, video_frames: 0..90 };
        let (a, _) = build_fvtc(&s, &seg, &[0, 2, 5]).unwrap();
        let (b, _) = build_fvtc(&t, &seg, &[0, 2, 5]).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    /// Every value is a correlation and zero-delay self-correlation is 1.
    #[test]
    fn fvtc_bounded(seed in 0u64..1000) {
        let mut r = rng(seed);
        let s = random_series(&mut r, Modality::Audio, 4, 70, 10.0);
        let seg = Segment { index: 0, start_s: 0.0, end_s: 7.0, audio_frames: 0..70, video_frames: 0..0 };
        let (m, _) = build_fvtc(&s, &seg, &[0, 3]).unwrap();
        prop_assert!(m.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..4 {
            prop_assert!((m.get(i, i, 0) - 1.0).abs() < 1e-12);
        }
    }

    /// Windows start on the hop grid, lie inside the session, and are all full length.
    #[test]
    fn segmentation_grid(dur in 40.0f64..400.0, seed in 0u64..50) {
        let mut r = rng(seed);
        let a = random_series(&mut r, Modality::Audio, 1, (dur * 100.0) as usize, 100.0);
        let mut v = random_series(&mut r, Modality::Video, 1, (dur * 30.0) as usize, 30.0);
        v.session_id = a.session_id.clone();
        let s = segment_session(&a, &v, 40.0, 5.0).unwrap();
        prop_assert_eq!(s.segments.len(), segment_count(a.duration_s().min(v.duration_s()), 40.0, 35.0));
        for (k, g) in s.segments.iter().enumerate() {
            prop_assert!((g.start_s - 35.0 * k as f64).abs() < 1e-9);
            prop_assert!(g.audio_frames.end <= a.frames() && g.video_frames.end <= v.frames());
            prop_assert_eq!(g.audio_frames.len(), 4000);
            prop_assert_eq!(g.video_frames.len(), 1200);
        }
    }
}
