use diarkit::features::{
    compute_mfcc, segment_speech, sliding_cmn, FeatureMatrix, MfccConfig, SadMark, Segment,
    SegmentConfig, Waveform,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Reference rows produced by tests/oracles/mfcc_reference.py (naive DFT,
// explicit filterbank and DCT loops).
const TONE_ROW_0: [f64; 23] = [
    92.38373569900156,
    4.175818685278396,
    -2.5769467673563216,
    -4.900797164271923,
    -4.656741984845395,
    -3.025017034088469,
    -0.8793271400545436,
    0.617185754197411,
    1.1495229422018527,
    0.7389314091240059,
    -0.017655816111982133,
    -0.6472500152797985,
    -0.8120213615283769,
    -0.5944596314073157,
    -0.22615954047091588,
    0.015086156231826348,
    0.07614500299993728,
    0.001081813840183373,
    -0.06039977759718726,
    -0.03523613227514523,
    0.047703826725797795,
    0.10896660716312916,
    0.09184608474271932,
];
const TONE_ROW_50: [f64; 23] = [
    68.81764757097231,
    11.141487081699264,
    -0.07378253803718618,
    -5.599511089759503,
    -7.203930504744555,
    -5.049258352910652,
    -0.7377120323859822,
    3.168792059601034,
    4.777029863007757,
    3.60021867134924,
    0.8531843093837015,
    -1.599454958997591,
    -2.364582542499393,
    -1.5296860451163956,
    -0.14937988728457896,
    0.7262625592978407,
    0.6089598291920579,
    0.006197829607003618,
    -0.2454843019686146,
    0.2147620028938838,
    1.051182283602191,
    1.5440983407436724,
    1.142202461573614,
];
const TONE_ROW_99: [f64; 23] = [
    91.8644578853108,
    4.498087506378527,
    -2.345022898973183,
    -4.769760323218772,
    -4.6077420829415185,
    -3.0172828806930023,
    -0.8638787927932777,
    0.6777853630334453,
    1.2650232655824503,
    0.8851260845700988,
    0.11139852271147767,
    -0.5802885458050604,
    -0.8262425680865675,
    -0.6715220273216511,
    -0.32386252558878414,
    -0.05728260236276049,
    0.05252128711278624,
    0.01628850281199717,
    -0.036366491538261166,
    -0.026348277147687657,
    0.02643378138672752,
    0.07109694795198218,
    0.06446007498550407,
];

fn tone(freq: f64, seconds: f64) -> Waveform {
    let n = (8000.0 * seconds) as usize;
    let samples = (0..n)
        .map(|i| 10000.0 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin())
        .collect();
    Waveform::new(samples, 8000).unwrap()
}

#[test]
fn one_and_a_half_seconds_give_150_frames() {
    let wave = Waveform::new(vec![1.0; 12000], 8000).unwrap();
    let feats = compute_mfcc(&wave, &MfccConfig::default()).unwrap();
    assert_eq!(feats.num_frames(), 150);
    assert_eq!(feats.dim(), 23);
}

#[test]
fn zero_signal_gives_identical_floored_rows() {
    let wave = Waveform::new(vec![0.0; 12000], 8000).unwrap();
    let feats = compute_mfcc(&wave, &MfccConfig::default()).unwrap();
    assert_eq!(feats.num_frames(), 150);
    for r in 1..150 {
        assert_eq!(feats.values.row(r), feats.values.row(0));
    }
    // log(1e-10) projected on the constant DCT basis vector
    let c0 = (23f64).sqrt() * (1e-10f64).ln();
    assert!((feats.values[(0, 0)] - c0).abs() < 1e-9);
}

#[test]
fn pure_tone_matches_reference_chain() {
    let feats = compute_mfcc(&tone(440.0, 1.0), &MfccConfig::default()).unwrap();
    assert_eq!(feats.num_frames(), 100);
    for (t, want) in [(0, &TONE_ROW_0), (50, &TONE_ROW_50), (99, &TONE_ROW_99)] {
        for (c, w) in want.iter().enumerate() {
            let got = feats.values[(t, c)];
            assert!((got - w).abs() < 1e-8, "frame {t} coef {c}: {got} vs {w}");
        }
    }
}

#[test]
fn mfcc_is_bit_deterministic() {
    let w = tone(313.0, 0.7);
    let a = compute_mfcc(&w, &MfccConfig::default()).unwrap();
    let b = compute_mfcc(&w, &MfccConfig::default()).unwrap();
    assert_eq!(a.values.as_slice(), b.values.as_slice());
}

proptest! {
    #[test]
    fn frame_count_is_rounded_sample_ratio(n in 200usize..20_000) {
        let wave = Waveform::new(vec![3.0; n], 8000).unwrap();
        let feats = compute_mfcc(&wave, &MfccConfig::default()).unwrap();
        prop_assert_eq!(feats.num_frames(), (n as f64 / 80.0).round() as usize);
    }
}

#[test]
fn cmn_of_constant_is_zero() {
    let feats = FeatureMatrix::new(DMatrix::from_element(500, 4, 2.5));
    let out = sliding_cmn(&feats, 300);
    assert!(out.values.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn cmn_short_utterance_uses_global_mean() {
    let feats = FeatureMatrix::new(DMatrix::from_column_slice(2, 1, &[1.0, 3.0]));
    let out = sliding_cmn(&feats, 300);
    assert_eq!(out.values.as_slice(), &[-1.0, 1.0]);
}

#[test]
fn cmn_matches_brute_force_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = DMatrix::from_fn(500, 3, |_, _| rng.random_range(-5.0..5.0));
    let feats = FeatureMatrix::new(x.clone());
    let window = 300usize;
    let out = sliding_cmn(&feats, window);
    for t in 0..500usize {
        let lo = t as i64 - (window / 2) as i64;
        let hi = lo + window as i64;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut count = 0;
            for s in lo..hi {
                if (0..500).contains(&s) {
                    sum += x[(s as usize, c)];
                    count += 1;
                }
            }
            let want = x[(t, c)] - sum / count as f64;
            assert!((out.values[(t, c)] - want).abs() < 1e-10);
        }
    }
}

proptest! {
    #[test]
    fn cmn_zeroes_utterance_mean_when_shorter_than_window(
        rows in 1usize..60,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(rows, 5, |_, _| rng.random_range(-100.0..100.0));
        let out = sliding_cmn(&FeatureMatrix::new(x), 60);
        for c in 0..5 {
            let mean = out.values.column(c).sum() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }
}

fn bounds(segs: &[Segment]) -> Vec<(f64, f64)> {
    segs.iter().map(|s| (s.start_s, s.end_s)).collect()
}

#[test]
fn three_second_region_gives_three_windows() {
    let marks = vec![SadMark::new("c", 0.0, 3.0).unwrap()];
    let segs = segment_speech(&marks, &SegmentConfig::default());
    assert_eq!(bounds(&segs), vec![(0.0, 1.5), (0.75, 2.25), (1.5, 3.0)]);
    assert_eq!(segs[0].frame_range, 0..150);
    assert_eq!(segs[2].frame_range, 150..300);
}

#[test]
fn short_region_gives_one_segment() {
    let marks = vec![SadMark::new("c", 0.0, 1.0).unwrap()];
    let segs = segment_speech(&marks, &SegmentConfig::default());
    assert_eq!(bounds(&segs), vec![(0.0, 1.0)]);
}

#[test]
fn tiny_region_is_dropped() {
    let marks = vec![SadMark::new("c", 0.0, 0.3).unwrap()];
    assert!(segment_speech(&marks, &SegmentConfig::default()).is_empty());
}

#[test]
fn overlapping_marks_are_merged_first() {
    let marks = vec![
        SadMark::new("c", 1.0, 2.0).unwrap(),
        SadMark::new("c", 0.0, 1.2).unwrap(),
    ];
    let segs = segment_speech(&marks, &SegmentConfig::default());
    assert_eq!(bounds(&segs), vec![(0.0, 1.5), (0.75, 2.0)]);
}

proptest! {
    #[test]
    fn segments_tile_regions(
        regions in prop::collection::vec((0.0f64..5.0, 0.1f64..9.0), 1..5)
    ) {
        // lay regions end to end with gaps so they never overlap
        let mut t = 0.0;
        let mut marks = Vec::new();
        for (gap, len) in &regions {
            let start = t + gap;
            marks.push(SadMark::new("conv", start, start + len).unwrap());
            t = start + len + 0.01;
        }
        let cfg = SegmentConfig::default();
        let segs = segment_speech(&marks, &cfg);
        for s in &segs {
            let inside: Vec<_> = marks
                .iter()
                .filter(|m| s.start_s >= m.start_s - 1e-9 && s.end_s <= m.end_s + 1e-9)
                .collect();
            prop_assert_eq!(inside.len(), 1);
            prop_assert!(s.duration_s() <= cfg.seg_len_s + cfg.frame_shift_s);
            prop_assert!(s.duration_s() >= cfg.min_len_s - 1e-9);
        }
        for pair in segs.windows(2) {
            let same_region = marks.iter().any(|m| {
                pair[0].start_s >= m.start_s - 1e-9 && pair[1].end_s <= m.end_s + 1e-9
            });
            if same_region {
                prop_assert!((pair[1].start_s - pair[0].start_s - cfg.shift_s).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn segment_id_round_trips() {
    let marks = vec![SadMark::new("conv_07", 2.0, 5.0).unwrap()];
    for s in segment_speech(&marks, &SegmentConfig::default()) {
        let back = Segment::from_id(&s.id(), 0.01).unwrap();
        assert_eq!(back.conversation_id, "conv_07");
        assert!((back.start_s - s.start_s).abs() < 1e-9);
        assert_eq!(back.frame_range, s.frame_range);
    }
}

#[test]
fn feature_dump_round_trips_as_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fea");
    let x = DMatrix::from_fn(7, 23, |r, c| (r * 23 + c) as f64 * 0.25 - 3.0);
    FeatureMatrix::new(x.clone()).write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FEA1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 7);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 23);
    assert_eq!(bytes.len(), 12 + 7 * 23 * 4);
    // row-major
    assert_eq!(
        f32::from_le_bytes(bytes[16..20].try_into().unwrap()),
        x[(0, 1)] as f32
    );
    let back = FeatureMatrix::read(&path).unwrap();
    assert_eq!(back.values, x);
}

#[test]
fn wav_round_trip_and_rate_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let w = tone(200.0, 0.5);
    w.write_wav(&path).unwrap();
    let back = Waveform::read_wav(&path).unwrap();
    assert_eq!(back.samples.len(), w.samples.len());
    assert!(back
        .samples
        .iter()
        .zip(&w.samples)
        .all(|(a, b)| (a - b).abs() <= 0.5));

    let wide = Waveform::new(vec![0.0; 1600], 16000).unwrap();
    let path16 = dir.path().join("b.wav");
    wide.write_wav(&path16).unwrap();
    assert!(Waveform::read_wav(&path16).is_err());
}

#[test]
fn sad_file_parses_and_reports_line() {
    let marks = diarkit::features::parse_sad("a 0 1.5\n\nb 2.0 3.0\n", "sad").unwrap();
    assert_eq!(marks.len(), 2);
    let err = diarkit::features::parse_sad("a 0 1\na 2 1\n", "sad").unwrap_err();
    assert!(err.to_string().contains("sad:2"), "{err}");
}
