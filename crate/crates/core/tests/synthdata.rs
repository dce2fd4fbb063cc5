mod common;

use common::rng;
use diarkit::der::Timeline;
use diarkit::features::{compute_mfcc, read_sad, MfccConfig};
use diarkit::synthdata::{
    conversation_audio, generate_conversation, generate_corpus, generate_speakers,
    ConversationConfig, CorpusConfig, TurnOrder,
};
use diarkit::training::Corpus;

fn fixed_turns(total_s: f64, turn_s: f64, order: TurnOrder) -> ConversationConfig {
    ConversationConfig {
        total_s,
        turn_min_s: turn_s,
        turn_max_s: turn_s,
        order,
    }
}

/// Variance of the mean of `t` frames of a stationary unit-variance AR(1)
/// process, summed directly over the autocorrelation matrix.
fn ar1_mean_variance(rho: f64, t: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..t {
        for j in 0..t {
            s += rho.powi((i as i64 - j as i64).unsigned_abs() as i32);
        }
    }
    s / (t * t) as f64
}

#[test]
fn zero_separation_puts_every_mean_at_the_origin() {
    let spk = generate_speakers(5, 23, 0.0, 0.9, 3).unwrap();
    for s in &spk {
        assert!(s.mean.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn means_lie_on_the_sphere_and_pairs_spread_like_random_directions() {
    let sep = 3.0;
    let spk = generate_speakers(40, 23, sep, 0.9, 11).unwrap();
    for s in &spk {
        assert!((s.mean.norm() - sep).abs() < 1e-12);
    }
    // two speakers: chord length from the angle between directions
    let (a, b) = (&spk[0].mean, &spk[1].mean);
    let cos = a.dot(b) / (sep * sep);
    let chord = 2.0 * sep * ((1.0 - cos) / 2.0).sqrt();
    assert!(((a - b).norm() - chord).abs() < 1e-12);
    // uniform directions: E|u - v|^2 = 2
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..spk.len() {
        for j in i + 1..spk.len() {
            total += (&spk[i].mean - &spk[j].mean).norm_squared() / (sep * sep);
            pairs += 1;
        }
    }
    let mean = total / pairs as f64;
    assert!((mean - 2.0).abs() < 0.1, "mean squared chord {mean}");
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_speakers(4, 23, 2.0, 0.9, 5).unwrap();
    let b = generate_speakers(4, 23, 2.0, 0.9, 5).unwrap();
    let c = generate_speakers(4, 23, 2.0, 0.9, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let cfg = fixed_turns(20.0, 4.0, TurnOrder::Random);
    let x = generate_conversation("c", &a, &cfg, 9).unwrap();
    let y = generate_conversation("c", &b, &cfg, 9).unwrap();
    assert_eq!(x, y);
}

#[test]
fn fixed_turns_land_on_multiples_of_the_turn_length() {
    let spk = generate_speakers(2, 23, 2.0, 0.9, 1).unwrap();
    let conv = generate_conversation(
        "c",
        &spk,
        &fixed_turns(60.0, 5.0, TurnOrder::Alternating),
        2,
    )
    .unwrap();
    assert_eq!(conv.turns.len(), 12);
    assert_eq!(conv.reference.turns.len(), 12);
    for (k, t) in conv.reference.turns.iter().enumerate() {
        assert!((t.start_s - 5.0 * k as f64).abs() < 1e-9);
        assert!((t.end_s - 5.0 * (k + 1) as f64).abs() < 1e-9);
        assert_eq!(t.speaker, spk[k % 2].id);
    }
    assert_eq!(conv.features.num_frames(), 6000);
    assert_eq!(conv.sad.len(), 1);
    assert_eq!((conv.sad[0].start_s, conv.sad[0].end_s), (0.0, 60.0));
}

#[test]
fn short_remainder_joins_the_last_turn() {
    let spk = generate_speakers(2, 4, 2.0, 0.9, 1).unwrap();
    let conv = generate_conversation(
        "c",
        &spk,
        &fixed_turns(12.0, 5.0, TurnOrder::Alternating),
        2,
    )
    .unwrap();
    let lens: Vec<f64> = conv.turns.iter().map(|t| t.1).collect();
    assert_eq!(lens, vec![5.0, 7.0]);
}

#[test]
fn reference_tiles_the_conversation_without_overlap() {
    let spk = generate_speakers(3, 6, 2.0, 0.9, 4).unwrap();
    let cfg = ConversationConfig {
        total_s: 47.3,
        turn_min_s: 2.0,
        turn_max_s: 6.5,
        order: TurnOrder::Random,
    };
    for seed in 0..20 {
        let conv = generate_conversation("c", &spk, &cfg, seed).unwrap();
        let turns = &conv.reference.turns;
        assert!(turns[0].start_s.abs() < 1e-9);
        assert!((turns.last().unwrap().end_s - 47.3).abs() < 1e-9);
        for w in turns.windows(2) {
            assert!((w[0].end_s - w[1].start_s).abs() < 1e-9);
            assert_ne!(w[0].speaker, w[1].speaker);
        }
        for t in turns {
            assert!(t.end_s - t.start_s >= 2.0 - 1e-9);
        }
        assert_eq!(conv.features.num_frames(), 4730);
    }
}

#[test]
fn turn_means_concentrate_around_the_speaker_mean() {
    for rho in [0.0, 0.9] {
        let spk = generate_speakers(2, 23, 3.0, rho, 21).unwrap();
        let mut z = Vec::new();
        for seed in 0..10 {
            let conv = generate_conversation(
                "c",
                &spk,
                &fixed_turns(40.0, 4.0, TurnOrder::Alternating),
                seed,
            )
            .unwrap();
            let mut start = 0;
            for &(s, dur) in &conv.turns {
                let t = (dur * 100.0).round() as usize;
                let block = conv.features.frames(start..start + t);
                let sd_mean = ar1_mean_variance(rho, t).sqrt();
                for d in 0..23 {
                    let m = block.column(d).mean();
                    z.push((m - spk[s].mean[d]) / (spk[s].variance[d].sqrt() * sd_mean));
                }
                start += t;
            }
        }
        let outside = z.iter().filter(|v| v.abs() > 3.0).count() as f64 / z.len() as f64;
        let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!(
            outside < 0.01,
            "rho {rho}: {outside} of turn means beyond 3 sd"
        );
        assert!(
            (var - 1.0).abs() < 0.15,
            "rho {rho}: standardized variance {var}"
        );
    }
}

#[test]
fn frames_have_the_stationary_variance_and_lag_one_correlation() {
    let spk = generate_speakers(2, 3, 1.0, 0.9, 8).unwrap();
    let x = spk[0].emit(200_000, &mut rng(3));
    for d in 0..3 {
        let col: Vec<f64> = x.column(d).iter().map(|v| v - spk[0].mean[d]).collect();
        let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
        let lag = col.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (col.len() - 1) as f64;
        assert!(
            (var / spk[0].variance[d] - 1.0).abs() < 0.05,
            "variance ratio {}",
            var / spk[0].variance[d]
        );
        assert!(
            (lag / var - 0.9).abs() < 0.01,
            "lag-1 correlation {}",
            lag / var
        );
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let spk = generate_speakers(2, 4, 1.0, 0.9, 0).unwrap();
    assert!(generate_speakers(1, 4, 1.0, 0.9, 0).is_err());
    assert!(generate_speakers(3, 4, -1.0, 0.9, 0).is_err());
    assert!(generate_speakers(3, 4, 1.0, 1.0, 0).is_err());
    assert!(
        generate_conversation("c", &spk, &fixed_turns(10.0, 1.5, TurnOrder::Random), 0).is_err()
    );
    assert!(generate_conversation(
        "c",
        &spk[..1],
        &fixed_turns(10.0, 2.0, TurnOrder::Random),
        0
    )
    .is_err());
    let mut cfg = CorpusConfig::default();
    assert!(cfg.set("colour", "blue").is_err());
    assert!(cfg.set("speakers", "many").is_err());
    cfg.set("turn_order", "alternating").unwrap();
    assert_eq!(cfg.conversation.order, TurnOrder::Alternating);
}

#[test]
fn written_corpus_reads_back_through_the_regular_loaders() {
    let mut cfg = CorpusConfig::default();
    for (k, v) in [
        ("speakers", "4"),
        ("dim", "5"),
        ("train_utts_per_speaker", "2"),
        ("train_utt_s", "3"),
        ("conversations", "3"),
        ("conversation_s", "20"),
        ("seed", "7"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let corpus = generate_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();

    let train = Corpus::read_manifest(dir.path().join("train/manifest.lst")).unwrap();
    assert_eq!(train.utterances().len(), 8);
    assert_eq!(train.num_speakers(), 4);
    assert_eq!(train.feature_dim(), 5);

    let reference = Timeline::read_rttm(dir.path().join("test/ref.rttm")).unwrap();
    assert_eq!(reference.conversations().len(), 3);
    let expected: usize = corpus
        .conversations
        .iter()
        .map(|c| c.reference.turns.len())
        .sum();
    assert_eq!(reference.turns.len(), expected);
    let sad = read_sad(dir.path().join("test/sad.txt")).unwrap();
    assert_eq!(sad.len(), 3);
    let list = std::fs::read_to_string(dir.path().join("test/conversations.lst")).unwrap();
    assert_eq!(list.lines().next().unwrap(), "conv000 conv000.fea 2");
    let feats =
        diarkit::features::FeatureMatrix::read(dir.path().join("test/conv001.fea")).unwrap();
    assert_eq!(feats.num_frames(), 2000);
}

#[test]
fn audio_mode_runs_through_mfcc() {
    let spk = generate_speakers(2, 23, 1.0, 0.9, 2).unwrap();
    let conv = generate_conversation("c", &spk, &fixed_turns(6.0, 3.0, TurnOrder::Alternating), 0)
        .unwrap();
    let wave = conversation_audio(&conv, &spk, 1).unwrap();
    assert_eq!(wave.samples.len(), 48_000);
    let mfcc = compute_mfcc(&wave, &MfccConfig::default()).unwrap();
    assert_eq!(mfcc.dim(), 23);
    assert!((mfcc.num_frames() as i64 - 600).abs() <= 3);
    // the two speakers' partials give distinct average spectra
    let a = mfcc.frames(0..290).row_mean();
    let b = mfcc.frames(310..590).row_mean();
    assert!((a - b).norm() > 1.0);
}
