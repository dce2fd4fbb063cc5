//! Seeded synthetic speakers and conversations.
//!
//! A speaker emits frames straight into cepstral space: a fixed mean plus
//! AR(1) noise with per-dimension variance. Conversations stitch turns of
//! different speakers together and carry an exact reference.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::der::Timeline;
use crate::error::{Error, Result};
use crate::features::{write_sad, FeatureMatrix, SadMark, Waveform, DEFAULT_SAMPLE_RATE, NUM_CEPS};

const FRAMES_PER_SECOND: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpeaker {
    pub id: String,
    pub mean: DVector<f64>,
    /// Stationary per-dimension variance of the frames.
    pub variance: DVector<f64>,
    /// AR(1) coefficient of the frame noise.
    pub smoothing: f64,
    /// Partial frequencies (Hz) and amplitudes for the audio mode.
    pub partials: Vec<(f64, f64)>,
}

impl SynthSpeaker {
    /// `frames` consecutive feature rows.
    pub fn emit(&self, frames: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let dim = self.mean.len();
        let sd = self.variance.map(f64::sqrt);
        let rho = self.smoothing;
        let innovation = (1.0 - rho * rho).sqrt();
        let mut state = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut out = DMatrix::zeros(frames, dim);
        for t in 0..frames {
            if t > 0 {
                for d in 0..dim {
                    state[d] = rho * state[d] + innovation * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for d in 0..dim {
                out[(t, d)] = self.mean[d] + sd[d] * state[d];
            }
        }
        out
    }

    /// Sum of the speaker's partials with slow random amplitude drift plus
    /// a little noise.
    pub fn speak(&self, seconds: f64, rng: &mut impl Rng) -> Vec<f64> {
        let rate = DEFAULT_SAMPLE_RATE as f64;
        let n = (seconds * rate).round() as usize;
        let phases: Vec<f64> = self
            .partials
            .iter()
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        (0..n)
            .map(|k| {
                let t = k as f64 / rate;
                let voiced: f64 = self
                    .partials
                    .iter()
                    .zip(&phases)
                    .map(|(&(f, a), &p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum();
                voiced + 50.0 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

/// `n` speakers with means on a sphere of radius `separation`, per-dimension
/// variances in [0.5, 1.5] and the given AR(1) coefficient.
pub fn generate_speakers(
    n: usize,
    dim: usize,
    separation: f64,
    smoothing: f64,
    seed: u64,
) -> Result<Vec<SynthSpeaker>> {
    if n < 2 {
        return Err(Error::invalid("need at least two speakers"));
    }
    if dim == 0 || !(separation >= 0.0) || !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(
            "need dim > 0, separation >= 0 and smoothing in [0, 1)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let dir = loop {
            let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            if g.norm() > 1e-8 {
                break g.normalize();
            }
        };
        let variance = DVector::from_fn(dim, |_, _| rng.random_range(0.5..1.5));
        let base = rng.random_range(100.0..300.0);
        let partials = (1..=4)
            .map(|h| {
                (
                    base * h as f64 * rng.random_range(0.95..1.05),
                    rng.random_range(500.0..3000.0),
                )
            })
            .collect();
        out.push(SynthSpeaker {
            id: format!("spk{k:03}"),
            mean: dir * separation,
            variance,
            smoothing,
            partials,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnOrder {
    /// Speakers take turns in a fixed cycle.
    Alternating,
    /// Each turn goes to a uniformly chosen different speaker.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversationConfig {
    pub total_s: f64,
    pub turn_min_s: f64,
    pub turn_max_s: f64,
    pub order: TurnOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConversation {
    pub id: String,
    /// Index into the conversation's speakers and turn length in seconds.
    pub turns: Vec<(usize, f64)>,
    pub reference: Timeline,
    pub features: FeatureMatrix,
    pub sad: Vec<SadMark>,
}

/// Turn lengths are whole frames; a final remainder shorter than
/// `turn_min_s` is folded into the previous turn.
pub fn generate_conversation(
    id: &str,
    speakers: &[SynthSpeaker],
    cfg: &ConversationConfig,
    seed: u64,
) -> Result<SynthConversation> {
    if speakers.len() < 2 {
        return Err(Error::invalid("a conversation needs at least two speakers"));
    }
    if !(cfg.turn_min_s > 1.5 && cfg.turn_max_s >= cfg.turn_min_s && cfg.total_s >= cfg.turn_min_s)
    {
        return Err(Error::invalid(format!(
            "need 1.5 s < turn_min <= turn_max and total >= turn_min, got {}..{} over {}",
            cfg.turn_min_s, cfg.turn_max_s, cfg.total_s
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (cfg.total_s * FRAMES_PER_SECOND).round() as usize;
    let (lo, hi) = (
        (cfg.turn_min_s * FRAMES_PER_SECOND).round() as usize,
        (cfg.turn_max_s * FRAMES_PER_SECOND).round() as usize,
    );
    let mut lengths: Vec<(usize, usize)> = Vec::new();
    let mut used = 0;
    let mut who = match cfg.order {
        TurnOrder::Alternating => 0,
        TurnOrder::Random => rng.random_range(0..speakers.len()),
    };
    while used < total {
        let len = rng.random_range(lo..=hi).min(total - used);
        if len < lo && !lengths.is_empty() {
            lengths.last_mut().expect("non-empty").1 += len;
        } else {
            lengths.push((who, len));
        }
        used += len;
        who = match cfg.order {
            TurnOrder::Alternating => (who + 1) % speakers.len(),
            TurnOrder::Random => (who + rng.random_range(1..speakers.len())) % speakers.len(),
        };
    }
    let dim = speakers[0].mean.len();
    let mut values = DMatrix::zeros(total, dim);
    let mut reference = Timeline::new();
    let mut start = 0;
    for &(s, len) in &lengths {
        values
            .rows_mut(start, len)
            .copy_from(&speakers[s].emit(len, &mut rng));
        reference.push(
            id,
            start as f64 / FRAMES_PER_SECOND,
            (start + len) as f64 / FRAMES_PER_SECOND,
            &speakers[s].id,
        )?;
        start += len;
    }
    Ok(SynthConversation {
        id: id.to_string(),
        turns: lengths
            .iter()
            .map(|&(s, l)| (s, l as f64 / FRAMES_PER_SECOND))
            .collect(),
        reference,
        features: FeatureMatrix::new(values),
        sad: vec![SadMark::new(id, 0.0, total as f64 / FRAMES_PER_SECOND)?],
    })
}

/// The conversation's turns rendered as audio with each speaker's partials.
pub fn conversation_audio(
    conv: &SynthConversation,
    speakers: &[SynthSpeaker],
    seed: u64,
) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for &(s, dur) in &conv.turns {
        samples.extend(speakers[s].speak(dur, &mut rng));
    }
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Parameters of a complete synthetic corpus on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub dim: usize,
    pub separation: f64,
    pub smoothing: f64,
    pub train_utts_per_speaker: usize,
    pub train_utt_s: f64,
    pub conversations: usize,
    pub speakers_per_conversation: usize,
    pub conversation: ConversationConfig,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            speakers: 20,
            dim: NUM_CEPS,
            separation: 4.0,
            smoothing: 0.9,
            train_utts_per_speaker: 8,
            train_utt_s: 8.0,
            conversations: 50,
            speakers_per_conversation: 2,
            conversation: ConversationConfig {
                total_s: 60.0,
                turn_min_s: 3.0,
                turn_max_s: 8.0,
                order: TurnOrder::Random,
            },
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Applies `key=value` overrides; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::invalid(format!("bad value {value:?} for {key}"));
        let f = || value.parse::<f64>().map_err(|_| bad());
        let u = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "speakers" => self.speakers = u()?,
            "dim" => self.dim = u()?,
            "separation" => self.separation = f()?,
            "smoothing" => self.smoothing = f()?,
            "train_utts_per_speaker" => self.train_utts_per_speaker = u()?,
            "train_utt_s" => self.train_utt_s = f()?,
            "conversations" => self.conversations = u()?,
            "speakers_per_conversation" => self.speakers_per_conversation = u()?,
            "conversation_s" => self.conversation.total_s = f()?,
            "turn_min_s" => self.conversation.turn_min_s = f()?,
            "turn_max_s" => self.conversation.turn_max_s = f()?,
            "turn_order" => {
                self.conversation.order = match value {
                    "alternating" => TurnOrder::Alternating,
                    "random" => TurnOrder::Random,
                    _ => return Err(bad()),
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::invalid(format!("unknown synth key {key:?}"))),
        }
        Ok(())
    }
}

/// Training utterances plus test conversations drawn from the same speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub speakers: Vec<SynthSpeaker>,
    /// `(utt_id, speaker index, features)`.
    pub train: Vec<(String, usize, DMatrix<f64>)>,
    pub conversations: Vec<SynthConversation>,
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<SynthCorpus> {
    if cfg.speakers_per_conversation < 2 || cfg.speakers_per_conversation > cfg.speakers {
        return Err(Error::invalid(
            "speakers_per_conversation must lie in [2, speakers]",
        ));
    }
    if cfg.train_utt_s <= 0.0 {
        return Err(Error::invalid("train_utt_s must be positive"));
    }
    let speakers = generate_speakers(
        cfg.speakers,
        cfg.dim,
        cfg.separation,
        cfg.smoothing,
        cfg.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let frames = (cfg.train_utt_s * FRAMES_PER_SECOND).round() as usize;
    let mut train = Vec::new();
    for (k, s) in speakers.iter().enumerate() {
        for u in 0..cfg.train_utts_per_speaker {
            train.push((format!("{}_u{u:03}", s.id), k, s.emit(frames, &mut rng)));
        }
    }
    let mut conversations = Vec::with_capacity(cfg.conversations);
    for c in 0..cfg.conversations {
        let mut pool: Vec<usize> = (0..cfg.speakers).collect();
        let mut chosen = Vec::with_capacity(cfg.speakers_per_conversation);
        for _ in 0..cfg.speakers_per_conversation {
            chosen.push(pool.swap_remove(rng.random_range(0..pool.len())));
        }
        let who: Vec<SynthSpeaker> = chosen.iter().map(|&i| speakers[i].clone()).collect();
        let seed = rng.random();
        conversations.push(generate_conversation(
            &format!("conv{c:03}"),
            &who,
            &cfg.conversation,
            seed,
        )?);
    }
    Ok(SynthCorpus {
        speakers,
        train,
        conversations,
    })
}

impl SynthCorpus {
    /// Writes `train/manifest.lst` with one feature file per utterance, and
    /// `test/` with one feature file per conversation, `ref.rttm`, `sad.txt`
    /// and `conversations.lst` (`<conversation_id> <feature_file> <num_speakers>`).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let train = dir.join("train");
        let test = dir.join("test");
        fs::create_dir_all(&train)?;
        fs::create_dir_all(&test)?;
        let mut manifest = String::new();
        for (id, s, feats) in &self.train {
            let file = format!("{id}.fea");
            FeatureMatrix::new(feats.clone()).write(train.join(&file))?;
            manifest.push_str(&format!("{id} {} {file}\n", self.speakers[*s].id));
        }
        fs::write(train.join("manifest.lst"), manifest)?;
        let mut reference = Timeline::new();
        let mut sad = Vec::new();
        let mut list = String::new();
        for c in &self.conversations {
            let file = format!("{}.fea", c.id);
            c.features.write(test.join(&file))?;
            reference.turns.extend(c.reference.turns.iter().cloned());
            sad.extend(c.sad.iter().cloned());
            list.push_str(&format!(
                "{} {file} {}\n",
                c.id,
                c.reference.speakers(&c.id).len()
            ));
        }
        reference.write_rttm(test.join("ref.rttm"))?;
        write_sad(&sad, test.join("sad.txt"))?;
        fs::write(test.join("conversations.lst"), list)?;
        Ok(())
    }
}
