//! Supervised training of embedding networks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::network::{
    ops, ForwardOptions, ForwardOutput, Gradients, Mode, Network, NetworkSpec, Pooling,
};

/// One training recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub features: DMatrix<f64>,
}

/// Labelled recordings with speakers indexed in sorted-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    speakers: Vec<String>,
    by_speaker: Vec<Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus from `(utt_id, speaker_name, features)` triples.
    pub fn new(items: Vec<(String, String, DMatrix<f64>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let mut index: BTreeMap<String, usize> =
            items.iter().map(|(_, s, _)| (s.clone(), 0)).collect();
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        let dim = items[0].2.ncols();
        let mut by_speaker = vec![Vec::new(); index.len()];
        let mut utterances = Vec::with_capacity(items.len());
        for (id, speaker, features) in items {
            if features.ncols() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: features.ncols(),
                    context: "corpus feature dimension",
                });
            }
            let s = index[&speaker];
            by_speaker[s].push(utterances.len());
            utterances.push(Utterance {
                id,
                speaker: s,
                features,
            });
        }
        Ok(Corpus {
            utterances,
            speakers: index.into_keys().collect(),
            by_speaker,
        })
    }

    /// Reads `<utt_id> <speaker_id> <feature_file_path>` lines; relative
    /// paths are resolved against the manifest's directory.
    pub fn read_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let origin = path.display().to_string();
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [utt, speaker, file] = fields[..] else {
                return Err(Error::parse(
                    &origin,
                    ln + 1,
                    "expected `<utt_id> <speaker_id> <feature_file>`",
                ));
            };
            let file = PathBuf::from(file);
            let file = if file.is_absolute() {
                file
            } else {
                base.join(file)
            };
            let feats = FeatureMatrix::read(&file)
                .map_err(|e| Error::parse(&origin, ln + 1, format!("{}: {e}", file.display())))?;
            items.push((utt.to_string(), speaker.to_string(), feats.values));
        }
        Corpus::new(items)
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances[0].features.ncols()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.nrows()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: DMatrix<f64>,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub epochs: usize,
    /// Examples per epoch; `None` covers the corpus frames about once.
    pub examples_per_epoch: Option<usize>,
    /// Example durations in frames, drawn uniformly from this closed range.
    pub min_frames: usize,
    pub max_frames: usize,
    pub pooling: Pooling,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub l2: f64,
    pub dropout: f64,
    pub ortho_interval: usize,
    /// Weight of the newest batch in the running batch-norm moments.
    pub bn_momentum: f64,
    /// Batches of `calibration_frames`-long crops used to refresh the
    /// running moments once training ends.
    pub calibration_batches: usize,
    pub calibration_frames: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch: 64,
            epochs: 3,
            examples_per_epoch: None,
            min_frames: 200,
            max_frames: 400,
            pooling: Pooling::Windows {
                len: 150,
                stride: 75,
            },
            lr_initial: 0.02,
            lr_final: 0.002,
            momentum: 0.9,
            l2: 1e-4,
            dropout: 0.1,
            ortho_interval: 4,
            bn_momentum: 0.1,
            calibration_batches: 8,
            calibration_frames: 150,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.minibatch == 0 {
            return bad("minibatch must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("example length range is empty");
        }
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_final", self.lr_final),
            ("l2", self.l2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if (self.lr_initial == 0.0) != (self.lr_final == 0.0) {
            return bad("learning rates must both be zero or both positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if self.ortho_interval == 0 {
            return bad("ortho_interval must be positive");
        }
        if let Pooling::Windows { len, .. } = self.pooling {
            if self.min_frames < len {
                return bad("examples must be at least one pooling window long");
            }
        }
        Ok(())
    }

    /// Exponential decay from `lr_initial` to `lr_final` over `total` steps.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.lr_initial == 0.0 {
            return self.lr_initial;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.lr_initial * (self.lr_final / self.lr_initial).powf(frac)
    }

    pub fn steps_per_epoch(&self, corpus: &Corpus) -> usize {
        let examples = self.examples_per_epoch.unwrap_or_else(|| {
            let mean = (self.min_frames + self.max_frames) / 2;
            (corpus.total_frames() / mean).max(1)
        });
        examples.div_ceil(self.minibatch)
    }
}

/// Seeded stream of speaker-balanced training examples.
pub struct ExampleSampler<'c> {
    corpus: &'c Corpus,
    min_frames: usize,
    max_frames: usize,
    rng: ChaCha8Rng,
}

impl<'c> ExampleSampler<'c> {
    pub fn new(
        corpus: &'c Corpus,
        min_frames: usize,
        max_frames: usize,
        seed: u64,
    ) -> Result<Self> {
        if corpus.utterances.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        if min_frames == 0 || min_frames > max_frames {
            return Err(Error::invalid("example length range is empty"));
        }
        if let Some(u) = corpus
            .utterances
            .iter()
            .find(|u| u.features.nrows() < min_frames)
        {
            return Err(Error::invalid(format!(
                "utterance {} has {} frames, fewer than the {min_frames}-frame minimum example",
                u.id,
                u.features.nrows()
            )));
        }
        Ok(ExampleSampler {
            corpus,
            min_frames,
            max_frames,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Speaker uniformly, then one of its utterances, then a duration and offset.
    pub fn next_example(&mut self) -> TrainExample {
        let speaker = self.rng.random_range(0..self.corpus.num_speakers());
        let utts = &self.corpus.by_speaker[speaker];
        let utt = &self.corpus.utterances[utts[self.rng.random_range(0..utts.len())]];
        let available = utt.features.nrows();
        let frames = self
            .rng
            .random_range(self.min_frames..=self.max_frames)
            .min(available);
        let start = self.rng.random_range(0..=available - frames);
        TrainExample {
            features: utt.features.rows(start, frames).into_owned(),
            speaker,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<TrainExample> {
        (0..size).map(|_| self.next_example()).collect()
    }
}

/// Pooled statistics of every window averaged per example; dropout and
/// batch statistics as in training.
pub fn pooled_forward_train(
    net: &Network,
    batch: &[TrainExample],
    pooling: Pooling,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardOutput> {
    let feats: Vec<DMatrix<f64>> = batch.iter().map(|e| e.features.clone()).collect();
    net.forward(
        &feats,
        ForwardOptions {
            mode: Mode::Training,
            pooling,
            dropout,
            rng: Some(rng),
            relu_patterns: None,
        },
    )
}

/// Number of pooling windows an example of `frames` input frames yields.
pub fn window_count(frames: usize, len: usize, stride: usize) -> usize {
    if frames < len || stride == 0 {
        0
    } else {
        (frames - len) / stride + 1
    }
}

/// SGD with momentum and L2 decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    velocity: Vec<Vec<DMatrix<f64>>>,
    pub momentum: f64,
    pub l2: f64,
}

impl Optimizer {
    pub fn new(net: &Network, momentum: f64, l2: f64) -> Self {
        Optimizer {
            velocity: net.zero_gradients().0,
            momentum,
            l2,
        }
    }

    /// `v <- momentum v - lr (g + l2 theta)`, `theta <- theta + v`.
    pub fn apply(&mut self, net: &mut Network, grads: &Gradients, lr: f64) {
        for ((params, grads), vels) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.velocity)
        {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(vels.iter_mut()) {
                if !p.role.trainable() {
                    continue;
                }
                let decay = if p.role.decays() { self.l2 } else { 0.0 };
                for ((theta, &gi), vi) in p.value.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi - lr * (gi + decay * *theta);
                    *theta += *vi;
                }
            }
        }
    }
}

/// `sum ||theta||^2` over the decayed (linear-map) parameters.
pub fn l2_norm_sq(net: &Network) -> f64 {
    net.params()
        .iter()
        .flatten()
        .filter(|p| p.role.decays())
        .map(|p| p.value.norm_squared())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Cross-entropy plus the L2 penalty.
    pub loss: f64,
    pub cross_entropy: f64,
    pub accuracy: f64,
    /// Largest `||M M^T - I||_F` over bottleneck factors after the step.
    pub ortho_residual: f64,
    pub lr: f64,
}

/// Mutable state carried between steps.
pub struct TrainState {
    pub optimizer: Optimizer,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        TrainState {
            optimizer: Optimizer::new(net, cfg.momentum, cfg.l2),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D80F),
        }
    }
}

/// One forward/backward/update on `batch` at learning rate `lr`.
pub fn train_step(
    net: &mut Network,
    state: &mut TrainState,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    if let Some(e) = batch.iter().find(|e| e.speaker >= net.spec().num_speakers) {
        return Err(Error::invalid(format!(
            "speaker index {} outside the {}-way output layer",
            e.speaker,
            net.spec().num_speakers
        )));
    }
    let out = pooled_forward_train(net, batch, cfg.pooling, cfg.dropout, &mut state.rng)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.speaker).collect();
    let (ce, dlogits) = ops::softmax_cross_entropy(&out.logits, &labels)?;
    let loss = ce + 0.5 * cfg.l2 * l2_norm_sq(net);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    let accuracy = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| out.logits.row(r).transpose().argmax().0 == y)
        .count() as f64
        / labels.len() as f64;
    let tape = out.tape.as_ref().expect("training forward keeps a tape");
    let grads = net.backward(tape, &dlogits)?;
    state.optimizer.momentum = cfg.momentum;
    state.optimizer.l2 = cfg.l2;
    state.optimizer.apply(net, &grads, lr);
    net.update_running_moments(&out.batch_moments, cfg.bn_momentum);
    if (step + 1).is_multiple_of(cfg.ortho_interval) {
        net.project_factors()?;
    }
    let ortho_residual = net.factor_residuals().into_iter().fold(0.0, f64::max);
    Ok(StepStats {
        step,
        loss,
        cross_entropy: ce,
        accuracy,
        ortho_residual,
        lr,
    })
}

/// Per-step records, written as `step loss ortho_residual lr` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepStats>,
}

impl fmt::Display for TrainingLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(
                f,
                "{} {:.6} {:.3e} {:.6e}",
                s.step, s.loss, s.ortho_residual, s.lr
            )?;
        }
        Ok(())
    }
}

/// Replaces running batch-norm moments with the average batch moments of
/// `batches` forward passes over fixed-length crops.
pub fn recalibrate_batch_norm(
    net: &mut Network,
    corpus: &Corpus,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<()> {
    if cfg.calibration_batches == 0 {
        return Ok(());
    }
    let frames = cfg.calibration_frames;
    let mut sampler = ExampleSampler::new(corpus, frames, frames, seed)?;
    let n = net.spec().layers.len();
    let mut sums: Vec<Option<(DVector<f64>, DVector<f64>)>> = vec![None; n];
    for _ in 0..cfg.calibration_batches {
        let batch: Vec<DMatrix<f64>> = sampler
            .next_batch(cfg.minibatch)
            .into_iter()
            .map(|e| e.features)
            .collect();
        let out = net.forward(&batch, ForwardOptions::training(Pooling::Whole))?;
        for (acc, m) in sums.iter_mut().zip(out.batch_moments) {
            if let Some((mean, var)) = m {
                match acc {
                    Some((am, av)) => {
                        *am += mean;
                        *av += var;
                    }
                    None => *acc = Some((mean, var)),
                }
            }
        }
    }
    let k = cfg.calibration_batches as f64;
    let avg: Vec<_> = sums
        .into_iter()
        .map(|m| m.map(|(a, b)| (a / k, b / k)))
        .collect();
    net.set_running_moments(&avg);
    Ok(())
}

/// Fraction of examples whose inference-mode arg-max logit is the speaker.
pub fn accuracy(net: &Network, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let mut correct = 0;
    for e in examples {
        let out = net.forward(
            std::slice::from_ref(&e.features),
            ForwardOptions::inference(),
        )?;
        if out.logits.row(0).transpose().argmax().0 == e.speaker {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Full recipe: initialize, run `epochs` of steps, then freeze batch-norm
/// moments for inference.
pub fn train(
    corpus: &Corpus,
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(Network, TrainingLog)> {
    cfg.validate()?;
    if spec.num_speakers != corpus.num_speakers() {
        return Err(Error::Dimension {
            expected: corpus.num_speakers(),
            actual: spec.num_speakers,
            context: "output layer size vs corpus speakers",
        });
    }
    if spec.input_dim != corpus.feature_dim() {
        return Err(Error::Dimension {
            expected: corpus.feature_dim(),
            actual: spec.input_dim,
            context: "network input vs corpus features",
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(spec, &mut init_rng)?;
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok((net, log));
    }
    let total = cfg.epochs * cfg.steps_per_epoch(corpus);
    let mut sampler = ExampleSampler::new(
        corpus,
        cfg.min_frames,
        cfg.max_frames,
        cfg.seed.wrapping_add(1),
    )?;
    let mut state = TrainState::new(&net, cfg);
    for step in 0..total {
        let batch = sampler.next_batch(cfg.minibatch);
        let lr = cfg.learning_rate(step, total);
        log.steps
            .push(train_step(&mut net, &mut state, &batch, cfg, step, lr)?);
    }
    net.project_factors()?;
    recalibrate_batch_norm(&mut net, corpus, cfg, cfg.seed.wrapping_add(2))?;
    Ok((net, log))
}
