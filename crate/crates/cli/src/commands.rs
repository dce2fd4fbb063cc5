use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use diarkit::backend::{load_embeddings, save_embeddings, Embedding};
use diarkit::clustering::{calibrate_threshold, default_grid, ScoredConversation, StopRule};
use diarkit::der::{self, DerOptions, Timeline};
use diarkit::features::{
    read_sad, read_segments, segment_speech, sliding_cmn, write_segments, FeatureMatrix, Mfcc,
    MfccConfig, SadMark, SegmentConfig, Waveform,
};
use diarkit::network::{
    build_architecture, ArchDims, ArchOptions, Architecture, Network, NetworkSpec, Pooling,
};
use diarkit::pipeline::{embed_corpus, embed_segments, Backend, Diarizer};
use diarkit::synthdata::{generate_corpus, CorpusConfig};
use diarkit::training::{train, Corpus, TrainConfig};

use crate::settings::Settings;
use crate::{Cli, Command};

const SEED_ENV: &str = "DIARKIT_SEED";

struct Ctx<'a> {
    cli: &'a Cli,
    settings: Settings,
    seed: u64,
}

impl Ctx<'_> {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.cli.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        if self.cli.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(self.cli.jobs)
            .build()?)
    }

    /// Rejects leftover config keys and, under `--dry-run`, reports success.
    /// Returns true when the command should go on to do its work.
    fn ready(&self, what: &str) -> Result<bool> {
        self.settings.check_consumed()?;
        if self.cli.dry_run {
            println!("dry run: {what} configuration and inputs are valid");
            return Ok(false);
        }
        Ok(true)
    }

    fn segment_config(&self) -> Result<SegmentConfig> {
        let d = SegmentConfig::default();
        let cfg = SegmentConfig {
            seg_len_s: self.settings.pick("seg_len_s", None, d.seg_len_s)?,
            shift_s: self.settings.pick("seg_shift_s", None, d.shift_s)?,
            min_len_s: self.settings.pick("seg_min_len_s", None, d.min_len_s)?,
            frame_shift_s: d.frame_shift_s,
        };
        if !(cfg.seg_len_s > 0.0 && cfg.shift_s > 0.0 && cfg.min_len_s >= 0.0) {
            bail!("segment lengths must be positive");
        }
        Ok(cfg)
    }

    fn der_options(&self, collar: Option<f64>, include_overlap: bool) -> Result<DerOptions> {
        let d = DerOptions::default();
        let opts = DerOptions {
            collar_s: self.settings.pick("collar", collar, d.collar_s)?,
            ignore_overlap: !self.settings.pick(
                "include_overlap",
                include_overlap.then_some(true),
                false,
            )?,
        };
        if !(opts.collar_s >= 0.0) {
            bail!("collar must be non-negative");
        }
        Ok(opts)
    }
}

fn resolve_seed(flag: Option<u64>, settings: &Settings) -> Result<u64> {
    if let Some(s) = flag.or(settings.parsed("seed")?) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not a seed")),
        Err(_) => Ok(0),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref(), &cli.set)?;
    let seed = resolve_seed(cli.seed, &settings)?;
    let ctx = Ctx {
        cli,
        settings,
        seed,
    };
    match &cli.command {
        Command::Features(a) => features(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::BackendFit(a) => backend_fit(&ctx, a),
        Command::Diarize(a) => diarize(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        let msg = format!("input {} does not exist", path.display());
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, msg).into());
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("output directory {} does not exist", p.display())
        }
        _ => Ok(()),
    }
}

/// Writes through a sibling temporary file so readers never see a partial output.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> diarkit::Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    write(&tmp).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// `<conversation> <path> [...]` lines; relative paths resolve against the list.
fn read_list(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let file = fields.next().ok_or_else(|| {
            anyhow!(
                "{}:{}: expected `<conversation> <path>`",
                path.display(),
                i + 1
            )
        })?;
        if !seen.insert(id.to_string()) {
            bail!(
                "{}:{}: conversation {id} listed twice",
                path.display(),
                i + 1
            );
        }
        out.push((id.to_string(), base.join(file)));
    }
    if out.is_empty() {
        bail!("{} lists no conversations", path.display());
    }
    Ok(out)
}

/// First field is the conversation, last field its speaker count.
fn read_speaker_counts(path: &Path) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let k = fields
            .last()
            .filter(|_| fields.len() >= 2)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| {
                anyhow!(
                    "{}:{}: expected `<conversation> ... <num_speakers>`",
                    path.display(),
                    i + 1
                )
            })?;
        out.insert(fields[0].to_string(), k);
    }
    Ok(out)
}

fn features(ctx: &Ctx, a: &crate::FeaturesArgs) -> Result<()> {
    require_file(&a.wavs)?;
    require_file(&a.sad)?;
    let cmn_window: usize = ctx.settings.pick("cmn_window", None, 300)?;
    let seg = ctx.segment_config()?;
    let mfcc = Mfcc::new(MfccConfig::default())?;
    let list = read_list(&a.wavs)?;
    for (_, wav) in &list {
        require_file(wav)?;
    }
    let sad = read_sad(&a.sad)?;
    if !ctx.ready("features")? {
        return Ok(());
    }
    fs::create_dir_all(&a.out)?;
    let done: Vec<Result<String>> = ctx.pool()?.install(|| {
        list.par_iter()
            .map(|(id, wav)| {
                let wave = Waveform::read_wav(wav)
                    .with_context(|| format!("reading {}", wav.display()))?;
                let feats = sliding_cmn(&mfcc.compute(&wave)?, cmn_window);
                let file = format!("{id}.fea");
                write_atomic(&a.out.join(&file), |p| feats.write(p))?;
                Ok(format!("{id} {file}\n"))
            })
            .collect()
    });
    let mut listing = String::new();
    for d in done {
        listing.push_str(&d?);
    }
    let known: BTreeSet<&str> = list.iter().map(|(id, _)| id.as_str()).collect();
    let marks: Vec<SadMark> = sad
        .into_iter()
        .filter(|m| known.contains(m.conversation_id.as_str()))
        .collect();
    let segments = segment_speech(&marks, &seg);
    write_atomic(&a.out.join("conversations.lst"), |p| {
        Ok(fs::write(p, &listing)?)
    })?;
    write_atomic(&a.out.join("segments.txt"), |p| {
        write_segments(&segments, p)
    })?;
    ctx.note(format!(
        "features: {} conversations, {} segments",
        list.len(),
        segments.len()
    ));
    Ok(())
}

fn synth(ctx: &Ctx, a: &crate::SynthArgs) -> Result<()> {
    let mut cfg = CorpusConfig::default();
    for (k, v) in ctx.settings.with_prefix("") {
        if k != "seed" {
            // a config problem, not an input one
            cfg.set(&k, &v)
                .map_err(|e| anyhow!("config key {k}: {e}"))?;
        }
    }
    cfg.seed = ctx.seed;
    if !ctx.ready("synth")? {
        return Ok(());
    }
    let corpus = generate_corpus(&cfg)?;
    corpus.write(&a.out)?;
    ctx.note(format!(
        "synth: {} speakers, {} training utterances, {} conversations in {}",
        corpus.speakers.len(),
        corpus.train.len(),
        corpus.conversations.len(),
        a.out.display()
    ));
    Ok(())
}

fn train_config(ctx: &Ctx) -> Result<TrainConfig> {
    let s = &ctx.settings;
    let d = TrainConfig::default();
    let (dw, ds) = match d.pooling {
        Pooling::Windows { len, stride } => (len, stride),
        Pooling::Whole => (0, 0),
    };
    let window: usize = s.pick("pool_window", None, dw)?;
    let stride: usize = s.pick("pool_stride", None, ds)?;
    let cfg = TrainConfig {
        minibatch: s.pick("minibatch", None, d.minibatch)?,
        epochs: s.pick("epochs", None, d.epochs)?,
        examples_per_epoch: s.parsed("examples_per_epoch")?,
        min_frames: s.pick("min_frames", None, d.min_frames)?,
        max_frames: s.pick("max_frames", None, d.max_frames)?,
        pooling: if window == 0 {
            Pooling::Whole
        } else {
            Pooling::Windows {
                len: window,
                stride,
            }
        },
        lr_initial: s.pick("lr_initial", None, d.lr_initial)?,
        lr_final: s.pick("lr_final", None, d.lr_final)?,
        momentum: s.pick("momentum", None, d.momentum)?,
        l2: s.pick("l2", None, d.l2)?,
        dropout: s.pick("dropout", None, d.dropout)?,
        ortho_interval: s.pick("ortho_interval", None, d.ortho_interval)?,
        bn_momentum: s.pick("bn_momentum", None, d.bn_momentum)?,
        calibration_batches: s.pick("calibration_batches", None, d.calibration_batches)?,
        calibration_frames: s.pick("calibration_frames", None, d.calibration_frames)?,
        seed: ctx.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn network_spec(ctx: &Ctx, a: &crate::TrainArgs, corpus: &Corpus) -> Result<NetworkSpec> {
    if let Some(path) = &a.spec {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(text.parse()?);
    }
    let arch: Architecture = ctx
        .settings
        .pick("arch", a.arch.clone(), "ftdnn-msa".to_string())?
        .parse()?;
    let mut dims = match ctx
        .settings
        .pick("dims", a.dims.clone(), "toy".to_string())?
        .as_str()
    {
        "toy" => ArchDims::toy(corpus.num_speakers()),
        "full" => ArchDims::full(corpus.num_speakers()),
        other => bail!("dims must be `toy` or `full`, got {other:?}"),
    };
    dims.input_dim = corpus.feature_dim();
    let mut opts = ArchOptions::new(dims);
    let taps: Option<String> = a.taps.clone().or(ctx.settings.parsed("taps")?);
    if let Some(t) = taps {
        opts.taps = t
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| anyhow!("bad tap {x:?}"))
            })
            .collect::<Result<_>>()?;
    }
    Ok(build_architecture(arch, &opts)?)
}

fn train_cmd(ctx: &Ctx, a: &crate::TrainArgs) -> Result<()> {
    require_file(&a.manifest)?;
    require_parent(&a.out)?;
    if let Some(l) = &a.log {
        require_parent(l)?;
    }
    let cfg = train_config(ctx)?;
    let corpus = Corpus::read_manifest(&a.manifest)?;
    let spec = network_spec(ctx, a, &corpus)?;
    if !ctx.ready("train")? {
        return Ok(());
    }
    ctx.note(format!(
        "train: {} utterances, {} speakers, {} steps per epoch",
        corpus.utterances().len(),
        corpus.num_speakers(),
        cfg.steps_per_epoch(&corpus)
    ));
    let (net, log) = train(&corpus, spec, &cfg)?;
    if let Some(last) = log.steps.last() {
        ctx.note(format!(
            "train: final loss {:.4}, batch accuracy {:.3}",
            last.loss, last.accuracy
        ));
    }
    write_atomic(&a.out, |p| net.save(p))?;
    if let Some(l) = &a.log {
        write_atomic(l, |p| Ok(fs::write(p, log.to_string())?))?;
    }
    Ok(())
}

fn load_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::read(path).with_context(|| format!("reading features {}", path.display()))
}

fn embed(ctx: &Ctx, a: &crate::EmbedArgs) -> Result<()> {
    require_file(&a.model)?;
    require_parent(&a.out)?;
    let seg = ctx.segment_config()?;
    if let Some(manifest) = &a.manifest {
        require_file(manifest)?;
        let labels_out = a
            .labels_out
            .as_ref()
            .ok_or_else(|| anyhow!("--manifest input needs --labels-out"))?;
        require_parent(labels_out)?;
        if !ctx.ready("embed")? {
            return Ok(());
        }
        let net = Network::load(&a.model)?;
        let corpus = Corpus::read_manifest(manifest)?;
        let (embs, labels) = embed_corpus(&net, &corpus, &seg)?;
        let text: String = embs
            .iter()
            .zip(&labels)
            .map(|(e, l)| format!("{} {l}\n", e.id))
            .collect();
        write_atomic(&a.out, |p| save_embeddings(p, &embs))?;
        write_atomic(labels_out, |p| Ok(fs::write(p, text)?))?;
        ctx.note(format!("embed: {} training windows", embs.len()));
        return Ok(());
    }
    let list_path = a
        .conversations
        .as_ref()
        .expect("clap requires conversations without manifest");
    require_file(list_path)?;
    let list = read_list(list_path)?;
    let segments = match (&a.segments, &a.sad) {
        (Some(s), _) => read_segments(s, seg.frame_shift_s)?,
        (None, Some(s)) => segment_speech(&read_sad(s)?, &seg),
        (None, None) => bail!("conversation input needs --segments or --sad"),
    };
    if !ctx.ready("embed")? {
        return Ok(());
    }
    let net = Network::load(&a.model)?;
    let per_conv: Vec<Result<Vec<Embedding>>> = ctx.pool()?.install(|| {
        list.par_iter()
            .map(|(id, path)| {
                let feats = load_features(path)?;
                let mine: Vec<_> = segments
                    .iter()
                    .filter(|s| &s.conversation_id == id)
                    .cloned()
                    .collect();
                Ok(embed_segments(&net, &feats, &mine)?)
            })
            .collect()
    });
    let mut all = Vec::new();
    for r in per_conv {
        all.extend(r?);
    }
    write_atomic(&a.out, |p| save_embeddings(p, &all))?;
    ctx.note(format!(
        "embed: {} segments from {} conversations",
        all.len(),
        list.len()
    ));
    Ok(())
}

fn backend_fit(ctx: &Ctx, a: &crate::BackendFitArgs) -> Result<()> {
    require_file(&a.embeddings)?;
    require_file(&a.labels)?;
    require_parent(&a.out)?;
    let fraction: f64 = ctx.settings.pick("fraction", a.fraction, 0.1)?;
    let pca_dim: Option<usize> = a.pca_dim.or(ctx.settings.parsed("pca_dim")?);
    if !ctx.ready("backend-fit")? {
        return Ok(());
    }
    let embs = load_embeddings(&a.embeddings)?;
    let text = fs::read_to_string(&a.labels)?;
    let mut by_id = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] => {}
            [id, spk] => {
                by_id.insert(id.to_string(), spk.to_string());
            }
            _ => bail!(
                "{}:{}: expected `<embedding_id> <speaker>`",
                a.labels.display(),
                i + 1
            ),
        }
    }
    let mut vectors = Vec::with_capacity(embs.len());
    let mut labels = Vec::with_capacity(embs.len());
    for e in embs {
        let spk = by_id
            .get(&e.id)
            .ok_or_else(|| anyhow!("embedding {} has no speaker label", e.id))?;
        labels.push(spk.clone());
        vectors.push(e.vector);
    }
    let dim = pca_dim.unwrap_or_else(|| vectors.first().map_or(0, |v| v.len()));
    let backend = Backend::fit(&vectors, &labels, dim, fraction)?;
    write_atomic(&a.out, |p| backend.save(p))?;
    ctx.note(format!(
        "backend-fit: {} embeddings, whitened to {}, conversation fraction {fraction}",
        vectors.len(),
        backend.whitener.output_dim()
    ));
    Ok(())
}

/// Loads the model bundle and scores every listed conversation.
fn score_conversations(
    ctx: &Ctx,
    model: &Path,
    backend: &Path,
    list: &[(String, PathBuf)],
    sad: &[SadMark],
) -> Result<Vec<ScoredConversation>> {
    let diarizer = Diarizer {
        network: Network::load(model)?,
        backend: Backend::load(backend)?,
        segments: ctx.segment_config()?,
    };
    if diarizer.backend.whitener.input_dim()
        != diarizer.network.spec().layers[diarizer.network.spec().embedding_index()].out_dim
    {
        bail!("back-end does not match the network's embedding size");
    }
    let scored: Vec<Result<ScoredConversation>> = ctx.pool()?.install(|| {
        list.par_iter()
            .map(|(id, path)| {
                let feats = load_features(path)?;
                diarizer
                    .score(id, &feats, sad)
                    .with_context(|| format!("conversation {id}"))
            })
            .collect()
    });
    scored.into_iter().collect()
}

fn diarize(ctx: &Ctx, a: &crate::DiarizeArgs) -> Result<()> {
    for p in [&a.model, &a.backend, &a.conversations, &a.sad] {
        require_file(p)?;
    }
    require_parent(&a.out)?;
    let list = read_list(&a.conversations)?;
    let oracle = match &a.oracle_k {
        Some(p) => {
            require_file(p)?;
            let k = read_speaker_counts(p)?;
            if let Some((id, _)) = list.iter().find(|(id, _)| !k.contains_key(id)) {
                bail!("no speaker count for conversation {id}");
            }
            Some(k)
        }
        None => None,
    };
    let _ = ctx.segment_config()?;
    if !ctx.ready("diarize")? {
        return Ok(());
    }
    let sad = read_sad(&a.sad)?;
    let scored = score_conversations(ctx, &a.model, &a.backend, &list, &sad)?;
    let mut hyp = Timeline::new();
    for c in &scored {
        let stop = match &oracle {
            Some(k) => StopRule::OracleK(k[&c.id].min(c.segments.len())),
            None => StopRule::Threshold(a.threshold.expect("clap requires a stop rule")),
        };
        hyp.turns.extend(c.diarize(stop)?.turns);
    }
    write_atomic(&a.out, |p| hyp.write_rttm(p))?;
    ctx.note(format!(
        "diarize: {} conversations, {} turns",
        scored.len(),
        hyp.turns.len()
    ));
    Ok(())
}

fn score(ctx: &Ctx, a: &crate::ScoreArgs) -> Result<()> {
    require_file(&a.reference)?;
    require_file(&a.hypothesis)?;
    if let Some(s) = &a.sad {
        require_file(s)?;
    }
    let opts = ctx.der_options(a.collar, a.include_overlap)?;
    if !ctx.ready("score")? {
        return Ok(());
    }
    let reference = Timeline::read_rttm(&a.reference)?;
    let hypothesis = Timeline::read_rttm(&a.hypothesis)?;
    let sad = match &a.sad {
        Some(s) => read_sad(s)?,
        None => Vec::new(),
    };
    let report = der::score(&reference, &hypothesis, &sad, opts)?;
    print!("{report}");
    if a.breakdown {
        println!("speakers scored miss fa spkerr der");
        for (group, r) in report.breakdown() {
            println!(
                "{group} {:.3} {:.3} {:.3} {:.3} {:.3}",
                r.scored_time_s,
                r.missed_time_s,
                r.false_alarm_time_s,
                r.speaker_error_time_s,
                r.der * 100.0
            );
        }
    }
    Ok(())
}

fn calibrate(ctx: &Ctx, a: &crate::CalibrateArgs) -> Result<()> {
    for p in [&a.model, &a.backend, &a.conversations, &a.sad, &a.reference] {
        require_file(p)?;
    }
    if let Some(o) = &a.out {
        require_parent(o)?;
    }
    let folds: usize = ctx.settings.pick("folds", a.folds, 2)?;
    let points: usize = ctx.settings.pick("grid_points", None, 41)?;
    let opts = ctx.der_options(a.collar, false)?;
    let _ = ctx.segment_config()?;
    let list = read_list(&a.conversations)?;
    if list.len() < folds || folds < 2 {
        bail!("{folds}-fold calibration needs at least {folds} conversations and folds >= 2");
    }
    if !ctx.ready("calibrate")? {
        return Ok(());
    }
    let sad = read_sad(&a.sad)?;
    let reference = Timeline::read_rttm(&a.reference)?;
    let scored = score_conversations(ctx, &a.model, &a.backend, &list, &sad)?;
    let grid = default_grid(&scored, points)?;
    let report = calibrate_threshold(&scored, &reference, &sad, folds, &grid, opts)?;
    print!("{report}");
    if let Some(out) = &a.out {
        let mut hyp = Timeline::new();
        for fold in &report.folds {
            for c in scored.iter().filter(|c| fold.eval_ids.contains(&c.id)) {
                hyp.turns
                    .extend(c.diarize(StopRule::Threshold(fold.threshold))?.turns);
            }
        }
        write_atomic(out, |p| hyp.write_rttm(p))?;
    }
    Ok(())
}
