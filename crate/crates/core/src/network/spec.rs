//! Declarative layer graphs and the stock x-vector architectures.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered set of frame offsets spliced around the current step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Context(Vec<i32>);

impl Context {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::invalid("context needs at least one offset"));
        }
        if offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "context offsets must be strictly increasing: {offsets:?}"
            )));
        }
        Ok(Context(offsets))
    }

    pub fn single() -> Self {
        Context(vec![0])
    }

    /// `{-k, ..., k}` with every offset.
    pub fn full(k: i32) -> Self {
        Context((-k..=k).collect())
    }

    /// `{-k, 0, k}`.
    pub fn sparse(k: i32) -> Self {
        Context(vec![-k, 0, k])
    }

    pub fn offsets(&self) -> &[i32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> i32 {
        self.0[0]
    }

    pub fn max(&self) -> i32 {
        self.0[self.0.len() - 1]
    }

    /// Frames lost by a valid convolution with this context.
    pub fn span(&self) -> usize {
        (self.max() - self.min()) as usize
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|o| o.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Context {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let offsets = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<i32>()
                    .map_err(|_| Error::invalid(format!("bad context {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Context::new(offsets)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Full-rank spliced convolution.
    Tdnn { context: Context },
    /// Two-factor convolution through a bottleneck of `inner_dim`.
    FactorizedTdnn { context: Context, inner_dim: usize },
    /// Affine map per frame or per segment.
    Dense,
    /// Mean and standard deviation over frames; turns frames into segments.
    StatsPool,
    /// Column concatenation of segment-level inputs.
    Concat,
}

impl LayerKind {
    fn tag(&self) -> &'static str {
        match self {
            LayerKind::Tdnn { .. } => "tdnn",
            LayerKind::FactorizedTdnn { .. } => "factorized_tdnn",
            LayerKind::Dense => "dense",
            LayerKind::StatsPool => "stats_pool",
            LayerKind::Concat => "concat",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            LayerKind::Tdnn { .. } | LayerKind::FactorizedTdnn { .. } | LayerKind::Dense
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMode {
    /// Element-wise sum with the main input.
    Sum,
    /// Concatenate with the main input, then project back to its width.
    ConcatProject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skip {
    pub from: String,
    pub mode: SkipMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Producer layers; `"input"` names the network input.
    pub inputs: Vec<String>,
    /// Output width; ignored (derived) for pooling and concatenation.
    pub out_dim: usize,
    pub skip: Option<Skip>,
    /// Linear map followed by ReLU and batch norm.
    pub activation: bool,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, input: &str, out_dim: usize, activation: bool) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            inputs: vec![input.to_string()],
            out_dim,
            skip: None,
            activation,
        }
    }

    fn with_skip(mut self, from: &str, mode: SkipMode) -> Self {
        self.skip = Some(Skip {
            from: from.to_string(),
            mode,
        });
        self
    }
}

pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Frame layers feeding separate pooling branches; empty for single-scale nets.
    pub msa_taps: Vec<String>,
    /// Layer whose pre-activation output is the embedding.
    pub embedding_layer: String,
    pub num_speakers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Frame,
    Segment,
}

/// Shapes and time alignment derived from a validated spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeometry {
    pub in_dim: usize,
    pub out_dim: usize,
    pub level: Level,
    /// Input frames lost on the left/right up to this layer's output.
    pub left: usize,
    pub right: usize,
}

impl LayerGeometry {
    pub fn span(&self) -> usize {
        self.left + self.right
    }
}

impl NetworkSpec {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn embedding_index(&self) -> usize {
        self.layer_index(&self.embedding_layer)
            .expect("validated spec has its embedding layer")
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers[self.embedding_index()].out_dim
    }

    /// Checks the graph and derives per-layer geometry.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut geo: Vec<LayerGeometry> = Vec::with_capacity(self.layers.len());
        let input_geo = LayerGeometry {
            in_dim: self.input_dim,
            out_dim: self.input_dim,
            level: Level::Frame,
            left: 0,
            right: 0,
        };
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::invalid(format!("layer {}: {msg}", layer.name));
            if layer.name == INPUT || index.contains_key(layer.name.as_str()) {
                return Err(bad("duplicate or reserved name".into()));
            }
            let lookup = |name: &str| -> Result<LayerGeometry> {
                if name == INPUT {
                    Ok(input_geo.clone())
                } else {
                    index
                        .get(name)
                        .map(|&j| geo[j].clone())
                        .ok_or_else(|| bad(format!("unknown producer {name:?}")))
                }
            };
            let sources = layer
                .inputs
                .iter()
                .map(|n| lookup(n))
                .collect::<Result<Vec<_>>>()?;
            let expected_inputs_ok = match layer.kind {
                LayerKind::Concat => sources.len() >= 2,
                _ => sources.len() == 1,
            };
            if !expected_inputs_ok {
                return Err(bad(format!("wrong number of inputs ({})", sources.len())));
            }
            let main = &sources[0];
            let (mut left, mut right) = (main.left, main.right);
            let g = match &layer.kind {
                LayerKind::Tdnn { context } | LayerKind::FactorizedTdnn { context, .. } => {
                    if main.level != Level::Frame {
                        return Err(bad("convolution over segment-level input".into()));
                    }
                    if let LayerKind::FactorizedTdnn { inner_dim, .. } = &layer.kind {
                        let (c1, _) = super::ops::split_context(context)?;
                        if *inner_dim == 0
                            || *inner_dim > main.out_dim * c1.len()
                            || *inner_dim >= layer.out_dim
                        {
                            return Err(bad(format!(
                                "inner_dim {inner_dim} must be below out_dim {} and at most {}",
                                layer.out_dim,
                                main.out_dim * c1.len()
                            )));
                        }
                    }
                    left += (-context.min()).max(0) as usize;
                    right += context.max().max(0) as usize;
                    if context.min() > 0 || context.max() < 0 {
                        return Err(bad("context must contain or straddle 0".into()));
                    }
                    LayerGeometry {
                        in_dim: main.out_dim,
                        out_dim: layer.out_dim,
                        level: Level::Frame,
                        left,
                        right,
                    }
                }
                LayerKind::Dense => LayerGeometry {
                    in_dim: main.out_dim,
                    out_dim: layer.out_dim,
                    level: main.level,
                    left,
                    right,
                },
                LayerKind::StatsPool => {
                    if main.level != Level::Frame {
                        return Err(bad("pooling needs frame-level input".into()));
                    }
                    LayerGeometry {
                        in_dim: main.out_dim,
                        out_dim: 2 * main.out_dim,
                        level: Level::Segment,
                        left,
                        right,
                    }
                }
                LayerKind::Concat => {
                    if sources.iter().any(|s| s.level != Level::Segment) {
                        return Err(bad("concatenation is segment-level only".into()));
                    }
                    let width = sources.iter().map(|s| s.out_dim).sum();
                    LayerGeometry {
                        in_dim: width,
                        out_dim: width,
                        level: Level::Segment,
                        left: 0,
                        right: 0,
                    }
                }
            };
            if layer.kind.is_linear() && layer.out_dim == 0 {
                return Err(bad("out_dim must be positive".into()));
            }
            if !layer.kind.is_linear() && (layer.activation || layer.skip.is_some()) {
                return Err(bad("only linear layers take activations or skips".into()));
            }
            if let Some(skip) = &layer.skip {
                let s = lookup(&skip.from)?;
                if s.level != Level::Frame || main.level != Level::Frame {
                    return Err(bad("skip connections are frame-level only".into()));
                }
                if s.out_dim != main.out_dim {
                    return Err(bad(format!(
                        "skip width {} differs from input width {}",
                        s.out_dim, main.out_dim
                    )));
                }
                if s.left > main.left || s.right > main.right {
                    return Err(bad("skip source must precede the main input".into()));
                }
            }
            index.insert(&layer.name, i);
            geo.push(g);
        }
        let Some(last) = geo.last() else {
            return Err(Error::invalid("network has no layers"));
        };
        if last.level != Level::Segment || last.out_dim != self.num_speakers {
            return Err(Error::invalid(format!(
                "last layer must be segment-level with {} outputs",
                self.num_speakers
            )));
        }
        let e = self.layer_index(&self.embedding_layer).ok_or_else(|| {
            Error::invalid(format!(
                "unknown embedding layer {:?}",
                self.embedding_layer
            ))
        })?;
        if geo[e].level != Level::Segment || !self.layers[e].kind.is_linear() {
            return Err(Error::invalid(
                "embedding layer must be a segment-level dense layer",
            ));
        }
        for tap in &self.msa_taps {
            if !index.contains_key(tap.as_str()) {
                return Err(Error::invalid(format!("unknown MSA tap {tap:?}")));
            }
        }
        Ok(geo)
    }

    /// Input frames lost to the frame-level contexts.
    pub fn receptive_span(&self) -> Result<usize> {
        let geo = self.geometry()?;
        Ok(geo
            .iter()
            .filter(|g| g.level == Level::Frame)
            .map(|g| g.span())
            .max()
            .unwrap_or(0))
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input_dim {}", self.input_dim)?;
        writeln!(f, "num_speakers {}", self.num_speakers)?;
        writeln!(f, "embedding {}", self.embedding_layer)?;
        write!(f, "msa_taps")?;
        for t in &self.msa_taps {
            write!(f, " {t}")?;
        }
        writeln!(f)?;
        for l in &self.layers {
            write!(
                f,
                "layer {} {} in={}",
                l.name,
                l.kind.tag(),
                l.inputs.join(",")
            )?;
            match &l.kind {
                LayerKind::Tdnn { context } => write!(f, " ctx={context}")?,
                LayerKind::FactorizedTdnn { context, inner_dim } => {
                    write!(f, " ctx={context} inner={inner_dim}")?
                }
                _ => {}
            }
            if l.kind.is_linear() {
                write!(f, " out={} act={}", l.out_dim, u8::from(l.activation))?;
            }
            if let Some(s) = &l.skip {
                let mode = match s.mode {
                    SkipMode::Sum => "sum",
                    SkipMode::ConcatProject => "concat",
                };
                write!(f, " skip={}:{mode}", s.from)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input_dim = None;
        let mut num_speakers = None;
        let mut embedding = None;
        let mut taps = Vec::new();
        let mut layers = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let err = |m: &str| Error::parse("network spec", ln + 1, m);
            let mut words = line.split_whitespace();
            let Some(head) = words.next() else { continue };
            match head {
                "input_dim" => input_dim = words.next().and_then(|w| w.parse().ok()),
                "num_speakers" => num_speakers = words.next().and_then(|w| w.parse().ok()),
                "embedding" => embedding = words.next().map(str::to_string),
                "msa_taps" => taps = words.map(str::to_string).collect(),
                "layer" => {
                    let name = words.next().ok_or_else(|| err("missing layer name"))?;
                    let tag = words.next().ok_or_else(|| err("missing layer kind"))?;
                    let mut kv: HashMap<&str, &str> = HashMap::new();
                    for w in words {
                        let (k, v) = w.split_once('=').ok_or_else(|| err("expected key=value"))?;
                        kv.insert(k, v);
                    }
                    let get = |k: &str| {
                        kv.get(k)
                            .copied()
                            .ok_or_else(|| err(&format!("missing {k}")))
                    };
                    let num = |k: &str| -> Result<usize> {
                        get(k)?.parse().map_err(|_| err(&format!("bad {k}")))
                    };
                    let kind = match tag {
                        "tdnn" => LayerKind::Tdnn {
                            context: get("ctx")?.parse()?,
                        },
                        "factorized_tdnn" => LayerKind::FactorizedTdnn {
                            context: get("ctx")?.parse()?,
                            inner_dim: num("inner")?,
                        },
                        "dense" => LayerKind::Dense,
                        "stats_pool" => LayerKind::StatsPool,
                        "concat" => LayerKind::Concat,
                        other => return Err(err(&format!("unknown layer kind {other:?}"))),
                    };
                    let linear = kind.is_linear();
                    let skip = match kv.get("skip") {
                        None => None,
                        Some(v) => {
                            let (from, mode) = v.split_once(':').ok_or_else(|| err("bad skip"))?;
                            let mode = match mode {
                                "sum" => SkipMode::Sum,
                                "concat" => SkipMode::ConcatProject,
                                _ => return Err(err("bad skip mode")),
                            };
                            Some(Skip {
                                from: from.to_string(),
                                mode,
                            })
                        }
                    };
                    layers.push(LayerSpec {
                        name: name.to_string(),
                        kind,
                        inputs: get("in")?.split(',').map(str::to_string).collect(),
                        out_dim: if linear { num("out")? } else { 0 },
                        skip,
                        activation: linear && get("act")? == "1",
                    });
                }
                other => return Err(err(&format!("unknown directive {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Format(format!("network spec lacks {what}"));
        let mut spec = NetworkSpec {
            input_dim: input_dim.ok_or_else(|| missing("input_dim"))?,
            layers,
            msa_taps: taps,
            embedding_layer: embedding.ok_or_else(|| missing("embedding"))?,
            num_speakers: num_speakers.ok_or_else(|| missing("num_speakers"))?,
        };
        let geo = spec.geometry()?;
        // pooling and concat widths are derived
        for (l, g) in spec.layers.iter_mut().zip(&geo) {
            if !l.kind.is_linear() {
                l.out_dim = g.out_dim;
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Tdnn,
    Etdnn,
    Ftdnn,
    FtdnnMsa,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "tdnn" => Ok(Architecture::Tdnn),
            "etdnn" | "e-tdnn" => Ok(Architecture::Etdnn),
            "ftdnn" | "f-tdnn" => Ok(Architecture::Ftdnn),
            "ftdnn-msa" | "f-tdnn-msa" => Ok(Architecture::FtdnnMsa),
            _ => Err(Error::invalid(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Layer widths of the stock architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchDims {
    pub input_dim: usize,
    /// TDNN / E-TDNN hidden width and the F-TDNN first layer.
    pub tdnn_width: usize,
    pub factorized_width: usize,
    pub inner_dim: usize,
    /// Width of the last frame-level layer(s) feeding pooling.
    pub pool_width: usize,
    pub segment_width: usize,
    /// Per-branch segment width of the multi-scale net.
    pub branch_width: usize,
    pub embedding_dim: usize,
    pub num_speakers: usize,
}

impl ArchDims {
    pub fn full(num_speakers: usize) -> Self {
        ArchDims {
            input_dim: 23,
            tdnn_width: 512,
            factorized_width: 725,
            inner_dim: 180,
            pool_width: 1500,
            segment_width: 512,
            branch_width: 256,
            embedding_dim: 512,
            num_speakers,
        }
    }

    /// Reduced widths for desk-scale experiments and gradient checks.
    pub fn toy(num_speakers: usize) -> Self {
        ArchDims {
            input_dim: 23,
            tdnn_width: 32,
            factorized_width: 32,
            inner_dim: 16,
            pool_width: 32,
            segment_width: 32,
            branch_width: 32,
            embedding_dim: 32,
            num_speakers,
        }
    }

    /// Doubles the pooling input width (the 6000-dimensional statistics control).
    pub fn with_wide_pooling(mut self) -> Self {
        self.pool_width *= 2;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchOptions {
    pub dims: ArchDims,
    /// Frame-layer indices tapped for pooling (multi-scale net only).
    pub taps: Vec<usize>,
    pub skip_mode: SkipMode,
    /// Take the embedding from the second segment layer of single-scale nets.
    pub embedding_at_second: bool,
}

impl ArchOptions {
    pub fn new(dims: ArchDims) -> Self {
        ArchOptions {
            dims,
            taps: vec![8, 9],
            skip_mode: SkipMode::Sum,
            embedding_at_second: false,
        }
    }
}

fn seg_tail(layers: &mut Vec<LayerSpec>, pooled_from: &str, d: &ArchDims, second: bool) -> String {
    let pool = "pool11";
    layers.push(LayerSpec::new(
        pool,
        LayerKind::StatsPool,
        pooled_from,
        0,
        false,
    ));
    layers.push(LayerSpec::new(
        "seg12",
        LayerKind::Dense,
        pool,
        d.segment_width,
        true,
    ));
    layers.push(LayerSpec::new(
        "seg13",
        LayerKind::Dense,
        "seg12",
        d.segment_width,
        true,
    ));
    layers.push(LayerSpec::new(
        "output",
        LayerKind::Dense,
        "seg13",
        d.num_speakers,
        false,
    ));
    if second { "seg13" } else { "seg12" }.to_string()
}

fn ftdnn_frames(layers: &mut Vec<LayerSpec>, d: &ArchDims, mode: SkipMode) {
    use LayerKind::*;
    layers.push(LayerSpec::new(
        "frame1",
        Tdnn {
            context: Context::full(2),
        },
        INPUT,
        d.tdnn_width,
        true,
    ));
    let rows: [(i32, Option<&str>); 8] = [
        (2, None),
        (0, None),
        (3, None),
        (0, Some("frame3")),
        (3, None),
        (3, Some("frame4")),
        (3, None),
        (0, Some("frame6")),
    ];
    for (i, (k, skip)) in rows.iter().enumerate() {
        let idx = i + 2;
        let context = if *k == 0 {
            Context::single()
        } else {
            Context::sparse(*k)
        };
        let mut l = LayerSpec::new(
            &format!("frame{idx}"),
            FactorizedTdnn {
                context,
                inner_dim: d.inner_dim,
            },
            &format!("frame{}", idx - 1),
            d.factorized_width,
            true,
        );
        if let Some(from) = skip {
            l = l.with_skip(from, mode);
        }
        layers.push(l);
    }
}

/// Emits the layer graph of one of the stock architectures.
pub fn build_architecture(arch: Architecture, opts: &ArchOptions) -> Result<NetworkSpec> {
    use LayerKind::*;
    let d = &opts.dims;
    let mut layers = Vec::new();
    let mut msa_taps = Vec::new();
    if arch != Architecture::FtdnnMsa && !opts.taps.is_empty() && opts.taps != [8, 9] {
        return Err(Error::invalid(
            "pooling taps only apply to the multi-scale architecture",
        ));
    }
    let embedding = match arch {
        Architecture::Tdnn => {
            let w = d.tdnn_width;
            layers.push(LayerSpec::new(
                "frame1",
                Tdnn {
                    context: Context::full(2),
                },
                INPUT,
                w,
                true,
            ));
            layers.push(LayerSpec::new(
                "frame2",
                Tdnn {
                    context: Context::sparse(2),
                },
                "frame1",
                w,
                true,
            ));
            layers.push(LayerSpec::new(
                "frame3",
                Tdnn {
                    context: Context::sparse(3),
                },
                "frame2",
                w,
                true,
            ));
            layers.push(LayerSpec::new("frame4", Dense, "frame3", w, true));
            layers.push(LayerSpec::new(
                "frame5",
                Dense,
                "frame4",
                d.pool_width,
                true,
            ));
            seg_tail(&mut layers, "frame5", d, opts.embedding_at_second)
        }
        Architecture::Etdnn => {
            let w = d.tdnn_width;
            let contexts = [
                Context::full(2),
                Context::single(),
                Context::sparse(2),
                Context::single(),
                Context::sparse(3),
                Context::single(),
                Context::sparse(4),
                Context::single(),
                Context::single(),
            ];
            let mut prev = INPUT.to_string();
            for (i, context) in contexts.into_iter().enumerate() {
                let name = format!("frame{}", i + 1);
                let kind = if context.len() == 1 {
                    Dense
                } else {
                    Tdnn { context }
                };
                layers.push(LayerSpec::new(&name, kind, &prev, w, true));
                prev = name;
            }
            layers.push(LayerSpec::new(
                "frame10",
                Dense,
                "frame9",
                d.pool_width,
                true,
            ));
            seg_tail(&mut layers, "frame10", d, opts.embedding_at_second)
        }
        Architecture::Ftdnn => {
            ftdnn_frames(&mut layers, d, opts.skip_mode);
            layers.push(LayerSpec::new(
                "frame10",
                Dense,
                "frame9",
                d.pool_width,
                true,
            ));
            seg_tail(&mut layers, "frame10", d, opts.embedding_at_second)
        }
        Architecture::FtdnnMsa => {
            let mut taps = opts.taps.clone();
            taps.sort_unstable();
            taps.dedup();
            if taps.is_empty() || taps.iter().any(|t| !(7..=9).contains(t)) {
                return Err(Error::invalid(format!(
                    "multi-scale taps must be a non-empty subset of {{7, 8, 9}}, got {:?}",
                    opts.taps
                )));
            }
            ftdnn_frames(&mut layers, d, opts.skip_mode);
            let mut branch_outputs = Vec::new();
            for t in &taps {
                let tap = format!("frame{t}");
                let dense10 = format!("dense10-{tap}");
                let pool = format!("pool11-{tap}");
                let dense12 = format!("dense12-{tap}");
                layers.push(LayerSpec::new(&dense10, Dense, &tap, d.pool_width, true));
                layers.push(LayerSpec::new(&pool, StatsPool, &dense10, 0, false));
                layers.push(LayerSpec::new(&dense12, Dense, &pool, d.branch_width, true));
                branch_outputs.push(dense12);
                msa_taps.push(tap);
            }
            layers.push(LayerSpec {
                name: "concat".into(),
                kind: Concat,
                inputs: branch_outputs,
                out_dim: 0,
                skip: None,
                activation: false,
            });
            layers.push(LayerSpec::new(
                "dense13",
                Dense,
                "concat",
                d.embedding_dim,
                true,
            ));
            layers.push(LayerSpec::new(
                "output",
                Dense,
                "dense13",
                d.num_speakers,
                false,
            ));
            "dense13".to_string()
        }
    };
    let mut spec = NetworkSpec {
        input_dim: d.input_dim,
        layers,
        msa_taps,
        embedding_layer: embedding,
        num_speakers: d.num_speakers,
    };
    let geo = spec.geometry()?;
    for (l, g) in spec.layers.iter_mut().zip(&geo) {
        if !l.kind.is_linear() {
            l.out_dim = g.out_dim;
        }
    }
    Ok(spec)
}
