use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use super::ops::{self, BatchNormCache};
use super::spec::{Context, LayerGeometry, LayerKind, Level, NetworkSpec, SkipMode, INPUT};
use crate::container;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Factor1,
    Factor2,
    SkipProjection,
    Bias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnMean | ParamRole::BnVar)
    }

    /// Linear maps carry the L2 penalty; biases and batch-norm terms do not.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamRole::Weight | ParamRole::Factor1 | ParamRole::Factor2 | ParamRole::SkipProjection
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub role: ParamRole,
    pub value: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// How frame-level outputs are pooled into one vector per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// One pool over every valid frame.
    Whole,
    /// Pool each `len`-frame input window at `stride`, then average the
    /// pooled vectors. Lengths are in input frames.
    Windows { len: usize, stride: usize },
}

/// Frame-level activations of a batch, examples stacked by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub data: DMatrix<f64>,
    pub lengths: Vec<usize>,
}

impl FrameBatch {
    pub fn from_examples(examples: &[DMatrix<f64>]) -> Result<Self> {
        let dim = examples.first().map(|e| e.ncols()).unwrap_or(0);
        if examples.iter().any(|e| e.ncols() != dim) {
            return Err(Error::invalid("examples differ in feature dimension"));
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.nrows()).collect();
        let mut data = DMatrix::zeros(lengths.iter().sum(), dim);
        let mut row = 0;
        for e in examples {
            data.view_mut((row, 0), e.shape()).copy_from(e);
            row += e.nrows();
        }
        Ok(FrameBatch { data, lengths })
    }

    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.lengths
            .iter()
            .map(|l| {
                let o = acc;
                acc += l;
                o
            })
            .collect()
    }

    fn splice(&self, context: &Context) -> Result<FrameBatch> {
        let span = context.span();
        let dim = self.data.ncols();
        if let Some(&short) = self.lengths.iter().find(|&&l| l <= span) {
            return Err(Error::invalid(format!(
                "{short} frames cannot cover a context span of {span}"
            )));
        }
        let lengths: Vec<usize> = self.lengths.iter().map(|l| l - span).collect();
        let mut data = DMatrix::zeros(lengths.iter().sum(), dim * context.len());
        let lo = context.min();
        let mut out_row = 0;
        for (offset, &len) in self.offsets().into_iter().zip(&lengths) {
            for (block, &o) in context.offsets().iter().enumerate() {
                let src = offset + (o - lo) as usize;
                data.view_mut((out_row, block * dim), (len, dim))
                    .copy_from(&self.data.view((src, 0), (len, dim)));
            }
            out_row += len;
        }
        Ok(FrameBatch { data, lengths })
    }

    /// Adjoint of `splice`, producing rows for examples of `in_lengths`.
    fn unsplice(&self, context: &Context, in_lengths: &[usize]) -> FrameBatch {
        let dim = self.data.ncols() / context.len();
        let mut data = DMatrix::zeros(in_lengths.iter().sum(), dim);
        let lo = context.min();
        let mut in_off = 0;
        let mut out_row = 0;
        for (&len, &in_len) in self.lengths.iter().zip(in_lengths) {
            for (block, &o) in context.offsets().iter().enumerate() {
                let dst = in_off + (o - lo) as usize;
                let mut view = data.view_mut((dst, 0), (len, dim));
                view += self.data.view((out_row, block * dim), (len, dim));
            }
            in_off += in_len;
            out_row += len;
        }
        FrameBatch {
            data,
            lengths: in_lengths.to_vec(),
        }
    }

    /// Rows `[shift, shift + keep_e)` of every example.
    fn crop(&self, shift: usize, keep: &[usize]) -> DMatrix<f64> {
        let dim = self.data.ncols();
        let mut out = DMatrix::zeros(keep.iter().sum(), dim);
        let mut row = 0;
        for (offset, &k) in self.offsets().into_iter().zip(keep) {
            out.view_mut((row, 0), (k, dim))
                .copy_from(&self.data.view((offset + shift, 0), (k, dim)));
            row += k;
        }
        out
    }

    /// Adds `grad` (cropped layout) back into a full-length accumulator.
    fn uncrop_add(
        acc: &mut DMatrix<f64>,
        acc_lengths: &[usize],
        grad: &DMatrix<f64>,
        shift: usize,
        keep: &[usize],
    ) {
        let dim = grad.ncols();
        let mut src = 0;
        let mut dst = 0;
        for (&full, &k) in acc_lengths.iter().zip(keep) {
            let mut view = acc.view_mut((dst + shift, 0), (k, dim));
            view += grad.view((src, 0), (k, dim));
            src += k;
            dst += full;
        }
    }
}

#[derive(Debug, Clone)]
enum Value {
    Frames(FrameBatch),
    Segments(DMatrix<f64>),
}

impl Value {
    fn matrix(&self) -> &DMatrix<f64> {
        match self {
            Value::Frames(f) => &f.data,
            Value::Segments(m) => m,
        }
    }

    fn lengths(&self) -> Option<&[usize]> {
        match self {
            Value::Frames(f) => Some(&f.lengths),
            Value::Segments(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct LayerTape {
    /// Input to the (first) linear map: `x`, or the spliced `x`.
    linear_in: Option<DMatrix<f64>>,
    /// Spliced bottleneck of a factorized layer.
    spliced_inner: Option<DMatrix<f64>>,
    in_lengths: Vec<usize>,
    inner_lengths: Vec<usize>,
    /// `[main | skip]` ahead of a concat-project skip.
    skip_cat: Option<DMatrix<f64>>,
    /// Layer input after the skip has been merged in.
    skip_input: Option<DMatrix<f64>>,
    pre_activation: Option<DMatrix<f64>>,
    relu_mask: Option<DMatrix<f64>>,
    bn: Option<BatchNormCache>,
    dropout: Option<DMatrix<f64>>,
}

/// Activations cached by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    outputs: Vec<Value>,
    layers: Vec<LayerTape>,
    pooling: Pooling,
    input_lengths: Vec<usize>,
    training: bool,
}

/// ReLU on/off patterns of a recorded pass, replayable in later passes.
#[derive(Debug, Clone)]
pub struct ReluPatterns(Vec<Option<DMatrix<f64>>>);

impl Tape {
    pub fn relu_patterns(&self) -> ReluPatterns {
        ReluPatterns(self.layers.iter().map(|l| l.relu_mask.clone()).collect())
    }

    /// Output of layer `index`, examples stacked by rows at frame level.
    pub fn output(&self, index: usize) -> &DMatrix<f64> {
        self.outputs[index].matrix()
    }

    /// Linear output of layer `index` ahead of its activation, if it has one.
    pub fn pre_activation(&self, index: usize) -> Option<&DMatrix<f64>> {
        self.layers[index].pre_activation.as_ref()
    }

    /// Input of layer `index` after merging its skip connection, if it has one.
    pub fn merged_input(&self, index: usize) -> Option<&DMatrix<f64>> {
        self.layers[index].skip_input.as_ref()
    }
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub pooling: Pooling,
    /// Dropout probability on activation outputs (training only).
    pub dropout: f64,
    pub rng: Option<&'a mut dyn RngCore>,
    /// Replay fixed ReLU patterns instead of thresholding (finite-difference checks).
    pub relu_patterns: Option<&'a ReluPatterns>,
}

impl<'a> ForwardOptions<'a> {
    pub fn inference() -> Self {
        ForwardOptions {
            mode: Mode::Inference,
            pooling: Pooling::Whole,
            dropout: 0.0,
            rng: None,
            relu_patterns: None,
        }
    }

    pub fn training(pooling: Pooling) -> Self {
        ForwardOptions {
            mode: Mode::Training,
            pooling,
            dropout: 0.0,
            rng: None,
            relu_patterns: None,
        }
    }
}

pub struct ForwardOutput {
    /// `B x num_speakers` output-layer pre-activations.
    pub logits: DMatrix<f64>,
    /// `B x E` pre-activations of the embedding layer.
    pub embeddings: DMatrix<f64>,
    /// Present in training mode.
    pub tape: Option<Tape>,
    /// Batch moments `(mean, var)` of every batch-norm layer (training mode).
    pub batch_moments: Vec<Option<(DVector<f64>, DVector<f64>)>>,
}

/// Parameter gradients aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<DMatrix<f64>>>);

/// An x-vector network: a layer graph plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    geometry: Vec<LayerGeometry>,
    params: Vec<Vec<Param>>,
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
    let a = (3.0 / fan_in as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

fn column(v: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

impl Network {
    /// Uniform fan-in initialization; bottleneck factors start semi-orthogonal.
    pub fn new(spec: NetworkSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let mut net = Self::skeleton(spec)?;
        for p in net.params.iter_mut().flatten() {
            let (rows, cols) = p.value.shape();
            match p.role {
                ParamRole::Weight | ParamRole::Factor2 => p.value = uniform(rows, cols, cols, rng),
                ParamRole::Factor1 => {
                    p.value = ops::semi_orthogonalize(&uniform(rows, cols, cols, rng))?
                }
                // [I | I]: starts out equivalent to summation
                ParamRole::SkipProjection => {
                    p.value =
                        DMatrix::from_fn(rows, cols, |r, c| if c % rows == r { 1.0 } else { 0.0 })
                }
                ParamRole::BnScale | ParamRole::BnVar => p.value.fill(1.0),
                ParamRole::Bias | ParamRole::BnShift | ParamRole::BnMean => {}
            }
        }
        Ok(net)
    }

    /// Correctly shaped, all-zero parameters.
    fn skeleton(spec: NetworkSpec) -> Result<Self> {
        let geometry = spec.geometry()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        for (layer, geo) in spec.layers.iter().zip(&geometry) {
            let mut p = Vec::new();
            let mut push = |role, rows, cols| {
                p.push(Param {
                    role,
                    value: DMatrix::zeros(rows, cols),
                })
            };
            let out = layer.out_dim;
            match &layer.kind {
                LayerKind::Tdnn { context } => {
                    push(ParamRole::Weight, out, geo.in_dim * context.len());
                    push(ParamRole::Bias, out, 1);
                }
                LayerKind::FactorizedTdnn { context, inner_dim } => {
                    let (c1, c2) = ops::split_context(context)?;
                    push(ParamRole::Factor1, *inner_dim, geo.in_dim * c1.len());
                    push(ParamRole::Factor2, out, inner_dim * c2.len());
                    push(ParamRole::Bias, out, 1);
                }
                LayerKind::Dense => {
                    push(ParamRole::Weight, out, geo.in_dim);
                    push(ParamRole::Bias, out, 1);
                }
                LayerKind::StatsPool | LayerKind::Concat => {}
            }
            if layer
                .skip
                .as_ref()
                .is_some_and(|s| s.mode == SkipMode::ConcatProject)
            {
                push(ParamRole::SkipProjection, geo.in_dim, 2 * geo.in_dim);
            }
            if layer.activation {
                for role in [
                    ParamRole::BnScale,
                    ParamRole::BnShift,
                    ParamRole::BnMean,
                    ParamRole::BnVar,
                ] {
                    push(role, out, 1);
                }
            }
            params.push(p);
        }
        Ok(Network {
            spec,
            geometry,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    pub fn params(&self) -> &[Vec<Param>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Param>] {
        &mut self.params
    }

    pub fn param(&self, layer: &str, role: ParamRole) -> Option<&DMatrix<f64>> {
        let i = self.spec.layer_index(layer)?;
        self.params[i]
            .iter()
            .find(|p| p.role == role)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, layer: &str, role: ParamRole) -> Option<&mut DMatrix<f64>> {
        let i = self.spec.layer_index(layer)?;
        self.params[i]
            .iter_mut()
            .find(|p| p.role == role)
            .map(|p| &mut p.value)
    }

    fn get(&self, layer: usize, role: ParamRole) -> &DMatrix<f64> {
        &self.params[layer]
            .iter()
            .find(|p| p.role == role)
            .expect("parameter present for layer kind")
            .value
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .filter(|p| p.role.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Frames lost to the frame-level contexts; inputs must be longer.
    pub fn receptive_span(&self) -> usize {
        self.geometry
            .iter()
            .filter(|g| g.level == Level::Frame)
            .map(|g| g.span())
            .max()
            .unwrap_or(0)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(
            self.params
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|p| DMatrix::zeros(p.value.nrows(), p.value.ncols()))
                        .collect()
                })
                .collect(),
        )
    }

    /// Re-projects every bottleneck factor onto the nearest semi-orthogonal matrix.
    pub fn project_factors(&mut self) -> Result<()> {
        for p in self.params.iter_mut().flatten() {
            if p.role == ParamRole::Factor1 {
                p.value = ops::semi_orthogonalize(&p.value)?;
            }
        }
        Ok(())
    }

    /// `||M M^T - I||_F` for every bottleneck factor, in layer order.
    pub fn factor_residuals(&self) -> Vec<f64> {
        self.params
            .iter()
            .flatten()
            .filter(|p| p.role == ParamRole::Factor1)
            .map(|p| ops::orthonormality_residual(&p.value))
            .collect()
    }

    /// Exponential moving average of batch-norm moments.
    pub fn update_running_moments(
        &mut self,
        moments: &[Option<(DVector<f64>, DVector<f64>)>],
        momentum: f64,
    ) {
        for (params, m) in self.params.iter_mut().zip(moments) {
            let Some((mean, var)) = m else { continue };
            for p in params.iter_mut() {
                let src = match p.role {
                    ParamRole::BnMean => mean,
                    ParamRole::BnVar => var,
                    _ => continue,
                };
                for (dst, s) in p.value.iter_mut().zip(src.iter()) {
                    *dst = (1.0 - momentum) * *dst + momentum * s;
                }
            }
        }
    }

    /// Overwrites the running moments with the given ones.
    pub fn set_running_moments(&mut self, moments: &[Option<(DVector<f64>, DVector<f64>)>]) {
        self.update_running_moments(moments, 1.0);
    }

    pub fn forward(
        &self,
        examples: &[DMatrix<f64>],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let training = opts.mode == Mode::Training;
        let (mut out, tape) = self.run(examples, opts, false)?;
        if training {
            out.tape = Some(tape);
        }
        Ok(out)
    }

    /// Every layer's output for a batch, as a tape (also in inference mode).
    pub fn trace(&self, examples: &[DMatrix<f64>], opts: ForwardOptions<'_>) -> Result<Tape> {
        Ok(self.run(examples, opts, false)?.1)
    }

    /// Inference embedding of one segment: the pre-activation of the embedding layer.
    pub fn extract_embedding(&self, feats: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (out, _) = self.run(
            std::slice::from_ref(feats),
            ForwardOptions::inference(),
            true,
        )?;
        Ok(out.embeddings.row(0).transpose())
    }

    fn run(
        &self,
        examples: &[DMatrix<f64>],
        mut opts: ForwardOptions<'_>,
        stop_at_embedding: bool,
    ) -> Result<(ForwardOutput, Tape)> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let input = FrameBatch::from_examples(examples)?;
        if input.data.ncols() != self.spec.input_dim {
            return Err(Error::Dimension {
                expected: self.spec.input_dim,
                actual: input.data.ncols(),
                context: "network input features",
            });
        }
        let span = self.receptive_span();
        if let Some(&short) = input.lengths.iter().find(|&&l| l <= span) {
            return Err(Error::invalid(format!(
                "segment of {short} frames is too short for a receptive span of {span}"
            )));
        }
        let training = opts.mode == Mode::Training;
        if training && opts.dropout > 0.0 && opts.rng.is_none() {
            return Err(Error::invalid("dropout needs a random number generator"));
        }
        let input_lengths = input.lengths.clone();
        let input = Value::Frames(input);
        let embed_idx = self.spec.embedding_index();
        let n = self.spec.layers.len();
        let mut outputs: Vec<Value> = Vec::with_capacity(n);
        let mut tapes: Vec<LayerTape> = Vec::with_capacity(n);
        let mut moments = vec![None; n];
        let mut embeddings = None;

        for (li, layer) in self.spec.layers.iter().enumerate() {
            let producer = |name: &str| -> &Value {
                if name == INPUT {
                    &input
                } else {
                    &outputs[self.spec.layer_index(name).expect("validated producer")]
                }
            };
            let mut tape = LayerTape::default();
            let out = match &layer.kind {
                LayerKind::StatsPool => {
                    let Value::Frames(frames) = producer(&layer.inputs[0]) else {
                        unreachable!("validated frame-level pooling input")
                    };
                    let geo = &self.geometry[li];
                    Value::Segments(pool_forward(
                        frames,
                        &input_lengths,
                        geo.span(),
                        opts.pooling,
                    )?)
                }
                LayerKind::Concat => {
                    let parts: Vec<&DMatrix<f64>> =
                        layer.inputs.iter().map(|n| producer(n).matrix()).collect();
                    let rows = parts[0].nrows();
                    let width = parts.iter().map(|p| p.ncols()).sum();
                    let mut m = DMatrix::zeros(rows, width);
                    let mut col = 0;
                    for p in parts {
                        m.view_mut((0, col), p.shape()).copy_from(p);
                        col += p.ncols();
                    }
                    Value::Segments(m)
                }
                LayerKind::Tdnn { .. } | LayerKind::FactorizedTdnn { .. } | LayerKind::Dense => {
                    let main = producer(&layer.inputs[0]);
                    let x: Value = match &layer.skip {
                        None => main.clone(),
                        Some(skip) => {
                            let (Value::Frames(m), Value::Frames(s)) = (main, producer(&skip.from))
                            else {
                                unreachable!("validated frame-level skip")
                            };
                            let shift = self.left_of(&layer.inputs[0]) - self.left_of(&skip.from);
                            let cropped = s.crop(shift, &m.lengths);
                            let data = match skip.mode {
                                SkipMode::Sum => &m.data + cropped,
                                SkipMode::ConcatProject => {
                                    let d = m.data.ncols();
                                    let mut cat = DMatrix::zeros(m.data.nrows(), 2 * d);
                                    cat.view_mut((0, 0), m.data.shape()).copy_from(&m.data);
                                    cat.view_mut((0, d), cropped.shape()).copy_from(&cropped);
                                    let projected = ops::affine(
                                        &cat,
                                        self.get(li, ParamRole::SkipProjection),
                                        None,
                                    );
                                    tape.skip_cat = Some(cat);
                                    projected
                                }
                            };
                            tape.skip_input = Some(data.clone());
                            Value::Frames(FrameBatch {
                                data,
                                lengths: m.lengths.clone(),
                            })
                        }
                    };
                    let (z, z_lengths) = self.linear_forward(li, &layer.kind, x, &mut tape)?;
                    if li == embed_idx {
                        embeddings = Some(z.clone());
                    }
                    let shape_of = |data: DMatrix<f64>| match &z_lengths {
                        Some(l) => Value::Frames(FrameBatch {
                            data,
                            lengths: l.clone(),
                        }),
                        None => Value::Segments(data),
                    };
                    if !layer.activation {
                        shape_of(z)
                    } else {
                        let mask = match opts
                            .relu_patterns
                            .and_then(|p| p.0.get(li).cloned().flatten())
                        {
                            Some(m) => {
                                if m.shape() != z.shape() {
                                    return Err(Error::invalid(
                                        "replayed ReLU pattern has the wrong shape",
                                    ));
                                }
                                m
                            }
                            None => z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
                        };
                        let r = z.component_mul(&mask);
                        let scale = column(self.get(li, ParamRole::BnScale));
                        let shift = column(self.get(li, ParamRole::BnShift));
                        let y = if training {
                            let (y, cache) = ops::batch_norm_train(&r, &scale, &shift);
                            moments[li] = Some((cache.mean.clone(), cache.var.clone()));
                            tape.bn = Some(cache);
                            y
                        } else {
                            let mean = column(self.get(li, ParamRole::BnMean));
                            let var = column(self.get(li, ParamRole::BnVar));
                            ops::batch_norm_infer(&r, &scale, &shift, &mean, &var)
                        };
                        tape.relu_mask = Some(mask);
                        tape.pre_activation = Some(z);
                        let y = if training && opts.dropout > 0.0 {
                            let keep = 1.0 - opts.dropout;
                            let rng = opts.rng.as_deref_mut().expect("checked above");
                            let drop = DMatrix::from_fn(y.nrows(), y.ncols(), |_, _| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            });
                            let y = y.component_mul(&drop);
                            tape.dropout = Some(drop);
                            y
                        } else {
                            y
                        };
                        shape_of(y)
                    }
                }
            };
            outputs.push(out);
            tapes.push(tape);
            if stop_at_embedding && li == embed_idx {
                break;
            }
        }

        let embeddings = embeddings.expect("embedding layer evaluated");
        let logits = if stop_at_embedding {
            DMatrix::zeros(examples.len(), 0)
        } else {
            outputs.last().expect("non-empty network").matrix().clone()
        };
        let tape = Tape {
            outputs,
            layers: tapes,
            pooling: opts.pooling,
            input_lengths,
            training,
        };
        let out = ForwardOutput {
            logits,
            embeddings,
            tape: None,
            batch_moments: moments,
        };
        Ok((out, tape))
    }

    fn left_of(&self, name: &str) -> usize {
        if name == INPUT {
            0
        } else {
            self.geometry[self.spec.layer_index(name).expect("validated")].left
        }
    }

    /// Runs the linear map of layer `li`; returns `z` and its frame lengths
    /// (`None` at segment level).
    fn linear_forward(
        &self,
        li: usize,
        kind: &LayerKind,
        x: Value,
        tape: &mut LayerTape,
    ) -> Result<(DMatrix<f64>, Option<Vec<usize>>)> {
        let bias = column(self.get(li, ParamRole::Bias));
        match (kind, x) {
            (LayerKind::Dense, x) => {
                let z = ops::affine(x.matrix(), self.get(li, ParamRole::Weight), Some(&bias));
                let lengths = x.lengths().map(<[usize]>::to_vec);
                tape.linear_in = Some(match x {
                    Value::Frames(f) => f.data,
                    Value::Segments(m) => m,
                });
                Ok((z, lengths))
            }
            (LayerKind::Tdnn { context }, Value::Frames(x)) => {
                let s = x.splice(context)?;
                let z = ops::affine(&s.data, self.get(li, ParamRole::Weight), Some(&bias));
                tape.in_lengths = x.lengths;
                tape.linear_in = Some(s.data);
                Ok((z, Some(s.lengths)))
            }
            (LayerKind::FactorizedTdnn { context, .. }, Value::Frames(x)) => {
                let (c1, c2) = ops::split_context(context)?;
                let s1 = x.splice(&c1)?;
                let inner = FrameBatch {
                    data: ops::affine(&s1.data, self.get(li, ParamRole::Factor1), None),
                    lengths: s1.lengths.clone(),
                };
                let s2 = inner.splice(&c2)?;
                let z = ops::affine(&s2.data, self.get(li, ParamRole::Factor2), Some(&bias));
                tape.in_lengths = x.lengths;
                tape.inner_lengths = inner.lengths;
                tape.linear_in = Some(s1.data);
                tape.spliced_inner = Some(s2.data);
                Ok((z, Some(s2.lengths)))
            }
            _ => unreachable!("validated layer level"),
        }
    }

    /// Reverse-mode gradients of a loss given `d loss / d logits`.
    pub fn backward(&self, tape: &Tape, logit_grad: &DMatrix<f64>) -> Result<Gradients> {
        let n = self.spec.layers.len();
        if tape.outputs.len() != n {
            return Err(Error::invalid("tape does not belong to this network"));
        }
        if !tape.training {
            return Err(Error::invalid(
                "backward needs a tape from a training-mode forward",
            ));
        }
        let last = tape.outputs[n - 1].matrix();
        if logit_grad.shape() != last.shape() {
            return Err(Error::Dimension {
                expected: last.len(),
                actual: logit_grad.len(),
                context: "logit gradient",
            });
        }
        let mut grads = self.zero_gradients();
        let mut pending: Vec<Option<DMatrix<f64>>> = vec![None; n];
        pending[n - 1] = Some(logit_grad.clone());

        let accumulate = |pending: &mut Vec<Option<DMatrix<f64>>>, name: &str, g: DMatrix<f64>| {
            if name == INPUT {
                return;
            }
            let idx = self.spec.layer_index(name).expect("validated");
            match &mut pending[idx] {
                Some(acc) => *acc += g,
                slot => *slot = Some(g),
            }
        };

        for li in (0..n).rev() {
            let Some(mut g) = pending[li].take() else {
                continue;
            };
            let layer = &self.spec.layers[li];
            let lt = &tape.layers[li];
            match &layer.kind {
                LayerKind::Concat => {
                    let mut col = 0;
                    for name in &layer.inputs {
                        let w = tape_output(self, tape, name).matrix().ncols();
                        accumulate(&mut pending, name, g.columns(col, w).into_owned());
                        col += w;
                    }
                }
                LayerKind::StatsPool => {
                    if layer.inputs[0] == INPUT {
                        continue;
                    }
                    let Value::Frames(frames) = tape_output(self, tape, &layer.inputs[0]) else {
                        unreachable!("validated")
                    };
                    let span = self.geometry[li].span();
                    let d = pool_backward(frames, &tape.input_lengths, span, tape.pooling, &g)?;
                    accumulate(&mut pending, &layer.inputs[0], d);
                }
                LayerKind::Tdnn { .. } | LayerKind::FactorizedTdnn { .. } | LayerKind::Dense => {
                    if layer.activation {
                        if let Some(drop) = &lt.dropout {
                            g.component_mul_assign(drop);
                        }
                        let cache = lt
                            .bn
                            .as_ref()
                            .expect("training tape holds batch-norm cache");
                        let scale = column(self.get(li, ParamRole::BnScale));
                        let (ds, dsh, dr) = ops::batch_norm_backward(cache, &scale, &g);
                        self.store(
                            &mut grads,
                            li,
                            ParamRole::BnScale,
                            DMatrix::from_column_slice(ds.len(), 1, ds.as_slice()),
                        );
                        self.store(
                            &mut grads,
                            li,
                            ParamRole::BnShift,
                            DMatrix::from_column_slice(dsh.len(), 1, dsh.as_slice()),
                        );
                        g = dr.component_mul(lt.relu_mask.as_ref().expect("mask recorded"));
                    }
                    let linear_in = lt.linear_in.as_ref().expect("linear input recorded");
                    let dx = match &layer.kind {
                        LayerKind::Dense => {
                            let (dw, db, dx) = ops::affine_backward(
                                linear_in,
                                self.get(li, ParamRole::Weight),
                                &g,
                            );
                            self.store(&mut grads, li, ParamRole::Weight, dw);
                            self.store(
                                &mut grads,
                                li,
                                ParamRole::Bias,
                                DMatrix::from_column_slice(db.len(), 1, db.as_slice()),
                            );
                            dx
                        }
                        LayerKind::Tdnn { context } => {
                            let (dw, db, ds) = ops::affine_backward(
                                linear_in,
                                self.get(li, ParamRole::Weight),
                                &g,
                            );
                            self.store(&mut grads, li, ParamRole::Weight, dw);
                            self.store(
                                &mut grads,
                                li,
                                ParamRole::Bias,
                                DMatrix::from_column_slice(db.len(), 1, db.as_slice()),
                            );
                            let out_lengths =
                                tape.outputs[li].lengths().expect("frame level").to_vec();
                            FrameBatch {
                                data: ds,
                                lengths: out_lengths,
                            }
                            .unsplice(context, &lt.in_lengths)
                            .data
                        }
                        LayerKind::FactorizedTdnn { context, .. } => {
                            let (c1, c2) = ops::split_context(context)?;
                            let s2 = lt.spliced_inner.as_ref().expect("bottleneck recorded");
                            let (df2, db, ds2) =
                                ops::affine_backward(s2, self.get(li, ParamRole::Factor2), &g);
                            self.store(&mut grads, li, ParamRole::Factor2, df2);
                            self.store(
                                &mut grads,
                                li,
                                ParamRole::Bias,
                                DMatrix::from_column_slice(db.len(), 1, db.as_slice()),
                            );
                            let out_lengths =
                                tape.outputs[li].lengths().expect("frame level").to_vec();
                            let dh = FrameBatch {
                                data: ds2,
                                lengths: out_lengths,
                            }
                            .unsplice(&c2, &lt.inner_lengths);
                            let (df1, _, ds1) = ops::affine_backward(
                                linear_in,
                                self.get(li, ParamRole::Factor1),
                                &dh.data,
                            );
                            self.store(&mut grads, li, ParamRole::Factor1, df1);
                            FrameBatch {
                                data: ds1,
                                lengths: lt.inner_lengths.clone(),
                            }
                            .unsplice(&c1, &lt.in_lengths)
                            .data
                        }
                        _ => unreachable!(),
                    };
                    match &layer.skip {
                        None => accumulate(&mut pending, &layer.inputs[0], dx),
                        Some(skip) => {
                            let main_lengths = lt_main_lengths(self, tape, &layer.inputs[0]);
                            let shift = self.left_of(&layer.inputs[0]) - self.left_of(&skip.from);
                            let (d_main, d_skip) = match skip.mode {
                                SkipMode::Sum => (dx.clone(), dx),
                                SkipMode::ConcatProject => {
                                    let cat = lt.skip_cat.as_ref().expect("concat recorded");
                                    let proj = self.get(li, ParamRole::SkipProjection);
                                    let (dp, _, dcat) = ops::affine_backward(cat, proj, &dx);
                                    self.store(&mut grads, li, ParamRole::SkipProjection, dp);
                                    let d = proj.nrows();
                                    (
                                        dcat.columns(0, d).into_owned(),
                                        dcat.columns(d, d).into_owned(),
                                    )
                                }
                            };
                            accumulate(&mut pending, &layer.inputs[0], d_main);
                            let src = tape_output(self, tape, &skip.from);
                            let src_lengths = src.lengths().expect("frame level").to_vec();
                            let mut full =
                                DMatrix::zeros(src.matrix().nrows(), src.matrix().ncols());
                            FrameBatch::uncrop_add(
                                &mut full,
                                &src_lengths,
                                &d_skip,
                                shift,
                                &main_lengths,
                            );
                            accumulate(&mut pending, &skip.from, full);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    fn store(&self, grads: &mut Gradients, layer: usize, role: ParamRole, g: DMatrix<f64>) {
        let i = self.params[layer]
            .iter()
            .position(|p| p.role == role)
            .expect("role present");
        grads.0[layer][i] = g;
    }

    const MAGIC: &'static [u8; 4] = b"XVEC";
    const VERSION: u32 = 1;

    /// `XVEC`, u32 version, spec text, then one length-prefixed f64 blob per
    /// layer holding its parameters row-major in role order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_magic(w, Self::MAGIC)?;
        container::write_u32(w, Self::VERSION)?;
        container::write_text(w, &self.spec.to_string())?;
        for params in &self.params {
            let mut blob = Vec::new();
            for p in params {
                let m = &p.value;
                for r in 0..m.nrows() {
                    blob.extend(m.row(r).iter().copied());
                }
            }
            container::write_f64_blob(w, &blob)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        container::expect_magic(r, Self::MAGIC)?;
        let version = container::read_u32(r)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let spec: NetworkSpec = container::read_text(r)?.parse()?;
        let mut net = Self::skeleton(spec)?;
        for (li, params) in net.params.iter_mut().enumerate() {
            let blob = container::read_f64_blob(r)?;
            let expected: usize = params.iter().map(|p| p.value.len()).sum();
            if blob.len() != expected {
                return Err(Error::Format(format!(
                    "layer {li} holds {} values, expected {expected}",
                    blob.len()
                )));
            }
            let mut at = 0;
            for p in params.iter_mut() {
                let (rows, cols) = p.value.shape();
                p.value = DMatrix::from_row_slice(rows, cols, &blob[at..at + rows * cols]);
                at += rows * cols;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn tape_output<'t>(net: &Network, tape: &'t Tape, name: &str) -> &'t Value {
    &tape.outputs[net.spec.layer_index(name).expect("validated")]
}

fn lt_main_lengths(net: &Network, tape: &Tape, name: &str) -> Vec<usize> {
    if name == INPUT {
        tape.input_lengths.clone()
    } else {
        tape_output(net, tape, name)
            .lengths()
            .expect("frame level")
            .to_vec()
    }
}

/// Window row ranges `[start, start + rows)` of one example's producer output.
fn windows(input_len: usize, span: usize, pooling: Pooling) -> Result<Vec<(usize, usize)>> {
    let valid = input_len - span;
    match pooling {
        Pooling::Whole => Ok(vec![(0, valid)]),
        Pooling::Windows { len, stride } => {
            if len <= span || stride == 0 {
                return Err(Error::invalid(format!(
                    "pooling window of {len} frames (stride {stride}) cannot cover a span of {span}"
                )));
            }
            if input_len < len {
                return Err(Error::invalid(format!(
                    "example of {input_len} frames is shorter than the {len}-frame pooling window"
                )));
            }
            Ok((0..)
                .map(|k| k * stride)
                .take_while(|a| a + len <= input_len)
                .map(|a| (a, len - span))
                .collect())
        }
    }
}

fn pool_forward(
    frames: &FrameBatch,
    input_lengths: &[usize],
    span: usize,
    pooling: Pooling,
) -> Result<DMatrix<f64>> {
    let d = frames.data.ncols();
    let mut out = DMatrix::zeros(frames.lengths.len(), 2 * d);
    for (e, offset) in frames.offsets().into_iter().enumerate() {
        let wins = windows(input_lengths[e], span, pooling)?;
        let mut acc = DVector::zeros(2 * d);
        for &(start, rows) in &wins {
            let block = frames
                .data
                .view((offset + start, 0), (rows, d))
                .into_owned();
            acc += ops::stats_pool(&block);
        }
        acc /= wins.len() as f64;
        out.row_mut(e).copy_from(&acc.transpose());
    }
    Ok(out)
}

fn pool_backward(
    frames: &FrameBatch,
    input_lengths: &[usize],
    span: usize,
    pooling: Pooling,
    grad: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let d = frames.data.ncols();
    let mut out = DMatrix::zeros(frames.data.nrows(), d);
    for (e, offset) in frames.offsets().into_iter().enumerate() {
        let wins = windows(input_lengths[e], span, pooling)?;
        let g = grad.row(e).transpose() / wins.len() as f64;
        for &(start, rows) in &wins {
            let block = frames
                .data
                .view((offset + start, 0), (rows, d))
                .into_owned();
            let pooled = ops::stats_pool(&block);
            let db = ops::stats_pool_backward(&block, &pooled, &g);
            let mut view = out.view_mut((offset + start, 0), (rows, d));
            view += db;
        }
    }
    Ok(out)
}
