//! Data-free channel and spatial decompositions, and a pipeline that chains
//! them with decoupling.
//!
//! Both decompositions are truncated SVDs of a reshaped weight matrix, the
//! Frobenius-optimal choice when no calibration data is available.
//!
//! - Channel: `W` as `n_o × (n_i·k_h·k_w)` becomes a `(d, n_i, k_h, k_w)`
//!   conv followed by a `(n_o, d, 1, 1)` conv.
//! - Spatial: `W` as `(n_i·k_h) × (k_w·n_o)` becomes a `(d, n_i, k_h, 1)`
//!   vertical conv followed by a `(n_o, d, 1, k_w)` horizontal conv.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convref::ConvSpec;
use crate::decouple::{decouple_with_policy, ConvKernel, Ordering, RankPolicy};
use crate::error::{Error, Result};
use crate::flopsmodel::{compare_models, FlopsReport};
use crate::linalg::{thin_svd, ThinSvd};
use crate::model::{Layer, Model, Stage};
use crate::tensor::{relative_error, Matrix, Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decomposition {
    Channel,
    Spatial,
}

impl fmt::Display for Decomposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decomposition::Channel => "channel",
            Decomposition::Spatial => "spatial",
        })
    }
}

/// A layer factored into two consecutive convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedPair {
    name: String,
    kind: Decomposition,
    first: Stage,
    second: Stage,
}

impl DecomposedPair {
    pub fn new(
        name: impl Into<String>,
        kind: Decomposition,
        first: Stage,
        second: Stage,
    ) -> Result<Self> {
        let name = name.into();
        let [d, _, _, f_w] = first.shape();
        let [_, s_i, s_h, s_w] = second.shape();
        let bad = |detail: String| Err(Error::Shape(format!("pair `{name}`: {detail}")));
        if s_i != d {
            return bad(format!(
                "second stage expects {s_i} channels, first produces {d}"
            ));
        }
        if first.bias().is_some() {
            return bad("bias must sit on the second stage".into());
        }
        match kind {
            Decomposition::Channel => {
                if (s_h, s_w) != (1, 1) {
                    return bad(format!(
                        "channel pair needs a 1x1 second stage, got {s_h}x{s_w}"
                    ));
                }
                if second.spec() != ConvSpec::default() {
                    return bad("1x1 second stage must have stride 1 and no padding".into());
                }
            }
            Decomposition::Spatial => {
                let f_h = first.shape()[2];
                if f_w != 1 || s_h != 1 {
                    return bad(format!(
                        "spatial pair needs kx1 then 1xk stages, got {f_h}x{f_w} then {s_h}x{s_w}"
                    ));
                }
                let (fs, ss) = (first.spec(), second.spec());
                if fs.stride.1 != 1 || fs.padding.1 != 0 || ss.stride.0 != 1 || ss.padding.0 != 0 {
                    return bad(
                        "vertical stage must not stride/pad horizontally and vice versa".into(),
                    );
                }
            }
        }
        Ok(Self {
            name,
            kind,
            first,
            second,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> Decomposition {
        self.kind
    }

    /// Intermediate channel count `d`.
    pub fn rank(&self) -> usize {
        self.first.shape()[0]
    }

    pub fn first(&self) -> &Stage {
        &self.first
    }

    pub fn second(&self) -> &Stage {
        &self.second
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.second.bias()
    }

    /// Geometry of the original layer.
    pub fn spec(&self) -> ConvSpec {
        match self.kind {
            Decomposition::Channel => self.first.spec(),
            Decomposition::Spatial => {
                let (f, s) = (self.first.spec(), self.second.spec());
                ConvSpec::new((f.stride.0, s.stride.1), (f.padding.0, s.padding.1))
            }
        }
    }

    pub fn source_shape(&self) -> [usize; 4] {
        let [_, n_i, k_h, _] = self.first.shape();
        let [n_o, _, _, k_w] = self.second.shape();
        match self.kind {
            Decomposition::Channel => [n_o, n_i, k_h, self.first.shape()[3]],
            Decomposition::Spatial => [n_o, n_i, k_h, k_w],
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        let mid = self.first.forward(x)?;
        self.second.forward(&mid)
    }

    /// Composed dense kernel.
    pub fn effective_weight(&self) -> Tensor4 {
        let f = self.first.effective_weight();
        let s = self.second.effective_weight();
        let d = self.rank();
        let shape = self.source_shape();
        match self.kind {
            Decomposition::Channel => Tensor4::from_fn(shape, |[o, i, h, w]| {
                (0..d)
                    .map(|j| s.get([o, j, 0, 0]) * f.get([j, i, h, w]))
                    .sum()
            }),
            Decomposition::Spatial => Tensor4::from_fn(shape, |[o, i, h, w]| {
                (0..d)
                    .map(|j| f.get([j, i, h, 0]) * s.get([o, j, 0, w]))
                    .sum()
            }),
        }
    }

    pub fn to_conv(&self) -> ConvKernel {
        ConvKernel::new(
            self.name.clone(),
            self.effective_weight(),
            self.bias().map(<[f64]>::to_vec),
            self.spec(),
        )
        .expect("pair geometry was validated on construction")
    }
}

/// `W` reshaped to `n_o × (n_i·k_h·k_w)`.
pub fn channel_matrix(k: &ConvKernel) -> Matrix {
    let [n_o, n_i, k_h, k_w] = k.shape();
    Matrix::new(n_o, n_i * k_h * k_w, k.weight().data().to_vec()).expect("sizes agree")
}

/// `W` reshaped to `(n_i·k_h) × (k_w·n_o)` with entry `((i, h), (w, o)) = W[o, i, h, w]`.
pub fn spatial_matrix(k: &ConvKernel) -> Matrix {
    let [n_o, n_i, k_h, k_w] = k.shape();
    let mut m = Matrix::zeros(n_i * k_h, k_w * n_o);
    for o in 0..n_o {
        for i in 0..n_i {
            for h in 0..k_h {
                for w in 0..k_w {
                    m.set(i * k_h + h, w * n_o + o, k.weight().get([o, i, h, w]));
                }
            }
        }
    }
    m
}

fn check_dim(k: &ConvKernel, d: usize, max: usize, what: &str) -> Result<()> {
    if d == 0 || d > max {
        return Err(
            Error::InvalidArgument(format!("{what} rank {d} outside 1..={max}")).in_layer(k.name()),
        );
    }
    Ok(())
}

fn svd_of(k: &ConvKernel, m: &Matrix) -> Result<ThinSvd> {
    thin_svd(m).map_err(|e| e.in_layer(k.name()))
}

/// Largest valid channel-decomposition rank, `min(n_o, n_i·k_h·k_w)`.
pub fn channel_max_rank(k: &ConvKernel) -> usize {
    let [n_o, n_i, k_h, k_w] = k.shape();
    n_o.min(n_i * k_h * k_w)
}

/// Largest valid spatial-decomposition rank, `min(n_i·k_h, k_w·n_o)`.
pub fn spatial_max_rank(k: &ConvKernel) -> usize {
    let [n_o, n_i, k_h, k_w] = k.shape();
    (n_i * k_h).min(k_w * n_o)
}

pub fn channel_decompose(k: &ConvKernel, d: usize) -> Result<DecomposedPair> {
    check_dim(k, d, channel_max_rank(k), "channel decomposition")?;
    let svd = svd_of(k, &channel_matrix(k))?;
    channel_pair_from_svd(k, &svd, d)
}

fn channel_pair_from_svd(k: &ConvKernel, svd: &ThinSvd, d: usize) -> Result<DecomposedPair> {
    let [n_o, n_i, k_h, k_w] = k.shape();
    let area = k_h * k_w;
    let r = svd.rank();
    let first = Tensor4::from_fn([d, n_i, k_h, k_w], |[j, i, h, w]| {
        if j < r {
            svd.v().get(i * area + h * k_w + w, j)
        } else {
            0.0
        }
    });
    let second = Tensor4::from_fn([n_o, d, 1, 1], |[o, j, _, _]| {
        if j < r {
            svd.u().get(o, j) * svd.sigma()[j]
        } else {
            0.0
        }
    });
    DecomposedPair::new(
        k.name(),
        Decomposition::Channel,
        Stage::Conv(ConvKernel::new(
            format!("{}.first", k.name()),
            first,
            None,
            k.spec(),
        )?),
        Stage::Conv(ConvKernel::new(
            format!("{}.second", k.name()),
            second,
            k.bias().map(<[f64]>::to_vec),
            ConvSpec::default(),
        )?),
    )
}

pub fn spatial_decompose(k: &ConvKernel, d: usize) -> Result<DecomposedPair> {
    check_dim(k, d, spatial_max_rank(k), "spatial decomposition")?;
    let svd = svd_of(k, &spatial_matrix(k))?;
    spatial_pair_from_svd(k, &svd, d)
}

fn spatial_pair_from_svd(k: &ConvKernel, svd: &ThinSvd, d: usize) -> Result<DecomposedPair> {
    let [n_o, n_i, k_h, k_w] = k.shape();
    let r = svd.rank();
    let spec = k.spec();
    let vertical = Tensor4::from_fn([d, n_i, k_h, 1], |[j, i, h, _]| {
        if j < r {
            svd.u().get(i * k_h + h, j)
        } else {
            0.0
        }
    });
    let horizontal = Tensor4::from_fn([n_o, d, 1, k_w], |[o, j, _, w]| {
        if j < r {
            svd.sigma()[j] * svd.v().get(w * n_o + o, j)
        } else {
            0.0
        }
    });
    DecomposedPair::new(
        k.name(),
        Decomposition::Spatial,
        Stage::Conv(ConvKernel::new(
            format!("{}.first", k.name()),
            vertical,
            None,
            ConvSpec::new((spec.stride.0, 1), (spec.padding.0, 0)),
        )?),
        Stage::Conv(ConvKernel::new(
            format!("{}.second", k.name()),
            horizontal,
            k.bias().map(<[f64]>::to_vec),
            ConvSpec::new((1, spec.stride.1), (0, spec.padding.1)),
        )?),
    )
}

/// Choice of intermediate rank `d` for a channel or spatial decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimPolicy {
    Fixed(usize),
    /// Smallest `d` keeping at least this fraction of the reshaped matrix's
    /// squared singular-value mass.
    Energy(f64),
}

impl fmt::Display for DimPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimPolicy::Fixed(d) => write!(f, "fixed:{d}"),
            DimPolicy::Energy(tau) => write!(f, "energy:{tau}"),
        }
    }
}

impl FromStr for DimPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "invalid rank `{s}` (expected fixed:D or energy:TAU)"
            ))
        };
        match s.split_once(':') {
            Some(("fixed", d)) => match d.parse() {
                Ok(0) | Err(_) => Err(bad()),
                Ok(d) => Ok(DimPolicy::Fixed(d)),
            },
            Some(("energy", tau)) => {
                let tau: f64 = tau.parse().map_err(|_| bad())?;
                if tau > 0.0 && tau <= 1.0 {
                    Ok(DimPolicy::Energy(tau))
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}

/// Resolves `policy` against a spectrum; `max` caps the result.
pub fn select_dim(sigma: &[f64], policy: DimPolicy, max: usize) -> usize {
    match policy {
        DimPolicy::Fixed(d) => d,
        DimPolicy::Energy(tau) => {
            let total: f64 = sigma.iter().map(|s| s * s).sum();
            if total == 0.0 {
                return 1;
            }
            let mut acc = 0.0;
            for (k, s) in sigma.iter().enumerate() {
                acc += s * s;
                if acc / total >= tau {
                    return (k + 1).min(max);
                }
            }
            sigma.len().clamp(1, max)
        }
    }
}

/// One transform applied to every layer. Per-layer vectors must have one
/// entry per model layer; `None` leaves that layer untouched.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    ChannelDecompose(Vec<Option<DimPolicy>>),
    SpatialDecompose(Vec<Option<DimPolicy>>),
    Decouple {
        ordering: Ordering,
        policies: Vec<Option<RankPolicy>>,
    },
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::ChannelDecompose(_) => "channel",
            Step::SpatialDecompose(_) => "spatial",
            Step::Decouple { .. } => "decouple",
        }
    }

    fn len(&self) -> usize {
        match self {
            Step::ChannelDecompose(v) | Step::SpatialDecompose(v) => v.len(),
            Step::Decouple { policies, .. } => policies.len(),
        }
    }

    /// Decouple every layer with the same policy.
    pub fn decouple_all(ordering: Ordering, policy: RankPolicy, layers: usize) -> Self {
        Step::Decouple {
            ordering,
            policies: vec![Some(policy); layers],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pipeline {
    pub steps: Vec<Step>,
    /// Leave the first layer untouched by every step.
    pub skip_first: bool,
}

/// Outcome of one step on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub layer: String,
    pub step: String,
    /// Chosen rank, e.g. `d=12` or `T=4`.
    pub detail: String,
    /// `‖W_after − W_before‖_F / ‖W_before‖_F` on the effective kernels.
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: Model,
    pub report: FlopsReport,
    pub log: Vec<StepRecord>,
}

/// Applies the steps left to right. Layers are transformed independently
/// (in parallel) and reassembled in order.
pub fn apply_pipeline(model: &Model, pipeline: &Pipeline) -> Result<PipelineOutput> {
    for step in &pipeline.steps {
        if step.len() != model.len() {
            return Err(Error::InvalidArgument(format!(
                "{} step has {} per-layer entries for {} layers",
                step.name(),
                step.len(),
                model.len()
            )));
        }
    }
    let results = model
        .layers
        .par_iter()
        .enumerate()
        .map(|(idx, entry)| {
            let mut layer = entry.layer.clone();
            let mut log = Vec::new();
            if pipeline.skip_first && idx == 0 {
                return Ok((layer, log));
            }
            for step in &pipeline.steps {
                let before = layer.to_conv();
                let (next, detail) = match apply_step(&layer, step, idx)? {
                    Some(x) => x,
                    None => continue,
                };
                let after = next.to_conv();
                log.push(StepRecord {
                    layer: layer.name().to_string(),
                    step: step.name().to_string(),
                    detail,
                    relative_error: relative_error(after.weight().data(), before.weight().data()),
                });
                layer = next;
            }
            Ok((layer, log))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut layers = Vec::with_capacity(results.len());
    let mut log = Vec::new();
    for (layer, records) in results {
        layers.push(layer);
        log.extend(records);
    }
    let transformed = model.with_layers(layers)?;
    let report = compare_models(model, &transformed)?;
    Ok(PipelineOutput {
        model: transformed,
        report,
        log,
    })
}

fn apply_step(layer: &Layer, step: &Step, idx: usize) -> Result<Option<(Layer, String)>> {
    let reject = |what: &str| {
        Err(
            Error::InvalidArgument(format!("cannot apply {} to a {what} layer", step.name()))
                .in_layer(layer.name()),
        )
    };
    match step {
        Step::ChannelDecompose(params) | Step::SpatialDecompose(params) => {
            let Some(policy) = params[idx] else {
                return Ok(None);
            };
            let Layer::Conv(k) = layer else {
                return reject(layer.kind());
            };
            let channel = matches!(step, Step::ChannelDecompose(_));
            let (m, max) = if channel {
                (channel_matrix(k), channel_max_rank(k))
            } else {
                (spatial_matrix(k), spatial_max_rank(k))
            };
            let svd = svd_of(k, &m)?;
            let d = select_dim(svd.sigma(), policy, max);
            check_dim(k, d, max, step.name())?;
            let pair = if channel {
                channel_pair_from_svd(k, &svd, d)?
            } else {
                spatial_pair_from_svd(k, &svd, d)?
            };
            Ok(Some((Layer::Pair(pair), format!("d={d}"))))
        }
        Step::Decouple { ordering, policies } => {
            let Some(policy) = policies[idx] else {
                return Ok(None);
            };
            match layer {
                Layer::Conv(k) if k.is_pointwise() => Ok(None),
                Layer::Conv(k) => {
                    let (dk, _) = decouple_with_policy(k, *ordering, policy)?;
                    let detail = format!("T={}", dk.rank());
                    Ok(Some((Layer::Decoupled(dk), detail)))
                }
                Layer::Pair(p) => {
                    let mut details = Vec::new();
                    let mut stage = |s: &Stage, tag: &str| -> Result<Stage> {
                        match s {
                            Stage::Conv(k) if !k.is_pointwise() => {
                                let (dk, _) = decouple_with_policy(k, *ordering, policy)?;
                                details.push(format!("{tag}:T={}", dk.rank()));
                                Ok(Stage::Decoupled(dk))
                            }
                            other => Ok(other.clone()),
                        }
                    };
                    let first = stage(p.first(), "first")?;
                    let second = stage(p.second(), "second")?;
                    if details.is_empty() {
                        return Ok(None);
                    }
                    let pair = DecomposedPair::new(p.name(), p.kind(), first, second)?;
                    Ok(Some((Layer::Pair(pair), details.join(","))))
                }
                Layer::Decoupled(_) => reject("decoupled"),
            }
        }
    }
}
