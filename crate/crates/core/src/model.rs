//! Layer and model containers shared by the transforms, the FLOPs model and
//! serialization.

use crate::complements::DecomposedPair;
use crate::convref::{conv_decoupled, conv_regular, ConvSpec};
use crate::decouple::{ConvKernel, DecoupledKernel};
use crate::error::{Error, Result};
use crate::tensor::{Tensor3, Tensor4};

/// A single convolution, either regular or decoupled.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Conv(ConvKernel),
    Decoupled(DecoupledKernel),
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Conv(k) => k.name(),
            Stage::Decoupled(d) => d.name(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        match self {
            Stage::Conv(k) => k.shape(),
            Stage::Decoupled(d) => d.source_shape(),
        }
    }

    pub fn spec(&self) -> ConvSpec {
        match self {
            Stage::Conv(k) => k.spec(),
            Stage::Decoupled(d) => d.spec(),
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            Stage::Conv(k) => k.bias(),
            Stage::Decoupled(d) => d.bias(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Conv(_) => "conv",
            Stage::Decoupled(_) => "decoupled",
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        match self {
            Stage::Conv(k) => conv_regular(x, k),
            Stage::Decoupled(d) => conv_decoupled(x, d),
        }
    }

    pub fn output_hw(&self, in_hw: (usize, usize)) -> Result<(usize, usize)> {
        let [_, _, k_h, k_w] = self.shape();
        self.spec()
            .output_hw(in_hw, (k_h, k_w))
            .map_err(|e| e.in_layer(self.name()))
    }

    /// Dense kernel computing the same function.
    pub fn effective_weight(&self) -> Tensor4 {
        match self {
            Stage::Conv(k) => k.weight().clone(),
            Stage::Decoupled(d) => d.reconstruct(),
        }
    }

    pub fn to_conv(&self) -> ConvKernel {
        match self {
            Stage::Conv(k) => k.clone(),
            Stage::Decoupled(d) => d.to_conv(),
        }
    }
}

/// One entry of a model: a regular conv, a decoupled conv, or a
/// two-stage decomposition.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvKernel),
    Decoupled(DecoupledKernel),
    Pair(DecomposedPair),
}

impl From<Stage> for Layer {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Conv(k) => Layer::Conv(k),
            Stage::Decoupled(d) => Layer::Decoupled(d),
        }
    }
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(k) => k.name(),
            Layer::Decoupled(d) => d.name(),
            Layer::Pair(p) => p.name(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Decoupled(_) => "decoupled",
            Layer::Pair(_) => "pair",
        }
    }

    /// `(n_o, n_i, k_h, k_w)` of the regular convolution this layer implements.
    pub fn shape(&self) -> [usize; 4] {
        match self {
            Layer::Conv(k) => k.shape(),
            Layer::Decoupled(d) => d.source_shape(),
            Layer::Pair(p) => p.source_shape(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.shape()[0]
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        match self {
            Layer::Conv(k) => conv_regular(x, k),
            Layer::Decoupled(d) => conv_decoupled(x, d),
            Layer::Pair(p) => p.forward(x),
        }
    }

    pub fn output_hw(&self, in_hw: (usize, usize)) -> Result<(usize, usize)> {
        match self {
            Layer::Conv(k) => k
                .spec()
                .output_hw(in_hw, k.kernel_hw())
                .map_err(|e| e.in_layer(k.name())),
            Layer::Decoupled(d) => d
                .spec()
                .output_hw(in_hw, (d.source_shape()[2], d.source_shape()[3]))
                .map_err(|e| e.in_layer(d.name())),
            Layer::Pair(p) => {
                let mid = p.first().output_hw(in_hw)?;
                p.second().output_hw(mid)
            }
        }
    }

    /// The equivalent regular convolution.
    pub fn to_conv(&self) -> ConvKernel {
        match self {
            Layer::Conv(k) => k.clone(),
            Layer::Decoupled(d) => d.to_conv(),
            Layer::Pair(p) => p.to_conv(),
        }
    }
}

/// A layer plus the manifest's optional input overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayer {
    pub layer: Layer,
    /// Declares the layer's input channel count explicitly, exempting it from
    /// sequential channel chaining.
    pub input_channels: Option<usize>,
    /// Spatial size of the layer's input when it does not follow from the
    /// previous layer's output (pooling, branches).
    pub input_hw: Option<(usize, usize)>,
}

impl From<Layer> for ModelLayer {
    fn from(layer: Layer) -> Self {
        Self {
            layer,
            input_channels: None,
            input_hw: None,
        }
    }
}

/// An ordered list of convolution layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    /// `(C, H, W)` of the network input.
    pub input_resolution: [usize; 3],
    pub layers: Vec<ModelLayer>,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        input_resolution: [usize; 3],
        layers: Vec<ModelLayer>,
    ) -> Self {
        Self {
            name: name.into(),
            input_resolution,
            layers,
        }
    }

    pub fn sequential(
        name: impl Into<String>,
        input_resolution: [usize; 3],
        layers: Vec<Layer>,
    ) -> Self {
        Self::new(
            name,
            input_resolution,
            layers.into_iter().map(Into::into).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Input spatial size of every layer, propagated from the network input
    /// unless a layer overrides it.
    pub fn layer_input_hw(&self) -> Result<Vec<(usize, usize)>> {
        let mut current = (self.input_resolution[1], self.input_resolution[2]);
        let mut out = Vec::with_capacity(self.layers.len());
        for entry in &self.layers {
            let in_hw = entry.input_hw.unwrap_or(current);
            out.push(in_hw);
            current = entry.layer.output_hw(in_hw)?;
        }
        Ok(out)
    }

    /// Checks that channel counts chain from layer to layer.
    pub fn check_channels(&self) -> Result<()> {
        let mut available = self.input_resolution[0];
        for entry in &self.layers {
            let n_i = entry.layer.in_channels();
            let expected = entry.input_channels.unwrap_or(available);
            if n_i != expected {
                return Err(Error::Shape(format!(
                    "layer `{}` expects {n_i} input channels but receives {expected}",
                    entry.layer.name()
                )));
            }
            available = entry.layer.out_channels();
        }
        Ok(())
    }

    /// Same model with the layers replaced, keeping the input overrides.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Model> {
        if layers.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} layers, got {}",
                self.layers.len(),
                layers.len()
            )));
        }
        Ok(Model {
            name: self.name.clone(),
            input_resolution: self.input_resolution,
            layers: self
                .layers
                .iter()
                .zip(layers)
                .map(|(old, layer)| ModelLayer {
                    layer,
                    input_channels: old.input_channels,
                    input_hw: old.input_hw,
                })
                .collect(),
        })
    }
}
