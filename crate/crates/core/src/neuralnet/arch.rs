use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NnError;

/// One convolution stage: square kernels, zero "same" padding of
/// `kernel / 2`, ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_side(&self, input_side: usize) -> usize {
        (input_side + 2 * self.padding() - self.kernel) / self.stride + 1
    }
}

/// Layer layout of a network: square single-channel image in, a stack of
/// convolutions, flatten, append `extra_features`, dense layers (ReLU on all
/// but the last, which is linear).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_side: usize,
    pub conv: Vec<ConvSpec>,
    pub extra_features: usize,
    pub dense: Vec<usize>,
}

impl Architecture {
    /// The crowd-navigation network: three stride-2 5×5 convolutions with 8,
    /// 16 and 32 filters on a 64×64 map, then dense 128 → 32 → 2 over the
    /// 2048 flattened features plus `(sin θ, cos θ)`.
    pub fn crowd_cnn() -> Self {
        Self {
            input_side: 64,
            conv: vec![
                ConvSpec { filters: 8, kernel: 5, stride: 2 },
                ConvSpec { filters: 16, kernel: 5, stride: 2 },
                ConvSpec { filters: 32, kernel: 5, stride: 2 },
            ],
            extra_features: 2,
            dense: vec![128, 32, 2],
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.input_side == 0 {
            return bad("input side must be positive".into());
        }
        let mut side = self.input_side;
        for (i, c) in self.conv.iter().enumerate() {
            if c.filters == 0 || c.kernel == 0 || c.stride == 0 || c.kernel % 2 == 0 {
                return bad(format!("conv{} needs positive filters/stride and an odd kernel", i + 1));
            }
            side = c.output_side(side);
        }
        if side == 0 {
            return bad("convolutions shrink the map to nothing".into());
        }
        if self.dense.is_empty() || self.dense.contains(&0) {
            return bad("dense layer sizes must be positive and non-empty".into());
        }
        Ok(())
    }

    pub fn input_cells(&self) -> usize {
        self.input_side * self.input_side
    }

    pub fn outputs(&self) -> usize {
        *self.dense.last().expect("validated")
    }

    /// `(in_channels, in_side, out_side)` of every convolution.
    pub fn conv_geometry(&self) -> Vec<(usize, usize, usize)> {
        let mut channels = 1;
        let mut side = self.input_side;
        self.conv
            .iter()
            .map(|c| {
                let out = c.output_side(side);
                let g = (channels, side, out);
                channels = c.filters;
                side = out;
                g
            })
            .collect()
    }

    /// Flattened convolution features (before the extra features).
    pub fn flat_features(&self) -> usize {
        match (self.conv.last(), self.conv_geometry().last()) {
            (Some(c), Some(&(_, _, side))) => c.filters * side * side,
            _ => self.input_cells(),
        }
    }

    pub fn layer_count(&self) -> usize {
        self.conv.len() + self.dense.len()
    }

    pub fn layer_name(&self, index: usize) -> String {
        if index < self.conv.len() {
            format!("conv{}", index + 1)
        } else {
            format!("dense{}", index - self.conv.len() + 1)
        }
    }

    /// `(weight shape, bias shape, fan_in)` per layer. Convolution weights
    /// are `[filters, channels, k, k]`; dense weights are `[in, out]`.
    pub fn layer_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>, usize)> {
        let mut shapes = Vec::with_capacity(self.layer_count());
        for (c, (ch, _, _)) in self.conv.iter().zip(self.conv_geometry()) {
            shapes.push((
                vec![c.filters, ch, c.kernel, c.kernel],
                vec![c.filters],
                ch * c.kernel * c.kernel,
            ));
        }
        let mut width = self.flat_features() + self.extra_features;
        for &out in &self.dense {
            shapes.push((vec![width, out], vec![out], width));
            width = out;
        }
        shapes
    }
}

/// Weights and biases of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All parameters of a network with a given [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    arch: Architecture,
    layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self, NnError> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(w, b, _)| LayerParams {
                weights: Tensor::zeros(&w),
                bias: Tensor::zeros(&b),
            })
            .collect();
        Ok(Self { arch, layers })
    }

    /// Weights uniform in `±√(6 / fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fans: Vec<usize> = params.arch.layer_shapes().iter().map(|s| s.2).collect();
        for (layer, fan_in) in params.layers.iter_mut().zip(fans) {
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in layer.weights.data_mut() {
                *w = T::lit(rng.random_range(-limit..limit));
            }
        }
        Ok(params)
    }

    pub fn from_layers(arch: Architecture, layers: Vec<LayerParams<T>>) -> Result<Self, NnError> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(NnError::Shape {
                layer: "network".into(),
                detail: format!("{} layers for an architecture with {}", layers.len(), shapes.len()),
            });
        }
        for (i, (l, (w, b, _))) in layers.iter().zip(&shapes).enumerate() {
            if l.weights.shape() != w.as_slice() || l.bias.shape() != b.as_slice() {
                return Err(NnError::Shape {
                    layer: arch.layer_name(i),
                    detail: format!(
                        "expected {w:?}/{b:?}, got {:?}/{:?}",
                        l.weights.shape(),
                        l.bias.shape()
                    ),
                });
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.all_finite() && l.bias.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Every scalar parameter in layer order (weights then bias per layer).
    pub fn flat_values(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    pub(crate) fn value_mut(&mut self, flat_index: usize) -> &mut T {
        let mut idx = flat_index;
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights.data_mut()[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias.data_mut()[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index {flat_index} out of range");
    }
}
