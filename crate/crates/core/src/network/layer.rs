use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, PoolGeometry, Tensor};

/// Declarative description of one layer, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        window: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d {
        #[serde(default)]
        channels: Option<usize>,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn conv(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        }
    }

    pub fn pool(window: usize) -> Self {
        LayerSpec::MaxPool2d {
            window,
            stride: None,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm2d { channels: None }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// A built layer with its parameters.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Dense {
        /// `[out, in]`
        weights: Tensor<T>,
        biases: Tensor<T>,
    },
    Conv2d {
        /// `[F, C, Kh, Kw]`
        weights: Tensor<T>,
        biases: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    BatchNorm2d {
        /// scale (weight-class)
        gamma: Tensor<T>,
        /// shift (bias-class)
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Flatten,
}

impl<T: Scalar> Layer<T> {
    /// Builds the layer for a per-sample input shape and returns it with its
    /// per-sample output shape.
    pub(crate) fn build<R: Rng + ?Sized>(
        index: usize,
        spec: &LayerSpec,
        input: &[usize],
        rng: &mut R,
    ) -> Result<(Self, Vec<usize>)> {
        let fail = |reason: String| Error::Build {
            layer: index,
            kind: spec.kind_name(),
            reason,
        };
        match *spec {
            LayerSpec::Dense { units } => {
                let &[fan_in] = input else {
                    return Err(fail(format!(
                        "expects a flat input, got {input:?} (insert a flatten layer)"
                    )));
                };
                if units == 0 {
                    return Err(fail("units must be positive".into()));
                }
                let weights = kaiming_uniform(vec![units, fan_in], fan_in, rng);
                Ok((
                    Layer::Dense {
                        weights,
                        biases: Tensor::zeros(vec![units]),
                    },
                    vec![units],
                ))
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return Err(fail(format!("expects a C×H×W input, got {input:?}")));
                };
                if filters == 0 || kernel == 0 {
                    return Err(fail("filters and kernel must be positive".into()));
                }
                let g = ConvGeometry::new(&[1, c, h, w], &[filters, c, kernel, kernel], stride, padding)
                    .map_err(|e| fail(e.to_string()))?;
                let fan_in = c * kernel * kernel;
                let weights = kaiming_uniform(vec![filters, c, kernel, kernel], fan_in, rng);
                Ok((
                    Layer::Conv2d {
                        weights,
                        biases: Tensor::zeros(vec![filters]),
                        stride,
                        padding,
                    },
                    vec![filters, g.out_h, g.out_w],
                ))
            }
            LayerSpec::Relu => Ok((Layer::Relu, input.to_vec())),
            LayerSpec::MaxPool2d { window, stride } => {
                let &[c, h, w] = input else {
                    return Err(fail(format!("expects a C×H×W input, got {input:?}")));
                };
                let stride = stride.unwrap_or(window);
                let g = PoolGeometry::new(h, w, window, stride).map_err(|e| fail(e.to_string()))?;
                Ok((Layer::MaxPool2d { window, stride }, vec![c, g.out_h, g.out_w]))
            }
            LayerSpec::BatchNorm2d { channels } => {
                let &[c, _, _] = input else {
                    return Err(fail(format!("expects a C×H×W input, got {input:?}")));
                };
                if let Some(declared) = channels {
                    if declared != c {
                        return Err(fail(format!("declared {declared} channels, input has {c}")));
                    }
                }
                Ok((
                    Layer::BatchNorm2d {
                        gamma: Tensor::full(vec![c], T::one()),
                        beta: Tensor::zeros(vec![c]),
                        running_mean: Tensor::zeros(vec![c]),
                        running_var: Tensor::full(vec![c], T::one()),
                    },
                    input.to_vec(),
                ))
            }
            LayerSpec::Flatten => Ok((Layer::Flatten, vec![input.iter().product()])),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::BatchNorm2d { .. } => "batchnorm2d",
            Layer::Flatten => "flatten",
        }
    }

    /// Owns bias-class parameters; these are the layers counted by kL depth.
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            Layer::Dense { .. } | Layer::Conv2d { .. } | Layer::BatchNorm2d { .. }
        )
    }

    pub fn weights(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Dense { weights, .. } | Layer::Conv2d { weights, .. } => Some(weights),
            Layer::BatchNorm2d { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    pub fn biases(&self) -> Option<&Tensor<T>> {
        match self {
            Layer::Dense { biases, .. } | Layer::Conv2d { biases, .. } => Some(biases),
            Layer::BatchNorm2d { beta, .. } => Some(beta),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Dense { weights, .. } | Layer::Conv2d { weights, .. } => Some(weights),
            Layer::BatchNorm2d { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    pub fn biases_mut(&mut self) -> Option<&mut Tensor<T>> {
        match self {
            Layer::Dense { biases, .. } | Layer::Conv2d { biases, .. } => Some(biases),
            Layer::BatchNorm2d { beta, .. } => Some(beta),
            _ => None,
        }
    }
}

/// Kaiming-uniform with fan-in and ReLU gain: U(−√(6/fan_in), √(6/fan_in)).
fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parses_from_toml_like_json() {
        let spec: LayerSpec =
            serde_json::from_str(r#"{"kind":"conv2d","filters":8,"kernel":3,"padding":1}"#).unwrap();
        assert_eq!(spec, LayerSpec::conv(8, 3, 1, 1));
        let pool: LayerSpec = serde_json::from_str(r#"{"kind":"maxpool2d","window":2}"#).unwrap();
        assert_eq!(pool, LayerSpec::pool(2));
        assert!(serde_json::from_str::<LayerSpec>(r#"{"kind":"dense","units":3,"bogus":1}"#).is_err());
    }
}
