//! Layer handles: parameter ids plus static geometry.

use super::graph::{Graph, Var};
use super::kernels::ConvGeom;
use super::params::{ParamId, ParamKind, ParamStore, Scope};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let geom = ConvGeom::new(kernel, stride, kernel / 2, groups);
        let rf = kernel * kernel;
        let weight = store.add(
            scope.name("weight"),
            ParamKind::Kernel,
            Tensor::zeros(&[out_channels, in_channels / groups, kernel, kernel]),
            in_channels / groups * rf,
            out_channels * rf,
        );
        let bias = bias.then(|| {
            store.add(
                scope.name("bias"),
                ParamKind::Bias,
                Tensor::zeros(&[out_channels]),
                0,
                0,
            )
        });
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.geom)
    }
}

/// Stride-`s` transposed convolution producing exactly `s` times the input extent.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let pad = kernel / 2;
        // (n - 1) * s + k - 2p + op == s * n
        let output_pad = stride + 2 * pad - kernel;
        let rf = kernel * kernel;
        let weight = store.add(
            scope.name("weight"),
            ParamKind::Kernel,
            Tensor::zeros(&[in_channels, out_channels / groups, kernel, kernel]),
            out_channels / groups * rf,
            in_channels * rf,
        );
        let bias = bias.then(|| {
            store.add(
                scope.name("bias"),
                ParamKind::Bias,
                Tensor::zeros(&[out_channels]),
                0,
                0,
            )
        });
        Self {
            weight,
            bias,
            geom: ConvGeom::new(kernel, stride, pad, groups),
            output_pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, self.weight, self.bias, self.geom, self.output_pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, channels: usize) -> Self {
        let c = [channels];
        Self {
            gamma: store.add(scope.name("gamma"), ParamKind::BnScale, Tensor::full(&c, T::one()), 0, 0),
            beta: store.add(scope.name("beta"), ParamKind::BnShift, Tensor::zeros(&c), 0, 0),
            running_mean: store.add(scope.name("running_mean"), ParamKind::RunningMean, Tensor::zeros(&c), 0, 0),
            running_var: store.add(
                scope.name("running_var"),
                ParamKind::RunningVar,
                Tensor::full(&c, T::one()),
                0,
                0,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Convolution, batch norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &scope.child("conv"), in_channels, out_channels, kernel, stride, groups, false),
            bn: BatchNorm2d::new(store, &scope.child("bn"), out_channels),
            relu,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, scope: &Scope, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.add(
                scope.name("weight"),
                ParamKind::Kernel,
                Tensor::zeros(&[out_features, in_features]),
                in_features,
                out_features,
            ),
            bias: store.add(scope.name("bias"), ParamKind::Bias, Tensor::zeros(&[out_features]), 0, 0),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}
