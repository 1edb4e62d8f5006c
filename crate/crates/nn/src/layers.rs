//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] at construction and reads them back in `forward`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::ops::ConvGeom;
use crate::tensor::Tensor;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv {
    /// Volumetric convolution, weight `[co, ci, kd, kh, kw]`.
    pub fn new3d(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        Self::build(ps, rng, name, &[co, ci, kd, kh, kw], ci * geom.kernel_volume(), co, geom, bias)
    }

    /// Planar convolution with a square kernel, weight `[co, ci, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new2d(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let geom = ConvGeom::square(k, stride, pad);
        Self::build(ps, rng, name, &[co, ci, k, k], ci * k * k, co, geom, bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        co: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), ParamKind::Trainable, fan_in_uniform(rng, shape, fan_in));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), ParamKind::Trainable, fan_in_uniform(rng, &[co], fan_in)));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        self.forward_with(g, ps, x, self.geom)
    }

    /// Same weights, different padding/stride (kernel must match).
    pub fn forward_with(&self, g: &mut Graph, ps: &ParamStore, x: Var, geom: ConvGeom) -> Var {
        debug_assert_eq!(geom.kernel, self.geom.kernel);
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv(x, w, b, geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose {
    /// Volumetric transposed convolution, weight `[ci, co, kd, kh, kw]`.
    pub fn new3d(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize, geom: ConvGeom) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let fan_in = co * geom.kernel_volume();
        let weight = ps.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            fan_in_uniform(rng, &[ci, co, kd, kh, kw], fan_in),
        );
        let bias = ps.add(format!("{name}.bias"), ParamKind::Trainable, fan_in_uniform(rng, &[co], fan_in));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.conv_transpose(x, w, Some(b), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), ParamKind::Trainable, fan_in_uniform(rng, &[dout, din], din));
        let bias = ps.add(format!("{name}.bias"), ParamKind::Trainable, fan_in_uniform(rng, &[dout], din));
        Self { weight, bias }
    }

    /// Zero weights with a constant bias; used for heads that should start
    /// at a fixed output.
    pub fn with_constant_output(ps: &mut ParamStore, name: &str, din: usize, dout: usize, bias: f32) -> Self {
        let weight = ps.add(format!("{name}.weight"), ParamKind::Trainable, Tensor::zeros(&[dout, din]));
        let bias = ps.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::full(&[dout], bias));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::full(&[channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: ps.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: ps.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Var {
        g.batch_norm(ps, x, self.gamma, self.beta, self.running_mean, self.running_var, self.momentum, self.eps)
    }
}
