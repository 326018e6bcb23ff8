use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Which edit vectors a RED site carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentMask {
    #[default]
    Both,
    ScalingOnly,
    BiasOnly,
}

impl ComponentMask {
    pub fn has_scaling(self) -> bool {
        matches!(self, ComponentMask::Both | ComponentMask::ScalingOnly)
    }

    pub fn has_bias(self) -> bool {
        matches!(self, ComponentMask::Both | ComponentMask::BiasOnly)
    }

    /// Trainable vectors per site.
    pub fn vectors(self) -> usize {
        usize::from(self.has_scaling()) + usize::from(self.has_bias())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Scaling and bias vectors of one edited site. Disabled components are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct EditVectorPair<T> {
    pub scaling: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub mask: ComponentMask,
}

impl<T: Scalar> EditVectorPair<T> {
    /// Ones for scaling, zeros for bias: the edit starts as the identity.
    pub fn identity(d: usize, mask: ComponentMask) -> Self {
        Self {
            scaling: mask.has_scaling().then(|| Tensor::full(vec![d], T::one())),
            bias: mask.has_bias().then(|| Tensor::zeros(vec![d])),
            mask,
        }
    }
}

/// `h2 = scaling ⊙ h1 + bias`, broadcast over every leading axis of `h1`.
pub fn red_edit<T: Scalar>(
    g: &mut Graph<T>,
    h1: Var,
    scaling: Option<Var>,
    bias: Option<Var>,
) -> Result<Var> {
    let d = g.value(h1).last_dim();
    for v in scaling.iter().chain(bias.iter()) {
        if g.value(*v).shape() != [d] {
            return Err(Error::dim(
                "red_edit",
                g.value(h1).shape(),
                g.value(*v).shape(),
            ));
        }
    }
    let mut h = h1;
    if let Some(s) = scaling {
        h = g.mul(h, s)?;
    }
    if let Some(b) = bias {
        h = g.add(h, b)?;
    }
    Ok(h)
}

/// Low-rank update `ΔW = s · W_down · W_up` with `s = alpha / rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
    pub alpha: f64,
    pub rank: usize,
}

impl<T: Scalar> LoraPair<T> {
    /// `W_down ~ U(−1/√d, 1/√d)`, `W_up = 0`.
    pub fn init(d: usize, k: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let data: Vec<f64> = (0..d * rank)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Ok(Self {
            down: Tensor::from_f64(vec![d, rank], &data)?,
            up: Tensor::zeros(vec![rank, k]),
            alpha,
            rank,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense `W + s · W_down · W_up`.
    pub fn merged(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let down = g.leaf(self.down.clone(), false);
        let up = g.leaf(self.up.clone(), false);
        let delta = g.matmul(down, up)?;
        let delta = g.scale(delta, T::from_f64_lossy(self.scale()));
        let w = g.leaf(w.clone(), false);
        let out = g.add(w, delta)?;
        Ok(g.value(out).clone())
    }
}

/// `h = x·W + s · (x·W_down)·W_up`.
pub fn lora_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    down: Var,
    up: Var,
    scale: T,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let delta = lora_delta(g, x, down, up, scale)?;
    if g.value(delta).shape() != g.value(base).shape() {
        return Err(Error::dim(
            "lora_forward",
            g.value(base).shape(),
            g.value(delta).shape(),
        ));
    }
    g.add(base, delta)
}

/// The parallel branch alone: `s · (x·W_down)·W_up`.
pub fn lora_delta<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    down: Var,
    up: Var,
    scale: T,
) -> Result<Var> {
    let low = g.matmul(x, down)?;
    let delta = g.matmul(low, up)?;
    Ok(g.scale(delta, scale))
}

/// Bottleneck adapter with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlock<T> {
    pub down_weight: Tensor<T>,
    pub down_bias: Tensor<T>,
    pub up_weight: Tensor<T>,
    pub up_bias: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> AdapterBlock<T> {
    /// Random down-projection, zero up-projection: the adapter starts as the identity.
    pub fn init(d: usize, rank: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let data: Vec<f64> = (0..d * rank)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Ok(Self {
            down_weight: Tensor::from_f64(vec![d, rank], &data)?,
            down_bias: Tensor::zeros(vec![rank]),
            up_weight: Tensor::zeros(vec![rank, d]),
            up_bias: Tensor::zeros(vec![d]),
            activation,
        })
    }
}

/// Bound adapter parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down_weight: Var,
    pub down_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
}

/// `h2 = h1 + f(h1·W_down + b_down)·W_up + b_up`.
pub fn adapter_forward<T: Scalar>(
    g: &mut Graph<T>,
    h1: Var,
    ab: AdapterVars,
    activation: Activation,
) -> Result<Var> {
    let z = g.matmul(h1, ab.down_weight)?;
    let z = g.add(z, ab.down_bias)?;
    let z = activation.apply(g, z);
    let u = g.matmul(z, ab.up_weight)?;
    let u = g.add(u, ab.up_bias)?;
    if g.value(u).shape() != g.value(h1).shape() {
        return Err(Error::dim(
            "adapter_forward",
            g.value(h1).shape(),
            g.value(u).shape(),
        ));
    }
    g.add(h1, u)
}
