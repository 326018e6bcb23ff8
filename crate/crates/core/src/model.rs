//! Post-LN transformer encoder classifier used as the frozen base model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{AttentionShape, Graph, Tensor, Var};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnStyle {
    #[default]
    PostLn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width; `4 · d_model` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub ln_style: LnStyle,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl TransformerConfig {
    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.ffn_width()),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.ffn_width());
        let mut out = vec![
            ("embed.token.weight".to_string(), vec![self.vocab_size, d]),
            (
                "embed.position.weight".to_string(),
                vec![self.max_seq_len, d],
            ),
        ];
        for i in 0..self.n_layers {
            for proj in ["w_q", "w_k", "w_v", "w_o"] {
                out.push((format!("block.{i}.attn.{proj}.weight"), vec![d, d]));
                out.push((format!("block.{i}.attn.{proj}.bias"), vec![d]));
            }
            out.push((format!("block.{i}.ln1.weight"), vec![d]));
            out.push((format!("block.{i}.ln1.bias"), vec![d]));
            out.push((format!("block.{i}.ffn.w_in.weight"), vec![d, ff]));
            out.push((format!("block.{i}.ffn.w_in.bias"), vec![ff]));
            out.push((format!("block.{i}.ffn.w_out.weight"), vec![ff, d]));
            out.push((format!("block.{i}.ffn.w_out.bias"), vec![d]));
            out.push((format!("block.{i}.ln2.weight"), vec![d]));
            out.push((format!("block.{i}.ln2.bias"), vec![d]));
        }
        out.push(("head.weight".to_string(), vec![d, self.n_classes]));
        out.push(("head.bias".to_string(), vec![self.n_classes]));
        out
    }
}

/// Representation sites inside a block where PEFT edits may be applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Attn,
    Ffn,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Attn => "attn",
            Site::Ffn => "ffn",
        }
    }
}

/// Attention projections that accept a parallel low-rank update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Proj {
    Query,
    Value,
}

impl Proj {
    pub fn as_str(self) -> &'static str {
        match self {
            Proj::Query => "w_q",
            Proj::Value => "w_v",
        }
    }
}

/// Callbacks the forward pass offers to PEFT methods.
pub trait PeftHooks<T: Scalar> {
    /// Edits the representation produced at `site` of `block`.
    fn edit(&self, _g: &mut Graph<T>, _block: usize, _site: Site, h: Var) -> Result<Var> {
        Ok(h)
    }

    /// Optional additive term for the `x · W` product of an attention projection.
    fn projection_delta(
        &self,
        _g: &mut Graph<T>,
        _block: usize,
        _proj: Proj,
        _x: Var,
    ) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Whether edits apply to the raw sub-layer output (before residual
    /// addition and layer norm) instead of the normalized representation.
    fn pre_residual(&self) -> bool {
        false
    }
}

/// The plain frozen model.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl<T: Scalar> PeftHooks<T> for NoHooks {}

/// A batch of equal-length token sequences, row-major `[batch × seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// `false` marks padding.
    pub mask: Option<Vec<bool>>,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::dim("token batch", &[tokens.len()], &[batch, seq]));
        }
        Ok(Self {
            tokens,
            batch,
            seq,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.tokens.len() {
            return Err(Error::dim(
                "token mask",
                &[mask.len()],
                &[self.batch, self.seq],
            ));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Config("token rows must have equal length".into()));
        }
        Self::new(rows.concat(), rows.len(), seq)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel<T> {
    pub config: TransformerConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Xavier-uniform weights, zero biases and unit layer-norm gains, drawn
    /// from the `model-init` stream of `seed`.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::MODEL_INIT);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let value = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else if name.starts_with("block.") && name.contains(".ln") {
                Tensor::full(shape, T::one())
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_f64(shape, &data)?
            };
            params.insert(name, value, true)?;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: TransformerConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::dim("parameter shape", p.value.shape(), &shape));
            }
        }
        if params.len() != config.param_shapes().len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.params.bind(g, &format!("{prefix}.weight"))?;
        let b = self.params.bind(g, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let eps = T::from_f64_lossy(self.config.ln_eps);
        let gain = self.params.bind(g, &format!("{prefix}.weight"))?;
        let bias = self.params.bind(g, &format!("{prefix}.bias"))?;
        let y = g.layer_norm(x, eps)?;
        let y = g.mul(y, gain)?;
        g.add(y, bias)
    }

    fn projection(
        &self,
        g: &mut Graph<T>,
        x: Var,
        block: usize,
        proj: Option<Proj>,
        name: &str,
        hooks: &dyn PeftHooks<T>,
    ) -> Result<Var> {
        let prefix = format!("block.{block}.attn.{name}");
        let w = self.params.bind(g, &format!("{prefix}.weight"))?;
        let b = self.params.bind(g, &format!("{prefix}.bias"))?;
        let mut y = g.matmul(x, w)?;
        if let Some(proj) = proj {
            if let Some(delta) = hooks.projection_delta(g, block, proj, x)? {
                y = g.add(y, delta)?;
            }
        }
        g.add(y, b)
    }

    /// Runs the classifier and returns `[batch × n_classes]` logits.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &TokenBatch,
        hooks: &dyn PeftHooks<T>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(Error::dim("forward", &[batch.seq], &[cfg.max_seq_len]));
        }
        if let Some(&token) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let mask = batch.mask.as_deref();
        let shape = AttentionShape {
            batch: batch.batch,
            seq: batch.seq,
            heads: cfg.n_heads,
            d_model: cfg.d_model,
        };
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();

        let tok = self.params.bind(g, "embed.token.weight")?;
        let pos = self.params.bind(g, "embed.position.weight")?;
        let tok = g.gather(tok, &batch.tokens)?;
        let pos = g.gather(pos, &positions)?;
        let mut x = g.add(tok, pos)?;

        let pre = hooks.pre_residual();
        for i in 0..cfg.n_layers {
            let q = self.projection(g, x, i, Some(Proj::Query), "w_q", hooks)?;
            let k = self.projection(g, x, i, None, "w_k", hooks)?;
            let v = self.projection(g, x, i, Some(Proj::Value), "w_v", hooks)?;
            let a = g.attention(q, k, v, shape, mask)?;
            let mut a = self.linear(g, a, &format!("block.{i}.attn.w_o"))?;
            if pre {
                a = hooks.edit(g, i, Site::Attn, a)?;
            }
            let h = g.add(x, a)?;
            let mut h = self.norm(g, h, &format!("block.{i}.ln1"))?;
            if !pre {
                h = hooks.edit(g, i, Site::Attn, h)?;
            }

            let f = self.linear(g, h, &format!("block.{i}.ffn.w_in"))?;
            let f = g.gelu(f);
            let mut f = self.linear(g, f, &format!("block.{i}.ffn.w_out"))?;
            if pre {
                f = hooks.edit(g, i, Site::Ffn, f)?;
            }
            let y = g.add(h, f)?;
            x = self.norm(g, y, &format!("block.{i}.ln2"))?;
            if !pre {
                x = hooks.edit(g, i, Site::Ffn, x)?;
            }
        }

        let pooled = g.mean_pool(x, batch.batch, batch.seq, mask)?;
        self.linear(g, pooled, "head")
    }

    /// Convenience wrapper: logits as a tensor, no gradients retained.
    pub fn logits(&self, batch: &TokenBatch, hooks: &dyn PeftHooks<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, hooks)?;
        Ok(g.value(out).clone())
    }
}
