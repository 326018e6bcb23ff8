//! PEFT methods as attachable hooks: representation editing (RED), LoRA,
//! Adapter, Adapter_FFN, BitFit and full fine-tuning.

mod ops;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use ops::{
    adapter_forward, lora_delta, lora_forward, red_edit, Activation, AdapterBlock, AdapterVars,
    ComponentMask, EditVectorPair, LoraPair,
};

use crate::error::{Error, Result};
use crate::model::{PeftHooks, Proj, Site, TokenBatch, TransformerConfig, TransformerModel};
use crate::param::ParamStore;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Red,
    Lora,
    Adapter,
    AdapterFfn,
    Bitfit,
    FullFt,
}

impl Method {
    pub fn needs_rank(self) -> bool {
        matches!(self, Method::Lora | Method::Adapter | Method::AdapterFfn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Red => "red",
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::AdapterFfn => "adapter_ffn",
            Method::Bitfit => "bitfit",
            Method::FullFt => "full_ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Block sites that RED edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    Ffn,
    Attn,
    Both,
}

impl Positions {
    pub fn sites(self) -> &'static [Site] {
        match self {
            Positions::Ffn => &[Site::Ffn],
            Positions::Attn => &[Site::Attn],
            Positions::Both => &[Site::Attn, Site::Ffn],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSpec {
    pub method: Method,
    /// Bottleneck rank for LoRA and adapters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// LoRA scale numerator; the update is multiplied by `alpha / rank`.
    /// Defaults to `rank` (unit scale).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub positions: Positions,
    #[serde(default)]
    pub component_mask: ComponentMask,
    /// Apply edits and adapters to the raw sub-layer output instead of the
    /// post-residual, post-norm representation.
    #[serde(default)]
    pub pre_residual: bool,
    #[serde(default)]
    pub adapter_activation: Activation,
}

impl PeftSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            rank: None,
            alpha: None,
            positions: Positions::Ffn,
            component_mask: ComponentMask::Both,
            pre_residual: false,
            adapter_activation: Activation::Gelu,
        }
    }

    pub fn red() -> Self {
        Self::new(Method::Red)
    }

    pub fn with_rank(method: Method, rank: usize) -> Self {
        Self {
            rank: Some(rank),
            ..Self::new(method)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.needs_rank() {
            match self.rank {
                None => {
                    return Err(Error::MissingRank {
                        method: self.method.to_string(),
                    })
                }
                Some(0) => return Err(Error::Config("peft.rank must be at least 1".into())),
                Some(_) => {}
            }
        }
        if let Some(alpha) = self.alpha {
            if !alpha.is_finite() {
                return Err(Error::Config("peft.alpha must be finite".into()));
            }
        }
        Ok(())
    }

    /// The configured rank, required by LoRA and the adapters.
    pub fn rank(&self) -> Result<usize> {
        self.rank.ok_or_else(|| Error::MissingRank {
            method: self.method.to_string(),
        })
    }

    pub fn lora_scale(&self) -> Option<f64> {
        let r = self.rank? as f64;
        Some(self.alpha.unwrap_or(r) / r)
    }

    /// Sites that carry an edit module (RED vectors or an adapter).
    pub fn edit_sites(&self) -> &'static [Site] {
        match self.method {
            Method::Red => self.positions.sites(),
            Method::Adapter => &[Site::Attn, Site::Ffn],
            Method::AdapterFfn => &[Site::Ffn],
            _ => &[],
        }
    }

    /// Short human-readable label, e.g. `red[ffn,both]` or `lora[r=8]`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Red => {
                let pos = match self.positions {
                    Positions::Ffn => "ffn",
                    Positions::Attn => "attn",
                    Positions::Both => "ffn+attn",
                };
                let mask = match self.component_mask {
                    ComponentMask::Both => "scaling+bias",
                    ComponentMask::ScalingOnly => "scaling",
                    ComponentMask::BiasOnly => "bias",
                };
                format!("red[{pos},{mask}]")
            }
            m if m.needs_rank() => format!("{m}[r={}]", self.rank.unwrap_or(0)),
            m => m.to_string(),
        }
    }
}

pub fn red_param_name(block: usize, site: Site, part: &str) -> String {
    format!("block.{block}.{}.red.{part}", site.as_str())
}

pub fn lora_param_name(block: usize, proj: Proj, part: &str) -> String {
    format!("block.{block}.attn.{}.lora.{part}", proj.as_str())
}

pub fn adapter_param_name(block: usize, site: Site, part: &str) -> String {
    format!("block.{block}.{}.adapter.{part}", site.as_str())
}

/// Whether BitFit trains this base parameter: every encoder-block bias,
/// layer-norm biases included. Embedding and head biases stay frozen.
pub fn is_bitfit_param(name: &str) -> bool {
    name.starts_with("block.") && name.ends_with(".bias")
}

/// Parameters created by a PEFT method, kept apart from the base model.
#[derive(Debug, Clone)]
pub struct Peft<T> {
    pub spec: PeftSpec,
    pub params: ParamStore<T>,
    n_layers: usize,
}

impl<T: Scalar> Peft<T> {
    /// Creates the method's parameters for a model of shape `config`.
    pub fn init(spec: &PeftSpec, config: &TransformerConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = config.d_model;
        let mut rng = rng::stream(seed, rng::PEFT_INIT);
        let mut params = ParamStore::new();
        for block in 0..config.n_layers {
            match spec.method {
                Method::Red => {
                    for &site in spec.edit_sites() {
                        let pair = EditVectorPair::<T>::identity(d, spec.component_mask);
                        if let Some(s) = pair.scaling {
                            params.insert(red_param_name(block, site, "scaling"), s, true)?;
                        }
                        if let Some(b) = pair.bias {
                            params.insert(red_param_name(block, site, "bias"), b, true)?;
                        }
                    }
                }
                Method::Lora => {
                    let alpha = spec.alpha.unwrap_or(spec.rank()? as f64);
                    for proj in [Proj::Query, Proj::Value] {
                        let pair = LoraPair::<T>::init(d, d, spec.rank()?, alpha, &mut rng)?;
                        params.insert(lora_param_name(block, proj, "down"), pair.down, true)?;
                        params.insert(lora_param_name(block, proj, "up"), pair.up, true)?;
                    }
                }
                Method::Adapter | Method::AdapterFfn => {
                    for &site in spec.edit_sites() {
                        let ab = AdapterBlock::<T>::init(
                            d,
                            spec.rank()?,
                            spec.adapter_activation,
                            &mut rng,
                        )?;
                        params.insert(
                            adapter_param_name(block, site, "down.weight"),
                            ab.down_weight,
                            true,
                        )?;
                        params.insert(
                            adapter_param_name(block, site, "down.bias"),
                            ab.down_bias,
                            true,
                        )?;
                        params.insert(
                            adapter_param_name(block, site, "up.weight"),
                            ab.up_weight,
                            true,
                        )?;
                        params.insert(
                            adapter_param_name(block, site, "up.bias"),
                            ab.up_bias,
                            true,
                        )?;
                    }
                }
                Method::Bitfit | Method::FullFt => {}
            }
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            n_layers: config.n_layers,
        })
    }

    /// Rebuilds from stored parameters, checking names and shapes against a
    /// fresh initialization.
    pub fn from_params(
        spec: &PeftSpec,
        config: &TransformerConfig,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let template = Self::init(spec, config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} PEFT parameters, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for p in template.params.iter() {
            let q = params
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing PEFT parameter `{}`", p.name)))?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::dim(
                    "PEFT parameter shape",
                    q.value.shape(),
                    p.value.shape(),
                ));
            }
        }
        let mut params = params;
        params.set_all_trainable(true);
        Ok(Self {
            spec: spec.clone(),
            params,
            n_layers: config.n_layers,
        })
    }

    /// Registers every PEFT parameter in `g` and returns the forward hooks.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundPeft<T>> {
        let mut bound = BoundPeft {
            edits: HashMap::new(),
            lora: HashMap::new(),
            lora_scale: T::one(),
            pre_residual: self.spec.pre_residual,
        };
        for block in 0..self.n_layers {
            match self.spec.method {
                Method::Red => {
                    for &site in self.spec.edit_sites() {
                        let bind = |g: &mut Graph<T>, part| {
                            let name = red_param_name(block, site, part);
                            self.params
                                .contains(&name)
                                .then(|| self.params.bind(g, &name))
                                .transpose()
                        };
                        let scaling = bind(g, "scaling")?;
                        let bias = bind(g, "bias")?;
                        bound
                            .edits
                            .insert((block, site), BoundEdit::Red { scaling, bias });
                    }
                }
                Method::Lora => {
                    bound.lora_scale =
                        T::from_f64_lossy(self.spec.lora_scale().expect("validated rank"));
                    for proj in [Proj::Query, Proj::Value] {
                        let down = self.params.bind(g, &lora_param_name(block, proj, "down"))?;
                        let up = self.params.bind(g, &lora_param_name(block, proj, "up"))?;
                        bound.lora.insert((block, proj), (down, up));
                    }
                }
                Method::Adapter | Method::AdapterFfn => {
                    for &site in self.spec.edit_sites() {
                        let vars = AdapterVars {
                            down_weight: self
                                .params
                                .bind(g, &adapter_param_name(block, site, "down.weight"))?,
                            down_bias: self
                                .params
                                .bind(g, &adapter_param_name(block, site, "down.bias"))?,
                            up_weight: self
                                .params
                                .bind(g, &adapter_param_name(block, site, "up.weight"))?,
                            up_bias: self
                                .params
                                .bind(g, &adapter_param_name(block, site, "up.bias"))?,
                        };
                        bound.edits.insert(
                            (block, site),
                            BoundEdit::Adapter(vars, self.spec.adapter_activation),
                        );
                    }
                }
                Method::Bitfit | Method::FullFt => {}
            }
        }
        Ok(bound)
    }
}

#[derive(Debug, Clone, Copy)]
enum BoundEdit {
    Red {
        scaling: Option<Var>,
        bias: Option<Var>,
    },
    Adapter(AdapterVars, Activation),
}

/// PEFT parameters bound into one graph; implements the model's hooks.
#[derive(Debug, Clone)]
pub struct BoundPeft<T> {
    edits: HashMap<(usize, Site), BoundEdit>,
    lora: HashMap<(usize, Proj), (Var, Var)>,
    lora_scale: T,
    pre_residual: bool,
}

impl<T: Scalar> PeftHooks<T> for BoundPeft<T> {
    fn edit(&self, g: &mut Graph<T>, block: usize, site: Site, h: Var) -> Result<Var> {
        match self.edits.get(&(block, site)) {
            None => Ok(h),
            Some(BoundEdit::Red { scaling, bias }) => red_edit(g, h, *scaling, *bias),
            Some(BoundEdit::Adapter(vars, act)) => adapter_forward(g, h, *vars, *act),
        }
    }

    fn projection_delta(
        &self,
        g: &mut Graph<T>,
        block: usize,
        proj: Proj,
        x: Var,
    ) -> Result<Option<Var>> {
        match self.lora.get(&(block, proj)) {
            None => Ok(None),
            Some(&(down, up)) => lora_delta(g, x, down, up, self.lora_scale).map(Some),
        }
    }

    fn pre_residual(&self) -> bool {
        self.pre_residual
    }
}

/// Freezes the base model as `spec` requires and creates the method's parameters.
pub fn attach_peft<T: Scalar>(
    model: &mut TransformerModel<T>,
    spec: &PeftSpec,
    seed: u64,
) -> Result<Peft<T>> {
    let peft = Peft::init(spec, &model.config, seed)?;
    freeze_for(model, spec);
    Ok(peft)
}

fn freeze_for<T: Scalar>(model: &mut TransformerModel<T>, spec: &PeftSpec) {
    for p in model.params.iter_mut() {
        p.trainable = match spec.method {
            Method::FullFt => true,
            Method::Bitfit => is_bitfit_param(&p.name),
            _ => false,
        };
        p.grad = None;
    }
}

/// A base model together with its attached PEFT parameters.
#[derive(Debug, Clone)]
pub struct PeftModel<T> {
    pub base: TransformerModel<T>,
    pub peft: Peft<T>,
}

impl<T: Scalar> PeftModel<T> {
    pub fn attach(mut base: TransformerModel<T>, spec: &PeftSpec, seed: u64) -> Result<Self> {
        let peft = attach_peft(&mut base, spec, seed)?;
        Ok(Self { base, peft })
    }

    /// Joins a base model with previously trained PEFT parameters, applying
    /// the method's freezing rule to the base.
    pub fn from_parts(mut base: TransformerModel<T>, peft: Peft<T>) -> Self {
        freeze_for(&mut base, &peft.spec);
        Self { base, peft }
    }

    pub fn spec(&self) -> &PeftSpec {
        &self.peft.spec
    }

    pub fn forward(&self, g: &mut Graph<T>, batch: &TokenBatch) -> Result<Var> {
        let hooks = self.peft.bind(g)?;
        self.base.forward(g, batch, &hooks)
    }

    /// Mean cross-entropy of `batch` against `labels`.
    pub fn loss(&self, g: &mut Graph<T>, batch: &TokenBatch, labels: &[usize]) -> Result<Var> {
        let logits = self.forward(g, batch)?;
        g.cross_entropy(logits, labels)
    }

    /// Runs forward + backward and accumulates gradients into both stores.
    pub fn loss_and_grads(&mut self, batch: &TokenBatch, labels: &[usize]) -> Result<T> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, batch, labels)?;
        g.backward(loss)?;
        self.base.params.accumulate_grads(&g);
        self.peft.params.accumulate_grads(&g);
        Ok(g.value(loss).data()[0])
    }

    pub fn logits(&self, batch: &TokenBatch) -> Result<crate::tensor::Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out).clone())
    }

    /// Names of every trainable parameter: base parameters first, then PEFT ones.
    pub fn registry(&self) -> Vec<String> {
        self.base
            .params
            .iter()
            .chain(self.peft.params.iter())
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.base.params.trainable_numel() + self.peft.params.trainable_numel()
    }

    pub fn total_count(&self) -> usize {
        self.base.params.numel() + self.peft.params.numel()
    }

    pub fn zero_grad(&mut self) {
        self.base.params.zero_grad();
        self.peft.params.zero_grad();
    }

    pub fn frozen_digest(&self) -> String {
        frozen_digest(&self.base)
    }
}

/// SHA-256 over the name, shape and little-endian bytes of every frozen base
/// parameter, in name order. When nothing is frozen (full fine-tuning) the
/// whole base model is covered.
pub fn frozen_digest<T: Scalar>(model: &TransformerModel<T>) -> String {
    let any_frozen = model.params.iter().any(|p| !p.trainable);
    let mut selected: Vec<_> = model
        .params
        .iter()
        .filter(|p| !any_frozen || !p.trainable)
        .collect();
    selected.sort_by(|a, b| a.name.cmp(&b.name));
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for p in selected {
        hasher.update((p.name.len() as u64).to_le_bytes());
        hasher.update(p.name.as_bytes());
        for &d in p.value.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in p.value.data() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}
