//! Closed-form trainable-parameter accounting on full-size host architectures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::peft::{ComponentMask, Method, PeftSpec, Positions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostDescriptor {
    pub name: String,
    /// Encoder (or decoder-only) blocks.
    pub n_layers: u64,
    pub d_model: u64,
    pub d_ff: u64,
    /// Decoder blocks of an encoder-decoder host; each has its own FFN site.
    #[serde(default)]
    pub decoder_layers: u64,
    /// Published total size, used for full fine-tuning counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_params: Option<u64>,
}

impl HostDescriptor {
    fn preset(
        name: &str,
        n_layers: u64,
        d_model: u64,
        d_ff: u64,
        decoder_layers: u64,
        total_m: u64,
    ) -> Self {
        Self {
            name: name.into(),
            n_layers,
            d_model,
            d_ff,
            decoder_layers,
            total_params: Some(total_m * 1_000_000),
        }
    }

    /// Descriptor of a lab model, with its exact total.
    pub fn from_config(name: &str, config: &TransformerConfig) -> Self {
        Self {
            name: name.into(),
            n_layers: config.n_layers as u64,
            d_model: config.d_model as u64,
            d_ff: config.ffn_width() as u64,
            decoder_layers: 0,
            total_params: Some(
                config
                    .param_shapes()
                    .iter()
                    .map(|(_, s)| s.iter().product::<usize>() as u64)
                    .sum(),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!(
                "host `{}`: n_layers, d_model and d_ff must be at least 1",
                self.name
            )));
        }
        Ok(())
    }

    /// Blocks carrying an FFN edit site.
    pub fn ffn_sites(&self) -> u64 {
        self.n_layers + self.decoder_layers
    }
}

pub fn presets() -> Vec<HostDescriptor> {
    vec![
        HostDescriptor::preset("roberta_base", 12, 768, 3072, 0, 125),
        HostDescriptor::preset("roberta_large", 24, 1024, 4096, 0, 355),
        HostDescriptor::preset("gpt2_medium", 24, 1024, 4096, 0, 355),
        HostDescriptor::preset("gpt2_large", 36, 1280, 5120, 0, 774),
        HostDescriptor::preset("t5_base", 12, 768, 3072, 12, 220),
        HostDescriptor::preset("llama2_7b", 32, 4096, 11008, 0, 6739),
    ]
}

pub fn preset(name: &str) -> Option<HostDescriptor> {
    presets().into_iter().find(|h| h.name == name)
}

/// What is being counted: a trainable PEFT method or an audit-only baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum Counted {
    Peft(PeftSpec),
    /// Soft prompt of `len` vectors at the embedding layer.
    Prompt {
        len: u64,
    },
    /// Key and value prefixes of `len` vectors in every block.
    Prefix {
        len: u64,
    },
    /// Full fine-tuning of the top `k` blocks only.
    TopBlocks {
        k: u64,
    },
}

impl Counted {
    pub fn label(&self) -> String {
        match self {
            Counted::Peft(spec) => spec.label(),
            Counted::Prompt { len } => format!("prompt(len={len})"),
            Counted::Prefix { len } => format!("prefix(len={len})"),
            Counted::TopBlocks { k } => format!("full_ft(top {k} blocks)"),
        }
    }

    /// The counting rule in words, printed beside the number.
    pub fn convention(&self) -> String {
        match self {
            Counted::Peft(spec) => match spec.method {
                Method::Red => {
                    let per = match spec.component_mask {
                        ComponentMask::Both => "scaling+bias",
                        ComponentMask::ScalingOnly => "scaling",
                        ComponentMask::BiasOnly => "bias",
                    };
                    let sites = match spec.positions {
                        Positions::Ffn => "FFN site",
                        Positions::Attn => "attention site",
                        Positions::Both => "both sites",
                    };
                    format!("{per} vectors of width d at the {sites} of every block")
                }
                Method::Lora => "down+up on W_q and W_v of every block".into(),
                Method::Adapter => {
                    "bottleneck (weights+biases) after attention and FFN of every block".into()
                }
                Method::AdapterFfn => {
                    "bottleneck (weights+biases) after the FFN of every block".into()
                }
                Method::Bitfit => {
                    "every bias inside the blocks (attention, FFN, layer norms)".into()
                }
                Method::FullFt => "published total size".into(),
            },
            Counted::Prompt { .. } => "len·d at the embedding".into(),
            Counted::Prefix { .. } => "len·d for keys and values in every block".into(),
            Counted::TopBlocks { .. } => "all weights and biases of the top blocks".into(),
        }
    }
}

fn block_params(host: &HostDescriptor) -> u64 {
    let (d, f) = (host.d_model, host.d_ff);
    4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
}

/// Exact number of trainable parameters of `what` on `host`.
pub fn count(what: &Counted, host: &HostDescriptor) -> Result<u64> {
    host.validate()?;
    let (l, d) = (host.n_layers, host.d_model);
    let spec = match what {
        Counted::Prompt { len } => return Ok(len * d),
        Counted::Prefix { len } => return Ok(len * d * 2 * l),
        Counted::TopBlocks { k } => return Ok(k.min(&l) * block_params(host)),
        Counted::Peft(spec) => spec,
    };
    spec.validate()?;
    let rank = || spec.rank().map(|r| r as u64);
    Ok(match spec.method {
        Method::Red => {
            let per_site = match spec.component_mask {
                ComponentMask::Both => 2 * d,
                _ => d,
            };
            let sites = match spec.positions {
                Positions::Ffn => host.ffn_sites(),
                Positions::Attn => l,
                Positions::Both => l + host.ffn_sites(),
            };
            per_site * sites
        }
        Method::Lora => 2 * (d * rank()? + rank()? * d) * l,
        Method::Adapter | Method::AdapterFfn => {
            let r = rank()?;
            let per_site = d * r + r + r * d + d;
            let sites = if spec.method == Method::Adapter { 2 } else { 1 };
            per_site * sites * l
        }
        Method::Bitfit => (7 * d + host.d_ff) * l,
        Method::FullFt => host.total_params.ok_or_else(|| {
            Error::Config(format!(
                "host `{}` has no total_params for full fine-tuning",
                host.name
            ))
        })?,
    })
}

/// `count` in millions with `decimals` places, e.g. `"0.02M"`.
pub fn millions(count: u64, decimals: usize) -> String {
    format!("{:.*}M", decimals, count as f64 / 1e6)
}

/// Ratio of two counts on the same host.
pub fn reduction_factor(a: &Counted, b: &Counted, host: &HostDescriptor) -> Result<f64> {
    let den = count(b, host)?;
    if den == 0 {
        return Err(Error::ZeroDenominator(format!(
            "{} on {}",
            b.label(),
            host.name
        )));
    }
    Ok(count(a, host)? as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub host: String,
    pub method: String,
    pub exact: u64,
    pub millions: String,
    /// Value in the published tables, when the row appears there.
    pub published: Option<String>,
    /// Computed minus printed, in millions.
    pub delta: Option<f64>,
    /// Whether the rounded count equals the printed value.
    pub matches: Option<bool>,
    pub convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub host: String,
    pub numerator: String,
    pub denominator: String,
    pub value: f64,
    pub published: f64,
    /// Relative deviation from the printed figure.
    pub rel_delta: f64,
    /// Set when the computed ratio is more than 1% off the printed one.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub ratios: Vec<RatioRow>,
}

fn red() -> Counted {
    Counted::Peft(PeftSpec::red())
}

fn ranked(method: Method, rank: usize) -> Counted {
    Counted::Peft(PeftSpec::with_rank(method, rank))
}

fn full() -> Counted {
    Counted::Peft(PeftSpec::new(Method::FullFt))
}

/// Rows in the published tables, keyed by host, with the printed value.
fn printed(host: &str) -> Vec<(Counted, &'static str)> {
    use Method::*;
    match host {
        "roberta_base" => vec![
            (full(), "125"),
            (ranked(Adapter, 8), "0.4"),
            (ranked(Lora, 8), "0.3"),
            (ranked(AdapterFfn, 16), "0.3"),
            (Counted::Peft(PeftSpec::new(Bitfit)), "0.1"),
            (red(), "0.02"),
        ],
        "roberta_large" => vec![
            (full(), "355"),
            (ranked(Adapter, 8), "0.9"),
            (ranked(Lora, 8), "0.8"),
            (ranked(AdapterFfn, 16), "0.8"),
            (red(), "0.05"),
        ],
        "gpt2_medium" => vec![
            (full(), "355"),
            (Counted::TopBlocks { k: 2 }, "25.2"),
            (ranked(Adapter, 8), "0.9"),
            (ranked(Lora, 8), "0.8"),
            (ranked(AdapterFfn, 16), "0.8"),
            (Counted::Prefix { len: 16 }, "0.8"),
            (red(), "0.05"),
            (ranked(Adapter, 1), "0.25"),
            (ranked(AdapterFfn, 1), "0.07"),
            (ranked(Lora, 1), "0.1"),
        ],
        "gpt2_large" => vec![
            (full(), "774"),
            (ranked(Adapter, 8), "1.8"),
            (ranked(Lora, 8), "1.5"),
            (ranked(AdapterFfn, 16), "1.5"),
            (Counted::Prefix { len: 16 }, "1.5"),
            (red(), "0.09"),
        ],
        "t5_base" => vec![
            (full(), "220"),
            (Counted::Prompt { len: 100 }, "0.08"),
            (red(), "0.04"),
        ],
        "llama2_7b" => vec![
            (full(), "6739"),
            (ranked(Lora, 16), "8.39"),
            (red(), "0.26"),
        ],
        _ => Vec::new(),
    }
}

/// Methods listed for a host that has no printed rows.
fn default_methods() -> Vec<Counted> {
    use Method::*;
    vec![
        full(),
        ranked(Adapter, 8),
        ranked(Lora, 8),
        ranked(AdapterFfn, 16),
        Counted::Peft(PeftSpec::new(Bitfit)),
        red(),
    ]
}

fn decimals_of(printed: &str) -> usize {
    printed.split_once('.').map_or(0, |(_, frac)| frac.len())
}

/// Audit rows for one host. Preset hosts get the published rows and
/// comparisons; any other host gets the default method list at 2 decimals.
pub fn audit_host(host: &HostDescriptor) -> Result<Vec<AuditRow>> {
    host.validate()?;
    let printed = printed(&host.name);
    let items: Vec<(Counted, Option<&str>)> = if printed.is_empty() {
        default_methods()
            .into_iter()
            .filter(|c| *c != full() || host.total_params.is_some())
            .map(|c| (c, None))
            .collect()
    } else {
        printed.into_iter().map(|(c, p)| (c, Some(p))).collect()
    };
    items
        .into_iter()
        .map(|(what, published)| {
            let exact = count(&what, host)?;
            let decimals = published.map_or(2, decimals_of);
            let units = millions(exact, decimals);
            let (delta, matches) = match published {
                Some(p) => {
                    let pv: f64 = p.parse().expect("printed values are numeric");
                    let rounded: f64 = units
                        .trim_end_matches('M')
                        .parse()
                        .expect("formatted number");
                    (Some(exact as f64 / 1e6 - pv), Some(rounded == pv))
                }
                None => (None, None),
            };
            Ok(AuditRow {
                host: host.name.clone(),
                method: what.label(),
                exact,
                millions: units,
                published: published.map(|p| format!("{p}M")),
                delta,
                matches,
                convention: what.convention(),
            })
        })
        .collect()
}

/// The headline reduction factors, each beside the published figure.
pub fn reduction_claims() -> Result<Vec<RatioRow>> {
    let claims = [
        ("llama2_7b", full(), red(), 25_700.0),
        ("llama2_7b", ranked(Method::Lora, 16), red(), 32.0),
        ("roberta_base", full(), red(), 7_200.0),
    ];
    claims
        .into_iter()
        .map(|(host, a, b, published)| {
            let h = preset(host).expect("built-in preset");
            let value = reduction_factor(&a, &b, &h)?;
            let rel_delta = (value - published) / published;
            Ok(RatioRow {
                host: host.into(),
                numerator: a.label(),
                denominator: b.label(),
                value,
                published: published,
                rel_delta,
                flagged: rel_delta.abs() > 0.01,
            })
        })
        .collect()
}

pub fn audit_all() -> Result<AuditReport> {
    let mut rows = Vec::new();
    for host in presets() {
        rows.extend(audit_host(&host)?);
    }
    Ok(AuditReport {
        rows,
        ratios: reduction_claims()?,
    })
}

impl AuditReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<28} {:>14} {:>10} {:>8} {:>10}  {:<6} convention",
            "host", "method", "exact", "units", "published", "delta(M)", "status"
        );
        for r in &self.rows {
            let status = match r.matches {
                Some(true) => "ok",
                Some(false) => "FLAG",
                None => "-",
            };
            let _ = writeln!(
                out,
                "{:<14} {:<28} {:>14} {:>10} {:>8} {:>10}  {:<6} {}",
                r.host,
                r.method,
                r.exact,
                r.millions,
                r.published.as_deref().unwrap_or("-"),
                r.delta.map_or("-".into(), |d| format!("{d:+.4}")),
                status,
                r.convention
            );
        }
        if !self.ratios.is_empty() {
            let _ = writeln!(out, "\nreduction factors");
            for r in &self.ratios {
                let _ = writeln!(
                    out,
                    "{:<14} {} / {} = {:.1} (quoted {}, {:+.2}%){}",
                    r.host,
                    r.numerator,
                    r.denominator,
                    r.value,
                    r.published,
                    100.0 * r.rel_delta,
                    if r.flagged { "  FLAG" } else { "" }
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimals_follow_printed_value() {
        assert_eq!(decimals_of("0.02"), 2);
        assert_eq!(decimals_of("8.39"), 2);
        assert_eq!(decimals_of("0.3"), 1);
        assert_eq!(decimals_of("6739"), 0);
    }

    #[test]
    fn block_size_matches_twelve_d_squared_rule() {
        let h = preset("gpt2_medium").unwrap();
        assert_eq!(block_params(&h), 12 * 1024 * 1024 + 13 * 1024);
    }
}
