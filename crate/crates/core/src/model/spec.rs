//! Textual layer specs, e.g. `conv k=3 s=1 p=1 groups=8 layout=R4`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Feature groups; the model default when `None`.
    pub groups: Option<usize>,
    /// Layout text; the model default when `None`.
    pub layout: Option<String>,
    /// Optional explicit channel count, checked against the layout.
    pub channels: Option<usize>,
}

impl ConvSpec {
    /// `k x k`, stride 1, padding that preserves the extent.
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            pad: kernel / 2,
            groups: None,
            layout: None,
            channels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSpec {
    Conv(ConvSpec),
    BatchNorm,
    Relu,
    MaxPool { k: usize, stride: usize },
    GlobalAvgPool,
    Linear { out: Option<usize> },
    /// Residual blocks: accepted by the parser, rejected by the builder.
    Block(String),
}

fn spec_err(text: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: format!("layer `{text}`"),
        reason: reason.into(),
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut words = text.split_whitespace();
        let kind = words.next().ok_or_else(|| spec_err(text, "empty layer"))?;
        let mut kv = Vec::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| spec_err(text, format!("expected key=value, got `{w}`")))?;
            kv.push((k, v));
        }
        let num = |v: &str| v.parse::<usize>().map_err(|_| spec_err(text, format!("`{v}` is not a count")));
        let reject_extra = |allowed: &[&str]| -> Result<()> {
            match kv.iter().find(|(k, _)| !allowed.contains(k)) {
                Some((k, _)) => Err(spec_err(text, format!("unknown key `{k}` for `{kind}`"))),
                None => Ok(()),
            }
        };
        Ok(match kind {
            "conv" => {
                reject_extra(&["k", "s", "p", "groups", "layout", "channels"])?;
                let mut c = ConvSpec::same(3);
                let mut pad = None;
                for (k, v) in &kv {
                    match *k {
                        "k" => c.kernel = num(v)?,
                        "s" => c.stride = num(v)?,
                        "p" => pad = Some(num(v)?),
                        "groups" => c.groups = Some(num(v)?),
                        "layout" => c.layout = Some(v.to_string()),
                        _ => c.channels = Some(num(v)?),
                    }
                }
                if c.kernel == 0 || c.stride == 0 {
                    return Err(spec_err(text, "kernel and stride must be positive"));
                }
                c.pad = pad.unwrap_or(c.kernel / 2);
                LayerSpec::Conv(c)
            }
            "bn" => {
                reject_extra(&[])?;
                LayerSpec::BatchNorm
            }
            "relu" => {
                reject_extra(&[])?;
                LayerSpec::Relu
            }
            "maxpool" => {
                reject_extra(&["k", "s"])?;
                let mut k = 2;
                let mut stride = None;
                for (key, v) in &kv {
                    match *key {
                        "k" => k = num(v)?,
                        _ => stride = Some(num(v)?),
                    }
                }
                let stride = stride.unwrap_or(k);
                if k == 0 || stride == 0 {
                    return Err(spec_err(text, "pool window and stride must be positive"));
                }
                LayerSpec::MaxPool { k, stride }
            }
            "gap" => {
                reject_extra(&[])?;
                LayerSpec::GlobalAvgPool
            }
            "linear" => {
                reject_extra(&["out"])?;
                let out = kv.first().map(|(_, v)| num(v)).transpose()?;
                LayerSpec::Linear { out }
            }
            "block" => LayerSpec::Block(text.to_string()),
            other => return Err(spec_err(text, format!("unknown layer kind `{other}`"))),
        })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv(c) => {
                write!(f, "conv k={} s={} p={}", c.kernel, c.stride, c.pad)?;
                if let Some(g) = c.groups {
                    write!(f, " groups={g}")?;
                }
                if let Some(l) = &c.layout {
                    write!(f, " layout={}", l.replace(' ', ""))?;
                }
                if let Some(ch) = c.channels {
                    write!(f, " channels={ch}")?;
                }
                Ok(())
            }
            LayerSpec::BatchNorm => f.write_str("bn"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { k, stride } => write!(f, "maxpool k={k} s={stride}"),
            LayerSpec::GlobalAvgPool => f.write_str("gap"),
            LayerSpec::Linear { out: Some(o) } => write!(f, "linear out={o}"),
            LayerSpec::Linear { out: None } => f.write_str("linear"),
            LayerSpec::Block(text) => f.write_str(text),
        }
    }
}

impl TryFrom<String> for LayerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSpec> for String {
    fn from(s: LayerSpec) -> String {
        s.to_string()
    }
}
