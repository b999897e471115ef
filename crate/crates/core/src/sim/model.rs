//! Plain-text model descriptions.
//!
//! One layer per line, `#` starts a comment:
//!
//! ```text
//! conv k_n k_h k_w c_i h_i w_i s p
//! fc   m k
//! pool h_o w_o c
//! ```
//!
//! Every conv line carries its full geometry, so no shape inference happens
//! between layers. The batch size is supplied at run time.

use std::fmt;
use std::path::Path;

use crate::conv::im2col_workspace_bytes;
use crate::error::{ConvError, Result};
use crate::tensor::{gemm_dims, ConvParams, GemmDims};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
    Pool,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Pool => "pool",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Geometry with `b = 1`; see [`LayerSpec::conv_params`].
    Conv(ConvParams),
    /// Dense layer: `m` outputs from `k` inputs.
    Fc { m: usize, k: usize },
    /// Output shape only; pooling does no arithmetic here.
    Pool { h_o: usize, w_o: usize, c: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv(_) => LayerKind::Conv,
            LayerSpec::Fc { .. } => LayerKind::Fc,
            LayerSpec::Pool { .. } => LayerKind::Pool,
        }
    }

    /// Conv geometry at batch `b`.
    pub fn conv_params(&self, b: usize) -> Option<ConvParams> {
        match self {
            LayerSpec::Conv(cp) => Some(cp.with_batch(b)),
            _ => None,
        }
    }

    /// GEMM extents at batch `b` (`None` for pooling).
    pub fn gemm_dims(&self, b: usize) -> Option<GemmDims> {
        match *self {
            LayerSpec::Conv(cp) => gemm_dims(&cp.with_batch(b)).ok(),
            LayerSpec::Fc { m, k } => Some(GemmDims::new(m, b, k)),
            LayerSpec::Pool { .. } => None,
        }
    }

    /// Elements of the input and output activations at batch `b`.
    pub fn activation_lens(&self, b: usize) -> (usize, usize) {
        match *self {
            LayerSpec::Conv(cp) => {
                let d = gemm_dims(&cp.with_batch(b)).expect("validated at parse time");
                (cp.h_i * cp.w_i * cp.c_i * b, d.m * d.n)
            }
            LayerSpec::Fc { m, k } => (k * b, m * b),
            LayerSpec::Pool { h_o, w_o, c } => (0, h_o * w_o * c * b),
        }
    }

    /// Elements of the weight tensor.
    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv(cp) => cp.k_n * cp.k_h * cp.k_w * cp.c_i,
            LayerSpec::Fc { m, k } => m * k,
            LayerSpec::Pool { .. } => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvParams> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Conv(cp) => Some(cp),
            _ => None,
        })
    }
}

/// Reads a model file. The model is named after the file stem.
pub fn parse_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    parse_model_str(&name, &text)
}

pub fn parse_model_str(name: &str, text: &str) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("");
        let mut tokens = body.split_whitespace();
        let Some(kind) = tokens.next() else { continue };
        let args = tokens
            .map(|t| {
                t.parse::<usize>().map_err(|_| ConvError::Parse {
                    line,
                    message: format!("`{t}` is not a non-negative integer"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(parse_layer(kind, &args, line)?);
    }
    if !layers.iter().any(|l| l.kind() == LayerKind::Conv) {
        return Err(ConvError::Parse {
            line: text.lines().count(),
            message: "model has no conv layer".into(),
        });
    }
    Ok(ModelSpec {
        name: name.to_string(),
        layers,
    })
}

fn parse_layer(kind: &str, args: &[usize], line: usize) -> Result<LayerSpec> {
    let expect = |n: usize| -> Result<()> {
        if args.len() != n {
            return Err(ConvError::Parse {
                line,
                message: format!("`{kind}` takes {n} values, got {}", args.len()),
            });
        }
        Ok(())
    };
    let positive = |what: &str| -> Result<()> {
        if args.contains(&0) {
            return Err(ConvError::Parse {
                line,
                message: format!("{what} extents must be positive"),
            });
        }
        Ok(())
    };
    match kind {
        "conv" => {
            expect(8)?;
            let cp = ConvParams {
                k_n: args[0],
                k_h: args[1],
                k_w: args[2],
                c_i: args[3],
                h_i: args[4],
                w_i: args[5],
                b: 1,
                s: args[6],
                p: args[7],
            };
            cp.validate().map_err(|e| ConvError::Parse {
                line,
                message: e.to_string(),
            })?;
            Ok(LayerSpec::Conv(cp))
        }
        "fc" => {
            expect(2)?;
            positive("fc")?;
            Ok(LayerSpec::Fc { m: args[0], k: args[1] })
        }
        "pool" => {
            expect(3)?;
            positive("pool")?;
            Ok(LayerSpec::Pool {
                h_o: args[0],
                w_o: args[1],
                c: args[2],
            })
        }
        other => Err(ConvError::UnknownLayerKind {
            line,
            kind: other.to_string(),
        }),
    }
}

/// Largest explicit-im2col workspace over the conv layers at batch `b`, in bytes.
pub fn model_workspace(model: &ModelSpec, b: usize) -> u64 {
    model
        .conv_layers()
        .filter_map(|cp| im2col_workspace_bytes(&cp.with_batch(b)).ok())
        .max()
        .unwrap_or(0)
}
