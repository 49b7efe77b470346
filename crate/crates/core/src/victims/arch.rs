use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four fair-representation learners under attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VictimKind {
    #[serde(rename = "CFAIR")]
    Cfair,
    #[serde(rename = "CFAIR_EO")]
    CfairEo,
    #[serde(rename = "ICVAE_S")]
    IcvaeS,
    #[serde(rename = "ICVAE_US")]
    IcvaeUs,
}

impl VictimKind {
    pub const ALL: [VictimKind; 4] = [
        VictimKind::Cfair,
        VictimKind::CfairEo,
        VictimKind::IcvaeS,
        VictimKind::IcvaeUs,
    ];

    pub fn is_adversarial(self) -> bool {
        matches!(self, VictimKind::Cfair | VictimKind::CfairEo)
    }

    pub fn name(self) -> &'static str {
        match self {
            VictimKind::Cfair => "CFAIR",
            VictimKind::CfairEo => "CFAIR_EO",
            VictimKind::IcvaeS => "ICVAE_S",
            VictimKind::IcvaeUs => "ICVAE_US",
        }
    }
}

impl fmt::Display for VictimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VictimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CFAIR" => Ok(VictimKind::Cfair),
            "CFAIR_EO" => Ok(VictimKind::CfairEo),
            "ICVAE_S" => Ok(VictimKind::IcvaeS),
            "ICVAE_US" => Ok(VictimKind::IcvaeUs),
            other => Err(Error::InvalidConfig(format!("unknown victim kind `{other}`"))),
        }
    }
}

/// Layer widths of a victim. A hidden width of 0 means a linear map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    pub repr_dim: usize,
    #[serde(default)]
    pub encoder_hidden: usize,
    /// Hidden width of discriminators (CFAIR family) or decoder and
    /// classifier (ICVAE family).
    #[serde(default = "default_aux_hidden")]
    pub aux_hidden: usize,
    #[serde(default = "default_classes")]
    pub sensitive_classes: usize,
    /// Label classifier head; `None` picks the kind's default.
    #[serde(default)]
    pub classifier: Option<bool>,
    #[serde(default)]
    pub weights: LossWeights,
}

fn default_aux_hidden() -> usize {
    50
}

fn default_classes() -> usize {
    2
}

/// Loss coefficients the cited designs leave open.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub lambda_adv: f64,
    #[serde(default = "tenth")]
    pub beta: f64,
    #[serde(default = "one")]
    pub lambda_mi: f64,
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            beta: 0.1,
            lambda_mi: 1.0,
        }
    }
}

impl Arch {
    pub fn new(input_dim: usize, repr_dim: usize) -> Self {
        Arch {
            input_dim,
            repr_dim,
            encoder_hidden: 0,
            aux_hidden: default_aux_hidden(),
            sensitive_classes: 2,
            classifier: None,
            weights: LossWeights::default(),
        }
    }

    pub fn encoder_hidden(mut self, w: usize) -> Self {
        self.encoder_hidden = w;
        self
    }

    pub fn aux_hidden(mut self, w: usize) -> Self {
        self.aux_hidden = w;
        self
    }

    pub fn sensitive_classes(mut self, k: usize) -> Self {
        self.sensitive_classes = k;
        self
    }

    pub fn with_classifier(mut self, on: bool) -> Self {
        self.classifier = Some(on);
        self
    }

    pub fn weights(mut self, w: LossWeights) -> Self {
        self.weights = w;
        self
    }

    pub(crate) fn has_classifier(&self, kind: VictimKind) -> bool {
        self.classifier.unwrap_or(kind != VictimKind::IcvaeUs)
    }

    pub(crate) fn validate(&self, kind: VictimKind) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        if self.input_dim == 0 || self.repr_dim == 0 {
            return bad("input_dim and repr_dim must be positive".into());
        }
        if self.sensitive_classes < 2 {
            return bad("sensitive_classes must be at least 2".into());
        }
        let w = self.weights;
        if !(w.lambda_adv >= 0.0 && w.beta >= 0.0 && w.lambda_mi >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        match kind {
            VictimKind::Cfair | VictimKind::CfairEo => {
                if self.sensitive_classes != 2 {
                    return bad(format!("{kind} supports binary sensitive attributes only"));
                }
                if self.classifier == Some(false) {
                    return bad(format!("{kind} requires a label classifier"));
                }
            }
            VictimKind::IcvaeUs => {
                if self.classifier == Some(true) {
                    return bad("ICVAE_US is unsupervised and has no label classifier".into());
                }
            }
            VictimKind::IcvaeS => {
                if self.classifier == Some(false) {
                    return bad("ICVAE_S requires a label classifier".into());
                }
            }
        }
        Ok(())
    }
}

/// Named contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Trained through gradient reversal (discriminators).
    pub adversarial: bool,
    /// Part of the encoder `h(x; θ)`.
    pub encoder: bool,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".b")
    }
}

#[derive(Default)]
pub(crate) struct LayoutBuilder {
    pub blocks: Vec<ParamBlock>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize, adversarial: bool, encoder: bool) {
        self.blocks.push(ParamBlock {
            name,
            rows,
            cols,
            offset: self.offset,
            adversarial,
            encoder,
        });
        self.offset += rows * cols;
    }

    /// Weight `in x out` followed by bias `1 x out`.
    pub fn dense(&mut self, prefix: &str, input: usize, output: usize, adversarial: bool, encoder: bool) {
        self.push(format!("{prefix}.w"), input, output, adversarial, encoder);
        self.push(format!("{prefix}.b"), 1, output, adversarial, encoder);
    }

    /// Optional hidden layer then output layer.
    pub fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize, adversarial: bool, encoder: bool) {
        if hidden == 0 {
            self.dense(&format!("{prefix}.out"), input, output, adversarial, encoder);
        } else {
            self.dense(&format!("{prefix}.hidden"), input, hidden, adversarial, encoder);
            self.dense(&format!("{prefix}.out"), hidden, output, adversarial, encoder);
        }
    }
}

/// Parameter layout of `kind` over `arch`, in flattening order.
pub(crate) fn layout(kind: VictimKind, arch: &Arch) -> Vec<ParamBlock> {
    let mut b = LayoutBuilder::default();
    let (m, d, h) = (arch.input_dim, arch.repr_dim, arch.aux_hidden);
    match kind {
        VictimKind::Cfair | VictimKind::CfairEo => {
            b.mlp("encoder", m, arch.encoder_hidden, d, false, true);
            for k in 0..2 {
                b.mlp(&format!("disc{k}"), d, h, 1, true, false);
            }
            b.dense("classifier.out", d, 1, false, false);
        }
        VictimKind::IcvaeS | VictimKind::IcvaeUs => {
            let enc_in = if arch.encoder_hidden == 0 {
                m
            } else {
                b.dense("encoder.hidden", m, arch.encoder_hidden, false, true);
                arch.encoder_hidden
            };
            b.dense("encoder.mean", enc_in, d, false, true);
            b.dense("encoder.logvar", enc_in, d, false, false);
            b.mlp("decoder", d + arch.sensitive_classes, h, m, false, false);
            if arch.has_classifier(kind) {
                b.mlp("classifier", d, h, 1, false, false);
            }
        }
    }
    b.blocks
}
