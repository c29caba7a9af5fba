use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dyshiftmax::DyShiftMaxConfig;
use crate::error::{config_err, Error, Result};
use crate::microfac::GroupRepair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    M0,
    M1,
    M2,
    M3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::M0, Variant::M1, Variant::M2, Variant::M3];

    /// Published `(MAdds, parameters)` budget.
    pub fn budget(self) -> (f64, f64) {
        match self {
            Variant::M0 => (4e6, 1.0e6),
            Variant::M1 => (6e6, 1.8e6),
            Variant::M2 => (12e6, 2.4e6),
            Variant::M3 => (21e6, 2.6e6),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M0" => Ok(Variant::M0),
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            "M3" => Ok(Variant::M3),
            _ => Err(config_err!("unknown model variant {s:?} (expected M0..M3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "A")]
    MicroA,
    #[serde(rename = "B")]
    MicroB,
    #[serde(rename = "C")]
    MicroC,
}

impl BlockKind {
    pub fn slots(self) -> usize {
        match self {
            BlockKind::MicroA => 2,
            BlockKind::MicroB | BlockKind::MicroC => 3,
        }
    }

    pub fn letter(self) -> char {
        match self {
            BlockKind::MicroA => 'A',
            BlockKind::MicroB => 'B',
            BlockKind::MicroC => 'C',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActKind {
    Relu,
    Dysm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Bn,
    None,
}

/// One row of an architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub k: usize,
    /// Depthwise output width for MicroA, block output width otherwise.
    pub channels: usize,
    /// Bottleneck width; the block output width for MicroA.
    pub hidden: usize,
    pub stride: usize,
    /// Activation of slots A1, A2 (and A3).
    pub acts: Vec<ActKind>,
    #[serde(default)]
    pub skip: bool,
}

impl BlockSpec {
    pub fn out_channels(&self) -> usize {
        match self.kind {
            BlockKind::MicroA => self.hidden,
            _ => self.channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub hidden: usize,
    /// Groups of the 1×3 expanding convolution.
    pub groups: usize,
}

/// Knobs shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub lambda: f64,
    pub group_repair: GroupRepair,
    pub norm: Norm,
    pub bn_eps: f64,
    pub microb_expansion: usize,
    pub dysm: DyShiftMaxConfig,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            group_repair: GroupRepair::Covering,
            norm: Norm::Bn,
            bn_eps: 1e-5,
            microb_expansion: 2,
            dysm: DyShiftMaxConfig::default(),
        }
    }
}

/// Declarative model description; round-trips through TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_size: usize,
    pub num_classes: usize,
    pub dropout: f64,
    /// Channel reduction ratio the table was designed with; informational.
    pub reduction: usize,
    pub head_width: usize,
    pub options: BuildOptions,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
}

type Row = (usize, BlockKind, usize, usize, usize);

fn table(variant: Variant) -> (usize, usize, Vec<Row>) {
    use BlockKind::{MicroA as A, MicroB as B, MicroC as C};
    match variant {
        Variant::M0 => (
            4,
            2,
            vec![(56, A, 3, 16, 8), (28, A, 3, 32, 12), (14, B, 5, 64, 16), (14, C, 5, 128, 32), (7, C, 5, 256, 64), (7, C, 3, 384, 96)],
        ),
        Variant::M1 => (
            6,
            3,
            vec![(56, A, 3, 24, 8), (28, A, 3, 32, 16), (14, B, 5, 96, 16), (14, C, 5, 192, 32), (7, C, 5, 384, 64), (7, C, 3, 576, 96)],
        ),
        Variant::M2 => (
            8,
            4,
            vec![
                (56, A, 3, 32, 12),
                (28, A, 3, 48, 16),
                (28, B, 3, 144, 24),
                (14, C, 5, 192, 32),
                (14, C, 5, 192, 32),
                (14, C, 5, 384, 64),
                (7, C, 5, 576, 96),
                (7, C, 3, 768, 128),
            ],
        ),
        Variant::M3 => (
            12,
            4,
            vec![
                (56, A, 3, 48, 16),
                (28, A, 3, 64, 24),
                (28, B, 3, 144, 24),
                (14, C, 3, 192, 32),
                (14, C, 5, 192, 32),
                (14, C, 5, 384, 64),
                (14, C, 5, 480, 80),
                (14, C, 5, 480, 80),
                (7, C, 5, 720, 120),
                (7, C, 3, 720, 120),
                (7, C, 3, 864, 144),
            ],
        ),
    }
}

/// `(resolution, kind, k, C, C/R)` rows of the architecture table at 224×224.
pub fn architecture_table(variant: Variant) -> Vec<(usize, BlockKind, usize, usize, usize)> {
    table(variant).2
}

impl ModelSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let (stem_c, stem_h, rows) = table(variant);
        let deep = variant == Variant::M3;
        let mut blocks = Vec::with_capacity(rows.len());
        let mut res = 112;
        let mut c_in = stem_c;
        for (r, kind, k, channels, hidden) in rows {
            let stride = if r < res { 2 } else { 1 };
            res = r;
            let acts = (0..kind.slots())
                .map(|slot| if !deep || slot == 0 { ActKind::Dysm } else { ActKind::Relu })
                .collect();
            let mut b = BlockSpec {
                kind,
                k,
                channels,
                hidden,
                stride,
                acts,
                skip: false,
            };
            b.skip = kind == BlockKind::MicroC && stride == 1 && c_in == channels;
            c_in = b.out_channels();
            blocks.push(b);
        }
        let (reduction, head_width, dropout) = match variant {
            Variant::M0 => (4, 512, 0.05),
            Variant::M1 => (6, 768, 0.05),
            Variant::M2 => (6, 576, 0.05),
            Variant::M3 => (6, 832, 0.1),
        };
        Self {
            name: variant.to_string(),
            input_size: 224,
            num_classes: 1000,
            dropout,
            reduction,
            head_width,
            options: BuildOptions::default(),
            stem: StemSpec {
                channels: stem_c,
                hidden: stem_h,
                groups: stem_h,
            },
            blocks,
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        self.name.parse().ok()
    }

    /// Reduced model for desk-scale training on 32×32 inputs: quarter widths,
    /// two stages, one block of each kind.
    pub fn micro(num_classes: usize) -> Self {
        let dysm = |n: usize| vec![ActKind::Dysm; n];
        Self {
            name: "micro".into(),
            input_size: 32,
            num_classes,
            dropout: 0.0,
            reduction: 2,
            head_width: 32,
            options: BuildOptions::default(),
            stem: StemSpec {
                channels: 4,
                hidden: 2,
                groups: 2,
            },
            blocks: vec![
                BlockSpec {
                    kind: BlockKind::MicroA,
                    k: 3,
                    channels: 16,
                    hidden: 8,
                    stride: 2,
                    acts: dysm(2),
                    skip: false,
                },
                BlockSpec {
                    kind: BlockKind::MicroB,
                    k: 3,
                    channels: 16,
                    hidden: 8,
                    stride: 2,
                    acts: dysm(3),
                    skip: false,
                },
                BlockSpec {
                    kind: BlockKind::MicroC,
                    k: 3,
                    channels: 16,
                    hidden: 8,
                    stride: 1,
                    acts: dysm(3),
                    skip: true,
                },
            ],
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot encode model config: {e}"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| config_err!("malformed model config: {e}"))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Structural checks that do not need weights.
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.num_classes == 0 || self.head_width == 0 {
            return Err(config_err!("input size, class count and head width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.stem.channels == 0 || self.stem.hidden == 0 || self.stem.groups == 0 {
            return Err(config_err!("stem widths must be positive"));
        }
        if !self.stem.hidden.is_multiple_of(self.stem.groups) || !self.stem.channels.is_multiple_of(self.stem.groups) {
            return Err(config_err!("stem groups {} must divide {} and {}", self.stem.groups, self.stem.hidden, self.stem.channels));
        }
        let opts = &self.options;
        if !(opts.lambda > 0.0) || opts.microb_expansion == 0 || opts.dysm.j == 0 || opts.dysm.k == 0 {
            return Err(config_err!("λ, MicroB expansion, J and K must be positive"));
        }
        let singles = self.blocks.iter().filter(|b| b.kind == BlockKind::MicroB).count();
        if singles != 1 {
            return Err(config_err!("a model has exactly one MicroB block, found {singles}"));
        }
        let rank = |k: BlockKind| k as u8;
        let mut c_in = self.stem.channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 && rank(b.kind) < rank(self.blocks[i - 1].kind) {
                return Err(config_err!("block {i}: kinds must run A → B → C"));
            }
            if b.k == 0 || b.k % 2 == 0 || b.channels == 0 || b.hidden == 0 || !(1..=2).contains(&b.stride) {
                return Err(config_err!("block {i}: odd k, positive widths and stride 1 or 2 required"));
            }
            if b.acts.len() != b.kind.slots() {
                return Err(config_err!("block {i}: {:?} has {} activation slots, got {}", b.kind, b.kind.slots(), b.acts.len()));
            }
            if b.kind == BlockKind::MicroA && b.channels % c_in != 0 {
                return Err(config_err!("block {i}: MicroA width {} is not a multiple of its input {}", b.channels, c_in));
            }
            if b.skip && !(b.kind == BlockKind::MicroC && b.stride == 1 && c_in == b.channels) {
                return Err(config_err!("block {i}: skip needs a MicroC block with matching input and output shapes"));
            }
            c_in = b.out_channels();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_validate_and_round_trip() {
        for v in Variant::ALL {
            let spec = ModelSpec::for_variant(v);
            spec.validate().unwrap();
            let back = ModelSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
            assert_eq!(back, spec);
        }
        ModelSpec::micro(2).validate().unwrap();
    }

    #[test]
    fn m3_uses_dysm_only_after_depthwise() {
        let spec = ModelSpec::for_variant(Variant::M3);
        for b in &spec.blocks {
            assert_eq!(b.acts[0], ActKind::Dysm);
            assert!(b.acts[1..].iter().all(|&a| a == ActKind::Relu));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut spec = ModelSpec::for_variant(Variant::M0);
        spec.blocks[2].kind = BlockKind::MicroC;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::for_variant(Variant::M0);
        spec.blocks[3].skip = true;
        assert!(spec.validate().is_err());
        assert!(ModelSpec::from_toml("name = 3").is_err());
    }
}
