//! `key = value` configuration files.
//!
//! Keys are dotted paths, `#` starts a comment. Unknown and repeated keys are
//! errors; the optional knobs listed in [`HipaConfig::OPTIONAL`] fall back to
//! their defaults when absent, everything else is required.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HipaError, Result};

/// Receptive field of one dilated channel-attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReceptiveField {
    Rf1,
    Rf3,
    Rf5,
}

impl ReceptiveField {
    pub const ALL: [ReceptiveField; 3] = [Self::Rf1, Self::Rf3, Self::Rf5];

    /// (kernel, dilation): 1×1, 3×3, and 3×3 dilated by 2.
    pub fn kernel_dilation(self) -> (usize, usize) {
        match self {
            Self::Rf1 => (1, 1),
            Self::Rf3 => (3, 1),
            Self::Rf5 => (3, 2),
        }
    }

    pub fn extent(self) -> usize {
        let (k, d) = self.kernel_dilation();
        d * (k - 1) + 1
    }
}

impl fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.extent())
    }
}

impl FromStr for ReceptiveField {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "1" => Ok(Self::Rf1),
            "3" => Ok(Self::Rf3),
            "5" => Ok(Self::Rf5),
            _ => Err(format!("receptive field must be 1, 3 or 5, got {s:?}")),
        }
    }
}

/// Position encoding used inside the stage Transformers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApeMode {
    None,
    /// Learned absolute table.
    Pe,
    /// Depthwise 3×3 convolution.
    Cpe,
    /// Convolution gated by channel attention.
    Ape,
}

impl ApeMode {
    pub const ALL: [ApeMode; 4] = [Self::None, Self::Pe, Self::Cpe, Self::Ape];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Pe => "pe",
            Self::Cpe => "cpe",
            Self::Ape => "ape",
        }
    }
}

impl fmt::Display for ApeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ApeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("ape_mode must be one of none|pe|cpe|ape, got {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hierarchy {
    /// Quadrants, then halves, then the whole image.
    Variable,
    /// One full-image trunk at a single patch size.
    Fixed,
}

impl fmt::Display for Hierarchy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Variable => "variable",
            Self::Fixed => "fixed",
        })
    }
}

impl FromStr for Hierarchy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "variable" => Ok(Self::Variable),
            "fixed" => Ok(Self::Fixed),
            _ => Err(format!("hierarchy must be variable|fixed, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HipaConfig {
    pub scale: usize,
    pub channels: usize,
    /// MRFAM count per stage.
    pub mrfam_per_stage: [usize; 3],
    pub res_blocks: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub layers: usize,
    pub ape_mode: ApeMode,
    pub hierarchy: Hierarchy,
    /// Active attention branches, sorted and unique.
    pub branches: Vec<ReceptiveField>,
    /// Squeeze width of the branch gates.
    pub ca_width: usize,
    pub ape_reduction: usize,
    pub mlp_ratio: usize,
    pub loss_weights: [f32; 3],
    pub lr: f32,
    pub batch: usize,
    /// LR crop side used for training.
    pub lr_crop: usize,
    pub ckpt_every: u64,
    pub seed: u64,
}

const DESK: &str = include_str!("../../../configs/desk.cfg");
const PAPER: &str = include_str!("../../../configs/paper.cfg");

const KEYS: [&str; 19] = [
    "model.scale",
    "model.channels",
    "model.mrfam_per_stage",
    "model.res_blocks",
    "model.patch_size",
    "model.heads",
    "model.layers",
    "model.ape_mode",
    "model.hierarchy",
    "model.branches",
    "model.ca_width",
    "model.ape_reduction",
    "model.mlp_ratio",
    "loss.weights",
    "train.lr",
    "train.batch",
    "train.lr_crop",
    "train.ckpt_every",
    "seed",
];

impl HipaConfig {
    /// Keys that may be omitted, with the value they default to.
    pub const OPTIONAL: [(&'static str, &'static str); 12] = [
        ("model.ape_mode", "ape"),
        ("model.hierarchy", "variable"),
        ("model.branches", "1,3,5"),
        ("model.ca_width", "4"),
        ("model.ape_reduction", "4"),
        ("model.mlp_ratio", "2"),
        ("loss.weights", "1,1,1"),
        ("train.lr", "0.0001"),
        ("train.batch", "4"),
        ("train.lr_crop", "48"),
        ("train.ckpt_every", "100"),
        ("seed", "0"),
    ];

    pub fn desk() -> Self {
        Self::parse(DESK).expect("desk preset parses")
    }

    pub fn paper() -> Self {
        Self::parse(PAPER).expect("paper preset parses")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HipaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<Option<(usize, String)>> = vec![None; KEYS.len()];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| HipaError::ConfigParse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(err(format!("empty value for {key}")));
            }
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| err(format!("unknown key {key:?}")))?;
            if values[slot].is_some() {
                return Err(err(format!("duplicate key {key:?}")));
            }
            values[slot] = Some((line_no, value.to_string()));
        }

        let mut get = |key: &str| -> Result<(usize, String)> {
            let slot = KEYS.iter().position(|k| *k == key).expect("known key");
            match values[slot].take() {
                Some(v) => Ok(v),
                None => Self::OPTIONAL
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, d)| (0, d.to_string()))
                    .ok_or_else(|| HipaError::ConfigParse {
                        line: 0,
                        msg: format!("missing required key {key:?}"),
                    }),
            }
        };

        let config = Self {
            scale: field(get("model.scale")?)?,
            channels: field(get("model.channels")?)?,
            mrfam_per_stage: triple(get("model.mrfam_per_stage")?)?,
            res_blocks: field(get("model.res_blocks")?)?,
            patch_size: field(get("model.patch_size")?)?,
            heads: field(get("model.heads")?)?,
            layers: field(get("model.layers")?)?,
            ape_mode: field(get("model.ape_mode")?)?,
            hierarchy: field(get("model.hierarchy")?)?,
            branches: {
                let (line, v) = get("model.branches")?;
                let mut b: Vec<ReceptiveField> = list(line, &v)?;
                b.sort();
                b.dedup();
                b
            },
            ca_width: field(get("model.ca_width")?)?,
            ape_reduction: field(get("model.ape_reduction")?)?,
            mlp_ratio: field(get("model.mlp_ratio")?)?,
            loss_weights: triple(get("loss.weights")?)?,
            lr: field(get("train.lr")?)?,
            batch: field(get("train.batch")?)?,
            lr_crop: field(get("train.lr_crop")?)?,
            ckpt_every: field(get("train.ckpt_every")?)?,
            seed: field(get("seed")?)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HipaError::InvalidConfig(msg));
        if !matches!(self.scale, 2..=4) {
            return Err(HipaError::UnsupportedScale(self.scale));
        }
        for (name, v) in [
            ("model.channels", self.channels),
            ("model.res_blocks", self.res_blocks),
            ("model.patch_size", self.patch_size),
            ("model.heads", self.heads),
            ("model.ca_width", self.ca_width),
            ("model.ape_reduction", self.ape_reduction),
            ("model.mlp_ratio", self.mlp_ratio),
            ("train.batch", self.batch),
            ("train.lr_crop", self.lr_crop),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.mrfam_per_stage.contains(&0) {
            return bad("every model.mrfam_per_stage entry must be >= 1".into());
        }
        if self.branches.is_empty() {
            return bad("model.branches must name at least one branch".into());
        }
        if self.token_dim() % self.heads != 0 {
            return bad(format!(
                "model.heads = {} must divide the token dim patch_size² · channels = {}",
                self.heads,
                self.token_dim()
            ));
        }
        if self.lr_crop % (2 * self.patch_size) != 0 {
            return bad(format!(
                "train.lr_crop = {} must be divisible by 2 · patch_size = {}",
                self.lr_crop,
                2 * self.patch_size
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss.weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// LR extents must be multiples of this for a training forward pass.
    pub fn size_multiple(&self) -> usize {
        2 * self.patch_size
    }

    /// Canonical text form: every key, fixed order, no comments. Parsing it
    /// reproduces `self` exactly.
    pub fn to_canonical(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let vals: [String; 19] = [
            self.scale.to_string(),
            self.channels.to_string(),
            join(&self.mrfam_per_stage.map(|g| g.to_string())),
            self.res_blocks.to_string(),
            self.patch_size.to_string(),
            self.heads.to_string(),
            self.layers.to_string(),
            self.ape_mode.to_string(),
            self.hierarchy.to_string(),
            join(&self.branches.iter().map(|b| b.to_string()).collect::<Vec<_>>()),
            self.ca_width.to_string(),
            self.ape_reduction.to_string(),
            self.mlp_ratio.to_string(),
            join(&self.loss_weights.map(|w| w.to_string())),
            self.lr.to_string(),
            self.batch.to_string(),
            self.lr_crop.to_string(),
            self.ckpt_every.to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn field<V: FromStr>((line, raw): (usize, String)) -> Result<V>
where
    V::Err: fmt::Display,
{
    raw.parse()
        .map_err(|e: V::Err| HipaError::ConfigParse { line, msg: format!("{raw:?}: {e}") })
}

fn list<V: FromStr>(line: usize, raw: &str) -> Result<Vec<V>>
where
    V::Err: fmt::Display,
{
    raw.split(',').map(|p| field((line, p.trim().to_string()))).collect()
}

fn triple<V: FromStr + Copy>((line, raw): (usize, String)) -> Result<[V; 3]>
where
    V::Err: fmt::Display,
{
    let v: Vec<V> = list(line, &raw)?;
    v.try_into().map_err(|v: Vec<V>| HipaError::ConfigParse {
        line,
        msg: format!("expected 3 comma-separated values, got {}", v.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_hold_expected_sizes() {
        let p = HipaConfig::paper();
        assert_eq!(p.mrfam_per_stage, [5, 5, 20]);
        assert_eq!((p.res_blocks, p.channels, p.patch_size, p.heads, p.layers), (5, 64, 4, 4, 4));
        let d = HipaConfig::desk();
        assert_eq!(d.mrfam_per_stage, [1, 1, 2]);
        assert_eq!((d.res_blocks, d.channels, d.patch_size, d.heads, d.layers, d.scale), (1, 8, 2, 2, 1, 2));
        assert_eq!(d.branches, ReceptiveField::ALL.to_vec());
    }

    #[test]
    fn canonical_round_trip() {
        let mut c = HipaConfig::desk();
        c.lr = 3.7e-4;
        c.loss_weights = [0.0, 0.25, 1.0];
        c.branches = vec![ReceptiveField::Rf3, ReceptiveField::Rf5];
        c.ape_mode = ApeMode::Cpe;
        c.hierarchy = Hierarchy::Fixed;
        c.seed = u64::MAX;
        let text = c.to_canonical();
        assert_eq!(HipaConfig::parse(&text).unwrap(), c);
        assert_eq!(HipaConfig::parse(&text).unwrap().to_canonical(), text);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{}model.chanels = 8\n", HipaConfig::desk().to_canonical());
        let e = HipaConfig::parse(&text).unwrap_err();
        assert!(matches!(e, HipaError::ConfigParse { line: 20, .. }), "{e}");
    }

    #[test]
    fn duplicate_and_missing_keys() {
        let dup = format!("{}seed = 3\n", HipaConfig::desk().to_canonical());
        assert!(HipaConfig::parse(&dup).is_err());
        let missing: String = HipaConfig::desk()
            .to_canonical()
            .lines()
            .filter(|l| !l.starts_with("model.channels"))
            .map(|l| format!("{l}\n"))
            .collect();
        let e = HipaConfig::parse(&missing).unwrap_err().to_string();
        assert!(e.contains("model.channels"), "{e}");
    }

    #[test]
    fn comments_and_defaults() {
        let text = "# header\nmodel.scale = 3 # trailing\nmodel.channels=4\nmodel.mrfam_per_stage = 1, 2, 3\n\
                    model.res_blocks = 1\nmodel.patch_size = 2\nmodel.heads = 1\nmodel.layers = 0\ntrain.lr_crop = 8\n";
        let c = HipaConfig::parse(text).unwrap();
        assert_eq!(c.scale, 3);
        assert_eq!(c.mrfam_per_stage, [1, 2, 3]);
        assert_eq!(c.ape_mode, ApeMode::Ape);
        assert_eq!(c.loss_weights, [1.0; 3]);
        assert_eq!(c.lr, 1e-4);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let base = HipaConfig::desk();
        let mut c = base.clone();
        c.scale = 8;
        assert!(matches!(c.validate(), Err(HipaError::UnsupportedScale(8))));
        let mut c = base.clone();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.lr_crop = 18;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.mrfam_per_stage = [1, 0, 1];
        assert!(c.validate().is_err());
        let mut c = base;
        c.branches.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn bad_values_report_their_line() {
        let text = HipaConfig::desk().to_canonical().replace("model.ape_mode = ape", "model.ape_mode = rope");
        let e = HipaConfig::parse(&text).unwrap_err();
        assert!(matches!(e, HipaError::ConfigParse { line: 8, .. }), "{e}");
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(ReceptiveField::ALL.map(ReceptiveField::extent), [1, 3, 5]);
    }
}
