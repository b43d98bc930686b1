//! Ablation suites: each variant changes one toggle of a base config and is
//! trained and scored under the same seed and data.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::config::{ApeMode, Hierarchy, HipaConfig, ReceptiveField};
use crate::data::Dataset;
use crate::error::{HipaError, Result};
use crate::metrics::evaluate_model;
use crate::trainer::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// Variable patch hierarchy against a single fixed-size stage.
    Patch,
    /// Learned table, conditional conv and attention-based encodings.
    Ape,
    /// The seven non-empty subsets of receptive-field branches.
    Mrfag,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Patch => "patch",
            Self::Ape => "ape",
            Self::Mrfag => "mrfag",
        }
    }
}

impl FromStr for Suite {
    type Err = HipaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "ape" => Ok(Self::Ape),
            "mrfag" => Ok(Self::Mrfag),
            other => Err(HipaError::InvalidConfig(format!("unknown suite {other:?} (patch, ape, mrfag)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: HipaConfig,
}

/// Branch subsets in the order Mod0..Mod6.
pub const MRFAG_SUBSETS: [&[ReceptiveField]; 7] = {
    use ReceptiveField::*;
    [&[Rf1], &[Rf3], &[Rf5], &[Rf1, Rf3], &[Rf1, Rf5], &[Rf3, Rf5], &[Rf1, Rf3, Rf5]]
};

pub fn variants(suite: Suite, base: &HipaConfig) -> Vec<Variant> {
    let with = |name: String, f: &dyn Fn(&mut HipaConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant { name, config }
    };
    match suite {
        Suite::Patch => [Hierarchy::Variable, Hierarchy::Fixed]
            .into_iter()
            .map(|h| with(h.to_string(), &|c| c.hierarchy = h))
            .collect(),
        Suite::Ape => [ApeMode::Pe, ApeMode::Cpe, ApeMode::Ape]
            .into_iter()
            .map(|m| with(m.as_str().into(), &|c| c.ape_mode = m))
            .collect(),
        Suite::Mrfag => MRFAG_SUBSETS
            .iter()
            .enumerate()
            .map(|(i, set)| with(format!("mod{i}"), &|c| c.branches = set.to_vec()))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub params: usize,
    pub seed: u64,
    pub data_hash: u64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,psnr_db,ssim,params\n");
        for r in &self.rows {
            writeln!(out, "{},{:.4},{:.6},{}", r.variant, r.psnr, r.ssim, r.params).unwrap();
        }
        out
    }

    /// Every variant saw the same seed, data and step count.
    pub fn is_fair(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| (w[0].seed, w[0].data_hash, w[0].steps) == (w[1].seed, w[1].data_hash, w[1].steps))
    }
}

/// Trains each variant for `steps` steps from scratch and scores its final
/// stage on `data`. Per-variant checkpoints go to `out_dir/<variant>/`.
pub fn run_ablation(
    suite: Suite,
    base: &HipaConfig,
    data: &Dataset,
    steps: u64,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let data_hash = data.fingerprint();
    let mut rows = Vec::new();
    for v in variants(suite, base) {
        let mut t = Trainer::new(&v.config)?;
        let dir = out_dir.map(|d| d.join(&v.name));
        t.run(data, steps, dir.as_deref(), |_| {})?;
        let report = evaluate_model(&t.model, &t.params, data)?;
        let row = AblationRow {
            variant: v.name,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            params: t.model.num_params(),
            seed: v.config.seed,
            data_hash,
            steps: t.step,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationReport { suite, rows })
}
