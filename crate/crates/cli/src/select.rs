//! Reference-family selection by the entropic rule.

use std::path::Path;

use serde::{Deserialize, Serialize};
use trsbts_core::descriptor::cumulative_avg_cov;
use trsbts_core::generator::realized_rate;
use trsbts_core::linalg::{unvech, SymMatrix};
use trsbts_core::path::fmt_f64;
use trsbts_core::scoring::{entropic_select, DescriptorFamily, EntropicConfig};
use trsbts_core::CoarsePath;

use crate::error::{CliError, Result};
use crate::io::write_csv_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum FamilySpec {
    /// `scale · I` on every step.
    Identity { scale: f64 },
    /// A fixed rate in vech form.
    Matrix { vech: Vec<f64> },
    /// The pooled realised rate of the paths themselves.
    Empirical,
    /// Each path's causal cumulative average covariance.
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub name: String,
    pub family: FamilySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropic: Option<EntropicConfig>,
}

impl SelectSection {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(CliError::config("select_reference.candidates is empty"));
        }
        if let Some(e) = &self.entropic {
            e.validate()?;
        }
        Ok(())
    }
}

pub fn build_family(spec: &FamilySpec, paths: &[CoarsePath]) -> Result<DescriptorFamily> {
    let d = paths.first().ok_or_else(|| CliError::data("no paths to select on"))?.dim();
    Ok(match spec {
        FamilySpec::Identity { scale } => DescriptorFamily::Constant(SymMatrix::identity(d).scale(*scale)),
        FamilySpec::Matrix { vech } => DescriptorFamily::Constant(unvech(vech)?),
        FamilySpec::Empirical => DescriptorFamily::Constant(realized_rate(paths)?),
        FamilySpec::Cumulative => DescriptorFamily::PerPath(
            paths
                .iter()
                .map(|p| cumulative_avg_cov(p, p.dt))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub names: Vec<String>,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

pub fn run_select(sec: &SelectSection, paths: &[CoarsePath], cfg: &EntropicConfig) -> Result<Selection> {
    sec.validate()?;
    let fams = sec
        .candidates
        .iter()
        .map(|c| build_family(&c.family, paths))
        .collect::<Result<Vec<_>>>()?;
    let (chosen, scores) = entropic_select(&fams, paths, cfg)?;
    Ok(Selection {
        names: sec.candidates.iter().map(|c| c.name.clone()).collect(),
        scores,
        chosen,
    })
}

pub fn write_selection(dir: &Path, s: &Selection) -> Result<()> {
    write_csv_atomic(&dir.join("select_reference.csv"), |w| {
        w.write_record(["candidate", "score", "selected"])?;
        for (k, (n, v)) in s.names.iter().zip(&s.scores).enumerate() {
            w.write_record([n.as_str(), &fmt_f64(*v), if k == s.chosen { "1" } else { "0" }])?;
        }
        Ok(())
    })
}
