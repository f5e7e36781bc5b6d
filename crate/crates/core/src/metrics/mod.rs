//! Evaluation metrics over generated group motion.
//!
//! Realism scores (FID, GMR) are Fréchet distances over hand-built
//! kinematic descriptors, not learned embeddings, so their absolute values
//! are only comparable between runs of this crate.

mod features;
mod frechet;
mod group;

pub use features::{
    dancer_joints, group_features, kinematic_features, pfc, pfc_from_joints, JointTrack, FEATURE_DIM,
    JOINT_SPEED_STATS, POSITION_STATS, ROOT_STATS,
};
pub use frechet::{diversity, frechet_distance, COV_EPS};
pub use group::{
    gmc, gmc_from_profiles, lagged_correlation, segments_intersect, speed_profile, tif, tif_from_paths, TifCount,
    GMC_MAX_LAG,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::motion::{GroupMotion, MotionError, Skeleton};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("feature dimension mismatch: {expected} vs {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Scores for a generated set against a reference set. Distribution scores
/// are `None` when a set is too small to estimate a covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gmr: Option<f64>,
    pub gmc: Option<f64>,
    pub tif: Option<f64>,
    pub fid: Option<f64>,
    pub div: Option<f64>,
    pub pfc: f64,
    pub generated: usize,
    pub reference: usize,
    pub dancer_sequences: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(
    generated: &[GroupMotion],
    reference: &[GroupMotion],
    skeleton: &Skeleton,
) -> Result<MetricReport, MetricsError> {
    let dancer_feats = |set: &[GroupMotion]| -> Result<Vec<Vec<f64>>, MetricsError> {
        let mut out = Vec::new();
        for m in set {
            for k in 0..m.dancers() {
                out.push(kinematic_features(&dancer_joints(m, k, skeleton)?)?);
            }
        }
        Ok(out)
    };
    let group_feats = |set: &[GroupMotion]| -> Result<Vec<Vec<f64>>, MetricsError> {
        set.iter().map(|m| group_features(m, skeleton)).collect()
    };
    let (gen_d, ref_d) = (dancer_feats(generated)?, dancer_feats(reference)?);
    let (gen_g, ref_g) = (group_feats(generated)?, group_feats(reference)?);

    let mut gmcs = Vec::new();
    let mut tifs = Vec::new();
    let mut pfcs = Vec::new();
    for m in generated {
        if m.dancers() >= 2 {
            gmcs.push(gmc(m, skeleton)?);
            tifs.push(tif(m)?.rate);
        }
        if m.frames() >= 3 {
            for k in 0..m.dancers() {
                pfcs.push(pfc(m, k, skeleton)?);
            }
        }
    }
    Ok(MetricReport {
        gmr: frechet_distance(&gen_g, &ref_g).ok(),
        gmc: mean(&gmcs),
        tif: mean(&tifs),
        fid: frechet_distance(&gen_d, &ref_d).ok(),
        div: diversity(&gen_d).ok(),
        pfc: mean(&pfcs).unwrap_or(0.0),
        generated: generated.len(),
        reference: reference.len(),
        dancer_sequences: gen_d.len(),
    })
}

impl MetricReport {
    /// Two-column text table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        for (k, v) in [
            ("GMR", fmt(self.gmr)),
            ("GMC", fmt(self.gmc)),
            ("TIF", fmt(self.tif)),
            ("FID", fmt(self.fid)),
            ("Div", fmt(self.div)),
            ("PFC", fmt(Some(self.pfc))),
        ] {
            let _ = writeln!(out, "{k:<4} {v:>14}");
        }
        let _ = writeln!(
            out,
            "{} generated, {} reference, {} dancer sequences",
            self.generated, self.reference, self.dancer_sequences
        );
        out
    }
}

#[cfg(test)]
mod tests;
