use crate::data::{RtimCache, TargetInterval, TrainingInstance};
use crate::error::Result;
use crate::model::TsRec;

/// Scores `base` once per grid bin, substituting that bin as the target
/// interval and keeping every other feature fixed.
pub fn probe_interval_response(
    model: &TsRec,
    rtim: &RtimCache,
    base: &TrainingInstance,
    grid: &[u32],
) -> Result<Vec<(u32, f64)>> {
    let frozen = model.freeze(rtim)?;
    let insts: Vec<TrainingInstance> = grid
        .iter()
        .map(|&b| TrainingInstance {
            target_interval: TargetInterval::Bin(b),
            ..base.clone()
        })
        .collect();
    let scores = model.score_many(&insts, rtim, &frozen)?;
    Ok(grid.iter().copied().zip(scores).collect())
}

/// Bin with the highest score; the smallest bin wins ties.
pub fn curve_argmax(curve: &[(u32, f64)]) -> Option<u32> {
    curve
        .iter()
        .fold(None, |best: Option<(u32, f64)>, &(b, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((b, s)),
        })
        .map(|(b, _)| b)
}
