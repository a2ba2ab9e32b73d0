use crate::model::XFieldCoord;

use super::TrainError;

/// The `k` pool members nearest to `target` (L2 over normalized
/// coordinates), ties broken by pool order. Members equal to `target` are
/// never returned.
pub fn neighbor_select(target: &XFieldCoord, pool: &[XFieldCoord], k: usize) -> Result<Vec<usize>, TrainError> {
    let mut candidates: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .filter(|(_, c)| *c != target)
        .map(|(i, c)| (c.distance_sq(target), i))
        .collect();
    if candidates.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(k).map(|(_, i)| i).collect())
}

/// All others for small collections, otherwise the four nearest.
pub fn default_k(pool_size: usize) -> usize {
    if pool_size <= 9 {
        pool_size.saturating_sub(1).max(1)
    } else {
        4
    }
}
