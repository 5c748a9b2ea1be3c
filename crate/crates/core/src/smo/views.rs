//! Within-window view sampling on the 30-slot azimuth circle.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::smo::render::{CandidateViewSet, ViewImage, NUM_CANDIDATE_VIEWS, VIEW_STEP_DEG};
use crate::Scalar;

/// `min(d, 360 - d)` for two azimuths in degrees.
pub fn circular_difference_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Largest number of consecutive slots whose pairwise circular differences
/// all stay strictly below `omega_deg`. Always at least 1.
pub fn window_capacity(omega_deg: f64) -> usize {
    let mut m = 1;
    while m < NUM_CANDIDATE_VIEWS {
        // widest pair inside a window of m + 1 slots
        let widest = (1..=m)
            .map(|d| circular_difference_deg(0.0, VIEW_STEP_DEG * d as f64))
            .fold(0.0, f64::max);
        if widest < omega_deg {
            m += 1;
        } else {
            break;
        }
    }
    m
}

/// Draw `v` distinct slots from a uniformly placed window, sorted ascending.
pub fn sample_window_slots<R: Rng>(v: usize, omega_deg: f64, rng: &mut R) -> Result<Vec<usize>> {
    if v == 0 || v > NUM_CANDIDATE_VIEWS {
        return Err(Error::InvalidArgument(format!("view count {v} outside [1, 30]")));
    }
    let capacity = window_capacity(omega_deg);
    if v > capacity {
        return Err(Error::InfeasibleWindow { views: v, omega_deg });
    }
    let start = rng.random_range(0..NUM_CANDIDATE_VIEWS);
    let mut slots: Vec<usize> = index::sample(rng, capacity, v)
        .into_iter()
        .map(|offset| (start + offset) % NUM_CANDIDATE_VIEWS)
        .collect();
    slots.sort_unstable();
    Ok(slots)
}

/// Seeded within-window draw of `v` views from a candidate set.
pub fn within_view_sample<T: Scalar>(
    cands: &CandidateViewSet<T>,
    v: usize,
    omega_deg: f64,
    seed: u64,
) -> Result<Vec<ViewImage<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = sample_window_slots(v, omega_deg, &mut rng)?;
    Ok(slots.into_iter().map(|s| cands.view(s).clone()).collect())
}

/// Widest pairwise circular difference among a set of views.
pub fn max_pairwise_difference_deg<T: Scalar>(views: &[ViewImage<T>]) -> f64 {
    let mut widest: f64 = 0.0;
    for (i, a) in views.iter().enumerate() {
        for b in &views[i + 1..] {
            widest = widest.max(circular_difference_deg(a.angle_deg(), b.angle_deg()));
        }
    }
    widest
}
