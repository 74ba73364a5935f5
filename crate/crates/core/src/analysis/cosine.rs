//! Temporal coherence of Δε along a trajectory.

use std::fmt;

use ndarray::ArrayView1;
use serde::{Serialize, Serializer};

use crate::sampler::TrajectoryRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CosineSimilarity {
    Defined(f64),
    /// One of the vectors is zero.
    Undefined,
}

impl CosineSimilarity {
    pub fn between(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Self {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na < f64::MIN_POSITIVE || nb < f64::MIN_POSITIVE {
            return CosineSimilarity::Undefined;
        }
        CosineSimilarity::Defined((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
    }

    pub fn value(self) -> Option<f64> {
        match self {
            CosineSimilarity::Defined(v) => Some(v),
            CosineSimilarity::Undefined => None,
        }
    }
}

impl fmt::Display for CosineSimilarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CosineSimilarity::Defined(v) => write!(f, "{v:.16e}"),
            CosineSimilarity::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for CosineSimilarity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CosineSimilarity::Defined(v) => s.serialize_f64(*v),
            CosineSimilarity::Undefined => s.serialize_str("undefined"),
        }
    }
}

/// `cos(Δε_{t+1}, Δε_t)` for each consecutive pair of processed steps, in
/// processing order (`T` down to `1`), so the result has `T − 1` entries.
pub fn cosine_similarity_track(record: &TrajectoryRecord) -> Vec<CosineSimilarity> {
    record
        .per_step
        .windows(2)
        .map(|w| CosineSimilarity::between(w[0].delta_eps.view(), w[1].delta_eps.view()))
        .collect()
}
