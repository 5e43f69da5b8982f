//! Mask-ratio schedules.
//!
//! A schedule maps decoding progress `r` in [0,1] to the fraction of tokens
//! still masked. All seven variants are continuous, monotonically
//! non-increasing, and pinned to gamma(0)=1, gamma(1)=0, so the iterative
//! decoder always terminates with a fully unmasked grid.

use crate::error::{CoreError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Square,
    Cubic,
    Exponential,
    Sqrt,
    Log,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 7] = [
        ScheduleKind::Linear,
        ScheduleKind::Cosine,
        ScheduleKind::Square,
        ScheduleKind::Cubic,
        ScheduleKind::Exponential,
        ScheduleKind::Sqrt,
        ScheduleKind::Log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Square => "square",
            ScheduleKind::Cubic => "cubic",
            ScheduleKind::Exponential => "exponential",
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::Log => "log",
        }
    }

    /// True for the family that stays above the linear chord (masks
    /// aggressively for longer); false for the convex pair below it.
    pub fn is_concave(self) -> bool {
        matches!(
            self,
            ScheduleKind::Cosine
                | ScheduleKind::Square
                | ScheduleKind::Cubic
                | ScheduleKind::Exponential
        )
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "square" => Ok(ScheduleKind::Square),
            "cubic" => Ok(ScheduleKind::Cubic),
            "exponential" => Ok(ScheduleKind::Exponential),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            "log" => Ok(ScheduleKind::Log),
            other => Err(CoreError::UnknownSchedule(other.to_string())),
        }
    }
}

/// Decay sharpness of the exponential schedule.
const EXP_LAMBDA: f64 = 6.0;

/// Mask ratio gamma(r) for progress `r` in [0, 1].
pub fn eval(kind: ScheduleKind, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(CoreError::RatioOutOfRange { value: r });
    }
    let v = match kind {
        ScheduleKind::Linear => 1.0 - r,
        ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * r).cos(),
        ScheduleKind::Square => 1.0 - r * r,
        ScheduleKind::Cubic => 1.0 - r * r * r,
        // Concave exponential saturation, normalized to hit both endpoints.
        ScheduleKind::Exponential => {
            (1.0 - (-EXP_LAMBDA * (1.0 - r)).exp()) / (1.0 - (-EXP_LAMBDA).exp())
        }
        ScheduleKind::Sqrt => 1.0 - r.sqrt(),
        ScheduleKind::Log => 1.0 - (1.0 + (std::f64::consts::E - 1.0) * r).ln(),
    };
    // Exact endpoints despite rounding; clamp interior noise like cos(pi/2).
    Ok(if r == 0.0 {
        1.0
    } else if r == 1.0 {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    })
}

/// Mean of gamma over [0,1] (Simpson's rule): the expected training mask
/// ratio induced by the schedule.
pub fn mean_mask_ratio(kind: ScheduleKind) -> f64 {
    let n = 4096; // even
    let h = 1.0 / n as f64;
    let mut acc = eval(kind, 0.0).unwrap() + eval(kind, 1.0).unwrap();
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * eval(kind, i as f64 * h).unwrap();
    }
    acc * h / 3.0
}

/// Number of tokens left masked after each decoding iteration.
///
/// `counts[t] = ceil(gamma((t+1)/T) * N)`, then clamped so the sequence
/// strictly decreases while positive (at least one token commits per
/// iteration) and ends at zero. Once the count hits zero it stays there,
/// which only happens when `T > N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskCountPlan {
    iterations: usize,
    tokens: usize,
    counts: Vec<usize>,
}

impl MaskCountPlan {
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Masked count remaining after iteration `t`.
    pub fn masked_after(&self, t: usize) -> usize {
        self.counts[t]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Build the decode-time mask plan for `iterations >= 1` passes over
/// `tokens >= 1` initially masked positions.
pub fn plan_decode_masks(kind: ScheduleKind, iterations: usize, tokens: usize) -> MaskCountPlan {
    assert!(iterations >= 1, "need at least one iteration");
    assert!(tokens >= 1, "need at least one token");
    let mut counts = Vec::with_capacity(iterations);
    let mut prev = tokens;
    for t in 0..iterations {
        let r = (t + 1) as f64 / iterations as f64;
        let raw = (eval(kind, r).unwrap() * tokens as f64).ceil() as usize;
        let n = raw.min(prev.saturating_sub(1));
        counts.push(n);
        prev = n;
    }
    MaskCountPlan { iterations, tokens, counts }
}

/// Draw a training mask count: `ceil(gamma(r) * N)` for `r` uniform on
/// [0, 1), clamped into [1, N].
pub fn sample_train_mask_count<R: Rng>(kind: ScheduleKind, tokens: usize, rng: &mut R) -> usize {
    let r: f64 = rng.random();
    mask_count_for_ratio(kind, tokens, r)
}

/// Deterministic core of [`sample_train_mask_count`], exposed so tests can
/// force the progress ratio.
pub fn mask_count_for_ratio(kind: ScheduleKind, tokens: usize, r: f64) -> usize {
    let raw = (eval(kind, r).unwrap() * tokens as f64).ceil() as usize;
    raw.clamp(1, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundary_values() {
        for kind in ScheduleKind::ALL {
            assert_eq!(eval(kind, 0.0).unwrap(), 1.0, "{kind}");
            assert_eq!(eval(kind, 1.0).unwrap(), 0.0, "{kind}");
        }
    }

    #[test]
    fn linear_quarter() {
        assert_eq!(eval(ScheduleKind::Linear, 0.25).unwrap(), 0.75);
    }

    #[test]
    fn cosine_midpoint() {
        // cos(pi/4) evaluated directly.
        let got = eval(ScheduleKind::Cosine, 0.5).unwrap();
        assert!((got - 0.7071067811865476).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_ratio_rejected() {
        assert!(eval(ScheduleKind::Cosine, -0.001).is_err());
        assert!(eval(ScheduleKind::Cosine, 1.001).is_err());
    }

    #[test]
    fn monotone_and_bounded_on_grid() {
        for kind in ScheduleKind::ALL {
            let mut prev = f64::INFINITY;
            for i in 0..=1000 {
                let r = i as f64 / 1000.0;
                let v = eval(kind, r).unwrap();
                assert!((0.0..=1.0).contains(&v), "{kind} out of range at {r}");
                assert!(v <= prev + 1e-12, "{kind} not non-increasing at {r}");
                prev = v;
            }
        }
    }

    #[test]
    fn chord_classification() {
        for kind in ScheduleKind::ALL {
            let mid = eval(kind, 0.5).unwrap();
            if kind.is_concave() {
                assert!(mid > 0.5, "{kind} should sit above the chord, got {mid}");
            } else if kind != ScheduleKind::Linear {
                assert!(mid < 0.5, "{kind} should sit below the chord, got {mid}");
            }
        }
    }

    #[test]
    fn cosine_plan_t8_n256() {
        // ceil(256 * cos(pi (t+1) / 16)) for t = 0..7, via a high-precision
        // evaluation; already strictly decreasing so clamping is a no-op.
        let plan = plan_decode_masks(ScheduleKind::Cosine, 8, 256);
        assert_eq!(plan.counts(), &[252, 237, 213, 182, 143, 98, 50, 0]);
    }

    #[test]
    fn linear_plan_t4_n8() {
        let plan = plan_decode_masks(ScheduleKind::Linear, 4, 8);
        assert_eq!(plan.counts(), &[6, 4, 2, 0]);
    }

    #[test]
    fn single_iteration_unmasks_everything() {
        for kind in ScheduleKind::ALL {
            assert_eq!(plan_decode_masks(kind, 1, 1234).counts(), &[0]);
        }
    }

    #[test]
    fn plan_first_entry_below_token_count() {
        // Near-flat start: ceil would give N, the clamp must pull it to N-1.
        let plan = plan_decode_masks(ScheduleKind::Cosine, 8, 16);
        assert_eq!(plan.counts(), &[15, 14, 13, 12, 9, 7, 4, 0]);
    }

    #[test]
    fn forced_ratio_boundaries() {
        for kind in ScheduleKind::ALL {
            assert_eq!(mask_count_for_ratio(kind, 256, 0.0), 256);
            assert_eq!(mask_count_for_ratio(kind, 256, 1.0 - 1e-12), 1, "{kind}");
        }
    }

    #[test]
    fn mean_mask_ratio_matches_analytic_integrals() {
        let cases = [
            (ScheduleKind::Linear, 0.5),
            (ScheduleKind::Cosine, 2.0 / std::f64::consts::PI),
            (ScheduleKind::Square, 2.0 / 3.0),
            (ScheduleKind::Cubic, 0.75),
            (ScheduleKind::Sqrt, 1.0 / 3.0),
        ];
        for (kind, want) in cases {
            let got = mean_mask_ratio(kind);
            assert!((got - want).abs() < 1e-9, "{kind}: {got} vs {want}");
        }
        // No simple closed forms; fixed by the quadrature oracle.
        assert!((mean_mask_ratio(ScheduleKind::Exponential) - 0.83581824499).abs() < 1e-9);
        assert!((mean_mask_ratio(ScheduleKind::Log) - 0.418023293131).abs() < 1e-9);
    }

    #[test]
    fn train_count_distribution_matches_pushforward() {
        // Exact pushforward of uniform r through ceil(gamma(r) N) computed by
        // numeric integration on a fine grid, compared to Monte-Carlo draws.
        for kind in [ScheduleKind::Cosine, ScheduleKind::Sqrt] {
            let n = 64usize;
            let grid = 2_000_000usize;
            let mut exact = vec![0.0f64; n + 1];
            for i in 0..grid {
                let r = (i as f64 + 0.5) / grid as f64;
                exact[mask_count_for_ratio(kind, n, r)] += 1.0 / grid as f64;
            }
            let draws = 100_000usize;
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut empirical = vec![0.0f64; n + 1];
            for _ in 0..draws {
                empirical[sample_train_mask_count(kind, n, &mut rng)] += 1.0 / draws as f64;
            }
            let tv: f64 =
                exact.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.02, "{kind}: TV {tv}");
        }
    }
}
