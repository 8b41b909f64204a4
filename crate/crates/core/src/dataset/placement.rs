//! Placement policies over the normalized edge distance `r`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Consecutive rejections after which a policy is declared degenerate.
pub const MAX_REJECTIONS: usize = 10_000;

/// Admissible set of object-center positions, expressed through `r`.
///
/// A band whose upper bound is 1 also admits `r = 1`, so the ten bands
/// `[k/10, (k+1)/10)` partition `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlacementPolicy {
    AllowedCentral { allowed: f64 },
    Band { lo: f64, hi: f64 },
    ForbiddenCentral { forbidden: f64 },
    Unrestricted,
}

impl PlacementPolicy {
    pub fn band(lo: f64, hi: f64) -> Self {
        PlacementPolicy::Band { lo, hi }
    }

    /// The ten tenth-wide evaluation bands, innermost first.
    pub fn tenth_bands() -> Vec<PlacementPolicy> {
        (0..10)
            .map(|k| PlacementPolicy::band(k as f64 / 10.0, (k + 1) as f64 / 10.0))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PlacementPolicy::AllowedCentral { allowed } => allowed > 0.0 && allowed <= 1.0,
            PlacementPolicy::Band { lo, hi } => lo >= 0.0 && lo < hi && hi <= 1.0,
            PlacementPolicy::ForbiddenCentral { forbidden } => (0.0..1.0).contains(&forbidden),
            PlacementPolicy::Unrestricted => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid placement policy {self}")))
        }
    }

    pub fn admits(&self, r: f64) -> bool {
        match *self {
            PlacementPolicy::AllowedCentral { allowed } => r <= allowed,
            PlacementPolicy::Band { lo, hi } => lo <= r && (r < hi || (hi >= 1.0 && r <= 1.0)),
            PlacementPolicy::ForbiddenCentral { forbidden } => r >= forbidden,
            PlacementPolicy::Unrestricted => true,
        }
    }
}

/// Labels: `allowed:0.3`, `band:0.1-0.2`, `forbidden:0.7`, `unrestricted`.
impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementPolicy::AllowedCentral { allowed } => write!(f, "allowed:{allowed:?}"),
            PlacementPolicy::Band { lo, hi } => write!(f, "band:{lo:?}-{hi:?}"),
            PlacementPolicy::ForbiddenCentral { forbidden } => write!(f, "forbidden:{forbidden:?}"),
            PlacementPolicy::Unrestricted => f.write_str("unrestricted"),
        }
    }
}

impl FromStr for PlacementPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number {v:?} in policy {s:?}")))
        };
        let policy = match s.trim().split_once(':') {
            None if s.trim() == "unrestricted" => PlacementPolicy::Unrestricted,
            Some(("allowed", v)) => PlacementPolicy::AllowedCentral { allowed: num(v)? },
            Some(("forbidden", v)) => PlacementPolicy::ForbiddenCentral { forbidden: num(v)? },
            Some(("band", v)) => {
                let (lo, hi) = v
                    .split_once('-')
                    .ok_or_else(|| Error::config(format!("band needs lo-hi, got {s:?}")))?;
                PlacementPolicy::Band {
                    lo: num(lo)?,
                    hi: num(hi)?,
                }
            }
            _ => return Err(Error::config(format!("unknown placement policy {s:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Largest in-frame offsets `((W - w) / 2, (H - h) / 2)`, floored.
pub fn max_offsets(image: (usize, usize), object: (usize, usize)) -> Result<(i64, i64)> {
    let ((ih, iw), (oh, ow)) = (image, object);
    if oh > ih || ow > iw {
        return Err(Error::invalid(format!(
            "object {oh}x{ow} larger than image {ih}x{iw}"
        )));
    }
    Ok((((iw - ow) / 2) as i64, ((ih - oh) / 2) as i64))
}

/// Chebyshev norm of the per-axis normalized offset. `image` and `object`
/// are `(height, width)`. An axis with no freedom contributes 0.
pub fn normalized_offset(dx: i64, dy: i64, image: (usize, usize), object: (usize, usize)) -> Result<f64> {
    let (mx, my) = max_offsets(image, object)?;
    if dx.abs() > mx || dy.abs() > my {
        return Err(Error::invalid(format!(
            "offset ({dx}, {dy}) outside the in-frame range ({mx}, {my})"
        )));
    }
    let axis = |d: i64, m: i64| if m == 0 { 0.0 } else { d.abs() as f64 / m as f64 };
    Ok(axis(dx, mx).max(axis(dy, my)))
}

/// Uniform draw from the admissible integer offsets by rejection over the
/// full offset rectangle.
pub fn sample_placement<R: Rng + ?Sized>(
    policy: &PlacementPolicy,
    image: (usize, usize),
    object: (usize, usize),
    rng: &mut R,
) -> Result<(i64, i64)> {
    policy.validate()?;
    let (mx, my) = max_offsets(image, object)?;
    for _ in 0..MAX_REJECTIONS {
        let dx = rng.gen_range(-mx..=mx);
        let dy = rng.gen_range(-my..=my);
        if policy.admits(normalized_offset(dx, dy, image, object)?) {
            return Ok((dx, dy));
        }
    }
    Err(Error::DegeneratePolicy {
        policy: policy.to_string(),
        attempts: MAX_REJECTIONS,
    })
}
