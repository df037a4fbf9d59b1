use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which direction of the performance metric is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// Perplexity-like metrics.
    LowerIsBetter,
    /// Accuracy-like metrics.
    HigherIsBetter,
}

/// One trained model: its performance and its training cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub perf: f64,
    pub zflops: f64,
}

impl Observation {
    pub fn new(perf: f64, zflops: f64) -> Self {
        Self { perf, zflops }
    }
}

/// Interpolation target `t` between two observed `(performance, cost)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupQuery {
    pub t: f64,
    pub lo: (f64, f64),
    pub hi: (f64, f64),
}

/// Cost needed to reach performance `t`, interpolating linearly in `t` and
/// logarithmically in cost. Endpoints return the observed cost exactly.
pub fn interpolate_flops(q: &SpeedupQuery) -> Result<f64> {
    let ((t_lo, f_lo), (t_hi, f_hi)) = (q.lo, q.hi);
    if !(f_lo > 0.0 && f_hi > 0.0) {
        return Err(Error::config(format!(
            "costs must be positive, got {f_lo} and {f_hi}"
        )));
    }
    if t_lo == t_hi {
        return Err(Error::config(format!(
            "bracket endpoints share performance {t_lo}"
        )));
    }
    let (min, max) = (t_lo.min(t_hi), t_lo.max(t_hi));
    if !(q.t >= min && q.t <= max) {
        return Err(Error::Refused(format!(
            "target {} lies outside [{min}, {max}]; extrapolation is not supported",
            q.t
        )));
    }
    if q.t == t_lo {
        return Ok(f_lo);
    }
    if q.t == t_hi {
        return Ok(f_hi);
    }
    let r = (q.t - t_lo) / (t_hi - t_lo);
    Ok((f_lo.ln() + r * (f_hi.ln() - f_lo.ln())).exp())
}

/// Cost at which one family of observations reaches `t`, plus any warnings
/// about the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyCost {
    pub zflops: f64,
    pub warnings: Vec<String>,
}

/// Cost for a single family. Observations are sorted by cost; the cheapest
/// consecutive pair whose performances bracket `t` is used.
pub fn cost_at(
    t: f64,
    observations: &[Observation],
    orientation: Orientation,
) -> Result<FamilyCost> {
    if observations.is_empty() {
        return Err(Error::Refused("no observations".into()));
    }
    let mut obs = observations.to_vec();
    obs.sort_by(|a, b| a.zflops.total_cmp(&b.zflops));
    let mut warnings = Vec::new();
    for w in obs.windows(2) {
        let improves = match orientation {
            Orientation::LowerIsBetter => w[1].perf < w[0].perf,
            Orientation::HigherIsBetter => w[1].perf > w[0].perf,
        };
        if !improves {
            warnings.push(format!(
                "non-monotonic observations: cost {} -> {} moves performance {} -> {}",
                w[0].zflops, w[1].zflops, w[0].perf, w[1].perf
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if let Some(o) = obs.iter().find(|o| o.perf == t) {
        return Ok(FamilyCost {
            zflops: o.zflops,
            warnings,
        });
    }
    for w in obs.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.perf != b.perf && t >= a.perf.min(b.perf) && t <= a.perf.max(b.perf) {
            let zflops = interpolate_flops(&SpeedupQuery {
                t,
                lo: (a.perf, a.zflops),
                hi: (b.perf, b.zflops),
            })?;
            return Ok(FamilyCost { zflops, warnings });
        }
    }
    Err(Error::Refused(format!(
        "target {t} is not bracketed by observations with performance {:?}",
        obs.iter().map(|o| o.perf).collect::<Vec<_>>()
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speedup {
    pub factor: f64,
    pub dense_zflops: f64,
    pub moe_zflops: f64,
    pub warnings: Vec<String>,
}

/// Ratio of the dense cost to the MoE cost of reaching performance `t`.
pub fn speedup_factor(
    t: f64,
    dense: &[Observation],
    moe: &[Observation],
    orientation: Orientation,
) -> Result<Speedup> {
    let d = cost_at(t, dense, orientation)?;
    let m = cost_at(t, moe, orientation)?;
    let mut warnings = d.warnings;
    warnings.extend(m.warnings);
    Ok(Speedup {
        factor: d.zflops / m.zflops,
        dense_zflops: d.zflops,
        moe_zflops: m.zflops,
        warnings,
    })
}

/// Speedup at every observed performance level that both families bracket,
/// as `(dense_zflops, factor)` sorted by dense cost.
pub fn speedup_curve(
    dense: &[Observation],
    moe: &[Observation],
    orientation: Orientation,
) -> Result<Vec<(f64, f64)>> {
    if dense.is_empty() || moe.is_empty() {
        let mut missing = Vec::new();
        if dense.is_empty() {
            missing.push("dense");
        }
        if moe.is_empty() {
            missing.push("moe");
        }
        return Err(Error::Refused(format!(
            "insufficient observations: no {} observations",
            missing.join(" or ")
        )));
    }
    let mut points: Vec<(f64, f64)> = dense
        .iter()
        .chain(moe)
        .filter_map(|o| speedup_factor(o.perf, dense, moe, orientation).ok())
        .map(|s| (s.dense_zflops, s.factor))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    if points.is_empty() {
        return Err(Error::Refused(
            "insufficient observations: no performance level is reached by both families".into(),
        ));
    }
    Ok(points)
}

pub fn speedup_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("dense_zflops,speedup_factor\n");
    for (z, f) in points {
        out.push_str(&format!("{z},{f}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(v: &[(f64, f64)]) -> Vec<Observation> {
        v.iter().map(|&(p, z)| Observation::new(p, z)).collect()
    }

    #[test]
    fn interpolation_examples() {
        let q = |t| SpeedupQuery {
            t,
            lo: (60.0, 1.0),
            hi: (70.0, 8.0),
        };
        assert_eq!(interpolate_flops(&q(60.0)).unwrap(), 1.0);
        assert_eq!(interpolate_flops(&q(70.0)).unwrap(), 8.0);
        assert!((interpolate_flops(&q(65.0)).unwrap() - 8f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            interpolate_flops(&q(71.0)),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn worked_speedup() {
        let s = speedup_factor(
            90.0,
            &obs(&[(90.0, 20.0)]),
            &obs(&[(90.0, 5.0)]),
            Orientation::HigherIsBetter,
        )
        .unwrap();
        assert_eq!(s.factor, 4.0);
        let s = speedup_factor(
            15.0,
            &obs(&[(10.0, 1.0), (20.0, 8.0)]),
            &obs(&[(10.0, 0.5), (20.0, 4.0)]),
            Orientation::HigherIsBetter,
        )
        .unwrap();
        assert!((s.factor - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unbracketed_is_refused_and_nonmonotonic_warns() {
        let d = obs(&[(10.0, 1.0), (20.0, 8.0)]);
        assert!(speedup_factor(25.0, &d, &d, Orientation::HigherIsBetter).is_err());
        let bumpy = obs(&[(10.0, 1.0), (20.0, 2.0), (15.0, 4.0)]);
        let c = cost_at(17.0, &bumpy, Orientation::HigherIsBetter).unwrap();
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn curves() {
        let d = obs(&[(30.0, 1.0), (20.0, 4.0), (15.0, 9.0)]);
        let flat = speedup_curve(&d, &d, Orientation::LowerIsBetter).unwrap();
        assert_eq!(flat.len(), 3);
        assert!(flat.iter().all(|p| p.1 == 1.0));
        assert!(flat.windows(2).all(|w| w[0].0 <= w[1].0));
        let worked = speedup_curve(
            &obs(&[(90.0, 20.0)]),
            &obs(&[(90.0, 5.0)]),
            Orientation::HigherIsBetter,
        )
        .unwrap();
        assert_eq!(worked, vec![(20.0, 4.0)]);
        let err = speedup_curve(&[], &d, Orientation::LowerIsBetter).unwrap_err();
        assert!(err.to_string().contains("dense"));
    }
}
