//! Straggler delay distributions: `constant:ms`, `uniform:lo:hi`,
//! `lognormal:sigma[:median_ms]`, each optionally suffixed `@device`.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Uniform};
use serde::Serialize;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDistribution {
    Constant { ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    /// `median_ms = None` defers to a median measured from warmup passes.
    LogNormal { sigma: f64, median_ms: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StragglerSpec {
    pub distribution: DelayDistribution,
    /// Defaults to the last device.
    pub device: Option<usize>,
}

fn number(field: &str, spec: &str) -> Result<f64, HarnessError> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(HarnessError::Straggler(format!("bad number `{field}` in `{spec}`"))),
    }
}

impl FromStr for StragglerSpec {
    type Err = HarnessError;

    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let (body, device) = match spec.split_once('@') {
            Some((b, d)) => {
                let d = d
                    .trim()
                    .parse()
                    .map_err(|_| HarnessError::Straggler(format!("bad device in `{spec}`")))?;
                (b, Some(d))
            }
            None => (spec, None),
        };
        let parts: Vec<&str> = body.split(':').collect();
        let distribution = match parts.as_slice() {
            ["constant", ms] => DelayDistribution::Constant { ms: number(ms, spec)? },
            ["uniform", lo, hi] => {
                let (lo_ms, hi_ms) = (number(lo, spec)?, number(hi, spec)?);
                if hi_ms < lo_ms {
                    return Err(HarnessError::Straggler(format!("empty range in `{spec}`")));
                }
                DelayDistribution::Uniform { lo_ms, hi_ms }
            }
            ["lognormal", sigma] => DelayDistribution::LogNormal {
                sigma: number(sigma, spec)?,
                median_ms: None,
            },
            ["lognormal", sigma, median] => DelayDistribution::LogNormal {
                sigma: number(sigma, spec)?,
                median_ms: Some(number(median, spec)?),
            },
            _ => return Err(HarnessError::Straggler(format!("unknown distribution `{spec}`"))),
        };
        Ok(StragglerSpec { distribution, device })
    }
}

impl fmt::Display for StragglerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.distribution {
            DelayDistribution::Constant { ms } => write!(f, "constant:{ms}")?,
            DelayDistribution::Uniform { lo_ms, hi_ms } => write!(f, "uniform:{lo_ms}:{hi_ms}")?,
            DelayDistribution::LogNormal { sigma, median_ms: None } => write!(f, "lognormal:{sigma}")?,
            DelayDistribution::LogNormal {
                sigma,
                median_ms: Some(m),
            } => write!(f, "lognormal:{sigma}:{m}")?,
        }
        if let Some(d) = self.device {
            write!(f, "@{d}")?;
        }
        Ok(())
    }
}

impl StragglerSpec {
    pub fn device(&self, devices: usize) -> usize {
        self.device.unwrap_or(devices.saturating_sub(1))
    }

    pub fn needs_median(&self) -> bool {
        matches!(self.distribution, DelayDistribution::LogNormal { median_ms: None, .. })
    }

    /// One delay sample; `default_median_ms` fills an unset lognormal median.
    pub fn sample<R: Rng + ?Sized>(&self, default_median_ms: f64, rng: &mut R) -> Duration {
        let ms = match self.distribution {
            DelayDistribution::Constant { ms } => ms,
            DelayDistribution::Uniform { lo_ms, hi_ms } if hi_ms > lo_ms => {
                Uniform::new(lo_ms, hi_ms).expect("checked range").sample(rng)
            }
            DelayDistribution::Uniform { lo_ms, .. } => lo_ms,
            DelayDistribution::LogNormal { sigma, median_ms } => {
                let median = median_ms.unwrap_or(default_median_ms).max(1e-6);
                LogNormal::new(median.ln(), sigma).expect("finite sigma").sample(rng)
            }
        };
        Duration::from_secs_f64(ms.max(0.0) / 1000.0)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn parses_all_forms() {
        let s: StragglerSpec = "lognormal:0.5@2".parse().unwrap();
        assert_eq!(
            s.distribution,
            DelayDistribution::LogNormal {
                sigma: 0.5,
                median_ms: None
            }
        );
        assert_eq!(s.device(4), 2);
        let c: StragglerSpec = "constant:3".parse().unwrap();
        assert_eq!(c.device(4), 3);
        assert_eq!(c.to_string(), "constant:3");
        assert!("uniform:1:2".parse::<StragglerSpec>().is_ok());
        assert!("lognormal:1:20@0".parse::<StragglerSpec>().is_ok());
        for bad in ["pareto:1", "uniform:3:1", "constant:-1", "constant", "lognormal:x", "constant:1@x"] {
            assert!(matches!(bad.parse::<StragglerSpec>(), Err(HarnessError::Straggler(_))), "{bad}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s: StragglerSpec = "lognormal:1.0".parse().unwrap();
        let draw = |seed| {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| s.sample(10.0, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let c: StragglerSpec = "constant:0".parse().unwrap();
        assert_eq!(c.sample(10.0, &mut r), Duration::ZERO);
    }

    #[test]
    fn lognormal_median_is_respected() {
        let s: StragglerSpec = "lognormal:0.8:20".parse().unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut v: Vec<f64> = (0..2001).map(|_| s.sample(1.0, &mut r).as_secs_f64() * 1000.0).collect();
        v.sort_by(f64::total_cmp);
        let median = v[1000];
        assert!((median - 20.0).abs() < 2.0, "median {median}");
    }
}
