//! Synthetic counts with known ground truth, and a reference solver for
//! small instances.

mod oracle;
pub mod poisson;
mod subgradient;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::CountMatrix;
use crate::par::{self, Execution};
use crate::serial_interval::SerialInterval;

pub use oracle::{oracle_solve, OracleBudget};
pub use subgradient::{subgradient_solve, SubgradientBudget};

/// Minimizer returned by the reference solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub r: Array2<f64>,
    pub o: Array2<f64>,
    /// `R ⊙ ΦZ + O`.
    pub p: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// How outlier magnitudes are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutlierScale {
    /// Added to the Poisson intensity as is.
    #[default]
    Absolute,
    /// Multiplied by the outlier-free intensity `R ΦZ` of that day first.
    Relative,
}

/// Additive intensity corruption at territory `territory`, day `day`
/// (both 0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outlier {
    pub territory: usize,
    pub day: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub r_true: Array2<f64>,
    pub outliers: Vec<Outlier>,
    pub outlier_scale: OutlierScale,
    pub seed: u64,
    /// Mean count of each territory over the first `τ_Φ` days.
    pub initial_counts: Vec<f64>,
    pub territories: Vec<String>,
    pub start_date: NaiveDate,
}

/// Piecewise-linear interpolation through `(day, value)` knots (0-based
/// days), constant beyond the first and last knot.
pub fn piecewise_linear(knots: &[(usize, f64)], days: usize) -> Result<Array1<f64>> {
    if knots.is_empty() {
        return Err(Error::Parameter("at least one breakpoint is needed".into()));
    }
    if knots.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Parameter("breakpoint days must be strictly increasing".into()));
    }
    Ok(Array1::from_shape_fn(days, |t| {
        let i = knots.partition_point(|&(day, _)| day <= t);
        if i == 0 {
            knots[0].1
        } else if i == knots.len() {
            knots[i - 1].1
        } else {
            let ((t0, v0), (t1, v1)) = (knots[i - 1], knots[i]);
            v0 + (v1 - v0) * (t - t0) as f64 / (t1 - t0) as f64
        }
    }))
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")
}

impl ScenarioSpec {
    /// Every territory shares one piecewise-linear `R_true`.
    pub fn shared(
        knots: &[(usize, f64)],
        territories: usize,
        days: usize,
        initial_count: f64,
        seed: u64,
    ) -> Result<Self> {
        let row = piecewise_linear(knots, days)?;
        let r_true = Array2::from_shape_fn((territories, days), |(_, t)| row[t]);
        let spec = ScenarioSpec {
            r_true,
            outliers: Vec::new(),
            outlier_scale: OutlierScale::Absolute,
            seed,
            initial_counts: vec![initial_count; territories],
            territories: (1..=territories).map(|d| format!("territory_{d}")).collect(),
            start_date: default_start(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_territories(&self) -> usize {
        self.r_true.nrows()
    }

    pub fn num_days(&self) -> usize {
        self.r_true.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, days) = self.r_true.dim();
        if rows == 0 || days == 0 {
            return Err(Error::Parameter("scenario needs at least one territory and one day".into()));
        }
        if self.r_true.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("R_true must be finite and nonnegative".into()));
        }
        if self.initial_counts.len() != rows || self.territories.len() != rows {
            return Err(Error::Parameter(format!(
                "{rows} territories but {} initial counts and {} names",
                self.initial_counts.len(),
                self.territories.len()
            )));
        }
        if self.initial_counts.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Parameter("initial counts must be positive".into()));
        }
        for o in &self.outliers {
            if o.territory >= rows || o.day >= days || !o.magnitude.is_finite() {
                return Err(Error::Parameter(format!("outlier {o:?} is out of range")));
            }
        }
        Ok(())
    }

    /// Parse the `key = value` scenario format:
    ///
    /// ```text
    /// territories = 2
    /// days = 300
    /// seed = 7
    /// initial_counts = 100, 50     # one value, or one per territory
    /// r_breakpoints = 1:1.4, 100:0.8, 300:1.1
    /// r_breakpoints.2 = 1:1.2, 300:0.9
    /// outlier = 1, 60, 500         # territory, day, magnitude
    /// outlier_scale = absolute     # or relative
    /// names = north, south
    /// start_date = 2020-03-01
    /// ```
    ///
    /// Territory and day indices are 1-based. `outlier` may repeat.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut outlier_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::format(path, i + 1, "expected key = value"))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key == "outlier" {
                outlier_lines.push((i + 1, value));
            } else if values.insert(key.clone(), (i + 1, value)).is_some() {
                return Err(Error::format(path, i + 1, format!("duplicate key {key}")));
            }
        }
        let mut take = |key: &str| values.remove(key);
        let required = |entry: Option<(usize, String)>, key: &str| {
            entry.ok_or_else(|| Error::format(path, 0, format!("missing key {key}")))
        };
        let parse_usize = |(line, v): &(usize, String)| {
            v.parse::<usize>().map_err(|_| Error::format(path, *line, format!("expected an integer, got {v:?}")))
        };

        let territories_entry = required(take("territories"), "territories")?;
        let rows = parse_usize(&territories_entry)?;
        let days_entry = required(take("days"), "days")?;
        let days = parse_usize(&days_entry)?;
        if rows == 0 || days == 0 {
            return Err(Error::format(path, territories_entry.0, "territories and days must be positive"));
        }
        let seed_entry = required(take("seed"), "seed")?;
        let seed = seed_entry
            .1
            .parse::<u64>()
            .map_err(|_| Error::format(path, seed_entry.0, "seed must be a nonnegative integer"))?;

        let (line, counts) = required(take("initial_counts"), "initial_counts")?;
        let counts = parse_list(&counts).map_err(|m| Error::format(path, line, m))?;
        let initial_counts = match counts.len() {
            1 => vec![counts[0]; rows],
            n if n == rows => counts,
            n => return Err(Error::format(path, line, format!("{n} initial counts for {rows} territories"))),
        };

        let (line, shared) = required(take("r_breakpoints"), "r_breakpoints")?;
        let shared = parse_knots(&shared, days).map_err(|m| Error::format(path, line, m))?;
        let shared_row = piecewise_linear(&shared, days)?;
        let mut r_true = Array2::zeros((rows, days));
        for d in 0..rows {
            let row = match take(&format!("r_breakpoints.{}", d + 1)) {
                Some((line, text)) => {
                    let knots = parse_knots(&text, days).map_err(|m| Error::format(path, line, m))?;
                    piecewise_linear(&knots, days)?
                }
                None => shared_row.clone(),
            };
            r_true.row_mut(d).assign(&row);
        }

        let outlier_scale = match take("outlier_scale") {
            None => OutlierScale::Absolute,
            Some((_, v)) if v == "absolute" => OutlierScale::Absolute,
            Some((_, v)) if v == "relative" => OutlierScale::Relative,
            Some((line, v)) => return Err(Error::format(path, line, format!("unknown outlier scale {v:?}"))),
        };
        let mut outliers = Vec::new();
        for (line, text) in outlier_lines {
            let parts: Vec<&str> = text.split(',').map(str::trim).collect();
            let bad = || Error::format(path, line, "outlier needs territory, day, magnitude");
            if parts.len() != 3 {
                return Err(bad());
            }
            let territory: usize = parts[0].parse().map_err(|_| bad())?;
            let day: usize = parts[1].parse().map_err(|_| bad())?;
            let magnitude: f64 = parts[2].parse().map_err(|_| bad())?;
            if territory == 0 || territory > rows || day == 0 || day > days {
                return Err(Error::format(path, line, "outlier territory or day out of range"));
            }
            outliers.push(Outlier { territory: territory - 1, day: day - 1, magnitude });
        }

        let territories = match take("names") {
            Some((line, v)) => {
                let names: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                if names.len() != rows || names.iter().any(String::is_empty) {
                    return Err(Error::format(path, line, format!("expected {rows} territory names")));
                }
                names
            }
            None => (1..=rows).map(|d| format!("territory_{d}")).collect(),
        };
        let start_date = match take("start_date") {
            Some((line, v)) => NaiveDate::parse_from_str(&v, "%Y-%m-%d")
                .map_err(|_| Error::format(path, line, format!("bad date {v:?}")))?,
            None => default_start(),
        };
        if let Some((key, (line, _))) = values.into_iter().next() {
            return Err(Error::format(path, line, format!("unknown key {key}")));
        }
        let spec = ScenarioSpec { r_true, outliers, outlier_scale, seed, initial_counts, territories, start_date };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn parse_list(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| format!("expected a number, got {s:?}"))).collect()
}

fn parse_knots(text: &str, days: usize) -> std::result::Result<Vec<(usize, f64)>, String> {
    text.split(',')
        .map(|pair| {
            let (day, value) = pair.split_once(':').ok_or_else(|| format!("expected day:value, got {pair:?}"))?;
            let day: usize = day.trim().parse().map_err(|_| format!("bad breakpoint day {day:?}"))?;
            let value: f64 = value.trim().parse().map_err(|_| format!("bad breakpoint value {value:?}"))?;
            if day == 0 || day > days {
                return Err(format!("breakpoint day {day} outside 1..={days}"));
            }
            Ok((day - 1, value))
        })
        .collect()
}

/// Draw counts from the forward model. Returns the counts and the realized
/// outlier matrix `O_true` in count units.
///
/// Each territory uses its own ChaCha8 stream (`seed`, stream `d`), so the
/// output does not depend on `exec`. The first `τ_Φ` days are
/// Poisson(`initial_counts[d]`); later days are Poisson(`max(R ΦZ + O, 0)`).
pub fn generate(spec: &ScenarioSpec, phi: &SerialInterval, exec: Execution) -> Result<(CountMatrix, Array2<f64>)> {
    spec.validate()?;
    let (rows, days) = spec.r_true.dim();
    let mut injected = Array2::<f64>::zeros((rows, days));
    for o in &spec.outliers {
        injected[[o.territory, o.day]] += o.magnitude;
    }
    let tau = phi.tau();
    let series: Vec<(Vec<f64>, Vec<f64>)> = par::map_indices(exec, rows, |d| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(d as u64);
        let mut z = vec![0.0; days];
        let mut o_true = vec![0.0; days];
        for t in 0..days {
            if t < tau {
                z[t] = poisson::sample(&mut rng, spec.initial_counts[d]) as f64;
                continue;
            }
            let phi_z: f64 = (1..=tau).map(|u| phi.weight(u) * z[t - u]).sum();
            let mean = spec.r_true[[d, t]] * phi_z;
            let o = match spec.outlier_scale {
                OutlierScale::Absolute => injected[[d, t]],
                OutlierScale::Relative => injected[[d, t]] * mean,
            };
            o_true[t] = o;
            z[t] = poisson::sample(&mut rng, (mean + o).max(0.0)) as f64;
        }
        (z, o_true)
    });
    let mut z = Array2::zeros((rows, days));
    let mut o_true = Array2::zeros((rows, days));
    for (d, (zs, os)) in series.into_iter().enumerate() {
        z.row_mut(d).assign(&Array1::from(zs));
        o_true.row_mut(d).assign(&Array1::from(os));
    }
    let dates = (0..days).map(|t| spec.start_date + chrono::Days::new(t as u64)).collect();
    Ok((CountMatrix::new(z, spec.territories.clone(), dates)?, o_true))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = "\
territories = 2
days = 40
seed = 3
initial_counts = 50, 20
r_breakpoints = 1:1.5, 20:0.5, 40:1.0
r_breakpoints.2 = 1:1.0
outlier = 2, 30, 100   # spike
outlier = 1, 35, 0.5
outlier_scale = absolute
names = north, south
start_date = 2020-03-01
";

    #[test]
    fn parses_spec_file() {
        let spec = ScenarioSpec::parse(SPEC, Path::new("s.txt")).unwrap();
        assert_eq!(spec.r_true.dim(), (2, 40));
        assert_eq!(spec.r_true[[0, 0]], 1.5);
        assert_eq!(spec.r_true[[0, 19]], 0.5);
        assert!((spec.r_true[[0, 29]] - 0.5 - 0.5 * 10.0 / 20.0).abs() < 1e-12);
        assert!(spec.r_true.row(1).iter().all(|v| *v == 1.0));
        assert_eq!(spec.outliers[0], Outlier { territory: 1, day: 29, magnitude: 100.0 });
        assert_eq!(spec.initial_counts, vec![50.0, 20.0]);
        assert_eq!(spec.territories, vec!["north", "south"]);
    }

    #[test]
    fn rejects_malformed_specs() {
        for (text, line) in [
            ("territories = 1\ndays = 5\nseed = 1\ninitial_counts = 1\nr_breakpoints = 9:1\n", 5),
            ("territories = 1\ndays = 5\nseed = 1\ninitial_counts = 1, 2\nr_breakpoints = 1:1\n", 4),
            ("territories = 1\ndays = 5\nseed = x\ninitial_counts = 1\nr_breakpoints = 1:1\n", 3),
            ("territories = 1\ndays = 5\nseed = 1\ninitial_counts = 1\nr_breakpoints = 1:1\nfoo = 2\n", 6),
            ("territories = 1\ndays = 5\nseed = 1\ninitial_counts = 1\nr_breakpoints = 1:1\noutlier = 1, 6, 3\n", 6),
        ] {
            match ScenarioSpec::parse(text, Path::new("s")) {
                Err(Error::Format { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("expected a format error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn generation_is_reproducible_and_execution_independent() {
        let spec = ScenarioSpec::parse(SPEC, Path::new("s")).unwrap();
        let phi = SerialInterval::default();
        let (a, oa) = generate(&spec, &phi, Execution::Sequential).unwrap();
        let (b, ob) = generate(&spec, &phi, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        assert_eq!(oa[[1, 29]], 100.0);
        assert!(a.values().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(generate(&other, &phi, Execution::Sequential).unwrap().0, a);
    }

    #[test]
    fn zero_reproduction_silences_the_epidemic() {
        let spec = ScenarioSpec::shared(&[(0, 0.0)], 1, 60, 40.0, 1).unwrap();
        let phi = SerialInterval::default();
        let (z, _) = generate(&spec, &phi, Execution::Sequential).unwrap();
        assert!(z.values().iter().skip(phi.tau()).all(|v| *v == 0.0));
        assert!(z.values().iter().take(phi.tau()).any(|v| *v > 0.0));
    }

    #[test]
    fn relative_outliers_scale_with_the_intensity() {
        let mut spec = ScenarioSpec::shared(&[(0, 1.0)], 1, 50, 100.0, 9).unwrap();
        spec.outlier_scale = OutlierScale::Relative;
        spec.outliers.push(Outlier { territory: 0, day: 40, magnitude: 2.0 });
        let (z, o) = generate(&spec, &SerialInterval::default(), Execution::Sequential).unwrap();
        let phi_z = SerialInterval::default().convolve_past(z.values());
        assert!((o[[0, 40]] - 2.0 * phi_z[[0, 40]]).abs() < 1e-9);
    }
}
