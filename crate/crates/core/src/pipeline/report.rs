use std::fmt::Write as _;
use std::path::Path;

use super::train::{EvalRecord, RunSummary, EVALS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::flops::{speedup_csv, speedup_curve, Observation, Orientation};

/// Performance/cost observations of the two model families.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observations {
    pub dense: Vec<Observation>,
    pub moe: Vec<Observation>,
}

impl Observations {
    pub fn push(&mut self, moe: bool, obs: Observation) {
        if moe {
            self.moe.push(obs);
        } else {
            self.dense.push(obs);
        }
    }
}

/// Reads a CSV with a `family,perf,zflops` header (extra columns allowed,
/// `family` is `dense` or `moe`).
pub fn read_observations_csv(path: &Path) -> Result<Observations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_observations_csv(&text, path)
}

pub fn parse_observations_csv(text: &str, path: &Path) -> Result<Observations> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty observations file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| err(1, format!("missing column {name}")))
    };
    let (fi, pi, zi) = (col("family")?, col("perf")?, col("zflops")?);
    let mut out = Observations::default();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |j: usize| {
            fields
                .get(j)
                .copied()
                .ok_or_else(|| err(i + 1, "too few fields".into()))
        };
        let num = |j: usize| -> Result<f64> {
            let s = get(j)?;
            s.parse()
                .map_err(|_| err(i + 1, format!("not a number: {s:?}")))
        };
        let moe = match get(fi)? {
            "dense" => false,
            "moe" => true,
            other => {
                return Err(err(
                    i + 1,
                    format!("family must be dense or moe, got {other:?}"),
                ))
            }
        };
        let zflops = num(zi)?;
        if !(zflops > 0.0) {
            return Err(err(i + 1, format!("cost must be positive, got {zflops}")));
        }
        out.push(moe, Observation::new(num(pi)?, zflops));
    }
    Ok(out)
}

/// One observation per run: validation perplexity against analytic cost.
pub fn observations_from_summaries(paths: &[&Path]) -> Result<Observations> {
    let mut out = Observations::default();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(*p, e))?;
        let s: RunSummary = serde_json::from_str(&text)?;
        out.push(s.experts > 0, Observation::new(s.val_ppl, s.zflops));
    }
    Ok(out)
}

/// Every validation evaluation of a finished run directory as an
/// observation. Training cost is linear in tokens, so each evaluation's cost
/// is the run's total cost scaled by its share of the tokens seen.
pub fn observations_from_run(dir: &Path) -> Result<Observations> {
    let summary_path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let s: RunSummary = serde_json::from_str(&text)?;
    let evals_path = dir.join(EVALS_FILE);
    let evals = std::fs::read_to_string(&evals_path).map_err(|e| Error::io(&evals_path, e))?;
    let mut out = Observations::default();
    for (i, line) in evals
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r: EvalRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: evals_path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.tokens_seen > 0 && s.tokens_seen > 0 {
            let zflops = s.zflops * r.tokens_seen as f64 / s.tokens_seen as f64;
            out.push(s.experts > 0, Observation::new(r.val_ppl, zflops));
        }
    }
    Ok(out)
}

/// `family,zflops,metric` rows sorted by family then cost.
pub fn scaling_csv(obs: &Observations) -> String {
    let mut out = String::from("family,zflops,metric\n");
    for (name, family) in [("dense", &obs.dense), ("moe", &obs.moe)] {
        let mut rows = family.clone();
        rows.sort_by(|a, b| a.zflops.total_cmp(&b.zflops));
        for o in rows {
            let _ = writeln!(out, "{name},{},{}", o.zflops, o.perf);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub curve: Vec<(f64, f64)>,
    pub speedup_csv: String,
    pub scaling_csv: String,
}

pub fn build_report(obs: &Observations, orientation: Orientation) -> Result<Report> {
    let curve = speedup_curve(&obs.dense, &obs.moe, orientation)?;
    Ok(Report {
        speedup_csv: speedup_csv(&curve),
        scaling_csv: scaling_csv(obs),
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_parsing() {
        let text = "name,family,perf,zflops\na,dense,90,20\nb,moe,90,5\n";
        let obs = parse_observations_csv(text, Path::new("o.csv")).unwrap();
        let r = build_report(&obs, Orientation::HigherIsBetter).unwrap();
        assert_eq!(r.curve, vec![(20.0, 4.0)]);
        assert_eq!(r.speedup_csv, "dense_zflops,speedup_factor\n20,4\n");
        assert!(r.scaling_csv.contains("moe,5,90"));

        match parse_observations_csv("family,perf,zflops\nsparse,1,1\n", Path::new("o")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let missing =
            parse_observations_csv("family,perf,zflops\ndense,1,1\n", Path::new("o")).unwrap();
        let err = build_report(&missing, Orientation::LowerIsBetter).unwrap_err();
        assert!(err.to_string().contains("moe"));
    }

    #[test]
    fn run_evaluations_scale_cost_by_tokens() {
        let dir = tempfile::TempDir::new().unwrap();
        let summary = RunSummary {
            steps: 4,
            tokens_seen: 400,
            final_loss: 2.0,
            val_ppl: 7.0,
            unigram_ppl: 20.0,
            params: 10,
            experts: 8,
            zflops: 2.0,
            wall_seconds: 1.0,
        };
        std::fs::write(
            dir.path().join(SUMMARY_FILE),
            serde_json::to_string(&summary).unwrap(),
        )
        .unwrap();
        let evals = "{\"step\":1,\"tokens_seen\":100,\"val_ppl\":15.0}\n\
                     {\"step\":4,\"tokens_seen\":400,\"val_ppl\":7.0}\n";
        std::fs::write(dir.path().join(EVALS_FILE), evals).unwrap();
        let obs = observations_from_run(dir.path()).unwrap();
        assert!(obs.dense.is_empty());
        assert_eq!(
            obs.moe,
            vec![Observation::new(15.0, 0.5), Observation::new(7.0, 2.0)]
        );
    }
}
