use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::eval::metrics::{bootstrap_ci, correlation_matrix, identification_accuracy, Protocol};
use crate::seeds::derive_seed;

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Identification difficulties; 2 is evaluated exhaustively.
    pub ways: Vec<usize>,
    /// Random distractor sets per image for n > 2.
    pub draws: usize,
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ways: vec![2, 5, 10], draws: 1000, resamples: 1000, level: 0.95, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ways.is_empty() || self.ways.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("identification ways must all be >= 2, got {:?}", self.ways)));
        }
        if self.draws == 0 || self.resamples < 1000 || !(0.0 < self.level && self.level < 1.0) {
            return Err(Error::Config("need draws >= 1, resamples >= 1000 and a level in (0, 1)".into()));
        }
        Ok(())
    }

    fn protocol(&self, n: usize) -> Protocol {
        if n == 2 {
            Protocol::Exhaustive
        } else {
            Protocol::MonteCarlo { draws: self.draws }
        }
    }
}

/// Outcomes for one reconstruction in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub run: usize,
    pub seed: u64,
    pub id: usize,
    /// Ground truth that correlates best with the reconstruction.
    pub best_candidate: usize,
    /// Per n, one `0`/`1` character per trial.
    pub outcomes: BTreeMap<usize, String>,
}

impl ImageRecord {
    pub fn accuracy(&self, n: usize) -> Option<f64> {
        let o = self.outcomes.get(&n)?;
        Some(o.bytes().filter(|&b| b == b'1').count() as f64 / o.len() as f64)
    }
}

/// Accuracy at one n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    /// Mean over runs of the per-run mean accuracy.
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub run_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Hex FNV-1a hash of the configuration that produced the runs.
    pub config_hash: String,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub summary: Vec<Aggregate>,
    pub images: Vec<ImageRecord>,
}

impl EvalReport {
    /// Evaluates one set of reconstructions per run against the same ground
    /// truth.
    pub fn build(
        label: &str,
        config_hash: u64,
        runs: &[(u64, Tensor<f32>)],
        gts: &Tensor<f32>,
        cfg: &EvalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if runs.is_empty() {
            return Err(Error::Config("evaluation needs at least one run".into()));
        }
        let mut images = Vec::new();
        for (run, (seed, recons)) in runs.iter().enumerate() {
            let corr = correlation_matrix(recons, gts)?;
            let mut per_n = BTreeMap::new();
            for &n in &cfg.ways {
                let id = identification_accuracy(&corr, n, cfg.protocol(n), derive_seed(cfg.seed, "eval.run", *seed))?;
                per_n.insert(n, id.outcomes);
            }
            for (i, row) in corr.iter().enumerate() {
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                let outcomes = per_n
                    .iter()
                    .map(|(&n, o)| (n, o[i].iter().map(|&c| if c { '1' } else { '0' }).collect()))
                    .collect();
                images.push(ImageRecord { run, seed: *seed, id: i, best_candidate: best, outcomes });
            }
        }
        let mut report = EvalReport {
            label: label.to_string(),
            config_hash: format!("{config_hash:016x}"),
            n_runs: runs.len(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            eval: cfg.clone(),
            summary: Vec::new(),
            images,
        };
        report.summary = report.aggregate()?;
        Ok(report)
    }

    /// Recomputes the summary from the per-image records.
    pub fn aggregate(&self) -> Result<Vec<Aggregate>> {
        let n_images = self.images.iter().filter(|r| r.run == 0).count();
        let mut out = Vec::new();
        for &n in &self.eval.ways {
            let mut run_acc = vec![0.0; self.n_runs];
            let mut per_image = vec![0.0; n_images];
            for r in &self.images {
                let a = r.accuracy(n).ok_or_else(|| Error::Data(format!("image {} lacks {n}-way outcomes", r.id)))?;
                run_acc[r.run] += a;
                per_image[r.id] += a;
            }
            run_acc.iter_mut().for_each(|s| *s /= n_images as f64);
            per_image.iter_mut().for_each(|s| *s /= self.n_runs as f64);
            let accuracy = run_acc.iter().sum::<f64>() / self.n_runs as f64;
            let seed = derive_seed(self.eval.seed, "eval.bootstrap", n as u64);
            let (lo, hi) = bootstrap_ci(&per_image, self.eval.level, self.eval.resamples, seed)?;
            // the bootstrap mean of per-image averages equals `accuracy` up to rounding
            out.push(Aggregate {
                n,
                accuracy,
                ci_low: lo.min(accuracy),
                ci_high: hi.max(accuracy),
                run_accuracies: run_acc,
            });
        }
        Ok(out)
    }

    /// Checks that the summary follows from the records.
    pub fn verify(&self) -> Result<()> {
        if self.aggregate()? != self.summary {
            return Err(Error::Data("report summary does not match its per-image records".into()));
        }
        for a in &self.summary {
            if !(0.0..=1.0).contains(&a.accuracy) || a.ci_low > a.accuracy || a.accuracy > a.ci_high {
                return Err(Error::Data(format!("inconsistent aggregate at n = {}", a.n)));
            }
        }
        Ok(())
    }

    pub fn accuracy(&self, n: usize) -> Option<f64> {
        self.summary.iter().find(|a| a.n == n).map(|a| a.accuracy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid report: {e}")))?;
        r.verify()?;
        Ok(r)
    }

    /// Per-image rows: run, seed, image, best candidate, accuracy per n.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run".to_string(), "seed".into(), "image".into(), "best_candidate".into()];
        header.extend(self.eval.ways.iter().map(|n| format!("acc_{n}way")));
        w.write_record(&header)?;
        for r in &self.images {
            let mut row = vec![r.run.to_string(), r.seed.to_string(), r.id.to_string(), r.best_candidate.to_string()];
            row.extend(self.eval.ways.iter().map(|&n| r.accuracy(n).map_or(String::new(), |a| a.to_string())));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }
}
