use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cortexsim::{Cohort, CohortConfig};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::eval::metrics::sign_test;
use crate::eval::report::{EvalConfig, EvalReport};
use crate::nets::{Decoder, Encoder, FeatureBank, NetConfig};
use crate::trainer::{reconstruct, train_decoder, train_encoder, AblationPreset, TrainConfig};

/// Everything a run needs, as read from the JSON config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cohort: CohortConfig,
    /// Seed of the simulated cohort.
    pub cohort_seed: u64,
    /// Network shape; `None` uses the desk network sized to the cohort.
    pub net: Option<NetConfig>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.train.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// FNV-1a 64 of the canonical JSON form.
    pub fn hash(&self) -> Result<u64> {
        crate::io::config_hash(self)
    }

    pub fn net_for(&self, cohort: &Cohort) -> Result<NetConfig> {
        let net = self.net.clone().unwrap_or_else(|| NetConfig::desk(cohort.kept_voxels(), cohort.channels()));
        net.validate()?;
        Ok(net)
    }
}

/// Test stimuli of fold `k` out of `folds`: every `folds`-th index.
pub fn fold_members(n_test: usize, folds: usize, k: usize) -> BTreeSet<usize> {
    (0..n_test).filter(|i| i % folds == k).collect()
}

/// Reconstructs every test stimulus from its averaged responses. When the
/// decoders carry exclusion sets, each stimulus is decoded by the decoder
/// that never saw its response; otherwise the first decoder is used.
pub fn reconstruct_test(cohort: &Cohort, decoders: &[(Decoder, BTreeSet<usize>)]) -> Result<Tensor<f32>> {
    let responses = cohort.test_responses(true)?;
    let (first, _) = decoders.first().ok_or_else(|| Error::Config("no decoder to reconstruct with".into()))?;
    if decoders.iter().all(|(_, ex)| ex.is_empty()) {
        return reconstruct(first, &responses);
    }
    let n = responses.rows();
    let mut rows: Vec<Option<Tensor<f32>>> = vec![None; n];
    for (dec, ex) in decoders {
        let idx: Vec<usize> = ex.iter().copied().collect();
        if idx.is_empty() {
            continue;
        }
        let out = reconstruct(dec, &responses.select_rows(&idx)?)?;
        for (j, &i) in idx.iter().enumerate() {
            rows[i] = Some(out.select_rows(&[j])?);
        }
    }
    let parts = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.as_ref().ok_or_else(|| Error::Config(format!("no decoder excludes test stimulus {i}"))))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts)
}

/// Trains the decoder(s) of one ladder configuration on a phase-1 encoder.
pub fn train_configuration(
    cohort: &Cohort,
    net: &NetConfig,
    enc: &Encoder,
    bank: &FeatureBank,
    train: &TrainConfig,
) -> Result<Vec<(Decoder, BTreeSet<usize>)>> {
    let n_test = cohort.test_images.rows();
    let ab = train.ablation;
    let sets: Vec<BTreeSet<usize>> = if ab.exclude_target_fmri {
        (0..ab.exclusion_folds).map(|k| fold_members(n_test, ab.exclusion_folds, k)).collect()
    } else {
        vec![BTreeSet::new()]
    };
    sets.into_iter().map(|ex| Ok((train_decoder(cohort, net, enc, bank, train, ex.clone())?.0, ex))).collect()
}

/// One configuration of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub preset: AblationPreset,
    pub enable_ed: bool,
    pub enable_de: bool,
    pub exclude_target_fmri: bool,
    /// Phase-1 encoder checksum per seed.
    pub encoder_checksums: Vec<String>,
    pub report: EvalReport,
}

/// Paired comparison of two rungs over matched seeds at n = 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: AblationPreset,
    pub worse: AblationPreset,
    pub mean_difference: f64,
    pub seeds_improved: usize,
    /// One-sided sign test that `better` beats `worse`.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rungs: Vec<Rung>,
    pub comparisons: Vec<Comparison>,
}

impl LadderReport {
    pub fn rung(&self, p: AblationPreset) -> Option<&Rung> {
        self.rungs.iter().find(|r| r.preset == p)
    }

    pub fn compare(&self, better: AblationPreset, worse: AblationPreset) -> Option<Comparison> {
        let (b, w) = (self.rung(better)?, self.rung(worse)?);
        let (ab, aw) = (
            &b.report.summary.iter().find(|a| a.n == 2)?.run_accuracies,
            &w.report.summary.iter().find(|a| a.n == 2)?.run_accuracies,
        );
        let diffs: Vec<f64> = ab.iter().zip(aw).map(|(x, y)| x - y).collect();
        Some(Comparison {
            better,
            worse,
            mean_difference: diffs.iter().sum::<f64>() / diffs.len() as f64,
            seeds_improved: diffs.iter().filter(|d| **d > 0.0).count(),
            p_value: sign_test(&diffs),
        })
    }

    /// One CSV row per configuration: label, accuracy and interval per n.
    pub fn to_csv(&self) -> Result<String> {
        let ways = self.rungs.first().map(|r| r.report.eval.ways.clone()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header =
            vec!["configuration".to_string(), "enable_ed".into(), "enable_de".into(), "exclude_target_fmri".into()];
        for n in &ways {
            header.extend([format!("acc_{n}way"), format!("ci_low_{n}way"), format!("ci_high_{n}way")]);
        }
        w.write_record(&header)?;
        for r in &self.rungs {
            let mut row = vec![
                r.preset.label().to_string(),
                r.enable_ed.to_string(),
                r.enable_de.to_string(),
                r.exclude_target_fmri.to_string(),
            ];
            for a in &r.report.summary {
                row.extend([a.accuracy.to_string(), a.ci_low.to_string(), a.ci_high.to_string()]);
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `ladder.json`, `ladder.csv` and one report pair per rung.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ladder.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("ladder.csv"), self.to_csv()?)?;
        for r in &self.rungs {
            r.report.write(dir, &format!("report_{}", r.preset.label()))?;
        }
        Ok(())
    }
}

/// Trains and evaluates each preset for every seed. All presets of one seed
/// share the same phase-1 encoder and decoder initialization.
pub fn run_ablation(
    cohort: &Cohort,
    cfg: &RunConfig,
    seeds: &[u64],
    presets: &[AblationPreset],
) -> Result<LadderReport> {
    if seeds.is_empty() || presets.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one configuration".into()));
    }
    let net = cfg.net_for(cohort)?;
    let bank = FeatureBank::new(&net)?;
    let hash = cfg.hash()?;
    let mut recons: BTreeMap<AblationPreset, Vec<(u64, Tensor<f32>)>> = BTreeMap::new();
    let mut checksums: BTreeMap<AblationPreset, Vec<String>> = BTreeMap::new();
    for &seed in seeds {
        let mut train = cfg.train.clone();
        train.seed = seed;
        let (enc, _) = train_encoder(cohort, &net, &bank, &train)?;
        log::info!("seed {seed}: encoder trained");
        for &p in presets {
            let mut t = train.clone();
            let folds = t.ablation.exclusion_folds;
            t.ablation = AblationPreset::flags(p);
            t.ablation.exclusion_folds = folds;
            let decoders = train_configuration(cohort, &net, &enc, &bank, &t)?;
            recons.entry(p).or_default().push((seed, reconstruct_test(cohort, &decoders)?));
            checksums.entry(p).or_default().push(format!("{:016x}", enc.checksum()));
            log::info!("seed {seed}: configuration {} done", p.label());
        }
    }
    let mut rungs = Vec::new();
    for &p in presets {
        let flags = p.flags();
        rungs.push(Rung {
            preset: p,
            enable_ed: flags.enable_ed,
            enable_de: flags.enable_de,
            exclude_target_fmri: flags.exclude_target_fmri,
            encoder_checksums: checksums.remove(&p).unwrap_or_default(),
            report: EvalReport::build(p.label(), hash, &recons[&p], &cohort.test_images, &cfg.eval)?,
        });
    }
    let mut report =
        LadderReport { config_hash: format!("{hash:016x}"), seeds: seeds.to_vec(), rungs, comparisons: Vec::new() };
    use AblationPreset::*;
    report.comparisons = [(C, B), (D, C), (D, B), (D, E)].iter().filter_map(|&(a, b)| report.compare(a, b)).collect();
    Ok(report)
}
