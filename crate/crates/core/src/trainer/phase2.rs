use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cortexsim::Cohort;
use crate::engine::{Mode, OptimizerKind, OptimizerState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{build_decoder, Decoder, Encoder, FeatureBank, NetConfig};
use crate::objectives::{decoder_objective, MixedBatch};
use crate::seeds::{derive_seed, stream};
use crate::trainer::phase1::check_net;
use crate::trainer::{mix_sizes, Checkpoint, NetSnapshot, TrainConfig};

/// Per-epoch means of the decoder objective and its unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub total: f64,
    pub supervised: Option<f64>,
    pub ed: Option<f64>,
    pub de: Option<f64>,
}

/// A pool that is drawn from in an endless sequence of shuffled passes.
///
/// Draw `k` is element `k % len` of pass `k / len`, and each pass order is a
/// pure function of the seed and pass index, so the position in the stream
/// is all the state there is.
struct Cycler {
    len: usize,
    seed: u64,
    tag: &'static str,
    pass: Option<(u64, Vec<usize>)>,
}

impl Cycler {
    fn new(len: usize, seed: u64, tag: &'static str) -> Self {
        Cycler { len, seed, tag, pass: None }
    }

    fn draw(&mut self, k: u64) -> usize {
        let pass = k / self.len as u64;
        if self.pass.as_ref().is_none_or(|(p, _)| *p != pass) {
            let mut order: Vec<usize> = (0..self.len).collect();
            order.shuffle(&mut stream(self.seed, self.tag, pass));
            self.pass = Some((pass, order));
        }
        self.pass.as_ref().expect("just set").1[(k % self.len as u64) as usize]
    }
}

/// Phase-2 training state for one decoder.
pub struct DecoderTrainer<'a> {
    cfg: TrainConfig,
    config_hash: u64,
    enc: &'a Encoder,
    bank: &'a FeatureBank,
    paired_images: &'a Tensor<f32>,
    paired_fmri: Tensor<f32>,
    unlabeled: &'a Tensor<f32>,
    fmri_pool: Tensor<f32>,
    /// Test stimulus behind each row of `fmri_pool`.
    fmri_ids: Vec<usize>,
    excluded: BTreeSet<usize>,
    sizes: [usize; 3],
    steps_per_epoch: usize,
    images_cycle: Cycler,
    fmri_cycle: Cycler,
    dec: Decoder,
    opt: OptimizerState,
    epoch: usize,
    history: Vec<EpochLosses>,
    fmri_draws: Vec<u64>,
}

impl<'a> DecoderTrainer<'a> {
    /// Sets up a fresh decoder. `excluded` lists test stimuli whose responses
    /// must never enter the response cycle.
    pub fn new(
        cohort: &'a Cohort,
        net: &NetConfig,
        enc: &'a Encoder,
        bank: &'a FeatureBank,
        cfg: &TrainConfig,
        excluded: BTreeSet<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_net(cohort, net)?;
        if !enc.is_frozen() {
            return Err(Error::Config("phase 2 needs a frozen encoder".into()));
        }
        if enc.config() != net {
            return Err(Error::Config("encoder was built for a different network config".into()));
        }
        let w = &cfg.loss;
        let ab = &cfg.ablation;
        let mut sizes = mix_sizes(cfg.phase2.batch_size, &cfg.phase2.mix)?;
        if !ab.enable_ed || w.ed == 0.0 {
            sizes[1] = 0;
        }
        if !ab.enable_de || w.de == 0.0 {
            sizes[2] = 0;
        }
        if w.d == 0.0 && sizes[1] == 0 && sizes[2] == 0 {
            return Err(Error::Config("every decoder loss term is disabled".into()));
        }
        if sizes[0] == 0 {
            return Err(Error::Config("the paired fraction must give at least one pair per batch".into()));
        }

        let paired_fmri = cohort.train_responses()?;
        let steps_per_epoch = paired_fmri.rows() / sizes[0];
        if steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "{} paired samples per batch exceed the {} training pairs",
                sizes[0],
                paired_fmri.rows()
            )));
        }
        let averaged = cfg.phase2.average_repeats;
        let per_stimulus = if averaged { 1 } else { cohort.test_repeats() };
        let all = cohort.test_responses(averaged)?;
        let n_test = cohort.test_images.rows();
        if let Some(&bad) = excluded.iter().find(|&&i| i >= n_test) {
            return Err(Error::Config(format!("excluded stimulus {bad} out of range for {n_test} test stimuli")));
        }
        let rows: Vec<usize> = (0..all.rows()).filter(|r| !excluded.contains(&(r / per_stimulus))).collect();
        let fmri_ids: Vec<usize> = rows.iter().map(|r| r / per_stimulus).collect();
        if sizes[2] > 0 && rows.is_empty() {
            return Err(Error::Data("response cycle enabled but every test response is excluded".into()));
        }
        if sizes[1] > 0 && cohort.unlabeled_images.rows() == 0 {
            return Err(Error::Data("image cycle enabled but there are no unlabeled images".into()));
        }
        let fmri_pool = if rows.is_empty() { Tensor::zeros(&[1, all.row_len()]) } else { all.select_rows(&rows)? };

        let seed = cfg.seed;
        let dec = build_decoder(net, derive_seed(seed, "decoder.init", 0))?;
        let opt = OptimizerState::new(OptimizerKind::adam(), cfg.phase2.schedule.lr_at(0));
        Ok(DecoderTrainer {
            cfg: cfg.clone(),
            config_hash: cfg.hash_with(net)?,
            enc,
            bank,
            paired_images: &cohort.train_images,
            paired_fmri,
            unlabeled: &cohort.unlabeled_images,
            fmri_ids,
            fmri_pool,
            excluded,
            sizes,
            steps_per_epoch,
            images_cycle: Cycler::new(cohort.unlabeled_images.rows().max(1), seed, "phase2.images"),
            fmri_cycle: Cycler::new(rows.len().max(1), seed, "phase2.fmri"),
            dec,
            opt,
            epoch: 0,
            history: Vec::new(),
            fmri_draws: vec![0; n_test],
        })
    }

    /// Continues a run from a checkpoint written by [`DecoderTrainer::checkpoint`].
    pub fn resume(
        cohort: &'a Cohort,
        net: &NetConfig,
        enc: &'a Encoder,
        bank: &'a FeatureBank,
        cfg: &TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let excluded = ckpt.excluded.iter().map(|&i| i as usize).collect();
        let mut t = Self::new(cohort, net, enc, bank, cfg, excluded)?;
        if ckpt.config_hash != t.config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {:016x} does not match {:016x}",
                ckpt.config_hash, t.config_hash
            )));
        }
        if ckpt.bank_checksum != bank.checksum() {
            return Err(Error::Checkpoint("feature bank differs from the checkpoint".into()));
        }
        if ckpt.encoder_checksum != enc.checksum() {
            return Err(Error::Checkpoint("encoder differs from the checkpoint".into()));
        }
        t.dec.state_mut().load_from(ckpt.decoder.params.clone(), ckpt.decoder.running.clone())?;
        t.opt = OptimizerState::from_parts(OptimizerKind::adam(), ckpt.lr, ckpt.step_count, ckpt.moments.clone());
        t.epoch = ckpt.epoch as usize;
        t.history = ckpt.history.clone();
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLosses] {
        &self.history
    }

    pub fn decoder(&self) -> &Decoder {
        &self.dec
    }

    pub fn into_decoder(self) -> Decoder {
        self.dec
    }

    /// Sub-batch sizes after ablation.
    pub fn batch_sizes(&self) -> [usize; 3] {
        self.sizes
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// How often each test stimulus fed the response cycle in this session.
    pub fn fmri_draws(&self) -> &[u64] {
        &self.fmri_draws
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.phase2.epochs
    }

    /// Runs epochs until the configured count is reached.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// One pass over the paired pool.
    pub fn run_epoch(&mut self) -> Result<EpochLosses> {
        let epoch = self.epoch;
        self.opt.lr = self.cfg.phase2.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..self.paired_fmri.rows()).collect();
        order.shuffle(&mut stream(self.cfg.seed, "phase2.paired", epoch as u64));
        let mut sums = [0.0f64; 4];
        for step in 0..self.steps_per_epoch {
            let batch = self.assemble(epoch, step, &order)?;
            let tape = Tape::new();
            let obj = decoder_objective(
                &tape,
                self.enc,
                &mut self.dec,
                &batch,
                self.bank,
                &self.cfg.loss,
                Mode::Train,
                self.cfg.phase2.encoder_norm,
            )?;
            let total = obj.total.item() as f64;
            if !total.is_finite() {
                return Err(Error::NonFinite("phase-2 objective"));
            }
            sums[0] += total;
            for (slot, term) in [obj.supervised, obj.ed, obj.de].iter().enumerate() {
                if let Some(v) = term {
                    sums[slot + 1] += v.item() as f64;
                }
            }
            let grads = tape.backward(obj.total)?;
            let params = self.dec.state_mut().params_mut()?;
            params.zero_grad();
            params.accumulate(&grads)?;
            self.opt.step(params)?;
        }
        let steps = self.steps_per_epoch as f64;
        let present = [self.sizes[0] > 0, self.sizes[1] > 0, self.sizes[2] > 0];
        let term = |i: usize| present[i].then(|| sums[i + 1] / steps);
        let record = EpochLosses { total: sums[0] / steps, supervised: term(0), ed: term(1), de: term(2) };
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    fn assemble(&mut self, epoch: usize, step: usize, order: &[usize]) -> Result<MixedBatch> {
        let [np, ni, nf] = self.sizes;
        let global = (epoch * self.steps_per_epoch + step) as u64;
        let idx = &order[step * np..(step + 1) * np];
        let mut batch = MixedBatch {
            paired: Some((self.paired_images.select_rows(idx)?, self.paired_fmri.select_rows(idx)?)),
            ..Default::default()
        };
        if ni > 0 {
            let rows: Vec<usize> = (0..ni as u64).map(|j| self.images_cycle.draw(global * ni as u64 + j)).collect();
            batch.images = Some(self.unlabeled.select_rows(&rows)?);
        }
        if nf > 0 {
            let rows: Vec<usize> = (0..nf as u64).map(|j| self.fmri_cycle.draw(global * nf as u64 + j)).collect();
            for &r in &rows {
                let id = self.fmri_ids[r];
                assert!(!self.excluded.contains(&id), "excluded test stimulus {id} drawn for the response cycle");
                self.fmri_draws[id] += 1;
            }
            batch.fmri = Some(self.fmri_pool.select_rows(&rows)?);
        }
        Ok(batch)
    }

    /// Snapshot of everything needed to continue this run.
    pub fn checkpoint(&self) -> Checkpoint {
        let (step_count, moments) =
            (self.opt.step_count(), self.opt.moments().map(|(k, m)| (k.to_string(), m.clone())).collect());
        Checkpoint {
            config_hash: self.config_hash,
            epoch: self.epoch as u64,
            bank_checksum: self.bank.checksum(),
            encoder_checksum: self.enc.checksum(),
            encoder: NetSnapshot::of(self.enc.state()),
            decoder: NetSnapshot::of(self.dec.state()),
            lr: self.opt.lr,
            step_count,
            moments,
            excluded: self.excluded.iter().map(|&i| i as u64).collect(),
            history: self.history.clone(),
        }
    }
}

/// Trains a decoder to completion.
pub fn train_decoder(
    cohort: &Cohort,
    net: &NetConfig,
    enc: &Encoder,
    bank: &FeatureBank,
    cfg: &TrainConfig,
    excluded: BTreeSet<usize>,
) -> Result<(Decoder, Vec<EpochLosses>)> {
    let mut t = DecoderTrainer::new(cohort, net, enc, bank, cfg, excluded)?;
    t.run()?;
    let history = t.history.clone();
    Ok((t.into_decoder(), history))
}

/// `D(r)` for every row of `fmri`, evaluation mode.
pub fn reconstruct(dec: &Decoder, fmri: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = fmri.shape();
    if s.len() != 2 || s[1] != dec.config().voxel_count {
        return Err(Error::shape(
            "reconstruct",
            format!("expected [N, {}] responses, got {s:?}", dec.config().voxel_count),
        ));
    }
    let mut parts = Vec::new();
    let rows: Vec<usize> = (0..s[0]).collect();
    for chunk in rows.chunks(64) {
        parts.push(dec.decode(&fmri.select_rows(chunk)?)?);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}
