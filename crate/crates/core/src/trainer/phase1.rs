use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cortexsim::Cohort;
use crate::engine::{OptimizerKind, OptimizerState, Tape};
use crate::error::{Error, Result};
use crate::nets::{build_encoder, Encoder, FeatureBank, NetConfig};
use crate::objectives::fmri_loss;
use crate::seeds::{derive_seed, stream};
use crate::trainer::{random_shift, TrainConfig};

/// Per-epoch mean training loss of phase 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains `E` on the cohort's paired data and returns it frozen.
///
/// Each epoch visits the pairs in a fresh seeded order; every image gets a
/// random translation. A trailing batch of one sample is skipped since batch
/// statistics need at least two.
pub fn train_encoder(
    cohort: &Cohort,
    net: &NetConfig,
    bank: &FeatureBank,
    cfg: &TrainConfig,
) -> Result<(Encoder, EncoderReport)> {
    cfg.validate()?;
    check_net(cohort, net)?;
    let images = &cohort.train_images;
    let responses = cohort.train_responses()?;
    let n = images.rows();
    if n < 2 {
        return Err(Error::Data(format!("phase 1 needs at least 2 training pairs, got {n}")));
    }
    let p1 = &cfg.phase1;
    let mut enc = build_encoder(net, bank, derive_seed(cfg.seed, "encoder.init", 0))?;
    let mut opt = OptimizerState::new(OptimizerKind::sgd(p1.momentum), p1.schedule.lr_at(0));
    let mut epoch_losses = Vec::with_capacity(p1.epochs);
    for epoch in 0..p1.epochs {
        opt.lr = p1.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, "phase1.order", epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, idx) in order.chunks(p1.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let shift_seed = derive_seed(cfg.seed, "phase1.shift", (epoch * n + b) as u64);
            let x = random_shift(&images.select_rows(idx)?, p1.shift_max, shift_seed)?;
            let r = responses.select_rows(idx)?;
            let tape = Tape::new();
            let pred = enc.forward_train(&tape, tape.constant(&x)?)?;
            let loss = fmri_loss(pred, tape.constant(&r)?, cfg.loss.alpha)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("phase-1 loss"));
            }
            let grads = tape.backward(loss)?;
            let params = enc.state_mut().params_mut()?;
            params.zero_grad();
            params.accumulate(&grads)?;
            opt.step(params)?;
            sum += value * idx.len() as f64;
            count += idx.len();
        }
        epoch_losses.push(sum / count as f64);
    }
    enc.freeze();
    Ok((enc, EncoderReport { epoch_losses }))
}

pub(crate) fn check_net(cohort: &Cohort, net: &NetConfig) -> Result<()> {
    cohort.validate()?;
    if net.voxel_count != cohort.kept_voxels()
        || net.image_side != cohort.image_side()
        || net.channels != cohort.channels()
    {
        return Err(Error::Config(format!(
            "network expects {} voxels and {}x{}x{} images; cohort has {} voxels and {}x{}x{}",
            net.voxel_count,
            net.channels,
            net.image_side,
            net.image_side,
            cohort.kept_voxels(),
            cohort.channels(),
            cohort.image_side(),
            cohort.image_side()
        )));
    }
    Ok(())
}
