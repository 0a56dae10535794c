//! Losses: the voxel-response loss, the image loss (pixel, feature and
//! total-variation terms), the two cycle objectives and the composite
//! decoder objective.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::engine::{Element, Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{Decoder, Encoder, FeatureBank};

/// Weights of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Blend between the L2 term and the cosine term of the response loss.
    pub alpha: f64,
    pub rgb: f64,
    pub feat: f64,
    pub tv: f64,
    /// Supervised decoder term.
    pub d: f64,
    /// Image → encoder → decoder cycle term.
    pub ed: f64,
    /// Response → decoder → encoder cycle term.
    pub de: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.9, rgb: 1.0, feat: 0.15, tv: 0.05, d: 1.0, ed: 1.0, de: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.rgb, self.feat, self.tv, self.d, self.ed, self.de];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.alpha > 1.0 {
            return Err(Error::Config(format!("loss weights must be finite, nonnegative, alpha in [0,1]: {self:?}")));
        }
        Ok(())
    }
}

thread_local! {
    static COSINE_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of times the cosine branch of [`fmri_loss`] ran on this thread.
pub fn cosine_evaluations() -> u64 {
    COSINE_EVALS.with(Cell::get)
}

pub fn reset_cosine_evaluations() {
    COSINE_EVALS.with(|c| c.set(0));
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Batch mean of `alpha * ||r̂ - r||_2 + (1 - alpha) * (1 - cos(r̂, r))`.
///
/// Rows where either vector has zero norm contribute a cosine of 0, so the
/// second term is 1 there. With `alpha == 1` the cosine branch is skipped
/// entirely, and with `alpha == 0` the L2 branch is.
pub fn fmri_loss<'t, T: Element>(pred: Var<'t, T>, target: Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (ps, ts) = (pred.shape(), target.shape());
    if ps.len() != 2 || ps != ts {
        return Err(Error::shape("fmri_loss", format!("{ps:?} vs {ts:?}")));
    }
    let mut per_row: Option<Var<'t, T>> = None;
    if alpha > 0.0 {
        per_row = Some(pred.sub(target)?.row_norm()?.scale(t(alpha))?);
    }
    if alpha < 1.0 {
        COSINE_EVALS.with(|c| c.set(c.get() + 1));
        let dissim = pred.row_cosine(target)?.scale(-T::one())?.add_scalar(T::one())?.scale(t(1.0 - alpha))?;
        per_row = Some(match per_row {
            Some(l2) => l2.add(dissim)?,
            None => dissim,
        });
    }
    per_row.expect("alpha covers at least one branch").mean()
}

/// Anisotropic total variation: sum of absolute horizontal and vertical
/// neighbour differences over all channels, divided by the pixel count
/// `N * H * W`.
pub fn tv<'t, T: Element>(img: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = img.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape("tv", format!("need NCHW with spatial dims >= 2, got {s:?}")));
    }
    let pixels = s[0] * s[2] * s[3];
    let total = img.diff_w()?.abs()?.sum()?.add(img.diff_h()?.abs()?.sum()?)?;
    total.scale(T::one() / T::from_usize(pixels).unwrap())
}

/// The individual terms of the image loss, unweighted.
pub struct ImageLossTerms<'t, T: Element> {
    pub rgb: Var<'t, T>,
    pub feat: Option<Var<'t, T>>,
    pub tv: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// `rgb * mean|ŝ - s| + feat * rms(φ(ŝ) - φ(s)) + tv * TV(ŝ)`.
///
/// The feature term is the per-image root-mean-square feature difference
/// averaged over the batch; it is not computed when its weight is zero.
pub fn image_loss_terms<'t, T: Element>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    bank: &FeatureBank<T>,
    w: &LossWeights,
) -> Result<ImageLossTerms<'t, T>> {
    let (ps, ts) = (pred.shape(), target.shape());
    if ps != ts {
        return Err(Error::shape("image_loss", format!("{ps:?} vs {ts:?}")));
    }
    let tape = pred.tape();
    let rgb = pred.sub(target)?.abs()?.mean()?;
    let tv_term = tv(pred)?;
    let mut total = rgb.scale(t(w.rgb))?.add(tv_term.scale(t(w.tv))?)?;
    let mut feat = None;
    if w.feat > 0.0 {
        let diff = bank.features(tape, pred)?.sub(bank.features(tape, target)?)?;
        let f = diff.shape()[1];
        let rms = diff.row_norm()?.mean()?.scale(T::one() / T::from_usize(f).unwrap().sqrt())?;
        total = total.add(rms.scale(t(w.feat))?)?;
        feat = Some(rms);
    }
    Ok(ImageLossTerms { rgb, feat, tv: tv_term, total })
}

pub fn image_loss<'t, T: Element>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    bank: &FeatureBank<T>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    Ok(image_loss_terms(pred, target, bank, w)?.total)
}

/// How the frozen encoder normalizes inside the decoder objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderNorm {
    /// Running statistics from phase 1 (fully frozen).
    #[default]
    Fixed,
    /// Batch statistics of the current batch; running stats still untouched.
    BatchStats,
}

fn encoder_forward<'t, T: Element>(
    enc: &Encoder<T>,
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    norm: EncoderNorm,
) -> Result<Var<'t, T>> {
    match norm {
        EncoderNorm::Fixed => enc.forward_eval(tape, x),
        EncoderNorm::BatchStats => enc.forward_batch_stats(tape, x),
    }
}

fn decoder_forward<'t, T: Element>(
    dec: &mut Decoder<T>,
    tape: &'t Tape<T>,
    r: Var<'t, T>,
    mode: Mode,
) -> Result<Var<'t, T>> {
    match mode {
        Mode::Train => dec.forward_train(tape, r),
        Mode::Eval => dec.forward_eval(tape, r),
    }
}

fn require_frozen<T: Element>(enc: &Encoder<T>) -> Result<()> {
    if enc.is_frozen() {
        Ok(())
    } else {
        Err(Error::Config("cycle objectives need a frozen encoder".into()))
    }
}

/// Output of a cycle mapping and its loss.
pub struct Cycle<'t, T: Element> {
    pub output: Var<'t, T>,
    pub loss: Var<'t, T>,
}

/// `ŝ_ED = D(E(s))` with loss `image_loss(ŝ_ED, s)`.
pub fn ed_cycle<'t, T: Element>(
    tape: &'t Tape<T>,
    enc: &Encoder<T>,
    dec: &mut Decoder<T>,
    images: &Tensor<T>,
    bank: &FeatureBank<T>,
    w: &LossWeights,
    mode: Mode,
) -> Result<Cycle<'t, T>> {
    require_frozen(enc)?;
    let s = tape.constant(images)?;
    let r = encoder_forward(enc, tape, s, EncoderNorm::Fixed)?;
    let output = decoder_forward(dec, tape, r, mode)?;
    let loss = image_loss(output, s, bank, w)?;
    Ok(Cycle { output, loss })
}

/// `r̂_DE = E(D(r))` with loss `fmri_loss(r̂_DE, r, alpha)`.
pub fn de_cycle<'t, T: Element>(
    tape: &'t Tape<T>,
    enc: &Encoder<T>,
    dec: &mut Decoder<T>,
    voxels: &Tensor<T>,
    w: &LossWeights,
    mode: Mode,
) -> Result<Cycle<'t, T>> {
    require_frozen(enc)?;
    let r = tape.constant(voxels)?;
    let img = decoder_forward(dec, tape, r, mode)?;
    let output = encoder_forward(enc, tape, img, EncoderNorm::Fixed)?;
    let loss = fmri_loss(output, r, w.alpha)?;
    Ok(Cycle { output, loss })
}

/// One decoder training batch; any part may be absent.
#[derive(Debug, Clone, Default)]
pub struct MixedBatch<T: Element = f32> {
    /// Paired `(images, responses)`.
    pub paired: Option<(Tensor<T>, Tensor<T>)>,
    pub images: Option<Tensor<T>>,
    pub fmri: Option<Tensor<T>>,
}

impl<T: Element> MixedBatch<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.paired.as_ref().map_or(0, |(s, _)| s.rows()),
            self.images.as_ref().map_or(0, Tensor::rows),
            self.fmri.as_ref().map_or(0, Tensor::rows),
        )
    }
}

/// The composite objective and its unweighted terms.
pub struct Objective<'t, T: Element> {
    pub total: Var<'t, T>,
    pub supervised: Option<Var<'t, T>>,
    pub ed: Option<Var<'t, T>>,
    pub de: Option<Var<'t, T>>,
}

/// `d * L^D + ed * L^ED + de * L^DE` over one mixed batch.
///
/// All decoder inputs (paired responses, encoded unlabeled images and
/// unlabeled responses) go through the decoder as one stacked batch; the
/// frozen encoder encodes the unlabeled images as constants.
#[allow(clippy::too_many_arguments)]
pub fn decoder_objective<'t, T: Element>(
    tape: &'t Tape<T>,
    enc: &Encoder<T>,
    dec: &mut Decoder<T>,
    batch: &MixedBatch<T>,
    bank: &FeatureBank<T>,
    w: &LossWeights,
    mode: Mode,
    enc_norm: EncoderNorm,
) -> Result<Objective<'t, T>> {
    require_frozen(enc)?;
    let (np, ni, nf) = batch.sizes();
    if np + ni + nf == 0 {
        return Err(Error::Config("decoder objective needs at least one nonempty sub-batch".into()));
    }
    let mut inputs = Vec::new();
    let mut paired_target = None;
    if let Some((s, r)) = &batch.paired {
        if s.rows() != r.rows() {
            return Err(Error::shape("decoder_objective", "paired images and responses differ in count"));
        }
        inputs.push(tape.constant(r)?);
        paired_target = Some(tape.constant(s)?);
    }
    let mut image_target = None;
    if let Some(s) = &batch.images {
        let sv = tape.constant(s)?;
        let encoded = encoder_forward(enc, tape, sv, enc_norm)?.to_tensor();
        inputs.push(tape.constant(&encoded)?);
        image_target = Some(sv);
    }
    let mut fmri_target = None;
    if let Some(r) = &batch.fmri {
        let rv = tape.constant(r)?;
        inputs.push(rv);
        fmri_target = Some(rv);
    }
    let stacked = if inputs.len() == 1 { inputs[0] } else { Var::concat_rows(&inputs)? };
    let decoded = decoder_forward(dec, tape, stacked, mode)?;

    let mut total: Option<Var<'t, T>> = None;
    let mut push = |term: Var<'t, T>, weight: f64| -> Result<()> {
        let scaled = term.scale(t(weight))?;
        total = Some(match total {
            Some(acc) => acc.add(scaled)?,
            None => scaled,
        });
        Ok(())
    };
    let mut supervised = None;
    if let Some(target) = paired_target {
        let l = image_loss(decoded.slice_rows(0, np)?, target, bank, w)?;
        push(l, w.d)?;
        supervised = Some(l);
    }
    let mut ed = None;
    if let Some(target) = image_target {
        let l = image_loss(decoded.slice_rows(np, ni)?, target, bank, w)?;
        push(l, w.ed)?;
        ed = Some(l);
    }
    let mut de = None;
    if let Some(target) = fmri_target {
        let re = encoder_forward(enc, tape, decoded.slice_rows(np + ni, nf)?, enc_norm)?;
        let l = fmri_loss(re, target, w.alpha)?;
        push(l, w.de)?;
        de = Some(l);
    }
    Ok(Objective { total: total.expect("at least one term"), supervised, ed, de })
}
