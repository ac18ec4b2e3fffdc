//! Two-phase training: tokenizer pretraining (joint autoencoding and
//! image-to-image tasks, L1 + adversarial) followed by autoregression
//! training with the l2 regression loss, plus the synthesize entry point.

use std::time::Instant;

use crate::autoreg::{ar_infer, ar_teacher_forced, init_ar, InferTrace};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{init_linear, init_patch_discriminator, patch_discriminator};
use crate::params::ParamStore;
use crate::phantom::VolumeSample;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{adam_step, gradients, AdamState, Tensor};
use crate::tokenizer::{decode, encode_contrast, encode_dose_invariant, encode_dose_variant, init_codec};

/// Register every trainable component. Both phases and every checkpoint
/// operate on this one parameter set; registration order is fixed so runs
/// are reproducible and checkpoints are shape-validated uniformly.
pub fn init_full_model<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
    cfg: &ModelConfig,
) -> Result<()> {
    cfg.validate()?;
    init_codec(store, rng, &cfg.codec)?;
    // per-scale bridges routing f_DV tokens into the decoder's dose slots
    // (task 2 of pretraining and the no-autoregression ablation)
    init_linear(store, rng, "proj.fine", cfg.codec.fine_dim, cfg.codec.fine_dim, false)?;
    init_linear(store, rng, "proj.coarse", cfg.codec.coarse_dim, cfg.codec.coarse_dim, false)?;
    init_patch_discriminator(store, rng, "disc", 1)?;
    init_ar(store, rng, &cfg.codec, &cfg.ar)?;
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.sub(target)?.abs()?.mean_all()
}

/// Mean squared difference.
pub fn l2_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let d = pred.sub(target)?;
    d.mul(&d)?.mean_all()
}

/// Non-saturating GAN losses over the patch-logit grid. The fake image is
/// detached inside the discriminator loss, so `loss_D` never reaches
/// generator weights.
pub fn adversarial_losses<T: Scalar>(
    store: &ParamStore<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d_real = patch_discriminator(real, store, "disc")?;
    let d_fake_det = patch_discriminator(&fake.detach(), store, "disc")?;
    let loss_d = d_real
        .neg()?
        .softplus()?
        .mean_all()?
        .add(&d_fake_det.softplus()?.mean_all()?)?;
    let d_fake = patch_discriminator(fake, store, "disc")?;
    let loss_g = d_fake.neg()?.softplus()?.mean_all()?;
    Ok((loss_d, loss_g))
}

/// f_DV tokens passed through the learned per-scale projections, ready for
/// the decoder's dose-variant slots.
pub fn dv_projected<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (f, c) = encode_dose_variant(x, store, &cfg.codec)?;
    Ok((
        f.matmul(&store.get("proj.fine")?)?,
        c.matmul(&store.get("proj.coarse")?)?,
    ))
}

/// The "w/o dose-variant autoregression" path: decode projected f_DV
/// tokens directly, no transformer involved.
pub fn predict_no_ar<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let di = encode_dose_invariant(x, store, &cfg.codec)?;
    let dv = dv_projected(x, store, cfg)?;
    decode((&di.0, &di.1), (&dv.0, &dv.1), store, &cfg.codec)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct StepRecord {
    pub phase: u8,
    pub step: u64,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_l2: f64,
    pub loss_adv_g: f64,
    pub loss_adv_d: f64,
    pub wall_ms: f64,
}

struct PhaseOptimizer<T: Scalar> {
    names: Vec<String>,
    state: AdamState<T>,
}

impl<T: Scalar> PhaseOptimizer<T> {
    fn new(store: &ParamStore<T>, cfg: &ModelConfig, select: impl Fn(&str) -> bool) -> Self {
        let names: Vec<String> =
            store.names().filter(|n| select(n)).map(String::from).collect();
        let params: Vec<Tensor<T>> = names.iter().map(|n| store.get(n).unwrap()).collect();
        PhaseOptimizer { state: AdamState::new(cfg.optimizer, &params), names }
    }

    fn step(&mut self, store: &mut ParamStore<T>, loss: &Tensor<T>) -> Result<()> {
        let params: Vec<Tensor<T>> = self
            .names
            .iter()
            .map(|n| store.get(n))
            .collect::<Result<_>>()?;
        let grads = gradients(loss, &params)?;
        let updated = adam_step(&params, &grads, &mut self.state)?;
        for (name, value) in self.names.iter().zip(updated) {
            store.replace(name, value)?;
        }
        Ok(())
    }
}

fn check_dataset<T: Scalar>(dataset: &[VolumeSample<T>], min: usize) -> Result<()> {
    if dataset.len() < min {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} samples, need at least {min}",
            dataset.len()
        )));
    }
    Ok(())
}

const DOSES: [f64; 3] = [1.0 / 3.0, 2.0 / 3.0, 1.0];

/// Phase 1. Per step: autoencode a random-dose contrast image through
/// f_CE + f_D, predict y_SD from x through projected f_DV tokens, sum both
/// task losses, update everything except the transformer (the
/// discriminator trains against its own loss). `on_step` sees every step;
/// `on_checkpoint` fires every `checkpoint_interval` steps (0 = never).
pub fn pretrain_tokenizers<T: Scalar>(
    dataset: &[VolumeSample<T>],
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    steps: u64,
    checkpoint_interval: u64,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(u64, &ParamStore<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    check_dataset(dataset, 2)?;
    let data: Vec<VolumeSample<T>> =
        dataset.iter().map(|s| s.normalized()).collect::<Result<_>>()?;
    let mut rng = SplitMix64::new(cfg.seed ^ 0x7031);
    let use_adv = cfg.loss.adv > 0.0;
    let mut gen_opt =
        PhaseOptimizer::new(store, cfg, |n| !n.starts_with("ar.") && !n.starts_with("disc."));
    let mut disc_opt = PhaseOptimizer::new(store, cfg, |n| n.starts_with("disc."));

    for step in 0..steps {
        let t0 = Instant::now();
        let sample = &data[rng.index(data.len())];
        let x = sample.x()?;
        let d = DOSES[rng.index(3)];
        let y_d = sample.dose_image(d)?.detach();
        let y_sd = sample.y_sd.detach();

        // task 1: autoencoding of the dose-d contrast image
        let di = encode_dose_invariant(&x, store, &cfg.codec)?;
        let ce = encode_contrast(&y_d, store, &cfg.codec)?;
        let recon1 = decode((&di.0, &di.1), (&ce.0, &ce.1), store, &cfg.codec)?;
        // task 2: image-to-image prediction of y_SD from x alone
        let dv = dv_projected(&x, store, cfg)?;
        let recon2 = decode((&di.0, &di.1), (&dv.0, &dv.1), store, &cfg.codec)?;

        let l1 = l1_loss(&recon1, &y_d)?.add(&l1_loss(&recon2, &y_sd)?)?;
        let mut loss = l1.scale(T::from_f64(cfg.loss.l1))?;
        let (mut adv_g_val, mut adv_d_val) = (0.0, 0.0);
        if use_adv {
            let (d1, g1) = adversarial_losses(store, &y_d, &recon1)?;
            let (d2, g2) = adversarial_losses(store, &y_sd, &recon2)?;
            let adv_g = g1.add(&g2)?;
            let adv_d = d1.add(&d2)?;
            adv_g_val = adv_g.item().to_f64();
            adv_d_val = adv_d.item().to_f64();
            loss = loss.add(&adv_g.scale(T::from_f64(cfg.loss.adv))?)?;
            disc_opt.step(store, &adv_d)?;
        }
        gen_opt.step(store, &loss)?;

        let record = StepRecord {
            phase: 1,
            step,
            loss_total: loss.item().to_f64(),
            loss_l1: l1.item().to_f64(),
            loss_l2: 0.0,
            loss_adv_g: adv_g_val,
            loss_adv_d: adv_d_val,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record)?;
        if checkpoint_interval > 0 && (step + 1) % checkpoint_interval == 0 {
            on_checkpoint(step + 1, store)?;
        }
    }
    Ok(())
}

/// Phase 2. Teacher-forced transformer pass, decode every predicted block,
/// l2 against the dose-ramp ground truth; only `ar.*` weights move unless
/// the freeze flag is cleared.
pub fn train_autoregression<T: Scalar>(
    dataset: &[VolumeSample<T>],
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    steps: u64,
    checkpoint_interval: u64,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(u64, &ParamStore<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    check_dataset(dataset, 1)?;
    if !store.contains("fdi.stage0.w") || !store.contains("ar.fine.w") {
        return Err(Error::InvalidArgument(
            "store is missing pretrained tokenizer or transformer weights".into(),
        ));
    }
    let data: Vec<VolumeSample<T>> =
        dataset.iter().map(|s| s.normalized()).collect::<Result<_>>()?;
    let mut rng = SplitMix64::new(cfg.seed ^ 0x7032);
    let frozen = cfg.freeze_codec_in_phase2;
    let mut opt = PhaseOptimizer::new(store, cfg, |n| {
        if frozen {
            n.starts_with("ar.")
        } else {
            !n.starts_with("disc.")
        }
    });
    let schedule = cfg.ar.dose_schedule();

    for step in 0..steps {
        let t0 = Instant::now();
        let sample = &data[rng.index(data.len())];
        let x = sample.x()?;
        let teachers: Vec<Tensor<T>> = schedule[..schedule.len() - 1]
            .iter()
            .map(|&d| sample.dose_image(d).map(|t| t.detach()))
            .collect::<Result<_>>()?;
        let preds = ar_teacher_forced(&x, &teachers, store, &cfg.codec, &cfg.ar)?;

        let mut l2_sum: Option<Tensor<T>> = None;
        for (i, &d) in schedule.iter().enumerate() {
            let term = if cfg.loss.token_space_l2 {
                let y = sample.dose_image(d)?.detach();
                let target = encode_contrast(&y, store, &cfg.codec)?;
                l2_loss(&preds[i].0, &target.0.detach())?
                    .add(&l2_loss(&preds[i].1, &target.1.detach())?)?
            } else {
                let di = encode_dose_invariant(&x, store, &cfg.codec)?;
                let img = decode((&di.0, &di.1), (&preds[i].0, &preds[i].1), store, &cfg.codec)?;
                l2_loss(&img, &sample.dose_image(d)?.detach())?
            };
            l2_sum = Some(match l2_sum {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let l2 = l2_sum.expect("schedule is non-empty");
        let loss = l2.scale(T::from_f64(cfg.loss.l2))?;
        opt.step(store, &loss)?;

        let record = StepRecord {
            phase: 2,
            step,
            loss_total: loss.item().to_f64(),
            loss_l1: 0.0,
            loss_l2: l2.item().to_f64(),
            loss_adv_g: 0.0,
            loss_adv_d: 0.0,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&record)?;
        if checkpoint_interval > 0 && (step + 1) % checkpoint_interval == 0 {
            on_checkpoint(step + 1, store)?;
        }
    }
    Ok(())
}

/// Inference entry point: dose-increase synthesis on a (normalized) input.
pub fn synthesize<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
) -> Result<(Vec<Tensor<T>>, InferTrace)> {
    ar_infer(x, store, &cfg.codec, &cfg.ar)
}
