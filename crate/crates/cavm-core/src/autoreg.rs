//! Staircase-masked dose autoregression over two parallel token scales.
//!
//! Inference raises the contrast dose in up to three steps. Each step runs
//! one masked forward pass, decodes the newly predicted dose-variant block
//! to an image, and re-encodes that image with the shared contrast
//! tokenizer before the next step consumes it. Training uses a single
//! teacher-forced pass: the block-structured mask makes every step's
//! prediction available at once.

use crate::error::{Error, Result};
use crate::nn::{build_staircase_mask, init_transformer_stack, transformer_stack, AttentionConfig};
use crate::params::{Init, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{
    decode, encode_contrast, encode_dose_invariant, encode_dose_variant, CodecConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scale {
    Fine,
    Coarse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    InputX,
    DoseLd,
    DoseHd,
    DoseSd,
    Placeholder,
}

/// An ordered list of same-shaped token blocks forming one scale's
/// transformer input.
#[derive(Clone)]
pub struct TokenSequence<T: Scalar> {
    pub scale: Scale,
    pub blocks: Vec<Tensor<T>>,
    pub roles: Vec<BlockRole>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(scale: Scale, blocks: Vec<Tensor<T>>, roles: Vec<BlockRole>) -> Result<Self> {
        if blocks.is_empty() || blocks.len() != roles.len() {
            return Err(Error::InvalidArgument(format!(
                "token sequence needs matching non-empty blocks/roles, got {}/{}",
                blocks.len(),
                roles.len()
            )));
        }
        let shape = blocks[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("token_sequence", "blocks must be (n, embed_dim)"));
        }
        for b in &blocks[1..] {
            if b.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "token_sequence",
                    format!("block {:?} differs from first block {:?}", b.shape(), shape),
                ));
            }
        }
        Ok(TokenSequence { scale, blocks, roles })
    }

    pub fn n_per_block(&self) -> usize {
        self.blocks[0].shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks[0].shape()[1]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn seq_len(&self) -> usize {
        self.num_blocks() * self.n_per_block()
    }

    /// Concatenate blocks into one `(K, embed_dim)` tensor.
    pub fn concat(&self) -> Result<Tensor<T>> {
        Tensor::concat(&self.blocks, 0)
    }
}

/// Block of shape `(n, embed_dim)` filled with the placeholder value t_0.
pub fn make_placeholders<T: Scalar>(n: usize, embed_dim: usize, fill: f64) -> Result<Tensor<T>> {
    if n == 0 || embed_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "placeholder block needs positive dims, got ({n},{embed_dim})"
        )));
    }
    Ok(Tensor::full(&[n, embed_dim], T::from_f64(fill)))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArConfig {
    /// Autoregression steps at inference; 3 is the full model, 1 and 2 are
    /// the ablation settings.
    pub num_steps: usize,
    pub layers: usize,
    pub num_heads: usize,
    pub rope_base: f64,
    /// Fill value for t_0 placeholder blocks.
    pub placeholder_fill: f64,
    /// Optional per-scale sequence-length capacities.
    pub max_seq_fine: Option<usize>,
    pub max_seq_coarse: Option<usize>,
}

impl ArConfig {
    pub fn validate(&self, codec: &CodecConfig) -> Result<()> {
        if !(1..=3).contains(&self.num_steps) {
            return Err(Error::Config(format!(
                "num_steps must be 1, 2 or 3, got {}",
                self.num_steps
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        self.attn(codec, Scale::Fine)?;
        self.attn(codec, Scale::Coarse)?;
        let nb = self.num_blocks();
        if let Some(cap) = self.max_seq_fine {
            if nb * codec.n_fine() > cap {
                return Err(Error::Config(format!(
                    "fine sequence {} exceeds capacity {cap}",
                    nb * codec.n_fine()
                )));
            }
        }
        if let Some(cap) = self.max_seq_coarse {
            if nb * codec.n_coarse() > cap {
                return Err(Error::Config(format!(
                    "coarse sequence {} exceeds capacity {cap}",
                    nb * codec.n_coarse()
                )));
            }
        }
        Ok(())
    }

    /// Input block t_x plus one block per dose level that appears in the
    /// sequence; capped at 3 (the SD tokens are predicted, never fed back).
    pub fn num_blocks(&self) -> usize {
        (self.num_steps + 1).min(3)
    }

    /// Relative doses produced, ending at the standard dose. Shorter
    /// schedules keep the low-dose ramp-up and drop intermediate doses.
    pub fn dose_schedule(&self) -> Vec<f64> {
        match self.num_steps {
            1 => vec![1.0],
            2 => vec![1.0 / 3.0, 1.0],
            _ => vec![1.0 / 3.0, 2.0 / 3.0, 1.0],
        }
    }

    pub fn attn(&self, codec: &CodecConfig, scale: Scale) -> Result<AttentionConfig> {
        let dim = match scale {
            Scale::Fine => codec.fine_dim,
            Scale::Coarse => codec.coarse_dim,
        };
        let mut cfg = AttentionConfig::new(dim, self.num_heads)?;
        cfg.rope_base = self.rope_base;
        Ok(cfg)
    }

    fn prefix(scale: Scale) -> &'static str {
        match scale {
            Scale::Fine => "ar.fine",
            Scale::Coarse => "ar.coarse",
        }
    }
}

/// Register both scale streams: the input projection W and the stacks.
pub fn init_ar<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
    codec: &CodecConfig,
    cfg: &ArConfig,
) -> Result<()> {
    cfg.validate(codec)?;
    for scale in [Scale::Fine, Scale::Coarse] {
        let attn = cfg.attn(codec, scale)?;
        let prefix = ArConfig::prefix(scale);
        let e = attn.embed_dim;
        store.register(&format!("{prefix}.w"), &[e, e], Init::Uniform { fan_in: e }, rng)?;
        init_transformer_stack(store, rng, prefix, &attn, cfg.layers)?;
    }
    Ok(())
}

/// One masked pass over a single scale's sequence:
/// `out = seq + stack(W · seq)` (Eqs. 1-3 outer residual; the stack carries
/// its own per-layer residuals).
pub fn ar_forward<T: Scalar>(
    seq: &TokenSequence<T>,
    store: &ParamStore<T>,
    codec: &CodecConfig,
    cfg: &ArConfig,
) -> Result<TokenSequence<T>> {
    let attn = cfg.attn(codec, seq.scale)?;
    if seq.embed_dim() != attn.embed_dim {
        return Err(Error::shape(
            "ar_forward",
            format!("embed_dim {} vs configured {}", seq.embed_dim(), attn.embed_dim),
        ));
    }
    let cap = match seq.scale {
        Scale::Fine => cfg.max_seq_fine,
        Scale::Coarse => cfg.max_seq_coarse,
    };
    if let Some(cap) = cap {
        if seq.seq_len() > cap {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds capacity {cap}",
                seq.seq_len()
            )));
        }
    }
    let prefix = ArConfig::prefix(seq.scale);
    let mask = build_staircase_mask(seq.n_per_block(), seq.num_blocks())?;
    let x = seq.concat()?;
    let proj = x.matmul(&store.get(&format!("{prefix}.w"))?)?;
    let h = transformer_stack(&proj, &mask, &attn, store, prefix, cfg.layers)?;
    let out = x.add(&h)?;
    let n = seq.n_per_block();
    let blocks: Result<Vec<_>> = (0..seq.num_blocks()).map(|b| out.slice(0, b * n, n)).collect();
    TokenSequence::new(seq.scale, blocks?, seq.roles.clone())
}

fn dose_role(dose: f64) -> BlockRole {
    if dose < 0.5 {
        BlockRole::DoseLd
    } else if dose < 0.99 {
        BlockRole::DoseHd
    } else {
        BlockRole::DoseSd
    }
}

/// Counters for the inference call-count contract.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferTrace {
    /// Lockstep masked passes (one per step, covering both scales).
    pub ar_forward_calls: usize,
    pub decode_calls: usize,
    pub encode_ce_calls: usize,
}

fn sequence_pair<T: Scalar>(
    dv: &(Tensor<T>, Tensor<T>),
    dose_fine: &[Tensor<T>],
    dose_coarse: &[Tensor<T>],
    roles: &[BlockRole],
) -> Result<(TokenSequence<T>, TokenSequence<T>)> {
    let mut fine = vec![dv.0.clone()];
    fine.extend(dose_fine.iter().cloned());
    let mut coarse = vec![dv.1.clone()];
    coarse.extend(dose_coarse.iter().cloned());
    Ok((
        TokenSequence::new(Scale::Fine, fine, roles.to_vec())?,
        TokenSequence::new(Scale::Coarse, coarse, roles.to_vec())?,
    ))
}

/// Gradual dose-increase inference. Returns one decoded image per step
/// (ending at the standard dose) and the call-count trace.
pub fn ar_infer<T: Scalar>(
    x: &Tensor<T>,
    store: &ParamStore<T>,
    codec: &CodecConfig,
    cfg: &ArConfig,
) -> Result<(Vec<Tensor<T>>, InferTrace)> {
    cfg.validate(codec)?;
    let di = encode_dose_invariant(x, store, codec)?;
    let dv = encode_dose_variant(x, store, codec)?;
    let schedule = cfg.dose_schedule();
    let nb = cfg.num_blocks();
    let n_dose = nb - 1;
    let mut dose_fine: Vec<Tensor<T>> = (0..n_dose)
        .map(|_| make_placeholders(codec.n_fine(), codec.fine_dim, cfg.placeholder_fill))
        .collect::<Result<_>>()?;
    let mut dose_coarse: Vec<Tensor<T>> = (0..n_dose)
        .map(|_| make_placeholders(codec.n_coarse(), codec.coarse_dim, cfg.placeholder_fill))
        .collect::<Result<_>>()?;
    let mut roles = vec![BlockRole::InputX];
    roles.extend(std::iter::repeat_n(BlockRole::Placeholder, n_dose));

    let mut images = Vec::with_capacity(cfg.num_steps);
    let mut trace = InferTrace::default();
    for (step, &dose) in schedule.iter().enumerate() {
        let (seq_f, seq_c) = sequence_pair(&dv, &dose_fine, &dose_coarse, &roles)?;
        let out_f = ar_forward(&seq_f, store, codec, cfg)?;
        let out_c = ar_forward(&seq_c, store, codec, cfg)?;
        trace.ar_forward_calls += 1;
        // shift-by-one: the output at block `step` predicts this step's dose
        let pred = (out_f.blocks[step].clone(), out_c.blocks[step].clone());
        let img = decode((&di.0, &di.1), (&pred.0, &pred.1), store, codec)?;
        trace.decode_calls += 1;
        images.push(img.clone());
        if step + 1 < cfg.num_steps {
            // feed the re-encoded t̃ into the next dose block, not the raw
            // autoregressed tokens
            let (tf, tc) = encode_contrast(&img, store, codec)?;
            trace.encode_ce_calls += 1;
            dose_fine[step] = tf;
            dose_coarse[step] = tc;
            roles[step + 1] = dose_role(dose);
        }
    }
    Ok((images, trace))
}

/// Single teacher-forced pass for training. `teachers` holds the
/// ground-truth images for every dose level except the last
/// (`num_steps - 1` images). Returns the predicted (fine, coarse) token
/// block pair for each of the `num_steps` dose levels in schedule order.
pub fn ar_teacher_forced<T: Scalar>(
    x: &Tensor<T>,
    teachers: &[Tensor<T>],
    store: &ParamStore<T>,
    codec: &CodecConfig,
    cfg: &ArConfig,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    cfg.validate(codec)?;
    if teachers.len() != cfg.num_steps - 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} teacher images, got {}",
            cfg.num_steps - 1,
            teachers.len()
        )));
    }
    let dv = encode_dose_variant(x, store, codec)?;
    let schedule = cfg.dose_schedule();
    let nb = cfg.num_blocks();
    let n_dose = nb - 1;
    let mut dose_fine = Vec::with_capacity(n_dose);
    let mut dose_coarse = Vec::with_capacity(n_dose);
    let mut roles = vec![BlockRole::InputX];
    for (i, y) in teachers.iter().enumerate() {
        let (tf, tc) = encode_contrast(y, store, codec)?;
        dose_fine.push(tf);
        dose_coarse.push(tc);
        roles.push(dose_role(schedule[i]));
    }
    while dose_fine.len() < n_dose {
        dose_fine.push(make_placeholders(codec.n_fine(), codec.fine_dim, cfg.placeholder_fill)?);
        dose_coarse.push(make_placeholders(
            codec.n_coarse(),
            codec.coarse_dim,
            cfg.placeholder_fill,
        )?);
        roles.push(BlockRole::Placeholder);
    }
    let (seq_f, seq_c) = sequence_pair(&dv, &dose_fine, &dose_coarse, &roles)?;
    let out_f = ar_forward(&seq_f, store, codec, cfg)?;
    let out_c = ar_forward(&seq_c, store, codec, cfg)?;
    Ok((0..cfg.num_steps)
        .map(|i| (out_f.blocks[i].clone(), out_c.blocks[i].clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::init_codec;

    fn tiny_codec() -> CodecConfig {
        CodecConfig {
            image_size: 16,
            in_channels: 2,
            base_channels: 2,
            fine_dim: 4,
            coarse_dim: 8,
        }
    }

    fn tiny_ar(num_steps: usize) -> ArConfig {
        ArConfig {
            num_steps,
            layers: 2,
            num_heads: 2,
            rope_base: 10000.0,
            placeholder_fill: 0.0,
            max_seq_fine: None,
            max_seq_coarse: None,
        }
    }

    fn built(num_steps: usize, seed: u64) -> (ParamStore<f64>, CodecConfig, ArConfig) {
        let codec = tiny_codec();
        let cfg = tiny_ar(num_steps);
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        init_codec(&mut store, &mut rng, &codec).unwrap();
        init_ar(&mut store, &mut rng, &codec, &cfg).unwrap();
        (store, codec, cfg)
    }

    /// Make the transformer non-trivial: the zero-initialized residual
    /// projections would otherwise reduce every stack to the identity.
    fn unfreeze_residuals(store: &mut ParamStore<f64>) {
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            if n.starts_with("ar.") && (n.ends_with(".wo") || n.ends_with(".w_down")) {
                let t = store.get(&n).unwrap();
                let data: Vec<f64> =
                    (0..t.numel()).map(|i| 0.05 * (((i * 7) % 11) as f64 - 5.0)).collect();
                store
                    .replace(&n, Tensor::from_vec(t.shape(), data).unwrap().requires_grad())
                    .unwrap();
            }
        }
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * scale).sin()).collect()).unwrap()
    }

    #[test]
    fn placeholders_filled_and_deterministic() {
        let a: Tensor<f64> = make_placeholders(2, 3, 0.0).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert!(a.data().iter().all(|&v| v == 0.0));
        let b: Tensor<f64> = make_placeholders(2, 3, 0.5).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.5));
        let c: Tensor<f64> = make_placeholders(2, 3, 0.5).unwrap();
        assert_eq!(b.data(), c.data());
        assert!(make_placeholders::<f64>(0, 3, 0.0).is_err());
    }

    #[test]
    fn num_blocks_and_schedule() {
        assert_eq!(tiny_ar(1).num_blocks(), 2);
        assert_eq!(tiny_ar(2).num_blocks(), 3);
        assert_eq!(tiny_ar(3).num_blocks(), 3);
        assert_eq!(tiny_ar(1).dose_schedule(), vec![1.0]);
        assert_eq!(tiny_ar(2).dose_schedule(), vec![1.0 / 3.0, 1.0]);
        assert_eq!(tiny_ar(3).dose_schedule(), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn ar_forward_zero_w_is_identity() {
        let (mut store, codec, cfg) = built(3, 11);
        // zero the input projection: with zero-init residual projections the
        // whole update branch vanishes
        store
            .replace("ar.fine.w", Tensor::zeros(&[4, 4]).requires_grad())
            .unwrap();
        let blocks: Vec<Tensor<f64>> = (0..3).map(|i| ramp(&[codec.n_fine(), 4], 0.1 * (i + 1) as f64)).collect();
        let roles = vec![BlockRole::InputX, BlockRole::DoseLd, BlockRole::DoseHd];
        let seq = TokenSequence::new(Scale::Fine, blocks.clone(), roles).unwrap();
        let out = ar_forward(&seq, &store, &codec, &cfg).unwrap();
        for (a, b) in out.blocks.iter().zip(&blocks) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn ar_forward_block_causality() {
        let (mut store, codec, cfg) = built(3, 12);
        unfreeze_residuals(&mut store);
        let roles = vec![BlockRole::InputX, BlockRole::DoseLd, BlockRole::DoseHd];
        let blocks: Vec<Tensor<f64>> = (0..3).map(|i| ramp(&[codec.n_coarse(), 8], 0.2 * (i + 1) as f64)).collect();
        let mut pert = blocks.clone();
        pert[2] = ramp(&[codec.n_coarse(), 8], 0.9);
        let s0 = TokenSequence::new(Scale::Coarse, blocks, roles.clone()).unwrap();
        let s1 = TokenSequence::new(Scale::Coarse, pert, roles).unwrap();
        let o0 = ar_forward(&s0, &store, &codec, &cfg).unwrap();
        let o1 = ar_forward(&s1, &store, &codec, &cfg).unwrap();
        assert_eq!(o0.blocks[0].data(), o1.blocks[0].data());
        assert_eq!(o0.blocks[1].data(), o1.blocks[1].data());
        assert_ne!(o0.blocks[2].data(), o1.blocks[2].data());
    }

    #[test]
    fn ar_forward_rejects_wrong_dim() {
        let (store, codec, cfg) = built(3, 13);
        let seq = TokenSequence::new(
            Scale::Fine,
            vec![Tensor::<f64>::zeros(&[codec.n_fine(), 6])],
            vec![BlockRole::InputX],
        )
        .unwrap();
        assert!(ar_forward(&seq, &store, &codec, &cfg).is_err());
    }

    #[test]
    fn seq_capacity_enforced() {
        let (store, codec, mut cfg) = built(3, 14);
        cfg.max_seq_fine = Some(codec.n_fine() * 2); // 3 blocks won't fit
        let blocks: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::zeros(&[codec.n_fine(), 4])).collect();
        let roles = vec![BlockRole::InputX, BlockRole::Placeholder, BlockRole::Placeholder];
        let seq = TokenSequence::new(Scale::Fine, blocks, roles).unwrap();
        assert!(ar_forward(&seq, &store, &codec, &cfg).is_err());
        assert!(cfg.validate(&codec).is_err());
    }

    #[test]
    fn infer_returns_step_count_images_and_trace() {
        let (mut store, codec, cfg) = built(3, 15);
        unfreeze_residuals(&mut store);
        let x = ramp(&[2, 16, 16], 0.03);
        let (images, trace) = ar_infer(&x, &store, &codec, &cfg).unwrap();
        assert_eq!(images.len(), 3);
        for img in &images {
            assert_eq!(img.shape(), &[1, 16, 16]);
        }
        assert_eq!(
            trace,
            InferTrace { ar_forward_calls: 3, decode_calls: 3, encode_ce_calls: 2 }
        );
    }

    #[test]
    fn one_step_trace() {
        let (store, codec, cfg) = built(1, 16);
        let x = ramp(&[2, 16, 16], 0.04);
        let (images, trace) = ar_infer(&x, &store, &codec, &cfg).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(
            trace,
            InferTrace { ar_forward_calls: 1, decode_calls: 1, encode_ce_calls: 0 }
        );
    }

    #[test]
    fn step_one_output_independent_of_later_steps() {
        let (mut store, codec, cfg3) = built(3, 17);
        unfreeze_residuals(&mut store);
        let cfg2 = ArConfig { num_steps: 2, ..cfg3 };
        let x = ramp(&[2, 16, 16], 0.05);
        let (full, _) = ar_infer(&x, &store, &codec, &cfg3).unwrap();
        let (trunc, _) = ar_infer(&x, &store, &codec, &cfg2).unwrap();
        // both runs compute step 1 from the identical (t_x, t_0, t_0) pass
        assert_eq!(full[0].data(), trunc[0].data());
    }

    #[test]
    fn teacher_forced_block0_matches_infer_step1() {
        let (mut store, codec, cfg) = built(3, 18);
        unfreeze_residuals(&mut store);
        let x = ramp(&[2, 16, 16], 0.07);
        let y_ld = ramp(&[1, 16, 16], 0.09);
        let y_hd = ramp(&[1, 16, 16], 0.11);
        let preds = ar_teacher_forced(&x, &[y_ld, y_hd], &store, &codec, &cfg).unwrap();
        assert_eq!(preds.len(), 3);

        // block 0 attends only to t_x, so teacher content cannot leak in;
        // reproduce inference step 1 by hand and compare bit-exactly
        let dv = encode_dose_variant(&x, &store, &codec).unwrap();
        let zf = make_placeholders(codec.n_fine(), codec.fine_dim, 0.0).unwrap();
        let zc = make_placeholders(codec.n_coarse(), codec.coarse_dim, 0.0).unwrap();
        let roles = vec![BlockRole::InputX, BlockRole::Placeholder, BlockRole::Placeholder];
        let seq_f = TokenSequence::new(Scale::Fine, vec![dv.0, zf.clone(), zf], roles.clone()).unwrap();
        let seq_c = TokenSequence::new(Scale::Coarse, vec![dv.1, zc.clone(), zc], roles).unwrap();
        let of = ar_forward(&seq_f, &store, &codec, &cfg).unwrap();
        let oc = ar_forward(&seq_c, &store, &codec, &cfg).unwrap();
        assert_eq!(preds[0].0.data(), of.blocks[0].data());
        assert_eq!(preds[0].1.data(), oc.blocks[0].data());
    }

    #[test]
    fn teacher_forced_checks_teacher_count() {
        let (store, codec, cfg) = built(3, 19);
        let x = ramp(&[2, 16, 16], 0.08);
        assert!(ar_teacher_forced(&x, &[], &store, &codec, &cfg).is_err());
    }
}
