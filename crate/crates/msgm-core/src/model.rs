//! End-to-end model assembly: feature tensors → graphs → token embeddings →
//! per-stream state-space stacks → pooling/fusion → linear classifier.

use crate::encoder::{
    base_embed_t, cheb_forward_t, fuse_tokens_t, node_mean_t, scaled_laplacian_t, BaseEmbed,
    BoundChebEncoder, ChebEncoder,
};
use crate::error::{MsgmError, Result};
use crate::graph::{
    batch_mean_mix, build_global_adjacency, build_local_adjacency, stack_priors, AdjacencyStats,
    MixParams, RegionMap, SpatialPrior,
};
use crate::mamba::{msst_forward_t, BoundMsstStack, MsstStack};
use crate::signal::{FeatureTensor, ScaleSpec, NUM_BANDS};
use crate::tensor::{Tape, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const L2_GUARD: f64 = 1e-12;

/// Switches that remove one architectural ingredient at a time.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Keep only the first second-level window.
    pub no_temporal_multiscale: bool,
    /// Drop the local stream; global graph only.
    pub no_spatial_multiscale: bool,
    /// One shallow encoder per stream instead of shallow + deep.
    pub single_gcn: bool,
    /// Tokens are the base embedding only; no graph encoders.
    pub no_fusion: bool,
    /// Replace the MSST stack by the identity; pool raw tokens.
    pub no_msst: bool,
}

impl AblationFlags {
    pub fn any(&self) -> bool {
        self.no_temporal_multiscale
            || self.no_spatial_multiscale
            || self.single_gcn
            || self.no_fusion
            || self.no_msst
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MsgmConfig {
    /// Embedding dimension.
    pub h: usize,
    /// Number of MSST blocks per stack.
    pub msst_layers: usize,
    /// Chebyshev polynomial order.
    pub cheb_order: usize,
    /// SSM state dimension.
    pub d_state: usize,
    /// Number of emotion classes.
    pub d_out: usize,
    /// Dropout rate on fused token embeddings during training.
    pub dropout: f64,
    /// Two-level segmentation windows.
    pub scale_spec: ScaleSpec,
    /// Channel-to-region assignment (also fixes the channel order).
    pub region_map: RegionMap,
    /// Share one MSST stack across scales and streams (the default); when
    /// false each (scale, stream) pair gets its own stack.
    pub share_msst: bool,
    pub ablation: AblationFlags,
}

impl Default for MsgmConfig {
    fn default() -> Self {
        MsgmConfig {
            h: 32,
            msst_layers: 1,
            cheb_order: 3,
            d_state: 16,
            d_out: 2,
            dropout: 0.25,
            scale_spec: ScaleSpec::default(),
            region_map: RegionMap::builtin("62ch-7region").expect("shipped map parses"),
            share_msst: true,
            ablation: AblationFlags::default(),
        }
    }
}

impl MsgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out < 2 {
            return Err(MsgmError::Config(format!("d_out must be >= 2, got {}", self.d_out)));
        }
        if self.h == 0 || self.msst_layers == 0 || self.cheb_order == 0 || self.d_state == 0 {
            return Err(MsgmError::Config(
                "h, msst_layers, cheb_order and d_state must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MsgmError::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        self.scale_spec.validate()?;
        self.region_map.validate()?;
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.region_map.num_channels()
    }

    /// Second-level windows after applying the temporal-multiscale ablation.
    pub fn effective_windows(&self) -> Vec<(f64, f64)> {
        if self.ablation.no_temporal_multiscale {
            vec![self.scale_spec.windows[0]]
        } else {
            self.scale_spec.windows.clone()
        }
    }

    /// The scale spec actually used by the pipeline (ablation applied).
    pub fn effective_scale_spec(&self) -> ScaleSpec {
        ScaleSpec { windows: self.effective_windows(), ..self.scale_spec.clone() }
    }

    pub fn num_scales(&self) -> usize {
        self.effective_windows().len()
    }

    fn num_stacks(&self) -> usize {
        if self.ablation.no_msst {
            0
        } else if self.share_msst {
            1
        } else {
            let streams = if self.ablation.no_spatial_multiscale { 1 } else { 2 };
            self.num_scales() * streams
        }
    }

    fn stack_index(&self, scale: usize, stream: usize) -> usize {
        if self.share_msst {
            0
        } else {
            let streams = if self.ablation.no_spatial_multiscale { 1 } else { 2 };
            scale * streams + stream
        }
    }

    fn uses_local_stream(&self) -> bool {
        !self.ablation.no_spatial_multiscale
    }

    fn uses_encoders(&self) -> bool {
        !self.ablation.no_fusion
    }

    fn uses_deep_encoders(&self) -> bool {
        self.uses_encoders() && !self.ablation.single_gcn
    }
}

/// All trainable parameter groups plus the frozen prior snapshots.
#[derive(Clone, Debug)]
pub struct MsgmParams {
    pub mixes: Vec<MixParams>,
    pub priors: Vec<SpatialPrior>,
    pub base: BaseEmbed,
    pub shallow_global: Option<ChebEncoder>,
    pub deep_global: Option<ChebEncoder>,
    pub shallow_local: Option<ChebEncoder>,
    pub deep_local: Option<ChebEncoder>,
    pub msst: Vec<MsstStack>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

impl MsgmParams {
    /// Initialize all parameter groups. When `features` (one tensor per
    /// effective scale, computed from the training split only) is given, the
    /// spatial priors are built from its batch statistics; otherwise they
    /// start as zero matrices (checkpoint-loading skeleton).
    pub fn init(cfg: &MsgmConfig, features: Option<&[FeatureTensor]>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels();
        if cfg.cheb_order > c {
            eprintln!(
                "warning: Chebyshev order {} exceeds channel count {c}; higher polynomials are degenerate",
                cfg.cheb_order
            );
        }
        let spec = cfg.effective_scale_spec();
        if let Some(feats) = features {
            if feats.len() != spec.num_scales() {
                return Err(MsgmError::Config(format!(
                    "{} feature tensors supplied for {} scales",
                    feats.len(),
                    spec.num_scales()
                )));
            }
        }

        let mut mixes = Vec::new();
        let mut priors = Vec::new();
        for k in 0..spec.num_scales() {
            let n_k = spec.segments_per_window(k);
            let mix = MixParams::init(c, n_k, &mut rng);
            let (global, local, stats) = match features {
                Some(feats) => {
                    if feats[k].channels != c {
                        return Err(MsgmError::Config(format!(
                            "feature tensor has {} channels, region map {c}",
                            feats[k].channels
                        )));
                    }
                    let z = batch_mean_mix(&feats[k], &mix)?;
                    let (global, stats) = build_global_adjacency(&z)?;
                    let local = build_local_adjacency(&global, &cfg.region_map)?;
                    (global, local, stats)
                }
                None => (
                    Tensor::zeros(vec![c, c]),
                    Tensor::zeros(vec![c, c]),
                    AdjacencyStats { sigma: 0.0, kappa_theta: 0.0, d_theta: 0.0 },
                ),
            };
            priors.push(stack_priors(k, global, local, &cfg.region_map, stats)?);
            mixes.push(mix);
        }

        let base = BaseEmbed::init(c, NUM_BANDS, cfg.h, &mut rng);
        let mk_enc = |depth: usize, rng: &mut ChaCha8Rng| {
            ChebEncoder::init(cfg.cheb_order, depth, NUM_BANDS, cfg.h, rng)
        };
        let shallow_global = cfg.uses_encoders().then(|| mk_enc(1, &mut rng));
        let deep_global = cfg.uses_deep_encoders().then(|| mk_enc(2, &mut rng));
        let shallow_local =
            (cfg.uses_encoders() && cfg.uses_local_stream()).then(|| mk_enc(1, &mut rng));
        let deep_local =
            (cfg.uses_deep_encoders() && cfg.uses_local_stream()).then(|| mk_enc(2, &mut rng));

        let msst = (0..cfg.num_stacks())
            .map(|_| MsstStack::init(cfg.h, cfg.d_state, cfg.msst_layers, &mut rng))
            .collect();

        let limit = (6.0 / (cfg.h + cfg.d_out) as f64).sqrt();
        let classifier_w = Tensor::new(
            vec![cfg.h, cfg.d_out],
            (0..cfg.h * cfg.d_out).map(|_| rng.gen_range(-limit..limit)).collect(),
        )
        .with_grad();
        let classifier_b = Tensor::zeros(vec![cfg.d_out]).with_grad();

        Ok(MsgmParams {
            mixes,
            priors,
            base,
            shallow_global,
            deep_global,
            shallow_local,
            deep_local,
            msst,
            classifier_w,
            classifier_b,
        })
    }

    /// Visit every trainable tensor with its canonical name. The visitation
    /// order defines the optimizer's parameter order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        for (k, mix) in self.mixes.iter().enumerate() {
            f(format!("scale{k}.mix.w"), &mix.w);
            f(format!("scale{k}.mix.v"), &mix.v);
        }
        for (k, prior) in self.priors.iter().enumerate() {
            f(format!("scale{k}.prior.global"), &prior.global);
            f(format!("scale{k}.prior.local"), &prior.local);
        }
        f("base.w".into(), &self.base.w);
        f("base.b".into(), &self.base.b);
        let encoders = [
            ("shallow_global", &self.shallow_global),
            ("deep_global", &self.deep_global),
            ("shallow_local", &self.shallow_local),
            ("deep_local", &self.deep_local),
        ];
        for (name, enc) in encoders {
            if let Some(enc) = enc {
                for (li, layer) in enc.layers.iter().enumerate() {
                    for (ti, theta) in layer.thetas.iter().enumerate() {
                        f(format!("enc.{name}.layer{li}.theta{ti}"), theta);
                    }
                    f(format!("enc.{name}.layer{li}.bias"), &layer.bias);
                }
            }
        }
        for (si, stack) in self.msst.iter().enumerate() {
            for (bi, (norm, mamba)) in stack.blocks.iter().enumerate() {
                let p = format!("msst{si}.block{bi}");
                f(format!("{p}.norm.w"), &norm.w);
                f(format!("{p}.in_proj.w"), &mamba.in_proj_w);
                f(format!("{p}.in_proj.b"), &mamba.in_proj_b);
                f(format!("{p}.conv.k"), &mamba.conv_k);
                f(format!("{p}.x_proj.w"), &mamba.x_proj_w);
                f(format!("{p}.x_proj.b"), &mamba.x_proj_b);
                f(format!("{p}.dt_proj.w"), &mamba.dt_proj_w);
                f(format!("{p}.dt_proj.b"), &mamba.dt_proj_b);
                f(format!("{p}.a_log"), &mamba.a_log);
                f(format!("{p}.d"), &mamba.d);
                f(format!("{p}.out_proj.w"), &mamba.out_proj_w);
                f(format!("{p}.out_proj.b"), &mamba.out_proj_b);
            }
            f(format!("msst{si}.final_norm.w"), &stack.final_norm.w);
        }
        f("classifier.w".into(), &self.classifier_w);
        f("classifier.b".into(), &self.classifier_b);
    }

    /// Mutable mirror of [`visit`]; must enumerate identically.
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor)) {
        for (k, mix) in self.mixes.iter_mut().enumerate() {
            f(format!("scale{k}.mix.w"), &mut mix.w);
            f(format!("scale{k}.mix.v"), &mut mix.v);
        }
        for (k, prior) in self.priors.iter_mut().enumerate() {
            f(format!("scale{k}.prior.global"), &mut prior.global);
            f(format!("scale{k}.prior.local"), &mut prior.local);
        }
        f("base.w".into(), &mut self.base.w);
        f("base.b".into(), &mut self.base.b);
        let encoders = [
            ("shallow_global", &mut self.shallow_global),
            ("deep_global", &mut self.deep_global),
            ("shallow_local", &mut self.shallow_local),
            ("deep_local", &mut self.deep_local),
        ];
        for (name, enc) in encoders {
            if let Some(enc) = enc {
                for (li, layer) in enc.layers.iter_mut().enumerate() {
                    for (ti, theta) in layer.thetas.iter_mut().enumerate() {
                        f(format!("enc.{name}.layer{li}.theta{ti}"), theta);
                    }
                    f(format!("enc.{name}.layer{li}.bias"), &mut layer.bias);
                }
            }
        }
        for (si, stack) in self.msst.iter_mut().enumerate() {
            for (bi, (norm, mamba)) in stack.blocks.iter_mut().enumerate() {
                let p = format!("msst{si}.block{bi}");
                f(format!("{p}.norm.w"), &mut norm.w);
                f(format!("{p}.in_proj.w"), &mut mamba.in_proj_w);
                f(format!("{p}.in_proj.b"), &mut mamba.in_proj_b);
                f(format!("{p}.conv.k"), &mut mamba.conv_k);
                f(format!("{p}.x_proj.w"), &mut mamba.x_proj_w);
                f(format!("{p}.x_proj.b"), &mut mamba.x_proj_b);
                f(format!("{p}.dt_proj.w"), &mut mamba.dt_proj_w);
                f(format!("{p}.dt_proj.b"), &mut mamba.dt_proj_b);
                f(format!("{p}.a_log"), &mut mamba.a_log);
                f(format!("{p}.d"), &mut mamba.d);
                f(format!("{p}.out_proj.w"), &mut mamba.out_proj_w);
                f(format!("{p}.out_proj.b"), &mut mamba.out_proj_b);
            }
            f(format!("msst{si}.final_norm.w"), &mut stack.final_norm.w);
        }
        f("classifier.w".into(), &mut self.classifier_w);
        f("classifier.b".into(), &mut self.classifier_b);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, t| count += t.len());
        count
    }

    /// Re-apply every scale's local-region mask (after optimizer updates).
    pub fn reapply_masks(&mut self) {
        for prior in self.priors.iter_mut() {
            prior.reapply_local_mask();
        }
    }
}

/// Parameter VarIds registered for one forward pass, keyed by name.
pub struct Binding {
    pub vars: Vec<(String, VarId)>,
    index: HashMap<String, VarId>,
}

impl Binding {
    fn get(&self, name: &str) -> VarId {
        *self.index.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.index.get(name).copied()
    }
}

fn bind_params(params: &MsgmParams, tape: &mut Tape) -> Binding {
    let mut vars = Vec::new();
    params.visit(&mut |name, t| {
        vars.push((name, t.clone()));
    });
    let vars: Vec<(String, VarId)> =
        vars.into_iter().map(|(name, t)| (name, tape.leaf(t))).collect();
    let index = vars.iter().cloned().collect();
    Binding { vars, index }
}

fn bind_encoder(binding: &Binding, enc: &ChebEncoder, name: &str) -> BoundChebEncoder {
    BoundChebEncoder {
        order: enc.order,
        layers: enc
            .layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let thetas = (0..layer.thetas.len())
                    .map(|ti| binding.get(&format!("enc.{name}.layer{li}.theta{ti}")))
                    .collect();
                let bias = binding.get(&format!("enc.{name}.layer{li}.bias"));
                (thetas, bias)
            })
            .collect(),
    }
}

fn bind_stack(binding: &Binding, stack: &MsstStack, si: usize) -> BoundMsstStack {
    BoundMsstStack {
        blocks: stack
            .blocks
            .iter()
            .enumerate()
            .map(|(bi, (_, mamba))| {
                let p = format!("msst{si}.block{bi}");
                let bound = crate::mamba::BoundMamba {
                    h: mamba.h,
                    d_inner: mamba.d_inner,
                    dt_rank: mamba.dt_rank,
                    d_state: mamba.d_state,
                    in_proj_w: binding.get(&format!("{p}.in_proj.w")),
                    in_proj_b: binding.get(&format!("{p}.in_proj.b")),
                    conv_k: binding.get(&format!("{p}.conv.k")),
                    x_proj_w: binding.get(&format!("{p}.x_proj.w")),
                    x_proj_b: binding.get(&format!("{p}.x_proj.b")),
                    dt_proj_w: binding.get(&format!("{p}.dt_proj.w")),
                    dt_proj_b: binding.get(&format!("{p}.dt_proj.b")),
                    a_log: binding.get(&format!("{p}.a_log")),
                    d: binding.get(&format!("{p}.d")),
                    out_proj_w: binding.get(&format!("{p}.out_proj.w")),
                    out_proj_b: binding.get(&format!("{p}.out_proj.b")),
                };
                (binding.get(&format!("{p}.norm.w")), bound)
            })
            .collect(),
        final_norm: binding.get(&format!("msst{si}.final_norm.w")),
    }
}

/// A completed forward pass: the tape, the logits node, and the parameter
/// binding for gradient readback.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: VarId,
    pub binding: Binding,
}

/// Inverted-dropout mask as a constant tensor (entries 0 or 1/(1-p)).
fn dropout_mask(shape: Vec<usize>, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    Tensor::new(
        shape,
        (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect(),
    )
}

/// Sequence mean-pool then L2-normalize: (b, n, h) -> (b, h).
fn pool_stream(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let pooled = tape.mean_axis1(x)?;
    tape.l2_normalize_rows(pooled, L2_GUARD)
}

/// Pool per-stream sequences, average global/local, then mean over scales.
pub fn pool_and_fuse_t(tape: &mut Tape, streams: &[(VarId, Option<VarId>)]) -> Result<VarId> {
    if streams.is_empty() {
        return Err(MsgmError::contract("pool_and_fuse", "need at least one scale"));
    }
    let mut acc: Option<VarId> = None;
    for &(global, local) in streams {
        let g = pool_stream(tape, global)?;
        let combined = match local {
            Some(l) => {
                let lv = pool_stream(tape, l)?;
                let sum = tape.add(g, lv)?;
                tape.scale(sum, 0.5)
            }
            None => g,
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, combined)?,
            None => combined,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / streams.len() as f64))
}

/// Run the model forward over per-scale feature tensors.
///
/// `dropout_rng` enables training-mode dropout on the fused token
/// embeddings; pass None for deterministic inference.
pub fn forward(
    params: &MsgmParams,
    cfg: &MsgmConfig,
    feats: &[FeatureTensor],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass> {
    let spec = cfg.effective_scale_spec();
    if feats.len() != spec.num_scales() {
        return Err(MsgmError::Config(format!(
            "{} feature tensors for {} scales",
            feats.len(),
            spec.num_scales()
        )));
    }
    let c = cfg.channels();
    let b = feats[0].batch;
    if b == 0 {
        return Err(MsgmError::Data("empty batch".into()));
    }

    let mut tape = Tape::new();
    let binding = bind_params(params, &mut tape);

    let enc_sg = params.shallow_global.as_ref().map(|e| bind_encoder(&binding, e, "shallow_global"));
    let enc_dg = params.deep_global.as_ref().map(|e| bind_encoder(&binding, e, "deep_global"));
    let enc_sl = params.shallow_local.as_ref().map(|e| bind_encoder(&binding, e, "shallow_local"));
    let enc_dl = params.deep_local.as_ref().map(|e| bind_encoder(&binding, e, "deep_local"));
    let stacks: Vec<BoundMsstStack> = params
        .msst
        .iter()
        .enumerate()
        .map(|(si, s)| bind_stack(&binding, s, si))
        .collect();

    let mask_local = cfg.region_map.same_region_mask();
    let mut streams = Vec::with_capacity(feats.len());
    for (k, feat) in feats.iter().enumerate() {
        if feat.channels != c {
            return Err(MsgmError::Data(format!(
                "scale {k}: feature tensor has {} channels, model expects {c}",
                feat.channels
            )));
        }
        if feat.batch != b {
            return Err(MsgmError::Data("scales disagree on batch size".into()));
        }
        let n_k = feat.segments;
        let m = b * n_k;
        let fv = tape.leaf(feat.values.clone());
        let f3 = tape.reshape(fv, vec![m, c, NUM_BANDS])?;

        // base embedding (shared by both streams)
        let base_w = binding.get("base.w");
        let base_b = binding.get("base.b");
        let base = base_embed_t(&mut tape, f3, base_w, base_b)?;

        let encode_stream = |tape: &mut Tape,
                                 prior: VarId,
                                 mask: Option<&[bool]>,
                                 shallow: &Option<BoundChebEncoder>,
                                 deep: &Option<BoundChebEncoder>|
         -> Result<VarId> {
            if !cfg.uses_encoders() {
                return Ok(base);
            }
            let copy0 = tape.narrow0(prior, 0, 1)?;
            let copy0 = tape.reshape(copy0, vec![c, c])?;
            let a0 = tape.graph_project(copy0, mask)?;
            let lap0 = scaled_laplacian_t(tape, a0)?;
            let sh = shallow.as_ref().expect("shallow encoder present");
            let sh_out = cheb_forward_t(tape, f3, sh, lap0)?;
            let sh_tok = node_mean_t(tape, sh_out)?;
            match deep {
                Some(dp) => {
                    let copy1 = tape.narrow0(prior, 1, 1)?;
                    let copy1 = tape.reshape(copy1, vec![c, c])?;
                    let a1 = tape.graph_project(copy1, mask)?;
                    let lap1 = scaled_laplacian_t(tape, a1)?;
                    let dp_out = cheb_forward_t(tape, f3, dp, lap1)?;
                    let dp_tok = node_mean_t(tape, dp_out)?;
                    fuse_tokens_t(tape, base, sh_tok, dp_tok)
                }
                None => {
                    // single-GCN ablation: mean of base and shallow token
                    let sum = tape.add(base, sh_tok)?;
                    Ok(tape.scale(sum, 0.5))
                }
            }
        };

        let g_prior = binding.get(&format!("scale{k}.prior.global"));
        let mut s_g = encode_stream(&mut tape, g_prior, None, &enc_sg, &enc_dg)?;
        let mut s_l = if cfg.uses_local_stream() {
            let l_prior = binding.get(&format!("scale{k}.prior.local"));
            Some(encode_stream(&mut tape, l_prior, Some(&mask_local), &enc_sl, &enc_dl)?)
        } else {
            None
        };

        if let Some(rng) = dropout_rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let mg = tape.leaf(dropout_mask(vec![m, cfg.h], cfg.dropout, rng));
                s_g = tape.mul(s_g, mg)?;
                if let Some(sl) = s_l {
                    let ml = tape.leaf(dropout_mask(vec![m, cfg.h], cfg.dropout, rng));
                    s_l = Some(tape.mul(sl, ml)?);
                }
            }
        }

        let g_seq = tape.reshape(s_g, vec![b, n_k, cfg.h])?;
        let g_out = if cfg.ablation.no_msst {
            g_seq
        } else {
            msst_forward_t(&mut tape, g_seq, &stacks[cfg.stack_index(k, 0)])?
        };
        let l_out = match s_l {
            Some(sl) => {
                let l_seq = tape.reshape(sl, vec![b, n_k, cfg.h])?;
                Some(if cfg.ablation.no_msst {
                    l_seq
                } else {
                    msst_forward_t(&mut tape, l_seq, &stacks[cfg.stack_index(k, 1)])?
                })
            }
            None => None,
        };
        streams.push((g_out, l_out));
    }

    let x_final = pool_and_fuse_t(&mut tape, &streams)?;
    let w = binding.get("classifier.w");
    let bvar = binding.get("classifier.b");
    let mm = tape.matmul(x_final, w)?;
    let logits = tape.add_bias(mm, bvar)?;
    Ok(ForwardPass { tape, logits, binding })
}

/// Smoothed cross-entropy loss node on an existing forward tape.
pub fn loss_t(tape: &mut Tape, logits: VarId, labels: &[usize], smoothing: f64) -> Result<VarId> {
    tape.smoothed_cross_entropy(logits, labels, smoothing)
}

// ── Checkpoint format ──────────────────────────────────────────────────────
//
// magic "MSGM": u32 little-endian header length: header JSON: payload of
// little-endian f64 tensors at the offsets recorded in the header.

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: MsgmConfig,
    stats: Vec<AdjacencyStats>,
    tensors: Vec<TensorEntry>,
}

const CKPT_MAGIC: &[u8; 4] = b"MSGM";

/// Serialize config + every trainable tensor + the frozen initial priors.
pub fn save_checkpoint(path: &Path, cfg: &MsgmConfig, params: &MsgmParams) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = params.named_tensors();
    for (k, prior) in params.priors.iter().enumerate() {
        tensors.push((format!("init.scale{k}.global"), prior.initial_global.clone()));
        tensors.push((format!("init.scale{k}.local"), prior.initial_local.clone()));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += (t.len() * 8) as u64;
    }
    let header = CheckpointHeader {
        version: 1,
        config: cfg.clone(),
        stats: params.priors.iter().map(|p| p.stats.clone()).collect(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, t) in &tensors {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(MsgmConfig, MsgmParams)> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| MsgmError::Format(format!("{}: too short for magic", path.display())))?;
    if &magic != CKPT_MAGIC {
        return Err(MsgmError::Format(format!(
            "{}: bad magic {:?}, expected {CKPT_MAGIC:?}",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| MsgmError::Format(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;
    if header.version != 1 {
        return Err(MsgmError::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut map: HashMap<String, Tensor> = HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(MsgmError::Format(format!(
                "{}: tensor {} needs bytes {start}..{end} but payload has {}",
                path.display(),
                entry.name,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        map.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
    }

    let cfg = header.config;
    let mut params = MsgmParams::init(&cfg, None, 0)?;
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, t| match map.get(&name) {
        Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone().with_grad(),
        Some(loaded) => missing.push(format!(
            "{name}: shape {:?} in file, {:?} in model",
            loaded.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(MsgmError::Format(format!(
            "checkpoint does not match model: {}",
            missing.join("; ")
        )));
    }
    for (k, prior) in params.priors.iter_mut().enumerate() {
        if let Some(g) = map.get(&format!("init.scale{k}.global")) {
            prior.initial_global = g.clone();
        }
        if let Some(l) = map.get(&format!("init.scale{k}.local")) {
            prior.initial_local = l.clone();
        }
        if let Some(stats) = header.stats.get(k) {
            prior.stats = stats.clone();
        }
    }
    Ok((cfg, params))
}
