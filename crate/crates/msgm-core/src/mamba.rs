//! Residual selective state-space stack over token sequences.
//!
//! Each block pre-normalizes its input (RMSNorm), expands it to 2·d_inner,
//! runs the convolutional branch through a causal depthwise conv, SiLU and
//! the selective scan, gates with the SiLU'd residual branch, and projects
//! back to h. Blocks are wrapped in additive residuals and the stack ends
//! with a final RMSNorm.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, VarId};
use rand::Rng;

pub const RMSNORM_EPS: f64 = 1e-5;
pub const D_STATE_DEFAULT: usize = 16;
pub const CONV_WIDTH: usize = 4;

/// RMS normalization weights (initialized to ones).
#[derive(Clone, Debug)]
pub struct RmsNormLayer {
    pub w: Tensor,
}

impl RmsNormLayer {
    pub fn init(h: usize) -> Self {
        RmsNormLayer { w: Tensor::ones(vec![h]).with_grad() }
    }
}

/// All parameters of one Mamba block.
#[derive(Clone, Debug)]
pub struct MambaParams {
    pub h: usize,
    pub d_inner: usize,
    pub dt_rank: usize,
    pub d_state: usize,
    /// h → 2·d_inner.
    pub in_proj_w: Tensor,
    pub in_proj_b: Tensor,
    /// Depthwise conv kernels, d_inner×4.
    pub conv_k: Tensor,
    /// d_inner → dt_rank + 2·d_state.
    pub x_proj_w: Tensor,
    pub x_proj_b: Tensor,
    /// dt_rank → d_inner.
    pub dt_proj_w: Tensor,
    pub dt_proj_b: Tensor,
    /// d_inner×d_state; A = -exp(A_log).
    pub a_log: Tensor,
    /// d_inner skip gains, init ones.
    pub d: Tensor,
    /// d_inner → h.
    pub out_proj_w: Tensor,
    pub out_proj_b: Tensor,
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
        .with_grad()
}

impl MambaParams {
    /// expand = 2 (d_inner = 2h), dt_rank = ceil(h/16), d_state configurable.
    pub fn init(h: usize, d_state: usize, rng: &mut impl Rng) -> Self {
        let d_inner = 2 * h;
        let dt_rank = h.div_ceil(16);
        // A_log rows are ln(1..=d_state), the standard diagonal-SSM init.
        let a_log_row: Vec<f64> = (1..=d_state).map(|j| (j as f64).ln()).collect();
        let a_log = Tensor::new(
            vec![d_inner, d_state],
            (0..d_inner).flat_map(|_| a_log_row.iter().copied()).collect::<Vec<_>>(),
        )
        .with_grad();
        let conv_limit = (1.0 / CONV_WIDTH as f64).sqrt();
        // dt bias chosen so softplus(bias) lands log-uniformly in
        // [1e-3, 0.1]: the state transition starts with usable memory.
        let dt_proj_b = Tensor::new(
            vec![d_inner],
            (0..d_inner)
                .map(|_| {
                    let dt = (rng.gen_range(1e-3f64.ln()..0.1f64.ln())).exp();
                    (dt.exp() - 1.0).ln() // softplus inverse
                })
                .collect(),
        )
        .with_grad();
        MambaParams {
            h,
            d_inner,
            dt_rank,
            d_state,
            in_proj_w: xavier(h, 2 * d_inner, rng),
            in_proj_b: Tensor::zeros(vec![2 * d_inner]).with_grad(),
            conv_k: Tensor::new(
                vec![d_inner, CONV_WIDTH],
                (0..d_inner * CONV_WIDTH).map(|_| rng.gen_range(-conv_limit..conv_limit)).collect(),
            )
            .with_grad(),
            x_proj_w: xavier(d_inner, dt_rank + 2 * d_state, rng),
            x_proj_b: Tensor::zeros(vec![dt_rank + 2 * d_state]).with_grad(),
            dt_proj_w: xavier(dt_rank, d_inner, rng),
            dt_proj_b,
            a_log,
            d: Tensor::ones(vec![d_inner]).with_grad(),
            out_proj_w: xavier(d_inner, h, rng),
            out_proj_b: Tensor::zeros(vec![h]).with_grad(),
        }
    }
}

/// Tape-bound Mamba block parameters.
#[derive(Clone, Debug)]
pub struct BoundMamba {
    pub h: usize,
    pub d_inner: usize,
    pub dt_rank: usize,
    pub d_state: usize,
    pub in_proj_w: VarId,
    pub in_proj_b: VarId,
    pub conv_k: VarId,
    pub x_proj_w: VarId,
    pub x_proj_b: VarId,
    pub dt_proj_w: VarId,
    pub dt_proj_b: VarId,
    pub a_log: VarId,
    pub d: VarId,
    pub out_proj_w: VarId,
    pub out_proj_b: VarId,
}

impl MambaParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundMamba {
        BoundMamba {
            h: self.h,
            d_inner: self.d_inner,
            dt_rank: self.dt_rank,
            d_state: self.d_state,
            in_proj_w: tape.leaf(self.in_proj_w.clone()),
            in_proj_b: tape.leaf(self.in_proj_b.clone()),
            conv_k: tape.leaf(self.conv_k.clone()),
            x_proj_w: tape.leaf(self.x_proj_w.clone()),
            x_proj_b: tape.leaf(self.x_proj_b.clone()),
            dt_proj_w: tape.leaf(self.dt_proj_w.clone()),
            dt_proj_b: tape.leaf(self.dt_proj_b.clone()),
            a_log: tape.leaf(self.a_log.clone()),
            d: tape.leaf(self.d.clone()),
            out_proj_w: tape.leaf(self.out_proj_w.clone()),
            out_proj_b: tape.leaf(self.out_proj_b.clone()),
        }
    }
}

/// The full MSST stack: M blocks of (RMSNorm, MambaBlock) plus a final norm.
#[derive(Clone, Debug)]
pub struct MsstStack {
    pub blocks: Vec<(RmsNormLayer, MambaParams)>,
    pub final_norm: RmsNormLayer,
}

impl MsstStack {
    pub fn init(h: usize, d_state: usize, m: usize, rng: &mut impl Rng) -> Self {
        assert!(m >= 1, "stack needs at least one block");
        MsstStack {
            blocks: (0..m)
                .map(|_| (RmsNormLayer::init(h), MambaParams::init(h, d_state, rng)))
                .collect(),
            final_norm: RmsNormLayer::init(h),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundMsstStack {
    pub blocks: Vec<(VarId, BoundMamba)>,
    pub final_norm: VarId,
}

impl MsstStack {
    pub fn bind(&self, tape: &mut Tape) -> BoundMsstStack {
        BoundMsstStack {
            blocks: self
                .blocks
                .iter()
                .map(|(norm, mamba)| (tape.leaf(norm.w.clone()), mamba.bind(tape)))
                .collect(),
            final_norm: tape.leaf(self.final_norm.w.clone()),
        }
    }
}

/// RMSNorm on the tape: z · rsqrt(mean(z², over h) + ε) · w per position.
pub fn rmsnorm_t(tape: &mut Tape, z: VarId, w: VarId) -> Result<VarId> {
    tape.rmsnorm(z, w, RMSNORM_EPS)
}

/// Project activations to the SSM parameter triple (Δ, B, C).
///
/// Returns Δ strictly positive via Softplus(dt_proj(δ)).
pub fn ssm_params_t(
    tape: &mut Tape,
    u_act: VarId,
    p: &BoundMamba,
) -> Result<(VarId, VarId, VarId)> {
    let s = tape.value(u_act).shape().to_vec();
    let (b, n, di) = (s[0], s[1], s[2]);
    let flat = tape.reshape(u_act, vec![b * n, di])?;
    let proj = tape.matmul(flat, p.x_proj_w)?;
    let proj = tape.add_bias(proj, p.x_proj_b)?;
    let delta_raw = tape.slice_last(proj, 0, p.dt_rank)?;
    let b_part = tape.slice_last(proj, p.dt_rank, p.d_state)?;
    let c_part = tape.slice_last(proj, p.dt_rank + p.d_state, p.d_state)?;

    let dt = tape.matmul(delta_raw, p.dt_proj_w)?;
    let dt = tape.add_bias(dt, p.dt_proj_b)?;
    let dt = tape.softplus(dt);
    let delta = tape.reshape(dt, vec![b, n, di])?;
    let b_seq = tape.reshape(b_part, vec![b, n, p.d_state])?;
    let c_seq = tape.reshape(c_part, vec![b, n, p.d_state])?;
    Ok((delta, b_seq, c_seq))
}

/// One Mamba block: in-projection, conv branch with selective scan, SiLU
/// gate, out-projection.
pub fn mamba_block_t(tape: &mut Tape, z: VarId, p: &BoundMamba) -> Result<VarId> {
    let s = tape.value(z).shape().to_vec();
    let (b, n, h) = (s[0], s[1], s[2]);
    debug_assert_eq!(h, p.h);

    let flat = tape.reshape(z, vec![b * n, h])?;
    let proj = tape.matmul(flat, p.in_proj_w)?;
    let proj = tape.add_bias(proj, p.in_proj_b)?;
    let proj = tape.reshape(proj, vec![b, n, 2 * p.d_inner])?;
    let u = tape.slice_last(proj, 0, p.d_inner)?;
    let res = tape.slice_last(proj, p.d_inner, p.d_inner)?;

    // conv branch: (b, n, d_inner) -> (b, d_inner, n) -> conv -> back
    let u_t = tape.swap_last2(u)?;
    let conv = tape.depthwise_conv1d(u_t, p.conv_k)?;
    let conv = tape.swap_last2(conv)?;
    let u_act = tape.silu(conv);

    let (delta, b_seq, c_seq) = ssm_params_t(tape, u_act, p)?;
    let scan = tape.selective_scan(u_act, delta, p.a_log, b_seq, c_seq, p.d)?;

    let gate = tape.silu(res);
    let gated = tape.mul(scan, gate)?;

    let flat_out = tape.reshape(gated, vec![b * n, p.d_inner])?;
    let out = tape.matmul(flat_out, p.out_proj_w)?;
    let out = tape.add_bias(out, p.out_proj_b)?;
    tape.reshape(out, vec![b, n, h])
}

/// The residual stack: x_m = MambaBlock(RMSNorm(x_{m-1})) + x_{m-1} for each
/// block, then a final RMSNorm. Zeroing every block's parameters reduces the
/// stack to the final norm of its input.
pub fn msst_forward_t(tape: &mut Tape, x_in: VarId, stack: &BoundMsstStack) -> Result<VarId> {
    let mut x = x_in;
    for (norm_w, mamba) in &stack.blocks {
        let normed = rmsnorm_t(tape, x, *norm_w)?;
        let block_out = mamba_block_t(tape, normed, mamba)?;
        x = tape.add(block_out, x)?;
    }
    rmsnorm_t(tape, x, stack.final_norm)
}
