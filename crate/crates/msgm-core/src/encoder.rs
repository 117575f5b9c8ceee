//! Chebyshev graph encoders and token-embedding fusion.
//!
//! Four encoders (shallow/deep × global/local) run spectral graph
//! convolutions over the channel graph; a linear base embedding provides an
//! unfiltered view; the three are fused by an elementwise mean into per-scale
//! token embeddings.

use crate::error::{MsgmError, Result};
use crate::tensor::{Tape, Tensor, VarId};
use rand::Rng;

/// Power iteration runs at least this many steps and continues until the
/// Rayleigh quotient stops moving (so the rescaled spectrum stays inside
/// [-1, 1] even on graphs with a small spectral gap).
const POWER_ITERS_MIN: usize = 50;
const POWER_ITERS_MAX: usize = 5000;

/// Plain (untaped) power iteration to find how many steps the Rayleigh
/// quotient needs to converge for this matrix.
fn power_iteration_steps(lap: &[f64], c: usize) -> usize {
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + (0.37 * (i as f64 + 1.0)).sin()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut prev = f64::INFINITY;
    for step in 1..=POWER_ITERS_MAX {
        let mut w = vec![0.0; c];
        for i in 0..c {
            for j in 0..c {
                w[i] += lap[i * c + j] * v[j];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            return step.max(POWER_ITERS_MIN);
        }
        w.iter_mut().for_each(|x| *x /= norm);
        let mut rayleigh = 0.0;
        for i in 0..c {
            for j in 0..c {
                rayleigh += w[i] * lap[i * c + j] * w[j];
            }
        }
        if step >= POWER_ITERS_MIN && (rayleigh - prev).abs() <= 1e-14 * rayleigh.abs().max(1.0) {
            return step;
        }
        prev = rayleigh;
        v = w;
    }
    POWER_ITERS_MAX
}

/// One Chebyshev convolution layer: per-hop coefficient matrices plus bias.
#[derive(Clone, Debug)]
pub struct ChebLayer {
    /// θ⁰..θ^{I-1}, each f_in×f_out.
    pub thetas: Vec<Tensor>,
    /// f_out bias.
    pub bias: Tensor,
}

/// A stack of Chebyshev layers; depth 1 = shallow, 2 = deep.
#[derive(Clone, Debug)]
pub struct ChebEncoder {
    pub layers: Vec<ChebLayer>,
    pub order: usize,
}

impl ChebEncoder {
    /// Xavier-uniform initialized encoder mapping f_in -> h per node, with
    /// `depth` stacked layers (later layers are h -> h).
    pub fn init(order: usize, depth: usize, f_in: usize, h: usize, rng: &mut impl Rng) -> Self {
        assert!(order >= 1 && depth >= 1);
        let mut layers = Vec::with_capacity(depth);
        let mut din = f_in;
        for _ in 0..depth {
            let limit = (6.0 / (din + h) as f64).sqrt();
            let thetas = (0..order)
                .map(|_| {
                    Tensor::new(
                        vec![din, h],
                        (0..din * h).map(|_| rng.gen_range(-limit..limit)).collect(),
                    )
                    .with_grad()
                })
                .collect();
            layers.push(ChebLayer { thetas, bias: Tensor::zeros(vec![h]).with_grad() });
            din = h;
        }
        ChebEncoder { layers, order }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Tape-bound view of an encoder: the parameter VarIds for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundChebEncoder {
    pub layers: Vec<(Vec<VarId>, VarId)>,
    pub order: usize,
}

impl ChebEncoder {
    pub fn bind(&self, tape: &mut Tape) -> BoundChebEncoder {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let thetas = l.thetas.iter().map(|t| tape.leaf(t.clone())).collect();
                let bias = tape.leaf(l.bias.clone());
                (thetas, bias)
            })
            .collect();
        BoundChebEncoder { layers, order: self.order }
    }
}

/// Rescaled graph Laplacian on the tape:
/// L = I - D^{-1/2} A D^{-1/2} (isolated nodes keep D_ii = 1), then
/// L̃ = 2L/λ_max - I with λ_max from power iteration (at least 50 steps, run
/// to Rayleigh convergence). An all-zero adjacency (or a degenerate
/// estimate) falls back to λ_max = 2.
///
/// The whole computation, power iteration included, is composed from tape
/// primitives, so gradients flow into the adjacency exactly as the value is
/// computed.
pub fn scaled_laplacian_t(tape: &mut Tape, a: VarId) -> Result<VarId> {
    let shape = tape.value(a).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(MsgmError::contract(
            "scaled_laplacian",
            format!("adjacency must be square, got {shape:?}"),
        ));
    }
    let c = shape[0];
    {
        let ad = tape.value(a).data();
        for i in 0..c {
            for j in i + 1..c {
                if (ad[i * c + j] - ad[j * c + i]).abs() > 1e-9 {
                    return Err(MsgmError::contract(
                        "scaled_laplacian",
                        format!(
                            "adjacency is asymmetric at ({i},{j}): {} vs {}",
                            ad[i * c + j],
                            ad[j * c + i]
                        ),
                    ));
                }
            }
        }
    }
    let all_zero = tape.value(a).data().iter().all(|&v| v == 0.0);

    let deg = tape.row_sums(a)?;
    let r = tape.inv_sqrt_degree(deg);
    let s = tape.scale_rows_cols(a, r)?;
    let eye = tape.leaf(Tensor::eye(c));
    let lap = tape.sub(eye, s)?;

    let lambda = if all_zero {
        None
    } else {
        let steps = power_iteration_steps(tape.value(lap).data(), c);
        // deterministic generic start vector
        let start: Vec<f64> = (0..c).map(|i| 1.0 + (0.37 * (i as f64 + 1.0)).sin()).collect();
        let mut v = tape.leaf(Tensor::new(vec![c, 1], start));
        v = tape.normalize_vec(v);
        for _ in 0..steps {
            let w = tape.matmul(lap, v)?;
            v = tape.normalize_vec(w);
        }
        let lv = tape.matmul(lap, v)?;
        let vt = tape.reshape(v, vec![1, c])?;
        let rayleigh = tape.matmul(vt, lv)?;
        let est = tape.value(rayleigh).item();
        if est.is_finite() && est > 1e-6 {
            Some(rayleigh)
        } else {
            None
        }
    };

    let scaled = match lambda {
        Some(lam) => {
            let s2 = tape.scalar_recip(lam, 2.0)?;
            tape.scale_by_var(lap, s2)?
        }
        None => tape.scale(lap, 1.0), // fallback λ_max = 2: 2L/2 = L
    };
    tape.sub(scaled, eye)
}

/// Convenience wrapper evaluating the rescaled Laplacian outside any model.
pub fn scaled_laplacian(a: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let out = scaled_laplacian_t(&mut tape, av)?;
    Ok(tape.value(out).clone())
}

/// Map node features through one hop-coefficient matrix: (m,c,f_in)·θ.
fn feat_map(tape: &mut Tape, x: VarId, theta: VarId) -> Result<VarId> {
    let s = tape.value(x).shape().to_vec();
    let (m, c, fin) = (s[0], s[1], s[2]);
    let fout = tape.value(theta).shape()[1];
    let flat = tape.reshape(x, vec![m * c, fin])?;
    let mm = tape.matmul(flat, theta)?;
    tape.reshape(mm, vec![m, c, fout])
}

/// Chebyshev convolution of batched node features against a rescaled
/// Laplacian: ReLU(Σ_i T_i(L̃)·F·θ^i + B) per layer, with the recurrence
/// T₀ = I, T₁ = L̃, T_i = 2·L̃·T_{i-1} - T_{i-2} applied on the feature side.
pub fn cheb_forward_t(
    tape: &mut Tape,
    features: VarId,
    enc: &BoundChebEncoder,
    lap: VarId,
) -> Result<VarId> {
    let mut x = features;
    for (thetas, bias) in &enc.layers {
        let mut acc = feat_map(tape, x, thetas[0])?;
        if enc.order >= 2 {
            let mut prev2 = x; // T₀ F
            let mut prev1 = tape.graph_mix(lap, x)?; // T₁ F
            let fm = feat_map(tape, prev1, thetas[1])?;
            acc = tape.add(acc, fm)?;
            for theta in thetas.iter().skip(2) {
                let mixed = tape.graph_mix(lap, prev1)?;
                let doubled = tape.scale(mixed, 2.0);
                let cur = tape.sub(doubled, prev2)?;
                let fm = feat_map(tape, cur, *theta)?;
                acc = tape.add(acc, fm)?;
                prev2 = prev1;
                prev1 = cur;
            }
        }
        let biased = tape.add_bias(acc, *bias)?;
        x = tape.relu(biased);
    }
    Ok(x)
}

/// Linear base embedding of the flattened feature tensor.
#[derive(Clone, Debug)]
pub struct BaseEmbed {
    /// (c·f)×h weight.
    pub w: Tensor,
    /// h bias.
    pub b: Tensor,
}

impl BaseEmbed {
    pub fn init(c: usize, f: usize, h: usize, rng: &mut impl Rng) -> Self {
        let rows = c * f;
        let limit = (6.0 / (rows + h) as f64).sqrt();
        BaseEmbed {
            w: Tensor::new(vec![rows, h], (0..rows * h).map(|_| rng.gen_range(-limit..limit)).collect())
                .with_grad(),
            b: Tensor::zeros(vec![h]).with_grad(),
        }
    }
}

/// Flatten (m, c, f) node features to (m, c·f) and apply the affine map.
pub fn base_embed_t(tape: &mut Tape, features: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let s = tape.value(features).shape().to_vec();
    let (m, c, f) = (s[0], s[1], s[2]);
    let flat = tape.reshape(features, vec![m, c * f])?;
    let mm = tape.matmul(flat, w)?;
    tape.add_bias(mm, b)
}

/// Elementwise mean of the base, shallow and deep embeddings.
pub fn fuse_tokens_t(tape: &mut Tape, base: VarId, shallow: VarId, deep: VarId) -> Result<VarId> {
    if tape.value(base).shape() != tape.value(shallow).shape()
        || tape.value(base).shape() != tape.value(deep).shape()
    {
        return Err(MsgmError::contract(
            "fuse_tokens",
            format!(
                "shape mismatch: {:?} vs {:?} vs {:?}",
                tape.value(base).shape(),
                tape.value(shallow).shape(),
                tape.value(deep).shape()
            ),
        ));
    }
    let s1 = tape.add(base, shallow)?;
    let s2 = tape.add(s1, deep)?;
    Ok(tape.scale(s2, 1.0 / 3.0))
}

/// Reduce per-node encoder output (m, c, h) to a token embedding (m, h) by
/// node-mean pooling.
pub fn node_mean_t(tape: &mut Tape, x: VarId) -> Result<VarId> {
    tape.mean_axis1(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Jacobi eigenvalue iteration for symmetric matrices (test oracle).
    fn symmetric_eigenvalues(m: &Tensor) -> Vec<f64> {
        let n = m.shape()[0];
        let mut a: Vec<f64> = m.data().to_vec();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-18 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = 0.5 * (aqq - app) / apq;
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let cos = 1.0 / (t * t + 1.0).sqrt();
                    let sin = t * cos;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = cos * akp - sin * akq;
                        a[k * n + q] = sin * akp + cos * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = cos * apk - sin * aqk;
                        a[q * n + k] = sin * apk + cos * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }

    #[test]
    fn zero_adjacency_gives_zero_rescaled_laplacian() {
        let lt = scaled_laplacian(&Tensor::zeros(vec![3, 3])).unwrap();
        assert!(lt.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn two_node_graph_matches_hand_eigendecomposition() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let lt = scaled_laplacian(&a).unwrap();
        let expect = [0.0, -1.0, -1.0, 0.0];
        for (got, want) in lt.data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.0]);
        assert!(scaled_laplacian(&a).is_err());
    }

    #[test]
    fn rescaled_spectrum_lies_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let c = rng.gen_range(3..9);
            let mut a = Tensor::zeros(vec![c, c]);
            for i in 0..c {
                for j in i + 1..c {
                    if rng.gen_bool(0.6) {
                        let w = rng.gen_range(0.0..1.0);
                        a.set(&[i, j], w);
                        a.set(&[j, i], w);
                    }
                }
            }
            let lt = scaled_laplacian(&a).unwrap();
            for ev in symmetric_eigenvalues(&lt) {
                assert!(
                    (-1.0 - 1e-6..=1.0 + 1e-6).contains(&ev),
                    "eigenvalue {ev} outside [-1, 1]"
                );
            }
        }
    }

    #[test]
    fn order_one_output_ignores_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = ChebEncoder::init(1, 1, 4, 3, &mut rng);
        let feats = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let run = |adj: Tensor| {
            let mut tape = Tape::new();
            let f = tape.leaf(feats.clone());
            let a = tape.leaf(adj);
            let lap = scaled_laplacian_t(&mut tape, a).unwrap();
            let bound = enc.bind(&mut tape);
            let out = cheb_forward_t(&mut tape, f, &bound, lap).unwrap();
            tape.value(out).clone()
        };

        let mut adj = Tensor::zeros(vec![3, 3]);
        adj.set(&[0, 1], 0.8);
        adj.set(&[1, 0], 0.8);
        let with_graph = run(adj);
        let without = run(Tensor::zeros(vec![3, 3]));
        assert!(with_graph.max_abs_diff(&without) < 1e-12);
    }

    #[test]
    fn second_hop_follows_chebyshev_closed_form() {
        // With L̃ = 0.5·I, T₂ = 2·(0.5)²·I - I = -0.5·I. Routing only θ² (set
        // to the identity) through a constant input of -1 gives ReLU(0.5).
        let c = 3;
        let f = 2;
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::new(vec![1, c, f], vec![-1.0; c * f]));
        let lap = tape.leaf({
            let mut l = Tensor::zeros(vec![c, c]);
            for i in 0..c {
                l.set(&[i, i], 0.5);
            }
            l
        });
        let enc = ChebEncoder {
            order: 3,
            layers: vec![ChebLayer {
                thetas: vec![
                    Tensor::zeros(vec![f, f]),
                    Tensor::zeros(vec![f, f]),
                    Tensor::eye(f),
                ],
                bias: Tensor::zeros(vec![f]),
            }],
        };
        let bound = enc.bind(&mut tape);
        let out = cheb_forward_t(&mut tape, feats, &bound, lap).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 0.5).abs() < 1e-12, "expected ReLU(-0.5 · -1) = 0.5, got {v}");
        }
    }

    #[test]
    fn recurrence_matches_materialized_polynomials() {
        // Oracle: build T_i(L̃) explicitly as dense matrices and evaluate
        // ReLU(Σ T_i F θ_i + B) directly.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..10 {
            let c = rng.gen_range(2..8);
            let fin = rng.gen_range(1..5);
            let fout = rng.gen_range(1..5);
            let order = rng.gen_range(1..5);
            let m = rng.gen_range(1..4);

            let mut adj = Tensor::zeros(vec![c, c]);
            for i in 0..c {
                for j in i + 1..c {
                    if rng.gen_bool(0.5) {
                        let w = rng.gen_range(0.0..1.0);
                        adj.set(&[i, j], w);
                        adj.set(&[j, i], w);
                    }
                }
            }
            let feats = Tensor::new(
                vec![m, c, fin],
                (0..m * c * fin).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let enc = ChebEncoder::init(order, 1, fin, fout, &mut rng);

            let mut tape = Tape::new();
            let f = tape.leaf(feats.clone());
            let a = tape.leaf(adj.clone());
            let lap = scaled_laplacian_t(&mut tape, a).unwrap();
            let lt = tape.value(lap).clone();
            let bound = enc.bind(&mut tape);
            let out = cheb_forward_t(&mut tape, f, &bound, lap).unwrap();

            // materialize T_i
            let eye = Tensor::eye(c);
            let mut polys: Vec<Vec<f64>> = vec![eye.data().to_vec(), lt.data().to_vec()];
            for i in 2..order {
                let prod = crate::tensor::matmul_raw(lt.data(), &polys[i - 1], c, c, c);
                let cur: Vec<f64> = prod
                    .iter()
                    .zip(polys[i - 2].iter())
                    .map(|(p, q)| 2.0 * p - q)
                    .collect();
                polys.push(cur);
            }
            let mut expect = vec![0.0; m * c * fout];
            for s in 0..m {
                for (i, poly) in polys.iter().take(order).enumerate() {
                    // T_i · F_s
                    let fs = &feats.data()[s * c * fin..(s + 1) * c * fin];
                    let tf = crate::tensor::matmul_raw(poly, fs, c, c, fin);
                    let tf_theta =
                        crate::tensor::matmul_raw(&tf, enc.layers[0].thetas[i].data(), c, fin, fout);
                    for (e, v) in expect[s * c * fout..(s + 1) * c * fout].iter_mut().zip(tf_theta) {
                        *e += v;
                    }
                }
            }
            for (idx, e) in expect.iter_mut().enumerate() {
                *e = (*e + enc.layers[0].bias.data()[idx % fout]).max(0.0);
            }
            let diff = tape
                .value(out)
                .data()
                .iter()
                .zip(expect.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "cheb mismatch: {diff}");
        }
    }

    #[test]
    fn base_embed_cases() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Tensor::ones(vec![4, 3, 2]));
        let w0 = tape.leaf(Tensor::zeros(vec![6, 5]));
        let b0 = tape.leaf(Tensor::zeros(vec![5]));
        let out = base_embed_t(&mut tape, feats, w0, b0).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 5]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // selector: row r of W copies flattened feature r
        let mut sel = Tensor::zeros(vec![6, 6]);
        for i in 0..6 {
            sel.set(&[i, i], 1.0);
        }
        let feats2 = Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let fv = tape.leaf(feats2.clone());
        let wv = tape.leaf(sel);
        let bv = tape.leaf(Tensor::zeros(vec![6]));
        let out2 = base_embed_t(&mut tape, fv, wv, bv).unwrap();
        assert_eq!(tape.value(out2).data(), feats2.data());
    }

    #[test]
    fn base_embed_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let be = BaseEmbed::init(4, 7, 32, &mut rng);
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![18, 4, 7]));
        let w = tape.leaf(be.w.clone());
        let b = tape.leaf(be.b.clone());
        let out = base_embed_t(&mut tape, f, w, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[18, 32]);
    }

    #[test]
    fn fuse_tokens_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let y = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let z = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let fuse = |a: &Tensor, b: &Tensor, c: &Tensor| {
            let mut tape = Tape::new();
            let (av, bv, cv) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(c.clone()));
            let out = fuse_tokens_t(&mut tape, av, bv, cv).unwrap();
            tape.value(out).clone()
        };

        // idempotent mean
        assert!(fuse(&x, &x, &x).max_abs_diff(&x) < 1e-12);

        // x, -x, 0 -> 0
        let negx = Tensor::new(vec![3, 4], x.data().iter().map(|v| -v).collect());
        let zero = Tensor::zeros(vec![3, 4]);
        assert!(fuse(&x, &negx, &zero).data().iter().all(|&v| v.abs() < 1e-12));

        // exact elementwise mean (same operation order as the implementation)
        let fused = fuse(&x, &y, &z);
        for i in 0..12 {
            let expect = ((x.data()[i] + y.data()[i]) + z.data()[i]) * (1.0 / 3.0);
            assert_eq!(fused.data()[i], expect);
        }

        // permutation invariance
        assert!(fuse(&x, &y, &z).max_abs_diff(&fuse(&z, &x, &y)) < 1e-12);

        // shape mismatch is an error
        let mut tape = Tape::new();
        let av = tape.leaf(x.clone());
        let bv = tape.leaf(Tensor::zeros(vec![2, 2]));
        let cv = tape.leaf(z.clone());
        assert!(fuse_tokens_t(&mut tape, av, bv, cv).is_err());
    }

    #[test]
    fn zero_adjacency_makes_streams_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (m, c, f, h) = (4, 5, 7, 6);
        let shallow = ChebEncoder::init(3, 1, f, h, &mut rng);
        let deep = ChebEncoder::init(3, 2, f, h, &mut rng);
        let feats = Tensor::new(
            vec![m, c, f],
            (0..m * c * f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );

        let run = || {
            let mut tape = Tape::new();
            let fv = tape.leaf(feats.clone());
            let a = tape.leaf(Tensor::zeros(vec![c, c]));
            let lap = scaled_laplacian_t(&mut tape, a).unwrap();
            let sb = shallow.bind(&mut tape);
            let db = deep.bind(&mut tape);
            let s = cheb_forward_t(&mut tape, fv, &sb, lap).unwrap();
            let d = cheb_forward_t(&mut tape, fv, &db, lap).unwrap();
            let sm = node_mean_t(&mut tape, s).unwrap();
            let dm = node_mean_t(&mut tape, d).unwrap();
            (tape.value(sm).clone(), tape.value(dm).clone())
        };
        // identical encoder parameters => identical streams with zero graphs
        let (g_s, g_d) = run();
        let (l_s, l_d) = run();
        assert!(g_s.max_abs_diff(&l_s) < 1e-12);
        assert!(g_d.max_abs_diff(&l_d) < 1e-12);
    }
}
