//! Prior-initialized dual spatial graphs.
//!
//! At each temporal scale the batch-mean feature tensor is flattened, passed
//! through a learnable mix (Z' = ZW + V), and turned into a global adjacency
//! by gating Gaussian kernel weights with a Pearson-correlation threshold
//! (75th percentile) and a Manhattan-distance threshold (25th percentile).
//! The local adjacency restricts the global one to same-region channel
//! pairs. Both are duplicated, stacked to 2×c×c, and registered as trainable
//! parameters; the local mask is re-applied on every forward pass.

use crate::error::{MsgmError, Result};
use crate::signal::{FeatureTensor, NUM_BANDS};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Assignment of every channel to exactly one scalp region.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RegionMap {
    pub name: String,
    pub num_regions: usize,
    #[serde(default)]
    pub region_names: Vec<String>,
    pub channels: Vec<ChannelRegion>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelRegion {
    pub name: String,
    pub region: usize,
}

/// Shipped default region maps (editable JSON under assets/).
pub const REGIONS_62CH_7: &str = include_str!("../assets/regions_62ch_7.json");
pub const REGIONS_62CH_10: &str = include_str!("../assets/regions_62ch_10.json");
pub const REGIONS_62CH_17: &str = include_str!("../assets/regions_62ch_17.json");
pub const REGIONS_32CH_7: &str = include_str!("../assets/regions_32ch_7.json");

impl RegionMap {
    pub fn from_json(json: &str) -> Result<Self> {
        let map: RegionMap = serde_json::from_str(json)?;
        map.validate()?;
        Ok(map)
    }

    /// Look up one of the shipped defaults by id, e.g. "62ch-7region".
    pub fn builtin(id: &str) -> Result<Self> {
        let json = match id {
            "62ch-7region" => REGIONS_62CH_7,
            "62ch-10region" => REGIONS_62CH_10,
            "62ch-17region" => REGIONS_62CH_17,
            "32ch-7region" => REGIONS_32CH_7,
            other => {
                return Err(MsgmError::Config(format!(
                    "unknown region map '{other}'; shipped maps: 62ch-7region, 62ch-10region, 62ch-17region, 32ch-7region"
                )))
            }
        };
        Self::from_json(json)
    }

    /// Build a map directly from region ids (tests and synthetic data).
    pub fn from_ids(name: &str, channel_names: &[String], region_ids: &[usize]) -> Result<Self> {
        let num_regions = region_ids.iter().max().map_or(0, |m| m + 1);
        let map = RegionMap {
            name: name.to_string(),
            num_regions,
            region_names: Vec::new(),
            channels: channel_names
                .iter()
                .zip(region_ids.iter())
                .map(|(n, &r)| ChannelRegion { name: n.clone(), region: r })
                .collect(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(MsgmError::Config("region map has no channels".into()));
        }
        for ch in &self.channels {
            if ch.region >= self.num_regions {
                return Err(MsgmError::Config(format!(
                    "channel {} assigned region {} but map declares {} regions",
                    ch.name, ch.region, self.num_regions
                )));
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn region_ids(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.region).collect()
    }

    /// Restrict the map to its first `c` channels (synthetic subsets).
    pub fn truncated(&self, c: usize) -> Result<Self> {
        if c == 0 || c > self.channels.len() {
            return Err(MsgmError::Config(format!(
                "cannot truncate {}-channel map to {c} channels",
                self.channels.len()
            )));
        }
        let mut map = self.clone();
        map.channels.truncate(c);
        map.name = format!("{}-first{c}", self.name);
        Ok(map)
    }

    /// Boolean c×c mask, true where both channels share a region.
    pub fn same_region_mask(&self) -> Vec<bool> {
        let ids = self.region_ids();
        let c = ids.len();
        let mut mask = vec![false; c * c];
        for i in 0..c {
            for j in 0..c {
                mask[i * c + j] = ids[i] == ids[j];
            }
        }
        mask
    }
}

/// Learnable mixing of the flattened batch-mean features (Z' = ZW + V).
#[derive(Clone, Debug)]
pub struct MixParams {
    /// (f·n_k)×n_k, Xavier-uniform initialized.
    pub w: Tensor,
    /// c×n_k bias, zero initialized.
    pub v: Tensor,
}

impl MixParams {
    pub fn init(channels: usize, n_k: usize, rng: &mut impl Rng) -> Self {
        let rows = NUM_BANDS * n_k;
        let limit = (6.0 / (rows + n_k) as f64).sqrt();
        let w = Tensor::new(
            vec![rows, n_k],
            (0..rows * n_k).map(|_| rng.gen_range(-limit..limit)).collect(),
        )
        .with_grad();
        let v = Tensor::zeros(vec![channels, n_k]).with_grad();
        MixParams { w, v }
    }
}

/// Initialization statistics recorded alongside each adjacency.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdjacencyStats {
    /// Gaussian bandwidth: (mean + std)/2 of pairwise Euclidean distances.
    pub sigma: f64,
    /// 75th percentile of off-diagonal Pearson correlations.
    pub kappa_theta: f64,
    /// 25th percentile of off-diagonal Manhattan distances.
    pub d_theta: f64,
}

/// Per-scale stacked global/local adjacency priors.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    pub scale: usize,
    /// 2×c×c trainable stack of the global adjacency.
    pub global: Tensor,
    /// 2×c×c trainable stack of the region-masked adjacency.
    pub local: Tensor,
    /// Same-region mask, true where local entries may be nonzero.
    pub local_mask: Vec<bool>,
    pub stats: AdjacencyStats,
    /// Frozen copies of the matrices as initialized (for connectivity export).
    pub initial_global: Tensor,
    pub initial_local: Tensor,
}

/// Mean over the batch dimension, flatten to c×(f·n_k) with the segment
/// index varying slower than the band index, then apply Z' = ZW + V.
pub fn batch_mean_mix(feat: &FeatureTensor, mix: &MixParams) -> Result<Tensor> {
    if feat.batch == 0 {
        return Err(MsgmError::Data("cannot mix an empty feature tensor".into()));
    }
    let (b, n_k, c) = (feat.batch, feat.segments, feat.channels);
    if mix.w.shape() != [NUM_BANDS * n_k, n_k] {
        return Err(MsgmError::Config(format!(
            "mix W shape {:?} does not match scale with n_k = {n_k}",
            mix.w.shape()
        )));
    }
    if mix.v.shape() != [c, n_k] {
        return Err(MsgmError::Config(format!(
            "mix V shape {:?} does not match {c} channels x n_k = {n_k}",
            mix.v.shape()
        )));
    }
    // batch mean, reshaped on the fly: Z[ch][seg*f + band]
    let cols = NUM_BANDS * n_k;
    let mut z = vec![0.0; c * cols];
    let vals = feat.values.data();
    for bi in 0..b {
        for seg in 0..n_k {
            for ch in 0..c {
                for band in 0..NUM_BANDS {
                    let src = ((bi * n_k + seg) * c + ch) * NUM_BANDS + band;
                    z[ch * cols + seg * NUM_BANDS + band] += vals[src];
                }
            }
        }
    }
    for v in z.iter_mut() {
        *v /= b as f64;
    }
    // Z' = ZW + V
    let zw = crate::tensor::matmul_raw(&z, mix.w.data(), c, cols, n_k);
    let out: Vec<f64> = zw.iter().zip(mix.v.data()).map(|(a, b)| a + b).collect();
    Ok(Tensor::new(vec![c, n_k], out))
}

/// Linear-interpolation percentile of an unsorted sample (NumPy "linear").
pub fn percentile_linear(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Build the gated Gaussian global adjacency from mixed node features.
///
/// Per unordered pair: Pearson correlation of standardized rows (std guard
/// +1e-6), Manhattan distance, Gaussian weight exp(-||u_i-u_j||² / 2σ²) with
/// σ = (μ + σ)/2 of pairwise Euclidean distances. A pair survives iff
/// correlation ≥ its 75th percentile and Manhattan distance ≤ its 25th
/// percentile. Diagonal forced to zero; symmetric by construction.
pub fn build_global_adjacency(z: &Tensor) -> Result<(Tensor, AdjacencyStats)> {
    let shape = z.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(MsgmError::Config(format!(
            "adjacency construction needs a c x n matrix with c >= 2, got {shape:?}"
        )));
    }
    let (c, n) = (shape[0], shape[1]);
    let rows: Vec<&[f64]> = (0..c).map(|i| &z.data()[i * n..(i + 1) * n]).collect();

    // standardized rows for Pearson
    let standardized: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt() + 1e-6;
            row.iter().map(|v| (v - mean) / std).collect()
        })
        .collect();

    let n_pairs = c * (c - 1) / 2;
    let mut kappas = Vec::with_capacity(n_pairs);
    let mut manhattans = Vec::with_capacity(n_pairs);
    let mut euclid_sq = Vec::with_capacity(n_pairs);
    for i in 0..c {
        for j in i + 1..c {
            let kappa = standardized[i]
                .iter()
                .zip(standardized[j].iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64;
            let manhattan: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
            let esq: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
            kappas.push(kappa);
            manhattans.push(manhattan);
            euclid_sq.push(esq);
        }
    }

    let kappa_theta = percentile_linear(&kappas, 0.75);
    let d_theta = percentile_linear(&manhattans, 0.25);
    let dists: Vec<f64> = euclid_sq.iter().map(|v| v.sqrt()).collect();
    let mu_d = dists.iter().sum::<f64>() / dists.len() as f64;
    let var_d = dists.iter().map(|v| (v - mu_d).powi(2)).sum::<f64>() / dists.len() as f64;
    let sigma = ((mu_d + var_d.sqrt()) / 2.0).max(1e-12);

    let mut w = vec![0.0; c * c];
    let mut pair = 0;
    for i in 0..c {
        for j in i + 1..c {
            if kappas[pair] >= kappa_theta && manhattans[pair] <= d_theta {
                let weight = (-euclid_sq[pair] / (2.0 * sigma * sigma)).exp();
                w[i * c + j] = weight;
                w[j * c + i] = weight;
            }
            pair += 1;
        }
    }
    Ok((Tensor::new(vec![c, c], w), AdjacencyStats { sigma, kappa_theta, d_theta }))
}

/// Mask the global adjacency to same-region pairs.
pub fn build_local_adjacency(global: &Tensor, regions: &RegionMap) -> Result<Tensor> {
    let c = global.shape()[0];
    if regions.num_channels() != c {
        return Err(MsgmError::Config(format!(
            "region map '{}' covers {} channels but adjacency is {c}x{c}",
            regions.name,
            regions.num_channels()
        )));
    }
    let mask = regions.same_region_mask();
    let data: Vec<f64> = global
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| if mask[idx] { v } else { 0.0 })
        .collect();
    Ok(Tensor::new(vec![c, c], data))
}

/// Duplicate both adjacencies along a new leading dimension and register the
/// result as the scale's trainable prior.
pub fn stack_priors(
    scale: usize,
    global: Tensor,
    local: Tensor,
    regions: &RegionMap,
    stats: AdjacencyStats,
) -> Result<SpatialPrior> {
    let c = global.shape()[0];
    if global.shape() != [c, c] || local.shape() != [c, c] {
        return Err(MsgmError::shape(
            "stack_priors",
            format!("need two {c}x{c} matrices, got {:?} and {:?}", global.shape(), local.shape()),
        ));
    }
    let stack = |m: &Tensor| {
        Tensor::new(vec![2, c, c], [m.data(), m.data()].concat()).with_grad()
    };
    Ok(SpatialPrior {
        scale,
        global: stack(&global),
        local: stack(&local),
        local_mask: regions.same_region_mask(),
        stats,
        initial_global: global,
        initial_local: local,
    })
}

impl SpatialPrior {
    /// Re-apply the same-region mask to the local stack, restoring exact
    /// zeros on cross-region entries after optimizer updates.
    pub fn reapply_local_mask(&mut self) {
        let c2 = self.local_mask.len();
        let data = self.local.data_mut();
        for copy in 0..2 {
            for idx in 0..c2 {
                if !self.local_mask[idx] {
                    data[copy * c2 + idx] = 0.0;
                }
            }
        }
    }
}
