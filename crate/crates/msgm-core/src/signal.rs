//! Two-level temporal segmentation and relative power spectral density
//! features.
//!
//! A recording is first cut into long overlapping windows (length `l`, hop
//! `s`), then each window is re-cut by `k` distinct sliding windows into
//! sub-segments. Every sub-segment yields a c×7 matrix of per-band relative
//! power via Welch's method, and the sub-segments of one scale stack into a
//! feature tensor of shape b×n_k×c×7.

use crate::error::{MsgmError, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

/// The seven analysis bands in Hz: [lo, hi) half-open intervals.
/// Gaps (0-1, 28-30, >45) are intentionally unassigned.
pub const BANDS: [(f64, f64); 7] = [
    (1.0, 4.0),   // delta
    (4.0, 8.0),   // theta
    (8.0, 12.0),  // alpha
    (12.0, 16.0), // low beta
    (16.0, 20.0), // beta
    (20.0, 28.0), // high beta
    (30.0, 45.0), // gamma
];

pub const BAND_NAMES: [&str; 7] =
    ["delta", "theta", "alpha", "low_beta", "beta", "high_beta", "gamma"];

pub const NUM_BANDS: usize = 7;

/// Index of the alpha band within [`BANDS`].
pub const ALPHA: usize = 2;

/// A multichannel recording with identity metadata.
#[derive(Clone, Debug)]
pub struct Recording {
    /// Channel-major samples, shape c×L.
    pub data: Vec<f64>,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: usize,
}

impl Recording {
    pub fn new(
        data: Vec<f64>,
        channels: usize,
        fs: f64,
        subject_id: u32,
        trial_id: u32,
        label: usize,
    ) -> Result<Self> {
        if channels == 0 || data.len() % channels != 0 {
            return Err(MsgmError::Data(format!(
                "data length {} is not divisible by {channels} channels",
                data.len()
            )));
        }
        if fs <= 0.0 {
            return Err(MsgmError::Data(format!("sampling rate must be positive, got {fs}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MsgmError::Data("recording contains non-finite samples".into()));
        }
        let samples = data.len() / channels;
        Ok(Recording { data, channels, samples, fs, subject_id, trial_id, label })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }
}

/// First-level window plus the set of second-level windows, all in seconds.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScaleSpec {
    /// First-level window length (seconds).
    pub first_len: f64,
    /// First-level hop (seconds).
    pub first_hop: f64,
    /// Second-level (length, hop) pairs, one per scale.
    pub windows: Vec<(f64, f64)>,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        // 20 s / 4 s first level; short, medium and long granularity inside.
        ScaleSpec {
            first_len: 20.0,
            first_hop: 4.0,
            windows: vec![(4.0, 2.0), (8.0, 4.0), (12.0, 6.0)],
        }
    }
}

impl ScaleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.first_len <= 0.0 || self.first_hop <= 0.0 {
            return Err(MsgmError::Config("first-level window and hop must be positive".into()));
        }
        if self.windows.is_empty() {
            return Err(MsgmError::Config("at least one second-level window is required".into()));
        }
        for &(len, hop) in &self.windows {
            if len <= 0.0 || hop <= 0.0 || hop > len {
                return Err(MsgmError::Config(format!(
                    "invalid second-level window ({len} s, {hop} s): need 0 < hop <= len"
                )));
            }
            if len > self.first_len {
                return Err(MsgmError::Config(format!(
                    "second-level window {len} s exceeds first-level window {} s",
                    self.first_len
                )));
            }
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.windows.len()
    }

    /// Sub-segments per first-level segment for scale k.
    pub fn segments_per_window(&self, k: usize) -> usize {
        let (len, hop) = self.windows[k];
        window_count_secs(self.first_len, len, hop)
    }
}

fn window_count_secs(total: f64, len: f64, hop: f64) -> usize {
    // floor((total - len)/hop) + 1, tolerant of f64 representation error
    (((total - len) / hop) + 1e-9).floor() as usize + 1
}

/// One first-level segment: c channels × (l·fs) samples, with its label.
#[derive(Clone, Debug)]
pub struct Segment {
    pub data: Vec<f64>,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: usize,
}

impl Segment {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }
}

/// Per-scale feature tensor of shape b×n_k×c×7 with rPSD entries.
#[derive(Clone, Debug)]
pub struct FeatureTensor {
    pub scale: usize,
    /// b×n_k×c×7, row-major.
    pub values: Tensor,
    pub batch: usize,
    pub segments: usize,
    pub channels: usize,
}

impl FeatureTensor {
    pub fn at(&self, b: usize, seg: usize, ch: usize, band: usize) -> f64 {
        self.values.at(&[b, seg, ch, band])
    }
}

/// Cut a recording into overlapping first-level segments.
///
/// Yields floor((L/fs - l)/s) + 1 segments; trailing samples that do not fill
/// a full window are dropped.
pub fn segment_first_level(rec: &Recording, len_s: f64, hop_s: f64) -> Result<Vec<Segment>> {
    let seg_len = (len_s * rec.fs).round() as usize;
    let hop = (hop_s * rec.fs).round() as usize;
    if seg_len == 0 || hop == 0 {
        return Err(MsgmError::Config("segment length and hop must be positive".into()));
    }
    if rec.samples < seg_len {
        return Err(MsgmError::TooShort { have: rec.samples, need: seg_len });
    }
    let n = (rec.samples - seg_len) / hop + 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * hop;
        let mut data = Vec::with_capacity(rec.channels * seg_len);
        for c in 0..rec.channels {
            data.extend_from_slice(&rec.channel(c)[start..start + seg_len]);
        }
        out.push(Segment {
            data,
            channels: rec.channels,
            samples: seg_len,
            fs: rec.fs,
            subject_id: rec.subject_id,
            trial_id: rec.trial_id,
            label: rec.label,
        });
    }
    Ok(out)
}

/// Cut one first-level segment into sub-segments for a single window scale.
pub fn segment_second_level(seg: &Segment, window: (f64, f64)) -> Result<Vec<Segment>> {
    let (len_s, hop_s) = window;
    let sub_len = (len_s * seg.fs).round() as usize;
    let hop = (hop_s * seg.fs).round() as usize;
    if sub_len > seg.samples {
        return Err(MsgmError::Config(format!(
            "second-level window of {sub_len} samples exceeds segment of {} samples",
            seg.samples
        )));
    }
    if sub_len == 0 || hop == 0 {
        return Err(MsgmError::Config("sub-segment length and hop must be positive".into()));
    }
    let n = (seg.samples - sub_len) / hop + 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * hop;
        let mut data = Vec::with_capacity(seg.channels * sub_len);
        for c in 0..seg.channels {
            data.extend_from_slice(&seg.channel(c)[start..start + sub_len]);
        }
        out.push(Segment {
            data,
            channels: seg.channels,
            samples: sub_len,
            fs: seg.fs,
            subject_id: seg.subject_id,
            trial_id: seg.trial_id,
            label: seg.label,
        });
    }
    Ok(out)
}

/// One-sided Welch power spectral density estimate of a single channel.
///
/// Hann window, segment length min(256, signal length), 50% overlap, per-
/// segment mean removal, mean averaging across segments. Returns (freqs, psd).
pub fn welch_psd(x: &[f64], fs: f64) -> (Vec<f64>, Vec<f64>) {
    let nper = x.len().min(256);
    let hop = (nper / 2).max(1);
    let n_segs = if x.len() >= nper { (x.len() - nper) / hop + 1 } else { 0 };
    let window: Vec<f64> = (0..nper)
        .map(|i| {
            // periodic Hann
            let w = std::f64::consts::PI * i as f64 / nper as f64;
            w.sin().powi(2)
        })
        .collect();
    let win_power: f64 = window.iter().map(|w| w * w).sum();

    let n_bins = nper / 2 + 1;
    let mut psd = vec![0.0; n_bins];
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nper);
    let mut buf = vec![Complex64::default(); nper];

    for s in 0..n_segs {
        let seg = &x[s * hop..s * hop + nper];
        let mean = seg.iter().sum::<f64>() / nper as f64;
        for (b, (&v, &w)) in buf.iter_mut().zip(seg.iter().zip(window.iter())) {
            *b = Complex64::new((v - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let mag = buf[k].norm_sqr();
            // one-sided density scaling; interior bins carry both halves
            let factor = if k == 0 || (nper % 2 == 0 && k == n_bins - 1) { 1.0 } else { 2.0 };
            *p += factor * mag / (fs * win_power);
        }
    }
    if n_segs > 0 {
        for p in psd.iter_mut() {
            *p /= n_segs as f64;
        }
    }
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * fs / nper as f64).collect();
    (freqs, psd)
}

/// Relative PSD over the seven bands for every channel of a sub-segment.
///
/// Band power is the sum of PSD bins whose center frequency lies in
/// [lo, hi); each row is normalized by the sum over the seven bands so it
/// forms a probability vector. An all-zero channel (or one with no power in
/// any band) falls back to the uniform 1/7 vector.
pub fn rpsd(seg: &Segment) -> Result<Tensor> {
    if seg.fs < 90.0 {
        return Err(MsgmError::Config(format!(
            "sampling rate {} Hz cannot resolve the 30-45 Hz gamma band; need fs >= 90",
            seg.fs
        )));
    }
    let c = seg.channels;
    let mut out = vec![0.0; c * NUM_BANDS];
    for ch in 0..c {
        let (freqs, psd) = welch_psd(seg.channel(ch), seg.fs);
        let mut powers = [0.0; NUM_BANDS];
        for (k, &f) in freqs.iter().enumerate() {
            for (bi, &(lo, hi)) in BANDS.iter().enumerate() {
                if f >= lo && f < hi {
                    powers[bi] += psd[k];
                    break;
                }
            }
        }
        let total: f64 = powers.iter().sum();
        let row = &mut out[ch * NUM_BANDS..(ch + 1) * NUM_BANDS];
        if total <= f64::MIN_POSITIVE {
            row.iter_mut().for_each(|v| *v = 1.0 / NUM_BANDS as f64);
        } else {
            for (r, p) in row.iter_mut().zip(powers.iter()) {
                *r = p / total;
            }
        }
    }
    Ok(Tensor::new(vec![c, NUM_BANDS], out))
}

/// Build the per-scale feature tensors for a batch of first-level segments.
///
/// Output ordering is (batch index, sub-segment index, channel, band);
/// deterministic regardless of internal parallelism.
pub fn build_feature_tensors(segments: &[Segment], spec: &ScaleSpec) -> Result<Vec<FeatureTensor>> {
    spec.validate()?;
    if segments.is_empty() {
        return Ok(Vec::new());
    }
    let c = segments[0].channels;
    let fs = segments[0].fs;
    if let Some(bad) = segments.iter().find(|s| s.channels != c || s.fs != fs) {
        return Err(MsgmError::Data(format!(
            "heterogeneous batch: expected {c} channels at {fs} Hz, found {} at {}",
            bad.channels, bad.fs
        )));
    }

    let mut out = Vec::with_capacity(spec.windows.len());
    for (k, &window) in spec.windows.iter().enumerate() {
        let n_k = spec.segments_per_window(k);
        let rows: Vec<Vec<f64>> = segments
            .par_iter()
            .map(|seg| -> Result<Vec<f64>> {
                let subs = segment_second_level(seg, window)?;
                debug_assert_eq!(subs.len(), n_k);
                let mut block = Vec::with_capacity(n_k * c * NUM_BANDS);
                for sub in &subs {
                    block.extend_from_slice(rpsd(sub)?.data());
                }
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;
        let data: Vec<f64> = rows.concat();
        out.push(FeatureTensor {
            scale: k,
            values: Tensor::new(vec![segments.len(), n_k, c, NUM_BANDS], data),
            batch: segments.len(),
            segments: n_k,
            channels: c,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine_recording(freq: f64, fs: f64, secs: f64, channels: usize) -> Recording {
        let n = (fs * secs) as usize;
        let mut data = Vec::with_capacity(channels * n);
        for _ in 0..channels {
            data.extend((0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin()));
        }
        Recording::new(data, channels, fs, 0, 0, 0).unwrap()
    }

    #[test]
    fn first_level_segment_counts() {
        let rec = sine_recording(10.0, 200.0, 60.0, 2);
        assert_eq!(segment_first_level(&rec, 20.0, 4.0).unwrap().len(), 11);

        let rec20 = sine_recording(10.0, 200.0, 20.0, 2);
        assert_eq!(segment_first_level(&rec20, 20.0, 4.0).unwrap().len(), 1);

        let rec21 = sine_recording(10.0, 200.0, 21.0, 2);
        assert_eq!(segment_first_level(&rec21, 20.0, 4.0).unwrap().len(), 1);
    }

    #[test]
    fn too_short_reports_minimum() {
        let rec = sine_recording(10.0, 200.0, 10.0, 1);
        match segment_first_level(&rec, 20.0, 4.0) {
            Err(MsgmError::TooShort { have, need }) => {
                assert_eq!(have, 2000);
                assert_eq!(need, 4000);
            }
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn second_level_counts() {
        let rec = sine_recording(10.0, 200.0, 20.0, 1);
        let seg = &segment_first_level(&rec, 20.0, 4.0).unwrap()[0];
        assert_eq!(segment_second_level(seg, (4.0, 2.0)).unwrap().len(), 9);
        assert_eq!(segment_second_level(seg, (20.0, 20.0)).unwrap().len(), 1);
        assert_eq!(segment_second_level(seg, (8.0, 4.0)).unwrap().len(), 4);
        assert!(segment_second_level(seg, (25.0, 2.0)).is_err());
    }

    #[test]
    fn alpha_sine_concentrates_in_alpha_band() {
        let rec = sine_recording(10.0, 200.0, 4.0, 3);
        let seg = Segment {
            data: rec.data.clone(),
            channels: 3,
            samples: rec.samples,
            fs: 200.0,
            subject_id: 0,
            trial_id: 0,
            label: 0,
        };
        let r = rpsd(&seg).unwrap();
        for ch in 0..3 {
            assert!(r.at(&[ch, ALPHA]) >= 0.9, "alpha fraction {}", r.at(&[ch, ALPHA]));
        }

        // independent oracle: single un-windowed periodogram
        let x = seg.channel(0);
        let n = x.len();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        let mut band_power = [0.0; NUM_BANDS];
        for k in 0..n / 2 + 1 {
            let f = k as f64 * 200.0 / n as f64;
            for (bi, &(lo, hi)) in BANDS.iter().enumerate() {
                if f >= lo && f < hi {
                    band_power[bi] += buf[k].norm_sqr();
                    break;
                }
            }
        }
        let total: f64 = band_power.iter().sum();
        assert!(band_power[ALPHA] / total >= 0.9);
    }

    #[test]
    fn rpsd_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 800;
        let data: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seg = Segment { data, channels: 2, samples: n, fs: 200.0, subject_id: 0, trial_id: 0, label: 0 };
        let r = rpsd(&seg).unwrap();
        for ch in 0..2 {
            let s: f64 = (0..NUM_BANDS).map(|b| r.at(&[ch, b])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_channel_falls_back_to_uniform() {
        let seg = Segment {
            data: vec![0.0; 800],
            channels: 1,
            samples: 800,
            fs: 200.0,
            subject_id: 0,
            trial_id: 0,
            label: 0,
        };
        let r = rpsd(&seg).unwrap();
        for b in 0..NUM_BANDS {
            assert!((r.at(&[0, b]) - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_sampling_rate_rejected() {
        let seg = Segment {
            data: vec![0.0; 100],
            channels: 1,
            samples: 100,
            fs: 80.0,
            subject_id: 0,
            trial_id: 0,
            label: 0,
        };
        assert!(rpsd(&seg).is_err());
    }

    #[test]
    fn white_noise_band_fractions_track_band_widths() {
        // Monte-Carlo oracle: flat spectrum => band power proportional to width.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 100;
        let n = 800;
        let mut mean = [0.0; NUM_BANDS];
        for _ in 0..trials {
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let seg = Segment { data, channels: 1, samples: n, fs: 200.0, subject_id: 0, trial_id: 0, label: 0 };
            let r = rpsd(&seg).unwrap();
            for b in 0..NUM_BANDS {
                mean[b] += r.at(&[0, b]) / trials as f64;
            }
        }
        let total_width: f64 = BANDS.iter().map(|(lo, hi)| hi - lo).sum();
        for (b, &(lo, hi)) in BANDS.iter().enumerate() {
            let expected = (hi - lo) / total_width;
            assert!(
                (mean[b] - expected).abs() <= 0.05,
                "band {b}: mean {} vs expected {expected}",
                mean[b]
            );
        }
    }

    #[test]
    fn amplitude_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 800;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = data.iter().map(|v| v * 137.5).collect();
        let seg = |d: Vec<f64>| Segment { data: d, channels: 1, samples: n, fs: 200.0, subject_id: 0, trial_id: 0, label: 0 };
        let a = rpsd(&seg(data)).unwrap();
        let b = rpsd(&seg(scaled)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 800;
        let ch0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ch1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = Segment {
            data: [ch0.clone(), ch1.clone()].concat(),
            channels: 2, samples: n, fs: 200.0, subject_id: 0, trial_id: 0, label: 0,
        };
        let rev = Segment {
            data: [ch1, ch0].concat(),
            channels: 2, samples: n, fs: 200.0, subject_id: 0, trial_id: 0, label: 0,
        };
        let a = rpsd(&fwd).unwrap();
        let b = rpsd(&rev).unwrap();
        for band in 0..NUM_BANDS {
            assert!((a.at(&[0, band]) - b.at(&[1, band])).abs() < 1e-12);
            assert!((a.at(&[1, band]) - b.at(&[0, band])).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_tensor_shapes() {
        let rec0 = sine_recording(10.0, 200.0, 20.0, 3);
        let rec1 = sine_recording(6.0, 200.0, 20.0, 3);
        let mut segs = segment_first_level(&rec0, 20.0, 4.0).unwrap();
        segs.extend(segment_first_level(&rec1, 20.0, 4.0).unwrap());
        let spec = ScaleSpec {
            first_len: 20.0,
            first_hop: 4.0,
            windows: vec![(4.0, 2.0)],
        };
        let fts = build_feature_tensors(&segs, &spec).unwrap();
        assert_eq!(fts.len(), 1);
        assert_eq!(fts[0].values.shape(), &[2, 9, 3, 7]);
    }

    #[test]
    fn three_window_spec_counts() {
        let rec = sine_recording(10.0, 200.0, 20.0, 2);
        let segs = segment_first_level(&rec, 20.0, 4.0).unwrap();
        let spec = ScaleSpec {
            first_len: 20.0,
            first_hop: 4.0,
            windows: vec![(4.0, 2.0), (8.0, 4.0), (20.0, 20.0)],
        };
        let fts = build_feature_tensors(&segs, &spec).unwrap();
        let n_ks: Vec<usize> = fts.iter().map(|f| f.segments).collect();
        assert_eq!(n_ks, vec![9, 4, 1]);
    }

    #[test]
    fn empty_batch_gives_empty_tensor_list() {
        let spec = ScaleSpec::default();
        let fts = build_feature_tensors(&[], &spec).unwrap();
        assert!(fts.is_empty());
    }

    #[test]
    fn heterogeneous_batch_rejected() {
        let a = sine_recording(10.0, 200.0, 20.0, 2);
        let b = sine_recording(10.0, 200.0, 20.0, 3);
        let mut segs = segment_first_level(&a, 20.0, 4.0).unwrap();
        segs.extend(segment_first_level(&b, 20.0, 4.0).unwrap());
        assert!(build_feature_tensors(&segs, &ScaleSpec::default()).is_err());
    }

    proptest! {
        #[test]
        fn segment_counts_match_closed_form(
            total in 20u32..200,
            len in 2u32..20,
            hop in 1u32..10,
        ) {
            let fs = 100.0;
            let rec = sine_recording(10.0, fs, total as f64, 1);
            let segs = segment_first_level(&rec, len as f64, hop as f64).unwrap();
            let expected = ((total - len) / hop + 1) as usize;
            prop_assert_eq!(segs.len(), expected);
        }
    }
}
