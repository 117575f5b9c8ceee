//! Synthetic EEG generation, the EEGB binary container, and manifest
//! ingestion.
//!
//! EEGB layout (little-endian): magic "EEGB", u16 version = 1, u16 channel
//! count c, u64 sample count L, f64 sampling rate, then c·L f32 samples in
//! channel-major order. File size is exactly 24 + 4·c·L bytes.

use crate::error::{MsgmError, Result};
use crate::graph::RegionMap;
use crate::signal::Recording;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const EEGB_MAGIC: &[u8; 4] = b"EEGB";
pub const EEGB_VERSION: u16 = 1;
pub const EEGB_HEADER_BYTES: usize = 24;

/// Write a recording as an EEGB file (f32 on disk, f64 in memory).
pub fn write_eegb(path: &Path, rec: &Recording) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(EEGB_MAGIC)?;
    file.write_all(&EEGB_VERSION.to_le_bytes())?;
    let c = u16::try_from(rec.channels)
        .map_err(|_| MsgmError::Format(format!("{} channels exceed u16", rec.channels)))?;
    file.write_all(&c.to_le_bytes())?;
    file.write_all(&(rec.samples as u64).to_le_bytes())?;
    file.write_all(&rec.fs.to_le_bytes())?;
    let mut buf = Vec::with_capacity(rec.data.len() * 4);
    for &v in &rec.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read an EEGB file. Identity metadata comes from the manifest, so the
/// returned recording carries zeroed ids.
pub fn read_eegb(path: &Path) -> Result<Recording> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| MsgmError::Format(format!("{}: {e}", path.display())))?;
    let mut header = [0u8; EEGB_HEADER_BYTES];
    file.read_exact(&mut header).map_err(|_| {
        MsgmError::Format(format!(
            "{}: shorter than the {EEGB_HEADER_BYTES}-byte header",
            path.display()
        ))
    })?;
    if &header[0..4] != EEGB_MAGIC {
        return Err(MsgmError::Format(format!(
            "{}: bad magic {:?} at offset 0, expected {EEGB_MAGIC:?}",
            path.display(),
            &header[0..4]
        )));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != EEGB_VERSION {
        return Err(MsgmError::Format(format!(
            "{}: unsupported version {version} at offset 4",
            path.display()
        )));
    }
    let c = u16::from_le_bytes([header[6], header[7]]) as usize;
    let l = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let fs = f64::from_le_bytes(header[16..24].try_into().unwrap());
    let expected = c * l * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(MsgmError::Format(format!(
            "{}: payload is {} bytes at offset {EEGB_HEADER_BYTES}, expected {expected} ({c} ch x {l} samples x 4)",
            path.display(),
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Recording::new(data, c, fs, 0, 0, 0)
}

/// One dataset entry in the manifest JSON.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: usize,
    pub channel_names: Vec<String>,
}

pub type Manifest = Vec<ManifestEntry>;

/// A validated, fully-loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
    pub channel_names: Vec<String>,
    pub fs: f64,
}

impl Dataset {
    pub fn subjects(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.recordings.iter().map(|r| r.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Load and validate every file referenced by a manifest. Relative paths
/// resolve against the manifest's directory. `num_classes` bounds the labels.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MsgmError::Format(format!("{}: {e}", path.display())))?;
    let entries: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));

    if entries.is_empty() {
        return Ok(Dataset { recordings: Vec::new(), channel_names: Vec::new(), fs: 0.0 });
    }

    let mut seen = std::collections::HashSet::new();
    let mut offenders = Vec::new();
    for e in &entries {
        if !seen.insert((e.subject_id, e.trial_id)) {
            offenders.push(format!("duplicate (subject {}, trial {})", e.subject_id, e.trial_id));
        }
        if e.label >= num_classes {
            offenders.push(format!(
                "{}: label {} out of range for {num_classes} classes",
                e.path.display(),
                e.label
            ));
        }
    }
    if !offenders.is_empty() {
        return Err(MsgmError::Data(format!("manifest rejected: {}", offenders.join("; "))));
    }

    let channel_names = entries[0].channel_names.clone();
    let mut recordings = Vec::with_capacity(entries.len());
    let mut errors = Vec::new();
    for e in &entries {
        let full = if e.path.is_absolute() { e.path.clone() } else { base.join(&e.path) };
        match read_eegb(&full) {
            Ok(mut rec) => {
                if rec.channels != e.channel_names.len() {
                    errors.push(format!(
                        "{}: file has {} channels, manifest names {}",
                        e.path.display(),
                        rec.channels,
                        e.channel_names.len()
                    ));
                    continue;
                }
                if e.channel_names != channel_names {
                    errors.push(format!(
                        "{}: channel names differ from the first entry",
                        e.path.display()
                    ));
                    continue;
                }
                rec.subject_id = e.subject_id;
                rec.trial_id = e.trial_id;
                rec.label = e.label;
                recordings.push(rec);
            }
            Err(err) => errors.push(err.to_string()),
        }
    }
    if !errors.is_empty() {
        return Err(MsgmError::Data(format!("manifest ingestion failed: {}", errors.join("; "))));
    }
    let fs = recordings[0].fs;
    let c = recordings[0].channels;
    if let Some(bad) = recordings.iter().find(|r| r.fs != fs || r.channels != c) {
        return Err(MsgmError::Data(format!(
            "heterogeneous dataset: expected {c} channels at {fs} Hz, found {} at {}",
            bad.channels, bad.fs
        )));
    }
    Ok(Dataset { recordings, channel_names, fs })
}

/// Parameters of the synthetic class-conditional EEG generator.
///
/// Class 1 multiplies alpha-band power by `alpha_boost` on the leading
/// `boosted_channels`, except on `weak_block_fraction` of its `cue_period_s`
/// blocks, which stay at baseline. The next `cue_channels` channels carry a
/// temporal direction cue in both classes: their alpha amplitude follows a
/// power-normalized sawtooth per block, rising for class 1 and falling
/// (time-mirrored) for class 0. Band powers on the cue channels are
/// class-independent, so weak class-1 windows match class 0 in every
/// order-insensitive statistic; only the sub-segment order separates them.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub subjects: u32,
    pub trials_per_subject: u32,
    pub duration_s: f64,
    pub fs: f64,
    pub channels: usize,
    /// Class 1 multiplies alpha-band power by this factor on the boosted
    /// channels (g in the separability analyses).
    pub alpha_boost: f64,
    /// Number of leading channels carrying the boost.
    pub boosted_channels: usize,
    /// Number of channels (after the boosted ones) carrying the direction
    /// cue.
    pub cue_channels: usize,
    /// Per-subject log-normal jitter on the overall signal gain.
    pub gain_jitter: f64,
    /// Per-subject log-normal jitter on each band's amplitude; this is what
    /// makes unseen subjects genuinely shifted (overall gain cancels in
    /// relative features).
    pub band_jitter: f64,
    /// Broadband colored-noise amplitude.
    pub noise_floor: f64,
    /// Sawtooth depth of the alpha direction cue (0 disables it).
    pub temporal_cue: f64,
    /// Sawtooth/block period in seconds; match the first-level window length.
    pub cue_period_s: f64,
    /// Fraction of each class-1 trial's blocks that stay unboosted.
    pub weak_block_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 8,
            trials_per_subject: 6,
            duration_s: 60.0,
            fs: 128.0,
            channels: 16,
            boosted_channels: 8,
            cue_channels: 8,
            alpha_boost: 4.0,
            gain_jitter: 0.2,
            band_jitter: 0.3,
            noise_floor: 0.5,
            temporal_cue: 0.8,
            cue_period_s: 20.0,
            weak_block_fraction: 1.0 / 3.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fs < 128.0 {
            return Err(MsgmError::Config(format!("synthetic fs must be >= 128, got {}", self.fs)));
        }
        if self.subjects == 0 || self.trials_per_subject == 0 || self.channels == 0 {
            return Err(MsgmError::Config("subjects, trials and channels must be positive".into()));
        }
        if self.boosted_channels == 0 || self.boosted_channels > self.channels {
            return Err(MsgmError::Config(format!(
                "boosted_channels must be in 1..={}, got {}",
                self.channels, self.boosted_channels
            )));
        }
        if self.boosted_channels + self.cue_channels > self.channels {
            return Err(MsgmError::Config(format!(
                "boosted_channels + cue_channels = {} exceeds {} channels",
                self.boosted_channels + self.cue_channels,
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.temporal_cue) {
            return Err(MsgmError::Config("temporal_cue must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.weak_block_fraction) {
            return Err(MsgmError::Config("weak_block_fraction must be in [0, 1)".into()));
        }
        if self.cue_period_s <= 0.0 {
            return Err(MsgmError::Config("cue_period_s must be positive".into()));
        }
        Ok(())
    }

    /// 10-20 channel names for the synthetic montage (32-channel map prefix).
    pub fn channel_names(&self) -> Result<Vec<String>> {
        let map = self.region_map()?;
        Ok(map.channel_names())
    }

    /// Region map for the synthetic montage.
    pub fn region_map(&self) -> Result<RegionMap> {
        let base = RegionMap::builtin("32ch-7region")?;
        if self.channels > base.num_channels() {
            return Err(MsgmError::Config(format!(
                "synthetic montage supports up to {} channels, got {}",
                base.num_channels(),
                self.channels
            )));
        }
        base.truncated(self.channels)
    }
}

/// Two tone frequencies per analysis band.
const BAND_TONES: [(f64, f64); 7] = [
    (1.9, 3.1),
    (5.2, 6.8),
    (9.0, 11.0),
    (13.2, 14.8),
    (17.1, 18.9),
    (22.0, 26.0),
    (34.0, 41.0),
];

const ALPHA_BAND: usize = 2;

/// Power-normalized sawtooth: rises over one period for class 1, mirrored
/// (falls) for class 0. Mean square is 1 for either direction.
fn cue_modulation(depth: f64, period_samples: usize, t: usize, rising: bool) -> f64 {
    if depth == 0.0 {
        return 1.0;
    }
    let phase = (t % period_samples) as f64 / period_samples as f64;
    let u = if rising { phase } else { 1.0 - phase };
    ((1.0 - depth) + 2.0 * depth * u) / (1.0 + depth * depth / 3.0).sqrt()
}

/// Deterministic weak-block pattern with exact long-run density `frac`
/// (Bresenham spacing over block indices).
fn block_is_weak(block: usize, frac: f64) -> bool {
    if frac <= 0.0 {
        return false;
    }
    let f = frac.min(1.0);
    (((block + 1) as f64 * f).floor() - (block as f64 * f).floor()) >= 1.0
}

/// Generate class-conditional synthetic recordings, deterministic under the
/// seed. Labels alternate with trial index, so every subject is balanced.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Recording>> {
    spec.validate()?;
    let n = (spec.duration_s * spec.fs).round() as usize;
    let period = (spec.cue_period_s * spec.fs).round() as usize;
    let mut out = Vec::with_capacity((spec.subjects * spec.trials_per_subject) as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for subject in 0..spec.subjects {
        let gain = (rng.gen_range(-1.0..1.0) * spec.gain_jitter).exp();
        let band_gains: Vec<f64> =
            (0..7).map(|_| (rng.gen_range(-1.0..1.0) * spec.band_jitter).exp()).collect();
        for trial in 0..spec.trials_per_subject {
            let label = (trial % 2) as usize;
            // amplitude factor for a power boost of alpha_boost
            let boost_amp = spec.alpha_boost.sqrt();
            let mut data = Vec::with_capacity(spec.channels * n);
            for ch in 0..spec.channels {
                let boosted = ch < spec.boosted_channels;
                let cued = !boosted && ch < spec.boosted_channels + spec.cue_channels;
                let phases: Vec<f64> =
                    (0..14).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                let mut noise_state = 0.0;
                let noise: Vec<f64> = (0..n)
                    .map(|_| {
                        let white: f64 = rng.gen_range(-1.0..1.0);
                        noise_state = 0.9 * noise_state + white;
                        0.35 * noise_state + 0.65 * white
                    })
                    .collect();
                for (t, &nz) in noise.iter().enumerate() {
                    let time = t as f64 / spec.fs;
                    let mut v = spec.noise_floor * nz;
                    for (b, &(f1, f2)) in BAND_TONES.iter().enumerate() {
                        let mut amp = band_gains[b];
                        if b == ALPHA_BAND {
                            if boosted
                                && label == 1
                                && !block_is_weak(t / period, spec.weak_block_fraction)
                            {
                                amp *= boost_amp;
                            }
                            if cued {
                                amp *= cue_modulation(spec.temporal_cue, period, t, label == 1);
                            }
                        }
                        let w1 = std::f64::consts::TAU * f1;
                        let w2 = std::f64::consts::TAU * f2;
                        v += amp
                            * ((w1 * time + phases[2 * b]).sin()
                                + (w2 * time + phases[2 * b + 1]).sin())
                            * std::f64::consts::FRAC_1_SQRT_2;
                    }
                    data.push(gain * v);
                }
            }
            out.push(Recording::new(data, spec.channels, spec.fs, subject, trial, label)?);
        }
    }
    Ok(out)
}

/// Write recordings as EEGB files plus a manifest.json in `dir`. Returns the
/// manifest path.
pub fn write_dataset(dir: &Path, recordings: &[Recording], channel_names: &[String]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(recordings.len());
    for rec in recordings {
        let name = format!("s{:03}_t{:03}.eegb", rec.subject_id, rec.trial_id);
        write_eegb(&dir.join(&name), rec)?;
        manifest.push(ManifestEntry {
            path: PathBuf::from(&name),
            subject_id: rec.subject_id,
            trial_id: rec.trial_id,
            label: rec.label,
            channel_names: channel_names.to_vec(),
        });
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{rpsd, segment_first_level, ALPHA};

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("msgm-data-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn eegb_roundtrip_is_f32_exact() {
        let dir = tmpdir("roundtrip");
        let rec = Recording::new(
            (0..3 * 100).map(|i| (i as f64 * 0.013).sin()).collect(),
            3,
            200.0,
            1,
            2,
            1,
        )
        .unwrap();
        let path = dir.join("r.eegb");
        write_eegb(&path, &rec).unwrap();
        let back = read_eegb(&path).unwrap();
        assert_eq!(back.channels, 3);
        assert_eq!(back.samples, 100);
        assert_eq!(back.fs, 200.0);
        for (a, b) in rec.data.iter().zip(back.data.iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*b, (*a as f32) as f64);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn eegb_file_size_arithmetic() {
        let dir = tmpdir("size");
        let (c, l) = (62usize, 60 * 200usize);
        let rec = Recording::new(vec![0.0; c * l], c, 200.0, 0, 0, 0).unwrap();
        let path = dir.join("big.eegb");
        write_eegb(&path, &rec).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, EEGB_HEADER_BYTES + c * l * 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = tmpdir("trunc");
        let rec = Recording::new(vec![0.5; 2 * 50], 2, 128.0, 0, 0, 0).unwrap();
        let path = dir.join("t.eegb");
        write_eegb(&path, &rec).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_eegb(&path).unwrap_err().to_string();
        assert!(err.contains("390") && err.contains("400"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tmpdir("magic");
        let path = dir.join("bad.eegb");
        std::fs::write(&path, b"NOPE00000000000000000000123").unwrap();
        let err = read_eegb(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_empty_list_is_empty_dataset() {
        let dir = tmpdir("empty");
        let path = dir.join("manifest.json");
        std::fs::write(&path, "[]").unwrap();
        let ds = load_manifest(&path, 2).unwrap();
        assert!(ds.recordings.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_missing_file_named() {
        let dir = tmpdir("missing");
        let spec = SyntheticSpec {
            subjects: 2,
            trials_per_subject: 2,
            duration_s: 4.0,
            channels: 2,
            boosted_channels: 1,
            cue_channels: 1,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 1).unwrap();
        let names = spec.channel_names().unwrap();
        let manifest = write_dataset(&dir, &recs, &names).unwrap();
        std::fs::remove_file(dir.join("s001_t001.eegb")).unwrap();
        let err = load_manifest(&manifest, 2).unwrap_err().to_string();
        assert!(err.contains("s001_t001.eegb"), "{err}");
        assert!(!err.contains("s000_t000"), "unrelated file blamed: {err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_duplicate_subject_trial_rejected() {
        let dir = tmpdir("dup");
        let spec = SyntheticSpec {
            subjects: 1,
            trials_per_subject: 2,
            duration_s: 4.0,
            channels: 2,
            boosted_channels: 1,
            cue_channels: 1,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 1).unwrap();
        let names = spec.channel_names().unwrap();
        let manifest_path = write_dataset(&dir, &recs, &names).unwrap();
        let mut manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
        manifest[1].subject_id = manifest[0].subject_id;
        manifest[1].trial_id = manifest[0].trial_id;
        std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_manifest(&manifest_path, 2).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_label_out_of_range_rejected() {
        let dir = tmpdir("label");
        let spec = SyntheticSpec {
            subjects: 1,
            trials_per_subject: 2,
            duration_s: 4.0,
            channels: 2,
            boosted_channels: 1,
            cue_channels: 1,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 1).unwrap();
        let names = spec.channel_names().unwrap();
        let manifest_path = write_dataset(&dir, &recs, &names).unwrap();
        assert!(load_manifest(&manifest_path, 1).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            subjects: 2,
            trials_per_subject: 2,
            duration_s: 2.0,
            channels: 3,
            boosted_channels: 2,
            cue_channels: 1,
            ..Default::default()
        };
        let a = generate_synthetic(&spec, 123).unwrap();
        let b = generate_synthetic(&spec, 123).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data, y.data);
        }
        let c = generate_synthetic(&spec, 124).unwrap();
        assert_ne!(a[0].data, c[0].data);
    }

    /// Trial-level mean alpha rPSD over the boosted channels.
    fn mean_alpha(rec: &Recording, boosted: usize) -> f64 {
        let segs = segment_first_level(rec, 4.0, 4.0).unwrap();
        let mut acc = 0.0;
        let mut count = 0;
        for seg in &segs {
            let r = rpsd(seg).unwrap();
            for ch in 0..boosted {
                acc += r.at(&[ch, ALPHA]);
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn unit_boost_gives_no_class_separation() {
        let spec = SyntheticSpec {
            subjects: 20,
            trials_per_subject: 10,
            duration_s: 4.0,
            cue_period_s: 4.0,
            channels: 4,
            boosted_channels: 2,
            cue_channels: 2,
            alpha_boost: 1.0,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(recs.len(), 200);
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for rec in &recs {
            sums[rec.label] += mean_alpha(rec, 2);
            counts[rec.label] += 1;
        }
        let diff = (sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64).abs();
        assert!(diff < 0.02, "class alpha difference {diff} at g = 1");
    }

    #[test]
    fn g4_boost_separates_classes() {
        let spec = SyntheticSpec {
            subjects: 10,
            trials_per_subject: 10,
            duration_s: 4.0,
            cue_period_s: 4.0,
            channels: 4,
            boosted_channels: 2,
            cue_channels: 2,
            alpha_boost: 4.0,
            weak_block_fraction: 0.0,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 11).unwrap();
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for rec in &recs {
            sums[rec.label] += mean_alpha(rec, 2);
            counts[rec.label] += 1;
        }
        let m0 = sums[0] / counts[0] as f64;
        let m1 = sums[1] / counts[1] as f64;
        assert!(m1 - m0 >= 0.1, "boosted alpha {m1} vs baseline {m0}");
    }

    #[test]
    fn g4_threshold_rule_is_95_percent_separable() {
        let spec = SyntheticSpec {
            subjects: 8,
            trials_per_subject: 6,
            duration_s: 20.0,
            channels: 8,
            boosted_channels: 4,
            cue_channels: 4,
            alpha_boost: 4.0,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 3).unwrap();
        let scores: Vec<(f64, usize)> =
            recs.iter().map(|r| (mean_alpha(r, 4), r.label)).collect();
        let m0 = scores.iter().filter(|(_, l)| *l == 0).map(|(s, _)| s).sum::<f64>()
            / scores.iter().filter(|(_, l)| *l == 0).count() as f64;
        let m1 = scores.iter().filter(|(_, l)| *l == 1).map(|(s, _)| s).sum::<f64>()
            / scores.iter().filter(|(_, l)| *l == 1).count() as f64;
        let threshold = 0.5 * (m0 + m1);
        let correct = scores
            .iter()
            .filter(|(s, l)| (*s > threshold) == (*l == 1))
            .count();
        let acc = correct as f64 / scores.len() as f64;
        assert!(acc > 0.95, "threshold rule accuracy {acc}");
    }

    #[test]
    fn dataset_write_and_reload() {
        let dir = tmpdir("reload");
        let spec = SyntheticSpec {
            subjects: 2,
            trials_per_subject: 3,
            duration_s: 4.0,
            channels: 3,
            boosted_channels: 2,
            cue_channels: 1,
            ..Default::default()
        };
        let recs = generate_synthetic(&spec, 5).unwrap();
        let names = spec.channel_names().unwrap();
        let manifest = write_dataset(&dir, &recs, &names).unwrap();
        let ds = load_manifest(&manifest, 2).unwrap();
        assert_eq!(ds.recordings.len(), 6);
        assert_eq!(ds.subjects(), vec![0, 1]);
        assert_eq!(ds.channel_names, names);
        // reading twice is idempotent
        let ds2 = load_manifest(&manifest, 2).unwrap();
        assert_eq!(ds.recordings[0].data, ds2.recordings[0].data);
        std::fs::remove_dir_all(&dir).ok();
    }
}
