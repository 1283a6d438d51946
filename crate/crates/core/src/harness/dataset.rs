//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/samples/<id>/meta.json
//! <root>/samples/<id>/audio.wav          mono PCM
//! <root>/samples/<id>/frames/000000.png  grayscale, 8 or 16 bit
//! ```
//!
//! `meta.json` holds the sample's tags, rates and the SHA-256 of every file in
//! the sample directory. `manifest.json` lists the same records.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::toy::{generate_sample, ToySample, ToyWorldSpec};
use crate::align::MediaPair;
use crate::error::{Error, Result};
use crate::frame::Frame;

pub const DATASET_FORMAT: &str = "vtdiff-dataset";
pub const AUDIO_FILE: &str = "audio.wav";
pub const META_FILE: &str = "meta.json";
pub const FRAMES_DIR: &str = "frames";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub speaker: String,
    pub words: Vec<String>,
    /// `control`, `patient` or `toy`.
    pub cohort: String,
    pub frame_count: usize,
    pub fps: f64,
    pub sample_rate: f64,
    /// SHA-256 per file, keyed by path relative to the sample directory.
    pub checksums: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("samples").join(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// Generator settings when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ToyWorldSpec>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<SampleRecord>, generator: Option<ToyWorldSpec>) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: 1,
            generator,
            samples,
        }
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Hash of the sorted sample ids and their checksums, used to stamp splits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut ids: Vec<&SampleRecord> = self.samples.iter().collect();
        ids.sort_by(|a, b| a.id.cmp(&b.id));
        for s in ids {
            h.update(s.id.as_bytes());
            for (k, v) in &s.checksums {
                h.update(k.as_bytes());
                h.update(v.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_json(&root.join("manifest.json"), self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// 16-bit grayscale PNG bytes.
pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Dataset(format!("png encode: {e}")))?;
        let mut data = Vec::with_capacity(frame.data.len() * 2);
        for v in &frame.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            data.extend_from_slice(&q.to_be_bytes());
        }
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Dataset(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Frame> {
    let bad = |e: String| Error::Dataset(format!("png decode: {e}"));
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad(format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        other => return Err(bad(format!("unsupported bit depth {other:?}"))),
    };
    Frame::new(h, w, data)
}

/// 16-bit mono PCM WAV bytes.
pub fn encode_wav(samples: &[f32], sample_rate: f64) -> Result<Vec<u8>> {
    if sample_rate.fract() != 0.0 || sample_rate <= 0.0 || sample_rate > u32::MAX as f64 {
        return Err(Error::InvalidInput(format!(
            "WAV needs an integral sample rate, got {sample_rate}"
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::Dataset(format!("wav encode: {e}")))?;
        for s in samples {
            let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(q)
                .map_err(|e| Error::Dataset(format!("wav encode: {e}")))?;
        }
        w.finalize()
            .map_err(|e| Error::Dataset(format!("wav encode: {e}")))?;
    }
    Ok(cursor.into_inner())
}

/// Decodes a WAV file to mono `f32` (channels averaged) and its sample rate.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f32>, f64)> {
    let bad = |e: hound::Error| Error::Dataset(format!("wav decode: {e}"));
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(bad)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(bad)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(bad)?
        }
    };
    let mono = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f32>() / channels as f32)
        .collect();
    Ok((mono, spec.sample_rate as f64))
}

pub fn read_wav(path: &Path) -> Result<(Vec<f32>, f64)> {
    decode_wav(&read_bytes(path)?)
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: f64) -> Result<()> {
    write_bytes(path, &encode_wav(samples, sample_rate)?)
}

/// Reads `000000.png, 000001.png, ...` from a directory, in name order.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut names = list_pngs(dir)?;
    names.sort();
    names
        .iter()
        .map(|n| decode_png(&read_bytes(&dir.join(n))?))
        .collect()
}

pub fn write_frame_dir(dir: &Path, frames: &[Frame]) -> Result<BTreeMap<String, String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sums = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        let name = frame_file_name(i);
        let bytes = encode_png(f)?;
        sums.insert(name.clone(), sha256_hex(&bytes));
        write_bytes(&dir.join(&name), &bytes)?;
    }
    Ok(sums)
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    Ok(names)
}

/// Writes one sample directory and returns its record.
pub fn write_sample(
    root: &Path,
    sample: &ToySample,
    fps: f64,
    sample_rate: f64,
) -> Result<SampleRecord> {
    let dir = root.join("samples").join(&sample.id);
    let frame_sums = write_frame_dir(&dir.join(FRAMES_DIR), &sample.frames)?;
    let mut checksums: BTreeMap<String, String> = frame_sums
        .into_iter()
        .map(|(k, v)| (format!("{FRAMES_DIR}/{k}"), v))
        .collect();
    let audio = encode_wav(&sample.waveform, sample_rate)?;
    checksums.insert(AUDIO_FILE.into(), sha256_hex(&audio));
    write_bytes(&dir.join(AUDIO_FILE), &audio)?;
    let record = SampleRecord {
        id: sample.id.clone(),
        speaker: sample.speaker.clone(),
        words: sample.words.clone(),
        cohort: sample.cohort.clone(),
        frame_count: sample.frames.len(),
        fps,
        sample_rate,
        checksums,
    };
    write_json(&dir.join(META_FILE), &record)?;
    Ok(record)
}

fn ensure_fresh_dir(root: &Path) -> Result<()> {
    if root.exists() {
        let mut it = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if it.next().is_some() {
            return Err(Error::Dataset(format!(
                "output directory {} is not empty",
                root.display()
            )));
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

/// Generates `n_clips` toy samples under `root` (which must be empty or absent).
pub fn generate_toy_dataset(spec: &ToyWorldSpec, n_clips: usize, root: &Path) -> Result<DatasetManifest> {
    if n_clips == 0 {
        return Err(Error::InvalidInput("n_clips must be >= 1".into()));
    }
    spec.validate()?;
    ensure_fresh_dir(root)?;
    let records = (0..n_clips)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(spec, i)?;
            write_sample(root, &s, spec.fps, spec.sample_rate)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(records, Some(spec.clone()));
    manifest.write(root)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub accepted: usize,
    pub skipped: Vec<SkippedSample>,
}

impl std::fmt::Display for SkipReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} accepted, {} skipped", self.accepted, self.skipped.len())?;
        for s in &self.skipped {
            writeln!(f, "  {}: {}", s.id, s.reason)?;
        }
        Ok(())
    }
}

/// Verifies every file listed in a record against its checksum.
pub fn verify_sample(root: &Path, record: &SampleRecord) -> Result<()> {
    let dir = record.dir(root);
    if !record.checksums.contains_key(AUDIO_FILE) {
        return Err(Error::Dataset(format!("{}: no audio checksum", record.id)));
    }
    let listed_frames = record
        .checksums
        .keys()
        .filter(|k| k.starts_with(&format!("{FRAMES_DIR}/")))
        .count();
    if listed_frames != record.frame_count || record.frame_count == 0 {
        return Err(Error::Dataset(format!(
            "{}: {} frames declared, {listed_frames} listed",
            record.id, record.frame_count
        )));
    }
    for (rel, expected) in &record.checksums {
        let path = dir.join(rel);
        let bytes = read_bytes(&path)?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Checksum { path });
        }
    }
    Ok(())
}

/// Scans `root/samples/*`, validating each sample; malformed samples are
/// skipped and reported. Fails only when nothing valid remains.
pub fn ingest(root: &Path) -> Result<(DatasetManifest, SkipReport)> {
    let samples_dir = root.join("samples");
    let entries = std::fs::read_dir(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let generator = read_json::<DatasetManifest>(&root.join("manifest.json"))
        .ok()
        .and_then(|m| m.generator);
    let mut report = SkipReport::default();
    let mut records = Vec::new();
    for dir in dirs {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let outcome = read_json::<SampleRecord>(&dir.join(META_FILE)).and_then(|r| {
            if r.id != id {
                return Err(Error::Dataset(format!("meta id {} does not match directory", r.id)));
            }
            verify_sample(root, &r)?;
            Ok(r)
        });
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => report.skipped.push(SkippedSample {
                id,
                reason: e.to_string(),
            }),
        }
    }
    report.accepted = records.len();
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no valid samples under {}",
            samples_dir.display()
        )));
    }
    Ok((DatasetManifest::new(records, generator), report))
}

/// Reads `manifest.json` and checks every referenced file.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Dataset(format!("unknown dataset format {}", manifest.format)));
    }
    manifest
        .samples
        .par_iter()
        .try_for_each(|r| verify_sample(root, r))?;
    Ok(manifest)
}

/// Loads frames and audio of one sample.
pub fn load_sample(root: &Path, record: &SampleRecord) -> Result<MediaPair> {
    let dir = record.dir(root);
    let frames = read_frame_dir(&dir.join(FRAMES_DIR))?;
    let (waveform, sr) = read_wav(&dir.join(AUDIO_FILE))?;
    if sr != record.sample_rate {
        return Err(Error::MismatchedRates(format!(
            "{}: WAV is {sr} Hz, record says {}",
            record.id, record.sample_rate
        )));
    }
    let pair = MediaPair {
        frames,
        waveform,
        fps: record.fps,
        sample_rate: record.sample_rate,
    };
    pair.validate()?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_16_bit_exact() {
        let f = Frame::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.123]).unwrap();
        let g = decode_png(&encode_png(&f).unwrap()).unwrap();
        for (a, b) in f.data.iter().zip(&g.data) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        assert_eq!(encode_png(&g).unwrap(), encode_png(&f).unwrap());
    }

    #[test]
    fn wav_round_trip() {
        let s: Vec<f32> = (0..100).map(|i| (i as f32 * 0.3).sin() * 0.9).collect();
        let (r, sr) = decode_wav(&encode_wav(&s, 16000.0).unwrap()).unwrap();
        assert_eq!(sr, 16000.0);
        for (a, b) in s.iter().zip(&r) {
            assert!((a - b).abs() < 1.0 / 32767.0);
        }
        assert!(encode_wav(&s, 16000.5).is_err());
    }

    fn tiny_spec() -> ToyWorldSpec {
        ToyWorldSpec {
            resolution: (16, 16),
            clip_seconds: 0.2,
            ..ToyWorldSpec::default()
        }
    }

    #[test]
    fn generate_and_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("d");
        let m = generate_toy_dataset(&tiny_spec(), 3, &root).unwrap();
        assert_eq!(load_manifest(&root).unwrap(), m);
        let (ingested, report) = ingest(&root).unwrap();
        assert_eq!(ingested, m);
        assert!(report.skipped.is_empty());
        // Refuses to write into a non-empty directory.
        assert!(generate_toy_dataset(&tiny_spec(), 1, &root).is_err());
    }

    #[test]
    fn ingest_skips_broken_samples() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let m = generate_toy_dataset(&tiny_spec(), 3, &root).unwrap();
        std::fs::remove_file(m.samples[0].dir(&root).join(AUDIO_FILE)).unwrap();
        let frame = m.samples[1].dir(&root).join("frames/000001.png");
        let mut bytes = std::fs::read(&frame).unwrap();
        let last = bytes.len() - 20;
        bytes[last] ^= 0x01;
        std::fs::write(&frame, bytes).unwrap();
        let (ingested, report) = ingest(&root).unwrap();
        assert_eq!(ingested.samples.len(), 1);
        let skipped: Vec<&str> = report.skipped.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(skipped, vec![m.samples[0].id.as_str(), m.samples[1].id.as_str()]);
        assert!(report.skipped[1].reason.contains("checksum"));
        assert!(matches!(load_manifest(&root), Err(Error::Io { .. }) | Err(Error::Checksum { .. })));
    }
}
