//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.txt` and `payload.bin`. The blob is the
//! concatenation of every sample's `[T, ch, H, W]` frames as little-endian
//! `f32`, with no padding between records.
//!
//! ```text
//! attrfuse-manifest 1
//! name: rgb_toy
//! dataset_id: rgb_toy
//! modality: rgb
//! height: 64
//! width: 32
//! channels: 3
//! frames: 1
//! attributes: hat,bag,...
//! train: 200
//! val: 50
//! positive_rates: 0.51 0.48 ...
//! blob: payload.bin
//! blob_bytes: 9830400
//! blob_sha256: <hex>
//! samples:
//! <uid> <train|val> <label bits> <offset> <length> <sha256 prefix>
//! ```
//!
//! Positive rates are written with shortest round-trip formatting and must
//! equal a recount from the training labels.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::spec::{DatasetSpec, SampleRecord, Split};
use super::synthetic::RenderedSample;
use crate::embeddings::ModalityKind;
use crate::error::{data_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "payload.bin";
const MAGIC: &str = "attrfuse-manifest 1";

/// A dataset loaded from disk with its blob held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<SampleRecord>,
    pub dir: PathBuf,
    blob: Arc<Vec<u8>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// `[T, ch, H, W]` frames of one record.
    pub fn frames(&self, record: &SampleRecord) -> Result<Tensor> {
        let s = &self.spec;
        let start = record.offset as usize;
        let bytes = &self.blob[start..start + record.length as usize];
        let data: Vec<Scalar> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as Scalar)
            .collect();
        Tensor::new(&[s.frame_count, s.channels, s.height, s.width], data)
    }

    pub fn labels_f(&self, record: &SampleRecord) -> Vec<Scalar> {
        record.labels.iter().map(|&b| b as Scalar).collect()
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn short_sha(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// `r_j` = fraction of training samples with attribute `j` present.
pub fn positive_rates_of<'a>(
    attribute_count: usize,
    train_labels: impl Iterator<Item = &'a [u8]>,
) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; attribute_count];
    let mut n = 0usize;
    for labels in train_labels {
        if labels.len() != attribute_count {
            return Err(data_err!(
                "label width {} does not match {attribute_count} attributes",
                labels.len()
            ));
        }
        n += 1;
        for (c, &l) in counts.iter_mut().zip(labels) {
            *c += l as usize;
        }
    }
    if n == 0 {
        return Err(data_err!("training split is empty; positive rates undefined"));
    }
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Positive rates recounted from the dataset's training split.
pub fn positive_rates(dataset: &Dataset) -> Result<Vec<f64>> {
    positive_rates_of(
        dataset.spec.attribute_count(),
        dataset.split(Split::Train).map(|r| r.labels.as_slice()),
    )
}

/// Serializes rendered samples into `dir` and returns the loaded dataset.
pub fn write_dataset(template: &DatasetSpec, samples: &[RenderedSample], dir: &Path) -> Result<Dataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = template.attribute_count();
    if let Some(bad) = template
        .attribute_names
        .iter()
        .find(|n| n.is_empty() || n.contains(|ch: char| ch == ',' || ch.is_whitespace()))
    {
        return Err(data_err!("attribute name {bad:?} must be non-empty without commas or spaces"));
    }
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let bytes: Vec<u8> = s.frames.iter().flat_map(|v| v.to_le_bytes()).collect();
        records.push(SampleRecord {
            sample_uid: s.sample_uid,
            split: s.split,
            labels: s.labels.clone(),
            offset: blob.len() as u64,
            length: bytes.len() as u64,
            checksum: short_sha(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let mut spec = template.clone();
    spec.train_size = records.iter().filter(|r| r.split == Split::Train).count();
    spec.val_size = records.len() - spec.train_size;
    spec.positive_rates = positive_rates_of(
        c,
        records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.labels.as_slice()),
    )?;

    let mut text = String::new();
    let _ = writeln!(text, "{MAGIC}");
    let _ = writeln!(text, "name: {}", spec.name);
    let _ = writeln!(text, "dataset_id: {}", spec.dataset_id);
    let _ = writeln!(text, "modality: {}", spec.modality);
    let _ = writeln!(text, "height: {}", spec.height);
    let _ = writeln!(text, "width: {}", spec.width);
    let _ = writeln!(text, "channels: {}", spec.channels);
    let _ = writeln!(text, "frames: {}", spec.frame_count);
    let _ = writeln!(text, "attributes: {}", spec.attribute_names.join(","));
    let _ = writeln!(text, "train: {}", spec.train_size);
    let _ = writeln!(text, "val: {}", spec.val_size);
    let rates: Vec<String> = spec.positive_rates.iter().map(|r| format!("{r:?}")).collect();
    let _ = writeln!(text, "positive_rates: {}", rates.join(" "));
    let _ = writeln!(text, "blob: {BLOB_FILE}");
    let _ = writeln!(text, "blob_bytes: {}", blob.len());
    let _ = writeln!(text, "blob_sha256: {}", sha_hex(&blob));
    let _ = writeln!(text, "samples:");
    for r in &records {
        let bits: String = r.labels.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        let _ = writeln!(
            text,
            "{} {} {} {} {} {}",
            r.sample_uid,
            r.split.as_str(),
            bits,
            r.offset,
            r.length,
            r.checksum
        );
    }
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(Dataset {
        spec,
        records,
        dir: dir.to_path_buf(),
        blob: Arc::new(blob),
    })
}

/// Loads a dataset directory (or a path to its manifest file) and verifies
/// the blob against every record.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(data_err!("{}: not a dataset manifest", manifest_path.display()));
    }
    let mut header: HashMap<&str, &str> = HashMap::new();
    for line in lines.by_ref() {
        if line == "samples:" {
            break;
        }
        let (k, v) = line
            .split_once(": ")
            .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
            .ok_or_else(|| data_err!("malformed manifest line {line:?}"))?;
        header.insert(k, v);
    }
    let field = |k: &str| {
        header
            .get(k)
            .copied()
            .ok_or_else(|| data_err!("{}: missing field {k}", manifest_path.display()))
    };
    let num = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| data_err!("{}: field {k} is not an integer", manifest_path.display()))
    };
    let attributes: Vec<String> = field("attributes")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let positive: Vec<f64> = field("positive_rates")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| data_err!("bad positive rate {s:?}")))
        .collect::<Result<_>>()?;
    let mut spec = DatasetSpec::new(
        field("dataset_id")?,
        ModalityKind::parse(field("modality")?)?,
        attributes,
        num("frames")?,
        (num("height")?, num("width")?, num("channels")?),
    );
    spec.name = field("name")?.to_string();
    spec.train_size = num("train")?;
    spec.val_size = num("val")?;
    spec.positive_rates = positive;
    spec.validate()?;

    let c = spec.attribute_count();
    let payload_len = (spec.frame_len() * 4) as u64;
    let mut records = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(data_err!("malformed sample line {line:?}"));
        }
        let uid: u64 = cols[0]
            .parse()
            .map_err(|_| data_err!("bad sample uid {:?}", cols[0]))?;
        let labels: Vec<u8> = cols[2]
            .chars()
            .map(|ch| match ch {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(data_err!("sample {uid}: label bits must be 0/1")),
            })
            .collect::<Result<_>>()?;
        if labels.len() != c {
            return Err(data_err!(
                "sample {uid}: label width {} but manifest declares {c} attributes",
                labels.len()
            ));
        }
        let parse_u64 = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| data_err!("sample {uid}: bad integer {s:?}"))
        };
        records.push(SampleRecord {
            sample_uid: uid,
            split: Split::parse(cols[1])?,
            labels,
            offset: parse_u64(cols[3])?,
            length: parse_u64(cols[4])?,
            checksum: cols[5].to_string(),
        });
    }
    let train = records.iter().filter(|r| r.split == Split::Train).count();
    if train != spec.train_size || records.len() - train != spec.val_size {
        return Err(data_err!(
            "{}: split sizes disagree with sample lines",
            manifest_path.display()
        ));
    }

    let blob_path = dir.join(field("blob")?);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let corrupt = |uid: u64, reason: String| Error::Corruption {
        path: blob_path.clone(),
        sample_uid: uid,
        reason,
    };
    for r in &records {
        if r.length != payload_len {
            return Err(corrupt(
                r.sample_uid,
                format!("payload length {} != expected {payload_len}", r.length),
            ));
        }
        if r.offset + r.length > blob.len() as u64 {
            return Err(corrupt(
                r.sample_uid,
                format!(
                    "payload {}..{} beyond blob end {}",
                    r.offset,
                    r.offset + r.length,
                    blob.len()
                ),
            ));
        }
    }
    let declared = num("blob_bytes")?;
    if sha_hex(&blob) != field("blob_sha256")? || declared != blob.len() {
        let culprit = records
            .iter()
            .find(|r| {
                short_sha(&blob[r.offset as usize..(r.offset + r.length) as usize]) != r.checksum
            })
            .map_or(0, |r| r.sample_uid);
        return Err(corrupt(
            culprit,
            format!("blob checksum or size mismatch (declared {declared} bytes, found {})", blob.len()),
        ));
    }
    let recount = positive_rates_of(
        c,
        records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.labels.as_slice()),
    )?;
    if recount != spec.positive_rates {
        return Err(data_err!(
            "{}: positive rates disagree with a recount of the training labels",
            manifest_path.display()
        ));
    }
    Ok(Dataset {
        spec,
        records,
        dir,
        blob: Arc::new(blob),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};

    fn syn() -> SyntheticSpec {
        let mut spec = DatasetSpec::new(
            "vid",
            ModalityKind::Video,
            (0..6).map(|i| format!("a{i}")).collect(),
            5,
            (64, 32, 3),
        );
        spec.train_size = 10;
        spec.val_size = 3;
        SyntheticSpec {
            spec,
            patch: 16,
            target_rates: vec![0.5, 0.3, 0.7, 0.1, 0.9, 0.5],
        }
    }

    #[test]
    fn round_trip_is_field_for_field() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate_synthetic(&syn(), 605, dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(written.spec, loaded.spec);
        assert_eq!(written.records, loaded.records);
        assert_eq!(positive_rates(&loaded).unwrap(), loaded.spec.positive_rates);
        let f = loaded.frames(&loaded.records[2]).unwrap();
        assert_eq!(f.shape(), &[5, 3, 64, 32]);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&syn(), 605, a.path()).unwrap();
        generate_synthetic(&syn(), 605, b.path()).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&syn(), 605, dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 100]).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Corruption { sample_uid, .. }) => {
                assert_eq!(sample_uid, ds.records.last().unwrap().sample_uid)
            }
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&syn(), 605, dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        let target = &ds.records[4];
        bytes[target.offset as usize + 17] ^= 0xff;
        fs::write(&blob, &bytes).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Corruption { sample_uid, .. }) => assert_eq!(sample_uid, target.sample_uid),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn label_width_mismatch_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&syn(), 605, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let text: Vec<String> = text
            .lines()
            .map(|l| {
                if l.starts_with("attributes: ") {
                    "attributes: a0,a1,a2,a3,a4".to_string()
                } else if let Some(r) = l.strip_prefix("positive_rates: ") {
                    let mut v: Vec<&str> = r.split(' ').collect();
                    v.pop();
                    format!("positive_rates: {}", v.join(" "))
                } else {
                    l.to_string()
                }
            })
            .collect();
        fs::write(&path, text.join("\n")).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Data(msg)) => assert!(msg.contains("label width"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn rate_counting() {
        let labels: Vec<Vec<u8>> = vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 1, 0], vec![0, 1, 0]];
        let r = positive_rates_of(3, labels.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(r, vec![0.5, 1.0, 0.0]);
        assert!(positive_rates_of(3, std::iter::empty()).is_err());
    }
}
