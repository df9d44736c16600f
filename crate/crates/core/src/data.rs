//! Dataset ingestion (IDX images, CSV feature tables) and incremental class
//! schedules.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Option<Vec<u64>>,
    /// Sorted distinct labels.
    pub class_ids: Vec<u64>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Option<Vec<u64>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} feature rows",
                    l.len(),
                    features.nrows()
                )));
            }
        }
        let class_ids = labels
            .as_ref()
            .map(|l| l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
            .unwrap_or_default();
        Ok(Self {
            features,
            labels,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        Dataset::new(self.features.select(Axis(0), rows), labels)
    }
}

/// Header and payload of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse(format!("{what}: truncated header at byte {offset}")))
}

/// Parse an unsigned-byte IDX tensor with the expected magic.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, what: &str) -> Result<IdxTensor> {
    let magic = read_u32(bytes, 0, what)?;
    if magic != expected_magic {
        return Err(Error::Parse(format!(
            "{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<u32> = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i, what))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * ndim;
    let size: usize = dims.iter().map(|&d| d as usize).product();
    let payload = &bytes[header.min(bytes.len())..];
    if payload.len() < size {
        return Err(Error::Parse(format!(
            "{what}: truncated payload, {} of {size} bytes present",
            payload.len()
        )));
    }
    if payload.len() > size {
        return Err(Error::Parse(format!(
            "{what}: {} trailing bytes after payload",
            payload.len() - size
        )));
    }
    Ok(IdxTensor {
        magic,
        dims,
        payload: payload.to_vec(),
    })
}

pub fn encode_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.payload.len());
    out.extend_from_slice(&tensor.magic.to_be_bytes());
    for d in &tensor.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&tensor.payload);
    out
}

/// Pixel `p` ↦ 2·p/255 − 1.
pub fn normalize_pixel(p: u8) -> f64 {
    2.0 * (p as f64 / 255.0) - 1.0
}

/// Load an IDX image file and its label file; images are flattened and
/// scaled to [−1, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&fs::read(images)?, IDX_IMAGES_MAGIC, "images")?;
    let lab = parse_idx(&fs::read(labels)?, IDX_LABELS_MAGIC, "labels")?;
    let n = img.dims[0] as usize;
    if lab.dims[0] as usize != n {
        return Err(Error::Parse(format!(
            "{n} images but {} labels",
            lab.dims[0]
        )));
    }
    let width: usize = img.dims[1..].iter().map(|&d| d as usize).product();
    let features = Array2::from_shape_vec(
        (n, width),
        img.payload.iter().map(|&p| normalize_pixel(p)).collect(),
    )
    .map_err(|e| Error::Parse(e.to_string()))?;
    Dataset::new(features, Some(lab.payload.iter().map(|&l| l as u64).collect()))
}

/// Numeric CSV with a header row. The named label column, when given, is
/// parsed as non-negative integers and removed from the features.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Parse(format!("label column {name:?} not in header")))?,
        ),
        None => None,
    };
    let width = headers.len() - usize::from(label_idx.is_some());
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let line = i + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse(format!(
                "row {line} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(j) == label_idx {
                let l: u64 = cell
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {line}: label {cell:?} is not a non-negative integer")))?;
                labels.push(l);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Parse(format!("row {line}, column {:?}: {cell:?} is not numeric", &headers[j]))
                })?;
                values.push(v);
            }
        }
        rows += 1;
    }
    let features = Array2::from_shape_vec((rows, width), values).map_err(|e| Error::Parse(e.to_string()))?;
    Dataset::new(features, label_idx.map(|_| labels))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub classes: Vec<u64>,
}

/// Classes made available to training from given epochs on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IncrementalSchedule {
    pub milestones: Vec<Milestone>,
}

impl IncrementalSchedule {
    pub fn new(milestones: Vec<Milestone>) -> Result<Self> {
        let s = Self { milestones };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.milestones.is_empty() {
            return Err(Error::Config("schedule needs at least one milestone".into()));
        }
        for w in self.milestones.windows(2) {
            if w[1].epoch <= w[0].epoch {
                return Err(Error::Config(format!(
                    "milestone epochs must increase strictly ({} then {})",
                    w[0].epoch, w[1].epoch
                )));
            }
            let next: BTreeSet<u64> = w[1].classes.iter().copied().collect();
            if !w[0].classes.iter().all(|c| next.contains(c)) {
                return Err(Error::Config(format!(
                    "milestone at epoch {} drops classes present before it",
                    w[1].epoch
                )));
            }
        }
        Ok(())
    }

    /// Classes active at `epoch`; before the first milestone its classes apply.
    pub fn active_classes(&self, epoch: usize) -> BTreeSet<u64> {
        let m = self
            .milestones
            .iter()
            .rev()
            .find(|m| m.epoch <= epoch)
            .unwrap_or(&self.milestones[0]);
        m.classes.iter().copied().collect()
    }

    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.milestones.iter().map(|m| m.epoch).collect()
    }
}

/// Rows of `dataset` active at `epoch`, together with their original indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub rows: Vec<usize>,
    pub data: Dataset,
}

pub fn apply_schedule(dataset: &Dataset, schedule: &IncrementalSchedule, epoch: usize) -> Result<Subset> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("an incremental schedule needs labeled data".into()))?;
    let active = schedule.active_classes(epoch);
    let rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| active.contains(l))
        .map(|(i, _)| i)
        .collect();
    let data = dataset.select(&rows)?;
    Ok(Subset { rows, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn two_image_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend([0, 255, 128, 1, 2, 3, 10, 20, 30, 40, 50, 60]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
    }

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = two_image_fixture();
        let ds = load_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &lab)).unwrap();
        assert_eq!(ds.features.dim(), (2, 6));
        assert_eq!(ds.labels, Some(vec![7, 3]));
        assert_eq!(ds.class_ids, vec![3, 7]);
        assert_eq!(ds.features[(0, 0)], -1.0);
        assert_eq!(ds.features[(0, 1)], 1.0);
        assert_eq!(ds.features[(1, 5)], normalize_pixel(60));
        assert!(ds.features.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn idx_header_round_trips() {
        let (img, _) = two_image_fixture();
        let t = parse_idx(&img, IDX_IMAGES_MAGIC, "images").unwrap();
        assert_eq!(t.dims, vec![2, 2, 3]);
        assert_eq!(encode_idx(&t), img);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = two_image_fixture();
        let lab_path = write(dir.path(), "l", &lab);
        img[3] = 2;
        let err = load_idx(&write(dir.path(), "bad", &img), &lab_path).unwrap_err();
        assert!(err.to_string().contains("0x00000802"), "{err}");
        let (img, _) = two_image_fixture();
        let err = load_idx(&write(dir.path(), "short", &img[..img.len() - 1]), &lab_path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let one_label = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        let err = load_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l1", &one_label)).unwrap_err();
        assert!(err.to_string().contains("2 images but 1 labels"), "{err}");
        assert!(parse_idx(&[0, 0], IDX_LABELS_MAGIC, "labels").is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip(n in 0u32..4, r in 1u32..4, c in 1u32..4, seed in any::<u64>()) {
            let size = (n * r * c) as usize;
            let payload: Vec<u8> = (0..size).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let t = IdxTensor { magic: IDX_IMAGES_MAGIC, dims: vec![n, r, c], payload };
            let bytes = encode_idx(&t);
            prop_assert_eq!(parse_idx(&bytes, IDX_IMAGES_MAGIC, "images").unwrap(), t);
        }
    }

    #[test]
    fn csv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", b"x,y\n1,2\n3.5,-4\n0,1e-3\n");
        let ds = load_csv(&p, None).unwrap();
        assert_eq!(ds.features, array![[1.0, 2.0], [3.5, -4.0], [0.0, 1e-3]]);
        assert!(ds.labels.is_none());

        let p = write(dir.path(), "b.csv", b"x,label,y\n1,2,3\n4,0,6\n");
        let ds = load_csv(&p, Some("label")).unwrap();
        assert_eq!(ds.features, array![[1.0, 3.0], [4.0, 6.0]]);
        assert_eq!(ds.labels, Some(vec![2, 0]));

        let p = write(dir.path(), "c.csv", b"x,y\n1,2\n3\n5,6\n");
        let err = load_csv(&p, None).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");

        let p = write(dir.path(), "d.csv", b"x,y\n1,abc\n");
        assert!(load_csv(&p, None).is_err());
        let p = write(dir.path(), "e.csv", b"x,y\n1,2\n");
        assert!(load_csv(&p, Some("label")).is_err());
    }

    fn mnist_schedule() -> IncrementalSchedule {
        IncrementalSchedule::new(vec![
            Milestone { epoch: 0, classes: vec![0, 1, 2] },
            Milestone { epoch: 30, classes: (0..5).collect() },
            Milestone { epoch: 60, classes: (0..7).collect() },
            Milestone { epoch: 90, classes: (0..10).collect() },
        ])
        .unwrap()
    }

    fn labeled(labels: Vec<u64>) -> Dataset {
        let n = labels.len();
        Dataset::new(Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64), Some(labels)).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let labels: Vec<u64> = (0..100).map(|i| (i * 7 % 10) as u64).collect();
        let ds = labeled(labels.clone());
        let s = mnist_schedule();
        let early = apply_schedule(&ds, &s, 0).unwrap();
        assert!(early.data.labels.as_ref().unwrap().iter().all(|&l| l <= 2));
        let direct: Vec<usize> = (0..100).filter(|&i| labels[i] <= 4).collect();
        let mid = apply_schedule(&ds, &s, 45).unwrap();
        assert_eq!(mid.rows, direct);
        assert_eq!(mid.data.features, ds.features.select(Axis(0), &direct));
        let late = apply_schedule(&ds, &s, 120).unwrap();
        assert_eq!(late.data, ds);

        let late_start = IncrementalSchedule::new(vec![Milestone { epoch: 5, classes: vec![1] }]).unwrap();
        assert_eq!(late_start.active_classes(0), [1].into_iter().collect());

        let unlabeled = Dataset::new(Array2::zeros((3, 2)), None).unwrap();
        assert!(apply_schedule(&unlabeled, &s, 0).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(IncrementalSchedule::new(vec![]).is_err());
        assert!(IncrementalSchedule::new(vec![
            Milestone { epoch: 3, classes: vec![0] },
            Milestone { epoch: 3, classes: vec![0, 1] },
        ])
        .is_err());
        assert!(IncrementalSchedule::new(vec![
            Milestone { epoch: 0, classes: vec![0, 1] },
            Milestone { epoch: 3, classes: vec![1] },
        ])
        .is_err());
    }

    proptest! {
        #[test]
        fn schedule_yields_subsets(labels in proptest::collection::vec(0u64..10, 1..80), epoch in 0usize..150) {
            let ds = labeled(labels);
            let s = mnist_schedule();
            let sub = apply_schedule(&ds, &s, epoch).unwrap();
            prop_assert!(sub.rows.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(sub.rows.iter().all(|&r| r < ds.len()));
            for (k, &r) in sub.rows.iter().enumerate() {
                prop_assert_eq!(sub.data.features.row(k), ds.features.row(r));
            }
            prop_assert_eq!(apply_schedule(&ds, &s, 90).unwrap().data, ds.clone());
        }
    }
}
