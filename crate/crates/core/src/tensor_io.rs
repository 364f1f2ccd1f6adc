//! Binary tensor container and dataset manifests.
//!
//! Tensor file layout (all integers and floats little-endian):
//!
//! ```text
//! magic  "PBTNSR01"       8 bytes
//! rank   u8               1 byte, 1..=4
//! dims   rank x u32       4 * rank bytes
//! data   f32 x prod(dims) row-major
//! ```
//!
//! Manifests are tab-separated text, one record per line:
//!
//! ```text
//! image_id <TAB> label <TAB> H <TAB> W <TAB> mask_path|- <TAB> level:path[,level:path...]
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Relative paths are
//! resolved against the directory containing the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PBTNSR01";
pub const MAX_RANK: usize = 4;

/// Dense row-major f32 tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::validation(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn from_array2(a: &Array2<f32>) -> Result<Self> {
        let (r, c) = a.dim();
        Tensor::new(vec![r, c], a.iter().copied().collect())
    }

    pub fn from_array3(a: &Array3<f32>) -> Result<Self> {
        let (x, y, z) = a.dim();
        Tensor::new(vec![x, y, z], a.iter().copied().collect())
    }

    pub fn to_array2(&self) -> Result<Array2<f32>> {
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), self.data.clone())
                .expect("shape checked on construction")),
            _ => Err(Error::validation(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f32>> {
        match self.shape[..] {
            [x, y, z] => Ok(Array3::from_shape_vec((x, y, z), self.data.clone())
                .expect("shape checked on construction")),
            _ => Err(Error::validation(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Serializes into the container byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.rank() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the container byte layout. `path` is only used for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(format("bad magic".into()));
        }
        let rank = *bytes
            .get(MAGIC.len())
            .ok_or_else(|| format("missing rank byte".into()))? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(format(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        let header_len = MAGIC.len() + 1 + 4 * rank;
        if bytes.len() < header_len {
            return Err(format("header shorter than declared rank".into()));
        }
        let shape: Vec<usize> = bytes[MAGIC.len() + 1..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(format(format!("zero-sized dimension in {shape:?}")));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[header_len..];
        let expected = numel * 4;
        if payload.len() != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::validation(format!(
            "rank {} outside 1..={MAX_RANK}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::validation(format!(
            "dimensions must be in 1..=u32::MAX, got {shape:?}"
        )));
    }
    Ok(())
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&t.to_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Binary ground-truth mask, `true` marks anomalous pixels.
pub type Mask = Array2<bool>;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// 0 nominal, 1 anomalous.
    pub label: u8,
    /// Pixel resolution (H, W) of the original image.
    pub original_size: (usize, usize),
    pub mask_path: Option<PathBuf>,
    pub mask: Option<Mask>,
    /// Hierarchy level -> feature tensor file.
    pub feature_paths: BTreeMap<usize, PathBuf>,
}

impl ManifestEntry {
    pub fn is_anomalous(&self) -> bool {
        self.label == 1
    }

    /// Mask to evaluate against: the loaded mask, or all-normal when none was given.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Array2::from_elem(self.original_size, false))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps the entries at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            split: self.split,
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

/// Image ids end up in file names and CSV cells.
fn validate_image_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\', ',', '\t', '\n', '"']) || id == "." || id == ".." {
        return Err(Error::validation(format!(
            "image id {id:?} must be non-empty and free of path separators, commas, quotes and tabs"
        )));
    }
    Ok(())
}

pub fn load_mask(path: &Path, size: (usize, usize)) -> Result<Mask> {
    let t = read_tensor(path)?;
    let a = match t.shape() {
        [h, w] => Array2::from_shape_vec((*h, *w), t.into_data()).expect("checked shape"),
        [1, h, w] => Array2::from_shape_vec((*h, *w), t.into_data()).expect("checked shape"),
        s => {
            return Err(Error::validation(format!(
                "mask {} has shape {s:?}, expected (H, W)",
                path.display()
            )))
        }
    };
    if a.dim() != size {
        return Err(Error::validation(format!(
            "mask {} has size {:?} but the manifest declares {:?}",
            path.display(),
            a.dim(),
            size
        )));
    }
    Ok(a.mapv(|v| v >= 0.5))
}

pub fn load_manifest(path: impl AsRef<Path>, split: Split) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, split).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_manifest(text: &str, base: &Path, split: Split) -> Result<DatasetManifest> {
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let must_exist = |p: &Path, line: usize| -> Result<()> {
        if p.is_file() {
            Ok(())
        } else {
            Err(Error::io(
                p,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("referenced on manifest line {line} does not exist"),
                ),
            ))
        }
    };

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut levels: Option<Vec<usize>> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::validation(format!("line {lineno}: {msg}"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let image_id = fields[0].to_string();
        validate_image_id(&image_id).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(image_id.clone()) {
            return Err(bad(format!("duplicate image id {image_id:?}")));
        }
        let label: u8 = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        if split == Split::Train && label != 0 {
            return Err(bad(format!("train entry {image_id:?} has label 1")));
        }
        let dim = |s: &str, name: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(bad(format!("{name} must be a positive integer, got {s:?}"))),
            }
        };
        let original_size = (dim(fields[2], "H")?, dim(fields[3], "W")?);

        let (mask_path, mask) = if fields[4] == "-" {
            (None, None)
        } else {
            let p = resolve(fields[4]);
            must_exist(&p, lineno)?;
            let m = load_mask(&p, original_size)?;
            (Some(p), Some(m))
        };

        let mut feature_paths = BTreeMap::new();
        for item in fields[5].split(',') {
            let (lvl, p) = item
                .split_once(':')
                .ok_or_else(|| bad(format!("feature entry {item:?} is not level:path")))?;
            let lvl: usize = lvl
                .parse()
                .map_err(|_| bad(format!("hierarchy level {lvl:?} is not an integer")))?;
            let p = resolve(p);
            must_exist(&p, lineno)?;
            if feature_paths.insert(lvl, p).is_some() {
                return Err(bad(format!("hierarchy level {lvl} listed twice")));
            }
        }
        let these: Vec<usize> = feature_paths.keys().copied().collect();
        if these.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(bad(format!("hierarchy levels {these:?} are not contiguous")));
        }
        match &levels {
            None => levels = Some(these),
            Some(l) if *l != these => {
                return Err(bad(format!(
                    "hierarchy levels {these:?} differ from earlier entries {l:?}"
                )))
            }
            _ => {}
        }

        entries.push(ManifestEntry {
            image_id,
            label,
            original_size,
            mask_path,
            mask,
            feature_paths,
        });
    }
    Ok(DatasetManifest { split, entries })
}

/// Writes a manifest; paths are written relative to the manifest directory when possible.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    let mut out = String::new();
    out.push_str(&format!(
        "# split={}\n# image_id\tlabel\tH\tW\tmask\tlevel:path[,level:path]\n",
        manifest.split
    ));
    for e in &manifest.entries {
        let feats: Vec<String> = e
            .feature_paths
            .iter()
            .map(|(l, p)| format!("{l}:{}", rel(p)))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.image_id,
            e.label,
            e.original_size.0,
            e.original_size.1,
            e.mask_path.as_deref().map(rel).unwrap_or_else(|| "-".into()),
            feats.join(",")
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_tensor_layout() {
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let b = t.to_bytes();
        assert_eq!(b.len(), 33);
        assert_eq!(&b[..8], b"PBTNSR01");
        assert_eq!(b[8], 2);
        assert_eq!(&b[9..17], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(Tensor::from_bytes(&b, Path::new("x")).unwrap(), t);
    }

    #[test]
    fn one_point_five_payload() {
        let t = Tensor::new(vec![1], vec![1.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[b.len() - 4..], &[0x00, 0x00, 0xC0, 0x3F]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::Validation(_))
        ));
        let mut b = Tensor::new(vec![1], vec![1.0]).unwrap().to_bytes();
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            Tensor::from_bytes(&b, Path::new("x")),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tnsr");
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Truncated { expected: 12, found: 11, .. })));

        let mut bytes = t.to_bytes();
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..6, 1..=4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| f32::from_bits(rng.random::<u32>()))
                .map(|v| if v.is_finite() { v } else { 0.25 })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn seeded_round_trips_3x4x5() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tnsr");
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..60).map(|_| rng.random_range(-1e3f32..1e3)).collect();
            let t = Tensor::new(vec![3, 4, 5], data).unwrap();
            write_tensor(&t, &p).unwrap();
            assert_eq!(read_tensor(&p).unwrap(), t);
        }
    }

    fn write_feature(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        write_tensor(&Tensor::new(vec![1, 2, 2], vec![0.0; 4]).unwrap(), &p).unwrap();
        p
    }

    #[test]
    fn manifest_train_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_feature(dir.path(), "a.L2.tnsr");
        write_feature(dir.path(), "a.L3.tnsr");
        write_feature(dir.path(), "b.L2.tnsr");
        write_feature(dir.path(), "b.L3.tnsr");
        let mp = dir.path().join("train.manifest");
        fs::write(
            &mp,
            "# comment\na\t0\t8\t8\t-\t2:a.L2.tnsr,3:a.L3.tnsr\nb\t0\t8\t8\t-\t2:b.L2.tnsr,3:b.L3.tnsr\n",
        )
        .unwrap();
        let m = load_manifest(&mp, Split::Train).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].feature_paths[&2], dir.path().join("a.L2.tnsr"));
        assert_eq!(m, load_manifest(&mp, Split::Train).unwrap());

        fs::write(&mp, "a\t1\t8\t8\t-\t2:a.L2.tnsr\n").unwrap();
        assert!(matches!(load_manifest(&mp, Split::Train), Err(Error::Validation(_))));

        fs::write(&mp, "a\t0\t8\t8\t-\t2:a.L2.tnsr\na\t0\t8\t8\t-\t2:b.L2.tnsr\n").unwrap();
        let err = load_manifest(&mp, Split::Train).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        fs::write(&mp, "a\t0\t8\t8\t-\t2:missing.tnsr\n").unwrap();
        assert!(matches!(load_manifest(&mp, Split::Train), Err(Error::Io { .. })));

        fs::write(&mp, "a\t0\t8\t8\t-\t1:a.L2.tnsr,3:a.L3.tnsr\n").unwrap();
        assert!(load_manifest(&mp, Split::Train).is_err());
    }

    #[test]
    fn manifest_mask_is_binarized() {
        let dir = tempfile::tempdir().unwrap();
        write_feature(dir.path(), "t.L2.tnsr");
        let raw = vec![0.0, 0.49, 0.5, 1.0, 0.9, 0.1];
        write_tensor(
            &Tensor::new(vec![2, 3], raw.clone()).unwrap(),
            dir.path().join("t.mask.tnsr"),
        )
        .unwrap();
        let mp = dir.path().join("test.manifest");
        fs::write(&mp, "t\t1\t2\t3\tt.mask.tnsr\t2:t.L2.tnsr\n").unwrap();
        let m = load_manifest(&mp, Split::Test).unwrap();
        let expected =
            Array2::from_shape_vec((2, 3), vec![false, false, true, true, true, false]).unwrap();
        assert_eq!(m.entries[0].mask.as_ref().unwrap(), &expected);

        fs::write(&mp, "t\t1\t3\t3\tt.mask.tnsr\t2:t.L2.tnsr\n").unwrap();
        assert!(load_manifest(&mp, Split::Test).is_err());
    }

    #[test]
    fn manifest_writer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let f = write_feature(dir.path(), "x.L2.tnsr");
        let m = DatasetManifest {
            split: Split::Test,
            entries: vec![ManifestEntry {
                image_id: "x".into(),
                label: 0,
                original_size: (4, 4),
                mask_path: None,
                mask: None,
                feature_paths: BTreeMap::from([(2, f)]),
            }],
        };
        let mp = dir.path().join("m.manifest");
        write_manifest(&m, &mp).unwrap();
        assert_eq!(load_manifest(&mp, Split::Test).unwrap(), m);
    }
}
