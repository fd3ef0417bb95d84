//! Dataset ingestion and non-IID client partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ClassId;
use crate::modelzoo::DatasetProfile;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Train and held-out test images (`[n, c, h, w]`, pixels in `[0, 1]`)
/// with zero-based labels.
#[derive(Clone, Debug)]
pub struct DatasetBundle<T> {
    pub profile: DatasetProfile,
    pub train_images: Tensor<T>,
    pub train_labels: Vec<ClassId>,
    pub test_images: Tensor<T>,
    pub test_labels: Vec<ClassId>,
}

impl<T: Scalar> DatasetBundle<T> {
    /// Gathers the given train indices into a batch.
    pub fn train_batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<ClassId>)> {
        let x = Tensor::stack(
            &self.profile.input,
            indices.iter().map(|&i| self.train_images.sample(i)),
        )?;
        Ok((x, indices.iter().map(|&i| self.train_labels[i]).collect()))
    }
}

/// Optional per-split sample caps applied after loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeCap {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Locates `<stem>` or `<stem>.gz` under `dir`.
fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(ingest_err(&plain, "file not found (also tried .gz)"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let mut bytes = Vec::new();
    let res = if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        let mut f = file;
        f.read_to_end(&mut bytes)
    };
    res.map_err(|e| ingest_err(path, e.to_string()))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest_err(path, "truncated header"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(ingest_err(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(ingest_err(
            path,
            format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        ));
    }
    Ok((n, rows, cols, body.to_vec()))
}

/// Parses an IDX1 label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(ingest_err(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(ingest_err(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

fn load_split<T: Scalar>(dir: &Path, prefix: &str, profile: &DatasetProfile) -> Result<(Tensor<T>, Vec<ClassId>)> {
    let img_path = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = read_idx_images(&img_path)?;
    let [c, h, w] = profile.input;
    if c != 1 || rows != h || cols != w {
        return Err(ingest_err(
            &img_path,
            format!("images are 1×{rows}×{cols}, profile expects {c}×{h}×{w}"),
        ));
    }
    let labels = read_idx_labels(&lbl_path)?;
    if labels.len() != n {
        return Err(ingest_err(&lbl_path, format!("{} labels for {n} images", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= profile.classes) {
        return Err(ingest_err(
            &lbl_path,
            format!("label {bad} outside 0..{}", profile.classes),
        ));
    }
    let scale = T::of(1.0 / 255.0);
    let data = pixels.into_iter().map(|p| T::of_usize(p as usize) * scale).collect();
    let x = Tensor::from_vec(&[n, c, h, w], data)?;
    Ok((x, labels.into_iter().map(|l| l as ClassId).collect()))
}

/// Deterministic subset of `n` items, returned in ascending order.
fn subsample(n: usize, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    match cap {
        Some(c) if c < n => {
            idx.shuffle(rng);
            idx.truncate(c);
            idx.sort_unstable();
            idx
        }
        _ => idx,
    }
}

fn select<T: Scalar>(x: &Tensor<T>, y: &[ClassId], idx: &[usize]) -> Result<(Tensor<T>, Vec<ClassId>)> {
    let shape = x.sample_shape().to_vec();
    Ok((
        Tensor::stack(&shape, idx.iter().map(|&i| x.sample(i)))?,
        idx.iter().map(|&i| y[i]).collect(),
    ))
}

/// Loads `<root>/<profile.name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`
/// (the upstream MNIST layout), scales pixels to `[0, 1]` and applies the
/// optional caps with a seeded subsample.
pub fn load_dataset<T: Scalar>(
    profile: &DatasetProfile,
    root: &Path,
    cap: SizeCap,
    seed: u64,
) -> Result<DatasetBundle<T>> {
    let dir = root.join(&profile.name);
    let (train_x, train_y) = load_split(&dir, "train", profile)?;
    let (test_x, test_y) = load_split(&dir, "t10k", profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tr = subsample(train_y.len(), cap.train, &mut rng);
    let te = subsample(test_y.len(), cap.test, &mut rng);
    let (train_images, train_labels) = select(&train_x, &train_y, &tr)?;
    let (test_images, test_labels) = select(&test_x, &test_y, &te)?;
    let present: BTreeSet<ClassId> = train_labels.iter().copied().collect();
    if present.len() < profile.classes {
        log::warn!(
            "training split covers only {} of {} classes",
            present.len(),
            profile.classes
        );
    }
    Ok(DatasetBundle {
        profile: profile.clone(),
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

/// A procedurally generated dataset: each class is a fixed random template
/// image plus per-sample noise, clipped to `[0, 1]`. Used where real image
/// files are not wanted (tests, smoke runs).
pub fn synthetic_bundle<T: Scalar>(
    profile: &DatasetProfile,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<DatasetBundle<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = profile.input_dim();
    let templates: Vec<Vec<f64>> = (0..profile.classes)
        .map(|_| (0..d).map(|_| if rng.random_bool(0.3) { 0.9 } else { 0.05 }).collect())
        .collect();
    let mut make = |n: usize| -> Result<(Tensor<T>, Vec<ClassId>)> {
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % profile.classes;
            labels.push(y);
            data.extend(
                templates[y]
                    .iter()
                    .map(|&t| T::of((t + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))),
            );
        }
        let mut shape = vec![n];
        shape.extend(profile.input);
        Ok((Tensor::from_vec(&shape, data)?, labels))
    };
    let (train_images, train_labels) = make(n_train)?;
    let (test_images, test_labels) = make(n_test)?;
    Ok(DatasetBundle {
        profile: profile.clone(),
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

/// Name of the splitting convention, written into manifests.
pub const PARTITION_CONVENTION: &str = "per-class-dirichlet";

/// Client shards as index lists into the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub shards: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

/// For every class, draws client proportions from `Dirichlet(alpha·1_K)`
/// and hands out that class's (shuffled) indices accordingly. Shards left
/// empty receive one index from the currently largest shard.
pub fn dirichlet_partition(labels: &[ClassId], clients: usize, alpha: f64, seed: u64) -> Result<PartitionSpec> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    if labels.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {clients} nonempty shards",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut shards = vec![Vec::new(); clients];
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            // every draw underflowed; the whole class goes to one client
            let k = rng.random_range(0..clients);
            shards[k].extend(idx);
            continue;
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (k, g) in draws.iter().enumerate() {
            cum += g / total;
            let end = if k + 1 == clients {
                n
            } else {
                ((cum * n as f64).round() as usize).clamp(start, n)
            };
            shards[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by_key(|&k| (shards[k].len(), std::cmp::Reverse(k)))
            .expect("clients > 0");
        let moved = shards[largest].pop().expect("largest shard is nonempty");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(PartitionSpec { shards, alpha, seed })
}

impl PartitionSpec {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Classes present in client `k`'s shard.
    pub fn classes_of(&self, k: usize, labels: &[ClassId]) -> BTreeSet<ClassId> {
        self.shards[k].iter().map(|&i| labels[i]).collect()
    }

    /// `hist[k][y]` = number of class-`y` samples held by client `k`.
    pub fn class_histogram(&self, labels: &[ClassId], classes: usize) -> Vec<Vec<usize>> {
        self.shards
            .iter()
            .map(|s| {
                let mut h = vec![0; classes];
                for &i in s {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Checks disjointness, nonemptiness and index range.
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let mut seen = vec![false; n_train];
        for (k, s) in self.shards.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Partition(format!("shard {k} is empty")));
            }
            for &i in s {
                if i >= n_train {
                    return Err(Error::Partition(format!("shard {k} holds index {i} ≥ {n_train}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} appears in two shards")));
                }
            }
        }
        Ok(())
    }

    /// Text manifest: a header of `key: value` lines followed by one
    /// `client <k>: <indices…>` line per shard.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fedvtc partition manifest v1");
        let _ = writeln!(s, "convention: {PARTITION_CONVENTION}");
        let _ = writeln!(s, "alpha: {}", self.alpha);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "clients: {}", self.shards.len());
        for (k, shard) in self.shards.iter().enumerate() {
            let _ = write!(s, "client {k}:");
            for i in shard {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Partition(format!("manifest: {m}"));
        let mut alpha = None;
        let mut seed = None;
        let mut clients = None;
        let mut shards: Vec<Vec<usize>> = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("unparseable line {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "convention" if value != PARTITION_CONVENTION => {
                    return Err(bad(format!("unknown convention {value:?}")));
                }
                "convention" => {}
                "alpha" => alpha = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "clients" => clients = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                k if k.starts_with("client ") => {
                    let id: usize = k["client ".len()..]
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad client id in {k:?}")))?;
                    if id != shards.len() {
                        return Err(bad(format!("client {id} out of order")));
                    }
                    let idx = value
                        .split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                    shards.push(idx);
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let spec = PartitionSpec {
            alpha: alpha.ok_or_else(|| bad("missing alpha".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            shards,
        };
        if clients != Some(spec.shards.len()) {
            return Err(bad(format!(
                "header says {clients:?} clients, found {}",
                spec.shards.len()
            )));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(n: usize, classes: usize) -> Vec<ClassId> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn huge_alpha_is_nearly_uniform() {
        let labels = balanced(4000, 4);
        let p = dirichlet_partition(&labels, 4, 1e6, 3).unwrap();
        let hist = p.class_histogram(&labels, 4);
        for row in &hist {
            for &c in row {
                // 1000 per class split four ways: 250 each
                assert!((c as f64 - 250.0).abs() <= 0.05 * 250.0, "{hist:?}");
            }
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced(37, 3);
        let p = dirichlet_partition(&labels, 1, 0.5, 0).unwrap();
        assert_eq!(p.shards, vec![(0..37).collect::<Vec<_>>()]);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            dirichlet_partition(&[0, 1], 3, 1.0, 0),
            Err(Error::Partition(_))
        ));
        assert!(dirichlet_partition(&[0, 1], 0, 1.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 1], 1, 0.0, 0).is_err());
        assert!(dirichlet_partition(&[0, 1], 1, f64::NAN, 0).is_err());
    }

    fn mean_tv(labels: &[ClassId], alpha: f64, seed: u64) -> f64 {
        let p = dirichlet_partition(labels, 10, alpha, seed).unwrap();
        let hist = p.class_histogram(labels, 2);
        let global = [0.5, 0.5];
        hist.iter()
            .map(|h| {
                let n = (h[0] + h[1]) as f64;
                0.5 * ((h[0] as f64 / n - global[0]).abs() + (h[1] as f64 / n - global[1]).abs())
            })
            .sum::<f64>()
            / 10.0
    }

    #[test]
    fn smaller_alpha_is_more_skewed() {
        let labels = balanced(1000, 2);
        let skew = |alpha| (0..20).map(|s| mean_tv(&labels, alpha, s)).sum::<f64>() / 20.0;
        let (tight, loose) = (skew(0.1), skew(1.0));
        assert!(tight > loose, "Dir(0.1) {tight} vs Dir(1.0) {loose}");
    }

    #[test]
    fn manifest_round_trips() {
        let labels = balanced(50, 5);
        let p = dirichlet_partition(&labels, 4, 0.3, 9).unwrap();
        let text = p.to_manifest();
        assert!(text.contains("convention: per-class-dirichlet"));
        assert_eq!(PartitionSpec::from_manifest(&text).unwrap(), p);
        assert!(PartitionSpec::from_manifest("alpha: 1\nseed: 0\nclients: 2\nclient 0: 1\n").is_err());
    }

    #[test]
    fn idx_loader_reads_counts_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mnist = dir.path().join("mnist");
        std::fs::create_dir(&mnist).unwrap();
        for (prefix, n) in [("train", 60_000u32), ("t10k", 10_000u32)] {
            let mut img = Vec::new();
            img.extend(IMAGE_MAGIC.to_be_bytes());
            img.extend(n.to_be_bytes());
            img.extend(28u32.to_be_bytes());
            img.extend(28u32.to_be_bytes());
            img.extend((0..n as usize * 784).map(|i| (i % 256) as u8));
            std::fs::write(mnist.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
            let mut lbl = Vec::new();
            lbl.extend(LABEL_MAGIC.to_be_bytes());
            lbl.extend(n.to_be_bytes());
            lbl.extend((0..n).map(|i| (i % 10) as u8));
            std::fs::write(mnist.join(format!("{prefix}-labels-idx1-ubyte")), lbl).unwrap();
        }
        let profile = DatasetProfile::mnist();
        let b = load_dataset::<f32>(&profile, dir.path(), SizeCap::default(), 0).unwrap();
        assert_eq!(b.train_labels.len(), 60_000);
        assert_eq!(b.test_labels.len(), 10_000);
        assert!(b.train_images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(b.train_images.data()[255], 1.0);

        let cap = SizeCap {
            train: Some(2000),
            test: Some(100),
        };
        let a1 = load_dataset::<f32>(&profile, dir.path(), cap, 5).unwrap();
        let a2 = load_dataset::<f32>(&profile, dir.path(), cap, 5).unwrap();
        assert_eq!(a1.train_labels.len(), 2000);
        assert_eq!(a1.train_images, a2.train_images);
        assert_eq!(a1.test_labels, a2.test_labels);
    }

    #[test]
    fn missing_or_corrupt_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset::<f32>(&DatasetProfile::mnist(), dir.path(), SizeCap::default(), 0).unwrap_err();
        assert!(matches!(&err, Error::Ingestion { path, .. } if path.ends_with("train-images-idx3-ubyte")));
        let mnist = dir.path().join("mnist");
        std::fs::create_dir(&mnist).unwrap();
        std::fs::write(mnist.join("train-images-idx3-ubyte"), [0u8, 0, 8, 3, 0]).unwrap();
        std::fs::write(mnist.join("train-labels-idx1-ubyte"), [0u8; 8]).unwrap();
        let err = load_dataset::<f32>(&DatasetProfile::mnist(), dir.path(), SizeCap::default(), 0).unwrap_err();
        assert!(err.to_string().contains("train-images-idx3-ubyte"), "{err}");
    }

    proptest! {
        #[test]
        fn shards_form_a_disjoint_cover(
            n in 10usize..200,
            classes in 1usize..6,
            k in 1usize..10,
            alpha in 0.05f64..5.0,
            seed in 0u64..1000,
        ) {
            let labels = balanced(n, classes);
            let p = dirichlet_partition(&labels, k, alpha, seed).unwrap();
            prop_assert!(p.validate(n).is_ok());
            let total: usize = p.shards.iter().map(Vec::len).sum();
            prop_assert_eq!(total, n);
            prop_assert_eq!(p.clone(), dirichlet_partition(&labels, k, alpha, seed).unwrap());
        }
    }
}
