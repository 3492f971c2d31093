//! Synthetic paired edges→shapes datasets stored as packed little-endian f32
//! arrays with a JSON manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vemkd_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::image::{ImageBatch, SUPPORTED_SIZES};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
/// Sobel magnitude (on `[0, 1]` luminance) above which a pixel is an edge.
pub const EDGE_THRESHOLD: f64 = 0.5;
const SUPERSAMPLE: usize = 4;
const MIN_CONTRAST: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub name: String,
    pub image_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/shapes32"),
            name: "shapes".into(),
            image_size: 32,
            num_train: 2000,
            num_val: 200,
            seed: 1234,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return Err(Error::config(
                "data.image_size",
                format!("must be one of {SUPPORTED_SIZES:?}"),
            ));
        }
        if self.num_train == 0 || self.num_val < 2 {
            return Err(Error::config(
                "data.num_train",
                "need at least one train and two val samples",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub count: usize,
    pub x: String,
    pub y: String,
    pub x_sha256: String,
    pub y_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub format_version: u32,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub train: SplitFiles,
    pub val: SplitFiles,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &SplitFiles {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::config("split", format!("unknown split {s}"))),
        }
    }
}

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        cos: f64,
        sin: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let cx = rng.random_range(0.2..0.8);
        let cy = rng.random_range(0.2..0.8);
        if rng.random_bool(0.5) {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cx,
                cy,
                rx: rng.random_range(0.1..0.3),
                ry: rng.random_range(0.1..0.3),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        } else {
            let k = rng.random_range(3..=6);
            let r: f64 = rng.random_range(0.12..0.3);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut angles: Vec<f64> = (0..k)
                .map(|i| phase + std::f64::consts::TAU * (i as f64 + rng.random_range(-0.25..0.25)) / k as f64)
                .collect();
            angles.sort_by(|a, b| a.total_cmp(b));
            Shape::Polygon(
                angles
                    .into_iter()
                    .map(|a| (cx + r * a.cos(), cy + r * a.sin()))
                    .collect(),
            )
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Shape::Ellipse {
                cx,
                cy,
                rx,
                ry,
                cos,
                sin,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                let n = pts.len();
                (0..n).all(|i| {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % n];
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
                })
            }
        }
    }
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// One `[3, size, size]` rendering in `[0, 1]`.
fn render(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let shade: f64 = rng.random_range(-0.15..0.15);
    let bg_lum = luminance(top);
    let count = rng.random_range(1..=3);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let shape = Shape::random(rng);
            let color = loop {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                if (luminance(c) - bg_lum).abs() > MIN_CONTRAST + shade.abs() {
                    break c;
                }
            };
            (shape, color)
        })
        .collect();
    let mut img = vec![0.0; 3 * size * size];
    let sub = SUPERSAMPLE as f64;
    for i in 0..size {
        for j in 0..size {
            let mut acc = [0.0; 3];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let py = (i as f64 + (si as f64 + 0.5) / sub) / size as f64;
                    let px = (j as f64 + (sj as f64 + 0.5) / sub) / size as f64;
                    let mut c = top.map(|v| (v + shade * py).clamp(0.0, 1.0));
                    for (shape, color) in &shapes {
                        if shape.contains(px, py) {
                            c = *color;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                img[(k * size + i) * size + j] = acc[k] / (sub * sub);
            }
        }
    }
    img
}

/// Thresholded Sobel magnitude of the luminance of a `[3, size, size]`
/// image in `[0, 1]`; edges are 1, everything else 0, on all channels.
pub fn edge_map(img: &[f64], size: usize) -> Vec<f64> {
    let lum: Vec<f64> = (0..size * size)
        .map(|p| luminance([img[p], img[size * size + p], img[2 * size * size + p]]))
        .collect();
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, size as isize - 1) as usize;
        let j = j.clamp(0, size as isize - 1) as usize;
        lum[i * size + j]
    };
    let mut plane = vec![0.0; size * size];
    for i in 0..size as isize {
        for j in 0..size as isize {
            let gx = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i, j - 1)
                - at(i + 1, j - 1);
            let gy = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i - 1, j)
                - at(i - 1, j + 1);
            plane[i as usize * size + j as usize] = if gx.hypot(gy) > EDGE_THRESHOLD { 1.0 } else { 0.0 };
        }
    }
    plane.repeat(3)
}

/// Renders `n` pairs as `[-1, 1]` f32 arrays `(x, y)`.
pub fn render_pairs(n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>) {
    let mut xs = Vec::with_capacity(n * 3 * size * size);
    let mut ys = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        let y = render(size, rng);
        let x = edge_map(&y, size);
        xs.extend(x.iter().map(|v| (2.0 * v - 1.0) as f32));
        ys.extend(y.iter().map(|v| (2.0 * v - 1.0) as f32));
    }
    (xs, ys)
}

fn write_f32(path: &Path, data: &[f32]) -> Result<String> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut h = Sha256::new();
    for v in data {
        let b = v.to_le_bytes();
        h.update(b);
        w.write_all(&b).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Generates the dataset under `cfg.root` and returns the manifest path.
pub fn generate_shapes_dataset(cfg: &DataConfig) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.root).map_err(|e| Error::io(&cfg.root, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |name: &str, n: usize| -> Result<SplitFiles> {
        let (x, y) = render_pairs(n, cfg.image_size, &mut rng);
        let (xf, yf) = (format!("{name}_x.f32"), format!("{name}_y.f32"));
        Ok(SplitFiles {
            count: n,
            x_sha256: write_f32(&cfg.root.join(&xf), &x)?,
            y_sha256: write_f32(&cfg.root.join(&yf), &y)?,
            x: xf,
            y: yf,
        })
    };
    let train = split("train", cfg.num_train)?;
    let val = split("val", cfg.num_val)?;
    let manifest = DatasetManifest {
        name: cfg.name.clone(),
        format_version: FORMAT_VERSION,
        image_size: cfg.image_size,
        channels: 3,
        seed: cfg.seed,
        num_train: cfg.num_train,
        num_val: cfg.num_val,
        train,
        val,
    };
    let path = cfg.root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A loaded dataset with both splits verified against the manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    train: (Tensor<f32>, Tensor<f32>),
    val: (Tensor<f32>, Tensor<f32>),
}

fn read_f32(path: &Path, expected_sha: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != expected_sha {
        return Err(Error::DataIntegrity {
            path: path.to_path_buf(),
            reason: format!("checksum {digest} does not match manifest {expected_sha}"),
        });
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(Error::DataIntegrity {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", numel * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data))
}

impl Dataset {
    /// Loads `root/manifest.json` and both splits.
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: mpath,
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let load = |s: &SplitFiles| -> Result<(Tensor<f32>, Tensor<f32>)> {
            let shape = [s.count, manifest.channels, manifest.image_size, manifest.image_size];
            Ok((
                read_f32(&root.join(&s.x), &s.x_sha256, &shape)?,
                read_f32(&root.join(&s.y), &s.y_sha256, &shape)?,
            ))
        };
        let train = load(&manifest.train)?;
        let val = load(&manifest.val)?;
        Ok(Self { manifest, train, val })
    }

    fn arrays(&self, split: Split) -> &(Tensor<f32>, Tensor<f32>) {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.arrays(split).0.dim(0)
    }

    /// The whole split as `(x, y)`.
    pub fn split(&self, split: Split) -> Result<(ImageBatch<f32>, ImageBatch<f32>)> {
        let (x, y) = self.arrays(split);
        Ok((ImageBatch::new(x.clone())?, ImageBatch::new(y.clone())?))
    }

    /// Samples at `indices` as `(x, y)`.
    pub fn gather(&self, split: Split, indices: &[usize]) -> Result<(ImageBatch<f32>, ImageBatch<f32>)> {
        let (x, y) = self.arrays(split);
        Ok((
            ImageBatch::new(x.gather_outer(indices))?,
            ImageBatch::new(y.gather_outer(indices))?,
        ))
    }

    pub fn batches(&self, split: Split, batch_size: usize, seed: u64, epochs: usize) -> Result<BatchStream<'_>> {
        let order = BatchOrder::new(self.len(split), batch_size, seed, split == Split::Train)?;
        Ok(BatchStream {
            data: self,
            split,
            total: order.per_epoch() * epochs,
            order,
            step: 0,
        })
    }
}

/// Stateless batch schedule: the indices of step `i` depend only on the
/// seed and `i`, so resumed runs see the same data.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    n: usize,
    batch: usize,
    seed: u64,
    shuffle: bool,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(n: usize, batch: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::config("schedule.batch_size", format!("must be in 1..={n}")));
        }
        Ok(Self {
            n,
            batch,
            seed,
            shuffle,
            cached: None,
        })
    }

    /// Full batches per epoch; the remainder is dropped.
    pub fn per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        let epoch = step / self.per_epoch();
        let pos = step % self.per_epoch();
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            if self.shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
            }
            self.cached = Some((epoch, perm));
        }
        let perm = &self.cached.as_ref().expect("cached").1;
        perm[pos * self.batch..(pos + 1) * self.batch].to_vec()
    }
}

pub struct BatchStream<'a> {
    data: &'a Dataset,
    split: Split,
    order: BatchOrder,
    step: usize,
    total: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = Result<(ImageBatch<f32>, ImageBatch<f32>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.total {
            return None;
        }
        let idx = self.order.indices(self.step);
        self.step += 1;
        Some(self.data.gather(self.split, &idx))
    }
}

/// Loads `root` and streams batches; see [`Dataset::batches`].
pub fn load_batches(
    root: &Path,
    split: Split,
    batch_size: usize,
    seed: u64,
    epochs: usize,
) -> Result<Vec<(ImageBatch<f32>, ImageBatch<f32>)>> {
    let ds = Dataset::load(root)?;
    ds.batches(split, batch_size, seed, epochs)?.collect()
}

/// Fraction of samples whose re-derived edge map is within `0.1` mean
/// absolute difference of the stored input.
pub fn edge_consistency<T: Real>(x: &ImageBatch<T>, y: &ImageBatch<T>) -> f64 {
    let [n, c, s, _] = y.shape();
    let per = c * s * s;
    let ok = (0..n)
        .filter(|&i| {
            let yi: Vec<f64> = y.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| (v.to_f64_lossy() + 1.0) / 2.0)
                .collect();
            let e = edge_map(&yi, s);
            let mad: f64 = e
                .iter()
                .zip(&x.data()[i * per..(i + 1) * per])
                .map(|(a, b)| ((2.0 * a - 1.0) - b.to_f64_lossy()).abs())
                .sum::<f64>()
                / per as f64;
            mad < 0.1
        })
        .count();
    ok as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(root: &Path, seed: u64) -> DataConfig {
        DataConfig {
            root: root.to_path_buf(),
            num_train: 10,
            num_val: 4,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_bytes_and_sizes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_shapes_dataset(&small(a.path(), 5)).unwrap();
        generate_shapes_dataset(&small(b.path(), 5)).unwrap();
        for f in ["train_x.f32", "train_y.f32", "val_x.f32", "val_y.f32", MANIFEST] {
            let fa = fs::read(a.path().join(f)).unwrap();
            assert_eq!(fa, fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let bytes = fs::metadata(a.path().join("train_x.f32")).unwrap().len()
            + fs::metadata(a.path().join("train_y.f32")).unwrap().len();
        assert_eq!(bytes, 10 * 2 * 3 * 32 * 32 * 4);
    }

    #[test]
    fn ranges_edges_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        generate_shapes_dataset(&small(dir.path(), 6)).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        let (x, y) = ds.split(Split::Train).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(x.data().iter().all(|&v| v == -1.0 || v == 1.0));
        assert!(x.data().contains(&1.0));
        assert_eq!(edge_consistency(&x, &y), 1.0);
        let path = dir.path().join("val_y.f32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[7] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::DataIntegrity { .. })));
    }

    #[test]
    fn batch_order_contract() {
        let mut a = BatchOrder::new(10, 3, 1, true).unwrap();
        let mut b = BatchOrder::new(10, 3, 1, true).unwrap();
        assert_eq!(a.per_epoch(), 3);
        let seq: Vec<Vec<usize>> = (0..9).map(|i| a.indices(i)).collect();
        assert_eq!(seq, (0..9).map(|i| b.indices(i)).collect::<Vec<_>>());
        let mut seen: Vec<usize> = seq[..3].concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_ne!(seq[..3], seq[3..6]);
        let mut fresh = BatchOrder::new(10, 3, 1, true).unwrap();
        assert_eq!(fresh.indices(7), seq[7]);
        let mut val = BatchOrder::new(10, 5, 1, false).unwrap();
        assert_eq!(val.indices(1), vec![5, 6, 7, 8, 9]);
        assert!(BatchOrder::new(4, 0, 0, true).is_err());
    }

    #[test]
    fn unwritable_root_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let err = generate_shapes_dataset(&small(&file.join("sub"), 1)).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
