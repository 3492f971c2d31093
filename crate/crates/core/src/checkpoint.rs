//! Checkpoint directories: `manifest.json` plus one packed little-endian
//! f32 payload of named arrays.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vemkd_tensor::{Adam, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "arrays.f32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements.
    pub offset: usize,
}

/// Serializable ChaCha position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Format {
            path: PathBuf::from(MANIFEST),
            reason: format!("invalid rng {what}"),
        };
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub iteration: usize,
    pub arrays: Vec<ArrayRecord>,
    pub rngs: BTreeMap<String, RngState>,
    /// Step counts of each optimizer.
    pub optimizers: BTreeMap<String, u64>,
    /// Small integer counters such as streaks.
    pub counters: BTreeMap<String, u64>,
    /// Resolved run config as TOML text.
    pub config: String,
}

/// Accumulates arrays and state, then writes them atomically.
#[derive(Default)]
pub struct CheckpointWriter {
    arrays: Vec<ArrayRecord>,
    data: Vec<f32>,
    rngs: BTreeMap<String, RngState>,
    optimizers: BTreeMap<String, u64>,
    counters: BTreeMap<String, u64>,
    files: BTreeMap<String, Vec<u8>>,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn array(&mut self, name: impl Into<String>, t: &Tensor<f32>) {
        self.arrays.push(ArrayRecord {
            name: name.into(),
            shape: t.shape().to_vec(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(t.data());
    }

    pub fn store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for e in store.entries() {
            self.array(format!("{prefix}/{}", e.name), &e.value);
        }
    }

    pub fn optimizer(&mut self, name: &str, opt: &mut Adam<f32>, store: &ParamStore<f32>) {
        self.optimizers.insert(name.to_string(), opt.steps_taken());
        let (m, v) = opt.moments_for(store);
        let (m, v) = (m.to_vec(), v.to_vec());
        for (e, (mt, vt)) in store.entries().iter().zip(m.iter().zip(&v)) {
            self.array(format!("adam.{name}/m/{}", e.name), mt);
            self.array(format!("adam.{name}/v/{}", e.name), vt);
        }
    }

    pub fn rng(&mut self, name: &str, rng: &ChaCha8Rng) {
        self.rngs.insert(name.to_string(), RngState::capture(rng));
    }

    pub fn counter(&mut self, name: &str, value: u64) {
        self.counters.insert(name.to_string(), value);
    }

    /// Extra file copied verbatim into the checkpoint directory.
    pub fn file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    /// Writes into a sibling temporary directory and renames it over `dir`.
    pub fn write(self, dir: &Path, iteration: usize, config_toml: &str) -> Result<()> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let payload = tmp.join(PAYLOAD);
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&payload, e))?;
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            iteration,
            arrays: self.arrays,
            rngs: self.rngs,
            optimizers: self.optimizers,
            counters: self.counters,
            config: config_toml.to_string(),
        };
        let mpath = tmp.join(MANIFEST);
        fs::write(
            &mpath,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| Error::io(&mpath, e))?;
        for (name, data) in &self.files {
            let p = tmp.join(name);
            fs::write(&p, data).map_err(|e| Error::io(&p, e))?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    data: Vec<f32>,
    index: BTreeMap<String, usize>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: mpath,
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let ppath = dir.join(PAYLOAD);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format {
                path: ppath,
                reason: "payload length is not a multiple of 4".into(),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for a in &manifest.arrays {
            let end = a.offset + a.shape.iter().product::<usize>();
            if end > data.len() {
                return Err(Error::Format {
                    path: ppath,
                    reason: format!("array {} runs past the payload", a.name),
                });
            }
        }
        let index = manifest
            .arrays
            .iter()
            .enumerate()
            .map(|(i, a)| (a.name.clone(), i))
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            data,
            index,
        })
    }

    fn missing(&self, what: &str) -> Error {
        Error::Format {
            path: self.dir.join(MANIFEST),
            reason: format!("missing {what}"),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn array(&self, name: &str) -> Result<Tensor<f32>> {
        let rec = &self.manifest.arrays[*self.index.get(name).ok_or_else(|| self.missing(name))?];
        let n: usize = rec.shape.iter().product();
        Ok(Tensor::new(&rec.shape, self.data[rec.offset..rec.offset + n].to_vec()))
    }

    /// Overwrites every entry of `store` from `prefix/<name>`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = (0..store.len()).map(vemkd_tensor::ParamId).collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.entry(id).name);
            let t = self.array(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Format {
                    path: self.dir.join(MANIFEST),
                    reason: format!("{name} has shape {:?}, expected {:?}", t.shape(), store.get(id).shape()),
                });
            }
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn load_optimizer(&self, name: &str, opt: &mut Adam<f32>, store: &ParamStore<f32>) -> Result<()> {
        let step = *self.manifest.optimizers.get(name).ok_or_else(|| self.missing(name))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in store.entries() {
            m.push(self.array(&format!("adam.{name}/m/{}", e.name))?);
            v.push(self.array(&format!("adam.{name}/v/{}", e.name))?);
        }
        opt.restore(step, m, v);
        Ok(())
    }

    pub fn rng(&self, name: &str) -> Result<ChaCha8Rng> {
        self.manifest
            .rngs
            .get(name)
            .ok_or_else(|| self.missing(name))?
            .restore()
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        self.manifest
            .counters
            .get(name)
            .copied()
            .ok_or_else(|| self.missing(name))
    }

    pub fn file(&self, name: &str) -> Result<Vec<u8>> {
        let p = self.dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use vemkd_tensor::AdamConfig;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]));
        store.add_buffer("b", Tensor::new(&[1], vec![7.0]));
        let mut opt = Adam::new(AdamConfig::default());
        let grads = vec![Some(Tensor::ones(&[2, 2])), None];
        opt.step(&mut store, &grads, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _: u64 = rng.random();
        let mut w = CheckpointWriter::new();
        w.store("m", &store);
        w.optimizer("m", &mut opt, &store);
        w.rng("r", &rng);
        w.counter("streak", 3);
        w.file("log.csv", b"a,b\n".to_vec());
        let path = dir.path().join("ck");
        w.write(&path, 12, "seed = 1\n").unwrap();

        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.manifest.iteration, 12);
        let mut other = ParamStore::<f32>::new();
        other.add("a", Tensor::zeros(&[2, 2]));
        other.add_buffer("b", Tensor::zeros(&[1]));
        ck.load_store("m", &mut other).unwrap();
        assert!(other.bitwise_eq(&store));
        let mut opt2 = Adam::new(AdamConfig::default());
        ck.load_optimizer("m", &mut opt2, &other).unwrap();
        opt.step(&mut store, &grads, 0.1);
        opt2.step(&mut other, &grads, 0.1);
        assert!(other.bitwise_eq(&store));
        let mut r2 = ck.rng("r").unwrap();
        assert_eq!(rng.random::<u64>(), r2.random::<u64>());
        assert_eq!(ck.counter("streak").unwrap(), 3);
        assert_eq!(ck.file("log.csv").unwrap(), b"a,b\n");
        assert!(ck.array("nope").is_err());
    }
}
