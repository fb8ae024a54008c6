use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use plantseg::datasets::{self, DatasetId, ImageRecord, RecordSet, Split};
use plantseg::encoder::{BridgeConfig, BridgeEncoder, Encoder, EncoderId, FeatureCache, SyntheticEncoder};
use plantseg::refiner::{Refiner, RefinerId, Sam2Refiner, TrivialRefiner};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{DatasetArgs, GlobalArgs};
use crate::config::{root_env, Config};
use crate::UsageError;

/// Dataset name of the generated Phenobench-layout fixture.
pub const MINI_FIXTURE: &str = "mini-fixture";
const FIXTURE_SEED: u64 = 0;

pub struct Ctx {
    pub config: Config,
    pub global: GlobalArgs,
    pub seed: u64,
    pub workers: usize,
    cache: Option<FeatureCache>,
    started: Instant,
    started_unix: u64,
}

impl Ctx {
    pub fn new(global: GlobalArgs) -> Result<Self> {
        let mut config = Config::load(global.config.as_deref())?;
        if let Some(dir) = &global.cache_dir {
            config.cache_dir = Some(dir.clone());
        }
        let seed = global.seed.unwrap_or(config.seed);
        config.seed = seed;
        let workers = match global.workers {
            Some(0) => return Err(UsageError("--workers must be at least 1".into()).into()),
            Some(n) => n,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        // the pool may already exist when several commands share a process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
        let cache = if global.no_cache {
            None
        } else {
            Some(FeatureCache::new(config.cache_dir())?)
        };
        Ok(Self {
            config,
            global,
            seed,
            workers,
            cache,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    pub fn cache(&self) -> Option<&FeatureCache> {
        self.cache.as_ref()
    }

    pub fn dataset(&self, args: &DatasetArgs) -> Result<ResolvedDataset> {
        self.resolve_dataset(&args.dataset, args.root.as_deref())
    }

    pub fn resolve_dataset(&self, name: &str, root: Option<&Path>) -> Result<ResolvedDataset> {
        if name == MINI_FIXTURE {
            let root = match root {
                Some(r) => r.to_path_buf(),
                None => ensure_fixture(&self.config.cache_dir().join(MINI_FIXTURE))?,
            };
            return Ok(ResolvedDataset {
                name: name.to_string(),
                id: DatasetId::Phenobench,
                root,
            });
        }
        let id = DatasetId::from_str(name).map_err(|e| UsageError(e.to_string()))?;
        let root = root
            .map(Path::to_path_buf)
            .or_else(|| self.config.datasets.get(name).cloned())
            .ok_or_else(|| {
                UsageError(format!(
                    "no root for dataset `{name}`; pass --root, set [datasets] {name} in the config, or set {}",
                    root_env(name)
                ))
            })?;
        Ok(ResolvedDataset {
            name: name.to_string(),
            id,
            root,
        })
    }

    pub fn encoder(&self, name: &str) -> Result<EncoderFactory> {
        let id = EncoderId::from_str(name)?;
        Ok(match id {
            EncoderId::Synthetic => EncoderFactory::Synthetic(self.seed),
            _ => EncoderFactory::Bridge(id, self.config.bridge("encoder", name, "encoder_bridge.py")),
        })
    }

    pub fn refiner(&self, name: &str) -> Result<RefinerFactory> {
        Ok(match RefinerId::from_str(name)? {
            RefinerId::Trivial => RefinerFactory::Trivial,
            RefinerId::Sam2 => RefinerFactory::Sam2(self.config.bridge("refiner", name, "sam2_bridge.py")),
        })
    }

    pub fn manifest(&self, command: &str, args: &impl Serialize) -> Manifest {
        Manifest {
            tool: "plantseg",
            version: plantseg::VERSION,
            command: command.to_string(),
            argv: std::env::args().collect(),
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            global: serde_json::to_value(&self.global).unwrap_or(Value::Null),
            config: self.config.clone(),
            seed: self.seed,
            workers: self.workers,
            cache_dir: self.cache.as_ref().map(|c| c.dir().to_path_buf()),
            backends: BTreeMap::new(),
            dataset: None,
            outputs: Vec::new(),
            failures: 0,
            started_unix: self.started_unix,
            elapsed_secs: 0.0,
            started: self.started,
        }
    }
}

/// Writes the fixture once; concurrent runs race on a rename, not on files.
fn ensure_fixture(dir: &Path) -> Result<PathBuf> {
    let marker = dir.join(".complete");
    if marker.exists() {
        return Ok(dir.to_path_buf());
    }
    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(parent)?;
    datasets::write_mini_fixture(DatasetId::Phenobench, staging.path(), FIXTURE_SEED)?;
    std::fs::write(staging.path().join(".complete"), b"")?;
    if std::fs::rename(staging.path(), dir).is_err() && !marker.exists() {
        anyhow::bail!("cannot create fixture at {}", dir.display());
    }
    Ok(dir.to_path_buf())
}

pub struct ResolvedDataset {
    pub name: String,
    pub id: DatasetId,
    pub root: PathBuf,
}

impl ResolvedDataset {
    pub fn records(&self, split: &str) -> Result<Vec<ImageRecord>> {
        let split = parse_split(split)?;
        let records = datasets::load(self.id, &self.root, split)?;
        if records.is_empty() {
            log::warn!("{} has no {split} images under {}", self.name, self.root.display());
        }
        Ok(records)
    }

    pub fn set(&self, split: &str) -> Result<RecordSet> {
        Ok(RecordSet {
            name: self.name.clone(),
            records: self.records(split)?,
        })
    }

    pub fn describe(&self, split: &str) -> Value {
        json!({"name": self.name, "layout": self.id.as_str(), "root": self.root, "split": split})
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    Split::from_str(s).map_err(|e| UsageError(e.to_string()).into())
}

pub enum EncoderFactory {
    Synthetic(u64),
    Bridge(EncoderId, BridgeConfig),
}

impl EncoderFactory {
    pub fn id(&self) -> &'static str {
        match self {
            EncoderFactory::Synthetic(_) => EncoderId::Synthetic.as_str(),
            EncoderFactory::Bridge(id, _) => id.as_str(),
        }
    }

    pub fn make(&self) -> plantseg::Result<Box<dyn Encoder>> {
        Ok(match self {
            EncoderFactory::Synthetic(seed) => Box::new(SyntheticEncoder::new(*seed)),
            EncoderFactory::Bridge(id, cfg) => Box::new(BridgeEncoder::spawn(*id, cfg)?),
        })
    }

    pub fn describe(&self) -> Value {
        match self {
            EncoderFactory::Synthetic(seed) => json!({"id": self.id(), "seed": seed}),
            EncoderFactory::Bridge(_, cfg) => json!({"id": self.id(), "bridge": cfg}),
        }
    }
}

pub enum RefinerFactory {
    Trivial,
    Sam2(BridgeConfig),
}

impl RefinerFactory {
    pub fn id(&self) -> &'static str {
        match self {
            RefinerFactory::Trivial => RefinerId::Trivial.as_str(),
            RefinerFactory::Sam2(_) => RefinerId::Sam2.as_str(),
        }
    }

    pub fn make(&self) -> plantseg::Result<Box<dyn Refiner>> {
        Ok(match self {
            RefinerFactory::Trivial => Box::new(TrivialRefiner),
            RefinerFactory::Sam2(cfg) => Box::new(Sam2Refiner::spawn(cfg)?),
        })
    }

    pub fn describe(&self) -> Value {
        match self {
            RefinerFactory::Trivial => json!({"id": self.id()}),
            RefinerFactory::Sam2(cfg) => json!({"id": self.id(), "bridge": cfg}),
        }
    }
}

/// Runs `work` on items `0..n` across up to `workers` threads, each with its
/// own state from `init`. Items are dealt round-robin and results come back in
/// item order. A backend error stops the run; other errors stay per item.
pub fn sharded<S, T: Send>(
    n: usize,
    workers: usize,
    init: impl Fn() -> plantseg::Result<S> + Sync,
    work: impl Fn(&mut S, usize) -> plantseg::Result<T> + Sync,
) -> plantseg::Result<Vec<plantseg::Result<T>>> {
    let shards = workers.clamp(1, n.max(1));
    let per_shard: Vec<plantseg::Result<Vec<(usize, plantseg::Result<T>)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..shards)
            .map(|k| {
                let (init, work) = (&init, &work);
                scope.spawn(move || {
                    if k >= n {
                        return Ok(Vec::new());
                    }
                    let mut state = init()?;
                    let mut out = Vec::new();
                    for i in (k..n).step_by(shards) {
                        match work(&mut state, i) {
                            Err(e) if e.kind() == plantseg::ErrorKind::Backend => return Err(e),
                            r => out.push((i, r)),
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut slots: Vec<Option<plantseg::Result<T>>> = (0..n).map(|_| None).collect();
    for shard in per_shard {
        for (i, r) in shard? {
            slots[i] = Some(r);
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("every item processed")).collect())
}

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub args: Value,
    pub global: Value,
    pub config: Config,
    pub seed: u64,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub backends: BTreeMap<String, Value>,
    pub dataset: Option<Value>,
    pub outputs: Vec<PathBuf>,
    pub failures: usize,
    pub started_unix: u64,
    pub elapsed_secs: f64,
    #[serde(skip)]
    started: Instant,
}

impl Manifest {
    pub fn backend(&mut self, role: &str, description: Value) {
        self.backends.insert(role.to_string(), description);
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.elapsed_secs = self.started.elapsed().as_secs_f64();
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let f = std::fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharded_keeps_item_order_for_any_worker_count() {
        let expected: Vec<usize> = (0..23).map(|i| i * i).collect();
        for workers in [1, 2, 5, 64] {
            let out = sharded(23, workers, || Ok(()), |_, i| Ok(i * i)).unwrap();
            let got: Vec<usize> = out.into_iter().map(|r| r.unwrap()).collect();
            assert_eq!(got, expected, "workers = {workers}");
        }
    }

    #[test]
    fn sharded_keeps_data_errors_per_item_and_stops_on_backend_errors() {
        let out = sharded(4, 2, || Ok(()), |_, i| {
            if i == 1 {
                Err(plantseg::Error::invalid("bad image"))
            } else {
                Ok(i)
            }
        })
        .unwrap();
        assert!(out[1].is_err() && out[0].is_ok() && out[3].is_ok());
        let failed = sharded(4, 2, || Ok(()), |_, i| {
            if i == 2 {
                Err(plantseg::Error::Backend {
                    backend: "x".into(),
                    message: "down".into(),
                })
            } else {
                Ok(i)
            }
        });
        assert!(failed.is_err());
        assert!(sharded(0, 3, || Ok(()), |_, i| Ok(i)).unwrap().is_empty());
    }
}
