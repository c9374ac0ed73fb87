//! Config, dataset and checkpoint loading plus run-directory output.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use deepmlf::checkpoint::MAGIC;
use deepmlf::{Checkpoint, Dataset, DeepMlf, DmlfError, ModelConfig, Result, RunConfig, Sample};
use dmlf_tensor::{Rng, Tensor};
use serde_json::Value;

pub const SEED_ENV: &str = "DMLF_SEED";

/// Seed that replaces the one in a config: `--seed` first, then `DMLF_SEED`.
#[derive(Clone, Copy, Debug)]
pub struct SeedOverride(Option<u64>);

impl SeedOverride {
    pub fn resolve(flag: Option<u64>) -> Result<Self> {
        if flag.is_some() {
            return Ok(Self(flag));
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(|s| Self(Some(s)))
                .map_err(|_| DmlfError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(Self(None)),
        }
    }

    pub fn apply(self, seed: u64) -> u64 {
        self.0.unwrap_or(seed)
    }
}

pub fn load_config(path: &Path, seed: SeedOverride) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let mut run = RunConfig::from_json(&text)?;
    run.seed = seed.apply(run.seed);
    Ok(run)
}

pub fn is_checkpoint(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = File::open(path)?;
    Ok(f.read(&mut head)? == 4 && &head == MAGIC)
}

/// A checkpoint with its run config parsed and the seed override applied.
pub fn load_checkpoint(path: &Path, seed: SeedOverride) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let mut run = RunConfig::from_json(&ck.config_json)
        .map_err(|e| DmlfError::Checkpoint(format!("{}: embedded config: {e}", path.display())))?;
    run.seed = seed.apply(run.seed);
    Ok((ck, run))
}

/// The full model held by a checkpoint; AV-only snapshots are rejected.
pub fn full_model(ck: Checkpoint, run: &RunConfig, path: &Path) -> Result<DeepMlf> {
    let reference = DeepMlf::new(&run.model, run.seed)?;
    let missing = reference.store.names().find(|n| ck.params.tensor(n).is_err());
    if let Some(name) = missing {
        return Err(DmlfError::Checkpoint(format!(
            "{} is not a full-model checkpoint (no {name})",
            path.display()
        )));
    }
    Ok(DeepMlf {
        config: run.model.clone(),
        store: ck.params,
    })
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

/// Loads one split and checks it fits `model`.
pub fn load_split(dir: &Path, split: &str, model: &ModelConfig) -> Result<Dataset> {
    if !dir.join(format!("{split}.jsonl")).is_file() {
        return Err(DmlfError::Data(format!("{} has no {split}.jsonl", dir.display())));
    }
    let ds = Dataset::load(dir, split)?;
    ds.meta.check_model(model)?;
    Ok(ds)
}

pub fn load_splits(dir: &Path, model: &ModelConfig) -> Result<Splits> {
    let test = if dir.join("test.jsonl").is_file() {
        Some(load_split(dir, "test", model)?)
    } else {
        None
    };
    Ok(Splits {
        train: load_split(dir, "train", model)?,
        val: load_split(dir, "val", model)?,
        test,
    })
}

/// Random inputs shaped for `cfg`, for analysis without a dataset.
pub fn synthetic_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = Rng::new(seed).fork("cli_samples");
    let l_t = cfg.mlm.max_len.min(6);
    (0..n)
        .map(|i| Sample {
            id: format!("synthetic-{i}"),
            tokens: (0..l_t).map(|_| rng.below(cfg.mlm.vocab_size)).collect(),
            audio: Tensor::randn(&[cfg.av.l_av, cfg.av.d_a_in], 1.0, &mut rng),
            vision: Tensor::randn(&[cfg.av.l_av, cfg.av.d_v_in], 1.0, &mut rng),
            label: 2.0 * rng.uniform() - 1.0,
        })
        .collect()
}

/// Output directory of one run.
pub struct RunDir {
    pub path: PathBuf,
    log: Option<BufWriter<File>>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            log: None,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, run: &RunConfig) -> Result<()> {
        fs::write(self.file("resolved_config.json"), run.to_json_pretty() + "\n")?;
        Ok(())
    }

    pub fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }

    /// Appends `{"event": event, ...fields}` to `run.jsonl`.
    pub fn event(&mut self, event: &str, fields: &impl serde::Serialize) -> Result<()> {
        if self.log.is_none() {
            self.log = Some(BufWriter::new(File::create(self.file("run.jsonl"))?));
        }
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), Value::from(event));
        match serde_json::to_value(fields)? {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("value".into(), other);
            }
        }
        let w = self.log.as_mut().expect("opened above");
        serde_json::to_writer(&mut *w, &obj)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Writes `resolved_config.json` into `out` when given, else logs it at debug level.
pub fn dump_config(out: Option<&Path>, run: &RunConfig) -> Result<()> {
    match out {
        Some(dir) => RunDir::create(dir)?.write_config(run),
        None => {
            log::debug!("resolved config:\n{}", run.to_json_pretty());
            Ok(())
        }
    }
}
