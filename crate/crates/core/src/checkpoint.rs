//! Model and training-state checkpoints as `.npz` archives.
//!
//! Arrays (all `float64`): `param/<name>` for every trainable buffer,
//! `etf/vectors` (d×K), and optionally `optimizer/velocity` and
//! `best/<name>`. Metadata is a JSON document stored as the `uint8` array
//! `meta`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use npyz::npz::{NpzArchive, NpzWriter};
use npyz::WriterBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::SimplexEtf;
use crate::linalg::Matrix;
use crate::model::{ModelHeads, ModelSpec};
use crate::nn::Parameters;
use crate::scalar::Scalar;
use crate::training::{EpochRecord, TrainConfig, TrainState, Trainer};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelSpec,
    pub scalar: String,
    /// original class indices behind the K closed-set outputs
    pub seen_classes: Vec<usize>,
    pub next_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub train: Option<TrainConfig>,
    /// free-form run metadata (config snapshot, hashes, seeds)
    pub run: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: ModelHeads<T>,
    pub velocity: Option<Vec<T>>,
    pub best: Option<ModelHeads<T>>,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_f64(npz: &mut NpzWriter<BufWriter<File>>, path: &Path, name: &str, shape: &[u64], data: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = npz
        .array::<f64>(name, Default::default())
        .map_err(io(path))?
        .default_dtype()
        .shape(shape)
        .begin_nd()
        .map_err(io(path))?;
    w.extend(data).map_err(io(path))?;
    w.finish().map_err(io(path))
}

fn write_params<T: Scalar>(npz: &mut NpzWriter<BufWriter<File>>, path: &Path, prefix: &str, model: &ModelHeads<T>) -> Result<()> {
    let mut result = Ok(());
    model.visit("", &mut |name, p| {
        if result.is_ok() {
            result = write_f64(npz, path, &format!("{prefix}/{name}"), &[p.len() as u64], p.iter().map(|v| v.as_f64()));
        }
    });
    result
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of a model alone (no optimizer state).
    pub fn of_model(model: &ModelHeads<T>, seen_classes: Vec<usize>, run: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                model: model.spec.clone(),
                scalar: T::NAME.into(),
                seen_classes,
                next_epoch: 0,
                history: Vec::new(),
                best_epoch: None,
                train: None,
                run,
            },
            model: model.clone(),
            velocity: None,
            best: None,
        }
    }

    /// Snapshot of a training state at an epoch boundary.
    pub fn of_state(state: &TrainState<T>, seen_classes: Vec<usize>, run: serde_json::Value) -> Self {
        Self {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                model: state.trainer.model.spec.clone(),
                scalar: T::NAME.into(),
                seen_classes,
                next_epoch: state.next_epoch,
                history: state.history.clone(),
                best_epoch: state.best.as_ref().map(|b| b.0),
                train: Some(state.trainer.config.clone()),
                run,
            },
            model: state.trainer.model.clone(),
            velocity: Some(state.trainer.optimizer.velocity().to_vec()),
            best: state.best.as_ref().map(|b| b.1.clone()),
        }
    }

    /// Rebuilds the training state; fails for model-only checkpoints.
    pub fn into_state(self) -> Result<TrainState<T>> {
        let config = self
            .meta
            .train
            .ok_or_else(|| Error::Mismatch("checkpoint holds no training state".into()))?;
        let mut trainer = Trainer::new(self.model, config)?;
        if let Some(v) = self.velocity {
            trainer.optimizer.set_velocity(v)?;
        }
        let best = match (self.meta.best_epoch, self.best) {
            (Some(e), Some(m)) => Some((e, m)),
            _ => None,
        };
        Ok(TrainState {
            trainer,
            next_epoch: self.meta.next_epoch,
            history: self.meta.history,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut npz = NpzWriter::create(path).map_err(io(path))?;
        write_params(&mut npz, path, "param", &self.model)?;
        let etf = self.model.etf().vectors();
        write_f64(
            &mut npz,
            path,
            "etf/vectors",
            &[etf.rows() as u64, etf.cols() as u64],
            etf.as_slice().iter().map(|v| v.as_f64()),
        )?;
        if let Some(v) = &self.velocity {
            write_f64(&mut npz, path, "optimizer/velocity", &[v.len() as u64], v.iter().map(|x| x.as_f64()))?;
        }
        if let Some(b) = &self.best {
            write_params(&mut npz, path, "best", b)?;
        }
        let meta = serde_json::to_vec(&self.meta)?;
        let mut w = npz
            .array::<u8>("meta", Default::default())
            .map_err(io(path))?
            .default_dtype()
            .shape(&[meta.len() as u64])
            .begin_nd()
            .map_err(io(path))?;
        w.extend(meta).map_err(io(path))?;
        w.finish().map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io(path))?;
        let mut npz = NpzArchive::new(BufReader::new(file)).map_err(io(path))?;
        let names: Vec<String> = npz.array_names().map(str::to_string).collect();
        let mut arrays: HashMap<String, Vec<f64>> = HashMap::new();
        let mut meta_bytes = None;
        for name in names {
            let npy = npz
                .by_name(&name)
                .map_err(io(path))?
                .ok_or_else(|| Error::Dataset(format!("{}: array `{name}` vanished", path.display())))?;
            if name == "meta" {
                meta_bytes = Some(npy.into_vec::<u8>().map_err(io(path))?);
            } else {
                arrays.insert(name, npy.into_vec::<f64>().map_err(io(path))?);
            }
        }
        let meta: CheckpointMeta = serde_json::from_slice(
            &meta_bytes.ok_or_else(|| Error::Serde(format!("{}: no `meta` array", path.display())))?,
        )?;
        if meta.format != FORMAT_VERSION {
            return Err(Error::Mismatch(format!(
                "checkpoint format {} (this build reads {FORMAT_VERSION})",
                meta.format
            )));
        }
        let etf_vals = arrays
            .remove("etf/vectors")
            .ok_or_else(|| Error::Serde("checkpoint has no `etf/vectors`".into()))?;
        let d = meta.model.backbone.feature_dim();
        let k = meta.model.num_classes;
        let etf = SimplexEtf::from_vectors(
            Matrix::from_vec(d, k, etf_vals.into_iter().map(T::lit).collect())?,
            Some(meta.model.seed),
        )?;

        let restore = |prefix: &str, arrays: &mut HashMap<String, Vec<f64>>| -> Result<ModelHeads<T>> {
            let mut model = ModelHeads::<T>::new(meta.model.clone())?;
            model.set_etf(etf.clone())?;
            let mut problem = None;
            model.visit_mut("", &mut |name, p| {
                match arrays.remove(&format!("{prefix}/{name}")) {
                    Some(v) if v.len() == p.len() => {
                        for (dst, src) in p.iter_mut().zip(v) {
                            *dst = T::lit(src);
                        }
                    }
                    Some(v) => {
                        problem.get_or_insert(format!("{prefix}/{name}: {} values, model needs {}", v.len(), p.len()));
                    }
                    None => {
                        problem.get_or_insert(format!("{prefix}/{name}: missing"));
                    }
                }
            });
            match problem {
                Some(p) => Err(Error::Mismatch(format!("checkpoint {}: {p}", path.display()))),
                None => Ok(model),
            }
        };
        let model = restore("param", &mut arrays)?;
        let best = if meta.best_epoch.is_some() && arrays.keys().any(|k| k.starts_with("best/")) {
            Some(restore("best", &mut arrays)?)
        } else {
            None
        };
        let velocity = arrays
            .remove("optimizer/velocity")
            .map(|v| v.into_iter().map(T::lit).collect());
        Ok(Self {
            meta,
            model,
            velocity,
            best,
        })
    }
}
