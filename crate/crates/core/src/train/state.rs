use std::fs;
use std::path::Path;

use super::{Adam, TrainError};
use crate::model::{decode_tensors, encode_tensors, write_atomic};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

const STATE_MAGIC: [u8; 8] = *b"HBASTATE";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_loss));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,lr,train_loss,val_loss") {
        return Err(TrainError::State(format!("{} is not a history file", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || TrainError::State(format!("bad history row `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(HistoryRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                train_loss: f[2].parse().map_err(|_| bad())?,
                val_loss: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: Adam<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub history: Vec<HistoryRow>,
    /// Weights of the best epoch so far.
    pub best: ParamStore<f32>,
    /// Set once early stopping triggered.
    pub stopped_early: bool,
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str) -> Result<f64, TrainError> {
    u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| TrainError::State(format!("bad float `{s}`")))
}

impl TrainState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        TrainState {
            epoch: 0,
            optimizer: Adam::new(store),
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            history: Vec::new(),
            best: store.clone(),
            stopped_early: false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!(
            "epoch={}\nstep={}\nbest_val_loss={}\nbest_epoch={}\nsince={}\nstopped_early={}\n",
            self.epoch,
            self.optimizer.step,
            bits(self.best_val_loss),
            self.best_epoch,
            self.epochs_since_improvement,
            self.stopped_early
        );
        for r in &self.history {
            header.push_str(&format!("history={}:{}:{}:{}\n", r.epoch, bits(r.lr), bits(r.train_loss), bits(r.val_loss)));
        }
        let mut tensors = ParamStore::new();
        for (i, (_, p)) in self.best.iter().enumerate() {
            if p.kind == ParamKind::Learnable {
                let shape = p.tensor.shape();
                let moment = |v: &Vec<f32>| Tensor::from_vec(shape, v.clone()).expect("moment sized like its parameter");
                tensors.add(format!("m/{}", p.name), moment(&self.optimizer.m[i]), ParamKind::Buffer);
                tensors.add(format!("v/{}", p.name), moment(&self.optimizer.v[i]), ParamKind::Buffer);
            }
        }
        for (_, p) in self.best.iter() {
            tensors.add(format!("best/{}", p.name), p.tensor.clone(), p.kind);
        }
        encode_tensors(&STATE_MAGIC, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let (header, tensors) = decode_tensors(&STATE_MAGIC, bytes)?;
        let mut state = TrainState {
            epoch: 0,
            optimizer: Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![], v: vec![] },
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            history: Vec::new(),
            best: ParamStore::new(),
            stopped_early: false,
        };
        let num = |v: &str| v.parse::<u64>().map_err(|_| TrainError::State(format!("bad number `{v}`")));
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::State(format!("bad header line `{line}`")))?;
            match k {
                "epoch" => state.epoch = num(v)? as usize,
                "step" => state.optimizer.step = num(v)?,
                "best_val_loss" => state.best_val_loss = unbits(v)?,
                "best_epoch" => state.best_epoch = num(v)? as usize,
                "since" => state.epochs_since_improvement = num(v)? as usize,
                "stopped_early" => state.stopped_early = v == "true",
                "history" => {
                    let f: Vec<&str> = v.split(':').collect();
                    if f.len() != 4 {
                        return Err(TrainError::State(format!("bad history entry `{v}`")));
                    }
                    state.history.push(HistoryRow {
                        epoch: num(f[0])? as usize,
                        lr: unbits(f[1])?,
                        train_loss: unbits(f[2])?,
                        val_loss: unbits(f[3])?,
                    });
                }
                _ => return Err(TrainError::State(format!("unknown state key `{k}`"))),
            }
        }
        for (_, p) in tensors.iter() {
            if let Some(name) = p.name.strip_prefix("best/") {
                state.best.add(name, p.tensor.clone(), p.kind);
            }
        }
        for (_, p) in state.best.iter() {
            let moment = |prefix: &str| -> Result<Vec<f32>, TrainError> {
                match p.kind {
                    ParamKind::Buffer => Ok(Vec::new()),
                    ParamKind::Learnable => {
                        let id = tensors
                            .find(&format!("{prefix}/{}", p.name))
                            .ok_or_else(|| TrainError::State(format!("missing {prefix} moment of {}", p.name)))?;
                        Ok(tensors.tensor(id).data().to_vec())
                    }
                }
            };
            state.optimizer.m.push(moment("m")?);
            state.optimizer.v.push(moment("v")?);
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        TrainState::from_bytes(&fs::read(path)?)
    }
}
