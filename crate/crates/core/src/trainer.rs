//! Training loop: crop, augment, forward, summed stage loss, Adam.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use hipa_tensor::Tape;

use crate::checkpoint::Checkpoint;
use crate::config::HipaConfig;
use crate::data::{sample_batch, Dataset};
use crate::error::{HipaError, Result};
use crate::io::write_atomic;
use crate::model::{hipa_loss, Hipa};
use crate::optim::{collect_grads, Adam};
use crate::params::ParamStore;
use crate::rng::{restore, snapshot, stream, Rng, STREAM_DATA};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.bin";
pub const NAN_DUMP: &str = "nan_batch.txt";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.bin")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f32,
    pub seconds: f64,
}

pub struct Trainer {
    pub model: Hipa,
    pub params: ParamStore,
    pub adam: Adam,
    pub rng: Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &HipaConfig) -> Result<Self> {
        let model = Hipa::new(config)?;
        let params = model.init_params();
        let adam = Adam::new(&params, config.lr);
        Ok(Self {
            model,
            params,
            adam,
            rng: stream(config.seed, STREAM_DATA),
            step: 0,
        })
    }

    pub fn resume(ck: Checkpoint) -> Result<Self> {
        Ok(Self {
            model: Hipa::new(&ck.config)?,
            params: ck.params,
            adam: ck.adam,
            rng: restore(ck.rng)?,
            step: ck.step,
        })
    }

    pub fn config(&self) -> &HipaConfig {
        &self.model.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng: snapshot(&self.rng),
        }
    }

    /// One optimization step; returns the loss before the update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f32> {
        let cfg = &self.model.config;
        if data.scale != cfg.scale {
            return Err(HipaError::InvalidConfig(format!(
                "data prepared at ×{} for a ×{} model",
                data.scale, cfg.scale
            )));
        }
        let batch = sample_batch(data, cfg.batch, cfg.lr_crop, &mut self.rng)?;
        let tape = Tape::new();
        let watched = self.params.watched(&tape);
        let preds = self.model.forward(&watched, &batch.lr)?;
        let loss = hipa_loss(&preds, &batch.hr, cfg.loss_weights)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(HipaError::NonFiniteLoss {
                step: self.step + 1,
                loss: value,
                batch: batch.ids,
            });
        }
        let grads = collect_grads(&watched, &loss.backward()?);
        self.adam.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(value)
    }

    /// Trains until `self.step == until`. With `out_dir`, writes a
    /// checkpoint every `ckpt_every` steps plus `ckpt_final.bin`, and keeps
    /// `train_log.csv` current at each of them. Rows already in an existing
    /// log up to the resume step are kept.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(dir) if self.step > 0 => read_log(&dir.join(LOG_FILE))?
                .into_iter()
                .filter(|r| r.step <= self.step)
                .collect(),
            _ => Vec::new(),
        };
        let offset = log.last().map_or(0.0, |r: &StepRecord| r.seconds);
        let start = Instant::now();
        let every = self.config().ckpt_every.max(1);
        while self.step < until {
            let loss = match self.train_step(data) {
                Ok(l) => l,
                Err(e) => {
                    if let (Some(dir), HipaError::NonFiniteLoss { step, loss, batch }) = (out_dir, &e) {
                        let dump = format!("step {step}\nloss {loss}\nbatch {}\n", batch.join(","));
                        write_atomic(&dir.join(NAN_DUMP), dump.as_bytes())?;
                        write_atomic(&dir.join(LOG_FILE), log_csv(&log).as_bytes())?;
                    }
                    return Err(e);
                }
            };
            let rec = StepRecord {
                step: self.step,
                loss,
                seconds: offset + start.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            log.push(rec);
            if let Some(dir) = out_dir {
                if self.step % every == 0 {
                    self.checkpoint().save(&dir.join(checkpoint_name(self.step)))?;
                    write_atomic(&dir.join(LOG_FILE), log_csv(&log).as_bytes())?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
            write_atomic(&dir.join(LOG_FILE), log_csv(&log).as_bytes())?;
        }
        Ok(log)
    }
}

/// Fresh run of `steps` steps from the config's seed.
pub fn train(config: &HipaConfig, data: &Dataset, steps: u64, out_dir: Option<&Path>) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut t = Trainer::new(config)?;
    let log = t.run(data, steps, out_dir, |_| {})?;
    Ok((t.checkpoint(), log))
}

pub fn log_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,seconds\n");
    for r in log {
        writeln!(out, "{},{},{:.3}", r.step, r.loss, r.seconds).unwrap();
    }
    out
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(HipaError::io(path, e)),
    };
    let bad = |line: &str| HipaError::Decode {
        path: path.to_path_buf(),
        msg: format!("bad log row {line:?}"),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut f = line.split(',');
            let mut next = || f.next().ok_or_else(|| bad(line));
            Ok(StepRecord {
                step: next()?.parse().map_err(|_| bad(line))?,
                loss: next()?.parse().map_err(|_| bad(line))?,
                seconds: next()?.parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// Trailing mean over `window` values; the first entries average what is
/// available.
pub fn moving_average(values: &[f32], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        sum += v as f64;
        if i >= window {
            sum -= values[i - window] as f64;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::generate;

    fn tiny() -> (HipaConfig, Dataset) {
        let mut cfg = HipaConfig::desk();
        cfg.lr_crop = 8;
        cfg.batch = 2;
        cfg.ckpt_every = 3;
        let data = Dataset::from_images(&generate(4, 32, 1), cfg.scale).unwrap();
        (cfg, data)
    }

    #[test]
    fn moving_average_closed_form() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (cfg, data) = tiny();
        let (full, _) = train(&cfg, &data, 6, None).unwrap();
        let (half, _) = train(&cfg, &data, 3, None).unwrap();
        let bytes = half.to_bytes().unwrap();
        let mut t = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        t.run(&data, 6, None, |_| {}).unwrap();
        assert_eq!(t.checkpoint().to_bytes().unwrap(), full.to_bytes().unwrap());
    }

    #[test]
    fn writes_checkpoints_and_log() {
        let (cfg, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        let log = t.run(&data, 4, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(log.len(), 4);
        assert!(dir.path().join(checkpoint_name(3)).is_file());
        assert!(dir.path().join(FINAL_CHECKPOINT).is_file());
        let read = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(read.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert!(read.iter().zip(&log).all(|(a, b)| a.loss == b.loss));

        let ck = Checkpoint::load(&dir.path().join(checkpoint_name(3))).unwrap();
        let mut r = Trainer::resume(ck).unwrap();
        r.run(&data, 5, Some(dir.path()), |_| {}).unwrap();
        let read = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(read.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn final_only_weights_leave_stage_heads_alone() {
        let (mut cfg, data) = tiny();
        cfg.loss_weights = [0.0, 0.0, 1.0];
        let mut t = Trainer::new(&cfg).unwrap();
        let before = t.params.clone();
        t.run(&data, 2, None, |_| {}).unwrap();
        for (name, p) in t.params.iter() {
            let same = p.data() == before.get(name).unwrap().data();
            let stage_head = name.starts_with("s1.head") || name.starts_with("s2.head");
            assert_eq!(same, stage_head, "{name}");
        }
    }

    #[test]
    fn nan_aborts_with_batch_ids() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(&cfg).unwrap();
        let first = t.params.names().next().unwrap().to_string();
        t.params.get_mut(&first).unwrap().data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = t.run(&data, 1, Some(dir.path()), |_| {}).unwrap_err();
        assert!(matches!(&err, HipaError::NonFiniteLoss { step: 1, batch, .. } if batch.len() == 2));
        let dump = std::fs::read_to_string(dir.path().join(NAN_DUMP)).unwrap();
        assert!(dump.contains("synth_"));
    }

    #[test]
    fn loss_trends_down_on_toy_data() {
        let (cfg, data) = tiny();
        let (_, log) = train(&cfg, &data, 200, None).unwrap();
        let ma = moving_average(&log.iter().map(|r| r.loss).collect::<Vec<_>>(), 50);
        assert!(ma[199] < ma[49], "{} vs {}", ma[199], ma[49]);
    }
}
