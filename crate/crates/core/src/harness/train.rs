//! Training, evaluation and checkpointing.

use std::collections::HashMap;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelOutput, SequenceInput};
use crate::heads::{loss_for, LigandGraph, Target};
use crate::metrics::{report_for, MetricReport, Predictions};
use crate::protein::embedding::Embedding;
use crate::protein::{build_graph, filter_max_length, Dataset, ProteinGraph, TaskKind};
use crate::rng::{stream, tag};
use crate::tensor::{checkpoint, Graph, ParamStore, Tensor};

/// One featurized record, ready for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub graph: ProteinGraph,
    pub tokens: Vec<usize>,
    pub embedding: Option<Embedding>,
    pub ligand: Option<LigandGraph>,
    pub target: Target,
}

/// Featurizes `ds` under `cfg`. Records longer than `max_len` are dropped
/// with a warning.
pub fn prepare(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<Example>> {
    if let Some(task) = ds.task {
        if task != cfg.task {
            return Err(Error::Config(format!(
                "dataset task {task} does not match configured task {}",
                cfg.task
            )));
        }
    }
    let (records, dropped) = filter_max_length(ds.records.clone(), cfg.max_len);
    if dropped > 0 {
        warn!(
            "dropped {dropped} records longer than {} residues",
            cfg.max_len
        );
    }
    records
        .iter()
        .map(|rec| {
            let embedding = match &cfg.embeddings {
                Some(dir) => Some(Embedding::load(dir.join(format!("{}.bhem", rec.id())))?),
                None => None,
            };
            Ok(Example {
                id: rec.id().to_string(),
                graph: build_graph(&rec.structure, cfg.cutoff, cfg.level)?,
                tokens: rec.structure.tokens(),
                embedding,
                ligand: rec.ligand.clone(),
                target: Target::from_record(cfg.task, rec)?,
            })
        })
        .collect()
}

fn sequence(ex: &Example) -> SequenceInput<'_> {
    match &ex.embedding {
        Some(e) => SequenceInput::Embedding(e),
        None => SequenceInput::Tokens(&ex.tokens),
    }
}

/// Forward pass and task loss for one example.
pub fn forward_example<R: rand::Rng + ?Sized>(
    model: &FusionModel,
    ex: &Example,
    training: bool,
    rng: &mut R,
) -> Result<(Graph, ModelOutput, crate::tensor::Var)> {
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        &ex.graph,
        sequence(ex),
        ex.ligand.as_ref(),
        training,
        rng,
    )?;
    let loss = loss_for(&mut g, model.config.task, out.prediction, &ex.target)?;
    Ok((g, out, loss))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies accumulated gradients times `scale`. Parameters without a
    /// gradient accumulator are left alone.
    pub fn step(&mut self, store: &mut ParamStore, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let t = store.tensor_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN without a validation split.
    pub val_loss: f64,
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.detached()).collect()
}

/// Model, optimizer and progress of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: FusionModel,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best: Option<Vec<Tensor>>,
    pub history: Vec<EpochLog>,
}

fn apply_freeze(model: &mut FusionModel, freeze: bool) {
    if !freeze {
        return;
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).starts_with("plm.") {
            model.params.tensor_mut(id).set_requires_grad(false);
        }
    }
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut model = FusionModel::new(config.model_config(), config.seed)?;
        apply_freeze(&mut model, config.freeze_plm);
        let adam = Adam::new(&model.params, config.lr);
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
            best_val: f64::INFINITY,
            best: None,
            history: Vec::new(),
        })
    }

    /// Runs one epoch and returns the mean training loss over its items.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::DegenerateInput("empty training split"));
        }
        let seed = self.config.seed;
        let epoch = self.epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, &[tag::SHUFFLE, epoch]));
        let mut total = 0.0;
        for (step, batch) in order.chunks(self.config.batch_size).enumerate() {
            let mut rng = stream(seed, &[tag::DROPOUT, epoch, step as u64]);
            let ids = || {
                batch
                    .iter()
                    .map(|i| train[*i].id.clone())
                    .collect::<Vec<_>>()
            };
            self.model.params.zero_grad();
            for &i in batch {
                let result = forward_example(&self.model, &train[i], true, &mut rng);
                let (g, _, loss) = match result {
                    Err(e) if e.is_numeric() => return Err(Error::Diverged(ids())),
                    other => other?,
                };
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Diverged(ids()));
                }
                total += value;
                g.backward_into(loss, &mut self.model.params)?;
            }
            if self
                .model
                .params
                .iter()
                .any(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            {
                return Err(Error::Diverged(ids()));
            }
            self.adam
                .step(&mut self.model.params, 1.0 / batch.len() as f64);
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// Trains until `config.epochs` epochs are complete, keeping the
    /// parameters with the lowest validation loss.
    pub fn fit(&mut self, train: &[Example], val: Option<&[Example]>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let train_loss = self.train_epoch(train)?;
            let val_loss = match val {
                Some(v) if !v.is_empty() => mean_loss(&self.model, v)?,
                _ => f64::NAN,
            };
            if val_loss < self.best_val {
                self.best_val = val_loss;
                self.best = Some(snapshot(&self.model.params));
            }
            info!(
                "epoch {} train_loss={train_loss} val_loss={val_loss}",
                self.epoch
            );
            self.history.push(EpochLog {
                epoch: self.epoch,
                train_loss,
                val_loss,
            });
        }
        Ok(())
    }

    /// Model carrying the best-validation parameters, or the current ones
    /// when no validation split was used.
    pub fn best_model(&self) -> FusionModel {
        let mut model = self.model.clone();
        if let Some(best) = &self.best {
            let ids: Vec<_> = model.params.ids().collect();
            for (id, t) in ids.into_iter().zip(best) {
                model
                    .params
                    .tensor_mut(id)
                    .data_mut()
                    .copy_from_slice(t.data());
            }
        }
        model
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let names: Vec<String> = self
            .model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        for (name, (_, t)) in names.iter().zip(self.model.params.iter()) {
            out.push((format!("param/{name}"), t.detached()));
        }
        for (k, name) in names.iter().enumerate() {
            let shape = self
                .model
                .params
                .iter()
                .nth(k)
                .map(|(_, t)| t.shape().to_vec())
                .expect("listed");
            out.push((
                format!("adam.m/{name}"),
                Tensor::new(shape.clone(), self.adam.m[k].clone()).expect("shape"),
            ));
            out.push((
                format!("adam.v/{name}"),
                Tensor::new(shape, self.adam.v[k].clone()).expect("shape"),
            ));
        }
        if let Some(best) = &self.best {
            for (name, t) in names.iter().zip(best) {
                out.push((format!("best/{name}"), t.clone()));
            }
        }
        out.push(("meta/epoch".into(), Tensor::scalar(self.epoch as f64)));
        out.push(("meta/adam_t".into(), Tensor::scalar(self.adam.t as f64)));
        out.push(("meta/best_val".into(), Tensor::scalar(self.best_val)));
        let history: Vec<f64> = self
            .history
            .iter()
            .flat_map(|h| [h.epoch as f64, h.train_loss, h.val_loss])
            .collect();
        out.push((
            "meta/history".into(),
            Tensor::new(vec![self.history.len(), 3], history).expect("shape"),
        ));
        let text = self.config.to_text();
        let bytes = text.bytes().map(f64::from).collect();
        out.push(("meta/config".into(), Tensor::vector(bytes)));
        out
    }

    /// Rebuilds a trainer from checkpoint tensors. `config` overrides the
    /// stored snapshot when given; its model shape must match.
    pub fn from_tensors(tensors: Vec<(String, Tensor)>, config: Option<RunConfig>) -> Result<Self> {
        let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let stored = config_from_tensor(&take("meta/config")?)?;
        let config = config.unwrap_or(stored);
        let mut trainer = Trainer::new(config)?;
        let scalar = |t: Tensor| {
            t.data()
                .first()
                .copied()
                .ok_or_else(|| Error::Format("empty meta tensor".into()))
        };
        trainer.epoch = scalar(take("meta/epoch")?)? as usize;
        trainer.adam.t = scalar(take("meta/adam_t")?)? as u64;
        trainer.best_val = scalar(take("meta/best_val")?)?;
        let history = take("meta/history")?;
        trainer.history = history
            .data()
            .chunks_exact(3)
            .map(|r| EpochLog {
                epoch: r[0] as usize,
                train_loss: r[1],
                val_loss: r[2],
            })
            .collect();
        let names: Vec<String> = trainer
            .model
            .params
            .iter()
            .map(|(n, _)| n.to_string())
            .collect();
        let ids: Vec<_> = trainer.model.params.ids().collect();
        let mut best = Vec::new();
        for (k, (name, id)) in names.iter().zip(ids).enumerate() {
            let expected = trainer.model.params.tensor(id).shape().to_vec();
            let mut load = |prefix: &str| -> Result<Option<Tensor>> {
                let Some(t) = map.remove(&format!("{prefix}/{name}")) else {
                    return Ok(None);
                };
                if t.shape() != expected.as_slice() {
                    return Err(Error::Format(format!(
                        "{prefix}/{name}: shape {:?}, model has {expected:?}",
                        t.shape()
                    )));
                }
                Ok(Some(t))
            };
            let p = load("param")?
                .ok_or_else(|| Error::Format(format!("checkpoint lacks param/{name}")))?;
            trainer
                .model
                .params
                .tensor_mut(id)
                .data_mut()
                .copy_from_slice(p.data());
            if let Some(m) = load("adam.m")? {
                trainer.adam.m[k] = m.into_data();
            }
            if let Some(v) = load("adam.v")? {
                trainer.adam.v[k] = v.into_data();
            }
            if let Some(b) = load("best")? {
                best.push(b);
            }
        }
        if !best.is_empty() {
            if best.len() != names.len() {
                return Err(Error::Format("incomplete best-parameter set".into()));
            }
            trainer.best = Some(best);
        }
        if let Some(extra) = map.keys().find(|k| k.starts_with("param/")) {
            return Err(Error::Format(format!(
                "checkpoint has unknown parameter {extra}"
            )));
        }
        Ok(trainer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>, config: Option<RunConfig>) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?, config)
    }
}

fn config_from_tensor(t: &Tensor) -> Result<RunConfig> {
    let bytes: Vec<u8> = t.data().iter().map(|v| *v as u8).collect();
    let text =
        String::from_utf8(bytes).map_err(|_| Error::Format("stored config is not UTF-8".into()))?;
    RunConfig::parse(&text)
}

/// Reads the config snapshot stored in a checkpoint file.
pub fn checkpoint_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let tensors = checkpoint::load(path)?;
    let t = tensors
        .iter()
        .find(|(n, _)| n == "meta/config")
        .ok_or_else(|| Error::Format("checkpoint lacks meta/config".into()))?;
    config_from_tensor(&t.1)
}

fn eval_rng() -> crate::rng::Rng {
    stream(0, &[tag::CHECK])
}

/// Mean eval-mode loss.
pub fn mean_loss(model: &FusionModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("empty evaluation split"));
    }
    let mut total = 0.0;
    for ex in examples {
        let (g, _, loss) = forward_example(model, ex, false, &mut eval_rng())?;
        total += g.value(loss).data()[0];
    }
    Ok(total / examples.len() as f64)
}

/// Model output for one example in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    /// Scalar prediction, class logits, or per-residue logits.
    pub values: Vec<f64>,
    pub class: Option<usize>,
    pub loss: f64,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| {
            if *x > bv {
                (i, *x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn predict(model: &FusionModel, ex: &Example) -> Result<Prediction> {
    let (g, out, loss) = forward_example(model, ex, false, &mut eval_rng())?;
    let values = g.value(out.prediction).data().to_vec();
    let class = (model.config.task.kind() == TaskKind::Classification).then(|| argmax(&values));
    Ok(Prediction {
        id: ex.id.clone(),
        values,
        class,
        loss: g.value(loss).data()[0],
    })
}

/// Eval-mode metrics over a split; an empty split is an error.
pub fn evaluate(model: &FusionModel, examples: &[Example]) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("empty evaluation split"));
    }
    let task = model.config.task;
    let mut p = Predictions::default();
    let mut total = 0.0;
    for ex in examples {
        let pred = predict(model, ex)?;
        total += pred.loss;
        match &ex.target {
            Target::Scalar(v) => {
                p.scalar.push(pred.values[0]);
                p.scalar_truth.push(*v);
            }
            Target::Class(c) => {
                p.classes.push(pred.class.expect("classification task"));
                p.class_truth.push(*c);
            }
            Target::PerResidue(labels) => {
                p.residue_scores.extend(&pred.values);
                p.residue_truth.extend(labels);
            }
        }
    }
    report_for(
        &task.to_string(),
        task.kind(),
        examples.len(),
        total / examples.len() as f64,
        &p,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::harness::synth::{generate_synthetic, SynthSpec};
    use crate::protein::Task;

    fn tiny(task: Task, mode: FusionMode) -> RunConfig {
        RunConfig {
            task,
            mode,
            epochs: 3,
            batch_size: 2,
            hidden_dim: 8,
            plm_dim: 8,
            plm_ffn: 16,
            max_len: 32,
            num_classes: 4,
            ..RunConfig::default()
        }
    }

    fn data(task: Task, n: usize, seed: u64) -> Dataset {
        let mut spec = SynthSpec::new(task, n, 5..=9, seed);
        spec.num_classes = 4;
        generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0, 0.5]));
        let id = store.id("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.sum_all(w).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, 1.0);
        for (a, b) in store.tensor(id).data().iter().zip([1.0, -1.0, 0.5]) {
            assert!((a - (b - 0.1)).abs() < 1e-8);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny(Task::Mqa, FusionMode::LocalGated);
        let ex = prepare(&cfg, &data(Task::Mqa, 5, 1)).unwrap();
        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.fit(&ex, Some(&ex[..2])).unwrap();
        let mut again = Trainer::new(cfg.clone()).unwrap();
        again.fit(&ex, Some(&ex[..2])).unwrap();
        assert_eq!(
            checkpoint::encode(&full.to_tensors()),
            checkpoint::encode(&again.to_tensors())
        );

        let mut half = Trainer::new(RunConfig {
            epochs: 1,
            ..cfg.clone()
        })
        .unwrap();
        half.fit(&ex, Some(&ex[..2])).unwrap();
        let bytes = checkpoint::encode(&half.to_tensors());
        let mut resumed =
            Trainer::from_tensors(checkpoint::decode(&bytes).unwrap(), Some(cfg)).unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.fit(&ex, Some(&ex[..2])).unwrap();
        assert_eq!(
            snapshot(&resumed.model.params),
            snapshot(&full.model.params)
        );
        assert_eq!(resumed.history, full.history);
    }

    #[test]
    fn checkpoint_reload_reproduces_reports() {
        let cfg = tiny(Task::Reaction, FusionMode::GlobalAttention);
        let ex = prepare(&cfg, &data(Task::Reaction, 4, 2)).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.fit(&ex, Some(&ex)).unwrap();
        let before = evaluate(&t.best_model(), &ex).unwrap();
        let loaded = Trainer::from_tensors(
            checkpoint::decode(&checkpoint::encode(&t.to_tensors())).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(loaded.config, t.config);
        assert_eq!(evaluate(&loaded.best_model(), &ex).unwrap(), before);
        assert!(before.get("accuracy").is_some());
        assert!(evaluate(&t.best_model(), &[]).is_err());
    }

    #[test]
    fn frozen_plm_is_untouched() {
        let cfg = RunConfig {
            freeze_plm: true,
            ..tiny(Task::Ppbs, FusionMode::Serial)
        };
        let ex = prepare(&cfg, &data(Task::Ppbs, 4, 3)).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let plm = |s: &ParamStore| -> Vec<Tensor> {
            s.iter()
                .filter(|(n, _)| n.starts_with("plm."))
                .map(|(_, t)| t.detached())
                .collect()
        };
        let gnn = |s: &ParamStore| -> Vec<Tensor> {
            s.iter()
                .filter(|(n, _)| n.starts_with("gnn."))
                .map(|(_, t)| t.detached())
                .collect()
        };
        let (p0, g0) = (plm(&t.model.params), gnn(&t.model.params));
        t.fit(&ex, None).unwrap();
        assert_eq!(plm(&t.model.params), p0);
        assert_ne!(gnn(&t.model.params), g0);
        assert!(evaluate(&t.best_model(), &ex)
            .unwrap()
            .get("residue_accuracy")
            .is_some());
    }

    #[test]
    fn task_mismatch_and_divergence() {
        let cfg = tiny(Task::Mqa, FusionMode::None);
        assert!(prepare(&cfg, &data(Task::Reaction, 2, 1)).is_err());
        let mut ex = prepare(&cfg, &data(Task::Mqa, 2, 1)).unwrap();
        ex[1].target = Target::Scalar(f64::NAN);
        let mut t = Trainer::new(RunConfig {
            batch_size: 1,
            ..cfg
        })
        .unwrap();
        let err = t.fit(&ex, None).unwrap_err();
        match err {
            Error::Diverged(ids) => assert_eq!(ids, vec![ex[1].id.clone()]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ligand_task_trains() {
        let cfg = tiny(Task::Lba, FusionMode::None);
        let ex = prepare(&cfg, &data(Task::Lba, 3, 4)).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.fit(&ex, None).unwrap();
        let r = evaluate(&t.best_model(), &ex).unwrap();
        assert!(r.get("rmse").unwrap().is_finite());
    }
}
