//! Two-phase training loop, optimizer, metrics log and resumable state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::datamodel::{DatasetIndex, RegionVocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_modes, EvalMode, EvalRecord, EvalResult};
use crate::model::{Model, Phase, PreparedSample, Variant};
use crate::network::{Checkpoint, DType};
use crate::sampler::{epoch_plan, SamplerConfig};
use crate::tensor::{ParamSet, Tensor};

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet,
    pub v: ParamSet,
    /// Update count per parameter, for bias correction.
    pub steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: BTreeMap::new(),
        }
    }

    /// Updates every parameter whose name passes `select`.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr: f64,
        weight_decay: f64,
        select: impl Fn(&str) -> bool,
    ) {
        for (name, p) in params.iter_mut() {
            if !select(name) {
                continue;
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            let v = self.v.get_mut(name);
            for i in 0..p.data.len() {
                let gi = g.data[i] + weight_decay * p.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Position in the schedule: the next batch to run is `batch` of `epoch` in `phase`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: u8,
    pub epoch: usize,
    pub batch: usize,
    pub global_step: u64,
}

impl Progress {
    fn start() -> Self {
        Self {
            phase: 1,
            epoch: 0,
            batch: 0,
            global_step: 0,
        }
    }
}

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: u8,
    pub epoch: usize,
    pub id_main: Option<f64>,
    pub id_attn: Option<f64>,
    pub ccl: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step\tphase\tepoch\tid_main\tid_attn\tccl\ttotal\tlr";

impl StepRecord {
    /// Tab-separated row matching [`METRICS_HEADER`]; absent terms print as `-`.
    pub fn to_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:e}",
            self.step,
            self.phase,
            self.epoch,
            opt(self.id_main),
            opt(self.id_attn),
            opt(self.ccl),
            self.total,
            self.lr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Finished,
    /// Stopped early at the requested step budget.
    Paused,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub adam: Adam,
    pub progress: Progress,
    /// Training identity to class index.
    pub classes: BTreeMap<u32, usize>,
    /// Digest of the attention-stream weights when pretraining ended.
    pub phase1_fingerprint: Option<String>,
    vocab: RegionVocabulary,
}

fn attention_fingerprint(params: &ParamSet) -> String {
    params.with_prefix("attn.").fingerprint()
}

/// Derived generator for a `(seed, stream)` pair.
fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Trainer {
    pub fn new(config: &Config, train: &DatasetIndex) -> Result<Self> {
        let ids = train.identities();
        if ids.len() < 2 {
            return Err(Error::Config(format!(
                "training needs at least 2 identities, found {}",
                ids.len()
            )));
        }
        let classes = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self::with_classes(config, classes)
    }

    fn with_classes(config: &Config, classes: BTreeMap<u32, usize>) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec(config.train.variant, classes.len());
        let model = Model::new(spec, config.train.seed)?;
        let adam = Adam::new(&model.params);
        let mut progress = Progress::start();
        if !config.train.variant.has_attention() || config.train.phase1_epochs == 0 {
            progress.phase = 2;
        }
        Ok(Self {
            config: config.clone(),
            model,
            adam,
            progress,
            classes,
            phase1_fingerprint: None,
            vocab: config.data.vocabulary()?,
        })
    }

    pub fn variant(&self) -> Variant {
        self.model.spec.variant
    }

    pub fn is_finished(&self) -> bool {
        self.progress.phase > 2
    }

    fn sampler_for(&self, phase: u8, epoch: usize) -> SamplerConfig {
        let mut s = self.config.sampler;
        let global_epoch = if phase == 1 {
            epoch
        } else {
            self.config.train.phase1_epochs + epoch
        };
        s.seed = s.seed.wrapping_mul(1_000_003).wrapping_add(global_epoch as u64);
        s
    }

    fn lr(&self) -> f64 {
        if self.progress.phase == 1 {
            self.config.train.lr
        } else {
            self.config.train.lr_at(self.progress.epoch)
        }
    }

    fn epochs_in(&self, phase: u8) -> usize {
        if phase == 1 {
            self.config.train.phase1_epochs
        } else {
            self.config.train.phase2_epochs
        }
    }

    fn advance_epoch(&mut self) {
        self.progress.batch = 0;
        self.progress.epoch += 1;
        while self.progress.phase <= 2 && self.progress.epoch >= self.epochs_in(self.progress.phase) {
            if self.progress.phase == 1 {
                self.phase1_fingerprint = Some(attention_fingerprint(&self.model.params));
            }
            self.progress.phase += 1;
            self.progress.epoch = 0;
        }
    }

    /// Total optimizer steps of a full run from scratch on `train`.
    pub fn planned_steps(&self, train: &DatasetIndex) -> Result<u64> {
        let first = if self.variant().has_attention() { 1 } else { 2 };
        let mut total = 0;
        for phase in first..=2u8 {
            for epoch in 0..self.epochs_in(phase) {
                total += epoch_plan(train, &self.sampler_for(phase, epoch))?.len() as u64;
            }
        }
        Ok(total)
    }

    /// Runs batches until training completes or `max_steps` more steps have run.
    /// Every step is reported to `on_step`.
    pub fn run(
        &mut self,
        train: &DatasetIndex,
        max_steps: Option<u64>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<RunStatus> {
        if self.progress.phase == 1 && self.epochs_in(1) == 0 {
            self.progress.phase = 2;
        }
        if self.progress.phase == 2 && self.epochs_in(2) == 0 {
            self.progress.phase = 3;
        }
        let mut cache: Vec<[Option<PreparedSample>; 2]> = vec![[None, None]; train.len()];
        let mut done = 0u64;
        while !self.is_finished() {
            let phase = self.progress.phase;
            let plan = epoch_plan(train, &self.sampler_for(phase, self.progress.epoch))?;
            if plan.is_empty() {
                return Err(Error::Config("the sampler produced no batches for this training set".into()));
            }
            while self.progress.batch < plan.len() {
                if max_steps.is_some_and(|m| done >= m) {
                    return Ok(RunStatus::Paused);
                }
                let positions = &plan[self.progress.batch];
                let record = self.step(train, positions, &mut cache)?;
                on_step(&record);
                self.progress.batch += 1;
                self.progress.global_step += 1;
                done += 1;
            }
            self.advance_epoch();
        }
        Ok(RunStatus::Finished)
    }

    fn step(
        &mut self,
        train: &DatasetIndex,
        positions: &[usize],
        cache: &mut [[Option<PreparedSample>; 2]],
    ) -> Result<StepRecord> {
        let mut rng = derived_rng(self.config.train.seed, self.progress.global_step + 1);
        let mut batch = Vec::with_capacity(positions.len());
        let mut targets = Vec::with_capacity(positions.len());
        for &p in positions {
            let flip = self.config.train.flip && rng.gen_bool(0.5);
            let slot = &mut cache[p][flip as usize];
            if slot.is_none() {
                *slot = Some(self.model.prepare(train.get(p), &self.vocab, flip)?);
            }
            let s = slot.clone().expect("prepared");
            targets.push(self.classes[&s.identity]);
            batch.push(s);
        }
        let phase = if self.progress.phase == 1 {
            Phase::AttentionOnly
        } else {
            Phase::Joint
        };
        let (parts, grads) = self
            .model
            .loss_and_grads(&batch, &targets, &self.config.loss, phase)?;
        let lr = self.lr();
        let record = StepRecord {
            step: self.progress.global_step,
            phase: self.progress.phase,
            epoch: self.progress.epoch,
            id_main: parts.id_main,
            id_attn: parts.id_attn,
            ccl: parts.ccl,
            total: parts.total,
            lr,
        };
        if !parts.total.is_finite() || !grads.all_finite() {
            let ids: Vec<u32> = batch.iter().map(|s| s.identity).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {} (phase {}, epoch {}); components {}; batch identities {ids:?}",
                record.step,
                record.phase,
                record.epoch,
                record.to_row()
            )));
        }
        let freeze = self.config.train.freeze_attention;
        let phase1 = phase == Phase::AttentionOnly;
        self.adam.step(
            &mut self.model.params,
            &grads,
            lr,
            self.config.train.weight_decay,
            |name| {
                let attn = name.starts_with("attn.");
                if phase1 {
                    attn
                } else {
                    !(freeze && attn)
                }
            },
        );
        Ok(record)
    }

    /// Full training state as a checkpoint (stored in `f64` so resuming is exact).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, t) in self.model.params.iter().chain(self.model.buffers.iter()) {
            tensors.insert(n.clone(), t.clone());
        }
        for (n, t) in self.adam.m.iter() {
            tensors.insert(format!("optim.m.{n}"), t.clone());
        }
        for (n, t) in self.adam.v.iter() {
            tensors.insert(format!("optim.v.{n}"), t.clone());
        }
        let extras = serde_json::json!({
            "variant": self.variant(),
            "input": [self.model.spec.input.0, self.model.spec.input.1],
            "num_classes": self.model.spec.num_classes,
            "classes": self.classes.iter().map(|(id, c)| (id.to_string(), *c)).collect::<BTreeMap<_, _>>(),
            "progress": self.progress,
            "adam_steps": self.adam.steps,
            "phase1_fingerprint": self.phase1_fingerprint,
            "seed": self.config.train.seed,
            "config": self.config.to_toml_string(),
            "config_hash": self.config.hash(),
        });
        Checkpoint {
            backbone: self.model.spec.backbone.clone(),
            ikt_kernel_size: self.model.spec.ikt_kernel,
            tensors,
            extras,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path, DType::F64)
    }

    /// Restores a trainer saved by [`Trainer::save`], with the configuration it was saved with.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text: String = extra(ck, "config")?;
        let config = Config::from_toml_str(&text)?;
        let mut trainer = Self::with_classes(&config, checkpoint_classes(ck)?)?;
        trainer.restore(ck)?;
        Ok(trainer)
    }

    /// Overwrites weights, optimizer state and progress with those of `ck`.
    /// Every tensor must match this trainer's layout.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let expected = self.to_checkpoint().tensors.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect();
        let problems = ck.shape_mismatches(&expected);
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("shape mismatch:\n  {}", problems.join("\n  "))));
        }
        let classes = checkpoint_classes(ck)?;
        if classes != self.classes {
            return Err(Error::Checkpoint(
                "checkpoint was trained on a different identity set".into(),
            ));
        }
        let progress: Progress = extra(ck, "progress")?;
        let steps: BTreeMap<String, u64> = extra(ck, "adam_steps")?;
        let fingerprint: Option<String> = extra(ck, "phase1_fingerprint")?;
        let sets = [&mut self.model.params, &mut self.model.buffers];
        for set in sets {
            for (name, t) in set.iter_mut() {
                *t = ck.tensors[name].clone();
            }
        }
        for (name, m) in self.adam.m.iter_mut() {
            *m = ck.tensors[&format!("optim.m.{name}")].clone();
        }
        for (name, v) in self.adam.v.iter_mut() {
            *v = ck.tensors[&format!("optim.v.{name}")].clone();
        }
        if progress.phase == 2 && progress.epoch == 0 && progress.batch == 0 {
            if let Some(expected) = &fingerprint {
                if &attention_fingerprint(&self.model.params) != expected {
                    return Err(Error::Checkpoint(
                        "attention-stream weights do not match the pretraining fingerprint".into(),
                    ));
                }
            }
        }
        self.adam.steps = steps;
        self.progress = progress;
        self.phase1_fingerprint = fingerprint;
        Ok(())
    }

    /// Retrieval features for every sample of `index`.
    pub fn extract(&self, index: &DatasetIndex) -> Result<Vec<EvalRecord>> {
        extract_features(&self.model, index, &self.vocab)
    }
}

fn extra<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck
        .extras
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks '{key}'")))?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("'{key}': {e}")))
}

fn checkpoint_classes(ck: &Checkpoint) -> Result<BTreeMap<u32, usize>> {
    let raw: BTreeMap<String, usize> = extra(ck, "classes")?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<u32>()
                .map(|id| (id, v))
                .map_err(|_| Error::Checkpoint(format!("bad identity key '{k}'")))
        })
        .collect()
}

/// Builds the model stored in a checkpoint, reporting every missing or
/// mis-shaped tensor.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let variant: Variant = extra(ck, "variant")?;
    let input: (usize, usize) = extra(ck, "input")?;
    let num_classes: usize = extra(ck, "num_classes")?;
    let spec = crate::model::ModelSpec {
        variant,
        backbone: ck.backbone.clone(),
        input,
        num_classes,
        ikt_kernel: ck.ikt_kernel_size,
    };
    let template = Model::new(spec.clone(), 0)?;
    let mut params = ParamSet::new();
    let mut problems = Vec::new();
    for (name, shape) in template.params.shapes() {
        match ck.tensors.get(&name) {
            None => problems.push(format!("{name}: missing (expected {shape:?})")),
            Some(t) if t.shape != shape => problems.push(format!("{name}: found {:?}, expected {shape:?}", t.shape)),
            Some(t) => params.insert(name, t.clone()),
        }
    }
    let mut buffers = template.buffers.clone();
    for (name, t) in buffers.iter_mut() {
        match ck.tensors.get(name) {
            Some(found) if found.shape == t.shape => *t = found.clone(),
            Some(found) => problems.push(format!("{name}: found {:?}, expected {:?}", found.shape, t.shape)),
            None => problems.push(format!("{name}: missing (expected {:?})", t.shape)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!("shape mismatch:\n  {}", problems.join("\n  "))));
    }
    Model::from_parts(spec, params, buffers)
}

/// Retrieval features for every sample of `index`, in index order.
pub fn extract_features(model: &Model, index: &DatasetIndex, vocab: &RegionVocabulary) -> Result<Vec<EvalRecord>> {
    index
        .samples()
        .iter()
        .map(|s| {
            let prepared = model.prepare(s, vocab, false)?;
            Ok(EvalRecord {
                feature: model.embed(&prepared)?,
                identity: s.identity,
                clothing: s.clothing,
                camera: s.camera,
            })
        })
        .collect()
}

/// Trains one variant to completion, collecting the metrics rows.
pub fn train_to_end(config: &Config, train: &DatasetIndex) -> Result<(Trainer, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config, train)?;
    let mut log = Vec::new();
    trainer.run(train, None, &mut |r| log.push(*r))?;
    Ok((trainer, log))
}

pub fn format_metrics(records: &[StepRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.to_row());
    }
    out
}

pub const ABLATION_HEADER: &str =
    "variant\tlabel\tseed\tconfig_hash\tcc_rank1\tcc_mAP\tsc_rank1\tsc_mAP\tgeneral_rank1\tgeneral_mAP";

/// One trained variant of an ablation sweep.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// Hash of the shared base configuration.
    pub config_hash: String,
    pub results: Vec<EvalResult>,
    pub trainer: Trainer,
    pub log: Vec<StepRecord>,
}

impl AblationRow {
    /// Rank-1 and mAP in percent.
    pub fn metric(&self, mode: EvalMode) -> (f64, f64) {
        let r = self.results.iter().find(|r| r.mode == mode).expect("all modes evaluated");
        (100.0 * r.rank(1), 100.0 * r.map)
    }

    pub fn to_row(&self) -> String {
        let mut out = format!("{}\t{}\t{}\t{}", self.variant.name(), self.variant.label(), self.seed, self.config_hash);
        for mode in [EvalMode::ClothingChange, EvalMode::SameClothing, EvalMode::General] {
            let (r1, map) = self.metric(mode);
            let _ = write!(out, "\t{r1:.2}\t{map:.2}");
        }
        out
    }
}

/// Trains and evaluates every variant from one base configuration, in
/// [`Variant::ALL`] order. `on_row` sees each row as soon as it is ready.
pub fn ablate(
    config: &Config,
    train: &DatasetIndex,
    query: &DatasetIndex,
    gallery: &DatasetIndex,
    on_row: &mut dyn FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let hash = config.hash();
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut cfg = config.clone();
        cfg.train.variant = variant;
        let (trainer, log) = train_to_end(&cfg, train)?;
        let results = evaluate_modes(&trainer.extract(query)?, &trainer.extract(gallery)?, &EvalMode::ALL)?;
        let row = AblationRow {
            variant,
            seed: config.train.seed,
            config_hash: hash.clone(),
            results,
            trainer,
            log,
        };
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        p.insert("b", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut g = p.zeros_like();
        g.get_mut("a").data = vec![0.5, -2.0];
        g.get_mut("b").data = vec![3.0];
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1, 0.0, |n| n == "a");
        assert!((p.get("a").data[0] - 0.9).abs() < 1e-6);
        assert!((p.get("a").data[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.get("b").data[0], 0.0);
        assert_eq!(adam.steps.get("b"), None);
    }

    #[test]
    fn metrics_row_marks_absent_terms() {
        let r = StepRecord {
            step: 3,
            phase: 2,
            epoch: 1,
            id_main: Some(1.0),
            id_attn: None,
            ccl: None,
            total: 1.0,
            lr: 3.5e-4,
        };
        let row = r.to_row();
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols.len(), METRICS_HEADER.split('\t').count());
        assert_eq!(cols[4], "-");
        assert_eq!(cols[5], "-");
    }
}
