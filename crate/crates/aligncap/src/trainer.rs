//! Training loop: rotating batches over a generated dataset, one optimizer
//! step per batch, line-delimited metrics, checkpoint at the end.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::TrainingConfig;
use crate::data::{save_dataset, SyntheticExample};
use crate::error::{Error, Result};
use crate::model::AlignCapModel;
use crate::optim::Adam;
use crate::synth::make_synthetic_dataset;
use crate::tensor::{Rng, Tape};

// Stream labels off the config seed; 1..=4 are taken by model init.
const TRAIN_STREAM: u64 = 10;
const EVAL_STREAM: u64 = 11;

/// Dataset size relative to batch_size: enough rotation that batches differ,
/// small enough that the desk run overfits quickly.
const BATCHES_PER_EPOCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_tag: f64,
    pub l_cap: f64,
    pub l_cond: f64,
    pub l_multi: f64,
    pub total: f64,
}

/// One metrics line. Steps `0..steps` log pre-update training losses; the
/// final line at `step == steps` is a full-dataset eval-mode pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub manifest: PathBuf,
    pub dataset: PathBuf,
    pub metrics: PathBuf,
}

fn emit(records: &mut Vec<StepRecord>, metrics: &mut dyn Write, rec: StepRecord) -> Result<()> {
    metrics.write_all(serde_json::to_string(&rec)?.as_bytes())?;
    metrics.write_all(b"\n")?;
    records.push(rec);
    Ok(())
}

fn forward_values(
    model: &AlignCapModel,
    t: &mut Tape,
    batch: &[SyntheticExample],
    rng: &Rng,
    training: bool,
) -> Result<(LossValues, crate::model::ForwardOutput)> {
    let out = model.forward(t, batch, rng, training)?;
    Ok((
        LossValues {
            l_tag: t.value(out.l_tag)[0],
            l_cap: t.value(out.l_cap)[0],
            l_cond: t.value(out.l_cond)[0],
            l_multi: t.value(out.l_multi)[0],
            total: t.value(out.total)[0],
        },
        out,
    ))
}

/// Eval-mode losses over `data`, chunked by the model's batch size and
/// averaged with per-example weights. Deterministic: the rng stream depends
/// only on the model seed and chunk index.
pub fn evaluate(model: &AlignCapModel, data: &[SyntheticExample]) -> Result<LossValues> {
    if data.is_empty() {
        return Err(Error::Precondition("evaluate needs at least one example".into()));
    }
    let eval_rng = Rng::new(model.config.seed).derive(EVAL_STREAM);
    let mut acc = LossValues { l_tag: 0.0, l_cap: 0.0, l_cond: 0.0, l_multi: 0.0, total: 0.0 };
    for (c, chunk) in data.chunks(model.config.batch_size).enumerate() {
        let mut t = Tape::new();
        let (v, _) = forward_values(model, &mut t, chunk, &eval_rng.derive(c as u64), false)?;
        let w = chunk.len() as f64;
        acc.l_tag += w * v.l_tag;
        acc.l_cap += w * v.l_cap;
        acc.l_cond += w * v.l_cond;
        acc.l_multi += w * v.l_multi;
        acc.total += w * v.total;
    }
    let inv = 1.0 / data.len() as f64;
    acc.l_tag *= inv;
    acc.l_cap *= inv;
    acc.l_cond *= inv;
    acc.l_multi *= inv;
    acc.total *= inv;
    Ok(acc)
}

/// Runs the configured training loop into `out_dir`, writing `data.json`,
/// `metrics.jsonl`, and the checkpoint pair. On a non-finite loss the loop
/// aborts after writing the last-good checkpoint.
pub fn train(config: &TrainingConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let dataset = make_synthetic_dataset(
        config.seed,
        BATCHES_PER_EPOCH * config.batch_size,
        &config.dims,
    )?;
    let dataset_path = out_dir.join("data.json");
    save_dataset(&dataset_path, &dataset)?;

    let mut model = AlignCapModel::new(config)?;
    let mut adam = Adam::new(config.learning_rate, &config.optimizer);
    let train_rng = Rng::new(config.seed).derive(TRAIN_STREAM);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut records = Vec::with_capacity(config.steps + 1);

    for step in 0..config.steps {
        let start = (step * config.batch_size) % dataset.len();
        let batch: Vec<SyntheticExample> = (0..config.batch_size)
            .map(|i| dataset[(start + i) % dataset.len()].clone())
            .collect();

        let mut t = Tape::new();
        let step_rng = train_rng.derive(step as u64);
        let (values, out) = match forward_values(&model, &mut t, &batch, &step_rng, true) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                // Parameters still hold the last finite step's values.
                log::error!("aborting at step {step}: {e}");
                metrics.flush()?;
                save_checkpoint(&model, out_dir)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        emit(&mut records, &mut metrics, StepRecord { step, losses: values })?;
        t.backward(out.total)?;
        adam.step(&t, &mut |f| model.for_each_mut(f));
    }

    let final_values = evaluate(&model, &dataset)?;
    emit(&mut records, &mut metrics, StepRecord { step: config.steps, losses: final_values })?;
    metrics.flush()?;

    let manifest = save_checkpoint(&model, out_dir)?;
    Ok(TrainOutcome { records, manifest, dataset: dataset_path, metrics: metrics_path })
}
