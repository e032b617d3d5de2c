use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::MetricsReport;
use super::optim::Adam;
use super::Hyper;
use crate::agc::AgcParams;
use crate::error::{Error, Result};
use crate::features::FeaturePair;
use crate::net::{backward, forward_eval, forward_train, input_shape_of, BatchInput, NetParams};

pub const FINETUNE_FRACTIONS: [f64; 3] = [0.0, 0.15, 0.30];

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation MSE.
    pub best: NetParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

fn check_shapes(p: &NetParams, set: &[&FeaturePair], what: &str) -> Result<()> {
    let first = set
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("{what} set is empty")))?;
    let shape = input_shape_of(first);
    if shape != p.config.input {
        return Err(Error::Shape(format!(
            "{what} features have shape {shape:?}, model expects {:?}",
            p.config.input
        )));
    }
    Ok(())
}

/// Eval-mode predictions, one per segment, in input order.
pub fn predict(p: &NetParams, set: &[&FeaturePair], agc: Option<&AgcParams>) -> Result<Vec<f64>> {
    check_shapes(p, set, "evaluation")?;
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.chunks(EVAL_BATCH) {
        let input = BatchInput::<f32>::from_pairs(chunk, agc)?;
        out.extend(forward_eval(p, &input)?.into_iter().map(f64::from));
    }
    Ok(out)
}

fn set_mse(p: &NetParams, set: &[&FeaturePair], agc: Option<&AgcParams>) -> Result<f64> {
    let y: Vec<f64> = set.iter().map(|s| f64::from(s.range_km)).collect();
    super::metrics::mse(&y, &predict(p, set, agc)?)
}

/// Mini-batch Adam on MSE, keeping the parameters of the best validation epoch.
pub fn train(
    init: NetParams,
    train_set: &[&FeaturePair],
    val_set: &[&FeaturePair],
    h: &Hyper,
    agc: Option<&AgcParams>,
) -> Result<TrainOutcome> {
    run_epochs(init, train_set, val_set, h, h.epochs, agc)
}

fn run_epochs(
    mut p: NetParams,
    train_set: &[&FeaturePair],
    val_set: &[&FeaturePair],
    h: &Hyper,
    epochs: usize,
    agc: Option<&AgcParams>,
) -> Result<TrainOutcome> {
    h.validate()?;
    if let Some(a) = agc {
        a.validate()?;
    }
    check_shapes(&p, train_set, "training")?;
    check_shapes(&p, val_set, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
    let mut opt = Adam::new(h);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, NetParams)> = None;
    for epoch in 1..=epochs {
        opt.set_lr(h.lr * h.lr_decay.powi(epoch as i32 - 1));
        if h.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sq_sum = 0.0;
        for (b, idx) in order.chunks(h.batch_size).enumerate() {
            let batch: Vec<&FeaturePair> = idx.iter().map(|&i| train_set[i]).collect();
            let input = BatchInput::<f32>::from_pairs(&batch, agc)?;
            let at = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, batch {b})")),
                other => other,
            };
            let (pred, cache) = forward_train(&p, &input, &mut rng).map_err(at)?;
            let n = batch.len() as f32;
            let mut grad = Vec::with_capacity(batch.len());
            let mut loss = 0.0f64;
            for (yhat, s) in pred.iter().zip(&batch) {
                let e = yhat - s.range_km;
                loss += f64::from(e) * f64::from(e);
                grad.push(2.0 * e / n);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss (epoch {epoch}, batch {b})")));
            }
            sq_sum += loss;
            let grads = backward(&p, &cache, &grad)?;
            cache.update_running_stats(&mut p);
            opt.step(&mut p, &grads)?;
        }
        let train_mse = sq_sum / train_set.len() as f64;
        let val_mse = set_mse(&p, val_set, agc)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite(format!("validation loss (epoch {epoch})")));
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
        if best.as_ref().map_or(true, |(v, _, _)| val_mse < *v) {
            best = Some((val_mse, epoch, p.clone()));
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::Config("no epochs were run".into()))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
    })
}

/// Seeded uniform sample of `floor(fraction·n)` positions without
/// replacement, returned as `(sampled, remainder)`, both ascending.
///
/// Samples are prefixes of one seeded permutation, so under a fixed seed a
/// larger fraction always contains the positions of a smaller one.
pub fn sample_subset(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let k = (((fraction * n as f64) + 1e-9).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut picked, mut rest) = (order[..k].to_vec(), order[k..].to_vec());
    picked.sort_unstable();
    rest.sort_unstable();
    Ok((picked, rest))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: NetParams,
    /// Positions within the target set used for adaptation.
    pub sampled: Vec<usize>,
    /// Positions left for evaluation.
    pub eval: Vec<usize>,
    pub history: Vec<EpochStats>,
}

fn check_fraction(fraction: f64, any_fraction: bool) -> Result<()> {
    if !any_fraction && !FINETUNE_FRACTIONS.iter().any(|f| (f - fraction).abs() < 1e-12) {
        return Err(Error::Config(format!(
            "fine-tune fraction {fraction} not in {FINETUNE_FRACTIONS:?} (pass --any-fraction to override)"
        )));
    }
    Ok(())
}

fn adapt(
    init: &NetParams,
    target: &[&FeaturePair],
    fraction: f64,
    h: &Hyper,
    epochs: usize,
    agc: Option<&AgcParams>,
) -> Result<FinetuneOutcome> {
    check_shapes(init, target, "target")?;
    let (sampled, eval) = sample_subset(target.len(), fraction, h.seed)?;
    if sampled.is_empty() {
        return Ok(FinetuneOutcome {
            params: init.clone(),
            sampled,
            eval,
            history: Vec::new(),
        });
    }
    let subset: Vec<&FeaturePair> = sampled.iter().map(|&i| target[i]).collect();
    let out = run_epochs(init.clone(), &subset, &subset, h, epochs, agc)?;
    Ok(FinetuneOutcome {
        params: out.best,
        sampled,
        eval,
        history: out.history,
    })
}

/// Continues training on a seeded random fraction of the target domain for
/// [`Hyper::finetune_epoch_budget`] epochs. Fraction 0 returns the pretrained
/// parameters untouched. The sampled subset also serves as the selection set.
pub fn finetune(
    pretrained: &NetParams,
    target: &[&FeaturePair],
    fraction: f64,
    any_fraction: bool,
    h: &Hyper,
    agc: Option<&AgcParams>,
) -> Result<FinetuneOutcome> {
    check_fraction(fraction, any_fraction)?;
    adapt(pretrained, target, fraction, h, h.finetune_epoch_budget(), agc)
}

/// Baseline for [`finetune`]: a freshly initialized model trained on the same
/// seeded subset. It gets the larger of `h.epochs` and the fine-tune budget,
/// so it never sees fewer updates than the pretrained model it is compared to.
pub fn scratch_on_fraction(
    init: &NetParams,
    target: &[&FeaturePair],
    fraction: f64,
    any_fraction: bool,
    h: &Hyper,
    agc: Option<&AgcParams>,
) -> Result<FinetuneOutcome> {
    check_fraction(fraction, any_fraction)?;
    if fraction == 0.0 {
        return Err(Error::Config("training from scratch needs a nonzero fraction".into()));
    }
    adapt(init, target, fraction, h, h.epochs.max(h.finetune_epoch_budget()), agc)
}

pub fn evaluate(p: &NetParams, test_set: &[&FeaturePair], agc: Option<&AgcParams>) -> Result<MetricsReport> {
    let yhat = predict(p, test_set, agc)?;
    MetricsReport::from_predictions(
        test_set
            .iter()
            .zip(yhat)
            .map(|(s, v)| (s.index, f64::from(s.range_km), v))
            .collect(),
    )
}

/// Scores the constant predictor that always answers the training-set mean.
pub fn mean_baseline(train_set: &[&FeaturePair], test_set: &[&FeaturePair]) -> Result<MetricsReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mean = train_set.iter().map(|s| f64::from(s.range_km)).sum::<f64>() / train_set.len() as f64;
    MetricsReport::from_predictions(test_set.iter().map(|s| (s.index, f64::from(s.range_km), mean)).collect())
}

pub fn write_history(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,train_mse,val_mse\n");
    for e in history {
        text.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_counts() {
        let (a, b) = sample_subset(900, 0.30, 7).unwrap();
        assert_eq!((a.len(), b.len()), (270, 630));
        let (c, _) = sample_subset(900, 0.15, 7).unwrap();
        assert_eq!(c.len(), 135);
        assert_eq!(sample_subset(900, 0.30, 7).unwrap().0, a);
        assert_ne!(sample_subset(900, 0.30, 8).unwrap().0, a);
        let (z, all) = sample_subset(10, 0.0, 1).unwrap();
        assert!(z.is_empty());
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(sample_subset(10, 1.5, 1).is_err());
    }
}
