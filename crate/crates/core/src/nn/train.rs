use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_grad_norm, AdamState};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::{BPTT_WINDOW, GRAD_CLIP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Factor applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub bptt_window: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Wall-clock guard, checked before every optimizer step; the epoch in
    /// progress is then closed and validated.
    pub time_cap_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            lr_decay: 1.0,
            batch_size: 8,
            bptt_window: BPTT_WINDOW,
            grad_clip: GRAD_CLIP,
            seed: 0,
            time_cap_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.bptt_window == 0 {
            return Err(Error::Config("batch_size and bptt_window must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        Ok(())
    }
}

/// A sequence loss that can be evaluated one truncation window at a time.
pub trait WindowObjective {
    /// State carried (detached) from one window to the next.
    type Carry;

    fn num_sequences(&self) -> usize;
    fn seq_len(&self, seq: usize) -> usize;
    fn start(&self, params: &ParamStore, seq: usize) -> Result<Self::Carry>;
    /// Records the summed loss over `range` and returns it with its term
    /// count; `carry` is advanced to the end of the window.
    fn window(
        &mut self,
        tape: &mut Tape,
        seq: usize,
        range: Range<usize>,
        carry: &mut Self::Carry,
    ) -> Result<(Var, usize)>;
    /// Called after every epoch, before validation.
    fn end_epoch(&mut self, _params: &mut ParamStore) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

fn out_of_time(cfg: &TrainConfig, started: Instant) -> bool {
    cfg.time_cap_secs.is_some_and(|cap| started.elapsed().as_secs_f64() > cap)
}

/// Truncated-BPTT Adam over mini-batches of sequences. Batch members move
/// through their windows in lockstep; gradients are summed in sequence
/// order and averaged over loss terms. A sequence whose window fails
/// numerically sits out the rest of its batch. Keeps the parameters of the epoch
/// with the lowest `validate` score.
pub fn fit<O, V>(params: &mut ParamStore, objective: &mut O, cfg: &TrainConfig, mut validate: V) -> Result<FitReport>
where
    O: WindowObjective,
    V: FnMut(&ParamStore) -> Result<f64>,
{
    cfg.validate()?;
    let n_seq = objective.num_sequences();
    if n_seq == 0 {
        return Err(Error::EmptyInput);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..n_seq).collect();
    let mut report = FitReport {
        best_val: validate(params)?,
        ..Default::default()
    };
    let mut best = params.values.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut carries = batch
                .iter()
                .map(|&s| objective.start(params, s).map(Some))
                .collect::<Result<Vec<_>>>()?;
            let longest = batch.iter().map(|&s| objective.seq_len(s)).max().unwrap_or(0);
            let mut at = 0;
            while at < longest && !out_of_time(cfg, started) {
                let mut grad = vec![0.0; params.len()];
                let mut terms = 0usize;
                for (k, &s) in batch.iter().enumerate() {
                    let end = (at + cfg.bptt_window).min(objective.seq_len(s));
                    let Some(carry) = carries[k].as_mut().filter(|_| at < end) else {
                        continue;
                    };
                    let mut tape = Tape::new(&params.values);
                    let (loss, n) = match objective.window(&mut tape, s, at..end, carry) {
                        Ok(v) => v,
                        // A sequence the current parameters cannot track is
                        // dropped for the rest of the batch.
                        Err(e) if e.is_numeric() => {
                            carries[k] = None;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let value = tape.scalar(loss);
                    if !value.is_finite() {
                        carries[k] = None;
                        continue;
                    }
                    let g = tape.backward(loss).params;
                    if g.iter().any(|v| !v.is_finite()) {
                        carries[k] = None;
                        continue;
                    }
                    for (acc, gi) in grad.iter_mut().zip(&g) {
                        *acc += gi;
                    }
                    epoch_loss += value;
                    terms += n;
                }
                at += cfg.bptt_window;
                if terms == 0 {
                    continue;
                }
                epoch_terms += terms;
                let scale = 1.0 / terms as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                params.mask_frozen(&mut grad);
                clip_grad_norm(&mut grad, cfg.grad_clip);
                adam_step(&mut adam, &mut params.values, &grad)?;
            }
        }
        adam.lr *= cfg.lr_decay;
        objective.end_epoch(params);
        let val_score = validate(params)?;
        report.history.push(EpochStats {
            epoch,
            train_loss: if epoch_terms == 0 {
                f64::INFINITY
            } else {
                epoch_loss / epoch_terms as f64
            },
            val_score,
        });
        if val_score < report.best_val {
            report.best_val = val_score;
            report.best_epoch = epoch;
            best.clone_from(&params.values);
        }
        if out_of_time(cfg, started) {
            break;
        }
    }
    params.values = best;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::Vector;
    use crate::nn::Slice;

    // Fits a scalar gain a in x_{t+1} = a x_t to a geometric sequence.
    struct Geometric {
        seqs: Vec<Vec<f64>>,
    }

    impl WindowObjective for Geometric {
        type Carry = f64;
        fn num_sequences(&self) -> usize {
            self.seqs.len()
        }
        fn seq_len(&self, seq: usize) -> usize {
            self.seqs[seq].len() - 1
        }
        fn start(&self, _: &ParamStore, seq: usize) -> Result<f64> {
            Ok(self.seqs[seq][0])
        }
        fn window(&mut self, tape: &mut Tape, seq: usize, range: Range<usize>, carry: &mut f64) -> Result<(Var, usize)> {
            let a = tape.param(0, 1);
            let mut total = None;
            for t in range.clone() {
                let x = tape.input(Vector::from_element(1, self.seqs[seq][t]));
                let pred = tape.mul(a, x);
                let target = tape.input(Vector::from_element(1, self.seqs[seq][t + 1]));
                let e = tape.sub(pred, target);
                let l = tape.sum_sq(e);
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l),
                });
            }
            *carry = self.seqs[seq][range.end];
            Ok((total.unwrap(), range.len()))
        }
    }

    #[test]
    fn recovers_scalar_gain_and_is_deterministic() {
        let seqs: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..40).map(|t| (1.0 + k as f64) * 0.9f64.powi(t)).collect())
            .collect();
        let run = || {
            let mut store = ParamStore::from_parts(
                vec![Slice {
                    name: "a".into(),
                    offset: 0,
                    shape: vec![1],
                    trainable: true,
                }],
                vec![0.0],
            )
            .unwrap();
            let mut obj = Geometric { seqs: seqs.clone() };
            let cfg = TrainConfig {
                epochs: 200,
                lr: 0.05,
                batch_size: 2,
                bptt_window: 7,
                ..Default::default()
            };
            let report = fit(&mut store, &mut obj, &cfg, |p| Ok((p.values[0] - 0.9).abs())).unwrap();
            (store.values[0], report)
        };
        let (a, report) = run();
        assert!((a - 0.9).abs() < 1e-3, "a = {a}");
        assert!(report.best_epoch > 0);
        assert_eq!(run().0.to_bits(), a.to_bits());
    }
}
