//! Data split, optimization loop and gradient audits.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, DEFAULT_TRIM};
use crate::diffnum::{Adam, BatchNormMode, Optimizer, ParamStore, Sgd, Tape};
use crate::error::{Error, Result};
use crate::ingest::SceneSample;
use crate::maneuvers::DEFAULT_A_THRESHOLD;
use crate::net::{Model, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub a_threshold: f64,
    pub trim: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Weight of the maneuver cross-entropy relative to the trajectory NLL.
    pub maneuver_weight: f64,
    /// Leading epochs that minimize squared position error instead of the
    /// NLL. Validation still uses the NLL, but early stopping and best-epoch
    /// tracking start afterwards.
    pub warmup_epochs: usize,
    /// Recompute batch-norm statistics over the training set after every
    /// epoch instead of relying on the momentum estimates alone.
    pub precise_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::V3dA,
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            a_threshold: DEFAULT_A_THRESHOLD,
            trim: DEFAULT_TRIM,
            optimizer: OptimizerKind::Adam,
            grad_clip: Some(10.0),
            maneuver_weight: 1.0,
            warmup_epochs: 0,
            precise_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.a_threshold > 0.0
            && (0.0..1.0).contains(&self.trim)
            && self.maneuver_weight >= 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Index sets of a train / validation / test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.71, 0.10, 0.19];

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_hash(seed: u64, key: (i64, i64, i64)) -> u64 {
    let mut h = mix64(seed);
    for v in [key.0, key.1, key.2] {
        h = mix64(h ^ v as u64);
    }
    h
}

/// Orders samples by a seeded hash of their key and cuts the ranking at
/// 71% / 81%. Membership depends only on keys and seed, not input order.
pub fn split(samples: &[SceneSample], seed: u64) -> Split {
    let mut order: Vec<(u64, (i64, i64, i64), usize)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (sample_hash(seed, s.key()), s.key(), i))
        .collect();
    order.sort_unstable();
    let n = samples.len();
    let n_train = (SPLIT_FRACTIONS[0] * n as f64).round() as usize;
    let n_val = (((SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]) * n as f64).round() as usize).max(n_train) - n_train;
    let mut idx: Vec<usize> = order.into_iter().map(|(_, _, i)| i).collect();
    let mut test = idx.split_off(n_train + n_val);
    let mut val = idx.split_off(n_train);
    let mut train = idx;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

pub fn select(samples: &[SceneSample], idx: &[usize]) -> Vec<SceneSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// What an epoch's optimizer steps minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Nll,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub objective: Objective,
    /// Mean training objective; the NLL outside warm-up.
    pub train_nll: f64,
    pub val_nll: f64,
    pub best_val_nll: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub stopped_early: bool,
    /// Set when a non-finite loss aborted training.
    pub diverged: Option<String>,
}

/// One optimizer step on a batch; returns the batch loss.
fn step(
    model: &mut Model,
    batch: &[&SceneSample],
    anchors: Option<&AnchorSet>,
    cfg: &TrainConfig,
    opt: &mut dyn Optimizer,
    warmup: bool,
) -> Result<f64> {
    let (grads, loss, updates) = {
        let mut t = Tape::new(model.params());
        let l = model.batch_loss(&mut t, batch, anchors, BatchNormMode::Train, cfg.maneuver_weight)?;
        let objective = if warmup {
            let mut per = l.sq_error;
            if let Some(ce) = l.maneuver {
                let ce = t.scale(ce, cfg.maneuver_weight);
                per = t.add(per, ce)?;
            }
            let total = t.sum(per);
            t.scale(total, 1.0 / batch.len() as f64)
        } else {
            l.loss
        };
        let g = t.backward(objective)?;
        (g, t.value(objective).item(), t.running_stat_updates().to_vec())
    };
    let p = model.params_mut();
    p.zero_grad();
    p.accumulate(&grads);
    if let Some(c) = cfg.grad_clip {
        let n = p.grad_norm();
        if n > c {
            p.scale_grads(c / n);
        }
    }
    opt.step(p);
    for u in &updates {
        u.apply(p);
    }
    Ok(loss)
}

/// Trains `model` in place and leaves it holding the best parameters.
/// `on_epoch` sees each epoch's record as it completes.
pub fn train(
    model: &mut Model,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    anchors: Option<&AnchorSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config().variant != cfg.variant {
        return Err(Error::Config(format!(
            "model variant {} differs from training variant {}",
            model.config().variant,
            cfg.variant
        )));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut opt: Box<dyn Optimizer> = match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(cfg.learning_rate)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.learning_rate }),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_0000);
    let start = Instant::now();
    let mut best = model.params().clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut diverged = None;
    let mut stopped_early = false;
    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let warmup = epoch <= cfg.warmup_epochs;
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            match step(model, &batch, anchors, cfg, opt.as_mut(), warmup) {
                Ok(l) => total += l * batch.len() as f64,
                Err(Error::Numeric(msg)) => {
                    diverged = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if cfg.precise_bn {
            model.recalibrate_batch_norm(train_set, 64)?;
        }
        let val = match model.mean_loss(val_set, anchors, 64) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                diverged = Some(format!("validation NLL {v} at epoch {epoch}"));
                break;
            }
            Err(Error::Numeric(msg)) => {
                diverged = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        if warmup {
            // nothing to compare against yet
        } else if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
        }
        let log = EpochLog {
            epoch,
            objective: if warmup { Objective::SquaredError } else { Objective::Nll },
            train_nll: total / train_set.len() as f64,
            val_nll: val,
            best_val_nll: best_val,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if stale >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    if best_epoch > 0 {
        model.params_mut().copy_values_from(&best)?;
    } else {
        best = model.params().clone();
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        stopped_early,
        diverged,
    })
}

/// One finite-difference probe of a parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a - n| / max(|a|, |n|, 1e-2)`
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-2)
    }
}

/// Compares the training-loss gradient with central differences at `draws`
/// randomly chosen trainable parameter entries.
pub fn check_gradients(
    model: &mut Model,
    batch: &[&SceneSample],
    anchors: Option<&AnchorSet>,
    draws: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<GradProbe>> {
    let loss_at = |m: &Model| -> Result<f64> {
        let mut t = Tape::new(m.params());
        let l = m.batch_loss(&mut t, batch, anchors, BatchNormMode::Train, 1.0)?;
        Ok(t.value(l.loss).item())
    };
    let grads = {
        let mut t = Tape::new(model.params());
        let l = model.batch_loss(&mut t, batch, anchors, BatchNormMode::Train, 1.0)?;
        t.backward(l.loss)?
    };
    let ids: Vec<_> = model.params().ids().filter(|&i| model.params().get(i).trainable).collect();
    let sizes: Vec<usize> = ids.iter().map(|&i| model.params().value(i).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let orig = model.params().value(id).data()[flat];
        model.params_mut().value_mut(id).data_mut()[flat] = orig + eps;
        let up = loss_at(model)?;
        model.params_mut().value_mut(id).data_mut()[flat] = orig - eps;
        let down = loss_at(model)?;
        model.params_mut().value_mut(id).data_mut()[flat] = orig;
        out.push(GradProbe {
            name: model.params().get(id).name.clone(),
            index: flat,
            analytic: grads.get(id).map_or(0.0, |g| g.data()[flat]),
            numeric: (up - down) / (2.0 * eps),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tests::{random_anchors, random_sample, small_config};
    use crate::net::ModelConfig;
    use crate::trajkit::wrap_angle;
    use std::f64::consts::PI;

    fn samples(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<SceneSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut s = random_sample(&mut rng, cfg, i % 3);
                s.track_id = i as i64;
                s
            })
            .collect()
    }

    #[test]
    fn split_fractions_disjoint_exhaustive() {
        let cfg = small_config(Variant::V3d);
        for n in [100, 997, 2000] {
            let s = samples(n, &cfg, n as u64);
            let sp = split(&s, 7);
            let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (part, f) in [(&sp.train, 0.71), (&sp.val, 0.10), (&sp.test, 0.19)] {
                assert!((part.len() as f64 / n as f64 - f).abs() <= 0.01);
            }
            let mut rev = s.clone();
            rev.reverse();
            let sp2 = split(&rev, 7);
            let keys = |sp: &[usize], v: &[SceneSample]| {
                let mut k: Vec<_> = sp.iter().map(|&i| v[i].key()).collect();
                k.sort_unstable();
                k
            };
            assert_eq!(keys(&sp.test, &s), keys(&sp2.test, &rev));
        }
    }

    /// Explicit 3x3 / 2x2 inverse via cofactors.
    fn dense_nll(r: &[f64], sigma: &[f64]) -> f64 {
        let d = r.len();
        let (det, inv) = if d == 2 {
            let det = sigma[0] * sigma[3] - sigma[1] * sigma[2];
            (det, vec![sigma[3] / det, -sigma[1] / det, -sigma[2] / det, sigma[0] / det])
        } else {
            let m = |i: usize, j: usize| sigma[i * 3 + j];
            let cof = |i: usize, j: usize| {
                let rows: Vec<usize> = (0..3).filter(|&k| k != i).collect();
                let cols: Vec<usize> = (0..3).filter(|&k| k != j).collect();
                let minor = m(rows[0], cols[0]) * m(rows[1], cols[1]) - m(rows[0], cols[1]) * m(rows[1], cols[0]);
                if (i + j) % 2 == 0 { minor } else { -minor }
            };
            let det: f64 = (0..3).map(|j| m(0, j) * cof(0, j)).sum();
            let mut inv = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    inv[i * 3 + j] = cof(j, i) / det;
                }
            }
            (det, inv)
        };
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += r[i] * inv[i * d + j] * r[j];
            }
        }
        0.5 * (d as f64 * (2.0 * PI).ln() + det.ln() + q)
    }

    #[test]
    fn loss_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for v in Variant::ALL {
            let cfg = small_config(v);
            let m = Model::new(cfg, 31).unwrap();
            let anchors = random_anchors(&mut rng, &cfg);
            let s = random_sample(&mut rng, &cfg, 2);
            let mut t = Tape::new(m.params());
            let l = m.batch_loss(&mut t, &[&s], Some(&anchors), BatchNormMode::Inference, 1.0).unwrap();
            let got = t.value(l.loss).item();
            let (ego, nb) = m.encode(&s).unwrap();
            let pool = m.pool(&nb, &s.neighbor_current_poses()).unwrap();
            let label = s.label.unwrap();
            let steps = m
                .decode(
                    &ego,
                    &pool,
                    v.has_heads().then_some(label),
                    v.uses_anchors().then(|| anchors.lookup(&label)),
                )
                .unwrap();
            let d = v.pose_dim();
            let mut want = 0.0;
            for (g, y) in steps.iter().zip(s.ego_future.poses()) {
                let mut r: Vec<f64> = y.as_array()[..d].iter().zip(&g.mean).map(|(a, b)| a - b).collect();
                if d == 3 {
                    r[2] = wrap_angle(r[2]);
                }
                want += dense_nll(&r, &g.covariance());
            }
            if v.has_heads() {
                let (lp, ap) = m.maneuver_heads(&ego, &pool).unwrap();
                want -= lp[label.location.index()].ln() + ap[label.acceleration.index()].ln();
            }
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{v}: {got} vs {want}");
        }
    }

    #[test]
    fn perfect_prediction_loss_values() {
        let cfg = small_config(Variant::V3dA);
        let mut m = Model::new(cfg, 32).unwrap();
        m.zero_decoder_output();
        for name in ["heads/location/w", "heads/location/b", "heads/acceleration/w", "heads/acceleration/b"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let anchors = random_anchors(&mut rng, &cfg);
        let mut s = random_sample(&mut rng, &cfg, 1);
        s.ego_future = anchors.lookup(&s.label.unwrap()).clone();
        let mut t = Tape::new(m.params());
        let l = m.batch_loss(&mut t, &[&s], Some(&anchors), BatchNormMode::Inference, 1.0).unwrap();
        let traj = cfg.future_steps as f64 * 1.5 * (2.0 * PI).ln();
        assert!((t.value(l.trajectory).item() - traj).abs() < 1e-12);
        // two sections, three classes: -ln(1/2 * 1/3)
        assert!((t.value(l.loss).item() - traj - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = small_config(Variant::V3dA);
        let mut m = Model::new(cfg, 34).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let anchors = random_anchors(&mut rng, &cfg);
        let s = random_sample(&mut rng, &cfg, 3);
        let probes = check_gradients(&mut m, &[&s], Some(&anchors), 100, 1e-5, 36).unwrap();
        for p in &probes {
            assert!(p.relative_error() < 1e-4, "{p:?}");
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical_and_early_stop_counts() {
        let cfg = small_config(Variant::V3dM);
        let data = samples(40, &cfg, 40);
        let tc = TrainConfig {
            variant: Variant::V3dM,
            batch_size: 8,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(cfg, 41).unwrap();
            let o = train(&mut m, &data[..30], &data[30..], None, &tc, |_| {}).unwrap();
            (
                o.history.iter().map(|h| (h.train_nll.to_bits(), h.val_nll.to_bits())).collect::<Vec<_>>(),
                m.params().to_bytes(),
            )
        };
        assert_eq!(run(), run());

        let frozen = TrainConfig {
            learning_rate: 0.0,
            patience: 3,
            max_epochs: 20,
            ..tc
        };
        // running statistics frozen too
        let still = ModelConfig { bn_momentum: 0.0, ..cfg };
        let mut m = Model::new(still, 42).unwrap();
        let o = train(&mut m, &data[..30], &data[30..], None, &frozen, |_| {}).unwrap();
        assert!(o.stopped_early);
        assert_eq!(o.history.len(), 4);
        assert_eq!(o.best_epoch, 1);
    }

    #[test]
    fn checkpoint_reproduces_validation_nll() {
        let cfg = small_config(Variant::V3dA);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let anchors = random_anchors(&mut rng, &cfg);
        let data = samples(20, &cfg, 44);
        let tc = TrainConfig {
            batch_size: 5,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let mut m = Model::new(cfg, 45).unwrap();
        let o = train(&mut m, &data[..15], &data[15..], Some(&anchors), &tc, |_| {}).unwrap();
        let bytes = m.checkpoint_bytes(&serde_json::json!({}), Some(&anchors)).unwrap();
        let (back, _) = Model::from_checkpoint_bytes(&bytes, Some(&anchors)).unwrap();
        let v = back.mean_loss(&data[15..], Some(&anchors), 64).unwrap();
        assert_eq!(v.to_bits(), o.history[o.best_epoch - 1].val_nll.to_bits());
    }
}
