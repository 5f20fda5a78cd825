//! One training run: Adam at a fixed learning rate, mini-batches of 50, softmax
//! cross-entropy, early stopping on validation loss, best-epoch checkpointing.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::augment;
use crate::cohort::{cap_patches, Case, FineLabel};
use crate::data::PatchStore;
use crate::encoder::{
    attach_head, from_weights, instantiate, Classifier, Condition, Encoder, EncoderWeights, Head,
    RunConfig, NUM_CLASSES,
};
use crate::error::{Error, IoContext, Result};
use crate::evaluator::PredictionRecord;
use crate::tiler::{to_model_input, ModelInput};
use crate::util;

pub const PROB_EPSILON: f64 = 1e-12;

/// −ln p(true class), with the probability clamped at 1e-12.
pub fn cross_entropy(probabilities: &[f64], true_label: FineLabel) -> f64 {
    let p = probabilities[true_label.index()];
    if p < PROB_EPSILON {
        log::warn!("probability {p:e} at the true class clamped to {PROB_EPSILON:e}");
    }
    -p.max(PROB_EPSILON).ln()
}

/// True when each of the last `patience` losses failed to strictly improve on the
/// best loss recorded before them.
pub fn early_stop_check(val_losses: &[f64], patience: usize) -> bool {
    let patience = patience.max(1);
    if val_losses.len() < patience + 1 {
        return false;
    }
    let split = val_losses.len() - patience;
    let best_before = val_losses[..split]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    val_losses[split..].iter().all(|l| !(*l < best_before))
}

/// Loss and head gradients for one sample, through softmax cross-entropy.
pub fn head_loss_and_grad(head: &Head, features: &[f64], label: FineLabel) -> (f64, Vec<f64>, Vec<f64>) {
    let p = head.forward(features);
    let loss = cross_entropy(&p, label);
    let mut g = p;
    g[label.index()] -= 1.0;
    let mut gw = vec![0.0; head.weights.len()];
    let mut gb = vec![0.0; head.bias.len()];
    head.backward(features, &g, &mut gw, &mut gb);
    (loss, gw, gb)
}

/// Adam with bias correction over any number of parameter groups.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `params[i]` pairs with `grads[i]`; group order must stay fixed
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_patch_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    /// 1-based epoch with the lowest validation loss (first on ties).
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<&EpochRecord> = None;
        for e in &self.epochs {
            if best.is_none_or(|b| e.val_loss < b.val_loss) {
                best = Some(e);
            }
        }
        best.map(|e| e.epoch)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "pathprobe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub head: Head,
    /// Present when the encoder was trained (FT/RI).
    pub encoder: Option<EncoderWeights>,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: not a version {CHECKPOINT_VERSION} checkpoint",
                path.display()
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the trained classifier.
    pub fn classifier(&self) -> Result<Classifier> {
        let encoder = match &self.encoder {
            Some(w) => from_weights(&self.config.encoder, w.clone())?,
            None => instantiate(&self.config.encoder)?,
        };
        Classifier::new(encoder, self.head.clone())
    }
}

/// Pooled features shared between runs whose encoders have identical parameters.
#[derive(Default)]
pub struct FeatureCache {
    map: Mutex<HashMap<(u64, String, String), Arc<Vec<f64>>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &(u64, String, String)) -> Option<Arc<Vec<f64>>> {
        self.map.lock().expect("cache lock").get(key).cloned()
    }

    fn put(&self, key: (u64, String, String), v: Arc<Vec<f64>>) {
        self.map.lock().expect("cache lock").insert(key, v);
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub classifier: Classifier,
}

#[derive(Clone)]
struct Sample<'a> {
    case: &'a Case,
    patch: String,
    label: FineLabel,
}

fn samples<'a>(cases: &'a [Case], limit: usize, seed: u64) -> Result<Vec<Sample<'a>>> {
    let mut out = Vec::new();
    for case in cases {
        for patch in cap_patches(case, limit, seed)? {
            out.push(Sample {
                case,
                patch,
                label: case.fine_label,
            });
        }
    }
    Ok(out)
}

fn load_input(store: &dyn PatchStore, s: &Sample<'_>) -> Result<ModelInput> {
    Ok(to_model_input(&store.load(s.case, &s.patch)?))
}

/// Features for every distinct (case, patch) in `samples` with a frozen encoder.
fn frozen_features(
    encoder: &dyn Encoder,
    store: &dyn PatchStore,
    samples: &[Sample<'_>],
    cache: Option<&FeatureCache>,
) -> Result<HashMap<(String, String), Arc<Vec<f64>>>> {
    let fp = encoder.fingerprint();
    let mut seen = HashSet::new();
    let unique: Vec<&Sample<'_>> = samples
        .iter()
        .filter(|s| seen.insert((s.case.case_id.clone(), s.patch.clone())))
        .collect();
    let computed: Vec<((String, String), Arc<Vec<f64>>)> = unique
        .par_iter()
        .map(|s| {
            let key = (fp, s.case.case_id.clone(), s.patch.clone());
            if let Some(v) = cache.and_then(|c| c.get(&key)) {
                return Ok(((key.1, key.2), v));
            }
            let f = Arc::new(encoder.features(&load_input(store, s)?)?);
            if let Some(c) = cache {
                c.put(key.clone(), f.clone());
            }
            Ok(((key.1, key.2), f))
        })
        .collect::<Result<_>>()?;
    Ok(computed.into_iter().collect())
}

struct Snapshot {
    head: Head,
    encoder: Option<Vec<Vec<f64>>>,
}

/// Trains one (encoder, condition, patch limit) configuration on a fold.
pub fn train_fold(
    config: &RunConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    store: &dyn PatchStore,
    cache: Option<&FeatureCache>,
) -> Result<TrainOutcome> {
    if train_cases.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_cases.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let train_ids: HashSet<&str> = train_cases.iter().map(|c| c.case_id.as_str()).collect();
    if let Some(c) = val_cases.iter().find(|c| train_ids.contains(c.case_id.as_str())) {
        return Err(Error::InvalidArgument(format!(
            "case `{}` is in both training and validation sets",
            c.case_id
        )));
    }

    let mut encoder = instantiate(&config.encoder)?;
    if config.condition == Condition::Ri {
        encoder.reinitialize(config.seed)?;
    }
    let mut head = attach_head(encoder.feature_dim(), NUM_CLASSES, config.seed)?;
    let trainable = config.condition.encoder_trainable();
    let initial_fingerprint = encoder.fingerprint();

    let train = samples(train_cases, config.patch_limit, config.seed)?;
    let val = samples(val_cases, config.patch_limit, config.seed)?;

    // A frozen encoder without augmentation yields fixed features: compute them once.
    let frozen = if !trainable && !config.augment {
        let mut all = train.clone();
        all.extend(val.iter().cloned());
        Some(frozen_features(encoder.as_ref(), store, &all, cache)?)
    } else {
        None
    };

    let mut adam = Adam::new(config.learning_rate);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Snapshot)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch_size = config.batch_size.max(1);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut util::rng(config.seed, &format!("epoch/{epoch}")));
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let enc = encoder.as_ref();
            let head_ref = &head;
            let per_sample: Vec<(f64, Vec<f64>, Vec<f64>, Option<Vec<Vec<f64>>>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let key = (s.case.case_id.clone(), s.patch.clone());
                    let (features, pass) = match &frozen {
                        Some(map) => (map[&key].as_ref().clone(), None),
                        None => {
                            let mut x = load_input(store, s)?;
                            if config.augment {
                                let aseed = util::derive_seed(
                                    config.seed,
                                    &format!("aug/{epoch}/{}/{}/{i}", s.case.case_id, s.patch),
                                );
                                x = augment(&x, aseed, true);
                            }
                            let pass = enc.forward(&x)?;
                            (pass.features.clone(), Some(pass))
                        }
                    };
                    let p = head_ref.forward(&features);
                    let loss = cross_entropy(&p, s.label);
                    let mut g = p;
                    g[s.label.index()] -= 1.0;
                    let scale = 1.0 / batch.len() as f64;
                    g.iter_mut().for_each(|v| *v *= scale);
                    let mut gw = vec![0.0; head_ref.weights.len()];
                    let mut gb = vec![0.0; head_ref.bias.len()];
                    let gf = head_ref.backward(&features, &g, &mut gw, &mut gb);
                    let genc = match (trainable, pass) {
                        (true, Some(pass)) => {
                            let mut grads: Vec<Vec<f64>> =
                                enc.params().iter().map(|p| vec![0.0; p.len()]).collect();
                            enc.backward(&pass, &gf, &mut grads);
                            Some(grads)
                        }
                        _ => None,
                    };
                    Ok((loss, gw, gb, genc))
                })
                .collect::<Result<_>>()?;

            let mut gw = vec![0.0; head.weights.len()];
            let mut gb = vec![0.0; head.bias.len()];
            let mut genc: Option<Vec<Vec<f64>>> = None;
            for (loss, w, b, e) in per_sample {
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step });
                }
                loss_sum += loss;
                add_into(&mut gw, &w);
                add_into(&mut gb, &b);
                if let Some(e) = e {
                    match &mut genc {
                        None => genc = Some(e),
                        Some(acc) => acc.iter_mut().zip(&e).for_each(|(a, b)| add_into(a, b)),
                    }
                }
            }

            let Head { weights, bias, .. } = &mut head;
            let mut params: Vec<&mut [f64]> = vec![weights.as_mut_slice(), bias.as_mut_slice()];
            let mut grads: Vec<&[f64]> = vec![&gw, &gb];
            if trainable {
                if let Some(ge) = &genc {
                    params.extend(encoder.params_mut().iter_mut().map(|p| p.as_mut_slice()));
                    grads.extend(ge.iter().map(|g| g.as_slice()));
                }
            }
            adam.step(&mut params, &grads);
        }

        let (val_loss, val_acc) = evaluate_samples(encoder.as_ref(), &head, store, &val, frozen.as_ref())?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: 0 });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss,
            val_patch_accuracy: val_acc,
        });
        log::debug!(
            "{} epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_acc:.3}",
            config.model_id(),
            loss_sum / train.len() as f64
        );
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((
                val_loss,
                Snapshot {
                    head: head.clone(),
                    encoder: trainable.then(|| encoder.params().to_vec()),
                },
            ));
        }
        if early_stop_check(&history.val_losses(), config.patience) {
            log::info!("{}: early stop after epoch {epoch}", config.model_id());
            break;
        }
    }

    let (_, snap) = best.ok_or(Error::Empty("no epochs were run"))?;
    if !trainable && encoder.fingerprint() != initial_fingerprint {
        return Err(Error::InvalidArgument(format!(
            "{}: frozen encoder parameters changed during training",
            config.model_id()
        )));
    }
    if let Some(p) = snap.encoder {
        for (dst, src) in encoder.params_mut().iter_mut().zip(p) {
            *dst = src;
        }
    }
    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        head: snap.head.clone(),
        encoder: trainable.then(|| encoder.export_weights()),
        best_epoch: history.best_epoch().unwrap_or(0),
        history: history.clone(),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        classifier: Classifier::new(encoder, snap.head)?,
    })
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn evaluate_samples(
    encoder: &dyn Encoder,
    head: &Head,
    store: &dyn PatchStore,
    samples: &[Sample<'_>],
    frozen: Option<&HashMap<(String, String), Arc<Vec<f64>>>>,
) -> Result<(f64, f64)> {
    let results: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let features = match frozen {
                Some(map) => map[&(s.case.case_id.clone(), s.patch.clone())].as_ref().clone(),
                None => encoder.features(&load_input(store, s)?)?,
            };
            let p = head.forward(&features);
            Ok((cross_entropy(&p, s.label), util::argmax(&p) == s.label.index()))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    Ok((loss, acc))
}

/// Patch-level predictions for `cases`, over the distinct patches of each case's
/// capped set.
pub fn predict_cases(
    classifier: &Classifier,
    cases: &[Case],
    store: &dyn PatchStore,
    patch_limit: usize,
    seed: u64,
    fold: usize,
    model_id: &str,
) -> Result<Vec<PredictionRecord>> {
    let mut jobs = Vec::new();
    for case in cases {
        let mut seen = HashSet::new();
        for patch in cap_patches(case, patch_limit, seed)? {
            if seen.insert(patch.clone()) {
                jobs.push((case, patch));
            }
        }
    }
    jobs.par_iter()
        .map(|(case, patch)| {
            let x = to_model_input(&store.load(case, patch)?);
            Ok(PredictionRecord {
                case_id: case.case_id.clone(),
                patch_id: patch.clone(),
                fold,
                model_id: model_id.to_string(),
                probabilities: classifier.predict(&x)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        let mut p = vec![0.0; 6];
        p[0] = 1.0;
        assert_eq!(cross_entropy(&p, FineLabel::G), 0.0);
        let u = vec![1.0 / 6.0; 6];
        assert!((cross_entropy(&u, FineLabel::A) - 6f64.ln()).abs() < 1e-12);
        let h = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        assert!((cross_entropy(&h, FineLabel::A) - 2f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&h, FineLabel::M) - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn early_stop_rule() {
        assert!(early_stop_check(&[1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95], 5));
        assert!(!early_stop_check(&[1.0, 0.9, 0.91, 0.92, 0.93, 0.94], 5));
        assert!(!early_stop_check(&[1.0, 0.9, 0.8, 0.7], 5));
        assert!(!early_stop_check(&[1.0, 1.0, 1.0, 1.0, 1.0], 5));
        // Equal to the best is not an improvement.
        assert!(early_stop_check(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 5));
        let decreasing: Vec<f64> = (0..30).map(|i| 1.0 - i as f64 * 0.01).collect();
        for n in 1..=30 {
            assert!(!early_stop_check(&decreasing[..n], 5));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let g = vec![0.5, -2.0];
        let mut adam = Adam::new(0.1);
        adam.step(&mut [p.as_mut_slice()], &[g.as_slice()]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0];
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * (x[0] - 1.0)];
            adam.step(&mut [x.as_mut_slice()], &[g.as_slice()]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn history_best_epoch() {
        let mut h = TrainHistory::default();
        for (i, l) in [0.9, 0.5, 0.5, 0.7].iter().enumerate() {
            h.epochs.push(EpochRecord {
                epoch: i + 1,
                train_loss: 0.0,
                val_loss: *l,
                val_patch_accuracy: 0.0,
            });
        }
        assert_eq!(h.best_epoch(), Some(2));
        assert_eq!(h.to_jsonl().lines().count(), 4);
    }

    use crate::cohort::make_folds;
    use crate::encoder::{build_condition, toy_spec, Family};
    use crate::synthetic::{synthetic_cohort, SyntheticStore};

    fn small_run(kind: Condition) -> (RunConfig, TrainOutcome) {
        let m = synthetic_cohort(&[FineLabel::G, FineLabel::M, FineLabel::L], 4, 6);
        let plan = make_folds(&m, 2, 3).unwrap();
        let (train, val) = plan.split(&m, 0);
        let spec = toy_spec("toy", Family::CnnClass, 8, 5);
        let mut cfg = build_condition(&spec, kind)
            .unwrap()
            .with_patch_limit(4)
            .with_augment(false);
        cfg.max_epochs = 3;
        cfg.batch_size = 8;
        let store = SyntheticStore::new(96, 1);
        let out = train_fold(&cfg, &train, &val, &store, None).unwrap();
        (cfg, out)
    }

    #[test]
    fn linear_probe_leaves_encoder_untouched() {
        let (cfg, out) = small_run(Condition::Lp);
        let fresh = instantiate(&cfg.encoder).unwrap();
        assert_eq!(fresh.params(), out.classifier.encoder.params());
        assert!(out.checkpoint.encoder.is_none());
        assert!(out.history.epochs.len() <= 3);
    }

    #[test]
    fn fine_tuning_moves_encoder() {
        let (cfg, out) = small_run(Condition::Ft);
        let fresh = instantiate(&cfg.encoder).unwrap();
        assert_ne!(fresh.params(), out.classifier.encoder.params());
        let restored = out.checkpoint.classifier().unwrap();
        assert_eq!(restored.encoder.params(), out.classifier.encoder.params());
    }

    #[test]
    fn overlapping_splits_rejected() {
        let m = synthetic_cohort(&[FineLabel::G], 2, 2);
        let cfg = build_condition(&toy_spec("toy", Family::CnnClass, 4, 0), Condition::Lp).unwrap();
        let store = SyntheticStore::new(32, 0);
        assert!(train_fold(&cfg, &m.cases, &m.cases[..1], &store, None).is_err());
        assert!(train_fold(&cfg, &m.cases, &[], &store, None).is_err());
    }
}
