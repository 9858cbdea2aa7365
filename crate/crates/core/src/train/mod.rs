//! Training, inference, evaluation and reporting built on the backbone and
//! heads.

mod eval;
mod infer;
mod probe;
mod run;
mod viz;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use eval::{
    evaluate, oracle_predictions, predict, random_box_corloc, score_predictions, EvalOptions,
    EvalTask, ImagePrediction, ScoredBox,
};
pub use infer::{infer, Inference};
pub use probe::{probe_invariance, ProbeReport, ProbeRow};
pub use run::{AeMode, RunConfig, TrainSettings};
pub use viz::{blend, export_overlays, OVERLAY_ALPHA};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::Scene;
use crate::error::{Result, WwtError};
use crate::heads::{
    autoencode_loss, classify, detect, detection_loss, match_bipartite, pixel_target, predictions,
    segmentation_loss, smoothed_cross_entropy, AeTarget, GroundTruth, LossWeights, Teacher,
};
use crate::model::{forward, mean_heads, Binder, WwtConfig, WwtParams};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW};
use crate::tensor::{Scalar, Tensor};

/// Parameter prefixes that make up the backbone, as opposed to task heads.
pub const BACKBONE_PREFIXES: [&str; 4] = ["patch_embed", "pos_embed", "slot_queries", "blocks."];

/// What a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Smoothed cross-entropy plus the weighted reconstruction loss.
    Pretrain,
    /// Set-prediction loss with bipartite matching.
    Detect,
    /// Pixel-level segmentation loss.
    Segment,
    /// Reconstruction from the first `ocl_keep` slots only.
    Ocl,
}

impl FromStr for Task {
    type Err = WwtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Task::Pretrain),
            "detect" => Ok(Task::Detect),
            "segment" => Ok(Task::Segment),
            "ocl" => Ok(Task::Ocl),
            _ => Err(WwtError::Config(format!("unknown training task '{s}'"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pretrain => "pretrain",
            Task::Detect => "detect",
            Task::Segment => "segment",
            Task::Ocl => "ocl",
        })
    }
}

/// Scalar loss and its named parts, all on the tape.
pub struct SampleLoss {
    pub total: Var,
    pub terms: Vec<(&'static str, Var)>,
}

/// Ground-truth boxes normalized to the unit square.
pub fn ground_truths(scene: &Scene) -> Vec<GroundTruth> {
    let s = scene.image.width as f64;
    scene
        .instances
        .iter()
        .map(|i| GroundTruth {
            bbox: i.bbox.scale(1.0 / s),
            class: i.class,
        })
        .collect()
}

fn ae_target(
    cfg: &WwtConfig,
    st: &TrainSettings,
    teacher: Option<&Teacher>,
    scene: &Scene,
) -> Result<AeTarget> {
    match (st.ae_mode, teacher) {
        (AeMode::Pixels, _) => Ok(AeTarget::Pixels(pixel_target(cfg, &scene.image)?)),
        (AeMode::Distill, Some(t)) => Ok(AeTarget::Features(t.features(cfg, &scene.image)?)),
        (AeMode::Distill, None) => Err(WwtError::Config("distillation needs a teacher".into())),
    }
}

/// Build the loss of one scene for `task` on `tape`.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &WwtConfig,
    binder: &mut Binder<T>,
    st: &TrainSettings,
    task: Task,
    scene: &Scene,
    teacher: Option<&Teacher>,
) -> Result<SampleLoss> {
    let out = forward(tape, cfg, binder, &scene.image, false)?;
    let z = out.state.z;
    let mean = mean_heads(tape, &out.state.masks)?;
    match task {
        Task::Pretrain => {
            let logits = classify(tape, cfg, binder, z)?;
            let ce = smoothed_cross_entropy(tape, logits.image, scene.label, st.label_smoothing)?;
            if st.ae_weight == 0.0 {
                return Ok(SampleLoss {
                    total: ce,
                    terms: vec![("ce", ce)],
                });
            }
            let target = ae_target(cfg, st, teacher, scene)?;
            let ae = autoencode_loss(tape, cfg, binder, mean, z, &target, None)?;
            let weighted = tape.scale(ae, st.ae_weight)?;
            let total = tape.add(ce, weighted)?;
            Ok(SampleLoss {
                total,
                terms: vec![("ce", ce), ("ae", ae)],
            })
        }
        Task::Detect => {
            let vars = detect(tape, cfg, binder, out.state.x, z, mean)?;
            let preds = predictions(tape, &vars);
            let gts = ground_truths(scene);
            let w = LossWeights::default();
            let assignment = match_bipartite(&preds, &gts, &w)?;
            let l = detection_loss(tape, &vars, &gts, &assignment, &w)?;
            let mut terms = vec![("cls", l.cls)];
            terms.extend(l.l1.map(|v| ("l1", v)));
            terms.extend(l.giou.map(|v| ("giou", v)));
            Ok(SampleLoss {
                total: l.total,
                terms,
            })
        }
        Task::Segment => {
            let l = segmentation_loss(tape, cfg, binder, mean, z, &scene.label_map())?;
            Ok(SampleLoss {
                total: l,
                terms: vec![("seg", l)],
            })
        }
        Task::Ocl => {
            let target = ae_target(cfg, st, teacher, scene)?;
            let keep = (st.ocl_keep > 0).then_some(st.ocl_keep);
            let l = autoencode_loss(tape, cfg, binder, mean, z, &target, keep)?;
            Ok(SampleLoss {
                total: l,
                terms: vec![("ae", l)],
            })
        }
    }
}

type Grads = BTreeMap<String, Tensor<f32>>;

/// Gradients and loss values of one scene.
pub fn scene_gradients(
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    st: &TrainSettings,
    task: Task,
    scene: &Scene,
    teacher: Option<&Teacher>,
) -> Result<(Grads, f64, Vec<(&'static str, f64)>)> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::new(params);
    if st.freeze_backbone {
        binder = binder.with_frozen(&BACKBONE_PREFIXES);
    }
    let loss = sample_loss(&mut tape, cfg, &mut binder, st, task, scene, teacher)?;
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let total = scalar(loss.total);
    let terms = loss.terms.iter().map(|(n, v)| (*n, scalar(*v))).collect();
    if !total.is_finite() {
        return Err(WwtError::NonFinite { op: "loss".into() });
    }
    Ok((tape.backward(loss.total)?.into_named(), total, terms))
}

/// Mean gradient and mean loss terms over a batch. Per-scene work runs in
/// parallel; the reduction follows batch order so results do not depend on
/// the worker count.
pub fn batch_gradients(
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    st: &TrainSettings,
    task: Task,
    batch: &[&Scene],
    teacher: Option<&Teacher>,
) -> Result<(Grads, f64, Vec<(String, f64)>)> {
    let parts: Vec<_> = batch
        .par_iter()
        .map(|s| scene_gradients(cfg, params, st, task, s, teacher))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grads: Grads = BTreeMap::new();
    let mut loss = 0.0;
    let mut terms: Vec<(String, f64)> = Vec::new();
    for (g, l, ts) in parts {
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += *b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
        loss += l;
        for (name, v) in ts {
            match terms.iter_mut().find(|(k, _)| k == name) {
                Some((_, acc)) => *acc += v,
                None => terms.push((name.to_string(), v)),
            }
        }
    }
    let inv = (1.0 / n) as f32;
    grads
        .values_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
    terms.iter_mut().for_each(|(_, v)| *v /= n);
    Ok((grads, loss / n, terms))
}

/// Classification accuracy of the image-level prediction.
pub fn accuracy(cfg: &WwtConfig, params: &WwtParams<f32>, scenes: &[Scene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(WwtError::invalid("accuracy", "no scenes"));
    }
    let hits: Vec<bool> = scenes
        .par_iter()
        .map(|s| Ok(infer(cfg, params, &s.image)?.logits.predicted_class() == s.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / scenes.len() as f64)
}

/// Mean task loss over `scenes` without updating anything.
pub fn mean_loss(
    cfg: &WwtConfig,
    params: &WwtParams<f32>,
    st: &TrainSettings,
    task: Task,
    scenes: &[Scene],
    teacher: Option<&Teacher>,
) -> Result<f64> {
    let losses: Vec<f64> = scenes
        .par_iter()
        .map(|s| {
            let mut tape = Tape::<f32>::new();
            let mut binder = Binder::new(params);
            let l = sample_loss(&mut tape, cfg, &mut binder, st, task, s, teacher)?;
            Ok(tape.value(l.total).data()[0].as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub terms: Vec<(String, f64)>,
    /// Image-level accuracy on the validation subset (pretraining only).
    pub val_accuracy: Option<f64>,
    /// Mean task loss on the validation subset.
    pub val_loss: f64,
    pub seconds: f64,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    epochs: Vec<EpochLog>,
}

impl RunLog {
    pub fn push(&mut self, e: EpochLog) -> Result<()> {
        if let Some(last) = self.epochs.last() {
            if e.epoch <= last.epoch {
                return Err(WwtError::invalid("run_log", "epoch indices must increase"));
            }
        }
        self.epochs.push(e);
        Ok(())
    }

    pub fn epochs(&self) -> &[EpochLog] {
        &self.epochs
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.val_accuracy)
            .reduce(f64::max)
    }

    /// One line per epoch of `key=value` fields.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = write!(
                s,
                "epoch={} steps={} lr={:.6e} loss={:.6}",
                e.epoch, e.steps, e.lr, e.train_loss
            );
            for (k, v) in &e.terms {
                let _ = write!(s, " {k}={v:.6}");
            }
            if let Some(a) = e.val_accuracy {
                let _ = write!(s, " val_acc={a:.4}");
            }
            let _ = writeln!(s, " val_loss={:.6} secs={:.1}", e.val_loss, e.seconds);
        }
        s
    }
}

/// Where a run writes its files and whether it reports progress.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub out: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
    /// Stop after this many epochs without shortening the LR schedule.
    pub epoch_limit: Option<usize>,
}

pub struct TrainOutcome {
    pub params: WwtParams<f32>,
    pub log: RunLog,
    pub stopped_early: bool,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| WwtError::io(path, e))
}

/// Optimize `params` for `task` on `train`, validating on `val` after every
/// epoch. With an output directory the run writes `config.txt`, `log.txt`,
/// periodic `epoch_<k>.wwt` files and `final.wwt`. A non-finite loss or
/// gradient stops the run with the step index; the parameters from before
/// that step are saved as `last_good.wwt`.
pub fn fit(
    rc: &RunConfig,
    task: Task,
    mut params: WwtParams<f32>,
    train: &[Scene],
    val: &[Scene],
    opts: &FitOptions,
) -> Result<TrainOutcome> {
    rc.validate()?;
    let (cfg, st) = (&rc.model, &rc.train);
    params.check_against(cfg)?;
    if train.is_empty() {
        return Err(WwtError::Data("empty training split".into()));
    }
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| WwtError::io(dir, e))?;
        write_file(&dir.join("config.txt"), &rc.to_text())?;
    }
    let teacher = match st.ae_mode {
        AeMode::Distill => Some(Teacher::new(cfg, st.teacher_seed)?),
        AeMode::Pixels => None,
    };
    let val = if st.eval_size > 0 && st.eval_size < val.len() {
        &val[..st.eval_size]
    } else {
        val
    };
    let steps_per_epoch = train.len().div_ceil(st.batch_size);
    let total = steps_per_epoch * st.epochs;
    let warmup = steps_per_epoch * st.warmup_epochs;
    let mut opt = AdamW::new(st.beta1, st.beta2, 1e-8, st.weight_decay);
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut stopped_early = false;
    let last_epoch = opts.epoch_limit.map_or(st.epochs, |k| k.min(st.epochs));
    for epoch in 1..=last_epoch {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(st.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut term_sums, mut lr) = (0.0, Vec::<(String, f64)>::new(), 0.0);
        for chunk in order.chunks(st.batch_size) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &train[i]).collect();
            let diverged = |e: String, params: &WwtParams<f32>| -> WwtError {
                let mut msg = e;
                if let Some(dir) = &opts.out {
                    let p = dir.join("last_good.wwt");
                    if checkpoint::save(&p, params).is_ok() {
                        msg.push_str(&format!("; last good checkpoint {}", p.display()));
                    }
                }
                WwtError::Diverged { step, msg }
            };
            let (mut grads, loss, terms) =
                match batch_gradients(cfg, &params, st, task, &batch, teacher.as_ref()) {
                    Ok(r) => r,
                    Err(e @ WwtError::NonFinite { .. }) => {
                        return Err(diverged(e.to_string(), &params))
                    }
                    Err(e) => return Err(e),
                };
            let norm = clip_grad_norm(&mut grads, st.grad_clip);
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient".into(), &params));
            }
            lr = cosine_lr(step, total, warmup, st.lr, st.min_lr);
            opt.step(&mut params, &grads, lr)?;
            step += 1;
            loss_sum += loss * batch.len() as f64;
            for (k, v) in terms {
                match term_sums.iter_mut().find(|(n, _)| *n == k) {
                    Some((_, acc)) => *acc += v * batch.len() as f64,
                    None => term_sums.push((k, v * batch.len() as f64)),
                }
            }
        }
        let n = train.len() as f64;
        term_sums.iter_mut().for_each(|(_, v)| *v /= n);
        let (val_accuracy, val_loss) = if val.is_empty() {
            (None, f64::NAN)
        } else {
            let acc = match task {
                Task::Pretrain => Some(accuracy(cfg, &params, val)?),
                _ => None,
            };
            (
                acc,
                mean_loss(cfg, &params, st, task, val, teacher.as_ref())?,
            )
        };
        log.push(EpochLog {
            epoch,
            steps: step,
            lr,
            train_loss: loss_sum / n,
            terms: term_sums,
            val_accuracy,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        })?;
        if opts.verbose {
            eprint!(
                "{}",
                RunLog {
                    epochs: vec![log.last().expect("pushed").clone()]
                }
                .to_text()
            );
        }
        if let Some(dir) = &opts.out {
            write_file(&dir.join("log.txt"), &log.to_text())?;
            if st.checkpoint_every > 0 && epoch % st.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("epoch_{epoch}.wwt")), &params)?;
            }
        }
        if st.target_accuracy > 0.0 && val_accuracy.is_some_and(|a| a >= st.target_accuracy) {
            stopped_early = true;
            break;
        }
    }
    if let Some(dir) = &opts.out {
        checkpoint::save(&dir.join("final.wwt"), &params)?;
    }
    Ok(TrainOutcome {
        params,
        log,
        stopped_early,
    })
}

/// Pretrain from a fresh initialization seeded by `train.seed`.
pub fn train(
    rc: &RunConfig,
    train: &[Scene],
    val: &[Scene],
    opts: &FitOptions,
) -> Result<TrainOutcome> {
    let params = WwtParams::init(&rc.model, rc.train.seed)?;
    fit(rc, Task::Pretrain, params, train, val, opts)
}

/// Continue from `init` on a task-specific loss.
pub fn finetune(
    rc: &RunConfig,
    task: Task,
    init: WwtParams<f32>,
    train: &[Scene],
    val: &[Scene],
    opts: &FitOptions,
) -> Result<TrainOutcome> {
    init.check_against(&rc.model)
        .map_err(|e| WwtError::Checkpoint(format!("checkpoint does not fit the model: {e}")))?;
    fit(rc, task, init, train, val, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec};

    fn small_run(train_size: usize) -> (RunConfig, Vec<Scene>) {
        let mut rc = RunConfig::default();
        rc.model.image_size = 32;
        rc.model.embed_dim = 32;
        rc.model.blocks = 2;
        rc.model.mlp_hidden_t = 64;
        rc.model.mlp_hidden_s = 64;
        rc.model.mlp_hidden_a = 32;
        rc.model.num_classes = 4;
        rc.data.image_size = 32;
        rc.data.num_classes = 4;
        rc.data.train_size = train_size;
        rc.data.val_size = 0;
        rc.train.batch_size = 4;
        rc.train.epochs = 1;
        let ds = generate(&rc.data).unwrap();
        (rc, ds.train)
    }

    #[test]
    fn gradients_reach_mask_mlp_and_slot_queries() {
        let (rc, scenes) = small_run(2);
        let p = WwtParams::<f32>::init(&rc.model, 1).unwrap();
        let (g, _, _) =
            scene_gradients(&rc.model, &p, &rc.train, Task::Pretrain, &scenes[0], None).unwrap();
        let norm = |n: &str| g[n].data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        assert!(norm("blocks.0.mlp_a.fc1.weight") > 0.0);
        assert!(norm("slot_queries") > 0.0);
    }

    #[test]
    fn frozen_backbone_without_ae_only_trains_the_head() {
        let (mut rc, scenes) = small_run(2);
        rc.train.ae_weight = 0.0;
        rc.train.freeze_backbone = true;
        let p = WwtParams::<f32>::init(&rc.model, 1).unwrap();
        let (g, _, _) =
            scene_gradients(&rc.model, &p, &rc.train, Task::Pretrain, &scenes[0], None).unwrap();
        assert!(!g.is_empty());
        assert!(
            g.keys().all(|k| k.starts_with("cls")),
            "{:?}",
            g.keys().collect::<Vec<_>>()
        );
    }

    #[test]
    fn same_seed_gives_identical_logs() {
        let (rc, scenes) = small_run(8);
        let a = fit(
            &rc,
            Task::Pretrain,
            WwtParams::init(&rc.model, 3).unwrap(),
            &scenes,
            &scenes[..2],
            &FitOptions::default(),
        )
        .unwrap();
        let b = fit(
            &rc,
            Task::Pretrain,
            WwtParams::init(&rc.model, 3).unwrap(),
            &scenes,
            &scenes[..2],
            &FitOptions::default(),
        )
        .unwrap();
        let la: Vec<f64> = a.log.epochs().iter().map(|e| e.train_loss).collect();
        let lb: Vec<f64> = b.log.epochs().iter().map(|e| e.train_loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn epoch_limit_truncates_without_changing_the_schedule() {
        let (mut rc, scenes) = small_run(8);
        rc.train.epochs = 3;
        rc.train.warmup_epochs = 0;
        let init = || WwtParams::init(&rc.model, 3).unwrap();
        let full = fit(
            &rc,
            Task::Pretrain,
            init(),
            &scenes,
            &[],
            &FitOptions::default(),
        )
        .unwrap();
        let opts = FitOptions {
            epoch_limit: Some(2),
            ..Default::default()
        };
        let cut = fit(&rc, Task::Pretrain, init(), &scenes, &[], &opts).unwrap();
        assert_eq!(cut.log.epochs().len(), 2);
        let key = |o: &TrainOutcome| {
            o.log
                .epochs()
                .iter()
                .map(|e| (e.lr, e.train_loss))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&cut), key(&full)[..2]);
    }

    #[test]
    fn log_rejects_non_increasing_epochs() {
        let e = EpochLog {
            epoch: 1,
            steps: 1,
            lr: 0.1,
            train_loss: 1.0,
            terms: vec![],
            val_accuracy: None,
            val_loss: 0.0,
            seconds: 0.0,
        };
        let mut log = RunLog::default();
        log.push(e.clone()).unwrap();
        assert!(log.push(e).is_err());
    }

    #[test]
    fn divergence_reports_the_step() {
        let (mut rc, scenes) = small_run(4);
        rc.train.lr = 1e30;
        rc.train.warmup_epochs = 0;
        rc.train.grad_clip = 0.0;
        rc.train.epochs = 3;
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        match fit(
            &rc,
            Task::Pretrain,
            WwtParams::init(&rc.model, 3).unwrap(),
            &scenes,
            &[],
            &opts,
        ) {
            Err(WwtError::Diverged { step, msg }) => {
                assert!(step >= 1);
                assert!(msg.contains("last_good.wwt"));
                assert!(checkpoint::load(&dir.path().join("last_good.wwt")).is_ok());
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn detection_matches_one_slot_per_object() {
        let mut spec = GenSpec {
            image_size: 32,
            num_classes: 4,
            min_instances: 1,
            max_instances: 1,
            train_size: 3,
            val_size: 0,
            ..Default::default()
        };
        spec.seed = 5;
        let ds = generate(&spec).unwrap();
        let (rc, _) = small_run(1);
        let p = WwtParams::<f32>::init(&rc.model, 1).unwrap();
        for s in &ds.train {
            let mut tape = Tape::<f64>::new();
            let pd = p.cast::<f64>();
            let mut b = Binder::new(&pd);
            let out = forward(&mut tape, &rc.model, &mut b, &s.image, false).unwrap();
            let mean = mean_heads(&mut tape, &out.state.masks).unwrap();
            let vars =
                detect(&mut tape, &rc.model, &mut b, out.state.x, out.state.z, mean).unwrap();
            let preds = predictions(&tape, &vars);
            let a = match_bipartite(&preds, &ground_truths(s), &LossWeights::default()).unwrap();
            assert_eq!(a.len(), 1);
        }
    }
}
