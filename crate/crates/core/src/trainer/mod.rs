//! Training loop for the supervised baseline, the mean teacher, and the two
//! competitive-ensembling variants, plus evaluation and run reports.

mod config;
mod infer;
mod report;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{sample_batch, sample_rng, PatchBatch, SamplePool, SemiDataset};
use crate::ensembling::{
    ema_update_classic_in_place, ema_update_competitive_in_place, weights_bidirectional,
    weights_unidirectional, CompetitiveWeights, EmaConfig,
};
use crate::error::{Error, Result};
use crate::geometry::sdf_to_mask_value;
use crate::losses::{
    consistency_loss_grad, dice_loss, rampup_weight, supervised_seg_loss_grad,
    supervised_sdf_loss_grad, LossValue,
};
use crate::metrics::{aggregate, evaluate_case, CaseMetrics};
use crate::model::{build_network, save_checkpoint, ActiveHead, DualHeadNetwork, ParamVector};
use crate::volume::Volume;

pub use config::{
    lr_at, CompetitionSource, InferenceConfig, Method, NoiseConfig, RampConfig, Seeds, TrainConfig,
};
pub use infer::{coverage_counts, infer_sliding_window, window_starts, PatchPredictor};
pub use report::{read_trace_csv, write_trace_csv, CaseRecord, RunReport, TraceRow};

/// Plain SGD with optional heavy-ball momentum.
struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    fn new(len: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: if momentum > 0.0 { vec![0.0; len] } else { Vec::new() },
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        if self.momentum > 0.0 {
            for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        } else {
            for (p, &g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
    }
}

/// Teacher predictions for every batch input, in batch order.
struct TeacherOutputs {
    seg: Vec<Vec<f64>>,
    sdf: Vec<Vec<f64>>,
}

struct StudentStep {
    loss: LossValue,
    grads: Vec<f64>,
}

fn seg_student_step(
    net: &DualHeadNetwork,
    batch: &PatchBatch,
    teacher: Option<&TeacherOutputs>,
    lambda: f64,
) -> Result<StudentStep> {
    let inputs: Vec<&Volume> = match teacher {
        Some(_) => batch.inputs().collect(),
        None => batch.labeled_images.iter().collect(),
    };
    let passes = inputs
        .iter()
        .map(|x| net.forward_cached(x))
        .collect::<Result<Vec<_>>>()?;
    let n = passes[0].0.voxels();
    let nl = batch.labeled_images.len();

    let mut probs = vec![0.0; 2 * nl * n];
    let mut target = Vec::with_capacity(nl * n);
    for (s, (out, _)) in passes.iter().take(nl).enumerate() {
        let p = out.seg.as_ref().expect("segmentation head active");
        probs[s * n..(s + 1) * n].copy_from_slice(&p[..n]);
        probs[(nl + s) * n..(nl + s + 1) * n].copy_from_slice(&p[n..]);
        target.extend_from_slice(batch.labeled_masks[s].data());
    }
    let (mut loss, sup_grad) = supervised_seg_loss_grad(&probs, &target)?;

    let mut per_sample: Vec<Vec<f64>> = (0..passes.len()).map(|_| vec![0.0; 2 * n]).collect();
    for (s, g) in per_sample.iter_mut().take(nl).enumerate() {
        g[..n].copy_from_slice(&sup_grad[s * n..(s + 1) * n]);
        g[n..].copy_from_slice(&sup_grad[(nl + s) * n..(nl + s + 1) * n]);
    }
    if let Some(t) = teacher {
        let student: Vec<f64> = passes
            .iter()
            .flat_map(|(o, _)| o.seg.as_ref().expect("segmentation head active").iter().copied())
            .collect();
        let reference: Vec<f64> = t.seg.iter().flatten().copied().collect();
        let (cons, cons_grad) = consistency_loss_grad(&student, &reference)?;
        for (s, g) in per_sample.iter_mut().enumerate() {
            for (a, b) in g.iter_mut().zip(&cons_grad[s * 2 * n..(s + 1) * 2 * n]) {
                *a += lambda * b;
            }
        }
        loss.value += lambda * cons;
        loss.components.consistency = Some(cons);
    }

    let mut grads = vec![0.0; net.num_params()];
    for ((_, cache), g) in passes.iter().zip(&per_sample) {
        net.backward(cache, Some(g), None, &mut grads)?;
    }
    Ok(StudentStep { loss, grads })
}

fn reg_student_step(
    net: &DualHeadNetwork,
    batch: &PatchBatch,
    teacher: &TeacherOutputs,
    lambda: f64,
    sharpness: f64,
) -> Result<StudentStep> {
    let passes = batch
        .inputs()
        .map(|x| net.forward_cached(x))
        .collect::<Result<Vec<_>>>()?;
    let n = passes[0].0.voxels();
    let nl = batch.labeled_images.len();
    let pred: Vec<f64> = passes
        .iter()
        .take(nl)
        .flat_map(|(o, _)| o.sdf.as_ref().expect("regression head active").iter().copied())
        .collect();
    let target_sdf: Vec<f64> = batch.labeled_sdfs.iter().flat_map(|v| v.data().iter().copied()).collect();
    let target_mask: Vec<f64> = batch.labeled_masks.iter().flat_map(|v| v.data().iter().copied()).collect();
    let (mut loss, sup_grad) = supervised_sdf_loss_grad(&pred, &target_sdf, &target_mask, sharpness)?;

    let student: Vec<f64> = passes
        .iter()
        .flat_map(|(o, _)| o.sdf.as_ref().expect("regression head active").iter().copied())
        .collect();
    let reference: Vec<f64> = teacher.sdf.iter().flatten().copied().collect();
    let (cons, cons_grad) = consistency_loss_grad(&student, &reference)?;
    loss.value += lambda * cons;
    loss.components.consistency = Some(cons);

    let mut grads = vec![0.0; net.num_params()];
    for (s, (_, cache)) in passes.iter().enumerate() {
        let mut g: Vec<f64> = cons_grad[s * n..(s + 1) * n].iter().map(|v| lambda * v).collect();
        if s < nl {
            for (a, b) in g.iter_mut().zip(&sup_grad[s * n..(s + 1) * n]) {
                *a += b;
            }
        }
        net.backward(cache, None, Some(&g), &mut grads)?;
    }
    Ok(StudentStep { loss, grads })
}

fn perturb<R: Rng>(image: &Volume, noise: &NoiseConfig, normal: &Normal<f64>, rng: &mut R) -> Volume {
    let mut out = image.clone();
    if noise.enabled {
        for v in out.data_mut() {
            *v += normal.sample(rng).clamp(-noise.clip, noise.clip);
        }
    }
    out
}

/// Dice losses of both students over every full labeled volume.
fn full_set_dice(m1: &DualHeadNetwork, m2: &DualHeadNetwork, data: &SemiDataset, k: f64) -> Result<(f64, f64)> {
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    let mut t = Vec::new();
    for s in &data.labeled {
        p1.extend_from_slice(m1.forward(&s.image)?.foreground().expect("segmentation head active"));
        p2.extend(
            m2.forward(&s.image)?
                .sdf
                .expect("regression head active")
                .iter()
                .map(|&z| sdf_to_mask_value(z, k)),
        );
        t.extend_from_slice(s.mask.data());
    }
    Ok((dice_loss(&p1, &t)?, dice_loss(&p2, &t)?))
}

fn dump_batch(dir: &Path, step: usize, batch: &PatchBatch) -> Result<std::path::PathBuf> {
    let target = dir.join(format!("nonfinite_step{step:06}"));
    fs::create_dir_all(&target)?;
    let groups: [(&str, &[Volume]); 4] = [
        ("labeled_image", &batch.labeled_images),
        ("labeled_mask", &batch.labeled_masks),
        ("labeled_sdf", &batch.labeled_sdfs),
        ("unlabeled_image", &batch.unlabeled_images),
    ];
    for (name, vols) in groups {
        for (i, v) in vols.iter().enumerate() {
            crate::data::save_volume(&target.join(format!("{name}_{i}.vseg")), v)?;
        }
    }
    Ok(target)
}

fn ensure_finite(step: usize, what: &str, s: &StudentStep, batch: &PatchBatch, cfg: &TrainConfig) -> Result<()> {
    if s.loss.value.is_finite() && s.grads.iter().all(|g| g.is_finite()) {
        return Ok(());
    }
    let dump = match &cfg.dump_dir {
        Some(dir) => Some(dump_batch(dir, step, batch)?),
        None => None,
    };
    Err(Error::NonFiniteLoss {
        step,
        detail: format!("{what}: {:?}", s.loss),
        dump,
    })
}

/// Trained networks of a run.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub m1: DualHeadNetwork,
    pub m2: Option<DualHeadNetwork>,
    pub teacher: Option<DualHeadNetwork>,
}

impl TrainedModels {
    /// The network whose segmentation head is evaluated: the teacher when
    /// one exists, otherwise the single student.
    pub fn predictor(&self) -> &DualHeadNetwork {
        self.teacher.as_ref().unwrap_or(&self.m1)
    }

    /// Writes `m1.ckpt`, `m2.ckpt` and `teacher.ckpt` (as present) into `dir`.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        let all = [("m1.ckpt", Some(&self.m1)), ("m2.ckpt", self.m2.as_ref()), ("teacher.ckpt", self.teacher.as_ref())];
        for (name, net) in all {
            if let Some(net) = net {
                save_checkpoint(&dir.join(name), net)?;
                names.push(name.to_string());
            }
        }
        Ok(names)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub models: TrainedModels,
}

pub fn train(config: &TrainConfig, dataset: &SemiDataset, testset: &SamplePool) -> Result<TrainOutcome> {
    train_observed(config, dataset, testset, |_, _| {})
}

/// Like [`train`], calling `observer(step, teacher_params)` after every
/// teacher update.
pub fn train_observed<F>(
    config: &TrainConfig,
    dataset: &SemiDataset,
    testset: &SamplePool,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ParamVector),
{
    config.validate()?;
    if dataset.split.seed != config.seeds.split {
        return Err(Error::Config(format!(
            "dataset was split with seed {} but the run expects {}",
            dataset.split.seed, config.seeds.split
        )));
    }
    let method = config.method;
    if method.has_teacher() && dataset.unlabeled.is_empty() {
        return Err(Error::Config(format!("method {method} needs unlabeled data")));
    }
    let started = Instant::now();

    // All models start from the same weights so that their parameters stay
    // comparable for averaging.
    let base = build_network(&config.network, config.seeds.init)?;
    let mut m1 = base.clone().with_active_head(ActiveHead::Seg);
    let mut m2 = method
        .has_second_student()
        .then(|| base.clone().with_active_head(ActiveHead::Reg));
    let mut teacher = method.has_teacher().then(|| {
        let mut t = base.clone().with_active_head(ActiveHead::Both);
        t.freeze();
        t
    });
    let mut teacher_params = base.get_params();

    let mut batch_cfg = config.batch.clone();
    if !method.has_teacher() {
        batch_cfg.unlabeled = 0;
    }
    let mut sampler = sample_rng(config.seeds.sampler, 0);
    let mut noise_rng = sample_rng(config.seeds.sampler, 1);
    let noise = Normal::new(0.0, config.teacher_noise.std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut opt1 = Sgd::new(m1.num_params(), config.momentum);
    let mut opt2 = Sgd::new(m1.num_params(), config.momentum);
    let ramp_len = config.ramp_length();
    let mut full_set_cache: Option<(f64, f64)> = None;
    let mut trace = Vec::with_capacity(config.iterations);

    for step in 0..config.iterations {
        let batch = sample_batch(dataset, &batch_cfg, &mut sampler)?;
        let lr = lr_at(step, config);
        let lambda = if method.has_teacher() {
            rampup_weight(step, ramp_len, config.ramp.w_max)
        } else {
            0.0
        };

        let teacher_out = match &teacher {
            Some(t) => {
                let mut seg = Vec::with_capacity(batch.len());
                let mut sdf = Vec::with_capacity(batch.len());
                for x in batch.inputs() {
                    let out = t.forward(&perturb(x, &config.teacher_noise, &noise, &mut noise_rng))?;
                    seg.push(out.seg.expect("teacher evaluates both heads"));
                    sdf.push(out.sdf.expect("teacher evaluates both heads"));
                }
                Some(TeacherOutputs { seg, sdf })
            }
            None => None,
        };

        let s1 = seg_student_step(&m1, &batch, teacher_out.as_ref(), lambda)?;
        ensure_finite(step, "student 1", &s1, &batch, config)?;
        let s2 = match (&m2, &teacher_out) {
            (Some(net), Some(t)) => {
                let s = reg_student_step(net, &batch, t, lambda, config.sharpness)?;
                ensure_finite(step, "student 2", &s, &batch, config)?;
                Some(s)
            }
            _ => None,
        };

        opt1.step(m1.params_mut(), &s1.grads, lr);
        if let (Some(net), Some(s)) = (m2.as_mut(), &s2) {
            opt2.step(net.params_mut(), &s.grads, lr);
        }

        let mut l1 = s1.loss.components.dice.expect("supervised loss has a dice part").clamp(0.0, 1.0);
        let mut l2 = s2
            .as_ref()
            .map(|s| s.loss.components.dice.expect("supervised loss has a dice part").clamp(0.0, 1.0));
        if let (CompetitionSource::FullSet { every }, Some(net2)) = (config.competition, &m2) {
            if step % every == 0 || full_set_cache.is_none() {
                full_set_cache = Some(full_set_dice(&m1, net2, dataset, config.sharpness)?);
            }
            let (a, b) = full_set_cache.expect("filled above");
            l1 = a.clamp(0.0, 1.0);
            l2 = Some(b.clamp(0.0, 1.0));
        }
        if let (Some(pin), Some(l)) = (config.pin_dice_l2, l2.as_mut()) {
            *l = pin;
        }

        let mut weights = None;
        if let Some(t) = teacher.as_mut() {
            let alpha = if config.ema_warmup {
                (1.0 - 1.0 / (step as f64 + 1.0)).min(config.ema.alpha)
            } else {
                config.ema.alpha
            };
            let ema = EmaConfig {
                alpha,
                head_policy: config.ema.head_policy,
            };
            let p1 = m1.get_params();
            let w = match (method, &m2, l2) {
                (Method::CompetitiveUnidirectional, Some(net2), Some(l2)) => {
                    let w = weights_unidirectional(l1, l2)?;
                    ema_update_competitive_in_place(&mut teacher_params, &p1, &net2.get_params(), &w, &ema)?;
                    w
                }
                (Method::CompetitiveBidirectional, Some(net2), Some(l2)) => {
                    let w = weights_bidirectional(l1, l2)?;
                    ema_update_competitive_in_place(&mut teacher_params, &p1, &net2.get_params(), &w, &ema)?;
                    w
                }
                _ => {
                    ema_update_classic_in_place(&mut teacher_params, &p1, alpha)?;
                    CompetitiveWeights::classic()
                }
            };
            t.set_params(&teacher_params)?;
            observer(step, &teacher_params);
            weights = Some(w);
        }

        trace.push(TraceRow {
            step,
            lr,
            lambda_con: lambda,
            loss_m1: s1.loss.value,
            loss_m2: s2.as_ref().map(|s| s.loss.value),
            dice_l1: l1,
            dice_l2: l2,
            r1: weights.map(|w| w.r1),
            r2: weights.map(|w| w.r2),
        });
    }

    let models = TrainedModels { m1, m2, teacher };
    let inference_patch = config.inference_patch();
    let stride = config.inference_stride();
    let cases = evaluate_model(models.predictor(), testset, &inference_patch, &stride)?;
    let report = RunReport::new(config.clone(), trace, cases, started.elapsed().as_secs_f64());
    Ok(TrainOutcome { report, models })
}

/// Sliding-window segmentation of every test case, thresholded at 0.5 and
/// scored against its mask.
pub fn evaluate_model<P: PatchPredictor + ?Sized>(
    model: &P,
    testset: &SamplePool,
    patch_shape: &[usize],
    stride: &[usize],
) -> Result<Vec<CaseRecord>> {
    testset
        .samples
        .iter()
        .map(|s| {
            let prob = infer_sliding_window(model, &s.image, patch_shape, stride)?;
            let metrics: CaseMetrics = evaluate_case(&prob.threshold(0.5), &s.mask, s.mask.spacing())?;
            Ok(CaseRecord {
                id: s.id.clone(),
                metrics,
            })
        })
        .collect()
}

/// Re-scores a saved run from its predictor checkpoint.
pub fn evaluate_checkpoint(
    path: &Path,
    testset: &SamplePool,
    patch_shape: &[usize],
    stride: &[usize],
) -> Result<Vec<CaseRecord>> {
    let net = crate::model::load_checkpoint(path)?;
    evaluate_model(&net, testset, patch_shape, stride)
}

/// Mean test Dice of a set of case records.
pub fn mean_dice(cases: &[CaseRecord]) -> f64 {
    let metrics: Vec<CaseMetrics> = cases.iter().map(|c| c.metrics).collect();
    aggregate(&metrics).dice.mean
}
