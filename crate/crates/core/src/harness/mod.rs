//! Training loop, learning-rate schedule, evaluation driver and ablation
//! runners.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{check_config_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};

use crate::attncontrol::{attention_losses, attention_losses_grad, downsample_mask, AttnControlConfig, AttnLosses, MaskRegion};
use crate::data::{oracle_obj_decode, pred_all_decode, remap_labels, Sample};
use crate::error::{Error, Result};
use crate::losses::{derive_targets, mask_loss_grad, total_loss, LossWeights, SupervisionTargets};
use crate::metrics::{BoundaryAccumulator, ConfusionAccumulator, LabelGrid, MetricReport};
use crate::model::{DecoderOutput, ModelConfig, PartSegModel, Trainable};
use crate::taxonomy::Taxonomy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub poly_power: f64,
    pub grad_clip_norm: f64,
    pub checkpoint_every: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub attn: AttnControlConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            total_iters: 20000,
            batch_size: 8,
            warmup_iters: 200,
            poly_power: 0.9,
            grad_clip_norm: 0.01,
            checkpoint_every: 1000,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            attn: AttnControlConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.base_lr", self.base_lr),
            ("train.poly_power", self.poly_power),
            ("train.grad_clip_norm", self.grad_clip_norm),
            ("train.adam_eps", self.optimizer.eps),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [("train.total_iters", self.total_iters), ("train.batch_size", self.batch_size)] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.warmup_iters >= self.total_iters && self.warmup_iters > 0 {
            return Err(Error::config("train.warmup_iters", "must be below train.total_iters"));
        }
        for (key, v) in [("train.beta1", self.optimizer.beta1), ("train.beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        self.loss.validate()?;
        self.attn.validate()
    }
}

/// Linear warmup from 0 to `base_lr`, then polynomial decay to 0 at
/// `total_iters`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_iters);
    if step < cfg.warmup_iters {
        return cfg.base_lr * step as f64 / cfg.warmup_iters as f64;
    }
    let span = (cfg.total_iters - cfg.warmup_iters) as f64;
    if span == 0.0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_iters) as f64 / span;
    cfg.base_lr * (1.0 - progress).max(0.0).powf(cfg.poly_power)
}

/// A training sample with everything that does not depend on the trainable
/// parameters precomputed.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub features: Array2<f64>,
    pub targets: SupervisionTargets,
    pub regions: Vec<MaskRegion>,
}

/// Token-grid mask regions of every object-specific part present in
/// `label`; regions whose token mask comes out empty are dropped.
pub fn mask_regions(label: &LabelGrid, taxonomy: &Taxonomy, token_h: usize, token_w: usize) -> Vec<MaskRegion> {
    let mut present: Vec<usize> = label.0.iter().filter(|&&v| v > 0).map(|&v| v as usize - 1).collect();
    present.sort_unstable();
    present.dedup();
    present
        .into_iter()
        .filter(|&k| k < taxonomy.num_pairs())
        .filter_map(|k| {
            let mask = downsample_mask(label.mask_of((k + 1) as u16).view(), token_h, token_w);
            mask.iter().any(|&m| m).then(|| {
                let (object, part) = taxonomy.pair(k);
                MaskRegion { pair: k, object, part, mask }
            })
        })
        .collect()
}

impl TrainItem {
    /// `label` must already be expressed in `taxonomy`'s indices.
    pub fn new(model: &PartSegModel, image: &ndarray::Array3<f64>, label: &LabelGrid, taxonomy: &Taxonomy) -> Result<Self> {
        let spec = model.spec();
        Ok(Self {
            features: model.encode_image(image)?,
            targets: derive_targets(label, taxonomy)?,
            regions: mask_regions(label, taxonomy, spec.token_h, spec.token_w),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLosses {
    pub mask: f64,
    pub attn: AttnLosses,
    pub total: f64,
}

/// Loss of one sample and its gradient with respect to every trainable
/// parameter.
pub fn sample_loss_grad(
    model: &PartSegModel,
    item: &TrainItem,
    taxonomy: &Taxonomy,
    weights: &LossWeights,
    attn: &AttnControlConfig,
) -> Result<(SampleLosses, Trainable)> {
    let (out, trace) = model.forward_features(&item.features, taxonomy)?;
    let (mask, d_logits) = mask_loss_grad(&out, &item.targets, weights)?;
    let (a, d_attn) = attention_losses_grad(
        &out.attention,
        &item.regions,
        taxonomy.num_pairs(),
        attn,
        weights.lambda_sep,
        weights.lambda_enh,
    )?;
    let use_attn = weights.lambda_sep != 0.0 || weights.lambda_enh != 0.0;
    let grads = model.backward(&trace, &d_logits, use_attn.then_some(&d_attn));
    let total = total_loss(mask, a.sep_soft, a.enh, weights);
    Ok((SampleLosses { mask, attn: a, total }, grads))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L_mask")]
    pub l_mask: f64,
    #[serde(rename = "L_sep")]
    pub l_sep: f64,
    #[serde(rename = "L_enh")]
    pub l_enh: f64,
    #[serde(rename = "L_all")]
    pub l_all: f64,
    #[serde(rename = "L_sep_hard")]
    pub l_sep_hard: f64,
    pub overlap_fraction: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
}

/// One optimizer step on `batch`. `step` is the 0-based index of this
/// update; it uses the learning rate `lr_at(step + 1)`.
pub fn train_step(
    model: &mut PartSegModel,
    optimizer: &mut AdamW,
    batch: &[&TrainItem],
    taxonomy: &Taxonomy,
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::EmptySplit);
    }
    let n = batch.len() as f64;
    let mut grads = model.params.zeros_like();
    let mut sum = [0.0; 6];
    for item in batch {
        let (l, g) = sample_loss_grad(model, item, taxonomy, &cfg.loss, &cfg.attn)?;
        grads.add_scaled(&g, 1.0 / n);
        for (acc, v) in sum.iter_mut().zip([l.mask, l.attn.sep_soft, l.attn.enh, l.total, l.attn.sep_hard, l.attn.overlap_fraction]) {
            *acc += v / n;
        }
    }
    let [l_mask, l_sep, l_enh, l_all, l_sep_hard, overlap] = sum;
    if !sum.iter().all(|v| v.is_finite()) || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: step + 1,
            detail: format!(
                "L_mask={l_mask} L_sep={l_sep} L_enh={l_enh} L_all={l_all} grad_finite={}",
                grads.is_finite()
            ),
        });
    }
    let (grad_norm, grad_norm_clipped) = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    let lr = lr_at(step + 1, cfg);
    optimizer.update(&mut model.params, &grads, lr);
    Ok(StepReport {
        step: step + 1,
        lr,
        l_mask,
        l_sep,
        l_enh,
        l_all,
        l_sep_hard,
        overlap_fraction: overlap,
        grad_norm,
        grad_norm_clipped,
    })
}

/// Owns the model, optimizer state and the seen-only training data.
pub struct Trainer {
    pub model: PartSegModel,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub step: usize,
    taxonomy: Taxonomy,
    items: Vec<TrainItem>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// Trains on the seen objects of `taxonomy`; labels of unseen pairs are
    /// treated as background.
    pub fn new(model: PartSegModel, config: TrainConfig, taxonomy: &Taxonomy, samples: &[Sample]) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptySplit);
        }
        let (seen, remap) = taxonomy.seen_only();
        let items = samples
            .iter()
            .map(|s| TrainItem::new(&model, &s.image, &remap_labels(&s.label, &remap), &seen))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = AdamW::new(&model.params, config.optimizer);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { model, optimizer, config, step: 0, taxonomy: seen, items, rng, order: Vec::new(), cursor: 0 })
    }

    /// Continue from a checkpoint's parameters and optimizer state. The
    /// batch sampler is replayed up to the checkpoint step, so a resumed run
    /// matches an uninterrupted one.
    pub fn resume(&mut self, checkpoint: Checkpoint) {
        self.model = checkpoint.model;
        if let Some(opt) = checkpoint.optimizer {
            self.optimizer = opt;
        }
        self.step = checkpoint.step;
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.order.clear();
        self.cursor = 0;
        for _ in 0..self.step {
            self.next_batch();
        }
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.items.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let idx = self.next_batch();
        let batch: Vec<&TrainItem> = idx.iter().map(|&i| &self.items[i]).collect();
        let report = train_step(&mut self.model, &mut self.optimizer, &batch, &self.taxonomy, self.step, &self.config)?;
        self.step += 1;
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optimizer), self.step, config_hash)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    PredAll,
    OracleObj,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::PredAll => "pred_all",
            Protocol::OracleObj => "oracle_obj",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pred_all" => Ok(Protocol::PredAll),
            "oracle_obj" => Ok(Protocol::OracleObj),
            _ => Err(format!("unknown protocol {s:?} (pred_all, oracle_obj)")),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub include_background: bool,
    /// `None` uses the size-dependent default.
    pub boundary_width: Option<usize>,
    /// When set, also measure the hard overlap fraction of binarized
    /// attention maps over ground-truth regions.
    pub attn: Option<AttnControlConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { protocol: Protocol::OracleObj, include_background: false, boundary_width: None, attn: None }
    }
}

pub fn decode(out: &DecoderOutput, sample: &Sample, taxonomy: &Taxonomy, protocol: Protocol) -> Result<LabelGrid> {
    match protocol {
        Protocol::PredAll => Ok(pred_all_decode(out)),
        Protocol::OracleObj => oracle_obj_decode(out, &sample.object_label, taxonomy),
    }
}

/// Score precomputed predictions against ground truth.
pub fn evaluate_predictions(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    taxonomy: &Taxonomy,
    protocol: &str,
    include_background: bool,
    boundary_width: Option<usize>,
) -> Result<MetricReport> {
    if gts.is_empty() {
        return Err(Error::EmptySplit);
    }
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", preds.len(), gts.len())));
    }
    let classes = taxonomy.num_pairs() + 1;
    let mut confusion = ConfusionAccumulator::new(classes);
    let mut boundary = BoundaryAccumulator::new(classes, boundary_width);
    for (p, g) in preds.iter().zip(gts) {
        confusion.accumulate(p, g)?;
        boundary.accumulate(p, g)?;
    }
    Ok(MetricReport::build(protocol, gts.len(), taxonomy, &confusion, &boundary, include_background))
}

/// Model predictions on `samples`, decoded per `protocol`, together with the
/// mean attention overlap fraction when requested.
pub fn predict(
    model: &PartSegModel,
    samples: &[Sample],
    taxonomy: &Taxonomy,
    protocol: Protocol,
    attn: Option<&AttnControlConfig>,
) -> Result<(Vec<LabelGrid>, Option<f64>)> {
    let spec = model.spec();
    let mut preds = Vec::with_capacity(samples.len());
    let mut overlap = (0.0, 0usize);
    for s in samples {
        let out = model.forward(&s.image, taxonomy)?;
        preds.push(decode(&out, s, taxonomy, protocol)?);
        if let Some(cfg) = attn {
            let regions = mask_regions(&s.label, taxonomy, spec.token_h, spec.token_w);
            if !regions.is_empty() {
                overlap.0 += attention_losses(&out.attention, &regions, taxonomy.num_pairs(), cfg)?.overlap_fraction;
                overlap.1 += 1;
            }
        }
    }
    let mean = (attn.is_some() && overlap.1 > 0).then(|| overlap.0 / overlap.1 as f64);
    Ok((preds, mean))
}

pub fn evaluate(model: &PartSegModel, samples: &[Sample], taxonomy: &Taxonomy, opts: &EvalOptions) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit);
    }
    let (preds, overlap) = predict(model, samples, taxonomy, opts.protocol, opts.attn.as_ref())?;
    let gts: Vec<LabelGrid> = samples.iter().map(|s| s.label.clone()).collect();
    let mut report =
        evaluate_predictions(&preds, &gts, taxonomy, opts.protocol.as_str(), opts.include_background, opts.boundary_width)?;
    report.overlap_fraction = overlap;
    Ok(report)
}

/// Where and how often a training run writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PartSegModel,
    pub reports: Vec<StepReport>,
    /// `(step, harmonic mIoU)` of the best validation checkpoint.
    pub best: Option<(usize, f64)>,
}

/// Train for `total_iters` steps. With an output directory this writes
/// `train_log.jsonl`, periodic `ckpt_<step>.bin`, `last.bin` and, when a
/// validation split is given, `best.bin` chosen by highest validation
/// harmonic mIoU.
pub fn train(
    model: PartSegModel,
    cfg: &TrainConfig,
    taxonomy: &Taxonomy,
    train_samples: &[Sample],
    val: Option<(&[Sample], &EvalOptions)>,
    outputs: &RunOutputs,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone(), taxonomy, train_samples)?;
    run_trainer(&mut trainer, taxonomy, val, outputs)
}

pub fn run_trainer(
    trainer: &mut Trainer,
    taxonomy: &Taxonomy,
    val: Option<(&[Sample], &EvalOptions)>,
    outputs: &RunOutputs,
) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    let mut log = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(cfg.total_iters.saturating_sub(trainer.step));
    let mut best: Option<(usize, f64)> = None;
    while trainer.step < cfg.total_iters {
        let r = trainer.step()?;
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
        }
        if r.step % 50 == 0 || r.step == 1 {
            log::info!("step {} L_all {:.5} L_mask {:.5} lr {:.2e}", r.step, r.l_all, r.l_mask, r.lr);
        }
        reports.push(r);
        let at_checkpoint = cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0;
        if at_checkpoint || r.step == cfg.total_iters {
            if let Some(dir) = &outputs.dir {
                if at_checkpoint {
                    trainer.save(dir.join(format!("ckpt_{:06}.bin", r.step)), &outputs.config_hash)?;
                }
            }
            if let Some((samples, opts)) = val {
                let report = evaluate(&trainer.model, samples, taxonomy, opts)?;
                let h = report.miou.harmonic.or(report.miou.seen).unwrap_or(0.0);
                log::info!("step {} validation harmonic mIoU {:.4}", r.step, h);
                if best.map_or(true, |(_, b)| h > b) {
                    best = Some((r.step, h));
                    if let Some(dir) = &outputs.dir {
                        trainer.save(dir.join("best.bin"), &outputs.config_hash)?;
                    }
                }
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &outputs.dir {
        trainer.save(dir.join("last.bin"), &outputs.config_hash)?;
    }
    Ok(TrainOutcome { model: trainer.model.clone(), reports, best })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub harmonic: Option<f64>,
}

pub fn ablation_table(title: &str, rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(0).max(title.len());
    let mut out = format!("{:<width$} {:>8} {:>8} {:>9}\n", title, "Seen", "Unseen", "Harmonic");
    for r in rows {
        out += &format!("{:<width$} {:>8} {:>8} {:>9}\n", r.setting, pct(r.seen), pct(r.unseen), pct(r.harmonic));
    }
    out
}

/// Inputs shared by every run of an ablation.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub taxonomy: &'a Taxonomy,
    pub train_samples: &'a [Sample],
    pub val_samples: &'a [Sample],
    pub eval: EvalOptions,
}

fn ablation_run(setup: &AblationSetup, train: &TrainConfig, setting: String) -> Result<AblationRow> {
    let model = PartSegModel::new(setup.model)?;
    let outcome = self::train(model, train, setup.taxonomy, setup.train_samples, None, &RunOutputs::default())?;
    let report = evaluate(&outcome.model, setup.val_samples, setup.taxonomy, &setup.eval)?;
    Ok(AblationRow { setting, seen: report.miou.seen, unseen: report.miou.unseen, harmonic: report.miou.harmonic })
}

/// Drop repeated γ values, keeping first occurrences; returns the kept
/// values and the duplicates.
pub fn dedup_gammas(gammas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut dropped = Vec::new();
    for &g in gammas {
        if kept.iter().any(|&k| k == g) {
            dropped.push(g);
        } else {
            kept.push(g);
        }
    }
    (kept, dropped)
}

/// Train and evaluate once per distinct γ.
pub fn ablation_gamma(setup: &AblationSetup, gammas: &[f64]) -> Result<Vec<AblationRow>> {
    let (kept, dropped) = dedup_gammas(gammas);
    for g in dropped {
        log::warn!("duplicate gamma {g} ignored");
    }
    kept.into_iter()
        .map(|g| {
            let mut cfg = setup.train.clone();
            cfg.attn.gamma = g;
            cfg.attn.validate()?;
            ablation_run(setup, &cfg, format!("{g}"))
        })
        .collect()
}

/// The five (λ_obj, λ_part, attention control) settings, with attention
/// control on meaning the configured λ_sep and λ_enh.
pub fn lambda_settings(base: &LossWeights) -> Vec<(String, LossWeights)> {
    let row = |o: f64, p: f64, attn: bool| {
        let w = LossWeights {
            lambda_obj: o,
            lambda_part: p,
            lambda_sep: if attn { base.lambda_sep } else { 0.0 },
            lambda_enh: if attn { base.lambda_enh } else { 0.0 },
        };
        (format!("obj={o:.1} part={p:.1} attn={}", if attn { "on" } else { "off" }), w)
    };
    vec![row(0.0, 0.0, true), row(1.0, 0.0, true), row(0.0, 1.0, true), row(1.0, 1.0, false), row(1.0, 1.0, true)]
}

pub fn ablation_lambda(setup: &AblationSetup) -> Result<Vec<AblationRow>> {
    lambda_settings(&setup.train.loss)
        .into_iter()
        .map(|(name, w)| {
            let mut cfg = setup.train.clone();
            cfg.loss = w;
            ablation_run(setup, &cfg, name)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { base_lr: 1e-3, total_iters: 100, warmup_iters: 10, ..Default::default() };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10, &cfg), 1e-3);
        assert_eq!(lr_at(100, &cfg), 0.0);
        assert!((lr_at(5, &cfg) - 5e-4).abs() < 1e-18);
        assert!(lr_at(50, &cfg) < 1e-3 && lr_at(50, &cfg) > lr_at(60, &cfg));
    }

    #[test]
    fn gamma_dedup() {
        let (kept, dropped) = dedup_gammas(&[0.1, 0.3, 0.1, 0.5, 0.3]);
        assert_eq!(kept, [0.1, 0.3, 0.5]);
        assert_eq!(dropped, [0.1, 0.3]);
    }

    #[test]
    fn five_lambda_rows() {
        let rows = lambda_settings(&LossWeights::default());
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].1.lambda_sep, 0.0);
        assert_eq!(rows[4].1, LossWeights::default());
    }

    #[test]
    fn protocol_names() {
        for p in [Protocol::PredAll, Protocol::OracleObj] {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("pred_obj".parse::<Protocol>().is_err());
    }
}
