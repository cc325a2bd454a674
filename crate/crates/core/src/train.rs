//! Training loop, evaluation, checkpoints and the ablation harness.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_archive, write_archive, Archive};
use crate::config::{DataSource, TrainConfig};
use crate::data::{augment, generate_dataset, load_dataset, stack_images, BiTemporalSample};
use crate::error::{Result, ScdError};
use crate::graph::{Graph, Mode};
use crate::losses::{scd_loss, LossReport, Targets};
use crate::metrics::{compute_scores, ConfusionMatrix, ScdScores};
use crate::model::{decode_predictions, ModelConfig, ScdNet};
use crate::optim::AdamW;
use crate::params::ParamStore;

/// Spatial sizes must survive four stride-2 stages.
pub const SIZE_MULTIPLE: usize = 16;

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(ScdError::Shape(format!("image size {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: ScdScores,
    pub change_f1: f64,
    pub confusion: ConfusionMatrix,
}

/// Eval-mode forward over `samples` in batches of `batch`.
pub fn evaluate(net: &ScdNet, store: &ParamStore<f32>, samples: &[BiTemporalSample], batch: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(ScdError::Dataset("nothing to evaluate".into()));
    }
    let classes = net.config.classes;
    let mut q = ConfusionMatrix::new(classes);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&BiTemporalSample> = chunk.iter().collect();
        for s in &refs {
            s.label_t1.check_classes(classes)?;
            s.label_t2.check_classes(classes)?;
        }
        let (im1, im2) = stack_images(&refs)?;
        let (_, _, h, w) = im1.dims4();
        check_input_size(h, w)?;
        let g = Graph::inference(store);
        let (a, b) = (g.input(im1), g.input(im2));
        let preds = net.forward(&g, a, b)?;
        for (maps, s) in decode_predictions(&g, &preds, net.config.change_threshold).iter().zip(&refs) {
            q.update(maps.sem1.data(), s.label_t1.data())?;
            q.update(maps.sem2.data(), s.label_t2.data())?;
        }
    }
    Ok(Evaluation { scores: compute_scores(&q)?, change_f1: q.change_f1(), confusion: q })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossReport,
    pub val: ScdScores,
    pub val_change_f1: f64,
}

pub struct TrainOutcome {
    pub net: ScdNet,
    /// Parameters after the last epoch.
    pub store: ParamStore<f32>,
    /// Parameters of the epoch with the best validation SeK.
    pub best_store: ParamStore<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Total loss of the first batch before any update.
    pub initial_loss: f64,
    pub untrained: Evaluation,
    pub prior_checksum_before: String,
    pub prior_checksum_after: String,
    pub optimizer_params: usize,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.train.total)
    }
}

/// Train and validation samples described by the config.
pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<BiTemporalSample>, Vec<BiTemporalSample>)> {
    let classes = cfg.classes();
    let (train, val) = match &cfg.data {
        DataSource::Synthetic { spec, train_count, val_count } => {
            let train = generate_dataset(spec, *train_count)?;
            let val = generate_dataset(&spec.derived(*train_count), *val_count)?;
            (train, val)
        }
        DataSource::Directory { train, val } => {
            let t = load_dataset(train, classes)?;
            let v = match val {
                Some(v) => load_dataset(v, classes)?,
                None => t.clone(),
            };
            (t, v)
        }
    };
    if train.is_empty() {
        return Err(ScdError::Dataset("training set is empty".into()));
    }
    for s in train.iter().chain(&val) {
        let (h, w) = s.dims();
        check_input_size(h, w)?;
    }
    Ok((train, val))
}

fn build(cfg: &TrainConfig) -> Result<(ScdNet, ParamStore<f32>)> {
    let (net, mut store) = ScdNet::new::<f32>(cfg.model.clone())?;
    if let Some(path) = &cfg.prior_weights {
        match &net.encoder.prior {
            Some(prior) => prior.load_weights(&mut store, path)?,
            None => return Err(ScdError::Config("prior_weights given but use_sam_branch is off".into())),
        }
    }
    Ok((net, store))
}

/// One optimizer step on `batch`; returns the pre-update loss report.
fn train_step(net: &ScdNet, store: &mut ParamStore<f32>, opt: &mut AdamW<f32>, batch: &[&BiTemporalSample], cfg: &TrainConfig) -> Result<LossReport> {
    let targets = Targets::from_samples(batch)?;
    let (im1, im2) = stack_images(batch)?;
    let (grads, report, updates) = {
        let g = Graph::new(store, Mode::Train);
        let (a, b) = (g.input(im1), g.input(im2));
        let preds = net.forward(&g, a, b)?;
        let (loss, report) = scd_loss(&g, &preds, &targets, &cfg.loss)?;
        let grads = g.backward(loss);
        (grads, report, g.take_buffer_updates())
    };
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
    opt.step(store, &grads)?;
    Ok(report)
}

/// Full training run. `log` receives one human-readable line per event.
pub fn train_with_data(cfg: &TrainConfig, train_set: &[BiTemporalSample], val_set: &[BiTemporalSample], log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (net, mut store) = build(cfg)?;
    let mut opt = AdamW::new(&store, cfg.optimizer.clone());
    let optimizer_params = opt.param_count(&store);
    let expected = ScdNet::total_count(&store) - ScdNet::prior_count(&store);
    if optimizer_params != expected {
        return Err(ScdError::InvalidArgument(format!("optimizer sees {optimizer_params} parameters, expected {expected}")));
    }
    log(&format!("parameters: {} total, {} optimized, {} frozen prior", ScdNet::total_count(&store), optimizer_params, ScdNet::prior_count(&store)));
    let prior_checksum_before = ScdNet::prior_checksum(&store);

    let untrained = evaluate(&net, &store, val_set, cfg.batch_size)?;
    log(&format!("epoch 0 val {} change_f1 {:.6}", untrained.scores.to_json(), untrained.change_f1));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<BiTemporalSample> = chunk
                .iter()
                .map(|&i| {
                    let seed = rng.random::<u64>();
                    if cfg.augment { augment(&train_set[i], seed).0 } else { train_set[i].clone() }
                })
                .collect();
            let refs: Vec<&BiTemporalSample> = owned.iter().collect();
            let report = train_step(&net, &mut store, &mut opt, &refs, cfg)?;
            initial_loss.get_or_insert(report.total);
            reports.push(report);
        }
        let train = LossReport::mean(&reports).expect("at least one batch");
        let val = evaluate(&net, &store, val_set, cfg.batch_size)?;
        log(&format!(
            "epoch {epoch} loss {:.6} (sem {:.6} cd {:.6} bd {:.6} sim {:.6}) val {} change_f1 {:.6}",
            train.total, train.sem, train.change, train.boundary, train.similarity, val.scores.to_json(), val.change_f1
        ));
        if best.as_ref().is_none_or(|(sek, _, _)| val.scores.sek > *sek) {
            best = Some((val.scores.sek, epoch, store.clone()));
        }
        history.push(EpochLog { epoch, train, val: val.scores, val_change_f1: val.change_f1 });
    }
    let (_, best_epoch, best_store) = best.expect("epochs > 0");
    let prior_checksum_after = ScdNet::prior_checksum(&store);
    Ok(TrainOutcome {
        net,
        store,
        best_store,
        best_epoch,
        history,
        initial_loss: initial_loss.expect("non-empty training set"),
        untrained,
        prior_checksum_before,
        prior_checksum_after,
        optimizer_params,
    })
}

pub fn train(cfg: &TrainConfig, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, val_set) = load_data(cfg)?;
    let outcome = train_with_data(cfg, &train_set, &val_set, log)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        let best = dir.join("best.ckpt");
        save_checkpoint(&best, &outcome.best_store, cfg, outcome.best_epoch, &outcome.history)?;
        save_checkpoint(&dir.join("last.ckpt"), &outcome.store, cfg, cfg.epochs, &outcome.history)?;
        log(&format!("wrote {} (epoch {})", best.display(), outcome.best_epoch));
    }
    Ok(outcome)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, cfg: &TrainConfig, epoch: usize, history: &[EpochLog]) -> Result<()> {
    let meta = CheckpointMeta { train_config: cfg.clone(), epoch, history: history.to_vec() };
    write_archive(path, &Archive::from_store(store, serde_json::to_value(meta)?))
}

/// Rebuild the network recorded in the checkpoint and restore its values.
pub fn load_checkpoint(path: &Path) -> Result<(ScdNet, ParamStore<f32>, CheckpointMeta)> {
    let archive = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| ScdError::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let (net, mut store) = ScdNet::new::<f32>(meta.train_config.model.clone())?;
    archive.restore_into(&mut store)?;
    Ok((net, store, meta))
}

/// Flags of one ablation row: (prior branch, GSPM, BTAM).
pub const ABLATION_ROWS: [(bool, bool, bool); 4] = [(false, false, false), (true, false, false), (true, true, false), (true, true, true)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_sam_branch: bool,
    pub use_gspm: bool,
    pub use_btam: bool,
    pub miou: f64,
    pub sek: f64,
}

impl AblationRow {
    pub fn flags(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        format!("{} {} {}", mark(self.use_sam_branch), mark(self.use_gspm), mark(self.use_btam))
    }
}

pub fn ablation_model(base: &ModelConfig, (sam, gspm, btam): (bool, bool, bool)) -> ModelConfig {
    ModelConfig { use_sam_branch: sam, use_gspm: gspm, use_btam: btam, ..base.clone() }
}

/// Train and score the four flag configurations on one shared dataset
/// with identical seeds. Scores come from the best-SeK parameters.
pub fn ablate(cfg: &TrainConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let (train_set, val_set) = load_data(cfg)?;
    let mut rows = Vec::new();
    for flags in ABLATION_ROWS {
        let row_cfg = TrainConfig { model: ablation_model(&cfg.model, flags), output_dir: None, ..cfg.clone() };
        log(&format!("ablation sam={} gspm={} btam={}", flags.0, flags.1, flags.2));
        let out = train_with_data(&row_cfg, &train_set, &val_set, log)?;
        let eval = evaluate(&out.net, &out.best_store, &val_set, cfg.batch_size)?;
        rows.push(AblationRow { use_sam_branch: flags.0, use_gspm: flags.1, use_btam: flags.2, miou: eval.scores.miou, sek: eval.scores.sek });
    }
    Ok(rows)
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| flags (SAM GSPM BTAM) | miou | sek |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.4} | {:.4} |\n", r.flags(), r.miou, r.sek));
    }
    s
}

pub fn ablation_json(rows: &[AblationRow]) -> Result<String> {
    let v: Vec<_> = rows.iter().map(|r| serde_json::json!({"flags": r.flags(), "miou": r.miou, "sek": r.sek})).collect();
    Ok(serde_json::to_string_pretty(&v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneSpec;

    fn tiny() -> TrainConfig {
        let spec = SceneSpec { height: 32, width: 32, ..SceneSpec::default() };
        TrainConfig {
            data: DataSource::Synthetic { spec, train_count: 4, val_count: 2 },
            model: ModelConfig { channels_shallow: 8, channels_deep: 16, channels_msa: 8, decoder_width: 8, depths: [1, 1, 1, 1], ..ModelConfig::default() },
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn tiny_run_keeps_prior_frozen_and_logs_each_epoch() {
        let cfg = tiny();
        let mut lines = Vec::new();
        let out = train(&cfg, &mut |l| lines.push(l.to_string())).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.prior_checksum_before, out.prior_checksum_after);
        assert_eq!(out.optimizer_params, ScdNet::total_count(&out.store) - ScdNet::prior_count(&out.store));
        assert!(lines.iter().any(|l| l.starts_with("epoch 2 loss")));
        assert!(out.initial_loss.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_evaluation() {
        let cfg = tiny();
        let out = train(&TrainConfig { epochs: 1, ..cfg.clone() }, &mut |_| {}).unwrap();
        let (_, val) = load_data(&cfg).unwrap();
        let before = evaluate(&out.net, &out.store, &val, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &out.store, &cfg, 1, &out.history).unwrap();
        let (net, store, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.train_config, cfg);
        assert_eq!(meta.history, out.history);
        assert_eq!(evaluate(&net, &store, &val, 2).unwrap(), before);
    }

    #[test]
    fn size_and_class_checks() {
        assert!(check_input_size(64, 48).is_ok());
        assert!(matches!(check_input_size(60, 64), Err(ScdError::Shape(_))));
        let cfg = tiny();
        let (net, store) = ScdNet::new::<f32>(ModelConfig { classes: 3, ..cfg.model.clone() }).unwrap();
        let samples = generate_dataset(&SceneSpec { height: 32, width: 32, seed: 3, ..SceneSpec::default() }, 2).unwrap();
        assert!(matches!(evaluate(&net, &store, &samples, 2), Err(ScdError::ClassOutOfRange { .. })));
    }

    #[test]
    fn ablation_table_formatting() {
        let rows: Vec<AblationRow> = ABLATION_ROWS
            .iter()
            .map(|&(a, b, c)| AblationRow { use_sam_branch: a, use_gspm: b, use_btam: c, miou: 0.5, sek: 0.1 })
            .collect();
        let md = ablation_markdown(&rows);
        assert_eq!(md.lines().count(), 6);
        assert!(md.lines().nth(2).unwrap().starts_with("| ✗ ✗ ✗ |"));
        assert!(md.lines().nth(5).unwrap().starts_with("| ✓ ✓ ✓ |"));
        let v: serde_json::Value = serde_json::from_str(&ablation_json(&rows).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 4);
        for row in v.as_array().unwrap() {
            let keys: Vec<_> = row.as_object().unwrap().keys().cloned().collect();
            assert_eq!(keys, ["flags", "miou", "sek"]);
        }
    }
}
