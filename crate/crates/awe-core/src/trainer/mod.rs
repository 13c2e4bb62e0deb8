//! Training protocol: ADAM with a validation-mAP plateau schedule, per-epoch
//! logging, best-checkpoint selection, and exact resume.

pub mod checkpoint;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, CorpusSplit, NgramInventory, WordSegment};
use crate::encoders::{AcousticEncoder, BgruReadout, EncoderConfig, EncoderKind};
use crate::evalkit::{mean_average_precision, EvalError, SearchIndex, SegmentMeta};
use crate::objectives::{
    build_triplet_batch, sample_negative, triplet_loss, DetectHead, ObjectiveError, PhoneDecoder,
    SamplingStrategy, TripletConfig,
};
use crate::phonology::FeatureTable;
use crate::rng::{mix, SeededRng};
use crate::tensor::{
    clip_global_norm, AdamConfig, AdamState, Graph, Mode, NodeId, ParamStore, Tensor, TensorError,
};

pub use checkpoint::Checkpoint;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trainer: {0}")]
    Config(String),
    #[error("trainer: non-finite loss {loss} at epoch {epoch}, batch {step}")]
    NumericalAbort { epoch: usize, step: usize, loss: f64 },
    #[error("trainer: persistence: {0}")]
    Persistence(String),
    #[error("trainer: checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    PhoneDetect,
    Word2Phones,
    Siamese,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::PhoneDetect => "phone_detect",
            ObjectiveKind::Word2Phones => "word2phones",
            ObjectiveKind::Siamese => "siamese",
        }
    }
}

/// Flat run configuration; serializes to the run-config JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder_kind: EncoderKind,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_cnn_filters")]
    pub cnn_filters: Vec<usize>,
    #[serde(default = "d_cnn_widths")]
    pub cnn_widths: Vec<usize>,
    #[serde(default = "d_bgru_hidden")]
    pub bgru_hidden: usize,
    #[serde(default = "d_bgru_layers")]
    pub bgru_layers: usize,
    #[serde(default = "d_readout")]
    pub bgru_readout: BgruReadout,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    pub objective: ObjectiveKind,
    #[serde(default = "d_sampling")]
    pub sampling: SamplingStrategy,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_true")]
    pub scaled_distance: bool,
    #[serde(default = "d_ngram_orders")]
    pub ngram_orders: Vec<usize>,
    #[serde(default = "d_decoder_hidden")]
    pub decoder_hidden: usize,
    #[serde(default = "d_decoder_embed")]
    pub decoder_embed: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_plateau_factor")]
    pub plateau_factor: f64,
    #[serde(default = "d_plateau_patience")]
    pub plateau_patience: usize,
    #[serde(default = "d_min_lr")]
    pub min_lr: f64,
    #[serde(default = "d_grad_clip")]
    pub grad_clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub features: Option<String>,
    #[serde(default = "d_true")]
    pub log_timing: bool,
    #[serde(default = "d_threads")]
    pub threads: usize,
}

fn d_input_dim() -> usize {
    39
}
fn d_cnn_filters() -> Vec<usize> {
    vec![256, 512, 1024]
}
fn d_cnn_widths() -> Vec<usize> {
    vec![16, 32, 48]
}
fn d_bgru_hidden() -> usize {
    512
}
fn d_bgru_layers() -> usize {
    2
}
fn d_readout() -> BgruReadout {
    BgruReadout::LastStates
}
fn d_dropout() -> f64 {
    0.2
}
fn d_sampling() -> SamplingStrategy {
    SamplingStrategy::SemiHard
}
fn d_margin() -> f64 {
    0.4
}
fn d_true() -> bool {
    true
}
fn d_ngram_orders() -> Vec<usize> {
    vec![2, 3]
}
fn d_decoder_hidden() -> usize {
    512
}
fn d_decoder_embed() -> usize {
    256
}
fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    256
}
fn d_lr() -> f64 {
    0.001
}
fn d_plateau_factor() -> f64 {
    0.5
}
fn d_plateau_patience() -> usize {
    10
}
fn d_min_lr() -> f64 {
    1e-6
}
fn d_grad_clip() -> f64 {
    5.0
}
fn d_threads() -> usize {
    1
}

impl RunConfig {
    /// Paper-style defaults for the given encoder and objective.
    pub fn new(encoder_kind: EncoderKind, objective: ObjectiveKind, seed: u64) -> Self {
        Self {
            encoder_kind,
            input_dim: d_input_dim(),
            cnn_filters: d_cnn_filters(),
            cnn_widths: d_cnn_widths(),
            bgru_hidden: d_bgru_hidden(),
            bgru_layers: d_bgru_layers(),
            bgru_readout: d_readout(),
            dropout: d_dropout(),
            objective,
            sampling: d_sampling(),
            margin: d_margin(),
            scaled_distance: true,
            ngram_orders: d_ngram_orders(),
            decoder_hidden: d_decoder_hidden(),
            decoder_embed: d_decoder_embed(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            plateau_factor: d_plateau_factor(),
            plateau_patience: d_plateau_patience(),
            min_lr: d_min_lr(),
            grad_clip: d_grad_clip(),
            seed,
            manifest: None,
            features: None,
            log_timing: true,
            threads: d_threads(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(TrainError::Config(
                "plateau_factor must lie in (0, 1)".into(),
            ));
        }
        if self.plateau_patience < 1 {
            return Err(TrainError::Config("plateau_patience must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder_kind,
            input_dim: self.input_dim,
            cnn_filters: self.cnn_filters.clone(),
            cnn_widths: self.cnn_widths.clone(),
            bgru_hidden: self.bgru_hidden,
            bgru_layers: self.bgru_layers,
            bgru_readout: self.bgru_readout,
            dropout: self.dropout,
        }
    }

    fn is_recurrent(&self) -> bool {
        self.encoder_kind == EncoderKind::Bgru || self.objective == ObjectiveKind::Word2Phones
    }
}

/// Hash of the resolved configuration; stamped into every output.
pub fn fingerprint(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reduce-on-plateau: after `patience` consecutive epochs without strict
/// improvement the learning rate is scaled by `factor` (floored at
/// `min_lr`) and the counter resets. The counter also resets on improvement.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best: f64,
    pub counter: usize,
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            best: f64::NEG_INFINITY,
            counter: 0,
        }
    }

    /// Observe one epoch's validation metric; mutates `lr` when a plateau
    /// fires and reports whether it did.
    pub fn observe(&mut self, metric: f64, lr: &mut f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.counter = 0;
            return false;
        }
        self.counter += 1;
        if self.counter >= self.patience {
            *lr = (*lr * self.factor).max(self.min_lr);
            self.counter = 0;
            return true;
        }
        false
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_map: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Objective-specific heads living alongside the encoder in the store.
pub enum Heads {
    Detect(DetectHead),
    Decoder(PhoneDecoder),
    Triplet(TripletConfig),
}

pub struct Model {
    pub store: ParamStore<f32>,
    pub encoder: AcousticEncoder,
    pub heads: Heads,
}

fn train_vocabulary(corpus: &CorpusSplit) -> std::collections::BTreeMap<String, Vec<String>> {
    let mut vocab = std::collections::BTreeMap::new();
    for seg in &corpus.train {
        vocab
            .entry(seg.word_type.clone())
            .or_insert_with(|| seg.phones.clone());
    }
    vocab
}

/// Build a fresh model for the config. Initialization order (encoder, then
/// head) is part of the reproducibility contract.
pub fn build_model(
    config: &RunConfig,
    corpus: &CorpusSplit,
    table: &FeatureTable,
) -> Result<Model> {
    config.validate()?;
    let mut store = ParamStore::<f32>::new();
    let mut rng = SeededRng::derive(config.seed, "model-init");
    let encoder = AcousticEncoder::init(config.encoder_config(), &mut store, &mut rng)?;
    let heads = match config.objective {
        ObjectiveKind::PhoneDetect => {
            let inventory: NgramInventory =
                crate::corpus::ngram_inventory(&train_vocabulary(corpus), &config.ngram_orders)?;
            if inventory.is_empty() {
                return Err(TrainError::Config(
                    "phone n-gram inventory is empty".into(),
                ));
            }
            Heads::Detect(DetectHead::init(
                encoder.embed_dim(),
                inventory,
                &mut store,
                &mut rng,
            ))
        }
        ObjectiveKind::Word2Phones => Heads::Decoder(PhoneDecoder::init(
            encoder.embed_dim(),
            config.decoder_hidden,
            config.decoder_embed,
            table.symbols(),
            &mut store,
            &mut rng,
        )),
        ObjectiveKind::Siamese => Heads::Triplet(TripletConfig {
            margin: config.margin,
            sampling: config.sampling,
            scaled_distance: config.scaled_distance,
        }),
    };
    Ok(Model {
        store,
        encoder,
        heads,
    })
}

/// Rebuild a model from a checkpoint, overwriting freshly initialized
/// parameters with the stored values by name.
pub fn restore_model(
    ckpt: &Checkpoint,
    corpus: &CorpusSplit,
    table: &FeatureTable,
) -> Result<Model> {
    let mut model = build_model(&ckpt.config, corpus, table)?;
    copy_values(&ckpt.store, &mut model.store)?;
    Ok(model)
}

/// Rebuild only the encoder (for embedding without a corpus).
pub fn restore_encoder(ckpt: &Checkpoint) -> Result<(ParamStore<f32>, AcousticEncoder)> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = SeededRng::derive(ckpt.config.seed, "model-init");
    let encoder = AcousticEncoder::init(ckpt.config.encoder_config(), &mut store, &mut rng)?;
    copy_values(&ckpt.store, &mut store)?;
    Ok((store, encoder))
}

fn copy_values(from: &ParamStore<f32>, into: &mut ParamStore<f32>) -> Result<()> {
    for id in into.ids() {
        let name = into.name(id).to_owned();
        let src = from.id_by_name(&name).ok_or_else(|| {
            TrainError::Checkpoint(format!("checkpoint is missing tensor '{name}'"))
        })?;
        let values = from.get(src).data().to_vec();
        into.set_value(id, values)
            .map_err(|e| TrainError::Checkpoint(format!("tensor '{name}': {e}")))?;
    }
    Ok(())
}

enum StepBatch {
    Plain(Vec<usize>),
    Triplets(Vec<(usize, usize)>),
}

fn detect_targets(head: &DetectHead, seg: &WordSegment) -> Result<Vec<f32>> {
    // Lenient mode: valid/test-only n-grams simply score zero.
    Ok(head.inventory().targets(&seg.phones, false)?)
}

fn batch_loss(
    g: &mut Graph<'_, f32>,
    model: &Model,
    segments: &[WordSegment],
    batch: &StepBatch,
    step_rng: &mut SeededRng,
) -> Result<NodeId> {
    let mean_of = |g: &mut Graph<'_, f32>, losses: Vec<NodeId>| -> Result<NodeId> {
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = g.add(acc, l)?;
        }
        Ok(g.mul_scalar(acc, 1.0 / losses.len() as f64)?)
    };
    match (batch, &model.heads) {
        (StepBatch::Plain(indices), heads) => {
            let frame_nodes: Vec<NodeId> = indices
                .iter()
                .map(|&i| g.input(segments[i].frames.clone()))
                .collect::<std::result::Result<_, _>>()?;
            let embs = model.encoder.embed_batch_nodes(g, &frame_nodes)?;
            let mut losses = Vec::with_capacity(indices.len());
            for (&i, &emb) in indices.iter().zip(&embs) {
                let loss = match heads {
                    Heads::Detect(head) => {
                        let y = detect_targets(head, &segments[i])?;
                        head.detect_loss(g, emb, &y)?
                    }
                    Heads::Decoder(dec) => dec.word2phones_loss(g, emb, &segments[i].phones)?,
                    Heads::Triplet(_) => {
                        return Err(TrainError::Config(
                            "plain batches cannot drive the siamese objective".into(),
                        ))
                    }
                };
                losses.push(loss);
            }
            mean_of(g, losses)
        }
        (StepBatch::Triplets(pairs), Heads::Triplet(cfg)) => {
            // Embed the union of segments once; mine negatives on values.
            let mut order: Vec<usize> = Vec::new();
            let mut pos_of = std::collections::HashMap::new();
            for &(a, p) in pairs {
                for idx in [a, p] {
                    if !pos_of.contains_key(&idx) {
                        pos_of.insert(idx, order.len());
                        order.push(idx);
                    }
                }
            }
            let frame_nodes: Vec<NodeId> = order
                .iter()
                .map(|&i| g.input(segments[i].frames.clone()))
                .collect::<std::result::Result<_, _>>()?;
            let embs = model.encoder.embed_batch_nodes(g, &frame_nodes)?;
            let values: Vec<Vec<f32>> = embs.iter().map(|&e| g.value_data(e).to_vec()).collect();
            let types: Vec<&str> = order
                .iter()
                .map(|&i| segments[i].word_type.as_str())
                .collect();
            let mut losses = Vec::with_capacity(pairs.len());
            for &(a, p) in pairs {
                let (ai, pi) = (pos_of[&a], pos_of[&p]);
                let ni = sample_negative(
                    &values,
                    &types,
                    ai,
                    Some(pi),
                    cfg.sampling,
                    cfg.margin,
                    cfg.scaled_distance,
                    step_rng,
                )?;
                losses.push(triplet_loss(g, embs[ai], embs[pi], embs[ni], cfg)?);
            }
            mean_of(g, losses)
        }
        (StepBatch::Triplets(_), _) => Err(TrainError::Config(
            "triplet batches require the siamese objective".into(),
        )),
    }
}

fn validation_map(model: &Model, corpus: &CorpusSplit, threads: usize) -> Result<f64> {
    if corpus.valid.is_empty() {
        return Ok(0.0);
    }
    let frames: Vec<&Tensor<f32>> = corpus.valid.iter().map(|s| &s.frames).collect();
    let embs = model
        .encoder
        .embed_batch(&model.store, &frames, Mode::Eval, threads)?;
    let meta: Vec<SegmentMeta> = corpus
        .valid
        .iter()
        .map(|s| SegmentMeta {
            segment_id: s.segment_id.clone(),
            word_type: s.word_type.clone(),
            phones: s.phones.clone(),
        })
        .collect();
    let index = SearchIndex::build(embs, meta)?;
    Ok(mean_average_precision(&index)?.map)
}

pub struct TrainOutcome {
    /// Snapshot of the epoch with the best validation mAP.
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub fingerprint: String,
}

/// Train from scratch. When `out_dir` is given, writes `config.json`,
/// `fingerprint`, `train_log.jsonl`, `best.awe1` and `last.awe1`.
pub fn train(
    config: &RunConfig,
    corpus: &CorpusSplit,
    table: &FeatureTable,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = build_model(config, corpus, table)?;
    let adam = AdamState::new();
    let schedule = PlateauSchedule::new(
        config.plateau_factor,
        config.plateau_patience,
        config.min_lr,
    );
    run_epochs(
        config.clone(),
        model,
        adam,
        schedule,
        config.lr,
        1,
        None,
        Vec::new(),
        corpus,
        out_dir,
    )
}

/// Continue a run from a `last.awe1`-style checkpoint. The subsequent
/// trajectory is bit-identical to the uninterrupted run in single-threaded
/// mode.
pub fn resume(
    ckpt: &Checkpoint,
    corpus: &CorpusSplit,
    table: &FeatureTable,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = restore_model(ckpt, corpus, table)?;
    let adam = AdamState::restore(&model.store, ckpt.adam_step, ckpt.adam_moments.clone())?;
    let mut schedule = PlateauSchedule::new(
        ckpt.config.plateau_factor,
        ckpt.config.plateau_patience,
        ckpt.config.min_lr,
    );
    schedule.best = ckpt.plateau_best;
    schedule.counter = ckpt.plateau_counter;
    let best = if ckpt.best_epoch == ckpt.epoch {
        Some(ckpt.clone())
    } else {
        // The best snapshot lives in best.awe1; carry forward the score so
        // later epochs only replace it on strict improvement.
        None
    };
    run_epochs(
        ckpt.config.clone(),
        model,
        adam,
        schedule,
        ckpt.lr,
        ckpt.epoch + 1,
        best.or(Some(ckpt.clone())),
        Vec::new(),
        corpus,
        out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    config: RunConfig,
    mut model: Model,
    mut adam: AdamState<f32>,
    mut schedule: PlateauSchedule,
    mut lr: f64,
    start_epoch: usize,
    mut best: Option<Checkpoint>,
    mut log: Vec<EpochRecord>,
    corpus: &CorpusSplit,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let fp = fingerprint(&config);
    if corpus.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if config.objective == ObjectiveKind::Siamese {
        // Fail fast on degenerate corpora instead of inside the first step.
        let mut probe_rng = SeededRng::new(0);
        build_triplet_batch(&corpus.train, 2.max(config.batch_size.min(4)), &mut probe_rng)?;
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| TrainError::Persistence(format!("{}: {e}", dir.display())))?;
            std::fs::write(
                dir.join("config.json"),
                serde_json::to_string_pretty(&config)
                    .map_err(|e| TrainError::Persistence(e.to_string()))?
                    + "\n",
            )
            .map_err(|e| TrainError::Persistence(e.to_string()))?;
            std::fs::write(dir.join("fingerprint"), format!("{fp}\n"))
                .map_err(|e| TrainError::Persistence(e.to_string()))?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.jsonl"))
                .map_err(|e| TrainError::Persistence(e.to_string()))?;
            Some(file)
        }
        None => None,
    };

    let adam_cfg = AdamConfig::default();
    let n_train = corpus.train.len();
    let steps_per_epoch = n_train.div_ceil(config.batch_size).max(1);

    for epoch in start_epoch..=config.epochs {
        let epoch_start = std::time::Instant::now();
        let mut epoch_rng = SeededRng::new(mix(config.seed, epoch as u64));
        let mut losses = Vec::with_capacity(steps_per_epoch);

        // Plan the epoch's batches.
        let batches: Vec<StepBatch> = match config.objective {
            ObjectiveKind::Siamese => (0..steps_per_epoch)
                .map(|_| {
                    build_triplet_batch(&corpus.train, config.batch_size, &mut epoch_rng)
                        .map(StepBatch::Triplets)
                })
                .collect::<std::result::Result<_, _>>()?,
            _ => {
                let mut order: Vec<usize> = (0..n_train).collect();
                epoch_rng.shuffle(&mut order);
                order
                    .chunks(config.batch_size)
                    .map(|c| StepBatch::Plain(c.to_vec()))
                    .collect()
            }
        };

        for (step, batch) in batches.iter().enumerate() {
            model.store.zero_grads();
            let dropout_seed = mix(mix(config.seed, epoch as u64), 0x5eed ^ step as u64);
            let mut step_rng = SeededRng::new(mix(dropout_seed, 0x7a11));
            let mut g = Graph::with_dropout_seed(&model.store, Mode::Train, dropout_seed);
            let loss_node = batch_loss(&mut g, &model, &corpus.train, batch, &mut step_rng)?;
            let loss = g.value_data(loss_node)[0] as f64;
            if !loss.is_finite() {
                return Err(TrainError::NumericalAbort { epoch, step, loss });
            }
            g.backward(loss_node)?;
            let state_updates = g.take_state_updates();
            let grads = g.take_param_grads();
            drop(g);
            for (id, value) in state_updates {
                model.store.set_value(id, value)?;
            }
            model.store.accumulate_grads(grads)?;
            if config.is_recurrent() && config.grad_clip > 0.0 {
                if let Some(norm) = clip_global_norm(&mut model.store, config.grad_clip) {
                    eprintln!(
                        "trainer: epoch {epoch} step {step}: gradient norm {norm:.3} clipped to {}",
                        config.grad_clip
                    );
                }
            }
            adam.step(&mut model.store, lr, &adam_cfg)?;
            losses.push(loss);
        }

        let val_map = validation_map(&model, corpus, config.threads)?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let seconds = if config.log_timing {
            epoch_start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let record = EpochRecord {
            epoch,
            loss: mean_loss,
            val_map,
            lr,
            seconds,
        };
        if let Some(f) = log_file.as_mut() {
            let line =
                serde_json::to_string(&record).map_err(|e| TrainError::Persistence(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| TrainError::Persistence(e.to_string()))?;
        }
        log.push(record);

        let improved = best
            .as_ref()
            .map_or(true, |b| val_map > b.best_val_map);
        // Snapshot trainer state for this epoch (before plateau observation
        // of the NEXT epoch; the schedule observes below).
        let reduced = schedule.observe(val_map, &mut lr);
        if reduced {
            eprintln!(
                "trainer: epoch {epoch}: validation mAP plateaued; lr reduced to {lr}"
            );
        }
        let snapshot = |best_val_map: f64, best_epoch: usize| Checkpoint {
            config: config.clone(),
            epoch,
            val_map,
            store: model.store.clone(),
            adam_step: adam.step_count(),
            adam_moments: adam
                .export(&model.store)
                .into_iter()
                .collect(),
            lr,
            plateau_best: schedule.best,
            plateau_counter: schedule.counter,
            best_val_map,
            best_epoch,
        };
        if improved {
            let b = snapshot(val_map, epoch);
            if let Some(dir) = out_dir {
                b.save(&dir.join("best.awe1"))?;
            }
            best = Some(b);
        }
        let (bv, be) = best
            .as_ref()
            .map(|b| (b.best_val_map, b.best_epoch))
            .unwrap_or((val_map, epoch));
        if let Some(dir) = out_dir {
            snapshot(bv, be).save(&dir.join("last.awe1"))?;
        }
    }

    let best = best.ok_or_else(|| TrainError::Config("no epochs were run".into()))?;
    Ok(TrainOutcome {
        best,
        log,
        fingerprint: fp,
    })
}

/// The eight-run grid of Table-3 shape: both encoders crossed with the three
/// objectives, the siamese one under both negative-sampling strategies.
pub fn experiment_matrix(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::with_capacity(8);
    for &(kind, kname) in &[(EncoderKind::Cnn, "cnn"), (EncoderKind::Bgru, "bgru")] {
        for &(objective, sampling, oname) in &[
            (ObjectiveKind::PhoneDetect, SamplingStrategy::SemiHard, "phone_detect"),
            (ObjectiveKind::Word2Phones, SamplingStrategy::SemiHard, "word2phones"),
            (ObjectiveKind::Siamese, SamplingStrategy::Random, "siamese_rand"),
            (ObjectiveKind::Siamese, SamplingStrategy::SemiHard, "siamese_hard"),
        ] {
            let mut cfg = base.clone();
            cfg.encoder_kind = kind;
            cfg.objective = objective;
            cfg.sampling = sampling;
            out.push((format!("{kname}_{oname}"), cfg));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_reduces_at_epoch_eleven_of_flat_sequence() {
        let mut schedule = PlateauSchedule::new(0.5, 10, 1e-6);
        let mut lr = 0.001;
        let mut lrs = Vec::new();
        // Epoch 1 improves; epochs 2..=12 are flat.
        schedule.observe(0.5, &mut lr);
        lrs.push(lr);
        for _ in 0..11 {
            schedule.observe(0.5, &mut lr);
            lrs.push(lr);
        }
        // Counter hits 10 at flat epoch 10 (global epoch 11): the reduction
        // appears at plateau epoch 11's record.
        assert_eq!(lrs[9], 0.001);
        assert!((lrs[10] - 0.0005).abs() < 1e-12);
        // Counter reset: no second reduction yet.
        assert!((lrs[11] - 0.0005).abs() < 1e-12);
    }

    #[test]
    fn plateau_resets_on_improvement() {
        let mut schedule = PlateauSchedule::new(0.5, 3, 1e-6);
        let mut lr = 1.0;
        schedule.observe(0.1, &mut lr);
        schedule.observe(0.1, &mut lr);
        schedule.observe(0.1, &mut lr);
        schedule.observe(0.2, &mut lr); // improvement resets the counter
        schedule.observe(0.2, &mut lr);
        schedule.observe(0.2, &mut lr);
        assert_eq!(lr, 1.0);
        schedule.observe(0.2, &mut lr); // third flat epoch since improvement
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn plateau_respects_min_lr() {
        let mut schedule = PlateauSchedule::new(0.5, 1, 1e-3);
        let mut lr = 2e-3;
        schedule.observe(1.0, &mut lr);
        for _ in 0..10 {
            schedule.observe(0.0, &mut lr);
        }
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn fingerprints_distinguish_configs_and_are_stable() {
        let a = RunConfig::new(EncoderKind::Bgru, ObjectiveKind::Siamese, 1);
        let b = RunConfig::new(EncoderKind::Cnn, ObjectiveKind::Siamese, 1);
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
    }

    #[test]
    fn experiment_matrix_has_eight_distinct_runs() {
        let base = RunConfig::new(EncoderKind::Cnn, ObjectiveKind::PhoneDetect, 7);
        let matrix = experiment_matrix(&base);
        assert_eq!(matrix.len(), 8);
        let mut fps: Vec<String> = matrix.iter().map(|(_, c)| fingerprint(c)).collect();
        fps.sort();
        fps.dedup();
        assert_eq!(fps.len(), 8);
        // Same base, same fingerprints.
        let again = experiment_matrix(&base);
        for ((_, a), (_, b)) in matrix.iter().zip(&again) {
            assert_eq!(fingerprint(a), fingerprint(b));
        }
    }

    #[test]
    fn config_roundtrips_through_json() {
        let base = RunConfig::new(EncoderKind::Bgru, ObjectiveKind::Word2Phones, 3);
        for (_, cfg) in experiment_matrix(&base) {
            let json = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(cfg, back);
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"encoder_kind":"bgru","objective":"siamese","seed":1,"bogus":2}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
