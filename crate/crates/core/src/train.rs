//! Training loop: super-batch lifecycle, validation, warm starts, the
//! two-phase grid warm-up and the memorization smoke test.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchSpec, Architecture};
use crate::checkpoint::{warm_start, Checkpoint};
use crate::data::sampler::assemble;
use crate::data::{
    draw_minibatch, grid_superbatch, rotate_tiles, sample_superbatch, ChannelRange, Dataset, Minibatch, PatchStore,
    Preprocessing, SamplerConfig, Tile,
};
use crate::error::{Error, Result};
use crate::layers::loss::{softmax_xent, IGNORE};
use crate::layers::Mode;
use crate::network::Network;
use crate::optim::{Schedule, Sgd};

/// Independent random streams, all derived from one seed.
pub struct Streams {
    pub init: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
    pub flips: ChaCha8Rng,
    pub jitter: ChaCha8Rng,
    pub rotation: ChaCha8Rng,
    pub validation: ChaCha8Rng,
    pub dropout_seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            init: stream(1),
            sampling: stream(2),
            flips: stream(3),
            jitter: stream(4),
            rotation: stream(5),
            validation: stream(6),
            dropout_seed: seed ^ 0xD50F_D50F,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub spec: ArchSpec,
    pub schedule: Schedule,
    pub minibatches_per_epoch: usize,
    pub sampler: SamplerConfig,
    /// Validation patches per epoch; 0 disables validation.
    pub val_patches: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rotate training tiles before every balanced super-batch.
    pub rotate: bool,
    /// Leading epochs drawing from the overlapping grid instead of the
    /// balanced sampler; 0 disables the grid phase.
    pub grid_epochs: u32,
    pub grid_overlap: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Epoch records are appended here as they complete.
    pub log_path: Option<PathBuf>,
    /// Record zero wall time so logs are byte-reproducible.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Defaults of the architecture: its schedule, batch size, a super-batch
    /// of `batch · 500`, 500 mini-batches per epoch and `batch · 100`
    /// validation patches.
    pub fn new(spec: ArchSpec) -> Result<Self> {
        let arch = spec.architecture()?;
        let batch = arch.batch_size();
        let mut sampler = SamplerConfig::new(batch);
        sampler.patch = spec.patch;
        Ok(TrainConfig {
            schedule: arch.default_schedule(),
            spec,
            minibatches_per_epoch: 500,
            sampler,
            val_patches: batch * 100,
            momentum: 0.9,
            weight_decay: 0.01,
            rotate: true,
            grid_epochs: 0,
            grid_overlap: 33,
            seed: 0,
            checkpoint_dir: None,
            log_path: None,
            deterministic: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.minibatches_per_epoch == 0 || self.sampler.minibatch == 0 || self.sampler.superbatch == 0 {
            return Err(Error::Config("mini-batch size, super-batch size and mini-batches per epoch must be positive".into()));
        }
        if self.sampler.patch != self.spec.patch {
            return Err(Error::Config(format!(
                "sampler patch {} differs from network patch {}",
                self.sampler.patch, self.spec.patch
            )));
        }
        if self.sampler.resample_interval == 0 {
            return Err(Error::Config("resample interval must be at least 1 epoch".into()));
        }
        if self.grid_epochs >= self.schedule.total_epochs() && self.grid_epochs > 0 {
            return Err(Error::Config("grid phase must end before the schedule does".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub phase: &'static str,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Mean L2 norm of the gradient over the epoch's mini-batches.
    pub grad_norm: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "na".into());
        format!(
            "epoch={} phase={} lr={:e} train_loss={:.6} train_acc={:.6} val_loss={} val_acc={} grad_norm={:.6} seconds={:.3}",
            self.epoch,
            self.phase,
            self.lr,
            self.train_loss,
            self.train_acc,
            opt(self.val_loss),
            opt(self.val_acc),
            self.grad_norm,
            self.seconds
        )
    }
}

/// Append-only record of a run: a header of `key=value` pairs (seeds,
/// architecture) and one line per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub header: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn header_line(&self) -> String {
        let mut s = String::from("#");
        for (k, v) in &self.header {
            let _ = write!(s, " {k}={v}");
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = self.header_line();
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.line());
            s.push('\n');
        }
        s
    }

    /// Trailing moving average of the per-epoch training loss.
    pub fn loss_moving_average(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.epochs.iter().map(|e| e.train_loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(window.max(1));
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Loss and pixel statistics of one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub valid: usize,
}

fn score(arch: &dyn Architecture, scores: &crate::tensor::Tensor<f32>, mb: &Minibatch, patch: usize) -> Result<(crate::layers::loss::XentOutput<f32>, Vec<u8>, usize)> {
    let out = scores.shape().height;
    let targets = arch.targets(&mb.labels, patch, out)?;
    let x = softmax_xent(scores, &targets)?;
    let pred = x.probs.argmax_channels();
    let correct = pred.iter().zip(&targets).filter(|(&p, &t)| t != IGNORE && p == t as usize).count();
    Ok((x, targets, correct))
}

/// Forward, backward and one optimizer step. Errors with a diagnostic when
/// the loss is not finite.
pub fn train_step(
    net: &mut Network<f32>,
    arch: &dyn Architecture,
    opt: &mut Sgd<f32>,
    mb: &Minibatch,
    patch: usize,
    lr: f64,
) -> Result<(BatchStats, f64)> {
    net.set_mode(Mode::Train);
    let scores = net.forward(&mb.x)?;
    let (x, _, correct) = score(arch, &scores, mb, patch)?;
    let loss = x.loss as f64;
    if !loss.is_finite() {
        net.clear_caches();
        return Err(Error::Numeric(format!("training loss is {loss} at learning rate {lr:e}; diverged")));
    }
    net.backward_params(&x.dscores)?;
    let grad_norm = net
        .params()
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {grad_norm}; diverged")));
    }
    opt.step(net, lr);
    net.clear_caches();
    Ok((BatchStats { loss, correct, valid: x.valid }, grad_norm))
}

/// Eval-mode loss and pixel accuracy over patches `indices` of `store`.
pub fn evaluate_patches(
    net: &mut Network<f32>,
    arch: &dyn Architecture,
    store: &PatchStore,
    indices: &[usize],
    mean: &[f32],
    batch: usize,
) -> Result<(f64, f64)> {
    net.set_mode(Mode::Eval);
    let (mut loss, mut live, mut correct, mut valid) = (0.0, 0usize, 0usize, 0usize);
    for chunk in indices.chunks(batch.max(1)) {
        let mb = assemble(store, chunk, mean);
        let scores = net.predict(&mb.x)?;
        let (x, _, c) = score(arch, &scores, &mb, store.patch)?;
        loss += x.loss as f64 * chunk.len() as f64;
        live += chunk.len();
        correct += c;
        valid += x.valid;
    }
    net.set_mode(Mode::Train);
    Ok((loss / live.max(1) as f64, correct as f64 / valid.max(1) as f64))
}

fn seconds_since(start: Instant, deterministic: bool) -> f64 {
    if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64()
    }
}

fn append_line(path: &Option<PathBuf>, line: &str, truncate: bool) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Final checkpoint of a run, with architecture, preprocessing and
/// optimizer state.
fn snapshot(cfg: &TrainConfig, net: &Network<f32>, opt: &Sgd<f32>, pre: &Preprocessing, epoch: u32) -> Checkpoint {
    let mut ck = Checkpoint::from_network(cfg.spec.tag.clone(), net);
    ck.store_spec(&cfg.spec);
    ck.store_preprocessing(pre);
    opt.store(&mut ck);
    ck.set_meta("epoch", epoch);
    ck.set_meta("seed", cfg.seed);
    ck
}

/// Trains `cfg.spec` on `ds` and returns the final checkpoint and log. A
/// warm-start checkpoint must come from an architecture this one maps from.
pub fn train(
    cfg: &TrainConfig,
    ds: &Dataset,
    height_range: Option<ChannelRange>,
    warm: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if ds.channels() != cfg.spec.in_channels || ds.classes != cfg.spec.classes {
        return Err(Error::Config(format!(
            "dataset has {} channels / {} classes, network expects {} / {}",
            ds.channels(),
            ds.classes,
            cfg.spec.in_channels,
            cfg.spec.classes
        )));
    }
    let arch = cfg.spec.architecture()?;
    let mut rngs = Streams::new(cfg.seed);
    let mut net: Network<f32> = cfg.spec.build()?;
    net.init_weights(&mut rngs.init);
    net.seed_dropout(rngs.dropout_seed);
    let mut log = TrainLog::default();
    log.header.push(("arch".into(), cfg.spec.tag.clone()));
    log.header.push(("seed".into(), cfg.seed.to_string()));
    log.header.push(("width_divisor".into(), cfg.spec.width_divisor.to_string()));
    log.header.push(("epochs".into(), cfg.schedule.total_epochs().to_string()));
    log.header.push(("minibatches_per_epoch".into(), cfg.minibatches_per_epoch.to_string()));
    log.header.push(("minibatch".into(), cfg.sampler.minibatch.to_string()));
    if let Some(ck) = warm {
        let map = arch.warm_start_map(&ck.arch);
        if map.is_empty() {
            return Err(Error::Config(format!("`{}` cannot warm-start from `{}`", cfg.spec.tag, ck.arch)));
        }
        let report = warm_start(&mut net, ck, &map);
        if report.loaded.is_empty() {
            return Err(Error::Checkpoint(format!("no tensor of the `{}` checkpoint fits this network", ck.arch)));
        }
        log.header.push(("warm_start".into(), ck.arch.clone()));
        log.header.push(("warm_loaded".into(), report.loaded.len().to_string()));
    }
    append_line(&cfg.log_path, &log.header_line(), true)?;

    let pre = Preprocessing::from_dataset(ds, height_range);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let original = Arc::new(ds.train.clone());
    let val_tiles = Arc::new(ds.val.clone());
    let val_ids: Vec<&str> = ds.val.iter().map(|t| t.id.as_str()).collect();
    let interval = cfg.sampler.resample_interval;
    let mut store: Option<PatchStore> = None;

    for epoch in 1..=cfg.schedule.total_epochs() {
        let start = Instant::now();
        let lr = cfg.schedule.lr(epoch)?;
        let grid = epoch <= cfg.grid_epochs;
        let phase = if grid { "grid" } else { "balanced" };
        let fresh = store.is_none() || epoch == cfg.grid_epochs + 1 || (!grid && (epoch - 1) % interval == 0);
        if fresh {
            store = Some(if grid {
                grid_superbatch(original.clone(), cfg.spec.patch, cfg.grid_overlap)?
            } else {
                let tiles = if cfg.rotate { Arc::new(rotate_tiles(&original, &mut rngs.rotation)) } else { original.clone() };
                sample_superbatch(tiles, ds.classes, &cfg.sampler, cfg.sampler.superbatch, &mut rngs.sampling)?
            });
        }
        let st = store.as_ref().expect("store built above");
        let (mut loss, mut correct, mut valid, mut gn) = (0.0, 0usize, 0usize, 0.0);
        for b in 0..cfg.minibatches_per_epoch {
            let mb = draw_minibatch(st, &cfg.sampler, &pre.mean, ds.height_channel, &mut rngs.sampling, &mut rngs.flips, &mut rngs.jitter)?;
            let (stats, norm) = train_step(&mut net, arch, &mut opt, &mb, cfg.spec.patch, lr)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, mini-batch {}: {m}", b + 1)),
                    other => other,
                })?;
            loss += stats.loss;
            correct += stats.correct;
            valid += stats.valid;
            gn += norm;
        }
        let n = cfg.minibatches_per_epoch as f64;

        let (val_loss, val_acc) = if cfg.val_patches > 0 && !ds.val.is_empty() {
            let mut val_cfg = cfg.sampler.clone();
            val_cfg.balanced = true;
            let vstore = sample_superbatch(val_tiles.clone(), ds.classes, &val_cfg, cfg.val_patches, &mut rngs.validation)?;
            if let Some(i) = (0..vstore.len()).find(|&i| !val_ids.contains(&vstore.tile_id(i))) {
                return Err(Error::Data(format!("validation patch {i} comes from non-validation tile `{}`", vstore.tile_id(i))));
            }
            let mut eval_net = net.clone();
            let indices: Vec<usize> = (0..vstore.len()).collect();
            let (l, a) = evaluate_patches(&mut eval_net, arch, &vstore, &indices, &pre.mean, cfg.sampler.minibatch)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };

        let rec = EpochRecord {
            epoch,
            phase,
            lr,
            train_loss: loss / n,
            train_acc: correct as f64 / valid.max(1) as f64,
            val_loss,
            val_acc,
            grad_norm: gn / n,
            seconds: seconds_since(start, cfg.deterministic),
        };
        log::info!("{}", rec.line());
        append_line(&cfg.log_path, &rec.line(), false)?;
        log.epochs.push(rec);

        let last = epoch == cfg.schedule.total_epochs();
        if let Some(dir) = &cfg.checkpoint_dir {
            if epoch % interval == 0 || last {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                snapshot(cfg, &net, &opt, &pre, epoch).save(dir.join(format!("{}-e{epoch:04}.ckpt", cfg.spec.tag)))?;
            }
        }
    }
    Ok((snapshot(cfg, &net, &opt, &pre, cfg.schedule.total_epochs()), log))
}

#[derive(Clone, Debug)]
pub struct OverfitConfig {
    pub spec: ArchSpec,
    pub patches: usize,
    /// Learning rate per epoch; its length caps the run.
    pub schedule: Schedule,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop once eval-mode pixel accuracy over all patches exceeds this.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl OverfitConfig {
    /// Memorization setting: no dropout and no weight decay.
    pub fn new(mut spec: ArchSpec) -> Self {
        spec.dropout = 0.0;
        OverfitConfig {
            spec,
            patches: 200,
            schedule: Schedule::new(vec![(1, 200, 0.01)]).expect("valid schedule"),
            batch: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            target_accuracy: 0.99,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub log: TrainLog,
    /// First epoch whose accuracy exceeded the target.
    pub reached: Option<u32>,
    pub final_accuracy: f64,
}

/// Trains on a fixed set of `cfg.patches` class-balanced patches, one pass
/// per epoch in shuffled mini-batches without augmentation, until the
/// eval-mode pixel accuracy over the set exceeds the target.
pub fn overfit_smoke(cfg: &OverfitConfig, tiles: Arc<Vec<Tile>>, classes: usize, mean: &[f32]) -> Result<OverfitReport> {
    let arch = cfg.spec.architecture()?;
    let mut rngs = Streams::new(cfg.seed);
    let mut net: Network<f32> = cfg.spec.build()?;
    net.init_weights(&mut rngs.init);
    net.seed_dropout(rngs.dropout_seed);
    let mut scfg = SamplerConfig::new(cfg.batch);
    scfg.patch = cfg.spec.patch;
    let store = sample_superbatch(tiles, classes, &scfg, cfg.patches, &mut rngs.sampling)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog { header: vec![("arch".into(), cfg.spec.tag.clone()), ("seed".into(), cfg.seed.to_string())], epochs: vec![] };
    let mut order: Vec<usize> = (0..store.len()).collect();
    let all = order.clone();
    let mut reached = None;
    let mut final_accuracy = 0.0;
    for epoch in 1..=cfg.schedule.total_epochs() {
        let start = Instant::now();
        let lr = cfg.schedule.lr(epoch)?;
        order.shuffle(&mut rngs.flips);
        let (mut loss, mut gn, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let mb = assemble(&store, chunk, mean);
            let (stats, norm) = train_step(&mut net, arch, &mut opt, &mb, store.patch, lr)?;
            loss += stats.loss;
            gn += norm;
            batches += 1;
        }
        let (_, acc) = evaluate_patches(&mut net, arch, &store, &all, mean, cfg.batch)?;
        final_accuracy = acc;
        let rec = EpochRecord {
            epoch,
            phase: "smoke",
            lr,
            train_loss: loss / batches as f64,
            train_acc: acc,
            val_loss: None,
            val_acc: None,
            grad_norm: gn / batches as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", rec.line());
        log.epochs.push(rec);
        if acc > cfg.target_accuracy {
            reached = Some(epoch);
            break;
        }
    }
    Ok(OverfitReport { log, reached, final_accuracy })
}
