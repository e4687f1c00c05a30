//! Training, checkpointing, evaluation, inference and the experiment
//! drivers behind the command-line tool.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{imageops, RgbImage};

use crate::cmm::UtilizationStats;
use crate::config::RunConfig;
use crate::data::{self, batch_indices, load_image, load_mask, scan_dataset, stack, DatasetIndex, ToySpec};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{CategoryMetrics, CategoryScores, MetricsReport};
use crate::network::{Network, TrainBatch};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::{load_weights, save_weights, ParamId};
use crate::scalar::Scalar;
use crate::scoring::{write_heatmap, write_raw_map, FusionConfig, HeatmapMeta};
use crate::synth::{augment, TexturePool};
use crate::tensor::Tensor;
use crate::Tape;

/// Seed of the synthetic anomaly for image `index` in a 1-based `epoch`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    sample_seed(seed ^ 0x5bd1_e995, epoch, usize::MAX)
}

/// Position reached by a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    /// completed epochs
    pub epoch: usize,
    /// completed optimizer steps
    pub step: u64,
}

pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const EPOCH_LOG: &str = "epoch_log.csv";

/// Writes every parameter and the optimizer state under `stem`.
pub fn save_checkpoint<T: Scalar>(
    stem: &Path,
    cfg: &RunConfig,
    net: &Network<T>,
    opt: &AdamW<T>,
    progress: Progress,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for (id, p) in net.params.iter() {
        tensors.push((p.name.clone(), (*p.value).clone()));
        if let Some(m) = opt.moments(id) {
            let shape = p.value.shape().to_vec();
            tensors.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), m.m.clone())?));
            tensors.push((format!("adam.v.{}", p.name), Tensor::new(shape, m.v.clone())?));
        }
    }
    let refs: Vec<(String, &Tensor<T>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    let mut meta = BTreeMap::new();
    meta.insert("epoch".into(), progress.epoch.into());
    meta.insert("step".into(), progress.step.into());
    meta.insert("adam_step".into(), opt.step.into());
    meta.insert("config".into(), cfg.to_toml().into());
    save_weights(stem, &refs, Some(cfg.config_hash()), meta)
}

/// Restores parameters (and optimizer state when `opt` is given) after
/// checking the configuration hash.
pub fn load_checkpoint<T: Scalar>(
    stem: &Path,
    cfg: &RunConfig,
    net: &mut Network<T>,
    opt: Option<&mut AdamW<T>>,
) -> Result<Progress> {
    let (manifest, tensors) = load_weights::<T>(stem)?;
    let expected = cfg.config_hash();
    let found = manifest.config_hash.clone().unwrap_or_default();
    if found != expected {
        return Err(Error::ConfigHashMismatch { expected, found });
    }
    let by_name: BTreeMap<&str, &Tensor<T>> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<ParamId> = net.params.ids().collect();
    for &id in &ids {
        let name = net.params.param(id).name.clone();
        let t = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::format(stem, format!("checkpoint lacks {name}")))?;
        net.params.set(id, (*t).clone())?;
    }
    let number = |key: &str| manifest.metadata.get(key).and_then(|v| v.as_u64()).unwrap_or(0);
    if let Some(opt) = opt {
        for &id in &ids {
            let name = &net.params.param(id).name;
            if let (Some(m), Some(v)) = (by_name.get(format!("adam.m.{name}").as_str()), by_name.get(format!("adam.v.{name}").as_str())) {
                opt.set_moments(
                    id,
                    Moments {
                        m: m.data().to_vec(),
                        v: v.data().to_vec(),
                    },
                );
            }
        }
        opt.step = number("adam_step");
    }
    Ok(Progress {
        epoch: number("epoch") as usize,
        step: number("step"),
    })
}

/// Builds a network from the configuration, including teacher weights.
pub fn build_network<T: Scalar>(cfg: &RunConfig) -> Result<Network<T>> {
    let mut net = Network::new(&cfg.model, &cfg.memory)?;
    if let Some(stem) = &cfg.data.teacher_weights {
        net.load_teacher(stem)?;
    }
    Ok(net)
}

pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub net: Network<T>,
    pub opt: AdamW<T>,
    pub index: DatasetIndex,
    pub progress: Progress,
    images: Vec<Tensor<T>>,
    textures: Option<TexturePool<T>>,
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean: LossReport,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let index = scan_dataset(&cfg.data.root)?;
        if index.categories.len() > cfg.model.num_classes {
            return Err(Error::Dataset(format!(
                "{} categories but the model predicts {} classes",
                index.categories.len(),
                cfg.model.num_classes
            )));
        }
        let size = cfg.model.image_size;
        let images = index
            .train
            .iter()
            .map(|e| load_image(&e.path, size))
            .collect::<Result<Vec<_>>>()?;
        let textures = match &cfg.data.texture_pool {
            Some(dir) => Some(TexturePool::from_dir(dir)?),
            None => None,
        };
        let net = build_network(&cfg)?;
        let opt = AdamW::new(
            AdamWConfig {
                lr: cfg.train.lr,
                weight_decay: cfg.train.weight_decay,
                ..AdamWConfig::default()
            },
            &net.params,
        );
        log::info!(
            "{} training images in {} categories, {} trainable parameters",
            images.len(),
            index.categories.len(),
            net.params.count(|p| p.trainable)
        );
        Ok(Self {
            cfg,
            net,
            opt,
            index,
            progress: Progress::default(),
            images,
            textures,
        })
    }

    pub fn resume(cfg: RunConfig, checkpoint: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.progress = load_checkpoint(checkpoint, &t.cfg, &mut t.net, Some(&mut t.opt))?;
        log::info!("resumed at epoch {} step {}", t.progress.epoch, t.progress.step);
        Ok(t)
    }

    /// Normalized normal/anomalous batches, masks and labels for `items`.
    pub fn make_batch(&self, items: &[usize], epoch: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Vec<usize>)> {
        let mut normal = Vec::with_capacity(items.len());
        let mut anomalous = Vec::with_capacity(items.len());
        let mut masks = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for &i in items {
            let label = self.index.train[i].label;
            let seed = sample_seed(self.cfg.seed, epoch, i);
            let s = augment(&self.images[i], label, self.textures.as_ref(), &self.cfg.train.synth, seed)?;
            normal.push(s.normal);
            anomalous.push(s.anomalous);
            masks.push(s.mask);
            labels.push(label);
        }
        let norm = &self.cfg.data.normalization;
        Ok((
            norm.apply(&stack(&normal)?),
            norm.apply(&stack(&anomalous)?),
            stack(&masks)?,
            labels,
        ))
    }

    /// One forward/backward/update on the given training items.
    pub fn step(&mut self, items: &[usize], epoch: usize) -> Result<LossReport> {
        let (normal, anomalous, masks, labels) = self.make_batch(items, epoch)?;
        let step_no = self.progress.step + 1;
        let tape = Tape::new();
        let p = self.net.params.bind(&tape);
        let batch = TrainBatch {
            normal: &normal,
            anomalous: &anomalous,
            masks: &masks,
            labels: &labels,
        };
        let out = self.net.training_losses(&p, &batch, self.cfg.train.mining_fraction)?;
        let (total, report) = out
            .terms
            .total()
            .map_err(|e| Error::NonFinite(format!("step {step_no}: {e}")))?;
        let grads = tape.backward(&total)?;
        let grads = p.collect(&grads);
        drop(p);
        self.opt
            .step(&mut self.net.params, &grads)
            .map_err(|e| Error::NonFinite(format!("step {step_no}: {e}")))?;
        self.progress.step = step_no;
        Ok(report)
    }

    /// Runs the next epoch, writing one loss-log row per step.
    pub fn run_epoch(&mut self, loss_log: &mut dyn Write) -> Result<EpochSummary> {
        let epoch = self.progress.epoch + 1;
        let lr = self.cfg.train.lr_at(epoch);
        self.opt.set_lr(lr);
        let batches = batch_indices(self.images.len(), self.cfg.train.batch_size, Some(shuffle_seed(self.cfg.seed, epoch)));
        let mut sum = LossReport::default();
        for items in &batches {
            let r = self.step(items, epoch)?;
            writeln!(loss_log, "{}", r.csv_row(self.progress.step)).map_err(|e| Error::io(Path::new(LOSS_LOG), e))?;
            sum.restoration += r.restoration;
            sum.identity += r.identity;
            sum.dist += r.dist;
            sum.rec += r.rec;
            sum.cls += r.cls;
            sum.total += r.total;
        }
        let n = batches.len().max(1) as f64;
        self.progress.epoch = epoch;
        Ok(EpochSummary {
            epoch,
            lr,
            steps: batches.len(),
            mean: LossReport {
                restoration: sum.restoration / n,
                identity: sum.identity / n,
                dist: sum.dist / n,
                rec: sum.rec / n,
                cls: sum.cls / n,
                total: sum.total / n,
            },
        })
    }

    /// Trains up to the configured epoch count, logging and checkpointing
    /// into `out` after every epoch.
    pub fn train(&mut self, out: &Path) -> Result<Vec<EpochSummary>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let fresh = self.progress.step == 0;
        let open_log = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = out.join(name);
            let file = if fresh {
                File::create(&path)
            } else {
                OpenOptions::new().append(true).create(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(w)
        };
        let mut loss_log = open_log(LOSS_LOG, LossReport::CSV_HEADER)?;
        let mut epoch_log = open_log(EPOCH_LOG, "epoch,lr,steps,restoration,identity,dist,rec,cls,total")?;
        let mut summaries = Vec::new();
        while self.progress.epoch < self.cfg.train.epochs {
            let started = Instant::now();
            let s = self.run_epoch(&mut loss_log)?;
            let m = s.mean;
            writeln!(
                epoch_log,
                "{},{},{},{},{},{},{},{},{}",
                s.epoch, s.lr, s.steps, m.restoration, m.identity, m.dist, m.rec, m.cls, m.total
            )
            .map_err(|e| Error::io(&out.join(EPOCH_LOG), e))?;
            loss_log.flush().map_err(|e| Error::io(&out.join(LOSS_LOG), e))?;
            epoch_log.flush().map_err(|e| Error::io(&out.join(EPOCH_LOG), e))?;
            save_checkpoint(&out.join(CHECKPOINT_STEM), &self.cfg, &self.net, &self.opt, self.progress)?;
            log::info!(
                "epoch {}/{} lr {:.1e} loss {:.4} (rest {:.4} id {:.4} dist {:.4} rec {:.4} cls {:.4}) {:.1}s",
                s.epoch,
                self.cfg.train.epochs,
                s.lr,
                m.total,
                m.restoration,
                m.identity,
                m.dist,
                m.rec,
                m.cls,
                started.elapsed().as_secs_f64()
            );
            summaries.push(s);
        }
        Ok(summaries)
    }
}

/// Everything an evaluation pass produces.
pub struct Evaluation {
    pub report: MetricsReport,
    pub utilization: UtilizationStats,
    /// mean accumulated restoration-identity distance on anomalous pixels
    pub rid_anomalous: f64,
    /// the same on anomaly-free pixels
    pub rid_normal: f64,
    /// (image path, image score, is anomalous)
    pub image_scores: Vec<(PathBuf, f64, bool)>,
}

impl Evaluation {
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        self.report.write_csv(&out.join("metrics.csv"))?;
        self.utilization.write_csv(&out.join("utilization.csv"))?;
        let mut scores = String::from("path,score,anomalous\n");
        for (p, s, a) in &self.image_scores {
            scores.push_str(&format!("{},{s},{}\n", p.display(), *a as u8));
        }
        let path = out.join("scores.csv");
        fs::write(&path, scores).map_err(|e| Error::io(&path, e))
    }
}

/// Scores the whole test split and computes every metric per category.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    cfg: &RunConfig,
    index: &DatasetIndex,
    fusion: &FusionConfig,
) -> Result<Evaluation> {
    let size = cfg.model.image_size;
    let mut categories = Vec::new();
    let mut utilization = UtilizationStats::new(index.categories.clone(), cfg.memory.slots);
    let (mut rid_a, mut n_a, mut rid_n, mut n_n) = (0.0, 0usize, 0.0, 0usize);
    let mut image_scores = Vec::new();
    for (label, name) in index.categories.iter().enumerate() {
        let entries: Vec<_> = index.test_of(label).collect();
        let mut cat = CategoryScores {
            name: name.clone(),
            shape: (size, size),
            ..Default::default()
        };
        for chunk in entries.chunks(cfg.train.batch_size) {
            let images = chunk
                .iter()
                .map(|e| load_image(&e.path, size))
                .collect::<Result<Vec<Tensor<T>>>>()?;
            let scored = net.score(&cfg.data.normalization.apply(&stack(&images)?), fusion)?;
            utilization.add(label, &scored.retrieval)?;
            for (e, map) in chunk.iter().zip(scored.maps) {
                let mask: Vec<bool> = match &e.mask {
                    Some(m) => load_mask::<f32>(m, size)?.data().iter().map(|&v| v > 0.0).collect(),
                    None => vec![false; size * size],
                };
                for (&r, &m) in map.ri.data().iter().zip(&mask) {
                    if m {
                        rid_a += r.f64();
                        n_a += 1;
                    } else {
                        rid_n += r.f64();
                        n_n += 1;
                    }
                }
                let score = map.score.f64();
                image_scores.push((e.path.clone(), score, e.anomalous));
                cat.image_scores.push(score);
                cat.image_labels.push(e.anomalous);
                cat.maps.push(map.map.data().iter().map(|v| v.f64() as f32).collect());
                cat.masks.push(mask);
            }
        }
        if !cat.masks.iter().flatten().any(|&m| m) {
            log::info!("{name}: no ground-truth pixels, pixel metrics skipped");
            cat.maps.clear();
            cat.masks.clear();
        }
        categories.push(CategoryMetrics::evaluate(&cat, &cfg.metrics)?);
    }
    Ok(Evaluation {
        report: MetricsReport { categories },
        utilization,
        rid_anomalous: rid_a / n_a.max(1) as f64,
        rid_normal: rid_n / n_n.max(1) as f64,
        image_scores,
    })
}

/// Fusion settings after applying the dataset default and an override.
pub fn fusion_for(cfg: &RunConfig, alpha: Option<f64>) -> FusionConfig {
    FusionConfig {
        alpha: alpha.unwrap_or(cfg.score.alpha),
        ..cfg.score
    }
}

/// Writes a heatmap PNG, JSON sidecar and optionally a raw map per image.
pub fn infer<T: Scalar>(
    net: &Network<T>,
    cfg: &RunConfig,
    images: &[PathBuf],
    out: &Path,
    fusion: &FusionConfig,
    raw: bool,
) -> Result<Vec<(PathBuf, HeatmapMeta)>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let size = cfg.model.image_size;
    let mut results = Vec::with_capacity(images.len());
    for chunk in images.chunks(cfg.train.batch_size) {
        let batch = chunk
            .iter()
            .map(|p| load_image(p, size))
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let scored = net.score(&cfg.data.normalization.apply(&stack(&batch)?), fusion)?;
        for (path, map) in chunk.iter().zip(scored.maps) {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let meta = write_heatmap(&out.join(format!("{stem}.png")), &map)?;
            if raw {
                write_raw_map(&out.join(format!("{stem}.f32")), &map.map)?;
            }
            results.push((path.clone(), meta));
        }
    }
    Ok(results)
}

/// One row of a memory-size sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub slots: usize,
    pub image_auroc: f64,
    pub pixel_aupro: f64,
}

pub const SWEEP_HEADER: &str = "N,image_mAUROC,pixel_mAUPRO";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.slots, r.image_auroc, r.pixel_aupro));
    }
    s
}

/// Trains and evaluates once per memory size, with the threshold reset to
/// `1/N` each time. Runs go to `out/N<slots>`.
pub fn sweep_memory<T: Scalar>(cfg: &RunConfig, slots: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(slots.len());
    for &n in slots {
        let mut run = cfg.clone();
        if run.memory.lambda.is_some() {
            log::warn!("sweep resets the shrinkage threshold to 1/N");
        }
        run.memory.slots = n;
        run.memory.lambda = None;
        let dir = out.join(format!("N{n}"));
        let mut trainer = Trainer::<T>::new(run.clone())?;
        trainer.train(&dir)?;
        let eval = evaluate(&trainer.net, &run, &trainer.index, &run.score)?;
        eval.write(&dir)?;
        let row = SweepRow {
            slots: n,
            image_auroc: eval.report.mean_image_auroc(),
            pixel_aupro: eval.report.mean_pixel_aupro().unwrap_or(f64::NAN),
        };
        log::info!("N={n}: image AUROC {:.4}, AUPRO {:.4}", row.image_auroc, row.pixel_aupro);
        rows.push(row);
        let path = out.join("sweep.csv");
        fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Writes `n` (normal | anomalous | mask) triptychs and the bare masks.
/// Source images come from the training split when a dataset is configured,
/// otherwise from the procedural toy families.
pub fn synth_preview(cfg: &RunConfig, n: usize, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let size = cfg.model.image_size;
    let index = if cfg.data.root.as_os_str().is_empty() {
        None
    } else {
        Some(scan_dataset(&cfg.data.root)?)
    };
    let textures = match &cfg.data.texture_pool {
        Some(dir) => Some(TexturePool::<f32>::from_dir(dir)?),
        None => None,
    };
    let toy = ToySpec {
        image_size: size,
        seed: cfg.seed,
        ..ToySpec::default()
    };
    let mut written = Vec::with_capacity(n);
    for i in 0..n {
        let seed = sample_seed(cfg.seed, 0, i);
        let (image, label): (Tensor<f32>, usize) = match &index {
            Some(idx) => {
                let e = &idx.train[i % idx.train.len()];
                (load_image(&e.path, size)?, e.label)
            }
            None => (data::toy_image(&toy, i % toy.categories, seed)?, i % toy.categories),
        };
        let s = augment(&image, label, textures.as_ref(), &cfg.train.synth, seed)?;
        let mut canvas = RgbImage::new(3 * size as u32, size as u32);
        let mask_rgb = image::DynamicImage::ImageLuma8(data::mask_to_gray(&s.mask)).to_rgb8();
        imageops::replace(&mut canvas, &data::tensor_to_rgb(&s.normal), 0, 0);
        imageops::replace(&mut canvas, &data::tensor_to_rgb(&s.anomalous), size as i64, 0);
        imageops::replace(&mut canvas, &mask_rgb, 2 * size as i64, 0);
        let path = out.join(format!("preview_{i:03}.png"));
        canvas.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        data::save_mask(&out.join(format!("preview_{i:03}_mask.png")), &s.mask)?;
        written.push(path);
    }
    Ok(written)
}
