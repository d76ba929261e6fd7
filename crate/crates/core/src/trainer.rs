//! Config-driven training and evaluation.
//!
//! A single [`ExperimentConfig`] describes teacher and student encoders, the
//! hash head, losses, augmentation, data handling, the optimizer, and the
//! ablation preset. [`train_teacher`] optimizes the contrastive + triplet
//! objective with augmentation; [`train_student`] adds the distillation term
//! against a frozen teacher checkpoint; [`evaluate`] encodes gallery and
//! query splits, quantizes, and writes retrieval metrics.
//!
//! Everything is seeded and sequential: one `(config, seed)` pair fully
//! determines checkpoints, `log.csv`, and `metrics.csv`.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mix_augment, schedule_at, AugmentConfig};
use crate::checkpoint::{load_checkpoint, model_meta, save_checkpoint, validate_model_meta, Checkpoint};
use crate::data::{
    batches, normalize_images, scan_dataset, split, DatasetManifest, InMemoryDataset, SplitSpec,
};
use crate::distill::{
    default_alignment_pairs, distill_loss, AlignmentProjections, LayerPairSpec, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::hash::{sign_quantize, HashHead, HashHeadConfig, TernaryCodes};
use crate::objectives::{
    hamming_triplet, student_total_tx, supervised_contrastive, teacher_total_tx, LossBreakdown,
    LossConfig,
};
use crate::retrieval::{
    build_index, evaluate_retrieval, save_index, write_metrics_csv, write_pr_csv, MetricsReport,
};
use crate::tensor::{Arr, BoundParams, Graph, ParamStore, SgdMomentum, Tx};
use crate::vit::{EncoderConfig, VitEncoder};

/// Ablation presets. `teacher` trains the teacher recipe; the others select
/// which loss terms and augmentation the student run enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Teacher,
    Method1,
    Method2,
    Method3,
    Method4,
    Method5,
    Full,
}

impl Preset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Preset::Teacher => "teacher",
            Preset::Method1 => "method1",
            Preset::Method2 => "method2",
            Preset::Method3 => "method3",
            Preset::Method4 => "method4",
            Preset::Method5 => "method5",
            Preset::Full => "full",
        }
    }
}

/// Loss/augmentation subset resolved from a preset for the student run.
#[derive(Debug, Clone)]
pub struct StudentRecipe {
    pub loss: LossConfig,
    pub augment_enabled: bool,
    pub uses_teacher: bool,
}

impl Preset {
    /// Resolve the student training recipe. Augmentation additionally honors
    /// the global `augment.enabled` switch, so disabling the module turns a
    /// `method3` run into a `method2`-equivalent one.
    pub fn student_recipe(&self, base: &LossConfig, augment_enabled: bool) -> Result<StudentRecipe> {
        let mut loss = base.clone();
        let aug = match self {
            Preset::Teacher => {
                return Err(Error::config(
                    "preset `teacher` trains the teacher; pick method1..method5 or full for the student",
                ))
            }
            Preset::Method1 => {
                loss.alpha_student = 0.0;
                loss.beta_student = 0.0;
                false
            }
            Preset::Method2 => {
                loss.beta_student = 0.0;
                false
            }
            Preset::Method3 => {
                loss.beta_student = 0.0;
                true
            }
            Preset::Method4 => {
                loss.gamma = 0.0;
                false
            }
            Preset::Method5 => false,
            Preset::Full => true,
        };
        Ok(StudentRecipe {
            uses_teacher: loss.beta_student != 0.0,
            augment_enabled: aug && augment_enabled,
            loss,
        })
    }
}

/// Hash head width shared by teacher and student.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodeConfig {
    pub code_bits: usize,
}

impl Default for CodeConfig {
    fn default() -> Self {
        Self { code_bits: 64 }
    }
}

/// Momentum-SGD settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Loop settings for both training phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    /// Alignment layer pairs as 1-based `[student, teacher]` indices;
    /// defaults to the last two layers of each network.
    pub alignment_pairs: Option<Vec<(usize, usize)>>,
    /// Preferred alignment window size (shrinks to small token grids).
    pub alignment_window: usize,
    /// Keep all computation sequential so reruns are bit-identical. The
    /// implementation is sequential regardless; the flag documents intent
    /// and is recorded in the config dump.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_teacher: 100,
            epochs_student: 300,
            batch_size: 128,
            alignment_pairs: None,
            alignment_window: DEFAULT_WINDOW,
            deterministic: true,
        }
    }
}

/// Dataset location and preprocessing constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Root of the class-folder dataset.
    pub root: String,
    pub train_fraction: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            train_fraction: 0.7,
            normalize_mean: [0.5; 3],
            normalize_std: [0.5; 3],
        }
    }
}

/// Which split feeds the gallery and which feeds the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

/// Retrieval evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_grid: Vec<usize>,
    /// Optional ranking cutoff for MAP; full ranking when absent.
    pub map_cutoff: Option<usize>,
    pub gallery_from: SplitRole,
    pub queries_from: SplitRole,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_grid: vec![1, 5, 10, 20, 50, 100],
            map_cutoff: None,
            gallery_from: SplitRole::Train,
            queries_from: SplitRole::Test,
        }
    }
}

/// Everything one experiment needs, loadable from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub ablation_preset: Preset,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub hash: CodeConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: "runs/default".into(),
            ablation_preset: Preset::Full,
            teacher: EncoderConfig::teacher(),
            student: EncoderConfig::student(),
            hash: CodeConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.hash.code_bits == 0 {
            return Err(Error::config("code_bits must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.teacher.image_size != self.student.image_size {
            return Err(Error::config(format!(
                "teacher and student image sizes differ ({} vs {}); both encode the same batches",
                self.teacher.image_size, self.student.image_size
            )));
        }
        if !(0.0 < self.data.train_fraction && self.data.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.data.normalize_std.iter().any(|&s| s == 0.0) {
            return Err(Error::config("normalize_std entries must be nonzero"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { train_fraction: self.data.train_fraction, seed: self.seed }
    }

    /// Resolved alignment pairs (explicit or tail default).
    pub fn alignment_pairs(&self) -> Vec<LayerPairSpec> {
        match &self.train.alignment_pairs {
            Some(pairs) => pairs
                .iter()
                .map(|&(s, t)| LayerPairSpec { student_layer: s, teacher_layer: t })
                .collect(),
            None => default_alignment_pairs(self.student.num_layers, self.teacher.num_layers),
        }
    }

    /// Mask granularity: configured override or the model patch size.
    fn mask_patch(&self, patch_size: usize) -> usize {
        self.augment.mask_patch_size.unwrap_or(patch_size)
    }

    /// Serialize the effective configuration next to run outputs.
    pub fn dump(&self, path: &Path, recipe_note: &str) -> Result<()> {
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("config serialization: {e}")))?;
        std::fs::write(path, format!("{body}\n# resolved: {recipe_note}\n"))?;
        Ok(())
    }
}

/// Per-epoch aggregated record.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub lambda: f64,
    pub p: f64,
}

/// Per-step record kept in memory for inspection.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
}

/// Append-only training history.
#[derive(Debug, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,{},lambda,p", LossBreakdown::FIELDS.join(","))?;
        for rec in &self.epochs {
            let vals: Vec<String> =
                rec.breakdown.values().iter().map(|v| format!("{v:.9}")).collect();
            writeln!(w, "{},{},{:.9},{:.9}", rec.epoch, vals.join(","), rec.lambda, rec.p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Artifacts of one training run.
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

fn zero_scalar(g: &Graph) -> Tx {
    g.constant(Arr::from_elem(ndarray::IxDyn(&[]), 0.0))
}

fn dump_diagnostic(dir: &Path, context: &str, breakdown: &LossBreakdown) -> Result<()> {
    let path = dir.join("diagnostic.txt");
    let mut text = format!("non-finite loss during {context}\n");
    for (name, value) in LossBreakdown::FIELDS.iter().zip(breakdown.values()) {
        text.push_str(&format!("{name} = {value}\n"));
    }
    std::fs::write(&path, text)?;
    Ok(())
}

fn mean_breakdown(records: &[LossBreakdown]) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let mut acc = LossBreakdown::default();
    for b in records {
        acc.contrastive += b.contrastive;
        acc.triplet += b.triplet;
        acc.high += b.high;
        acc.global += b.global;
        acc.local += b.local;
        acc.distill += b.distill;
        acc.total += b.total;
    }
    LossBreakdown {
        contrastive: acc.contrastive / n,
        triplet: acc.triplet / n,
        high: acc.high / n,
        global: acc.global / n,
        local: acc.local / n,
        distill: acc.distill / n,
        total: acc.total / n,
    }
}

fn load_train_split(cfg: &ExperimentConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    let manifest = scan_dataset(Path::new(&cfg.data.root))?;
    split(&manifest, &cfg.split_spec())
}

/// Train the teacher: contrastive + triplet with scheduled augmentation on
/// the train split. Saves `best.ckpt` (lowest epoch loss) and `final.ckpt`.
pub fn train_teacher(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = Path::new(&cfg.output_dir).join("teacher");
    std::fs::create_dir_all(&out_dir)?;

    let (train_manifest, _) = load_train_split(cfg)?;
    let dataset = InMemoryDataset::load(&train_manifest, cfg.teacher.image_size)?;

    let encoder = VitEncoder::new(cfg.teacher.clone(), "teacher")?;
    let hash_cfg = HashHeadConfig::new(cfg.teacher.hidden_dim, cfg.hash.code_bits);
    let head = HashHead::new(hash_cfg.clone(), "teacher")?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    encoder.init_params(&mut store, &mut rng);
    head.init_params(&mut store, &mut rng);

    let meta = model_meta("teacher", &cfg.teacher, &hash_cfg);
    let epochs = cfg.train.epochs_teacher;
    let recipe_note = format!("teacher recipe: contrastive + triplet, augment={}", cfg.augment.enabled);
    cfg.dump(&out_dir.join("effective_config.toml"), &recipe_note)?;

    let outcome = run_training_loop(TrainingLoop {
        cfg,
        out_dir: &out_dir,
        dataset: &dataset,
        epochs,
        augment_enabled: cfg.augment.enabled,
        mask_patch: cfg.mask_patch(cfg.teacher.patch_size),
        meta: &meta,
        store: &mut store,
        loss_cfg: cfg.loss.clone(),
        forward: &mut |g, bound, images, labels, loss_cfg| {
            let out = encoder.encode(bound, images)?;
            let h = head.forward(bound, out.final_class_token)?;
            let con = supervised_contrastive(g, h, labels, loss_cfg)?;
            let tri = if loss_cfg.alpha_teacher != 0.0 {
                hamming_triplet(
                    g,
                    h,
                    labels,
                    loss_cfg.effective_margin(cfg.hash.code_bits),
                    loss_cfg.triplet_normalization,
                )?
            } else {
                zero_scalar(g)
            };
            let total = teacher_total_tx(g, con, tri, loss_cfg);
            Ok(StepLoss {
                total,
                breakdown: LossBreakdown {
                    contrastive: g.scalar(con),
                    triplet: g.scalar(tri),
                    total: g.scalar(total),
                    ..LossBreakdown::default()
                },
            })
        },
    })?;
    Ok(outcome)
}

/// Train the student under the configured ablation preset, distilling from
/// `teacher_checkpoint` when the preset uses one.
pub fn train_student(cfg: &ExperimentConfig, teacher_checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let recipe = cfg.ablation_preset.student_recipe(&cfg.loss, cfg.augment.enabled)?;
    let out_dir = Path::new(&cfg.output_dir).join("student");
    std::fs::create_dir_all(&out_dir)?;

    let teacher_hash_cfg = HashHeadConfig::new(cfg.teacher.hidden_dim, cfg.hash.code_bits);
    let teacher_store: Option<ParamStore> = if recipe.uses_teacher {
        let path = teacher_checkpoint.ok_or_else(|| {
            Error::config(format!(
                "preset `{}` distills from a teacher; pass the teacher checkpoint",
                cfg.ablation_preset.as_str()
            ))
        })?;
        let ckpt = load_checkpoint(path)?;
        validate_model_meta(&ckpt, "teacher", &cfg.teacher, &teacher_hash_cfg)?;
        if cfg.teacher.patch_size != cfg.student.patch_size {
            return Err(Error::config(format!(
                "token grids must align for window alignment: teacher patch {} vs student patch {}",
                cfg.teacher.patch_size, cfg.student.patch_size
            )));
        }
        Some(ckpt.params)
    } else {
        None
    };

    let (train_manifest, _) = load_train_split(cfg)?;
    let dataset = InMemoryDataset::load(&train_manifest, cfg.student.image_size)?;

    let t_encoder = VitEncoder::new(cfg.teacher.clone(), "teacher")?;
    let t_head = HashHead::new(teacher_hash_cfg, "teacher")?;
    let s_encoder = VitEncoder::new(cfg.student.clone(), "student")?;
    let s_hash_cfg = HashHeadConfig::new(cfg.student.hidden_dim, cfg.hash.code_bits);
    let s_head = HashHead::new(s_hash_cfg.clone(), "student")?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    s_encoder.init_params(&mut store, &mut rng);
    s_head.init_params(&mut store, &mut rng);

    let pairs = cfg.alignment_pairs();
    let needs_alignment = recipe.uses_teacher && recipe.loss.gamma != 0.0;
    let projections = if needs_alignment {
        if pairs.is_empty() {
            return Err(Error::config("alignment needs at least one layer pair"));
        }
        for pair in &pairs {
            pair.validate(cfg.student.num_layers, cfg.teacher.num_layers)?;
        }
        let proj = AlignmentProjections::new(
            "align",
            pairs.len(),
            cfg.teacher.hidden_dim,
            cfg.student.hidden_dim,
        );
        proj.init_params(&mut store, &mut rng);
        Some(proj)
    } else {
        None
    };

    let meta = model_meta("student", &cfg.student, &s_hash_cfg);
    let recipe_note = format!(
        "student preset {}: alpha_s={}, beta_s={}, gamma={}, augment={}, teacher={}",
        cfg.ablation_preset.as_str(),
        recipe.loss.alpha_student,
        recipe.loss.beta_student,
        recipe.loss.gamma,
        recipe.augment_enabled,
        recipe.uses_teacher
    );
    cfg.dump(&out_dir.join("effective_config.toml"), &recipe_note)?;

    let window_pref = cfg.train.alignment_window;
    let loss_cfg = recipe.loss.clone();
    let outcome = run_training_loop(TrainingLoop {
        cfg,
        out_dir: &out_dir,
        dataset: &dataset,
        epochs: cfg.train.epochs_student,
        augment_enabled: recipe.augment_enabled,
        mask_patch: cfg.mask_patch(cfg.student.patch_size),
        meta: &meta,
        store: &mut store,
        loss_cfg,
        forward: &mut |g, bound, images, labels, loss_cfg| {
            let s_out = s_encoder.encode(bound, images)?;
            let h_s = s_head.forward(bound, s_out.final_class_token)?;
            let con = supervised_contrastive(g, h_s, labels, loss_cfg)?;
            let tri = if loss_cfg.alpha_student != 0.0 {
                hamming_triplet(
                    g,
                    h_s,
                    labels,
                    loss_cfg.effective_margin(cfg.hash.code_bits),
                    loss_cfg.triplet_normalization,
                )?
            } else {
                zero_scalar(g)
            };

            let mut breakdown = LossBreakdown {
                contrastive: g.scalar(con),
                triplet: g.scalar(tri),
                ..LossBreakdown::default()
            };
            let distill = match (&teacher_store, &projections) {
                (Some(t_store), proj) if loss_cfg.beta_student != 0.0 => {
                    // teacher runs as constants: no gradients flow into it
                    let t_bound = BoundParams::inference(g, t_store);
                    let t_out = t_encoder.encode(&t_bound, images)?;
                    let h_t = t_head.forward(&t_bound, t_out.final_class_token)?;
                    if loss_cfg.gamma != 0.0 {
                        let proj = proj.as_ref().expect("projections exist when gamma != 0");
                        let bound_projs: Vec<(Tx, Tx)> = (0..pairs.len())
                            .map(|m| (proj.global_proj(bound, m), proj.local_proj(bound, m)))
                            .collect();
                        let parts = distill_loss(
                            g,
                            &t_out,
                            &s_out,
                            h_t,
                            h_s,
                            &pairs,
                            &bound_projs,
                            loss_cfg.gamma,
                            window_pref,
                        )?;
                        breakdown.high = g.scalar(parts.high);
                        breakdown.global = g.scalar(parts.global);
                        breakdown.local = g.scalar(parts.local);
                        breakdown.distill = g.scalar(parts.total);
                        parts.total
                    } else {
                        let high = crate::distill::high_level_loss(g, h_t, h_s)?;
                        breakdown.high = g.scalar(high);
                        breakdown.distill = breakdown.high;
                        high
                    }
                }
                _ => zero_scalar(g),
            };
            let total = student_total_tx(g, con, tri, distill, loss_cfg);
            breakdown.total = g.scalar(total);
            Ok(StepLoss { total, breakdown })
        },
    })?;
    Ok(outcome)
}

struct StepLoss {
    total: Tx,
    breakdown: LossBreakdown,
}

type ForwardFn<'a> =
    &'a mut dyn FnMut(&Graph, &BoundParams, &ndarray::Array4<f64>, &[usize], &LossConfig) -> Result<StepLoss>;

struct TrainingLoop<'a> {
    cfg: &'a ExperimentConfig,
    out_dir: &'a Path,
    dataset: &'a InMemoryDataset,
    epochs: usize,
    augment_enabled: bool,
    mask_patch: usize,
    meta: &'a [(String, String)],
    store: &'a mut ParamStore,
    loss_cfg: LossConfig,
    forward: ForwardFn<'a>,
}

fn run_training_loop(ctx: TrainingLoop<'_>) -> Result<TrainOutcome> {
    let cfg = ctx.cfg;
    let mut opt = SgdMomentum::new(
        cfg.optimizer.learning_rate,
        cfg.optimizer.momentum,
        cfg.optimizer.weight_decay,
    );
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00C0_FFEE_D00D_F00Du64);
    let mut log = TrainingLog::default();
    let best_path = ctx.out_dir.join("best.ckpt");
    let final_path = ctx.out_dir.join("final.ckpt");
    let mut best_loss = f64::INFINITY;

    for epoch in 0..ctx.epochs {
        let (lambda, p) = if ctx.augment_enabled {
            schedule_at(epoch, ctx.epochs, &cfg.augment)
        } else {
            (0.0, 0.0)
        };
        let mut step_breakdowns = Vec::new();
        for (step, (images, labels)) in
            batches(ctx.dataset, cfg.train.batch_size, cfg.seed, epoch).enumerate()
        {
            let (mut images, labels) = if ctx.augment_enabled {
                let aug = mix_augment(
                    &images,
                    &labels,
                    lambda,
                    p,
                    ctx.mask_patch,
                    &cfg.augment.transforms,
                    &mut aug_rng,
                )?;
                (aug.images, aug.labels)
            } else {
                (images, labels)
            };
            if labels.len() < 2 {
                log::warn!("skipping batch of {} at epoch {epoch}: too small for the contrastive loss", labels.len());
                continue;
            }
            normalize_images(&mut images, cfg.data.normalize_mean, cfg.data.normalize_std);

            let g = Graph::new();
            let bound = BoundParams::trainable(&g, ctx.store);
            let step_loss = (ctx.forward)(&g, &bound, &images, &labels, &ctx.loss_cfg)?;
            if !step_loss.breakdown.is_finite() {
                dump_diagnostic(
                    ctx.out_dir,
                    &format!("epoch {epoch} step {step}"),
                    &step_loss.breakdown,
                )?;
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch} step {step}; see {}",
                    ctx.out_dir.join("diagnostic.txt").display()
                )));
            }
            let grads = g.backward(step_loss.total);
            let named = bound.named_grads(&grads);
            opt.step(ctx.store, &named);
            log.steps.push(StepRecord { epoch, step, breakdown: step_loss.breakdown });
            step_breakdowns.push(step_loss.breakdown);
        }
        if step_breakdowns.is_empty() {
            return Err(Error::Data(format!("epoch {epoch} produced no usable batches")));
        }
        let breakdown = mean_breakdown(&step_breakdowns);
        log.epochs.push(EpochRecord { epoch, breakdown, lambda, p });
        log::info!(
            "epoch {epoch}: total {:.6} (contrastive {:.6}, triplet {:.6}, distill {:.6})",
            breakdown.total,
            breakdown.contrastive,
            breakdown.triplet,
            breakdown.distill
        );
        if breakdown.total < best_loss {
            best_loss = breakdown.total;
            save_checkpoint(&best_path, ctx.meta, ctx.store)?;
        }
    }

    save_checkpoint(&final_path, ctx.meta, ctx.store)?;
    log.write_csv(&ctx.out_dir.join("log.csv"))?;
    Ok(TrainOutcome {
        first_epoch_loss: log.epochs.first().map(|e| e.breakdown.total).unwrap_or(f64::NAN),
        final_epoch_loss: log.epochs.last().map(|e| e.breakdown.total).unwrap_or(f64::NAN),
        log,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

/// A checkpoint re-instantiated as encoder + hash head + params.
pub struct LoadedModel {
    pub role: String,
    pub encoder: VitEncoder,
    pub head: HashHead,
    pub params: ParamStore,
}

/// Load a checkpoint and validate it against the experiment's teacher or
/// student config, depending on the recorded role.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<LoadedModel> {
    let ckpt: Checkpoint = load_checkpoint(path)?;
    let role = ckpt
        .meta_get("role")
        .ok_or_else(|| Error::Checkpoint("checkpoint has no role metadata".into()))?
        .to_string();
    let encoder_cfg = match role.as_str() {
        "teacher" => cfg.teacher.clone(),
        "student" => cfg.student.clone(),
        other => return Err(Error::Checkpoint(format!("unknown checkpoint role {other}"))),
    };
    let hash_cfg = HashHeadConfig::new(encoder_cfg.hidden_dim, cfg.hash.code_bits);
    validate_model_meta(&ckpt, &role, &encoder_cfg, &hash_cfg)?;
    Ok(LoadedModel {
        encoder: VitEncoder::new(encoder_cfg, role.clone())?,
        head: HashHead::new(hash_cfg, role.clone())?,
        params: ckpt.params,
        role,
    })
}

/// Encode a batch of already-normalized images to continuous hash features.
fn hash_features(model: &LoadedModel, images: &ndarray::Array4<f64>) -> Result<Arr> {
    let g = Graph::new();
    let bound = BoundParams::inference(&g, &model.params);
    let out = model.encoder.encode(&bound, images)?;
    let h = model.head.forward(&bound, out.final_class_token)?;
    Ok(g.value(h))
}

/// Encode every item of a manifest into ternary codes (no augmentation;
/// normalization only), preserving manifest order.
pub fn encode_manifest(
    cfg: &ExperimentConfig,
    model: &LoadedModel,
    manifest: &DatasetManifest,
) -> Result<(TernaryCodes, Vec<usize>, Vec<String>)> {
    if manifest.is_empty() {
        return Err(Error::Data("empty split: nothing to encode".into()));
    }
    let dataset = InMemoryDataset::load(manifest, model.encoder.config.image_size)?;
    let bits = model.head.config.code_bits;
    let mut values = Array2::<i8>::zeros((dataset.len(), bits));
    let mut row = 0usize;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(cfg.train.batch_size.max(1)) {
        let (mut images, _) = dataset.gather(chunk);
        normalize_images(&mut images, cfg.data.normalize_mean, cfg.data.normalize_std);
        let h = hash_features(model, &images)?;
        let codes = sign_quantize(&h)?;
        for i in 0..codes.len() {
            for j in 0..bits {
                values[[row, j]] = codes.values[[i, j]];
            }
            row += 1;
        }
    }
    let labels = dataset.labels.clone();
    let paths = dataset
        .manifest_indices
        .iter()
        .map(|&i| manifest.items[i].path.display().to_string())
        .collect();
    Ok((TernaryCodes { bits, values }, labels, paths))
}

/// Encode gallery and query splits from a checkpoint, build the index, and
/// write `metrics.csv`, `pr.csv`, and the gallery index files into `out_dir`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let model = load_model(cfg, checkpoint)?;

    let (train_manifest, test_manifest) = load_train_split(cfg)?;
    let pick = |role: SplitRole| match role {
        SplitRole::Train => &train_manifest,
        SplitRole::Test => &test_manifest,
    };
    let gallery_manifest = pick(cfg.eval.gallery_from);
    let query_manifest = pick(cfg.eval.queries_from);

    let (gallery_codes, gallery_labels, gallery_paths) =
        encode_manifest(cfg, &model, gallery_manifest)?;
    let ids: Vec<u64> = (0..gallery_codes.len() as u64).collect();
    let index = build_index(gallery_codes, gallery_labels, ids, gallery_paths)?;

    let (query_codes, query_labels, _) = encode_manifest(cfg, &model, query_manifest)?;

    let gallery_size = index.len();
    let k_grid: Vec<usize> = cfg.eval.k_grid.iter().copied().filter(|&k| k <= gallery_size).collect();
    let k_grid = if k_grid.is_empty() { vec![1.min(gallery_size).max(1)] } else { k_grid };

    let report =
        evaluate_retrieval(&index, &query_codes, &query_labels, &k_grid, cfg.eval.map_cutoff)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &report)?;
    write_pr_csv(&out_dir.join("pr.csv"), &report.pr)?;
    save_index(&out_dir.join("gallery"), &index)?;
    log::info!("MAP = {:.4} over {} queries against {} gallery items", report.map, query_codes.len(), gallery_size);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_recipes_match_documented_subsets() {
        let base = LossConfig::default();
        let cases = [
            (Preset::Method1, 0.0, 0.0, base.gamma, false),
            (Preset::Method2, base.alpha_student, 0.0, base.gamma, false),
            (Preset::Method3, base.alpha_student, 0.0, base.gamma, true),
            (Preset::Method4, base.alpha_student, base.beta_student, 0.0, false),
            (Preset::Method5, base.alpha_student, base.beta_student, base.gamma, false),
            (Preset::Full, base.alpha_student, base.beta_student, base.gamma, true),
        ];
        for (preset, alpha, beta, gamma, augment) in cases {
            let r = preset.student_recipe(&base, true).unwrap();
            assert_eq!(r.loss.alpha_student, alpha, "{preset:?}");
            assert_eq!(r.loss.beta_student, beta, "{preset:?}");
            assert_eq!(r.loss.gamma, gamma, "{preset:?}");
            assert_eq!(r.augment_enabled, augment, "{preset:?}");
            assert_eq!(r.uses_teacher, beta != 0.0, "{preset:?}");
        }
        assert!(Preset::Teacher.student_recipe(&base, true).is_err());
    }

    #[test]
    fn disabling_augmentation_turns_full_into_method5_recipe() {
        let base = LossConfig::default();
        let full_off = Preset::Full.student_recipe(&base, false).unwrap();
        let m5 = Preset::Method5.student_recipe(&base, true).unwrap();
        assert_eq!(full_off.augment_enabled, m5.augment_enabled);
        assert_eq!(full_off.loss.beta_student, m5.loss.beta_student);
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.teacher, cfg.teacher);
        assert_eq!(back.train.batch_size, cfg.train.batch_size);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("nonsense_key = 1").unwrap_err();
        assert!(err.to_string().contains("nonsense_key"));
    }

    #[test]
    fn mismatched_image_sizes_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.student.image_size = 112;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn alignment_pairs_default_to_tail() {
        let cfg = ExperimentConfig::default();
        let pairs = cfg.alignment_pairs();
        assert_eq!(
            pairs,
            vec![
                LayerPairSpec { student_layer: 5, teacher_layer: 11 },
                LayerPairSpec { student_layer: 6, teacher_layer: 12 }
            ]
        );
        let mut cfg2 = ExperimentConfig::default();
        cfg2.train.alignment_pairs = Some(vec![(6, 12)]);
        assert_eq!(
            cfg2.alignment_pairs(),
            vec![LayerPairSpec { student_layer: 6, teacher_layer: 12 }]
        );
    }
}
