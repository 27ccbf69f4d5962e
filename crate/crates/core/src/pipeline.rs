//! Experiment orchestration: the intermediate-domain branches for x4
//! super-resolution, the blur-mapping restoration study, pipeline
//! composition with scale-chain validation, and metric reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::datasets::{
    make_mapped_pairs, make_pairs, pair_salt, ImageRecord, Pair, PairedDataset,
};
use crate::degradation::{resample_bicubic, DegradationSpec, Step};
use crate::error::{Error, Result};
use crate::metrics::{mse, psnr_from_mse, ssim, SsimParams};
use crate::models::{Model, ModelConfig};
use crate::rng::{fnv1a, mix_seed, Rng};
use crate::tensor::Tensor;
use crate::trainer::{checkpoint::crc32, train, Checkpoint, TrainConfig};

/// One branch of the mapping diagram (x4 SR) or of the unknown-blur
/// restoration study.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Branch {
    /// x4 SR trained directly on the unknown inputs.
    Direct4,
    /// Same-resolution mapping, then the off-the-shelf x2 model twice.
    MappingSameOffShelf2x2,
    /// Same-resolution mapping, then the off-the-shelf x4 model.
    MappingSameOffShelf4,
    /// Same-resolution mapping, then a specialized x4 model.
    MappingSameSpecialized4,
    /// x2 mapping, then the off-the-shelf x2 model.
    Mapping2xOffShelf2,
    /// x2 mapping, then a specialized x2 model.
    Mapping2xSpecialized2,
    /// The intermediate-domain restorer applied directly to inputs
    /// degraded with `eval_blur` (matched when it equals the
    /// intermediate blur, mismatched otherwise).
    RestoreDirect { eval_blur: u32 },
    /// Map `blur_from` inputs into the `blur_to` domain, then restore.
    RestoreMapped { blur_from: u32, blur_to: u32 },
    /// Mapped inputs restored by a specialized second stage.
    RestoreMappedSpecialized { blur_from: u32, blur_to: u32 },
}

/// Canonical branch names and descriptions: the single source of truth
/// for parsing, reports and CLI help.
pub const BRANCH_HELP: &[(&str, &str)] = &[
    ("direct4", "train x4 SR directly on the unknown inputs"),
    (
        "mapping_same_offshelf2x2",
        "same-resolution mapping, then the off-the-shelf x2 model twice",
    ),
    (
        "mapping_same_offshelf4",
        "same-resolution mapping, then the off-the-shelf x4 model",
    ),
    (
        "mapping_same_specialized4",
        "same-resolution mapping, then a specialized x4 model",
    ),
    ("mapping2x_offshelf2", "x2 mapping, then the off-the-shelf x2 model"),
    ("mapping2x_specialized2", "x2 mapping, then a specialized x2 model"),
    (
        "restore_direct:<blur>",
        "intermediate-domain restorer applied to <blur>-degraded inputs",
    ),
    (
        "restore_mapped:<from>:<to>",
        "map <from>-blur inputs to the <to>-blur domain, then restore",
    ),
    (
        "restore_mapped_specialized:<from>:<to>",
        "mapped inputs restored by a specialized second stage",
    ),
];

impl Branch {
    /// The six SR branches of the mapping diagram.
    pub const SR_ALL: [Branch; 6] = [
        Branch::Direct4,
        Branch::MappingSameOffShelf2x2,
        Branch::MappingSameOffShelf4,
        Branch::MappingSameSpecialized4,
        Branch::Mapping2xOffShelf2,
        Branch::Mapping2xSpecialized2,
    ];

    pub fn is_restoration(&self) -> bool {
        matches!(
            self,
            Branch::RestoreDirect { .. }
                | Branch::RestoreMapped { .. }
                | Branch::RestoreMappedSpecialized { .. }
        )
    }

    /// Canonical parseable name.
    pub fn name(&self) -> String {
        match self {
            Branch::Direct4 => "direct4".into(),
            Branch::MappingSameOffShelf2x2 => "mapping_same_offshelf2x2".into(),
            Branch::MappingSameOffShelf4 => "mapping_same_offshelf4".into(),
            Branch::MappingSameSpecialized4 => "mapping_same_specialized4".into(),
            Branch::Mapping2xOffShelf2 => "mapping2x_offshelf2".into(),
            Branch::Mapping2xSpecialized2 => "mapping2x_specialized2".into(),
            Branch::RestoreDirect { eval_blur } => format!("restore_direct:{eval_blur}"),
            Branch::RestoreMapped { blur_from, blur_to } => {
                format!("restore_mapped:{blur_from}:{blur_to}")
            }
            Branch::RestoreMappedSpecialized { blur_from, blur_to } => {
                format!("restore_mapped_specialized:{blur_from}:{blur_to}")
            }
        }
    }

    /// Report label: SR branches use their diagram names, restoration
    /// conditions use the table convention (7x7, 7Mapped9, 7Mapped9*).
    pub fn label(&self) -> String {
        match self {
            Branch::Direct4 => "Direct4".into(),
            Branch::MappingSameOffShelf2x2 => "MappingSame_OffShelf2x2".into(),
            Branch::MappingSameOffShelf4 => "MappingSame_OffShelf4".into(),
            Branch::MappingSameSpecialized4 => "MappingSame_Specialized4".into(),
            Branch::Mapping2xOffShelf2 => "Mapping2x_OffShelf2".into(),
            Branch::Mapping2xSpecialized2 => "Mapping2x_Specialized2".into(),
            Branch::RestoreDirect { eval_blur } => format!("{eval_blur}x{eval_blur}"),
            Branch::RestoreMapped { blur_from, blur_to } => {
                format!("{blur_from}Mapped{blur_to}")
            }
            Branch::RestoreMappedSpecialized { blur_from, blur_to } => {
                format!("{blur_from}Mapped{blur_to}*")
            }
        }
    }

    pub fn parse(s: &str) -> Result<Branch> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || {
            Error::Config(format!(
                "unknown branch '{s}'; valid: {}",
                BRANCH_HELP
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        };
        let num = |i: usize| -> Result<u32> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(bad)
        };
        match parts[0] {
            "direct4" => Ok(Branch::Direct4),
            "mapping_same_offshelf2x2" => Ok(Branch::MappingSameOffShelf2x2),
            "mapping_same_offshelf4" => Ok(Branch::MappingSameOffShelf4),
            "mapping_same_specialized4" => Ok(Branch::MappingSameSpecialized4),
            "mapping2x_offshelf2" => Ok(Branch::Mapping2xOffShelf2),
            "mapping2x_specialized2" => Ok(Branch::Mapping2xSpecialized2),
            "restore_direct" if parts.len() == 2 => Ok(Branch::RestoreDirect {
                eval_blur: num(1)?,
            }),
            "restore_mapped" if parts.len() == 3 => Ok(Branch::RestoreMapped {
                blur_from: num(1)?,
                blur_to: num(2)?,
            }),
            "restore_mapped_specialized" if parts.len() == 3 => {
                Ok(Branch::RestoreMappedSpecialized {
                    blur_from: num(1)?,
                    blur_to: num(2)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// A validated chain of inference stages.
pub struct ComposedPipeline {
    stages: Vec<Model<f32>>,
    task_scale: usize,
}

/// Validate the scale chain at build time: the product of stage scales
/// must equal the task scale.
pub fn compose(stages: Vec<Model<f32>>, task_scale: usize) -> Result<ComposedPipeline> {
    if stages.is_empty() {
        return Err(Error::Config("pipeline needs at least one stage".into()));
    }
    let net: usize = stages.iter().map(|m| m.scale()).product();
    if net != task_scale {
        let chain: Vec<String> = stages.iter().map(|m| format!("x{}", m.scale())).collect();
        return Err(Error::Config(format!(
            "scale chain [{}] multiplies to x{net}, task needs x{task_scale}",
            chain.join(", ")
        )));
    }
    Ok(ComposedPipeline { stages, task_scale })
}

impl ComposedPipeline {
    pub fn task_scale(&self) -> usize {
        self.task_scale
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Run all stages; every intermediate is clipped to [0,1] by infer.
    pub fn apply(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut current = input.clone();
        for stage in &self.stages {
            current = stage.infer(&current)?;
        }
        Ok(current)
    }
}

/// Per-image metric row.
#[derive(Clone, Debug)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Evaluation report for one (branch, test set) pair. `runtime_secs` is
/// informational only and is deliberately excluded from the CSV and
/// markdown serializations so reruns produce identical bytes.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub branch: String,
    pub eval_set: String,
    pub rows: Vec<ImageMetrics>,
    /// Mean of the per-image dB values.
    pub mean_psnr_db: f64,
    /// PSNR of the MSE pooled over every pixel of the set.
    pub pooled_psnr_db: f64,
    pub mean_ssim: f64,
    pub config_digest: String,
    pub runtime_secs: f64,
}

impl MetricsReport {
    /// One row per image: `image_id,psnr_db,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,psnr_db,ssim\n");
        for row in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", row.id, row.psnr_db, row.ssim);
        }
        out
    }
}

/// Evaluate a composed pipeline against ground-truth targets.
pub fn evaluate_pipeline(
    pipeline: &ComposedPipeline,
    eval: &PairedDataset,
    branch: &str,
    eval_set: &str,
    config_digest: &str,
) -> Result<MetricsReport> {
    let started = Instant::now();
    let mut rows = Vec::with_capacity(eval.len());
    let mut sq_err = 0.0f64;
    let mut n_elems = 0usize;
    let mut ssim_sum = 0.0f64;
    for pair in &eval.pairs {
        let output = pipeline.apply(&pair.input.pixels)?;
        let target = &pair.target.pixels;
        let e = mse(&output, target)?;
        let s = ssim(&output, target, &SsimParams::default())?;
        sq_err += e * output.numel() as f64;
        n_elems += output.numel();
        ssim_sum += s;
        rows.push(ImageMetrics {
            id: pair.input.id.clone(),
            psnr_db: psnr_from_mse(e, 1.0),
            ssim: s,
        });
    }
    let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
    Ok(MetricsReport {
        branch: branch.to_string(),
        eval_set: eval_set.to_string(),
        rows,
        mean_psnr_db,
        pooled_psnr_db: psnr_from_mse(sq_err / n_elems as f64, 1.0),
        mean_ssim: ssim_sum / eval.len() as f64,
        config_digest: config_digest.to_string(),
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Branch-per-row summary (the SR diagram layout).
pub fn markdown_branch_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str("| branch | eval set | PSNR (dB, mean) | PSNR (dB, pooled) | SSIM |\n");
    out.push_str("|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {:.3} | {:.4} |",
            r.branch, r.eval_set, r.mean_psnr_db, r.pooled_psnr_db, r.mean_ssim
        );
    }
    out
}

/// Condition-per-column summary (the restoration table layout).
pub fn markdown_metric_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    out.push_str("| metric |");
    for r in reports {
        let _ = write!(out, " {} |", r.branch);
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(reports.len()));
    out.push('\n');
    out.push_str("| PSNR(dB) |");
    for r in reports {
        let _ = write!(out, " {:.3} |", r.mean_psnr_db);
    }
    out.push_str("\n| SSIM |");
    for r in reports {
        let _ = write!(out, " {:.4} |", r.mean_ssim);
    }
    out.push('\n');
    out
}

/// The hidden "unknown" degradation for a synthetic corpus: a blur whose
/// width, plus a mild noise level, are drawn from the corpus seed. The
/// trained models never see these parameters.
pub fn unknown_spec(scale: u32, seed: u64) -> DegradationSpec {
    let mut rng = Rng::seed_from(mix_seed(seed, 0xD06_F00D));
    DegradationSpec {
        steps: vec![
            Step::Blur {
                size: 7,
                sigma: rng.uniform(1.1, 1.9),
            },
            Step::BicubicDown(scale),
            Step::Noise {
                target_psnr_db: rng.uniform(42.0, 48.0),
                seed: rng.next_u64(),
            },
        ],
    }
}

/// Train an SR model on (bicubic-down(scale) GT -> GT) pairs.
pub fn train_offshelf(
    scale: usize,
    gt: &[ImageRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<crate::trainer::TrainRun> {
    let data = make_pairs(gt, &DegradationSpec::bicubic_down(scale as u32), scale)?;
    let model = Model::build(&model_cfg.clone().with_scale(scale), mix_seed(train_cfg.seed, 1))?;
    train(model, &data, &cap_patch(train_cfg, &data))
}

/// Train a domain-mapping model from `from_spec` images to `to_spec`
/// images (scale 1 for same-resolution mapping, scale 2 for the x2
/// mapping).
pub fn train_mapping(
    from_spec: &DegradationSpec,
    to_spec: &DegradationSpec,
    gt: &[ImageRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<crate::trainer::TrainRun> {
    let data = make_mapped_pairs(gt, from_spec, to_spec)?;
    let model = Model::build(
        &model_cfg.clone().with_scale(data.scale),
        mix_seed(train_cfg.seed, 1),
    )?;
    train(model, &data, &cap_patch(train_cfg, &data))
}

/// Regenerate stage-1 outputs and train a second-stage model on
/// (stage1(from_spec(gt)) -> gt) pairs. `stage1` is borrowed immutably:
/// its parameters cannot change.
pub fn train_specialized(
    stage1: &Model<f32>,
    gt: &[ImageRecord],
    from_spec: &DegradationSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<crate::trainer::TrainRun> {
    let data = make_specialized_pairs(stage1, gt, from_spec)?;
    let model = Model::build(
        &model_cfg.clone().with_scale(data.scale),
        mix_seed(train_cfg.seed, 1),
    )?;
    train(model, &data, &cap_patch(train_cfg, &data))
}

/// inputs = stage1(from_spec(gt)), regenerated (never cached), clipped
/// to [0,1] by inference; targets = gt.
pub fn make_specialized_pairs(
    stage1: &Model<f32>,
    gt: &[ImageRecord],
    from_spec: &DegradationSpec,
) -> Result<PairedDataset> {
    if gt.is_empty() {
        return Err(Error::Dataset("empty ground-truth corpus".into()));
    }
    let mut pairs = Vec::with_capacity(gt.len());
    let mut scale = None;
    for rec in gt {
        let degraded = from_spec.apply_salted(&rec.pixels, pair_salt(&rec.id, 0))?;
        let mapped = stage1.infer(&degraded)?;
        let (ms, ts) = (mapped.shape(), rec.pixels.shape());
        if ts.h % ms.h != 0 || ts.w % ms.w != 0 || ts.h / ms.h != ts.w / ms.w {
            return Err(Error::Dataset(format!(
                "stage-1 output {}x{} does not evenly divide GT {}x{}",
                ms.h, ms.w, ts.h, ts.w
            )));
        }
        let this_scale = ts.h / ms.h;
        if *scale.get_or_insert(this_scale) != this_scale {
            return Err(Error::Dataset("inconsistent stage-1 scales across corpus".into()));
        }
        pairs.push(Pair {
            input: ImageRecord {
                id: rec.id.clone(),
                pixels: mapped,
                provenance: rec.provenance.clone(),
            },
            target: rec.clone(),
        });
    }
    let ds = PairedDataset {
        pairs,
        scale: scale.unwrap(),
        input_domain: format!("{}>mapped", from_spec.label()),
        target_domain: "GT".into(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Shrink the patch so every stage fits its input grid (the configured
/// patch is an upper bound; tiny downsampled inputs need smaller crops).
fn cap_patch(cfg: &TrainConfig, data: &PairedDataset) -> TrainConfig {
    let min_side = data
        .pairs
        .iter()
        .map(|p| p.input.pixels.shape().h.min(p.input.pixels.shape().w))
        .min()
        .unwrap_or(cfg.patch_size);
    let mut out = cfg.clone();
    out.patch_size = cfg.patch_size.min(min_side);
    out
}

/// A corpus with its hidden degradation.
pub struct Corpus {
    pub name: String,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub unknown: DegradationSpec,
}

/// Everything the experiment runner needs.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub branches: Vec<Branch>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Noise level for the restoration degradations.
    pub restore_noise_db: f64,
    /// Intermediate blur domain for restoration (the paper's 9x9).
    pub restore_blur_to: u32,
}

impl ExperimentConfig {
    pub fn desk(branches: Vec<Branch>, iters: u64, seed: u64) -> Self {
        ExperimentConfig {
            branches,
            model: ModelConfig::desk(1),
            train: TrainConfig::desk(iters),
            seed,
            restore_noise_db: 40.0,
            restore_blur_to: 9,
        }
    }

    pub fn digest(&self) -> String {
        let repr = format!("{:?}", (&self.branches, &self.model, &self.train, self.seed));
        format!("{:08x}", crc32(repr.as_bytes()))
    }
}

/// Trained models shared across branches, keyed by stage name.
#[derive(Default)]
pub struct ModelRegistry {
    entries: Vec<(String, Model<f32>, Checkpoint)>,
}

impl ModelRegistry {
    pub fn get(&self, key: &str) -> Option<&Model<f32>> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, m, _)| m)
    }

    pub fn insert(&mut self, key: String, model: Model<f32>, checkpoint: Checkpoint) {
        self.entries.push((key, model, checkpoint));
    }

    pub fn keys(&self) -> Vec<&str> {
        self.entries.iter().map(|(k, _, _)| k.as_str()).collect()
    }

    /// Persist as a directory of checkpoint files plus a manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (key, _, ck) in &self.entries {
            let file = format!("{key}.ckpt");
            ck.save(&dir.join(&file))?;
            let _ = writeln!(manifest, "{key}\t{file}\t{:08x}", ck.digest());
        }
        std::fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(())
    }
}

/// Orchestrates stage training and branch evaluation over one corpus.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub registry: ModelRegistry,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Self {
        Experiment {
            config,
            registry: ModelRegistry::default(),
        }
    }

    /// Stage-specific train config: an independent deterministic seed
    /// per stage name.
    fn stage_cfg(&self, key: &str) -> TrainConfig {
        self.config
            .train
            .clone()
            .with_seed(mix_seed(self.config.seed, fnv1a(key.as_bytes())))
    }

    fn get_or_train(
        &mut self,
        key: &str,
        build: impl FnOnce(&mut Self) -> Result<crate::trainer::TrainRun>,
    ) -> Result<Model<f32>> {
        if let Some(m) = self.registry.get(key) {
            return Ok(m.clone());
        }
        eprintln!("[experiment] training stage '{key}'");
        let run = build(self)?;
        let model = run.model.clone();
        self.registry.insert(key.to_string(), run.model, run.checkpoint);
        Ok(model)
    }

    pub fn offshelf(&mut self, scale: usize, corpus: &Corpus) -> Result<Model<f32>> {
        let key = format!("offshelf_x{scale}");
        let cfg = self.stage_cfg(&key);
        let model_cfg = self.config.model.clone();
        self.get_or_train(&key, |_| {
            train_offshelf(scale, &corpus.train, &model_cfg, &cfg)
        })
    }

    pub fn mapping_same(&mut self, corpus: &Corpus) -> Result<Model<f32>> {
        let key = "mapping_same";
        let cfg = self.stage_cfg(key);
        let model_cfg = self.config.model.clone();
        let to = DegradationSpec::bicubic_down(4);
        self.get_or_train(key, |_| {
            train_mapping(&corpus.unknown, &to, &corpus.train, &model_cfg, &cfg)
        })
    }

    pub fn mapping_2x(&mut self, corpus: &Corpus) -> Result<Model<f32>> {
        let key = "mapping_2x";
        let cfg = self.stage_cfg(key);
        let model_cfg = self.config.model.clone();
        let to = DegradationSpec::bicubic_down(2);
        self.get_or_train(key, |_| {
            train_mapping(&corpus.unknown, &to, &corpus.train, &model_cfg, &cfg)
        })
    }

    pub fn direct4(&mut self, corpus: &Corpus) -> Result<Model<f32>> {
        let key = "direct4";
        let cfg = self.stage_cfg(key);
        let model_cfg = self.config.model.clone();
        self.get_or_train(key, |_| {
            let data = make_pairs(&corpus.train, &corpus.unknown, 4)?;
            let model = Model::build(
                &model_cfg.clone().with_scale(4),
                mix_seed(cfg.seed, 1),
            )?;
            train(model, &data, &cap_patch(&cfg, &data))
        })
    }

    /// Build (training any missing stages) the composed pipeline for an
    /// SR branch.
    pub fn sr_pipeline(&mut self, branch: Branch, corpus: &Corpus) -> Result<ComposedPipeline> {
        let stages: Vec<Model<f32>> = match branch {
            Branch::Direct4 => vec![self.direct4(corpus)?],
            Branch::MappingSameOffShelf2x2 => {
                let map = self.mapping_same(corpus)?;
                let x2 = self.offshelf(2, corpus)?;
                vec![map, x2.clone(), x2]
            }
            Branch::MappingSameOffShelf4 => {
                vec![self.mapping_same(corpus)?, self.offshelf(4, corpus)?]
            }
            Branch::MappingSameSpecialized4 => {
                let map = self.mapping_same(corpus)?;
                let key = "specialized4_after_mapping_same";
                let cfg = self.stage_cfg(key);
                let model_cfg = self.config.model.clone();
                let map_for_train = map.clone();
                let spec4 = self.get_or_train(key, |_| {
                    train_specialized(&map_for_train, &corpus.train, &corpus.unknown, &model_cfg, &cfg)
                })?;
                vec![map, spec4]
            }
            Branch::Mapping2xOffShelf2 => {
                vec![self.mapping_2x(corpus)?, self.offshelf(2, corpus)?]
            }
            Branch::Mapping2xSpecialized2 => {
                let map = self.mapping_2x(corpus)?;
                let key = "specialized2_after_mapping_2x";
                let cfg = self.stage_cfg(key);
                let model_cfg = self.config.model.clone();
                let map_for_train = map.clone();
                let spec2 = self.get_or_train(key, |_| {
                    train_specialized(&map_for_train, &corpus.train, &corpus.unknown, &model_cfg, &cfg)
                })?;
                vec![map, spec2]
            }
            other => {
                return Err(Error::Config(format!(
                    "{} is not an SR branch",
                    other.name()
                )))
            }
        };
        compose(stages, 4)
    }

    /// Evaluate an SR branch on a corpus's held-out images.
    pub fn evaluate_sr(
        &mut self,
        branch: Branch,
        train_corpus: &Corpus,
        eval_corpus: &Corpus,
    ) -> Result<MetricsReport> {
        let pipeline = self.sr_pipeline(branch, train_corpus)?;
        let eval = make_pairs(&eval_corpus.test, &eval_corpus.unknown, 4)?;
        evaluate_pipeline(
            &pipeline,
            &eval,
            &branch.label(),
            &eval_corpus.name,
            &self.config.digest(),
        )
    }

    /// Plain bicubic x4 upsampling baseline on a corpus's held-out set.
    pub fn bicubic_baseline(&self, eval_corpus: &Corpus) -> Result<MetricsReport> {
        let started = Instant::now();
        let eval = make_pairs(&eval_corpus.test, &eval_corpus.unknown, 4)?;
        let mut rows = Vec::new();
        let mut sq_err = 0.0;
        let mut n_elems = 0usize;
        let mut ssim_sum = 0.0;
        for pair in &eval.pairs {
            let up = resample_bicubic(&pair.input.pixels, 4.0, false)?;
            let e = mse(&up, &pair.target.pixels)?;
            let s = ssim(&up, &pair.target.pixels, &SsimParams::default())?;
            sq_err += e * up.numel() as f64;
            n_elems += up.numel();
            ssim_sum += s;
            rows.push(ImageMetrics {
                id: pair.input.id.clone(),
                psnr_db: psnr_from_mse(e, 1.0),
                ssim: s,
            });
        }
        let mean = rows.iter().map(|r| r.psnr_db).sum::<f64>() / rows.len() as f64;
        Ok(MetricsReport {
            branch: "Bicubic4".into(),
            eval_set: eval_corpus.name.clone(),
            mean_psnr_db: mean,
            pooled_psnr_db: psnr_from_mse(sq_err / n_elems as f64, 1.0),
            mean_ssim: ssim_sum / rows.len() as f64,
            rows,
            config_digest: self.config.digest(),
            runtime_secs: started.elapsed().as_secs_f64(),
        })
    }

    fn restore_spec(&self, blur: u32) -> DegradationSpec {
        DegradationSpec::blur_noise(
            blur,
            self.config.restore_noise_db,
            mix_seed(self.config.seed, 0xB1 + blur as u64),
        )
    }

    /// The restorer trained on the intermediate blur domain.
    pub fn restorer(&mut self, corpus: &Corpus) -> Result<Model<f32>> {
        let blur_to = self.config.restore_blur_to;
        let key = format!("restorer_{blur_to}");
        let cfg = self.stage_cfg(&key);
        let model_cfg = self.config.model.clone();
        let spec = self.restore_spec(blur_to);
        self.get_or_train(&key, |_| {
            let data = make_pairs(&corpus.train, &spec, 1)?;
            let model = Model::build(
                &model_cfg.clone().with_scale(1),
                mix_seed(cfg.seed, 1),
            )?;
            train(model, &data, &cap_patch(&cfg, &data))
        })
    }

    /// Blur-domain mapping: from-blur images to to-blur images.
    pub fn blur_mapping(&mut self, from: u32, to: u32, corpus: &Corpus) -> Result<Model<f32>> {
        let key = format!("mapping_{from}to{to}");
        let cfg = self.stage_cfg(&key);
        let model_cfg = self.config.model.clone();
        let from_spec = self.restore_spec(from);
        let to_spec = self.restore_spec(to);
        self.get_or_train(&key, |_| {
            train_mapping(&from_spec, &to_spec, &corpus.train, &model_cfg, &cfg)
        })
    }

    pub fn restore_pipeline(&mut self, branch: Branch, corpus: &Corpus) -> Result<ComposedPipeline> {
        let stages = match branch {
            Branch::RestoreDirect { .. } => vec![self.restorer(corpus)?],
            Branch::RestoreMapped { blur_from, blur_to } => {
                self.check_blur_to(blur_to)?;
                vec![self.blur_mapping(blur_from, blur_to, corpus)?, self.restorer(corpus)?]
            }
            Branch::RestoreMappedSpecialized { blur_from, blur_to } => {
                self.check_blur_to(blur_to)?;
                let map = self.blur_mapping(blur_from, blur_to, corpus)?;
                let key = format!("specialized_{blur_from}mapped{blur_to}");
                let cfg = self.stage_cfg(&key);
                let model_cfg = self.config.model.clone();
                let from_spec = self.restore_spec(blur_from);
                let map_for_train = map.clone();
                let spec = self.get_or_train(&key, |_| {
                    train_specialized(&map_for_train, &corpus.train, &from_spec, &model_cfg, &cfg)
                })?;
                vec![map, spec]
            }
            other => {
                return Err(Error::Config(format!(
                    "{} is not a restoration branch",
                    other.name()
                )))
            }
        };
        compose(stages, 1)
    }

    fn check_blur_to(&self, blur_to: u32) -> Result<()> {
        if blur_to != self.config.restore_blur_to {
            return Err(Error::Config(format!(
                "branch maps to blur {blur_to}, but the experiment's intermediate domain is {}",
                self.config.restore_blur_to
            )));
        }
        Ok(())
    }

    pub fn evaluate_restore(&mut self, branch: Branch, corpus: &Corpus) -> Result<MetricsReport> {
        let pipeline = self.restore_pipeline(branch, corpus)?;
        let eval_blur = match branch {
            Branch::RestoreDirect { eval_blur } => eval_blur,
            Branch::RestoreMapped { blur_from, .. }
            | Branch::RestoreMappedSpecialized { blur_from, .. } => blur_from,
            _ => unreachable!(),
        };
        let eval = make_pairs(&corpus.test, &self.restore_spec(eval_blur), 1)?;
        evaluate_pipeline(
            &pipeline,
            &eval,
            &branch.label(),
            &corpus.name,
            &self.config.digest(),
        )
    }
}

/// Outcome of a branch run: a report, or the error that stopped it.
pub struct ExperimentOutcome {
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<(String, String)>,
    /// Every stage model trained during the run, with its checkpoint.
    pub registry: ModelRegistry,
}

/// Train and evaluate every configured branch. A failing branch is
/// recorded and does not abort the others. When `cross_corpus` is given,
/// every SR branch is also evaluated on it (models stay trained on
/// `corpus`), probing generalization to a different hidden degradation.
pub fn run_experiment(
    config: &ExperimentConfig,
    corpus: &Corpus,
    cross_corpus: Option<&Corpus>,
) -> ExperimentOutcome {
    let mut exp = Experiment::new(config.clone());
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &branch in &config.branches {
        let result = if branch.is_restoration() {
            exp.evaluate_restore(branch, corpus)
        } else {
            exp.evaluate_sr(branch, corpus, corpus)
        };
        match result {
            Ok(r) => reports.push(r),
            Err(e) => failures.push((branch.name(), e.to_string())),
        }
        if let (Some(cross), false) = (cross_corpus, branch.is_restoration()) {
            match exp.evaluate_sr(branch, corpus, cross) {
                Ok(r) => reports.push(r),
                Err(e) => failures.push((format!("{}@{}", branch.name(), cross.name), e.to_string())),
            }
        }
    }
    ExperimentOutcome {
        reports,
        failures,
        registry: exp.registry,
    }
}

/// Split a corpus and attach its hidden degradation.
pub fn make_corpus(
    name: &str,
    records: Vec<ImageRecord>,
    train_fraction: f64,
    unknown: DegradationSpec,
) -> Result<Corpus> {
    if records.len() < 2 {
        return Err(Error::Dataset("corpus needs at least 2 images".into()));
    }
    let n_train = ((records.len() as f64 * train_fraction).round() as usize)
        .clamp(1, records.len() - 1);
    let (train, test) = crate::datasets::split_records(records, n_train);
    Ok(Corpus {
        name: name.to_string(),
        train,
        test,
        unknown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_corpus;

    fn tiny_model_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk(1);
        cfg.n_groups = 1;
        cfg.n_blocks_per_group = 1;
        cfg.channels = 8;
        cfg.reduction = 2;
        cfg
    }

    fn tiny_corpus(n: usize, seed: u64) -> Corpus {
        make_corpus(
            "tiny",
            synth_corpus(n, 64, seed).unwrap(),
            0.75,
            unknown_spec(4, seed),
        )
        .unwrap()
    }

    #[test]
    fn branch_names_roundtrip() {
        let all = [
            Branch::Direct4,
            Branch::MappingSameOffShelf2x2,
            Branch::MappingSameOffShelf4,
            Branch::MappingSameSpecialized4,
            Branch::Mapping2xOffShelf2,
            Branch::Mapping2xSpecialized2,
            Branch::RestoreDirect { eval_blur: 7 },
            Branch::RestoreMapped {
                blur_from: 7,
                blur_to: 9,
            },
            Branch::RestoreMappedSpecialized {
                blur_from: 11,
                blur_to: 9,
            },
        ];
        for b in all {
            assert_eq!(Branch::parse(&b.name()).unwrap(), b);
        }
        assert!(Branch::parse("nonsense").is_err());
        assert_eq!(
            Branch::RestoreMappedSpecialized {
                blur_from: 7,
                blur_to: 9
            }
            .label(),
            "7Mapped9*"
        );
        assert_eq!(Branch::RestoreDirect { eval_blur: 9 }.label(), "9x9");
    }

    #[test]
    fn every_branch_name_appears_in_help() {
        // keeps BRANCH_HELP in sync with the enum
        for b in Branch::SR_ALL {
            assert!(
                BRANCH_HELP.iter().any(|(n, _)| *n == b.name()),
                "{} missing from help",
                b.name()
            );
        }
        for template in ["restore_direct:", "restore_mapped:", "restore_mapped_specialized:"] {
            assert!(BRANCH_HELP
                .iter()
                .any(|(n, _)| n.starts_with(template)));
        }
    }

    #[test]
    fn compose_validates_scale_chains() {
        let m = |scale: usize| Model::<f32>::build(&tiny_model_cfg().with_scale(scale), 1).unwrap();
        assert!(compose(vec![m(1), m(4)], 4).is_ok());
        assert!(compose(vec![m(1), m(2), m(2)], 4).is_ok());
        assert!(compose(vec![m(2), m(2)], 4).is_ok());
        assert!(compose(vec![m(4)], 4).is_ok());
        assert!(compose(vec![m(1)], 1).is_ok());
        // mis-scaled chains are rejected at build time
        assert!(compose(vec![m(2), m(4)], 4).is_err());
        assert!(compose(vec![m(2)], 4).is_err());
        assert!(compose(vec![m(2), m(2)], 1).is_err());
        assert!(compose(vec![], 4).is_err());
    }

    #[test]
    fn identity_stage_composes_transparently() {
        // compose([exact identity map, x4 model]) == x4 model alone
        let x4 = Model::<f32>::build(&tiny_model_cfg().with_scale(4), 30).unwrap();
        let with_map = compose(vec![Model::identity(8).unwrap(), x4.clone()], 4).unwrap();
        let alone = compose(vec![x4], 4).unwrap();
        let mut rng = Rng::seed_from(99);
        let x = Tensor::<f32>::from_fn(crate::tensor::Shape::new(1, 3, 12, 12), |_| {
            rng.next_f64() as f32
        });
        assert!(with_map.apply(&x).unwrap().bit_eq(&alone.apply(&x).unwrap()));
    }

    #[test]
    fn specialized_training_freezes_stage_one() {
        let corpus = tiny_corpus(4, 31);
        let stage1 = Model::<f32>::identity(8).unwrap();
        let reference = stage1.clone();
        let run = train_specialized(
            &stage1,
            &corpus.train,
            &DegradationSpec::identity(),
            &tiny_model_cfg(),
            &TrainConfig::desk(3).with_batch(1).with_patch(12),
        )
        .unwrap();
        assert!(stage1.params_bit_eq(&reference));
        assert_eq!(run.model.scale(), 1);
    }

    #[test]
    fn specialized_with_identity_stage_degenerates_to_direct_pairs() {
        // stage1 = exact identity, from = bicubic down 4: the pair stream
        // equals direct training pairs bit for bit
        let corpus = tiny_corpus(4, 32);
        let stage1 = Model::<f32>::identity(8).unwrap();
        let spec = DegradationSpec::bicubic_down(4);
        let specialized = make_specialized_pairs(&stage1, &corpus.train, &spec).unwrap();
        let direct = make_pairs(&corpus.train, &spec, 4).unwrap();
        assert_eq!(specialized.scale, direct.scale);
        for (a, b) in specialized.pairs.iter().zip(&direct.pairs) {
            assert!(a.input.pixels.bit_eq(&b.input.pixels));
            assert!(a.target.pixels.bit_eq(&b.target.pixels));
        }
    }

    #[test]
    fn unknown_spec_is_deterministic_and_hidden_params_vary() {
        let a = unknown_spec(4, 1);
        let b = unknown_spec(4, 1);
        assert_eq!(a, b);
        let c = unknown_spec(4, 2);
        assert_ne!(a, c);
        assert_eq!(a.net_scale(), (1, 4));
    }

    #[test]
    fn csv_report_shape_and_inf_rendering() {
        let corpus = tiny_corpus(3, 33);
        let pipeline = compose(vec![Model::<f32>::identity(8).unwrap()], 1).unwrap();
        let eval = make_pairs(&corpus.test, &DegradationSpec::identity(), 1).unwrap();
        let report = evaluate_pipeline(&pipeline, &eval, "Identity", "tiny", "0").unwrap();
        assert_eq!(report.rows.len(), eval.len());
        assert!(report.mean_psnr_db.is_infinite());
        assert!((report.mean_ssim - 1.0).abs() < 1e-9);
        let csv = report.to_csv();
        assert!(csv.starts_with("image_id,psnr_db,ssim\n"));
        assert!(csv.contains(",inf,"), "csv: {csv}");
        // markdown tables render
        let md = markdown_branch_table(std::slice::from_ref(&report));
        assert!(md.contains("Identity"));
        let md3 = markdown_metric_table(&[report]);
        assert!(md3.contains("PSNR(dB)"));
    }

    #[test]
    fn registry_persists_checkpoints_with_manifest() {
        let dir = std::env::temp_dir().join(format!("remapsr-registry-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let corpus = tiny_corpus(3, 34);
        let mut config = ExperimentConfig::desk(vec![], 2, 35);
        config.model = tiny_model_cfg();
        config.train = config.train.with_batch(1).with_patch(12);
        let mut exp = Experiment::new(config);
        exp.restorer(&corpus).unwrap();
        exp.registry.save(&dir).unwrap();
        assert!(dir.join("restorer_9.ckpt").exists());
        let manifest = std::fs::read_to_string(dir.join("manifest.tsv")).unwrap();
        assert!(manifest.contains("restorer_9\trestorer_9.ckpt"));
        // the checkpoint reloads
        let ck = Checkpoint::load(&dir.join("restorer_9.ckpt")).unwrap();
        assert_eq!(ck.iteration, 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
