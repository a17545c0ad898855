//! The training loop: column sampling, augmentation, batched
//! forward/backward across worker threads, Adam updates, and per-epoch
//! holdout metrics.

use crate::autodiff::{apply_stat_updates, Adam, Graph, Mode, ParamStore, StatUpdate};
use crate::boundary::{argmax_labels, mine_boundaries, CblDiagnostics, DEFAULT_BOUNDARY_RADIUS};
use crate::error::{Error, Result};
use crate::geom::{centroid, rotate_about, rotation_z};
use crate::network::{Network, STAGES};
use crate::pointcloud::{sample_column, LabeledCloud};
use crate::training::loss::{build_supervision, multi_stage_loss, LossReport};
use crate::training::metrics::Metrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub learning_rate: f64,
    /// Points per sampled training column.
    pub column_points: usize,
    /// Side length of the square x/y section a column is cropped from.
    pub column_section: f64,
    /// Random z rotation of each column about its centroid.
    pub rotate: bool,
    /// Std-dev of Gaussian position jitter; 0 disables.
    pub jitter_sigma: f64,
    /// Uniform random scaling about the column centroid; off by default.
    pub scale_range: Option<(f64, f64)>,
    /// Worker-thread cap; 0 resolves from `GEOSEG_THREADS`, then the
    /// machine's parallelism.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            epochs: 30,
            batch_size: 4,
            batches_per_epoch: 4,
            learning_rate: 0.01,
            column_points: 1024,
            column_section: 2.0,
            rotate: true,
            jitter_sigma: 0.005,
            scale_range: None,
            threads: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self, minimum_points: usize) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size and batches_per_epoch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.column_points < minimum_points {
            return Err(Error::Config(format!(
                "column_points {} cannot reach the deepest stage; need at least {minimum_points}",
                self.column_points
            )));
        }
        if !(self.column_section > 0.0) {
            return Err(Error::Config("column_section must be positive".into()));
        }
        if self.jitter_sigma < 0.0 {
            return Err(Error::Config("jitter_sigma must be nonnegative".into()));
        }
        if let Some((lo, hi)) = self.scale_range {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Config(format!(
                    "scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
                )));
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss components over the epoch's batch items.
    pub report: LossReport,
    pub oa: f64,
    pub miou: f64,
    pub macc: f64,
    pub boundary_miou: f64,
}

pub const LOG_CSV_HEADER: &str =
    "epoch,L_final,L_pred_1,L_pred_2,L_pred_3,L_pred_4,L_pred_5,L_CBL,total,OA,mIoU,mACC,boundary_mIoU";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let p = &self.report.l_pred;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.report.l_final,
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            self.report.l_cbl,
            self.report.total,
            self.oa,
            self.miou,
            self.macc,
            self.boundary_miou
        )
    }
}

#[derive(Debug)]
pub struct TrainRun {
    /// Parameters after the last epoch that completed with finite losses.
    pub store: ParamStore,
    pub log: Vec<EpochRecord>,
    /// True when a non-finite loss cut training short; `store` then holds
    /// the last good state.
    pub aborted: bool,
    pub diagnostics: CblDiagnostics,
}

/// Worker-thread count: an explicit request wins, then `GEOSEG_THREADS`,
/// then the machine's available parallelism.
pub fn resolve_threads(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    if let Ok(text) = std::env::var("GEOSEG_THREADS") {
        if let Ok(n) = text.parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Everything a batch item needs, drawn up front on the trainer thread so
/// results do not depend on worker scheduling.
#[derive(Debug, Clone, Copy)]
struct ItemPlan {
    scene: usize,
    column_seed: u64,
    rotation: f64,
    scale: Option<f64>,
    jitter_seed: u64,
}

struct ItemOutcome {
    grads: BTreeMap<String, Vec<f64>>,
    stats: Vec<StatUpdate>,
    report: LossReport,
    diagnostics: CblDiagnostics,
}

fn augment(cloud: &mut LabeledCloud, plan: &ItemPlan, jitter_sigma: f64) {
    let center = centroid(&cloud.positions);
    if plan.rotation != 0.0 {
        rotate_about(&mut cloud.positions, &rotation_z(plan.rotation), center);
    }
    if let Some(s) = plan.scale {
        for p in &mut cloud.positions {
            for d in 0..3 {
                p[d] = center[d] + s * (p[d] - center[d]);
            }
        }
    }
    if jitter_sigma > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(plan.jitter_seed);
        let noise = Normal::new(0.0, jitter_sigma).expect("validated sigma");
        for p in &mut cloud.positions {
            for d in 0..3 {
                p[d] += noise.sample(&mut rng);
            }
        }
    }
}

fn run_item(
    net: &Network,
    store: &ParamStore,
    scenes: &[LabeledCloud],
    plan: &ItemPlan,
    opts: &TrainOptions,
) -> Result<ItemOutcome> {
    let cfg = net.config();
    let mut column = sample_column(
        &scenes[plan.scene],
        opts.column_points,
        opts.column_section,
        plan.column_seed,
    )?
    .cloud;
    augment(&mut column, plan, opts.jitter_sigma);

    let mut stages = net.encode(&column)?;
    let sup = build_supervision(&mut stages, &column.labels, cfg.class_count)?;

    let g = Graph::new();
    let mut stats = Vec::new();
    let out = net.forward(&g, store, &column, &stages, Mode::Train, &mut stats)?;
    let (report, total, diagnostics) = multi_stage_loss(
        &g,
        &out,
        &stages,
        &sup,
        cfg.lambda1,
        cfg.lambda2,
        cfg.tau,
    )?;
    g.backward(total)?;
    Ok(ItemOutcome {
        grads: g.param_grads(),
        stats,
        report,
        diagnostics,
    })
}

fn run_batch(
    net: &Network,
    store: &ParamStore,
    scenes: &[LabeledCloud],
    plans: &[ItemPlan],
    opts: &TrainOptions,
    workers: usize,
) -> Vec<Result<ItemOutcome>> {
    let workers = workers.min(plans.len()).max(1);
    if workers == 1 {
        return plans
            .iter()
            .map(|plan| run_item(net, store, scenes, plan, opts))
            .collect();
    }
    let mut slots: Vec<Option<Result<ItemOutcome>>> = Vec::new();
    slots.resize_with(plans.len(), || None);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    plans
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, plan)| (i, run_item(net, store, scenes, plan, opts)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            for (i, outcome) in handle.join().expect("batch worker panicked") {
                slots[i] = Some(outcome);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("item ran")).collect()
}

/// Trains from fresh parameters on `scenes`, evaluating each epoch on
/// `holdout`.  Deterministic in the network config's seed.
pub fn train(
    net: &Network,
    scenes: &[LabeledCloud],
    holdout: &LabeledCloud,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    let cfg = net.config();
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    for scene in scenes.iter().chain(std::iter::once(holdout)) {
        if scene.class_count != cfg.class_count {
            return Err(Error::ClassCountMismatch {
                expected: cfg.class_count,
                actual: scene.class_count,
            });
        }
    }
    opts.validate(cfg.ratio_product())?;
    let workers = resolve_threads(opts.threads);

    let mut store = net.init_params()?;
    let mut last_good = store.clone();
    let mut adam = Adam::new(opts.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut log = Vec::with_capacity(opts.epochs);
    let mut diagnostics = CblDiagnostics::default();

    for epoch in 0..opts.epochs {
        let mut sum = LossReport {
            l_final: 0.0,
            l_pred: [0.0; STAGES],
            l_cbl: 0.0,
            total: 0.0,
        };
        let mut items = 0usize;
        for _ in 0..opts.batches_per_epoch {
            let plans: Vec<ItemPlan> = (0..opts.batch_size)
                .map(|_| ItemPlan {
                    scene: rng.gen_range(0..scenes.len()),
                    column_seed: rng.gen(),
                    rotation: if opts.rotate {
                        rng.gen_range(0.0..std::f64::consts::TAU)
                    } else {
                        0.0
                    },
                    scale: opts.scale_range.map(|(lo, hi)| rng.gen_range(lo..=hi)),
                    jitter_seed: rng.gen(),
                })
                .collect();

            let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut updates: Vec<StatUpdate> = Vec::new();
            let mut finite = true;
            for outcome in run_batch(net, &store, scenes, &plans, opts, workers) {
                let outcome = outcome?;
                if !outcome.report.total.is_finite() {
                    finite = false;
                    break;
                }
                for (name, grad) in outcome.grads {
                    match grad_acc.get_mut(&name) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&grad) {
                                *a += v;
                            }
                        }
                        None => {
                            grad_acc.insert(name, grad);
                        }
                    }
                }
                updates.extend(outcome.stats);
                diagnostics.scored += outcome.diagnostics.scored;
                diagnostics.skipped += outcome.diagnostics.skipped;
                sum.l_final += outcome.report.l_final;
                for (s, v) in sum.l_pred.iter_mut().zip(&outcome.report.l_pred) {
                    *s += v;
                }
                sum.l_cbl += outcome.report.l_cbl;
                sum.total += outcome.report.total;
                items += 1;
            }
            if !finite {
                return Ok(TrainRun {
                    store: last_good,
                    log,
                    aborted: true,
                    diagnostics,
                });
            }
            let inv = 1.0 / plans.len() as f64;
            for grad in grad_acc.values_mut() {
                for v in grad.iter_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut store, &grad_acc)?;
            apply_stat_updates(&mut store, &updates)?;
        }

        let metrics = evaluate(net, &store, std::slice::from_ref(holdout))?;
        let inv = 1.0 / items as f64;
        let report = LossReport {
            l_final: sum.l_final * inv,
            l_pred: sum.l_pred.map(|v| v * inv),
            l_cbl: sum.l_cbl * inv,
            total: sum.total * inv,
        };
        log.push(EpochRecord {
            epoch,
            report,
            oa: metrics.oa(),
            miou: metrics.miou(),
            macc: metrics.macc(),
            boundary_miou: metrics.boundary_miou(),
        });
        last_good = store.clone();
    }

    Ok(TrainRun {
        store: last_good,
        log,
        aborted: false,
        diagnostics,
    })
}

/// Runs the network in evaluation mode over whole scenes and accumulates
/// confusion counts; the boundary matrix is restricted to points mined as
/// boundaries from the ground-truth labels.
pub fn evaluate(net: &Network, store: &ParamStore, scenes: &[LabeledCloud]) -> Result<Metrics> {
    let cfg = net.config();
    let mut metrics = Metrics::new(cfg.class_count);
    for scene in scenes {
        if scene.class_count != cfg.class_count {
            return Err(Error::ClassCountMismatch {
                expected: cfg.class_count,
                actual: scene.class_count,
            });
        }
        let stages = net.encode(scene)?;
        let g = Graph::new();
        let mut stats = Vec::new();
        let out = net.forward(&g, store, scene, &stages, Mode::Eval, &mut stats)?;
        let predictions = argmax_labels(&g.data(out.final_logits), cfg.class_count)?;
        metrics.confusion.tally(&scene.labels, &predictions)?;
        let mask = mine_boundaries(&scene.positions, &scene.labels, DEFAULT_BOUNDARY_RADIUS)?;
        metrics
            .boundary_confusion
            .tally_masked(&scene.labels, &predictions, &mask)?;
    }
    Ok(metrics)
}
