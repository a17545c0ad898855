//! The operations behind each `geosegnet` subcommand.
//!
//! Every function here takes plain paths and values, prints its results
//! to stdout, and returns the library error type, so the binary is a
//! thin argument-parsing shell and integration tests can drive the same
//! code paths directly.  Nothing prints timestamps or machine-specific
//! details: identical inputs produce byte-identical outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use geosegnet::autodiff::{
    load_checkpoint, save_checkpoint, Dense, Graph, Mode, ParamStore, Value, LEAKY_SLOPE,
};
use geosegnet::boundary::{cbl_loss, mine_boundaries};
use geosegnet::geomfeat::{
    bounding_sphere, color_features, gcfr_features, local_covariance_eigenvalues, local_density,
};
use geosegnet::gradcheck::{check_input_grad, GradCheck};
use geosegnet::network::{attentive_pool, Network, NetworkConfig, STAGES};
use geosegnet::pointcloud::{generate_scene, save_labels, LabeledCloud, SceneSpec};
use geosegnet::spatial::SpatialIndex;
use geosegnet::training::{self, build_supervision, evaluate, multi_stage_loss, Metrics,
    LOG_CSV_HEADER};
use geosegnet::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::{ExperimentConfig, Overrides};

/// Generates a synthetic labeled scene from a spec file.
pub fn gen(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = SceneSpec::load(spec_path)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let cloud = generate_scene(&spec)?;
    cloud.save(out)?;
    println!(
        "wrote {} points across {} classes to {}",
        cloud.len(),
        cloud.class_count,
        out.display()
    );
    Ok(())
}

/// Exports per-point geometric descriptors over k-nearest neighborhoods
/// as a CSV table.
pub fn features(input: &Path, out: &Path, k: usize) -> Result<()> {
    let cloud = LabeledCloud::load(input)?;
    let index = SpatialIndex::build(&cloud.positions)?;
    let table = index.knn(&cloud.positions, k)?;
    let eigen = local_covariance_eigenvalues(&cloud.positions, &table)?;
    let gcfr = gcfr_features(&cloud.positions, &table)?;
    let (_, global_radius) = bounding_sphere(&cloud.positions)?;
    let density = local_density(&table, global_radius)?;
    let colors = color_features(&cloud.colors, &table)?;

    let mut text = String::from(
        "x,y,z,lambda_1,lambda_2,lambda_3,mean_dis,mean_abs_phi,mean_abs_theta,density,color_var_r,color_var_g,color_var_b\n",
    );
    let row_mean = |flat: &[f64], i: usize, absolute: bool| -> f64 {
        let row = &flat[i * k..(i + 1) * k];
        let sum: f64 = row.iter().map(|&v| if absolute { v.abs() } else { v }).sum();
        sum / k as f64
    };
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let l = eigen.lambdas[i];
        let var = &colors.variance[i * 3..i * 3 + 3];
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p[0],
            p[1],
            p[2],
            l[0],
            l[1],
            l[2],
            row_mean(&gcfr.dis, i, false),
            row_mean(&gcfr.phi_rel, i, true),
            row_mean(&gcfr.theta_rel, i, true),
            density.ratio[i],
            var[0],
            var[1],
            var[2],
        ));
    }
    write_text(out, &text)?;
    println!("wrote {} feature rows to {}", cloud.len(), out.display());
    Ok(())
}

/// Marks points whose neighborhood mixes classes and saves the cloud
/// with the boundary flag in the prediction column.
pub fn boundary(input: &Path, out: &Path, radius: f64) -> Result<()> {
    let cloud = LabeledCloud::load(input)?;
    let mask = mine_boundaries(&cloud.positions, &cloud.labels, radius)?;
    let flags: Vec<usize> = mask.iter().map(|&b| b as usize).collect();
    save_labels(&cloud, &flags, out)?;
    let hits = mask.iter().filter(|&&b| b).count();
    println!(
        "{hits} of {} points sit on a class boundary; wrote {}",
        cloud.len(),
        out.display()
    );
    Ok(())
}

/// Trains a network per an experiment config, writing the checkpoint
/// and the per-epoch CSV log.
pub fn train(
    config_path: &Path,
    overrides: &Overrides,
    checkpoint: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    if let Some(path) = checkpoint {
        cfg.checkpoint = path.to_path_buf();
    }
    if let Some(path) = log {
        cfg.log = Some(path.to_path_buf());
    }

    let (scenes, holdout) = load_scenes(&cfg)?;
    let net = Network::new(cfg.network.clone())?;
    let run = training::train(&net, &scenes, &holdout, &cfg.training)?;

    if let Some(log_path) = &cfg.log {
        let mut text = String::from(LOG_CSV_HEADER);
        text.push('\n');
        for record in &run.log {
            text.push_str(&record.csv_row());
            text.push('\n');
        }
        write_text(log_path, &text)?;
        println!("log written to {}", log_path.display());
    }

    let mut meta = config_to_meta(&cfg.network);
    meta.insert("aborted".into(), run.aborted.to_string());
    save_checkpoint(&cfg.checkpoint, &run.store, &meta)?;

    if run.aborted {
        println!(
            "training diverged after {} finished epochs; the checkpoint holds the last finite state",
            run.log.len()
        );
    }
    if let Some(last) = run.log.last() {
        println!(
            "epoch {}: total {:.6} OA {:.4} mIoU {:.4} boundary mIoU {:.4}",
            last.epoch, last.report.total, last.oa, last.miou, last.boundary_miou
        );
    }
    println!("checkpoint written to {}", cfg.checkpoint.display());
    Ok(())
}

/// Evaluates a checkpoint on labeled scenes, printing one metrics row
/// per scene and a merged `all` row when several are given.
pub fn eval(checkpoint: &Path, inputs: &[PathBuf]) -> Result<()> {
    let (store, meta) = load_checkpoint(checkpoint)?;
    let cfg = config_from_meta(&meta)?;
    let classes = cfg.class_count;
    let net = Network::new(cfg)?;

    println!("scene,OA,mIoU,mACC,boundary_mIoU");
    let mut merged = Metrics::new(classes);
    for input in inputs {
        let cloud = LabeledCloud::load_with_class_count(input, classes)?;
        let metrics = evaluate(&net, &store, std::slice::from_ref(&cloud))?;
        println!("{},{}", input.display(), metrics_csv(&metrics));
        merged.merge(&metrics)?;
    }
    if inputs.len() > 1 {
        println!("all,{}", metrics_csv(&merged));
    }
    Ok(())
}

/// Runs the gradient-check suite and prints one row per building block;
/// any failure turns into an error after the full table is printed.
pub fn gradcheck(seed: u64) -> Result<()> {
    let rows = gradcheck_suite(seed)?;
    println!("op,max_rel_err,tolerance,status");
    let mut failures = Vec::new();
    for row in &rows {
        let status = if row.passed() { "ok" } else { "FAIL" };
        println!("{},{:e},{:e},{status}", row.name, row.max_rel_err, row.tolerance);
        if !row.passed() {
            failures.push(row.name.clone());
        }
    }
    if failures.is_empty() {
        println!("all {} gradient checks passed", rows.len());
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient checks failed: {}",
            failures.join(", ")
        )))
    }
}

/// Retrains over a grid of auxiliary-loss weights and reports holdout
/// metrics per cell.  Empty lists fall back to the config's values.
pub fn sweep(
    config_path: &Path,
    lambda1: &[f64],
    lambda2: &[f64],
    out: Option<&Path>,
    overrides: &Overrides,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let l1s = if lambda1.is_empty() { vec![cfg.network.lambda1] } else { lambda1.to_vec() };
    let l2s = if lambda2.is_empty() { vec![cfg.network.lambda2] } else { lambda2.to_vec() };

    let (scenes, holdout) = load_scenes(&cfg)?;
    let header = "lambda1,lambda2,OA,mIoU,mACC,boundary_mIoU";
    let mut text = format!("{header}\n");
    println!("{header}");
    for &l1 in &l1s {
        for &l2 in &l2s {
            let mut network = cfg.network.clone();
            network.lambda1 = l1;
            network.lambda2 = l2;
            let net = Network::new(network)?;
            let run = training::train(&net, &scenes, &holdout, &cfg.training)?;
            let metrics = evaluate(&net, &run.store, std::slice::from_ref(&holdout))?;
            let row = format!("{l1},{l2},{}", metrics_csv(&metrics));
            println!("{row}");
            text.push_str(&row);
            text.push('\n');
        }
    }
    if let Some(path) = out {
        write_text(path, &text)?;
    }
    Ok(())
}

fn load_scenes(cfg: &ExperimentConfig) -> Result<(Vec<LabeledCloud>, LabeledCloud)> {
    let classes = cfg.network.class_count;
    let scenes = cfg
        .scenes
        .iter()
        .map(|path| LabeledCloud::load_with_class_count(path, classes))
        .collect::<Result<Vec<_>>>()?;
    let holdout = LabeledCloud::load_with_class_count(cfg.holdout_path(), classes)?;
    Ok((scenes, holdout))
}

fn metrics_csv(metrics: &Metrics) -> String {
    format!(
        "{},{},{},{}",
        metrics.oa(),
        metrics.miou(),
        metrics.macc(),
        metrics.boundary_miou()
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Serializes a network config into checkpoint metadata.
pub fn config_to_meta(cfg: &NetworkConfig) -> BTreeMap<String, String> {
    let join = |xs: &[usize]| {
        xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    };
    let mut meta = BTreeMap::new();
    meta.insert("classes".into(), cfg.class_count.to_string());
    meta.insert("ratios".into(), join(&cfg.ratios));
    meta.insert("widths".into(), join(&cfg.widths));
    meta.insert("k1".into(), cfg.k1.to_string());
    meta.insert("k2".into(), cfg.k2.to_string());
    meta.insert("eigen_k".into(), cfg.eigen_k.to_string());
    meta.insert("lambda1".into(), cfg.lambda1.to_string());
    meta.insert("lambda2".into(), cfg.lambda2.to_string());
    meta.insert("tau".into(), cfg.tau.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("use_eigen".into(), cfg.use_eigen.to_string());
    meta.insert("use_gcfr".into(), cfg.use_gcfr.to_string());
    meta.insert("use_colors".into(), cfg.use_colors.to_string());
    meta.insert("use_positions".into(), cfg.use_positions.to_string());
    meta.insert("use_density".into(), cfg.use_density.to_string());
    meta.insert("use_residual".into(), cfg.use_residual.to_string());
    meta
}

/// Rebuilds the network config a checkpoint was trained with.
pub fn config_from_meta(meta: &BTreeMap<String, String>) -> Result<NetworkConfig> {
    fn field<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
        meta.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint meta is missing {key:?}")))
    }
    fn parsed<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let value = field(meta, key)?;
        value.parse().map_err(|_| {
            Error::Config(format!("checkpoint meta {key} = {value:?} does not parse"))
        })
    }
    fn stage_list(meta: &BTreeMap<String, String>, key: &str) -> Result<[usize; STAGES]> {
        let value = field(meta, key)?;
        value
            .split(',')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<Vec<usize>>>()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| {
                Error::Config(format!("checkpoint meta {key} = {value:?} does not parse"))
            })
    }

    let mut cfg = NetworkConfig::new(parsed(meta, "classes")?);
    cfg.ratios = stage_list(meta, "ratios")?;
    cfg.widths = stage_list(meta, "widths")?;
    cfg.k1 = parsed(meta, "k1")?;
    cfg.k2 = parsed(meta, "k2")?;
    cfg.eigen_k = parsed(meta, "eigen_k")?;
    cfg.lambda1 = parsed(meta, "lambda1")?;
    cfg.lambda2 = parsed(meta, "lambda2")?;
    cfg.tau = parsed(meta, "tau")?;
    cfg.seed = parsed(meta, "seed")?;
    cfg.use_eigen = parsed(meta, "use_eigen")?;
    cfg.use_gcfr = parsed(meta, "use_gcfr")?;
    cfg.use_colors = parsed(meta, "use_colors")?;
    cfg.use_positions = parsed(meta, "use_positions")?;
    cfg.use_density = parsed(meta, "use_density")?;
    cfg.use_residual = parsed(meta, "use_residual")?;
    Ok(cfg)
}

const EPSILON: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;

/// One line of the gradient-check table.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn row(name: &str, max_rel_err: f64) -> CheckRow {
    CheckRow {
        name: name.to_string(),
        max_rel_err,
        tolerance: TOLERANCE,
    }
}

/// Magnitudes in [0.25, 1.75] with random signs: away from the rectifier
/// crease at zero, so a +-epsilon probe never crosses a kink.
fn signed_data(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let mag = rng.gen_range(0.25..1.75);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn positive_data(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(0.25..2.0)).collect()
}

/// Values spaced 0.13 apart (then shuffled), so a max always has an
/// isolated winner and the probe never straddles a tie.
fn spaced_data(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
    let mut values: Vec<f64> = (0..len).map(|j| -1.0 + 0.13 * j as f64).collect();
    values.shuffle(rng);
    values
}

/// Contracts a tensor to a scalar against fixed non-uniform weights, so
/// no gradient path cancels out of the probe loss.
fn weighted_scalar(g: &Graph, x: Value) -> Result<Value> {
    let shape = g.shape(x);
    let len: usize = shape.iter().product();
    let weights: Vec<f64> = (0..len).map(|i| ((i % 7) as f64 - 3.0) * 0.37 + 0.11).collect();
    let mut v = g.mul(x, g.leaf(shape, weights)?)?;
    while !g.shape(v).is_empty() {
        v = g.reduce_sum(v, 0)?;
    }
    Ok(v)
}

fn check_unary(
    shape: Vec<usize>,
    data: &[f64],
    f: impl Fn(&Graph, Value) -> Result<Value>,
) -> Result<f64> {
    check_input_grad(shape, data, EPSILON, |g, x| weighted_scalar(g, f(g, x)?))
}

/// Checks a two-operand op with respect to each operand in turn.
fn check_binary(
    a: (Vec<usize>, &[f64]),
    b: (Vec<usize>, &[f64]),
    f: impl Fn(&Graph, Value, Value) -> Result<Value>,
) -> Result<f64> {
    let wrt_a = check_input_grad(a.0.clone(), a.1, EPSILON, |g, x| {
        let fixed = g.leaf(b.0.clone(), b.1.to_vec())?;
        weighted_scalar(g, f(g, x, fixed)?)
    })?;
    let wrt_b = check_input_grad(b.0.clone(), b.1, EPSILON, |g, y| {
        let fixed = g.leaf(a.0.clone(), a.1.to_vec())?;
        weighted_scalar(g, f(g, fixed, y)?)
    })?;
    Ok(wrt_a.max(wrt_b))
}

fn probe_config(classes: usize, seed: u64) -> NetworkConfig {
    let mut cfg = NetworkConfig::new(classes);
    cfg.ratios = [1, 2, 2, 2, 2];
    cfg.widths = [8, 8, 8, 8, 8];
    cfg.k1 = 4;
    cfg.k2 = 6;
    cfg.eigen_k = 3;
    cfg.seed = seed;
    cfg
}

fn random_cloud(rng: &mut ChaCha12Rng, n: usize, classes: usize) -> Result<LabeledCloud> {
    let positions = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..0.6),
            ]
        })
        .collect();
    let colors = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ]
        })
        .collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    LabeledCloud::new(positions, colors, labels, classes)
}

/// Adds a small uniform offset to every trainable tensor, moving the
/// check off the freshly initialized point (zeroed classifier heads).
fn jitter_params(store: &mut ParamStore, rng: &mut ChaCha12Rng, amplitude: f64) {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(name, _, _)| name.to_string())
        .collect();
    for name in &names {
        for v in &mut store.get_mut(name).unwrap().data {
            *v += rng.gen_range(-amplitude..amplitude);
        }
    }
}

/// Central-difference checks for every differentiable building block:
/// each graph op, the attentive pooling head, one full geometry module,
/// the boundary-contrast loss, and the network end to end.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let m43 = vec![4usize, 3];
    let a = signed_data(&mut rng, 12);
    let b = signed_data(&mut rng, 12);
    rows.push(row(
        "add",
        check_binary((m43.clone(), &a), (m43.clone(), &b), |g, x, y| g.add(x, y))?,
    ));
    rows.push(row(
        "sub",
        check_binary((m43.clone(), &a), (m43.clone(), &b), |g, x, y| g.sub(x, y))?,
    ));
    rows.push(row(
        "mul",
        check_binary((m43.clone(), &a), (m43.clone(), &b), |g, x, y| g.mul(x, y))?,
    ));
    rows.push(row(
        "scale",
        check_unary(m43.clone(), &a, |g, x| Ok(g.scale(x, 1.7)))?,
    ));

    let bias = signed_data(&mut rng, 3);
    rows.push(row(
        "add_bias",
        check_binary((m43.clone(), &a), (vec![3], &bias), |g, x, y| g.add_bias(x, y))?,
    ));
    rows.push(row(
        "mul_bias",
        check_binary((m43.clone(), &a), (vec![3], &bias), |g, x, y| g.mul_bias(x, y))?,
    ));

    rows.push(row("square", check_unary(m43.clone(), &a, |g, x| Ok(g.square(x)))?));
    rows.push(row("exp", check_unary(m43.clone(), &a, |g, x| Ok(g.exp(x)))?));
    let pos = positive_data(&mut rng, 12);
    rows.push(row("log", check_unary(m43.clone(), &pos, |g, x| Ok(g.log(x)))?));
    rows.push(row("sqrt", check_unary(m43.clone(), &pos, |g, x| Ok(g.sqrt(x)))?));
    rows.push(row(
        "leaky_rect",
        check_unary(m43.clone(), &a, |g, x| Ok(g.leaky_rect(x, LEAKY_SLOPE)))?,
    ));
    rows.push(row(
        "reshape",
        check_unary(m43.clone(), &a, |g, x| g.reshape(x, vec![2, 6]))?,
    ));

    let part_b = signed_data(&mut rng, 6);
    let part_c = signed_data(&mut rng, 9);
    let concat_first = check_input_grad(vec![3, 2], &signed_data(&mut rng, 6), EPSILON, |g, x| {
        let fixed_b = g.leaf(vec![3, 2], part_b.clone())?;
        let fixed_c = g.leaf(vec![3, 3], part_c.clone())?;
        weighted_scalar(g, g.concat(1, &[x, fixed_b, fixed_c])?)
    })?;
    let concat_last = check_input_grad(vec![3, 3], &part_c, EPSILON, |g, x| {
        let fixed_a = g.leaf(vec![3, 2], part_b.clone())?;
        let fixed_b = g.leaf(vec![3, 2], part_b.clone())?;
        weighted_scalar(g, g.concat(1, &[fixed_a, fixed_b, x])?)
    })?;
    rows.push(row("concat", concat_first.max(concat_last)));

    let gather_src = signed_data(&mut rng, 15);
    // A repeated source row checks gradient accumulation across queries.
    let gather_table: Vec<u32> = vec![0, 2, 4, 4, 1, 3, 2, 0];
    rows.push(row(
        "gather_rows",
        check_unary(vec![5, 3], &gather_src, |g, x| {
            g.gather_rows(x, &gather_table, 2)
        })?,
    ));

    for (name, which) in [("reduce_sum", 0), ("reduce_mean", 1), ("reduce_max", 2)] {
        let data = if which == 2 { spaced_data(&mut rng, 12) } else { signed_data(&mut rng, 12) };
        let mut worst = 0.0f64;
        for axis in 0..2 {
            let err = check_unary(m43.clone(), &data, |g, x| match which {
                0 => g.reduce_sum(x, axis),
                1 => g.reduce_mean(x, axis),
                _ => g.reduce_max(x, axis),
            })?;
            worst = worst.max(err);
        }
        rows.push(row(name, worst));
    }

    let lhs = signed_data(&mut rng, 12);
    let rhs = signed_data(&mut rng, 15);
    rows.push(row(
        "matmul",
        check_binary((vec![4, 3], &lhs), (vec![3, 5], &rhs), |g, x, y| g.matmul(x, y))?,
    ));

    let logits = signed_data(&mut rng, 12);
    let mut softmax_worst = 0.0f64;
    for axis in 0..2 {
        softmax_worst = softmax_worst
            .max(check_unary(m43.clone(), &logits, |g, x| g.softmax(x, axis))?);
    }
    rows.push(row("softmax", softmax_worst));

    let wide = signed_data(&mut rng, 24);
    rows.push(row(
        "normalize_channels",
        check_unary(vec![6, 4], &wide, |g, x| g.normalize_channels(x))?,
    ));

    let ce_logits = signed_data(&mut rng, 15);
    let labels = [0usize, 2, 1, 0, 2];
    let ignore = [false, false, true, false, false];
    let ce_plain = check_input_grad(vec![5, 3], &ce_logits, EPSILON, |g, x| {
        g.cross_entropy(x, &labels, None)
    })?;
    let ce_masked = check_input_grad(vec![5, 3], &ce_logits, EPSILON, |g, x| {
        g.cross_entropy(x, &labels, Some(&ignore))
    })?;
    rows.push(row("cross_entropy", ce_plain.max(ce_masked)));

    rows.push(row("attentive_pool", check_attentive_pool(&mut rng)?));
    rows.push(row("contrastive_boundary", check_cbl(&mut rng)?));
    rows.push(row("geometry_module", check_geometry_module(&mut rng)?));
    rows.push(row("end_to_end", check_end_to_end(&mut rng)?));
    Ok(rows)
}

fn check_attentive_pool(rng: &mut ChaCha12Rng) -> Result<f64> {
    let score = Dense::linear("pool.score", 4, 4);
    let mut store = ParamStore::new();
    score.register(&mut store, rng)?;
    let feats = signed_data(rng, 5 * 3 * 4);

    let wrt_input = check_input_grad(vec![5, 3, 4], &feats, EPSILON, |g, x| {
        let mut stats = Vec::new();
        let pooled = attentive_pool(g, &store, x, &score, Mode::Eval, &mut stats)?;
        weighted_scalar(g, pooled)
    })?;

    let check = GradCheck::default();
    let report = check.check_params(&store, |g, s| {
        let x = g.leaf(vec![5, 3, 4], feats.clone())?;
        let mut stats = Vec::new();
        let pooled = attentive_pool(g, s, x, &score, Mode::Eval, &mut stats)?;
        weighted_scalar(g, pooled)
    })?;
    Ok(wrt_input.max(report.max_rel_err))
}

fn check_cbl(rng: &mut ChaCha12Rng) -> Result<f64> {
    let n = 12;
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mask = vec![true; n];
    let feats = signed_data(rng, n * 4);
    check_input_grad(vec![n, 4], &feats, EPSILON, |g, x| {
        let (loss, _) = cbl_loss(g, x, &positions, &labels, &mask, 5, 0.7)?;
        Ok(loss)
    })
}

fn check_geometry_module(rng: &mut ChaCha12Rng) -> Result<f64> {
    let net = Network::new(probe_config(2, 31))?;
    let store = net.init_params()?;
    let cloud = random_cloud(rng, 24, 2)?;
    let stages = net.encode(&cloud)?;

    let check = GradCheck {
        max_per_param: 2,
        ..GradCheck::default()
    };
    let report = check.check_params(&store, |g, s| {
        let mut stats = Vec::new();
        let out = net.forward(g, s, &cloud, &stages, Mode::Train, &mut stats)?;
        weighted_scalar(g, out.encoder_features[0])
    })?;
    Ok(report.max_rel_err)
}

fn check_end_to_end(rng: &mut ChaCha12Rng) -> Result<f64> {
    let mut cfg = probe_config(2, 47);
    cfg.lambda1 = 0.1;
    cfg.lambda2 = 0.2;
    cfg.tau = 0.8;
    let net = Network::new(cfg.clone())?;
    let mut store = net.init_params()?;
    jitter_params(&mut store, rng, 0.2);
    let cloud = random_cloud(rng, 64, 2)?;
    let mut stages = net.encode(&cloud)?;
    let sup = build_supervision(&mut stages, &cloud.labels, 2)?;

    let check = GradCheck {
        max_per_param: 1,
        ..GradCheck::default()
    };
    let report = check.check_params(&store, |g, s| {
        let mut stats = Vec::new();
        let out = net.forward(g, s, &cloud, &stages, Mode::Train, &mut stats)?;
        let (_, total, _) =
            multi_stage_loss(g, &out, &stages, &sup, cfg.lambda1, cfg.lambda2, cfg.tau)?;
        Ok(total)
    })?;
    Ok(report.max_rel_err)
}
