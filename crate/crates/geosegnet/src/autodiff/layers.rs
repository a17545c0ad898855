//! Dense layers and residual blocks built on the graph ops.

use super::graph::{Graph, Value};
use super::store::{ParamStore, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Negative-side slope of the leaky rectifier used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.01;

const NORM_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of the old value per update.
const RUNNING_KEEP: f64 = 0.9;

/// Whether a forward pass normalizes with batch statistics (and records
/// them) or with the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one normalizing layer during a training
/// forward pass; folded into the running statistics by the caller.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Folds recorded batch statistics into the store's running buffers.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) -> Result<()> {
    for u in updates {
        let rmean = store.get_mut(&format!("{}.rmean", u.name))?;
        for (r, &m) in rmean.data.iter_mut().zip(&u.mean) {
            *r = RUNNING_KEEP * *r + (1.0 - RUNNING_KEEP) * m;
        }
        let rvar = store.get_mut(&format!("{}.rvar", u.name))?;
        for (r, &v) in rvar.data.iter_mut().zip(&u.var) {
            *r = RUNNING_KEEP * *r + (1.0 - RUNNING_KEEP) * v;
        }
    }
    Ok(())
}

/// A fully connected layer applied along the trailing axis, with optional
/// per-channel normalization and a leaky rectifier.
#[derive(Debug, Clone)]
pub struct Dense {
    name: String,
    in_dim: usize,
    out_dim: usize,
    normalize: bool,
    activate: bool,
    zero_init: bool,
}

impl Dense {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, normalize: bool, activate: bool) -> Dense {
        Dense {
            name: name.to_string(),
            in_dim,
            out_dim,
            normalize,
            activate,
            zero_init: false,
        }
    }

    /// A plain affine map: no normalization, no activation.
    pub fn linear(name: &str, in_dim: usize, out_dim: usize) -> Dense {
        Dense::new(name, in_dim, out_dim, false, false)
    }

    /// A plain affine map whose weights start at zero, so a freshly
    /// initialized layer emits identical logits for every class.
    pub fn classifier(name: &str, in_dim: usize, out_dim: usize) -> Dense {
        let mut d = Dense::linear(name, in_dim, out_dim);
        d.zero_init = true;
        d
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Creates this layer's parameters in the store.  Weights draw from
    /// the uniform Xavier range +-sqrt(6 / (in + out)).
    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let w: Vec<f64> = if self.zero_init {
            vec![0.0; self.in_dim * self.out_dim]
        } else {
            let bound = (6.0 / (self.in_dim + self.out_dim) as f64).sqrt();
            (0..self.in_dim * self.out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect()
        };
        store.insert(
            &format!("{}.w", self.name),
            Tensor::from_vec(vec![self.in_dim, self.out_dim], w)?,
            true,
        )?;
        store.insert(
            &format!("{}.b", self.name),
            Tensor::zeros(vec![self.out_dim]),
            true,
        )?;
        if self.normalize {
            store.insert(
                &format!("{}.gamma", self.name),
                Tensor::ones(vec![self.out_dim]),
                true,
            )?;
            store.insert(
                &format!("{}.beta", self.name),
                Tensor::zeros(vec![self.out_dim]),
                true,
            )?;
            store.insert(
                &format!("{}.rmean", self.name),
                Tensor::zeros(vec![self.out_dim]),
                false,
            )?;
            store.insert(
                &format!("{}.rvar", self.name),
                Tensor::ones(vec![self.out_dim]),
                false,
            )?;
        }
        Ok(())
    }

    pub fn apply(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Value,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Value> {
        let in_shape = g.shape(x);
        if in_shape.last() != Some(&self.in_dim) {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: in_shape,
                rhs: vec![self.in_dim],
            });
        }
        let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
        let flat = g.reshape(x, vec![rows, self.in_dim])?;
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let mut y = g.add_bias(g.matmul(flat, w)?, b)?;
        if self.normalize {
            match mode {
                Mode::Train => {
                    let (mean, var) = g.channel_stats(y)?;
                    stats.push(StatUpdate {
                        name: self.name.clone(),
                        mean,
                        var,
                    });
                    y = g.normalize_channels(y)?;
                }
                Mode::Eval => {
                    let rmean = store.get(&format!("{}.rmean", self.name))?;
                    let rvar = store.get(&format!("{}.rvar", self.name))?;
                    let neg_mean: Vec<f64> = rmean.data.iter().map(|m| -m).collect();
                    let inv_std: Vec<f64> = rvar
                        .data
                        .iter()
                        .map(|v| 1.0 / (v + NORM_EPS).sqrt())
                        .collect();
                    let nm = g.leaf(vec![self.out_dim], neg_mean)?;
                    let is = g.leaf(vec![self.out_dim], inv_std)?;
                    y = g.mul_bias(g.add_bias(y, nm)?, is)?;
                }
            }
            let gamma = g.param(store, &format!("{}.gamma", self.name))?;
            let beta = g.param(store, &format!("{}.beta", self.name))?;
            y = g.add_bias(g.mul_bias(y, gamma)?, beta)?;
        }
        if self.activate {
            y = g.leaky_rect(y, LEAKY_SLOPE);
        }
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, out_shape)
    }
}

/// A two-layer residual block.  The main path is dense(norm, act) then
/// dense(norm); the skip is the identity when widths match and a plain
/// linear projection otherwise.  The sum passes through one final
/// activation.
#[derive(Debug, Clone)]
pub struct RBlock {
    main1: Dense,
    main2: Dense,
    skip: Option<Dense>,
    residual: bool,
}

impl RBlock {
    pub fn new(name: &str, in_dim: usize, out_dim: usize) -> RBlock {
        RBlock {
            main1: Dense::new(&format!("{name}.m1"), in_dim, out_dim, true, true),
            main2: Dense::new(&format!("{name}.m2"), out_dim, out_dim, true, false),
            skip: (in_dim != out_dim).then(|| Dense::linear(&format!("{name}.skip"), in_dim, out_dim)),
            residual: true,
        }
    }

    /// The same two-layer stack without the additive skip, for ablating
    /// the residual connection while keeping parameter shapes.
    pub fn plain(name: &str, in_dim: usize, out_dim: usize) -> RBlock {
        RBlock {
            main1: Dense::new(&format!("{name}.m1"), in_dim, out_dim, true, true),
            main2: Dense::new(&format!("{name}.m2"), out_dim, out_dim, true, false),
            skip: None,
            residual: false,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.main2.out_dim()
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.main1.register(store, rng)?;
        self.main2.register(store, rng)?;
        if let Some(skip) = &self.skip {
            skip.register(store, rng)?;
        }
        Ok(())
    }

    pub fn apply(
        &self,
        g: &Graph,
        store: &ParamStore,
        x: Value,
        mode: Mode,
        stats: &mut Vec<StatUpdate>,
    ) -> Result<Value> {
        let main = self.main1.apply(g, store, x, mode, stats)?;
        let main = self.main2.apply(g, store, main, mode, stats)?;
        let summed = if self.residual {
            let skip = match &self.skip {
                Some(proj) => proj.apply(g, store, x, mode, stats)?,
                None => x,
            };
            g.add(main, skip)?
        } else {
            main
        };
        Ok(g.leaky_rect(summed, LEAKY_SLOPE))
    }
}
