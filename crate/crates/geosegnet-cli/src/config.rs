//! Experiment files: one INI-style text file describing the data paths,
//! the network, and the training schedule for a run.
//!
//! The format is deliberately small — `[section]` headers, `key = value`
//! lines, `#` comments — and strict: unknown sections or keys, repeated
//! keys (except `scene`), and malformed values are all errors that name
//! the offending line.  Relative paths resolve against the config file's
//! directory so a run directory can be moved wholesale.

use std::path::{Path, PathBuf};

use geosegnet::network::{NetworkConfig, STAGES};
use geosegnet::training::TrainOptions;
use geosegnet::{Error, Result};

/// Product the per-stage subsampling divisors must multiply to, so every
/// experiment reduces its deepest stage by the same factor and sweep rows
/// stay comparable.
pub const REQUIRED_RATIO_PRODUCT: usize = 256;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Training scenes; `scene` may repeat in `[paths]`.
    pub scenes: Vec<PathBuf>,
    /// Held-out scene for per-epoch metrics; defaults to the first scene.
    pub holdout: Option<PathBuf>,
    pub checkpoint: PathBuf,
    /// CSV training log; omitted means no log file.
    pub log: Option<PathBuf>,
    pub network: NetworkConfig,
    pub training: TrainOptions,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        ExperimentConfig::parse(&text, path)
    }

    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };

        let mut cfg = ExperimentConfig {
            scenes: Vec::new(),
            holdout: None,
            checkpoint: base.join("geosegnet.ckpt"),
            log: None,
            network: NetworkConfig::new(2),
            training: TrainOptions::default(),
        };
        let mut section = String::new();
        let mut seen: Vec<String> = Vec::new();
        let mut scale_min: Option<f64> = None;
        let mut scale_max: Option<f64> = None;

        for (no, raw) in text.lines().enumerate() {
            let no = no + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(no, format!("unterminated section header {line:?}")))?
                    .trim();
                if !matches!(name, "paths" | "network" | "training") {
                    return Err(err(no, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(no, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err(no, "empty key".into()));
            }
            if section.is_empty() {
                return Err(err(no, format!("key {key:?} before any [section]")));
            }
            let slot = format!("{section}.{key}");
            if slot != "paths.scene" {
                if seen.contains(&slot) {
                    return Err(err(no, format!("repeated key {key:?} in [{section}]")));
                }
                seen.push(slot);
            }

            let bad = |what: &str| err(no, format!("{key} expects {what}, got {value:?}"));
            match (section.as_str(), key) {
                ("paths", "scene") => cfg.scenes.push(base.join(value)),
                ("paths", "holdout") => cfg.holdout = Some(base.join(value)),
                ("paths", "checkpoint") => cfg.checkpoint = base.join(value),
                ("paths", "log") => cfg.log = Some(base.join(value)),
                ("network", "classes") => {
                    cfg.network.class_count = value.parse().map_err(|_| bad("an integer"))?
                }
                ("network", "ratios") => {
                    cfg.network.ratios = parse_stage_list(value).ok_or_else(|| {
                        bad(&format!("{STAGES} comma-separated integers"))
                    })?
                }
                ("network", "widths") => {
                    cfg.network.widths = parse_stage_list(value).ok_or_else(|| {
                        bad(&format!("{STAGES} comma-separated integers"))
                    })?
                }
                ("network", "k1") => {
                    cfg.network.k1 = value.parse().map_err(|_| bad("an integer"))?
                }
                ("network", "k2") => {
                    cfg.network.k2 = value.parse().map_err(|_| bad("an integer"))?
                }
                ("network", "eigen_k") => {
                    cfg.network.eigen_k = value.parse().map_err(|_| bad("an integer"))?
                }
                ("network", "lambda1") => {
                    cfg.network.lambda1 = value.parse().map_err(|_| bad("a number"))?
                }
                ("network", "lambda2") => {
                    cfg.network.lambda2 = value.parse().map_err(|_| bad("a number"))?
                }
                ("network", "tau") => {
                    cfg.network.tau = value.parse().map_err(|_| bad("a number"))?
                }
                ("network", "seed") => {
                    cfg.network.seed = value.parse().map_err(|_| bad("an integer"))?
                }
                ("network", "use_eigen") => {
                    cfg.network.use_eigen = parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("network", "use_gcfr") => {
                    cfg.network.use_gcfr = parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("network", "use_colors") => {
                    cfg.network.use_colors =
                        parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("network", "use_positions") => {
                    cfg.network.use_positions =
                        parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("network", "use_density") => {
                    cfg.network.use_density =
                        parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("network", "use_residual") => {
                    cfg.network.use_residual =
                        parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("training", "epochs") => {
                    cfg.training.epochs = value.parse().map_err(|_| bad("an integer"))?
                }
                ("training", "batch") => {
                    cfg.training.batch_size = value.parse().map_err(|_| bad("an integer"))?
                }
                ("training", "batches_per_epoch") => {
                    cfg.training.batches_per_epoch =
                        value.parse().map_err(|_| bad("an integer"))?
                }
                ("training", "learning_rate") => {
                    cfg.training.learning_rate = value.parse().map_err(|_| bad("a number"))?
                }
                ("training", "column_points") => {
                    cfg.training.column_points = value.parse().map_err(|_| bad("an integer"))?
                }
                ("training", "column_section") => {
                    cfg.training.column_section = value.parse().map_err(|_| bad("a number"))?
                }
                ("training", "rotate") => {
                    cfg.training.rotate = parse_bool(value).ok_or_else(|| bad("true or false"))?
                }
                ("training", "jitter") => {
                    cfg.training.jitter_sigma = value.parse().map_err(|_| bad("a number"))?
                }
                ("training", "scale_min") => {
                    scale_min = Some(value.parse().map_err(|_| bad("a number"))?)
                }
                ("training", "scale_max") => {
                    scale_max = Some(value.parse().map_err(|_| bad("a number"))?)
                }
                ("training", "threads") => {
                    cfg.training.threads = value.parse().map_err(|_| bad("an integer"))?
                }
                _ => return Err(err(no, format!("unknown key {key:?} in [{section}]"))),
            }
        }

        cfg.training.scale_range = match (scale_min, scale_max) {
            (None, None) => None,
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: "scale_min and scale_max must be given together".into(),
                })
            }
        };
        if cfg.scenes.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "at least one scene is required in [paths]".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The network invariants plus the fixed subsampling budget every
    /// experiment must share.
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let product = self.network.ratio_product();
        if product != REQUIRED_RATIO_PRODUCT {
            return Err(Error::Config(format!(
                "stage ratios {:?} multiply to {product}, expected {REQUIRED_RATIO_PRODUCT}",
                self.network.ratios
            )));
        }
        Ok(())
    }

    /// The holdout scene path, falling back to the first training scene.
    pub fn holdout_path(&self) -> &Path {
        self.holdout.as_deref().unwrap_or(&self.scenes[0])
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_stage_list(value: &str) -> Option<[usize; STAGES]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    parts.try_into().ok()
}

/// Command-line knobs that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub tau: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.network.seed = seed;
        }
        if let Some(k1) = self.k1 {
            cfg.network.k1 = k1;
        }
        if let Some(k2) = self.k2 {
            cfg.network.k2 = k2;
        }
        if let Some(l1) = self.lambda1 {
            cfg.network.lambda1 = l1;
        }
        if let Some(l2) = self.lambda2 {
            cfg.network.lambda2 = l2;
        }
        if let Some(tau) = self.tau {
            cfg.network.tau = tau;
        }
        if let Some(epochs) = self.epochs {
            cfg.training.epochs = epochs;
        }
        if let Some(batch) = self.batch {
            cfg.training.batch_size = batch;
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# a desk-scale run
[paths]
scene = scenes/a.xyz
scene = scenes/b.xyz
holdout = scenes/val.xyz
checkpoint = run/model.ckpt
log = run/log.csv

[network]
classes = 3
ratios = 1, 4, 4, 4, 4
widths = 8, 8, 8, 8, 8
k1 = 4
k2 = 6
eigen_k = 3
lambda1 = 0.3
lambda2 = 0.1
tau = 0.7
seed = 9
use_gcfr = false

[training]
epochs = 5
batch = 2
learning_rate = 0.02
column_points = 512
scale_min = 0.9
scale_max = 1.1
";

    #[test]
    fn sample_config_round_trips_every_field() {
        let cfg = ExperimentConfig::parse(SAMPLE, "/tmp/run/exp.cfg").unwrap();
        assert_eq!(
            cfg.scenes,
            vec![
                PathBuf::from("/tmp/run/scenes/a.xyz"),
                PathBuf::from("/tmp/run/scenes/b.xyz")
            ]
        );
        assert_eq!(cfg.holdout_path(), Path::new("/tmp/run/scenes/val.xyz"));
        assert_eq!(cfg.checkpoint, PathBuf::from("/tmp/run/run/model.ckpt"));
        assert_eq!(cfg.log, Some(PathBuf::from("/tmp/run/run/log.csv")));
        assert_eq!(cfg.network.class_count, 3);
        assert_eq!(cfg.network.ratios, [1, 4, 4, 4, 4]);
        assert_eq!(cfg.network.widths, [8, 8, 8, 8, 8]);
        assert_eq!(cfg.network.k1, 4);
        assert_eq!(cfg.network.lambda1, 0.3);
        assert_eq!(cfg.network.tau, 0.7);
        assert_eq!(cfg.network.seed, 9);
        assert!(!cfg.network.use_gcfr);
        assert!(cfg.network.use_eigen);
        assert_eq!(cfg.training.epochs, 5);
        assert_eq!(cfg.training.batch_size, 2);
        assert_eq!(cfg.training.learning_rate, 0.02);
        assert_eq!(cfg.training.column_points, 512);
        assert_eq!(cfg.training.scale_range, Some((0.9, 1.1)));
        // Untouched defaults survive.
        assert_eq!(cfg.training.batches_per_epoch, 4);
        assert!(cfg.training.rotate);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected_with_line_numbers() {
        let bad_key = "[paths]\nscene = a.xyz\n[network]\nclases = 2\n";
        let e = ExperimentConfig::parse(bad_key, "x.cfg").unwrap_err();
        match e {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("clases"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let bad_section = "[paths]\nscene = a.xyz\n[misc]\nx = 1\n";
        assert!(matches!(
            ExperimentConfig::parse(bad_section, "x.cfg"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn repeated_keys_error_except_scene() {
        let text = "[paths]\nscene = a.xyz\nscene = b.xyz\n[network]\nk1 = 4\nk1 = 5\n";
        assert!(matches!(
            ExperimentConfig::parse(text, "x.cfg"),
            Err(Error::Parse { line: 6, .. })
        ));
    }

    #[test]
    fn off_budget_ratios_are_rejected() {
        let text = "[paths]\nscene = a.xyz\n[network]\nratios = 1,2,2,2,2\n";
        let e = ExperimentConfig::parse(text, "x.cfg").unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e:?}");
    }

    #[test]
    fn overrides_take_precedence_and_revalidate() {
        let text = "[paths]\nscene = a.xyz\n[network]\nk1 = 4\nk2 = 6\neigen_k = 3\nwidths = 8,8,8,8,8\n";
        let mut cfg = ExperimentConfig::parse(text, "x.cfg").unwrap();
        let mut over = Overrides::default();
        over.seed = Some(77);
        over.lambda2 = Some(0.0);
        over.epochs = Some(2);
        over.apply(&mut cfg).unwrap();
        assert_eq!(cfg.network.seed, 77);
        assert_eq!(cfg.network.lambda2, 0.0);
        assert_eq!(cfg.training.epochs, 2);

        // An override that breaks a network invariant is caught.
        let mut bad = Overrides::default();
        bad.k2 = Some(3);
        assert!(bad.apply(&mut cfg).is_err());
    }
}
