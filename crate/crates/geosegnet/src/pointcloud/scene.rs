//! Synthetic room scenes: a floor (plus optional walls) and axis-aligned
//! box objects, sampled on their surfaces at a fixed density.
//!
//! Scene specs are flat `key = value` text with one `[object]` block per
//! box; see `SceneSpec::parse` for the accepted keys.  Generation is
//! bitwise deterministic for a given spec (one seeded RNG stream, fixed
//! sampling order).

use super::LabeledCloud;
use crate::error::{Error, Result};
use crate::geom::{add, scale, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Axis-aligned box sampled on all six faces.
#[derive(Debug, Clone)]
pub struct BoxObject {
    pub class: usize,
    pub color: Vec3,
    pub min: Vec3,
    pub max: Vec3,
}

impl BoxObject {
    fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Room size in meters (x extent, y extent, z height).
    pub extent: Vec3,
    /// Surface sampling density in points per square meter.
    pub density: f64,
    /// Std-dev of Gaussian noise added to each color channel.
    pub color_noise: f64,
    /// Std-dev of Gaussian positional jitter (applied after labeling).
    pub jitter: f64,
    pub seed: u64,
    pub floor_class: usize,
    pub floor_color: Vec3,
    /// Wall height in meters; 0 disables walls.
    pub wall_height: f64,
    pub wall_class: usize,
    pub wall_color: Vec3,
    /// Total class count; defaults to the largest used label + 1.
    pub class_count: Option<usize>,
    pub objects: Vec<BoxObject>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: [4.0, 4.0, 3.0],
            density: 100.0,
            color_noise: 0.02,
            jitter: 0.0,
            seed: 0,
            floor_class: 0,
            floor_color: [0.6, 0.6, 0.6],
            wall_height: 0.0,
            wall_class: 0,
            wall_color: [0.8, 0.8, 0.8],
            class_count: None,
            objects: Vec::new(),
        }
    }
}

fn parse_floats<const N: usize>(value: &str) -> Option<[f64; N]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != N {
        return None;
    }
    let mut out = [0.0f64; N];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.parse().ok()?;
        if !out[i].is_finite() {
            return None;
        }
    }
    Some(out)
}

impl SceneSpec {
    /// Parses the scene spec grammar.
    ///
    /// Top-level keys: `extent` (3 numbers), `density`, `color_noise`,
    /// `jitter`, `seed`, `floor_class`, `floor_color` (3), `wall_height`,
    /// `wall_class`, `wall_color` (3), `class_count`.  Each `[object]`
    /// block takes `class`, `color` (3), `min` (3), `max` (3).  Unknown
    /// keys are errors.
    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<SceneSpec> {
        let path = path.as_ref();
        let mut spec = SceneSpec::default();
        // (class, color, min, max) for the object being parsed.
        let mut obj: Option<(Option<usize>, Vec3, Option<Vec3>, Option<Vec3>)> = None;

        fn finish_obj(
            obj: Option<(Option<usize>, Vec3, Option<Vec3>, Option<Vec3>)>,
            spec: &mut SceneSpec,
            path: &Path,
            line: usize,
        ) -> Result<()> {
            if let Some((class, color, min, max)) = obj {
                let class = class
                    .ok_or_else(|| Error::parse(path, line, "[object] missing `class`"))?;
                let min = min.ok_or_else(|| Error::parse(path, line, "[object] missing `min`"))?;
                let max = max.ok_or_else(|| Error::parse(path, line, "[object] missing `max`"))?;
                if (0..3).any(|d| min[d] > max[d]) {
                    return Err(Error::parse(path, line, "[object] min exceeds max"));
                }
                spec.objects.push(BoxObject {
                    class,
                    color,
                    min,
                    max,
                });
            }
            Ok(())
        }

        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if line == "[object]" {
                finish_obj(obj.take(), &mut spec, path, lineno + 1)?;
                obj = Some((None, [0.5, 0.5, 0.5], None, None));
                continue;
            }
            if line.starts_with('[') {
                return Err(Error::parse(path, lineno + 1, format!("unknown section {line}")));
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(path, lineno + 1, format!("expected `key = value`, got {line:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad_value =
                || Error::parse(path, lineno + 1, format!("bad value for {key}: {value:?}"));

            if let Some(o) = obj.as_mut() {
                match key {
                    "class" => o.0 = Some(value.parse().map_err(|_| bad_value())?),
                    "color" => o.1 = parse_floats::<3>(value).ok_or_else(bad_value)?,
                    "min" => o.2 = Some(parse_floats::<3>(value).ok_or_else(bad_value)?),
                    "max" => o.3 = Some(parse_floats::<3>(value).ok_or_else(bad_value)?),
                    _ => {
                        return Err(Error::parse(
                            path,
                            lineno + 1,
                            format!("unknown [object] key `{key}`"),
                        ))
                    }
                }
                continue;
            }
            match key {
                "extent" => spec.extent = parse_floats::<3>(value).ok_or_else(bad_value)?,
                "density" => spec.density = value.parse().map_err(|_| bad_value())?,
                "color_noise" => spec.color_noise = value.parse().map_err(|_| bad_value())?,
                "jitter" => spec.jitter = value.parse().map_err(|_| bad_value())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad_value())?,
                "floor_class" => spec.floor_class = value.parse().map_err(|_| bad_value())?,
                "floor_color" => spec.floor_color = parse_floats::<3>(value).ok_or_else(bad_value)?,
                "wall_height" => spec.wall_height = value.parse().map_err(|_| bad_value())?,
                "wall_class" => spec.wall_class = value.parse().map_err(|_| bad_value())?,
                "wall_color" => spec.wall_color = parse_floats::<3>(value).ok_or_else(bad_value)?,
                "class_count" => {
                    spec.class_count = Some(value.parse().map_err(|_| bad_value())?)
                }
                _ => {
                    return Err(Error::parse(path, lineno + 1, format!("unknown key `{key}`")));
                }
            }
        }
        finish_obj(obj.take(), &mut spec, path, text.lines().count())?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SceneSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SceneSpec::parse(&text, path)
    }
}

/// One sampled rectangle: origin plus two edge vectors.
struct Face {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    class: usize,
    color: Vec3,
}

impl Face {
    fn area(&self) -> f64 {
        let len = |e: Vec3| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        len(self.u) * len(self.v)
    }
}

fn box_faces(b: &BoxObject) -> Vec<Face> {
    let [x0, y0, z0] = b.min;
    let [x1, y1, z1] = b.max;
    let (dx, dy, dz) = (x1 - x0, y1 - y0, z1 - z0);
    let f = |origin: Vec3, u: Vec3, v: Vec3| Face {
        origin,
        u,
        v,
        class: b.class,
        color: b.color,
    };
    vec![
        f([x0, y0, z0], [dx, 0.0, 0.0], [0.0, dy, 0.0]), // bottom
        f([x0, y0, z1], [dx, 0.0, 0.0], [0.0, dy, 0.0]), // top
        f([x0, y0, z0], [dx, 0.0, 0.0], [0.0, 0.0, dz]), // y = min
        f([x0, y1, z0], [dx, 0.0, 0.0], [0.0, 0.0, dz]), // y = max
        f([x0, y0, z0], [0.0, dy, 0.0], [0.0, 0.0, dz]), // x = min
        f([x1, y0, z0], [0.0, dy, 0.0], [0.0, 0.0, dz]), // x = max
    ]
}

/// Samples the scene's surfaces.  Point count per face is
/// `round(area * density)`; a point's label follows its surface unless a
/// later-listed object box contains it, in which case the last such
/// object wins (its base color too, so appearance tracks the label).
pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledCloud> {
    if spec.extent[0] <= 0.0 || spec.extent[1] <= 0.0 || spec.extent[2] < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "extent must be positive: {:?}",
            spec.extent
        )));
    }
    if !(spec.density > 0.0) {
        return Err(Error::InvalidArgument("density must be positive".into()));
    }
    if spec.color_noise < 0.0 || spec.jitter < 0.0 || spec.wall_height < 0.0 {
        return Err(Error::InvalidArgument(
            "color_noise / jitter / wall_height must be non-negative".into(),
        ));
    }

    let [w, d, _] = spec.extent;
    let h = spec.wall_height;
    let mut faces = vec![Face {
        origin: [0.0, 0.0, 0.0],
        u: [w, 0.0, 0.0],
        v: [0.0, d, 0.0],
        class: spec.floor_class,
        color: spec.floor_color,
    }];
    if h > 0.0 {
        let wall = |origin: Vec3, u: Vec3| Face {
            origin,
            u,
            v: [0.0, 0.0, h],
            class: spec.wall_class,
            color: spec.wall_color,
        };
        faces.push(wall([0.0, 0.0, 0.0], [w, 0.0, 0.0]));
        faces.push(wall([0.0, d, 0.0], [w, 0.0, 0.0]));
        faces.push(wall([0.0, 0.0, 0.0], [0.0, d, 0.0]));
        faces.push(wall([w, 0.0, 0.0], [0.0, d, 0.0]));
    }
    for b in &spec.objects {
        faces.extend(box_faces(b));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let color_noise = Normal::new(0.0, spec.color_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let jitter = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for face in &faces {
        let count = (face.area() * spec.density).round() as usize;
        for _ in 0..count {
            let a: f64 = rng.gen();
            let b: f64 = rng.gen();
            let p = add(face.origin, add(scale(face.u, a), scale(face.v, b)));
            let mut label = face.class;
            let mut base = face.color;
            for obj in &spec.objects {
                if obj.contains(p) {
                    label = obj.class;
                    base = obj.color;
                }
            }
            let mut color = base;
            if spec.color_noise > 0.0 {
                for c in color.iter_mut() {
                    *c = (*c + color_noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let mut pos = p;
            if spec.jitter > 0.0 {
                for v in pos.iter_mut() {
                    *v += jitter.sample(&mut rng);
                }
            }
            positions.push(pos);
            colors.push(color);
            labels.push(label);
        }
    }
    if positions.is_empty() {
        return Err(Error::InvalidArgument(
            "scene produced no points (density too low?)".into(),
        ));
    }

    let max_label = labels.iter().copied().max().unwrap();
    let class_count = match spec.class_count {
        Some(c) => {
            if max_label >= c {
                return Err(Error::ClassCountMismatch {
                    expected: c,
                    actual: max_label + 1,
                });
            }
            c
        }
        None => max_label + 1,
    };
    LabeledCloud::new(positions, colors, labels, class_count)
}
