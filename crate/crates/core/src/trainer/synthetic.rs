//! Procedural primitive-shape corpus for desk-scale runs.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::manifest::{LoadedObject, Manifest, ManifestEntry, Split, ViewInput};
use crate::numkit::io::write_tensor;
use crate::numkit::param_seed;
use crate::pointbranch::{farthest_point_sample, PointCloud};
use crate::viewbranch::render_views;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
}

impl Primitive {
    pub const ALL: [Primitive; 5] = [
        Primitive::Sphere,
        Primitive::Box,
        Primitive::Cylinder,
        Primitive::Torus,
        Primitive::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
            Primitive::Torus => "torus",
            Primitive::Cone => "cone",
        }
    }

    /// A point on the canonical surface. Shapes are symmetric about Z and
    /// fit in `[-1, 1]³`.
    fn sample(self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            Primitive::Sphere => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            },
            Primitive::Box => {
                let face = rng.random_range(0..6);
                let a = rng.random_range(-1.0..1.0);
                let b = rng.random_range(-1.0..1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Primitive::Cylinder => {
                let phi = rng.random_range(0.0..TAU);
                // Side area 4π against 2π for both caps.
                if rng.random_bool(2.0 / 3.0) {
                    [phi.cos(), phi.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    [r * phi.cos(), r * phi.sin(), z]
                }
            }
            Primitive::Torus => {
                const MAJOR: f64 = 0.7;
                const MINOR: f64 = 0.3;
                loop {
                    let u = rng.random_range(0.0..TAU);
                    let v = rng.random_range(0.0..TAU);
                    let w = (MAJOR + MINOR * v.cos()) / (MAJOR + MINOR);
                    if rng.random::<f64>() <= w {
                        let ring = MAJOR + MINOR * v.cos();
                        break [ring * u.cos(), ring * u.sin(), MINOR * v.sin()];
                    }
                }
            }
            Primitive::Cone => {
                let phi = rng.random_range(0.0..TAU);
                let slant = 5f64.sqrt();
                if rng.random_bool(slant / (1.0 + slant)) {
                    // Radius shrinks linearly towards the apex.
                    let t = 1.0 - rng.random::<f64>().sqrt();
                    let r = 1.0 - t;
                    [r * phi.cos(), r * phi.sin(), -1.0 + 2.0 * t]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    [r * phi.cos(), r * phi.sin(), -1.0]
                }
            }
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown primitive `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<Primitive>,
    pub instances_per_class: usize,
    pub jitter_sigma: f64,
    /// Independent horizontal and vertical scale factors are drawn from this range.
    pub scale_range: (f64, f64),
    pub points_n: usize,
    pub views_m: usize,
    pub resolution: usize,
    /// Dense surface samples per object, used for rendering and as the FPS pool.
    pub surface_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: Primitive::ALL.to_vec(),
            instances_per_class: 40,
            jitter_sigma: 0.01,
            scale_range: (0.7, 1.3),
            points_n: 1024,
            views_m: 12,
            resolution: 32,
            surface_samples: 4096,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.classes.is_empty() || self.instances_per_class == 0 {
            return bad("corpus needs at least one class and one instance".into());
        }
        if self.points_n < 2 || self.points_n > self.surface_samples {
            return bad(format!(
                "points_n ({}) must lie in [2, surface_samples = {}]",
                self.points_n, self.surface_samples
            ));
        }
        if self.views_m == 0 || 360 % self.views_m != 0 {
            return bad(format!("views_m ({}) must divide 360", self.views_m));
        }
        if self.resolution == 0 {
            return bad("resolution must be positive".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("invalid scale range ({lo}, {hi})"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Stable identifier of the `index`-th instance of a class.
pub fn object_id(class: Primitive, index: usize) -> String {
    format!("{}_{index:04}", class.name())
}

/// Within each class, the 20% of ids with the smallest hash go to test.
fn split_class(ids: &[String]) -> Vec<Split> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (param_seed(0, &ids[i]), i));
    let n_test = (ids.len() as f64 * 0.2).round() as usize;
    let mut splits = vec![Split::Train; ids.len()];
    for &i in &order[..n_test] {
        splits[i] = Split::Test;
    }
    splits
}

fn synthesize_one(spec: &SyntheticSpec, class: Primitive, id: &str) -> Result<(PointCloud, ViewInput)> {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(spec.seed, id));
    let (lo, hi) = spec.scale_range;
    let mut scale = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (sh, sv) = (scale(), scale());
    let jitter = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::contract(e.to_string()))?;
    let dense: Vec<[f64; 3]> = (0..spec.surface_samples)
        .map(|_| {
            let p = class.sample(&mut rng);
            [
                p[0] * sh + jitter.sample(&mut rng),
                p[1] * sh + jitter.sample(&mut rng),
                p[2] * sv + jitter.sample(&mut rng),
            ]
        })
        .collect();
    let dense = PointCloud::new(id, dense)?.normalized();
    let views = render_views(&dense, spec.views_m, spec.resolution, spec.resolution)?;
    let picked = farthest_point_sample(dense.points(), spec.points_n)?;
    Ok((dense.select(&picked), ViewInput::Images(views)))
}

/// Builds the corpus in memory, in class-major order.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<LoadedObject>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (label, &class) in spec.classes.iter().enumerate() {
        let ids: Vec<String> = (0..spec.instances_per_class).map(|i| object_id(class, i)).collect();
        let splits = split_class(&ids);
        for (id, split) in ids.iter().zip(splits) {
            let (cloud, views) = synthesize_one(spec, class, id)?;
            out.push(LoadedObject {
                object_id: id.clone(),
                label: label as u32,
                split,
                cloud,
                views,
            });
        }
    }
    Ok(out)
}

/// Writes `points/<id>.pvt`, `views/<id>.pvt` and `manifest.tsv` under `out`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let objects = synthesize(spec)?;
    for sub in ["points", "views"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(objects.len());
    for obj in &objects {
        let points = PathBuf::from("points").join(format!("{}.pvt", obj.object_id));
        let views = PathBuf::from("views").join(format!("{}.pvt", obj.object_id));
        write_tensor(out.join(&points), &obj.cloud.to_tensor())?;
        if let ViewInput::Images(v) = &obj.views {
            write_tensor(out.join(&views), v.images())?;
        }
        entries.push(ManifestEntry {
            object_id: obj.object_id.clone(),
            label: obj.label,
            split: obj.split,
            points,
            views,
            precomputed_views: false,
        });
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.write(out.join("manifest.tsv"))?;
    Ok(manifest)
}
