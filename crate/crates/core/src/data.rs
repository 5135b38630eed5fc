//! Synthetic shapes, XYZ files, augmentation and train/test splits.
//!
//! Every generator is a pure function of its arguments and seed. Generated
//! clouds are normalized to zero centroid and unit maximum norm. Centrally
//! symmetric shapes are sampled in antipodal pairs so their centroid is
//! exactly zero for even point counts.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub class_label: Option<usize>,
    pub part_labels: Option<Vec<usize>>,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            class_label: None,
            part_labels: None,
            source_id: String::new(),
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::invalid("point cloud has no points"));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "{}: non-finite coordinate",
                self.source_id
            )));
        }
        if let Some(p) = &self.part_labels {
            if p.len() != self.positions.len() {
                return Err(Error::invalid(format!(
                    "{}: {} part labels for {} points",
                    self.source_id,
                    p.len(),
                    self.positions.len()
                )));
            }
        }
        Ok(())
    }

    /// Positions as an `N x 3` constant tensor.
    pub fn positions_tensor(&self) -> Tensor {
        Tensor::raw(vec![self.len(), 3], self.flat_positions())
    }

    pub fn flat_positions(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    /// Reorders points: `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            class_label: self.class_label,
            part_labels: self
                .part_labels
                .as_ref()
                .map(|p| perm.iter().map(|&i| p[i]).collect()),
            source_id: self.source_id.clone(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.positions {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / self.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub part_names: Vec<String>,
    /// Part labels that belong to each class, for part-labeled sets.
    pub class_parts: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// The same metadata with a subset of samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
            class_names: self.class_names.clone(),
            part_names: self.part_names.clone(),
            class_parts: self.class_parts.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.clouds {
            c.validate()?;
            if let Some(l) = c.class_label {
                if l >= self.num_classes() {
                    return Err(Error::invalid(format!(
                        "{}: class label {l} with {} classes",
                        c.source_id,
                        self.num_classes()
                    )));
                }
            }
            if let Some(parts) = &c.part_labels {
                if let Some(&bad) = parts.iter().find(|&&p| p >= self.num_parts()) {
                    return Err(Error::invalid(format!(
                        "{}: part label {bad} with {} parts",
                        c.source_id,
                        self.num_parts()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The eight synthetic classification shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
    LBracket,
    Helix,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Plane,
        ShapeClass::LBracket,
        ShapeClass::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Plane => "plane",
            ShapeClass::LBracket => "l-bracket",
            ShapeClass::Helix => "helix",
        }
    }

    fn centrally_symmetric(self) -> bool {
        matches!(
            self,
            ShapeClass::Sphere
                | ShapeClass::Cube
                | ShapeClass::Cylinder
                | ShapeClass::Torus
                | ShapeClass::Plane
        )
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ShapeClass::ALL.iter().map(|c| c.name()).collect();
                Error::invalid(format!(
                    "unknown shape class {s:?}; valid: {}",
                    names.join(", ")
                ))
            })
    }
}

/// The three part-labeled object classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartClass {
    Hammer,
    Table,
    Lamp,
}

impl PartClass {
    pub const ALL: [PartClass; 3] = [PartClass::Hammer, PartClass::Table, PartClass::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            PartClass::Hammer => "hammer",
            PartClass::Table => "table",
            PartClass::Lamp => "lamp",
        }
    }

    /// Names of this class's parts, in label order.
    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            PartClass::Hammer => &["hammer-head", "hammer-handle"],
            PartClass::Table => &["table-top", "table-legs"],
            PartClass::Lamp => &["lamp-base", "lamp-pole", "lamp-shade"],
        }
    }

    /// First global part label of this class.
    pub fn part_offset(self) -> usize {
        PartClass::ALL
            .iter()
            .take_while(|&&c| c != self)
            .map(|c| c.part_names().len())
            .sum()
    }

    pub fn part_labels(self) -> Vec<usize> {
        let off = self.part_offset();
        (off..off + self.part_names().len()).collect()
    }
}

impl FromStr for PartClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PartClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown part class {s:?}; valid: hammer, table, lamp"
                ))
            })
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

/// Picks a region index with probability proportional to `areas`.
fn pick(rng: &mut ChaCha8Rng, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, a) in areas.iter().enumerate() {
        if u < *a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

/// Uniform point on the surface of an axis-aligned box.
fn box_surface(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    let e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let faces = [
        e[1] * e[2],
        e[1] * e[2],
        e[0] * e[2],
        e[0] * e[2],
        e[0] * e[1],
        e[0] * e[1],
    ];
    let f = pick(rng, &faces);
    let axis = f / 2;
    let mut p = [0.0; 3];
    for d in 0..3 {
        p[d] = if d == axis {
            if f.is_multiple_of(2) {
                lo[d]
            } else {
                hi[d]
            }
        } else {
            rng.gen_range(lo[d]..=hi[d])
        };
    }
    p
}

/// Uniform point on a z-aligned cylinder (lateral surface plus optional
/// caps) of radius `r` centered at `(cx, cy)` spanning `z0..z1`.
fn cylinder_surface(
    rng: &mut ChaCha8Rng,
    c: [f64; 2],
    r: f64,
    z0: f64,
    z1: f64,
    caps: bool,
) -> [f64; 3] {
    let lateral = TAU * r * (z1 - z0);
    let cap = if caps { PI * r * r } else { 0.0 };
    let t = rng.gen_range(0.0..TAU);
    match pick(rng, &[lateral, cap, cap]) {
        0 => [
            c[0] + r * t.cos(),
            c[1] + r * t.sin(),
            rng.gen_range(z0..=z1),
        ],
        region => {
            let rr = r * rng.gen::<f64>().sqrt();
            let z = if region == 1 { z0 } else { z1 };
            [c[0] + rr * t.cos(), c[1] + rr * t.sin(), z]
        }
    }
}

/// Uniform point on a cone with base radius `r` at `z0` and apex at `z1`,
/// optionally including the base disc.
fn cone_surface(rng: &mut ChaCha8Rng, r: f64, z0: f64, z1: f64, base: bool) -> [f64; 3] {
    let h = z1 - z0;
    let slant = (r * r + h * h).sqrt();
    let lateral = PI * r * slant;
    let disc = if base { PI * r * r } else { 0.0 };
    let t = rng.gen_range(0.0..TAU);
    if pick(rng, &[lateral, disc]) == 0 {
        // distance from apex grows with sqrt(u) for uniform area
        let s = rng.gen::<f64>().sqrt();
        let rr = r * s;
        [rr * t.cos(), rr * t.sin(), z1 - h * s]
    } else {
        let rr = r * rng.gen::<f64>().sqrt();
        [rr * t.cos(), rr * t.sin(), z0]
    }
}

fn torus_surface(rng: &mut ChaCha8Rng, big: f64, small: f64) -> [f64; 3] {
    loop {
        let u = rng.gen_range(0.0..TAU);
        let v = rng.gen_range(0.0..TAU);
        let w = (big + small * v.cos()) / (big + small);
        if rng.gen::<f64>() <= w {
            let ring = big + small * v.cos();
            return [ring * u.cos(), ring * u.sin(), small * v.sin()];
        }
    }
}

fn helix_surface(rng: &mut ChaCha8Rng) -> [f64; 3] {
    const RADIUS: f64 = 1.0;
    const PITCH: f64 = 0.15;
    const TUBE: f64 = 0.1;
    const TURNS: f64 = 2.0;
    let speed = (RADIUS * RADIUS + PITCH * PITCH).sqrt();
    let curvature = RADIUS / (speed * speed);
    loop {
        let t = rng.gen_range(0.0..TURNS * TAU);
        let phi = rng.gen_range(0.0..TAU);
        // tube area element scales with 1 - curvature * r * cos(phi)
        let w = (1.0 - curvature * TUBE * phi.cos()) / (1.0 + curvature * TUBE);
        if rng.gen::<f64>() > w {
            continue;
        }
        let (s, c) = t.sin_cos();
        let center = [RADIUS * c, RADIUS * s, PITCH * t];
        let normal = [-c, -s, 0.0];
        let binormal = [PITCH * s / speed, -PITCH * c / speed, RADIUS / speed];
        let (ps, pc) = phi.sin_cos();
        return [
            center[0] + TUBE * (pc * normal[0] + ps * binormal[0]),
            center[1] + TUBE * (pc * normal[1] + ps * binormal[1]),
            center[2] + TUBE * (pc * normal[2] + ps * binormal[2]),
        ];
    }
}

fn l_bracket_surface(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // a floor plate and a wall plate sharing the edge x = 0, z = 0
    if pick(rng, &[2.0, 1.5]) == 0 {
        [rng.gen_range(0.0..=2.0), rng.gen_range(-0.5..=0.5), 0.0]
    } else {
        [0.0, rng.gen_range(-0.5..=0.5), rng.gen_range(0.0..=1.5)]
    }
}

fn sample_shape(class: ShapeClass, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match class {
        ShapeClass::Sphere => unit_vector(rng),
        ShapeClass::Cube => box_surface(rng, [-1.0; 3], [1.0; 3]),
        ShapeClass::Cylinder => cylinder_surface(rng, [0.0, 0.0], 0.5, -1.0, 1.0, true),
        ShapeClass::Cone => cone_surface(rng, 1.0, -1.0, 1.0, true),
        ShapeClass::Torus => torus_surface(rng, 1.0, 0.3),
        ShapeClass::Plane => [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), 0.0],
        ShapeClass::LBracket => l_bracket_surface(rng),
        ShapeClass::Helix => helix_surface(rng),
    }
}

/// Shifts the centroid to the origin and scales the farthest point to
/// norm 1.
fn normalize(points: &mut [[f64; 3]]) {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    let c = c.map(|v| v / n);
    let mut max = 0.0f64;
    for p in points.iter_mut() {
        for d in 0..3 {
            p[d] -= c[d];
        }
        max = max.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if max > 0.0 {
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v /= max;
            }
        }
    }
}

fn check_points(n_points: usize) -> Result<()> {
    if n_points < 16 {
        return Err(Error::invalid(format!(
            "need at least 16 points, got {n_points}"
        )));
    }
    Ok(())
}

/// Samples `n_points` uniformly by area from a synthetic shape.
pub fn generate_shape(class: ShapeClass, n_points: usize, seed: u64) -> Result<PointCloud> {
    check_points(n_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    if class.centrally_symmetric() {
        for _ in 0..n_points / 2 {
            let p = sample_shape(class, &mut rng);
            points.push(p);
            points.push(p.map(|v| -v));
        }
    }
    while points.len() < n_points {
        points.push(sample_shape(class, &mut rng));
    }
    normalize(&mut points);
    Ok(PointCloud {
        positions: points,
        class_label: ShapeClass::ALL.iter().position(|&c| c == class),
        part_labels: None,
        source_id: format!("{}-{seed}", class.name()),
    })
}

type PartSampler = fn(&mut ChaCha8Rng) -> [f64; 3];

fn parts_of(class: PartClass) -> Vec<(f64, PartSampler)> {
    match class {
        PartClass::Hammer => vec![
            // 1.2 x 0.3 x 0.3 head
            (1.62, |r| {
                box_surface(r, [-0.6, -0.15, 0.8], [0.6, 0.15, 1.1])
            }),
            (1.05, |r| {
                cylinder_surface(r, [0.0, 0.0], 0.08, -1.0, 0.8, true)
            }),
        ],
        PartClass::Table => vec![
            (4.56, |r| box_surface(r, [-1.0, -0.6, 0.0], [1.0, 0.6, 0.1])),
            (2.26, |r| {
                let corners = [[-0.85, -0.45], [0.85, -0.45], [-0.85, 0.45], [0.85, 0.45]];
                let c = corners[r.gen_range(0..4)];
                cylinder_surface(r, c, 0.06, -1.2, 0.0, true)
            }),
        ],
        PartClass::Lamp => vec![
            (0.95, |r| {
                cylinder_surface(r, [0.0, 0.0], 0.45, -1.0, -0.9, true)
            }),
            (0.53, |r| {
                cylinder_surface(r, [0.0, 0.0], 0.05, -0.9, 0.6, false)
            }),
            (2.10, |r| {
                let p = cone_surface(r, 0.6, 0.4, 1.1, false);
                [p[0], p[1], p[2]]
            }),
        ],
    }
}

/// Samples a part-labeled object. Points are allocated to parts by surface
/// area with a floor of 10% per part, and sampled uniformly within each part.
pub fn generate_part_labeled(class: PartClass, n_points: usize, seed: u64) -> Result<PointCloud> {
    check_points(n_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = parts_of(class);
    let total_area: f64 = parts.iter().map(|p| p.0).sum();
    let floor = n_points.div_ceil(10);
    let mut counts: Vec<usize> = parts
        .iter()
        .map(|p| ((p.0 / total_area) * n_points as f64).round() as usize)
        .map(|c| c.max(floor))
        .collect();
    // hand any surplus or deficit to the largest part
    let largest = (0..counts.len()).max_by_key(|&i| counts[i]).unwrap_or(0);
    let assigned: usize = counts.iter().sum();
    counts[largest] = (counts[largest] + n_points).saturating_sub(assigned);

    let offset = class.part_offset();
    let mut positions = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for (p, (&count, (_, sampler))) in counts.iter().zip(&parts).enumerate() {
        for _ in 0..count {
            positions.push(sampler(&mut rng));
            labels.push(offset + p);
        }
    }
    // interleave parts so point order carries no label information
    let mut perm: Vec<usize> = (0..positions.len()).collect();
    perm.shuffle(&mut rng);
    let mut positions: Vec<[f64; 3]> = perm.iter().map(|&i| positions[i]).collect();
    let labels = perm.iter().map(|&i| labels[i]).collect();
    normalize(&mut positions);
    Ok(PointCloud {
        positions,
        class_label: PartClass::ALL.iter().position(|&c| c == class),
        part_labels: Some(labels),
        source_id: format!("{}-{seed}", class.name()),
    })
}

/// Seed of the `i`-th sample of class `c` in a generated set.
pub fn sample_seed(seed: u64, class: usize, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((class as u64) << 32)
        .wrapping_add(i as u64)
}

/// `per_class` shapes of each listed class.
pub fn synthetic_classification(
    classes: &[ShapeClass],
    per_class: usize,
    n_points: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut clouds = Vec::with_capacity(classes.len() * per_class);
    for (ci, &class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let mut c = generate_shape(class, n_points, sample_seed(seed, ci, i))?;
            c.class_label = Some(ci);
            clouds.push(c);
        }
    }
    Ok(Dataset {
        clouds,
        class_names: classes.iter().map(|c| c.name().to_string()).collect(),
        part_names: Vec::new(),
        class_parts: Vec::new(),
    })
}

/// `per_class` objects of each part-labeled class, with the global part
/// label space of all three classes.
pub fn synthetic_parts(per_class: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    let mut clouds = Vec::new();
    for (ci, &class) in PartClass::ALL.iter().enumerate() {
        for i in 0..per_class {
            clouds.push(generate_part_labeled(
                class,
                n_points,
                sample_seed(seed, ci, i),
            )?);
        }
    }
    Ok(Dataset {
        clouds,
        class_names: PartClass::ALL
            .iter()
            .map(|c| c.name().to_string())
            .collect(),
        part_names: PartClass::ALL
            .iter()
            .flat_map(|c| c.part_names().iter().map(|s| s.to_string()))
            .collect(),
        class_parts: PartClass::ALL.iter().map(|c| c.part_labels()).collect(),
    })
}

/// Writes one point per line as `x y z [label]`, 9 significant digits.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, p) in cloud.positions.iter().enumerate() {
        write!(w, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2])?;
        if let Some(labels) = &cloud.part_labels {
            write!(w, " {}", labels[i])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut positions = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(
                ln + 1,
                format!("expected 3 or 4 fields, got {}", fields.len()),
            ));
        }
        let mut p = [0.0; 3];
        for d in 0..3 {
            p[d] = fields[d]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(ln + 1, format!("bad coordinate {:?}", fields[d])))?;
        }
        let has_label = fields.len() == 4;
        match (&mut labels, positions.is_empty(), has_label) {
            (None, true, true) => labels = Some(Vec::new()),
            (None, false, true) | (Some(_), _, false) => {
                return Err(err(
                    ln + 1,
                    "label column present on some lines only".into(),
                ))
            }
            _ => {}
        }
        if let Some(l) = labels.as_mut() {
            l.push(
                fields[3]
                    .parse()
                    .map_err(|_| err(ln + 1, format!("bad label {:?}", fields[3])))?,
            );
        }
        positions.push(p);
    }
    if positions.is_empty() {
        return Err(err(0, "no points".into()));
    }
    Ok(PointCloud {
        positions,
        class_label: None,
        part_labels: labels,
        source_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    })
}

/// Writes `path,class_label` lines, preceded by `# classes = ...` and
/// `# parts = ...` comments. Cloud files are named after their position.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.txt");
    let mut w = BufWriter::new(fs::File::create(&manifest)?);
    writeln!(w, "# classes = {}", dataset.class_names.join(","))?;
    if !dataset.part_names.is_empty() {
        writeln!(w, "# parts = {}", dataset.part_names.join(","))?;
        let groups: Vec<String> = dataset
            .class_parts
            .iter()
            .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect();
        writeln!(w, "# class_parts = {}", groups.join(","))?;
    }
    for (i, cloud) in dataset.clouds.iter().enumerate() {
        let name = format!("{i:05}_{}.xyz", cloud.source_id);
        save_xyz(cloud, &dir.join(&name))?;
        let label = cloud.class_label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(w, "{name},{label}")?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut ds = Dataset::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                let list = || {
                    value
                        .trim()
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                };
                match key.trim() {
                    "classes" => ds.class_names = list().collect(),
                    "parts" => ds.part_names = list().collect(),
                    "class_parts" => {
                        ds.class_parts = list()
                            .map(|g| {
                                g.split_whitespace()
                                    .map(str::parse)
                                    .collect::<std::result::Result<Vec<usize>, _>>()
                            })
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| err(ln + 1, "bad class_parts".into()))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| err(ln + 1, "expected path,class_label".into()))?;
        let mut cloud = load_xyz(&base.join(file.trim()))?;
        let label = label.trim();
        if !label.is_empty() {
            cloud.class_label = Some(
                label
                    .parse()
                    .map_err(|_| err(ln + 1, format!("bad class label {label:?}")))?,
            );
        }
        ds.clouds.push(cloud);
    }
    if ds.class_names.is_empty() {
        let max = ds.clouds.iter().filter_map(|c| c.class_label).max();
        ds.class_names = (0..max.map_or(0, |m| m + 1))
            .map(|i| format!("class{i}"))
            .collect();
    }
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOptions {
    pub rotate_z: bool,
    /// Per-point Gaussian displacement, clipped in norm at 3 sigma.
    pub jitter_sigma: f64,
    pub scale_range: Option<(f64, f64)>,
}

impl AugmentOptions {
    pub fn none() -> Self {
        AugmentOptions {
            rotate_z: false,
            jitter_sigma: 0.0,
            scale_range: None,
        }
    }
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            rotate_z: true,
            jitter_sigma: 0.01,
            scale_range: Some((0.8, 1.25)),
        }
    }
}

/// Rotates about z, scales uniformly, then jitters; labels are untouched.
pub fn augment(cloud: &PointCloud, seed: u64, opts: &AugmentOptions) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    if opts.rotate_z {
        let (s, c) = rng.gen_range(0.0..TAU).sin_cos();
        for p in &mut out.positions {
            *p = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
        }
    }
    if let Some((lo, hi)) = opts.scale_range {
        let f = rng.gen_range(lo..=hi);
        for p in &mut out.positions {
            *p = p.map(|v| v * f);
        }
    }
    if opts.jitter_sigma > 0.0 {
        let limit = 3.0 * opts.jitter_sigma;
        for p in &mut out.positions {
            let mut d = [0.0; 3];
            for v in &mut d {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = opts.jitter_sigma * z;
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let shrink = if norm > limit { limit / norm } else { 1.0 };
            for k in 0..3 {
                p[k] += d[k] * shrink;
            }
        }
    }
    out
}

/// Train/test indices: one random sample per class first, then a uniform
/// fill from the rest up to `round(fraction * len)` training samples.
pub fn split_indices(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} not in (0, 1]"
        )));
    }
    let labels: Vec<usize> = dataset
        .clouds
        .iter()
        .map(|c| {
            c.class_label
                .ok_or_else(|| Error::invalid(format!("{} has no class label", c.source_id)))
        })
        .collect::<Result<_>>()?;
    let mut present: Vec<usize> = labels.clone();
    present.sort_unstable();
    present.dedup();
    let target = (train_fraction * dataset.len() as f64).round() as usize;
    if target < present.len() {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} gives {target} samples, fewer than the {} classes",
            present.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; dataset.len()];
    for &class in &present {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        in_train[*members.choose(&mut rng).expect("class is present")] = true;
    }
    let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| !in_train[i]).collect();
    rest.shuffle(&mut rng);
    for &i in rest.iter().take(target - present.len()) {
        in_train[i] = true;
    }
    let train = (0..labels.len()).filter(|&i| in_train[i]).collect();
    let test = (0..labels.len()).filter(|&i| !in_train[i]).collect();
    Ok((train, test))
}

pub fn make_split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset, train_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
