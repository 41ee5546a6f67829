//! Procedural multi-view dataset: stacks of coloured cubes and spheres
//! ray-cast from an orbit of cameras at fixed elevation, with templated
//! captions.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{read_image, write_image, ImageGrid};
use crate::metrics::cross_view_consistency;

pub const DEFAULT_VIEWS: usize = 8;
pub const DEFAULT_ELEVATION_DEG: f64 = 30.0;
pub const DEFAULT_RESOLUTION: usize = 32;

/// Ambient term of the headlight shading; keeps every lit colour's hue readable.
pub const AMBIENT: f64 = 0.6;
const CAMERA_DISTANCE: f64 = 4.0;
const FOV_DEG: f64 = 36.0;
const MAX_STACK_HEIGHT: f64 = 1.7;

pub const PALETTE_NAMES: [&str; 12] = [
    "red", "orange", "yellow", "lime", "green", "mint", "cyan", "azure", "blue", "violet",
    "purple", "pink",
];

/// Palette colours: twelve hues 30 degrees apart at fixed saturation and value.
pub fn palette() -> [[f64; 3]; 12] {
    std::array::from_fn(|i| hsv_to_rgb(30.0 * i as f64, 0.85, 0.9))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Cube,
    Sphere,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Cube => "cube",
            Shape::Sphere => "sphere",
        }
    }

    fn from_name(s: &str) -> Option<Shape> {
        match s {
            "cube" => Some(Shape::Cube),
            "sphere" => Some(Shape::Sphere),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Index into [`PALETTE_NAMES`].
    pub color: usize,
    /// Half-extent for cubes, radius for spheres.
    pub size: f64,
}

/// One to three primitives stacked bottom to top on the vertical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: u32,
    pub prims: Vec<Primitive>,
}

impl ObjectSpec {
    pub fn random(id: u32, rng: &mut impl Rng) -> Self {
        let n = rng.random_range(1..=3);
        let mut prims: Vec<Primitive> = (0..n)
            .map(|_| Primitive {
                shape: if rng.random_bool(0.5) { Shape::Cube } else { Shape::Sphere },
                color: rng.random_range(0..PALETTE_NAMES.len()),
                size: rng.random_range(0.22..0.42),
            })
            .collect();
        let height: f64 = prims.iter().map(|p| 2.0 * p.size).sum();
        if height > MAX_STACK_HEIGHT {
            let k = MAX_STACK_HEIGHT / height;
            prims.iter_mut().for_each(|p| p.size *= k);
        }
        ObjectSpec { id, prims }
    }

    /// Centres of the stacked primitives, bottom first, stack centred at the origin.
    pub fn centers(&self) -> Vec<[f64; 3]> {
        let height: f64 = self.prims.iter().map(|p| 2.0 * p.size).sum();
        let mut y = -height / 2.0;
        self.prims
            .iter()
            .map(|p| {
                let c = [0.0, y + p.size, 0.0];
                y += 2.0 * p.size;
                c
            })
            .collect()
    }

    /// One primitive per line: `shape color size`.
    pub fn to_text(&self) -> String {
        self.prims
            .iter()
            .map(|p| format!("{} {} {:.17}\n", p.shape.name(), PALETTE_NAMES[p.color], p.size))
            .collect()
    }

    pub fn from_text(id: u32, text: &str) -> Result<Self> {
        let mut prims = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<_> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("bad spec line {line:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            prims.push(Primitive {
                shape: Shape::from_name(parts[0]).ok_or_else(bad)?,
                color: color_index(parts[1]).ok_or_else(bad)?,
                size: parts[2].parse().map_err(|_| bad())?,
            });
        }
        if prims.is_empty() || prims.len() > 3 {
            return Err(Error::Format(format!("spec must list 1-3 primitives, got {}", prims.len())));
        }
        Ok(ObjectSpec { id, prims })
    }
}

fn color_index(name: &str) -> Option<usize> {
    PALETTE_NAMES.iter().position(|&n| n == name)
}

/// `a {color} {shape}`, `... with a {color} {shape} on top`, or
/// `... with a {color} {shape} and a {color} {shape} on top`, bottom first.
pub fn make_caption(spec: &ObjectSpec) -> String {
    let np = |p: &Primitive| format!("a {} {}", PALETTE_NAMES[p.color], p.shape.name());
    match spec.prims.as_slice() {
        [a] => np(a),
        [a, b] => format!("{} with {} on top", np(a), np(b)),
        [a, b, c] => format!("{} with {} and {} on top", np(a), np(b), np(c)),
        _ => String::new(),
    }
}

/// Recovers the bottom-to-top `(color, shape)` list from a caption.
pub fn parse_caption(caption: &str) -> Result<Vec<(usize, Shape)>> {
    let bad = || Error::Format(format!("unparseable caption {caption:?}"));
    let body = caption.strip_suffix(" on top").unwrap_or(caption);
    let has_top = body.len() != caption.len();
    let mut phrases: Vec<&str> = Vec::new();
    match body.split_once(" with ") {
        Some((first, rest)) if has_top => {
            phrases.push(first);
            match rest.split_once(" and ") {
                Some((b, c)) => {
                    phrases.push(b);
                    phrases.push(c);
                }
                None => phrases.push(rest),
            }
        }
        None if !has_top => phrases.push(body),
        _ => return Err(bad()),
    }
    phrases
        .into_iter()
        .map(|p| {
            let words: Vec<_> = p.split(' ').collect();
            match words.as_slice() {
                ["a", color, shape] => Ok((
                    color_index(color).ok_or_else(bad)?,
                    Shape::from_name(shape).ok_or_else(bad)?,
                )),
                _ => Err(bad()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub images: Vec<ImageGrid>,
    pub azimuths_deg: Vec<f64>,
    pub elevation_deg: f64,
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Nearest hit `(t, normal)` of a ray with a primitive.
fn intersect(prim: &Primitive, center: V3, origin: V3, dir: V3) -> Option<(f64, V3)> {
    let oc = sub(origin, center);
    match prim.shape {
        Shape::Sphere => {
            let b = dot(oc, dir);
            let c = dot(oc, oc) - prim.size * prim.size;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
            let n = sub(p, center);
            Some((t, [n[0] / prim.size, n[1] / prim.size, n[2] / prim.size]))
        }
        Shape::Cube => {
            let s = prim.size;
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut normal = [0.0; 3];
            for axis in 0..3 {
                if dir[axis] == 0.0 {
                    if oc[axis].abs() > s {
                        return None;
                    }
                    continue;
                }
                let t1 = (-s - oc[axis]) / dir[axis];
                let t2 = (s - oc[axis]) / dir[axis];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    normal = [0.0; 3];
                    normal[axis] = -dir[axis].signum();
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= 0.0 {
                return None;
            }
            Some((t_near, normal))
        }
    }
}

/// Perspective ray-cast of `spec` from `n_views` azimuths evenly spaced over
/// 360 degrees at a fixed elevation. Lambertian shading from a headlight, no
/// shadows, white background.
pub fn render_views(
    spec: &ObjectSpec,
    n_views: usize,
    elevation_deg: f64,
    resolution: usize,
) -> Result<ViewSet> {
    if n_views == 0 || resolution == 0 {
        return Err(Error::Config("render needs at least one view and pixel".into()));
    }
    let colors = palette();
    let centers = spec.centers();
    let (sin_el, cos_el) = sin_cos_deg(elevation_deg);
    let half = (FOV_DEG / 2.0).to_radians().tan();
    let mut images = Vec::with_capacity(n_views);
    let mut azimuths = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let az = 360.0 * v as f64 / n_views as f64;
        let (sin_az, cos_az) = sin_cos_deg(az);
        let eye = [
            CAMERA_DISTANCE * cos_el * sin_az,
            CAMERA_DISTANCE * sin_el,
            CAMERA_DISTANCE * cos_el * cos_az,
        ];
        let fwd = normalize([-eye[0], -eye[1], -eye[2]]);
        let right = normalize(cross(fwd, [0.0, 1.0, 0.0]));
        let up = cross(right, fwd);
        let mut img = ImageGrid::filled(resolution, resolution, [1.0; 3]);
        for row in 0..resolution {
            for col in 0..resolution {
                let x = ((col as f64 + 0.5) / resolution as f64 * 2.0 - 1.0) * half;
                let y = (1.0 - (row as f64 + 0.5) / resolution as f64 * 2.0) * half;
                let dir = normalize([
                    fwd[0] + x * right[0] + y * up[0],
                    fwd[1] + x * right[1] + y * up[1],
                    fwd[2] + x * right[2] + y * up[2],
                ]);
                let mut best: Option<(f64, V3, usize)> = None;
                for (i, (prim, c)) in spec.prims.iter().zip(&centers).enumerate() {
                    if let Some((t, n)) = intersect(prim, *c, eye, dir) {
                        if best.is_none_or(|b| t < b.0) {
                            best = Some((t, n, i));
                        }
                    }
                }
                if let Some((_, n, i)) = best {
                    let lambert = (-dot(n, dir)).max(0.0);
                    let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                    let base = colors[spec.prims[i].color];
                    img.set_pixel(row, col, &[base[0] * shade, base[1] * shade, base[2] * shade]);
                }
            }
        }
        images.push(img);
        azimuths.push(az);
    }
    Ok(ViewSet {
        images,
        azimuths_deg: azimuths,
        elevation_deg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 90/10 train/held-out partition by FNV-1a hash of the object id.
pub fn split_for(id: u32) -> Split {
    let mut h: u32 = 0x811c_9dc5;
    for b in id.to_le_bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    if h.is_multiple_of(10) {
        Split::Heldout
    } else {
        Split::Train
    }
}

/// A rendered object with its caption and the frame chosen as reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub spec: ObjectSpec,
    pub caption: String,
    pub views: Vec<ImageGrid>,
    pub ref_index: usize,
    pub split: Split,
}

impl ObjectRecord {
    pub fn id(&self) -> u32 {
        self.spec.id
    }

    pub fn reference(&self) -> &ImageGrid {
        &self.views[self.ref_index]
    }

    /// Frames at +90, +180 and +270 degrees from the reference.
    pub fn i2mv_targets(&self) -> Vec<&ImageGrid> {
        let n = self.views.len();
        (1..=3).map(|k| &self.views[(self.ref_index + k * n / 4) % n]).collect()
    }

    /// Frames at 0, 90, 180 and 270 degrees azimuth.
    pub fn t2mv_targets(&self) -> Vec<&ImageGrid> {
        let n = self.views.len();
        (0..4).map(|k| &self.views[k * n / 4]).collect()
    }
}

/// Minimum palette-histogram agreement across an object's own views. Specs
/// below it (a cube whose silhouette swings a lot against a small partner)
/// are redrawn.
pub const MIN_SELF_CONSISTENCY: f64 = 0.95;

/// Renders `n_objects` objects deterministically from `seed`.
pub fn generate_objects(n_objects: usize, seed: u64) -> Result<Vec<ObjectRecord>> {
    if n_objects == 0 {
        return Err(Error::Config("dataset needs at least one object".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_objects as u32)
        .map(|id| {
            let (spec, views) = loop {
                let spec = ObjectSpec::random(id, &mut rng);
                let views =
                    render_views(&spec, DEFAULT_VIEWS, DEFAULT_ELEVATION_DEG, DEFAULT_RESOLUTION)?;
                if cross_view_consistency(&views.images)? >= MIN_SELF_CONSISTENCY {
                    break (spec, views);
                }
            };
            let ref_index = rng.random_range(0..DEFAULT_VIEWS);
            Ok(ObjectRecord {
                caption: make_caption(&spec),
                views: views.images,
                ref_index,
                split: split_for(id),
                spec,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub object_id: u32,
    pub split: String,
    pub caption: String,
    pub ref_index: usize,
    /// View paths relative to the dataset directory.
    pub views: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

fn object_dir(id: u32) -> String {
    format!("obj_{id:05}")
}

/// Writes every object's views (PPM), caption and spec under `out_dir`, plus
/// `manifest.csv`.
pub fn build_dataset(n_objects: usize, seed: u64, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let objects = generate_objects(n_objects, seed)?;
    write_dataset(&objects, out_dir)
}

pub fn write_dataset(objects: &[ObjectRecord], out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(objects.len());
    for obj in objects {
        let rel = object_dir(obj.id());
        let dir = out_dir.join(&rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut views = Vec::with_capacity(obj.views.len());
        for (k, img) in obj.views.iter().enumerate() {
            let name = format!("view{k}.ppm");
            write_image(dir.join(&name), img)?;
            views.push(format!("{rel}/{name}"));
        }
        let cap = dir.join("caption.txt");
        fs::write(&cap, format!("{}\n", obj.caption)).map_err(|e| Error::io(&cap, e))?;
        let spec = dir.join("spec.txt");
        fs::write(&spec, obj.spec.to_text()).map_err(|e| Error::io(&spec, e))?;
        entries.push(ManifestEntry {
            object_id: obj.id(),
            split: obj.split.name().to_string(),
            caption: obj.caption.clone(),
            ref_index: obj.ref_index,
            views,
        });
    }
    let path = out_dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["object_id".to_string(), "split".into(), "caption".into(), "ref_index".into()];
    header.extend((0..DEFAULT_VIEWS).map(|k| format!("view{k}")));
    w.write_record(&header)?;
    for e in &entries {
        let mut rec = vec![
            e.object_id.to_string(),
            e.split.clone(),
            e.caption.clone(),
            e.ref_index.to_string(),
        ];
        rec.extend(e.views.iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let bad = |what: &str| Error::Format(format!("manifest row has bad {what}"));
        entries.push(ManifestEntry {
            object_id: field(0).parse().map_err(|_| bad("object_id"))?,
            split: field(1),
            caption: field(2),
            ref_index: field(3).parse().map_err(|_| bad("ref_index"))?,
            views: (4..rec.len()).map(field).collect(),
        });
    }
    Ok(entries)
}

/// Loads a dataset written by [`build_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<ObjectRecord>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let spec_path: PathBuf = dir.join(object_dir(e.object_id)).join("spec.txt");
            let text = fs::read_to_string(&spec_path).map_err(|err| Error::io(&spec_path, err))?;
            let views = e
                .views
                .iter()
                .map(|v| read_image(dir.join(v)))
                .collect::<Result<Vec<_>>>()?;
            if e.ref_index >= views.len() {
                return Err(Error::Format(format!("ref_index {} out of range", e.ref_index)));
            }
            Ok(ObjectRecord {
                spec: ObjectSpec::from_text(e.object_id, &text)?,
                caption: e.caption,
                views,
                ref_index: e.ref_index,
                split: if e.split == "heldout" { Split::Heldout } else { Split::Train },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(shape: Shape, color: usize) -> ObjectSpec {
        ObjectSpec {
            id: 0,
            prims: vec![Primitive {
                shape,
                color,
                size: 0.4,
            }],
        }
    }

    #[test]
    fn centred_sphere_is_mirror_symmetric_across_the_orbit() {
        let vs = render_views(&single(Shape::Sphere, 0), 8, 30.0, 32).unwrap();
        let (front, back) = (&vs.images[0], &vs.images[4]);
        assert_eq!(front.to_bytes(), back.mirrored_horizontally().to_bytes());
        assert_eq!(front.to_bytes(), front.mirrored_horizontally().to_bytes());
    }

    #[test]
    fn background_is_exactly_white() {
        let vs = render_views(&single(Shape::Cube, 3), 4, 30.0, 32).unwrap();
        for img in &vs.images {
            for c in [0, 31] {
                for r in 0..32 {
                    assert_eq!(img.pixel(r, c), &[1.0, 1.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ObjectSpec::random(0, &mut rng);
        let a = render_views(&spec, 8, 30.0, 32).unwrap();
        let b = render_views(&spec, 8, 30.0, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.azimuths_deg, vec![0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0]);
    }

    #[test]
    fn caption_examples_and_bounds() {
        assert_eq!(make_caption(&single(Shape::Cube, 0)), "a red cube");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in 0..2000 {
            let spec = ObjectSpec::random(id, &mut rng);
            let cap = make_caption(&spec);
            assert!(cap.len() <= 64 && cap.is_ascii(), "{cap}");
            let parsed = parse_caption(&cap).unwrap();
            let want: Vec<_> = spec.prims.iter().map(|p| (p.color, p.shape)).collect();
            assert_eq!(parsed, want);
        }
        let worst = ObjectSpec {
            id: 0,
            prims: vec![
                Primitive {
                    shape: Shape::Sphere,
                    color: 10,
                    size: 0.3
                };
                3
            ],
        };
        assert!(make_caption(&worst).len() <= 64);
    }

    #[test]
    fn spec_text_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ObjectSpec::random(7, &mut rng);
        assert_eq!(ObjectSpec::from_text(7, &spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn reference_target_offsets() {
        let objs = generate_objects(3, 1).unwrap();
        for o in &objs {
            let t = o.i2mv_targets();
            assert_eq!(t.len(), 3);
            assert!(std::ptr::eq(t[1], &o.views[(o.ref_index + 4) % 8]));
        }
    }
}
