//! Procedural synthetic scenes with analytically exact intrinsics.
//!
//! An orthographic top-down-oblique camera looks at 1-5 primitives standing
//! on a ground plane. Depth (ray length), surface normals, instance
//! segmentation, and line drawings all come from the same closed-form
//! intersections as the shaded image, so image/intrinsic consistency holds by
//! construction.

use crate::codec::{
    derive_line_field, normalize_depth_scalar, segmentation_color, depth_colormap, IntrinsicStack,
    STACK_CHANNELS,
};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::path::Path;

// ---- camera (fixed for every scene) ----------------------------------------

/// View direction (unit): looking down and toward +z.
pub const VIEW_DIR: [f64; 3] = [0.0, -0.8, 0.6];
/// Image-plane right and up basis vectors (orthonormal with VIEW_DIR).
pub const CAM_RIGHT: [f64; 3] = [1.0, 0.0, 0.0];
pub const CAM_UP: [f64; 3] = [0.0, 0.6, 0.8];
/// Window center in world space and half-extent of the square window.
pub const CAM_CENTER: [f64; 3] = [0.0, 0.7, 0.0];
pub const FRAME_HALF: f64 = 2.2;
const CAM_BACKOFF: f64 = 20.0;

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

// ---- scene description ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Cylinder,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] =
        [PrimitiveKind::Sphere, PrimitiveKind::Box, PrimitiveKind::Cylinder];

    fn noun(self, plural: bool) -> &'static str {
        match (self, plural) {
            (PrimitiveKind::Sphere, false) => "sphere",
            (PrimitiveKind::Sphere, true) => "spheres",
            (PrimitiveKind::Box, false) => "box",
            (PrimitiveKind::Box, true) => "boxes",
            (PrimitiveKind::Cylinder, false) => "cylinder",
            (PrimitiveKind::Cylinder, true) => "cylinders",
        }
    }
}

/// Albedo palette; names double as caption vocabulary.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.55, 0.15, 0.75]),
    ("orange", [0.95, 0.55, 0.10]),
    ("teal", [0.10, 0.70, 0.70]),
    ("white", [0.92, 0.92, 0.92]),
];

const GROUND_ALBEDO: [f32; 3] = [0.55, 0.55, 0.55];
const AMBIENT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct SceneObject {
    pub kind: PrimitiveKind,
    /// Center in world units; objects rest on the ground plane.
    pub center: [f64; 3],
    /// Radius / half-extent; cylinders use 0.8*size radius, size half-height.
    pub size: f64,
    pub color: usize,
    pub id: u32,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    /// Unit direction from the scene toward the light.
    pub light: [f64; 3],
}

impl SceneObject {
    /// Image-plane footprint check used both by the sampler and render().
    fn in_frame(&self) -> bool {
        let rel = sub3(self.center, CAM_CENTER);
        let sx = dot3(rel, CAM_RIGHT);
        let sy = dot3(rel, CAM_UP);
        let margin = 1.5 * self.size;
        sx.abs() + margin <= FRAME_HALF && sy.abs() + margin <= FRAME_HALF
    }
}

// ---- caption vocabulary ------------------------------------------------------

pub const TOKEN_PAD: u8 = 0;
pub const TOKEN_NULL: u8 = 1;
pub const MAX_CAPTION: usize = 24;

/// Fixed caption vocabulary; index = token id.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "<null>", "one", "two", "three", "four", "five"];
    for (name, _) in PALETTE.iter() {
        v.push(name);
    }
    for kind in PrimitiveKind::ALL {
        v.push(kind.noun(false));
        v.push(kind.noun(true));
    }
    v.extend_from_slice(&["and", "on", "a", "plane"]);
    v
}

pub fn vocab_size() -> usize {
    vocabulary().len()
}

pub fn tokenize(text: &str) -> Result<Vec<u8>> {
    let vocab = vocabulary();
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let id = vocab
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::contract(format!("word {word:?} not in vocabulary")))?;
        out.push(id as u8);
    }
    if out.len() > MAX_CAPTION {
        return Err(Error::contract(format!("caption too long: {} tokens", out.len())));
    }
    Ok(out)
}

pub fn detokenize(tokens: &[u8]) -> Result<String> {
    let vocab = vocabulary();
    let mut words = Vec::new();
    for &t in tokens {
        if t == TOKEN_PAD {
            continue;
        }
        let w = vocab
            .get(t as usize)
            .ok_or_else(|| Error::contract(format!("token {t} out of vocabulary")))?;
        words.push(*w);
    }
    Ok(words.join(" "))
}

/// "two red spheres and one blue box on a plane" over the fixed vocabulary,
/// grouping identical (color, kind) pairs in first-appearance order.
pub fn caption_for(spec: &SceneSpec) -> String {
    const COUNTS: [&str; 5] = ["one", "two", "three", "four", "five"];
    let mut groups: Vec<(usize, PrimitiveKind, usize)> = Vec::new();
    for o in &spec.objects {
        if let Some(g) = groups.iter_mut().find(|g| g.0 == o.color && g.1 == o.kind) {
            g.2 += 1;
        } else {
            groups.push((o.color, o.kind, 1));
        }
    }
    let mut phrases = Vec::new();
    for (color, kind, count) in groups {
        phrases.push(format!(
            "{} {} {}",
            COUNTS[(count - 1).min(4)],
            PALETTE[color].0,
            kind.noun(count > 1)
        ));
    }
    if phrases.is_empty() {
        "a plane".to_string()
    } else {
        format!("{} on a plane", phrases.join(" and "))
    }
}

// ---- ray intersections -------------------------------------------------------

struct Hit {
    t: f64,
    normal: [f64; 3],
    id: u32,
    albedo: [f32; 3],
}

fn hit_ground(o: [f64; 3], d: [f64; 3]) -> Hit {
    let t = -o[1] / d[1];
    Hit { t, normal: [0.0, 1.0, 0.0], id: 0, albedo: GROUND_ALBEDO }
}

fn hit_sphere(o: [f64; 3], d: [f64; 3], obj: &SceneObject) -> Option<(f64, [f64; 3])> {
    let oc = sub3(o, obj.center);
    let b = dot3(oc, d);
    let c = dot3(oc, oc) - obj.size * obj.size;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    if t <= 1e-9 {
        return None;
    }
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let mut n = sub3(p, obj.center);
    let len = norm3(n);
    n = [n[0] / len, n[1] / len, n[2] / len];
    Some((t, n))
}

fn hit_box(o: [f64; 3], d: [f64; 3], obj: &SceneObject) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0usize;
    for a in 0..3 {
        let lo = obj.center[a] - obj.size;
        let hi = obj.center[a] + obj.size;
        if d[a].abs() < 1e-12 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let mut t0 = (lo - o[a]) / d[a];
        let mut t1 = (hi - o[a]) / d[a];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis = a;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 1e-9 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
    Some((t_near, n))
}

fn hit_cylinder(o: [f64; 3], d: [f64; 3], obj: &SceneObject) -> Option<(f64, [f64; 3])> {
    let r = 0.8 * obj.size;
    let hh = obj.size;
    let (cx, cy, cz) = (obj.center[0], obj.center[1], obj.center[2]);
    let mut best: Option<(f64, [f64; 3])> = None;
    // side
    let ox = o[0] - cx;
    let oz = o[2] - cz;
    let a = d[0] * d[0] + d[2] * d[2];
    if a > 1e-12 {
        let b = ox * d[0] + oz * d[2];
        let c = ox * ox + oz * oz - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b - disc.sqrt()) / a;
            if t > 1e-9 {
                let y = o[1] + t * d[1];
                if (y - cy).abs() <= hh {
                    let px = ox + t * d[0];
                    let pz = oz + t * d[2];
                    best = Some((t, [px / r, 0.0, pz / r]));
                }
            }
        }
    }
    // caps
    for (ycap, ny) in [(cy + hh, 1.0), (cy - hh, -1.0)] {
        if d[1].abs() < 1e-12 {
            continue;
        }
        let t = (ycap - o[1]) / d[1];
        if t <= 1e-9 {
            continue;
        }
        let px = o[0] + t * d[0] - cx;
        let pz = o[2] + t * d[2] - cz;
        if px * px + pz * pz <= r * r && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, [0.0, ny, 0.0]));
        }
    }
    best
}

// ---- render ------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SceneSample {
    /// [3, H, W] in [-1, 1]
    pub image: Tensor,
    pub intrinsics: IntrinsicStack,
    pub caption_tokens: Vec<u8>,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct SceneRender {
    pub sample: SceneSample,
    /// Normalized scalar depth (pre-colormap), row-major.
    pub depth_norm: Vec<f32>,
    pub instance_ids: Vec<u32>,
}

pub fn render(spec: &SceneSpec, resolution: usize) -> Result<SceneRender> {
    if resolution < 8 {
        return Err(Error::config("resolution", "must be >= 8"));
    }
    if spec.objects.len() > 5 {
        return Err(Error::contract("scene spec allows at most 5 objects"));
    }
    let light_len = norm3(spec.light);
    if !(0.99..=1.01).contains(&light_len) {
        return Err(Error::contract("light direction must be a unit vector"));
    }
    for o in &spec.objects {
        if !o.in_frame() {
            return Err(Error::contract(format!(
                "object id {} at {:?} is out of frame",
                o.id, o.center
            )));
        }
    }
    let res = resolution;
    let n_px = res * res;
    let mut depth_raw = vec![0.0f32; n_px];
    let mut normals = vec![0.0f32; 3 * n_px];
    let mut ids = vec![0u32; n_px];
    let mut image = vec![0.0f32; 3 * n_px];

    for py in 0..res {
        let sy = (1.0 - (py as f64 + 0.5) / res as f64 * 2.0) * FRAME_HALF;
        for px in 0..res {
            let sx = ((px as f64 + 0.5) / res as f64 * 2.0 - 1.0) * FRAME_HALF;
            let o = [
                CAM_CENTER[0] + sx * CAM_RIGHT[0] + sy * CAM_UP[0] - VIEW_DIR[0] * CAM_BACKOFF,
                CAM_CENTER[1] + sx * CAM_RIGHT[1] + sy * CAM_UP[1] - VIEW_DIR[1] * CAM_BACKOFF,
                CAM_CENTER[2] + sx * CAM_RIGHT[2] + sy * CAM_UP[2] - VIEW_DIR[2] * CAM_BACKOFF,
            ];
            let mut hit = hit_ground(o, VIEW_DIR);
            for obj in &spec.objects {
                let sub = match obj.kind {
                    PrimitiveKind::Sphere => hit_sphere(o, VIEW_DIR, obj),
                    PrimitiveKind::Box => hit_box(o, VIEW_DIR, obj),
                    PrimitiveKind::Cylinder => hit_cylinder(o, VIEW_DIR, obj),
                };
                if let Some((t, n)) = sub {
                    if t < hit.t {
                        hit = Hit { t, normal: n, id: obj.id, albedo: PALETTE[obj.color].1 };
                    }
                }
            }
            let i = py * res + px;
            depth_raw[i] = hit.t as f32;
            normals[i] = hit.normal[0] as f32;
            normals[n_px + i] = hit.normal[1] as f32;
            normals[2 * n_px + i] = hit.normal[2] as f32;
            ids[i] = hit.id;
            let lambert = dot3(hit.normal, spec.light).max(0.0);
            let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
            for c in 0..3 {
                let v = hit.albedo[c] * shade as f32;
                image[c * n_px + i] = (v * 2.0 - 1.0).clamp(-1.0, 1.0);
            }
        }
    }

    let depth_norm = normalize_depth_scalar(&depth_raw)?;
    let line = derive_line_field(&depth_norm, &ids, res, res);

    let mut stack = vec![0.0f32; STACK_CHANNELS * n_px];
    for i in 0..n_px {
        let rgb = depth_colormap(depth_norm[i]);
        stack[i] = rgb[0];
        stack[n_px + i] = rgb[1];
        stack[2 * n_px + i] = rgb[2];
    }
    stack[3 * n_px..6 * n_px].copy_from_slice(&normals);
    for i in 0..n_px {
        let rgb = segmentation_color(ids[i]);
        stack[6 * n_px + i] = rgb[0];
        stack[7 * n_px + i] = rgb[1];
        stack[8 * n_px + i] = rgb[2];
    }
    for i in 0..n_px {
        stack[9 * n_px + i] = line[i];
        stack[10 * n_px + i] = line[i];
        stack[11 * n_px + i] = line[i];
    }

    let caption = caption_for(spec);
    let sample = SceneSample {
        image: Tensor::from_vec(&[3, res, res], image)?,
        intrinsics: IntrinsicStack::new(
            res,
            res,
            Tensor::from_vec(&[STACK_CHANNELS, res, res], stack)?,
        )?,
        caption_tokens: tokenize(&caption)?,
        caption,
    };
    Ok(SceneRender { sample, depth_norm, instance_ids: ids })
}

// ---- sampling ----------------------------------------------------------------

/// Documented sampling distribution: object count uniform 1-5, kind and
/// color uniform, size uniform in [0.35, 0.65], positions rejection-sampled
/// so projected footprints stay in frame and pairwise centers keep
/// dist >= 0.7 * (size_a + size_b) (roughly <= 30% overlap).
pub fn sample_spec(rng: &mut Rng) -> SceneSpec {
    let n_objects = 1 + rng.below(5);
    let azimuth = rng.range(0.0, std::f64::consts::TAU);
    let elevation = rng.range(0.7, 1.2);
    let light = [
        elevation.cos() * azimuth.cos(),
        elevation.sin(),
        elevation.cos() * azimuth.sin(),
    ];
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..n_objects {
        let kind = PrimitiveKind::ALL[rng.below(3)];
        let color = rng.below(PALETTE.len());
        let size = rng.range(0.35, 0.65);
        for _attempt in 0..64 {
            let x = rng.range(-1.3, 1.3);
            let z = rng.range(-1.3, 1.3);
            let candidate = SceneObject {
                kind,
                center: [x, size, z],
                size,
                color,
                id: objects.len() as u32 + 1,
            };
            if !candidate.in_frame() {
                continue;
            }
            let overlaps = objects.iter().any(|o| {
                let dx = o.center[0] - x;
                let dz = o.center[2] - z;
                (dx * dx + dz * dz).sqrt() < 0.7 * (o.size + size)
            });
            if !overlaps {
                objects.push(candidate);
                break;
            }
        }
    }
    if objects.is_empty() {
        // extremely unlikely; fall back to one small centered object
        objects.push(SceneObject {
            kind: PrimitiveKind::Sphere,
            center: [0.0, 0.4, 0.0],
            size: 0.4,
            color: 0,
            id: 1,
        });
    }
    SceneSpec { objects, light }
}

// ---- dataset shards ----------------------------------------------------------

pub struct Dataset {
    pub resolution: usize,
    pub images: Vec<Tensor>,
    pub intrinsics: Vec<Tensor>,
    pub captions: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn generate_dataset(n: usize, seed: u64, resolution: usize) -> Result<Vec<SceneRender>> {
    if n < 1 {
        return Err(Error::config("n", "dataset size must be >= 1"));
    }
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = root.fork(k as u64);
        let spec = sample_spec(&mut rng);
        out.push(render(&spec, resolution)?);
    }
    Ok(out)
}

pub fn write_shard(path: &Path, renders: &[SceneRender], seed: u64) -> Result<()> {
    let n = renders.len();
    let res = renders[0].sample.intrinsics.h();
    let mut images = Vec::with_capacity(n * 3 * res * res);
    let mut intr = Vec::with_capacity(n * STACK_CHANNELS * res * res);
    let mut captions = vec![TOKEN_PAD; n * MAX_CAPTION];
    let mut caption_len = vec![0u8; n];
    for (i, r) in renders.iter().enumerate() {
        images.extend_from_slice(r.sample.image.data());
        intr.extend_from_slice(r.sample.intrinsics.tensor().data());
        let toks = &r.sample.caption_tokens;
        captions[i * MAX_CAPTION..i * MAX_CAPTION + toks.len()].copy_from_slice(toks);
        caption_len[i] = toks.len() as u8;
    }
    let mut c = Container::new();
    c.push_f32("images", &[n, 3, res, res], images)?;
    c.push_f32("intrinsics", &[n, STACK_CHANNELS, res, res], intr)?;
    c.push_u8("captions", &[n, MAX_CAPTION], captions)?;
    c.push_u8("caption_len", &[n], caption_len)?;
    c.push_scalar("meta/resolution", res as f32)?;
    c.push_scalar("meta/seed", seed as f32)?;
    c.write_to(path)
}

pub fn read_shard(path: &Path) -> Result<Dataset> {
    let c = Container::read_from(path)?;
    let (dims, images) = c.get_f32("images")?;
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::io(path.display().to_string(), format!("bad images dims {dims:?}")));
    }
    let (n, res) = (dims[0], dims[2]);
    let (idims, intr) = c.get_f32("intrinsics")?;
    if idims != [n, STACK_CHANNELS, res, res] {
        return Err(Error::io(path.display().to_string(), format!("bad intrinsics dims {idims:?}")));
    }
    let (_, caps) = c.get_u8("captions")?;
    let (_, lens) = c.get_u8("caption_len")?;
    let plane = res * res;
    let mut ds = Dataset {
        resolution: res,
        images: Vec::with_capacity(n),
        intrinsics: Vec::with_capacity(n),
        captions: Vec::with_capacity(n),
    };
    for i in 0..n {
        ds.images.push(Tensor::from_vec(
            &[3, res, res],
            images[i * 3 * plane..(i + 1) * 3 * plane].to_vec(),
        )?);
        ds.intrinsics.push(Tensor::from_vec(
            &[STACK_CHANNELS, res, res],
            intr[i * STACK_CHANNELS * plane..(i + 1) * STACK_CHANNELS * plane].to_vec(),
        )?);
        let len = lens[i] as usize;
        ds.captions.push(caps[i * MAX_CAPTION..i * MAX_CAPTION + len].to_vec());
    }
    Ok(ds)
}
