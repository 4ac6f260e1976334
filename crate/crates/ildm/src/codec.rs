//! Intrinsic encodings and the shared-latent autoencoders.
//!
//! Four intrinsics are carried as 3-channel fields in [-1, 1], concatenated
//! in the fixed order depth, normal, segmentation, line (12 channels). The
//! intrinsic VAE aggregates all 12 channels into one latent with exactly the
//! image VAE's latent shape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel-group order of the 12-channel stack.
pub const FIELD_NAMES: [&str; 4] = ["depth", "normal", "segmentation", "line"];
pub const STACK_CHANNELS: usize = 12;

/// Depth colormap: 3-anchor piecewise-linear ramp over [0, 1]
/// (dark blue -> green -> yellow), committed here as the lookup table.
pub const DEPTH_COLORMAP: [[f32; 3]; 3] = [
    [0.10, 0.05, 0.45],
    [0.10, 0.70, 0.30],
    [0.98, 0.91, 0.10],
];

/// Map a normalized depth value in [-1, 1] through the colormap,
/// rescaled back to [-1, 1] per channel.
pub fn depth_colormap(x: f32) -> [f32; 3] {
    let t = ((x + 1.0) * 0.5).clamp(0.0, 1.0);
    let (a, b, local) = if t <= 0.5 {
        (DEPTH_COLORMAP[0], DEPTH_COLORMAP[1], t * 2.0)
    } else {
        (DEPTH_COLORMAP[1], DEPTH_COLORMAP[2], (t - 0.5) * 2.0)
    };
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let v = a[c] + (b[c] - a[c]) * local;
        out[c] = v * 2.0 - 1.0;
    }
    out
}

/// Invert the colormap by projecting onto the two ramp segments; exact for
/// on-curve points, nearest-point otherwise. Returns depth in [-1, 1].
pub fn depth_colormap_invert(rgb: [f32; 3]) -> f32 {
    let p = [(rgb[0] + 1.0) * 0.5, (rgb[1] + 1.0) * 0.5, (rgb[2] + 1.0) * 0.5];
    let mut best = (f32::MAX, 0.0f32);
    for seg in 0..2 {
        let a = DEPTH_COLORMAP[seg];
        let b = DEPTH_COLORMAP[seg + 1];
        let mut ab2 = 0.0f32;
        let mut ap_ab = 0.0f32;
        for c in 0..3 {
            let d = b[c] - a[c];
            ab2 += d * d;
            ap_ab += (p[c] - a[c]) * d;
        }
        let local = (ap_ab / ab2).clamp(0.0, 1.0);
        let mut dist = 0.0f32;
        for c in 0..3 {
            let proj = a[c] + (b[c] - a[c]) * local;
            dist += (p[c] - proj) * (p[c] - proj);
        }
        let t = (seg as f32 + local) * 0.5;
        if dist < best.0 {
            best = (dist, t);
        }
    }
    best.1 * 2.0 - 1.0
}

/// Percentile by linear interpolation on the sorted values, p in [0, 1].
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = (rank - lo as f64) as f32;
    sorted[lo] + (sorted[hi.min(n - 1)] - sorted[lo]) * frac
}

/// Affine map sending the 2nd percentile to -1 and the 98th to +1, clipped.
pub fn normalize_depth_scalar(raw: &[f32]) -> Result<Vec<f32>> {
    if raw.is_empty() {
        return Err(Error::contract("normalize_depth: empty field"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("normalize_depth: non-finite depth value"));
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p2 = percentile(&sorted, 0.02);
    let p98 = percentile(&sorted, 0.98);
    let span = p98 - p2;
    if span.abs() < 1e-9 {
        return Err(Error::numeric(
            "normalize_depth: degenerate (near-constant) depth field, percentile span is zero",
        ));
    }
    Ok(raw
        .iter()
        .map(|&v| (2.0 * (v - p2) / span - 1.0).clamp(-1.0, 1.0))
        .collect())
}

/// Full depth encoding: percentile normalization then the colormap.
/// Output is [3, H*W] flattened channel-major.
pub fn normalize_depth(raw: &[f32]) -> Result<Vec<f32>> {
    let scalar = normalize_depth_scalar(raw)?;
    let n = scalar.len();
    let mut out = vec![0.0f32; 3 * n];
    for (i, &v) in scalar.iter().enumerate() {
        let rgb = depth_colormap(v);
        out[i] = rgb[0];
        out[n + i] = rgb[1];
        out[2 * n + i] = rgb[2];
    }
    Ok(out)
}

/// Deterministic instance palette: id 0 (background) is black, ids >= 1 get
/// a golden-ratio hue walk at full saturation/value. Values in [-1, 1].
pub fn segmentation_color(id: u32) -> [f32; 3] {
    if id == 0 {
        return [-1.0, -1.0, -1.0];
    }
    let golden = 0.618_033_988_749_895_f64;
    let hue = (id as f64 * golden).fract() * 6.0;
    let sector = hue.floor() as i32 % 6;
    let f = (hue - hue.floor()) as f32;
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [r * 2.0 - 1.0, g * 2.0 - 1.0, b * 2.0 - 1.0]
}

/// Line drawing derivation: 1 where the normalized depth jumps by more than
/// 5% of the [-1, 1] range across a 4-neighborhood or the instance id
/// changes, else -1.
pub const LINE_DEPTH_THRESHOLD: f32 = 0.1;

pub fn derive_line_field(depth_norm: &[f32], ids: &[u32], h: usize, w: usize) -> Vec<f32> {
    let mut line = vec![-1.0f32; h * w];
    let at = |y: usize, x: usize| y * w + x;
    for y in 0..h {
        for x in 0..w {
            let i = at(y, x);
            let mut edge = false;
            let mut check = |j: usize| {
                if (depth_norm[i] - depth_norm[j]).abs() > LINE_DEPTH_THRESHOLD || ids[i] != ids[j]
                {
                    edge = true;
                }
            };
            if x + 1 < w {
                check(at(y, x + 1));
            }
            if x > 0 {
                check(at(y, x - 1));
            }
            if y + 1 < h {
                check(at(y + 1, x));
            }
            if y > 0 {
                check(at(y - 1, x));
            }
            if edge {
                line[i] = 1.0;
            }
        }
    }
    line
}

/// The four intrinsic maps as one [12, H, W] tensor in fixed order.
#[derive(Clone, Debug)]
pub struct IntrinsicStack {
    h: usize,
    w: usize,
    data: Tensor,
}

impl IntrinsicStack {
    pub fn new(h: usize, w: usize, data: Tensor) -> Result<IntrinsicStack> {
        if data.shape() != [STACK_CHANNELS, h, w] {
            return Err(Error::contract(format!(
                "intrinsic stack wants [{STACK_CHANNELS}, {h}, {w}], got {:?}",
                data.shape()
            )));
        }
        Ok(IntrinsicStack { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// 3-channel field by group index (0 depth, 1 normal, 2 seg, 3 line).
    pub fn field(&self, group: usize) -> &[f32] {
        let plane = self.h * self.w;
        &self.data.data()[group * 3 * plane..(group + 1) * 3 * plane]
    }

    pub fn validate_ranges(&self) -> Result<()> {
        if self.data.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract("intrinsic stack value outside [-1, 1]"));
        }
        Ok(())
    }

    /// Unit length of the stored normals wherever they are defined.
    pub fn max_normal_length_error(&self) -> f32 {
        let plane = self.h * self.w;
        let nf = self.field(1);
        let mut worst = 0.0f32;
        for i in 0..plane {
            let (x, y, z) = (nf[i], nf[plane + i], nf[2 * plane + i]);
            let len = (x * x + y * y + z * z).sqrt();
            worst = worst.max((len - 1.0).abs());
        }
        worst
    }
}

/// Biased Gaussian-kernel MMD^2 between two sets of flattened latents.
///
/// k(a, b) = exp(-||a - b||^2 / (2 bandwidth^2)). The two sets are ordered
/// canonically before accumulation so mmd2(a, b) == mmd2(b, a) bitwise.
pub fn latent_mmd(a: &[Vec<f32>], b: &[Vec<f32>], bandwidth: f64) -> Result<f64> {
    if bandwidth <= 0.0 {
        return Err(Error::config("bandwidth", format!("{bandwidth} must be > 0")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("latent_mmd: both sample sets must be nonempty"));
    }
    let dim = a[0].len();
    for v in a.iter().chain(b.iter()) {
        if v.len() != dim {
            return Err(Error::contract("latent_mmd: inconsistent latent dimensions"));
        }
    }
    // canonical argument order: by length, then lexicographic on bit patterns
    let swapped = {
        use std::cmp::Ordering;
        let ord = a.len().cmp(&b.len()).then_with(|| {
            for (va, vb) in a.iter().zip(b.iter()) {
                for (xa, xb) in va.iter().zip(vb.iter()) {
                    match xa.to_bits().cmp(&xb.to_bits()) {
                        Ordering::Equal => continue,
                        other => return other,
                    }
                }
            }
            Ordering::Equal
        });
        ord == std::cmp::Ordering::Greater
    };
    let (first, second) = if swapped { (b, a) } else { (a, b) };

    let kern = |x: &[f32], y: &[f32]| -> f64 {
        let mut d2 = 0.0f64;
        for (xa, ya) in x.iter().zip(y.iter()) {
            let d = *xa as f64 - *ya as f64;
            d2 += d * d;
        }
        (-d2 / (2.0 * bandwidth * bandwidth)).exp()
    };
    let mean_within = |s: &[Vec<f32>]| -> f64 {
        let mut acc = 0.0f64;
        for x in s {
            for y in s {
                acc += kern(x, y);
            }
        }
        acc / (s.len() * s.len()) as f64
    };
    let mut cross = 0.0f64;
    for x in first {
        for y in second {
            cross += kern(x, y);
        }
    }
    cross /= (first.len() * second.len()) as f64;
    Ok(mean_within(first) + mean_within(second) - 2.0 * cross)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn percentile_mapping_hits_extremes() {
        // half 1s, half 2s: p2 = 1, p98 = 2 -> extremes map to -1 and +1
        let mut raw = vec![1.0f32; 50];
        raw.extend(vec![2.0f32; 50]);
        let norm = normalize_depth_scalar(&raw).unwrap();
        for (i, v) in norm.iter().enumerate() {
            if raw[i] == 1.0 {
                assert_eq!(*v, -1.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn normalize_is_idempotent_up_to_clipping() {
        // 5% of the mass pinned at each extreme: after one pass the 2%/98%
        // percentiles sit exactly at -1/+1, so a second pass is the identity.
        let mut raw = vec![-3.0f32; 10];
        raw.extend((0..180).map(|i| -2.9 + i as f32 * (5.8 / 179.0)));
        raw.extend(vec![3.0f32; 10]);
        let once = normalize_depth_scalar(&raw).unwrap();
        let twice = normalize_depth_scalar(&once).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn random_field_percentile_targets() {
        let mut rng = Rng::new(17);
        let n = 64 * 64;
        let raw: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
        let norm = normalize_depth_scalar(&raw).unwrap();
        assert!(norm.iter().all(|v| (-1.0..=1.0).contains(v)));
        // fraction clipped at each end should be ~2% within 1/(H*W) quantile slack
        let lo = norm.iter().filter(|&&v| v <= -1.0).count() as f64 / n as f64;
        let hi = norm.iter().filter(|&&v| v >= 1.0).count() as f64 / n as f64;
        let tol = 1.0 / n as f64 + 1e-9;
        assert!((lo - 0.02).abs() <= tol + 0.0005, "lo {lo}");
        assert!((hi - 0.02).abs() <= tol + 0.0005, "hi {hi}");
    }

    #[test]
    fn constant_depth_rejected() {
        let raw = vec![3.0f32; 100];
        let e = normalize_depth_scalar(&raw).unwrap_err();
        assert_eq!(e.category(), "numeric");
    }

    #[test]
    fn colormap_roundtrip_on_curve() {
        for i in 0..=100 {
            let x = i as f32 / 50.0 - 1.0;
            let rgb = depth_colormap(x);
            assert!(rgb.iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = depth_colormap_invert(rgb);
            assert!((back - x).abs() < 1e-5, "{x} -> {back}");
        }
    }

    #[test]
    fn segmentation_palette_is_stable_and_distinct() {
        assert_eq!(segmentation_color(0), [-1.0, -1.0, -1.0]);
        let c1 = segmentation_color(1);
        let c2 = segmentation_color(2);
        assert_ne!(c1, c2);
        for id in 1..64 {
            let c = segmentation_color(id);
            assert!(c.iter().all(|v| (-1.0..=1.0).contains(v)));
            // full value: at least one channel saturates high
            assert!(c.iter().any(|&v| v > 0.99));
        }
    }

    #[test]
    fn line_field_flags_id_and_depth_edges() {
        // 2x4: id change between columns 1|2, depth jump between rows via ids constant
        let depth = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5];
        let ids = vec![1, 1, 2, 2, 1, 1, 2, 2];
        let line = derive_line_field(&depth, &ids, 2, 4);
        assert_eq!(line[0], -1.0); // interior of id 1, flat depth
        assert_eq!(line[1], 1.0); // id boundary
        assert_eq!(line[2], 1.0);
        assert_eq!(line[5], 1.0); // below: depth jump across rows at col 2
        assert_eq!(line[4], -1.0);
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let mut rng = Rng::new(5);
        let set: Vec<Vec<f32>> = (0..16)
            .map(|_| (0..8).map(|_| rng.normal() as f32).collect())
            .collect();
        let v = latent_mmd(&set, &set, 1.3).unwrap();
        assert!(v.abs() < 1e-10, "{v}");
    }

    #[test]
    fn mmd_two_point_closed_form() {
        // k(a,a) = k(b,b) = 1, k(a,b) = exp(-d^2/(2 bw^2))
        let a = vec![vec![0.0f32, 0.0]];
        let b = vec![vec![3.0f32, 4.0]]; // d = 5
        let bw = 2.0f64;
        let want = 2.0 - 2.0 * (-(25.0) / (2.0 * bw * bw)).exp();
        let got = latent_mmd(&a, &b, bw).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn mmd_symmetry_exact() {
        let mut rng = Rng::new(8);
        let a: Vec<Vec<f32>> = (0..7)
            .map(|_| (0..12).map(|_| rng.normal() as f32).collect())
            .collect();
        let b: Vec<Vec<f32>> = (0..13)
            .map(|_| (0..12).map(|_| rng.normal() as f32).collect())
            .collect();
        let ab = latent_mmd(&a, &b, 0.9).unwrap();
        let ba = latent_mmd(&b, &a, 0.9).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
        assert!(ab >= -1e-12);
    }

    #[test]
    fn mmd_rejects_bad_bandwidth() {
        let a = vec![vec![0.0f32]];
        assert!(latent_mmd(&a, &a, 0.0).is_err());
        assert!(latent_mmd(&a, &a, -1.0).is_err());
    }
}

// ---- autoencoders -------------------------------------------------------------

use crate::graph::{init_weight, AdamWConfig, ParamId, ParamStore, Tape, Var};
use crate::rng::Rng;

/// Shared-latent VAE over image (3ch) or intrinsic (12ch) fields.
/// 64x64 inputs map to a 4x16x16 latent (downsample factor 4).
#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub in_ch: usize,
    pub resolution: usize,
    pub latent_ch: usize,
    pub enc_ch: (usize, usize),
    pub dec_ch: (usize, usize, usize),
}

impl VaeConfig {
    pub fn image(resolution: usize) -> VaeConfig {
        VaeConfig { in_ch: 3, resolution, latent_ch: 4, enc_ch: (32, 64), dec_ch: (64, 32, 24) }
    }

    pub fn intrinsic(resolution: usize) -> VaeConfig {
        VaeConfig { in_ch: 12, resolution, latent_ch: 4, enc_ch: (32, 64), dec_ch: (64, 32, 24) }
    }

    pub fn latent_hw(&self) -> usize {
        self.resolution / 4
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_ch, self.latent_hw(), self.latent_hw()]
    }
}

#[derive(Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug)]
pub struct Vae {
    pub cfg: VaeConfig,
    /// 1/std of encoded means over the training set; diffusion operates on
    /// scaled latents so they are roughly unit variance.
    pub latent_scale: f32,
    e1: ConvIds,
    en1: NormIds,
    e2: ConvIds,
    en2: NormIds,
    e3: ConvIds,
    en3: NormIds,
    e_mu: ConvIds,
    e_lv: ConvIds,
    d1: ConvIds,
    dn1: NormIds,
    d2: ConvIds,
    dn2: NormIds,
    d3: ConvIds,
    dn3: NormIds,
    d4: ConvIds,
    dn4: NormIds,
    d5: ConvIds,
}

#[derive(Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

fn vae_norm(store: &mut ParamStore, name: &str, c: usize) -> NormIds {
    NormIds {
        g: store.add(&format!("{name}/g"), crate::tensor::Tensor::from_vec(&[c], vec![1.0; c]).unwrap(), true),
        b: store.add(&format!("{name}/b"), crate::tensor::Tensor::zeros(&[c]), true),
    }
}

fn vae_conv(store: &mut ParamStore, rng: &mut Rng, name: &str, o: usize, i: usize, k: usize) -> ConvIds {
    ConvIds {
        w: store.add(&format!("{name}/w"), init_weight(&[o, i, k, k], rng), true),
        b: store.add(&format!("{name}/b"), crate::tensor::Tensor::zeros(&[o]), true),
    }
}

impl Vae {
    pub fn build(store: &mut ParamStore, cfg: &VaeConfig, rng: &mut Rng) -> Vae {
        let (c1, c2) = cfg.enc_ch;
        let (d1c, d2c, d3c) = cfg.dec_ch;
        Vae {
            cfg: cfg.clone(),
            latent_scale: 1.0,
            e1: vae_conv(store, rng, "enc/c1", c1, cfg.in_ch, 3),
            en1: vae_norm(store, "enc/n1", c1),
            e2: vae_conv(store, rng, "enc/c2", c2, c1, 3),
            en2: vae_norm(store, "enc/n2", c2),
            e3: vae_conv(store, rng, "enc/c3", c2, c2, 3),
            en3: vae_norm(store, "enc/n3", c2),
            e_mu: vae_conv(store, rng, "enc/mu", cfg.latent_ch, c2, 3),
            // posterior starts tight (std ~ e^-3) so reconstruction signal
            // is not swamped by reparameterization noise early in training
            e_lv: {
                let ids = ConvIds {
                    w: store.add("enc/logvar/w", crate::tensor::Tensor::zeros(&[cfg.latent_ch, c2, 3, 3]), true),
                    b: store.add(
                        "enc/logvar/b",
                        crate::tensor::Tensor::from_vec(&[cfg.latent_ch], vec![-6.0; cfg.latent_ch]).unwrap(),
                        true,
                    ),
                };
                ids
            },
            d1: vae_conv(store, rng, "dec/c1", d1c, cfg.latent_ch, 3),
            dn1: vae_norm(store, "dec/n1", d1c),
            d2: vae_conv(store, rng, "dec/c2", d1c, d1c, 3),
            dn2: vae_norm(store, "dec/n2", d1c),
            d3: vae_conv(store, rng, "dec/c3", 4 * d2c, d1c, 3),
            dn3: vae_norm(store, "dec/n3", d2c),
            d4: vae_conv(store, rng, "dec/c4", 4 * d3c, d2c, 3),
            dn4: vae_norm(store, "dec/n4", d3c),
            d5: vae_conv(store, rng, "dec/out", cfg.in_ch, d3c, 3),
        }
    }

    fn conv(&self, tape: &mut Tape, store: &ParamStore, x: Var, c: &ConvIds, stride: usize) -> Var {
        let w = tape.param(store, c.w);
        let b = tape.param(store, c.b);
        tape.conv2d(x, w, Some(b), stride, 1)
    }

    fn norm(&self, tape: &mut Tape, store: &ParamStore, x: Var, n: &NormIds) -> Var {
        let g = tape.param(store, n.g);
        let b = tape.param(store, n.b);
        tape.group_norm(x, g, b, 8)
    }

    /// x [B, in_ch, R, R] -> (mu, logvar) each [B, latent_ch, R/4, R/4]
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> (Var, Var) {
        let h = self.conv(tape, store, x, &self.e1, 2);
        let h = self.norm(tape, store, h, &self.en1);
        let h = tape.silu(h);
        let h = self.conv(tape, store, h, &self.e2, 2);
        let h = self.norm(tape, store, h, &self.en2);
        let h = tape.silu(h);
        let h = self.conv(tape, store, h, &self.e3, 1);
        let h = self.norm(tape, store, h, &self.en3);
        let h = tape.silu(h);
        let mu = self.conv(tape, store, h, &self.e_mu, 1);
        let lv = self.conv(tape, store, h, &self.e_lv, 1);
        (mu, lv)
    }

    /// z [B, latent_ch, R/4, R/4] -> [B, in_ch, R, R], unbounded
    /// (consumers clamp to [-1, 1])
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let h = self.conv(tape, store, z, &self.d1, 1);
        let h = self.norm(tape, store, h, &self.dn1);
        let h = tape.silu(h);
        let h = self.conv(tape, store, h, &self.d2, 1);
        let h = self.norm(tape, store, h, &self.dn2);
        let h = tape.silu(h);
        // sub-pixel upsampling: each output pixel gets its own filter taps,
        // which keeps the piecewise-constant fields crisp
        let h = self.conv(tape, store, h, &self.d3, 1);
        let h = tape.depth_to_space2x(h);
        let h = self.norm(tape, store, h, &self.dn3);
        let h = tape.silu(h);
        let h = self.conv(tape, store, h, &self.d4, 1);
        let h = tape.depth_to_space2x(h);
        let h = self.norm(tape, store, h, &self.dn4);
        let h = tape.silu(h);
        self.conv(tape, store, h, &self.d5, 1)
    }

    /// Posterior mean for a batch of raw fields, times latent_scale: the
    /// representation the diffusion model sees.
    pub fn encode_scaled(&self, store: &ParamStore, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let batch = stack_batch(xs)?;
        let xv = tape.leaf(batch);
        let (mu, _) = self.encode(&mut tape, store, xv);
        let scaled = tape.scale(mu, self.latent_scale);
        Ok(unstack_batch(tape.value(scaled)))
    }

    /// Decode diffusion-space latents (undo latent_scale first).
    pub fn decode_scaled(&self, store: &ParamStore, zs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let batch = stack_batch(zs)?;
        let zv = tape.leaf(batch);
        let un = tape.scale(zv, 1.0 / self.latent_scale);
        let out = self.decode(&mut tape, store, un);
        Ok(unstack_batch(tape.value(out)))
    }

    pub fn save(&self, path: &std::path::Path, store: &ParamStore) -> Result<()> {
        let mut c = crate::container::Container::new();
        c.push_scalar("meta/in_ch", self.cfg.in_ch as f32)?;
        c.push_scalar("meta/resolution", self.cfg.resolution as f32)?;
        c.push_scalar("meta/latent_ch", self.cfg.latent_ch as f32)?;
        c.push_scalar("meta/latent_scale", self.latent_scale)?;
        store.save_into(&mut c, "p/")?;
        c.write_to(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Vae, ParamStore)> {
        let c = crate::container::Container::read_from(path)?;
        let in_ch = c.get_scalar("meta/in_ch")? as usize;
        let resolution = c.get_scalar("meta/resolution")? as usize;
        let cfg = if in_ch == 3 { VaeConfig::image(resolution) } else { VaeConfig::intrinsic(resolution) };
        if c.get_scalar("meta/latent_ch")? as usize != cfg.latent_ch {
            return Err(Error::io(path.display().to_string(), "unexpected latent channel count"));
        }
        let mut store = ParamStore::new();
        let mut vae = Vae::build(&mut store, &cfg, &mut Rng::new(0));
        vae.latent_scale = c.get_scalar("meta/latent_scale")?;
        store.load_from(&c, "p/")?;
        store.freeze_all();
        Ok((vae, store))
    }
}

/// [C,H,W] tensors -> one [B,C,H,W]
pub fn stack_batch(xs: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let shape = xs[0].shape().to_vec();
    let mut data = Vec::with_capacity(xs.len() * xs[0].numel());
    for x in xs {
        if x.shape() != shape {
            return Err(Error::contract("inconsistent shapes in batch"));
        }
        data.extend_from_slice(x.data());
    }
    let mut full = vec![xs.len()];
    full.extend_from_slice(&shape);
    Tensor::from_vec(&full, data)
}

pub fn unstack_batch(x: &Tensor) -> Vec<Tensor> {
    let b = x.shape()[0];
    let rest: Vec<usize> = x.shape()[1..].to_vec();
    let n: usize = rest.iter().product();
    (0..b)
        .map(|i| Tensor::from_vec(&rest, x.data()[i * n..(i + 1) * n].to_vec()).unwrap())
        .collect()
}

/// Zero out masked intrinsic fields (3 channels each) before encoding.
/// `mask[k] = true` zeroes field k.
pub fn apply_zero_mask(stack: &Tensor, mask: [bool; 4]) -> Tensor {
    let mut out = stack.clone();
    if stack.shape()[0] != STACK_CHANNELS {
        return out;
    }
    let plane: usize = stack.shape()[1..].iter().product();
    let block = 3 * plane;
    for (k, &m) in mask.iter().enumerate() {
        if m {
            out.data_mut()[k * block..(k + 1) * block].fill(0.0);
        }
    }
    out
}

/// Encode one intrinsic stack with per-field zero masking.
pub fn encode_intrinsics(
    vae: &Vae,
    store: &ParamStore,
    stack: &IntrinsicStack,
    mask: [bool; 4],
) -> Result<Tensor> {
    if vae.cfg.in_ch != STACK_CHANNELS {
        return Err(Error::contract("encode_intrinsics needs the 12-channel VAE"));
    }
    let masked = apply_zero_mask(stack.tensor(), mask);
    Ok(vae.encode_scaled(store, &[masked])?.remove(0))
}

/// Decode a latent back to a clamped intrinsic stack.
pub fn decode_intrinsics(vae: &Vae, store: &ParamStore, latent: &Tensor) -> Result<IntrinsicStack> {
    if vae.cfg.in_ch != STACK_CHANNELS {
        return Err(Error::contract("decode_intrinsics needs the 12-channel VAE"));
    }
    if latent.shape() != vae.cfg.latent_shape().as_slice() {
        return Err(Error::contract(format!(
            "latent shape {:?} does not match VAE latent {:?}",
            latent.shape(),
            vae.cfg.latent_shape()
        )));
    }
    let mut out = vae.decode_scaled(store, &[latent.clone()])?.remove(0);
    for v in out.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    let r = vae.cfg.resolution;
    IntrinsicStack::new(r, r, out)
}

#[derive(Clone, Debug)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub zero_mask_prob: f64,
    pub kl_weight: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            steps: 3000,
            batch: 8,
            lr: 1e-3,
            zero_mask_prob: 0.1,
            kl_weight: 1e-6,
            seed: 0,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VaeLossRow {
    pub step: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub wall_s: f64,
}

/// Train a VAE on [C,H,W] fields. 12-channel inputs get per-field zero
/// masking; masked fields are excluded from the reconstruction loss.
pub fn train_vae(
    data: &[Tensor],
    cfg: &VaeConfig,
    tc: &VaeTrainConfig,
) -> Result<(Vae, ParamStore, Vec<VaeLossRow>)> {
    if data.is_empty() {
        return Err(Error::contract("train_vae: dataset is empty"));
    }
    let mut store = ParamStore::new();
    let mut rng = Rng::new(tc.seed);
    let mut vae = Vae::build(&mut store, cfg, &mut rng);
    let adam = AdamWConfig { lr: tc.lr, ..Default::default() };
    let mut log = Vec::new();
    let t0 = std::time::Instant::now();
    let plane = cfg.resolution * cfg.resolution;
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch);
        let mut masks = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let idx = rng.below(data.len());
            let mask = if cfg.in_ch == STACK_CHANNELS {
                [
                    rng.bernoulli(tc.zero_mask_prob),
                    rng.bernoulli(tc.zero_mask_prob),
                    rng.bernoulli(tc.zero_mask_prob),
                    rng.bernoulli(tc.zero_mask_prob),
                ]
            } else {
                [false; 4]
            };
            batch.push(apply_zero_mask(&data[idx], mask));
            masks.push(mask);
        }
        let target = stack_batch(&batch)?;
        // loss mask: masked fields contribute nothing
        let mut mask_t = Tensor::zeros(target.shape());
        for (i, m) in masks.iter().enumerate() {
            for (k, &zeroed) in m.iter().enumerate() {
                if !zeroed {
                    let groups = cfg.in_ch / 3;
                    if k < groups {
                        let off = i * cfg.in_ch * plane + k * 3 * plane;
                        mask_t.data_mut()[off..off + 3 * plane].fill(1.0);
                    }
                }
            }
            if cfg.in_ch == 3 {
                let off = i * 3 * plane;
                mask_t.data_mut()[off..off + 3 * plane].fill(1.0);
            }
        }

        let mut tape = Tape::new();
        let xv = tape.leaf(target.clone());
        let (mu, lv) = vae.encode(&mut tape, &store, xv);
        let half_lv = tape.scale(lv, 0.5);
        let std = tape.exp(half_lv);
        let noise = {
            let mut n = Tensor::zeros(tape.value(mu).shape());
            n.fill_normal(&mut rng);
            tape.leaf(n)
        };
        let scaled_noise = tape.mul(std, noise);
        let z = tape.add(mu, scaled_noise);
        let rec = vae.decode(&mut tape, &store, z);
        let recon = tape.mse(rec, target, Some(mask_t));
        let kl = tape.kl_normal(mu, lv);
        let klw = tape.scale(kl, tc.kl_weight);
        let total = tape.add(recon, klw);
        let total_v = tape.scalar_value(total) as f64;
        let recon_v = tape.scalar_value(recon) as f64;
        let kl_v = tape.scalar_value(kl) as f64;
        if !total_v.is_finite() {
            return Err(Error::numeric(format!("train_vae: non-finite loss at step {step}")));
        }
        store.zero_grads();
        tape.backward(total, &mut store);
        // cosine decay to zero over the configured budget
        let frac = step as f64 / tc.steps.max(1) as f64;
        let lr = tc.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        store.adamw_step(&AdamWConfig { lr, ..adam });
        if step % tc.log_every == 0 || step + 1 == tc.steps {
            log.push(VaeLossRow {
                step,
                recon: recon_v,
                kl: kl_v,
                total: total_v,
                wall_s: t0.elapsed().as_secs_f64(),
            });
        }
    }
    // latent scale from the encoded means of a data sample
    let probe: Vec<Tensor> = data.iter().take(64.min(data.len())).cloned().collect();
    let mut tape = Tape::new();
    let xv = tape.leaf(stack_batch(&probe)?);
    let (mu, _) = vae.encode(&mut tape, &store, xv);
    let md = tape.value(mu).data();
    let mean = crate::tensor::sum_f64(md) / md.len() as f64;
    let mut var = 0.0f64;
    for &v in md {
        let d = v as f64 - mean;
        var += d * d;
    }
    var /= md.len() as f64;
    vae.latent_scale = (1.0 / var.sqrt().max(1e-6)) as f32;
    Ok((vae, store, log))
}

/// Held-out reconstruction error per channel; returns (mean, worst).
pub fn eval_vae_per_channel_mse(
    vae: &Vae,
    store: &ParamStore,
    data: &[Tensor],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let batch = stack_batch(data)?;
    let xv = tape.leaf(batch.clone());
    let (mu, _) = vae.encode(&mut tape, store, xv);
    let rec = vae.decode(&mut tape, store, mu);
    let out = tape.value(rec);
    let c = vae.cfg.in_ch;
    let plane = vae.cfg.resolution * vae.cfg.resolution;
    let b = data.len();
    let mut worst = 0.0f64;
    let mut total = 0.0f64;
    for ch in 0..c {
        let mut acc = 0.0f64;
        for i in 0..b {
            let off = i * c * plane + ch * plane;
            for p in 0..plane {
                let d = (out.data()[off + p] - batch.data()[off + p]) as f64;
                acc += d * d;
            }
        }
        let mse = acc / (b * plane) as f64;
        worst = worst.max(mse);
        total += mse;
    }
    Ok((total / c as f64, worst))
}

#[cfg(test)]
mod vae_tests {
    use super::*;
    use crate::scenegen;

    fn small_stacks(n: usize, seed: u64, res: usize) -> Vec<Tensor> {
        scenegen::generate_dataset(n, seed, res)
            .unwrap()
            .into_iter()
            .map(|r| r.sample.intrinsics.into_tensor())
            .collect()
    }

    #[test]
    fn vae_shapes_and_roundtrip_paths() {
        let cfg = VaeConfig::intrinsic(32);
        let mut store = ParamStore::new();
        let vae = Vae::build(&mut store, &cfg, &mut Rng::new(1));
        let data = small_stacks(2, 5, 32);
        let lat = vae.encode_scaled(&store, &data).unwrap();
        assert_eq!(lat[0].shape(), &[4, 8, 8]);
        let back = vae.decode_scaled(&store, &lat).unwrap();
        assert_eq!(back[0].shape(), &[12, 32, 32]);
        // decode of a pure-zero latent is deterministic and finite
        let z = Tensor::zeros(&[4, 8, 8]);
        let a = decode_intrinsics(&vae, &store, &z).unwrap();
        let b = decode_intrinsics(&vae, &store, &z).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert!(a.tensor().is_finite());
        a.validate_ranges().unwrap();
    }

    #[test]
    fn image_and_intrinsic_latent_shapes_match() {
        let ci = VaeConfig::image(64);
        let cx = VaeConfig::intrinsic(64);
        assert_eq!(ci.latent_shape(), cx.latent_shape());
    }

    #[test]
    fn zero_mask_zeroes_exactly_one_field() {
        let data = small_stacks(1, 2, 32).remove(0);
        let masked = apply_zero_mask(&data, [false, true, false, false]);
        let plane = 32 * 32;
        // normals (field 1) zeroed, others untouched
        assert!(masked.data()[3 * plane..6 * plane].iter().all(|&v| v == 0.0));
        assert_eq!(&masked.data()[..3 * plane], &data.data()[..3 * plane]);
        assert_eq!(&masked.data()[6 * plane..], &data.data()[6 * plane..]);
    }

    #[test]
    fn vae_overfits_16_samples() {
        // smoke-training oracle: tiny dataset, no masking, loss < 1e-3
        let data = small_stacks(16, 7, 32);
        let cfg = VaeConfig::intrinsic(32);
        let tc = VaeTrainConfig {
            steps: 2600,
            batch: 8,
            lr: 3e-3,
            zero_mask_prob: 0.0,
            seed: 3,
            log_every: 25,
            ..Default::default()
        };
        let (vae, store, log) = train_vae(&data, &cfg, &tc).unwrap();
        let (mean_mse, worst) = eval_vae_per_channel_mse(&vae, &store, &data).unwrap();
        assert!(mean_mse < 1e-3, "train-set mean per-channel MSE {mean_mse} (worst {worst})");

        // EMA of the loss is monotone nonincreasing over any 500-step window
        let mut ema = log[0].total;
        let mut ema_at: Vec<(usize, f64)> = vec![(0, ema)];
        for row in &log[1..] {
            ema = 0.9 * ema + 0.1 * row.total;
            ema_at.push((row.step, ema));
        }
        for (i, &(s0, e0)) in ema_at.iter().enumerate() {
            for &(s1, e1) in &ema_at[i + 1..] {
                if s1 >= s0 + 500 {
                    assert!(
                        e1 <= e0 * 1.05,
                        "EMA rose over [{s0}, {s1}]: {e0} -> {e1}"
                    );
                    break;
                }
            }
        }
    }

    #[test]
    fn per_intrinsic_information_is_separable() {
        // zeroing one intrinsic at encode time materially changes only that
        // intrinsic's reconstruction
        let data = small_stacks(24, 11, 32);
        let cfg = VaeConfig::intrinsic(32);
        let tc = VaeTrainConfig {
            steps: 1500,
            batch: 8,
            lr: 2e-3,
            zero_mask_prob: 0.25,
            seed: 5,
            log_every: 100,
            ..Default::default()
        };
        let (vae, store, _) = train_vae(&data, &cfg, &tc).unwrap();
        let plane = 32 * 32;
        let probe = &data[0];
        let stack = IntrinsicStack::new(32, 32, probe.clone()).unwrap();
        let full = {
            let z = encode_intrinsics(&vae, &store, &stack, [false; 4]).unwrap();
            decode_intrinsics(&vae, &store, &z).unwrap()
        };
        let masked = {
            let z = encode_intrinsics(&vae, &store, &stack, [false, false, true, false]).unwrap();
            decode_intrinsics(&vae, &store, &z).unwrap()
        };
        let field_mse = |a: &IntrinsicStack, b: &Tensor, k: usize| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 * plane {
                let d = (a.field(k)[i] - b.data()[k * 3 * plane + i]) as f64;
                acc += d * d;
            }
            acc / (3 * plane) as f64
        };
        // the zeroed field (segmentation) reconstructs worse; the other
        // intrinsics carry correlated structure, so the drop is bounded but
        // must be clearly visible
        let seg_full = field_mse(&full, probe, 2);
        let seg_masked = field_mse(&masked, probe, 2);
        assert!(
            seg_masked > 1.3 * seg_full.max(1e-4),
            "masking segmentation should hurt it: {seg_full} -> {seg_masked}"
        );
        // ...while untouched fields stay within 10x of their baseline
        for k in [0usize, 1, 3] {
            let base = field_mse(&full, probe, k).max(1e-4);
            let with_mask = field_mse(&masked, probe, k);
            assert!(
                with_mask < 10.0 * base,
                "field {k} degraded too much: {base} -> {with_mask}"
            );
        }
    }

    #[test]
    fn vae_checkpoint_roundtrip() {
        let cfg = VaeConfig::image(32);
        let mut store = ParamStore::new();
        let mut vae = Vae::build(&mut store, &cfg, &mut Rng::new(9));
        vae.latent_scale = 2.5;
        let dir = std::env::temp_dir().join("ildm-vae-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vae.ildc");
        vae.save(&path, &store).unwrap();
        let (vae2, store2) = Vae::load(&path).unwrap();
        assert_eq!(vae2.cfg, cfg);
        assert_eq!(vae2.latent_scale, 2.5);
        assert_eq!(store.content_hash(), store2.content_hash());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let cfg = VaeConfig::image(32);
        let e = train_vae(&[], &cfg, &VaeTrainConfig::default()).unwrap_err();
        assert_eq!(e.category(), "contract");
    }
}
