//! Procedural scene synthesizer: groups of K styled renders of a single 2-D
//! scene with an exact binary foreground mask, in two families. The
//! "rendered" family carries public style labels; the "real-like" family uses
//! band-limited noise textures and a perturbed style table, and its true
//! style indices go only into a sealed oracle sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seeds;

/// Number of capture-condition styles.
pub const STYLE_COUNT: usize = 10;

const TAG_SPEC: u64 = 1;
const TAG_JITTER: u64 = 2;
const TAG_PERMUTE: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weather {
    Clear,
    PartlyCloudy,
    Cloudy,
    Night,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeOfDay {
    SunriseSunset,
    Noon,
    OtherTimes,
    Night,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Rendered,
    RealLike,
}

impl Family {
    /// Stable tag used in seed derivation chains.
    pub fn tag_u64(self) -> u64 {
        match self {
            Family::Rendered => 101,
            Family::RealLike => 202,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Rendered => "rendered",
            Family::RealLike => "real-like",
        }
    }
}

/// One of the K = 10 styles: nine weather x time-of-day combinations over
/// {Clear, PartlyCloudy, Cloudy} x {SunriseSunset, Noon, OtherTimes}, plus
/// one Night style at index 9.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleId {
    index: usize,
}

impl StyleId {
    pub fn new(index: usize) -> Result<Self> {
        if index >= STYLE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "style index {index} out of range 0..{STYLE_COUNT}"
            )));
        }
        Ok(StyleId { index })
    }

    pub fn index(self) -> usize {
        self.index
    }

    pub fn all() -> impl Iterator<Item = StyleId> {
        (0..STYLE_COUNT).map(|index| StyleId { index })
    }

    pub fn weather(self) -> Weather {
        match self.index {
            9 => Weather::Night,
            i => match i / 3 {
                0 => Weather::Clear,
                1 => Weather::PartlyCloudy,
                _ => Weather::Cloudy,
            },
        }
    }

    pub fn time(self) -> TimeOfDay {
        match self.index {
            9 => TimeOfDay::Night,
            i => match i % 3 {
                0 => TimeOfDay::SunriseSunset,
                1 => TimeOfDay::Noon,
                _ => TimeOfDay::OtherTimes,
            },
        }
    }

    pub fn name(self) -> String {
        format!("{:?}/{:?}", self.weather(), self.time())
    }
}

/// Parametric realization of a capture condition, applied pixelwise on top
/// of the base render: gamma, per-channel gain/bias, saturation toward
/// luminance, additive brightness, final clamp to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub gamma: f64,
    pub saturation: f64,
    pub brightness: f64,
}

impl StyleParams {
    pub fn identity() -> Self {
        StyleParams {
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            saturation: 1.0,
            brightness: 0.0,
        }
    }
}

/// Fixed base table: Noon bright and neutral, SunriseSunset warm with
/// gamma < 1, OtherTimes mildly dimmed, Night at roughly quarter gain with a
/// cool cast and low saturation; Cloudy variants cut saturation and contrast
/// against Clear, PartlyCloudy sits halfway.
pub fn base_style_params(style: StyleId) -> StyleParams {
    if style.index() == 9 {
        return StyleParams {
            gain: [0.22, 0.24, 0.30],
            bias: [0.00, 0.01, 0.03],
            gamma: 1.10,
            saturation: 0.40,
            brightness: -0.02,
        };
    }
    let (sat_w, gain_w, bias_w) = match style.weather() {
        Weather::Clear => (1.00, 1.00, 0.00),
        Weather::PartlyCloudy => (0.78, 0.88, 0.06),
        _ => (0.55, 0.76, 0.12),
    };
    let (gain_t, gamma_t, bright_t): ([f64; 3], f64, f64) = match style.time() {
        TimeOfDay::SunriseSunset => ([1.18, 0.98, 0.80], 0.85, -0.02),
        TimeOfDay::Noon => ([1.02, 1.02, 1.02], 1.00, 0.10),
        _ => ([0.96, 0.98, 1.00], 1.00, -0.08),
    };
    StyleParams {
        gain: [
            gain_w * gain_t[0],
            gain_w * gain_t[1],
            gain_w * gain_t[2],
        ],
        bias: [bias_w; 3],
        gamma: gamma_t,
        saturation: sat_w,
        brightness: bright_t,
    }
}

/// Fixed family perturbation for the real-like domain, composed on top of
/// the base table before per-scene jitter.
fn family_perturb(p: StyleParams, family: Family) -> StyleParams {
    match family {
        Family::Rendered => p,
        Family::RealLike => StyleParams {
            gain: [p.gain[0] * 1.06, p.gain[1] * 0.97, p.gain[2] * 1.04],
            bias: [p.bias[0] + 0.01, p.bias[1] + 0.01, p.bias[2] + 0.01],
            gamma: p.gamma * 0.95,
            saturation: (p.saturation * 0.92).clamp(0.0, 1.0),
            brightness: p.brightness + 0.01,
        },
    }
}

/// Deterministic style parameters for (style, family, jitter_seed): base
/// table, family perturbation, then a +-3% multiplicative / +-0.02 additive
/// seeded jitter.
pub fn style_params(style: StyleId, family: Family, jitter_seed: u64) -> StyleParams {
    let mut p = family_perturb(base_style_params(style), family);
    let mut rng = seeds::rng(seeds::derive(jitter_seed, &[style.index() as u64]));
    let mut mul = |v: f64, rng: &mut ChaCha8Rng| v * (1.0 + rng.gen_range(-0.03..0.03));
    for c in 0..3 {
        p.gain[c] = mul(p.gain[c], &mut rng);
    }
    for c in 0..3 {
        p.bias[c] += rng.gen_range(-0.02..0.02);
    }
    p.gamma = mul(p.gamma, &mut rng).max(0.05);
    p.saturation = mul(p.saturation, &mut rng).clamp(0.0, 1.0);
    p.brightness += rng.gen_range(-0.02..0.02);
    p
}

/// Apply a style transform to a (3, H, W) image in [0, 1]. Identity
/// parameters reproduce the input bit-for-bit.
pub fn apply_style(image: &Tensor, p: &StyleParams) -> Tensor {
    let (_, _, h, w) = (1, 3, image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = image.clone();
    let d = out.data_mut();
    for j in 0..plane {
        let mut rgb = [d[j], d[plane + j], d[2 * plane + j]];
        if p.gamma != 1.0 {
            for v in &mut rgb {
                *v = v.max(0.0).powf(p.gamma);
            }
        }
        for c in 0..3 {
            if p.gain[c] != 1.0 || p.bias[c] != 0.0 {
                rgb[c] = p.gain[c] * rgb[c] + p.bias[c];
            }
        }
        if p.saturation != 1.0 {
            let gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            for v in &mut rgb {
                *v = gray + p.saturation * (*v - gray);
            }
        }
        for (c, v) in rgb.iter().enumerate() {
            let mut val = *v;
            if p.brightness != 0.0 {
                val += p.brightness;
            }
            if !(0.0..=1.0).contains(&val) {
                val = val.clamp(0.0, 1.0);
            }
            d[c * plane + j] = val;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Figure {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    /// Regular n-gon with elliptical scaling; convex by construction.
    Polygon {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
        sides: usize,
    },
}

impl Figure {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Figure::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (du, dv) = (u - cx, v - cy);
                let a = du * angle.cos() + dv * angle.sin();
                let b = -du * angle.sin() + dv * angle.cos();
                (a / rx).powi(2) + (b / ry).powi(2) <= 1.0
            }
            Figure::Polygon {
                cx,
                cy,
                rx,
                ry,
                angle,
                sides,
            } => {
                let verts: Vec<(f64, f64)> = (0..sides)
                    .map(|i| {
                        let t = angle + 2.0 * std::f64::consts::PI * i as f64 / sides as f64;
                        (cx + rx * t.cos(), cy + ry * t.sin())
                    })
                    .collect();
                for i in 0..sides {
                    let (x1, y1) = verts[i];
                    let (x2, y2) = verts[(i + 1) % sides];
                    let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Figure::Ellipse { cx, cy, .. } | Figure::Polygon { cx, cy, .. } => (cx, cy),
        }
    }

    fn max_radius(&self) -> f64 {
        match *self {
            Figure::Ellipse { rx, ry, .. } | Figure::Polygon { rx, ry, .. } => rx.max(ry),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    strength: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackgroundRecipe {
    grad_start: [f64; 3],
    grad_end: [f64; 3],
    grad_angle: f64,
    blobs: Vec<Blob>,
    /// Plane waves (amp, fu, fv, phase) summed into a texture term. The
    /// rendered family uses two smooth low-frequency waves; the real-like
    /// family uses a band-limited stack of six.
    waves: Vec<(f64, f64, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForegroundRecipe {
    figure: Figure,
    color: [f64; 3],
    shade: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

/// Deterministic recipe for one scene, in normalized [0,1]^2 coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub family: Family,
    pub height: usize,
    pub width: usize,
    pub background: BackgroundRecipe,
    pub foreground: ForegroundRecipe,
}

fn waves_for(family: Family, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64, f64)> {
    use std::f64::consts::TAU;
    match family {
        Family::Rendered => (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.01..0.035),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(0.0..TAU),
                )
            })
            .collect(),
        Family::RealLike => (0..6)
            .map(|_| {
                let f = rng.gen_range(6.0..14.0);
                let theta = rng.gen_range(0.0..TAU);
                (
                    rng.gen_range(0.015..0.045),
                    f * theta.cos(),
                    f * theta.sin(),
                    rng.gen_range(0.0..TAU),
                )
            })
            .collect(),
    }
}

impl SceneSpec {
    /// Generate a scene recipe. The foreground is guaranteed fully inside
    /// the bounds with an area ratio inside [0.02, 0.5].
    pub fn generate(seed: u64, height: usize, width: usize, family: Family) -> SceneSpec {
        let mut rng = seeds::rng(seeds::derive(seed, &[TAG_SPEC, family.tag_u64()]));
        let mut color = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> [f64; 3] {
            [
                rng.gen_range(lo..hi),
                rng.gen_range(lo..hi),
                rng.gen_range(lo..hi),
            ]
        };
        let grad_start = color(&mut rng, 0.15, 0.75);
        let grad_end = color(&mut rng, 0.15, 0.75);
        let grad_angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let n_blobs = rng.gen_range(2..=5);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                cx: rng.gen_range(0.0..1.0),
                cy: rng.gen_range(0.0..1.0),
                rx: rng.gen_range(0.10..0.35),
                ry: rng.gen_range(0.10..0.35),
                color: color(&mut rng, 0.05, 0.95),
                strength: rng.gen_range(0.3..0.7),
            })
            .collect();
        let bg_waves = waves_for(family, &mut rng);

        // Foreground: pick a target area ratio well inside [0.02, 0.5] and
        // re-draw on the rare pixelization miss.
        let figure = loop {
            let ratio = rng.gen_range(0.06..0.30);
            let aspect = rng.gen_range(0.6..1.7);
            let sides = rng.gen_range(3..=8);
            let use_ellipse = rng.gen_bool(0.5);
            let unit_area = if use_ellipse {
                std::f64::consts::PI
            } else {
                sides as f64 / 2.0 * (std::f64::consts::TAU / sides as f64).sin()
            };
            let r = (ratio / unit_area).sqrt();
            let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
            let m = rx.max(ry) + 0.03;
            if m >= 0.5 {
                continue;
            }
            let cx = rng.gen_range(m..1.0 - m);
            let cy = rng.gen_range(m..1.0 - m);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let fig = if use_ellipse {
                Figure::Ellipse {
                    cx,
                    cy,
                    rx,
                    ry,
                    angle,
                }
            } else {
                Figure::Polygon {
                    cx,
                    cy,
                    rx,
                    ry,
                    angle,
                    sides,
                }
            };
            let px = count_inside(&fig, height, width);
            let r_actual = px as f64 / (height * width) as f64;
            if (0.02..=0.5).contains(&r_actual) && px > 0 {
                break fig;
            }
        };
        let fg_color = color(&mut rng, 0.1, 0.9);
        let shade = rng.gen_range(0.1..0.45);
        let fg_waves = waves_for(family, &mut rng);
        SceneSpec {
            seed,
            family,
            height,
            width,
            background: BackgroundRecipe {
                grad_start,
                grad_end,
                grad_angle,
                blobs,
                waves: bg_waves,
            },
            foreground: ForegroundRecipe {
                figure,
                color: fg_color,
                shade,
                waves: fg_waves,
            },
        }
    }
}

fn count_inside(fig: &Figure, height: usize, width: usize) -> usize {
    let mut n = 0;
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let v = (y as f64 + 0.5) / height as f64;
            if fig.contains(u, v) {
                n += 1;
            }
        }
    }
    n
}

fn texture(waves: &[(f64, f64, f64, f64)], u: f64, v: f64) -> f64 {
    use std::f64::consts::TAU;
    waves
        .iter()
        .map(|&(a, fu, fv, p)| a * (TAU * (fu * u + fv * v) + p).sin())
        .sum()
}

/// Style-independent render of the scene: (image, mask). The mask depends
/// only on the foreground geometry.
pub fn base_render(spec: &SceneSpec) -> (Tensor, Tensor) {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut img = Tensor::zeros(&[3, h, w]);
    let mut mask = Tensor::zeros(&[1, h, w]);
    let bg = &spec.background;
    let fg = &spec.foreground;
    let (dir_u, dir_v) = (bg.grad_angle.cos(), bg.grad_angle.sin());
    let (fcx, fcy) = fg.figure.center();
    let frad = fg.figure.max_radius();

    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let j = y * w + x;
            let inside = fg.figure.contains(u, v);
            let mut rgb = if inside {
                mask.data_mut()[j] = 1.0;
                let d2 = (((u - fcx).powi(2) + (v - fcy).powi(2)).sqrt() / frad).min(1.0);
                let t = texture(&fg.waves, u, v);
                [
                    fg.color[0] * (1.0 - fg.shade * d2) + t,
                    fg.color[1] * (1.0 - fg.shade * d2) + t,
                    fg.color[2] * (1.0 - fg.shade * d2) + t,
                ]
            } else {
                let s = 0.5 + 0.5 * ((u - 0.5) * dir_u + (v - 0.5) * dir_v) / 0.7071067811865476;
                let s = s.clamp(0.0, 1.0);
                let mut c = [
                    bg.grad_start[0] + s * (bg.grad_end[0] - bg.grad_start[0]),
                    bg.grad_start[1] + s * (bg.grad_end[1] - bg.grad_start[1]),
                    bg.grad_start[2] + s * (bg.grad_end[2] - bg.grad_start[2]),
                ];
                for blob in &bg.blobs {
                    let d2 = ((u - blob.cx) / blob.rx).powi(2) + ((v - blob.cy) / blob.ry).powi(2);
                    let wgt = blob.strength * (-d2 * 2.0).exp();
                    for ch in 0..3 {
                        c[ch] += wgt * (blob.color[ch] - c[ch]);
                    }
                }
                let t = texture(&bg.waves, u, v);
                [c[0] + t, c[1] + t, c[2] + t]
            };
            for (ch, val) in rgb.iter_mut().enumerate() {
                img.data_mut()[ch * plane + j] = val.clamp(0.0, 1.0);
            }
        }
    }
    (img, mask)
}

/// Deterministic styled render. The mask depends only on the spec, never on
/// the style.
pub fn render_scene(spec: &SceneSpec, style: StyleId, jitter_seed: u64) -> (Tensor, Tensor) {
    let (base, mask) = base_render(spec);
    let params = style_params(style, spec.family, jitter_seed);
    (apply_style(&base, &params), mask)
}

/// One 2-D scene rendered under all K styles plus its exact mask. `images`
/// are stored in position order; `style_ids[pos]` is the true style at that
/// position (a seeded permutation for the real-like family, identity for the
/// rendered family).
#[derive(Clone, Debug)]
pub struct SceneGroup {
    pub scene_id: u64,
    pub family: Family,
    pub jitter_seed: u64,
    pub images: Vec<Tensor>,
    pub mask: Tensor,
    pub style_ids: Vec<StyleId>,
}

impl SceneGroup {
    pub fn resolution(&self) -> (usize, usize) {
        (self.mask.shape()[1], self.mask.shape()[2])
    }
}

/// Build `n_scenes` scene groups. Deterministic given (n_scenes, family,
/// seed); the real-like family shuffles which position holds which style so
/// that file positions do not expose style indices.
pub fn build_corpus(
    n_scenes: usize,
    height: usize,
    width: usize,
    family: Family,
    seed: u64,
) -> Result<Vec<SceneGroup>> {
    if n_scenes == 0 {
        return Err(Error::InvalidArgument(
            "n_scenes must be at least 1".into(),
        ));
    }
    let groups: Vec<SceneGroup> = (0..n_scenes)
        .map(|i| {
            let scene_seed = seeds::derive(seed, &[family.tag_u64(), i as u64]);
            let spec = SceneSpec::generate(scene_seed, height, width, family);
            let jitter_seed = seeds::derive(scene_seed, &[TAG_JITTER]);
            let (base, mask) = base_render(&spec);
            let mut style_ids: Vec<StyleId> = StyleId::all().collect();
            if family == Family::RealLike {
                let mut rng = seeds::rng(seeds::derive(scene_seed, &[TAG_PERMUTE]));
                // Fisher-Yates
                for k in (1..style_ids.len()).rev() {
                    let j = rng.gen_range(0..=k);
                    style_ids.swap(k, j);
                }
            }
            let images = style_ids
                .iter()
                .map(|&s| apply_style(&base, &style_params(s, family, jitter_seed)))
                .collect();
            SceneGroup {
                scene_id: i as u64,
                family,
                jitter_seed,
                images,
                mask,
                style_ids,
            }
        })
        .collect();
    Ok(groups)
}

// ---------------------------------------------------------------------------
// On-disk corpus format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    scene_id: u64,
    family: Family,
    /// Present for the rendered family only; real-like style ids live in
    /// the sealed oracle file.
    style_ids: Option<Vec<usize>>,
    jitter_seed: u64,
}

pub fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut buf = vec![0u8; 3 * plane];
    for j in 0..plane {
        for c in 0..3 {
            buf[3 * j + c] = (image.data()[c * plane + j] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized to fit");
    img.save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut t = Tensor::zeros(&[3, h, w]);
    for (j, px) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + j] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn save_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let mut buf = vec![0u8; h * w];
    for (dst, &v) in buf.iter_mut().zip(mask.data()) {
        *dst = if v == 1.0 {
            255
        } else if v == 0.0 {
            0
        } else {
            return Err(Error::NonBinaryMask);
        };
    }
    let img: image::GrayImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer sized to fit");
    img.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[1, h, w]);
    for (dst, px) in t.data_mut().iter_mut().zip(img.pixels()) {
        *dst = match px.0[0] {
            0 => 0.0,
            255 => 1.0,
            _ => return Err(Error::NonBinaryMask),
        };
    }
    Ok(t)
}

/// Write both families as one directory tree:
/// `scenes/<scene_id>/style_<k>.png`, `mask.png`, `meta.json`, plus the
/// sealed `oracle_styles.json` mapping real-like scene ids to the true style
/// index at each position. Scene ids are globally unique (real-like ids are
/// offset past the rendered ones).
pub fn write_corpus(root: &Path, rendered: &[SceneGroup], real_like: &[SceneGroup]) -> Result<()> {
    let scenes = root.join("scenes");
    fs::create_dir_all(&scenes)?;
    let mut oracle: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let offset = rendered.len() as u64;
    for (group, id) in rendered
        .iter()
        .map(|g| (g, g.scene_id))
        .chain(real_like.iter().map(|g| (g, g.scene_id + offset)))
    {
        let dir = scenes.join(id.to_string());
        fs::create_dir_all(&dir)?;
        for (k, img) in group.images.iter().enumerate() {
            save_image_png(&dir.join(format!("style_{k}.png")), img)?;
        }
        save_mask_png(&dir.join("mask.png"), &group.mask)?;
        let meta = SceneMeta {
            scene_id: id,
            family: group.family,
            style_ids: match group.family {
                Family::Rendered => {
                    Some(group.style_ids.iter().map(|s| s.index()).collect())
                }
                Family::RealLike => {
                    oracle.insert(id, group.style_ids.iter().map(|s| s.index()).collect());
                    None
                }
            },
            jitter_seed: group.jitter_seed,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    }
    fs::write(
        root.join("oracle_styles.json"),
        serde_json::to_vec_pretty(&oracle)?,
    )?;
    Ok(())
}

/// A scene loaded back from disk. Real-like scenes come back without style
/// ids; the sealed oracle is loaded separately by evaluation code.
#[derive(Clone, Debug)]
pub struct CorpusScene {
    pub scene_id: u64,
    pub family: Family,
    pub images: Vec<Tensor>,
    pub mask: Tensor,
    pub style_ids: Option<Vec<usize>>,
}

pub fn load_corpus(root: &Path) -> Result<Vec<CorpusScene>> {
    let scenes = root.join("scenes");
    let mut ids: Vec<u64> = Vec::new();
    for entry in fs::read_dir(&scenes)? {
        let entry = entry?;
        if let Ok(id) = entry.file_name().to_string_lossy().parse::<u64>() {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let dir = scenes.join(id.to_string());
        let meta: SceneMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let mut images = Vec::with_capacity(STYLE_COUNT);
        for k in 0..STYLE_COUNT {
            images.push(load_image_png(&dir.join(format!("style_{k}.png")))?);
        }
        let mask = load_mask_png(&dir.join("mask.png"))?;
        out.push(CorpusScene {
            scene_id: meta.scene_id,
            family: meta.family,
            images,
            mask,
            style_ids: meta.style_ids,
        });
    }
    Ok(out)
}

/// Load the sealed oracle: real-like scene id -> true style index per
/// position.
pub fn load_oracle(path: &Path) -> Result<BTreeMap<u64, Vec<usize>>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_luminance(img: &Tensor) -> f64 {
        let plane = img.shape()[1] * img.shape()[2];
        (0..plane)
            .map(|j| {
                0.299 * img.data()[j]
                    + 0.587 * img.data()[plane + j]
                    + 0.114 * img.data()[2 * plane + j]
            })
            .sum::<f64>()
            / plane as f64
    }

    #[test]
    fn mask_is_style_invariant() {
        let spec = SceneSpec::generate(7, 32, 32, Family::Rendered);
        let (_, m1) = render_scene(&spec, StyleId::new(1).unwrap(), 3);
        let (_, m2) = render_scene(&spec, StyleId::new(9).unwrap(), 3);
        assert_eq!(m1, m2);
    }

    #[test]
    fn identity_style_is_a_no_op() {
        let spec = SceneSpec::generate(3, 24, 24, Family::Rendered);
        let (base, _) = base_render(&spec);
        let styled = apply_style(&base, &StyleParams::identity());
        assert_eq!(base, styled);
    }

    #[test]
    fn clear_noon_brighter_than_night() {
        for seed in [1u64, 2, 3, 4, 5] {
            let spec = SceneSpec::generate(seed, 32, 32, Family::Rendered);
            let (noon, _) = render_scene(&spec, StyleId::new(1).unwrap(), seed);
            let (night, _) = render_scene(&spec, StyleId::new(9).unwrap(), seed);
            assert!(mean_luminance(&noon) > mean_luminance(&night));
        }
    }

    #[test]
    fn corpus_counts_and_invariants() {
        let groups = build_corpus(3, 24, 24, Family::Rendered, 11).unwrap();
        assert_eq!(groups.len(), 3);
        let images: usize = groups.iter().map(|g| g.images.len()).sum();
        assert_eq!(images, 30);
        for g in &groups {
            assert_eq!(g.style_ids.len(), STYLE_COUNT);
            let mut seen = [false; STYLE_COUNT];
            for s in &g.style_ids {
                assert!(!seen[s.index()]);
                seen[s.index()] = true;
            }
            assert!(g.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(g.mask.data().iter().any(|&v| v == 1.0));
            let ratio =
                g.mask.data().iter().sum::<f64>() / g.mask.numel() as f64;
            assert!((0.02..=0.5).contains(&ratio), "ratio {ratio}");
            for img in &g.images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = build_corpus(2, 24, 24, Family::RealLike, 5).unwrap();
        let b = build_corpus(2, 24, 24, Family::RealLike, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.style_ids, y.style_ids);
            assert_eq!(x.mask, y.mask);
            for (ix, iy) in x.images.iter().zip(&y.images) {
                assert_eq!(ix, iy);
            }
        }
    }

    #[test]
    fn families_differ_pixelwise() {
        let rd = build_corpus(1, 24, 24, Family::Rendered, 5).unwrap();
        let rl = build_corpus(1, 24, 24, Family::RealLike, 5).unwrap();
        assert_ne!(rd[0].images[0], rl[0].images[0]);
    }

    #[test]
    fn zero_scene_corpus_is_rejected() {
        assert!(build_corpus(0, 24, 24, Family::Rendered, 1).is_err());
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let rendered = build_corpus(2, 16, 16, Family::Rendered, 9).unwrap();
        let real = build_corpus(1, 16, 16, Family::RealLike, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &rendered, &real).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].family, Family::Rendered);
        assert!(loaded[0].style_ids.is_some());
        assert_eq!(loaded[2].family, Family::RealLike);
        assert!(loaded[2].style_ids.is_none(), "real-like styles are sealed");
        let oracle = load_oracle(&dir.path().join("oracle_styles.json")).unwrap();
        assert_eq!(oracle.len(), 1);
        let truth: Vec<usize> = real[0].style_ids.iter().map(|s| s.index()).collect();
        assert_eq!(oracle[&2], truth);
        // masks survive the 8-bit round trip exactly
        assert_eq!(loaded[0].mask, rendered[0].mask);
    }
}
