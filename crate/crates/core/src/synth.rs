//! Synthetic shape scenes and training triplets.
//!
//! A scene is a textured grayscale background with filled shapes drawn in
//! list order (later objects on top). Ground-truth masks are rasterized at
//! pixel centers, so a mask is exactly the set of pixels the renderer fills
//! for that object. Per-pixel noise is a hash of `(scene seed, x, y)`; a
//! scene renders identically whatever window is requested.
//!
//! A positive triplet is a patch whose center lies within the centering
//! tolerance of an object's center and whose object size is inside the
//! canonical band. Negatives have no object that is both within twice the
//! tolerance and inside twice the band.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Blob];
}

/// One filled shape. `size` is the diameter of the circle the shape is
/// inscribed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub rotation: f64,
    /// Minor/major axis ratio for ellipses and rectangles.
    pub aspect: f64,
    /// Polygon vertices in object-local coordinates (triangles and blobs).
    pub vertices: Vec<(f64, f64)>,
    pub fill: f64,
    pub texture_amp: f64,
    pub texture_freq: f64,
    pub texture_phase: f64,
}

impl SceneObject {
    /// Whether the point `(px, py)` lies inside the shape.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let r = self.size / 2.0;
        if dx * dx + dy * dy > r * r + 1e-9 {
            return false;
        }
        let (s, c) = libm::sincos(-self.rotation);
        let (u, v) = (c * dx - s * dy, s * dx + c * dy);
        match self.kind {
            ShapeKind::Ellipse => {
                let (a, b) = (r, r * self.aspect);
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            ShapeKind::Rectangle => {
                let a = r / libm::sqrt(1.0 + self.aspect * self.aspect);
                libm::fabs(u) <= a && libm::fabs(v) <= a * self.aspect
            }
            ShapeKind::Triangle | ShapeKind::Blob => point_in_polygon(u, v, &self.vertices),
        }
    }

    fn intensity(&self, px: f64, py: f64) -> f64 {
        self.fill + self.texture_amp * libm::sin(self.texture_freq * (px + 0.7 * py) + self.texture_phase)
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub level: f64,
    pub amp: f64,
    /// `(fx, fy, phase)` of each texture wave.
    pub waves: Vec<(f64, f64, f64)>,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: Background,
    pub objects: Vec<SceneObject>,
    /// When set, object masks exclude pixels covered by objects above them.
    pub visible_masks: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic noise in `[-1, 1)` for pixel `(x, y)`.
fn pixel_noise(seed: u64, x: usize, y: usize) -> f64 {
    let h = splitmix(splitmix(seed ^ (x as u64).wrapping_mul(0x1000_0000_01b3)) ^ y as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

impl Scene {
    fn background_at(&self, x: usize, y: usize) -> f64 {
        let b = &self.background;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let waves: f64 = b.waves.iter().map(|&(fx, fy, ph)| libm::sin(fx * px + fy * py + ph)).sum();
        let norm = b.waves.len().max(1) as f64;
        b.level + b.amp * waves / norm
    }

    /// Intensity of pixel `(x, y)` in `[0, 1]`.
    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let base = match self.objects.iter().rev().find(|o| o.contains(px, py)) {
            Some(o) => o.intensity(px, py),
            None => self.background_at(x, y),
        };
        (base + self.background.noise * pixel_noise(self.seed, x, y)).clamp(0.0, 1.0)
    }

    /// Renders the window `[x0, x0+w) x [y0, y0+h)` as `[1, h, w]`.
    pub fn render_window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Tensor> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Input(format!(
                "window {}x{} at ({}, {}) leaves the {}x{} scene",
                w, h, x0, y0, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                data.push(self.pixel(x, y));
            }
        }
        Tensor::new(&[1, h, w], data)
    }

    pub fn render(&self) -> Tensor {
        self.render_window(0, 0, self.width, self.height).expect("full window")
    }

    /// Mask of object `i` over the whole canvas: its full shape, or only the
    /// unoccluded part when `visible_masks` is set.
    pub fn object_mask(&self, i: usize) -> BinaryMask {
        let o = &self.objects[i];
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            o.contains(px, py) && (!self.visible_masks || !self.objects[i + 1..].iter().any(|a| a.contains(px, py)))
        })
    }

    /// Mask of object `i` restricted to a window.
    pub fn object_mask_window(&self, i: usize, x0: usize, y0: usize, w: usize, h: usize) -> BinaryMask {
        let o = &self.objects[i];
        BinaryMask::from_fn(w, h, |x, y| {
            let (px, py) = ((x0 + x) as f64 + 0.5, (y0 + y) as f64 + 0.5);
            o.contains(px, py) && (!self.visible_masks || !self.objects[i + 1..].iter().any(|a| a.contains(px, py)))
        })
    }
}

/// Parameters of generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of object counts.
    pub objects: (usize, usize),
    /// Range of object sizes in pixels.
    pub size_range: (f64, f64),
    /// Minimum difference between an object's fill and the background level.
    pub contrast: f64,
    pub texture: f64,
    pub noise: f64,
    pub visible_masks: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            objects: (1, 4),
            size_range: (26.0, 38.0),
            contrast: 0.2,
            texture: 0.05,
            noise: 0.04,
            visible_masks: false,
        }
    }
}

fn random_background(r: &mut StreamRng, cfg: &SceneConfig) -> Background {
    let waves = (0..3)
        .map(|_| {
            let f = rng::uniform(r, 0.05, 0.4);
            let a = rng::uniform(r, 0.0, 2.0 * PI);
            (f * libm::cos(a), f * libm::sin(a), rng::uniform(r, 0.0, 2.0 * PI))
        })
        .collect();
    Background { level: rng::uniform(r, 0.3, 0.7), amp: cfg.texture, waves, noise: cfg.noise }
}

/// Fill level at least `contrast` (plus a margin) away from `level`, with a
/// random sign, kept inside `[0.02, 0.98]`.
fn contrasting_fill(r: &mut StreamRng, level: f64, contrast: f64) -> f64 {
    let delta = contrast + rng::uniform(r, 0.05, 0.25);
    let up = level + delta;
    let down = level - delta;
    let prefer_up = r.gen::<bool>();
    match (up <= 0.98, down >= 0.02) {
        (true, true) => {
            if prefer_up {
                up
            } else {
                down
            }
        }
        (true, false) => up,
        (false, true) => down,
        (false, false) => if level < 0.5 { 0.98 } else { 0.02 },
    }
}

/// A random object of the given size and center.
pub fn random_object(r: &mut StreamRng, cx: f64, cy: f64, size: f64, fill: f64, texture: f64) -> SceneObject {
    let kind = ShapeKind::ALL[r.gen_range(0..ShapeKind::ALL.len())];
    let rotation = rng::uniform(r, 0.0, 2.0 * PI);
    let vertices = match kind {
        ShapeKind::Triangle => (0..3)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 3.0 + rng::uniform(r, -0.25, 0.25);
                (size / 2.0 * libm::cos(a), size / 2.0 * libm::sin(a))
            })
            .collect(),
        ShapeKind::Blob => {
            let n = r.gen_range(6..10);
            (0..n)
                .map(|k| {
                    let a = 2.0 * PI * (k as f64 + rng::uniform(r, -0.3, 0.3)) / n as f64;
                    let rad = size / 2.0 * rng::uniform(r, 0.6, 1.0);
                    (rad * libm::cos(a), rad * libm::sin(a))
                })
                .collect()
        }
        _ => Vec::new(),
    };
    SceneObject {
        kind,
        cx,
        cy,
        size,
        rotation,
        aspect: rng::uniform(r, 0.55, 1.0),
        vertices,
        fill,
        texture_amp: texture * rng::uniform(r, 0.5, 1.0),
        texture_freq: rng::uniform(r, 0.2, 0.8),
        texture_phase: rng::uniform(r, 0.0, 2.0 * PI),
    }
}

/// A scene with objects placed uniformly over the canvas.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut r = rng::stream(seed, 0);
    let background = random_background(&mut r, cfg);
    let count = r.gen_range(cfg.objects.0..=cfg.objects.1.max(cfg.objects.0));
    let objects = (0..count)
        .map(|_| {
            let size = rng::uniform(&mut r, cfg.size_range.0, cfg.size_range.1);
            let cx = rng::uniform(&mut r, 0.0, cfg.width as f64);
            let cy = rng::uniform(&mut r, 0.0, cfg.height as f64);
            let fill = contrasting_fill(&mut r, background.level, cfg.contrast);
            random_object(&mut r, cx, cy, size, fill, cfg.texture)
        })
        .collect();
    Scene { width: cfg.width, height: cfg.height, seed, background, objects, visible_masks: cfg.visible_masks }
}

/// What makes a patch positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Patch side W.
    pub width: usize,
    /// Extra image content on each side of the patch.
    pub context: usize,
    pub channels: usize,
    /// Canonical object size in pixels.
    pub canonical_size: f64,
    /// Maximum per-axis offset of the object center from the patch center.
    pub center_tolerance: f64,
    /// Allowed object size relative to the canonical size.
    pub scale_band: (f64, f64),
    pub positive_fraction: f64,
    /// Inclusive range of extra (non-target) objects per sample scene.
    pub distractors: (usize, usize),
    pub contrast: f64,
    pub texture: f64,
    pub noise: f64,
    pub visible_masks: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self::for_width(64, 8)
    }
}

impl SampleConfig {
    /// Defaults for patch side `width`: canonical size `width / 2`,
    /// tolerance `width / 16`, band `[0.8, 1.2]`.
    pub fn for_width(width: usize, context: usize) -> Self {
        Self {
            width,
            context,
            channels: 1,
            canonical_size: width as f64 / 2.0,
            center_tolerance: width as f64 / 16.0,
            scale_band: (0.8, 1.2),
            positive_fraction: 0.5,
            distractors: (0, 3),
            contrast: 0.2,
            texture: 0.05,
            noise: 0.04,
            visible_masks: false,
        }
    }

    pub fn input_side(&self) -> usize {
        self.width + 2 * self.context
    }

    /// Band twice as wide around 1 as `scale_band`.
    pub fn wide_band(&self) -> (f64, f64) {
        (1.0 - 2.0 * (1.0 - self.scale_band.0), 1.0 + 2.0 * (self.scale_band.1 - 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.channels == 0 {
            return Err(Error::Config("patch width must be at least 8 and channels positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive_fraction must be in [0, 1]".into()));
        }
        if self.center_tolerance < 0.0 || self.scale_band.0 <= 0.0 || self.scale_band.0 > self.scale_band.1 {
            return Err(Error::Config("invalid tolerance or scale band".into()));
        }
        if self.canonical_size <= 0.0 || self.canonical_size > self.width as f64 {
            return Err(Error::Config("canonical size must be in (0, W]".into()));
        }
        Ok(())
    }

    fn in_band(&self, size: f64) -> bool {
        let s = size / self.canonical_size;
        s >= self.scale_band.0 - 1e-12 && s <= self.scale_band.1 + 1e-12
    }

    fn in_wide_band(&self, size: f64) -> bool {
        let (lo, hi) = self.wide_band();
        let s = size / self.canonical_size;
        s >= lo && s <= hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeKind {
    /// No object near the patch center.
    OffCenter,
    /// An object at the center, outside the doubled scale band.
    WrongScale,
    /// An empty scene.
    Empty,
}

/// A training triplet. `patch` is `[C, W + 2c, W + 2c]`; `mask` is the
/// `W x W` target mask for positives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub patch: Tensor,
    pub label: i8,
    pub mask: Option<BinaryMask>,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label > 0
    }
}

/// Patch origin (top-left, in scene coordinates) of the input window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropInfo {
    pub x0: usize,
    pub y0: usize,
    /// Index of the target object for positives.
    pub object: Option<usize>,
}

fn crop_sample(scene: &Scene, cfg: &SampleConfig, x0: usize, y0: usize, object: Option<usize>) -> Result<Sample> {
    let side = cfg.input_side();
    let plane = scene.render_window(x0, y0, side, side)?;
    let data: Vec<f64> = (0..cfg.channels).flat_map(|_| plane.data().iter().copied()).collect();
    let patch = Tensor::new(&[cfg.channels, side, side], data)?;
    let mask = object.map(|i| scene.object_mask_window(i, x0 + cfg.context, y0 + cfg.context, cfg.width, cfg.width));
    Ok(Sample { patch, label: if object.is_some() { 1 } else { -1 }, mask })
}

/// Whether a patch whose input window starts at `(x0, y0)` would count as a
/// negative: no object is both within twice the tolerance and twice the band.
pub fn is_clear_negative(scene: &Scene, cfg: &SampleConfig, x0: usize, y0: usize) -> bool {
    let c = (x0 + cfg.input_side() / 2) as f64;
    let r = (y0 + cfg.input_side() / 2) as f64;
    scene.objects.iter().all(|o| {
        let off = libm::fabs(o.cx - c).max(libm::fabs(o.cy - r));
        off > 2.0 * cfg.center_tolerance || !cfg.in_wide_band(o.size)
    })
}

/// Crops a triplet from `scene`.
///
/// Positives center the topmost object that is inside the scale band and
/// whose jittered window fits in the scene; the per-axis jitter is drawn
/// from `[-tolerance, tolerance]` (rounded toward zero to whole pixels) and
/// the window is aligned so an object centered on a pixel corner lands
/// exactly at the patch center with zero jitter. Negatives try the scene
/// center first and then random windows.
pub fn sample_triplet(scene: &Scene, cfg: &SampleConfig, seed: u64, positive: bool) -> Result<(Sample, CropInfo)> {
    cfg.validate()?;
    let mut r = rng::stream(seed, 1);
    let side = cfg.input_side();
    if scene.width < side || scene.height < side {
        return Err(Error::Input(format!("scene {}x{} smaller than the input window", scene.width, scene.height)));
    }
    let half = (side / 2) as f64;
    if positive {
        let tol = libm::floor(cfg.center_tolerance) as i64;
        let jx = r.gen_range(-tol..=tol);
        let jy = r.gen_range(-tol..=tol);
        for (i, o) in scene.objects.iter().enumerate().rev() {
            if !cfg.in_band(o.size) {
                continue;
            }
            let x0 = libm::round(o.cx - half) as i64 + jx;
            let y0 = libm::round(o.cy - half) as i64 + jy;
            if x0 < 0 || y0 < 0 || x0 as usize + side > scene.width || y0 as usize + side > scene.height {
                continue;
            }
            let off = libm::fabs(o.cx - (x0 as f64 + half)).max(libm::fabs(o.cy - (y0 as f64 + half)));
            if off > cfg.center_tolerance {
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            let s = crop_sample(scene, cfg, x0, y0, Some(i))?;
            let area = s.mask.as_ref().map_or(0, BinaryMask::area);
            if area == 0 || area == cfg.width * cfg.width {
                continue;
            }
            return Ok((s, CropInfo { x0, y0, object: Some(i) }));
        }
        return Err(Error::Input("scene has no object usable as a positive".into()));
    }
    let (cx0, cy0) = ((scene.width - side) / 2, (scene.height - side) / 2);
    if is_clear_negative(scene, cfg, cx0, cy0) {
        return Ok((crop_sample(scene, cfg, cx0, cy0, None)?, CropInfo { x0: cx0, y0: cy0, object: None }));
    }
    for _ in 0..256 {
        let x0 = r.gen_range(0..=scene.width - side);
        let y0 = r.gen_range(0..=scene.height - side);
        if is_clear_negative(scene, cfg, x0, y0) {
            return Ok((crop_sample(scene, cfg, x0, y0, None)?, CropInfo { x0, y0, object: None }));
        }
    }
    Err(Error::Input("no negative window found in scene".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => rng::tags::TRAIN_SPLIT,
            Split::Val => rng::tags::VAL_SPLIT,
        }
    }
}

/// Seed of sample `index` of `split`; train and val streams never collide.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix(splitmix(seed ^ split.tag().wrapping_mul(0xd6e8_feb8_6659_fd93)) ^ index as u64)
}

/// Whether sample `index` is positive under `fraction`, spreading positives
/// evenly so any prefix is within one sample of the target ratio.
pub fn is_positive_index(index: usize, fraction: f64) -> bool {
    let f = |i: usize| libm::floor(i as f64 * fraction) as usize;
    f(index + 1) > f(index)
}

/// Provenance of a generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub label: i8,
    pub negative_kind: Option<NegativeKind>,
    pub crop: CropInfo,
    pub objects: usize,
}

/// Scene built around one sample: a canvas with room for the jittered
/// window, a target object at its center for positives (drawn on top) or a
/// deliberate negative layout, plus distractors that never qualify as
/// centered objects.
pub fn sample_scene(cfg: &SampleConfig, seed: u64, positive: bool) -> (Scene, Option<NegativeKind>) {
    let mut r = rng::stream(seed, 0);
    let margin = 2 * libm::ceil(cfg.center_tolerance) as usize;
    let side = cfg.input_side() + 2 * margin;
    let scene_cfg = SceneConfig {
        width: side,
        height: side,
        objects: (0, 0),
        size_range: (0.0, 0.0),
        contrast: cfg.contrast,
        texture: cfg.texture,
        noise: cfg.noise,
        visible_masks: cfg.visible_masks,
    };
    let background = random_background(&mut r, &scene_cfg);
    let center = (side / 2) as f64;
    let canon = cfg.canonical_size;
    let (wlo, whi) = cfg.wide_band();
    let mut objects = Vec::new();

    let kind = if positive {
        None
    } else {
        Some(match r.gen_range(0..10) {
            0 => NegativeKind::Empty,
            1..=5 => NegativeKind::OffCenter,
            _ => NegativeKind::WrongScale,
        })
    };
    if kind != Some(NegativeKind::Empty) {
        let n = r.gen_range(cfg.distractors.0..=cfg.distractors.1.max(cfg.distractors.0));
        let extra_off_center = usize::from(kind == Some(NegativeKind::OffCenter));
        for _ in 0..n + extra_off_center {
            let size = canon * rng::uniform(&mut r, 0.4, 1.6);
            // keep distractors from qualifying as centered objects
            let (cx, cy) = loop {
                let cx = rng::uniform(&mut r, 0.0, side as f64);
                let cy = rng::uniform(&mut r, 0.0, side as f64);
                let off = libm::fabs(cx - center).max(libm::fabs(cy - center));
                let s = size / canon;
                if off > 2.0 * cfg.center_tolerance + 4.0 || s < wlo || s > whi {
                    break (cx, cy);
                }
            };
            let fill = contrasting_fill(&mut r, background.level, cfg.contrast);
            objects.push(random_object(&mut r, cx, cy, size, fill, cfg.texture));
        }
    }
    match kind {
        None => {
            let size = canon * rng::uniform(&mut r, cfg.scale_band.0, cfg.scale_band.1);
            let fill = contrasting_fill(&mut r, background.level, cfg.contrast);
            objects.push(random_object(&mut r, center, center, size, fill, cfg.texture));
        }
        Some(NegativeKind::WrongScale) => {
            let s = if r.gen::<bool>() {
                rng::uniform(&mut r, 0.3, wlo - 0.05)
            } else {
                rng::uniform(&mut r, whi + 0.05, 1.9)
            };
            let fill = contrasting_fill(&mut r, background.level, cfg.contrast);
            let jx = rng::uniform(&mut r, -cfg.center_tolerance, cfg.center_tolerance);
            let jy = rng::uniform(&mut r, -cfg.center_tolerance, cfg.center_tolerance);
            objects.push(random_object(&mut r, center + jx, center + jy, canon * s, fill, cfg.texture));
        }
        _ => {}
    }
    let scene = Scene {
        width: side,
        height: side,
        seed,
        background,
        objects,
        visible_masks: cfg.visible_masks,
    };
    (scene, kind)
}

/// Sample `index` of `split`: pure in `(cfg, seed, split, index)`.
pub fn generate_sample(cfg: &SampleConfig, seed: u64, split: Split, index: usize) -> Result<(Sample, SampleRecord)> {
    let s = sample_seed(seed, split, index);
    let positive = is_positive_index(index, cfg.positive_fraction);
    let (scene, negative_kind) = sample_scene(cfg, s, positive);
    let (sample, crop) = sample_triplet(&scene, cfg, s, positive)?;
    let record = SampleRecord {
        split,
        index,
        seed: s,
        label: sample.label,
        negative_kind,
        crop,
        objects: scene.objects.len(),
    };
    Ok((sample, record))
}

/// `n` samples of `split`.
pub fn generate_split(cfg: &SampleConfig, seed: u64, split: Split, n: usize) -> Result<(Vec<Sample>, Vec<SampleRecord>)> {
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let (s, r) = generate_sample(cfg, seed, split, i)?;
        samples.push(s);
        records.push(r);
    }
    Ok((samples, records))
}

/// Train and validation samples held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SampleConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub records: Vec<SampleRecord>,
}

pub fn make_dataset(cfg: &SampleConfig, seed: u64, n_train: usize, n_val: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Config("n_train must be at least 1".into()));
    }
    let (train, mut records) = generate_split(cfg, seed, Split::Train, n_train)?;
    let (val, val_records) = generate_split(cfg, seed, Split::Val, n_val)?;
    records.extend(val_records);
    Ok(Dataset { config: cfg.clone(), seed, train, val, records })
}

/// Scenes for scene-level proposal evaluation: objects at sizes inside the
/// canonical band, ground truths for every object.
pub fn eval_scene_config(cfg: &SampleConfig, canvas: usize) -> SceneConfig {
    SceneConfig {
        width: canvas,
        height: canvas,
        objects: (1, 4),
        size_range: (cfg.canonical_size * cfg.scale_band.0, cfg.canonical_size * cfg.scale_band.1),
        contrast: cfg.contrast,
        texture: cfg.texture,
        noise: cfg.noise,
        visible_masks: cfg.visible_masks,
    }
}

/// Ground-truth masks of every object in `scene` with a non-empty mask.
pub fn scene_ground_truth(scene: &Scene) -> Vec<BinaryMask> {
    (0..scene.objects.len()).map(|i| scene.object_mask(i)).filter(|m| m.area() > 0).collect()
}
