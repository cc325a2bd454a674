//! Bi-temporal samples: synthetic scene generation, the on-disk PNG layout
//! and paired D4 augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, ScdError};
use crate::imageio;
use crate::losses::boundary_target;
use crate::tensor::Tensor;

/// Row-major `[H, W]` map of small integers (class indices or 0/1 masks).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ScdError::Shape(format!("label map {height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes.max(1)];
        for &v in &self.data {
            if (v as usize) < h.len() {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&v) => Err(ScdError::ClassOutOfRange { index: v as usize, classes }),
            None => Ok(()),
        }
    }
}

/// `1` where either label is non-zero.
pub fn change_mask(label_t1: &LabelMap, label_t2: &LabelMap) -> Result<LabelMap> {
    if label_t1.dims() != label_t2.dims() {
        return Err(ScdError::Shape(format!("label maps differ in size: {:?} vs {:?}", label_t1.dims(), label_t2.dims())));
    }
    let data = label_t1.data.iter().zip(&label_t2.data).map(|(&a, &b)| u8::from(a > 0 || b > 0)).collect();
    LabelMap::new(label_t1.height, label_t1.width, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image_t1: Tensor<f32>,
    pub image_t2: Tensor<f32>,
    pub label_t1: LabelMap,
    pub label_t2: LabelMap,
    pub change: LabelMap,
    pub boundary: LabelMap,
}

impl BiTemporalSample {
    /// Validate sizes and derive the change and boundary maps.
    pub fn from_parts(image_t1: Tensor<f32>, image_t2: Tensor<f32>, label_t1: LabelMap, label_t2: LabelMap) -> Result<Self> {
        let (h, w) = label_t1.dims();
        for img in [&image_t1, &image_t2] {
            if img.shape() != [3, h, w] {
                return Err(ScdError::Dataset(format!("image shape {:?} does not match label size {h}x{w}", img.shape())));
            }
        }
        let change = change_mask(&label_t1, &label_t2)?;
        let boundary = boundary_target(&label_t1, &label_t2)?;
        Ok(Self { image_t1, image_t2, label_t1, label_t2, change, boundary })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.label_t1.dims()
    }

    pub fn change_fraction(&self) -> f64 {
        self.change.count_nonzero() as f64 / self.change.data.len().max(1) as f64
    }
}

/// `[B, 3, H, W]` stacks of the two epochs' images.
pub fn stack_images(samples: &[&BiTemporalSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let stack = |f: fn(&BiTemporalSample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
        let items = samples
            .iter()
            .map(|s| {
                let t = f(s);
                t.clone().reshape(&[1, t.shape()[0], t.shape()[1], t.shape()[2]])
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_batch(&items)
    };
    Ok((stack(|s| &s.image_t1)?, stack(|s| &s.image_t2)?))
}

/// Colour per class; class 0 (no change) is black.
pub fn palette(classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 10] = [
        [0, 0, 0],
        [220, 60, 40],
        [50, 160, 60],
        [40, 90, 210],
        [230, 200, 40],
        [150, 70, 190],
        [40, 200, 200],
        [240, 140, 40],
        [130, 130, 130],
        [250, 250, 250],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c010);
    (0..classes)
        .map(|c| if c < BASE.len() { BASE[c] } else { [rng.random(), rng.random(), rng.random()] })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Inclusive range of shapes placed in the first epoch.
    pub num_shapes: (usize, usize),
    pub change_ratio: f64,
    /// Upper bound on second-epoch edits; 0 gives a scene without change.
    pub max_mutations: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, classes: 5, num_shapes: (4, 8), change_ratio: 0.2, max_mutations: 24, noise_std: 0.03, seed: 0 }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScdError::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad(format!("scene size {}x{} must be positive multiples of 16", self.height, self.width));
        }
        if !(3..=255).contains(&self.classes) {
            return bad(format!("classes must lie in 3..=255, got {}", self.classes));
        }
        if self.num_shapes.0 > self.num_shapes.1 {
            return bad(format!("shape range {:?} is empty", self.num_shapes));
        }
        if !(self.change_ratio >= 0.0 && self.change_ratio < 1.0) {
            return bad(format!("change_ratio must lie in [0, 1), got {}", self.change_ratio));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Spec for the `index`-th scene of a dataset.
    pub fn derived(&self, index: usize) -> Self {
        Self { seed: self.seed.wrapping_add(index as u64), ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug)]
enum Geometry {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    geometry: Geometry,
    class: u8,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self.geometry {
            Geometry::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Geometry::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize, class: u8) -> Shape {
    let (hf, wf) = (h as f64, w as f64);
    let sh = rng.random_range(hf / 8.0..=hf / 3.0);
    let sw = rng.random_range(wf / 8.0..=wf / 3.0);
    let cy = rng.random_range(0.0..hf);
    let cx = rng.random_range(0.0..wf);
    let geometry = if rng.random_bool(0.5) {
        Geometry::Rect { y0: cy - sh / 2.0, x0: cx - sw / 2.0, y1: cy + sh / 2.0, x1: cx + sw / 2.0 }
    } else {
        Geometry::Ellipse { cy, cx, ry: sh / 2.0, rx: sw / 2.0 }
    };
    Shape { geometry, class }
}

fn random_class(rng: &mut ChaCha8Rng, classes: usize, except: u8) -> u8 {
    loop {
        let c = rng.random_range(1..classes) as u8;
        if c != except {
            return c;
        }
    }
}

fn rasterize(h: usize, w: usize, background: u8, shapes: &[Shape]) -> Vec<u8> {
    let mut out = vec![background; h * w];
    for (i, px) in out.iter_mut().enumerate() {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        if let Some(s) = shapes.iter().rev().find(|s| s.contains(y, x)) {
            *px = s.class;
        }
    }
    out
}

fn render(rng: &mut ChaCha8Rng, cover: &[u8], h: usize, w: usize, colors: &[[u8; 3]], noise_std: f64) -> Tensor<f32> {
    let gy = rng.random_range(-0.15..=0.15);
    let gx = rng.random_range(-0.15..=0.15);
    let offset = rng.random_range(-0.05..=0.05);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            let (y, x) = ((p / w) as f64 / h as f64 - 0.5, (p % w) as f64 / w as f64 - 0.5);
            let base = colors[cover[p] as usize][c] as f64 / 255.0;
            let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            data[c * h * w + p] = (base + gy * y + gx * x + offset + n).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized buffer")
}

fn fraction_changed(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// Deterministic synthetic scene. Land cover is a background class plus
/// rectangles and ellipses of other classes; the second epoch swaps,
/// deletes or inserts shapes until the changed fraction approaches the
/// target. Labels keep the cover class only where the epochs differ.
pub fn generate_scene(spec: &SceneSpec) -> Result<BiTemporalSample> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = rng.random_range(1..c) as u8;
    let n = rng.random_range(spec.num_shapes.0..=spec.num_shapes.1);
    let shapes1: Vec<Shape> = (0..n)
        .map(|_| {
            let class = random_class(&mut rng, c, background);
            random_shape(&mut rng, h, w, class)
        })
        .collect();
    let cover1 = rasterize(h, w, background, &shapes1);

    let mut shapes2 = shapes1.clone();
    let mut cover2 = cover1.clone();
    let (lo, hi) = (spec.change_ratio - 0.05, spec.change_ratio + 0.1);
    let mut frac = 0.0;
    for _ in 0..spec.max_mutations {
        if frac >= lo {
            break;
        }
        let mut candidate = shapes2.clone();
        match rng.random_range(0..3) {
            0 if !candidate.is_empty() => {
                let i = rng.random_range(0..candidate.len());
                candidate[i].class = random_class(&mut rng, c, candidate[i].class);
            }
            1 if !candidate.is_empty() => {
                let i = rng.random_range(0..candidate.len());
                candidate.remove(i);
            }
            _ => {
                let class = random_class(&mut rng, c, background);
                candidate.push(random_shape(&mut rng, h, w, class));
            }
        }
        let cover = rasterize(h, w, background, &candidate);
        let f = fraction_changed(&cover1, &cover);
        if f <= hi {
            shapes2 = candidate;
            cover2 = cover;
            frac = f;
        }
    }

    let colors = palette(c);
    let image_t1 = render(&mut rng, &cover1, h, w, &colors, spec.noise_std);
    let image_t2 = render(&mut rng, &cover2, h, w, &colors, spec.noise_std);
    let keep = |own: &[u8], other: &[u8]| own.iter().zip(other).map(|(&a, &b)| if a != b { a } else { 0 }).collect::<Vec<u8>>();
    let label_t1 = LabelMap::new(h, w, keep(&cover1, &cover2))?;
    let label_t2 = LabelMap::new(h, w, keep(&cover2, &cover1))?;
    BiTemporalSample::from_parts(image_t1, image_t2, label_t1, label_t2)
}

/// Scenes `base.seed + i` for `i in 0..count`.
pub fn generate_dataset(base: &SceneSpec, count: usize) -> Result<Vec<BiTemporalSample>> {
    (0..count).map(|i| generate_scene(&base.derived(i))).collect()
}

pub const SUBDIRS: [&str; 4] = ["im1", "im2", "label1", "label2"];

fn to_rgb8(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let hw = h * w;
    (0..hw).flat_map(|p| (0..3).map(move |c| (image.data()[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

fn from_rgb8(rgb: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let hw = h * w;
    Tensor::from_fn(&[3, h, w], |i| rgb[(i % hw) * 3 + i / hw] as f32 / 255.0)
}

/// Write one sample under `root/{im1,im2,label1,label2}/<stem>.png`.
pub fn save_sample(root: &Path, stem: &str, sample: &BiTemporalSample, classes: usize) -> Result<()> {
    let (h, w) = sample.dims();
    let colors = palette(classes);
    for d in SUBDIRS {
        fs::create_dir_all(root.join(d))?;
    }
    let file = |d: &str| root.join(d).join(format!("{stem}.png"));
    imageio::write_rgb(&file("im1"), w, h, &to_rgb8(&sample.image_t1))?;
    imageio::write_rgb(&file("im2"), w, h, &to_rgb8(&sample.image_t2))?;
    imageio::write_indexed(&file("label1"), w, h, &colors, sample.label_t1.data())?;
    imageio::write_indexed(&file("label2"), w, h, &colors, sample.label_t2.data())?;
    Ok(())
}

pub fn save_dataset(root: &Path, samples: &[BiTemporalSample], classes: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        save_sample(root, &format!("{i:05}"), s, classes)?;
    }
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let d = imageio::read_rgb(path)?;
    Ok(from_rgb8(&d.data, d.height, d.width))
}

/// Sorted stems of `root/im1/*.png`.
pub fn list_stems(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("im1");
    if !dir.is_dir() {
        return Err(ScdError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_sample(root: &Path, stem: &str, classes: usize) -> Result<BiTemporalSample> {
    let paths: Vec<PathBuf> = SUBDIRS.iter().map(|d| root.join(d).join(format!("{stem}.png"))).collect();
    if let Some(p) = paths.iter().find(|p| !p.is_file()) {
        return Err(ScdError::MissingPairMember { stem: stem.to_string(), path: p.clone() });
    }
    let im1 = load_image(&paths[0])?;
    let im2 = load_image(&paths[1])?;
    let label = |p: &Path| -> Result<LabelMap> {
        let d = imageio::read_indices(p)?;
        let map = LabelMap::new(d.height, d.width, d.data)?;
        map.check_classes(classes)?;
        Ok(map)
    };
    let l1 = label(&paths[2])?;
    let l2 = label(&paths[3])?;
    let dims = [im1.shape()[1..].to_vec(), im2.shape()[1..].to_vec(), vec![l1.height, l1.width], vec![l2.height, l2.width]];
    if dims.iter().any(|d| *d != dims[0]) {
        return Err(ScdError::Dataset(format!("pair `{stem}` mixes sizes {dims:?}")));
    }
    BiTemporalSample::from_parts(im1, im2, l1, l2)
}

pub fn load_dataset(root: &Path, classes: usize) -> Result<Vec<BiTemporalSample>> {
    list_stems(root)?.iter().map(|s| load_sample(root, s, classes)).collect()
}

/// The six flips and rotations used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum D4 {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl D4 {
    pub const ALL: [D4; 6] = [D4::Identity, D4::FlipH, D4::FlipV, D4::Rot90, D4::Rot180, D4::Rot270];

    pub fn inverse(self) -> Self {
        match self {
            D4::Rot90 => D4::Rot270,
            D4::Rot270 => D4::Rot90,
            other => other,
        }
    }

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            D4::Rot90 | D4::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source pixel for output position `(y, x)` of an `h x w` input.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            D4::Identity => (y, x),
            D4::FlipH => (y, w - 1 - x),
            D4::FlipV => (h - 1 - y, x),
            // Counter-clockwise quarter turn: output is w x h.
            D4::Rot90 => (x, w - 1 - y),
            D4::Rot180 => (h - 1 - y, w - 1 - x),
            D4::Rot270 => (h - 1 - x, y),
        }
    }

    fn remap<V: Copy>(self, planes: usize, h: usize, w: usize, data: &[V]) -> Vec<V> {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = self.source(y, x, h, w);
                    out.push(data[p * h * w + sy * w + sx]);
                }
            }
        }
        out
    }

    pub fn apply_map(self, m: &LabelMap) -> LabelMap {
        let (oh, ow) = self.output_dims(m.height, m.width);
        LabelMap { height: oh, width: ow, data: self.remap(1, m.height, m.width, &m.data) }
    }

    /// Transform a `[C, H, W]` tensor.
    pub fn apply_image(self, t: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (oh, ow) = self.output_dims(h, w);
        Tensor::new(&[c, oh, ow], self.remap(c, h, w, t.data())).expect("sized buffer")
    }

    pub fn apply(self, s: &BiTemporalSample) -> BiTemporalSample {
        BiTemporalSample {
            image_t1: self.apply_image(&s.image_t1),
            image_t2: self.apply_image(&s.image_t2),
            label_t1: self.apply_map(&s.label_t1),
            label_t2: self.apply_map(&s.label_t2),
            change: self.apply_map(&s.change),
            boundary: self.apply_map(&s.boundary),
        }
    }
}

/// Seeded choice among [`D4::ALL`], applied to every member of the sample.
pub fn augment(sample: &BiTemporalSample, seed: u64) -> (BiTemporalSample, D4) {
    let t = D4::ALL[ChaCha8Rng::seed_from_u64(seed).random_range(0..D4::ALL.len())];
    (t.apply(sample), t)
}
