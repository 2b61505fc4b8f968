//! Deterministic synthetic scenes: coloured shapes on a plain background, pixel-exact masks,
//! templated prompts and the occlusion / clutter / low-resolution perturbations.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::text::{self, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
/// Background plus every (shape, colour) pair.
pub const NUM_CLASSES: usize = 1 + SHAPES.len() * COLORS.len();

impl ShapeKind {
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        SHAPES.into_iter().find(|s| s.word() == w)
    }

    /// Whether the offset `(dx, dy)` from the centre lies inside a shape of half-extent `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= (r + 0.5) * (r + 0.5),
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up at dy = -r, base at dy = +r
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

impl Color {
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        COLORS.into_iter().find(|c| c.word() == w)
    }
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.88, 0.12, 0.10],
            Color::Green => [0.12, 0.74, 0.18],
            Color::Blue => [0.14, 0.24, 0.90],
            Color::Yellow => [0.92, 0.86, 0.12],
        }
    }
}

/// `1 + 4 * shape + colour`; 0 is background.
pub fn class_id(shape: ShapeKind, color: Color) -> u8 {
    (1 + COLORS.len() * shape.index() + color.index()) as u8
}

pub fn class_of(id: u8) -> Option<(ShapeKind, Color)> {
    let i = (id as usize).checked_sub(1)?;
    Some((*SHAPES.get(i / COLORS.len())?, COLORS[i % COLORS.len()]))
}

/// `background`, then `"<colour> <shape>"` in class-id order.
pub fn class_names() -> Vec<String> {
    let mut v = vec![String::from("background")];
    for s in SHAPES {
        for c in COLORS {
            v.push(alloc::format!("{} {}", c.word(), s.word()));
        }
    }
    v
}

/// Closed word set of the prompt templates.
pub const PROMPT_WORDS: [&str; 13] = [
    "a", "scene", "with", "red", "green", "blue", "yellow", "circle", "square", "triangle", "left", "of", "above",
];

pub fn vocabulary() -> Vocabulary {
    Vocabulary::new(PROMPT_WORDS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Clean,
    Occluded,
    Cluttered,
    LowRes,
}

pub const SCENARIOS: [Scenario; 4] = [Scenario::Clean, Scenario::Occluded, Scenario::Cluttered, Scenario::LowRes];

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::Occluded => "occluded",
            Scenario::Cluttered => "cluttered",
            Scenario::LowRes => "lowres",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SCENARIOS
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::data(alloc::format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    /// Centre column.
    pub cx: usize,
    /// Centre row.
    pub cy: usize,
    /// Half-extent in pixels.
    pub size: usize,
    /// Brightness factor applied to the colour.
    pub shade: f64,
}

impl SceneObject {
    pub fn class_id(&self) -> u8 {
        class_id(self.shape, self.color)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dx = col as f64 - self.cx as f64;
        let dy = row as f64 - self.cy as f64;
        self.shape.contains(dx, dy, self.size as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// Drawn in order; later objects occlude earlier ones.
    pub objects: Vec<SceneObject>,
}

pub const MAX_OBJECTS: usize = 4;

/// Object half-extent range for a canvas.
pub fn size_range(height: usize, width: usize) -> (usize, usize) {
    let m = height.min(width);
    let lo = (m / 8).max(1);
    let hi = (m / 4).max(lo);
    // every object must fit: 2r + 1 <= m
    let cap = (m.saturating_sub(1) / 2).max(1);
    (lo.min(cap), hi.min(cap))
}

/// Layout of a scene; independent of the scenario so perturbed variants share geometry.
pub fn scene_spec(seed: u64, height: usize, width: usize) -> Result<SceneSpec> {
    if height < 3 || width < 3 {
        return Err(Error::dim(alloc::format!("canvas {height}x{width} too small for a scene")));
    }
    let mut rng = SplitMix64::new(seed).fork(1);
    let g = rng.uniform(0.35, 0.6);
    let background = [
        g + rng.uniform(-0.04, 0.04),
        g + rng.uniform(-0.04, 0.04),
        g + rng.uniform(-0.04, 0.04),
    ];
    let n = rng.range_inclusive(1, MAX_OBJECTS);
    let (lo, hi) = size_range(height, width);
    // One shape kind per scene: the prompt then pins shape, colour stays local.
    let shape = SHAPES[rng.below(SHAPES.len())];
    let objects = (0..n)
        .map(|_| {
            let color = COLORS[rng.below(COLORS.len())];
            let size = rng.range_inclusive(lo, hi);
            let cx = rng.range_inclusive(size, width - 1 - size);
            let cy = rng.range_inclusive(size, height - 1 - size);
            let shade = rng.uniform(0.85, 1.0);
            SceneObject {
                shape,
                color,
                cx,
                cy,
                size,
                shade,
            }
        })
        .collect();
    Ok(SceneSpec {
        seed,
        height,
        width,
        background,
        objects,
    })
}

/// Rendered scene before perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Tensor,
    pub mask: ClassMask,
    /// Index + 1 of the object owning each pixel; 0 for background.
    pub owner: Vec<u8>,
}

pub fn render(spec: &SceneSpec) -> Result<Rendered> {
    let (h, w) = (spec.height, spec.width);
    let p = h * w;
    let mut img = vec![0.0; 3 * p];
    for (c, &b) in spec.background.iter().enumerate() {
        img[c * p..(c + 1) * p].fill(b);
    }
    let mut mask = ClassMask::filled(h, w, 0);
    let mut owner = vec![0u8; p];
    for (k, obj) in spec.objects.iter().enumerate() {
        let rgb = obj.color.rgb();
        let r = obj.size;
        for row in obj.cy.saturating_sub(r + 1)..(obj.cy + r + 2).min(h) {
            for col in obj.cx.saturating_sub(r + 1)..(obj.cx + r + 2).min(w) {
                if obj.contains(row, col) {
                    let i = row * w + col;
                    for c in 0..3 {
                        img[c * p + i] = rgb[c] * obj.shade;
                    }
                    mask.set(row, col, obj.class_id());
                    owner[i] = (k + 1) as u8;
                }
            }
        }
    }
    Ok(Rendered {
        image: Tensor::new(&[3, h, w], img)?,
        mask,
        owner,
    })
}

/// Template prompt: `a scene with <colour> <shape>[, <colour> <shape>]*`, the first pair
/// joined by a spatial clause when there are two or more objects.
pub fn render_prompt(spec: &SceneSpec) -> String {
    let name = |o: &SceneObject| alloc::format!("{} {}", o.color.word(), o.shape.word());
    let mut s = String::from("a scene with ");
    match spec.objects.as_slice() {
        [] => {}
        [only] => s.push_str(&name(only)),
        [a, b, rest @ ..] => {
            let dx = b.cx as i64 - a.cx as i64;
            let dy = b.cy as i64 - a.cy as i64;
            let (first, second, rel) = if dx.abs() >= dy.abs() {
                if dx >= 0 {
                    (a, b, "left of")
                } else {
                    (b, a, "left of")
                }
            } else if dy >= 0 {
                (a, b, "above")
            } else {
                (b, a, "above")
            };
            s.push_str(&name(first));
            s.push(' ');
            s.push_str(rel);
            s.push(' ');
            s.push_str(&name(second));
            for o in rest {
                s.push_str(", ");
                s.push_str(&name(o));
            }
        }
    }
    s
}

/// Recovers the `(colour, shape)` pairs mentioned by a templated prompt, sorted.
pub fn parse_prompt(prompt: &str) -> Vec<(Color, ShapeKind)> {
    let ws: Vec<String> = text::words(prompt).collect();
    let mut out: Vec<(Color, ShapeKind)> = ws
        .windows(2)
        .filter_map(|p| Some((Color::from_word(&p[0])?, ShapeKind::from_word(&p[1])?)))
        .collect();
    out.sort();
    out
}

/// One training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: ClassMask,
    pub prompt: String,
    pub scenario: Scenario,
    pub seed: u64,
}

const OCCLUDER_RGB: [f64; 3] = [0.5, 0.5, 0.5];
const CLUTTER_RGB: [[f64; 3]; 4] = [
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.80, 0.20, 0.80],
    [0.20, 0.80, 0.80],
];
pub const CLUTTER_STROKES: usize = 30;
pub const LOWRES_FACTOR: usize = 4;
pub const OCCLUSION_RANGE: (f64, f64) = (0.20, 0.40);

/// Deterministic sample for `(seed, canvas, scenario)`.
pub fn generate_scene(seed: u64, height: usize, width: usize, scenario: Scenario) -> Result<SegSample> {
    let spec = scene_spec(seed, height, width)?;
    let Rendered { mut image, mask, owner } = render(&spec)?;
    let mut rng = SplitMix64::new(seed).fork(2);
    match scenario {
        Scenario::Clean => {}
        Scenario::Occluded => occlude(&mut image, &owner, spec.objects.len(), &mut rng),
        Scenario::Cluttered => clutter(&mut image, &mut rng),
        Scenario::LowRes => lowres(&mut image, LOWRES_FACTOR),
    }
    Ok(SegSample {
        image,
        mask,
        prompt: render_prompt(&spec),
        scenario,
        seed,
    })
}

fn paint(image: &mut Tensor, i: usize, rgb: [f64; 3]) {
    let p = image.shape()[1] * image.shape()[2];
    let d = image.data_mut();
    for c in 0..3 {
        d[c * p + i] = rgb[c];
    }
}

/// Covers 20-40% of one visible object's pixels with a gray bar.
fn occlude(image: &mut Tensor, owner: &[u8], n_objects: usize, rng: &mut SplitMix64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let counts: Vec<usize> = (1..=n_objects)
        .map(|k| owner.iter().filter(|&&o| o as usize == k).count())
        .collect();
    let candidates: Vec<usize> = (0..n_objects).filter(|&k| counts[k] >= 5).collect();
    let target = if candidates.is_empty() {
        match (0..n_objects).filter(|&k| counts[k] > 0).max_by_key(|&k| counts[k]) {
            Some(k) => k,
            None => return,
        }
    } else {
        candidates[rng.below(candidates.len())]
    };
    let id = (target + 1) as u8;
    let total = counts[target];
    let pix: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| owner[i] == id)
        .map(|i| (i / w, i % w))
        .collect();
    let (r0, r1) = (pix.iter().map(|p| p.0).min().unwrap(), pix.iter().map(|p| p.0).max().unwrap());
    let (c0, c1) = (pix.iter().map(|p| p.1).min().unwrap(), pix.iter().map(|p| p.1).max().unwrap());

    let horizontal_first = rng.bernoulli(0.5);
    for horizontal in [horizontal_first, !horizontal_first] {
        // object pixels per row (horizontal bar) or per column (vertical bar)
        let (lo, hi) = if horizontal { (r0, r1) } else { (c0, c1) };
        let mut per_line = vec![0usize; hi - lo + 1];
        for &(r, c) in &pix {
            per_line[if horizontal { r } else { c } - lo] += 1;
        }
        let mut options = Vec::new();
        for start in 0..per_line.len() {
            let mut covered = 0;
            for end in start..per_line.len() {
                covered += per_line[end];
                let f = covered as f64 / total as f64;
                if f > OCCLUSION_RANGE.1 {
                    break;
                }
                if f >= OCCLUSION_RANGE.0 {
                    options.push((start + lo, end + lo));
                }
            }
        }
        if options.is_empty() {
            continue;
        }
        let (a, b) = options[rng.below(options.len())];
        for r in 0..h {
            for c in 0..w {
                let inside = if horizontal {
                    (a..=b).contains(&r) && r_in(c, c0, c1, w)
                } else {
                    (a..=b).contains(&c) && r_in(r, r0, r1, h)
                };
                if inside {
                    paint(image, r * w + c, OCCLUDER_RGB);
                }
            }
        }
        return;
    }
    // Tiny objects where no straight band lands in range: cover a raster-order prefix.
    let k = libm::ceil(total as f64 * 0.3) as usize;
    for &(r, c) in pix.iter().take(k.max(1)) {
        paint(image, r * w + c, OCCLUDER_RGB);
    }
}

// the bar overhangs the object's bounding box by two pixels on each side
fn r_in(v: usize, lo: usize, hi: usize, limit: usize) -> bool {
    v + 2 >= lo && v <= (hi + 2).min(limit - 1)
}

fn clutter(image: &mut Tensor, rng: &mut SplitMix64) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    for _ in 0..CLUTTER_STROKES {
        let rgb = CLUTTER_RGB[rng.below(CLUTTER_RGB.len())];
        let len = rng.range_inclusive(3, 7) as f64;
        let angle = rng.uniform(0.0, core::f64::consts::PI);
        let (x0, y0) = (rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64));
        let (dx, dy) = (libm::cos(angle), libm::sin(angle));
        let steps = (len * 2.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / 2.0;
            let x = libm::floor(x0 + dx * t);
            let y = libm::floor(y0 + dy * t);
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                paint(image, y as usize * w + x as usize, rgb);
            }
        }
    }
}

/// Nearest-neighbour downsample by `f` then nearest upsample back: every `f x f` block takes
/// the value of its top-left pixel.
fn lowres(image: &mut Tensor, f: usize) {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data_mut();
    for ch in 0..c {
        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                plane[r * w + col] = plane[(r / f * f) * w + col / f * f];
            }
        }
    }
}

/// Per-sample seeds for a dataset; sample `i` uses the `i`-th output of a SplitMix64 stream.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// `n` samples; scenarios cycle through `mix` by index.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
    mix: &[Scenario],
) -> Result<Vec<SegSample>> {
    if mix.is_empty() {
        return Err(Error::config("scenario mix is empty"));
    }
    sample_seeds(seed, n)
        .into_iter()
        .enumerate()
        .map(|(i, s)| generate_scene(s, height, width, mix[i % mix.len()]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: ShapeKind, color: Color, cx: usize, cy: usize) -> SceneObject {
        SceneObject {
            shape,
            color,
            cx,
            cy,
            size: 4,
            shade: 1.0,
        }
    }

    fn spec(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            seed: 0,
            height: 32,
            width: 32,
            background: [0.5; 3],
            objects,
        }
    }

    #[test]
    fn class_ids_cover_twelve_foreground_classes() {
        let mut ids: Vec<u8> = SHAPES
            .iter()
            .flat_map(|&s| COLORS.iter().map(move |&c| class_id(s, c)))
            .collect();
        ids.sort();
        assert_eq!(ids, (1..=12).collect::<Vec<u8>>());
        assert_eq!(class_of(class_id(ShapeKind::Triangle, Color::Blue)), Some((ShapeKind::Triangle, Color::Blue)));
        assert_eq!(class_of(0), None);
        assert_eq!(class_names().len(), NUM_CLASSES);
    }

    #[test]
    fn prompt_templates() {
        let one = spec(vec![obj(ShapeKind::Circle, Color::Red, 10, 10)]);
        assert_eq!(render_prompt(&one), "a scene with red circle");
        let two = spec(vec![
            obj(ShapeKind::Circle, Color::Red, 8, 10),
            obj(ShapeKind::Square, Color::Blue, 20, 12),
        ]);
        assert_eq!(render_prompt(&two), "a scene with red circle left of blue square");
        let swapped = spec(vec![
            obj(ShapeKind::Square, Color::Blue, 20, 12),
            obj(ShapeKind::Circle, Color::Red, 8, 10),
            obj(ShapeKind::Triangle, Color::Green, 8, 25),
        ]);
        assert_eq!(
            render_prompt(&swapped),
            "a scene with red circle left of blue square, green triangle"
        );
        let stacked = spec(vec![
            obj(ShapeKind::Square, Color::Yellow, 10, 25),
            obj(ShapeKind::Circle, Color::Red, 11, 6),
        ]);
        assert_eq!(render_prompt(&stacked), "a scene with red circle above yellow square");
    }

    #[test]
    fn later_objects_occlude_earlier() {
        let s = spec(vec![
            obj(ShapeKind::Square, Color::Red, 10, 10),
            obj(ShapeKind::Square, Color::Blue, 12, 10),
        ]);
        let r = render(&s).unwrap();
        assert_eq!(r.mask.get(10, 12), class_id(ShapeKind::Square, Color::Blue));
        assert_eq!(r.mask.get(10, 7), class_id(ShapeKind::Square, Color::Red));
        assert_eq!(r.mask.get(0, 0), 0);
    }

    #[test]
    fn scenario_names_roundtrip() {
        for s in SCENARIOS {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
        assert!("foggy".parse::<Scenario>().is_err());
    }
}
