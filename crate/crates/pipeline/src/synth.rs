//! Synthetic driving scenes with one traffic sign each, plus question and
//! answer pairs whose answers follow from the sign class and its box.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Category, LabelRecord, VqaRecord};
use crate::error::{PipelineError, Result};

pub const SYNTH_RESOLUTION: u32 = 224;
pub const NUM_CLASSES: usize = 11;
pub const QA_PER_FRAME: usize = 10;
/// Sign sizes at or above this many pixels count as near.
pub const NEAR_SIZE: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Octagon,
    TriangleDown,
    Square,
    Diamond,
    Housing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mark {
    Bar,
    Column,
    ArrowRight,
    ArrowLeft,
    ArrowUp,
    Lamp(usize, [u8; 3]),
    InnerTriangle,
    Post,
    Parking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Urgency {
    Stop,
    Caution,
    Go,
}

struct SignClass {
    name: &'static str,
    phrase: &'static str,
    color: &'static str,
    shape_name: &'static str,
    shape: Shape,
    fill: [u8; 3],
    mark: Mark,
    mark_color: [u8; 3],
    action: &'static str,
    direction: &'static str,
    urgency: Urgency,
}

const RED: [u8; 3] = [210, 30, 35];
const BLUE: [u8; 3] = [25, 70, 200];
const WHITE: [u8; 3] = [245, 245, 245];
const BLACK: [u8; 3] = [20, 20, 20];
const YELLOW: [u8; 3] = [240, 200, 20];
const GREEN: [u8; 3] = [30, 190, 60];
const HOUSING: [u8; 3] = [35, 35, 40];

const CLASSES: [SignClass; NUM_CLASSES] = [
    SignClass {
        name: "stop",
        phrase: "a stop sign",
        color: "red",
        shape_name: "octagon",
        shape: Shape::Octagon,
        fill: RED,
        mark: Mark::Column,
        mark_color: WHITE,
        action: "come to a full stop and then proceed",
        direction: "straight",
        urgency: Urgency::Stop,
    },
    SignClass {
        name: "turn_right",
        phrase: "a turn right sign",
        color: "blue",
        shape_name: "circle",
        shape: Shape::Circle,
        fill: BLUE,
        mark: Mark::ArrowRight,
        mark_color: WHITE,
        action: "turn right at the intersection",
        direction: "right",
        urgency: Urgency::Caution,
    },
    SignClass {
        name: "turn_left",
        phrase: "a turn left sign",
        color: "blue",
        shape_name: "circle",
        shape: Shape::Circle,
        fill: BLUE,
        mark: Mark::ArrowLeft,
        mark_color: WHITE,
        action: "turn left at the intersection",
        direction: "left",
        urgency: Urgency::Caution,
    },
    SignClass {
        name: "go_straight",
        phrase: "a go straight sign",
        color: "blue",
        shape_name: "circle",
        shape: Shape::Circle,
        fill: BLUE,
        mark: Mark::ArrowUp,
        mark_color: WHITE,
        action: "keep driving straight",
        direction: "straight",
        urgency: Urgency::Go,
    },
    SignClass {
        name: "red_light",
        phrase: "a red traffic light",
        color: "red",
        shape_name: "rectangle",
        shape: Shape::Housing,
        fill: HOUSING,
        mark: Mark::Lamp(0, RED),
        mark_color: RED,
        action: "stop and wait for the green light",
        direction: "straight",
        urgency: Urgency::Stop,
    },
    SignClass {
        name: "yellow_light",
        phrase: "a yellow traffic light",
        color: "yellow",
        shape_name: "rectangle",
        shape: Shape::Housing,
        fill: HOUSING,
        mark: Mark::Lamp(1, YELLOW),
        mark_color: YELLOW,
        action: "slow down and prepare to stop",
        direction: "straight",
        urgency: Urgency::Caution,
    },
    SignClass {
        name: "green_light",
        phrase: "a green traffic light",
        color: "green",
        shape_name: "rectangle",
        shape: Shape::Housing,
        fill: HOUSING,
        mark: Mark::Lamp(2, GREEN),
        mark_color: GREEN,
        action: "continue through the intersection",
        direction: "straight",
        urgency: Urgency::Go,
    },
    SignClass {
        name: "yield",
        phrase: "a yield sign",
        color: "red and white",
        shape_name: "triangle",
        shape: Shape::TriangleDown,
        fill: RED,
        mark: Mark::InnerTriangle,
        mark_color: WHITE,
        action: "slow down and give way to other vehicles",
        direction: "straight",
        urgency: Urgency::Caution,
    },
    SignClass {
        name: "no_entry",
        phrase: "a no entry sign",
        color: "red",
        shape_name: "circle",
        shape: Shape::Circle,
        fill: RED,
        mark: Mark::Bar,
        mark_color: WHITE,
        action: "do not enter and find another route",
        direction: "back",
        urgency: Urgency::Stop,
    },
    SignClass {
        name: "pedestrian_crossing",
        phrase: "a pedestrian crossing sign",
        color: "yellow",
        shape_name: "diamond",
        shape: Shape::Diamond,
        fill: YELLOW,
        mark: Mark::Post,
        mark_color: BLACK,
        action: "slow down and watch for pedestrians",
        direction: "straight",
        urgency: Urgency::Caution,
    },
    SignClass {
        name: "parking",
        phrase: "a parking sign",
        color: "blue",
        shape_name: "square",
        shape: Shape::Square,
        fill: BLUE,
        mark: Mark::Parking,
        mark_color: WHITE,
        action: "look for a free parking space",
        direction: "right",
        urgency: Urgency::Caution,
    },
];

pub fn class_names() -> Vec<&'static str> {
    CLASSES.iter().map(|c| c.name).collect()
}

/// Horizontal placement of a box centre within the image thirds.
fn side(bbox: [u32; 4]) -> &'static str {
    let cx = (bbox[0] + bbox[2]) as f64 / 2.0;
    let w = SYNTH_RESOLUTION as f64;
    if cx < w / 3.0 {
        "left"
    } else if cx > 2.0 * w / 3.0 {
        "right"
    } else {
        "center"
    }
}

fn near(bbox: [u32; 4]) -> bool {
    (bbox[3] - bbox[1]).max(bbox[2] - bbox[0]) + 1 >= NEAR_SIZE
}

/// The closed question set, one per template.
pub const QUESTIONS: [(&str, Category); 14] = [
    ("what traffic sign is visible in the front view ?", Category::Perception),
    ("what color is the sign ?", Category::Perception),
    ("what shape is the sign ?", Category::Perception),
    ("where is the sign in the image ?", Category::Perception),
    ("how far away is the sign ?", Category::Perception),
    ("is there a traffic light in the image ?", Category::Perception),
    ("what will the ego vehicle encounter next ?", Category::Prediction),
    ("will the ego vehicle have to stop ?", Category::Prediction),
    ("are pedestrians likely to cross ahead ?", Category::Prediction),
    ("what should the ego vehicle do next ?", Category::Planning),
    ("which direction should the ego vehicle go ?", Category::Planning),
    ("what is a safe speed for the ego vehicle ?", Category::Planning),
    ("what is the ego vehicle doing ?", Category::Behavior),
    ("is the ego vehicle steering ?", Category::Behavior),
];

/// Answer of template `q` for a sign of class `class` with pixel box
/// `[x0, y0, x1, y1]` (inclusive) in a 224x224 frame.
pub fn answer(q: usize, class: usize, bbox: [u32; 4]) -> Option<String> {
    let c = CLASSES.get(class)?;
    let close = near(bbox);
    let a = match q {
        0 => format!("there is {} .", c.phrase),
        1 => format!("the sign is {} .", c.color),
        2 => format!("the sign is a {} .", c.shape_name),
        3 => match side(bbox) {
            "center" => "the sign is straight ahead .".to_string(),
            s => format!("the sign is on the {s} side of the road ."),
        },
        4 => if close { "the sign is close to the ego vehicle ." } else { "the sign is far from the ego vehicle ." }.to_string(),
        5 => match c.shape {
            Shape::Housing => format!("yes , the light is {} .", c.color),
            _ => "no , there is no traffic light .".to_string(),
        },
        6 => format!("the ego vehicle will reach {} {} .", c.phrase, if close { "soon" } else { "later" }),
        7 => if c.urgency == Urgency::Stop {
            "yes , the ego vehicle has to stop ."
        } else {
            "no , the ego vehicle does not have to stop ."
        }
        .to_string(),
        8 => if c.name == "pedestrian_crossing" {
            "yes , pedestrians may cross ahead ."
        } else {
            "no , no pedestrians are expected ."
        }
        .to_string(),
        9 => format!("the ego vehicle should {} .", c.action),
        10 => match c.direction {
            "back" => "the ego vehicle should turn back .".to_string(),
            d => format!("the ego vehicle should go {d} ."),
        },
        11 => match (c.urgency, close) {
            (Urgency::Stop, true) => "zero , it must stop now .",
            (Urgency::Stop, false) => "low , it should start braking .",
            (Urgency::Caution, true) => "low , it should drive carefully .",
            (Urgency::Caution, false) => "moderate , it can keep its speed for now .",
            (Urgency::Go, _) => "normal , the road ahead is clear .",
        }
        .to_string(),
        12 => match (c.urgency, close) {
            (Urgency::Stop, true) => "the ego vehicle is braking to a stop .",
            (Urgency::Stop, false) => "the ego vehicle is slowing down .",
            (Urgency::Caution, true) => "the ego vehicle is driving slowly .",
            (Urgency::Caution, false) => "the ego vehicle is approaching the sign .",
            (Urgency::Go, _) => "the ego vehicle is driving forward .",
        }
        .to_string(),
        13 => match (c.direction, close) {
            ("left", true) => "yes , it is steering left .",
            ("right", true) if c.name == "turn_right" => "yes , it is steering right .",
            _ => "no , it is going straight .",
        }
        .to_string(),
        _ => return None,
    };
    Some(a)
}

pub fn template_of(question: &str) -> Option<usize> {
    QUESTIONS.iter().position(|(q, _)| *q == question)
}

// ------------------------------------------------------------------ drawing

fn inside(shape: Shape, x: f64, y: f64) -> bool {
    match shape {
        Shape::Circle => x * x + y * y <= 1.0,
        Shape::Octagon => x.abs() <= 1.0 && y.abs() <= 1.0 && x.abs() + y.abs() <= std::f64::consts::SQRT_2,
        Shape::TriangleDown => y >= -0.85 && y <= 0.95 && x.abs() <= (0.95 - y) / 1.8,
        Shape::Square => x.abs() <= 0.9 && y.abs() <= 0.9,
        Shape::Diamond => x.abs() + y.abs() <= 1.0,
        Shape::Housing => x.abs() <= 0.45 && y.abs() <= 1.0,
    }
}

fn mark_at(mark: Mark, x: f64, y: f64) -> Option<bool> {
    let tri = |u: f64, v: f64| u >= -0.45 && u <= 0.55 && v.abs() <= (0.55 - u) * 0.6;
    let hit = match mark {
        Mark::Bar => x.abs() <= 0.62 && y.abs() <= 0.2,
        Mark::Column => x.abs() <= 0.22 && y.abs() <= 0.62,
        Mark::ArrowRight => tri(x, y),
        Mark::ArrowLeft => tri(-x, y),
        Mark::ArrowUp => tri(-y, x),
        Mark::Lamp(slot, _) => {
            let lamp = |i: usize| {
                let cy = -0.62 + 0.62 * i as f64;
                x * x + (y - cy) * (y - cy) <= 0.3 * 0.3
            };
            if lamp(slot) {
                return Some(true);
            }
            if (0..3).any(lamp) {
                return Some(false);
            }
            return None;
        }
        Mark::InnerTriangle => y >= -0.45 && x.abs() <= (0.45 - y) / 1.8,
        Mark::Post => x.abs() <= 0.13 && y.abs() <= 0.5,
        Mark::Parking => (x >= -0.35 && x <= -0.12 && y.abs() <= 0.6) || (x >= -0.35 && x <= 0.35 && y >= -0.6 && y <= 0.05 && !(x > -0.12 && x < 0.15 && y > -0.38 && y < -0.17)),
    };
    hit.then_some(true)
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amp: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8)
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    let n = img.width() as i64;
    for y in y0.max(0)..y1.min(n) {
        for x in x0.max(0)..x1.min(n) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// Renders a scene and returns the inclusive pixel box of the sign.
fn render(rng: &mut ChaCha8Rng, class: usize) -> (RgbImage, [u32; 4]) {
    let n = SYNTH_RESOLUTION;
    let ni = n as i64;
    let mut img = RgbImage::new(n, n);
    let horizon = rng.random_range(86..110) as i64;
    let sky_top = jitter(rng, [120, 170, 225], 12);
    for y in 0..horizon {
        let t = y as f64 / horizon as f64;
        let c = [
            (sky_top[0] as f64 * (1.0 - t) + 205.0 * t) as u8,
            (sky_top[1] as f64 * (1.0 - t) + 220.0 * t) as u8,
            (sky_top[2] as f64 * (1.0 - t) + 235.0 * t) as u8,
        ];
        fill_rect(&mut img, 0, y, ni, y + 1, c);
    }
    let ground = jitter(rng, [112, 118, 104], 10);
    fill_rect(&mut img, 0, horizon, ni, ni, ground);
    for y in horizon..ni {
        let t = (y - horizon) as f64 / (ni - horizon) as f64;
        let half = 6.0 + t * 100.0;
        fill_rect(&mut img, (ni as f64 / 2.0 - half) as i64, y, (ni as f64 / 2.0 + half) as i64, y + 1, [72, 72, 76]);
        if (y / 9) % 2 == 0 {
            let w = (1.0 + t * 3.0) as i64;
            fill_rect(&mut img, ni / 2 - w, y, ni / 2 + w, y + 1, [205, 205, 195]);
        }
    }
    for _ in 0..rng.random_range(3..7) {
        let w = rng.random_range(18..60);
        let h = rng.random_range(15..55);
        let x = rng.random_range(-10..ni - 10);
        let v = rng.random_range(95..165);
        let c = jitter(rng, [v as u8, (v - 8) as u8, (v - 18) as u8], 8);
        fill_rect(&mut img, x, horizon - h, x + w, horizon, c);
    }
    for _ in 0..rng.random_range(0..3) {
        let w = rng.random_range(22..40);
        let h = rng.random_range(12..20);
        let x = rng.random_range(60..ni - 60 - w);
        let y = rng.random_range(horizon + 15..ni - 30);
        let v = rng.random_range(40..110) as u8;
        let c = jitter(rng, [v, v, v.saturating_add(10)], 10);
        fill_rect(&mut img, x, y, x + w, y + h, c);
    }

    let cls = &CLASSES[class];
    let size = rng.random_range(40..=92) as i64;
    let half = size as f64 / 2.0;
    let cx = rng.random_range(half as i64 + 4..ni - half as i64 - 4) as f64;
    let cy = rng.random_range(half as i64 + 4..=(horizon + 30).min(ni - 60)) as f64;
    let pole = [70u8, 70, 74];
    fill_rect(&mut img, cx as i64 - 2, (cy + half * 0.8) as i64, cx as i64 + 2, (cy + half + 60.0) as i64, pole);
    let fill = jitter(rng, cls.fill, 10);
    let mark = jitter(rng, cls.mark_color, 10);
    let dark = [70u8, 70, 70];
    let mut bbox = [u32::MAX, u32::MAX, 0, 0];
    let (x0, x1) = ((cx - half).floor() as i64, (cx + half).ceil() as i64);
    let (y0, y1) = ((cy - half).floor() as i64, (cy + half).ceil() as i64);
    for py in y0.max(0)..=y1.min(ni - 1) {
        for px in x0.max(0)..=x1.min(ni - 1) {
            let x = (px as f64 + 0.5 - cx) / half;
            let y = (py as f64 + 0.5 - cy) / half;
            if !inside(cls.shape, x, y) {
                continue;
            }
            let c = match mark_at(cls.mark, x, y) {
                Some(true) => mark,
                Some(false) => dark,
                None => fill,
            };
            img.put_pixel(px as u32, py as u32, Rgb(c));
            let (ux, uy) = (px as u32, py as u32);
            bbox = [bbox[0].min(ux), bbox[1].min(uy), bbox[2].max(ux), bbox[3].max(uy)];
        }
    }
    for p in img.pixels_mut() {
        let r = rng.random_range(-6i32..=6);
        p.0 = p.0.map(|v| (v as i32 + r).clamp(0, 255) as u8);
    }
    (img, bbox)
}

// ------------------------------------------------------------------ corpus

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Number of frames.
    pub size: usize,
    pub n_views: usize,
    /// Total question/answer pairs; `size * QA_PER_FRAME` when absent.
    pub qa_total: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub images: usize,
    pub records: usize,
    pub classes: usize,
}

/// Writes `images/`, `qa.jsonl` and `labels.jsonl` under `out`.
pub fn synth_corpus(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    if spec.size == 0 {
        return Err(PipelineError::Dataset("synthetic corpus size must be at least 1".into()));
    }
    if spec.n_views != 1 && spec.n_views != 6 {
        return Err(PipelineError::Dataset("views must be 1 or 6".into()));
    }
    let total = spec.qa_total.unwrap_or(spec.size * QA_PER_FRAME);
    if total > spec.size * QUESTIONS.len() {
        return Err(PipelineError::Dataset(format!(
            "at most {} question/answer pairs per frame",
            QUESTIONS.len()
        )));
    }
    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| PipelineError::io(&img_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut qa = String::new();
    let mut labels = String::new();
    let mut seen = [false; NUM_CLASSES];
    let mut records = 0;
    for f in 0..spec.size {
        let frame_id = format!("f{f:05}");
        // cycle through the classes so every class is present
        let mut paths = Vec::with_capacity(spec.n_views);
        let mut front = None;
        for v in 0..spec.n_views {
            let class = if v == 0 { f % NUM_CLASSES } else { rng.random_range(0..NUM_CLASSES) };
            seen[class] = true;
            let (img, bbox) = render(&mut rng, class);
            let name = if spec.n_views == 1 { format!("{frame_id}.png") } else { format!("{frame_id}_v{v}.png") };
            let path = img_dir.join(&name);
            img.save(&path).map_err(|e| PipelineError::Image {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            let rel = format!("images/{name}");
            let label = LabelRecord {
                frame_id: if spec.n_views == 1 { frame_id.clone() } else { format!("{frame_id}_v{v}") },
                image_path: rel.clone(),
                class,
                class_name: CLASSES[class].name.to_string(),
                bbox,
            };
            let _ = writeln!(labels, "{}", serde_json::to_string(&label).expect("label serializes"));
            if v == 0 {
                front = Some((class, bbox));
            }
            paths.push(rel);
        }
        let (class, bbox) = front.expect("at least one view");
        let count = total / spec.size + usize::from(f < total % spec.size);
        let mut templates: Vec<usize> = (0..QUESTIONS.len()).collect();
        templates.shuffle(&mut rng);
        templates.truncate(count);
        templates.sort_unstable();
        for q in templates {
            let rec = VqaRecord {
                id: format!("{frame_id}_q{q:02}"),
                image_paths: paths.clone(),
                question: QUESTIONS[q].0.to_string(),
                answer: answer(q, class, bbox).expect("template in range"),
                category: QUESTIONS[q].1,
            };
            let _ = writeln!(qa, "{}", serde_json::to_string(&rec).expect("record serializes"));
            records += 1;
        }
    }
    let write = |name: &str, body: &str| -> Result<()> {
        let p = out.join(name);
        let mut f = fs::File::create(&p).map_err(|e| PipelineError::io(&p, e))?;
        f.write_all(body.as_bytes()).map_err(|e| PipelineError::io(&p, e))
    };
    write("qa.jsonl", &qa)?;
    write("labels.jsonl", &labels)?;
    Ok(SynthSummary {
        frames: spec.size,
        images: spec.size * spec.n_views,
        records,
        classes: seen.iter().filter(|&&s| s).count(),
    })
}

/// Re-derives every answer from the labels of its front image. Returns the
/// ids of records whose stored answer disagrees.
pub fn audit(records: &[VqaRecord], labels: &[LabelRecord]) -> Vec<String> {
    let by_path: std::collections::HashMap<&str, &LabelRecord> = labels.iter().map(|l| (l.image_path.as_str(), l)).collect();
    records
        .iter()
        .filter(|r| {
            let ok = (|| {
                let l = by_path.get(r.image_paths.first()?.as_str())?;
                let q = template_of(&r.question)?;
                Some(answer(q, l.class, l.bbox)? == r.answer && QUESTIONS[q].1 == r.category)
            })();
            ok != Some(true)
        })
        .map(|r| r.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_table_is_consistent() {
        assert_eq!(class_names().len(), 11);
        let mut names = class_names();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 11);
        // every class has a distinct visual code
        for (i, a) in CLASSES.iter().enumerate() {
            for b in &CLASSES[i + 1..] {
                assert!(a.shape != b.shape || a.fill != b.fill || a.mark != b.mark, "{} vs {}", a.name, b.name);
            }
        }
    }

    #[test]
    fn answers_depend_on_box() {
        let left = [10, 10, 50, 50];
        let right = [170, 10, 220, 80];
        assert_eq!(answer(3, 0, left).unwrap(), "the sign is on the left side of the road .");
        assert_eq!(answer(3, 0, right).unwrap(), "the sign is on the right side of the road .");
        assert_eq!(answer(4, 0, left).unwrap(), "the sign is far from the ego vehicle .");
        assert_eq!(answer(4, 0, right).unwrap(), "the sign is close to the ego vehicle .");
        assert!(answer(14, 0, left).is_none());
        assert!(answer(0, 11, left).is_none());
    }

    #[test]
    fn render_box_covers_sign_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for class in 0..NUM_CLASSES {
            let (img, b) = render(&mut rng, class);
            assert!(b[0] < b[2] && b[1] < b[3]);
            assert!(b[2] < SYNTH_RESOLUTION && b[3] < SYNTH_RESOLUTION);
            assert_eq!(img.dimensions(), (224, 224));
        }
    }
}
