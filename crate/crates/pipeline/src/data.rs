//! Line-delimited question/answer records, sign labels, image decoding and
//! seeded splits.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tinydrive_core::Tensor;

use crate::config::TrainConfig;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Perception,
    Prediction,
    Planning,
    Behavior,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Perception, Category::Prediction, Category::Planning, Category::Behavior];

    pub fn name(self) -> &'static str {
        match self {
            Category::Perception => "perception",
            Category::Prediction => "prediction",
            Category::Planning => "planning",
            Category::Behavior => "behavior",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaRecord {
    pub id: String,
    pub image_paths: Vec<String>,
    pub question: String,
    pub answer: String,
    pub category: Category,
}

/// Sign class and inclusive pixel box `[x0, y0, x1, y1]` of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub frame_id: String,
    pub image_path: String,
    pub class: usize,
    pub class_name: String,
    pub bbox: [u32; 4],
}

/// Train/val/test index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(PipelineError::Dataset(format!("unknown split {name:?}"))),
        }
    }
}

/// Shuffles `0..n` with `seed` and cuts it by the ratios. Train and val
/// sizes are floored, test takes the remainder.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_train = cut(ratios[0]).min(n);
    let n_val = cut(ratios[1]).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split { train: idx, val, test }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| PipelineError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Decodes an 8-bit RGB image, resizes it to `res` x `res` and returns
/// `[3, res, res]` in `[0, 1]`.
pub fn load_image(path: &Path, res: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| PipelineError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.dimensions() != (res as u32, res as u32) {
        rgb = image::imageops::resize(&rgb, res as u32, res as u32, FilterType::Triangle);
    }
    let plane = res * res;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, res, res], data)?)
}

/// One set of camera views shared by several records.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub paths: Vec<String>,
    /// `[n_views, 3, res, res]`.
    pub pixels: Tensor<f32>,
    /// Label of the front view, when known.
    pub label: Option<LabelRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<VqaRecord>,
    /// Frame index of every record.
    pub record_frame: Vec<usize>,
    pub frames: Vec<Frame>,
    /// Split over records.
    pub split: Split,
    /// Split over labelled frames (indices into `frames`).
    pub frame_split: Split,
}

/// The question/answer file of a dataset directory or the file itself.
pub fn qa_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("qa.jsonl")
    } else {
        path.to_path_buf()
    }
}

pub fn load_records(path: &Path) -> Result<Vec<VqaRecord>> {
    read_lines(&qa_path(path))
}

pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    read_lines(path)
}

/// Reads records and labels, decodes every referenced image once and
/// splits records and labelled frames with the configured seed.
pub fn load_dataset(path: &Path, cfg: &TrainConfig) -> Result<Dataset> {
    let qa = qa_path(path);
    let root = qa.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = load_records(&qa)?;
    if records.is_empty() {
        return Err(PipelineError::Dataset(format!("{} holds no records", qa.display())));
    }
    let labels_path = root.join("labels.jsonl");
    let labels: HashMap<String, LabelRecord> = if labels_path.exists() {
        load_labels(&labels_path)?.into_iter().map(|l| (l.image_path.clone(), l)).collect()
    } else {
        HashMap::new()
    };

    let mut frames: Vec<Frame> = Vec::new();
    let mut by_paths: HashMap<Vec<String>, usize> = HashMap::new();
    let mut record_frame = Vec::with_capacity(records.len());
    for (line, r) in records.iter().enumerate() {
        if r.image_paths.len() != cfg.n_views {
            return Err(PipelineError::Record {
                path: qa.clone(),
                line: line + 1,
                msg: format!("expected {} image paths, found {}", cfg.n_views, r.image_paths.len()),
            });
        }
        if let Some(&f) = by_paths.get(&r.image_paths) {
            record_frame.push(f);
            continue;
        }
        let mut views = Vec::with_capacity(cfg.n_views);
        for p in &r.image_paths {
            let full = root.join(p);
            if !full.exists() {
                return Err(PipelineError::Record {
                    path: qa.clone(),
                    line: line + 1,
                    msg: format!("missing image file {}", full.display()),
                });
            }
            views.push(load_image(&full, cfg.image_resolution)?);
        }
        let label = labels.get(&r.image_paths[0]).cloned();
        let id = label.as_ref().map(|l| l.frame_id.clone()).unwrap_or_else(|| {
            Path::new(&r.image_paths[0])
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("frame{}", frames.len()))
        });
        by_paths.insert(r.image_paths.clone(), frames.len());
        record_frame.push(frames.len());
        frames.push(Frame {
            id,
            paths: r.image_paths.clone(),
            pixels: Tensor::stack(&views)?,
            label,
        });
    }
    let ratios = [cfg.train_ratio, cfg.val_ratio, cfg.test_ratio];
    let split = split_indices(records.len(), ratios, cfg.seed);
    let labelled: Vec<usize> = (0..frames.len()).filter(|&f| frames[f].label.is_some()).collect();
    let fs = split_indices(labelled.len(), ratios, cfg.seed.wrapping_add(1));
    let map = |v: Vec<usize>| v.into_iter().map(|i| labelled[i]).collect();
    let frame_split = Split {
        train: map(fs.train),
        val: map(fs.val),
        test: map(fs.test),
    };
    Ok(Dataset {
        root,
        records,
        record_frame,
        frames,
        split,
        frame_split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_one_hundred() {
        let s = split_indices(100, [0.7, 0.2, 0.1], 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 20, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seeded() {
        assert_eq!(split_indices(57, [0.7, 0.2, 0.1], 9), split_indices(57, [0.7, 0.2, 0.1], 9));
        assert_ne!(split_indices(57, [0.7, 0.2, 0.1], 9), split_indices(57, [0.7, 0.2, 0.1], 10));
        let s = split_indices(3, [0.7, 0.2, 0.1], 0);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 3);
    }

    #[test]
    fn record_schema_is_strict() {
        let ok = r#"{"id":"a","image_paths":["x.png"],"question":"q","answer":"a","category":"planning"}"#;
        assert_eq!(serde_json::from_str::<VqaRecord>(ok).unwrap().category, Category::Planning);
        let extra = r#"{"id":"a","image_paths":["x.png"],"question":"q","answer":"a","category":"planning","x":1}"#;
        assert!(serde_json::from_str::<VqaRecord>(extra).is_err());
        let bad_cat = r#"{"id":"a","image_paths":["x.png"],"question":"q","answer":"a","category":"weather"}"#;
        assert!(serde_json::from_str::<VqaRecord>(bad_cat).is_err());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qa.jsonl");
        let good = r#"{"id":"a","image_paths":["x.png"],"question":"q","answer":"a","category":"planning"}"#;
        fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        match load_records(&p) {
            Err(PipelineError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"id":"a","image_paths":["nope.png"],"question":"q","answer":"a","category":"planning"}"#;
        fs::write(dir.path().join("qa.jsonl"), format!("{rec}\n")).unwrap();
        let err = load_dataset(dir.path(), &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("missing image"), "{err}");
    }

    #[test]
    fn image_is_resized_and_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        image::RgbImage::from_pixel(10, 6, image::Rgb([255, 0, 51])).save(&p).unwrap();
        let t = load_image(&p, 32).unwrap();
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert!((t.data()[0] - 1.0).abs() < 1e-6);
        assert!(t.data()[1024].abs() < 1e-6);
        assert!((t.data()[2048] - 0.2).abs() < 1e-6);
    }
}
