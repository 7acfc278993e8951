//! Line-delimited JSON datasets. Files carry pixel coordinates; memory holds
//! normalized ones.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::domain::{
    validate_trial, Fixation, FixationPack, ImageRaster, ReferringExpression, Scanpath, TargetBox, Trial, IMAGE_H,
    IMAGE_W,
};
use crate::error::{Error, Result};

pub const RAW_ENCODING: &str = "raw_rgb8_base64";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub height: usize,
    pub width: usize,
    pub encoding: String,
    pub data: String,
}

/// Raw RGB bytes in an external file, path relative to the dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub path: String,
    pub height: usize,
    pub width: usize,
}

/// One line of a dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<InlineImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<ImageRef>,
    pub words: Vec<String>,
    /// Per-pack fixations as `[x, y]` pixels.
    pub packs: Vec<Vec<[f64; 2]>>,
    /// `[x0, y0, x1, y1]` in pixels.
    pub target_box: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageStorage {
    Inline,
    /// Write each raster to `<dir>/<trial_id>.rgb` next to the dataset file.
    External { dir: String },
}

fn record_for(trial: &Trial, image: Option<InlineImage>, image_ref: Option<ImageRef>) -> TrialRecord {
    let (w, h) = (trial.image.width() as f64, trial.image.height() as f64);
    TrialRecord {
        trial_id: trial.trial_id.clone(),
        image,
        image_ref,
        words: trial.expression.raw_words.clone(),
        packs: trial
            .gt_scanpath
            .packs
            .iter()
            .map(|p| p.fixations.iter().map(|f| [f.x * w, f.y * h]).collect())
            .collect(),
        target_box: trial.target_box.map(|b| [b.x0 * w, b.y0 * h, b.x1 * w, b.y1 * h]),
    }
}

pub fn save_jsonl(trials: &[Trial], path: &Path, storage: &ImageStorage) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for t in trials {
        let record = match storage {
            ImageStorage::Inline => record_for(
                t,
                Some(InlineImage {
                    height: t.image.height(),
                    width: t.image.width(),
                    encoding: RAW_ENCODING.into(),
                    data: STANDARD.encode(t.image.bytes()),
                }),
                None,
            ),
            ImageStorage::External { dir } => {
                let rel = format!("{dir}/{}.rgb", t.trial_id);
                let full = path.parent().unwrap_or(Path::new(".")).join(&rel);
                if let Some(parent) = full.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&full, t.image.bytes())?;
                record_for(
                    t,
                    None,
                    Some(ImageRef {
                        path: rel,
                        height: t.image.height(),
                        width: t.image.width(),
                    }),
                )
            }
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn parse_record(record: TrialRecord, base: &Path, vocab: &Vocabulary) -> std::result::Result<Trial, String> {
    let image = match (record.image, record.image_ref) {
        (Some(img), None) => {
            if img.encoding != RAW_ENCODING {
                return Err(format!("unsupported image encoding {:?}", img.encoding));
            }
            let bytes = STANDARD.decode(img.data.as_bytes()).map_err(|e| format!("image data: {e}"))?;
            ImageRaster::from_bytes(img.height, img.width, bytes).map_err(|e| e.to_string())?
        }
        (None, Some(r)) => {
            let bytes = fs::read(base.join(&r.path)).map_err(|e| format!("image_ref {}: {e}", r.path))?;
            ImageRaster::from_bytes(r.height, r.width, bytes).map_err(|e| e.to_string())?
        }
        (Some(_), Some(_)) => return Err("both image and image_ref given".into()),
        (None, None) => return Err("missing image or image_ref".into()),
    };
    if image.height() != IMAGE_H || image.width() != IMAGE_W {
        return Err(format!(
            "image is {}x{}, expected {IMAGE_H}x{IMAGE_W}",
            image.height(),
            image.width()
        ));
    }
    let (w, h) = (IMAGE_W as f64, IMAGE_H as f64);
    let in_image = |x: f64, y: f64| (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
    let mut packs = Vec::with_capacity(record.packs.len());
    for (j, pack) in record.packs.iter().enumerate() {
        let mut fixations = Vec::with_capacity(pack.len());
        for (i, &[x, y]) in pack.iter().enumerate() {
            if !in_image(x, y) {
                return Err(format!("pack {j} fixation {i} at ({x}, {y}) px lies outside the image"));
            }
            fixations.push(Fixation::new(x / w, y / h));
        }
        packs.push(FixationPack::new(fixations));
    }
    let target_box = match record.target_box {
        Some([x0, y0, x1, y1]) => {
            if !in_image(x0, y0) || !in_image(x1, y1) || x0 > x1 || y0 > y1 {
                return Err(format!("target_box [{x0}, {y0}, {x1}, {y1}] is not a box inside the image"));
            }
            Some(TargetBox {
                x0: x0 / w,
                y0: y0 / h,
                x1: x1 / w,
                y1: y1 / h,
            })
        }
        None => None,
    };
    let token_ids = record.words.iter().map(|w| vocab.id(w)).collect();
    let trial = Trial {
        trial_id: record.trial_id,
        image,
        expression: ReferringExpression {
            token_ids,
            raw_words: record.words,
        },
        gt_scanpath: Scanpath::new(packs),
        target_box,
    };
    let violations = validate_trial(&trial, vocab.len());
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(format!("invalid trial {}: {}", trial.trial_id, list.join("; ")));
    }
    Ok(trial)
}

fn read_records(path: &Path) -> Result<Vec<(usize, TrialRecord)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Vocabulary of every word in the file, sorted, after the reserved entries.
pub fn scan_vocabulary(path: &Path) -> Result<Vocabulary> {
    let mut words: Vec<String> = read_records(path)?.into_iter().flat_map(|(_, r)| r.words).collect();
    words.sort();
    words.dedup();
    Ok(Vocabulary::new(&words))
}

/// Reads and validates every line; errors name the offending line.
pub fn load_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<Trial>> {
    let base: PathBuf = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    read_records(path)?
        .into_iter()
        .map(|(line, record)| {
            parse_record(record, &base, vocab).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            })
        })
        .collect()
}

/// One line of a predictions file. Dataset lines also parse as predictions
/// of their own ground truth, which makes self-comparison a plain file
/// argument.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trial_id: String,
    pub packs: Vec<Vec<[f64; 2]>>,
}

pub fn save_predictions(path: &Path, ids: &[String], preds: &[Scanpath]) -> Result<()> {
    let (w, h) = (IMAGE_W as f64, IMAGE_H as f64);
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (id, sp) in ids.iter().zip(preds) {
        let record = PredictionRecord {
            trial_id: id.clone(),
            packs: sp
                .packs
                .iter()
                .map(|p| p.fixations.iter().map(|f| [f.x * w, f.y * h]).collect())
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, Scanpath>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let (w, h) = (IMAGE_W as f64, IMAGE_H as f64);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let mut packs = Vec::with_capacity(record.packs.len());
        for pack in &record.packs {
            let mut fixations = Vec::with_capacity(pack.len());
            for &[x, y] in pack {
                if !((0.0..=w).contains(&x) && (0.0..=h).contains(&y)) {
                    return Err(parse_err(format!("fixation ({x}, {y}) px lies outside the image")));
                }
                fixations.push(Fixation::new(x / w, y / h));
            }
            packs.push(FixationPack::new(fixations));
        }
        if out.insert(record.trial_id.clone(), Scanpath::new(packs)).is_some() {
            return Err(parse_err(format!("duplicate trial id {}", record.trial_id)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticConfig};

    fn dataset(n: usize) -> (Vec<Trial>, Vocabulary) {
        let cfg = SyntheticConfig {
            n_trials: n,
            seed: 4,
            ..SyntheticConfig::default()
        };
        (generate(&cfg).unwrap(), cfg.vocabulary())
    }

    fn assert_same(a: &[Trial], b: &[Trial]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.trial_id, y.trial_id);
            assert_eq!(x.image, y.image);
            assert_eq!(x.expression, y.expression);
            assert_eq!(x.gt_scanpath.packs.len(), y.gt_scanpath.packs.len());
            for (p, q) in x.gt_scanpath.flatten().iter().zip(y.gt_scanpath.flatten()) {
                assert!((p.x - q.x).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inline_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let (trials, vocab) = dataset(6);
        save_jsonl(&trials, &path, &ImageStorage::Inline).unwrap();
        assert_same(&trials, &load_jsonl(&path, &vocab).unwrap());
    }

    #[test]
    fn external_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let (trials, vocab) = dataset(3);
        save_jsonl(&trials, &path, &ImageStorage::External { dir: "img".into() }).unwrap();
        assert!(dir.path().join("img").join(format!("{}.rgb", trials[0].trial_id)).exists());
        assert_same(&trials, &load_jsonl(&path, &vocab).unwrap());
    }

    #[test]
    fn dataset_lines_read_as_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let (trials, _) = dataset(2);
        save_jsonl(&trials, &path, &ImageStorage::Inline).unwrap();
        let preds = load_predictions(&path).unwrap();
        assert_eq!(preds[&trials[1].trial_id].packs.len(), trials[1].gt_scanpath.packs.len());
        let out = dir.path().join("p.jsonl");
        let ids: Vec<String> = trials.iter().map(|t| t.trial_id.clone()).collect();
        let sps: Vec<Scanpath> = trials.iter().map(|t| t.gt_scanpath.clone()).collect();
        save_predictions(&out, &ids, &sps).unwrap();
        assert_eq!(load_predictions(&out).unwrap().len(), 2);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, &Vocabulary::new::<&str>(&[])).unwrap().is_empty());
    }

    #[test]
    fn pack_count_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let (trials, vocab) = dataset(3);
        save_jsonl(&trials, &path, &ImageStorage::Inline).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: TrialRecord = serde_json::from_str(&lines[1]).unwrap();
        rec.packs.pop();
        lines[1] = serde_json::to_string(&rec).unwrap();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_jsonl(&path, &vocab) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("pack count"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_image_coordinate_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let (trials, vocab) = dataset(1);
        let mut rec = record_for(&trials[0], None, None);
        rec.image = Some(InlineImage {
            height: IMAGE_H,
            width: IMAGE_W,
            encoding: RAW_ENCODING.into(),
            data: STANDARD.encode(trials[0].image.bytes()),
        });
        rec.packs[0] = vec![[600.0, 10.0]];
        fs::write(&path, serde_json::to_string(&rec).unwrap()).unwrap();
        let err = load_jsonl(&path, &vocab).unwrap_err();
        assert!(err.to_string().contains("outside the image"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "\n{not json\n").unwrap();
        match load_jsonl(&path, &Vocabulary::new::<&str>(&[])) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
