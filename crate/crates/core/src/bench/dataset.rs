use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::questions::generate_question_quad;
use super::record::{read_jsonl, write_jsonl, MM4Record};
use super::scene::{generate_scene, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::export::write_ppm;
use crate::rng::{derive_seed, named_seed, SplitMix64};
use crate::tensor::{read_tensor, write_tensor, DType};
use crate::visenc::ImageTensor;

/// Scene retries per record before giving up.
const MAX_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub images: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    /// Enforce exactly equal answer-index counts (up to the remainder).
    pub balance: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            images: 180,
            seed: 0,
            scene: SceneConfig::default(),
            balance: true,
        }
    }
}

/// Records together with their rendered images and scene captions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<MM4Record>,
    pub images: Vec<ImageTensor>,
    pub captions: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn question_count(&self) -> usize {
        self.records.iter().map(|r| r.questions.len()).sum()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageTensor> {
        self.records
            .iter()
            .position(|r| r.image_id == image_id)
            .map(|i| &self.images[i])
    }
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:04}")
}

/// Scene and quad for record `index`; deterministic in `(seed, index)`
/// alone, so records can be produced in any order.
pub fn generate_record(
    cfg: &GenConfig,
    index: usize,
) -> Result<(Scene, [super::record::Question; 4])> {
    let record_seed = derive_seed(named_seed(cfg.seed, "gen"), index as u64);
    for attempt in 0..MAX_ATTEMPTS {
        let scene_seed = derive_seed(record_seed, attempt);
        let scene = generate_scene(scene_seed, &cfg.scene)?;
        let mut rng = SplitMix64::named(scene_seed, "questions");
        match generate_question_quad(&scene, &mut rng) {
            Ok(quad) => return Ok((scene, quad)),
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "record {index}: no valid scene in {MAX_ATTEMPTS} attempts"
    )))
}

/// Move each question's answer to a slot from a shuffled list holding every
/// index equally often. Distractors keep their relative order.
pub fn balance_answers(records: &mut [MM4Record], seed: u64) {
    let total: usize = records.iter().map(|r| r.questions.len()).sum();
    let mut slots: Vec<usize> = (0..total).map(|i| i % 4).collect();
    SplitMix64::named(seed, "balance").shuffle(&mut slots);
    let mut next = slots.into_iter();
    for q in records.iter_mut().flat_map(|r| r.questions.iter_mut()) {
        let target = next.next().expect("one slot per question");
        let answer = q.options.remove(q.answer_index);
        q.options.insert(target, answer);
        q.answer_index = target;
    }
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.images == 0 {
        return Err(Error::Parameter("dataset needs at least one image".into()));
    }
    cfg.scene.validate()?;
    let mut records = Vec::with_capacity(cfg.images);
    let mut images = Vec::with_capacity(cfg.images);
    let mut captions = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let (scene, quad) = generate_record(cfg, i)?;
        let id = image_id(i);
        records.push(MM4Record {
            image_path: format!("images/{id}.ppm"),
            image_id: id,
            questions: quad.to_vec(),
        });
        captions.push(scene.caption());
        images.push(scene.image);
    }
    if cfg.balance {
        balance_answers(&mut records, cfg.seed);
    }
    Ok(Dataset {
        records,
        images,
        captions,
    })
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CAPTIONS_FILE: &str = "captions.txt";

fn tensor_path(dir: &Path, image_path: &str) -> PathBuf {
    dir.join(image_path).with_extension("igvt")
}

/// Write `dataset.jsonl`, `captions.txt` and per-image PPM + IGVT files.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    let path = dir.join(DATASET_FILE);
    let mut w = BufWriter::new(fs::File::create(&path)?);
    write_jsonl(&mut w, &ds.records)?;
    w.flush()?;
    let mut cw = BufWriter::new(fs::File::create(dir.join(CAPTIONS_FILE))?);
    for c in &ds.captions {
        writeln!(cw, "{c}")?;
    }
    cw.flush()?;
    for (rec, img) in ds.records.iter().zip(&ds.images) {
        write_ppm(&dir.join(&rec.image_path), img)?;
        let mut tw = BufWriter::new(fs::File::create(tensor_path(dir, &rec.image_path))?);
        write_tensor(&mut tw, img.tensor(), DType::F64)?;
        tw.flush()?;
    }
    Ok(path)
}

pub fn read_records(path: &Path) -> Result<Vec<MM4Record>> {
    read_jsonl(BufReader::new(fs::File::open(path)?))
}

/// Load a dataset written by [`write_dataset`]. `path` is the JSONL file
/// or its directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(DATASET_FILE))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let records = read_records(&file)?;
    let mut images = Vec::with_capacity(records.len());
    for rec in &records {
        let tp = tensor_path(&dir, &rec.image_path);
        let (t, _) = read_tensor(&mut BufReader::new(fs::File::open(&tp).map_err(|e| {
            Error::Data(format!("image tensor {}: {e}", tp.display()))
        })?))?;
        images.push(ImageTensor::from_tensor(t)?);
    }
    let captions = match fs::read_to_string(dir.join(CAPTIONS_FILE)) {
        Ok(s) => s.lines().map(str::to_string).collect(),
        Err(_) => vec![String::new(); records.len()],
    };
    Ok(Dataset {
        records,
        images,
        captions,
    })
}
