//! On-disk dataset layout.
//!
//! ```text
//! <dir>/index.json          scene config and per-clip metadata
//! <dir>/clips/clipNNNNN.bin T frame tensors followed by T audio tensors
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::BBox;
use crate::metrics::{AnnotationFile, FrameAnnotation, ANNOTATION_SCHEMA_VERSION};
use crate::scenes::{SceneConfig, SceneSample, Track};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const CLIP_DIR: &str = "clips";
pub const INDEX_SCHEMA_VERSION: u32 = 1;
pub const PROPOSAL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: usize,
    /// Path relative to the dataset directory.
    pub file: String,
    pub label: usize,
    pub sounding: Vec<bool>,
    pub gt: Vec<Vec<BBox>>,
    pub tracks: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub config: SceneConfig,
    /// Class names, background first.
    pub classes: Vec<String>,
    pub num_clips: usize,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub clips: Vec<SceneSample>,
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    std::iter::once("background".to_string())
        .chain((1..num_classes).map(|k| format!("class{k}")))
        .collect()
}

fn clip_file(id: usize) -> String {
    format!("{CLIP_DIR}/clip{id:05}.bin")
}

pub fn write_dataset(dir: &Path, config: &SceneConfig, clips: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir.join(CLIP_DIR))?;
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        let file = clip_file(clip.id);
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        for t in clip.frames.iter().chain(&clip.audio) {
            t.write_to(&mut w)?;
        }
        w.flush()?;
        entries.push(ClipEntry {
            id: clip.id,
            file,
            label: clip.label,
            sounding: clip.sounding.clone(),
            gt: clip.gt.clone(),
            tracks: clip.tracks.clone(),
        });
    }
    let index = DatasetIndex {
        schema_version: INDEX_SCHEMA_VERSION,
        config: config.clone(),
        classes: class_names(config.num_classes),
        num_clips: entries.len(),
        clips: entries,
    };
    fs::write(
        dir.join(INDEX_FILE),
        serde_json::to_string_pretty(&index)? + "\n",
    )?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let index: DatasetIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if index.schema_version != INDEX_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "index schema {} (expected {INDEX_SCHEMA_VERSION})",
            index.schema_version
        )));
    }
    if index.num_clips != index.clips.len() {
        return Err(Error::Format(format!(
            "index declares {} clips but lists {}",
            index.num_clips,
            index.clips.len()
        )));
    }
    index.config.validate()?;
    Ok(index)
}

/// Reads one clip's tensors; errors name the clip.
pub fn read_clip(dir: &Path, config: &SceneConfig, entry: &ClipEntry) -> Result<SceneSample> {
    let ctx = |msg: String| Error::Format(format!("clip {} ({}): {msg}", entry.id, entry.file));
    let t_len = config.timesteps;
    if entry.sounding.len() != t_len || entry.gt.len() != t_len {
        return Err(ctx(format!("metadata does not cover {t_len} timesteps")));
    }
    let file = fs::File::open(dir.join(&entry.file)).map_err(|e| ctx(e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut read = |shape: [usize; 3]| -> Result<Tensor> {
        let t = Tensor::read_from(&mut r).map_err(|e| ctx(e.to_string()))?;
        if t.shape() != shape {
            return Err(ctx(format!(
                "tensor shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let frame_shape = [config.frame_height, config.frame_width, 3];
    let audio_shape = [config.audio_height, config.audio_width, 1];
    let frames = (0..t_len)
        .map(|_| read(frame_shape))
        .collect::<Result<Vec<_>>>()?;
    let audio = (0..t_len)
        .map(|_| read(audio_shape))
        .collect::<Result<Vec<_>>>()?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ctx(format!("{} trailing bytes", rest.len())));
    }
    Ok(SceneSample {
        id: entry.id,
        frames,
        audio,
        label: entry.label,
        gt: entry.gt.clone(),
        sounding: entry.sounding.clone(),
        tracks: entry.tracks.clone(),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index = read_index(dir)?;
    let clips = index
        .clips
        .iter()
        .map(|e| read_clip(dir, &index.config, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: index.config,
        clips,
    })
}

/// Reads the clip with the given id.
pub fn read_clip_by_id(dir: &Path, id: usize) -> Result<(SceneConfig, SceneSample)> {
    let index = read_index(dir)?;
    let entry = index
        .clips
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::Argument(format!("dataset has no clip {id}")))?;
    let clip = read_clip(dir, &index.config, entry)?;
    Ok((index.config, clip))
}

pub fn annotations(config: &SceneConfig, clips: &[SceneSample]) -> AnnotationFile {
    let frames = clips
        .iter()
        .flat_map(|c| {
            (0..c.frames.len()).map(move |t| FrameAnnotation {
                frame_id: c.frame_id(t),
                boxes: c.gt[t].clone(),
                sounding: c.sounding[t],
            })
        })
        .collect();
    AnnotationFile {
        schema_version: ANNOTATION_SCHEMA_VERSION,
        frame_height: config.frame_height,
        frame_width: config.frame_width,
        frames,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameProposals {
    pub frame_id: String,
    pub boxes: Vec<BBox>,
}

/// Region proposals per frame, as rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub schema_version: u32,
    pub source: String,
    pub frames: Vec<FrameProposals>,
}

impl ProposalFile {
    pub fn get(&self, frame_id: &str) -> Option<&[BBox]> {
        self.frames
            .iter()
            .find(|f| f.frame_id == frame_id)
            .map(|f| f.boxes.as_slice())
    }
}

/// Every blob's box in every frame: an ideal class-agnostic proposal source.
pub fn object_proposals(clips: &[SceneSample]) -> ProposalFile {
    let frames = clips
        .iter()
        .flat_map(|c| {
            (0..c.frames.len()).map(move |t| FrameProposals {
                frame_id: c.frame_id(t),
                boxes: c.object_boxes(t),
            })
        })
        .collect();
    ProposalFile {
        schema_version: PROPOSAL_SCHEMA_VERSION,
        source: "synthetic-objects".into(),
        frames,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Files listed by the index, as absolute paths.
pub fn clip_paths(dir: &Path, index: &DatasetIndex) -> Vec<PathBuf> {
    index.clips.iter().map(|e| dir.join(&e.file)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::generate_dataset;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let clips = generate_dataset(&cfg, 10).unwrap();
        write_dataset(dir.path(), &cfg, &clips).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.clips, clips);
        let index = read_index(dir.path()).unwrap();
        let on_disk = fs::read_dir(dir.path().join(CLIP_DIR)).unwrap().count();
        assert_eq!(index.num_clips, on_disk);
        assert_eq!(index.classes.len(), 6);
    }

    #[test]
    fn truncation_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let clips = generate_dataset(&cfg, 3).unwrap();
        write_dataset(dir.path(), &cfg, &clips).unwrap();
        let victim = dir.path().join(clip_file(2));
        let len = fs::metadata(&victim).unwrap().len();
        fs::OpenOptions::new()
            .write(true)
            .open(&victim)
            .unwrap()
            .set_len(len - 100)
            .unwrap();
        let err = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("clip 2"), "{err}");
    }

    #[test]
    fn corrupt_index_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(INDEX_FILE), "{not json").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    }
}
