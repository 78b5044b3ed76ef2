//! Plain-text skeleton clips.
//!
//! A file holds zero or more clips separated by blank lines. Each clip starts with a
//! header line `T J` followed by `T * J` lines of `x y z`, frame-major. Lines starting
//! with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SkeletonSequence, SkeletonTopology, SplitDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkeletonFormat {
    /// 25-joint body skeletons.
    NtuStyle,
    /// 22-joint hand skeletons.
    ShrecStyle,
}

impl SkeletonFormat {
    pub fn joints(self) -> usize {
        match self {
            SkeletonFormat::NtuStyle => 25,
            SkeletonFormat::ShrecStyle => 22,
        }
    }

    pub fn topology(self) -> SkeletonTopology {
        match self {
            SkeletonFormat::NtuStyle => SkeletonTopology::body25(),
            SkeletonFormat::ShrecStyle => SkeletonTopology::hand22(),
        }
    }
}

/// Uniform index map used for temporal resampling: output frame `i` reads source
/// frame `floor(i * src / dst)`.
pub fn resample_index(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads every clip in `path`, resampled to `target_t` frames and labelled `class_id`.
pub fn load_skeleton_file(path: &Path, format: SkeletonFormat, target_t: usize, class_id: usize) -> Result<Vec<SkeletonSequence>> {
    if target_t == 0 {
        return Err(Error::config("frames", "target frame count must be at least 1"));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
        .collect();

    let mut clips = Vec::new();
    let mut pos = 0;
    while pos < lines.len() {
        let (header_no, header) = lines[pos];
        if header.is_empty() {
            pos += 1;
            continue;
        }
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, header_no, format!("bad header `{header}`; expected `T J`")));
        if fields.len() != 2 {
            return Err(parse_err(path, header_no, format!("bad header `{header}`; expected `T J`")));
        }
        let (t_src, joints) = (parse_usize(fields[0])?, parse_usize(fields[1])?);
        if t_src == 0 {
            return Err(parse_err(path, header_no, "empty clip (T = 0)"));
        }
        if joints != format.joints() {
            return Err(parse_err(
                path,
                header_no,
                format!("clip has {joints} joints, format expects {}", format.joints()),
            ));
        }
        pos += 1;
        let mut coords = Vec::with_capacity(t_src * joints * 3);
        for _ in 0..t_src * joints {
            let Some(&(no, line)) = lines.get(pos) else {
                return Err(parse_err(path, header_no, "clip truncated at end of file"));
            };
            if line.is_empty() {
                return Err(parse_err(path, no, "clip truncated by blank line"));
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(path, no, format!("malformed coordinate line `{line}`")))?;
            if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(path, no, format!("expected three finite reals, got `{line}`")));
            }
            coords.extend_from_slice(&vals);
            pos += 1;
        }
        let mut data = Vec::with_capacity(target_t * joints * 3);
        for i in 0..target_t {
            let src = resample_index(i, t_src, target_t);
            data.extend_from_slice(&coords[src * joints * 3..(src + 1) * joints * 3]);
        }
        let frames = Tensor::from_vec(target_t * joints, 3, data);
        clips.push(SkeletonSequence::new(target_t, joints, frames, class_id)?);
    }
    Ok(clips)
}

/// Writes clips in the text schema read by [`load_skeleton_file`].
pub fn write_skeleton_file(path: &Path, clips: &[SkeletonSequence]) -> Result<()> {
    let mut out = String::new();
    for (i, clip) in clips.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{} {}", clip.time_steps(), clip.joints());
        for r in 0..clip.frames().rows() {
            let row = clip.frames().row(r);
            let _ = writeln!(out, "{:?} {:?} {:?}", row[0], row[1], row[2]);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `dataset.toml` describing a directory of per-class skeleton files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: SkeletonFormat,
    /// Joint graph: `"body"`, `"hand"` or `"chain"`.
    pub topology: String,
    pub frames: usize,
    #[serde(rename = "class")]
    pub classes: Vec<ManifestClass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClass {
    pub id: usize,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl DatasetManifest {
    pub fn topology(&self) -> Result<SkeletonTopology> {
        match self.topology.as_str() {
            "body" => Ok(SkeletonTopology::body25()),
            "hand" => Ok(SkeletonTopology::hand22()),
            "chain" => SkeletonTopology::chain(self.format.joints()),
            other => Err(Error::config("topology", format!("unknown topology `{other}`"))),
        }
    }
}

/// Loads a dataset directory. Returns its manifest, topology and splits with every
/// clip resampled to `target_t` frames (or the manifest's frame count when `None`).
pub fn load_dataset_dir(dir: &Path, target_t: Option<usize>) -> Result<(DatasetManifest, SkeletonTopology, SplitDataset)> {
    let manifest_path = dir.join("dataset.toml");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::config("dataset.toml", e.message().to_string()))?;
    let topology = manifest.topology()?;
    let t = target_t.unwrap_or(manifest.frames);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in &manifest.classes {
        train.extend(load_skeleton_file(&dir.join(&c.train), manifest.format, t, c.id)?);
        test.extend(load_skeleton_file(&dir.join(&c.test), manifest.format, t, c.id)?);
    }
    let ds = SplitDataset::new(t, manifest.format.joints(), train, test)?;
    Ok((manifest, topology, ds))
}
