//! On-disk clip directories.
//!
//! ```text
//! clip_dir/
//!   meta.json      {"H":64,"W":64,"frames":T,"category":"OO*","resolution":[w_px,h_px]}
//!   flow_00000.bin little-endian f32, u-plane then v-plane, 2·H·W values
//!   ...
//!   tracks.jsonl   {"t":0,"id":1,"box":[x_min,y_min,x_max,y_max]} per (frame, object)
//!   labels.json    [0,0,1,...]
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BBox, Category, Clip, FlowFrame, Track, TrackSet};
use crate::error::{Result, TadError};

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct Meta {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub frames: usize,
    pub category: Category,
    pub resolution: [u32; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRecord {
    t: usize,
    id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

pub(crate) fn flow_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("flow_{t:05}.bin"))
}

pub fn save_clip(clip: &Clip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    clip.validate()?;
    fs::create_dir_all(dir)?;
    let (height, width) = clip.flow_shape().unwrap_or((0, 0));
    let meta = Meta {
        height,
        width,
        frames: clip.len(),
        category: clip.category,
        resolution: clip.resolution,
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;

    for f in &clip.flows {
        write_flow(&flow_path(dir, f.t), f)?;
    }

    let mut records: Vec<TrackRecord> = clip
        .tracks
        .tracks
        .iter()
        .flat_map(|tr| {
            tr.boxes.iter().enumerate().map(move |(k, b)| TrackRecord {
                t: tr.start + k,
                id: tr.id,
                bbox: b.to_array(),
            })
        })
        .collect();
    records.sort_by_key(|r| (r.t, r.id));
    let mut out = BufWriter::new(fs::File::create(dir.join("tracks.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    fs::write(dir.join("labels.json"), serde_json::to_vec(&clip.labels)?)?;
    Ok(())
}

pub(crate) fn write_flow(path: &Path, f: &FlowFrame) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * f.u.len());
    for x in f.u.iter().chain(&f.v) {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_flow(path: &Path, t: usize, height: usize, width: usize) -> Result<FlowFrame> {
    if !path.exists() {
        return Err(TadError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let n = height * width;
    if bytes.len() != n * 2 * 4 {
        return Err(TadError::format(
            path,
            format!("payload is {} bytes, header H·W·2·4 = {}", bytes.len(), n * 8),
        ));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let (u, v) = vals.split_at(n);
    FlowFrame::new(t, height, width, u.to_vec(), v.to_vec())
}

pub(crate) fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Err(TadError::MissingFile(path));
    }
    serde_json::from_slice(&fs::read(&path)?).map_err(|e| TadError::format(&path, e.to_string()))
}

/// Reads flow frames `0..frames` from a directory.
pub(crate) fn read_flows(dir: &Path, meta: &Meta) -> Result<Vec<FlowFrame>> {
    (0..meta.frames)
        .map(|t| read_flow(&flow_path(dir, t), t, meta.height, meta.width))
        .collect()
}

/// Groups per-(frame, object) boxes into contiguous tracks.
pub(crate) fn assemble_tracks(
    records: impl IntoIterator<Item = (usize, u64, BBox)>,
    frames: usize,
    source: &Path,
) -> Result<TrackSet> {
    let mut by_id: std::collections::BTreeMap<u64, Vec<(usize, BBox)>> = Default::default();
    for (t, id, b) in records {
        if t >= frames {
            return Err(TadError::format(
                source,
                format!("object {id} has a box at frame {t}, clip has {frames} frames"),
            ));
        }
        by_id.entry(id).or_default().push((t, b));
    }
    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, mut boxes) in by_id {
        boxes.sort_by_key(|(t, _)| *t);
        let start = boxes[0].0;
        for (k, (t, _)) in boxes.iter().enumerate() {
            if *t != start + k {
                return Err(TadError::validation(
                    "tracks",
                    format!("object {id} is not visible over a contiguous span (frame {t})"),
                ));
            }
        }
        tracks.push(Track {
            id,
            start,
            boxes: boxes.into_iter().map(|(_, b)| b).collect(),
        });
    }
    Ok(TrackSet {
        tracks,
        window: (0, frames.saturating_sub(1)),
    })
}

pub fn load_clip(dir: impl AsRef<Path>) -> Result<Clip> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let flows = read_flows(dir, &meta)?;

    let tracks_path = dir.join("tracks.jsonl");
    if !tracks_path.exists() {
        return Err(TadError::MissingFile(tracks_path));
    }
    let mut records = Vec::new();
    let mut last_t = 0;
    for (line_no, line) in BufReader::new(fs::File::open(&tracks_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrackRecord = serde_json::from_str(&line)
            .map_err(|e| TadError::format(&tracks_path, format!("line {}: {e}", line_no + 1)))?;
        if r.t < last_t {
            return Err(TadError::format(
                &tracks_path,
                format!("line {}: frame index {} after {last_t} is not monotone", line_no + 1, r.t),
            ));
        }
        last_t = r.t;
        records.push((r.t, r.id, BBox::from(r.bbox)));
    }
    let tracks = assemble_tracks(records, meta.frames, &tracks_path)?;

    let labels_path = dir.join("labels.json");
    if !labels_path.exists() {
        return Err(TadError::MissingFile(labels_path));
    }
    let labels: Vec<u8> = serde_json::from_slice(&fs::read(&labels_path)?)
        .map_err(|e| TadError::format(&labels_path, e.to_string()))?;

    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let clip = Clip {
        id,
        category: meta.category,
        resolution: meta.resolution,
        flows,
        tracks,
        labels,
    };
    clip.validate()?;
    Ok(clip)
}

/// Loads every clip directory (any subdirectory holding a `meta.json`) under
/// `root`, in lexicographic order.
pub fn load_clips(root: impl AsRef<Path>) -> Result<Vec<Clip>> {
    let root = root.as_ref();
    if root.join("meta.json").exists() {
        return Ok(vec![load_clip(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").exists())
        .collect();
    dirs.sort();
    dirs.iter().map(load_clip).collect()
}
