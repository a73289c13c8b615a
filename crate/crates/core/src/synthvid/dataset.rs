//! On-disk dataset: a JSON manifest plus one binary tensor file per clip.
//!
//! Tensor file layout, all little-endian:
//! magic `STSN` | version u16 | rank u16 | dims u32 × rank | f32 payload | CRC32 of payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Clip, GtBox};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_MAGIC: &[u8; 4] = b"STSN";
pub const TENSOR_VERSION: u16 = 1;
const BOX_HEADER: &str = "frame,class,x1,y1,x2,y2";
const MOTION_HEADER: &str = "frame,object,dy,dx";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    clip_count: usize,
    /// `[T, 1, H, W]` shared by every clip.
    dims: Vec<usize>,
    clips: Vec<ClipRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    file: String,
    frames: usize,
    reference: usize,
    /// CSV; rows of one frame are in object order.
    boxes: String,
    motion: String,
    degraded: Vec<bool>,
    occluder: Option<BBox>,
}

/// Serializes a tensor with header, payload and checksum.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len() + 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u16).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    for v in t.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let truncated = || Error::Malformed(format!("{}: truncated tensor file", path.display()));
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(truncated);
    if take(0, 4)? != TENSOR_MAGIC {
        return Err(Error::Malformed(format!("{}: bad magic", path.display())));
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(Error::Malformed(format!("{}: unsupported tensor version {version}", path.display())));
    }
    let rank = u16::from_le_bytes(take(6, 2)?.try_into().unwrap()) as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|i| take(8 + 4 * i, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize))
        .collect::<Result<_>>()?;
    let count: usize = dims.iter().product();
    let start = 8 + 4 * rank;
    let payload = take(start, 4 * count)?;
    let crc = u32::from_le_bytes(take(start + 4 * count, 4)?.try_into().unwrap());
    if bytes.len() != start + 4 * count + 4 {
        return Err(Error::Malformed(format!("{}: trailing bytes", path.display())));
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(&dims, values)
}

fn boxes_csv(clip: &Clip) -> String {
    let mut s = String::from(BOX_HEADER);
    for (t, frame) in clip.boxes.iter().enumerate() {
        for b in frame {
            let r = b.bbox;
            s.push_str(&format!("\n{t},{},{},{},{},{}", b.class_id, r.x1, r.y1, r.x2, r.y2));
        }
    }
    s
}

fn motion_csv(clip: &Clip) -> String {
    let mut s = String::from(MOTION_HEADER);
    for (t, frame) in clip.motion.iter().enumerate() {
        for (o, (dy, dx)) in frame.iter().enumerate() {
            s.push_str(&format!("\n{t},{o},{dy},{dx}"));
        }
    }
    s
}

fn csv_rows(text: &str, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::Malformed(format!("expected CSV header `{header}`")));
    }
    lines
        .map(|line| {
            let row: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Malformed(format!("bad CSV row `{line}`: {e}")))?;
            if row.len() != width {
                return Err(Error::Malformed(format!("CSV row `{line}` has {} fields", row.len())));
            }
            Ok(row)
        })
        .collect()
}

fn frame_index(v: f64, frames: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || v as usize >= frames {
        return Err(Error::Malformed(format!("frame index {v} out of range")));
    }
    Ok(v as usize)
}

fn parse_record(rec: &ClipRecord, frames: Tensor<f32>) -> Result<Clip> {
    let n = rec.frames;
    if frames.rank() != 4 || frames.dims()[0] != n || rec.degraded.len() != n || rec.reference >= n.max(1) {
        return Err(Error::Malformed(format!("clip record `{}` inconsistent with its tensor", rec.file)));
    }
    let mut boxes: Vec<Vec<GtBox>> = vec![Vec::new(); n];
    for row in csv_rows(&rec.boxes, BOX_HEADER, 6)? {
        let t = frame_index(row[0], n)?;
        let object = boxes[t].len();
        boxes[t].push(GtBox {
            object,
            class_id: row[1] as usize,
            bbox: BBox::new(row[2], row[3], row[4], row[5]),
        });
    }
    let mut motion: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    for row in csv_rows(&rec.motion, MOTION_HEADER, 4)? {
        let t = frame_index(row[0], n)?;
        if row[1] as usize != motion[t].len() {
            return Err(Error::Malformed("motion rows out of object order".into()));
        }
        motion[t].push((row[2], row[3]));
    }
    Ok(Clip {
        frames,
        boxes,
        motion,
        degraded: rec.degraded.clone(),
        reference: rec.reference,
        occluder: rec.occluder,
    })
}

/// Writes `clips` into `dir` (created if needed). All clips must share dims.
pub fn write_dataset(clips: &[Clip], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dims = clips.first().map(|c| c.frames.dims().to_vec()).unwrap_or_default();
    let mut records = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        if clip.frames.dims() != dims.as_slice() {
            return Err(Error::invalid("all clips in a dataset must share dims"));
        }
        let file = format!("clip_{i:05}.stsn");
        let path = dir.join(&file);
        fs::write(&path, encode_tensor(&clip.frames)).map_err(|e| Error::io(&path, e))?;
        records.push(ClipRecord {
            file,
            frames: clip.len(),
            reference: clip.reference,
            boxes: boxes_csv(clip),
            motion: motion_csv(clip),
            degraded: clip.degraded.clone(),
            occluder: clip.occluder,
        });
    }
    let manifest = Manifest {
        clip_count: clips.len(),
        dims,
        clips: records,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Clip>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    if manifest.clip_count != manifest.clips.len() {
        return Err(Error::Malformed(format!(
            "manifest declares {} clips but lists {}",
            manifest.clip_count,
            manifest.clips.len()
        )));
    }
    manifest
        .clips
        .iter()
        .map(|rec| {
            if rec.file.contains(['/', '\\']) {
                return Err(Error::Malformed(format!("clip file `{}` must be a bare name", rec.file)));
            }
            let p = dir.join(&rec.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let frames = decode_tensor(&bytes, &p)?;
            if frames.dims() != manifest.dims.as_slice() {
                return Err(Error::Malformed(format!("{}: dims differ from manifest", p.display())));
            }
            parse_record(rec, frames)
        })
        .collect()
}
