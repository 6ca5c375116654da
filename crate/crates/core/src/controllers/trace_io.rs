//! Traces on disk: one JSON object per step, rasters in a sidecar blob of
//! little-endian `f32` pixels referenced by byte offset.

use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExecutionTrace, TraceStep};
use crate::actions::ActionContinuous;
use crate::error::{Error, Result};
use crate::model::InverseModelOutput;
use crate::sim::RasterImage;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    policy: String,
    step: usize,
    observed: BlobRef,
    post: BlobRef,
    prediction: Option<InverseModelOutput>,
    action: Option<ActionContinuous>,
    distance: Option<f64>,
    error: Option<String>,
}

/// `trace.jsonl` → `trace.blob`.
pub fn blob_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("blob")
}

/// Writes `path` and its sidecar blob.
pub fn write_trace(trace: &ExecutionTrace, path: &Path) -> Result<()> {
    let mut blob = BufWriter::new(std::fs::File::create(blob_path(path))?);
    let mut lines = BufWriter::new(std::fs::File::create(path)?);
    let mut offset = 0u64;
    let mut put = |img: &RasterImage, blob: &mut BufWriter<std::fs::File>| -> Result<BlobRef> {
        let r = BlobRef { offset, width: img.width, height: img.height };
        for p in &img.pixels {
            blob.write_all(&p.to_le_bytes())?;
        }
        offset += 4 * img.pixels.len() as u64;
        Ok(r)
    };
    for s in &trace.steps {
        let line = Line {
            policy: trace.policy.clone(),
            step: s.step,
            observed: put(&s.observed, &mut blob)?,
            post: put(&s.post, &mut blob)?,
            prediction: s.prediction.clone(),
            action: s.action,
            distance: s.distance,
            error: s.error.clone(),
        };
        serde_json::to_writer(&mut lines, &line)?;
        lines.write_all(b"\n")?;
    }
    blob.flush()?;
    lines.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<ExecutionTrace> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut blob = std::fs::File::open(blob_path(path))?;
    let mut get = |r: BlobRef| -> Result<RasterImage> {
        let mut buf = vec![0u8; 4 * r.width * r.height];
        blob.seek(SeekFrom::Start(r.offset))?;
        blob.read_exact(&mut buf)?;
        let px = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(RasterImage::from_pixels(r.width, r.height, px))
    };
    let mut policy = String::new();
    let mut steps = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        policy = l.policy;
        steps.push(TraceStep {
            step: l.step,
            observed: get(l.observed)?,
            prediction: l.prediction,
            action: l.action,
            post: get(l.post)?,
            distance: l.distance,
            error: l.error,
        });
    }
    Ok(ExecutionTrace { policy, steps })
}
