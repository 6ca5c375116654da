//! Record file layout (little-endian):
//!
//! ```text
//! magic "RWDS" | u32 version | u32 raster_width | u32 raster_height | u32 node_count | u64 record_count
//! per record: u32 payload_len | payload
//! payload: u64 id
//!          pre nodes  (node_count × 2 f64, cm)
//!          post nodes (node_count × 2 f64, cm)
//!          f64 pick_x | f64 pick_y | f64 theta | f64 length
//!          u32 cell | u32 theta_bin | u32 len_bin
//!          pre raster  (w × h f32, row-major)
//!          post raster (w × h f32, row-major)
//! ```
//!
//! The manifest is written next to the record file as `<path>.manifest.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{Dataset, DatasetManifest, Transition};
use crate::actions::{ActionContinuous, ActionDiscrete};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::sim::{RasterImage, RopeState};

pub const RECORD_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RWDS";

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn payload_len(nodes: usize, pixels: usize) -> usize {
    8 + 2 * nodes * 16 + 32 + 12 + 2 * pixels * 4
}

pub fn write_records(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    if dataset.manifest.record_count != dataset.transitions.len() as u64 {
        return Err(Error::ManifestMismatch("record_count differs from the number of transitions".into()));
    }
    let sim = &dataset.manifest.sim_config;
    let (w, h, nodes) = (sim.raster_width, sim.raster_height, sim.node_count);
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    for v in [RECORD_FORMAT_VERSION, w as u32, h as u32, nodes as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&(dataset.transitions.len() as u64).to_le_bytes())?;

    let len = payload_len(nodes, w * h);
    let mut buf = Vec::with_capacity(len);
    for t in &dataset.transitions {
        if t.pre_state.nodes.len() != nodes || t.post_state.nodes.len() != nodes {
            return Err(Error::ShapeMismatch {
                operand: format!("nodes of record {}", t.id),
                expected: vec![nodes],
                got: vec![t.pre_state.nodes.len()],
            });
        }
        if t.pre_raster.width != w || t.pre_raster.height != h || !t.pre_raster.same_size(&t.post_raster) {
            return Err(Error::ShapeMismatch {
                operand: format!("raster of record {}", t.id),
                expected: vec![h, w],
                got: vec![t.pre_raster.height, t.pre_raster.width],
            });
        }
        buf.clear();
        buf.extend_from_slice(&t.id.to_le_bytes());
        for p in t.pre_state.nodes.iter().chain(&t.post_state.nodes) {
            buf.extend_from_slice(&p.x.to_le_bytes());
            buf.extend_from_slice(&p.y.to_le_bytes());
        }
        let a = &t.action_cont;
        for v in [a.pick.x, a.pick.y, a.theta, a.length] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let d = &t.action_disc;
        for v in [d.cell, d.theta_bin, d.len_bin] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in t.pre_raster.pixels.iter().chain(&t.post_raster.pixels) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(buf.len(), len);
        out.write_all(&(buf.len() as u32).to_le_bytes())?;
        out.write_all(&buf)?;
    }
    out.flush()?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn nodes(&mut self, n: usize) -> RopeState {
        RopeState::from_nodes((0..n).map(|_| Vec2::new(self.f64(), self.f64())).collect())
    }
    fn raster(&mut self, w: usize, h: usize) -> RasterImage {
        RasterImage::from_pixels(w, h, (0..w * h).map(|_| self.f32()).collect())
    }
}

/// Reads a record file and its manifest sidecar.
pub fn read_records(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Err(Error::MissingInput(mpath));
    }
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
    if manifest.format_version != RECORD_FORMAT_VERSION {
        return Err(Error::FormatVersion { found: manifest.format_version, expected: RECORD_FORMAT_VERSION });
    }
    manifest.validate()?;

    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |index: u64, reason: &str| Error::CorruptRecord {
        index,
        last_valid: index.checked_sub(1),
        reason: reason.into(),
    };
    let mut header = [0u8; 28];
    r.read_exact(&mut header).map_err(|_| corrupt(0, "truncated file header"))?;
    let mut c = Cursor { buf: &header, pos: 0 };
    if &c.take::<4>() != MAGIC {
        return Err(corrupt(0, "bad magic"));
    }
    let version = c.u32();
    if version != RECORD_FORMAT_VERSION {
        return Err(Error::FormatVersion { found: version, expected: RECORD_FORMAT_VERSION });
    }
    let (w, h, nodes) = (c.u32() as usize, c.u32() as usize, c.u32() as usize);
    let count = c.u64();
    let sim = &manifest.sim_config;
    if (w, h, nodes) != (sim.raster_width, sim.raster_height, sim.node_count) {
        return Err(Error::ManifestMismatch("raster size or node count differs from the manifest".into()));
    }
    if count != manifest.record_count {
        return Err(Error::ManifestMismatch(format!(
            "file holds {count} records but the manifest says {}",
            manifest.record_count
        )));
    }

    let expected = payload_len(nodes, w * h);
    let mut buf = vec![0u8; expected];
    let mut transitions: Vec<Transition> = Vec::with_capacity(count as usize);
    for index in 0..count {
        let mut lb = [0u8; 4];
        r.read_exact(&mut lb).map_err(|_| corrupt(index, "truncated length prefix"))?;
        if u32::from_le_bytes(lb) as usize != expected {
            return Err(corrupt(index, "unexpected record length"));
        }
        r.read_exact(&mut buf).map_err(|_| corrupt(index, "truncated record"))?;
        let mut c = Cursor { buf: &buf, pos: 0 };
        let id = c.u64();
        let pre_state = c.nodes(nodes);
        let post_state = c.nodes(nodes);
        let action_cont = ActionContinuous {
            pick: Vec2::new(c.f64(), c.f64()),
            theta: c.f64(),
            length: c.f64(),
        };
        let action_disc = ActionDiscrete {
            cell: c.u32() as usize,
            theta_bin: c.u32() as usize,
            len_bin: c.u32() as usize,
        };
        let pre = c.raster(w, h);
        let post = c.raster(w, h);
        // Share rasters between consecutive records, as collection does.
        let pre_raster = match transitions.last() {
            Some(prev) if prev.post_state == pre_state && *prev.post_raster == pre => prev.post_raster.clone(),
            _ => Arc::new(pre),
        };
        transitions.push(Transition {
            id,
            pre_state,
            post_state,
            pre_raster,
            post_raster: Arc::new(post),
            action_cont,
            action_disc,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(corrupt(count, "trailing bytes after the last record"));
    }
    Ok(Dataset { manifest, transitions })
}
