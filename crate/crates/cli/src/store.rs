//! Artifact files: atomic writes, embedded metadata and per-stage stamps.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, Stage};

/// Metadata line placed after the first line of every artifact.
pub fn meta_line(config: &PipelineConfig, stage: Stage) -> String {
    format!("#ltvrank stage={} config_hash={} seed={}", stage.name(), config.stage_hash(stage), config.seed)
}

/// Inserts `meta` as the second line of `body`.
pub fn embed_meta(body: &[u8], meta: &str) -> Vec<u8> {
    let split = body.iter().position(|&b| b == b'\n').map_or(body.len(), |p| p + 1);
    let mut out = Vec::with_capacity(body.len() + meta.len() + 2);
    out.extend_from_slice(&body[..split]);
    if split == body.len() && !body.ends_with(b"\n") && !body.is_empty() {
        out.push(b'\n');
    }
    out.extend_from_slice(meta.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body[split..]);
    out
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Record of one completed stage run, kept as `<stage>.stamp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamp {
    pub config_hash: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

pub fn stamp_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.stamp", stage.name()))
}

fn hashes(dir: &Path, names: &[&str]) -> io::Result<Vec<(String, String)>> {
    names.iter().map(|n| Ok((n.to_string(), sha256_file(&dir.join(n))?))).collect()
}

impl Stamp {
    pub fn capture(config: &PipelineConfig, stage: Stage, dir: &Path, inputs: &[&str], outputs: &[&str]) -> io::Result<Self> {
        Ok(Self { config_hash: config.stage_hash(stage), inputs: hashes(dir, inputs)?, outputs: hashes(dir, outputs)? })
    }

    /// Stamp text: metadata, the full resolved config, then file hashes.
    pub fn render(&self, config: &PipelineConfig, stage: Stage) -> String {
        let mut s = format!("{}\n", meta_line(config, stage));
        for line in config.echo().lines() {
            s.push_str(&format!("config\t{line}\n"));
        }
        for (n, h) in &self.inputs {
            s.push_str(&format!("input\t{n}\t{h}\n"));
        }
        for (n, h) in &self.outputs {
            s.push_str(&format!("output\t{n}\t{h}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let meta = lines.next()?;
        let config_hash = meta.split(' ').find_map(|f| f.strip_prefix("config_hash="))?.to_string();
        let mut stamp = Stamp { config_hash, inputs: Vec::new(), outputs: Vec::new() };
        for l in lines {
            let mut f = l.splitn(3, '\t');
            match (f.next(), f.next(), f.next()) {
                (Some("input"), Some(n), Some(h)) => stamp.inputs.push((n.into(), h.into())),
                (Some("output"), Some(n), Some(h)) => stamp.outputs.push((n.into(), h.into())),
                (Some("config"), _, _) => {}
                _ => return None,
            }
        }
        Some(stamp)
    }
}

/// True when the stamp on disk matches the config, current inputs and present outputs.
pub fn is_cached(config: &PipelineConfig, stage: Stage, dir: &Path, inputs: &[&str], outputs: &[&str]) -> bool {
    let Ok(text) = fs::read_to_string(stamp_path(dir, stage)) else { return false };
    let Some(old) = Stamp::parse(&text) else { return false };
    match Stamp::capture(config, stage, dir, inputs, outputs) {
        Ok(now) => now == old,
        Err(_) => false,
    }
}
