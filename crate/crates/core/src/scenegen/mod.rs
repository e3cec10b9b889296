//! Synthetic multi-agent driving scenes and their online sample streams.
//!
//! Each scene is a sub-domain: one draw of [`DomainParams`] shared by all of
//! its agents. Agents follow unicycle kinematics along a curved reference
//! road, with a per-agent preferred speed and yaw-rate habit, and slow down
//! behind a close leader.

mod generate;
mod sequence;
mod task;

pub use generate::{generate_corpus, generate_scene, sample_domain_params, Dist, DomainFamily, DomainParams, Horizons, Scene, SceneShape};
pub use sequence::{build_online_sequence, Access, AccessKind, OnlineSequence};
pub use task::{make_ttt_task_set, min_scene_length, TaskSet, TttTask};

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// Write scenes as JSON lines, one scene per line. Field order follows the
/// [`Scene`] struct: `id, domain, t_s, t_h, t_f, dt, agent_ids, tracks, contexts`.
pub fn write_scenes_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::persistence(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scenes_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene =
            serde_json::from_str(&line).map_err(|e| Error::persistence(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(scene);
    }
    Ok(out)
}
