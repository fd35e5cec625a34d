//! Dataset directories: `manifest.json` plus raw little-endian f32 images
//! and u8 label maps, one pair of files per sample.

use std::fs;
use std::path::Path;

use dualfete_core::grid::Grid;
use dualfete_core::synthdata::{Dataset, SegSample};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub samples: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: u32,
    pub image: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

pub const MANIFEST: &str = "manifest.json";

pub fn export(dir: &Path, data: &Dataset, classes: usize) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let first = data.labeled.first().or(data.unlabeled.first()).or(data.test.first());
    let (h, w) = first.map_or((0, 0), |s| (s.image.height, s.image.width));
    let mut samples = Vec::new();
    for (split, set) in [(Split::Labeled, &data.labeled), (Split::Unlabeled, &data.unlabeled), (Split::Test, &data.test)] {
        for s in set {
            let image = format!("{:06}.f32", s.id);
            let label = format!("{:06}.u8", s.id);
            let bytes: Vec<u8> = s.image.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            let ip = dir.join(&image);
            fs::write(&ip, bytes).map_err(|e| HarnessError::io(ip, e))?;
            let lp = dir.join(&label);
            fs::write(&lp, &s.label.data).map_err(|e| HarnessError::io(lp, e))?;
            samples.push(Entry { id: s.id, image, label, split });
        }
    }
    let manifest = Manifest { h, w, classes, samples };
    let mp = dir.join(MANIFEST);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| HarnessError::io(mp, e))?;
    Ok(manifest)
}

pub fn import(dir: &Path) -> Result<(Dataset, usize)> {
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| HarnessError::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| HarnessError::Format { path: mp.clone(), detail: e.to_string() })?;
    let bad = |path: &Path, detail: String| HarnessError::Format { path: path.into(), detail };
    let mut data = Dataset { labeled: Vec::new(), unlabeled: Vec::new(), test: Vec::new() };
    for e in &m.samples {
        let ip = dir.join(&e.image);
        let raw = fs::read(&ip).map_err(|err| HarnessError::io(&ip, err))?;
        if raw.len() != m.h * m.w * 4 {
            return Err(bad(&ip, format!("{} bytes, expected {}", raw.len(), m.h * m.w * 4)));
        }
        let pixels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let lp = dir.join(&e.label);
        let labels = fs::read(&lp).map_err(|err| HarnessError::io(&lp, err))?;
        if let Some(&c) = labels.iter().find(|&&c| c as usize >= m.classes) {
            return Err(bad(&lp, format!("class {c} >= {}", m.classes)));
        }
        let sample = SegSample {
            id: e.id,
            image: Grid::from_vec(m.h, m.w, pixels).map_err(|err| bad(&ip, err.to_string()))?,
            label: Grid::from_vec(m.h, m.w, labels).map_err(|err| bad(&lp, err.to_string()))?,
        };
        match e.split {
            Split::Labeled => data.labeled.push(sample),
            Split::Unlabeled => data.unlabeled.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    Ok((data, m.classes))
}
