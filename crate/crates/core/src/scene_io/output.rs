//! Prior mask output: one 8-bit image per view (255 static, 0 potential
//! transient) and a JSON summary of per-entity decisions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::prior::{EntityDecision, PriorMask};

pub const PRIORS_DIR: &str = "priors";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub views: Vec<ViewSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSummary {
    pub view: usize,
    pub file: String,
    pub static_pixels: usize,
    pub transient_pixels: usize,
    pub entities: BTreeMap<u32, EntityDecision>,
}

fn prior_file(view: usize) -> String {
    format!("{view:04}.png")
}

pub fn save_prior_masks(out_dir: &Path, priors: &[PriorMask]) -> Result<()> {
    let dir = out_dir.join(PRIORS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut views = Vec::with_capacity(priors.len());
    for p in priors {
        let file = prior_file(p.view);
        p.static_map.save_png(&dir.join(&file))?;
        let static_pixels = p.static_map.count();
        views.push(ViewSummary {
            view: p.view,
            file,
            static_pixels,
            transient_pixels: p.static_map.len() - static_pixels,
            entities: p.per_entity.clone(),
        });
    }
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&PriorSummary { views }).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_prior_masks(out_dir: &Path) -> Result<Vec<PriorMask>> {
    let dir = out_dir.join(PRIORS_DIR);
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let summary: PriorSummary =
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
    summary
        .views
        .into_iter()
        .map(|v| {
            Ok(PriorMask {
                view: v.view,
                static_map: Mask::load_png(&dir.join(&v.file))?,
                per_entity: v.entities,
            })
        })
        .collect()
}
