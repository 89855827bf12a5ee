//! Closed category enumeration: dimensions and their sub-categories.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub sub_categories: Vec<String>,
}

/// Category labels are `<dimension>.<sub_category>` slugs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub dimensions: Vec<Dimension>,
}

const DEFAULT: &[(&str, &[&str])] = &[
    ("object_manipulation", &["subject_addition", "removal", "replacement", "part_completion"]),
    ("attribute_modification", &["color", "material", "size", "count", "anomaly_correction"]),
    ("spatial_viewpoint", &["viewpoint_change", "pose_alteration", "spatial_arrangement"]),
    ("global_style", &["background_change", "style_transfer", "tone_lighting_adjustment"]),
    ("dynamics_logic", &["motion_change", "temporal_evolution", "text_modification"]),
    ("multi_image", &["composition", "object_replacement", "reference_transfer"]),
];

impl Default for Taxonomy {
    fn default() -> Self {
        Self {
            dimensions: DEFAULT
                .iter()
                .map(|(name, subs)| Dimension {
                    name: name.to_string(),
                    sub_categories: subs.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        }
    }
}

impl Taxonomy {
    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Config(format!("{}: {e}", path.display())))
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.dimensions
            .iter()
            .flat_map(|d| d.sub_categories.iter().map(move |s| format!("{}.{s}", d.name)))
            .collect()
    }

    pub fn contains(&self, label: &str) -> bool {
        label.split_once('.').is_some_and(|(dim, sub)| {
            self.dimensions.iter().any(|d| d.name == dim && d.sub_categories.iter().any(|s| s == sub))
        })
    }
}
