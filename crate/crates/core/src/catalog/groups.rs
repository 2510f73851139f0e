//! First-match-wins slide grouping rules.
//!
//! Rules are read from TOML:
//!
//! ```toml
//! default_group = 0
//!
//! [[rule]]
//! group = 1
//! staining_category = "IHC"
//!
//! [[rule]]
//! group = 2
//! lab = "L3"
//! tissue_type = "colon"
//! ```
//!
//! A rule matches when every predicate it lists equals the slide's value.
//! Rules are tried in file order and the first match wins; unmatched slides
//! receive `default_group`. Group ids must be dense in `[0, G)`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, SlideRecord, StainCategory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRule {
    pub group: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lab: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tissue_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staining_category: Option<StainCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
}

impl GroupRule {
    pub fn matches(&self, slide: &SlideRecord) -> bool {
        self.lab.as_ref().is_none_or(|v| *v == slide.lab)
            && self
                .tissue_type
                .as_ref()
                .is_none_or(|v| *v == slide.tissue_type)
            && self
                .staining_category
                .is_none_or(|v| v == slide.stain_category())
            && self
                .diagnosis
                .as_ref()
                .is_none_or(|v| slide.diagnosis.as_ref() == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRules {
    pub default_group: u32,
    #[serde(default, rename = "rule")]
    pub rules: Vec<GroupRule>,
}

impl GroupRules {
    pub fn from_toml(text: &str) -> Result<Self> {
        let rules: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("group rules serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self
            .rules
            .iter()
            .map(|r| r.group)
            .chain([self.default_group])
            .collect();
        let count = ids.len() as u32;
        if ids.iter().copied().ne(0..count) {
            return Err(Error::Config(format!(
                "group ids must be dense in [0, {count}), got {ids:?}"
            )));
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.rules
            .iter()
            .map(|r| r.group)
            .chain([self.default_group])
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    pub fn group_of(&self, slide: &SlideRecord) -> u32 {
        self.rules
            .iter()
            .find(|r| r.matches(slide))
            .map_or(self.default_group, |r| r.group)
    }
}

/// Returns a copy of the catalog with every slide's `group_id` set.
pub fn assign_groups(catalog: &Catalog, rules: &GroupRules) -> Catalog {
    let records = catalog
        .records()
        .iter()
        .map(|r| SlideRecord {
            group_id: rules.group_of(r) as i32,
            ..r.clone()
        })
        .collect();
    catalog.with_records(records)
}
