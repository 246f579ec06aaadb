//! ROI atlas with an optional functional-subnetwork assignment per region.
//!
//! Subnetwork ids are 1-based (`1..=subnet_count`). Regions without a
//! subnetwork are kept as `None` and never contribute to a subnetwork token.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasPartition {
    roi_names: Vec<String>,
    subnet_of: Vec<Option<usize>>,
    subnet_count: usize,
}

impl AtlasPartition {
    pub fn new(
        roi_names: Vec<String>,
        subnet_of: Vec<Option<usize>>,
        subnet_count: usize,
    ) -> Result<Self> {
        if roi_names.is_empty() {
            return Err(Error::Config("atlas has no regions".into()));
        }
        if roi_names.len() != subnet_of.len() {
            return Err(Error::Config(format!(
                "atlas has {} names but {} subnetwork assignments",
                roi_names.len(),
                subnet_of.len()
            )));
        }
        let mut sizes = vec![0usize; subnet_count];
        for (i, s) in subnet_of.iter().enumerate() {
            if let Some(k) = *s {
                if k == 0 || k > subnet_count {
                    return Err(Error::Config(format!(
                        "region {} ({}) assigned to subnetwork {k}, expected 1..={subnet_count}",
                        i, roi_names[i]
                    )));
                }
                sizes[k - 1] += 1;
            }
        }
        if let Some(k) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!(
                "subnetwork {} has no member regions",
                k + 1
            )));
        }
        Ok(Self {
            roi_names,
            subnet_of,
            subnet_count,
        })
    }

    /// Deterministic synthetic partition: the first `roi_count - unassigned`
    /// regions are dealt to subnetworks round-robin, the tail is left
    /// unassigned.
    pub fn round_robin(roi_count: usize, subnet_count: usize, unassigned: usize) -> Result<Self> {
        if unassigned >= roi_count {
            return Err(Error::Config("every region would be unassigned".into()));
        }
        let assigned = roi_count - unassigned;
        if subnet_count == 0 || subnet_count > assigned {
            return Err(Error::Config(format!(
                "cannot deal {assigned} regions into {subnet_count} subnetworks"
            )));
        }
        let names = (0..roi_count)
            .map(|i| format!("roi_{:03}", i + 1))
            .collect();
        let subnet_of = (0..roi_count)
            .map(|i| (i < assigned).then_some(i % subnet_count + 1))
            .collect();
        Self::new(names, subnet_of, subnet_count)
    }

    /// 116 regions in 7 subnetworks with a 26-region unassigned tail.
    pub fn default_116() -> Self {
        Self::round_robin(116, 7, 26).expect("static atlas is valid")
    }

    pub fn roi_count(&self) -> usize {
        self.roi_names.len()
    }

    pub fn subnet_count(&self) -> usize {
        self.subnet_count
    }

    pub fn roi_names(&self) -> &[String] {
        &self.roi_names
    }

    pub fn subnet_of(&self, roi: usize) -> Option<usize> {
        self.subnet_of[roi]
    }

    pub fn assignments(&self) -> &[Option<usize>] {
        &self.subnet_of
    }

    /// Member ROI indices of subnetwork `k` (1-based).
    pub fn members(&self, k: usize) -> Vec<usize> {
        self.subnet_of
            .iter()
            .enumerate()
            .filter_map(|(i, s)| (*s == Some(k)).then_some(i))
            .collect()
    }

    pub fn unassigned(&self) -> Vec<usize> {
        self.subnet_of
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.is_none().then_some(i))
            .collect()
    }

    /// Number of multi-scale tokens: one per ROI, one per subnetwork, one global.
    pub fn token_count(&self) -> usize {
        self.roi_count() + self.subnet_count + 1
    }

    /// Reads `name,subnet` lines; subnet `0` or `-` marks an unassigned region.
    /// Blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut names = Vec::new();
        let mut subnet_of = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, subnet) = line.split_once(',').ok_or_else(|| {
                Error::format(path, format!("line {}: expected name,subnet", lineno + 1))
            })?;
            let subnet = subnet.trim();
            let id = match subnet {
                "-" | "0" => None,
                s => Some(s.parse::<usize>().map_err(|_| {
                    Error::format(
                        path,
                        format!("line {}: bad subnetwork id {s:?}", lineno + 1),
                    )
                })?),
            };
            names.push(name.trim().to_string());
            subnet_of.push(id);
        }
        let count = subnet_of.iter().flatten().copied().max().unwrap_or(0);
        Self::new(names, subnet_of, count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, s) in self.roi_names.iter().zip(&self.subnet_of) {
            match s {
                Some(k) => out.push_str(&format!("{name},{k}\n")),
                None => out.push_str(&format!("{name},-\n")),
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Applies `perm` (new index -> old index) to the region order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let names = perm.iter().map(|&p| self.roi_names[p].clone()).collect();
        let subnet_of = perm.iter().map(|&p| self.subnet_of[p]).collect();
        Self::new(names, subnet_of, self.subnet_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_atlas_has_124_tokens() {
        let atlas = AtlasPartition::default_116();
        assert_eq!(atlas.roi_count(), 116);
        assert_eq!(atlas.subnet_count(), 7);
        assert_eq!(atlas.token_count(), 124);
        assert_eq!(atlas.unassigned().len(), 26);
    }

    #[test]
    fn empty_subnetwork_is_rejected() {
        let names = vec!["a".into(), "b".into()];
        let err = AtlasPartition::new(names, vec![Some(1), Some(1)], 2).unwrap_err();
        assert!(err.to_string().contains("subnetwork 2"));
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let names = vec!["a".into()];
        assert!(AtlasPartition::new(names, vec![Some(3)], 2).is_err());
    }

    #[test]
    fn load_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atlas.csv");
        let atlas = AtlasPartition::round_robin(9, 3, 2).unwrap();
        atlas.save(&path).unwrap();
        assert_eq!(AtlasPartition::load(&path).unwrap(), atlas);
    }
}
