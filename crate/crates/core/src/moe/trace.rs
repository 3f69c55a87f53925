use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RoutingDistribution;

/// One routing decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub layer: usize,
    pub token_index: usize,
    pub image_id: usize,
    pub class_label: usize,
    pub expert_id: usize,
}

/// Every routing decision of an evaluation pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub entries: Vec<RouteEntry>,
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(offset, format!("routing trace: {e}"))
}

impl RoutingTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|r| r.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Writes `layer,token_index,image_id,class_label,expert_id` rows with a
    /// header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.entries {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("routing trace", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let entries = r.deserialize().collect::<std::result::Result<Vec<RouteEntry>, _>>().map_err(csv_err)?;
        Ok(Self { entries })
    }

    /// Share of tokens each expert received per layer. `experts_per_layer`
    /// sizes the vectors so unused experts appear as 0.
    pub fn distribution(&self, experts_per_layer: &[usize]) -> RoutingDistribution {
        let mut counts: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for r in &self.entries {
            let k = experts_per_layer.get(r.layer).copied().unwrap_or(0).max(r.expert_id + 1);
            let c = counts.entry(r.layer).or_insert_with(|| vec![0; k]);
            if c.len() <= r.expert_id {
                c.resize(r.expert_id + 1, 0);
            }
            c[r.expert_id] += 1;
        }
        counts
            .into_iter()
            .map(|(l, c)| {
                let total: u64 = c.iter().sum();
                (l, c.iter().map(|&x| x as f64 / total as f64).collect())
            })
            .collect()
    }
}
