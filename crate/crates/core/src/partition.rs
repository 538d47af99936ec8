use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::mix64;

/// Layer-to-device mapping. Gene `i` holds the device of layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    assignment: Vec<usize>,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, num_devices: usize) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::InvalidArgument("partition must cover at least one layer".into()));
        }
        if let Some((i, d)) = assignment.iter().enumerate().find(|(_, &d)| d >= num_devices) {
            return Err(Error::InvalidArgument(format!(
                "layer {} mapped to device {d}, but only {num_devices} devices exist",
                i + 1
            )));
        }
        Ok(Self { assignment })
    }

    pub fn uniform(num_layers: usize, device: usize) -> Self {
        Self {
            assignment: vec![device; num_layers],
        }
    }

    /// The `index`-th partition in base-`num_devices` counting order, layer 1
    /// as the most significant digit.
    pub fn from_index(mut index: u128, num_layers: usize, num_devices: usize) -> Self {
        let mut assignment = vec![0; num_layers];
        for gene in assignment.iter_mut().rev() {
            *gene = (index % num_devices as u128) as usize;
            index /= num_devices as u128;
        }
        Self { assignment }
    }

    pub(crate) fn from_genes_unchecked(assignment: Vec<usize>) -> Self {
        Self { assignment }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_layers(&self) -> usize {
        self.assignment.len()
    }

    /// Device of 1-based `layer`.
    pub fn device_of(&self, layer: usize) -> usize {
        self.assignment[layer - 1]
    }

    pub fn layers_on(&self, device: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &d)| d == device)
            .map(|(i, _)| i + 1)
    }

    /// Stable 64-bit hash of the genes; used to seed genome-keyed fault draws.
    pub fn genome_hash(&self) -> u64 {
        self.assignment
            .iter()
            .fold(mix64(self.assignment.len() as u64), |h, &g| {
                mix64(h ^ mix64(g as u64 + 1))
            })
    }

    pub fn digest(&self) -> String {
        format!("{:016x}", self.genome_hash())
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.assignment.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let genes = s
            .split('-')
            .map(|g| {
                g.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad partition `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Partition::new(genes, usize::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_genes() {
        assert!(Partition::new(vec![0, 1, 2], 3).is_ok());
        assert!(Partition::new(vec![0, 3], 3).is_err());
        assert!(Partition::new(vec![], 3).is_err());
    }

    #[test]
    fn counting_order_and_text() {
        let p = Partition::from_index(5, 4, 2);
        assert_eq!(p.assignment(), &[0, 1, 0, 1]);
        assert_eq!(p.to_string(), "0-1-0-1");
        assert_eq!("0-1-0-1".parse::<Partition>().unwrap(), p);
        assert_eq!(p.layers_on(1).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn hash_distinguishes_genomes() {
        let all: std::collections::HashSet<u64> =
            (0..64).map(|i| Partition::from_index(i, 6, 2).genome_hash()).collect();
        assert_eq!(all.len(), 64);
        assert_ne!(
            Partition::uniform(3, 0).genome_hash(),
            Partition::uniform(4, 0).genome_hash()
        );
    }
}
