//! Protein structures, their cutoff graphs, and the on-disk formats that feed
//! them (PDB, the line-oriented dataset format, precomputed embeddings).

pub mod dataset;
pub mod embedding;
mod graph;
pub mod pdb;
pub mod residue;

use std::fmt;
use std::str::FromStr;

pub use dataset::{filter_max_length, read_dataset, write_dataset, Dataset, Label, Record};
pub use graph::{build_graph, ProteinGraph, SEQDIST_CLAMP, SEQDIST_VOCAB};
pub use pdb::parse_pdb;
pub use residue::Residue;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProteinStructure {
    pub id: String,
    pub residues: Vec<Residue>,
    pub sequence: String,
}

impl ProteinStructure {
    /// Validates that every residue has a CA and that `seq_index` increases,
    /// then derives the one-letter sequence.
    pub fn new(id: impl Into<String>, residues: Vec<Residue>) -> Result<Self> {
        for (i, r) in residues.iter().enumerate() {
            if r.atom("CA").is_none() {
                return Err(Error::Format(format!("residue {i} has no CA atom")));
            }
            if i > 0 && r.seq_index <= residues[i - 1].seq_index {
                return Err(Error::Format(format!(
                    "residue {i}: seq_index not increasing"
                )));
            }
        }
        let sequence = residues.iter().map(Residue::one_letter).collect();
        Ok(ProteinStructure {
            id: id.into(),
            residues,
            sequence,
        })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.residues.iter().map(|r| r.aa_type).collect()
    }

    /// Copy with every atom moved by `t`.
    pub fn transformed(&self, t: &crate::geometry::SE3Transform) -> ProteinStructure {
        let mut out = self.clone();
        for r in &mut out.residues {
            for p in r.atoms.values_mut() {
                *p = t.apply(*p);
            }
        }
        out
    }
}

/// Geometric feature level; each level extends the previous one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    /// CA positions only: distance, polar/azimuthal angle, edge rotation.
    #[default]
    Base,
    /// Adds Euler angles between N-CA-C backbone frames.
    Backbone,
    /// Adds side-chain torsions per residue.
    AllAtom,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Base => "base",
            Level::Backbone => "backbone",
            Level::AllAtom => "all_atom",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Level::Base),
            "backbone" => Ok(Level::Backbone),
            "all_atom" => Ok(Level::AllAtom),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

/// The five benchmark tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Reaction,
    Mqa,
    Lba,
    Ppbs,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
    PerResidue,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Reaction, Task::Mqa, Task::Lba, Task::Ppbs, Task::Bce];

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Mqa | Task::Lba => TaskKind::Regression,
            Task::Reaction => TaskKind::Classification,
            Task::Ppbs | Task::Bce => TaskKind::PerResidue,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Reaction => "reaction",
            Task::Mqa => "mqa",
            Task::Lba => "lba",
            Task::Ppbs => "ppbs",
            Task::Bce => "bce",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reaction" => Ok(Task::Reaction),
            "mqa" => Ok(Task::Mqa),
            "lba" => Ok(Task::Lba),
            "ppbs" => Ok(Task::Ppbs),
            "bce" => Ok(Task::Bce),
            other => Err(Error::Format(format!("unknown task tag {other:?}"))),
        }
    }
}
