//! Line-oriented dataset records.
//!
//! ```text
//! #task <reaction|mqa|lba|ppbs|bce> level <base|backbone|all_atom>
//! >id <label | @file | ->
//! SEQ <one-letter sequence>
//! ATOM <res_index> <atom_name> <x> <y> <z>
//! RLAB <0/1 string>            (ppbs, bce)
//! LIG <natoms>                 (lba)
//! LATOM <elem_index>
//! LBOND <i> <j>
//! <blank line>
//! ```
//!
//! `@file` reads the label from a file relative to the dataset's directory.
//! Floats are written in shortest round-trip form, so writing a parsed file
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::residue::{aa_index, Residue};
use super::{Level, ProteinStructure, Task, TaskKind};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::heads::LigandGraph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Scalar(f64),
    Class(usize),
    /// Per-residue tasks carry their labels in [`Record::residue_labels`].
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub structure: ProteinStructure,
    pub label: Label,
    pub ligand: Option<LigandGraph>,
    pub residue_labels: Option<Vec<u8>>,
}

impl Record {
    pub fn id(&self) -> &str {
        &self.structure.id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `None` only for an empty file without a header.
    pub task: Option<Task>,
    pub level: Level,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(task: Task, level: Level, records: Vec<Record>) -> Self {
        Dataset {
            task: Some(task),
            level,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_label(task: Task, raw: &str, line: usize, base: Option<&Path>) -> Result<Label> {
    let text;
    let raw = if let Some(file) = raw.strip_prefix('@') {
        let path = base.map_or_else(|| Path::new(file).to_path_buf(), |b| b.join(file));
        text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.trim()
    } else {
        raw
    };
    match task.kind() {
        TaskKind::Regression => raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Label::Scalar)
            .ok_or_else(|| perr(line, format!("bad regression label {raw:?}"))),
        TaskKind::Classification => raw
            .parse::<usize>()
            .map(Label::Class)
            .map_err(|_| perr(line, format!("bad class label {raw:?}"))),
        TaskKind::PerResidue => Ok(Label::None),
    }
}

struct Pending {
    id: String,
    label: Label,
    header_line: usize,
    sequence: Option<String>,
    atoms: BTreeMap<usize, BTreeMap<String, Vec3>>,
    residue_labels: Option<Vec<u8>>,
    lig_atoms: Option<(usize, Vec<usize>)>,
    lig_bonds: Vec<(usize, usize)>,
}

impl Pending {
    fn finish(self, task: Task) -> Result<Record> {
        let line = self.header_line;
        let seq = self
            .sequence
            .ok_or_else(|| perr(line, format!("record {} has no SEQ line", self.id)))?;
        let mut atoms = self.atoms;
        if let Some(k) = atoms.keys().find(|k| **k >= seq.chars().count()) {
            return Err(perr(
                line,
                format!("record {}: ATOM residue index {k} out of range", self.id),
            ));
        }
        let residues = seq
            .chars()
            .enumerate()
            .map(|(i, c)| Residue {
                aa_type: aa_index(c),
                seq_index: i,
                atoms: atoms.remove(&i).unwrap_or_default(),
            })
            .collect();
        let structure = ProteinStructure::new(self.id.clone(), residues)
            .map_err(|e| perr(line, format!("record {}: {e}", self.id)))?;

        if task.kind() == TaskKind::PerResidue {
            match &self.residue_labels {
                Some(l) if l.len() == structure.len() => {}
                Some(l) => {
                    return Err(Error::LengthMismatch(format!(
                        "record {}: {} residue labels for {} residues",
                        self.id,
                        l.len(),
                        structure.len()
                    )))
                }
                None => return Err(perr(line, format!("record {} has no RLAB line", self.id))),
            }
        }
        let ligand = match self.lig_atoms {
            Some((declared, types)) => {
                if declared != types.len() {
                    return Err(perr(
                        line,
                        format!(
                            "record {}: LIG declares {declared} atoms, found {}",
                            self.id,
                            types.len()
                        ),
                    ));
                }
                Some(
                    LigandGraph::new(types, self.lig_bonds)
                        .map_err(|e| perr(line, e.to_string()))?,
                )
            }
            None => None,
        };
        if task == Task::Lba && ligand.is_none() {
            return Err(perr(line, format!("record {} has no ligand", self.id)));
        }
        Ok(Record {
            structure,
            label: self.label,
            ligand,
            residue_labels: self.residue_labels,
        })
    }
}

/// Parses dataset text. `base` resolves `@file` labels.
pub fn parse_dataset(text: &str, base: Option<&Path>) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = loop {
        match lines.next() {
            None => {
                return Ok(Dataset {
                    task: None,
                    level: Level::Base,
                    records: Vec::new(),
                })
            }
            Some((_, l)) if l.trim().is_empty() => continue,
            Some(h) => break h,
        }
    };
    let fields: Vec<&str> = header.1.split_whitespace().collect();
    let (task, level) = match fields.as_slice() {
        ["#task", task, "level", level] => (task.parse::<Task>()?, level.parse::<Level>()?),
        _ => {
            return Err(perr(
                header.0,
                "expected `#task <task> level <level>` header",
            ))
        }
    };

    let mut records = Vec::new();
    let mut pending: Option<Pending> = None;
    for (no, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            if let Some(p) = pending.take() {
                records.push(p.finish(task)?);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('>') {
            if let Some(p) = pending.take() {
                records.push(p.finish(task)?);
            }
            let mut parts = rest.split_whitespace();
            let id = parts.next().ok_or_else(|| perr(no, "record without id"))?;
            let label = parts
                .next()
                .ok_or_else(|| perr(no, "record without label"))?;
            pending = Some(Pending {
                id: id.to_string(),
                label: parse_label(task, label, no, base)?,
                header_line: no,
                sequence: None,
                atoms: BTreeMap::new(),
                residue_labels: None,
                lig_atoms: None,
                lig_bonds: Vec::new(),
            });
            continue;
        }
        let rec = pending
            .as_mut()
            .ok_or_else(|| perr(no, "data line outside a record"))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| perr(no, format!("bad integer {s:?}")))
        };
        let float = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(no, format!("bad coordinate {s:?}")))
        };
        match parts.as_slice() {
            ["SEQ", seq] => rec.sequence = Some(seq.to_string()),
            ["ATOM", idx, name, x, y, z] => {
                let pos = Vec3::new(float(x)?, float(y)?, float(z)?);
                rec.atoms
                    .entry(num(idx)?)
                    .or_default()
                    .insert(name.to_string(), pos);
            }
            ["RLAB", bits] => {
                let labels = bits
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(0),
                        '1' => Ok(1),
                        other => Err(perr(no, format!("bad residue label {other:?}"))),
                    })
                    .collect::<Result<Vec<u8>>>()?;
                rec.residue_labels = Some(labels);
            }
            ["LIG", n] => rec.lig_atoms = Some((num(n)?, Vec::new())),
            ["LATOM", elem] => {
                let atoms = rec
                    .lig_atoms
                    .as_mut()
                    .ok_or_else(|| perr(no, "LATOM before LIG"))?;
                atoms.1.push(num(elem)?);
            }
            ["LBOND", a, b] => rec.lig_bonds.push((num(a)?, num(b)?)),
            _ => return Err(perr(no, format!("unrecognized line {line:?}"))),
        }
    }
    if let Some(p) = pending.take() {
        records.push(p.finish(task)?);
    }
    Ok(Dataset {
        task: Some(task),
        level,
        records,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path.parent())
}

/// Serializes `ds`. Atoms are written in residue order, then atom-name order.
pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let Some(task) = ds.task else { return out };
    let _ = writeln!(out, "#task {task} level {}", ds.level);
    for rec in &ds.records {
        let label = match rec.label {
            Label::Scalar(v) => v.to_string(),
            Label::Class(c) => c.to_string(),
            Label::None => "-".to_string(),
        };
        let _ = writeln!(out, ">{} {label}", rec.structure.id);
        let _ = writeln!(out, "SEQ {}", rec.structure.sequence);
        for (i, r) in rec.structure.residues.iter().enumerate() {
            for (name, p) in &r.atoms {
                let _ = writeln!(out, "ATOM {i} {name} {} {} {}", p.x, p.y, p.z);
            }
        }
        if let Some(labels) = &rec.residue_labels {
            let bits: String = labels
                .iter()
                .map(|b| if *b == 0 { '0' } else { '1' })
                .collect();
            let _ = writeln!(out, "RLAB {bits}");
        }
        if let Some(lig) = &rec.ligand {
            let _ = writeln!(out, "LIG {}", lig.atom_types.len());
            for t in &lig.atom_types {
                let _ = writeln!(out, "LATOM {t}");
            }
            for (a, b) in &lig.bonds {
                let _ = writeln!(out, "LBOND {a} {b}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_dataset(ds)).map_err(|e| Error::io(path, e))
}

/// Drops records longer than `max_len` residues; returns the kept records and
/// the number dropped.
pub fn filter_max_length(records: Vec<Record>, max_len: usize) -> (Vec<Record>, usize) {
    let before = records.len();
    let kept: Vec<Record> = records
        .into_iter()
        .filter(|r| r.structure.len() <= max_len)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}
