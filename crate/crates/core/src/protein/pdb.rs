//! ATOM-record subset of the PDB format.
//!
//! | Columns | Field                  |
//! |---------|------------------------|
//! | 1-6     | record name `ATOM  `   |
//! | 13-16   | atom name              |
//! | 17      | alternate location     |
//! | 18-20   | residue name           |
//! | 22      | chain identifier       |
//! | 23-26   | residue sequence number|
//! | 27      | insertion code         |
//! | 31-54   | x, y, z (8.3 each)     |
//!
//! Only the first model is read. HETATM records are ignored.

use std::collections::BTreeMap;

use log::warn;

use super::residue::{aa_from_three, Residue};
use super::ProteinStructure;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug)]
pub struct ParsedPdb {
    pub structure: ProteinStructure,
    /// Residues discarded because they had no CA atom.
    pub dropped_without_ca: usize,
}

struct AtomRecord {
    name: String,
    alt_loc: char,
    res_name: String,
    chain: char,
    res_seq: i32,
    i_code: char,
    pos: Vec3,
}

fn column(line: &str, start: usize, end: usize) -> &str {
    line.get(start..end.min(line.len())).unwrap_or("")
}

fn parse_atom_line(line: &str, line_no: usize) -> Result<AtomRecord> {
    if !line.is_ascii() {
        return Err(Error::Parse {
            line: line_no,
            msg: "non-ASCII ATOM record".into(),
        });
    }
    if line.len() < 54 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("ATOM record too short ({} columns)", line.len()),
        });
    }
    let coord = |start: usize, axis: &str| -> Result<f64> {
        let field = column(line, start, start + 8).trim();
        field
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("bad {axis} coordinate {field:?}"),
            })
    };
    let seq_field = column(line, 22, 26).trim();
    let res_seq = seq_field.parse::<i32>().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad residue sequence number {seq_field:?}"),
    })?;
    let char_at = |i: usize| line.as_bytes()[i] as char;
    Ok(AtomRecord {
        name: column(line, 12, 16).trim().to_string(),
        alt_loc: char_at(16),
        res_name: column(line, 17, 20).trim().to_string(),
        chain: char_at(21),
        res_seq,
        i_code: char_at(26),
        pos: Vec3::new(coord(30, "x")?, coord(38, "y")?, coord(46, "z")?),
    })
}

/// Parses the first chain of the first model.
pub fn parse_pdb(text: &str) -> Result<ProteinStructure> {
    parse_pdb_chains(text, &[]).map(|p| p.structure)
}

/// Parses the listed chains, concatenated in file order. An empty list selects
/// the chain of the first ATOM record.
pub fn parse_pdb_chains(text: &str, chains: &[char]) -> Result<ParsedPdb> {
    let mut id = String::from("unknown");
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with("HEADER") {
            let code = column(line, 62, 66).trim();
            if !code.is_empty() {
                id = code.to_string();
            }
        } else if line.starts_with("ENDMDL") {
            break;
        } else if line.starts_with("ATOM  ") {
            records.push(parse_atom_line(line, i + 1)?);
        }
    }
    if records.is_empty() {
        return Err(Error::NoAtoms);
    }
    let first_chain = records[0].chain;
    let wanted = |c: char| {
        if chains.is_empty() {
            c == first_chain
        } else {
            chains.contains(&c)
        }
    };

    // (chain, resSeq, iCode) -> residue under construction, in file order.
    let mut groups: Vec<((char, i32, char), String, BTreeMap<String, Vec3>)> = Vec::new();
    for rec in records {
        if !wanted(rec.chain) || !(rec.alt_loc == ' ' || rec.alt_loc == 'A') {
            continue;
        }
        let key = (rec.chain, rec.res_seq, rec.i_code);
        let idx = match groups.iter().rposition(|g| g.0 == key) {
            Some(i) => i,
            None => {
                groups.push((key, rec.res_name.clone(), BTreeMap::new()));
                groups.len() - 1
            }
        };
        groups[idx].2.entry(rec.name).or_insert(rec.pos);
    }

    let mut residues = Vec::with_capacity(groups.len());
    let mut dropped = 0;
    for (_, res_name, atoms) in groups {
        if !atoms.contains_key("CA") {
            dropped += 1;
            continue;
        }
        residues.push(Residue {
            aa_type: aa_from_three(&res_name),
            seq_index: residues.len(),
            atoms,
        });
    }
    if dropped > 0 {
        warn!("{id}: dropped {dropped} residue(s) without CA");
    }
    if residues.is_empty() {
        return Err(Error::EmptyStructure);
    }
    Ok(ParsedPdb {
        structure: ProteinStructure::new(id, residues)?,
        dropped_without_ca: dropped,
    })
}
