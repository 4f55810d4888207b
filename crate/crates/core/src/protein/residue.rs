use std::collections::BTreeMap;

use crate::geometry::Vec3;

/// One-letter codes in amino-acid index order; index 20 is unknown (`X`).
pub const ONE_LETTER: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const UNKNOWN_AA: usize = 20;
/// Amino-acid classes including the unknown slot.
pub const NUM_AA_TYPES: usize = 21;

const THREE_LETTER: [&str; 20] = [
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU", "MET", "ASN", "PRO",
    "GLN", "ARG", "SER", "THR", "VAL", "TRP", "TYR",
];

pub fn aa_index(code: char) -> usize {
    ONE_LETTER
        .iter()
        .position(|c| *c as char == code.to_ascii_uppercase())
        .unwrap_or(UNKNOWN_AA)
}

pub fn one_letter(index: usize) -> char {
    ONE_LETTER.get(index).map_or('X', |c| *c as char)
}

/// Index of a three-letter residue name; a few common variants (MSE, HSD, ...)
/// map to their parent amino acid.
pub fn aa_from_three(name: &str) -> usize {
    let name = name.trim().to_ascii_uppercase();
    let canonical = match name.as_str() {
        "MSE" => "MET",
        "HSD" | "HSE" | "HSP" | "HID" | "HIE" | "HIP" => "HIS",
        "CYX" => "CYS",
        other => other,
    };
    THREE_LETTER
        .iter()
        .position(|n| *n == canonical)
        .unwrap_or(UNKNOWN_AA)
}

pub fn three_letter(index: usize) -> &'static str {
    THREE_LETTER.get(index).copied().unwrap_or("UNK")
}

/// Atom quadruples defining chi1..chi4 for each amino acid.
pub fn chi_atoms(index: usize) -> &'static [[&'static str; 4]] {
    const N_CA_CB_CG: [&str; 4] = ["N", "CA", "CB", "CG"];
    match one_letter(index) {
        'R' => &[
            N_CA_CB_CG,
            ["CA", "CB", "CG", "CD"],
            ["CB", "CG", "CD", "NE"],
            ["CG", "CD", "NE", "CZ"],
        ],
        'N' | 'D' => &[N_CA_CB_CG, ["CA", "CB", "CG", "OD1"]],
        'C' => &[["N", "CA", "CB", "SG"]],
        'Q' | 'E' => &[
            N_CA_CB_CG,
            ["CA", "CB", "CG", "CD"],
            ["CB", "CG", "CD", "OE1"],
        ],
        'H' => &[N_CA_CB_CG, ["CA", "CB", "CG", "ND1"]],
        'I' => &[["N", "CA", "CB", "CG1"], ["CA", "CB", "CG1", "CD1"]],
        'L' => &[N_CA_CB_CG, ["CA", "CB", "CG", "CD1"]],
        'K' => &[
            N_CA_CB_CG,
            ["CA", "CB", "CG", "CD"],
            ["CB", "CG", "CD", "CE"],
            ["CG", "CD", "CE", "NZ"],
        ],
        'M' => &[
            N_CA_CB_CG,
            ["CA", "CB", "CG", "SD"],
            ["CB", "CG", "SD", "CE"],
        ],
        'F' | 'W' | 'Y' => &[N_CA_CB_CG, ["CA", "CB", "CG", "CD1"]],
        'P' => &[N_CA_CB_CG, ["CA", "CB", "CG", "CD"]],
        'S' => &[["N", "CA", "CB", "OG"]],
        'T' => &[["N", "CA", "CB", "OG1"]],
        'V' => &[["N", "CA", "CB", "CG1"]],
        _ => &[],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    /// 0..=19, or [`UNKNOWN_AA`].
    pub aa_type: usize,
    pub seq_index: usize,
    pub atoms: BTreeMap<String, Vec3>,
}

impl Residue {
    pub fn atom(&self, name: &str) -> Option<Vec3> {
        self.atoms.get(name).copied()
    }

    /// Panics if CA is missing; structures never admit such residues.
    pub fn ca(&self) -> Vec3 {
        self.atom("CA").expect("residue without CA")
    }

    pub fn one_letter(&self) -> char {
        one_letter(self.aa_type)
    }
}
