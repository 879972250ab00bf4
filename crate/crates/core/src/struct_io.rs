//! Backbone structure files, nucleotide sequences and their one-hot form.
//!
//! Each nucleotide is reduced to three atoms: P, C4' and the glycosidic
//! nitrogen (N1 for pyrimidines, N9 for purines). Channel order for one-hot
//! matrices is (A, C, G, U) everywhere in the crate.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Number of one-hot channels.
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Nucleotide {
    A,
    C,
    G,
    U,
}

impl Nucleotide {
    pub const ALL: [Nucleotide; 4] = [Nucleotide::A, Nucleotide::C, Nucleotide::G, Nucleotide::U];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'A' => Some(Nucleotide::A),
            'C' => Some(Nucleotide::C),
            'G' => Some(Nucleotide::G),
            'U' => Some(Nucleotide::U),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        ['A', 'C', 'G', 'U'][self.index()]
    }

    pub fn is_purine(self) -> bool {
        matches!(self, Nucleotide::A | Nucleotide::G)
    }

    /// Name of the glycosidic nitrogen used as the third backbone atom.
    pub fn glycosidic_atom(self) -> &'static str {
        if self.is_purine() {
            "N9"
        } else {
            "N1"
        }
    }

    /// Maps a residue name from a structure file to a nucleotide.
    fn from_residue_name(name: &str) -> Option<Self> {
        match name.trim() {
            "A" | "RA" | "ADE" | "RA5" | "RA3" => Some(Nucleotide::A),
            "C" | "RC" | "CYT" | "RC5" | "RC3" => Some(Nucleotide::C),
            "G" | "RG" | "GUA" | "RG5" | "RG3" => Some(Nucleotide::G),
            "U" | "RU" | "URA" | "URI" | "RU5" | "RU3" => Some(Nucleotide::U),
            _ => None,
        }
    }
}

impl fmt::Display for Nucleotide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RnaSequence {
    letters: Vec<Nucleotide>,
}

impl RnaSequence {
    pub fn new(letters: Vec<Nucleotide>) -> Result<Self> {
        if letters.is_empty() {
            return Err(Error::Shape("sequence must contain at least one nucleotide".into()));
        }
        Ok(Self { letters })
    }

    pub fn letters(&self) -> &[Nucleotide] {
        &self.letters
    }

    pub fn len(&self) -> usize {
        self.letters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    /// N×4 indicator matrix over (A, C, G, U).
    pub fn onehot(&self) -> Vec<[f64; CHANNELS]> {
        self.letters
            .iter()
            .map(|n| {
                let mut row = [0.0; CHANNELS];
                row[n.index()] = 1.0;
                row
            })
            .collect()
    }

    /// Fraction of positions equal to `other` (native sequence recovery).
    pub fn recovery(&self, other: &RnaSequence) -> f64 {
        let n = self.len().min(other.len());
        if n == 0 {
            return 0.0;
        }
        let same = self
            .letters
            .iter()
            .zip(&other.letters)
            .filter(|(a, b)| a == b)
            .count();
        same as f64 / self.len().max(other.len()) as f64
    }

    /// FASTA record wrapped at 60 columns.
    pub fn to_fasta(&self, id: &str) -> String {
        let mut out = format!(">{id}\n");
        let s = self.to_string();
        for chunk in s.as_bytes().chunks(60) {
            out.push_str(std::str::from_utf8(chunk).expect("ascii"));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for RnaSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.letters {
            f.write_char(n.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for RnaSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        sequence_to_onehot(s)
    }
}

/// Parses letters over {A, C, G, U}; whitespace is ignored.
pub fn sequence_to_onehot(letters: &str) -> Result<RnaSequence> {
    let parsed = letters
        .chars()
        .filter(|c| !c.is_whitespace())
        .enumerate()
        .map(|(position, letter)| {
            Nucleotide::from_char(letter).ok_or(Error::Alphabet { letter, position })
        })
        .collect::<Result<Vec<_>>>()?;
    RnaSequence::new(parsed)
}

/// Per-row argmax over (A, C, G, U); ties go to the lowest channel.
pub fn decode_argmax(x0_hat: &[[f64; CHANNELS]]) -> Result<RnaSequence> {
    let letters = x0_hat
        .iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..CHANNELS {
                if row[c] > row[best] {
                    best = c;
                }
            }
            Nucleotide::ALL[best]
        })
        .collect();
    RnaSequence::new(letters)
}

/// Parses every record of a FASTA document.
pub fn parse_fasta(text: &str) -> Result<Vec<(String, RnaSequence)>> {
    let mut records = Vec::new();
    let mut header: Option<String> = None;
    let mut body = String::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(h) = line.strip_prefix('>') {
            if let Some(prev) = header.take() {
                records.push((prev, sequence_to_onehot(&body)?));
                body.clear();
            }
            header = Some(h.trim().to_string());
        } else if !line.is_empty() {
            if header.is_none() {
                return Err(Error::parse(lineno + 1, "sequence data before FASTA header"));
            }
            body.push_str(line);
        }
    }
    if let Some(h) = header {
        records.push((h, sequence_to_onehot(&body)?));
    }
    if records.is_empty() {
        return Err(Error::parse(0, "no FASTA records"));
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidueAtoms {
    pub base: Nucleotide,
    pub p: Point,
    pub c4p: Point,
    pub n_glyco: Point,
    pub centroid: Point,
}

impl ResidueAtoms {
    pub fn new(base: Nucleotide, p: Point, c4p: Point, n_glyco: Point) -> Self {
        let centroid = (p + c4p + n_glyco) / 3.0;
        Self {
            base,
            p,
            c4p,
            n_glyco,
            centroid,
        }
    }

    fn is_finite(&self) -> bool {
        [self.p, self.c4p, self.n_glyco]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn map_points(&self, f: impl Fn(&Point) -> Point) -> Self {
        Self::new(self.base, f(&self.p), f(&self.c4p), f(&self.n_glyco))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneStructure {
    pub residues: Vec<ResidueAtoms>,
    pub chain_id: String,
    pub source: String,
}

impl BackboneStructure {
    pub fn new(residues: Vec<ResidueAtoms>, chain_id: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        if residues.is_empty() {
            return Err(Error::Shape("structure has no residues".into()));
        }
        if let Some(i) = residues.iter().position(|r| !r.is_finite()) {
            return Err(Error::Shape(format!("residue {} has non-finite coordinates", i + 1)));
        }
        Ok(Self {
            residues,
            chain_id: chain_id.into(),
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn sequence(&self) -> RnaSequence {
        RnaSequence {
            letters: self.residues.iter().map(|r| r.base).collect(),
        }
    }

    pub fn c4p_trace(&self) -> Vec<Point> {
        self.residues.iter().map(|r| r.c4p).collect()
    }

    pub fn centroids(&self) -> Vec<Point> {
        self.residues.iter().map(|r| r.centroid).collect()
    }

    /// Applies `x -> rotation * x + translation` to every atom.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, translation: &Point) -> Self {
        Self {
            residues: self
                .residues
                .iter()
                .map(|r| r.map_points(|x| rotation * x + translation))
                .collect(),
            chain_id: self.chain_id.clone(),
            source: self.source.clone(),
        }
    }

    /// Adds isotropic Gaussian noise of standard deviation `sigma` to every atom.
    pub fn jittered<R: rand::Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut noise = || -> f64 { StandardNormal.sample(rng) };
        let residues = self
            .residues
            .iter()
            .map(|r| {
                let mut jitter = |x: &Point| x + Point::new(noise(), noise(), noise()) * sigma;
                let p = jitter(&r.p);
                let c4p = jitter(&r.c4p);
                let n = jitter(&r.n_glyco);
                ResidueAtoms::new(r.base, p, c4p, n)
            })
            .collect();
        Self {
            residues,
            chain_id: self.chain_id.clone(),
            source: self.source.clone(),
        }
    }

    /// Fixed-column ATOM records for the three backbone atoms of every residue.
    pub fn to_pdb(&self) -> String {
        let chain = self.chain_id.chars().next().unwrap_or('A');
        let mut out = String::new();
        let mut serial = 1;
        for (i, r) in self.residues.iter().enumerate() {
            let resname = r.base.as_char();
            let atoms = [("P", &r.p, "P"), ("C4'", &r.c4p, "C"), (r.base.glycosidic_atom(), &r.n_glyco, "N")];
            for (name, x, element) in atoms {
                let _ = writeln!(
                    out,
                    "ATOM  {serial:>5}  {name:<3} {resname:>3} {chain}{resseq:>4}    {x:>8.3}{y:>8.3}{z:>8.3}{occ:>6.2}{b:>6.2}          {element:>2}",
                    resseq = i + 1,
                    x = x[0],
                    y = x[1],
                    z = x[2],
                    occ = 1.0,
                    b = 0.0,
                );
                serial += 1;
            }
        }
        out.push_str("END\n");
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedBackbone {
    pub structure: BackboneStructure,
    /// Residues skipped because one of P, C4', N1/N9 was missing.
    pub dropped: usize,
}

#[derive(Default)]
struct PartialResidue {
    base: Option<Nucleotide>,
    p: Option<Point>,
    c4p: Option<Point>,
    n: Option<Point>,
}

fn column(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        return "";
    }
    line.get(start..end).unwrap_or("")
}

fn parse_coord(line: &str, lineno: usize, start: usize, axis: char) -> Result<f64> {
    let field = column(line, start, start + 8).trim();
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(lineno, format!("malformed {axis} coordinate {field:?}")))
}

/// Reads the first RNA chain of a fixed-column structure file.
///
/// Only `ATOM` records of the first model are read; alternate locations
/// other than blank or `A` are skipped. Residues lacking any of the three
/// backbone atoms are dropped and counted.
pub fn parse_pdb_backbone(text: &str) -> Result<ParsedBackbone> {
    parse_pdb_backbone_from(text, "")
}

pub fn parse_pdb_backbone_from(text: &str, source: &str) -> Result<ParsedBackbone> {
    let mut chain: Option<char> = None;
    let mut residues: BTreeMap<i64, PartialResidue> = BTreeMap::new();
    let mut lines_read = 0;

    for (idx, line) in text.lines().enumerate() {
        lines_read = idx + 1;
        let lineno = idx + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") && !line.starts_with("ATOM ") {
            continue;
        }
        if column(line, 0, 6) != "ATOM  " {
            continue;
        }
        let altloc = column(line, 16, 17);
        if !(altloc.trim().is_empty() || altloc == "A") {
            continue;
        }
        let Some(base) = Nucleotide::from_residue_name(column(line, 17, 20)) else {
            continue;
        };
        let chain_id = column(line, 21, 22).chars().next().unwrap_or(' ');
        match chain {
            None => chain = Some(chain_id),
            Some(c) if c != chain_id => continue,
            _ => {}
        }
        let resseq_field = column(line, 22, 26).trim();
        let resseq: i64 = resseq_field
            .parse()
            .map_err(|_| Error::parse(lineno, format!("malformed residue number {resseq_field:?}")))?;
        let atom = column(line, 12, 16).trim().replace('*', "'");
        let slot = residues.entry(resseq).or_default();
        let target = if atom == "P" {
            &mut slot.p
        } else if atom == "C4'" {
            &mut slot.c4p
        } else if atom == base.glycosidic_atom() {
            &mut slot.n
        } else {
            continue;
        };
        let x = parse_coord(line, lineno, 30, 'x')?;
        let y = parse_coord(line, lineno, 38, 'y')?;
        let z = parse_coord(line, lineno, 46, 'z')?;
        slot.base.get_or_insert(base);
        if target.is_none() {
            *target = Some(Point::new(x, y, z));
        }
    }

    let mut dropped = 0;
    let mut complete = Vec::with_capacity(residues.len());
    for partial in residues.into_values() {
        match (partial.base, partial.p, partial.c4p, partial.n) {
            (Some(base), Some(p), Some(c4p), Some(n)) => complete.push(ResidueAtoms::new(base, p, c4p, n)),
            _ => dropped += 1,
        }
    }
    if complete.is_empty() {
        return Err(Error::parse(
            lines_read,
            format!("no complete RNA residues found ({dropped} incomplete) in {lines_read} lines"),
        ));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} residues missing P, C4' or N1/N9");
    }
    let structure = BackboneStructure::new(complete, chain.unwrap_or('A').to_string(), source)?;
    Ok(ParsedBackbone { structure, dropped })
}
