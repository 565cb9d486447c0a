//! A small SMILES parser producing heavy-atom graphs, plus the graph
//! descriptors that can be computed without atom typing.

use std::collections::HashMap;

use super::DescriptorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence contribution in half-units (aromatic counts as 1.5).
    fn half_units(self) -> u32 {
        match self {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: String,
    pub aromatic: bool,
    pub formal_charge: i32,
    pub explicit_h: u32,
    /// Written inside `[...]`; such atoms never receive implicit hydrogens.
    pub bracket: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub implicit_h: Vec<u32>,
}

/// Standard atomic weights (amu) for every element the parser accepts.
pub fn atomic_mass(element: &str) -> Option<f64> {
    Some(match element {
        "H" => 1.008,
        "Li" => 6.94,
        "B" => 10.811,
        "C" => 12.011,
        "N" => 14.007,
        "O" => 15.999,
        "F" => 18.998,
        "Na" => 22.990,
        "Mg" => 24.305,
        "Al" => 26.982,
        "Si" => 28.086,
        "P" => 30.974,
        "S" => 32.065,
        "Cl" => 35.453,
        "K" => 39.098,
        "Ca" => 40.078,
        "Fe" => 55.845,
        "Cu" => 63.546,
        "Zn" => 65.38,
        "As" => 74.922,
        "Se" => 78.971,
        "Br" => 79.904,
        "Sn" => 118.71,
        "I" => 126.904,
        _ => return None,
    })
}

fn default_valence(element: &str) -> Option<u32> {
    Some(match element {
        "B" => 3,
        "C" => 4,
        "N" => 3,
        "O" => 2,
        "P" => 3,
        "S" => 2,
        "F" | "Cl" | "Br" | "I" => 1,
        _ => return None,
    })
}

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    src: &'a str,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl Into<String>) -> DescriptorError {
        DescriptorError::ParseError {
            smiles: self.src.to_string(),
            position: self.pos,
            message: msg.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn organic_atom(&mut self) -> Result<Option<Atom>, DescriptorError> {
        let c = match self.peek() {
            Some(c) => c,
            None => return Ok(None),
        };
        let next = self.chars.get(self.pos + 1).copied();
        let (element, aromatic, width) = match (c, next) {
            ('C', Some('l')) => ("Cl", false, 2),
            ('B', Some('r')) => ("Br", false, 2),
            ('B', _) => ("B", false, 1),
            ('C', _) => ("C", false, 1),
            ('N', _) => ("N", false, 1),
            ('O', _) => ("O", false, 1),
            ('P', _) => ("P", false, 1),
            ('S', _) => ("S", false, 1),
            ('F', _) => ("F", false, 1),
            ('I', _) => ("I", false, 1),
            ('b', _) => ("B", true, 1),
            ('c', _) => ("C", true, 1),
            ('n', _) => ("N", true, 1),
            ('o', _) => ("O", true, 1),
            ('p', _) => ("P", true, 1),
            ('s', _) => ("S", true, 1),
            _ => return Ok(None),
        };
        self.pos += width;
        Ok(Some(Atom {
            element: element.into(),
            aromatic,
            formal_charge: 0,
            explicit_h: 0,
            bracket: false,
        }))
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            self.chars[start..self.pos].iter().collect::<String>().parse().ok()
        }
    }

    fn bracket_atom(&mut self) -> Result<Atom, DescriptorError> {
        // at '['
        self.pos += 1;
        let _isotope = self.number();
        let first = self.peek().ok_or_else(|| self.err("unterminated bracket atom"))?;
        if !first.is_ascii_alphabetic() {
            return Err(self.err("expected element symbol"));
        }
        self.pos += 1;
        let aromatic = first.is_ascii_lowercase();
        let mut symbol = first.to_ascii_uppercase().to_string();
        if let Some(c2) = self.peek() {
            if c2.is_ascii_lowercase() {
                let two = format!("{symbol}{c2}");
                let aromatic_two = aromatic && matches!(two.as_str(), "Se" | "As");
                if !aromatic || aromatic_two {
                    symbol = two;
                    self.pos += 1;
                }
            }
        }
        if atomic_mass(&symbol).is_none() {
            return Err(DescriptorError::UnsupportedAtom(symbol));
        }
        while self.peek() == Some('@') {
            self.pos += 1;
        }
        let mut explicit_h = 0;
        if self.peek() == Some('H') {
            self.pos += 1;
            explicit_h = self.number().unwrap_or(1);
        }
        let mut charge = 0i32;
        while let Some(c) = self.peek() {
            let sign = match c {
                '+' => 1,
                '-' => -1,
                _ => break,
            };
            self.pos += 1;
            match self.number() {
                Some(n) => charge += sign * n as i32,
                None => charge += sign,
            }
        }
        if self.peek() == Some(':') {
            self.pos += 1;
            self.number().ok_or_else(|| self.err("expected atom class"))?;
        }
        if self.peek() != Some(']') {
            return Err(self.err("unbalanced bracket"));
        }
        self.pos += 1;
        Ok(Atom {
            element: symbol,
            aromatic,
            formal_charge: charge,
            explicit_h,
            bracket: true,
        })
    }
}

/// Parses a SMILES string. Stereo marks (`@`, `/`, `\`) are accepted and
/// ignored.
pub fn parse_graph(smiles: &str) -> Result<MolGraph, DescriptorError> {
    let mut p = Parser {
        chars: smiles.chars().collect(),
        pos: 0,
        src: smiles,
    };
    if p.chars.is_empty() {
        return Err(p.err("empty SMILES"));
    }
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds: Vec<Bond> = Vec::new();
    let mut branch_stack: Vec<Option<usize>> = Vec::new();
    let mut ring_open: HashMap<u32, (usize, Option<BondOrder>)> = HashMap::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<BondOrder> = None;

    let default_order = |atoms: &[Atom], a: usize, b: usize| {
        if atoms[a].aromatic && atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    };

    while let Some(c) = p.peek() {
        match c {
            '(' => {
                if prev.is_none() {
                    return Err(p.err("branch without a preceding atom"));
                }
                branch_stack.push(prev);
                p.pos += 1;
            }
            ')' => {
                prev = branch_stack.pop().ok_or_else(|| p.err("unbalanced parenthesis"))?;
                p.pos += 1;
            }
            '-' | '/' | '\\' => {
                pending = Some(BondOrder::Single);
                p.pos += 1;
            }
            '=' => {
                pending = Some(BondOrder::Double);
                p.pos += 1;
            }
            '#' => {
                pending = Some(BondOrder::Triple);
                p.pos += 1;
            }
            ':' => {
                pending = Some(BondOrder::Aromatic);
                p.pos += 1;
            }
            '.' => {
                prev = None;
                pending = None;
                p.pos += 1;
            }
            '%' | '0'..='9' => {
                let label = if c == '%' {
                    let d: String = p.chars.get(p.pos + 1..p.pos + 3).unwrap_or(&[]).iter().collect();
                    if d.len() != 2 || !d.chars().all(|c| c.is_ascii_digit()) {
                        return Err(p.err("expected two digits after %"));
                    }
                    p.pos += 3;
                    d.parse::<u32>().unwrap_or_default()
                } else {
                    p.pos += 1;
                    c.to_digit(10).unwrap_or_default()
                };
                let here = prev.ok_or_else(|| p.err("ring closure without atom"))?;
                match ring_open.remove(&label) {
                    Some((other, open_order)) => {
                        let order = pending
                            .or(open_order)
                            .unwrap_or_else(|| default_order(&atoms, other, here));
                        bonds.push(Bond {
                            a: other,
                            b: here,
                            order,
                        });
                    }
                    None => {
                        ring_open.insert(label, (here, pending));
                    }
                }
                pending = None;
            }
            '[' => {
                let atom = p.bracket_atom()?;
                push_atom(&mut atoms, &mut bonds, atom, &mut prev, &mut pending, default_order);
            }
            _ => match p.organic_atom()? {
                Some(atom) => push_atom(&mut atoms, &mut bonds, atom, &mut prev, &mut pending, default_order),
                None => {
                    if c.is_ascii_alphabetic() {
                        return Err(DescriptorError::UnsupportedAtom(c.to_string()));
                    }
                    return Err(p.err(format!("unexpected character {c:?}")));
                }
            },
        }
    }
    if !branch_stack.is_empty() {
        return Err(p.err("unbalanced parenthesis"));
    }
    if !ring_open.is_empty() {
        return Err(p.err("unpaired ring closure"));
    }
    if pending.is_some() {
        return Err(p.err("dangling bond"));
    }
    let implicit_h = implicit_hydrogens(&atoms, &bonds);
    Ok(MolGraph {
        atoms,
        bonds,
        implicit_h,
    })
}

fn push_atom(
    atoms: &mut Vec<Atom>,
    bonds: &mut Vec<Bond>,
    atom: Atom,
    prev: &mut Option<usize>,
    pending: &mut Option<BondOrder>,
    default_order: impl Fn(&[Atom], usize, usize) -> BondOrder,
) {
    let idx = atoms.len();
    atoms.push(atom);
    if let Some(p) = *prev {
        let order = pending.take().unwrap_or_else(|| default_order(atoms, p, idx));
        bonds.push(Bond { a: p, b: idx, order });
    }
    *pending = None;
    *prev = Some(idx);
}

fn implicit_hydrogens(atoms: &[Atom], bonds: &[Bond]) -> Vec<u32> {
    let mut half = vec![0u32; atoms.len()];
    for b in bonds {
        half[b.a] += b.order.half_units();
        half[b.b] += b.order.half_units();
    }
    atoms
        .iter()
        .zip(half)
        .map(|(atom, h2)| {
            if atom.bracket {
                return 0;
            }
            let valence = default_valence(&atom.element).unwrap_or(0);
            valence.saturating_sub(h2 / 2).saturating_sub(atom.explicit_h)
        })
        .collect()
}

impl MolGraph {
    pub fn total_hydrogens(&self) -> u32 {
        self.atoms.iter().map(|a| a.explicit_h).sum::<u32>() + self.implicit_h.iter().sum::<u32>()
    }

    /// Number of connected components of the subgraph induced by `edges`
    /// over `nodes`.
    fn components(n_nodes: usize, nodes: &[bool], edges: &[(usize, usize)]) -> usize {
        let mut parent: Vec<usize> = (0..n_nodes).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        (0..n_nodes).filter(|&i| nodes[i] && find(&mut parent, i) == i).count()
    }

    pub fn cycle_rank(&self) -> usize {
        let edges: Vec<(usize, usize)> = self.bonds.iter().map(|b| (b.a, b.b)).collect();
        let all = vec![true; self.atoms.len()];
        let comps = Self::components(self.atoms.len(), &all, &edges);
        (edges.len() + comps) - self.atoms.len()
    }

    fn aromatic_cycle_rank(&self) -> usize {
        let edges: Vec<(usize, usize)> = self
            .bonds
            .iter()
            .filter(|b| b.order == BondOrder::Aromatic)
            .map(|b| (b.a, b.b))
            .collect();
        let mut nodes = vec![false; self.atoms.len()];
        for &(a, b) in &edges {
            nodes[a] = true;
            nodes[b] = true;
        }
        let n = nodes.iter().filter(|&&x| x).count();
        let comps = Self::components(self.atoms.len(), &nodes, &edges);
        (edges.len() + comps) - n
    }
}

/// Molecular weight: heavy-atom masses plus 1.008 per hydrogen.
pub fn mol_weight(g: &MolGraph) -> f64 {
    let heavy: f64 = g
        .atoms
        .iter()
        .map(|a| atomic_mass(&a.element).unwrap_or(0.0))
        .sum();
    heavy + 1.008 * g.total_hydrogens() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphCounts {
    pub ring_count: usize,
    pub aromatic_ring_count: usize,
    pub heteroatoms: usize,
    pub h_acceptors: usize,
}

pub fn graph_counts(g: &MolGraph) -> GraphCounts {
    GraphCounts {
        ring_count: g.cycle_rank(),
        aromatic_ring_count: g.aromatic_cycle_rank(),
        heteroatoms: g.atoms.iter().filter(|a| a.element != "C" && a.element != "H").count(),
        h_acceptors: g.atoms.iter().filter(|a| a.element == "N" || a.element == "O").count(),
    }
}

/// Names of descriptors this module computes from the graph.
pub const NATIVE_DESCRIPTORS: [&str; 5] = [
    "MolWt",
    "RingCount",
    "NumAromaticRings",
    "NumHeteroatoms",
    "NumHAcceptors",
];

/// Computes one named descriptor natively. Descriptors that require atom
/// typing (MolLogP, TPSA, PEOE_VSA6, ...) must be ingested from CSV.
pub fn native_descriptor(name: &str, g: &MolGraph) -> Result<f64, DescriptorError> {
    let c = graph_counts(g);
    Ok(match name {
        "MolWt" => mol_weight(g),
        "RingCount" => c.ring_count as f64,
        "NumAromaticRings" => c.aromatic_ring_count as f64,
        "NumHeteroatoms" => c.heteroatoms as f64,
        "NumHAcceptors" => c.h_acceptors as f64,
        other => return Err(DescriptorError::UnsupportedDescriptor(other.to_string())),
    })
}
