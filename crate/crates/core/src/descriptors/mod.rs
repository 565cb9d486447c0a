//! Molecular graphs, native graph descriptors, and descriptor selection.

mod graph;
mod selection;

pub use graph::{
    atomic_mass, graph_counts, mol_weight, native_descriptor, parse_graph, Atom, Bond, BondOrder, GraphCounts,
    MolGraph, NATIVE_DESCRIPTORS,
};
pub use selection::{
    noise_scale, noisy_descriptor, outlier_free_rows, pearson, select_descriptors, variance_filter, ColumnSource,
    DescriptorMatrix, SelectionEntry, SelectionReport, NOISE_MATCH_TOLERANCE,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("cannot parse {smiles:?} at position {position}: {message}")]
    ParseError {
        smiles: String,
        position: usize,
        message: String,
    },
    #[error("unsupported atom {0:?}")]
    UnsupportedAtom(String),
    #[error("descriptor {0:?} cannot be computed natively; ingest it from CSV")]
    UnsupportedDescriptor(String),
    #[error("every column was removed")]
    EmptySelection,
    #[error("constant column")]
    DegenerateColumn,
    #[error("cannot reach correlation {r_target} from {r}")]
    InvalidTargetCorrelation { r: f64, r_target: f64 },
    #[error("shape error: {0}")]
    Shape(String),
}
