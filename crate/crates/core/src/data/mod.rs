//! Synthetic images with a planted discriminative glyph and a planted confound
//! glyph, the on-disk format, and the pair / quadruplet samplers.

mod augment;
mod format;
mod generate;
mod sampler;

pub use augment::{augment, AugmentOptions};
pub use format::{read_split, split_from_bytes, split_to_bytes, write_split, FORMAT_VERSION, MAGIC};
pub use generate::{
    confound_oracle_accuracy, generate_dataset, glyph, mutual_information, Dataset, DatasetSpec, GlyphKind,
};
pub use sampler::{ClassIndex, Quadruplet, Triplet};

use crate::autograd::Tensor;

/// Where the two glyphs of one image were planted, in feature-grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Record {
    pub label: usize,
    pub confound: usize,
    /// Discriminative glyph cell (column, row).
    pub disc: (usize, usize),
    /// Confound glyph cell (column, row).
    pub conf: (usize, usize),
}

/// One split: square images plus their records.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub size: usize,
    pub num_classes: usize,
    pub num_confounds: usize,
    pub images: Vec<Tensor>,
    pub records: Vec<Record>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// The sub-split made of `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Split {
        Split {
            size: self.size,
            num_classes: self.num_classes,
            num_confounds: self.num_confounds,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            records: indices.iter().map(|&i| self.records[i]).collect(),
        }
    }
}
