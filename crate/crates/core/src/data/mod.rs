//! Labeled datasets: the synthetic generator, IDX ingestion, standardization
//! and Dirichlet label-skew partitioning.

mod dataset;
mod idx;
mod partition;
mod synthetic;

pub use dataset::{normalize, Dataset, FeatureStats, STD_FLOOR};
pub use idx::{load_idx_dataset, parse_idx, IDX_U8};
pub use partition::{dirichlet_partition, Partition, MAX_PARTITION_ATTEMPTS};
pub use synthetic::{generate_synthetic, SYNTHETIC_RADIUS};
