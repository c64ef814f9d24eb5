//! 2-D projections of embedded responses for visual inspection.

mod pca;
mod tsne;

use serde::{Deserialize, Serialize};

pub use pca::pca_2d;
pub use tsne::{affinities, tsne_2d, Affinities, TsneParams, TsneReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "pca" => Ok(Self::Pca),
            "tsne" => Ok(Self::Tsne),
            other => Err(crate::Error::Invalid(format!("unknown projection method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ProjectionParams {
    Pca {
        /// Variance captured by each of the two components.
        explained_variance: [f64; 2],
    },
    Tsne(TsneReport),
}

/// Points are aligned with the input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<[f64; 2]>,
    pub method: ProjectionMethod,
    pub params: ProjectionParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}
