//! Image-classification head toolkit: two toy feature branches fused and
//! reduced by PCA, a batch-normalised MLP trained with adaptive optimisers,
//! evaluation metrics, and LIME/SHAP explanations.

pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod io;
pub mod mlp;
pub mod numeric;
pub mod optim;
pub mod pca;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use numeric::{Matrix, RandomStream};
