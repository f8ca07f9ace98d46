pub mod eval;
pub mod gradcheck;
pub mod overlay;
pub mod predict;
pub mod synth;
pub mod train;

use std::path::Path;

use voxseg::nn::{Model, ModelConfig, Variant};
use voxseg::train::Checkpoint;

use crate::failure::{CmdResult, Context, Failure};

/// Load a checkpoint's model, rejecting one whose architecture differs from
/// the requested variant or config.
pub fn load_model(
    path: &Path,
    arch: Option<Variant>,
    expected: Option<&ModelConfig>,
) -> CmdResult<Model> {
    let ck = Checkpoint::load(path).context(format!("checkpoint {}", path.display()))?;
    let found = ck.model.config();
    if let Some(a) = arch {
        if a != found.variant {
            return Err(Failure::architecture(format!(
                "architecture mismatch: --arch {a} but {} holds a {} model",
                path.display(),
                found.variant
            )));
        }
    }
    if let Some(want) = expected {
        if want != found {
            return Err(Failure::architecture(format!(
                "architecture mismatch: config model {want:?} but {} holds {found:?}",
                path.display()
            )));
        }
    }
    Ok(ck.model)
}
