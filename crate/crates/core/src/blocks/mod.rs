//! MB-blocks with lite residual branches, assembled into a backbone.

mod arch;
mod calibrate;
mod ctx;
mod model;

pub use arch::*;
pub use calibrate::calibrate_norms;
pub use ctx::{Ctx, Exec, WS_EPS};
pub use model::{build_backbone, build_block, closed_form_param_count, ConvUnit, Head, InitStrategy, LiteBranch, MbBlock, Model, NormUnit};
