//! Parameter accounting, receptive fields, gridding scores and layer tables.

pub mod gridding;
pub mod params;
pub mod rf;
pub mod summary;

pub use gridding::{gridding_diagnostic, gridding_score, stage_module_block, GridBlock, GridReport};
pub use params::{count_ids, count_network, count_params, symbolic_param_count, Convention, ModuleFormula, ParamReport, ParamRow};
pub use rf::{receptive_field, receptive_field_rows, rf_of_steps, RfReport, RfRow, RfState};
pub use summary::{summarize, Summary, SummaryRow};
