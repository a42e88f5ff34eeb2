//! Order files, synthetic cities, the model container and results tables.

pub mod model;
pub mod orders;
pub mod results;
pub mod synth;

pub use model::{load_model, save_model, ModelBundle};
pub use orders::{load_orders, load_orders_with, DayFilter, LoadOptions, LoadedOrders};
pub use results::{emit_results, ResultsRow, ResultsTable};
pub use synth::{generate_synthetic_orders, OdComponent, SynthCitySpec};
