//! Passenger-flow prediction over a city grid and package routing on taxis
//! that carry parcels alongside passenger orders.

pub mod demand;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod planners;
pub mod route;
pub mod sim;

pub use demand::{
    aveprob_tensor, build_demand_tensor, fit_circular_gaussian, gaussian_box_integral, CircularFit, DemandTensor,
    Diagnostics, FlowModel, OrderRecord,
};
pub use error::{Error, Result};
pub use experiment::{Experiment, Fleet, RunSpec, Sweep};
pub use grid::{
    block_of, build_travel_matrix, slot_add, slot_of, BlockId, GridSpec, SlotId, TravelSource, TravelTimeMatrix,
};
pub use io::{
    generate_synthetic_orders, load_model, load_orders, save_model, DayFilter, ModelBundle, ResultsRow,
    ResultsTable, SynthCitySpec,
};
pub use planners::{
    apply_decision, baseline_step, candidate_set, hsp_step, psp_step, DeliveryState, DeliveryStatus,
    PassengerOrder, PlannerDecision, Policy,
};
pub use route::{dop, route_probability, Leg, PackageRequest, Route, RoutePlanner};
pub use sim::{compute_metrics, generate_packages, match_taxi, run_simulation, SimConfig, SimInputs, SimMetrics, TaxiState};
