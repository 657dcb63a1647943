//! Simulation, training and conformance evaluation for type-1-diabetes
//! blood-glucose dynamics.
//!
//! The pipeline runs from raw device events to evaluated predictors:
//!
//! * [`ingest`] — parse pump/CGM event streams and build uniform 5-minute
//!   glucose grids with event-label channels.
//! * [`hovorka`] — compartmental ODE simulator used as the mathematical
//!   baseline predictor, the source of theoretical activity curves, and the
//!   generative engine behind the synthetic benchmark.
//! * [`features`] — 4-hour feature windows (glucose, insulin, carbs, IOB/COB,
//!   demographics) with chronological splits.
//! * [`models`] — trainable predictors (sign-constrained hybrid, dilated
//!   recurrent network) with the glucose-specific MSE objective and a
//!   reverse-mode gradient core.
//! * [`analysis`] — gradient-based attribution, impact curves, dynamic time
//!   warping, and the rank-test battery.
//! * [`augment`] — interquartile day filtering and simulator-guided meal
//!   relabelling.
//! * [`bench`] — synthetic patient generation with controllable confounders,
//!   scenario-sliced evaluation, and experiment orchestration.

pub mod analysis;
pub mod augment;
pub mod bench;
pub mod features;
pub mod hovorka;
pub mod ingest;
pub mod models;
pub mod seeds;
