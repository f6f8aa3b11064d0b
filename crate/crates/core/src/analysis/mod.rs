//! Verification and claim-checking tools.

mod flops;
mod gradcheck;
mod histogram;
pub mod probe;

pub use flops::{count_routing_flops, FlopQuery, FlopReport, RoutingMode};
pub use gradcheck::{
    gradcheck, loss_frozen, GradcheckOptions, GradcheckReport, GroupStats, REL_ERR_FLOOR,
};
pub use histogram::{
    activation_histograms, jensen_shannon, mean_pairwise_jsd, ActivationHistogram,
};
pub use probe::{encoder_features, linear_probe, pixel_features, LabeledFeatures, ProbeResult};
