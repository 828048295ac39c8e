//! Retrieval metrics, entropy and intervention diagnostics.

mod causal;
mod entropy;
mod proxy;
mod retrieval;

pub use causal::{ate_from_interventions, energy_distance, estimate_ate, marginal_match, AteReport};
pub use entropy::{
    conditional_entropy, entropy_bits, random_disjoint_joint, verify_theorem1, DiscreteJoint, Theorem1Report,
    Variable, PREMISE_TOLERANCE, SLACK_TOLERANCE,
};
pub use proxy::{
    entropy_proxy, entropy_proxy_from_discriminator, proxy_from_probabilities, refit_probabilities, EntropyProxy,
    RefitConfig,
};
pub use retrieval::{cmc_map, RetrievalResult, RetrievalSummary};
