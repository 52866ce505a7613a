//! Diagnostics: first-order loss prediction, worst-case perturbations,
//! gradient-norm statistics, KL gaps, concentration of the noise norm,
//! noise histograms, decision cross sections and a small-dimension oracle
//! for the worst-case second-order term.

mod concentration;
mod cross_section;
mod perturbation;
mod second_order;
mod stats;

pub use concentration::{hoeffding_interval, monte_carlo_norm_check, ConcentrationReport, HoeffdingBounds};
pub use cross_section::{decision_cross_section, CrossSection, CrossSectionOptions};
pub use perturbation::{
    first_order_report, first_order_report_fn, grad_norm_stats, kl_fp_vs_quantized, noise_response, quantization_noise,
    uniform_noise, worst_case_perturbation, FirstOrderReport, GradNorms, NoiseResponse,
};
pub use second_order::{box_sampling_max, lp_ball_inclusion_check, second_order_vertex_oracle, SymMatrix, VertexMax};
pub use stats::{ks_uniform, noise_histogram, pearson, scaled_weight_noise, NoiseHistogram};
