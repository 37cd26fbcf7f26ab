#pragma once

namespace roughfilter {

// Every numeric threshold used by checks and diagnostics lives here.
struct Tolerances {
  double chen_residual = 1e-10;
  double bracket_identity = 1e-10;
  double bracket_symmetry = 1e-12;
  double derivative_check_rel = 1e-6;
  double derivative_fd_step = 1e-5;
  double mass_floor = 1e-12;
  double blowup_state = 1e8;
  double blowup_weight = 1e12;
  double penrose_identity = 1e-8;
  double svd_relative_threshold = 1e-10;
  double psd_tolerance = 1e-10;
  double noise_multiple = 3.0;  // residual must exceed this many noise floors to be fitted
  double box_exit_fraction = 0.01;
  double box_half_width_std = 5.0;
  double randomization_allowance = 5e-3;
  double kalman_allowance = 1e-2;
  double degenerate_scheme = 3e-3;
  double total_mass_relative = 5e-2;
  double exponential_relative = 5e-2;
  double closed_form_relative = 2e-2;
  int min_ito_refine = 16;
  int min_fit_scales = 3;
};

inline const Tolerances& default_tolerances() {
  static const Tolerances tol{};
  return tol;
}

}  // namespace roughfilter
