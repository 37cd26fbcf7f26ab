#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "coefficients.hpp"
#include "errors.hpp"
#include "roughpath.hpp"
#include "rsde.hpp"
#include "test_functions.hpp"

namespace roughfilter {

// Pointwise kernels. p holds the coefficients at (t, x, Y_t), ydot the bracket
// derivative at t (dy x dy), jet the test function at x.

// abar = sigma sigma^T + f [Ydot] f^T  (dx x dx)
inline void effective_diffusion(const CoeffPoint& p, std::span<const double> ydot, std::size_t dx,
                                std::size_t dy, std::size_t db, std::span<double> out) {
  for (std::size_t i = 0; i < dx; ++i)
    for (std::size_t j = 0; j < dx; ++j) {
      double a = 0.0;
      for (std::size_t q = 0; q < db; ++q) a += p.diffusion[i * db + q] * p.diffusion[j * db + q];
      for (std::size_t k = 0; k < dy; ++k)
        for (std::size_t l = 0; l < dy; ++l)
          a += p.driver_field[i * dy + k] * ydot[k * dy + l] * p.driver_field[j * dy + l];
      out[i * dx + j] = a;
    }
}

// bbar = b + f [Ydot] h^T  (dx)
inline void effective_drift(const CoeffPoint& p, std::span<const double> ydot, std::size_t dx,
                            std::size_t dy, std::span<double> out) {
  for (std::size_t i = 0; i < dx; ++i) {
    double b = p.drift[i];
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) b += p.driver_field[i * dy + k] * ydot[k * dy + l] * p.obs_field[l];
    out[i] = b;
  }
}

// A phi = bbar . D phi + 1/2 abar : D^2 phi + c phi (c is zero unless a weight drift is present).
inline double operator_A(const CoeffPoint& p, std::span<const double> ydot, const Jet& jet,
                         std::size_t dx, std::size_t dy, std::size_t db) {
  double out = p.weight_drift * jet.value;
  for (std::size_t i = 0; i < dx; ++i) {
    double b = p.drift[i];
    for (std::size_t k = 0; k < dy; ++k)
      for (std::size_t l = 0; l < dy; ++l) b += p.driver_field[i * dy + k] * ydot[k * dy + l] * p.obs_field[l];
    out += b * jet.grad[i];
  }
  for (std::size_t i = 0; i < dx; ++i)
    for (std::size_t j = 0; j < dx; ++j) {
      const double hij = jet.hess[i * dx + j];
      if (hij == 0.0) continue;
      double a = 0.0;
      for (std::size_t q = 0; q < db; ++q) a += p.diffusion[i * db + q] * p.diffusion[j * db + q];
      for (std::size_t k = 0; k < dy; ++k)
        for (std::size_t l = 0; l < dy; ++l)
          a += p.driver_field[i * dy + k] * ydot[k * dy + l] * p.driver_field[j * dy + l];
      out += 0.5 * a * hij;
    }
  return out;
}

// (Gamma phi)_k = f_k . D phi + h_k phi
inline void operator_Gamma(const CoeffPoint& p, const Jet& jet, std::size_t dx, std::size_t dy,
                           std::span<double> out) {
  for (std::size_t k = 0; k < dy; ++k) {
    double g = p.obs_field[k] * jet.value;
    for (std::size_t i = 0; i < dx; ++i) g += p.driver_field[i * dy + k] * jet.grad[i];
    out[k] = g;
  }
}

// (Gamma' phi)_{kl} = f'_{kl} . D phi + h'_{kl} phi
inline void operator_Gamma_prime(const CoeffPoint& p, const Jet& jet, std::size_t dx, std::size_t dy,
                                 std::span<double> out) {
  for (std::size_t k = 0; k < dy; ++k)
    for (std::size_t l = 0; l < dy; ++l) {
      double g = p.obs_field_dy[k * dy + l] * jet.value;
      for (std::size_t i = 0; i < dx; ++i) g += p.driver_field_dy[(i * dy + k) * dy + l] * jet.grad[i];
      out[k * dy + l] = g;
    }
}

// G_{kl} = Gamma_k Gamma_l phi + Gamma'_{lk} phi, the coefficient paired with YY^{kl}.
inline void operator_second_order(const CoeffPoint& p, const Jet& jet, std::size_t dx,
                                  std::size_t dy, std::span<double> out) {
  for (std::size_t l = 0; l < dy; ++l) {
    // inner_l = f_l . D phi + h_l phi
    double inner = p.obs_field[l] * jet.value;
    for (std::size_t j = 0; j < dx; ++j) inner += p.driver_field[j * dy + l] * jet.grad[j];
    for (std::size_t k = 0; k < dy; ++k) {
      double g = p.obs_field[k] * inner;
      for (std::size_t i = 0; i < dx; ++i) {
        // d_i inner_l
        double di = p.obs_field_dx[l * dx + i] * jet.value + p.obs_field[l] * jet.grad[i];
        for (std::size_t j = 0; j < dx; ++j)
          di += p.driver_field_dx[(j * dy + l) * dx + i] * jet.grad[j] +
                p.driver_field[j * dy + l] * jet.hess[i * dx + j];
        g += p.driver_field[i * dy + k] * di;
      }
      double prime = p.obs_field_dy[l * dy + k] * jet.value;
      for (std::size_t i = 0; i < dx; ++i) prime += p.driver_field_dy[(i * dy + l) * dy + k] * jet.grad[i];
      out[k * dy + l] = g + prime;
    }
  }
}

// Coefficients and driver bundled for node-indexed operator evaluation.
class OperatorContext {
 public:
  OperatorContext(CoefficientSet coeffs, std::shared_ptr<const RoughPath> rp)
      : coeffs_(std::move(coeffs)), rp_(std::move(rp)), ydot_(bracket_derivative(*rp_)) {
    check_dimensions(coeffs_, *rp_);
  }
  OperatorContext(const CoefficientSet& coeffs, const RoughPath& rp)
      : OperatorContext(coeffs, std::make_shared<const RoughPath>(rp)) {}

  const CoefficientSet& coeffs() const { return coeffs_; }
  const RoughPath& driver() const { return *rp_; }
  std::shared_ptr<const RoughPath> driver_ptr() const { return rp_; }
  const BracketDerivative& ydot() const { return ydot_; }

  CoeffPoint at(std::size_t i, std::span<const double> x) const {
    if (i > rp_->steps()) throw InputError("time index beyond grid");
    if (x.size() != coeffs_.dx) throw InputError("point has wrong dimension");
    CoeffPoint p;
    coeffs_.evaluate(rp_->grid().node(i), x, rp_->value(i), p);
    return p;
  }

 private:
  CoefficientSet coeffs_;
  std::shared_ptr<const RoughPath> rp_;
  BracketDerivative ydot_;
};

inline Jet jet_of(const TestFunction& phi, std::span<const double> x) {
  if (!phi.value || !phi.gradient || !phi.hessian)
    throw CapabilityError("test function '" + phi.name + "' lacks analytic derivatives");
  Jet j;
  j.evaluate(phi, x);
  return j;
}

inline double apply_A(const OperatorContext& ctx, std::size_t i, const TestFunction& phi,
                      std::span<const double> x) {
  const auto p = ctx.at(i, x);
  const auto& c = ctx.coeffs();
  return operator_A(p, ctx.ydot().at_node(i), jet_of(phi, x), c.dx, c.dy, c.db);
}

inline std::vector<double> apply_Gamma(const OperatorContext& ctx, std::size_t i,
                                       const TestFunction& phi, std::span<const double> x) {
  const auto p = ctx.at(i, x);
  std::vector<double> out(ctx.coeffs().dy);
  operator_Gamma(p, jet_of(phi, x), ctx.coeffs().dx, ctx.coeffs().dy, out);
  return out;
}

inline std::vector<double> apply_Gamma_prime(const OperatorContext& ctx, std::size_t i,
                                             const TestFunction& phi, std::span<const double> x) {
  const auto p = ctx.at(i, x);
  const std::size_t dy = ctx.coeffs().dy;
  std::vector<double> out(dy * dy);
  operator_Gamma_prime(p, jet_of(phi, x), ctx.coeffs().dx, dy, out);
  return out;
}

inline std::vector<double> gamma_second_order(const OperatorContext& ctx, std::size_t i,
                                              const TestFunction& phi, std::span<const double> x) {
  const auto p = ctx.at(i, x);
  const std::size_t dy = ctx.coeffs().dy;
  std::vector<double> out(dy * dy);
  operator_second_order(p, jet_of(phi, x), ctx.coeffs().dx, dy, out);
  return out;
}

inline std::vector<double> effective_diffusion(const OperatorContext& ctx, std::size_t i,
                                               std::span<const double> x) {
  const auto p = ctx.at(i, x);
  const auto& c = ctx.coeffs();
  std::vector<double> out(c.dx * c.dx);
  effective_diffusion(p, ctx.ydot().at_node(i), c.dx, c.dy, c.db, out);
  return out;
}

}  // namespace roughfilter
