#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "reduce.hpp"
#include "tolerances.hpp"

namespace roughfilter {

struct TimeGrid {
  double horizon = 1.0;
  std::size_t steps = 1;

  TimeGrid() = default;
  TimeGrid(double T, std::size_t N) : horizon(T), steps(N) {
    if (!(T > 0.0) || !std::isfinite(T)) throw InputError("time grid horizon must be positive");
    if (N < 1) throw InputError("time grid needs at least one step");
  }
  double dt() const { return horizon / static_cast<double>(steps); }
  double node(std::size_t i) const {
    return horizon * static_cast<double>(i) / static_cast<double>(steps);
  }
  std::size_t nodes() const { return steps + 1; }
  bool operator==(const TimeGrid&) const = default;
};

enum class LiftKind { piecewise_linear, ito, geometrified, area_shifted, file, custom };

inline std::string to_string(LiftKind k) {
  switch (k) {
    case LiftKind::piecewise_linear: return "piecewise_linear";
    case LiftKind::ito: return "ito";
    case LiftKind::geometrified: return "geometrified";
    case LiftKind::area_shifted: return "area_shifted";
    case LiftKind::file: return "file";
    case LiftKind::custom: return "custom";
  }
  return "custom";
}

inline LiftKind lift_kind_from_string(const std::string& s) {
  for (auto k : {LiftKind::piecewise_linear, LiftKind::ito, LiftKind::geometrified,
                 LiftKind::area_shifted, LiftKind::file, LiftKind::custom})
    if (to_string(k) == s) return k;
  throw InputError("unknown lift kind '" + s + "'");
}

// Level-2 rough path on a uniform grid. First level per node, second level and
// bracket increment per step; longer increments come from chen_extend.
class RoughPath {
 public:
  RoughPath() = default;
  RoughPath(TimeGrid grid, std::size_t dim, std::vector<double> first, std::vector<double> second,
            std::vector<double> bracket, double alpha, LiftKind kind = LiftKind::custom,
            std::optional<std::uint64_t> seed = std::nullopt)
      : grid_(grid),
        dim_(dim),
        first_(std::move(first)),
        second_(std::move(second)),
        bracket_(std::move(bracket)),
        alpha_(alpha),
        kind_(kind),
        seed_(seed) {
    if (dim_ == 0) throw InputError("rough path dimension must be positive");
    if (first_.size() != grid_.nodes() * dim_)
      throw InputError("first level has " + std::to_string(first_.size()) + " entries, expected " +
                       std::to_string(grid_.nodes() * dim_));
    const std::size_t per_step = grid_.steps * dim_ * dim_;
    if (second_.size() != per_step || bracket_.size() != per_step)
      throw InputError("second level / bracket sizes do not match grid");
    if (!(alpha_ > 1.0 / 3.0 && alpha_ <= 0.5))
      throw InputError("alpha must lie in (1/3, 1/2]");
  }

  const TimeGrid& grid() const { return grid_; }
  std::size_t dim() const { return dim_; }
  std::size_t steps() const { return grid_.steps; }
  double alpha() const { return alpha_; }
  LiftKind kind() const { return kind_; }
  std::optional<std::uint64_t> seed() const { return seed_; }

  std::span<const double> value(std::size_t i) const {
    return std::span<const double>(first_).subspan(i * dim_, dim_);
  }
  std::span<const double> second(std::size_t i) const {
    return std::span<const double>(second_).subspan(i * dim_ * dim_, dim_ * dim_);
  }
  std::span<const double> bracket(std::size_t i) const {
    return std::span<const double>(bracket_).subspan(i * dim_ * dim_, dim_ * dim_);
  }
  double increment(std::size_t i, std::size_t k) const {
    return first_[(i + 1) * dim_ + k] - first_[i * dim_ + k];
  }

  const std::vector<double>& first_level() const { return first_; }
  const std::vector<double>& second_level() const { return second_; }
  const std::vector<double>& bracket_increments() const { return bracket_; }

 private:
  TimeGrid grid_{};
  std::size_t dim_ = 0;
  std::vector<double> first_;
  std::vector<double> second_;
  std::vector<double> bracket_;
  double alpha_ = 0.5;
  LiftKind kind_ = LiftKind::custom;
  std::optional<std::uint64_t> seed_;
};

// [Y-dot]_i = bracket_i / dt, piecewise constant per step.
struct BracketDerivative {
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> at_step(std::size_t i) const {
    return std::span<const double>(values).subspan(i * dim * dim, dim * dim);
  }
  // Node i uses the step starting at i; the terminal node reuses the last step.
  std::span<const double> at_node(std::size_t i) const {
    const std::size_t steps = values.size() / (dim * dim);
    return at_step(std::min(i, steps - 1));
  }
};

inline BracketDerivative bracket_derivative(const RoughPath& rp) {
  BracketDerivative bd;
  bd.dim = rp.dim();
  bd.values = rp.bracket_increments();
  const double dt = rp.grid().dt();
  for (double& v : bd.values) v /= dt;
  return bd;
}

namespace detail {
inline void bracket_from_identity(std::span<const double> dy, std::span<const double> area,
                                  std::span<double> out, std::size_t d) {
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b)
      out[a * d + b] = dy[a] * dy[b] - (area[a * d + b] + area[b * d + a]);
}
}  // namespace detail

inline RoughPath lift_piecewise_linear(const TimeGrid& grid, std::size_t dim,
                                       std::span<const double> samples, double alpha = 0.5) {
  if (samples.size() != grid.nodes() * dim)
    throw InputError("samples do not match grid: got " + std::to_string(samples.size()) +
                     " values, expected " + std::to_string(grid.nodes() * dim));
  std::vector<double> second(grid.steps * dim * dim, 0.0), bracket(grid.steps * dim * dim, 0.0);
  std::vector<double> dy(dim);
  for (std::size_t i = 0; i < grid.steps; ++i) {
    for (std::size_t a = 0; a < dim; ++a) dy[a] = samples[(i + 1) * dim + a] - samples[i * dim + a];
    for (std::size_t a = 0; a < dim; ++a)
      for (std::size_t b = 0; b < dim; ++b) second[(i * dim + a) * dim + b] = 0.5 * dy[a] * dy[b];
  }
  return RoughPath(grid, dim, std::vector<double>(samples.begin(), samples.end()), std::move(second),
                   std::move(bracket), alpha, LiftKind::piecewise_linear);
}

inline RoughPath lift_ito(const TimeGrid& grid, std::size_t dim, std::span<const double> fine,
                          std::size_t refine_factor, double alpha = 0.5,
                          std::optional<std::uint64_t> seed = std::nullopt) {
  if (refine_factor < static_cast<std::size_t>(default_tolerances().min_ito_refine))
    throw ConfigError("Ito lift needs refine_factor >= " +
                      std::to_string(default_tolerances().min_ito_refine) + ", got " +
                      std::to_string(refine_factor));
  const std::size_t fine_nodes = grid.steps * refine_factor + 1;
  if (fine.size() != fine_nodes * dim)
    throw InputError("fine samples do not match grid x refine_factor");
  std::vector<double> first(grid.nodes() * dim), second(grid.steps * dim * dim, 0.0),
      bracket(grid.steps * dim * dim, 0.0);
  std::vector<double> dy(dim);
  for (std::size_t i = 0; i <= grid.steps; ++i)
    for (std::size_t a = 0; a < dim; ++a) first[i * dim + a] = fine[i * refine_factor * dim + a];
  for (std::size_t i = 0; i < grid.steps; ++i) {
    const double* y0 = &fine[i * refine_factor * dim];
    double* area = &second[i * dim * dim];
    for (std::size_t s = 0; s < refine_factor; ++s) {
      const double* ys = &fine[(i * refine_factor + s) * dim];
      const double* yn = ys + dim;
      for (std::size_t b = 0; b < dim; ++b) dy[b] = yn[b] - ys[b];
      for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = 0; b < dim; ++b) area[a * dim + b] += (ys[a] - y0[a]) * dy[b];
    }
    for (std::size_t a = 0; a < dim; ++a) dy[a] = first[(i + 1) * dim + a] - first[i * dim + a];
    detail::bracket_from_identity(dy, std::span<const double>(area, dim * dim),
                                  std::span<double>(&bracket[i * dim * dim], dim * dim), dim);
  }
  return RoughPath(grid, dim, std::move(first), std::move(second), std::move(bracket), alpha,
                   LiftKind::ito, seed);
}

// Increment and iterated integral over [t_i, t_j] by the Chen recursion.
class ChenAccumulator {
 public:
  ChenAccumulator(const RoughPath& rp, std::size_t start)
      : rp_(&rp), start_(start), end_(start), dy_(rp.dim(), 0.0), area_(rp.dim() * rp.dim(), 0.0) {}

  void advance() {
    const std::size_t d = rp_->dim();
    const auto step_area = rp_->second(end_);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        area_[a * d + b] += step_area[a * d + b] + dy_[a] * rp_->increment(end_, b);
    for (std::size_t a = 0; a < d; ++a) dy_[a] += rp_->increment(end_, a);
    ++end_;
  }

  std::size_t start() const { return start_; }
  std::size_t end() const { return end_; }
  const std::vector<double>& increment() const { return dy_; }
  const std::vector<double>& area() const { return area_; }

 private:
  const RoughPath* rp_;
  std::size_t start_, end_;
  std::vector<double> dy_, area_;
};

struct ChenIncrement {
  std::vector<double> increment;
  std::vector<double> area;
};

inline ChenIncrement chen_extend(const RoughPath& rp, std::size_t i, std::size_t j) {
  if (i > j) throw InputError("chen_extend needs i <= j");
  if (j > rp.steps()) throw InputError("chen_extend index beyond grid");
  ChenAccumulator acc(rp, i);
  while (acc.end() < j) acc.advance();
  return {acc.increment(), acc.area()};
}

inline RoughPath geometrify(const RoughPath& rp) {
  std::vector<double> second = rp.second_level();
  const auto& bracket = rp.bracket_increments();
  for (std::size_t k = 0; k < second.size(); ++k) second[k] += 0.5 * bracket[k];
  return RoughPath(rp.grid(), rp.dim(), rp.first_level(), std::move(second),
                   std::vector<double>(bracket.size(), 0.0), rp.alpha(), LiftKind::geometrified,
                   rp.seed());
}

// Adds a*(t-s)*Id to every second-level increment; bracket absorbs -2a*(t-s)*Id.
inline RoughPath area_shift(const RoughPath& rp, double a) {
  std::vector<double> second = rp.second_level();
  std::vector<double> bracket = rp.bracket_increments();
  const std::size_t d = rp.dim();
  const double dt = rp.grid().dt();
  for (std::size_t i = 0; i < rp.steps(); ++i)
    for (std::size_t k = 0; k < d; ++k) {
      second[(i * d + k) * d + k] += a * dt;
      bracket[(i * d + k) * d + k] -= 2.0 * a * dt;
    }
  return RoughPath(rp.grid(), d, rp.first_level(), std::move(second), std::move(bracket), rp.alpha(),
                   LiftKind::area_shifted, rp.seed());
}

// Chen-composes blocks of `factor` steps into one coarse step.
inline RoughPath coarsen(const RoughPath& rp, std::size_t factor) {
  if (factor == 0 || rp.steps() % factor != 0)
    throw InputError("coarsening factor must divide the number of steps");
  const std::size_t d = rp.dim();
  const TimeGrid coarse(rp.grid().horizon, rp.steps() / factor);
  std::vector<double> first(coarse.nodes() * d), second, bracket;
  second.reserve(coarse.steps * d * d);
  bracket.reserve(coarse.steps * d * d);
  for (std::size_t i = 0; i <= coarse.steps; ++i)
    for (std::size_t a = 0; a < d; ++a) first[i * d + a] = rp.value(i * factor)[a];
  std::vector<double> qv(d * d);
  for (std::size_t i = 0; i < coarse.steps; ++i) {
    ChenIncrement inc = chen_extend(rp, i * factor, (i + 1) * factor);
    detail::bracket_from_identity(inc.increment, inc.area, qv, d);
    second.insert(second.end(), inc.area.begin(), inc.area.end());
    bracket.insert(bracket.end(), qv.begin(), qv.end());
  }
  return RoughPath(coarse, d, std::move(first), std::move(second), std::move(bracket), rp.alpha(),
                   rp.kind(), rp.seed());
}

namespace detail {
inline double euclid(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}
inline double euclid_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}
}  // namespace detail

struct HolderPair {
  double level1 = 0.0;  // sup |dY_ij - dYbar_ij| / (t_j - t_i)^alpha
  double level2 = 0.0;  // sup |YY_ij - YYbar_ij| / (t_j - t_i)^(2 alpha)
};

// Sup over all node pairs; a missing second path means the zero rough path.
inline HolderPair holder_seminorms(const RoughPath& a, const RoughPath* b, double alpha) {
  const std::size_t N = a.steps();
  std::vector<double> pow1(N + 1), pow2(N + 1);
  for (std::size_t k = 1; k <= N; ++k) {
    const double span = a.grid().node(k);
    pow1[k] = std::pow(span, alpha);
    pow2[k] = std::pow(span, 2.0 * alpha);
  }
  HolderPair out;
  const std::vector<double> zero_inc(a.dim(), 0.0), zero_area(a.dim() * a.dim(), 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    ChenAccumulator ca(a, i);
    std::optional<ChenAccumulator> cb;
    if (b) cb.emplace(*b, i);
    for (std::size_t j = i + 1; j <= N; ++j) {
      ca.advance();
      if (cb) cb->advance();
      const double d1 = detail::euclid_diff(ca.increment(), cb ? cb->increment() : zero_inc);
      const double d2 = detail::euclid_diff(ca.area(), cb ? cb->area() : zero_area);
      out.level1 = std::max(out.level1, d1 / pow1[j - i]);
      out.level2 = std::max(out.level2, d2 / pow2[j - i]);
    }
  }
  return out;
}

inline double rho_alpha(const RoughPath& a, const RoughPath& b, double alpha) {
  if (!(a.grid() == b.grid()) || a.dim() != b.dim())
    throw InputError("rho_alpha needs rough paths on the same grid and dimension");
  const HolderPair h = holder_seminorms(a, &b, alpha);
  return h.level1 + h.level2;
}

inline double homogeneous_norm(const RoughPath& rp, double alpha) {
  const HolderPair h = holder_seminorms(rp, nullptr, alpha);
  return std::max(h.level1, std::sqrt(h.level2));
}

struct ValidationReport {
  double max_chen_residual = 0.0;
  double max_bracket_residual = 0.0;
  double max_bracket_asymmetry = 0.0;
  double holder_exponent = 0.0;   // log-log slope of sup |dY| over dyadic spans
  double bracket_slope = 0.0;     // max |bracket_i| / dt
  bool chen_pass = false;
  bool bracket_pass = false;
  bool symmetry_pass = false;
  bool all_pass() const { return chen_pass && bracket_pass && symmetry_pass; }
};

inline ValidationReport validate(const RoughPath& rp, const Tolerances& tol = default_tolerances()) {
  ValidationReport rep;
  const std::size_t d = rp.dim(), N = rp.steps();
  const double dt = rp.grid().dt();
  std::vector<double> dy(d), resid(d * d);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t a = 0; a < d; ++a) dy[a] = rp.increment(i, a);
    const auto area = rp.second(i);
    const auto br = rp.bracket(i);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) {
        const double r = dy[a] * dy[b] - area[a * d + b] - area[b * d + a] - br[a * d + b];
        rep.max_bracket_residual = std::max(rep.max_bracket_residual, std::abs(r));
        rep.max_bracket_asymmetry =
            std::max(rep.max_bracket_asymmetry, std::abs(br[a * d + b] - br[b * d + a]));
        rep.bracket_slope = std::max(rep.bracket_slope, std::abs(br[a * d + b]) / dt);
      }
  }
  // Chen consistency on adjacent dyadic windows [a, a+S] + [a+S, a+2S].
  for (std::size_t S = 1; 2 * S <= N; S *= 2) {
    for (std::size_t a = 0; a + 2 * S <= N; a += 2 * S) {
      const ChenIncrement left = chen_extend(rp, a, a + S);
      const ChenIncrement right = chen_extend(rp, a + S, a + 2 * S);
      const ChenIncrement whole = chen_extend(rp, a, a + 2 * S);
      for (std::size_t p = 0; p < d; ++p)
        for (std::size_t q = 0; q < d; ++q) {
          const double r = whole.area[p * d + q] - left.area[p * d + q] - right.area[p * d + q] -
                           left.increment[p] * right.increment[q];
          rep.max_chen_residual = std::max(rep.max_chen_residual, std::abs(r));
        }
    }
  }
  // Empirical Holder exponent: slope of log sup |dY| over all (overlapping) windows of
  // S steps, for spans that leave at least 32 disjoint windows.
  std::vector<double> log_span, log_sup;
  for (std::size_t S = 1; 32 * S <= N; S *= 2) {
    double sup_abs = 0.0;
    for (std::size_t a = 0; a + S <= N; ++a) {
      double sq = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double inc = rp.value(a + S)[p] - rp.value(a)[p];
        sq += inc * inc;
      }
      sup_abs = std::max(sup_abs, std::sqrt(sq));
    }
    if (sup_abs > 0) {
      log_span.push_back(std::log(S * dt));
      log_sup.push_back(std::log(sup_abs));
    }
  }
  if (log_span.size() >= 2) rep.holder_exponent = least_squares(log_span, log_sup).slope;
  rep.chen_pass = rep.max_chen_residual <= tol.chen_residual;
  rep.bracket_pass = rep.max_bracket_residual <= tol.bracket_identity;
  rep.symmetry_pass = rep.max_bracket_asymmetry <= tol.bracket_symmetry;
  return rep;
}

}  // namespace roughfilter
