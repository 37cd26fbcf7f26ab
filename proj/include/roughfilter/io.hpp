#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "roughpath.hpp"

namespace roughfilter::io {

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& where) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') throw InputError("cannot parse number '" + s + "' in " + where);
  return v;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  ensure_parent(p);
  std::ofstream out(p);
  if (!out) throw InputError("cannot open '" + p.string() + "' for writing");
  return out;
}

// Columns: t, Y_1..Y_d, YY_11..YY_dd, QV_11..QV_dd. The level-2 cells of row i
// describe the step [t_i, t_{i+1}], so the terminal row leaves them empty.
inline void write_rough_path_csv(const RoughPath& rp, const std::filesystem::path& path) {
  auto out = open_out(path);
  const std::size_t d = rp.dim();
  out << "t";
  for (std::size_t a = 1; a <= d; ++a) out << ",Y_" << a;
  for (std::size_t a = 1; a <= d; ++a)
    for (std::size_t b = 1; b <= d; ++b) out << ",YY_" << a << b;
  for (std::size_t a = 1; a <= d; ++a)
    for (std::size_t b = 1; b <= d; ++b) out << ",QV_" << a << b;
  out << "\n";
  for (std::size_t i = 0; i <= rp.steps(); ++i) {
    out << num(rp.grid().node(i));
    for (double v : rp.value(i)) out << "," << num(v);
    if (i < rp.steps()) {
      for (double v : rp.second(i)) out << "," << num(v);
      for (double v : rp.bracket(i)) out << "," << num(v);
    } else {
      for (std::size_t k = 0; k < 2 * d * d; ++k) out << ",";
    }
    out << "\n";
  }
}

inline nlohmann::json rough_path_header(const RoughPath& rp) {
  nlohmann::json h;
  h["d_Y"] = rp.dim();
  h["N"] = rp.steps();
  h["T"] = rp.grid().horizon;
  h["alpha"] = rp.alpha();
  h["lift"] = to_string(rp.kind());
  if (rp.seed()) h["seed"] = *rp.seed();
  else h["seed"] = nullptr;
  return h;
}

inline void write_rough_path(const RoughPath& rp, const std::filesystem::path& csv_path,
                             const std::filesystem::path& header_path) {
  write_rough_path_csv(rp, csv_path);
  auto out = open_out(header_path);
  out << rough_path_header(rp).dump(2) << "\n";
}

inline RoughPath read_rough_path(const std::filesystem::path& csv_path,
                                 const std::filesystem::path& header_path) {
  std::ifstream hin(header_path);
  if (!hin) throw InputError("cannot open rough path header '" + header_path.string() + "'");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(hin);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("rough path header: " + std::string(e.what()));
  }
  const std::size_t d = h.at("d_Y").get<std::size_t>();
  const std::size_t N = h.at("N").get<std::size_t>();
  const TimeGrid grid(h.at("T").get<double>(), N);
  std::ifstream in(csv_path);
  if (!in) throw InputError("cannot open rough path csv '" + csv_path.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<double> first, second, bracket;
  first.reserve(grid.nodes() * d);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 1 + d + 2 * d * d)
      throw InputError("rough path csv row " + std::to_string(row + 2) + " has " +
                       std::to_string(cells.size()) + " cells");
    const std::string where = csv_path.string() + " row " + std::to_string(row + 2);
    for (std::size_t a = 0; a < d; ++a) first.push_back(parse_double(cells[1 + a], where));
    if (row < N) {
      for (std::size_t k = 0; k < d * d; ++k) second.push_back(parse_double(cells[1 + d + k], where));
      for (std::size_t k = 0; k < d * d; ++k)
        bracket.push_back(parse_double(cells[1 + d + d * d + k], where));
    }
    ++row;
  }
  if (row != grid.nodes()) throw InputError("rough path csv has wrong number of rows");
  std::optional<std::uint64_t> seed;
  if (h.contains("seed") && !h["seed"].is_null()) seed = h["seed"].get<std::uint64_t>();
  return RoughPath(grid, d, std::move(first), std::move(second), std::move(bracket),
                   h.at("alpha").get<double>(), LiftKind::file, seed);
}

}  // namespace roughfilter::io
