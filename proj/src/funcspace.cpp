#include "fsfl/funcspace.hpp"

#include <cstdio>

namespace fsfl {

namespace {
std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

void write_function_csv(std::ostream& os, const SampleGrid& grid, const FunctionGrid& f) {
  if (static_cast<std::size_t>(f.rows()) != grid.size())
    throw ParameterError("write_function_csv: function does not match grid");
  const auto n_in = grid.dim_in();
  const auto n_out = static_cast<std::size_t>(f.cols());
  for (std::size_t c = 0; c < n_in; ++c) os << (c ? "," : "") << "x_" << c;
  for (std::size_t c = 0; c < n_out; ++c) os << (n_in + c ? "," : "") << "y_" << c;
  os << '\n';
  for (Eigen::Index s = 0; s < f.rows(); ++s) {
    bool first = true;
    for (Eigen::Index c = 0; c < grid.points.cols(); ++c, first = false)
      os << (first ? "" : ",") << format_double(grid.points(s, c));
    for (Eigen::Index c = 0; c < f.cols(); ++c, first = false) os << (first ? "" : ",") << format_double(f(s, c));
    os << '\n';
  }
}

}  // namespace fsfl
