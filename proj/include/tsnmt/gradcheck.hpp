#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tsnmt/tensor.hpp"

namespace tsnmt {

struct GradCheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  bool passed = true;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::string failure;  // non-empty on a non-finite diagnostic
  std::vector<GradCheckGroup> groups;

  std::string to_string() const {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3);
    for (const auto& g : groups)
      os << (g.passed ? "PASS " : "FAIL ") << g.name << " checked=" << g.checked << " max_rel_err=" << g.max_rel_error
         << " (index " << g.worst_index << ": analytic=" << g.worst_analytic << " numeric=" << g.worst_numeric
         << ")\n";
    if (!failure.empty()) os << "FAILURE " << failure << "\n";
    os << (passed ? "PASS" : "FAIL") << " overall max_rel_err=" << max_rel_error << " tolerance=" << tolerance;
    if (!worst_parameter.empty()) os << " worst=" << worst_parameter;
    os << "\n";
    return os.str();
  }
};

struct GradCheckOptions {
  double step = 1e-5;          // central-difference half width h
  double tolerance = 1e-4;
  double denominator_floor = 1e-6;  // rel = |a-n| / max(|a|, |n|, floor)
  std::uint64_t seed = 0;      // tape seed, fixed across all evaluations
  bool training = false;       // dropout active (masks are seed-determined)
  std::size_t max_entries_per_parameter = 0;  // 0 = every entry
};

// Compares tape gradients of a scalar function against central differences.
//
// `f` must build its graph on the supplied tape and return a scalar tensor; it
// is re-evaluated with an identical tape seed for every perturbation, so it
// must be deterministic given that seed.
template <typename S>
GradCheckReport finite_difference_check(const std::function<Tensor<S>(Tape<S>&)>& f,
                                        std::vector<std::pair<std::string, Tensor<S>>> params,
                                        const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tolerance = opt.tolerance;
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<S> tape(opt.seed, true, opt.training);
    auto loss = f(tape);
    tape.backward(loss);
  }
  auto evaluate = [&]() {
    Tape<S> tape(opt.seed, false, opt.training);
    return static_cast<double>(f(tape).item());
  };

  for (auto& [name, p] : params) {
    GradCheckGroup group;
    group.name = name;
    const std::size_t n = p.size();
    std::size_t stride = 1;
    if (opt.max_entries_per_parameter > 0 && n > opt.max_entries_per_parameter)
      stride = (n + opt.max_entries_per_parameter - 1) / opt.max_entries_per_parameter;
    for (std::size_t i = 0; i < n; i += stride) {
      const S original = p[i];
      p[i] = static_cast<S>(original + opt.step);
      const double up = evaluate();
      p[i] = static_cast<S>(original - opt.step);
      const double down = evaluate();
      p[i] = original;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double analytic = static_cast<double>(p.grad()[i]);
      ++group.checked;
      if (!std::isfinite(numeric) || !std::isfinite(analytic)) {
        group.passed = false;
        report.passed = false;
        if (report.failure.empty())
          report.failure = "non-finite gradient for parameter " + name + " index " + std::to_string(i);
        group.worst_index = i;
        group.worst_analytic = analytic;
        group.worst_numeric = numeric;
        group.max_rel_error = std::numeric_limits<double>::infinity();
        continue;
      }
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.denominator_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel >= group.max_rel_error) {
        group.max_rel_error = rel;
        group.worst_index = i;
        group.worst_analytic = analytic;
        group.worst_numeric = numeric;
      }
    }
    if (!(group.max_rel_error < opt.tolerance)) group.passed = false;
    if (group.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = group.max_rel_error;
      report.worst_parameter = name;
    }
    report.passed = report.passed && group.passed;
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace tsnmt
