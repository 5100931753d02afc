#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pcd/autodiff.hpp"
#include "pcd/config.hpp"

namespace pcd::gradcheck {

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct CheckResult {
  std::string name;
  double max_rel_error = 0;
  int entries = 0;
  /// Entries whose +-h probes land on a different smooth piece (a ReLU, clamp,
  /// smooth-L1 or max switch). Excluded from the error; at most 20% allowed.
  int skipped = 0;
  bool passed = false;
  std::string worst;  // entry with the largest error
  double worst_analytic = 0, worst_numeric = 0;
};

struct Options {
  double h = 1e-4;
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
  /// Name of a check whose output gradient is deliberately corrupted (scaled by
  /// 1.1 on the way back). Used as a negative control.
  std::string fault;
  /// Only run checks whose name contains this substring (empty runs all).
  std::string filter;
};

using Builder = std::function<ad::Var(ad::Graph&, std::span<const ad::Var>)>;

/// Central differences over every entry of every input. The builder must
/// return a scalar.
CheckResult check_inputs(const std::string& name, const Builder& f, const std::vector<ad::Matrix>& inputs,
                         const Options& opt);

/// Central differences over up to `per_tensor` entries of every parameter of
/// `store`. `loss` evaluates the scalar objective in a fresh graph.
CheckResult check_parameters(const std::string& name, ad::ParamStore& store,
                             const std::function<ad::Var(ad::Graph&)>& loss, int per_tensor, const Options& opt);

/// Wraps `v` in an identity node whose backward multiplies the gradient by `factor`.
ad::Var corrupt_gradient(ad::Var v, double factor);

/// Toy-width configuration used by the end-to-end checks.
PipelineConfig toy_config();

/// Every primitive op plus the composed layers, the losses and the full hybrid
/// objective at toy width.
std::vector<CheckResult> run_suite(const Options& opt);

}  // namespace pcd::gradcheck
