#pragma once

#include <string>
#include <vector>

#include "pcd/autodiff.hpp"

namespace pcd::nn {

using ad::Graph;
using ad::ParamStore;
using ad::Var;

/// y = x W + b with W (in x out) named "<name>.w" and b (1 x out) named "<name>.b".
struct Linear {
  std::string name;
  int in = 0;
  int out = 0;

  /// Kaiming-normal weights (std = sqrt(2 / in)), zero bias.
  static Linear create(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
  /// Zero weights and bias.
  static Linear create_zero(ParamStore& store, const std::string& name, int in, int out);

  Var operator()(Graph& g, ParamStore& store, Var x) const;
};

/// Shared point-wise MLP. ReLU follows every layer, or every layer but the last
/// when `final_relu` is false.
struct Mlp {
  std::vector<Linear> layers;
  bool final_relu = true;

  static Mlp create(ParamStore& store, const std::string& name, int in, const std::vector<int>& widths,
                    Rng& rng, bool final_relu = true);
  int out_width() const { return layers.empty() ? 0 : layers.back().out; }
  Var operator()(Graph& g, ParamStore& store, Var x) const;
};

void kaiming_init(ad::Parameter& p, int fan_in, Rng& rng);

}  // namespace pcd::nn
