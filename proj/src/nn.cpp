#include "pcd/nn.hpp"

#include <cmath>

namespace pcd::nn {

void kaiming_init(ad::Parameter& p, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / std::max(1, fan_in));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.normal(0.0, std);
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
  Linear l = create_zero(store, name, in, out);
  kaiming_init(store.get(name + ".w"), in, rng);
  return l;
}

Linear Linear::create_zero(ParamStore& store, const std::string& name, int in, int out) {
  store.create(name + ".w", in, out);
  store.create(name + ".b", 1, out);
  return Linear{name, in, out};
}

Var Linear::operator()(Graph& g, ParamStore& store, Var x) const {
  if (x.cols() != in) {
    throw ShapeError("linear '" + name + "': expected " + std::to_string(in) + " input columns, got " +
                     ad::shape_str(x.value()));
  }
  const Var w = g.param(store.get(name + ".w"), store);
  const Var b = g.param(store.get(name + ".b"), store);
  return ad::add(ad::matmul(x, w), b);
}

Mlp Mlp::create(ParamStore& store, const std::string& name, int in, const std::vector<int>& widths, Rng& rng,
                bool final_relu) {
  Mlp m;
  m.final_relu = final_relu;
  int prev = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    m.layers.push_back(Linear::create(store, name + "." + std::to_string(i), prev, widths[i], rng));
    prev = widths[i];
  }
  return m;
}

Var Mlp::operator()(Graph& g, ParamStore& store, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i](g, store, x);
    if (final_relu || i + 1 < layers.size()) x = ad::relu(x);
  }
  return x;
}

}  // namespace pcd::nn
