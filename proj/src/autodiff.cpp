#include "pcd/autodiff.hpp"

#include <cmath>

namespace pcd::ad {

std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

// ---------------------------------------------------------------------------
// ParamStore / optimizer

Parameter& ParamStore::create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (params_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  Parameter& p = params_[name];
  p.name = name;
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  p.m = Matrix::Zero(rows, cols);
  p.v = Matrix::Zero(rows, cols);
  return p;
}

Parameter& ParamStore::get(const std::string& name) {
  const auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

const Parameter& ParamStore::get(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::size_t ParamStore::count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) {
    if (name.rfind(prefix, 0) == 0) n += static_cast<std::size_t>(p.value.size());
  }
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p.grad.setZero();
}

void adam_step(ParamStore& store, const AdamOptions& opt) {
  if (store.frozen()) throw Error("adam_step on a frozen parameter store");
  const long long t = store.adam_steps() + 1;
  store.set_adam_steps(t);
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (auto& [name, p] : store) {
    p.m = opt.beta1 * p.m + (1.0 - opt.beta1) * p.grad;
    p.v = opt.beta2 * p.v + (1.0 - opt.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= opt.lr * (p.m.array() / bc1) / ((p.v.array() / bc2).sqrt() + opt.eps);
  }
}

double one_cycle_lr(double base_lr, long long step, long long total_steps) {
  if (total_steps <= 1) return base_lr;
  const long long warmup = std::max<long long>(1, total_steps / 10);
  if (step < warmup) {
    const double f = static_cast<double>(step) / static_cast<double>(warmup);
    return base_lr * (0.1 + 0.9 * f);
  }
  const double span = static_cast<double>(std::max<long long>(1, total_steps - 1 - warmup));
  const double f = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double lo = 0.01 * base_lr;
  return lo + (base_lr - lo) * 0.5 * (1.0 + std::cos(kPi * f));
}

// ---------------------------------------------------------------------------
// Graph

const Matrix& Var::value() const { return graph->value(*this); }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on non-scalar node " + shape_str(v));
  return v(0, 0);
}

Var Graph::constant(Matrix value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Graph::leaf(Matrix value) {
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.is_leaf = true;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Parameter& p, const ParamStore& owner) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.is_leaf = true;
  n.requires_grad = !owner.frozen();
  n.param = owner.frozen() ? nullptr : &p;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix Graph::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  if (n.acc_grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.acc_grad;
}

Var Graph::record(const char* op, Matrix value, std::vector<int> parents, BackwardFn fn) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Matrix& Graph::grad_buffer(int id) {
  auto& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::accumulate(int id, const Matrix& delta) {
  if (!nodes_[id].requires_grad) return;
  grad_buffer(id) += delta;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw Error("backward: variable belongs to another graph");
  const auto& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv));
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0 || !n.requires_grad) continue;
    if (n.is_leaf) {
      if (n.acc_grad.size() == 0) n.acc_grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.acc_grad += n.grad;
      if (n.param) n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
  for (auto& n : nodes_) {
    if (!n.is_leaf) n.grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------------------
// Broadcast helpers

namespace {

enum class Bcast { Same, Row, Col, Scalar };

Bcast classify(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::Col;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

Matrix expand(const Matrix& b, Bcast kind, Eigen::Index rows, Eigen::Index cols) {
  switch (kind) {
    case Bcast::Same: return b;
    case Bcast::Row: return b.replicate(rows, 1);
    case Bcast::Col: return b.replicate(1, cols);
    case Bcast::Scalar: return Matrix::Constant(rows, cols, b(0, 0));
  }
  return b;
}

Matrix reduce(const Matrix& g, Bcast kind) {
  switch (kind) {
    case Bcast::Same: return g;
    case Bcast::Row: return g.colwise().sum();
    case Bcast::Col: return g.rowwise().sum();
    case Bcast::Scalar: {
      Matrix s(1, 1);
      s(0, 0) = g.sum();
      return s;
    }
  }
  return g;
}

void same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph) throw Error(std::string(op) + ": operands belong to different graphs");
}

template <class F, class D>
Var unary(Var a, const char* op, F f, D dfdx) {
  Graph& g = *a.graph;
  Matrix out = a.value().unaryExpr(f);
  return g.record(op, std::move(out), {a.id}, [dfdx](Graph& g, int self) {
    const int p = g.parents(self)[0];
    const Matrix& x = g.node_value(p);
    const Matrix& y = g.node_value(self);
    Matrix d(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) d.data()[i] = dfdx(x.data()[i], y.data()[i]);
    g.accumulate(p, g.node_grad(self).cwiseProduct(d));
  });
}

template <class R>
void note_regions(Graph& g, const Matrix& x, R region) {
  for (Eigen::Index i = 0; i < x.size(); ++i) g.note_branch(static_cast<std::uint64_t>(region(x.data()[i])));
}

}  // namespace

// ---------------------------------------------------------------------------
// Element-wise ops

Var add(Var a, Var b) {
  same_graph(a, b, "add");
  const auto kind = classify(a.value(), b.value(), "add");
  Matrix out = a.value() + expand(b.value(), kind, a.rows(), a.cols());
  return a.graph->record("add", std::move(out), {a.id, b.id}, [kind](Graph& g, int self) {
    const auto& ps = g.parents(self);
    g.accumulate(ps[0], g.node_grad(self));
    if (g.requires_grad(ps[1])) g.accumulate(ps[1], reduce(g.node_grad(self), kind));
  });
}

Var sub(Var a, Var b) {
  same_graph(a, b, "sub");
  const auto kind = classify(a.value(), b.value(), "sub");
  Matrix out = a.value() - expand(b.value(), kind, a.rows(), a.cols());
  return a.graph->record("sub", std::move(out), {a.id, b.id}, [kind](Graph& g, int self) {
    const auto& ps = g.parents(self);
    g.accumulate(ps[0], g.node_grad(self));
    if (g.requires_grad(ps[1])) g.accumulate(ps[1], -reduce(g.node_grad(self), kind));
  });
}

Var mul(Var a, Var b) {
  same_graph(a, b, "mul");
  const auto kind = classify(a.value(), b.value(), "mul");
  Matrix out = a.value().cwiseProduct(expand(b.value(), kind, a.rows(), a.cols()));
  return a.graph->record("mul", std::move(out), {a.id, b.id}, [kind](Graph& g, int self) {
    const auto& ps = g.parents(self);
    const Matrix& av = g.node_value(ps[0]);
    const Matrix& bv = g.node_value(ps[1]);
    const Matrix& go = g.node_grad(self);
    if (g.requires_grad(ps[0])) g.accumulate(ps[0], go.cwiseProduct(expand(bv, kind, av.rows(), av.cols())));
    if (g.requires_grad(ps[1])) g.accumulate(ps[1], reduce(go.cwiseProduct(av), kind));
  });
}

Var scale(Var a, double s) {
  return a.graph->record("scale", a.value() * s, {a.id}, [s](Graph& g, int self) {
    g.accumulate(g.parents(self)[0], g.node_grad(self) * s);
  });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value().array() + s;
  return a.graph->record("add_scalar", std::move(out), {a.id}, [](Graph& g, int self) {
    g.accumulate(g.parents(self)[0], g.node_grad(self));
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var matmul(Var a, Var b) {
  same_graph(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.value()) + " and " + shape_str(b.value()));
  }
  a.graph->add_macs(static_cast<std::uint64_t>(a.rows() * a.cols() * b.cols()));
  Matrix out = a.value() * b.value();
  return a.graph->record("matmul", std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    const auto& ps = g.parents(self);
    const Matrix& go = g.node_grad(self);
    if (g.requires_grad(ps[0])) g.grad_buffer(ps[0]).noalias() += go * g.node_value(ps[1]).transpose();
    if (g.requires_grad(ps[1])) g.grad_buffer(ps[1]).noalias() += g.node_value(ps[0]).transpose() * go;
  });
}

Var relu(Var a) {
  note_regions(*a.graph, a.value(), [](double x) { return x > 0; });
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a, "sigmoid",
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (Eigen::Index i = 0; i < a.value().size(); ++i) {
    if (!(a.value().data()[i] > 0)) throw NumericError("log: non-positive input");
  }
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sin(Var a) {
  return unary(a, "sin", [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(a, "cos", [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2 * x; });
}

Var pow_int(Var a, int p) {
  if (p < 1) throw Error("pow_int: exponent must be >= 1");
  return unary(
      a, "pow_int", [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1); });
}

Var clamp(Var a, double lo, double hi) {
  note_regions(*a.graph, a.value(), [lo, hi](double x) { return x < lo ? 0 : x > hi ? 2 : 1; });
  return unary(
      a, "clamp", [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var smooth_l1(Var a, double beta) {
  note_regions(*a.graph, a.value(), [beta](double x) { return x <= -beta ? 0 : x >= beta ? 2 : 1; });
  return unary(
      a, "smooth_l1",
      [beta](double x) { return std::abs(x) < beta ? 0.5 * x * x / beta : std::abs(x) - 0.5 * beta; },
      [beta](double x, double) { return std::abs(x) < beta ? x / beta : (x > 0 ? 1.0 : -1.0); });
}

Var atan2(Var y, Var x) {
  same_graph(y, x, "atan2");
  if (y.rows() != x.rows() || y.cols() != x.cols()) {
    throw ShapeError("atan2: incompatible shapes " + shape_str(y.value()) + " and " + shape_str(x.value()));
  }
  Matrix out = y.value().binaryExpr(x.value(), [](double a, double b) { return std::atan2(a, b); });
  return y.graph->record("atan2", std::move(out), {y.id, x.id}, [](Graph& g, int self) {
    const auto& ps = g.parents(self);
    const Matrix& yv = g.node_value(ps[0]);
    const Matrix& xv = g.node_value(ps[1]);
    const Matrix& go = g.node_grad(self);
    Matrix r2 = (xv.array().square() + yv.array().square()).matrix();
    if (g.requires_grad(ps[0])) g.accumulate(ps[0], go.cwiseProduct(xv).cwiseQuotient(r2));
    if (g.requires_grad(ps[1])) g.accumulate(ps[1], -go.cwiseProduct(yv).cwiseQuotient(r2));
  });
}

// ---------------------------------------------------------------------------
// Reductions and structural ops

Var max_over_set(Var a, Eigen::Index group_size) {
  const Matrix& x = a.value();
  if (group_size < 1 || x.rows() % group_size != 0) {
    throw ShapeError("max_over_set: " + shape_str(x) + " rows not divisible by group size " +
                     std::to_string(group_size));
  }
  const Eigen::Index groups = x.rows() / group_size;
  Matrix out(groups, x.cols());
  std::vector<int> arg(static_cast<std::size_t>(groups * x.cols()));
  for (Eigen::Index gi = 0; gi < groups; ++gi) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index best = gi * group_size;
      for (Eigen::Index r = best + 1; r < (gi + 1) * group_size; ++r) {
        if (x(r, c) > x(best, c)) best = r;
      }
      out(gi, c) = x(best, c);
      arg[static_cast<std::size_t>(gi * x.cols() + c)] = static_cast<int>(best);
      a.graph->note_branch(static_cast<std::uint64_t>(best));
    }
  }
  return a.graph->record("max_over_set", std::move(out), {a.id}, [arg = std::move(arg)](Graph& g, int self) {
    const int p = g.parents(self)[0];
    const Matrix& go = g.node_grad(self);
    Matrix& gp = g.grad_buffer(p);
    for (Eigen::Index gi = 0; gi < go.rows(); ++gi) {
      for (Eigen::Index c = 0; c < go.cols(); ++c) {
        gp(arg[static_cast<std::size_t>(gi * go.cols() + c)], c) += go(gi, c);
      }
    }
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->record("sum", std::move(out), {a.id}, [](Graph& g, int self) {
    const int p = g.parents(self)[0];
    const Matrix& x = g.node_value(p);
    g.accumulate(p, Matrix::Constant(x.rows(), x.cols(), g.node_grad(self)(0, 0)));
  });
}

Var mean(Var a) {
  const auto n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  Matrix out = a.value().rowwise().sum();
  return a.graph->record("sum_rows", std::move(out), {a.id}, [](Graph& g, int self) {
    const int p = g.parents(self)[0];
    g.accumulate(p, g.node_grad(self).replicate(1, g.node_value(p).cols()));
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    same_graph(parts[0], p, "concat");
    if (p.rows() != rows) {
      throw ShapeError("concat: incompatible shapes " + shape_str(parts[0].value()) + " and " +
                       shape_str(p.value()));
    }
    cols += p.cols();
    ids.push_back(p.id);
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return parts[0].graph->record("concat", std::move(out), std::move(ids), [](Graph& g, int self) {
    const Matrix& go = g.node_grad(self);
    Eigen::Index c = 0;
    for (int p : g.parents(self)) {
      const auto w = g.node_value(p).cols();
      if (g.requires_grad(p)) g.accumulate(p, go.middleCols(c, w));
      c += w;
    }
  });
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of " + shape_str(a.value()));
  }
  Matrix out = a.value().middleCols(start, count);
  return a.graph->record("slice_cols", std::move(out), {a.id}, [start, count](Graph& g, int self) {
    const int p = g.parents(self)[0];
    g.grad_buffer(p).middleCols(start, count) += g.node_grad(self);
  });
}

Var gather_rows(Var a, std::span<const int> index) {
  const Matrix& x = a.value();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const int r = index[i];
    if (r < -1 || r >= x.rows()) throw ShapeError("gather_rows: index " + std::to_string(r) + " out of " + shape_str(x));
    if (r >= 0) out.row(static_cast<Eigen::Index>(i)) = x.row(r);
  }
  std::vector<int> idx(index.begin(), index.end());
  return a.graph->record("gather_rows", std::move(out), {a.id}, [idx = std::move(idx)](Graph& g, int self) {
    const int p = g.parents(self)[0];
    const Matrix& go = g.node_grad(self);
    Matrix& gp = g.grad_buffer(p);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= 0) gp.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var segment_mean(Var a, std::span<const int> segment, Eigen::Index n_segments) {
  const Matrix& x = a.value();
  if (static_cast<Eigen::Index>(segment.size()) != x.rows()) {
    throw ShapeError("segment_mean: " + std::to_string(segment.size()) + " segment ids for " + shape_str(x));
  }
  std::vector<double> count(static_cast<std::size_t>(n_segments), 0.0);
  for (int s : segment) {
    if (s < 0 || s >= n_segments) throw ShapeError("segment_mean: segment id out of range");
    count[static_cast<std::size_t>(s)] += 1.0;
  }
  Matrix out = Matrix::Zero(n_segments, x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out.row(segment[static_cast<std::size_t>(r)]) += x.row(r);
  for (Eigen::Index s = 0; s < n_segments; ++s) {
    if (count[static_cast<std::size_t>(s)] > 0) out.row(s) /= count[static_cast<std::size_t>(s)];
  }
  std::vector<int> seg(segment.begin(), segment.end());
  return a.graph->record("segment_mean", std::move(out), {a.id},
                         [seg = std::move(seg), count = std::move(count)](Graph& g, int self) {
                           const int p = g.parents(self)[0];
                           const Matrix& go = g.node_grad(self);
                           Matrix& gp = g.grad_buffer(p);
                           for (std::size_t r = 0; r < seg.size(); ++r) {
                             gp.row(static_cast<Eigen::Index>(r)) +=
                                 go.row(seg[r]) / count[static_cast<std::size_t>(seg[r])];
                           }
                         });
}

Var select_col_block(Var a, std::span<const int> block, Eigen::Index width) {
  const Matrix& x = a.value();
  if (static_cast<Eigen::Index>(block.size()) != x.rows()) {
    throw ShapeError("select_col_block: " + std::to_string(block.size()) + " block ids for " + shape_str(x));
  }
  Matrix out(x.rows(), width);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int b = block[static_cast<std::size_t>(r)];
    if (b < 0 || (b + 1) * width > x.cols()) throw ShapeError("select_col_block: block out of range");
    out.row(r) = x.row(r).segment(b * width, width);
  }
  std::vector<int> blk(block.begin(), block.end());
  return a.graph->record("select_col_block", std::move(out), {a.id},
                         [blk = std::move(blk), width](Graph& g, int self) {
                           const int p = g.parents(self)[0];
                           const Matrix& go = g.node_grad(self);
                           Matrix& gp = g.grad_buffer(p);
                           for (Eigen::Index r = 0; r < go.rows(); ++r) {
                             gp.row(r).segment(blk[static_cast<std::size_t>(r)] * width, width) += go.row(r);
                           }
                         });
}

Var log_softmax(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return a.graph->record("log_softmax", std::move(out), {a.id}, [](Graph& g, int self) {
    const int p = g.parents(self)[0];
    const Matrix& y = g.node_value(self);
    const Matrix& go = g.node_grad(self);
    Matrix d = go;
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double s = go.row(r).sum();
      d.row(r) -= (y.row(r).array().exp() * s).matrix();
    }
    g.accumulate(p, d);
  });
}

Var pick(Var a, std::span<const int> column) {
  const Matrix& x = a.value();
  if (static_cast<Eigen::Index>(column.size()) != x.rows()) {
    throw ShapeError("pick: " + std::to_string(column.size()) + " column ids for " + shape_str(x));
  }
  Matrix out(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int c = column[static_cast<std::size_t>(r)];
    if (c < 0 || c >= x.cols()) throw ShapeError("pick: column out of range");
    out(r, 0) = x(r, c);
  }
  std::vector<int> col(column.begin(), column.end());
  return a.graph->record("pick", std::move(out), {a.id}, [col = std::move(col)](Graph& g, int self) {
    const int p = g.parents(self)[0];
    const Matrix& go = g.node_grad(self);
    Matrix& gp = g.grad_buffer(p);
    for (Eigen::Index r = 0; r < go.rows(); ++r) gp(r, col[static_cast<std::size_t>(r)]) += go(r, 0);
  });
}

Var sparse_conv(Var in, Var weight, const Rulebook& rules) {
  same_graph(in, weight, "sparse_conv");
  const Eigen::Index cin = in.cols();
  if (weight.rows() != rules.kernel_volume * cin) {
    throw ShapeError("sparse_conv: incompatible shapes " + shape_str(in.value()) + " and " +
                     shape_str(weight.value()));
  }
  if (static_cast<int>(rules.pairs.size()) != rules.kernel_volume) throw ShapeError("sparse_conv: malformed rulebook");
  const Matrix& x = in.value();
  const Matrix& w = weight.value();
  const Eigen::Index cout = w.cols();
  Matrix out = Matrix::Zero(rules.n_out, cout);
  std::uint64_t macs = 0;
  Matrix gathered, product;
  for (int k = 0; k < rules.kernel_volume; ++k) {
    const auto& pairs = rules.pairs[static_cast<std::size_t>(k)];
    if (pairs.empty()) continue;
    const auto n = static_cast<Eigen::Index>(pairs.size());
    gathered.resize(n, cin);
    for (Eigen::Index i = 0; i < n; ++i) gathered.row(i) = x.row(pairs[static_cast<std::size_t>(i)].first);
    product.noalias() = gathered * w.middleRows(k * cin, cin);
    for (Eigen::Index i = 0; i < n; ++i) out.row(pairs[static_cast<std::size_t>(i)].second) += product.row(i);
    macs += static_cast<std::uint64_t>(n * cin * cout);
  }
  in.graph->add_macs(macs);
  return in.graph->record("sparse_conv", std::move(out), {in.id, weight.id}, [rules](Graph& g, int self) {
    const auto& ps = g.parents(self);
    const Matrix& x = g.node_value(ps[0]);
    const Matrix& w = g.node_value(ps[1]);
    const Matrix& go = g.node_grad(self);
    const Eigen::Index cin = x.cols();
    const bool gx = g.requires_grad(ps[0]);
    const bool gw = g.requires_grad(ps[1]);
    Matrix gathered_out, gathered_in, dx;
    for (int k = 0; k < rules.kernel_volume; ++k) {
      const auto& pairs = rules.pairs[static_cast<std::size_t>(k)];
      if (pairs.empty()) continue;
      const auto n = static_cast<Eigen::Index>(pairs.size());
      gathered_out.resize(n, go.cols());
      for (Eigen::Index i = 0; i < n; ++i) gathered_out.row(i) = go.row(pairs[static_cast<std::size_t>(i)].second);
      if (gx) {
        dx.noalias() = gathered_out * w.middleRows(k * cin, cin).transpose();
        Matrix& gxb = g.grad_buffer(ps[0]);
        for (Eigen::Index i = 0; i < n; ++i) gxb.row(pairs[static_cast<std::size_t>(i)].first) += dx.row(i);
      }
      if (gw) {
        gathered_in.resize(n, cin);
        for (Eigen::Index i = 0; i < n; ++i) gathered_in.row(i) = x.row(pairs[static_cast<std::size_t>(i)].first);
        g.grad_buffer(ps[1]).middleRows(k * cin, cin).noalias() += gathered_in.transpose() * gathered_out;
      }
    }
  });
}

}  // namespace pcd::ad
