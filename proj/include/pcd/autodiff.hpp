#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph owns every node created while evaluating one loss. Nodes are appended
// in evaluation order, so reverse creation order is a valid topological order
// for the backward sweep. Trainable arrays live in a ParamStore; Graph::param
// binds them as leaves and backward() adds their gradients into Parameter::grad.

#include <Eigen/Core>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pcd/core.hpp"

namespace pcd::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_str(const Matrix& m);

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // Adam first moment
  Matrix v;  // Adam second moment

  Eigen::Index size() const { return value.size(); }
};

class ParamStore {
 public:
  /// Creates a zero-initialized parameter. Names must be unique.
  Parameter& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  /// Exact number of trainable scalars.
  std::size_t count() const;
  /// Sum of element counts of parameters whose name starts with `prefix`.
  std::size_t count(const std::string& prefix) const;
  std::vector<std::string> names() const;

  void zero_grad();
  /// A frozen store binds into graphs as constants and rejects optimizer steps.
  void set_frozen(bool frozen) { frozen_ = frozen; }
  bool frozen() const { return frozen_; }

  long long adam_steps() const { return adam_t_; }
  void set_adam_steps(long long t) { adam_t_ = t; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter> params_;
  bool frozen_ = false;
  long long adam_t_ = 0;
};

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter of the store.
void adam_step(ParamStore& store, const AdamOptions& opt);

/// Linear warmup over the first 10% of steps (0.1*lr -> lr), then cosine decay
/// to 0.01*lr at the final step.
double one_cycle_lr(double base_lr, long long step, long long total_steps);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var constant(double value);
  /// Differentiable input not backed by a parameter (gradient read via grad()).
  Var leaf(Matrix value);
  /// Binds a parameter. Parameters of a frozen store become constants.
  Var param(Parameter& p, const ParamStore& owner);

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  /// Accumulated gradient of a leaf or parameter node (zeros before any backward).
  Matrix grad(Var v) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Propagates d(loss)/d(node) to every reachable leaf; leaf and parameter
  /// gradients accumulate across calls.
  void backward(Var loss);

  // Op authoring interface.
  Var record(const char* op, Matrix value, std::vector<int> parents, BackwardFn fn);
  const Matrix& node_value(int id) const { return nodes_[id].value; }
  const Matrix& node_grad(int id) const { return nodes_[id].grad; }
  const std::vector<int>& parents(int id) const { return nodes_[id].parents; }
  /// Adds `delta` into the pass gradient of `id` if it requires grad.
  void accumulate(int id, const Matrix& delta);
  /// Mutable pass-gradient buffer of `id`, zero-initialized on first touch.
  Matrix& grad_buffer(int id);
  const char* op_name(int id) const { return nodes_[id].op; }

  /// Piecewise ops (relu, clamp, smooth_l1, max_over_set) fold their active
  /// branch into this hash. Equal signatures mean the same smooth piece.
  void note_branch(std::uint64_t v) { branch_ = (branch_ ^ v) * 0x100000001b3ULL; }
  std::uint64_t branch_signature() const { return branch_; }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t macs() const { return macs_; }
  void add_macs(std::uint64_t n) { macs_ += n; }

 private:
  struct Node {
    const char* op = "";
    Matrix value;
    Matrix grad;      // gradient of the current backward pass
    Matrix acc_grad;  // accumulated gradient (leaves only)
    std::vector<int> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    Parameter* param = nullptr;
  };
  std::deque<Node> nodes_;  // stable references across appends
  std::uint64_t macs_ = 0;
  std::uint64_t branch_ = 0xcbf29ce484222325ULL;
};

// Element-wise arithmetic. `b` may match `a`, be a 1xC row (broadcast over rows),
// an Nx1 column (broadcast over columns) or 1x1.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

Var matmul(Var a, Var b);

Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var sin(Var a);
Var cos(Var a);
Var square(Var a);
/// Element-wise a^p for integer p >= 1.
Var pow_int(Var a, int p);
/// Element-wise clamp; gradient is zero where the input was clamped.
Var clamp(Var a, double lo, double hi);
/// 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise.
Var smooth_l1(Var a, double beta = 1.0);
Var atan2(Var y, Var x);

/// Column-wise max over consecutive row groups of `group_size`. Backward routes
/// the gradient to the first maximizing row of each group.
Var max_over_set(Var a, Eigen::Index group_size);
Var mean(Var a);  // 1x1
Var sum(Var a);   // 1x1
Var sum_rows(Var a);  // Nx1, per-row sum across columns
Var concat(std::span<const Var> parts);  // along columns
Var concat(std::initializer_list<Var> parts);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);

/// Row gather; index -1 yields a zero row.
Var gather_rows(Var a, std::span<const int> index);
/// Segment mean: row i of the result averages rows of `a` whose segment is i.
/// Empty segments are zero.
Var segment_mean(Var a, std::span<const int> segment, Eigen::Index n_segments);
/// Picks, for every row r, the `width` columns starting at block[r] * width.
Var select_col_block(Var a, std::span<const int> block, Eigen::Index width);
/// Row-wise log-softmax.
Var log_softmax(Var a);
/// Row-wise pick of one column: result is Nx1.
Var pick(Var a, std::span<const int> column);

/// Sparse convolution by rulebook: out[out_row] += in[in_row] * W_k for each
/// (k, in_row, out_row) triple. `weight` is (kernel_volume * C_in) x C_out.
struct Rulebook {
  int kernel_volume = 27;
  Eigen::Index n_out = 0;
  // pairs[k] lists (in_row, out_row), sorted by out_row then in_row.
  std::vector<std::vector<std::pair<int, int>>> pairs;
};
Var sparse_conv(Var in, Var weight, const Rulebook& rules);

}  // namespace pcd::ad
