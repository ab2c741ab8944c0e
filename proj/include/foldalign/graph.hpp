#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "foldalign/common.hpp"

namespace foldalign::graph {

enum class Activation { tanh, relu };

// Feed-forward net description: affine layers with the given activation
// between them, a plain affine output layer at the end.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int output_dim = 0;
  Activation activation = Activation::tanh;

  void validate() const;
  // (rows, cols) of each layer's weight matrix, input to output order.
  std::vector<std::pair<int, int>> layer_shapes() const;
  int param_count() const;
  int num_layers() const { return static_cast<int>(hidden_dims.size()) + 1; }
};

struct ParamSegment {
  std::string name;
  int rows = 0;
  int cols = 1;  // 1 for vectors/biases
  int fan_in = 1;
  size_t offset = 0;
  int size() const { return rows * cols; }
};

// Flat 64-bit parameter store laid out as named (rows x cols) segments.
class ParamVector {
 public:
  int add_segment(const std::string& name, int rows, int cols = 1, int fan_in = 0);

  size_t size() const { return values_.size(); }
  int num_segments() const { return static_cast<int>(segments_.size()); }
  const ParamSegment& segment(int idx) const;
  int find_segment(const std::string& name) const;  // -1 if absent

  std::span<double> segment_values(int idx);
  std::span<const double> segment_values(int idx) const;
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  void check_finite() const;  // throws NumericalError
  // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per segment.
  void init_uniform_scaled(Rng& rng);
  void fill(double v);

  bool operator==(const ParamVector& other) const {
    return values_ == other.values_;
  }

 private:
  std::vector<ParamSegment> segments_;
  std::vector<double> values_;
};

// Appends W/b segments for each layer of `spec`, named `prefix.W<i>` /
// `prefix.b<i>`. Returns the index of the first added segment.
int append_mlp_segments(ParamVector& params, const std::string& prefix,
                        const MlpSpec& spec);

// Plain forward pass, no tape. `first_segment` selects which MLP inside
// `params` to run (0 when params holds a single net).
std::vector<double> mlp_forward(const MlpSpec& spec, const ParamVector& params,
                                std::span<const double> input,
                                int first_segment = 0);

using NodeId = int;

// Eagerly-evaluated computation record. Nodes are appended in topological
// order and values are computed at construction time; backward() is const,
// so a record can be shared across threads with distinct gradient buffers.
class Tape {
 public:
  explicit Tape(const ParamVector& params) : params_(&params) {}

  NodeId constant(std::span<const double> v);
  NodeId scalar(double v);
  NodeId param(int segment_index);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);  // elementwise
  NodeId scale(NodeId a, double c);
  NodeId add_scalar(NodeId a, double c);
  NodeId matvec(NodeId w, NodeId x, int rows, int cols);  // w row-major
  NodeId affine(NodeId w, NodeId b, NodeId x, int rows, int cols);

  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId logsigmoid(NodeId a);
  NodeId softplus(NodeId a);
  NodeId softmax(NodeId a);  // max-subtraction stabilized
  NodeId exp(NodeId a);

  NodeId mean(NodeId a);
  NodeId sum(NodeId a);
  NodeId sum_sq(NodeId a);  // sum of squares
  NodeId dot(NodeId a, NodeId b);
  NodeId cosine(NodeId a, NodeId b);  // 0 for zero-norm operands, flagged
  NodeId maxval(NodeId a);
  NodeId stack(std::span<const NodeId> scalars);
  NodeId concat(std::span<const NodeId> vectors);

  std::span<const double> value(NodeId id) const;
  double scalar_value(NodeId id) const;
  int dim(NodeId id) const;
  size_t num_nodes() const { return nodes_.size(); }
  bool zero_norm_seen() const { return zero_norm_seen_; }

  // Accumulates d(loss)/d(params) into `grad` (size params.size(), caller
  // zero-initializes). loss must be a scalar node.
  void backward(NodeId loss, std::span<double> grad) const;

  // Convenience: run an MLP whose segments start at `first_segment`.
  NodeId mlp(const MlpSpec& spec, int first_segment, NodeId input);

 private:
  enum class Op : uint8_t {
    constant, param, add, sub, mul, scale, add_scalar, matvec, affine,
    tanh_, relu_, sigmoid_, logsigmoid_, softplus_, softmax_, exp_,
    mean_, sum_, sum_sq_, dot_, cosine_, max_, stack_, concat_
  };

  struct Node {
    Op op;
    NodeId a = -1, b = -1, c = -1;
    int seg = -1;
    double k = 0.0;
    int rows = 0, cols = 0;
    std::vector<NodeId> list;
    std::vector<double> val;
  };

  NodeId push(Node n);
  const Node& node(NodeId id) const;
  void check_same_dim(NodeId a, NodeId b, const char* op) const;

  const ParamVector* params_;
  std::vector<Node> nodes_;
  bool zero_norm_seen_ = false;
};

// Loss callable: returns the loss at `params`; when `grad` is non-null it
// must also fill it with the analytic gradient (same length as params).
using LossWithGrad =
    std::function<double(const ParamVector&, std::vector<double>* grad)>;

// Max over components of |analytic - central| / (|analytic| + |central| + 1e-12)
// with central differences of the given step.
double finite_diff_check(const LossWithGrad& fn, const ParamVector& params,
                         double step);

}  // namespace foldalign::graph
