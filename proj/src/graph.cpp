#include "foldalign/graph.hpp"

#include <algorithm>
#include <cmath>

namespace foldalign::graph {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) = -softplus(-x)
double stable_logsigmoid(double x) {
  if (x < 0.0) return x - std::log1p(std::exp(x));
  return -std::log1p(std::exp(-x));
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

void MlpSpec::validate() const {
  if (input_dim < 1 || output_dim < 1)
    throw ShapeError("MlpSpec: input and output dims must be >= 1");
  for (int h : hidden_dims)
    if (h < 1) throw ShapeError("MlpSpec: hidden dims must be >= 1");
}

std::vector<std::pair<int, int>> MlpSpec::layer_shapes() const {
  validate();
  std::vector<std::pair<int, int>> shapes;
  int in = input_dim;
  for (int h : hidden_dims) {
    shapes.emplace_back(h, in);
    in = h;
  }
  shapes.emplace_back(output_dim, in);
  return shapes;
}

int MlpSpec::param_count() const {
  int n = 0;
  for (auto [r, c] : layer_shapes()) n += r * c + r;
  return n;
}

int ParamVector::add_segment(const std::string& name, int rows, int cols,
                             int fan_in) {
  if (rows < 1 || cols < 1) throw ShapeError("ParamVector: bad segment shape");
  ParamSegment seg;
  seg.name = name;
  seg.rows = rows;
  seg.cols = cols;
  seg.fan_in = fan_in > 0 ? fan_in : cols;
  seg.offset = values_.size();
  segments_.push_back(seg);
  values_.resize(values_.size() + static_cast<size_t>(rows) * cols, 0.0);
  return static_cast<int>(segments_.size()) - 1;
}

const ParamSegment& ParamVector::segment(int idx) const {
  if (idx < 0 || idx >= num_segments())
    throw ShapeError("ParamVector: segment index out of range");
  return segments_[static_cast<size_t>(idx)];
}

int ParamVector::find_segment(const std::string& name) const {
  for (int i = 0; i < num_segments(); ++i)
    if (segments_[static_cast<size_t>(i)].name == name) return i;
  return -1;
}

std::span<double> ParamVector::segment_values(int idx) {
  const auto& s = segment(idx);
  return {values_.data() + s.offset, static_cast<size_t>(s.size())};
}

std::span<const double> ParamVector::segment_values(int idx) const {
  const auto& s = segment(idx);
  return {values_.data() + s.offset, static_cast<size_t>(s.size())};
}

void ParamVector::check_finite() const {
  for (size_t i = 0; i < values_.size(); ++i)
    if (!std::isfinite(values_[i]))
      throw NumericalError("non-finite parameter at index " + std::to_string(i));
}

void ParamVector::init_uniform_scaled(Rng& rng) {
  for (const auto& s : segments_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    for (int i = 0; i < s.size(); ++i)
      values_[s.offset + static_cast<size_t>(i)] = rng.uniform(-bound, bound);
  }
}

void ParamVector::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

int append_mlp_segments(ParamVector& params, const std::string& prefix,
                        const MlpSpec& spec) {
  const auto shapes = spec.layer_shapes();
  int first = -1;
  for (size_t l = 0; l < shapes.size(); ++l) {
    const auto [rows, cols] = shapes[l];
    const int w = params.add_segment(prefix + ".W" + std::to_string(l), rows, cols, cols);
    if (first < 0) first = w;
    params.add_segment(prefix + ".b" + std::to_string(l), rows, 1, cols);
  }
  return first;
}

std::vector<double> mlp_forward(const MlpSpec& spec, const ParamVector& params,
                                std::span<const double> input,
                                int first_segment) {
  const auto shapes = spec.layer_shapes();
  if (static_cast<int>(input.size()) != spec.input_dim)
    throw ShapeError("mlp_forward: input length " + std::to_string(input.size()) +
                     " != input_dim " + std::to_string(spec.input_dim));
  std::vector<double> x(input.begin(), input.end());
  for (size_t l = 0; l < shapes.size(); ++l) {
    const auto [rows, cols] = shapes[l];
    const auto w = params.segment_values(first_segment + static_cast<int>(2 * l));
    const auto b = params.segment_values(first_segment + static_cast<int>(2 * l) + 1);
    if (static_cast<int>(w.size()) != rows * cols ||
        static_cast<int>(b.size()) != rows)
      throw ShapeError("mlp_forward: params do not match spec");
    std::vector<double> y(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      double acc = b[static_cast<size_t>(r)];
      const double* wr = w.data() + static_cast<size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += wr[c] * x[static_cast<size_t>(c)];
      y[static_cast<size_t>(r)] = acc;
    }
    if (l + 1 < shapes.size()) {
      for (double& v : y)
        v = spec.activation == Activation::tanh ? std::tanh(v) : std::max(0.0, v);
    }
    x = std::move(y);
  }
  return x;
}

// ---------------- Tape ----------------

Tape::NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw ShapeError("Tape: node id out of range");
  return nodes_[static_cast<size_t>(id)];
}

void Tape::check_same_dim(NodeId a, NodeId b, const char* op) const {
  if (node(a).val.size() != node(b).val.size())
    throw ShapeError(std::string("Tape: dimension mismatch in ") + op);
}

NodeId Tape::constant(std::span<const double> v) {
  Node n;
  n.op = Op::constant;
  n.val.assign(v.begin(), v.end());
  return push(std::move(n));
}

NodeId Tape::scalar(double v) { return constant(std::span<const double>(&v, 1)); }

NodeId Tape::param(int segment_index) {
  const auto vals = params_->segment_values(segment_index);
  Node n;
  n.op = Op::param;
  n.seg = segment_index;
  n.val.assign(vals.begin(), vals.end());
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_same_dim(a, b, "add");
  Node n;
  n.op = Op::add;
  n.a = a;
  n.b = b;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = node(a).val[i] + node(b).val[i];
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check_same_dim(a, b, "sub");
  Node n;
  n.op = Op::sub;
  n.a = a;
  n.b = b;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = node(a).val[i] - node(b).val[i];
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_same_dim(a, b, "mul");
  Node n;
  n.op = Op::mul;
  n.a = a;
  n.b = b;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = node(a).val[i] * node(b).val[i];
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double c) {
  Node n;
  n.op = Op::scale;
  n.a = a;
  n.k = c;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = c * node(a).val[i];
  return push(std::move(n));
}

NodeId Tape::add_scalar(NodeId a, double c) {
  Node n;
  n.op = Op::add_scalar;
  n.a = a;
  n.k = c;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = node(a).val[i] + c;
  return push(std::move(n));
}

NodeId Tape::matvec(NodeId w, NodeId x, int rows, int cols) {
  if (static_cast<int>(node(w).val.size()) != rows * cols)
    throw ShapeError("Tape: matvec weight size mismatch");
  if (static_cast<int>(node(x).val.size()) != cols)
    throw ShapeError("Tape: matvec input size mismatch");
  Node n;
  n.op = Op::matvec;
  n.a = w;
  n.b = x;
  n.rows = rows;
  n.cols = cols;
  n.val.assign(static_cast<size_t>(rows), 0.0);
  const auto& wv = node(w).val;
  const auto& xv = node(x).val;
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* wr = wv.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) acc += wr[c] * xv[static_cast<size_t>(c)];
    n.val[static_cast<size_t>(r)] = acc;
  }
  return push(std::move(n));
}

NodeId Tape::affine(NodeId w, NodeId b, NodeId x, int rows, int cols) {
  if (static_cast<int>(node(b).val.size()) != rows)
    throw ShapeError("Tape: affine bias size mismatch");
  const NodeId mv = matvec(w, x, rows, cols);
  return add(mv, b);
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.op = Op::tanh_;
  n.a = a;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::tanh(node(a).val[i]);
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  Node n;
  n.op = Op::relu_;
  n.a = a;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = std::max(0.0, node(a).val[i]);
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  Node n;
  n.op = Op::sigmoid_;
  n.a = a;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = stable_sigmoid(node(a).val[i]);
  return push(std::move(n));
}

NodeId Tape::logsigmoid(NodeId a) {
  Node n;
  n.op = Op::logsigmoid_;
  n.a = a;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = stable_logsigmoid(node(a).val[i]);
  return push(std::move(n));
}

NodeId Tape::softplus(NodeId a) {
  Node n;
  n.op = Op::softplus_;
  n.a = a;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i)
    n.val[i] = stable_softplus(node(a).val[i]);
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId a) {
  const auto& x = node(a).val;
  if (x.empty()) throw ShapeError("Tape: softmax of empty vector");
  Node n;
  n.op = Op::softmax_;
  n.a = a;
  n.val.resize(x.size());
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    n.val[i] = std::exp(x[i] - m);
    z += n.val[i];
  }
  for (double& v : n.val) v /= z;
  return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  Node n;
  n.op = Op::exp_;
  n.a = a;
  n.val.resize(node(a).val.size());
  for (size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::exp(node(a).val[i]);
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  const auto& x = node(a).val;
  if (x.empty()) throw ShapeError("Tape: mean of empty vector");
  Node n;
  n.op = Op::mean_;
  n.a = a;
  double acc = 0.0;
  for (double v : x) acc += v;
  n.val.assign(1, acc / static_cast<double>(x.size()));
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  Node n;
  n.op = Op::sum_;
  n.a = a;
  double acc = 0.0;
  for (double v : node(a).val) acc += v;
  n.val.assign(1, acc);
  return push(std::move(n));
}

NodeId Tape::sum_sq(NodeId a) {
  Node n;
  n.op = Op::sum_sq_;
  n.a = a;
  double acc = 0.0;
  for (double v : node(a).val) acc += v * v;
  n.val.assign(1, acc);
  return push(std::move(n));
}

NodeId Tape::dot(NodeId a, NodeId b) {
  check_same_dim(a, b, "dot");
  Node n;
  n.op = Op::dot_;
  n.a = a;
  n.b = b;
  double acc = 0.0;
  for (size_t i = 0; i < node(a).val.size(); ++i)
    acc += node(a).val[i] * node(b).val[i];
  n.val.assign(1, acc);
  return push(std::move(n));
}

NodeId Tape::cosine(NodeId a, NodeId b) {
  check_same_dim(a, b, "cosine");
  Node n;
  n.op = Op::cosine_;
  n.a = a;
  n.b = b;
  const auto& av = node(a).val;
  const auto& bv = node(b).val;
  double d = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    d += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) {
    zero_norm_seen_ = true;
    n.val.assign(1, 0.0);
    n.k = 0.0;  // marks the degenerate case for backward
  } else {
    n.val.assign(1, d / std::sqrt(na2 * nb2));
    n.k = 1.0;
  }
  return push(std::move(n));
}

NodeId Tape::maxval(NodeId a) {
  const auto& x = node(a).val;
  if (x.empty()) throw ShapeError("Tape: max of empty vector");
  Node n;
  n.op = Op::max_;
  n.a = a;
  size_t arg = 0;
  for (size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[arg]) arg = i;
  n.rows = static_cast<int>(arg);
  n.val.assign(1, x[arg]);
  return push(std::move(n));
}

NodeId Tape::stack(std::span<const NodeId> scalars) {
  if (scalars.empty()) throw ShapeError("Tape: stack of zero nodes");
  Node n;
  n.op = Op::stack_;
  n.list.assign(scalars.begin(), scalars.end());
  n.val.reserve(scalars.size());
  for (NodeId id : scalars) {
    if (node(id).val.size() != 1)
      throw ShapeError("Tape: stack operands must be scalars");
    n.val.push_back(node(id).val[0]);
  }
  return push(std::move(n));
}

NodeId Tape::concat(std::span<const NodeId> vectors) {
  if (vectors.empty()) throw ShapeError("Tape: concat of zero nodes");
  Node n;
  n.op = Op::concat_;
  n.list.assign(vectors.begin(), vectors.end());
  for (NodeId id : vectors)
    n.val.insert(n.val.end(), node(id).val.begin(), node(id).val.end());
  return push(std::move(n));
}

std::span<const double> Tape::value(NodeId id) const { return node(id).val; }

double Tape::scalar_value(NodeId id) const {
  const auto& v = node(id).val;
  if (v.size() != 1) throw ShapeError("Tape: node is not a scalar");
  return v[0];
}

int Tape::dim(NodeId id) const { return static_cast<int>(node(id).val.size()); }

NodeId Tape::mlp(const MlpSpec& spec, int first_segment, NodeId input) {
  const auto shapes = spec.layer_shapes();
  if (dim(input) != spec.input_dim)
    throw ShapeError("Tape: mlp input dim mismatch");
  NodeId x = input;
  for (size_t l = 0; l < shapes.size(); ++l) {
    const auto [rows, cols] = shapes[l];
    const NodeId w = param(first_segment + static_cast<int>(2 * l));
    const NodeId b = param(first_segment + static_cast<int>(2 * l) + 1);
    x = affine(w, b, x, rows, cols);
    if (l + 1 < shapes.size())
      x = spec.activation == Activation::tanh ? tanh(x) : relu(x);
  }
  return x;
}

void Tape::backward(NodeId loss, std::span<double> grad) const {
  if (node(loss).val.size() != 1)
    throw ShapeError("Tape: backward requires a scalar loss node");
  if (grad.size() != params_->size())
    throw ShapeError("Tape: gradient buffer size mismatch");

  std::vector<std::vector<double>> adj(nodes_.size());
  adj[static_cast<size_t>(loss)].assign(1, 1.0);

  auto adj_of = [&](NodeId id) -> std::vector<double>& {
    auto& a = adj[static_cast<size_t>(id)];
    if (a.empty()) a.assign(nodes_[static_cast<size_t>(id)].val.size(), 0.0);
    return a;
  };

  for (NodeId id = loss; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    const auto& g = adj[static_cast<size_t>(id)];
    if (g.empty()) continue;

    switch (n.op) {
      case Op::constant:
        break;
      case Op::param: {
        const auto& seg = params_->segment(n.seg);
        for (size_t i = 0; i < g.size(); ++i) grad[seg.offset + i] += g[i];
        break;
      }
      case Op::add: {
        auto& ga = adj_of(n.a);
        auto& gb = adj_of(n.b);
        for (size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::sub: {
        auto& ga = adj_of(n.a);
        auto& gb = adj_of(n.b);
        for (size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::mul: {
        auto& ga = adj_of(n.a);
        auto& gb = adj_of(n.b);
        const auto& av = node(n.a).val;
        const auto& bv = node(n.b).val;
        for (size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::scale: {
        auto& ga = adj_of(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += n.k * g[i];
        break;
      }
      case Op::add_scalar: {
        auto& ga = adj_of(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        break;
      }
      case Op::matvec: {
        auto& gw = adj_of(n.a);
        auto& gx = adj_of(n.b);
        const auto& wv = node(n.a).val;
        const auto& xv = node(n.b).val;
        for (int r = 0; r < n.rows; ++r) {
          const double gr = g[static_cast<size_t>(r)];
          if (gr == 0.0) continue;
          double* gwr = gw.data() + static_cast<size_t>(r) * n.cols;
          const double* wr = wv.data() + static_cast<size_t>(r) * n.cols;
          for (int c = 0; c < n.cols; ++c) {
            gwr[c] += gr * xv[static_cast<size_t>(c)];
            gx[static_cast<size_t>(c)] += gr * wr[c];
          }
        }
        break;
      }
      case Op::affine:
        throw NumericalError("Tape: affine is lowered, never stored");
      case Op::tanh_: {
        auto& ga = adj_of(n.a);
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
        break;
      }
      case Op::relu_: {
        auto& ga = adj_of(n.a);
        const auto& xv = node(n.a).val;
        for (size_t i = 0; i < g.size(); ++i)
          if (xv[i] > 0.0) ga[i] += g[i];
        break;
      }
      case Op::sigmoid_: {
        auto& ga = adj_of(n.a);
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * n.val[i] * (1.0 - n.val[i]);
        break;
      }
      case Op::logsigmoid_: {
        auto& ga = adj_of(n.a);
        const auto& xv = node(n.a).val;
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * stable_sigmoid(-xv[i]);
        break;
      }
      case Op::softplus_: {
        auto& ga = adj_of(n.a);
        const auto& xv = node(n.a).val;
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * stable_sigmoid(xv[i]);
        break;
      }
      case Op::softmax_: {
        auto& ga = adj_of(n.a);
        double gy = 0.0;
        for (size_t i = 0; i < g.size(); ++i) gy += g[i] * n.val[i];
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += n.val[i] * (g[i] - gy);
        break;
      }
      case Op::exp_: {
        auto& ga = adj_of(n.a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.val[i];
        break;
      }
      case Op::mean_: {
        auto& ga = adj_of(n.a);
        const double s = g[0] / static_cast<double>(ga.size());
        for (double& v : ga) v += s;
        break;
      }
      case Op::sum_: {
        auto& ga = adj_of(n.a);
        for (double& v : ga) v += g[0];
        break;
      }
      case Op::sum_sq_: {
        auto& ga = adj_of(n.a);
        const auto& xv = node(n.a).val;
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * xv[i] * g[0];
        break;
      }
      case Op::dot_: {
        auto& ga = adj_of(n.a);
        auto& gb = adj_of(n.b);
        const auto& av = node(n.a).val;
        const auto& bv = node(n.b).val;
        for (size_t i = 0; i < ga.size(); ++i) {
          ga[i] += g[0] * bv[i];
          gb[i] += g[0] * av[i];
        }
        break;
      }
      case Op::cosine_: {
        if (n.k == 0.0) break;  // degenerate pair carries no gradient
        auto& ga = adj_of(n.a);
        auto& gb = adj_of(n.b);
        const auto& av = node(n.a).val;
        const auto& bv = node(n.b).val;
        double na2 = 0.0, nb2 = 0.0;
        for (size_t i = 0; i < av.size(); ++i) {
          na2 += av[i] * av[i];
          nb2 += bv[i] * bv[i];
        }
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double c = n.val[0];
        for (size_t i = 0; i < av.size(); ++i) {
          ga[i] += g[0] * (bv[i] / (na * nb) - c * av[i] / na2);
          gb[i] += g[0] * (av[i] / (na * nb) - c * bv[i] / nb2);
        }
        break;
      }
      case Op::max_: {
        auto& ga = adj_of(n.a);
        ga[static_cast<size_t>(n.rows)] += g[0];
        break;
      }
      case Op::stack_: {
        for (size_t i = 0; i < n.list.size(); ++i)
          adj_of(n.list[i])[0] += g[i];
        break;
      }
      case Op::concat_: {
        size_t off = 0;
        for (NodeId part : n.list) {
          auto& gp = adj_of(part);
          for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
          off += gp.size();
        }
        break;
      }
    }
  }
}

double finite_diff_check(const LossWithGrad& fn, const ParamVector& params,
                         double step) {
  if (!(step > 0.0)) throw ShapeError("finite_diff_check: step must be > 0");
  std::vector<double> analytic(params.size(), 0.0);
  ParamVector work = params;
  const double base = fn(work, &analytic);
  if (!std::isfinite(base))
    throw NumericalError("finite_diff_check: non-finite loss at base point");

  double max_rel = 0.0;
  for (size_t i = 0; i < params.size(); ++i) {
    const double orig = work.values()[i];
    work.values()[i] = orig + step;
    const double up = fn(work, nullptr);
    work.values()[i] = orig - step;
    const double down = fn(work, nullptr);
    work.values()[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("finite_diff_check: non-finite loss probing component " +
                           std::to_string(i));
    const double central = (up - down) / (2.0 * step);
    const double rel = std::abs(analytic[i] - central) /
                       (std::abs(analytic[i]) + std::abs(central) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace foldalign::graph
