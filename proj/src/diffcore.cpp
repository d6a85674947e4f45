#include "sesshet/diffcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian");

namespace sesshet {

size_t tensor_count(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

Tensor Tensor::zeros(std::vector<size_t> shape) {
  Tensor t;
  t.v.assign(tensor_count(shape), 0.0);
  t.shape = std::move(shape);
  return t;
}

Tensor Tensor::from(std::vector<size_t> shape, std::vector<double> values) {
  if (tensor_count(shape) != values.size())
    throw DataError("tensor shape/value count mismatch");
  Tensor t;
  t.shape = std::move(shape);
  t.v = std::move(values);
  return t;
}

Tensor Tensor::scalar(double x) { return from({}, {x}); }

Tensor Tensor::vec(std::vector<double> values) {
  size_t n = values.size();
  return from({n}, std::move(values));
}

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.v) x = stddev * rng.next_normal();
  return t;
}

Tensor Tensor::xavier(size_t rows, size_t cols, Rng& rng) {
  Tensor t = zeros({rows, cols});
  double limit = std::sqrt(6.0 / double(rows + cols));
  for (double& x : t.v) x = limit * (2.0 * rng.next_double() - 1.0);
  return t;
}

// ---------------------------------------------------------------------------
// Graph

const Graph::Node& Graph::node(Value v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw DataError("invalid graph value");
  return nodes_[v.id];
}

std::span<double> Graph::value_of(uint32_t id) {
  Node& n = nodes_[id];
  return {vbuf_.data() + n.voff, node_size(n)};
}
std::span<const double> Graph::value_of(uint32_t id) const {
  const Node& n = nodes_[id];
  return {vbuf_.data() + n.voff, node_size(n)};
}
std::span<double> Graph::grad_of(uint32_t id) {
  Node& n = nodes_[id];
  return {gbuf_.data() + n.voff, node_size(n)};
}

uint32_t Graph::new_node(Op op, uint32_t r, uint32_t c) {
  Node n;
  n.op = op;
  n.r = r;
  n.c = c;
  n.voff = static_cast<uint32_t>(vbuf_.size());
  vbuf_.resize(vbuf_.size() + (c ? size_t(r) * c : r), 0.0);
  nodes_.push_back(n);
  return static_cast<uint32_t>(nodes_.size() - 1);
}

void Graph::check_finite(uint32_t id, const char* opname) const {
  for (double x : value_of(id))
    if (!std::isfinite(x))
      throw NumericError(std::string("non-finite value produced by ") + opname);
}

void Graph::require_same_shape(Value a, Value b, const char* opname) const {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.r != nb.r || na.c != nb.c)
    throw DataError(std::string(opname) + ": shape mismatch");
}

Graph::Value Graph::input(const Tensor& t) {
  uint32_t r = 1, c = 0;
  if (t.shape.size() == 1) {
    r = static_cast<uint32_t>(t.shape[0]);
  } else if (t.shape.size() == 2) {
    r = static_cast<uint32_t>(t.shape[0]);
    c = static_cast<uint32_t>(t.shape[1]);
  } else if (!t.shape.empty()) {
    throw DataError("graph supports rank <= 2");
  }
  uint32_t id = new_node(Op::Input, r, c);
  std::copy(t.v.begin(), t.v.end(), value_of(id).begin());
  check_finite(id, "input");
  return {id};
}

Graph::Value Graph::input(std::span<const double> vec) {
  uint32_t id = new_node(Op::Input, static_cast<uint32_t>(vec.size()), 0);
  std::copy(vec.begin(), vec.end(), value_of(id).begin());
  check_finite(id, "input");
  return {id};
}

Graph::Value Graph::param(Tensor& t) {
  if (!t.trainable()) t.mark_trainable();
  Value v = input(t);
  nodes_[v.id].op = Op::Param;
  nodes_[v.id].bound = &t;
  return v;
}

Graph::Value Graph::add(Value a, Value b) {
  require_same_shape(a, b, "add");
  const Node& na = node(a);
  uint32_t id = new_node(Op::Add, na.r, na.c);
  nodes_[id].a = a.id;
  nodes_[id].b = b.id;
  auto out = value_of(id);
  auto va = value_of(a.id);
  auto vb = value_of(b.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  check_finite(id, "add");
  return {id};
}

Graph::Value Graph::sub(Value a, Value b) {
  require_same_shape(a, b, "sub");
  const Node& na = node(a);
  uint32_t id = new_node(Op::Sub, na.r, na.c);
  nodes_[id].a = a.id;
  nodes_[id].b = b.id;
  auto out = value_of(id);
  auto va = value_of(a.id);
  auto vb = value_of(b.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  check_finite(id, "sub");
  return {id};
}

Graph::Value Graph::mul(Value a, Value b) {
  require_same_shape(a, b, "mul");
  const Node& na = node(a);
  uint32_t id = new_node(Op::Mul, na.r, na.c);
  nodes_[id].a = a.id;
  nodes_[id].b = b.id;
  auto out = value_of(id);
  auto va = value_of(a.id);
  auto vb = value_of(b.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  check_finite(id, "mul");
  return {id};
}

Graph::Value Graph::scale(Value a, double s) {
  const Node& na = node(a);
  uint32_t id = new_node(Op::Scale, na.r, na.c);
  nodes_[id].a = a.id;
  nodes_[id].aux = s;
  auto out = value_of(id);
  auto va = value_of(a.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = s * va[i];
  check_finite(id, "scale");
  return {id};
}

Graph::Value Graph::matmul(Value a, Value b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.c == 0) throw DataError("matmul: left operand must be a matrix");
  uint32_t r = na.r, k = na.c;
  uint32_t id;
  if (nb.c == 0) {
    if (nb.r != k) throw DataError("matmul: inner dimension mismatch");
    id = new_node(Op::MatMul, r, 0);
    nodes_[id].a = a.id;
    nodes_[id].b = b.id;
    auto out = value_of(id);
    auto va = value_of(a.id);
    auto vb = value_of(b.id);
    for (uint32_t i = 0; i < r; ++i) {
      double acc = 0.0;
      const double* arow = va.data() + size_t(i) * k;
      for (uint32_t j = 0; j < k; ++j) acc += arow[j] * vb[j];
      out[i] = acc;
    }
  } else {
    if (nb.r != k) throw DataError("matmul: inner dimension mismatch");
    uint32_t cc = nb.c;
    id = new_node(Op::MatMul, r, cc);
    nodes_[id].a = a.id;
    nodes_[id].b = b.id;
    auto out = value_of(id);
    auto va = value_of(a.id);
    auto vb = value_of(b.id);
    for (uint32_t i = 0; i < r; ++i)
      for (uint32_t j = 0; j < cc; ++j) {
        double acc = 0.0;
        for (uint32_t t = 0; t < k; ++t)
          acc += va[size_t(i) * k + t] * vb[size_t(t) * cc + j];
        out[size_t(i) * cc + j] = acc;
      }
  }
  check_finite(id, "matmul");
  return {id};
}

Graph::Value Graph::dot(Value a, Value b) {
  require_same_shape(a, b, "dot");
  if (node(a).c != 0) throw DataError("dot: expects vectors");
  uint32_t id = new_node(Op::Dot, 1, 0);
  nodes_[id].a = a.id;
  nodes_[id].b = b.id;
  auto va = value_of(a.id);
  auto vb = value_of(b.id);
  double acc = 0.0;
  for (size_t i = 0; i < va.size(); ++i) acc += va[i] * vb[i];
  value_of(id)[0] = acc;
  check_finite(id, "dot");
  return {id};
}

Graph::Value Graph::sigmoid(Value a) {
  const Node& na = node(a);
  uint32_t id = new_node(Op::Sigmoid, na.r, na.c);
  nodes_[id].a = a.id;
  auto out = value_of(id);
  auto va = value_of(a.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-va[i]));
  check_finite(id, "sigmoid");
  return {id};
}

Graph::Value Graph::tanh(Value a) {
  const Node& na = node(a);
  uint32_t id = new_node(Op::Tanh, na.r, na.c);
  nodes_[id].a = a.id;
  auto out = value_of(id);
  auto va = value_of(a.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(va[i]);
  check_finite(id, "tanh");
  return {id};
}

Graph::Value Graph::leaky_relu(Value a, double slope) {
  const Node& na = node(a);
  uint32_t id = new_node(Op::LeakyRelu, na.r, na.c);
  nodes_[id].a = a.id;
  nodes_[id].aux = slope;
  auto out = value_of(id);
  auto va = value_of(a.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] >= 0.0 ? va[i] : slope * va[i];
  check_finite(id, "leaky_relu");
  return {id};
}

Graph::Value Graph::softmax(Value a) {
  const Node& na = node(a);
  if (na.c != 0) throw DataError("softmax: expects a vector");
  uint32_t id = new_node(Op::Softmax, na.r, 0);
  nodes_[id].a = a.id;
  auto out = value_of(id);
  auto va = value_of(a.id);
  double m = -std::numeric_limits<double>::infinity();
  for (double x : va) m = std::max(m, x);
  double z = 0.0;
  for (size_t i = 0; i < va.size(); ++i) {
    out[i] = std::exp(va[i] - m);
    z += out[i];
  }
  for (size_t i = 0; i < va.size(); ++i) out[i] /= z;
  check_finite(id, "softmax");
  return {id};
}

Graph::Value Graph::concat(std::span<const Value> parts) {
  if (parts.empty()) throw DataError("concat: empty input");
  size_t total = 0;
  for (Value p : parts) {
    if (node(p).c != 0) throw DataError("concat: expects vectors");
    total += node(p).r;
  }
  uint32_t id = new_node(Op::Concat, static_cast<uint32_t>(total), 0);
  nodes_[id].poff = static_cast<uint32_t>(ppool_.size());
  nodes_[id].pcnt = static_cast<uint32_t>(parts.size());
  for (Value p : parts) ppool_.push_back(p.id);
  auto out = value_of(id);
  size_t at = 0;
  for (Value p : parts) {
    auto vp = value_of(p.id);
    std::copy(vp.begin(), vp.end(), out.begin() + at);
    at += vp.size();
  }
  check_finite(id, "concat");
  return {id};
}

Graph::Value Graph::concat(Value a, Value b) {
  Value parts[2] = {a, b};
  return concat(std::span<const Value>(parts, 2));
}

Graph::Value Graph::pack(std::span<const Value> scalars) {
  for (Value s : scalars)
    if (node(s).r != 1 || node(s).c != 0) throw DataError("pack: expects scalars");
  return concat(scalars);
}

Graph::Value Graph::mean(std::span<const Value> xs) {
  Value s = sum(xs);
  return scale(s, 1.0 / double(xs.size()));
}

Graph::Value Graph::sum(std::span<const Value> xs) {
  if (xs.empty()) throw DataError("sum: empty input");
  const Node& n0 = node(xs[0]);
  for (Value x : xs) require_same_shape(xs[0], x, "sum");
  uint32_t id = new_node(Op::Sum, n0.r, n0.c);
  nodes_[id].poff = static_cast<uint32_t>(ppool_.size());
  nodes_[id].pcnt = static_cast<uint32_t>(xs.size());
  for (Value x : xs) ppool_.push_back(x.id);
  auto out = value_of(id);
  for (Value x : xs) {
    auto vx = value_of(x.id);
    for (size_t i = 0; i < out.size(); ++i) out[i] += vx[i];
  }
  check_finite(id, "sum");
  return {id};
}

Graph::Value Graph::weighted_sum(Value weights, std::span<const Value> vectors) {
  const Node& nw = node(weights);
  if (nw.c != 0 || nw.r != vectors.size())
    throw DataError("weighted_sum: weight/vector count mismatch");
  if (vectors.empty()) throw DataError("weighted_sum: empty input");
  for (Value x : vectors) require_same_shape(vectors[0], x, "weighted_sum");
  const Node& n0 = node(vectors[0]);
  uint32_t id = new_node(Op::WeightedSum, n0.r, n0.c);
  nodes_[id].a = weights.id;
  nodes_[id].poff = static_cast<uint32_t>(ppool_.size());
  nodes_[id].pcnt = static_cast<uint32_t>(vectors.size());
  for (Value x : vectors) ppool_.push_back(x.id);
  auto out = value_of(id);
  auto w = value_of(weights.id);
  for (size_t j = 0; j < vectors.size(); ++j) {
    auto vx = value_of(vectors[j].id);
    for (size_t i = 0; i < out.size(); ++i) out[i] += w[j] * vx[i];
  }
  check_finite(id, "weighted_sum");
  return {id};
}

Graph::Value Graph::stack_rows(std::span<const Value> rows) {
  if (rows.empty()) throw DataError("stack_rows: empty input");
  const Node& n0 = node(rows[0]);
  if (n0.c != 0) throw DataError("stack_rows: expects vectors");
  for (Value r : rows) require_same_shape(rows[0], r, "stack_rows");
  uint32_t id = new_node(Op::StackRows, static_cast<uint32_t>(rows.size()), n0.r);
  nodes_[id].poff = static_cast<uint32_t>(ppool_.size());
  nodes_[id].pcnt = static_cast<uint32_t>(rows.size());
  for (Value r : rows) ppool_.push_back(r.id);
  auto out = value_of(id);
  for (size_t j = 0; j < rows.size(); ++j) {
    auto vr = value_of(rows[j].id);
    std::copy(vr.begin(), vr.end(), out.begin() + j * vr.size());
  }
  check_finite(id, "stack_rows");
  return {id};
}

Graph::Value Graph::row(Value matrix, size_t r) {
  const Node& nm = node(matrix);
  if (nm.c == 0) throw DataError("row: expects a matrix");
  if (r >= nm.r) throw DataError("row: index out of range");
  uint32_t id = new_node(Op::Row, nm.c, 0);
  nodes_[id].a = matrix.id;
  nodes_[id].target = static_cast<uint32_t>(r);
  auto out = value_of(id);
  auto vm = value_of(matrix.id);
  std::copy(vm.begin() + r * nm.c, vm.begin() + (r + 1) * nm.c, out.begin());
  return {id};
}

Graph::Value Graph::cross_entropy(Value logits, size_t target) {
  const Node& nl = node(logits);
  if (nl.c != 0) throw DataError("cross_entropy: expects a logit vector");
  if (target >= nl.r) throw DataError("cross_entropy: target out of range");
  uint32_t id = new_node(Op::CrossEntropy, 1, 0);
  nodes_[id].a = logits.id;
  nodes_[id].target = static_cast<uint32_t>(target);
  auto vl = value_of(logits.id);
  double m = -std::numeric_limits<double>::infinity();
  for (double x : vl) m = std::max(m, x);
  double z = 0.0;
  for (double x : vl) z += std::exp(x - m);
  // cache softmax probabilities for the backward sweep
  nodes_[id].xoff = static_cast<uint32_t>(xbuf_.size());
  nodes_[id].xcnt = nl.r;
  for (double x : vl) xbuf_.push_back(std::exp(x - m) / z);
  value_of(id)[0] = (m + std::log(z)) - vl[target];
  check_finite(id, "cross_entropy");
  return {id};
}

void Graph::backward(Value root) {
  const Node& rn = node(root);
  if (node_size(rn) != 1) throw DataError("backward: root must be scalar");
  gbuf_.assign(vbuf_.size(), 0.0);
  grad_of(root.id)[0] = 1.0;
  for (uint32_t id = root.id + 1; id-- > 0;) backprop_node(id);
}

void Graph::backprop_node(uint32_t id) {
  Node& n = nodes_[id];
  auto g = grad_of(id);
  switch (n.op) {
    case Op::Input:
      break;
    case Op::Param: {
      if (n.bound) {
        auto& pg = n.bound->g;
        for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      }
      break;
    }
    case Op::Add: {
      auto ga = grad_of(n.a), gb = grad_of(n.b);
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
      break;
    }
    case Op::Sub: {
      auto ga = grad_of(n.a), gb = grad_of(n.b);
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
      break;
    }
    case Op::Mul: {
      auto ga = grad_of(n.a), gb = grad_of(n.b);
      auto va = value_of(n.a), vb = value_of(n.b);
      for (size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * vb[i];
        gb[i] += g[i] * va[i];
      }
      break;
    }
    case Op::Scale: {
      auto ga = grad_of(n.a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += n.aux * g[i];
      break;
    }
    case Op::MatMul: {
      const Node& na = nodes_[n.a];
      const Node& nb = nodes_[n.b];
      uint32_t r = na.r, k = na.c;
      auto ga = grad_of(n.a), gb = grad_of(n.b);
      auto va = value_of(n.a), vb = value_of(n.b);
      if (nb.c == 0) {
        for (uint32_t i = 0; i < r; ++i) {
          double gi = g[i];
          double* garow = ga.data() + size_t(i) * k;
          const double* arow = va.data() + size_t(i) * k;
          for (uint32_t j = 0; j < k; ++j) {
            garow[j] += gi * vb[j];
            gb[j] += gi * arow[j];
          }
        }
      } else {
        uint32_t cc = nb.c;
        for (uint32_t i = 0; i < r; ++i)
          for (uint32_t j = 0; j < cc; ++j) {
            double gij = g[size_t(i) * cc + j];
            for (uint32_t t = 0; t < k; ++t) {
              ga[size_t(i) * k + t] += gij * vb[size_t(t) * cc + j];
              gb[size_t(t) * cc + j] += gij * va[size_t(i) * k + t];
            }
          }
      }
      break;
    }
    case Op::Dot: {
      auto ga = grad_of(n.a), gb = grad_of(n.b);
      auto va = value_of(n.a), vb = value_of(n.b);
      double g0 = g[0];
      for (size_t i = 0; i < va.size(); ++i) {
        ga[i] += g0 * vb[i];
        gb[i] += g0 * va[i];
      }
      break;
    }
    case Op::Sigmoid: {
      auto ga = grad_of(n.a);
      auto y = value_of(id);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::Tanh: {
      auto ga = grad_of(n.a);
      auto y = value_of(id);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::LeakyRelu: {
      auto ga = grad_of(n.a);
      auto x = value_of(n.a);
      for (size_t i = 0; i < g.size(); ++i)
        ga[i] += x[i] >= 0.0 ? g[i] : n.aux * g[i];
      break;
    }
    case Op::Softmax: {
      auto ga = grad_of(n.a);
      auto y = value_of(id);
      double s = 0.0;
      for (size_t i = 0; i < g.size(); ++i) s += g[i] * y[i];
      for (size_t i = 0; i < g.size(); ++i) ga[i] += y[i] * (g[i] - s);
      break;
    }
    case Op::Concat: {
      size_t at = 0;
      for (uint32_t p = 0; p < n.pcnt; ++p) {
        uint32_t pid = ppool_[n.poff + p];
        auto gp = grad_of(pid);
        for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[at + i];
        at += gp.size();
      }
      break;
    }
    case Op::Sum: {
      for (uint32_t p = 0; p < n.pcnt; ++p) {
        auto gp = grad_of(ppool_[n.poff + p]);
        for (size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
      }
      break;
    }
    case Op::WeightedSum: {
      auto gw = grad_of(n.a);
      auto w = value_of(n.a);
      for (uint32_t j = 0; j < n.pcnt; ++j) {
        uint32_t pid = ppool_[n.poff + j];
        auto gv = grad_of(pid);
        auto vv = value_of(pid);
        double acc = 0.0;
        for (size_t i = 0; i < g.size(); ++i) {
          acc += g[i] * vv[i];
          gv[i] += w[j] * g[i];
        }
        gw[j] += acc;
      }
      break;
    }
    case Op::StackRows: {
      size_t d = n.c;
      for (uint32_t j = 0; j < n.pcnt; ++j) {
        auto gp = grad_of(ppool_[n.poff + j]);
        for (size_t i = 0; i < d; ++i) gp[i] += g[j * d + i];
      }
      break;
    }
    case Op::Row: {
      auto gm = grad_of(n.a);
      size_t c = nodes_[n.a].c;
      for (size_t i = 0; i < c; ++i) gm[size_t(n.target) * c + i] += g[i];
      break;
    }
    case Op::CrossEntropy: {
      auto gl = grad_of(n.a);
      double g0 = g[0];
      const double* p = xbuf_.data() + n.xoff;
      for (uint32_t i = 0; i < n.xcnt; ++i)
        gl[i] += g0 * (p[i] - (i == n.target ? 1.0 : 0.0));
      break;
    }
  }
}

std::span<const double> Graph::val(Value v) const {
  const Node& n = node(v);
  return {vbuf_.data() + n.voff, node_size(n)};
}

const std::vector<size_t> Graph::shape(Value v) const {
  const Node& n = node(v);
  if (n.c) return {n.r, n.c};
  return {n.r};
}

std::span<const double> Graph::grad(Value v) const {
  const Node& n = node(v);
  if (gbuf_.size() != vbuf_.size()) throw DataError("grad: run backward first");
  return {gbuf_.data() + n.voff, node_size(n)};
}

void Graph::clear() {
  nodes_.clear();
  vbuf_.clear();
  gbuf_.clear();
  xbuf_.clear();
  ppool_.clear();
}

// ---------------------------------------------------------------------------
// LSTM

LstmParams LstmParams::init(size_t in_dim, size_t hidden_dim, Rng& rng) {
  LstmParams p;
  for (LstmGate* gate : {&p.z, &p.f, &p.o, &p.c}) {
    gate->U = Tensor::xavier(hidden_dim, in_dim, rng);
    gate->W = Tensor::xavier(hidden_dim, hidden_dim, rng);
    gate->b = Tensor::zeros({hidden_dim});
  }
  return p;
}

LstmParams LstmParams::zeros(size_t in_dim, size_t hidden_dim) {
  LstmParams p;
  for (LstmGate* gate : {&p.z, &p.f, &p.o, &p.c}) {
    gate->U = Tensor::zeros({hidden_dim, in_dim});
    gate->W = Tensor::zeros({hidden_dim, hidden_dim});
    gate->b = Tensor::zeros({hidden_dim});
  }
  return p;
}

void LstmParams::visit(const std::string& prefix,
                       const std::function<void(const std::string&, Tensor&)>& fn) {
  const char* names[4] = {"z", "f", "o", "c"};
  LstmGate* gates[4] = {&z, &f, &o, &c};
  for (int i = 0; i < 4; ++i) {
    fn(prefix + ".U" + names[i], gates[i]->U);
    fn(prefix + ".W" + names[i], gates[i]->W);
    fn(prefix + ".b" + names[i], gates[i]->b);
  }
}

BiLstmParams BiLstmParams::init(size_t in_dim, size_t hidden_dim, Rng& rng) {
  return {LstmParams::init(in_dim, hidden_dim, rng),
          LstmParams::init(in_dim, hidden_dim, rng)};
}

void BiLstmParams::visit(const std::string& prefix,
                         const std::function<void(const std::string&, Tensor&)>& fn) {
  fwd.visit(prefix + ".fwd", fn);
  bwd.visit(prefix + ".bwd", fn);
}

static Graph::Value bind_tensor(Graph& g, Tensor& t, bool trainable) {
  return trainable ? g.param(t) : g.input(t);
}

LstmRef bind(Graph& g, LstmParams& p, bool trainable) {
  LstmRef r;
  r.Uz = bind_tensor(g, p.z.U, trainable);
  r.Wz = bind_tensor(g, p.z.W, trainable);
  r.bz = bind_tensor(g, p.z.b, trainable);
  r.Uf = bind_tensor(g, p.f.U, trainable);
  r.Wf = bind_tensor(g, p.f.W, trainable);
  r.bf = bind_tensor(g, p.f.b, trainable);
  r.Uo = bind_tensor(g, p.o.U, trainable);
  r.Wo = bind_tensor(g, p.o.W, trainable);
  r.bo = bind_tensor(g, p.o.b, trainable);
  r.Uc = bind_tensor(g, p.c.U, trainable);
  r.Wc = bind_tensor(g, p.c.W, trainable);
  r.bc = bind_tensor(g, p.c.b, trainable);
  return r;
}

BiLstmRef bind(Graph& g, BiLstmParams& p, bool trainable) {
  return {bind(g, p.fwd, trainable), bind(g, p.bwd, trainable)};
}

static Graph::Value gate_preact(Graph& g, Graph::Value U, Graph::Value W,
                                Graph::Value b, Graph::Value x, Graph::Value h) {
  return g.add(g.add(g.matmul(U, x), g.matmul(W, h)), b);
}

LstmStateV lstm_cell(Graph& g, Graph::Value x, LstmStateV prev, const LstmRef& p) {
  Graph::Value z = g.sigmoid(gate_preact(g, p.Uz, p.Wz, p.bz, x, prev.h));
  Graph::Value f = g.sigmoid(gate_preact(g, p.Uf, p.Wf, p.bf, x, prev.h));
  Graph::Value o = g.sigmoid(gate_preact(g, p.Uo, p.Wo, p.bo, x, prev.h));
  Graph::Value chat = g.tanh(gate_preact(g, p.Uc, p.Wc, p.bc, x, prev.h));
  Graph::Value c = g.add(g.mul(f, prev.c), g.mul(z, chat));
  Graph::Value h = g.mul(g.tanh(c), o);
  return {h, c};
}

std::vector<Graph::Value> bilstm_encode(Graph& g, std::span<const Graph::Value> seq,
                                        const BiLstmRef& p) {
  if (seq.empty()) throw DataError("bilstm_encode: empty sequence");
  size_t hidden = g.shape(p.fwd.bz)[0];
  Tensor zero = Tensor::zeros({hidden});

  std::vector<Graph::Value> hf(seq.size()), hb(seq.size());
  LstmStateV st{g.input(zero), g.input(zero)};
  for (size_t i = 0; i < seq.size(); ++i) {
    st = lstm_cell(g, seq[i], st, p.fwd);
    hf[i] = st.h;
  }
  st = {g.input(zero), g.input(zero)};
  for (size_t i = seq.size(); i-- > 0;) {
    st = lstm_cell(g, seq[i], st, p.bwd);
    hb[i] = st.h;
  }
  std::vector<Graph::Value> out(seq.size());
  for (size_t i = 0; i < seq.size(); ++i) out[i] = g.concat(hf[i], hb[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const ScalarFn& build, std::vector<Tensor> params, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw DataError("grad_check: eps must be in [1e-7, 1e-3]");

  auto forward = [&](std::vector<Tensor>& ps) {
    Graph g;
    std::vector<Graph::Value> leaves;
    leaves.reserve(ps.size());
    for (Tensor& t : ps) leaves.push_back(g.param(t));
    Graph::Value root = build(g, leaves);
    if (tensor_count(g.shape(root)) != 1)
      throw DataError("grad_check: computation must be scalar-valued");
    return std::pair<double, Graph::Value>(g.val(root)[0], root);
  };

  // Analytic pass.
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    std::vector<Graph::Value> leaves;
    for (Tensor& t : params) {
      t.mark_trainable();
      leaves.push_back(g.param(t));
    }
    Graph::Value root = build(g, leaves);
    if (tensor_count(g.shape(root)) != 1)
      throw DataError("grad_check: computation must be scalar-valued");
    if (!std::isfinite(g.val(root)[0]))
      throw NumericError("grad_check: non-finite objective");
    g.backward(root);
    for (Tensor& t : params) analytic.push_back(t.g);
  }

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (size_t i = 0; i < params[pi].v.size(); ++i) {
      double saved = params[pi].v[i];
      params[pi].v[i] = saved + eps;
      double fp = forward(params).first;
      params[pi].v[i] = saved - eps;
      double fm = forward(params).first;
      params[pi].v[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[pi][i];
      double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Named-tensor checkpoint container

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'H', 'E', 'T', 'C', 'K', '0', '1'};

struct HashingWriter {
  std::ofstream out;
  uint64_t hash = kFnvOffset;
  void write(const void* data, size_t n) {
    out.write(static_cast<const char*>(data), std::streamsize(n));
    hash = fnv1a64_bytes(data, n, hash);
  }
  template <typename T>
  void write_pod(const T& x) {
    write(&x, sizeof(T));
  }
};

struct HashingReader {
  std::ifstream in;
  uint64_t hash = kFnvOffset;
  void read(void* data, size_t n) {
    in.read(static_cast<char*>(data), std::streamsize(n));
    if (!in) throw IoError("checkpoint: truncated file");
    hash = fnv1a64_bytes(data, n, hash);
  }
  template <typename T>
  T read_pod() {
    T x;
    read(&x, sizeof(T));
    return x;
  }
};

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  HashingWriter w;
  w.out.open(path, std::ios::binary);
  if (!w.out) throw IoError("cannot open for writing: " + path);
  w.out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.write_pod<uint64_t>(tensors.size());
  for (const auto& [name, t] : tensors) {
    w.write_pod<uint32_t>(static_cast<uint32_t>(name.size()));
    w.write(name.data(), name.size());
    w.write_pod<uint32_t>(static_cast<uint32_t>(t->shape.size()));
    for (size_t d : t->shape) w.write_pod<uint64_t>(d);
    w.write(t->v.data(), t->v.size() * sizeof(double));
  }
  uint64_t checksum = w.hash;
  w.out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  if (!w.out) throw IoError("write failed: " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  HashingReader r;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open: " + path);
  char magic[8];
  r.in.read(magic, sizeof(magic));
  if (!r.in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  uint64_t count = r.read_pod<uint64_t>();
  std::map<std::string, Tensor> out;
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = r.read_pod<uint32_t>();
    if (name_len > 4096) throw IoError("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len);
    uint32_t rank = r.read_pod<uint32_t>();
    if (rank > 2) throw IoError("checkpoint: rank > 2");
    std::vector<size_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = size_t(r.read_pod<uint64_t>());
    Tensor t = Tensor::zeros(shape);
    r.read(t.v.data(), t.v.size() * sizeof(double));
    out.emplace(std::move(name), std::move(t));
  }
  uint64_t expect = r.hash;
  uint64_t stored;
  r.in.read(reinterpret_cast<char*>(&stored), sizeof(stored));
  if (!r.in || stored != expect) throw IoError("checkpoint: checksum mismatch in " + path);
  return out;
}

}  // namespace sesshet
