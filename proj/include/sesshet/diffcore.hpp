#pragma once

// Dense tensors (rank 0..2) with reverse-mode differentiation, sized for the
// aggregation model: matmul, elementwise arithmetic, sigmoid/tanh/LeakyReLU,
// softmax, concatenation, means, weighted sums, an LSTM cell, and a central
// finite-difference checker. Everything runs in 64-bit floats; the tape is
// rebuilt per batch (define-by-run) and node storage is flat so clearing a
// graph between batches does not thrash the allocator.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sesshet/common.hpp"

namespace sesshet {

struct Tensor {
  // shape: {} scalar, {n} vector, {r, c} matrix.
  std::vector<size_t> shape;
  std::vector<double> v;
  std::vector<double> g;  // gradient slot; non-empty iff trainable

  Tensor() = default;
  static Tensor zeros(std::vector<size_t> shape);
  static Tensor from(std::vector<size_t> shape, std::vector<double> values);
  static Tensor scalar(double x);
  static Tensor vec(std::vector<double> values);
  static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev);
  // Xavier/Glorot uniform for a (rows x cols) weight matrix.
  static Tensor xavier(size_t rows, size_t cols, Rng& rng);

  size_t size() const { return v.size(); }
  size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void mark_trainable() { g.assign(v.size(), 0.0); }
  bool trainable() const { return !g.empty(); }
  void zero_grad() { g.assign(v.size(), 0.0); }
};

size_t tensor_count(const std::vector<size_t>& shape);

// Reverse-mode tape. Values are handles into the tape; ops evaluate eagerly
// and record enough to run the backward sweep. Any op whose output contains
// a non-finite entry throws NumericError.
class Graph {
 public:
  struct Value {
    uint32_t id = UINT32_MAX;
    bool valid() const { return id != UINT32_MAX; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves.
  Value input(const Tensor& t);
  Value input(std::span<const double> vec);
  Value param(Tensor& t);  // backward accumulates into t.g (t must be trainable)

  // Elementwise (same shape).
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, double s);

  // matmul: (r x k)·(k x c) -> (r x c), or (r x k)·(k) -> (r).
  Value matmul(Value a, Value b);
  Value dot(Value a, Value b);  // vectors -> scalar

  Value sigmoid(Value a);
  Value tanh(Value a);
  Value leaky_relu(Value a, double slope);
  Value softmax(Value a);  // vector -> vector

  // Vector concatenation, in argument order.
  Value concat(std::span<const Value> parts);
  Value concat(Value a, Value b);
  // Packs scalars into a vector.
  Value pack(std::span<const Value> scalars);

  // Elementwise mean / sum over same-shaped values.
  Value mean(std::span<const Value> xs);
  Value sum(std::span<const Value> xs);

  // out = sum_j weights[j] * vectors[j]; weights is a vector of matching length.
  Value weighted_sum(Value weights, std::span<const Value> vectors);

  // Rows stacked into a (n x d) matrix.
  Value stack_rows(std::span<const Value> rows);
  Value row(Value matrix, size_t r);

  // Numerically stable -log softmax(logits)[target].
  Value cross_entropy(Value logits, size_t target);

  void backward(Value root);  // root must be scalar

  std::span<const double> val(Value v) const;
  const std::vector<size_t> shape(Value v) const;
  // Gradient captured by the last backward() sweep.
  std::span<const double> grad(Value v) const;

  size_t num_nodes() const { return nodes_.size(); }
  // Drops all nodes but keeps buffer capacity for reuse.
  void clear();

 private:
  enum class Op : uint8_t {
    Input, Param, Add, Sub, Mul, Scale, MatMul, Dot, Sigmoid, Tanh,
    LeakyRelu, Softmax, Concat, Sum, WeightedSum, StackRows, Row,
    CrossEntropy,
  };

  struct Node {
    Op op;
    uint32_t r = 1, c = 0;     // c==0: vector of length r (scalar when r==1)
    uint32_t a = 0, b = 0;     // binary parents
    uint32_t poff = 0, pcnt = 0;  // parent list in ppool_
    uint32_t voff = 0;         // value offset in vbuf_
    uint32_t xoff = 0, xcnt = 0;  // scratch (cached softmax etc.) in xbuf_
    double aux = 0.0;
    uint32_t target = 0;       // cross-entropy label / row index
    Tensor* bound = nullptr;   // Param leaves
  };

  size_t node_size(const Node& n) const { return n.c ? size_t(n.r) * n.c : n.r; }
  std::span<double> value_of(uint32_t id);
  std::span<const double> value_of(uint32_t id) const;
  std::span<double> grad_of(uint32_t id);
  uint32_t new_node(Op op, uint32_t r, uint32_t c);
  void check_finite(uint32_t id, const char* opname) const;
  void require_same_shape(Value a, Value b, const char* opname) const;
  const Node& node(Value v) const;
  void backprop_node(uint32_t id);

  std::vector<Node> nodes_;
  std::vector<double> vbuf_, gbuf_, xbuf_;
  std::vector<uint32_t> ppool_;
};

// LSTM gate parameters. U maps the input, W the previous hidden state.
struct LstmGate {
  Tensor U, W, b;
};

// One direction worth of cell parameters, gates named as in the update
// rule: z and f mix the candidate and the carried cell state, o gates the
// output, c produces the candidate.
struct LstmParams {
  LstmGate z, f, o, c;
  static LstmParams init(size_t in_dim, size_t hidden_dim, Rng& rng);
  static LstmParams zeros(size_t in_dim, size_t hidden_dim);
  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Tensor&)>& fn);
};

struct BiLstmParams {
  LstmParams fwd, bwd;
  static BiLstmParams init(size_t in_dim, size_t hidden_dim, Rng& rng);
  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Tensor&)>& fn);
};

// Graph-bound handles for one direction.
struct LstmRef {
  Graph::Value Uz, Wz, bz, Uf, Wf, bf, Uo, Wo, bo, Uc, Wc, bc;
};
struct BiLstmRef {
  LstmRef fwd, bwd;
};

LstmRef bind(Graph& g, LstmParams& p, bool trainable);
BiLstmRef bind(Graph& g, BiLstmParams& p, bool trainable);

struct LstmStateV {
  Graph::Value h, c;
};

// One cell step:
//   z = sigma(Uz x + Wz h_prev + bz)     f, o analogous
//   chat = tanh(Uc x + Wc h_prev + bc)
//   c = f o c_prev + z o chat
//   h = tanh(c) o o
LstmStateV lstm_cell(Graph& g, Graph::Value x, LstmStateV prev, const LstmRef& p);

// Forward pass left-to-right plus backward pass right-to-left; output per
// position is the concatenation of the two hidden states (2h each).
std::vector<Graph::Value> bilstm_encode(Graph& g, std::span<const Graph::Value> seq,
                                        const BiLstmRef& p);

// Central-difference gradient checker. build() receives a fresh graph plus
// param leaves (bound in order) and returns a scalar root. Returns the max
// over all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
using ScalarFn =
    std::function<Graph::Value(Graph&, const std::vector<Graph::Value>&)>;
double grad_check(const ScalarFn& build, std::vector<Tensor> params,
                  double eps = 1e-5);

// Named-tensor container with a checksum trailer; little-endian f64 payload.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

}  // namespace sesshet
