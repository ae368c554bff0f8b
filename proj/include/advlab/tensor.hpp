#pragma once

// Dense tensors with reverse-mode differentiation on an explicit tape,
// plus seeded randomness and dropout masks. Everything downstream
// (model, adversary, trainers, robustness) computes on this substrate.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace advlab {

/// Raised when an operation produces NaN/Inf or a run diverges.
/// Non-finite values are never propagated silently.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

class Tape;

/// Dense row-major tensor of 64-bit floats. A Tensor is a cheap handle:
/// copying shares storage, clone() makes a deep detached copy. A rank-0
/// tensor (empty shape) is a scalar with one element.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  double* data();
  const double* data() const;
  std::span<const double> values() const;
  /// Value of a rank-0 / single-element tensor.
  double item() const;

  bool requires_grad() const;

  /// Deep copy, detached from any tape.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Overwrite all elements (detached mutation; shapes must match for copy_from).
  void fill(double value);
  void copy_from(const Tensor& src);

  /// Tape this tensor is attached to, or nullptr.
  Tape* tape() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  friend class Tape;
  friend Tape* common_tape(std::initializer_list<Tensor> ts);
};

/// Gradient lookup returned by Tape::backward / Tape::vjp, keyed by
/// tensor identity (storage, not value).
class Gradients {
 public:
  bool contains(const Tensor& t) const;
  const Tensor& at(const Tensor& t) const;

 private:
  friend class Tape;
  std::unordered_map<const void*, Tensor> by_storage_;
};

/// Ordered record of primitive operations. Recording happens implicitly:
/// any op whose input is attached to a tape appends a node. Creation
/// order is a topological order, so backward walks nodes in reverse and
/// visits each exactly once. replay() recomputes every non-leaf output
/// in place from the current leaf values, bit-for-bit reproducibly.
class Tape {
 public:
  using Recompute = std::function<void(const std::vector<Tensor>&, Tensor&)>;
  // gin[i] is filled only where need[i] is set.
  using BackwardFn = std::function<void(const std::vector<Tensor>&, const Tensor& out,
                                        const Tensor& gout, const std::vector<char>& need,
                                        std::vector<Tensor>& gin)>;

  Tape() = default;
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Mark a tensor as a differentiable leaf on this tape.
  Tensor& watch(Tensor& t);

  /// Recompute all recorded outputs in place, in recording order.
  void replay();

  /// Reverse-mode gradients of a scalar loss for the requested tensors.
  /// Tensors unreachable from the loss get zero gradients; tensors not
  /// on the tape at all are an error.
  Gradients backward(const Tensor& loss, const std::vector<Tensor>& wanted);

  /// Vector-Jacobian product: like backward but seeds a non-scalar
  /// output with an explicit cotangent of the same shape.
  Gradients vjp(const Tensor& output, const Tensor& cotangent,
                const std::vector<Tensor>& wanted);

  bool owns(const Tensor& t) const;
  std::size_t node_count() const { return nodes_.size(); }

  /// Append an op node; inputs not yet on the tape are adopted as
  /// constant (non-differentiated) leaves. Used by the op library.
  void record(std::vector<Tensor> inputs, Tensor out, Recompute fwd, BackwardFn bwd,
              const char* op_name);

 private:
  struct Node {
    std::vector<int> inputs;
    Tensor out;
    bool diff_path = false;
    Recompute recompute;
    BackwardFn backward;
    const char* op = "";
  };
  int leaf_node(Tensor& t, bool differentiable);
  std::vector<Node> nodes_;
};

/// Resolves the single tape shared by any attached operands (throws on a
/// mix of tapes); nullptr when no operand is attached.
Tape* common_tape(std::initializer_list<Tensor> ts);

/// Deterministic counter-based random stream. Identical seed and call
/// sequence give identical draws; split() derives an independent stream
/// whose output does not depend on the parent's position, and fork(key)
/// derives a stream from a caller-chosen key (stable per-sample streams).
class RngState {
 public:
  explicit RngState(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller (two draws per call).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  RngState split();
  RngState fork(std::uint64_t key) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return pos_; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t pos_ = 0;
  std::uint64_t splits_ = 0;
};

/// Inverted-dropout mask: sampled once, immutable, reusable across any
/// number of forwards. Kept entries are scaled by 1/(1-p) at apply time
/// so evaluation needs no rescaling.
class DropoutMask {
 public:
  DropoutMask() = default;

  bool defined() const { return scaled_.defined(); }
  const std::vector<std::size_t>& shape() const { return scaled_.shape(); }
  double drop_probability() const { return p_; }
  const std::vector<std::uint8_t>& keep() const { return keep_; }
  /// Per-element multiplier: keep/(1-p).
  const Tensor& scaled_keep() const { return scaled_; }
  /// Hash of the keep pattern; equal patterns hash equal.
  std::uint64_t fingerprint() const { return fp_; }

 private:
  friend DropoutMask sample_dropout_mask(const std::vector<std::size_t>& shape, double p,
                                         RngState& rng);
  Tensor scaled_;
  std::vector<std::uint8_t> keep_;
  double p_ = 0.0;
  std::uint64_t fp_ = 0;
};

/// Draw a mask with drop probability p (keep probability 1-p); p must be
/// in [0, 1).
DropoutMask sample_dropout_mask(const std::vector<std::size_t>& shape, double p,
                                RngState& rng);

// ---- primitive ops (all record a gradient rule when an input is taped) ----

/// Elementwise sum; b may broadcast if its shape is a suffix of a's.
Tensor add(const Tensor& a, const Tensor& b);
/// Elementwise product, identical shapes.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

/// Matrix product. Supports (m,k)x(k,n); (...,k)x(k,n) applied row-wise;
/// and batched (L...,m,k)x(L...,k,n) with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, const std::vector<std::size_t>& shape);
/// Contiguous slice along the first dimension.
Tensor slice_rows(const Tensor& a, std::size_t first, std::size_t count);
/// (B,S,d) -> (B,d) at sequence position pos.
Tensor select_position(const Tensor& a, std::size_t pos);
/// Row lookup: out[i] = table[ids[i]], reshaped to index_shape + {cols}.
Tensor gather_rows(const Tensor& table, const std::vector<std::int32_t>& ids,
                   const std::vector<std::size_t>& index_shape);

/// Numerically stabilized softmax along the last dimension.
Tensor softmax_rows(const Tensor& t);
Tensor layer_norm(const Tensor& t, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& t);

/// Per-sample -log softmax(logits)[label]; logits (B,C) -> (B,).
Tensor cross_entropy_per_sample(const Tensor& logits, const std::vector<std::int32_t>& labels);
/// Batch mean of the above, as a scalar.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels);

Tensor sum_all(const Tensor& t);
Tensor mean_all(const Tensor& t);

Tensor apply_dropout(const Tensor& t, const DropoutMask& mask);

// ---- detached helpers (no tape interaction) ----

double frobenius_norm(std::span<const double> v);
bool all_finite(std::span<const double> v);
std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace advlab
