#include "advlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace advlab {

struct Tensor::Impl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  Tape* tape = nullptr;
  int node = -1;
};

namespace {

std::size_t shape_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

[[noreturn]] void fail_shape(const std::string& msg) { throw std::invalid_argument(msg); }

void ensure_finite(const Tensor& t, const char* op) {
  if (!all_finite(t.values()))
    throw NumericalError(std::string("non-finite value produced by ") + op);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    fail_shape(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
               shape_str(b.shape()));
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

double frobenius_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->data.assign(shape_count(shape), 0.0);
  t.impl_->shape = std::move(shape);
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
  if (shape_count(shape) != data.size())
    fail_shape("from_data: " + std::to_string(data.size()) + " values for shape " +
               shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const std::vector<std::size_t>& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::size() const { return impl_->data.size(); }
double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }
std::span<const double> Tensor::values() const { return impl_->data; }

double Tensor::item() const {
  if (size() != 1) fail_shape("item: tensor has " + std::to_string(size()) + " elements");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor Tensor::clone() const {
  if (!impl_) return {};
  return from_data(impl_->shape, impl_->data);
}

void Tensor::fill(double value) { std::fill(impl_->data.begin(), impl_->data.end(), value); }

void Tensor::copy_from(const Tensor& src) {
  check_same_shape(*this, src, "copy_from");
  impl_->data = src.impl_->data;
}

Tape* Tensor::tape() const { return impl_ ? impl_->tape : nullptr; }

// ---- Gradients ----

bool Gradients::contains(const Tensor& t) const {
  return by_storage_.count(static_cast<const void*>(t.data())) > 0;
}

const Tensor& Gradients::at(const Tensor& t) const {
  auto it = by_storage_.find(static_cast<const void*>(t.data()));
  if (it == by_storage_.end()) throw std::out_of_range("Gradients::at: tensor has no gradient");
  return it->second;
}

// ---- Tape ----

Tape::~Tape() {
  for (Node& n : nodes_) {
    n.out.impl_->tape = nullptr;
    n.out.impl_->node = -1;
  }
}

int Tape::leaf_node(Tensor& t, bool differentiable) {
  if (t.impl_->tape == this) return t.impl_->node;
  if (t.impl_->tape != nullptr) fail_shape("tensor already attached to another tape");
  Node n;
  n.out = t;
  n.diff_path = differentiable;
  nodes_.push_back(std::move(n));
  t.impl_->tape = this;
  t.impl_->node = static_cast<int>(nodes_.size()) - 1;
  return t.impl_->node;
}

Tensor& Tape::watch(Tensor& t) {
  if (!t.defined()) fail_shape("watch: undefined tensor");
  if (t.impl_->tape == this) {
    nodes_[t.impl_->node].diff_path = true;
  } else {
    leaf_node(t, /*differentiable=*/true);
  }
  t.impl_->requires_grad = true;
  return t;
}

bool Tape::owns(const Tensor& t) const { return t.defined() && t.impl_->tape == this; }

void Tape::record(std::vector<Tensor> inputs, Tensor out, Recompute fwd, BackwardFn bwd,
                  const char* op_name) {
  Node n;
  n.inputs.reserve(inputs.size());
  for (Tensor& in : inputs) n.inputs.push_back(leaf_node(in, /*differentiable=*/false));
  for (int id : n.inputs) n.diff_path = n.diff_path || nodes_[id].diff_path;
  n.out = out;
  n.recompute = std::move(fwd);
  n.backward = std::move(bwd);
  n.op = op_name;
  nodes_.push_back(std::move(n));
  out.impl_->tape = this;
  out.impl_->node = static_cast<int>(nodes_.size()) - 1;
}

void Tape::replay() {
  std::vector<Tensor> ins;
  for (Node& n : nodes_) {
    if (!n.recompute) continue;
    ins.clear();
    for (int id : n.inputs) ins.push_back(nodes_[id].out);
    n.recompute(ins, n.out);
    ensure_finite(n.out, n.op);
  }
}

Gradients Tape::backward(const Tensor& loss, const std::vector<Tensor>& wanted) {
  if (!owns(loss)) fail_shape("backward: loss is not on this tape");
  if (loss.size() != 1) fail_shape("backward: loss must be scalar, got " + shape_str(loss.shape()));
  return vjp(loss, Tensor::full(loss.shape(), 1.0), wanted);
}

Gradients Tape::vjp(const Tensor& output, const Tensor& cotangent,
                    const std::vector<Tensor>& wanted) {
  if (!owns(output)) fail_shape("vjp: output is not on this tape");
  check_same_shape(output, cotangent, "vjp cotangent");
  for (const Tensor& w : wanted)
    if (!owns(w)) fail_shape("vjp: requested tensor is not on this tape");

  const int root = output.impl_->node;
  std::vector<Tensor> grad(nodes_.size());
  grad[root] = cotangent.clone();
  std::vector<char> keep(nodes_.size(), 0);
  keep[root] = 1;
  for (const Tensor& w : wanted) keep[w.impl_->node] = 1;

  std::vector<Tensor> ins;
  std::vector<char> need;
  std::vector<Tensor> gin;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!grad[i].defined() || !n.backward || !n.diff_path) continue;
    ins.clear();
    need.assign(n.inputs.size(), 0);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      ins.push_back(nodes_[n.inputs[j]].out);
      need[j] = nodes_[n.inputs[j]].diff_path ? 1 : 0;
    }
    gin.assign(n.inputs.size(), Tensor{});
    n.backward(ins, n.out, grad[i], need, gin);
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      if (!gin[j].defined()) continue;
      int src = n.inputs[j];
      if (!grad[src].defined()) {
        grad[src] = std::move(gin[j]);
      } else {
        axpy(1.0, gin[j].values(), {grad[src].data(), grad[src].size()});
      }
    }
    // Intermediate gradients are dropped once consumed unless requested.
    if (!keep[i]) grad[i] = Tensor{};
  }

  Gradients out;
  for (const Tensor& w : wanted) {
    Tensor g = grad[w.impl_->node].defined() ? std::move(grad[w.impl_->node])
                                             : Tensor::zeros(w.shape());
    if (!all_finite(g.values()))
      throw NumericalError("non-finite gradient in backward pass");
    out.by_storage_.emplace(static_cast<const void*>(w.data()), std::move(g));
  }
  return out;
}

Tape* common_tape(std::initializer_list<Tensor> ts) {
  Tape* tape = nullptr;
  for (const Tensor& t : ts) {
    if (!t.defined() || t.tape() == nullptr) continue;
    if (tape == nullptr) tape = t.tape();
    else if (tape != t.tape()) fail_shape("operands attached to different tapes");
  }
  return tape;
}

// ---- RngState ----

std::uint64_t RngState::next_u64() {
  return mix64(seed_ + 0x9E3779B97F4A7C15ULL * ++pos_);
}

double RngState::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngState::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngState::normal() {
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::uint64_t RngState::uniform_index(std::uint64_t n) {
  if (n == 0) fail_shape("uniform_index: empty range");
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

RngState RngState::split() {
  return RngState(mix64(seed_ ^ (0xD1B54A32D192ED03ULL * ++splits_)));
}

RngState RngState::fork(std::uint64_t key) const {
  return RngState(mix64(seed_ ^ mix64(key ^ 0xA0761D6478BD642FULL)));
}

// ---- DropoutMask ----

DropoutMask sample_dropout_mask(const std::vector<std::size_t>& shape, double p, RngState& rng) {
  if (!(p >= 0.0 && p < 1.0))
    fail_shape("sample_dropout_mask: drop probability must be in [0,1), got " + std::to_string(p));
  DropoutMask m;
  m.p_ = p;
  const std::size_t n = shape_count(shape);
  m.keep_.resize(n);
  std::vector<double> scaled(n);
  const double inv_keep = 1.0 / (1.0 - p);
  std::uint64_t fp = 1469598103934665603ULL;  // FNV offset basis
  for (std::size_t i = 0; i < n; ++i) {
    bool keep = rng.uniform() >= p;
    m.keep_[i] = keep ? 1 : 0;
    scaled[i] = keep ? inv_keep : 0.0;
    fp = (fp ^ (keep ? 0x9Eu : 0x31u)) * 1099511628211ULL;
  }
  m.fp_ = fp;
  m.scaled_ = Tensor::from_data(shape, std::move(scaled));
  return m;
}

// ---- op library ----

namespace {

// Broadcast layout of add(a, b): b's shape must equal a's or be a suffix
// of it; returns the number of repeats of b along a.
std::size_t add_repeats(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size())
    fail_shape("add: cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
  for (std::size_t i = 0; i < sb.size(); ++i)
    if (sb[i] != sa[sa.size() - sb.size() + i])
      fail_shape("add: shape " + shape_str(sb) + " is not a suffix of " + shape_str(sa));
  return b.size() == 0 ? 0 : a.size() / b.size();
}

void add_into(const Tensor& a, const Tensor& b, Tensor& out) {
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t inner = b.size();
  const std::size_t total = a.size();
  for (std::size_t i = 0; i < total; ++i) po[i] = pa[i] + pb[i % inner];
}

struct MatDims {
  std::size_t batch;  // number of independent (m,k)x(k,n) products
  std::size_t m, k, n;
  bool b_shared;  // b is a single (k,n) matrix shared across the batch
};

MatDims matmul_dims(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) fail_shape("matmul: operands must have rank >= 2");
  MatDims d{};
  if (sb.size() == 2) {
    d.k = sa.back();
    if (sb[0] != d.k)
      fail_shape("matmul: inner dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
    d.n = sb[1];
    d.m = a.size() / d.k;
    d.batch = 1;
    d.b_shared = true;
    return d;
  }
  if (sa.size() != sb.size())
    fail_shape("matmul: rank mismatch " + shape_str(sa) + " x " + shape_str(sb));
  for (std::size_t i = 0; i + 2 < sa.size(); ++i)
    if (sa[i] != sb[i])
      fail_shape("matmul: batch dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
  d.m = sa[sa.size() - 2];
  d.k = sa.back();
  if (sb[sb.size() - 2] != d.k)
    fail_shape("matmul: inner dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
  d.n = sb.back();
  d.batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) d.batch *= sa[i];
  d.b_shared = false;
  return d;
}

std::vector<std::size_t> matmul_out_shape(const Tensor& a, const Tensor& b, const MatDims& d) {
  std::vector<std::size_t> shape(a.shape());
  shape.back() = d.n;
  (void)b;
  return shape;
}

void matmul_into(const Tensor& a, const Tensor& b, const MatDims& d, Tensor& out) {
  const std::size_t rows = d.b_shared ? d.m : d.m;  // rows per batch slice
  for (std::size_t bi = 0; bi < (d.b_shared ? 1 : d.batch); ++bi) {
    const double* pa = a.data() + bi * rows * d.k;
    const double* pb = b.data() + (d.b_shared ? 0 : bi * d.k * d.n);
    double* po = out.data() + bi * rows * d.n;
    const std::size_t total_rows = d.b_shared ? d.m : rows;
    for (std::size_t i = 0; i < total_rows; ++i) {
      double* orow = po + i * d.n;
      std::fill(orow, orow + d.n, 0.0);
      const double* arow = pa + i * d.k;
      for (std::size_t kk = 0; kk < d.k; ++kk) {
        const double f = arow[kk];
        const double* brow = pb + kk * d.n;
        for (std::size_t j = 0; j < d.n; ++j) orow[j] += f * brow[j];
      }
    }
  }
}

void softmax_rows_into(const Tensor& t, Tensor& out) {
  const std::size_t cols = t.shape().back();
  const std::size_t rows = t.size() / cols;
  const double* p = t.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r, p += cols, o += cols) {
    double mx = p[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(p[c] - mx);
      sum += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
  }
}

void layer_norm_into(const Tensor& t, const Tensor& gain, const Tensor& bias, double eps,
                     Tensor& out) {
  const std::size_t cols = t.shape().back();
  const std::size_t rows = t.size() / cols;
  const double* p = t.data();
  const double* g = gain.data();
  const double* b = bias.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r, p += cols, o += cols) {
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += p[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = p[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) o[c] = (p[c] - mean) * inv * g[c] + b[c];
  }
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void gelu_into(const Tensor& t, Tensor& out) {
  const double* p = t.data();
  double* o = out.data();
  for (std::size_t i = 0; i < t.size(); ++i)
    o[i] = 0.5 * p[i] * (1.0 + std::erf(p[i] * kInvSqrt2));
}

void ce_per_sample_into(const Tensor& logits, const std::vector<std::int32_t>& labels,
                        Tensor& out) {
  const std::size_t cols = logits.shape().back();
  const std::size_t rows = logits.size() / cols;
  const double* p = logits.data();
  double* o = out.data();
  for (std::size_t r = 0; r < rows; ++r, p += cols) {
    double mx = p[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(p[c] - mx);
    o[r] = mx + std::log(sum) - p[static_cast<std::size_t>(labels[r])];
  }
}

void permute_into(const Tensor& a, const std::vector<std::size_t>& perm, Tensor& out) {
  const auto& sa = a.shape();
  const std::size_t r = sa.size();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * sa[i];
  const auto& so = out.shape();
  std::vector<std::size_t> idx(r, 0);
  const double* pa = a.data();
  double* po = out.data();
  const std::size_t total = a.size();
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    po[flat] = pa[src];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < so[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t repeats = add_repeats(a, b);
  (void)repeats;
  Tensor out = Tensor::zeros(a.shape());
  add_into(a, b, out);
  ensure_finite(out, "add");
  if (Tape* tape = common_tape({a, b})) {
    tape->record(
        {a, b}, out,
        [](const std::vector<Tensor>& in, Tensor& o) { add_into(in[0], in[1], o); },
        [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
           const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (need[0]) gin[0] = g.clone();
          if (need[1]) {
            gin[1] = Tensor::zeros(in[1].shape());
            const std::size_t inner = in[1].size();
            const double* pg = g.data();
            double* pb = gin[1].data();
            for (std::size_t i = 0; i < g.size(); ++i) pb[i % inner] += pg[i];
          }
        },
        "add");
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  }
  ensure_finite(out, "mul");
  if (Tape* tape = common_tape({a, b})) {
    tape->record(
        {a, b}, out,
        [](const std::vector<Tensor>& in, Tensor& o) {
          const double* pa = in[0].data();
          const double* pb = in[1].data();
          double* po = o.data();
          for (std::size_t i = 0; i < o.size(); ++i) po[i] = pa[i] * pb[i];
        },
        [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
           const std::vector<char>& need, std::vector<Tensor>& gin) {
          for (int side = 0; side < 2; ++side) {
            if (!need[side]) continue;
            gin[side] = Tensor::zeros(in[side].shape());
            const double* po = in[1 - side].data();
            const double* pg = g.data();
            double* pd = gin[side].data();
            for (std::size_t i = 0; i < g.size(); ++i) pd[i] = pg[i] * po[i];
          }
        },
        "mul");
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * c;
  }
  ensure_finite(out, "scale");
  if (Tape* tape = common_tape({a})) {
    tape->record(
        {a}, out,
        [c](const std::vector<Tensor>& in, Tensor& o) {
          const double* pa = in[0].data();
          double* po = o.data();
          for (std::size_t i = 0; i < o.size(); ++i) po[i] = pa[i] * c;
        },
        [c](const std::vector<Tensor>&, const Tensor&, const Tensor& g,
            const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(g.shape());
          const double* pg = g.data();
          double* pd = gin[0].data();
          for (std::size_t i = 0; i < g.size(); ++i) pd[i] = pg[i] * c;
        },
        "scale");
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatDims d = matmul_dims(a, b);
  Tensor out = Tensor::zeros(matmul_out_shape(a, b, d));
  matmul_into(a, b, d, out);
  ensure_finite(out, "matmul");
  if (Tape* tape = common_tape({a, b})) {
    tape->record(
        {a, b}, out,
        [d](const std::vector<Tensor>& in, Tensor& o) { matmul_into(in[0], in[1], d, o); },
        [d](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
            const std::vector<char>& need, std::vector<Tensor>& gin) {
          const Tensor& a = in[0];
          const Tensor& b = in[1];
          const std::size_t nb = d.b_shared ? 1 : d.batch;
          const std::size_t rows = d.b_shared ? d.m : d.m;
          if (need[0]) {
            gin[0] = Tensor::zeros(a.shape());
            for (std::size_t bi = 0; bi < nb; ++bi) {
              const double* pg = g.data() + bi * rows * d.n;
              const double* pb = b.data() + (d.b_shared ? 0 : bi * d.k * d.n);
              double* pda = gin[0].data() + bi * rows * d.k;
              for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t kk = 0; kk < d.k; ++kk) {
                  double s = 0.0;
                  const double* grow = pg + i * d.n;
                  const double* brow = pb + kk * d.n;
                  for (std::size_t j = 0; j < d.n; ++j) s += grow[j] * brow[j];
                  pda[i * d.k + kk] = s;
                }
              }
            }
          }
          if (need[1]) {
            gin[1] = Tensor::zeros(b.shape());
            for (std::size_t bi = 0; bi < nb; ++bi) {
              const double* pa = a.data() + bi * rows * d.k;
              const double* pg = g.data() + bi * rows * d.n;
              double* pdb = gin[1].data() + (d.b_shared ? 0 : bi * d.k * d.n);
              for (std::size_t i = 0; i < rows; ++i) {
                const double* arow = pa + i * d.k;
                const double* grow = pg + i * d.n;
                for (std::size_t kk = 0; kk < d.k; ++kk) {
                  const double f = arow[kk];
                  double* drow = pdb + kk * d.n;
                  for (std::size_t j = 0; j < d.n; ++j) drow[j] += f * grow[j];
                }
              }
            }
          }
        },
        "matmul");
  }
  return out;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const auto& sa = a.shape();
  if (perm.size() != sa.size()) fail_shape("permute: rank mismatch");
  std::vector<char> seen(perm.size(), 0);
  std::vector<std::size_t> out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) fail_shape("permute: invalid permutation");
    seen[perm[i]] = 1;
    out_shape[i] = sa[perm[i]];
  }
  Tensor out = Tensor::zeros(out_shape);
  permute_into(a, perm, out);
  if (Tape* tape = common_tape({a})) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    tape->record(
        {a}, out,
        [perm](const std::vector<Tensor>& in, Tensor& o) { permute_into(in[0], perm, o); },
        [inv](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
              const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          permute_into(g, inv, gin[0]);
        },
        "permute");
  }
  return out;
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  if (perm.size() < 2) fail_shape("transpose_last2: rank must be >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

Tensor reshape(const Tensor& a, const std::vector<std::size_t>& shape) {
  if (shape_count(shape) != a.size())
    fail_shape("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out = Tensor::from_data(shape, std::vector<double>(a.data(), a.data() + a.size()));
  if (Tape* tape = common_tape({a})) {
    tape->record(
        {a}, out,
        [](const std::vector<Tensor>& in, Tensor& o) {
          std::memcpy(o.data(), in[0].data(), o.size() * sizeof(double));
        },
        [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
           const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::from_data(in[0].shape(),
                                     std::vector<double>(g.data(), g.data() + g.size()));
        },
        "reshape");
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t first, std::size_t count) {
  const auto& sa = a.shape();
  if (sa.empty() || first + count > sa[0]) fail_shape("slice_rows: out of range");
  std::vector<std::size_t> out_shape(sa);
  out_shape[0] = count;
  const std::size_t stride = a.size() / sa[0];
  Tensor out = Tensor::from_data(
      out_shape, std::vector<double>(a.data() + first * stride, a.data() + (first + count) * stride));
  if (Tape* tape = common_tape({a})) {
    tape->record(
        {a}, out,
        [first, stride](const std::vector<Tensor>& in, Tensor& o) {
          std::memcpy(o.data(), in[0].data() + first * stride, o.size() * sizeof(double));
        },
        [first, stride](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                        const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          std::memcpy(gin[0].data() + first * stride, g.data(), g.size() * sizeof(double));
        },
        "slice_rows");
  }
  return out;
}

Tensor select_position(const Tensor& a, std::size_t pos) {
  const auto& sa = a.shape();
  if (sa.size() != 3) fail_shape("select_position: expected rank-3 tensor");
  if (pos >= sa[1]) fail_shape("select_position: position out of range");
  const std::size_t batch = sa[0], seq = sa[1], dim = sa[2];
  Tensor out = Tensor::zeros({batch, dim});
  auto copy_rows = [batch, seq, dim, pos](const Tensor& src, Tensor& dst) {
    for (std::size_t b = 0; b < batch; ++b)
      std::memcpy(dst.data() + b * dim, src.data() + (b * seq + pos) * dim, dim * sizeof(double));
  };
  copy_rows(a, out);
  if (Tape* tape = common_tape({a})) {
    tape->record(
        {a}, out,
        [copy_rows](const std::vector<Tensor>& in, Tensor& o) { copy_rows(in[0], o); },
        [batch, seq, dim, pos](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                               const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          for (std::size_t b = 0; b < batch; ++b)
            std::memcpy(gin[0].data() + (b * seq + pos) * dim, g.data() + b * dim,
                        dim * sizeof(double));
        },
        "select_position");
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int32_t>& ids,
                   const std::vector<std::size_t>& index_shape) {
  const auto& st = table.shape();
  if (st.size() != 2) fail_shape("gather_rows: table must be rank-2");
  if (ids.size() != shape_count(index_shape)) fail_shape("gather_rows: id count mismatch");
  const std::size_t rows = st[0], cols = st[1];
  for (std::int32_t id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= rows)
      fail_shape("gather_rows: id " + std::to_string(id) + " out of range [0," +
                 std::to_string(rows) + ")");
  std::vector<std::size_t> out_shape(index_shape);
  out_shape.push_back(cols);
  Tensor out = Tensor::zeros(out_shape);
  auto gather = [ids, cols](const Tensor& src, Tensor& dst) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::memcpy(dst.data() + i * cols, src.data() + static_cast<std::size_t>(ids[i]) * cols,
                  cols * sizeof(double));
  };
  gather(table, out);
  if (Tape* tape = common_tape({table})) {
    tape->record(
        {table}, out,
        [gather](const std::vector<Tensor>& in, Tensor& o) { gather(in[0], o); },
        [ids, cols](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                    const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          for (std::size_t i = 0; i < ids.size(); ++i)
            axpy(1.0, std::span<const double>(g.data() + i * cols, cols),
                 {gin[0].data() + static_cast<std::size_t>(ids[i]) * cols, cols});
        },
        "gather_rows");
  }
  return out;
}

Tensor softmax_rows(const Tensor& t) {
  if (t.rank() == 0 || t.shape().back() == 0) fail_shape("softmax_rows: empty row");
  Tensor out = Tensor::zeros(t.shape());
  softmax_rows_into(t, out);
  ensure_finite(out, "softmax_rows");
  if (Tape* tape = common_tape({t})) {
    tape->record(
        {t}, out,
        [](const std::vector<Tensor>& in, Tensor& o) { softmax_rows_into(in[0], o); },
        [](const std::vector<Tensor>& in, const Tensor& out, const Tensor& g,
           const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          const std::size_t cols = out.shape().back();
          const std::size_t rows = out.size() / cols;
          const double* s = out.data();
          const double* pg = g.data();
          double* d = gin[0].data();
          for (std::size_t r = 0; r < rows; ++r, s += cols, pg += cols, d += cols) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += pg[c] * s[c];
            for (std::size_t c = 0; c < cols; ++c) d[c] = s[c] * (pg[c] - dot);
          }
        },
        "softmax_rows");
  }
  return out;
}

Tensor layer_norm(const Tensor& t, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t cols = t.rank() > 0 ? t.shape().back() : 0;
  if (cols == 0) fail_shape("layer_norm: empty row");
  if (gain.size() != cols || bias.size() != cols)
    fail_shape("layer_norm: gain/bias must match last dimension " + std::to_string(cols));
  Tensor out = Tensor::zeros(t.shape());
  layer_norm_into(t, gain, bias, eps, out);
  ensure_finite(out, "layer_norm");
  if (Tape* tape = common_tape({t, gain, bias})) {
    tape->record(
        {t, gain, bias}, out,
        [eps](const std::vector<Tensor>& in, Tensor& o) {
          layer_norm_into(in[0], in[1], in[2], eps, o);
        },
        [eps](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
              const std::vector<char>& need, std::vector<Tensor>& gin) {
          const Tensor& t = in[0];
          const Tensor& gain = in[1];
          const std::size_t cols = t.shape().back();
          const std::size_t rows = t.size() / cols;
          if (need[0]) gin[0] = Tensor::zeros(t.shape());
          if (need[1]) gin[1] = Tensor::zeros(gain.shape());
          if (need[2]) gin[2] = Tensor::zeros(gain.shape());
          const double* p = t.data();
          const double* pg = g.data();
          const double* w = gain.data();
          std::vector<double> xhat(cols);
          for (std::size_t r = 0; r < rows; ++r, p += cols, pg += cols) {
            double mean = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mean += p[c];
            mean /= static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = p[c] - mean;
              var += d * d;
            }
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (std::size_t c = 0; c < cols; ++c) xhat[c] = (p[c] - mean) * inv;
            if (need[1] || need[2]) {
              for (std::size_t c = 0; c < cols; ++c) {
                if (need[1]) gin[1].data()[c] += pg[c] * xhat[c];
                if (need[2]) gin[2].data()[c] += pg[c];
              }
            }
            if (need[0]) {
              double m1 = 0.0, m2 = 0.0;
              for (std::size_t c = 0; c < cols; ++c) {
                const double gg = pg[c] * w[c];
                m1 += gg;
                m2 += gg * xhat[c];
              }
              m1 /= static_cast<double>(cols);
              m2 /= static_cast<double>(cols);
              double* d = gin[0].data() + r * cols;
              for (std::size_t c = 0; c < cols; ++c)
                d[c] = (pg[c] * w[c] - m1 - xhat[c] * m2) * inv;
            }
          }
        },
        "layer_norm");
  }
  return out;
}

Tensor gelu(const Tensor& t) {
  Tensor out = Tensor::zeros(t.shape());
  gelu_into(t, out);
  ensure_finite(out, "gelu");
  if (Tape* tape = common_tape({t})) {
    tape->record(
        {t}, out,
        [](const std::vector<Tensor>& in, Tensor& o) { gelu_into(in[0], o); },
        [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
           const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          const double* p = in[0].data();
          const double* pg = g.data();
          double* d = gin[0].data();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = p[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            d[i] = pg[i] * (cdf + x * pdf);
          }
        },
        "gelu");
  }
  return out;
}

Tensor cross_entropy_per_sample(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  if (logits.rank() != 2) fail_shape("cross_entropy: logits must be (batch, classes)");
  const std::size_t rows = logits.shape()[0];
  const std::size_t cols = logits.shape()[1];
  if (labels.size() != rows) fail_shape("cross_entropy: label count mismatch");
  for (std::int32_t y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= cols)
      fail_shape("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                 std::to_string(cols) + ")");
  Tensor out = Tensor::zeros({rows});
  ce_per_sample_into(logits, labels, out);
  ensure_finite(out, "cross_entropy");
  if (Tape* tape = common_tape({logits})) {
    tape->record(
        {logits}, out,
        [labels](const std::vector<Tensor>& in, Tensor& o) { ce_per_sample_into(in[0], labels, o); },
        [labels, cols](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
                       const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (!need[0]) return;
          gin[0] = Tensor::zeros(in[0].shape());
          const std::size_t rows = labels.size();
          const double* p = in[0].data();
          const double* pg = g.data();
          double* d = gin[0].data();
          for (std::size_t r = 0; r < rows; ++r, p += cols, d += cols) {
            double mx = p[0];
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, p[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) sum += std::exp(p[c] - mx);
            for (std::size_t c = 0; c < cols; ++c) {
              double soft = std::exp(p[c] - mx) / sum;
              if (c == static_cast<std::size_t>(labels[r])) soft -= 1.0;
              d[c] = soft * pg[r];
            }
          }
        },
        "cross_entropy");
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  return mean_all(cross_entropy_per_sample(logits, labels));
}

Tensor sum_all(const Tensor& t) {
  double s = 0.0;
  for (double x : t.values()) s += x;
  Tensor out = Tensor::scalar(s);
  ensure_finite(out, "sum_all");
  if (Tape* tape = common_tape({t})) {
    tape->record(
        {t}, out,
        [](const std::vector<Tensor>& in, Tensor& o) {
          double s = 0.0;
          for (double x : in[0].values()) s += x;
          o.data()[0] = s;
        },
        [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g,
           const std::vector<char>& need, std::vector<Tensor>& gin) {
          if (need[0]) gin[0] = Tensor::full(in[0].shape(), g.item());
        },
        "sum_all");
  }
  return out;
}

Tensor mean_all(const Tensor& t) {
  if (t.size() == 0) fail_shape("mean_all: empty tensor");
  return scale(sum_all(t), 1.0 / static_cast<double>(t.size()));
}

Tensor apply_dropout(const Tensor& t, const DropoutMask& mask) {
  if (!mask.defined()) fail_shape("apply_dropout: undefined mask");
  if (t.shape() != mask.shape())
    fail_shape("apply_dropout: mask shape " + shape_str(mask.shape()) + " does not match " +
               shape_str(t.shape()));
  return mul(t, mask.scaled_keep());
}

}  // namespace advlab
