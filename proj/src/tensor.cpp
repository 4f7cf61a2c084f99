#include "sdfp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

#include <malloc.h>

#if defined(__AVX2__) || defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace sdfp {

namespace {

std::atomic<std::uint64_t> g_buffers{0};
std::atomic<std::uint64_t> g_elements{0};
std::atomic<std::size_t> g_largest{0};

std::shared_ptr<const std::vector<double>> make_buffer(std::vector<double> values) {
  const std::size_t n = values.size();
  g_buffers.fetch_add(1, std::memory_order_relaxed);
  g_elements.fetch_add(n, std::memory_order_relaxed);
  std::size_t prev = g_largest.load(std::memory_order_relaxed);
  while (n > prev && !g_largest.compare_exchange_weak(prev, n, std::memory_order_relaxed)) {
  }
  return std::make_shared<const std::vector<double>>(std::move(values));
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

// Strides (in elements) of `shape` right-aligned against `out`, with zero
// stride on broadcast dimensions.
std::vector<std::size_t> aligned_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t d = shape.size(); d-- > 0;) {
    strides[d + offset] = shape[d] == 1 ? 0 : stride;
    stride *= shape[d];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of `out` in order.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = numel(out);
  if (total == 0) return;
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  const std::size_t inner = out[rank - 1];
  const std::size_t sai = sa[rank - 1];
  const std::size_t sbi = sb[rank - 1];
  for (std::size_t flat = 0; flat < total; flat += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(flat + j, ia + j * sai, ib + j * sbi);
    // advance the outer multi-index
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Sums grad (shaped like out) into the shape of an operand.
std::vector<double> reduce_to(std::span<const double> grad, const Shape& out, const Shape& shape) {
  std::vector<double> result(numel(shape), 0.0);
  if (shape == out) {
    std::copy(grad.begin(), grad.end(), result.begin());
    return result;
  }
  const auto s = aligned_strides(shape, out);
  const std::vector<std::size_t> none(out.size(), 0);
  for_each_broadcast(out, s, none, [&](std::size_t o, std::size_t i, std::size_t) { result[i] += grad[o]; });
  return result;
}

void accumulate(Tape::Grad* dst, std::span<const double> src) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// Transpose of a row-major [rows x cols] block.
std::vector<double> transpose(std::span<const double> src, std::size_t rows, std::size_t cols) {
  std::vector<double> dst(src.size());
  constexpr std::size_t blk = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += blk)
    for (std::size_t j0 = 0; j0 < cols; j0 += blk)
      for (std::size_t i = i0; i < std::min(rows, i0 + blk); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + blk); ++j) dst[j * rows + i] = src[i * cols + j];
  return dst;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
  os << ']';
  return os.str();
}

AllocationStats allocation_stats() {
  return {g_buffers.load(), g_elements.load(), g_largest.load()};
}

void reset_allocation_stats() {
  g_buffers = 0;
  g_elements = 0;
  g_largest = 0;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{0} {
  static const auto empty = std::make_shared<const std::vector<double>>();
  data_ = empty;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (numel(shape_) != data.size())
    throw ShapeError("Tensor: shape " + to_string(shape_) + " does not match " +
                     std::to_string(data.size()) + " elements");
  data_ = make_buffer(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Tensor::matrix: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::size() const { return data_->size(); }

std::span<const double> Tensor::data() const& { return {data_->data(), data_->size()}; }

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at: tensor is not a matrix " + to_string(shape_));
  return (*data_)[row * shape_[1] + col];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor has " + std::to_string(size()) + " elements");
  return (*data_)[0];
}

std::vector<double> Tensor::to_vector() const { return *data_; }

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---------------------------------------------------------------------------
// Gradients / Tape

Tensor Gradients::of(const Tensor& t) const {
  if (t.node() >= 0 && static_cast<std::size_t>(t.node()) < grads_.size() && !grads_[t.node()].empty())
    return Tensor(t.shape(), grads_[t.node()]);
  return Tensor::zeros(t.shape());
}

bool Gradients::has(const Tensor& t) const {
  return t.node() >= 0 && static_cast<std::size_t>(t.node()) < grads_.size() && !grads_[t.node()].empty();
}

Tensor Tape::watch(const Tensor& value) {
  Tensor t = value.detached();
  nodes_.push_back(Node{{}, nullptr, t.shape_});
  t.tape_ = this;
  t.node_ = static_cast<std::int64_t>(nodes_.size() - 1);
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> parents,
                    BackwardFn fn) {
  return record(std::move(shape), std::move(value), std::span<const Tensor* const>(parents.begin(), parents.size()),
                std::move(fn));
}

Tensor Tape::record(Shape shape, std::vector<double> value, std::span<const Tensor* const> parents,
                    BackwardFn fn) {
  Tensor t(std::move(shape), std::move(value));
  Node node;
  node.shape = t.shape_;
  node.backward = std::move(fn);
  for (const Tensor* p : parents) node.parents.push_back(p->tape() == this ? p->node() : -1);
  nodes_.push_back(std::move(node));
  t.tape_ = this;
  t.node_ = static_cast<std::int64_t>(nodes_.size() - 1);
  return t;
}

Gradients Tape::backward(const Tensor& root) const {
  if (root.tape() != this) throw ContractError("backward: root is not tracked on this tape");
  if (root.size() != 1)
    throw ContractError("backward: root must be scalar, got shape " + to_string(root.shape()));
  Gradients out;
  out.grads_.assign(nodes_.size(), {});
  out.shapes_.reserve(nodes_.size());
  for (const auto& n : nodes_) out.shapes_.push_back(n.shape);
  out.grads_[root.node()] = {1.0};
  std::vector<Grad*> parent_ptrs;
  for (std::int64_t id = root.node(); id >= 0; --id) {
    const Node& node = nodes_[id];
    if (out.grads_[id].empty() || !node.backward) continue;
    parent_ptrs.assign(node.parents.size(), nullptr);
    bool any = false;
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      const std::int64_t p = node.parents[k];
      if (p < 0) continue;
      auto& g = out.grads_[p];
      if (g.empty()) g.assign(numel(nodes_[p].shape), 0.0);
      parent_ptrs[k] = &g;
      any = true;
    }
    if (any) node.backward(out.grads_[id], parent_ptrs);
  }
  return out;
}

void Tape::clear() { nodes_.clear(); }

Tape* common_tape(std::initializer_list<const Tensor*> operands) {
  Tape* tape = nullptr;
  for (const Tensor* t : operands) {
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape()) throw ContractError("operands are tracked on different tapes");
    tape = t->tape();
  }
  return tape;
}

// ---------------------------------------------------------------------------
// GEMM

namespace {

// Every output element is computed as a left-to-right chain of fused
// multiply-adds over k, whichever tile handles it, so a row's result does not
// depend on the other rows in the batch.
#if defined(__AVX512F__)
constexpr std::size_t kPanel = 32;
constexpr std::size_t kRows = 6;
#elif defined(__AVX2__) && defined(__FMA__)
constexpr std::size_t kPanel = 16;
constexpr std::size_t kRows = 3;
#else
constexpr std::size_t kPanel = 8;
constexpr std::size_t kRows = 4;
#endif
constexpr std::size_t kBlock = 256;

// R rows of packed A (p-major, R per step) against one packed B panel.
template <std::size_t R>
void kernel(const double* ap, const double* panel, std::size_t k, double* c, std::size_t ldc, bool resume) {
#if defined(__AVX512F__)
  __m512d acc[R][4];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < 4; ++q) acc[r][q] = resume ? _mm512_loadu_pd(c + r * ldc + 8 * q) : _mm512_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = panel + p * kPanel;
    const __m512d b0 = _mm512_loadu_pd(bp), b1 = _mm512_loadu_pd(bp + 8);
    const __m512d b2 = _mm512_loadu_pd(bp + 16), b3 = _mm512_loadu_pd(bp + 24);
    for (std::size_t r = 0; r < R; ++r) {
      const __m512d av = _mm512_set1_pd(ap[p * R + r]);
      acc[r][0] = _mm512_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm512_fmadd_pd(av, b1, acc[r][1]);
      acc[r][2] = _mm512_fmadd_pd(av, b2, acc[r][2]);
      acc[r][3] = _mm512_fmadd_pd(av, b3, acc[r][3]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < 4; ++q) _mm512_storeu_pd(c + r * ldc + 8 * q, acc[r][q]);
#elif defined(__AVX2__) && defined(__FMA__)
  __m256d acc[R][4];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < 4; ++q) acc[r][q] = resume ? _mm256_loadu_pd(c + r * ldc + 4 * q) : _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = panel + p * kPanel;
    const __m256d b0 = _mm256_loadu_pd(bp), b1 = _mm256_loadu_pd(bp + 4);
    const __m256d b2 = _mm256_loadu_pd(bp + 8), b3 = _mm256_loadu_pd(bp + 12);
    for (std::size_t r = 0; r < R; ++r) {
      const __m256d av = _mm256_set1_pd(ap[p * R + r]);
      acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
      acc[r][2] = _mm256_fmadd_pd(av, b2, acc[r][2]);
      acc[r][3] = _mm256_fmadd_pd(av, b3, acc[r][3]);
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < 4; ++q) _mm256_storeu_pd(c + r * ldc + 4 * q, acc[r][q]);
#else
  double acc[R][kPanel];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < kPanel; ++q) acc[r][q] = resume ? c[r * ldc + q] : 0.0;
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t q = 0; q < kPanel; ++q) acc[r][q] = std::fma(ap[p * R + r], panel[p * kPanel + q], acc[r][q]);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t q = 0; q < kPanel; ++q) c[r * ldc + q] = acc[r][q];
#endif
}

// R rows of A (one k block) against every packed panel of B.
template <std::size_t R>
void row_block(const double* a, std::size_t lda, std::size_t kc, const double* bpack, std::size_t n, double* c,
               bool resume, double* apack) {
  for (std::size_t p = 0; p < kc; ++p)
    for (std::size_t r = 0; r < R; ++r) apack[p * R + r] = a[r * lda + p];
  for (std::size_t j = 0; j < n; j += kPanel) {
    const std::size_t width = std::min(kPanel, n - j);
    const double* panel = bpack + (j / kPanel) * kc * kPanel;
    if (width == kPanel) {
      kernel<R>(apack, panel, kc, c + j, n, resume);
      continue;
    }
    double tile[R * kPanel];
    if (resume)
      for (std::size_t r = 0; r < R; ++r) std::copy_n(c + r * n + j, width, tile + r * kPanel);
    kernel<R>(apack, panel, kc, tile, kPanel, resume);
    for (std::size_t r = 0; r < R; ++r) std::copy_n(tile + r * kPanel, width, c + r * n + j);
  }
}

template <std::size_t R>
void tail_rows(std::size_t rows, const double* a, std::size_t lda, std::size_t kc, const double* bpack, std::size_t n,
               double* c, bool resume, double* apack) {
  if constexpr (R > 0) {
    if (rows == R) return row_block<R>(a, lda, kc, bpack, n, c, resume, apack);
    tail_rows<R - 1>(rows, a, lda, kc, bpack, n, c, resume, apack);
  }
}

}  // namespace

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
          std::size_t k, std::size_t n) {
  if (k == 0) {
    std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), 0.0);
    return;
  }
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = std::fma(a[i * k + p], b[p], acc);
      c[i] = acc;
    }
    return;
  }
  // B is packed one k block at a time; partial sums are resumed from C, which
  // keeps each element's fma chain in order.
  const std::size_t panels = (n + kPanel - 1) / kPanel;
  std::vector<double> bpack(std::min(k, kBlock) * panels * kPanel);
  std::vector<double> apack(std::min(k, kBlock) * kRows);
  for (std::size_t p0 = 0; p0 < k; p0 += kBlock) {
    const std::size_t kc = std::min(kBlock, k - p0);
    const bool resume = p0 > 0;
    for (std::size_t jp = 0; jp < panels; ++jp) {
      const std::size_t j = jp * kPanel, width = std::min(kPanel, n - j);
      double* panel = bpack.data() + jp * kc * kPanel;
      for (std::size_t p = 0; p < kc; ++p) {
        std::copy_n(b.data() + (p0 + p) * n + j, width, panel + p * kPanel);
        std::fill(panel + p * kPanel + width, panel + (p + 1) * kPanel, 0.0);
      }
    }
    std::size_t i = 0;
    for (; i + kRows <= m; i += kRows)
      row_block<kRows>(a.data() + i * k + p0, k, kc, bpack.data(), n, c.data() + i * n, resume, apack.data());
    if (i < m)
      tail_rows<kRows - 1>(m - i, a.data() + i * k + p0, k, kc, bpack.data(), n, c.data() + i * n, resume,
                           apack.data());
  }
}

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", "cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  gemm(a.data(), b.data(), out, m, k, n);
  Tape* tape = common_tape({&a, &b});
  if (tape == nullptr) return Tensor({m, n}, std::move(out));
  Tensor av = a.detached(), bv = b.detached();
  return tape->record({m, n}, std::move(out), {&a, &b},
                      [av, bv, m, k, n](std::span<const double> g, std::span<Tape::Grad* const> p) {
                        if (p[0] != nullptr) {
                          // dA = G * B^T
                          const auto bt = transpose(bv.data(), k, n);
                          std::vector<double> da(m * k);
                          gemm(g, bt, da, m, n, k);
                          accumulate(p[0], da);
                        }
                        if (p[1] != nullptr) {
                          // dB = A^T * G
                          const auto at = transpose(av.data(), m, k);
                          std::vector<double> db(k * n);
                          gemm(at, g, db, k, m, n);
                          accumulate(p[1], db);
                        }
                      });
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_fail(op, "incompatible shapes " + to_string(a) + " and " + to_string(b) + " at dim " +
                         std::to_string(i) + " (" + std::to_string(da) + " vs " + std::to_string(db) + ")");
    out[i] = std::max(da, db);
    if (da == 0 || db == 0) out[i] = 0;
  }
  return out;
}

namespace {

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t total = numel(out_shape);
  std::vector<double> out(total);
  const auto da = a.data();
  const auto db = b.data();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::Add: return x + y;
      case BinaryKind::Sub: return x - y;
      case BinaryKind::Mul: return x * y;
    }
    return 0.0;
  };
  if (a.shape() == out_shape && b.shape() == out_shape) {
    for (std::size_t i = 0; i < total; ++i) out[i] = apply(da[i], db[i]);
  } else {
    const auto sa = aligned_strides(a.shape(), out_shape);
    const auto sb = aligned_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = apply(da[i], db[j]); });
  }
  Tape* tape = common_tape({&a, &b});
  if (tape == nullptr) return Tensor(out_shape, std::move(out));
  Tensor av = a.detached(), bv = b.detached();
  return tape->record(
      out_shape, std::move(out), {&a, &b},
      [av, bv, out_shape, kind](std::span<const double> g, std::span<Tape::Grad* const> p) {
        if (kind == BinaryKind::Mul) {
          const auto sa = aligned_strides(av.shape(), out_shape);
          const auto sb = aligned_strides(bv.shape(), out_shape);
          const auto xa = av.data();
          const auto xb = bv.data();
          if (p[0] != nullptr) {
            auto& ga = *p[0];
            for_each_broadcast(out_shape, sa, sb,
                               [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * xb[j]; });
          }
          if (p[1] != nullptr) {
            auto& gb = *p[1];
            for_each_broadcast(out_shape, sa, sb,
                               [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * xa[i]; });
          }
          return;
        }
        if (p[0] != nullptr) accumulate(p[0], reduce_to(g, out_shape, av.shape()));
        if (p[1] != nullptr) {
          auto gb = reduce_to(g, out_shape, bv.shape());
          if (kind == BinaryKind::Sub)
            for (auto& v : gb) v = -v;
          accumulate(p[1], gb);
        }
      });
}

#if defined(__AVX512F__)
extern "C" __m512d _ZGVeN8v_exp(__m512d);
extern "C" __m512d _ZGVeN8v_tanh(__m512d);
constexpr std::size_t kLanes = 8;
#elif defined(__AVX2__)
extern "C" __m256d _ZGVdN4v_exp(__m256d);
extern "C" __m256d _ZGVdN4v_tanh(__m256d);
constexpr std::size_t kLanes = 4;
#endif

enum class Transcendental { exp, tanh };

// glibc vector math (libmvec) when available. The tail is padded so every
// element goes through the same routine regardless of its position.
void transcendental(Transcendental f, std::span<const double> in, std::span<double> out) {
#if defined(__AVX512F__) || defined(__AVX2__)
  const auto apply = [f](const double* src, double* dst) {
#if defined(__AVX512F__)
    const __m512d v = _mm512_loadu_pd(src);
    _mm512_storeu_pd(dst, f == Transcendental::exp ? _ZGVeN8v_exp(v) : _ZGVeN8v_tanh(v));
#else
    const __m256d v = _mm256_loadu_pd(src);
    _mm256_storeu_pd(dst, f == Transcendental::exp ? _ZGVdN4v_exp(v) : _ZGVdN4v_tanh(v));
#endif
  };
  std::size_t i = 0;
  for (; i + kLanes <= in.size(); i += kLanes) apply(in.data() + i, out.data() + i);
  if (i < in.size()) {
    double src[kLanes] = {}, dst[kLanes];
    std::copy(in.begin() + static_cast<std::ptrdiff_t>(i), in.end(), src);
    apply(src, dst);
    std::copy_n(dst, in.size() - i, out.begin() + static_cast<std::ptrdiff_t>(i));
  }
#else
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f == Transcendental::exp ? std::exp(in[i]) : std::tanh(in[i]);
#endif
}

// Records an elementwise op given its precomputed output; the derivative is
// expressed through input x and output y.
template <class Deriv>
Tensor record_unary(const Tensor& x, std::vector<double> out, Deriv deriv) {
  if (!x.tracked()) return Tensor(x.shape(), std::move(out));
  Tensor xv = x.detached();
  auto y = std::make_shared<const std::vector<double>>(out);
  return x.tape()->record(x.shape(), std::move(out), {&x},
                          [xv, y, deriv](std::span<const double> g, std::span<Tape::Grad* const> p) {
                            const auto xs = xv.data();
                            auto& gx = *p[0];
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xs[i], (*y)[i]);
                          });
}

// Elementwise map whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor map_unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return record_unary(x, std::move(out), deriv);
}

std::size_t check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank())
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  return axis;
}

// outer * axis_len * inner decomposition of a shape around an axis.
struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return map_unary(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return map_unary(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return map_unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  transcendental(Transcendental::tanh, x.data(), out);
  return record_unary(x, std::move(out), [](double, double y) { return 1.0 - y * y; });
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
}

void exp_values(std::span<const double> in, std::span<double> out) { transcendental(Transcendental::exp, in, out); }
void tanh_values(std::span<const double> in, std::span<double> out) { transcendental(Transcendental::tanh, in, out); }

void sigmoid_values(std::span<const double> in, std::span<double> out) {
  std::vector<double> e(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) e[i] = -std::abs(in[i]);
  transcendental(Transcendental::exp, e, e);
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] >= 0.0 ? 1.0 / (1.0 + e[i]) : e[i] / (1.0 + e[i]);
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  sigmoid_values(x.data(), out);
  return record_unary(x, std::move(out), [](double, double y) { return y * (1.0 - y); });
}

Tensor rsqrt(const Tensor& x) {
  return map_unary(
      x, [](double v) { return 1.0 / std::sqrt(v); }, [](double, double y) { return -0.5 * y * y * y; });
}

Tensor square(const Tensor& x) {
  return map_unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum_over_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "sum_over_axis");
  const auto [outer, len, inner] = split_at(x.shape(), axis);
  std::vector<double> out(outer * inner, 0.0);
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += in[(o * len + l) * inner + i];
  Shape shape = x.shape();
  if (keepdim)
    shape[axis] = 1;
  else
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (!x.tracked()) return Tensor(shape, std::move(out));
  return x.tape()->record(shape, std::move(out), {&x},
                          [outer = outer, len = len, inner = inner](std::span<const double> g,
                                                                    std::span<Tape::Grad* const> p) {
                            auto& gx = *p[0];
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t l = 0; l < len; ++l)
                                for (std::size_t i = 0; i < inner; ++i)
                                  gx[(o * len + l) * inner + i] += g[o * inner + i];
                          });
}

Tensor mean_over_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "mean_over_axis");
  const std::size_t len = x.dim(axis);
  if (len == 0) shape_fail("mean_over_axis", "empty axis " + std::to_string(axis));
  return scale(sum_over_axis(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor sum(const Tensor& x) {
  const auto in = x.data();
  double s = 0.0;
  for (double v : in) s += v;
  if (!x.tracked()) return Tensor::scalar(s);
  return x.tape()->record({}, {s}, {&x}, [](std::span<const double> g, std::span<Tape::Grad* const> p) {
    for (auto& v : *p[0]) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  check_axis(parts.front(), axis, "concat");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& t : parts) {
    if (t.rank() != first.size()) shape_fail("concat", "rank mismatch " + to_string(t.shape()));
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && t.shape()[d] != first[d])
        shape_fail("concat", "dim " + std::to_string(d) + " mismatch: " + to_string(first) + " vs " +
                                 to_string(t.shape()));
    shape[axis] += t.shape()[axis];
  }
  const auto split = split_at(shape, axis);
  std::vector<double> out(numel(shape));
  std::vector<std::size_t> widths;
  std::size_t col = 0;
  for (const auto& t : parts) {
    const std::size_t w = t.shape()[axis] * split.inner;
    const auto in = t.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * split.len * split.inner + col));
    widths.push_back(w);
    col += w;
  }
  Tape* tape = nullptr;
  for (const auto& t : parts) {
    if (!t.tracked()) continue;
    if (tape != nullptr && tape != t.tape()) throw ContractError("concat: operands on different tapes");
    tape = t.tape();
  }
  if (tape == nullptr) return Tensor(shape, std::move(out));
  // record with all parents: store node ids via a shared vector of tensors
  const std::size_t row = split.len * split.inner;
  const std::size_t outer = split.outer;
  auto fn = [widths, row, outer](std::span<const double> g, std::span<Tape::Grad* const> p) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const std::size_t w = widths[k];
      if (p[k] != nullptr) {
        auto& gk = *p[k];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) gk[o * w + i] += g[o * row + col + i];
      }
      col += w;
    }
  };
  std::vector<const Tensor*> ptrs;
  for (const auto& t : parts) ptrs.push_back(&t);
  return tape->record(shape, std::move(out), std::span<const Tensor* const>(ptrs), fn);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(x, axis, "slice");
  if (start + length > x.dim(axis))
    shape_fail("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") exceeds dim " + std::to_string(x.dim(axis)) + " of " + to_string(x.shape()));
  const auto [outer, len, inner] = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<double> out(numel(shape));
  const auto in = x.data();
  const std::size_t w = length * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * len + start) * inner), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  if (!x.tracked()) return Tensor(shape, std::move(out));
  return x.tape()->record(shape, std::move(out), {&x},
                          [outer = outer, len = len, inner = inner, start, w](std::span<const double> g,
                                                                              std::span<Tape::Grad* const> p) {
                            auto& gx = *p[0];
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t i = 0; i < w; ++i) gx[(o * len + start) * inner + i] += g[o * w + i];
                          });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const Shape out = broadcast_shape(x.shape(), shape, "broadcast");
  if (out != shape)
    shape_fail("broadcast", "cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  const auto sx = aligned_strides(x.shape(), shape);
  const std::vector<std::size_t> none(shape.size(), 0);
  std::vector<double> data(numel(shape));
  const auto in = x.data();
  for_each_broadcast(shape, sx, none, [&](std::size_t o, std::size_t i, std::size_t) { data[o] = in[i]; });
  if (!x.tracked()) return Tensor(shape, std::move(data));
  const Shape in_shape = x.shape();
  return x.tape()->record(shape, std::move(data), {&x},
                          [in_shape, shape](std::span<const double> g, std::span<Tape::Grad* const> p) {
                            accumulate(p[0], reduce_to(g, shape, in_shape));
                          });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    shape_fail("reshape", "cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  if (!x.tracked()) return Tensor(std::move(shape), x.to_vector());
  return x.tape()->record(std::move(shape), x.to_vector(), {&x},
                          [](std::span<const double> g, std::span<Tape::Grad* const> p) { accumulate(p[0], g); });
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
  check_axis(x, axis, "index_select");
  const auto [outer, len, inner] = split_at(x.shape(), axis);
  for (std::size_t idx : indices)
    if (idx >= len)
      shape_fail("index_select", "index " + std::to_string(idx) + " out of range for dim " + std::to_string(len));
  Shape shape = x.shape();
  shape[axis] = indices.size();
  const std::size_t cnt = indices.size();
  std::vector<double> out(outer * cnt * inner);
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t s = 0; s < cnt; ++s)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * len + indices[s]) * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * cnt + s) * inner));
  if (!x.tracked()) return Tensor(shape, std::move(out));
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return x.tape()->record(shape, std::move(out), {&x},
                          [outer = outer, len = len, inner = inner, idx](std::span<const double> g,
                                                                         std::span<Tape::Grad* const> p) {
                            auto& gx = *p[0];
                            const std::size_t cnt = idx.size();
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t s = 0; s < cnt; ++s)
                                for (std::size_t i = 0; i < inner; ++i)
                                  gx[(o * len + idx[s]) * inner + i] += g[(o * cnt + s) * inner + i];
                          });
}

Tensor stop_gradient(const Tensor& x) { return x.detached(); }

}  // namespace sdfp
