#include "sdfp/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace sdfp {

namespace {

Tensor glorot(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> w(in * out);
  for (auto& v : w) v = dist(rng);
  return Tensor({in, out}, std::move(w));
}

// Applies a rank-2 function to the trailing axis of a tensor of any rank >= 2.
template <class F>
Tensor on_rows(const Tensor& x, F f) {
  if (x.rank() == 2) return f(x);
  if (x.rank() < 2) throw ShapeError("dense: input must have rank >= 2, got " + to_string(x.shape()));
  const std::size_t cols = x.shape().back();
  Tensor y = f(reshape(x, {x.size() / std::max<std::size_t>(cols, 1), cols}));
  Shape out = x.shape();
  out.back() = y.dim(1);
  return reshape(y, out);
}

}  // namespace

Dense::Dense(std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight(glorot(in, out, rng)), bias(Tensor::zeros({out})) {}

Tensor Dense::operator()(const Tensor& x) const {
  return on_rows(x, [this](const Tensor& rows) {
    if (rows.dim(1) != in_dim())
      throw ShapeError("dense: expected " + std::to_string(in_dim()) + " input features, got " +
                       to_string(rows.shape()));
    return add(matmul(rows, weight), bias);
  });
}

void Dense::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".weight", weight, true);
  fn(prefix + ".bias", bias, true);
}

BatchNorm::BatchNorm(std::size_t features, double momentum_, double eps_)
    : gamma(Tensor::full({features}, 1.0)),
      beta(Tensor::zeros({features})),
      running_mean(Tensor::zeros({features})),
      running_var(Tensor::full({features}, 1.0)),
      momentum(momentum_),
      eps(eps_) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 2 || x.dim(1) != gamma.size())
    throw ShapeError("batch_norm: expected [B x " + std::to_string(gamma.size()) + "], got " +
                     to_string(x.shape()));
  if (mode == Mode::eval) {
    // The affine coefficients depend on trainable gamma/beta, so the map is
    // expressed with tensor ops to keep them on the tape.
    const Tensor inv = rsqrt(add_scalar(running_var, eps));
    const Tensor g = mul(gamma, inv);
    return add(mul(sub(x, running_mean), g), beta);
  }
  const std::size_t b = x.dim(0);
  if (b < 2) throw ContractError("batch_norm: train mode needs a batch of at least 2 rows");
  const Tensor mu = mean_over_axis(x, 0);
  const Tensor centered = sub(x, mu);
  const Tensor var = mean_over_axis(square(centered), 0);
  const Tensor y = add(mul(mul(centered, rsqrt(add_scalar(var, eps))), gamma), beta);

  const auto m = mu.data();
  const auto v = var.data();
  const auto rm = running_mean.data();
  const auto rv = running_var.data();
  const double unbias = static_cast<double>(b) / static_cast<double>(b - 1);
  std::vector<double> nm(m.size()), nv(v.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    nm[i] = momentum * rm[i] + (1.0 - momentum) * m[i];
    nv[i] = momentum * rv[i] + (1.0 - momentum) * v[i] * unbias;
  }
  running_mean = Tensor(running_mean.shape(), std::move(nm));
  running_var = Tensor(running_var.shape(), std::move(nv));
  return y;
}

void BatchNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".gamma", gamma, true);
  fn(prefix + ".beta", beta, true);
  fn(prefix + ".running_mean", running_mean, false);
  fn(prefix + ".running_var", running_var, false);
}

LstmStack::LstmStack(std::size_t input, std::size_t hidden, std::size_t layers, std::mt19937_64& rng)
    : hidden_(hidden) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? input : hidden;
    weights.push_back(glorot(in + hidden, 4 * hidden, rng));
    std::vector<double> b(4 * hidden, 0.0);
    std::fill(b.begin() + static_cast<std::ptrdiff_t>(hidden), b.begin() + static_cast<std::ptrdiff_t>(2 * hidden),
              1.0);
    biases.emplace_back(Shape{4 * hidden}, std::move(b));
  }
}

Tensor lstm_cell(const Tensor& pre, const Tensor& bias, const Tensor& c_prev) {
  if (pre.rank() != 2 || pre.dim(1) % 4 != 0 || bias.shape() != Shape{pre.dim(1)} ||
      c_prev.shape() != Shape{pre.dim(0), pre.dim(1) / 4})
    throw ShapeError("lstm_cell: pre-activations " + to_string(pre.shape()) + ", bias " + to_string(bias.shape()) +
                     ", cell " + to_string(c_prev.shape()));
  const std::size_t rows = pre.dim(0), h = pre.dim(1) / 4, w = 4 * h;
  const auto z = pre.data();
  const auto b = bias.data();
  const auto cp = c_prev.data();
  // sg holds sigma(i), sigma(f), sigma(o) per row and tg holds tanh(g), so
  // each gate kind goes through one vectorised call.
  auto sg = std::make_shared<std::vector<double>>(rows * 3 * h);
  auto tg = std::make_shared<std::vector<double>>(rows * h);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = z.data() + r * w;
    double* s = sg->data() + r * 3 * h;
    double* t = tg->data() + r * h;
    for (std::size_t u = 0; u < 2 * h; ++u) s[u] = zr[u] + b[u];
    for (std::size_t u = 0; u < h; ++u) t[u] = zr[2 * h + u] + b[2 * h + u];
    for (std::size_t u = 0; u < h; ++u) s[2 * h + u] = zr[3 * h + u] + b[3 * h + u];
  }
  sigmoid_values(*sg, *sg);
  tanh_values(*tg, *tg);

  std::vector<double> out(rows * 2 * h);
  auto tc = std::make_shared<std::vector<double>>(rows * h);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = sg->data() + r * 3 * h;
    const double* t = tg->data() + r * h;
    double* c = out.data() + r * 2 * h + h;
    for (std::size_t u = 0; u < h; ++u) {
      c[u] = s[h + u] * cp[r * h + u] + s[u] * t[u];
      (*tc)[r * h + u] = c[u];
    }
  }
  tanh_values(*tc, *tc);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t u = 0; u < h; ++u) out[r * 2 * h + u] = (*sg)[r * 3 * h + 2 * h + u] * (*tc)[r * h + u];

  Tape* tape = common_tape({&pre, &bias, &c_prev});
  if (tape == nullptr) return Tensor({rows, 2 * h}, std::move(out));
  const Tensor cv = c_prev.detached();
  return tape->record(
      {rows, 2 * h}, std::move(out), {&pre, &bias, &c_prev},
      [sg, tg, tc, cv, rows, h, w](std::span<const double> g, std::span<Tape::Grad* const> p) {
        const auto cp = cv.data();
        std::vector<double> dz(rows * w);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* s = sg->data() + r * 3 * h;
          const double* tgr = tg->data() + r * h;
          double* d = dz.data() + r * w;
          for (std::size_t u = 0; u < h; ++u) {
            const double gi = s[u], gf = s[h + u], gg = tgr[u], go = s[2 * h + u];
            const double t = (*tc)[r * h + u];
            const double gh = g[r * 2 * h + u];
            const double dc = g[r * 2 * h + h + u] + gh * go * (1.0 - t * t);
            d[u] = dc * gg * gi * (1.0 - gi);
            d[h + u] = dc * cp[r * h + u] * gf * (1.0 - gf);
            d[2 * h + u] = dc * gi * (1.0 - gg * gg);
            d[3 * h + u] = gh * t * go * (1.0 - go);
            if (p[2] != nullptr) (*p[2])[r * h + u] += dc * gf;
          }
        }
        if (p[0] != nullptr)
          for (std::size_t k = 0; k < dz.size(); ++k) (*p[0])[k] += dz[k];
        if (p[1] != nullptr)
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t u = 0; u < w; ++u) (*p[1])[u] += dz[r * w + u];
      });
}

LstmState LstmStack::initial_state(std::size_t rows) const {
  LstmState s;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    s.h.push_back(Tensor::zeros({rows, hidden_}));
    s.c.push_back(Tensor::zeros({rows, hidden_}));
  }
  return s;
}

Tensor LstmStack::step(const Tensor& x, LstmState& state) const {
  if (state.h.size() != weights.size())
    throw ContractError("lstm: state has " + std::to_string(state.h.size()) + " layers, stack has " +
                        std::to_string(weights.size()));
  Tensor input = x;
  const std::size_t h = hidden_;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (state.h[l].dim(0) != input.dim(0))
      throw ShapeError("lstm: state rows " + std::to_string(state.h[l].dim(0)) + " vs input rows " +
                       std::to_string(input.dim(0)));
    const Tensor hc = lstm_cell(matmul(concat({input, state.h[l]}, 1), weights[l]), biases[l], state.c[l]);
    state.h[l] = slice(hc, 1, 0, h);
    state.c[l] = slice(hc, 1, h, h);
    input = state.h[l];
  }
  return input;
}

void LstmStack::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    fn(prefix + "." + std::to_string(l) + ".weight", weights[l], true);
    fn(prefix + "." + std::to_string(l) + ".bias", biases[l], true);
  }
}

InitialValueNet::InitialValueNet(std::size_t inputs, std::size_t hidden, std::size_t depth,
                                 std::mt19937_64& rng) {
  std::size_t in = inputs;
  for (std::size_t l = 0; l < depth; ++l) {
    layers.emplace_back(in, hidden, rng);
    in = hidden;
  }
  layers.emplace_back(in, 1, rng);
}

Tensor InitialValueNet::operator()(const Tensor& views) const {
  Tensor h = views;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) h = relu(layers[l](h));
  return layers.back()(h);
}

void InitialValueNet::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit(prefix + "." + std::to_string(l), fn);
}

InvariantLayer::InvariantLayer(std::size_t features, std::mt19937_64& rng) : phi(1, features, rng) {}

Tensor InvariantLayer::embed(const Tensor& states) const {
  if (states.rank() != 2) throw ShapeError("invariant_layer: states must be [B x N], got " + to_string(states.shape()));
  const std::size_t b = states.dim(0), n = states.dim(1);
  return reshape(phi(reshape(states, {b * n, 1})), {b, n, features()});
}

void InvariantLayer::visit(const std::string& prefix, const ParamVisitor& fn) { phi.visit(prefix + ".phi", fn); }

std::vector<std::size_t> view_order(std::size_t n, std::size_t agent) {
  std::vector<std::size_t> order;
  order.reserve(n);
  order.push_back(agent);
  for (std::size_t j = 0; j < n; ++j)
    if (j != agent) order.push_back(j);
  return order;
}

Tensor build_agent_view(const Tensor& states) {
  if (states.rank() != 2) throw ShapeError("build_agent_view: expected [B x N], got " + to_string(states.shape()));
  const std::size_t b = states.dim(0), n = states.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto o = view_order(n, i);
    idx.insert(idx.end(), o.begin(), o.end());
  }
  return reshape(index_select(states, 1, idx), {b, n, n});
}

Tensor invariant_features_naive(const InvariantLayer& layer, const Tensor& views) {
  if (views.rank() != 3 || views.dim(1) != views.dim(2))
    throw ShapeError("invariant_features_naive: expected [B x N x N], got " + to_string(views.shape()));
  const std::size_t b = views.dim(0), n = views.dim(1), f = layer.features();
  if (n == 1) return Tensor::zeros({b, 1, f});
  const Tensor others = reshape(slice(views, 2, 1, n - 1), {b * n * (n - 1), 1});
  const Tensor emb = reshape(layer.phi(others), {b, n, n - 1, f});
  return relu(mean_over_axis(emb, 2));
}

Tensor invariant_features_fast(const InvariantLayer& layer, const Tensor& states) {
  if (states.rank() != 2) throw ShapeError("invariant_features_fast: expected [B x N], got " + to_string(states.shape()));
  const std::size_t n = states.dim(1);
  if (n < 2) throw ContractError("invariant_features_fast: leave-one-out pooling needs N >= 2");
  const Tensor emb = layer.embed(states);
  const Tensor total = scale(mean_over_axis(emb, 1, true), static_cast<double>(n));
  return relu(scale(sub(total, emb), 1.0 / static_cast<double>(n - 1)));
}

Tensor pooled_features(const Tensor& embedded, std::span<const std::size_t> agents) {
  if (embedded.rank() != 3) throw ShapeError("pooled_features: expected [B x N x F], got " + to_string(embedded.shape()));
  const std::size_t b = embedded.dim(0), n = embedded.dim(1), f = embedded.dim(2);
  if (n < 2) throw ContractError("pooled_features: leave-one-out pooling needs N >= 2");
  const Tensor total = scale(mean_over_axis(embedded, 1), static_cast<double>(n));
  std::vector<std::size_t> own_rows, sample_rows;
  own_rows.reserve(agents.size() * b);
  sample_rows.reserve(agents.size() * b);
  for (std::size_t k : agents)
    for (std::size_t s = 0; s < b; ++s) {
      own_rows.push_back(s * n + k);
      sample_rows.push_back(s);
    }
  const Tensor own = index_select(reshape(embedded, {b * n, f}), 0, own_rows);
  const Tensor tot = index_select(total, 0, sample_rows);
  return relu(scale(sub(tot, own), 1.0 / static_cast<double>(n - 1)));
}

void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  nlohmann::json header;
  header["format"] = "sdfp-checkpoint-1";
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write on checkpoint " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path);
  const auto header = nlohmann::json::parse(text);
  const auto base = static_cast<std::streamoff>(sizeof(len) + len);
  std::vector<std::pair<std::string, Tensor>> result;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> data(numel(shape));
    in.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint data in " + path);
    result.emplace_back(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return result;
}

}  // namespace sdfp
