#include "sdfp/agent_net.hpp"

#include <map>
#include <stdexcept>

namespace sdfp {

namespace {

std::vector<std::size_t> inverse(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

void check_states(const Tensor& states, std::size_t n, const char* op) {
  if (states.rank() != 2 || states.dim(1) != n)
    throw ShapeError(std::string(op) + ": expected [B x " + std::to_string(n) + "] states, got " +
                     to_string(states.shape()));
}

}  // namespace

void GradientHead::visit(const std::string& prefix, const ParamVisitor& fn, bool use_il) {
  if (use_il) {
    own.visit(prefix + ".own", fn);
    other_context.visit(prefix + ".other_context", fn);
    fn(prefix + ".other_feature", other_feature, true);
  } else {
    view.visit(prefix + ".view", fn);
  }
}

Tensor agent_gradient_head(const GradientHead& head, const Tensor& context, const Tensor& embedded,
                           std::size_t agent, std::size_t n, bool use_il) {
  const auto order = view_order(n, agent);
  Tensor in_view;
  if (!use_il) {
    in_view = head.view(context);
  } else {
    const std::size_t b = context.dim(0);
    const Tensor own = head.own(context);
    if (n == 1) {
      in_view = own;
    } else {
      const std::size_t f = embedded.dim(2);
      const Tensor per_agent = reshape(matmul(reshape(embedded, {b * n, f}), head.other_feature), {b, n});
      const Tensor others = add(head.other_context(context), per_agent);
      const std::vector<std::size_t> rest(order.begin() + 1, order.end());
      in_view = concat({own, index_select(others, 1, rest)}, 1);
    }
  }
  return index_select(in_view, 1, inverse(order));
}

Tensor gather_views(const Tensor& states, std::span<const std::size_t> agents) {
  const std::size_t b = states.dim(0), n = states.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(agents.size() * b * n);
  for (std::size_t k : agents) {
    const auto order = view_order(n, k);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j : order) idx.push_back(s * n + j);
  }
  return reshape(index_select(reshape(states, {b * n}), 0, idx), {agents.size() * b, n});
}

AgentNet::AgentNet(const NetConfig& config, std::uint64_t seed) : config_(config) {
  if (config.agents == 0) throw ContractError("agent_net: need at least one agent");
  if (config.steps == 0) throw ContractError("agent_net: need at least one time step");
  std::mt19937_64 rng(seed);
  const std::size_t n = config.agents;
  iv_ = InitialValueNet(n, config.iv_hidden, config.iv_layers, rng);
  std::size_t input = n;
  if (config.use_il) {
    il_ = InvariantLayer(config.features, rng);
    own_encoder_ = Dense(1, config.own_width, rng);
    input = config.own_width + config.features;
  }
  std::size_t ctx = 0;
  if (config.backbone == Backbone::lstm) {
    lstm_ = LstmStack(input, config.lstm_hidden, config.lstm_layers, rng);
    ctx = config.lstm_hidden;
  } else {
    for (std::size_t t = 0; t < config.steps; ++t) {
      std::vector<Dense> layers;
      std::vector<BatchNorm> norms;
      std::size_t in = input;
      for (std::size_t l = 0; l < config.fc_layers; ++l) {
        layers.emplace_back(in, config.fc_hidden, rng);
        norms.emplace_back(config.fc_hidden);
        in = config.fc_hidden;
      }
      fc_.push_back(std::move(layers));
      bn_.push_back(std::move(norms));
    }
    ctx = config.fc_hidden;
  }
  if (config.use_il) {
    head_.own = Dense(ctx, 1, rng);
    head_.other_context = Dense(ctx, 1, rng);
    head_.other_feature = Dense(config.features, 1, rng).weight;
  } else {
    head_.view = Dense(ctx, n, rng);
  }
}

Session AgentNet::start(std::size_t rows) const {
  Session s;
  s.rows = rows;
  if (config_.backbone == Backbone::lstm) s.lstm = lstm_.initial_state(rows);
  return s;
}

Tensor AgentNet::initial_value(const Tensor& states, std::span<const std::size_t> agents) const {
  check_states(states, config_.agents, "initial_value");
  const Tensor y = iv_(gather_views(states, agents));
  return reshape(y, {y.dim(0)});
}

Tensor AgentNet::backbone_input(const Tensor& states, const Tensor& embedded,
                                std::span<const std::size_t> agents) const {
  if (!config_.use_il) return gather_views(states, agents);
  const std::size_t b = states.dim(0), n = config_.agents;
  std::vector<std::size_t> own_idx;
  own_idx.reserve(agents.size() * b);
  for (std::size_t k : agents)
    for (std::size_t s = 0; s < b; ++s) own_idx.push_back(s * n + k);
  const Tensor own = relu(own_encoder_(reshape(index_select(reshape(states, {b * n}), 0, own_idx), {own_idx.size(), 1})));
  const Tensor pooled = n == 1 ? Tensor::zeros({own_idx.size(), config_.features}) : pooled_features(embedded, agents);
  return concat({own, pooled}, 1);
}

Tensor AgentNet::context(const Tensor& input, std::size_t step, Session& session, Mode mode) {
  if (session.rows != input.dim(0))
    throw ContractError("agent_net: session opened for " + std::to_string(session.rows) + " rows, called with " +
                        std::to_string(input.dim(0)));
  if (config_.backbone == Backbone::lstm) return lstm_.step(input, session.lstm);
  if (step >= fc_.size())
    throw ContractError("agent_net: time step " + std::to_string(step) + " beyond the " +
                        std::to_string(fc_.size()) + " per-step networks");
  Tensor h = input;
  for (std::size_t l = 0; l < fc_[step].size(); ++l) h = relu(bn_[step][l].forward(fc_[step][l](h), mode));
  return h;
}

Tensor AgentNet::own_gradient(const Tensor& states, std::span<const std::size_t> agents, std::size_t step,
                              Session& session, Mode mode) {
  check_states(states, config_.agents, "own_gradient");
  const Tensor embedded = config_.use_il ? il_.embed(states) : Tensor();
  const Tensor ctx = context(backbone_input(states, embedded, agents), step, session, mode);
  const Tensor out = config_.use_il ? head_.own(ctx) : slice(head_.view(ctx), 1, 0, 1);
  return reshape(out, {out.dim(0)});
}

Tensor AgentNet::full_gradient(const Tensor& states, std::size_t agent, std::size_t step, Session& session,
                               Mode mode) {
  check_states(states, config_.agents, "full_gradient");
  const std::size_t agents[] = {agent};
  const Tensor embedded = config_.use_il ? il_.embed(states) : Tensor();
  const Tensor ctx = context(backbone_input(states, embedded, agents), step, session, mode);
  return agent_gradient_head(head_, ctx, embedded, agent, config_.agents, config_.use_il);
}

void AgentNet::visit(const ParamVisitor& fn) {
  iv_.visit("iv", fn);
  if (config_.use_il) {
    il_.visit("il", fn);
    own_encoder_.visit("own_encoder", fn);
  }
  if (config_.backbone == Backbone::lstm) {
    lstm_.visit("lstm", fn);
  } else {
    for (std::size_t t = 0; t < fc_.size(); ++t)
      for (std::size_t l = 0; l < fc_[t].size(); ++l) {
        const std::string p = "fc." + std::to_string(t) + "." + std::to_string(l);
        fc_[t][l].visit(p, fn);
        bn_[t][l].visit(p + ".bn", fn);
      }
  }
  head_.visit("head", fn, config_.use_il);
}

std::vector<std::pair<std::string, Tensor>> AgentNet::state_dict() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit([&](const std::string& name, Tensor& t, bool) { out.emplace_back(name, t.detached()); });
  return out;
}

void AgentNet::load_state_dict(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  visit([&](const std::string& name, Tensor& t, bool) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint is missing tensor " + name);
    if (it->second->shape() != t.shape())
      throw std::runtime_error("checkpoint tensor " + name + " has shape " + to_string(it->second->shape()) +
                               ", expected " + to_string(t.shape()));
    t = it->second->detached();
  });
}

std::size_t AgentNet::parameter_count() {
  std::size_t total = 0;
  visit([&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) total += t.size();
  });
  return total;
}

std::vector<Tensor> AgentNet::parameters() {
  std::vector<Tensor> out;
  visit([&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) out.push_back(t);
  });
  return out;
}

void AgentNet::set_parameters(std::span<const Tensor> values) {
  std::size_t i = 0;
  visit([&](const std::string& name, Tensor& t, bool trainable) {
    if (!trainable) return;
    if (i >= values.size()) throw ContractError("set_parameters: too few values");
    if (values[i].shape() != t.shape())
      throw ShapeError("set_parameters: " + name + " expects " + to_string(t.shape()) + ", got " +
                       to_string(values[i].shape()));
    t = values[i++];
  });
  if (i != values.size()) throw ContractError("set_parameters: too many values");
}

}  // namespace sdfp
