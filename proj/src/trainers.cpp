#include "advlab/trainers.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "json.hpp"

namespace advlab {

Method method_from_string(const std::string& s) {
  if (s == "natural") return Method::natural;
  if (s == "pgd") return Method::pgd;
  if (s == "freeat") return Method::freeat;
  if (s == "freelb") return Method::freelb;
  if (s == "yopo") return Method::yopo;
  throw std::invalid_argument("unknown method '" + s + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::natural: return "natural";
    case Method::pgd: return "pgd";
    case Method::freeat: return "freeat";
    case Method::freelb: return "freelb";
    case Method::yopo: return "yopo";
  }
  return "?";
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::sgd ? "sgd" : "adam"; }

void AdvConfig::validate() const {
  if (ascent_steps < 1) throw std::invalid_argument("config: ascent_steps must be >= 1");
  if (yopo_inner < 1) throw std::invalid_argument("config: yopo_inner must be >= 1");
  if (epsilon < 0.0) throw std::invalid_argument("config: epsilon must be >= 0");
  if (alpha < 0.0) throw std::invalid_argument("config: alpha must be >= 0");
  if (method != Method::natural && epsilon > 0.0 && alpha <= 0.0)
    throw std::invalid_argument("config: adversarial training needs alpha > 0");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("config: dropout must be in [0,1)");
  if (lr <= 0.0) throw std::invalid_argument("config: lr must be > 0");
  if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be > 0");
}

TrainState TrainState::init(const ModelConfig& cfg, std::uint64_t seed) {
  RngState rng(seed);
  TrainState s{cfg, ModelParams::init(cfg, rng), AdamState{}, 0, 0, rng, PassCounters{}};
  return s;
}

namespace {

void accumulate(std::vector<Tensor>& accum, const std::vector<Tensor>& grads, double weight) {
  if (accum.empty()) {
    accum.reserve(grads.size());
    for (const Tensor& g : grads) accum.push_back(Tensor::zeros(g.shape()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const double* src = grads[i].data();
    double* dst = accum[i].data();
    for (std::size_t k = 0; k < grads[i].size(); ++k) dst[k] += weight * src[k];
  }
}

// Applies one optimizer update. The PAD embedding row's gradient is
// masked so the row stays exactly zero (Adam moments included).
void apply_update(TrainState& state, std::vector<Tensor>& grads, const AdvConfig& cfg) {
  auto named = state.params.named_tensors();
  if (named.size() != grads.size())
    throw std::invalid_argument("apply_update: gradient count mismatch");

  const std::size_t d = state.model_cfg.embedding_dim;
  for (std::size_t c = 0; c < d; ++c) grads[0].data()[c] = 0.0;  // named[0] is the embedding

  if (cfg.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < named.size(); ++i) {
      double* p = named[i].second->data();
      const double* g = grads[i].data();
      for (std::size_t k = 0; k < grads[i].size(); ++k) p[k] -= cfg.lr * g[k];
    }
  } else {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    AdamState& a = state.adam;
    if (a.m.empty()) {
      for (std::size_t i = 0; i < named.size(); ++i) {
        a.m.push_back(Tensor::zeros(named[i].second->shape()));
        a.v.push_back(Tensor::zeros(named[i].second->shape()));
      }
    }
    ++a.t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(a.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(a.t));
    for (std::size_t i = 0; i < named.size(); ++i) {
      double* p = named[i].second->data();
      const double* g = grads[i].data();
      double* m = a.m[i].data();
      double* v = a.v[i].data();
      for (std::size_t k = 0; k < grads[i].size(); ++k) {
        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
        p[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      }
    }
  }

  for (std::size_t c = 0; c < d; ++c) state.params.embedding.data()[c] = 0.0;
  for (auto& [name, t] : named)
    if (!all_finite(t->values()))
      throw NumericalError("parameters diverged (non-finite " + name + " after update)");
  ++state.theta_updates;
}

struct MaskPlan {
  bool use = false;
  bool reuse = false;
  DropoutMaskSet shared;

  // Mask set for the next forward; samples a fresh set unless reusing.
  const DropoutMaskSet* next(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                             DropoutMaskSet& scratch) {
    if (!use) return nullptr;
    if (reuse) return &shared;
    scratch = sample_mask_set(state.model_cfg, batch.size, batch.seq_len, cfg.dropout, state.rng);
    return &scratch;
  }
};

MaskPlan make_mask_plan(TrainState& state, const Batch& batch, const AdvConfig& cfg) {
  MaskPlan plan;
  plan.use = cfg.dropout > 0.0;
  plan.reuse = cfg.reuse_mask;
  if (plan.use && plan.reuse)
    plan.shared = sample_mask_set(state.model_cfg, batch.size, batch.seq_len, cfg.dropout,
                                  state.rng);
  return plan;
}

void trace_masks(StepTrace* trace, const DropoutMaskSet* masks) {
  if (!trace) return;
  trace->masks_used.push_back(masks ? *masks : DropoutMaskSet{});
  trace->mask_fingerprints.push_back(masks ? masks->fingerprint() : 0);
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

double natural_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                    StepTrace* trace) {
  MaskPlan plan = make_mask_plan(state, batch, cfg);
  DropoutMaskSet scratch;
  const DropoutMaskSet* masks = plan.next(state, batch, cfg, scratch);
  trace_masks(trace, masks);
  LossGrads lg = loss_and_grads(batch, Tensor{}, state.params, state.model_cfg, masks,
                                {.theta = true, .delta = false}, &state.counters);
  if (trace) trace->losses.push_back(lg.loss);
  apply_update(state, lg.theta, cfg);
  ++state.step;
  return lg.loss;
}

double pgd_k_step(TrainState& state, const Batch& batch, const AdvConfig& cfg, StepTrace* trace) {
  Perturbation delta =
      init_delta(delta_geometry(batch, state.model_cfg.embedding_dim), cfg.epsilon, state.rng);
  MaskPlan plan = make_mask_plan(state, batch, cfg);
  DropoutMaskSet scratch;
  for (int t = 0; t < cfg.ascent_steps; ++t) {
    const DropoutMaskSet* masks = plan.next(state, batch, cfg, scratch);
    trace_masks(trace, masks);
    if (trace) trace->delta_used.push_back(delta.values.clone());
    LossGrads lg = loss_and_grads(batch, delta.values, state.params, state.model_cfg, masks,
                                  {.theta = false, .delta = true}, &state.counters);
    if (trace) trace->losses.push_back(lg.loss);
    if (cfg.alpha > 0.0) ascent_step(delta, lg.delta, cfg.alpha);
    if (trace) trace->delta_after.push_back(delta.values.clone());
  }
  const DropoutMaskSet* masks = plan.next(state, batch, cfg, scratch);
  trace_masks(trace, masks);
  LossGrads lg = loss_and_grads(batch, delta.values, state.params, state.model_cfg, masks,
                                {.theta = true, .delta = false}, &state.counters);
  if (trace) trace->losses.push_back(lg.loss);
  apply_update(state, lg.theta, cfg);
  ++state.step;
  return lg.loss;
}

double freeat_step(TrainState& state, const Batch& batch, const AdvConfig& cfg, StepTrace* trace) {
  Perturbation delta =
      init_delta(delta_geometry(batch, state.model_cfg.embedding_dim), cfg.epsilon, state.rng);
  MaskPlan plan = make_mask_plan(state, batch, cfg);
  DropoutMaskSet scratch;
  std::vector<double> losses;
  for (int t = 0; t < cfg.ascent_steps; ++t) {
    const DropoutMaskSet* masks = plan.next(state, batch, cfg, scratch);
    trace_masks(trace, masks);
    if (trace) trace->delta_used.push_back(delta.values.clone());
    LossGrads lg = loss_and_grads(batch, delta.values, state.params, state.model_cfg, masks,
                                  {.theta = true, .delta = true}, &state.counters);
    losses.push_back(lg.loss);
    // Both the theta update and the next delta come from gradients taken
    // at the pre-update parameters: the stale-gradient coupling.
    const std::uint64_t at = state.theta_updates;
    apply_update(state, lg.theta, cfg);
    if (trace) trace->provenance.push_back({at, state.theta_updates});
    if (cfg.alpha > 0.0) ascent_step(delta, lg.delta, cfg.alpha);
    if (trace) {
      trace->delta_after.push_back(delta.values.clone());
      trace->losses.push_back(lg.loss);
    }
  }
  ++state.step;
  return mean(losses);
}

double freelb_step(TrainState& state, const Batch& batch, const AdvConfig& cfg, StepTrace* trace) {
  const int K = cfg.ascent_steps;
  Perturbation delta =
      init_delta(delta_geometry(batch, state.model_cfg.embedding_dim), cfg.epsilon, state.rng);
  MaskPlan plan = make_mask_plan(state, batch, cfg);
  DropoutMaskSet scratch;
  std::vector<Tensor> g_accum;
  std::vector<double> losses;
  for (int t = 0; t < K; ++t) {
    const DropoutMaskSet* masks = plan.next(state, batch, cfg, scratch);
    trace_masks(trace, masks);
    if (trace) trace->delta_used.push_back(delta.values.clone());
    LossGrads lg = loss_and_grads(batch, delta.values, state.params, state.model_cfg, masks,
                                  {.theta = true, .delta = true}, &state.counters);
    losses.push_back(lg.loss);
    accumulate(g_accum, lg.theta, 1.0 / static_cast<double>(K));
    if (cfg.alpha > 0.0) ascent_step(delta, lg.delta, cfg.alpha);
    if (trace) {
      trace->delta_after.push_back(delta.values.clone());
      trace->losses.push_back(lg.loss);
    }
  }
  if (trace)
    for (const Tensor& g : g_accum) trace->accumulated_grad.push_back(g.clone());
  apply_update(state, g_accum, cfg);
  ++state.step;
  return mean(losses);
}

double yopo_step(TrainState& state, const Batch& batch, const AdvConfig& cfg, StepTrace* trace,
                 SplitPoint f0) {
  const int m = cfg.ascent_steps;
  const int n = cfg.yopo_inner;
  if (state.model_cfg.blocks < 1) throw std::invalid_argument("yopo: model needs >= 1 block");
  Perturbation delta =
      init_delta(delta_geometry(batch, state.model_cfg.embedding_dim), cfg.epsilon, state.rng);
  MaskPlan plan = make_mask_plan(state, batch, cfg);
  DropoutMaskSet scratch;
  std::vector<Tensor> g_accum;
  std::vector<double> losses;

  auto theta_list = state.params.named_tensors();
  for (int i = 0; i < m; ++i) {
    const DropoutMaskSet* masks = plan.next(state, batch, cfg, scratch);
    trace_masks(trace, masks);
    if (trace) trace->delta_used.push_back(delta.values.clone());

    // Full pass: theta gradient plus the split gradient p at the f0 boundary.
    Tensor p_split;
    {
      Tape tape;
      for (auto& [name, t] : theta_list) tape.watch(*t);
      Tensor d = delta.values;
      tape.watch(d);
      Tensor x = add(embed(batch, state.params.embedding), d);
      Tensor h1 = forward_prefix(x, batch, state.params, state.model_cfg, masks, f0);
      Tensor logits = forward_suffix(h1, batch, state.params, state.model_cfg, masks, f0);
      Tensor loss = cross_entropy(logits, batch.labels);
      ++state.counters.forwards;
      std::vector<Tensor> wanted;
      for (auto& [name, t] : theta_list) wanted.push_back(*t);
      wanted.push_back(h1);
      Gradients grads = tape.backward(loss, wanted);
      ++state.counters.backwards;
      losses.push_back(loss.item());
      if (trace) trace->losses.push_back(loss.item());
      std::vector<Tensor> theta_grads;
      for (auto& [name, t] : theta_list) theta_grads.push_back(grads.at(*t));
      accumulate(g_accum, theta_grads, 1.0 / static_cast<double>(m));
      p_split = grads.at(h1);
    }

    // Inner loop: recompute only f0 and ascend along Jacobian(f0)^T p.
    for (int j = 0; j < n; ++j) {
      Tape inner;
      Tensor d = delta.values;
      inner.watch(d);
      Tensor x = add(embed(batch, state.params.embedding), d);
      Tensor h1 = forward_prefix(x, batch, state.params, state.model_cfg, masks, f0);
      ++state.counters.partial_passes;
      Tensor g_adv = inner.vjp(h1, p_split, {d}).at(d);
      if (cfg.alpha > 0.0)
        ascent_step(delta, g_adv, cfg.alpha / static_cast<double>(n));
    }
    if (trace) trace->delta_after.push_back(delta.values.clone());
  }

  if (trace)
    for (const Tensor& g : g_accum) trace->accumulated_grad.push_back(g.clone());
  apply_update(state, g_accum, cfg);
  ++state.step;
  return mean(losses);
}

double train_step(TrainState& state, const Batch& batch, const AdvConfig& cfg, StepTrace* trace) {
  switch (cfg.method) {
    case Method::natural: return natural_step(state, batch, cfg, trace);
    case Method::pgd: return pgd_k_step(state, batch, cfg, trace);
    case Method::freeat: return freeat_step(state, batch, cfg, trace);
    case Method::freelb: return freelb_step(state, batch, cfg, trace);
    case Method::yopo: return yopo_step(state, batch, cfg, trace);
  }
  throw std::invalid_argument("train_step: bad method");
}

double evaluate_accuracy(const ModelParams& params, const ModelConfig& cfg,
                         const EncodedData& data, std::size_t batch_size) {
  if (data.count == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < data.count; first += batch_size) {
    std::vector<std::size_t> rows;
    for (std::size_t r = first; r < std::min(first + batch_size, data.count); ++r)
      rows.push_back(r);
    Batch b = make_batch(data, rows);
    Tensor logits = predict_logits(b, params, cfg);
    for (std::size_t i = 0; i < b.size; ++i)
      correct += argmax_row(logits.data() + i * cfg.classes, cfg.classes) == b.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.count);
}

TrainResult train(const ModelConfig& model_cfg, const AdvConfig& cfg, const EncodedData& train_set,
                  const EncodedData& dev_set) {
  cfg.validate();
  if (train_set.count == 0) throw std::invalid_argument("train: empty training set");
  TrainState state = TrainState::init(model_cfg, cfg.seed);

  TrainResult result;
  result.best_params = state.params.clone();
  double best_acc = -1.0;

  std::vector<std::size_t> order(train_set.count);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  PassCounters prev{};
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = order.size(); i-- > 1;) {
      const std::size_t j = state.rng.uniform_index(i + 1);
      std::swap(order[i], order[j]);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      std::vector<std::size_t> rows(order.begin() + first,
                                    order.begin() +
                                        std::min(first + cfg.batch_size, order.size()));
      Batch batch = make_batch(train_set, rows);
      try {
        loss_sum += train_step(state, batch, cfg);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(state.step) + ": " + e.what());
      }
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.dev_acc = evaluate_accuracy(state.params, model_cfg, dev_set, cfg.batch_size);
    rec.forwards = state.counters.forwards - prev.forwards;
    rec.backwards = state.counters.backwards - prev.backwards;
    rec.partial_passes = state.counters.partial_passes - prev.partial_passes;
    prev = state.counters;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    result.report.epochs.push_back(rec);
    if (rec.dev_acc > best_acc) {
      best_acc = rec.dev_acc;
      result.report.best_epoch = epoch;
      result.report.best_dev_acc = rec.dev_acc;
      result.best_params = state.params.clone();
    }
  }
  result.counters = state.counters;
  return result;
}

namespace {

nlohmann::json epoch_json(const EpochRecord& r, bool include_wall) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["dev_acc"] = r.dev_acc;
  j["forwards"] = r.forwards;
  j["backwards"] = r.backwards;
  j["partial_passes"] = r.partial_passes;
  if (include_wall) j["wall_ms"] = r.wall_ms;
  return j;
}

}  // namespace

std::string TrainReport::to_jsonl(bool include_wall) const {
  std::string out;
  for (const EpochRecord& r : epochs) out += epoch_json(r, include_wall).dump() + "\n";
  return out;
}

std::string TrainReport::to_json() const {
  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const EpochRecord& r : epochs) j["epochs"].push_back(epoch_json(r, false));
  j["best_epoch"] = best_epoch;
  if (best_epoch >= 0) j["best_dev_acc"] = best_dev_acc;
  return j.dump(2) + "\n";
}

}  // namespace advlab
