#include "advlab/robustness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace advlab {

EpsMode eps_mode_from_string(const std::string& s) {
  if (s == "fixed") return EpsMode::fixed;
  if (s == "relative") return EpsMode::relative;
  if (s == "searched") return EpsMode::searched;
  throw std::invalid_argument("unknown eps mode '" + s + "'");
}

std::string to_string(EpsMode m) {
  switch (m) {
    case EpsMode::fixed: return "fixed";
    case EpsMode::relative: return "relative";
    case EpsMode::searched: return "searched";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("attack: steps must be >= 1");
  if (step_size <= 0.0) throw std::invalid_argument("attack: step_size must be > 0");
  if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be >= 0");
  if (eps_rel < 0.0) throw std::invalid_argument("attack: eps_rel must be >= 0");
  if (restarts < 1) throw std::invalid_argument("attack: restarts must be >= 1");
  if (eps_start_factor <= 0.0) throw std::invalid_argument("attack: eps_start_factor must be > 0");
  if (eps_decrement < 0.0) throw std::invalid_argument("attack: eps_decrement must be >= 0");
}

// ---- ModelSurface ----

ModelSurface::ModelSurface(const ModelConfig& cfg, const ModelParams& params, Batch samples)
    : cfg_(cfg), params_(params.clone()), batch_(std::move(samples)) {
  geom_ = delta_geometry(batch_, cfg_.embedding_dim);
  delta_leaf_ = Tensor::zeros({batch_.size, batch_.seq_len, cfg_.embedding_dim});
  tape_.watch(delta_leaf_);
  Tensor x = add(embed(batch_, params_.embedding), delta_leaf_);
  logits_ = forward(x, batch_, params_, cfg_, nullptr);
  per_sample_loss_ = cross_entropy_per_sample(logits_, batch_.labels);
  loss_sum_ = sum_all(per_sample_loss_);
}

ModelSurface::Eval ModelSurface::evaluate(const Tensor& delta, bool want_grad) {
  if (delta.shape() != delta_leaf_.shape())
    throw std::invalid_argument("ModelSurface: delta shape mismatch");
  delta_leaf_.copy_from(delta);
  tape_.replay();
  Eval ev;
  ev.loss.assign(per_sample_loss_.data(), per_sample_loss_.data() + batch_.size);
  ev.correct.resize(batch_.size);
  for (std::size_t b = 0; b < batch_.size; ++b)
    ev.correct[b] =
        argmax_row(logits_.data() + b * cfg_.classes, cfg_.classes) == batch_.labels[b];
  if (want_grad) ev.grad = tape_.backward(loss_sum_, {delta_leaf_}).at(delta_leaf_);
  return ev;
}

std::vector<double> ModelSurface::embedding_norms() const {
  const Tensor x = gather_rows(params_.embedding, batch_.ids, {batch_.size, batch_.seq_len});
  std::vector<double> norms(batch_.size);
  const std::size_t stride = batch_.seq_len * cfg_.embedding_dim;
  for (std::size_t b = 0; b < batch_.size; ++b)
    norms[b] = frobenius_norm({x.data() + b * stride, stride});
  return norms;
}

// ---- attack core ----

namespace {

Perturbation init_delta_per_sample(const DeltaGeometry& geom, const std::vector<double>& eps,
                                   std::vector<RngState>& rng) {
  Perturbation p;
  p.geometry = geom;
  p.eps = eps;
  p.values = Tensor::zeros({geom.batch, geom.seq_len, geom.dim});
  const std::size_t stride = geom.seq_len * geom.dim;
  for (std::size_t b = 0; b < geom.batch; ++b) {
    DeltaGeometry one{1, geom.seq_len, geom.dim,
                      {geom.mask.begin() + b * geom.seq_len,
                       geom.mask.begin() + (b + 1) * geom.seq_len}};
    Perturbation single = init_delta(one, eps[b], rng[b]);
    std::copy(single.values.data(), single.values.data() + stride, p.values.data() + b * stride);
  }
  return p;
}

}  // namespace

std::vector<AttackOutcome> run_pgd_attack(AttackSurface& surface, const std::vector<double>& eps,
                                          const AttackConfig& atk,
                                          std::vector<RngState>& sample_rng) {
  atk.validate();
  const std::size_t B = surface.batch();
  if (eps.size() != B || sample_rng.size() != B)
    throw std::invalid_argument("run_pgd_attack: per-sample arguments must match the batch");

  std::vector<AttackOutcome> out(B);
  const Tensor zero = Tensor::zeros({B, surface.geometry().seq_len, surface.geometry().dim});
  AttackSurface::Eval nat = surface.evaluate(zero, false);
  bool any_positive = false;
  for (std::size_t b = 0; b < B; ++b) {
    out[b].natural_loss = nat.loss[b];
    out[b].ever_misclassified = !nat.correct[b];
    any_positive = any_positive || eps[b] > 0.0;
  }
  if (!any_positive) return out;  // the ball is {0}: the clean point decides everything

  Perturbation delta = init_delta_per_sample(surface.geometry(), eps, sample_rng);
  for (int t = 0; t <= atk.steps; ++t) {
    const bool want_grad = t < atk.steps;
    AttackSurface::Eval ev = surface.evaluate(delta.values, want_grad);
    for (std::size_t b = 0; b < B; ++b) {
      out[b].delta_l_max = std::max(out[b].delta_l_max, ev.loss[b] - out[b].natural_loss);
      out[b].ever_misclassified = out[b].ever_misclassified || !ev.correct[b];
    }
    if (want_grad) ascent_step(delta, ev.grad, atk.step_size);
  }
  return out;
}

AttackOutcome attack_outcome(AttackSurface& surface, double eps, const AttackConfig& atk,
                             RngState& rng) {
  if (surface.batch() != 1)
    throw std::invalid_argument("attack_outcome: surface must hold one sample");
  std::vector<RngState> rngs{rng};
  try {
    AttackOutcome o = run_pgd_attack(surface, {eps}, atk, rngs)[0];
    rng = rngs[0];
    return o;
  } catch (const NumericalError&) {
    rng = rngs[0];
    AttackOutcome o;
    o.delta_l_max = std::numeric_limits<double>::infinity();
    o.diverged = true;
    o.ever_misclassified = true;
    return o;
  }
}

double max_loss_increase(AttackSurface& surface, double eps, const AttackConfig& atk,
                         RngState& rng) {
  return attack_outcome(surface, eps, atk, rng).delta_l_max;
}

ConvergenceStats attack_convergence(AttackSurface& surface, double eps, const AttackConfig& atk,
                                    int restarts, const RngState& base_rng) {
  if (restarts < 1) throw std::invalid_argument("attack_convergence: restarts must be >= 1");
  ConvergenceStats stats;
  for (int r = 0; r < restarts; ++r) {
    RngState rng = base_rng.fork(static_cast<std::uint64_t>(r));
    stats.values.push_back(max_loss_increase(surface, eps, atk, rng));
  }
  stats.max_dl = *std::max_element(stats.values.begin(), stats.values.end());
  stats.min_dl = *std::min_element(stats.values.begin(), stats.values.end());
  stats.spread = stats.max_dl > 0.0 ? (stats.max_dl - stats.min_dl) / stats.max_dl : 0.0;
  return stats;
}

double per_sample_epsilon_search(AttackSurface& reference, double eps_start, double decrement,
                                 const AttackConfig& atk, const RngState& rng) {
  if (reference.batch() != 1)
    throw std::invalid_argument("per_sample_epsilon_search: surface must hold one sample");
  if (eps_start <= 0.0 || decrement <= 0.0)
    throw std::invalid_argument("per_sample_epsilon_search: eps_start and decrement must be > 0");
  const Tensor zero =
      Tensor::zeros({1, reference.geometry().seq_len, reference.geometry().dim});
  if (!reference.evaluate(zero, false).correct[0])
    throw std::invalid_argument(
        "per_sample_epsilon_search: sample misclassified clean (protocol violation)");
  std::uint64_t trial = 0;
  for (double eps = eps_start; eps > 0.0; eps -= decrement) {
    RngState trial_rng = rng.fork(trial++);
    AttackOutcome o = attack_outcome(reference, eps, atk, trial_rng);
    if (!o.ever_misclassified && !o.diverged) return eps;
  }
  return 0.0;
}

// ---- report assembly ----

double median(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

namespace {

std::vector<std::uint8_t> clean_correct(const NamedModel& model, const EncodedData& data) {
  std::vector<std::uint8_t> ok(data.count);
  const std::size_t chunk = 64;
  for (std::size_t first = 0; first < data.count; first += chunk) {
    std::vector<std::size_t> rows;
    for (std::size_t r = first; r < std::min(first + chunk, data.count); ++r) rows.push_back(r);
    Batch b = make_batch(data, rows);
    Tensor logits = predict_logits(b, model.params, model.cfg);
    for (std::size_t i = 0; i < b.size; ++i)
      ok[first + i] =
          argmax_row(logits.data() + i * model.cfg.classes, model.cfg.classes) == b.labels[i];
  }
  return ok;
}

// Attacks a set of dataset rows against one model, isolating divergent
// samples by bisection so one blown-up sample cannot poison its batch.
// Per-sample gradients are batch-composition independent by construction.
std::vector<AttackOutcome> attack_rows(const NamedModel& model, const EncodedData& data,
                                       const std::vector<std::size_t>& rows,
                                       const std::vector<double>& eps, const AttackConfig& atk,
                                       std::vector<RngState> rngs) {
  if (rows.empty()) return {};
  try {
    ModelSurface surface(model.cfg, model.params, make_batch(data, rows));
    return run_pgd_attack(surface, eps, atk, rngs);
  } catch (const NumericalError&) {
    if (rows.size() == 1) {
      AttackOutcome o;
      o.delta_l_max = std::numeric_limits<double>::infinity();
      o.diverged = true;
      o.ever_misclassified = true;
      return {o};
    }
    const std::size_t half = rows.size() / 2;
    std::vector<AttackOutcome> left = attack_rows(
        model, data, {rows.begin(), rows.begin() + half}, {eps.begin(), eps.begin() + half}, atk,
        {rngs.begin(), rngs.begin() + half});
    std::vector<AttackOutcome> right =
        attack_rows(model, data, {rows.begin() + half, rows.end()},
                    {eps.begin() + half, eps.end()}, atk, {rngs.begin() + half, rngs.end()});
    left.insert(left.end(), right.begin(), right.end());
    return left;
  }
}

// Searched-mode eps per row: lower candidates only where the reference
// fails to defend, re-attacking the still-active rows each round with a
// per-(sample, trial) forked init stream.
std::vector<double> search_eps_rows(const NamedModel& reference, const EncodedData& data,
                                    const std::vector<std::size_t>& rows, double eps_start,
                                    double decrement, const AttackConfig& atk,
                                    const std::vector<RngState>& base_rngs) {
  std::vector<double> eps(rows.size(), eps_start);
  std::vector<std::uint8_t> active(rows.size(), 1);
  std::vector<std::uint64_t> trial(rows.size(), 0);
  while (true) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (active[i]) idx.push_back(i);
    if (idx.empty()) break;
    std::vector<std::size_t> sub_rows;
    std::vector<double> sub_eps;
    std::vector<RngState> sub_rngs;
    for (std::size_t i : idx) {
      sub_rows.push_back(rows[i]);
      sub_eps.push_back(eps[i]);
      sub_rngs.push_back(base_rngs[i].fork(trial[i]));
    }
    std::vector<AttackOutcome> outcomes =
        attack_rows(reference, data, sub_rows, sub_eps, atk, std::move(sub_rngs));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::size_t i = idx[k];
      ++trial[i];
      if (!outcomes[k].ever_misclassified && !outcomes[k].diverged) {
        active[i] = 0;  // defended at this radius
      } else {
        eps[i] -= decrement;
        if (eps[i] <= 0.0) {
          eps[i] = 0.0;
          active[i] = 0;
        }
      }
    }
  }
  return eps;
}

}  // namespace

std::vector<EvalReport> robustness_report(const std::vector<NamedModel>& models,
                                          const EncodedData& data, const std::string& reference,
                                          const AttackConfig& atk, std::uint64_t seed) {
  atk.validate();
  if (models.empty()) throw std::invalid_argument("robustness_report: no models");
  std::size_t ref_idx = models.size();
  for (std::size_t i = 0; i < models.size(); ++i)
    if (models[i].name == reference) ref_idx = i;
  if (ref_idx == models.size())
    throw std::invalid_argument("robustness_report: reference '" + reference + "' not in models");

  // (1) keep only samples every model classifies correctly.
  std::vector<std::vector<std::uint8_t>> ok;
  for (const NamedModel& m : models) ok.push_back(clean_correct(m, data));
  std::vector<std::size_t> kept;
  for (std::size_t r = 0; r < data.count; ++r) {
    bool all = true;
    for (const auto& o : ok) all = all && o[r];
    if (all) kept.push_back(r);
  }
  if (kept.empty()) {
    std::ostringstream os;
    os << "robustness_report: no sample is classified correctly by every model (accuracies:";
    for (std::size_t i = 0; i < models.size(); ++i) {
      double acc = 0.0;
      for (auto v : ok[i]) acc += v;
      os << " " << models[i].name << "=" << acc / static_cast<double>(data.count);
    }
    os << ")";
    throw std::runtime_error(os.str());
  }

  std::vector<std::size_t> eval_rows = kept;
  if (atk.max_samples > 0 && eval_rows.size() > atk.max_samples)
    eval_rows.resize(atk.max_samples);

  // (2) one eps per sample, shared by every model.
  const RngState root(seed);
  std::vector<double> eps(eval_rows.size());
  if (atk.mode == EpsMode::fixed) {
    std::fill(eps.begin(), eps.end(), atk.epsilon);
  } else if (atk.mode == EpsMode::relative) {
    ModelSurface ref_surface(models[ref_idx].cfg, models[ref_idx].params,
                             make_batch(data, eval_rows));
    std::vector<double> norms = ref_surface.embedding_norms();
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = atk.eps_rel * norms[i];
  } else {
    if (atk.epsilon <= 0.0)
      throw std::invalid_argument("robustness_report: searched mode needs the training epsilon");
    const double eps_start = atk.eps_start_factor * atk.epsilon;
    const double dec = atk.eps_decrement > 0.0 ? atk.eps_decrement : eps_start / 20.0;
    std::vector<RngState> search_rngs;
    for (std::size_t r : eval_rows) search_rngs.push_back(root.fork(4 * r));
    eps = search_eps_rows(models[ref_idx], data, eval_rows, eps_start, dec, atk, search_rngs);
  }

  // (3) attack every model at the shared radii; identical init streams.
  std::vector<EvalReport> reports;
  for (const NamedModel& m : models) {
    std::vector<RngState> rngs;
    for (std::size_t r : eval_rows) rngs.push_back(root.fork(4 * r + 1));
    std::vector<AttackOutcome> outcomes = attack_rows(m, data, eval_rows, eps, atk, rngs);

    EvalReport rep;
    rep.model = m.name;
    rep.reference = reference;
    rep.total = data.count;
    rep.filtered_out = data.count - kept.size();
    rep.evaluated = eval_rows.size();
    std::vector<char> is_eval(data.count, 0);
    std::vector<std::size_t> eval_pos(data.count, 0);
    for (std::size_t i = 0; i < eval_rows.size(); ++i) {
      is_eval[eval_rows[i]] = 1;
      eval_pos[eval_rows[i]] = i;
    }
    std::vector<char> is_kept(data.count, 0);
    for (std::size_t r : kept) is_kept[r] = 1;
    std::vector<double> dls, nats;
    for (std::size_t r = 0; r < data.count; ++r) {
      SampleRow row;
      row.index = r;
      row.kept = is_kept[r];
      row.evaluated = is_eval[r];
      if (row.evaluated) {
        const AttackOutcome& o = outcomes[eval_pos[r]];
        row.eps = eps[eval_pos[r]];
        row.delta_l_max = o.delta_l_max;
        row.natural_loss = o.natural_loss;
        row.diverged = o.diverged;
        if (!o.diverged) {
          dls.push_back(o.delta_l_max);
          nats.push_back(o.natural_loss);
        }
      }
      rep.samples.push_back(row);
    }
    rep.median_delta_l_max = median(dls);
    rep.std_delta_l_max = sample_std(dls);
    rep.median_natural_loss = median(nats);
    reports.push_back(std::move(rep));
  }
  return reports;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["model"] = model;
  j["reference"] = reference;
  nlohmann::json rows = nlohmann::json::array();
  for (const SampleRow& r : samples) {
    nlohmann::json row;
    row["index"] = r.index;
    row["kept"] = r.kept;
    row["evaluated"] = r.evaluated;
    if (r.evaluated) {
      row["eps"] = r.eps;
      row["delta_l_max"] = r.diverged ? nlohmann::json("inf") : nlohmann::json(r.delta_l_max);
      row["natural_loss"] = r.natural_loss;
      row["diverged"] = r.diverged;
    }
    rows.push_back(row);
  }
  j["samples"] = rows;
  j["aggregate"] = {{"median_delta_l_max", median_delta_l_max},
                    {"std_delta_l_max", std_delta_l_max},
                    {"median_natural_loss", median_natural_loss},
                    {"evaluated", evaluated},
                    {"filtered_out", filtered_out},
                    {"total", total}};
  return j.dump(2) + "\n";
}

std::string render_comparison_table(const std::vector<EvalReport>& primary,
                                    const std::vector<EvalReport>* alt) {
  std::ostringstream os;
  os << "model        M-Inc(1e-4)  M-Inc(R)(1e-4)  N-Loss(1e-4)   [eps ref: "
     << (primary.empty() ? "?" : primary[0].reference);
  if (alt && !alt->empty()) os << " / " << (*alt)[0].reference;
  os << "]\n";
  char buf[160];
  for (std::size_t i = 0; i < primary.size(); ++i) {
    const EvalReport& p = primary[i];
    if (alt && i < alt->size()) {
      std::snprintf(buf, sizeof(buf), "%-12s %11.3f  %14.3f  %12.3f\n", p.model.c_str(),
                    p.median_delta_l_max * 1e4, (*alt)[i].median_delta_l_max * 1e4,
                    p.median_natural_loss * 1e4);
    } else {
      std::snprintf(buf, sizeof(buf), "%-12s %11.3f  %14s  %12.3f\n", p.model.c_str(),
                    p.median_delta_l_max * 1e4, "-", p.median_natural_loss * 1e4);
    }
    os << buf;
  }
  return os.str();
}

int invariance_cardinality(int k, double eps, double alpha, std::size_t n_delta) {
  if (alpha <= 0.0) throw std::invalid_argument("invariance_cardinality: alpha must be > 0");
  (void)n_delta;  // E||delta0|| = eps/sqrt(3) to first order for any element count
  const double reach = std::max(0.0, (eps - expected_init_norm(eps)) / alpha);
  const int by_radius = static_cast<int>(std::ceil(reach)) + 1;
  return std::min(k, by_radius);
}

double expected_init_norm(double eps) { return eps / std::sqrt(3.0); }

double estimate_init_norm_mc(double eps, std::size_t n_delta, int draws, RngState& rng) {
  DeltaGeometry geom{1, n_delta, 1, std::vector<std::uint8_t>(n_delta, 1)};
  double sum = 0.0;
  for (int i = 0; i < draws; ++i) {
    Perturbation p = init_delta(geom, eps, rng);
    sum += p.sample_norm(0);
  }
  return sum / static_cast<double>(draws);
}

}  // namespace advlab
