#pragma once

// Embedding-space robustness evaluation: maximum loss increment in an
// eps-ball found by long-horizon PGD, restart convergence diagnostics,
// per-sample eps search against a reference model, and cross-model
// report assembly.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "advlab/adversary.hpp"
#include "advlab/data.hpp"
#include "advlab/model.hpp"

namespace advlab {

enum class EpsMode { fixed, relative, searched };

EpsMode eps_mode_from_string(const std::string& s);
std::string to_string(EpsMode m);

struct AttackConfig {
  int steps = 2000;
  double step_size = 5e-3;
  EpsMode mode = EpsMode::fixed;
  double epsilon = 0.0;     // fixed-mode radius; searched-mode training radius
  double eps_rel = 0.01;    // relative mode: eps = eps_rel * ||X||_F per sample
  int restarts = 10;        // R for convergence checks
  double eps_start_factor = 1.1;  // searched: start slightly above the training eps
  double eps_decrement = 0.0;     // searched: 0 means eps_start / 20
  std::size_t max_samples = 0;    // 0 = evaluate every kept sample

  void validate() const;
};

/// A batch of independent per-sample loss landscapes over delta. The
/// gradient seed is the per-sample loss sum, so each sample's gradient
/// slice is exactly its own loss gradient regardless of batch grouping.
class AttackSurface {
 public:
  virtual ~AttackSurface() = default;

  struct Eval {
    std::vector<double> loss;           // per sample
    std::vector<std::uint8_t> correct;  // argmax(logits) == label
    Tensor grad;                        // (batch, seq, dim), defined iff requested
  };

  virtual std::size_t batch() const = 0;
  virtual const DeltaGeometry& geometry() const = 0;
  virtual Eval evaluate(const Tensor& delta, bool want_grad) = 0;
};

/// Transformer-backed surface: the forward graph is recorded once and
/// replayed per attack iteration with dropout off and frozen parameters.
class ModelSurface : public AttackSurface {
 public:
  ModelSurface(const ModelConfig& cfg, const ModelParams& params, Batch samples);

  std::size_t batch() const override { return batch_.size; }
  const DeltaGeometry& geometry() const override { return geom_; }
  Eval evaluate(const Tensor& delta, bool want_grad) override;

  /// Per-sample ||X||_F of the clean embeddings.
  std::vector<double> embedding_norms() const;

 private:
  ModelConfig cfg_;
  ModelParams params_;  // private copy; attack is read-only on the caller's model
  Batch batch_;
  DeltaGeometry geom_;
  Tape tape_;
  Tensor delta_leaf_;
  Tensor logits_;
  Tensor per_sample_loss_;
  Tensor loss_sum_;
};

struct AttackOutcome {
  double delta_l_max = 0.0;  // max over the trajectory, clean point included
  double natural_loss = 0.0;
  bool ever_misclassified = false;  // any trajectory iterate misclassified
  bool diverged = false;            // non-finite loss mid-attack; delta_l_max = +inf
};

/// Full PGD ascent on every sample of the surface; eps and the init
/// stream are per sample. The streams advance past the draws they used.
std::vector<AttackOutcome> run_pgd_attack(AttackSurface& surface, const std::vector<double>& eps,
                                          const AttackConfig& atk,
                                          std::vector<RngState>& sample_rng);

/// Single-sample maximum loss increment (Eq.-5 style estimate); the
/// surface must hold exactly one sample.
double max_loss_increase(AttackSurface& surface, double eps, const AttackConfig& atk,
                         RngState& rng);
AttackOutcome attack_outcome(AttackSurface& surface, double eps, const AttackConfig& atk,
                             RngState& rng);

struct ConvergenceStats {
  double max_dl = 0.0;
  double min_dl = 0.0;
  double spread = 0.0;  // (max - min) / max, 0 when max == 0
  std::vector<double> values;
};

/// R restarts from independent initializations of a single-sample surface.
ConvergenceStats attack_convergence(AttackSurface& surface, double eps, const AttackConfig& atk,
                                    int restarts, const RngState& base_rng);

/// Largest eps in {eps_start - k*decrement} the reference defends under a
/// full-budget attack; 0 if none. The sample must be classified correctly
/// clean, else the protocol is violated and this throws.
double per_sample_epsilon_search(AttackSurface& reference, double eps_start, double decrement,
                                 const AttackConfig& atk, const RngState& rng);

struct SampleRow {
  std::size_t index = 0;  // row in the evaluated dataset
  bool kept = false;      // classified correctly by every model
  bool evaluated = false;
  double eps = 0.0;
  double delta_l_max = 0.0;
  double natural_loss = 0.0;
  bool diverged = false;
};

struct EvalReport {
  std::string model;
  std::string reference;
  std::vector<SampleRow> samples;
  double median_delta_l_max = 0.0;
  double std_delta_l_max = 0.0;
  double median_natural_loss = 0.0;
  std::size_t evaluated = 0;
  std::size_t filtered_out = 0;
  std::size_t total = 0;

  std::string to_json() const;
};

struct NamedModel {
  std::string name;
  ModelConfig cfg;
  ModelParams params;
};

/// The cross-model protocol: filter to samples every model classifies
/// correctly, fix a per-sample eps (searched against the reference in
/// searched mode), attack every model at that eps, aggregate medians.
std::vector<EvalReport> robustness_report(const std::vector<NamedModel>& models,
                                          const EncodedData& data, const std::string& reference,
                                          const AttackConfig& atk, std::uint64_t seed);

/// Plain-text rendering of the report pair in the M-Inc / M-Inc (R) /
/// N-Loss layout; alt may be null.
std::string render_comparison_table(const std::vector<EvalReport>& primary,
                                    const std::vector<EvalReport>* alt);

/// Approximate count of distinct norm constraints the ascent trajectory
/// visits: min{K, ceil((eps - E||delta0||)/alpha) + 1} with E||delta0||
/// taken as eps/sqrt(3), the first-order expectation of the scaled
/// uniform initialization for any element count.
int invariance_cardinality(int k, double eps, double alpha, std::size_t n_delta);

double expected_init_norm(double eps);  // eps / sqrt(3)

/// Monte-Carlo mean of ||delta0||_F over the given number of draws.
double estimate_init_norm_mc(double eps, std::size_t n_delta, int draws, RngState& rng);

double median(std::vector<double> xs);
double sample_std(const std::vector<double>& xs);

}  // namespace advlab
