#pragma once

// One-step update rules and training loops: natural SGD, K-step PGD,
// FreeAT, FreeLB and YOPO-m-n, with dropout-mask reuse across ascent
// steps. Pass counts per minibatch are instrumented and contractual:
//   natural (1,1)   pgd (K+1,K+1)   freeat (K,K)   freelb (K,K)
//   yopo (m full + m*n partial)

#include <cstdint>
#include <string>
#include <vector>

#include "advlab/adversary.hpp"
#include "advlab/data.hpp"
#include "advlab/model.hpp"

namespace advlab {

enum class Method { natural, pgd, freeat, freelb, yopo };
enum class OptimizerKind { sgd, adam };

Method method_from_string(const std::string& s);
std::string to_string(Method m);
OptimizerKind optimizer_from_string(const std::string& s);
std::string to_string(OptimizerKind o);

struct AdvConfig {
  Method method = Method::natural;
  int ascent_steps = 1;  // K (the paper's m)
  double alpha = 0.0;    // adversary step size
  double epsilon = 0.0;  // Frobenius budget
  int yopo_inner = 1;    // n, yopo only
  double lr = 0.1;       // tau
  double dropout = 0.1;
  bool reuse_mask = true;
  OptimizerKind optimizer = OptimizerKind::sgd;
  int epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;

  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m, v;  // aligned with named_tensors() order
  std::uint64_t t = 0;
};

struct TrainState {
  ModelConfig model_cfg;
  ModelParams params;
  AdamState adam;
  std::uint64_t step = 0;
  std::uint64_t theta_updates = 0;
  RngState rng;
  PassCounters counters;

  static TrainState init(const ModelConfig& cfg, std::uint64_t seed);
};

/// Gradient provenance of a FreeAT replay: the parameter version the
/// gradient was computed at vs the version its update produced.
struct StaleRecord {
  std::uint64_t grad_theta_version;
  std::uint64_t applied_theta_version;
};

/// Optional per-step instrumentation, filled when a trace is passed.
struct StepTrace {
  std::vector<Tensor> delta_used;   // delta value each gradient was taken at
  std::vector<Tensor> delta_after;  // delta after each ascent update
  std::vector<DropoutMaskSet> masks_used;
  std::vector<std::uint64_t> mask_fingerprints;  // 0 when dropout is off
  std::vector<double> losses;
  std::vector<Tensor> accumulated_grad;  // freelb/yopo: final averaged theta gradient
  std::vector<StaleRecord> provenance;   // freeat
};

double natural_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                    StepTrace* trace = nullptr);
double pgd_k_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                  StepTrace* trace = nullptr);
double freeat_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                   StepTrace* trace = nullptr);
double freelb_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                   StepTrace* trace = nullptr);
/// f0 defaults to the first transformer block; tests may anchor the inner
/// updates at the (linear) embedding map instead.
double yopo_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                 StepTrace* trace = nullptr, SplitPoint f0 = SplitPoint::after_first_block);

/// Dispatch on cfg.method.
double train_step(TrainState& state, const Batch& batch, const AdvConfig& cfg,
                  StepTrace* trace = nullptr);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double dev_acc = 0.0;
  std::uint64_t forwards = 0;  // per-epoch pass counts
  std::uint64_t backwards = 0;
  std::uint64_t partial_passes = 0;
  double wall_ms = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_dev_acc = 0.0;

  /// One JSON object per epoch. Wall time is environment noise, not a
  /// function of (config, seed); it is included only on request so the
  /// default serialization is reproducible byte for byte.
  std::string to_jsonl(bool include_wall) const;
  std::string to_json() const;
};

struct TrainResult {
  TrainReport report;
  ModelParams best_params;  // initialization when epochs == 0
  PassCounters counters;
};

TrainResult train(const ModelConfig& model_cfg, const AdvConfig& cfg, const EncodedData& train_set,
                  const EncodedData& dev_set);

double evaluate_accuracy(const ModelParams& params, const ModelConfig& cfg,
                         const EncodedData& data, std::size_t batch_size);

}  // namespace advlab
