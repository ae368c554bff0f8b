#pragma once

// Small transformer encoder classifier. The adversarial surface is the
// word-embedding lookup X = V[Z]: a perturbation delta enters additively
// as X + delta before positional embeddings, and gradients are available
// w.r.t. both the parameters and delta from one backward pass. The stack
// can be split after the first block for shallow-prefix updates.

#include <cstdint>
#include <string>
#include <vector>

#include "advlab/adversary.hpp"
#include "advlab/data.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 32;  // d
  std::size_t heads = 4;
  std::size_t blocks = 1;
  std::size_t ffn_dim = 64;
  std::size_t max_len = 16;
  double dropout = 0.1;
  std::size_t classes = 2;
  double init_std = 0.2;

  void validate() const;
};

/// One minibatch: token ids Z (batch x seq), attention mask (1 = real
/// token, 0 = padding), labels.
struct Batch {
  std::size_t size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
  std::vector<std::int32_t> labels;

  /// Count of attended (mask 1) positions in sample b.
  std::size_t tokens(std::size_t b) const;
};

Batch make_batch(const EncodedData& data, const std::vector<std::size_t>& rows);
DeltaGeometry delta_geometry(const Batch& batch, std::size_t dim);

struct BlockParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;
};

/// All learnable parameters, embedding matrix included. Row 0 of the
/// embedding (PAD) is frozen at zero.
struct ModelParams {
  Tensor embedding;   // (vocab, d)
  Tensor positional;  // (max_len, d)
  std::vector<BlockParams> blocks;
  Tensor head_w, head_b;  // (d, classes), (classes)

  static ModelParams init(const ModelConfig& cfg, RngState& rng);

  /// Stable name -> tensor enumeration (checkpoint and optimizer order).
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

  ModelParams clone() const;
};

/// One dropout realization for every site in the stack: the embedding
/// sum plus, per block, the attention output and the feed-forward output.
struct DropoutMaskSet {
  DropoutMask embed;
  struct BlockMasks {
    DropoutMask attn_out;
    DropoutMask ffn_out;
  };
  std::vector<BlockMasks> blocks;

  bool defined() const { return embed.defined(); }
  std::uint64_t fingerprint() const;
};

DropoutMaskSet sample_mask_set(const ModelConfig& cfg, std::size_t batch, std::size_t seq_len,
                               double p, RngState& rng);

/// Forward/backward pass bookkeeping. `partial` counts prefix-only
/// (split-point) passes.
struct PassCounters {
  std::uint64_t forwards = 0;
  std::uint64_t backwards = 0;
  std::uint64_t partial_passes = 0;
};

/// Word-embedding lookup X = V[Z], shape (batch, seq, d). Positional
/// components are added inside forward, after any perturbation.
Tensor embed(const Batch& batch, const Tensor& embedding);

/// Where forward_prefix hands off to forward_suffix.
enum class SplitPoint {
  after_embedding,   // prefix is the (linear) embedding sum + its dropout
  after_first_block  // prefix additionally runs block 0
};

/// Prefix of the network up to the split point; input is X (+ delta).
Tensor forward_prefix(const Tensor& x_pert, const Batch& batch, const ModelParams& params,
                      const ModelConfig& cfg, const DropoutMaskSet* masks,
                      SplitPoint split = SplitPoint::after_first_block);

/// Remaining blocks, first-position pooling and the classifier head.
Tensor forward_suffix(const Tensor& hidden, const Batch& batch, const ModelParams& params,
                      const ModelConfig& cfg, const DropoutMaskSet* masks,
                      SplitPoint split = SplitPoint::after_first_block);

/// Full stack: logits (batch, classes). Composes prefix and suffix, so a
/// stitched forward is bit-identical by construction.
Tensor forward(const Tensor& x_pert, const Batch& batch, const ModelParams& params,
               const ModelConfig& cfg, const DropoutMaskSet* masks = nullptr);

/// Which gradients loss_and_grads should collect.
struct GradRequest {
  bool theta = true;
  bool delta = false;
};

struct LossGrads {
  double loss = 0.0;
  Tensor logits;                       // detached copy
  std::vector<Tensor> theta;           // aligned with named_tensors() order
  Tensor delta;                        // zero at PAD positions
};

/// One forward + one backward yielding batch-mean cross-entropy and the
/// requested gradients; delta may be undefined for a clean pass.
LossGrads loss_and_grads(const Batch& batch, const Tensor& delta, ModelParams& params,
                         const ModelConfig& cfg, const DropoutMaskSet* masks,
                         const GradRequest& want, PassCounters* counters = nullptr);

/// Logits with dropout off and delta = 0 (no tape).
Tensor predict_logits(const Batch& batch, const ModelParams& params, const ModelConfig& cfg);

std::int32_t argmax_row(const double* row, std::size_t n);

}  // namespace advlab
