#include "advlab/model.hpp"

#include <cmath>
#include <stdexcept>

namespace advlab {

namespace {
constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskOffset = -1e9;
}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 3) throw std::invalid_argument("model: vocab_size must cover reserved ids");
  if (embedding_dim == 0 || heads == 0 || blocks == 0 || ffn_dim == 0 || max_len == 0 ||
      classes < 2)
    throw std::invalid_argument("model: zero-sized dimension in config");
  if (embedding_dim % heads != 0)
    throw std::invalid_argument("model: embedding_dim must be divisible by heads");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("model: dropout must be in [0,1)");
}

std::size_t Batch::tokens(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t s = 0; s < seq_len; ++s) n += mask[b * seq_len + s];
  return n;
}

Batch make_batch(const EncodedData& data, const std::vector<std::size_t>& rows) {
  Batch b;
  b.size = rows.size();
  b.seq_len = data.seq_len;
  b.ids.reserve(b.size * b.seq_len);
  b.mask.reserve(b.size * b.seq_len);
  b.labels.reserve(b.size);
  for (std::size_t r : rows) {
    b.ids.insert(b.ids.end(), data.row_ids(r), data.row_ids(r) + data.seq_len);
    b.mask.insert(b.mask.end(), data.row_mask(r), data.row_mask(r) + data.seq_len);
    b.labels.push_back(data.labels[r]);
  }
  return b;
}

DeltaGeometry delta_geometry(const Batch& batch, std::size_t dim) {
  return DeltaGeometry{batch.size, batch.seq_len, dim, batch.mask};
}

namespace {

Tensor normal_tensor(std::vector<std::size_t> shape, double std, RngState& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  double* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) p[i] = std * rng.normal();
  return t;
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, RngState& rng) {
  cfg.validate();
  const std::size_t d = cfg.embedding_dim;
  ModelParams p;
  p.embedding = normal_tensor({cfg.vocab_size, d}, cfg.init_std, rng);
  for (std::size_t c = 0; c < d; ++c) p.embedding.data()[c] = 0.0;  // PAD row frozen at zero
  p.positional = normal_tensor({cfg.max_len, d}, cfg.init_std, rng);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    BlockParams blk;
    blk.wq = normal_tensor({d, d}, cfg.init_std, rng);
    blk.bq = Tensor::zeros({d});
    blk.wk = normal_tensor({d, d}, cfg.init_std, rng);
    blk.bk = Tensor::zeros({d});
    blk.wv = normal_tensor({d, d}, cfg.init_std, rng);
    blk.bv = Tensor::zeros({d});
    blk.wo = normal_tensor({d, d}, cfg.init_std, rng);
    blk.bo = Tensor::zeros({d});
    blk.ln1_gain = Tensor::full({d}, 1.0);
    blk.ln1_bias = Tensor::zeros({d});
    blk.w1 = normal_tensor({d, cfg.ffn_dim}, cfg.init_std, rng);
    blk.b1 = Tensor::zeros({cfg.ffn_dim});
    blk.w2 = normal_tensor({cfg.ffn_dim, d}, cfg.init_std, rng);
    blk.b2 = Tensor::zeros({d});
    blk.ln2_gain = Tensor::full({d}, 1.0);
    blk.ln2_bias = Tensor::zeros({d});
    p.blocks.push_back(std::move(blk));
  }
  p.head_w = normal_tensor({d, cfg.classes}, cfg.init_std, rng);
  p.head_b = Tensor::zeros({cfg.classes});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embedding", &embedding);
  out.emplace_back("positional", &positional);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    BlockParams& b = blocks[i];
    const std::string pre = "block" + std::to_string(i) + ".";
    out.emplace_back(pre + "wq", &b.wq);
    out.emplace_back(pre + "bq", &b.bq);
    out.emplace_back(pre + "wk", &b.wk);
    out.emplace_back(pre + "bk", &b.bk);
    out.emplace_back(pre + "wv", &b.wv);
    out.emplace_back(pre + "bv", &b.bv);
    out.emplace_back(pre + "wo", &b.wo);
    out.emplace_back(pre + "bo", &b.bo);
    out.emplace_back(pre + "ln1_gain", &b.ln1_gain);
    out.emplace_back(pre + "ln1_bias", &b.ln1_bias);
    out.emplace_back(pre + "w1", &b.w1);
    out.emplace_back(pre + "b1", &b.b1);
    out.emplace_back(pre + "w2", &b.w2);
    out.emplace_back(pre + "b2", &b.b2);
    out.emplace_back(pre + "ln2_gain", &b.ln2_gain);
    out.emplace_back(pre + "ln2_bias", &b.ln2_bias);
  }
  out.emplace_back("head.w", &head_w);
  out.emplace_back("head.b", &head_b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_tensors() const {
  auto mut = const_cast<ModelParams*>(this)->named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams copy;
  copy.embedding = embedding.clone();
  copy.positional = positional.clone();
  for (const BlockParams& b : blocks) {
    BlockParams c;
    c.wq = b.wq.clone(); c.bq = b.bq.clone();
    c.wk = b.wk.clone(); c.bk = b.bk.clone();
    c.wv = b.wv.clone(); c.bv = b.bv.clone();
    c.wo = b.wo.clone(); c.bo = b.bo.clone();
    c.ln1_gain = b.ln1_gain.clone(); c.ln1_bias = b.ln1_bias.clone();
    c.w1 = b.w1.clone(); c.b1 = b.b1.clone();
    c.w2 = b.w2.clone(); c.b2 = b.b2.clone();
    c.ln2_gain = b.ln2_gain.clone(); c.ln2_bias = b.ln2_bias.clone();
    copy.blocks.push_back(std::move(c));
  }
  copy.head_w = head_w.clone();
  copy.head_b = head_b.clone();
  return copy;
}

std::uint64_t DropoutMaskSet::fingerprint() const {
  std::uint64_t fp = embed.fingerprint();
  for (const auto& b : blocks) {
    fp = fp * 1099511628211ULL ^ b.attn_out.fingerprint();
    fp = fp * 1099511628211ULL ^ b.ffn_out.fingerprint();
  }
  return fp;
}

DropoutMaskSet sample_mask_set(const ModelConfig& cfg, std::size_t batch, std::size_t seq_len,
                               double p, RngState& rng) {
  DropoutMaskSet set;
  const std::vector<std::size_t> site_shape{batch, seq_len, cfg.embedding_dim};
  set.embed = sample_dropout_mask(site_shape, p, rng);
  set.blocks.resize(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    set.blocks[b].attn_out = sample_dropout_mask(site_shape, p, rng);
    set.blocks[b].ffn_out = sample_dropout_mask(site_shape, p, rng);
  }
  return set;
}

Tensor embed(const Batch& batch, const Tensor& embedding) {
  const std::size_t vocab = embedding.shape()[0];
  for (std::int32_t id : batch.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw std::invalid_argument("embed: token id " + std::to_string(id) + " out of range");
  return gather_rows(embedding, batch.ids, {batch.size, batch.seq_len});
}

namespace {

// Additive attention-score offsets: 0 on attended key columns, a large
// negative value on padding columns. Constant w.r.t. the tape.
Tensor attention_offsets(const Batch& batch, std::size_t heads) {
  const std::size_t B = batch.size, S = batch.seq_len;
  Tensor m = Tensor::zeros({B, heads, S, S});
  double* p = m.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < S; ++i)
        for (std::size_t j = 0; j < S; ++j)
          *p++ = batch.mask[b * S + j] ? 0.0 : kMaskOffset;
  return m;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

Tensor run_block(Tensor h, const Batch& batch, const BlockParams& blk, const ModelConfig& cfg,
                 const DropoutMaskSet::BlockMasks* masks) {
  const std::size_t B = batch.size, S = batch.seq_len;
  const std::size_t d = cfg.embedding_dim, H = cfg.heads, hd = d / H;

  auto heads_view = [&](const Tensor& t) {
    return permute(reshape(t, {B, S, H, hd}), {0, 2, 1, 3});  // (B,H,S,hd)
  };
  const Tensor q = heads_view(linear(h, blk.wq, blk.bq));
  const Tensor k = heads_view(linear(h, blk.wk, blk.bk));
  const Tensor v = heads_view(linear(h, blk.wv, blk.bv));

  Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(hd)));
  scores = add(scores, attention_offsets(batch, H));
  const Tensor probs = softmax_rows(scores);
  Tensor ctx = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {B, S, d});

  Tensor attn = linear(ctx, blk.wo, blk.bo);
  if (masks) attn = apply_dropout(attn, masks->attn_out);
  h = layer_norm(add(h, attn), blk.ln1_gain, blk.ln1_bias, kLayerNormEps);

  Tensor ffn = linear(gelu(linear(h, blk.w1, blk.b1)), blk.w2, blk.b2);
  if (masks) ffn = apply_dropout(ffn, masks->ffn_out);
  return layer_norm(add(h, ffn), blk.ln2_gain, blk.ln2_bias, kLayerNormEps);
}

void check_masks(const ModelConfig& cfg, const DropoutMaskSet* masks) {
  if (masks && masks->blocks.size() != cfg.blocks)
    throw std::invalid_argument("forward: dropout mask set is missing block sites");
}

}  // namespace

Tensor forward_prefix(const Tensor& x_pert, const Batch& batch, const ModelParams& params,
                      const ModelConfig& cfg, const DropoutMaskSet* masks, SplitPoint split) {
  check_masks(cfg, masks);
  const std::vector<std::size_t> want{batch.size, batch.seq_len, cfg.embedding_dim};
  if (x_pert.shape() != want)
    throw std::invalid_argument("forward: embeddings have shape " + shape_str(x_pert.shape()) +
                                ", expected " + shape_str(want));
  if (batch.seq_len > cfg.max_len)
    throw std::invalid_argument("forward: sequence longer than max_len");

  Tensor h = add(x_pert, slice_rows(params.positional, 0, batch.seq_len));
  if (masks) h = apply_dropout(h, masks->embed);
  if (split == SplitPoint::after_first_block)
    h = run_block(h, batch, params.blocks[0], cfg, masks ? &masks->blocks[0] : nullptr);
  return h;
}

Tensor forward_suffix(const Tensor& hidden, const Batch& batch, const ModelParams& params,
                      const ModelConfig& cfg, const DropoutMaskSet* masks, SplitPoint split) {
  check_masks(cfg, masks);
  Tensor h = hidden;
  const std::size_t first = split == SplitPoint::after_first_block ? 1 : 0;
  for (std::size_t b = first; b < cfg.blocks; ++b)
    h = run_block(h, batch, params.blocks[b], cfg, masks ? &masks->blocks[b] : nullptr);
  const Tensor pooled = select_position(h, 0);
  return add(matmul(pooled, params.head_w), params.head_b);
}

Tensor forward(const Tensor& x_pert, const Batch& batch, const ModelParams& params,
               const ModelConfig& cfg, const DropoutMaskSet* masks) {
  const Tensor h1 = forward_prefix(x_pert, batch, params, cfg, masks);
  return forward_suffix(h1, batch, params, cfg, masks);
}

LossGrads loss_and_grads(const Batch& batch, const Tensor& delta, ModelParams& params,
                         const ModelConfig& cfg, const DropoutMaskSet* masks,
                         const GradRequest& want, PassCounters* counters) {
  Tape tape;
  std::vector<Tensor*> theta;
  for (auto& [name, t] : params.named_tensors()) {
    theta.push_back(t);
    if (want.theta) tape.watch(*t);
  }
  Tensor d = delta;
  if (d.defined() && want.delta) tape.watch(d);

  Tensor x = embed(batch, params.embedding);
  if (d.defined()) x = add(x, d);
  const Tensor logits = forward(x, batch, params, cfg, masks);
  const Tensor loss = cross_entropy(logits, batch.labels);
  if (counters) ++counters->forwards;

  std::vector<Tensor> wanted;
  if (want.theta)
    for (Tensor* t : theta) wanted.push_back(*t);
  if (want.delta && d.defined()) wanted.push_back(d);
  Gradients grads = tape.backward(loss, wanted);
  if (counters) ++counters->backwards;

  LossGrads out;
  out.loss = loss.item();
  out.logits = logits.clone();
  if (want.theta)
    for (Tensor* t : theta) out.theta.push_back(grads.at(*t));
  if (want.delta && d.defined()) {
    out.delta = grads.at(d);
    // Padding positions carry no perturbation; report their gradient as zero.
    double* g = out.delta.data();
    const std::size_t dim = cfg.embedding_dim;
    for (std::size_t b = 0; b < batch.size; ++b)
      for (std::size_t s = 0; s < batch.seq_len; ++s)
        if (!batch.mask[b * batch.seq_len + s])
          for (std::size_t c = 0; c < dim; ++c) g[(b * batch.seq_len + s) * dim + c] = 0.0;
  }
  return out;
}

Tensor predict_logits(const Batch& batch, const ModelParams& params, const ModelConfig& cfg) {
  const Tensor x = embed(batch, params.embedding);
  return forward(x, batch, params, cfg, nullptr);
}

std::int32_t argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (row[c] > row[best]) best = c;
  return static_cast<std::int32_t>(best);
}

}  // namespace advlab
