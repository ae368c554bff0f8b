#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "advlab/checkpoint.hpp"
#include "advlab/model.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace advlab;
using namespace advlab::testing;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.embedding_dim = 4;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.ffn_dim = 6;
  cfg.max_len = 5;
  cfg.dropout = 0.0;
  cfg.classes = 2;
  cfg.init_std = 0.3;
  return cfg;
}

Batch random_batch(const ModelConfig& cfg, std::size_t size, std::size_t seq, RngState& rng) {
  Batch b;
  b.size = size;
  b.seq_len = seq;
  for (std::size_t i = 0; i < size; ++i) {
    b.ids.push_back(Vocab::kCls);
    b.mask.push_back(1);
    for (std::size_t s = 1; s < seq; ++s) {
      b.ids.push_back(static_cast<std::int32_t>(3 + rng.uniform_index(cfg.vocab_size - 3)));
      b.mask.push_back(1);
    }
    b.labels.push_back(static_cast<std::int32_t>(rng.uniform_index(cfg.classes)));
  }
  return b;
}

double eval_loss(const Batch& batch, const Tensor& delta, const ModelParams& params,
                 const ModelConfig& cfg) {
  Tensor x = embed(batch, params.embedding);
  if (delta.defined()) x = add(x, delta);
  return cross_entropy(forward(x, batch, params, cfg, nullptr), batch.labels).item();
}

}  // namespace

TEST_CASE("embed of all-PAD input is exactly zero") {
  ModelConfig cfg = tiny_config();
  RngState rng(1);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b;
  b.size = 1;
  b.seq_len = 3;
  b.ids = {Vocab::kPad, Vocab::kPad, Vocab::kPad};
  b.mask = {0, 0, 0};
  b.labels = {0};
  Tensor x = embed(b, params.embedding);
  for (double v : x.values()) CHECK(v == 0.0);
}

TEST_CASE("embed of a single token returns that row of V bit-for-bit") {
  ModelConfig cfg = tiny_config();
  RngState rng(2);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b;
  b.size = 1;
  b.seq_len = 1;
  b.ids = {5};
  b.mask = {1};
  b.labels = {0};
  Tensor x = embed(b, params.embedding);
  for (std::size_t c = 0; c < cfg.embedding_dim; ++c)
    CHECK(x.data()[c] == params.embedding.data()[5 * cfg.embedding_dim + c]);
}

TEST_CASE("embed rejects an out-of-range id") {
  ModelConfig cfg = tiny_config();
  RngState rng(3);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b;
  b.size = 1;
  b.seq_len = 1;
  b.ids = {static_cast<std::int32_t>(cfg.vocab_size)};
  b.mask = {1};
  b.labels = {0};
  CHECK_THROWS_AS(embed(b, params.embedding), std::invalid_argument);
}

TEST_CASE("gradient of sum(X) w.r.t. V is the token-count histogram") {
  ModelConfig cfg = tiny_config();
  RngState rng(4);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b;
  b.size = 2;
  b.seq_len = 3;
  b.ids = {3, 4, 3, 4, 4, 5};
  b.mask = {1, 1, 1, 1, 1, 1};
  b.labels = {0, 1};

  Tape tape;
  tape.watch(params.embedding);
  Tensor loss = sum_all(embed(b, params.embedding));
  Tensor g = tape.backward(loss, {params.embedding}).at(params.embedding);

  std::vector<double> counts(cfg.vocab_size, 0.0);
  for (auto id : b.ids) counts[static_cast<std::size_t>(id)] += 1.0;
  for (std::size_t r = 0; r < cfg.vocab_size; ++r)
    for (std::size_t c = 0; c < cfg.embedding_dim; ++c)
      CHECK(g.data()[r * cfg.embedding_dim + c] == counts[r]);
}

TEST_CASE("delta = 0 reproduces the clean forward bit-for-bit") {
  ModelConfig cfg = tiny_config();
  RngState rng(5);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 3, 4, rng);
  Tensor clean = forward(embed(b, params.embedding), b, params, cfg, nullptr);
  Tensor zero = Tensor::zeros({3, 4, cfg.embedding_dim});
  Tensor perturbed = forward(add(embed(b, params.embedding), zero), b, params, cfg, nullptr);
  CHECK(bit_equal(clean, perturbed));
}

TEST_CASE("content at masked positions cannot influence the logits") {
  ModelConfig cfg = tiny_config();
  RngState rng(6);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b;
  b.size = 1;
  b.seq_len = 5;
  b.ids = {Vocab::kCls, 3, 4, 5, 6};
  b.mask = {1, 1, 0, 0, 0};
  b.labels = {1};
  Tensor base = forward(embed(b, params.embedding), b, params, cfg, nullptr);

  Batch permuted = b;
  permuted.ids = {Vocab::kCls, 3, 6, 3, 5};  // rewrite the masked tail
  Tensor other = forward(embed(permuted, params.embedding), permuted, params, cfg, nullptr);
  CHECK(max_abs_diff(base, other) < 1e-10);
}

TEST_CASE("fixed dropout masks make the forward deterministic") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.2;
  RngState rng(7);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 2, 4, rng);
  DropoutMaskSet masks = sample_mask_set(cfg, 2, 4, cfg.dropout, rng);
  Tensor a = forward(embed(b, params.embedding), b, params, cfg, &masks);
  Tensor c = forward(embed(b, params.embedding), b, params, cfg, &masks);
  CHECK(bit_equal(a, c));

  DropoutMaskSet masks2 = sample_mask_set(cfg, 2, 4, cfg.dropout, rng);
  Tensor d = forward(embed(b, params.embedding), b, params, cfg, &masks2);
  CHECK(max_abs_diff(a, d) > 0.0);
}

TEST_CASE("forward rejects a mask set missing block sites") {
  ModelConfig cfg = tiny_config();
  cfg.blocks = 2;
  RngState rng(8);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 1, 3, rng);
  DropoutMaskSet masks = sample_mask_set(cfg, 1, 3, 0.1, rng);
  masks.blocks.pop_back();
  CHECK_THROWS_AS(forward(embed(b, params.embedding), b, params, cfg, &masks),
                  std::invalid_argument);
}

TEST_CASE("delta gradient is reported as zero at PAD positions") {
  ModelConfig cfg = tiny_config();
  RngState rng(9);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b;
  b.size = 2;
  b.seq_len = 4;
  b.ids = {Vocab::kCls, 3, Vocab::kPad, Vocab::kPad, Vocab::kCls, 4, 5, Vocab::kPad};
  b.mask = {1, 1, 0, 0, 1, 1, 1, 0};
  b.labels = {0, 1};
  Tensor delta = Tensor::zeros({2, 4, cfg.embedding_dim});
  LossGrads lg =
      loss_and_grads(b, delta, params, cfg, nullptr, {.theta = false, .delta = true});
  for (std::size_t bb = 0; bb < 2; ++bb)
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t c = 0; c < cfg.embedding_dim; ++c)
        if (!b.mask[bb * 4 + s])
          CHECK(lg.delta.data()[(bb * 4 + s) * cfg.embedding_dim + c] == 0.0);
  // non-PAD positions should carry signal for a generic model
  CHECK(frobenius_norm(lg.delta.values()) > 0.0);
}

TEST_CASE("theta and delta gradients match central finite differences") {
  ModelConfig cfg = tiny_config();
  RngState rng(10);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 2, 4, rng);
  Tensor delta = random_tensor({2, 4, cfg.embedding_dim}, rng, -0.05, 0.05);

  LossGrads lg = loss_and_grads(b, delta, params, cfg, nullptr, {.theta = true, .delta = true});

  const double h = 1e-5;
  double worst = 0.0;
  auto check_tensor = [&](Tensor& target, const Tensor& grad) {
    for (std::size_t k = 0; k < target.size(); ++k) {
      const double saved = target.data()[k];
      target.data()[k] = saved + h;
      const double up = eval_loss(b, delta, params, cfg);
      target.data()[k] = saved - h;
      const double down = eval_loss(b, delta, params, cfg);
      target.data()[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double got = grad.data()[k];
      worst = std::max(worst, std::abs(fd - got) / std::max({std::abs(fd), std::abs(got), 1e-6}));
    }
  };
  auto named = params.named_tensors();
  for (std::size_t i = 0; i < named.size(); ++i) check_tensor(*named[i].second, lg.theta[i]);
  check_tensor(delta, lg.delta);
  INFO("worst relative error ", worst);
  CHECK(worst < 1e-5);
}

TEST_CASE("duplicating the batch leaves batch-mean gradients unchanged") {
  ModelConfig cfg = tiny_config();
  RngState rng(11);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 2, 4, rng);

  Batch doubled;
  doubled.size = 4;
  doubled.seq_len = 4;
  for (int rep = 0; rep < 2; ++rep) {
    doubled.ids.insert(doubled.ids.end(), b.ids.begin(), b.ids.end());
    doubled.mask.insert(doubled.mask.end(), b.mask.begin(), b.mask.end());
    doubled.labels.insert(doubled.labels.end(), b.labels.begin(), b.labels.end());
  }
  LossGrads lg1 = loss_and_grads(b, Tensor{}, params, cfg, nullptr, {.theta = true});
  LossGrads lg2 = loss_and_grads(doubled, Tensor{}, params, cfg, nullptr, {.theta = true});
  CHECK(std::abs(lg1.loss - lg2.loss) < 1e-12);
  for (std::size_t i = 0; i < lg1.theta.size(); ++i)
    CHECK(max_abs_diff(lg1.theta[i], lg2.theta[i]) < 1e-12);
}

TEST_CASE("stitched split forward equals the monolithic forward bit-for-bit") {
  ModelConfig cfg = tiny_config();
  cfg.blocks = 2;
  RngState rng(12);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 2, 4, rng);
  Tensor x = embed(b, params.embedding);
  Tensor whole = forward(x, b, params, cfg, nullptr);
  Tensor h1 = forward_prefix(x, b, params, cfg, nullptr);
  Tensor stitched = forward_suffix(h1, b, params, cfg, nullptr);
  CHECK(bit_equal(whole, stitched));
}

TEST_CASE("with one block the continuation is just pooling plus head") {
  ModelConfig cfg = tiny_config();
  RngState rng(13);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 2, 4, rng);
  Tensor h1 = forward_prefix(embed(b, params.embedding), b, params, cfg, nullptr);
  Tensor logits = forward_suffix(h1, b, params, cfg, nullptr);
  Tensor manual = add(matmul(select_position(h1, 0), params.head_w), params.head_b);
  CHECK(bit_equal(logits, manual));
}

TEST_CASE("Jacobian-transpose-times-p through f0 equals the full delta gradient") {
  ModelConfig cfg = tiny_config();
  cfg.blocks = 2;
  RngState rng(14);
  ModelParams params = ModelParams::init(cfg, rng);
  Batch b = random_batch(cfg, 2, 4, rng);
  Tensor delta = random_tensor({2, 4, cfg.embedding_dim}, rng, -0.05, 0.05);

  Tensor full_grad, p_split;
  {
    Tape tape;
    Tensor d = delta;
    tape.watch(d);
    Tensor x = add(embed(b, params.embedding), d);
    Tensor h1 = forward_prefix(x, b, params, cfg, nullptr);
    Tensor loss = cross_entropy(forward_suffix(h1, b, params, cfg, nullptr), b.labels);
    Gradients g = tape.backward(loss, {d, h1});
    full_grad = g.at(d);
    p_split = g.at(h1);
  }
  Tensor approx;
  {
    Tape tape;
    Tensor d = delta;
    tape.watch(d);
    Tensor x = add(embed(b, params.embedding), d);
    Tensor h1 = forward_prefix(x, b, params, cfg, nullptr);
    approx = tape.vjp(h1, p_split, {d}).at(d);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < full_grad.size(); ++i) {
    const double a = full_grad.data()[i], c = approx.data()[i];
    worst = std::max(worst, std::abs(a - c) / std::max({std::abs(a), std::abs(c), 1e-9}));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("checkpoint round trip restores parameters exactly") {
  ModelConfig cfg = tiny_config();
  RngState rng(15);
  ModelParams params = ModelParams::init(cfg, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "advlab_test_ckpt.bin").string();
  save_checkpoint(path, cfg, params, 777);
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.seed == 777);
  CHECK(loaded.config.embedding_dim == cfg.embedding_dim);
  auto a = params.named_tensors();
  auto b = loaded.params.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_equal(*a[i].second, *b[i].second));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects a manifest/config shape mismatch") {
  ModelConfig cfg = tiny_config();
  RngState rng(16);
  ModelParams params = ModelParams::init(cfg, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "advlab_test_ckpt_bad.bin").string();
  save_checkpoint(path, cfg, params, 1);

  // Corrupt the header: claim a different embedding_dim than the arrays have.
  std::ifstream in(path, std::ios::binary);
  std::string header;
  std::getline(in, header);
  std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::string needle = "\"embedding_dim\":4";
  header.replace(header.find(needle), needle.size(), "\"embedding_dim\":8");
  {
    std::ofstream out(path, std::ios::binary);
    out << header << '\n' << rest;
  }
  CHECK_THROWS(load_checkpoint(path));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects a truncated file") {
  ModelConfig cfg = tiny_config();
  RngState rng(17);
  ModelParams params = ModelParams::init(cfg, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "advlab_test_ckpt_trunc.bin").string();
  save_checkpoint(path, cfg, params, 1);
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 64);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("PAD embedding row is zero after initialization") {
  ModelConfig cfg = tiny_config();
  RngState rng(18);
  ModelParams params = ModelParams::init(cfg, rng);
  for (std::size_t c = 0; c < cfg.embedding_dim; ++c) CHECK(params.embedding.data()[c] == 0.0);
}
