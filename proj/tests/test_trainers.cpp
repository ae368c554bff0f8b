#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "advlab/trainers.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace advlab;
using namespace advlab::testing;

namespace {

ModelConfig toy_model(std::size_t vocab, std::size_t blocks = 1) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embedding_dim = 16;
  cfg.heads = 2;
  cfg.blocks = blocks;
  cfg.ffn_dim = 24;
  cfg.max_len = 8;
  cfg.dropout = 0.1;
  cfg.classes = 2;
  cfg.init_std = 0.2;
  return cfg;
}

struct Toy {
  ModelConfig model;
  EncodedData train;
  EncodedData dev;
  Batch batch;
};

Toy make_toy(std::size_t blocks = 1, std::size_t train_size = 64, std::size_t dev_size = 32) {
  SyntheticSpec spec;
  spec.task = SyntheticTask::trigger_bigram;
  spec.size = train_size + dev_size;
  spec.seq_len = 6;
  spec.vocab_size = 10;
  spec.seed = 321;
  LabeledCorpus corpus = gen_synthetic(spec);
  Vocab vocab = build_vocab(corpus, 1);

  LabeledCorpus train_c, dev_c;
  train_c.classes = dev_c.classes = 2;
  for (std::size_t i = 0; i < corpus.examples.size(); ++i)
    (i < train_size ? train_c : dev_c).examples.push_back(corpus.examples[i]);

  Toy toy;
  toy.model = toy_model(vocab.size(), blocks);
  toy.train = encode(train_c, vocab, toy.model.max_len);
  toy.dev = encode(dev_c, vocab, toy.model.max_len);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < 16; ++r) rows.push_back(r);
  toy.batch = make_batch(toy.train, rows);
  return toy;
}

AdvConfig base_config(Method m) {
  AdvConfig cfg;
  cfg.method = m;
  cfg.ascent_steps = 3;
  cfg.alpha = 0.02;
  cfg.epsilon = 0.1;
  cfg.lr = 0.1;
  cfg.dropout = 0.1;
  cfg.reuse_mask = true;
  cfg.seed = 9;
  return cfg;
}

bool params_bit_equal(const ModelParams& a, const ModelParams& b) {
  auto na = a.named_tensors();
  auto nb = b.named_tensors();
  for (std::size_t i = 0; i < na.size(); ++i)
    if (!bit_equal(*na[i].second, *nb[i].second)) return false;
  return true;
}

double params_max_diff(const ModelParams& a, const ModelParams& b) {
  auto na = a.named_tensors();
  auto nb = b.named_tensors();
  double m = 0.0;
  for (std::size_t i = 0; i < na.size(); ++i)
    m = std::max(m, max_abs_diff(*na[i].second, *nb[i].second));
  return m;
}

void check_pad_row_zero(const TrainState& state) {
  for (std::size_t c = 0; c < state.model_cfg.embedding_dim; ++c)
    CHECK(state.params.embedding.data()[c] == 0.0);
}

}  // namespace

TEST_CASE("natural steps are reproducible bit-for-bit") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::natural);
  TrainState a = TrainState::init(toy.model, cfg.seed);
  TrainState b = TrainState::init(toy.model, cfg.seed);
  for (int i = 0; i < 2; ++i) {
    natural_step(a, toy.batch, cfg);
    natural_step(b, toy.batch, cfg);
  }
  CHECK(params_bit_equal(a.params, b.params));
  check_pad_row_zero(a);
}

TEST_CASE("natural training reduces the loss on a separable toy within 50 steps") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::natural);
  cfg.dropout = 0.0;
  TrainState state = TrainState::init(toy.model, 3);
  const double first = natural_step(state, toy.batch, cfg);
  double last = first;
  for (int i = 0; i < 49; ++i) last = natural_step(state, toy.batch, cfg);
  CHECK(last < first);
  CHECK(state.counters.forwards == 50);
  CHECK(state.counters.backwards == 50);
  CHECK(state.counters.partial_passes == 0);
}

TEST_CASE("pass-count contracts per minibatch") {
  Toy toy = make_toy(2);
  const int K = 3, n = 2;

  AdvConfig cfg = base_config(Method::natural);
  TrainState s = TrainState::init(toy.model, 1);
  natural_step(s, toy.batch, cfg);
  CHECK(s.counters.forwards == 1);
  CHECK(s.counters.backwards == 1);
  CHECK(s.counters.partial_passes == 0);

  cfg = base_config(Method::pgd);
  cfg.ascent_steps = K;
  s = TrainState::init(toy.model, 1);
  pgd_k_step(s, toy.batch, cfg);
  CHECK(s.counters.forwards == K + 1);
  CHECK(s.counters.backwards == K + 1);
  CHECK(s.counters.partial_passes == 0);

  cfg = base_config(Method::freeat);
  cfg.ascent_steps = K;
  s = TrainState::init(toy.model, 1);
  freeat_step(s, toy.batch, cfg);
  CHECK(s.counters.forwards == K);
  CHECK(s.counters.backwards == K);
  CHECK(s.theta_updates == K);  // one descent per ascent

  cfg = base_config(Method::freelb);
  cfg.ascent_steps = K;
  s = TrainState::init(toy.model, 1);
  freelb_step(s, toy.batch, cfg);
  CHECK(s.counters.forwards == K);
  CHECK(s.counters.backwards == K);
  CHECK(s.theta_updates == 1);

  cfg = base_config(Method::yopo);
  cfg.ascent_steps = K;
  cfg.yopo_inner = n;
  s = TrainState::init(toy.model, 1);
  yopo_step(s, toy.batch, cfg);
  CHECK(s.counters.forwards == K);
  CHECK(s.counters.backwards == K);
  CHECK(s.counters.partial_passes == K * n);
  CHECK(s.theta_updates == 1);
}

TEST_CASE("pgd with K = 0 and eps = 0 degenerates to the natural step") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::pgd);
  cfg.ascent_steps = 0;  // direct call; train() would reject this config
  cfg.epsilon = 0.0;
  TrainState a = TrainState::init(toy.model, 5);
  pgd_k_step(a, toy.batch, cfg);

  AdvConfig nat = cfg;
  nat.method = Method::natural;
  TrainState b = TrainState::init(toy.model, 5);
  natural_step(b, toy.batch, nat);
  CHECK(params_bit_equal(a.params, b.params));
}

TEST_CASE("pgd keeps every per-sample delta inside the ball and climbs the loss") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::pgd);
  cfg.dropout = 0.0;
  cfg.ascent_steps = 5;
  cfg.alpha = 0.05;
  cfg.epsilon = 0.3;
  TrainState s = TrainState::init(toy.model, 11);
  StepTrace trace;
  pgd_k_step(s, toy.batch, cfg, &trace);

  REQUIRE(trace.delta_after.size() == 5);
  const std::size_t stride = toy.batch.seq_len * toy.model.embedding_dim;
  for (const Tensor& d : trace.delta_after)
    for (std::size_t b = 0; b < toy.batch.size; ++b)
      CHECK(frobenius_norm({d.data() + b * stride, stride}) <= cfg.epsilon + 1e-12);

  // losses: [L(d0), ..., L(d_{K-1}), L(d_K)]; ascent raises the loss.
  REQUIRE(trace.losses.size() == 6);
  CHECK(trace.losses.back() > trace.losses.front());
  check_pad_row_zero(s);
}

TEST_CASE("freeat with K = 1 and eps = 0 equals the natural step") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freeat);
  cfg.ascent_steps = 1;
  cfg.epsilon = 0.0;
  TrainState a = TrainState::init(toy.model, 6);
  freeat_step(a, toy.batch, cfg);

  AdvConfig nat = cfg;
  nat.method = Method::natural;
  TrainState b = TrainState::init(toy.model, 6);
  natural_step(b, toy.batch, nat);
  CHECK(params_bit_equal(a.params, b.params));
}

TEST_CASE("freeat gradients are stale by construction") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freeat);
  cfg.ascent_steps = 4;
  TrainState s = TrainState::init(toy.model, 7);
  StepTrace trace;
  freeat_step(s, toy.batch, cfg, &trace);
  REQUIRE(trace.provenance.size() == 4);
  for (std::size_t t = 0; t < 4; ++t) {
    // The gradient applied to produce theta_{t+1} was computed at theta_t.
    CHECK(trace.provenance[t].grad_theta_version == t);
    CHECK(trace.provenance[t].applied_theta_version == t + 1);
  }
  check_pad_row_zero(s);
}

TEST_CASE("freelb with eps = 0, K = 1, reused mask is bit-identical to natural") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freelb);
  cfg.ascent_steps = 1;
  cfg.epsilon = 0.0;
  cfg.reuse_mask = true;
  TrainState a = TrainState::init(toy.model, 8);
  freelb_step(a, toy.batch, cfg);

  AdvConfig nat = cfg;
  nat.method = Method::natural;
  TrainState b = TrainState::init(toy.model, 8);
  natural_step(b, toy.batch, nat);
  CHECK(params_bit_equal(a.params, b.params));
}

TEST_CASE("freelb with eps = 0 has an identically zero delta trajectory for any K") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freelb);
  cfg.ascent_steps = 4;
  cfg.epsilon = 0.0;
  TrainState s = TrainState::init(toy.model, 12);
  StepTrace trace;
  freelb_step(s, toy.batch, cfg, &trace);
  for (const Tensor& d : trace.delta_used)
    for (double v : d.values()) CHECK(v == 0.0);
  for (const Tensor& d : trace.delta_after)
    for (double v : d.values()) CHECK(v == 0.0);
}

TEST_CASE("freelb accumulated gradient equals the replayed trajectory mean") {
  Toy toy = make_toy();
  for (int K : {2, 3, 5}) {
    AdvConfig cfg = base_config(Method::freelb);
    cfg.ascent_steps = K;
    TrainState s = TrainState::init(toy.model, 13);
    ModelParams before = s.params.clone();
    StepTrace trace;
    freelb_step(s, toy.batch, cfg, &trace);

    REQUIRE(trace.delta_used.size() == static_cast<std::size_t>(K));
    std::vector<Tensor> replayed;
    for (int t = 0; t < K; ++t) {
      const DropoutMaskSet* masks = trace.masks_used[t].defined() ? &trace.masks_used[t] : nullptr;
      LossGrads lg = loss_and_grads(toy.batch, trace.delta_used[t], before, toy.model, masks,
                                    {.theta = true, .delta = false});
      if (replayed.empty())
        for (const Tensor& g : lg.theta) replayed.push_back(Tensor::zeros(g.shape()));
      for (std::size_t i = 0; i < lg.theta.size(); ++i)
        for (std::size_t k = 0; k < lg.theta[i].size(); ++k)
          replayed[i].data()[k] += lg.theta[i].data()[k] / static_cast<double>(K);
    }
    REQUIRE(replayed.size() == trace.accumulated_grad.size());
    for (std::size_t i = 0; i < replayed.size(); ++i)
      CHECK(max_abs_diff(replayed[i], trace.accumulated_grad[i]) < 1e-12);
  }
}

TEST_CASE("the RTE-style preset is a valid freelb configuration") {
  AdvConfig cfg = base_config(Method::freelb);
  cfg.epsilon = 1.5e-1;
  cfg.alpha = 3e-2;
  cfg.ascent_steps = 3;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("yopo with n = 1 reproduces the freelb trajectory and update") {
  for (std::size_t blocks : {1u, 2u}) {
    for (double dropout : {0.0, 0.1}) {
      Toy toy = make_toy(blocks);
      AdvConfig fl = base_config(Method::freelb);
      fl.ascent_steps = 3;
      fl.alpha = 0.03;
      fl.epsilon = 0.15;
      fl.dropout = dropout;
      AdvConfig yp = fl;
      yp.method = Method::yopo;
      yp.yopo_inner = 1;

      TrainState a = TrainState::init(toy.model, 21);
      TrainState b = TrainState::init(toy.model, 21);
      StepTrace ta, tb;
      freelb_step(a, toy.batch, fl, &ta);
      yopo_step(b, toy.batch, yp, &tb);

      REQUIRE(ta.delta_after.size() == tb.delta_after.size());
      for (std::size_t t = 0; t < ta.delta_after.size(); ++t)
        CHECK(max_abs_diff(ta.delta_after[t], tb.delta_after[t]) < 1e-10);
      CHECK(params_max_diff(a.params, b.params) < 1e-10);
    }
  }
}

TEST_CASE("yopo over a linear prefix with projection off composes to a full freelb step") {
  Toy toy = make_toy(1);
  const double huge_eps = 8.0;  // far outside any reachable norm: projection never binds
  for (int n : {2, 3}) {
    AdvConfig fl = base_config(Method::freelb);
    fl.ascent_steps = 2;
    fl.alpha = 0.04;
    fl.epsilon = huge_eps;
    AdvConfig yp = fl;
    yp.method = Method::yopo;
    yp.yopo_inner = n;

    TrainState a = TrainState::init(toy.model, 22);
    TrainState b = TrainState::init(toy.model, 22);
    StepTrace ta, tb;
    freelb_step(a, toy.batch, fl, &ta);
    yopo_step(b, toy.batch, yp, &tb, SplitPoint::after_embedding);

    REQUIRE(ta.delta_after.size() == tb.delta_after.size());
    for (std::size_t t = 0; t < ta.delta_after.size(); ++t)
      CHECK(max_abs_diff(ta.delta_after[t], tb.delta_after[t]) < 1e-12);
  }
}

TEST_CASE("mask reuse holds one realization across ascent steps; fresh draws differ") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freelb);
  cfg.ascent_steps = 4;

  TrainState s = TrainState::init(toy.model, 23);
  StepTrace trace;
  freelb_step(s, toy.batch, cfg, &trace);
  REQUIRE(trace.mask_fingerprints.size() == 4);
  for (std::size_t t = 1; t < 4; ++t)
    CHECK(trace.mask_fingerprints[t] == trace.mask_fingerprints[0]);

  cfg.reuse_mask = false;
  TrainState s2 = TrainState::init(toy.model, 23);
  StepTrace trace2;
  freelb_step(s2, toy.batch, cfg, &trace2);
  for (std::size_t t = 1; t < 4; ++t)
    CHECK(trace2.mask_fingerprints[t] != trace2.mask_fingerprints[0]);
}

TEST_CASE("adam updates stay finite and keep the PAD row frozen") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freelb);
  cfg.optimizer = OptimizerKind::adam;
  cfg.lr = 1e-3;
  TrainState s = TrainState::init(toy.model, 29);
  for (int i = 0; i < 3; ++i) freelb_step(s, toy.batch, cfg);
  check_pad_row_zero(s);
}

TEST_CASE("training diverges loudly instead of silently") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::natural);
  cfg.lr = 1e200;  // second forward overflows once the weights are this large
  TrainState s = TrainState::init(toy.model, 31);
  CHECK_THROWS_AS(
      [&] {
        for (int i = 0; i < 8; ++i) natural_step(s, toy.batch, cfg);
      }(),
      NumericalError);
}

TEST_CASE("train with 0 epochs returns an empty report and the initialization") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::natural);
  cfg.epochs = 0;
  TrainResult result = train(toy.model, cfg, toy.train, toy.dev);
  CHECK(result.report.epochs.empty());
  CHECK(result.report.best_epoch == -1);
  RngState rng(cfg.seed);
  ModelParams init = ModelParams::init(toy.model, rng);
  CHECK(params_bit_equal(result.best_params, init));
}

TEST_CASE("identical config and seed give byte-identical reports") {
  Toy toy = make_toy();
  AdvConfig cfg = base_config(Method::freelb);
  cfg.epochs = 2;
  cfg.batch_size = 16;
  TrainResult a = train(toy.model, cfg, toy.train, toy.dev);
  TrainResult b = train(toy.model, cfg, toy.train, toy.dev);
  CHECK(a.report.to_jsonl(false) == b.report.to_jsonl(false));
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(params_bit_equal(a.best_params, b.best_params));
}

TEST_CASE("config validation rejects out-of-range values") {
  AdvConfig cfg = base_config(Method::freelb);
  cfg.ascent_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = base_config(Method::freelb);
  cfg.epsilon = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = base_config(Method::yopo);
  cfg.yopo_inner = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = base_config(Method::freelb);
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("natural training reaches 95% dev accuracy on the bigram task in 5 epochs") {
  SyntheticSpec spec;
  spec.task = SyntheticTask::trigger_bigram;
  spec.size = 2500;
  spec.seq_len = 7;
  spec.vocab_size = 20;
  spec.seed = 77;
  LabeledCorpus corpus = gen_synthetic(spec);
  Vocab vocab = build_vocab(corpus, 1);
  LabeledCorpus train_c, dev_c;
  train_c.classes = dev_c.classes = 2;
  for (std::size_t i = 0; i < corpus.examples.size(); ++i)
    (i < 2000 ? train_c : dev_c).examples.push_back(corpus.examples[i]);

  ModelConfig mcfg;
  mcfg.vocab_size = vocab.size();
  mcfg.embedding_dim = 32;
  mcfg.heads = 4;
  mcfg.blocks = 1;
  mcfg.ffn_dim = 64;
  mcfg.max_len = 8;
  mcfg.dropout = 0.1;
  mcfg.classes = 2;
  mcfg.init_std = 0.2;

  AdvConfig cfg;
  cfg.method = Method::natural;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.lr = 0.5;
  cfg.dropout = 0.1;
  cfg.seed = 1;

  TrainResult result =
      train(mcfg, cfg, encode(train_c, vocab, mcfg.max_len), encode(dev_c, vocab, mcfg.max_len));
  CHECK(result.report.best_dev_acc >= 0.95);
}
