#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <sstream>

#include "advlab/cli.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace advlab;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("advlab_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string write_config(const fs::path& dir, const std::string& content) {
  const fs::path path = dir / "run.cfg";
  std::ofstream out(path);
  out << content;
  return path.string();
}

int run(const std::string& sub, const RunConfig& cfg) {
  std::ostringstream sink;
  return dispatch(sub, cfg, sink);
}

}  // namespace

TEST_CASE("an empty file plus full flag overrides is a valid config") {
  const fs::path dir = fresh_dir("empty");
  const std::string file = write_config(dir, "# nothing but a comment\n\n");
  RunConfig cfg = parse_config(file, {"method=freelb", "epsilon=0.15", "alpha=0.03",
                                      "ascent_steps=3", "out_dir=" + dir.string()});
  CHECK(cfg.method == "freelb");
  CHECK(cfg.epsilon == 0.15);
  CHECK(cfg.ascent_steps == 3);
}

TEST_CASE("flags override file values") {
  const fs::path dir = fresh_dir("override");
  const std::string file = write_config(dir, "epochs = 7\nlr = 0.25\n");
  RunConfig cfg = parse_config(file, {"epochs=2"});
  CHECK(cfg.epochs == 2);
  CHECK(cfg.lr == 0.25);
}

TEST_CASE("unknown keys are fatal and name the nearest known key") {
  const fs::path dir = fresh_dir("typo");
  const std::string file = write_config(dir, "epsilonn = 0.1\n");
  try {
    parse_config(file, {});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epsilonn") != std::string::npos);
    CHECK(msg.find("epsilon") != std::string::npos);
  }
}

TEST_CASE("type mismatches are fatal") {
  const fs::path dir = fresh_dir("types");
  CHECK_THROWS_AS(parse_config(write_config(dir, "epochs = three\n"), {}), ConfigError);
  CHECK_THROWS_AS(parse_config(write_config(dir, "lr = fast\n"), {}), ConfigError);
  CHECK_THROWS_AS(parse_config(write_config(dir, "reuse_mask = maybe\n"), {}), ConfigError);
}

TEST_CASE("the resolved config echo is a parse fixed point") {
  const fs::path dir = fresh_dir("echo");
  RunConfig cfg = parse_config("", {"epsilon=0.12345678901234567", "lr=3e-7",
                                    "method=yopo", "seed=18446744073709551615",
                                    "train_tsv=/tmp/x.tsv"});
  const std::string echo1 = echo_config(cfg);
  const std::string file = write_config(dir, echo1);
  RunConfig reparsed = parse_config(file, {});
  CHECK(echo_config(reparsed) == echo1);
}

TEST_CASE("presets include the RTE combination") {
  bool found = false;
  for (const Preset& p : presets())
    if (p.name == "rte") {
      found = true;
      CHECK(p.epsilon == 1.5e-1);
      CHECK(p.alpha == 3e-2);
      CHECK(p.steps == 3);
    }
  CHECK(found);

  std::ostringstream out;
  dispatch("presets", RunConfig{}, out);
  CHECK(out.str().find("rte") != std::string::npos);
  CHECK(out.str().find("0.15") != std::string::npos);
  CHECK(out.str().find("0.03") != std::string::npos);
}

TEST_CASE("unknown subcommands are rejected") {
  CHECK_THROWS_AS(run("trian", RunConfig{}), ConfigError);
}

TEST_CASE("gen-data, train, eval round trip with exact accuracy consistency") {
  const fs::path data_dir = fresh_dir("roundtrip_data");
  RunConfig gen;
  gen.out_dir = data_dir.string();
  gen.gen_train = 120;
  gen.gen_dev = 60;
  gen.gen_seq_len = 5;
  gen.gen_vocab = 10;
  gen.seed = 12;
  REQUIRE(run("gen-data", gen) == 0);
  CHECK(fs::exists(data_dir / "train.tsv"));
  CHECK(fs::exists(data_dir / "dev.tsv"));
  CHECK(slurp(data_dir / "train.tsv").rfind("# advlab-gen", 0) == 0);

  const fs::path run_dir = fresh_dir("roundtrip_run");
  RunConfig tr;
  tr.out_dir = run_dir.string();
  tr.train_tsv = (data_dir / "train.tsv").string();
  tr.dev_tsv = (data_dir / "dev.tsv").string();
  tr.method = "freelb";
  tr.epsilon = 0.05;
  tr.alpha = 0.01;
  tr.ascent_steps = 2;
  tr.epochs = 2;
  tr.batch_size = 16;
  tr.embedding_dim = 16;
  tr.heads = 2;
  tr.ffn_dim = 24;
  tr.max_len = 6;
  tr.seed = 5;
  REQUIRE(run("train", tr) == 0);
  for (const char* f : {"config.resolved", "vocab.json", "metrics.jsonl", "report.json",
                        "checkpoint.bin"})
    CHECK(fs::exists(run_dir / f));

  nlohmann::json report = nlohmann::json::parse(slurp(run_dir / "report.json"));
  REQUIRE(report["epochs"].size() == 2);
  CHECK(report.contains("invariance_cardinality"));
  const double best_acc = report["best_dev_acc"].get<double>();

  const fs::path eval_dir = fresh_dir("roundtrip_eval");
  RunConfig ev;
  ev.out_dir = eval_dir.string();
  ev.checkpoint = (run_dir / "checkpoint.bin").string();
  ev.vocab = (run_dir / "vocab.json").string();
  ev.eval_tsv = (data_dir / "dev.tsv").string();
  REQUIRE(run("eval", ev) == 0);
  nlohmann::json eval_json = nlohmann::json::parse(slurp(eval_dir / "eval.json"));
  CHECK(eval_json["accuracy"].get<double>() == best_acc);
}

TEST_CASE("identical train runs produce byte-identical deterministic artifacts") {
  const fs::path data_dir = fresh_dir("det_data");
  RunConfig gen;
  gen.out_dir = data_dir.string();
  gen.gen_train = 80;
  gen.gen_dev = 40;
  gen.gen_seq_len = 5;
  gen.gen_vocab = 8;
  gen.seed = 3;
  REQUIRE(run("gen-data", gen) == 0);

  auto train_once = [&](const std::string& name) {
    const fs::path dir = fresh_dir(name);
    RunConfig tr;
    tr.out_dir = dir.string();
    tr.train_tsv = (data_dir / "train.tsv").string();
    tr.dev_tsv = (data_dir / "dev.tsv").string();
    tr.method = "pgd";
    tr.epsilon = 0.05;
    tr.alpha = 0.02;
    tr.ascent_steps = 2;
    tr.epochs = 1;
    tr.batch_size = 16;
    tr.embedding_dim = 8;
    tr.heads = 2;
    tr.ffn_dim = 12;
    tr.max_len = 6;
    tr.seed = 77;
    REQUIRE(run("train", tr) == 0);
    return dir;
  };
  const fs::path a = train_once("det_a");
  const fs::path b = train_once("det_b");
  CHECK(slurp(a / "report.json") == slurp(b / "report.json"));
  CHECK(slurp(a / "checkpoint.bin") == slurp(b / "checkpoint.bin"));
  CHECK(slurp(a / "config.resolved") != "");

  // metrics.jsonl differs only in the wall_ms field
  auto strip_wall = [](std::string text) {
    std::string out;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      nlohmann::json j = nlohmann::json::parse(line);
      j.erase("wall_ms");
      out += j.dump() + "\n";
    }
    return out;
  };
  CHECK(strip_wall(slurp(a / "metrics.jsonl")) == strip_wall(slurp(b / "metrics.jsonl")));
}

TEST_CASE("compare with a single reference model at eps 0 yields zero medians") {
  const fs::path data_dir = fresh_dir("cmp_data");
  RunConfig gen;
  gen.out_dir = data_dir.string();
  gen.gen_train = 80;
  gen.gen_dev = 30;
  gen.gen_seq_len = 5;
  gen.gen_vocab = 8;
  gen.seed = 4;
  REQUIRE(run("gen-data", gen) == 0);

  const fs::path run_dir = fresh_dir("cmp_train");
  RunConfig tr;
  tr.out_dir = run_dir.string();
  tr.train_tsv = (data_dir / "train.tsv").string();
  tr.dev_tsv = (data_dir / "dev.tsv").string();
  tr.epochs = 2;
  tr.batch_size = 16;
  tr.embedding_dim = 8;
  tr.heads = 2;
  tr.ffn_dim = 12;
  tr.max_len = 6;
  tr.seed = 6;
  REQUIRE(run("train", tr) == 0);

  const fs::path cmp_dir = fresh_dir("cmp_out");
  RunConfig cmp;
  cmp.out_dir = cmp_dir.string();
  cmp.models = "solo=" + (run_dir / "checkpoint.bin").string();
  cmp.vocab = (run_dir / "vocab.json").string();
  cmp.eval_tsv = (data_dir / "dev.tsv").string();
  cmp.reference = "solo";
  cmp.eps_mode = "fixed";
  cmp.attack_epsilon = 0.0;
  cmp.attack_steps = 5;
  cmp.attack_samples = 8;
  REQUIRE(run("compare", cmp) == 0);
  CHECK(fs::exists(cmp_dir / "table.txt"));
  nlohmann::json rep =
      nlohmann::json::parse(slurp(cmp_dir / "eval_solo_ref-solo.json"));
  CHECK(rep["aggregate"]["median_delta_l_max"].get<double>() == 0.0);
}

TEST_CASE("missing required keys are reported as config errors") {
  RunConfig cfg;
  cfg.out_dir = fresh_dir("missing").string();
  CHECK_THROWS_AS(run("train", cfg), ConfigError);  // no train_tsv
  RunConfig ev;
  ev.out_dir = cfg.out_dir;
  CHECK_THROWS_AS(run("eval", ev), ConfigError);  // no checkpoint
}
