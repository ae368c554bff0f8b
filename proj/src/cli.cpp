#include "advlab/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "advlab/checkpoint.hpp"
#include "advlab/robustness.hpp"
#include "advlab/trainers.hpp"
#include "json.hpp"

namespace advlab {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Field {
  enum class Type { str, integer, real, boolean, u64 } type;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long x;
  try {
    x = std::stoll(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  unsigned long long x;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
  if (used != v.size() || v[0] == '-')
    throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + v + "'");
  return x;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

const std::map<std::string, Field>& schema() {
  static const std::map<std::string, Field> s = [] {
    std::map<std::string, Field> m;
    auto str = [&m](const std::string& k, std::string RunConfig::* p) {
      m[k] = {Field::Type::str, [p](const RunConfig& c) { return c.*p; },
              [p](RunConfig& c, const std::string& v) { c.*p = v; }};
    };
    auto integer = [&m](const std::string& k, int RunConfig::* p) {
      m[k] = {Field::Type::integer,
              [p](const RunConfig& c) { return std::to_string(c.*p); },
              [p, k](RunConfig& c, const std::string& v) {
                c.*p = static_cast<int>(parse_int(k, v));
              }};
    };
    auto real = [&m](const std::string& k, double RunConfig::* p) {
      m[k] = {Field::Type::real, [p](const RunConfig& c) { return format_double(c.*p); },
              [p, k](RunConfig& c, const std::string& v) { c.*p = parse_real(k, v); }};
    };
    auto boolean = [&m](const std::string& k, bool RunConfig::* p) {
      m[k] = {Field::Type::boolean,
              [p](const RunConfig& c) { return c.*p ? std::string("true") : std::string("false"); },
              [p, k](RunConfig& c, const std::string& v) { c.*p = parse_bool(k, v); }};
    };
    auto u64 = [&m](const std::string& k, std::uint64_t RunConfig::* p) {
      m[k] = {Field::Type::u64, [p](const RunConfig& c) { return std::to_string(c.*p); },
              [p, k](RunConfig& c, const std::string& v) { c.*p = parse_u64(k, v); }};
    };

    str("method", &RunConfig::method);
    integer("ascent_steps", &RunConfig::ascent_steps);
    real("alpha", &RunConfig::alpha);
    real("epsilon", &RunConfig::epsilon);
    integer("yopo_inner", &RunConfig::yopo_inner);
    real("lr", &RunConfig::lr);
    real("dropout", &RunConfig::dropout);
    boolean("reuse_mask", &RunConfig::reuse_mask);
    str("optimizer", &RunConfig::optimizer);
    integer("epochs", &RunConfig::epochs);
    integer("batch_size", &RunConfig::batch_size);
    u64("seed", &RunConfig::seed);
    integer("embedding_dim", &RunConfig::embedding_dim);
    integer("heads", &RunConfig::heads);
    integer("blocks", &RunConfig::blocks);
    integer("ffn_dim", &RunConfig::ffn_dim);
    integer("max_len", &RunConfig::max_len);
    real("init_std", &RunConfig::init_std);
    integer("attack_steps", &RunConfig::attack_steps);
    real("attack_step_size", &RunConfig::attack_step_size);
    str("eps_mode", &RunConfig::eps_mode);
    real("attack_epsilon", &RunConfig::attack_epsilon);
    real("eps_rel", &RunConfig::eps_rel);
    integer("attack_restarts", &RunConfig::attack_restarts);
    real("eps_start_factor", &RunConfig::eps_start_factor);
    real("eps_decrement", &RunConfig::eps_decrement);
    integer("attack_samples", &RunConfig::attack_samples);
    str("train_tsv", &RunConfig::train_tsv);
    str("dev_tsv", &RunConfig::dev_tsv);
    str("eval_tsv", &RunConfig::eval_tsv);
    integer("min_count", &RunConfig::min_count);
    str("task", &RunConfig::task);
    integer("gen_train", &RunConfig::gen_train);
    integer("gen_dev", &RunConfig::gen_dev);
    integer("gen_test", &RunConfig::gen_test);
    integer("gen_seq_len", &RunConfig::gen_seq_len);
    integer("gen_vocab", &RunConfig::gen_vocab);
    real("gen_noise", &RunConfig::gen_noise);
    str("out_dir", &RunConfig::out_dir);
    str("checkpoint", &RunConfig::checkpoint);
    str("vocab", &RunConfig::vocab);
    str("models", &RunConfig::models);
    str("reference", &RunConfig::reference);
    str("reference_alt", &RunConfig::reference_alt);
    return m;
  }();
  return s;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string nearest_key(const std::string& key) {
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& [name, f] : schema()) {
    const std::size_t d = edit_distance(key, name);
    if (d < best_d) {
      best_d = d;
      best = name;
    }
  }
  return best;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = schema().find(key);
  if (it == schema().end())
    throw ConfigError("unknown key '" + key + "' (did you mean '" + nearest_key(key) + "'?)");
  it->second.set(cfg, value);
}

void apply_line(RunConfig& cfg, const std::string& line, const std::string& where) {
  const std::string stripped = trim(line);
  if (stripped.empty() || stripped[0] == '#') return;
  const auto eq = stripped.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value': " + stripped);
  set_key(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
}

}  // namespace

RunConfig parse_config(const std::string& file_path, const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!file_path.empty()) {
    std::ifstream in(file_path);
    if (!in) throw ConfigError("cannot read config file " + file_path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) apply_line(cfg, line, file_path + ":" + std::to_string(++n));
  }
  for (const std::string& ov : overrides) apply_line(cfg, ov, "override");
  if (cfg.out_dir.empty())
    if (const char* root = std::getenv("ADVLAB_OUT")) cfg.out_dir = root;
  return cfg;
}

std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : schema()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

const std::vector<Preset>& presets() {
  static const std::vector<Preset> p = {
      {"mnli", 2e-1, 1e-1, 2}, {"qnli", 1.5e-1, 1e-1, 2}, {"qqp", 4.5e-1, 1.5e-1, 2},
      {"rte", 1.5e-1, 3e-2, 3}, {"sst-2", 6e-1, 1e-1, 2}, {"mrpc", 4e-1, 4e-2, 3},
      {"cola", 2e-1, 2.5e-2, 3}, {"sts-b", 3e-1, 1e-1, 3}, {"wsc-wnli", 1e-2, 5e-3, 2},
  };
  return p;
}

namespace {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

fs::path require_out_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("out_dir is required (or set ADVLAB_OUT)");
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig model_config_from(const RunConfig& cfg, std::size_t vocab_size, std::size_t classes) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.embedding_dim = static_cast<std::size_t>(cfg.embedding_dim);
  m.heads = static_cast<std::size_t>(cfg.heads);
  m.blocks = static_cast<std::size_t>(cfg.blocks);
  m.ffn_dim = static_cast<std::size_t>(cfg.ffn_dim);
  m.max_len = static_cast<std::size_t>(cfg.max_len);
  m.dropout = cfg.dropout;
  m.classes = classes;
  m.init_std = cfg.init_std;
  m.validate();
  return m;
}

AdvConfig adv_config_from(const RunConfig& cfg) {
  AdvConfig a;
  a.method = method_from_string(cfg.method);
  a.ascent_steps = cfg.ascent_steps;
  a.alpha = cfg.alpha;
  a.epsilon = cfg.epsilon;
  a.yopo_inner = cfg.yopo_inner;
  a.lr = cfg.lr;
  a.dropout = cfg.dropout;
  a.reuse_mask = cfg.reuse_mask;
  a.optimizer = optimizer_from_string(cfg.optimizer);
  a.epochs = cfg.epochs;
  a.batch_size = static_cast<std::size_t>(cfg.batch_size);
  a.seed = cfg.seed;
  a.validate();
  return a;
}

AttackConfig attack_config_from(const RunConfig& cfg) {
  AttackConfig a;
  a.steps = cfg.attack_steps;
  a.step_size = cfg.attack_step_size;
  a.mode = eps_mode_from_string(cfg.eps_mode);
  a.epsilon = cfg.attack_epsilon;
  a.eps_rel = cfg.eps_rel;
  a.restarts = cfg.attack_restarts;
  a.eps_start_factor = cfg.eps_start_factor;
  a.eps_decrement = cfg.eps_decrement;
  a.max_samples = static_cast<std::size_t>(cfg.attack_samples);
  a.validate();
  return a;
}

SyntheticTask task_from_string(const std::string& s) {
  if (s == "trigger-bigram") return SyntheticTask::trigger_bigram;
  if (s == "parity-of-token") return SyntheticTask::parity_of_token;
  throw ConfigError("unknown task '" + s + "'");
}

std::string require(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError("missing required key '" + key + "'");
  return value;
}

std::size_t median_n_delta(const EncodedData& data, std::size_t dim) {
  std::vector<double> tokens;
  for (std::size_t r = 0; r < data.count; ++r) {
    std::size_t n = 0;
    for (std::size_t s = 0; s < data.seq_len; ++s) n += data.row_mask(r)[s];
    tokens.push_back(static_cast<double>(n));
  }
  return static_cast<std::size_t>(median(tokens)) * dim;
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = require_out_dir(cfg);
  SyntheticSpec spec;
  spec.task = task_from_string(cfg.task);
  spec.seq_len = static_cast<std::size_t>(cfg.gen_seq_len);
  spec.vocab_size = static_cast<std::size_t>(cfg.gen_vocab);
  spec.noise_rate = cfg.gen_noise;

  auto provenance = [&](const std::string& split, std::size_t size, std::uint64_t seed) {
    std::ostringstream os;
    os << "advlab-gen task=" << cfg.task << " split=" << split << " size=" << size
       << " seq_len=" << spec.seq_len << " vocab=" << spec.vocab_size << " noise="
       << format_double(spec.noise_rate) << " seed=" << seed;
    return os.str();
  };
  struct Split { const char* name; int size; std::uint64_t salt; };
  for (const Split s : {Split{"train", cfg.gen_train, 1}, Split{"dev", cfg.gen_dev, 2},
                        Split{"test", cfg.gen_test, 3}}) {
    if (s.size <= 0) continue;
    spec.size = static_cast<std::size_t>(s.size);
    spec.seed = cfg.seed + s.salt;
    LabeledCorpus corpus = gen_synthetic(spec);
    corpus.split = s.name;
    save_tsv(corpus, (dir / (std::string(s.name) + ".tsv")).string(),
             provenance(s.name, spec.size, spec.seed));
    out << "wrote " << (dir / (std::string(s.name) + ".tsv")).string() << " (" << spec.size
        << " examples)\n";
  }
  write_file(dir / "config.resolved", echo_config(cfg));
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = require_out_dir(cfg);
  const LabeledCorpus train_corpus = load_tsv(require(cfg.train_tsv, "train_tsv"));
  const LabeledCorpus dev_corpus = load_tsv(require(cfg.dev_tsv, "dev_tsv"));
  write_file(dir / "config.resolved", echo_config(cfg));

  const Vocab vocab = build_vocab(train_corpus, static_cast<std::size_t>(cfg.min_count));
  vocab.save((dir / "vocab.json").string());
  const std::size_t classes =
      static_cast<std::size_t>(std::max(train_corpus.classes, dev_corpus.classes));
  const ModelConfig mcfg = model_config_from(cfg, vocab.size(), classes);
  const AdvConfig acfg = adv_config_from(cfg);
  const EncodedData train_data = encode(train_corpus, vocab, mcfg.max_len);
  const EncodedData dev_data = encode(dev_corpus, vocab, mcfg.max_len);

  TrainResult result = train(mcfg, acfg, train_data, dev_data);

  save_checkpoint((dir / "checkpoint.bin").string(), mcfg, result.best_params, acfg.seed);
  write_file(dir / "metrics.jsonl", result.report.to_jsonl(/*include_wall=*/true));

  nlohmann::json report = nlohmann::json::parse(result.report.to_json());
  if (acfg.method != Method::natural) {
    report["invariance_cardinality"] =
        invariance_cardinality(acfg.ascent_steps, acfg.epsilon, acfg.alpha,
                               median_n_delta(train_data, mcfg.embedding_dim));
  }
  write_file(dir / "report.json", report.dump(2) + "\n");

  out << "trained method=" << cfg.method << " epochs=" << cfg.epochs;
  if (result.report.best_epoch >= 0)
    out << " best_dev_acc=" << result.report.best_dev_acc << " (epoch "
        << result.report.best_epoch << ")";
  if (report.contains("invariance_cardinality"))
    out << " invariance_cardinality=" << report["invariance_cardinality"].get<int>();
  out << "\n";
  return 0;
}

struct LoadedModel {
  std::string name;
  Checkpoint ckpt;
};

EncodedData load_eval_data(const RunConfig& cfg, const Vocab& vocab, std::size_t max_len) {
  const std::string path = !cfg.eval_tsv.empty() ? cfg.eval_tsv : cfg.dev_tsv;
  if (path.empty()) throw ConfigError("missing required key 'eval_tsv' (or 'dev_tsv')");
  return encode(load_tsv(path), vocab, max_len);
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const Vocab vocab = Vocab::load(require(cfg.vocab, "vocab"));
  const EncodedData data = load_eval_data(cfg, vocab, ckpt.config.max_len);
  const double acc =
      evaluate_accuracy(ckpt.params, ckpt.config, data, static_cast<std::size_t>(cfg.batch_size));
  nlohmann::json j;
  j["accuracy"] = acc;
  j["total"] = data.count;
  j["correct"] = static_cast<std::size_t>(acc * static_cast<double>(data.count) + 0.5);
  const std::string text = j.dump(2) + "\n";
  out << text;
  if (!cfg.out_dir.empty()) write_file(require_out_dir(cfg) / "eval.json", text);
  return 0;
}

std::vector<LoadedModel> parse_model_list(const std::string& spec) {
  std::vector<LoadedModel> models;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw ConfigError("models: expected name=path, got '" + item + "'");
    models.push_back({trim(item.substr(0, eq)), load_checkpoint(trim(item.substr(eq + 1)))});
  }
  if (models.empty()) throw ConfigError("models: empty list");
  return models;
}

int cmd_attack(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = require_out_dir(cfg);
  Checkpoint ckpt = load_checkpoint(require(cfg.checkpoint, "checkpoint"));
  const Vocab vocab = Vocab::load(require(cfg.vocab, "vocab"));
  const EncodedData data = load_eval_data(cfg, vocab, ckpt.config.max_len);
  const AttackConfig atk = attack_config_from(cfg);
  std::vector<NamedModel> models;
  models.push_back({"model", ckpt.config, std::move(ckpt.params)});
  std::vector<EvalReport> reports = robustness_report(models, data, "model", atk, cfg.seed);
  write_file(dir / "attack_report.json", reports[0].to_json());
  write_file(dir / "config.resolved", echo_config(cfg));
  out << "median delta_l_max = " << reports[0].median_delta_l_max
      << " over " << reports[0].evaluated << " samples\n";
  return 0;
}

int cmd_compare(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = require_out_dir(cfg);
  std::vector<LoadedModel> loaded = parse_model_list(require(cfg.models, "models"));
  const Vocab vocab = Vocab::load(require(cfg.vocab, "vocab"));
  const std::size_t max_len = loaded[0].ckpt.config.max_len;
  const EncodedData data = load_eval_data(cfg, vocab, max_len);
  const AttackConfig atk = attack_config_from(cfg);

  std::vector<NamedModel> models;
  for (LoadedModel& m : loaded)
    models.push_back({m.name, m.ckpt.config, std::move(m.ckpt.params)});

  const std::string reference = require(cfg.reference, "reference");
  std::vector<EvalReport> primary = robustness_report(models, data, reference, atk, cfg.seed);
  for (const EvalReport& r : primary)
    write_file(dir / ("eval_" + r.model + "_ref-" + reference + ".json"), r.to_json());

  std::vector<EvalReport> alt;
  if (!cfg.reference_alt.empty()) {
    alt = robustness_report(models, data, cfg.reference_alt, atk, cfg.seed);
    for (const EvalReport& r : alt)
      write_file(dir / ("eval_" + r.model + "_ref-" + cfg.reference_alt + ".json"), r.to_json());
  }
  const std::string table = render_comparison_table(primary, alt.empty() ? nullptr : &alt);
  write_file(dir / "table.txt", table);
  write_file(dir / "config.resolved", echo_config(cfg));
  out << table;
  return 0;
}

int cmd_presets(std::ostream& out) {
  out << "task       epsilon   alpha     m\n";
  char buf[80];
  for (const Preset& p : presets()) {
    std::snprintf(buf, sizeof(buf), "%-10s %-9g %-9g %d\n", p.name.c_str(), p.epsilon, p.alpha,
                  p.steps);
    out << buf;
  }
  return 0;
}

}  // namespace

int dispatch(const std::string& subcommand, const RunConfig& cfg, std::ostream& out) {
  if (subcommand == "gen-data") return cmd_gen_data(cfg, out);
  if (subcommand == "train") return cmd_train(cfg, out);
  if (subcommand == "eval") return cmd_eval(cfg, out);
  if (subcommand == "attack") return cmd_attack(cfg, out);
  if (subcommand == "compare") return cmd_compare(cfg, out);
  if (subcommand == "presets") return cmd_presets(out);
  throw ConfigError("unknown subcommand '" + subcommand + "'");
}

}  // namespace advlab
