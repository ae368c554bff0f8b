#pragma once

// Command-line wiring: strict flat key=value config files with flag
// overrides, subcommand dispatch, and the shipped hyper-parameter presets.

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace advlab {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Merged view of model + training + attack + data settings. Every field
/// has a default; subcommands check for the paths they require.
struct RunConfig {
  // training
  std::string method = "natural";
  int ascent_steps = 1;
  double alpha = 0.0;
  double epsilon = 0.0;
  int yopo_inner = 1;
  double lr = 0.5;
  double dropout = 0.1;
  bool reuse_mask = true;
  std::string optimizer = "sgd";
  int epochs = 5;
  int batch_size = 32;
  std::uint64_t seed = 42;
  // model
  int embedding_dim = 32;
  int heads = 4;
  int blocks = 1;
  int ffn_dim = 64;
  int max_len = 16;
  double init_std = 0.2;
  // attack
  int attack_steps = 2000;
  double attack_step_size = 5e-3;
  std::string eps_mode = "fixed";
  double attack_epsilon = 0.0;
  double eps_rel = 0.01;
  int attack_restarts = 10;
  double eps_start_factor = 1.1;
  double eps_decrement = 0.0;
  int attack_samples = 0;
  // data
  std::string train_tsv;
  std::string dev_tsv;
  std::string eval_tsv;
  int min_count = 1;
  std::string task = "trigger-bigram";
  int gen_train = 2000;
  int gen_dev = 500;
  int gen_test = 0;
  int gen_seq_len = 7;
  int gen_vocab = 20;
  double gen_noise = 0.0;
  // io
  std::string out_dir;
  std::string checkpoint;
  std::string vocab;
  std::string models;  // compare: name=path,name=path
  std::string reference;
  std::string reference_alt;
};

/// Parse `key = value` lines ('#' comments allowed), then apply
/// key=value overrides on top. Unknown keys are fatal and name the
/// nearest known key.
RunConfig parse_config(const std::string& file_path, const std::vector<std::string>& overrides);

/// All keys, sorted, in the same format parse_config reads; a parse of
/// the echo reproduces the config exactly.
std::string echo_config(const RunConfig& cfg);

struct Preset {
  std::string name;
  double epsilon;
  double alpha;
  int steps;  // the paper's m
};

/// Shipped per-task hyper-parameter presets.
const std::vector<Preset>& presets();

/// Subcommands: train, eval, attack, compare, gen-data, presets.
/// Returns a process exit code (0 ok, 1 usage/config, 2 numerical).
int dispatch(const std::string& subcommand, const RunConfig& cfg, std::ostream& out);

}  // namespace advlab
