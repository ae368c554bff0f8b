#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advlab/cli.hpp"
#include "advlab/tensor.hpp"

int main(int argc, char** argv) {
  CLI::App app{"embedding-space adversarial training lab"};
  app.require_subcommand(1);

  struct SubArgs {
    std::string config;
    std::vector<std::string> sets;
  };
  std::map<std::string, SubArgs> args;
  for (const char* name : {"train", "eval", "attack", "compare", "gen-data", "presets"}) {
    CLI::App* sub = app.add_subcommand(name);
    SubArgs& a = args[name];
    sub->add_option("-c,--config", a.config, "flat key=value config file");
    sub->add_option("-s,--set", a.sets, "override: key=value (repeatable)");
  }

  CLI11_PARSE(app, argc, argv);

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    advlab::RunConfig cfg = advlab::parse_config(args[sub].config, args[sub].sets);
    return advlab::dispatch(sub, cfg, std::cout);
  } catch (const advlab::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  } catch (const advlab::NumericalError& e) {
    std::cerr << "error: numerical: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
