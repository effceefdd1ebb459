// asymflow <subcommand> --config <path> [--key value ...] --out <dir> --seed <u64>

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "asymflow/experiment.hpp"

int main(int argc, char** argv) {
  using namespace asymflow;
  CLI::App app{"AsymFlow toy experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool quiet = false;

  std::vector<CLI::App*> subs;
  for (const std::string& name : command_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config with flat keys");
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--seed", seed, "Run seed");
    sub->add_flag("--quiet", quiet, "Suppress progress output");
    sub->allow_extras();
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* chosen = app.get_subcommands().front();
    const std::vector<std::string> extras = chosen->remaining();
    Json overrides = Json::object();
    for (std::size_t i = 0; i < extras.size(); ++i) {
      const std::string& a = extras[i];
      if (a.rfind("--", 0) != 0) throw Error("unexpected argument '" + a + "'");
      std::string key = a.substr(2);
      std::string value;
      if (const auto eq = key.find('='); eq != std::string::npos) {
        value = key.substr(eq + 1);
        key = key.substr(0, eq);
      } else {
        if (i + 1 >= extras.size()) throw Error("missing value for --" + key);
        value = extras[++i];
      }
      for (char& c : key)
        if (c == '-') c = '_';
      overrides[key] = parse_override(value);
    }
    const Json file = config_path.empty() ? Json::object() : load_config_file(config_path);
    CommandContext ctx;
    ctx.command = chosen->get_name();
    ctx.cfg = resolve_config(file, overrides);
    ctx.out = out_dir;
    ctx.seed = seed;
    ctx.threads = worker_threads();
    ctx.log = quiet ? nullptr : &std::clog;
    run_command(ctx);
  } catch (const std::exception& e) {
    std::cerr << "asymflow: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
