#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "gestdtr/cli.hpp"
#include "gestdtr/errors.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::optional<std::string> data;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> reps;
  std::optional<std::string> out;
  std::optional<std::string> format;
  std::optional<std::string> preset;
  std::optional<std::string> policy;
  std::optional<std::string> direction;
  std::optional<std::string> criterion;
  std::optional<unsigned> threads;
  std::string write_config;
};

gestdtr::RunConfig resolve(gestdtr::Command command, const Overrides& o) {
  gestdtr::RunConfig c;
  if (!o.config_path.empty()) c = gestdtr::read_config_file(o.config_path);
  c.command = command;
  if (o.data) c.dataset_path = *o.data;
  if (o.seed) c.seed = *o.seed;
  if (o.reps) c.reps = *o.reps;
  if (o.out) c.output_path = *o.out;
  if (o.format) c.format = gestdtr::parse_output_format(*o.format);
  if (o.preset) {
    c.preset = *o.preset;
    c.scenario.reset();
  }
  if (o.policy) c.stage2_policy = gestdtr::parse_stage2_policy(*o.policy);
  if (o.direction) c.direction = gestdtr::parse_direction(*o.direction);
  if (o.criterion) c.criterion = gestdtr::parse_criterion(*o.criterion);
  if (o.threads) c.threads = *o.threads;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"G-estimation of dynamic treatment regimes"};
  app.require_subcommand(1);

  Overrides o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run configuration");
    sub->add_option("--out", o.out, "Output file (default: standard output)");
    sub->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"csv", "json"}));
    sub->add_option("--write-config", o.write_config,
                    "Write the resolved configuration to this file and exit");
  };

  CLI::App* fit = app.add_subcommand("fit", "Estimate blip parameters stage by stage");
  CLI::App* select = app.add_subcommand("select", "Select blip models by QIC or Wald tests");
  CLI::App* simulate = app.add_subcommand("simulate", "Run a simulation study");
  CLI::App* regime = app.add_subcommand("regime", "Estimated optimal treatment per subject");
  for (CLI::App* sub : {fit, select, regime}) {
    add_common(sub);
    sub->add_option("--data", o.data, "Wide-format CSV dataset");
  }
  select->add_option("--direction", o.direction, "forward, backward or exhaustive");
  select->add_option("--criterion", o.criterion, "qic or wald");

  add_common(simulate);
  simulate->add_option("--seed", o.seed, "Master seed");
  simulate->add_option("--reps", o.reps, "Replications per setup");
  simulate->add_option("--scenario", o.preset, "Preset name (table1, table2, ...)");
  simulate->add_option("--stage2-policy", o.policy, "correct, recommended or intercept");
  simulate->add_option("--threads", o.threads, "Worker threads (0: automatic)");

  CLI11_PARSE(app, argc, argv);

  gestdtr::Command command = gestdtr::Command::fit;
  if (select->parsed()) command = gestdtr::Command::select;
  if (simulate->parsed()) command = gestdtr::Command::simulate;
  if (regime->parsed()) command = gestdtr::Command::regime;

  gestdtr::RunConfig config;
  try {
    config = resolve(command, o);
  } catch (const std::exception& e) {
    std::cerr << gestdtr::error_json(e) << '\n';
    return 2;
  }
  if (!o.write_config.empty()) {
    std::ofstream file(o.write_config, std::ios::binary);
    if (!file) {
      std::cerr << gestdtr::error_json(
                       gestdtr::SpecificationError("cannot write '" + o.write_config + "'"))
                << '\n';
      return 2;
    }
    file << gestdtr::dump_config(config) << '\n';
    return 0;
  }
  return gestdtr::run(config, std::cout, std::cerr);
}
