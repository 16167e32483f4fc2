#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "slimfit/commands.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> freeze_rate;
  std::optional<std::string> scheduler;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<std::string> quant;
  std::optional<std::string> prune;
  std::optional<std::string> out_dir;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--freeze-rate", o.freeze_rate, "Fraction of layers frozen per iteration");
  cmd->add_option("--scheduler", o.scheduler, "ils, random, progressive or none")
      ->check(CLI::IsMember({"ils", "random", "progressive", "none"}));
  cmd->add_option("--epochs", o.epochs, "Fine-tuning epochs");
  cmd->add_option("--batch-size", o.batch_size, "Batch size");
  cmd->add_option("--quant", o.quant, "on or off")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--prune", o.prune, "on or off")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--out-dir", o.out_dir, "Output directory");
}

slimfit::AppConfig resolve(const Overrides& o, bool memory) {
  using namespace slimfit;
  AppConfig c = o.config.empty() ? load_config_text("") : load_config_file(o.config);
  if (o.seed) c.run.seed = *o.seed;
  if (o.freeze_rate) c.run.freeze_rate = *o.freeze_rate;
  if (o.scheduler) c.run.scheduler = parse_scheduler(*o.scheduler);
  if (o.epochs) c.run.epochs = *o.epochs;
  if (o.batch_size) (memory ? c.memory.batch : c.run.batch_size) = *o.batch_size;
  if (o.quant) c.run.codecs.quantize = parse_bool(*o.quant);
  if (o.prune) c.run.codecs.prune = parse_bool(*o.prune);
  if (o.out_dir) c.out_dir = *o.out_dir;
  c.validate();
  return c;
}

void apply_thread_cap() {
  if (const char* env = std::getenv("SLIMFIT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-freezing fine-tuning engine with activation compression"};
  app.require_subcommand(1);

  Overrides train_o, sweep_o, mem_o, data_o;
  auto* train = app.add_subcommand("train", "Pretrain (optional) and fine-tune, writing run logs");
  add_run_flags(train, train_o);
  auto* sweep = app.add_subcommand("sweep", "Fine-tune once per scheduler and freeze rate");
  add_run_flags(sweep, sweep_o);
  std::string rates;
  sweep->add_option("--freeze-rates", rates, "Comma-separated freeze rates, overrides [sweep]");
  auto* mem = app.add_subcommand("memory-report", "Analytic activation memory for a configuration");
  add_run_flags(mem, mem_o);
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op");
  int instances = 20;
  std::uint64_t grad_seed = 1;
  grad->add_option("--instances", instances, "Random instances per op")->check(CLI::PositiveNumber);
  grad->add_option("--seed", grad_seed, "Seed");
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic task as CSV");
  add_run_flags(gen, data_o);

  CLI11_PARSE(app, argc, argv);
  apply_thread_cap();
  try {
    if (*train) return slimfit::cmd_train(resolve(train_o, false), std::cout);
    if (*sweep) {
      auto c = resolve(sweep_o, false);
      if (!rates.empty())
        c.sweep.freeze_rates = slimfit::load_config_text("[sweep]\nfreeze_rates = " + rates, "--freeze-rates")
                                   .sweep.freeze_rates;
      return slimfit::cmd_sweep(c, std::cout);
    }
    if (*mem) return slimfit::cmd_memory_report(resolve(mem_o, true), std::cout);
    if (*grad) return slimfit::cmd_gradcheck(instances, grad_seed, std::cout);
    if (*gen) return slimfit::cmd_gen_data(resolve(data_o, false), std::cout);
  } catch (const slimfit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const slimfit::TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
