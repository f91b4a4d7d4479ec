#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "r3p/config.hpp"
#include "r3p/pipeline.hpp"
#include "r3p/rating_service.hpp"

namespace {

using r3p::PipelineConfig;

struct Alias {
  std::string flag;
  std::string key;
  std::string help;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype network training with reward-guided prototype repair"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_flag;
  bool force = false;
  app.add_option("--config", config_path, "TOML-style configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", out_flag, "artifact output root (overrides R3P_OUTPUT_ROOT)");
  app.add_flag("--force", force, "overwrite existing outputs");

  // Every configuration key is also a flag: --section.key value
  PipelineConfig defaults;
  std::map<std::string, std::vector<std::string>> dotted;
  std::map<std::string, CLI::Option*> dotted_opts;
  for (const auto& key : r3p::config_keys(defaults))
    dotted_opts[key.name] = app.add_option("--" + key.name, dotted[key.name])->group("Configuration");

  std::map<std::string, std::vector<std::string>> alias_values;
  std::vector<std::pair<CLI::Option*, std::string>> aliases;
  auto command = [&](const std::string& name, const std::string& help,
                     const std::vector<Alias>& flags) {
    CLI::App* sub = app.add_subcommand(name, help);
    for (const auto& a : flags)
      aliases.emplace_back(sub->add_option(a.flag, alias_values[name + a.flag], a.help), a.key);
    return sub;
  };

  CLI::App* synth = command("synth-gen", "generate (or ingest) the dataset and augment it", {});
  CLI::App* train_cmd =
      command("train", "train the base model", {{"--epochs", "train.epochs", "training epochs"}});
  CLI::App* serve = command("serve-ratings", "serve the rating API and UI",
                            {{"--port", "service.port", "listen port"},
                             {"--ui", "service.ui_dir", "static UI directory"}});
  CLI::App* oracle = command("oracle-rate", "rate tasks with the mask oracle",
                             {{"--n", "feedback.ratings", "number of tasks to rate"}});
  CLI::App* compare = command("build-comparisons", "turn ratings into pairwise comparisons",
                              {{"--test-fraction", "feedback.test_fraction", "held-out item share"},
                               {"--seed", "feedback.split_seed", "split seed"}});
  CLI::App* reward_cmd = command("train-reward", "train the reward model",
                                 {{"--epochs", "reward.epochs", "reward training epochs"}});
  CLI::App* r2_cmd = command("r2", "reweigh and reselect prototypes", {});
  CLI::App* r3_cmd = command("r3", "reweigh, reselect and retrain",
                             {{"--epochs", "retrain.epochs", "retraining epochs"}});
  std::string stage = "base";
  CLI::App* eval_cmd = command("eval", "evaluate one stage and write its report", {});
  eval_cmd->add_option("--stage", stage, "stage to evaluate")
      ->check(CLI::IsMember({"base", "r2", "r3"}));
  std::vector<std::string> members;
  CLI::App* ensemble = command("ensemble-eval", "evaluate a logit-averaging ensemble", {});
  ensemble->add_option("--models", members, "stage names or checkpoint paths")
      ->delimiter(',')
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg;
    if (!config_path.empty()) r3p::load_config_file(cfg, config_path);
    r3p::apply_output_env(cfg);
    for (const auto& [name, opt] : dotted_opts)
      if (opt->count() > 0) r3p::set_key(cfg, name, dotted[name]);
    for (const auto& [opt, key] : aliases)
      if (opt->count() > 0) r3p::set_key(cfg, key, opt->as<std::vector<std::string>>());
    if (!out_flag.empty()) cfg.output_root = out_flag;
    r3p::validate(cfg);

    nlohmann::json result;
    if (*synth) {
      result = r3p::run_synth_gen(cfg, force);
    } else if (*train_cmd) {
      result = r3p::run_train(cfg, force);
    } else if (*oracle) {
      result = r3p::run_oracle_rate(cfg, cfg.feedback.ratings);
    } else if (*compare) {
      result = r3p::run_build_comparisons(cfg, force);
    } else if (*reward_cmd) {
      result = r3p::run_train_reward(cfg, force);
    } else if (*r2_cmd) {
      result = r3p::run_r2(cfg, force);
    } else if (*r3_cmd) {
      result = r3p::run_r3(cfg, force);
    } else if (*eval_cmd) {
      result = r3p::run_eval(cfg, stage, force);
    } else if (*ensemble) {
      result = r3p::run_ensemble_eval(cfg, members, force);
    } else if (*serve) {
      const r3p::Artifacts a{cfg.output_root};
      const auto data = r3p::load_artifact_data(a);
      const auto model = r3p::load_stage_model(a, "base");
      r3p::RatingStore store(a.ratings());
      r3p::RatingService service(model, data, store,
                                 r3p::make_task_pool(model, data, cfg.feedback.pool_seed));
      std::optional<std::filesystem::path> ui;
      if (!cfg.service.ui_dir.empty()) ui = cfg.service.ui_dir;
      r3p::RatingServer server(service, ui);
      std::cerr << "serving ratings on http://" << cfg.service.host << ":" << cfg.service.port
                << "\n";
      server.serve(cfg.service.host, cfg.service.port);
      return 0;
    }
    std::cout << result.dump(2) << std::endl;
    return 0;
  } catch (const r3p::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
