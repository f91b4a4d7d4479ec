#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/protopnet.hpp"
#include "r3p/r3.hpp"
#include "r3p/reward.hpp"
#include "r3p/train.hpp"

namespace r3p {

struct FeedbackConfig {
  int ratings = 400;  // oracle ratings per oracle-rate run
  std::string rater = "oracle";
  std::uint64_t pool_seed = 11;
  std::uint64_t split_seed = 13;
  double test_fraction = 0.2;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string ui_dir;  // empty: API only
};

struct PipelineConfig {
  // Dataset: "synthetic" or a folder with one sub-folder per class.
  std::string source = "synthetic";
  SyntheticOptions synthetic{10, 30, 32, 7};
  double folder_test_fraction = 0.5;
  std::uint64_t augment_seed = 1;
  bool augment = true;

  ModelConfig model{32, 10, 5, 32, 1e-4, {16, 32, 32}, 8};
  std::uint64_t model_seed = 3;

  TrainConfig train{10, 3, 5, 32, 1e-3, 3e-3, 1e-3, 0.8, 0.08, 1e-4, 100, 1e-2, 5};
  TrainConfig retrain{5, 0, 5, 32, 1e-3, 3e-3, 1e-3, 0.8, 0.08, 1e-4, 100, 1e-2, 5};

  FeedbackConfig feedback;
  RewardConfig reward{32, {8, 16, 16}, 16};
  RewardTrainConfig reward_train{30, 64, 3e-3, 3};
  R3Config r3{0.45, 0.15, 0.50, 100, 50, 0.05, 12, 200, 9};
  ServiceConfig service;

  std::string output_root = "artifacts";
};

inline void validate(const PipelineConfig& c) {
  if (c.source == "synthetic") {
    require<ConfigError>(c.synthetic.classes >= 2, "need at least two classes");
    require<ConfigError>(c.synthetic.per_class >= 2, "need at least two images per class");
  }
  require<ConfigError>(c.model.image_size == c.synthetic.image_size || c.source != "synthetic",
                       "model.image_size must equal data.image_size");
  require<ConfigError>(c.reward.image_size == c.model.image_size,
                       "reward.image_size must equal model.image_size");
  validate(c.model);
  validate(c.train);
  validate(c.retrain);
  validate(c.reward);
  validate(c.reward_train);
  validate(c.r3);
  require<ConfigError>(c.feedback.ratings >= 0, "feedback.ratings must be non-negative");
  require<ConfigError>(c.feedback.test_fraction > 0 && c.feedback.test_fraction < 1,
                       "feedback.test_fraction must lie in (0,1)");
  require<ConfigError>(c.service.port >= 0 && c.service.port < 65536, "invalid service.port");
  require<ConfigError>(!c.output_root.empty(), "output root must not be empty");
}

// One configurable key: its dotted name and how to assign it from text.
struct ConfigKey {
  std::string name;
  std::function<void(const std::vector<std::string>&)> assign;
};

namespace detail {

template <typename T>
T parse_scalar(const std::string& name, const std::string& text) {
  T value{};
  require<ConfigError>(CLI::detail::lexical_conversion<T, T>({text}, value), "invalid value '",
                       text, "' for ", name);
  return value;
}

template <typename T>
ConfigKey key(std::string name, T& field) {
  return {name, [name, &field](const std::vector<std::string>& inputs) {
            if constexpr (std::is_same_v<T, std::vector<int>>) {
              std::vector<int> values;
              for (const auto& in : inputs) {
                std::stringstream parts(in);
                std::string item;
                while (std::getline(parts, item, ','))
                  if (!item.empty()) values.push_back(parse_scalar<int>(name, item));
              }
              require<ConfigError>(!values.empty(), "empty list for ", name);
              field = values;
            } else {
              require<ConfigError>(inputs.size() == 1, name, " takes exactly one value");
              field = parse_scalar<T>(name, inputs.front());
            }
          }};
}

inline void train_keys(std::vector<ConfigKey>& keys, const std::string& section, TrainConfig& t) {
  keys.push_back(key(section + ".epochs", t.epochs));
  keys.push_back(key(section + ".warmup_epochs", t.warmup_epochs));
  keys.push_back(key(section + ".push_period", t.push_period));
  keys.push_back(key(section + ".batch_size", t.batch_size));
  keys.push_back(key(section + ".lr_backbone", t.lr_backbone));
  keys.push_back(key(section + ".lr_prototypes", t.lr_prototypes));
  keys.push_back(key(section + ".lr_head", t.lr_head));
  keys.push_back(key(section + ".lambda_cluster", t.lambda_cluster));
  keys.push_back(key(section + ".lambda_separation", t.lambda_separation));
  keys.push_back(key(section + ".lambda_l1", t.lambda_l1));
  keys.push_back(key(section + ".refit_iterations", t.refit_iterations));
  keys.push_back(key(section + ".lr_refit", t.lr_refit));
  keys.push_back(key(section + ".seed", t.seed));
}

}  // namespace detail

inline std::vector<ConfigKey> config_keys(PipelineConfig& c) {
  using detail::key;
  std::vector<ConfigKey> keys{
      key("data.source", c.source),
      key("data.classes", c.synthetic.classes),
      key("data.per_class", c.synthetic.per_class),
      key("data.image_size", c.synthetic.image_size),
      key("data.seed", c.synthetic.seed),
      key("data.test_fraction", c.synthetic.test_fraction),
      key("data.folder_test_fraction", c.folder_test_fraction),
      key("data.min_area", c.synthetic.min_area),
      key("data.max_area", c.synthetic.max_area),
      key("data.augment", c.augment),
      key("data.augment_seed", c.augment_seed),
      key("model.prototypes_per_class", c.model.prototypes_per_class),
      key("model.depth", c.model.depth),
      key("model.eps", c.model.eps),
      key("model.widths", c.model.widths),
      key("model.latent_size", c.model.latent_size),
      key("model.seed", c.model_seed),
      key("feedback.ratings", c.feedback.ratings),
      key("feedback.rater", c.feedback.rater),
      key("feedback.pool_seed", c.feedback.pool_seed),
      key("feedback.split_seed", c.feedback.split_seed),
      key("feedback.test_fraction", c.feedback.test_fraction),
      key("reward.widths", c.reward.widths),
      key("reward.fusion_channels", c.reward.fusion_channels),
      key("reward.epochs", c.reward_train.epochs),
      key("reward.batch_items", c.reward_train.batch_items),
      key("reward.learning_rate", c.reward_train.learning_rate),
      key("reward.seed", c.reward_train.seed),
      key("r3.gamma", c.r3.gamma),
      key("r3.alpha", c.r3.alpha),
      key("r3.beta", c.r3.beta),
      key("r3.lambda_dist", c.r3.lambda_dist),
      key("r3.reweigh_steps", c.r3.reweigh_steps),
      key("r3.step_size", c.r3.step_size),
      key("r3.max_halvings", c.r3.max_halvings),
      key("r3.max_candidates", c.r3.max_candidates),
      key("r3.seed", c.r3.seed),
      key("service.host", c.service.host),
      key("service.port", c.service.port),
      key("service.ui_dir", c.service.ui_dir),
      key("output.root", c.output_root),
  };
  detail::train_keys(keys, "train", c.train);
  detail::train_keys(keys, "retrain", c.retrain);
  return keys;
}

// Image size is one setting shared by data, model and reward model.
inline void sync_sizes(PipelineConfig& c) {
  c.model.image_size = c.synthetic.image_size;
  c.reward.image_size = c.synthetic.image_size;
  c.model.classes = c.synthetic.classes;
}

inline void set_key(PipelineConfig& c, const std::string& name,
                    const std::vector<std::string>& inputs) {
  for (auto& k : config_keys(c))
    if (k.name == name) {
      k.assign(inputs);
      sync_sizes(c);
      return;
    }
  throw ConfigError("unknown configuration key '" + name + "'");
}

// TOML-style file: [section] headers, key = value lines, # comments.
inline void load_config_file(PipelineConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  require<ConfigError>(static_cast<bool>(in), "config file not found: ", path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(concat("cannot parse ", path.string(), ": ", e.what()));
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;
    try {
      set_key(c, item.fullname(), item.inputs);
    } catch (const ConfigError& e) {
      throw ConfigError(concat(path.string(), ": ", e.what()));
    }
  }
}

inline constexpr const char* kOutputRootEnv = "R3P_OUTPUT_ROOT";

// Output root precedence: flag, then environment, then file, then default.
inline void apply_output_env(PipelineConfig& c) {
  if (const char* root = std::getenv(kOutputRootEnv); root && *root) c.output_root = root;
}

}  // namespace r3p
