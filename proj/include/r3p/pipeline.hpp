#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/config.hpp"
#include "r3p/data.hpp"
#include "r3p/evaluation.hpp"
#include "r3p/feedback.hpp"
#include "r3p/protopnet.hpp"
#include "r3p/r3.hpp"
#include "r3p/reward.hpp"
#include "r3p/train.hpp"

namespace r3p {

// File layout under the output root.
struct Artifacts {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "data" / "manifest.json"; }
  std::filesystem::path model(const std::string& stage) const {
    return root / "models" / (stage + ".ckpt");
  }
  std::filesystem::path train_log(const std::string& stage) const {
    return root / "models" / (stage + "_train_log.jsonl");
  }
  std::filesystem::path changes(const std::string& stage) const {
    return root / "models" / (stage + "_changes.jsonl");
  }
  std::filesystem::path ratings() const { return root / "feedback" / "ratings.jsonl"; }
  std::filesystem::path comparisons(const std::string& split) const {
    return root / "feedback" / ("comparisons_" + split + ".jsonl");
  }
  std::filesystem::path reward_model() const { return root / "reward" / "reward.ckpt"; }
  std::filesystem::path reward_curve() const { return root / "reward" / "reward_curve.jsonl"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path report(const std::string& stage) const {
    return reports() / ("eval_" + stage + ".json");
  }
};

inline void ensure_fresh(const std::vector<std::filesystem::path>& outputs, bool force) {
  for (const auto& path : outputs) {
    require<ConfigError>(force || !std::filesystem::exists(path), path.string(),
                         " already exists; pass --force to overwrite");
    std::filesystem::create_directories(path.parent_path());
  }
}

inline DatasetManifest load_artifact_data(const Artifacts& a) {
  require<IngestionError>(std::filesystem::exists(a.manifest()), "dataset manifest not found: ",
                          a.manifest().string(), " (run synth-gen first)");
  return load_dataset(a.manifest());
}

inline PrototypeNet load_stage_model(const Artifacts& a, const std::string& stage) {
  const auto path = a.model(stage);
  require<IngestionError>(std::filesystem::exists(path), "model checkpoint not found: ",
                          path.string());
  return load_model(path);
}

inline RewardNet load_artifact_reward(const Artifacts& a) {
  require<IngestionError>(std::filesystem::exists(a.reward_model()),
                          "reward checkpoint not found: ", a.reward_model().string());
  return load_reward(a.reward_model());
}

// Generates the synthetic dataset (or ingests a class-folder dataset), adds
// the augmented copies and writes the manifest.
inline nlohmann::json run_synth_gen(const PipelineConfig& c, bool force) {
  const Artifacts a{c.output_root};
  ensure_fresh({a.manifest()}, force);
  DatasetManifest data = c.source == "synthetic"
                             ? generate_synthetic(c.synthetic)
                             : load_folder_dataset(c.source, c.synthetic.image_size,
                                                   c.folder_test_fraction);
  if (c.augment) {
    data.augmentation_spec = default_augmentation();
    data = augment(data, c.augment_seed);
  }
  validate(data);
  save_dataset(data, a.manifest().parent_path());
  return {{"manifest", a.manifest().string()},
          {"images", data.images.size()},
          {"train_original", data.train(false).size()},
          {"train_total", data.train(true).size()},
          {"test", data.test().size()}};
}

inline nlohmann::json run_train(const PipelineConfig& c, bool force) {
  const Artifacts a{c.output_root};
  const DatasetManifest data = load_artifact_data(a);
  ensure_fresh({a.model("base"), a.train_log("base")}, force);
  ModelConfig mc = c.model;
  mc.classes = data.classes;
  mc.image_size = data.image_size;
  const TrainResult result = train(initialize_model(mc, c.model_seed, "base"), data, c.train);
  save_model(result.model, a.model("base"));
  write_jsonl(a.train_log("base"), result.log);
  return {{"checkpoint", a.model("base").string()},
          {"best_epoch", result.best_epoch},
          {"test_accuracy", result.best_test_accuracy}};
}

// Rates up to n tasks with the mask-based oracle, continuing where earlier
// runs by the same rater stopped.
inline nlohmann::json run_oracle_rate(const PipelineConfig& c, int n) {
  const Artifacts a{c.output_root};
  const DatasetManifest data = load_artifact_data(a);
  require<ValidationError>(!data.masks.empty(), "oracle rating needs a synthetic dataset with masks");
  const PrototypeNet model = load_stage_model(a, "base");
  const TaskPool pool = make_task_pool(model, data, c.feedback.pool_seed);
  std::filesystem::create_directories(a.ratings().parent_path());
  RatingStore store(a.ratings());
  int rated = 0;
  std::map<int, int> histogram;
  while (rated < n) {
    const auto task = pool.next_task(c.feedback.rater, store.records());
    if (!task) break;
    const auto sample = data.sample(task->image_id);
    require<ValidationError>(sample.has_value(), "no mask for ", task->image_id);
    const ActivationMap map =
        activation_map(model, model.prototypes.at(task->prototype_id), sample->base);
    RatingRecord record;
    record.image_id = task->image_id;
    record.prototype_id = task->prototype_id;
    record.model_id = model.model_id;
    record.rater_id = c.feedback.rater;
    record.rating = oracle_rate(*sample, map);
    store.submit(record);
    ++histogram[record.rating];
    ++rated;
  }
  nlohmann::json hist;
  for (const auto& [r, count] : histogram) hist[std::to_string(r)] = count;
  return {{"rated", rated}, {"total_ratings", store.records().size()}, {"histogram", hist}};
}

inline nlohmann::json run_build_comparisons(const PipelineConfig& c, bool force) {
  const Artifacts a{c.output_root};
  ensure_fresh({a.comparisons("train"), a.comparisons("test")}, force);
  const auto ratings = read_jsonl<RatingRecord>(a.ratings());
  const ComparisonSplit split =
      build_comparisons(ratings, c.feedback.split_seed, c.feedback.test_fraction);
  write_records(a.comparisons("train"), split.train);
  write_records(a.comparisons("test"), split.test);
  return {{"ratings", ratings.size()},
          {"train_items", split.train_items.size()},
          {"test_items", split.test_items.size()},
          {"train_pairs", split.train.size()},
          {"test_pairs", split.test.size()}};
}

// Reward inputs for comparisons over one model's activation maps.
struct RewardDataset {
  std::vector<RewardItem> items;
  std::vector<ResolvedComparison> train;
  std::vector<ResolvedComparison> test;
};

inline RewardDataset resolve_comparisons(const PrototypeNet& model, const DatasetManifest& data,
                                         const std::vector<ComparisonRecord>& train_records,
                                         const std::vector<ComparisonRecord>& test_records) {
  RewardDataset out;
  std::map<ItemKey, std::size_t> index;
  std::map<std::string, const LabeledImage*> images;
  for (const auto& image : data.images) images[image.image_id] = &image;
  auto item = [&](const ItemKey& key) {
    if (auto it = index.find(key); it != index.end()) return it->second;
    auto found = images.find(key.image_id);
    require<ValidationError>(found != images.end(), "comparison refers to unknown image ",
                             key.image_id);
    require<ValidationError>(key.prototype_id >= 0 && key.prototype_id < model.prototype_count(),
                             "comparison refers to unknown prototype ", key.prototype_id);
    const ActivationMap map =
        activation_map(model, model.prototypes[key.prototype_id], *found->second);
    out.items.push_back({key, &found->second->pixels, map.display});
    return index[key] = out.items.size() - 1;
  };
  for (const auto& r : train_records) out.train.push_back({item(r.left), item(r.right), r.c});
  for (const auto& r : test_records) out.test.push_back({item(r.left), item(r.right), r.c});
  return out;
}

inline nlohmann::json run_train_reward(const PipelineConfig& c, bool force) {
  const Artifacts a{c.output_root};
  const DatasetManifest data = load_artifact_data(a);
  const PrototypeNet model = load_stage_model(a, "base");
  ensure_fresh({a.reward_model(), a.reward_curve()}, force);
  const RewardDataset rd =
      resolve_comparisons(model, data, read_jsonl<ComparisonRecord>(a.comparisons("train")),
                          read_jsonl<ComparisonRecord>(a.comparisons("test")));
  RewardConfig rc = c.reward;
  rc.image_size = data.image_size;
  const RewardTrainResult result = train_reward(initialize_reward(rc, c.reward_train.seed),
                                                rd.items, rd.train, rd.test, c.reward_train);
  save_reward(result.net, a.reward_model());
  write_jsonl(a.reward_curve(), result.curve);
  nlohmann::json out{{"checkpoint", a.reward_model().string()}, {"epochs", result.curve.size()}};
  if (!result.curve.empty() && result.curve.back().contains("test_accuracy"))
    out["test_accuracy"] = result.curve.back()["test_accuracy"];
  return out;
}

inline nlohmann::json change_summary(const std::vector<PrototypeChange>& changes) {
  std::map<std::string, int> counts;
  int fallbacks = 0;
  for (const auto& ch : changes) {
    ++counts[ch.action];
    fallbacks += ch.fallback;
  }
  return {{"actions", counts}, {"fallbacks", fallbacks}};
}

inline nlohmann::json run_r2(const PipelineConfig& c, bool force) {
  const Artifacts a{c.output_root};
  const DatasetManifest data = load_artifact_data(a);
  const PrototypeNet base = load_stage_model(a, "base");
  const RewardNet reward = load_artifact_reward(a);
  ensure_fresh({a.model("r2"), a.changes("r2")}, force);
  const R3Outcome out = r2_update(base, reward, data.train(false), c.r3);
  save_model(out.model, a.model("r2"));
  write_records(a.changes("r2"), out.changes);
  nlohmann::json summary = change_summary(out.changes);
  summary["checkpoint"] = a.model("r2").string();
  return summary;
}

inline nlohmann::json run_r3(const PipelineConfig& c, bool force) {
  const Artifacts a{c.output_root};
  const DatasetManifest data = load_artifact_data(a);
  const PrototypeNet base = load_stage_model(a, "base");
  const RewardNet reward = load_artifact_reward(a);
  ensure_fresh({a.model("r3"), a.changes("r3"), a.train_log("r3")}, force);
  const R3Result out = r3_update(base, reward, data, c.retrain, c.r3);
  save_model(out.retrained.model, a.model("r3"));
  write_records(a.changes("r3"), out.r2.changes);
  write_jsonl(a.train_log("r3"), out.retrained.log);
  nlohmann::json summary = change_summary(out.r2.changes);
  summary["checkpoint"] = a.model("r3").string();
  summary["test_accuracy"] = out.retrained.best_test_accuracy;
  return summary;
}

inline EvalReport run_eval(const PipelineConfig& c, const std::string& stage, bool force) {
  const Artifacts a{c.output_root};
  const DatasetManifest data = load_artifact_data(a);
  const PrototypeNet model = load_stage_model(a, stage);
  const RewardNet reward = load_artifact_reward(a);
  ensure_fresh({a.report(stage)}, force);
  EvalReport report = evaluate(model, reward, data, stage);
  write_report(report, a.reports());
  return report;
}

// Members are stage names under the output root or checkpoint paths.
inline nlohmann::json run_ensemble_eval(const PipelineConfig& c,
                                        const std::vector<std::string>& members, bool force) {
  const Artifacts a{c.output_root};
  require<ValidationError>(!members.empty(), "ensemble needs at least one model");
  const DatasetManifest data = load_artifact_data(a);
  const auto out_path = a.reports() / "ensemble.json";
  ensure_fresh({out_path}, force);
  std::vector<PrototypeNet> models;
  for (const auto& m : members) {
    const std::filesystem::path path =
        std::filesystem::exists(m) ? std::filesystem::path(m) : a.model(m);
    require<IngestionError>(std::filesystem::exists(path), "model checkpoint not found: ", m);
    models.push_back(load_model(path));
  }
  std::vector<const PrototypeNet*> ptrs;
  nlohmann::json individual = nlohmann::json::object();
  for (std::size_t i = 0; i < models.size(); ++i) {
    ptrs.push_back(&models[i]);
    individual[members[i]] = accuracy(models[i], data.test());
  }
  nlohmann::json out{{"members", members},
                     {"member_test_accuracy", individual},
                     {"ensemble_test_accuracy", ensemble_accuracy(ptrs, data.test())}};
  std::ofstream file(out_path, std::ios::trunc);
  file << out.dump(2) << '\n';
  require<FormatError>(static_cast<bool>(file), "cannot write ", out_path.string());
  return out;
}

}  // namespace r3p
