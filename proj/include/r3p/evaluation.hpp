#pragma once

#include <json.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/image_io.hpp"
#include "r3p/protopnet.hpp"
#include "r3p/reward.hpp"
#include "r3p/train.hpp"

namespace r3p {

inline double test_accuracy(const PrototypeNet& model, const DatasetManifest& data) {
  return accuracy(model, data.test());
}

inline constexpr int kHistogramBins = 20;

struct RewardSummary {
  double mean = 0;
  int pairs = 0;
  std::vector<int> histogram = std::vector<int>(kHistogramBins, 0);  // bins over [0,1]
};

inline int histogram_bin(double score) {
  return std::clamp(static_cast<int>(score * kHistogramBins), 0, kHistogramBins - 1);
}

// Reward over every class-matched (test image, prototype) pair.
inline RewardSummary mean_test_reward(const PrototypeNet& model, const RewardNet& reward,
                                      const std::vector<const LabeledImage*>& test_set) {
  RewardSummary out;
  double sum = 0;
  for (const auto* image : test_set) {
    const Tensor grid = backbone_forward(model, *image);
    for (const auto& p : model.prototypes) {
      if (p.class_id != image->class_id) continue;
      const auto map =
          activation_map_from_grid(grid, p.vector, model.config.eps, reward.config.image_size);
      const double r = reward_forward(reward, image->pixels, map.display);
      sum += r;
      ++out.histogram[histogram_bin(r)];
      ++out.pairs;
    }
  }
  require<ValidationError>(out.pairs > 0, "no class-matched test pairs to score");
  out.mean = sum / out.pairs;
  return out;
}

// Mean over prototypes of the number of other-class images among the L
// training images closest to the prototype.
inline double class_mismatch(const PrototypeNet& model,
                             const std::vector<const LabeledImage*>& train_set, int L) {
  require<ValidationError>(!model.prototypes.empty(), "model has no prototypes");
  const auto latents = compute_latents(model, train_set);
  double sum = 0;
  for (const auto& p : model.prototypes) sum += top_l_mismatch(p, latents, train_set, L);
  return sum / static_cast<double>(model.prototypes.size());
}

// Fraction of prototypes whose upsampled activation peak falls inside the
// object mask on at least half of their own-class test images.
inline double object_peak_fraction(const PrototypeNet& model, const DatasetManifest& data) {
  const auto test_set = data.test();
  std::vector<int> inside(model.prototypes.size(), 0), total(model.prototypes.size(), 0);
  for (const auto* image : test_set) {
    const ObjectMask* mask = data.mask(image->image_id);
    require<ValidationError>(mask != nullptr, "image ", image->image_id, " has no object mask");
    const Tensor grid = backbone_forward(model, *image);
    for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
      const auto& p = model.prototypes[j];
      if (p.class_id != image->class_id) continue;
      const auto map =
          activation_map_from_grid(grid, p.vector, model.config.eps, model.config.image_size);
      const auto peak = std::max_element(map.upsampled.values.begin(),
                                         map.upsampled.values.end()) -
                        map.upsampled.values.begin();
      inside[j] += mask->cells[peak] ? 1 : 0;
      ++total[j];
    }
  }
  int hits = 0;
  for (std::size_t j = 0; j < inside.size(); ++j) hits += total[j] > 0 && 2 * inside[j] >= total[j];
  return static_cast<double>(hits) / static_cast<double>(model.prototypes.size());
}

// Mean of the members' logits.
inline std::vector<double> ensemble_predict(const std::vector<const PrototypeNet*>& models,
                                            const LabeledImage& image) {
  require(!models.empty(), "ensemble needs at least one model");
  std::vector<double> sum(models.front()->config.classes, 0.0);
  for (const auto* model : models) {
    require(model->config.classes == static_cast<int>(sum.size()),
            "ensemble members disagree on class count: ", model->config.classes, " vs ",
            sum.size());
    const auto logits = model_forward(*model, image).logits;
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += logits[k];
  }
  for (double& v : sum) v /= static_cast<double>(models.size());
  return sum;
}

inline double ensemble_accuracy(const std::vector<const PrototypeNet*>& models,
                                const std::vector<const LabeledImage*>& images) {
  require(!images.empty(), "ensemble accuracy needs images");
  int correct = 0;
  for (const auto* image : images)
    correct += argmax(ensemble_predict(models, *image)) == image->class_id;
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

struct EvalReport {
  std::string model_id;
  std::string stage;  // base | r2 | r3 | ...
  double test_accuracy = 0;
  RewardSummary reward;
  double mismatch_top5 = 0;
  double mismatch_top10 = 0;
  std::optional<double> object_peak_fraction;  // synthetic data only
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"model_id", r.model_id},
       {"stage", r.stage},
       {"test_accuracy", r.test_accuracy},
       {"mean_reward", r.reward.mean},
       {"scored_pairs", r.reward.pairs},
       {"reward_histogram", r.reward.histogram},
       {"mismatch_top5", r.mismatch_top5},
       {"mismatch_top10", r.mismatch_top10}};
  if (r.object_peak_fraction) j["object_peak_fraction"] = *r.object_peak_fraction;
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.model_id = j.at("model_id").get<std::string>();
  r.stage = j.at("stage").get<std::string>();
  r.test_accuracy = j.at("test_accuracy").get<double>();
  r.reward.mean = j.at("mean_reward").get<double>();
  r.reward.pairs = j.at("scored_pairs").get<int>();
  r.reward.histogram = j.at("reward_histogram").get<std::vector<int>>();
  r.mismatch_top5 = j.at("mismatch_top5").get<double>();
  r.mismatch_top10 = j.at("mismatch_top10").get<double>();
  if (j.contains("object_peak_fraction"))
    r.object_peak_fraction = j.at("object_peak_fraction").get<double>();
}

inline EvalReport evaluate(const PrototypeNet& model, const RewardNet& reward,
                           const DatasetManifest& data, const std::string& stage) {
  EvalReport r;
  r.model_id = model.model_id;
  r.stage = stage;
  const auto test_set = data.test();
  const auto train_set = data.train(false);
  r.test_accuracy = accuracy(model, test_set);
  r.reward = mean_test_reward(model, reward, test_set);
  const auto latents = compute_latents(model, train_set);
  auto mismatch = [&](int L) {
    double sum = 0;
    for (const auto& p : model.prototypes) sum += top_l_mismatch(p, latents, train_set, L);
    return sum / static_cast<double>(model.prototypes.size());
  };
  r.mismatch_top5 = mismatch(5);
  r.mismatch_top10 = mismatch(10);
  if (!data.masks.empty()) r.object_peak_fraction = object_peak_fraction(model, data);
  return r;
}

inline void write_histogram_png(const RewardSummary& summary, const std::filesystem::path& path) {
  const int bar = 20, height = 200, margin = 10;
  cv::Mat canvas(height + 2 * margin, kHistogramBins * bar + 2 * margin, CV_8UC3,
                 cv::Scalar(255, 255, 255));
  const int top = std::max(1, *std::max_element(summary.histogram.begin(), summary.histogram.end()));
  for (int b = 0; b < kHistogramBins; ++b) {
    const int h = summary.histogram[b] * height / top;
    cv::rectangle(canvas, cv::Point(margin + b * bar + 1, margin + height - h),
                  cv::Point(margin + (b + 1) * bar - 2, margin + height),
                  cv::Scalar(180, 110, 40), cv::FILLED);
  }
  cv::line(canvas, cv::Point(margin, margin + height),
           cv::Point(margin + kHistogramBins * bar, margin + height), cv::Scalar(0, 0, 0));
  write_png(path, canvas);
}

// Writes eval_<stage>.json and eval_<stage>_hist.png into dir, then rebuilds
// stages.csv from every eval_*.json there, one row per stage.
inline void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / ("eval_" + report.stage + ".json"), std::ios::trunc);
    out << nlohmann::json(report).dump(2) << "\n";
    require<FormatError>(static_cast<bool>(out), "cannot write report in ", dir.string());
  }
  write_histogram_png(report.reward, dir / ("eval_" + report.stage + "_hist.png"));

  std::map<std::string, EvalReport> stages;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (!name.starts_with("eval_") || entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    EvalReport r = nlohmann::json::parse(in).get<EvalReport>();
    stages[r.stage] = std::move(r);
  }
  const std::vector<std::string> order{"base", "r2", "r3"};
  std::vector<std::string> keys;
  for (const auto& s : order)
    if (stages.contains(s)) keys.push_back(s);
  for (const auto& [s, r] : stages)
    if (std::find(order.begin(), order.end(), s) == order.end()) keys.push_back(s);

  std::ofstream csv(dir / "stages.csv", std::ios::trunc);
  csv << "stage,model_id,test_accuracy,mean_reward,mismatch_top5,mismatch_top10,object_peak_fraction\n";
  for (const auto& s : keys) {
    const auto& r = stages[s];
    csv << r.stage << ',' << r.model_id << ',' << r.test_accuracy << ',' << r.reward.mean << ','
        << r.mismatch_top5 << ',' << r.mismatch_top10 << ',';
    if (r.object_peak_fraction) csv << *r.object_peak_fraction;
    csv << '\n';
  }
}

}  // namespace r3p
