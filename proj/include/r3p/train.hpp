#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/nn.hpp"
#include "r3p/protopnet.hpp"

namespace r3p {

struct TrainConfig {
  int epochs = 20;
  int warmup_epochs = 3;
  int push_period = 10;
  int batch_size = 32;
  double lr_backbone = 1e-3;
  double lr_prototypes = 3e-3;
  double lr_head = 1e-3;
  double lambda_cluster = 0.8;
  double lambda_separation = 0.08;
  double lambda_l1 = 1e-4;
  int refit_iterations = 100;  // head-only refit after every push
  double lr_refit = 1e-2;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  require<ConfigError>(c.epochs >= 0, "epochs must be non-negative");
  require<ConfigError>(c.warmup_epochs >= 0, "warm-up epochs must be non-negative");
  require<ConfigError>(c.push_period >= 1, "push period must be at least 1");
  require<ConfigError>(c.batch_size >= 1, "batch size must be at least 1");
  require<ConfigError>(c.lr_backbone > 0 && c.lr_prototypes > 0 && c.lr_head > 0 && c.lr_refit > 0,
                       "learning rates must be positive");
  require<ConfigError>(c.lambda_cluster >= 0 && c.lambda_separation >= 0 && c.lambda_l1 >= 0,
                       "loss weights must be non-negative");
  require<ConfigError>(c.refit_iterations >= 0, "refit iterations must be non-negative");
}

struct LossParts {
  double total = 0;
  double cross_entropy = 0;
  double cluster = 0;
  double separation = 0;
  double l1 = 0;
  int correct = 0;
};

struct TrainGradients {
  std::vector<double> backbone;
  std::vector<double> prototypes;  // m x D
  std::vector<double> head;        // K x m

  explicit TrainGradients(const PrototypeNet& model)
      : backbone(model.backbone.params().size(), 0.0),
        prototypes(model.prototypes.size() * static_cast<std::size_t>(model.config.depth), 0.0),
        head(model.head.weights.size(), 0.0) {}
};

inline double offclass_l1(const PrototypeNet& model) {
  double sum = 0.0;
  for (int k = 0; k < model.head.classes; ++k)
    for (int j = 0; j < model.head.prototypes; ++j)
      if (model.prototypes[j].class_id != k) sum += std::abs(model.head.at(k, j));
  return sum;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) z += p[k] = std::exp(logits[k] - top);
  for (double& v : p) v /= z;
  return p;
}

// CE + lambda_cluster * cluster - lambda_separation * separation + lambda_l1 * l1,
// where cluster/separation are batch means of the smallest squared distance
// from any latent patch to a same-class / other-class prototype. Gradients
// are accumulated when grads is non-null.
inline LossParts training_loss(const PrototypeNet& model,
                               const std::vector<const LabeledImage*>& batch,
                               const TrainConfig& config, TrainGradients* grads = nullptr) {
  require(!batch.empty(), "training batch is empty");
  const int m = model.prototype_count();
  const int depth = model.config.depth;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  LossParts parts;
  StackTrace trace;
  for (const auto* image : batch) {
    require(image->class_id >= 0 && image->class_id < model.config.classes,
            "label out of range for ", image->image_id);
    ModelOutput out = model_forward(model, *image, grads ? &trace : nullptr);
    const auto& sims = out.sims;
    const auto prob = softmax(out.logits);
    parts.cross_entropy += -std::log(std::max(prob[image->class_id], 1e-300)) * inv_batch;
    if (argmax(out.logits) == image->class_id) ++parts.correct;

    int own_best = -1, other_best = -1;
    for (int j = 0; j < m; ++j) {
      const bool own = model.prototypes[j].class_id == image->class_id;
      int& best = own ? own_best : other_best;
      if (best < 0 || sims.min_distances[j] < sims.min_distances[best]) best = j;
    }
    if (own_best >= 0) parts.cluster += sims.min_distances[own_best] * inv_batch;
    if (other_best >= 0) parts.separation += sims.min_distances[other_best] * inv_batch;
    if (!grads) continue;

    // d loss / d logits
    std::vector<double> dlogits(prob.size());
    for (std::size_t k = 0; k < prob.size(); ++k)
      dlogits[k] = (prob[k] - (static_cast<int>(k) == image->class_id ? 1.0 : 0.0)) * inv_batch;

    std::vector<double> ddist(m, 0.0);
    for (int j = 0; j < m; ++j) {
      double dsim = 0.0;
      for (int k = 0; k < model.head.classes; ++k) {
        grads->head[static_cast<std::size_t>(k) * m + j] += dlogits[k] * sims.scores[j];
        dsim += model.head.at(k, j) * dlogits[k];
      }
      ddist[j] = dsim * similarity_slope(sims.min_distances[j], model.config.eps);
    }
    if (own_best >= 0) ddist[own_best] += config.lambda_cluster * inv_batch;
    if (other_best >= 0) ddist[other_best] -= config.lambda_separation * inv_batch;

    Tensor dgrid(out.grid.channels, out.grid.height, out.grid.width);
    const std::size_t plane = out.grid.plane();
    for (int j = 0; j < m; ++j) {
      if (ddist[j] == 0.0) continue;
      const int cell = sims.argmin_cells[j];
      const auto& vec = model.prototypes[j].vector;
      for (int d = 0; d < depth; ++d) {
        const double diff = out.grid.values[d * plane + cell] - vec[d];
        dgrid.values[d * plane + cell] += 2.0 * diff * ddist[j];
        grads->prototypes[static_cast<std::size_t>(j) * depth + d] -= 2.0 * diff * ddist[j];
      }
    }
    model.backbone.backward(trace, std::move(dgrid), grads->backbone);
  }
  parts.l1 = offclass_l1(model);
  if (grads && config.lambda_l1 > 0)
    for (int k = 0; k < model.head.classes; ++k)
      for (int j = 0; j < m; ++j) {
        if (model.prototypes[j].class_id == k) continue;
        const double w = model.head.at(k, j);
        grads->head[static_cast<std::size_t>(k) * m + j] +=
            config.lambda_l1 * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0));
      }
  parts.total = parts.cross_entropy + config.lambda_cluster * parts.cluster -
                config.lambda_separation * parts.separation + config.lambda_l1 * parts.l1;
  return parts;
}

inline double accuracy(const PrototypeNet& model, const std::vector<const LabeledImage*>& images) {
  require(!images.empty(), "accuracy needs at least one image");
  int correct = 0;
  for (const auto* image : images)
    if (argmax(model_forward(model, *image).logits) == image->class_id) ++correct;
  return static_cast<double>(correct) / images.size();
}

struct RefitStats {
  double train_accuracy_before = 0;
  double train_accuracy_after = 0;
};

// Convex head-only fit (softmax regression on frozen similarity scores with
// the off-class L1 penalty), full batch.
inline RefitStats refit_head(PrototypeNet& model, const std::vector<const LabeledImage*>& images,
                             const TrainConfig& config) {
  const int m = model.prototype_count();
  const int classes = model.head.classes;
  std::vector<std::vector<double>> sims;
  sims.reserve(images.size());
  for (const auto* image : images) sims.push_back(model_forward(model, *image).sims.scores);

  auto train_acc = [&] {
    int correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (argmax(head_forward(model.head, sims[i])) == images[i]->class_id) ++correct;
    return static_cast<double>(correct) / images.size();
  };
  RefitStats stats;
  stats.train_accuracy_before = train_acc();
  Adam opt(config.lr_refit);
  std::vector<double> grad(model.head.weights.size());
  const double inv_n = 1.0 / static_cast<double>(images.size());
  for (int it = 0; it < config.refit_iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto prob = softmax(head_forward(model.head, sims[i]));
      for (int k = 0; k < classes; ++k) {
        const double dl = (prob[k] - (k == images[i]->class_id ? 1.0 : 0.0)) * inv_n;
        for (int j = 0; j < m; ++j) grad[static_cast<std::size_t>(k) * m + j] += dl * sims[i][j];
      }
    }
    for (int k = 0; k < classes; ++k)
      for (int j = 0; j < m; ++j)
        if (model.prototypes[j].class_id != k) {
          const double w = model.head.at(k, j);
          grad[static_cast<std::size_t>(k) * m + j] +=
              config.lambda_l1 * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0));
        }
    opt.step(model.head.weights, grad);
  }
  require<DivergenceError>(all_finite(model.head.weights), "head refit diverged");
  stats.train_accuracy_after = train_acc();
  return stats;
}

struct TrainResult {
  PrototypeNet model;             // best checkpoint (test accuracy at push epochs)
  std::vector<nlohmann::json> log;  // one record per epoch
  int best_epoch = -1;
  double best_test_accuracy = 0.0;
};

// Staged loop: warm-up (prototypes and head), joint epochs, a push every
// push_period epochs and at the end, each push followed by a head-only refit.
// The returned model is the best push-epoch checkpoint. With zero epochs the
// only change is the mandatory final push.
inline TrainResult train(PrototypeNet model, const DatasetManifest& data,
                         const TrainConfig& config) {
  validate(config);
  const auto train_set = data.train(true);
  const auto push_set = data.train(false);
  const auto test_set = data.test();
  require<ConfigError>(!train_set.empty() && !test_set.empty(),
                       "training needs train and test images");

  TrainResult result;
  if (config.epochs == 0) {
    model.prototypes = push_prototypes(model, push_set);
    result.best_test_accuracy = accuracy(model, test_set);
    result.log.push_back({{"epoch", 0},
                          {"stage", "push_only"},
                          {"pushed", true},
                          {"test_accuracy", result.best_test_accuracy}});
    result.best_epoch = 0;
    result.model = std::move(model);
    return result;
  }

  Adam opt_backbone(config.lr_backbone), opt_prototypes(config.lr_prototypes),
      opt_head(config.lr_head);
  std::vector<double> proto_flat;
  std::vector<std::size_t> order(train_set.size());
  std::optional<PrototypeNet> best;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const bool warm = epoch < config.warmup_epochs;
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    LossParts sum;
    int seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::vector<const LabeledImage*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
        batch.push_back(train_set[order[i]]);
      TrainGradients grads(model);
      const LossParts parts = training_loss(model, batch, config, &grads);
      if (!std::isfinite(parts.total) || !all_finite(grads.backbone) ||
          !all_finite(grads.prototypes) || !all_finite(grads.head))
        throw DivergenceError(concat("non-finite loss at epoch ", epoch, ", batch starting ", start,
                                     ": ce=", parts.cross_entropy, " cluster=", parts.cluster,
                                     " separation=", parts.separation));
      if (!warm) opt_backbone.step(model.backbone.params(), grads.backbone);
      proto_flat.clear();
      for (const auto& p : model.prototypes) proto_flat.insert(proto_flat.end(), p.vector.begin(), p.vector.end());
      opt_prototypes.step(proto_flat, grads.prototypes);
      for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
        auto& v = model.prototypes[j].vector;
        std::copy_n(proto_flat.begin() + static_cast<std::ptrdiff_t>(j * v.size()), v.size(), v.begin());
        model.prototypes[j].source.reset();
      }
      opt_head.step(model.head.weights, grads.head);

      const double w = static_cast<double>(batch.size());
      sum.total += parts.total * w;
      sum.cross_entropy += parts.cross_entropy * w;
      sum.cluster += parts.cluster * w;
      sum.separation += parts.separation * w;
      sum.l1 = parts.l1;
      sum.correct += parts.correct;
      seen += static_cast<int>(batch.size());
    }

    nlohmann::json record{{"epoch", epoch + 1},
                          {"stage", warm ? "warmup" : "joint"},
                          {"loss", sum.total / seen},
                          {"ce", sum.cross_entropy / seen},
                          {"cluster", sum.cluster / seen},
                          {"separation", sum.separation / seen},
                          {"l1", sum.l1},
                          {"train_accuracy", static_cast<double>(sum.correct) / seen}};
    const bool push_now = (epoch + 1) % config.push_period == 0 || epoch + 1 == config.epochs;
    record["pushed"] = push_now;
    if (push_now) {
      model.prototypes = push_prototypes(model, push_set);
      const RefitStats refit = refit_head(model, train_set, config);
      const double test_acc = accuracy(model, test_set);
      record["refit_train_accuracy_before"] = refit.train_accuracy_before;
      record["refit_train_accuracy_after"] = refit.train_accuracy_after;
      record["test_accuracy"] = test_acc;
      if (!best || test_acc > result.best_test_accuracy) {
        best = model;
        result.best_test_accuracy = test_acc;
        result.best_epoch = epoch + 1;
      }
    }
    result.log.push_back(std::move(record));
  }
  result.model = std::move(*best);
  return result;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  std::ofstream out(path, std::ios::trunc);
  require<FormatError>(static_cast<bool>(out), "cannot write ", path.string());
  for (const auto& r : records) out << r.dump() << '\n';
  require<FormatError>(static_cast<bool>(out), "write failed for ", path.string());
}

}  // namespace r3p
