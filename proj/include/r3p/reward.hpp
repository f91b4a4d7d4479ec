#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/feedback.hpp"
#include "r3p/nn.hpp"
#include "r3p/protopnet.hpp"
#include "r3p/serialize.hpp"

namespace r3p {

struct RewardConfig {
  int image_size = 64;
  std::vector<int> widths{8, 16, 16};  // per tower; a 2x2 pool follows all but the last
  int fusion_channels = 16;
};

inline void validate(const RewardConfig& c) {
  require<ConfigError>(c.image_size >= 4, "reward image size must be at least 4");
  require<ConfigError>(!c.widths.empty(), "reward towers need at least one layer");
  for (int w : c.widths) require<ConfigError>(w >= 1, "reward tower widths must be positive");
  require<ConfigError>(c.fusion_channels >= 1, "fusion channels must be positive");
  require<ConfigError>((c.image_size >> (c.widths.size() - 1)) >= 1,
                       "too many pooling stages for image size ", c.image_size);
}

// Image tower and heatmap tower, concatenated along channels, mixed by a 1x1
// ReLU convolution, averaged over space and mapped to (0,1) by a linear layer
// and a sigmoid.
struct RewardNet {
  RewardConfig config;
  ConvStack image_tower;
  ConvStack heat_tower;
  std::vector<double> head;  // fusion W (F x C), fusion b (F), linear v (F), linear c

  int fused_inputs() const { return image_tower.out_channels() + heat_tower.out_channels(); }
  std::size_t fusion_bias_offset() const {
    return static_cast<std::size_t>(config.fusion_channels) * fused_inputs();
  }
  std::size_t linear_offset() const { return fusion_bias_offset() + config.fusion_channels; }
  std::size_t linear_bias_offset() const { return linear_offset() + config.fusion_channels; }
};

inline std::vector<LayerSpec> reward_tower_layers(const RewardConfig& c) {
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < c.widths.size(); ++i) {
    layers.push_back(LayerSpec::conv(c.widths[i], 3, Activation::relu));
    if (i + 1 < c.widths.size()) layers.push_back(LayerSpec::pool());
  }
  return layers;
}

inline RewardNet initialize_reward(const RewardConfig& config, std::uint64_t seed) {
  validate(config);
  RewardNet net;
  net.config = config;
  net.image_tower = ConvStack(3, reward_tower_layers(config));
  net.heat_tower = ConvStack(1, reward_tower_layers(config));
  Rng rng(derive_seed(seed, 51));
  net.image_tower.initialize(rng);
  net.heat_tower.initialize(rng);
  const int F = config.fusion_channels;
  const int C = net.fused_inputs();
  net.head.assign(net.linear_bias_offset() + 1, 0.0);
  std::normal_distribution<double> fusion(0.0, std::sqrt(2.0 / C));
  for (std::size_t k = 0; k < net.fusion_bias_offset(); ++k) net.head[k] = fusion(rng);
  std::normal_distribution<double> linear(0.0, std::sqrt(1.0 / F));
  for (int f = 0; f < F; ++f) net.head[net.linear_offset() + f] = linear(rng);
  return net;
}

struct RewardGradients {
  std::vector<double> image_tower;
  std::vector<double> heat_tower;
  std::vector<double> head;

  explicit RewardGradients(const RewardNet& net)
      : image_tower(net.image_tower.params().size(), 0.0),
        heat_tower(net.heat_tower.params().size(), 0.0),
        head(net.head.size(), 0.0) {}
};

struct RewardTrace {
  StackTrace image;
  StackTrace heat;
  RowMatrix fused;   // C x HW
  RowMatrix hidden;  // F x HW after ReLU
  std::vector<double> pooled;
  double score = 0;
};

inline Tensor heat_tensor(const Grid& display) {
  Tensor t(1, display.height, display.width);
  t.values = display.values;
  return t;
}

// Reward in (0,1) for an image and the normalized activation map shown with it.
inline double reward_forward(const RewardNet& net, const Tensor& image, const Grid& display,
                             RewardTrace* trace = nullptr) {
  const int S = net.config.image_size;
  require(image.channels == 3 && image.height == S && image.width == S,
          "reward model expects 3x", S, "x", S, " images");
  require(display.height == S && display.width == S, "reward model expects ", S, "x", S,
          " heatmaps");
  const Tensor a = net.image_tower.forward(image, trace ? &trace->image : nullptr);
  const Tensor b = net.heat_tower.forward(heat_tensor(display), trace ? &trace->heat : nullptr);
  const int hw = static_cast<int>(a.plane());
  const int C = net.fused_inputs();
  const int F = net.config.fusion_channels;
  RowMatrix fused(C, hw);
  fused.topRows(a.channels) = ConstRowMatrixMap(a.values.data(), a.channels, hw);
  fused.bottomRows(b.channels) = ConstRowMatrixMap(b.values.data(), b.channels, hw);
  ConstRowMatrixMap W(net.head.data(), F, C);
  Eigen::Map<const Eigen::VectorXd> bias(net.head.data() + net.fusion_bias_offset(), F);
  RowMatrix hidden = W * fused;
  hidden.colwise() += bias;
  hidden = hidden.cwiseMax(0.0);
  std::vector<double> pooled(F);
  double logit = net.head[net.linear_bias_offset()];
  for (int f = 0; f < F; ++f) {
    pooled[f] = hidden.row(f).mean();
    logit += net.head[net.linear_offset() + f] * pooled[f];
  }
  const double score = sigmoid(logit);
  if (trace) {
    trace->fused = std::move(fused);
    trace->hidden = std::move(hidden);
    trace->pooled = std::move(pooled);
    trace->score = score;
  }
  return score;
}

// Accumulates d(dscore * score)/d(params) into grads.
inline void reward_backward(const RewardNet& net, const RewardTrace& trace, double dscore,
                            RewardGradients& grads) {
  const int F = net.config.fusion_channels;
  const int C = net.fused_inputs();
  const auto hw = trace.hidden.cols();
  const double dlogit = dscore * trace.score * (1.0 - trace.score);
  grads.head[net.linear_bias_offset()] += dlogit;
  RowMatrix dhidden(F, hw);
  for (int f = 0; f < F; ++f) {
    grads.head[net.linear_offset() + f] += dlogit * trace.pooled[f];
    const double dpool = dlogit * net.head[net.linear_offset() + f] / static_cast<double>(hw);
    for (Eigen::Index k = 0; k < hw; ++k)
      dhidden(f, k) = trace.hidden(f, k) > 0.0 ? dpool : 0.0;
  }
  RowMatrixMap dW(grads.head.data(), F, C);
  dW.noalias() += dhidden * trace.fused.transpose();
  Eigen::Map<Eigen::VectorXd> dbias(grads.head.data() + net.fusion_bias_offset(), F);
  dbias += dhidden.rowwise().sum();
  ConstRowMatrixMap W(net.head.data(), F, C);
  const RowMatrix dfused = W.transpose() * dhidden;

  const int ca = net.image_tower.out_channels();
  const auto side = trace.image.outputs.back().height;
  Tensor da(ca, side, trace.image.outputs.back().width);
  RowMatrixMap(da.values.data(), ca, hw) = dfused.topRows(ca);
  Tensor db(C - ca, side, trace.heat.outputs.back().width);
  RowMatrixMap(db.values.data(), C - ca, hw) = dfused.bottomRows(C - ca);
  net.image_tower.backward(trace.image, std::move(da), grads.image_tower);
  net.heat_tower.backward(trace.heat, std::move(db), grads.heat_tower);
}

// P(left preferred over right) = exp(r_l) / (exp(r_l) + exp(r_r)).
inline double pair_probability(double left_score, double right_score) {
  return sigmoid(left_score - right_score);
}

// What the reward model scores: an image with the activation map of one
// prototype drawn on it.
struct RewardItem {
  ItemKey key;
  const Tensor* image = nullptr;
  Grid display;
};

// Comparison with both sides resolved to indices into an item table.
struct ResolvedComparison {
  std::size_t left = 0;
  std::size_t right = 0;
  int c = 0;
};

struct BtLoss {
  double loss = 0;  // mean negative log-likelihood
  int pairs = 0;
};

// Mean Bradley-Terry negative log-likelihood of the observed preferences.
// Each distinct item is scored once; with grads non-null the parameter
// gradient of the mean loss is accumulated.
inline BtLoss bt_loss(const RewardNet& net, const std::vector<RewardItem>& items,
                      std::span<const ResolvedComparison> batch,
                      RewardGradients* grads = nullptr) {
  require(!batch.empty(), "comparison batch is empty");
  std::map<std::size_t, std::size_t> slot;  // item index -> position in used
  std::vector<std::size_t> used;
  for (const auto& cmp : batch) {
    require(cmp.c == -1 || cmp.c == 1, "comparison label must be -1 or +1");
    require(cmp.left < items.size() && cmp.right < items.size(), "comparison item out of range");
    for (std::size_t i : {cmp.left, cmp.right})
      if (slot.emplace(i, used.size()).second) used.push_back(i);
  }
  std::vector<RewardTrace> traces(grads ? used.size() : 0);
  std::vector<double> scores(used.size());
  for (std::size_t u = 0; u < used.size(); ++u) {
    const auto& item = items[used[u]];
    scores[u] = reward_forward(net, *item.image, item.display, grads ? &traces[u] : nullptr);
  }
  std::vector<double> dscore(used.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  BtLoss out;
  out.pairs = static_cast<int>(batch.size());
  for (const auto& cmp : batch) {
    std::size_t win = slot[cmp.left], lose = slot[cmp.right];
    if (cmp.c == 1) std::swap(win, lose);
    // -log sigmoid(r_w - r_l) = softplus(r_l - r_w)
    const double margin = scores[lose] - scores[win];
    out.loss += (margin > 0 ? margin + std::log1p(std::exp(-margin))
                            : std::log1p(std::exp(margin))) * inv;
    const double g = sigmoid(margin) * inv;
    dscore[win] -= g;
    dscore[lose] += g;
  }
  if (grads)
    for (std::size_t u = 0; u < used.size(); ++u)
      if (dscore[u] != 0.0) reward_backward(net, traces[u], dscore[u], *grads);
  return out;
}

inline std::vector<double> score_items(const RewardNet& net, const std::vector<RewardItem>& items) {
  std::vector<double> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(reward_forward(net, *item.image, item.display));
  return out;
}

// Fraction of comparisons whose preferred side gets probability > 0.5. A
// probability of exactly 0.5 counts as wrong.
inline double ranking_accuracy_from_scores(std::span<const double> scores,
                                           std::span<const ResolvedComparison> comparisons) {
  require(!comparisons.empty(), "no comparisons to score");
  int correct = 0;
  for (const auto& cmp : comparisons) {
    const double p_left = pair_probability(scores[cmp.left], scores[cmp.right]);
    const double p_preferred = cmp.c == -1 ? p_left : pair_probability(scores[cmp.right],
                                                                       scores[cmp.left]);
    if (p_preferred > 0.5) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(comparisons.size());
}

inline double ranking_accuracy(const RewardNet& net, const std::vector<RewardItem>& items,
                               std::span<const ResolvedComparison> comparisons) {
  return ranking_accuracy_from_scores(score_items(net, items), comparisons);
}

struct RewardTrainConfig {
  int epochs = 30;
  int batch_items = 64;  // items per step; a step uses the comparisons among them
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
};

inline void validate(const RewardTrainConfig& c) {
  require<ConfigError>(c.epochs >= 1, "reward training needs at least one epoch");
  require<ConfigError>(c.batch_items >= 2, "reward batches need at least two items");
  require<ConfigError>(c.learning_rate > 0, "reward learning rate must be positive");
}

struct RewardTrainResult {
  RewardNet net;
  std::vector<nlohmann::json> curve;  // per epoch: loss, train and held-out accuracy
};

inline RewardTrainResult train_reward(RewardNet net, const std::vector<RewardItem>& items,
                                      const std::vector<ResolvedComparison>& train_set,
                                      const std::vector<ResolvedComparison>& test_set,
                                      const RewardTrainConfig& config) {
  validate(config);
  require<ValidationError>(!train_set.empty(), "no training comparisons");
  Rng rng(derive_seed(config.seed, 61));
  Adam opt_image(config.learning_rate), opt_heat(config.learning_rate),
      opt_head(config.learning_rate);
  std::vector<std::size_t> pool;
  for (const auto& cmp : train_set) pool.insert(pool.end(), {cmp.left, cmp.right});
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  std::vector<int> group(items.size(), -1);
  RewardTrainResult result;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    const int groups = static_cast<int>((pool.size() + config.batch_items - 1) / config.batch_items);
    for (std::size_t u = 0; u < pool.size(); ++u) group[pool[u]] = static_cast<int>(u) / config.batch_items;
    std::vector<std::vector<ResolvedComparison>> batches(groups);
    for (const auto& cmp : train_set)
      if (group[cmp.left] == group[cmp.right]) batches[group[cmp.left]].push_back(cmp);
    double loss = 0;
    std::size_t pairs = 0;
    for (const auto& batch : batches) {
      if (batch.empty()) continue;
      RewardGradients grads(net);
      const BtLoss step = bt_loss(net, items, batch, &grads);
      require<DivergenceError>(std::isfinite(step.loss) && all_finite(grads.head) &&
                                   all_finite(grads.image_tower) && all_finite(grads.heat_tower),
                               "reward training diverged at epoch ", epoch);
      loss += step.loss * static_cast<double>(batch.size());
      pairs += batch.size();
      opt_image.step(net.image_tower.params(), grads.image_tower);
      opt_heat.step(net.heat_tower.params(), grads.heat_tower);
      opt_head.step(net.head, grads.head);
    }
    const auto scores = score_items(net, items);
    require<DivergenceError>(all_finite(scores), "reward scores diverged at epoch ", epoch);
    nlohmann::json record{{"epoch", epoch},
                          {"train_loss", pairs ? loss / static_cast<double>(pairs) : 0.0},
                          {"train_accuracy", ranking_accuracy_from_scores(scores, train_set)}};
    if (!test_set.empty())
      record["test_accuracy"] = ranking_accuracy_from_scores(scores, test_set);
    result.curve.push_back(std::move(record));
  }
  result.net = std::move(net);
  return result;
}

// Mean reward of a prototype vector over a set of images, given their latent
// grids from the prototype network.
inline double mean_reward(const RewardNet& net, std::span<const double> vector,
                          const std::vector<const LabeledImage*>& images,
                          const std::vector<const Tensor*>& latents, double eps) {
  require(!images.empty(), "mean reward needs at least one image");
  require(images.size() == latents.size(), "image/latent count mismatch");
  double sum = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ActivationMap map =
        activation_map_from_grid(*latents[i], vector, eps, net.config.image_size);
    sum += reward_forward(net, images[i]->pixels, map.display);
  }
  return sum / static_cast<double>(images.size());
}

// Mean reward of a prototype over the given images; they are usually the
// prototype's own-class training images.
inline double prototype_mean_reward(const RewardNet& net, const PrototypeNet& model,
                                    const Prototype& proto,
                                    const std::vector<const LabeledImage*>& images) {
  require(!images.empty(), "prototype ", proto.prototype_id, " has no images to score");
  const auto grids = compute_latents(model, images);
  std::vector<const Tensor*> latents;
  for (const auto& g : grids) latents.push_back(&g);
  return mean_reward(net, proto.vector, images, latents, model.config.eps);
}

inline constexpr std::uint32_t kRewardFormatVersion = 1;

inline void save_reward(const RewardNet& net, const std::filesystem::path& path) {
  BinaryWriter out(path);
  write_magic(out, "R3PREW", kRewardFormatVersion);
  out.write<std::int32_t>(net.config.image_size);
  out.write<std::uint32_t>(static_cast<std::uint32_t>(net.config.widths.size()));
  for (int w : net.config.widths) out.write<std::int32_t>(w);
  out.write<std::int32_t>(net.config.fusion_channels);
  out.write(net.image_tower);
  out.write(net.heat_tower);
  out.write(net.head);
  out.finish();
}

inline RewardNet load_reward(const std::filesystem::path& path) {
  BinaryReader in(path);
  in.expect_magic("R3PREW", kRewardFormatVersion);
  RewardNet net;
  net.config.image_size = in.read<std::int32_t>();
  const auto n = in.read<std::uint32_t>();
  require<FormatError>(n >= 1 && n < 32, "corrupt reward tower depth in ", path.string());
  net.config.widths.resize(n);
  for (auto& w : net.config.widths) w = in.read<std::int32_t>();
  net.config.fusion_channels = in.read<std::int32_t>();
  net.image_tower = in.read_stack();
  net.heat_tower = in.read_stack();
  net.head = in.read_doubles();
  in.expect_end();
  require<FormatError>(net.head.size() == net.linear_bias_offset() + 1,
                       "reward head size mismatch in ", path.string());
  return net;
}

}  // namespace r3p
