#pragma once

#include <json.hpp>

#include <cmath>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/protopnet.hpp"
#include "r3p/reward.hpp"
#include "r3p/train.hpp"

namespace r3p {

struct R3Config {
  double gamma = 0.45;       // reweigh gate
  double alpha = 0.15;       // reselection trigger
  double beta = 0.50;        // reselection acceptance
  double lambda_dist = 100;  // distance scale in the reweigh objective
  int reweigh_steps = 50;
  double step_size = 0.05;
  int max_halvings = 12;
  int max_candidates = 200;
  std::uint64_t seed = 0;
};

inline void validate(const R3Config& c) {
  require<ConfigError>(c.alpha > 0 && c.alpha < c.beta && c.beta <= 1,
                       "thresholds must satisfy 0 < alpha < beta <= 1");
  require<ConfigError>(c.gamma > c.alpha && c.gamma < 1, "gamma must lie in (alpha, 1)");
  require<ConfigError>(c.lambda_dist > 0, "lambda_dist must be positive");
  require<ConfigError>(c.reweigh_steps >= 0 && c.step_size > 0 && c.max_halvings >= 0,
                       "invalid reweigh step settings");
  require<ConfigError>(c.max_candidates >= 1, "need at least one reselection candidate");
}

// Own-class training images of every class with their (frozen) latent grids.
// The backbone does not change during reweighing and reselection, so grids
// are computed once.
struct ClassContext {
  std::vector<std::vector<const LabeledImage*>> images;
  std::vector<std::vector<Tensor>> latents;

  ClassContext(const PrototypeNet& model, const std::vector<const LabeledImage*>& train_set)
      : images(model.config.classes), latents(model.config.classes) {
    for (const auto* image : train_set) {
      require(image->class_id >= 0 && image->class_id < model.config.classes,
              "image class out of range: ", image->image_id);
      images[image->class_id].push_back(image);
      latents[image->class_id].push_back(backbone_forward(model, *image));
    }
  }

  std::vector<const Tensor*> latent_ptrs(int k) const {
    std::vector<const Tensor*> out;
    for (const auto& g : latents[k]) out.push_back(&g);
    return out;
  }
};

inline double class_mean_reward(const RewardNet& reward, const PrototypeNet& model,
                                const ClassContext& ctx, int k, std::span<const double> vector) {
  require<ValidationError>(!ctx.images[k].empty(), "class ", k, " has no training images");
  return mean_reward(reward, vector, ctx.images[k], ctx.latent_ptrs(k), model.config.eps);
}

struct ReweighValue {
  double value = 0;
  std::vector<double> gradient;  // d value / d prototype
};

// sum_i r_i / (lambda * ||z_i* - p||^2 + 1), z_i* the closest patch of image i.
// Rewards are constants here.
inline ReweighValue reweigh_objective(std::span<const double> proto,
                                      const std::vector<const Tensor*>& latents,
                                      std::span<const double> rewards, double lambda_dist) {
  require(!latents.empty(), "reweigh objective needs at least one image");
  require(latents.size() == rewards.size(), "one reward per image required");
  require(lambda_dist > 0, "lambda_dist must be positive");
  ReweighValue out;
  out.gradient.assign(proto.size(), 0.0);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const Tensor& grid = *latents[i];
    const NearestPatch z = nearest_patch(grid, proto);
    const double denom = lambda_dist * z.squared_distance + 1.0;
    out.value += rewards[i] / denom;
    const double scale = 2.0 * rewards[i] * lambda_dist / (denom * denom);
    for (std::size_t d = 0; d < proto.size(); ++d)
      out.gradient[d] += scale * (grid.values[d * grid.plane() + z.cell] - proto[d]);
  }
  return out;
}

// Per-prototype record of what the R3 steps did.
struct PrototypeChange {
  int prototype_id = 0;
  std::string action = "kept";  // kept | reweighed | reselected
  double mean_reward_before = 0;
  double mean_reward_after = 0;
  std::optional<PatchSource> source_before;
  std::optional<PatchSource> source_after;
  bool reweigh_triggered = false;
  bool reselect_triggered = false;
  bool duplicate = false;
  bool fallback = false;
  int accepted_steps = 0;
  int candidates_tried = 0;
  std::vector<double> objective_trace;  // objective after each accepted step, starting value first
  std::string note;
};

inline nlohmann::json source_json(const std::optional<PatchSource>& s) {
  if (!s) return nullptr;
  return {{"image_id", s->image_id}, {"row", s->row}, {"col", s->col}};
}

inline void to_json(nlohmann::json& j, const PrototypeChange& c) {
  j = {{"prototype_id", c.prototype_id},
       {"action", c.action},
       {"mean_reward_before", c.mean_reward_before},
       {"mean_reward_after", c.mean_reward_after},
       {"source_before", source_json(c.source_before)},
       {"source_after", source_json(c.source_after)},
       {"reweigh_triggered", c.reweigh_triggered},
       {"reselect_triggered", c.reselect_triggered},
       {"duplicate", c.duplicate},
       {"fallback", c.fallback},
       {"accepted_steps", c.accepted_steps},
       {"candidates_tried", c.candidates_tried}};
  if (!c.note.empty()) j["note"] = c.note;
}

struct R3Outcome {
  PrototypeNet model;
  std::vector<PrototypeChange> changes;
};

inline std::vector<PrototypeChange> fresh_changes(const PrototypeNet& model) {
  std::vector<PrototypeChange> out;
  for (const auto& p : model.prototypes) {
    PrototypeChange c;
    c.prototype_id = p.prototype_id;
    c.source_before = c.source_after = p.source;
    out.push_back(std::move(c));
  }
  return out;
}

// Gradient ascent on the reweigh objective for every prototype whose mean
// reward is below gamma. Only prototype vectors change.
inline R3Outcome reweigh_update(const PrototypeNet& model, const RewardNet& reward,
                                const std::vector<const LabeledImage*>& train_set,
                                const R3Config& config) {
  validate(config);
  const ClassContext ctx(model, train_set);
  R3Outcome out{model, fresh_changes(model)};
  for (std::size_t j = 0; j < out.model.prototypes.size(); ++j) {
    Prototype& proto = out.model.prototypes[j];
    PrototypeChange& change = out.changes[j];
    const int k = proto.class_id;
    const auto latents = ctx.latent_ptrs(k);
    change.mean_reward_before = class_mean_reward(reward, model, ctx, k, proto.vector);
    change.mean_reward_after = change.mean_reward_before;
    if (!(change.mean_reward_before < config.gamma)) continue;
    change.reweigh_triggered = true;

    std::vector<double> p = proto.vector;
    auto rewards_at = [&](std::span<const double> v) {
      std::vector<double> r;
      for (std::size_t i = 0; i < latents.size(); ++i) {
        const auto map = activation_map_from_grid(*latents[i], v, model.config.eps,
                                                  reward.config.image_size);
        r.push_back(reward_forward(reward, ctx.images[k][i]->pixels, map.display));
      }
      return r;
    };
    bool diverged = false;
    for (int step = 0; step < config.reweigh_steps; ++step) {
      const auto rewards = rewards_at(p);
      const ReweighValue current = reweigh_objective(p, latents, rewards, config.lambda_dist);
      if (!std::isfinite(current.value) || !all_finite(current.gradient)) {
        diverged = true;
        break;
      }
      if (step == 0) change.objective_trace.push_back(current.value);
      double eta = config.step_size;
      bool accepted = false;
      std::vector<double> candidate(p.size());
      for (int h = 0; h <= config.max_halvings && !accepted; ++h, eta *= 0.5) {
        for (std::size_t d = 0; d < p.size(); ++d) candidate[d] = p[d] + eta * current.gradient[d];
        const double value =
            reweigh_objective(candidate, latents, rewards, config.lambda_dist).value;
        accepted = std::isfinite(value) && value >= current.value && candidate != p;
        if (accepted) change.objective_trace.push_back(value);
      }
      if (!accepted) break;
      p = candidate;
      ++change.accepted_steps;
    }
    if (diverged || !all_finite(p)) {
      change.note = "reweigh diverged; prototype reverted";
      std::cerr << "warning: prototype " << proto.prototype_id << ": " << change.note << "\n";
      continue;
    }
    if (p != proto.vector) {
      proto.vector = p;
      proto.source.reset();
      change.action = "reweighed";
    }
    change.source_after = proto.source;
    change.mean_reward_after = class_mean_reward(reward, model, ctx, k, proto.vector);
  }
  return out;
}

// Replaces prototypes whose mean reward is below alpha (or that duplicate an
// earlier prototype exactly) by random same-class patches with mean reward
// above beta.
inline R3Outcome reselect(const PrototypeNet& model, const RewardNet& reward,
                          const std::vector<const LabeledImage*>& train_set,
                          const R3Config& config) {
  validate(config);
  const ClassContext ctx(model, train_set);
  R3Outcome out{model, fresh_changes(model)};
  auto& protos = out.model.prototypes;
  auto matches_any = [&](std::span<const double> v) {
    for (const auto& q : protos)
      if (std::equal(q.vector.begin(), q.vector.end(), v.begin(), v.end())) return true;
    return false;
  };
  for (std::size_t j = 0; j < protos.size(); ++j) {
    PrototypeChange& change = out.changes[j];
    const int k = protos[j].class_id;
    require<ValidationError>(!ctx.images[k].empty(), "cannot reselect prototype ",
                             protos[j].prototype_id, ": class ", k, " has no images");
    change.mean_reward_before = class_mean_reward(reward, model, ctx, k, protos[j].vector);
    change.mean_reward_after = change.mean_reward_before;
    for (std::size_t i = 0; i < j; ++i)
      if (protos[i].vector == protos[j].vector) change.duplicate = true;
    if (!(change.mean_reward_before < config.alpha) && !change.duplicate) continue;
    change.reselect_triggered = true;

    Rng rng(derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(protos[j].prototype_id)));
    const auto& grids = ctx.latents[k];
    std::optional<std::pair<double, Prototype>> best;
    bool accepted = false;
    for (int t = 0; t < config.max_candidates && !accepted; ++t) {
      const int i = uniform_int(rng, 0, static_cast<int>(grids.size()) - 1);
      const int cell = uniform_int(rng, 0, static_cast<int>(grids[i].plane()) - 1);
      ++change.candidates_tried;
      Prototype candidate = protos[j];
      candidate.vector = patch_at(grids[i], cell / grids[i].width, cell % grids[i].width);
      candidate.source = PatchSource{ctx.images[k][i]->image_id, cell / grids[i].width,
                                     cell % grids[i].width};
      if (matches_any(candidate.vector)) continue;
      const double r = class_mean_reward(reward, model, ctx, k, candidate.vector);
      if (!best || r > best->first) best.emplace(r, candidate);
      accepted = r > config.beta;
    }
    if (accepted || (best && best->first > config.alpha)) {
      change.fallback = !accepted;
      protos[j] = best->second;
      change.action = "reselected";
      change.mean_reward_after = best->first;
      change.source_after = protos[j].source;
      if (change.fallback) {
        change.note = concat("no candidate above beta in ", config.max_candidates,
                             " draws; kept best-seen candidate");
        std::cerr << "WARNING: prototype " << protos[j].prototype_id << ": " << change.note
                  << " (mean reward " << best->first << ")\n";
      }
    } else {
      change.note = concat("no candidate above alpha in ", config.max_candidates,
                           " draws; prototype unchanged");
      std::cerr << "WARNING: prototype " << protos[j].prototype_id << ": " << change.note << "\n";
    }
  }
  return out;
}

// Reweigh, then reselect whatever is still below alpha.
inline R3Outcome r2_update(const PrototypeNet& model, const RewardNet& reward,
                           const std::vector<const LabeledImage*>& train_set,
                           const R3Config& config) {
  R3Outcome first = reweigh_update(model, reward, train_set, config);
  R3Outcome second = reselect(first.model, reward, train_set, config);
  for (std::size_t j = 0; j < second.changes.size(); ++j) {
    const PrototypeChange& a = first.changes[j];
    PrototypeChange& b = second.changes[j];
    b.reweigh_triggered = a.reweigh_triggered;
    b.accepted_steps = a.accepted_steps;
    b.objective_trace = a.objective_trace;
    b.mean_reward_before = a.mean_reward_before;
    b.source_before = a.source_before;
    if (b.action == "kept") b.action = a.action;
    if (!a.note.empty()) b.note = b.note.empty() ? a.note : a.note + "; " + b.note;
  }
  second.model.model_id = model.model_id + "-r2";
  return second;
}

struct R3Result {
  R3Outcome r2;
  TrainResult retrained;
};

// R2 followed by ordinary training of all parameters, ending with a push.
inline R3Result r3_update(const PrototypeNet& model, const RewardNet& reward,
                          const DatasetManifest& data, const TrainConfig& train_config,
                          const R3Config& config) {
  R3Result out{r2_update(model, reward, data.train(false), config), {}};
  out.retrained = train(out.r2.model, data, train_config);
  out.retrained.model.model_id = model.model_id + "-r3";
  return out;
}

}  // namespace r3p
