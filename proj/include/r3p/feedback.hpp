#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <unistd.h>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/data.hpp"
#include "r3p/protopnet.hpp"

namespace r3p {

struct RatingRecord {
  std::string rating_id;
  std::string image_id;
  int prototype_id = 0;
  std::string model_id;
  int rating = 0;  // 1..5
  std::string rater_id;
  std::string timestamp;

  auto unique_key() const { return std::tie(image_id, prototype_id, model_id, rater_id); }
  friend bool operator==(const RatingRecord&, const RatingRecord&) = default;
};

inline void to_json(nlohmann::json& j, const RatingRecord& r) {
  j = {{"rating_id", r.rating_id}, {"image_id", r.image_id}, {"prototype_id", r.prototype_id},
       {"model_id", r.model_id},   {"rating", r.rating},     {"rater_id", r.rater_id},
       {"timestamp", r.timestamp}};
}

inline void from_json(const nlohmann::json& j, RatingRecord& r) {
  r.rating_id = j.value("rating_id", std::string{});
  r.image_id = j.at("image_id").get<std::string>();
  r.prototype_id = j.at("prototype_id").get<int>();
  r.model_id = j.value("model_id", std::string{});
  r.rating = j.at("rating").get<int>();
  r.rater_id = j.at("rater_id").get<std::string>();
  r.timestamp = j.value("timestamp", std::string{});
}

// One rated (image, prototype) pair.
struct ItemKey {
  std::string image_id;
  int prototype_id = 0;
  auto operator<=>(const ItemKey&) const = default;
};

inline void to_json(nlohmann::json& j, const ItemKey& k) {
  j = {{"image_id", k.image_id}, {"prototype_id", k.prototype_id}};
}
inline void from_json(const nlohmann::json& j, ItemKey& k) {
  k.image_id = j.at("image_id").get<std::string>();
  k.prototype_id = j.at("prototype_id").get<int>();
}

// c = -1: left preferred, c = +1: right preferred.
struct ComparisonRecord {
  ItemKey left;
  ItemKey right;
  int c = 0;

  ComparisonRecord swapped() const { return {right, left, -c}; }
  friend bool operator==(const ComparisonRecord&, const ComparisonRecord&) = default;
};

inline void to_json(nlohmann::json& j, const ComparisonRecord& r) {
  j = {{"left", r.left}, {"right", r.right}, {"c", r.c}};
}
inline void from_json(const nlohmann::json& j, ComparisonRecord& r) {
  r.left = j.at("left").get<ItemKey>();
  r.right = j.at("right").get<ItemKey>();
  r.c = j.at("c").get<int>();
  require<FormatError>(r.c == -1 || r.c == 1, "comparison label must be -1 or +1");
  require<FormatError>(r.left != r.right, "comparison sides must differ");
}

struct RubricLevel {
  int rating;
  std::string label;
  std::string description;
};

// Five-level rubric. Wording is our own paraphrase: 4-5 high quality, 3
// unclear, 1-2 low quality.
inline std::vector<RubricLevel> rubric() {
  return {
      {5, "Excellent", "Activation sits entirely on the object and covers a single coherent part."},
      {4, "Good", "Activation is mostly on the object with minor spill onto the background."},
      {3, "Unclear", "Activation is split between the object and the background, or too diffuse to judge."},
      {2, "Poor", "Activation is mostly on the background and touches the object only at its edge."},
      {1, "Spurious", "Activation lies on the background or on nothing recognizable."},
  };
}

inline nlohmann::json rubric_json() {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& level : rubric())
    out.push_back({{"rating", level.rating}, {"label", level.label},
                   {"description", level.description}});
  return out;
}

inline std::string rubric_text() {
  std::string text;
  for (const auto& level : rubric())
    text += concat(level.rating, " - ", level.label, ": ", level.description, "\n");
  return text;
}

struct RatingTask {
  int task_id = 0;
  std::string image_id;
  int prototype_id = 0;
  std::string heatmap_ref;  // path of the heatmap endpoint
  std::string rubric;
};

inline void to_json(nlohmann::json& j, const RatingTask& t) {
  j = {{"task_id", t.task_id},         {"image_id", t.image_id},
       {"prototype_id", t.prototype_id}, {"heatmap_ref", t.heatmap_ref},
       {"image_ref", "/api/images/" + t.image_id}, {"rubric", t.rubric}};
}

inline std::string iso_timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm utc{};
  gmtime_r(&t, &utc);
  char buffer[32];
  std::strftime(buffer, sizeof buffer, "%Y-%m-%dT%H:%M:%SZ", &utc);
  return buffer;
}

// Append-only JSON-lines rating log. Every acknowledged submission has been
// written and fsync'ed before submit returns.
class RatingStore {
 public:
  using Clock = std::function<std::string()>;

  explicit RatingStore(std::filesystem::path path, Clock clock = iso_timestamp_now)
      : path_(std::move(path)), clock_(std::move(clock)) {
    if (std::filesystem::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      int line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
          RatingRecord r = nlohmann::json::parse(line).get<RatingRecord>();
          keys_.insert(key_of(r));
          records_.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
          throw FormatError(concat(path_.string(), ":", line_no, ": ", e.what()));
        }
      }
    } else if (path_.has_parent_path()) {
      std::filesystem::create_directories(path_.parent_path());
    }
  }

  RatingRecord submit(RatingRecord record) {
    require<ValidationError>(record.rating >= 1 && record.rating <= 5, "rating must be 1..5, got ",
                             record.rating);
    require<ValidationError>(!record.rater_id.empty(), "rater_id is required");
    require<ValidationError>(!record.image_id.empty(), "image_id is required");
    std::lock_guard lock(mutex_);
    require<ConflictError>(!keys_.contains(key_of(record)), "rater ", record.rater_id,
                           " already rated image ", record.image_id, " / prototype ",
                           record.prototype_id);
    if (record.rating_id.empty()) record.rating_id = concat("r", records_.size() + 1);
    if (record.timestamp.empty()) record.timestamp = clock_();
    append_line(nlohmann::json(record).dump());
    keys_.insert(key_of(record));
    records_.push_back(record);
    return record;
  }

  std::vector<RatingRecord> records() const {
    std::lock_guard lock(mutex_);
    return records_;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  using Key = std::tuple<std::string, int, std::string, std::string>;
  static Key key_of(const RatingRecord& r) {
    return {r.image_id, r.prototype_id, r.model_id, r.rater_id};
  }

  void append_line(const std::string& line) {
    std::FILE* f = std::fopen(path_.c_str(), "a");
    require<ServiceError>(f != nullptr, "cannot open rating log ", path_.string());
    const bool ok = std::fputs(line.c_str(), f) >= 0 && std::fputc('\n', f) != EOF &&
                    std::fflush(f) == 0 && ::fsync(::fileno(f)) == 0;
    std::fclose(f);
    require<ServiceError>(ok, "failed to append to rating log ", path_.string());
  }

  std::filesystem::path path_;
  Clock clock_;
  mutable std::mutex mutex_;
  std::vector<RatingRecord> records_;
  std::set<Key> keys_;
};

// Rating tasks for one model. Task ids follow a seeded permutation of the
// (image, prototype) pairs, so handing out tasks in id order samples pairs
// uniformly.
class TaskPool {
 public:
  TaskPool(std::string model_id, std::vector<ItemKey> items, std::uint64_t seed)
      : model_id_(std::move(model_id)) {
    Rng rng(derive_seed(seed, 31));
    std::shuffle(items.begin(), items.end(), rng);
    for (std::size_t t = 0; t < items.size(); ++t) {
      RatingTask task;
      task.task_id = static_cast<int>(t);
      task.image_id = items[t].image_id;
      task.prototype_id = items[t].prototype_id;
      task.heatmap_ref = concat("/api/heatmaps/", items[t].image_id, "/", items[t].prototype_id);
      task.rubric = rubric_text();
      index_[items[t]] = t;
      tasks_.push_back(std::move(task));
    }
  }

  const std::string& model_id() const { return model_id_; }
  const std::vector<RatingTask>& tasks() const { return tasks_; }

  const RatingTask* find(const ItemKey& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? nullptr : &tasks_[it->second];
  }

  // Unrated-by-this-rater task with the fewest ratings overall; ties go to
  // the lowest task id.
  std::optional<RatingTask> next_task(const std::string& rater_id,
                                      const std::vector<RatingRecord>& ratings) const {
    std::vector<int> counts(tasks_.size(), 0);
    std::vector<char> mine(tasks_.size(), 0);
    for (const auto& r : ratings) {
      if (r.model_id != model_id_) continue;
      const RatingTask* t = find({r.image_id, r.prototype_id});
      if (!t) continue;
      ++counts[t->task_id];
      if (r.rater_id == rater_id) mine[t->task_id] = 1;
    }
    std::optional<RatingTask> best;
    for (const auto& t : tasks_) {
      if (mine[t.task_id]) continue;
      if (!best || counts[t.task_id] < counts[best->task_id]) best = t;
    }
    return best;
  }

 private:
  std::string model_id_;
  std::vector<RatingTask> tasks_;
  std::map<ItemKey, std::size_t> index_;
};

// Class-matched (image, prototype) pairs over the original train images.
inline TaskPool make_task_pool(const PrototypeNet& model, const DatasetManifest& data,
                               std::uint64_t seed) {
  std::vector<ItemKey> items;
  for (const auto* image : data.train(false))
    for (const auto& p : model.prototypes)
      if (p.class_id == image->class_id) items.push_back({image->image_id, p.prototype_id});
  return TaskPool(model.model_id, std::move(items), seed);
}

struct ComparisonSplit {
  std::vector<ComparisonRecord> train;
  std::vector<ComparisonRecord> test;
  std::vector<ItemKey> train_items;
  std::vector<ItemKey> test_items;
};

// Items (mean rating across raters when rated more than once) are split into
// disjoint train/test sets first. Within a side every unordered pair with
// unequal ratings becomes one record, with a seeded left/right orientation;
// c = -1 when the left item is rated higher.
inline ComparisonSplit build_comparisons(const std::vector<RatingRecord>& ratings,
                                         std::uint64_t split_seed, double test_fraction) {
  require<ValidationError>(ratings.size() >= 2, "need at least two ratings, got ", ratings.size());
  require<ValidationError>(test_fraction >= 0.0 && test_fraction < 1.0,
                           "test fraction must lie in [0,1)");
  std::map<ItemKey, std::pair<double, int>> totals;
  for (const auto& r : ratings) {
    require<ValidationError>(r.rating >= 1 && r.rating <= 5, "rating out of range in ",
                             r.rating_id);
    auto& [sum, n] = totals[{r.image_id, r.prototype_id}];
    sum += r.rating;
    ++n;
  }
  std::vector<std::pair<ItemKey, double>> items;
  for (const auto& [key, t] : totals) items.emplace_back(key, t.first / t.second);

  Rng rng(derive_seed(split_seed, 41));
  std::shuffle(items.begin(), items.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(items.size() * test_fraction));

  ComparisonSplit out;
  auto pair_up = [&rng](const std::vector<std::pair<ItemKey, double>>& side,
                        std::vector<ComparisonRecord>& dest) {
    for (std::size_t a = 0; a < side.size(); ++a)
      for (std::size_t b = a + 1; b < side.size(); ++b) {
        const bool flip = std::bernoulli_distribution(0.5)(rng);
        const auto& left = flip ? side[b] : side[a];
        const auto& right = flip ? side[a] : side[b];
        if (left.second == right.second) continue;
        dest.push_back({left.first, right.first, left.second > right.second ? -1 : 1});
      }
  };
  std::vector<std::pair<ItemKey, double>> test_side(items.begin(), items.begin() + n_test);
  std::vector<std::pair<ItemKey, double>> train_side(items.begin() + n_test, items.end());
  pair_up(train_side, out.train);
  pair_up(test_side, out.test);
  for (const auto& [k, r] : train_side) out.train_items.push_back(k);
  for (const auto& [k, r] : test_side) out.test_items.push_back(k);
  return out;
}

// Fraction of the top 5% display pixels (ties by pixel order) that fall on the
// object, mapped onto the 1..5 scale.
inline double object_overlap(const ObjectMask& mask, const Grid& display) {
  require(display.height == mask.size && display.width == mask.size, "heatmap is ",
          display.height, "x", display.width, " but mask is ", mask.size, "x", mask.size);
  std::vector<int> order(display.values.size());
  std::iota(order.begin(), order.end(), 0);
  const auto top = static_cast<std::size_t>(std::ceil(0.05 * static_cast<double>(order.size())));
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return display.values[a] > display.values[b]; });
  std::size_t inside = 0;
  for (std::size_t i = 0; i < top; ++i) inside += mask.cells[order[i]] ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(top);
}

inline int rating_from_overlap(double rho) {
  if (rho >= 0.9) return 5;
  if (rho >= 0.7) return 4;
  if (rho >= 0.5) return 3;
  if (rho >= 0.25) return 2;
  return 1;
}

inline int oracle_rate(const SyntheticSample& sample, const ActivationMap& map) {
  return rating_from_overlap(object_overlap(sample.object_mask, map.display));
}

template <typename Record>
std::vector<Record> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  require<IngestionError>(static_cast<bool>(in), "file not found: ", path.string());
  std::vector<Record> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Record>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(concat(path.string(), ":", line_no, ": ", e.what()));
    }
  }
  return out;
}

template <typename Record>
void write_records(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::trunc);
  require<FormatError>(static_cast<bool>(out), "cannot write ", path.string());
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
  require<FormatError>(static_cast<bool>(out), "write failed for ", path.string());
}

}  // namespace r3p
