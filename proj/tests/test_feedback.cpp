#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <random>
#include <set>
#include <thread>

#include "r3p/feedback.hpp"
#include "support.hpp"

using namespace r3p;
using r3p::testing::TempDir;

namespace {

RatingRecord make_rating(std::string image, int proto, int rating, std::string rater = "alice",
                         std::string model = "m0") {
  RatingRecord r;
  r.image_id = std::move(image);
  r.prototype_id = proto;
  r.model_id = std::move(model);
  r.rating = rating;
  r.rater_id = std::move(rater);
  return r;
}

std::string fixed_clock() { return "2026-01-01T00:00:00Z"; }

}  // namespace

TEST(RatingStore, AcceptsAndPersists) {
  TempDir dir;
  const auto path = dir / "ratings.jsonl";
  {
    RatingStore store(path, fixed_clock);
    const RatingRecord saved = store.submit(make_rating("img1", 0, 4));
    EXPECT_FALSE(saved.rating_id.empty());
    EXPECT_EQ(saved.timestamp, "2026-01-01T00:00:00Z");
    store.submit(make_rating("img1", 1, 2));
  }
  RatingStore reopened(path, fixed_clock);
  const auto records = reopened.records();
  ASSERT_EQ(records.size(), 2u);
  EXPECT_EQ(records[0].rating, 4);
  EXPECT_EQ(records[1].prototype_id, 1);
  EXPECT_THROW(reopened.submit(make_rating("img1", 0, 5)), ConflictError);
}

TEST(RatingStore, RejectsInvalidRatings) {
  TempDir dir;
  RatingStore store(dir / "r.jsonl", fixed_clock);
  EXPECT_THROW(store.submit(make_rating("img1", 0, 6)), ValidationError);
  EXPECT_THROW(store.submit(make_rating("img1", 0, 0)), ValidationError);
  EXPECT_THROW(store.submit(make_rating("img1", 0, 3, "")), ValidationError);
  EXPECT_THROW(store.submit(make_rating("", 0, 3)), ValidationError);
  EXPECT_TRUE(store.records().empty());
  EXPECT_FALSE(std::filesystem::exists(dir / "r.jsonl"));
}

TEST(RatingStore, DuplicatePerRaterConflictsButOtherRatersMayRate) {
  TempDir dir;
  RatingStore store(dir / "r.jsonl", fixed_clock);
  store.submit(make_rating("img1", 0, 4, "alice"));
  EXPECT_THROW(store.submit(make_rating("img1", 0, 1, "alice")), ConflictError);
  EXPECT_NO_THROW(store.submit(make_rating("img1", 0, 1, "bob")));
  EXPECT_NO_THROW(store.submit(make_rating("img1", 0, 1, "alice", "m1")));
  EXPECT_EQ(store.records().size(), 3u);
}

TEST(RatingStore, ConcurrentDuplicatesAcceptExactlyOne) {
  TempDir dir;
  RatingStore store(dir / "r.jsonl", fixed_clock);
  std::atomic<int> accepted{0}, conflicts{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&] {
      try {
        store.submit(make_rating("img", 0, 3));
        ++accepted;
      } catch (const ConflictError&) {
        ++conflicts;
      }
    });
  for (auto& t : threads) t.join();
  EXPECT_EQ(accepted.load(), 1);
  EXPECT_EQ(conflicts.load(), 7);
  EXPECT_EQ(RatingStore(dir / "r.jsonl").records().size(), 1u);
}

TEST(RatingStore, CorruptLineNamesLineNumber) {
  TempDir dir;
  const auto path = dir / "r.jsonl";
  {
    std::ofstream out(path);
    out << nlohmann::json(make_rating("a", 0, 3)).dump() << "\n{not json\n";
  }
  try {
    RatingStore store(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Jsonl, RecordsRoundTrip) {
  TempDir dir;
  std::vector<ComparisonRecord> records = {{{"a", 0}, {"b", 1}, -1}, {{"c", 2}, {"a", 0}, 1}};
  write_records(dir / "c.jsonl", records);
  EXPECT_EQ(read_jsonl<ComparisonRecord>(dir / "c.jsonl"), records);
  EXPECT_THROW(read_jsonl<ComparisonRecord>(dir / "missing.jsonl"), IngestionError);
}

TEST(Jsonl, ComparisonLabelMustBeSigned) {
  EXPECT_THROW(nlohmann::json::parse(R"({"left":{"image_id":"a","prototype_id":0},
      "right":{"image_id":"b","prototype_id":0},"c":0})").get<ComparisonRecord>(), FormatError);
  EXPECT_THROW(nlohmann::json::parse(R"({"left":{"image_id":"a","prototype_id":0},
      "right":{"image_id":"a","prototype_id":0},"c":1})").get<ComparisonRecord>(), FormatError);
}

TEST(Rubric, HasFiveDescendingLevels) {
  const auto levels = rubric();
  ASSERT_EQ(levels.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(levels[i].rating, 5 - i);
    EXPECT_FALSE(levels[i].description.empty());
  }
}

TEST(TaskPool, FreshPoolStartsAtLowestId) {
  const TaskPool pool("m0", {{"a", 0}, {"b", 0}, {"c", 1}}, 3);
  const auto task = pool.next_task("alice", {});
  ASSERT_TRUE(task.has_value());
  EXPECT_EQ(task->task_id, 0);
  EXPECT_EQ(task->heatmap_ref,
            "/api/heatmaps/" + task->image_id + "/" + std::to_string(task->prototype_id));
}

TEST(TaskPool, ExhaustionReturnsNothing) {
  const TaskPool pool("m0", {{"a", 0}, {"b", 0}}, 3);
  std::vector<RatingRecord> ratings;
  for (const auto& t : pool.tasks()) ratings.push_back(make_rating(t.image_id, t.prototype_id, 3));
  EXPECT_FALSE(pool.next_task("alice", ratings).has_value());
  EXPECT_TRUE(pool.next_task("bob", ratings).has_value());
}

TEST(TaskPool, PrefersLeastRatedTask) {
  const TaskPool pool("m0", {{"a", 0}, {"b", 0}, {"c", 0}}, 9);
  const auto& t0 = pool.tasks()[0];
  std::vector<RatingRecord> ratings = {make_rating(t0.image_id, t0.prototype_id, 4, "alice")};
  EXPECT_EQ(pool.next_task("bob", ratings)->task_id, 1);
  // Ratings for other models do not count.
  const auto& t1 = pool.tasks()[1];
  ratings.push_back(make_rating(t1.image_id, t1.prototype_id, 4, "carol", "other"));
  EXPECT_EQ(pool.next_task("bob", ratings)->task_id, 1);
}

TEST(TaskPool, InterleavedRatersNeverRepeat) {
  std::vector<ItemKey> items;
  for (int i = 0; i < 12; ++i) items.push_back({"img" + std::to_string(i), i % 3});
  const TaskPool pool("m0", items, 17);
  std::vector<RatingRecord> ratings;
  std::map<std::string, std::set<int>> seen;
  const std::vector<std::string> raters = {"alice", "bob", "carol"};
  for (int round = 0;; ++round) {
    const std::string& rater = raters[round % 3];
    const auto task = pool.next_task(rater, ratings);
    if (!task) {
      EXPECT_EQ(seen[rater].size(), items.size());
      if (round % 3 == 2) break;
      continue;
    }
    EXPECT_TRUE(seen[rater].insert(task->task_id).second) << rater << " got " << task->task_id;
    ratings.push_back(make_rating(task->image_id, task->prototype_id, 3, rater));
  }
  EXPECT_EQ(ratings.size(), 3 * items.size());
}

TEST(TaskPool, IdsAreSeededPermutation) {
  std::vector<ItemKey> items;
  for (int i = 0; i < 20; ++i) items.push_back({"img" + std::to_string(i), 0});
  const TaskPool a("m0", items, 1), b("m0", items, 1), c("m0", items, 2);
  std::set<std::string> ids;
  bool differs = false;
  for (std::size_t t = 0; t < items.size(); ++t) {
    EXPECT_EQ(a.tasks()[t].image_id, b.tasks()[t].image_id);
    differs |= a.tasks()[t].image_id != c.tasks()[t].image_id;
    ids.insert(a.tasks()[t].image_id);
    EXPECT_EQ(a.find({a.tasks()[t].image_id, 0})->task_id, static_cast<int>(t));
  }
  EXPECT_EQ(ids.size(), items.size());
  EXPECT_TRUE(differs);
}

TEST(Comparisons, HigherRatedSideSetsSign) {
  std::set<int> signs;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const auto split =
        build_comparisons({make_rating("a", 0, 5), make_rating("b", 0, 3)}, seed, 0.0);
    ASSERT_EQ(split.train.size(), 1u);
    const auto& rec = split.train[0];
    const ComparisonRecord five_left = rec.left.image_id == "a" ? rec : rec.swapped();
    EXPECT_EQ(five_left.left.image_id, "a");
    EXPECT_EQ(five_left.c, -1);
    signs.insert(rec.c);
  }
  EXPECT_EQ(signs.size(), 2u) << "orientation should vary with the seed";
}

TEST(Comparisons, TiesProduceNoPairs) {
  const auto split = build_comparisons({make_rating("a", 0, 4), make_rating("b", 0, 4)}, 1, 0.0);
  EXPECT_TRUE(split.train.empty());
  EXPECT_EQ(split.train_items.size(), 2u);
}

TEST(Comparisons, DistinctRatingsGiveAllPairs) {
  // Two raters per item give nine distinct means 1.0, 1.5, ..., 5.0.
  std::vector<RatingRecord> ratings;
  for (int i = 0; i < 9; ++i) {
    const std::string id = "img" + std::to_string(i);
    ratings.push_back(make_rating(id, 0, 1 + i / 2, "alice"));
    ratings.push_back(make_rating(id, 0, 1 + (i + 1) / 2, "bob"));
  }
  const auto split = build_comparisons(ratings, 4, 0.0);
  EXPECT_EQ(split.train.size(), 36u);
  EXPECT_TRUE(split.test.empty());
}

TEST(Comparisons, CountsMatchTieOracle) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> score(1, 5);
  std::vector<RatingRecord> ratings;
  for (int i = 0; i < 40; ++i) ratings.push_back(make_rating("img" + std::to_string(i), i % 2, score(rng)));
  for (double fraction : {0.0, 0.25}) {
    const auto split = build_comparisons(ratings, 6, fraction);
    std::map<ItemKey, int> value;
    for (const auto& r : ratings) value[{r.image_id, r.prototype_id}] = r.rating;
    auto expected = [&](const std::vector<ItemKey>& side) {
      std::size_t n = side.size(), ties = 0;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = a + 1; b < n; ++b) ties += value[side[a]] == value[side[b]];
      return n * (n - 1) / 2 - ties;
    };
    EXPECT_EQ(split.train.size(), expected(split.train_items));
    EXPECT_EQ(split.test.size(), expected(split.test_items));
    EXPECT_EQ(split.test_items.size(), static_cast<std::size_t>(std::lround(40 * fraction)));
    std::set<ItemKey> train_set(split.train_items.begin(), split.train_items.end());
    for (const auto& k : split.test_items) EXPECT_FALSE(train_set.contains(k));
    for (const auto& rec : split.test) {
      EXPECT_FALSE(train_set.contains(rec.left));
      EXPECT_FALSE(train_set.contains(rec.right));
    }
    for (const auto& rec : split.train) {
      EXPECT_EQ(rec.c, value[rec.left] > value[rec.right] ? -1 : 1);
      const auto back = rec.swapped();
      EXPECT_EQ(back.c, -rec.c);
      EXPECT_EQ(back.swapped(), rec);
    }
  }
}

TEST(Comparisons, DeterministicBySeed) {
  std::vector<RatingRecord> ratings;
  for (int i = 0; i < 10; ++i) ratings.push_back(make_rating("img" + std::to_string(i), 0, 1 + i % 5));
  const auto a = build_comparisons(ratings, 3, 0.3);
  const auto b = build_comparisons(ratings, 3, 0.3);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
}

TEST(Comparisons, RejectsBadInput) {
  EXPECT_THROW(build_comparisons({make_rating("a", 0, 5)}, 1, 0.0), ValidationError);
  EXPECT_THROW(build_comparisons({make_rating("a", 0, 5), make_rating("b", 0, 3)}, 1, 1.0),
               ValidationError);
}

TEST(Oracle, RatingThresholds) {
  EXPECT_EQ(rating_from_overlap(1.0), 5);
  EXPECT_EQ(rating_from_overlap(0.9), 5);
  EXPECT_EQ(rating_from_overlap(0.8999), 4);
  EXPECT_EQ(rating_from_overlap(0.7), 4);
  EXPECT_EQ(rating_from_overlap(0.6), 3);
  EXPECT_EQ(rating_from_overlap(0.5), 3);
  EXPECT_EQ(rating_from_overlap(0.25), 2);
  EXPECT_EQ(rating_from_overlap(0.2499), 1);
  EXPECT_EQ(rating_from_overlap(0.0), 1);
}

TEST(Oracle, OverlapOfConstructedHeatmaps) {
  // 20x20 gives 400 pixels; the top 5% is 20 of them.
  ObjectMask mask{20, std::vector<std::uint8_t>(400, 0)};
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 20; ++x) mask.cells[y * 20 + x] = 1;
  Grid inside(20, 20, 0.0), outside(20, 20, 0.0), mixed(20, 20, 0.0);
  for (int i = 0; i < 20; ++i) {
    inside.values[i] = 1.0;
    outside.values[399 - i] = 1.0;
  }
  for (int i = 0; i < 12; ++i) mixed.values[i] = 1.0;
  for (int i = 0; i < 8; ++i) mixed.values[399 - i] = 1.0;
  EXPECT_DOUBLE_EQ(object_overlap(mask, inside), 1.0);
  EXPECT_DOUBLE_EQ(object_overlap(mask, outside), 0.0);
  EXPECT_DOUBLE_EQ(object_overlap(mask, mixed), 0.6);
  EXPECT_EQ(rating_from_overlap(object_overlap(mask, inside)), 5);
  EXPECT_EQ(rating_from_overlap(object_overlap(mask, outside)), 1);
  EXPECT_EQ(rating_from_overlap(object_overlap(mask, mixed)), 3);
  EXPECT_THROW(object_overlap(mask, Grid(10, 10)), ContractError);
}

TEST(Oracle, RatesSyntheticSample) {
  const DatasetManifest d = generate_synthetic(r3p::testing::small_synthetic(2, 2));
  const LabeledImage& image = *d.train().front();
  const ObjectMask& mask = *d.mask(image.image_id);
  ActivationMap map;
  map.display = Grid(mask.size, mask.size, 0.0);
  for (int y = 0; y < mask.size; ++y)
    for (int x = 0; x < mask.size; ++x) map.display.values[y * mask.size + x] = mask.inside(y, x);
  EXPECT_EQ(oracle_rate({image, mask}, map), 5);
  for (double& v : map.display.values) v = 1.0 - v;
  EXPECT_EQ(oracle_rate({image, mask}, map), 1);
}
