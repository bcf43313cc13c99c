#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "olive/retrieval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace olive;
using olive::testing::expect_code;
using olive::testing::TempDir;

namespace {

ObjectEmbedding emb(std::vector<float> v) { return ObjectEmbedding::make(std::move(v), EncoderKind::Meanpool); }

ObjectMask some_mask() { return ObjectMask::from_indices(2, std::vector<std::size_t>{1}); }

RecordId add(RetrievalIndex& index, std::vector<float> v, std::optional<std::string> label = std::nullopt) {
  return index.add_record(some_mask(), label.value_or("obj"), "img", emb(std::move(v)), std::move(label));
}

}  // namespace

TEST(AddRecord, FirstIdIsZero) {
  RetrievalIndex index;
  EXPECT_EQ(add(index, {1, 0}), 0);
  EXPECT_EQ(index.size(), 1u);
}

TEST(AddRecord, ZeroVectorIsDegenerate) {
  RetrievalIndex index;
  expect_code([&] { add(index, {0, 0, 0}); }, ErrorCode::DegenerateEmbedding);
  EXPECT_EQ(index.size(), 0u);
}

TEST(AddRecord, ThousandAddsGiveSequentialIdsInOrder) {
  RetrievalIndex index;
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(add(index, {1.0f + float(i), 1}), i);
  const auto records = index.records();
  for (std::size_t i = 0; i < records.size(); ++i) EXPECT_EQ(records[i].record_id, static_cast<RecordId>(i));
}

TEST(AddRecord, ResamplerEmbeddingsAreRejected) {
  RetrievalIndex index;
  expect_code([&] { index.add_record(some_mask(), "x", "i", ObjectEmbedding::make({1, 2}, EncoderKind::Resampler)); },
              ErrorCode::Precondition);
}

TEST(AddRecord, WidthMismatchIsDimensionError) {
  RetrievalIndex index;
  add(index, {1, 0});
  expect_code([&] { add(index, {1, 0, 0}); }, ErrorCode::Dimension);
}

TEST(AddRecord, IdsKeepGrowingAfterDeletion) {
  RetrievalIndex index;
  add(index, {1, 0});
  const auto b = add(index, {0, 1});
  index.remove_record(b);
  EXPECT_EQ(add(index, {1, 1}), 2);
}

TEST(QueryTopk, ThreeRecordExample) {
  RetrievalIndex index;
  add(index, {1, 0});
  add(index, {0, 1});
  add(index, {0.6f, 0.8f});
  const auto r = index.query_topk(emb({1, 0}), 3);
  ASSERT_EQ(r.hits.size(), 3u);
  EXPECT_EQ(r.hits[0].record_id, 0);
  EXPECT_FLOAT_EQ(r.hits[0].similarity, 1.0f);
  EXPECT_EQ(r.hits[1].record_id, 2);
  EXPECT_NEAR(r.hits[1].similarity, 0.6f, 1e-7);
  EXPECT_EQ(r.hits[2].record_id, 1);
  EXPECT_FLOAT_EQ(r.hits[2].similarity, 0.0f);
}

TEST(QueryTopk, ExcludedIdIsAbsent) {
  RetrievalIndex index;
  add(index, {1, 2, 3});
  const auto self = add(index, {3, 1, 2});
  add(index, {2, 2, 2});
  const auto r = index.query_topk(emb({3, 1, 2}), 3, {self});
  EXPECT_EQ(r.hits.size(), 2u);
  for (const auto& h : r.hits) EXPECT_NE(h.record_id, self);
}

TEST(QueryTopk, EmptyCandidatePoolIsEmptyIndex) {
  RetrievalIndex index;
  expect_code([&] { index.query_topk(emb({1}), 1); }, ErrorCode::EmptyIndex);
  const auto only = add(index, {1});
  expect_code([&] { index.query_topk(emb({1}), 1, {only}); }, ErrorCode::EmptyIndex);
  expect_code([&] { index.query_topk(emb({1}), 0); }, ErrorCode::Precondition);
}

TEST(QueryTopk, TiesBreakByRecordId) {
  RetrievalIndex index;
  add(index, {0, 1});
  add(index, {2, 0});
  add(index, {1, 0});
  add(index, {5, 0});
  const auto r = index.query_topk(emb({1, 0}), 3);
  EXPECT_EQ(r.hits, (std::vector<Hit>{{1, 1.0f}, {2, 1.0f}, {3, 1.0f}}));
}

TEST(QueryTopk, OrthogonalRecordsTieExactly) {
  RetrievalIndex index;
  add(index, {0, 3, 1, 0});
  add(index, {0, 1, 0, 2});
  add(index, {0, -1, 5, 7});
  const auto r = index.query_topk(emb({0.3f, 0, 0, 0}), 3);
  EXPECT_EQ(r.hits, (std::vector<Hit>{{0, 0.0f}, {1, 0.0f}, {2, 0.0f}}));
}

TEST(QueryTopk, MatchesFullSortOracle) {
  Rng rng(17);
  RetrievalIndex index;
  for (int i = 0; i < 1000; ++i) {
    std::vector<float> v(16);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    add(index, v);
  }
  const auto records = index.records();
  for (int q = 0; q < 50; ++q) {
    std::vector<float> v(16);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    const std::size_t k = 1 + rng.index(20);
    const std::set<RecordId> exclude{static_cast<RecordId>(rng.index(1000))};
    EXPECT_EQ(index.query_topk(emb(v), k, exclude).hits, oracle::topk_full_sort(records, v, k, exclude));
  }
}

TEST(QueryTopk, InvariantUnderPositiveQueryScaling) {
  Rng rng(18);
  RetrievalIndex index;
  for (int i = 0; i < 200; ++i) {
    std::vector<float> v(8);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    add(index, v);
  }
  for (int q = 0; q < 20; ++q) {
    std::vector<float> v(8);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    const auto base = index.query_topk(emb(v), 10);
    for (float alpha : {0.5f, 2.0f, 1024.0f}) {
      auto scaled = v;
      for (auto& x : scaled) x *= alpha;
      EXPECT_EQ(index.query_topk(emb(scaled), 10).hits, base.hits);
    }
  }
}

TEST(QueryTopk, InsertionOrderDoesNotMatter) {
  Rng rng(19);
  std::vector<RetrievalRecord> recs;
  RetrievalIndex a;
  for (int i = 0; i < 100; ++i) {
    std::vector<float> v(6);
    for (auto& x : v) x = static_cast<float>(rng.uniform_int(-2, 2));
    v[0] += 0.5f;
    add(a, v);
  }
  recs = a.records();
  std::reverse(recs.begin(), recs.end());
  RetrievalIndex b;
  for (auto& r : recs) b.insert_record(r);
  for (int q = 0; q < 20; ++q) {
    std::vector<float> v(6);
    for (auto& x : v) x = static_cast<float>(rng.uniform_int(-2, 2));
    v[1] += 0.25f;
    EXPECT_EQ(a.query_topk(emb(v), 15).hits, b.query_topk(emb(v), 15).hits);
  }
}

TEST(MajorityVote, ModalLabelWins) {
  const QueryResult r{{{0, 0.9f}, {1, 0.8f}, {2, 0.7f}, {3, 0.6f}, {4, 0.5f}}};
  const std::map<RecordId, std::string> labels{{0, "cat"}, {1, "cat"}, {2, "dog"}, {3, "cat"}, {4, "bird"}};
  EXPECT_EQ(majority_vote(r, labels), "cat");
}

TEST(MajorityVote, CountTieGoesToLargerSimilaritySum) {
  const QueryResult r{{{0, 0.9f}, {1, 0.8f}, {3, 0.7f}, {2, 0.2f}}};
  const std::map<RecordId, std::string> labels{{0, "cat"}, {1, "dog"}, {2, "cat"}, {3, "dog"}};
  EXPECT_EQ(majority_vote(r, labels), "dog");
}

TEST(MajorityVote, FullTieGoesToSmallerLabel) {
  const QueryResult r{{{0, 0.5f}, {1, 0.5f}}};
  EXPECT_EQ(majority_vote(r, {{0, "zebra"}, {1, "apple"}}), "apple");
}

TEST(MajorityVote, SingleHitIsNearestLabel) {
  EXPECT_EQ(majority_vote(QueryResult{{{7, 0.1f}}}, {{7, "kite"}}), "kite");
}

TEST(MajorityVote, UnlabelledHitIsMissingLabel) {
  expect_code([] { majority_vote(QueryResult{{{7, 0.1f}}}, {}); }, ErrorCode::MissingLabel);
}

TEST(IndexFile, RoundTripPreservesEveryField) {
  TempDir dir("index");
  RetrievalIndex index;
  add(index, {1.0f, -0.0f, 3.25e-20f}, "cat");
  add(index, {0.1f, 0.2f, 0.3f});
  index.add_record(ObjectMask::from_indices(3, std::vector<std::size_t>{0, 4, 8}), "a \"quoted\" thing", "img 2",
                   emb({-1, 2, std::nextafter(1.0f, 2.0f)}), "dog");
  index.remove_record(1);
  save_index(index, dir / "i.jsonl", 7);
  const auto loaded = load_index(dir / "i.jsonl");
  EXPECT_EQ(loaded.revision, 7u);
  EXPECT_EQ(loaded.index.records(), index.records());
  EXPECT_EQ(loaded.index.next_id(), 3);
  EXPECT_TRUE(std::signbit(loaded.index.records()[0].embedding.vec[1]));
  EXPECT_EQ(serialize_index(loaded.index, 7), serialize_index(index, 7));
}

TEST(IndexFile, QueriesAgreeAfterReload) {
  TempDir dir("index");
  Rng rng(5);
  RetrievalIndex index;
  for (int i = 0; i < 50; ++i) {
    std::vector<float> v(4);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    add(index, v, i % 2 ? "odd" : "even");
  }
  save_index(index, dir / "i.jsonl");
  const auto loaded = load_index(dir / "i.jsonl");
  const auto q = emb({0.3f, -1, 0.2f, 0.9f});
  EXPECT_EQ(loaded.index.query_topk(q, 7).hits, index.query_topk(q, 7).hits);
  EXPECT_EQ(loaded.index.labels(), index.labels());
}

TEST(IndexFile, CorruptPayloadLeavesIndexUnchanged) {
  TempDir dir("index");
  RetrievalIndex original;
  add(original, {1, 2}, "a");
  add(original, {2, 1}, "b");
  auto text = serialize_index(original);
  {
    auto broken = text;
    broken.replace(broken.rfind("\"embedding\":[\"") + 14, 2, "zz");
    io::write_file_atomic(dir / "bad.jsonl", broken);
  }
  RetrievalIndex target;
  add(target, {5, 5}, "keep");
  const auto before = target.records();
  expect_code([&] { load_index_into(target, dir / "bad.jsonl"); }, ErrorCode::Format);
  EXPECT_EQ(target.records(), before);

  auto wrong_version = text;
  wrong_version.replace(wrong_version.find("\"version\":1"), 11, "\"version\":9");
  io::write_file_atomic(dir / "v.jsonl", wrong_version);
  expect_code([&] { load_index_into(target, dir / "v.jsonl"); }, ErrorCode::Format);

  io::write_file_atomic(dir / "short.jsonl", text.substr(0, text.size() / 2));
  expect_code([&] { load_index_into(target, dir / "short.jsonl"); }, ErrorCode::Format);
  EXPECT_EQ(target.records(), before);
}

TEST(Concurrency, ReadersNeverSeePartialState) {
  RetrievalIndex index;
  add(index, {1, 0}, "seed");
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0};
  std::vector<std::thread> readers;
  for (int t = 0; t < 3; ++t) {
    readers.emplace_back([&] {
      while (!stop) {
        const auto r = index.query_topk(emb({1, 0}), 1000);
        for (std::size_t i = 1; i < r.hits.size(); ++i)
          if (hit_before(r.hits[i], r.hits[i - 1])) ++bad;
        if (r.hits.empty() || r.hits[0].record_id != 0) ++bad;
      }
    });
  }
  for (int i = 0; i < 300; ++i) add(index, {0.5f, float(i % 7)}, "w");
  for (RecordId id = 1; id < 150; ++id) index.remove_record(id);
  stop = true;
  for (auto& th : readers) th.join();
  EXPECT_EQ(bad.load(), 0);
  EXPECT_EQ(index.size(), 152u);
}
