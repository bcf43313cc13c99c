#include <gtest/gtest.h>

#include "olive/dataset.hpp"
#include "olive/model.hpp"
#include "gradient_suite.hpp"
#include "test_util.hpp"

using namespace olive;
using olive::testing::expect_code;
using olive::testing::TempDir;

namespace {

ModelConfig small_config(bool lora = false) {
  ModelConfig c;
  c.encoder = {8, 16, 16, 1, 2, 2};
  c.decoder = {0, 16, 1, 2, 2, 512};
  if (lora) c.lora = LoraConfig{2, 4.0f};
  c.max_new_tokens = 4;
  return c;
}

const std::vector<std::string> kClasses{"cat", "dog", "bird"};

Model small_model(bool lora = false, std::uint64_t seed = 11) {
  auto m = init_model(small_config(lora), task_vocabulary(kClasses, {}), seed);
  // Non-zero adapter weights so the LoRA table is not trivially recoverable.
  if (m.lora) {
    Rng rng(99);
    for_each_param(*m.lora, [&](const std::string&, Tensor& t) {
      for (auto& x : t.values()) x = static_cast<float>(rng.normal() * 0.1);
    });
  }
  return m;
}

Benchmark small_bench() {
  BenchmarkConfig bc;
  bc.seed = 5;
  bc.classes = kClasses;
  bc.channels = 16;
  bc.images = 12;
  return generate_benchmark(bc);
}

std::vector<ObjectExample> examples_of(const Benchmark& b) {
  std::vector<ObjectExample> out;
  for (std::size_t i = 0; i < b.annotations.size(); ++i) {
    const auto& a = b.annotations[i];
    out.push_back({RecordId(i), a.image_id, a.mask, a.label, a.caption.value_or("a " + a.label)});
  }
  return out;
}

}  // namespace

TEST(ModelConfigJson, RoundTrips) {
  const auto c = small_config(true);
  const auto back = model_config_from_json(nlohmann::json::parse(model_config_to_json(c).dump()));
  EXPECT_EQ(model_config_to_json(back), model_config_to_json(c));
  ASSERT_TRUE(back.lora.has_value());
  EXPECT_EQ(back.lora->rank, 2u);
  expect_code([] { model_config_from_json(nlohmann::json::object()); }, ErrorCode::Format);
}

TEST(InitModel, SetsVocabularySizeAndChecksWidths) {
  const auto m = small_model();
  EXPECT_EQ(m.config.decoder.vocab_size, m.vocab.size());
  EXPECT_EQ(m.decoder.token_embedding.shape()[0], m.vocab.size());
  auto bad = small_config();
  bad.encoder.out_dim = 8;
  expect_code([&] { init_model(bad, task_vocabulary(kClasses, {}), 0); }, ErrorCode::Config);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (bool lora : {false, true}) {
    const auto m = small_model(lora);
    const auto bytes = serialize_checkpoint(m);
    const auto back = parse_checkpoint(bytes);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
    EXPECT_EQ(flatten_params(back.encoder), flatten_params(m.encoder));
    EXPECT_EQ(flatten_params(back.decoder), flatten_params(m.decoder));
    EXPECT_EQ(back.lora.has_value(), lora);
    if (lora) {
      EXPECT_EQ(flatten_params(*back.lora), flatten_params(*m.lora));
    }
    EXPECT_EQ(back.vocab.words(), m.vocab.words());
  }
}

TEST(Checkpoint, FileRoundTripPreservesPredictions) {
  TempDir dir("ckpt");
  const auto m = small_model(true);
  save_checkpoint(m, dir / "model.olvc");
  const auto back = load_checkpoint(dir / "model.olvc");
  const auto bench = small_bench();
  const auto& a = bench.annotations[0];
  const auto p1 = predict_generative(m, bench.features.get(a.image_id), a.mask);
  const auto p2 = predict_generative(back, bench.features.get(a.image_id), a.mask);
  EXPECT_EQ(p1.ids, p2.ids);
  EXPECT_EQ(p1.log_probs, p2.log_probs);
}

TEST(Checkpoint, CorruptBytesRaiseFormat) {
  const auto bytes = serialize_checkpoint(small_model(true));
  auto with = [&](auto edit) {
    auto copy = bytes;
    edit(copy);
    return copy;
  };
  expect_code([&] { parse_checkpoint(with([](auto& b) { b[0] = 'X'; })); }, ErrorCode::Format);
  expect_code([&] { parse_checkpoint(with([](auto& b) { b[4] = 9; })); }, ErrorCode::Format);
  expect_code([&] { parse_checkpoint(with([](auto& b) { b.push_back(0); })); }, ErrorCode::Format);
  // Config JSON starts after magic, version and its u64 length.
  expect_code([&] { parse_checkpoint(with([](auto& b) { b[16] = '!'; })); }, ErrorCode::Format);
  for (std::size_t cut : {0ul, 3ul, 7ul, 20ul, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<unsigned char> prefix(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    expect_code([&] { parse_checkpoint(prefix); }, ErrorCode::Format);
  }
}

TEST(Checkpoint, MismatchedTensorShapeRaisesFormat) {
  // A checkpoint written with one width cannot be read back as another.
  auto m = small_model();
  m.decoder.final_norm.gamma = Tensor({8});
  expect_code([&] { parse_checkpoint(serialize_checkpoint(m)); }, ErrorCode::Format);
}

TEST(Checkpoint, MissingFileRaisesNotFound) {
  TempDir dir("ckpt_missing");
  expect_code([&] { load_checkpoint(dir / "nope.olvc"); }, ErrorCode::NotFound);
}

TEST(Predict, GenerativeIsDeterministicAndConsistent) {
  const auto m = small_model();
  const auto bench = small_bench();
  const auto& a = bench.annotations[1];
  const auto& grid = bench.features.get(a.image_id);
  const auto p = predict_generative(m, grid, a.mask);
  const auto q = predict_generative(m, grid, a.mask);
  EXPECT_EQ(p.mode, "G");
  EXPECT_EQ(p.ids, q.ids);
  EXPECT_EQ(p.answer, q.answer);
  EXPECT_EQ(p.answer, m.vocab.detokenize(p.ids));
  EXPECT_EQ(p.ids.size(), p.log_probs.size());
  EXPECT_LE(p.ids.size(), m.config.max_new_tokens);
  EXPECT_EQ(p.prompt_dump, "[obj#0] What is this?");
  EXPECT_TRUE(p.hits.empty());
  const auto c = predict_generative(m, grid, a.mask, "captioning");
  EXPECT_EQ(c.prompt_dump, "[obj#0] Describe this part of the image");
  expect_code([&] { predict_generative(m, grid, a.mask, "vqa"); }, ErrorCode::NotFound);
}

TEST(Predict, RetrievalAugmentedPromptListsNeighboursAscending) {
  const auto m = small_model();
  const auto bench = small_bench();
  const auto ex = examples_of(bench);
  const auto index = build_index(ex, bench.features);
  FeatureLookup lookup = [&](const std::string& id) -> const PatchGrid& { return bench.features.get(id); };
  const auto& q = ex[0];
  const auto& grid = bench.features.get(q.image_id);
  const auto p = predict_rag(m, grid, q.mask, index, lookup, 3, "classification", {q.id});
  EXPECT_EQ(p.mode, "RG");
  ASSERT_EQ(p.hits.size(), 3u);
  for (const auto& h : p.hits) EXPECT_NE(h.record_id, q.id);
  EXPECT_EQ(p.prompt_dump.rfind("The top 3 related objects are: [obj#0] is a ", 0), 0u) << p.prompt_dump;
  EXPECT_NE(p.prompt_dump.find("[obj#3] What is this?"), std::string::npos);
  // The closest neighbour is rendered last, next to the question.
  const auto last = index.find(p.hits.front().record_id)->label.value();
  EXPECT_NE(p.prompt_dump.find("[obj#2] is a " + last + " (similarity"), std::string::npos) << p.prompt_dump;
  const auto again = predict_rag(m, grid, q.mask, index, lookup, 3, "classification", {q.id});
  EXPECT_EQ(again.ids, p.ids);
  expect_code([&] { predict_rag(m, grid, q.mask, index, lookup, 0); }, ErrorCode::Precondition);
}

TEST(Predict, RetrievalOnlyVotesOverNeighbours) {
  const auto bench = small_bench();
  auto ex = examples_of(bench);
  std::vector<ObjectExample> dogs;
  for (const auto& e : ex)
    if (e.label == "dog") dogs.push_back(e);
  const auto index = build_index(dogs, bench.features);
  for (const auto& e : ex) {
    const auto p = predict_retrieval(bench.features.get(e.image_id), e.mask, index, 3);
    EXPECT_EQ(p.answer, "dog");
    EXPECT_EQ(p.mode, "R");
    EXPECT_EQ(p.hits.size(), 3u);
  }
  // A query that is itself in the index finds itself unless excluded.
  const auto full = build_index(ex, bench.features);
  const auto& e = ex[4];
  const auto self = predict_retrieval(bench.features.get(e.image_id), e.mask, full, 1);
  EXPECT_EQ(self.hits[0].record_id, e.id);
  EXPECT_EQ(self.answer, e.label);
  const auto other = predict_retrieval(bench.features.get(e.image_id), e.mask, full, 1, {e.id});
  EXPECT_NE(other.hits[0].record_id, e.id);
}

TEST(RecordText, ClassificationUsesLabelWhenPresent) {
  RetrievalRecord r;
  r.description = "a fluffy cat";
  r.label = "cat";
  EXPECT_EQ(record_text(r, "classification"), "cat");
  EXPECT_EQ(record_text(r, "captioning"), "a fluffy cat");
  r.label.reset();
  EXPECT_EQ(record_text(r, "classification"), "a fluffy cat");
}

TEST(ObjectRepresentation, LayerSelection) {
  const auto m = small_model();
  const auto bench = small_bench();
  const auto& a = bench.annotations[2];
  const auto& grid = bench.features.get(a.image_id);
  EXPECT_EQ(object_representation(m, grid, a.mask, -1), object_vector(m, grid, a.mask).vec);
  const auto h0 = object_representation(m, grid, a.mask, 0);
  EXPECT_EQ(h0.size(), 16u);
  EXPECT_NE(h0, object_vector(m, grid, a.mask).vec);
  expect_code([&] { object_representation(m, grid, a.mask, 1); }, ErrorCode::Config);
}

TEST(Microstep, EncoderPromptDecoderGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    EXPECT_LE(gradient_suite::make_microstep(seed).parameter_count(), 2000u);
    for (const auto& c : gradient_suite::composed_cases(seed))
      EXPECT_LE(c.error, c.tolerance) << c.name << " seed " << seed;
  }
}
