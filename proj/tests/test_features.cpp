#include <gtest/gtest.h>

#include <cmath>
#include <queue>
#include <set>

#include "olive/features.hpp"
#include "test_util.hpp"

using namespace olive;
using olive::testing::expect_code;
using olive::testing::TempDir;

namespace {

SignatureBank small_bank(std::size_t channels = 64, std::uint64_t seed = 7) {
  return SignatureBank::generate(seed, default_class_names(), default_attribute_names(), channels);
}

bool four_connected(const std::vector<std::size_t>& region, std::size_t n) {
  std::set<std::size_t> members(region.begin(), region.end());
  std::set<std::size_t> seen{region.front()};
  std::queue<std::size_t> todo;
  todo.push(region.front());
  while (!todo.empty()) {
    const auto p = todo.front();
    todo.pop();
    const std::size_t r = p / n, c = p % n;
    std::vector<std::size_t> nb;
    if (r > 0) nb.push_back(p - n);
    if (r + 1 < n) nb.push_back(p + n);
    if (c > 0) nb.push_back(p - 1);
    if (c + 1 < n) nb.push_back(p + 1);
    for (auto q : nb)
      if (members.count(q) && seen.insert(q).second) todo.push(q);
  }
  return seen.size() == members.size();
}

}  // namespace

TEST(EncodeImage, SinglePatchZeroPixelsGivesPositionalRow) {
  auto params = VisionParams::zeros(1, 3, 4);
  params.positional = Tensor::matrix(2, 4, {9, 9, 9, 9, 0.5f, -1, 2, 3});
  const Image img{1, 1, 3, {0, 0, 0}};
  const auto grid = encode_image(img, params, "z");
  ASSERT_EQ(grid.features.rows(), 2u);
  EXPECT_EQ(std::vector<float>(grid.patch_row(0).begin(), grid.patch_row(0).end()),
            (std::vector<float>{0.5f, -1, 2, 3}));
}

TEST(EncodeImage, PlantedPatchIsProjectionPlusPosition) {
  Rng rng(3);
  const std::size_t c = 5, d = 6;
  auto params = VisionParams::random(2, c, d, rng);
  Image img{2, 2, c, std::vector<float>(4 * c, 0.0f)};
  const std::vector<float> sig{1, -2, 0.5f, 3, 0.25f};
  for (std::size_t ch = 0; ch < c; ++ch) img.pixels[(1 * 2 + 0) * c + ch] = sig[ch];  // patch (1,0) = index 2
  const auto grid = encode_image(img, params);
  for (std::size_t j = 0; j < d; ++j) {
    double expected = params.positional(3, j);
    for (std::size_t i = 0; i < c; ++i) expected += sig[i] * params.patch_proj(i, j);
    EXPECT_NEAR(grid.patch_row(2)[j], expected, 1e-6);
    EXPECT_FLOAT_EQ(grid.patch_row(0)[j], params.positional(1, j));
  }
}

TEST(EncodeImage, ClsRowIsPatchMeanPlusSeed) {
  Rng rng(11);
  auto params = VisionParams::random(4, 2 * 2 * 3, 8, rng);
  Image img{8, 8, 3, {}};
  for (int i = 0; i < 8 * 8 * 3; ++i) img.pixels.push_back(static_cast<float>(rng.normal()));
  const auto grid = encode_image(img, params);
  for (std::size_t j = 0; j < 8; ++j) {
    double mean = 0;
    for (std::size_t p = 0; p < 16; ++p) mean += grid.patch_row(p)[j];
    mean /= 16;
    EXPECT_NEAR(grid.global_row()[j], mean + params.cls_seed[j] + params.positional(0, j), 1e-5);
  }
}

TEST(EncodeImage, SixteenGridHas257Rows) {
  const auto params = VisionParams::identity(16, 3);
  const Image img{16, 16, 3, std::vector<float>(16 * 16 * 3, 1.0f)};
  const auto grid = encode_image(img, params);
  EXPECT_EQ(grid.features.rows(), 257u);
  EXPECT_EQ(grid.features.cols(), 3u);
}

TEST(EncodeImage, IndivisibleSizeIsShapeError) {
  const auto params = VisionParams::identity(3, 1);
  const Image img{8, 8, 1, std::vector<float>(64, 0.0f)};
  expect_code([&] { encode_image(img, params); }, ErrorCode::Shape);
}

TEST(EncodeImage, IsDeterministic) {
  Rng rng(5);
  const auto params = VisionParams::random(2, 4, 3, rng);
  const Image img{4, 4, 1, std::vector<float>(16, 0.3f)};
  EXPECT_EQ(encode_image(img, params, "a"), encode_image(img, params, "a"));
}

TEST(PatchGrid, RejectsWrongRowCount) {
  expect_code([] { PatchGrid::make(2, 3, Tensor({4, 3}), "x"); }, ErrorCode::Shape);
}

TEST(SyntheticScene, FixedSeedGivesIdenticalBytes) {
  const auto bank = small_bank();
  const std::vector<int> pool{0, 1, 2, 3};
  const SceneConfig cfg;
  const auto a = generate_scene(42, cfg, bank, 3, pool, "s");
  const auto b = generate_scene(42, cfg, bank, 3, pool, "s");
  EXPECT_EQ(a.grid, b.grid);
  ASSERT_EQ(a.objects.size(), b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_EQ(a.objects[i].patches, b.objects[i].patches);
    EXPECT_EQ(a.objects[i].class_id, b.objects[i].class_id);
  }
  const auto c = generate_scene(43, cfg, bank, 3, pool, "s");
  EXPECT_FALSE(a.grid == c.grid);
}

TEST(SyntheticScene, RegionsAreDisjointConnectedAndBounded) {
  const auto bank = small_bank(16);
  const std::vector<int> pool{0, 1, 2, 3, 4, 5};
  SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto scene = generate_scene(seed, cfg, bank, 4, pool, "s");
    std::set<std::size_t> used;
    for (const auto& obj : scene.objects) {
      ASSERT_FALSE(obj.patches.empty());
      EXPECT_LE(obj.patches.size(), cfg.n * cfg.n / 4);
      EXPECT_TRUE(std::is_sorted(obj.patches.begin(), obj.patches.end()));
      EXPECT_TRUE(four_connected(obj.patches, cfg.n)) << "seed " << seed;
      for (auto p : obj.patches) {
        EXPECT_LT(p, cfg.n * cfg.n);
        EXPECT_TRUE(used.insert(p).second) << "overlap at seed " << seed;
      }
    }
  }
}

TEST(SyntheticScene, NoiselessObjectMeanIsSignatureExactly) {
  const auto bank = small_bank();
  SceneConfig cfg;
  cfg.noise_sigma = 0.0f;
  for (int cls = 0; cls < 4; ++cls) {
    const std::vector<int> classes{cls};
    const auto scene = generate_scene(100 + static_cast<std::uint64_t>(cls), cfg, bank, classes, "s");
    const auto& obj = scene.objects[0];
    for (std::size_t j = 0; j < bank.channels(); ++j) {
      double acc = 0;
      for (auto p : obj.patches) acc += scene.grid(p, j);
      EXPECT_EQ(static_cast<float>(acc / static_cast<double>(obj.patches.size())),
                bank.class_signatures(static_cast<std::size_t>(cls), j));
    }
  }
}

// With unit-variance signatures in d=64 the expected cosine between an
// object's mean patch and its signature is about |s| / sqrt(|s|^2 + d*sigma^2/l),
// i.e. above 0.998 for sigma = 0.05; 0.95 leaves a wide margin.
TEST(SyntheticScene, MeanPooledObjectStaysCloseToSignature) {
  const auto bank = small_bank(64, 1);
  const std::vector<int> pool{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  SceneConfig cfg;
  cfg.noise_sigma = 0.05f;
  double worst = 1.0;
  for (std::uint64_t draw = 0; draw < 1000; ++draw) {
    const auto scene = generate_scene(draw, cfg, bank, 1, pool, "mc");
    const auto& obj = scene.objects[0];
    const auto sig = bank.class_signatures.row(static_cast<std::size_t>(obj.class_id));
    double dot = 0, nm = 0, ns = 0;
    for (std::size_t j = 0; j < 64; ++j) {
      double m = 0;
      for (auto p : obj.patches) m += scene.grid(p, j);
      m /= static_cast<double>(obj.patches.size());
      dot += m * sig[j];
      nm += m * m;
      ns += double(sig[j]) * sig[j];
    }
    worst = std::min(worst, dot / std::sqrt(nm * ns));
  }
  EXPECT_GE(worst, 0.95);
}

TEST(SyntheticScene, PlacementFailureAfterRetries) {
  const auto bank = small_bank(4);
  SceneConfig cfg;
  cfg.n = 2;
  cfg.max_retries = 5;
  const std::vector<int> classes{0, 1, 2, 3, 4};
  expect_code([&] { generate_scene(1, cfg, bank, classes, "full"); }, ErrorCode::Placement);
}

TEST(SyntheticScene, RejectsUnknownClassAndEmptyObjectList) {
  const auto bank = small_bank(4);
  const std::vector<int> bad{99};
  expect_code([&] { generate_scene(1, SceneConfig{}, bank, bad, "x"); }, ErrorCode::Config);
  const std::vector<int> none;
  expect_code([&] { generate_scene(1, SceneConfig{}, bank, none, "x"); }, ErrorCode::Config);
}

TEST(SyntheticScene, AnnotationsCarryTemplatedCaptions) {
  const auto bank = small_bank(8);
  const std::vector<int> classes{2, 5};
  const auto scene = generate_scene(9, SceneConfig{}, bank, classes, "img9");
  const auto ann = scene.annotations(bank);
  ASSERT_EQ(ann.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(ann[i].image_id, "img9");
    EXPECT_EQ(ann[i].label, bank.class_names[static_cast<std::size_t>(classes[i])]);
    const auto attr = bank.attribute_names[static_cast<std::size_t>(scene.objects[i].attribute_id)];
    EXPECT_EQ(*ann[i].caption, "a " + attr + " " + ann[i].label);
    EXPECT_EQ(ann[i].mask.indices(), scene.objects[i].patches);
  }
}

TEST(SyntheticScene, SceneFeaturesExposeRawPatches) {
  const auto bank = small_bank(8);
  const auto scene = generate_scene(4, SceneConfig{}, bank, 2, std::vector<int>{0, 1}, "f");
  const auto grid = scene_features(scene);
  EXPECT_EQ(grid.n, 8u);
  EXPECT_EQ(grid.d, 8u);
  for (std::size_t p = 0; p < 64; ++p)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(grid.patch_row(p)[j], scene.grid(p, j));
}

TEST(FeatureFile, RoundTripIsBitIdentical) {
  TempDir dir("feat");
  Rng rng(2);
  auto grid = PatchGrid::make(3, 5, random_normal(rng, {10, 5}, 1.0), "image-\xc3\xa9");
  grid.features(0, 0) = -0.0f;
  save_features(grid, dir / "g.olvf");
  const auto back = load_features(dir / "g.olvf");
  EXPECT_EQ(back, grid);
  EXPECT_TRUE(std::signbit(back.features(0, 0)));
}

TEST(FeatureFile, PayloadLengthMatchesHeaderArithmetic) {
  EXPECT_EQ(feature_payload_bytes(16, 1024), 257ull * 1024ull * 4ull);
  const auto grid = PatchGrid::make(16, 1024, Tensor({257, 1024}), "big");
  const auto bytes = serialize_features(grid);
  const std::size_t header = 4 + 4 + 4 + 4 + 8 + 3;
  EXPECT_EQ(bytes.size() - header, 1052672u);
}

TEST(FeatureFile, TruncationReportsOffset) {
  const auto grid = PatchGrid::make(2, 2, Tensor({5, 2}, 1.0f), "t");
  auto bytes = serialize_features(grid);
  bytes.resize(bytes.size() - 3);
  try {
    parse_features(bytes);
    FAIL() << "expected format error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u + 4 + 4 + 4 + 8 + 1);  // start of the short payload
  }
  const std::vector<unsigned char> tiny{'O', 'L'};
  EXPECT_THROW(parse_features(tiny), FormatError);
}

TEST(FeatureFile, BadMagicAndVersionAreFormatErrors) {
  const auto grid = PatchGrid::make(1, 1, Tensor({2, 1}), "v");
  auto bytes = serialize_features(grid);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    parse_features(bad_magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto bad_version = bytes;
  bad_version[4] = 2;
  try {
    parse_features(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  bytes.push_back(0);
  EXPECT_THROW(parse_features(bytes), FormatError);
}

TEST(FeatureFile, MissingFileIsNotFound) {
  expect_code([] { load_features("/nonexistent/olive/none.olvf"); }, ErrorCode::NotFound);
}

TEST(AnnotationFile, RoundTripsMasksLabelsAndCaptions) {
  TempDir dir("ann");
  const auto bank = small_bank(8);
  const auto scene = generate_scene(12, SceneConfig{}, bank, 3, std::vector<int>{0, 1, 2}, "s12");
  auto ann = scene.annotations(bank);
  ann[1].caption.reset();
  write_annotations(dir / "a.jsonl", ann);
  const auto back = read_annotations(dir / "a.jsonl");
  ASSERT_EQ(back.size(), ann.size());
  for (std::size_t i = 0; i < ann.size(); ++i) {
    EXPECT_EQ(back[i].image_id, ann[i].image_id);
    EXPECT_EQ(back[i].mask, ann[i].mask);
    EXPECT_EQ(back[i].label, ann[i].label);
    EXPECT_EQ(back[i].caption, ann[i].caption);
  }
}

TEST(AnnotationFile, RecordShapeMatchesWireFormat) {
  const auto mask = ObjectMask::from_indices(2, std::vector<std::size_t>{1, 2});
  const auto j = annotation_to_json({"im", mask, "cat", std::string("a red cat")});
  EXPECT_EQ(j.dump(), R"({"caption":"a red cat","image_id":"im","label":"cat","mask_rle":[1,2,1]})");
  expect_code([] { annotation_from_json(nlohmann::json::parse(R"({"image_id":"x"})")); }, ErrorCode::Format);
}
