#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "olive/features.hpp"
#include "olive/object_encoder.hpp"
#include "olive/retrieval.hpp"

namespace olive {

/// Class names with a seen/unseen partition. Unseen names never become
/// training targets.
struct LabelSet {
  std::vector<std::string> names;
  std::set<std::string> unseen;

  bool is_unseen(const std::string& name) const { return unseen.count(name) > 0; }
  std::vector<std::string> seen() const {
    std::vector<std::string> out;
    for (const auto& n : names)
      if (!is_unseen(n)) out.push_back(n);
    return out;
  }
  void validate() const {
    std::set<std::string> uniq(names.begin(), names.end());
    require(uniq.size() == names.size(), ErrorCode::Config, "class names must be unique");
    for (const auto& u : unseen) require(uniq.count(u) > 0, ErrorCode::Config, "unseen class \"" + u + "\" is not a class");
  }
};

/// One annotated object. `id` is unique across every split and doubles as
/// the record id when the object is placed in a retrieval index.
struct ObjectExample {
  RecordId id = 0;
  std::string image_id;
  ObjectMask mask;
  std::string label;
  std::string caption;
};

struct Splits {
  std::vector<ObjectExample> train;
  std::vector<ObjectExample> val;
  std::vector<ObjectExample> retrieval;
  std::vector<ObjectExample> unseen;  // unseen-class objects outside the retrieval images
};

struct SplitConfig {
  std::size_t retrieval_per_class = 20;
  double val_fraction = 0.2;
};

/// Image-disjoint splits. Images are visited in a seeded order; an image
/// goes to the retrieval split while it still supplies some class short of
/// its quota, and only the objects that fill a quota are kept from it.
/// Remaining images are divided into train and val; their unseen-class
/// objects form the `unseen` split.
inline Splits build_datasets(std::span<const Annotation> annotations, const LabelSet& labels, const SplitConfig& cfg,
                             Rng& rng) {
  labels.validate();
  require(cfg.val_fraction >= 0.0 && cfg.val_fraction < 1.0, ErrorCode::Config, "val_fraction must be in [0, 1)");
  std::map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const auto& a = annotations[i];
    require(std::find(labels.names.begin(), labels.names.end(), a.label) != labels.names.end(), ErrorCode::Config,
            "annotation label \"" + a.label + "\" is not in the label set");
    by_image[a.image_id].push_back(i);
  }
  std::vector<std::string> images;
  for (const auto& [id, _] : by_image) images.push_back(id);
  rng.shuffle(images);

  auto example = [&](std::size_t i) {
    const auto& a = annotations[i];
    return ObjectExample{static_cast<RecordId>(i), a.image_id, a.mask, a.label, a.caption.value_or("a " + a.label)};
  };

  Splits s;
  std::map<std::string, std::size_t> filled;
  auto short_of = [&](const std::string& label) { return filled[label] < cfg.retrieval_per_class; };
  std::vector<std::string> rest;
  for (const auto& img : images) {
    const auto& objs = by_image[img];
    const bool useful = std::any_of(objs.begin(), objs.end(), [&](std::size_t i) { return short_of(annotations[i].label); });
    if (!useful) {
      rest.push_back(img);
      continue;
    }
    for (auto i : objs) {
      if (!short_of(annotations[i].label)) continue;
      ++filled[annotations[i].label];
      s.retrieval.push_back(example(i));
    }
  }
  for (const auto& name : labels.names) {
    require(filled[name] == cfg.retrieval_per_class, ErrorCode::Config,
            "only " + std::to_string(filled[name]) + " examples of \"" + name + "\" for a retrieval quota of " +
                std::to_string(cfg.retrieval_per_class));
  }
  const auto val_images = static_cast<std::size_t>(cfg.val_fraction * static_cast<double>(rest.size()) + 0.5);
  for (std::size_t r = 0; r < rest.size(); ++r) {
    for (auto i : by_image[rest[r]]) {
      if (labels.is_unseen(annotations[i].label)) s.unseen.push_back(example(i));
      else (r < val_images ? s.val : s.train).push_back(example(i));
    }
  }
  require(!s.train.empty(), ErrorCode::Config, "no training examples left after the retrieval split");
  auto by_id = [](const ObjectExample& a, const ObjectExample& b) { return a.id < b.id; };
  for (auto* split : {&s.train, &s.val, &s.retrieval, &s.unseen}) std::sort(split->begin(), split->end(), by_id);
  return s;
}

/// Index of mean-pooled embeddings keyed by example id, labelled, with the
/// caption as description.
inline RetrievalIndex build_index(std::span<const ObjectExample> examples, const FeatureStore& features) {
  RetrievalIndex index;
  for (const auto& e : examples) {
    index.insert_record({e.id, e.mask, e.caption, e.image_id,
                         encode_meanpool(select_masked(features.get(e.image_id), e.mask)), e.label});
  }
  return index;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

struct BenchmarkConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> classes = default_class_names();
  std::vector<std::string> attributes = default_attribute_names();
  std::size_t channels = 64;
  std::size_t images = 200;
  std::size_t objects_per_image = 3;
  SceneConfig scene;
};

struct Benchmark {
  SignatureBank bank;
  FeatureStore features;
  std::vector<SyntheticScene> scenes;
  std::vector<Annotation> annotations;
};

/// Scenes whose objects cycle through the classes so every class gets the
/// same number of objects (up to one).
inline Benchmark generate_benchmark(const BenchmarkConfig& cfg) {
  require(!cfg.classes.empty() && cfg.images >= 1 && cfg.objects_per_image >= 1, ErrorCode::Config,
          "benchmark needs classes, images and objects");
  Benchmark b;
  b.bank = SignatureBank::generate(cfg.seed, cfg.classes, cfg.attributes, cfg.channels);
  Rng rng(cfg.seed ^ 0xbe7c4ULL);
  std::vector<int> deck;
  auto draw = [&] {
    if (deck.empty()) {
      for (std::size_t c = 0; c < cfg.classes.size(); ++c) deck.push_back(static_cast<int>(c));
      rng.shuffle(deck);
    }
    const int c = deck.back();
    deck.pop_back();
    return c;
  };
  for (std::size_t i = 0; i < cfg.images; ++i) {
    std::vector<int> classes;
    for (std::size_t o = 0; o < cfg.objects_per_image; ++o) classes.push_back(draw());
    char id[32];
    std::snprintf(id, sizeof id, "img%05zu", i);
    auto scene = generate_scene(rng.next_u64(), cfg.scene, b.bank, std::span<const int>(classes), id);
    b.features.add(scene_features(scene));
    for (auto& a : scene.annotations(b.bank)) b.annotations.push_back(std::move(a));
    b.scenes.push_back(std::move(scene));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Dataset directories: features/<id>.olvf, annotations.jsonl, meta.json

struct DatasetFiles {
  FeatureStore features;
  std::vector<Annotation> annotations;
  std::vector<std::string> classes;
  std::vector<std::string> attributes;
};

inline void save_dataset(const std::filesystem::path& dir, const Benchmark& b) {
  std::filesystem::create_directories(dir);
  b.features.save_dir(dir / "features");
  write_annotations(dir / "annotations.jsonl", b.annotations);
  const nlohmann::json meta{{"classes", b.bank.class_names}, {"attributes", b.bank.attribute_names}};
  io::write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

inline DatasetFiles load_dataset(const std::filesystem::path& dir) {
  DatasetFiles d;
  const auto bytes = io::read_file(dir / "meta.json");
  try {
    const auto meta = nlohmann::json::parse(bytes.begin(), bytes.end());
    d.classes = meta.at("classes").get<std::vector<std::string>>();
    d.attributes = meta.value("attributes", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, (dir / "meta.json").string() + ": " + e.what());
  }
  d.features = FeatureStore::load_dir(dir / "features");
  d.annotations = read_annotations(dir / "annotations.jsonl");
  return d;
}

}  // namespace olive
