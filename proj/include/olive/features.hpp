#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "olive/binary_io.hpp"
#include "olive/error.hpp"
#include "olive/mask.hpp"
#include "olive/random.hpp"
#include "olive/tensor.hpp"

namespace olive {

/// Patch-level image features: row 0 is the global token, rows 1..n^2 are
/// the patches in row-major order.
struct PatchGrid {
  std::size_t n = 0;
  std::size_t d = 0;
  Tensor features;
  std::string image_id;

  static PatchGrid make(std::size_t n, std::size_t d, Tensor features, std::string image_id) {
    require(n >= 1 && d >= 1, ErrorCode::Shape, "patch grid needs n >= 1 and d >= 1");
    require(features.rank() == 2 && features.rows() == n * n + 1 && features.cols() == d, ErrorCode::Shape,
            "patch grid features must be " + std::to_string(n * n + 1) + "x" + std::to_string(d) + ", got " +
                shape_str(features.shape()));
    return PatchGrid{n, d, std::move(features), std::move(image_id)};
  }

  std::size_t patch_count() const noexcept { return n * n; }
  std::span<const float> global_row() const { return features.row(0); }
  std::span<const float> patch_row(std::size_t index) const { return features.row(1 + index); }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

/// Row-major H x W x C pixel buffer.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;
};

/// Toy patch encoder: per-patch linear projection plus positional embedding.
struct VisionParams {
  std::size_t n = 0;
  Tensor patch_proj;  // (patch_h * patch_w * channels) x d
  Tensor positional;  // (n^2 + 1) x d
  Tensor cls_seed;    // 1 x d

  std::size_t d() const { return patch_proj.cols(); }

  static VisionParams zeros(std::size_t n, std::size_t patch_dim, std::size_t d) {
    return {n, Tensor({patch_dim, d}), Tensor({n * n + 1, d}), Tensor({1, d})};
  }
  /// Patch rows equal the raw patch values (patch_dim == d, no positions).
  static VisionParams identity(std::size_t n, std::size_t d) {
    auto p = zeros(n, d, d);
    for (std::size_t i = 0; i < d; ++i) p.patch_proj(i, i) = 1.0f;
    return p;
  }
  static VisionParams random(std::size_t n, std::size_t patch_dim, std::size_t d, Rng& rng) {
    auto p = zeros(n, patch_dim, d);
    p.patch_proj = random_normal(rng, {patch_dim, d}, 1.0 / std::sqrt(static_cast<double>(patch_dim)));
    p.positional = random_normal(rng, {n * n + 1, d}, 0.02);
    p.cls_seed = random_normal(rng, {1, d}, 0.02);
    return p;
  }
};

inline PatchGrid encode_image(const Image& image, const VisionParams& params, std::string image_id = {}) {
  const std::size_t n = params.n;
  require(n >= 1 && image.height % n == 0 && image.width % n == 0 && image.height > 0 && image.width > 0,
          ErrorCode::Shape,
          "image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
              " is not divisible into " + std::to_string(n) + "x" + std::to_string(n) + " patches");
  require(image.pixels.size() == image.height * image.width * image.channels, ErrorCode::Shape,
          "pixel buffer does not match image extent");
  const std::size_t ph = image.height / n, pw = image.width / n, c = image.channels;
  const std::size_t patch_dim = ph * pw * c, d = params.d();
  require(params.patch_proj.rows() == patch_dim, ErrorCode::Shape,
          "patch projection expects " + std::to_string(params.patch_proj.rows()) + " inputs, patches have " +
              std::to_string(patch_dim));
  require(params.positional.rows() == n * n + 1 && params.positional.cols() == d && params.cls_seed.size() == d,
          ErrorCode::Shape, "positional embeddings must be (n^2+1) x d");

  Tensor features({n * n + 1, d});
  std::vector<float> patch(patch_dim);
  std::vector<double> mean(d, 0.0);
  for (std::size_t pr = 0; pr < n; ++pr) {
    for (std::size_t pc = 0; pc < n; ++pc) {
      std::size_t k = 0;
      for (std::size_t y = pr * ph; y < (pr + 1) * ph; ++y)
        for (std::size_t x = pc * pw; x < (pc + 1) * pw; ++x)
          for (std::size_t ch = 0; ch < c; ++ch) patch[k++] = image.pixels[(y * image.width + x) * c + ch];
      const std::size_t row = 1 + pr * n + pc;
      auto out = features.row(row);
      const auto pos = params.positional.row(row);
      for (std::size_t j = 0; j < d; ++j) {
        float acc = 0.0f;
        for (std::size_t i = 0; i < patch_dim; ++i) acc += patch[i] * params.patch_proj(i, j);
        out[j] = acc + pos[j];
        mean[j] += out[j];
      }
    }
  }
  auto cls = features.row(0);
  for (std::size_t j = 0; j < d; ++j) {
    cls[j] = static_cast<float>(mean[j] / static_cast<double>(n * n)) + params.cls_seed[j] + params.positional(0, j);
  }
  return PatchGrid::make(n, d, std::move(features), std::move(image_id));
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Class and attribute prototypes shared by every scene of a benchmark.
struct SignatureBank {
  std::vector<std::string> class_names;
  std::vector<std::string> attribute_names;
  Tensor class_signatures;      // classes x channels, entries ~ N(0, 1)
  Tensor attribute_signatures;  // attributes x channels

  std::size_t channels() const { return class_signatures.cols(); }
  std::size_t num_classes() const { return class_names.size(); }

  static SignatureBank generate(std::uint64_t seed, std::vector<std::string> class_names,
                                std::vector<std::string> attribute_names, std::size_t channels) {
    require(!class_names.empty() && channels >= 1, ErrorCode::Config, "signature bank needs classes and channels");
    if (attribute_names.empty()) attribute_names.push_back("plain");
    Rng rng(seed);
    SignatureBank bank;
    bank.class_signatures = random_normal(rng, {class_names.size(), channels}, 1.0);
    bank.attribute_signatures = random_normal(rng, {attribute_names.size(), channels}, 1.0);
    bank.class_names = std::move(class_names);
    bank.attribute_names = std::move(attribute_names);
    return bank;
  }
};

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"cat",   "dog",   "bird",   "horse", "sheep", "cow",
                                              "zebra", "apple", "banana", "truck", "boat",  "kite",
                                              "turtle", "shark"};
  return names;
}

inline const std::vector<std::string>& default_attribute_names() {
  static const std::vector<std::string> names{"red", "green", "blue", "striped", "spotted", "small"};
  return names;
}

struct SceneConfig {
  std::size_t n = 8;
  float noise_sigma = 0.05f;
  /// Per-object appearance offset shared by all of its patches.
  float instance_sigma = 0.0f;
  /// Weight of the attribute prototype in object patches; 0 keeps object
  /// patches centred exactly on the class signature.
  float attribute_scale = 0.0f;
  std::size_t max_retries = 200;
};

struct SceneObject {
  int class_id = 0;
  int attribute_id = 0;
  std::vector<std::size_t> patches;  // ascending
};

struct Annotation {
  std::string image_id;
  ObjectMask mask;
  std::string label;
  std::optional<std::string> caption;
};

struct SyntheticScene {
  std::string image_id;
  std::size_t n = 0;
  Tensor grid;              // n^2 x channels, raw per-patch values
  Tensor class_signatures;  // copied from the bank
  std::vector<SceneObject> objects;
  float noise_sigma = 0.0f;

  std::size_t channels() const { return grid.cols(); }

  Image as_image() const {
    return Image{n, n, channels(), grid.values()};
  }

  std::vector<Annotation> annotations(const SignatureBank& bank) const {
    std::vector<Annotation> out;
    for (const auto& obj : objects) {
      const auto& cls = bank.class_names[static_cast<std::size_t>(obj.class_id)];
      const auto& attr = bank.attribute_names[static_cast<std::size_t>(obj.attribute_id)];
      out.push_back({image_id, ObjectMask::from_indices(n, obj.patches), cls, "a " + attr + " " + cls});
    }
    return out;
  }
};

namespace detail {

// Random 4-connected region grown from a free seed patch; empty on failure.
inline std::vector<std::size_t> grow_region(Rng& rng, std::size_t n, std::size_t size,
                                            const std::vector<std::uint8_t>& occupied) {
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < n * n; ++i)
    if (!occupied[i]) free.push_back(i);
  if (free.size() < size) return {};
  std::vector<std::uint8_t> in_region(n * n, 0);
  std::vector<std::size_t> region{free[rng.index(free.size())]};
  in_region[region[0]] = 1;
  while (region.size() < size) {
    std::vector<std::size_t> frontier;
    for (auto p : region) {
      const std::size_t r = p / n, c = p % n;
      const std::size_t cand[4] = {r > 0 ? p - n : SIZE_MAX, r + 1 < n ? p + n : SIZE_MAX,
                                   c > 0 ? p - 1 : SIZE_MAX, c + 1 < n ? p + 1 : SIZE_MAX};
      for (auto q : cand) {
        if (q == SIZE_MAX || occupied[q] || in_region[q]) continue;
        if (std::find(frontier.begin(), frontier.end(), q) == frontier.end()) frontier.push_back(q);
      }
    }
    if (frontier.empty()) return {};
    std::sort(frontier.begin(), frontier.end());
    const auto pick = frontier[rng.index(frontier.size())];
    in_region[pick] = 1;
    region.push_back(pick);
  }
  std::sort(region.begin(), region.end());
  return region;
}

}  // namespace detail

/// Places one object per entry of `object_classes` as disjoint random
/// 4-connected regions of 1..n^2/4 patches. Deterministic in `seed`.
inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config, const SignatureBank& bank,
                                     std::span<const int> object_classes, std::string image_id) {
  const std::size_t n = config.n;
  require(n >= 1, ErrorCode::Config, "scene grid size must be >= 1");
  require(!object_classes.empty(), ErrorCode::Config, "a scene needs at least one object");
  for (int c : object_classes) {
    require(c >= 0 && static_cast<std::size_t>(c) < bank.num_classes(), ErrorCode::Config,
            "class id " + std::to_string(c) + " is not in the label set");
  }
  Rng rng(seed);
  const std::size_t channels = bank.channels();
  const std::size_t max_region = std::max<std::size_t>(1, n * n / 4);

  SyntheticScene scene;
  scene.image_id = std::move(image_id);
  scene.n = n;
  scene.class_signatures = bank.class_signatures;
  scene.noise_sigma = config.noise_sigma;
  scene.grid = Tensor({n * n, channels});

  std::vector<std::uint8_t> occupied(n * n, 0);
  for (int cls : object_classes) {
    std::vector<std::size_t> region;
    for (std::size_t attempt = 0; attempt < config.max_retries && region.empty(); ++attempt) {
      const auto size = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(max_region)));
      region = detail::grow_region(rng, n, size, occupied);
    }
    require(!region.empty(), ErrorCode::Placement,
            "could not place object " + std::to_string(scene.objects.size()) + " after " +
                std::to_string(config.max_retries) + " attempts");
    for (auto p : region) occupied[p] = 1;
    const int attr = static_cast<int>(rng.index(bank.attribute_names.size()));
    scene.objects.push_back({cls, attr, std::move(region)});
  }

  // Fill patch values after placement so the noise stream does not depend on
  // placement retries of later objects.
  const auto sigma = static_cast<double>(config.noise_sigma);
  for (std::size_t p = 0; p < n * n; ++p) {
    for (auto& v : scene.grid.row(p)) v = static_cast<float>(rng.normal() * sigma);
  }
  for (const auto& obj : scene.objects) {
    std::vector<float> instance(channels, 0.0f);
    for (auto& v : instance) v = static_cast<float>(rng.normal() * config.instance_sigma);
    const auto sig = bank.class_signatures.row(static_cast<std::size_t>(obj.class_id));
    const auto attr = bank.attribute_signatures.row(static_cast<std::size_t>(obj.attribute_id));
    for (auto p : obj.patches) {
      auto row = scene.grid.row(p);
      for (std::size_t j = 0; j < channels; ++j) {
        float base = sig[j];
        if (config.instance_sigma != 0.0f) base += instance[j];
        if (config.attribute_scale != 0.0f) base += config.attribute_scale * attr[j];
        row[j] = sigma == 0.0 ? base : base + row[j];
      }
    }
  }
  return scene;
}

/// Random class per object drawn from `label_pool`.
inline SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config, const SignatureBank& bank,
                                     std::size_t num_objects, std::span<const int> label_pool, std::string image_id) {
  require(num_objects >= 1, ErrorCode::Config, "num_objects must be >= 1");
  require(!label_pool.empty(), ErrorCode::Config, "label pool is empty");
  Rng rng(seed ^ 0x5ce4e5ULL);
  std::vector<int> classes(num_objects);
  for (auto& c : classes) c = label_pool[rng.index(label_pool.size())];
  return generate_scene(seed, config, bank, std::span<const int>(classes), std::move(image_id));
}

/// Features for a synthetic scene: raw patch values through the identity
/// encoder (no positional offset), CLS row = mean of patches.
inline PatchGrid scene_features(const SyntheticScene& scene) {
  return encode_image(scene.as_image(), VisionParams::identity(scene.n, scene.channels()), scene.image_id);
}

// ---------------------------------------------------------------------------
// Feature files

inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline std::vector<unsigned char> serialize_features(const PatchGrid& grid) {
  io::ByteWriter w;
  w.magic("OLVF");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(grid.n));
  w.u32(static_cast<std::uint32_t>(grid.d));
  w.string_u64(grid.image_id);
  w.f32s(grid.features.values());
  return w.buffer();
}

inline PatchGrid parse_features(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("OLVF");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kFeatureFileVersion) {
    throw FormatError("unsupported feature file version " + std::to_string(version), version_at);
  }
  const auto header_at = r.offset();
  const std::size_t n = r.u32("n");
  const std::size_t d = r.u32("d");
  if (n == 0 || d == 0) throw FormatError("feature header has n or d equal to zero", header_at);
  const auto id_len = r.u64("image id length");
  auto image_id = r.string_of(id_len, "image id");
  const std::size_t count = (n * n + 1) * d;
  const auto payload_at = r.offset();
  auto values = r.f32s(count, "feature payload");
  if (r.remaining() != 0) throw FormatError("trailing bytes after feature payload", payload_at + count * 4);
  return PatchGrid::make(n, d, Tensor({n * n + 1, d}, std::move(values)), std::move(image_id));
}

/// Expected payload size in bytes for a grid of the given dimensions.
inline std::uint64_t feature_payload_bytes(std::uint64_t n, std::uint64_t d) { return (n * n + 1) * d * 4; }

inline void save_features(const PatchGrid& grid, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_features(grid));
}

inline PatchGrid load_features(const std::filesystem::path& path) { return parse_features(io::read_file(path)); }

/// Feature grids keyed by image id, ordered by id.
class FeatureStore {
 public:
  void add(PatchGrid grid) {
    require(!grid.image_id.empty(), ErrorCode::Config, "feature grid has no image id");
    auto id = grid.image_id;
    grids_.insert_or_assign(std::move(id), std::move(grid));
  }
  const PatchGrid& get(const std::string& image_id) const {
    const auto it = grids_.find(image_id);
    require(it != grids_.end(), ErrorCode::NotFound, "unknown image \"" + image_id + "\"");
    return it->second;
  }
  bool contains(const std::string& image_id) const { return grids_.count(image_id) > 0; }
  std::size_t size() const noexcept { return grids_.size(); }
  const std::map<std::string, PatchGrid>& grids() const noexcept { return grids_; }

  /// Writes one "<image_id>.olvf" file per grid.
  void save_dir(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [id, g] : grids_) save_features(g, dir / (id + ".olvf"));
  }
  /// Loads every "*.olvf" file in `dir`; a missing directory is an error.
  static FeatureStore load_dir(const std::filesystem::path& dir) {
    require(std::filesystem::is_directory(dir), ErrorCode::NotFound, "feature directory " + dir.string() + " not found");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".olvf") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    FeatureStore store;
    for (const auto& f : files) store.add(load_features(f));
    return store;
  }

 private:
  std::map<std::string, PatchGrid> grids_;
};

// ---------------------------------------------------------------------------
// Annotation files: JSON lines {image_id, mask_rle, label, caption?}

inline nlohmann::json annotation_to_json(const Annotation& a) {
  nlohmann::json j{{"image_id", a.image_id}, {"mask_rle", encode_rle(a.mask)}, {"label", a.label}};
  if (a.caption) j["caption"] = *a.caption;
  return j;
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("image_id") && j.contains("mask_rle") && j.contains("label"), ErrorCode::Format,
          "annotation record needs image_id, mask_rle and label");
  Annotation a;
  a.image_id = j.at("image_id").get<std::string>();
  const auto runs = j.at("mask_rle").get<std::vector<std::uint32_t>>();
  a.mask = decode_rle(runs);
  a.label = j.at("label").get<std::string>();
  if (j.contains("caption") && !j.at("caption").is_null()) a.caption = j.at("caption").get<std::string>();
  return a;
}

inline void write_annotations(const std::filesystem::path& path, std::span<const Annotation> annotations) {
  std::string text;
  for (const auto& a : annotations) text += annotation_to_json(a).dump() + "\n";
  io::write_file_atomic(path, text);
}

inline std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::NotFound, "cannot open " + path.string());
  std::vector<Annotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(annotation_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Format, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace olive
