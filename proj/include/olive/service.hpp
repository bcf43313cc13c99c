#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "olive/model.hpp"

namespace olive {

// ---------------------------------------------------------------------------
// Configuration

struct ServiceConfig {
  std::filesystem::path index_path;  // required; created on the first mutation
  std::filesystem::path checkpoint;  // optional; enables G and RG
  std::filesystem::path features_dir;  // optional; empty means no scenes
};

using EnvLookup = std::function<const char*(const char*)>;

/// Fills unset paths from OLIVE_INDEX, OLIVE_CHECKPOINT and
/// OLIVE_FEATURES_DIR. Paths given explicitly are kept.
inline ServiceConfig resolve_service_config(ServiceConfig c, const EnvLookup& env = [](const char* k) {
  return std::getenv(k);
}) {
  auto fill = [&](std::filesystem::path& p, const char* name) {
    if (!p.empty()) return;
    if (const char* v = env(name); v && *v) p = v;
  };
  fill(c.index_path, "OLIVE_INDEX");
  fill(c.checkpoint, "OLIVE_CHECKPOINT");
  fill(c.features_dir, "OLIVE_FEATURES_DIR");
  require(!c.index_path.empty(), ErrorCode::Config, "an index path is required (--index or OLIVE_INDEX)");
  return c;
}

// ---------------------------------------------------------------------------
// Session

/// Request handlers over JSON bodies. Reads share a lock; every index
/// mutation runs on a copy that is persisted before it replaces the live
/// index, so readers always see one consistent revision.
class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    if (!cfg_.features_dir.empty()) features_ = FeatureStore::load_dir(cfg_.features_dir);
    if (!cfg_.checkpoint.empty()) model_ = load_checkpoint(cfg_.checkpoint);
    if (std::filesystem::exists(cfg_.index_path)) revision_ = load_index_into(index_, cfg_.index_path);
  }

  std::uint64_t revision() const {
    std::shared_lock lock(mutex_);
    return revision_;
  }

  nlohmann::json health() const {
    std::shared_lock lock(mutex_);
    return {{"status", "ok"},
            {"revision", revision_},
            {"records", index_.size()},
            {"scenes", features_.size()},
            {"checkpoint", model_.has_value()}};
  }

  /// Catalog ordered by image id; the thumbnail is the per-patch channel mean.
  nlohmann::json scenes() const {
    auto list = nlohmann::json::array();
    for (const auto& [id, g] : features_.grids()) {
      std::vector<float> thumb(g.n * g.n);
      for (std::size_t p = 0; p < thumb.size(); ++p) {
        double s = 0.0;
        for (float x : g.patch_row(p)) s += x;
        thumb[p] = static_cast<float>(s / static_cast<double>(g.d));
      }
      list.push_back({{"image_id", id}, {"n", g.n}, {"d", g.d}, {"thumbnail", thumb}});
    }
    return {{"scenes", list}};
  }

  nlohmann::json embed(const nlohmann::json& body) const {
    const auto region = parse_region(body);
    const auto mf = select_masked(*region.grid, region.mask);
    nlohmann::json out{{"image_id", region.grid->image_id}, {"l", mf.l()}, {"meanpool", encode_meanpool(mf).vec}};
    out["resampler"] = model_ ? nlohmann::json(object_vector(*model_, *region.grid, region.mask).vec)
                              : nlohmann::json(nullptr);
    return out;
  }

  nlohmann::json query(const nlohmann::json& body) const {
    const auto region = parse_region(body);
    const auto k = body.value("k", std::size_t{5});
    const auto exclude = parse_exclude(body);
    std::shared_lock lock(mutex_);
    require(index_.size() > 0, ErrorCode::EmptyIndex, "the retrieval index is empty");
    const auto hits = index_.query_topk(encode_meanpool(select_masked(*region.grid, region.mask)), k, exclude);
    return {{"revision", revision_}, {"k", k}, {"hits", enrich(hits.hits)}};
  }

  nlohmann::json list_records() const {
    std::shared_lock lock(mutex_);
    auto list = nlohmann::json::array();
    for (const auto& r : index_.records()) list.push_back(record_view(r));
    return {{"revision", revision_}, {"records", list}};
  }

  nlohmann::json add_record(const nlohmann::json& body) {
    const auto region = parse_region(body);
    const auto description = body.at("description").get<std::string>();
    std::optional<std::string> label;
    if (body.contains("label") && !body.at("label").is_null()) label = body.at("label").get<std::string>();
    auto embedding = encode_meanpool(select_masked(*region.grid, region.mask));
    require(embedding.norm > 0.0, ErrorCode::DegenerateEmbedding, "region embedding has zero norm");

    std::unique_lock lock(mutex_);
    RetrievalIndex next = index_;
    const RecordId id = next.next_id();
    next.insert_record({id, region.mask, description, region.grid->image_id, std::move(embedding), label});
    commit(next);
    return {{"record_id", id}, {"revision", revision_}};
  }

  nlohmann::json delete_record(RecordId id) {
    std::unique_lock lock(mutex_);
    RetrievalIndex next = index_;
    next.remove_record(id);
    commit(next);
    return {{"record_id", id}, {"revision", revision_}};
  }

  /// R, G or RG prediction stamped with the revision it read.
  nlohmann::json predict(const nlohmann::json& body) const {
    const auto region = parse_region(body);
    const auto mode = body.value("mode", std::string("RG"));
    const auto task = body.value("task", std::string("classification"));
    const auto k = body.value("k", std::size_t{5});
    const auto exclude = parse_exclude(body);
    require(mode == "R" || mode == "G" || mode == "RG", ErrorCode::Usage, "mode must be R, G or RG");
    require(mode == "R" || model_.has_value(), ErrorCode::Precondition, "mode " + mode + " needs a checkpoint");
    require(k >= 1 || mode == "G", ErrorCode::Precondition, "mode " + mode + " needs k >= 1");
    if (mode != "R") require(is_known_task(task), ErrorCode::NotFound, "unknown task \"" + task + "\"");

    std::shared_lock lock(mutex_);
    if (mode != "G") require(index_.size() > 0, ErrorCode::EmptyIndex, "mode " + mode + " needs a nonempty index");
    Prediction p;
    if (mode == "R") {
      p = predict_retrieval(*region.grid, region.mask, index_, k, exclude);
    } else if (mode == "G") {
      p = predict_generative(*model_, *region.grid, region.mask, task);
    } else {
      p = predict_rag(*model_, *region.grid, region.mask, index_, lookup(), k, task, exclude);
    }
    return {{"mode", p.mode},
            {"task", task},
            {"answer", p.answer},
            {"revision", revision_},
            {"prompt", p.prompt_text},
            {"prompt_dump", p.prompt_dump},
            {"token_ids", p.ids},
            {"log_probs", p.log_probs},
            {"hits", enrich(p.hits)}};
  }

  /// Pixel or polygon mask to patch RLE under the half-coverage rule.
  static nlohmann::json rasterize(const nlohmann::json& body) {
    const auto n = body.at("n").get<std::size_t>();
    ObjectMask mask;
    if (body.contains("pixels")) {
      const auto pixels = body.at("pixels").get<std::vector<std::uint8_t>>();
      mask = rasterize_pixels(pixels, body.at("height").get<std::size_t>(), body.at("width").get<std::size_t>(), n);
    } else {
      std::vector<Point> poly;
      for (const auto& p : body.at("polygon")) poly.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      mask = rasterize_polygon(poly, body.at("width").get<double>(), body.at("height").get<double>(), n);
    }
    return {{"n", n}, {"l", mask.popcount()}, {"mask_rle", encode_rle(mask)}};
  }

 private:
  struct Region {
    const PatchGrid* grid = nullptr;
    ObjectMask mask;
  };

  Region parse_region(const nlohmann::json& body) const {
    Region r;
    r.grid = &features_.get(body.at("image_id").get<std::string>());
    r.mask = decode_rle(body.at("mask_rle").get<std::vector<std::uint32_t>>());
    return r;
  }

  static std::set<RecordId> parse_exclude(const nlohmann::json& body) {
    std::set<RecordId> out;
    if (body.contains("exclude"))
      for (const auto& id : body.at("exclude")) out.insert(id.get<RecordId>());
    return out;
  }

  static nlohmann::json record_view(const RetrievalRecord& r) {
    return {{"record_id", r.record_id},
            {"image_id", r.image_id},
            {"description", r.description},
            {"label", r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr)},
            {"mask_rle", encode_rle(r.mask)}};
  }

  // Caller holds the lock.
  nlohmann::json enrich(const std::vector<Hit>& hits) const {
    auto out = nlohmann::json::array();
    for (const auto& h : hits) {
      auto view = record_view(*index_.find(h.record_id));
      view["similarity"] = h.similarity;
      out.push_back(std::move(view));
    }
    return out;
  }

  FeatureLookup lookup() const {
    return [this](const std::string& id) -> const PatchGrid& { return features_.get(id); };
  }

  // Caller holds the unique lock. The file is written first so a failed
  // save leaves both disk and memory at the old revision.
  void commit(RetrievalIndex& next) {
    save_index(next, cfg_.index_path, revision_ + 1);
    index_.swap(next);
    ++revision_;
  }

  ServiceConfig cfg_;
  FeatureStore features_;
  std::optional<Model> model_;
  RetrievalIndex index_;
  std::uint64_t revision_ = 0;
  mutable std::shared_mutex mutex_;
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::EmptyIndex:
    case ErrorCode::Precondition: return 409;
    case ErrorCode::EmptyMask:
    case ErrorCode::DegenerateEmbedding: return 422;
    default: return 400;
  }
}

inline nlohmann::json error_body(std::string_view code, const std::string& message) {
  return {{"code", code}, {"message", message}};
}

/// Routes:
///   GET    /health
///   GET    /scenes
///   POST   /embed        {image_id, mask_rle}
///   POST   /query        {image_id, mask_rle, k?=5, exclude?}
///   GET    /records
///   POST   /records      {image_id, mask_rle, description, label?}
///   DELETE /records/:id
///   POST   /predict      {image_id, mask_rle, mode?=RG, k?=5, task?, exclude?}
///   POST   /rasterize    {n, pixels, height, width} or {n, polygon, width, height}
/// Errors answer with {code, message}.
inline void mount(httplib::Server& server, Service& svc) {
  using Handler = std::function<nlohmann::json(const httplib::Request&)>;
  auto wrap = [](Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json out;
      try {
        out = h(req);
        res.status = 200;
      } catch (const Error& e) {
        res.status = http_status(e.code());
        out = error_body(code_name(e.code()), e.message());
      } catch (const nlohmann::json::exception& e) {
        res.status = 400;
        out = error_body(code_name(ErrorCode::Format), std::string("request body: ") + e.what());
      } catch (const std::exception& e) {
        res.status = 500;
        out = error_body("INTERNAL", e.what());
      }
      res.set_content(out.dump(), "application/json");
    };
  };
  auto body = [](const httplib::Request& req) { return nlohmann::json::parse(req.body); };

  server.Get("/health", wrap([&svc](const auto&) { return svc.health(); }));
  server.Get("/scenes", wrap([&svc](const auto&) { return svc.scenes(); }));
  server.Post("/embed", wrap([&svc, body](const auto& req) { return svc.embed(body(req)); }));
  server.Post("/query", wrap([&svc, body](const auto& req) { return svc.query(body(req)); }));
  server.Get("/records", wrap([&svc](const auto&) { return svc.list_records(); }));
  server.Post("/records", wrap([&svc, body](const auto& req) { return svc.add_record(body(req)); }));
  server.Delete(R"(/records/(-?\d+))", wrap([&svc](const httplib::Request& req) {
                  return svc.delete_record(std::stoll(req.matches[1].str()));
                }));
  server.Post("/predict", wrap([&svc, body](const auto& req) { return svc.predict(body(req)); }));
  server.Post("/rasterize", wrap([body](const auto& req) { return Service::rasterize(body(req)); }));
}

}  // namespace olive
