#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "olive/binary_io.hpp"
#include "olive/error.hpp"
#include "olive/mask.hpp"
#include "olive/object_encoder.hpp"

namespace olive {

using RecordId = std::int64_t;

struct RetrievalRecord {
  RecordId record_id = 0;
  ObjectMask mask;
  std::string description;
  std::string image_id;
  ObjectEmbedding embedding;
  std::optional<std::string> label;

  friend bool operator==(const RetrievalRecord& a, const RetrievalRecord& b) {
    return a.record_id == b.record_id && a.mask == b.mask && a.description == b.description &&
           a.image_id == b.image_id && a.embedding.vec == b.embedding.vec && a.label == b.label;
  }
};

struct Hit {
  RecordId record_id = 0;
  float similarity = 0.0f;

  friend bool operator==(const Hit&, const Hit&) = default;
};

struct QueryResult {
  std::vector<Hit> hits;
};

/// Hit order: similarity descending, then record id ascending.
inline bool hit_before(const Hit& a, const Hit& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.record_id < b.record_id;
}

/// Exact cosine top-k over mean-pooled object embeddings. Readers share a
/// lock; mutations take it exclusively and update the row matrix before
/// releasing it, so queries never see a half-built matrix.
///
/// Scores are dot(r, q) / sqrt(|r|^2 |q|^2) in double over the stored f32
/// values, rounded to f32. Products of two floats are exact in double, so
/// exactly tied cosines (orthogonal pairs, duplicates) stay tied and the
/// id tie-break applies; pre-normalizing rows would smear them by an ulp.
class RetrievalIndex {
 public:
  RetrievalIndex() = default;
  RetrievalIndex(const RetrievalIndex& other) { copy_from(other); }
  RetrievalIndex& operator=(const RetrievalIndex& other) {
    if (this != &other) copy_from(other);
    return *this;
  }

  RecordId add_record(ObjectMask mask, std::string description, std::string image_id, ObjectEmbedding embedding,
                      std::optional<std::string> label = std::nullopt) {
    validate_embedding(embedding);
    std::unique_lock lock(mutex_);
    require(records_.empty() || embedding.dim() == dim_, ErrorCode::Dimension,
            "embedding width " + std::to_string(embedding.dim()) + " does not match index width " +
                std::to_string(dim_));
    if (records_.empty()) dim_ = embedding.dim();
    const RecordId id = next_id_++;
    records_.push_back({id, std::move(mask), std::move(description), std::move(image_id), std::move(embedding),
                        std::move(label)});
    append_row(records_.back());
    return id;
  }

  /// Inserts a record with a caller-chosen id (used when restoring state).
  void insert_record(RetrievalRecord record) {
    validate_embedding(record.embedding);
    std::unique_lock lock(mutex_);
    require(record.record_id >= 0, ErrorCode::Format, "record ids must be non-negative");
    for (const auto& r : records_)
      require(r.record_id != record.record_id, ErrorCode::Format,
              "duplicate record id " + std::to_string(record.record_id));
    require(records_.empty() || record.embedding.dim() == dim_, ErrorCode::Dimension, "embedding width mismatch");
    if (records_.empty()) dim_ = record.embedding.dim();
    next_id_ = std::max(next_id_, record.record_id + 1);
    records_.push_back(std::move(record));
    append_row(records_.back());
  }

  void remove_record(RecordId id) {
    std::unique_lock lock(mutex_);
    const auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.record_id == id; });
    require(it != records_.end(), ErrorCode::NotFound, "record " + std::to_string(id) + " does not exist");
    const auto pos = static_cast<std::size_t>(it - records_.begin());
    records_.erase(it);
    rows_.erase(rows_.begin() + static_cast<std::ptrdiff_t>(pos * dim_),
                rows_.begin() + static_cast<std::ptrdiff_t>((pos + 1) * dim_));
    squared_norms_.erase(squared_norms_.begin() + static_cast<std::ptrdiff_t>(pos));
  }

  QueryResult query_topk(const ObjectEmbedding& query, std::size_t k, const std::set<RecordId>& exclude = {}) const {
    require(k >= 1, ErrorCode::Precondition, "k must be >= 1");
    std::shared_lock lock(mutex_);
    std::size_t candidates = 0;
    for (const auto& r : records_) candidates += exclude.count(r.record_id) ? 0 : 1;
    require(candidates > 0, ErrorCode::EmptyIndex, "no records left to search");
    require(query.dim() == dim_, ErrorCode::Dimension,
            "query width " + std::to_string(query.dim()) + " does not match index width " + std::to_string(dim_));
    const double qn = squared_norm(query.vec);
    require(qn > 0.0, ErrorCode::DegenerateEmbedding, "query embedding has zero norm");
    std::vector<Hit> all;
    all.reserve(candidates);
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (exclude.count(records_[i].record_id)) continue;
      const double* row = rows_.data() + i * dim_;
      double dot = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) dot += row[j] * static_cast<double>(query.vec[j]);
      const double cosine = std::clamp(dot / std::sqrt(squared_norms_[i] * qn), -1.0, 1.0);
      all.push_back({records_[i].record_id, static_cast<float>(cosine)});
    }
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), hit_before);
    all.resize(take);
    return {std::move(all)};
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
  }
  std::size_t dim() const {
    std::shared_lock lock(mutex_);
    return dim_;
  }
  RecordId next_id() const {
    std::shared_lock lock(mutex_);
    return next_id_;
  }
  void set_next_id(RecordId id) {
    std::unique_lock lock(mutex_);
    for (const auto& r : records_)
      require(id > r.record_id, ErrorCode::Format, "next_id must exceed every stored record id");
    next_id_ = id;
  }

  /// Snapshot copy of the records in insertion order.
  std::vector<RetrievalRecord> records() const {
    std::shared_lock lock(mutex_);
    return records_;
  }

  std::optional<RetrievalRecord> find(RecordId id) const {
    std::shared_lock lock(mutex_);
    for (const auto& r : records_)
      if (r.record_id == id) return r;
    return std::nullopt;
  }

  /// record id -> label for every labelled record.
  std::map<RecordId, std::string> labels() const {
    std::shared_lock lock(mutex_);
    std::map<RecordId, std::string> out;
    for (const auto& r : records_)
      if (r.label) out.emplace(r.record_id, *r.label);
    return out;
  }

  void swap(RetrievalIndex& other) {
    if (this == &other) return;
    std::scoped_lock lock(mutex_, other.mutex_);
    records_.swap(other.records_);
    rows_.swap(other.rows_);
    squared_norms_.swap(other.squared_norms_);
    std::swap(dim_, other.dim_);
    std::swap(next_id_, other.next_id_);
  }

 private:
  static void validate_embedding(const ObjectEmbedding& e) {
    require(e.kind == EncoderKind::Meanpool, ErrorCode::Precondition,
            "retrieval records must use mean-pooled embeddings");
    require(!e.vec.empty(), ErrorCode::DegenerateEmbedding, "embedding is empty");
    for (float v : e.vec) require(std::isfinite(v), ErrorCode::Numeric, "embedding has a non-finite entry");
    require(squared_norm(e.vec) > 0.0, ErrorCode::DegenerateEmbedding, "embedding has zero norm");
  }

  static double squared_norm(const std::vector<float>& v) {
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * x;
    return sq;
  }

  void append_row(const RetrievalRecord& r) {
    rows_.insert(rows_.end(), r.embedding.vec.begin(), r.embedding.vec.end());
    squared_norms_.push_back(squared_norm(r.embedding.vec));
  }

  void copy_from(const RetrievalIndex& other) {
    std::shared_lock lock(other.mutex_);
    records_ = other.records_;
    rows_ = other.rows_;
    squared_norms_ = other.squared_norms_;
    dim_ = other.dim_;
    next_id_ = other.next_id_;
  }

  mutable std::shared_mutex mutex_;
  std::vector<RetrievalRecord> records_;
  std::vector<double> rows_;  // records_.size() x dim_
  std::vector<double> squared_norms_;
  std::size_t dim_ = 0;
  RecordId next_id_ = 0;
};

/// Modal label among the hits; ties go to the larger summed similarity, then
/// to the lexicographically smaller label.
inline std::string majority_vote(const QueryResult& result, const std::map<RecordId, std::string>& labels) {
  require(!result.hits.empty(), ErrorCode::EmptyIndex, "cannot vote over zero hits");
  struct Tally {
    std::size_t count = 0;
    double total = 0.0;
  };
  std::map<std::string, Tally> tally;
  for (const auto& h : result.hits) {
    const auto it = labels.find(h.record_id);
    require(it != labels.end(), ErrorCode::MissingLabel, "record " + std::to_string(h.record_id) + " has no label");
    auto& t = tally[it->second];
    ++t.count;
    t.total += h.similarity;
  }
  auto best = tally.begin();
  for (auto it = std::next(tally.begin()); it != tally.end(); ++it) {
    const auto& a = it->second;
    const auto& b = best->second;
    if (a.count > b.count || (a.count == b.count && a.total > b.total)) best = it;
  }
  return best->first;
}

// ---------------------------------------------------------------------------
// Index file: a JSON header line followed by one JSON record per line.

inline constexpr int kIndexFileVersion = 1;

inline nlohmann::json record_to_json(const RetrievalRecord& r) {
  nlohmann::json emb = nlohmann::json::array();
  for (float v : r.embedding.vec) emb.push_back(io::hex_bits(v));
  nlohmann::json j{{"record_id", r.record_id}, {"description", r.description}, {"image_id", r.image_id},
                   {"mask_rle", encode_rle(r.mask)},  {"embedding", emb}};
  j["label"] = r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr);
  return j;
}

inline RetrievalRecord record_from_json(const nlohmann::json& j) {
  RetrievalRecord r;
  r.record_id = j.at("record_id").get<RecordId>();
  r.description = j.at("description").get<std::string>();
  r.image_id = j.at("image_id").get<std::string>();
  r.mask = decode_rle(j.at("mask_rle").get<std::vector<std::uint32_t>>());
  std::vector<float> vec;
  for (const auto& h : j.at("embedding")) vec.push_back(io::float_from_hex(h.get<std::string>()));
  r.embedding = ObjectEmbedding::make(std::move(vec), EncoderKind::Meanpool);
  if (j.contains("label") && !j.at("label").is_null()) r.label = j.at("label").get<std::string>();
  return r;
}

/// Serialized index; `revision` is carried in the header for the service.
inline std::string serialize_index(const RetrievalIndex& index, std::uint64_t revision = 0) {
  const auto records = index.records();
  nlohmann::json header{{"format", "olive-index"},
                        {"version", kIndexFileVersion},
                        {"d", index.dim()},
                        {"count", records.size()},
                        {"next_id", index.next_id()},
                        {"revision", revision}};
  std::string out = header.dump() + "\n";
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

struct LoadedIndex {
  RetrievalIndex index;
  std::uint64_t revision = 0;
};

inline LoadedIndex parse_index(const std::string& text) {
  LoadedIndex out;
  std::size_t pos = 0, line_no = 0;
  auto next_line = [&](std::string& line) {
    if (pos >= text.size()) return false;
    const auto end = text.find('\n', pos);
    line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() : end + 1;
    ++line_no;
    return true;
  };
  auto where = [&] { return "index line " + std::to_string(line_no) + ": "; };
  std::string line;
  try {
    require(next_line(line), ErrorCode::Format, "index file is empty");
    const auto header = nlohmann::json::parse(line);
    require(header.value("format", "") == "olive-index", ErrorCode::Format, where() + "not an index file");
    const int version = header.at("version").get<int>();
    require(version == kIndexFileVersion, ErrorCode::Format,
            where() + "unsupported index version " + std::to_string(version));
    const auto count = header.at("count").get<std::size_t>();
    const auto d = header.at("d").get<std::size_t>();
    out.revision = header.value("revision", std::uint64_t{0});
    std::size_t seen = 0;
    while (next_line(line)) {
      if (line.empty()) continue;
      auto record = record_from_json(nlohmann::json::parse(line));
      require(record.embedding.dim() == d, ErrorCode::Format, where() + "embedding width differs from header");
      out.index.insert_record(std::move(record));
      ++seen;
    }
    require(seen == count, ErrorCode::Format,
            "index header promises " + std::to_string(count) + " records, file has " + std::to_string(seen));
    out.index.set_next_id(header.at("next_id").get<RecordId>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, where() + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Format) throw;
    fail(ErrorCode::Format, where() + e.what());
  }
  return out;
}

inline void save_index(const RetrievalIndex& index, const std::filesystem::path& path, std::uint64_t revision = 0) {
  io::write_file_atomic(path, serialize_index(index, revision));
}

inline LoadedIndex load_index(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_index(std::string(bytes.begin(), bytes.end()));
}

/// Replaces `index` with the file contents; on any error `index` is left
/// untouched. Returns the stored revision.
inline std::uint64_t load_index_into(RetrievalIndex& index, const std::filesystem::path& path) {
  auto loaded = load_index(path);
  index.swap(loaded.index);
  return loaded.revision;
}

}  // namespace olive
