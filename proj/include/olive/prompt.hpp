#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "olive/autodiff.hpp"
#include "olive/binary_io.hpp"
#include "olive/object_encoder.hpp"
#include "olive/retrieval.hpp"
#include "olive/tokenizer.hpp"

namespace olive {

/// Versioned prompt wording. `header` and `entry` render the in-context
/// block; `query` ends every prompt. Placeholders: {k}, {text}, {score},
/// {question}.
struct PromptTemplate {
  std::string id;
  int version = 1;
  std::string header;
  std::string entry;
  std::string query;
  std::string question;  // default question text
};

inline std::map<std::string, PromptTemplate> builtin_templates() {
  return {
      {"classification",
       {"classification", 1, "The top {k} related objects are: ", "[obj] is a {text} (similarity {score}). ",
        "[obj] {question}", "What is this?"}},
      {"captioning",
       {"captioning", 1, "The top {k} related objects are: ", "[obj] is {text} (similarity {score}). ",
        "[obj] {question}", "Describe this part of the image"}},
  };
}

class TemplateRegistry {
 public:
  TemplateRegistry() : templates_(builtin_templates()) {}

  const PromptTemplate& get(const std::string& id) const {
    const auto it = templates_.find(id);
    require(it != templates_.end(), ErrorCode::NotFound, "unknown prompt template \"" + id + "\"");
    return it->second;
  }
  void put(PromptTemplate t) { templates_[t.id] = std::move(t); }
  const std::map<std::string, PromptTemplate>& all() const noexcept { return templates_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, t] : templates_) {
      j[id] = {{"version", t.version},
               {"segments", {{"header", t.header}, {"entry", t.entry}, {"query", t.query}}},
               {"question", t.question}};
    }
    return j;
  }
  static TemplateRegistry from_json(const nlohmann::json& j) {
    TemplateRegistry r;
    r.templates_.clear();
    try {
      for (const auto& [id, v] : j.items()) {
        const auto& seg = v.at("segments");
        r.put({id, v.at("version").get<int>(), seg.at("header").get<std::string>(), seg.at("entry").get<std::string>(),
               seg.at("query").get<std::string>(), v.at("question").get<std::string>()});
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Format, std::string("template registry: ") + e.what());
    }
    return r;
  }
  static TemplateRegistry load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    try {
      return from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::Format, path.string() + ": " + e.what());
    }
  }

 private:
  std::map<std::string, PromptTemplate> templates_;
};

namespace detail {

inline std::string substitute(std::string s, const std::string& key, const std::string& value) {
  const std::string pat = "{" + key + "}";
  for (auto pos = s.find(pat); pos != std::string::npos; pos = s.find(pat, pos + value.size()))
    s.replace(pos, pat.size(), value);
  return s;
}

}  // namespace detail

/// Two-decimal similarity as it appears in prompts.
inline std::string format_score(double score) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", std::clamp(score, -1.0, 1.0));
  return buf;
}

/// Vocabulary covering the builtin templates, block counts 1..32, every
/// two-decimal score, the given class and attribute names, and `symbols`
/// nonce words "sym0", "sym1", ...
inline Vocabulary task_vocabulary(const std::vector<std::string>& classes, const std::vector<std::string>& attributes,
                                  std::size_t symbols = 48) {
  Vocabulary v;
  for (const auto& [id, t] : builtin_templates()) {
    for (const auto& s : {t.header, t.entry, t.query, t.question}) {
      std::string word;
      for (char c : s + " ") {
        if (detail::is_space(c) || kPunctuation.find(c) != std::string_view::npos) {
          if (!word.empty() && word.front() != '{' && word.front() != '[') v.add(word);
          word.clear();
        } else {
          word += c;
        }
      }
    }
  }
  for (int i = 1; i <= 32; ++i) v.add(std::to_string(i));
  v.add("-0.00");
  for (int i = -100; i <= 100; ++i) v.add(format_score(i / 100.0));
  for (const auto& c : classes) v.add(c);
  for (const auto& a : attributes) v.add(a);
  for (std::size_t i = 0; i < symbols; ++i) v.add("sym" + std::to_string(i));
  return v;
}

struct InContextEntry {
  ObjectEmbedding embedding;  // object vector as fed to the decoder
  std::string text;           // label or description
  double score = 0.0;
};

/// Retrieved examples in ascending similarity order.
struct InContextBlock {
  std::vector<InContextEntry> entries;

  /// Builds a block from hits (any order); entries are sorted ascending by
  /// similarity, ties by descending record id so the final order is the
  /// reverse of the hit order.
  static InContextBlock from_hits(const QueryResult& result, const std::function<InContextEntry(const Hit&)>& entry_of) {
    require(!result.hits.empty(), ErrorCode::Precondition, "an in-context block needs k >= 1 hits");
    std::vector<Hit> hits = result.hits;
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return hit_before(b, a); });
    InContextBlock block;
    for (const auto& h : hits) block.entries.push_back(entry_of(h));
    return block;
  }
};

/// Renders the in-context text with one [obj] marker per entry.
inline std::string render_incontext_block(const PromptTemplate& t, const InContextBlock& block) {
  require(!block.entries.empty(), ErrorCode::Precondition, "an in-context block needs k >= 1 entries");
  for (std::size_t i = 1; i < block.entries.size(); ++i) {
    require(block.entries[i - 1].score <= block.entries[i].score, ErrorCode::Precondition,
            "in-context entries must be in ascending similarity order");
  }
  std::string out = detail::substitute(t.header, "k", std::to_string(block.entries.size()));
  for (const auto& e : block.entries) {
    out += detail::substitute(detail::substitute(t.entry, "text", e.text), "score", format_score(e.score));
  }
  return out;
}

/// Canonical classification rendering straight from hits and labels.
inline std::string render_incontext_block(const QueryResult& hits, const std::map<RecordId, std::string>& texts) {
  const auto block = InContextBlock::from_hits(hits, [&](const Hit& h) {
    const auto it = texts.find(h.record_id);
    require(it != texts.end(), ErrorCode::MissingLabel, "record " + std::to_string(h.record_id) + " has no text");
    return InContextEntry{{}, it->second, h.similarity};
  });
  return render_incontext_block(builtin_templates().at("classification"), block);
}

struct SlotRef {
  std::size_t position = 0;
  std::size_t slot = 0;
};

/// Token sequence with [obj] slots bound to object vectors.
struct MultimodalPrompt {
  std::vector<int> tokens;
  std::vector<SlotRef> slots;
  std::vector<std::optional<ObjectEmbedding>> bound;  // indexed by slot
  std::string template_id;
  int template_version = 0;
  std::string text;

  std::size_t slot_count() const noexcept { return slots.size(); }

  void bind(std::size_t slot, ObjectEmbedding e) {
    require(slot < bound.size(), ErrorCode::UnboundSlot, "slot " + std::to_string(slot) + " does not exist");
    bound[slot] = std::move(e);
  }

  /// Text with each [obj] replaced by "[obj#i]".
  std::string dump(const Vocabulary& vocab) const {
    std::string out;
    int prev = -1;
    std::size_t next_slot = 0;
    for (int id : tokens) {
      if (id == kPad || id == kBos || id == kEos) continue;
      if (id == kObj) {
        if (prev >= 0 && vocab.token(prev) != "(") out += ' ';
        out += "[obj#" + std::to_string(next_slot++) + "]";
      } else {
        detail::append_piece(vocab, out, prev, id);
      }
      prev = id;
    }
    return out;
  }
};

/// Tokenizes `text` behind a BOS and records one slot per OBJ token.
inline MultimodalPrompt prompt_from_text(const Vocabulary& vocab, const std::string& text) {
  MultimodalPrompt p;
  p.text = text;
  p.tokens.push_back(kBos);
  const auto ids = vocab.tokenize(text);
  p.tokens.insert(p.tokens.end(), ids.begin(), ids.end());
  for (std::size_t i = 0; i < p.tokens.size(); ++i)
    if (p.tokens[i] == kObj) p.slots.push_back({i, p.slots.size()});
  p.bound.resize(p.slots.size());
  return p;
}

/// Optional block text followed by the query segment. Slots 0..k-1 are
/// bound to the block entries, the final slot to `query`.
inline MultimodalPrompt make_prompt(const Vocabulary& vocab, const PromptTemplate& t, const std::string& question,
                                    const ObjectEmbedding& query, const InContextBlock* block, std::size_t width) {
  require(query.dim() == width, ErrorCode::Dimension,
          "query object has width " + std::to_string(query.dim()) + ", decoder expects " + std::to_string(width));
  std::string text = block ? render_incontext_block(t, *block) : std::string();
  text += detail::substitute(t.query, "question", question.empty() ? t.question : question);
  auto p = prompt_from_text(vocab, text);
  p.template_id = t.id;
  p.template_version = t.version;
  const std::size_t k = block ? block->entries.size() : 0;
  require(p.slot_count() == k + 1, ErrorCode::UnboundSlot,
          "template produced " + std::to_string(p.slot_count()) + " slots for " + std::to_string(k + 1) + " objects");
  for (std::size_t i = 0; i < k; ++i) {
    require(block->entries[i].embedding.dim() == width, ErrorCode::Dimension, "in-context object width mismatch");
    p.bind(i, block->entries[i].embedding);
  }
  p.bind(k, query);
  return p;
}

/// Row t is the token embedding of token t, except OBJ positions which take
/// their bound object vector.
inline Tensor resolve_embeddings(const MultimodalPrompt& prompt, const Tensor& table) {
  const std::size_t d = table.cols();
  Tensor out({prompt.tokens.size(), d});
  for (std::size_t t = 0; t < prompt.tokens.size(); ++t) {
    const int id = prompt.tokens[t];
    require(id >= 0 && static_cast<std::size_t>(id) < table.rows(), ErrorCode::Dimension, "token id out of range");
    const auto src = table.row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  for (const auto& s : prompt.slots) {
    const auto& e = prompt.bound[s.slot];
    require(e.has_value(), ErrorCode::UnboundSlot, "slot " + std::to_string(s.slot) + " is unbound");
    require(e->dim() == d, ErrorCode::Dimension, "bound object width differs from embedding width");
    std::copy(e->vec.begin(), e->vec.end(), out.row(s.position).begin());
  }
  return out;
}

/// Differentiable variant: text rows come from `table`, OBJ rows from
/// `objects` (one 1 x d var per OBJ token, in order).
template <class T>
BasicVar<T> resolve_embeddings(std::span<const int> tokens, BasicVar<T> table, std::span<const BasicVar<T>> objects) {
  std::vector<BasicVar<T>> parts;
  std::vector<int> run;
  std::size_t next = 0;
  auto flush = [&] {
    if (run.empty()) return;
    parts.push_back(embedding(table, std::span<const int>(run)));
    run.clear();
  };
  for (int id : tokens) {
    if (id == kObj) {
      flush();
      require(next < objects.size(), ErrorCode::UnboundSlot, "more [obj] tokens than bound objects");
      parts.push_back(objects[next++]);
    } else {
      run.push_back(id);
    }
  }
  flush();
  require(next == objects.size(), ErrorCode::UnboundSlot, "fewer [obj] tokens than bound objects");
  return parts.size() == 1 ? parts[0] : concat_rows(std::span<const BasicVar<T>>(parts));
}

}  // namespace olive
