#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "olive/binary_io.hpp"
#include "olive/decoder.hpp"
#include "olive/features.hpp"
#include "olive/object_encoder.hpp"
#include "olive/prompt.hpp"
#include "olive/retrieval.hpp"

namespace olive {

struct ModelConfig {
  ObjectEncoderConfig encoder;
  DecoderConfig decoder;
  std::optional<LoraConfig> lora;
  std::size_t max_new_tokens = 8;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["encoder"] = {{"n", c.encoder.n},           {"width", c.encoder.width}, {"out_dim", c.encoder.out_dim},
                  {"layers", c.encoder.layers}, {"heads", c.encoder.heads}, {"mlp_ratio", c.encoder.mlp_ratio}};
  j["decoder"] = {{"vocab_size", c.decoder.vocab_size}, {"width", c.decoder.width}, {"layers", c.decoder.layers},
                  {"heads", c.decoder.heads},           {"mlp_ratio", c.decoder.mlp_ratio},
                  {"max_len", c.decoder.max_len}};
  j["lora"] = c.lora ? nlohmann::json{{"rank", c.lora->rank}, {"alpha", c.lora->alpha}} : nlohmann::json(nullptr);
  j["max_new_tokens"] = c.max_new_tokens;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    const auto& e = j.at("encoder");
    c.encoder = {e.at("n").get<std::size_t>(),      e.at("width").get<std::size_t>(),
                 e.at("out_dim").get<std::size_t>(), e.at("layers").get<std::size_t>(),
                 e.at("heads").get<std::size_t>(),   e.at("mlp_ratio").get<std::size_t>()};
    const auto& d = j.at("decoder");
    c.decoder = {d.at("vocab_size").get<std::size_t>(), d.at("width").get<std::size_t>(),
                 d.at("layers").get<std::size_t>(),     d.at("heads").get<std::size_t>(),
                 d.at("mlp_ratio").get<std::size_t>(),  d.at("max_len").get<std::size_t>()};
    if (j.contains("lora") && !j.at("lora").is_null())
      c.lora = LoraConfig{j.at("lora").at("rank").get<std::size_t>(), j.at("lora").at("alpha").get<float>()};
    c.max_new_tokens = j.value("max_new_tokens", std::size_t{8});
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::Format, std::string("model config: ") + ex.what());
  }
  return c;
}

/// Object encoder, decoder, optional adapter, and the vocabulary and prompt
/// templates they were trained with.
struct Model {
  ModelConfig config;
  Vocabulary vocab;
  TemplateRegistry templates;
  ObjectEncoderParams<Tensor> encoder;
  DecoderParams<Tensor> decoder;
  std::optional<LoraAdapter<Tensor>> lora;

  float lora_scale() const { return config.lora ? config.lora->scale() : 0.0f; }
  const LoraAdapter<Tensor>* adapter() const { return lora ? &*lora : nullptr; }
};

inline Model init_model(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed) {
  cfg.decoder.vocab_size = vocab.size();
  require(cfg.encoder.out_dim == cfg.decoder.width, ErrorCode::Config,
          "object vectors have width " + std::to_string(cfg.encoder.out_dim) + " but the decoder expects " +
              std::to_string(cfg.decoder.width));
  Rng rng(seed);
  Model m;
  m.config = cfg;
  m.vocab = std::move(vocab);
  m.encoder = init_object_encoder(cfg.encoder, rng);
  m.decoder = init_decoder(cfg.decoder, rng);
  if (cfg.lora) m.lora = init_lora(cfg.decoder, *cfg.lora, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: "OLVC", u32 version, u64-prefixed config JSON, then named
// tensor tables (encoder, decoder, optional lora).

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class P>
void write_table(io::ByteWriter& w, const std::string& name, const P& params) {
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for_each_param(params, [&](const std::string& n, const Tensor& t) { entries.emplace_back(n, &t); });
  w.string_u32(name);
  w.u64(entries.size());
  for (const auto& [n, t] : entries) {
    w.string_u32(n);
    w.u32(static_cast<std::uint32_t>(t->shape().size()));
    for (auto dim : t->shape()) w.u64(dim);
    w.f32s(t->values());
  }
}

inline std::map<std::string, Tensor> read_table(io::ByteReader& r, const std::string& expected) {
  const auto at = r.offset();
  const auto name = r.string_of(r.u32("table name length"), "table name");
  if (name != expected) throw FormatError("expected table \"" + expected + "\", found \"" + name + "\"", at);
  const auto count = r.u64("table size");
  std::map<std::string, Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto entry_at = r.offset();
    auto key = r.string_of(r.u32("tensor name length"), "tensor name");
    const auto rank = r.u32("tensor rank");
    if (rank == 0 || rank > 4) throw FormatError("tensor \"" + key + "\" has rank " + std::to_string(rank), entry_at);
    Shape shape;
    std::uint64_t elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(r.u64("tensor dim"));
      elems *= shape.back();
    }
    auto values = r.f32s(elems, "tensor payload");
    if (!out.emplace(key, Tensor(std::move(shape), std::move(values))).second)
      throw FormatError("duplicate tensor \"" + key + "\"", entry_at);
  }
  return out;
}

// Moves named tensors into `params`, which already has the expected shapes.
template <class P>
void fill_params(P& params, std::map<std::string, Tensor>& table, const std::string& what) {
  std::size_t used = 0;
  for_each_param(params, [&](const std::string& n, Tensor& t) {
    const auto it = table.find(n);
    require(it != table.end(), ErrorCode::Format, what + " checkpoint is missing \"" + n + "\"");
    require(it->second.shape() == t.shape(), ErrorCode::Format,
            what + " tensor \"" + n + "\" has shape " + shape_str(it->second.shape()) + ", expected " +
                shape_str(t.shape()));
    t = std::move(it->second);
    ++used;
  });
  require(used == table.size(), ErrorCode::Format, what + " checkpoint has unexpected tensors");
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Model& m) {
  io::ByteWriter w;
  w.magic("OLVC");
  w.u32(kCheckpointVersion);
  auto cfg = model_config_to_json(m.config);
  cfg["vocab"] = vocabulary_to_json(m.vocab);
  cfg["templates"] = m.templates.to_json();
  w.string_u64(cfg.dump());
  w.u32(m.lora ? 3 : 2);
  detail::write_table(w, "encoder", m.encoder);
  detail::write_table(w, "decoder", m.decoder);
  if (m.lora) detail::write_table(w, "lora", *m.lora);
  return w.buffer();
}

inline Model parse_checkpoint(std::span<const unsigned char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("OLVC");
  const auto version_at = r.offset();
  if (const auto v = r.u32("version"); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  const auto cfg_at = r.offset();
  const auto text = r.string_of(r.u64("config length"), "config");
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what(), cfg_at);
  }
  Model m;
  m.config = model_config_from_json(cfg);
  try {
    m.vocab = vocabulary_from_json(cfg.at("vocab"));
    if (cfg.contains("templates")) m.templates = TemplateRegistry::from_json(cfg.at("templates"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what(), cfg_at);
  } catch (const Error& e) {
    throw FormatError(e.what(), cfg_at);
  }
  require(m.vocab.size() == m.config.decoder.vocab_size, ErrorCode::Format, "checkpoint vocabulary size mismatch");

  // Shapes come from a throwaway initialisation of the stored config.
  Rng rng(0);
  m.encoder = init_object_encoder(m.config.encoder, rng);
  m.decoder = init_decoder(m.config.decoder, rng);
  const auto tables = r.u32("table count");
  if (tables != (m.config.lora ? 3u : 2u)) throw FormatError("unexpected table count", r.offset() - 4);
  auto enc = detail::read_table(r, "encoder");
  detail::fill_params(m.encoder, enc, "encoder");
  auto dec = detail::read_table(r, "decoder");
  detail::fill_params(m.decoder, dec, "decoder");
  if (m.config.lora) {
    m.lora = init_lora(m.config.decoder, *m.config.lora, rng);
    auto ad = detail::read_table(r, "lora");
    detail::fill_params(*m.lora, ad, "lora");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
  return m;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(m));
}

inline Model load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Inference

/// Referring tasks share the template id of their prompt family.
inline bool is_known_task(const std::string& task) { return task == "classification" || task == "captioning"; }

/// Text a record contributes to an in-context block for `task`.
inline std::string record_text(const RetrievalRecord& r, const std::string& task) {
  if (task == "classification" && r.label) return *r.label;
  return r.description;
}

inline ObjectEmbedding object_vector(const Model& m, const PatchGrid& grid, const ObjectMask& mask) {
  return encode_resampler(select_masked(grid, mask), m.encoder, m.config.encoder.heads);
}

/// Representation of an object for analysis: layer -1 is the object vector
/// fed to the decoder; layer l >= 0 is the residual stream at the object's
/// slot in the plain question prompt after decoder block l.
inline std::vector<float> object_representation(const Model& m, const PatchGrid& grid, const ObjectMask& mask,
                                                int layer) {
  auto vec = object_vector(m, grid, mask);
  if (layer < 0) return vec.vec;
  require(static_cast<std::size_t>(layer) < m.decoder.blocks.size(), ErrorCode::Config,
          "layer " + std::to_string(layer) + " does not exist; the decoder has " +
              std::to_string(m.decoder.blocks.size()) + " blocks");
  const auto prompt = make_prompt(m.vocab, m.templates.get("classification"), {}, vec, nullptr, m.config.decoder.width);
  const auto rows = resolve_embeddings(prompt, m.decoder.token_embedding);
  const auto hidden = decoder_hidden_states(m.decoder, m.config.decoder.heads, rows, m.adapter(), m.lora_scale());
  const auto r = hidden[static_cast<std::size_t>(layer)].row(prompt.slots.back().position);
  return {r.begin(), r.end()};
}

struct Prediction {
  std::string mode;  // "R", "G" or "RG"
  std::string answer;
  std::vector<int> ids;
  std::vector<double> log_probs;
  std::vector<Hit> hits;
  std::string prompt_text;  // as rendered, with [obj] markers
  std::string prompt_dump;  // with [obj#i] slot numbers
};

using FeatureLookup = std::function<const PatchGrid&(const std::string&)>;

inline Prediction generate_answer(const Model& m, MultimodalPrompt prompt, std::string mode) {
  Prediction p;
  p.mode = std::move(mode);
  auto out = greedy_decode(m.decoder, m.config.decoder.heads, prompt, m.config.max_new_tokens, m.adapter(),
                           m.lora_scale());
  p.ids = std::move(out.ids);
  p.log_probs = std::move(out.log_probs);
  p.answer = m.vocab.detokenize(p.ids);
  p.prompt_text = prompt.text;
  p.prompt_dump = prompt.dump(m.vocab);
  return p;
}

/// OLIVE-G: the question alone, no retrieved context.
inline Prediction predict_generative(const Model& m, const PatchGrid& grid, const ObjectMask& mask,
                                     const std::string& task = "classification") {
  const auto& t = m.templates.get(task);
  auto prompt = make_prompt(m.vocab, t, {}, object_vector(m, grid, mask), nullptr, m.config.decoder.width);
  return generate_answer(m, std::move(prompt), "G");
}

/// Builds the in-context block for `hits`: each record is re-encoded with the
/// object encoder from its own image features.
inline InContextBlock retrieved_block(const Model& m, const RetrievalIndex& index, const QueryResult& hits,
                                      const FeatureLookup& features, const std::string& task) {
  return InContextBlock::from_hits(hits, [&](const Hit& h) {
    const auto rec = index.find(h.record_id);
    require(rec.has_value(), ErrorCode::NotFound, "record " + std::to_string(h.record_id) + " vanished");
    return InContextEntry{object_vector(m, features(rec->image_id), rec->mask), record_text(*rec, task), h.similarity};
  });
}

/// OLIVE-RG: top-k neighbours by mean-pooled similarity, rendered in
/// ascending order ahead of the question.
inline Prediction predict_rag(const Model& m, const PatchGrid& grid, const ObjectMask& mask,
                              const RetrievalIndex& index, const FeatureLookup& features, std::size_t k,
                              const std::string& task = "classification", const std::set<RecordId>& exclude = {}) {
  require(k >= 1, ErrorCode::Precondition, "retrieval-augmented generation needs k >= 1");
  const auto mf = select_masked(grid, mask);
  const auto hits = index.query_topk(encode_meanpool(mf), k, exclude);
  const auto block = retrieved_block(m, index, hits, features, task);
  const auto& t = m.templates.get(task);
  auto prompt = make_prompt(m.vocab, t, {}, encode_resampler(mf, m.encoder, m.config.encoder.heads), &block,
                            m.config.decoder.width);
  auto p = generate_answer(m, std::move(prompt), "RG");
  p.hits = hits.hits;
  return p;
}

/// OLIVE-R: majority vote over the labels of the top-k neighbours.
inline Prediction predict_retrieval(const PatchGrid& grid, const ObjectMask& mask, const RetrievalIndex& index,
                                    std::size_t k, const std::set<RecordId>& exclude = {}) {
  const auto hits = index.query_topk(encode_meanpool(select_masked(grid, mask)), k, exclude);
  Prediction p;
  p.mode = "R";
  p.answer = majority_vote(hits, index.labels());
  p.hits = hits.hits;
  return p;
}

}  // namespace olive
