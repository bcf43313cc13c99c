#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "olive/dataset.hpp"
#include "olive/model.hpp"
#include "olive/optim.hpp"

namespace olive {

enum class DecoderMode { Frozen, Lora, Full };

inline std::string decoder_mode_name(DecoderMode m) {
  switch (m) {
    case DecoderMode::Frozen: return "frozen";
    case DecoderMode::Lora: return "lora";
    case DecoderMode::Full: return "full";
  }
  return "full";
}

inline DecoderMode parse_decoder_mode(const std::string& s) {
  if (s == "frozen") return DecoderMode::Frozen;
  if (s == "lora") return DecoderMode::Lora;
  if (s == "full") return DecoderMode::Full;
  fail(ErrorCode::Config, "decoder_mode must be frozen, lora or full, got \"" + s + "\"");
}

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;
  double lr_floor = 0.05;  // final learning rate as a fraction of the base
  std::size_t warmup_steps = 0;
  std::size_t k = 5;              // neighbours in train-time prompts
  double rg_fraction = 0.5;       // share of examples that get a retrieved block
  double shuffle_fraction = 0.0;  // share of those whose labels are renamed
  bool leakage_exclusion = true;
  std::vector<std::string> stages{"classification"};
  bool freeze_encoder = false;
  bool freeze_token_embeddings = true;
  DecoderMode decoder_mode = DecoderMode::Full;
  std::size_t val_limit = 0;  // 0 evaluates every val example
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::Config, key + " must be true or false, got \"" + v + "\"");
}

// Stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace detail

/// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
inline TrainConfig parse_train_config(const std::string& text, TrainConfig c = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::Config, "line " + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto v = detail::trim(line.substr(eq + 1));
    try {
      if (key == "seed") c.seed = std::stoull(v);
      else if (key == "epochs") c.epochs = std::stoul(v);
      else if (key == "batch_size") c.batch_size = std::stoul(v);
      else if (key == "learning_rate") c.learning_rate = std::stod(v);
      else if (key == "momentum") c.momentum = std::stod(v);
      else if (key == "clip_norm") c.clip_norm = std::stod(v);
      else if (key == "lr_floor") c.lr_floor = std::stod(v);
      else if (key == "warmup_steps") c.warmup_steps = std::stoul(v);
      else if (key == "k") c.k = std::stoul(v);
      else if (key == "rg_fraction") c.rg_fraction = std::stod(v);
      else if (key == "shuffle_fraction") c.shuffle_fraction = std::stod(v);
      else if (key == "leakage_exclusion") c.leakage_exclusion = detail::parse_bool(key, v);
      else if (key == "freeze_encoder") c.freeze_encoder = detail::parse_bool(key, v);
      else if (key == "freeze_token_embeddings") c.freeze_token_embeddings = detail::parse_bool(key, v);
      else if (key == "decoder_mode") c.decoder_mode = parse_decoder_mode(v);
      else if (key == "val_limit") c.val_limit = std::stoul(v);
      else if (key == "stages") {
        c.stages.clear();
        std::istringstream parts(v);
        for (std::string s; std::getline(parts, s, ',');)
          if (auto t = detail::trim(s); !t.empty()) c.stages.push_back(t);
      } else {
        fail(ErrorCode::Config, "line " + std::to_string(line_no) + ": unknown key \"" + key + "\"");
      }
    } catch (const std::logic_error&) {
      fail(ErrorCode::Config, "line " + std::to_string(line_no) + ": bad value for " + key + ": \"" + v + "\"");
    }
  }
  return c;
}

inline std::string train_config_to_text(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  std::string stages;
  for (const auto& s : c.stages) stages += (stages.empty() ? "" : ",") + s;
  o << "seed = " << c.seed << "\nepochs = " << c.epochs << "\nbatch_size = " << c.batch_size
    << "\nlearning_rate = " << c.learning_rate << "\nmomentum = " << c.momentum << "\nclip_norm = " << c.clip_norm
    << "\nlr_floor = " << c.lr_floor << "\nwarmup_steps = " << c.warmup_steps << "\nk = " << c.k
    << "\nrg_fraction = " << c.rg_fraction << "\nshuffle_fraction = " << c.shuffle_fraction
    << "\nleakage_exclusion = " << (c.leakage_exclusion ? "true" : "false") << "\nstages = " << stages
    << "\nfreeze_encoder = " << (c.freeze_encoder ? "true" : "false")
    << "\nfreeze_token_embeddings = " << (c.freeze_token_embeddings ? "true" : "false")
    << "\ndecoder_mode = " << decoder_mode_name(c.decoder_mode) << "\nval_limit = " << c.val_limit << "\n";
  return o.str();
}

/// Target text of `e` for a task.
inline std::string target_text(const ObjectExample& e, const std::string& task) {
  return task == "classification" ? e.label : e.caption;
}

struct TrainResult {
  Model best;  // lowest val loss of the last stage
  Model last;
  std::vector<nlohmann::json> log;
  std::size_t steps = 0;
  double best_val_loss = 0.0;
  std::set<std::string> targets;  // every target string trained on
};

struct TrainHooks {
  /// Called for every train-time retrieval with the querying example's id
  /// and the excluded ids.
  std::function<void(RecordId, const std::set<RecordId>&)> on_retrieval;
};

inline void write_metrics(const std::filesystem::path& path, const std::vector<nlohmann::json>& log) {
  std::string text;
  for (const auto& j : log) text += j.dump() + "\n";
  io::write_file_atomic(path, text);
}

/// Maximum-likelihood instruction tuning over one or more task stages.
class Trainer {
 public:
  Trainer(TrainConfig cfg, const FeatureStore& features, const Splits& splits, const LabelSet& labels,
          TrainHooks hooks = {})
      : cfg_(std::move(cfg)), features_(features), splits_(splits), labels_(labels), hooks_(std::move(hooks)) {
    require(cfg_.batch_size >= 1, ErrorCode::Config, "batch_size must be >= 1");
    require(!cfg_.stages.empty(), ErrorCode::Config, "at least one stage is required");
    for (const auto& s : cfg_.stages) require(is_known_task(s), ErrorCode::Config, "unknown stage \"" + s + "\"");
    require(cfg_.rg_fraction == 0.0 || cfg_.k >= 1, ErrorCode::Config, "retrieved prompts need k >= 1");
    for (const auto& e : splits_.train) {
      require(!labels_.is_unseen(e.label), ErrorCode::Config, "unseen class \"" + e.label + "\" in the train split");
    }
    // Train-time neighbours come from the retrieval split and the train split
    // itself, restricted to seen classes; val never enters the index.
    std::vector<ObjectExample> pool;
    for (const auto& e : splits_.retrieval)
      if (!labels_.is_unseen(e.label)) pool.push_back(e);
    pool.insert(pool.end(), splits_.train.begin(), splits_.train.end());
    if (cfg_.rg_fraction > 0.0) index_ = build_index(pool, features_);
    for (const auto& e : pool) cache(e);
    for (const auto& e : splits_.val) cache(e);
  }

  /// Runs every stage in order, each resuming from the previous stage's
  /// best-val parameters.
  TrainResult run(Model model) {
    nonce_pool(model.vocab);
    vocab_ = model.vocab;
    width_ = model.config.decoder.width;
    nonce_sd_ = 0.5 / std::sqrt(static_cast<double>(width_));
    TrainResult result;
    for (const auto& stage : cfg_.stages) {
      auto r = run_stage(model, stage, result.steps, result.log, result.targets);
      model = r.best;
      result.best = std::move(r.best);
      result.last = std::move(r.last);
      result.best_val_loss = r.best_val_loss;
    }
    return result;
  }

  /// Mean loss of `model` on the val split for `task` in G mode and, when
  /// retrieval is enabled, RG mode.
  double val_loss(const Model& model, const std::string& task) const {
    double total = 0.0, count = 0.0;
    for (const auto& inst : val_instances(task)) {
      Tape tape;
      Bound b = bind(tape, model, false);
      const auto [loss, n] = instance_loss(tape, model, b, inst, 0);
      total += static_cast<double>(loss.value()[0]) * static_cast<double>(n);
      count += static_cast<double>(n);
    }
    return count > 0 ? total / count : 0.0;
  }

  /// Exact-match accuracy of greedy G-mode answers on the val split.
  double val_accuracy(const Model& model, const std::string& task) const {
    std::size_t correct = 0, total = 0;
    for (const auto& e : limited_val()) {
      const auto p = predict_generative(model, features_.get(e.image_id), e.mask, task);
      correct += p.answer == target_text(e, task) ? 1 : 0;
      ++total;
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }

  const RetrievalIndex& train_index() const { return index_; }

 private:
  struct Cached {
    Tensor rows;
    std::vector<int> patch_ids;
  };

  struct Instance {
    const ObjectExample* example = nullptr;
    std::string task;
    bool rag = false;
    std::map<std::string, std::string> rename;  // label shuffling
    std::map<int, std::vector<float>> fresh;     // token id -> replacement embedding row
  };

  struct Bound {
    ObjectEncoderParams<Var> encoder;
    DecoderParams<Var> decoder;
    std::optional<LoraAdapter<Var>> lora;
  };

  struct StageResult {
    Model best;
    Model last;
    double best_val_loss = 0.0;
  };

  void cache(const ObjectExample& e) {
    if (cache_.count(e.id)) return;
    const auto mf = select_masked(features_.get(e.image_id), e.mask);
    cache_.emplace(e.id, Cached{mf.rows, patch_ids_of(mf)});
  }

  // Nonce words stand in for renamed labels; their embedding rows are
  // redrawn for every instance.
  void nonce_pool(const Vocabulary& vocab) {
    pool_.clear();
    for (const auto& w : vocab.words()) {
      const bool sym = w.rfind("sym", 0) == 0 && w.size() > 3 &&
                       std::all_of(w.begin() + 3, w.end(), [](char c) { return c >= '0' && c <= '9'; });
      if (sym) pool_.push_back(w);
    }
  }

  std::vector<ObjectExample> limited_val() const {
    auto v = splits_.val;
    if (cfg_.val_limit && v.size() > cfg_.val_limit) v.resize(cfg_.val_limit);
    return v;
  }

  std::vector<Instance> val_instances(const std::string& task) const {
    std::vector<Instance> out;
    for (const auto& e : splits_.val) {
      if (cfg_.val_limit && out.size() >= cfg_.val_limit * (cfg_.rg_fraction > 0 ? 2 : 1)) break;
      const auto* ptr = &e;
      out.push_back({ptr, task, false, {}, {}});
      if (cfg_.rg_fraction > 0.0) out.push_back({ptr, task, true, {}, {}});
    }
    return out;
  }

  QueryResult neighbours(const ObjectExample& e) const {
    if (auto it = hits_.find(e.id); it != hits_.end()) {
      notify(e.id);
      return it->second;
    }
    std::set<RecordId> exclude;
    if (cfg_.leakage_exclusion) exclude.insert(e.id);
    if (hooks_.on_retrieval) hooks_.on_retrieval(e.id, exclude);
    const auto& c = cache_.at(e.id);
    auto hits = index_.query_topk(encode_meanpool(MaskedFeatures{c.rows, {c.patch_ids.begin(), c.patch_ids.end()}}),
                                  cfg_.k, exclude);
    hits_.emplace(e.id, hits);
    return hits;
  }

  void notify(RecordId id) const {
    if (!hooks_.on_retrieval) return;
    std::set<RecordId> exclude;
    if (cfg_.leakage_exclusion) exclude.insert(id);
    hooks_.on_retrieval(id, exclude);
  }

  Bound bind(Tape& tape, const Model& m, bool training) const {
    Bound b;
    b.encoder = bind_params(tape, m.encoder, training && !cfg_.freeze_encoder);
    const bool full = training && cfg_.decoder_mode == DecoderMode::Full;
    b.decoder = bind_params(tape, m.decoder, [&](const std::string& name) {
      return full && !(cfg_.freeze_token_embeddings && name == "token_embedding");
    });
    if (m.lora) b.lora = bind_params(tape, *m.lora, training && cfg_.decoder_mode == DecoderMode::Lora);
    return b;
  }

  std::string renamed(const Instance& inst, const std::string& text) const {
    const auto it = inst.rename.find(text);
    return it == inst.rename.end() ? text : it->second;
  }

  // Loss of one instance, padded to `pad_to` tokens. Returns the mean NLL and
  // the number of supervised positions.
  std::pair<Var, std::size_t> instance_loss(Tape& tape, const Model& m, const Bound& b, const Instance& inst,
                                            std::size_t pad_to) const {
    const auto& e = *inst.example;
    const auto& t = m.templates.get(inst.task);
    const std::size_t width = m.config.decoder.width;
    const auto blank = ObjectEmbedding::make(std::vector<float>(width, 0.0f), EncoderKind::Resampler);
    std::vector<RecordId> order;
    std::optional<InContextBlock> block;
    if (inst.rag) {
      block = InContextBlock::from_hits(neighbours(e), [&](const Hit& h) {
        order.push_back(h.record_id);
        const auto rec = index_.find(h.record_id);
        return InContextEntry{blank, renamed(inst, record_text(*rec, inst.task)), h.similarity};
      });
    }
    order.push_back(e.id);
    const auto prompt = make_prompt(m.vocab, t, {}, blank, block ? &*block : nullptr, width);
    auto seq = make_sequence(prompt.tokens, m.vocab.tokenize(renamed(inst, target_text(e, inst.task))));
    while (seq.input_tokens.size() < pad_to) {
      seq.input_tokens.push_back(kPad);
      seq.targets.push_back(kIgnore);
    }
    std::vector<Var> objects;
    for (auto id : order) {
      const auto& c = cache_.at(id);
      objects.push_back(resampler_forward(tape.constant(c.rows), std::span<const int>(c.patch_ids), b.encoder,
                                          m.config.encoder.heads));
    }
    auto decoder = b.decoder;
    if (!inst.fresh.empty()) {
      const auto& table = b.decoder.token_embedding.value();
      Tensor keep(table.shape(), 1.0f), replacement(table.shape());
      for (const auto& [id, row] : inst.fresh) {
        const auto r = static_cast<std::size_t>(id);
        std::fill(keep.row(r).begin(), keep.row(r).end(), 0.0f);
        std::copy(row.begin(), row.end(), replacement.row(r).begin());
      }
      decoder.token_embedding = add(mul(b.decoder.token_embedding, tape.constant(keep)), tape.constant(replacement));
    }
    auto rows = resolve_embeddings(std::span<const int>(seq.input_tokens), decoder.token_embedding,
                                   std::span<const Var>(objects));
    auto logits = decoder_forward(rows, decoder, m.config.decoder.heads, b.lora ? &*b.lora : nullptr, m.lora_scale());
    std::size_t n = 0;
    for (int tgt : seq.targets) n += tgt != kIgnore;
    return {cross_entropy(logits, std::span<const int>(seq.targets), kIgnore), n};
  }

  std::size_t prompt_length(const Model& m, const Instance& inst) const {
    // Token count without building object vectors.
    const auto& t = m.templates.get(inst.task);
    const std::size_t width = m.config.decoder.width;
    const auto blank = ObjectEmbedding::make(std::vector<float>(width, 0.0f), EncoderKind::Resampler);
    std::optional<InContextBlock> block;
    if (inst.rag) {
      block = InContextBlock::from_hits(hits_.at(inst.example->id), [&](const Hit& h) {
        return InContextEntry{blank, renamed(inst, record_text(*index_.find(h.record_id), inst.task)), h.similarity};
      });
    }
    const auto prompt = make_prompt(m.vocab, t, {}, blank, block ? &*block : nullptr, width);
    return prompt.tokens.size() + m.vocab.tokenize(renamed(inst, target_text(*inst.example, inst.task))).size();
  }

  std::vector<Instance> epoch_instances(const std::string& task, Rng& rng) const {
    std::vector<const ObjectExample*> order;
    for (const auto& e : splits_.train) order.push_back(&e);
    rng.shuffle(order);
    std::vector<Instance> out;
    for (const auto* e : order) {
      Instance inst{e, task, cfg_.rg_fraction > 0.0 && rng.uniform() < cfg_.rg_fraction, {}, {}};
      if (inst.rag && task == "classification" && rng.uniform() < cfg_.shuffle_fraction) {
        // Rename every label in the prompt to distinct nonce words so the
        // answer can only come from the retrieved block.
        std::set<std::string> names{e->label};
        for (const auto& h : neighbours(*e).hits) names.insert(record_text(*index_.find(h.record_id), task));
        auto pool = pool_;
        rng.shuffle(pool);
        require(pool.size() >= names.size(), ErrorCode::Config, "too few nonce words for label shuffling");
        std::size_t i = 0;
        for (const auto& n : names) {
          inst.rename[n] = pool[i];
          auto& row = inst.fresh[vocab_.id_of(pool[i++])];
          for (std::size_t c = 0; c < width_; ++c) row.push_back(static_cast<float>(rng.normal() * nonce_sd_));
        }
      }
      out.push_back(std::move(inst));
    }
    return out;
  }

  // Groups instances into batches of one prompt shape (plain or retrieved),
  // in order of first appearance.
  std::vector<std::vector<Instance>> batches(std::vector<Instance> items) const {
    std::vector<std::vector<Instance>> out;
    std::vector<Instance> pending[2];
    for (auto& inst : items) {
      auto& p = pending[inst.rag ? 1 : 0];
      p.push_back(std::move(inst));
      if (p.size() == cfg_.batch_size) {
        out.push_back(std::move(p));
        p.clear();
      }
    }
    for (auto& p : pending)
      if (!p.empty()) out.push_back(std::move(p));
    return out;
  }

  StageResult run_stage(Model model, const std::string& task, std::size_t& step, std::vector<nlohmann::json>& log,
                        std::set<std::string>& targets) {
    require(cfg_.decoder_mode != DecoderMode::Lora || model.lora.has_value(), ErrorCode::Config,
            "decoder_mode = lora needs a model with an adapter");
    Rng rng(cfg_.seed ^ detail::fnv1a(task));
    SgdMomentum opt(cfg_.momentum, cfg_.clip_norm);

    auto val_entry = [&](std::size_t epoch, const Model& m) {
      nlohmann::json j{{"epoch", epoch}, {"split", "val"}, {"loss", val_loss(m, task)}, {"stage", task}, {"step", step}};
      if (!splits_.val.empty()) j["accuracy"] = val_accuracy(m, task);
      return j;
    };

    const std::size_t per_epoch = (splits_.train.size() + cfg_.batch_size - 1) / cfg_.batch_size + 1;
    const std::size_t planned = per_epoch * cfg_.epochs;
    const std::size_t stage_start = step;

    StageResult r;
    log.push_back(val_entry(0, model));
    r.best_val_loss = log.back()["loss"].get<double>();
    r.best = model;

    for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      double loss_sum = 0.0, count = 0.0;
      for (auto& batch : batches(epoch_instances(task, rng))) {
        std::size_t pad_to = 0;
        for (const auto& inst : batch) {
          if (inst.rag) neighbours(*inst.example);
          pad_to = std::max(pad_to, prompt_length(model, inst));
          targets.insert(renamed(inst, target_text(*inst.example, task)));
        }
        const auto where = " at stage " + task + ", epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
        Tape tape;
        const Bound b = bind(tape, model, true);
        std::vector<std::pair<Var, std::size_t>> parts;
        std::size_t total = 0;
        Var loss;
        try {
          for (const auto& inst : batch) {
            parts.push_back(instance_loss(tape, model, b, inst, pad_to));
            total += parts.back().second;
          }
          loss = scale(parts[0].first, static_cast<float>(parts[0].second) / static_cast<float>(total));
          for (std::size_t i = 1; i < parts.size(); ++i)
            loss = add(loss, scale(parts[i].first, static_cast<float>(parts[i].second) / static_cast<float>(total)));
        } catch (const Error& e) {
          // Non-finite activations surface inside the ops.
          if (e.code() == ErrorCode::Numeric) fail(ErrorCode::Divergence, e.what() + where);
          throw;
        }
        const double value = loss.value()[0];
        require(std::isfinite(value), ErrorCode::Divergence, "loss is " + std::to_string(value) + where);
        tape.backward(loss);
        step_params(tape, model, b, opt, cosine_lr(cfg_.learning_rate, step - stage_start, planned, cfg_.warmup_steps, cfg_.lr_floor));
        ++step;
        loss_sum += value * static_cast<double>(total);
        count += static_cast<double>(total);
      }
      log.push_back({{"epoch", epoch}, {"split", "train"}, {"loss", loss_sum / count}, {"stage", task}, {"step", step}});
      log.push_back(val_entry(epoch, model));
      const double v = log.back()["loss"].get<double>();
      if (v < r.best_val_loss) {
        r.best_val_loss = v;
        r.best = model;
      }
    }
    r.last = std::move(model);
    return r;
  }

  void step_params(const Tape& tape, Model& m, const Bound& b, SgdMomentum& opt, double lr) const {
    std::vector<Tensor*> params;
    std::vector<Tensor> grads;
    auto gather = [&](auto& tensors, const auto& vars) {
      auto ptrs = flatten_param_ptrs(tensors);
      std::vector<Var> vs;
      for_each_param(vars, [&](const std::string&, const Var& v) { vs.push_back(v); });
      for (std::size_t i = 0; i < ptrs.size(); ++i) {
        if (!tape.requires_grad(vs[i])) continue;
        params.push_back(ptrs[i]);
        grads.push_back(tape.grad(vs[i]));
      }
    };
    gather(m.encoder, b.encoder);
    gather(m.decoder, b.decoder);
    if (m.lora) gather(*m.lora, *b.lora);
    std::vector<const Tensor*> gptr;
    for (const auto& g : grads) gptr.push_back(&g);
    opt.step(params, gptr, lr);
  }

  TrainConfig cfg_;
  const FeatureStore& features_;
  const Splits& splits_;
  const LabelSet& labels_;
  TrainHooks hooks_;
  RetrievalIndex index_;
  std::map<RecordId, Cached> cache_;
  mutable std::map<RecordId, QueryResult> hits_;
  std::vector<std::string> pool_;
  double nonce_sd_ = 0.0;
  Vocabulary vocab_;
  std::size_t width_ = 0;
};

/// Single-stage convenience wrapper.
inline TrainResult train(const TrainConfig& cfg, Model model, const FeatureStore& features, const Splits& splits,
                         const LabelSet& labels, TrainHooks hooks = {}) {
  return Trainer(cfg, features, splits, labels, std::move(hooks)).run(std::move(model));
}

}  // namespace olive
