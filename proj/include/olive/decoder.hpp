#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "olive/autodiff.hpp"
#include "olive/layers.hpp"
#include "olive/prompt.hpp"
#include "olive/tokenizer.hpp"

namespace olive {

struct DecoderConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t max_len = 512;
};

/// Causal decoder with tied input/output embeddings and learned positions.
template <class S>
struct DecoderParams {
  S token_embedding;  // V x width, also the output projection
  S positional;       // max_len x width
  std::vector<Block<S>> blocks;
  LayerNormParams<S> final_norm;

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    f(pre + "token_embedding", s.token_embedding);
    f(pre + "positional", s.positional);
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
      Block<S>::each(s.blocks[i], pre + "blocks." + std::to_string(i) + ".", f);
    LayerNormParams<S>::each(s.final_norm, pre + "final_norm.", f);
  }
  template <class U>
  DecoderParams<U> rebind() const {
    DecoderParams<U> out;
    out.blocks.resize(blocks.size());
    return out;
  }
};

struct LoraConfig {
  std::size_t rank = 4;
  float alpha = 8.0f;

  float scale() const { return alpha / static_cast<float>(rank); }
};

/// Adapters on the query and value projections of every decoder block.
template <class S>
struct LoraAdapter {
  std::vector<BlockLora<S>> blocks;

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
      BlockLora<S>::each(s.blocks[i], pre + "blocks." + std::to_string(i) + ".", f);
  }
  template <class U>
  LoraAdapter<U> rebind() const {
    LoraAdapter<U> out;
    out.blocks.resize(blocks.size());
    return out;
  }
};

template <class T = float>
DecoderParams<BasicTensor<T>> init_decoder(const DecoderConfig& cfg, Rng& rng) {
  require(cfg.vocab_size >= 1 && cfg.width >= 1 && cfg.max_len >= 1, ErrorCode::Config, "decoder sizes must be >= 1");
  require(cfg.heads >= 1 && cfg.width % cfg.heads == 0, ErrorCode::Config, "decoder heads must divide width");
  DecoderParams<BasicTensor<T>> p;
  // Small enough that untrained logits are nearly uniform.
  p.token_embedding = random_normal<T>(rng, {cfg.vocab_size, cfg.width}, 0.5 / std::sqrt(double(cfg.width)));
  p.positional = random_normal<T>(rng, {cfg.max_len, cfg.width}, 0.02);
  for (std::size_t i = 0; i < cfg.layers; ++i) p.blocks.push_back(init_block<T>(rng, cfg.width, cfg.mlp_ratio, cfg.layers));
  p.final_norm = init_layer_norm<T>(cfg.width);
  return p;
}

/// A ~ N(0, 1/in), B = 0, so a fresh adapter leaves the model unchanged.
template <class T = float>
LoraAdapter<BasicTensor<T>> init_lora(const DecoderConfig& cfg, const LoraConfig& lc, Rng& rng) {
  require(lc.rank >= 1, ErrorCode::Config, "LoRA rank must be >= 1");
  LoraAdapter<BasicTensor<T>> a;
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.width));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    BlockLora<BasicTensor<T>> b;
    b.q = {random_normal<T>(rng, {lc.rank, cfg.width}, sd), BasicTensor<T>({cfg.width, lc.rank})};
    b.v = {random_normal<T>(rng, {lc.rank, cfg.width}, sd), BasicTensor<T>({cfg.width, lc.rank})};
    a.blocks.push_back(std::move(b));
  }
  return a;
}

/// Logits (T x V) for input rows (T x width). The final norm is applied only
/// when there is at least one block, so a zero-layer decoder computes
/// (rows + positions) * E^T.
template <class T>
BasicVar<T> decoder_forward(BasicVar<T> rows, const DecoderParams<BasicVar<T>>& p, std::size_t heads,
                            const LoraAdapter<BasicVar<T>>* lora = nullptr, T lora_scale = T(0)) {
  const std::size_t len = rows.rows();
  require(len <= p.positional.rows(), ErrorCode::Length,
          "sequence of " + std::to_string(len) + " rows exceeds max length " + std::to_string(p.positional.rows()));
  require(rows.cols() == p.token_embedding.cols(), ErrorCode::Dimension,
          "input rows have width " + std::to_string(rows.cols()) + ", decoder expects " +
              std::to_string(p.token_embedding.cols()));
  require(!lora || lora->blocks.size() == p.blocks.size(), ErrorCode::Dimension, "adapter depth differs from decoder");
  auto x = add(rows, slice_rows(p.positional, 0, len));
  for (std::size_t i = 0; i < p.blocks.size(); ++i)
    x = block_forward(x, p.blocks[i], heads, true, lora ? &lora->blocks[i] : nullptr, lora_scale);
  if (!p.blocks.empty()) x = layer_norm(x, p.final_norm);
  return matmul_nt(x, p.token_embedding);
}

/// Inference-only forward.
/// Residual stream after each block (before the final norm), one tensor per
/// layer.
inline std::vector<Tensor> decoder_hidden_states(const DecoderParams<Tensor>& params, std::size_t heads,
                                                 const Tensor& rows, const LoraAdapter<Tensor>* lora = nullptr,
                                                 float lora_scale = 0.0f) {
  require(rows.rows() <= params.positional.rows(), ErrorCode::Length, "sequence exceeds max length");
  Tape tape;
  const auto p = bind_params(tape, params, false);
  std::optional<LoraAdapter<Var>> a;
  if (lora) a = bind_params(tape, *lora, false);
  auto x = add(tape.constant(rows), slice_rows(p.positional, 0, rows.rows()));
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    x = block_forward(x, p.blocks[i], heads, true, a ? &a->blocks[i] : nullptr, lora_scale);
    out.push_back(x.value());
  }
  return out;
}

inline Tensor decoder_logits(const DecoderParams<Tensor>& params, std::size_t heads, const Tensor& rows,
                             const LoraAdapter<Tensor>* lora = nullptr, float lora_scale = 0.0f) {
  Tape tape;
  const auto p = bind_params(tape, params, false);
  std::optional<LoraAdapter<Var>> a;
  if (lora) a = bind_params(tape, *lora, false);
  return decoder_forward(tape.constant(rows), p, heads, a ? &*a : nullptr, lora_scale).value();
}

/// Adds scale * B * A into the query and value weights.
template <class T>
DecoderParams<BasicTensor<T>> merge_lora(DecoderParams<BasicTensor<T>> params, const LoraAdapter<BasicTensor<T>>& lora,
                                         T scale) {
  require(lora.blocks.size() == params.blocks.size(), ErrorCode::Dimension, "adapter depth differs from decoder");
  auto merge = [scale](BasicTensor<T>& w, const LoraPair<BasicTensor<T>>& pair) {
    const std::size_t in = w.rows(), out = w.cols(), r = pair.a.rows();
    require(pair.a.cols() == in && pair.b.rows() == out && pair.b.cols() == r, ErrorCode::Dimension,
            "adapter shape does not match its target weight");
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t j = 0; j < out; ++j) {
        T acc = T(0);
        for (std::size_t k = 0; k < r; ++k) acc += pair.b(j, k) * pair.a(k, i);
        w(i, j) += scale * acc;
      }
  };
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    merge(params.blocks[i].q.weight, lora.blocks[i].q);
    merge(params.blocks[i].v.weight, lora.blocks[i].v);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Training sequences

/// Teacher-forced sequence: inputs are prompt + target (without the final
/// EOS); `targets[t]` is the next token for response positions and -1
/// (ignored) for prompt positions.
struct Sequence {
  std::vector<int> input_tokens;
  std::vector<int> targets;
};

inline constexpr int kIgnore = -1;

inline Sequence make_sequence(const std::vector<int>& prompt_tokens, const std::vector<int>& response_tokens) {
  require(!prompt_tokens.empty(), ErrorCode::Precondition, "prompt must not be empty");
  Sequence s;
  s.input_tokens = prompt_tokens;
  s.input_tokens.insert(s.input_tokens.end(), response_tokens.begin(), response_tokens.end());
  std::vector<int> full = s.input_tokens;
  full.push_back(kEos);
  s.targets.assign(s.input_tokens.size(), kIgnore);
  for (std::size_t t = prompt_tokens.size() - 1; t < s.input_tokens.size(); ++t) s.targets[t] = full[t + 1];
  return s;
}

// ---------------------------------------------------------------------------
// Greedy decoding

enum class StopReason { Eos, MaxLen };

struct GenerationOutput {
  std::vector<int> ids;
  std::vector<double> log_probs;
  StopReason stop = StopReason::MaxLen;
};

/// Appends argmax tokens (ties to the smallest id) until EOS or `max_new`
/// tokens. Generated tokens enter the context through their text embedding.
inline GenerationOutput greedy_decode(const DecoderParams<Tensor>& params, std::size_t heads,
                                      const MultimodalPrompt& prompt, std::size_t max_new,
                                      const LoraAdapter<Tensor>* lora = nullptr, float lora_scale = 0.0f) {
  Tensor rows = resolve_embeddings(prompt, params.token_embedding);
  const std::size_t d = rows.cols();
  GenerationOutput out;
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto logits = decoder_logits(params, heads, rows, lora, lora_scale);
    const auto last = logits.row(logits.rows() - 1);
    std::size_t best = 0;
    for (std::size_t v = 1; v < last.size(); ++v)
      if (last[v] > last[best]) best = v;
    double mx = last[best], total = 0.0;
    for (float v : last) total += std::exp(static_cast<double>(v) - mx);
    const double logp = -std::log(total);  // log softmax at the argmax
    if (static_cast<int>(best) == kEos) {
      out.stop = StopReason::Eos;
      return out;
    }
    out.ids.push_back(static_cast<int>(best));
    out.log_probs.push_back(logp);
    if (step + 1 == max_new) break;
    Tensor grown({rows.rows() + 1, d});
    std::copy(rows.values().begin(), rows.values().end(), grown.values().begin());
    const auto src = params.token_embedding.row(best);
    std::copy(src.begin(), src.end(), grown.row(rows.rows()).begin());
    rows = std::move(grown);
  }
  out.stop = StopReason::MaxLen;
  return out;
}

}  // namespace olive
