#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "olive/autodiff.hpp"
#include "olive/features.hpp"
#include "olive/layers.hpp"
#include "olive/mask.hpp"

namespace olive {

/// Patch rows picked out by a mask, in ascending patch order.
struct MaskedFeatures {
  Tensor rows;  // l x d
  std::vector<std::size_t> patch_indices;

  std::size_t l() const noexcept { return patch_indices.size(); }
};

inline MaskedFeatures select_masked(const PatchGrid& grid, const ObjectMask& mask) {
  require(grid.n == mask.n(), ErrorCode::Shape,
          "mask is " + std::to_string(mask.n()) + "x" + std::to_string(mask.n()) + " but the grid is " +
              std::to_string(grid.n) + "x" + std::to_string(grid.n));
  MaskedFeatures mf;
  mf.patch_indices = mask.indices();
  require(!mf.patch_indices.empty(), ErrorCode::EmptyMask, "mask selects no patches");
  mf.rows = Tensor({mf.patch_indices.size(), grid.d});
  for (std::size_t i = 0; i < mf.patch_indices.size(); ++i) {
    const auto src = grid.patch_row(mf.patch_indices[i]);
    std::copy(src.begin(), src.end(), mf.rows.row(i).begin());
  }
  return mf;
}

enum class EncoderKind { Resampler, Meanpool };

inline std::string_view encoder_kind_name(EncoderKind k) {
  return k == EncoderKind::Meanpool ? "meanpool" : "resampler";
}

struct ObjectEmbedding {
  std::vector<float> vec;
  EncoderKind kind = EncoderKind::Meanpool;
  double norm = 0.0;

  static ObjectEmbedding make(std::vector<float> v, EncoderKind kind) {
    double sq = 0.0;
    for (float x : v) {
      require(std::isfinite(x), ErrorCode::Numeric, "object embedding has a non-finite entry");
      sq += static_cast<double>(x) * x;
    }
    return {std::move(v), kind, std::sqrt(sq)};
  }

  std::size_t dim() const noexcept { return vec.size(); }
  Tensor as_row() const { return Tensor({1, vec.size()}, vec); }
};

/// Parameter-free object vector: the mean of the masked rows.
inline ObjectEmbedding encode_meanpool(const MaskedFeatures& mf) {
  require(mf.l() >= 1 && mf.rows.rows() == mf.l(), ErrorCode::EmptyMask, "mean pooling needs at least one row");
  const std::size_t d = mf.rows.cols();
  std::vector<double> acc(d, 0.0);
  for (std::size_t i = 0; i < mf.l(); ++i) {
    const auto r = mf.rows.row(i);
    for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
  }
  std::vector<float> out(d);
  for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(mf.l()));
  return ObjectEmbedding::make(std::move(out), EncoderKind::Meanpool);
}

// ---------------------------------------------------------------------------
// Resampler

struct ObjectEncoderConfig {
  std::size_t n = 8;        // grid side; positional table has n^2 rows
  std::size_t width = 64;   // feature width d
  std::size_t out_dim = 64; // decoder embedding width d'
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
};

/// Learnable query token followed by `layers` self-attention blocks over
/// [query; masked rows + positions], read out at the query and projected.
template <class S>
struct ObjectEncoderParams {
  S query;       // 1 x width
  S positional;  // n^2 x width
  std::vector<Block<S>> blocks;
  LayerNormParams<S> final_norm;
  Linear<S> proj;  // width x out_dim

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    f(pre + "query", s.query);
    f(pre + "positional", s.positional);
    for (std::size_t i = 0; i < s.blocks.size(); ++i)
      Block<S>::each(s.blocks[i], pre + "blocks." + std::to_string(i) + ".", f);
    LayerNormParams<S>::each(s.final_norm, pre + "final_norm.", f);
    Linear<S>::each(s.proj, pre + "proj.", f);
  }
  template <class U>
  ObjectEncoderParams<U> rebind() const {
    ObjectEncoderParams<U> out;
    out.blocks.resize(blocks.size());
    return out;
  }
};

template <class T = float>
ObjectEncoderParams<BasicTensor<T>> init_object_encoder(const ObjectEncoderConfig& cfg, Rng& rng) {
  require(cfg.n >= 1 && cfg.width >= 1 && cfg.out_dim >= 1, ErrorCode::Config, "object encoder sizes must be >= 1");
  require(cfg.heads >= 1 && cfg.width % cfg.heads == 0, ErrorCode::Config,
          "object encoder heads (" + std::to_string(cfg.heads) + ") must divide width (" + std::to_string(cfg.width) +
              ")");
  ObjectEncoderParams<BasicTensor<T>> p;
  p.query = random_normal<T>(rng, {1, cfg.width}, 0.02);
  p.positional = random_normal<T>(rng, {cfg.n * cfg.n, cfg.width}, 0.02);
  for (std::size_t i = 0; i < cfg.layers; ++i) p.blocks.push_back(init_block<T>(rng, cfg.width, cfg.mlp_ratio, cfg.layers));
  p.final_norm = init_layer_norm<T>(cfg.width);
  p.proj = init_linear<T>(rng, cfg.width, cfg.out_dim, 1.0 / std::sqrt(static_cast<double>(cfg.width)));
  return p;
}

/// Differentiable resampler forward on a tape. `rows` is l x width and
/// `patch_ids` gives each row's original patch index. Returns 1 x out_dim.
template <class T>
BasicVar<T> resampler_forward(BasicVar<T> rows, std::span<const int> patch_ids,
                              const ObjectEncoderParams<BasicVar<T>>& p, std::size_t heads) {
  require(rows.rows() == patch_ids.size() && !patch_ids.empty(), ErrorCode::Shape,
          "resampler needs one patch id per masked row");
  require(rows.cols() == p.query.cols(), ErrorCode::Shape,
          "masked rows have width " + std::to_string(rows.cols()) + ", encoder expects " +
              std::to_string(p.query.cols()));
  auto x = concat_rows({p.query, add(rows, embedding(p.positional, patch_ids))});
  for (const auto& block : p.blocks) x = block_forward(x, block, heads, false);
  auto readout = layer_norm(slice_rows(x, 0, 1), p.final_norm);
  return linear(readout, p.proj);
}

inline std::vector<int> patch_ids_of(const MaskedFeatures& mf) {
  return {mf.patch_indices.begin(), mf.patch_indices.end()};
}

template <class T = float>
ObjectEmbedding encode_resampler(const MaskedFeatures& mf, const ObjectEncoderParams<BasicTensor<T>>& params,
                                 std::size_t heads) {
  require(mf.l() >= 1, ErrorCode::EmptyMask, "resampler needs at least one row");
  BasicTape<T> tape;
  const auto bound = bind_params(tape, params, false);
  const auto ids = patch_ids_of(mf);
  auto out = resampler_forward(tape.constant(mf.rows.template cast<T>()), std::span<const int>(ids), bound, heads);
  const auto& v = out.value().values();
  return ObjectEmbedding::make(std::vector<float>(v.begin(), v.end()), EncoderKind::Resampler);
}

}  // namespace olive
