#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "olive/dataset.hpp"
#include "olive/random.hpp"

namespace olive {

// ---------------------------------------------------------------------------
// Context length

/// Prompt-length model: every in-context example costs `text_cost` text
/// tokens plus the system's image tokens; the query adds its own image and
/// `query_text_cost` text tokens.
struct ContextModel {
  long text_cost = 30;
  long query_text_cost = 30;
  std::map<std::string, long> image_cost{{"olive", 1}, {"resampler", 64}, {"patch-fusion", 256}};

  long image_tokens(const std::string& system) const {
    const auto it = image_cost.find(system);
    require(it != image_cost.end(), ErrorCode::NotFound, "unknown system \"" + system + "\"");
    require(it->second >= 0 && text_cost >= 0 && query_text_cost >= 0, ErrorCode::Config, "costs must be >= 0");
    return it->second;
  }
  long incontext_tokens(const std::string& system, long k) const {
    require(k >= 0, ErrorCode::Domain, "k must be >= 0");
    return k * (text_cost + image_tokens(system));
  }
  long query_tokens(const std::string& system) const { return image_tokens(system) + query_text_cost; }
  long context_length(const std::string& system, long k) const {
    return incontext_tokens(system, k) + query_tokens(system);
  }
};

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  std::vector<std::vector<double>> components;  // 2 unit vectors of length d
  std::vector<double> eigenvalues;              // 2 leading covariance eigenvalues
  double total_variance = 0.0;
  std::vector<std::array<double, 2>> projections;
  double intra_class_cosine = 0.0;  // mean over same-class pairs, original space
  double inter_class_cosine = 0.0;
  std::size_t iterations = 0;

  double explained_ratio() const {
    return total_variance > 0 ? (eigenvalues[0] + eigenvalues[1]) / total_variance : 0.0;
  }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Mean-centred top-2 principal directions by power iteration on the
/// covariance with deflation. Ranks below 2 raise DegenerateSpectrum.
inline PcaResult pca_top2(const std::vector<std::vector<double>>& vectors, const std::vector<std::string>& labels,
                          double tol = 1e-9, std::size_t max_iters = 10000) {
  require(vectors.size() >= 3, ErrorCode::Precondition, "PCA needs at least 3 vectors");
  require(labels.empty() || labels.size() == vectors.size(), ErrorCode::Dimension, "one label per vector");
  const std::size_t m = vectors.size(), d = vectors[0].size();
  require(d >= 2, ErrorCode::Precondition, "PCA needs d >= 2");
  for (const auto& v : vectors) require(v.size() == d, ErrorCode::Dimension, "vectors differ in length");

  std::vector<double> mean(d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < d; ++j) mean[j] += v[j] / static_cast<double>(m);
  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& v : vectors)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov[a][b] += (v[a] - mean[a]) * (v[b] - mean[b]);
  PcaResult r;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) cov[b][a] = cov[a][b] /= static_cast<double>(m);
    r.total_variance += cov[a][a];
  }

  Rng rng(0x9ca);
  for (int c = 0; c < 2; ++c) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    double lambda = 0.0;
    for (std::size_t it = 0; it < max_iters; ++it) {
      std::vector<double> w(d, 0.0);
      for (std::size_t a = 0; a < d; ++a) w[a] = detail::dot(cov[a], v);
      const double norm = std::sqrt(detail::dot(w, w));
      if (norm <= 1e-300) {
        lambda = 0.0;
        break;
      }
      for (auto& x : w) x /= norm;
      double diff = 0.0;
      for (std::size_t a = 0; a < d; ++a) diff = std::max(diff, std::abs(w[a] - v[a]));
      v = std::move(w);
      lambda = norm;
      ++r.iterations;
      if (diff < tol) break;
    }
    require(lambda > 1e-12 * std::max(1.0, r.total_variance), ErrorCode::DegenerateSpectrum,
            "covariance has rank < 2; component " + std::to_string(c + 1) + " has zero variance");
    // Rayleigh quotient, then deflate.
    std::vector<double> cv(d);
    for (std::size_t a = 0; a < d; ++a) cv[a] = detail::dot(cov[a], v);
    lambda = detail::dot(v, cv);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a][b] -= lambda * v[a] * v[b];
    // Fix the sign so the largest-magnitude entry is positive.
    std::size_t arg = 0;
    for (std::size_t a = 1; a < d; ++a)
      if (std::abs(v[a]) > std::abs(v[arg])) arg = a;
    if (v[arg] < 0)
      for (auto& x : v) x = -x;
    r.components.push_back(std::move(v));
    r.eigenvalues.push_back(lambda);
  }

  for (const auto& v : vectors) {
    std::array<double, 2> p{};
    for (int c = 0; c < 2; ++c)
      for (std::size_t j = 0; j < d; ++j) p[c] += (v[j] - mean[j]) * r.components[c][j];
    r.projections.push_back(p);
  }

  if (!labels.empty()) {
    std::vector<double> norms;
    for (const auto& v : vectors) norms.push_back(std::sqrt(detail::dot(v, v)));
    double intra = 0, inter = 0;
    std::size_t ni = 0, ne = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) {
        const double cosv = norms[i] > 0 && norms[j] > 0 ? detail::dot(vectors[i], vectors[j]) / (norms[i] * norms[j]) : 0.0;
        if (labels[i] == labels[j]) intra += cosv, ++ni;
        else inter += cosv, ++ne;
      }
    r.intra_class_cosine = ni ? intra / static_cast<double>(ni) : 0.0;
    r.inter_class_cosine = ne ? inter / static_cast<double>(ne) : 0.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Retrieval sensitivity sweep

struct SweepSpec {
  std::vector<std::size_t> sizes{2, 10, 20};  // retrieval examples per class
  std::vector<std::size_t> ks{1, 3, 5, 10};
};

struct SweepCell {
  std::size_t size = 0;
  std::size_t k = 0;
  double accuracy = 0.0;
};

/// OLIVE-R accuracy on `eval` for every (size, k). The index for size s
/// holds the first s examples of each class of `pool` (pool order), so
/// smaller sets are subsets of larger ones.
inline std::vector<SweepCell> sweep_retrieval(const SweepSpec& spec, const std::vector<ObjectExample>& pool,
                                              const std::vector<ObjectExample>& eval, const FeatureStore& features) {
  require(!spec.sizes.empty() && !spec.ks.empty(), ErrorCode::Config, "sweep grids must be nonempty");
  require(!eval.empty(), ErrorCode::Precondition, "sweep needs evaluation examples");
  std::map<std::string, std::vector<const ObjectExample*>> by_class;
  for (const auto& e : pool) by_class[e.label].push_back(&e);
  std::vector<ObjectEmbedding> queries;
  for (const auto& e : eval) queries.push_back(encode_meanpool(select_masked(features.get(e.image_id), e.mask)));

  std::vector<SweepCell> table;
  for (auto size : spec.sizes) {
    require(size >= 1, ErrorCode::Config, "retrieval set sizes must be >= 1");
    std::vector<ObjectExample> subset;
    for (const auto& [label, items] : by_class) {
      require(items.size() >= size, ErrorCode::Config,
              "class \"" + label + "\" has " + std::to_string(items.size()) + " pool examples, " +
                  std::to_string(size) + " requested");
      for (std::size_t i = 0; i < size; ++i) subset.push_back(*items[i]);
    }
    const auto index = build_index(subset, features);
    const auto labels = index.labels();
    for (auto k : spec.ks) {
      require(k >= 1, ErrorCode::Config, "k must be >= 1");
      std::size_t correct = 0;
      for (std::size_t q = 0; q < eval.size(); ++q)
        correct += majority_vote(index.query_topk(queries[q], k), labels) == eval[q].label;
      table.push_back({size, k, static_cast<double>(correct) / static_cast<double>(eval.size())});
    }
  }
  return table;
}

/// Best accuracy over k for each size, in the order of `spec.sizes`.
inline std::vector<double> best_over_k(const std::vector<SweepCell>& table, const SweepSpec& spec) {
  std::vector<double> out;
  for (auto size : spec.sizes) {
    double best = 0.0;
    for (const auto& c : table)
      if (c.size == size) best = std::max(best, c.accuracy);
    out.push_back(best);
  }
  return out;
}

}  // namespace olive
