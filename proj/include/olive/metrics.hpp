#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "olive/error.hpp"

namespace olive {

/// Lower-cased, whitespace-collapsed, trimmed.
inline std::string normalize_label(const std::string& s) {
  std::istringstream in(s);
  std::string out, w;
  while (in >> w) {
    for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline double accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
  require(preds.size() == golds.size(), ErrorCode::Dimension,
          std::to_string(preds.size()) + " predictions for " + std::to_string(golds.size()) + " golds");
  require(!preds.empty(), ErrorCode::Precondition, "accuracy of an empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += normalize_label(preds[i]) == normalize_label(golds[i]);
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// Average precision of one class. Every prediction has confidence 1, so the
/// ranking is the input order. Precision is made monotone from the right
/// and integrated over recall steps.
inline double average_precision(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                                const std::string& cls) {
  std::size_t positives = 0;
  for (const auto& g : golds) positives += g == cls;
  if (positives == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] != cls) continue;
    ++seen;
    tp += golds[i] == cls;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

/// Mean AP over the classes of `classes` that have at least one gold region.
inline double mean_average_precision(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                                     const std::vector<std::string>& classes) {
  require(preds.size() == golds.size(), ErrorCode::Dimension, "one prediction per gold region is required");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : std::set<std::string>(classes.begin(), classes.end())) {
    if (std::find(golds.begin(), golds.end(), c) == golds.end()) continue;
    sum += average_precision(preds, golds, c);
    ++n;
  }
  require(n > 0, ErrorCode::Precondition, "no gold regions belong to the class set");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Caption metrics

inline std::vector<std::string> caption_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(normalize_label(s));
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

using NgramCounts = std::map<std::vector<std::string>, double>;

inline NgramCounts ngram_counts(const std::vector<std::string>& words, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= words.size(); ++i) out[{words.begin() + static_cast<std::ptrdiff_t>(i), words.begin() + static_cast<std::ptrdiff_t>(i + n)}] += 1.0;
  return out;
}

/// CIDEr without the length penalty: per example, 10 x the mean over
/// n = 1..4 of the cosine between the candidate's tf-idf vector and the mean
/// of its references' tf-idf vectors. Term frequencies are raw counts and
/// idf(g) = log(N / df(g)) with df counted over reference sets. Returns the
/// corpus mean; per-example scores go to `per_example` when given.
inline double cider(const std::vector<std::string>& candidates, const std::vector<std::vector<std::string>>& references,
                    std::vector<double>* per_example = nullptr) {
  require(candidates.size() == references.size(), ErrorCode::Dimension, "one reference set per candidate");
  require(candidates.size() >= 2, ErrorCode::Precondition, "CIDEr needs a corpus of at least 2 examples");
  for (const auto& r : references) require(!r.empty(), ErrorCode::Precondition, "every example needs a reference");
  const double big_n = static_cast<double>(candidates.size());
  constexpr std::size_t kMaxN = 4;

  std::vector<double> scores(candidates.size(), 0.0);
  for (std::size_t n = 1; n <= kMaxN; ++n) {
    std::vector<std::vector<NgramCounts>> ref_counts(references.size());
    std::map<std::vector<std::string>, double> df;
    for (std::size_t i = 0; i < references.size(); ++i) {
      std::set<std::vector<std::string>> present;
      for (const auto& r : references[i]) {
        ref_counts[i].push_back(ngram_counts(caption_words(r), n));
        for (const auto& [g, _] : ref_counts[i].back()) present.insert(g);
      }
      for (const auto& g : present) df[g] += 1.0;
    }
    auto idf = [&](const std::vector<std::string>& g) {
      const auto it = df.find(g);
      return std::log(big_n / std::max(1.0, it == df.end() ? 0.0 : it->second));
    };
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      NgramCounts cand = ngram_counts(caption_words(candidates[i]), n);
      for (auto& [g, v] : cand) v *= idf(g);
      NgramCounts ref;
      for (const auto& rc : ref_counts[i])
        for (const auto& [g, v] : rc) ref[g] += v * idf(g) / static_cast<double>(ref_counts[i].size());
      double dot = 0.0, nc = 0.0, nr = 0.0;
      for (const auto& [g, v] : cand) {
        nc += v * v;
        if (const auto it = ref.find(g); it != ref.end()) dot += v * it->second;
      }
      for (const auto& [g, v] : ref) nr += v * v;
      if (nc > 0.0 && nr > 0.0) scores[i] += dot / (std::sqrt(nc) * std::sqrt(nr)) / static_cast<double>(kMaxN);
    }
  }
  double total = 0.0;
  for (auto& s : scores) {
    s *= 10.0;
    total += s;
  }
  if (per_example) *per_example = scores;
  return total / big_n;
}

/// Exact-unigram METEOR approximation against one reference. Not comparable
/// with published METEOR: no stemming, synonymy or paraphrase matching.
inline double meteor_lite_single(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  // Greedy alignment: each candidate word takes the leftmost unused equal
  // reference word.
  std::vector<bool> used(ref.size(), false);
  std::vector<long> align(cand.size(), -1);
  std::size_t matches = 0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!used[j] && ref[j] == cand[i]) {
        used[j] = true;
        align[i] = static_cast<long>(j);
        ++matches;
        break;
      }
    }
  }
  if (matches == 0) return 0.0;
  std::size_t chunks = 0;
  long prev = -2;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (align[i] < 0) {
      prev = -2;
      continue;
    }
    if (align[i] != prev + 1) ++chunks;
    prev = align[i];
  }
  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(chunks) / m, 3.0);
  return fmean * (1.0 - penalty);
}

/// Best score over references per example, averaged over the corpus.
inline double meteor_lite(const std::vector<std::string>& candidates,
                          const std::vector<std::vector<std::string>>& references) {
  require(candidates.size() == references.size(), ErrorCode::Dimension, "one reference set per candidate");
  require(!candidates.empty(), ErrorCode::Precondition, "empty corpus");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0.0;
    const auto c = caption_words(candidates[i]);
    for (const auto& r : references[i]) best = std::max(best, meteor_lite_single(c, caption_words(r)));
    total += best;
  }
  return total / static_cast<double>(candidates.size());
}

}  // namespace olive
