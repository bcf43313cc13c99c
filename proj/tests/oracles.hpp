#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance suite. They trade speed for obviousness.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "olive/retrieval.hpp"

namespace olive::oracle {

// Brute-force staircase: recompute precision and recall from scratch at every
// rank cut-off, then for each distinct recall level take the best precision
// at any cut-off reaching at least that recall.
inline double staircase_ap(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                           const std::string& c) {
  int positives = 0;
  for (const auto& g : golds) positives += g == c;
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  for (std::size_t cut = 0; cut < preds.size(); ++cut) {
    if (preds[cut] != c) continue;
    int tp = 0, fp = 0;
    for (std::size_t i = 0; i <= cut; ++i) {
      if (preds[i] != c) continue;
      (golds[i] == c ? tp : fp)++;
    }
    points.emplace_back(double(tp) / positives, double(tp) / (tp + fp));
  }
  std::vector<double> levels;
  for (const auto& [r, p] : points)
    if (std::find(levels.begin(), levels.end(), r) == levels.end()) levels.push_back(r);
  std::sort(levels.begin(), levels.end());
  double ap = 0, prev = 0;
  for (double r : levels) {
    double best = 0;
    for (const auto& [rr, pp] : points)
      if (rr >= r) best = std::max(best, pp);
    ap += (r - prev) * best;
    prev = r;
  }
  return ap;
}

inline double staircase_map(const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                            const std::vector<std::string>& classes) {
  double sum = 0;
  int n = 0;
  for (const auto& c : classes) {
    if (std::count(golds.begin(), golds.end(), c) == 0) continue;
    sum += staircase_ap(preds, golds, c);
    ++n;
  }
  return sum / n;
}


// Independent tf-idf computation: n-grams keyed by their joined text.
inline std::map<std::string, double> grams(const std::string& s, int n) {
  std::vector<std::string> w;
  std::string cur;
  for (char c : s + " ") {
    if (c == ' ') {
      if (!cur.empty()) w.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  std::map<std::string, double> out;
  for (int i = 0; i + n <= int(w.size()); ++i) {
    std::string g = w[i];
    for (int j = 1; j < n; ++j) g += " " + w[i + j];
    out[g] += 1;
  }
  return out;
}

inline double cider_oracle(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs) {
  const double N = double(cands.size());
  double corpus = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    double score = 0;
    for (int n = 1; n <= 4; ++n) {
      auto idf = [&](const std::string& g) {
        double df = 0;
        for (const auto& rs : refs) {
          bool any = false;
          for (const auto& r : rs) any = any || grams(r, n).count(g);
          df += any;
        }
        return std::log(N / std::max(1.0, df));
      };
      auto c = grams(cands[i], n);
      std::map<std::string, double> mean;
      for (const auto& r : refs[i])
        for (const auto& [g, v] : grams(r, n)) mean[g] += v * idf(g) / double(refs[i].size());
      double dot = 0, a = 0, b = 0;
      for (const auto& [g, v] : c) {
        const double x = v * idf(g);
        a += x * x;
        if (mean.count(g)) dot += x * mean[g];
      }
      for (const auto& [g, v] : mean) b += v * v;
      if (a > 0 && b > 0) score += dot / std::sqrt(a * b) / 4.0;
    }
    corpus += 10 * score;
  }
  return corpus / N;
}

// Full-sort reference: cosine in double from raw vectors, rounded to f32,
// sorted by (similarity desc, id asc).
inline std::vector<Hit> topk_full_sort(const std::vector<RetrievalRecord>& records, const std::vector<float>& q,
                                       std::size_t k, const std::set<RecordId>& exclude) {
  std::vector<Hit> all;
  double qn = 0;
  for (float x : q) qn += double(x) * x;
  for (const auto& r : records) {
    if (exclude.count(r.record_id)) continue;
    double dot = 0, rn = 0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      dot += double(r.embedding.vec[j]) * q[j];
      rn += double(r.embedding.vec[j]) * r.embedding.vec[j];
    }
    all.push_back({r.record_id, static_cast<float>(std::clamp(dot / std::sqrt(rn * qn), -1.0, 1.0))});
  }
  std::stable_sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.record_id < b.record_id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

}  // namespace olive::oracle
