#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simplexdiff/error.hpp"

namespace simplexdiff {

using TokenSeq = std::vector<std::string>;

namespace detail {

template <class Tok>
std::map<std::vector<Tok>, std::size_t> ngram_counts(const std::vector<Tok>& seq, std::size_t n) {
  std::map<std::vector<Tok>, std::size_t> counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[std::vector<Tok>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                              seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace detail

/// Corpus BLEU on a 0..100 scale: clipped 1- to 4-gram precisions summed over
/// the corpus, geometric mean, brevity penalty exp(1 - r/c) when c < r. A
/// precision with zero matches is smoothed to 1 / (total + 1).
template <class Tok>
double bleu(const std::vector<std::vector<Tok>>& hypotheses,
            const std::vector<std::vector<Tok>>& references, int max_n = 4) {
  if (hypotheses.empty()) fail(ErrorKind::usage, "bleu: empty hypothesis list");
  if (hypotheses.size() != references.size()) {
    fail(ErrorKind::alignment, "bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                   std::to_string(references.size()) + " references");
  }
  std::vector<double> match(static_cast<std::size_t>(max_n), 0.0), total(static_cast<std::size_t>(max_n), 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& h = hypotheses[i];
    const auto& r = references[i];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (int n = 1; n <= max_n; ++n) {
      const auto hc = detail::ngram_counts(h, static_cast<std::size_t>(n));
      const auto rc = detail::ngram_counts(r, static_cast<std::size_t>(n));
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) match[static_cast<std::size_t>(n - 1)] += static_cast<double>(std::min(c, it->second));
        total[static_cast<std::size_t>(n - 1)] += static_cast<double>(c);
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < match.size(); ++n) {
    const double p = match[n] > 0.0 ? match[n] / total[n] : 1.0 / (total[n] + 1.0);
    log_sum += std::log(p);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(max_n));
}

template <class Tok>
std::size_t lcs_length(const std::vector<Tok>& a, const std::vector<Tok>& b) {
  std::vector<std::size_t> row(b.size() + 1, 0), prev(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      row[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], row[j - 1]);
    }
    std::swap(row, prev);
  }
  return prev[b.size()];
}

/// LCS F1 in [0, 1]; 0 when either side is empty.
template <class Tok>
double rouge_l(const std::vector<Tok>& hypothesis, const std::vector<Tok>& reference) {
  if (hypothesis.empty() || reference.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(hypothesis, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(hypothesis.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

/// Mean per-example ROUGE-L.
template <class Tok>
double mean_rouge_l(const std::vector<std::vector<Tok>>& hypotheses,
                    const std::vector<std::vector<Tok>>& references) {
  if (hypotheses.size() != references.size()) {
    fail(ErrorKind::alignment, "rouge_l: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                   std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) s += rouge_l(hypotheses[i], references[i]);
  return s / static_cast<double>(hypotheses.size());
}

/// Unique n-grams over total n-grams across all hypotheses; 0 if none exist.
template <class Tok>
double distinct_n(const std::vector<std::vector<Tok>>& hypotheses, std::size_t n) {
  if (n < 1) fail(ErrorKind::range, "distinct_n: n must be >= 1");
  std::set<std::vector<Tok>> unique;
  std::size_t total = 0;
  for (const auto& h : hypotheses) {
    for (const auto& [gram, c] : detail::ngram_counts(h, n)) {
      unique.insert(gram);
      total += c;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

template <class Seq>
double exact_match(const std::vector<Seq>& hypotheses, const std::vector<Seq>& references) {
  if (hypotheses.size() != references.size()) {
    fail(ErrorKind::alignment, "exact_match: " + std::to_string(hypotheses.size()) +
                                   " hypotheses vs " + std::to_string(references.size()) +
                                   " references");
  }
  if (hypotheses.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) hits += hypotheses[i] == references[i];
  return static_cast<double>(hits) / static_cast<double>(hypotheses.size());
}

/// Classification accuracy: a prediction is correct when its label token
/// sequence equals the reference label.
template <class Seq>
double label_accuracy(const std::vector<Seq>& hypotheses, const std::vector<Seq>& references) {
  return exact_match(hypotheses, references);
}

enum class EvalTask { generation, classification };

inline EvalTask parse_eval_task(const std::string& s) {
  if (s == "generation") return EvalTask::generation;
  if (s == "classification") return EvalTask::classification;
  fail(ErrorKind::configuration, "unknown eval task '" + s + "'");
}

struct EvalRecord {
  std::string prediction;
  std::string reference;
  bool exact = false;
  double rouge_l = 0.0;
};

struct EvalReport {
  std::string task;
  std::map<std::string, double> metrics;
  std::vector<EvalRecord> records;
  std::size_t count = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["task"] = task;
    j["count"] = count;
    j["metrics"] = metrics;
    auto& recs = j["records"] = nlohmann::json::array();
    for (const auto& r : records) {
      recs.push_back({{"prediction", r.prediction},
                      {"reference", r.reference},
                      {"exact", r.exact},
                      {"rouge_l", r.rouge_l}});
    }
    return j;
  }

  /// Two-column metric table.
  std::string table() const {
    std::size_t w = 6;
    for (const auto& [k, v] : metrics) w = std::max(w, k.size());
    std::ostringstream os;
    char buf[64];
    auto line = [&](const std::string& k, const std::string& v) {
      os << k << std::string(w - k.size() + 2, ' ') << v << '\n';
    };
    line("metric", "value");
    line(std::string(w, '-'), "--------");
    for (const auto& [k, v] : metrics) {
      std::snprintf(buf, sizeof buf, "%.4f", v);
      line(k, buf);
    }
    line("count", std::to_string(count));
    return os.str();
  }
};

/// Generation: bleu, rouge_l, dist_1, dist_4, exact_match. Classification:
/// accuracy. ROUGE-L and exact match are reported as fractions, BLEU on 0..100.
inline EvalReport evaluate(const std::vector<std::string>& predictions,
                           const std::vector<std::string>& references, EvalTask task,
                           const std::function<TokenSeq(const std::string&)>& tokenize) {
  if (predictions.size() != references.size()) {
    fail(ErrorKind::alignment, std::to_string(predictions.size()) + " predictions vs " +
                                   std::to_string(references.size()) + " references");
  }
  std::vector<TokenSeq> hyp, ref;
  for (const auto& p : predictions) hyp.push_back(tokenize(p));
  for (const auto& r : references) ref.push_back(tokenize(r));
  EvalReport rep;
  rep.count = predictions.size();
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    rep.records.push_back({predictions[i], references[i], hyp[i] == ref[i], rouge_l(hyp[i], ref[i])});
  }
  if (task == EvalTask::classification) {
    rep.task = "classification";
    rep.metrics["accuracy"] = label_accuracy(hyp, ref);
    return rep;
  }
  rep.task = "generation";
  rep.metrics["bleu"] = hyp.empty() ? 0.0 : bleu(hyp, ref);
  rep.metrics["rouge_l"] = mean_rouge_l(hyp, ref);
  rep.metrics["dist_1"] = distinct_n(hyp, 1);
  rep.metrics["dist_4"] = distinct_n(hyp, 4);
  rep.metrics["exact_match"] = exact_match(hyp, ref);
  return rep;
}

}  // namespace simplexdiff
