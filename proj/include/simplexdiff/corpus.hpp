#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/rng.hpp"

namespace simplexdiff {

/// Whitespace tokenizer shared by training, generation and evaluation.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

/// Word-level vocabulary. Ids 0..4 are PAD, BOS, EOS, SEP, UNK; class-label
/// tokens (if any) follow immediately, then corpus words.
class Vocab {
 public:
  static constexpr std::string_view reserved_names[token::num_reserved] = {
      "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};

  Vocab() {
    for (auto name : reserved_names) push(std::string(name));
  }

  static bool is_reserved_name(std::string_view w) {
    return std::find(std::begin(reserved_names), std::end(reserved_names), w) !=
           std::end(reserved_names);
  }

  /// Adds a word if absent; returns its id.
  int add(const std::string& word) {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    return push(word);
  }

  /// Registers class-label tokens. Must precede any corpus word.
  void add_labels(const std::vector<std::string>& labels) {
    if (tokens_.size() != static_cast<std::size_t>(token::num_reserved) + num_labels_) {
      fail(ErrorKind::usage, "class labels must be added before corpus words");
    }
    for (const auto& l : labels) {
      if (index_.count(l)) continue;
      push(l);
      ++num_labels_;
    }
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? token::unk : it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) != 0; }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      fail(ErrorKind::vocabulary, "token id " + std::to_string(id) + " outside vocabulary of " +
                                      std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_labels() const { return num_labels_; }
  const std::vector<std::string>& words() const { return tokens_; }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (int i : ids) words.push_back(word(i));
    return join_words(words);
  }

  /// One token per line, reserved tokens first, in id order.
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) fail(ErrorKind::io, "failed writing vocabulary file " + path);
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot read vocabulary file " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      words.push_back(line);
    }
    if (words.size() < static_cast<std::size_t>(token::num_reserved)) {
      fail(ErrorKind::ingestion, path + ": vocabulary is missing reserved tokens");
    }
    for (int i = 0; i < token::num_reserved; ++i) {
      if (words[static_cast<std::size_t>(i)] != reserved_names[i]) {
        fail(ErrorKind::ingestion, path + ":" + std::to_string(i + 1) + ": expected reserved token " +
                                       std::string(reserved_names[i]));
      }
    }
    Vocab v;
    for (std::size_t i = token::num_reserved; i < words.size(); ++i) {
      if (words[i].empty() || v.contains(words[i])) {
        fail(ErrorKind::ingestion, path + ":" + std::to_string(i + 1) + ": empty or duplicate token");
      }
      v.add(words[i]);
    }
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  int push(const std::string& w) {
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(w);
    index_.emplace(w, id);
    return id;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t num_labels_ = 0;
};

/// Frequency-ranked vocabulary (ties broken lexicographically). `max_size`
/// counts the reserved and label ids.
inline Vocab build_vocab(const std::vector<std::string>& lines, std::size_t max_size,
                         std::size_t min_freq = 1, const std::vector<std::string>& labels = {}) {
  if (max_size <= static_cast<std::size_t>(token::num_reserved)) {
    fail(ErrorKind::configuration, "vocabulary max_size must exceed the reserved tokens");
  }
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& line : lines) {
    for (auto& w : split_words(line)) {
      ++total;
      if (Vocab::is_reserved_name(w)) continue;
      ++counts[w];
    }
  }
  if (total == 0) fail(ErrorKind::ingestion, "cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  v.add_labels(labels);
  for (const auto& [w, c] : ranked) {
    if (v.size() >= max_size) break;
    if (c < min_freq) break;
    v.add(w);
  }
  return v;
}

struct PairExample {
  std::vector<int> source;
  std::vector<int> target;
  std::string raw_source;
  std::string raw_target;
};

enum class PairFormat { tsv, jsonl };

inline PairFormat format_for_path(const std::string& path) {
  auto ends = [&](std::string_view suf) {
    return path.size() >= suf.size() && path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends(".jsonl") || ends(".json")) return PairFormat::jsonl;
  return PairFormat::tsv;
}

namespace detail {

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    if (c < 0x80) {
      extra = 0;
    } else if ((c >> 5) == 0x6) {
      extra = 1;
    } else if ((c >> 4) == 0xE) {
      extra = 2;
    } else if ((c >> 3) == 0x1E) {
      extra = 3;
    } else {
      return false;
    }
    if (i + extra >= s.size() && extra > 0) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
    }
    i += extra + 1;
  }
  return true;
}

}  // namespace detail

/// Reads (source, target) text pairs. Token ids are filled by encode_pairs.
inline std::vector<PairExample> load_pairs(const std::string& path, PairFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<PairExample> out;
  std::string line;
  std::size_t lineno = 0;
  auto where = [&] { return path + ":" + std::to_string(lineno); };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!detail::valid_utf8(line)) fail(ErrorKind::ingestion, where() + ": invalid UTF-8");
    PairExample ex;
    if (format == PairFormat::tsv) {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) fail(ErrorKind::ingestion, where() + ": missing tab separator");
      ex.raw_source = line.substr(0, tab);
      ex.raw_target = line.substr(tab + 1);
      if (ex.raw_target.find('\t') != std::string::npos) {
        fail(ErrorKind::ingestion, where() + ": more than two tab-separated fields");
      }
    } else {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::ingestion, where() + ": " + e.what());
      }
      for (const char* key : {"source", "target"}) {
        if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
          fail(ErrorKind::ingestion, where() + ": missing string field '" + key + "'");
        }
      }
      ex.raw_source = j["source"].get<std::string>();
      ex.raw_target = j["target"].get<std::string>();
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<PairExample> load_pairs(const std::string& path) {
  return load_pairs(path, format_for_path(path));
}

inline void encode_pairs(const Vocab& vocab, std::vector<PairExample>& pairs) {
  for (auto& p : pairs) {
    p.source = vocab.encode(p.raw_source);
    p.target = vocab.encode(p.raw_target);
  }
}

inline void write_pairs(const std::string& path, const std::vector<PairExample>& pairs,
                        PairFormat format) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  for (const auto& p : pairs) {
    if (format == PairFormat::tsv) {
      out << p.raw_source << '\t' << p.raw_target << '\n';
    } else {
      out << nlohmann::json{{"source", p.raw_source}, {"target", p.raw_target}}.dump() << '\n';
    }
  }
  if (!out) fail(ErrorKind::io, "failed writing " + path);
}

enum class SynthKind { copy, reverse, sort, parity_label };

inline SynthKind parse_synth_kind(const std::string& name) {
  if (name == "copy") return SynthKind::copy;
  if (name == "reverse") return SynthKind::reverse;
  if (name == "sort") return SynthKind::sort;
  if (name == "parity_label") return SynthKind::parity_label;
  fail(ErrorKind::configuration, "unknown synthetic task '" + name + "'");
}

struct SynthTask {
  Vocab vocab;
  std::vector<PairExample> train, valid, test;
  /// Fixed target span: max length for sequence tasks, 1 for labels.
  std::size_t target_len = 0;
  std::size_t max_source_len = 0;
};

inline std::string content_word(std::size_t i) { return "t" + std::to_string(i); }

/// Synthetic seq2seq tasks over content words t0..t{n-1}. Sources are unique
/// across the whole set, then split 80/10/10. For parity_label the marked
/// symbol is t0 (drawn with probability 0.3 per position) and the target is
/// the single label "even" or "odd" for its count.
inline SynthTask synth_task(SynthKind kind, std::size_t n, std::size_t min_len, std::size_t max_len,
                            std::size_t content_tokens, std::uint64_t seed) {
  if (content_tokens < 2) fail(ErrorKind::configuration, "synthetic tasks need >= 2 content tokens");
  if (min_len < 1 || max_len < min_len) fail(ErrorKind::configuration, "invalid length range");
  if (n < 10) fail(ErrorKind::configuration, "synthetic tasks need n >= 10 for an 80/10/10 split");
  // Distinct sources available; stop counting once it clearly exceeds n.
  double capacity = 0.0;
  for (std::size_t l = min_len; l <= max_len && capacity < 1e18; ++l) {
    capacity += std::pow(static_cast<double>(content_tokens), static_cast<double>(l));
  }
  if (capacity < static_cast<double>(n)) {
    fail(ErrorKind::configuration, "only " + std::to_string(static_cast<long long>(capacity)) +
                                       " distinct sources exist for n=" + std::to_string(n));
  }

  SynthTask task;
  if (kind == SynthKind::parity_label) task.vocab.add_labels({"even", "odd"});
  std::vector<int> content(content_tokens);
  for (std::size_t i = 0; i < content_tokens; ++i) content[i] = task.vocab.add(content_word(i));
  const int marked = content[0];

  Rng rng(derive_seed(seed, Stream::synth));
  std::set<std::vector<int>> seen;
  std::vector<PairExample> all;
  std::size_t attempts = 0;
  while (all.size() < n) {
    if (++attempts > 100 * n + 1000) {
      fail(ErrorKind::configuration, "could not draw enough distinct synthetic sources");
    }
    const auto len = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(min_len),
                                                          static_cast<std::int64_t>(max_len)));
    std::vector<int> src(len);
    for (auto& tok : src) {
      if (kind == SynthKind::parity_label) {
        tok = rng.bernoulli(0.3) ? marked : content[static_cast<std::size_t>(
                                                rng.integer(1, static_cast<std::int64_t>(content_tokens) - 1))];
      } else {
        tok = content[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(content_tokens) - 1))];
      }
    }
    if (!seen.insert(src).second) continue;

    PairExample ex;
    ex.source = src;
    switch (kind) {
      case SynthKind::copy:
        ex.target = src;
        break;
      case SynthKind::reverse:
        ex.target.assign(src.rbegin(), src.rend());
        break;
      case SynthKind::sort:
        ex.target = src;
        std::sort(ex.target.begin(), ex.target.end());
        break;
      case SynthKind::parity_label: {
        const auto count = std::count(src.begin(), src.end(), marked);
        ex.target = {task.vocab.id(count % 2 == 0 ? "even" : "odd")};
        break;
      }
    }
    ex.raw_source = task.vocab.decode(ex.source);
    ex.raw_target = task.vocab.decode(ex.target);
    all.push_back(std::move(ex));
  }

  const std::size_t n_train = n * 8 / 10, n_valid = n / 10;
  task.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  task.valid.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                    all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  task.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), all.end());
  task.target_len = kind == SynthKind::parity_label ? 1 : max_len;
  task.max_source_len = max_len;
  return task;
}

}  // namespace simplexdiff
