#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/sampler.hpp"
#include "simplexdiff/schedule.hpp"
#include "simplexdiff/trainer.hpp"

namespace simplexdiff {

/// Environment variable naming the root for relative output directories.
inline constexpr const char* output_root_env = "SIMPLEXDIFF_OUT";

struct ScheduleConfig {
  int train_steps = 5000;
  double offset = 0.008;
  double simplex_scale = 5.0;
  double max_beta = 0.999;

  NoiseSchedule make() const { return NoiseSchedule(train_steps, offset, simplex_scale, max_beta); }
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct DataConfig {
  /// copy | reverse | sort | parity_label synthesize the data; "files" reads
  /// the train/valid/test paths.
  std::string task = "copy";
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::size_t synth_n = 6250;
  std::size_t synth_min_len = 4;
  std::size_t synth_max_len = 12;
  std::size_t synth_content_tokens = 64;
  std::size_t vocab_max_size = 32000;
  std::size_t vocab_min_freq = 1;
  /// Fixed target span; 0 derives it from the task or the longest target.
  std::size_t target_len = 0;
  /// Label prediction task: generation uses generate.classification_steps.
  bool classification = false;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunSection {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  friend bool operator==(const RunSection&, const RunSection&) = default;
};

struct GenerateSection {
  GenerationConfig gen;
  int classification_steps = 10;
  std::size_t batch_size = 64;

  friend bool operator==(const GenerateSection&, const GenerateSection&) = default;
};

struct RunConfig {
  EncoderConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  GenerateSection generate;
  DataConfig data;
  RunSection run;

  RunConfig() {
    model.dropout = 0.1;
    generate.gen.num_steps = 1000;
  }

  /// Train and generation configs with the run seed threaded through.
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = run.seed;
    return t;
  }
  GenerationConfig generation_config() const {
    GenerationConfig g = generate.gen;
    g.seed = run.seed;
    return g;
  }

  /// Output directory with the environment root applied to relative paths.
  std::filesystem::path output_path() const {
    std::filesystem::path p(run.output_dir);
    if (p.is_relative()) {
      if (const char* root = std::getenv(output_root_env); root && *root) return std::filesystem::path(root) / p;
    }
    return p;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

using IniSection = std::vector<std::pair<std::string, std::string>>;
using IniDoc = std::map<std::string, IniSection>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Grammar (one construct per line):
///   [section]      starts a section
///   key = value    assigns within the current section
///   # or ;         starts a comment line; blank lines are ignored
inline IniDoc parse_ini(const std::string& text, const std::string& origin = "<config>") {
  IniDoc doc;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (s.front() == '[') {
      if (s.back() != ']') fail(ErrorKind::configuration, where + ": malformed section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      doc[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(ErrorKind::configuration, where + ": expected key = value");
    if (section.empty()) fail(ErrorKind::configuration, where + ": key outside any section");
    const std::string key = detail::trim(s.substr(0, eq));
    if (key.empty()) fail(ErrorKind::configuration, where + ": empty key");
    doc[section].emplace_back(key, detail::trim(s.substr(eq + 1)));
  }
  return doc;
}

namespace detail {

struct ConfigField {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class V>
V parse_value(const std::string& name, const std::string& text) {
  auto bad = [&] { fail(ErrorKind::configuration, "bad value '" + text + "' for " + name); };
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    bad();
    return false;
  } else if constexpr (std::is_same_v<V, std::string>) {
    return text;
  } else {
    V out{};
    std::istringstream is(text);
    if constexpr (std::is_unsigned_v<V>) {
      if (!text.empty() && text[0] == '-') bad();
    }
    is >> out;
    if (!is || !(is >> std::ws).eof()) bad();
    return out;
  }
}

template <class V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<V, std::string>) {
    return v;
  } else if constexpr (std::is_floating_point_v<V>) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  } else {
    return std::to_string(v);
  }
}

template <class V, class Acc>
ConfigField field(std::string section, std::string key, Acc acc) {
  const std::string name = section + "." + key;
  return {section, key, [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); },
          [acc, name](RunConfig& c, const std::string& s) { acc(c) = parse_value<V>(name, s); }};
}

template <class E, class Acc, class Parse, class Show>
ConfigField enum_field(std::string section, std::string key, Acc acc, Parse parse, Show show) {
  return {section, key, [acc, show](const RunConfig& c) { return show(acc(const_cast<RunConfig&>(c))); },
          [acc, parse](RunConfig& c, const std::string& s) { acc(c) = parse(s); }};
}

#define SIMPLEXDIFF_FIELD(sec, key, type, expr) \
  field<type>(sec, key, [](RunConfig& c) -> type& { return c.expr; })

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back(SIMPLEXDIFF_FIELD("model", "layers", int, model.layers));
    f.push_back(SIMPLEXDIFF_FIELD("model", "heads", int, model.heads));
    f.push_back(SIMPLEXDIFF_FIELD("model", "d_model", int, model.d_model));
    f.push_back(SIMPLEXDIFF_FIELD("model", "d_ff", int, model.d_ff));
    f.push_back(SIMPLEXDIFF_FIELD("model", "max_len", int, model.max_len));
    f.push_back(SIMPLEXDIFF_FIELD("model", "max_source_len", int, model.max_source_len));
    f.push_back(SIMPLEXDIFF_FIELD("model", "vocab_size", int, model.vocab_size));
    f.push_back(SIMPLEXDIFF_FIELD("model", "dropout", double, model.dropout));
    f.push_back(SIMPLEXDIFF_FIELD("model", "concat_self_cond", bool, model.concat_self_cond));

    f.push_back(SIMPLEXDIFF_FIELD("schedule", "train_steps", int, schedule.train_steps));
    f.push_back(SIMPLEXDIFF_FIELD("schedule", "offset", double, schedule.offset));
    f.push_back(SIMPLEXDIFF_FIELD("schedule", "simplex_scale", double, schedule.simplex_scale));
    f.push_back(SIMPLEXDIFF_FIELD("schedule", "max_beta", double, schedule.max_beta));

    f.push_back(SIMPLEXDIFF_FIELD("train", "learning_rate", double, train.learning_rate));
    f.push_back(SIMPLEXDIFF_FIELD("train", "warmup_steps", int, train.warmup_steps));
    f.push_back(SIMPLEXDIFF_FIELD("train", "total_steps", int, train.total_steps));
    f.push_back(SIMPLEXDIFF_FIELD("train", "batch_size", int, train.batch_size));
    f.push_back(SIMPLEXDIFF_FIELD("train", "rho", double, train.rho));
    f.push_back(enum_field<SelfCondMode>(
        "train", "self_cond_mode", [](RunConfig& c) -> SelfCondMode& { return c.train.self_cond_mode; },
        parse_self_cond_mode, [](SelfCondMode m) { return to_string(m); }));
    f.push_back(SIMPLEXDIFF_FIELD("train", "weight_decay", double, train.weight_decay));
    f.push_back(SIMPLEXDIFF_FIELD("train", "grad_clip", double, train.grad_clip));
    f.push_back(SIMPLEXDIFF_FIELD("train", "log_every", int, train.log_every));
    f.push_back(SIMPLEXDIFF_FIELD("train", "checkpoint_every", int, train.checkpoint_every));

    f.push_back(SIMPLEXDIFF_FIELD("generate", "num_steps", int, generate.gen.num_steps));
    f.push_back(SIMPLEXDIFF_FIELD("generate", "classification_steps", int, generate.classification_steps));
    f.push_back(SIMPLEXDIFF_FIELD("generate", "max_target_len", int, generate.gen.max_target_len));
    f.push_back(SIMPLEXDIFF_FIELD("generate", "self_conditioning", bool, generate.gen.self_conditioning));
    f.push_back(enum_field<DecodeMode>(
        "generate", "mode", [](RunConfig& c) -> DecodeMode& { return c.generate.gen.mode; },
        parse_decode_mode, [](DecodeMode m) { return to_string(m); }));
    f.push_back(SIMPLEXDIFF_FIELD("generate", "block_size", int, generate.gen.block_size));
    f.push_back(SIMPLEXDIFF_FIELD("generate", "stop_at_end", bool, generate.gen.stop_at_end));
    f.push_back(SIMPLEXDIFF_FIELD("generate", "batch_size", std::size_t, generate.batch_size));

    f.push_back(SIMPLEXDIFF_FIELD("data", "task", std::string, data.task));
    f.push_back(SIMPLEXDIFF_FIELD("data", "train", std::string, data.train_path));
    f.push_back(SIMPLEXDIFF_FIELD("data", "valid", std::string, data.valid_path));
    f.push_back(SIMPLEXDIFF_FIELD("data", "test", std::string, data.test_path));
    f.push_back(SIMPLEXDIFF_FIELD("data", "synth_n", std::size_t, data.synth_n));
    f.push_back(SIMPLEXDIFF_FIELD("data", "synth_min_len", std::size_t, data.synth_min_len));
    f.push_back(SIMPLEXDIFF_FIELD("data", "synth_max_len", std::size_t, data.synth_max_len));
    f.push_back(SIMPLEXDIFF_FIELD("data", "synth_content_tokens", std::size_t, data.synth_content_tokens));
    f.push_back(SIMPLEXDIFF_FIELD("data", "vocab_max_size", std::size_t, data.vocab_max_size));
    f.push_back(SIMPLEXDIFF_FIELD("data", "vocab_min_freq", std::size_t, data.vocab_min_freq));
    f.push_back(SIMPLEXDIFF_FIELD("data", "target_len", std::size_t, data.target_len));
    f.push_back(SIMPLEXDIFF_FIELD("data", "classification", bool, data.classification));

    f.push_back(SIMPLEXDIFF_FIELD("run", "seed", std::uint64_t, run.seed));
    f.push_back(SIMPLEXDIFF_FIELD("run", "output_dir", std::string, run.output_dir));
    return f;
  }();
  return fields;
}

#undef SIMPLEXDIFF_FIELD

inline const ConfigField& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : config_fields()) {
    if (f.section == section && f.key == key) return f;
  }
  fail(ErrorKind::configuration, "unknown config key '" + section + "." + key + "'");
}

}  // namespace detail

/// Applies an IniDoc on top of `base`. Sections listed in `ignored` (such as
/// checkpoint bookkeeping) are skipped; any other unknown key is an error.
inline RunConfig config_from_ini(const IniDoc& doc, RunConfig base = {},
                                 const std::vector<std::string>& ignored = {}) {
  for (const auto& [section, entries] : doc) {
    if (std::find(ignored.begin(), ignored.end(), section) != ignored.end()) continue;
    for (const auto& [key, value] : entries) detail::find_field(section, key).set(base, value);
  }
  return base;
}

/// "section.key=value".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    fail(ErrorKind::configuration, "override '" + assignment + "' is not section.key=value");
  }
  detail::find_field(detail::trim(assignment.substr(0, dot)),
                     detail::trim(assignment.substr(dot + 1, eq - dot - 1)))
      .set(cfg, detail::trim(assignment.substr(eq + 1)));
}

/// Fully resolved config text; parses back to an equal RunConfig.
inline std::string to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  return os.str();
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg = config_from_ini(parse_ini(read_text_file(path), path));
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

}  // namespace simplexdiff
