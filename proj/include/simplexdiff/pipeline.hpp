#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simplexdiff/checkpoint.hpp"
#include "simplexdiff/config.hpp"
#include "simplexdiff/corpus.hpp"
#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/sampler.hpp"
#include "simplexdiff/tensor.hpp"
#include "simplexdiff/trainer.hpp"

namespace simplexdiff {

struct Dataset {
  Vocab vocab;
  std::vector<PairExample> train, valid, test;
  std::size_t target_len = 0;
};

inline bool is_synthetic_task(const std::string& task) {
  return task == "copy" || task == "reverse" || task == "sort" || task == "parity_label";
}

/// Loads or synthesizes the data named by `cfg.data` and resolves the fields
/// that depend on it: model.vocab_size, data.target_len,
/// generate.max_target_len and data.classification.
inline Dataset prepare_dataset(RunConfig& cfg) {
  Dataset ds;
  const DataConfig& dc = cfg.data;
  if (is_synthetic_task(dc.task)) {
    SynthKind kind = parse_synth_kind(dc.task);
    SynthTask t = synth_task(kind, dc.synth_n, dc.synth_min_len, dc.synth_max_len,
                             dc.synth_content_tokens, cfg.run.seed);
    ds.vocab = std::move(t.vocab);
    ds.train = std::move(t.train);
    ds.valid = std::move(t.valid);
    ds.test = std::move(t.test);
    ds.target_len = t.target_len;
    if (kind == SynthKind::parity_label) cfg.data.classification = true;
  } else if (dc.task == "files") {
    if (dc.train_path.empty()) fail(ErrorKind::configuration, "data.train is required when data.task = files");
    ds.train = load_pairs(dc.train_path);
    if (!dc.valid_path.empty()) ds.valid = load_pairs(dc.valid_path);
    if (!dc.test_path.empty()) ds.test = load_pairs(dc.test_path);
    std::vector<std::string> lines;
    for (const auto& p : ds.train) {
      lines.push_back(p.raw_source);
      lines.push_back(p.raw_target);
    }
    ds.vocab = build_vocab(lines, dc.vocab_max_size, dc.vocab_min_freq);
    for (auto* split : {&ds.train, &ds.valid, &ds.test}) encode_pairs(ds.vocab, *split);
    for (const auto& p : ds.train) ds.target_len = std::max(ds.target_len, p.target.size());
    ds.target_len = std::max<std::size_t>(ds.target_len, 1);
  } else {
    fail(ErrorKind::configuration, "data.task must be copy, reverse, sort, parity_label or files, got '" +
                                       dc.task + "'");
  }
  if (dc.target_len > 0) ds.target_len = dc.target_len;
  cfg.data.target_len = ds.target_len;

  if (cfg.model.vocab_size != 0 && static_cast<std::size_t>(cfg.model.vocab_size) != ds.vocab.size()) {
    fail(ErrorKind::compatibility, "model.vocab_size = " + std::to_string(cfg.model.vocab_size) +
                                       " but the data vocabulary has " + std::to_string(ds.vocab.size()) +
                                       " tokens");
  }
  cfg.model.vocab_size = static_cast<int>(ds.vocab.size());
  if (cfg.generate.gen.max_target_len == 0) cfg.generate.gen.max_target_len = static_cast<int>(ds.target_len);
  cfg.model.validate();
  if (ds.target_len > static_cast<std::size_t>(cfg.model.max_target_len())) {
    fail(ErrorKind::sequence_length, "target length " + std::to_string(ds.target_len) +
                                         " exceeds the model's target budget " +
                                         std::to_string(cfg.model.max_target_len()));
  }
  for (const auto& p : ds.train) {
    if (p.source.size() > static_cast<std::size_t>(cfg.model.max_source_len)) {
      fail(ErrorKind::sequence_length, "training source of " + std::to_string(p.source.size()) +
                                           " tokens exceeds model.max_source_len");
    }
  }
  return ds;
}

struct TrainPaths {
  std::filesystem::path dir;
  std::filesystem::path checkpoint() const { return dir / "checkpoint.bin"; }
  std::filesystem::path checkpoint_at(std::int64_t step) const {
    return dir / ("checkpoint_step" + std::to_string(step) + ".bin");
  }
  std::filesystem::path config() const { return dir / "config.ini"; }
  std::filesystem::path vocab() const { return dir / "vocab.txt"; }
  std::filesystem::path metrics() const { return dir / "metrics.log"; }
  std::filesystem::path split(const std::string& name) const { return dir / (name + ".tsv"); }
};

struct TrainOutcome {
  RunConfig config;
  TrainPaths paths;
  double final_loss = 0.0;
};

/// Full training command: data, output directory, resolved config echo,
/// metrics log, periodic and final checkpoints. When `resume` names a
/// checkpoint, its config (plus `overrides`) and state are used instead.
inline TrainOutcome run_training(RunConfig cfg, const std::optional<std::string>& resume = std::nullopt,
                                 const std::vector<std::string>& overrides = {}) {
  tune_allocator();
  std::optional<TrainingState<float>> restored;
  if (resume) {
    restored = load_training_checkpoint<float>(*resume);
    cfg = restored->config;
    for (const auto& o : overrides) apply_override(cfg, o);
  }
  Dataset ds = prepare_dataset(cfg);
  cfg.train.validate();

  TrainOutcome out;
  out.paths.dir = cfg.output_path();
  std::filesystem::create_directories(out.paths.dir);
  {
    std::ofstream os(out.paths.config());
    if (!os) fail(ErrorKind::io, "cannot write " + out.paths.config().string());
    os << to_ini(cfg);
  }
  ds.vocab.save(out.paths.vocab().string());
  for (const auto& [name, split] : {std::pair{"train", &ds.train}, {"valid", &ds.valid}, {"test", &ds.test}}) {
    write_pairs(out.paths.split(name).string(), *split, PairFormat::tsv);
  }

  Encoder<float> model;
  if (restored) {
    if (!(restored->model.config() == cfg.model)) {
      fail(ErrorKind::compatibility, "resumed checkpoint model config differs from the data-resolved config");
    }
    model = std::move(restored->model);
  } else {
    Rng init(derive_seed(cfg.run.seed, Stream::init));
    model = Encoder<float>(cfg.model, init);
  }
  Trainer<float> trainer(model, cfg.train_config(), cfg.schedule.make(), ds.target_len);
  if (restored) trainer.optimizer() = restored->optimizer;

  std::ofstream log(out.paths.metrics(), restored ? std::ios::app : std::ios::trunc);
  if (!log) fail(ErrorKind::io, "cannot write " + out.paths.metrics().string());
  auto save = [&](const std::filesystem::path& p) {
    save_training_checkpoint(p.string(), cfg, model, trainer.optimizer());
  };
  trainer.fit(ds.train, &log, [&](Trainer<float>& t) { save(out.paths.checkpoint_at(t.step())); });
  save(out.paths.checkpoint());
  out.config = cfg;
  return out;
}

/// Source text of each line: the "source" field of a JSON object, the text
/// before the first tab, or the whole line.
inline std::vector<std::string> load_sources(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  const bool jsonl = format_for_path(path) == PairFormat::jsonl;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!detail::valid_utf8(line)) fail(ErrorKind::ingestion, path + ":" + std::to_string(lineno) + ": invalid UTF-8");
    if (jsonl) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::ingestion, path + ":" + std::to_string(lineno) + ": " + e.what());
      }
      if (!j.is_object() || !j.contains("source") || !j["source"].is_string()) {
        fail(ErrorKind::ingestion, path + ":" + std::to_string(lineno) + ": missing string field 'source'");
      }
      out.push_back(j["source"].get<std::string>());
    } else {
      out.push_back(line.substr(0, line.find('\t')));
    }
  }
  return out;
}

/// Text for evaluation: a JSON object's "prediction" (else "target") field,
/// the text after the first tab, or the whole line.
inline std::vector<std::string> load_eval_texts(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  std::size_t lineno = 0;
  const bool jsonl = format_for_path(path) == PairFormat::jsonl;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && !jsonl) {
      out.emplace_back();
      continue;
    }
    if (line.empty()) continue;
    if (jsonl) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::ingestion, path + ":" + std::to_string(lineno) + ": " + e.what());
      }
      const char* key = j.is_object() && j.contains("prediction") ? "prediction" : "target";
      if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
        fail(ErrorKind::ingestion, path + ":" + std::to_string(lineno) +
                                       ": missing string field 'prediction' or 'target'");
      }
      out.push_back(j[key].get<std::string>());
    } else {
      const auto tab = line.find('\t');
      out.push_back(tab == std::string::npos ? line : line.substr(tab + 1));
    }
  }
  return out;
}

}  // namespace simplexdiff
