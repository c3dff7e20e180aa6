// Command-line front end: train, generate, eval, bench, synth.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "simplexdiff/bench.hpp"
#include "simplexdiff/checkpoint.hpp"
#include "simplexdiff/config.hpp"
#include "simplexdiff/corpus.hpp"
#include "simplexdiff/metrics.hpp"
#include "simplexdiff/pipeline.hpp"
#include "simplexdiff/sampler.hpp"

namespace sd = simplexdiff;
namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string resume;
};

struct GenerateArgs {
  std::string checkpoint;
  std::string input;
  std::string output = "-";
  std::string vocab;
  std::optional<int> steps;
  std::optional<std::string> mode;
  std::optional<int> block_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size;
};

struct EvalArgs {
  std::string predictions;
  std::string references;
  std::string task = "generation";
  std::string output;
};

struct BenchArgs {
  std::string checkpoint;
  std::string config;
  std::vector<std::string> overrides;
  std::vector<int> lengths{25, 50, 100, 200};
  std::vector<int> steps{10, 50, 100};
  std::vector<std::string> modes{"full_nar", "block"};
  int trials = 5;
  int block_size = 25;
  std::size_t context = 50;
  std::uint64_t seed = 0;
  std::string output = "bench.csv";
};

struct SynthArgs {
  std::string task = "copy";
  std::size_t n = 6250;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::size_t content_tokens = 64;
  std::uint64_t seed = 0;
  std::string output_dir = "synth";
  std::string format = "tsv";
};

void cmd_train(const TrainArgs& a) {
  sd::RunConfig cfg;
  if (!a.config.empty()) cfg = sd::load_config(a.config);
  for (const auto& o : a.overrides) sd::apply_override(cfg, o);
  std::optional<std::string> resume;
  if (!a.resume.empty()) resume = a.resume;
  const auto out = sd::run_training(cfg, resume, a.overrides);
  std::cout << "checkpoint: " << out.paths.checkpoint().string() << '\n';
}

void cmd_generate(const GenerateArgs& a) {
  sd::tune_allocator();
  auto st = sd::load_training_checkpoint<float>(a.checkpoint);
  const fs::path vocab_path = a.vocab.empty() ? fs::path(a.checkpoint).parent_path() / "vocab.txt" : fs::path(a.vocab);
  const sd::Vocab vocab = sd::Vocab::load(vocab_path.string());
  if (vocab.size() != static_cast<std::size_t>(st.config.model.vocab_size)) {
    sd::fail(sd::ErrorKind::compatibility, "vocabulary " + vocab_path.string() + " has " +
                                               std::to_string(vocab.size()) + " tokens, checkpoint expects " +
                                               std::to_string(st.config.model.vocab_size));
  }
  sd::GenerationConfig g = st.config.generation_config();
  g.num_steps = st.config.data.classification ? st.config.generate.classification_steps : g.num_steps;
  if (a.steps) g.num_steps = *a.steps;
  if (a.mode) g.mode = sd::parse_decode_mode(*a.mode);
  if (a.block_size) g.block_size = *a.block_size;
  if (a.seed) g.seed = *a.seed;
  const std::size_t batch = a.batch_size.value_or(st.config.generate.batch_size);
  const sd::NoiseSchedule schedule = st.config.schedule.make();
  g.validate(schedule);

  const auto sources = sd::load_sources(a.input);
  std::ofstream file;
  if (a.output != "-") {
    file.open(a.output);
    if (!file) sd::fail(sd::ErrorKind::io, "cannot write " + a.output);
  }
  std::ostream& os = a.output == "-" ? std::cout : file;
  const std::size_t chunk = g.mode == sd::DecodeMode::block ? 1 : std::max<std::size_t>(batch, 1);
  for (std::size_t lo = 0; lo < sources.size(); lo += chunk) {
    const std::size_t hi = std::min(sources.size(), lo + chunk);
    std::vector<std::vector<int>> ids;
    for (std::size_t i = lo; i < hi; ++i) ids.push_back(vocab.encode(sources[i]));
    const auto t0 = std::chrono::steady_clock::now();
    const auto preds = sd::generate_all(st.model, schedule, ids, g, chunk, lo);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() /
        static_cast<double>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      nlohmann::json rec{{"source", sources[i]},
                         {"prediction", vocab.decode(preds[i - lo])},
                         {"steps", g.num_steps},
                         {"seed", g.seed},
                         {"wall_ms", ms}};
      os << rec.dump() << '\n';
    }
  }
  os.flush();
  if (!os) sd::fail(sd::ErrorKind::io, "failed writing predictions");
}

void cmd_eval(const EvalArgs& a) {
  const auto preds = sd::load_eval_texts(a.predictions);
  const auto refs = sd::load_eval_texts(a.references);
  if (preds.size() != refs.size()) {
    sd::fail(sd::ErrorKind::alignment, std::to_string(preds.size()) + " predictions vs " +
                                           std::to_string(refs.size()) + " references");
  }
  const auto rep = sd::evaluate(preds, refs, sd::parse_eval_task(a.task), sd::split_words);
  std::cout << rep.table();
  if (!a.output.empty()) {
    std::ofstream os(a.output);
    if (!os) sd::fail(sd::ErrorKind::io, "cannot write " + a.output);
    os << rep.to_json().dump(2) << '\n';
  }
}

void cmd_bench(const BenchArgs& a) {
  sd::tune_allocator();
  sd::BenchSpec spec;
  spec.lengths = a.lengths;
  spec.steps = a.steps;
  spec.modes.clear();
  for (const auto& m : a.modes) spec.modes.push_back(sd::parse_decode_mode(m));
  spec.trials = a.trials;
  spec.block_size = a.block_size;
  spec.context_len = a.context;
  spec.seed = a.seed;

  sd::Encoder<float> model;
  sd::NoiseSchedule schedule;
  if (!a.checkpoint.empty()) {
    auto st = sd::load_training_checkpoint<float>(a.checkpoint);
    model = std::move(st.model);
    schedule = st.config.schedule.make();
  } else {
    // Untrained weights.
    sd::RunConfig cfg;
    cfg.model.max_len = 512;
    cfg.model.max_source_len = 255;
    cfg.model.vocab_size = 69;
    if (!a.config.empty()) cfg = sd::load_config(a.config);
    for (const auto& o : a.overrides) sd::apply_override(cfg, o);
    if (cfg.model.vocab_size == 0) cfg.model.vocab_size = 69;
    sd::Rng init(sd::derive_seed(a.seed, sd::Stream::init));
    model = sd::Encoder<float>(cfg.model, init);
    schedule = cfg.schedule.make();
  }
  const auto res = sd::run_bench(model, schedule, spec);
  for (const auto& s : res.skipped) {
    std::cerr << "skip " << sd::to_string(s.mode) << " len=" << s.target_len << " steps=" << s.num_steps
              << ": " << s.reason << '\n';
  }
  sd::emit_csv(res.records, a.output);
  std::cout << "wrote " << res.records.size() << " rows to " << a.output << '\n';
}

void cmd_synth(const SynthArgs& a) {
  auto task = sd::synth_task(sd::parse_synth_kind(a.task), a.n, a.min_len, a.max_len, a.content_tokens, a.seed);
  fs::create_directories(a.output_dir);
  const auto fmt = a.format == "jsonl" ? sd::PairFormat::jsonl : sd::PairFormat::tsv;
  if (a.format != "tsv" && a.format != "jsonl") {
    sd::fail(sd::ErrorKind::configuration, "unknown format '" + a.format + "'");
  }
  const std::string ext = a.format == "jsonl" ? ".jsonl" : ".tsv";
  const fs::path dir(a.output_dir);
  sd::write_pairs((dir / ("train" + ext)).string(), task.train, fmt);
  sd::write_pairs((dir / ("valid" + ext)).string(), task.valid, fmt);
  sd::write_pairs((dir / ("test" + ext)).string(), task.test, fmt);
  task.vocab.save((dir / "vocab.txt").string());
  std::cout << task.train.size() << " train, " << task.valid.size() << " valid, " << task.test.size()
            << " test examples in " << a.output_dir << '\n';
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simplex diffusion language model: train, generate, eval, bench, synth"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("-c,--config", ta.config, "Config file (sections [model] [schedule] [train] [generate] [data] [run])");
  train->add_option("--set", ta.overrides, "Override as section.key=value (repeatable)");
  train->add_option("--resume", ta.resume, "Resume from a checkpoint");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Generate predictions from a checkpoint");
  gen->add_option("--checkpoint", ga.checkpoint, "Checkpoint file")->required();
  gen->add_option("--input", ga.input, "Sources: text, tsv or jsonl")->required();
  gen->add_option("--output", ga.output, "JSON-lines output ('-' for stdout)");
  gen->add_option("--vocab", ga.vocab, "Vocabulary file (default: beside the checkpoint)");
  gen->add_option("--steps", ga.steps, "Number of sampling steps");
  gen->add_option("--mode", ga.mode, "full_nar or block");
  gen->add_option("--block-size", ga.block_size, "Tokens per block in block mode");
  gen->add_option("--seed", ga.seed, "Sampling seed");
  gen->add_option("--batch-size", ga.batch_size, "Sequences per forward batch");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score predictions against references");
  ev->add_option("--predictions", ea.predictions, "Predictions (jsonl from generate, or text)")->required();
  ev->add_option("--references", ea.references, "References (tsv/jsonl pairs, or text)")->required();
  ev->add_option("--task", ea.task, "generation or classification");
  ev->add_option("--output", ea.output, "Write the JSON report here");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Measure sampling latency");
  bench->add_option("--checkpoint", ba.checkpoint, "Checkpoint (default: untrained model)");
  bench->add_option("-c,--config", ba.config, "Config for the untrained model");
  bench->add_option("--set", ba.overrides, "Config override section.key=value");
  bench->add_option("--lengths", ba.lengths, "Target lengths")->delimiter(',');
  bench->add_option("--steps", ba.steps, "Sampling step counts")->delimiter(',');
  bench->add_option("--modes", ba.modes, "full_nar,block")->delimiter(',');
  bench->add_option("--trials", ba.trials, "Timed trials per cell (>= 3)");
  bench->add_option("--block-size", ba.block_size, "Tokens per block in block mode");
  bench->add_option("--context", ba.context, "Source context length");
  bench->add_option("--seed", ba.seed, "Seed for weights and noise");
  bench->add_option("--output", ba.output, "CSV output path");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  synth->add_option("--task", sa.task, "copy, reverse, sort or parity_label");
  synth->add_option("--n", sa.n, "Total examples before the 80/10/10 split");
  synth->add_option("--min-len", sa.min_len, "Minimum source length");
  synth->add_option("--max-len", sa.max_len, "Maximum source length");
  synth->add_option("--content-tokens", sa.content_tokens, "Number of content tokens");
  synth->add_option("--seed", sa.seed, "Seed");
  synth->add_option("--output-dir", sa.output_dir, "Output directory");
  synth->add_option("--format", sa.format, "tsv or jsonl");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error[usage]: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*train) cmd_train(ta);
    if (*gen) cmd_generate(ga);
    if (*ev) cmd_eval(ea);
    if (*bench) cmd_bench(ba);
    if (*synth) cmd_synth(sa);
  } catch (const sd::Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", std::string(sd::to_string(e.kind())).c_str(), one_line(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[internal]: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
