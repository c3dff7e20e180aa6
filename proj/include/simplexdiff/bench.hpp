#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <tuple>
#include <vector>

#include "simplexdiff/error.hpp"
#include "simplexdiff/model.hpp"
#include "simplexdiff/rng.hpp"
#include "simplexdiff/sampler.hpp"
#include "simplexdiff/schedule.hpp"

namespace simplexdiff {

struct BenchRecord {
  DecodeMode mode = DecodeMode::full_nar;
  int target_len = 0;
  int num_steps = 0;
  int trials = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  /// Forward passes of one trial.
  std::size_t forward_passes = 0;
  std::vector<double> samples_ms;
};

struct BenchSkip {
  DecodeMode mode;
  int target_len;
  int num_steps;
  std::string reason;
};

struct BenchSpec {
  std::vector<int> lengths{25, 50, 100, 200};
  std::vector<int> steps{10, 50, 100};
  std::vector<DecodeMode> modes{DecodeMode::full_nar, DecodeMode::block};
  int trials = 5;
  int block_size = 25;
  /// Fixed source context length (content token ids), shared by every run.
  std::size_t context_len = 50;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::vector<BenchRecord> records;
  std::vector<BenchSkip> skipped;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator).
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline void sort_records(std::vector<BenchRecord>& records) {
  std::sort(records.begin(), records.end(), [](const BenchRecord& a, const BenchRecord& b) {
    return std::tuple(to_string(a.mode), a.target_len, a.num_steps) <
           std::tuple(to_string(b.mode), b.target_len, b.num_steps);
  });
}

/// Times generation for every (mode, length, steps) cell. Block mode never
/// stops early so every trial decodes the full length. Each cell gets one
/// discarded warm-up run; the clock covers the generate call only.
template <class T>
BenchResult run_bench(const Encoder<T>& model, const NoiseSchedule& schedule, const BenchSpec& spec) {
  if (spec.trials < 3) fail(ErrorKind::configuration, "bench needs at least 3 trials");
  const auto& mc = model.config();
  Rng ctx_rng(derive_seed(spec.seed, Stream::bench));
  std::vector<int> source(spec.context_len);
  for (auto& t : source) {
    t = static_cast<int>(ctx_rng.integer(token::num_reserved, mc.vocab_size - 1));
  }

  BenchResult out;
  for (DecodeMode mode : spec.modes) {
    for (int len : spec.lengths) {
      for (int steps : spec.steps) {
        auto skip = [&](std::string why) { out.skipped.push_back({mode, len, steps, std::move(why)}); };
        if (len < 1) {
          skip("target length must be >= 1");
          continue;
        }
        if (steps < 1 || steps > schedule.train_steps()) {
          skip("num_steps outside [1, " + std::to_string(schedule.train_steps()) + "]");
          continue;
        }
        if (source.size() > static_cast<std::size_t>(mc.max_source_len)) {
          skip("context of " + std::to_string(source.size()) + " exceeds source budget " +
               std::to_string(mc.max_source_len));
          continue;
        }
        if (mode == DecodeMode::full_nar && len > mc.max_target_len()) {
          skip("target length exceeds the model's target budget of " + std::to_string(mc.max_target_len()));
          continue;
        }
        if (mode == DecodeMode::block) {
          if (spec.block_size < 1 || spec.block_size > mc.max_target_len()) {
            skip("block size outside the model's target budget");
            continue;
          }
          const int blocks = (len + spec.block_size - 1) / spec.block_size;
          const auto ctx = source.size() + static_cast<std::size_t>((blocks - 1) * spec.block_size);
          if (ctx > static_cast<std::size_t>(mc.max_source_len)) {
            skip("block context of " + std::to_string(ctx) + " tokens exceeds source budget " +
                 std::to_string(mc.max_source_len));
            continue;
          }
        }

        GenerationConfig g;
        g.num_steps = steps;
        g.max_target_len = len;
        g.mode = mode;
        g.block_size = spec.block_size;
        g.seed = spec.seed;
        g.stop_at_end = false;
        auto once = [&](std::uint64_t trial) {
          Rng rng(sequence_seed(spec.seed, trial));
          const auto t0 = std::chrono::steady_clock::now();
          if (mode == DecodeMode::block) {
            (void)generate_block_raw(model, schedule, source, g, rng);
          } else {
            (void)generate_raw(model, schedule, source, g, rng);
          }
          return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        };

        BenchRecord rec;
        rec.mode = mode;
        rec.target_len = len;
        rec.num_steps = steps;
        rec.trials = spec.trials;
        (void)once(0);
        const std::size_t before = model.forward_passes();
        for (int i = 0; i < spec.trials; ++i) rec.samples_ms.push_back(once(static_cast<std::uint64_t>(i + 1)));
        rec.forward_passes = (model.forward_passes() - before) / static_cast<std::size_t>(spec.trials);
        rec.mean_ms = mean_of(rec.samples_ms);
        rec.std_ms = stddev_of(rec.samples_ms);
        out.records.push_back(std::move(rec));
      }
    }
  }
  sort_records(out.records);
  return out;
}

/// Header mode,target_len,num_steps,trials,mean_ms,std_ms; rows sorted by
/// (mode, target_len, num_steps).
inline void emit_csv(std::vector<BenchRecord> records, const std::string& path) {
  if (records.empty()) fail(ErrorKind::usage, "emit_csv: no records");
  sort_records(records);
  std::ofstream os(path);
  if (!os) fail(ErrorKind::io, "cannot write " + path);
  os << "mode,target_len,num_steps,trials,mean_ms,std_ms\n";
  char buf[64];
  for (const auto& r : records) {
    os << to_string(r.mode) << ',' << r.target_len << ',' << r.num_steps << ',' << r.trials << ',';
    std::snprintf(buf, sizeof buf, "%.4f,%.4f", r.mean_ms, r.std_ms);
    os << buf << '\n';
  }
  if (!os) fail(ErrorKind::io, "failed writing " + path);
}

/// Least-squares fit y = a + b x; returns r^2.
inline double linear_fit_r2(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorKind::usage, "linear fit needs >= 2 paired points");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 1.0;
  return sxy * sxy / (sxx * syy);
}

}  // namespace simplexdiff
