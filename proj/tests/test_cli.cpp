#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "simplexdiff/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("simplexdiff_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  Result run(const std::string& args) const {
    const fs::path o = dir_ / "stdout.txt", e = dir_ / "stderr.txt";
    const std::string cmd = std::string(SIMPLEXDIFF_CLI_PATH) + " " + args + " > " + o.string() + " 2> " + e.string();
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
  }

  fs::path write(const std::string& name, const std::string& text) const {
    const fs::path p = dir_ / name;
    std::ofstream(p, std::ios::binary) << text;
    return p;
  }

  std::string train_config(const std::string& out, int steps = 300) const {
    std::ostringstream os;
    os << "[model]\nlayers = 2\nheads = 2\nd_model = 32\nd_ff = 64\nmax_len = 32\nmax_source_len = 12\n"
          "dropout = 0\n[train]\nlearning_rate = 0.001\nwarmup_steps = 20\ntotal_steps = "
       << steps << "\nbatch_size = 16\nlog_every = 50\n[data]\ntask = copy\nsynth_n = 500\n"
       << "synth_content_tokens = 64\n[run]\nseed = 3\noutput_dir = " << (dir_ / out).string() << "\n";
    return os.str();
  }

  static void expect_single_line_error(const Result& r, const std::string& kind) {
    EXPECT_NE(r.code, 0);
    const auto ls = lines_of(r.err);
    ASSERT_EQ(ls.size(), 1u) << r.err;
    EXPECT_EQ(ls[0].rfind("error[" + kind + "]: ", 0), 0u) << ls[0];
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SynthWritesSplits) {
  const auto r = run("synth --task reverse --n 100 --min-len 2 --max-len 5 --content-tokens 8 --output-dir " +
                     (dir_ / "s").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(slurp(dir_ / "s" / "train.tsv")).size(), 80u);
  EXPECT_EQ(lines_of(slurp(dir_ / "s" / "valid.tsv")).size(), 10u);
  EXPECT_EQ(lines_of(slurp(dir_ / "s" / "test.tsv")).size(), 10u);
  EXPECT_EQ(lines_of(slurp(dir_ / "s" / "vocab.txt")).size(), 13u);
  const auto j = run("synth --task copy --n 20 --min-len 2 --max-len 3 --content-tokens 8 --format jsonl --output-dir " +
                     (dir_ / "j").string());
  ASSERT_EQ(j.code, 0) << j.err;
  const auto first = nlohmann::json::parse(lines_of(slurp(dir_ / "j" / "train.jsonl")).at(0));
  EXPECT_EQ(first["source"], first["target"]);
}

TEST_F(Cli, UnknownConfigKey) {
  const auto cfg = write("bad.ini", "[train]\nfoo = 1\n");
  const auto r = run("train -c " + cfg.string());
  expect_single_line_error(r, "configuration");
  EXPECT_NE(r.err.find("foo"), std::string::npos);
  const auto s = run("train --set train.foo=2");
  expect_single_line_error(s, "configuration");
  EXPECT_NE(s.err.find("foo"), std::string::npos);
}

TEST_F(Cli, UsageErrors) {
  const auto r = run("generate --input x");
  EXPECT_EQ(r.code, 2);
  expect_single_line_error(r, "usage");
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, TrainGenerateEval) {
  const auto cfg = write("run.ini", train_config("run"));
  const auto t = run("train -c " + cfg.string());
  ASSERT_EQ(t.code, 0) << t.err;
  const fs::path run_dir = dir_ / "run";
  for (const char* f : {"checkpoint.bin", "config.ini", "vocab.txt", "metrics.log", "train.tsv", "test.tsv"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }

  // Loss goes down.
  const auto log = lines_of(slurp(run_dir / "metrics.log"));
  ASSERT_EQ(log.size(), 6u);
  double first_loss = 0, last_loss = 0;
  int step = 0;
  std::istringstream(log.front()) >> step >> first_loss;
  std::istringstream(log.back()) >> step >> last_loss;
  EXPECT_EQ(step, 300);
  EXPECT_LT(last_loss, first_loss);

  // The echoed config re-parses and names the resolved vocabulary size.
  const auto echo = slurp(run_dir / "config.ini");
  EXPECT_NE(echo.find("vocab_size = 69"), std::string::npos);
  EXPECT_NE(echo.find("target_len = 12"), std::string::npos);

  const std::string ckpt = (run_dir / "checkpoint.bin").string();
  const std::string test = (run_dir / "test.tsv").string();
  for (int steps : {10, 1000}) {
    const std::string out = (dir_ / ("pred" + std::to_string(steps) + ".jsonl")).string();
    const auto g = run("generate --checkpoint " + ckpt + " --input " + test + " --steps " + std::to_string(steps) +
                       " --output " + out);
    ASSERT_EQ(g.code, 0) << g.err;
    const auto recs = lines_of(slurp(out));
    ASSERT_EQ(recs.size(), 50u);
    const auto j = nlohmann::json::parse(recs[0]);
    for (const char* k : {"source", "prediction", "steps", "seed", "wall_ms"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["steps"], steps);
    EXPECT_EQ(j["seed"], 3);

    const std::string rep = (dir_ / "report.json").string();
    const auto e = run("eval --predictions " + out + " --references " + test + " --output " + rep);
    ASSERT_EQ(e.code, 0) << e.err;
    const auto report = nlohmann::json::parse(slurp(rep));
    for (const char* k : {"bleu", "rouge_l", "dist_1", "dist_4", "exact_match"}) {
      EXPECT_TRUE(report["metrics"].contains(k)) << k;
    }
    EXPECT_EQ(report["count"], 50);
  }

  // Same seed, same predictions.
  const std::string again = (dir_ / "again.jsonl").string();
  ASSERT_EQ(run("generate --checkpoint " + ckpt + " --input " + test + " --steps 10 --output " + again).code, 0);
  auto preds = [](const std::string& path) {
    std::vector<std::string> p;
    for (const auto& l : lines_of(slurp(path))) p.push_back(nlohmann::json::parse(l)["prediction"]);
    return p;
  };
  EXPECT_EQ(preds(again), preds((dir_ / "pred10.jsonl").string()));

  // Block mode runs end to end.
  const auto b = run("generate --checkpoint " + ckpt + " --input " + test +
                     " --steps 5 --mode block --block-size 25 --output -");
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(lines_of(b.out).size(), 50u);

  // Empty input gives an empty output file.
  const auto empty_in = write("empty.txt", "");
  const std::string empty_out = (dir_ / "empty_out.jsonl").string();
  const auto eg = run("generate --checkpoint " + ckpt + " --input " + empty_in.string() + " --output " + empty_out);
  EXPECT_EQ(eg.code, 0) << eg.err;
  EXPECT_TRUE(fs::exists(empty_out));
  EXPECT_EQ(slurp(empty_out), "");

  // A vocabulary that does not match the checkpoint.
  const auto small_vocab = write("small_vocab.txt", "<pad>\n<bos>\n<eos>\n<sep>\n<unk>\na\n");
  const auto vm = run("generate --checkpoint " + ckpt + " --input " + test + " --vocab " + small_vocab.string());
  expect_single_line_error(vm, "compatibility");

  // Corrupt checkpoint.
  const auto junk = write("junk.bin", "nope");
  expect_single_line_error(run("generate --checkpoint " + junk.string() + " --input " + test), "compatibility");
}

TEST_F(Cli, TrainIsDeterministicAndResumable) {
  const auto a = write("a.ini", train_config("a", 40));
  ASSERT_EQ(run("train -c " + a.string()).code, 0);
  const std::string first = slurp(dir_ / "a" / "checkpoint.bin");
  ASSERT_EQ(run("train -c " + a.string()).code, 0);
  EXPECT_EQ(first, slurp(dir_ / "a" / "checkpoint.bin"));

  // Resuming from the step-20 checkpoint reproduces the straight run.
  const auto c = write("c.ini", train_config("c", 40) + "[train]\ncheckpoint_every = 20\n");
  ASSERT_EQ(run("train -c " + c.string()).code, 0);
  ASSERT_TRUE(fs::exists(dir_ / "c" / "checkpoint_step20.bin"));
  fs::remove(dir_ / "c" / "checkpoint.bin");
  const auto r = run("train --resume " + (dir_ / "c" / "checkpoint_step20.bin").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto straight = simplexdiff::read_checkpoint<float>((dir_ / "a" / "checkpoint.bin").string());
  const auto resumed = simplexdiff::read_checkpoint<float>((dir_ / "c" / "checkpoint.bin").string());
  ASSERT_EQ(straight.tensors.size(), resumed.tensors.size());
  for (std::size_t i = 0; i < straight.tensors.size(); ++i) {
    EXPECT_EQ(straight.tensors[i].first, resumed.tensors[i].first);
    EXPECT_EQ(straight.tensors[i].second.values, resumed.tensors[i].second.values) << straight.tensors[i].first;
  }
}

TEST_F(Cli, EvalMetrics) {
  const auto refs = write("refs.txt", "a b c\nd e f\n");
  const auto r = run("eval --predictions " + refs.string() + " --references " + refs.string() + " --output " +
                     (dir_ / "rep.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir_ / "rep.json"));
  EXPECT_DOUBLE_EQ(j["metrics"]["bleu"].get<double>(), 100.0);
  EXPECT_DOUBLE_EQ(j["metrics"]["rouge_l"].get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j["metrics"]["exact_match"].get<double>(), 1.0);
  EXPECT_NE(r.out.find("bleu"), std::string::npos);

  const auto p = write("labels_pred.txt", "odd\neven\neven\nodd\n");
  const auto l = write("labels_ref.tsv", "x\todd\ny\teven\nz\todd\nw\todd\n");
  const auto c = run("eval --task classification --predictions " + p.string() + " --references " + l.string() +
                     " --output " + (dir_ / "cls.json").string());
  ASSERT_EQ(c.code, 0) << c.err;
  const auto cj = nlohmann::json::parse(slurp(dir_ / "cls.json"));
  EXPECT_DOUBLE_EQ(cj["metrics"]["accuracy"].get<double>(), 0.75);

  const auto short_refs = write("short.txt", "a b c\n");
  const auto m = run("eval --predictions " + refs.string() + " --references " + short_refs.string());
  expect_single_line_error(m, "alignment");
  EXPECT_NE(m.err.find("2"), std::string::npos);
  EXPECT_NE(m.err.find("1"), std::string::npos);
}

TEST_F(Cli, BenchGrid) {
  const std::string csv = (dir_ / "bench.csv").string();
  const auto r = run("bench --set model.layers=1 --set model.d_model=16 --set model.d_ff=32 --set model.heads=2 "
                     "--lengths 4,8 --steps 2,3 --modes full_nar,block --trials 5 --block-size 4 --context 6 "
                     "--output " + csv);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(slurp(csv));
  ASSERT_EQ(rows.size(), 1u + 2 * 2 * 2);
  EXPECT_EQ(rows[0], "mode,target_len,num_steps,trials,mean_ms,std_ms");
  std::set<std::string> modes;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::vector<std::string> cells;
    std::stringstream ss(rows[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    ASSERT_EQ(cells.size(), 6u);
    EXPECT_EQ(cells[3], "5");
    modes.insert(cells[0]);
  }
  EXPECT_EQ(modes, (std::set<std::string>{"block", "full_nar"}));

  expect_single_line_error(run("bench --trials 2 --lengths 4 --steps 2 --output " + csv), "configuration");
}
