#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(CPCONV_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string l;
  while (std::getline(is, l)) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& row) {
  std::vector<std::string> out;
  std::istringstream is(row);
  std::string f;
  while (std::getline(is, f, ',')) out.push_back(f);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path root() {
    static const fs::path r = [] {
      auto p = fs::temp_directory_path() / "cpconv_test_cli";
      fs::remove_all(p);
      fs::create_directories(p);
      return p;
    }();
    return r;
  }
  static std::string at(const std::string& name) { return (root() / name).string(); }

  // Dataset and trained toy model shared by the pipeline tests.
  static void ensure_model() {
    if (fs::exists(root() / "model" / "network.json")) return;
    ASSERT_EQ(run("gen-data --classes 3 --per-class 20 --seed 1 --out " + at("data")).code, 0);
    ASSERT_EQ(run("gen-data --classes 3 --per-class 10 --seed 2 --out " + at("eval")).code, 0);
    ASSERT_EQ(run("train-toy --data " + at("data") + " --epochs 3 --seed 5 --out " + at("model")).code, 0);
  }
};

}  // namespace

TEST_F(Cli, ComplexityReport) {
  const auto r = run("complexity --d 9 --s 48 --t 128 --rank 64");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("original  497664"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("cp        12416"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("ratio 40.08"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("jaderberg 101376"), std::string::npos) << r.out;
}

TEST_F(Cli, AppendixCheckPrintsBothErrorsAndExitCodeFollowsBounds) {
  const auto r = run("appendix-check");
  std::smatch m;
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex(R"(greedy R=2 rel_error ([0-9.eE+-]+))"))) << r.out;
  const double greedy = std::stod(m[1]);
  ASSERT_TRUE(std::regex_search(r.out, m, std::regex(R"(nls +R=2 rel_error ([0-9.eE+-]+))"))) << r.out;
  const double nls = std::stod(m[1]);
  const bool ok = greedy >= 0.33 && greedy <= 0.37 && nls <= 1e-6;
  EXPECT_EQ(r.code, ok ? 0 : 3) << r.out;
  EXPECT_LE(nls, 1e-6);
}

TEST_F(Cli, AppendixCheckSucceeds) {
  const auto r = run("appendix-check");
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("complexity --d 9 --s 48").code, 1);
  EXPECT_EQ(run("complexity --d 0 --s 1 --t 1 --rank 1").code, 1);
  EXPECT_EQ(run("decompose --model x --layer y --rank 2 --method svd --out z").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data --classes 2 --per-class 3 --seed 7 --out " + at("g1")).code, 0);
  ASSERT_EQ(run("gen-data --classes 2 --per-class 3 --seed 7 --out " + at("g2")).code, 0);
  EXPECT_EQ(slurp(root() / "g1" / "images.cpt"), slurp(root() / "g2" / "images.cpt"));
  EXPECT_EQ(slurp(root() / "g1" / "labels.csv"), slurp(root() / "g2" / "labels.csv"));
  EXPECT_EQ(lines(slurp(root() / "g1" / "labels.csv")).front(), "index,label");
}

TEST_F(Cli, DecomposeUnknownLayerWritesNothing) {
  ensure_model();
  const auto r = run("decompose --model " + at("model") + " --layer nope --rank 2 --out " + at("bad_out"));
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(lines(r.out).size(), 1u) << r.out;
  EXPECT_FALSE(fs::exists(root() / "bad_out"));
  EXPECT_NE(run("decompose --model " + at("missing_model") + " --layer conv1 --rank 2 --out " + at("bad_out")).code, 0);
  EXPECT_FALSE(fs::exists(root() / "bad_out"));
}

TEST_F(Cli, PipelineEndToEnd) {
  ensure_model();
  auto r = run("decompose --model " + at("model") + " --layer conv1 --rank 3 --method nls --seed 4 --out " + at("f"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("rel_error"), std::string::npos);
  for (int m = 0; m < 4; ++m) EXPECT_TRUE(fs::exists(root() / "f" / ("factor" + std::to_string(m) + ".cpt")));
  const auto manifest = slurp(root() / "f" / "manifest.txt");
  EXPECT_NE(manifest.find("rank = 3"), std::string::npos);
  EXPECT_NE(manifest.find("modes = 5 5 1 12"), std::string::npos) << manifest;

  r = run("rewrite --model " + at("model") + " --layer conv1 --factors " + at("f") + " --out " + at("m2"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto net_json = slurp(root() / "m2" / "network.json");
  for (const char* s : {"conv1.cp_s", "conv1.cp_x", "conv1.cp_y", "conv1.cp_t"}) EXPECT_NE(net_json.find(s), std::string::npos);

  r = run("finetune --model " + at("m2") + " --data " + at("data") + " --eval-data " + at("eval") +
          " --epochs 1 --lr 0.001 --momentum 0.9 --freeze-inserted --clip 5 --out " + at("m3"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto hist = lines(slurp(root() / "m3" / "history.csv"));
  ASSERT_EQ(hist.size(), 2u);
  EXPECT_EQ(hist[0], "epoch,loss,train_acc,eval_acc");
  EXPECT_EQ(slurp(root() / "m3" / "conv1.cp_s.kernel.cpt"), slurp(root() / "m2" / "conv1.cp_s.kernel.cpt"));

  r = run("bench --model " + at("m3") + " --layer conv2 --ranks 1,2 --methods nls,greedy --data " + at("data") +
          " --ft-epochs 1 --iters 3 --out " + at("report.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = lines(slurp(root() / "report.csv"));
  ASSERT_EQ(csv.size(), 5u);
  EXPECT_EQ(fields(csv[0]).size(), 17u);
  for (std::size_t i = 1; i < csv.size(); ++i) EXPECT_EQ(fields(csv[i]).back(), "ok") << csv[i];
}

TEST_F(Cli, RerunsWithSameSeedAreIdentical) {
  ensure_model();
  for (const char* out : {"d1", "d2"})
    ASSERT_EQ(run("decompose --model " + at("model") + " --layer conv1 --rank 2 --seed 11 --out " + at(out)).code, 0);
  for (int m = 0; m < 4; ++m) {
    const std::string f = "factor" + std::to_string(m) + ".cpt";
    EXPECT_EQ(slurp(root() / "d1" / f), slurp(root() / "d2" / f));
  }
  for (const char* out : {"t1", "t2"})
    ASSERT_EQ(run("finetune --model " + at("model") + " --data " + at("data") +
                  " --epochs 1 --lr 0.01 --momentum 0.9 --seed 3 --out " + at(out))
                  .code,
              0);
  for (const char* f : {"conv1.kernel.cpt", "conv1.bias.cpt", "conv2.kernel.cpt", "history.csv"})
    EXPECT_EQ(slurp(root() / "t1" / f), slurp(root() / "t2" / f)) << f;

  for (const char* out : {"b1.csv", "b2.csv"})
    ASSERT_EQ(run("bench --model " + at("model") + " --layer conv1 --ranks 1,2 --methods greedy,als --data " +
                  at("data") + " --ft-epochs 1 --iters 3 --seed 2 --out " + at(out))
                  .code,
              0);
  const auto a = lines(slurp(root() / "b1.csv")), b = lines(slurp(root() / "b2.csv"));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto fa = fields(a[i]), fb = fields(b[i]);
    ASSERT_EQ(fa.size(), fb.size());
    for (std::size_t c = 0; c < fa.size(); ++c)
      if (c < 9 || c > 11) EXPECT_EQ(fa[c], fb[c]) << "row " << i << " column " << c;
  }
}

TEST_F(Cli, SolverFailureExitCode) {
  ensure_model();
  // A kernel full of NaN makes every restart non-finite.
  fs::copy(root() / "model", root() / "nan_model", fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  {
    std::fstream f(root() / "nan_model" / "conv1.kernel.cpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0, std::ios::end);
    const auto size = static_cast<std::size_t>(f.tellp());
    const std::size_t header = 4 + 1 + 1 + 4 * 8;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t off = header; off + 8 <= size; off += 8) {
      f.seekp(static_cast<std::streamoff>(off));
      f.write(reinterpret_cast<const char*>(&nan), 8);
    }
  }
  const auto r = run("decompose --model " + at("nan_model") + " --layer conv1 --rank 2 --out " + at("nan_out"));
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(root() / "nan_out"));
}
