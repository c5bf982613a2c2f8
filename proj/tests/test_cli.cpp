#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ngf/ngf.hpp"

namespace fs = std::filesystem;
using namespace ngf;

namespace {

struct Result {
  int code;
  std::string output;  // stdout and stderr
};

Result cli(const std::string& args) {
  const fs::path log = fs::path(::testing::TempDir()) / "cli_output.txt";
  const std::string cmd = std::string(NGF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::path(::testing::TempDir()) /
           ("ngf_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "small.cfg") << "iterations = 20\nlr = 1e-3\nn_query = 100\nn_surface = 50\n"
                                         "width = 16\nlayers = 4\ncheckpoint_every = 10\n";
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void synth(const std::string& name, const std::string& shape, int n, double noise = 0.0) {
    const Result r = cli("synth --shape " + shape + " --n " + std::to_string(n) + " --noise " +
                         std::to_string(noise) + " --seed 7 --out " + path(name + ".xyz") + " --gt " +
                         path(name + ".normals"));
    ASSERT_EQ(r.code, 0) << r.output;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpExitsZeroForEverySubcommand) {
  for (const char* sub : {"fit", "normals", "recon", "eval", "synth", "bench"}) {
    const Result r = cli(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.output.find("--"), std::string::npos) << sub;
  }
  EXPECT_EQ(cli("--help").code, 0);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("frobnicate").code, 1);
  EXPECT_EQ(cli("synth --out " + path("a.xyz") + " --bogus 3").code, 1);
  EXPECT_EQ(cli("synth --shape teapot --out " + path("a.xyz")).code, 1);
  std::ofstream(path("bad.cfg")) << "nonsense = 1\n";
  synth("s", "sphere", 200);
  EXPECT_EQ(cli("fit --input " + path("s.xyz") + " --out " + path("m.ngf") + " --config " + path("bad.cfg")).code, 1);
}

TEST_F(Cli, SynthIsDeterministic) {
  synth("a", "torus", 300, 0.01);
  const std::string first = slurp(path("a.xyz"));
  synth("a", "torus", 300, 0.01);
  EXPECT_EQ(slurp(path("a.xyz")), first);
  EXPECT_EQ(read_xyz(path("a.xyz")).rows(), 300);
  EXPECT_EQ(read_normals(path("a.normals")).rows(), 300);
}

TEST_F(Cli, FitWritesModelAndLogDeterministically) {
  synth("s", "sphere", 300);
  const std::string args = "fit --quiet --input " + path("s.xyz") + " --config " + path("small.cfg") + " --seed 3 --out ";
  ASSERT_EQ(cli(args + path("a.ngf")).code, 0);
  ASSERT_EQ(cli(args + path("b.ngf")).code, 0);
  EXPECT_EQ(slurp(path("a.ngf")).substr(0, 4), "NGF1");
  EXPECT_EQ(slurp(path("a.ngf")), slurp(path("b.ngf")));
  EXPECT_EQ(slurp(path("a.log.csv")), slurp(path("b.log.csv")));
  EXPECT_EQ(slurp(path("a.log.csv")).substr(0, 36), "iter,l_v,l_con,l_d,l_reg,total,lr\n1,");
  ASSERT_EQ(cli(args.substr(0, args.find("--seed")) + "--seed 4 --out " + path("c.ngf")).code, 0);
  EXPECT_NE(slurp(path("a.ngf")), slurp(path("c.ngf")));
}

TEST_F(Cli, FitMissingInputNamesThePath) {
  const Result r = cli("fit --input " + path("nope.xyz") + " --out " + path("m.ngf"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find(path("nope.xyz")), std::string::npos);
}

TEST_F(Cli, NormalsReconEvalPipeline) {
  synth("s", "sphere", 400);
  ASSERT_EQ(cli("fit --quiet --input " + path("s.xyz") + " --config " + path("small.cfg") + " --out " + path("m.ngf")).code, 0);

  ASSERT_EQ(cli("normals --model " + path("m.ngf") + " --input " + path("s.xyz") + " --out " + path("p.normals")).code, 0);
  const PointMatrix n = read_normals(path("p.normals"));
  ASSERT_EQ(n.rows(), 400);
  for (Index i = 0; i < n.rows(); ++i) EXPECT_NEAR(n.row(i).norm(), 1.0, 1e-8);

  ASSERT_EQ(cli("recon --model " + path("m.ngf") + " --res 16 --out " + path("m.ply")).code, 0);
  const TriangleMesh mesh = read_ply(path("m.ply"));
  EXPECT_GT(mesh.triangles.size(), 0u);
  // Barely trained 16-unit net: a blob around the origin, inside the extraction box.
  const Eigen::VectorXd r = mesh.vertices.rowwise().norm();
  EXPECT_GT(r.mean(), 0.2);
  EXPECT_LT(r.maxCoeff(), std::sqrt(3.0) * 1.1 * read_xyz(path("s.xyz")).rowwise().norm().maxCoeff());
  EXPECT_EQ(cli("recon --model " + path("m.ngf") + " --res 4 --out " + path("x.ply")).code, 1);

  std::ofstream(path("sub.pidx")) << "0\n5\n9\n";
  const Result e = cli("eval --pred " + path("p.normals") + " --gt " + path("s.normals") + " --oriented --pidx " +
                       path("sub.pidx") + " --out " + path("stats.csv"));
  ASSERT_EQ(e.code, 0) << e.output;
  EXPECT_NE(e.output.find("rmse_deg"), std::string::npos);
  EXPECT_NE(e.output.find("n 3"), std::string::npos);
  EXPECT_EQ(slurp(path("stats.csv")).substr(0, 23), "threshold_deg,fraction\n");
}

TEST_F(Cli, CorruptModelIsDataError) {
  synth("s", "sphere", 50);
  std::ofstream(path("bad.ngf")) << "XXXXjunk";
  EXPECT_EQ(cli("normals --model " + path("bad.ngf") + " --input " + path("s.xyz") + " --out " + path("p.normals")).code, 2);
  EXPECT_EQ(cli("recon --model " + path("bad.ngf") + " --out " + path("p.ply")).code, 2);
}

TEST_F(Cli, EvalCountMismatch) {
  synth("a", "sphere", 20);
  synth("b", "sphere", 21);
  EXPECT_EQ(cli("eval --pred " + path("a.normals") + " --gt " + path("b.normals") + " --out " + path("o.csv")).code, 2);
}

TEST_F(Cli, BenchTwoShapes) {
  const fs::path data = dir_ / "data";
  fs::create_directories(data);
  for (const char* shape : {"ball", "ring"}) {
    const Result r = cli(std::string("synth --shape ") + (shape[0] == 'b' ? "sphere" : "torus") +
                         " --n 300 --seed 1 --out " + (data / (std::string(shape) + ".xyz")).string() + " --gt " +
                         (data / (std::string(shape) + ".normals")).string());
    ASSERT_EQ(r.code, 0);
  }
  std::ofstream(data / "testset_no_noise.txt") << "ball\n";
  std::ofstream(data / "testset_high_noise.txt") << "ring\n";
  const Result r = cli("bench --data " + data.string() + " --config " + path("small.cfg") + " --jobs 2 --out " +
                       path("table.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(path("table.csv"));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "shape,category,rmse");
  EXPECT_EQ(lines[3].substr(0, 9), "average,,");
  std::ifstream sum(path("table.summary.csv"));
  std::string header;
  std::getline(sum, header);
  EXPECT_EQ(header, "none,0.12%,0.6%,1.2%,stripe,gradient,average");

  // Identical flags reproduce the table byte for byte.
  const std::string first = slurp(path("table.csv"));
  ASSERT_EQ(cli("bench --data " + data.string() + " --config " + path("small.cfg") + " --out " + path("table.csv")).code, 0);
  EXPECT_EQ(slurp(path("table.csv")), first);

  std::ofstream(data / "testset_med_noise.txt") << "ghost\n";
  const Result missing = cli("bench --data " + data.string() + " --config " + path("small.cfg") + " --out " + path("t2.csv"));
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.output.find("ghost"), std::string::npos);
}

TEST_F(Cli, BenchEmptyListFails) {
  const fs::path data = dir_ / "empty";
  fs::create_directories(data);
  std::ofstream(data / "testset_no_noise.txt") << "\n";
  EXPECT_NE(cli("bench --data " + data.string() + " --out " + path("t.csv")).code, 0);
}
