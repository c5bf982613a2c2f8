// Command-line entry points: fit, normals, recon, eval, synth, bench.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ngf/ngf.hpp"

namespace fs = std::filesystem;
using namespace ngf;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return 1;
    case ErrorKind::Data: return 2;
    case ErrorKind::Numerical: return 3;
  }
  return 2;
}

TrainConfig config_from(const std::string& path, std::optional<std::uint64_t> seed) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

std::string log_path_for(const std::string& model_path) {
  return fs::path(model_path).replace_extension(".log.csv").string();
}

// ---------------------------------------------------------------------------------------

struct FitArgs {
  std::string input, out, config;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int run_fit(const FitArgs& a) {
  const TrainConfig cfg = config_from(a.config, a.seed);
  const PointCloud cloud = normalize(read_xyz(a.input));
  TrainOutputs outputs{a.out, log_path_for(a.out), {}};
  if (!a.quiet) {
    outputs.on_iteration = [&](Index iter, const IterationLog& log) {
      if ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations) {
        std::fprintf(stderr, "iter %lld/%lld  total %.6g  lr %.3g\n", static_cast<long long>(iter + 1),
                     static_cast<long long>(cfg.iterations), log.loss.total, log.lr);
      }
    };
  }
  const auto [net, report] = fit(cloud, cfg, outputs);
  if (!a.quiet) {
    std::fprintf(stderr, "wrote %s and %s (%.1f s)\n", a.out.c_str(), outputs.log_path.c_str(), report.seconds);
  }
  return 0;
}

struct NormalsArgs {
  std::string model, input, out;
};

int run_normals(const NormalsArgs& a) {
  const Model model = load_model(a.model);
  // The stored transform maps input units to the frame the model was trained in.
  PointCloud cloud;
  cloud.points = model.transform.to_model(read_xyz(a.input));
  cloud.transform = model.transform;
  const NormalField nf = estimate_normals(model.net, cloud);
  if (!nf.defects.empty()) {
    std::fprintf(stderr, "%zu point(s) had a vanished gradient; copied nearest valid normal\n",
                 nf.defects.size());
  }
  write_normals(a.out, nf.normals);
  return 0;
}

struct ReconArgs {
  std::string model, out;
  Index res = 128;
  double extent = 1.1;
};

int run_recon(const ReconArgs& a) {
  if (a.res < 8) throw usage_error("--res must be at least 8");
  if (!(a.extent > 0.0)) throw usage_error("--extent must be positive");
  const Model model = load_model(a.model);
  const GridBounds bounds{Vec3::Constant(-a.extent), Vec3::Constant(a.extent)};
  const TriangleMesh mesh = marching_cubes(model.net, a.res, bounds, model.transform);
  write_ply(a.out, mesh);
  std::fprintf(stderr, "%lld vertices, %zu triangles\n", static_cast<long long>(mesh.vertices.rows()),
               mesh.triangles.size());
  return 0;
}

struct EvalArgs {
  std::string pred, gt, pidx, out;
  bool oriented = false;
};

int run_eval(const EvalArgs& a) {
  const PointMatrix pred = read_normals(a.pred);
  const PointMatrix gt = read_normals(a.gt);
  std::optional<std::vector<Index>> subset;
  if (!a.pidx.empty()) subset = read_pidx(a.pidx);
  const AngleStats stats = angle_errors(pred, gt, a.oriented, subset);
  write_pgp_csv(a.out, stats);
  std::printf("rmse_deg %.6f\nn %zu\n", stats.rmse, stats.angles.size());
  return 0;
}

struct SynthArgs {
  std::string shape = "sphere", out, gt;
  Index n = 5000;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  if (a.n < 1) throw usage_error("--n must be at least 1");
  const PointCloud cloud = synth_shape(a.shape, a.n, a.noise, a.seed);
  write_xyz(a.out, cloud.points);
  if (!a.gt.empty()) write_normals(a.gt, *cloud.gt_normals);
  return 0;
}

// ---------------------------------------------------------------------------------------
// Benchmark over a directory in the PCPNet layout.

const std::map<std::string, std::string>& list_categories() {
  static const std::map<std::string, std::string> m = {
      {"testset_no_noise.txt", "none"},
      {"testset_low_noise.txt", "0.12%"},
      {"testset_med_noise.txt", "0.6%"},
      {"testset_high_noise.txt", "1.2%"},
      {"testset_vardensity_striped.txt", "stripe"},
      {"testset_vardensity_gradient.txt", "gradient"},
  };
  return m;
}

struct BenchArgs {
  std::string data, config, out, work;
  bool unoriented = false;
  int jobs = 1;
};

struct BenchJob {
  std::string shape, category;
  std::optional<double> rmse;
  std::string error;
};

void run_bench_job(BenchJob& job, const BenchArgs& a, const TrainConfig& cfg, const fs::path& work) {
  const fs::path dir(a.data);
  const fs::path xyz = dir / (job.shape + ".xyz");
  const fs::path normals = dir / (job.shape + ".normals");
  const fs::path pidx = dir / (job.shape + ".pidx");
  for (const fs::path& p : {xyz, normals}) {
    if (!fs::exists(p)) {
      job.error = "missing " + p.string();
      return;
    }
  }
  try {
    const PointCloud cloud = normalize(read_xyz(xyz.string()), read_normals(normals.string()));
    const std::string model_path = (work / (job.shape + ".ngf")).string();
    const auto [net, report] = fit(cloud, cfg, TrainOutputs{model_path, log_path_for(model_path), {}});
    const NormalField nf = estimate_normals(net, cloud);
    write_normals((work / (job.shape + ".pred.normals")).string(), nf.normals);
    std::optional<std::vector<Index>> subset;
    if (fs::exists(pidx)) subset = read_pidx(pidx.string());
    job.rmse = angle_errors(nf.normals, *cloud.gt_normals, !a.unoriented, subset).rmse;
  } catch (const std::exception& e) {
    job.error = e.what();
  }
}

int run_bench(const BenchArgs& a) {
  if (a.jobs < 1) throw usage_error("--jobs must be at least 1");
  const TrainConfig cfg = config_from(a.config, std::nullopt);
  if (!fs::is_directory(a.data)) throw data_error("not a directory: '" + a.data + "'");

  std::vector<BenchJob> jobs;
  for (const auto& [file, category] : list_categories()) {
    const fs::path list = fs::path(a.data) / file;
    if (!fs::exists(list)) continue;
    std::ifstream in(list);
    std::string line;
    while (std::getline(in, line)) {
      line.erase(std::remove_if(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }),
                 line.end());
      if (!line.empty()) jobs.push_back({line, category, std::nullopt, {}});
    }
  }
  if (jobs.empty()) throw data_error("no shapes listed under '" + a.data + "' (expected testset_*.txt lists)");

  const fs::path work = a.work.empty() ? fs::path(a.out).parent_path() / "bench_work" : fs::path(a.work);
  fs::create_directories(work);

  std::atomic<std::size_t> next{0};
  std::mutex print;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      run_bench_job(jobs[i], a, cfg, work);
      const std::lock_guard lock(print);
      if (jobs[i].rmse) {
        std::fprintf(stderr, "%s [%s] rmse %.2f\n", jobs[i].shape.c_str(), jobs[i].category.c_str(), *jobs[i].rmse);
      } else {
        std::fprintf(stderr, "skipped %s: %s\n", jobs[i].shape.c_str(), jobs[i].error.c_str());
      }
    }
  };
  std::vector<std::thread> threads;
  for (int t = 1; t < std::min<int>(a.jobs, static_cast<int>(jobs.size())); ++t) threads.emplace_back(worker);
  worker();
  for (std::thread& t : threads) t.join();

  std::vector<ShapeResult> results;
  std::size_t skipped = 0;
  for (const BenchJob& j : jobs) {
    if (j.rmse) results.push_back({j.shape, j.category, *j.rmse});
    else ++skipped;
  }

  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw data_error("cannot write '" + a.out + "'");
  out << "shape,category,rmse\n";
  char buf[64];
  for (const ShapeResult& r : results) {
    std::snprintf(buf, sizeof buf, "%.2f", r.rmse);
    out << r.name << ',' << r.category << ',' << buf << '\n';
  }
  if (!results.empty()) {
    const BenchmarkTable table = aggregate_benchmark(results);
    std::snprintf(buf, sizeof buf, "%.2f", table.average);
    out << "average,," << buf << '\n';

    // One row in the published column order; categories without shapes stay empty.
    const fs::path summary = fs::path(a.out).replace_extension(".summary.csv");
    std::ofstream sum(summary, std::ios::trunc);
    if (!sum) throw data_error("cannot write '" + summary.string() + "'");
    for (const std::string& c : benchmark_categories()) sum << c << ',';
    sum << "average\n";
    for (const std::string& c : benchmark_categories()) {
      if (auto it = table.category_mean.find(c); it != table.category_mean.end()) {
        std::snprintf(buf, sizeof buf, "%.2f", it->second);
        sum << buf;
      }
      sum << ',';
    }
    std::snprintf(buf, sizeof buf, "%.2f", table.average);
    sum << buf << '\n';
  }
  if (skipped > 0) {
    std::fprintf(stderr, "%zu shape(s) skipped\n", skipped);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural gradient field: learn a signed-distance-like field from a raw point cloud "
               "and read oriented normals from its gradient."};
  app.require_subcommand(1, 1);

  FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit", "Train a field on one point cloud");
  fit_cmd->add_option("--input", fit_args.input, "Point cloud (.xyz)")->required();
  fit_cmd->add_option("--out", fit_args.out, "Model file to write; the loss log goes beside it (.log.csv)")
      ->required();
  fit_cmd->add_option("--config", fit_args.config, "key = value training config (defaults if omitted)");
  fit_cmd->add_option("--seed", fit_args.seed, "Overrides the config seed");
  fit_cmd->add_flag("--quiet", fit_args.quiet, "No progress output");

  NormalsArgs normals_args;
  auto* normals_cmd = app.add_subcommand("normals", "Oriented normals from a trained model");
  normals_cmd->add_option("--model", normals_args.model, "Model file")->required();
  normals_cmd->add_option("--input", normals_args.input,
                          "Point cloud in the same input frame the model was trained on")
      ->required();
  normals_cmd->add_option("--out", normals_args.out, "Normals file to write, one per input line")->required();

  ReconArgs recon_args;
  auto* recon_cmd = app.add_subcommand("recon", "Mesh the zero level set with marching cubes");
  recon_cmd->add_option("--model", recon_args.model, "Model file")->required();
  recon_cmd->add_option("--res", recon_args.res, "Grid cells per axis (>= 8)")->capture_default_str();
  recon_cmd->add_option("--extent", recon_args.extent, "Grid half-width in the normalized frame")
      ->capture_default_str();
  recon_cmd->add_option("--out", recon_args.out, "ASCII PLY to write")->required();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Angle RMSE and PGP curve against reference normals");
  eval_cmd->add_option("--pred", eval_args.pred, "Predicted normals")->required();
  eval_cmd->add_option("--gt", eval_args.gt, "Reference normals")->required();
  eval_cmd->add_flag("--oriented", eval_args.oriented, "Count sign flips as errors");
  eval_cmd->add_option("--pidx", eval_args.pidx, "Evaluate only these point indices");
  eval_cmd->add_option("--out", eval_args.out, "PGP CSV (threshold_deg,fraction)")->required();

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Sample an analytic test shape");
  synth_cmd->add_option("--shape", synth_args.shape, "sphere | torus | cube | plane")->capture_default_str();
  synth_cmd->add_option("--n", synth_args.n, "Point count")->capture_default_str();
  synth_cmd->add_option("--noise", synth_args.noise, "Gaussian noise sigma")->capture_default_str();
  synth_cmd->add_option("--seed", synth_args.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--out", synth_args.out, "Point cloud (.xyz) to write")->required();
  synth_cmd->add_option("--gt", synth_args.gt, "Also write the exact outward normals");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Fit, estimate and score every listed shape of a dataset");
  bench_cmd->add_option("--data", bench_args.data, "Directory with testset_*.txt lists and shape files")
      ->required();
  bench_cmd->add_option("--config", bench_args.config, "Training config (defaults if omitted)");
  bench_cmd->add_option("--out", bench_args.out, "Per-shape table CSV; a .summary.csv goes beside it")
      ->required();
  bench_cmd->add_option("--work", bench_args.work, "Directory for per-shape models and normals");
  bench_cmd->add_option("--jobs", bench_args.jobs, "Shapes fitted in parallel")->capture_default_str();
  bench_cmd->add_flag("--unoriented", bench_args.unoriented, "Score normals up to sign");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*fit_cmd) return run_fit(fit_args);
    if (*normals_cmd) return run_normals(normals_args);
    if (*recon_cmd) return run_recon(recon_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*synth_cmd) return run_synth(synth_args);
    if (*bench_cmd) return run_bench(bench_args);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
