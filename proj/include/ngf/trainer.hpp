#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ngf/errors.hpp"
#include "ngf/field.hpp"
#include "ngf/geometry.hpp"
#include "ngf/losses.hpp"
#include "ngf/sampling.hpp"

namespace ngf {

struct TrainConfig {
  Index iterations = 10000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  SamplerConfig sampler;
  LossConfig loss;
  ScaleSet scales;
  Index checkpoint_every = 1000;
  Architecture arch;
  double init_radius = 0.5;
  /// Batch rows per tape; bounds memory, does not change the result's mathematics.
  Index chunk_rows = 4096;

  void validate() const {
    if (iterations < 1) throw usage_error("iterations must be at least 1");
    if (!(lr > 0.0)) throw usage_error("lr must be positive");
    if (checkpoint_every < 1) throw usage_error("checkpoint_every must be at least 1");
    if (chunk_rows < 1) throw usage_error("chunk_rows must be at least 1");
    loss.validate();
    scales.validate();
  }

  /// Learning rate for a 0-based iteration: halved at 50% and again at 75% of the run.
  double lr_at(Index iter) const {
    double rate = lr;
    if (2 * iter >= iterations) rate *= 0.5;
    if (4 * iter >= 3 * iterations) rate *= 0.5;
    return rate;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T value{};
  if (!(in >> value) || !(in >> std::ws).eof()) {
    throw usage_error("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "iterations") cfg.iterations = parse_number<Index>(key, value);
  else if (key == "lr") cfg.lr = parse_number<double>(key, value);
  else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "n_query") cfg.sampler.n_query = parse_number<Index>(key, value);
  else if (key == "n_surface") cfg.sampler.n_surface = parse_number<Index>(key, value);
  else if (key == "ell") cfg.sampler.ell = parse_number<Index>(key, value);
  else if (key == "steps") cfg.loss.steps = parse_number<int>(key, value);
  else if (key == "rho") cfg.loss.rho = parse_number<double>(key, value);
  else if (key == "lambda1") cfg.loss.lambda1 = parse_number<double>(key, value);
  else if (key == "lambda2") cfg.loss.lambda2 = parse_number<double>(key, value);
  else if (key == "lambda3") cfg.loss.lambda3 = parse_number<double>(key, value);
  else if (key == "checkpoint_every") cfg.checkpoint_every = parse_number<Index>(key, value);
  else if (key == "scales") {
    std::vector<Index> sizes;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) sizes.push_back(parse_number<Index>(key, detail::trim(item)));
    cfg.scales.sizes = sizes;
  }
  // Extensions beyond the core keys: network size and the consistency-weight ablation.
  else if (key == "width") cfg.arch.width = parse_number<Index>(key, value);
  else if (key == "layers") {
    cfg.arch.layers = parse_number<Index>(key, value);
    cfg.arch.skip_layer = cfg.arch.layers / 2;
  } else if (key == "confidence_weight") {
    if (value == "true" || value == "1") cfg.loss.confidence_weight = true;
    else if (value == "false" || value == "0") cfg.loss.confidence_weight = false;
    else throw usage_error("config key 'confidence_weight' expects true or false");
  } else {
    throw usage_error("unknown config key '" + key + "'");
  }
}

/// `key = value` lines; `#` starts a comment.
inline TrainConfig parse_config(std::istream& in, TrainConfig cfg = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw usage_error("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_config_entry(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot open config '" + path + "'");
  return parse_config(in);
}

struct IterationLog {
  LossBreakdown loss;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<IterationLog> history;
  /// Batch rows discarded because the field gradient vanished along their move chain.
  Index dropped_rows = 0;
  double seconds = 0.0;
  std::string model_path;
};

/// Where fit() writes its products; empty paths disable the output.
struct TrainOutputs {
  std::string model_path;  // final model and periodic checkpoints
  std::string log_path;    // iter,l_v,l_con,l_d,l_reg,total,lr
  /// Called after every iteration with (0-based iteration, log entry).
  std::function<void(Index, const IterationLog&)> on_iteration;
};

inline std::string format_log_row(Index iter, const IterationLog& log) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<long long>(iter), log.loss.l_v, log.loss.l_con, log.loss.l_d,
                log.loss.l_reg, log.loss.total, log.lr);
  return buf;
}

/// Builds the tape for a batch in row chunks, returning the batch loss and its gradient.
template <TapeField F>
std::pair<LossBreakdown, Tape::Gradients> loss_and_gradient(const F& field, const QueryBatch& batch,
                                                            const LossConfig& cfg, Index chunk_rows) {
  const Index nq = batch.n_query();
  const Index total_rows = nq + batch.n_surface();
  double lv = 0.0, lcon = 0.0, ld = 0.0, lreg = 0.0;
  Tape::Gradients grads;
  for (Index begin = 0; begin < total_rows; begin += chunk_rows) {
    const Index end = std::min(total_rows, begin + chunk_rows);
    const BatchSlice slice{std::min(begin, nq), std::min(end, nq), std::max(begin, nq) - nq,
                           std::max(end, nq) - nq};
    Tape tape;
    RecordedLoss rec;
    try {
      rec = total_loss(tape, field, batch, cfg, slice);
    } catch (const GradientVanished& e) {
      // Report the row in the stacked [Q; G] layout of the whole batch.
      const auto local = static_cast<Index>(e.point());
      const Index in_q = slice.query_end - slice.query_begin;
      const Index row = local < in_q ? slice.query_begin + local : nq + slice.surface_begin + (local - in_q);
      throw GradientVanished(static_cast<std::size_t>(row), e.norm());
    }
    lv += rec.terms.l_v;
    lcon += rec.terms.l_con;
    ld += rec.terms.l_d;
    lreg += rec.terms.l_reg;
    Tape::Gradients part = tape.backward(rec.root);
    if (grads.size() < part.size()) grads.resize(part.size());
    for (std::size_t s = 0; s < part.size(); ++s) {
      if (part[s].size() == 0) continue;
      if (grads[s].size() == 0) {
        grads[s] = std::move(part[s]);
      } else {
        grads[s] += part[s];
      }
    }
  }
  return {LossBreakdown::combine(lv, lcon, ld, lreg, cfg), std::move(grads)};
}

/// loss_and_gradient that discards rows whose move chain meets a vanished gradient.
/// Dead rows carry no usable direction; the batch means are taken over the survivors.
template <TapeField F>
std::pair<LossBreakdown, Tape::Gradients> robust_loss_and_gradient(const F& field, QueryBatch& batch,
                                                                   const LossConfig& cfg, Index chunk_rows,
                                                                   Index& dropped) {
  for (;;) {
    try {
      return loss_and_gradient(field, batch, cfg, chunk_rows);
    } catch (const GradientVanished& e) {
      drop_row(batch, static_cast<Index>(e.point()));
      ++dropped;
      if (batch.n_query() == 0 || batch.n_surface() == 0) {
        throw numerical_error("field gradient vanished on every sampled point");
      }
    }
  }
}

/// Fits a field to one normalized point cloud. Deterministic for a fixed config.
inline std::pair<FieldNetwork, TrainReport> fit(const PointCloud& cloud, const TrainConfig& cfg,
                                                const TrainOutputs& outputs = {}) {
  cfg.validate();
  cfg.sampler.validate(cloud.size());
  if (cfg.scales.largest() > cloud.size()) {
    throw usage_error("largest neighborhood scale exceeds cloud size");
  }
  const auto start = std::chrono::steady_clock::now();

  FieldNetwork net = init_geometric(cfg.seed, cfg.init_radius, cfg.arch);
  const NeighborIndex index(cloud.points);
  const Eigen::VectorXd sigma = per_point_sigma(index, cfg.sampler.ell);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    0x5eedu};
  std::mt19937_64 rng(seq);
  AdamState adam;

  std::optional<std::ofstream> log;
  if (!outputs.log_path.empty()) {
    log.emplace(outputs.log_path, std::ios::trunc);
    if (!*log) throw data_error("cannot write training log '" + outputs.log_path + "'");
    *log << "iter,l_v,l_con,l_d,l_reg,total,lr\n";
  }
  auto checkpoint = [&] {
    if (!net.all_finite()) throw numerical_error("non-finite network parameters");
    if (!outputs.model_path.empty()) save_model(outputs.model_path, {net, cloud.transform});
  };

  TrainReport report;
  report.history.reserve(static_cast<std::size_t>(cfg.iterations));
  for (Index iter = 0; iter < cfg.iterations; ++iter) {
    QueryBatch batch = sample_batch(index, sigma, cfg.sampler, cfg.scales, rng);
    auto [loss, grads] = robust_loss_and_gradient(net, batch, cfg.loss, cfg.chunk_rows, report.dropped_rows);
    const IterationLog entry{loss, cfg.lr_at(iter)};
    if (log) *log << format_log_row(iter + 1, entry) << '\n';
    if (!std::isfinite(loss.total)) {
      throw numerical_error("non-finite loss at iteration " + std::to_string(iter + 1) +
                            (outputs.model_path.empty() ? std::string()
                                                        : "; last good checkpoint: " + outputs.model_path));
    }
    adam_step(net, grads, adam, entry.lr);
    report.history.push_back(entry);
    if (outputs.on_iteration) outputs.on_iteration(iter, entry);
    if ((iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.iterations) checkpoint();
  }
  checkpoint();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.model_path = outputs.model_path;
  return {std::move(net), std::move(report)};
}

}  // namespace ngf
