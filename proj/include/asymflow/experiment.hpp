#pragma once

// Experiment orchestration behind the CLI: flat JSON configs, toy training runs, the
// rank / sigma_min / loss ablations, coupling verification, and CSV/PPM emission.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "asymflow/afmx.hpp"
#include "asymflow/checkpoint.hpp"
#include "asymflow/data.hpp"
#include "asymflow/latentlift.hpp"
#include "asymflow/sampler.hpp"
#include "asymflow/train.hpp"

namespace asymflow {

namespace fs = std::filesystem;

// ---- configuration -----------------------------------------------------------

inline Json default_config() {
  return Json{
      // data
      {"dataset", "toy_patches"}, {"patch", 4}, {"dim", 2}, {"components", 1}, {"noise", 0.1},
      {"n_train", 50000}, {"n_holdout", 5000},
      // subspace
      {"rank", 4}, {"basis", "pca"}, {"fit_n", 100000}, {"latent_scale", 0.5},
      // network
      {"hidden", 256}, {"depth", 3}, {"time_freqs", 8}, {"conditional", false},
      // training
      {"batch", 64}, {"steps", 5000}, {"lr", 1e-3}, {"beta1", 0.9}, {"beta2", 0.95},
      {"time_shift", 1.0}, {"train_sigma_min", kDefaultSigmaMin}, {"loss", "fm"},
      {"ema_decay", 0.999}, {"cond_drop", 0.1}, {"kappa", 0.3}, {"omega_p", 0.2},
      {"eval_every", 1000}, {"eval_samples", 1000}, {"sw_projections", 64},
      // sampling
      {"method", "heun"}, {"sample_steps", 50}, {"t_end", 1e-3}, {"sigma_min", kDefaultSigmaMin},
      {"guidance_scale", 1.0}, {"guidance_lo", 0.0}, {"guidance_hi", 1.0}, {"n_samples", 64},
      {"grid_cols", 8}, {"checkpoint", ""},
      // ablations
      {"repeats", 1}, {"ranks", {0, 2, 4, 8, 16}}, {"bases", {"pca"}},
      {"sigma_mins", {kDefaultSigmaMin, 0.0}}, {"losses", {"fm", "vr", "vr_perceptual"}},
      {"teacher_steps", 2000}, {"finetune_steps", 2000},
      // coupling
      {"trials", 1000}, {"max_dim", 8}, {"grid_min", 2}, {"grid_max", 64},
      {"methods", {"euler", "heun"}}, {"field_hidden", 8}};
}

/// Parses a command-line value: JSON when it parses, otherwise a plain string.
inline Json parse_override(const std::string& text) {
  Json v = Json::parse(text, nullptr, false);
  if (v.is_discarded()) return Json(text);
  return v;
}

/// defaults <- file <- overrides. Unknown keys are rejected.
inline Json resolve_config(const Json& file, const Json& overrides) {
  Json cfg = default_config();
  for (const Json* layer : {&file, &overrides}) {
    for (auto it = layer->begin(); it != layer->end(); ++it) {
      if (!cfg.contains(it.key())) throw Error("unknown config key '" + it.key() + "'");
      cfg[it.key()] = it.value();
    }
  }
  return cfg;
}

inline Json load_config_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path.string() + "'");
  Json j = Json::parse(is, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error("config '" + path.string() + "' is not a JSON object");
  return j;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t s = seed ^ (tag * 0x9E3779B97F4A7C15ULL);
  return splitmix64(s);
}

namespace detail {

template <class T>
T cfg_get(const Json& cfg, const char* key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline DatasetSpec dataset_spec(const Json& cfg) {
  DatasetSpec s;
  s.kind = dataset_kind_from_string(detail::cfg_get<std::string>(cfg, "dataset"));
  s.size = detail::cfg_get<std::size_t>(cfg, "n_train") + detail::cfg_get<std::size_t>(cfg, "n_holdout");
  s.patch = detail::cfg_get<std::size_t>(cfg, "patch");
  s.dim = detail::cfg_get<std::size_t>(cfg, "dim");
  s.components = detail::cfg_get<std::size_t>(cfg, "components");
  s.noise = detail::cfg_get<double>(cfg, "noise");
  return s;
}

inline NetConfig net_config(const Json& cfg, std::size_t dim, std::size_t num_classes) {
  NetConfig n;
  n.dim = dim;
  n.hidden = detail::cfg_get<std::size_t>(cfg, "hidden");
  n.depth = detail::cfg_get<std::size_t>(cfg, "depth");
  n.time_freqs = detail::cfg_get<std::size_t>(cfg, "time_freqs");
  n.num_classes = detail::cfg_get<bool>(cfg, "conditional") ? num_classes : 0;
  return n;
}

inline TrainConfig train_config(const Json& cfg, std::uint64_t seed) {
  TrainConfig t;
  t.batch = detail::cfg_get<std::size_t>(cfg, "batch");
  t.steps = detail::cfg_get<std::size_t>(cfg, "steps");
  t.adam.lr = detail::cfg_get<double>(cfg, "lr");
  t.adam.beta1 = detail::cfg_get<double>(cfg, "beta1");
  t.adam.beta2 = detail::cfg_get<double>(cfg, "beta2");
  t.time_shift = detail::cfg_get<double>(cfg, "time_shift");
  t.sigma_min = detail::cfg_get<double>(cfg, "train_sigma_min");
  t.seed = seed;
  t.loss = loss_mode_from_string(detail::cfg_get<std::string>(cfg, "loss"));
  t.weights.kappa = detail::cfg_get<double>(cfg, "kappa");
  t.weights.omega_p = detail::cfg_get<double>(cfg, "omega_p");
  t.ema_decay = detail::cfg_get<double>(cfg, "ema_decay");
  t.cond_drop = detail::cfg_get<double>(cfg, "cond_drop");
  t.eval_every = detail::cfg_get<std::size_t>(cfg, "eval_every");
  t.validate();
  return t;
}

inline SamplerConfig sampler_config(const Json& cfg) {
  SamplerConfig s;
  s.method = ode_method_from_string(detail::cfg_get<std::string>(cfg, "method"));
  s.steps = detail::cfg_get<std::size_t>(cfg, "sample_steps");
  s.t_end = detail::cfg_get<double>(cfg, "t_end");
  s.sigma_min = detail::cfg_get<double>(cfg, "sigma_min");
  s.guidance_scale = detail::cfg_get<double>(cfg, "guidance_scale");
  s.guidance_interval = {detail::cfg_get<double>(cfg, "guidance_lo"), detail::cfg_get<double>(cfg, "guidance_hi")};
  s.validate();
  return s;
}

// ---- shared pieces -------------------------------------------------------------

inline std::size_t worker_threads() {
  const char* env = std::getenv("ASYMFLOW_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw Error("ASYMFLOW_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

/// Runs fn(0..n-1) on up to `threads` workers. Results must be written by index.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

/// Minimal CSV writer with a fixed header.
class CsvWriter {
 public:
  CsvWriter(const fs::path& path, std::vector<std::string> header)
      : os_(path), width_(header.size()) {
    if (!os_) throw IoError("cannot open '" + path.string() + "' for writing");
    write_row(header);
  }

  void write_row(const std::vector<std::string>& cells) {
    detail::require_same_size(cells.size(), width_, "CsvWriter");
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << '\n';
    if (!os_) throw IoError("CSV write failed");
  }

 private:
  std::ofstream os_;
  std::size_t width_;
};

inline void write_json(const fs::path& path, const Json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << '\n';
}

struct DataSplit {
  TrainData train;
  TrainData holdout;
};

inline DataSplit make_split(const Json& cfg, std::uint64_t seed) {
  const DatasetSpec spec = dataset_spec(cfg);
  Rng rng(derive_seed(seed, 1));
  const TrainData all = make_dataset(spec, rng);
  const std::size_t n_train = detail::cfg_get<std::size_t>(cfg, "n_train");
  const std::size_t n_hold = detail::cfg_get<std::size_t>(cfg, "n_holdout");
  if (n_train == 0 || n_hold == 0) throw DomainError("n_train and n_holdout must be >= 1");
  return {slice_columns(all, 0, n_train), slice_columns(all, n_train, n_hold)};
}

/// Rank-r basis of the requested kind fitted on (up to fit_n) training columns.
inline SubspaceBasis make_basis(const Json& cfg, const TrainData& train, std::size_t rank,
                                const std::string& kind, std::uint64_t seed) {
  const std::size_t dim = train.x.rows();
  if (rank > dim) throw DimensionError("rank " + std::to_string(rank) + " exceeds D = " + std::to_string(dim));
  if (rank == 0) return SubspaceBasis::empty(dim);
  const std::size_t n = std::min(detail::cfg_get<std::size_t>(cfg, "fit_n"), train.x.cols());
  const Matrix x = train.x.col_block(0, n);
  if (kind == "pca") return fit_pca(x, rank);
  if (kind == "random") {
    Rng rng(derive_seed(seed, 2));
    return fit_random(dim, rank, rng);
  }
  throw Error("basis must be 'pca' or 'random' here, got '" + kind + "'");
}

/// Sliced W1 between model samples and held-out data. Uses a fixed noise draw per seed so
/// evaluations at different steps see the same eps.
inline double evaluate_sw(const AsymModel& model, const TrainData& holdout, const Json& cfg,
                          const SamplerConfig& scfg, std::uint64_t seed, Matrix* samples_out = nullptr) {
  const std::size_t n = detail::cfg_get<std::size_t>(cfg, "eval_samples");
  const std::size_t dim = model.dim();
  Rng rng(derive_seed(seed, 3));
  const Matrix eps = sample_gaussian(rng, n, dim);
  std::vector<int> labels;
  if (model.net.config().num_classes > 0 && !holdout.labels.empty()) {
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = holdout.labels[i % holdout.labels.size()];
  }
  const Matrix xs = sample(velocity_fn(model), eps, scfg, labels).transpose();  // D x n
  if (samples_out) *samples_out = xs;
  return sliced_wasserstein(xs, holdout.x, detail::cfg_get<std::size_t>(cfg, "sw_projections"), kSlicedSeed);
}

// ---- rank / sigma_min study --------------------------------------------------------

struct EvalRecord {
  std::string basis;
  std::size_t rank = 0;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  double sigma_min = 0.0;
  double sw = 0.0;
};

struct LossRecord {
  std::string tag;  // basis name or loss mode
  std::size_t rank = 0;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  double loss = 0.0;
};

struct StudyResult {
  std::vector<EvalRecord> evals;
  std::vector<LossRecord> losses;
};

struct RunSpec {
  std::string basis;
  std::size_t rank;
  std::uint64_t seed;
};

/// Trains one toy model per (basis, rank, seed). EMA weights are evaluated with the first
/// sigma_min every eval_every steps, and with every sigma_min at the end.
inline StudyResult rank_study(const Json& cfg, const std::vector<RunSpec>& runs,
                              const std::vector<double>& sigma_mins, std::size_t threads,
                              std::ostream* log = nullptr) {
  if (sigma_mins.empty()) throw DomainError("rank_study: sigma_mins must not be empty");
  std::vector<StudyResult> parts(runs.size());
  std::mutex log_mu;
  parallel_for(runs.size(), threads, [&](std::size_t i) {
    const RunSpec& rs = runs[i];
    const DataSplit data = make_split(cfg, rs.seed);
    const TrainConfig tc = train_config(cfg, rs.seed);
    SamplerConfig sc = sampler_config(cfg);
    sc.sigma_min = sigma_mins.front();
    SubspaceBasis basis = make_basis(cfg, data.train, rs.rank, rs.basis, rs.seed);
    TrainState st = init_train_state(net_config(cfg, data.train.x.rows(), data.train.num_classes),
                                     std::move(basis), Calibration(), tc.sigma_min, rs.seed);
    StudyResult& out = parts[i];
    if (tc.loss != LossMode::FM) throw Error("rank studies train with loss = fm");
    train(st, data.train, tc, LossContext{}, {}, [&](const StepRecord& r, const TrainState& s) {
      out.losses.push_back({rs.basis, rs.rank, rs.seed, r.step, r.loss});
      const bool last = r.step == tc.steps;
      if ((tc.eval_every > 0 && r.step % tc.eval_every == 0) || last) {
        const AsymModel m = ema_model(s);
        const double sw = evaluate_sw(m, data.holdout, cfg, sc, rs.seed);
        out.evals.push_back({rs.basis, rs.rank, rs.seed, r.step, sc.sigma_min, sw});
        if (log) {
          std::lock_guard<std::mutex> lock(log_mu);
          *log << "  " << rs.basis << " r=" << rs.rank << " seed=" << rs.seed << " step " << r.step
               << " loss " << fmt_num(r.loss) << " sw " << fmt_num(sw) << '\n';
        }
        if (last) {
          for (std::size_t k = 1; k < sigma_mins.size(); ++k) {
            SamplerConfig sk = sc;
            sk.sigma_min = sigma_mins[k];
            out.evals.push_back({rs.basis, rs.rank, rs.seed, r.step, sk.sigma_min,
                                 evaluate_sw(m, data.holdout, cfg, sk, rs.seed)});
          }
        }
      }
    });
  });
  StudyResult all;
  for (auto& p : parts) {
    all.evals.insert(all.evals.end(), p.evals.begin(), p.evals.end());
    all.losses.insert(all.losses.end(), p.losses.begin(), p.losses.end());
  }
  return all;
}

inline std::vector<std::uint64_t> run_seeds(const Json& cfg, std::uint64_t seed) {
  const std::size_t repeats = detail::cfg_get<std::size_t>(cfg, "repeats");
  if (repeats == 0) throw DomainError("repeats must be >= 1");
  std::vector<std::uint64_t> seeds(repeats);
  for (std::size_t i = 0; i < repeats; ++i) seeds[i] = seed + i;
  return seeds;
}

// ---- coupling verification -----------------------------------------------------

struct CouplingRecord {
  std::size_t trial = 0;
  OdeMethod method = OdeMethod::Euler;
  std::size_t grid_size = 0;
  double residual = 0.0;
  double final_identity_error = 0.0;
};

/// Random smooth latent field G(z, t) = W2 tanh(W1 z + c t + b1) + b2.
inline LatentField random_latent_field(std::size_t dim, std::size_t hidden, Rng& rng) {
  const Matrix w1 = sample_gaussian(rng, hidden, dim);
  const Matrix w2 = sample_gaussian(rng, dim, hidden);
  const Vector c = sample_gaussian(rng, hidden);
  const Vector b1 = sample_gaussian(rng, hidden);
  const Vector b2 = sample_gaussian(rng, dim);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(dim, 1)));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  return LatentField{dim, [=](VecView z, double t) {
                       Vector h(hidden);
                       for (std::size_t j = 0; j < hidden; ++j) {
                         double a = c[j] * t + b1[j];
                         for (std::size_t i = 0; i < dim; ++i) a += s1 * w1(j, i) * z[i];
                         h[j] = std::tanh(a);
                       }
                       Vector u(dim);
                       for (std::size_t i = 0; i < dim; ++i) {
                         double a = b2[i];
                         for (std::size_t j = 0; j < hidden; ++j) a += s2 * w2(i, j) * h[j];
                         u[i] = a;
                       }
                       return u;
                     }};
}

/// Random decreasing grid from 1 to a random t_end in [1e-3, 0.1].
inline std::vector<double> random_grid(std::size_t points, Rng& rng) {
  const double t_end = rng.uniform(1e-3, 0.1);
  std::vector<double> inner(points > 2 ? points - 2 : 0);
  for (double& v : inner) v = rng.uniform(t_end, 1.0);
  std::sort(inner.begin(), inner.end(), std::greater<>());
  std::vector<double> grid{1.0};
  for (double v : inner)
    if (v < grid.back() && v > t_end) grid.push_back(v);
  grid.push_back(t_end);
  return grid;
}

/// One coupling trial: random D, rank, basis, field, noise and grid from (seed, trial).
inline std::vector<CouplingRecord> coupling_trial(const Json& cfg, std::uint64_t seed, std::size_t trial,
                                                  const std::vector<OdeMethod>& methods) {
  Rng rng(derive_seed(seed, 1000 + trial));
  const std::size_t max_dim = detail::cfg_get<std::size_t>(cfg, "max_dim");
  const std::size_t gmin = detail::cfg_get<std::size_t>(cfg, "grid_min");
  const std::size_t gmax = detail::cfg_get<std::size_t>(cfg, "grid_max");
  if (max_dim < 1 || gmin < 2 || gmax < gmin) throw DomainError("verify-coupling: invalid dims or grid sizes");
  const std::size_t dim = 1 + rng.below(max_dim);
  const std::size_t rank = rng.below(dim + 1);
  const SubspaceBasis basis = fit_random(dim, rank, rng);
  const LatentField field = random_latent_field(rank, detail::cfg_get<std::size_t>(cfg, "field_hidden"), rng);
  const Vector eps = sample_gaussian(rng, dim);
  const std::vector<double> grid = random_grid(gmin + rng.below(gmax - gmin + 1), rng);
  const LiftedField lifted(field, basis);
  std::vector<CouplingRecord> out;
  for (OdeMethod m : methods) {
    const CoupledTrajectory tr = integrate_coupled(lifted, eps, grid, m);
    out.push_back({trial, m, grid.size(), coupling_residual(tr, basis), final_identity_error(tr, basis)});
  }
  return out;
}

// ---- commands ------------------------------------------------------------------

struct CommandContext {
  std::string command;
  Json cfg;
  fs::path out;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::ostream* log = &std::clog;
};

inline void write_run_config(const CommandContext& ctx) {
  Json j = ctx.cfg;
  j["command"] = ctx.command;
  j["seed"] = ctx.seed;
  write_json(ctx.out / "config.json", j);
}

inline void write_basis(const fs::path& dir, const SubspaceBasis& basis, const Calibration& cal) {
  afmx::save(dir / "basis.afmx", basis.A());
  write_json(dir / "basis.json", Json{{"provenance", std::string(to_string(basis.provenance()))},
                                      {"D", basis.dim()},
                                      {"r", basis.rank()},
                                      {"s", cal.s}});
}

inline void cmd_fit_subspace(const CommandContext& ctx) {
  const DataSplit data = make_split(ctx.cfg, ctx.seed);
  const std::size_t rank = detail::cfg_get<std::size_t>(ctx.cfg, "rank");
  const std::string kind = detail::cfg_get<std::string>(ctx.cfg, "basis");
  SubspaceBasis basis;
  Calibration cal;
  std::size_t degenerate = 0;
  if (kind == "procrustes") {
    // Synthetic latents: a scaled random rotation of the PCA coordinates.
    if (rank == 0) throw DomainError("procrustes basis needs rank >= 1");
    const std::size_t n = std::min(detail::cfg_get<std::size_t>(ctx.cfg, "fit_n"), data.train.x.cols());
    const Matrix x = data.train.x.col_block(0, n);
    const SubspaceBasis pca = fit_pca(x, rank);
    Rng rng(derive_seed(ctx.seed, 4));
    const SubspaceBasis q = fit_random(rank, rank, rng);
    const double ls = detail::cfg_get<double>(ctx.cfg, "latent_scale");
    const Matrix z = ls * matmul(q.A(), matmul_tn(pca.A(), x));
    ProcrustesReport rep;
    basis = fit_procrustes(x, z, &rep);
    degenerate = rep.degenerate_directions;
    cal = estimate_scale(x, z, basis);
  } else {
    basis = make_basis(ctx.cfg, data.train, rank, kind, ctx.seed);
  }
  write_basis(ctx.out, basis, cal);
  CsvWriter csv(ctx.out / "metrics.csv",
                {"basis", "rank", "captured_variance", "orthonormality_error", "scale", "degenerate_directions"});
  csv.write_row({kind, std::to_string(rank), fmt_num(captured_variance(data.train.x, basis)),
                 fmt_num(basis.orthonormality_error()), fmt_num(cal.s), std::to_string(degenerate)});
}

inline void save_samples_ppm(const fs::path& dir, const std::string& name, const Matrix& xs,
                             const Json& cfg) {
  if (detail::cfg_get<std::string>(cfg, "dataset") != "toy_patches") return;
  fs::create_directories(dir / "samples");
  const std::size_t n = std::min<std::size_t>(xs.cols(), detail::cfg_get<std::size_t>(cfg, "n_samples"));
  write_ppm_grid((dir / "samples" / name).string(), xs.col_block(0, n),
                 detail::cfg_get<std::size_t>(cfg, "grid_cols"));
}

inline void cmd_train(const CommandContext& ctx) {
  const DataSplit data = make_split(ctx.cfg, ctx.seed);
  const TrainConfig tc = train_config(ctx.cfg, ctx.seed);
  if (tc.loss != LossMode::FM) throw Error("train supports loss = fm; use ablate-loss for the VR losses");
  const SamplerConfig sc = sampler_config(ctx.cfg);
  const std::size_t rank = detail::cfg_get<std::size_t>(ctx.cfg, "rank");
  SubspaceBasis basis = make_basis(ctx.cfg, data.train, rank, detail::cfg_get<std::string>(ctx.cfg, "basis"), ctx.seed);
  write_basis(ctx.out, basis, Calibration());
  TrainState st = init_train_state(net_config(ctx.cfg, data.train.x.rows(), data.train.num_classes),
                                   std::move(basis), Calibration(), tc.sigma_min, ctx.seed);
  CsvWriter csv(ctx.out / "metrics.csv", {"step", "metric", "value"});
  train(st, data.train, tc, LossContext{}, {}, [&](const StepRecord& r, const TrainState& s) {
    csv.write_row({std::to_string(r.step), "loss", fmt_num(r.loss)});
    if ((tc.eval_every > 0 && r.step % tc.eval_every == 0) || r.step == tc.steps) {
      const double sw = evaluate_sw(ema_model(s), data.holdout, ctx.cfg, sc, ctx.seed);
      csv.write_row({std::to_string(r.step), "sliced_w1", fmt_num(sw)});
      if (ctx.log) *ctx.log << "step " << r.step << " loss " << fmt_num(r.loss) << " sw " << fmt_num(sw) << '\n';
    }
  });
  Json run = ctx.cfg;
  run["seed"] = ctx.seed;
  save_checkpoint(ctx.out / "checkpoint.afck", st, run);
  Matrix xs;
  evaluate_sw(ema_model(st), data.holdout, ctx.cfg, sc, ctx.seed, &xs);
  save_samples_ppm(ctx.out, "final.ppm", xs, ctx.cfg);
}

inline void cmd_sample(const CommandContext& ctx) {
  const std::string path = detail::cfg_get<std::string>(ctx.cfg, "checkpoint");
  if (path.empty()) throw Error("sample needs --checkpoint <path>");
  const LoadedCheckpoint ck = load_checkpoint(path);
  // Data settings come from the training run so the held-out split matches.
  Json data_cfg = ctx.cfg;
  for (const char* k : {"dataset", "patch", "dim", "components", "noise", "n_train", "n_holdout"})
    if (ck.config.contains(k)) data_cfg[k] = ck.config[k];
  const std::uint64_t train_seed = ck.config.value("seed", ctx.seed);
  const DataSplit data = make_split(data_cfg, train_seed);
  const SamplerConfig sc = sampler_config(ctx.cfg);
  Json ecfg = data_cfg;
  ecfg["eval_samples"] = ctx.cfg.at("n_samples");
  Matrix xs;
  const double sw = evaluate_sw(ema_model(ck.state), data.holdout, ecfg, sc, ctx.seed, &xs);
  afmx::save(ctx.out / "samples.afmx", xs);
  save_samples_ppm(ctx.out, "samples.ppm", xs, data_cfg);
  CsvWriter csv(ctx.out / "metrics.csv", {"n_samples", "method", "steps", "sigma_min", "sliced_w1"});
  csv.write_row({std::to_string(xs.cols()), std::string(to_string(sc.method)), std::to_string(sc.steps),
                 fmt_num(sc.sigma_min), fmt_num(sw)});
}

inline void cmd_verify_coupling(const CommandContext& ctx) {
  const std::size_t trials = detail::cfg_get<std::size_t>(ctx.cfg, "trials");
  std::vector<OdeMethod> methods;
  for (const auto& m : ctx.cfg.at("methods")) methods.push_back(ode_method_from_string(m.get<std::string>()));
  std::vector<std::vector<CouplingRecord>> rows(trials);
  parallel_for(trials, ctx.threads, [&](std::size_t i) { rows[i] = coupling_trial(ctx.cfg, ctx.seed, i, methods); });
  CsvWriter csv(ctx.out / "metrics.csv", {"trial", "method", "grid_size", "residual", "final_identity_error"});
  double worst = 0.0;
  for (const auto& trial : rows) {
    for (const CouplingRecord& r : trial) {
      csv.write_row({std::to_string(r.trial), std::string(to_string(r.method)), std::to_string(r.grid_size),
                     fmt_num(r.residual), fmt_num(r.final_identity_error)});
      worst = std::max({worst, r.residual, r.final_identity_error});
    }
  }
  if (ctx.log) *ctx.log << "verify-coupling: " << trials << " trials, worst residual " << fmt_num(worst) << '\n';
}

inline std::vector<RunSpec> study_runs(const Json& cfg, std::uint64_t seed) {
  std::vector<RunSpec> runs;
  for (std::uint64_t s : run_seeds(cfg, seed))
    for (const auto& b : cfg.at("bases"))
      for (const auto& r : cfg.at("ranks")) runs.push_back({b.get<std::string>(), r.get<std::size_t>(), s});
  return runs;
}

inline void write_losses(const fs::path& path, const std::vector<LossRecord>& losses, const char* tag_name) {
  CsvWriter csv(path, {tag_name, "rank", "seed", "step", "loss"});
  for (const LossRecord& l : losses)
    csv.write_row({l.tag, std::to_string(l.rank), std::to_string(l.seed), std::to_string(l.step), fmt_num(l.loss)});
}

inline void cmd_ablate_rank(const CommandContext& ctx) {
  const double sm = detail::cfg_get<double>(ctx.cfg, "sigma_min");
  const StudyResult res = rank_study(ctx.cfg, study_runs(ctx.cfg, ctx.seed), {sm}, ctx.threads, ctx.log);
  CsvWriter csv(ctx.out / "metrics.csv", {"basis", "rank", "seed", "step", "sliced_w1"});
  for (const EvalRecord& e : res.evals)
    csv.write_row({e.basis, std::to_string(e.rank), std::to_string(e.seed), std::to_string(e.step), fmt_num(e.sw)});
  write_losses(ctx.out / "losses.csv", res.losses, "basis");
}

inline void cmd_ablate_sigma_min(const CommandContext& ctx) {
  std::vector<double> sms;
  for (const auto& v : ctx.cfg.at("sigma_mins")) sms.push_back(v.get<double>());
  Json cfg = ctx.cfg;
  cfg["eval_every"] = 0;
  const StudyResult res = rank_study(cfg, study_runs(cfg, ctx.seed), sms, ctx.threads, ctx.log);
  CsvWriter csv(ctx.out / "metrics.csv", {"basis", "rank", "seed", "sigma_min", "sliced_w1"});
  for (const EvalRecord& e : res.evals)
    csv.write_row({e.basis, std::to_string(e.rank), std::to_string(e.seed), fmt_num(e.sigma_min), fmt_num(e.sw)});
  write_losses(ctx.out / "losses.csv", res.losses, "basis");
}

// ---- loss ablation -----------------------------------------------------------------

/// Latent model on z = A^T x trained with plain flow matching; returns the EMA model.
inline AsymModel train_latent_teacher(const Json& cfg, const TrainData& train_data, const SubspaceBasis& basis,
                                      std::uint64_t seed) {
  TrainData latent{Matrix(basis.rank(), train_data.x.cols()), train_data.labels, train_data.num_classes};
  const Matrix z = matmul_tn(basis.A(), train_data.x);
  latent.x = z;
  TrainConfig tc = train_config(cfg, derive_seed(seed, 5));
  tc.loss = LossMode::FM;
  tc.steps = detail::cfg_get<std::size_t>(cfg, "teacher_steps");
  TrainState st = init_train_state(net_config(cfg, basis.rank(), train_data.num_classes),
                                   SubspaceBasis::full(basis.rank()), Calibration(), tc.sigma_min, tc.seed);
  train(st, latent, tc, LossContext{});
  return ema_model(st);
}

struct LossAblationResult {
  std::vector<EvalRecord> evals;  // basis field holds the loss mode
  std::vector<LossRecord> losses;
};

inline LossAblationResult loss_ablation(const Json& cfg, const std::vector<LossMode>& modes,
                                        const std::vector<std::uint64_t>& seeds, std::size_t threads,
                                        std::ostream* log = nullptr) {
  const std::size_t rank = detail::cfg_get<std::size_t>(cfg, "rank");
  if (rank == 0) throw DomainError("ablate-loss needs rank >= 1 for the low-rank teacher");
  struct Job {
    std::uint64_t seed;
    LossMode mode;
  };
  std::vector<Job> jobs;
  for (std::uint64_t s : seeds)
    for (LossMode m : modes) jobs.push_back({s, m});
  std::vector<LossAblationResult> parts(jobs.size());
  std::mutex log_mu;
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const Job job = jobs[i];
    const DataSplit data = make_split(cfg, job.seed);
    const SubspaceBasis basis = make_basis(cfg, data.train, rank, detail::cfg_get<std::string>(cfg, "basis"), job.seed);
    const AsymModel latent = train_latent_teacher(cfg, data.train, basis, job.seed);
    const ClampPolicy clamp{detail::cfg_get<double>(cfg, "train_sigma_min")};
    const AsymModel teacher{lift_network(latent.net, basis), basis, Calibration(), clamp};

    TrainConfig tc = train_config(cfg, derive_seed(job.seed, 6));
    tc.loss = job.mode;
    tc.steps = detail::cfg_get<std::size_t>(cfg, "finetune_steps");
    TrainState st{teacher, teacher.net, AdamState(teacher.net.num_params()), Rng(tc.seed), 0};
    const PyramidL2 metric;
    const LossContext ctx{job.mode, tc.weights, &teacher, &metric};
    const auto paired = [&basis](VecView x0) { return basis.project(x0); };
    const SamplerConfig sc = sampler_config(cfg);
    const std::string tag(to_string(job.mode));
    LossAblationResult& out = parts[i];
    const auto evaluate = [&](std::size_t step, const AsymModel& m) {
      const double sw = evaluate_sw(m, data.holdout, cfg, sc, job.seed);
      out.evals.push_back({tag, rank, job.seed, step, sc.sigma_min, sw});
      if (log) {
        std::lock_guard<std::mutex> lock(log_mu);
        *log << "  " << tag << " seed=" << job.seed << " step " << step << " sw " << fmt_num(sw) << '\n';
      }
    };
    evaluate(0, teacher);
    train(st, data.train, tc, ctx, paired, [&](const StepRecord& r, const TrainState& s) {
      out.losses.push_back({tag, rank, job.seed, r.step, r.loss});
      if ((tc.eval_every > 0 && r.step % tc.eval_every == 0) || r.step == tc.steps) evaluate(r.step, ema_model(s));
    });
  });
  LossAblationResult all;
  for (auto& p : parts) {
    all.evals.insert(all.evals.end(), p.evals.begin(), p.evals.end());
    all.losses.insert(all.losses.end(), p.losses.begin(), p.losses.end());
  }
  return all;
}

inline void cmd_ablate_loss(const CommandContext& ctx) {
  std::vector<LossMode> modes;
  for (const auto& m : ctx.cfg.at("losses")) modes.push_back(loss_mode_from_string(m.get<std::string>()));
  const LossAblationResult res = loss_ablation(ctx.cfg, modes, run_seeds(ctx.cfg, ctx.seed), ctx.threads, ctx.log);
  CsvWriter csv(ctx.out / "metrics.csv", {"loss", "rank", "seed", "step", "sliced_w1"});
  for (const EvalRecord& e : res.evals)
    csv.write_row({e.basis, std::to_string(e.rank), std::to_string(e.seed), std::to_string(e.step), fmt_num(e.sw)});
  write_losses(ctx.out / "losses.csv", res.losses, "loss");
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"fit-subspace", "train", "sample", "verify-coupling",
                                              "ablate-rank", "ablate-sigma-min", "ablate-loss"};
  return names;
}

/// Creates the output directory, persists the resolved config and runs the command.
inline void run_command(const CommandContext& ctx) {
  fs::create_directories(ctx.out);
  write_run_config(ctx);
  if (ctx.command == "fit-subspace") return cmd_fit_subspace(ctx);
  if (ctx.command == "train") return cmd_train(ctx);
  if (ctx.command == "sample") return cmd_sample(ctx);
  if (ctx.command == "verify-coupling") return cmd_verify_coupling(ctx);
  if (ctx.command == "ablate-rank") return cmd_ablate_rank(ctx);
  if (ctx.command == "ablate-sigma-min") return cmd_ablate_sigma_min(ctx);
  if (ctx.command == "ablate-loss") return cmd_ablate_loss(ctx);
  throw Error("unknown command '" + ctx.command + "'");
}

}  // namespace asymflow
