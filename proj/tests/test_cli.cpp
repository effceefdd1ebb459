#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "asymflow/experiment.hpp"

using namespace asymflow;
namespace fs = std::filesystem;

namespace {

const char* kSmall =
    " --n_train 300 --n_holdout 100 --hidden 16 --depth 2 --batch 16 --steps 20 --eval_every 10"
    " --eval_samples 50 --sample_steps 4 --quiet";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string first_line(const fs::path& p) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  return line;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ASYMFLOW_CLI_PATH) + " " + args + " 2>/dev/null";
  return std::system(cmd.c_str());
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("asymflow_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Datasets, MoonsAreReproducible) {
  DatasetSpec spec;
  spec.kind = DatasetKind::Moons2d;
  spec.size = 4;
  Rng a(0), b(0);
  const TrainData x = make_dataset(spec, a), y = make_dataset(spec, b);
  EXPECT_EQ(x.x.rows(), 2u);
  EXPECT_EQ(x.x.cols(), 4u);
  EXPECT_EQ(x.x.storage(), y.x.storage());
  EXPECT_EQ(x.labels, (std::vector<int>{0, 1, 0, 1}));
}

TEST(Datasets, ToyPatchesAreStandardized) {
  DatasetSpec spec;
  spec.size = 10000;
  Rng rng(1);
  const TrainData d = make_dataset(spec, rng);
  ASSERT_EQ(d.x.rows(), 16u);
  for (std::size_t i = 0; i < 16; ++i) {
    double m = 0, s = 0;
    for (std::size_t n = 0; n < d.x.cols(); ++n) m += d.x(i, n);
    m /= 1e4;
    for (std::size_t n = 0; n < d.x.cols(); ++n) s += (d.x(i, n) - m) * (d.x(i, n) - m);
    EXPECT_NEAR(m, 0.0, 0.05);
    EXPECT_NEAR(std::sqrt(s / 1e4), 1.0, 0.05);
  }
  for (int l : d.labels) EXPECT_TRUE(l >= 0 && l < 3);
}

TEST(Datasets, ToyPatchesAreLowRank) {
  DatasetSpec spec;
  spec.size = 5000;
  Rng rng(2);
  const TrainData d = make_dataset(spec, rng);
  // Smooth bumps concentrate variance in a few principal directions.
  EXPECT_GT(captured_variance(d.x, fit_pca(d.x, 4)), 0.8);
}

TEST(Datasets, SingleGaussianHasUnitCovariance) {
  DatasetSpec spec;
  spec.kind = DatasetKind::GaussMixture;
  spec.dim = 3;
  spec.size = 20000;
  Rng rng(3);
  const TrainData d = make_dataset(spec, rng);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double c = 0;
      for (std::size_t n = 0; n < spec.size; ++n) c += d.x(i, n) * d.x(j, n);
      EXPECT_NEAR(c / spec.size, i == j ? 1.0 : 0.0, 0.05);
    }
  EXPECT_TRUE(d.labels.empty());
}

TEST(Datasets, InvalidSpecsThrow) {
  DatasetSpec spec;
  spec.size = 0;
  Rng rng(0);
  EXPECT_THROW(make_dataset(spec, rng), DomainError);
  spec = {};
  spec.kind = DatasetKind::GaussMixture;
  spec.components = 3;
  spec.dim = 1;
  EXPECT_THROW(make_dataset(spec, rng), DomainError);
}

TEST(SlicedWasserstein, OneDimensionalExact) {
  EXPECT_NEAR(wasserstein1_1d({0, 1}, {0, 1}), 0.0, 1e-15);
  EXPECT_NEAR(wasserstein1_1d({0, 1, 2}, {1, 2, 3}), 1.0, 1e-15);
  // Uneven sizes: {0, 1} vs {0, 0.5, 1}: quantiles differ on [1/3, 1/2] by 0.5 and [1/2, 2/3] by 0.5.
  EXPECT_NEAR(wasserstein1_1d({0, 1}, {0, 0.5, 1}), 1.0 / 6.0, 1e-15);
  EXPECT_THROW(wasserstein1_1d({}, {1}), DomainError);
}

TEST(SlicedWasserstein, ShiftAndIdentity) {
  Rng rng(4);
  const Matrix x = sample_gaussian(rng, 2, 500);
  EXPECT_EQ(sliced_wasserstein(x, x, 64, kSlicedSeed), 0.0);
  Matrix y = x;
  for (std::size_t n = 0; n < 500; ++n) y(0, n) += 1.0;
  // W1 of a unit shift along e1 projected on direction d is |d_0|; E|d_0| = 2/pi in 2-D.
  EXPECT_NEAR(sliced_wasserstein(x, y, 4000, 7), 2.0 / 3.141592653589793, 0.02);
  EXPECT_EQ(sliced_wasserstein(x, y, 64, kSlicedSeed), sliced_wasserstein(x, y, 64, kSlicedSeed));
}

TEST(Ppm, HeaderAndSize) {
  const fs::path p = fs::temp_directory_path() / "asymflow_test.ppm";
  Matrix x(16, 3);
  write_ppm_grid(p.string(), x, 2, 2);
  const std::string s = slurp(p);
  fs::remove(p);
  // cell = 4 * 2 + 1, width = 2 * 9 + 1, height = 2 * 9 + 1
  const std::string header = "P6\n19 19\n255\n";
  ASSERT_EQ(s.substr(0, header.size()), header);
  EXPECT_EQ(s.size(), header.size() + 19u * 19u * 3u);
  EXPECT_THROW(write_ppm_grid(p.string(), Matrix(15, 1), 2), DimensionError);
}

TEST(Config, OverridesAndUnknownKeys) {
  EXPECT_EQ(parse_override("12"), Json(12));
  EXPECT_EQ(parse_override("[0,4]"), Json({0, 4}));
  EXPECT_EQ(parse_override("heun"), Json("heun"));
  const Json cfg = resolve_config(Json{{"steps", 10}}, Json{{"steps", 20}, {"method", "euler"}});
  EXPECT_EQ(cfg.at("steps"), 20);
  EXPECT_EQ(cfg.at("method"), "euler");
  EXPECT_EQ(cfg.at("batch"), 64);
  EXPECT_THROW(resolve_config(Json::object(), Json{{"stepz", 1}}), Error);
}

TEST(Config, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(0, 1), derive_seed(0, 2));
  EXPECT_NE(derive_seed(0, 1), derive_seed(1, 1));
  EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

TEST(Config, TypedAccessorsReject) {
  Json cfg = default_config();
  cfg["method"] = "rk4";
  EXPECT_THROW(sampler_config(cfg), Error);
  cfg = default_config();
  cfg["steps"] = "many";
  EXPECT_THROW(train_config(cfg, 0), Error);
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw Error("boom");
               }),
               Error);
}

TEST(Cli, RejectsBadInvocations) {
  const fs::path out = scratch("bad");
  EXPECT_NE(run_cli("train --out " + out.string() + " --no_such_key 3"), 0);
  EXPECT_NE(run_cli("bogus --out " + out.string()), 0);
  EXPECT_NE(run_cli("sample --out " + out.string()), 0);
  fs::remove_all(out);
}

TEST(Cli, CsvSchemas) {
  struct Case {
    std::string command, extra, header;
  };
  const std::vector<Case> cases{
      {"fit-subspace", "", "basis,rank,captured_variance,orthonormality_error,scale,degenerate_directions"},
      {"train", "", "step,metric,value"},
      {"verify-coupling", " --trials 5", "trial,method,grid_size,residual,final_identity_error"},
      {"ablate-rank", " --ranks [0,4]", "basis,rank,seed,step,sliced_w1"},
      {"ablate-sigma-min", " --ranks [0,4]", "basis,rank,seed,sigma_min,sliced_w1"},
      {"ablate-loss", " --teacher_steps 10 --finetune_steps 10 --ranks [4]", "loss,rank,seed,step,sliced_w1"},
  };
  for (const Case& c : cases) {
    const fs::path out = scratch("schema_" + c.command);
    ASSERT_EQ(run_cli(c.command + " --out " + out.string() + kSmall + c.extra), 0) << c.command;
    EXPECT_EQ(first_line(out / "metrics.csv"), c.header) << c.command;
    EXPECT_TRUE(fs::exists(out / "config.json")) << c.command;
    fs::remove_all(out);
  }
}

TEST(Cli, TrainThenSample) {
  const fs::path tr = scratch("train");
  const fs::path sa = scratch("sample");
  ASSERT_EQ(run_cli("train --out " + tr.string() + kSmall), 0);
  EXPECT_TRUE(fs::exists(tr / "checkpoint.afck"));
  EXPECT_TRUE(fs::exists(tr / "samples" / "final.ppm"));
  ASSERT_EQ(run_cli("sample --out " + sa.string() + " --checkpoint " + (tr / "checkpoint.afck").string() +
                    " --n_samples 20 --sample_steps 4 --quiet"),
            0);
  EXPECT_EQ(first_line(sa / "metrics.csv"), "n_samples,method,steps,sigma_min,sliced_w1");
  EXPECT_TRUE(fs::exists(sa / "samples.afmx"));
  EXPECT_EQ(afmx::load(sa / "samples.afmx").cols(), 20u);
  fs::remove_all(tr);
  fs::remove_all(sa);
}

TEST(Cli, RerunIsByteIdentical) {
  for (const std::string cmd : {"train", "ablate-rank"}) {
    const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
    const std::string extra = cmd == "ablate-rank" ? " --ranks [0,2]" : "";
    ASSERT_EQ(run_cli(cmd + " --out " + a.string() + kSmall + extra + " --seed 3"), 0);
    ASSERT_EQ(run_cli(cmd + " --out " + b.string() + kSmall + extra + " --seed 3"), 0);
    EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv")) << cmd;
    fs::remove_all(a);
    fs::remove_all(b);
  }
}

TEST(Cli, ThreadCountDoesNotChangeResults) {
  const fs::path a = scratch("threads_a"), b = scratch("threads_b");
  const std::string args = " --trials 8 --quiet";
  ASSERT_EQ(run_cli("verify-coupling --out " + a.string() + args), 0);
  ASSERT_EQ(std::system(("ASYMFLOW_THREADS=3 " + std::string(ASYMFLOW_CLI_PATH) + " verify-coupling --out " +
                         b.string() + args)
                            .c_str()),
            0);
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}
