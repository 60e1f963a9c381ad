#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "lmvcat/trainer.hpp"
#include "test_util.hpp"

using namespace lmvcat;
using namespace lmvcat::testing;

namespace {

std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "lmvcat_tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ModelConfig small_model(std::size_t d_e = 16) {
  ModelConfig cfg;
  cfg.d_e = d_e;
  cfg.heads = 2;
  cfg.precision = Precision::Float64;
  return cfg;
}

TrainConfig short_run(std::size_t epochs, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.seed = seed;
  return cfg;
}

MultiViewDataset corrupted_synthetic(std::size_t n, std::uint64_t seed) {
  auto ds = make_synthetic(n, 3, 5, 4, {6, 8, 5}, 0.1, seed);
  return apply_masks(ds, simulate_missing_views(n, 3, 0.3, seed + 1), simulate_missing_labels(ds.labels, 0.3, seed + 2));
}

}  // namespace

// ---------------------------------------------------------------- Adam

TEST(Adam, ZeroGradientFromFreshStateIsNoOp) {
  Rng rng(1);
  std::vector<TensorD> p{random_tensor({3, 4}, rng), random_tensor({1, 5}, rng)};
  const auto before = p;
  AdamState<double> st;
  adam_step(p, {TensorD::matrix(3, 4), TensorD::matrix(1, 5)}, st, AdamConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MomentsDecayUnderZeroGradient) {
  Rng rng(2);
  std::vector<TensorD> p{random_tensor({2, 3}, rng)};
  const TensorD g = random_tensor({2, 3}, rng);
  AdamState<double> st;
  AdamConfig cfg;
  adam_step(p, {g}, st, cfg);
  const auto m1 = st.first[0], v1 = st.second[0];
  adam_step(p, {TensorD::matrix(2, 3)}, st, cfg);
  for (std::size_t k = 0; k < g.size(); ++k) {
    EXPECT_NEAR(m1[k], 0.1 * g[k], 1e-15);
    EXPECT_NEAR(v1[k], 0.001 * g[k] * g[k], 1e-15);
    EXPECT_NEAR(st.first[0][k], 0.9 * m1[k], 1e-15);
    EXPECT_NEAR(st.second[0][k], 0.999 * v1[k], 1e-15);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Rng rng(3);
  std::vector<TensorD> p{random_tensor({4, 4}, rng)};
  const auto start = p[0];
  const TensorD g = random_tensor({4, 4}, rng);
  AdamState<double> st;
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  adam_step(p, {g}, st, cfg);
  // Bias correction makes the first update lr * g / (|g| + eps).
  for (std::size_t k = 0; k < g.size(); ++k)
    EXPECT_NEAR(p[0][k] - start[k], -0.01 * g[k] / (std::abs(g[k]) + 1e-8), 1e-15);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<TensorD> p{TensorD::matrix(2, 2)};
  AdamState<double> st;
  try {
    adam_step(p, {TensorD::matrix(2, 3)}, st, AdamConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
  EXPECT_THROW(adam_step(p, {}, st, AdamConfig{}), Error);
}

TEST(Adam, TenStepsAreDeterministic) {
  auto run = [] {
    Rng rng(4);
    std::vector<TensorD> p{random_tensor({5, 3}, rng)};
    AdamState<double> st;
    for (int s = 0; s < 10; ++s) adam_step(p, {random_tensor({5, 3}, rng)}, st, AdamConfig{});
    return p;
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------- batching

TEST(Batching, TrailingSingletonIsMerged) {
  std::vector<std::size_t> order(9);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto b = detail::make_batches(order, 4);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[0].size(), 4u);
  EXPECT_EQ(b[1], (std::vector<std::size_t>{4, 5, 6, 7, 8}));
  EXPECT_EQ(detail::make_batches(order, 3).size(), 3u);
  EXPECT_EQ(detail::make_batches(order, 100).size(), 1u);
}

TEST(Batching, AllLabelsUnknownIsDegenerate) {
  auto ds = make_synthetic(6, 2, 3, 2, {3, 3}, 0.1, 5);
  ds = apply_masks(ds, TensorD::matrix(6, 2, 1.0), TensorD::matrix(6, 3));
  try {
    train<double>(small_model(8), short_run(1, 0), ds);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateMask);
  }
}

// ---------------------------------------------------------------- training loop

TEST(Train, ZeroAlphaIgnoresGraphTermBitwise) {
  const auto ds = corrupted_synthetic(60, 6);
  TrainConfig a = short_run(3, 9);
  a.alpha = 0.0;
  TrainConfig b = a;
  b.record_unused_terms = false;
  const auto ra = train<double>(small_model(), a, ds), rb = train<double>(small_model(), b, ds);
  EXPECT_EQ(ra.model.params().values(), rb.model.params().values());
  EXPECT_GT(ra.history.epochs.back().l_gc, 0.0);
  EXPECT_EQ(rb.history.epochs.back().l_gc, 0.0);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto dir = scratch_dir();
  const auto ds = corrupted_synthetic(60, 7);
  auto run = [&](const std::string& name) {
    TrainConfig cfg = short_run(3, 11);
    cfg.checkpoint_path = dir / name;
    return train<double>(small_model(), cfg, ds, &ds).history;
  };
  const RunHistory h1 = run("a.bin"), h2 = run("b.bin");
  EXPECT_EQ(h1, h2);
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  EXPECT_FALSE(slurp(dir / "a.bin").empty());
  TrainConfig other = short_run(3, 12);
  EXPECT_NE(train<double>(small_model(), other, ds).history, h1);
}

TEST(Train, HistoryHasOneRecordPerEpoch) {
  const auto dir = scratch_dir();
  const auto ds = corrupted_synthetic(40, 8);
  TrainConfig cfg = short_run(4, 1);
  cfg.eval_every = 2;
  const auto r = train<double>(small_model(), cfg, ds, &ds);
  ASSERT_EQ(r.history.epochs.size(), 4u);
  EXPECT_FALSE(r.history.epochs[0].eval.has_value());
  EXPECT_TRUE(r.history.epochs[1].eval.has_value());
  EXPECT_TRUE(r.history.epochs[3].eval.has_value());
  write_history(dir / "history.jsonl", r.history);
  std::ifstream in(dir / "history.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), ++lines);
    EXPECT_EQ(j.at("fusion_weights").size(), 3u);
  }
  EXPECT_EQ(lines, 4u);
}

TEST(Train, CheckpointRoundTripReproducesReport) {
  const auto dir = scratch_dir();
  const auto ds = corrupted_synthetic(50, 9);
  auto test = make_synthetic(30, 3, 5, 4, {6, 8, 5}, 0.1, 99);
  test = apply_masks(test, simulate_missing_views(30, 3, 0.3, 3), TensorD::matrix(30, 5, 1.0));
  for (const Precision prec : {Precision::Float64, Precision::Float32}) {
    ModelConfig mc = small_model();
    mc.precision = prec;
    TrainConfig cfg = short_run(2, 3);
    cfg.checkpoint_path = dir / "model.bin";
    auto check = [&]<class T>(T) {
      const auto r = train<T>(mc, cfg, ds, &test);
      const MetricsReport direct = evaluate(r.model, test);
      EXPECT_EQ(direct, *r.history.epochs.back().eval);
      EXPECT_EQ(evaluate(r.model, test), direct);
      const auto loaded = load_checkpoint<T>(cfg.checkpoint_path);
      EXPECT_EQ(evaluate(loaded, test), direct);
      EXPECT_EQ(loaded.params().values(), r.model.params().values());
    };
    if (prec == Precision::Float64) check(double{});
    else check(float{});
  }
}

TEST(Train, MissingViewContentDoesNotAffectEvaluation) {
  const auto ds = corrupted_synthetic(50, 10);
  const auto r = train<double>(small_model(), short_run(2, 4), ds);
  MultiViewDataset noisy = ds;
  Rng rng(5);
  for (std::size_t v = 0; v < 3; ++v)
    for (std::size_t i = 0; i < 50; ++i)
      if (ds.view_mask(i, v) == 0.0)
        for (double& x : noisy.views[v].row(i)) x = 100.0 * rng.normal();
  EXPECT_EQ(predict_dataset(r.model, ds), predict_dataset(r.model, noisy));
}

TEST(Train, RandomInitIsChanceLevel) {
  // Labels independent of the features: an untrained model scores about 0.5.
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto ds = make_synthetic(300, 3, 6, 4, {6, 8, 5}, 0.1, seed);
    Rng rng(seed + 100);
    ds.labels = random_binary(300, 6, rng, 0.4);
    LmvcatModel<double> model(small_model(), ds.view_dims(), 6);
    model.initialize(seed);
    total += evaluate(model, ds).auc;
  }
  EXPECT_NEAR(total / 10.0, 0.5, 0.05);
}

TEST(Train, PureNoiseViewGetsSmallestFusionWeight) {
  int smallest = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto ds = make_synthetic(200, 3, 6, 4, {10, 10, 10}, 0.1, seed);
    Rng rng(seed + 500);
    ds.views[2] = random_tensor({200, 10}, rng);
    TrainConfig cfg = short_run(40, seed);
    const auto r = train<double>(small_model(32), cfg, ds);
    const auto& w = r.history.epochs.back().fusion_weights;
    smallest += std::ranges::min_element(w) - w.begin() == 2;
  }
  EXPECT_GE(smallest, 8);
}
