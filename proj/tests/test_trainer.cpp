#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ntg/trainer.hpp"

namespace fs = std::filesystem;
using ntg::Grid;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ntg_trainer_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small and fast: 8x8 images, two levels, a handful of images.
ntg::TrainConfig tiny_config(ntg::TrainMode mode = ntg::TrainMode::full) {
  ntg::TrainConfig c;
  c.channel_plan = {2, 4};
  c.corpus.image_size = 8;
  c.corpus.train_count = 3;
  c.corpus.val_count = 2;
  c.mode = mode;
  return c;
}

/// Step inputs for the first `steps` training pairs with fixed references.
struct StepFixture {
  ntg::ToyCorpus corpus;
  ntg::RefPyramids refs_x, refs_y;
  std::vector<ntg::StepInput> inputs;

  StepFixture(ntg::TrainState& s, const ntg::TrainConfig& cfg, std::size_t steps) {
    corpus = ntg::make_toy_corpus(cfg.corpus);
    const auto r = static_cast<std::ptrdiff_t>(std::min<std::size_t>(4, corpus.x_train.size()));
    const std::vector<Grid> rx(corpus.x_train.end() - r, corpus.x_train.end());
    const std::vector<Grid> ry(corpus.y_train.end() - r, corpus.y_train.end());
    refs_x = ntg::reference_pyramids(s.phi, rx, cfg.blur_factor);
    refs_y = ntg::reference_pyramids(s.phi, ry, cfg.blur_factor);
    const auto levels = ntg::texture_levels(cfg.mode, cfg.channel_plan.size());
    for (std::size_t i = 0; i < steps; ++i) {
      ntg::StepInput in{corpus.x_train[i], corpus.y_train[i], {}, {}, &refs_y, &refs_x};
      in.x_maps = ntg::match_image(s.phi, in.x, refs_y, levels, cfg.patch_size);
      in.y_maps = ntg::match_image(s.phi, in.y, refs_x, levels, cfg.patch_size);
      inputs.push_back(std::move(in));
    }
  }
};

}  // namespace

TEST(TrainConfig, LearningRateClosedForm) {
  ntg::TrainConfig c;
  for (std::size_t e = 0; e < 300; ++e) {
    EXPECT_EQ(c.learning_rate(e), 2e-4 / std::pow(2.0, std::floor(static_cast<double>(e) / 50.0))) << e;
  }
  EXPECT_EQ(c.learning_rate(49), 2e-4);
  EXPECT_EQ(c.learning_rate(50), 1e-4);
}

TEST(TrainConfig, Defaults) {
  const ntg::TrainConfig c;
  EXPECT_EQ(c.epochs, 100u);
  EXPECT_EQ(c.batch_size, 1u);
  EXPECT_EQ(c.lr0, 2e-4);
  EXPECT_EQ(c.adam_beta1, 0.5);
  EXPECT_EQ(c.adam_beta2, 0.999);
  EXPECT_EQ(c.adam_eps, 1e-8);
  EXPECT_EQ(c.lambda_cyc, 10.0);
  EXPECT_EQ(c.lambda_tex, 1e-4);
  EXPECT_EQ(c.mode, ntg::TrainMode::full);
  EXPECT_EQ(c.corpus.train_count, 64u);
  EXPECT_EQ(c.corpus.val_count, 16u);
}

TEST(TrainConfig, ParsesFlatText) {
  const auto c = ntg::parse_config(
      "# comment\n"
      "epochs = 7\n"
      "  lr0=0.001   # trailing\n"
      "\n"
      "mode = single_scale_texture\n"
      "channel_plan = 4, 8, 16\n"
      "seed = 18446744073709551615\n");
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.lr0, 0.001);
  EXPECT_EQ(c.mode, ntg::TrainMode::single_scale_texture);
  EXPECT_EQ(c.channel_plan, (std::vector<std::size_t>{4, 8, 16}));
  EXPECT_EQ(c.seed, 18446744073709551615ull);
  EXPECT_EQ(c.batch_size, 1u);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(ntg::parse_config("epochz = 3\n"), ntg::ArgumentError);
  EXPECT_THROW(ntg::parse_config("epochs = -3\n"), ntg::ArgumentError);
  EXPECT_THROW(ntg::parse_config("epochs = 3x\n"), ntg::ArgumentError);
  EXPECT_THROW(ntg::parse_config("epochs\n"), ntg::ArgumentError);
  EXPECT_THROW(ntg::parse_config("mode = sideways\n"), ntg::ArgumentError);
  ntg::TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ntg::ArgumentError);
}

TEST(TrainConfig, ModeNames) {
  for (auto m : {ntg::TrainMode::full, ntg::TrainMode::single_scale_texture, ntg::TrainMode::no_texture}) {
    EXPECT_EQ(ntg::parse_mode(ntg::to_string(m)), m);
  }
  EXPECT_EQ(ntg::parse_mode("none"), ntg::TrainMode::no_texture);
  EXPECT_EQ(ntg::parse_mode("single"), ntg::TrainMode::single_scale_texture);
}

TEST(ToyCorpus, ReproducibleAndPaired) {
  ntg::ToyDomainSpec spec;
  spec.seed = 3;
  const auto a = ntg::make_toy_corpus(spec), b = ntg::make_toy_corpus(spec);
  ASSERT_EQ(a.x_train.size(), 64u);
  ASSERT_EQ(a.val_x.size(), 16u);
  for (std::size_t i = 0; i < a.x_train.size(); ++i) EXPECT_TRUE(a.x_train[i] == b.x_train[i]);
  for (std::size_t i = 0; i < a.val_x.size(); ++i) {
    // Same geometry: background pixels coincide, shape pixels differ only in fill.
    for (std::size_t p = 0; p < a.val_x[i].size(); ++p) {
      EXPECT_EQ(a.val_x[i][p] == ntg::kToyBackground, a.val_y[i][p] == ntg::kToyBackground);
    }
  }
}

TEST(ToyCorpus, FillPatternsHavePeriodFour) {
  const std::vector<bool> all(32 * 32, true);
  const Grid x = ntg::toy_render(all, 32, ntg::ToyFill::stripes);
  const Grid y = ntg::toy_render(all, 32, ntg::ToyFill::checkerboard);
  for (std::size_t r = 0; r < 28; ++r)
    for (std::size_t c = 0; c < 28; ++c) {
      EXPECT_EQ(x(0, r, c), x(0, r + 4, c));
      EXPECT_EQ(x(0, r, c), x(0, r, c + 1));
      EXPECT_EQ(y(0, r, c), y(0, r + 4, c));
      EXPECT_EQ(y(0, r, c), y(0, r, c + 4));
    }
  EXPECT_NE(y(0, 0, 0), y(0, 0, 2));
}

TEST(ToyCorpus, TrainingImagesIndependentOfValidationCount) {
  ntg::ToyDomainSpec a, b;
  b.val_count = 0;
  const auto ca = ntg::make_toy_corpus(a), cb = ntg::make_toy_corpus(b);
  for (std::size_t i = 0; i < ca.x_train.size(); ++i) {
    EXPECT_TRUE(ca.x_train[i] == cb.x_train[i]);
    EXPECT_TRUE(ca.y_train[i] == cb.y_train[i]);
  }
}

TEST(Adam, MatchesScalarReference) {
  const double b1 = 0.5, b2 = 0.999, eps = 1e-8, lr = 0.05;
  ntg::Adam adam(b1, b2, eps);
  Grid p(1, 1, 1, 1.5);
  double q = 1.5, m = 0, v = 0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2.0 * (q - 3.0) + std::sin(q);
    EXPECT_NEAR(2.0 * (p[0] - 3.0) + std::sin(p[0]), g, 1e-12);
    adam.step({&p}, {Grid(1, 1, 1, 2.0 * (p[0] - 3.0) + std::sin(p[0]))}, lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    q -= lr * mh / (std::sqrt(vh) + eps);
    ASSERT_NEAR(p[0], q, 1e-12) << "step " << t;
  }
}

TEST(Discriminator, OutputIsProbability) {
  const auto d = ntg::build_discriminator(4);
  Grid x(1, 16, 16, 0.3);
  const double p = ntg::discriminate(d, x);
  EXPECT_GT(p, 0.0);
  EXPECT_LT(p, 1.0);
  ntg::ad::Tape tape;
  ntg::Binding bind(tape, false);
  EXPECT_DOUBLE_EQ(ntg::discriminate(bind, d, tape.constant(x)).value()[0], p);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersUnchanged) {
  auto cfg = tiny_config();
  ntg::TrainState s = ntg::make_train_state(cfg);
  StepFixture fx(s, cfg, 2);
  const ntg::NtxMap before = ntg::checkpoint(s);
  for (const auto& in : fx.inputs) {
    const auto r = ntg::train_step(s, in, cfg, 0.0);
    EXPECT_TRUE(std::isfinite(r.total));
    EXPECT_NE(r.adv_G, 0.0);
    EXPECT_NE(r.cyc, 0.0);
  }
  const ntg::NtxMap after = ntg::checkpoint(s);
  ASSERT_EQ(before.size(), after.size());
  for (const auto& [name, arr] : before) EXPECT_EQ(arr.values, after.at(name).values) << name;
}

TEST(TrainStep, ReportsTextureTermsPerMode) {
  for (auto mode : {ntg::TrainMode::full, ntg::TrainMode::no_texture}) {
    auto cfg = tiny_config(mode);
    ntg::TrainState s = ntg::make_train_state(cfg);
    StepFixture fx(s, cfg, 1);
    const auto r = ntg::train_step(s, fx.inputs[0], cfg, 2e-4);
    if (mode == ntg::TrainMode::no_texture) {
      EXPECT_EQ(r.tex_G, 0.0);
      EXPECT_EQ(r.tex_F, 0.0);
    } else {
      EXPECT_GT(r.tex_G, 0.0);
      EXPECT_GT(r.tex_F, 0.0);
    }
    const double expected = ntg::total_objective(r.adv_G, r.adv_F, r.cyc, r.tex_G, r.tex_F);
    EXPECT_NEAR(r.total, expected, 1e-12 * std::abs(expected));
  }
}

TEST(TrainStep, DeterministicAcrossRuns) {
  auto run = [] {
    auto cfg = tiny_config();
    ntg::TrainState s = ntg::make_train_state(cfg);
    StepFixture fx(s, cfg, 3);
    std::vector<double> totals;
    for (int rep = 0; rep < 2; ++rep)
      for (const auto& in : fx.inputs) totals.push_back(ntg::train_step(s, in, cfg, 1e-3).total);
    return totals;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStep, BatchOfOneEqualsSingleStep) {
  auto cfg = tiny_config();
  ntg::TrainState a = ntg::make_train_state(cfg), b = ntg::make_train_state(cfg);
  StepFixture fx(a, cfg, 1);
  const auto ra = ntg::train_step(a, fx.inputs[0], cfg, 1e-3);
  const auto rb = ntg::train_batch(b, std::span<const ntg::StepInput>(fx.inputs.data(), 1), cfg, 1e-3);
  EXPECT_EQ(ra.total, rb.total);
  const auto ca = ntg::checkpoint(a), cb = ntg::checkpoint(b);
  for (const auto& [name, arr] : ca) EXPECT_EQ(arr.values, cb.at(name).values) << name;
}

TEST(TrainStep, TenStepsReduceTotalLossInMostSeeds) {
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ntg::TrainConfig cfg;
    cfg.seed = seed;
    cfg.corpus.seed = seed;
    cfg.corpus.train_count = 14;
    cfg.corpus.val_count = 0;
    ntg::TrainState s = ntg::make_train_state(cfg);
    StepFixture fx(s, cfg, 10);
    std::vector<double> totals;
    for (const auto& in : fx.inputs) totals.push_back(ntg::train_step(s, in, cfg, cfg.learning_rate(0)).total);
    if (totals.back() < totals.front()) ++improved;
  }
  EXPECT_GE(improved, 8);
}

TEST(Trainer, UnpairedContract) {
  auto with_pairs = tiny_config();
  auto without = tiny_config();
  with_pairs.corpus.val_count = 16;
  without.corpus.val_count = 0;
  ntg::Trainer a(with_pairs), b(without);
  for (std::size_t e = 0; e < 3; ++e) {
    const auto ra = a.run_epoch(e), rb = b.run_epoch(e);
    EXPECT_EQ(ra.loss.total, rb.loss.total);
    EXPECT_EQ(ra.loss.cyc, rb.loss.cyc);
    EXPECT_EQ(ra.loss.tex_G, rb.loss.tex_G);
    EXPECT_EQ(ra.loss.disc_Y, rb.loss.disc_Y);
  }
  const auto ca = ntg::checkpoint(a.state()), cb = ntg::checkpoint(b.state());
  for (const auto& [name, arr] : ca) EXPECT_EQ(arr.values, cb.at(name).values) << name;
}

TEST(Trainer, BatchesAverageGradients) {
  auto cfg = tiny_config();
  cfg.batch_size = 2;
  ntg::Trainer t(cfg);
  const auto row = t.run_epoch(0);
  EXPECT_TRUE(std::isfinite(row.loss.total));
}

TEST(RunTraining, ZeroEpochsWritesInitialCheckpointAndHeader) {
  auto cfg = tiny_config();
  cfg.epochs = 0;
  const fs::path dir = fresh_dir("zero");
  const auto res = ntg::run_training(cfg, dir);
  EXPECT_TRUE(res.rows.empty());
  EXPECT_EQ(slurp(dir / "metrics.csv"), std::string(ntg::kTrainCsvHeader) + "\n");
  EXPECT_TRUE(fs::exists(dir / "ckpt_epoch_000.ntx1"));
  EXPECT_FALSE(fs::exists(dir / "final.ntx1"));
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 2u);
  fs::remove_all(dir);
}

TEST(RunTraining, UnwritableDirectoryRejected) {
  const fs::path dir = fresh_dir("blocked");
  fs::create_directories(dir);
  { std::ofstream(dir / "file") << "x"; }
  auto cfg = tiny_config();
  cfg.epochs = 1;
  EXPECT_THROW(ntg::run_training(cfg, dir / "file" / "sub"), ntg::IoError);
  fs::remove_all(dir);
}

TEST(RunTraining, LearningRateColumnAndCheckpoints) {
  auto cfg = tiny_config(ntg::TrainMode::no_texture);
  cfg.channel_plan = {2, 2};
  cfg.corpus.train_count = 1;
  cfg.corpus.val_count = 1;
  const fs::path dir = fresh_dir("schedule");
  ntg::run_training(cfg, dir);
  std::istringstream csv(slurp(dir / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, ntg::kTrainCsvHeader);
  std::size_t epoch = 0;
  while (std::getline(csv, line)) {
    const auto first = line.find(','), second = line.find(',', first + 1);
    EXPECT_EQ(line.substr(0, first), std::to_string(epoch));
    EXPECT_EQ(line.substr(first + 1, second - first - 1), epoch < 50 ? "0.0002" : "0.0001") << epoch;
    ++epoch;
  }
  EXPECT_EQ(epoch, 100u);
  for (std::size_t e = 0; e <= 100; e += 10) EXPECT_TRUE(fs::exists(dir / ntg::checkpoint_name(e))) << e;
  const auto weights = ntg::read_ntx1(dir / "final.ntx1");
  EXPECT_EQ(ntg::plan_from_weights(weights), cfg.channel_plan);
  EXPECT_TRUE(weights.count("G.head.weight"));
  EXPECT_TRUE(weights.count("phi.level1.weight"));
  fs::remove_all(dir);
}

TEST(CsvNumber, NineSignificantDigits) {
  EXPECT_EQ(ntg::csv_number(2e-4), "0.0002");
  EXPECT_EQ(ntg::csv_number(1.0 / 3.0), "0.333333333");
  EXPECT_EQ(ntg::csv_number(std::numeric_limits<double>::infinity()), "inf");
}
