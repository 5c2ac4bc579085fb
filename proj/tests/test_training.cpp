#include <microsurr/training.hpp>

#include <gtest/gtest.h>

#include "support.hpp"

#include <filesystem>

using namespace microsurr;

namespace {

using namespace microsurr::testing_support;

void expect_gradients_match(Variant v) {
  const auto data = toy_set();
  ASSERT_LE(data[0].graph.num_nodes(), 50);
  GNNModel m = make_model(tiny(v), 100 + static_cast<int>(v));
  m.stats = compute_norm_stats(data, m.config);
  std::vector<const TrainingSample*> batch{&data[0], &data[1]};
  if (m.config.material_active(Mode::Train)) {
    const GraphBatch b = make_batch({&data[0].graph, &data[1].graph});
    const RolloutResult r = rollout(m, b, {&data[0].path, &data[1].path}, Mode::Train, 7);
    ASSERT_GT(r.kappa.back().maxCoeff(), 0.0) << "toy rollout should reach the plastic regime";
  }
  const GradCheck gc = check_gradient(m, batch, 7);
  EXPECT_LT(gc.worst, 1e-4) << "worst parameter " << gc.where;
  EXPECT_LT(gc.one_sided, static_cast<int>(m.num_params() / 20));
  ::testing::Test::RecordProperty("one_sided", gc.one_sided);
  ::testing::Test::RecordProperty("worst_rel_error", std::to_string(gc.worst));
}

}  // namespace

TEST(Loss, Examples) {
  Trajectory a{Field3::Zero(1, 3)}, b{Field3::Constant(1, 3, 0.5)};
  EXPECT_EQ(loss_strain({a}, {a}), 0.0);
  EXPECT_DOUBLE_EQ(loss_strain({b}, {a}), 0.5);
  Trajectory c{Field3::Constant(2, 3, 1.0), Field3::Constant(2, 3, 1.0)}, z{Field3::Zero(2, 3), Field3::Zero(2, 3)};
  Trajectory d{Field3::Constant(2, 3, 2.0), Field3::Constant(2, 3, 2.0)};
  EXPECT_DOUBLE_EQ(loss_stress({c, d}, {z, z}), std::sqrt((1.0 + 4.0) / 2.0));
  EXPECT_THROW(loss_field({a}, {c}), Error);
}

TEST(Loss, HomogenizedMatchesBruteForceOnTwoElements) {
  const std::vector<double> areas{0.25, 0.75};
  Field3 sig(2, 3);
  sig << 1, 2, 3, 5, 6, 7;
  const Voigt3 mean = (areas[0] * sig.row(0) + areas[1] * sig.row(1)).transpose();
  const Voigt3 other(4.0, 5.0, 6.5);
  const double brute = std::sqrt(((mean - other).squaredNorm()) / 3.0);
  EXPECT_DOUBLE_EQ(loss_hom({{mean}}, {{other}}), brute);
  EXPECT_EQ(loss_hom({{mean}}, {{mean}}), 0.0);
}

TEST(Loss, Combine) {
  EXPECT_DOUBLE_EQ(combine_losses(2.0, 8.0, 0.0, 2.0, 4.0), 1.0);
  EXPECT_DOUBLE_EQ(combine_losses(2.0, 8.0, 1.0, 2.0, 4.0), 2.0);
  EXPECT_DOUBLE_EQ(combine_losses(1.0, 2.0, 0.6, 1.0, 1.0), 1.6);
  EXPECT_THROW(combine_losses(1.0, 1.0, 0.5, 0.0, 1.0), Error);
}

TEST(Schedule, WarmupAndDecay) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(0, c), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at(5, c), 1e-5 + 0.5 * (2e-4 - 1e-5));
  EXPECT_DOUBLE_EQ(lr_at(10, c), 2e-4);
  double ref = 2e-4;
  for (int i = 0; i < 30; ++i) ref *= 0.998;
  EXPECT_NEAR(lr_at(30, c), ref, 1e-15 * ref);
  EXPECT_NEAR(lr_at(30, c), 1.88342e-4, 1e-9);
  for (int e = 1; e <= 10; ++e) EXPECT_GT(lr_at(e, c), lr_at(e - 1, c));
  for (int e = 11; e < 300; ++e) EXPECT_DOUBLE_EQ(lr_at(e, c) / lr_at(e - 1, c), e == 11 ? std::pow(0.998, 11) : 0.998);
  EXPECT_THROW(lr_at(-1, c), Error);
  TrainConfig bad;
  bad.lr_start = 1e-3;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Optimizer, AdamFirstStepMovesByLr) {
  Adam a;
  std::vector<double> p{1.0, -2.0}, g{0.3, -5.0};
  a.step(p, g, 0.01);
  EXPECT_NEAR(p[0], 0.99, 1e-9);
  EXPECT_NEAR(p[1], -1.99, 1e-9);
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  std::vector<double> g{3.0, 4.0};
  EXPECT_DOUBLE_EQ(clip_gradient(g, 1.0), 5.0);
  EXPECT_NEAR(std::hypot(g[0], g[1]), 1.0, 1e-15);
  std::vector<double> s{0.1, 0.2};
  clip_gradient(s, 1.0);
  EXPECT_EQ(s, (std::vector<double>{0.1, 0.2}));
}

TEST(Stats, FromTrajectories) {
  const auto data = toy_set();
  const GNNConfig c = tiny(Variant::C);
  const NormStats s = compute_norm_stats(data, c);
  s.check(c);
  EXPECT_EQ(s.out_mean.size(), 6);
  EXPECT_GT(s.loss_sig_scale, 1.0);
  EXPECT_LT(s.loss_eps_scale, 0.1);
  EXPECT_NEAR(s.edge_mean.norm(), 0.0, 1e-12);
}

TEST(Gradient, VariantA) { expect_gradients_match(Variant::A); }
TEST(Gradient, VariantB) { expect_gradients_match(Variant::B); }
TEST(Gradient, VariantC) { expect_gradients_match(Variant::C); }
TEST(Gradient, VariantD) { expect_gradients_match(Variant::D); }

TEST(Gradient, AbsolutePredictionMode) {
  const auto data = toy_set();
  GNNConfig c = tiny(Variant::A);
  c.predict_increment = false;
  GNNModel m = make_model(c, 55);
  m.stats = compute_norm_stats(data, c);
  const GradCheck gc = check_gradient(m, {&data[0]}, 3);
  EXPECT_LT(gc.worst, 1e-4) << gc.where;
}

TEST(Gradient, VariantDIndependentOfMaterial) {
  const auto data = toy_set();
  GNNModel m = make_model(tiny(Variant::D), 56);
  m.stats = compute_norm_stats(data, m.config);
  std::vector<double> g1(m.num_params(), 0.0), g2(m.num_params(), 0.0);
  batch_loss(m, {&data[0], &data[1]}, Mode::Train, 1, &g1);
  m.material.E = 9000.0;
  m.material.nu = 0.2;
  batch_loss(m, {&data[0], &data[1]}, Mode::Train, 1, &g2);
  EXPECT_EQ(g1, g2);
}

TEST(Gradient, ZeroLossGivesZeroGradient) {
  // Targets are the model's own prediction.
  const auto data = toy_set();
  GNNModel m = make_model(tiny(Variant::A), 57);
  m.stats = compute_norm_stats(data, m.config);
  TrainingSample self = data[0];
  const RolloutResult r = rollout(m, make_batch(self.graph), {&self.path}, Mode::Train, 9);
  self.eps = r.eps;
  self.sig = r.sig;
  for (std::size_t t = 0; t < r.T(); ++t) self.sig_hom[t] = r.sig_hom[t][0];
  std::vector<double> g(m.num_params(), 0.0);
  const LossReport rep = batch_loss(m, {&self}, Mode::Train, 9, &g);
  EXPECT_EQ(rep.L_comb, 0.0);
  EXPECT_EQ(*std::max_element(g.begin(), g.end()), 0.0);
  EXPECT_EQ(*std::min_element(g.begin(), g.end()), 0.0);
}

TEST(Gradient, StiffnessAdjointMatchesFiniteDifference) {
  const auto data = toy_set();
  GNNModel m = make_model(tiny(Variant::A), 58);
  m.stats = compute_norm_stats(data, m.config);
  const GraphBatch b = make_batch(data[0].graph);
  const StrainPath p = make_path(Voigt3(0.3, -0.2, 0.5).normalized(), {0.01, 0.02});
  RolloutRecord rec;
  const RolloutResult r = rollout(m, b, {&p}, Mode::Infer, 0, &rec);
  // Seed the homogenized stress of the final step, component 0.
  RolloutSeeds seeds;
  seeds.sig.assign(2, Field3::Zero(b.n_nodes, 3));
  double area = 0.0;
  for (double a : b.areas) area += a;
  for (int i = 0; i < b.n_nodes; ++i) seeds.sig[1](i, 0) = b.areas[i] / area;
  std::vector<double> g(m.num_params(), 0.0);
  std::vector<std::vector<Voigt3>> dmacro;
  rollout_backward(m, b, rec, seeds, g, &dmacro);
  for (int k = 0; k < 3; ++k) {
    const double h = 1e-7;
    StrainPath pp = p, pm = p;
    pp.steps[1](k) += h;
    pm.steps[1](k) -= h;
    const double fd =
        (rollout(m, b, {&pp}, Mode::Infer).sig_hom[1][0](0) - rollout(m, b, {&pm}, Mode::Infer).sig_hom[1][0](0)) / (2 * h);
    EXPECT_NEAR(dmacro[1][0](k), fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
  (void)r;
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const auto data = toy_set();
  GNNModel m = make_model(tiny(Variant::B), 60);
  m.stats = compute_norm_stats(data, m.config);
  const GNNModel back = decode_checkpoint(encode_checkpoint(m));
  EXPECT_EQ(back.params.values(), m.params.values());
  EXPECT_EQ(back.stats.in_mean, m.stats.in_mean);
  EXPECT_EQ(back.stats.out_std, m.stats.out_std);
  EXPECT_EQ(back.stats.loss_sig_scale, m.stats.loss_sig_scale);
  EXPECT_EQ(nlohmann::json(back.config), nlohmann::json(m.config));
  const RolloutResult a = rollout(m, data[0].graph, data[0].path, Mode::Infer);
  const RolloutResult b = rollout(back, data[0].graph, data[0].path, Mode::Infer);
  EXPECT_EQ(a.eps.back(), b.eps.back());
  EXPECT_EQ(a.sig.back(), b.sig.back());

  const auto path = std::filesystem::temp_directory_path() / "microsurr_ckpt_test.ckpt";
  save_checkpoint(m, path.string());
  EXPECT_EQ(load_checkpoint(path.string()).params.values(), m.params.values());
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptMagicIsParseError) {
  std::string bytes = encode_checkpoint(make_model(tiny(Variant::A), 61));
  bytes[3] = 'X';
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
  }
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, 4)), Error);
}

TEST(Checkpoint, ShapeMismatchIsVersionMismatch) {
  const GNNModel m = make_model(tiny(Variant::A), 62);
  std::string bytes = encode_checkpoint(m);
  // Claim a wider network in the metadata than the tensors carry.
  const std::string from = "\"hidden\": 8", to = "\"hidden\": 9";
  const auto pos = bytes.find(from);
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, from.size(), to);
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::VersionMismatch);
  }
}

TEST(Checkpoint, TruncatedTensorsAreParseError) {
  const std::string bytes = encode_checkpoint(make_model(tiny(Variant::A), 63));
  try {
    decode_checkpoint(bytes.substr(0, bytes.size() - 16));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
  }
}

TEST(Fit, DeterministicLogsAndBestCheckpoint) {
  const auto data = toy_set();
  std::vector<TrainingSample> train{data[0]}, val{data[1]};
  GNNConfig g = tiny(Variant::A);
  TrainConfig t;
  t.epochs = 4;
  t.batch_size = 1;
  t.warmup_epochs = 2;
  t.seed = 5;
  const FitResult a = fit(train, val, g, t);
  const FitResult b = fit(train, val, g, t);
  ASSERT_EQ(a.log.size(), 4u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].lr, b.log[i].lr);
    EXPECT_EQ(a.log[i].train_L_comb, b.log[i].train_L_comb);
    EXPECT_EQ(a.log[i].val_L_comb, b.log[i].val_L_comb);
    EXPECT_EQ(a.log[i].val_L_hom, b.log[i].val_L_hom);
  }
  EXPECT_EQ(a.best.params.values(), b.best.params.values());
  double best = 1e300;
  for (const auto& r : a.log) best = std::min(best, r.val_L_comb);
  EXPECT_EQ(a.log[static_cast<std::size_t>(a.best_epoch)].val_L_comb, best);
  EXPECT_EQ(dataset_loss(a.best, val, Mode::Infer).L_comb, best);
}

TEST(Fit, VariantsAAndCBothLog) {
  const auto data = toy_set();
  std::vector<TrainingSample> train{data[0]}, val{data[1]};
  TrainConfig t;
  t.epochs = 2;
  t.warmup_epochs = 1;
  for (Variant v : {Variant::A, Variant::C}) {
    const FitResult r = fit(train, val, tiny(v), t);
    ASSERT_EQ(r.log.size(), 2u);
    EXPECT_TRUE(std::isfinite(r.log[1].val_L_sig));
    EXPECT_TRUE(std::isfinite(r.log[1].val_L_hom));
  }
}

TEST(Fit, LogRowFormat) {
  EpochLog e;
  e.epoch = 3;
  e.lr = 1e-4;
  const std::string row = format_log_row(e);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), std::count(kLogHeader.begin(), kLogHeader.end(), ','));
  EXPECT_EQ(row.substr(0, 2), "3,");
}
