#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "bodymetric/checkpoint.hpp"
#include "bodymetric/training.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace bodymetric;

namespace {

ScorerConfig tiny_scorer(std::size_t dim, std::size_t kp = kKeypointDim) {
  ScorerConfig c;
  c.dim = dim;
  c.keypoint_dim = kp;
  c.body_hidden = 8;
  c.merge_hidden = 8;
  c.regression_hidden = 4;
  return c;
}

struct SmallTask {
  bodymetric::testing::SyntheticCorpus corpus;
  bodymetric::testing::PreparedSynthetic data;
  std::vector<PreferencePair> train, val;
  std::vector<std::string> train_records;
};

SmallTask small_task(std::size_t prompts = 30) {
  bodymetric::testing::SyntheticConfig sc;
  sc.prompts = prompts;
  sc.dim = 8;
  sc.seed = 4;
  SmallTask t{bodymetric::testing::make_synthetic(sc), {}, {}, {}, {}};
  t.data = bodymetric::testing::prepare_synthetic(t.corpus, 4);
  t.train = bodymetric::testing::pairs_of_split(t.data, Split::train);
  t.val = bodymetric::testing::pairs_of_split(t.data, Split::val);
  for (const auto& r : t.data.records) {
    if (r.split == Split::train) t.train_records.push_back(r.id);
  }
  return t;
}

TrainConfig small_config(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.peak_lr = 1e-3;
  c.warmup = steps > 0 ? std::max<std::size_t>(1, steps / 10) : 0;
  c.batch = 16;
  c.eval_interval = 5;
  c.seed = 3;
  c.scorer = tiny_scorer(8);
  return c;
}

}  // namespace

TEST(BatchWeights, InverseInBatchFrequency) {
  EXPECT_EQ(batch_weights(std::vector<std::string>{"A", "B", "C"}), (Vector{1, 1, 1}));
  EXPECT_EQ(batch_weights(std::vector<std::string>{"A", "A", "B"}), (Vector{0.5, 0.5, 1}));
  EXPECT_EQ(batch_weights(std::vector<std::string>{"A", "A", "A", "A"}), (Vector{0.25, 0.25, 0.25, 0.25}));
  EXPECT_THROW(batch_weights(std::vector<std::string>{}), ContractError);
}

TEST(BatchWeights, DuplicatingAPromptsPairKeepsItsContribution) {
  // Prompt A contributes sum_i w_i L_i over its pairs; repeating its pair k times leaves that sum unchanged.
  const double loss_a = 0.7;
  for (std::size_t k = 1; k <= 6; ++k) {
    std::vector<std::string> prompts(k, "A");
    prompts.push_back("B");
    const auto w = batch_weights(prompts);
    double contribution = 0.0;
    for (std::size_t i = 0; i < k; ++i) contribution += w[i] * loss_a;
    EXPECT_NEAR(contribution, loss_a, 1e-15);
    EXPECT_EQ(w.back(), 1.0);
  }
}

TEST(RegressionLoss, ExactTargetAndHandValue) {
  auto cfg = tiny_scorer(4, 3);
  auto p = ScorerParams::zeros(cfg);
  p.temperature = 1.0;
  const Vector img{1, 2, 3, 4};
  EXPECT_EQ(regression_loss(p, img, 9.0).loss, 81.0);
  p.regression.layers[1].bias[0] = 9.0;
  EXPECT_EQ(regression_loss(p, img, 9.0).loss, 0.0);
}

TEST(RegressionLoss, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto cfg = tiny_scorer(5, 3);
  auto p = ScorerParams::initialize(cfg, 2);
  const Vector img{0.3, -1, 2, 0.5, 1};
  const auto g = regression_loss(p, img, 6.0).grads;
  auto f = [&] { return regression_loss(p, img, 6.0).loss; };
  for (std::size_t l = 0; l < p.regression.layers.size(); ++l) {
    for (std::size_t i = 0; i < p.regression.layers[l].weight.data.size(); ++i) {
      const double fd = bodymetric::testing::central_difference(f, p.regression.layers[l].weight.data[i], 1e-5);
      EXPECT_TRUE(bodymetric::testing::gradients_close(g.layers[l].weight.data[i], fd));
    }
  }
}

TEST(TextVariant, PromptsAndTargets) {
  const auto v = make_text_variant("a person dancing", 2.0);
  EXPECT_EQ(v.realistic, "a person dancing, realistic body");
  EXPECT_EQ(v.unrealistic, "a person dancing, unrealistic body");
  EXPECT_EQ(v.p, (Prob2{1.0, 0.0}));
  EXPECT_EQ(make_text_variant("x", 5.0).p, (Prob2{0.5, 0.5}));
  EXPECT_EQ(make_text_variant("x", 9.0).p, (Prob2{0.0, 1.0}));
  EXPECT_EQ(make_text_variant("x", 2.0, true).p, (Prob2{0.0, 1.0}));
}

TEST(LatentCosineLoss, ReferenceValues) {
  EXPECT_NEAR(latent_cosine_loss(Vector{1, 2}, Vector{1, 2}).loss, 0.0, 1e-15);
  EXPECT_NEAR(latent_cosine_loss(Vector{1, 0}, Vector{0, 3}).loss, 1.0, 1e-15);
  EXPECT_NEAR(latent_cosine_loss(Vector{1, 2}, Vector{-2, -4}).loss, 2.0, 1e-15);
  Vector body{0.4, -1.2, 0.3};
  const Vector img{1, 0.5, -2};
  const auto g = latent_cosine_loss(img, body).grad_body;
  auto f = [&] { return latent_cosine_loss(img, body).loss; };
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(bodymetric::testing::gradients_close(g[i], bodymetric::testing::central_difference(f, body[i], 1e-6)));
  }
}

TEST(PreferencePairLoss, TieAtEqualLogitsIsStationary) {
  auto cfg = tiny_scorer(4, 3);
  auto p = ScorerParams::initialize(cfg, 5);
  const Vector txt{1, 0.5, -1, 2}, img{0.3, 0.3, 1, -1}, kp{1, 2, 3};
  const ImageInputs same{img, kp, img};
  ScorerParams g = ScorerParams::zeros(cfg);
  const auto s = preference_pair_loss(p, PriorMode::keypoints, 1.0, txt, same, same, {0.5, 0.5}, 1.0, &g);
  EXPECT_EQ(s.logit_1, s.logit_2);
  EXPECT_EQ(s.loss, 0.0);
  EXPECT_EQ(g, ScorerParams::zeros(cfg));
}

TEST(PreferencePairLoss, GradientMatchesFiniteDifferencesForEveryPrior) {
  Rng rng(77);
  auto cfg = tiny_scorer(4, 5);
  for (PriorMode prior : {PriorMode::keypoints, PriorMode::pixel, PriorMode::latent, PriorMode::none}) {
    auto p = ScorerParams::initialize(cfg, 8);
    Vector txt(4), i1(4), i2(4), k1(5), k2(5), o1(4), o2(4);
    for (auto* v : {&txt, &i1, &i2, &k1, &k2, &o1, &o2}) {
      for (double& x : *v) x = rng.normal();
    }
    const ImageInputs a{i1, k1, o1}, b{i2, k2, o2};
    ScorerParams g = ScorerParams::zeros(cfg);
    preference_pair_loss(p, prior, 0.7, txt, a, b, {1, 0}, 0.5, &g);
    auto f = [&] { return preference_pair_loss(p, prior, 0.7, txt, a, b, {1, 0}, 0.5, nullptr).loss; };
    auto pv = p.views();
    auto gv = g.views();
    for (std::size_t t = 0; t < pv.size(); ++t) {
      for (std::size_t i = 0; i < pv[t].values.size(); ++i) {
        const double fd = bodymetric::testing::central_difference(f, pv[t].values[i], 1e-5);
        EXPECT_TRUE(bodymetric::testing::gradients_close(gv[t].values[i], fd))
            << to_string(prior) << " tensor " << t << " index " << i << ": " << gv[t].values[i] << " vs " << fd;
      }
    }
  }
}

TEST(TextVariantLoss, GradientMatchesFiniteDifferences) {
  Rng rng(78);
  auto cfg = tiny_scorer(4, 5);
  auto p = ScorerParams::initialize(cfg, 9);
  Vector tr(4), tu(4), img(4), kp(5);
  for (auto* v : {&tr, &tu, &img, &kp}) {
    for (double& x : *v) x = rng.normal();
  }
  const ImageInputs in{img, kp, img};
  ScorerParams g = ScorerParams::zeros(cfg);
  text_variant_loss(p, PriorMode::keypoints, tr, tu, in, {0, 1}, 1.0, &g);
  auto f = [&] { return text_variant_loss(p, PriorMode::keypoints, tr, tu, in, {0, 1}, 1.0, nullptr).loss; };
  auto pv = p.views();
  auto gv = g.views();
  for (std::size_t t = 0; t < pv.size(); ++t) {
    for (std::size_t i = 0; i < pv[t].values.size(); ++i) {
      EXPECT_TRUE(bodymetric::testing::gradients_close(gv[t].values[i], bodymetric::testing::central_difference(f, pv[t].values[i], 1e-5)));
    }
  }
}

TEST(Train, ZeroStepsReturnsInitialization) {
  const auto task = small_task();
  auto cfg = small_config(0);
  const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
  const auto res = train(cfg, {task.train, {}, task.val}, corpus);
  EXPECT_EQ(res.best.step, 0u);
  EXPECT_EQ(res.best.params, ScorerParams::initialize(cfg.scorer, derive_seed(cfg.seed, "init")));
  EXPECT_EQ(res.best.val_accuracy, pair_accuracy(res.best.params, cfg.scoring_mode(), corpus, task.val, 0.0));
  EXPECT_TRUE(res.losses.empty());
  ASSERT_EQ(res.validation.size(), 1u);
}

TEST(Train, DeterministicAcrossRunsAndThreadCounts) {
  const auto task = small_task();
  auto cfg = small_config(20);
  const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
  setenv("BODYMETRIC_THREADS", "1", 1);
  const auto a = train(cfg, {task.train, {}, task.val}, corpus);
  setenv("BODYMETRIC_THREADS", "4", 1);
  const auto b = train(cfg, {task.train, {}, task.val}, corpus);
  unsetenv("BODYMETRIC_THREADS");
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(serialize_checkpoint(a.best), serialize_checkpoint(b.best));
}

TEST(Train, ValidatesOnScheduleAndKeepsEarliestBest) {
  const auto task = small_task();
  auto cfg = small_config(12);
  const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
  const auto res = train(cfg, {task.train, {}, task.val}, corpus);
  std::vector<std::size_t> steps;
  for (const auto& [s, _] : res.validation) steps.push_back(s);
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 5, 10, 12}));
  double best = -1;
  std::size_t best_step = 0;
  for (const auto& [s, acc] : res.validation) {
    if (acc > best) {
      best = acc;
      best_step = s;
    }
  }
  EXPECT_EQ(res.best.step, best_step);
  EXPECT_EQ(res.best.val_accuracy, best);
  EXPECT_EQ(res.losses.size(), 12u);
}

TEST(Train, TemperatureStaysClamped) {
  const auto task = small_task();
  auto cfg = small_config(10);
  cfg.scorer.init_temperature = 99.99;
  cfg.peak_lr = 5.0;
  cfg.eval_interval = 1;
  const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
  const auto res = train(cfg, {task.train, {}, task.val}, corpus);
  EXPECT_GE(res.best.params.temperature, kMinTemperature);
  EXPECT_LE(res.best.params.temperature, kMaxTemperature);
}

TEST(Train, RegressionAndTextVariantObjectivesRun) {
  const auto task = small_task();
  for (Objective o : {Objective::regression, Objective::text_variant}) {
    auto cfg = small_config(10);
    cfg.objective = o;
    const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
    const auto res = train(cfg, {{}, task.train_records, task.val}, corpus);
    EXPECT_EQ(res.losses.size(), 10u);
    for (double l : res.losses) EXPECT_TRUE(std::isfinite(l));
  }
}

TEST(Train, RejectsEmptyValidationAndBadConfig) {
  const auto task = small_task();
  auto cfg = small_config(10);
  const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
  EXPECT_THROW(train(cfg, {task.train, {}, {}}, corpus), DataError);
  cfg.warmup = 10;
  EXPECT_THROW(train(cfg, {task.train, {}, task.val}, corpus), DomainError);
}

TEST(Train, NonFiniteLossNamesStepAndPair) {
  auto task = small_task();
  // Poison one image embedding so its logit overflows.
  EmbeddingTable img(task.corpus.stores.img.dim());
  for (const auto& id : task.corpus.stores.img.ids()) {
    auto v = task.corpus.stores.img.get(id);
    if (id == task.train.front().id_1) v.assign(v.size(), std::numeric_limits<float>::infinity());
    img.add(id, std::span<const double>(v));
  }
  task.corpus.stores.img = img;
  auto cfg = small_config(5);
  cfg.batch = task.train.size();
  const Corpus corpus(task.data.records, task.corpus.stores, cfg.scoring_mode(), cfg.scorer);
  try {
    train(cfg, {task.train, {}, task.val}, corpus);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("step 0"), std::string::npos) << what;
    EXPECT_NE(what.find(task.train.front().id_1), std::string::npos) << what;
  }
}

TEST(Train, LossDescendsOnSeparableTask) {
  bodymetric::testing::SyntheticConfig sc;
  sc.prompts = 80;
  sc.seed = 12;
  const auto corpus = bodymetric::testing::make_synthetic(sc);
  const auto data = bodymetric::testing::prepare_synthetic(corpus, 12);
  TrainConfig cfg;
  cfg.steps = 600;
  cfg.peak_lr = 1e-3;
  cfg.warmup = 100;
  cfg.batch = 64;
  cfg.eval_interval = 200;
  cfg.scorer = tiny_scorer(32);
  cfg.scorer.body_hidden = 32;
  cfg.scorer.merge_hidden = 32;
  const Corpus c(data.records, corpus.stores, cfg.scoring_mode(), cfg.scorer);
  const auto res = train(cfg,
                         {bodymetric::testing::pairs_of_split(data, Split::train), {}, bodymetric::testing::pairs_of_split(data, Split::val)},
                         c);
  std::vector<double> windows;
  for (std::size_t s = cfg.warmup; s + 100 <= res.losses.size(); s += 100) {
    windows.push_back(std::accumulate(res.losses.begin() + s, res.losses.begin() + s + 100, 0.0) / 100.0);
  }
  ASSERT_GE(windows.size(), 4u);
  for (std::size_t i = 1; i < windows.size(); ++i) {
    EXPECT_LE(windows[i], windows[i - 1] * 1.05) << "window " << i;
  }
}

TEST(Checkpoint, ByteFidelityThroughFile) {
  TrainConfig cfg = small_config(3);
  Checkpoint ck{ScorerParams::initialize(cfg.scorer, 4), cfg, 3, 0.625};
  const auto bytes = serialize_checkpoint(ck);
  const auto dir = std::filesystem::temp_directory_path() / "bodymetric_ck_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(ck, dir / "a.bmck");
  const auto loaded = load_checkpoint(dir / "a.bmck");
  save_checkpoint(loaded, dir / "b.bmck");
  EXPECT_EQ(read_file_bytes(dir / "a.bmck"), bytes);
  EXPECT_EQ(read_file_bytes(dir / "b.bmck"), bytes);
  EXPECT_EQ(loaded.config, ck.config);
  EXPECT_EQ(loaded.step, 3u);
  EXPECT_EQ(loaded.val_accuracy, 0.625);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MetadataIsCanonicalSortedJson) {
  TrainConfig cfg = small_config(3);
  const auto bytes = serialize_checkpoint({ScorerParams::initialize(cfg.scorer, 4), cfg, 0, 0.5});
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "BMCK");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
  const std::string meta(bytes.begin() + 12, bytes.begin() + 12 + len);
  const auto j = nlohmann::json::parse(meta);
  EXPECT_EQ(j.dump(), meta);
  EXPECT_LT(meta.find("\"config\""), meta.find("\"step\""));
  EXPECT_LT(meta.find("\"step\""), meta.find("\"val_accuracy\""));
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
  TrainConfig c = small_config(7);
  c.prior = PriorMode::latent;
  c.objective = Objective::text_variant;
  EXPECT_EQ(train_config_from_json(train_config_to_json(c)), c);
  auto j = train_config_to_json(c);
  j["learning_rate"] = 0.1;
  EXPECT_THROW(train_config_from_json(j), DataError);
  auto k = train_config_to_json(c);
  k["scorer"]["width"] = 3;
  EXPECT_THROW(train_config_from_json(k), DataError);
}
