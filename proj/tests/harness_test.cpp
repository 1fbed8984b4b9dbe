#include "memscan/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/checkutil.hpp"

using namespace memscan;
using testutil::rand_t;

namespace {

std::string temp_dir(const std::string& name) {
  std::string p = ::testing::TempDir() + "memscan_harness_" + name;
  std::filesystem::create_directories(p);
  return p;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// One shared tiny dataset for the training tests.
class TrainFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_dir_ = new std::string(temp_dir("dataset"));
    GenConfig g;
    g.out_dir = *data_dir_;
    g.n_train = 2;
    g.n_val = 1;
    g.height = 48;
    g.width = 48;
    g.seed = 5;
    generate_dataset(g);
  }
  static void TearDownTestSuite() {
    std::filesystem::remove_all(*data_dir_);
    delete data_dir_;
    data_dir_ = nullptr;
  }

  static TrainConfig tiny_config(const std::string& out_name) {
    TrainConfig c;
    c.data_dir = *data_dir_;
    c.out_dir = temp_dir(out_name);
    c.total_iters = 2;
    c.batch_size = 2;
    c.patch_size = 16;
    c.seed = 9;
    c.checkpoint_every = 0;
    c.model.base_width = 4;
    c.model.n_subdecoders = 1;
    c.model.chunks = 2;
    c.model.bank_depth = 1;
    c.model.state_dim = 2;
    c.model.encoder_blocks_per_scale = 1;
    c.model.decoder_blocks_per_stage = 1;
    return c;
  }

  static std::string* data_dir_;
};

std::string* TrainFixture::data_dir_ = nullptr;

}  // namespace

// ---- schedule ----

TEST(CosineSchedule, EndpointsExactAndMidpointSymmetric) {
  EXPECT_EQ(cosine_lr(0, 2000, 5e-4, 1e-7), 5e-4);
  EXPECT_EQ(cosine_lr(2000, 2000, 5e-4, 1e-7), 1e-7);
  EXPECT_NEAR(cosine_lr(1000, 2000, 5e-4, 1e-7), (5e-4 + 1e-7) / 2.0, 1e-12);
  double prev = cosine_lr(0, 100, 5e-4, 1e-7);
  for (int s = 1; s <= 100; ++s) {
    double cur = cosine_lr(s, 100, 5e-4, 1e-7);
    EXPECT_LT(cur, prev) << "schedule must decrease monotonically";
    prev = cur;
  }
}

TEST(CosineSchedule, RejectsOutOfRangeSteps) {
  EXPECT_THROW(cosine_lr(-1, 10, 5e-4, 1e-7), ConfigError);
  EXPECT_THROW(cosine_lr(11, 10, 5e-4, 1e-7), ConfigError);
  EXPECT_THROW(cosine_lr(0, 0, 5e-4, 1e-7), ConfigError);
}

// ---- optimizer ----

TEST(Adam, OneStepOracle) {
  Tensor<double> p({1});
  p[0] = 1.0;
  std::vector<Tensor<double>*> params = {&p};
  AdamState<double> st;
  adam_init(st, params);
  Tensor<double> g({1});
  g[0] = 1.0;
  adam_step(params, {g}, {1}, st, {}, 0.1);
  // Bias-corrected m-hat / sqrt(v-hat) = 1 up to eps, so the step is ~lr.
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, ZeroGradientsLeaveEverythingAtZero) {
  Rng rng(21);
  Tensor<double> p = rand_t(rng, {3, 4});
  Tensor<double> keep = p;
  std::vector<Tensor<double>*> params = {&p};
  AdamState<double> st;
  adam_init(st, params);
  adam_step(params, {Tensor<double>({3, 4})}, {1}, st, {}, 1e-3);
  for (std::int64_t i = 0; i < p.numel(); ++i) {
    EXPECT_EQ(p[i], keep[i]);
    EXPECT_EQ(st.m[0][i], 0.0);
    EXPECT_EQ(st.v[0][i], 0.0);
  }
}

TEST(Adam, NonFiniteGradientAbortsWithParameterName) {
  Tensor<double> p({2});
  std::vector<Tensor<double>*> params = {&p};
  AdamState<double> st;
  adam_init(st, params);
  Tensor<double> g({2});
  g[1] = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> names = {"dec0.head.w"};
  try {
    adam_step(params, {g}, {1}, st, {}, 1e-3, &names);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("dec0.head.w"), std::string::npos);
  }
}

TEST(Adam, MaskedEntriesUntouched) {
  Rng rng(22);
  Tensor<double> a = rand_t(rng, {4});
  Tensor<double> b = rand_t(rng, {4});
  Tensor<double> keep_a = a;
  std::vector<Tensor<double>*> params = {&a, &b};
  AdamState<double> st;
  adam_init(st, params);
  Tensor<double> ga;  // empty: masked out, never inspected
  Tensor<double> gb = rand_t(rng, {4});
  adam_step(params, {ga, gb}, {0, 1}, st, {}, 1e-2);
  for (std::int64_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i], keep_a[i]);
    EXPECT_EQ(st.m[0][i], 0.0);
    EXPECT_NE(st.m[1][i], 0.0);
  }
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(23);
    Tensor<double> p = rand_t(rng, {8});
    std::vector<Tensor<double>*> params = {&p};
    AdamState<double> st;
    adam_init(st, params);
    for (int s = 0; s < 5; ++s) adam_step(params, {rand_t(rng, {8})}, {1}, st, {}, 1e-3);
    return p;
  };
  Tensor<double> x = run(), y = run();
  for (std::int64_t i = 0; i < 8; ++i) EXPECT_EQ(x[i], y[i]);
}

// ---- metrics ----

TEST(Metrics, PsnrClosedFormAndCap) {
  Rng rng(24);
  Tensor<double> a = rand_t(rng, {3, 12, 12}, 0.1, 0.8);
  Tensor<double> b = a;
  for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += 0.1;
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(psnr(a, a), 100.0);
  EXPECT_THROW(psnr(a, Tensor<double>({3, 12, 11})), ConfigError);
}

TEST(Metrics, SsimIdenticalIsExactlyOne) {
  Rng rng(25);
  Tensor<double> a = rand_t(rng, {3, 16, 20}, 0.0, 1.0);
  EXPECT_DOUBLE_EQ(ssim(a, a), 1.0);
}

TEST(Metrics, SsimSymmetricAndDegradedBelowOne) {
  Rng rng(26);
  Tensor<double> a = rand_t(rng, {3, 16, 16}, 0.0, 1.0);
  Tensor<double> b = rand_t(rng, {3, 16, 16}, 0.0, 1.0);
  EXPECT_DOUBLE_EQ(ssim(a, b), ssim(b, a));
  EXPECT_LT(ssim(a, b), 1.0);
  EXPECT_GE(ssim(a, b), -1.0);
  EXPECT_THROW(ssim(a, Tensor<double>({3, 16, 15})), ConfigError);
  EXPECT_THROW(ssim(Tensor<double>({3, 8, 8}), Tensor<double>({3, 8, 8})), ConfigError);
}

// ---- configuration ----

TEST(Config, JsonRoundTripPreservesEveryField) {
  TrainConfig c;
  c.lr_init = 1e-3;
  c.lr_final = 1e-6;
  c.beta1 = 0.85;
  c.beta2 = 0.98;
  c.total_iters = 123;
  c.batch_size = 3;
  c.patch_size = 32;
  c.seed = 99;
  c.checkpoint_every = 17;
  c.max_steps_per_run = 11;
  c.data_dir = "/tmp/ds";
  c.out_dir = "/tmp/out";
  c.resume_from = "/tmp/ckpt.bin";
  c.loss.delta_edge = 0.07;
  c.loss.lambda_freq = 0.2;
  c.loss.ising_weight = 0.5;
  c.loss.epsilon = 2e-3;
  c.loss.neighborhood = Neighborhood::kEight;
  c.model.base_width = 8;
  c.model.n_subdecoders = 2;
  c.model.chunks = 4;
  c.model.bank_depth = 2;
  c.model.state_dim = 6;
  c.model.encoder_blocks_per_scale = 3;
  c.model.decoder_blocks_per_stage = 1;
  c.model.ffn_expansion = 1.5;
  c.model.freeze_encoder = true;

  TrainConfig r = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(r.lr_init, c.lr_init);
  EXPECT_EQ(r.lr_final, c.lr_final);
  EXPECT_EQ(r.beta1, c.beta1);
  EXPECT_EQ(r.beta2, c.beta2);
  EXPECT_EQ(r.total_iters, c.total_iters);
  EXPECT_EQ(r.batch_size, c.batch_size);
  EXPECT_EQ(r.patch_size, c.patch_size);
  EXPECT_EQ(r.seed, c.seed);
  EXPECT_EQ(r.checkpoint_every, c.checkpoint_every);
  EXPECT_EQ(r.max_steps_per_run, c.max_steps_per_run);
  EXPECT_EQ(r.data_dir, c.data_dir);
  EXPECT_EQ(r.out_dir, c.out_dir);
  EXPECT_EQ(r.resume_from, c.resume_from);
  EXPECT_EQ(r.loss.delta_edge, c.loss.delta_edge);
  EXPECT_EQ(r.loss.lambda_freq, c.loss.lambda_freq);
  EXPECT_EQ(r.loss.ising_weight, c.loss.ising_weight);
  EXPECT_EQ(r.loss.epsilon, c.loss.epsilon);
  EXPECT_EQ(r.loss.neighborhood, c.loss.neighborhood);
  EXPECT_EQ(r.model.base_width, c.model.base_width);
  EXPECT_EQ(r.model.n_subdecoders, c.model.n_subdecoders);
  EXPECT_EQ(r.model.chunks, c.model.chunks);
  EXPECT_EQ(r.model.bank_depth, c.model.bank_depth);
  EXPECT_EQ(r.model.state_dim, c.model.state_dim);
  EXPECT_EQ(r.model.encoder_blocks_per_scale, c.model.encoder_blocks_per_scale);
  EXPECT_EQ(r.model.decoder_blocks_per_stage, c.model.decoder_blocks_per_stage);
  EXPECT_EQ(r.model.ffn_expansion, c.model.ffn_expansion);
  EXPECT_EQ(r.model.freeze_encoder, c.model.freeze_encoder);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(train_config_from_json({{"lr_int", 1e-3}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"model", {{"bank_deep", 2}}}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"loss", {{"neighborhood", "six"}}}}), ConfigError);
  EXPECT_THROW(train_config_from_json({{"batch_size", "four"}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(Config, ValidatesInvariants) {
  TrainConfig c;
  c.lr_final = 1e-3;  // larger than lr_init
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.patch_size = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---- training loop ----

TEST_F(TrainFixture, ZeroIterationsCheckpointEqualsInitialization) {
  TrainConfig cfg = tiny_config("zero_iters");
  cfg.total_iters = 0;
  TrainResult res = train<double>(cfg);
  EXPECT_TRUE(res.log.records.empty());
  EXPECT_TRUE(res.log.final_metrics.count("train"));
  EXPECT_TRUE(res.log.final_metrics.count("val"));

  Rng ref_rng(cfg.seed);
  Model<double> ref = Model<double>::make(cfg.model, ref_rng);
  Rng other(777);
  Model<double> loaded = Model<double>::make(cfg.model, other);
  CheckpointMeta meta = load_checkpoint(res.checkpoint_path, loaded);
  EXPECT_EQ(meta.step, 0u);
  EXPECT_NE(meta.config_json.find("lr_init"), std::string::npos);
  auto pr = named_params(ref);
  auto pl = named_params(loaded);
  ASSERT_EQ(pr.size(), pl.size());
  for (std::size_t i = 0; i < pr.size(); ++i)
    for (std::int64_t n = 0; n < pr[i].second->numel(); ++n)
      ASSERT_EQ((*pr[i].second)[n], (*pl[i].second)[n]) << pr[i].first;
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_F(TrainFixture, DeterministicLogFollowingTheSchedule) {
  TrainConfig a = tiny_config("det_a");
  TrainConfig b = tiny_config("det_b");
  a.total_iters = b.total_iters = 3;
  TrainResult ra = train<double>(a);
  TrainResult rb = train<double>(b);
  ASSERT_EQ(ra.log.records.size(), 3u);
  ASSERT_EQ(rb.log.records.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const IterRecord& x = ra.log.records[i];
    const IterRecord& y = rb.log.records[i];
    EXPECT_EQ(x.step, static_cast<std::int64_t>(i)) << "steps strictly increasing from 0";
    EXPECT_EQ(x.lr, cosine_lr(x.step, a.total_iters, a.lr_init, a.lr_final))
        << "logged lr must equal the schedule bitwise";
    EXPECT_EQ(x.lr, y.lr);
    EXPECT_EQ(x.loss.total, y.loss.total) << "two seeded runs must match bitwise";
    EXPECT_EQ(x.loss.charbonnier, y.loss.charbonnier);
    EXPECT_EQ(x.loss.ising, y.loss.ising);
    double recon = x.loss.charbonnier + a.loss.delta_edge * x.loss.edge +
                   a.loss.lambda_freq * x.loss.frequency + a.loss.ising_weight * x.loss.ising;
    EXPECT_NEAR(x.loss.total, recon, 1e-12) << "report must stay internally consistent";
  }
  EXPECT_EQ(ra.log.final_metrics.at("train").psnr, rb.log.final_metrics.at("train").psnr);

  // The on-disk log round-trips the same numbers and ends with final metrics.
  std::ifstream is(a.out_dir + "/run_log.jsonl");
  std::string line;
  std::vector<nlohmann::json> lines;
  while (std::getline(is, line))
    if (!line.empty()) lines.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(lines.size(), 4u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(lines[i]["step"].get<std::int64_t>(), ra.log.records[i].step);
    EXPECT_EQ(lines[i]["lr"].get<double>(), ra.log.records[i].lr);
    EXPECT_EQ(lines[i]["loss"]["total"].get<double>(), ra.log.records[i].loss.total);
  }
  EXPECT_TRUE(lines[3].contains("final"));
  EXPECT_EQ(lines[3]["final"]["train"]["psnr"].get<double>(),
            ra.log.final_metrics.at("train").psnr);
  std::filesystem::remove_all(a.out_dir);
  std::filesystem::remove_all(b.out_dir);
}

TEST_F(TrainFixture, ResumeMatchesAnUninterruptedRun) {
  TrainConfig full = tiny_config("resume_full");
  full.total_iters = 4;
  TrainResult rf = train<double>(full);

  // Same schedule horizon, but the session budget interrupts after two steps.
  TrainConfig part = tiny_config("resume_part");
  part.total_iters = 4;
  part.max_steps_per_run = 2;
  TrainResult rp1 = train<double>(part);
  ASSERT_EQ(rp1.steps_completed, 2);
  ASSERT_EQ(rp1.log.records.size(), 2u);
  TrainConfig cont = part;
  cont.max_steps_per_run = 0;
  cont.resume_from = rp1.checkpoint_path;
  TrainResult rp2 = train<double>(cont);

  ASSERT_EQ(rp2.log.records.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const IterRecord& x = rf.log.records[2 + i];
    const IterRecord& y = rp2.log.records[i];
    EXPECT_EQ(x.step, y.step);
    EXPECT_EQ(x.lr, y.lr);
    EXPECT_EQ(x.loss.total, y.loss.total) << "resumed step " << y.step << " must match bitwise";
  }
  EXPECT_EQ(rf.log.final_metrics.at("val").psnr, rp2.log.final_metrics.at("val").psnr);

  Rng r1(1), r2(2);
  Model<double> mf = Model<double>::make(full.model, r1);
  Model<double> mp = Model<double>::make(full.model, r2);
  load_checkpoint(rf.checkpoint_path, mf);
  load_checkpoint(rp2.checkpoint_path, mp);
  auto pf = named_params(mf);
  auto pp = named_params(mp);
  for (std::size_t i = 0; i < pf.size(); ++i)
    for (std::int64_t n = 0; n < pf[i].second->numel(); ++n)
      ASSERT_EQ((*pf[i].second)[n], (*pp[i].second)[n]) << pf[i].first;
  std::filesystem::remove_all(full.out_dir);
  std::filesystem::remove_all(part.out_dir);
}

TEST_F(TrainFixture, NonFiniteLossAbortsKeepingLastGoodCheckpoint) {
  TrainConfig cfg = tiny_config("nan_abort");
  cfg.total_iters = 1;
  TrainResult good = train<double>(cfg);
  std::string before = read_file(good.checkpoint_path);
  ASSERT_FALSE(before.empty());

  // Poison a copy of the checkpoint with a NaN parameter and resume from it.
  Rng rng(3);
  Model<double> m = Model<double>::make(cfg.model, rng);
  CheckpointMeta meta = load_checkpoint(good.checkpoint_path, m);
  (*named_params(m)[0].second)[0] = std::numeric_limits<double>::quiet_NaN();
  std::string poison = cfg.out_dir + "/poison.bin";
  save_checkpoint(poison, m, meta);

  TrainConfig bad = cfg;
  bad.total_iters = 2;
  bad.resume_from = poison;
  EXPECT_THROW(train<double>(bad), NumericError);
  EXPECT_EQ(read_file(good.checkpoint_path), before)
      << "the last good checkpoint must survive an aborted run";
  std::filesystem::remove_all(cfg.out_dir);
}

TEST_F(TrainFixture, FrozenStageLeavesEncoderBitIdentical) {
  TrainConfig s1 = tiny_config("stage1");
  s1.total_iters = 2;
  TrainResult r1 = train<double>(s1);

  TrainConfig s2 = tiny_config("stage2");
  s2.total_iters = 4;
  s2.resume_from = r1.checkpoint_path;
  s2.model.freeze_encoder = true;
  TrainResult r2 = train<double>(s2);

  Rng ra(1), rb(2);
  Model<double> m1 = Model<double>::make(s1.model, ra);
  Model<double> m2 = Model<double>::make(s2.model, rb);
  load_checkpoint(r1.checkpoint_path, m1);
  load_checkpoint(r2.checkpoint_path, m2);
  EXPECT_TRUE(m2.encoder_frozen);
  auto p1 = named_params(m1);
  auto p2 = named_params(m2);
  bool decoder_moved = false;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    if (is_encoder_param(p1[i].first)) {
      for (std::int64_t n = 0; n < p1[i].second->numel(); ++n)
        ASSERT_EQ((*p1[i].second)[n], (*p2[i].second)[n]) << p1[i].first;
    } else {
      for (std::int64_t n = 0; n < p1[i].second->numel(); ++n)
        if ((*p1[i].second)[n] != (*p2[i].second)[n]) decoder_moved = true;
    }
  }
  EXPECT_TRUE(decoder_moved) << "decoder parameters must keep training";
  std::filesystem::remove_all(s1.out_dir);
  std::filesystem::remove_all(s2.out_dir);
}

TEST_F(TrainFixture, RejectsBadManifestsAndConfigs) {
  // A manifest with no training records fails before touching any image.
  std::string dir = temp_dir("no_train_split");
  ManifestRecord vrec;
  vrec.sharp_path = "missing_sharp.png";
  vrec.blurred_path = "missing_blur.png";
  vrec.split = "val";
  write_manifest(dir + "/manifest.jsonl", {vrec});
  TrainConfig cfg = tiny_config("no_train_out");
  cfg.data_dir = dir;
  EXPECT_THROW(train<double>(cfg), ConfigError);

  TrainConfig nodata = tiny_config("nodata_out");
  nodata.data_dir = "";
  EXPECT_THROW(train<double>(nodata), ConfigError);

  TrainConfig huge_patch = tiny_config("huge_patch_out");
  huge_patch.patch_size = 64;  // images are 48x48
  EXPECT_THROW(train<double>(huge_patch), ConfigError);
  std::filesystem::remove_all(dir);
}

// ---- evaluation ----

TEST_F(TrainFixture, EvaluateContract) {
  TrainConfig cfg = tiny_config("eval_out");
  Rng rng(cfg.seed);
  Model<double> model = Model<double>::make(cfg.model, rng);
  std::vector<ManifestRecord> recs = load_manifest(*data_dir_ + "/manifest.jsonl");
  ASSERT_FALSE(recs.empty());

  EXPECT_THROW(evaluate_model(model, *data_dir_, {}), ConfigError);
  EXPECT_THROW(evaluate_identity(*data_dir_, {}), ConfigError);

  SplitMetrics base = evaluate_identity(*data_dir_, recs);
  EXPECT_GT(base.psnr, 5.0);
  EXPECT_LT(base.psnr, 100.0);
  EXPECT_LT(base.ssim, 1.0);

  // With the residual heads zeroed the network is the identity mapping, so
  // its metrics coincide with the baseline exactly.
  for (auto& [name, p] : named_params(model))
    if (name.find(".head.") != std::string::npos)
      for (std::int64_t i = 0; i < p->numel(); ++i) (*p)[i] = 0.0;
  SplitMetrics net = evaluate_model(model, *data_dir_, recs);
  EXPECT_DOUBLE_EQ(net.psnr, base.psnr);
  EXPECT_DOUBLE_EQ(net.ssim, base.ssim);
  std::filesystem::remove_all(cfg.out_dir);
}

TEST(RestoreImage, PadsAndCropsOddSizes) {
  ModelConfig mc;
  mc.base_width = 4;
  mc.chunks = 2;
  mc.state_dim = 2;
  mc.encoder_blocks_per_scale = 1;
  mc.decoder_blocks_per_stage = 1;
  Rng rng(31);
  Model<double> model = Model<double>::make(mc, rng);
  for (auto& [name, p] : named_params(model))
    if (name.find(".head.") != std::string::npos)
      for (std::int64_t i = 0; i < p->numel(); ++i) (*p)[i] = 0.0;
  Tensor<double> img = rand_t(rng, {3, 20, 24}, 0.0, 1.0);
  Tensor<double> out = restore_image(model, img);
  ASSERT_TRUE(out.shape() == img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i) ASSERT_EQ(out[i], img[i]);
  EXPECT_THROW(restore_image(model, Tensor<double>({1, 20, 24})), ConfigError);
}

// ---- gradient audit ----

TEST(GradcheckRunner, AllComponentsPass) {
  for (const std::string& name : gradcheck_component_names()) {
    GradcheckRunReport rep = run_gradcheck(name, 7);
    EXPECT_TRUE(rep.pass) << gradcheck_report_text(rep);
    EXPECT_FALSE(rep.entries.empty());
    for (const GradcheckEntry& e : rep.entries)
      if (!e.skipped) EXPECT_LE(e.max_rel_err, rep.tolerance) << name << "/" << e.name;
  }
}

TEST(GradcheckRunner, DeterministicGivenSeed) {
  GradcheckRunReport a = run_gradcheck("losses", 11);
  GradcheckRunReport b = run_gradcheck("losses", 11);
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i)
    EXPECT_EQ(a.entries[i].max_rel_err, b.entries[i].max_rel_err);
}

TEST(GradcheckRunner, UnknownComponentThrows) {
  EXPECT_THROW(run_gradcheck("encoder", 1), ConfigError);
}

TEST(GradcheckRunner, NonSmoothPointIsFlaggedSkipped) {
  Tensor<double> flat = Tensor<double>::full({1, 3, 3}, 0.5);
  EXPECT_TRUE(has_zero_neighbor_diff(flat, Neighborhood::kFour));
  GradcheckEntry e = check_ising_gradient(flat, Neighborhood::kFour);
  EXPECT_TRUE(e.skipped);
  EXPECT_FALSE(e.note.empty());

  Rng rng(41);
  Tensor<double> noisy = rand_t(rng, {1, 3, 3}, 0.0, 1.0);
  EXPECT_FALSE(has_zero_neighbor_diff(noisy, Neighborhood::kEight));
  GradcheckEntry ok = check_ising_gradient(noisy, Neighborhood::kFour);
  EXPECT_FALSE(ok.skipped);
  EXPECT_TRUE(ok.pass);
}

// ---- channel activity ----

TEST(ChannelActivity, ActivationOracle) {
  Tensor<double> neg = Tensor<double>::full({5, 3, 3}, -2.0);
  for (double a : channel_activation(neg)) EXPECT_EQ(a, 0.0);

  Tensor<double> pos = Tensor<double>::full({4, 2, 6}, 0.37);
  for (double a : channel_activation(pos)) EXPECT_DOUBLE_EQ(a, 0.37);

  Tensor<double> mixed({1, 1, 2});
  mixed[0] = -1.0;
  mixed[1] = 2.0;
  EXPECT_DOUBLE_EQ(channel_activation(mixed)[0], 1.0);
}

TEST(ChannelActivity, BlockIdEnumeration) {
  ModelConfig mc;
  mc.n_subdecoders = 2;
  mc.decoder_blocks_per_stage = 2;
  std::vector<std::string> ids = model_block_ids(mc);
  ASSERT_EQ(ids.size(), 16u);
  EXPECT_EQ(ids[0], "dec0.s3.blk0");
  EXPECT_EQ(ids[1], "dec0.s3.blk1");
  EXPECT_EQ(ids[7], "dec0.s0.blk1");
  EXPECT_EQ(ids[8], "dec1.s3.blk0");
}

TEST(ChannelActivity, ReportContract) {
  ModelConfig mc;
  mc.base_width = 4;
  mc.chunks = 2;
  mc.state_dim = 2;
  mc.encoder_blocks_per_scale = 1;
  mc.decoder_blocks_per_stage = 1;
  Rng rng(51);
  Model<double> model = Model<double>::make(mc, rng);
  std::vector<Tensor<double>> probes = {rand_t(rng, {3, 16, 16}, 0.0, 1.0),
                                        rand_t(rng, {3, 16, 16}, 0.0, 1.0)};

  ChannelReport rep = channel_report(model, probes, "dec0.s2.blk0");
  EXPECT_EQ(rep.activation.size(), static_cast<std::size_t>(mc.width_at(2)));
  EXPECT_EQ(rep.probes, 2);
  EXPECT_GE(rep.dead_count, 0);
  EXPECT_LE(rep.dead_count, static_cast<std::int64_t>(rep.activation.size()));
  for (double a : rep.activation) EXPECT_GE(a, 0.0);

  std::string csv = channel_report_csv(rep);
  std::size_t rows = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
  EXPECT_EQ(rows, rep.activation.size() + 1) << "header plus one row per channel";
  EXPECT_EQ(csv.rfind("channel,activation\n", 0), 0u);

  EXPECT_THROW(channel_report(model, probes, "dec0.s9.blk0"), ConfigError);
  EXPECT_THROW(channel_report(model, {}, "dec0.s2.blk0"), ConfigError);
}
