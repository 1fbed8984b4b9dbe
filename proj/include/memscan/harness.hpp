#pragma once

// Training and evaluation engine: config plumbing, the Adam + cosine-schedule
// training loop with per-iteration logging and checkpointing, metric
// evaluation over a manifest split, a finite-difference gradient audit for
// each differentiable component, and the per-channel activity report.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "memscan/checkpoint.hpp"
#include "memscan/data.hpp"
#include "memscan/gradcheck.hpp"
#include "memscan/losses.hpp"
#include "memscan/metrics.hpp"

namespace memscan {

// ---- scalar conversion helpers ----

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& src) {
  if constexpr (std::is_same_v<T, double>) {
    return src;
  } else {
    Tensor<T> out(src.shape());
    for (std::int64_t i = 0; i < src.numel(); ++i) out[i] = static_cast<T>(src[i]);
    return out;
  }
}

template <typename T>
Tensor<double> cast_to_double(const Tensor<T>& src) {
  if constexpr (std::is_same_v<T, double>) {
    return src;
  } else {
    Tensor<double> out(src.shape());
    for (std::int64_t i = 0; i < src.numel(); ++i) out[i] = static_cast<double>(src[i]);
    return out;
  }
}

// ---- spatial padding (the model needs dims divisible by 16) ----

template <typename T>
Tensor<T> pad_replicate_to_multiple(const Tensor<T>& img, int multiple) {
  if (img.shape().ndim() != 3)
    throw ConfigError("pad_replicate_to_multiple: need {C,H,W}, got " + img.shape().str());
  int c = static_cast<int>(img.shape()[0]);
  int h = static_cast<int>(img.shape()[1]);
  int w = static_cast<int>(img.shape()[2]);
  int hp = ((h + multiple - 1) / multiple) * multiple;
  int wp = ((w + multiple - 1) / multiple) * multiple;
  if (hp == h && wp == w) return img;
  Tensor<T> out({c, hp, wp});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < hp; ++y)
      for (int x = 0; x < wp; ++x)
        out.at(ch, y, x) = img.at(ch, std::min(y, h - 1), std::min(x, w - 1));
  return out;
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& img, int h, int w) {
  int c = static_cast<int>(img.shape()[0]);
  if (img.shape()[1] == h && img.shape()[2] == w) return img;
  Tensor<T> out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = img.at(ch, y, x);
  return out;
}

// ---- training configuration ----

struct TrainConfig {
  double lr_init = 5e-4;
  double lr_final = 1e-7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::int64_t total_iters = 2000;
  int batch_size = 4;
  int patch_size = 64;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_every = 500;  // <= 0: only the final checkpoint
  std::int64_t max_steps_per_run = 0;   // session budget; 0: run to total_iters
  std::string data_dir;                 // directory holding manifest.jsonl
  std::string out_dir;                  // receives checkpoint.bin + run_log.jsonl
  std::string resume_from;              // optional checkpoint to continue from
  LossWeights loss;
  ModelConfig model;

  void validate() const {
    if (!(lr_final > 0.0) || !(lr_final <= lr_init))
      throw ConfigError("TrainConfig: need 0 < lr_final <= lr_init");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("TrainConfig: betas must lie in [0, 1)");
    if (total_iters < 0) throw ConfigError("TrainConfig: total_iters must be >= 0");
    if (max_steps_per_run < 0) throw ConfigError("TrainConfig: max_steps_per_run must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (patch_size < 16 || patch_size % 16 != 0)
      throw ConfigError("TrainConfig: patch_size must be a positive multiple of 16");
    model.validate();
  }
};

// JSON round trip for the config file. Unknown keys are rejected so typos
// fail loudly instead of silently training with defaults.
inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["lr_init"] = c.lr_init;
  j["lr_final"] = c.lr_final;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["total_iters"] = c.total_iters;
  j["batch_size"] = c.batch_size;
  j["patch_size"] = c.patch_size;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["max_steps_per_run"] = c.max_steps_per_run;
  j["data_dir"] = c.data_dir;
  j["out_dir"] = c.out_dir;
  j["resume_from"] = c.resume_from;
  j["loss"] = {{"delta_edge", c.loss.delta_edge},
               {"lambda_freq", c.loss.lambda_freq},
               {"ising_weight", c.loss.ising_weight},
               {"epsilon", c.loss.epsilon},
               {"neighborhood", c.loss.neighborhood == Neighborhood::kFour ? "four" : "eight"}};
  j["model"] = {{"base_width", c.model.base_width},
                {"n_subdecoders", c.model.n_subdecoders},
                {"chunks", c.model.chunks},
                {"bank_depth", c.model.bank_depth},
                {"state_dim", c.model.state_dim},
                {"encoder_blocks_per_scale", c.model.encoder_blocks_per_scale},
                {"decoder_blocks_per_stage", c.model.decoder_blocks_per_stage},
                {"ffn_expansion", c.model.ffn_expansion},
                {"freeze_encoder", c.model.freeze_encoder}};
  return j;
}

namespace harness_detail {

template <typename GetFn>
void apply_known_keys(const nlohmann::json& j, const std::string& scope,
                      const std::map<std::string, GetFn>& setters) {
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end())
      throw ConfigError("config: unknown key \"" + (scope.empty() ? key : scope + "." + key) +
                        "\"");
    try {
      it->second(value);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for \"" + (scope.empty() ? key : scope + "." + key) +
                        "\": " + e.what());
    }
  }
}

}  // namespace harness_detail

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  using Fn = std::function<void(const nlohmann::json&)>;
  std::map<std::string, Fn> loss_keys = {
      {"delta_edge", [&](const nlohmann::json& v) { c.loss.delta_edge = v.get<double>(); }},
      {"lambda_freq", [&](const nlohmann::json& v) { c.loss.lambda_freq = v.get<double>(); }},
      {"ising_weight", [&](const nlohmann::json& v) { c.loss.ising_weight = v.get<double>(); }},
      {"epsilon", [&](const nlohmann::json& v) { c.loss.epsilon = v.get<double>(); }},
      {"neighborhood", [&](const nlohmann::json& v) {
         std::string s = v.get<std::string>();
         if (s == "four")
           c.loss.neighborhood = Neighborhood::kFour;
         else if (s == "eight")
           c.loss.neighborhood = Neighborhood::kEight;
         else
           throw ConfigError("config: neighborhood must be \"four\" or \"eight\", got \"" + s +
                             "\"");
       }}};
  std::map<std::string, Fn> model_keys = {
      {"base_width", [&](const nlohmann::json& v) { c.model.base_width = v.get<int>(); }},
      {"n_subdecoders", [&](const nlohmann::json& v) { c.model.n_subdecoders = v.get<int>(); }},
      {"chunks", [&](const nlohmann::json& v) { c.model.chunks = v.get<int>(); }},
      {"bank_depth", [&](const nlohmann::json& v) { c.model.bank_depth = v.get<int>(); }},
      {"state_dim", [&](const nlohmann::json& v) { c.model.state_dim = v.get<int>(); }},
      {"encoder_blocks_per_scale",
       [&](const nlohmann::json& v) { c.model.encoder_blocks_per_scale = v.get<int>(); }},
      {"decoder_blocks_per_stage",
       [&](const nlohmann::json& v) { c.model.decoder_blocks_per_stage = v.get<int>(); }},
      {"ffn_expansion", [&](const nlohmann::json& v) { c.model.ffn_expansion = v.get<double>(); }},
      {"freeze_encoder",
       [&](const nlohmann::json& v) { c.model.freeze_encoder = v.get<bool>(); }}};
  std::map<std::string, Fn> top = {
      {"lr_init", [&](const nlohmann::json& v) { c.lr_init = v.get<double>(); }},
      {"lr_final", [&](const nlohmann::json& v) { c.lr_final = v.get<double>(); }},
      {"beta1", [&](const nlohmann::json& v) { c.beta1 = v.get<double>(); }},
      {"beta2", [&](const nlohmann::json& v) { c.beta2 = v.get<double>(); }},
      {"total_iters", [&](const nlohmann::json& v) { c.total_iters = v.get<std::int64_t>(); }},
      {"batch_size", [&](const nlohmann::json& v) { c.batch_size = v.get<int>(); }},
      {"patch_size", [&](const nlohmann::json& v) { c.patch_size = v.get<int>(); }},
      {"seed", [&](const nlohmann::json& v) { c.seed = v.get<std::uint64_t>(); }},
      {"checkpoint_every",
       [&](const nlohmann::json& v) { c.checkpoint_every = v.get<std::int64_t>(); }},
      {"max_steps_per_run",
       [&](const nlohmann::json& v) { c.max_steps_per_run = v.get<std::int64_t>(); }},
      {"data_dir", [&](const nlohmann::json& v) { c.data_dir = v.get<std::string>(); }},
      {"out_dir", [&](const nlohmann::json& v) { c.out_dir = v.get<std::string>(); }},
      {"resume_from", [&](const nlohmann::json& v) { c.resume_from = v.get<std::string>(); }},
      {"loss", [&](const nlohmann::json& v) { harness_detail::apply_known_keys(v, "loss", loss_keys); }},
      {"model",
       [&](const nlohmann::json& v) { harness_detail::apply_known_keys(v, "model", model_keys); }}};
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  harness_detail::apply_known_keys(j, "", top);
  return c;
}

// ---- run logging ----

struct IterRecord {
  std::int64_t step = 0;  // 0-based iteration index; lr == cosine_lr(step, total)
  double lr = 0;
  LossBreakdown loss;
  double wall_ms = 0;
};

struct SplitMetrics {
  double psnr = 0;
  double ssim = 0;
};

struct RunLog {
  std::vector<IterRecord> records;
  std::map<std::string, SplitMetrics> final_metrics;  // keyed by split name
};

inline nlohmann::json iter_record_to_json(const IterRecord& r) {
  return {{"step", r.step},
          {"lr", r.lr},
          {"wall_ms", r.wall_ms},
          {"loss",
           {{"charbonnier", r.loss.charbonnier},
            {"edge", r.loss.edge},
            {"frequency", r.loss.frequency},
            {"ising", r.loss.ising},
            {"total", r.loss.total}}}};
}

// ---- inference and evaluation ----

// Runs the model on one blurred image: pad to a legal size, forward without
// gradients, take the final sub-decoder's restored output, crop back, and
// clamp to the unit range.
template <typename T>
Tensor<double> restore_image(const Model<T>& model, const Tensor<double>& blurred) {
  if (blurred.shape().ndim() != 3 || blurred.shape()[0] != 3)
    throw ConfigError("restore_image: need a {3,H,W} image, got " + blurred.shape().str());
  int h = static_cast<int>(blurred.shape()[1]);
  int w = static_cast<int>(blurred.shape()[2]);
  Tape<T> t;
  BoundModel<T> vars = bind_model(t, model, false);
  Var img = t.input(cast_tensor<T>(pad_replicate_to_multiple(blurred, 16)), false);
  ModelOutputs out = model_forward(t, vars, model.cfg, img);
  Tensor<double> restored = crop_top_left(cast_to_double(t.val(out.restored.back())), h, w);
  for (std::int64_t i = 0; i < restored.numel(); ++i)
    restored[i] = std::clamp(restored[i], 0.0, 1.0);
  return restored;
}

// Mean PSNR/SSIM of the restored outputs over a manifest split.
template <typename T>
SplitMetrics evaluate_model(const Model<T>& model, const std::string& base_dir,
                            const std::vector<ManifestRecord>& records) {
  if (records.empty()) throw ConfigError("evaluate: empty manifest split");
  SplitMetrics m;
  for (const ManifestRecord& r : records) {
    ImagePair pair = load_pair(base_dir, r);
    Tensor<double> restored = restore_image(model, pair.blurred);
    m.psnr += psnr(restored, pair.sharp);
    m.ssim += ssim(restored, pair.sharp);
  }
  m.psnr /= static_cast<double>(records.size());
  m.ssim /= static_cast<double>(records.size());
  return m;
}

// Baseline: metrics of the degraded inputs themselves (the identity mapping).
inline SplitMetrics evaluate_identity(const std::string& base_dir,
                                      const std::vector<ManifestRecord>& records) {
  if (records.empty()) throw ConfigError("evaluate: empty manifest split");
  SplitMetrics m;
  for (const ManifestRecord& r : records) {
    ImagePair pair = load_pair(base_dir, r);
    m.psnr += psnr(pair.blurred, pair.sharp);
    m.ssim += ssim(pair.blurred, pair.sharp);
  }
  m.psnr /= static_cast<double>(records.size());
  m.ssim /= static_cast<double>(records.size());
  return m;
}

// Rebuilds the model a checkpoint was saved from: the stored config echo
// names the architecture; parameters are then loaded over a fresh instance.
template <typename T>
Model<T> model_from_checkpoint(const std::string& path, TrainConfig* cfg_out = nullptr,
                               CheckpointMeta* meta_out = nullptr) {
  CheckpointMeta peek = peek_checkpoint_meta(path);
  TrainConfig cfg;
  try {
    cfg = train_config_from_json(nlohmann::json::parse(peek.config_json));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint: config echo in " + path + " is not parseable: " + e.what());
  }
  Rng rng(cfg.seed);
  Model<T> model = Model<T>::make(cfg.model, rng);
  CheckpointMeta meta = load_checkpoint(path, model);
  if (cfg_out != nullptr) *cfg_out = cfg;
  if (meta_out != nullptr) *meta_out = meta;
  return model;
}

// ---- the training loop ----

struct TrainResult {
  RunLog log;
  std::string checkpoint_path;
  std::int64_t steps_completed = 0;
};

// Runs (or resumes) the full loop: sample a batch of aligned patches, flip-
// augment, forward every sub-decoder, average the combined loss over all
// sub-decoder outputs and batch samples, backprop, and take one Adam step at
// the cosine-annealed rate. Every iteration is logged; checkpoints are
// written periodically and at the end. A non-finite loss or gradient aborts
// by throwing NumericError, leaving the last successfully written checkpoint
// in place. `on_iter`, when set, is called with each record as it is logged.
template <typename T>
TrainResult train(const TrainConfig& cfg,
                  const std::function<void(const IterRecord&)>& on_iter = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (cfg.data_dir.empty()) throw ConfigError("train: data_dir is required");
  if (cfg.out_dir.empty()) throw ConfigError("train: out_dir is required");

  std::vector<ManifestRecord> all = load_manifest(cfg.data_dir + "/manifest.jsonl");
  std::vector<ManifestRecord> train_recs, val_recs;
  for (ManifestRecord& r : all)
    (r.split == "train" ? train_recs : val_recs).push_back(std::move(r));
  if (train_recs.empty()) throw ConfigError("train: manifest has no training records");

  std::vector<ImagePair> pairs;
  pairs.reserve(train_recs.size());
  for (const ManifestRecord& r : train_recs) {
    ImagePair p = load_pair(cfg.data_dir, r);
    if (p.sharp.shape()[1] < cfg.patch_size || p.sharp.shape()[2] < cfg.patch_size)
      throw ConfigError("train: image " + r.sharp_path + " of size " + p.sharp.shape().str() +
                        " is smaller than patch_size " + std::to_string(cfg.patch_size));
    pairs.push_back(std::move(p));
  }

  Rng rng(cfg.seed);
  Model<T> model = Model<T>::make(cfg.model, rng);
  AdamState<T> adam;
  std::int64_t start_step = 0;
  bool resuming = !cfg.resume_from.empty();
  if (resuming) {
    CheckpointMeta meta = load_checkpoint(cfg.resume_from, model, &adam);
    start_step = static_cast<std::int64_t>(meta.step);
    if (start_step > cfg.total_iters)
      throw ConfigError("train: checkpoint step " + std::to_string(start_step) +
                        " is beyond total_iters " + std::to_string(cfg.total_iters));
    if (!meta.rng_state.empty()) rng.set_state(meta.rng_state);
    // The config decides the freeze policy for THIS run, whatever the stored
    // trainable bits said (that is how stage-2 freezing starts from a
    // stage-1 checkpoint).
    model.encoder_frozen = cfg.model.freeze_encoder;
  }

  auto params_named = named_params(model);
  std::vector<Tensor<T>*> params;
  std::vector<std::string> names;
  std::vector<std::uint8_t> mask;
  for (auto& [name, ptr] : params_named) {
    params.push_back(ptr);
    names.push_back(name);
    mask.push_back(cfg.model.freeze_encoder && is_encoder_param(name) ? 0 : 1);
  }
  if (adam.empty()) adam_init(adam, params);
  AdamConfig acfg{cfg.beta1, cfg.beta2, 1e-8};

  fs::create_directories(cfg.out_dir);
  std::string log_path = cfg.out_dir + "/run_log.jsonl";
  std::ofstream log_os(log_path, resuming ? std::ios::app : std::ios::trunc);
  if (!log_os) throw IoError("train: cannot open " + log_path + " for writing");
  std::string ckpt_path = cfg.out_dir + "/checkpoint.bin";
  std::string cfg_json = train_config_to_json(cfg).dump();

  auto save = [&](std::int64_t completed) {
    CheckpointMeta meta;
    meta.step = static_cast<std::uint64_t>(completed);
    meta.config_json = cfg_json;
    meta.rng_state = rng.state();
    std::string tmp = ckpt_path + ".tmp";
    save_checkpoint(tmp, model, meta, &adam);
    fs::rename(tmp, ckpt_path);
  };

  TrainResult result;
  int n_sub = cfg.model.n_subdecoders;
  std::int64_t end_step = cfg.total_iters;
  if (cfg.max_steps_per_run > 0)
    end_step = std::min(end_step, start_step + cfg.max_steps_per_run);
  for (std::int64_t s = start_step; s < end_step; ++s) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = cosine_lr(s, cfg.total_iters, cfg.lr_init, cfg.lr_final);

    Tape<T> t;
    BoundModel<T> vars = bind_model(t, model, true);
    std::vector<Var> totals;
    LossBreakdown acc;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const ImagePair& src = pairs[rng.below(pairs.size())];
      ImagePair patch = augment_flip(sample_patch(src, cfg.patch_size, rng), rng);
      Var blurred = t.input(cast_tensor<T>(patch.blurred), false);
      Var sharp = t.input(cast_tensor<T>(patch.sharp), false);
      ModelOutputs out = model_forward(t, vars, cfg.model, blurred);
      for (int j = 0; j < n_sub; ++j) {
        LossVars lv = total_loss(t, out.restored[static_cast<std::size_t>(j)], sharp, cfg.loss);
        totals.push_back(lv.total);
        LossBreakdown lb = loss_breakdown(t, lv);
        acc.charbonnier += lb.charbonnier;
        acc.edge += lb.edge;
        acc.frequency += lb.frequency;
        acc.ising += lb.ising;
        acc.total += lb.total;
      }
    }
    double k = static_cast<double>(totals.size());
    acc.charbonnier /= k;
    acc.edge /= k;
    acc.frequency /= k;
    acc.ising /= k;
    acc.total /= k;
    if (!std::isfinite(acc.total) || !std::isfinite(acc.charbonnier) ||
        !std::isfinite(acc.edge) || !std::isfinite(acc.frequency) || !std::isfinite(acc.ising))
      throw NumericError("train: non-finite loss at step " + std::to_string(s) +
                         " (last-good checkpoint, if any, is retained)");
    Var objective =
        weighted_sum(t, totals, std::vector<T>(totals.size(), static_cast<T>(1.0 / k)));
    t.backward(objective);

    std::vector<std::pair<std::string, Var>> vnamed = named_vars(vars);
    std::vector<Tensor<T>> grads;
    grads.reserve(vnamed.size());
    for (std::size_t i = 0; i < vnamed.size(); ++i) {
      if (mask[i] && t.has_grad(vnamed[i].second))
        grads.push_back(t.grad(vnamed[i].second));
      else if (mask[i])
        grads.emplace_back(params[i]->shape());  // participated in no output: zero grad
      else
        grads.emplace_back();  // frozen: skipped by the optimizer
    }
    adam_step(params, grads, mask, adam, acfg, lr, &names);

    IterRecord rec;
    rec.step = s;
    rec.lr = lr;
    rec.loss = acc;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    result.log.records.push_back(rec);
    log_os << iter_record_to_json(rec).dump() << "\n";
    log_os.flush();
    if (on_iter) on_iter(rec);

    std::int64_t completed = s + 1;
    if (cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0) save(completed);
  }
  save(end_step);

  result.log.final_metrics["train"] = evaluate_model(model, cfg.data_dir, train_recs);
  if (!val_recs.empty())
    result.log.final_metrics["val"] = evaluate_model(model, cfg.data_dir, val_recs);
  nlohmann::json fj;
  for (const auto& [split, m] : result.log.final_metrics)
    fj[split] = {{"psnr", m.psnr}, {"ssim", m.ssim}};
  log_os << nlohmann::json{{"final", fj}}.dump() << "\n";
  log_os.flush();

  result.checkpoint_path = ckpt_path;
  result.steps_completed = end_step;
  return result;
}

// ---- gradient audit ----

struct GradcheckEntry {
  std::string name;
  double max_rel_err = 0;
  double max_abs_diff = 0;
  std::int64_t checked = 0;
  bool skipped = false;
  bool pass = true;
  std::string note;
};

struct GradcheckRunReport {
  std::string component;
  double tolerance = 1e-4;
  std::vector<GradcheckEntry> entries;
  bool pass = true;
};

inline const std::vector<std::string>& gradcheck_component_names() {
  static const std::vector<std::string> names = {"losses", "fuse", "banked", "decoder-block",
                                                 "end-to-end"};
  return names;
}

namespace harness_detail {

inline GradcheckEntry entry_from(const std::string& name, const GradCheckReport& rep) {
  GradcheckEntry e;
  e.name = name;
  e.max_rel_err = rep.max_rel_err;
  e.max_abs_diff = rep.max_abs_diff;
  e.checked = rep.checked;
  e.pass = rep.pass;
  return e;
}

}  // namespace harness_detail

// True when some adjacent pair (under the chosen neighborhood) holds exactly
// equal values — the one place the smoothness objective is not differentiable.
inline bool has_zero_neighbor_diff(const Tensor<double>& x, Neighborhood nb) {
  if (x.shape().ndim() != 3) throw ConfigError("has_zero_neighbor_diff: need {C,H,W}");
  int c = static_cast<int>(x.shape()[0]);
  int h = static_cast<int>(x.shape()[1]);
  int w = static_cast<int>(x.shape()[2]);
  std::vector<std::pair<int, int>> offs = {{0, 1}, {1, 0}};
  if (nb == Neighborhood::kEight) {
    offs.emplace_back(1, 1);
    offs.emplace_back(1, -1);
  }
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        for (auto [dy, dx] : offs) {
          int ny = y + dy, nx = xx + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (x.at(ch, y, xx) == x.at(ch, ny, nx)) return true;
        }
  return false;
}

// Finite-difference audit of the smoothness loss at a specific point. Points
// with an exactly-zero neighbor difference are flagged skipped rather than
// failed: the objective has a kink there and central differences are
// meaningless.
inline GradcheckEntry check_ising_gradient(Tensor<double> x, Neighborhood nb,
                                           const GradCheckOptions& opts = {}) {
  GradcheckEntry e;
  e.name = "smoothness";
  if (has_zero_neighbor_diff(x, nb)) {
    e.skipped = true;
    e.note = "input has an exactly-zero neighbor difference (non-smooth point)";
    return e;
  }
  Tensor<double> analytic;
  {
    Tape<double> t;
    Var vx = t.input(x, true);
    t.backward(ising_loss(t, vx, nb));
    analytic = t.grad(vx);
  }
  auto eval = [&]() {
    Tape<double> t;
    return t.val(ising_loss(t, t.input(x, false), nb))[0];
  };
  GradCheckReport rep = grad_check({&x}, {analytic}, eval, opts);
  e = harness_detail::entry_from("smoothness", rep);
  return e;
}

namespace harness_detail {

inline GradcheckRunReport gradcheck_losses(std::uint64_t seed) {
  GradcheckRunReport rep;
  rep.component = "losses";
  Rng rng(seed);
  Tensor<double> x = rng.uniform_tensor<double>({3, 6, 6}, 0.2, 0.8);
  Tensor<double> y = rng.uniform_tensor<double>({3, 6, 6}, 0.2, 0.8);
  GradCheckOptions opts;

  auto check_pair = [&](const std::string& name, auto&& make_loss) {
    Tensor<double> gx, gy;
    {
      Tape<double> t;
      Var vx = t.input(x, true);
      Var vy = t.input(y, true);
      t.backward(make_loss(t, vx, vy));
      gx = t.grad(vx);
      gy = t.grad(vy);
    }
    auto eval = [&]() {
      Tape<double> t;
      return t.val(make_loss(t, t.input(x, false), t.input(y, false)))[0];
    };
    rep.entries.push_back(entry_from(name, grad_check({&x, &y}, {gx, gy}, eval, opts)));
  };

  double eps = 1e-3;
  check_pair("pixel", [eps](Tape<double>& t, Var a, Var b) {
    return charbonnier_loss(t, a, b, eps);
  });
  check_pair("edge", [eps](Tape<double>& t, Var a, Var b) { return edge_loss(t, a, b, eps); });
  check_pair("spectral",
             [](Tape<double>& t, Var a, Var b) { return frequency_loss(t, a, b); });
  rep.entries.push_back(check_ising_gradient(x, Neighborhood::kFour, opts));

  for (const GradcheckEntry& e : rep.entries)
    if (!e.skipped && !e.pass) rep.pass = false;
  return rep;
}

// Per-tensor finite differences against a shared analytic backward pass.
// `bind_and_eval` must read the CURRENT contents of every registered tensor.
struct FdSuite {
  std::vector<std::pair<std::string, Tensor<double>*>> params;

  void add(const std::string& name, Tensor<double>& t) { params.emplace_back(name, &t); }

  template <typename BuildLoss>
  void run(GradcheckRunReport& rep, BuildLoss&& build, const GradCheckOptions& opts) {
    std::vector<Tensor<double>> analytic;
    {
      Tape<double> t;
      std::vector<Var> vars;
      for (auto& [name, p] : params) vars.push_back(t.input(*p, true));
      t.backward(build(t, vars));
      for (std::size_t i = 0; i < vars.size(); ++i)
        analytic.push_back(t.has_grad(vars[i]) ? t.grad(vars[i])
                                               : Tensor<double>(params[i].second->shape()));
    }
    auto eval = [&]() {
      Tape<double> t;
      std::vector<Var> vars;
      for (auto& [name, p] : params) vars.push_back(t.input(*p, false));
      return t.val(build(t, vars))[0];
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      GradCheckReport r = grad_check({params[i].second}, {analytic[i]},
                                     [&]() { return eval(); }, opts);
      rep.entries.push_back(entry_from(params[i].first, r));
    }
    for (const GradcheckEntry& e : rep.entries)
      if (!e.skipped && !e.pass) rep.pass = false;
  }
};

inline GradcheckRunReport gradcheck_fuse(std::uint64_t seed) {
  GradcheckRunReport rep;
  rep.component = "fuse";
  Rng rng(seed);
  int c = 6, h = 4, w = 4;
  FuseInit<double> init = FuseInit<double>::make(c, rng);
  Tensor<double> cur = rng.uniform_tensor<double>({c, h, w}, -1.0, 1.0);
  Tensor<double> e1 = rng.uniform_tensor<double>({c, h, w}, -1.0, 1.0);
  Tensor<double> e2 = rng.uniform_tensor<double>({c, h, w}, -1.0, 1.0);

  FdSuite suite;
  fuse_fields(init, [&](const std::string& n, Tensor<double>& t) { suite.add(n, t); });
  std::size_t n_weights = suite.params.size();
  suite.add("input.cur", cur);
  suite.add("input.hist0", e1);
  suite.add("input.hist1", e2);

  auto build = [&, n_weights](Tape<double>& t, const std::vector<Var>& vars) {
    FuseVars fv;
    fv.temperature = init.temperature;
    std::size_t i = 0;
    fuse_fields(fv, [&](const std::string&, Var& v) { v = vars[i++]; });
    (void)n_weights;
    Var vcur = vars[i++];
    Var v1 = vars[i++];
    Var v2 = vars[i++];
    return mean_all(t, cross_fuse(t, vcur, {v1, v2}, fv));
  };
  suite.run(rep, build, GradCheckOptions{});
  return rep;
}

inline GradcheckRunReport gradcheck_banked(std::uint64_t seed) {
  GradcheckRunReport rep;
  rep.component = "banked";
  Rng rng(seed);
  int c = 4, chunks = 2, depth = 1, state = 2, h = 4, w = 4;
  BankedScanInit<double> init = BankedScanInit<double>::make(c / chunks, state, rng);
  // Keep scan step sizes away from the tiny default for a well-conditioned check.
  init.mamba.scan.b_dt = Tensor<double>::full(init.mamba.scan.b_dt.shape(), 0.1);
  Tensor<double> x = rng.uniform_tensor<double>({c, h, w}, -1.0, 1.0);

  FdSuite suite;
  banked_fields(init, [&](const std::string& n, Tensor<double>& t) { suite.add(n, t); });
  suite.add("input", x);

  auto build = [&](Tape<double>& t, const std::vector<Var>& vars) {
    BankedScanVars bv;
    bv.mamba.scan.state_dim = state;
    bv.fuse.temperature = init.fuse.temperature;
    std::size_t i = 0;
    banked_fields(bv, [&](const std::string&, Var& v) { v = vars[i++]; });
    return mean_all(t, banked_scan(t, vars[i], chunks, depth, bv));
  };
  suite.run(rep, build, GradCheckOptions{});
  return rep;
}

inline GradcheckRunReport gradcheck_decoder_block(std::uint64_t seed) {
  GradcheckRunReport rep;
  rep.component = "decoder-block";
  Rng rng(seed);
  int c = 4, h = 4, w = 4;
  BlockConfig bc;
  bc.chunks = 2;
  bc.bank_depth = 1;
  bc.state_dim = 2;
  bc.ffn_expansion = 2.0;
  DecoderBlockInit<double> init = DecoderBlockInit<double>::make(c, bc, rng);
  init.banked.mamba.scan.b_dt = Tensor<double>::full(init.banked.mamba.scan.b_dt.shape(), 0.1);
  Tensor<double> x = rng.uniform_tensor<double>({c, h, w}, -1.0, 1.0);

  FdSuite suite;
  decoder_block_fields(init, [&](const std::string& n, Tensor<double>& t) { suite.add(n, t); });
  suite.add("input", x);

  auto build = [&](Tape<double>& t, const std::vector<Var>& vars) {
    DecoderBlockVars dv;
    dv.banked.mamba.scan.state_dim = bc.state_dim;
    dv.banked.fuse.temperature = init.banked.fuse.temperature;
    std::size_t i = 0;
    decoder_block_fields(dv, [&](const std::string&, Var& v) { v = vars[i++]; });
    return mean_all(t, decoder_block(t, vars[i], dv, bc.chunks, bc.bank_depth));
  };
  suite.run(rep, build, GradCheckOptions{});
  return rep;
}

inline GradcheckRunReport gradcheck_end_to_end(std::uint64_t seed) {
  GradcheckRunReport rep;
  rep.component = "end-to-end";
  rep.tolerance = 1e-3;
  Rng rng(seed);
  ModelConfig mc;
  mc.base_width = 8;
  mc.n_subdecoders = 1;
  mc.chunks = 2;
  mc.bank_depth = 1;
  mc.state_dim = 4;
  mc.encoder_blocks_per_scale = 1;
  mc.decoder_blocks_per_stage = 1;
  Model<double> model = Model<double>::make(mc, rng);
  Tensor<double> blurred = rng.uniform_tensor<double>({3, 16, 16}, 0.1, 0.9);
  Tensor<double> sharp = rng.uniform_tensor<double>({3, 16, 16}, 0.1, 0.9);
  LossWeights lw;

  auto objective = [&](Tape<double>& t, bool trainable, std::vector<Var>* out_vars) {
    BoundModel<double> vars = bind_model(t, model, trainable);
    if (out_vars != nullptr)
      for (auto& [n, v] : named_vars(vars)) out_vars->push_back(v);
    Var in = t.input(blurred, false);
    Var target = t.input(sharp, false);
    ModelOutputs o = model_forward(t, vars, mc, in);
    std::vector<Var> totals;
    for (Var r : o.restored) totals.push_back(total_loss(t, r, target, lw).total);
    return weighted_sum(t, totals,
                        std::vector<double>(totals.size(), 1.0 / static_cast<double>(totals.size())));
  };

  auto params_named = named_params(model);
  std::vector<Tensor<double>*> params;
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> t;
    std::vector<Var> vars;
    t.backward(objective(t, true, &vars));
    for (std::size_t i = 0; i < params_named.size(); ++i) {
      params.push_back(params_named[i].second);
      analytic.push_back(t.has_grad(vars[i]) ? t.grad(vars[i])
                                             : Tensor<double>(params_named[i].second->shape()));
    }
  }
  auto eval = [&]() {
    Tape<double> t;
    return t.val(objective(t, false, nullptr))[0];
  };
  GradCheckOptions opts;
  opts.tol = rep.tolerance;
  opts.max_entries_per_tensor = 2;  // ~1% of the parameter entries
  opts.seed = seed ^ 0x9e3779b97f4a7c15ull;
  rep.entries.push_back(entry_from("all-parameters", grad_check(params, analytic, eval, opts)));
  rep.pass = rep.entries.back().pass;
  return rep;
}

}  // namespace harness_detail

// Audits analytic gradients against central finite differences for one
// component on small random instances. Deterministic for a given seed.
inline GradcheckRunReport run_gradcheck(const std::string& component, std::uint64_t seed) {
  if (component == "losses") return harness_detail::gradcheck_losses(seed);
  if (component == "fuse") return harness_detail::gradcheck_fuse(seed);
  if (component == "banked") return harness_detail::gradcheck_banked(seed);
  if (component == "decoder-block") return harness_detail::gradcheck_decoder_block(seed);
  if (component == "end-to-end") return harness_detail::gradcheck_end_to_end(seed);
  std::string valid;
  for (const std::string& n : gradcheck_component_names()) valid += " " + n;
  throw ConfigError("gradcheck: unknown component \"" + component + "\"; valid:" + valid);
}

inline std::string gradcheck_report_text(const GradcheckRunReport& rep) {
  char buf[160];
  std::string out = "component " + rep.component + " (tolerance " +
                    std::to_string(rep.tolerance) + ")\n";
  for (const GradcheckEntry& e : rep.entries) {
    if (e.skipped) {
      out += "  SKIP " + e.name + ": " + e.note + "\n";
      continue;
    }
    std::snprintf(buf, sizeof buf, "  %s %s: max_rel_err=%.3e checked=%lld\n",
                  e.pass ? "ok  " : "FAIL", e.name.c_str(), e.max_rel_err,
                  static_cast<long long>(e.checked));
    out += buf;
  }
  out += rep.pass ? "PASS\n" : "FAIL\n";
  return out;
}

// ---- channel activity report ----

// Mean rectified activation per channel: ReLU then global average pooling.
template <typename T>
std::vector<double> channel_activation(const Tensor<T>& feat) {
  if (feat.shape().ndim() != 3)
    throw ConfigError("channel_activation: need {C,H,W}, got " + feat.shape().str());
  int c = static_cast<int>(feat.shape()[0]);
  std::int64_t hw = feat.shape()[1] * feat.shape()[2];
  std::vector<double> out(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
      double v = static_cast<double>(feat[static_cast<std::int64_t>(ch) * hw + i]);
      if (v > 0) s += v;
    }
    out[static_cast<std::size_t>(ch)] = s / static_cast<double>(hw);
  }
  return out;
}

// Every probe-able block, in forward order: "dec{j}.s{k}.blk{i}".
inline std::vector<std::string> model_block_ids(const ModelConfig& cfg) {
  std::vector<std::string> ids;
  for (int j = 0; j < cfg.n_subdecoders; ++j)
    for (int k = 3; k >= 0; --k)
      for (int i = 0; i < cfg.decoder_blocks_per_stage; ++i)
        ids.push_back("dec" + std::to_string(j) + ".s" + std::to_string(k) + ".blk" +
                      std::to_string(i));
  return ids;
}

struct ChannelReport {
  std::string block_id;
  std::vector<double> activation;  // one value per channel, averaged over probes
  double dead_threshold = 1e-3;
  std::int64_t dead_count = 0;
  std::int64_t probes = 0;
};

// Runs each probe image through the model and reports the mean per-channel
// activity of the chunked-scan output at the chosen block.
template <typename T>
ChannelReport channel_report(const Model<T>& model, const std::vector<Tensor<double>>& probes,
                             const std::string& block_id, double dead_threshold = 1e-3) {
  std::vector<std::string> ids = model_block_ids(model.cfg);
  if (std::find(ids.begin(), ids.end(), block_id) == ids.end()) {
    std::string valid;
    for (const std::string& id : ids) valid += " " + id;
    throw ConfigError("channel_report: unknown block id \"" + block_id + "\"; valid:" + valid);
  }
  if (probes.empty()) throw ConfigError("channel_report: need at least one probe image");

  ChannelReport rep;
  rep.block_id = block_id;
  rep.dead_threshold = dead_threshold;
  for (const Tensor<double>& probe : probes) {
    Tape<T> t;
    BoundModel<T> vars = bind_model(t, model, false);
    Var img = t.input(cast_tensor<T>(pad_replicate_to_multiple(probe, 16)), false);
    bool found = false;
    CaptureFn<T> cap = [&](const std::string& name, const Tensor<T>& feat) {
      if (name != block_id) return;
      std::vector<double> a = channel_activation(feat);
      if (rep.activation.empty()) rep.activation.assign(a.size(), 0.0);
      for (std::size_t i = 0; i < a.size(); ++i) rep.activation[i] += a[i];
      found = true;
    };
    model_forward(t, vars, model.cfg, img, &cap);
    if (!found)
      throw ConfigError("channel_report: block id " + block_id + " never fired during forward");
    rep.probes += 1;
  }
  for (double& a : rep.activation) a /= static_cast<double>(rep.probes);
  for (double a : rep.activation)
    if (a < rep.dead_threshold) rep.dead_count += 1;
  return rep;
}

inline std::string channel_report_csv(const ChannelReport& rep) {
  std::string out = "channel,activation\n";
  char buf[64];
  for (std::size_t i = 0; i < rep.activation.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, rep.activation[i]);
    out += buf;
  }
  return out;
}

}  // namespace memscan
