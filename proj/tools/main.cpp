// Command-line front end for the toolkit.
//
// Subcommands:
//   gen-data        synthesize a sharp/blurred dataset with a manifest
//   train           run (or resume) the training loop from a config file
//   eval            report PSNR/SSIM of a checkpoint over a manifest split
//   gradcheck       audit analytic gradients against finite differences
//   channel-report  per-channel activity of a chosen scan block, as CSV
//
// Exit codes: 0 success, 1 invalid configuration or I/O failure, 2 numeric
// failure (non-finite values, failed gradient audit).

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "memscan/harness.hpp"

namespace {

using namespace memscan;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

// ---- gen-data ----

void setup_gen_data(CLI::App& app, int& rc) {
  auto* cmd = app.add_subcommand("gen-data", "Synthesize a sharp/blurred dataset");
  auto cfg = std::make_shared<GenConfig>();
  cmd->add_option("--out", cfg->out_dir, "Output directory (will be created)")->required();
  cmd->add_option("--n-train", cfg->n_train, "Training pairs")->capture_default_str();
  cmd->add_option("--n-val", cfg->n_val, "Validation pairs")->capture_default_str();
  cmd->add_option("--height", cfg->height, "Image height in pixels")->capture_default_str();
  cmd->add_option("--width", cfg->width, "Image width in pixels")->capture_default_str();
  cmd->add_option("--noise-std", cfg->noise_std, "Gaussian noise level on blurred images")->capture_default_str();
  cmd->add_option("--seed", cfg->seed, "Generator seed")->capture_default_str();
  cmd->add_option("--format", cfg->format, "Image file format: png or ppm")->capture_default_str();
  cmd->callback([cfg, &rc]() {
    std::vector<ManifestRecord> recs = generate_dataset(*cfg);
    int n_val = 0;
    for (const ManifestRecord& r : recs) n_val += r.split == "val" ? 1 : 0;
    std::cout << "wrote " << recs.size() << " pairs (" << recs.size() - n_val << " train, "
              << n_val << " val) under " << cfg->out_dir << "\n";
    rc = 0;
  });
}

// ---- train ----

struct TrainCli {
  std::string config_path;
  std::string precision = "f64";
  long long log_every = 100;
  // Overrides; each is applied only when its flag was actually given.
  std::string data_dir, out_dir, resume_from;
  long long total_iters = 0, max_steps_per_run = 0, checkpoint_every = 0;
  int batch_size = 0, patch_size = 0;
  unsigned long long seed = 0;
  double lr_init = 0, lr_final = 0, ising_weight = 0;
  bool freeze_encoder = false, no_freeze_encoder = false;
};

template <typename T>
void run_train(const TrainConfig& cfg, long long log_every) {
  auto progress = [log_every](const IterRecord& r) {
    if (log_every > 0 && (r.step % log_every == 0)) {
      std::fprintf(stderr, "step %6lld  lr %.3e  loss %.6f  (%.0f ms)\n",
                   static_cast<long long>(r.step), r.lr, r.loss.total, r.wall_ms);
    }
  };
  TrainResult res = train<T>(cfg, progress);
  std::cout << "completed " << res.steps_completed << "/" << cfg.total_iters
            << " iterations; checkpoint: " << res.checkpoint_path << "\n";
  for (const auto& [split, m] : res.log.final_metrics)
    std::cout << split << ": psnr " << m.psnr << " dB, ssim " << m.ssim << "\n";
}

void setup_train(CLI::App& app, int& rc) {
  auto* cmd = app.add_subcommand("train", "Run or resume the training loop");
  auto cli = std::make_shared<TrainCli>();
  cmd->add_option("--config", cli->config_path, "JSON config file (see README for the schema)");
  cmd->add_option("--precision", cli->precision, "Parameter precision: f32 or f64")->capture_default_str()
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--log-every", cli->log_every, "Console progress interval (0 silences)")->capture_default_str();
  auto* o_data = cmd->add_option("--data-dir", cli->data_dir,
                                 "Dataset directory holding manifest.jsonl");
  auto* o_out = cmd->add_option("--out-dir", cli->out_dir, "Run directory for checkpoint + log");
  auto* o_resume = cmd->add_option("--resume-from", cli->resume_from,
                                   "Checkpoint to continue from");
  auto* o_iters = cmd->add_option("--total-iters", cli->total_iters,
                                  "Schedule length in iterations");
  auto* o_max = cmd->add_option("--max-steps-per-run", cli->max_steps_per_run,
                                "Stop this invocation after N new steps (0 = run to the end)");
  auto* o_ckpt = cmd->add_option("--checkpoint-every", cli->checkpoint_every,
                                 "Checkpoint interval in steps");
  auto* o_batch = cmd->add_option("--batch-size", cli->batch_size, "Patches per iteration");
  auto* o_patch = cmd->add_option("--patch-size", cli->patch_size,
                                  "Square patch side (multiple of 16)");
  auto* o_seed = cmd->add_option("--seed", cli->seed, "Run seed (init + sampling)");
  auto* o_lr0 = cmd->add_option("--lr-init", cli->lr_init, "Initial learning rate");
  auto* o_lr1 = cmd->add_option("--lr-final", cli->lr_final, "Final learning rate");
  auto* o_ising = cmd->add_option("--ising-weight", cli->ising_weight,
                                  "Structural-regularizer weight");
  cmd->add_flag("--freeze-encoder", cli->freeze_encoder,
                "Keep encoder parameters fixed (second-stage training)");
  cmd->add_flag("--no-freeze-encoder", cli->no_freeze_encoder,
                "Train the encoder even if the config froze it");
  cmd->callback([cli, o_data, o_out, o_resume, o_iters, o_max, o_ckpt, o_batch, o_patch, o_seed,
                 o_lr0, o_lr1, o_ising, &rc]() {
    TrainConfig cfg;
    if (!cli->config_path.empty()) cfg = train_config_from_json(read_json_file(cli->config_path));
    if (o_data->count()) cfg.data_dir = cli->data_dir;
    if (o_out->count()) cfg.out_dir = cli->out_dir;
    if (o_resume->count()) cfg.resume_from = cli->resume_from;
    if (o_iters->count()) cfg.total_iters = cli->total_iters;
    if (o_max->count()) cfg.max_steps_per_run = cli->max_steps_per_run;
    if (o_ckpt->count()) cfg.checkpoint_every = cli->checkpoint_every;
    if (o_batch->count()) cfg.batch_size = cli->batch_size;
    if (o_patch->count()) cfg.patch_size = cli->patch_size;
    if (o_seed->count()) cfg.seed = cli->seed;
    if (o_lr0->count()) cfg.lr_init = cli->lr_init;
    if (o_lr1->count()) cfg.lr_final = cli->lr_final;
    if (o_ising->count()) cfg.loss.ising_weight = cli->ising_weight;
    if (cli->freeze_encoder && cli->no_freeze_encoder)
      throw ConfigError("train: --freeze-encoder and --no-freeze-encoder conflict");
    if (cli->freeze_encoder) cfg.model.freeze_encoder = true;
    if (cli->no_freeze_encoder) cfg.model.freeze_encoder = false;
    if (cfg.data_dir.empty())
      throw ConfigError("train: a dataset is required (--data-dir or config data_dir)");
    if (cfg.out_dir.empty())
      throw ConfigError("train: a run directory is required (--out-dir or config out_dir)");
    if (cli->precision == "f32")
      run_train<float>(cfg, cli->log_every);
    else
      run_train<double>(cfg, cli->log_every);
    rc = 0;
  });
}

// ---- eval ----

void setup_eval(CLI::App& app, int& rc) {
  auto* cmd = app.add_subcommand("eval", "Evaluate a checkpoint over a manifest split");
  auto ckpt = std::make_shared<std::string>();
  auto data_dir = std::make_shared<std::string>();
  auto split = std::make_shared<std::string>("val");
  cmd->add_option("--checkpoint", *ckpt, "Checkpoint file")->required();
  cmd->add_option("--data-dir", *data_dir, "Dataset directory holding manifest.jsonl")
      ->required();
  cmd->add_option("--split", *split, "Manifest split: train, val, or all")->capture_default_str()
      ->check(CLI::IsMember({"train", "val", "all"}));
  cmd->callback([ckpt, data_dir, split, &rc]() {
    std::vector<ManifestRecord> recs = load_manifest(*data_dir + "/manifest.jsonl");
    std::vector<ManifestRecord> chosen;
    for (const ManifestRecord& r : recs)
      if (*split == "all" || r.split == *split) chosen.push_back(r);
    if (chosen.empty())
      throw ConfigError("eval: split \"" + *split + "\" has no records in " + *data_dir);
    Model<double> model = model_from_checkpoint<double>(*ckpt);
    SplitMetrics m = evaluate_model(model, *data_dir, chosen);
    SplitMetrics base = evaluate_identity(*data_dir, chosen);
    std::cout << "split " << *split << " (" << chosen.size() << " pairs)\n"
              << "restored: psnr " << m.psnr << " dB, ssim " << m.ssim << "\n"
              << "blurred input baseline: psnr " << base.psnr << " dB, ssim " << base.ssim
              << "\n";
    rc = 0;
  });
}

// ---- gradcheck ----

void setup_gradcheck(CLI::App& app, int& rc) {
  auto* cmd = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  auto component = std::make_shared<std::string>("all");
  auto seed = std::make_shared<unsigned long long>(0x5eed);
  cmd->add_option("--component", *component,
                  "losses, fuse, banked, decoder-block, end-to-end, or all")->capture_default_str();
  cmd->add_option("--seed", *seed, "Audit seed")->capture_default_str();
  cmd->callback([component, seed, &rc]() {
    std::vector<std::string> names;
    if (*component == "all")
      names = gradcheck_component_names();
    else
      names.push_back(*component);
    bool all_pass = true;
    for (const std::string& name : names) {
      GradcheckRunReport rep = run_gradcheck(name, *seed);
      std::cout << gradcheck_report_text(rep);
      all_pass = all_pass && rep.pass;
    }
    if (!all_pass) throw NumericError("gradcheck: at least one component failed the audit");
    rc = 0;
  });
}

// ---- channel-report ----

void setup_channel_report(CLI::App& app, int& rc) {
  auto* cmd = app.add_subcommand("channel-report",
                                 "Per-channel activity of one scan block (CSV)");
  auto ckpt = std::make_shared<std::string>();
  auto data_dir = std::make_shared<std::string>();
  auto block = std::make_shared<std::string>();
  auto out_csv = std::make_shared<std::string>();
  auto threshold = std::make_shared<double>(1e-3);
  auto n_probes = std::make_shared<int>(8);
  auto list_blocks = std::make_shared<bool>(false);
  cmd->add_option("--checkpoint", *ckpt, "Checkpoint file")->required();
  cmd->add_option("--data-dir", *data_dir, "Dataset whose blurred images serve as probes");
  cmd->add_option("--block", *block, "Block id, e.g. dec0.s3.blk0 (see --list-blocks)");
  cmd->add_option("--out", *out_csv, "CSV output path (default: stdout)");
  cmd->add_option("--threshold", *threshold, "Activation level counted as dead")->capture_default_str();
  cmd->add_option("--probes", *n_probes, "Number of probe images to average over")->capture_default_str();
  cmd->add_flag("--list-blocks", *list_blocks, "Print the valid block ids and exit");
  cmd->callback([ckpt, data_dir, block, out_csv, threshold, n_probes, list_blocks, &rc]() {
    TrainConfig cfg;
    Model<double> model = model_from_checkpoint<double>(*ckpt, &cfg);
    if (*list_blocks) {
      for (const std::string& id : model_block_ids(cfg.model)) std::cout << id << "\n";
      rc = 0;
      return;
    }
    if (block->empty())
      throw ConfigError("channel-report: --block is required (try --list-blocks)");
    if (data_dir->empty())
      throw ConfigError("channel-report: --data-dir is required to supply probe images");
    if (*n_probes < 1) throw ConfigError("channel-report: --probes must be >= 1");
    std::vector<ManifestRecord> recs = load_manifest(*data_dir + "/manifest.jsonl");
    std::vector<Tensor<double>> probes;
    for (const ManifestRecord& r : recs) {
      if (static_cast<int>(probes.size()) >= *n_probes) break;
      probes.push_back(load_pair(*data_dir, r).blurred);
    }
    ChannelReport rep = channel_report(model, probes, *block, *threshold);
    std::string csv = channel_report_csv(rep);
    if (out_csv->empty()) {
      std::cout << csv;
    } else {
      std::ofstream os(*out_csv);
      if (!os) throw IoError("channel-report: cannot open " + *out_csv);
      os << csv;
      if (!os) throw IoError("channel-report: write to " + *out_csv + " failed");
    }
    std::fprintf(stderr, "block %s: %zu channels, %lld below %g over %lld probes\n",
                 rep.block_id.c_str(), rep.activation.size(),
                 static_cast<long long>(rep.dead_count), rep.dead_threshold,
                 static_cast<long long>(rep.probes));
    rc = 0;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memscan: chunked state-space image restoration toolkit"};
  app.require_subcommand(1);
  int rc = 0;
  setup_gen_data(app, rc);
  setup_train(app, rc);
  setup_eval(app, rc);
  setup_gradcheck(app, rc);
  setup_channel_report(app, rc);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // bad flags are configuration errors
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
