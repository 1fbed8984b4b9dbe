// End-to-end walkthrough: synthesize a tiny blur dataset, fit the restoration
// model to it for a handful of iterations, and write a before/after image
// pair next to the generated data.
//
//   ./restore_demo [workdir]   (default: ./restore_demo_out)

#include <cstdio>
#include <string>

#include "memscan/harness.hpp"

using namespace memscan;

int main(int argc, char** argv) {
  std::string work = argc > 1 ? argv[1] : "restore_demo_out";

  // 1. A few procedurally generated sharp images, each blurred by a random
  //    defocus- or streak-style kernel plus sensor noise.
  GenConfig gen;
  gen.out_dir = work + "/data";
  gen.n_train = 6;
  gen.n_val = 2;
  gen.height = gen.width = 64;
  gen.seed = 21;
  std::vector<ManifestRecord> records = generate_dataset(gen);
  std::printf("dataset: %zu pairs under %s\n", records.size(), gen.out_dir.c_str());

  // 2. A small model, trained briefly. This is a demo of the plumbing, not a
  //    convergence run; expect a modest improvement over the blurred input.
  TrainConfig cfg;
  cfg.data_dir = gen.out_dir;
  cfg.out_dir = work + "/run";
  cfg.total_iters = 60;
  cfg.batch_size = 2;
  cfg.patch_size = 32;
  cfg.seed = 3;
  cfg.checkpoint_every = 0;
  cfg.model.base_width = 8;
  cfg.model.n_subdecoders = 1;
  cfg.model.chunks = 2;
  cfg.model.bank_depth = 1;
  cfg.model.state_dim = 4;
  cfg.model.encoder_blocks_per_scale = 1;
  cfg.model.decoder_blocks_per_stage = 1;
  TrainResult result = train<float>(cfg, [](const IterRecord& r) {
    if (r.step % 20 == 0)
      std::printf("  step %3lld  loss %.5f\n", static_cast<long long>(r.step), r.loss.total);
  });
  for (const auto& [split, m] : result.log.final_metrics)
    std::printf("%s: psnr %.2f dB, ssim %.4f\n", split.c_str(), m.psnr, m.ssim);

  // 3. Restore the first validation image and write the triplet out.
  const ManifestRecord* val = nullptr;
  for (const ManifestRecord& r : records)
    if (r.split == "val") { val = &r; break; }
  ImagePair pair = load_pair(gen.out_dir, *val);
  Model<float> model = model_from_checkpoint<float>(result.checkpoint_path);
  Tensor<double> restored = restore_image(model, pair.blurred);
  save_image(work + "/blurred.png", pair.blurred);
  save_image(work + "/restored.png", restored);
  save_image(work + "/sharp.png", pair.sharp);
  std::printf("restored %s: input %.2f dB -> output %.2f dB (see %s)\n",
              val->blurred_path.c_str(), psnr(pair.blurred, pair.sharp),
              psnr(restored, pair.sharp), work.c_str());
  return 0;
}
