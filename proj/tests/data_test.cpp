#include "memscan/data.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "memscan/image_io.hpp"
#include "support/checkutil.hpp"

using namespace memscan;
using testutil::rand_t;

namespace {

std::string temp_path(const std::string& name) {
  return ::testing::TempDir() + "memscan_data_" + name;
}

double mse(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

}  // namespace

TEST(BlurKernel, GaussianMatchesClosedForm) {
  BlurSpec spec;
  spec.kind = KernelKind::kGaussian;
  spec.kernel_size = 9;
  spec.sigma = 2.0;
  // Blur a centered delta: the center row of the result must equal the
  // normalized gaussian evaluated directly.
  Tensor<double> delta({3, 33, 33});
  for (int c = 0; c < 3; ++c) delta[(static_cast<std::int64_t>(c) * 33 + 16) * 33 + 16] = 1.0;
  ImagePair pair = make_blur_pair(delta, spec);
  double z = 0;
  for (int i = -4; i <= 4; ++i)
    for (int j = -4; j <= 4; ++j) z += std::exp(-(i * i + j * j) / (2.0 * 4.0));
  for (int dx = -4; dx <= 4; ++dx) {
    double want = std::exp(-(dx * dx) / (2.0 * 4.0)) / z;
    double got = pair.blurred[(static_cast<std::int64_t>(0) * 33 + 16) * 33 + (16 + dx)];
    ASSERT_NEAR(got, want, 1e-12) << "dx " << dx;
  }
}

TEST(BlurKernel, AlwaysSumsToOne) {
  Rng rng(70);
  for (int trial = 0; trial < 60; ++trial) {
    BlurSpec spec;
    if (rng.coin()) {
      spec.kind = KernelKind::kGaussian;
      spec.kernel_size = 1 + 2 * static_cast<int>(rng.below(9));
      spec.sigma = rng.uniform(0.5, 5.0);
    } else {
      spec.kind = KernelKind::kLinearMotion;
      spec.kernel_size = 5 + 2 * static_cast<int>(rng.below(7));
      spec.length = rng.uniform(1.0, static_cast<double>(spec.kernel_size));
      spec.angle_deg = rng.uniform(0.0, 360.0);
    }
    Tensor<double> k = blur_kernel(spec);
    double sum = 0;
    for (std::int64_t i = 0; i < k.numel(); ++i) {
      ASSERT_GE(k[i], 0.0);
      sum += k[i];
    }
    ASSERT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(BlurKernel, AxisAlignedMotionStaysOnOneLine) {
  BlurSpec spec;
  spec.kind = KernelKind::kLinearMotion;
  spec.kernel_size = 7;
  spec.length = 5.0;
  spec.angle_deg = 0.0;
  Tensor<double> k = blur_kernel(spec);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      if (i != 3) ASSERT_EQ(k.at(i, j), 0.0) << i << "," << j;
  // Symmetric about the center along the motion axis.
  for (int d = 1; d <= 3; ++d) ASSERT_NEAR(k.at(3, 3 - d), k.at(3, 3 + d), 1e-12);

  spec.angle_deg = 90.0;
  Tensor<double> kv = blur_kernel(spec);
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j)
      if (j != 3) ASSERT_LT(kv.at(i, j), 1e-12);
  for (int i = 0; i < 7; ++i) ASSERT_NEAR(kv.at(i, 3), k.at(3, i), 1e-9);
}

TEST(BlurKernel, RejectsInvalidSpecs) {
  BlurSpec even;
  even.kernel_size = 8;
  EXPECT_THROW(blur_kernel(even), ConfigError);
  BlurSpec sigma;
  sigma.sigma = 0.0;
  EXPECT_THROW(blur_kernel(sigma), ConfigError);
  BlurSpec langle;
  langle.kind = KernelKind::kLinearMotion;
  langle.kernel_size = 7;
  langle.length = 9.0;
  EXPECT_THROW(blur_kernel(langle), ConfigError);
  BlurSpec noise;
  noise.noise_std = -0.1;
  EXPECT_THROW(noise.validate(), ConfigError);
}

TEST(BlurPair, IdentityKernelIsExact) {
  Rng rng(71);
  BlurSpec spec;
  spec.kernel_size = 1;
  spec.sigma = 1.0;
  spec.noise_std = 0.0;
  Tensor<double> sharp = rand_t(rng, {3, 20, 24}, 0.0, 1.0);
  ImagePair pair = make_blur_pair(sharp, spec);
  for (std::int64_t i = 0; i < sharp.numel(); ++i) ASSERT_EQ(pair.blurred[i], sharp[i]);
}

TEST(BlurPair, ConstantImageStaysConstant) {
  Tensor<double> flat = Tensor<double>::full({3, 18, 18}, 0.37);
  for (KernelKind kind : {KernelKind::kGaussian, KernelKind::kLinearMotion}) {
    BlurSpec spec;
    spec.kind = kind;
    spec.kernel_size = 9;
    spec.sigma = 1.7;
    spec.length = 7.0;
    spec.angle_deg = 33.0;
    ImagePair pair = make_blur_pair(flat, spec);
    for (std::int64_t i = 0; i < flat.numel(); ++i) ASSERT_NEAR(pair.blurred[i], 0.37, 1e-12);
  }
}

TEST(BlurPair, NoiseIsSeededAndClipped) {
  Rng rng(72);
  Tensor<double> sharp = rand_t(rng, {3, 16, 16}, 0.0, 1.0);
  BlurSpec spec;
  spec.kernel_size = 5;
  spec.sigma = 1.5;
  spec.noise_std = 0.5;
  spec.seed = 123;
  ImagePair a = make_blur_pair(sharp, spec);
  ImagePair b = make_blur_pair(sharp, spec);
  for (std::int64_t i = 0; i < sharp.numel(); ++i) ASSERT_EQ(a.blurred[i], b.blurred[i]);
  for (std::int64_t i = 0; i < sharp.numel(); ++i) {
    ASSERT_GE(a.blurred[i], 0.0);
    ASSERT_LE(a.blurred[i], 1.0);
  }
  spec.seed = 124;
  ImagePair c = make_blur_pair(sharp, spec);
  EXPECT_GT(mse(a.blurred, c.blurred), 0.0);
  spec.noise_std = 0.0;
  ImagePair clean = make_blur_pair(sharp, spec);
  EXPECT_GT(mse(a.blurred, clean.blurred), 0.0);
}

TEST(SharpImage, StructuredReproducibleAndInRange) {
  Rng a(73), b(73), c(74);
  Tensor<double> img1 = make_sharp_image(48, 40, a);
  Tensor<double> img2 = make_sharp_image(48, 40, b);
  Tensor<double> img3 = make_sharp_image(48, 40, c);
  double mean = 0, var = 0;
  for (std::int64_t i = 0; i < img1.numel(); ++i) {
    ASSERT_EQ(img1[i], img2[i]);
    ASSERT_GE(img1[i], 0.0);
    ASSERT_LE(img1[i], 1.0);
    mean += img1[i];
  }
  mean /= static_cast<double>(img1.numel());
  for (std::int64_t i = 0; i < img1.numel(); ++i)
    var += (img1[i] - mean) * (img1[i] - mean);
  var /= static_cast<double>(img1.numel());
  EXPECT_GT(var, 1e-4) << "image should have structure";
  EXPECT_GT(mse(img1, img3), 0.0) << "different seeds should differ";
}

TEST(SamplePatch, FullSizeIsIdentity) {
  Rng rng(75);
  ImagePair pair{rand_t(rng, {3, 12, 12}), rand_t(rng, {3, 12, 12})};
  ImagePair patch = sample_patch(pair, 12, rng);
  for (std::int64_t i = 0; i < pair.sharp.numel(); ++i) {
    ASSERT_EQ(patch.sharp[i], pair.sharp[i]);
    ASSERT_EQ(patch.blurred[i], pair.blurred[i]);
  }
}

TEST(SamplePatch, CropsStayAligned) {
  // Unique per-pixel values let the offset be recovered from the patch corner;
  // the paired image is a known transform of the first.
  int h = 13, w = 17, size = 6;
  ImagePair pair{Tensor<double>({1, h, w}), Tensor<double>({1, h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      pair.sharp[static_cast<std::int64_t>(y) * w + x] = y * w + x;
      pair.blurred[static_cast<std::int64_t>(y) * w + x] = y * w + x + 1000.0;
    }
  Rng rng(76);
  for (int trial = 0; trial < 50; ++trial) {
    ImagePair patch = sample_patch(pair, size, rng);
    int corner = static_cast<int>(patch.sharp[0]);
    int oy = corner / w, ox = corner % w;
    ASSERT_LE(oy + size, h);
    ASSERT_LE(ox + size, w);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double want = (oy + y) * w + (ox + x);
        ASSERT_EQ(patch.sharp[static_cast<std::int64_t>(y) * size + x], want);
        ASSERT_EQ(patch.blurred[static_cast<std::int64_t>(y) * size + x], want + 1000.0);
      }
  }
}

TEST(SamplePatch, OffsetsAreUniform) {
  // 11x11 image with size-8 patches: a 4x4 offset grid.
  Rng rng(77);
  ImagePair pair{Tensor<double>({1, 11, 11}), Tensor<double>({1, 11, 11})};
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) pair.sharp[static_cast<std::int64_t>(y) * 11 + x] = y * 11 + x;
  pair.blurred = pair.sharp;
  int counts[16] = {0};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    ImagePair patch = sample_patch(pair, 8, rng);
    int corner = static_cast<int>(patch.sharp[0]);
    int oy = corner / 11, ox = corner % 11;
    ASSERT_LT(oy, 4);
    ASSERT_LT(ox, 4);
    counts[oy * 4 + ox]++;
  }
  double expect = draws / 16.0;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 45.0) << "chi-square too large for uniform offsets";  // 15 dof
}

TEST(SamplePatch, RejectsOversizedRequest) {
  Rng rng(78);
  ImagePair pair{Tensor<double>({3, 8, 8}), Tensor<double>({3, 8, 8})};
  EXPECT_THROW(sample_patch(pair, 9, rng), ConfigError);
  EXPECT_THROW(sample_patch(pair, 0, rng), ConfigError);
}

TEST(Flip, DoubleFlipIsIdentity) {
  Rng rng(79);
  Tensor<double> img = rand_t(rng, {3, 9, 7});
  Tensor<double> hh = flip_horizontal(flip_horizontal(img));
  Tensor<double> vv = flip_vertical(flip_vertical(img));
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    ASSERT_EQ(hh[i], img[i]);
    ASSERT_EQ(vv[i], img[i]);
  }
}

TEST(Flip, AppliedJointlyToBothImages) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // Mark one corner in both images; after augmentation the mark must sit at
    // the same position in each.
    ImagePair pair{Tensor<double>({1, 5, 5}), Tensor<double>({1, 5, 5})};
    pair.sharp[0] = 1.0;
    pair.blurred[0] = 2.0;
    Rng rng(seed);
    ImagePair out = augment_flip(pair, rng);
    int sharp_at = -1, blur_at = -1;
    for (int i = 0; i < 25; ++i) {
      if (out.sharp[i] == 1.0) sharp_at = i;
      if (out.blurred[i] == 2.0) blur_at = i;
    }
    ASSERT_GE(sharp_at, 0);
    ASSERT_EQ(sharp_at, blur_at) << "seed " << seed;
  }
}

TEST(Flip, EachAxisNearHalfProbability) {
  Rng rng(80);
  ImagePair pair{Tensor<double>({1, 2, 2}), Tensor<double>({1, 2, 2})};
  pair.sharp[0] = 1.0;  // corner marker: moves horizontally and/or vertically
  pair.blurred = pair.sharp;
  const int draws = 10000;
  int horiz = 0, vert = 0, both = 0;
  for (int i = 0; i < draws; ++i) {
    ImagePair out = augment_flip(pair, rng);
    bool fh = out.sharp[1] == 1.0 || out.sharp[3] == 1.0;
    bool fv = out.sharp[2] == 1.0 || out.sharp[3] == 1.0;
    horiz += fh;
    vert += fv;
    both += fh && fv;
  }
  EXPECT_NEAR(horiz, 5000, 150);  // 3 sigma
  EXPECT_NEAR(vert, 5000, 150);
  EXPECT_NEAR(both, 2500, 130);
}

TEST(ImageIo, PngRoundTripWithinQuantization) {
  Rng rng(81);
  Tensor<double> img = rand_t(rng, {3, 21, 17}, 0.0, 1.0);
  std::string path = temp_path("rt.png");
  save_png(path, img);
  Tensor<double> back = load_png(path);
  ASSERT_TRUE(back.shape() == img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i)
    ASSERT_LE(std::abs(back[i] - img[i]), 1.0 / 255.0);
  std::remove(path.c_str());
}

TEST(ImageIo, PpmRoundTripWithinQuantization) {
  Rng rng(82);
  Tensor<double> img = rand_t(rng, {3, 10, 30}, 0.0, 1.0);
  std::string path = temp_path("rt.ppm");
  save_ppm(path, img);
  Tensor<double> back = load_ppm(path);
  ASSERT_TRUE(back.shape() == img.shape());
  for (std::int64_t i = 0; i < img.numel(); ++i)
    ASSERT_LE(std::abs(back[i] - img[i]), 1.0 / 255.0);
  std::remove(path.c_str());
}

TEST(ImageIo, GrayscalePngExpandsToThreeChannels) {
  // Write a genuine 8-bit grayscale PNG through libpng directly.
  std::string path = temp_path("gray.png");
  const int h = 4, w = 5;
  unsigned char pix[h][w];
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) pix[y][x] = static_cast<unsigned char>(40 * y + 10 * x);
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  ASSERT_NE(fp, nullptr);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  ASSERT_EQ(setjmp(png_jmpbuf(png)), 0);
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) png_write_row(png, pix[y]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);

  Tensor<double> img = load_png(path);
  ASSERT_TRUE(img.shape() == Shape({3, h, w}));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double want = pix[y][x] / 255.0;
      for (int c = 0; c < 3; ++c) ASSERT_EQ(img.at(c, y, x), want);
    }
  std::remove(path.c_str());
}

TEST(ImageIo, RejectsBadFiles) {
  std::string missing = temp_path("missing.png");
  try {
    load_png(missing);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(missing), std::string::npos);
  }

  std::string notpng = temp_path("fake.png");
  {
    std::ofstream os(notpng, std::ios::binary);
    os << "this is not an image";
  }
  EXPECT_THROW(load_png(notpng), IoError);
  std::remove(notpng.c_str());

  std::string p5 = temp_path("gray.ppm");
  {
    std::ofstream os(p5, std::ios::binary);
    os << "P5\n2 2\n255\n"
       << "\x10\x20\x30\x40";
  }
  EXPECT_THROW(load_ppm(p5), IoError);
  std::remove(p5.c_str());

  std::string trunc = temp_path("short.ppm");
  {
    std::ofstream os(trunc, std::ios::binary);
    os << "P6\n# a comment\n3 3\n255\n"
       << "only-a-few";
  }
  EXPECT_THROW(load_ppm(trunc), IoError);
  std::remove(trunc.c_str());

  EXPECT_THROW(load_image(temp_path("img.bmp")), IoError);
}

TEST(Manifest, RecordsRoundTrip) {
  std::vector<ManifestRecord> records(2);
  records[0].sharp_path = "a_sharp.png";
  records[0].blurred_path = "a_blur.png";
  records[0].split = "train";
  records[0].spec.kind = KernelKind::kGaussian;
  records[0].spec.sigma = 2.25;
  records[0].spec.seed = 0xdeadbeefcafe;
  records[1].sharp_path = "b_sharp.ppm";
  records[1].blurred_path = "b_blur.ppm";
  records[1].split = "val";
  records[1].spec.kind = KernelKind::kLinearMotion;
  records[1].spec.kernel_size = 17;
  records[1].spec.length = 11.5;
  records[1].spec.angle_deg = 123.0;
  records[1].spec.noise_std = 0.01;

  std::string path = temp_path("manifest.jsonl");
  write_manifest(path, records);
  std::vector<ManifestRecord> back = load_manifest(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].sharp_path, records[i].sharp_path);
    EXPECT_EQ(back[i].blurred_path, records[i].blurred_path);
    EXPECT_EQ(back[i].split, records[i].split);
    EXPECT_EQ(back[i].spec.kind, records[i].spec.kind);
    EXPECT_EQ(back[i].spec.kernel_size, records[i].spec.kernel_size);
    EXPECT_EQ(back[i].spec.sigma, records[i].spec.sigma);
    EXPECT_EQ(back[i].spec.length, records[i].spec.length);
    EXPECT_EQ(back[i].spec.angle_deg, records[i].spec.angle_deg);
    EXPECT_EQ(back[i].spec.noise_std, records[i].spec.noise_std);
    EXPECT_EQ(back[i].spec.seed, records[i].spec.seed);
  }
  std::remove(path.c_str());
}

TEST(Manifest, RejectsMalformedLines) {
  std::string path = temp_path("bad_manifest.jsonl");
  {
    std::ofstream os(path);
    os << "{\"sharp\": \"a.png\"}\n";
  }
  EXPECT_THROW(load_manifest(path), IoError);
  {
    std::ofstream os(path, std::ios::trunc);
    os << "not json at all\n";
  }
  EXPECT_THROW(load_manifest(path), IoError);
  std::remove(path.c_str());
  EXPECT_THROW(load_manifest(temp_path("no_such_manifest.jsonl")), IoError);
}

TEST(Dataset, GenerateIsReproducibleAndLoadable) {
  namespace fs = std::filesystem;
  GenConfig cfg;
  cfg.out_dir = temp_path("ds_a");
  cfg.n_train = 2;
  cfg.n_val = 1;
  cfg.height = 48;
  cfg.width = 48;
  cfg.seed = 11;
  std::vector<ManifestRecord> recs = generate_dataset(cfg);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].split, "train");
  EXPECT_EQ(recs[2].split, "val");

  std::vector<ManifestRecord> loaded = load_manifest(cfg.out_dir + "/manifest.jsonl");
  ASSERT_EQ(loaded.size(), 3u);
  for (const ManifestRecord& r : loaded) {
    ImagePair pair = load_pair(cfg.out_dir, r);
    ASSERT_TRUE(pair.sharp.shape() == Shape({3, 48, 48}));
    EXPECT_GT(mse(pair.sharp, pair.blurred), 0.0) << "blur must degrade the image";
  }

  GenConfig cfg2 = cfg;
  cfg2.out_dir = temp_path("ds_b");
  generate_dataset(cfg2);
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    ImagePair a = load_pair(cfg.out_dir, loaded[i]);
    ImagePair b = load_pair(cfg2.out_dir, loaded[i]);
    for (std::int64_t n = 0; n < a.sharp.numel(); ++n) {
      ASSERT_EQ(a.sharp[n], b.sharp[n]);
      ASSERT_EQ(a.blurred[n], b.blurred[n]);
    }
  }

  GenConfig cfg3 = cfg;
  cfg3.out_dir = temp_path("ds_c");
  cfg3.seed = 12;
  generate_dataset(cfg3);
  ImagePair a0 = load_pair(cfg.out_dir, loaded[0]);
  ImagePair c0 = load_pair(cfg3.out_dir, loaded[0]);
  EXPECT_GT(mse(a0.sharp, c0.sharp), 0.0);

  fs::remove_all(cfg.out_dir);
  fs::remove_all(cfg2.out_dir);
  fs::remove_all(cfg3.out_dir);
}
