#include "memscan/losses.hpp"

#include <gtest/gtest.h>

#include <functional>

#include "memscan/gradcheck.hpp"
#include "support/checkutil.hpp"
#include "support/oracles.hpp"

using namespace memscan;
using testutil::rand_t;

namespace {

GradCheckReport fd_check(std::vector<Tensor<double>*> params,
                         const std::function<double(bool, std::vector<Tensor<double>>*)>& run,
                         double tol = 1e-5) {
  std::vector<Tensor<double>> an;
  run(true, &an);
  GradCheckOptions opt;
  opt.tol = tol;
  return grad_check(params, an, [&] { return run(false, nullptr); }, opt);
}

}  // namespace

TEST(Ising, MatchesLiteralNeighborLoop) {
  Rng rng(100);
  for (int trial = 0; trial < 20; ++trial) {
    int c = 1 + static_cast<int>(rng.below(3));
    int h = 1 + static_cast<int>(rng.below(32));
    int w = 1 + static_cast<int>(rng.below(32));
    Tensor<double> x = rand_t(rng, {c, h, w}, -2.0, 2.0);
    for (Neighborhood nb : {Neighborhood::kFour, Neighborhood::kEight}) {
      double fast = ising_value(x, nb);
      double slow = testutil::ising_literal(x, nb);
      double denom = std::max({std::abs(fast), std::abs(slow), 1e-12});
      EXPECT_LE(std::abs(fast - slow) / denom, 1e-6)
          << "shape " << x.shape().str() << " nb " << static_cast<int>(nb);
    }
  }
}

TEST(Ising, ClosedForms) {
  EXPECT_DOUBLE_EQ(ising_value(Tensor<double>::full({3, 5, 7}, 1.25)), 0.0);
  EXPECT_DOUBLE_EQ(ising_value(Tensor<double>::full({1, 1, 1}, 3.0)), 0.0);
  // 2x2 checkerboard: every pixel differs from both neighbors by 1.
  Tensor<double> cb({1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
  EXPECT_NEAR(ising_value(cb, Neighborhood::kFour), 2.0, 1e-9);
  // Eight-connected adds two diagonal pairs with zero difference.
  EXPECT_NEAR(ising_value(cb, Neighborhood::kEight), 2.0, 1e-9);
}

TEST(Ising, Gradient) {
  Rng rng(101);
  // Values drawn continuously: ties (the kink of |.|) have measure zero.
  Tensor<double> x = rand_t(rng, {2, 5, 4}, -1.0, 1.0);
  for (Neighborhood nb : {Neighborhood::kFour, Neighborhood::kEight}) {
    auto run = [&](bool bw, std::vector<Tensor<double>>* g) {
      Tape<double> t;
      Var vx = t.input(x, true);
      Var obj = ising_loss(t, vx, nb);
      if (bw) {
        t.backward(obj);
        *g = {t.grad(vx)};
      }
      return t.val(obj)[0];
    };
    auto rep = fd_check({&x}, run, 1e-4);
    EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
  }
}

TEST(Charbonnier, ClosedForms) {
  Rng rng(102);
  Tensor<double> x = rand_t(rng, {2, 3, 4});
  EXPECT_NEAR(charbonnier_value(x, x, 1e-3), 1e-3, 1e-15);
  Tensor<double> y = x;
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += 3e-4;
  double expect = std::sqrt(3e-4 * 3e-4 + 1e-6);
  EXPECT_NEAR(charbonnier_value(x, y, 1e-3), expect, 1e-12);
}

TEST(Charbonnier, Gradient) {
  Rng rng(103);
  Tensor<double> x = rand_t(rng, {2, 4, 3});
  Tensor<double> y = rand_t(rng, {2, 4, 3});
  auto run = [&](bool bw, std::vector<Tensor<double>>* g) {
    Tape<double> t;
    Var vx = t.input(x, true), vy = t.input(y, true);
    Var obj = charbonnier_loss(t, vx, vy, 1e-3);
    if (bw) {
      t.backward(obj);
      *g = {t.grad(vx), t.grad(vy)};
    }
    return t.val(obj)[0];
  };
  auto rep = fd_check({&x, &y}, run, 1e-4);
  EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

TEST(EdgeLoss, MatchesLiteralLaplacian) {
  Rng rng(104);
  Tensor<double> x = rand_t(rng, {2, 6, 5});
  Tensor<double> y = rand_t(rng, {2, 6, 5});
  int h = 6, w = 5;
  std::int64_t plane = h * w;
  double acc = 0;
  for (int c = 0; c < 2; ++c) {
    auto lx = testutil::laplacian_literal(x.data() + c * plane, h, w);
    auto ly = testutil::laplacian_literal(y.data() + c * plane, h, w);
    for (std::int64_t p = 0; p < plane; ++p) {
      double d = lx[static_cast<size_t>(p)] - ly[static_cast<size_t>(p)];
      acc += std::sqrt(d * d + 1e-6);
    }
  }
  double expect = acc / static_cast<double>(x.numel());
  EXPECT_NEAR(edge_value(x, y, 1e-3), expect, 1e-12);
}

TEST(EdgeLoss, FlatImagesGiveKneeValue) {
  // The Laplacian of a constant image is identically zero (replicated
  // borders), so any two flat images score the bare knee epsilon.
  Tensor<double> a = Tensor<double>::full({3, 4, 4}, 0.8);
  Tensor<double> b = Tensor<double>::full({3, 4, 4}, 0.2);
  EXPECT_NEAR(edge_value(a, b, 1e-3), 1e-3, 1e-15);
}

TEST(EdgeLoss, Gradient) {
  Rng rng(105);
  Tensor<double> x = rand_t(rng, {1, 5, 4});
  Tensor<double> y = rand_t(rng, {1, 5, 4});
  auto run = [&](bool bw, std::vector<Tensor<double>>* g) {
    Tape<double> t;
    Var vx = t.input(x, true), vy = t.input(y, true);
    Var obj = edge_loss(t, vx, vy, 1e-3);
    if (bw) {
      t.backward(obj);
      *g = {t.grad(vx), t.grad(vy)};
    }
    return t.val(obj)[0];
  };
  auto rep = fd_check({&x, &y}, run, 1e-4);
  EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

TEST(Frequency, MatchesNaiveDft) {
  Rng rng(106);
  Tensor<double> x = rand_t(rng, {2, 6, 5});
  Tensor<double> y = rand_t(rng, {2, 6, 5});
  double fast = frequency_value(x, y);
  double slow = testutil::frequency_literal(x, y);
  EXPECT_NEAR(fast, slow, 1e-10 * std::max(1.0, slow));
}

TEST(Frequency, ConstantOffsetIsItsMagnitude) {
  Rng rng(107);
  Tensor<double> x = rand_t(rng, {3, 8, 8});
  for (double c : {0.25, -0.6}) {
    Tensor<double> y = x;
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += c;
    EXPECT_NEAR(frequency_value(x, y), std::abs(c), 1e-9);
  }
  EXPECT_DOUBLE_EQ(frequency_value(x, x), 0.0);
}

TEST(Frequency, Gradient) {
  Rng rng(108);
  Tensor<double> x = rand_t(rng, {1, 4, 5});
  Tensor<double> y = rand_t(rng, {1, 4, 5});
  auto run = [&](bool bw, std::vector<Tensor<double>>* g) {
    Tape<double> t;
    Var vx = t.input(x, true), vy = t.input(y, true);
    Var obj = frequency_loss(t, vx, vy);
    if (bw) {
      t.backward(obj);
      *g = {t.grad(vx), t.grad(vy)};
    }
    return t.val(obj)[0];
  };
  auto rep = fd_check({&x, &y}, run, 1e-4);
  EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

TEST(TotalLoss, BreakdownIsConsistent) {
  Rng rng(109);
  Tensor<double> r = rand_t(rng, {3, 8, 8}, 0.0, 1.0);
  Tensor<double> g = rand_t(rng, {3, 8, 8}, 0.0, 1.0);
  LossWeights w;
  Tape<double> t;
  LossVars v = total_loss(t, t.input(r), t.input(g), w);
  LossBreakdown b = loss_breakdown(t, v);
  double recomputed =
      b.charbonnier + w.delta_edge * b.edge + w.lambda_freq * b.frequency + w.ising_weight * b.ising;
  EXPECT_LE(std::abs(b.total - recomputed) / std::max(1e-12, std::abs(recomputed)), 1e-12);

  LossBreakdown nv = loss_report(r, g, w);
  EXPECT_NEAR(nv.charbonnier, b.charbonnier, 1e-14);
  EXPECT_NEAR(nv.edge, b.edge, 1e-14);
  EXPECT_NEAR(nv.frequency, b.frequency, 1e-14);
  EXPECT_NEAR(nv.ising, b.ising, 1e-14);
  EXPECT_NEAR(nv.total, b.total, 1e-14);
}

TEST(TotalLoss, IdenticalFlatImages) {
  // Pixel term contributes epsilon, edge term delta*epsilon, the rest zero.
  Tensor<double> img = Tensor<double>::full({3, 8, 8}, 0.5);
  LossWeights w;
  LossBreakdown b = loss_report(img, img, w);
  EXPECT_NEAR(b.total, 0.00105, 1e-9);
}

TEST(TotalLoss, Gradient) {
  Rng rng(110);
  Tensor<double> r = rand_t(rng, {2, 5, 5}, 0.0, 1.0);
  Tensor<double> g = rand_t(rng, {2, 5, 5}, 0.0, 1.0);
  LossWeights w;
  auto run = [&](bool bw, std::vector<Tensor<double>>* grads) {
    Tape<double> t;
    Var vr = t.input(r, true);
    LossVars v = total_loss(t, vr, t.input(g), w);
    if (bw) {
      t.backward(v.total);
      *grads = {t.grad(vr)};
    }
    return t.val(v.total)[0];
  };
  auto rep = fd_check({&r}, run, 1e-4);
  EXPECT_TRUE(rep.pass) << "max rel err " << rep.max_rel_err;
}

TEST(TotalLoss, EightConnectedOptionFlowsThrough) {
  Rng rng(111);
  Tensor<double> r = rand_t(rng, {1, 6, 6}, 0.0, 1.0);
  Tensor<double> g = rand_t(rng, {1, 6, 6}, 0.0, 1.0);
  LossWeights w4;
  LossWeights w8;
  w8.neighborhood = Neighborhood::kEight;
  LossBreakdown b4 = loss_report(r, g, w4);
  LossBreakdown b8 = loss_report(r, g, w8);
  EXPECT_NEAR(b8.ising, ising_value(r, Neighborhood::kEight), 1e-14);
  EXPECT_NE(b4.ising, b8.ising);
}
