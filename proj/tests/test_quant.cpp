// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "bwta/quant.hpp"

using namespace bwta;

namespace {

// Reference Gaussian CDF through erfc; independent of the quantizer code.
double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("weight_sign_quantize") {
  SUBCASE("hand example") {
    const auto r = weight_sign_quantize(DenseMatrix{{1, -1}, {1, -1}});
    CHECK(r.signs == IntMatrix{{1, -1}, {1, -1}});
    CHECK(r.mean == 0.0f);
    CHECK(r.scale == doctest::Approx(0.5));
  }
  SUBCASE("ties at the mean map to +1") {
    const auto r = weight_sign_quantize(DenseMatrix{{0.3f, 0.3f}, {0.3f, 0.3f}});
    for (int v : r.signs.values()) CHECK(v == 1);
  }
  SUBCASE("scale is the Frobenius norm over the element count") {
    const auto w = random_matrix(10, 10, Normal{0, 1}, 5);
    double sq = 0.0;
    for (float x : w.values()) sq += double(x) * x;
    const auto r = weight_sign_quantize(w);
    CHECK(r.scale == doctest::Approx(std::sqrt(sq) / 100.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(weight_sign_quantize(DenseMatrix{}), std::invalid_argument);
}

TEST_CASE("activation_scale_init") {
  CHECK(activation_scale_init(DenseMatrix{{1, -1, 1, -1}}) == doctest::Approx(2.0));
  const auto a = random_matrix(8, 8, Normal{0, 1}, 3);
  DenseMatrix a3 = a;
  for (auto& x : a3.values()) x *= 3.0f;
  CHECK(activation_scale_init(a3) == doctest::Approx(3.0 * activation_scale_init(a)).epsilon(1e-5));
  CHECK_THROWS_AS(activation_scale_init(DenseMatrix(2, 2, 0.0f)), std::invalid_argument);

  const auto big = random_matrix(1000, 1000, Normal{0, 1}, 11);
  CHECK(activation_scale_init(big) == doctest::Approx(2.0 * std::sqrt(2.0 / M_PI)).epsilon(0.01 / 1.596));
}

TEST_CASE("quantize hand examples") {
  const QuantState tern(1.0f, QuantMode::ternary());
  CHECK(quantize(DenseMatrix{{0.6f, 0.3f, -0.7f, -0.5f}}, tern) == IntMatrix{{1, 0, -1, -1}});

  const QuantState boolean(1.0f, QuantMode::boolean());
  CHECK(quantize(DenseMatrix{{0.49f, 0.5f, 2.3f}}, boolean) == IntMatrix{{0, 1, 1}});

  const QuantState l4(0.5f, QuantMode::levelwise(4));
  CHECK(quantize(DenseMatrix{{2.3f, -0.24f}}, l4) == IntMatrix{{4, 0}});

  const QuantState sign(1.0f, QuantMode::sign_binary());
  CHECK(quantize(DenseMatrix{{0.0f, -0.1f, 3.0f}}, sign) == IntMatrix{{1, -1, 1}});
}

TEST_CASE("quantize output stays on the mode's grid") {
  const auto a = random_matrix(40, 40, Normal{0, 3}, 21);
  for (int L : {1, 2, 3, 4, 7}) {
    for (auto mode : {QuantMode::levelwise(L), QuantMode::unsigned_levels(L)}) {
      const auto q = quantize(a, QuantState(0.7f, mode));
      for (int v : q.values()) CHECK((v >= mode.lo() && v <= mode.hi()));
    }
  }
  for (int v : quantize(a, QuantState(1.0f, QuantMode::sign_binary())).values())
    CHECK((v == 1 || v == -1));
}

TEST_CASE("quantize is scale-equivariant") {
  const auto a = random_matrix(20, 20, Normal{0, 1}, 4);
  for (float c : {0.25f, 2.0f, 8.0f}) {  // powers of two keep A/s bit-identical
    DenseMatrix ac = a;
    for (auto& x : ac.values()) x *= c;
    for (int L : {1, 3}) {
      CHECK(quantize(ac, QuantState(0.6f * c, QuantMode::levelwise(L))) ==
            quantize(a, QuantState(0.6f, QuantMode::levelwise(L))));
    }
  }
}

TEST_CASE("dequantize") {
  const QuantState s(0.5f, QuantMode::ternary());
  CHECK(dequantize(IntMatrix{{1, 0, -1}}, s) == DenseMatrix{{0.5f, 0.0f, -0.5f}});
  CHECK(dequantize(IntMatrix(3, 3, 0), QuantState(7.0f, QuantMode::ternary())) == DenseMatrix(3, 3, 0.0f));
  CHECK_THROWS_AS(dequantize(IntMatrix{{2}}, s), std::invalid_argument);
  CHECK_THROWS_AS(dequantize(IntMatrix{{-1}}, QuantState(1.0f, QuantMode::boolean())), std::invalid_argument);
  CHECK_THROWS_AS(dequantize(IntMatrix{{0}}, QuantState(1.0f, QuantMode::sign_binary())), std::invalid_argument);

  // Round-trip error is at most s/2 inside the representable range.
  const auto a = random_matrix(30, 30, Uniform{-1.39, 1.39}, 8);
  const QuantState l3(0.4f, QuantMode::levelwise(3));
  const auto back = dequantize(quantize(a, l3), l3);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(back[i] - a[i]) <= 0.2f + 1e-6f);
  CHECK(fake_quantize(a, l3) == back);
}

TEST_CASE("scale floor") {
  QuantState s(1.0f, QuantMode::ternary());
  s.set_scale(-3.0f);
  CHECK(s.scale == kScaleFloor);
  s.set_scale(0.25f);
  CHECK(s.scale == 0.25f);
  CHECK_THROWS_AS(QuantState(0.0f, QuantMode::ternary()), std::invalid_argument);
}

TEST_CASE("ste_backward on plateaus and clip regions") {
  const QuantState s(1.0f, QuantMode::ternary(), false);
  const auto g = ste_backward(DenseMatrix{{0.1f, 5.0f, -5.0f}}, s, DenseMatrix{{2.0f, 3.0f, 4.0f}});
  CHECK(g.grad_input == DenseMatrix{{2.0f, 0.0f, 0.0f}});
  // d = -0.1, +1, -1
  CHECK(g.grad_scale == doctest::Approx(2.0 * -0.1 + 3.0 * 1 + 4.0 * -1));

  const QuantState sn(1.0f, QuantMode::ternary(), true);
  const auto gn = ste_backward(DenseMatrix{{0.1f, 5.0f, -5.0f}}, sn, DenseMatrix{{2.0f, 3.0f, 4.0f}});
  CHECK(gn.grad_scale == doctest::Approx(g.grad_scale / std::sqrt(3.0)));

  CHECK_THROWS_AS(ste_backward(DenseMatrix(1, 2), s, DenseMatrix(2, 1)), std::invalid_argument);
}

TEST_CASE("ste gradA is upstream exactly where unclipped") {
  const auto a = random_matrix(16, 16, Normal{0, 2}, 13);
  const auto up = random_matrix(16, 16, Normal{0, 1}, 14);
  for (auto mode : {QuantMode::ternary(), QuantMode::levelwise(3), QuantMode::boolean()}) {
    const QuantState st(0.8f, mode);
    const auto g = ste_backward(a, st, up);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const float v = a[i] / st.scale;
      const bool inside = v >= mode.lo() && v <= mode.hi();
      CHECK(g.grad_input[i] == (inside ? up[i] : 0.0f));
    }
  }
}

TEST_CASE("ste scale gradient matches central differences of the surrogate") {
  // Surrogate: s * (clip(A/s) + frozen residual). Central difference in
  // double precision, away from rounding and clip boundaries.
  for (int L : {1, 2, 4}) {
    for (auto mode : {QuantMode::levelwise(L), QuantMode::unsigned_levels(L)}) {
      std::uint64_t seed = 100 + L;
      DenseMatrix a;
      QuantState st(0.6f, mode, false);
      do {
        a = random_matrix(12, 12, Normal{0, 1.2}, seed++);
      } while (boundary_margin(a, st, true) < 5e-3f);  // step moves v by <= 1e-3 * |v|
      const auto up = random_matrix(12, 12, Normal{0, 1}, seed + 1000);
      const auto residual = rounding_residual(a, st);

      auto surrogate = [&](double s) {
        double total = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double c = std::clamp(double(a[i]) / s, double(mode.lo()), double(mode.hi()));
          total += up[i] * s * (c + residual[i]);
        }
        return total;
      };
      const double h = 1e-3 * st.scale;
      const double fd = (surrogate(st.scale + h) - surrogate(st.scale - h)) / (2 * h);
      const auto g = ste_backward(a, st, up);
      CAPTURE(mode.name());
      CHECK(g.grad_scale == doctest::Approx(fd).epsilon(1e-3));

      // With the plateau held, the surrogate equals the true fake-quantizer.
      const auto sur = surrogate_dequantize(a, st, residual);
      const auto fq = fake_quantize(a, st);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(sur[i] == doctest::Approx(fq[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("ternary zero fraction of Gaussian data matches the Gaussian CDF") {
  const auto a = random_matrix(1000, 100, Normal{0, 1}, 2024);
  const QuantState st(activation_scale_init(a), QuantMode::ternary());
  const auto q = quantize(a, st);
  std::size_t zeros = 0;
  for (int v : q.values()) zeros += v == 0;
  const double frac = double(zeros) / double(q.size());
  const double analytic = 2.0 * phi(0.5 * 2.0 * std::sqrt(2.0 / M_PI)) - 1.0;
  CHECK(analytic == doctest::Approx(0.575).epsilon(0.001));
  CHECK(std::fabs(frac - 0.575) < 0.02);
}
