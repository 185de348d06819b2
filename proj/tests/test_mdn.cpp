#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "owdf/mdn.hpp"

using namespace owdf;
using namespace owdf::mdn;

namespace {

MixtureParams random_mixture(Rng& rng, int k) {
  std::vector<double> raw;
  for (int i = 0; i < 3 * k; ++i) raw.push_back(rng.uniform(-2.0, 2.0));
  return to_mixture(raw);
}

// direct density summation, no log-space tricks; extended precision keeps the
// oracle honest where narrow components underflow double range
long double direct_pdf(const MixtureParams& m, double y) {
  long double p = 0;
  for (int i = 0; i < m.components(); ++i) {
    long double s = m.sigma[static_cast<std::size_t>(i)];
    long double z = (static_cast<long double>(y) -
                     m.mu[static_cast<std::size_t>(i)]) / s;
    p += m.w[static_cast<std::size_t>(i)] * expl(-0.5L * z * z) /
         (s * sqrtl(2.0L * static_cast<long double>(M_PI)));
  }
  return p;
}

}  // namespace

TEST_CASE("to_mixture: simplex weights, softplus-floored scales") {
  std::vector<double> raw{0.3, -1.2, 2.0, /*mu*/ 1.0, -0.5, 0.0,
                          /*sigma raw*/ -3.0, 0.0, 4.0};
  MixtureParams m = to_mixture(raw);
  REQUIRE(m.components() == 3);
  double sum = m.w[0] + m.w[1] + m.w[2];
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
  for (double w : m.w) REQUIRE(w > 0.0);
  REQUIRE(m.mu[0] == 1.0);
  for (int i = 0; i < 3; ++i) {
    double expect = std::log1p(std::exp(raw[static_cast<std::size_t>(6 + i)])) + kSigmaFloor;
    REQUIRE(m.sigma[static_cast<std::size_t>(i)] ==
            Catch::Approx(expect).margin(1e-12));
  }
  REQUIRE_THROWS_AS(to_mixture({1.0, 2.0}), ShapeError);
}

TEST_CASE("log_prob matches the direct summation oracle on 1000 mixtures") {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    int k = 1 + static_cast<int>(rng.next_below(8));
    MixtureParams m = random_mixture(rng, k);
    double y = rng.uniform(-4.0, 4.0);
    double expect = static_cast<double>(logl(direct_pdf(m, y)));
    REQUIRE(std::fabs(log_prob(m, y) - expect) < 1e-10);
  }
}

TEST_CASE("standard normal density value") {
  MixtureParams m;
  m.w = {1.0};
  m.mu = {0.0};
  m.sigma = {1.0};
  REQUIRE(log_prob(m, 0.0) == Catch::Approx(-kHalfLog2Pi).margin(1e-14));
}

TEST_CASE("density integrates to one") {
  Rng rng(102);
  for (int trial = 0; trial < 5; ++trial) {
    MixtureParams m = random_mixture(rng, 4);
    // Simpson over a wide bracket
    double lo = -40, hi = 40;
    int n = 200000;
    double h = (hi - lo) / n;
    long double acc = direct_pdf(m, lo) + direct_pdf(m, hi);
    for (int i = 1; i < n; ++i)
      acc += direct_pdf(m, lo + i * h) * (i % 2 ? 4.0 : 2.0);
    REQUIRE(static_cast<double>(acc) * h / 3.0 == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("cdf is monotone and quantile round-trips") {
  Rng rng(103);
  for (int trial = 0; trial < 40; ++trial) {
    MixtureParams m = random_mixture(rng, 5);
    double prev = -1;
    for (double y = -6; y <= 6; y += 0.5) {
      double c = cdf(m, y);
      REQUIRE(c >= prev);
      prev = c;
    }
    for (double p : {0.01, 0.25, 0.5, 0.75, 0.99}) {
      double q = quantile(m, p);
      REQUIRE(std::fabs(cdf(m, q) - p) < 1e-8);
    }
  }
  REQUIRE_THROWS_AS(quantile(random_mixture(rng, 2), 0.0), ConfigError);
  REQUIRE_THROWS_AS(quantile(random_mixture(rng, 2), 1.0), ConfigError);
}

TEST_CASE("standard-normal quantiles hit the erf-inversion oracle") {
  MixtureParams m;
  m.w = {1.0};
  m.mu = {0.0};
  m.sigma = {1.0};
  REQUIRE(quantile(m, 0.5) == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(quantile(m, 0.75) == Catch::Approx(0.674489750196).margin(1e-8));
  REQUIRE(quantile(m, 0.995) == Catch::Approx(2.575829303549).margin(1e-8));
}

TEST_CASE("mixture mean matches Monte Carlo sampling") {
  Rng rng(104);
  MixtureParams m = random_mixture(rng, 3);
  double expect = mixture_mean(m);
  double acc = 0;
  int n = 200000;
  for (int i = 0; i < n; ++i) acc += sample(m, rng);
  double smax = *std::max_element(m.sigma.begin(), m.sigma.end());
  REQUIRE(acc / n == Catch::Approx(expect).margin(5.0 * smax / std::sqrt(n)));
}

TEST_CASE("sampled values respect component weights") {
  MixtureParams m;
  m.w = {0.8, 0.2};
  m.mu = {-10.0, 10.0};
  m.sigma = {0.1, 0.1};
  Rng rng(105);
  int right = 0, n = 50000;
  for (int i = 0; i < n; ++i)
    if (sample(m, rng) > 0) ++right;
  REQUIRE(static_cast<double>(right) / n == Catch::Approx(0.2).margin(0.01));
}

TEST_CASE("noise injection only during training") {
  Rng rng(106);
  REQUIRE(inject_noise(1.5, rng, false) == 1.5);
  double acc = 0, acc2 = 0;
  int n = 20000;
  for (int i = 0; i < n; ++i) {
    double d = inject_noise(0.0, rng, true);
    acc += d;
    acc2 += d * d;
  }
  REQUIRE(acc / n == Catch::Approx(0.0).margin(0.005));
  REQUIRE(std::sqrt(acc2 / n) == Catch::Approx(kNoiseStd).margin(0.005));
}

TEST_CASE("ms-unit transform scales density with the Jacobian") {
  Rng rng(107);
  MixtureParams m = random_mixture(rng, 3);
  AffineTransform tr{30.0, 4.0};
  MixtureParams mms = to_ms(m, tr);
  for (double y_ms : {25.0, 30.0, 38.5}) {
    double direct = static_cast<double>(logl(direct_pdf(mms, y_ms)));
    REQUIRE(log_prob_ms(m, tr, y_ms) == Catch::Approx(direct).margin(1e-10));
  }
  REQUIRE_THROWS_AS(to_ms(m, AffineTransform{0.0, -1.0}), ConfigError);
}

TEST_CASE("log_prob_graph agrees with scalar log_prob and differentiates") {
  Rng rng(108);
  int b = 2, l = 3, k = 4;
  diff::ParamStore ps;
  diff::Tensor& theta = ps.create("theta", {b, l, 3 * k});
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] = rng.uniform(-1.5, 1.5);
  std::vector<double> y;
  for (int i = 0; i < b * l; ++i) y.push_back(rng.uniform(-2.0, 2.0));

  diff::Tape t;
  diff::Var th = t.param(ps, "theta");
  diff::Var ll = log_prob_graph(t, th, y);
  for (int i = 0; i < b * l; ++i) {
    const double* row = theta.data() + static_cast<std::size_t>(i) * 3 * k;
    MixtureParams m = to_mixture(std::vector<double>(row, row + 3 * k));
    REQUIRE(ll.value()[static_cast<std::size_t>(i)] ==
            Catch::Approx(log_prob(m, y[static_cast<std::size_t>(i)])).margin(1e-12));
  }

  auto fn = [&]() {
    diff::Tape tt;
    diff::Var v = log_prob_graph(tt, tt.param(ps, "theta"), y);
    diff::Var loss = diff::mean_all(tt, v);
    tt.backward(loss);
    return loss.scalar();
  };
  REQUIRE(diff::finite_diff_check(fn, ps) < 1e-4);
}
