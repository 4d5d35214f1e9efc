#include <catch2/catch.hpp>

#include <cmath>
#include <vector>

#include "twistsmc/logspace.hpp"
#include "twistsmc/rng.hpp"

using namespace twistsmc;

TEST_CASE("counter stream is reproducible and cloneable") {
  RngStream a = RngStream::from_seed(42);
  RngStream b = a;  // clone carries the position
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  RngStream c = RngStream::from_seed(42);
  a = RngStream::from_seed(42);
  for (int i = 0; i < 10; ++i) a.next_u64();
  for (int i = 0; i < 10; ++i) c.next_u64();
  REQUIRE(a.next_u64() == c.next_u64());
}

TEST_CASE("substreams with distinct labels differ") {
  RngStream root = RngStream::from_seed(7);
  RngStream a = root.substream(1, 2, 3);
  RngStream b = root.substream(1, 2, 4);
  RngStream c = root.substream(1, 2, 3);
  REQUIRE(a.key() != b.key());
  REQUIRE(a.key() == c.key());
  int agree = 0;
  RngStream a2 = a;
  for (int i = 0; i < 64; ++i)
    if (a2.next_u64() == b.next_u64()) ++agree;
  REQUIRE(agree == 0);
}

TEST_CASE("uniform01 moments") {
  RngStream rng = RngStream::from_seed(11);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform01();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
    sum2 += u * u;
  }
  double mean = sum / n;
  double var = sum2 / n - mean * mean;
  REQUIRE(mean == Approx(0.5).margin(3.0 / std::sqrt(12.0 * n)));
  REQUIRE(var == Approx(1.0 / 12.0).margin(0.002));
}

TEST_CASE("normal and gamma moments") {
  RngStream rng = RngStream::from_seed(5);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  REQUIRE(sum / n == Approx(0.0).margin(3.0 / std::sqrt(double(n))));
  REQUIRE(sum2 / n == Approx(1.0).margin(0.02));

  for (double shape : {0.5, 1.0, 3.5}) {
    double gsum = 0.0;
    for (int i = 0; i < n; ++i) gsum += rng.gamma(shape);
    // mean of Gamma(shape, 1) is shape; sd of the mean ~ sqrt(shape/n)
    REQUIRE(gsum / n == Approx(shape).margin(4.0 * std::sqrt(shape / n)));
  }
}

TEST_CASE("categorical sampling matches logits") {
  std::vector<double> logits = {std::log(0.2), kNegInf, std::log(0.5),
                                std::log(0.3)};
  RngStream rng = RngStream::from_seed(99);
  const int n = 100000;
  std::vector<int> counts(4, 0);
  for (int i = 0; i < n; ++i) counts[sample_categorical_logits(logits, rng)]++;
  REQUIRE(counts[1] == 0);
  for (int i : {0, 2, 3}) {
    double p = std::exp(logits[i]);
    double se = std::sqrt(p * (1 - p) / n);
    REQUIRE(double(counts[i]) / n == Approx(p).margin(3.5 * se));
  }
}

TEST_CASE("log-space helpers") {
  std::vector<double> xs = {std::log(1.0), std::log(3.0), kNegInf};
  REQUIRE(log_sum_exp(xs) == Approx(std::log(4.0)));
  REQUIRE(log_mean_exp(xs) == Approx(std::log(4.0 / 3.0)));
  std::vector<double> all_inf = {kNegInf, kNegInf};
  REQUIRE(log_sum_exp(all_inf) == kNegInf);
  REQUIRE_THROWS_AS(log_softmax(all_inf), DegenerateWeights);

  std::vector<double> w = {std::log(1.0), std::log(1.0), std::log(2.0)};
  REQUIRE(effective_sample_size(w) == Approx(16.0 / 6.0));
}
