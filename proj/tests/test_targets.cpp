#include <catch2/catch.hpp>

#include <cmath>
#include <map>

#include "twistsmc/oracle.hpp"
#include "twistsmc/targets.hpp"

using namespace twistsmc;

namespace {

// V=2, T=2, uniform p0, phi = indicator(seq == [1,1]) via a reward threshold
TargetSpec hand_indicator_spec(double eps) {
  TargetSpec spec;
  spec.model = SeqModel::make_iid({0.5, 0.5}, 2);
  SeqTable reward;
  reward.default_value = 0.0;  // fails r <= eta
  reward.values[{1, 1}] = -6.0;
  spec.potential = Potential::indicator_threshold(std::move(reward), -5.0, eps);
  return spec;
}

}  // namespace

TEST_CASE("indicator potential with epsilon floor") {
  auto spec = hand_indicator_spec(1e-16);
  // r = -6 <= eta = -5: log(1 + eps) ~ 0
  REQUIRE(spec.log_potential({1, 1}, 2) == Approx(0.0).margin(1e-12));
  // outside the set: log eps
  REQUIRE(spec.log_potential({0, 1}, 2) == Approx(std::log(1e-16)));
  // terminal-only potential at t < T is exactly zero
  REQUIRE(spec.log_potential({1}, 1) == 0.0);
  REQUIRE_THROWS_AS(spec.log_potential({1}, 2), BadStep);
}

TEST_CASE("exp reward potential") {
  TargetSpec spec;
  spec.model = SeqModel::make_iid({0.5, 0.5}, 1);
  SeqTable r;
  r.values[{0}] = std::log(2.0);
  spec.potential = Potential::exp_reward(std::move(r), 1.0);
  REQUIRE(spec.log_potential({0}, 1) == Approx(std::log(2.0)));
  REQUIRE(spec.log_potential({1}, 1) == 0.0);
}

TEST_CASE("unnormalized target density") {
  SECTION("phi == 1 reduces to the base model") {
    TargetSpec spec;
    spec.model = SeqModel::make_random(3, 3, ModelKind::markov1, 4, 1.0);
    Sequence seq = {2, 0, 1};
    REQUIRE(spec.log_unnormalized(seq) ==
            Approx(spec.model->sequence_logprob(seq)));
  }
  SECTION("hand enumeration of the indicator instance, eps = 0") {
    auto spec = hand_indicator_spec(0.0);
    REQUIRE(spec.log_unnormalized({1, 1}) == Approx(std::log(0.25)));
    REQUIRE(spec.log_unnormalized({0, 1}) == kNegInf);
    REQUIRE(spec.log_unnormalized({1, 0}) == kNegInf);
  }
  SECTION("epsilon smoothing keeps every sequence finite") {
    auto spec = hand_indicator_spec(1e-16);
    for (Token a : {0, 1})
      for (Token b : {0, 1})
        REQUIRE(std::isfinite(spec.log_unnormalized({a, b})));
  }
  SECTION("conditional target includes the likelihood term") {
    TargetSpec spec;
    spec.model = SeqModel::make_iid({0.25, 0.75}, 2);
    std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows;
    rows[{1, 1}] = {0.9, 0.1};
    spec.observation = ObservationModel::tabular(2, {0.5, 0.5}, rows);
    spec.conditioning = Observation{0};
    REQUIRE(spec.log_unnormalized({1, 1}) ==
            Approx(std::log(0.75 * 0.75 * 0.9)));
    REQUIRE(spec.log_unnormalized({0, 1}) ==
            Approx(std::log(0.25 * 0.75 * 0.5)));
    spec.conditioning.reset();
    REQUIRE_THROWS_AS(spec.log_unnormalized({1, 1}), MissingObservation);
  }
}

TEST_CASE("tabular observation rows normalize") {
  std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows;
  rows[{0}] = {2.0, 6.0};  // normalized internally
  auto obs = ObservationModel::tabular(2, {1.0, 1.0}, rows);
  REQUIRE(std::exp(obs.log_likelihood({0}, Observation{0})) +
              std::exp(obs.log_likelihood({0}, Observation{1})) ==
          Approx(1.0).margin(1e-12));
  REQUIRE(obs.log_likelihood({0}, Observation{1}) == Approx(std::log(0.75)));
  REQUIRE_THROWS_AS(ObservationModel::tabular(2, {1.0, -1.0}, {}), BadConfig);
}

TEST_CASE("bdmc joint draw for continuation observations") {
  auto ext = SeqModel::make_random(3, 5, ModelKind::full_context, 8, 1.0);
  TargetSpec spec;
  spec.model = SeqModel::make_random(3, 3, ModelKind::full_context, 8, 1.0);
  spec.observation = ObservationModel::continuation(ext, 2);
  RngStream rng = RngStream::from_seed(2);
  auto [seq, o] = bdmc_exact_posterior_sample(spec, rng);
  REQUIRE(seq.size() == 3);
  REQUIRE(std::get<Sequence>(o).size() == 2);
  // the pair is one ancestral draw of s_{1:T+c} split at T
  RngStream replay = RngStream::from_seed(2);
  Sequence full = spec.model->sample_sequence(replay, 3);
  REQUIRE(full == seq);
}

TEST_CASE("bdmc with a degenerate likelihood leaves the marginal at p0") {
  TargetSpec spec;
  spec.model = SeqModel::make_iid({0.3, 0.7}, 1);
  spec.observation = ObservationModel::tabular(2, {1.0, 0.0}, {});
  RngStream rng = RngStream::from_seed(44);
  const int n = 20000;
  int ones = 0;
  for (int i = 0; i < n; ++i) {
    auto [seq, o] = bdmc_exact_posterior_sample(spec, rng);
    REQUIRE(std::get<int>(o) == 0);
    ones += seq[0];
  }
  double se = std::sqrt(0.3 * 0.7 / n);
  REQUIRE(double(ones) / n == Approx(0.7).margin(3.0 * se));
}

TEST_CASE("bdmc joint frequencies match the exact posterior") {
  // V=2, T=1, binary observation; empirical conditional frequencies over
  // joint draws vs the enumerated posterior
  TargetSpec spec;
  spec.model = SeqModel::make_iid({0.4, 0.6}, 1);
  std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows;
  rows[{0}] = {0.8, 0.2};
  rows[{1}] = {0.3, 0.7};
  spec.observation = ObservationModel::tabular(2, {0.5, 0.5}, rows);

  TargetSpec cond = spec;
  cond.conditioning = Observation{0};
  auto table = enumerate(cond);
  double post1 = std::exp(table.log_marginal[0][1]);  // sigma(s=1 | o=0)

  RngStream rng = RngStream::from_seed(10);
  const int n = 50000;
  int seen_o0 = 0, seen_o0_s1 = 0;
  for (int i = 0; i < n; ++i) {
    auto [seq, o] = bdmc_exact_posterior_sample(spec, rng);
    if (std::get<int>(o) == 0) {
      ++seen_o0;
      seen_o0_s1 += seq[0];
    }
  }
  double est = double(seen_o0_s1) / seen_o0;
  double se = std::sqrt(post1 * (1 - post1) / seen_o0);
  REQUIRE(est == Approx(post1).margin(3.0 * se));
}

TEST_CASE("rejection sampling") {
  SECTION("phi == 1 via classifier-prob accepts the first draw") {
    TargetSpec spec;
    spec.model = SeqModel::make_iid({0.5, 0.5}, 2);
    SeqTable p;
    p.default_value = 1.0;
    spec.potential = Potential::classifier_prob(std::move(p));
    RngStream rng = RngStream::from_seed(3);
    REQUIRE_NOTHROW(rejection_sample_exact(spec, rng, 1));
  }
  SECTION("acceptance rate matches the target mass") {
    auto spec = hand_indicator_spec(0.0);
    RngStream rng = RngStream::from_seed(6);
    const int n = 20000;
    int accepted_first_try = 0;
    for (int i = 0; i < n; ++i) {
      try {
        rejection_sample_exact(spec, rng, 1);
        ++accepted_first_try;
      } catch (const Exhausted&) {
      }
    }
    double se = std::sqrt(0.25 * 0.75 / n);
    REQUIRE(double(accepted_first_try) / n == Approx(0.25).margin(3.0 * se));
  }
  SECTION("accepted draws land in the constraint set") {
    auto spec = hand_indicator_spec(0.0);
    RngStream rng = RngStream::from_seed(12);
    for (int i = 0; i < 50; ++i) {
      Sequence s = rejection_sample_exact(spec, rng, 1000000);
      REQUIRE(s == Sequence{1, 1});
    }
  }
  SECTION("unbounded potentials are rejected") {
    TargetSpec spec;
    spec.model = SeqModel::make_iid({0.5, 0.5}, 1);
    SeqTable r;
    r.values[{0}] = 3.0;
    spec.potential = Potential::exp_reward(std::move(r), 2.0);
    RngStream rng = RngStream::from_seed(3);
    REQUIRE_THROWS_AS(rejection_sample_exact(spec, rng, 10), Unsupported);
  }
}

TEST_CASE("continuation potential is a conditional likelihood") {
  auto ext = SeqModel::make_random(2, 4, ModelKind::full_context, 19, 1.0);
  TargetSpec spec;
  spec.model = SeqModel::make_random(2, 2, ModelKind::full_context, 19, 1.0);
  spec.potential = Potential::continuation_likelihood(ext, {1, 0});
  Sequence seq = {0, 1};
  Sequence full = {0, 1, 1, 0};
  REQUIRE(spec.log_potential(seq, 2) ==
          Approx(ext->sequence_logprob(full) - ext->sequence_logprob(seq)));
  REQUIRE(spec.log_potential(seq, 2) <= 0.0);  // a probability
}
