#include <catch2/catch.hpp>

#include <cmath>

#include "twistsmc/oracle.hpp"
#include "twistsmc/proposal.hpp"
#include "twistsmc/targets.hpp"
#include "twistsmc/twist.hpp"

using namespace twistsmc;

namespace {

TargetSpec hand_indicator_spec(double eps) {
  TargetSpec spec;
  spec.model = SeqModel::make_iid({0.5, 0.5}, 2);
  SeqTable reward;
  reward.values[{1, 1}] = -6.0;
  spec.potential = Potential::indicator_threshold(std::move(reward), -5.0, eps);
  return spec;
}

TargetSpec random_classifier_spec(int V, int T, std::uint64_t seed) {
  TargetSpec spec;
  spec.model = SeqModel::make_random(V, T, ModelKind::markov1, seed, 1.0);
  SeqTable p;
  RngStream rng = RngStream::from_seed(seed ^ 0xabcd);
  p.default_value = 0.5;
  for (std::uint64_t r = 0; r < ipow_u64(V, T); ++r)
    p.values[prefix_from_rank(r, T, V)] = 0.05 + 0.9 * rng.uniform01();
  spec.potential = Potential::classifier_prob(std::move(p));
  return spec;
}

TargetSpec random_intermediate_spec(int V, int T, std::uint64_t seed) {
  TargetSpec spec;
  spec.model = SeqModel::make_random(V, T, ModelKind::full_context, seed, 1.0);
  RngStream rng = RngStream::from_seed(seed ^ 0x1234);
  std::vector<SeqTable> steps(T);
  for (int t = 1; t <= T; ++t) {
    steps[t - 1].default_value = 1.0;
    for (std::uint64_t r = 0; r < ipow_u64(V, t); ++r)
      steps[t - 1].values[prefix_from_rank(r, t, V)] =
          0.2 + 1.6 * rng.uniform01();
  }
  spec.potential = Potential::intermediate_product(std::move(steps));
  return spec;
}

}  // namespace

TEST_CASE("hand indicator instance enumerates to log 1/4") {
  auto spec = hand_indicator_spec(0.0);
  auto table = enumerate(spec);
  REQUIRE(table.log_z == Approx(std::log(0.25)));
  REQUIRE(table.log_marginal[1][3] == Approx(0.0).margin(1e-12));  // [1,1]
  REQUIRE(table.log_marginal[1][0] == kNegInf);
  // optimal twists: psi*_1([1]) = 1/2, psi*_1([0]) = 0
  REQUIRE(table.log_psi[0][1] == Approx(std::log(0.5)));
  REQUIRE(table.log_psi[0][0] == kNegInf);
}

TEST_CASE("trivial potential gives log Z = 0 and p0 marginals") {
  TargetSpec spec;
  spec.model = SeqModel::make_random(3, 3, ModelKind::markov1, 2, 1.0);
  auto table = enumerate(spec);
  REQUIRE(table.log_z == Approx(0.0).margin(1e-12));
  for (int t = 1; t <= 3; ++t) {
    for (std::uint64_t r = 0; r < ipow_u64(3, t); ++r) {
      Sequence prefix = prefix_from_rank(r, t, 3);
      REQUIRE(table.log_marginal[t - 1][r] ==
              Approx(spec.model->sequence_logprob(prefix)).margin(1e-10));
      REQUIRE(table.log_psi[t - 1][r] == Approx(0.0).margin(1e-12));
    }
  }
}

TEST_CASE("exp reward partition function by hand") {
  TargetSpec spec;
  spec.model = SeqModel::make_iid({0.25, 0.75}, 1);
  SeqTable r;
  r.values[{1}] = std::log(2.0);
  spec.potential = Potential::exp_reward(std::move(r), 1.0);
  auto table = enumerate(spec);
  REQUIRE(std::exp(table.log_z) == Approx(1.75));
}

TEST_CASE("optimal twist recursion and marginalization chain") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    for (bool intermediate : {false, true}) {
      auto spec = intermediate ? random_intermediate_spec(3, 4, seed)
                               : random_classifier_spec(3, 4, seed);
      auto table = enumerate(spec);
      const int V = 3, T = 4;
      for (int t = 1; t < T; ++t) {
        for (std::uint64_t r = 0; r < ipow_u64(V, t); ++r) {
          Sequence prefix = prefix_from_rank(r, t, V);
          auto row = spec.model->next_token_logprobs(prefix);
          std::vector<double> terms(V);
          for (int s = 0; s < V; ++s)
            terms[s] = row[s] + table.log_psi[t][r * V + s];
          double rhs = spec.log_potential(prefix, t) + log_sum_exp(terms);
          REQUIRE(table.log_psi[t - 1][r] == Approx(rhs).margin(1e-10));

          // marginalization: sum_s sigma(prefix . s) = sigma(prefix)
          std::vector<double> children(V);
          for (int s = 0; s < V; ++s)
            children[s] = table.log_marginal[t][r * V + s];
          REQUIRE(log_sum_exp(children) ==
                  Approx(table.log_marginal[t - 1][r]).margin(1e-10));
        }
        // each level normalizes
        REQUIRE(log_sum_exp(table.log_marginal[t - 1]) ==
                Approx(0.0).margin(1e-10));
      }
    }
  }
}

TEST_CASE("exact KL") {
  SECTION("q = sigma gives zero in both directions") {
    auto spec = random_classifier_spec(2, 3, 5);
    auto table = enumerate(spec);
    OracleSequenceDistribution q(table);
    REQUIRE(exact_kl(spec, q, KlDirection::q_to_sigma) ==
            Approx(0.0).margin(1e-10));
    REQUIRE(exact_kl(spec, q, KlDirection::sigma_to_q) ==
            Approx(0.0).margin(1e-10));
  }
  SECTION("indicator instance against the base model") {
    auto spec = hand_indicator_spec(0.0);
    BaseProposal base;
    ProposalSequenceDistribution q(spec, base);
    REQUIRE(exact_kl(spec, q, KlDirection::sigma_to_q) ==
            Approx(std::log(4.0)));
    // support mismatch: q has mass where sigma has none
    REQUIRE(std::isinf(exact_kl(spec, q, KlDirection::q_to_sigma)));
  }
}

TEST_CASE("exact target sampling") {
  SECTION("point mass") {
    auto spec = hand_indicator_spec(0.0);
    auto table = enumerate(spec);
    RngStream rng = RngStream::from_seed(77);
    for (int i = 0; i < 20; ++i)
      REQUIRE(exact_target_sample(table, rng) == Sequence{1, 1});
  }
  SECTION("empirical distribution matches sigma on a 4-sequence instance") {
    auto spec = random_classifier_spec(2, 2, 9);
    auto table = enumerate(spec);
    RngStream rng = RngStream::from_seed(13);
    const int n = 50000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < n; ++i)
      counts[prefix_rank(exact_target_sample(table, rng), 2)]++;
    for (int r = 0; r < 4; ++r) {
      double p = std::exp(table.log_marginal[1][r]);
      double se = std::sqrt(p * (1 - p) / n);
      REQUIRE(double(counts[r]) / n == Approx(p).margin(3.5 * se));
    }
  }
  SECTION("conditional tables draw from the keyed posterior") {
    TargetSpec spec;
    spec.model = SeqModel::make_iid({0.4, 0.6}, 2);
    std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows;
    rows[{1, 1}] = {0.9, 0.1};
    rows[{0, 0}] = {0.1, 0.9};
    spec.observation = ObservationModel::tabular(2, {0.5, 0.5}, rows);
    spec.conditioning = Observation{1};
    auto table = enumerate(spec);
    RngStream rng = RngStream::from_seed(15);
    const int n = 40000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < n; ++i)
      counts[prefix_rank(exact_target_sample(table, rng), 2)]++;
    for (int r = 0; r < 4; ++r) {
      double p = std::exp(table.log_marginal[1][r]);
      double se = std::sqrt(p * (1 - p) / n) + 1e-9;
      REQUIRE(double(counts[r]) / n == Approx(p).margin(3.5 * se));
    }
  }
}

TEST_CASE("multi-step optimal proposal") {
  auto spec = random_classifier_spec(3, 4, 21);
  auto table = enumerate(spec);

  SECTION("c = 1 equals the twist-induced proposal at the optimum") {
    TwistSet tw = twists_from_oracle(table);
    Sequence prefix = {2, 0};
    auto multi = multi_step_optimal_proposal(table, spec, 3, 1, prefix);
    auto one = twist_induced_proposal_logprobs(tw, spec, 3, prefix);
    for (int s = 0; s < 3; ++s)
      REQUIRE(multi[s] == Approx(one[s]).margin(1e-9));
  }

  SECTION("c = T from the empty prefix recovers sigma") {
    auto dist = multi_step_optimal_proposal(table, spec, 1, 4, {});
    for (std::uint64_t r = 0; r < dist.size(); ++r)
      REQUIRE(dist[r] == Approx(table.log_marginal[3][r]).margin(1e-9));
  }

  SECTION("c-step weights are constant under the multi-step proposal") {
    // w_{t:t+c-1} = pi~_{t+c-1} / (pi~_{t-1} q(cont|prefix)); with canonical
    // psi* every normalizer is Z, so the constant is 1 (log 0)
    const int V = 3, t = 2, c = 2;
    for (std::uint64_t pr = 0; pr < ipow_u64(V, t - 1); ++pr) {
      Sequence prefix = prefix_from_rank(pr, t - 1, V);
      auto q = multi_step_optimal_proposal(table, spec, t, c, prefix);
      for (std::uint64_t j = 0; j < q.size(); ++j) {
        if (q[j] == kNegInf) continue;
        Sequence full = prefix;
        Sequence cont = prefix_from_rank(j, c, V);
        full.insert(full.end(), cont.begin(), cont.end());
        double log_pi_hi = spec.model->sequence_logprob(full) +
                           table.log_psi[t + c - 2][prefix_rank(full, V)];
        double log_pi_lo =
            t >= 2 ? spec.model->sequence_logprob(prefix) +
                         table.log_psi[t - 2][prefix_rank(prefix, V)]
                   : 0.0;
        double log_w = log_pi_hi - log_pi_lo - q[j];
        REQUIRE(log_w == Approx(0.0).margin(1e-10));
      }
    }
  }
}

TEST_CASE("enumeration guard") {
  TargetSpec spec;
  spec.model = SeqModel::make_random(4, 12, ModelKind::full_context, 3, 1.0);
  REQUIRE_THROWS_AS(enumerate(spec, 1000), TooLarge);
}
