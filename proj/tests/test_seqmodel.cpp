#include <catch2/catch.hpp>

#include <cmath>
#include <thread>
#include <vector>

#include "twistsmc/seqmodel.hpp"

using namespace twistsmc;

namespace {

void check_rows_normalized(const SeqModel& m, const Sequence& prefix) {
  auto lp = m.next_token_logprobs(prefix);
  double s = 0.0;
  for (double x : lp) s += std::exp(x);
  REQUIRE(s == Approx(1.0).margin(1e-12));
}

}  // namespace

TEST_CASE("uniform iid model") {
  auto m = SeqModel::make_iid({0.5, 0.5}, 3);
  auto lp = m->next_token_logprobs({});
  REQUIRE(lp[0] == Approx(std::log(0.5)));
  REQUIRE(lp[1] == Approx(std::log(0.5)));
  REQUIRE(m->sequence_logprob({0, 1}) == Approx(2.0 * std::log(0.5)));
  REQUIRE(m->sequence_logprob({}) == 0.0);
}

TEST_CASE("iid table lookups") {
  auto m = SeqModel::make_iid({0.25, 0.75}, 2);
  auto lp = m->next_token_logprobs({});
  REQUIRE(lp[0] == Approx(std::log(0.25)));
  REQUIRE(lp[1] == Approx(std::log(0.75)));
  REQUIRE(m->sequence_logprob({1, 1}) == Approx(std::log(0.5625)));
}

TEST_CASE("degenerate conditionals sample deterministically") {
  auto m = SeqModel::make_iid({0.0, 1.0}, 3);
  RngStream rng = RngStream::from_seed(1);
  REQUIRE(m->sample_sequence(rng, 3) == Sequence{1, 1, 1});
}

TEST_CASE("sampling is a pure function of the stream") {
  auto m = SeqModel::make_random(4, 5, ModelKind::markov1, 17, 1.0);
  RngStream a = RngStream::from_seed(3).substream(9);
  RngStream b = a;
  REQUIRE(m->sample_sequence(a, 5) == m->sample_sequence(b, 5));
}

TEST_CASE("binomial check on iid sampling") {
  auto m = SeqModel::make_iid({0.5, 0.5}, 1);
  RngStream rng = RngStream::from_seed(123);
  const int n = 10000;
  int ones = 0;
  for (int i = 0; i < n; ++i) ones += m->sample_sequence(rng, 1)[0];
  double se = std::sqrt(0.25 / n);
  REQUIRE(double(ones) / n == Approx(0.5).margin(3.0 * se));
}

TEST_CASE("random models are reproducible and normalized") {
  for (auto kind :
       {ModelKind::iid, ModelKind::markov1, ModelKind::full_context}) {
    auto a = SeqModel::make_random(4, 5, kind, 77, 1.0);
    auto b = SeqModel::make_random(4, 5, kind, 77, 1.0);
    Sequence prefix;
    for (int t = 0; t < 5; ++t) {
      REQUIRE(a->next_token_logprobs(prefix) == b->next_token_logprobs(prefix));
      check_rows_normalized(*a, prefix);
      prefix.push_back(static_cast<Token>(t % 4));
    }
  }
}

TEST_CASE("full_context rows are deterministic across queries") {
  auto m = SeqModel::make_random(3, 4, ModelKind::full_context, 5, 0.7);
  Sequence p = {2, 0, 1};
  auto first = m->next_token_logprobs(p);
  auto second = m->next_token_logprobs(p);
  REQUIRE(first == second);
}

TEST_CASE("high concentration approaches uniform") {
  auto m = SeqModel::make_random(4, 1, ModelKind::iid, 9, 1e6);
  auto lp = m->next_token_logprobs({});
  for (double x : lp) REQUIRE(std::exp(x) == Approx(0.25).margin(0.01));
}

TEST_CASE("consistency of sequence_logprob with per-step rows") {
  auto m = SeqModel::make_random(3, 4, ModelKind::full_context, 31, 1.0);
  Sequence seq = {1, 2, 0, 2};
  double lp = 0.0;
  Sequence prefix;
  for (Token s : seq) {
    lp += m->next_token_logprobs(prefix)[s];
    prefix.push_back(s);
  }
  REQUIRE(m->sequence_logprob(seq) == lp);  // identical arithmetic path
}

TEST_CASE("range and horizon errors") {
  auto m = SeqModel::make_iid({0.5, 0.5}, 2);
  REQUIRE_THROWS_AS(m->next_token_logprobs({0, 1}), HorizonExceeded);
  REQUIRE_THROWS_AS(m->sequence_logprob({0, 1, 0}), HorizonExceeded);
  REQUIRE_THROWS_AS(m->next_token_logprobs({7}), BadInput);
  REQUIRE_THROWS_AS(SeqModel::make_random(1, 3, ModelKind::iid, 0, 1.0),
                    BadConfig);
  REQUIRE_THROWS_AS(SeqModel::make_random(2, 0, ModelKind::iid, 0, 1.0),
                    BadConfig);
}

TEST_CASE("concurrent full_context readers see one row per prefix") {
  auto m = SeqModel::make_random(5, 6, ModelKind::full_context, 21, 1.0);
  std::vector<std::vector<double>> results(8);
  Sequence prefix = {4, 0, 3};
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i)
    pool.emplace_back(
        [&, i] { results[i] = m->next_token_logprobs(prefix); });
  for (auto& t : pool) t.join();
  for (int i = 1; i < 8; ++i) REQUIRE(results[i] == results[0]);
}

TEST_CASE("prefix ranks round-trip") {
  const int V = 3;
  for (int len : {0, 1, 2, 4}) {
    for (std::uint64_t r = 0; r < ipow_u64(V, len); ++r) {
      Sequence p = prefix_from_rank(r, len, V);
      REQUIRE(prefix_rank(p, V) == r);
    }
  }
}
