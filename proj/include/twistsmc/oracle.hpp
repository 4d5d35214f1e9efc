#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "twistsmc/errors.hpp"
#include "twistsmc/logspace.hpp"
#include "twistsmc/targets.hpp"

namespace twistsmc {

inline constexpr std::uint64_t kDefaultEnumGuard = 2'000'000;

inline std::uint64_t checked_pow(int vocab, int len, std::uint64_t guard) {
  std::uint64_t n = 1;
  for (int i = 0; i < len; ++i) {
    n *= static_cast<std::uint64_t>(vocab);
    if (n > guard) throw TooLarge("enumeration guard exceeded");
  }
  return n;
}

// Normalized full-sequence distribution, the q side of KL evaluations.
class SequenceDistribution {
 public:
  virtual ~SequenceDistribution() = default;
  virtual double log_prob(const Sequence& seq) const = 0;
  virtual Sequence sample(RngStream& rng) const = 0;
};

/**
 * Exact quantities for one target spec, by full enumeration: log Z, the target
 * marginals sigma(s_{1:t}), and the optimal twists in the canonical
 * normalization psi*_t = phi_t * E_p0[ prod_{tau>t} phi_tau | s_{1:t} ],
 * i.e. the c_t = 1 representative. Under it the recursion
 * psi*_t = phi_t * sum_s p0(s|.) psi*_{t+1} holds with no constants, psi*_T is
 * the exact final potential, and every intermediate normalizer equals Z.
 * Arrays are rank-indexed: entry r of level t is the prefix with big-endian
 * rank r.
 */
struct OracleTable {
  int vocab = 0;
  int horizon = 0;
  double log_z = 0.0;
  // level t in 1..T lives at index t-1; each vector has V^t entries
  std::vector<std::vector<double>> log_marginal;  // normalized log sigma(s_{1:t})
  std::vector<std::vector<double>> log_psi;       // canonical log psi*_t
  std::string fingerprint;
};

// Forward enumeration of log p0(s_{1:t}) and the cumulative intermediate
// potential sum_{tau <= t-1} log phi_tau(s_{1:tau}); shared by the oracle and
// the enumeration-mode losses.
struct PrefixEnum {
  std::vector<std::vector<double>> log_p0;       // [t-1][rank], length V^t
  std::vector<std::vector<double>> log_phi_cum;  // same shape
};

inline PrefixEnum enumerate_prefixes(const TargetSpec& spec,
                                     std::uint64_t guard = kDefaultEnumGuard) {
  const int V = spec.vocab();
  const int T = spec.horizon();
  checked_pow(V, T, guard);
  PrefixEnum out;
  out.log_p0.resize(T);
  out.log_phi_cum.resize(T);
  for (int t = 1; t <= T; ++t) {
    std::uint64_t n = ipow_u64(V, t);
    out.log_p0[t - 1].resize(n);
    out.log_phi_cum[t - 1].resize(n);
  }
  Sequence prefix;
  // depth-first walk, reusing each parent's row once
  struct Frame {
    std::vector<double> row;
    int next = 0;
  };
  std::vector<Frame> stack(T + 1);
  stack[0].row = spec.model->next_token_logprobs({});
  std::vector<double> lp0(T + 1, 0.0), lphi(T + 1, 0.0);
  std::vector<std::uint64_t> rank(T + 1, 0);
  int depth = 0;
  while (depth >= 0) {
    Frame& f = stack[depth];
    if (f.next >= V) {
      --depth;
      if (depth >= 0) prefix.pop_back();
      continue;
    }
    int s = f.next++;
    prefix.push_back(static_cast<Token>(s));
    int t = depth + 1;
    lp0[t] = lp0[t - 1] + f.row[s];
    rank[t] = rank[t - 1] * V + s;
    // phi_cum at level t excludes phi_t itself
    lphi[t] = lphi[t - 1] +
              (t >= 2 ? spec.log_potential(
                            Sequence(prefix.begin(), prefix.end() - 1), t - 1)
                      : 0.0);
    out.log_p0[t - 1][rank[t]] = lp0[t];
    out.log_phi_cum[t - 1][rank[t]] = lphi[t];
    if (t < T) {
      ++depth;
      stack[depth].row = spec.model->next_token_logprobs(prefix);
      stack[depth].next = 0;
    } else {
      prefix.pop_back();
    }
  }
  return out;
}

inline OracleTable enumerate(const TargetSpec& spec,
                             std::uint64_t guard = kDefaultEnumGuard) {
  const int V = spec.vocab();
  const int T = spec.horizon();
  checked_pow(V, T, guard);

  OracleTable table;
  table.vocab = V;
  table.horizon = T;
  table.log_psi.resize(T);
  table.log_marginal.resize(T);
  for (int t = 1; t <= T; ++t) {
    table.log_psi[t - 1].resize(ipow_u64(V, t));
    table.log_marginal[t - 1].resize(ipow_u64(V, t));
  }

  // backward pass: psi*_T = final potential, then
  // psi*_t = phi_t * sum_s p0(s | s_{1:t}) psi*_{t+1}(s_{1:t} s)
  {
    auto& top = table.log_psi[T - 1];
    for (std::uint64_t r = 0; r < top.size(); ++r)
      top[r] = spec.log_potential(prefix_from_rank(r, T, V), T);
  }
  for (int t = T - 1; t >= 1; --t) {
    auto& level = table.log_psi[t - 1];
    const auto& next = table.log_psi[t];
    for (std::uint64_t r = 0; r < level.size(); ++r) {
      Sequence prefix = prefix_from_rank(r, t, V);
      auto row = spec.model->next_token_logprobs(prefix);
      std::vector<double> terms(V);
      for (int s = 0; s < V; ++s)
        terms[s] = row[s] + next[r * V + s];
      level[r] = spec.log_potential(prefix, t) + log_sum_exp(terms);
    }
  }

  PrefixEnum pe = enumerate_prefixes(spec, guard);
  {
    std::vector<double> terms(V);
    for (int s = 0; s < V; ++s)
      terms[s] = pe.log_p0[0][s] + table.log_psi[0][s];
    table.log_z = log_sum_exp(terms);
    if (table.log_z == kNegInf)
      throw DegenerateWeights("enumerate: target has zero total mass");
  }
  for (int t = 1; t <= T; ++t) {
    auto& marg = table.log_marginal[t - 1];
    for (std::uint64_t r = 0; r < marg.size(); ++r)
      marg[r] = pe.log_p0[t - 1][r] + pe.log_phi_cum[t - 1][r] +
                table.log_psi[t - 1][r] - table.log_z;
  }

  std::ostringstream fp;
  fp << "V=" << V << ";T=" << T << ";kind=" << to_string(spec.model->kind())
     << ";seed=" << spec.model->seed()
     << ";phi=" << to_string(spec.potential.kind());
  table.fingerprint = fp.str();
  return table;
}

// Ancestral draw from the exact conditionals sigma(s_t | s_{1:t-1}) implied
// by the marginal tables.
inline Sequence exact_target_sample(const OracleTable& table, RngStream& rng) {
  Sequence seq;
  std::uint64_t r = 0;
  for (int t = 1; t <= table.horizon; ++t) {
    std::vector<double> logits(table.vocab);
    for (int s = 0; s < table.vocab; ++s) {
      double child = table.log_marginal[t - 1][r * table.vocab + s];
      double parent = t == 1 ? 0.0 : table.log_marginal[t - 2][r];
      logits[s] = child == kNegInf ? kNegInf : child - parent;
    }
    int s = sample_categorical_logits(logits, rng);
    seq.push_back(static_cast<Token>(s));
    r = r * table.vocab + s;
  }
  return seq;
}

enum class KlDirection { q_to_sigma, sigma_to_q };

// Exact KL by full summation; support mismatches report +inf.
inline double exact_kl(const TargetSpec& spec, const SequenceDistribution& q,
                       KlDirection direction,
                       std::uint64_t guard = kDefaultEnumGuard) {
  const int V = spec.vocab();
  const int T = spec.horizon();
  std::uint64_t n = checked_pow(V, T, guard);
  std::vector<double> log_sigma_un(n);
  for (std::uint64_t r = 0; r < n; ++r)
    log_sigma_un[r] = spec.log_unnormalized(prefix_from_rank(r, T, V));
  double log_z = log_sum_exp(log_sigma_un);
  if (log_z == kNegInf) throw BadInput("exact_kl: target has zero mass");

  double kl = 0.0;
  for (std::uint64_t r = 0; r < n; ++r) {
    Sequence seq = prefix_from_rank(r, T, V);
    double ls = log_sigma_un[r] - log_z;
    double lq = q.log_prob(seq);
    if (direction == KlDirection::q_to_sigma) {
      if (lq == kNegInf) continue;
      if (ls == kNegInf) return std::numeric_limits<double>::infinity();
      kl += std::exp(lq) * (lq - ls);
    } else {
      if (ls == kNegInf) continue;
      if (lq == kNegInf) return std::numeric_limits<double>::infinity();
      kl += std::exp(ls) * (ls - lq);
    }
  }
  return kl;
}

// Normalized distribution over the V^c continuations s_{t:t+c-1} of a given
// prefix, proportional to p0(continuation | prefix) * psi*_{t+c-1}. For c = 1
// this is the one-step twist-induced proposal at the optimum.
inline std::vector<double> multi_step_optimal_proposal(
    const OracleTable& table, const TargetSpec& spec, int t, int c,
    const Sequence& prefix, std::uint64_t guard = kDefaultEnumGuard) {
  const int V = table.vocab;
  if (static_cast<int>(prefix.size()) != t - 1)
    throw BadStep("multi_step_optimal_proposal: prefix length must be t-1");
  if (c < 1 || t + c - 1 > table.horizon)
    throw BadStep("multi_step_optimal_proposal: window out of range");
  std::uint64_t n = checked_pow(V, c, guard);
  std::vector<double> logits(n);
  std::uint64_t base = prefix_rank(prefix, V);
  for (std::uint64_t j = 0; j < n; ++j) {
    Sequence cont = prefix_from_rank(j, c, V);
    Sequence full = prefix;
    double lp0 = 0.0;
    for (Token s : cont) {
      lp0 += spec.model->next_token_logprobs(full)[s];
      full.push_back(s);
    }
    logits[j] = lp0 + table.log_psi[t + c - 2][base * n + j];
  }
  return log_softmax(logits);
}

class OracleSequenceDistribution : public SequenceDistribution {
 public:
  explicit OracleSequenceDistribution(const OracleTable& table)
      : table_(&table) {}

  double log_prob(const Sequence& seq) const override {
    return table_->log_marginal[table_->horizon - 1]
                               [prefix_rank(seq, table_->vocab)];
  }

  Sequence sample(RngStream& rng) const override {
    return exact_target_sample(*table_, rng);
  }

 private:
  const OracleTable* table_;
};

}  // namespace twistsmc
