#pragma once

#include <cmath>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "twistsmc/errors.hpp"
#include "twistsmc/logspace.hpp"
#include "twistsmc/oracle.hpp"
#include "twistsmc/proposal.hpp"
#include "twistsmc/targets.hpp"
#include "twistsmc/twist.hpp"

namespace twistsmc {

/**
 * SIS / twisted-SMC samplers and the bidirectional log Z machinery.
 *
 * All weight arithmetic stays in log space. The estimator is the blockwise
 * form: at each resample boundary the block's log-mean-exp is banked and the
 * block resets, so log Z = sum(banked blocks) + log-mean-exp(final block);
 * every-step resampling is the block-length-1 special case and no resampling
 * recovers SIS.
 *
 * Randomness discipline: the token draw for particle k at step t always comes
 * from the substream keyed (seed, proposal, k, t) and resampling from
 * (seed, resample, t), so a no-resample run consumes exactly the randomness of
 * the SIS path (their outputs match bitwise) and per-particle work can be
 * farmed out to threads without changing any result.
 */

enum class ScheduleKind { never, every_step, at_times, adaptive_ess };

struct ResampleSchedule {
  ScheduleKind kind = ScheduleKind::never;
  std::vector<int> times;      // at_times, strictly increasing, all < T
  double ess_fraction = 0.5;   // adaptive_ess threshold (resample if ESS < f*K)

  static ResampleSchedule never() { return {}; }
  static ResampleSchedule every_step() {
    return {ScheduleKind::every_step, {}, 0.5};
  }
  static ResampleSchedule at(std::vector<int> ts) {
    if (!ts.empty() && ts.front() < 1)
      throw BadConfig("resample times must be >= 1");
    for (std::size_t i = 1; i < ts.size(); ++i)
      if (ts[i] <= ts[i - 1])
        throw BadConfig("resample times must be strictly increasing");
    return {ScheduleKind::at_times, std::move(ts), 0.5};
  }
  static ResampleSchedule ess(double fraction = 0.5) {
    if (!(fraction > 0.0) || fraction > 1.0)
      throw BadConfig("ess fraction must lie in (0, 1]");
    return {ScheduleKind::adaptive_ess, {}, fraction};
  }

  bool should_resample(int t, int horizon,
                       std::span<const double> log_w_block) const {
    if (t >= horizon) return false;
    switch (kind) {
      case ScheduleKind::never: return false;
      case ScheduleKind::every_step: return true;
      case ScheduleKind::at_times:
        for (int x : times) if (x == t) return true;
        return false;
      case ScheduleKind::adaptive_ess:
        return effective_sample_size(log_w_block) <
               ess_fraction * static_cast<double>(log_w_block.size());
    }
    return false;
  }

  std::string name() const {
    switch (kind) {
      case ScheduleKind::never: return "never";
      case ScheduleKind::every_step: return "every_step";
      case ScheduleKind::at_times: {
        std::string s = "at";
        for (int t : times) s += "_" + std::to_string(t);
        return s;
      }
      case ScheduleKind::adaptive_ess: return "ess";
    }
    return "?";
  }
};

struct ParticleSystem {
  int K = 0;
  int t = 0;
  std::vector<Sequence> sequences;
  std::vector<double> log_w_block;          // accumulated since last resample
  std::vector<std::vector<int>> ancestry;   // one row of K parents per resample
  std::vector<double> log_z_blocks;         // banked log-mean-exp terms
  std::vector<double> cum_proposal_logprob; // per-particle log q(s_{1:t})
};

inline double ess(std::span<const double> log_w_block) {
  return effective_sample_size(log_w_block);
}

// Draw K parents from the normalized block weights, clone, bank the block's
// log-mean-exp, zero the block.
inline void multinomial_resample(ParticleSystem& ps, RngStream& rng) {
  double z = log_sum_exp(ps.log_w_block);
  if (z == kNegInf)
    throw DegenerateWeights("multinomial_resample: all block weights zero");
  std::vector<int> parents(ps.K);
  for (int k = 0; k < ps.K; ++k)
    parents[k] = sample_categorical_logits(ps.log_w_block, rng);
  std::vector<Sequence> seqs(ps.K);
  std::vector<double> cq(ps.K);
  for (int k = 0; k < ps.K; ++k) {
    seqs[k] = ps.sequences[parents[k]];
    cq[k] = ps.cum_proposal_logprob[parents[k]];
  }
  ps.sequences = std::move(seqs);
  ps.cum_proposal_logprob = std::move(cq);
  ps.log_z_blocks.push_back(z - std::log(static_cast<double>(ps.K)));
  ps.ancestry.push_back(std::move(parents));
  std::fill(ps.log_w_block.begin(), ps.log_w_block.end(), 0.0);
}

// log w_t = log p0/q + log phi_{t-1} + log psi_t - log psi_{t-1}, with the
// exact final potential in place of psi_T (tw == nullptr means log psi == 0).
inline double incremental_log_weight_given(
    const TargetSpec& spec, const TwistSet* tw, int t,
    const Sequence& seq_with_token, double p0_logprob_of_token,
    double proposal_logprob_of_token) {
  const int T = spec.horizon();
  double lw = p0_logprob_of_token - proposal_logprob_of_token;
  Sequence prefix(seq_with_token.begin(), seq_with_token.end() - 1);
  if (t >= 2) {
    lw += spec.log_potential(prefix, t - 1);
    if (tw) lw -= tw->log_twist(t - 1, prefix, spec.conditioning);
  }
  if (t < T) {
    if (tw) lw += tw->log_twist(t, seq_with_token, spec.conditioning);
  } else {
    lw += spec.log_potential(seq_with_token, T);
  }
  return lw;
}

inline double incremental_log_weight(const TargetSpec& spec, const TwistSet* tw,
                                     int t, const Sequence& seq_with_token,
                                     double proposal_logprob_of_token) {
  Sequence prefix(seq_with_token.begin(), seq_with_token.end() - 1);
  double lp0 = spec.model->next_token_logprobs(prefix)[seq_with_token.back()];
  return incremental_log_weight_given(spec, tw, t, seq_with_token, lp0,
                                      proposal_logprob_of_token);
}

// twisted: targets p0 * prod(phi) * psi_t (the usual construction).
// proposal_induced_normalized: intermediate targets are the normalized product
// of proposal conditionals, so every intermediate weight is exactly 0 in log
// scale and only the final step carries log sigma~/q.
enum class TargetMode { twisted, proposal_induced_normalized };

struct SmcOptions {
  ResampleSchedule schedule = ResampleSchedule::never();
  TargetMode target_mode = TargetMode::twisted;
  int n_threads = 1;
};

struct SmcResult {
  ParticleSystem ps;
  double log_z_hat = 0.0;
};

namespace detail {

// Strided parallel loop over particle indices. Writes are per-slot and
// randomness is per-substream, so results match the sequential loop bitwise.
// The first worker exception is rethrown on the calling thread after join.
template <typename Fn>
inline void for_each_particle(int K, int n_threads, Fn&& fn) {
  if (n_threads <= 1 || K <= 1) {
    for (int k = 0; k < K; ++k) fn(k);
    return;
  }
  int n = std::min(n_threads, K);
  std::vector<std::thread> pool;
  pool.reserve(n);
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < n; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (int k = w; k < K; k += n) fn(k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct StepOutcome {
  double extend(const TargetSpec& spec, const Proposal& proposal,
                const TwistSet* tw, TargetMode mode, int t, int horizon,
                Sequence& seq, double& cum_q, RngStream rng) {
    auto p0_row = spec.model->next_token_logprobs(seq);
    auto q_row = proposal.logprobs(spec, t, seq, p0_row);
    int s = sample_categorical_logits(q_row, rng);
    seq.push_back(static_cast<Token>(s));
    double lw;
    if (mode == TargetMode::proposal_induced_normalized) {
      lw = t < horizon ? 0.0
                       : spec.log_unnormalized(seq) - (cum_q + q_row[s]);
    } else {
      lw = incremental_log_weight_given(spec, tw, t, seq, p0_row[s], q_row[s]);
    }
    cum_q += q_row[s];
    return lw;
  }
};

}  // namespace detail

inline SmcResult run_smc(const TargetSpec& spec, const Proposal& proposal,
                         const TwistSet* tw, int K, RngStream base,
                         const SmcOptions& opt = {}) {
  if (K < 1) throw BadInput("run_smc: K must be >= 1");
  const int T = spec.horizon();
  ParticleSystem ps;
  ps.K = K;
  ps.sequences.assign(K, {});
  ps.log_w_block.assign(K, 0.0);
  ps.cum_proposal_logprob.assign(K, 0.0);
  detail::StepOutcome step;
  for (int t = 1; t <= T; ++t) {
    detail::for_each_particle(K, opt.n_threads, [&](int k) {
      RngStream rng = base.substream(rngtag::proposal,
                                     static_cast<std::uint64_t>(k),
                                     static_cast<std::uint64_t>(t));
      ps.log_w_block[k] += step.extend(spec, proposal, tw, opt.target_mode, t,
                                       T, ps.sequences[k],
                                       ps.cum_proposal_logprob[k], rng);
    });
    ps.t = t;
    if (opt.schedule.should_resample(t, T, ps.log_w_block)) {
      RngStream rng =
          base.substream(rngtag::resample, static_cast<std::uint64_t>(t));
      multinomial_resample(ps, rng);
    }
  }
  double log_z =
      std::accumulate(ps.log_z_blocks.begin(), ps.log_z_blocks.end(), 0.0) +
      log_mean_exp(ps.log_w_block);
  return {std::move(ps), log_z};
}

// SIS over full sequences: K independent chains, one weight each. Consumes
// the same substreams as run_smc with the never schedule, which it must match
// bitwise.
inline SmcResult run_sis(const TargetSpec& spec, const Proposal& proposal,
                         const TwistSet* tw, int K, RngStream base,
                         TargetMode mode = TargetMode::twisted) {
  if (K < 1) throw BadInput("run_sis: K must be >= 1");
  const int T = spec.horizon();
  ParticleSystem ps;
  ps.K = K;
  ps.sequences.assign(K, {});
  ps.log_w_block.assign(K, 0.0);
  ps.cum_proposal_logprob.assign(K, 0.0);
  detail::StepOutcome step;
  for (int k = 0; k < K; ++k) {
    for (int t = 1; t <= T; ++t) {
      RngStream rng = base.substream(rngtag::proposal,
                                     static_cast<std::uint64_t>(k),
                                     static_cast<std::uint64_t>(t));
      ps.log_w_block[k] += step.extend(spec, proposal, tw, mode, t, T,
                                       ps.sequences[k],
                                       ps.cum_proposal_logprob[k], rng);
    }
  }
  ps.t = T;
  double log_z = log_mean_exp(ps.log_w_block);
  return {std::move(ps), log_z};
}

/**
 * One draw of the upper-bound estimator: SMC in the extended state space with
 * a uniformly chosen index pinned to an exact target sample. The pinned index
 * is redrawn uniformly at initialization and at every resample time; the
 * other indices resample from the full block-weight vector, which includes
 * the exact sample's weight.
 */
inline SmcResult run_smc_target(const TargetSpec& spec,
                                const Proposal& proposal, const TwistSet* tw,
                                int K, RngStream base, const SmcOptions& opt,
                                const Sequence& exact_sample) {
  if (K < 1) throw BadInput("run_smc_target: K must be >= 1");
  const int T = spec.horizon();
  if (static_cast<int>(exact_sample.size()) != T)
    throw BadInput("run_smc_target: exact sample must have length T");
  ParticleSystem ps;
  ps.K = K;
  ps.sequences.assign(K, {});
  ps.log_w_block.assign(K, 0.0);
  ps.cum_proposal_logprob.assign(K, 0.0);
  RngStream pin = base.substream(rngtag::pin);
  int j = pin.uniform_int(K);
  for (int t = 1; t <= T; ++t) {
    detail::for_each_particle(K, opt.n_threads, [&](int k) {
      Sequence& seq = ps.sequences[k];
      auto p0_row = spec.model->next_token_logprobs(seq);
      auto q_row = proposal.logprobs(spec, t, seq, p0_row);
      int s;
      if (k == j) {
        s = exact_sample[t - 1];
      } else {
        RngStream rng = base.substream(rngtag::proposal,
                                       static_cast<std::uint64_t>(k),
                                       static_cast<std::uint64_t>(t));
        s = sample_categorical_logits(q_row, rng);
      }
      seq.push_back(static_cast<Token>(s));
      double lw;
      if (opt.target_mode == TargetMode::proposal_induced_normalized) {
        lw = t < T ? 0.0
                   : spec.log_unnormalized(seq) -
                         (ps.cum_proposal_logprob[k] + q_row[s]);
      } else {
        lw = incremental_log_weight_given(spec, tw, t, seq, p0_row[s],
                                          q_row[s]);
      }
      ps.cum_proposal_logprob[k] += q_row[s];
      ps.log_w_block[k] += lw;
    });
    ps.t = t;
    if (opt.schedule.should_resample(t, T, ps.log_w_block)) {
      double z = log_sum_exp(ps.log_w_block);
      if (z == kNegInf)
        throw DegenerateWeights("run_smc_target: all block weights zero");
      int j_new = pin.uniform_int(K);
      RngStream rng =
          base.substream(rngtag::resample, static_cast<std::uint64_t>(t));
      std::vector<int> parents(K);
      std::vector<Sequence> seqs(K);
      std::vector<double> cq(K);
      for (int k = 0; k < K; ++k) {
        parents[k] = k == j_new
                         ? j
                         : sample_categorical_logits(ps.log_w_block, rng);
        seqs[k] = ps.sequences[parents[k]];
        cq[k] = ps.cum_proposal_logprob[parents[k]];
      }
      ps.sequences = std::move(seqs);
      ps.cum_proposal_logprob = std::move(cq);
      ps.log_z_blocks.push_back(z - std::log(static_cast<double>(K)));
      ps.ancestry.push_back(std::move(parents));
      std::fill(ps.log_w_block.begin(), ps.log_w_block.end(), 0.0);
      j = j_new;
    }
  }
  double log_z =
      std::accumulate(ps.log_z_blocks.begin(), ps.log_z_blocks.end(), 0.0) +
      log_mean_exp(ps.log_w_block);
  return {std::move(ps), log_z};
}

class ExactSampleSource {
 public:
  virtual ~ExactSampleSource() = default;
  virtual Sequence draw(RngStream& rng) = 0;
};

class OracleExactSource : public ExactSampleSource {
 public:
  explicit OracleExactSource(const OracleTable& table) : table_(&table) {}
  Sequence draw(RngStream& rng) override {
    return exact_target_sample(*table_, rng);
  }

 private:
  const OracleTable* table_;
};

class RejectionExactSource : public ExactSampleSource {
 public:
  RejectionExactSource(const TargetSpec& spec, int max_draws = 1'000'000)
      : spec_(&spec), max_draws_(max_draws) {}
  Sequence draw(RngStream& rng) override {
    return rejection_sample_exact(*spec_, rng, max_draws_);
  }

 private:
  const TargetSpec* spec_;
  int max_draws_;
};

// Joint BDMC draws accepted when the realized observation matches the spec's
// conditioning value, so the returned sequence is exact for the fixed
// posterior.
class BdmcExactSource : public ExactSampleSource {
 public:
  BdmcExactSource(const TargetSpec& spec, int max_draws = 1'000'000)
      : spec_(&spec), max_draws_(max_draws) {
    if (!spec.observation.has_value() || !spec.conditioning.has_value())
      throw Unsupported("bdmc source: spec must be conditioned");
  }
  Sequence draw(RngStream& rng) override {
    for (int i = 0; i < max_draws_; ++i) {
      auto [seq, o] = bdmc_exact_posterior_sample(*spec_, rng);
      if (o == *spec_->conditioning) return seq;
    }
    throw Exhausted("bdmc source: no draw matched the conditioning value");
  }

 private:
  const TargetSpec* spec_;
  int max_draws_;
};

struct BoundReport {
  int K = 0;
  int n_runs = 0;
  std::vector<double> lb_samples;
  std::vector<double> ub_samples;  // empty when no exact-sample source
  double lb_mean = 0.0, lb_se = 0.0, lb_ci_half = 0.0;
  double ub_mean = 0.0, ub_se = 0.0, ub_ci_half = 0.0;
};

namespace detail {
inline void mean_se(std::span<const double> xs, double& mean, double& se,
                    double& half) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size() - 1);
  se = std::sqrt(var / static_cast<double>(xs.size()));
  half = 1.96 * se;
}
}  // namespace detail

inline BoundReport bidirectional_bounds(
    const TargetSpec& spec, const Proposal& proposal, const TwistSet* tw,
    int K, int n_runs, const SmcOptions& opt, ExactSampleSource* exact_source,
    RngStream base, bool redraw_exact_per_run = true, bool want_ub = true) {
  if (n_runs < 2) throw BadInput("bidirectional_bounds: need n_runs >= 2");
  if (want_ub && !exact_source)
    throw Unsupported(
        "bidirectional_bounds: upper bounds need an exact-sample source");
  BoundReport report;
  report.K = K;
  report.n_runs = n_runs;
  for (int i = 0; i < n_runs; ++i) {
    auto r = run_smc(spec, proposal, tw, K,
                     base.substream(rngtag::lower_bound, i), opt);
    report.lb_samples.push_back(r.log_z_hat);
  }
  detail::mean_se(report.lb_samples, report.lb_mean, report.lb_se,
                  report.lb_ci_half);
  if (want_ub && exact_source) {
    std::optional<Sequence> held;
    for (int i = 0; i < n_runs; ++i) {
      if (!held.has_value() || redraw_exact_per_run) {
        RngStream rng = base.substream(rngtag::exact_sample, i);
        held = exact_source->draw(rng);
      }
      auto r = run_smc_target(spec, proposal, tw, K,
                              base.substream(rngtag::upper_bound, i), opt,
                              *held);
      report.ub_samples.push_back(r.log_z_hat);
    }
    detail::mean_se(report.ub_samples, report.ub_mean, report.ub_se,
                    report.ub_ci_half);
  }
  return report;
}

struct KlReport {
  double kl_q_sigma = 0.0, kl_q_sigma_se = 0.0;
  double kl_sigma_q = 0.0, kl_sigma_q_se = 0.0;
};

// KL(q||sigma) = E_q[log q - log sigma~] + log Z;
// KL(sigma||q) = E_sigma[log sigma~ - log q] - log Z.
// The log Z estimate enters as a constant shift; SEs cover the expectations.
inline KlReport estimate_kls(const TargetSpec& spec,
                             const SequenceDistribution& q,
                             double log_z_estimate, int n_q_samples,
                             std::span<const Sequence> exact_sigma_samples,
                             RngStream rng) {
  if (n_q_samples < 2 || exact_sigma_samples.size() < 2)
    throw BadInput("estimate_kls: need at least two samples per direction");
  KlReport out;
  std::vector<double> terms(n_q_samples);
  for (int i = 0; i < n_q_samples; ++i) {
    Sequence s = q.sample(rng);
    terms[i] = q.log_prob(s) - spec.log_unnormalized(s);
  }
  double m, se, half;
  detail::mean_se(terms, m, se, half);
  out.kl_q_sigma = m + log_z_estimate;
  out.kl_q_sigma_se = se;
  terms.resize(exact_sigma_samples.size());
  for (std::size_t i = 0; i < exact_sigma_samples.size(); ++i) {
    const Sequence& s = exact_sigma_samples[i];
    terms[i] = spec.log_unnormalized(s) - q.log_prob(s);
  }
  detail::mean_se(terms, m, se, half);
  out.kl_sigma_q = m - log_z_estimate;
  out.kl_sigma_q_se = se;
  return out;
}

// Draw one approximate posterior sample from the final self-normalized block
// weights. Callers pass a system that has reached t = T.
inline Sequence select_posterior_sample(const ParticleSystem& ps,
                                        RngStream& rng) {
  if (ps.sequences.empty() ||
      static_cast<int>(ps.sequences.front().size()) != ps.t || ps.t < 1)
    throw BadInput("select_posterior_sample: system has not reached t = T");
  int idx = sample_categorical_logits(ps.log_w_block, rng);
  return ps.sequences[idx];
}

}  // namespace twistsmc
