#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "twistsmc/engine.hpp"
#include "twistsmc/errors.hpp"
#include "twistsmc/oracle.hpp"
#include "twistsmc/proposal.hpp"
#include "twistsmc/targets.hpp"
#include "twistsmc/twist.hpp"

namespace twistsmc::learn {

/**
 * Twist- and proposal-learning losses with analytic gradients. Every *_grad
 * returns the gradient to descend. Stochastic paths take sampled batches; the
 * *_enum variants evaluate the same objectives with exact expectations at
 * enumeration scale and back the optimum and finite-difference tests.
 *
 * Losses with bootstrapped targets (rl, softq) take a `frozen` twist set for
 * the stop-gradient side; passing the live set gives the usual semi-gradient
 * update.
 */

struct WeightedSeqs {
  std::vector<Sequence> seqs;
  std::vector<double> weights;  // self-normalized, sum to 1
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

inline std::vector<double> normalized_weights(std::span<const double> log_w) {
  double z = log_sum_exp(log_w);
  if (z == kNegInf)
    throw DegenerateWeights("normalized_weights: all weights zero");
  std::vector<double> out(log_w.size());
  for (std::size_t i = 0; i < log_w.size(); ++i)
    out[i] = std::exp(log_w[i] - z);
  return out;
}

namespace detail {

inline Sequence truncate(const Sequence& seq, int t) {
  return Sequence(seq.begin(), seq.begin() + t);
}

inline double clamp_prob(double v) {
  return std::min(v, 1.0 - 1e-12);
}

// sigma(o_T | s_{1:T}) for conditional specs, else the terminal potential,
// which must itself be a probability for classification-style losses.
inline double fudge_target_logprob(const TargetSpec& spec,
                                   const Sequence& seq) {
  if (spec.observation.has_value()) {
    if (!spec.conditioning.has_value())
      throw MissingObservation("fudge: conditional spec without observation");
    return spec.observation->log_likelihood(seq, *spec.conditioning);
  }
  double lp = spec.potential.log_phi(seq, spec.horizon(), spec.horizon());
  if (lp > 1e-12)
    throw Unsupported("fudge: terminal potential is not a probability");
  return std::min(lp, 0.0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CTL: gradient of sum_t KL(sigma_t || pi_t^theta). Positive weights come
// from the true terminal potential over full sequences (shared across t by
// truncation); negative weights are per-step SIS/SMC weights under pi_t^theta.
// ---------------------------------------------------------------------------

inline std::vector<double> ctl_grad(const TwistSet& tw, const TargetSpec& spec,
                                    const WeightedSeqs& positives,
                                    const std::vector<WeightedSeqs>& negatives,
                                    double* contrast_out = nullptr) {
  const int T = spec.horizon();
  if (static_cast<int>(negatives.size()) != T)
    throw BadInput("ctl_grad: need one negative set per step");
  if (positives.seqs.size() != positives.weights.size())
    throw BadInput("ctl_grad: positive sample/weight size mismatch");
  std::vector<double> grad(tw.param_count(), 0.0);
  double contrast = 0.0;
  for (int t = 1; t <= T; ++t) {
    for (std::size_t i = 0; i < positives.seqs.size(); ++i) {
      double v = tw.add_grad_log_twist(t, detail::truncate(positives.seqs[i], t),
                                       spec.conditioning,
                                       -positives.weights[i], grad);
      contrast -= positives.weights[i] * v;
    }
    const WeightedSeqs& neg = negatives[t - 1];
    if (neg.seqs.size() != neg.weights.size())
      throw BadInput("ctl_grad: negative sample/weight size mismatch");
    for (std::size_t j = 0; j < neg.seqs.size(); ++j) {
      if (static_cast<int>(neg.seqs[j].size()) != t)
        throw BadInput("ctl_grad: negative prefix has wrong length");
      double v = tw.add_grad_log_twist(t, neg.seqs[j], spec.conditioning,
                                       neg.weights[j], grad);
      contrast += neg.weights[j] * v;
    }
  }
  if (contrast_out) *contrast_out = contrast;
  return grad;
}

inline std::vector<double> ctl_grad_enum(const TwistSet& tw,
                                         const TargetSpec& spec,
                                         const OracleTable& oracle) {
  const int T = spec.horizon();
  const int V = spec.vocab();
  PrefixEnum pe = enumerate_prefixes(spec);
  std::vector<double> grad(tw.param_count(), 0.0);
  for (int t = 1; t <= T; ++t) {
    std::uint64_t n = ipow_u64(V, t);
    std::vector<double> log_pi(n);
    std::vector<double> log_psi_vals(n);
    for (std::uint64_t r = 0; r < n; ++r) {
      Sequence prefix = prefix_from_rank(r, t, V);
      log_psi_vals[r] = tw.log_twist(t, prefix, spec.conditioning);
      log_pi[r] =
          pe.log_p0[t - 1][r] + pe.log_phi_cum[t - 1][r] + log_psi_vals[r];
    }
    double z = log_sum_exp(log_pi);
    for (std::uint64_t r = 0; r < n; ++r) {
      double pos_w = std::exp(oracle.log_marginal[t - 1][r]);
      double neg_w = std::exp(log_pi[r] - z);
      double coeff = -pos_w + neg_w;
      if (coeff != 0.0)
        tw.add_grad_log_twist(t, prefix_from_rank(r, t, V), spec.conditioning,
                              coeff, grad);
    }
  }
  return grad;
}

// exact sum_t KL(sigma_t || pi_t^theta), the quantity ctl gradients descend
inline double ctl_exact_loss(const TwistSet& tw, const TargetSpec& spec,
                             const OracleTable& oracle) {
  const int T = spec.horizon();
  const int V = spec.vocab();
  PrefixEnum pe = enumerate_prefixes(spec);
  double total = 0.0;
  for (int t = 1; t <= T; ++t) {
    std::uint64_t n = ipow_u64(V, t);
    std::vector<double> log_pi(n);
    for (std::uint64_t r = 0; r < n; ++r)
      log_pi[r] = pe.log_p0[t - 1][r] + pe.log_phi_cum[t - 1][r] +
                  tw.log_twist(t, prefix_from_rank(r, t, V), spec.conditioning);
    double z = log_sum_exp(log_pi);
    for (std::uint64_t r = 0; r < n; ++r) {
      double ls = oracle.log_marginal[t - 1][r];
      if (ls == kNegInf) continue;
      total += std::exp(ls) * (ls - (log_pi[r] - z));
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// RL baseline / soft-Q: squared log-consistency of the twist recursion with a
// stop-gradient target. rl_grad is the terminal-potential-only form; softq
// carries intermediate potentials phi_t.
// ---------------------------------------------------------------------------

namespace detail {

inline LossGrad recursion_squared_grad(const TwistSet& tw,
                                       const TwistSet& frozen,
                                       const TargetSpec& spec,
                                       const std::vector<Sequence>& batch,
                                       bool with_intermediate) {
  if (batch.empty()) throw BadInput("rl/softq: empty batch");
  const int T = spec.horizon();
  const int V = spec.vocab();
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Sequence& seq : batch) {
    if (static_cast<int>(seq.size()) != T)
      throw BadInput("rl/softq: batch sequences must have length T");
    for (int t = 1; t < T; ++t) {
      Sequence prefix = detail::truncate(seq, t);
      auto row = spec.model->next_token_logprobs(prefix);
      std::vector<double> terms(V);
      Sequence child = prefix;
      child.push_back(0);
      for (int s = 0; s < V; ++s) {
        child.back() = static_cast<Token>(s);
        terms[s] = row[s] + frozen.log_twist(t + 1, child, spec.conditioning);
      }
      double target = log_sum_exp(terms);
      if (with_intermediate) target += spec.log_potential(prefix, t);
      double v = tw.log_twist(t, prefix, spec.conditioning);
      double resid = target - v;
      out.loss += scale * resid * resid;
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            -2.0 * scale * resid, out.grad);
    }
    double resid = spec.log_potential(seq, T) -
                   tw.log_twist(T, seq, spec.conditioning);
    out.loss += scale * resid * resid;
    tw.add_grad_log_twist(T, seq, spec.conditioning, -2.0 * scale * resid,
                          out.grad);
  }
  return out;
}

}  // namespace detail

inline LossGrad rl_grad(const TwistSet& tw, const TwistSet& frozen,
                        const TargetSpec& spec,
                        const std::vector<Sequence>& batch) {
  if (spec.potential.has_intermediate())
    throw Unsupported("rl_grad: use softq_grad with intermediate potentials");
  return detail::recursion_squared_grad(tw, frozen, spec, batch, false);
}

inline LossGrad softq_grad(const TwistSet& tw, const TwistSet& frozen,
                           const TargetSpec& spec,
                           const std::vector<Sequence>& batch) {
  return detail::recursion_squared_grad(tw, frozen, spec, batch, true);
}

// ---------------------------------------------------------------------------
// SIXO: per-step binary classification of target-marginal vs base-model
// prefixes; the minimizer is the density ratio sigma_t / p0.
// ---------------------------------------------------------------------------

namespace detail {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

inline LossGrad sixo_grad(const TwistSet& tw, const TargetSpec& spec,
                          const WeightedSeqs& positives,
                          const std::vector<Sequence>& negatives) {
  if (positives.seqs.empty() || negatives.empty())
    throw BadInput("sixo_grad: empty sample sets");
  const int T = spec.horizon();
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  const double neg_w = 1.0 / static_cast<double>(negatives.size());
  for (int t = 1; t <= T; ++t) {
    for (std::size_t i = 0; i < positives.seqs.size(); ++i) {
      Sequence prefix = detail::truncate(positives.seqs[i], t);
      double v = tw.log_twist(t, prefix, spec.conditioning);
      out.loss += positives.weights[i] * detail::softplus(-v);
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            -positives.weights[i] * (1.0 - detail::sigmoid(v)),
                            out.grad);
    }
    for (const Sequence& seq : negatives) {
      Sequence prefix = detail::truncate(seq, t);
      double v = tw.log_twist(t, prefix, spec.conditioning);
      out.loss += neg_w * detail::softplus(v);
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            neg_w * detail::sigmoid(v), out.grad);
    }
  }
  return out;
}

inline LossGrad sixo_grad_enum(const TwistSet& tw, const TargetSpec& spec,
                               const OracleTable& oracle) {
  const int T = spec.horizon();
  const int V = spec.vocab();
  PrefixEnum pe = enumerate_prefixes(spec);
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  for (int t = 1; t <= T; ++t) {
    for (std::uint64_t r = 0; r < ipow_u64(V, t); ++r) {
      Sequence prefix = prefix_from_rank(r, t, V);
      double v = tw.log_twist(t, prefix, spec.conditioning);
      double wp = std::exp(oracle.log_marginal[t - 1][r]);
      double wn = std::exp(pe.log_p0[t - 1][r]);
      out.loss += wp * detail::softplus(-v) + wn * detail::softplus(v);
      double coeff =
          -wp * (1.0 - detail::sigmoid(v)) + wn * detail::sigmoid(v);
      if (coeff != 0.0)
        tw.add_grad_log_twist(t, prefix, spec.conditioning, coeff, out.grad);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// FUDGE: cross-entropy toward the conditional likelihood sigma(o | s_{1:t}),
// with base-model rollouts supplying the future. Requires the probability
// head so psi stays in (0, 1).
// ---------------------------------------------------------------------------

inline LossGrad fudge_grad(const TwistSet& tw, const TargetSpec& spec,
                           const std::vector<Sequence>& p0_rollouts) {
  if (tw.head() != TwistHead::prob_sigmoid)
    throw BadParameterization("fudge: twists must use the probability head");
  if (p0_rollouts.empty()) throw BadInput("fudge_grad: empty batch");
  const int T = spec.horizon();
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  const double scale = 1.0 / static_cast<double>(p0_rollouts.size());
  for (const Sequence& seq : p0_rollouts) {
    double p = std::exp(detail::fudge_target_logprob(spec, seq));
    for (int t = 1; t <= T; ++t) {
      Sequence prefix = detail::truncate(seq, t);
      double lv = tw.log_twist(t, prefix, spec.conditioning);
      double v = detail::clamp_prob(std::exp(lv));
      out.loss -= scale * (p * lv + (1.0 - p) * std::log1p(-v));
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            scale * (v - p) / (1.0 - v), out.grad);
    }
  }
  return out;
}

inline LossGrad fudge_grad_enum(const TwistSet& tw, const TargetSpec& spec) {
  if (tw.head() != TwistHead::prob_sigmoid)
    throw BadParameterization("fudge: twists must use the probability head");
  const int T = spec.horizon();
  const int V = spec.vocab();
  std::uint64_t n = checked_pow(V, T, kDefaultEnumGuard);
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  for (std::uint64_t r = 0; r < n; ++r) {
    Sequence seq = prefix_from_rank(r, T, V);
    double w = std::exp(spec.model->sequence_logprob(seq));
    if (w == 0.0) continue;
    double p = std::exp(detail::fudge_target_logprob(spec, seq));
    for (int t = 1; t <= T; ++t) {
      Sequence prefix = detail::truncate(seq, t);
      double lv = tw.log_twist(t, prefix, spec.conditioning);
      double v = detail::clamp_prob(std::exp(lv));
      out.loss -= w * (p * lv + (1.0 - p) * std::log1p(-v));
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            w * (v - p) / (1.0 - v), out.grad);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CD-Q / CD-FUDGE: squared-error recursions in natural scale. CD-FUDGE's
// rollouts must come from the base model so its minimizer is the conditional
// expectation E_p0[phi | s_{1:t}].
// ---------------------------------------------------------------------------

inline LossGrad cdq_grad(const TwistSet& tw, const TargetSpec& spec,
                         const std::vector<Sequence>& batch) {
  if (batch.empty()) throw BadInput("cdq_grad: empty batch");
  const int T = spec.horizon();
  const int V = spec.vocab();
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Sequence& seq : batch) {
    for (int t = 1; t < T; ++t) {
      Sequence prefix = detail::truncate(seq, t);
      auto row = spec.model->next_token_logprobs(prefix);
      std::vector<double> terms(V);
      Sequence child = prefix;
      child.push_back(0);
      for (int s = 0; s < V; ++s) {
        child.back() = static_cast<Token>(s);
        terms[s] = row[s] + tw.log_twist(t + 1, child, spec.conditioning);
      }
      double big_s = std::exp(log_sum_exp(terms));
      double psi_t =
          std::exp(tw.log_twist(t, prefix, spec.conditioning));
      double resid = big_s - psi_t;
      out.loss += scale * resid * resid;
      for (int s = 0; s < V; ++s) {
        child.back() = static_cast<Token>(s);
        tw.add_grad_log_twist(t + 1, child, spec.conditioning,
                              2.0 * scale * resid * std::exp(terms[s]),
                              out.grad);
      }
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            -2.0 * scale * resid * psi_t, out.grad);
    }
    double phi = std::exp(spec.log_potential(seq, T));
    double psi_T = std::exp(tw.log_twist(T, seq, spec.conditioning));
    double resid = phi - psi_T;
    out.loss += scale * resid * resid;
    tw.add_grad_log_twist(T, seq, spec.conditioning,
                          -2.0 * scale * resid * psi_T, out.grad);
  }
  return out;
}

inline LossGrad cdfudge_grad(const TwistSet& tw, const TargetSpec& spec,
                             const std::vector<Sequence>& p0_rollouts) {
  if (p0_rollouts.empty()) throw BadInput("cdfudge_grad: empty batch");
  const int T = spec.horizon();
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  const double scale = 1.0 / static_cast<double>(p0_rollouts.size());
  for (const Sequence& seq : p0_rollouts) {
    double phi = std::exp(spec.log_potential(seq, T));
    for (int t = 1; t <= T; ++t) {
      Sequence prefix = detail::truncate(seq, t);
      double psi = std::exp(tw.log_twist(t, prefix, spec.conditioning));
      double resid = psi - phi;
      out.loss += scale * resid * resid;
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            2.0 * scale * resid * psi, out.grad);
    }
  }
  return out;
}

inline LossGrad cdfudge_grad_enum(const TwistSet& tw, const TargetSpec& spec) {
  const int T = spec.horizon();
  const int V = spec.vocab();
  std::uint64_t n = checked_pow(V, T, kDefaultEnumGuard);
  LossGrad out;
  out.grad.assign(tw.param_count(), 0.0);
  for (std::uint64_t r = 0; r < n; ++r) {
    Sequence seq = prefix_from_rank(r, T, V);
    double w = std::exp(spec.model->sequence_logprob(seq));
    if (w == 0.0) continue;
    double phi = std::exp(spec.log_potential(seq, T));
    for (int t = 1; t <= T; ++t) {
      Sequence prefix = detail::truncate(seq, t);
      double psi = std::exp(tw.log_twist(t, prefix, spec.conditioning));
      double resid = psi - phi;
      out.loss += w * resid * resid;
      tw.add_grad_log_twist(t, prefix, spec.conditioning,
                            2.0 * w * resid * psi, out.grad);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// One-step PCL on the value parameterization Phi_t (Phi_T = 1), with an
// arbitrary fixed proposal. The empty-prefix value Phi_0 is the root-value
// cell when the twist set carries one (its optimum is Z, the soft value of
// the initial state); otherwise Phi_0 is pinned to 1 and the residuals must
// absorb log Z. Zero at the oracle values under the twist-induced proposal.
// ---------------------------------------------------------------------------

inline LossGrad pcl1_grad(const TwistSet& value_twists, const TargetSpec& spec,
                          const Proposal& proposal,
                          const std::vector<Sequence>& batch) {
  if (batch.empty()) throw BadInput("pcl1_grad: empty batch");
  const int T = spec.horizon();
  LossGrad out;
  out.grad.assign(value_twists.param_count(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Sequence& seq : batch) {
    double prev_log_phi_value =
        value_twists.has_root_value()
            ? value_twists.log_twist(0, {}, spec.conditioning)
            : 0.0;
    Sequence prefix;
    for (int t = 1; t <= T; ++t) {
      auto p0_row = spec.model->next_token_logprobs(prefix);
      auto q_row = proposal.logprobs(spec, t, prefix, p0_row);
      Token s = seq[t - 1];
      prefix.push_back(s);
      double log_phi_value =
          t < T ? value_twists.log_twist(t, prefix, spec.conditioning) : 0.0;
      double resid = spec.log_potential(prefix, t) + log_phi_value -
                     prev_log_phi_value - (q_row[s] - p0_row[s]);
      out.loss += scale * resid * resid;
      if (t < T)
        value_twists.add_grad_log_twist(t, prefix, spec.conditioning,
                                        2.0 * scale * resid, out.grad);
      if (t >= 2)
        value_twists.add_grad_log_twist(
            t - 1, Sequence(prefix.begin(), prefix.end() - 1),
            spec.conditioning, -2.0 * scale * resid, out.grad);
      else if (value_twists.has_root_value())
        value_twists.add_grad_log_twist(0, {}, spec.conditioning,
                                        -2.0 * scale * resid, out.grad);
      prev_log_phi_value = log_phi_value;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// DPG: descend KL(sigma || q^xi) for the proposal view q ~ p0 * psi^xi, with
// self-normalized weights from the true target over K proposal samples.
// ---------------------------------------------------------------------------

namespace detail {

// grad += coeff * d log q^xi(seq) / d xi, expanded per step as
// d log psi_t(s_{1:t}) - E_{q_t} d log psi_t
inline void add_grad_log_q(const TwistSet& xi, const TargetSpec& spec,
                           const Sequence& seq, double coeff,
                           std::span<double> grad) {
  TwistParamProposal view(xi);
  Sequence prefix;
  for (int t = 1; t <= spec.horizon(); ++t) {
    auto p0_row = spec.model->next_token_logprobs(prefix);
    auto q_row = view.logprobs(spec, t, prefix, p0_row);
    Sequence child = prefix;
    child.push_back(seq[t - 1]);
    xi.add_grad_log_twist(t, child, spec.conditioning, coeff, grad);
    for (int s = 0; s < spec.vocab(); ++s) {
      child.back() = static_cast<Token>(s);
      xi.add_grad_log_twist(t, child, spec.conditioning,
                            -coeff * std::exp(q_row[s]), grad);
    }
    prefix.push_back(seq[t - 1]);
  }
}

}  // namespace detail

inline LossGrad dpg_grad(const TwistSet& xi, const TargetSpec& spec,
                         const std::vector<Sequence>& proposal_samples) {
  if (proposal_samples.size() < 2)
    throw DegenerateWeights("dpg_grad: self-normalization needs K >= 2");
  TwistParamProposal view(xi);
  ProposalSequenceDistribution q(spec, view);
  std::vector<double> log_w(proposal_samples.size());
  std::vector<double> log_q(proposal_samples.size());
  for (std::size_t k = 0; k < proposal_samples.size(); ++k) {
    log_q[k] = q.log_prob(proposal_samples[k]);
    log_w[k] = spec.log_unnormalized(proposal_samples[k]) - log_q[k];
  }
  auto w = normalized_weights(log_w);
  LossGrad out;
  out.grad.assign(xi.param_count(), 0.0);
  for (std::size_t k = 0; k < proposal_samples.size(); ++k) {
    if (w[k] == 0.0) continue;
    out.loss -= w[k] * log_q[k];  // SNIS cross-entropy surrogate
    detail::add_grad_log_q(xi, spec, proposal_samples[k], -w[k], out.grad);
  }
  return out;
}

// exact KL(sigma || q^xi), for finite-difference and optimum checks
inline double dpg_exact_loss(const TwistSet& xi, const TargetSpec& spec) {
  TwistParamProposal view(xi);
  ProposalSequenceDistribution q(spec, view);
  return exact_kl(spec, q, KlDirection::sigma_to_q);
}

inline std::vector<double> dpg_grad_enum(const TwistSet& xi,
                                         const TargetSpec& spec) {
  const int V = spec.vocab();
  const int T = spec.horizon();
  std::uint64_t n = checked_pow(V, T, kDefaultEnumGuard);
  std::vector<double> log_sigma(n);
  for (std::uint64_t r = 0; r < n; ++r)
    log_sigma[r] = spec.log_unnormalized(prefix_from_rank(r, T, V));
  double log_z = log_sum_exp(log_sigma);
  std::vector<double> grad(xi.param_count(), 0.0);
  for (std::uint64_t r = 0; r < n; ++r) {
    double w = std::exp(log_sigma[r] - log_z);
    if (w == 0.0) continue;
    detail::add_grad_log_q(xi, spec, prefix_from_rank(r, T, V), -w, grad);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Optimizers and the training loop
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

inline void adam_step(std::vector<double>& params,
                      std::span<const double> grad, double lr, double beta1,
                      double beta2, double eps, AdamState& state) {
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  state.step += 1;
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    params[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + eps);
  }
}

inline void sgd_step(std::vector<double>& params, std::span<const double> grad,
                     double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

enum class LossKind { ctl, rl, softq, sixo, fudge, cdq, cdfudge, pcl1, dpg };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::ctl: return "ctl";
    case LossKind::rl: return "rl";
    case LossKind::softq: return "softq";
    case LossKind::sixo: return "sixo";
    case LossKind::fudge: return "fudge";
    case LossKind::cdq: return "cdq";
    case LossKind::cdfudge: return "cdfudge";
    case LossKind::pcl1: return "pcl1";
    case LossKind::dpg: return "dpg";
  }
  return "?";
}

enum class PositiveSource {
  exact_oracle,
  exact_rejection,
  exact_bdmc,
  approximate_sis,
  approximate_smc,
};

enum class NegativeProposal { base, twist_induced };

struct LossConfig {
  LossKind loss = LossKind::ctl;
  PositiveSource positive_source = PositiveSource::approximate_sis;
  NegativeProposal negative_proposal = NegativeProposal::twist_induced;
  int batch = 64;
  double learning_rate = 1e-3;
  int steps = 1000;
  std::uint64_t seed = 0;
  bool adam = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 100;
  int rejection_budget = 1'000'000;
};

struct TrainTrace {
  std::vector<int> step;
  std::vector<double> loss;
  std::vector<double> grad_norm;
  std::vector<double> kl_q_sigma;   // oracle-exact, when an oracle is given
  std::vector<double> kl_sigma_q;
  double wall_seconds = 0.0;
};

struct TrainResult {
  TwistSet twists;
  TrainTrace trace;
  bool diverged = false;
};

namespace detail {

inline std::vector<Sequence> draw_rollouts(const TargetSpec& spec,
                                           const Proposal& proposal, int count,
                                           RngStream& rng) {
  ProposalSequenceDistribution dist(spec, proposal);
  std::vector<Sequence> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(dist.sample(rng));
  return out;
}

// SIS weights over full sequences based on the true target potential
inline WeightedSeqs weight_by_target(const TargetSpec& spec,
                                     const Proposal& proposal,
                                     std::vector<Sequence> seqs) {
  ProposalSequenceDistribution dist(spec, proposal);
  std::vector<double> log_w(seqs.size());
  for (std::size_t k = 0; k < seqs.size(); ++k)
    log_w[k] = spec.log_unnormalized(seqs[k]) - dist.log_prob(seqs[k]);
  return {std::move(seqs), normalized_weights(log_w)};
}

// per-step negative weights under pi_t^theta for a shared rollout batch
inline std::vector<WeightedSeqs> ctl_negatives(const TargetSpec& spec,
                                               const TwistSet& tw,
                                               const Proposal& proposal,
                                               const std::vector<Sequence>& seqs) {
  const int T = spec.horizon();
  std::vector<WeightedSeqs> out(T);
  std::vector<double> cum_p0(seqs.size(), 0.0), cum_q(seqs.size(), 0.0),
      cum_phi(seqs.size(), 0.0);
  std::vector<Sequence> prefixes(seqs.size());
  for (int t = 1; t <= T; ++t) {
    std::vector<double> log_w(seqs.size());
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      auto p0_row = spec.model->next_token_logprobs(prefixes[k]);
      auto q_row = proposal.logprobs(spec, t, prefixes[k], p0_row);
      Token s = seqs[k][t - 1];
      if (t >= 2)
        cum_phi[k] += spec.log_potential(prefixes[k], t - 1);
      cum_p0[k] += p0_row[s];
      cum_q[k] += q_row[s];
      prefixes[k].push_back(s);
      log_w[k] = cum_p0[k] + cum_phi[k] +
                 tw.log_twist(t, prefixes[k], spec.conditioning) - cum_q[k];
    }
    out[t - 1].seqs = prefixes;
    out[t - 1].weights = normalized_weights(log_w);
  }
  return out;
}

inline WeightedSeqs positive_samples(const TargetSpec& spec, const TwistSet& tw,
                                     const Proposal& proposal,
                                     const LossConfig& cfg,
                                     const OracleTable* oracle, int count,
                                     RngStream& rng) {
  WeightedSeqs out;
  switch (cfg.positive_source) {
    case PositiveSource::exact_oracle: {
      if (!oracle)
        throw BadConfig("positive_samples: exact_oracle needs an oracle table");
      for (int i = 0; i < count; ++i)
        out.seqs.push_back(exact_target_sample(*oracle, rng));
      out.weights.assign(count, 1.0 / count);
      return out;
    }
    case PositiveSource::exact_rejection: {
      for (int i = 0; i < count; ++i)
        out.seqs.push_back(
            rejection_sample_exact(spec, rng, cfg.rejection_budget));
      out.weights.assign(count, 1.0 / count);
      return out;
    }
    case PositiveSource::exact_bdmc: {
      BdmcExactSource source(spec, cfg.rejection_budget);
      for (int i = 0; i < count; ++i) out.seqs.push_back(source.draw(rng));
      out.weights.assign(count, 1.0 / count);
      return out;
    }
    case PositiveSource::approximate_sis:
      return weight_by_target(spec, proposal,
                              draw_rollouts(spec, proposal, count, rng));
    case PositiveSource::approximate_smc: {
      SmcOptions opt;
      opt.schedule = ResampleSchedule::ess(0.5);
      auto r = run_smc(spec, proposal, &tw, count, RngStream(rng.next_u64()),
                       opt);
      out.seqs = r.ps.sequences;
      out.weights = normalized_weights(r.ps.log_w_block);
      return out;
    }
  }
  throw BadConfig("positive_samples: unknown source");
}

}  // namespace detail

/**
 * Gradient-descent training loop. All randomness derives from cfg.seed, so a
 * rerun with the same config reproduces the trace and checkpoint bitwise.
 * When an oracle table is supplied, exact KLs between the induced sampler and
 * the target are logged every log_every steps. Non-finite losses abort with
 * the partial trace.
 */
inline TrainResult train(const LossConfig& cfg, const TargetSpec& spec,
                         TwistSet init, const OracleTable* oracle = nullptr) {
  auto t_start = std::chrono::steady_clock::now();
  TrainResult result{std::move(init), {}, false};
  TwistSet& tw = result.twists;
  AdamState adam;
  RngStream root = RngStream::from_seed(cfg.seed).substream(rngtag::train);

  auto log_point = [&](int step, double loss, double gnorm) {
    result.trace.step.push_back(step);
    result.trace.loss.push_back(loss);
    result.trace.grad_norm.push_back(gnorm);
    double kq = std::numeric_limits<double>::quiet_NaN();
    double ks = std::numeric_limits<double>::quiet_NaN();
    if (oracle) {
      if (cfg.loss == LossKind::dpg) {
        TwistParamProposal view(tw);
        ProposalSequenceDistribution q(spec, view);
        kq = exact_kl(spec, q, KlDirection::q_to_sigma);
        ks = exact_kl(spec, q, KlDirection::sigma_to_q);
      } else {
        TwistInducedProposal induced(tw);
        ProposalSequenceDistribution q(spec, induced);
        kq = exact_kl(spec, q, KlDirection::q_to_sigma);
        ks = exact_kl(spec, q, KlDirection::sigma_to_q);
      }
    }
    result.trace.kl_q_sigma.push_back(kq);
    result.trace.kl_sigma_q.push_back(ks);
  };

  for (int step = 0; step < cfg.steps; ++step) {
    RngStream rng = root.substream(static_cast<std::uint64_t>(step));
    BaseProposal base;
    TwistInducedProposal induced(tw);
    const Proposal& neg_proposal =
        cfg.negative_proposal == NegativeProposal::base
            ? static_cast<const Proposal&>(base)
            : static_cast<const Proposal&>(induced);

    double loss = 0.0;
    std::vector<double> grad;
    switch (cfg.loss) {
      case LossKind::ctl: {
        auto positives = detail::positive_samples(spec, tw, neg_proposal, cfg,
                                                  oracle, cfg.batch, rng);
        auto rollouts =
            detail::draw_rollouts(spec, neg_proposal, cfg.batch, rng);
        auto negatives = detail::ctl_negatives(spec, tw, neg_proposal, rollouts);
        grad = ctl_grad(tw, spec, positives, negatives, &loss);
        break;
      }
      case LossKind::rl:
      case LossKind::softq: {
        auto batch = detail::draw_rollouts(spec, neg_proposal, cfg.batch, rng);
        if (cfg.positive_source == PositiveSource::exact_oracle && oracle) {
          for (int i = 0; i < cfg.batch / 2; ++i)
            batch[i] = exact_target_sample(*oracle, rng);
        }
        auto lg = cfg.loss == LossKind::rl ? rl_grad(tw, tw, spec, batch)
                                           : softq_grad(tw, tw, spec, batch);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
      case LossKind::sixo: {
        auto positives = detail::positive_samples(spec, tw, neg_proposal, cfg,
                                                  oracle, cfg.batch, rng);
        auto negatives = detail::draw_rollouts(spec, base, cfg.batch, rng);
        auto lg = sixo_grad(tw, spec, positives, negatives);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
      case LossKind::fudge: {
        auto rollouts = detail::draw_rollouts(spec, base, cfg.batch, rng);
        auto lg = fudge_grad(tw, spec, rollouts);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
      case LossKind::cdq: {
        auto batch = detail::draw_rollouts(spec, neg_proposal, cfg.batch, rng);
        auto lg = cdq_grad(tw, spec, batch);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
      case LossKind::cdfudge: {
        auto rollouts = detail::draw_rollouts(spec, base, cfg.batch, rng);
        auto lg = cdfudge_grad(tw, spec, rollouts);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
      case LossKind::pcl1: {
        TwistSet frozen = tw;
        TwistInducedProposal frozen_q(frozen);
        const Proposal& q = cfg.negative_proposal == NegativeProposal::base
                                ? static_cast<const Proposal&>(base)
                                : static_cast<const Proposal&>(frozen_q);
        auto batch = detail::draw_rollouts(spec, q, cfg.batch, rng);
        auto lg = pcl1_grad(tw, spec, q, batch);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
      case LossKind::dpg: {
        TwistParamProposal view(tw);
        auto samples = detail::draw_rollouts(spec, view, cfg.batch, rng);
        auto lg = dpg_grad(tw, spec, samples);
        loss = lg.loss;
        grad = std::move(lg.grad);
        break;
      }
    }

    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
      log_point(step, loss, gnorm);
      result.diverged = true;
      break;
    }
    if (step % cfg.log_every == 0) log_point(step, loss, gnorm);
    if (cfg.adam)
      adam_step(tw.params(), grad, cfg.learning_rate, cfg.adam_beta1,
                cfg.adam_beta2, cfg.adam_eps, adam);
    else
      sgd_step(tw.params(), grad, cfg.learning_rate);
  }
  result.trace.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

}  // namespace twistsmc::learn
