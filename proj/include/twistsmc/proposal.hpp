#pragma once

#include <memory>
#include <vector>

#include "twistsmc/oracle.hpp"
#include "twistsmc/targets.hpp"
#include "twistsmc/twist.hpp"

namespace twistsmc {

// One-step proposal over the next token. Implementations receive the base
// model row for the prefix so it is computed once per extension.
class Proposal {
 public:
  virtual ~Proposal() = default;
  virtual std::vector<double> logprobs(
      const TargetSpec& spec, int t, const Sequence& prefix,
      const std::vector<double>& p0_row) const = 0;
};

class BaseProposal : public Proposal {
 public:
  std::vector<double> logprobs(const TargetSpec&, int, const Sequence&,
                               const std::vector<double>& p0_row) const override {
    return p0_row;
  }
};

class TwistInducedProposal : public Proposal {
 public:
  TwistInducedProposal(const TwistSet& tw,
                       FinalStepMode mode = FinalStepMode::exact_phi)
      : tw_(&tw), mode_(mode) {}

  std::vector<double> logprobs(const TargetSpec& spec, int t,
                               const Sequence& prefix,
                               const std::vector<double>& p0_row) const override {
    return twist_induced_proposal_logprobs(*tw_, spec, t, prefix, mode_,
                                           &p0_row);
  }

  const TwistSet& twists() const { return *tw_; }
  FinalStepMode final_mode() const { return mode_; }

 private:
  const TwistSet* tw_;
  FinalStepMode mode_;
};

// A TwistSet viewed as a learned proposal q(s_t|s_{1:t-1}) ~ p0 * psi at every
// step including T; the parameterization DPG trains.
class TwistParamProposal : public Proposal {
 public:
  explicit TwistParamProposal(const TwistSet& tw) : tw_(&tw) {}

  std::vector<double> logprobs(const TargetSpec& spec, int t,
                               const Sequence& prefix,
                               const std::vector<double>& p0_row) const override {
    std::vector<double> logits = p0_row;
    Sequence child = prefix;
    child.push_back(0);
    for (int s = 0; s < spec.vocab(); ++s) {
      child.back() = static_cast<Token>(s);
      logits[s] += tw_->log_twist(t, child, spec.conditioning);
    }
    return log_softmax(logits);
  }

  const TwistSet& twists() const { return *tw_; }

 private:
  const TwistSet* tw_;
};

inline TwistParamProposal proposal_param_view(const TwistSet& tw) {
  return TwistParamProposal(tw);
}

// Product of per-step proposal conditionals as a normalized full-sequence
// distribution (samplable and evaluable).
class ProposalSequenceDistribution : public SequenceDistribution {
 public:
  ProposalSequenceDistribution(const TargetSpec& spec, const Proposal& q)
      : spec_(&spec), q_(&q) {}

  double log_prob(const Sequence& seq) const override {
    double lp = 0.0;
    Sequence prefix;
    prefix.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      auto p0 = spec_->model->next_token_logprobs(prefix);
      auto row = q_->logprobs(*spec_, static_cast<int>(i) + 1, prefix, p0);
      lp += row[seq[i]];
      prefix.push_back(seq[i]);
    }
    return lp;
  }

  Sequence sample(RngStream& rng) const override {
    Sequence seq;
    seq.reserve(spec_->horizon());
    for (int t = 1; t <= spec_->horizon(); ++t) {
      auto p0 = spec_->model->next_token_logprobs(seq);
      auto row = q_->logprobs(*spec_, t, seq, p0);
      seq.push_back(static_cast<Token>(sample_categorical_logits(row, rng)));
    }
    return seq;
  }

 private:
  const TargetSpec* spec_;
  const Proposal* q_;
};

}  // namespace twistsmc
