#pragma once

#include <cmath>
#include <optional>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "twistsmc/errors.hpp"
#include "twistsmc/logspace.hpp"
#include "twistsmc/seqmodel.hpp"

namespace twistsmc {

// Sequence-keyed lookup with a default, the tabular backing for potentials,
// reward functions and classifier probabilities.
struct SeqTable {
  double default_value = 0.0;
  std::unordered_map<Sequence, double, SequenceHash> values;

  double at(const Sequence& seq) const {
    auto it = values.find(seq);
    return it == values.end() ? default_value : it->second;
  }
};

enum class PotentialKind {
  terminal_indicator_threshold,
  terminal_exp_reward,
  terminal_classifier_prob,
  continuation_likelihood,
  tabular_terminal,
  intermediate_product,
};

inline const char* to_string(PotentialKind k) {
  switch (k) {
    case PotentialKind::terminal_indicator_threshold: return "indicator_threshold";
    case PotentialKind::terminal_exp_reward: return "exp_reward";
    case PotentialKind::terminal_classifier_prob: return "classifier_prob";
    case PotentialKind::continuation_likelihood: return "continuation_likelihood";
    case PotentialKind::tabular_terminal: return "tabular_terminal";
    case PotentialKind::intermediate_product: return "intermediate_product";
  }
  return "?";
}

/**
 * Per-step potential phi_t. Terminal kinds return 0 in log scale for t < T;
 * intermediate_product looks up a per-step table. Indicator potentials carry
 * an epsilon floor so log phi stays finite (-inf only when eps == 0).
 */
class Potential {
 public:
  static Potential indicator_threshold(SeqTable reward, double eta,
                                       double eps = 1e-16) {
    Potential p(PotentialKind::terminal_indicator_threshold);
    p.reward_ = std::move(reward);
    p.eta_ = eta;
    p.eps_ = eps;
    return p;
  }

  static Potential exp_reward(SeqTable reward, double beta) {
    Potential p(PotentialKind::terminal_exp_reward);
    p.reward_ = std::move(reward);
    p.beta_ = beta;
    return p;
  }

  static Potential classifier_prob(SeqTable prob) {
    Potential p(PotentialKind::terminal_classifier_prob);
    if (prob.default_value <= 0.0 || prob.default_value > 1.0)
      throw BadConfig("classifier_prob: default must lie in (0, 1]");
    for (const auto& [k, v] : prob.values)
      if (v <= 0.0 || v > 1.0)
        throw BadConfig("classifier_prob: values must lie in (0, 1]");
    p.reward_ = std::move(prob);
    return p;
  }

  // phi(s_{1:T}) = p0(continuation | s_{1:T}) under ext, whose first T steps
  // must agree with the target's base model; ext.horizon() >= T + |cont|.
  static Potential continuation_likelihood(SeqModelPtr ext,
                                           Sequence continuation) {
    Potential p(PotentialKind::continuation_likelihood);
    if (!ext) throw BadConfig("continuation_likelihood: missing model");
    p.ext_model_ = std::move(ext);
    p.continuation_ = std::move(continuation);
    return p;
  }

  static Potential tabular_terminal(SeqTable phi) {
    Potential p(PotentialKind::tabular_terminal);
    for (const auto& [k, v] : phi.values)
      if (v < 0.0) throw BadConfig("tabular_terminal: values must be >= 0");
    if (phi.default_value < 0.0)
      throw BadConfig("tabular_terminal: default must be >= 0");
    p.reward_ = std::move(phi);
    return p;
  }

  static Potential unit() {
    SeqTable t;
    t.default_value = 1.0;
    return tabular_terminal(std::move(t));
  }

  // one natural-scale table per step t = 1..T (phi_t >= 0)
  static Potential intermediate_product(std::vector<SeqTable> per_step) {
    Potential p(PotentialKind::intermediate_product);
    p.per_step_ = std::move(per_step);
    return p;
  }

  PotentialKind kind() const { return kind_; }
  double eps() const { return eps_; }
  double eta() const { return eta_; }
  double beta() const { return beta_; }
  const SeqTable& table() const { return reward_; }
  const std::vector<SeqTable>& per_step_tables() const { return per_step_; }
  const SeqModelPtr& ext_model() const { return ext_model_; }
  const Sequence& continuation() const { return continuation_; }

  bool has_intermediate() const {
    return kind_ == PotentialKind::intermediate_product;
  }

  double log_phi(const Sequence& seq, int t, int horizon) const {
    if (kind_ == PotentialKind::intermediate_product) {
      if (t < 1 || t > static_cast<int>(per_step_.size()))
        throw BadStep("intermediate_product: step out of range");
      return std::log(per_step_[t - 1].at(seq));
    }
    if (t != horizon) return 0.0;  // terminal kinds: phi_t = 1 for t < T
    switch (kind_) {
      case PotentialKind::terminal_indicator_threshold: {
        bool in_set = reward_.at(seq) <= eta_;
        return std::log(eps_ + (in_set ? 1.0 : 0.0));
      }
      case PotentialKind::terminal_exp_reward:
        return beta_ * reward_.at(seq);
      case PotentialKind::terminal_classifier_prob:
        return std::log(reward_.at(seq));
      case PotentialKind::continuation_likelihood: {
        Sequence full = seq;
        full.insert(full.end(), continuation_.begin(), continuation_.end());
        return ext_model_->sequence_logprob(full) -
               ext_model_->sequence_logprob(seq);
      }
      case PotentialKind::tabular_terminal:
        return std::log(reward_.at(seq));
      default:
        break;
    }
    throw Error("unreachable potential kind");
  }

  // Upper bound on phi usable as a rejection constant with the base proposal.
  // Observation likelihoods are probabilities, so the joint form inherits the
  // same constant. Unbounded kinds (exp_reward) are not certifiable.
  std::optional<double> certified_upper_bound() const {
    switch (kind_) {
      case PotentialKind::terminal_indicator_threshold: return 1.0 + eps_;
      case PotentialKind::terminal_classifier_prob: return 1.0;
      case PotentialKind::continuation_likelihood: return 1.0;
      case PotentialKind::tabular_terminal: {
        double m = reward_.default_value;
        for (const auto& [k, v] : reward_.values) m = std::max(m, v);
        return m > 0.0 ? std::optional<double>(m) : std::nullopt;
      }
      default: return std::nullopt;
    }
  }

 private:
  explicit Potential(PotentialKind kind) : kind_(kind) {}

  PotentialKind kind_;
  SeqTable reward_;
  double eta_ = 0.0;
  double beta_ = 1.0;
  double eps_ = 1e-16;
  std::vector<SeqTable> per_step_;
  SeqModelPtr ext_model_;
  Sequence continuation_;
};

// Either a symbol from a finite alphabet (tabular likelihoods) or a token
// continuation (infilling-style observations). Equality is the variant's.
using Observation = std::variant<int, Sequence>;

enum class ObservationKind { continuation, tabular_likelihood };

class ObservationModel {
 public:
  // o_T = s_{T+1:T+c} under ext; ext.horizon() == T + c and its first T steps
  // agree with the base model.
  static ObservationModel continuation(SeqModelPtr ext, int c) {
    ObservationModel m(ObservationKind::continuation);
    if (!ext || c < 1) throw BadConfig("continuation observation: bad config");
    if (ext->horizon() < c + 1)
      throw BadConfig("continuation observation: model horizon too short");
    m.ext_model_ = std::move(ext);
    m.continuation_len_ = c;
    return m;
  }

  // per-sequence distributions over a finite alphabet; rows normalized
  static ObservationModel tabular(
      int alphabet, std::vector<double> default_probs,
      std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows) {
    ObservationModel m(ObservationKind::tabular_likelihood);
    if (alphabet < 1) throw BadConfig("tabular observation: empty alphabet");
    auto normalize = [&](std::vector<double>& row) {
      if (static_cast<int>(row.size()) != alphabet)
        throw BadConfig("tabular observation: row width != alphabet");
      double s = 0.0;
      for (double p : row) {
        if (p < 0.0) throw BadConfig("tabular observation: negative prob");
        s += p;
      }
      if (!(s > 0.0)) throw BadConfig("tabular observation: zero row");
      for (double& p : row) p /= s;
    };
    normalize(default_probs);
    for (auto& [k, row] : rows) normalize(row);
    m.alphabet_ = alphabet;
    m.default_probs_ = std::move(default_probs);
    m.rows_ = std::move(rows);
    return m;
  }

  ObservationKind kind() const { return kind_; }
  int alphabet() const { return alphabet_; }
  int continuation_len() const { return continuation_len_; }
  const SeqModelPtr& ext_model() const { return ext_model_; }

  double log_likelihood(const Sequence& seq, const Observation& o) const {
    if (kind_ == ObservationKind::tabular_likelihood) {
      const int* id = std::get_if<int>(&o);
      if (!id || *id < 0 || *id >= alphabet_)
        throw BadInput("tabular observation: bad symbol");
      return std::log(probs_for(seq)[*id]);
    }
    const Sequence* cont = std::get_if<Sequence>(&o);
    if (!cont || static_cast<int>(cont->size()) != continuation_len_)
      throw BadInput("continuation observation: bad length");
    Sequence full = seq;
    full.insert(full.end(), cont->begin(), cont->end());
    return ext_model_->sequence_logprob(full) -
           ext_model_->sequence_logprob(seq);
  }

  Observation sample(const Sequence& seq, RngStream& rng) const {
    if (kind_ == ObservationKind::tabular_likelihood) {
      const auto& p = probs_for(seq);
      std::vector<double> logits(p.size());
      for (std::size_t i = 0; i < p.size(); ++i)
        logits[i] = p[i] > 0.0 ? std::log(p[i]) : kNegInf;
      return sample_categorical_logits(logits, rng);
    }
    Sequence full = seq;
    for (int j = 0; j < continuation_len_; ++j) {
      auto lp = ext_model_->next_token_logprobs(full);
      full.push_back(static_cast<Token>(sample_categorical_logits(lp, rng)));
    }
    return Sequence(full.begin() + seq.size(), full.end());
  }

  // number of distinct observation values (used for conditional twist tables)
  std::uint64_t cardinality(int vocab) const {
    return kind_ == ObservationKind::tabular_likelihood
               ? static_cast<std::uint64_t>(alphabet_)
               : ipow_u64(vocab, continuation_len_);
  }

  std::uint64_t index_of(const Observation& o, int vocab) const {
    if (kind_ == ObservationKind::tabular_likelihood)
      return static_cast<std::uint64_t>(std::get<int>(o));
    return prefix_rank(std::get<Sequence>(o), vocab);
  }

 private:
  explicit ObservationModel(ObservationKind kind) : kind_(kind) {}

  const std::vector<double>& probs_for(const Sequence& seq) const {
    auto it = rows_.find(seq);
    return it == rows_.end() ? default_probs_ : it->second;
  }

  ObservationKind kind_;
  int alphabet_ = 0;
  int continuation_len_ = 0;
  SeqModelPtr ext_model_;
  std::vector<double> default_probs_;
  std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows_;
};

/**
 * Target sigma(s_{1:T}) proportional to p0(s_{1:T}) * prod_t phi_t(s_{1:t}),
 * optionally conditioned on an observation: the likelihood term enters the
 * final-step potential, so downstream samplers see one unnormalized density.
 */
struct TargetSpec {
  SeqModelPtr model;
  Potential potential = Potential::unit();
  std::optional<ObservationModel> observation;
  std::optional<Observation> conditioning;

  int horizon() const { return model->horizon(); }
  int vocab() const { return model->vocab(); }

  // log phi_t(s_{1:t}); at t == T includes log sigma(o_T | s_{1:T})
  double log_potential(const Sequence& seq, int t) const {
    if (static_cast<int>(seq.size()) != t)
      throw BadStep("log_potential: sequence length must equal t");
    if (t < 1 || t > horizon())
      throw BadStep("log_potential: step out of range");
    double lp = potential.log_phi(seq, t, horizon());
    if (t == horizon() && observation.has_value()) {
      if (!conditioning.has_value())
        throw MissingObservation(
            "log_potential: conditional spec has no conditioning value");
      lp += observation->log_likelihood(seq, *conditioning);
    }
    return lp;
  }

  double log_unnormalized(const Sequence& seq) const {
    if (static_cast<int>(seq.size()) != horizon())
      throw BadStep("log_unnormalized: sequence must have length T");
    double lp = model->sequence_logprob(seq);
    for (int t = 1; t <= horizon(); ++t)
      lp += log_potential(Sequence(seq.begin(), seq.begin() + t), t);
    return lp;
  }
};

// Joint draw (s_{1:T}, o_T) from p0 * sigma(o|s); the sequence is an exact
// posterior sample for the realized observation.
inline std::pair<Sequence, Observation> bdmc_exact_posterior_sample(
    const TargetSpec& spec, RngStream& rng) {
  if (!spec.observation.has_value())
    throw Unsupported("bdmc sample: spec has no observation model");
  Sequence seq = spec.model->sample_sequence(rng, spec.horizon());
  Observation o = spec.observation->sample(seq, rng);
  return {std::move(seq), std::move(o)};
}

// Accept s ~ p0 with probability phi(s)/M (times the observation likelihood
// for conditional specs). Only potentials with a certified bound qualify.
inline Sequence rejection_sample_exact(const TargetSpec& spec, RngStream& rng,
                                       int max_draws) {
  auto bound = spec.potential.certified_upper_bound();
  if (!bound.has_value())
    throw Unsupported("rejection sampling: potential bound not certifiable");
  const double log_m = std::log(*bound);
  for (int i = 0; i < max_draws; ++i) {
    Sequence seq = spec.model->sample_sequence(rng, spec.horizon());
    double log_accept = -log_m;
    for (int t = 1; t <= spec.horizon(); ++t)
      log_accept +=
          spec.log_potential(Sequence(seq.begin(), seq.begin() + t), t);
    if (std::log(rng.uniform_open()) < log_accept) return seq;
  }
  throw Exhausted("rejection sampling: draw budget exhausted");
}

}  // namespace twistsmc
